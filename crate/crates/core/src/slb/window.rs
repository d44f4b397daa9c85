use serde::{Deserialize, Serialize};

use super::SlbError;
use crate::stream::TimestampNs;

/// Closed cause window `[start_ns, end_ns]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CauseWindow {
    pub start_ns: TimestampNs,
    pub end_ns: TimestampNs,
    /// Start was raised to the stream epoch.
    pub clamped: bool,
}

impl CauseWindow {
    pub fn duration_ns(&self) -> i64 {
        self.end_ns - self.start_ns
    }
}

/// Places the cause window for an effect at `effect_ts_ns`: it ends `tau_ns`
/// before the effect and lasts `duration_ns`.
pub fn compute_cause_window(
    effect_ts_ns: TimestampNs,
    tau_ns: i64,
    duration_ns: i64,
    epoch_ns: TimestampNs,
) -> Result<CauseWindow, SlbError> {
    if tau_ns < 0 {
        return Err(SlbError::InvalidWindow(format!("negative tau {tau_ns}")));
    }
    if duration_ns <= 0 {
        return Err(SlbError::InvalidWindow(format!("non-positive duration {duration_ns}")));
    }
    let end_ns = effect_ts_ns - tau_ns;
    let start_ns = end_ns - duration_ns;
    if start_ns < epoch_ns {
        return Ok(CauseWindow {
            start_ns: epoch_ns.min(end_ns),
            end_ns,
            clamped: true,
        });
    }
    Ok(CauseWindow {
        start_ns,
        end_ns,
        clamped: false,
    })
}
