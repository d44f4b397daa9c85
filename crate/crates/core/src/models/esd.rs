use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::kg::{StateKind, StateSymbol};
use crate::slb::{EffectEvent, FeatureRef, Polarity};
use crate::stream::{secs_to_ns, SampleEnvelope, TimestampNs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsdConfig {
    pub input_topic: String,
    /// Payload field to watch; the first field when unset.
    #[serde(default)]
    pub field: Option<String>,
    pub node_id: String,
    pub rising_state: String,
    pub falling_state: String,
    #[serde(default = "default_background")]
    pub background_state: String,
    pub pre_window_s: f64,
    pub post_window_s: f64,
    pub threshold: f64,
    pub min_gap_s: f64,
    pub background_buffer_len: usize,
    /// Negative samples per hour.
    pub negative_rate: f64,
    /// Background tile length; `pre + post` when unset.
    #[serde(default)]
    pub background_window_s: Option<f64>,
    /// Minimum distance between a background tile and detector activity;
    /// `pre + post` when unset.
    #[serde(default)]
    pub background_guard_s: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_background() -> String {
    "background".into()
}

impl EsdConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.threshold > 0.0) {
            return Err(ModelError::InvalidConfig("threshold must be > 0".into()));
        }
        if !(self.pre_window_s > 0.0 && self.post_window_s > 0.0) {
            return Err(ModelError::InvalidConfig("windows must be > 0".into()));
        }
        if self.background_window_s.is_some_and(|w| !(w > 0.0))
            || self.background_guard_s.is_some_and(|g| !(g >= 0.0))
        {
            return Err(ModelError::InvalidConfig("background window must be > 0, guard >= 0".into()));
        }
        if !(self.negative_rate >= 0.0) || !(self.min_gap_s >= 0.0) {
            return Err(ModelError::InvalidConfig("negative_rate and min_gap must be >= 0".into()));
        }
        Ok(())
    }
}

struct Region {
    start_ts: TimestampNs,
    rising: bool,
    best_ts: TimestampNs,
    best_abs: f64,
}

/// Streaming step detector. For each sample time `t` with complete windows,
/// compares the mean over `[t - pre, t)` with the mean over `[t, t + post)`;
/// a contiguous run of `|delta| > threshold` yields one event at its peak.
pub struct StepDetector {
    cfg: EsdConfig,
    pre_ns: i64,
    post_ns: i64,
    min_gap_ns: i64,
    guard_ns: i64,
    tile_ns: i64,
    /// (ts, value, running sum through this sample)
    buf: VecDeque<(TimestampNs, f64, f64)>,
    base: usize,
    running: f64,
    first_ts: Option<TimestampNs>,
    next_center: usize,
    lo_pre: usize,
    hi_post: usize,
    region: Option<Region>,
    activity: VecDeque<(TimestampNs, TimestampNs)>,
    last_event_ts: Option<TimestampNs>,
    next_tile: Option<TimestampNs>,
    background: VecDeque<FeatureRef>,
    rng: ChaCha8Rng,
    next_negative_ns: Option<TimestampNs>,
    emitted: u64,
    negatives: u64,
}

impl StepDetector {
    pub fn new(cfg: EsdConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let pre_ns = secs_to_ns(cfg.pre_window_s);
        let post_ns = secs_to_ns(cfg.post_window_s);
        Ok(Self {
            pre_ns,
            post_ns,
            min_gap_ns: secs_to_ns(cfg.min_gap_s),
            guard_ns: cfg.background_guard_s.map_or(pre_ns + post_ns, secs_to_ns),
            tile_ns: cfg.background_window_s.map_or(pre_ns + post_ns, secs_to_ns),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            buf: VecDeque::new(),
            base: 0,
            running: 0.0,
            first_ts: None,
            next_center: 0,
            lo_pre: 0,
            hi_post: 0,
            region: None,
            activity: VecDeque::new(),
            last_event_ts: None,
            next_tile: None,
            background: VecDeque::new(),
            next_negative_ns: None,
            emitted: 0,
            negatives: 0,
        })
    }

    pub fn config(&self) -> &EsdConfig {
        &self.cfg
    }

    pub fn background_windows(&self) -> impl Iterator<Item = &FeatureRef> {
        self.background.iter()
    }

    /// Effect transitions detected so far (closed regions only).
    pub fn activity(&self) -> impl Iterator<Item = &(TimestampNs, TimestampNs)> {
        self.activity.iter()
    }

    pub fn push_envelope(&mut self, env: &SampleEnvelope) -> Vec<EffectEvent> {
        let v = match &self.cfg.field {
            Some(f) => env.payload.field(f),
            None => env.payload.values().and_then(|mut it| it.next()),
        };
        match v {
            Some(v) => self.push(env.timestamp_ns, v),
            None => Vec::new(),
        }
    }

    fn at(&self, global: usize) -> (TimestampNs, f64, f64) {
        self.buf[global - self.base]
    }

    fn end(&self) -> usize {
        self.base + self.buf.len()
    }

    /// Sum of values in `[from, to)` by global index.
    fn sum(&self, from: usize, to: usize) -> f64 {
        let hi = self.at(to - 1).2;
        let lo = if from > self.base { self.at(from - 1).2 } else { self.at(from).2 - self.at(from).1 };
        hi - lo
    }

    /// Feeds one sample; timestamps must not decrease.
    pub fn push(&mut self, ts: TimestampNs, value: f64) -> Vec<EffectEvent> {
        if !value.is_finite() || self.buf.back().is_some_and(|b| ts < b.0) {
            return Vec::new();
        }
        self.first_ts.get_or_insert(ts);
        self.running += value;
        self.buf.push_back((ts, value, self.running));
        let mut out = Vec::new();
        while self.next_center < self.end() {
            let tc = self.at(self.next_center).0;
            if ts < tc + self.post_ns {
                break;
            }
            self.process_center(tc, &mut out);
            self.next_center += 1;
        }
        self.trim();
        out
    }

    fn process_center(&mut self, tc: TimestampNs, out: &mut Vec<EffectEvent>) {
        let c = self.next_center;
        while self.at(self.lo_pre).0 < tc - self.pre_ns {
            self.lo_pre += 1;
        }
        self.hi_post = self.hi_post.max(c);
        while self.hi_post < self.end() && self.at(self.hi_post).0 < tc + self.post_ns {
            self.hi_post += 1;
        }
        let complete_pre = tc - self.pre_ns >= self.first_ts.expect("seen");
        let (n_pre, n_post) = (c - self.lo_pre, self.hi_post - c);
        let delta = if complete_pre && n_pre > 0 && n_post > 0 {
            Some(self.sum(c, self.hi_post) / n_post as f64 - self.sum(self.lo_pre, c) / n_pre as f64)
        } else {
            None
        };
        match delta {
            Some(d) if d.abs() > self.cfg.threshold => {
                let rising = d > 0.0;
                if self.region.as_ref().is_some_and(|r| r.rising != rising) {
                    self.close_region(tc, out);
                }
                let r = self.region.get_or_insert(Region {
                    start_ts: tc,
                    rising,
                    best_ts: tc,
                    best_abs: d.abs(),
                });
                if d.abs() > r.best_abs {
                    r.best_abs = d.abs();
                    r.best_ts = tc;
                }
            }
            _ => self.close_region(tc, out),
        }
        self.promote_background(tc);
    }

    fn close_region(&mut self, tc: TimestampNs, out: &mut Vec<EffectEvent>) {
        let Some(r) = self.region.take() else { return };
        self.activity.push_back((r.start_ts, tc));
        if self.last_event_ts.is_some_and(|last| r.best_ts - last < self.min_gap_ns) {
            return;
        }
        self.last_event_ts = Some(r.best_ts);
        self.emitted += 1;
        let margin = r.best_abs;
        let confidence = 1.0 / (1.0 + (-(margin - self.cfg.threshold) / self.cfg.threshold).exp());
        let symbol = if r.rising { &self.cfg.rising_state } else { &self.cfg.falling_state };
        out.push(EffectEvent {
            event_id: format!("{}-{}", self.cfg.node_id, self.emitted),
            node_id: self.cfg.node_id.clone(),
            state: StateSymbol::new(&self.cfg.node_id, symbol, StateKind::Transition),
            transition_ts_ns: r.best_ts,
            confidence,
            feature_ref: Some(FeatureRef {
                topic: self.cfg.input_topic.clone(),
                t0_ns: r.best_ts - self.pre_ns,
                t1_ns: r.best_ts + self.post_ns,
            }),
            polarity: Polarity::Positive,
        });
    }

    /// Tiles time into windows of `pre + post`; a tile joins the background
    /// buffer once no activity lies within `guard` of it.
    fn promote_background(&mut self, tc: TimestampNs) {
        if self.cfg.background_buffer_len == 0 {
            return;
        }
        let w = self.tile_ns;
        let tile = *self.next_tile.get_or_insert(self.first_ts.expect("seen"));
        if tc < tile + w + self.guard_ns {
            return;
        }
        let (lo, hi) = (tile - self.guard_ns, tile + w + self.guard_ns);
        let open = self.region.as_ref().is_some_and(|r| r.start_ts <= hi);
        let busy = open || self.activity.iter().any(|&(a, b)| a <= hi && b >= lo);
        if !busy {
            if self.background.len() == self.cfg.background_buffer_len {
                self.background.pop_front();
            }
            self.background.push_back(FeatureRef {
                topic: self.cfg.input_topic.clone(),
                t0_ns: tile,
                t1_ns: tile + w,
            });
        }
        self.next_tile = Some(tile + w);
        while self.activity.front().is_some_and(|&(_, b)| b < tile + w - self.guard_ns) {
            self.activity.pop_front();
        }
    }

    fn trim(&mut self) {
        let keep_from = self.lo_pre.min(self.next_center);
        while self.base < keep_from.saturating_sub(1) {
            self.buf.pop_front();
            self.base += 1;
        }
    }

    /// Closes any open region at end of input.
    pub fn finish(&mut self) -> Vec<EffectEvent> {
        let mut out = Vec::new();
        if let Some(ts) = self.buf.back().map(|b| b.0) {
            self.close_region(ts, &mut out);
        }
        out
    }

    /// Uniform draw from the background buffer.
    pub fn draw_background(&mut self) -> Option<(usize, FeatureRef)> {
        if self.background.is_empty() {
            return None;
        }
        let i = self.rng.random_range(0..self.background.len());
        Some((i, self.background[i].clone()))
    }

    /// Emits at most one negative sample per `3600 / negative_rate` seconds.
    pub fn sample_negative(&mut self, now_ns: TimestampNs) -> Option<EffectEvent> {
        if self.cfg.negative_rate <= 0.0 {
            return None;
        }
        let period = secs_to_ns(3600.0 / self.cfg.negative_rate).max(1);
        let due = *self.next_negative_ns.get_or_insert(now_ns);
        if now_ns < due {
            return None;
        }
        self.next_negative_ns = Some(due.max(now_ns - period) + period);
        let (_, window) = self.draw_background()?;
        self.negatives += 1;
        Some(EffectEvent {
            event_id: format!("{}-neg-{}", self.cfg.node_id, self.negatives),
            node_id: self.cfg.node_id.clone(),
            state: StateSymbol::new(&self.cfg.node_id, &self.cfg.background_state, StateKind::Level),
            transition_ts_ns: window.t1_ns,
            confidence: 1.0,
            feature_ref: Some(window),
            polarity: Polarity::NegativeSample,
        })
    }
}

/// Runs a detector over a finished series.
pub fn esd_detect(cfg: EsdConfig, samples: &[(TimestampNs, f64)]) -> Result<Vec<EffectEvent>, ModelError> {
    let mut d = StepDetector::new(cfg)?;
    let mut out: Vec<EffectEvent> = samples.iter().flat_map(|&(t, v)| d.push(t, v)).collect();
    out.extend(d.finish());
    Ok(out)
}
