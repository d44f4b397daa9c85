use std::fmt::Display;

use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub observed: String,
    pub required: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, observed: impl Display, required: impl Display) -> Self {
        Self {
            name: name.into(),
            passed,
            observed: observed.to_string(),
            required: required.to_string(),
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, min: f64) -> Self {
        Self::new(name, value >= min, fmt_num(value), format!(">= {}", fmt_num(min)))
    }

    pub fn at_most(name: impl Into<String>, value: f64, max: f64) -> Self {
        Self::new(name, value <= max, fmt_num(value), format!("<= {}", fmt_num(max)))
    }

    pub fn equals<T: PartialEq + Display>(name: impl Into<String>, value: T, want: T) -> Self {
        let passed = value == want;
        Self::new(name, passed, value, format!("== {want}"))
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {} (required {})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.observed,
            self.required
        )
    }
}

pub fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else if v.abs() >= 100.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.4}")
    }
}

/// Output of one command: metrics plus the checks it was asked to run.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub command: String,
    pub passed: bool,
    pub metrics: Value,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn new(command: impl Into<String>, metrics: Value, checks: Vec<Check>) -> Self {
        Self {
            command: command.into(),
            passed: checks.iter().all(|c| c.passed),
            metrics,
            checks,
        }
    }

    pub fn render_text(&self) -> String {
        let mut rows = Vec::new();
        flatten("", &self.metrics, &mut rows);
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = format!("== {} ==\n", self.command);
        for (k, v) in rows {
            out.push_str(&format!("{k:<width$}  {v}\n"));
        }
        for c in &self.checks {
            out.push_str(&c.line());
            out.push('\n');
        }
        out
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                flatten(&key(k), v, out);
            }
        }
        Value::Array(a) => {
            for (i, v) in a.iter().enumerate() {
                flatten(&key(&i.to_string()), v, out);
            }
        }
        Value::Number(n) => out.push((prefix.to_string(), n.as_f64().map_or(n.to_string(), fmt_num))),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
