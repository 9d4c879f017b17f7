//! Page-Hinkley change detection over absolute prediction error, and the
//! feedback event wire format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    pub delta: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    pub delta_factor: f64,
    pub lambda_factor: f64,
    pub scale_floor: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            delta_factor: 0.05,
            lambda_factor: 50.0,
            scale_floor: 1e-9,
        }
    }
}

impl DriftConfig {
    /// Detector parameters scaled by the model's training residual spread.
    pub fn params_for(&self, train_residual_std: f64) -> DriftParams {
        let s = train_residual_std.max(self.scale_floor);
        DriftParams {
            delta: self.delta_factor * s,
            lambda: self.lambda_factor * s,
        }
    }
}

impl DriftParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::validation("delta must be finite and >= 0"));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::validation("lambda must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageHinkley {
    pub params: DriftParams,
    pub n: u64,
    pub mean: f64,
    pub cumulative: f64,
    pub minimum: f64,
    /// Observation index (1-based) at which `minimum` was last reached.
    pub minimum_at: u64,
    pub alarm: bool,
    /// Observation index at which the alarm first fired.
    pub alarm_at: Option<u64>,
}

impl PageHinkley {
    pub fn new(params: DriftParams) -> Self {
        Self {
            params,
            n: 0,
            mean: 0.0,
            cumulative: 0.0,
            minimum: 0.0,
            minimum_at: 0,
            alarm: false,
            alarm_at: None,
        }
    }

    /// Feeds one absolute error; returns whether this observation raised the alarm.
    pub fn update(&mut self, error: f64) -> bool {
        self.n += 1;
        self.mean += (error - self.mean) / self.n as f64;
        self.cumulative += (error - self.mean) - self.params.delta;
        if self.cumulative <= self.minimum {
            self.minimum = self.cumulative;
            self.minimum_at = self.n;
        }
        let fired = !self.alarm && self.cumulative - self.minimum > self.params.lambda;
        if fired {
            self.alarm = true;
            self.alarm_at = Some(self.n);
        }
        fired
    }

    /// [`update`](Self::update) with input validation.
    pub fn observe(&mut self, error: f64) -> Result<bool> {
        if !(error.is_finite() && error >= 0.0) {
            return Err(Error::validation(format!("residual magnitude must be finite and >= 0, got {error}")));
        }
        Ok(self.update(error))
    }

    pub fn statistic(&self) -> f64 {
        self.cumulative - self.minimum
    }

    /// First observation believed to follow the change.
    pub fn change_point(&self) -> Option<u64> {
        self.alarm_at.map(|_| self.minimum_at + 1)
    }
}

/// One labelled outcome reported by an edge agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackEvent {
    pub deployment_id: String,
    pub seq: u64,
    pub features: std::collections::BTreeMap<String, f64>,
    pub prediction: f64,
    pub observation: f64,
    pub ts: String,
}

impl FeedbackEvent {
    pub fn abs_error(&self) -> f64 {
        (self.observation - self.prediction).abs()
    }
}

pub fn parse_feedback_ndjson(body: &[u8]) -> Result<Vec<FeedbackEvent>> {
    let text = std::str::from_utf8(body).map_err(|_| Error::validation("feedback body is not UTF-8"))?;
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ev: FeedbackEvent = serde_json::from_str(line).map_err(|e| Error::Schema {
            message: format!("feedback line {}: {e}", i + 1),
            row: Some(i + 1),
            columns: Vec::new(),
        })?;
        let finite = ev.prediction.is_finite()
            && ev.observation.is_finite()
            && ev.features.values().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Schema {
                message: format!("feedback line {}: values must be finite", i + 1),
                row: Some(i + 1),
                columns: Vec::new(),
            });
        }
        events.push(ev);
    }
    if events.is_empty() {
        return Err(Error::validation("feedback batch is empty"));
    }
    Ok(events)
}

pub fn to_ndjson(events: &[FeedbackEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("serializable event"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_change_alarm_index() {
        let mut ph = PageHinkley::new(DriftParams { delta: 0.05, lambda: 5.0 });
        let mut fired_at = None;
        for i in 1..=200u64 {
            let e = if i <= 100 { 0.0 } else { 1.0 };
            if ph.update(e) {
                fired_at = Some(i);
            }
        }
        assert_eq!(fired_at, Some(106));
        assert_eq!(ph.alarm_at, Some(106));
        assert_eq!(ph.change_point(), Some(101));
    }

    #[test]
    fn constant_stream_never_alarms() {
        let mut ph = PageHinkley::new(DriftParams { delta: 0.0, lambda: 1e-6 });
        for _ in 0..10_000 {
            assert!(!ph.update(0.3));
        }
        assert!(ph.statistic().abs() < 1e-9);
    }

    #[test]
    fn single_spike_is_tolerated() {
        let mut ph = PageHinkley::new(DriftParams { delta: 0.05, lambda: 20.0 });
        for _ in 0..1000 {
            ph.observe(0.1).unwrap();
        }
        assert!(!ph.observe(15.0).unwrap());
        for _ in 0..1000 {
            assert!(!ph.observe(0.1).unwrap());
        }
        assert!(ph.observe(f64::NAN).is_err());
        assert!(ph.observe(-1.0).is_err());
    }

    #[test]
    fn scaled_defaults() {
        let p = DriftConfig::default().params_for(0.1);
        assert!((p.delta - 0.005).abs() < 1e-15);
        assert!((p.lambda - 5.0).abs() < 1e-12);
        let z = DriftConfig::default().params_for(0.0);
        assert!(z.lambda > 0.0);
        assert!(DriftParams { delta: 0.0, lambda: 0.0 }.validate().is_err());
    }

    #[test]
    fn ndjson_round_trip() {
        let ev = FeedbackEvent {
            deployment_id: "dep-000001".into(),
            seq: 1,
            features: [("x".to_string(), 1.5)].into_iter().collect(),
            prediction: 2.0,
            observation: 2.5,
            ts: "2026-01-01T00:00:00.000000Z".into(),
        };
        let body = to_ndjson(&[ev.clone(), FeedbackEvent { seq: 2, ..ev.clone() }]);
        let back = parse_feedback_ndjson(body.as_bytes()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], ev);
        assert_eq!(ev.abs_error(), 0.5);
        assert!(parse_feedback_ndjson(b"{\"seq\":1}\n").is_err());
        assert!(parse_feedback_ndjson(b"\n\n").is_err());
    }
}
