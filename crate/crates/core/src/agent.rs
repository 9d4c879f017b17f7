//! Simulated edge agent.
//!
//! The agent serves a bundled model on a synthetic linear process, streams
//! labelled feedback to the service and pull-polls for redeploy commands.
//! It is step-driven: nothing depends on wall-clock time, so a run is a pure
//! function of the process, the seed and the service's responses.

use std::collections::{BTreeMap, VecDeque};

use chrono::{Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bundle::{open_bundle, Version, VersionRange};
use crate::clock::format_ts;
use crate::drift::FeedbackEvent;
use crate::error::{Error, ErrorCode, Result};
use crate::registry::{DeploymentCommand, IngestResult};
use crate::runtime::LinearModel;
use crate::table::{Column, Table};

/// Model runtime version this agent implements.
pub const AGENT_RUNTIME_VERSION: &str = "1.0.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub low: f64,
    pub high: f64,
}

/// New ground truth in force for every step after `at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftChange {
    pub at: u64,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

/// A linear ground truth `y = intercept + Σ coefᵢ·xᵢ + σ·ε` with uniform
/// features and a schedule of abrupt changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub features: Vec<FeatureSpec>,
    #[serde(default = "default_target")]
    pub target: String,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub noise_std: f64,
    #[serde(default)]
    pub drift: Vec<DriftChange>,
    #[serde(default)]
    pub seed: u64,
}

fn default_target() -> String {
    "y".into()
}

impl ProcessSpec {
    /// One feature `x` uniform on `[low, high]`, target `y`, no drift.
    pub fn single(low: f64, high: f64, slope: f64, intercept: f64, noise_std: f64, seed: u64) -> Self {
        Self {
            features: vec![FeatureSpec {
                name: "x".into(),
                low,
                high,
            }],
            target: default_target(),
            coefficients: vec![slope],
            intercept,
            noise_std,
            drift: Vec::new(),
            seed,
        }
    }

    pub fn with_drift(mut self, at: u64, coefficients: Vec<f64>, intercept: f64) -> Self {
        self.drift.push(DriftChange {
            at,
            coefficients,
            intercept,
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.features.len();
        if p == 0 {
            return Err(Error::validation("process needs at least one feature"));
        }
        if self.target.is_empty() || self.features.iter().any(|f| f.name.is_empty() || f.name == self.target) {
            return Err(Error::validation("feature and target names must be non-empty and distinct"));
        }
        let mut names: Vec<&str> = self.features.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != p {
            return Err(Error::validation("feature names must be unique"));
        }
        for f in &self.features {
            if !(f.low.is_finite() && f.high.is_finite() && f.low <= f.high) {
                return Err(Error::validation(format!("feature {} needs finite bounds with low <= high", f.name)));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::validation("noise_std must be finite and >= 0"));
        }
        let regimes = std::iter::once((&self.coefficients, self.intercept))
            .chain(self.drift.iter().map(|d| (&d.coefficients, d.intercept)));
        for (coef, b) in regimes {
            if coef.len() != p {
                return Err(Error::validation(format!("expected {p} coefficients, got {}", coef.len())));
            }
            if !b.is_finite() || coef.iter().any(|c| !c.is_finite()) {
                return Err(Error::validation("coefficients and intercepts must be finite"));
            }
        }
        if self.drift.windows(2).any(|w| w[0].at >= w[1].at) {
            return Err(Error::validation("drift steps must be strictly increasing"));
        }
        Ok(())
    }

    /// Coefficients and intercept in force at 1-based `step`.
    pub fn regime(&self, step: u64) -> (&[f64], f64) {
        self.drift
            .iter()
            .rev()
            .find(|d| step > d.at)
            .map_or((self.coefficients.as_slice(), self.intercept), |d| (d.coefficients.as_slice(), d.intercept))
    }
}

/// Seeded sampler over a [`ProcessSpec`].
pub struct Process<'a> {
    spec: &'a ProcessSpec,
    rng: ChaCha8Rng,
}

impl<'a> Process<'a> {
    pub fn new(spec: &'a ProcessSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Draws the features and the noisy observation for `step`.
    pub fn sample(&mut self, step: u64) -> (Vec<f64>, f64) {
        let x: Vec<f64> = self
            .spec
            .features
            .iter()
            .map(|f| if f.low == f.high { f.low } else { self.rng.gen_range(f.low..=f.high) })
            .collect();
        let z: f64 = self.rng.sample(StandardNormal);
        let (coef, b) = self.spec.regime(step);
        let y = b + coef.iter().zip(&x).map(|(c, v)| c * v).sum::<f64>() + self.spec.noise_std * z;
        (x, y)
    }
}

/// `n` rows of the process before any drift, as CSV with the feature
/// columns followed by the target. `n = 0` yields the header alone.
pub fn generate_training_csv(process: &ProcessSpec, n: usize, seed: u64) -> Result<Vec<u8>> {
    let mut sampler = Process::new(process, seed)?;
    let p = process.features.len();
    let mut cols = vec![Vec::with_capacity(n); p + 1];
    for _ in 0..n {
        let (x, y) = sampler.sample(0);
        for (c, v) in cols.iter_mut().zip(x) {
            c.push(v);
        }
        cols[p].push(y);
    }
    let names = process.features.iter().map(|f| f.name.clone()).chain([process.target.clone()]);
    let columns = names.zip(cols).map(|(name, values)| Column::float(name, values)).collect();
    Ok(Table::new(columns)?.to_csv())
}

/// How the agent reaches the service.
pub trait Transport {
    fn send_feedback(&mut self, deployment_id: &str, events: &[FeedbackEvent]) -> Result<IngestResult>;
    fn poll_command(&mut self, deployment_id: &str) -> Result<DeploymentCommand>;
    fn fetch_bundle(&mut self, deployment_id: &str) -> Result<Vec<u8>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentOptions {
    /// Steps between deployment polls.
    pub poll_interval: u64,
    /// Events per feedback request.
    pub batch_size: usize,
    /// Undelivered events tolerated before the agent gives up.
    pub queue_capacity: usize,
    /// Consecutive failed deliveries tolerated before the agent gives up.
    pub max_retries: u32,
    /// Trailing steps summarised by `tail_rmse`.
    pub tail_window: usize,
    pub runtime_version: String,
}

impl Default for AgentOptions {
    fn default() -> Self {
        Self {
            poll_interval: 10,
            batch_size: 1,
            queue_capacity: 1000,
            max_retries: 5,
            tail_window: 500,
            runtime_version: AGENT_RUNTIME_VERSION.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub deployment_id: String,
    pub model_id: String,
    pub first_step: u64,
    pub last_step: u64,
    pub steps: u64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub step: u64,
    pub from_deployment: String,
    pub to_deployment: String,
    pub model_id: String,
    /// Events predicted by the old model that could no longer be delivered.
    pub dropped_events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmReport {
    pub step: u64,
    pub deployment_id: String,
    pub alarm_at: u64,
    pub change_point: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub steps: u64,
    pub delivered: u64,
    pub final_deployment: String,
    pub tail_window: u64,
    pub tail_rmse: f64,
    pub halted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReport {
    pub segments: Vec<SegmentReport>,
    pub swaps: Vec<SwapReport>,
    pub alarms: Vec<AlarmReport>,
    pub summary: AgentSummary,
    /// Signed residual (observation − prediction) of every step.
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

/// One line of the NDJSON report; `record` is always the first field.
#[derive(Serialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum ReportLine<'a> {
    Segment(&'a SegmentReport),
    Swap(&'a SwapReport),
    Alarm(&'a AlarmReport),
    Summary(&'a AgentSummary),
}

impl AgentReport {
    /// Segments, then swaps, then alarms, then one summary line.
    pub fn to_ndjson(&self) -> String {
        let lines = self
            .segments
            .iter()
            .map(ReportLine::Segment)
            .chain(self.swaps.iter().map(ReportLine::Swap))
            .chain(self.alarms.iter().map(ReportLine::Alarm))
            .chain(std::iter::once(ReportLine::Summary(&self.summary)));
        let mut out = String::new();
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("report serializes"));
            out.push('\n');
        }
        out
    }

    pub fn rmse_of_last(&self, n: usize) -> f64 {
        rmse(&self.residuals[self.residuals.len().saturating_sub(n)..])
    }
}

fn rmse(residuals: &[f64]) -> f64 {
    if residuals.is_empty() {
        return f64::NAN;
    }
    (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt()
}

struct Serving {
    deployment_id: String,
    model_id: String,
    model: LinearModel,
    first_step: u64,
    next_seq: u64,
    residuals: Vec<f64>,
}

fn load(bundle: &[u8], runtime: &Version) -> Result<(String, LinearModel)> {
    let (manifest, model) = open_bundle(bundle)?;
    let range: VersionRange = manifest.runtime.parse()?;
    if !range.contains(runtime) {
        return Err(Error::Unsupported(format!(
            "bundle requires runtime {range}; this agent implements {runtime}"
        )));
    }
    Ok((manifest.model.id, model))
}

struct Agent<'t> {
    transport: &'t mut dyn Transport,
    opts: AgentOptions,
    runtime: Version,
    serving: Serving,
    queue: VecDeque<FeedbackEvent>,
    failures: u32,
    report: AgentReport,
}

impl Agent<'_> {
    fn close_segment(&mut self, last_step: u64) {
        let s = &self.serving;
        if s.residuals.is_empty() {
            return;
        }
        self.report.segments.push(SegmentReport {
            deployment_id: s.deployment_id.clone(),
            model_id: s.model_id.clone(),
            first_step: s.first_step,
            last_step,
            steps: s.residuals.len() as u64,
            rmse: rmse(&s.residuals),
        });
    }

    /// Tries to deliver queued events. Returns `Ok(false)` when the
    /// deployment is no longer accepting feedback.
    fn flush(&mut self, step: u64) -> Result<bool> {
        while !self.queue.is_empty() {
            let n = self.queue.len().min(self.opts.batch_size.max(1));
            let batch: Vec<FeedbackEvent> = self.queue.iter().take(n).cloned().collect();
            match self.transport.send_feedback(&self.serving.deployment_id, &batch) {
                Ok(ack) => {
                    self.failures = 0;
                    self.queue.drain(..n);
                    self.report.summary.delivered += ack.accepted;
                    if let Some(a) = ack.alarm {
                        self.report.alarms.push(AlarmReport {
                            step,
                            deployment_id: a.deployment_id,
                            alarm_at: a.alarm_at,
                            change_point: a.change_point,
                        });
                    }
                }
                Err(Error::Unreachable(msg)) => {
                    self.failures += 1;
                    if self.failures > self.opts.max_retries || self.queue.len() > self.opts.queue_capacity {
                        return Err(Error::Unreachable(format!(
                            "giving up after {} failed deliveries with {} events queued: {msg}",
                            self.failures,
                            self.queue.len()
                        )));
                    }
                    return Ok(true);
                }
                Err(e) if e.code() == ErrorCode::State => return Ok(false),
                Err(e) => return Err(e),
            }
        }
        Ok(true)
    }

    /// Polls for a command and applies it. Returns `false` once halted.
    fn poll(&mut self, step: u64) -> Result<bool> {
        let cmd = match self.transport.poll_command(&self.serving.deployment_id) {
            Ok(c) => c,
            Err(Error::Unreachable(_)) => return Ok(true),
            Err(e) => return Err(e),
        };
        match cmd {
            DeploymentCommand::None => Ok(true),
            DeploymentCommand::Halt { reason } => {
                self.report.summary.halted = Some(reason);
                Ok(false)
            }
            DeploymentCommand::Swap { deployment_id, .. } => {
                let bytes = self.transport.fetch_bundle(&deployment_id)?;
                let (model_id, model) = load(&bytes, &self.runtime)?;
                self.flush(step)?;
                let dropped = self.queue.len() as u64;
                self.queue.clear();
                self.close_segment(step);
                self.report.swaps.push(SwapReport {
                    step,
                    from_deployment: self.serving.deployment_id.clone(),
                    to_deployment: deployment_id.clone(),
                    model_id: model_id.clone(),
                    dropped_events: dropped,
                });
                self.serving = Serving {
                    deployment_id,
                    model_id,
                    model,
                    first_step: step + 1,
                    next_seq: 1,
                    residuals: Vec::new(),
                };
                Ok(true)
            }
        }
    }
}

/// Serves `bundle` under `deployment_id` for `steps` steps of `process`.
///
/// Refuses to start when the bundle fails verification or requires a
/// runtime this agent does not implement. Feedback that cannot be delivered
/// is queued and retried on later steps; once more than `max_retries`
/// consecutive deliveries fail, or the queue exceeds its capacity, the run
/// ends with [`Error::Unreachable`].
pub fn run_agent(
    bundle: &[u8],
    deployment_id: &str,
    process: &ProcessSpec,
    steps: u64,
    transport: &mut dyn Transport,
    opts: &AgentOptions,
) -> Result<AgentReport> {
    let runtime: Version = opts.runtime_version.parse()?;
    let (model_id, model) = load(bundle, &runtime)?;
    let mut sampler = Process::new(process, process.seed)?;
    let names: Vec<String> = process.features.iter().map(|f| f.name.clone()).collect();
    let epoch = Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap();
    let mut agent = Agent {
        transport,
        opts: opts.clone(),
        runtime,
        serving: Serving {
            deployment_id: deployment_id.into(),
            model_id,
            model,
            first_step: 1,
            next_seq: 1,
            residuals: Vec::new(),
        },
        queue: VecDeque::new(),
        failures: 0,
        report: AgentReport {
            segments: Vec::new(),
            swaps: Vec::new(),
            alarms: Vec::new(),
            summary: AgentSummary {
                steps: 0,
                delivered: 0,
                final_deployment: String::new(),
                tail_window: opts.tail_window as u64,
                tail_rmse: f64::NAN,
                halted: None,
            },
            residuals: Vec::new(),
        },
    };

    for step in 1..=steps {
        let (x, y) = sampler.sample(step);
        let features: BTreeMap<String, f64> = names.iter().cloned().zip(x.iter().copied()).collect();
        let prediction = agent.serving.model.predict_named(&features)?;
        let seq = agent.serving.next_seq;
        agent.serving.next_seq += 1;
        agent.serving.residuals.push(y - prediction);
        agent.report.residuals.push(y - prediction);
        agent.report.summary.steps = step;
        agent.queue.push_back(FeedbackEvent {
            deployment_id: agent.serving.deployment_id.clone(),
            seq,
            features,
            prediction,
            observation: y,
            ts: format_ts(epoch + Duration::seconds(step as i64)),
        });
        let accepting = if agent.queue.len() >= opts.batch_size.max(1) { agent.flush(step)? } else { true };
        let due = opts.poll_interval > 0 && step % opts.poll_interval == 0;
        if (!accepting || due) && !agent.poll(step)? {
            break;
        }
    }
    let last = agent.report.summary.steps;
    if agent.report.summary.halted.is_none() {
        for _ in 0..=opts.max_retries {
            agent.flush(last)?;
            if agent.queue.is_empty() {
                break;
            }
        }
    }
    agent.close_segment(last);
    agent.report.summary.final_deployment = agent.serving.deployment_id.clone();
    agent.report.summary.tail_rmse = agent.report.rmse_of_last(opts.tail_window);
    Ok(agent.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_csv_for_zero_rows() {
        let spec = ProcessSpec::single(0.0, 1.0, 2.0, 1.0, 0.1, 7);
        let csv = generate_training_csv(&spec, 0, 1).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().trim_end(), "x,y");
    }

    #[test]
    fn training_csv_is_deterministic_per_seed() {
        let spec = ProcessSpec::single(0.0, 1.0, 2.0, 1.0, 0.1, 7);
        let a = generate_training_csv(&spec, 50, 3).unwrap();
        assert_eq!(a, generate_training_csv(&spec, 50, 3).unwrap());
        assert_ne!(a, generate_training_csv(&spec, 50, 4).unwrap());
    }

    #[test]
    fn regime_switches_after_the_drift_step() {
        let spec = ProcessSpec::single(0.0, 1.0, 2.0, 1.0, 0.0, 0).with_drift(1000, vec![-2.0], 1.0);
        assert_eq!(spec.regime(1000).0, &[2.0]);
        assert_eq!(spec.regime(1001).0, &[-2.0]);
    }

    #[test]
    fn rejects_unordered_drift_schedule() {
        let spec = ProcessSpec::single(0.0, 1.0, 2.0, 1.0, 0.0, 0)
            .with_drift(10, vec![1.0], 0.0)
            .with_drift(10, vec![3.0], 0.0);
        assert!(matches!(spec.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn report_lines_start_with_record_tag() {
        let report = AgentReport {
            segments: vec![],
            swaps: vec![],
            alarms: vec![],
            summary: AgentSummary {
                steps: 0,
                delivered: 0,
                final_deployment: "dep-000001".into(),
                tail_window: 500,
                tail_rmse: 0.0,
                halted: None,
            },
            residuals: vec![],
        };
        assert!(report.to_ndjson().starts_with("{\"record\":\"summary\",\"steps\":0"));
    }
}
