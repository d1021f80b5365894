//! Model-based anomaly detector: certify a prediction bound per timestep from
//! the noisy regressor window, then test the next measurement against the
//! Minkowski sum of that bound and the noise confidence ellipsoid.
//!
//! No alarm while `y_{k+1} ∈ E(μ̂_{k+1}, Σ̂_{k+1}) ⊕ E(0, Σ̄_v)`; the per-step
//! false-alarm probability under normal operation is at most
//! `1 - p̄^{N+2}` (the `N+2` noise draws involved must all stay inside their
//! confidence sets).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::certify::{certify, Objective};
use crate::ellipsoid::{confidence_ellipsoid, minkowski_contains, ConfidenceSpec, Ellipsoid};
use crate::error::{Error, Result};
use crate::net::{RegressorWindow, ReluNetwork};
use crate::sdp::{SdpBackend, SolverSettings};

/// Upper bound `1 - p̄^{N+2}` on the per-step false-alarm probability.
pub fn false_alarm_bound(p_bar: f64, window: usize) -> f64 {
    1.0 - p_bar.powi(window as i32 + 2)
}

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    /// Number of past measurements `N` in the regressor window.
    pub window: usize,
    pub p_bar: f64,
    pub sigma_v: DMatrix<f64>,
    pub objective: Objective,
    pub settings: SolverSettings,
    confidence: ConfidenceSpec,
}

impl DetectorConfig {
    pub fn new(window: usize, p_bar: f64, sigma_v: DMatrix<f64>) -> Result<Self> {
        let confidence = ConfidenceSpec::new(p_bar, &sigma_v)?;
        Ok(Self {
            window,
            p_bar,
            sigma_v,
            objective: Objective::Trace,
            settings: SolverSettings::detection(),
            confidence,
        })
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub fn with_settings(mut self, settings: SolverSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn confidence(&self) -> &ConfidenceSpec {
        &self.confidence
    }

    /// The noise confidence ellipsoid `E(center, Σ̄_v)`.
    pub fn noise_ellipsoid(&self, center: &DVector<f64>) -> Result<Ellipsoid> {
        confidence_ellipsoid(&self.confidence, center)
    }

    pub fn false_alarm_bound(&self) -> f64 {
        false_alarm_bound(self.p_bar, self.window)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    NoAlarm,
    Alarm,
    /// The certification SDP failed; counted separately, never silently as
    /// "no alarm".
    Indeterminate,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::NoAlarm => write!(f, "no_alarm"),
            Verdict::Alarm => write!(f, "alarm"),
            Verdict::Indeterminate => write!(f, "indeterminate"),
        }
    }
}

/// One detector step: the verdict plus everything needed to audit it.
#[derive(Debug, Clone)]
pub struct AlarmRecord {
    /// Timestep of the newest window entry; the verdict concerns `y_{k+1}`.
    pub k: usize,
    pub y_next: DVector<f64>,
    pub bound: Option<Ellipsoid>,
    pub verdict: Verdict,
    /// Minkowski-sum membership margin of `y_{k+1}` (1 is the boundary).
    pub margin: f64,
    pub log_volume: f64,
    /// Estimation residual `|ŷ_{k+1} - y_{k+1}|`, logged so the neglected
    /// estimation-accuracy gap stays auditable.
    pub residual: f64,
    pub status: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlarmSummary {
    pub steps: usize,
    pub alarms: usize,
    pub indeterminate: usize,
    /// `alarms / (steps - indeterminate)`; the exact integer counts are the
    /// ground truth, this is their float quotient.
    pub alarm_rate: f64,
    pub false_alarm_bound: f64,
    pub mean_log_volume: f64,
    pub mean_residual: f64,
}

#[derive(Debug, Clone)]
pub struct AlarmLog {
    pub records: Vec<AlarmRecord>,
    pub summary: AlarmSummary,
}

impl AlarmLog {
    fn summarize(records: Vec<AlarmRecord>, bound: f64) -> Self {
        let steps = records.len();
        let alarms = records.iter().filter(|r| r.verdict == Verdict::Alarm).count();
        let indeterminate = records
            .iter()
            .filter(|r| r.verdict == Verdict::Indeterminate)
            .count();
        let decided = steps - indeterminate;
        let finite_vols: Vec<f64> = records
            .iter()
            .filter(|r| r.log_volume.is_finite())
            .map(|r| r.log_volume)
            .collect();
        let summary = AlarmSummary {
            steps,
            alarms,
            indeterminate,
            alarm_rate: if decided > 0 {
                alarms as f64 / decided as f64
            } else {
                f64::NAN
            },
            false_alarm_bound: bound,
            mean_log_volume: if finite_vols.is_empty() {
                f64::NAN
            } else {
                finite_vols.iter().sum::<f64>() / finite_vols.len() as f64
            },
            mean_residual: if steps > 0 {
                records.iter().map(|r| r.residual).sum::<f64>() / steps as f64
            } else {
                f64::NAN
            },
        };
        AlarmLog { records, summary }
    }

    /// CSV columns: `k, verdict, margin, log_volume, residual, status`.
    pub fn to_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut text = String::from("k,verdict,margin,log_volume,residual,status\n");
        for r in &self.records {
            text.push_str(&format!(
                "{},{},{:?},{:?},{:?},{}\n",
                r.k, r.verdict, r.margin, r.log_volume, r.residual, r.status
            ));
        }
        crate::experiment::write_atomic(path, text.as_bytes())
    }
}

/// Runs one detector step: certifies `E(μ̂_{k+1}, Σ̂_{k+1})` from the window's
/// per-measurement confidence ellipsoids `E(y_{k-i}, Σ̄_v)` and tests whether
/// `y_{k+1}` stays inside the geometric sum with `E(0, Σ̄_v)`.
pub fn step(
    cfg: &DetectorConfig,
    net: &ReluNetwork,
    k: usize,
    window: &RegressorWindow,
    y_next: &DVector<f64>,
    backend: &dyn SdpBackend,
) -> Result<AlarmRecord> {
    if window.len() != cfg.window + 1 {
        return Err(Error::DimensionMismatch {
            context: "regressor window length",
            expected: cfg.window + 1,
            actual: window.len(),
        });
    }
    let p = window.measurement_dim();
    if y_next.len() != p || p != cfg.sigma_v.nrows() {
        return Err(Error::DimensionMismatch {
            context: "measurement dimension",
            expected: cfg.sigma_v.nrows(),
            actual: y_next.len(),
        });
    }

    let residual = match net.forward(&window.stacked()) {
        Ok(pred) => (pred - y_next).norm(),
        Err(e) => return Err(e),
    };

    let inputs = window
        .entries()
        .iter()
        .map(|y| cfg.noise_ellipsoid(y))
        .collect::<Result<Vec<_>>>()?;

    match certify(net, &inputs, cfg.objective, backend, &cfg.settings) {
        Ok(bound) => {
            let noise_set = cfg.noise_ellipsoid(&DVector::zeros(p))?;
            let membership = minkowski_contains(&bound.ellipsoid, &noise_set, y_next)?;
            Ok(AlarmRecord {
                k,
                y_next: y_next.clone(),
                log_volume: bound.log_volume(),
                status: bound.status.to_string(),
                verdict: if membership.inside {
                    Verdict::NoAlarm
                } else {
                    Verdict::Alarm
                },
                margin: membership.margin,
                residual,
                bound: Some(bound.ellipsoid),
            })
        }
        Err(e) => Ok(AlarmRecord {
            k,
            y_next: y_next.clone(),
            bound: None,
            verdict: Verdict::Indeterminate,
            margin: f64::NAN,
            log_volume: f64::NAN,
            residual,
            status: format!("error: {e}"),
        }),
    }
}

/// Slides the window over an ordered measurement sequence, one certification
/// per step, and accumulates the alarm log in timestep order.
pub fn run(
    cfg: &DetectorConfig,
    net: &ReluNetwork,
    measurements: &[DVector<f64>],
    backend: &dyn SdpBackend,
) -> Result<AlarmLog> {
    let n = cfg.window;
    if measurements.len() < n + 2 {
        return Err(Error::Config(format!(
            "need at least {} measurements for window length {} plus a test point",
            n + 2,
            n + 1
        )));
    }
    let mut records = Vec::with_capacity(measurements.len() - n - 1);
    for k in n..measurements.len() - 1 {
        let entries: Vec<DVector<f64>> = (0..=n).map(|i| measurements[k - i].clone()).collect();
        let window = RegressorWindow::new(entries)?;
        records.push(step(cfg, net, k, &window, &measurements[k + 1], backend)?);
    }
    Ok(AlarmLog::summarize(records, cfg.false_alarm_bound()))
}
