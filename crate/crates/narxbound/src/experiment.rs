//! Experiment harness: JSON-configured runs wiring simulate → train →
//! certify → detect → report, plus the two comparison studies (multi vs
//! single input ellipsoid, noisy vs ideal training data).
//!
//! Every command writes into the run directory with atomic
//! write-temp-then-rename and records a SHA-256 per emitted file in
//! `manifest.json`; `run_report` re-reads the raw CSVs, recomputes every
//! summary number and fails on any mismatch. All outputs are deterministic
//! given the config; wall-clock items (timestamp, runtime) live only in the
//! human-readable `summary.txt`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certify::{certify, certify_single, Objective};
use crate::detector::{run as detector_run, AlarmLog, DetectorConfig};
use crate::ellipsoid::confidence_ellipsoid;
use crate::error::{Error, Result};
use crate::net::{build_dataset, train, ReluNetwork, TrainingConfig, TrainingReport};
use crate::plant::{generate_training_set, FaultKind, FaultSpec, PlantParams, Trajectory};
use crate::sdp::{backend_from_env, SolverSettings};

/// Writes via a temp file in the same directory followed by a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Training section: trainer hyperparameters plus how much data to generate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSection {
    #[serde(flatten)]
    pub config: TrainingConfig,
    pub trajectories: usize,
    pub trajectory_steps: usize,
}

/// Detection section: the evaluated trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionSection {
    pub steps: usize,
    pub seed: u64,
    pub initial_state: Vec<f64>,
}

/// One experiment, fully specified by a single JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub plant: PlantParams,
    /// Number of past measurements `N` in the regressor window.
    pub window: usize,
    pub p_bar: f64,
    pub architecture: Vec<usize>,
    pub training: TrainingSection,
    pub fault: FaultSpec,
    pub detection: DetectionSection,
    #[serde(default)]
    pub objective: Objective,
    /// Duality-gap target handed to the SDP backend.
    #[serde(default = "default_gap_tol")]
    pub sdp_gap_tol: f64,
    /// Paper-reported alarm rates, carried as reference metadata and never
    /// asserted (they depend on the original weights and noise draws).
    #[serde(default)]
    pub reference_alarm_rates: BTreeMap<String, f64>,
    pub output_dir: String,
}

fn default_gap_tol() -> f64 {
    1e-5
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.fault.validate()?;
        let p = self.plant.sigma_v_matrix().nrows();
        if !(self.p_bar > 0.0 && self.p_bar < 1.0) {
            return Err(Error::Config("p_bar must lie strictly in (0, 1)".into()));
        }
        if self.architecture.len() < 3 {
            return Err(Error::Config(
                "architecture needs input, hidden and output widths".into(),
            ));
        }
        if self.architecture[0] != p * (self.window + 1) {
            return Err(Error::Config(format!(
                "architecture input width {} does not match p (N+1) = {}",
                self.architecture[0],
                p * (self.window + 1)
            )));
        }
        if *self.architecture.last().unwrap() != p {
            return Err(Error::Config(format!(
                "architecture output width {} does not match the sensor dimension {p}",
                self.architecture.last().unwrap()
            )));
        }
        if self.training.trajectories == 0 || self.training.trajectory_steps < self.window + 2 {
            return Err(Error::Config(
                "training needs at least one trajectory long enough for one window".into(),
            ));
        }
        if self.detection.steps < self.window + 2 {
            return Err(Error::Config(format!(
                "detection needs at least {} steps",
                self.window + 2
            )));
        }
        if self.detection.initial_state.len() != 2 {
            return Err(Error::Config("initial_state must have two entries".into()));
        }
        if !(self.sdp_gap_tol > 0.0) {
            return Err(Error::Config("sdp_gap_tol must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical (parsed and re-serialized) config.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output_dir)
    }

    pub fn solver_settings(&self) -> SolverSettings {
        SolverSettings {
            gap_tol: self.sdp_gap_tol,
            ..SolverSettings::default()
        }
    }

    pub fn detector_config(&self) -> Result<DetectorConfig> {
        Ok(
            DetectorConfig::new(self.window, self.p_bar, self.plant.sigma_v_matrix())?
                .with_objective(self.objective)
                .with_settings(self.solver_settings()),
        )
    }

    fn initial_state(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.detection.initial_state)
    }

    fn g_convention(&self) -> Option<f64> {
        match &self.plant {
            PlantParams::Tanks(t) => Some(t.g),
            PlantParams::Beam(_) => None,
        }
    }
}

/// `manifest.json`: config hash plus a SHA-256 per emitted file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn store(&self, dir: &Path) -> Result<()> {
        write_atomic(
            &dir.join("manifest.json"),
            serde_json::to_string_pretty(self)?.as_bytes(),
        )
    }
}

/// Writes a file into the run directory and records its hash.
fn emit(dir: &Path, manifest: &mut Manifest, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = dir.join(name);
    write_atomic(&path, bytes)?;
    manifest.files.insert(name.to_string(), sha256_hex(bytes));
    Ok(path)
}

/// Records an already-written file (CSV writers stream directly).
fn record(dir: &Path, manifest: &mut Manifest, name: &str) -> Result<()> {
    let bytes = std::fs::read(dir.join(name))?;
    manifest.files.insert(name.to_string(), sha256_hex(&bytes));
    Ok(())
}

fn fault_name(kind: &FaultKind) -> &'static str {
    match kind {
        FaultKind::None => "normal",
        FaultKind::Vibration { .. } => "vibration",
        FaultKind::SensorBias { .. } => "sensor_bias",
        FaultKind::DrainBlockage { .. } => "drain_blockage",
    }
}

/// Simulates the configured detection trajectory (with the configured fault)
/// and writes `trajectory.csv`.
pub fn run_simulate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    let mut manifest = Manifest::load(out_dir).unwrap_or_default();
    manifest.config_hash = cfg.hash();
    let traj = cfg.plant.simulate(
        &cfg.initial_state(),
        cfg.detection.steps,
        cfg.detection.seed,
        &cfg.fault,
    )?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("trajectory.csv");
    traj.to_csv(&path)?;
    record(out_dir, &mut manifest, "trajectory.csv")?;
    manifest.store(out_dir)?;
    Ok(path)
}

pub struct TrainOutput {
    pub weights_path: PathBuf,
    pub report: TrainingReport,
    pub network: ReluNetwork,
}

/// Generates fault-free training trajectories, builds the windowed dataset
/// and trains the estimator. With `ideal_data` the noise-free measurements of
/// the same trajectories are used instead (the robustness-of-training
/// comparison), written to a separate weight file.
pub fn run_train(cfg: &ExperimentConfig, out_dir: &Path, ideal_data: bool) -> Result<TrainOutput> {
    let mut manifest = Manifest::load(out_dir).unwrap_or_default();
    manifest.config_hash = cfg.hash();
    let trajs = generate_training_set(
        &cfg.plant,
        cfg.training.trajectories,
        cfg.training.trajectory_steps,
        cfg.training.config.seed,
    )?;
    let sequences: Vec<Vec<DVector<f64>>> = trajs
        .iter()
        .map(|t| {
            if ideal_data {
                t.ideal.clone()
            } else {
                t.measured.clone()
            }
        })
        .collect();
    let (dataset, skipped) = build_dataset(&sequences, cfg.window)?;
    if skipped > 0 {
        return Err(Error::Config(format!(
            "{skipped} training trajectories were too short for the window"
        )));
    }
    let (network, report) = train(&dataset, &cfg.architecture, &cfg.training.config)?;

    std::fs::create_dir_all(out_dir)?;
    let weights_name = if ideal_data {
        "weights_ideal.json"
    } else {
        "weights.json"
    };
    let weights_path = out_dir.join(weights_name);
    network.save(&weights_path)?;
    record(out_dir, &mut manifest, weights_name)?;

    let report_name = if ideal_data {
        "training_report_ideal.json"
    } else {
        "training_report.json"
    };
    emit(
        out_dir,
        &mut manifest,
        report_name,
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    manifest.store(out_dir)?;
    Ok(TrainOutput {
        weights_path,
        report,
        network,
    })
}

/// Per-scenario slice of the final report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub steps: usize,
    pub alarms: usize,
    pub indeterminate: usize,
    pub alarm_rate: f64,
    pub mean_log_volume: f64,
    pub mean_residual: f64,
}

impl ScenarioReport {
    fn from_log(name: &str, log: &AlarmLog) -> Self {
        Self {
            name: name.to_string(),
            steps: log.summary.steps,
            alarms: log.summary.alarms,
            indeterminate: log.summary.indeterminate,
            alarm_rate: log.summary.alarm_rate,
            mean_log_volume: log.summary.mean_log_volume,
            mean_residual: log.summary.mean_residual,
        }
    }
}

/// The consolidated machine-readable report (`report.json`); byte-identical
/// across reruns of the same config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub system: String,
    pub g_convention: Option<f64>,
    pub window: usize,
    pub p_bar: f64,
    pub false_alarm_bound: f64,
    pub training_seed: u64,
    pub detection_seed: u64,
    pub scenarios: Vec<ScenarioReport>,
    pub reference_alarm_rates: BTreeMap<String, f64>,
}

pub struct DetectOutput {
    pub log: AlarmLog,
    pub report: ExperimentReport,
    /// Set when more than 10% of the steps were indeterminate.
    pub warning: bool,
}

/// Runs the detector over a trajectory file with the given weights.
pub fn run_detect(
    cfg: &ExperimentConfig,
    weights_path: &Path,
    trajectory_path: &Path,
    out_dir: &Path,
) -> Result<DetectOutput> {
    let mut manifest = Manifest::load(out_dir).unwrap_or_default();
    manifest.config_hash = cfg.hash();
    let net = ReluNetwork::load(weights_path)?;
    if net.arch() != cfg.architecture {
        return Err(Error::Config(format!(
            "weight file architecture {:?} does not match the config {:?}",
            net.arch(),
            cfg.architecture
        )));
    }
    let traj = Trajectory::from_csv(trajectory_path)?;
    let detector_cfg = cfg.detector_config()?;
    let backend = backend_from_env()?;
    let log = detector_run(&detector_cfg, &net, &traj.measured, backend.as_ref())?;

    std::fs::create_dir_all(out_dir)?;
    let scenario = fault_name(&cfg.fault.kind);
    let csv_name = format!("alarms_{scenario}.csv");
    log.to_csv(&out_dir.join(&csv_name))?;
    record(out_dir, &mut manifest, &csv_name)?;

    let report = ExperimentReport {
        config_hash: cfg.hash(),
        system: cfg.plant.system().to_string(),
        g_convention: cfg.g_convention(),
        window: cfg.window,
        p_bar: cfg.p_bar,
        false_alarm_bound: log.summary.false_alarm_bound,
        training_seed: cfg.training.config.seed,
        detection_seed: cfg.detection.seed,
        scenarios: vec![ScenarioReport::from_log(scenario, &log)],
        reference_alarm_rates: cfg.reference_alarm_rates.clone(),
    };
    let summary_name = format!("detect_summary_{scenario}.json");
    emit(
        out_dir,
        &mut manifest,
        &summary_name,
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    manifest.store(out_dir)?;

    let warning = log.summary.steps > 0
        && log.summary.indeterminate as f64 > 0.1 * log.summary.steps as f64;
    Ok(DetectOutput {
        log,
        report,
        warning,
    })
}

/// One row of the multi-vs-single input comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumePair {
    pub k: usize,
    pub multi_log_volume: Option<f64>,
    pub single_log_volume: Option<f64>,
    pub multi_status: String,
    pub single_status: String,
}

/// Certifies `steps` timesteps of the trajectory with both input-QC
/// formulations (logdet objective, tight gap) and tabulates the log-volumes.
pub fn run_compare_appendix_a(
    cfg: &ExperimentConfig,
    weights_path: &Path,
    trajectory_path: &Path,
    steps: usize,
    out_dir: &Path,
) -> Result<Vec<VolumePair>> {
    let mut manifest = Manifest::load(out_dir).unwrap_or_default();
    manifest.config_hash = cfg.hash();
    let net = ReluNetwork::load(weights_path)?;
    let traj = Trajectory::from_csv(trajectory_path)?;
    let detector_cfg = cfg.detector_config()?;
    let backend = backend_from_env()?;
    // The dominance comparison is a statement about log-volumes, so both
    // problems are solved under the logdet objective at a tight gap.
    let settings = SolverSettings::default();

    let n = cfg.window;
    if traj.measured.len() < n + 1 {
        return Err(Error::Config("trajectory shorter than the window".into()));
    }
    let last = (n + steps).min(traj.measured.len() - 1);
    let mut rows = Vec::new();
    for k in n..last {
        let inputs = (0..=n)
            .map(|i| detector_cfg.noise_ellipsoid(&traj.measured[k - i]))
            .collect::<Result<Vec<_>>>()?;
        let multi = certify(&net, &inputs, Objective::LogDet, backend.as_ref(), &settings);
        let single = certify_single(&net, &inputs, Objective::LogDet, backend.as_ref(), &settings);
        rows.push(VolumePair {
            k,
            multi_log_volume: multi.as_ref().ok().map(|b| b.log_volume()),
            single_log_volume: single.as_ref().ok().map(|b| b.log_volume()),
            multi_status: status_string(&multi),
            single_status: status_string(&single),
        });
    }

    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("k,multi_log_volume,single_log_volume,difference,multi_status,single_status\n");
    for r in &rows {
        let diff = match (r.multi_log_volume, r.single_log_volume) {
            (Some(m), Some(s)) => format!("{:?}", m - s),
            _ => "".into(),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.k,
            r.multi_log_volume.map(|v| format!("{v:?}")).unwrap_or_default(),
            r.single_log_volume.map(|v| format!("{v:?}")).unwrap_or_default(),
            diff,
            r.multi_status,
            r.single_status
        ));
    }
    emit(out_dir, &mut manifest, "appendix_a.csv", csv.as_bytes())?;
    emit(
        out_dir,
        &mut manifest,
        "appendix_a.json",
        serde_json::to_string_pretty(&rows)?.as_bytes(),
    )?;
    manifest.store(out_dir)?;
    Ok(rows)
}

fn status_string<T>(r: &Result<T>) -> String {
    match r {
        Ok(_) => "optimal".into(),
        Err(e) => format!("error: {e}"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingNoiseComparison {
    pub steps: Vec<usize>,
    pub noisy_log_volumes: Vec<f64>,
    pub ideal_log_volumes: Vec<f64>,
    /// Fraction of compared steps where the noisy-trained bound is smaller.
    pub noisy_smaller_fraction: f64,
    pub noisy_val_mse: f64,
    pub ideal_val_mse: f64,
}

/// Trains twin networks from the same seed and architecture, one on noisy and
/// one on ideal (noise-free) data, certifies both at identical conditions
/// along a normal-operation trajectory, and emits per-step volume pairs plus
/// 2-D ellipse boundary traces for plotting.
pub fn run_compare_training_noise(
    cfg: &ExperimentConfig,
    steps: usize,
    out_dir: &Path,
) -> Result<TrainingNoiseComparison> {
    let mut manifest = Manifest::load(out_dir).unwrap_or_default();
    manifest.config_hash = cfg.hash();
    let noisy = run_train(cfg, out_dir, false)?;
    let ideal = run_train(cfg, out_dir, true)?;

    let mut normal = cfg.clone();
    normal.fault = FaultSpec::none();
    let traj = normal.plant.simulate(
        &normal.initial_state(),
        normal.detection.steps.min(cfg.window + steps + 1),
        normal.detection.seed,
        &FaultSpec::none(),
    )?;
    let detector_cfg = cfg.detector_config()?;
    let backend = backend_from_env()?;
    let settings = SolverSettings::default();

    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    let mut traces = String::from("k,network,x,y\n");
    let n = cfg.window;
    for k in n..traj.measured.len() - 1 {
        let inputs = (0..=n)
            .map(|i| detector_cfg.noise_ellipsoid(&traj.measured[k - i]))
            .collect::<Result<Vec<_>>>()?;
        let bound_noisy = certify(
            &noisy.network,
            &inputs,
            Objective::LogDet,
            backend.as_ref(),
            &settings,
        )?;
        let bound_ideal = certify(
            &ideal.network,
            &inputs,
            Objective::LogDet,
            backend.as_ref(),
            &settings,
        )?;
        rows.push((k, bound_noisy.log_volume(), bound_ideal.log_volume()));
        for (tag, bound) in [("noisy", &bound_noisy), ("ideal", &bound_ideal)] {
            if bound.ellipsoid.dim() == 2 {
                let l = bound.ellipsoid.cholesky_factor();
                for j in 0..64 {
                    let th = 2.0 * std::f64::consts::PI * j as f64 / 64.0;
                    let pt = bound.ellipsoid.center()
                        + &l * DVector::from_vec(vec![th.cos(), th.sin()]);
                    traces.push_str(&format!("{k},{tag},{:?},{:?}\n", pt[0], pt[1]));
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Config("no steps available for the comparison".into()));
    }

    let smaller = rows.iter().filter(|(_, n, i)| n <= i).count();
    let comparison = TrainingNoiseComparison {
        steps: rows.iter().map(|r| r.0).collect(),
        noisy_log_volumes: rows.iter().map(|r| r.1).collect(),
        ideal_log_volumes: rows.iter().map(|r| r.2).collect(),
        noisy_smaller_fraction: smaller as f64 / rows.len() as f64,
        noisy_val_mse: noisy.report.val_mse,
        ideal_val_mse: ideal.report.val_mse,
    };

    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("k,noisy_log_volume,ideal_log_volume\n");
    for (k, nvol, ivol) in &rows {
        csv.push_str(&format!("{k},{nvol:?},{ivol:?}\n"));
    }
    emit(out_dir, &mut manifest, "training_noise.csv", csv.as_bytes())?;
    emit(out_dir, &mut manifest, "training_noise_traces.csv", traces.as_bytes())?;
    emit(
        out_dir,
        &mut manifest,
        "training_noise.json",
        serde_json::to_string_pretty(&comparison)?.as_bytes(),
    )?;
    manifest.store(out_dir)?;
    Ok(comparison)
}

/// Verifies the manifest hashes, recomputes every alarm rate from the raw
/// CSVs, asserts they match the stored summaries exactly, and writes the
/// consolidated `report.json` plus a human-readable `summary.txt` (the only
/// artifact carrying wall-clock content).
pub fn run_report(run_dir: &Path) -> Result<ExperimentReport> {
    let manifest = Manifest::load(run_dir)?;
    if manifest.files.is_empty() {
        return Err(Error::Integrity(format!(
            "no manifest entries under {}",
            run_dir.display()
        )));
    }
    for (name, expected) in &manifest.files {
        let path = run_dir.join(name);
        if !path.exists() {
            return Err(Error::Integrity(format!("missing file: {name}")));
        }
        let actual = sha256_hex(&std::fs::read(&path)?);
        if &actual != expected {
            return Err(Error::Integrity(format!(
                "checksum mismatch for {name}: manifest {expected}, file {actual}"
            )));
        }
    }

    // Recompute alarm counts from each alarms CSV and match them against the
    // stored summary (exact integers, so the rates agree as exact rationals).
    let mut merged: Option<ExperimentReport> = None;
    for name in manifest.files.keys() {
        let Some(scenario) = name
            .strip_prefix("detect_summary_")
            .and_then(|s| s.strip_suffix(".json"))
        else {
            continue;
        };
        let stored: ExperimentReport =
            serde_json::from_str(&std::fs::read_to_string(run_dir.join(name))?)
                .map_err(|e| Error::Parse {
                    path: name.to_string(),
                    message: e.to_string(),
                })?;
        let csv_name = format!("alarms_{scenario}.csv");
        let text = std::fs::read_to_string(run_dir.join(&csv_name)).map_err(|_| {
            Error::Integrity(format!("missing alarm log {csv_name} for {name}"))
        })?;
        let mut steps = 0usize;
        let mut alarms = 0usize;
        let mut indeterminate = 0usize;
        for line in text.lines().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            steps += 1;
            match line.split(',').nth(1) {
                Some("alarm") => alarms += 1,
                Some("indeterminate") => indeterminate += 1,
                Some("no_alarm") => {}
                other => {
                    return Err(Error::Integrity(format!(
                        "unknown verdict {other:?} in {csv_name}"
                    )))
                }
            }
        }
        let stored_scenario = stored
            .scenarios
            .iter()
            .find(|s| s.name == scenario)
            .ok_or_else(|| Error::Integrity(format!("summary {name} lacks scenario {scenario}")))?;
        if (stored_scenario.steps, stored_scenario.alarms, stored_scenario.indeterminate)
            != (steps, alarms, indeterminate)
        {
            return Err(Error::Integrity(format!(
                "recomputed counts for {scenario} ({steps}, {alarms}, {indeterminate}) disagree \
                 with the stored summary ({}, {}, {})",
                stored_scenario.steps, stored_scenario.alarms, stored_scenario.indeterminate
            )));
        }
        match &mut merged {
            None => merged = Some(stored),
            Some(report) => {
                if report.config_hash != stored.config_hash {
                    return Err(Error::Integrity(
                        "run directory mixes different config hashes".into(),
                    ));
                }
                report.scenarios.extend(stored.scenarios);
            }
        }
    }

    let mut report = merged.ok_or_else(|| {
        Error::Integrity("run directory contains no detection summaries".into())
    })?;
    report.scenarios.sort_by(|a, b| a.name.cmp(&b.name));

    write_atomic(
        &run_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;

    let mut human = String::new();
    human.push_str(&format!("experiment report ({})\n", report.system));
    human.push_str(&format!("config_hash: {}\n", report.config_hash));
    human.push_str(&format!(
        "window N = {}, p_bar = {}, false-alarm bound = {:.6}\n",
        report.window, report.p_bar, report.false_alarm_bound
    ));
    if let Some(g) = report.g_convention {
        human.push_str(&format!("g convention: {g}\n"));
    }
    for s in &report.scenarios {
        human.push_str(&format!(
            "scenario {:>14}: steps {:>5}, alarms {:>5}, indeterminate {:>3}, rate {:.4}\n",
            s.name, s.steps, s.alarms, s.indeterminate, s.alarm_rate
        ));
    }
    for (name, rate) in &report.reference_alarm_rates {
        human.push_str(&format!("paper reference {name}: {rate}\n"));
    }
    human.push_str(&format!(
        "generated_at: {:?}\n",
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    ));
    write_atomic(&run_dir.join("summary.txt"), human.as_bytes())?;
    Ok(report)
}

/// The confidence ellipsoid used around every measurement, exposed for
/// examples and documentation.
pub fn measurement_confidence(
    cfg: &ExperimentConfig,
    center: &DVector<f64>,
) -> Result<crate::ellipsoid::Ellipsoid> {
    let spec = crate::ellipsoid::ConfidenceSpec::new(cfg.p_bar, &cfg.plant.sigma_v_matrix())?;
    confidence_ellipsoid(&spec, center)
}

/// Shared preset loader: the two shipped presets reproduce the paper's
/// experiments end to end.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = match name {
        "beam" => include_str!("../presets/beam.json"),
        "tanks" => include_str!("../presets/tanks.json"),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; available: beam, tanks"
            )))
        }
    };
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: format!("preset {name}"),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_creates_parents_and_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/file.txt");
        write_atomic(&path, b"one").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "one");
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
        assert!(!path.with_extension("txt.tmp").exists());
    }

    #[test]
    fn presets_parse_and_validate() {
        let beam = preset("beam").unwrap();
        assert_eq!(beam.window, 1);
        assert_eq!(beam.architecture, vec![4, 10, 2, 2]);
        let tanks = preset("tanks").unwrap();
        assert_eq!(tanks.window, 3);
        assert_eq!(tanks.architecture, vec![8, 20, 5, 2]);
        assert!(preset("nope").is_err());
    }

    #[test]
    fn config_hash_ignores_formatting() {
        let beam = preset("beam").unwrap();
        let pretty = serde_json::to_string_pretty(&beam).unwrap();
        let reparsed: ExperimentConfig = serde_json::from_str(&pretty).unwrap();
        assert_eq!(beam.hash(), reparsed.hash());
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let mut cfg = preset("beam").unwrap();
        cfg.architecture = vec![3, 10, 2];
        assert!(cfg.validate().is_err());

        let mut cfg = preset("beam").unwrap();
        cfg.p_bar = 1.2;
        assert!(cfg.validate().is_err());

        let mut cfg = preset("beam").unwrap();
        cfg.detection.steps = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn simulate_is_deterministic_per_config() {
        let mut cfg = preset("beam").unwrap();
        cfg.detection.steps = 25;
        let dir = tempfile::tempdir().unwrap();
        let a = run_simulate(&cfg, &dir.path().join("one")).unwrap();
        let b = run_simulate(&cfg, &dir.path().join("two")).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn report_detects_tampering() {
        let mut cfg = preset("beam").unwrap();
        cfg.detection.steps = 20;
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        run_simulate(&cfg, out).unwrap();
        // Corrupt the trajectory after the manifest recorded it.
        let path = out.join("trajectory.csv");
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("tampered\n");
        std::fs::write(&path, text).unwrap();
        match run_report(out) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("trajectory.csv")),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }
}
