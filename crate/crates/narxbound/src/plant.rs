//! Plant simulators: the rotating beam-and-slider (linear, discrete time) and
//! the two-tank cascade (nonlinear, integrated with fixed-step RK4), both
//! observed through additive Gaussian sensor noise, with the three fault
//! scenarios injectable at a configurable onset.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Beam-and-slider parameters: `x_{k+1} = contraction * R(beta) * x_k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeamSliderParams {
    pub contraction: f64,
    /// Rotation per step, radians.
    pub beta: f64,
    /// Sensor noise covariance, row-major.
    pub sigma_v: Vec<Vec<f64>>,
    /// Training initial conditions: uniform on `[init_low, init_high]^2`.
    pub init_low: f64,
    pub init_high: f64,
}

impl Default for BeamSliderParams {
    fn default() -> Self {
        Self {
            contraction: 0.8,
            beta: 3.0 * std::f64::consts::PI / 5.0,
            sigma_v: vec![vec![0.0214, 0.0112], vec![0.0112, 0.0217]],
            init_low: -2.0,
            init_high: 2.0,
        }
    }
}

impl BeamSliderParams {
    pub fn sigma_v_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.sigma_v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.contraction.abs() >= 1.0 {
            return Err(Error::Config(
                "beam contraction must have magnitude below 1".into(),
            ));
        }
        check_spd(&self.sigma_v_matrix())
    }
}

/// Two-tank cascade parameters. The printed dynamics give level rates
/// directly; `g` defaults to the SI convention 9.81 and can be set to 981 for
/// the cgs reading of the cm^2 drain area.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoTankParams {
    pub q_in: f64,
    pub c_d: f64,
    pub a_d: f64,
    pub g: f64,
    /// Sampling period in seconds.
    pub dt: f64,
    /// RK4 substeps per sampling period.
    pub substeps: usize,
    pub sigma_v: Vec<Vec<f64>>,
    pub init_low: f64,
    pub init_high: f64,
}

impl Default for TwoTankParams {
    fn default() -> Self {
        Self {
            q_in: 15.0,
            c_d: 0.9,
            a_d: 1.0,
            g: 9.81,
            dt: 0.02,
            substeps: 10,
            sigma_v: vec![vec![0.0214, 0.0112], vec![0.0112, 0.0217]],
            init_low: 5.0,
            init_high: 25.0,
        }
    }
}

impl TwoTankParams {
    pub fn sigma_v_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.sigma_v)
    }

    /// Steady level of the upper tank: outflow balances `Q_in`.
    pub fn equilibrium_level(&self) -> f64 {
        (self.q_in / (self.c_d * self.a_d)).powi(2) / (2.0 * self.g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.q_in <= 0.0
            || self.c_d <= 0.0
            || self.a_d <= 0.0
            || self.g <= 0.0
            || self.dt <= 0.0
            || self.substeps == 0
        {
            return Err(Error::Config("tank parameters must be positive".into()));
        }
        check_spd(&self.sigma_v_matrix())
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

fn check_spd(m: &DMatrix<f64>) -> Result<()> {
    crate::ellipsoid::Ellipsoid::new(DVector::zeros(m.nrows()), m.clone()).map(|_| ())
}

/// Fault scenario, inactive before `onset` (a measurement index).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub onset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    None,
    /// Additive periodic shaft displacement `[delta; delta] sin(k)` applied to
    /// the state before measurement; with `recursive` it also feeds back into
    /// the state recursion.
    Vibration { delta: f64, recursive: bool },
    /// Constant displacement `[delta; delta]` added to the measurement.
    SensorBias { delta: f64 },
    /// Fraction of the lower drain area blocked, in `[0, 1)`.
    DrainBlockage { fraction: f64 },
}

impl FaultSpec {
    pub fn none() -> Self {
        Self {
            kind: FaultKind::None,
            onset: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let FaultKind::DrainBlockage { fraction } = self.kind {
            if !(0.0..1.0).contains(&fraction) {
                return Err(Error::Config("drain blockage fraction must be in [0, 1)".into()));
            }
        }
        Ok(())
    }

    fn active(&self, k: usize) -> bool {
        !matches!(self.kind, FaultKind::None) && k >= self.onset
    }
}

/// One simulated run: per measurement index `k`, the recursion state, the
/// noise-free measurement `y*_k` (including any fault displacement), the
/// noisy measurement `y_k = y*_k + v_k` and the noise draw itself.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub ideal: Vec<DVector<f64>>,
    pub measured: Vec<DVector<f64>>,
    pub noise: Vec<DVector<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.measured.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measured.is_empty()
    }

    pub fn measurement_dim(&self) -> usize {
        self.measured.first().map(|y| y.len()).unwrap_or(0)
    }

    /// CSV columns: `k, x_*, ystar_*, y_*, v_*`.
    pub fn to_csv(&self, path: &std::path::Path) -> Result<()> {
        let p = self.measurement_dim();
        let mut text = String::new();
        let mut header = vec!["k".to_string()];
        for (prefix, _) in [("x", &self.states), ("ystar", &self.ideal), ("y", &self.measured), ("v", &self.noise)] {
            for i in 0..p {
                header.push(format!("{prefix}_{i}"));
            }
        }
        text.push_str(&header.join(","));
        text.push('\n');
        for k in 0..self.len() {
            let mut row = vec![k.to_string()];
            for series in [&self.states, &self.ideal, &self.measured, &self.noise] {
                for v in series[k].iter() {
                    row.push(format!("{v:?}"));
                }
            }
            text.push_str(&row.join(","));
            text.push('\n');
        }
        crate::experiment::write_atomic(path, text.as_bytes())
    }

    pub fn from_csv(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            message: "empty trajectory file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        let p = cols.iter().filter(|c| c.starts_with("x_")).count();
        if p == 0 || cols.len() != 1 + 4 * p {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: "expected columns k, x_*, ystar_*, y_*, v_*".into(),
            });
        }
        let mut t = Trajectory {
            states: Vec::new(),
            ideal: Vec::new(),
            measured: Vec::new(),
            noise: Vec::new(),
            seed: 0,
        };
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", lineno + 2),
                })?;
            if vals.len() != 4 * p {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    message: format!("line {}: expected {} values", lineno + 2, 4 * p),
                });
            }
            let grab = |off: usize| DVector::from_row_slice(&vals[off * p..(off + 1) * p]);
            t.states.push(grab(0));
            t.ideal.push(grab(1));
            t.measured.push(grab(2));
            t.noise.push(grab(3));
        }
        Ok(t)
    }
}

struct NoiseSampler {
    factor: DMatrix<f64>,
    rng: ChaCha8Rng,
}

impl NoiseSampler {
    fn new(sigma_v: &DMatrix<f64>, seed: u64) -> Result<Self> {
        let chol = nalgebra::Cholesky::new(sigma_v.clone()).ok_or_else(|| {
            Error::NotPositiveDefinite("sensor noise covariance must be SPD".into())
        })?;
        Ok(Self {
            factor: chol.l(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn draw(&mut self) -> DVector<f64> {
        let d = self.factor.nrows();
        let std = DVector::from_fn(d, |_, _| self.rng.sample::<f64, _>(StandardNormal));
        &self.factor * std
    }
}

/// Simulates the beam-and-slider for `steps` measurements from `x0`.
pub fn simulate_beam(
    params: &BeamSliderParams,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
    fault: &FaultSpec,
) -> Result<Trajectory> {
    params.validate()?;
    fault.validate()?;
    if steps == 0 {
        return Err(Error::Config("need at least one simulation step".into()));
    }
    if x0.len() != 2 {
        return Err(Error::DimensionMismatch {
            context: "beam initial state",
            expected: 2,
            actual: x0.len(),
        });
    }
    let (s, c) = params.beta.sin_cos();
    let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]) * params.contraction;
    let mut sampler = NoiseSampler::new(&params.sigma_v_matrix(), seed)?;

    let mut t = Trajectory {
        states: Vec::with_capacity(steps),
        ideal: Vec::with_capacity(steps),
        measured: Vec::with_capacity(steps),
        noise: Vec::with_capacity(steps),
        seed,
    };
    let mut x = x0.clone();
    for k in 0..steps {
        let mut observed_state = x.clone();
        if let FaultKind::Vibration { delta, recursive } = fault.kind {
            if fault.active(k) {
                let disp = DVector::from_element(2, delta * (k as f64).sin());
                observed_state += &disp;
                if recursive {
                    x += &disp;
                }
            }
        }
        let mut ystar = observed_state.clone();
        if let FaultKind::SensorBias { delta } = fault.kind {
            if fault.active(k) {
                ystar += DVector::from_element(2, delta);
            }
        }
        let v = sampler.draw();
        t.states.push(x.clone());
        t.measured.push(&ystar + &v);
        t.ideal.push(ystar);
        t.noise.push(v);
        x = &rot * x;
    }
    Ok(t)
}

/// Simulates the two-tank cascade for `steps` measurements from levels `h0`,
/// integrating with RK4 at `dt / substeps` and clamping levels at zero (the
/// square root never sees a negative level).
pub fn simulate_tanks(
    params: &TwoTankParams,
    h0: &DVector<f64>,
    steps: usize,
    seed: u64,
    fault: &FaultSpec,
) -> Result<Trajectory> {
    params.validate()?;
    fault.validate()?;
    if steps == 0 {
        return Err(Error::Config("need at least one simulation step".into()));
    }
    if h0.len() != 2 || h0.iter().any(|&h| h < 0.0) {
        return Err(Error::Config(
            "tank initial levels must be two nonnegative values".into(),
        ));
    }
    let mut sampler = NoiseSampler::new(&params.sigma_v_matrix(), seed)?;

    let outflow = |h: f64, coeff: f64| coeff * (2.0 * params.g * h.max(0.0)).sqrt();
    let rate = |h: &DVector<f64>, blocked: f64| -> DVector<f64> {
        let cda = params.c_d * params.a_d;
        let out1 = outflow(h[0], cda);
        let out2 = outflow(h[1], cda * (1.0 - blocked));
        DVector::from_vec(vec![params.q_in - out1, out1 - out2])
    };

    let mut t = Trajectory {
        states: Vec::with_capacity(steps),
        ideal: Vec::with_capacity(steps),
        measured: Vec::with_capacity(steps),
        noise: Vec::with_capacity(steps),
        seed,
    };
    let mut h = h0.clone();
    let sub_dt = params.dt / params.substeps as f64;
    for k in 0..steps {
        let v = sampler.draw();
        t.states.push(h.clone());
        t.ideal.push(h.clone());
        t.measured.push(&h + &v);
        t.noise.push(v);

        let blocked = match fault.kind {
            FaultKind::DrainBlockage { fraction } if fault.active(k) => fraction,
            _ => 0.0,
        };
        for _ in 0..params.substeps {
            let k1 = rate(&h, blocked);
            let k2 = rate(&(&h + &k1 * (sub_dt / 2.0)), blocked);
            let k3 = rate(&(&h + &k2 * (sub_dt / 2.0)), blocked);
            let k4 = rate(&(&h + &k3 * sub_dt), blocked);
            h += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (sub_dt / 6.0);
            h.apply(|x| *x = x.max(0.0));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "tank integration produced a non-finite level at step {k}"
            )));
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Beam,
    Tanks,
}

impl std::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SystemKind::Beam => write!(f, "beam"),
            SystemKind::Tanks => write!(f, "tanks"),
        }
    }
}

/// Plant parameters for either system.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantParams {
    Beam(BeamSliderParams),
    Tanks(TwoTankParams),
}

impl PlantParams {
    pub fn system(&self) -> SystemKind {
        match self {
            PlantParams::Beam(_) => SystemKind::Beam,
            PlantParams::Tanks(_) => SystemKind::Tanks,
        }
    }

    pub fn sigma_v_matrix(&self) -> DMatrix<f64> {
        match self {
            PlantParams::Beam(p) => p.sigma_v_matrix(),
            PlantParams::Tanks(p) => p.sigma_v_matrix(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PlantParams::Beam(p) => p.validate(),
            PlantParams::Tanks(p) => p.validate(),
        }
    }

    fn init_range(&self) -> (f64, f64) {
        match self {
            PlantParams::Beam(p) => (p.init_low, p.init_high),
            PlantParams::Tanks(p) => (p.init_low, p.init_high),
        }
    }

    /// Simulates one trajectory from the given initial state.
    pub fn simulate(
        &self,
        x0: &DVector<f64>,
        steps: usize,
        seed: u64,
        fault: &FaultSpec,
    ) -> Result<Trajectory> {
        match self {
            PlantParams::Beam(p) => simulate_beam(p, x0, steps, seed, fault),
            PlantParams::Tanks(p) => simulate_tanks(p, x0, steps, seed, fault),
        }
    }
}

/// Draws fault-free training trajectories with initial conditions uniform on
/// the system's documented box; each trajectory gets its own noise stream
/// whose seed is drawn from a master stream seeded with `seed`.
pub fn generate_training_set(
    plant: &PlantParams,
    n_trajectories: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_trajectories == 0 {
        return Err(Error::Config("need at least one training trajectory".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = plant.init_range();
    let mut out = Vec::with_capacity(n_trajectories);
    for _ in 0..n_trajectories {
        let x0 = DVector::from_fn(2, |_, _| master.gen_range(lo..hi));
        let traj_seed = master.next_u64();
        out.push(plant.simulate(&x0, steps, traj_seed, &FaultSpec::none())?);
    }
    Ok(out)
}
