//! Conic backend contract and the default log-barrier interior-point solver.
//!
//! The certifier lowers its LMI to this standard form:
//!
//! ```text
//! minimize    c' x  [- logdet H(x)]
//! subject to  F0_b + Σ_j x_j F_bj ⪯ 0   for every block b
//!             |x_j| <= var_bound
//! ```
//!
//! with all matrices symmetric and `H(x)` affine. Backends are pluggable via
//! [`SdpBackend`]; [`BarrierBackend`] is the built-in default: a two-phase
//! path-following barrier method with damped Newton centering. Its iterates
//! are strictly feasible by construction, so the matrix inequality holds with
//! margin at the returned point, which is exactly what a certificate needs.
//!
//! Problems here are small (cone dimensions below ~50, at most ~100 scalar
//! variables), so the Hessian is assembled densely; per-variable coefficient
//! matrices are kept as symmetric triplet lists since they are very sparse.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric coefficient matrix of one scalar variable inside one block,
/// stored as upper-triangular triplets `(row, col, value)` with `row <= col`;
/// off-diagonal entries are implied on both sides.
#[derive(Debug, Clone)]
pub struct VarCoeff {
    pub var: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl VarCoeff {
    fn validate(&self, dim: usize, num_vars: usize) -> Result<()> {
        if self.var >= num_vars {
            return Err(Error::Config(format!(
                "coefficient references variable {} of {num_vars}",
                self.var
            )));
        }
        for &(r, c, v) in &self.entries {
            if r > c || c >= dim || !v.is_finite() {
                return Err(Error::Config(format!(
                    "bad triplet ({r}, {c}, {v}) in a block of dimension {dim}"
                )));
            }
        }
        Ok(())
    }
}

/// One matrix inequality `F0 + Σ_j x_j F_j ⪯ 0`.
#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub dim: usize,
    pub f0: DMatrix<f64>,
    pub coeffs: Vec<VarCoeff>,
}

/// Affine matrix `H(x) = H0 + Σ_j x_j H_j` whose log-determinant enters the
/// objective as `-logdet H(x)`; it must be kept positive definite by the
/// problem's own constraints.
#[derive(Debug, Clone)]
pub struct LogDetTerm {
    pub dim: usize,
    pub h0: DMatrix<f64>,
    pub coeffs: Vec<VarCoeff>,
}

#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub num_vars: usize,
    pub blocks: Vec<LmiBlock>,
    /// Linear objective coefficients (minimized).
    pub objective: DVector<f64>,
    pub logdet_term: Option<LogDetTerm>,
    /// Box safeguard `|x_j| <= var_bound`; keeps degenerate problems (for
    /// example a constant network, whose output set is a single point)
    /// bounded.
    pub var_bound: f64,
}

impl SdpProblem {
    fn validate(&self) -> Result<()> {
        if self.objective.len() != self.num_vars {
            return Err(Error::Config("objective length must match num_vars".into()));
        }
        if !(self.var_bound > 0.0) {
            return Err(Error::Config("var_bound must be positive".into()));
        }
        for b in &self.blocks {
            if b.f0.nrows() != b.dim || b.f0.ncols() != b.dim {
                return Err(Error::Config("block constant term has wrong shape".into()));
            }
            for c in &b.coeffs {
                c.validate(b.dim, self.num_vars)?;
            }
        }
        if let Some(term) = &self.logdet_term {
            if term.h0.nrows() != term.dim || term.h0.ncols() != term.dim {
                return Err(Error::Config("logdet term has wrong shape".into()));
            }
            for c in &term.coeffs {
                c.validate(term.dim, self.num_vars)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Stalled,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolveStatus::Optimal => write!(f, "optimal"),
            SolveStatus::Infeasible => write!(f, "infeasible"),
            SolveStatus::Stalled => write!(f, "stalled"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SolveStatus,
    pub x: DVector<f64>,
    /// Objective value at `x` (including the logdet term when present).
    pub objective: f64,
    /// Guaranteed bound on the distance to the true optimum.
    pub gap_bound: f64,
    pub newton_steps: usize,
}

#[derive(Debug, Clone)]
pub struct SolverSettings {
    /// Target on the duality-gap bound `m / t`.
    pub gap_tol: f64,
    /// Barrier parameter growth per outer stage.
    pub mu: f64,
    /// Centering stops when half the squared Newton decrement drops below this.
    pub newton_tol: f64,
    pub max_newton_per_stage: usize,
    pub max_stages: usize,
    /// Phase I stops as soon as the slack is below the negative of this margin.
    pub phase1_margin: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            gap_tol: 1e-8,
            mu: 40.0,
            newton_tol: 1e-9,
            max_newton_per_stage: 80,
            max_stages: 60,
            phase1_margin: 1e-6,
        }
    }
}

impl SolverSettings {
    /// Looser target for the per-timestep detector solves, where certificate
    /// validity (strict feasibility) matters and the last decimals of the
    /// objective do not.
    pub fn detection() -> Self {
        Self {
            gap_tol: 1e-5,
            ..Self::default()
        }
    }
}

/// A conic backend: receives the lowered problem, returns variable values.
pub trait SdpBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn supports_logdet(&self) -> bool;
    fn solve(
        &self,
        problem: &SdpProblem,
        settings: &SolverSettings,
        warm_start: Option<&DVector<f64>>,
    ) -> Result<SdpSolution>;
}

/// Environment variable consulted by [`backend_from_env`].
pub const BACKEND_ENV: &str = "NARXBOUND_SDP_BACKEND";

/// Selects a backend by name (`barrier` is the only built-in).
pub fn backend_by_name(name: &str) -> Result<Box<dyn SdpBackend>> {
    match name {
        "barrier" => Ok(Box::new(BarrierBackend)),
        other => Err(Error::Config(format!(
            "unknown SDP backend {other:?}; available: barrier"
        ))),
    }
}

/// Reads `NARXBOUND_SDP_BACKEND` (default `barrier`).
pub fn backend_from_env() -> Result<Box<dyn SdpBackend>> {
    match std::env::var(BACKEND_ENV) {
        Ok(name) => backend_by_name(&name),
        Err(std::env::VarError::NotPresent) => backend_by_name("barrier"),
        Err(e) => Err(Error::Config(format!("cannot read {BACKEND_ENV}: {e}"))),
    }
}

/// Path-following log-barrier interior-point method.
pub struct BarrierBackend;

impl SdpBackend for BarrierBackend {
    fn name(&self) -> &'static str {
        "barrier"
    }

    fn supports_logdet(&self) -> bool {
        true
    }

    fn solve(
        &self,
        problem: &SdpProblem,
        settings: &SolverSettings,
        warm_start: Option<&DVector<f64>>,
    ) -> Result<SdpSolution> {
        problem.validate()?;
        let mut worker = Worker::new(problem, settings);
        worker.run(warm_start)
    }
}

/// A matrix term `M(x) = M0 + Σ_j x_j Mc_j` that the barrier keeps positive
/// definite; constraint blocks enter with `M = -G` and weight 1, the logdet
/// objective with `M = H` and weight `t`.
struct BarrierMatrix {
    dim: usize,
    m0: DMatrix<f64>,
    coeffs: Vec<VarCoeff>,
}

impl BarrierMatrix {
    fn from_block(b: &LmiBlock) -> Self {
        Self {
            dim: b.dim,
            m0: -&b.f0,
            coeffs: b
                .coeffs
                .iter()
                .map(|c| VarCoeff {
                    var: c.var,
                    entries: c.entries.iter().map(|&(r, s, v)| (r, s, -v)).collect(),
                })
                .collect(),
        }
    }

    fn from_logdet(t: &LogDetTerm) -> Self {
        Self {
            dim: t.dim,
            m0: t.h0.clone(),
            coeffs: t.coeffs.clone(),
        }
    }

    fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.m0.clone();
        for c in &self.coeffs {
            let xv = x[c.var];
            for &(r, s, v) in &c.entries {
                m[(r, s)] += xv * v;
                if r != s {
                    m[(s, r)] += xv * v;
                }
            }
        }
        m
    }
}

struct Worker<'a> {
    problem: &'a SdpProblem,
    settings: &'a SolverSettings,
    constraints: Vec<BarrierMatrix>,
    logdet: Option<BarrierMatrix>,
    /// Total barrier parameter of the constraints (block dims plus box terms).
    theta: f64,
    newton_steps: usize,
}

struct Eval {
    /// Cholesky factors of every constraint matrix, then the logdet matrix.
    factors: Vec<Cholesky<f64, nalgebra::Dyn>>,
    logdet_factor: Option<Cholesky<f64, nalgebra::Dyn>>,
}

enum CenterOutcome {
    Centered,
    Stuck,
}

impl<'a> Worker<'a> {
    fn new(problem: &'a SdpProblem, settings: &'a SolverSettings) -> Self {
        let constraints: Vec<BarrierMatrix> =
            problem.blocks.iter().map(BarrierMatrix::from_block).collect();
        let logdet = problem.logdet_term.as_ref().map(BarrierMatrix::from_logdet);
        let theta = problem.blocks.iter().map(|b| b.dim as f64).sum::<f64>()
            + 2.0 * problem.num_vars as f64;
        Self {
            problem,
            settings,
            constraints,
            logdet,
            theta,
            newton_steps: 0,
        }
    }

    fn in_box(&self, x: &DVector<f64>) -> bool {
        let r = self.problem.var_bound;
        x.iter().all(|&v| v > -r && v < r)
    }

    fn evaluate(&self, x: &DVector<f64>) -> Option<Eval> {
        if !self.in_box(x) {
            return None;
        }
        let mut factors = Vec::with_capacity(self.constraints.len());
        for c in &self.constraints {
            factors.push(Cholesky::new(c.eval(x))?);
        }
        let logdet_factor = match &self.logdet {
            Some(h) => Some(Cholesky::new(h.eval(x))?),
            None => None,
        };
        Some(Eval {
            factors,
            logdet_factor,
        })
    }

    /// Objective `c' x - logdet H(x)` at a feasible point.
    fn objective(&self, x: &DVector<f64>, eval: &Eval) -> f64 {
        let mut f = self.problem.objective.dot(x);
        if let Some(chol) = &eval.logdet_factor {
            f -= 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        }
        f
    }

    /// Barrier potential `t f0(x) + φ(x)`.
    fn potential(&self, t: f64, x: &DVector<f64>, eval: &Eval) -> f64 {
        let mut psi = t * self.objective(x, eval);
        for chol in &eval.factors {
            psi -= 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        }
        let r = self.problem.var_bound;
        for &v in x.iter() {
            psi -= (r - v).ln() + (r + v).ln();
        }
        psi
    }

    /// Gradient and Hessian of the potential at a feasible point.
    fn derivatives(&self, t: f64, x: &DVector<f64>, eval: &Eval) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.problem.num_vars;
        let mut grad = &self.problem.objective * t;
        let mut hess = DMatrix::zeros(n, n);

        let mut accumulate = |m: &BarrierMatrix, chol: &Cholesky<f64, nalgebra::Dyn>, w: f64| {
            let inv = chol.inverse();
            let k = m.dim;
            // Z_j = inv * Mc_j * inv via rank-one outer products per triplet.
            let mut zs: Vec<DMatrix<f64>> = Vec::with_capacity(m.coeffs.len());
            for c in &m.coeffs {
                let mut z = DMatrix::zeros(k, k);
                let mut trace = 0.0;
                for &(r, s, v) in &c.entries {
                    let col_r = inv.column(r);
                    let col_s = inv.column(s);
                    // inv[:, s] * inv[r, :] scaled; symmetric companion when r != s.
                    z.ger(v, &col_s, &col_r, 1.0);
                    trace += v * inv[(r, s)];
                    if r != s {
                        z.ger(v, &col_r, &col_s, 1.0);
                        trace += v * inv[(s, r)];
                    }
                }
                grad[c.var] -= w * trace;
                zs.push(z);
            }
            for (a, ca) in m.coeffs.iter().enumerate() {
                let za = &zs[a];
                for cb in m.coeffs.iter().skip(a) {
                    let mut h = 0.0;
                    for &(r, s, v) in &cb.entries {
                        h += v * za[(r, s)];
                        if r != s {
                            h += v * za[(s, r)];
                        }
                    }
                    hess[(ca.var, cb.var)] += w * h;
                    if ca.var != cb.var {
                        hess[(cb.var, ca.var)] += w * h;
                    }
                }
            }
        };

        for (m, chol) in self.constraints.iter().zip(&eval.factors) {
            accumulate(m, chol, 1.0);
        }
        if let (Some(h), Some(chol)) = (&self.logdet, &eval.logdet_factor) {
            accumulate(h, chol, t);
        }

        let r = self.problem.var_bound;
        for j in 0..n {
            let lo = 1.0 / (r + x[j]);
            let hi = 1.0 / (r - x[j]);
            grad[j] += hi - lo;
            hess[(j, j)] += hi * hi + lo * lo;
        }
        (grad, hess)
    }

    /// Damped Newton centering of `t f0 + φ`; `x` must be strictly feasible.
    /// Returns early as soon as `early_stop` fires. `Stuck` means the iterate
    /// is still strictly feasible but float precision allows no further
    /// progress at this barrier parameter.
    fn center(
        &mut self,
        t: f64,
        x: &mut DVector<f64>,
        early_stop: &dyn Fn(&DVector<f64>) -> bool,
    ) -> Result<CenterOutcome> {
        for _ in 0..self.settings.max_newton_per_stage {
            if early_stop(x) {
                return Ok(CenterOutcome::Centered);
            }
            let eval = self
                .evaluate(x)
                .ok_or_else(|| Error::Numerical("barrier iterate left the cone".into()))?;
            let (grad, hess) = self.derivatives(t, x, &eval);
            if grad.iter().any(|v| !v.is_finite()) || hess.iter().any(|v| !v.is_finite()) {
                return Ok(CenterOutcome::Stuck);
            }

            let diag_scale = hess.diagonal().amax().max(1.0);
            let mut ridge = 0.0;
            let step = loop {
                let mut h = hess.clone();
                if ridge > 0.0 {
                    for j in 0..h.nrows() {
                        h[(j, j)] += ridge;
                    }
                }
                match Cholesky::new(h) {
                    Some(chol) => break chol.solve(&(-&grad)),
                    None => {
                        ridge = if ridge == 0.0 {
                            1e-12 * diag_scale
                        } else {
                            ridge * 100.0
                        };
                        if ridge > 1e3 * diag_scale {
                            return Ok(CenterOutcome::Stuck);
                        }
                    }
                }
            };
            self.newton_steps += 1;

            let decrement_sq = -grad.dot(&step);
            if decrement_sq <= 2.0 * self.settings.newton_tol {
                return Ok(CenterOutcome::Centered);
            }

            let psi0 = self.potential(t, x, &eval);
            let slope = grad.dot(&step);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &*x + &step * alpha;
                if let Some(cand_eval) = self.evaluate(&cand) {
                    if self.potential(t, &cand, &cand_eval) <= psi0 + 0.25 * alpha * slope {
                        *x = cand;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Ok(CenterOutcome::Stuck);
            }
        }
        Ok(CenterOutcome::Centered)
    }

    fn run(&mut self, warm_start: Option<&DVector<f64>>) -> Result<SdpSolution> {
        let n = self.problem.num_vars;
        let mut x = match warm_start {
            Some(x0) if x0.len() == n => x0.clone(),
            _ => DVector::zeros(n),
        };
        // Clamp into the box interior.
        let r = self.problem.var_bound;
        for v in x.iter_mut() {
            *v = v.clamp(-0.9 * r, 0.9 * r);
        }

        if self.evaluate(&x).is_none() {
            match self.phase_one(&mut x)? {
                SolveStatus::Optimal => {}
                status => {
                    return Ok(SdpSolution {
                        status,
                        x,
                        objective: f64::NAN,
                        gap_bound: f64::INFINITY,
                        newton_steps: self.newton_steps,
                    })
                }
            }
        }

        // Phase II: follow the central path until the gap bound undercuts the
        // target, with a safety factor for inexact centering. When float
        // precision stalls a stage, fall back to the last centered iterate
        // and report the gap that stage certified.
        let mut t = 1.0;
        let no_stop = |_: &DVector<f64>| false;
        let mut best = x.clone();
        let mut achieved_gap = f64::INFINITY;
        for _ in 0..self.settings.max_stages {
            match self.center(t, &mut x, &no_stop)? {
                CenterOutcome::Centered => {
                    best.copy_from(&x);
                    achieved_gap = self.theta / t;
                    if achieved_gap <= 0.5 * self.settings.gap_tol {
                        break;
                    }
                    t *= self.settings.mu;
                }
                CenterOutcome::Stuck => break,
            }
        }
        let status = if achieved_gap <= self.settings.gap_tol {
            SolveStatus::Optimal
        } else {
            SolveStatus::Stalled
        };
        let objective = match self.evaluate(&best) {
            Some(eval) => self.objective(&best, &eval),
            None => f64::NAN,
        };
        Ok(SdpSolution {
            status,
            x: best,
            objective,
            gap_bound: achieved_gap,
            newton_steps: self.newton_steps,
        })
    }

    /// Minimizes the slack `s` in `G_b(x) ⪯ s I` from an always-feasible
    /// start, stopping as soon as `s` is safely negative. Mutates `x` to the
    /// strictly feasible point found.
    fn phase_one(&mut self, x: &mut DVector<f64>) -> Result<SolveStatus> {
        let n = self.problem.num_vars;
        let margin = self.settings.phase1_margin;

        let mut s0 = f64::NEG_INFINITY;
        for c in &self.constraints {
            // M = -G must become positive definite: s exceeds lambda_max(G).
            let g = -c.eval(x);
            let lam_max = g
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            s0 = s0.max(lam_max);
        }
        let s0 = s0 + 1.0;

        let mut blocks: Vec<LmiBlock> = self.problem.blocks.clone();
        for b in &mut blocks {
            let mut entries = Vec::with_capacity(b.dim);
            for i in 0..b.dim {
                entries.push((i, i, -1.0));
            }
            b.coeffs.push(VarCoeff { var: n, entries });
        }
        let mut objective = DVector::zeros(n + 1);
        objective[n] = 1.0;
        let aug = SdpProblem {
            num_vars: n + 1,
            blocks,
            objective,
            logdet_term: None,
            var_bound: self.problem.var_bound.max(2.0 * s0.abs() + 2.0),
        };

        let mut sub = Worker::new(&aug, self.settings);
        let mut xs = DVector::zeros(n + 1);
        xs.rows_mut(0, n).copy_from(x);
        xs[n] = s0;
        if sub.evaluate(&xs).is_none() {
            return Err(Error::Numerical(
                "phase I could not construct a feasible start".into(),
            ));
        }

        let target = -margin;
        let feasible = |v: &DVector<f64>| v[n] <= target;
        let mut t = 1.0;
        for _ in 0..self.settings.max_stages {
            let outcome = sub.center(t, &mut xs, &feasible)?;
            if feasible(&xs) {
                self.newton_steps += sub.newton_steps;
                x.copy_from(&xs.rows(0, n));
                debug_assert!(self.evaluate(x).is_some());
                return Ok(SolveStatus::Optimal);
            }
            if sub.theta / t <= margin || matches!(outcome, CenterOutcome::Stuck) {
                // Optimal slack is not meaningfully negative: infeasible.
                self.newton_steps += sub.newton_steps;
                return Ok(SolveStatus::Infeasible);
            }
            t *= self.settings.mu;
        }
        self.newton_steps += sub.newton_steps;
        Ok(SolveStatus::Stalled)
    }
}

/// Largest eigenvalue of a symmetric matrix; used for independent
/// feasibility re-checks of returned certificates.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    ((m + m.transpose()) * 0.5)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}
