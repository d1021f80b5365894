//! Assembles the output-covering LMI, solves it through a conic backend, and
//! returns the certified prediction ellipsoid `E(-U^{-1} V, U^{-2})`.
//!
//! The decision variables are the input multipliers `τ >= 0`, the activation
//! multipliers `(λ, ν >= 0, η >= 0)`, a symmetric `U` (floored at `eps I` so
//! the bound ellipsoid stays well defined) and a vector `V`. The bordered
//! matrix assembled in [`assemble`] is affine in all of them; by Schur
//! complement its negative semidefiniteness is equivalent to
//! `Σ τ_i M_i + M_mid + M_out ⪯ 0`, which by the S-procedure traps every
//! reachable network output in the bound.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ellipsoid::Ellipsoid;
use crate::error::{Error, Result};
use crate::net::ReluNetwork;
use crate::qc::{stack, ReluQcMultipliers, StackedForm};
use crate::sdp::{
    LmiBlock, LogDetTerm, SdpBackend, SdpProblem, SdpSolution, SolveStatus, SolverSettings,
    VarCoeff,
};

/// Volume proxy minimized by the semidefinite program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Maximize `tr(U)`: a pure SDP, supported by every backend.
    Trace,
    /// Maximize `logdet(U)`: exactly the log-volume of the bound; requires a
    /// backend that declares support.
    LogDet,
}

impl Default for Objective {
    fn default() -> Self {
        Objective::Trace
    }
}

/// Minimum eigenvalue floor for `U`.
pub const DEFAULT_EPS_U: f64 = 1e-6;
/// Acceptance tolerance on the independently recomputed `λ_max(M)`.
pub const DEFAULT_PSD_TOL: f64 = 1e-7;
/// Tolerance on multiplier sign constraints at the solution.
pub const SIGN_TOL: f64 = 1e-9;
const DEFAULT_VAR_BOUND: f64 = 1e5;

/// Index bookkeeping for the stacked decision vector
/// `x = [τ; λ; ν; η; vec_u(U); V]` with `vec_u` the row-major upper triangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarLayout {
    pub q: usize,
    pub hidden: usize,
    pub n_pi: usize,
}

impl VarLayout {
    pub fn tau(&self, i: usize) -> usize {
        i
    }

    pub fn lambda(&self, i: usize) -> usize {
        self.q + i
    }

    pub fn nu(&self, i: usize) -> usize {
        self.q + self.hidden + i
    }

    pub fn eta(&self, i: usize) -> usize {
        self.q + 2 * self.hidden + i
    }

    /// Upper-triangular entry `(a, b)` of `U`, `a <= b`.
    pub fn u_entry(&self, a: usize, b: usize) -> usize {
        debug_assert!(a <= b && b < self.n_pi);
        self.q + 3 * self.hidden + a * self.n_pi - a * (a + 1) / 2 + b
    }

    pub fn v(&self, a: usize) -> usize {
        self.q + 3 * self.hidden + self.n_pi * (self.n_pi + 1) / 2 + a
    }

    pub fn total(&self) -> usize {
        self.q + 3 * self.hidden + self.n_pi * (self.n_pi + 1) / 2 + self.n_pi
    }

    pub fn unpack(
        &self,
        x: &DVector<f64>,
    ) -> (DVector<f64>, ReluQcMultipliers, DMatrix<f64>, DVector<f64>) {
        let tau = DVector::from_fn(self.q, |i, _| x[self.tau(i)]);
        let mult = ReluQcMultipliers {
            lambda: DVector::from_fn(self.hidden, |i, _| x[self.lambda(i)]),
            nu: DVector::from_fn(self.hidden, |i, _| x[self.nu(i)]),
            eta: DVector::from_fn(self.hidden, |i, _| x[self.eta(i)]),
        };
        let u = DMatrix::from_fn(self.n_pi, self.n_pi, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            x[self.u_entry(a, b)]
        });
        let v = DVector::from_fn(self.n_pi, |a, _| x[self.v(a)]);
        (tau, mult, u, v)
    }
}

/// The bordered matrix of the output-covering condition:
///
/// ```text
/// M = [ Σ τ_i M_i + M_mid(Q) - e e'   |  0; W_l' U; b_l' U + V' ]
///     [ (border)'                     |  -I                     ]
/// ```
///
/// `M ⪯ 0` is equivalent (Schur complement of the `-I` block) to
/// `Σ τ_i M_i + M_mid + M_out ⪯ 0`.
pub fn assemble(
    stacked: &StackedForm,
    input_qcs: &[DMatrix<f64>],
    tau: &DVector<f64>,
    multipliers: &ReluQcMultipliers,
    u: &DMatrix<f64>,
    v: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n_zp = stacked.qc_dim();
    let n_pi = stacked.dims().n_pi;
    if tau.len() != input_qcs.len() {
        return Err(Error::DimensionMismatch {
            context: "tau count vs input QCs",
            expected: input_qcs.len(),
            actual: tau.len(),
        });
    }
    if u.nrows() != n_pi || u.ncols() != n_pi || v.len() != n_pi {
        return Err(Error::DimensionMismatch {
            context: "assemble (U, V)",
            expected: n_pi,
            actual: u.nrows(),
        });
    }
    let dim = n_zp + n_pi;
    let mut m = DMatrix::zeros(dim, dim);

    let mut top = stacked.activation_qc(multipliers)?;
    for (mi, &t) in input_qcs.iter().zip(tau.iter()) {
        if mi.nrows() != n_zp || mi.ncols() != n_zp {
            return Err(Error::DimensionMismatch {
                context: "input QC size",
                expected: n_zp,
                actual: mi.nrows(),
            });
        }
        top += mi * t;
    }
    top[(n_zp - 1, n_zp - 1)] -= 1.0;
    m.view_mut((0, 0), (n_zp, n_zp)).copy_from(&top);

    // Border: rows of z^l carry W_l' U, the homogeneous row carries b_l' U + V'.
    let w_out = stacked.output_weight();
    let n_last = w_out.ncols();
    let border_rows = n_zp - 1 - n_last;
    let wu = w_out.transpose() * u;
    m.view_mut((border_rows, n_zp), (n_last, n_pi)).copy_from(&wu);
    m.view_mut((n_zp, border_rows), (n_pi, n_last))
        .copy_from(&wu.transpose());
    let bu = u * stacked.output_bias() + v;
    for a in 0..n_pi {
        m[(n_zp - 1, n_zp + a)] = bu[a];
        m[(n_zp + a, n_zp - 1)] = bu[a];
    }
    for a in 0..n_pi {
        m[(n_zp + a, n_zp + a)] = -1.0;
    }
    Ok(m)
}

/// An assembled certification problem: the stacked network plus one QC matrix
/// per input block (or a single stacked QC for the single-ellipsoid variant).
#[derive(Debug, Clone)]
pub struct LmiProblem {
    pub stacked: StackedForm,
    pub input_qcs: Vec<DMatrix<f64>>,
    pub objective: Objective,
    pub eps_u: f64,
    pub psd_tol: f64,
    pub var_bound: f64,
}

impl LmiProblem {
    pub fn new(
        stacked: StackedForm,
        input_qcs: Vec<DMatrix<f64>>,
        objective: Objective,
    ) -> Result<Self> {
        let n_zp = stacked.qc_dim();
        if input_qcs.is_empty() {
            return Err(Error::Config("at least one input QC is required".into()));
        }
        for m in &input_qcs {
            if m.nrows() != n_zp || m.ncols() != n_zp {
                return Err(Error::DimensionMismatch {
                    context: "input QC size",
                    expected: n_zp,
                    actual: m.nrows(),
                });
            }
        }
        Ok(Self {
            stacked,
            input_qcs,
            objective,
            eps_u: DEFAULT_EPS_U,
            psd_tol: DEFAULT_PSD_TOL,
            var_bound: DEFAULT_VAR_BOUND,
        })
    }

    pub fn layout(&self) -> VarLayout {
        VarLayout {
            q: self.input_qcs.len(),
            hidden: self.stacked.dims().hidden,
            n_pi: self.stacked.dims().n_pi,
        }
    }

    /// Lowers to the backend standard form: the bordered LMI, one 1x1 sign
    /// block per nonnegative multiplier, and the `U ⪰ eps I` floor.
    pub fn lower(&self) -> SdpProblem {
        self.lower_with_scale().0
    }

    /// Lowering plus the diagonal congruence applied to the bordered block
    /// (the backend sees `D M(x) D ⪯ 0`, equivalent to `M(x) ⪯ 0`).
    pub fn lower_with_scale(&self) -> (SdpProblem, Vec<f64>) {
        let layout = self.layout();
        let n = layout.total();
        let dims = self.stacked.dims();
        let n_zp = self.stacked.qc_dim();
        let n_pi = dims.n_pi;
        let lmi_dim = n_zp + n_pi;

        let mut f0 = DMatrix::zeros(lmi_dim, lmi_dim);
        f0[(n_zp - 1, n_zp - 1)] = -1.0;
        for a in 0..n_pi {
            f0[(n_zp + a, n_zp + a)] = -1.0;
        }

        let mut coeffs: Vec<VarCoeff> = Vec::with_capacity(n);
        for (i, mi) in self.input_qcs.iter().enumerate() {
            coeffs.push(VarCoeff {
                var: layout.tau(i),
                entries: upper_triplets(mi),
            });
        }
        let basis = self.stacked.activation_qc_basis();
        for i in 0..dims.hidden {
            coeffs.push(VarCoeff {
                var: layout.lambda(i),
                entries: upper_triplets(&basis.lambda[i]),
            });
            coeffs.push(VarCoeff {
                var: layout.nu(i),
                entries: upper_triplets(&basis.nu[i]),
            });
            coeffs.push(VarCoeff {
                var: layout.eta(i),
                entries: upper_triplets(&basis.eta[i]),
            });
        }

        // Border contributions of U and V. The z^l rows get W_l' U, the
        // homogeneous row gets b_l' U + V'.
        let w_out = self.stacked.output_weight();
        let b_out = self.stacked.output_bias();
        let n_last = w_out.ncols();
        let border_rows = n_zp - 1 - n_last;
        for a in 0..n_pi {
            for b in a..n_pi {
                let mut entries = Vec::new();
                // d(W' U)[r, c] for U perturbed in the symmetric (a, b) slot.
                for r in 0..n_last {
                    entries.push((border_rows + r, n_zp + a, w_out[(b, r)]));
                    if a != b {
                        entries.push((border_rows + r, n_zp + b, w_out[(a, r)]));
                    }
                }
                entries.push((n_zp - 1, n_zp + a, b_out[b]));
                if a != b {
                    entries.push((n_zp - 1, n_zp + b, b_out[a]));
                }
                entries.retain(|&(_, _, v)| v != 0.0);
                coeffs.push(VarCoeff {
                    var: layout.u_entry(a, b),
                    entries,
                });
            }
        }
        for a in 0..n_pi {
            coeffs.push(VarCoeff {
                var: layout.v(a),
                entries: vec![(n_zp - 1, n_zp + a, 1.0)],
            });
        }

        // Equilibrate the bordered block by a diagonal congruence: the
        // feasible set in x is untouched (D M D ⪯ 0 iff M ⪯ 0) while large
        // bias or covariance entries stop dominating the Newton systems.
        let mut row_scale = vec![1.0_f64; lmi_dim];
        for r in 0..lmi_dim {
            let mut m: f64 = f0.row(r).amax();
            for c in &coeffs {
                for &(i, j, v) in &c.entries {
                    if i == r || j == r {
                        m = m.max(v.abs());
                    }
                }
            }
            row_scale[r] = 1.0 / m.max(1.0).sqrt();
        }
        for r in 0..lmi_dim {
            for c in 0..lmi_dim {
                f0[(r, c)] *= row_scale[r] * row_scale[c];
            }
        }
        for c in &mut coeffs {
            for e in &mut c.entries {
                e.2 *= row_scale[e.0] * row_scale[e.1];
            }
        }

        let mut blocks = vec![LmiBlock {
            dim: lmi_dim,
            f0,
            coeffs,
        }];

        // Sign constraints as 1x1 blocks: -x <= 0.
        let mut sign_var = |var: usize| {
            blocks.push(LmiBlock {
                dim: 1,
                f0: DMatrix::zeros(1, 1),
                coeffs: vec![VarCoeff {
                    var,
                    entries: vec![(0, 0, -1.0)],
                }],
            });
        };
        for i in 0..layout.q {
            sign_var(layout.tau(i));
        }
        for i in 0..dims.hidden {
            sign_var(layout.nu(i));
            sign_var(layout.eta(i));
        }

        // U floor: eps I - U <= 0.
        let mut u_coeffs = Vec::new();
        for a in 0..n_pi {
            for b in a..n_pi {
                u_coeffs.push(VarCoeff {
                    var: layout.u_entry(a, b),
                    entries: vec![(a, b, -1.0)],
                });
            }
        }
        blocks.push(LmiBlock {
            dim: n_pi,
            f0: DMatrix::identity(n_pi, n_pi) * self.eps_u,
            coeffs: u_coeffs,
        });

        let mut objective = DVector::zeros(n);
        let mut logdet_term = None;
        match self.objective {
            Objective::Trace => {
                for a in 0..n_pi {
                    objective[layout.u_entry(a, a)] = -1.0;
                }
            }
            Objective::LogDet => {
                let mut h_coeffs = Vec::new();
                for a in 0..n_pi {
                    for b in a..n_pi {
                        h_coeffs.push(VarCoeff {
                            var: layout.u_entry(a, b),
                            entries: vec![(a, b, 1.0)],
                        });
                    }
                }
                logdet_term = Some(LogDetTerm {
                    dim: n_pi,
                    h0: DMatrix::zeros(n_pi, n_pi),
                    coeffs: h_coeffs,
                });
            }
        }

        (
            SdpProblem {
                num_vars: n,
                blocks,
                objective,
                logdet_term,
                var_bound: self.var_bound,
            },
            row_scale,
        )
    }

    /// Reassembles the bordered matrix at a solution vector through the
    /// reference [`assemble`] path (independent of the lowering).
    pub fn assemble_at(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (tau, mult, u, v) = self.layout().unpack(x);
        assemble(&self.stacked, &self.input_qcs, &tau, &mult, &u, &v)
    }

    /// A strictly feasible candidate: small `τ`, a layer-cascaded
    /// complementarity multiplier `λ` that keeps the hidden blocks diagonally
    /// dominant against the weight couplings, and a tiny `U`. Verified by the
    /// caller before use; the backend runs its own phase I when no candidate
    /// passes.
    fn warm_start_candidate(&self, scale: f64) -> DVector<f64> {
        let layout = self.layout();
        let dims = self.stacked.dims();
        let widths = self.stacked.layer_widths();
        let mut x = DVector::zeros(layout.total());

        let q = layout.q;
        for i in 0..q {
            x[layout.tau(i)] = 0.4 / q as f64;
        }

        // Smallest curvature the summed input QCs provide on the input block.
        let n_gamma = dims.n_gamma;
        let mut gamma_curv: f64 = f64::INFINITY;
        for mi in &self.input_qcs {
            let block = -mi.view((0, 0), (n_gamma, n_gamma)).into_owned();
            let lam_min = block
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            gamma_curv = gamma_curv.min(lam_min.max(0.0));
        }
        let c0 = 0.4 / q as f64 * gamma_curv.max(1e-6);

        // One lambda per hidden layer, shrinking against the squared weight
        // norms (Frobenius bounds the operator norm) so the tridiagonal
        // layer coupling stays dominated.
        let a = self.stacked.a();
        let mut lambda_layer = Vec::with_capacity(widths.len() - 1);
        let mut prev = c0;
        let mut row = 0;
        for t in 1..widths.len() {
            let w_sq = a.rows(row, widths[t]).norm_squared();
            let lam = if t == 1 {
                0.5 * c0 / (2.0 * w_sq + 1.0)
            } else {
                0.5 * prev / (w_sq + 1.0)
            };
            lambda_layer.push(lam * scale);
            prev = lam;
            row += widths[t];
        }

        let tiny = lambda_layer.last().copied().unwrap_or(1e-6) * 1e-3;
        let mut idx = 0;
        for (t, lam) in lambda_layer.iter().enumerate() {
            for _ in 0..widths[t + 1] {
                x[layout.lambda(idx)] = *lam;
                x[layout.nu(idx)] = tiny;
                x[layout.eta(idx)] = tiny;
                idx += 1;
            }
        }
        debug_assert_eq!(idx, layout.hidden);

        for a in 0..layout.n_pi {
            x[layout.u_entry(a, a)] = 2.0 * self.eps_u;
        }
        // V stays zero: with U at the floor the output border is negligible.
        x
    }

    /// Lowered problem in a plain-text sparse-triplet format:
    /// header `narxbound-lmi 1`, `vars <n>`, `objective <c...>`, then per
    /// block `block <index> <dim>` followed by `entry <var> <row> <col>
    /// <value>` lines where `var` 0 denotes the constant term and variables
    /// are 1-based; only upper-triangular entries are listed.
    pub fn dump_triplets(&self) -> String {
        let lowered = self.lower();
        let mut out = String::from("narxbound-lmi 1\n");
        out.push_str(&format!("vars {}\n", lowered.num_vars));
        let obj: Vec<String> = lowered.objective.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&format!("objective {}\n", obj.join(" ")));
        for (bi, block) in lowered.blocks.iter().enumerate() {
            out.push_str(&format!("block {} {}\n", bi, block.dim));
            for r in 0..block.dim {
                for c in r..block.dim {
                    if block.f0[(r, c)] != 0.0 {
                        out.push_str(&format!("entry 0 {r} {c} {:?}\n", block.f0[(r, c)]));
                    }
                }
            }
            for vc in &block.coeffs {
                for &(r, c, v) in &vc.entries {
                    out.push_str(&format!("entry {} {r} {c} {v:?}\n", vc.var + 1));
                }
            }
        }
        out
    }

    /// Solves the problem and re-checks the certificate independently.
    pub fn solve(
        &self,
        backend: &dyn SdpBackend,
        settings: &SolverSettings,
    ) -> Result<CertifiedBound> {
        if matches!(self.objective, Objective::LogDet) && !backend.supports_logdet() {
            return Err(Error::Config(format!(
                "backend {:?} does not support the logdet objective",
                backend.name()
            )));
        }
        let lowered = self.lower();

        // Try the analytic interior candidate at a few scales; the backend
        // falls back to phase I when none is strictly feasible.
        let warm = [1.0, 0.3, 0.1, 0.03, 0.01]
            .iter()
            .map(|&s| self.warm_start_candidate(s))
            .find(|x| self.is_strictly_feasible(x));

        let solution = backend.solve(&lowered, settings, warm.as_ref())?;
        match solution.status {
            SolveStatus::Optimal => self.accept(&solution),
            status => Err(Error::Solver {
                status: status.to_string(),
                message: "certification SDP did not reach an optimal certificate; \
                          the problem is always feasible for small U, so this \
                          signals a solver fault"
                    .into(),
            }),
        }
    }

    fn is_strictly_feasible(&self, x: &DVector<f64>) -> bool {
        let layout = self.layout();
        for i in 0..layout.q {
            if x[layout.tau(i)] <= 0.0 {
                return false;
            }
        }
        for i in 0..layout.hidden {
            if x[layout.nu(i)] <= 0.0 || x[layout.eta(i)] <= 0.0 {
                return false;
            }
        }
        let (_, _, u, _) = layout.unpack(x);
        let u_shift = &u - DMatrix::identity(layout.n_pi, layout.n_pi) * self.eps_u;
        if nalgebra::Cholesky::new(u_shift).is_none() {
            return false;
        }
        match self.assemble_at(x) {
            Ok(m) => nalgebra::Cholesky::new(-m).is_some(),
            Err(_) => false,
        }
    }

    fn accept(&self, solution: &SdpSolution) -> Result<CertifiedBound> {
        let layout = self.layout();
        let (tau, mult, u, v) = layout.unpack(&solution.x);

        let m = self.assemble_at(&solution.x)?;
        let lmi_max_eig = crate::sdp::max_eigenvalue(&m);
        if lmi_max_eig > self.psd_tol {
            return Err(Error::Solver {
                status: "rejected".into(),
                message: format!(
                    "certificate failed the independent feasibility re-check: \
                     lambda_max(M) = {lmi_max_eig:.3e} > {:.0e}",
                    self.psd_tol
                ),
            });
        }
        let sign_floor = tau
            .iter()
            .chain(mult.nu.iter())
            .chain(mult.eta.iter())
            .copied()
            .fold(f64::INFINITY, f64::min);
        if sign_floor < -SIGN_TOL {
            return Err(Error::Solver {
                status: "rejected".into(),
                message: format!("multiplier sign constraint violated by {sign_floor:.3e}"),
            });
        }

        let eig = u.clone().symmetric_eigen();
        let u_min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if u_min < self.eps_u - SIGN_TOL {
            return Err(Error::Solver {
                status: "rejected".into(),
                message: format!("U fell below its eigenvalue floor: {u_min:.3e}"),
            });
        }

        // E(-U^{-1} V, U^{-2}) via the spectral factors of U.
        let qmat = &eig.eigenvectors;
        let inv_vals = DVector::from_fn(layout.n_pi, |i, _| 1.0 / eig.eigenvalues[i]);
        let u_inv = qmat * DMatrix::from_diagonal(&inv_vals) * qmat.transpose();
        let shape = &u_inv * &u_inv;
        let center = -(&u_inv * &v);
        let ellipsoid = Ellipsoid::new(center, shape)?;

        Ok(CertifiedBound {
            ellipsoid,
            u,
            v,
            tau,
            multipliers: mult,
            status: solution.status,
            objective: self.objective,
            objective_value: solution.objective,
            lmi_max_eigenvalue: lmi_max_eig,
            gap_bound: solution.gap_bound,
            newton_steps: solution.newton_steps,
        })
    }
}

fn upper_triplets(m: &DMatrix<f64>) -> Vec<(usize, usize, f64)> {
    let mut t = Vec::new();
    for r in 0..m.nrows() {
        for c in r..m.ncols() {
            if m[(r, c)] != 0.0 {
                t.push((r, c, m[(r, c)]));
            }
        }
    }
    t
}

/// A solved certificate: the prediction bound plus the raw variables and the
/// independently recomputed feasibility residuals.
#[derive(Debug, Clone)]
pub struct CertifiedBound {
    pub ellipsoid: Ellipsoid,
    pub u: DMatrix<f64>,
    pub v: DVector<f64>,
    pub tau: DVector<f64>,
    pub multipliers: ReluQcMultipliers,
    pub status: SolveStatus,
    pub objective: Objective,
    pub objective_value: f64,
    pub lmi_max_eigenvalue: f64,
    pub gap_bound: f64,
    pub newton_steps: usize,
}

impl CertifiedBound {
    pub fn log_volume(&self) -> f64 {
        self.ellipsoid.log_volume()
    }

    /// JSON summary: ellipsoid, solver status, objective and residuals.
    pub fn summary(&self) -> CertifiedBoundSummary {
        CertifiedBoundSummary {
            ellipsoid: self.ellipsoid.clone(),
            status: self.status,
            objective: self.objective,
            objective_value: self.objective_value,
            log_volume: self.log_volume(),
            lmi_max_eigenvalue: self.lmi_max_eigenvalue,
            gap_bound: self.gap_bound,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifiedBoundSummary {
    pub ellipsoid: Ellipsoid,
    pub status: SolveStatus,
    pub objective: Objective,
    pub objective_value: f64,
    pub log_volume: f64,
    pub lmi_max_eigenvalue: f64,
    pub gap_bound: f64,
}

/// Certifies the prediction bound for one regressor window: input block `i`
/// is the ellipsoid `E(y_{k-i}, Σ̄_v)` (newest first), and the returned
/// ellipsoid contains every output the network can produce while each block
/// stays inside its ellipsoid.
///
/// Input centers are absorbed into the first-layer bias before assembly, so
/// every input QC is centered at the origin; this is an exact reformulation
/// (the network output for shifted inputs is unchanged) that keeps the LMI
/// entries at unit scale even for plants operating far from the origin.
pub fn certify(
    net: &ReluNetwork,
    inputs: &[Ellipsoid],
    objective: Objective,
    backend: &dyn SdpBackend,
    settings: &SolverSettings,
) -> Result<CertifiedBound> {
    let (shifted, centered) = recenter(net, inputs)?;
    let stacked = stack(&shifted, &partition(inputs))?;
    let input_qcs = centered
        .iter()
        .enumerate()
        .map(|(i, e)| stacked.input_qc(i, e))
        .collect::<Result<Vec<_>>>()?;
    LmiProblem::new(stacked, input_qcs, objective)?.solve(backend, settings)
}

/// Same pipeline with the single stacked input QC (one multiplier for the
/// whole input): the relaxation `Σ_i (γ_i - μ_i)' Σ_i^{-1} (γ_i - μ_i) <= q`.
pub fn certify_single(
    net: &ReluNetwork,
    inputs: &[Ellipsoid],
    objective: Objective,
    backend: &dyn SdpBackend,
    settings: &SolverSettings,
) -> Result<CertifiedBound> {
    let (shifted, centered) = recenter(net, inputs)?;
    let stacked = stack(&shifted, &partition(inputs))?;
    let qc = stacked.single_input_qc(&centered)?;
    LmiProblem::new(stacked, vec![qc], objective)?.solve(backend, settings)
}

fn partition(inputs: &[Ellipsoid]) -> Vec<usize> {
    inputs.iter().map(|e| e.dim()).collect()
}

fn recenter(net: &ReluNetwork, inputs: &[Ellipsoid]) -> Result<(ReluNetwork, Vec<Ellipsoid>)> {
    if inputs.is_empty() {
        return Err(Error::Config("no input ellipsoids given".into()));
    }
    let total: usize = inputs.iter().map(|e| e.dim()).sum();
    if total != net.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "input ellipsoids vs network input",
            expected: net.input_dim(),
            actual: total,
        });
    }
    let mut shift = DVector::zeros(total);
    let mut off = 0;
    for e in inputs {
        shift.rows_mut(off, e.dim()).copy_from(e.center());
        off += e.dim();
    }
    let shifted = net.with_input_shift(&shift)?;
    let centered = inputs
        .iter()
        .map(|e| Ellipsoid::new(DVector::zeros(e.dim()), e.shape().clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok((shifted, centered))
}

/// Samples each input ellipsoid independently (interior-uniform), runs the
/// network forward, and returns the output cloud: the Monte Carlo soundness
/// oracle for certified bounds and the plot data for the reachable set.
pub fn monte_carlo_output_set<R: Rng + ?Sized>(
    net: &ReluNetwork,
    inputs: &[Ellipsoid],
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let total: usize = inputs.iter().map(|e| e.dim()).sum();
    if total != net.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "input ellipsoids vs network input",
            expected: net.input_dim(),
            actual: total,
        });
    }
    let mut outputs = Vec::with_capacity(n_samples);
    let mut x = DVector::zeros(total);
    for _ in 0..n_samples {
        let mut off = 0;
        for e in inputs {
            x.rows_mut(off, e.dim()).copy_from(&e.sample_interior(rng));
            off += e.dim();
        }
        outputs.push(net.forward(&x)?);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::BarrierBackend;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn random_net(arch: &[usize], seed: u64) -> ReluNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<DMatrix<f64>> = (0..arch.len() - 1)
            .map(|t| DMatrix::from_fn(arch[t + 1], arch[t], |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let biases: Vec<DVector<f64>> = (0..arch.len() - 1)
            .map(|t| DVector::from_fn(arch[t + 1], |_, _| rng.gen_range(-0.5..0.5)))
            .collect();
        ReluNetwork::new(weights, biases).unwrap()
    }

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.4
    }

    fn random_admissible_point(layout: &VarLayout, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let mut x = DVector::from_fn(layout.total(), |_, _| rng.gen_range(-1.0..1.0_f64));
        for i in 0..layout.hidden {
            x[layout.nu(i)] = x[layout.nu(i)].abs();
            x[layout.eta(i)] = x[layout.eta(i)].abs();
        }
        x
    }

    fn random_inputs(sizes: &[usize], rng: &mut ChaCha8Rng) -> Vec<Ellipsoid> {
        sizes
            .iter()
            .map(|&d| {
                Ellipsoid::new(
                    DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0)),
                    random_spd(d, rng) * 0.2,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn assemble_has_paper_dimensions() {
        let net = random_net(&[4, 10, 2, 2], 1);
        let s = stack(&net, &[2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let es = random_inputs(&[2, 2], &mut rng);
        let qcs: Vec<DMatrix<f64>> = es
            .iter()
            .enumerate()
            .map(|(i, e)| s.input_qc(i, e).unwrap())
            .collect();
        let m = assemble(
            &s,
            &qcs,
            &dvec(&[0.1, 0.2]),
            &ReluQcMultipliers::zeros(s.dims().hidden),
            &DMatrix::identity(2, 2),
            &DVector::zeros(2),
        )
        .unwrap();
        assert_eq!(m.nrows(), 19);
        assert!((&m - m.transpose()).amax() < 1e-12);
    }

    #[test]
    fn assemble_zero_multipliers_is_indefinite() {
        let net = random_net(&[4, 6, 2], 3);
        let s = stack(&net, &[2, 2]).unwrap();
        let qcs: Vec<DMatrix<f64>> = {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            random_inputs(&[2, 2], &mut rng)
                .iter()
                .enumerate()
                .map(|(i, e)| s.input_qc(i, e).unwrap())
                .collect()
        };
        let m = assemble(
            &s,
            &qcs,
            &DVector::zeros(2),
            &ReluQcMultipliers::zeros(s.dims().hidden),
            &DMatrix::identity(2, 2),
            &DVector::zeros(2),
        )
        .unwrap();
        let max_eig = crate::sdp::max_eigenvalue(&m);
        assert!(max_eig > 1e-6, "expected indefinite M, max eig {max_eig}");
    }

    #[test]
    fn schur_equivalence_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = random_net(&[4, 5, 3, 2], 7);
        let s = stack(&net, &[2, 2]).unwrap();
        let es = random_inputs(&[2, 2], &mut rng);
        let qcs: Vec<DMatrix<f64>> = es
            .iter()
            .enumerate()
            .map(|(i, e)| s.input_qc(i, e).unwrap())
            .collect();
        let d = s.dims().hidden;

        let mut agreements = 0;
        for trial in 0..50 {
            let tau = DVector::from_fn(2, |_, _| rng.gen_range(0.0..0.5));
            let mult = ReluQcMultipliers {
                lambda: DVector::from_fn(d, |_, _| rng.gen_range(-0.3..0.3)),
                nu: DVector::from_fn(d, |_, _| rng.gen_range(0.0..0.3)),
                eta: DVector::from_fn(d, |_, _| rng.gen_range(0.0..0.3)),
            };
            let raw = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-0.5..0.5));
            let u = &raw * raw.transpose() + DMatrix::identity(2, 2) * rng.gen_range(0.05..1.0);
            let v = DVector::from_fn(2, |_, _| rng.gen_range(-0.5..0.5));

            let bordered = assemble(&s, &qcs, &tau, &mult, &u, &v).unwrap();
            let mut small = s.activation_qc(&mult).unwrap();
            for (mi, &t) in qcs.iter().zip(tau.iter()) {
                small += mi * t;
            }
            small += s.output_qc(&u, &v).unwrap();

            let big_eig = crate::sdp::max_eigenvalue(&bordered);
            let small_eig = crate::sdp::max_eigenvalue(&small);
            // Skip sign-ambiguous draws right at zero.
            if big_eig.abs() < 1e-10 || small_eig.abs() < 1e-10 {
                continue;
            }
            assert_eq!(
                big_eig <= 0.0,
                small_eig <= 0.0,
                "trial {trial}: bordered {big_eig:.3e}, direct {small_eig:.3e}"
            );
            agreements += 1;
        }
        assert!(agreements >= 45);
    }

    #[test]
    fn lowered_matrix_matches_reference_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = random_net(&[4, 5, 2], 11);
        let s = stack(&net, &[2, 2]).unwrap();
        let es = random_inputs(&[2, 2], &mut rng);
        let qcs: Vec<DMatrix<f64>> = es
            .iter()
            .enumerate()
            .map(|(i, e)| s.input_qc(i, e).unwrap())
            .collect();
        let problem = LmiProblem::new(s, qcs, Objective::Trace).unwrap();
        let lowered = problem.lower();
        let layout = problem.layout();

        for _ in 0..10 {
            let x = random_admissible_point(&layout, &mut rng);
            // Reference path.
            let reference = problem.assemble_at(&x).unwrap();
            // Lowered path: F0 + sum x_j F_j of the first block.
            let block = &lowered.blocks[0];
            let mut direct = block.f0.clone();
            for c in &block.coeffs {
                for &(r, s, v) in &c.entries {
                    direct[(r, s)] += x[c.var] * v;
                    if r != s {
                        direct[(s, r)] += x[c.var] * v;
                    }
                }
            }
            assert!(
                (&reference - &direct).amax() < 1e-12,
                "lowering disagrees with reference assembly"
            );
        }
    }

    #[test]
    fn two_point_affinity_of_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = random_net(&[4, 6, 2], 13);
        let s = stack(&net, &[2, 2]).unwrap();
        let es = random_inputs(&[2, 2], &mut rng);
        let qcs: Vec<DMatrix<f64>> = es
            .iter()
            .enumerate()
            .map(|(i, e)| s.input_qc(i, e).unwrap())
            .collect();
        let problem = LmiProblem::new(s, qcs, Objective::Trace).unwrap();
        let layout = problem.layout();
        let xa = random_admissible_point(&layout, &mut rng);
        let xb = random_admissible_point(&layout, &mut rng);
        let ma = problem.assemble_at(&xa).unwrap();
        let mb = problem.assemble_at(&xb).unwrap();
        let mid = problem.assemble_at(&((&xa + &xb) * 0.5)).unwrap();
        assert!(((&ma + &mb) * 0.5 - mid).amax() < 1e-12);
    }

    #[test]
    fn certify_constant_network_contains_bias_point() {
        // W_out = 0: the output set is the single point b_out.
        let weights = vec![
            DMatrix::from_fn(3, 2, |i, j| ((i + j) as f64) * 0.2 - 0.2),
            DMatrix::zeros(2, 3),
        ];
        let biases = vec![dvec(&[0.1, -0.2, 0.3]), dvec(&[0.7, -1.1])];
        let net = ReluNetwork::new(weights, biases).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = random_inputs(&[2], &mut rng);
        let bound = certify(
            &net,
            &inputs,
            Objective::Trace,
            &BarrierBackend,
            &SolverSettings::default(),
        )
        .unwrap();
        let m = bound.ellipsoid.contains(&dvec(&[0.7, -1.1])).unwrap();
        assert!(m.margin <= 1.0 + 1e-7, "margin {}", m.margin);
        // The volume collapses toward the floor set by the variable box.
        assert!(bound.log_volume() < -10.0);
    }

    #[test]
    fn certify_identity_region_covers_exact_image() {
        // Identity on the positive orthant region around the input set.
        let dim = 2;
        let net = ReluNetwork::new(
            vec![DMatrix::identity(dim, dim), DMatrix::identity(dim, dim)],
            vec![
                DVector::from_element(dim, 50.0),
                DVector::from_element(dim, -50.0),
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = Ellipsoid::new(dvec(&[1.0, 2.0]), random_spd(2, &mut rng) * 0.1).unwrap();
        let bound = certify(
            &net,
            std::slice::from_ref(&input),
            Objective::Trace,
            &BarrierBackend,
            &SolverSettings::default(),
        )
        .unwrap();
        // The exact output set is the input itself; its boundary must be
        // inside the certified ellipsoid.
        for _ in 0..1000 {
            let x = input.sample_boundary(&mut rng);
            let m = bound.ellipsoid.contains(&x).unwrap();
            assert!(m.margin <= 1.0 + 1e-7, "boundary point escaped: {}", m.margin);
        }
    }

    #[test]
    fn certified_bound_is_sound_on_monte_carlo_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for seed in 0..3 {
            let net = random_net(&[4, 6, 3, 2], 20 + seed);
            let inputs = random_inputs(&[2, 2], &mut rng);
            let bound = certify(
                &net,
                &inputs,
                Objective::Trace,
                &BarrierBackend,
                &SolverSettings::default(),
            )
            .unwrap();
            assert_eq!(bound.status, SolveStatus::Optimal);
            assert!(bound.lmi_max_eigenvalue <= 1e-7);
            let cloud = monte_carlo_output_set(&net, &inputs, 500, &mut rng).unwrap();
            for out in cloud {
                let m = bound.ellipsoid.contains(&out).unwrap();
                assert!(m.margin <= 1.0 + 1e-7, "violation: margin {}", m.margin);
            }
        }
    }

    #[test]
    fn single_input_matches_multi_for_one_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = random_net(&[2, 5, 2], 31);
        let inputs = random_inputs(&[2], &mut rng);
        let settings = SolverSettings::default();
        let multi = certify(
            &net,
            &inputs,
            Objective::LogDet,
            &BarrierBackend,
            &settings,
        )
        .unwrap();
        let single = certify_single(
            &net,
            &inputs,
            Objective::LogDet,
            &BarrierBackend,
            &settings,
        )
        .unwrap();
        assert!(
            (multi.log_volume() - single.log_volume()).abs() < 1e-6,
            "multi {} vs single {}",
            multi.log_volume(),
            single.log_volume()
        );
    }

    #[test]
    fn multi_input_dominates_single_on_random_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let settings = SolverSettings::default();
        for seed in 0..5 {
            let net = random_net(&[4, 5, 2], 40 + seed);
            let inputs = random_inputs(&[2, 2], &mut rng);
            let multi = certify(
                &net,
                &inputs,
                Objective::LogDet,
                &BarrierBackend,
                &settings,
            )
            .unwrap();
            let single = certify_single(
                &net,
                &inputs,
                Objective::LogDet,
                &BarrierBackend,
                &settings,
            )
            .unwrap();
            assert!(
                multi.log_volume() <= single.log_volume() + 1e-6,
                "seed {seed}: multi {} > single {}",
                multi.log_volume(),
                single.log_volume()
            );
        }
    }

    #[test]
    fn shrinking_inputs_never_grow_the_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let settings = SolverSettings::default();
        for seed in 0..3 {
            let net = random_net(&[4, 5, 2], 50 + seed);
            let inputs = random_inputs(&[2, 2], &mut rng);
            let shrunk: Vec<Ellipsoid> = inputs
                .iter()
                .map(|e| Ellipsoid::new(e.center().clone(), e.shape() * 0.25).unwrap())
                .collect();
            let big = certify(
                &net,
                &inputs,
                Objective::LogDet,
                &BarrierBackend,
                &settings,
            )
            .unwrap();
            let small = certify(
                &net,
                &shrunk,
                Objective::LogDet,
                &BarrierBackend,
                &settings,
            )
            .unwrap();
            assert!(
                small.log_volume() <= big.log_volume() + 1e-6,
                "seed {seed}: shrunk inputs grew the bound"
            );
        }
    }

    #[test]
    fn monte_carlo_constant_network_collapses() {
        let net = ReluNetwork::new(
            vec![DMatrix::zeros(3, 2), DMatrix::zeros(2, 3)],
            vec![DVector::zeros(3), dvec(&[1.5, -2.5])],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let inputs = random_inputs(&[2], &mut rng);
        let cloud = monte_carlo_output_set(&net, &inputs, 50, &mut rng).unwrap();
        for out in cloud {
            assert!((out - dvec(&[1.5, -2.5])).norm() < 1e-12);
        }
    }

    #[test]
    fn determinism_of_certification() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let net = random_net(&[4, 5, 2], 60);
        let inputs = random_inputs(&[2, 2], &mut rng);
        let settings = SolverSettings::default();
        let a = certify(&net, &inputs, Objective::Trace, &BarrierBackend, &settings).unwrap();
        let b = certify(&net, &inputs, Objective::Trace, &BarrierBackend, &settings).unwrap();
        assert!((a.objective_value - b.objective_value).abs() < 1e-7);
        assert_eq!(a.u, b.u);
    }

    #[test]
    fn triplet_dump_is_parseable_header() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let net = random_net(&[2, 4, 2], 70);
        let s = stack(&net, &[2]).unwrap();
        let es = random_inputs(&[2], &mut rng);
        let qcs = vec![s.input_qc(0, &es[0]).unwrap()];
        let problem = LmiProblem::new(s, qcs, Objective::Trace).unwrap();
        let dump = problem.dump_triplets();
        let mut lines = dump.lines();
        assert_eq!(lines.next().unwrap(), "narxbound-lmi 1");
        assert!(lines.next().unwrap().starts_with("vars "));
        assert!(dump.contains("block 0"));
        assert!(dump.contains("entry 0"));
    }
}
