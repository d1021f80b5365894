//! Ellipsoidal sets with cached factorizations.
//!
//! An ellipsoid `E(mu, Sigma) = { x : (x - mu)' Sigma^-1 (x - mu) <= 1 }` is the
//! universal set representation in this crate: sensor-noise confidence sets,
//! network input sets and certified prediction bounds are all ellipsoids.
//! The shape matrix is stored together with its Cholesky factor so membership
//! tests and sampling never re-factorize.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points with membership margin in `(1, 1 + INSIDE_TOL]` are classified inside,
/// so boundary decisions are deterministic.
pub const INSIDE_TOL: f64 = 1e-9;

const MIN_EIGENVALUE: f64 = 1e-12;

/// A full-dimensional ellipsoid `E(center, shape)` with SPD shape matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "EllipsoidJson", into = "EllipsoidJson")]
pub struct Ellipsoid {
    center: DVector<f64>,
    shape: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

/// Wire format: `{"center": [..], "shape": [[..], ..]}`, row-major, 64-bit floats.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EllipsoidJson {
    center: Vec<f64>,
    shape: Vec<Vec<f64>>,
}

impl TryFrom<EllipsoidJson> for Ellipsoid {
    type Error = Error;

    fn try_from(raw: EllipsoidJson) -> Result<Self> {
        let d = raw.center.len();
        if raw.shape.len() != d || raw.shape.iter().any(|row| row.len() != d) {
            return Err(Error::Parse {
                path: "shape".into(),
                message: format!("expected a {d}x{d} matrix matching the center dimension"),
            });
        }
        let shape = DMatrix::from_fn(d, d, |i, j| raw.shape[i][j]);
        Ellipsoid::new(DVector::from_vec(raw.center), shape)
    }
}

impl From<Ellipsoid> for EllipsoidJson {
    fn from(e: Ellipsoid) -> Self {
        let d = e.dim();
        EllipsoidJson {
            center: e.center.iter().copied().collect(),
            shape: (0..d)
                .map(|i| (0..d).map(|j| e.shape[(i, j)]).collect())
                .collect(),
        }
    }
}

/// Result of a membership query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub inside: bool,
    /// The quadratic form `(x - mu)' Sigma^-1 (x - mu)`; 1 is the boundary.
    pub margin: f64,
}

/// Result of a Minkowski-sum membership query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinkowskiMembership {
    pub inside: bool,
    /// Minimum of `(d - s)' Sigma1^-1 (d - s)` over `s` in the centered second
    /// ellipsoid, where `d = point - mu1 - mu2`; 1 is the boundary of the sum.
    pub margin: f64,
    /// Optimal dual multiplier of the boundary-constrained minimization
    /// (0 when the unconstrained minimizer is already admissible).
    pub kappa: f64,
}

impl Ellipsoid {
    /// Builds an ellipsoid after symmetrizing `shape` and checking positive
    /// definiteness (minimum eigenvalue above 1e-12).
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self> {
        let d = center.len();
        if shape.nrows() != d || shape.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "ellipsoid shape matrix",
                expected: d,
                actual: shape.nrows(),
            });
        }
        if center.iter().any(|v| !v.is_finite()) || shape.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("ellipsoid data must be finite".into()));
        }
        let sym = (&shape + shape.transpose()) * 0.5;
        let eig_min = sym
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if !(eig_min > MIN_EIGENVALUE) {
            return Err(Error::NotPositiveDefinite(format!(
                "shape matrix minimum eigenvalue {eig_min:.3e} is not above {MIN_EIGENVALUE:.0e}"
            )));
        }
        let chol = Cholesky::new(sym.clone()).ok_or_else(|| {
            Error::NotPositiveDefinite("Cholesky factorization of shape matrix failed".into())
        })?;
        Ok(Self {
            center,
            shape: sym,
            chol,
        })
    }

    /// Unit ball `E(0, I_d)`.
    pub fn unit_ball(d: usize) -> Self {
        Self::new(DVector::zeros(d), DMatrix::identity(d, d)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    /// Solves `Sigma x = rhs` through the cached factor.
    pub fn shape_solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    /// Dense `Sigma^-1`.
    pub fn shape_inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Lower-triangular Cholesky factor `L` with `L L' = Sigma`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Membership margin `(x - mu)' Sigma^-1 (x - mu)` and the inside verdict.
    pub fn contains(&self, point: &DVector<f64>) -> Result<Membership> {
        if point.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "ellipsoid membership",
                expected: self.dim(),
                actual: point.len(),
            });
        }
        let diff = point - &self.center;
        let margin = diff.dot(&self.chol.solve(&diff));
        Ok(Membership {
            inside: margin <= 1.0 + INSIDE_TOL,
            margin,
        })
    }

    /// Exact image `E(W mu + b, W Sigma W')` under `x -> W x + b`.
    ///
    /// `W` must have full row rank, otherwise the image is degenerate.
    pub fn affine_image(&self, w: &DMatrix<f64>, b: &DVector<f64>) -> Result<Ellipsoid> {
        if w.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "affine image matrix columns",
                expected: self.dim(),
                actual: w.ncols(),
            });
        }
        if b.len() != w.nrows() {
            return Err(Error::DimensionMismatch {
                context: "affine image offset",
                expected: w.nrows(),
                actual: b.len(),
            });
        }
        let svals = w.clone().svd(false, false).singular_values;
        let s_max = svals.iter().copied().fold(0.0, f64::max);
        let s_min = svals.iter().copied().fold(f64::INFINITY, f64::min);
        if w.nrows() > w.ncols() || !(s_min > 1e-10 * s_max.max(1e-300)) {
            return Err(Error::Domain(
                "affine image requires a full-row-rank matrix".into(),
            ));
        }
        Ellipsoid::new(w * &self.center + b, w * &self.shape * w.transpose())
    }

    /// `(1/2) log det Sigma`: the log-volume up to the dimension-dependent
    /// unit-ball constant, which cancels in every comparison made here.
    pub fn log_volume(&self) -> f64 {
        self.chol.l().diagonal().iter().map(|v| v.ln()).sum()
    }

    /// Uniform sample from the interior.
    pub fn sample_interior<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.dim();
        let dir = sample_unit_sphere(d, rng);
        let radius = rng.gen::<f64>().powf(1.0 / d as f64);
        &self.center + self.chol.l() * (dir * radius)
    }

    /// Sample from the boundary (membership margin 1 up to rounding).
    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let dir = sample_unit_sphere(self.dim(), rng);
        &self.center + self.chol.l() * dir
    }
}

fn sample_unit_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Decides `point ∈ E1 ⊕ E2` exactly via 1-D dual root-finding.
///
/// With `d = point - mu1 - mu2` the query asks for an `s` with
/// `s' Sigma2^-1 s <= 1` and `(d - s)' Sigma1^-1 (d - s) <= 1`. If `d` lies in
/// the centered second ellipsoid, `s = d` settles it. Otherwise the minimizer
/// of the first form sits on the boundary of the second and satisfies
/// `s(kappa) = (Sigma1^-1 + kappa Sigma2^-1)^-1 Sigma1^-1 d` for the unique
/// `kappa >= 0` with `s(kappa)' Sigma2^-1 s(kappa) = 1`, found by safeguarded
/// Newton/bisection to 1e-10.
pub fn minkowski_contains(
    e1: &Ellipsoid,
    e2: &Ellipsoid,
    point: &DVector<f64>,
) -> Result<MinkowskiMembership> {
    if e1.dim() != e2.dim() {
        return Err(Error::DimensionMismatch {
            context: "minkowski ellipsoid dimensions",
            expected: e1.dim(),
            actual: e2.dim(),
        });
    }
    if point.len() != e1.dim() {
        return Err(Error::DimensionMismatch {
            context: "minkowski query point",
            expected: e1.dim(),
            actual: point.len(),
        });
    }

    let d = point - e1.center() - e2.center();
    let d_in_e2 = d.dot(&e2.chol.solve(&d));
    if d_in_e2 <= 1.0 + INSIDE_TOL {
        return Ok(MinkowskiMembership {
            inside: true,
            margin: 0.0,
            kappa: 0.0,
        });
    }

    // Simultaneous diagonalization: T = C Q with C the Cholesky factor of
    // Sigma2 and Q the eigenbasis of C' Sigma1^-1 C, so that T' Sigma2^-1 T = I
    // and T' Sigma1^-1 T = diag(lam).
    let c = e2.cholesky_factor();
    let sigma1_inv = e1.shape_inverse();
    let g = c.transpose() * &sigma1_inv * &c;
    let eig = g.symmetric_eigen();
    let lam = eig.eigenvalues;
    let t = &c * eig.eigenvectors;
    let ghat = t.transpose() * (&sigma1_inv * &d);

    let residual = |kappa: f64| -> f64 {
        lam.iter()
            .zip(ghat.iter())
            .map(|(&l, &gh)| {
                let w = gh / (l + kappa);
                w * w
            })
            .sum::<f64>()
            - 1.0
    };
    let residual_deriv = |kappa: f64| -> f64 {
        lam.iter()
            .zip(ghat.iter())
            .map(|(&l, &gh)| -2.0 * gh * gh / (l + kappa).powi(3))
            .sum::<f64>()
    };

    // residual(0) = d' Sigma2^-1 d - 1 > 0 and residual is strictly decreasing,
    // with residual(|ghat|) <= 0, so a bracket always exists.
    let mut lo = 0.0;
    let mut hi = ghat.norm().max(1e-30);
    let mut expand = 0;
    while residual(hi) > 0.0 {
        hi *= 2.0;
        expand += 1;
        if expand > 200 {
            return Err(Error::Numerical(format!(
                "minkowski membership bracket failure: residual({hi:.3e}) = {:.3e} > 0",
                residual(hi)
            )));
        }
    }

    let mut kappa = 0.5 * (lo + hi);
    let mut converged = false;
    for _ in 0..200 {
        let r = residual(kappa);
        if r > 0.0 {
            lo = kappa;
        } else {
            hi = kappa;
        }
        if r.abs() <= 1e-13 || (hi - lo) <= 1e-10 * (1.0 + hi) {
            converged = true;
            break;
        }
        let dr = residual_deriv(kappa);
        let newton = kappa - r / dr;
        kappa = if dr < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "minkowski membership root-finder stalled at kappa = {kappa:.6e}, residual {:.3e}",
            residual(kappa)
        )));
    }

    let margin: f64 = lam
        .iter()
        .zip(ghat.iter())
        .map(|(&l, &gh)| {
            let num = kappa * gh;
            num * num / (l * (l + kappa) * (l + kappa))
        })
        .sum();

    Ok(MinkowskiMembership {
        inside: margin <= 1.0 + INSIDE_TOL,
        margin,
        kappa,
    })
}

/// Confidence-set construction for Gaussian sensor noise: the scaled covariance
/// `alpha * Sigma_v` contains a noise draw with probability `p_bar`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceSpec {
    pub p_bar: f64,
    pub p: usize,
    pub sigma_v: Vec<Vec<f64>>,
    pub alpha: f64,
    pub sigma_v_bar: Vec<Vec<f64>>,
}

impl ConfidenceSpec {
    pub fn new(p_bar: f64, sigma_v: &DMatrix<f64>) -> Result<Self> {
        let p = sigma_v.nrows();
        if sigma_v.ncols() != p || p == 0 {
            return Err(Error::Config(
                "noise covariance must be square and non-empty".into(),
            ));
        }
        // Validate SPD-ness by constructing the ellipsoid once.
        Ellipsoid::new(DVector::zeros(p), sigma_v.clone())?;
        let alpha = confidence_scale(p, p_bar)?;
        let scaled = sigma_v * alpha;
        let to_rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..p)
                .map(|i| (0..p).map(|j| m[(i, j)]).collect())
                .collect()
        };
        Ok(Self {
            p_bar,
            p,
            sigma_v: to_rows(sigma_v),
            alpha,
            sigma_v_bar: to_rows(&scaled),
        })
    }

    pub fn sigma_v_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.p, |i, j| self.sigma_v[i][j])
    }

    pub fn sigma_v_bar_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.p, |i, j| self.sigma_v_bar[i][j])
    }
}

/// The `p_bar`-confidence ellipsoid `E(center, alpha * Sigma_v)`.
pub fn confidence_ellipsoid(spec: &ConfidenceSpec, center: &DVector<f64>) -> Result<Ellipsoid> {
    if center.len() != spec.p {
        return Err(Error::DimensionMismatch {
            context: "confidence ellipsoid center",
            expected: spec.p,
            actual: center.len(),
        });
    }
    Ellipsoid::new(center.clone(), spec.sigma_v_bar_matrix())
}

/// The chi-squared quantile `alpha` with `p` degrees of freedom at probability
/// `p_bar`: the unique root of `P(p/2, alpha/2) = p_bar`, with `P` the
/// regularized lower incomplete gamma function.
///
/// Solved by safeguarded Newton/bisection on the CDF to 1e-10.
pub fn confidence_scale(p: usize, p_bar: f64) -> Result<f64> {
    if p == 0 {
        return Err(Error::Domain("degrees of freedom must be positive".into()));
    }
    if !(p_bar > 0.0 && p_bar < 1.0) {
        return Err(Error::Domain(format!(
            "confidence level must lie strictly in (0, 1), got {p_bar}"
        )));
    }
    let a = p as f64 / 2.0;
    let cdf = |x: f64| statrs::function::gamma::gamma_lr(a, x / 2.0);
    // Chi-squared density; the derivative of the CDF above.
    let pdf = |x: f64| -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        ((a - 1.0) * (x / 2.0).ln() - x / 2.0 - statrs::function::gamma::ln_gamma(a)).exp() / 2.0
    };

    let mut lo = 0.0_f64;
    let mut hi = (p as f64 + 10.0).max(1.0);
    let mut expand = 0;
    while cdf(hi) < p_bar {
        hi *= 2.0;
        expand += 1;
        if expand > 300 {
            return Err(Error::Numerical(format!(
                "confidence scale bracket failure at hi = {hi:.3e}, cdf residual {:.3e}",
                cdf(hi) - p_bar
            )));
        }
    }

    let mut x = hi.min(p as f64 * p_bar.max(0.1));
    let mut converged = false;
    for _ in 0..200 {
        let r = cdf(x) - p_bar;
        if r > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        if r.abs() <= 1e-14 || (hi - lo) <= 1e-10 * (1.0 + hi) {
            converged = true;
            break;
        }
        let dr = pdf(x);
        let newton = x - r / dr;
        x = if dr > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "confidence scale root-finder stalled at x = {x:.6e}, residual {:.3e}",
            cdf(x) - p_bar
        )));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn dmat(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.3
    }

    #[test]
    fn construction_rejects_indefinite_shape() {
        let shape = dmat(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(Ellipsoid::new(dvec(&[0.0, 0.0]), shape).is_err());
    }

    #[test]
    fn construction_symmetrizes() {
        let shape = dmat(2, 2, &[1.0, 0.2 + 1e-12, 0.2, 1.0]);
        let e = Ellipsoid::new(dvec(&[0.0, 0.0]), shape).unwrap();
        assert_eq!(e.shape()[(0, 1)], e.shape()[(1, 0)]);
    }

    #[test]
    fn contains_center_and_boundary() {
        let e = Ellipsoid::unit_ball(3);
        let m = e.contains(&dvec(&[0.0, 0.0, 0.0])).unwrap();
        assert!(m.inside);
        assert_eq!(m.margin, 0.0);

        let m = e.contains(&dvec(&[1.0, 0.0, 0.0])).unwrap();
        assert!(m.inside);
        assert!((m.margin - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contains_scaled_boundary_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = random_spd(3, &mut rng);
        let center = dvec(&[0.4, -1.0, 2.0]);
        let e = Ellipsoid::new(center.clone(), shape).unwrap();
        // x = mu + 1.1 * L u with |u| = 1 has margin exactly 1.21.
        let u = sample_unit_sphere(3, &mut rng);
        let x = &center + e.cholesky_factor() * (u * 1.1);
        let m = e.contains(&x).unwrap();
        assert!(!m.inside);
        assert!((m.margin - 1.21).abs() < 1e-9);
    }

    #[test]
    fn contains_rejects_dimension_mismatch() {
        let e = Ellipsoid::unit_ball(2);
        assert!(e.contains(&dvec(&[0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn membership_invariant_under_orthonormal_rebasis() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = random_spd(2, &mut rng);
        let center = dvec(&[1.0, -0.5]);
        let e = Ellipsoid::new(center.clone(), shape.clone()).unwrap();
        let theta: f64 = 0.83;
        let rot = dmat(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        let e_rot = Ellipsoid::new(&rot * &center, &rot * &shape * rot.transpose()).unwrap();
        for _ in 0..20 {
            let x = DVector::from_fn(2, |_, _| rng.gen_range(-3.0..3.0));
            let m = e.contains(&x).unwrap().margin;
            let m_rot = e_rot.contains(&(&rot * &x)).unwrap().margin;
            assert!((m - m_rot).abs() < 1e-9 * (1.0 + m));
        }
    }

    #[test]
    fn affine_image_scaling_and_rotation() {
        let e = Ellipsoid::unit_ball(2);
        let mu0 = dvec(&[3.0, -1.0]);
        let img = e
            .affine_image(&(DMatrix::identity(2, 2) * 2.0), &mu0)
            .unwrap();
        assert_eq!(img.center(), &mu0);
        assert!((img.shape() - DMatrix::identity(2, 2) * 4.0).norm() < 1e-12);

        let theta: f64 = 1.1;
        let rot = dmat(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        let img = e.affine_image(&rot, &dvec(&[0.0, 0.0])).unwrap();
        assert!((img.shape() - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn affine_image_rejects_rank_deficient() {
        let e = Ellipsoid::unit_ball(2);
        let w = dmat(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(e.affine_image(&w, &dvec(&[0.0, 0.0])).is_err());
        // More rows than columns can never have full row rank.
        let tall = dmat(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(e.affine_image(&tall, &dvec(&[0.0; 3])).is_err());
    }

    #[test]
    fn affine_image_covers_boundary_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let e = Ellipsoid::new(dvec(&[0.3, -0.7, 0.2]), random_spd(3, &mut rng)).unwrap();
            let w = DMatrix::from_fn(2, 3, |_, _| rng.gen_range(-1.5..1.5));
            let b = dvec(&[0.1, -0.4]);
            let img = e.affine_image(&w, &b).unwrap();
            for _ in 0..50 {
                let x = e.sample_boundary(&mut rng);
                let m = img.contains(&(&w * x + &b)).unwrap();
                assert!(m.margin <= 1.0 + INSIDE_TOL, "margin {}", m.margin);
            }
        }
    }

    #[test]
    fn log_volume_examples() {
        assert!(Ellipsoid::unit_ball(4).log_volume().abs() < 1e-12);
        let e = Ellipsoid::new(dvec(&[0.0; 3]), DMatrix::identity(3, 3) * 2.5).unwrap();
        assert!((e.log_volume() - 1.5 * 2.5_f64.ln()).abs() < 1e-12);
        let e = Ellipsoid::new(dvec(&[1.0, 1.0]), dmat(2, 2, &[4.0, 0.0, 0.0, 9.0])).unwrap();
        assert!((e.log_volume() - 0.5 * 36.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_volume_affine_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let e = Ellipsoid::new(dvec(&[0.1, 0.2, 0.3]), random_spd(3, &mut rng)).unwrap();
            let w = loop {
                let w = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0_f64));
                if w.determinant().abs() > 0.05 {
                    break w;
                }
            };
            let img = e.affine_image(&w, &DVector::zeros(3)).unwrap();
            let expected = e.log_volume() + w.determinant().abs().ln();
            assert!((img.log_volume() - expected).abs() < 1e-8);
        }
    }

    #[test]
    fn boundary_samples_have_unit_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = Ellipsoid::unit_ball(3);
        for _ in 0..100 {
            let x = e.sample_boundary(&mut rng);
            assert!((e.contains(&x).unwrap().margin - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interior_samples_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = Ellipsoid::new(dvec(&[1.0, -2.0]), random_spd(2, &mut rng)).unwrap();
        for _ in 0..10_000 {
            let x = e.sample_interior(&mut rng);
            assert!(e.contains(&x).unwrap().inside);
        }
    }

    #[test]
    fn interior_sample_mean_approaches_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let center = dvec(&[0.5, -1.5]);
        let e = Ellipsoid::new(center.clone(), random_spd(2, &mut rng)).unwrap();
        let n = 100_000;
        let mut mean = DVector::zeros(2);
        for _ in 0..n {
            mean += e.sample_interior(&mut rng);
        }
        mean /= n as f64;
        // Component standard error of a uniform ellipsoid sample is below
        // sqrt(Sigma_ii) / sqrt(n); allow 3 standard errors.
        for i in 0..2 {
            let se = (e.shape()[(i, i)] / n as f64).sqrt();
            assert!(
                (mean[i] - center[i]).abs() < 3.0 * se,
                "component {i}: mean {} center {} se {se}",
                mean[i],
                center[i]
            );
        }
    }

    #[test]
    fn confidence_scale_matches_closed_form_for_two_dof() {
        for p_bar in [0.5_f64, 0.9, 0.95, 0.99] {
            let expected = -2.0 * (1.0 - p_bar).ln();
            let got = confidence_scale(2, p_bar).unwrap();
            assert!(
                (got - expected).abs() < 1e-8,
                "p_bar {p_bar}: got {got}, expected {expected}"
            );
        }
    }

    #[test]
    fn confidence_scale_beam_value() {
        let alpha = confidence_scale(2, 0.95).unwrap();
        assert!((alpha - 5.9915).abs() < 1e-3);
    }

    #[test]
    fn confidence_scale_degenerates_to_zero() {
        let alpha = confidence_scale(2, 1e-9).unwrap();
        assert!(alpha > 0.0 && alpha < 1e-6);
    }

    #[test]
    fn confidence_scale_increasing_in_p_bar() {
        for p in [1usize, 2, 3, 5, 10] {
            let grid: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
            let alphas: Vec<f64> = grid
                .iter()
                .map(|&pb| confidence_scale(p, pb).unwrap())
                .collect();
            for w in alphas.windows(2) {
                assert!(w[1] > w[0]);
            }
        }
    }

    #[test]
    fn confidence_scale_rejects_bad_inputs() {
        assert!(confidence_scale(2, 0.0).is_err());
        assert!(confidence_scale(2, 1.0).is_err());
        assert!(confidence_scale(0, 0.5).is_err());
    }

    #[test]
    fn confidence_ellipsoid_reproduces_scaled_covariance() {
        let sigma_v = dmat(2, 2, &[0.0214, 0.0112, 0.0112, 0.0217]);
        let spec = ConfidenceSpec::new(0.95, &sigma_v).unwrap();
        let e = confidence_ellipsoid(&spec, &dvec(&[0.0, 0.0])).unwrap();
        let expected = dmat(2, 2, &[0.1282, 0.0671, 0.0671, 0.1300]);
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (e.shape()[(i, j)] - expected[(i, j)]).abs() < 5e-4,
                    "entry ({i},{j}): {} vs {}",
                    e.shape()[(i, j)],
                    expected[(i, j)]
                );
            }
        }
    }

    #[test]
    fn confidence_ellipsoid_identity_covariance() {
        let spec = ConfidenceSpec::new(0.95, &DMatrix::identity(2, 2)).unwrap();
        let e = confidence_ellipsoid(&spec, &dvec(&[0.0, 0.0])).unwrap();
        let alpha = confidence_scale(2, 0.95).unwrap();
        assert!((e.shape() - DMatrix::identity(2, 2) * alpha).norm() < 1e-12);
    }

    #[test]
    fn confidence_ellipsoid_preserves_center() {
        let spec = ConfidenceSpec::new(0.9, &DMatrix::identity(3, 3)).unwrap();
        let c = dvec(&[1.0, 2.0, 3.0]);
        let e = confidence_ellipsoid(&spec, &c).unwrap();
        assert_eq!(e.center(), &c);
        assert!(confidence_ellipsoid(&spec, &dvec(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn minkowski_sum_of_centers_is_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let e1 = Ellipsoid::new(dvec(&[1.0, 2.0]), random_spd(2, &mut rng)).unwrap();
        let e2 = Ellipsoid::new(dvec(&[-0.5, 0.5]), random_spd(2, &mut rng)).unwrap();
        let p = e1.center() + e2.center();
        let m = minkowski_contains(&e1, &e2, &p).unwrap();
        assert!(m.inside);
        assert_eq!(m.margin, 0.0);
    }

    #[test]
    fn minkowski_balls_reduce_to_radius_sum() {
        let r1 = 0.7;
        let r2 = 1.9;
        let e1 = Ellipsoid::new(dvec(&[0.0, 0.0]), DMatrix::identity(2, 2) * r1 * r1).unwrap();
        let e2 = Ellipsoid::new(dvec(&[0.0, 0.0]), DMatrix::identity(2, 2) * r2 * r2).unwrap();
        let dir = dvec(&[0.6, -0.8]);

        let at = |scale: f64| -> MinkowskiMembership {
            let p = &dir * scale * (r1 + r2);
            minkowski_contains(&e1, &e2, &p).unwrap()
        };
        assert!(at(1.0).margin <= 1.0 + 1e-9);
        let outside = at(1.01);
        assert!(!outside.inside, "margin {}", outside.margin);
    }

    #[test]
    fn minkowski_decision_symmetric_in_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let e1 = Ellipsoid::new(
                DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0)),
                random_spd(2, &mut rng),
            )
            .unwrap();
            let e2 = Ellipsoid::new(
                DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0)),
                random_spd(2, &mut rng),
            )
            .unwrap();
            let p = DVector::from_fn(2, |_, _| rng.gen_range(-5.0..5.0));
            let a = minkowski_contains(&e1, &e2, &p).unwrap();
            let b = minkowski_contains(&e2, &e1, &p).unwrap();
            // Skip undecidable boundary ties.
            if (a.margin - 1.0).abs() > 1e-7 && (b.margin - 1.0).abs() > 1e-7 {
                assert_eq!(a.inside, b.inside);
            }
        }
    }

    #[test]
    fn minkowski_contains_translated_first_ellipsoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..50 {
            let e1 = Ellipsoid::new(
                DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0)),
                random_spd(2, &mut rng),
            )
            .unwrap();
            let e2 = Ellipsoid::new(
                DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0)),
                random_spd(2, &mut rng),
            )
            .unwrap();
            // Any point of E1 + mu2 must lie in E1 + E2.
            let x = e1.sample_interior(&mut rng);
            let p = x + e2.center();
            assert!(minkowski_contains(&e1, &e2, &p).unwrap().inside);
        }
    }

    #[test]
    fn serde_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let e = Ellipsoid::new(dvec(&[0.1, -0.9]), random_spd(2, &mut rng)).unwrap();
        let json = serde_json::to_string(&e).unwrap();
        let back: Ellipsoid = serde_json::from_str(&json).unwrap();
        assert_eq!(e.center(), back.center());
        assert_eq!(e.shape(), back.shape());
    }

    #[test]
    fn serde_rejects_non_spd() {
        let json = r#"{"center":[0.0,0.0],"shape":[[1.0,0.0],[0.0,-1.0]]}"#;
        assert!(serde_json::from_str::<Ellipsoid>(json).is_err());
    }
}
