//! Quadratic-constraint abstraction of a ReLU network.
//!
//! The network is rewritten over the stacked activation vector
//! `z = [z^0; z^1; ...; z^l]` as the implicit equation `B z = φ(A z + b)`,
//! with selector matrices extracting per-layer activations and per-input
//! blocks. Three families of symmetric indefinite matrices abstract it:
//!
//! - input QCs `M_i` that are nonnegative on `[z; 1]` whenever input block `i`
//!   lies in its ellipsoid,
//! - the activation QC `M_mid(Q)` that is nonnegative on every genuine
//!   forward pass for admissible multipliers (per-neuron complementarity
//!   `y^2 = x y` with free sign, and the slopes `y >= x`, `y >= 0` with
//!   nonnegative multipliers),
//! - the output QC `M_out(U, V)` whose nonpositivity traps the network output
//!   in the ellipsoid `E(-U^{-1} V, U^{-2})`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ellipsoid::Ellipsoid;
use crate::error::{Error, Result};
use crate::net::{ForwardTrace, ReluNetwork};

/// Dimensions of a stacked network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackedDims {
    /// Widths of each input block `n_1 .. n_q`.
    pub input_sizes: Vec<usize>,
    /// Total input width `n_Γ = N_0`.
    pub n_gamma: usize,
    /// Number of input blocks `q`.
    pub q: usize,
    /// Stacked activation length `N_z = N_0 + ... + N_l`.
    pub n_z: usize,
    /// Total hidden width `N_1 + ... + N_l`.
    pub hidden: usize,
    /// Output width.
    pub n_pi: usize,
}

/// The stacked representation of a ReLU network with a partitioned input.
#[derive(Debug, Clone)]
pub struct StackedForm {
    /// Block matrix with `W^t` mapping `z^t` to pre-activation `t+1`.
    a: DMatrix<f64>,
    /// Selector of the post-activations `z^1 .. z^l`.
    b_sel: DMatrix<f64>,
    /// Stacked biases `b^0 .. b^{l-1}`.
    bias: DVector<f64>,
    w_out: DMatrix<f64>,
    b_out: DVector<f64>,
    layer_widths: Vec<usize>,
    layer_offsets: Vec<usize>,
    input_offsets: Vec<usize>,
    dims: StackedDims,
}

/// Builds the stacked form of `net` with the input split into blocks of the
/// given sizes (which must sum to the network input width).
pub fn stack(net: &ReluNetwork, input_partition: &[usize]) -> Result<StackedForm> {
    let arch = net.arch();
    let n0 = arch[0];
    let partition_total: usize = input_partition.iter().sum();
    if partition_total != n0 || input_partition.iter().any(|&n| n == 0) {
        return Err(Error::DimensionMismatch {
            context: "input partition",
            expected: n0,
            actual: partition_total,
        });
    }
    let l = net.hidden_layers();
    let layer_widths: Vec<usize> = arch[..=l].to_vec();
    let n_z: usize = layer_widths.iter().sum();
    let hidden = n_z - n0;

    let mut layer_offsets = Vec::with_capacity(l + 1);
    let mut off = 0;
    for &w in &layer_widths {
        layer_offsets.push(off);
        off += w;
    }

    let mut input_offsets = Vec::with_capacity(input_partition.len());
    let mut ioff = 0;
    for &n in input_partition {
        input_offsets.push(ioff);
        ioff += n;
    }

    let mut a = DMatrix::zeros(hidden, n_z);
    let mut b_sel = DMatrix::zeros(hidden, n_z);
    let mut bias = DVector::zeros(hidden);
    let mut row = 0;
    for t in 0..l {
        let w = &net.weights()[t];
        a.view_mut((row, layer_offsets[t]), (w.nrows(), w.ncols()))
            .copy_from(w);
        for i in 0..w.nrows() {
            b_sel[(row + i, layer_offsets[t + 1] + i)] = 1.0;
        }
        bias.rows_mut(row, w.nrows()).copy_from(&net.biases()[t]);
        row += w.nrows();
    }

    Ok(StackedForm {
        a,
        b_sel,
        bias,
        w_out: net.weights()[l].clone(),
        b_out: net.biases()[l].clone(),
        layer_widths,
        layer_offsets,
        input_offsets,
        dims: StackedDims {
            input_sizes: input_partition.to_vec(),
            n_gamma: n0,
            q: input_partition.len(),
            n_z,
            hidden,
            n_pi: net.output_dim(),
        },
    })
}

impl StackedForm {
    pub fn dims(&self) -> &StackedDims {
        &self.dims
    }

    /// Activation widths `[N_0, N_1, ..., N_l]`.
    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b_selector(&self) -> &DMatrix<f64> {
        &self.b_sel
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn output_weight(&self) -> &DMatrix<f64> {
        &self.w_out
    }

    pub fn output_bias(&self) -> &DVector<f64> {
        &self.b_out
    }

    /// Side length of every QC matrix: `N_z + 1`.
    pub fn qc_dim(&self) -> usize {
        self.dims.n_z + 1
    }

    /// The selector `S^t` with `S^t z = z^t`.
    pub fn layer_selector(&self, t: usize) -> DMatrix<f64> {
        let width = self.layer_widths[t];
        let mut s = DMatrix::zeros(width, self.dims.n_z);
        for i in 0..width {
            s[(i, self.layer_offsets[t] + i)] = 1.0;
        }
        s
    }

    /// The selector `E_i` with `E_i [z; 1] = [γ_i; 1]`.
    pub fn input_selector(&self, i: usize) -> DMatrix<f64> {
        let n_i = self.dims.input_sizes[i];
        let mut e = DMatrix::zeros(n_i + 1, self.dims.n_z + 1);
        for r in 0..n_i {
            e[(r, self.input_offsets[i] + r)] = 1.0;
        }
        e[(n_i, self.dims.n_z)] = 1.0;
        e
    }

    /// Concatenates the activations of a forward pass into `z`.
    pub fn stacked_vector(&self, trace: &ForwardTrace) -> DVector<f64> {
        let mut z = DVector::zeros(self.dims.n_z);
        for (t, act) in trace.activations.iter().enumerate() {
            z.rows_mut(self.layer_offsets[t], act.len()).copy_from(act);
        }
        z
    }

    /// Residual of the implicit network equation `B z - φ(A z + b)`.
    pub fn consistency_residual(&self, z: &DVector<f64>) -> f64 {
        let lhs = &self.b_sel * z;
        let rhs = (&self.a * z + &self.bias).map(|v| v.max(0.0));
        (lhs - rhs).amax()
    }

    /// Network output as a function of a stacked vector: `W^l S^l z + b^l`.
    pub fn output_of(&self, z: &DVector<f64>) -> DVector<f64> {
        let l = self.layer_widths.len() - 1;
        let z_last = z.rows(self.layer_offsets[l], self.layer_widths[l]);
        &self.w_out * z_last + &self.b_out
    }

    /// Input QC matrix `M_i` for block `i` bounded by `ellipsoid`:
    /// `[z; 1]' M_i [z; 1] = 1 - (γ_i - μ)' Σ^{-1} (γ_i - μ) >= 0` inside.
    pub fn input_qc(&self, i: usize, ellipsoid: &Ellipsoid) -> Result<DMatrix<f64>> {
        let n_i = self.dims.input_sizes[i];
        if ellipsoid.dim() != n_i {
            return Err(Error::DimensionMismatch {
                context: "input QC ellipsoid dimension",
                expected: n_i,
                actual: ellipsoid.dim(),
            });
        }
        let sigma_inv = ellipsoid.shape_inverse();
        let mu = ellipsoid.center();
        let sig_mu = &sigma_inv * mu;

        let dim = self.qc_dim();
        let off = self.input_offsets[i];
        let last = dim - 1;
        let mut m = DMatrix::zeros(dim, dim);
        m.view_mut((off, off), (n_i, n_i)).copy_from(&-&sigma_inv);
        for r in 0..n_i {
            m[(off + r, last)] = sig_mu[r];
            m[(last, off + r)] = sig_mu[r];
        }
        m[(last, last)] = 1.0 - mu.dot(&sig_mu);
        Ok(m)
    }

    /// The single stacked input QC: block-diagonal `-Σ_i^{-1}` terms with the
    /// relaxed level set `Σ_i (γ_i - μ_i)' Σ_i^{-1} (γ_i - μ_i) <= q`.
    pub fn single_input_qc(&self, ellipsoids: &[Ellipsoid]) -> Result<DMatrix<f64>> {
        if ellipsoids.len() != self.dims.q {
            return Err(Error::DimensionMismatch {
                context: "single input QC block count",
                expected: self.dims.q,
                actual: ellipsoids.len(),
            });
        }
        let dim = self.qc_dim();
        let last = dim - 1;
        let mut m = DMatrix::zeros(dim, dim);
        let mut corner = self.dims.q as f64;
        for (i, e) in ellipsoids.iter().enumerate() {
            let n_i = self.dims.input_sizes[i];
            if e.dim() != n_i {
                return Err(Error::DimensionMismatch {
                    context: "single input QC ellipsoid dimension",
                    expected: n_i,
                    actual: e.dim(),
                });
            }
            let sigma_inv = e.shape_inverse();
            let sig_mu = &sigma_inv * e.center();
            let off = self.input_offsets[i];
            m.view_mut((off, off), (n_i, n_i)).copy_from(&-&sigma_inv);
            for r in 0..n_i {
                m[(off + r, last)] = sig_mu[r];
                m[(last, off + r)] = sig_mu[r];
            }
            corner -= e.center().dot(&sig_mu);
        }
        m[(last, last)] = corner;
        Ok(m)
    }

    /// Activation QC `M_mid(Q) = [A b; B 0; 0 1]' Q [A b; B 0; 0 1]` with the
    /// multiplier matrix
    /// `Q = [0, diag(λ), -ν; diag(λ), -2 diag(λ), ν + η; -ν', (ν + η)', 0]`.
    pub fn activation_qc(&self, m: &ReluQcMultipliers) -> Result<DMatrix<f64>> {
        m.validate(self.dims.hidden)?;
        let d = self.dims.hidden;
        let mut q = DMatrix::zeros(2 * d + 1, 2 * d + 1);
        for i in 0..d {
            q[(i, d + i)] = m.lambda[i];
            q[(d + i, i)] = m.lambda[i];
            q[(d + i, d + i)] = -2.0 * m.lambda[i];
            q[(i, 2 * d)] = -m.nu[i];
            q[(2 * d, i)] = -m.nu[i];
            q[(d + i, 2 * d)] = m.nu[i] + m.eta[i];
            q[(2 * d, d + i)] = m.nu[i] + m.eta[i];
        }
        let r = self.activation_frame();
        Ok(r.transpose() * q * r)
    }

    /// The frame `[A b; B 0; 0 1]` mapping `[z; 1]` to `[A z + b; B z; 1]`.
    fn activation_frame(&self) -> DMatrix<f64> {
        let d = self.dims.hidden;
        let n = self.dims.n_z;
        let mut r = DMatrix::zeros(2 * d + 1, n + 1);
        r.view_mut((0, 0), (d, n)).copy_from(&self.a);
        for i in 0..d {
            r[(i, n)] = self.bias[i];
        }
        r.view_mut((d, 0), (d, n)).copy_from(&self.b_sel);
        r[(2 * d, n)] = 1.0;
        r
    }

    /// Rows of `[A b]` and `[B 0]` for one hidden neuron, used to build
    /// rank-limited basis matrices of `M_mid`.
    fn neuron_rows(&self, i: usize) -> (DVector<f64>, DVector<f64>) {
        let n = self.dims.n_z;
        let mut pre = DVector::zeros(n + 1);
        pre.rows_mut(0, n).copy_from(&self.a.row(i).transpose());
        pre[n] = self.bias[i];
        let mut post = DVector::zeros(n + 1);
        post.rows_mut(0, n).copy_from(&self.b_sel.row(i).transpose());
        (pre, post)
    }

    /// Per-neuron basis matrices so that
    /// `M_mid(λ, ν, η) = Σ_i λ_i L_i + ν_i N_i + η_i H_i`.
    pub fn activation_qc_basis(&self) -> ActivationQcBasis {
        let d = self.dims.hidden;
        let n = self.dims.n_z;
        let mut e_last = DVector::zeros(n + 1);
        e_last[n] = 1.0;
        let mut lambda = Vec::with_capacity(d);
        let mut nu = Vec::with_capacity(d);
        let mut eta = Vec::with_capacity(d);
        for i in 0..d {
            let (x, y) = self.neuron_rows(i);
            // 2 λ (x y - y^2)
            lambda.push(&x * y.transpose() + &y * x.transpose() - (&y * y.transpose()) * 2.0);
            // 2 ν (y - x)
            let ymx = &y - &x;
            nu.push(&ymx * e_last.transpose() + &e_last * ymx.transpose());
            // 2 η y
            eta.push(&y * e_last.transpose() + &e_last * y.transpose());
        }
        ActivationQcBasis { lambda, nu, eta }
    }

    /// Output QC `M_out = [W^l S^l, b^l; 0, 1]' [U^2, U V; V' U, V' V - 1] [W^l S^l, b^l; 0, 1]`.
    pub fn output_qc(&self, u: &DMatrix<f64>, v: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n_pi = self.dims.n_pi;
        if u.nrows() != n_pi || u.ncols() != n_pi || v.len() != n_pi {
            return Err(Error::DimensionMismatch {
                context: "output QC (U, V) dimensions",
                expected: n_pi,
                actual: u.nrows(),
            });
        }
        let frame = self.output_frame();
        let mut mid = DMatrix::zeros(n_pi + 1, n_pi + 1);
        mid.view_mut((0, 0), (n_pi, n_pi)).copy_from(&(u * u));
        let uv = u * v;
        for i in 0..n_pi {
            mid[(i, n_pi)] = uv[i];
            mid[(n_pi, i)] = uv[i];
        }
        mid[(n_pi, n_pi)] = v.dot(v) - 1.0;
        Ok(frame.transpose() * mid * frame)
    }

    /// The frame `[W^l S^l, b^l; 0, 1]` mapping `[z; 1]` to `[π(z); 1]`.
    pub fn output_frame(&self) -> DMatrix<f64> {
        let n_pi = self.dims.n_pi;
        let n = self.dims.n_z;
        let l = self.layer_widths.len() - 1;
        let mut f = DMatrix::zeros(n_pi + 1, n + 1);
        f.view_mut((0, self.layer_offsets[l]), (n_pi, self.layer_widths[l]))
            .copy_from(&self.w_out);
        for i in 0..n_pi {
            f[(i, n)] = self.b_out[i];
        }
        f[(n_pi, n)] = 1.0;
        f
    }

    /// Serializable bundle of every QC matrix for solver-independent
    /// inspection.
    pub fn qc_bundle(
        &self,
        ellipsoids: &[Ellipsoid],
        multipliers: &ReluQcMultipliers,
        u: &DMatrix<f64>,
        v: &DVector<f64>,
    ) -> Result<QcBundle> {
        let input_qcs = ellipsoids
            .iter()
            .enumerate()
            .map(|(i, e)| self.input_qc(i, e).map(|m| matrix_rows(&m)))
            .collect::<Result<Vec<_>>>()?;
        Ok(QcBundle {
            dims: self.dims.clone(),
            input_qcs,
            single_input_qc: matrix_rows(&self.single_input_qc(ellipsoids)?),
            activation_qc: matrix_rows(&self.activation_qc(multipliers)?),
            output_qc: matrix_rows(&self.output_qc(u, v)?),
        })
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// JSON dump of the assembled QC matrices.
#[derive(Debug, Serialize, Deserialize)]
pub struct QcBundle {
    pub dims: StackedDims,
    pub input_qcs: Vec<Vec<Vec<f64>>>,
    pub single_input_qc: Vec<Vec<f64>>,
    pub activation_qc: Vec<Vec<f64>>,
    pub output_qc: Vec<Vec<f64>>,
}

/// Basis matrices for the activation QC, one triple per hidden neuron.
#[derive(Debug, Clone)]
pub struct ActivationQcBasis {
    pub lambda: Vec<DMatrix<f64>>,
    pub nu: Vec<DMatrix<f64>>,
    pub eta: Vec<DMatrix<f64>>,
}

/// ReLU QC multipliers: `lambda` free sign (complementarity `y^2 = x y`),
/// `nu >= 0` (slope `y >= x`), `eta >= 0` (`y >= 0`).
#[derive(Debug, Clone)]
pub struct ReluQcMultipliers {
    pub lambda: DVector<f64>,
    pub nu: DVector<f64>,
    pub eta: DVector<f64>,
}

impl ReluQcMultipliers {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            lambda: DVector::zeros(hidden),
            nu: DVector::zeros(hidden),
            eta: DVector::zeros(hidden),
        }
    }

    pub fn validate(&self, hidden: usize) -> Result<()> {
        if self.lambda.len() != hidden || self.nu.len() != hidden || self.eta.len() != hidden {
            return Err(Error::DimensionMismatch {
                context: "activation multiplier length",
                expected: hidden,
                actual: self.lambda.len(),
            });
        }
        if self.nu.iter().any(|&v| v < 0.0) || self.eta.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain(
                "activation multipliers nu and eta must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// `[z; 1]' M [z; 1]` for a stacked vector `z`.
pub fn homogeneous_form(m: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
    let n = z.len();
    debug_assert_eq!(m.nrows(), n + 1);
    let mut zh = DVector::zeros(n + 1);
    zh.rows_mut(0, n).copy_from(z);
    zh[n] = 1.0;
    zh.dot(&(m * &zh))
}

#[cfg(test)]
mod tests {
    use super::*;
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

    #[test]
    fn stack_dimensions_beam_and_tank() {
        let beam = random_net(&[4, 10, 2, 2], 1);
        let s = stack(&beam, &[2, 2]).unwrap();
        assert_eq!(s.dims().n_z, 16);
        assert_eq!(s.qc_dim(), 17);
        assert_eq!(s.dims().q, 2);
        assert_eq!(s.dims().hidden, 12);
        assert_eq!(s.a().nrows(), 12);
        assert_eq!(s.a().ncols(), 16);

        let tank = random_net(&[8, 20, 5, 2], 2);
        let s = stack(&tank, &[2, 2, 2, 2]).unwrap();
        assert_eq!(s.dims().n_z, 33);
        assert_eq!(s.dims().q, 4);
    }

    #[test]
    fn stack_rejects_bad_partition() {
        let net = random_net(&[4, 10, 2, 2], 1);
        assert!(stack(&net, &[2, 3]).is_err());
        assert!(stack(&net, &[4, 0]).is_err());
    }

    #[test]
    fn stacked_identity_holds_on_forward_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..5 {
            let net = random_net(&[6, 7, 4, 3], seed);
            let s = stack(&net, &[3, 3]).unwrap();
            for _ in 0..20 {
                let x = DVector::from_fn(6, |_, _| rng.gen_range(-2.0..2.0));
                let trace = net.forward_trace(&x).unwrap();
                let z = s.stacked_vector(&trace);
                assert!(s.consistency_residual(&z) < 1e-12);
                assert!((s.output_of(&z) - trace.output).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn selectors_pick_layers_and_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = random_net(&[4, 5, 3, 2], 7);
        let s = stack(&net, &[2, 2]).unwrap();
        let z = DVector::from_fn(s.dims().n_z, |_, _| rng.gen_range(-1.0..1.0));

        let mut off = 0;
        for t in 0..3 {
            let sel = s.layer_selector(t);
            let picked = &sel * &z;
            assert_eq!(picked, z.rows(off, sel.nrows()).into_owned());
            off += sel.nrows();
        }

        let mut zh = DVector::zeros(s.dims().n_z + 1);
        zh.rows_mut(0, s.dims().n_z).copy_from(&z);
        zh[s.dims().n_z] = 1.0;
        for i in 0..2 {
            let e = s.input_selector(i);
            let picked = &e * &zh;
            assert_eq!(picked.rows(0, 2).into_owned(), z.rows(i * 2, 2).into_owned());
            assert_eq!(picked[2], 1.0);
        }

        // B z selects exactly z^1 .. z^l.
        let bz = s.b_selector() * &z;
        assert_eq!(bz, z.rows(4, s.dims().hidden).into_owned());
    }

    #[test]
    fn input_qc_center_boundary_outside() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = random_net(&[4, 6, 2], 11);
        let s = stack(&net, &[2, 2]).unwrap();
        let e = Ellipsoid::new(dvec(&[0.7, -0.3]), random_spd(2, &mut rng)).unwrap();
        let m = s.input_qc(1, &e).unwrap();
        assert_eq!(m.nrows(), s.qc_dim());
        assert!((&m - m.transpose()).amax() < 1e-12);

        let mut z = DVector::zeros(s.dims().n_z);
        let form_at = |z: &DVector<f64>, m: &DMatrix<f64>| homogeneous_form(m, z);

        // gamma_1 at the center: form = 1.
        z.rows_mut(2, 2).copy_from(e.center());
        assert!((form_at(&z, &m) - 1.0).abs() < 1e-12);

        // On the boundary: form = 0.
        let b = e.sample_boundary(&mut rng);
        z.rows_mut(2, 2).copy_from(&b);
        assert!(form_at(&z, &m).abs() < 1e-10);

        // Margin 1.5 outside: form = -0.5.
        let dir = &b - e.center();
        let outside = e.center() + dir * 1.5_f64.sqrt();
        z.rows_mut(2, 2).copy_from(&outside);
        assert!((form_at(&z, &m) + 0.5).abs() < 1e-9);
    }

    #[test]
    fn input_qc_nonnegative_inside_on_stacked_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = random_net(&[4, 6, 3, 2], 13);
        let s = stack(&net, &[2, 2]).unwrap();
        let es: Vec<Ellipsoid> = (0..2)
            .map(|_| {
                Ellipsoid::new(
                    DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)),
                    random_spd(2, &mut rng),
                )
                .unwrap()
            })
            .collect();
        for _ in 0..100 {
            let g: Vec<DVector<f64>> = es.iter().map(|e| e.sample_interior(&mut rng)).collect();
            let mut x = DVector::zeros(4);
            x.rows_mut(0, 2).copy_from(&g[0]);
            x.rows_mut(2, 2).copy_from(&g[1]);
            let z = s.stacked_vector(&net.forward_trace(&x).unwrap());
            for (i, e) in es.iter().enumerate() {
                let m = s.input_qc(i, e).unwrap();
                assert!(homogeneous_form(&m, &z) >= -1e-9);
            }
        }
    }

    #[test]
    fn activation_qc_zero_multipliers() {
        let net = random_net(&[3, 4, 2], 17);
        let s = stack(&net, &[3]).unwrap();
        let m = s
            .activation_qc(&ReluQcMultipliers::zeros(s.dims().hidden))
            .unwrap();
        assert!(m.amax() == 0.0);
    }

    #[test]
    fn activation_qc_single_neuron_hand_expansion() {
        // One input, one hidden neuron, identity weights: x = z0, y = z1.
        let net = ReluNetwork::new(
            vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
            vec![dvec(&[0.0]), dvec(&[0.0])],
        )
        .unwrap();
        let s = stack(&net, &[1]).unwrap();
        let m = s
            .activation_qc(&ReluQcMultipliers {
                lambda: dvec(&[0.3]),
                nu: dvec(&[0.2]),
                eta: dvec(&[0.5]),
            })
            .unwrap();
        // Active neuron x = 1, y = 1: 2λ(xy - y²) + 2ν(y - x) + 2ηy = 2η.
        let z = dvec(&[1.0, 1.0]);
        assert!((homogeneous_form(&m, &z) - 1.0).abs() < 1e-12);
        // Inactive x = -1, y = 0: 2λ·0 + 2ν(0+1) + 0 = 2ν.
        let z = dvec(&[-1.0, 0.0]);
        assert!((homogeneous_form(&m, &z) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn activation_qc_nonnegative_on_forward_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for seed in 0..10 {
            let net = random_net(&[3, 6, 4, 2], 100 + seed);
            let s = stack(&net, &[3]).unwrap();
            let d = s.dims().hidden;
            for _ in 0..100 {
                let mult = ReluQcMultipliers {
                    lambda: DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0)),
                    nu: DVector::from_fn(d, |_, _| rng.gen_range(0.0..2.0)),
                    eta: DVector::from_fn(d, |_, _| rng.gen_range(0.0..2.0)),
                };
                let m = s.activation_qc(&mult).unwrap();
                let x = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
                let z = s.stacked_vector(&net.forward_trace(&x).unwrap());
                let form = homogeneous_form(&m, &z);
                assert!(form >= -1e-9, "activation QC violated: {form}");
            }
        }
    }

    #[test]
    fn activation_qc_rejects_negative_multipliers() {
        let net = random_net(&[3, 4, 2], 19);
        let s = stack(&net, &[3]).unwrap();
        let d = s.dims().hidden;
        let mut m = ReluQcMultipliers::zeros(d);
        m.nu[0] = -0.1;
        assert!(s.activation_qc(&m).is_err());
    }

    #[test]
    fn activation_qc_basis_matches_sandwich() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = random_net(&[4, 5, 3, 2], 23);
        let s = stack(&net, &[2, 2]).unwrap();
        let d = s.dims().hidden;
        let mult = ReluQcMultipliers {
            lambda: DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0)),
            nu: DVector::from_fn(d, |_, _| rng.gen_range(0.0..1.0)),
            eta: DVector::from_fn(d, |_, _| rng.gen_range(0.0..1.0)),
        };
        let direct = s.activation_qc(&mult).unwrap();
        let basis = s.activation_qc_basis();
        let mut sum = DMatrix::zeros(s.qc_dim(), s.qc_dim());
        for i in 0..d {
            sum += &basis.lambda[i] * mult.lambda[i];
            sum += &basis.nu[i] * mult.nu[i];
            sum += &basis.eta[i] * mult.eta[i];
        }
        assert!((&direct - &sum).amax() < 1e-12);
    }

    #[test]
    fn output_qc_encodes_unit_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = random_net(&[3, 5, 2], 29);
        let s = stack(&net, &[3]).unwrap();
        let c = dvec(&[0.4, -0.9]);
        let m = s
            .output_qc(&DMatrix::identity(2, 2), &(-c.clone()))
            .unwrap();
        for _ in 0..50 {
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let trace = net.forward_trace(&x).unwrap();
            let z = s.stacked_vector(&trace);
            let expected = (&trace.output - &c).norm_squared() - 1.0;
            assert!((homogeneous_form(&m, &z) - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn output_qc_radius_scales_inversely() {
        let net = random_net(&[3, 5, 2], 31);
        let s = stack(&net, &[3]).unwrap();
        let scale = 4.0;
        let u = DMatrix::identity(2, 2) * scale;
        let v = dvec(&[0.8, -0.4]);
        // E(-U^-1 V, U^-2) has radius 1/scale around -V/scale.
        let u_chol = nalgebra::Cholesky::new(&u * &u).unwrap();
        let center = -(u.clone().try_inverse().unwrap() * &v);
        let ell = Ellipsoid::new(center.clone(), u_chol.inverse()).unwrap();
        assert!((ell.center() - (-&v / scale)).norm() < 1e-12);
        assert!((ell.shape() - DMatrix::identity(2, 2) / (scale * scale)).norm() < 1e-12);
        // Sign of the QC form agrees with membership of the output.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = s.output_qc(&u, &v).unwrap();
        for _ in 0..100 {
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-3.0..3.0));
            let trace = net.forward_trace(&x).unwrap();
            let z = s.stacked_vector(&trace);
            let form = homogeneous_form(&m, &z);
            let margin = ell.contains(&trace.output).unwrap().margin;
            if (margin - 1.0).abs() > 1e-9 {
                assert_eq!(form <= 0.0, margin <= 1.0, "form {form}, margin {margin}");
            }
        }
    }

    #[test]
    fn single_input_qc_reduces_to_input_qc_for_one_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = random_net(&[3, 5, 2], 37);
        let s = stack(&net, &[3]).unwrap();
        let e = Ellipsoid::new(dvec(&[0.1, 0.2, -0.4]), random_spd(3, &mut rng)).unwrap();
        let single = s.single_input_qc(std::slice::from_ref(&e)).unwrap();
        let multi = s.input_qc(0, &e).unwrap();
        assert!((&single - &multi).amax() < 1e-12);
    }

    #[test]
    fn single_input_qc_center_and_boundary_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = random_net(&[4, 5, 2], 41);
        let s = stack(&net, &[2, 2]).unwrap();
        let es: Vec<Ellipsoid> = (0..2)
            .map(|_| {
                Ellipsoid::new(
                    DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)),
                    random_spd(2, &mut rng),
                )
                .unwrap()
            })
            .collect();
        let m = s.single_input_qc(&es).unwrap();

        // All inputs at their centers: form = q.
        let mut z = DVector::zeros(s.dims().n_z);
        z.rows_mut(0, 2).copy_from(es[0].center());
        z.rows_mut(2, 2).copy_from(es[1].center());
        assert!((homogeneous_form(&m, &z) - 2.0).abs() < 1e-12);

        // All inputs on their boundaries: form = 0.
        z.rows_mut(0, 2).copy_from(&es[0].sample_boundary(&mut rng));
        z.rows_mut(2, 2).copy_from(&es[1].sample_boundary(&mut rng));
        assert!(homogeneous_form(&m, &z).abs() < 1e-9);
    }

    #[test]
    fn summed_input_qcs_touch_only_own_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = random_net(&[4, 6, 2], 43);
        let s = stack(&net, &[2, 2]).unwrap();
        let e = Ellipsoid::new(dvec(&[0.5, -0.5]), random_spd(2, &mut rng)).unwrap();
        let m0 = s.input_qc(0, &e).unwrap();
        let last = s.qc_dim() - 1;
        for r in 0..s.qc_dim() {
            for c in 0..s.qc_dim() {
                let in_block = |idx: usize| idx < 2 || idx == last;
                if m0[(r, c)] != 0.0 {
                    assert!(in_block(r) && in_block(c), "stray entry at ({r},{c})");
                }
            }
        }
        // Uniform tau factors out.
        let m1 = s.input_qc(1, &e).unwrap();
        let tau = 0.37;
        let sum = (&m0 + &m1) * tau;
        let weighted = &m0 * tau + &m1 * tau;
        assert!((&sum - &weighted).amax() < 1e-12);
    }

    #[test]
    fn qc_bundle_serializes() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let net = random_net(&[4, 5, 2], 47);
        let s = stack(&net, &[2, 2]).unwrap();
        let es: Vec<Ellipsoid> = (0..2)
            .map(|_| Ellipsoid::new(DVector::zeros(2), random_spd(2, &mut rng)).unwrap())
            .collect();
        let bundle = s
            .qc_bundle(
                &es,
                &ReluQcMultipliers::zeros(s.dims().hidden),
                &DMatrix::identity(2, 2),
                &DVector::zeros(2),
            )
            .unwrap();
        let json = serde_json::to_string(&bundle).unwrap();
        assert!(json.contains("input_qcs"));
    }
}
