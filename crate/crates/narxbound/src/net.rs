//! ReLU feedforward NARX estimator: representation, evaluation, dataset
//! construction from measurement trajectories, and desk-scale training.
//!
//! Networks here are tiny (tens of neurons), so the trainer is a plain
//! mini-batch SGD with momentum on the mean squared error, implemented
//! in-crate and fully deterministic given a seed.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `l`-hidden-layer ReLU network `x -> W_l φ(W_{l-1} φ(... ) + b_{l-1}) + b_l`.
///
/// `weights[t]` maps activation `t` to pre-activation `t+1`; the final pair is
/// the affine output layer (no activation).
#[derive(Debug, Clone, PartialEq)]
pub struct ReluNetwork {
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

impl ReluNetwork {
    pub fn new(weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::Config(
                "a ReLU network needs at least one hidden layer".into(),
            ));
        }
        if weights.len() != biases.len() {
            return Err(Error::DimensionMismatch {
                context: "network weights vs biases",
                expected: weights.len(),
                actual: biases.len(),
            });
        }
        for (t, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != b.len() {
                return Err(Error::DimensionMismatch {
                    context: "network bias length",
                    expected: w.nrows(),
                    actual: b.len(),
                });
            }
            if t > 0 && w.ncols() != weights[t - 1].nrows() {
                return Err(Error::DimensionMismatch {
                    context: "network layer chaining",
                    expected: weights[t - 1].nrows(),
                    actual: w.ncols(),
                });
            }
            if w.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("network parameters must be finite".into()));
            }
        }
        Ok(Self { weights, biases })
    }

    /// Number of hidden layers.
    pub fn hidden_layers(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().nrows()
    }

    /// Layer widths `[N_0, N_1, ..., N_l, n_out]`.
    pub fn arch(&self) -> Vec<usize> {
        let mut arch = vec![self.input_dim()];
        arch.extend(self.weights.iter().map(|w| w.nrows()));
        arch
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    /// The same network with the first-layer bias replaced; used to absorb an
    /// input translation `x -> x + shift` since
    /// `W_0 (x + shift) + b_0 = W_0 x + (b_0 + W_0 shift)`.
    pub fn with_input_shift(&self, shift: &DVector<f64>) -> Result<Self> {
        if shift.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "input shift",
                expected: self.input_dim(),
                actual: shift.len(),
            });
        }
        let mut biases = self.biases.clone();
        biases[0] = &biases[0] + &self.weights[0] * shift;
        Self::new(self.weights.clone(), biases)
    }

    pub fn forward(&self, input: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.forward_trace(input)?.output)
    }

    /// Forward pass keeping every post-activation `z^0 .. z^l`.
    pub fn forward_trace(&self, input: &DVector<f64>) -> Result<ForwardTrace> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let l = self.hidden_layers();
        let mut activations = Vec::with_capacity(l + 1);
        activations.push(input.clone());
        for t in 0..l {
            let pre = &self.weights[t] * activations.last().unwrap() + &self.biases[t];
            activations.push(pre.map(|v| v.max(0.0)));
        }
        let output = &self.weights[l] * activations.last().unwrap() + &self.biases[l];
        Ok(ForwardTrace {
            activations,
            output,
        })
    }

    /// Forward pass over a batch; columns are samples.
    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let l = self.hidden_layers();
        let mut z = inputs.clone();
        for t in 0..l {
            let mut pre = &self.weights[t] * z;
            for mut col in pre.column_iter_mut() {
                col += &self.biases[t];
            }
            z = pre.map(|v| v.max(0.0));
        }
        let mut out = &self.weights[l] * z;
        for mut col in out.column_iter_mut() {
            col += &self.biases[l];
        }
        out
    }

    /// Mean squared error over all scalar entries of the batch.
    pub fn mse(&self, inputs: &DMatrix<f64>, labels: &DMatrix<f64>) -> f64 {
        let diff = self.forward_batch(inputs) - labels;
        diff.norm_squared() / (diff.nrows() * diff.ncols()) as f64
    }

    /// Batch MSE together with its analytic gradients (backpropagation).
    pub fn mse_and_gradients(
        &self,
        inputs: &DMatrix<f64>,
        labels: &DMatrix<f64>,
    ) -> (f64, Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let l = self.hidden_layers();
        let n = inputs.ncols();
        let n_out = labels.nrows();

        let mut activations = Vec::with_capacity(l + 1);
        let mut pre_activations = Vec::with_capacity(l);
        activations.push(inputs.clone());
        for t in 0..l {
            let mut pre = &self.weights[t] * activations.last().unwrap();
            for mut col in pre.column_iter_mut() {
                col += &self.biases[t];
            }
            activations.push(pre.map(|v| v.max(0.0)));
            pre_activations.push(pre);
        }
        let mut out = &self.weights[l] * activations.last().unwrap();
        for mut col in out.column_iter_mut() {
            col += &self.biases[l];
        }

        let diff = out - labels;
        let loss = diff.norm_squared() / (n * n_out) as f64;

        let mut w_grads = vec![DMatrix::zeros(0, 0); l + 1];
        let mut b_grads = vec![DVector::zeros(0); l + 1];
        let mut grad = diff * (2.0 / (n * n_out) as f64);
        w_grads[l] = &grad * activations[l].transpose();
        b_grads[l] = row_sums(&grad);
        let mut upstream = self.weights[l].transpose() * grad;
        for t in (0..l).rev() {
            grad = upstream.zip_map(&pre_activations[t], |g, p| if p > 0.0 { g } else { 0.0 });
            w_grads[t] = &grad * activations[t].transpose();
            b_grads[t] = row_sums(&grad);
            if t > 0 {
                upstream = self.weights[t].transpose() * grad;
            }
        }
        (loss, w_grads, b_grads)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&WeightsFile::from(self))?;
        crate::experiment::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let raw: WeightsFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        raw.try_into()
    }
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |i, _| m.row(i).sum())
}

/// Activations of one forward pass (`z^0` is the input, `z^l` the last hidden).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub activations: Vec<DVector<f64>>,
    pub output: DVector<f64>,
}

/// Weight file schema: `{"arch": [...], "weights": [[[..]]], "biases": [[..]]}`
/// with each weight matrix stored as a list of rows.
#[derive(Debug, Serialize, Deserialize)]
struct WeightsFile {
    arch: Vec<usize>,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

impl From<&ReluNetwork> for WeightsFile {
    fn from(net: &ReluNetwork) -> Self {
        WeightsFile {
            arch: net.arch(),
            weights: net
                .weights
                .iter()
                .map(|w| {
                    (0..w.nrows())
                        .map(|i| (0..w.ncols()).map(|j| w[(i, j)]).collect())
                        .collect()
                })
                .collect(),
            biases: net
                .biases
                .iter()
                .map(|b| b.iter().copied().collect())
                .collect(),
        }
    }
}

impl TryFrom<WeightsFile> for ReluNetwork {
    type Error = Error;

    fn try_from(raw: WeightsFile) -> Result<Self> {
        if raw.arch.len() < 3 {
            return Err(Error::Parse {
                path: "arch".into(),
                message: "architecture needs input, at least one hidden, and output widths".into(),
            });
        }
        if raw.weights.len() != raw.arch.len() - 1 || raw.biases.len() != raw.arch.len() - 1 {
            return Err(Error::Parse {
                path: "weights".into(),
                message: format!(
                    "expected {} weight matrices and bias vectors",
                    raw.arch.len() - 1
                ),
            });
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (t, (w, b)) in raw.weights.iter().zip(&raw.biases).enumerate() {
            let (rows, cols) = (raw.arch[t + 1], raw.arch[t]);
            if w.len() != rows {
                return Err(Error::Parse {
                    path: format!("weights[{t}]"),
                    message: format!("expected {rows} rows, got {}", w.len()),
                });
            }
            for (i, row) in w.iter().enumerate() {
                if row.len() != cols {
                    return Err(Error::Parse {
                        path: format!("weights[{t}][{i}]"),
                        message: format!("expected {cols} columns, got {}", row.len()),
                    });
                }
            }
            if b.len() != rows {
                return Err(Error::Parse {
                    path: format!("biases[{t}]"),
                    message: format!("expected {rows} entries, got {}", b.len()),
                });
            }
            weights.push(DMatrix::from_fn(rows, cols, |i, j| w[i][j]));
            biases.push(DVector::from_vec(b.clone()));
        }
        ReluNetwork::new(weights, biases)
    }
}

/// A window of measurements `y_k, y_{k-1}, ..., y_{k-N}`, newest first.
#[derive(Debug, Clone)]
pub struct RegressorWindow {
    entries: Vec<DVector<f64>>,
}

impl RegressorWindow {
    /// `entries[0]` is the newest measurement.
    pub fn new(entries: Vec<DVector<f64>>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("regressor window cannot be empty".into()));
        }
        let p = entries[0].len();
        if p == 0 || entries.iter().any(|e| e.len() != p) {
            return Err(Error::DimensionMismatch {
                context: "regressor window entries",
                expected: p,
                actual: entries
                    .iter()
                    .map(|e| e.len())
                    .find(|&l| l != p)
                    .unwrap_or(0),
            });
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[DVector<f64>] {
        &self.entries
    }

    pub fn measurement_dim(&self) -> usize {
        self.entries[0].len()
    }

    /// Window length `N + 1`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stacked vector `vec[y_k, y_{k-1}, ..., y_{k-N}]` of dimension `p (N+1)`.
    pub fn stacked(&self) -> DVector<f64> {
        let p = self.measurement_dim();
        let mut v = DVector::zeros(p * self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            v.rows_mut(i * p, p).copy_from(e);
        }
        v
    }
}

/// Supervised pairs (stacked window, next measurement); columns are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub labels: DMatrix<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// CSV with a header `in_0,..,in_{m-1},label_0,..,label_{r-1}`, one pair
    /// per row.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        let header: Vec<String> = (0..self.inputs.nrows())
            .map(|i| format!("in_{i}"))
            .chain((0..self.labels.nrows()).map(|i| format!("label_{i}")))
            .collect();
        text.push_str(&header.join(","));
        text.push('\n');
        for s in 0..self.len() {
            let row: Vec<String> = self
                .inputs
                .column(s)
                .iter()
                .chain(self.labels.column(s).iter())
                .map(|v| format!("{v:?}"))
                .collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        crate::experiment::write_atomic(path, text.as_bytes())
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            message: "empty dataset file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        let n_in = cols.iter().take_while(|c| c.starts_with("in_")).count();
        let n_label = cols.len() - n_in;
        if n_in == 0 || n_label == 0 || !cols[n_in..].iter().all(|c| c.starts_with("label_")) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: "header must list in_* columns followed by label_* columns".into(),
            });
        }
        let mut input_rows = Vec::new();
        let mut label_rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", lineno + 2),
                })?;
            if vals.len() != cols.len() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    message: format!(
                        "line {}: expected {} values, got {}",
                        lineno + 2,
                        cols.len(),
                        vals.len()
                    ),
                });
            }
            input_rows.push(vals[..n_in].to_vec());
            label_rows.push(vals[n_in..].to_vec());
        }
        let n = input_rows.len();
        Ok(Dataset {
            inputs: DMatrix::from_fn(n_in, n, |i, j| input_rows[j][i]),
            labels: DMatrix::from_fn(n_label, n, |i, j| label_rows[j][i]),
        })
    }
}

/// Builds (stacked window, next measurement) pairs from measurement sequences.
///
/// `past` is the number of past measurements N; windows never straddle
/// sequence boundaries. Returns the dataset and the number of sequences that
/// were too short to contribute (length below `past + 2`).
pub fn build_dataset(sequences: &[Vec<DVector<f64>>], past: usize) -> Result<(Dataset, usize)> {
    let p = sequences
        .iter()
        .find(|s| !s.is_empty())
        .map(|s| s[0].len())
        .ok_or_else(|| Error::Config("no measurements provided".into()))?;
    let mut samples: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut skipped = 0;
    for seq in sequences {
        if seq.len() < past + 2 {
            skipped += 1;
            continue;
        }
        for y in seq {
            if y.len() != p {
                return Err(Error::DimensionMismatch {
                    context: "trajectory measurement dimension",
                    expected: p,
                    actual: y.len(),
                });
            }
        }
        for k in past..seq.len() - 1 {
            // Newest first: y_k, y_{k-1}, ..., y_{k-past}.
            let mut input = Vec::with_capacity(p * (past + 1));
            for i in 0..=past {
                input.extend(seq[k - i].iter());
            }
            samples.push((input, seq[k + 1].iter().copied().collect()));
        }
    }
    if samples.is_empty() {
        return Err(Error::Config(
            "all trajectories were too short to build training pairs".into(),
        ));
    }
    let n = samples.len();
    Ok((
        Dataset {
            inputs: DMatrix::from_fn(p * (past + 1), n, |i, j| samples[j].0[i]),
            labels: DMatrix::from_fn(p, n, |i, j| samples[j].1[i]),
        },
        skipped,
    ))
}

/// Hyperparameters of the mini-batch SGD trainer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub validation_split: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            validation_split: 0.2,
        }
    }
}

impl TrainingConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(
                "learning rate must be positive and momentum in [0, 1)".into(),
            ));
        }
        if !(self.validation_split > 0.0 && self.validation_split < 1.0) {
            return Err(Error::Config("validation split must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Final and per-epoch training metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub train_mse: f64,
    pub val_mse: f64,
    /// Mean of the mini-batch losses of each epoch.
    pub epoch_train_mse: Vec<f64>,
}

/// Trains a ReLU network of the given architecture on the dataset.
///
/// Deterministic given the config seed: weight initialization (uniform in
/// `±sqrt(6 / (fan_in + fan_out))`), the train/validation split and the
/// mini-batch order all derive from one seeded stream.
pub fn train(
    dataset: &Dataset,
    arch: &[usize],
    cfg: &TrainingConfig,
) -> Result<(ReluNetwork, TrainingReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if arch.len() < 3 {
        return Err(Error::Config(
            "architecture needs input, at least one hidden, and output widths".into(),
        ));
    }
    if arch[0] != dataset.inputs.nrows() {
        return Err(Error::DimensionMismatch {
            context: "architecture input width",
            expected: dataset.inputs.nrows(),
            actual: arch[0],
        });
    }
    if *arch.last().unwrap() != dataset.labels.nrows() {
        return Err(Error::DimensionMismatch {
            context: "architecture output width",
            expected: dataset.labels.nrows(),
            actual: *arch.last().unwrap(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for t in 0..arch.len() - 1 {
        let (fan_out, fan_in) = (arch[t + 1], arch[t]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| {
            rng.gen_range(-bound..bound)
        }));
        biases.push(DVector::zeros(fan_out));
    }
    let mut net = ReluNetwork::new(weights, biases)?;

    let n = dataset.len();
    let mut indices: Vec<usize> = (0..n).collect();
    shuffle(&mut indices, &mut rng);
    let n_val = if n >= 2 {
        ((n as f64 * cfg.validation_split).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let (val_idx, rest) = indices.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = rest.to_vec();

    let select = |idx: &[usize]| -> (DMatrix<f64>, DMatrix<f64>) {
        (
            dataset.inputs.select_columns(idx),
            dataset.labels.select_columns(idx),
        )
    };
    let (val_in, val_lab) = select(&val_idx);

    let mut w_vel: Vec<DMatrix<f64>> = net
        .weights
        .iter()
        .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
        .collect();
    let mut b_vel: Vec<DVector<f64>> = net.biases.iter().map(|b| DVector::zeros(b.len())).collect();

    let mut epoch_train_mse = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        shuffle(&mut train_idx, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let (bin, blab) = select(chunk);
            let (loss, w_grads, b_grads) = net.mse_and_gradients(&bin, &blab);
            if !loss.is_finite() {
                return Err(Error::Numerical(
                    "training diverged (non-finite loss); reduce the learning rate".into(),
                ));
            }
            for t in 0..net.weights.len() {
                w_vel[t] = &w_vel[t] * cfg.momentum - &w_grads[t] * cfg.learning_rate;
                net.weights[t] += &w_vel[t];
                b_vel[t] = &b_vel[t] * cfg.momentum - &b_grads[t] * cfg.learning_rate;
                net.biases[t] += &b_vel[t];
            }
            epoch_loss += loss;
            batches += 1;
        }
        epoch_train_mse.push(epoch_loss / batches as f64);
    }

    let (train_in, train_lab) = select(&train_idx);
    let report = TrainingReport {
        train_mse: net.mse(&train_in, &train_lab),
        val_mse: if n_val > 0 {
            net.mse(&val_in, &val_lab)
        } else {
            net.mse(&train_in, &train_lab)
        },
        epoch_train_mse,
    };
    Ok((net, report))
}

fn shuffle<R: Rng>(indices: &mut [usize], rng: &mut R) {
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}
