//! The feed-forward surrogate: architecture, training, inference, metrics.
//!
//! Hidden layers use the rectifier, the output layer is linear. Training
//! runs in f64 on a single thread (bit-reproducible given a seed) with Adam
//! and a step-decay schedule; the finished weights are quantized to f32, the
//! precision used by batched inference. Inputs and the label are
//! standardized with statistics taken from the training split.

use super::data::{feature_count, fill_features, Dataset, Split};
use crate::error::{Error, Result};
use crate::grid::{Coalition, EntityCounts, OperatingConditions};
use crate::rng::{ns, ns_index, stream};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Inference batch size. Large enough to keep the matrix kernels saturated,
/// small enough that scratch buffers stay in cache-friendly territory.
const INFER_CHUNK: usize = 4096;

/// Training hyperparameters. The defaults are the intended configuration:
/// four rectifier layers of 128 units, 50 epochs of Adam at 5e-4 decaying by
/// 0.3 every 5 epochs, weight decay 1e-4, mini-batches of 1024.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplies the learning rate every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![128, 128, 128, 128],
            epochs: 50,
            batch_size: 1024,
            learning_rate: 5e-4,
            lr_decay: 0.3,
            decay_every: 5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

/// Loss curve entry for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Provenance and context carried beside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub counts: EntityCounts,
    /// Thermal emission rates, needed to rebuild feature rows at inference.
    pub betas: Vec<f64>,
    pub seed: u64,
    pub system_hash: String,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
}

/// A trained (or freshly initialized) surrogate.
///
/// `dims` runs input width, hidden widths, then 1. Weight matrices are
/// row-major `dims[l+1] x dims[l]`. Prediction is a pure function of the
/// inputs: same rows in, same bits out, regardless of batching.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub dims: Vec<usize>,
    pub weights: Vec<Vec<f32>>,
    pub biases: Vec<Vec<f32>>,
    pub in_mean: Vec<f32>,
    pub in_std: Vec<f32>,
    pub out_mean: f32,
    pub out_std: f32,
    pub meta: ModelMeta,
}

impl SurrogateModel {
    pub fn n_inputs(&self) -> usize {
        self.dims[0]
    }

    pub fn n_entities(&self) -> usize {
        self.meta.counts.total()
    }
}

// Row-major GEMM wrappers. Shapes are passed explicitly and checked; the
// unsafe blocks only assert what the checks established.

/// c (m x n) = alpha * a (m x k) * b (k x n) + beta * c
fn dgemm_nn(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c (m x n) = alpha * a (m x k) * b_t (n x k, used transposed) + beta * c
fn dgemm_nt(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b_t: &[f64], beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b_t.len(), n * k);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b_t.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c (m x n) = alpha * a_t (k x m, used transposed) * b (k x n) + beta * c
fn dgemm_tn(m: usize, k: usize, n: usize, alpha: f64, a_t: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert_eq!(a_t.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a_t.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// f32 twin of [`dgemm_nt`], the only shape inference needs.
fn sgemm_nt(m: usize, k: usize, n: usize, a: &[f32], b_t: &[f32], c: &mut [f32]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b_t.len(), n * k);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b_t.as_ptr(), 1, k as isize,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Forward pass over a batch in f64, returning the activations of every
/// layer; `acts[0]` is the input, `acts.last()` the raw output column.
pub(crate) fn forward_batch(
    dims: &[usize],
    weights: &[Vec<f64>],
    biases: &[Vec<f64>],
    input: &[f64],
    batch: usize,
) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(dims.len());
    acts.push(input.to_vec());
    for l in 0..dims.len() - 1 {
        let (d_in, d_out) = (dims[l], dims[l + 1]);
        let mut z = vec![0.0; batch * d_out];
        dgemm_nt(batch, d_in, d_out, 1.0, &acts[l], &weights[l], 0.0, &mut z);
        let last = l + 1 == dims.len() - 1;
        for r in 0..batch {
            for c in 0..d_out {
                let v = z[r * d_out + c] + biases[l][c];
                z[r * d_out + c] = if last { v } else { v.max(0.0) };
            }
        }
        acts.push(z);
    }
    acts
}

/// Mean-squared-error loss and its gradient with respect to the raw output.
pub(crate) fn mse_and_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let b = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        let e = pred[i] - target[i];
        loss += e * e;
        grad[i] = 2.0 * e / b;
    }
    (loss / b, grad)
}

/// Backpropagation through the activations of [`forward_batch`]. Returns
/// per-layer weight and bias gradients of the loss whose output-gradient is
/// `grad_out`. Weight decay is not included here; the optimizer adds it.
pub(crate) fn backward_batch(
    dims: &[usize],
    weights: &[Vec<f64>],
    acts: &[Vec<f64>],
    grad_out: Vec<f64>,
    batch: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let layers = dims.len() - 1;
    let mut grad_w: Vec<Vec<f64>> = (0..layers).map(|l| vec![0.0; dims[l + 1] * dims[l]]).collect();
    let mut grad_b: Vec<Vec<f64>> = (0..layers).map(|l| vec![0.0; dims[l + 1]]).collect();
    let mut delta = grad_out;
    for l in (0..layers).rev() {
        let (d_in, d_out) = (dims[l], dims[l + 1]);
        // dW = delta^T (d_out x batch) . a_{l} (batch x d_in)
        dgemm_tn(d_out, batch, d_in, 1.0, &delta, &acts[l], 0.0, &mut grad_w[l]);
        for r in 0..batch {
            for c in 0..d_out {
                grad_b[l][c] += delta[r * d_out + c];
            }
        }
        if l > 0 {
            let mut next = vec![0.0; batch * d_in];
            dgemm_nn(batch, d_out, d_in, 1.0, &delta, &weights[l], 0.0, &mut next);
            // Rectifier gate: the stored activation is zero exactly where
            // the unit was clamped.
            for (v, &a) in next.iter_mut().zip(&acts[l]) {
                if a <= 0.0 {
                    *v = 0.0;
                }
            }
            delta = next;
        }
    }
    (grad_w, grad_b)
}

/// He-style initialization: zero-mean normals with variance 2 / fan-in,
/// drawn from a per-layer counter stream via the Box-Muller transform.
fn init_layers(dims: &[usize], seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut weights = Vec::with_capacity(dims.len() - 1);
    let mut biases = Vec::with_capacity(dims.len() - 1);
    for l in 0..dims.len() - 1 {
        let (d_in, d_out) = (dims[l], dims[l + 1]);
        let mut rng = stream(seed, ns_index(ns::INIT, l as u64));
        let scale = (2.0 / d_in as f64).sqrt();
        let w = (0..d_in * d_out)
            .map(|_| {
                let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
                let u2: f64 = rng.random();
                scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        weights.push(w);
        biases.push(vec![0.0; d_out]);
    }
    (weights, biases)
}

struct AdamState {
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
    steps: u64,
}

impl AdamState {
    fn new(dims: &[usize]) -> Self {
        let zeros_w: Vec<Vec<f64>> = (0..dims.len() - 1)
            .map(|l| vec![0.0; dims[l + 1] * dims[l]])
            .collect();
        let zeros_b: Vec<Vec<f64>> = (0..dims.len() - 1).map(|l| vec![0.0; dims[l + 1]]).collect();
        AdamState {
            m_w: zeros_w.clone(),
            v_w: zeros_w,
            m_b: zeros_b.clone(),
            v_b: zeros_b,
            steps: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        cfg: &TrainConfig,
        lr: f64,
        weights: &mut [Vec<f64>],
        biases: &mut [Vec<f64>],
        grad_w: &[Vec<f64>],
        grad_b: &[Vec<f64>],
    ) {
        self.steps += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.steps as i32);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                let grad = g[i] + cfg.weight_decay * p[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad * grad;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        };
        for l in 0..weights.len() {
            update(&mut weights[l], &grad_w[l], &mut self.m_w[l], &mut self.v_w[l]);
            update(&mut biases[l], &grad_b[l], &mut self.m_b[l], &mut self.v_b[l]);
        }
    }
}

/// Mean and standard deviation per column; zero-variance columns get a unit
/// deviation so standardization stays a well-defined affine map.
fn column_stats(rows: &[f64], n_rows: usize, n_cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; n_cols];
    for r in 0..n_rows {
        for c in 0..n_cols {
            mean[c] += rows[r * n_cols + c];
        }
    }
    for m in &mut mean {
        *m /= n_rows as f64;
    }
    let mut var = vec![0.0; n_cols];
    for r in 0..n_rows {
        for c in 0..n_cols {
            let d = rows[r * n_cols + c] - mean[c];
            var[c] += d * d;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|&v| {
            let s = (v / n_rows as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// Trains a surrogate on the dataset's train split, tracking loss on the
/// validation split. Deterministic: the same dataset, config and seed yield
/// the same model bit for bit.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<SurrogateModel> {
    if config.hidden.iter().any(|&h| h == 0) {
        return Err(Error::Argument("hidden layer widths must be positive".into()));
    }
    if config.batch_size == 0 || config.decay_every == 0 {
        return Err(Error::Argument(
            "batch size and decay interval must be positive".into(),
        ));
    }
    if !(config.learning_rate > 0.0) || !(config.lr_decay > 0.0 && config.lr_decay <= 1.0) {
        return Err(Error::Argument(
            "learning rate must be positive and the decay factor in (0, 1]".into(),
        ));
    }
    let train_idx = dataset.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Argument("the dataset has no training rows".into()));
    }
    let val_idx = dataset.indices_of(Split::Val);
    let d = dataset.n_features();
    let n_train = train_idx.len();

    // Stage the splits once in f64.
    let gather = |idx: &[usize]| -> (Vec<f64>, Vec<f64>) {
        let mut rows = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            rows.extend(dataset.row(i).iter().map(|&v| f64::from(v)));
            labels.push(dataset.label(i));
        }
        (rows, labels)
    };
    let (mut x_train, y_train) = gather(&train_idx);
    let (mut x_val, y_val) = gather(&val_idx);

    let (in_mean, in_std) = column_stats(&x_train, n_train, d);
    let (label_mean, label_std) = {
        let mean = y_train.iter().sum::<f64>() / n_train as f64;
        let var = y_train.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n_train as f64;
        let std = var.sqrt();
        (mean, if std > 0.0 { std } else { 1.0 })
    };
    let standardize = |rows: &mut [f64]| {
        for r in 0..rows.len() / d {
            for c in 0..d {
                rows[r * d + c] = (rows[r * d + c] - in_mean[c]) / in_std[c];
            }
        }
    };
    standardize(&mut x_train);
    standardize(&mut x_val);
    let yn_train: Vec<f64> = y_train.iter().map(|y| (y - label_mean) / label_std).collect();
    let yn_val: Vec<f64> = y_val.iter().map(|y| (y - label_mean) / label_std).collect();

    let mut dims = Vec::with_capacity(config.hidden.len() + 2);
    dims.push(d);
    dims.extend_from_slice(&config.hidden);
    dims.push(1);

    let (mut weights, mut biases) = init_layers(&dims, config.seed);
    let mut adam = AdamState::new(&dims);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n_train).collect();

    let forward_loss = |weights: &[Vec<f64>], biases: &[Vec<f64>], x: &[f64], y: &[f64]| -> f64 {
        if y.is_empty() {
            return f64::NAN;
        }
        let mut sse = 0.0;
        for (chunk, ychunk) in x.chunks(INFER_CHUNK * d).zip(y.chunks(INFER_CHUNK)) {
            let b = ychunk.len();
            let acts = forward_batch(&dims, weights, biases, chunk, b);
            let out = acts.last().expect("at least one layer");
            for i in 0..b {
                let e = out[i] - ychunk[i];
                sse += e * e;
            }
        }
        sse / y.len() as f64
    };

    for epoch in 0..config.epochs {
        let lr = config.learning_rate * config.lr_decay.powi((epoch / config.decay_every) as i32);
        let mut rng = stream(config.seed, ns_index(ns::SHUFFLE, epoch as u64));
        for i in (1..n_train).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_sse = 0.0;
        let mut xb = Vec::new();
        let mut yb = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let b = chunk.len();
            xb.clear();
            yb.clear();
            for &r in chunk {
                xb.extend_from_slice(&x_train[r * d..(r + 1) * d]);
                yb.push(yn_train[r]);
            }
            let acts = forward_batch(&dims, &weights, &biases, &xb, b);
            let (loss, grad_out) = mse_and_grad(acts.last().expect("output layer"), &yb);
            epoch_sse += loss * b as f64;
            let (grad_w, grad_b) = backward_batch(&dims, &weights, &acts, grad_out, b);
            adam.step(config, lr, &mut weights, &mut biases, &grad_w, &grad_b);
        }
        let train_loss = epoch_sse / n_train as f64;
        if !train_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("training loss became {train_loss}; lower the learning rate"),
            });
        }
        let val_loss = forward_loss(&weights, &biases, &x_val, &yn_val);
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            val_loss: if val_loss.is_nan() { None } else { Some(val_loss) },
        });
    }

    Ok(SurrogateModel {
        dims,
        weights: weights
            .iter()
            .map(|w| w.iter().map(|&v| v as f32).collect())
            .collect(),
        biases: biases
            .iter()
            .map(|b| b.iter().map(|&v| v as f32).collect())
            .collect(),
        in_mean: in_mean.iter().map(|&v| v as f32).collect(),
        in_std: in_std.iter().map(|&v| v as f32).collect(),
        out_mean: label_mean as f32,
        out_std: label_std as f32,
        meta: ModelMeta {
            counts: dataset.meta.counts,
            betas: dataset.meta.betas.clone(),
            seed: config.seed,
            system_hash: dataset.meta.system_hash.clone(),
            config: config.clone(),
            history,
        },
    })
}

/// Runs the network over raw feature rows (concatenated, row-major) and
/// returns denormalized emissions, clamped at zero.
///
/// Batching never changes results: each row's arithmetic is independent of
/// what else is in the batch.
pub fn predict_features(model: &SurrogateModel, rows: &[f32]) -> Result<Vec<f64>> {
    let d = model.n_inputs();
    if d == 0 || rows.len() % d != 0 {
        return Err(Error::Argument(format!(
            "feature buffer of {} is not a whole number of rows of width {d}",
            rows.len()
        )));
    }
    let n_rows = rows.len() / d;
    let mut out = Vec::with_capacity(n_rows);
    let layers = model.dims.len() - 1;
    let mut cur = Vec::new();
    let mut next = Vec::new();
    for chunk in rows.chunks(INFER_CHUNK * d) {
        let b = chunk.len() / d;
        cur.clear();
        cur.extend_from_slice(chunk);
        for r in 0..b {
            for c in 0..d {
                cur[r * d + c] = (cur[r * d + c] - model.in_mean[c]) / model.in_std[c];
            }
        }
        for l in 0..layers {
            let (d_in, d_out) = (model.dims[l], model.dims[l + 1]);
            next.clear();
            next.resize(b * d_out, 0.0);
            sgemm_nt(b, d_in, d_out, &cur, &model.weights[l], &mut next);
            let last = l + 1 == layers;
            for r in 0..b {
                for c in 0..d_out {
                    let v = next[r * d_out + c] + model.biases[l][c];
                    next[r * d_out + c] = if last { v } else { v.max(0.0) };
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        for r in 0..b {
            let denorm = f64::from(model.out_mean) + f64::from(model.out_std) * f64::from(cur[r]);
            out.push(denorm.max(0.0));
        }
    }
    Ok(out)
}

/// Emissions predictions for many coalitions under one set of operating
/// conditions.
pub fn predict_batch(
    model: &SurrogateModel,
    cond: &OperatingConditions,
    coalitions: &[Coalition],
) -> Result<Vec<f64>> {
    let counts = &model.meta.counts;
    let n = counts.total();
    if cond.offers.len() != counts.thermal
        || cond.r_max.len() != counts.renewable
        || cond.d_max.len() != counts.load
    {
        return Err(Error::Argument(format!(
            "conditions with {}/{}/{} offers/renewables/loads do not fit a model over {}/{}/{}",
            cond.offers.len(),
            cond.r_max.len(),
            cond.d_max.len(),
            counts.thermal,
            counts.renewable,
            counts.load
        )));
    }
    if let Some(bad) = coalitions.iter().find(|s| s.n() != n) {
        return Err(Error::Argument(format!(
            "coalition over {} entities passed to a model over {n}",
            bad.n()
        )));
    }
    let d = feature_count(counts);
    debug_assert_eq!(d, model.n_inputs());
    let mut rows = vec![0.0f32; coalitions.len() * d];
    for (i, s) in coalitions.iter().enumerate() {
        fill_features(
            &mut rows[i * d..(i + 1) * d],
            &cond.offers,
            &model.meta.betas,
            &cond.r_max,
            &cond.d_max,
            s,
        );
    }
    predict_features(model, &rows)
}

/// Accuracy statistics of a model over one dataset split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurrogateMetrics {
    pub rmse: f64,
    /// Mean of (prediction - label); sign says which way the model leans.
    pub mbe: f64,
    pub r_squared: f64,
    /// Per-entity mean of (prediction - label) over rows whose coalition
    /// contains the entity; absent when the entity never appears.
    pub conditional_mbe: Vec<Option<f64>>,
    pub warnings: Vec<String>,
    pub n_rows: usize,
}

pub(crate) fn metrics_from_predictions(
    preds: &[f64],
    dataset: &Dataset,
    indices: &[usize],
    split: Split,
) -> SurrogateMetrics {
    let n = indices.len();
    let mut sum_e = 0.0;
    let mut sse = 0.0;
    let mut label_sum = 0.0;
    for (&i, &p) in indices.iter().zip(preds) {
        let e = p - dataset.label(i);
        sum_e += e;
        sse += e * e;
        label_sum += dataset.label(i);
    }
    let mbe = sum_e / n as f64;
    let rmse = (sse / n as f64).sqrt();
    // Cauchy-Schwarz: the mean error can never exceed the RMS error.
    assert!(
        mbe.abs() <= rmse + 1e-9 * (1.0 + rmse),
        "mean error {mbe} exceeds rms error {rmse}"
    );
    let label_mean = label_sum / n as f64;
    let sst: f64 = indices
        .iter()
        .map(|&i| (dataset.label(i) - label_mean).powi(2))
        .sum();
    let r_squared = if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };

    let n_entities = dataset.meta.counts.total();
    let mut cond_sum = vec![0.0; n_entities];
    let mut cond_count = vec![0usize; n_entities];
    for (&i, &p) in indices.iter().zip(preds) {
        let row = dataset.row(i);
        let e = p - dataset.label(i);
        for ent in 0..n_entities {
            if row[dataset.membership_column(ent)] > 0.5 {
                cond_sum[ent] += e;
                cond_count[ent] += 1;
            }
        }
    }
    let mut warnings = Vec::new();
    let conditional_mbe = (0..n_entities)
        .map(|ent| {
            if cond_count[ent] == 0 {
                warnings.push(format!(
                    "entity {ent} never appears in the {split} split; its conditional bias is undefined"
                ));
                None
            } else {
                Some(cond_sum[ent] / cond_count[ent] as f64)
            }
        })
        .collect();
    SurrogateMetrics {
        rmse,
        mbe,
        r_squared,
        conditional_mbe,
        warnings,
        n_rows: n,
    }
}

/// Evaluates the model on one split: RMSE, mean bias, R-squared and the
/// per-entity conditional bias vector.
pub fn evaluate_metrics(
    model: &SurrogateModel,
    dataset: &Dataset,
    split: Split,
) -> Result<SurrogateMetrics> {
    let indices = dataset.indices_of(split);
    if indices.is_empty() {
        return Err(Error::Argument(format!("the {split} split is empty")));
    }
    let d = dataset.n_features();
    let mut rows = Vec::with_capacity(indices.len() * d);
    for &i in &indices {
        rows.extend_from_slice(dataset.row(i));
    }
    let preds = predict_features(model, &rows)?;
    Ok(metrics_from_predictions(&preds, dataset, &indices, split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::synthesize_system;
    use crate::surrogate::data::{generate_dataset, DatasetMeta};
    use crate::surrogate::Dataset;

    /// Synthetic dataset with labels linear in the features.
    fn linear_dataset(n_samples: usize, n_features: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed, 0);
        let w: Vec<f64> = (0..n_features).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut features = Vec::with_capacity(n_samples * n_features);
        let mut labels = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let row: Vec<f64> = (0..n_features).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: f64 = row.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + 3.0;
            features.extend(row.iter().map(|&v| v as f32));
            labels.push(y as f32);
        }
        let counts = EntityCounts {
            thermal: 0,
            renewable: 0,
            load: n_features / 2,
        };
        Dataset::from_parts(
            DatasetMeta {
                counts,
                betas: vec![],
                seed,
                system_hash: "synthetic".into(),
                voll: 0.0,
            },
            n_features,
            features,
            labels,
        )
        .unwrap()
    }

    /// Small batches so even modest test datasets give the optimizer enough
    /// steps before the schedule decays the learning rate away.
    fn quick_config(hidden: Vec<usize>, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            hidden,
            epochs,
            batch_size: 64,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dims = vec![3, 4, 1];
        let (mut weights, biases) = init_layers(&dims, 7);
        let mut rng = stream(11, 0);
        let batch = 5;
        let x: Vec<f64> = (0..batch * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..batch).map(|_| rng.random_range(-1.0..1.0)).collect();

        let loss_of = |weights: &[Vec<f64>], biases: &[Vec<f64>]| -> f64 {
            let acts = forward_batch(&dims, weights, biases, &x, batch);
            mse_and_grad(acts.last().unwrap(), &y).0
        };
        let acts = forward_batch(&dims, &weights, &biases, &x, batch);
        let (_, grad_out) = mse_and_grad(acts.last().unwrap(), &y);
        let (grad_w, grad_b) = backward_batch(&dims, &weights, &acts, grad_out, batch);

        let h = 1e-5;
        for l in 0..2 {
            for i in 0..weights[l].len() {
                let keep = weights[l][i];
                weights[l][i] = keep + h;
                let up = loss_of(&weights, &biases);
                weights[l][i] = keep - h;
                let down = loss_of(&weights, &biases);
                weights[l][i] = keep;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grad_w[l][i];
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (numeric - analytic).abs() / denom <= 1e-4,
                    "weight[{l}][{i}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
        let mut biases = biases;
        for l in 0..2 {
            for i in 0..biases[l].len() {
                let keep = biases[l][i];
                biases[l][i] = keep + h;
                let up = loss_of(&weights, &biases);
                biases[l][i] = keep - h;
                let down = loss_of(&weights, &biases);
                biases[l][i] = keep;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grad_b[l][i];
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (numeric - analytic).abs() / denom <= 1e-4,
                    "bias[{l}][{i}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn learns_a_linear_function() {
        let ds = linear_dataset(10_000, 6, 3);
        let cfg = TrainConfig {
            learning_rate: 2e-3,
            decay_every: 20,
            weight_decay: 0.0,
            ..quick_config(vec![64, 64], 80, 1)
        };
        let model = train(&ds, &cfg).unwrap();
        let history = &model.meta.history;
        assert_eq!(history.len(), 80);
        let val = evaluate_metrics(&model, &ds, Split::Val).unwrap();
        assert!(val.r_squared >= 0.999, "validation r2 {}", val.r_squared);

        // The loss curve may wiggle epoch to epoch, but it must collapse
        // overall: the last ten epochs average far below the first ten.
        let mean = |recs: &[EpochRecord]| {
            recs.iter().map(|r| r.train_loss).sum::<f64>() / recs.len() as f64
        };
        let head = mean(&history[..10]);
        let tail = mean(&history[history.len() - 10..]);
        assert!(
            tail <= 0.05 * head,
            "loss failed to collapse: first epochs {head:.3e}, last epochs {tail:.3e}"
        );

        // Nearly every training row sits within three RMSEs of its label.
        let train_metrics = evaluate_metrics(&model, &ds, Split::Train).unwrap();
        let idx = ds.indices_of(Split::Train);
        let mut rows = Vec::new();
        for &i in &idx {
            rows.extend_from_slice(ds.row(i));
        }
        let preds = predict_features(&model, &rows).unwrap();
        let within = idx
            .iter()
            .zip(&preds)
            .filter(|(&i, &p)| (p - ds.label(i)).abs() <= 3.0 * train_metrics.rmse)
            .count();
        assert!(
            within as f64 >= 0.99 * idx.len() as f64,
            "{within} of {} rows within 3 rmse",
            idx.len()
        );
    }

    #[test]
    fn zero_epochs_returns_an_initialized_model() {
        let ds = linear_dataset(2_000, 5, 9);
        let model = train(&ds, &quick_config(vec![32, 32], 0, 2)).unwrap();
        assert!(model.meta.history.is_empty());
        let test = evaluate_metrics(&model, &ds, Split::Test).unwrap();
        assert!(test.r_squared < 0.5, "untrained r2 {}", test.r_squared);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = linear_dataset(1_000, 4, 5);
        let cfg = quick_config(vec![16, 16], 3, 8);
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        let c = train(&ds, &quick_config(vec![16, 16], 3, 9)).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn divergent_training_reports_the_epoch() {
        let ds = linear_dataset(500, 4, 6);
        // One Adam step moves weights by about the learning rate, so this
        // overflows the forward pass within the first epoch.
        let cfg = TrainConfig {
            hidden: vec![16],
            epochs: 5,
            learning_rate: 1e200,
            ..TrainConfig::default()
        };
        match train(&ds, &cfg) {
            Err(Error::Training { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn batch_of_one_equals_batched_prediction() {
        let ds = linear_dataset(300, 5, 12);
        let model = train(&ds, &quick_config(vec![24, 24], 2, 3)).unwrap();
        let idx: Vec<usize> = (0..40).collect();
        let mut rows = Vec::new();
        for &i in &idx {
            rows.extend_from_slice(ds.row(i));
        }
        let batched = predict_features(&model, &rows).unwrap();
        for &i in &idx {
            let single = predict_features(&model, ds.row(i)).unwrap();
            assert_eq!(single.len(), 1);
            assert_eq!(
                single[0].to_bits(),
                batched[i].to_bits(),
                "row {i} differs between batch sizes"
            );
        }
    }

    #[test]
    fn perfect_predictions_give_perfect_metrics() {
        let ds = linear_dataset(200, 4, 2);
        let idx = ds.indices_of(Split::Val);
        let labels: Vec<f64> = idx.iter().map(|&i| ds.label(i)).collect();
        let m = metrics_from_predictions(&labels, &ds, &idx, Split::Val);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.mbe, 0.0);
        assert_eq!(m.r_squared, 1.0);
    }

    #[test]
    fn predicting_the_mean_gives_zero_r_squared() {
        let ds = linear_dataset(200, 4, 2);
        let idx = ds.indices_of(Split::Val);
        let mean = idx.iter().map(|&i| ds.label(i)).sum::<f64>() / idx.len() as f64;
        let m = metrics_from_predictions(&vec![mean; idx.len()], &ds, &idx, Split::Val);
        assert!(m.r_squared.abs() <= 1e-9, "r2 {}", m.r_squared);
        assert!(m.mbe.abs() <= 1e-9);
    }

    #[test]
    fn entities_absent_from_a_split_are_flagged() {
        // Hand-build a two-entity dataset where entity 1 never participates.
        let counts = EntityCounts {
            thermal: 1,
            renewable: 0,
            load: 1,
        };
        let d = feature_count(&counts); // offer, beta, d_max, s0, s1
        let n = 20;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            features.extend_from_slice(&[20.0, 1.0, 5.0, (i % 2) as f32, 0.0]);
            labels.push(i as f32);
        }
        let ds = Dataset::from_parts(
            DatasetMeta {
                counts,
                betas: vec![1.0],
                seed: 0,
                system_hash: "handmade".into(),
                voll: 0.0,
            },
            d,
            features,
            labels,
        )
        .unwrap();
        let idx: Vec<usize> = (0..n).collect();
        let preds: Vec<f64> = (0..n).map(|i| i as f64 + 1.0).collect();
        let m = metrics_from_predictions(&preds, &ds, &idx, Split::Train);
        assert!(m.conditional_mbe[0].is_some());
        assert!(m.conditional_mbe[1].is_none());
        assert_eq!(m.warnings.len(), 1);
        assert!(m.warnings[0].contains("entity 1"));
    }

    #[test]
    fn learns_dispatch_emissions_on_a_small_system() {
        let sys = synthesize_system(2, 1, 2, 3, 1).unwrap();
        let ds = generate_dataset(&sys, 5_000, 4).unwrap();
        let model = train(&ds, &quick_config(vec![64, 64], 30, 5)).unwrap();
        let test = evaluate_metrics(&model, &ds, Split::Test).unwrap();
        assert!(test.r_squared >= 0.9, "test r2 {}", test.r_squared);

        // An empty coalition emits nothing; the model must have learned that
        // to within a few RMSEs.
        let cond = OperatingConditions {
            t: 1,
            offers: sys.thermals().iter().map(|e| e.base_offer).collect(),
            r_max: sys.renewables().iter().map(|e| 0.5 * e.p_max).collect(),
            d_max: sys.loads().iter().map(|e| 0.8 * e.p_max).collect(),
            voll: ds.meta.voll,
        };
        let pred = predict_batch(&model, &cond, &[Coalition::empty(sys.n_entities())]).unwrap();
        assert!(
            pred[0].abs() <= 3.0 * test.rmse.max(1e-6),
            "empty coalition predicted {} with rmse {}",
            pred[0],
            test.rmse
        );

        // Predictions track labels on most training rows.
        let idx = ds.indices_of(Split::Train);
        let mut rows = Vec::new();
        for &i in &idx {
            rows.extend_from_slice(ds.row(i));
        }
        let preds = predict_features(&model, &rows).unwrap();
        let rmse = evaluate_metrics(&model, &ds, Split::Train).unwrap().rmse;
        let within = idx
            .iter()
            .zip(&preds)
            .filter(|(&i, &p)| (p - ds.label(i)).abs() <= 3.0 * rmse)
            .count();
        assert!(within as f64 >= 0.97 * idx.len() as f64);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let ds = linear_dataset(300, 5, 12);
        let model = train(&ds, &quick_config(vec![8], 1, 3)).unwrap();
        assert!(matches!(
            predict_features(&model, &[1.0, 2.0, 3.0]),
            Err(Error::Argument(_))
        ));
        let sys = synthesize_system(2, 1, 2, 3, 1).unwrap();
        let real = generate_dataset(&sys, 40, 0).unwrap();
        let real_model = train(&real, &quick_config(vec![8], 1, 3)).unwrap();
        let cond = OperatingConditions {
            t: 1,
            offers: vec![20.0], // one offer short
            r_max: vec![10.0],
            d_max: vec![5.0, 5.0],
            voll: 10_000.0,
        };
        assert!(matches!(
            predict_batch(&real_model, &cond, &[Coalition::empty(5)]),
            Err(Error::Argument(_))
        ));
    }
}
