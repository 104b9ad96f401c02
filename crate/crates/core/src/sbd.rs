//! Learned safety-boundary detector.
//!
//! A fully connected network maps a planar position to the nearest boundary
//! point on each obstacle in a fixed map. Inputs and targets are normalized
//! to [-1, 1] per axis over the map extent; hidden layers use tanh, the
//! output layer is linear. Hidden widths shrink linearly from the first
//! width down toward the output size.

use crate::geometry::{nearest_point_exact, ObstacleMap, Point};
use ndarray::{Array1, Array2, Axis, s};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SbdError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("dataset shape mismatch: {0}")]
    Dataset(String),
    #[error("unsupported model version {0}, expected 1")]
    Version(u32),
    #[error("model file inconsistent: {0}")]
    Corrupt(String),
    #[error("rejection sampling exhausted after {0} draws")]
    SamplingExhausted(usize),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-axis affine map between physical coordinates and [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Normalization {
    pub fn from_extent(extent: &crate::geometry::Extent) -> Self {
        Self {
            x_min: extent.x_min,
            x_max: extent.x_max,
            y_min: extent.y_min,
            y_max: extent.y_max,
        }
    }

    fn scale(&self) -> (f64, f64) {
        (self.x_max - self.x_min, self.y_max - self.y_min)
    }

    pub fn normalize(&self, x: f64, y: f64) -> (f64, f64) {
        let (sx, sy) = self.scale();
        (2.0 * (x - self.x_min) / sx - 1.0, 2.0 * (y - self.y_min) / sy - 1.0)
    }

    pub fn denormalize(&self, xn: f64, yn: f64) -> (f64, f64) {
        let (sx, sy) = self.scale();
        (self.x_min + (xn + 1.0) * sx / 2.0, self.y_min + (yn + 1.0) * sy / 2.0)
    }

    /// Normalize an (n, 2k) array of xy pairs in place.
    fn normalize_pairs(&self, data: &Array2<f64>) -> Array2<f64> {
        let mut out = data.clone();
        for mut row in out.rows_mut() {
            for j in (0..row.len()).step_by(2) {
                let (xn, yn) = self.normalize(row[j], row[j + 1]);
                row[j] = xn;
                row[j + 1] = yn;
            }
        }
        out
    }

    fn denormalize_pairs(&self, data: &Array2<f64>) -> Array2<f64> {
        let mut out = data.clone();
        for mut row in out.rows_mut() {
            for j in (0..row.len()).step_by(2) {
                let (x, y) = self.denormalize(row[j], row[j + 1]);
                row[j] = x;
                row[j + 1] = y;
            }
        }
        out
    }
}

/// Full layer-size chain: input width 2, `hidden_layers` tanh layers whose
/// widths decrease linearly from `first_width`, then a linear output layer
/// of width `2 * outputs_per_sample / 2` pairs, i.e. two coordinates per
/// predicted point.
pub fn layer_sizes(
    first_width: usize,
    hidden_layers: usize,
    points_out: usize,
) -> Result<Vec<usize>, SbdError> {
    let out = 2 * points_out;
    if hidden_layers == 0 || points_out == 0 {
        return Err(SbdError::Architecture(
            "need at least one hidden layer and one output point".into(),
        ));
    }
    if first_width <= out {
        return Err(SbdError::Architecture(format!(
            "first width {first_width} must exceed output size {out}"
        )));
    }
    let step = (first_width - out) / hidden_layers;
    let mut sizes = vec![2];
    for i in 0..hidden_layers {
        sizes.push(first_width - i * step);
    }
    sizes.push(out);
    Ok(sizes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    p: usize,
    layer_sizes: Vec<usize>,
    activation: String,
    normalization: Normalization,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    pub layer_sizes: Vec<usize>,
    /// weights[l] has shape (layer_sizes[l], layer_sizes[l+1]).
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub normalization: Normalization,
}

impl MlpModel {
    pub fn new<R: Rng>(
        first_width: usize,
        hidden_layers: usize,
        points_out: usize,
        normalization: Normalization,
        rng: &mut R,
    ) -> Result<Self, SbdError> {
        let sizes = layer_sizes(first_width, hidden_layers, points_out)?;
        Ok(Self::with_sizes(sizes, normalization, rng))
    }

    pub fn with_sizes<R: Rng>(
        layer_sizes: Vec<usize>,
        normalization: Normalization,
        rng: &mut R,
    ) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                rng.gen_range(-bound..bound)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Self { layer_sizes, weights, biases, normalization }
    }

    /// Predicted points per query.
    pub fn points_out(&self) -> usize {
        self.layer_sizes.last().copied().unwrap_or(0) / 2
    }

    /// Batched forward pass in normalized coordinates. `inputs` is (n, 2).
    pub fn forward(&self, inputs: &Array2<f64>) -> Array2<f64> {
        let last = self.weights.len() - 1;
        let mut a = inputs.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = a.dot(w);
            z += b;
            if l < last {
                z.mapv_inplace(f64::tanh);
            }
            a = z;
        }
        a
    }

    /// Physical-coordinate query: nearest point per obstacle, obstacle order.
    pub fn predict(&self, position: Point) -> Vec<Point> {
        let mut input = Array2::zeros((1, 2));
        let (xn, yn) = self.normalization.normalize(position.x, position.y);
        input[[0, 0]] = xn;
        input[[0, 1]] = yn;
        let out = self.forward(&input);
        let phys = self.normalization.denormalize_pairs(&out);
        (0..self.points_out())
            .map(|j| Point::new(phys[[0, 2 * j]], phys[[0, 2 * j + 1]]))
            .collect()
    }

    /// Mean loss over the batch and gradients of every parameter, all in
    /// normalized coordinates. Loss per sample is the squared error averaged
    /// over predicted points; the batch loss averages over samples.
    pub fn loss_and_gradients(
        &self,
        inputs: &Array2<f64>,
        targets: &Array2<f64>,
    ) -> (f64, Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let batch = inputs.nrows() as f64;
        let p = self.points_out() as f64;
        let last = self.weights.len() - 1;

        let mut activations = vec![inputs.clone()];
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = activations[l].dot(w);
            z += b;
            if l < last {
                z.mapv_inplace(f64::tanh);
            }
            activations.push(z);
        }
        let pred = &activations[last + 1];
        let diff = pred - targets;
        let loss = diff.mapv(|v| v * v).sum() / (batch * p);

        let mut grad_w = vec![Array2::zeros((0, 0)); self.weights.len()];
        let mut grad_b = vec![Array1::zeros(0); self.biases.len()];
        let mut delta = diff * (2.0 / (batch * p));
        for l in (0..self.weights.len()).rev() {
            grad_w[l] = activations[l].t().dot(&delta);
            grad_b[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l].t());
                // tanh'(z) = 1 - tanh(z)^2, and activations[l] stores tanh(z).
                back.zip_mut_with(&activations[l], |d, a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        (loss, grad_w, grad_b)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SbdError> {
        let file = ModelFile {
            version: 1,
            p: self.points_out(),
            layer_sizes: self.layer_sizes.clone(),
            activation: "tanh".into(),
            normalization: self.normalization,
            weights: self
                .weights
                .iter()
                .map(|w| w.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SbdError> {
        let file: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.version != 1 {
            return Err(SbdError::Version(file.version));
        }
        if file.activation != "tanh" {
            return Err(SbdError::Corrupt(format!(
                "unsupported activation {:?}",
                file.activation
            )));
        }
        let sizes = &file.layer_sizes;
        if sizes.len() < 3 || sizes[0] != 2 || *sizes.last().unwrap() != 2 * file.p {
            return Err(SbdError::Corrupt("layer size chain inconsistent".into()));
        }
        if file.weights.len() != sizes.len() - 1 || file.biases.len() != sizes.len() - 1 {
            return Err(SbdError::Corrupt("wrong number of layers".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, w) in file.weights.iter().enumerate() {
            let (rows, cols) = (sizes[l], sizes[l + 1]);
            if w.len() != rows || w.iter().any(|r| r.len() != cols) {
                return Err(SbdError::Corrupt(format!("weight {l} shape mismatch")));
            }
            let flat: Vec<f64> = w.iter().flatten().copied().collect();
            weights.push(
                Array2::from_shape_vec((rows, cols), flat)
                    .map_err(|e| SbdError::Corrupt(e.to_string()))?,
            );
            if file.biases[l].len() != cols {
                return Err(SbdError::Corrupt(format!("bias {l} shape mismatch")));
            }
            biases.push(Array1::from_vec(file.biases[l].clone()));
        }
        Ok(Self {
            layer_sizes: file.layer_sizes,
            weights,
            biases,
            normalization: file.normalization,
        })
    }
}

/// Physical-coordinate samples: `inputs` is (n, 2), `targets` is (n, 2p)
/// with the nearest boundary point of each obstacle in obstacle order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draw `n` query positions over the map extent and label each with the
/// exact nearest boundary point per obstacle. With `outside_only`, samples
/// inside obstacles are rejected; the cap bounds the total number of draws.
pub fn generate_dataset<R: Rng>(
    map: &ObstacleMap,
    n: usize,
    outside_only: bool,
    rng: &mut R,
) -> Result<Dataset, SbdError> {
    const REJECTION_CAP: usize = 1_000_000;
    let p = map.obstacles.len();
    if p == 0 {
        return Err(SbdError::Dataset("map has no obstacles".into()));
    }
    let mut inputs = Array2::zeros((n, 2));
    let mut targets = Array2::zeros((n, 2 * p));
    let ext = &map.extent;
    let mut draws = 0usize;
    let mut filled = 0usize;
    while filled < n {
        draws += 1;
        if draws > REJECTION_CAP.max(4 * n) {
            return Err(SbdError::SamplingExhausted(draws - 1));
        }
        let pos = Point::new(
            rng.gen_range(ext.x_min..=ext.x_max),
            rng.gen_range(ext.y_min..=ext.y_max),
        );
        if outside_only && !map.is_safe(&pos) {
            continue;
        }
        inputs[[filled, 0]] = pos.x;
        inputs[[filled, 1]] = pos.y;
        for (j, obstacle) in map.obstacles.iter().enumerate() {
            let (nearest, _) = nearest_point_exact(&pos, obstacle);
            targets[[filled, 2 * j]] = nearest.x;
            targets[[filled, 2 * j + 1]] = nearest.y;
        }
        filled += 1;
    }
    Ok(Dataset { inputs, targets })
}

/// Squared error averaged over predicted points, per sample, then averaged
/// over samples. Units follow the coordinates passed in.
pub fn mean_squared_error(pred: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let p = pred.ncols() as f64 / 2.0;
    let n = pred.nrows() as f64;
    (pred - targets).mapv(|v| v * v).sum() / (n * p)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            validation_fraction: 0.1,
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub best_validation_loss: f64,
}

struct AdamState {
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
    t: u64,
}

impl AdamState {
    fn new(model: &MlpModel) -> Self {
        Self {
            m_w: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            v_w: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            m_b: model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            v_b: model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            t: 0,
        }
    }

    fn step(
        &mut self,
        model: &mut MlpModel,
        grad_w: &[Array2<f64>],
        grad_b: &[Array1<f64>],
        lr: f64,
    ) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for l in 0..model.weights.len() {
            self.m_w[l].zip_mut_with(&grad_w[l], |m, g| *m = B1 * *m + (1.0 - B1) * g);
            self.v_w[l].zip_mut_with(&grad_w[l], |v, g| *v = B2 * *v + (1.0 - B2) * g * g);
            let (m, v) = (&self.m_w[l], &self.v_w[l]);
            ndarray::Zip::from(&mut model.weights[l])
                .and(m)
                .and(v)
                .for_each(|w, &m, &v| *w -= lr * (m / c1) / ((v / c2).sqrt() + EPS));
            self.m_b[l].zip_mut_with(&grad_b[l], |m, g| *m = B1 * *m + (1.0 - B1) * g);
            self.v_b[l].zip_mut_with(&grad_b[l], |v, g| *v = B2 * *v + (1.0 - B2) * g * g);
            let (m, v) = (&self.m_b[l], &self.v_b[l]);
            ndarray::Zip::from(&mut model.biases[l])
                .and(m)
                .and(v)
                .for_each(|b, &m, &v| *b -= lr * (m / c1) / ((v / c2).sqrt() + EPS));
        }
    }
}

/// Minibatch Adam on the normalized squared-error loss with early stopping
/// on a held-out validation split. The best validation weights are kept.
pub fn train(
    model: &mut MlpModel,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainReport, SbdError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let n = data.len();
    let out = 2 * model.points_out();
    if data.inputs.ncols() != 2 || data.targets.ncols() != out {
        return Err(SbdError::Dataset(format!(
            "expected (n, 2) inputs and (n, {out}) targets, got (n, {}) and (n, {})",
            data.inputs.ncols(),
            data.targets.ncols()
        )));
    }
    if n < 2 {
        return Err(SbdError::Dataset("need at least two samples".into()));
    }

    let inputs = model.normalization.normalize_pairs(&data.inputs);
    let targets = model.normalization.normalize_pairs(&data.targets);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * config.validation_fraction) as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let gather = |idx: &[usize], src: &Array2<f64>| {
        let mut out = Array2::zeros((idx.len(), src.ncols()));
        for (row, &i) in idx.iter().enumerate() {
            out.row_mut(row).assign(&src.row(i));
        }
        out
    };
    let val_x = gather(val_idx, &inputs);
    let val_t = gather(val_idx, &targets);
    let mut train_order = train_idx.to_vec();

    let mut adam = AdamState::new(model);
    let mut best_val = f64::INFINITY;
    let mut best_weights = (model.weights.clone(), model.biases.clone());
    let mut stale = 0usize;
    let mut last_train_loss = f64::INFINITY;
    let mut epochs_run = 0usize;

    for _ in 0..config.max_epochs {
        epochs_run += 1;
        train_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in train_order.chunks(config.batch_size.max(1)) {
            let bx = gather(chunk, &inputs);
            let bt = gather(chunk, &targets);
            let (loss, gw, gb) = model.loss_and_gradients(&bx, &bt);
            adam.step(model, &gw, &gb, config.learning_rate);
            epoch_loss += loss;
            batches += 1.0;
        }
        last_train_loss = epoch_loss / batches;

        let val_loss = mean_squared_error(&model.forward(&val_x), &val_t);
        if val_loss < best_val - 1e-12 {
            best_val = val_loss;
            best_weights = (model.weights.clone(), model.biases.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    model.weights = best_weights.0;
    model.biases = best_weights.1;
    Ok(TrainReport {
        epochs_run,
        final_train_loss: last_train_loss,
        best_validation_loss: best_val,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct EvalReport {
    /// Squared error averaged over points and samples, physical units.
    pub mean_squared_error: f64,
    /// Worst per-sample squared error, physical units.
    pub max_squared_error: f64,
}

/// Physical-unit accuracy of the model on a labeled dataset.
pub fn evaluate(model: &MlpModel, data: &Dataset) -> EvalReport {
    let inputs = model.normalization.normalize_pairs(&data.inputs);
    let pred_norm = model.forward(&inputs);
    let pred = model.normalization.denormalize_pairs(&pred_norm);
    let p = model.points_out() as f64;
    let mut mean = 0.0;
    let mut worst: f64 = 0.0;
    for i in 0..data.len() {
        let d = &pred.slice(s![i, ..]) - &data.targets.slice(s![i, ..]);
        let per_sample = d.mapv(|v| v * v).sum() / p;
        mean += per_sample;
        worst = worst.max(per_sample);
    }
    EvalReport {
        mean_squared_error: mean / data.len() as f64,
        max_squared_error: worst,
    }
}
