//! The 1-D residual CNN that classifies trace windows as CO start vs rest.
//!
//! Architecture: a conv block (conv -> batch norm -> relu), a residual
//! block at the same width, a widening residual block with a 1x1-conv
//! projection shortcut, then global average pooling and a two-layer head.
//! Class index 0 means "not a CO start", class 1 means "CO start"
//! (matching [`ClassLabel`]); the locator consumes the raw class-1 logit.
//!
//! Training is plain Adam on softmax cross entropy with per-epoch
//! reshuffling from a seeded substream. Validation error is tracked per
//! epoch and the parameters with the lowest validation error win (earlier
//! epoch on ties). Batch norm keeps running statistics updated with a
//! fixed momentum for inference-mode forwards.

use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AdamConfig, ParamStore, Tape, Tensor, ValId};
use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::rng::{domains, substream};
use crate::trace::ClassLabel;

const MODEL_MAGIC: &[u8; 4] = b"SCNN";
const MODEL_VERSION: u16 = 1;
const MODEL_DTYPE_F32: u8 = 0;

/// Epsilon inside the batch norm denominator.
pub const BN_EPS: f64 = 1e-5;
/// Windows per forward pass in inference mode.
const EVAL_BATCH: usize = 64;
/// Output classes: not-start and start.
pub const CLASS_COUNT: usize = 2;

/// Names of the batch norm layers, in graph order. Running statistics are
/// stored and serialized in this order.
const BN_LAYERS: [&str; 5] = ["bn1", "res1.bn1", "res1.bn2", "res2.bn1", "res2.bn2"];

/// Architecture hyperparameters. [`ModelConfig::standard`] reproduces the
/// published network; only the window length varies per cipher profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input window length in samples.
    pub window_len: usize,
    /// Convolution kernel width (even widths pad one short on the left).
    pub kernel_size: usize,
    /// Channels in the stem conv block and the first residual block.
    pub filters_stem: usize,
    /// Channels in the widening residual block.
    pub filters_wide: usize,
    /// Hidden units in the classifier head.
    pub fc_hidden: usize,
}

impl ModelConfig {
    /// The standard architecture: kernel 64, widths 16 and 32, 32 hidden
    /// units, two output classes.
    pub fn standard(window_len: usize) -> Self {
        ModelConfig {
            window_len,
            kernel_size: 64,
            filters_stem: 16,
            filters_wide: 32,
            fc_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("window_len", self.window_len, 1 << 24),
            ("kernel_size", self.kernel_size, 4096),
            ("filters_stem", self.filters_stem, 4096),
            ("filters_wide", self.filters_wide, 4096),
            ("fc_hidden", self.fc_hidden, 4096),
        ];
        for (name, v, max) in dims {
            if v == 0 || v > max {
                return Err(Error::Config(format!(
                    "model {name} must be in 1..={max}, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Running mean and variance for one batch norm layer.
#[derive(Debug, Clone)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnState {
    fn fresh(channels: usize) -> Self {
        BnState { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

enum InitKind {
    /// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
    KaimingFanIn,
    Zero,
    One,
}

struct LayoutEntry {
    name: String,
    shape: Vec<usize>,
    init: InitKind,
}

/// Trainable parameters in canonical order. Initialization draws and the
/// serialized file both follow this order exactly.
fn param_layout(cfg: &ModelConfig) -> Vec<LayoutEntry> {
    let (k, f1, f2, fc) = (cfg.kernel_size, cfg.filters_stem, cfg.filters_wide, cfg.fc_hidden);
    let mut entries = Vec::new();
    weight_params(&mut entries, "conv1", vec![f1, 1, k]);
    bn_params(&mut entries, "bn1", f1);
    weight_params(&mut entries, "res1.conv1", vec![f1, f1, k]);
    bn_params(&mut entries, "res1.bn1", f1);
    weight_params(&mut entries, "res1.conv2", vec![f1, f1, k]);
    bn_params(&mut entries, "res1.bn2", f1);
    weight_params(&mut entries, "res2.conv1", vec![f2, f1, k]);
    bn_params(&mut entries, "res2.bn1", f2);
    weight_params(&mut entries, "res2.conv2", vec![f2, f2, k]);
    bn_params(&mut entries, "res2.bn2", f2);
    weight_params(&mut entries, "res2.proj", vec![f2, f1, 1]);
    weight_params(&mut entries, "fc1", vec![fc, f2]);
    weight_params(&mut entries, "fc2", vec![CLASS_COUNT, fc]);
    entries
}

/// Pushes a Kaiming-initialized weight and its zero bias.
fn weight_params(entries: &mut Vec<LayoutEntry>, name: &str, shape: Vec<usize>) {
    entries.push(LayoutEntry {
        name: format!("{name}.w"),
        shape: shape.clone(),
        init: InitKind::KaimingFanIn,
    });
    entries.push(LayoutEntry {
        name: format!("{name}.b"),
        shape: vec![shape[0]],
        init: InitKind::Zero,
    });
}

fn bn_params(entries: &mut Vec<LayoutEntry>, layer: &str, channels: usize) {
    entries.push(LayoutEntry {
        name: format!("{layer}.gamma"),
        shape: vec![channels],
        init: InitKind::One,
    });
    entries.push(LayoutEntry {
        name: format!("{layer}.beta"),
        shape: vec![channels],
        init: InitKind::Zero,
    });
}

/// Channel counts of the batch norm layers, parallel to [`BN_LAYERS`].
fn bn_channels(cfg: &ModelConfig) -> [usize; 5] {
    let (f1, f2) = (cfg.filters_stem, cfg.filters_wide);
    [f1, f1, f1, f2, f2]
}

/// Parameter indices (into the canonical order) of each batch norm layer's
/// gamma; beta follows immediately after.
const BN_GAMMA_IDX: [usize; 5] = [2, 6, 10, 14, 18];

/// Per-epoch summary recorded during training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy loss over the epoch's batches.
    pub train_loss: f64,
    /// Misclassification rate on the validation split.
    pub val_error: f64,
}

/// Outcome of [`Model::train`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    /// Epoch whose parameters the model kept (lowest validation error,
    /// earlier epoch on ties).
    pub best_epoch: usize,
    pub best_val_error: f64,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Weight of the batch statistics in the running-stat update.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Two epochs of Adam at 1e-3 with batches of 64.
    pub fn standard(seed: u64) -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 64,
            adam: AdamConfig::default(),
            bn_momentum: 0.1,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("training needs at least one epoch".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!(
                "bn_momentum must be in (0, 1], got {}",
                self.bn_momentum
            )));
        }
        Ok(())
    }
}

/// Borrowed training and validation windows. Window values are raw trace
/// samples; the model standardizes with `norm` internally and keeps those
/// constants for later inference.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub window_len: usize,
    /// Row-major `[count][window_len]` training windows.
    pub train_windows: &'a [f64],
    pub train_labels: &'a [u8],
    pub val_windows: &'a [f64],
    pub val_labels: &'a [u8],
    pub norm: NormStats,
}

impl TrainData<'_> {
    fn validate(&self) -> Result<()> {
        self.norm.validate()?;
        for (split, windows, labels) in [
            ("train", self.train_windows, self.train_labels),
            ("val", self.val_windows, self.val_labels),
        ] {
            if windows.len() != labels.len() * self.window_len {
                return Err(Error::Shape(format!(
                    "{split} split: {} samples do not form {} windows of length {}",
                    windows.len(),
                    labels.len(),
                    self.window_len
                )));
            }
            if let Some(bad) = labels.iter().find(|&&l| l as usize >= CLASS_COUNT) {
                return Err(Error::Config(format!(
                    "{split} split contains label {bad}, valid labels are 0 and 1"
                )));
            }
        }
        if self.train_labels.len() < 2 {
            return Err(Error::Config(format!(
                "training needs at least 2 windows, got {}",
                self.train_labels.len()
            )));
        }
        if self.val_labels.is_empty() {
            return Err(Error::Config("validation split is empty".into()));
        }
        Ok(())
    }
}

/// Prediction counts indexed as `counts[predicted][actual]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 2]; 2],
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct = self.counts[0][0] + self.counts[1][1];
        if self.total() == 0 { 0.0 } else { correct as f64 / self.total() as f64 }
    }

    pub fn error_rate(&self) -> f64 {
        1.0 - self.accuracy()
    }

    /// Percentage of windows whose actual class is `actual` that were
    /// predicted as `predicted` (columns sum to 100).
    pub fn percent_of_actual(&self, predicted: usize, actual: usize) -> f64 {
        let col: usize = self.counts[0][actual] + self.counts[1][actual];
        if col == 0 {
            0.0
        } else {
            100.0 * self.counts[predicted][actual] as f64 / col as f64
        }
    }
}

/// Intermediate handles from one forward construction.
struct GraphEnd {
    logits: ValId,
    param_ids: Vec<ValId>,
    /// Batch statistics per BN layer (training mode only), parallel to
    /// [`BN_LAYERS`]: (mean, unbiased variance).
    batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// A residual CNN classifier with its standardization constants and batch
/// norm running statistics.
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    bn_stats: Vec<BnState>,
    norm: NormStats,
}

impl Model {
    /// Fresh model with Kaiming-uniform weight init drawn from the
    /// model-init substream of `seed`; biases zero, batch norm at identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = substream(seed, domains::MODEL_INIT, 0);
        let mut params = ParamStore::new();
        for entry in param_layout(&config) {
            let numel: usize = entry.shape.iter().product();
            let data = match entry.init {
                InitKind::KaimingFanIn => {
                    let fan_in: usize = entry.shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                InitKind::Zero => vec![0.0; numel],
                InitKind::One => vec![1.0; numel],
            };
            params.add(entry.name, Tensor::from_vec(&entry.shape, data)?)?;
        }
        let bn_stats = bn_channels(&config).iter().map(|&c| BnState::fresh(c)).collect();
        Ok(Model { config, params, bn_stats, norm: NormStats::identity() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn window_len(&self) -> usize {
        self.config.window_len
    }

    pub fn norm(&self) -> NormStats {
        self.norm
    }

    /// Total trainable parameter count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Builds the forward graph over an input batch already shaped
    /// `[B, 1, N]` and standardized.
    fn build_graph(&self, tape: &mut Tape, x: Tensor, train: bool) -> Result<GraphEnd> {
        let ids: Vec<ValId> = {
            let mut v = Vec::with_capacity(self.params.len());
            for p in self.params.iter() {
                v.push(tape.leaf(p.value.clone())?);
            }
            v
        };
        let x = tape.leaf(x)?;
        let mut stats = Vec::new();

        let bn = |tape: &mut Tape,
                      x: ValId,
                      layer: usize,
                      stats: &mut Vec<(Vec<f64>, Vec<f64>)>|
         -> Result<ValId> {
            let gamma = ids[BN_GAMMA_IDX[layer]];
            let beta = ids[BN_GAMMA_IDX[layer] + 1];
            if train {
                let (y, mean, var) = tape.batchnorm_train(x, gamma, beta, BN_EPS)?;
                stats.push((mean, var));
                Ok(y)
            } else {
                let running = &self.bn_stats[layer];
                tape.batchnorm_eval(x, gamma, beta, &running.mean, &running.var, BN_EPS)
            }
        };

        // Stem conv block.
        let h = tape.conv1d(x, ids[0], ids[1])?;
        let h = bn(tape, h, 0, &mut stats)?;
        let h = tape.relu(h)?;

        // Residual block at stem width with identity shortcut.
        let a = tape.conv1d(h, ids[4], ids[5])?;
        let a = bn(tape, a, 1, &mut stats)?;
        let a = tape.relu(a)?;
        let a = tape.conv1d(a, ids[8], ids[9])?;
        let a = bn(tape, a, 2, &mut stats)?;
        let a = tape.relu(a)?;
        let r1 = tape.add(a, h)?;

        // Widening residual block with a 1x1-conv projection shortcut.
        let b = tape.conv1d(r1, ids[12], ids[13])?;
        let b = bn(tape, b, 3, &mut stats)?;
        let b = tape.relu(b)?;
        let b = tape.conv1d(b, ids[16], ids[17])?;
        let b = bn(tape, b, 4, &mut stats)?;
        let b = tape.relu(b)?;
        let shortcut = tape.conv1d(r1, ids[20], ids[21])?;
        let r2 = tape.add(b, shortcut)?;

        // Head.
        let pooled = tape.global_avg_pool(r2)?;
        let hidden = tape.affine(pooled, ids[22], ids[23])?;
        let hidden = tape.relu(hidden)?;
        let logits = tape.affine(hidden, ids[24], ids[25])?;

        Ok(GraphEnd { logits, param_ids: ids, batch_stats: stats })
    }

    /// Standardizes raw window samples and shapes them `[B, 1, N]`.
    fn window_batch(&self, flat: &[f64], count: usize, window_len: usize) -> Result<Tensor> {
        let data: Vec<f64> = flat.iter().map(|&v| self.norm.standardize(v)).collect();
        Tensor::from_vec(&[count, 1, window_len], data)
    }

    /// Trains in place and returns the per-epoch history. The parameters
    /// and running statistics left on the model are those of the best
    /// validation epoch, not necessarily the last.
    pub fn train(&mut self, data: &TrainData, cfg: &TrainConfig) -> Result<TrainReport> {
        if data.window_len != self.config.window_len {
            return Err(Error::Shape(format!(
                "data windows are {} long, model expects {}",
                data.window_len, self.config.window_len
            )));
        }
        data.validate()?;
        cfg.validate()?;
        self.norm = data.norm;

        let n = self.config.window_len;
        let n_train = data.train_labels.len();
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut best: Option<(f64, usize, Vec<Tensor>, Vec<BnState>)> = None;

        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..n_train).collect();
            let mut rng = substream(cfg.seed, domains::TRAIN_SHUFFLE, epoch as u64);
            for i in (1..n_train).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }

            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                if chunk.len() < 2 {
                    // Batch norm statistics are undefined on one sample;
                    // the leftover window waits for next epoch's shuffle.
                    continue;
                }
                let mut flat = Vec::with_capacity(chunk.len() * n);
                let mut targets = Vec::with_capacity(chunk.len() * CLASS_COUNT);
                for &i in chunk {
                    flat.extend_from_slice(&data.train_windows[i * n..(i + 1) * n]);
                    let label = ClassLabel::from_index(data.train_labels[i] as usize)?;
                    targets.extend_from_slice(&label.one_hot());
                }
                let x = self.window_batch(&flat, chunk.len(), n)?;
                let targets = Tensor::from_vec(&[chunk.len(), CLASS_COUNT], targets)?;

                let mut tape = Tape::new();
                let graph = self.build_graph(&mut tape, x, true)?;
                let probs = tape.softmax(graph.logits)?;
                let loss = tape.cross_entropy(probs, &targets)?;
                tape.backward(loss)?;

                let loss_val = tape.value(loss).item()?;
                if !loss_val.is_finite() {
                    return Err(Error::Numeric(format!(
                        "training loss diverged at epoch {epoch}"
                    )));
                }
                loss_sum += loss_val;
                batches += 1;

                for (i, id) in graph.param_ids.iter().enumerate() {
                    if let Some(grad) = tape.grad(*id) {
                        let grad = grad.clone();
                        self.params.get_mut(i).grad.add_assign(&grad)?;
                    }
                }
                self.params.adam_step(&cfg.adam);

                for (layer, (mean, var)) in graph.batch_stats.iter().enumerate() {
                    let state = &mut self.bn_stats[layer];
                    for c in 0..state.mean.len() {
                        state.mean[c] =
                            (1.0 - cfg.bn_momentum) * state.mean[c] + cfg.bn_momentum * mean[c];
                        state.var[c] =
                            (1.0 - cfg.bn_momentum) * state.var[c] + cfg.bn_momentum * var[c];
                    }
                }
            }
            if batches == 0 {
                return Err(Error::Config(
                    "no batch had the 2 samples batch norm needs; add data or shrink the batch size"
                        .into(),
                ));
            }

            let val_err = self
                .confusion(data.val_windows, data.val_labels)?
                .error_rate();
            history.push(EpochStats {
                epoch,
                train_loss: loss_sum / batches as f64,
                val_error: val_err,
            });

            let improved = match &best {
                None => true,
                Some((best_err, ..)) => val_err < *best_err,
            };
            if improved {
                let values = self.params.iter().map(|p| p.value.clone()).collect();
                best = Some((val_err, epoch, values, self.bn_stats.clone()));
            }
        }

        let (best_val_error, best_epoch, values, stats) =
            best.expect("at least one epoch ran");
        for (i, v) in values.into_iter().enumerate() {
            self.params.get_mut(i).value = v;
        }
        self.bn_stats = stats;
        Ok(TrainReport { history, best_epoch, best_val_error })
    }

    /// Class logits for raw windows laid out `[count][window_len]` at the
    /// model's training window length, evaluated in inference mode.
    /// Results are independent of how windows are batched internally.
    pub fn predict_logits(&self, windows: &[f64]) -> Result<Vec<[f64; 2]>> {
        self.predict_logits_len(windows, self.config.window_len)
    }

    /// Class logits for windows of an arbitrary length. The network is
    /// fully convolutional up to the pooling stage, so inference windows
    /// need not match the training window length.
    pub fn predict_logits_len(
        &self,
        windows: &[f64],
        window_len: usize,
    ) -> Result<Vec<[f64; 2]>> {
        if window_len == 0 {
            return Err(Error::Shape("inference windows must be non-empty".into()));
        }
        if windows.len() % window_len != 0 {
            return Err(Error::Shape(format!(
                "{} samples do not split into windows of {window_len}",
                windows.len()
            )));
        }
        let n = window_len;
        let count = windows.len() / n;
        let mut out = Vec::with_capacity(count);
        let mut offset = 0;
        while offset < count {
            let b = EVAL_BATCH.min(count - offset);
            let x = self.window_batch(&windows[offset * n..(offset + b) * n], b, n)?;
            let mut tape = Tape::new();
            let graph = self.build_graph(&mut tape, x, false)?;
            let logits = tape.value(graph.logits).data();
            for row in 0..b {
                out.push([logits[row * 2], logits[row * 2 + 1]]);
            }
            offset += b;
        }
        Ok(out)
    }

    /// Class probabilities (softmax over the logits).
    pub fn predict_probs(&self, windows: &[f64]) -> Result<Vec<[f64; 2]>> {
        Ok(self.predict_logits(windows)?.into_iter().map(softmax2).collect())
    }

    /// Hard labels by argmax (class 0 wins exact ties).
    pub fn classify(&self, windows: &[f64]) -> Result<Vec<ClassLabel>> {
        Ok(self
            .predict_logits(windows)?
            .into_iter()
            .map(|l| if l[1] > l[0] { ClassLabel::CoStart } else { ClassLabel::NotStart })
            .collect())
    }

    /// Confusion counts of predictions against reference labels.
    pub fn confusion(&self, windows: &[f64], labels: &[u8]) -> Result<ConfusionMatrix> {
        let preds = self.classify(windows)?;
        if preds.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} windows but {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut counts = [[0usize; 2]; 2];
        for (pred, &label) in preds.iter().zip(labels) {
            let actual = ClassLabel::from_index(label as usize)?;
            counts[pred.index()][actual.index()] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    /// Serializes the model: header, config, standardization constants,
    /// then every parameter and running statistic as named f32 blocks in
    /// canonical order. Values are narrowed to f32 once on the way out;
    /// save -> load -> save reproduces the file byte for byte.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&[MODEL_DTYPE_F32, 0])?;
        for dim in [
            self.config.window_len,
            self.config.kernel_size,
            self.config.filters_stem,
            self.config.filters_wide,
            self.config.fc_hidden,
        ] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        w.write_all(&self.norm.mean.to_le_bytes())?;
        w.write_all(&self.norm.std.to_le_bytes())?;

        let entry_count = self.params.len() + 2 * BN_LAYERS.len();
        w.write_all(&(entry_count as u64).to_le_bytes())?;
        for p in self.params.iter() {
            write_entry(&mut w, &p.name, p.value.shape(), p.value.data())?;
        }
        for (layer, state) in BN_LAYERS.iter().zip(&self.bn_stats) {
            write_entry(&mut w, &format!("{layer}.running_mean"), &[state.mean.len()], &state.mean)?;
            write_entry(&mut w, &format!("{layer}.running_var"), &[state.var.len()], &state.var)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a model saved by [`Model::save`], validating the header and
    /// the exact name, order, and shape of every block.
    pub fn load(path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };

        let magic = r.take(4)?;
        if magic != MODEL_MAGIC {
            return Err(Error::Format(format!(
                "bad model magic {magic:02x?}, expected {MODEL_MAGIC:02x?}"
            )));
        }
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {version}, this build reads {MODEL_VERSION}"
            )));
        }
        let dtype = r.u8()?;
        let _pad = r.u8()?;
        if dtype != MODEL_DTYPE_F32 {
            return Err(Error::Format(format!("unsupported model dtype {dtype}")));
        }
        let config = ModelConfig {
            window_len: r.u64()? as usize,
            kernel_size: r.u64()? as usize,
            filters_stem: r.u64()? as usize,
            filters_wide: r.u64()? as usize,
            fc_hidden: r.u64()? as usize,
        };
        config.validate()?;
        let norm = NormStats { mean: r.f64()?, std: r.f64()? };
        norm.validate()?;

        let layout = param_layout(&config);
        let mut expected: Vec<(String, Vec<usize>)> =
            layout.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
        for (layer, &c) in BN_LAYERS.iter().zip(&bn_channels(&config)) {
            expected.push((format!("{layer}.running_mean"), vec![c]));
            expected.push((format!("{layer}.running_var"), vec![c]));
        }
        let entry_count = r.u64()? as usize;
        if entry_count != expected.len() {
            return Err(Error::Format(format!(
                "model file holds {entry_count} blocks, expected {}",
                expected.len()
            )));
        }

        let mut params = ParamStore::new();
        let mut bn_stats: Vec<BnState> =
            bn_channels(&config).iter().map(|&c| BnState::fresh(c)).collect();
        for (i, (name, shape)) in expected.iter().enumerate() {
            let (got_name, got_shape, data) = read_entry(&mut r)?;
            if got_name != *name || got_shape != *shape {
                return Err(Error::Format(format!(
                    "block {i} is {got_name} {got_shape:?}, expected {name} {shape:?}"
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("block {name} holds non-finite values")));
            }
            if i < layout.len() {
                params.add(name.clone(), Tensor::from_vec(shape, data)?)?;
            } else {
                let stat_idx = i - layout.len();
                let state = &mut bn_stats[stat_idx / 2];
                if stat_idx % 2 == 0 {
                    state.mean = data;
                } else {
                    state.var = data;
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last block",
                bytes.len() - r.pos
            )));
        }
        Ok(Model { config, params, bn_stats, norm })
    }
}

/// Numerically stable two-class softmax.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

fn write_entry(
    w: &mut impl IoWrite,
    name: &str,
    shape: &[usize],
    data: &[f64],
) -> Result<()> {
    let name_bytes = name.as_bytes();
    if name_bytes.len() > u16::MAX as usize {
        return Err(Error::Format(format!("block name too long: {name}")));
    }
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_entry(r: &mut Reader) -> Result<(String, Vec<usize>, Vec<f64>)> {
    let name_len = r.u16()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Format("block name is not utf-8".into()))?;
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = r.take(numel * 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((name, shape, data))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "model file truncated: wanted {n} bytes at offset {}, file is {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("length checked")))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("length checked")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::GaussSource;

    fn tiny_config() -> ModelConfig {
        ModelConfig::standard(64)
    }

    #[test]
    fn standard_architecture_parameter_count() {
        let model = Model::new(ModelConfig::standard(100), 1).unwrap();
        // conv1 1040 + res1 convs 2*16400 + res2 convs 32800+65568
        // + projection 544 + bn affine 224 + head 1056+66.
        assert_eq!(model.param_count(), 134_098);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Model::new(tiny_config(), 7).unwrap();
        let b = Model::new(tiny_config(), 7).unwrap();
        let c = Model::new(tiny_config(), 8).unwrap();
        for i in 0..a.params.len() {
            assert_eq!(a.params.get(i).value.data(), b.params.get(i).value.data());
        }
        let differs = (0..a.params.len())
            .any(|i| a.params.get(i).value.data() != c.params.get(i).value.data());
        assert!(differs, "different seeds produced identical weights");
    }

    #[test]
    fn kaiming_bounds_respected() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let conv1 = model.params.by_name("conv1.w").unwrap();
        let bound = (6.0_f64 / 64.0).sqrt();
        assert!(conv1.value.data().iter().all(|v| v.abs() < bound));
        // Some spread: at least half the range is used.
        let max = conv1.value.data().iter().cloned().fold(0.0, f64::max);
        assert!(max > bound * 0.5, "max draw {max} suspiciously small");
        assert_eq!(model.params.by_name("conv1.b").unwrap().value.data(), vec![0.0; 16]);
        assert_eq!(model.params.by_name("bn1.gamma").unwrap().value.data(), vec![1.0; 16]);
    }

    #[test]
    fn predictions_are_batch_invariant() {
        let model = Model::new(tiny_config(), 5).unwrap();
        let n = model.window_len();
        let count = 70; // spills past one internal eval batch
        let mut rng = substream(11, 63, 0);
        let windows: Vec<f64> = (0..count * n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let batched = model.predict_logits(&windows).unwrap();
        assert_eq!(batched.len(), count);
        for (i, row) in batched.iter().enumerate() {
            let single = model.predict_logits(&windows[i * n..(i + 1) * n]).unwrap();
            assert_eq!(single[0], *row, "window {i} differs when batched");
        }
    }

    #[test]
    fn probs_sum_to_one() {
        let p = softmax2([3.0, -1.0]);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1]);
        let even = softmax2([0.5, 0.5]);
        assert_eq!(even[0], even[1]);
    }

    /// Separable toy task: class-1 windows carry a positive bump.
    fn toy_data(n: usize, count: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
        let mut gauss = GaussSource::new(substream(seed, 62, 0));
        let mut windows = Vec::with_capacity(count * n);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = (i % 2) as u8;
            for t in 0..n {
                let bump = if label == 1 && (20..44).contains(&t) { 3.0 } else { 0.0 };
                windows.push(bump + 0.5 * gauss.next_gauss());
            }
            labels.push(label);
        }
        (windows, labels)
    }

    #[test]
    fn learns_separable_toy_task() {
        let cfg = tiny_config();
        let (train_w, train_l) = toy_data(cfg.window_len, 96, 1);
        let (val_w, val_l) = toy_data(cfg.window_len, 32, 2);
        let data = TrainData {
            window_len: cfg.window_len,
            train_windows: &train_w,
            train_labels: &train_l,
            val_windows: &val_w,
            val_labels: &val_l,
            norm: NormStats { mean: 0.0, std: 1.0 },
        };
        let mut model = Model::new(cfg, 9).unwrap();
        let tcfg = TrainConfig {
            epochs: 4,
            batch_size: 16,
            adam: AdamConfig { lr: 5e-3, ..AdamConfig::default() },
            bn_momentum: 0.1,
            seed: 9,
        };
        let report = model.train(&data, &tcfg).unwrap();
        assert_eq!(report.history.len(), 4);
        assert!(
            report.best_val_error <= 0.1,
            "val error stayed at {}",
            report.best_val_error
        );
        // The kept parameters must reproduce the reported best error.
        let err = model.confusion(&val_w, &val_l).unwrap().error_rate();
        assert_eq!(err, report.best_val_error);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let cfg = tiny_config();
        let (train_w, train_l) = toy_data(cfg.window_len, 48, 3);
        let (val_w, val_l) = toy_data(cfg.window_len, 16, 4);
        let data = TrainData {
            window_len: cfg.window_len,
            train_windows: &train_w,
            train_labels: &train_l,
            val_windows: &val_w,
            val_labels: &val_l,
            norm: NormStats { mean: 0.0, std: 1.0 },
        };
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            adam: AdamConfig::default(),
            bn_momentum: 0.1,
            seed: 21,
        };
        let mut m1 = Model::new(cfg, 21).unwrap();
        let mut m2 = Model::new(cfg, 21).unwrap();
        let r1 = m1.train(&data, &tcfg).unwrap();
        let r2 = m2.train(&data, &tcfg).unwrap();
        assert_eq!(r1.best_epoch, r2.best_epoch);
        for i in 0..m1.params.len() {
            assert_eq!(
                m1.params.get(i).value.data(),
                m2.params.get(i).value.data(),
                "param {} diverged across identical runs",
                m1.params.get(i).name
            );
        }
    }

    #[test]
    fn single_leftover_window_is_skipped() {
        let cfg = tiny_config();
        // 17 windows with batch 16 leaves a 1-window tail that BN cannot use.
        let (train_w, train_l) = toy_data(cfg.window_len, 17, 5);
        let (val_w, val_l) = toy_data(cfg.window_len, 4, 6);
        let data = TrainData {
            window_len: cfg.window_len,
            train_windows: &train_w,
            train_labels: &train_l,
            val_windows: &val_w,
            val_labels: &val_l,
            norm: NormStats { mean: 0.0, std: 1.0 },
        };
        let mut model = Model::new(cfg, 1).unwrap();
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            adam: AdamConfig::default(),
            bn_momentum: 0.1,
            seed: 1,
        };
        model.train(&data, &tcfg).unwrap();
    }

    #[test]
    fn save_load_roundtrip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.scnn");
        let mut model = Model::new(tiny_config(), 13).unwrap();
        model.norm = NormStats { mean: 0.25, std: 2.0 };
        model.save(&path).unwrap();

        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.norm, model.norm);

        let n = model.window_len();
        let windows: Vec<f64> = (0..2 * n).map(|i| (i as f64 * 0.31).sin()).collect();
        let a = model.predict_logits(&windows).unwrap();
        let b = loaded.predict_logits(&windows).unwrap();
        for (x, y) in a.iter().zip(&b) {
            // One narrowing to f32 happened on save.
            assert!((x[0] - y[0]).abs() < 1e-4 && (x[1] - y[1]).abs() < 1e-4);
        }

        // A second save narrows nothing further: bytes are identical.
        let path2 = dir.path().join("model2.scnn");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        // And the reloaded model predicts identically to the first load.
        let again = Model::load(&path2).unwrap();
        assert_eq!(b, again.predict_logits(&windows).unwrap());
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.scnn");
        let model = Model::new(tiny_config(), 2).unwrap();
        model.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let bad_magic = {
            let mut b = good.clone();
            b[0] = b'X';
            b
        };
        let truncated = good[..good.len() - 3].to_vec();
        let trailing = {
            let mut b = good.clone();
            b.push(0);
            b
        };
        for (name, bytes) in
            [("magic", bad_magic), ("truncated", truncated), ("trailing", trailing)]
        {
            let p = dir.path().join(format!("{name}.scnn"));
            std::fs::write(&p, bytes).unwrap();
            assert!(Model::load(&p).is_err(), "{name} model file loaded anyway");
        }
    }

    #[test]
    fn confusion_matrix_percentages() {
        let cm = ConfusionMatrix { counts: [[8, 1], [2, 9]] };
        assert_eq!(cm.total(), 20);
        assert!((cm.accuracy() - 17.0 / 20.0).abs() < 1e-12);
        assert!((cm.percent_of_actual(0, 0) - 80.0).abs() < 1e-12);
        assert!((cm.percent_of_actual(1, 1) - 90.0).abs() < 1e-12);
        assert!((cm.percent_of_actual(0, 1) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn inference_accepts_other_window_lengths() {
        // Fully convolutional: a model trained on 64-sample windows still
        // scores 48- and 80-sample windows.
        let model = Model::new(tiny_config(), 17).unwrap();
        for n in [48usize, 64, 80] {
            let windows: Vec<f64> = (0..2 * n).map(|i| (i as f64 * 0.17).cos()).collect();
            let logits = model.predict_logits_len(&windows, n).unwrap();
            assert_eq!(logits.len(), 2);
            assert!(logits.iter().flatten().all(|v| v.is_finite()));
        }
        assert!(model.predict_logits_len(&[1.0; 10], 0).is_err());
        assert!(model.predict_logits_len(&[1.0; 10], 3).is_err());
    }

    #[test]
    fn frozen_forward_vector() {
        // Untrained model, fixed seed, fixed ramp input. Recorded from the
        // reference implementation of this forward pass; the tolerance
        // leaves room for alternative SIMD reduction orders.
        let model = Model::new(ModelConfig::standard(50), 42).unwrap();
        let window: Vec<f64> = (0..50).map(|i| (i as f64) / 10.0 - 2.0).collect();
        let logits = model.predict_logits(&window).unwrap();
        let expected = [-3.89931885893506891e0, 4.54017970342790811e0];
        for (got, want) in logits[0].iter().zip(&expected) {
            assert!(
                ((got - want) / want).abs() < 1e-9,
                "logit drifted: got {got}, recorded {want}"
            );
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = Model::new(tiny_config(), 1).unwrap();
        // Window length not matching the model.
        assert!(model.predict_logits(&[0.0; 63]).is_err());
        // Bad label value.
        let (w, _) = toy_data(64, 4, 7);
        assert!(model.confusion(&w, &[0, 1, 2, 0]).is_err());
        // Config dims out of range.
        assert!(ModelConfig { window_len: 0, ..tiny_config() }.validate().is_err());
    }
}
