//! Training machinery: the warmup-cosine schedule, a decoupled-weight-decay
//! adaptive-moment optimizer, synthetic band-structured data, the training
//! and evaluation loops, a finite-difference gradient checker, and the
//! ablation runner for causal order and band count.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{argmax, band_leaves, forward_on_tape, ModelConfig, ModelVars, ModelWeights};
use crate::pgm;
use crate::serialization::prepare_bands;
use crate::spectral::{frequency_index, idct2, Image, Spectrum};

/// Aborting threshold for the batch loss.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

// ---------------------------------------------------------------------------
// Schedule

/// Learning rate at `step` (0-based): linear warmup to `base_lr` over
/// `warmup_steps`, then a cosine decay that reaches exactly zero at
/// `total_steps`.
pub fn learning_rate(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    assert!(warmup_steps < total_steps, "warmup must end before training does");
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adaptive-moment optimizer with decoupled weight decay. Decay applies only
/// to the dense linear maps (projections, convolution kernel, classifier
/// head); norms, biases, embeddings, and state-space parameters are exempt.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    decays: Vec<bool>,
    steps: usize,
}

fn weight_decays(name: &str) -> bool {
    const DECAYED: [&str; 10] = [
        "stem_kernel",
        "proj_weight",
        "in_proj",
        "w_b",
        "w_c",
        "w_delta",
        "out_proj",
        "mlp_w1",
        "mlp_w2",
        "head_weight",
    ];
    DECAYED.iter().any(|suffix| name.ends_with(suffix))
}

impl AdamW {
    pub fn new(weights: &ModelWeights<f32>, weight_decay: f64) -> Self {
        let named = weights.named_tensors();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            first: named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            second: named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            decays: named.iter().map(|(name, _)| weight_decays(name)).collect(),
            steps: 0,
        }
    }

    /// One update over the full parameter list (registry order), given the
    /// matching gradient list. Decoupled decay multiplies the parameter by
    /// (1 - lr * wd) before the moment update, never touching the moments.
    pub fn step(&mut self, weights: &mut ModelWeights<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.steps += 1;
        let bias1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let mut named = weights.named_tensors_mut();
        assert_eq!(named.len(), grads.len(), "gradient list must cover every parameter");
        for (idx, (entry, grad)) in named.iter_mut().zip(grads).enumerate() {
            let (name, tensor) = entry;
            assert_eq!(tensor.shape, grad.shape, "gradient shape mismatch for {name}");
            let shrink = if self.decays[idx] { 1.0 - lr * self.weight_decay } else { 1.0 };
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            for ((p, &g), (mi, vi)) in
                tensor.data.iter_mut().zip(&grad.data).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi as f64 / bias1;
                let v_hat = *vi as f64 / bias2;
                let next = *p as f64 * shrink - lr * m_hat / (v_hat.sqrt() + self.eps);
                *p = next as f32;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetConfig {
    SyntheticBands { train_per_class: usize, test_per_class: usize },
    ImageFolder { train_dir: PathBuf, test_dir: PathBuf },
}

fn default_warmup_fraction() -> f64 {
    0.05
}

fn default_label_smoothing() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent on linear warmup.
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default = "default_label_smoothing")]
    pub label_smoothing: f64,
    pub seed: u64,
    /// Horizontal-flip augmentation on training samples.
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Stop once the epoch's training accuracy reaches this value.
    #[serde(default)]
    pub stop_at_train_accuracy: Option<f64>,
}

impl TrainConfig {
    /// Desk-scale defaults around a model config: synthetic data, ten epochs.
    pub fn desk_default(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            dataset: DatasetConfig::SyntheticBands { train_per_class: 64, test_per_class: 32 },
            epochs: 10,
            batch_size: 16,
            base_lr: 1e-3,
            weight_decay: 0.05,
            warmup_fraction: 0.05,
            label_smoothing: 0.1,
            seed: 0,
            augment: true,
            stop_at_train_accuracy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1".to_string()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be nonnegative".to_string()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction must lie in [0, 1)".to_string()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing must lie in [0, 1)".to_string()));
        }
        match &self.dataset {
            DatasetConfig::SyntheticBands { train_per_class, test_per_class } => {
                if *train_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::config("per-class sample counts must be positive".to_string()));
                }
            }
            DatasetConfig::ImageFolder { .. } => {}
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Data

/// One cached example: the decomposed, per-band downsampled images plus its
/// label. Caching the prepared bands keeps the spectral work out of the
/// training loop.
#[derive(Debug, Clone)]
pub struct Sample {
    pub bands: Vec<Image>,
    pub label: usize,
}

pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub classes: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent deterministic seed per (run seed, purpose tag, index).
fn stream_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_shl(32) ^ index))
}

/// Frequency range given to a class: the [0.05, 0.95] span of the frequency
/// index, split evenly so neighboring classes occupy neighboring annuli and
/// different classes peak in different cumulative bands.
fn class_annulus(class: usize, classes: usize) -> (f64, f64) {
    let width = 0.9 / classes as f64;
    let lo = 0.05 + width * class as f64;
    (lo, lo + width)
}

const MODES_PER_SAMPLE: usize = 12;
const PIXEL_NOISE: f64 = 0.02;

/// One synthetic example: a handful of random cosine modes whose frequency
/// indices fall inside the class annulus, rendered to pixels, plus white
/// noise, standardized to zero mean and unit variance.
pub fn synthetic_image(side: usize, classes: usize, class: usize, rng: &mut ChaCha8Rng) -> Image {
    assert!(class < classes, "class index out of range");
    let (lo, hi) = class_annulus(class, classes);
    let mut candidates = Vec::new();
    for u in 0..side {
        for v in 0..side {
            let f = frequency_index(u, v, side, side);
            if f >= lo && f < hi {
                candidates.push((u, v));
            }
        }
    }
    assert!(!candidates.is_empty(), "annulus [{lo}, {hi}) holds no modes at side {side}");

    let mut coeffs = vec![0.0; side * side];
    let picks = MODES_PER_SAMPLE.min(candidates.len());
    let chosen = rand::seq::index::sample(rng, candidates.len(), picks);
    for idx in chosen.iter() {
        let (u, v) = candidates[idx];
        let amplitude = rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        coeffs[u * side + v] = amplitude;
    }
    let spectrum = Spectrum { channels: 1, height: side, width: side, coeffs };
    let mut image = idct2(&spectrum).expect("synthetic spectrum is finite");
    for v in image.data.iter_mut() {
        *v += rng.gen_range(-PIXEL_NOISE..PIXEL_NOISE);
    }
    standardize(&mut image);
    image
}

/// Shift to zero mean and scale to unit variance (guarded for flat images).
fn standardize(image: &mut Image) {
    let n = image.data.len() as f64;
    let mean = image.data.iter().sum::<f64>() / n;
    let var = image.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = 1.0 / var.sqrt().max(1e-8);
    for v in image.data.iter_mut() {
        *v = (*v - mean) * scale;
    }
}

/// Mirror an image left-right.
pub fn flip_horizontal(image: &Image) -> Image {
    let mut out = image.clone();
    let (h, w) = (image.height, image.width);
    for c in 0..image.channels {
        let src = image.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[y * w + (w - 1 - x)];
            }
        }
    }
    out
}

fn synthetic_split(
    model: &ModelConfig,
    per_class: usize,
    seed: u64,
    tag: u64,
) -> Result<Vec<Sample>> {
    let side = model.image_side();
    let classes = model.num_classes;
    (0..per_class * classes)
        .into_par_iter()
        .map(|index| {
            let class = index % classes;
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, tag, index as u64));
            let image = synthetic_image(side, classes, class, &mut rng);
            let bands = prepare_bands(&image, &model.serialization)?;
            Ok(Sample { bands, label: class })
        })
        .collect()
}

fn folder_split(model: &ModelConfig, dir: &std::path::Path) -> Result<Vec<Sample>> {
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.len() != model.num_classes {
        return Err(Error::config(format!(
            "{} holds {} class directories but the model expects {}",
            dir.display(),
            class_dirs.len(),
            model.num_classes
        )));
    }
    let mut jobs = Vec::new();
    for (label, class_dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(class_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            jobs.push((file, label));
        }
    }
    jobs.into_par_iter()
        .map(|(file, label)| {
            let mut image = pgm::read_image(&file)?;
            standardize(&mut image);
            let bands = prepare_bands(&image, &model.serialization)?;
            Ok(Sample { bands, label })
        })
        .collect()
}

/// Materialize the train and test splits with bands precomputed.
pub fn load_dataset(model: &ModelConfig, dataset: &DatasetConfig, seed: u64) -> Result<Dataset> {
    let (train, test) = match dataset {
        DatasetConfig::SyntheticBands { train_per_class, test_per_class } => (
            synthetic_split(model, *train_per_class, seed, 1)?,
            synthetic_split(model, *test_per_class, seed, 2)?,
        ),
        DatasetConfig::ImageFolder { train_dir, test_dir } => {
            (folder_split(model, train_dir)?, folder_split(model, test_dir)?)
        }
    };
    for sample in train.iter().chain(&test) {
        if sample.label >= model.num_classes {
            return Err(Error::config(format!(
                "label {} outside the model's {} classes",
                sample.label, model.num_classes
            )));
        }
    }
    Ok(Dataset { train, test, classes: model.num_classes })
}

// ---------------------------------------------------------------------------
// Loss helpers

/// Label-smoothed cross entropy straight from logits (used on the eval path
/// where no tape is needed).
fn smoothed_cross_entropy(logits: &[f64], target: usize, smoothing: f64) -> f64 {
    let classes = logits.len() as f64;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let uniform = smoothing / classes;
    let mut loss = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        let q = uniform + if i == target { 1.0 - smoothing } else { 0.0 };
        loss += q * (lse - l);
    }
    loss
}

// ---------------------------------------------------------------------------
// Forward/backward per sample

struct SamplePass {
    loss: f64,
    correct: bool,
    grads: Vec<Tensor<f32>>,
}

fn sample_pass(
    weights: &ModelWeights<f32>,
    config: &ModelConfig,
    bands: &[Image],
    label: usize,
    smoothing: f64,
) -> SamplePass {
    let mut tape = Tape::<f32>::new();
    let vars = ModelVars::register(&mut tape, weights);
    let leaves = band_leaves(&mut tape, bands);
    let out = forward_on_tape(&mut tape, &leaves, &vars, config);
    let loss_var = tape.cross_entropy(out.logits, label, smoothing);
    let loss = tape.value(loss_var).data[0] as f64;
    let correct = argmax(&tape.value(out.logits).data) == label;
    let grads = tape.backward(loss_var);
    let dense = vars
        .all()
        .into_iter()
        .map(|v| {
            let shape = tape.value(v).shape.clone();
            grads.dense(v, &shape)
        })
        .collect();
    SamplePass { loss, correct, grads: dense }
}

fn eval_pass(
    weights: &ModelWeights<f32>,
    config: &ModelConfig,
    sample: &Sample,
    smoothing: f64,
) -> (f64, bool) {
    let mut tape = Tape::<f32>::new();
    let vars = ModelVars::register(&mut tape, weights);
    let leaves = band_leaves(&mut tape, &sample.bands);
    let out = forward_on_tape(&mut tape, &leaves, &vars, config);
    let logits: Vec<f64> = tape.value(out.logits).data.iter().map(|&v| v as f64).collect();
    let loss = smoothed_cross_entropy(&logits, sample.label, smoothing);
    (loss, argmax(&logits) == sample.label)
}

/// Mean loss and accuracy over a split.
pub fn evaluate(
    weights: &ModelWeights<f32>,
    config: &ModelConfig,
    samples: &[Sample],
    smoothing: f64,
) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let results: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|s| eval_pass(weights, config, s, smoothing))
        .collect();
    let loss: f64 = results.iter().map(|(l, _)| l).sum::<f64>() / results.len() as f64;
    let correct = results.iter().filter(|(_, c)| *c).count();
    (loss, correct as f64 / results.len() as f64)
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

/// Render metrics rows in the fixed CSV schema.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("epoch,step,split,loss,accuracy,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.step, r.split, r.loss, r.accuracy, r.lr
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Training loop

pub struct TrainOutcome {
    pub weights: ModelWeights<f32>,
    pub metrics: Vec<MetricsRow>,
    pub steps_run: usize,
}

impl TrainOutcome {
    pub fn final_test_accuracy(&self) -> f64 {
        self.metrics
            .iter()
            .rev()
            .find(|r| r.split == "test")
            .map(|r| r.accuracy)
            .unwrap_or(0.0)
    }

    pub fn final_train_accuracy(&self) -> f64 {
        self.metrics
            .iter()
            .rev()
            .find(|r| r.split == "train")
            .map(|r| r.accuracy)
            .unwrap_or(0.0)
    }

    /// First epoch (1-based) whose training accuracy reached `target`, and
    /// the global step count at its end.
    pub fn first_epoch_reaching(&self, target: f64) -> Option<(usize, usize)> {
        self.metrics
            .iter()
            .find(|r| r.split == "train" && r.accuracy >= target)
            .map(|r| (r.epoch, r.step))
    }
}

/// Deterministic end-to-end training: fixed init, fixed shuffles, fixed
/// augmentation draws, ordered gradient reduction.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = load_dataset(&config.model, &config.dataset, config.seed)?;
    if data.train.is_empty() {
        return Err(Error::config("training split is empty".to_string()));
    }
    let mut weights = ModelWeights::<f32>::init(&config.model, config.seed)?;
    let names: Vec<String> =
        weights.named_tensors().iter().map(|(name, _)| name.clone()).collect();
    let steps_per_epoch = data.train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup_steps =
        ((total_steps as f64 * config.warmup_fraction).round() as usize).min(total_steps - 1);
    let mut optimizer = AdamW::new(&weights, config.weight_decay);

    let mut metrics = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(stream_seed(config.seed, 3, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut flip_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, 4, epoch as u64));
        let flips: Vec<bool> = (0..data.train.len())
            .map(|_| config.augment && flip_rng.gen_bool(0.5))
            .collect();

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut last_lr = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let lr = learning_rate(step, total_steps, warmup_steps, config.base_lr);
            last_lr = lr;
            let frozen = &weights;
            let passes: Vec<SamplePass> = chunk
                .par_iter()
                .map(|&i| {
                    let sample = &data.train[i];
                    if flips[i] {
                        let bands: Vec<Image> =
                            sample.bands.iter().map(flip_horizontal).collect();
                        sample_pass(frozen, &config.model, &bands, sample.label, config.label_smoothing)
                    } else {
                        sample_pass(frozen, &config.model, &sample.bands, sample.label, config.label_smoothing)
                    }
                })
                .collect();

            let batch_loss = passes.iter().map(|p| p.loss).sum::<f64>() / passes.len() as f64;
            if !batch_loss.is_finite() || batch_loss > DIVERGENCE_LIMIT {
                return Err(Error::Diverged { loss: batch_loss, limit: DIVERGENCE_LIMIT, step });
            }
            loss_sum += passes.iter().map(|p| p.loss).sum::<f64>();
            correct += passes.iter().filter(|p| p.correct).count();

            // Average gradients in sample order (fixed reduction order keeps
            // the result schedule-independent).
            let mut grads = passes[0].grads.clone();
            for pass in &passes[1..] {
                for (acc, g) in grads.iter_mut().zip(&pass.grads) {
                    for (a, b) in acc.data.iter_mut().zip(&g.data) {
                        *a += *b;
                    }
                }
            }
            let inv = 1.0 / passes.len() as f32;
            for g in &mut grads {
                for v in g.data.iter_mut() {
                    *v *= inv;
                }
            }
            for (grad, name) in grads.iter().zip(&names) {
                if !grad.data.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient for {name} at step {step}")));
                }
            }
            optimizer.step(&mut weights, &grads, lr);
            step += 1;
        }

        let train_loss = loss_sum / data.train.len() as f64;
        let train_acc = correct as f64 / data.train.len() as f64;
        let (test_loss, test_acc) =
            evaluate(&weights, &config.model, &data.test, config.label_smoothing);
        metrics.push(MetricsRow {
            epoch,
            step,
            split: "train",
            loss: train_loss,
            accuracy: train_acc,
            lr: last_lr,
        });
        metrics.push(MetricsRow {
            epoch,
            step,
            split: "test",
            loss: test_loss,
            accuracy: test_acc,
            lr: last_lr,
        });
        if let Some(target) = config.stop_at_train_accuracy {
            if train_acc >= target {
                break;
            }
        }
    }
    Ok(TrainOutcome { weights, metrics, steps_run: step })
}

// ---------------------------------------------------------------------------
// Gradient checking

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub max_relative_error: f64,
    pub median_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compare analytic gradients against central finite differences on
/// `probes` parameters sampled uniformly over all scalar entries. Runs in
/// f64 so the finite-difference oracle itself is trustworthy at the stated
/// tolerances.
pub fn grad_check(
    config: &ModelConfig,
    seed: u64,
    probes: usize,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    config.validate()?;
    let weights = ModelWeights::<f64>::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 7, 0));
    let label = rng.gen_range(0..config.num_classes);
    let image = synthetic_image(config.image_side(), config.num_classes, label, &mut rng);
    let bands = prepare_bands(&image, &config.serialization)?;

    let mut tape = Tape::<f64>::new();
    let vars = ModelVars::register(&mut tape, &weights);
    let leaves = band_leaves(&mut tape, &bands);
    let out = forward_on_tape(&mut tape, &leaves, &vars, config);
    let loss_var = tape.cross_entropy(out.logits, label, 0.1);
    let analytic = tape.backward(loss_var);

    let names: Vec<String> =
        weights.named_tensors().iter().map(|(name, _)| name.clone()).collect();
    let param_vars = vars.all();
    let sizes: Vec<usize> = param_vars.iter().map(|&v| tape.value(v).numel()).collect();
    let total: usize = sizes.iter().sum();

    let mut rows = Vec::with_capacity(probes);
    for _ in 0..probes {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let var = param_vars[which];
        let base = tape.value(var).clone();

        let mut plus = base.clone();
        plus.data[flat] += epsilon;
        tape.set_leaf(var, plus);
        tape.recompute();
        let loss_plus = tape.value(loss_var).data[0];

        let mut minus = base.clone();
        minus.data[flat] -= epsilon;
        tape.set_leaf(var, minus);
        tape.recompute();
        let loss_minus = tape.value(loss_var).data[0];

        tape.set_leaf(var, base);

        let numeric = (loss_plus - loss_minus) / (2.0 * epsilon);
        let shape = tape.value(var).shape.clone();
        let a = analytic.dense(var, &shape).data[flat];
        let relative_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        rows.push(GradCheckRow {
            name: names[which].clone(),
            index: flat,
            analytic: a,
            numeric,
            relative_error,
        });
    }

    let mut errors: Vec<f64> = rows.iter().map(|r| r.relative_error).collect();
    errors.sort_by(f64::total_cmp);
    let max_relative_error = *errors.last().unwrap_or(&0.0);
    let median_relative_error = if errors.is_empty() { 0.0 } else { errors[errors.len() / 2] };
    Ok(GradCheckReport {
        rows,
        max_relative_error,
        median_relative_error,
        tolerance,
        passed: max_relative_error < tolerance,
    })
}

/// Absolute deviation between the tape's gradient through the step-size
/// discretization and the closed form: with a unit state carried into step
/// two, d(y_2)/d(delta_2) = h_1 * a * exp(delta_2 * a).
pub fn discretize_derivative_deviation() -> f64 {
    let a = -1.3_f64;
    let (delta1, delta2) = (0.7_f64, 0.4_f64);
    let b1 = 0.9_f64;

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(&[2, 1], vec![1.0, 0.0]));
    let b = tape.leaf(Tensor::from_vec(&[2, 1], vec![b1, 0.0]));
    let c = tape.leaf(Tensor::from_vec(&[2, 1], vec![0.0, 1.0]));
    let delta = tape.param(Tensor::from_vec(&[2, 1], vec![delta1, delta2]));
    let a_leaf = tape.leaf(Tensor::from_vec(&[1, 1], vec![a]));
    let skip = tape.leaf(Tensor::from_vec(&[1], vec![0.0]));
    let y = tape.selective_scan(x, b, c, delta, a_leaf, skip);
    let pick_last = Tensor::from_vec(&[2, 1], vec![0.0, 1.0]);
    let loss = tape.reduce_dot(y, pick_last);
    let grads = tape.backward(loss);
    let got = grads.get(delta).expect("delta feeds the loss").data[1];

    // y_2 = abar_2 * h_1 with h_1 = ((exp(delta1*a) - 1)/a) * b1 * x_1.
    let h1 = ((delta1 * a).exp() - 1.0) / a * b1;
    let closed = h1 * a * (delta2 * a).exp();
    (got - closed).abs()
}

// ---------------------------------------------------------------------------
// Ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Compare band-block emission orders at fixed K.
    Order,
    /// Sweep the band count K from 1 to 6.
    Bands,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub k_bands: usize,
    pub sequence_length: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub variant: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub axis: &'static str,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

const ABLATION_ORDER_SEEDS: u64 = 3;

/// Train every variant of the chosen axis and tabulate accuracies.
/// Order axis: three emission orders, three seeds each, with mean and
/// standard deviation per variant. Band axis: K from 1 to 6 with the
/// sequence length recorded per row.
pub fn run_ablation(base: &TrainConfig, axis: AblationAxis) -> Result<AblationReport> {
    base.validate()?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    match axis {
        AblationAxis::Order => {
            use crate::serialization::BandOrder;
            let variants: [(&str, fn(u64) -> BandOrder); 3] = [
                ("low_to_high", |_| BandOrder::LowToHigh),
                ("high_to_low", |_| BandOrder::HighToLow),
                ("random", |seed| BandOrder::Random { seed }),
            ];
            for (name, make_order) in variants {
                let mut accs = Vec::new();
                for offset in 0..ABLATION_ORDER_SEEDS {
                    let mut config = base.clone();
                    config.seed = base.seed + offset;
                    config.model.serialization.order = make_order(config.seed);
                    let outcome = train(&config)?;
                    let accuracy = outcome.final_test_accuracy();
                    accs.push(accuracy);
                    rows.push(AblationRow {
                        variant: name.to_string(),
                        seed: config.seed,
                        k_bands: config.model.serialization.k_bands,
                        sequence_length: config.model.sequence_length()?,
                        accuracy,
                    });
                }
                let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                let var =
                    accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
                summary.push(AblationSummary {
                    variant: name.to_string(),
                    mean_accuracy: mean,
                    std_accuracy: var.sqrt(),
                });
            }
            Ok(AblationReport { axis: "order", rows, summary })
        }
        AblationAxis::Bands => {
            for k in 1..=6 {
                let mut config = base.clone();
                config.model.serialization.k_bands = k;
                let length = config.model.sequence_length()?;
                let outcome = train(&config)?;
                rows.push(AblationRow {
                    variant: format!("K={k}"),
                    seed: config.seed,
                    k_bands: k,
                    sequence_length: length,
                    accuracy: outcome.final_test_accuracy(),
                });
            }
            Ok(AblationReport { axis: "bands", rows, summary })
        }
    }
}

pub fn ablation_rows_csv(report: &AblationReport) -> String {
    let mut out = String::from("axis,variant,seed,k_bands,sequence_length,accuracy\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            report.axis, r.variant, r.seed, r.k_bands, r.sequence_length, r.accuracy
        ));
    }
    out
}

pub fn ablation_summary_csv(report: &AblationReport) -> String {
    let mut out = String::from("variant,mean_accuracy,std_accuracy\n");
    for s in &report.summary {
        out.push_str(&format!("{},{},{}\n", s.variant, s.mean_accuracy, s.std_accuracy));
    }
    out
}
