//! The classifier: serialized band tokens run through a stack of pre-norm
//! residual state-space blocks, a final layer norm, class-token readout, and
//! an affine head. Includes the desk-scale presets, parameter registry, and
//! the `GMBA1` checkpoint container.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::serialization::{
    prepare_bands, serialize_on_tape, EmbedVars, EmbedWeights, SerializationConfig, TokenLayout,
};
use crate::spectral::Image;

/// Architecture hyperparameters. The SSM inner width equals `embed_dim`
/// (the in/out projections are learned maps at constant width), and the MLP
/// hidden width is `embed_dim * mlp_ratio` rounded down.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub embed_dim: usize,
    /// State dimension per channel in each selective-scan block.
    pub state_size: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    /// Input image channels (1 for graymaps, 3 for pixmaps).
    pub channels: usize,
    pub serialization: SerializationConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1".to_string()));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("state_size", self.state_size),
            ("num_classes", self.num_classes),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !(self.mlp_ratio > 0.0) || !self.mlp_ratio.is_finite() {
            return Err(Error::config(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        if self.serialization.embed_dim != self.embed_dim {
            return Err(Error::config(format!(
                "serialization embed_dim {} disagrees with model embed_dim {}",
                self.serialization.embed_dim, self.embed_dim
            )));
        }
        self.serialization.validate()
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio) as usize).max(1)
    }

    /// Expected square input side: the finest band grid times the patch size.
    pub fn image_side(&self) -> usize {
        self.serialization.base_grid * self.serialization.patch_size
    }

    /// Serialized sequence length including the class token.
    pub fn sequence_length(&self) -> Result<usize> {
        crate::serialization::sequence_length(
            self.serialization.k_bands,
            self.serialization.base_grid,
            true,
        )
    }
}

/// Named presets for 64-pixel inputs: four cumulative bands over an 8x8 base
/// grid of 8-pixel patches (token grids 1, 2, 4, 8; 86 tokens with the class
/// token).
pub fn preset(name: &str) -> Result<ModelConfig> {
    let serialization = SerializationConfig {
        k_bands: 4,
        base_grid: 8,
        patch_size: 8,
        embed_dim: 64,
        stem_dim: 16,
        stem_activation: Activation::Silu,
        order: crate::serialization::BandOrder::LowToHigh,
    };
    match name {
        "micro_plain" => Ok(ModelConfig {
            depth: 4,
            embed_dim: 64,
            state_size: 16,
            mlp_ratio: 2.0,
            num_classes: 8,
            channels: 1,
            serialization,
        }),
        "tiny_plain" => Ok(ModelConfig {
            depth: 8,
            embed_dim: 128,
            state_size: 16,
            mlp_ratio: 2.0,
            num_classes: 8,
            channels: 1,
            serialization: SerializationConfig { embed_dim: 128, stem_dim: 24, ..serialization },
        }),
        other => Err(Error::config(format!(
            "unknown preset {other:?} (expected micro_plain or tiny_plain)"
        ))),
    }
}

/// One residual block: layer norm, width-preserving projection into the
/// selective scan, projection out, then a layer-normed two-layer MLP. Both
/// halves are residual.
#[derive(Debug, Clone)]
pub struct BlockWeights<R> {
    pub norm1_gain: Tensor<R>,
    pub norm1_bias: Tensor<R>,
    /// (d, d) / (d): projection feeding the scan.
    pub in_proj: Tensor<R>,
    pub in_bias: Tensor<R>,
    /// (d, n): log-magnitudes of the negated state-decay diagonal.
    pub a_log: Tensor<R>,
    /// (d, n): input-dependent state injection map.
    pub w_b: Tensor<R>,
    /// (d, n): input-dependent readout map.
    pub w_c: Tensor<R>,
    /// (d, d) / (d): step-size head (softplus keeps steps positive).
    pub w_delta: Tensor<R>,
    pub b_delta: Tensor<R>,
    /// (d): learned elementwise skip around the state path.
    pub d_skip: Tensor<R>,
    /// (d, d) / (d): projection back to the residual stream.
    pub out_proj: Tensor<R>,
    pub out_bias: Tensor<R>,
    pub norm2_gain: Tensor<R>,
    pub norm2_bias: Tensor<R>,
    /// (d, hidden) / (hidden) and (hidden, d) / (d).
    pub mlp_w1: Tensor<R>,
    pub mlp_b1: Tensor<R>,
    pub mlp_w2: Tensor<R>,
    pub mlp_b2: Tensor<R>,
}

fn uniform<R: Real>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<R> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| R::from_f64(rng.gen_range(-scale..scale)))
        .collect();
    Tensor::from_vec(shape, data)
}

fn fanin<R: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<R> {
    uniform(rng, &[rows, cols], 1.0 / (rows as f64).sqrt())
}

impl<R: Real> BlockWeights<R> {
    fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.embed_dim;
        let n = config.state_size;
        let hidden = config.mlp_hidden();
        // State decay starts at -(row + 1) per state index, identical across
        // channels: a spread of stable time scales that discretize keeps
        // inside the unit interval.
        let a_log_data: Vec<R> = (0..d * n)
            .map(|i| R::from_f64((((i % n) + 1) as f64).ln()))
            .collect();
        // The step-size bias starts softplus at a log-uniform draw from
        // [1e-3, 1e-1] so initial steps are small but varied.
        let b_delta_data: Vec<R> = (0..d)
            .map(|_| {
                let log10: f64 = rng.gen_range(-3.0..-1.0);
                let delta = 10f64.powf(log10);
                R::from_f64((delta.exp_m1()).ln())
            })
            .collect();
        BlockWeights {
            norm1_gain: Tensor::from_vec(&[d], vec![R::ONE; d]),
            norm1_bias: Tensor::zeros(&[d]),
            in_proj: fanin(rng, d, d),
            in_bias: Tensor::zeros(&[d]),
            a_log: Tensor::from_vec(&[d, n], a_log_data),
            w_b: fanin(rng, d, n),
            w_c: fanin(rng, d, n),
            w_delta: fanin(rng, d, d),
            b_delta: Tensor::from_vec(&[d], b_delta_data),
            d_skip: Tensor::from_vec(&[d], vec![R::ONE; d]),
            out_proj: fanin(rng, d, d),
            out_bias: Tensor::zeros(&[d]),
            norm2_gain: Tensor::from_vec(&[d], vec![R::ONE; d]),
            norm2_bias: Tensor::zeros(&[d]),
            mlp_w1: fanin(rng, d, hidden),
            mlp_b1: Tensor::zeros(&[hidden]),
            mlp_w2: fanin(rng, hidden, d),
            mlp_b2: Tensor::zeros(&[d]),
        }
    }

    fn named(&self, block: usize) -> Vec<(String, &Tensor<R>)> {
        let fields: [(&str, &Tensor<R>); 18] = [
            ("norm1_gain", &self.norm1_gain),
            ("norm1_bias", &self.norm1_bias),
            ("in_proj", &self.in_proj),
            ("in_bias", &self.in_bias),
            ("a_log", &self.a_log),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
            ("w_delta", &self.w_delta),
            ("b_delta", &self.b_delta),
            ("d_skip", &self.d_skip),
            ("out_proj", &self.out_proj),
            ("out_bias", &self.out_bias),
            ("norm2_gain", &self.norm2_gain),
            ("norm2_bias", &self.norm2_bias),
            ("mlp_w1", &self.mlp_w1),
            ("mlp_b1", &self.mlp_b1),
            ("mlp_w2", &self.mlp_w2),
            ("mlp_b2", &self.mlp_b2),
        ];
        fields.into_iter().map(|(name, t)| (format!("block.{block}.{name}"), t)).collect()
    }

    fn named_mut(&mut self, block: usize) -> Vec<(String, &mut Tensor<R>)> {
        let fields: [(&str, &mut Tensor<R>); 18] = [
            ("norm1_gain", &mut self.norm1_gain),
            ("norm1_bias", &mut self.norm1_bias),
            ("in_proj", &mut self.in_proj),
            ("in_bias", &mut self.in_bias),
            ("a_log", &mut self.a_log),
            ("w_b", &mut self.w_b),
            ("w_c", &mut self.w_c),
            ("w_delta", &mut self.w_delta),
            ("b_delta", &mut self.b_delta),
            ("d_skip", &mut self.d_skip),
            ("out_proj", &mut self.out_proj),
            ("out_bias", &mut self.out_bias),
            ("norm2_gain", &mut self.norm2_gain),
            ("norm2_bias", &mut self.norm2_bias),
            ("mlp_w1", &mut self.mlp_w1),
            ("mlp_b1", &mut self.mlp_b1),
            ("mlp_w2", &mut self.mlp_w2),
            ("mlp_b2", &mut self.mlp_b2),
        ];
        fields.into_iter().map(|(name, t)| (format!("block.{block}.{name}"), t)).collect()
    }
}

/// Every learnable tensor in the classifier.
#[derive(Debug, Clone)]
pub struct ModelWeights<R> {
    pub embed: EmbedWeights<R>,
    pub blocks: Vec<BlockWeights<R>>,
    pub final_gain: Tensor<R>,
    pub final_bias: Tensor<R>,
    /// (d, num_classes) / (num_classes).
    pub head_weight: Tensor<R>,
    pub head_bias: Tensor<R>,
}

impl<R: Real> ModelWeights<R> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = EmbedWeights::init(&config.serialization, config.channels, &mut rng)?;
        let blocks = (0..config.depth).map(|_| BlockWeights::init(config, &mut rng)).collect();
        let d = config.embed_dim;
        Ok(ModelWeights {
            embed,
            blocks,
            final_gain: Tensor::from_vec(&[d], vec![R::ONE; d]),
            final_bias: Tensor::zeros(&[d]),
            head_weight: fanin(&mut rng, d, config.num_classes),
            head_bias: Tensor::zeros(&[config.num_classes]),
        })
    }

    /// Stable, deterministic parameter registry: embedding tensors, then
    /// blocks in order, then the head. Checkpoints and the optimizer both
    /// key off this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<R>)> {
        let mut out = self.embed.named_tensors();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(i));
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out.push(("head_weight".to_string(), &self.head_weight));
        out.push(("head_bias".to_string(), &self.head_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<R>)> {
        let mut out = self.embed.named_tensors_mut();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(i));
        }
        out.push(("final_gain".to_string(), &mut self.final_gain));
        out.push(("final_bias".to_string(), &mut self.final_bias));
        out.push(("head_weight".to_string(), &mut self.head_weight));
        out.push(("head_bias".to_string(), &mut self.head_bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<S: Real>(&self) -> ModelWeights<S> {
        ModelWeights {
            embed: EmbedWeights {
                stem_kernel: self.embed.stem_kernel.cast(),
                stem_bias: self.embed.stem_bias.cast(),
                proj_weight: self.embed.proj_weight.cast(),
                proj_bias: self.embed.proj_bias.cast(),
                pos_tables: self.embed.pos_tables.iter().map(Tensor::cast).collect(),
                band_embed: self.embed.band_embed.cast(),
                class_token: self.embed.class_token.cast(),
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    norm1_gain: b.norm1_gain.cast(),
                    norm1_bias: b.norm1_bias.cast(),
                    in_proj: b.in_proj.cast(),
                    in_bias: b.in_bias.cast(),
                    a_log: b.a_log.cast(),
                    w_b: b.w_b.cast(),
                    w_c: b.w_c.cast(),
                    w_delta: b.w_delta.cast(),
                    b_delta: b.b_delta.cast(),
                    d_skip: b.d_skip.cast(),
                    out_proj: b.out_proj.cast(),
                    out_bias: b.out_bias.cast(),
                    norm2_gain: b.norm2_gain.cast(),
                    norm2_bias: b.norm2_bias.cast(),
                    mlp_w1: b.mlp_w1.cast(),
                    mlp_b1: b.mlp_b1.cast(),
                    mlp_w2: b.mlp_w2.cast(),
                    mlp_b2: b.mlp_b2.cast(),
                })
                .collect(),
            final_gain: self.final_gain.cast(),
            final_bias: self.final_bias.cast(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
        }
    }
}

/// Tape handles for one block's weights.
pub struct BlockVars {
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub in_proj: Var,
    pub in_bias: Var,
    pub a_log: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub w_delta: Var,
    pub b_delta: Var,
    pub d_skip: Var,
    pub out_proj: Var,
    pub out_bias: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

/// Tape handles for the whole model, registered in `named_tensors` order so
/// the k-th registered parameter is the k-th registry entry.
pub struct ModelVars {
    pub embed: EmbedVars,
    pub blocks: Vec<BlockVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl ModelVars {
    pub fn register<R: Real>(tape: &mut Tape<R>, weights: &ModelWeights<R>) -> Self {
        let embed = EmbedVars::register(tape, &weights.embed);
        let blocks = weights
            .blocks
            .iter()
            .map(|b| BlockVars {
                norm1_gain: tape.param(b.norm1_gain.clone()),
                norm1_bias: tape.param(b.norm1_bias.clone()),
                in_proj: tape.param(b.in_proj.clone()),
                in_bias: tape.param(b.in_bias.clone()),
                a_log: tape.param(b.a_log.clone()),
                w_b: tape.param(b.w_b.clone()),
                w_c: tape.param(b.w_c.clone()),
                w_delta: tape.param(b.w_delta.clone()),
                b_delta: tape.param(b.b_delta.clone()),
                d_skip: tape.param(b.d_skip.clone()),
                out_proj: tape.param(b.out_proj.clone()),
                out_bias: tape.param(b.out_bias.clone()),
                norm2_gain: tape.param(b.norm2_gain.clone()),
                norm2_bias: tape.param(b.norm2_bias.clone()),
                mlp_w1: tape.param(b.mlp_w1.clone()),
                mlp_b1: tape.param(b.mlp_b1.clone()),
                mlp_w2: tape.param(b.mlp_w2.clone()),
                mlp_b2: tape.param(b.mlp_b2.clone()),
            })
            .collect();
        ModelVars {
            embed,
            blocks,
            final_gain: tape.param(weights.final_gain.clone()),
            final_bias: tape.param(weights.final_bias.clone()),
            head_weight: tape.param(weights.head_weight.clone()),
            head_bias: tape.param(weights.head_bias.clone()),
        }
    }

    /// Every parameter var, in registry order.
    pub fn all(&self) -> Vec<Var> {
        let mut vars = self.embed.all();
        for b in &self.blocks {
            vars.extend([
                b.norm1_gain,
                b.norm1_bias,
                b.in_proj,
                b.in_bias,
                b.a_log,
                b.w_b,
                b.w_c,
                b.w_delta,
                b.b_delta,
                b.d_skip,
                b.out_proj,
                b.out_bias,
                b.norm2_gain,
                b.norm2_bias,
                b.mlp_w1,
                b.mlp_b1,
                b.mlp_w2,
                b.mlp_b2,
            ]);
        }
        vars.extend([self.final_gain, self.final_bias, self.head_weight, self.head_bias]);
        vars
    }
}

/// One pre-norm residual block:
/// t = z + out_proj(scan(in_proj(norm1(z)))), then z' = t + mlp(norm2(t)).
pub fn block_forward_on_tape<R: Real>(tape: &mut Tape<R>, z: Var, block: &BlockVars) -> Var {
    let normed = tape.layer_norm(z, block.norm1_gain, block.norm1_bias);
    let u = tape.matmul(normed, block.in_proj);
    let u = tape.add_row(u, block.in_bias);
    let b = tape.matmul(u, block.w_b);
    let c = tape.matmul(u, block.w_c);
    let delta_pre = tape.matmul(u, block.w_delta);
    let delta_pre = tape.add_row(delta_pre, block.b_delta);
    let delta = tape.softplus(delta_pre);
    let a = tape.neg_exp(block.a_log);
    let scanned = tape.selective_scan(u, b, c, delta, a, block.d_skip);
    let mixed = tape.matmul(scanned, block.out_proj);
    let mixed = tape.add_row(mixed, block.out_bias);
    let t = tape.add(z, mixed);

    let normed2 = tape.layer_norm(t, block.norm2_gain, block.norm2_bias);
    let hidden = tape.matmul(normed2, block.mlp_w1);
    let hidden = tape.add_row(hidden, block.mlp_b1);
    let hidden = tape.activation(hidden, Activation::Gelu);
    let expanded = tape.matmul(hidden, block.mlp_w2);
    let expanded = tape.add_row(expanded, block.mlp_b2);
    tape.add(t, expanded)
}

/// Everything the forward pass leaves on the tape.
pub struct ForwardVars {
    pub layout: TokenLayout,
    /// Output of each residual block, in depth order.
    pub block_outputs: Vec<Var>,
    /// (1, num_classes).
    pub logits: Var,
}

/// Run the classifier over prepared band leaves already on the tape.
pub fn forward_on_tape<R: Real>(
    tape: &mut Tape<R>,
    band_pixel_vars: &[Var],
    vars: &ModelVars,
    config: &ModelConfig,
) -> ForwardVars {
    let layout = serialize_on_tape(tape, band_pixel_vars, &vars.embed, &config.serialization);
    let mut z = layout.tokens;
    let mut block_outputs = Vec::with_capacity(config.depth);
    for block in &vars.blocks {
        z = block_forward_on_tape(tape, z, block);
        block_outputs.push(z);
    }
    let normed = tape.layer_norm(z, vars.final_gain, vars.final_bias);
    let cls = tape.select_row(normed, layout.class_token_index);
    let logits = tape.matmul(cls, vars.head_weight);
    let logits = tape.add_row(logits, vars.head_bias);
    ForwardVars { layout, block_outputs, logits }
}

/// Put prepared band images on a tape as constant leaves.
pub fn band_leaves<R: Real>(tape: &mut Tape<R>, bands: &[Image]) -> Vec<Var> {
    bands
        .iter()
        .map(|band| {
            let shape = [band.channels, band.height, band.width];
            let data = band.data.iter().map(|&x| R::from_f64(x)).collect();
            tape.leaf(Tensor::from_vec(&shape, data))
        })
        .collect()
}

/// Pure inference: decompose, serialize, classify. Reports the first block
/// whose activations go non-finite.
pub fn forward<R: Real>(
    image: &Image,
    weights: &ModelWeights<R>,
    config: &ModelConfig,
) -> Result<Vec<R>> {
    config.validate()?;
    let bands = prepare_bands(image, &config.serialization)?;
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, weights);
    let leaves = band_leaves(&mut tape, &bands);
    let out = forward_on_tape(&mut tape, &leaves, &vars, config);
    for (i, &block) in out.block_outputs.iter().enumerate() {
        if !tape.value(block).data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("block {i} produced non-finite activations")));
        }
    }
    let logits = tape.value(out.logits);
    if !logits.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("classifier head produced non-finite logits".to_string()));
    }
    Ok(logits.data.clone())
}

/// Numerically stable softmax over a logit slice.
pub fn softmax<R: Real>(logits: &[R]) -> Vec<R> {
    let max = logits.iter().fold(logits[0], |m, &v| m.maximum(v));
    let exps: Vec<R> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().fold(R::ZERO, |s, &e| s + e);
    exps.into_iter().map(|e| e / total).collect()
}

pub fn argmax<R: Real>(values: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

const CHECKPOINT_MAGIC: &[u8; 5] = b"GMBA1";

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the f32 payload.
    offset: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

/// Write weights as magic, little-endian u32 header length, JSON header
/// (config plus tensor manifest), then all tensor data as little-endian f32
/// in manifest order.
pub fn save_checkpoint(path: &Path, config: &ModelConfig, weights: &ModelWeights<f32>) -> Result<()> {
    let named = weights.named_tensors();
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0usize;
    for (name, t) in &named {
        tensors.push(TensorRecord { name: name.clone(), shape: t.shape.clone(), offset });
        offset += t.numel();
    }
    let header = CheckpointHeader { config: config.clone(), tensors };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::format(path.display().to_string(), format!("header encode: {e}")))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, t) in &named {
        for &v in &t.data {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Read a `GMBA1` checkpoint back into its config and weights.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelWeights<f32>)> {
    let display = path.display().to_string();
    let bad = |reason: String| Error::format(display.clone(), reason);
    let file = std::fs::File::open(path)
        .map_err(|e| Error::format(display.clone(), format!("unreadable: {e}")))?;
    let mut file = std::io::BufReader::new(file);

    let mut magic = [0u8; 5];
    file.read_exact(&mut magic).map_err(|_| bad("file too short for magic".to_string()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes).map_err(|_| bad("missing header length".to_string()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes).map_err(|_| bad("truncated header".to_string()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| bad(format!("header decode: {e}")))?;
    header.config.validate()?;

    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let mut payload = vec![0u8; total * 4];
    file.read_exact(&mut payload).map_err(|_| bad("truncated tensor payload".to_string()))?;

    // Rebuild a skeleton with the right shapes, then fill by name.
    let mut weights = ModelWeights::<f32>::init(&header.config, 0)?;
    let mut filled = 0usize;
    for (name, tensor) in weights.named_tensors_mut() {
        let record = header
            .tensors
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| bad(format!("manifest is missing tensor {name}")))?;
        if record.shape != tensor.shape {
            return Err(bad(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                record.shape, tensor.shape
            )));
        }
        for (i, v) in tensor.data.iter_mut().enumerate() {
            let at = (record.offset + i) * 4;
            *v = f32::from_le_bytes(payload[at..at + 4].try_into().unwrap());
        }
        filled += 1;
    }
    if filled != header.tensors.len() {
        return Err(bad(format!(
            "checkpoint carries {} tensors but the model expects {filled}",
            header.tensors.len()
        )));
    }
    Ok((header.config, weights))
}
