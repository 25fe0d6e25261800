//! Band-ordered token serialization: per-band grids, corner-aligned
//! downsampling, a shared patch-embedding stem, and assembly of the causal
//! token sequence (band blocks in a configurable order, one trailing class
//! token).
//!
//! Band decomposition and downsampling are fixed preprocessing (no
//! gradients); everything from the stem onward runs on the autodiff tape so
//! the same code path serves inference and training.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::spectral::{decompose, Image};

/// Emission order of the per-band token blocks. The class token always sits
/// at the end of the sequence regardless of order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandOrder {
    /// Coarse (low-frequency) blocks first. The default.
    LowToHigh,
    HighToLow,
    /// Deterministic shuffle of the band blocks.
    Random { seed: u64 },
}

impl Default for BandOrder {
    fn default() -> Self {
        BandOrder::LowToHigh
    }
}

/// Serialization hyperparameters shared by inference and training.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SerializationConfig {
    pub k_bands: usize,
    /// Token grid of the finest band; coarser bands halve it per step down.
    pub base_grid: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Width of the 3x3 stem that runs ahead of the patch projection.
    pub stem_dim: usize,
    pub stem_activation: Activation,
    pub order: BandOrder,
}

impl SerializationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.k_bands) {
            return Err(Error::config(format!("band count must be in 1..=8, got {}", self.k_bands)));
        }
        for (name, v) in [
            ("base_grid", self.base_grid),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("stem_dim", self.stem_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Token grid side for band `band` (1-based) of `k_bands`: the base grid
/// floor-halved once per level below the finest band, clamped at 1.
pub fn band_grid(k_bands: usize, band: usize, base_grid: usize) -> Result<usize> {
    if !(1..=8).contains(&k_bands) {
        return Err(Error::config(format!("band count must be in 1..=8, got {k_bands}")));
    }
    if band == 0 || band > k_bands {
        return Err(Error::config(format!("band index {band} outside 1..={k_bands}")));
    }
    if base_grid == 0 {
        return Err(Error::config("base_grid must be at least 1".to_string()));
    }
    Ok((base_grid >> (k_bands - band)).max(1))
}

/// Grids of every band, coarse to fine.
pub fn band_grids(k_bands: usize, base_grid: usize) -> Result<Vec<usize>> {
    (1..=k_bands).map(|band| band_grid(k_bands, band, base_grid)).collect()
}

/// Total serialized length: the sum of squared band grids plus the class
/// token when present.
pub fn sequence_length(k_bands: usize, base_grid: usize, class_token: bool) -> Result<usize> {
    let grids = band_grids(k_bands, base_grid)?;
    Ok(grids.iter().map(|g| g * g).sum::<usize>() + usize::from(class_token))
}

/// Corner-aligned bilinear resampling to a strictly-not-larger target.
/// Output corners sample input corners exactly; interior samples sit at
/// `i * (src - 1) / (dst - 1)` per axis (for a singleton axis the sample
/// falls at the axis center).
pub fn downsample(image: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("downsample target must be nonzero".to_string()));
    }
    if out_h > image.height || out_w > image.width {
        return Err(Error::config(format!(
            "refusing to upsample {}x{} to {out_h}x{out_w}",
            image.height, image.width
        )));
    }
    let src_pos = |i: usize, dst: usize, src: usize| -> f64 {
        if dst == 1 {
            (src - 1) as f64 / 2.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        }
    };
    let (h, w) = (image.height, image.width);
    let mut out = Image::zeros(image.channels, out_h, out_w);
    for c in 0..image.channels {
        let plane = image.plane(c);
        let out_plane = out.plane_mut(c);
        for oy in 0..out_h {
            let sy = src_pos(oy, out_h, h);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = src_pos(ox, out_w, w);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = sx - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bottom = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out_plane[oy * out_w + ox] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    Ok(out)
}

/// Fixed preprocessing for one image: decompose into `k_bands` cumulative
/// bands and shrink band `k` to its token resolution
/// (`band_grid * patch_size` per side). Requires a square input at least as
/// large as the finest target.
pub fn prepare_bands(image: &Image, config: &SerializationConfig) -> Result<Vec<Image>> {
    config.validate()?;
    if image.height != image.width {
        return Err(Error::shape(format!(
            "serialization expects square images, got {}x{}",
            image.height, image.width
        )));
    }
    let bands = decompose(image, config.k_bands)?;
    let grids = band_grids(config.k_bands, config.base_grid)?;
    bands
        .iter()
        .zip(&grids)
        .map(|(band, &grid)| {
            let side = grid * config.patch_size;
            downsample(band, side, side)
        })
        .collect()
}

/// Learned serialization weights. The stem and projection are shared by all
/// bands; positional tables are per band, plus one band-identity embedding
/// row per band and the class token.
#[derive(Debug, Clone)]
pub struct EmbedWeights<R> {
    /// (stem_dim, channels, 3, 3)
    pub stem_kernel: Tensor<R>,
    /// (stem_dim)
    pub stem_bias: Tensor<R>,
    /// (stem_dim * patch^2, embed_dim)
    pub proj_weight: Tensor<R>,
    /// (embed_dim)
    pub proj_bias: Tensor<R>,
    /// Per band: (grid^2, embed_dim)
    pub pos_tables: Vec<Tensor<R>>,
    /// (k_bands, embed_dim)
    pub band_embed: Tensor<R>,
    /// (1, embed_dim)
    pub class_token: Tensor<R>,
}

fn uniform_tensor<R: Real>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<R> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| R::from_f64(rng.gen_range(-scale..scale)))
        .collect();
    Tensor::from_vec(shape, data)
}

impl<R: Real> EmbedWeights<R> {
    /// Fan-in scaled uniform init for the stem and projection, small uniform
    /// for the embedding tables. All draws are f64 and cast, so f32 and f64
    /// instantiations see the same underlying values.
    pub fn init(config: &SerializationConfig, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let grids = band_grids(config.k_bands, config.base_grid)?;
        let stem_fan_in = (channels * 9) as f64;
        let proj_rows = config.stem_dim * config.patch_size * config.patch_size;
        let proj_fan_in = proj_rows as f64;
        Ok(EmbedWeights {
            stem_kernel: uniform_tensor(
                rng,
                &[config.stem_dim, channels, 3, 3],
                1.0 / stem_fan_in.sqrt(),
            ),
            stem_bias: Tensor::zeros(&[config.stem_dim]),
            proj_weight: uniform_tensor(
                rng,
                &[proj_rows, config.embed_dim],
                1.0 / proj_fan_in.sqrt(),
            ),
            proj_bias: Tensor::zeros(&[config.embed_dim]),
            pos_tables: grids
                .iter()
                .map(|&g| uniform_tensor(rng, &[g * g, config.embed_dim], 0.02))
                .collect(),
            band_embed: uniform_tensor(rng, &[config.k_bands, config.embed_dim], 0.02),
            class_token: uniform_tensor(rng, &[1, config.embed_dim], 0.02),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<R>)> {
        let mut out = vec![
            ("embed.stem_kernel".to_string(), &self.stem_kernel),
            ("embed.stem_bias".to_string(), &self.stem_bias),
            ("embed.proj_weight".to_string(), &self.proj_weight),
            ("embed.proj_bias".to_string(), &self.proj_bias),
        ];
        for (k, t) in self.pos_tables.iter().enumerate() {
            out.push((format!("embed.pos.{k}"), t));
        }
        out.push(("embed.band_embed".to_string(), &self.band_embed));
        out.push(("embed.class_token".to_string(), &self.class_token));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<R>)> {
        let mut out: Vec<(String, &mut Tensor<R>)> = vec![
            ("embed.stem_kernel".to_string(), &mut self.stem_kernel),
            ("embed.stem_bias".to_string(), &mut self.stem_bias),
            ("embed.proj_weight".to_string(), &mut self.proj_weight),
            ("embed.proj_bias".to_string(), &mut self.proj_bias),
        ];
        for (k, t) in self.pos_tables.iter_mut().enumerate() {
            out.push((format!("embed.pos.{k}"), t));
        }
        out.push(("embed.band_embed".to_string(), &mut self.band_embed));
        out.push(("embed.class_token".to_string(), &mut self.class_token));
        out
    }
}

/// Tape handles of [`EmbedWeights`], registered in `named_tensors` order.
pub struct EmbedVars {
    pub stem_kernel: Var,
    pub stem_bias: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
    pub pos_tables: Vec<Var>,
    pub band_embed: Var,
    pub class_token: Var,
}

impl EmbedVars {
    pub fn register<R: Real>(tape: &mut Tape<R>, weights: &EmbedWeights<R>) -> Self {
        EmbedVars {
            stem_kernel: tape.param(weights.stem_kernel.clone()),
            stem_bias: tape.param(weights.stem_bias.clone()),
            proj_weight: tape.param(weights.proj_weight.clone()),
            proj_bias: tape.param(weights.proj_bias.clone()),
            pos_tables: weights.pos_tables.iter().map(|t| tape.param(t.clone())).collect(),
            band_embed: tape.param(weights.band_embed.clone()),
            class_token: tape.param(weights.class_token.clone()),
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut vars = vec![self.stem_kernel, self.stem_bias, self.proj_weight, self.proj_bias];
        vars.extend(&self.pos_tables);
        vars.push(self.band_embed);
        vars.push(self.class_token);
        vars
    }
}

/// Embed one band image already sitting on the tape: 3x3 stem, pointwise
/// nonlinearity, then the non-overlapping patch projection. Tokens come out
/// in row-major patch order, shape (grid^2, embed_dim). The same weights
/// serve every band.
pub fn patch_embed<R: Real>(
    tape: &mut Tape<R>,
    band_pixels: Var,
    embed: &EmbedVars,
    patch_size: usize,
    activation: Activation,
) -> Var {
    let stem = tape.conv3x3(band_pixels, embed.stem_kernel, embed.stem_bias);
    let activated = tape.activation(stem, activation);
    let patches = tape.patches(activated, patch_size);
    let projected = tape.matmul(patches, embed.proj_weight);
    tape.add_row(projected, embed.proj_bias)
}

/// The serialized sequence on the tape, with its block layout.
pub struct TokenLayout {
    pub tokens: Var,
    /// Start row of each emitted block, strictly increasing.
    pub band_offsets: Vec<usize>,
    /// Band identity (0-based) of each emitted block.
    pub band_ids: Vec<usize>,
    pub class_token_index: usize,
    pub total_length: usize,
}

/// Block emission order for a config (band indices 0-based).
pub fn band_emission_order(order: BandOrder, k_bands: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..k_bands).collect();
    match order {
        BandOrder::LowToHigh => {}
        BandOrder::HighToLow => ids.reverse(),
        BandOrder::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ids.shuffle(&mut rng);
        }
    }
    ids
}

/// Assemble the full token sequence from prepared band images (leaves on the
/// tape, coarse to fine): embed every band with the shared stem, attach its
/// positional table and band-identity row, lay the blocks out in the
/// configured order, and append the class token.
pub fn serialize_on_tape<R: Real>(
    tape: &mut Tape<R>,
    band_pixel_vars: &[Var],
    embed: &EmbedVars,
    config: &SerializationConfig,
) -> TokenLayout {
    assert_eq!(band_pixel_vars.len(), config.k_bands, "one pixel var per band");
    let mut blocks = Vec::with_capacity(config.k_bands);
    for (band, &pixels) in band_pixel_vars.iter().enumerate() {
        let tokens = patch_embed(tape, pixels, embed, config.patch_size, config.stem_activation);
        let with_pos = tape.add(tokens, embed.pos_tables[band]);
        let band_row = tape.select_row(embed.band_embed, band);
        blocks.push(tape.add_row(with_pos, band_row));
    }

    let order = band_emission_order(config.order, config.k_bands);
    let mut parts: Vec<Var> = Vec::with_capacity(config.k_bands + 1);
    let mut band_offsets = Vec::with_capacity(config.k_bands);
    let mut offset = 0;
    for &band in &order {
        band_offsets.push(offset);
        offset += tape.value(blocks[band]).rows();
        parts.push(blocks[band]);
    }
    parts.push(embed.class_token);
    let tokens = tape.concat_rows(&parts);
    TokenLayout {
        tokens,
        band_offsets,
        band_ids: order,
        class_token_index: offset,
        total_length: offset + 1,
    }
}

/// Serialized token sequence as plain values.
#[derive(Debug, Clone)]
pub struct TokenSequence<R> {
    /// (total_length, embed_dim)
    pub tokens: Tensor<R>,
    pub band_offsets: Vec<usize>,
    pub band_ids: Vec<usize>,
    pub class_token_index: usize,
    pub total_length: usize,
}

/// One-shot serialization of an image: fixed preprocessing, then the
/// embedding pipeline on a scratch tape.
pub fn serialize<R: Real>(
    image: &Image,
    weights: &EmbedWeights<R>,
    config: &SerializationConfig,
) -> Result<TokenSequence<R>> {
    let bands = prepare_bands(image, config)?;
    let mut tape = Tape::new();
    let embed = EmbedVars::register(&mut tape, weights);
    let band_vars: Vec<Var> = bands
        .iter()
        .map(|band| {
            let shape = [band.channels, band.height, band.width];
            let data = band.data.iter().map(|&x| R::from_f64(x)).collect();
            tape.leaf(Tensor::from_vec(&shape, data))
        })
        .collect();
    let layout = serialize_on_tape(&mut tape, &band_vars, &embed, config);
    Ok(TokenSequence {
        tokens: tape.value(layout.tokens).clone(),
        band_offsets: layout.band_offsets,
        band_ids: layout.band_ids,
        class_token_index: layout.class_token_index,
        total_length: layout.total_length,
    })
}
