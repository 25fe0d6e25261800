//! Spectral preprocessing: orthonormal 2D DCT, anti-diagonal frequency
//! indexing, cumulative low-pass masks, and band decomposition.
//!
//! All math here is double precision and gradient-free: band decomposition is
//! fixed preprocessing for the model, not a learned stage. Transforms are
//! separable and computed as dense matrix products against a precomputed
//! cosine basis, which is plenty at the image sizes this crate targets.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// A dense multi-channel image, channel-major, each plane row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Length `channels * height * width`.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "image dimensions must be nonzero, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "image buffer length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("image data".into()));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn plane_mut(&mut self, channel: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[channel * n..(channel + 1) * n]
    }

    /// Sum of squared samples over all channels.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// DCT coefficients of an image, same layout as [`Image`].
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Length `channels * height * width`; `coeffs[c][u][v]` flattened.
    pub coeffs: Vec<f64>,
}

impl Spectrum {
    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.coeffs[channel * n..(channel + 1) * n]
    }

    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|x| x * x).sum()
    }
}

/// Cumulative band plan: `thresholds[k]` is the upper frequency bound of band
/// `k` (0-based), strictly increasing, last entry exactly 1.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BandPlan {
    pub count: usize,
    pub thresholds: Vec<f64>,
}

/// Orthonormal DCT-II basis for one axis of length `n`.
///
/// Row `k`, column `j` holds `alpha_k * cos(pi * (2j + 1) * k / (2n))` with
/// `alpha_0 = sqrt(1/n)` and `alpha_k = sqrt(2/n)` otherwise, so the matrix is
/// orthogonal and the transform preserves energy.
struct DctBasis {
    n: usize,
    /// Row-major `n x n` forward matrix.
    forward: Vec<f64>,
}

impl DctBasis {
    fn new(n: usize) -> Self {
        let mut forward = vec![0.0; n * n];
        let norm0 = (1.0 / n as f64).sqrt();
        let norm = (2.0 / n as f64).sqrt();
        for k in 0..n {
            let alpha = if k == 0 { norm0 } else { norm };
            for j in 0..n {
                let angle = std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2 * n) as f64;
                forward[k * n + j] = alpha * angle.cos();
            }
        }
        DctBasis { n, forward }
    }

    fn transposed(&self) -> Vec<f64> {
        let n = self.n;
        let mut t = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                t[j * n + i] = self.forward[i * n + j];
            }
        }
        t
    }
}

/// Row-major matrix product: `a` is `m x k`, `b` is `k x n`.
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * bv;
            }
        }
    }
    out
}

fn plane_dct2(plane: &[f64], row_basis: &DctBasis, col_basis_t: &[f64], h: usize, w: usize) -> Vec<f64> {
    let tmp = matmul(&row_basis.forward, plane, h, h, w);
    matmul(&tmp, col_basis_t, h, w, w)
}

fn plane_idct2(coeffs: &[f64], row_basis_t: &[f64], col_basis: &DctBasis, h: usize, w: usize) -> Vec<f64> {
    let tmp = matmul(row_basis_t, coeffs, h, h, w);
    matmul(&tmp, &col_basis.forward, h, w, w)
}

/// Forward orthonormal 2D DCT of every channel.
pub fn dct2(image: &Image) -> Result<Spectrum> {
    if !image.data.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("dct2 input".into()));
    }
    let (h, w) = (image.height, image.width);
    let row_basis = DctBasis::new(h);
    let col_basis = DctBasis::new(w);
    let col_t = col_basis.transposed();
    let mut coeffs = Vec::with_capacity(image.data.len());
    for c in 0..image.channels {
        coeffs.extend(plane_dct2(image.plane(c), &row_basis, &col_t, h, w));
    }
    Ok(Spectrum { channels: image.channels, height: h, width: w, coeffs })
}

/// Inverse of [`dct2`]; exact up to floating-point round-off.
pub fn idct2(spectrum: &Spectrum) -> Result<Image> {
    if !spectrum.coeffs.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("idct2 input".into()));
    }
    let (h, w) = (spectrum.height, spectrum.width);
    let row_basis = DctBasis::new(h);
    let col_basis = DctBasis::new(w);
    let row_t = row_basis.transposed();
    let mut data = Vec::with_capacity(spectrum.coeffs.len());
    for c in 0..spectrum.channels {
        data.extend(plane_idct2(spectrum.plane(c), &row_t, &col_basis, h, w));
    }
    Ok(Image { channels: spectrum.channels, height: h, width: w, data })
}

/// Normalized anti-diagonal frequency position of coefficient `(u, v)` in an
/// `h x w` spectrum: the mean of the per-axis normalized indices, in [0, 1].
/// Axes of extent 1 contribute nothing (a 1 x w spectrum is indexed by
/// `v / (w - 1)` alone; a 1 x 1 spectrum sits at 0).
///
/// Panics if `u >= h` or `v >= w`.
pub fn frequency_index(u: usize, v: usize, h: usize, w: usize) -> f64 {
    assert!(u < h && v < w, "coefficient ({u}, {v}) out of range for {h}x{w} spectrum");
    match (h > 1, w > 1) {
        (true, true) => 0.5 * (u as f64 / (h - 1) as f64 + v as f64 / (w - 1) as f64),
        (true, false) => u as f64 / (h - 1) as f64,
        (false, true) => v as f64 / (w - 1) as f64,
        (false, false) => 0.0,
    }
}

/// Zero every coefficient with frequency index strictly above `f_k`
/// (the boundary is kept). Surviving coefficients are copied bit-exactly, so
/// masking at a weaker threshold never changes a kept value and masks nest.
///
/// Panics if `f_k` is outside [0, 1].
pub fn low_pass_mask(spectrum: &Spectrum, f_k: f64) -> Spectrum {
    assert!((0.0..=1.0).contains(&f_k), "low-pass threshold {f_k} outside [0, 1]");
    let (h, w) = (spectrum.height, spectrum.width);
    let mut out = spectrum.clone();
    for c in 0..spectrum.channels {
        let base = c * h * w;
        for u in 0..h {
            for v in 0..w {
                if frequency_index(u, v, h, w) > f_k {
                    out.coeffs[base + u * w + v] = 0.0;
                }
            }
        }
    }
    out
}

/// Number of coefficients of an `h x w` spectrum kept by a low-pass mask at
/// threshold `f_k` (per channel).
pub fn retained_coefficients(h: usize, w: usize, f_k: f64) -> usize {
    let mut count = 0;
    for u in 0..h {
        for v in 0..w {
            if frequency_index(u, v, h, w) <= f_k {
                count += 1;
            }
        }
    }
    count
}

/// Thresholds for `k_bands` cumulative bands: band `k` (1-based) spans
/// frequencies up to `1 / 2^(k_bands - k)`, so successive bands halve the
/// cutoff going down from 1 and the last band keeps the full spectrum.
pub fn band_thresholds(k_bands: usize) -> Result<BandPlan> {
    if !(1..=8).contains(&k_bands) {
        return Err(Error::config(format!("band count must be in 1..=8, got {k_bands}")));
    }
    let thresholds = (1..=k_bands).map(|k| 1.0 / (1u64 << (k_bands - k)) as f64).collect();
    Ok(BandPlan { count: k_bands, thresholds })
}

/// Cumulative low-pass band decomposition: band `k` is the inverse transform
/// of the spectrum masked at `thresholds[k]`. Every band has the full input
/// shape; the last band reconstructs the input up to round-off. Bands are
/// computed independently per (channel, band) pair, so the parallel schedule
/// cannot affect the result.
pub fn decompose(image: &Image, k_bands: usize) -> Result<Vec<Image>> {
    let plan = band_thresholds(k_bands)?;
    let spectrum = dct2(image)?;
    let (h, w) = (image.height, image.width);
    let row_basis = DctBasis::new(h);
    let col_basis = DctBasis::new(w);
    let row_t = row_basis.transposed();

    let jobs: Vec<(usize, usize)> = (0..plan.count)
        .flat_map(|band| (0..image.channels).map(move |c| (band, c)))
        .collect();
    let planes: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(band, c)| {
            let f_k = plan.thresholds[band];
            let mut masked = spectrum.plane(c).to_vec();
            for u in 0..h {
                for v in 0..w {
                    if frequency_index(u, v, h, w) > f_k {
                        masked[u * w + v] = 0.0;
                    }
                }
            }
            plane_idct2(&masked, &row_t, &col_basis, h, w)
        })
        .collect();

    let mut bands = Vec::with_capacity(plan.count);
    for band in 0..plan.count {
        let mut data = Vec::with_capacity(image.data.len());
        for c in 0..image.channels {
            data.extend_from_slice(&planes[band * image.channels + c]);
        }
        bands.push(Image { channels: image.channels, height: h, width: w, data });
    }
    Ok(bands)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn constant_image_concentrates_at_dc() {
        let c = 3.25;
        let img = Image::new(1, 8, 8, vec![c; 64]).unwrap();
        let spec = dct2(&img).unwrap();
        // alpha_0^2 * sum = (1/sqrt(8))^2 * 64c = 8c.
        assert!(close(spec.coeffs[0], 8.0 * c, 1e-12));
        for (i, &v) in spec.coeffs.iter().enumerate().skip(1) {
            assert!(v.abs() < 1e-12, "coefficient {i} should vanish, got {v}");
        }
    }

    #[test]
    fn frequency_index_matches_hand_values() {
        assert_eq!(frequency_index(0, 0, 16, 16), 0.0);
        assert_eq!(frequency_index(223, 0, 224, 224), 0.5);
        assert_eq!(frequency_index(0, 223, 224, 224), 0.5);
        assert_eq!(frequency_index(223, 223, 224, 224), 1.0);
        // Single-axis cases drop the degenerate term entirely.
        assert_eq!(frequency_index(0, 3, 1, 7), 0.5);
        assert_eq!(frequency_index(3, 0, 7, 1), 0.5);
        assert_eq!(frequency_index(0, 0, 1, 1), 0.0);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn frequency_index_rejects_out_of_range() {
        frequency_index(4, 0, 4, 4);
    }

    #[test]
    fn band_thresholds_halve_down_from_one() {
        let plan = band_thresholds(4).unwrap();
        assert_eq!(plan.thresholds, vec![0.125, 0.25, 0.5, 1.0]);
        assert_eq!(plan.count, 4);
        assert_eq!(band_thresholds(1).unwrap().thresholds, vec![1.0]);
        assert_eq!(
            band_thresholds(6).unwrap().thresholds,
            vec![0.03125, 0.0625, 0.125, 0.25, 0.5, 1.0]
        );
        assert!(band_thresholds(0).is_err());
        assert!(band_thresholds(9).is_err());
    }

    #[test]
    fn mask_at_zero_keeps_only_dc() {
        let img = Image::new(1, 6, 5, (0..30).map(|i| i as f64).collect()).unwrap();
        let spec = dct2(&img).unwrap();
        let masked = low_pass_mask(&spec, 0.0);
        assert_eq!(masked.coeffs[0], spec.coeffs[0]);
        assert!(masked.coeffs[1..].iter().all(|&v| v == 0.0));
        assert_eq!(retained_coefficients(6, 5, 0.0), 1);
    }

    #[test]
    fn mask_at_one_is_identity_and_masking_is_idempotent() {
        let img = Image::new(2, 7, 4, (0..56).map(|i| (i as f64).sin()).collect()).unwrap();
        let spec = dct2(&img).unwrap();
        let full = low_pass_mask(&spec, 1.0);
        assert_eq!(full.coeffs, spec.coeffs);
        let once = low_pass_mask(&spec, 0.3);
        let twice = low_pass_mask(&once, 0.3);
        assert_eq!(once.coeffs, twice.coeffs);
    }

    #[test]
    fn masks_nest_bitwise() {
        let img = Image::new(1, 9, 9, (0..81).map(|i| ((i * 37) % 11) as f64).collect()).unwrap();
        let spec = dct2(&img).unwrap();
        let plan = band_thresholds(5).unwrap();
        for pair in plan.thresholds.windows(2) {
            let lo = low_pass_mask(&spec, pair[0]);
            let hi = low_pass_mask(&spec, pair[1]);
            // Every coefficient surviving the tighter mask survives the looser
            // one with the identical bit pattern.
            for (a, b) in lo.coeffs.iter().zip(&hi.coeffs) {
                if *a != 0.0 {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn retained_count_matches_mask_support() {
        let img = Image::new(1, 12, 10, (0..120).map(|i| (i as f64).cos()).collect()).unwrap();
        let spec = dct2(&img).unwrap();
        for f_k in [0.0, 0.125, 0.25, 0.5, 0.75, 1.0] {
            let masked = low_pass_mask(&spec, f_k);
            let nonzero_capable = retained_coefficients(12, 10, f_k);
            let kept_positions = (0..12 * 10)
                .filter(|i| frequency_index(i / 10, i % 10, 12, 10) <= f_k)
                .count();
            assert_eq!(nonzero_capable, kept_positions);
            // Zeroed positions are exactly the complement.
            let zeroed = masked.coeffs.iter().zip(&spec.coeffs).filter(|(m, _)| **m == 0.0).count();
            assert!(zeroed >= 12 * 10 - nonzero_capable);
        }
    }

    #[test]
    fn decompose_validates_band_count() {
        let img = Image::new(1, 4, 4, vec![1.0; 16]).unwrap();
        assert!(decompose(&img, 0).is_err());
        assert!(decompose(&img, 9).is_err());
        assert_eq!(decompose(&img, 3).unwrap().len(), 3);
    }

    #[test]
    fn last_band_reconstructs_input() {
        let data: Vec<f64> = (0..3 * 16 * 16).map(|i| ((i * 131) % 251) as f64 / 251.0).collect();
        let img = Image::new(3, 16, 16, data).unwrap();
        let bands = decompose(&img, 4).unwrap();
        let last = &bands[3];
        for (a, b) in last.data.iter().zip(&img.data) {
            assert!(close(*a, *b, 1e-12), "full band should round-trip, {a} vs {b}");
        }
    }

    #[test]
    fn image_constructor_rejects_bad_inputs() {
        assert!(Image::new(0, 4, 4, vec![]).is_err());
        assert!(Image::new(1, 4, 4, vec![0.0; 15]).is_err());
        assert!(Image::new(1, 2, 2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }
}
