//! Spectral module checked against a direct quadruple-sum DCT oracle and the
//! transform identities (round trip, energy preservation, linearity).

use globalmamba::spectral::{band_thresholds, dct2, decompose, idct2, low_pass_mask, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct evaluation of the orthonormal DCT-II definition, O(h*w) per
/// coefficient. Deliberately shares no code with the library implementation.
fn naive_dct2_plane(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let alpha = |k: usize, n: usize| -> f64 {
        if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        }
    };
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let cu = (std::f64::consts::PI * (2 * i + 1) as f64 * u as f64
                        / (2 * h) as f64)
                        .cos();
                    let cv = (std::f64::consts::PI * (2 * j + 1) as f64 * v as f64
                        / (2 * w) as f64)
                        .cos();
                    acc += plane[i * w + j] * cu * cv;
                }
            }
            out[u * w + v] = alpha(u, h) * alpha(v, w) * acc;
        }
    }
    out
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
    let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Image::new(c, h, w, data).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn separable_transform_matches_direct_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = random_image(&mut rng, 2, 16, 12);
    let spec = dct2(&img).unwrap();
    for c in 0..2 {
        let oracle = naive_dct2_plane(img.plane(c), 16, 12);
        let diff = max_abs_diff(spec.plane(c), &oracle);
        assert!(diff < 1e-12, "channel {c}: separable vs direct differ by {diff}");
    }
}

#[test]
fn round_trip_is_exact_to_double_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (h, w) in [(32, 32), (17, 31), (1, 16), (16, 1), (2, 2), (1, 1)] {
        let img = random_image(&mut rng, 1, h, w);
        let back = idct2(&dct2(&img).unwrap()).unwrap();
        let diff = max_abs_diff(&back.data, &img.data);
        assert!(diff < 1e-12, "{h}x{w} round trip error {diff}");
    }
}

#[test]
fn transform_preserves_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let img = random_image(&mut rng, 1, 24, 18);
        let spec = dct2(&img).unwrap();
        let rel = (img.energy() - spec.energy()).abs() / img.energy();
        assert!(rel < 1e-13, "energy drifted by relative {rel}");
    }
}

#[test]
fn transform_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random_image(&mut rng, 1, 10, 14);
    let y = random_image(&mut rng, 1, 10, 14);
    let (a, b) = (0.7, -2.3);
    let combo_data: Vec<f64> =
        x.data.iter().zip(&y.data).map(|(xv, yv)| a * xv + b * yv).collect();
    let combo = Image::new(1, 10, 14, combo_data).unwrap();
    let lhs = dct2(&combo).unwrap();
    let sx = dct2(&x).unwrap();
    let sy = dct2(&y).unwrap();
    let rhs: Vec<f64> = sx.coeffs.iter().zip(&sy.coeffs).map(|(u, v)| a * u + b * v).collect();
    assert!(max_abs_diff(&lhs.coeffs, &rhs) < 1e-12);
}

#[test]
fn band_energy_is_monotone_in_both_domains() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let img = random_image(&mut rng, 1, 32, 32);
    let bands = decompose(&img, 5).unwrap();
    let mut last_pixel = 0.0;
    let mut last_spectral = 0.0;
    for band in &bands {
        let pe = band.energy();
        let se = dct2(band).unwrap().energy();
        assert!(pe >= last_pixel - 1e-9, "pixel-domain band energy decreased");
        assert!(se >= last_spectral - 1e-9, "spectral band energy decreased");
        last_pixel = pe;
        last_spectral = se;
    }
    // The full band carries all the input energy.
    assert!((last_pixel - img.energy()).abs() / img.energy() < 1e-12);
}

#[test]
fn single_band_decomposition_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let img = random_image(&mut rng, 3, 32, 32);
    let bands = decompose(&img, 1).unwrap();
    assert_eq!(bands.len(), 1);
    assert!(max_abs_diff(&bands[0].data, &img.data) < 1e-10);
}

#[test]
fn masked_energy_equals_survivor_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let img = random_image(&mut rng, 1, 20, 20);
    let spec = dct2(&img).unwrap();
    let plan = band_thresholds(4).unwrap();
    for &f_k in &plan.thresholds {
        let masked = low_pass_mask(&spec, f_k);
        let band = idct2(&masked).unwrap();
        // Energy of the band equals energy of the kept coefficients.
        let rel = (band.energy() - masked.energy()).abs() / spec.energy();
        assert!(rel < 1e-13);
        assert!(masked.energy() <= spec.energy() + 1e-12);
    }
}

#[test]
fn decomposition_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let img = random_image(&mut rng, 2, 16, 16);
    let a = decompose(&img, 4).unwrap();
    let b = decompose(&img, 4).unwrap();
    for (x, y) in a.iter().zip(&b) {
        let bits_a: Vec<u64> = x.data.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = y.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}
