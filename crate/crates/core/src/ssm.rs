//! Single-precision selective state-space scan kernels.
//!
//! These are the reference recurrence implementations: a plain sequential
//! scan (the ground truth, single-threaded, linear in sequence length) and a
//! work-efficient parallel form that reassociates the time dimension through
//! an up-sweep/down-sweep over the usual linear-recurrence composition
//! `(a2, b2) . (a1, b1) = (a2*a1, a2*b1 + b2)`. The tree shape is a pure
//! function of the sequence length, so results never depend on scheduling.
//! Both forms spend O(T) compositions per lane (the sweep does at most
//! `2 * (next_pow2(T) - 1)` of them).
//!
//! The trainable model drives its own fused tape op instead of these
//! kernels; tests hold the two routes against each other.

use crate::error::{Error, Result};

/// Parameters of one selective state-space layer over `channels` input
/// channels with `state` recurrent modes per channel.
///
/// `a_diag` must be strictly negative so the discretized transition
/// `exp(delta * a)` contracts for every positive step size.
#[derive(Debug, Clone)]
pub struct SsmWeights {
    pub channels: usize,
    pub state: usize,
    /// (channels, state), strictly negative.
    pub a_diag: Vec<f32>,
    /// (state, channels): input-dependent B_t = w_b . x_t.
    pub w_b: Vec<f32>,
    /// (state, channels): input-dependent C_t = w_c . x_t.
    pub w_c: Vec<f32>,
    /// (channels, channels): pre-softplus step sizes.
    pub w_delta: Vec<f32>,
    /// (channels): pre-softplus step-size bias.
    pub b_delta: Vec<f32>,
    /// (channels): direct input passthrough.
    pub d_skip: Vec<f32>,
}

impl SsmWeights {
    pub fn new(
        channels: usize,
        state: usize,
        a_diag: Vec<f32>,
        w_b: Vec<f32>,
        w_c: Vec<f32>,
        w_delta: Vec<f32>,
        b_delta: Vec<f32>,
        d_skip: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 || state == 0 {
            return Err(Error::shape("SSM dimensions must be nonzero".to_string()));
        }
        let expect = [
            (a_diag.len(), channels * state, "a_diag"),
            (w_b.len(), state * channels, "w_b"),
            (w_c.len(), state * channels, "w_c"),
            (w_delta.len(), channels * channels, "w_delta"),
            (b_delta.len(), channels, "b_delta"),
            (d_skip.len(), channels, "d_skip"),
        ];
        for (got, want, name) in expect {
            if got != want {
                return Err(Error::shape(format!("{name} has {got} entries, expected {want}")));
            }
        }
        let all = a_diag
            .iter()
            .chain(&w_b)
            .chain(&w_c)
            .chain(&w_delta)
            .chain(&b_delta)
            .chain(&d_skip);
        if !all.into_iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("SSM weights".into()));
        }
        if !a_diag.iter().all(|&a| a < 0.0) {
            return Err(Error::config("a_diag entries must be strictly negative".to_string()));
        }
        Ok(SsmWeights { channels, state, a_diag, w_b, w_c, w_delta, b_delta, d_skip })
    }
}

/// Zero-order-hold discretization of one channel's diagonal recurrence:
/// `abar_n = exp(delta * a_n)`, `bbar_n = ((abar_n - 1) / a_n) * b_n`.
///
/// Panics if `delta` is not positive or any `a_n` is not strictly negative.
pub fn discretize(a_diag: &[f32], b_t: &[f32], delta_t: f32) -> (Vec<f32>, Vec<f32>) {
    assert!(delta_t > 0.0, "step size must be positive, got {delta_t}");
    assert_eq!(a_diag.len(), b_t.len(), "state dimension mismatch");
    let mut abar = Vec::with_capacity(a_diag.len());
    let mut bbar = Vec::with_capacity(a_diag.len());
    for (&a, &b) in a_diag.iter().zip(b_t) {
        assert!(a < 0.0, "transition entries must be strictly negative, got {a}");
        let e = (delta_t * a).exp();
        abar.push(e);
        bbar.push((e - 1.0) / a * b);
    }
    (abar, bbar)
}

/// Input-dependent scan parameters for one time step:
/// `B_t = w_b x_t`, `C_t = w_c x_t`, `delta_t = softplus(w_delta x_t + b_delta)`.
pub fn selective_params(weights: &SsmWeights, x_t: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (d, n) = (weights.channels, weights.state);
    assert_eq!(x_t.len(), d, "input has {} channels, weights expect {d}", x_t.len());
    let mat_vec = |m: &[f32], rows: usize| -> Vec<f32> {
        (0..rows)
            .map(|r| m[r * d..(r + 1) * d].iter().zip(x_t).map(|(w, x)| w * x).sum())
            .collect()
    };
    let b_t = mat_vec(&weights.w_b, n);
    let c_t = mat_vec(&weights.w_c, n);
    let delta_t: Vec<f32> = mat_vec(&weights.w_delta, d)
        .iter()
        .zip(&weights.b_delta)
        .map(|(z, b)| softplus(z + b))
        .collect();
    (b_t, c_t, delta_t)
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Ground-truth recurrence: one pass over time, state kept per
/// (channel, mode) lane, `y_t = <C_t, h_t> + d_skip * x_t` per channel.
/// `inputs` is (t, channels) row-major; so is the output.
pub fn scan_sequential(weights: &SsmWeights, inputs: &[f32]) -> Vec<f32> {
    scan_sequential_counted(weights, inputs).0
}

/// [`scan_sequential`] with an operation counter: one unit per (t, channel,
/// mode) state update, which is exactly how the cost scales.
pub fn scan_sequential_counted(weights: &SsmWeights, inputs: &[f32]) -> (Vec<f32>, u64) {
    let (d, n) = (weights.channels, weights.state);
    assert_eq!(inputs.len() % d, 0, "input length must be a multiple of {d}");
    let t_len = inputs.len() / d;
    let mut h = vec![0.0f32; d * n];
    let mut y = vec![0.0f32; inputs.len()];
    let mut ops = 0u64;
    for t in 0..t_len {
        let x_t = &inputs[t * d..(t + 1) * d];
        let (b_t, c_t, delta_t) = selective_params(weights, x_t);
        for di in 0..d {
            let (abar, bbar) = discretize(
                &weights.a_diag[di * n..(di + 1) * n],
                &b_t,
                delta_t[di],
            );
            let h_row = &mut h[di * n..(di + 1) * n];
            let mut acc = 0.0f32;
            for ni in 0..n {
                h_row[ni] = abar[ni] * h_row[ni] + bbar[ni] * x_t[di];
                acc += c_t[ni] * h_row[ni];
                ops += 1;
            }
            y[t * d + di] = acc + weights.d_skip[di] * x_t[di];
        }
    }
    (y, ops)
}

/// Linear-recurrence element: h -> a * h + b.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine {
    a: f32,
    b: f32,
}

const AFFINE_IDENTITY: Affine = Affine { a: 1.0, b: 0.0 };

/// Composition `later . earlier` (apply `earlier` first).
fn compose(later: Affine, earlier: Affine) -> Affine {
    Affine { a: later.a * earlier.a, b: later.a * earlier.b + later.b }
}

/// Work-efficient inclusive scan over one lane, in place. Pads to the next
/// power of two with the identity element; the reduction tree is therefore
/// fixed by the input length alone.
fn blelloch_inclusive(lane: &mut Vec<Affine>, compositions: &mut u64) {
    let t_len = lane.len();
    if t_len <= 1 {
        return;
    }
    let m = t_len.next_power_of_two();
    lane.resize(m, AFFINE_IDENTITY);
    let elements = lane.clone();

    // Up-sweep: each parent slot accumulates its segment, later-half first.
    let mut stride = 1;
    while stride < m {
        let mut i = 2 * stride - 1;
        while i < m {
            lane[i] = compose(lane[i], lane[i - stride]);
            *compositions += 1;
            i += 2 * stride;
        }
        stride *= 2;
    }

    // Down-sweep turns the tree into exclusive prefixes.
    lane[m - 1] = AFFINE_IDENTITY;
    stride = m / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < m {
            let left = lane[i - stride];
            lane[i - stride] = lane[i];
            lane[i] = compose(left, lane[i]);
            *compositions += 1;
            i += 2 * stride;
        }
        stride /= 2;
    }

    // Inclusive prefix = own element composed onto the exclusive prefix.
    for i in 0..t_len {
        lane[i] = compose(elements[i], lane[i]);
        *compositions += 1;
    }
    lane.truncate(t_len);
}

/// Scan with the time dimension reassociated through the work-efficient
/// prefix tree. Produces the same outputs as [`scan_sequential`] up to
/// single-precision round-off.
pub fn scan_parallel(weights: &SsmWeights, inputs: &[f32]) -> Vec<f32> {
    scan_parallel_counted(weights, inputs).0
}

/// [`scan_parallel`] with a composition counter (work-efficiency probe).
pub fn scan_parallel_counted(weights: &SsmWeights, inputs: &[f32]) -> (Vec<f32>, u64) {
    let (d, n) = (weights.channels, weights.state);
    assert_eq!(inputs.len() % d, 0, "input length must be a multiple of {d}");
    let t_len = inputs.len() / d;
    let mut y = vec![0.0f32; inputs.len()];
    if t_len == 0 {
        return (y, 0);
    }

    // Per-step parameters once; lanes reuse them.
    let mut b_all = vec![0.0f32; t_len * n];
    let mut c_all = vec![0.0f32; t_len * n];
    let mut delta_all = vec![0.0f32; t_len * d];
    for t in 0..t_len {
        let (b_t, c_t, delta_t) = selective_params(weights, &inputs[t * d..(t + 1) * d]);
        b_all[t * n..(t + 1) * n].copy_from_slice(&b_t);
        c_all[t * n..(t + 1) * n].copy_from_slice(&c_t);
        delta_all[t * d..(t + 1) * d].copy_from_slice(&delta_t);
    }

    let mut compositions = 0u64;
    let mut lane: Vec<Affine> = Vec::with_capacity(t_len.next_power_of_two());
    for di in 0..d {
        for ni in 0..n {
            let a = weights.a_diag[di * n + ni];
            lane.clear();
            for t in 0..t_len {
                let delta = delta_all[t * d + di];
                let abar = (delta * a).exp();
                let bbar = (abar - 1.0) / a * b_all[t * n + ni];
                lane.push(Affine { a: abar, b: bbar * inputs[t * d + di] });
            }
            blelloch_inclusive(&mut lane, &mut compositions);
            // h starts at zero, so h_t is the b-component of the prefix.
            for t in 0..t_len {
                y[t * d + di] += c_all[t * n + ni] * lane[t].b;
            }
        }
    }
    for t in 0..t_len {
        for di in 0..d {
            y[t * d + di] += weights.d_skip[di] * inputs[t * d + di];
        }
    }
    (y, compositions)
}

/// Largest relative deviation between two equal-length signals, normalized by
/// the reference's largest magnitude (a tiny floor guards all-zero signals).
pub fn max_relative_deviation(got: &[f32], reference: &[f32]) -> f32 {
    assert_eq!(got.len(), reference.len());
    let scale = reference.iter().fold(f32::MIN_POSITIVE, |m, &v| m.max(v.abs()));
    got.iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f32::max)
}
