//! Acceptance gate: eight end-to-end checks with pinned tolerances and
//! runtime budgets. Each test prints one `criterion N PASS` line (visible
//! with `--nocapture`); the harness result line per test is the pass/fail
//! record. Timed checks hold a global lock so measurements never overlap.

use std::path::PathBuf;
use std::process::{Command, Output};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use globalmamba::model::preset;
use globalmamba::serialization::sequence_length;
use globalmamba::spectral::{band_thresholds, dct2, decompose, idct2, low_pass_mask, Image};
use globalmamba::ssm::{max_relative_deviation, scan_parallel, scan_sequential, SsmWeights};
use globalmamba::train::{
    discretize_derivative_deviation, grad_check, train, DatasetConfig, TrainConfig,
};

/// Serializes the tests so runtime budgets are measured on an idle machine.
static GATE: Mutex<()> = Mutex::new(());

fn gate() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gmba")
}

/// Fresh scratch directory under the build tree.
fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create scratch dir");
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn gmba")
}

fn stdout_of(out: &Output) -> String {
    assert!(
        out.status.success(),
        "FAIL: gmba exited with {:?}; stderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).expect("stdout is utf-8")
}

/// Field `index` of the last CSV row whose `split_col` equals `split`.
fn last_csv_field(csv: &str, split_col: usize, split: &str, index: usize) -> f64 {
    csv.lines()
        .skip(1)
        .filter(|l| l.split(',').nth(split_col) == Some(split))
        .last()
        .unwrap_or_else(|| panic!("FAIL: no CSV row with column {split_col} = {split}"))
        .split(',')
        .nth(index)
        .expect("CSV field")
        .parse()
        .expect("numeric CSV field")
}

#[test]
fn criterion_1_length_table_for_base_grid_14_is_byte_exact() {
    let _g = gate();
    let dir = scratch("acc1");
    let started = Instant::now();
    let out = run(&["lengths", "--base-grid", "14", "--cls", "--out-dir", dir.to_str().unwrap()]);
    let elapsed = started.elapsed();
    let expected = "K,band_grids,length\n\
                    1,14,197\n\
                    2,7 14,246\n\
                    3,3 7 14,255\n\
                    4,1 3 7 14,256\n\
                    5,1 1 3 7 14,257\n\
                    6,1 1 1 3 7 14,258\n";
    let got = stdout_of(&out);
    assert_eq!(got, expected, "FAIL: length table bytes differ");
    assert!(elapsed < Duration::from_secs(1), "FAIL: length table took {elapsed:?} (budget 1 s)");
    println!("criterion 1 PASS: lengths 197/246/255/256/257/258 byte-exact in {elapsed:?}");
}

#[test]
fn criterion_2_four_band_overhead_ratio_is_about_thirty_percent() {
    let full = sequence_length(4, 14, true).unwrap() as f64;
    let single = sequence_length(1, 14, true).unwrap() as f64;
    let ratio = full / single;
    assert_eq!(format!("{ratio:.3}"), "1.299", "FAIL: 256/197 should round to 1.299");
    assert!(
        (1.25..=1.35).contains(&ratio),
        "FAIL: overhead ratio {ratio} outside [1.25, 1.35]"
    );
    println!("criterion 2 PASS: sequence overhead ratio {ratio:.10} within [1.25, 1.35]");
}

#[test]
fn criterion_3_spectral_suite_holds_at_double_precision() {
    let _g = gate();
    const ROUND_TRIP_TOL: f64 = 1e-10;
    const PARSEVAL_TOL: f64 = 1e-10;
    const SINGLE_PRECISION_TOL: f32 = 1e-6;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(301);

    // 200 random 32x32 planes: inversion and energy preservation.
    for case in 0..200 {
        let data: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let img = Image::new(1, 32, 32, data).unwrap();
        let spec = dct2(&img).unwrap();
        let back = idct2(&spec).unwrap();
        let round_trip =
            img.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(
            round_trip < ROUND_TRIP_TOL,
            "FAIL: case {case} round-trip error {round_trip} >= {ROUND_TRIP_TOL}"
        );
        let parseval = (img.energy() - spec.energy()).abs() / img.energy();
        assert!(
            parseval < PARSEVAL_TOL,
            "FAIL: case {case} energy drift {parseval} >= {PARSEVAL_TOL}"
        );
    }

    // Mask nesting is exact: masking at a lower threshold ignores whether a
    // higher-threshold mask ran first, and survivors only ever grow.
    let data: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let spec = dct2(&Image::new(1, 32, 32, data).unwrap()).unwrap();
    let plan = band_thresholds(6).unwrap();
    for pair in plan.thresholds.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let direct = low_pass_mask(&spec, lo);
        let nested = low_pass_mask(&low_pass_mask(&spec, hi), lo);
        assert_eq!(
            direct.coeffs.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            nested.coeffs.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "FAIL: masks at {lo} and {hi} are not nested"
        );
        let wide = low_pass_mask(&spec, hi);
        for (narrow, wide) in direct.coeffs.iter().zip(&wide.coeffs) {
            assert!(
                *narrow == 0.0 || narrow == wide,
                "FAIL: a coefficient kept at {lo} was altered at {hi}"
            );
        }
    }

    // Single-band decomposition returns the image within single precision.
    let data: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let img = Image::new(1, 32, 32, data).unwrap();
    let bands = decompose(&img, 1).unwrap();
    let worst = img
        .data
        .iter()
        .zip(&bands[0].data)
        .map(|(a, b)| (*a as f32 - *b as f32).abs())
        .fold(0.0, f32::max);
    assert!(
        worst <= SINGLE_PRECISION_TOL,
        "FAIL: single-band reconstruction off by {worst} > {SINGLE_PRECISION_TOL}"
    );

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(10), "FAIL: spectral suite took {elapsed:?} (budget 10 s)");
    println!("criterion 3 PASS: 200 round trips, nesting, and single-band identity in {elapsed:?}");
}

#[test]
fn criterion_4_parallel_scan_matches_sequential_and_is_causal() {
    let _g = gate();
    const SCAN_TOL: f32 = 1e-5;
    const LENGTHS: [usize; 6] = [1, 2, 197, 256, 257, 4096];
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let (d, n) = (4, 8);

    let random_weights = |rng: &mut ChaCha8Rng| {
        let a_diag: Vec<f32> = (0..d * n).map(|_| -rng.gen_range(0.05f32..2.0).exp()).collect();
        let mat = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f32> {
            (0..len).map(|_| rng.gen_range(-0.5f32..0.5)).collect()
        };
        SsmWeights::new(
            d,
            n,
            a_diag,
            mat(rng, n * d),
            mat(rng, n * d),
            mat(rng, d * d),
            mat(rng, d),
            mat(rng, d),
        )
        .unwrap()
    };

    let mut worst = 0.0f32;
    for case in 0..100 {
        let t_len = LENGTHS[case % LENGTHS.len()];
        let weights = random_weights(&mut rng);
        let inputs: Vec<f32> = (0..t_len * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let sequential = scan_sequential(&weights, &inputs);
        let parallel = scan_parallel(&weights, &inputs);
        let dev = max_relative_deviation(&parallel, &sequential);
        assert!(
            dev < SCAN_TOL,
            "FAIL: case {case} (T={t_len}) scans deviate by {dev} >= {SCAN_TOL}"
        );
        worst = worst.max(dev);
    }

    // Causality: editing the input at one step leaves all earlier outputs
    // bitwise untouched.
    let weights = random_weights(&mut rng);
    let t_len = 257;
    let edit_at = 100;
    let inputs: Vec<f32> = (0..t_len * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mut edited = inputs.clone();
    for c in 0..d {
        edited[edit_at * d + c] += 3.0;
    }
    for scan in [scan_sequential, scan_parallel] {
        let base = scan(&weights, &inputs);
        let bumped = scan(&weights, &edited);
        assert_eq!(
            base[..edit_at * d]
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            bumped[..edit_at * d]
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            "FAIL: outputs before the edited step changed"
        );
        assert!(
            base[edit_at * d..] != bumped[edit_at * d..],
            "FAIL: the edit never reached the outputs"
        );
    }

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "FAIL: scan suite took {elapsed:?} (budget 30 s)");
    println!(
        "criterion 4 PASS: 100 cases max deviation {worst:.3e} < {SCAN_TOL:.0e}, causal, in {elapsed:?}"
    );
}

#[test]
fn criterion_5_gradients_match_finite_differences_end_to_end() {
    let _g = gate();
    const PROBES: usize = 50;
    const EPSILON: f64 = 1e-3;
    const MAX_TOL: f64 = 1e-2;
    const MEDIAN_TOL: f64 = 1e-3;
    const DISCRETIZE_TOL: f64 = 1e-6;
    let started = Instant::now();

    let config = preset("micro_plain").unwrap();
    let report = grad_check(&config, 0, PROBES, EPSILON, MAX_TOL).unwrap();
    assert_eq!(report.rows.len(), PROBES, "FAIL: expected {PROBES} probes");
    assert!(
        report.passed && report.max_relative_error < MAX_TOL,
        "FAIL: max relative error {} >= {MAX_TOL}",
        report.max_relative_error
    );
    assert!(
        report.median_relative_error < MEDIAN_TOL,
        "FAIL: median relative error {} >= {MEDIAN_TOL}",
        report.median_relative_error
    );

    let deviation = discretize_derivative_deviation();
    assert!(
        deviation < DISCRETIZE_TOL,
        "FAIL: discretization derivative off by {deviation} >= {DISCRETIZE_TOL}"
    );

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(120), "FAIL: gradient checks took {elapsed:?} (budget 2 min)");
    println!(
        "criterion 5 PASS: {PROBES} probes max {:.3e} median {:.3e}, step-size derivative {deviation:.1e}, in {elapsed:?}",
        report.max_relative_error, report.median_relative_error
    );
}

#[test]
fn criterion_6_one_batch_overfit_and_synthetic_run_reach_targets() {
    let _g = gate();

    // One batch of 32 samples must be memorized within 300 steps.
    let mut overfit = TrainConfig::desk_default(preset("micro_plain").unwrap());
    overfit.dataset = DatasetConfig::SyntheticBands { train_per_class: 4, test_per_class: 1 };
    overfit.batch_size = 32;
    overfit.epochs = 300;
    overfit.base_lr = 2e-3;
    overfit.augment = false;
    overfit.stop_at_train_accuracy = Some(1.0);
    let outcome = train(&overfit).unwrap();
    assert!(
        outcome.final_train_accuracy() == 1.0 && outcome.steps_run <= 300,
        "FAIL: one-batch accuracy {} after {} steps (budget 300)",
        outcome.final_train_accuracy(),
        outcome.steps_run
    );

    // The stock ten-epoch synthetic run must generalize on one CPU in
    // under fifteen minutes.
    let dir = scratch("acc6");
    let started = Instant::now();
    let out = run(&["train", "--seed", "0", "--out-dir", dir.to_str().unwrap()]);
    let elapsed = started.elapsed();
    stdout_of(&out);
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).expect("metrics.csv");
    let accuracy = last_csv_field(&csv, 2, "test", 4);
    assert!(accuracy >= 0.90, "FAIL: test accuracy {accuracy} < 0.90 after ten epochs");
    assert!(
        elapsed < Duration::from_secs(900),
        "FAIL: ten-epoch run took {elapsed:?} (budget 15 min)"
    );
    println!(
        "criterion 6 PASS: one-batch overfit in {} steps; test accuracy {accuracy:.4} in {elapsed:?}",
        outcome.steps_run
    );
}

#[test]
fn criterion_7_coarse_first_ordering_wins_and_band_sweep_lengths_agree() {
    let _g = gate();
    let started = Instant::now();

    // Three seeds per emission order. Two epochs sit mid-convergence, where
    // emission order shows up as convergence speed (measured: coarse-first
    // 0.9987 vs random 0.9857, winning on every seed; at five or more epochs
    // every order saturates and the comparison collapses to ties).
    let order_dir = scratch("acc7_order");
    let out = run(&[
        "ablate", "--axis", "order", "--epochs", "2", "--seed", "0",
        "--out-dir", order_dir.to_str().unwrap(),
    ]);
    stdout_of(&out);
    let summary =
        std::fs::read_to_string(order_dir.join("ablation_summary.csv")).expect("summary csv");
    let mean_of = |variant: &str| -> f64 { last_csv_field(&summary, 0, variant, 1) };
    let (low, random) = (mean_of("low_to_high"), mean_of("random"));
    assert!(
        low >= random,
        "FAIL: coarse-first mean accuracy {low} below random-order mean {random}"
    );

    // Band-count sweep: sequence lengths must match the closed form.
    let sweep_dir = scratch("acc7_sweep");
    let out = run(&[
        "ablate", "--axis", "K", "--epochs", "2", "--seed", "0",
        "--out-dir", sweep_dir.to_str().unwrap(),
    ]);
    stdout_of(&out);
    let rows = std::fs::read_to_string(sweep_dir.join("ablation.csv")).expect("ablation csv");
    let mut seen = 0;
    for line in rows.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let k: usize = fields[3].parse().expect("band count");
        let length: usize = fields[4].parse().expect("sequence length");
        let accuracy: f64 = fields[5].parse().expect("accuracy");
        let expected = sequence_length(k, 8, true).unwrap();
        assert_eq!(length, expected, "FAIL: K={k} row reports length {length}, expected {expected}");
        assert!(
            (0.0..=1.0).contains(&accuracy),
            "FAIL: K={k} accuracy {accuracy} outside [0, 1]"
        );
        seen += 1;
    }
    assert_eq!(seen, 6, "FAIL: expected six sweep rows, saw {seen}");

    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(5400),
        "FAIL: ablations took {elapsed:?} (budget 90 min)"
    );
    println!(
        "criterion 7 PASS: coarse-first {low:.4} >= random {random:.4}; sweep lengths agree; in {elapsed:?}"
    );
}

#[test]
fn criterion_8_training_rerun_reproduces_metrics_bytes() {
    let _g = gate();
    fn args(dir: &str) -> Vec<&str> {
        vec![
            "train", "--epochs", "2", "--train-per-class", "8", "--test-per-class", "4",
            "--seed", "123", "--out-dir", dir,
        ]
    }
    let (a, b) = (scratch("acc8_a"), scratch("acc8_b"));
    stdout_of(&run(&args(a.to_str().unwrap())));
    stdout_of(&run(&args(b.to_str().unwrap())));
    let metrics_a = std::fs::read(a.join("metrics.csv")).expect("first metrics.csv");
    let metrics_b = std::fs::read(b.join("metrics.csv")).expect("second metrics.csv");
    assert!(!metrics_a.is_empty(), "FAIL: metrics.csv is empty");
    assert_eq!(metrics_a, metrics_b, "FAIL: rerun changed metrics.csv bytes");
    let ckpt_a = std::fs::read(a.join("checkpoint.gmba")).expect("first checkpoint");
    let ckpt_b = std::fs::read(b.join("checkpoint.gmba")).expect("second checkpoint");
    assert_eq!(ckpt_a, ckpt_b, "FAIL: rerun changed checkpoint bytes");
    println!(
        "criterion 8 PASS: identical reruns reproduce {} metric bytes and {} checkpoint bytes",
        metrics_a.len(),
        ckpt_a.len()
    );
}
