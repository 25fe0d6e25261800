//! `gmba`: command-line driver for the band-serialized state-space
//! classifier. Subcommands cover the length table, band decomposition,
//! serialization inspection, training, evaluation, ablations, and gradient
//! checking. Every run is deterministic under `--seed` and writes a
//! `manifest.json` (command, config hash, versions, seed) into `--out-dir`.
//!
//! Exit codes: 0 success, 1 runtime failure (divergence, non-finite values,
//! a failed gradient check), 2 usage error (bad flags, unreadable or
//! malformed inputs).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use globalmamba::model::{load_checkpoint, preset, save_checkpoint, ModelConfig, ModelWeights};
use globalmamba::pgm::{quantize_plane, read_image, write_pgm};
use globalmamba::serialization::{band_grids, sequence_length, serialize, BandOrder};
use globalmamba::spectral::{band_thresholds, decompose, retained_coefficients, Image};
use globalmamba::train::{
    ablation_rows_csv, ablation_summary_csv, discretize_derivative_deviation, evaluate,
    grad_check, load_dataset, metrics_to_csv, run_ablation, train, AblationAxis, DatasetConfig,
    TrainConfig,
};
use globalmamba::{Error, Result};

#[derive(Parser)]
#[command(name = "gmba", version, about = "Frequency-band image serialization and classification")]
struct Cli {
    /// Run seed. Precedence: this flag > config file `seed` > 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for run artifacts and the manifest.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// JSON training-config file. Individual flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the band-grid / sequence-length table as CSV on stdout.
    Lengths {
        /// Inclusive band-count range, written "lo:hi".
        #[arg(long = "K-range", default_value = "1:6")]
        k_range: String,
        /// Token grid side of the finest band.
        #[arg(long, default_value_t = 14)]
        base_grid: usize,
        /// Count a trailing class token.
        #[arg(long)]
        cls: bool,
    },

    /// Split an image into cumulative low-pass bands; write band_k.pgm files
    /// plus per-band spectrum stats as JSON.
    Decompose {
        /// Input image (binary or ASCII PGM/PPM; PPM is converted to luma).
        #[arg(long)]
        input: PathBuf,
        /// Number of cumulative bands.
        #[arg(long = "K", default_value_t = 4)]
        k_bands: usize,
    },

    /// Report the token layout one image serializes to, as JSON.
    Serialize {
        /// Input image (square, at least as large as the model input side).
        #[arg(long)]
        input: PathBuf,
        /// Model preset, used when no --config file is given.
        #[arg(long, default_value = "micro_plain")]
        preset: String,
    },

    /// Train a classifier; write metrics.csv and checkpoint.gmba.
    Train(TrainArgs),

    /// Evaluate a checkpoint on a test split; write eval.json.
    Eval {
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-class synthetic test samples when no --test-dir is given.
        #[arg(long, default_value_t = 32)]
        test_per_class: usize,
        /// Directory of per-class image subdirectories to evaluate instead
        /// of the synthetic split.
        #[arg(long)]
        test_dir: Option<PathBuf>,
    },

    /// Train every variant along one axis; write ablation.csv and
    /// ablation_summary.csv.
    Ablate {
        /// Axis: "order" (band emission orders, three seeds each) or "K"
        /// (band-count sweep).
        #[arg(long)]
        axis: String,
        #[command(flatten)]
        train: TrainArgs,
    },

    /// Compare analytic gradients against central finite differences on
    /// sampled parameters; write gradcheck.json. Exits 1 when outside
    /// tolerance.
    Gradcheck {
        /// Model preset, used when no --config file is given.
        #[arg(long, default_value = "micro_plain")]
        preset: String,
        /// Number of sampled parameters.
        #[arg(long, default_value_t = 50)]
        probes: usize,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-2)]
        tolerance: f64,
    },
}

/// Training options. Each flag overrides the config file, which overrides
/// the preset defaults.
#[derive(Args, Clone)]
struct TrainArgs {
    /// Model preset (micro_plain or tiny_plain), used when no --config file
    /// is given.
    #[arg(long, default_value = "micro_plain")]
    preset: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate after warmup.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    /// Fraction of total steps spent on linear warmup.
    #[arg(long)]
    warmup_fraction: Option<f64>,
    /// Override the band count.
    #[arg(long = "K")]
    k_bands: Option<usize>,
    /// Band emission order: low_to_high, high_to_low, or random (random is
    /// shuffled deterministically from the run seed).
    #[arg(long)]
    order: Option<String>,
    /// Synthetic training samples per class.
    #[arg(long)]
    train_per_class: Option<usize>,
    /// Synthetic test samples per class.
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Directory of per-class training images (requires --test-dir).
    #[arg(long)]
    train_dir: Option<PathBuf>,
    /// Directory of per-class test images (requires --train-dir).
    #[arg(long)]
    test_dir: Option<PathBuf>,
    /// Disable horizontal-flip augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Stop after the first epoch whose training accuracy reaches this.
    #[arg(long)]
    stop_at_train_accuracy: Option<f64>,
    /// Print the resolved training config as JSON before running.
    #[arg(long)]
    print_config: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

/// 1 for failures of the computation itself, 2 for bad inputs or flags.
fn exit_code(err: &Error) -> ExitCode {
    match err {
        Error::Diverged { .. } | Error::NonFinite(_) | Error::Shape(_) => ExitCode::from(1),
        Error::Config(_) | Error::Format { .. } | Error::Io(_) => ExitCode::from(2),
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    init_threads()?;
    match &cli.command {
        Command::Lengths { k_range, base_grid, cls } => {
            let table = lengths_table(k_range, *base_grid, *cls)?;
            write_manifest(
                cli,
                "lengths",
                &json!({ "k_range": k_range, "base_grid": base_grid, "cls": cls }),
                effective_seed(cli)?,
            )?;
            print!("{table}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Decompose { input, k_bands } => {
            write_manifest(
                cli,
                "decompose",
                &json!({ "input": input.display().to_string(), "k_bands": k_bands }),
                effective_seed(cli)?,
            )?;
            cmd_decompose(&cli.out_dir, input, *k_bands)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Serialize { input, preset } => {
            let model = resolve_model(cli, preset)?;
            let seed = effective_seed(cli)?;
            write_manifest(
                cli,
                "serialize",
                &json!({
                    "input": input.display().to_string(),
                    "model": serde_json::to_value(&model).unwrap(),
                }),
                seed,
            )?;
            cmd_serialize(&cli.out_dir, input, &model, seed)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(args) => {
            let config = resolve_train_config(cli, args)?;
            if args.print_config {
                println!("{}", serde_json::to_string_pretty(&config).unwrap());
            }
            write_manifest(cli, "train", &serde_json::to_value(&config).unwrap(), config.seed)?;
            cmd_train(&cli.out_dir, &config)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { checkpoint, test_per_class, test_dir } => {
            let seed = effective_seed(cli)?;
            write_manifest(
                cli,
                "eval",
                &json!({
                    "checkpoint": checkpoint.display().to_string(),
                    "test_per_class": test_per_class,
                    "test_dir": test_dir.as_ref().map(|d| d.display().to_string()),
                }),
                seed,
            )?;
            cmd_eval(&cli.out_dir, checkpoint, *test_per_class, test_dir.as_deref(), seed)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { axis, train } => {
            let axis = parse_axis(axis)?;
            let config = resolve_train_config(cli, train)?;
            write_manifest(
                cli,
                "ablate",
                &json!({
                    "axis": match axis {
                        AblationAxis::Order => "order",
                        AblationAxis::Bands => "bands",
                    },
                    "base": serde_json::to_value(&config).unwrap(),
                }),
                config.seed,
            )?;
            cmd_ablate(&cli.out_dir, &config, axis)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { preset, probes, epsilon, tolerance } => {
            let model = resolve_model(cli, preset)?;
            let seed = effective_seed(cli)?;
            write_manifest(
                cli,
                "gradcheck",
                &json!({
                    "model": serde_json::to_value(&model).unwrap(),
                    "probes": probes,
                    "epsilon": epsilon,
                    "tolerance": tolerance,
                }),
                seed,
            )?;
            cmd_gradcheck(&cli.out_dir, &model, seed, *probes, *epsilon, *tolerance)
        }
    }
}

/// Honor GMBA_THREADS: a positive value caps the worker pool, 0 or unset
/// leaves the automatic sizing.
fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("GMBA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("GMBA_THREADS must be a nonnegative integer, got {raw:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("failed to size the worker pool: {e}")))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Record what ran: command name, a hash of the resolved config, crate
/// versions, and the effective seed. No timestamps, so reruns are
/// byte-identical.
fn write_manifest(cli: &Cli, command: &str, config: &serde_json::Value, seed: u64) -> Result<()> {
    let manifest = json!({
        "command": command,
        "config_hash": format!("{:016x}", fnv1a64(config.to_string().as_bytes())),
        "versions": {
            "gmba": env!("CARGO_PKG_VERSION"),
            "globalmamba": globalmamba::VERSION,
        },
        "seed": seed,
    });
    fs::create_dir_all(&cli.out_dir)?;
    let mut text = serde_json::to_string_pretty(&manifest).unwrap();
    text.push('\n');
    fs::write(cli.out_dir.join("manifest.json"), text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Config resolution

/// Full training config: the --config file if given, otherwise desk-scale
/// defaults around the named preset; then per-flag overrides on top.
fn resolve_train_config(cli: &Cli, args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &cli.config {
        Some(path) => read_config_file(path)?,
        None => TrainConfig::desk_default(preset(&args.preset)?),
    };

    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.lr {
        config.base_lr = v;
    }
    if let Some(v) = args.weight_decay {
        config.weight_decay = v;
    }
    if let Some(v) = args.label_smoothing {
        config.label_smoothing = v;
    }
    if let Some(v) = args.warmup_fraction {
        config.warmup_fraction = v;
    }
    if let Some(v) = args.stop_at_train_accuracy {
        config.stop_at_train_accuracy = Some(v);
    }
    if args.no_augment {
        config.augment = false;
    }
    if let Some(k) = args.k_bands {
        config.model.serialization.k_bands = k;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(order) = &args.order {
        config.model.serialization.order = parse_order(order, config.seed)?;
    }

    match (&args.train_dir, &args.test_dir) {
        (Some(train_dir), Some(test_dir)) => {
            config.dataset = DatasetConfig::ImageFolder {
                train_dir: train_dir.clone(),
                test_dir: test_dir.clone(),
            };
        }
        (None, None) => {}
        _ => {
            return Err(Error::config(
                "--train-dir and --test-dir must be given together".to_string(),
            ))
        }
    }
    if args.train_per_class.is_some() || args.test_per_class.is_some() {
        match &mut config.dataset {
            DatasetConfig::SyntheticBands { train_per_class, test_per_class } => {
                if let Some(v) = args.train_per_class {
                    *train_per_class = v;
                }
                if let Some(v) = args.test_per_class {
                    *test_per_class = v;
                }
            }
            DatasetConfig::ImageFolder { .. } => {
                return Err(Error::config(
                    "--train-per-class/--test-per-class only apply to the synthetic dataset"
                        .to_string(),
                ))
            }
        }
    }

    config.validate()?;
    Ok(config)
}

/// Model config for commands that train nothing: the --config file's model
/// when given, otherwise the named preset.
fn resolve_model(cli: &Cli, preset_name: &str) -> Result<ModelConfig> {
    match &cli.config {
        Some(path) => Ok(read_config_file(path)?.model),
        None => preset(preset_name),
    }
}

/// Seed precedence for commands without a full training config:
/// --seed flag > config file seed > 0.
fn effective_seed(cli: &Cli) -> Result<u64> {
    if let Some(seed) = cli.seed {
        return Ok(seed);
    }
    match &cli.config {
        Some(path) => Ok(read_config_file(path)?.seed),
        None => Ok(0),
    }
}

fn read_config_file(path: &Path) -> Result<TrainConfig> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::format(display.clone(), format!("unreadable config: {e}")))?;
    serde_json::from_str(&text).map_err(|e| Error::format(display, format!("invalid config: {e}")))
}

fn parse_order(raw: &str, seed: u64) -> Result<BandOrder> {
    match raw {
        "low_to_high" => Ok(BandOrder::LowToHigh),
        "high_to_low" => Ok(BandOrder::HighToLow),
        "random" => Ok(BandOrder::Random { seed }),
        other => Err(Error::config(format!(
            "unknown order {other:?} (expected low_to_high, high_to_low, or random)"
        ))),
    }
}

fn parse_axis(raw: &str) -> Result<AblationAxis> {
    match raw.to_ascii_lowercase().as_str() {
        "order" => Ok(AblationAxis::Order),
        "k" | "bands" => Ok(AblationAxis::Bands),
        other => Err(Error::config(format!("unknown axis {other:?} (expected order or K)"))),
    }
}

fn parse_k_range(raw: &str) -> Result<(usize, usize)> {
    let err = || Error::config(format!("--K-range must look like \"lo:hi\", got {raw:?}"));
    let (lo, hi) = raw.split_once(':').ok_or_else(err)?;
    let lo: usize = lo.trim().parse().map_err(|_| err())?;
    let hi: usize = hi.trim().parse().map_err(|_| err())?;
    if lo == 0 || hi < lo {
        return Err(Error::config(format!(
            "--K-range needs 1 <= lo <= hi, got {lo}:{hi}"
        )));
    }
    Ok((lo, hi))
}

// ---------------------------------------------------------------------------
// Subcommands

fn lengths_table(k_range: &str, base_grid: usize, cls: bool) -> Result<String> {
    let (lo, hi) = parse_k_range(k_range)?;
    let mut out = String::from("K,band_grids,length\n");
    for k in lo..=hi {
        let grids = band_grids(k, base_grid)?;
        let length = sequence_length(k, base_grid, cls)?;
        let grid_list =
            grids.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(out, "{k},{grid_list},{length}").unwrap();
    }
    Ok(out)
}

/// Collapse a pixmap to luma (Rec. 601 weights); graymaps pass through.
fn to_luma(image: &Image) -> Result<Image> {
    match image.channels {
        1 => Ok(image.clone()),
        3 => {
            let n = image.height * image.width;
            let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
            let data =
                (0..n).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect();
            Image::new(1, image.height, image.width, data)
        }
        c => Err(Error::config(format!("expected 1 or 3 channels, got {c}"))),
    }
}

fn cmd_decompose(out_dir: &Path, input: &Path, k_bands: usize) -> Result<()> {
    let image = to_luma(&read_image(input)?)?;
    let plan = band_thresholds(k_bands)?;
    let bands = decompose(&image, k_bands)?;
    let mut stats = Vec::with_capacity(bands.len());
    for (i, band) in bands.iter().enumerate() {
        let (bytes, clipped) = quantize_plane(band.plane(0), 0.0, 1.0);
        let name = format!("band_{}.pgm", i + 1);
        write_pgm(&out_dir.join(&name), band.width, band.height, &bytes)?;
        stats.push(json!({
            "band": i + 1,
            "file": name,
            "threshold": plan.thresholds[i],
            "energy": band.energy(),
            "retained_coefficients": retained_coefficients(band.height, band.width, plan.thresholds[i]),
            "clipped_pixels": clipped,
        }));
    }
    let report = json!({
        "input": input.display().to_string(),
        "height": image.height,
        "width": image.width,
        "k_bands": k_bands,
        "renormalization": { "lo": 0.0, "hi": 1.0 },
        "bands": stats,
    });
    write_json(&out_dir.join("decompose.json"), &report)?;
    println!("wrote {} band images and decompose.json to {}", k_bands, out_dir.display());
    Ok(())
}

fn cmd_serialize(out_dir: &Path, input: &Path, model: &ModelConfig, seed: u64) -> Result<()> {
    let mut image = read_image(input)?;
    if model.channels == 1 && image.channels == 3 {
        image = to_luma(&image)?;
    }
    if image.channels != model.channels {
        return Err(Error::config(format!(
            "model expects {} channel(s), image has {}",
            model.channels, image.channels
        )));
    }
    let weights = ModelWeights::<f32>::init(model, seed)?;
    let sequence = serialize(&image, &weights.embed, &model.serialization)?;
    let report = json!({
        "input": input.display().to_string(),
        "k_bands": model.serialization.k_bands,
        "band_grids": band_grids(model.serialization.k_bands, model.serialization.base_grid)?,
        "band_ids": sequence.band_ids,
        "band_offsets": sequence.band_offsets,
        "class_token_index": sequence.class_token_index,
        "total_length": sequence.total_length,
        "embed_dim": model.embed_dim,
    });
    write_json(&out_dir.join("serialize.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

fn cmd_train(out_dir: &Path, config: &TrainConfig) -> Result<()> {
    let outcome = train(config)?;
    fs::write(out_dir.join("metrics.csv"), metrics_to_csv(&outcome.metrics))?;
    save_checkpoint(&out_dir.join("checkpoint.gmba"), &config.model, &outcome.weights)?;
    println!(
        "trained {} steps; train accuracy {:.4}; test accuracy {:.4}",
        outcome.steps_run,
        outcome.final_train_accuracy(),
        outcome.final_test_accuracy(),
    );
    println!("wrote metrics.csv and checkpoint.gmba to {}", out_dir.display());
    Ok(())
}

fn cmd_eval(
    out_dir: &Path,
    checkpoint: &Path,
    test_per_class: usize,
    test_dir: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let (model, weights) = load_checkpoint(checkpoint)?;
    let dataset = match test_dir {
        Some(dir) => DatasetConfig::ImageFolder {
            train_dir: dir.to_path_buf(),
            test_dir: dir.to_path_buf(),
        },
        None => DatasetConfig::SyntheticBands { train_per_class: 1, test_per_class },
    };
    let data = load_dataset(&model, &dataset, seed)?;
    let (loss, accuracy) = evaluate(&weights, &model, &data.test, 0.0);
    let report = json!({
        "checkpoint": checkpoint.display().to_string(),
        "samples": data.test.len(),
        "loss": loss,
        "accuracy": accuracy,
    });
    write_json(&out_dir.join("eval.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

fn cmd_ablate(out_dir: &Path, config: &TrainConfig, axis: AblationAxis) -> Result<()> {
    let report = run_ablation(config, axis)?;
    fs::write(out_dir.join("ablation.csv"), ablation_rows_csv(&report))?;
    fs::write(out_dir.join("ablation_summary.csv"), ablation_summary_csv(&report))?;
    for s in &report.summary {
        println!(
            "{}: mean accuracy {:.4} (std {:.4})",
            s.variant, s.mean_accuracy, s.std_accuracy
        );
    }
    println!("wrote ablation.csv and ablation_summary.csv to {}", out_dir.display());
    Ok(())
}

fn cmd_gradcheck(
    out_dir: &Path,
    model: &ModelConfig,
    seed: u64,
    probes: usize,
    epsilon: f64,
    tolerance: f64,
) -> Result<ExitCode> {
    let report = grad_check(model, seed, probes, epsilon, tolerance)?;
    let deviation = discretize_derivative_deviation();
    println!("{:<28} {:>6} {:>14} {:>14} {:>10}", "parameter", "index", "analytic", "numeric", "rel_err");
    for row in &report.rows {
        println!(
            "{:<28} {:>6} {:>14.6e} {:>14.6e} {:>10.3e}",
            row.name, row.index, row.analytic, row.numeric, row.relative_error
        );
    }
    println!(
        "max relative error {:.3e}, median {:.3e}, tolerance {:.1e}",
        report.max_relative_error, report.median_relative_error, report.tolerance
    );
    println!("discretization derivative deviation {deviation:.3e}");
    println!("{}", if report.passed { "PASS" } else { "FAIL" });

    let rows: Vec<serde_json::Value> = report
        .rows
        .iter()
        .map(|r| {
            json!({
                "name": r.name,
                "index": r.index,
                "analytic": r.analytic,
                "numeric": r.numeric,
                "relative_error": r.relative_error,
            })
        })
        .collect();
    let out = json!({
        "probes": probes,
        "epsilon": epsilon,
        "tolerance": tolerance,
        "max_relative_error": report.max_relative_error,
        "median_relative_error": report.median_relative_error,
        "discretize_derivative_deviation": deviation,
        "passed": report.passed,
        "rows": rows,
    });
    write_json(&out_dir.join("gradcheck.json"), &out)?;
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).unwrap();
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
