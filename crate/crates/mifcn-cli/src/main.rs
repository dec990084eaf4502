//! `mifcn` — batch driver for the multi-input denoising pipeline.
//!
//! Subcommands cover the full workflow: `build-dataset` turns image pairs
//! into a patch-tuple archive, `train` fits a model and writes a
//! checkpoint, `denoise` runs inference on a test-case directory,
//! `evaluate` produces a metric report over denoised outputs, `ablate-h`
//! sweeps the fusion bandwidth on a trained checkpoint, and `gradcheck`
//! verifies the numeric core against its oracles.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 data error
//! (missing or malformed files), 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use mifcn_core::checkpoint::load_checkpoint;
use mifcn_core::dataset::{
    build_training_set, load_test_case, load_training_pairs, read_tuple_archive,
    write_tuple_archive, DatasetConfig,
};
use mifcn_core::gradcheck::{conv_oracle_sweep, run as gradcheck_run};
use mifcn_core::image_io::{load_image, save_image};
use mifcn_core::metrics::{metric_row, wilcoxon_signed_rank, MetricReport, MetricRow, MetricValue};
use mifcn_core::model::{mifcn_forward, ModelConfig};
use mifcn_core::roi::RoiSpec;
use mifcn_core::tensor::Tensor;
use mifcn_core::training::{augment_dataset, train, Hyperparams};
use mifcn_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mifcn",
    version,
    about = "Multi-input fully convolutional OCT denoising pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Model architecture overrides, shared by the subcommands that build or
/// reinterpret a model.
#[derive(Args, Clone, Debug)]
struct ModelArgs {
    /// Number of input branches (T).
    #[arg(long = "T", value_name = "N")]
    branches: Option<usize>,
    /// Feature maps per hidden convolution (C).
    #[arg(long = "C", value_name = "N")]
    feature_maps: Option<usize>,
    /// Hidden layers per branch (A).
    #[arg(long = "A", value_name = "N")]
    branch_layers: Option<usize>,
    /// Hidden layers in the reconstruction head (B).
    #[arg(long = "B", value_name = "N")]
    head_layers: Option<usize>,
    /// Fusion bandwidth h.
    #[arg(long = "h", value_name = "H")]
    fusion_h: Option<f64>,
    /// Leaky ReLU slope for negative inputs.
    #[arg(long = "alpha", value_name = "A")]
    leak: Option<f64>,
}

impl ModelArgs {
    fn apply(&self, mut config: ModelConfig) -> ModelConfig {
        if let Some(t) = self.branches {
            config.branches = t;
        }
        if let Some(c) = self.feature_maps {
            config.feature_maps = c;
        }
        if let Some(a) = self.branch_layers {
            config.branch_layers = a;
            config.branch_dilations = ModelConfig::default_dilations(a);
        }
        if let Some(b) = self.head_layers {
            config.head_layers = b;
        }
        if let Some(h) = self.fusion_h {
            config.fusion_h = h;
        }
        if let Some(alpha) = self.leak {
            config.leak = alpha;
        }
        config
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a patch-tuple archive from training image pairs.
    ///
    /// --data holds `<id>.noisy.pgm` / `<id>.highsnr.pgm` pairs; the crop
    /// sidecar lists `id top left height width` per pair.
    BuildDataset {
        /// Directory with the training image pairs.
        #[arg(long)]
        data: PathBuf,
        /// Crop sidecar file.
        #[arg(long)]
        crops: PathBuf,
        /// Output archive path.
        #[arg(long)]
        out: PathBuf,
        /// Patches per tuple (T).
        #[arg(long = "T", value_name = "N")]
        branches: Option<usize>,
    },
    /// Train on a patch-tuple archive and write a checkpoint.
    Train {
        /// Patch-tuple archive from build-dataset.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Training epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Minibatch size.
        #[arg(long)]
        batch: Option<usize>,
        /// Seed for initialization and shuffling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Learning rate for the first half of training.
        #[arg(long)]
        lr1: Option<f64>,
        /// Learning rate after the switch epoch.
        #[arg(long)]
        lr2: Option<f64>,
    },
    /// Denoise one test case (a directory with `main.pgm`, `near1.pgm`, ...)
    /// and write `denoised.pgm`.
    Denoise {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test-case directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the checkpoint's fusion bandwidth at inference.
        #[arg(long = "h", value_name = "H")]
        fusion_h: Option<f64>,
        /// Override the checkpoint's leak slope at inference.
        #[arg(long = "alpha", value_name = "A")]
        leak: Option<f64>,
        /// Also write per-branch estimates and fusion weight maps.
        #[arg(long)]
        save_maps: bool,
    },
    /// Report PSNR/MSR/CNR/ENL over a directory of denoised outputs.
    ///
    /// --data holds `<id>.out.pgm` plus `<id>.ref.pgm`; MSR/CNR/ENL appear
    /// when a region file is given. A second directory with matching
    /// `<id>.out.pgm` files adds paired signed-rank tests.
    Evaluate {
        /// Directory of outputs and references.
        #[arg(long)]
        data: PathBuf,
        /// Region-of-interest file (`background(name) top left height width`
        /// plus `foreground(...)` lines).
        #[arg(long)]
        rois: Option<PathBuf>,
        /// Write the report as CSV here as well.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Second output directory to test against.
        compare: Option<PathBuf>,
    },
    /// Metric table for a sweep of fusion bandwidths on one checkpoint.
    AblateH {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// A test-case directory, or a directory of test-case directories.
        #[arg(long)]
        data: PathBuf,
        /// Region-of-interest file for MSR/CNR/ENL.
        #[arg(long)]
        rois: Option<PathBuf>,
        /// Write the table as CSV here as well.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Bandwidths to test (default: 1 and 100..=1000 in steps of 100).
        h_values: Vec<f64>,
    },
    /// Run the convolution oracle sweep and the end-to-end gradient check.
    Gradcheck {
        /// Base seed for the random instances.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version are successes; everything else is misuse.
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::Domain(_) => 1,
                Error::Io { .. } | Error::Format(_) | Error::Data(_) | Error::Shape(_) => 2,
                Error::Numeric(_) => 3,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildDataset { data, crops, out, branches } => {
            cmd_build_dataset(&data, &crops, &out, branches)
        }
        Command::Train { data, out, model, epochs, batch, seed, lr1, lr2 } => {
            cmd_train(&data, &out, &model, epochs, batch, seed, lr1, lr2)
        }
        Command::Denoise { checkpoint, data, out, fusion_h, leak, save_maps } => {
            cmd_denoise(&checkpoint, &data, &out, fusion_h, leak, save_maps)
        }
        Command::Evaluate { data, rois, out, compare } => {
            cmd_evaluate(&data, rois.as_deref(), out.as_deref(), compare.as_deref())
        }
        Command::AblateH { checkpoint, data, rois, out, h_values } => {
            cmd_ablate_h(&checkpoint, &data, rois.as_deref(), out.as_deref(), &h_values)
        }
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

fn cmd_build_dataset(
    data: &Path,
    crops: &Path,
    out: &Path,
    branches: Option<usize>,
) -> Result<()> {
    let mut config = DatasetConfig::default();
    if let Some(t) = branches {
        config.branches = t;
    }
    let pairs = load_training_pairs(data, crops)?;
    let build = build_training_set(&pairs, &config)?;
    write_tuple_archive(out, &build.tuples)?;
    println!(
        "wrote {} tuples ({} patches of {}x{} each) to {}",
        build.tuples.len(),
        config.branches,
        config.patch_size,
        config.patch_size,
        out.display()
    );
    for (i, stride) in build.strides.iter().enumerate() {
        println!("  pair {}: grid stride {}", i + 1, stride);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    out: &Path,
    model: &ModelArgs,
    epochs: Option<usize>,
    batch: Option<usize>,
    seed: u64,
    lr1: Option<f64>,
    lr2: Option<f64>,
) -> Result<()> {
    let tuples = read_tuple_archive(data)?;
    let mut config = model.apply(ModelConfig::default());
    if model.branches.is_none() {
        // Follow the archive rather than forcing the default width.
        config.branches = tuples.first().map_or(config.branches, |t| t.branch_count());
    }
    let mut hyper = Hyperparams { shuffle_seed: seed, ..Hyperparams::default() };
    if let Some(e) = epochs {
        hyper.epochs = e;
        hyper.lr_switch_epoch = e / 2;
    }
    if let Some(b) = batch {
        hyper.batch_size = b;
    }
    if let Some(lr) = lr1 {
        hyper.lr_phase1 = lr;
    }
    if let Some(lr) = lr2 {
        hyper.lr_phase2 = lr;
    }

    let tuples = augment_dataset(&tuples)?;
    println!(
        "training on {} tuples ({} branches, {} feature maps, {} epochs, batch {})",
        tuples.len(),
        config.branches,
        config.feature_maps,
        hyper.epochs,
        hyper.batch_size
    );
    let started = Instant::now();
    let (_params, record) = train(&tuples, &config, &hyper, seed, out, |r| {
        println!("epoch {:>3}  lr {:<8}  mean J {:.8}", r.epoch, r.learning_rate, r.mean_loss);
    })?;
    println!(
        "finished {} epochs in {:.1?}; checkpoint written to {}",
        record.epochs.len(),
        started.elapsed(),
        out.display()
    );
    Ok(())
}

fn cmd_denoise(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    fusion_h: Option<f64>,
    leak: Option<f64>,
    save_maps: bool,
) -> Result<()> {
    let (params, mut config) = load_checkpoint(checkpoint)?;
    if let Some(h) = fusion_h {
        config.fusion_h = h;
    }
    if let Some(alpha) = leak {
        config.leak = alpha;
    }
    config.validate()?;
    let case = load_test_case(data, config.branches)?;

    let started = Instant::now();
    let output = mifcn_forward(&case.inputs(), &params, &config)?;
    let elapsed = started.elapsed();

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_image(&output.reconstruction, &out.join("denoised.pgm"))?;
    if save_maps {
        for (t, branch) in output.branch_outputs.iter().enumerate() {
            save_image(branch, &out.join(format!("branch{}.pgm", t + 1)))?;
        }
        for (t, weight) in output.weights.iter().enumerate() {
            // Weights live in [0, 1]; spread them over the full gray range.
            save_image(&weight.scale(255.0), &out.join(format!("weight{}.pgm", t + 1)))?;
        }
    }
    let shape = output.reconstruction.shape();
    println!(
        "denoised {}x{} image with {} branches in {:.2?}; wrote {}",
        shape[0],
        shape[1],
        config.branches,
        elapsed,
        out.join("denoised.pgm").display()
    );
    Ok(())
}

/// `<id>.out.pgm` entries of a directory, sorted by id.
fn output_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(name) = entry.file_name().to_str() {
            if let Some(id) = name.strip_suffix(".out.pgm") {
                ids.push(id.to_string());
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::Data(format!("no `<id>.out.pgm` files in {}", dir.display())));
    }
    ids.sort();
    Ok(ids)
}

fn cmd_evaluate(
    data: &Path,
    rois: Option<&Path>,
    out: Option<&Path>,
    compare: Option<&Path>,
) -> Result<()> {
    let roi_spec = rois.map(RoiSpec::load).transpose()?;
    let ids = output_ids(data)?;

    let rows_for = |dir: &Path| -> Result<Vec<MetricRow>> {
        ids.iter()
            .map(|id| {
                let image = load_image(&dir.join(format!("{id}.out.pgm")))?;
                let reference = load_image(&data.join(format!("{id}.ref.pgm")))?;
                metric_row(id, &image, Some(&reference), roi_spec.as_ref())
            })
            .collect()
    };

    let mut report = MetricReport::new(rows_for(data)?);
    let mut notes = Vec::new();
    if let Some(other_dir) = compare {
        let other_rows = rows_for(other_dir)?;
        let columns: [(&str, fn(&MetricRow) -> MetricValue); 4] = [
            ("psnr", |r| r.psnr),
            ("msr", |r| r.msr),
            ("cnr", |r| r.cnr),
            ("enl", |r| r.enl),
        ];
        for (name, get) in columns {
            let mut ours = Vec::new();
            let mut theirs = Vec::new();
            for (a, b) in report.rows.iter().zip(&other_rows) {
                if let (Some(x), Some(y)) = (get(a).as_finite(), get(b).as_finite()) {
                    ours.push(x);
                    theirs.push(y);
                }
            }
            if ours.is_empty() {
                continue;
            }
            match wilcoxon_signed_rank(&ours, &theirs) {
                Ok(test) => report.p_values.push((name.to_string(), test)),
                Err(err) => notes.push(format!("wilcoxon {name}: skipped ({err})")),
            }
        }
    }

    print!("{}", report.to_text());
    for note in &notes {
        println!("{note}");
    }
    if let Some(path) = out {
        std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Mean of the finite entries; infinite only if nothing is finite but
/// something is infinite.
fn average_column(values: &[MetricValue]) -> MetricValue {
    let finite: Vec<f64> = values.iter().filter_map(|v| v.as_finite()).collect();
    if !finite.is_empty() {
        return MetricValue::Finite(finite.iter().sum::<f64>() / finite.len() as f64);
    }
    if values.iter().any(|v| matches!(v, MetricValue::Infinite)) {
        return MetricValue::Infinite;
    }
    MetricValue::Undefined
}

/// Test-case directories under `data`: either `data` itself (if it holds a
/// `main.*` image) or its immediate subdirectories.
fn collect_case_dirs(data: &Path) -> Result<Vec<PathBuf>> {
    let has_main = |dir: &Path| -> Result<bool> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_file() && path.file_stem().is_some_and(|s| s == "main") {
                return Ok(true);
            }
        }
        Ok(false)
    };
    if has_main(data)? {
        return Ok(vec![data.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    let entries = std::fs::read_dir(data).map_err(|e| Error::io(data, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(data, e))?.path();
        if path.is_dir() && has_main(&path)? {
            dirs.push(path);
        }
    }
    if dirs.is_empty() {
        return Err(Error::Data(format!(
            "{} contains neither a `main.*` image nor test-case subdirectories",
            data.display()
        )));
    }
    dirs.sort();
    Ok(dirs)
}

fn cmd_ablate_h(
    checkpoint: &Path,
    data: &Path,
    rois: Option<&Path>,
    out: Option<&Path>,
    h_values: &[f64],
) -> Result<()> {
    let default_grid =
        [1.0, 100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0, 900.0, 1000.0];
    let grid: Vec<f64> =
        if h_values.is_empty() { default_grid.to_vec() } else { h_values.to_vec() };
    for &h in &grid {
        if !(h > 0.0) {
            return Err(Error::Domain(format!("bandwidth must be positive, got {h}")));
        }
    }

    let (params, config) = load_checkpoint(checkpoint)?;
    let roi_spec = rois.map(RoiSpec::load).transpose()?;
    let case_dirs = collect_case_dirs(data)?;
    let cases: Vec<(Vec<Tensor>, Tensor)> = case_dirs
        .iter()
        .map(|dir| {
            let case = load_test_case(dir, config.branches)?;
            Ok((case.inputs(), case.reference))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(grid.len());
    for &h in &grid {
        let mut cfg = config.clone();
        cfg.fusion_h = h;
        let mut case_rows = Vec::with_capacity(cases.len());
        for (inputs, reference) in &cases {
            let output = mifcn_forward(inputs, &params, &cfg)?;
            case_rows.push(metric_row(
                "case",
                &output.reconstruction,
                Some(reference),
                roi_spec.as_ref(),
            )?);
        }
        rows.push(MetricRow {
            id: format!("h={h}"),
            psnr: average_column(&case_rows.iter().map(|r| r.psnr).collect::<Vec<_>>()),
            msr: average_column(&case_rows.iter().map(|r| r.msr).collect::<Vec<_>>()),
            cnr: average_column(&case_rows.iter().map(|r| r.cnr).collect::<Vec<_>>()),
            enl: average_column(&case_rows.iter().map(|r| r.enl).collect::<Vec<_>>()),
        });
    }

    let report = MetricReport::new(rows);
    println!("{} test case(s), checkpoint {}", cases.len(), checkpoint.display());
    print!("{}", report.to_text());
    if let Some(path) = out {
        std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let sweep = conv_oracle_sweep(200, seed)?;
    println!(
        "convolution oracle sweep: {} cases, max |diff| {:.3e} -> {}",
        sweep.cases,
        sweep.max_abs_diff,
        if sweep.max_abs_diff <= 1e-12 { "PASS" } else { "FAIL" }
    );

    let report = gradcheck_run(25, seed)?;
    print!("{report}");
    println!("worst relative error per parameter tensor:");
    for (name, err) in report.group_errors() {
        println!("  {name:<28} {err:.3e}");
    }

    if sweep.max_abs_diff > 1e-12 || !report.passed() {
        return Err(Error::Numeric("verification failed; see report above".into()));
    }
    Ok(())
}
