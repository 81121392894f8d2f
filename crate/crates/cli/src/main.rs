//! `lformer` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use lformer::data::{self, DatasetManifest, DatasetSpec, Sample};
use lformer::metrics::{full_metrics, reduced_metrics, MetricReport, Q_WINDOW};
use lformer::model::{LFormerModel, Variant};
use lformer::profiler::{self, bench_forward, compare_variants, similarity_report};
use lformer::train::{evaluate_loss, load_checkpoint, save_checkpoint, TrainState};
use lformer::{Error, RunConfig, Tensor};

#[derive(Parser)]
#[command(name = "lformer", version, about = "Linearly-evolved transformer pan-sharpening")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Wald-protocol dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        train: usize,
        #[arg(long, default_value_t = 8)]
        val: usize,
        #[arg(long, default_value_t = 8)]
        test: usize,
        /// Full-resolution (no GT) scenes at twice the size.
        #[arg(long, default_value_t = 0)]
        full: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        bands: usize,
        #[arg(long, default_value_t = 4)]
        ratio: usize,
    },
    /// Train a model; writes checkpoint/, loss.csv and config.txt under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from <out>/checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop once this many total steps are done (checkpoint is written).
        #[arg(long)]
        stop_after: Option<usize>,
        /// Data-parallel gradient workers (overrides the config).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Compute quality metrics over a split.
    Eval {
        /// Checkpoint directory, `none` for the bicubic input or `gt` for
        /// the reference itself.
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value_t = Mode::Reduced)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter / FLOP / timing comparison of variants.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "evolved,recompute,shared")]
        variants: String,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Timed forward passes per variant (0 skips timing).
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
    },
    /// Attention similarity, feature maps and error map for one sample.
    Report {
        #[arg(long)]
        trace_from: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Reduced,
    Full,
}

/// Error raised for invalid invocations (exit code 1).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::NonFinite { .. }) => 3,
        Some(Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData { out, seed, train, val, test, full, size, bands, ratio } => gen_data(
            &out,
            &DatasetSpec { seed, train, val, test, test_full: full, height: size, width: size, bands, ratio },
        ),
        Command::Train { config, data, out, resume, stop_after, workers } => {
            train(&config, data, out, resume, stop_after, workers)
        }
        Command::Eval { ckpt, data, split, mode, out } => eval(&ckpt, &data, &split, mode, &out),
        Command::Bench { config, variants, size, out, runs, warmup } => {
            bench(config.as_deref(), &variants, size, &out, runs, warmup)
        }
        Command::Report { trace_from, data, sample, out } => report(&trace_from, &data, &sample, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen_data(out: &Path, spec: &DatasetSpec) -> Result<()> {
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = data::build_dataset(out, spec)?;
    for (split, ids) in &manifest.splits {
        println!("{split}: {} samples", ids.len());
    }
    Ok(())
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().context("building worker pool")
}

/// Row 0 holds the training-set loss at initialization; row `s` the mean
/// minibatch loss of step `s`, evaluated before its update.
const LOSS_HEADER: &str = "step,lr,loss";

/// Keeps the header and rows with `step <= keep`, so a resumed run appends
/// exactly where its checkpoint left off.
fn truncate_loss_csv(path: &Path, keep: usize) -> Result<()> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = vec![LOSS_HEADER.to_string()];
    for line in BufReader::new(file).lines().skip(1) {
        let line = line?;
        let step: usize = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
        if step <= keep {
            lines.push(line);
        }
    }
    fs::write(path, lines.join("\n") + "\n")?;
    Ok(())
}

/// Writes the checkpoint next to the live one, then swaps it in, so an
/// abort never leaves a half-written checkpoint behind.
fn write_checkpoint(out: &Path, state: &TrainState<f32>) -> Result<()> {
    let tmp = out.join("checkpoint.tmp");
    let dst = out.join("checkpoint");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    save_checkpoint(&tmp, &state.model, Some((&state.opt, state.step)))?;
    if dst.exists() {
        fs::remove_dir_all(&dst)?;
    }
    fs::rename(&tmp, &dst)?;
    Ok(())
}

fn train(
    config: &Path,
    data_dir: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: bool,
    stop_after: Option<usize>,
    workers: Option<usize>,
) -> Result<()> {
    let mut rc = RunConfig::load(config).map_err(|e| match e {
        Error::Io { .. } => anyhow::Error::new(e),
        other => usage(other.to_string()),
    })?;
    if let Some(w) = workers {
        rc.train.workers = w;
    }
    rc.validate().map_err(|e| usage(e.to_string()))?;
    let data_dir = data_dir.or(rc.data.clone()).ok_or_else(|| usage("--data is required"))?;
    let out = out.or(rc.out.clone()).ok_or_else(|| usage("--out is required"))?;

    let manifest = DatasetManifest::load(&data_dir)?;
    if manifest.bands != rc.model.bands || manifest.ratio != rc.model.ratio {
        return Err(usage(format!(
            "config expects {} bands at ratio {}, dataset has {} at ratio {}",
            rc.model.bands, rc.model.ratio, manifest.bands, manifest.ratio
        )));
    }
    let samples: Vec<Sample<f32>> = data::load_split(&data_dir, "train")?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), rc.to_text())?;
    let loss_path = out.join("loss.csv");

    let mut state = if resume {
        let (model, opt) = load_checkpoint::<f32>(out.join("checkpoint"))?;
        let (opt, step) = opt.ok_or_else(|| usage("checkpoint has no optimizer state"))?;
        if *model.config() != rc.model {
            return Err(usage("checkpoint model configuration differs from --config"));
        }
        truncate_loss_csv(&loss_path, step)?;
        TrainState { model, opt, step }
    } else {
        let state = TrainState::new(LFormerModel::<f32>::build(rc.model)?, &rc.train);
        let initial =
            thread_pool(rc.train.workers)?.install(|| evaluate_loss(&state.model, &samples, rc.train.alpha))?;
        if !initial.is_finite() {
            return Err(Error::NonFinite { op: "initial loss" }.into());
        }
        fs::write(&loss_path, format!("{LOSS_HEADER}\n0,{:e},{initial:.8}\n", rc.train.lr_at(0)))?;
        write_checkpoint(&out, &state)?;
        state
    };

    let mut log = OpenOptions::new().append(true).open(&loss_path)?;
    let end = stop_after.map_or(rc.train.steps, |s| s.min(rc.train.steps));
    let every = rc.train.checkpoint_every;
    let tc = rc.train.clone();
    let pool = thread_pool(rc.train.workers)?;
    let outcome = pool.install(|| {
        state.run(&samples, &tc, Some(end), |step, loss, st| {
            writeln!(log, "{step},{:e},{loss:.8}", tc.lr_at(step - 1))
                .map_err(|e| Error::Io { path: loss_path.clone(), source: e })?;
            if step % every == 0 || step == end {
                write_checkpoint(&out, st)
                    .map_err(|e| Error::InvalidArgument { op: "checkpoint", msg: format!("{e:#}") })?;
            }
            if step % 10 == 0 || step == end {
                println!("step {step:>6}  loss {loss:.6}");
            }
            Ok(())
        })
    });
    log.flush()?;
    if let Err(e) = outcome {
        return Err(anyhow::Error::new(e).context(format!(
            "training aborted at step {}; last good checkpoint kept in {}",
            state.step + 1,
            out.join("checkpoint").display()
        )));
    }
    println!("finished at step {}", state.step);
    Ok(())
}

enum Predictor {
    Bicubic,
    Reference,
    Model(Box<LFormerModel<f32>>),
}

impl Predictor {
    fn load(ckpt: &str) -> Result<Self> {
        Ok(match ckpt {
            "none" => Predictor::Bicubic,
            "gt" => Predictor::Reference,
            dir => Predictor::Model(Box::new(load_checkpoint::<f32>(dir)?.0)),
        })
    }

    fn predict(&self, s: &Sample<f32>) -> Result<Tensor<f32>> {
        Ok(match self {
            Predictor::Bicubic => s.ms_up.clone(),
            Predictor::Reference => {
                s.gt.clone().ok_or_else(|| usage(format!("sample {} has no GT to pass through", s.id)))?
            }
            Predictor::Model(m) => m.predict(&s.ms_up, &s.pan)?,
        })
    }
}

fn eval(ckpt: &str, data_dir: &Path, split: &str, mode: Mode, out: &Path) -> Result<()> {
    let predictor = Predictor::load(ckpt)?;
    let samples: Vec<Sample<f32>> = data::load_split(data_dir, split)?;
    let mut report = MetricReport::default();
    for s in &samples {
        let fused = predictor.predict(s)?;
        let row = match (mode, &s.gt) {
            (Mode::Reduced, Some(gt)) => reduced_metrics(&s.id, &fused, gt, s.ratio(), Q_WINDOW)?,
            (Mode::Reduced, None) => {
                return Err(usage(format!("split {split} has no ground truth; use --mode full")));
            }
            (Mode::Full, None) => {
                let pan_low = data::degrade_ms(&s.pan, s.ratio())?;
                full_metrics(&s.id, &fused, &s.ms, &s.pan, &pan_low, Q_WINDOW)?
            }
            (Mode::Full, Some(_)) => {
                return Err(usage(format!("split {split} has ground truth; full mode applies to GT-less splits only")));
            }
        };
        report.rows.push(row);
    }
    fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    for m in report.metrics() {
        let (mean, std) = report.aggregate(m);
        println!("{:>8}: {mean:.4} ± {std:.4}", m.name());
    }
    Ok(())
}

fn bench(config: Option<&Path>, variants: &str, size: usize, out: &Path, runs: usize, warmup: usize) -> Result<()> {
    let rc = match config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    let variants: Vec<Variant> =
        variants.split(',').map(|v| v.parse::<Variant>().map_err(|e| usage(e.to_string()))).collect::<Result<_>>()?;
    if size < 16 {
        return Err(usage("--size must be at least 16"));
    }
    if runs != 0 && runs < 3 {
        return Err(usage("--runs must be 0 or at least 3"));
    }
    let mut rows = compare_variants(&rc.model, size, size, &variants)?;
    if runs > 0 {
        let scene = data::gen_scene(rc.model.seed, size, size, rc.model.bands)?;
        let sample: Sample<f32> = Sample::from_gt("bench", scene, 1)?.cast();
        // single-threaded timing
        let pool = thread_pool(1)?;
        for row in &mut rows {
            let model = LFormerModel::<f32>::build(rc.model.with_variant(row.variant))?;
            row.timing = Some(pool.install(|| bench_forward(&model, &sample, warmup, runs))?);
        }
    }
    fs::write(out, profiler::profile_csv(&rows)).with_context(|| format!("writing {}", out.display()))?;
    for r in &rows {
        println!("{:>10}: params {:>9}  flops {:>14}", r.variant.name(), r.params, r.flops);
    }
    Ok(())
}

fn channel_mean(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w, c) = t.hwc()?;
    let data = t.data().chunks(c).map(|px| px.iter().sum::<f32>() / c as f32).collect();
    Ok(Tensor::new(&[h, w, 1], data)?)
}

fn report(ckpt: &Path, data_dir: &Path, id: &str, out: &Path) -> Result<()> {
    let (model, _) = load_checkpoint::<f32>(ckpt)?;
    let manifest = DatasetManifest::load(data_dir)?;
    let split = manifest
        .splits
        .iter()
        .find(|(_, ids)| ids.iter().any(|i| i == id))
        .map(|(s, _)| s.clone())
        .ok_or_else(|| Error::Missing { what: "sample", detail: id.to_string() })?;
    let s: Sample<f32> = data::load_sample(data_dir, &split, id)?;
    let (fused, trace) = model.forward(&s.ms_up, &s.pan)?;
    fs::create_dir_all(out)?;
    if trace.attention.len() >= 2 {
        let sim = similarity_report(&trace)?;
        fs::write(out.join("similarity.csv"), sim.to_csv())?;
        println!("attention similarity off-diagonal mean: {:.4}", sim.off_diagonal_mean());
    } else {
        println!("single block: no attention similarity to report");
    }
    for (i, g) in trace.global.iter().enumerate() {
        data::save_ppm(out.join(format!("feature_{}.ppm", i + 1)), &channel_mean(g)?, true)?;
    }
    if let Some(gt) = &s.gt {
        let err = fused.zip_map(gt, |a, b| (a - b).abs())?;
        data::save_ppm(out.join("error.ppm"), &channel_mean(&err)?, false)?;
    }
    Ok(())
}
