//! Command-line surface: `train`, `sample`, `analyze`, `gradcheck`,
//! `init-config`.
//!
//! Every command reads only its explicit arguments and files. Exit status
//! is 0 on success, 1 for validation and I/O errors, 2 for numerical
//! failures (including a failed gradient check).

pub mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{self, AnalysisMetadata, Axis};
use crate::backbone::checkpoint;
use crate::backbone::ModelState;
use crate::encoder_sim::{Prompt, SynthEncoder};
use crate::error::{Error, Result};
use crate::flowmatch::{self, SamplerConfig, Trainer, TrajectoryRecord};
use crate::numerics::gradcheck::GradCheckReport;
use crate::routing::{export_weight_profile, unit_grid, StrategyConfig, WeightProfile};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "layerfuse",
    version,
    about = "Train, sample and analyze layer-fusion flow models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes model.ckpt, metrics.csv and config.toml.
    Train(TrainArgs),
    /// Integrate one prompt from seeded noise.
    Sample(SampleArgs),
    /// Fusion-weight and trajectory analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Finite-difference check of the end-to-end loss gradient.
    Gradcheck(GradcheckArgs),
    /// Write a configuration file with every key spelled out.
    InitConfig(InitConfigArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Record `wall_ms = 0` so repeated runs produce identical files.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated slot values such as `2,0,3,1`, or `null`.
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long = "cfg", default_value_t = 6.0)]
    pub cfg_scale: f64,
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    pub shift: Toggle,
    /// Also write every intermediate state to trajectory.csv.
    #[arg(long)]
    pub record: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run configuration the checkpoint must match.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Export the fusion-weight profile of a checkpoint over (t, d).
    Weights {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        t_step: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Semantic center and dispersion along depth and time.
    Stats {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise JS similarity along one axis.
    Similarity {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value = "depth")]
        axis: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// 1-Wasserstein distance between consecutive timesteps.
    Drift {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deviation of recorded trajectories from their straight references.
    Trajectory {
        /// One or more trajectory.csv files written by `sample --record`.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate the analytic gradient of this parameter (checks the checker).
    #[arg(long, hide = true)]
    pub sabotage: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    Tiny,
}

#[derive(Debug, Args)]
pub struct InitConfigArgs {
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_metadata(dir: &Path, meta: &AnalysisMetadata) -> Result<()> {
    write_file(&dir.join("metadata.json"), |w| writeln!(w, "{}", meta.to_json()))
}

/// Stops glibc from handing large freed blocks back to the kernel.
///
/// Every training step rebuilds a tape of multi-megabyte buffers; with the
/// default thresholds each one is mmapped, faulted in and unmapped again,
/// which costs about a fifth of the step time. Allocation results are
/// unaffected, so training stays bitwise reproducible.
fn keep_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tuning parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 25);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub out_dir: PathBuf,
}

/// Trains from a config file into `out` (or the config's `output_dir`).
///
/// Metrics are streamed; on a non-finite loss the metrics so far are kept,
/// no checkpoint is written, and a numerical error is returned.
pub fn cmd_train(config_path: &Path, out: Option<&Path>, deterministic: bool) -> Result<TrainSummary> {
    let cfg = RunConfig::load(config_path)?;
    keep_freed_memory();
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::config("no output directory: pass --out or set output_dir"))?;
    create_dir(&out_dir)?;
    cfg.save(&out_dir.join("config.toml"))?;

    let spec = cfg.model_spec();
    let mut state = ModelState::<f32>::init(spec.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(&spec, cfg.train.clone())?;
    let metrics_path = out_dir.join("metrics.csv");
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let io = |e| Error::io(&metrics_path, e);
    writeln!(metrics, "step,loss,wall_ms").map_err(io)?;

    let start = Instant::now();
    let (mut first, mut last) = (None, None);
    for step in 1..=cfg.train.steps {
        let report = match trainer.step(&mut state) {
            Ok(r) => r,
            Err(e) => {
                metrics.flush().map_err(io)?;
                return Err(e);
            }
        };
        let wall = if deterministic { 0 } else { start.elapsed().as_millis() };
        writeln!(metrics, "{step},{:.9e},{wall}", report.loss).map_err(io)?;
        first.get_or_insert(report.loss);
        last = Some(report.loss);
        if step % 100 == 0 {
            eprintln!("step {step}/{}: loss {:.5}", cfg.train.steps, report.loss);
        }
    }
    metrics.flush().map_err(io)?;
    checkpoint::save(&state, &out_dir.join("model.ckpt"))?;
    Ok(TrainSummary {
        steps: cfg.train.steps,
        first_loss: first,
        last_loss: last,
        out_dir,
    })
}

/// Samples one prompt; writes `latent.csv` and, with `record`, `trajectory.csv`.
pub fn cmd_sample(args: &SampleArgs) -> Result<TrajectoryRecord<f32>> {
    let state: ModelState<f32> = checkpoint::load(&args.ckpt)?;
    let spec = state.model.spec();
    if let Some(path) = &args.config {
        let cfg = RunConfig::load(path)?;
        if &cfg.model_spec() != spec {
            return Err(Error::config(format!(
                "checkpoint {} was not trained with {}",
                args.ckpt.display(),
                path.display()
            )));
        }
    }
    let prompt: Prompt = args.prompt.parse()?;
    let encoder = SynthEncoder::new(spec.encoder.clone())?;
    let sampler = SamplerConfig {
        steps: args.steps,
        cfg_scale: args.cfg_scale,
        apply_shift: args.shift == Toggle::On,
        record_trajectory: args.record,
        seed: args.seed,
    };
    let rec = flowmatch::sample(&state.model, &encoder, &prompt, &sampler)?;
    create_dir(&args.out)?;
    let dit = state.model.config();
    write_file(&args.out.join("latent.csv"), |w| {
        write!(w, "cell")?;
        for c in 0..dit.latent_channels {
            write!(w, ",c{c}")?;
        }
        writeln!(w)?;
        for (cell, row) in rec.final_latent.chunks(dit.latent_channels).enumerate() {
            write!(w, "{cell}")?;
            for v in row {
                write!(w, ",{v:e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    if args.record {
        write_file(&args.out.join("trajectory.csv"), |w| rec.write_csv(w))?;
    }
    Ok(rec)
}

fn read_profile(path: &Path) -> Result<WeightProfile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    WeightProfile::read_csv(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))
}

pub fn cmd_analyze(cmd: &AnalyzeCommand) -> Result<()> {
    match cmd {
        AnalyzeCommand::Weights { ckpt, t_step, out } => {
            let state: ModelState<f32> = checkpoint::load(ckpt)?;
            let blocks: Vec<usize> = (1..=state.model.config().blocks).collect();
            let profile =
                export_weight_profile(state.model.gate(), state.model.params(), &unit_grid(*t_step)?, &blocks)?;
            create_dir(out)?;
            write_file(&out.join("weights.csv"), |w| profile.write_csv(w))?;
            write_metadata(out, &AnalysisMetadata::new("weights", Some(profile.kind.to_string())))
        }
        AnalyzeCommand::Stats { profile, out } => {
            let p = read_profile(profile)?;
            let rows = analysis::profile_stats(&p)?;
            create_dir(out)?;
            write_file(&out.join("stats.csv"), |w| analysis::write_stats_csv(&rows, w))?;
            write_metadata(out, &AnalysisMetadata::new("stats", Some(p.kind.to_string())))
        }
        AnalyzeCommand::Similarity { profile, axis, out } => {
            let axis: Axis = axis.parse()?;
            let p = read_profile(profile)?;
            let m = analysis::js_similarity_matrix(&p, axis)?;
            create_dir(out)?;
            write_file(&out.join(format!("similarity_{axis}.csv")), |w| m.write_csv(w))?;
            write_metadata(out, &AnalysisMetadata::new("similarity", Some(p.kind.to_string())))
        }
        AnalyzeCommand::Drift { profile, out } => {
            let p = read_profile(profile)?;
            let drift = analysis::wasserstein_drift(&p)?;
            create_dir(out)?;
            write_file(&out.join("drift.csv"), |w| analysis::write_drift_csv(&drift, w))?;
            write_metadata(out, &AnalysisMetadata::new("drift", Some(p.kind.to_string())))
        }
        AnalyzeCommand::Trajectory { inputs, out } => {
            let mut all = Vec::with_capacity(inputs.len());
            for path in inputs {
                let file = File::open(path).map_err(|e| Error::io(path, e))?;
                let rec =
                    TrajectoryRecord::read_csv(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))?;
                all.push(analysis::trajectory_metrics(&rec)?);
            }
            create_dir(out)?;
            for (i, m) in all.iter().enumerate() {
                write_file(&out.join(format!("trajectory_{i}.csv")), |w| m.write_csv(w))?;
            }
            let mean = analysis::mean_metrics(&all)?;
            write_file(&out.join("trajectory.csv"), |w| mean.write_csv(w))?;
            write_file(&out.join("trajectory_to_final.csv"), |w| mean.write_to_final_csv(w))?;
            write_metadata(out, &AnalysisMetadata::new("trajectory", None))
        }
    }
}

/// Gradient check of the end-to-end loss for the model in `config_path`.
pub fn cmd_gradcheck(config_path: &Path, seed: u64, sabotage: Option<String>) -> Result<GradCheckReport> {
    let cfg = RunConfig::load(config_path)?;
    flowmatch::fm_gradcheck(&cfg.model_spec(), seed, sabotage)
}

fn print_gradcheck(report: &GradCheckReport) {
    for g in &report.groups {
        println!(
            "{:<28} checked {:>4}  max rel {:.3e}  abs {:.3e}",
            g.name, g.checked, g.max_rel_error, g.abs_error_at_max
        );
    }
    let verdict = if report.passed { "PASS" } else { "FAIL" };
    println!(
        "{verdict}: max relative error {:.3e} (tolerance {:.0e})",
        report.max_rel_error, report.tolerance
    );
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(&a.config, a.out.as_deref(), a.deterministic).map(|s| {
            if let (Some(f), Some(l)) = (s.first_loss, s.last_loss) {
                println!("trained {} steps: loss {f:.5} -> {l:.5}", s.steps);
            } else {
                println!("wrote initial checkpoint (0 steps)");
            }
            println!("outputs in {}", s.out_dir.display());
        }),
        Command::Sample(a) => cmd_sample(a).map(|_| println!("wrote {}", a.out.display())),
        Command::Analyze(c) => cmd_analyze(c),
        Command::Gradcheck(a) => cmd_gradcheck(&a.config, a.seed, a.sabotage.clone()).and_then(|r| {
            print_gradcheck(&r);
            if r.passed {
                Ok(())
            } else {
                Err(Error::numerical("gradient check failed"))
            }
        }),
        Command::InitConfig(a) => {
            let cfg = match a.preset {
                Preset::Default => RunConfig::default(),
                Preset::Tiny => RunConfig::tiny(StrategyConfig::default().kind),
            };
            cfg.save(&a.out)
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
