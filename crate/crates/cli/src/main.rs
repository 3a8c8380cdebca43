use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mcq_core::grsbl::{run_mc_grsbl, ComplexMatrixJson, GrSblConfig};
use mcq_core::harness::{prepare_trial, run_experiment, write_csv, write_summary, ExperimentConfig, RunOptions};
use mcq_core::lse2d::{run_lse2d, LineSpectralScene, Lse2dConfig, DEFAULT_GRID};
use mcq_core::quantizer::{BitDepth, ObservedMatrix};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "mcq", version, about = "Low-rank matrix completion from few-bit quantized samples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo experiment and write one CSV row per solver and trial.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// CSV destination; standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Per-(SNR, B, solver) medians as JSON.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Worker threads; all cores when omitted.
        #[arg(long)]
        workers: Option<usize>,
        /// Record wall-clock time per solver. Makes the CSV non-reproducible.
        #[arg(long)]
        timing: bool,
    },
    /// Complete one observed matrix with MC-Gr-SBL.
    Complete {
        #[command(flatten)]
        io: InputOutput,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Estimate a 2D line spectrum with MC-Gr-SBL followed by MUSIC.
    Lse2d {
        #[command(flatten)]
        io: InputOutput,
        #[command(flatten)]
        solver: SolverArgs,
        /// MUSIC search grid size.
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
    },
    /// Draw one synthetic trial and write its observations and ground truth.
    Generate {
        /// Experiment configuration; the first SNR and bit depth are used.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Observed-matrix JSON for `complete` or `lse2d`.
        #[arg(long)]
        output: PathBuf,
        /// Ground truth: the matrix, the noise variance and the scene if any.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

#[derive(Args)]
struct InputOutput {
    /// Observed-matrix JSON.
    #[arg(long)]
    input: PathBuf,
    /// Expected bit depth (`1`, `2`, ... or `inf`); checked against the input.
    #[arg(long)]
    bits: Option<BitDepth>,
    /// Result JSON; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SolverArgs {
    /// Overparameterized rank.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    t_outer: usize,
    #[arg(long, default_value_t = 0.7)]
    damping: f64,
    /// Learn the noise variance; defaults to on except for one-bit data.
    #[arg(long)]
    learn_noise: Option<bool>,
    /// Initial noise variance; `k / 2` when omitted.
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SolverArgs {
    fn config(&self) -> GrSblConfig {
        GrSblConfig {
            t_outer: self.t_outer,
            k: self.k,
            learn_noise: self.learn_noise,
            sigma2_init: self.sigma2,
            damping: self.damping,
            seed: self.seed,
            ..GrSblConfig::default()
        }
    }
}

fn read_observed(io: &InputOutput) -> Result<ObservedMatrix> {
    let text = fs::read_to_string(&io.input).with_context(|| format!("reading {}", io.input.display()))?;
    let obs = ObservedMatrix::from_json(&text).with_context(|| format!("parsing {}", io.input.display()))?;
    if let Some(bits) = io.bits {
        if bits != obs.bit_depth() {
            bail!("--bits {bits} does not match the input, which has B = {}", obs.bit_depth());
        }
    }
    Ok(obs)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json(path: Option<&Path>, value: &Value) -> Result<()> {
    let mut out: Box<dyn Write> = match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn simulate(
    config: &Path,
    output: Option<&Path>,
    summary: Option<&Path>,
    workers: Option<usize>,
    timing: bool,
) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", config.display()))?;
    let rows = run_experiment(&cfg, &RunOptions { workers, timing })?;
    let failed = rows.iter().filter(|r| r.failed()).count();
    match output {
        Some(p) => write_csv(&rows, create(p)?)?,
        None => write_csv(&rows, io::stdout().lock())?,
    }
    if let Some(p) = summary {
        let mut out = create(p)?;
        write_summary(&rows, &mut out)?;
        writeln!(out)?;
        out.flush()?;
    }
    if failed > 0 {
        eprintln!("warning: {failed} of {} rows failed; see the error column", rows.len());
    }
    Ok(())
}

fn generate(config: &Path, trial: usize, output: &Path, truth: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", config.display()))?;
    let t = prepare_trial(&cfg, cfg.snr_db[0], cfg.bits[0], trial)?;
    let mut out = create(output)?;
    out.write_all(t.obs.to_json()?.as_bytes())?;
    writeln!(out)?;
    out.flush()?;
    if let Some(p) = truth {
        let scene: Option<&LineSpectralScene> = t.scene.as_ref();
        let value = json!({
            "scenario": cfg.scenario,
            "z": ComplexMatrixJson::from(&t.z),
            "sigma2": t.sigma2,
            "scene": scene,
        });
        write_json(Some(p), &value)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { config, output, summary, workers, timing } => {
            simulate(&config, output.as_deref(), summary.as_deref(), workers, timing)
        }
        Command::Complete { io, solver } => {
            let obs = read_observed(&io)?;
            let result = run_mc_grsbl(&obs, &solver.config())?;
            write_json(io.output.as_deref(), &serde_json::to_value(result.report())?)
        }
        Command::Lse2d { io, solver, grid } => {
            let obs = read_observed(&io)?;
            let result = run_lse2d(&obs, &Lse2dConfig { solver: solver.config(), grid_size: grid })?;
            let est = &result.estimate;
            let value = json!({
                "scene": est.scene,
                "z_hat": ComplexMatrixJson::from(&est.z_hat),
                "rank": result.solver.rank,
                "sigma2": result.solver.sigma2,
                "degraded": est.degraded,
            });
            write_json(io.output.as_deref(), &value)
        }
        Command::Generate { config, trial, output, truth } => generate(&config, trial, &output, truth.as_deref()),
    }
}
