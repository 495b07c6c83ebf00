use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agbench::bench::{self, RunConfig, SweepConfig};
use agbench::mixture::{MixtureModel, ScoreKind};
use agbench::schedule::NoiseSchedule;

#[derive(Parser)]
#[command(name = "agbench", about = "Adaptive-guidance diffusion sampling benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment cell and append a results CSV row
    Run(RunArgs),
    /// Run a Cartesian sweep of strategy/schedule parameters
    Sweep {
        /// Sweep config file (template + axes)
        #[arg(long)]
        config: PathBuf,
        /// Override the template's results CSV path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit SNR curves for one or more schedules
    SnrCurves {
        /// Schedule names (vp-linear, vp-cosine, rectified-flow)
        #[arg(long, value_delimiter = ',', default_values_t = [
            "vp-linear".to_string(), "vp-cosine".to_string(), "rectified-flow".to_string()
        ])]
        schedules: Vec<String>,
        #[arg(long = "T", default_value_t = 1000)]
        t_steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the per-step mean cosine similarity over diagnostic runs
    GammaCurves {
        #[command(flatten)]
        run: RunArgs,
        /// Number of trajectories to average
        #[arg(long, default_value_t = 20)]
        n_avg: usize,
        /// Output curve file
        #[arg(long = "curve-out")]
        curve_out: PathBuf,
    },
    /// Load a mixture spec and report whether it is valid
    ValidateModel {
        /// Path to the mixture JSON file
        model: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long = "T")]
    t_steps: Option<usize>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_parser = parse_score_kind)]
    late_score: Option<ScoreKind>,
    /// Condition label, or "all"
    #[arg(long)]
    condition: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Force dual evaluation on every step for complete gamma traces
    #[arg(long)]
    diag: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trace_dir: Option<PathBuf>,
}

fn parse_score_kind(s: &str) -> Result<ScoreKind, String> {
    match s {
        "conditional" => Ok(ScoreKind::Conditional),
        "unconditional" => Ok(ScoreKind::Unconditional),
        other => Err(format!("expected conditional|unconditional, got {other}")),
    }
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path).map_err(|e| e.to_string())?,
            None => {
                let required = |name: &str| format!("--{name} required when no --config is given");
                RunConfig {
                    model: self.model.clone().ok_or_else(|| required("model"))?,
                    schedule: self.schedule.clone().ok_or_else(|| required("schedule"))?,
                    beta_min: None,
                    beta_max: None,
                    offset: None,
                    t_steps: self.t_steps.ok_or_else(|| required("T"))?,
                    strategy: self.strategy.clone().ok_or_else(|| required("strategy"))?,
                    w: agbench::guidance::DEFAULT_GUIDANCE_SCALE,
                    p: None,
                    gamma: None,
                    lambda: None,
                    late_score: ScoreKind::Conditional,
                    condition: "all".into(),
                    n: 4000,
                    seed: 0,
                    diag: false,
                    out: None,
                    trace_dir: None,
                }
            }
        };
        if let Some(v) = self.model {
            cfg.model = v;
        }
        if let Some(v) = self.schedule {
            cfg.schedule = v;
        }
        if let Some(v) = self.t_steps {
            cfg.t_steps = v;
        }
        if let Some(v) = self.strategy {
            cfg.strategy = v;
        }
        if let Some(v) = self.p {
            cfg.p = Some(v);
        }
        if let Some(v) = self.w {
            cfg.w = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = Some(v);
        }
        if let Some(v) = self.lambda {
            cfg.lambda = Some(v);
        }
        if let Some(v) = self.late_score {
            cfg.late_score = v;
        }
        if let Some(v) = self.condition {
            cfg.condition = v;
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.diag {
            cfg.diag = true;
        }
        if let Some(v) = self.out {
            cfg.out = Some(v);
        }
        if let Some(v) = self.trace_dir {
            cfg.trace_dir = Some(v);
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.into_config()?;
            let result = bench::run_experiment(&cfg).map_err(|e| e.to_string())?;
            println!(
                "strategy={} total_evals={} saved_ratio={:.4} alignment_acc={:.4}",
                result.config_fields[0],
                result.cost.total_evals,
                result.cost.evals_saved_ratio,
                result.quality.alignment_acc
            );
        }
        Command::Sweep { config, out } => {
            let mut sweep = SweepConfig::from_file(&config).map_err(|e| e.to_string())?;
            if let Some(out) = out {
                sweep.template.out = Some(out);
            }
            let results = bench::run_sweep(&sweep).map_err(|e| e.to_string())?;
            println!("sweep complete: {} cells", results.len());
        }
        Command::SnrCurves { schedules, t_steps, out } => {
            let schedules: Vec<NoiseSchedule> = schedules
                .iter()
                .map(|name| NoiseSchedule::by_name(name).map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?;
            bench::emit_snr_curves(&schedules, t_steps, &out).map_err(|e| e.to_string())?;
            println!("wrote {}", out.display());
        }
        Command::GammaCurves { run, n_avg, curve_out } => {
            let mut cfg = run.into_config()?;
            cfg.diag = true;
            bench::emit_gamma_curves(&cfg, n_avg, &curve_out).map_err(|e| e.to_string())?;
            println!("wrote {}", curve_out.display());
        }
        Command::ValidateModel { model } => {
            let m = MixtureModel::load(&model).map_err(|e| e.to_string())?;
            println!(
                "ok: dim={} classes={} labels=[{}]",
                m.dim(),
                m.classes().len(),
                m.labels().collect::<Vec<_>>().join(", ")
            );
        }
    }
    Ok(())
}
