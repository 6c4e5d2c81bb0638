use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mgmar::config::{ConfigError, Preset, RunConfig};
use mgmar::pipeline::{selftest, Ablation, Pipeline, PipelineError, RunOptions, StageSet};

#[derive(Parser, Debug)]
#[command(name = "mgmar", version, about = "Metal-guided metal artifact reduction for 2D fan-beam CT")]
struct Cli {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (data, models, runs, eval, ablate).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

/// Overrides given after the verb, applied after the ones before it.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Extra `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Meta,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the paired dataset.
    GenData {
        #[command(flatten)]
        extra: Overrides,
    },
    /// Train the prior stages and the residual network.
    Pretrain {
        #[arg(long)]
        baseline: Option<Baseline>,
        #[command(flatten)]
        extra: Overrides,
    },
    /// Correct the validation cases, or one case.
    Run {
        /// Comma-separated subset of prior,nmar,residual.
        #[arg(long, default_value = "prior,nmar,residual")]
        stages: String,
        #[arg(long)]
        niter: Option<usize>,
        #[arg(long)]
        case: Option<String>,
        #[command(flatten)]
        extra: Overrides,
    },
    /// Metrics and report for the last run.
    Eval {
        /// Exit with status 4 if an ordering check fails.
        #[arg(long)]
        strict: bool,
        #[command(flatten)]
        extra: Overrides,
    },
    /// Paired comparison: mu_ma, mask_cond or init.
    Ablate {
        which: String,
        #[command(flatten)]
        extra: Overrides,
    },
    /// Invariant suites.
    Selftest {
        #[command(flatten)]
        extra: Overrides,
    },
}

impl Command {
    fn overrides(&self) -> &[String] {
        match self {
            Command::GenData { extra }
            | Command::Pretrain { extra, .. }
            | Command::Run { extra, .. }
            | Command::Eval { extra, .. }
            | Command::Ablate { extra, .. }
            | Command::Selftest { extra } => &extra.set,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let preset = cli.preset.as_deref().map(Preset::parse).transpose()?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, preset)?,
        None => RunConfig::preset(preset.unwrap_or(Preset::Desk)),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    for o in cli.overrides.iter().chain(cli.command.overrides()) {
        cfg.set_str(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() {
    if let Some(n) = std::env::var("MGMAR_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    if let Command::Selftest { .. } = cli.command {
        let checks = selftest();
        let failed = checks.iter().filter(|c| !c.pass).count();
        for c in &checks {
            println!("{c}");
        }
        println!("{} checks, {failed} failed", checks.len());
        if failed > 0 {
            return Err(PipelineError::Strict(format!("{failed} self-test checks failed")));
        }
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let pipeline = Pipeline::new(cfg)?;
    match &cli.command {
        Command::GenData { .. } => {
            let m = pipeline.gen_data()?;
            println!("{} cases in {}", m.cases.len(), m.root.display());
        }
        Command::Pretrain { baseline, .. } => {
            let s = pipeline.pretrain(matches!(baseline, Some(Baseline::Meta)))?;
            for (k, log) in s.stage_losses.iter().enumerate() {
                let k = k + s.reused_stages.len();
                println!("stage {k}: final loss {:.6e}", log.last().copied().unwrap_or(f64::NAN));
            }
            for k in &s.reused_stages {
                println!("stage {k}: up to date");
            }
            match &s.residual_losses {
                Some(l) => println!("residual: final loss {:.6e}", l.last().copied().unwrap_or(f64::NAN)),
                None => println!("residual: up to date"),
            }
            if s.meta_trained {
                println!("meta: {}", pipeline.meta_path().display());
            }
        }
        Command::Run { stages, niter, case, .. } => {
            let opts = RunOptions { stages: StageSet::parse(stages)?, n_iter: *niter, case: case.clone() };
            for r in pipeline.run(&opts)? {
                let t: Vec<String> = r.timing.iter().map(|(s, v)| format!("{s}={v:.3}s")).collect();
                println!("{} {}", r.id, t.join(" "));
            }
        }
        Command::Eval { strict, .. } => {
            let out = pipeline.eval(*strict)?;
            for s in &out.summary {
                println!("{:<14} n={:<3} rmse={:.6} psnr={:.3} ssim={:.4}", s.stage, s.n, s.rmse.0, s.psnr.0, s.ssim.0);
            }
            for f in &out.failures {
                println!("check failed: {f}");
            }
            println!("report: {}", pipeline.layout.eval().join("report.md").display());
        }
        Command::Ablate { which, .. } => {
            let out = pipeline.ablate(Ablation::parse(which)?)?;
            print!("{}", out.summary);
        }
        Command::Selftest { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    configure_threads();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
