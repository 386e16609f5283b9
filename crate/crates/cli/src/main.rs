//! `porl`: command-line front end for private offline-RL data synthesis.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use porl::accountant::{Accountant, PrivacyLedger};
use porl::io::{DatasetFile, Report, RunConfig, SavedModel, Task};
use porl::{run, Error};

#[derive(Parser)]
#[command(
    name = "porl",
    version,
    about = "Differentially private synthesis of offline RL datasets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find the noise multiplier that spends a target epsilon.
    Calibrate {
        /// Sampling ratio.
        #[arg(long)]
        q: Option<String>,
        /// Number of DP-SGD steps.
        #[arg(long)]
        steps: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Roll out a scripted policy in the grid world and save the data.
    Collect {
        /// Episodes to roll out.
        #[arg(long)]
        episodes: Option<String>,
        /// `random` or `expert`.
        #[arg(long)]
        policy: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train a synthesizer on public data.
    Pretrain(Common),
    /// Fine-tune a checkpoint on sensitive data with DP-SGD.
    Finetune(Common),
    /// Sample a synthetic dataset from a checkpoint.
    Synthesize(Common),
    /// Score a synthetic dataset against the real one.
    Evaluate(Common),
    /// Pre-train, fine-tune, synthesize and evaluate in one run.
    Pipeline(Common),
}

#[derive(Args, Default)]
struct Common {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// `transition` or `trajectory`.
    #[arg(long)]
    mode: Option<String>,
    /// Privacy budget; `inf` disables noise.
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    /// Fraction of each pre-training batch replaced by novel drafts.
    #[arg(long)]
    curiosity_rate: Option<String>,
    /// Transitions per trajectory fragment.
    #[arg(long)]
    horizon: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    public: Option<String>,
    #[arg(long)]
    sensitive: Option<String>,
    #[arg(long)]
    synthetic: Option<String>,
    /// Output file (output directory for `pipeline`).
    #[arg(long)]
    out: Option<String>,
    /// Input checkpoint.
    #[arg(long)]
    ckpt: Option<String>,
    /// Report file.
    #[arg(long)]
    report: Option<String>,
    /// Rows or trajectories to synthesize.
    #[arg(long)]
    samples: Option<String>,
    /// Use the alternative reverse-step mean denominator.
    #[arg(long)]
    paper_literal_mean: bool,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn build_config(common: &Common, extra: &[(&str, &Option<String>)]) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => usage(format!("cannot read config {}: {io}", p.display())),
            other => usage(other.to_string()),
        })?,
        None => RunConfig::default(),
    };
    let flags = [
        ("mode", &common.mode),
        ("epsilon", &common.epsilon),
        ("delta", &common.delta),
        ("curiosity_rate", &common.curiosity_rate),
        ("horizon", &common.horizon),
        ("seed", &common.seed),
        ("public", &common.public),
        ("sensitive", &common.sensitive),
        ("synthetic", &common.synthetic),
        ("out", &common.out),
        ("ckpt", &common.ckpt),
        ("report", &common.report),
        ("samples", &common.samples),
    ];
    for (key, value) in flags.iter().chain(extra) {
        if let Some(v) = value {
            cfg.set(key, v).map_err(|e| usage(e.to_string()))?;
        }
    }
    if common.paper_literal_mean {
        cfg.paper_literal_mean = true;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn no_dp_banner(cfg: &RunConfig) {
    if cfg.epsilon.is_infinite() {
        eprintln!("*** no DP: epsilon = inf, training adds no noise (sigma = 0) ***");
    }
}

fn finish(report: &Report, cfg: &RunConfig) -> Result<(), Failure> {
    print!("{}", report.to_text());
    if let Some(p) = &cfg.report {
        report.save(p).map_err(|e| e.in_stage("save report"))?;
    }
    Ok(())
}

fn stage<T>(name: &'static str, r: porl::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| match e {
        Error::Config(_) => Failure::from(e),
        other => Failure::from(other.in_stage(name)),
    })
}

fn load_dataset(path: &Option<PathBuf>) -> porl::Result<DatasetFile> {
    DatasetFile::load(path.as_deref().expect("validated"))
}

fn checked(cfg: RunConfig, task: Task) -> Result<RunConfig, Failure> {
    cfg.validate(task).map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn header(task: Task, cfg: &RunConfig) -> Report {
    let mut r = Report::new();
    r.push("task", task.name());
    r.push("seed", cfg.seed);
    r.push_config(cfg);
    r
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Calibrate { q, steps, common } => {
            let cfg = checked(
                build_config(&common, &[("q", &q), ("dp_steps", &steps)])?,
                Task::Calibrate,
            )?;
            no_dp_banner(&cfg);
            let accountant = Accountant {
                conversion: cfg.conversion,
                ..Accountant::default()
            };
            let ledger = stage(
                "calibrate",
                PrivacyLedger::plan(&accountant, cfg.q, cfg.dp_steps, cfg.epsilon, cfg.delta),
            )?;
            let mut r = Report::new();
            r.push("task", "calibrate");
            r.push("private", ledger.is_private());
            r.push_ledger("privacy", &ledger);
            finish(&r, &cfg)
        }
        Command::Collect {
            episodes,
            policy,
            common,
        } => {
            let cfg = checked(
                build_config(&common, &[("episodes", &episodes), ("policy", &policy)])?,
                Task::Collect,
            )?;
            let data = stage("collect", run::collect_data(&cfg))?;
            stage("save dataset", data.save(cfg.out.as_deref().expect("validated")))?;
            let mut r = header(Task::Collect, &cfg);
            r.push("dataset.mode", data.mode());
            r.push("dataset.rows", stage("collect", data.transitions())?.len());
            finish(&r, &cfg)
        }
        Command::Pretrain(common) => {
            let cfg = checked(build_config(&common, &[])?, Task::Pretrain)?;
            let public = stage("load public", load_dataset(&cfg.public))?;
            let (model, log) = stage("pretrain", run::pretrain_model(&cfg, &public))?;
            stage("save model", model.save(cfg.out.as_deref().expect("validated")))?;
            let mut r = header(Task::Pretrain, &cfg);
            run::report_pretrain(&mut r, &log);
            finish(&r, &cfg)
        }
        Command::Finetune(common) => {
            let cfg = checked(build_config(&common, &[])?, Task::Finetune)?;
            no_dp_banner(&cfg);
            let mut model = stage("load model", SavedModel::load(cfg.ckpt.as_deref().expect("validated")))?;
            let sensitive = stage("load sensitive", load_dataset(&cfg.sensitive))?;
            let (log, ledger) = stage("finetune", run::finetune_model(&cfg, &mut model, &sensitive))?;
            stage("save model", model.save(cfg.out.as_deref().expect("validated")))?;
            let mut r = header(Task::Finetune, &cfg);
            run::report_finetune(&mut r, &log, &ledger);
            finish(&r, &cfg)
        }
        Command::Synthesize(common) => {
            let cfg = checked(build_config(&common, &[])?, Task::Synthesize)?;
            let model = stage("load model", SavedModel::load(cfg.ckpt.as_deref().expect("validated")))?;
            let data = stage("synthesize", run::synthesize(&cfg, &model, cfg.samples))?;
            stage("save synthetic", data.save(cfg.out.as_deref().expect("validated")))?;
            let mut r = header(Task::Synthesize, &cfg);
            r.push("synthetic.mode", data.mode());
            r.push("synthetic.units", cfg.samples);
            finish(&r, &cfg)
        }
        Command::Evaluate(common) => {
            let cfg = checked(build_config(&common, &[])?, Task::Evaluate)?;
            let real = stage("load sensitive", load_dataset(&cfg.sensitive))?;
            let synthetic = stage("load synthetic", load_dataset(&cfg.synthetic))?;
            let mut r = header(Task::Evaluate, &cfg);
            stage("evaluate", run::evaluate(&cfg, &real, &synthetic, &mut r))?;
            finish(&r, &cfg)
        }
        Command::Pipeline(common) => {
            let cfg = checked(build_config(&common, &[])?, Task::Pipeline)?;
            no_dp_banner(&cfg);
            let (report, outputs) = run::pipeline(&cfg)?;
            print!("{}", report.to_text());
            eprintln!(
                "wrote {}, {} and {}",
                outputs.model.display(),
                outputs.synthetic.display(),
                outputs.report.display()
            );
            Ok(())
        }
    }
}

fn init_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("PORL_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("PORL_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure {
                code: 1,
                message: e.to_string(),
            })?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| execute(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("porl: error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
