//! Run orchestration: each CLI stage as a function of a [`RunConfig`].
//!
//! Every stage draws from its own stream of the run seed, so a stage run on
//! its own consumes exactly the randomness it would inside [`pipeline`].

use std::path::{Path, PathBuf};

use crate::accountant::{Accountant, PrivacyLedger};
use crate::curiosity::{CuriosityConfig, RndPair};
use crate::diffusion::{MeanForm, MlpDenoiserSpec, NoiseSchedule};
use crate::env::{
    collect, evaluate as evaluate_policy, grid_schema, train_bc, Baselines, BcConfig, ExpertPolicy, GridWorld,
    GridWorldSpec, RandomPolicy,
};
use crate::error::{Error, Result};
use crate::io::{CollectPolicy, DatasetFile, Mode, Report, RunConfig, SavedModel};
use crate::metrics::{correlation_fidelity, marginal_fidelity, trajscore, CorrelationMode, EncoderConfig};
use crate::numerics::SeededRng;
use crate::trajectory::{
    continuity_error, finetune_j, pretrain_j, synthesize_trajectories, TrajectoryModel, TransformerSpec,
};
use crate::transition::{
    encode_rows, finetune, pretrain, synthesize_transitions, synthesize_transitions_fast, NormStats, PipelineConfig,
    TrainLog, TransitionModel,
};

const COLLECT_STREAM: u64 = 1;
const PRETRAIN_STREAM: u64 = 2;
const FINETUNE_STREAM: u64 = 3;
const SYNTH_STREAM: u64 = 4;
const EVAL_STREAM: u64 = 5;
/// Shared by every policy evaluated in one run, so that equally good
/// policies receive identical episodes.
const ROLLOUT_STREAM: u64 = 6;

/// File names written by [`pipeline`] inside the output directory.
pub const MODEL_FILE: &str = "model.ckpt";
pub const SYNTHETIC_FILE: &str = "synthetic.porl";
pub const REPORT_FILE: &str = "report.txt";

fn stream(cfg: &RunConfig, label: u64) -> SeededRng {
    SeededRng::new(cfg.seed).derive(label)
}

/// The configured grid world.
pub fn world(cfg: &RunConfig) -> Result<GridWorld> {
    let mut spec = GridWorldSpec::from_layout(&cfg.env_layout)?;
    spec.random_start = cfg.env_random_start;
    GridWorld::new(spec)
}

/// Training knobs for one phase.
pub fn pipeline_config(cfg: &RunConfig, batch: usize) -> PipelineConfig {
    PipelineConfig {
        pretrain_epochs: cfg.pretrain_epochs,
        finetune_epochs: cfg.finetune_epochs,
        batch,
        curiosity: CuriosityConfig {
            rate: cfg.curiosity_rate,
            ..CuriosityConfig::default()
        },
        epsilon: cfg.epsilon,
        delta: cfg.delta,
        clip: cfg.clip,
        pretrain_lr: cfg.pretrain_lr,
        finetune_lr: cfg.finetune_lr,
        finetune_rule: cfg.finetune_rule,
        draft_steps: cfg.draft_steps,
        stats: cfg.stats,
        accountant: Accountant {
            conversion: cfg.conversion,
            ..Accountant::default()
        },
        seed: cfg.seed,
    }
}

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    let form = if cfg.paper_literal_mean {
        MeanForm::Literal
    } else {
        MeanForm::Standard
    };
    Ok(NoiseSchedule::scaled_linear(cfg.diffusion_steps)?.with_mean_form(form))
}

/// Rolls out the configured policy in the configured world.
pub fn collect_data(cfg: &RunConfig) -> Result<DatasetFile> {
    let w = world(cfg)?;
    let mut rng = stream(cfg, COLLECT_STREAM);
    let (trajectories, flat) = match cfg.policy {
        CollectPolicy::Random => collect(&w, &RandomPolicy, cfg.episodes, &mut rng)?,
        CollectPolicy::Expert => collect(
            &w,
            &ExpertPolicy::new(w.clone(), cfg.policy_noise),
            cfg.episodes,
            &mut rng,
        )?,
    };
    Ok(match cfg.mode {
        Mode::Transition => DatasetFile::Transitions(flat),
        Mode::Trajectory => DatasetFile::Trajectories {
            schema: grid_schema(),
            trajectories,
        },
    })
}

/// Builds a fresh model on `public` and pre-trains it.
pub fn pretrain_model(cfg: &RunConfig, public: &DatasetFile) -> Result<(SavedModel, TrainLog)> {
    let mut rng = stream(cfg, PRETRAIN_STREAM);
    let pc = pipeline_config(cfg, cfg.batch);
    let schema = public.schema().clone();
    let flat = public.transitions()?;
    let stats = NormStats::fit(&encode_rows(&schema, flat.rows())?, &schema.fixed_columns())?;
    match (cfg.mode, public) {
        (Mode::Transition, _) => {
            let mut spec = MlpDenoiserSpec::new(schema.encoded_width(), cfg.diffusion_steps);
            spec.width = cfg.width;
            spec.depth = cfg.depth;
            let mut model = TransitionModel::new(schema, stats, spec, schedule(cfg)?, &mut rng)?;
            let mut rnd = RndPair::new(model.schema.encoded_width(), &pc.curiosity, &mut rng)?;
            let log = pretrain(&mut model, &flat, &mut rnd, &pc, &mut rng)?;
            Ok((SavedModel::Transition(model), log))
        }
        (Mode::Trajectory, DatasetFile::Trajectories { trajectories, .. }) => {
            let mut spec = TransformerSpec::new(&schema, cfg.horizon, cfg.diffusion_steps);
            spec.embed = cfg.embed;
            let mut model = TrajectoryModel::new(schema, stats, spec, schedule(cfg)?, &mut rng)?;
            let mut rnd = RndPair::new(
                crate::diffusion::Denoiser::data_dim(&model.denoiser),
                &pc.curiosity,
                &mut rng,
            )?;
            let log = pretrain_j(&mut model, trajectories, &mut rnd, &pc, &mut rng)?;
            Ok((SavedModel::Trajectory(model), log))
        }
        (Mode::Trajectory, DatasetFile::Transitions(_)) => Err(Error::Config(
            "trajectory mode needs a public dataset of trajectories".into(),
        )),
    }
}

/// Privately fine-tunes `model` on `sensitive`.
pub fn finetune_model(
    cfg: &RunConfig,
    model: &mut SavedModel,
    sensitive: &DatasetFile,
) -> Result<(TrainLog, PrivacyLedger)> {
    let mut rng = stream(cfg, FINETUNE_STREAM);
    let pc = pipeline_config(cfg, cfg.finetune_batch);
    match (model, sensitive) {
        (SavedModel::Transition(m), _) => finetune(m, &sensitive.transitions()?, &pc, &mut rng),
        (SavedModel::Trajectory(m), DatasetFile::Trajectories { trajectories, .. }) => {
            finetune_j(m, trajectories, &pc, &mut rng)
        }
        (SavedModel::Trajectory(_), DatasetFile::Transitions(_)) => Err(Error::Config(
            "a trajectory model needs a sensitive dataset of trajectories".into(),
        )),
    }
}

/// Draws `n` rows (transition model) or `n` trajectories.
pub fn synthesize(cfg: &RunConfig, model: &SavedModel, n: usize) -> Result<DatasetFile> {
    let mut rng = stream(cfg, SYNTH_STREAM);
    let steps = (cfg.sample_steps > 0).then_some(cfg.sample_steps);
    let file = match model {
        SavedModel::Transition(m) => DatasetFile::Transitions(match steps {
            Some(k) => synthesize_transitions_fast(m, n, k, &mut rng)?,
            None => synthesize_transitions(m, n, &mut rng)?,
        }),
        SavedModel::Trajectory(m) => DatasetFile::Trajectories {
            schema: m.schema.clone(),
            trajectories: synthesize_trajectories(m, n, cfg.max_len.max(m.horizon()), steps, &mut rng)?
                .into_iter()
                .map(|s| s.trajectory)
                .collect(),
        },
    };
    // Stored values are single precision; later stages see what a reload sees.
    DatasetFile::decode(&file.encode())
}

/// Number of units to synthesize when `samples` is 0.
pub fn default_samples(cfg: &RunConfig, sensitive: &DatasetFile) -> usize {
    if cfg.samples > 0 {
        return cfg.samples;
    }
    match sensitive {
        DatasetFile::Transitions(d) => d.len(),
        DatasetFile::Trajectories { trajectories, .. } => trajectories.len(),
    }
}

fn bc_config(cfg: &RunConfig) -> BcConfig {
    BcConfig {
        width: cfg.bc_width,
        depth: cfg.bc_depth,
        epochs: cfg.bc_epochs,
        batch: cfg.bc_batch,
        lr: cfg.bc_lr,
    }
}

/// Fidelity of `synthetic` against `real`, and, for grid-world data, the
/// normalized return of policies cloned from each.
pub fn evaluate(cfg: &RunConfig, real: &DatasetFile, synthetic: &DatasetFile, report: &mut Report) -> Result<()> {
    if real.schema() != synthetic.schema() {
        return Err(Error::Config(
            "real and synthetic datasets have different schemas".into(),
        ));
    }
    let mut rng = stream(cfg, EVAL_STREAM);
    let (r, s) = (real.transitions()?, synthetic.transitions()?);
    report.push("eval.real_rows", r.len());
    report.push("eval.synthetic_rows", s.len());
    if r.is_empty() || s.is_empty() {
        return Err(Error::Empty(
            "evaluation needs non-empty real and synthetic sets".into(),
        ));
    }
    report.push("fidelity.marginal", marginal_fidelity(r.rows(), s.rows())?);
    report.push(
        "fidelity.correlation",
        correlation_fidelity(r.rows(), s.rows(), CorrelationMode::Pearson)?,
    );
    if let (DatasetFile::Trajectories { trajectories: rt, .. }, DatasetFile::Trajectories { trajectories: st, .. }) =
        (real, synthetic)
    {
        report.push("fidelity.continuity_error", continuity_error(st));
        if cfg.trajscore {
            let enc = EncoderConfig {
                max_len: cfg.max_len,
                ..EncoderConfig::default()
            };
            let flat = |ts: &[crate::trajectory::Trajectory]| -> Vec<Vec<f64>> {
                ts.iter().map(|t| t.rows().data().to_vec()).collect()
            };
            let score = trajscore(&flat(rt), &flat(st), real.schema().width(), &enc, &mut rng)?;
            report.push("fidelity.trajscore", score);
        }
    }
    if real.schema() != &grid_schema() {
        report.push("returns", "skipped");
        return Ok(());
    }
    let w = world(cfg)?;
    let baselines = Baselines::measure(&w, cfg.eval_episodes, &mut rng)?;
    report.push("returns.random", baselines.random);
    report.push("returns.expert", baselines.expert);
    let bc = bc_config(cfg);
    for (name, data) in [("real", &r), ("synthetic", &s)] {
        let (policy, _) = train_bc(data, &bc, &mut rng)?;
        let stats = evaluate_policy(
            &policy,
            &w,
            cfg.eval_episodes,
            baselines,
            &mut stream(cfg, ROLLOUT_STREAM),
        )?;
        report.push(format!("returns.bc_{name}.raw"), stats.raw_mean);
        report.push(format!("returns.bc_{name}.se"), stats.raw_se);
        report.push(format!("returns.bc_{name}.normalized"), stats.normalized);
    }
    Ok(())
}

fn push_log(report: &mut Report, prefix: &str, log: &TrainLog) {
    report.push(format!("{prefix}.batches"), log.losses.len());
    report.push(format!("{prefix}.skipped"), log.skipped);
    if let Some(last) = log.losses.last() {
        report.push(format!("{prefix}.final_loss"), last);
    }
    if !log.losses.is_empty() {
        let tail = &log.losses[log.losses.len().saturating_sub(log.losses.len() / 10 + 1)..];
        report.push(
            format!("{prefix}.tail_mean_loss"),
            tail.iter().sum::<f64>() / tail.len() as f64,
        );
    }
}

/// Appends pre-training statistics.
pub fn report_pretrain(report: &mut Report, log: &TrainLog) {
    push_log(report, "pretrain", log);
}

/// Appends fine-tuning statistics and the privacy ledger.
pub fn report_finetune(report: &mut Report, log: &TrainLog, ledger: &PrivacyLedger) {
    push_log(report, "finetune", log);
    report.push("privacy.private", ledger.is_private());
    report.push_ledger("privacy", ledger);
}

/// Paths written by [`pipeline`].
#[derive(Clone, Debug)]
pub struct PipelineOutputs {
    pub model: PathBuf,
    pub synthetic: PathBuf,
    pub report: PathBuf,
}

impl PipelineOutputs {
    pub fn in_dir(cfg: &RunConfig, dir: &Path) -> Self {
        Self {
            model: dir.join(MODEL_FILE),
            synthetic: dir.join(SYNTHETIC_FILE),
            report: cfg.report.clone().unwrap_or_else(|| dir.join(REPORT_FILE)),
        }
    }
}

/// Pre-train, fine-tune, synthesize and evaluate, writing the fine-tuned
/// checkpoint, the synthetic dataset and the report. Errors carry the name
/// of the stage that raised them.
pub fn pipeline(cfg: &RunConfig) -> Result<(Report, PipelineOutputs)> {
    cfg.validate(crate::io::Task::Pipeline)?;
    let dir = cfg.out.clone().expect("validated");
    std::fs::create_dir_all(&dir).map_err(|e| Error::from(e).in_stage("setup"))?;
    let outputs = PipelineOutputs::in_dir(cfg, &dir);
    let load = |p: &Option<PathBuf>| DatasetFile::load(p.as_deref().expect("validated"));
    let public = load(&cfg.public).map_err(|e| e.in_stage("load public"))?;
    let sensitive = load(&cfg.sensitive).map_err(|e| e.in_stage("load sensitive"))?;

    let mut report = Report::new();
    report.push("task", "pipeline");
    report.push("seed", cfg.seed);
    report.push_config(cfg);

    let (mut model, log) = pretrain_model(cfg, &public).map_err(|e| e.in_stage("pretrain"))?;
    report_pretrain(&mut report, &log);
    let (log, ledger) = finetune_model(cfg, &mut model, &sensitive).map_err(|e| e.in_stage("finetune"))?;
    report_finetune(&mut report, &log, &ledger);
    model.save(&outputs.model).map_err(|e| e.in_stage("save model"))?;

    let n = default_samples(cfg, &sensitive);
    let synthetic = synthesize(cfg, &model, n).map_err(|e| e.in_stage("synthesize"))?;
    synthetic
        .save(&outputs.synthetic)
        .map_err(|e| e.in_stage("save synthetic"))?;
    report.push("synthetic.mode", synthetic.mode());
    report.push("synthetic.units", n);

    evaluate(cfg, &sensitive, &synthetic, &mut report).map_err(|e| e.in_stage("evaluate"))?;
    report.save(&outputs.report).map_err(|e| e.in_stage("save report"))?;
    Ok((report, outputs))
}
