//! Curiosity-driven pre-training, private fine-tuning and bulk synthesis of
//! transitions.

use serde::{Deserialize, Serialize};

use crate::accountant::{Accountant, PrivacyLedger};
use crate::curiosity::{curious_replace, replacement_count, CuriosityConfig, RndPair};
use crate::diffusion::{diffusion_loss, sample, MlpDenoiser, MlpDenoiserSpec, NoiseSchedule};
use crate::dpsgd::{dp_step_transition, DpSgdConfig, Level};
use crate::error::{Error, Result};
use crate::numerics::{Optimizer, OptimizerKind, ParamSet, SeededRng, Tensor};
use crate::transition::data::{argmax_decode, encode_rows, settle_terminal, NormStats, Schema, TransitionDataset};

/// Stream label of the randomness spent on curiosity drafts and placement.
pub const CURIOSITY_STREAM: u64 = 0xC0_1105;

/// Where standardization statistics come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatsSource {
    /// Fitted on the public set; the sensitive set is never inspected.
    #[default]
    Public,
    /// Refitted on the sensitive set before fine-tuning. Leaks per-column
    /// means and spreads outside the privacy accounting.
    Sensitive,
}

/// Update rule applied to the privatized gradient during fine-tuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    #[default]
    Sgd,
    /// Adam over the noisy gradient. Post-processing only, so the privacy
    /// accounting is unchanged.
    Adam,
}

impl UpdateRule {
    pub fn optimizer(self, lr: f64) -> OptimizerKind {
        match self {
            UpdateRule::Sgd => OptimizerKind::sgd(lr),
            UpdateRule::Adam => OptimizerKind::adam(lr),
        }
    }
}

/// Training knobs shared by both pipelines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch: usize,
    pub curiosity: CuriosityConfig,
    pub epsilon: f64,
    pub delta: f64,
    pub clip: f64,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub finetune_rule: UpdateRule,
    /// Steps of the shortened sampler that drafts rows for curiosity.
    pub draft_steps: usize,
    pub stats: StatsSource,
    pub accountant: Accountant,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 10,
            finetune_epochs: 5,
            batch: 128,
            curiosity: CuriosityConfig::default(),
            epsilon: 10.0,
            delta: 1e-5,
            clip: 1.0,
            pretrain_lr: 1e-3,
            finetune_lr: 0.1,
            finetune_rule: UpdateRule::Sgd,
            draft_steps: 10,
            stats: StatsSource::Public,
            accountant: Accountant::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.curiosity.validate()?;
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.clip > 0.0) || self.draft_steps == 0 {
            return Err(Error::invalid("clip norm and draft steps must be positive"));
        }
        Ok(())
    }

    /// `(q, steps)` for a private phase over `units` records.
    pub fn private_schedule(&self, units: usize) -> Result<(f64, u64)> {
        if units == 0 {
            return Err(Error::Empty("private phase over an empty dataset".into()));
        }
        let q = (self.batch as f64 / units as f64).min(1.0);
        Ok((q, (self.finetune_epochs as f64 / q).round() as u64))
    }
}

/// Per-column `[min, max]` of a model-space table.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftBounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl DraftBounds {
    pub fn of(x: &Tensor) -> Self {
        let mut lo = vec![f64::INFINITY; x.cols()];
        let mut hi = vec![f64::NEG_INFINITY; x.cols()];
        for r in x.row_iter() {
            for (c, &v) in r.iter().enumerate() {
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        Self { lo, hi }
    }

    /// Clamps every row of `x` into the box, column by column.
    pub fn clamp(&self, x: &mut Tensor) {
        let w = self.lo.len();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let c = i % w;
            *v = v.clamp(self.lo[c], self.hi[c]);
        }
    }
}

/// Per-batch losses of a training phase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    /// Mean curiosity score of each draft batch before the predictor update.
    pub curiosity: Vec<f64>,
    pub skipped: usize,
}

/// A transition synthesizer: schema, standardization, schedule and an MLP
/// denoiser with its parameters.
#[derive(Clone, Debug)]
pub struct TransitionModel {
    pub schema: Schema,
    pub stats: NormStats,
    pub schedule: NoiseSchedule,
    pub denoiser: MlpDenoiser,
    pub params: ParamSet,
}

impl TransitionModel {
    pub fn new(
        schema: Schema,
        stats: NormStats,
        spec: MlpDenoiserSpec,
        schedule: NoiseSchedule,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        let denoiser = MlpDenoiser::new(spec, &mut params, rng)?;
        Self::from_parts(schema, stats, schedule, denoiser, params)
    }

    pub fn from_parts(
        schema: Schema,
        stats: NormStats,
        schedule: NoiseSchedule,
        denoiser: MlpDenoiser,
        params: ParamSet,
    ) -> Result<Self> {
        schema.validate()?;
        let w = schema.encoded_width();
        let spec = denoiser.spec();
        if spec.data_dim != w || stats.width() != w {
            return Err(Error::shape(format!(
                "denoiser width {} and stats width {} for encoded width {w}",
                spec.data_dim,
                stats.width()
            )));
        }
        if spec.steps != schedule.steps() || spec.cond_dim != 0 {
            return Err(Error::shape("denoiser does not match schedule"));
        }
        Ok(Self {
            schema,
            stats,
            schedule,
            denoiser,
            params,
        })
    }

    /// A fresh model standardized on `public`, with `steps` diffusion steps
    /// and the default network shape.
    pub fn for_data(public: &TransitionDataset, steps: usize, rng: &mut SeededRng) -> Result<Self> {
        let schema = public.schema().clone();
        let stats = NormStats::fit(&encode_rows(&schema, public.rows())?, &schema.fixed_columns())?;
        let spec = MlpDenoiserSpec::new(schema.encoded_width(), steps);
        Self::new(schema, stats, spec, NoiseSchedule::scaled_linear(steps)?, rng)
    }

    /// One-hot encodes and standardizes `ds` into model space.
    pub fn encode(&self, ds: &TransitionDataset) -> Result<Tensor> {
        if ds.schema() != &self.schema {
            return Err(Error::shape("dataset schema differs from the model's"));
        }
        self.stats.normalize(&encode_rows(&self.schema, ds.rows())?)
    }

    /// Maps model-space rows back to transitions.
    pub fn decode(&self, x: &Tensor) -> Result<TransitionDataset> {
        let raw = argmax_decode(&self.schema, &self.stats.denormalize(x)?)?;
        let mut rows = raw.rows().clone();
        for r in 0..rows.rows() {
            settle_terminal(&self.schema, rows.row_mut(r));
        }
        TransitionDataset::new(self.schema.clone(), rows)
    }
}

/// Pre-trains on `public`: every batch is partly replaced by the most novel
/// freshly drafted rows, then drives one diffusion-loss step.
pub fn pretrain(
    model: &mut TransitionModel,
    public: &TransitionDataset,
    rnd: &mut RndPair,
    cfg: &PipelineConfig,
    rng: &mut SeededRng,
) -> Result<TrainLog> {
    cfg.validate()?;
    if public.is_empty() {
        return Err(Error::Empty("pre-training on an empty public set".into()));
    }
    let x = model.encode(public)?;
    if rnd.input_dim() != x.cols() {
        return Err(Error::shape("curiosity networks do not match the encoded width"));
    }
    let draft = model.schedule.respaced(cfg.draft_steps.min(model.schedule.steps()))?;
    // Drafts from a barely trained model can be far off the data's scale.
    let bounds = DraftBounds::of(&x);
    let mut curious_rng = rng.derive(CURIOSITY_STREAM);
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.pretrain_lr));
    let mut log = TrainLog::default();
    let p = cfg.curiosity.rate;
    for _ in 0..cfg.pretrain_epochs {
        let mut order: Vec<usize> = (0..x.rows()).collect();
        rng.shuffle(&mut order);
        for idx in order.chunks(cfg.batch) {
            let real = x.select_rows(idx);
            let batch = if replacement_count(p, idx.len()) > 0 {
                let mut synth = sample(
                    &model.denoiser,
                    &model.params,
                    &draft,
                    idx.len(),
                    &mut curious_rng,
                    None,
                )?;
                bounds.clamp(&mut synth);
                let scores = rnd.scores(&synth)?;
                log.curiosity.push(rnd.update_predictor(&synth)?);
                curious_replace(&real, &synth, &scores, p, &mut curious_rng)?.batch
            } else {
                real
            };
            let (loss, g) = diffusion_loss(&model.denoiser, &model.params, &model.schedule, &batch, rng)?;
            opt.step(&mut model.params, &g)?;
            log.losses.push(loss);
        }
    }
    Ok(log)
}

/// Fine-tunes on `sensitive` with transition-level DP-SGD, calibrating the
/// noise so the whole phase spends at most `cfg.epsilon`.
pub fn finetune(
    model: &mut TransitionModel,
    sensitive: &TransitionDataset,
    cfg: &PipelineConfig,
    rng: &mut SeededRng,
) -> Result<(TrainLog, PrivacyLedger)> {
    cfg.validate()?;
    let (q, steps) = cfg.private_schedule(sensitive.len())?;
    let ledger = PrivacyLedger::plan(&cfg.accountant, q, steps, cfg.epsilon, cfg.delta)?;
    finetune_planned(model, sensitive, cfg, ledger, rng)
}

/// Runs the private phase described by `ledger` (its `q`, `σ` and step
/// count), whatever budget it amounts to.
pub fn finetune_planned(
    model: &mut TransitionModel,
    sensitive: &TransitionDataset,
    cfg: &PipelineConfig,
    ledger: PrivacyLedger,
    rng: &mut SeededRng,
) -> Result<(TrainLog, PrivacyLedger)> {
    cfg.validate()?;
    let (q, steps) = (ledger.q, ledger.steps);
    if sensitive.is_empty() {
        return Err(Error::Empty("private phase over an empty dataset".into()));
    }
    if cfg.stats == StatsSource::Sensitive {
        let enc = encode_rows(&model.schema, sensitive.rows())?;
        model.stats = NormStats::fit(&enc, &model.schema.fixed_columns())?;
    }
    let x = model.encode(sensitive)?;
    let dp = DpSgdConfig {
        clip: cfg.clip,
        sigma: ledger.sigma,
        q,
        optimizer: cfg.finetune_rule.optimizer(cfg.finetune_lr),
        level: Level::Transition,
    };
    let mut opt = Optimizer::new(dp.optimizer);
    let mut log = TrainLog::default();
    for _ in 0..steps {
        let stats = dp_step_transition(
            &model.denoiser,
            &mut model.params,
            &model.schedule,
            &x,
            &dp,
            &mut opt,
            rng,
        )?;
        if stats.skipped {
            log.skipped += 1;
        } else {
            log.losses.push(stats.loss);
        }
    }
    Ok((log, ledger))
}

/// Draws `n` transitions from the model.
pub fn synthesize_transitions(model: &TransitionModel, n: usize, rng: &mut SeededRng) -> Result<TransitionDataset> {
    let x = sample(&model.denoiser, &model.params, &model.schedule, n, rng, None)?;
    model.decode(&x)
}

/// [`synthesize_transitions`] with a shortened sampler of `steps` steps.
pub fn synthesize_transitions_fast(
    model: &TransitionModel,
    n: usize,
    steps: usize,
    rng: &mut SeededRng,
) -> Result<TransitionDataset> {
    let sched = model.schedule.respaced(steps.min(model.schedule.steps()))?;
    let x = sample(&model.denoiser, &model.params, &sched, n, rng, None)?;
    model.decode(&x)
}
