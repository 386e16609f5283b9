//! Fragment-level pre-training, trajectory-level private fine-tuning and
//! stitched trajectory synthesis.

use crate::accountant::PrivacyLedger;
use crate::curiosity::{curious_replace, replacement_count, RndPair};
use crate::diffusion::{sample, Denoiser, NoiseSchedule, NoisedBatch, Penalty};
use crate::dpsgd::{dp_step_trajectory, DpSgdConfig, FragmentTable, Level};
use crate::error::{Error, Result};
use crate::numerics::{grad, Optimizer, OptimizerKind, ParamSet, SeededRng, Tensor};
use crate::trajectory::data::{fragment, Trajectory};
use crate::trajectory::transformer::{TransformerDenoiser, TransformerSpec};
use crate::transition::{
    argmax_decode, encode_rows, settle_terminal, DraftBounds, NormStats, PipelineConfig, Schema, TrainLog,
    CURIOSITY_STREAM,
};

/// A trajectory synthesizer: schema, per-transition standardization,
/// schedule and a transformer denoiser with its parameters.
#[derive(Clone, Debug)]
pub struct TrajectoryModel {
    pub schema: Schema,
    pub stats: NormStats,
    pub schedule: NoiseSchedule,
    pub denoiser: TransformerDenoiser,
    pub params: ParamSet,
}

impl TrajectoryModel {
    pub fn new(
        schema: Schema,
        stats: NormStats,
        spec: TransformerSpec,
        schedule: NoiseSchedule,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        let denoiser = TransformerDenoiser::new(spec, &mut params, rng)?;
        Self::from_parts(schema, stats, schedule, denoiser, params)
    }

    pub fn from_parts(
        schema: Schema,
        stats: NormStats,
        schedule: NoiseSchedule,
        denoiser: TransformerDenoiser,
        params: ParamSet,
    ) -> Result<Self> {
        schema.validate()?;
        if !schema.terminal {
            return Err(Error::invalid("trajectory models need a terminal column"));
        }
        let spec = denoiser.spec();
        if spec.components != schema.encoded_components().map(|r| r.len()) || stats.width() != spec.width() {
            return Err(Error::shape("transformer layout does not match the schema"));
        }
        if spec.steps != schedule.steps() {
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

    /// A fresh model standardized on the transitions of `public`.
    pub fn for_data(public: &[Trajectory], horizon: usize, steps: usize, rng: &mut SeededRng) -> Result<Self> {
        let first = public
            .first()
            .ok_or_else(|| Error::Empty("no public trajectories".into()))?;
        let schema = first.schema().clone();
        let flat = crate::trajectory::flatten(&schema, public)?;
        let stats = NormStats::fit(&encode_rows(&schema, flat.rows())?, &schema.fixed_columns())?;
        let spec = TransformerSpec::new(&schema, horizon, steps);
        Self::new(schema, stats, spec, NoiseSchedule::scaled_linear(steps)?, rng)
    }

    pub fn horizon(&self) -> usize {
        self.denoiser.spec().horizon
    }

    /// Encoded width of one transition.
    pub fn width(&self) -> usize {
        self.denoiser.spec().width()
    }

    fn encode(&self, rows: &Tensor) -> Result<Tensor> {
        self.stats.normalize(&encode_rows(&self.schema, rows)?)
    }

    /// Model-space form of one raw transition.
    pub fn encode_transition(&self, row: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode(&Tensor::matrix(1, row.len(), row.to_vec())?)?.into_data())
    }

    /// Raw transition from one model-space row, with categories decoded and
    /// the terminal flag settled.
    pub fn decode_transition(&self, enc: &[f64]) -> Result<Vec<f64>> {
        let x = self.stats.denormalize(&Tensor::matrix(1, enc.len(), enc.to_vec())?)?;
        let mut row = argmax_decode(&self.schema, &x)?.rows().clone().into_data();
        settle_terminal(&self.schema, &mut row);
        Ok(row)
    }

    /// Fragments, links and masks of `trajectories` in model space.
    pub fn table(&self, trajectories: &[Trajectory]) -> Result<FragmentTable> {
        let (h, w) = (self.horizon(), self.width());
        let mut frags = Vec::new();
        let mut conds = Vec::new();
        let mut mask = Vec::new();
        let mut groups = Vec::with_capacity(trajectories.len());
        for (j, traj) in trajectories.iter().enumerate() {
            if traj.schema() != &self.schema {
                return Err(Error::shape(format!("trajectory {j} has a different schema")));
            }
            let enc = self.encode(traj.rows())?;
            let start = groups.last().map_or(0, |g: &std::ops::Range<usize>| g.end);
            let pieces = fragment(traj, h, j)?;
            for f in &pieces {
                let lo = f.index * h;
                let real = f.real_len();
                frags.extend_from_slice(&enc.data()[lo * w..(lo + real) * w]);
                frags.extend(std::iter::repeat_n(0.0, (h - real) * w));
                mask.extend(std::iter::repeat_n(1.0, real * w));
                mask.extend(std::iter::repeat_n(0.0, (h - real) * w));
                if f.index == 0 {
                    conds.extend(std::iter::repeat_n(0.0, w));
                } else {
                    conds.extend_from_slice(enc.row(lo - 1));
                }
            }
            groups.push(start..start + pieces.len());
        }
        let n = groups.last().map_or(0, |g| g.end);
        Ok(FragmentTable {
            fragments: Tensor::matrix(n, h * w, frags)?,
            conditions: Tensor::matrix(n, w, conds)?,
            mask: Tensor::matrix(n, h * w, mask)?,
            groups,
        })
    }
}

/// Pre-trains on the fragments of `public` with the masked L1 objective,
/// replacing part of each batch with the most novel drafted fragments.
pub fn pretrain_j(
    model: &mut TrajectoryModel,
    public: &[Trajectory],
    rnd: &mut RndPair,
    cfg: &PipelineConfig,
    rng: &mut SeededRng,
) -> Result<TrainLog> {
    cfg.validate()?;
    if public.is_empty() {
        return Err(Error::Empty("pre-training on an empty public set".into()));
    }
    let table = model.table(public)?;
    let data_dim = model.denoiser.data_dim();
    if rnd.input_dim() != data_dim {
        return Err(Error::shape("curiosity networks do not match the fragment width"));
    }
    let draft = model.schedule.respaced(cfg.draft_steps.min(model.schedule.steps()))?;
    let bounds = DraftBounds::of(&table.fragments);
    let mut curious_rng = rng.derive(CURIOSITY_STREAM);
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.pretrain_lr));
    let mut log = TrainLog::default();
    let p = cfg.curiosity.rate;
    let cond_dim = model.denoiser.cond_dim();
    for _ in 0..cfg.pretrain_epochs {
        let mut order: Vec<usize> = (0..table.fragments.rows()).collect();
        rng.shuffle(&mut order);
        for idx in order.chunks(cfg.batch) {
            let mut batch = table.fragments.select_rows(idx);
            let real_conds = table.conditions.select_rows(idx);
            let mut conds = real_conds.clone();
            let mut mask = table.mask.select_rows(idx);
            if replacement_count(p, idx.len()) > 0 {
                let mut synth = sample(
                    &model.denoiser,
                    &model.params,
                    &draft,
                    idx.len(),
                    &mut curious_rng,
                    Some(&real_conds),
                )?;
                bounds.clamp(&mut synth);
                let scores = rnd.scores(&synth)?;
                log.curiosity.push(rnd.update_predictor(&synth)?);
                let rep = curious_replace(&batch, &synth, &scores, p, &mut curious_rng)?;
                for (&pos, &src) in rep.positions.iter().zip(&rep.inserted) {
                    conds.row_mut(pos).copy_from_slice(real_conds.row(src));
                    mask.row_mut(pos).fill(1.0);
                }
                batch = rep.batch;
            }
            let nb = NoisedBatch::draw(&model.schedule, &batch, Some(&conds), cond_dim, Penalty::Absolute, rng)?
                .with_mask(mask)?;
            let (loss, g) = grad(&model.denoiser, &model.params, &nb.inputs, &nb)?;
            opt.step(&mut model.params, &g)?;
            log.losses.push(loss);
        }
    }
    Ok(log)
}

/// Fine-tunes on `sensitive` with trajectory-level DP-SGD: `q` is the ratio
/// of the expected trajectory batch to the number of trajectories.
pub fn finetune_j(
    model: &mut TrajectoryModel,
    sensitive: &[Trajectory],
    cfg: &PipelineConfig,
    rng: &mut SeededRng,
) -> Result<(TrainLog, PrivacyLedger)> {
    cfg.validate()?;
    let (q, steps) = cfg.private_schedule(sensitive.len())?;
    let ledger = PrivacyLedger::plan(&cfg.accountant, q, steps, cfg.epsilon, cfg.delta)?;
    if cfg.stats == crate::transition::StatsSource::Sensitive {
        let flat = crate::trajectory::flatten(&model.schema, sensitive)?;
        model.stats = NormStats::fit(&encode_rows(&model.schema, flat.rows())?, &model.schema.fixed_columns())?;
    }
    let table = model.table(sensitive)?;
    let dp = DpSgdConfig {
        clip: cfg.clip,
        sigma: ledger.sigma,
        q,
        optimizer: cfg.finetune_rule.optimizer(cfg.finetune_lr),
        level: Level::Trajectory,
    };
    let mut opt = Optimizer::new(dp.optimizer);
    let mut log = TrainLog::default();
    for _ in 0..steps {
        let stats = dp_step_trajectory(
            &model.denoiser,
            &mut model.params,
            &model.schedule,
            &table,
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

/// A generated trajectory with the link each of its fragments was
/// conditioned on (raw form; zero for the first).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedTrajectory {
    pub trajectory: Trajectory,
    pub links: Vec<Vec<f64>>,
}

struct Draft {
    rows: Vec<f64>,
    links: Vec<Vec<f64>>,
    cond: Vec<f64>,
    done: bool,
}

/// Generates `n` trajectories fragment by fragment, all advanced together.
///
/// Each fragment after the first is conditioned on the last transition
/// emitted before it. A trajectory stops at its first terminal flag
/// (rounded at 0.5) or after `max_len` transitions. `sampler_steps`
/// selects a shortened sampler; `None` uses the full schedule.
pub fn synthesize_trajectories(
    model: &TrajectoryModel,
    n: usize,
    max_len: usize,
    sampler_steps: Option<usize>,
    rng: &mut SeededRng,
) -> Result<Vec<SynthesizedTrajectory>> {
    let (h, w) = (model.horizon(), model.width());
    if max_len < h {
        return Err(Error::invalid(format!("max length {max_len} below horizon {h}")));
    }
    let sched = match sampler_steps {
        Some(k) => model.schedule.respaced(k.min(model.schedule.steps()))?,
        None => model.schedule.clone(),
    };
    let raw_w = model.schema.width();
    let tc = model.schema.terminal_col().expect("validated");
    let mut drafts: Vec<Draft> = (0..n)
        .map(|_| Draft {
            rows: Vec::new(),
            links: vec![vec![0.0; raw_w]],
            cond: vec![0.0; w],
            done: false,
        })
        .collect();
    loop {
        let active: Vec<usize> = (0..n).filter(|&i| !drafts[i].done).collect();
        if active.is_empty() {
            break;
        }
        let cond_data: Vec<f64> = active.iter().flat_map(|&i| drafts[i].cond.clone()).collect();
        let cond = Tensor::matrix(active.len(), w, cond_data)?;
        let x = sample(&model.denoiser, &model.params, &sched, active.len(), rng, Some(&cond))?;
        for (a, &i) in active.iter().enumerate() {
            let d = &mut drafts[i];
            for p in 0..h {
                let row = model.decode_transition(&x.row(a)[p * w..(p + 1) * w])?;
                let terminal = row[tc] == 1.0;
                d.rows.extend_from_slice(&row);
                if terminal || d.rows.len() / raw_w == max_len {
                    d.done = true;
                    break;
                }
            }
            if !d.done {
                let last = d.rows[d.rows.len() - raw_w..].to_vec();
                d.cond = model.encode_transition(&last)?;
                d.links.push(last);
            }
        }
    }
    drafts
        .into_iter()
        .map(|d| {
            let len = d.rows.len() / raw_w;
            Ok(SynthesizedTrajectory {
                trajectory: Trajectory::new(model.schema.clone(), Tensor::matrix(len, raw_w, d.rows)?)?,
                links: d.links,
            })
        })
        .collect()
}

/// One trajectory from the model.
pub fn synthesize_trajectory(
    model: &TrajectoryModel,
    max_len: usize,
    sampler_steps: Option<usize>,
    rng: &mut SeededRng,
) -> Result<SynthesizedTrajectory> {
    Ok(synthesize_trajectories(model, 1, max_len, sampler_steps, rng)?.remove(0))
}

/// Mean `‖s′_p − s_{p+1}‖` over consecutive transitions of `trajectories`.
pub fn continuity_error(trajectories: &[Trajectory]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for t in trajectories {
        let s = t.schema().state_dim;
        let next = t.schema().next_state_cols();
        for p in 1..t.len() {
            let prev = &t.transition(p - 1)[next.clone()];
            let cur = &t.transition(p)[..s];
            total += prev.iter().zip(cur).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
