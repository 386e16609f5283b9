//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits non-zero if any fails.
//!
//! `PORL_CRITERIA=1,4,8` runs a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use porl::accountant::{calibrate_sigma, PrivacyLedger};
use porl::curiosity::{curious_replace, CuriosityConfig, RndPair};
use porl::diffusion::{
    diffusion_loss, example_losses, pack_inputs, sample, Denoiser, MlpDenoiser, MlpDenoiserSpec, NoiseSchedule,
    NoisedBatch, Penalty,
};
use porl::dpsgd::{clipped_sum, dp_step_trajectory, dp_step_transition, trajectory_grad, DpSgdConfig, FragmentTable};
use porl::io::{CollectPolicy, DatasetFile, Report, RunConfig};
use porl::metrics::{
    correlation_fidelity, correlation_matrix, ks_per_column, marginal_fidelity, mean_best_cosine, mia_tpr_at_fpr,
    trajscore, CorrelationMode, EncoderConfig,
};
use porl::numerics::{grad_of_rows, gradient_check, Optimizer, OptimizerKind, ParamSet, SeededRng, Tensor};
use porl::run;
use porl::trajectory::{
    fragment, stitch, synthesize_trajectories, token_count, Trajectory, TrajectoryModel, TransformerDenoiser,
    TransformerSpec,
};
use porl::transition::{
    one_hot_encode, pretrain, synthesize_transitions, NormStats, PipelineConfig, Schema, TransitionDataset,
    TransitionModel,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: porl::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// One-sided sign test: probability of at least `wins` successes in `n`
/// fair coin flips.
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let choose = |k: usize| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (wins..=n).map(choose).sum::<f64>() / 2f64.powi(n as i32)
}

fn normal_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    SeededRng::new(seed).fill_normal(&mut data, 1.0);
    Tensor::matrix(rows, cols, data).unwrap()
}

fn small_denoiser(data_dim: usize, cond_dim: usize, steps: usize, seed: u64) -> (MlpDenoiser, ParamSet) {
    let mut params = ParamSet::new();
    let mut spec = MlpDenoiserSpec::new(data_dim, steps);
    spec.cond_dim = cond_dim;
    spec.width = 16;
    spec.depth = 3;
    let net = MlpDenoiser::new(spec, &mut params, &mut SeededRng::new(seed)).unwrap();
    (net, params)
}

// ---------------------------------------------------------------- 1

const SIGMA_TABLE: [(f64, u64, f64); 10] = [
    (1.28e-4, 574_000, 0.44),
    (0.64e-4, 294_000, 0.39),
    (0.32e-4, 433_000, 0.37),
    (9.35e-4, 15_000, 0.47),
    (12.67e-4, 240_000, 0.68),
    (5.18e-2, 200_000, 12.1),
    (2.57e-2, 200_000, 6.3),
    (1.29e-2, 200_000, 3.2),
    (1.70e-1, 200_000, 40.4),
    (2.53e-1, 200_000, 60.9),
];

fn accountant_table() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for (q, steps, want) in SIGMA_TABLE {
        let got = ok(calibrate_sigma(q, steps, 10.0, 1e-6))?.sigma;
        let rel = (got / want - 1.0).abs();
        ensure(rel <= 0.1, || format!("q={q} steps={steps}: sigma {got:.3} vs {want}"))?;
        worst = worst.max(rel);
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.0}s"))?;
    Ok(format!("10/10 within 10%, worst {:.1}%, {secs:.1}s", 100.0 * worst))
}

// ---------------------------------------------------------------- 2

fn gradient_suite() -> Outcome {
    let t = Instant::now();

    let mut params = ParamSet::new();
    let mut spec = MlpDenoiserSpec::new(3, 10);
    spec.width = 16;
    spec.depth = 2;
    spec.time_features = 8;
    let net = MlpDenoiser::new(spec, &mut params, &mut SeededRng::new(1)).unwrap();
    ensure(params.dim() <= 1000, || format!("MLP has {} parameters", params.dim()))?;
    let sched = ok(NoiseSchedule::scaled_linear(10))?;
    let x = normal_matrix(4, 3, 2);
    let nb = ok(NoisedBatch::draw(
        &sched,
        &x,
        None,
        0,
        Penalty::Squared,
        &mut SeededRng::new(3),
    ))?;
    let mlp = ok(gradient_check(&net, &params, &nb.inputs, &nb, 1e-5))?;
    ensure(mlp.relative < 1e-4, || format!("MLP {mlp:?}"))?;

    let mut spec = TransformerSpec::new(&Schema::new(1, 1, true), 2, 10);
    spec.embed = 4;
    spec.heads = 2;
    spec.layers = 1;
    spec.ff_mult = 2;
    let mut params = ParamSet::new();
    let d = TransformerDenoiser::new(spec, &mut params, &mut SeededRng::new(3)).unwrap();
    ensure(params.dim() <= 1000, || {
        format!("transformer has {} parameters", params.dim())
    })?;
    let mut rng = SeededRng::new(4);
    let mut x = Tensor::zeros(&[3, d.data_dim()]);
    let mut c = Tensor::zeros(&[3, d.cond_dim()]);
    rng.fill_normal(x.data_mut(), 1.0);
    rng.fill_normal(c.data_mut(), 1.0);
    let input = ok(pack_inputs(&x, Some(&c), &[1, 5, 10], d.cond_dim()))?;
    let loss = |r: usize, out: &[f64], g: &mut [f64]| {
        let mut s = 0.0;
        for (i, (o, gi)) in out.iter().zip(g.iter_mut()).enumerate() {
            let e = o - 0.1 * (i + r) as f64;
            *gi = 2.0 * e;
            s += e * e;
        }
        s
    };
    let attn = ok(gradient_check(&d, &params, &input, &loss, 1e-5))?;
    ensure(attn.relative < 1e-4, || format!("attention {attn:?}"))?;

    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "MLP {} params rel {:.1e}; attention {} params rel {:.1e}",
        mlp.params, mlp.relative, attn.params, attn.relative
    ))
}

// ---------------------------------------------------------------- 3

fn toy_table(seed: u64, lens: &[usize]) -> FragmentTable {
    let rows: usize = lens.iter().sum();
    let mut groups = Vec::new();
    let mut start = 0;
    for &l in lens {
        groups.push(start..start + l);
        start += l;
    }
    let mut mask = Tensor::filled(&[rows, 4], 1.0);
    mask.row_mut(rows - 1)[3] = 0.0;
    FragmentTable {
        fragments: normal_matrix(rows, 4, seed),
        conditions: normal_matrix(rows, 2, seed + 1),
        mask,
        groups,
    }
}

fn sensitivity_suite() -> Outcome {
    let t = Instant::now();
    let sched = ok(NoiseSchedule::scaled_linear(20))?;

    // Every step of a long run, both privacy levels.
    let (net, mut params) = small_denoiser(3, 0, 20, 7);
    let data = normal_matrix(100, 3, 8);
    let cfg = DpSgdConfig::new(0.5, 1.0, 0.1, 0.01);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut rng = SeededRng::new(9);
    let mut units = 0;
    for step in 0..500 {
        let s = ok(dp_step_transition(
            &net,
            &mut params,
            &sched,
            &data,
            &cfg,
            &mut opt,
            &mut rng,
        ))?;
        ensure(s.clipped_norms.len() == s.batch_size, || {
            format!("step {step}: norms missing")
        })?;
        if let Some(n) = s.clipped_norms.iter().find(|&&n| n > cfg.clip) {
            return Err(format!("transition step {step}: norm {n} > {}", cfg.clip));
        }
        units += s.batch_size;
    }
    let (tnet, mut tparams) = small_denoiser(4, 2, 20, 14);
    let table = toy_table(7, &[2, 3, 1, 4, 2]);
    let tcfg = DpSgdConfig::new(0.7, 1.0, 0.6, 0.01);
    let mut opt = Optimizer::new(tcfg.optimizer);
    for step in 0..500 {
        let s = ok(dp_step_trajectory(
            &tnet,
            &mut tparams,
            &sched,
            &table,
            &tcfg,
            &mut opt,
            &mut rng,
        ))?;
        if let Some(n) = s.clipped_norms.iter().find(|&&n| n > tcfg.clip) {
            return Err(format!("trajectory step {step}: norm {n} > {}", tcfg.clip));
        }
        units += s.clipped_norms.len();
    }

    // Neighbouring three-element datasets.
    let (net, params) = small_denoiser(3, 0, 20, 10);
    let c = 0.3;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut a = normal_matrix(3, 3, 100 + seed);
        let nb_a = ok(NoisedBatch::draw(
            &sched,
            &a,
            None,
            0,
            Penalty::Squared,
            &mut SeededRng::new(seed),
        ))?;
        for v in a.row_mut(2) {
            *v = 50.0 * (seed as f64 + 1.0);
        }
        let nb_b = ok(NoisedBatch::draw(
            &sched,
            &a,
            None,
            0,
            Penalty::Squared,
            &mut SeededRng::new(seed),
        ))?;
        let f = |nb: &NoisedBatch| {
            clipped_sum(&params, 3, c, |u| grad_of_rows(&net, &params, &nb.inputs, &[u], nb)).map(|r| r.0)
        };
        let mut d = ok(f(&nb_a))?;
        ok(d.axpy(-1.0, &ok(f(&nb_b))?))?;
        ensure(d.norm() <= 2.0 * c + 1e-12, || {
            format!("transition sets differ by {}", d.norm())
        })?;
        worst = worst.max(d.norm() / c);
    }
    let (net, params) = small_denoiser(4, 2, 20, 11);
    let c = 0.2;
    for seed in 0..10 {
        let a = toy_table(seed, &[2, 3, 1]);
        let mut b = toy_table(seed, &[2, 3, 4]);
        b.fragments.data_mut()[..5 * 4].copy_from_slice(&a.fragments.data()[..5 * 4]);
        b.conditions.data_mut()[..5 * 2].copy_from_slice(&a.conditions.data()[..5 * 2]);
        for v in b.fragments.data_mut()[5 * 4..].iter_mut() {
            *v *= 20.0;
        }
        let sum = |t: &FragmentTable| -> porl::Result<ParamSet> {
            let nb = NoisedBatch::draw(
                &sched,
                &t.fragments,
                Some(&t.conditions),
                2,
                Penalty::Absolute,
                &mut SeededRng::new(seed),
            )?
            .with_mask(t.mask.clone())?;
            let (s, _, _) = clipped_sum(&params, 3, c, |u| {
                trajectory_grad(&net, &params, &nb, t.groups[u].clone())
            })?;
            Ok(s)
        };
        let mut d = ok(sum(&a))?;
        ok(d.axpy(-1.0, &ok(sum(&b))?))?;
        ensure(d.norm() <= 2.0 * c + 1e-12, || {
            format!("trajectory sets differ by {}", d.norm())
        })?;
        worst = worst.max(d.norm() / c);
    }

    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "{units} clipped contributions within C; worst neighbour gap {worst:.3}C; {secs:.1}s"
    ))
}

// ---------------------------------------------------------------- 4

fn sgd_degeneracy() -> Outcome {
    let steps = 30;
    let sched = ok(NoiseSchedule::scaled_linear(steps))?;
    let (net, init) = small_denoiser(3, 0, steps, 2);
    let data = normal_matrix(12, 3, 3);
    let lr = 0.05;
    let cfg = DpSgdConfig::new(1e6, 0.0, 1.0, lr);

    let mut dp_params = init.clone();
    let mut dp_rng = SeededRng::new(4);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut sgd_params = init.clone();
    let mut sgd_rng = SeededRng::new(4);
    for step in 0..100 {
        let stats = ok(dp_step_transition(
            &net,
            &mut dp_params,
            &sched,
            &data,
            &cfg,
            &mut opt,
            &mut dp_rng,
        ))?;
        ensure(stats.batch_size == 12, || {
            format!("step {step}: batch {}", stats.batch_size)
        })?;
        let nb = ok(NoisedBatch::draw(
            &sched,
            &data,
            None,
            0,
            Penalty::Squared,
            &mut sgd_rng,
        ))?;
        let mut mean = sgd_params.zeros_like();
        for r in 0..12 {
            let (_, g) = ok(grad_of_rows(&net, &sgd_params, &nb.inputs, &[r], &nb))?;
            ensure(g.norm() < 1e6, || "gradient reached the clip norm".into())?;
            ok(mean.axpy(1.0, &g))?;
        }
        mean.scale(1.0 / 12.0);
        ok(sgd_params.axpy(-lr, &mean))?;
        ensure(dp_params.flatten() == sgd_params.flatten(), || {
            format!("diverged at step {step}")
        })?;
    }
    ensure(dp_params.flatten() != init.flatten(), || {
        "parameters never moved".into()
    })?;
    Ok("100 steps bit-identical to plain SGD".into())
}

// ---------------------------------------------------------------- 5

fn four_modes(n: usize, rng: &mut SeededRng) -> Tensor {
    let centres = [(-2.0, -2.0), (-2.0, 2.0), (2.0, -2.0), (2.0, 2.0)];
    let mut d = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let (x, y) = centres[rng.below(4)];
        d.push(x + 0.5 * rng.normal());
        d.push(y + 0.5 * rng.normal());
    }
    Tensor::matrix(n, 2, d).unwrap()
}

fn mixture_fidelity() -> Outcome {
    let t = Instant::now();
    let n = 20_000;
    let steps = 100;
    let scale = 1.0 / 2.06;
    let mut rng = SeededRng::new(0);
    let data = four_modes(n, &mut rng);
    let mut x = data.clone();
    for v in x.data_mut() {
        *v *= scale;
    }
    let reference = data.select_rows(&(0..5000).collect::<Vec<_>>());
    let sched = ok(NoiseSchedule::scaled_linear(steps))?;
    let mut init = ParamSet::new();
    let mut spec = MlpDenoiserSpec::new(2, steps);
    spec.width = 64;
    spec.depth = 3;
    let net = ok(MlpDenoiser::new(spec, &mut init, &mut rng))?;
    let score = |params: &ParamSet, rng: &mut SeededRng| -> Result<f64, String> {
        let mut y = ok(sample(&net, params, &sched, 5000, rng, None))?;
        for v in y.data_mut() {
            *v /= scale;
        }
        ok(marginal_fidelity(&reference, &y))
    };

    let mut plain = init.clone();
    let mut opt = Optimizer::new(OptimizerKind::adam(2e-3));
    for _ in 0..6000 {
        let idx: Vec<usize> = (0..128).map(|_| rng.below(n)).collect();
        let (_, g) = ok(diffusion_loss(&net, &plain, &sched, &x.select_rows(&idx), &mut rng))?;
        ok(opt.step(&mut plain, &g))?;
    }
    let plain_fid = score(&plain, &mut rng)?;
    let plain_secs = t.elapsed().as_secs_f64();

    let q = 256.0 / n as f64;
    let dp_steps = 3000;
    let ledger = ok(PrivacyLedger::plan(&Default::default(), q, dp_steps, 10.0, 1e-5))?;
    let cfg = DpSgdConfig::new(1.0, ledger.sigma, q, 0.5);
    let mut private = init.clone();
    let mut opt = Optimizer::new(cfg.optimizer);
    for _ in 0..dp_steps {
        ok(dp_step_transition(
            &net,
            &mut private,
            &sched,
            &x,
            &cfg,
            &mut opt,
            &mut rng,
        ))?;
    }
    let dp_fid = score(&private, &mut rng)?;
    let secs = t.elapsed().as_secs_f64();

    let detail = format!(
        "non-private {plain_fid:.3} in {plain_secs:.0}s; eps=10 (sigma {:.2}, spent {:.2}) {dp_fid:.3}; {secs:.0}s",
        ledger.sigma, ledger.epsilon
    );
    ensure(plain_fid >= 0.9 && plain_secs < 300.0, || detail.clone())?;
    ensure(dp_fid >= 0.75 && ledger.epsilon <= 10.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 6

fn rare_mode_data(n: usize, seed: u64) -> TransitionDataset {
    let mut rng = SeededRng::new(seed);
    let mut d = Vec::with_capacity(4 * n);
    for _ in 0..n {
        let c = if rng.bernoulli(0.05) { 2.0 } else { -1.0 };
        let s = c + 0.2 * rng.normal();
        let a = 0.1 * rng.normal();
        d.extend_from_slice(&[s, a, -(s + a).abs(), s + a]);
    }
    TransitionDataset::new(Schema::new(1, 1, false), Tensor::matrix(n, 4, d).unwrap()).unwrap()
}

fn transition_model(public: &TransitionDataset, steps: usize, rng: &mut SeededRng) -> porl::Result<TransitionModel> {
    let schema = public.schema().clone();
    let stats = NormStats::fit(&one_hot_encode(public)?, &schema.fixed_columns())?;
    let mut spec = MlpDenoiserSpec::new(schema.encoded_width(), steps);
    spec.width = 64;
    spec.depth = 3;
    TransitionModel::new(schema, stats, spec, NoiseSchedule::scaled_linear(steps)?, rng)
}

fn curiosity_off_matches_plain_training() -> Result<(), String> {
    let public = rare_mode_data(300, 1);
    let cfg = PipelineConfig {
        pretrain_epochs: 2,
        batch: 64,
        pretrain_lr: 2e-3,
        curiosity: CuriosityConfig {
            rate: 0.0,
            ..CuriosityConfig::default()
        },
        ..PipelineConfig::default()
    };
    let model = ok(transition_model(&public, 20, &mut SeededRng::new(2)))?;

    let mut curious = model.clone();
    let mut rnd = ok(RndPair::new(
        model.schema.encoded_width(),
        &cfg.curiosity,
        &mut SeededRng::new(4),
    ))?;
    ok(pretrain(&mut curious, &public, &mut rnd, &cfg, &mut SeededRng::new(3)))?;

    let mut plain = model.clone();
    let x = ok(plain.encode(&public))?;
    let mut rng = SeededRng::new(3);
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.pretrain_lr));
    for _ in 0..cfg.pretrain_epochs {
        let mut order: Vec<usize> = (0..x.rows()).collect();
        rng.shuffle(&mut order);
        for idx in order.chunks(cfg.batch) {
            let (_, g) = ok(diffusion_loss(
                &plain.denoiser,
                &plain.params,
                &plain.schedule,
                &x.select_rows(idx),
                &mut rng,
            ))?;
            ok(opt.step(&mut plain.params, &g))?;
        }
    }
    ensure(curious.params == plain.params, || {
        "p=0 run differs from plain training".into()
    })
}

fn replacement_contract() -> Result<(), String> {
    let mut rng = SeededRng::new(11);
    for trial in 0..200 {
        let b = 1 + rng.below(40);
        let p = [0.0, 0.1, 0.3, 0.5, 1.0][trial % 5];
        let real = normal_matrix(b, 3, 100 + trial as u64);
        let mut synth = normal_matrix(b, 3, 200 + trial as u64);
        for v in synth.data_mut() {
            *v += 10.0;
        }
        let scores: Vec<f64> = (0..b).map(|_| rng.below(5) as f64).collect();
        let r = ok(curious_replace(&real, &synth, &scores, p, &mut rng))?;
        let m = (p * b as f64).floor() as usize;
        // stable descending order of scores
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap());
        ensure(r.inserted == order[..m], || {
            format!("trial {trial}: inserted {:?}", r.inserted)
        })?;
        let mut positions = r.positions.clone();
        positions.sort_unstable();
        positions.dedup();
        ensure(positions.len() == m, || {
            format!("trial {trial}: {} positions", positions.len())
        })?;
        let changed: Vec<usize> = (0..b).filter(|&i| r.batch.row(i) != real.row(i)).collect();
        ensure(changed == positions, || {
            format!("trial {trial}: changed rows {changed:?}")
        })?;
        for (&pos, &src) in r.positions.iter().zip(&r.inserted) {
            ensure(r.batch.row(pos) == synth.row(src), || {
                format!("trial {trial}: row {pos}")
            })?;
        }
    }
    Ok(())
}

fn rare_mode_share(public: &TransitionDataset, rate: f64, seed: u64) -> Result<f64, String> {
    let mut rng = SeededRng::new(100 + seed);
    let mut model = ok(transition_model(public, 50, &mut rng))?;
    let mut cfg = PipelineConfig {
        pretrain_epochs: 10,
        batch: 64,
        pretrain_lr: 2e-3,
        ..PipelineConfig::default()
    };
    cfg.curiosity.rate = rate;
    let mut rnd = ok(RndPair::new(
        model.schema.encoded_width(),
        &cfg.curiosity,
        &mut SeededRng::new(7 + seed),
    ))?;
    ok(pretrain(&mut model, public, &mut rnd, &cfg, &mut rng))?;
    let syn = ok(synthesize_transitions(&model, 5000, &mut SeededRng::new(55)))?;
    Ok(syn.rows().row_iter().filter(|r| r[0] > 0.5).count() as f64 / 5000.0)
}

fn curiosity_properties() -> Outcome {
    curiosity_off_matches_plain_training()?;
    replacement_contract()?;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let public = rare_mode_data(4000, seed);
        let off = rare_mode_share(&public, 0.0, seed)?;
        let on = rare_mode_share(&public, 0.3, seed)?;
        if on >= off {
            wins += 1;
        }
        pairs.push(format!("{off:.3}->{on:.3}"));
    }
    let p = sign_test_p(wins, 5);
    let detail = format!(
        "rare-mode share p=0 -> p=0.3: {}; {wins}/5, sign test p={p:.3}",
        pairs.join(" ")
    );
    ensure(p < 0.05, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn walk(len: usize, rng: &mut SeededRng) -> Trajectory {
    let schema = Schema::new(1, 1, true);
    let mut s = rng.uniform();
    let mut data = Vec::with_capacity(len * 5);
    for p in 0..len {
        let a = 0.1 * rng.normal();
        let last = p + 1 == len;
        let next = if last { 0.0 } else { s + a };
        data.extend_from_slice(&[s, a, -(s + a).abs(), next, if last { 1.0 } else { 0.0 }]);
        s += a;
    }
    Trajectory::new(schema, Tensor::matrix(len, 5, data).unwrap()).unwrap()
}

fn trajectory_structure() -> Outcome {
    let t = Instant::now();
    for (h, want) in [(1, 11), (4, 26), (16, 86)] {
        ensure(token_count(h) == want, || format!("H={h}: {} tokens", token_count(h)))?;
        let mut spec = TransformerSpec::new(&Schema::new(1, 1, true), h, 10);
        spec.embed = 8;
        spec.heads = 2;
        spec.layers = 1;
        let mut params = ParamSet::new();
        let d = ok(TransformerDenoiser::new(spec, &mut params, &mut SeededRng::new(0)))?;
        let x = Tensor::filled(&[1, d.data_dim()], 0.3);
        let c = Tensor::filled(&[1, d.cond_dim()], -0.2);
        let seqs = ok(d.embed_inputs(&params, &ok(pack_inputs(&x, Some(&c), &[4], d.cond_dim()))?))?;
        ensure(seqs[0].len() == want, || {
            format!("H={h}: embedded {} tokens", seqs[0].len())
        })?;
    }

    let mut rng = SeededRng::new(1);
    for j in 0..100 {
        let len = rng.range_inclusive(1, 40);
        let traj = walk(len, &mut rng);
        let h = [1, 4, 16][j % 3];
        let frags = ok(fragment(&traj, h, j))?;
        ensure(frags.len() == len.div_ceil(h), || {
            format!("trajectory {j}: {} fragments", frags.len())
        })?;
        ensure(frags[0].link.iter().all(|&v| v == 0.0), || {
            format!("trajectory {j}: first link not zero")
        })?;
        for pair in frags.windows(2) {
            ensure(pair[1].link.as_slice() == pair[0].last_real(), || {
                format!("trajectory {j}: broken link")
            })?;
        }
        ensure(frags.iter().all(|f| f.parent == j), || {
            format!("trajectory {j}: wrong parent")
        })?;
        ensure(ok(stitch(traj.schema(), &frags))? == traj, || {
            format!("trajectory {j}: stitch differs")
        })?;
    }

    let schema = Schema::new(1, 1, true);
    let data: Vec<Trajectory> = (0..20)
        .map(|_| {
            let len = rng.range_inclusive(3, 12);
            walk(len, &mut rng)
        })
        .collect();
    let flat = ok(porl::trajectory::flatten(&schema, &data))?;
    let stats = ok(NormStats::fit(flat.rows(), &schema.fixed_columns()))?;
    let mut spec = TransformerSpec::new(&schema, 4, 20);
    spec.embed = 16;
    spec.heads = 2;
    spec.layers = 2;
    spec.ff_mult = 2;
    let model = ok(TrajectoryModel::new(
        schema,
        stats,
        spec,
        ok(NoiseSchedule::scaled_linear(20))?,
        &mut SeededRng::new(6),
    ))?;
    let out = ok(synthesize_trajectories(
        &model,
        100,
        12,
        Some(5),
        &mut SeededRng::new(7),
    ))?;
    ensure(out.len() == 100, || format!("{} trajectories", out.len()))?;
    let tc = model.schema.terminal_col().unwrap();
    let mut terminated = 0;
    for (k, s) in out.iter().enumerate() {
        let traj = &s.trajectory;
        ensure(!traj.is_empty() && traj.len() <= 12, || {
            format!("synthetic {k}: length {}", traj.len())
        })?;
        ensure(s.links[0].iter().all(|&v| v == 0.0), || {
            format!("synthetic {k}: first link not zero")
        })?;
        ensure(s.links.len() == traj.len().div_ceil(4), || {
            format!("synthetic {k}: {} links", s.links.len())
        })?;
        for (i, link) in s.links.iter().enumerate().skip(1) {
            ensure(link.as_slice() == traj.transition(i * 4 - 1), || {
                format!("synthetic {k}: link {i}")
            })?;
        }
        for p in 0..traj.len() {
            let d = traj.transition(p)[tc];
            ensure(d == 0.0 || (d == 1.0 && p + 1 == traj.len()), || {
                format!("synthetic {k}: flag {d} at {p}")
            })?;
        }
        if traj.len() < 12 {
            ensure(traj.is_terminated(), || {
                format!("synthetic {k}: stopped early without a terminal")
            })?;
        }
        terminated += usize::from(traj.is_terminated());
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "token counts 11/26/86; 100 fragmentations; 100 synthetic ({terminated} terminated); {secs:.1}s"
    ))
}

// ---------------------------------------------------------------- 8

fn random_table(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    let mut data = vec![0.0; rows * cols];
    for (i, v) in data.iter_mut().enumerate() {
        *v = if i % 4 == 0 { rng.below(3) as f64 } else { rng.normal() };
    }
    Tensor::matrix(rows, cols, data).unwrap()
}

fn brute_ks(a: &[f64], b: &[f64]) -> f64 {
    let mut d: f64 = 0.0;
    for &v in a.iter().chain(b) {
        let fa = a.iter().filter(|&&x| x <= v).count() as f64 / a.len() as f64;
        let fb = b.iter().filter(|&&x| x <= v).count() as f64 / b.len() as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

fn brute_pearson(x: &Tensor, i: usize, j: usize) -> f64 {
    let n = x.rows() as f64;
    let col = |c: usize| -> Vec<f64> { x.row_iter().map(|r| r[c]).collect() };
    let (a, b) = (col(i), col(j));
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let sab: f64 = a.iter().zip(&b).map(|(u, v)| (u - ma) * (v - mb)).sum();
    let saa: f64 = a.iter().map(|u| (u - ma) * (u - ma)).sum();
    let sbb: f64 = b.iter().map(|v| (v - mb) * (v - mb)).sum();
    sab / (saa * sbb).sqrt()
}

fn brute_tpr(members: &[f64], non: &[f64], level: f64) -> f64 {
    let mut points = vec![(0.0, 0.0)];
    for &t in members.iter().chain(non) {
        let fpr = non.iter().filter(|&&x| x <= t).count() as f64 / non.len() as f64;
        let tpr = members.iter().filter(|&&x| x <= t).count() as f64 / members.len() as f64;
        points.push((fpr, tpr));
    }
    let lo = points
        .iter()
        .filter(|p| p.0 <= level)
        .fold((0.0, 0.0), |a, &p| if (p.0, p.1) > a { p } else { a });
    let hi =
        points.iter().filter(|p| p.0 > level).fold(
            (f64::INFINITY, f64::INFINITY),
            |a, &p| if (p.0, p.1) < a { p } else { a },
        );
    if hi.0.is_infinite() {
        return lo.1;
    }
    lo.1 + (level - lo.0) / (hi.0 - lo.0) * (hi.1 - lo.1)
}

fn metric_oracles() -> Outcome {
    let mut checks = 0;
    for seed in 0..10 {
        let a = random_table(50, 3, seed);
        let b = random_table(50, 3, seed + 100);
        let got = ok(ks_per_column(&a, &b))?;
        for (c, &g) in got.iter().enumerate() {
            let ca: Vec<f64> = a.row_iter().map(|r| r[c]).collect();
            let cb: Vec<f64> = b.row_iter().map(|r| r[c]).collect();
            let want = brute_ks(&ca, &cb);
            ensure(g == want, || format!("KS seed {seed} column {c}: {g} vs {want}"))?;
            checks += 1;
        }
        let m = correlation_matrix(&a, CorrelationMode::Pearson);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { brute_pearson(&a, i, j) };
                ensure(m.get(i, j) == want, || {
                    format!("Pearson seed {seed} ({i},{j}): {} vs {want}", m.get(i, j))
                })?;
                checks += 1;
            }
        }
    }
    let mut rng = SeededRng::new(3);
    for _ in 0..20 {
        let members: Vec<f64> = (0..50).map(|_| (rng.normal() * 4.0).round() / 4.0).collect();
        let non: Vec<f64> = (0..50).map(|_| (rng.normal() * 4.0).round() / 4.0 + 0.5).collect();
        let levels = [0.1, 0.01, 0.25, 0.5];
        let r = ok(mia_tpr_at_fpr(&members, &non, &levels))?;
        for (l, t) in levels.iter().zip(&r.tpr) {
            let want = brute_tpr(&members, &non, *l);
            ensure(*t == want, || format!("TPR at {l}: {t} vs {want}"))?;
            checks += 1;
        }
    }

    let x = random_table(50, 4, 9);
    ensure(ok(marginal_fidelity(&x, &x))? == 1.0, || {
        "marginal self-fidelity".into()
    })?;
    for mode in [CorrelationMode::Pearson, CorrelationMode::Spearman] {
        ensure(ok(correlation_fidelity(&x, &x, mode))? == 1.0, || {
            format!("{mode:?} self-fidelity")
        })?;
    }
    let cos = ok(mean_best_cosine(&x, &x))?;
    ensure((cos - 1.0).abs() < 1e-12, || format!("self cosine {cos}"))?;
    let mut trng = SeededRng::new(1);
    let trajs: Vec<Vec<f64>> = (0..20)
        .map(|_| {
            let len = 4 + trng.below(5);
            let (x0, y0) = (trng.uniform(), trng.uniform());
            let (dx, dy) = (trng.normal() * 0.2, trng.normal() * 0.2);
            (0..len)
                .flat_map(|k| [x0 + dx * k as f64, y0 + dy * k as f64])
                .collect()
        })
        .collect();
    let enc = EncoderConfig {
        max_len: 8,
        epochs: 50,
        ..EncoderConfig::default()
    };
    let ts = ok(trajscore(&trajs, &trajs, 2, &enc, &mut SeededRng::new(2)))?;
    ensure((ts - 1.0).abs() < 1e-12, || format!("self trajscore {ts}"))?;
    Ok(format!(
        "{checks} oracle comparisons exact; self-fidelity identities hold"
    ))
}

// ---------------------------------------------------------------- 9

fn utility_seed(seed: u64) -> Result<[f64; 3], String> {
    let base = RunConfig {
        seed,
        ..RunConfig::default()
    };
    let public = ok(run::collect_data(&RunConfig {
        policy: CollectPolicy::Random,
        seed: 1000 + seed,
        ..base.clone()
    }))?;
    let sensitive = ok(run::collect_data(&RunConfig {
        policy: CollectPolicy::Expert,
        seed: 2000 + seed,
        ..base.clone()
    }))?;
    let (pretrained, _) = ok(run::pretrain_model(&base, &public))?;
    let n = run::default_samples(&base, &sensitive);
    let mut scores = [0.0; 3];
    for (k, eps) in [10.0, 1.0].into_iter().enumerate() {
        let cfg = RunConfig {
            epsilon: eps,
            ..base.clone()
        };
        let mut model = pretrained.clone();
        ok(run::finetune_model(&cfg, &mut model, &sensitive))?;
        let synthetic = ok(run::synthesize(&cfg, &model, n))?;
        let mut report = Report::new();
        ok(run::evaluate(&cfg, &sensitive, &synthetic, &mut report))?;
        let read = |key: &str| -> Result<f64, String> {
            report
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| format!("report lacks {key}"))
        };
        scores[0] = read("returns.bc_real.normalized")?;
        scores[k + 1] = read("returns.bc_synthetic.normalized")?;
    }
    Ok(scores)
}

fn utility_ordering() -> Outcome {
    let t = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    let (mut real_sum, mut eps10_sum) = (0.0, 0.0);
    for seed in 1..=5 {
        let [real, eps10, eps1] = utility_seed(seed)?;
        if real >= eps10 && eps10 >= eps1 {
            wins += 1;
        }
        real_sum += real;
        eps10_sum += eps10;
        rows.push(format!("{real:.1}/{eps10:.1}/{eps1:.1}"));
    }
    let p = sign_test_p(wins, 5);
    let secs = t.elapsed().as_secs_f64();
    let detail = format!(
        "BC real/eps10/eps1 {}; {wins}/5 ordered, sign test p={p:.3}; eps10 at {:.0}% of real; {secs:.0}s",
        rows.join(" "),
        100.0 * eps10_sum / real_sum
    );
    ensure(p < 0.05 && eps10_sum >= 0.5 * real_sum && secs < 1800.0, || {
        detail.clone()
    })?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn mia_seed(seed: u64) -> Result<(f64, f64), String> {
    let (n, dim, steps) = (64, 8, 100);
    let mut rng = SeededRng::new(seed);
    let all = {
        let mut d = vec![0.0; 2 * n * dim];
        rng.fill_normal(&mut d, 1.0);
        Tensor::matrix(2 * n, dim, d).unwrap()
    };
    let members = all.select_rows(&(0..n).collect::<Vec<_>>());
    let non = all.select_rows(&(n..2 * n).collect::<Vec<_>>());
    let sched = ok(NoiseSchedule::scaled_linear(steps))?;
    let mut init = ParamSet::new();
    let mut spec = MlpDenoiserSpec::new(dim, steps);
    spec.width = 256;
    spec.depth = 3;
    let net = ok(MlpDenoiser::new(spec, &mut init, &mut rng))?;

    let mut overfit = init.clone();
    let mut opt = Optimizer::new(OptimizerKind::adam(2e-3));
    for _ in 0..8000 {
        let (_, g) = ok(diffusion_loss(&net, &overfit, &sched, &members, &mut rng))?;
        ok(opt.step(&mut overfit, &g))?;
    }

    let q = 0.25;
    let dp_steps = 300;
    let ledger = ok(PrivacyLedger::plan(&Default::default(), q, dp_steps, 10.0, 1e-5))?;
    let cfg = DpSgdConfig::new(1.0, ledger.sigma, q, 0.1);
    let mut private = init.clone();
    let mut opt = Optimizer::new(cfg.optimizer);
    for _ in 0..dp_steps {
        ok(dp_step_transition(
            &net,
            &mut private,
            &sched,
            &members,
            &cfg,
            &mut opt,
            &mut rng,
        ))?;
    }

    let tpr = |p: &ParamSet| -> Result<f64, String> {
        let lm = ok(example_losses(&net, p, &sched, &members, 50, &mut SeededRng::new(9)))?;
        let ln = ok(example_losses(&net, p, &sched, &non, 50, &mut SeededRng::new(10)))?;
        Ok(ok(mia_tpr_at_fpr(&lm, &ln, &[0.1]))?.tpr[0])
    };
    Ok((tpr(&overfit)?, tpr(&private)?))
}

fn membership_direction() -> Outcome {
    let t = Instant::now();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let (over, private) = mia_seed(seed)?;
        if over > private {
            wins += 1;
        }
        pairs.push(format!("{over:.2}>{private:.2}"));
    }
    let p = sign_test_p(wins, 5);
    let detail = format!(
        "TPR@10%FPR overfit vs eps=10: {}; {wins}/5, sign test p={p:.3}; {:.0}s",
        pairs.join(" "),
        t.elapsed().as_secs_f64()
    );
    ensure(p < 0.05, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 11

fn porl(args: &[&str], dir: &Path) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_porl"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(o.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr))
    })
}

fn reproducible_pipeline() -> Outcome {
    const CONFIG: &str = "\
pretrain_epochs = 2
finetune_epochs = 3
diffusion_steps = 20
width = 32
depth = 2
bc_epochs = 10
eval_episodes = 30
epsilon = 5
";
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let d = dir.path();
        std::fs::write(d.join("run.cfg"), CONFIG).map_err(|e| e.to_string())?;
        porl(
            &[
                "collect",
                "--policy",
                "random",
                "--episodes",
                "80",
                "--seed",
                "1",
                "--out",
                "pub.porl",
            ],
            d,
        )?;
        porl(
            &[
                "collect",
                "--policy",
                "expert",
                "--episodes",
                "80",
                "--seed",
                "2",
                "--out",
                "sens.porl",
            ],
            d,
        )?;
        porl(
            &[
                "pipeline",
                "--config",
                "run.cfg",
                "--public",
                "pub.porl",
                "--sensitive",
                "sens.porl",
                "--out",
                "run",
                "--seed",
                "17",
            ],
            d,
        )?;
        let read = |name: &str| std::fs::read(d.join("run").join(name)).map_err(|e| e.to_string());
        outputs.push((read(run::SYNTHETIC_FILE)?, read(run::REPORT_FILE)?));
    }
    ensure(outputs[0].0 == outputs[1].0, || "synthetic datasets differ".into())?;
    ensure(outputs[0].1 == outputs[1].1, || "reports differ".into())?;
    let rows = ok(DatasetFile::decode(&outputs[0].0))?
        .transitions()
        .map(|t| t.len())
        .unwrap_or(0);
    Ok(format!(
        "synthetic ({} bytes, {rows} rows) and report ({} bytes) byte-identical",
        outputs[0].0.len(),
        outputs[0].1.len()
    ))
}

// ----------------------------------------------------------------

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "accountant reproduces the noise table", accountant_table),
    (2, "gradients match finite differences", gradient_suite),
    (3, "per-unit sensitivity is bounded", sensitivity_suite),
    (4, "noiseless DP-SGD is plain SGD", sgd_degeneracy),
    (5, "mixture fidelity", mixture_fidelity),
    (6, "curiosity properties", curiosity_properties),
    (7, "trajectory structure", trajectory_structure),
    (8, "metric oracles", metric_oracles),
    (9, "utility ordering", utility_ordering),
    (10, "membership inference direction", membership_direction),
    (11, "reproducible pipeline", reproducible_pipeline),
];

fn selected() -> Option<Vec<u32>> {
    let v = std::env::var("PORL_CRITERIA").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let only = selected();
    let mut failed = 0;
    for (id, name, f) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {id}: PASS ({name}: {detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id}: FAIL ({name}: {detail})");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
