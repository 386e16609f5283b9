use std::path::PathBuf;

use porl::accountant::{Accountant, PrivacyLedger};
use porl::diffusion::{MeanForm, MlpDenoiserSpec, NoiseSchedule};
use porl::io::{
    compact_orders, Checkpoint, DatasetFile, Mode, Report, RunConfig, SavedModel, Task, CHECKPOINT_MAGIC, DATASET_MAGIC,
};
use porl::numerics::{SeededRng, Tensor};
use porl::trajectory::{synthesize_trajectories, Trajectory, TrajectoryModel, TransformerSpec};
use porl::transition::{
    one_hot_encode, synthesize_transitions, DiscreteColumn, NormStats, Schema, TransitionDataset, TransitionModel,
};
use porl::Error;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// Compares `bytes` with a checked-in file; `PORL_BLESS=1` rewrites it.
fn check_golden(name: &str, bytes: &[u8]) -> Vec<u8> {
    let path = golden(name);
    if std::env::var_os("PORL_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, bytes).unwrap();
    }
    let stored = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(stored, bytes, "{name} differs from the checked-in file");
    stored
}

fn categorical_schema() -> Schema {
    let mut s = Schema::new(2, 1, true);
    s.discrete.push(DiscreteColumn {
        column: 2,
        cardinality: 3,
    });
    s
}

// Values exactly representable in f32, so round trips are exact.
fn small_dataset() -> TransitionDataset {
    let rows = vec![
        0.5, -1.25, 2.0, 0.75, 1.0, 0.0, 0.0, //
        -3.0, 4.5, 0.0, -0.5, 0.25, 0.125, 1.0, //
        8.0, 0.0625, 1.0, 2.5, -1.0, 1.5, 0.0,
    ];
    TransitionDataset::new(categorical_schema(), Tensor::matrix(3, 7, rows).unwrap()).unwrap()
}

fn small_trajectories() -> (Schema, Vec<Trajectory>) {
    let schema = Schema::new(1, 1, true);
    let a = Trajectory::new(
        schema.clone(),
        Tensor::matrix(2, 5, vec![0.0, 1.0, -0.5, 1.0, 0.0, 1.0, -1.0, 1.0, 0.0, 1.0]).unwrap(),
    )
    .unwrap();
    let b = Trajectory::new(
        schema.clone(),
        Tensor::matrix(1, 5, vec![3.0, 0.5, 0.25, 0.0, 1.0]).unwrap(),
    )
    .unwrap();
    (schema, vec![a, b])
}

fn random_dataset(n: usize, seed: u64) -> TransitionDataset {
    let mut rng = SeededRng::new(seed);
    let schema = Schema::new(3, 2, true);
    let w = schema.width();
    let mut data = Vec::with_capacity(n * w);
    for _ in 0..n {
        for c in 0..w {
            let v = if c == w - 1 {
                f64::from(rng.bernoulli(0.1))
            } else {
                rng.normal() as f32 as f64
            };
            data.push(v);
        }
    }
    TransitionDataset::new(schema, Tensor::matrix(n, w, data).unwrap()).unwrap()
}

fn tiny_transition_model(seed: u64) -> TransitionModel {
    let data = small_dataset();
    let schema = data.schema().clone();
    let stats = NormStats::fit(&one_hot_encode(&data).unwrap(), &schema.fixed_columns()).unwrap();
    let mut spec = MlpDenoiserSpec::new(schema.encoded_width(), 5);
    spec.width = 4;
    spec.depth = 1;
    spec.time_features = 4;
    let sched = NoiseSchedule::scaled_linear(5)
        .unwrap()
        .with_mean_form(MeanForm::Literal);
    TransitionModel::new(schema, stats, spec, sched, &mut SeededRng::new(seed)).unwrap()
}

fn tiny_trajectory_model(seed: u64) -> TrajectoryModel {
    let (schema, trajs) = small_trajectories();
    let flat = porl::trajectory::flatten(&schema, &trajs).unwrap();
    let stats = NormStats::fit(&one_hot_encode(&flat).unwrap(), &schema.fixed_columns()).unwrap();
    let mut spec = TransformerSpec::new(&schema, 2, 4);
    spec.embed = 8;
    spec.heads = 2;
    spec.layers = 1;
    spec.ff_mult = 1;
    TrajectoryModel::new(
        schema,
        stats,
        spec,
        NoiseSchedule::scaled_linear(4).unwrap(),
        &mut SeededRng::new(seed),
    )
    .unwrap()
}

#[test]
fn transition_dataset_matches_golden_file() {
    let file = DatasetFile::Transitions(small_dataset());
    let stored = check_golden("transitions_v1.porl", &file.encode());
    assert_eq!(DatasetFile::decode(&stored).unwrap(), file);
}

#[test]
fn trajectory_dataset_matches_golden_file() {
    let (schema, trajectories) = small_trajectories();
    let file = DatasetFile::Trajectories { schema, trajectories };
    let stored = check_golden("trajectories_v1.porl", &file.encode());
    assert_eq!(DatasetFile::decode(&stored).unwrap(), file);
}

#[test]
fn checkpoints_match_golden_files() {
    let ck = Checkpoint::from_model(&SavedModel::Transition(tiny_transition_model(3)));
    let stored = check_golden("transition_v1.ckpt", &ck.encode().unwrap());
    assert_eq!(Checkpoint::decode(&stored).unwrap(), ck);

    let ck = Checkpoint::from_model(&SavedModel::Trajectory(tiny_trajectory_model(4)));
    let stored = check_golden("trajectory_v1.ckpt", &ck.encode().unwrap());
    assert_eq!(Checkpoint::decode(&stored).unwrap(), ck);
}

#[test]
fn empty_datasets_round_trip() {
    let file = DatasetFile::Transitions(TransitionDataset::empty(categorical_schema()).unwrap());
    assert_eq!(DatasetFile::decode(&file.encode()).unwrap(), file);
    let file = DatasetFile::Trajectories {
        schema: Schema::new(2, 2, true),
        trajectories: vec![],
    };
    assert_eq!(DatasetFile::decode(&file.encode()).unwrap(), file);
}

#[test]
fn ten_thousand_rows_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.porl");
    let data = random_dataset(10_000, 11);
    let file = DatasetFile::Transitions(data.clone());
    file.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = DatasetFile::load(&path).unwrap();
    let hash = |d: &TransitionDataset| {
        let mut h = Sha256::new();
        for v in d.rows().data() {
            h.update(v.to_le_bytes());
        }
        h.finalize()
    };
    assert_eq!(hash(&back.transitions().unwrap()), hash(&data));
    assert_eq!(Sha256::digest(back.encode()), Sha256::digest(&bytes));
}

#[test]
fn corrupted_magic_is_rejected() {
    let mut bytes = DatasetFile::Transitions(small_dataset()).encode();
    bytes[0] = b'X';
    assert!(matches!(DatasetFile::decode(&bytes), Err(Error::Format(_))));

    let mut bytes = Checkpoint::from_model(&SavedModel::Transition(tiny_transition_model(1)))
        .encode()
        .unwrap();
    bytes[3] ^= 0xff;
    assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format(_))));
    assert_eq!(&DATASET_MAGIC[..], b"PORL1");
    assert_eq!(&CHECKPOINT_MAGIC[..], b"PORLCKPT");
}

#[test]
fn wrong_version_is_rejected() {
    let mut bytes = DatasetFile::Transitions(small_dataset()).encode();
    bytes[5] = 9;
    let err = DatasetFile::decode(&bytes).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
}

#[test]
fn every_truncation_is_rejected() {
    let (schema, trajectories) = small_trajectories();
    for file in [
        DatasetFile::Transitions(small_dataset()),
        DatasetFile::Trajectories { schema, trajectories },
    ] {
        let bytes = file.encode();
        for cut in 0..bytes.len() {
            assert!(
                DatasetFile::decode(&bytes[..cut]).is_err(),
                "accepted {cut} of {} bytes",
                bytes.len()
            );
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(DatasetFile::decode(&longer).is_err());
    }
    let bytes = Checkpoint::from_model(&SavedModel::Transition(tiny_transition_model(2)))
        .encode()
        .unwrap();
    for cut in 0..bytes.len() {
        assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "accepted {cut} bytes");
    }
}

#[test]
fn transition_checkpoint_reloads_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = tiny_transition_model(5);
    SavedModel::Transition(model.clone()).save(&path).unwrap();
    let SavedModel::Transition(back) = SavedModel::load(&path).unwrap() else {
        panic!("wrong kind");
    };
    assert_eq!(back.params, model.params);
    assert_eq!(back.stats, model.stats);
    assert_eq!(back.schedule, model.schedule);
    assert_eq!(back.denoiser.freqs(), model.denoiser.freqs());
    // Same parameters and same stream give the same samples.
    let a = synthesize_transitions(&model, 20, &mut SeededRng::new(9)).unwrap();
    let b = synthesize_transitions(&back, 20, &mut SeededRng::new(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn trajectory_checkpoint_reloads_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("j.ckpt");
    let model = tiny_trajectory_model(6);
    SavedModel::Trajectory(model.clone()).save(&path).unwrap();
    let SavedModel::Trajectory(back) = SavedModel::load(&path).unwrap() else {
        panic!("wrong kind");
    };
    assert_eq!(back.params, model.params);
    assert_eq!(back.stats, model.stats);
    assert_eq!(back.schedule, model.schedule);
    let a = synthesize_trajectories(&model, 3, 6, None, &mut SeededRng::new(1)).unwrap();
    let b = synthesize_trajectories(&back, 3, 6, None, &mut SeededRng::new(1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_with_a_misshapen_tensor_is_rejected() {
    let mut ck = Checkpoint::from_model(&SavedModel::Transition(tiny_transition_model(7)));
    let (_, t) = ck.tensors.iter_mut().find(|(n, _)| !n.starts_with('@')).unwrap();
    *t = Tensor::zeros(&[1, 1]);
    let bytes = ck.encode().unwrap();
    let err = Checkpoint::decode(&bytes).unwrap().into_model().unwrap_err();
    assert!(err.to_string().contains("shape"), "{err}");
}

#[test]
fn saving_replaces_the_file_atomically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.porl");
    std::fs::write(&path, b"old").unwrap();
    DatasetFile::Transitions(small_dataset()).save(&path).unwrap();
    assert!(DatasetFile::load(&path).is_ok());
    let names: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(names.len(), 1, "temporary file left behind: {names:?}");
}

#[test]
fn config_text_round_trips_and_rejects_unknown_keys() {
    let cfg = RunConfig::from_text(
        "# comment\nmode = trajectory\nepsilon = inf  # no noise\npublic = a.porl\nseed=42\n\nfinetune_rule = adam\n",
    )
    .unwrap();
    assert_eq!(cfg.mode, Mode::Trajectory);
    assert!(cfg.epsilon.is_infinite());
    assert_eq!(cfg.seed, 42);
    assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    assert!(matches!(RunConfig::from_text("colour = red"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_text("epsilon"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_text("batch = -3"), Err(Error::Config(_))));
}

#[test]
fn config_requires_the_paths_of_each_task() {
    let mut cfg = RunConfig::default();
    assert!(cfg.validate(Task::Calibrate).is_ok());
    assert!(cfg.validate(Task::Pipeline).is_err());
    cfg.set("public", "p").unwrap();
    cfg.set("sensitive", "s").unwrap();
    cfg.set("out", "o").unwrap();
    assert!(cfg.validate(Task::Pipeline).is_ok());
    assert!(cfg.validate(Task::Finetune).is_err());
    cfg.set("delta", "0").unwrap();
    assert!(cfg.validate(Task::Pipeline).is_err());
    cfg.set("delta", "1e-5").unwrap();
    cfg.set("epsilon", "0").unwrap();
    assert!(cfg.validate(Task::Calibrate).is_err());
}

#[test]
fn report_lists_the_full_ledger() {
    let ledger = PrivacyLedger::plan(&Accountant::default(), 0.01, 1000, 2.0, 1e-5).unwrap();
    let mut r = Report::new();
    r.push("seed", 7);
    r.push_ledger("privacy", &ledger);
    let parsed = Report::parse(&r.to_text()).unwrap();
    assert_eq!(parsed, r);
    for key in ["q", "sigma", "steps", "orders", "epsilon", "delta", "order"] {
        assert!(parsed.get(&format!("privacy.{key}")).is_some(), "missing {key}");
    }
    assert_eq!(parsed.get("privacy.orders"), Some("2-256"));
    assert_eq!(
        parsed.get("privacy.sigma").unwrap().parse::<f64>().unwrap(),
        ledger.sigma
    );
    assert_eq!(compact_orders(&[2, 3, 5, 8, 9]), "2-3,5,8-9");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn f32_rows_round_trip_exactly(values in prop::collection::vec(-1e6f32..1e6, 0..40), terminal in any::<bool>()) {
        let schema = Schema::new(1, 1, terminal);
        let w = schema.width();
        let n = values.len() / w;
        let mut data: Vec<f64> = values[..n * w].iter().map(|&v| f64::from(v)).collect();
        if terminal {
            for r in 0..n {
                data[r * w + w - 1] = (data[r * w + w - 1] > 0.0) as u8 as f64;
            }
        }
        let file = DatasetFile::Transitions(TransitionDataset::new(schema, Tensor::matrix(n, w, data).unwrap()).unwrap());
        prop_assert_eq!(DatasetFile::decode(&file.encode()).unwrap(), file);
    }

    #[test]
    fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = DatasetFile::decode(&bytes);
        let _ = Checkpoint::decode(&bytes);
        let mut prefixed = DATASET_MAGIC.to_vec();
        prefixed.extend_from_slice(&bytes);
        let _ = DatasetFile::decode(&prefixed);
        let mut prefixed = CHECKPOINT_MAGIC.to_vec();
        prefixed.extend_from_slice(&bytes);
        let _ = Checkpoint::decode(&prefixed);
    }
}
