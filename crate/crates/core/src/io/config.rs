//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and text after `#` are ignored.
//! Later assignments win, so command-line overrides are applied by calling
//! [`RunConfig::set`] after loading a file. [`RunConfig::to_text`] writes
//! every key in a fixed order and parses back to an equal config.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::accountant::Conversion;
use crate::error::{Error, Result};
use crate::transition::{StatsSource, UpdateRule};

/// Synthesis granularity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    Transition,
    Trajectory,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transition" => Ok(Mode::Transition),
            "trajectory" => Ok(Mode::Trajectory),
            _ => Err(Error::Config(format!(
                "mode must be transition or trajectory, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Transition => "transition",
            Mode::Trajectory => "trajectory",
        })
    }
}

/// Which command a config drives; decides the required paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Calibrate,
    Collect,
    Pretrain,
    Finetune,
    Synthesize,
    Evaluate,
    Pipeline,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Calibrate => "calibrate",
            Task::Collect => "collect",
            Task::Pretrain => "pretrain",
            Task::Finetune => "finetune",
            Task::Synthesize => "synthesize",
            Task::Evaluate => "evaluate",
            Task::Pipeline => "pipeline",
        }
    }
}

/// Data-collecting policy for `collect`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CollectPolicy {
    #[default]
    Random,
    Expert,
}

/// Every knob of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub public: Option<PathBuf>,
    pub sensitive: Option<PathBuf>,
    pub synthetic: Option<PathBuf>,
    /// Input checkpoint.
    pub ckpt: Option<PathBuf>,
    /// Output file, or output directory for `pipeline`.
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,

    pub epsilon: f64,
    pub delta: f64,
    pub conversion: Conversion,
    pub clip: f64,
    /// Sampling ratio and step count for `calibrate`.
    pub q: f64,
    pub dp_steps: u64,

    pub curiosity_rate: f64,
    pub horizon: usize,
    pub batch: usize,
    pub finetune_batch: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub finetune_rule: UpdateRule,
    pub diffusion_steps: usize,
    pub draft_steps: usize,
    /// Token width of the trajectory transformer.
    pub embed: usize,
    pub width: usize,
    pub depth: usize,
    pub stats: StatsSource,
    pub paper_literal_mean: bool,

    /// Rows (or trajectories) to synthesize; 0 matches the sensitive set.
    pub samples: usize,
    /// Shortened sampler length; 0 runs the full schedule.
    pub sample_steps: usize,
    pub max_len: usize,

    pub env_layout: String,
    pub env_random_start: bool,
    pub episodes: usize,
    pub policy: CollectPolicy,
    pub policy_noise: f64,
    pub eval_episodes: usize,
    pub bc_width: usize,
    pub bc_depth: usize,
    pub bc_epochs: usize,
    pub bc_batch: usize,
    pub bc_lr: f64,
    pub trajscore: bool,

    pub seed: u64,
}

/// The open 5×5 grid used by default.
pub const DEFAULT_LAYOUT: &str = "S..../...../...../...../....G";

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Transition,
            public: None,
            sensitive: None,
            synthetic: None,
            ckpt: None,
            out: None,
            report: None,
            epsilon: 10.0,
            delta: 1e-5,
            conversion: Conversion::Improved,
            clip: 1.0,
            q: 0.01,
            dp_steps: 1000,
            curiosity_rate: 0.3,
            horizon: 4,
            batch: 64,
            finetune_batch: 256,
            pretrain_epochs: 10,
            finetune_epochs: 50,
            pretrain_lr: 2e-3,
            finetune_lr: 0.1,
            finetune_rule: UpdateRule::Sgd,
            diffusion_steps: 100,
            draft_steps: 10,
            embed: 32,
            width: 128,
            depth: 4,
            stats: StatsSource::Public,
            paper_literal_mean: false,
            samples: 0,
            sample_steps: 0,
            max_len: 40,
            env_layout: DEFAULT_LAYOUT.to_string(),
            env_random_start: true,
            episodes: 1000,
            policy: CollectPolicy::Random,
            policy_noise: 0.1,
            eval_episodes: 500,
            bc_width: 64,
            bc_depth: 3,
            bc_epochs: 200,
            bc_batch: 64,
            bc_lr: 3e-3,
            trajscore: false,
            seed: 0,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Parses `text` over the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Applies every assignment in `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Assigns one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.parse()?,
            "public" => self.public = path(value),
            "sensitive" => self.sensitive = path(value),
            "synthetic" => self.synthetic = path(value),
            "ckpt" => self.ckpt = path(value),
            "out" => self.out = path(value),
            "report" => self.report = path(value),
            "epsilon" => self.epsilon = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "conversion" => {
                self.conversion = match value {
                    "classic" => Conversion::Classic,
                    "improved" => Conversion::Improved,
                    _ => {
                        return Err(Error::Config(format!(
                            "conversion: expected classic or improved, got {value:?}"
                        )))
                    }
                }
            }
            "clip" => self.clip = num(key, value)?,
            "q" => self.q = num(key, value)?,
            "dp_steps" => self.dp_steps = num(key, value)?,
            "curiosity_rate" => self.curiosity_rate = num(key, value)?,
            "horizon" => self.horizon = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "finetune_batch" => self.finetune_batch = num(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, value)?,
            "finetune_epochs" => self.finetune_epochs = num(key, value)?,
            "pretrain_lr" => self.pretrain_lr = num(key, value)?,
            "finetune_lr" => self.finetune_lr = num(key, value)?,
            "finetune_rule" => {
                self.finetune_rule = match value {
                    "sgd" => UpdateRule::Sgd,
                    "adam" => UpdateRule::Adam,
                    _ => {
                        return Err(Error::Config(format!(
                            "finetune_rule: expected sgd or adam, got {value:?}"
                        )))
                    }
                }
            }
            "diffusion_steps" => self.diffusion_steps = num(key, value)?,
            "draft_steps" => self.draft_steps = num(key, value)?,
            "embed" => self.embed = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "stats" => {
                self.stats = match value {
                    "public" => StatsSource::Public,
                    "sensitive" => StatsSource::Sensitive,
                    _ => {
                        return Err(Error::Config(format!(
                            "stats: expected public or sensitive, got {value:?}"
                        )))
                    }
                }
            }
            "paper_literal_mean" => self.paper_literal_mean = flag(key, value)?,
            "samples" => self.samples = num(key, value)?,
            "sample_steps" => self.sample_steps = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "env_layout" => self.env_layout = value.to_string(),
            "env_random_start" => self.env_random_start = flag(key, value)?,
            "episodes" => self.episodes = num(key, value)?,
            "policy" => {
                self.policy = match value {
                    "random" => CollectPolicy::Random,
                    "expert" => CollectPolicy::Expert,
                    _ => {
                        return Err(Error::Config(format!(
                            "policy: expected random or expert, got {value:?}"
                        )))
                    }
                }
            }
            "policy_noise" => self.policy_noise = num(key, value)?,
            "eval_episodes" => self.eval_episodes = num(key, value)?,
            "bc_width" => self.bc_width = num(key, value)?,
            "bc_depth" => self.bc_depth = num(key, value)?,
            "bc_epochs" => self.bc_epochs = num(key, value)?,
            "bc_batch" => self.bc_batch = num(key, value)?,
            "bc_lr" => self.bc_lr = num(key, value)?,
            "trajscore" => self.trajscore = flag(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in the canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("mode", self.mode.to_string()),
            ("public", show_path(&self.public)),
            ("sensitive", show_path(&self.sensitive)),
            ("synthetic", show_path(&self.synthetic)),
            ("ckpt", show_path(&self.ckpt)),
            ("out", show_path(&self.out)),
            ("report", show_path(&self.report)),
            ("epsilon", self.epsilon.to_string()),
            ("delta", self.delta.to_string()),
            ("conversion", self.conversion.name().to_string()),
            ("clip", self.clip.to_string()),
            ("q", self.q.to_string()),
            ("dp_steps", self.dp_steps.to_string()),
            ("curiosity_rate", self.curiosity_rate.to_string()),
            ("horizon", self.horizon.to_string()),
            ("batch", self.batch.to_string()),
            ("finetune_batch", self.finetune_batch.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("finetune_epochs", self.finetune_epochs.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("finetune_lr", self.finetune_lr.to_string()),
            (
                "finetune_rule",
                match self.finetune_rule {
                    UpdateRule::Sgd => "sgd",
                    UpdateRule::Adam => "adam",
                }
                .to_string(),
            ),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("draft_steps", self.draft_steps.to_string()),
            ("embed", self.embed.to_string()),
            ("width", self.width.to_string()),
            ("depth", self.depth.to_string()),
            (
                "stats",
                match self.stats {
                    StatsSource::Public => "public",
                    StatsSource::Sensitive => "sensitive",
                }
                .to_string(),
            ),
            ("paper_literal_mean", self.paper_literal_mean.to_string()),
            ("samples", self.samples.to_string()),
            ("sample_steps", self.sample_steps.to_string()),
            ("max_len", self.max_len.to_string()),
            ("env_layout", self.env_layout.clone()),
            ("env_random_start", self.env_random_start.to_string()),
            ("episodes", self.episodes.to_string()),
            (
                "policy",
                match self.policy {
                    CollectPolicy::Random => "random",
                    CollectPolicy::Expert => "expert",
                }
                .to_string(),
            ),
            ("policy_noise", self.policy_noise.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("bc_width", self.bc_width.to_string()),
            ("bc_depth", self.bc_depth.to_string()),
            ("bc_epochs", self.bc_epochs.to_string()),
            ("bc_batch", self.bc_batch.to_string()),
            ("bc_lr", self.bc_lr.to_string()),
            ("trajscore", self.trajscore.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Checks value ranges and the paths `task` needs.
    pub fn validate(&self, task: Task) -> Result<()> {
        if task == Task::Calibrate || task == Task::Finetune || task == Task::Pipeline {
            if !(self.epsilon > 0.0) {
                return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
            }
            if !(self.delta > 0.0 && self.delta < 1.0) {
                return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
            }
        }
        if task == Task::Calibrate {
            if !(self.q > 0.0 && self.q <= 1.0) {
                return Err(Error::Config(format!("q must lie in (0, 1], got {}", self.q)));
            }
            if self.dp_steps == 0 {
                return Err(Error::Config("dp_steps must be at least 1".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.curiosity_rate) {
            return Err(Error::Config(format!(
                "curiosity_rate must lie in [0, 1], got {}",
                self.curiosity_rate
            )));
        }
        let positive = [
            ("horizon", self.horizon),
            ("batch", self.batch),
            ("finetune_batch", self.finetune_batch),
            ("diffusion_steps", self.diffusion_steps),
            ("draft_steps", self.draft_steps),
            ("embed", self.embed),
            ("width", self.width),
            ("depth", self.depth),
            ("max_len", self.max_len),
            ("bc_batch", self.bc_batch),
            ("bc_depth", self.bc_depth),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        let need = |name: &str, p: &Option<PathBuf>| {
            if p.is_none() {
                Err(Error::Config(format!("{} needs a {name} path", task.name())))
            } else {
                Ok(())
            }
        };
        match task {
            Task::Calibrate => {}
            Task::Collect => need("out", &self.out)?,
            Task::Pretrain => {
                need("public", &self.public)?;
                need("out", &self.out)?;
            }
            Task::Finetune => {
                need("ckpt", &self.ckpt)?;
                need("sensitive", &self.sensitive)?;
                need("out", &self.out)?;
            }
            Task::Synthesize => {
                need("ckpt", &self.ckpt)?;
                need("out", &self.out)?;
                if self.samples == 0 {
                    return Err(Error::Config("synthesize needs samples of at least 1".into()));
                }
            }
            Task::Evaluate => {
                need("sensitive", &self.sensitive)?;
                need("synthetic", &self.synthetic)?;
            }
            Task::Pipeline => {
                need("public", &self.public)?;
                need("sensitive", &self.sensitive)?;
                need("out", &self.out)?;
            }
        }
        Ok(())
    }
}
