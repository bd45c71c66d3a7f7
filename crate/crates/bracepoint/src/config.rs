//! Flat key=value run configuration: documented defaults, file overrides,
//! canonical serialization, and the content hash every command prints.
//!
//! Files hold one `key=value` per line; `#` starts a comment. Keys are
//! grouped as `env.*` (scene generation and collection), `train.*` (model
//! shape and optimization), `eval.*` (method comparison), and `physics.*`
//! (micro-world overrides). `train.profile` swaps the whole model shape
//! first; explicit `train.*` dims always win over it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::CollectConfig;
use crate::encoders::ModelConfig;
use crate::env::{PhysicsOverride, TaskType};
use crate::error::{Error, Result};
use crate::harness::{EvalConfig, MethodSpec, ALL_METHODS};
use crate::learning::TrainConfig;

/// Scene generation and data collection settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSettings {
    pub task: TaskType,
    pub n_points: usize,
    /// Offline collection: per-step probability of the heuristic sampler.
    pub mix: f64,
    /// Step budget per collection episode.
    pub k_max: u32,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for EnvSettings {
    fn default() -> Self {
        EnvSettings { task: TaskType::Screw, n_points: 192, mix: 0.5, k_max: 3, alpha: 1.0, beta: 1.0 }
    }
}

/// Method-comparison settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub methods: Vec<MethodSpec>,
    pub tasks: Vec<TaskType>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub max_rounds: usize,
    pub adapt: bool,
    pub workers: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            methods: ALL_METHODS.to_vec(),
            tasks: TaskType::ALL.to_vec(),
            episodes: 100,
            seeds: vec![1, 2, 3],
            max_rounds: 3,
            adapt: true,
            workers: 1,
        }
    }
}

/// Every tunable the binaries read, resolved against defaults.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AppConfig {
    pub env: EnvSettings,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub physics: PhysicsOverride,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid_argument(format!("config key '{key}': cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::invalid_argument(format!(
            "config key '{key}': expected true or false, got '{other}'"
        ))),
    }
}

fn parse_list<T, F: Fn(&str) -> Result<T>>(key: &str, value: &str, f: F) -> Result<Vec<T>> {
    let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::invalid_argument(format!("config key '{key}': empty list")));
    }
    items.into_iter().map(f).collect()
}

fn parse_triple<T: Copy + std::str::FromStr>(key: &str, value: &str) -> Result<[T; 3]> {
    let items = parse_list(key, value, |s| parse_num::<T>(key, s))?;
    if items.len() != 3 {
        return Err(Error::invalid_argument(format!(
            "config key '{key}': expected 3 comma-separated values, got {}",
            items.len()
        )));
    }
    Ok([items[0], items[1], items[2]])
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl AppConfig {
    /// Applies one override. Unknown keys and malformed values error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "env.task" => self.env.task = v.parse()?,
            "env.n_points" => self.env.n_points = parse_num(key, v)?,
            "env.mix" => self.env.mix = parse_num(key, v)?,
            "env.k_max" => self.env.k_max = parse_num(key, v)?,
            "env.alpha" => self.env.alpha = parse_num(key, v)?,
            "env.beta" => self.env.beta = parse_num(key, v)?,

            "train.profile" => match v {
                "default" => self.train.model = ModelConfig::default(),
                "small" => self.train.model = ModelConfig::small_profile(),
                other => {
                    return Err(Error::invalid_argument(format!(
                        "config key 'train.profile': expected default or small, got '{other}'"
                    )))
                }
            },
            "train.point_feature_dim" => self.train.model.point_feature_dim = parse_num(key, v)?,
            "train.small_dim" => self.train.model.small_dim = parse_num(key, v)?,
            "train.context_dim" => self.train.model.context_dim = parse_num(key, v)?,
            "train.latent_dim" => self.train.model.latent_dim = parse_num(key, v)?,
            "train.head_hidden" => self.train.model.head_hidden = parse_num(key, v)?,
            "train.small_hidden" => self.train.model.small_hidden = parse_num(key, v)?,
            "train.sa_widths" => self.train.model.sa_widths = parse_triple(key, v)?,
            "train.sa_radii" => self.train.model.sa_radii = parse_triple(key, v)?,
            "train.sa_max_group" => self.train.model.sa_max_group = parse_num(key, v)?,
            "train.min_cloud" => self.train.model.min_cloud = parse_num(key, v)?,
            "train.alpha" => self.train.alpha = parse_num(key, v)?,
            "train.beta" => self.train.beta = parse_num(key, v)?,
            "train.lambda_dir" => self.train.lambda_dir = parse_num(key, v)?,
            "train.lambda_kl" => self.train.lambda_kl = parse_num(key, v)?,
            "train.lr" => self.train.lr = parse_num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "train.lr_decay_factor" => self.train.lr_decay_factor = parse_num(key, v)?,
            "train.lr_decay_every" => self.train.lr_decay_every = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.lr_floor" => self.train.lr_floor = parse_num(key, v)?,
            "train.k_top" => self.train.k_top = parse_num(key, v)?,
            "train.n_dirs" => self.train.n_dirs = parse_num(key, v)?,
            "train.k_avg" => self.train.k_avg = parse_num(key, v)?,
            "train.stage1_steps" => self.train.stage1_steps = parse_num(key, v)?,
            "train.stage2_steps" => self.train.stage2_steps = parse_num(key, v)?,
            "train.label_scenes" => self.train.label_scenes = parse_num(key, v)?,
            "train.label_points" => self.train.label_points = parse_num(key, v)?,
            "train.adapt_lr_scale" => self.train.adapt_lr_scale = parse_num(key, v)?,
            "train.seed" => self.train.seed.0 = parse_num(key, v)?,
            "train.seed_stream" => self.train.seed.1 = parse_num(key, v)?,

            "eval.methods" => self.eval.methods = parse_list(key, v, |s| s.parse())?,
            "eval.tasks" => self.eval.tasks = parse_list(key, v, |s| s.parse())?,
            "eval.episodes" => self.eval.episodes = parse_num(key, v)?,
            "eval.seeds" => self.eval.seeds = parse_list(key, v, |s| parse_num(key, s))?,
            "eval.max_rounds" => self.eval.max_rounds = parse_num(key, v)?,
            "eval.adapt" => self.eval.adapt = parse_bool(key, v)?,
            "eval.workers" => self.eval.workers = parse_num(key, v)?,

            "physics.resist_force" => self.physics.resist_force = Some(parse_num(key, v)?),
            "physics.resist_torque" => self.physics.resist_torque = Some(parse_num(key, v)?),
            "physics.support_force" => self.physics.support_force = Some(parse_num(key, v)?),
            "physics.contact_cone_angle" => {
                self.physics.contact_cone_angle = Some(parse_num(key, v)?)
            }
            "physics.gain_force" => self.physics.gain_force = Some(parse_num(key, v)?),
            "physics.gain_torque" => self.physics.gain_torque = Some(parse_num(key, v)?),
            "physics.epsilon" => self.physics.epsilon = Some(parse_num(key, v)?),
            "physics.rot_weight" => self.physics.rot_weight = Some(parse_num(key, v)?),
            "physics.steps_to_goal" => self.physics.steps_to_goal = Some(parse_num(key, v)?),

            other => {
                return Err(Error::invalid_argument(format!("unknown config key '{other}'")))
            }
        }
        Ok(())
    }

    /// Resolves a parsed key set against the defaults. `train.profile` is
    /// applied before the per-dimension keys so those always win.
    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<AppConfig> {
        let mut cfg = AppConfig::default();
        if let Some(profile) = entries.get("train.profile") {
            cfg.apply("train.profile", profile)?;
        }
        for (k, v) in entries {
            if k == "train.profile" {
                continue;
            }
            cfg.apply(k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<AppConfig> {
        Self::from_entries(&parse_config_text(text)?)
    }

    pub fn from_file(path: &Path) -> Result<AppConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| match e {
            Error::InvalidArgument(msg) => {
                Error::invalid_argument(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }

    /// Every resolved key, sorted, one per line. Parsing this text yields an
    /// equal config, and its digest is the printed config hash.
    pub fn canonical(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("env.task".into(), self.env.task.to_string()),
            ("env.n_points".into(), self.env.n_points.to_string()),
            ("env.mix".into(), self.env.mix.to_string()),
            ("env.k_max".into(), self.env.k_max.to_string()),
            ("env.alpha".into(), self.env.alpha.to_string()),
            ("env.beta".into(), self.env.beta.to_string()),
            ("train.point_feature_dim".into(), self.train.model.point_feature_dim.to_string()),
            ("train.small_dim".into(), self.train.model.small_dim.to_string()),
            ("train.context_dim".into(), self.train.model.context_dim.to_string()),
            ("train.latent_dim".into(), self.train.model.latent_dim.to_string()),
            ("train.head_hidden".into(), self.train.model.head_hidden.to_string()),
            ("train.small_hidden".into(), self.train.model.small_hidden.to_string()),
            ("train.sa_widths".into(), join(&self.train.model.sa_widths)),
            ("train.sa_radii".into(), join(&self.train.model.sa_radii)),
            ("train.sa_max_group".into(), self.train.model.sa_max_group.to_string()),
            ("train.min_cloud".into(), self.train.model.min_cloud.to_string()),
            ("train.alpha".into(), self.train.alpha.to_string()),
            ("train.beta".into(), self.train.beta.to_string()),
            ("train.lambda_dir".into(), self.train.lambda_dir.to_string()),
            ("train.lambda_kl".into(), self.train.lambda_kl.to_string()),
            ("train.lr".into(), self.train.lr.to_string()),
            ("train.weight_decay".into(), self.train.weight_decay.to_string()),
            ("train.lr_decay_factor".into(), self.train.lr_decay_factor.to_string()),
            ("train.lr_decay_every".into(), self.train.lr_decay_every.to_string()),
            ("train.batch_size".into(), self.train.batch_size.to_string()),
            ("train.lr_floor".into(), self.train.lr_floor.to_string()),
            ("train.k_top".into(), self.train.k_top.to_string()),
            ("train.n_dirs".into(), self.train.n_dirs.to_string()),
            ("train.k_avg".into(), self.train.k_avg.to_string()),
            ("train.stage1_steps".into(), self.train.stage1_steps.to_string()),
            ("train.stage2_steps".into(), self.train.stage2_steps.to_string()),
            ("train.label_scenes".into(), self.train.label_scenes.to_string()),
            ("train.label_points".into(), self.train.label_points.to_string()),
            ("train.adapt_lr_scale".into(), self.train.adapt_lr_scale.to_string()),
            ("train.seed".into(), self.train.seed.0.to_string()),
            ("train.seed_stream".into(), self.train.seed.1.to_string()),
            ("eval.methods".into(), join(&self.eval.methods)),
            ("eval.tasks".into(), join(&self.eval.tasks)),
            ("eval.episodes".into(), self.eval.episodes.to_string()),
            ("eval.seeds".into(), join(&self.eval.seeds)),
            ("eval.max_rounds".into(), self.eval.max_rounds.to_string()),
            ("eval.adapt".into(), self.eval.adapt.to_string()),
            ("eval.workers".into(), self.eval.workers.to_string()),
        ];
        let ph = [
            ("physics.resist_force", self.physics.resist_force),
            ("physics.resist_torque", self.physics.resist_torque),
            ("physics.support_force", self.physics.support_force),
            ("physics.contact_cone_angle", self.physics.contact_cone_angle),
            ("physics.gain_force", self.physics.gain_force),
            ("physics.gain_torque", self.physics.gain_torque),
            ("physics.epsilon", self.physics.epsilon),
            ("physics.rot_weight", self.physics.rot_weight),
        ];
        for (k, v) in ph {
            if let Some(v) = v {
                pairs.push((k.into(), v.to_string()));
            }
        }
        if let Some(v) = self.physics.steps_to_goal {
            pairs.push(("physics.steps_to_goal".into(), v.to_string()));
        }
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Hex digest of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Collection settings for `n_records` drawn from this config.
    pub fn collect_config(&self, n_records: usize) -> CollectConfig {
        CollectConfig {
            task: self.env.task,
            n_records,
            mix: self.env.mix,
            k_max: self.env.k_max,
            n_points: self.env.n_points,
            physics: (!self.physics.is_empty()).then_some(self.physics),
            alpha: self.env.alpha,
            beta: self.env.beta,
            config_hash: self.hash(),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            methods: self.eval.methods.clone(),
            tasks: self.eval.tasks.clone(),
            episodes: self.eval.episodes,
            seeds: self.eval.seeds.clone(),
            n_points: self.env.n_points,
            max_rounds: self.eval.max_rounds,
            adapt: self.eval.adapt,
            physics: (!self.physics.is_empty()).then_some(self.physics),
            workers: self.eval.workers,
        }
    }
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys, missing `=`, and empty keys error.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::invalid_argument(format!("config line {}: expected key=value, got '{line}'", i + 1))
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::invalid_argument(format!("config line {}: empty key", i + 1)));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::invalid_argument(format!(
                "config line {}: key '{key}' set twice",
                i + 1
            )));
        }
    }
    Ok(map)
}
