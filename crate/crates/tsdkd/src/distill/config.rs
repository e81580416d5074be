//! Training configuration: a flat, typed key=value surface with full
//! validation and a round-trippable serialization.

use crate::error::{Error, Result};
use crate::harness::TaskKind;
use crate::lm::{LmConfig, TaskCodec};
use crate::losses::{BaselineKind, LossConfig};

/// Which objective drives the student update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    TsdKd,
    ForwardKl,
    ReverseKl,
    GkdJsd,
    SequenceCe,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::TsdKd => "tsd_kd",
            Objective::ForwardKl => "forward_kl",
            Objective::ReverseKl => "reverse_kl",
            Objective::GkdJsd => "gkd_jsd",
            Objective::SequenceCe => "sequence_ce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tsd_kd" => Ok(Objective::TsdKd),
            "forward_kl" => Ok(Objective::ForwardKl),
            "reverse_kl" => Ok(Objective::ReverseKl),
            "gkd_jsd" => Ok(Objective::GkdJsd),
            "sequence_ce" => Ok(Objective::SequenceCe),
            other => Err(Error::Config(format!(
                "field `objective`: unknown objective {other:?}"
            ))),
        }
    }

    /// The baseline this objective maps to, if it is not the combined one.
    pub fn as_baseline(&self) -> Option<BaselineKind> {
        match self {
            Objective::TsdKd => None,
            Objective::ForwardKl => Some(BaselineKind::ForwardKl),
            Objective::ReverseKl => Some(BaselineKind::ReverseKl),
            Objective::GkdJsd => Some(BaselineKind::GkdJsd),
            Objective::SequenceCe => Some(BaselineKind::SequenceCe),
        }
    }
}

/// Every knob of a training run. `to_config_string` and `set_key` are exact
/// inverses, so a parsed config re-serializes to a fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,

    // Loss weights and selection.
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub k: usize,
    pub coverage: f64,
    pub adaptive_c: bool,
    pub entropy_fraction: f64,

    // Optimization.
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub schedule: String,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub on_policy: bool,
    pub seed: u64,

    // Evaluation and data.
    pub eval_interval: usize,
    pub eval_size: usize,
    pub train_size: usize,
    pub task: TaskKind,
    pub digits_min: u32,
    pub digits_max: u32,
    pub max_response_len: usize,
    pub context: usize,

    // Model dimensions.
    pub teacher_layers: usize,
    pub teacher_d_model: usize,
    pub teacher_heads: usize,
    pub student_layers: usize,
    pub student_d_model: usize,
    pub student_heads: usize,

    // Teacher/student pretraining.
    pub pretrain_target: f64,
    pub pretrain_steps: usize,

    // Paths. Empty string means unset.
    pub out_dir: String,
    pub teacher_ckpt: String,
    pub student_ckpt: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::TsdKd,
            alpha: 0.1,
            beta: 0.9,
            tau: 1.0,
            k: 10,
            coverage: 10.0,
            adaptive_c: false,
            entropy_fraction: 0.1,
            batch_size: 32,
            steps: 600,
            lr: 3e-4,
            schedule: "cosine".into(),
            warmup_ratio: 0.1,
            weight_decay: 0.0,
            temperature: 1.0,
            on_policy: true,
            seed: 0,
            eval_interval: 200,
            eval_size: 256,
            train_size: 4096,
            task: TaskKind::Addition,
            digits_min: 2,
            digits_max: 3,
            max_response_len: 64,
            context: 96,
            teacher_layers: 2,
            teacher_d_model: 128,
            teacher_heads: 4,
            student_layers: 1,
            student_d_model: 32,
            student_heads: 2,
            pretrain_target: 0.99,
            pretrain_steps: 3000,
            out_dir: "out".into(),
            teacher_ckpt: String::new(),
            student_ckpt: String::new(),
        }
    }
}

/// Recognized keys, in serialization order.
pub const CONFIG_KEYS: &[&str] = &[
    "objective",
    "alpha",
    "beta",
    "tau",
    "k",
    "coverage",
    "adaptive_c",
    "entropy_fraction",
    "batch_size",
    "steps",
    "lr",
    "schedule",
    "warmup_ratio",
    "weight_decay",
    "temperature",
    "on_policy",
    "seed",
    "eval_interval",
    "eval_size",
    "train_size",
    "task",
    "digits_min",
    "digits_max",
    "max_response_len",
    "context",
    "teacher_layers",
    "teacher_d_model",
    "teacher_heads",
    "student_layers",
    "student_d_model",
    "student_heads",
    "pretrain_target",
    "pretrain_steps",
    "out_dir",
    "teacher_ckpt",
    "student_ckpt",
];

impl TrainConfig {
    /// Applies one `key = value` assignment with a field-level error on
    /// unknown keys or unparsable values.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("field `{key}`: cannot parse {value:?}"))
            })
        }
        fn boolean(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!(
                    "field `{key}`: expected true or false, got {value:?}"
                ))),
            }
        }
        match key {
            "objective" => self.objective = Objective::parse(value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "coverage" => self.coverage = num(key, value)?,
            "adaptive_c" => self.adaptive_c = boolean(key, value)?,
            "entropy_fraction" => self.entropy_fraction = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "schedule" => self.schedule = value.to_string(),
            "warmup_ratio" => self.warmup_ratio = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "on_policy" => self.on_policy = boolean(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "eval_interval" => self.eval_interval = num(key, value)?,
            "eval_size" => self.eval_size = num(key, value)?,
            "train_size" => self.train_size = num(key, value)?,
            "task" => self.task = TaskKind::parse(value)?,
            "digits_min" => self.digits_min = num(key, value)?,
            "digits_max" => self.digits_max = num(key, value)?,
            "max_response_len" => self.max_response_len = num(key, value)?,
            "context" => self.context = num(key, value)?,
            "teacher_layers" => self.teacher_layers = num(key, value)?,
            "teacher_d_model" => self.teacher_d_model = num(key, value)?,
            "teacher_heads" => self.teacher_heads = num(key, value)?,
            "student_layers" => self.student_layers = num(key, value)?,
            "student_d_model" => self.student_d_model = num(key, value)?,
            "student_heads" => self.student_heads = num(key, value)?,
            "pretrain_target" => self.pretrain_target = num(key, value)?,
            "pretrain_steps" => self.pretrain_steps = num(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            "teacher_ckpt" => self.teacher_ckpt = value.to_string(),
            "student_ckpt" => self.student_ckpt = value.to_string(),
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// All keys and their current values, in [`CONFIG_KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::with_capacity(CONFIG_KEYS.len());
        for &key in CONFIG_KEYS {
            let value = match key {
                "objective" => self.objective.as_str().to_string(),
                "alpha" => self.alpha.to_string(),
                "beta" => self.beta.to_string(),
                "tau" => self.tau.to_string(),
                "k" => self.k.to_string(),
                "coverage" => self.coverage.to_string(),
                "adaptive_c" => self.adaptive_c.to_string(),
                "entropy_fraction" => self.entropy_fraction.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "steps" => self.steps.to_string(),
                "lr" => self.lr.to_string(),
                "schedule" => self.schedule.clone(),
                "warmup_ratio" => self.warmup_ratio.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "temperature" => self.temperature.to_string(),
                "on_policy" => self.on_policy.to_string(),
                "seed" => self.seed.to_string(),
                "eval_interval" => self.eval_interval.to_string(),
                "eval_size" => self.eval_size.to_string(),
                "train_size" => self.train_size.to_string(),
                "task" => self.task.as_str().to_string(),
                "digits_min" => self.digits_min.to_string(),
                "digits_max" => self.digits_max.to_string(),
                "max_response_len" => self.max_response_len.to_string(),
                "context" => self.context.to_string(),
                "teacher_layers" => self.teacher_layers.to_string(),
                "teacher_d_model" => self.teacher_d_model.to_string(),
                "teacher_heads" => self.teacher_heads.to_string(),
                "student_layers" => self.student_layers.to_string(),
                "student_d_model" => self.student_d_model.to_string(),
                "student_heads" => self.student_heads.to_string(),
                "pretrain_target" => self.pretrain_target.to_string(),
                "pretrain_steps" => self.pretrain_steps.to_string(),
                "out_dir" => self.out_dir.clone(),
                "teacher_ckpt" => self.teacher_ckpt.clone(),
                "student_ckpt" => self.student_ckpt.clone(),
                _ => unreachable!("key list and match are kept in sync"),
            };
            out.push((key.to_string(), value));
        }
        out
    }

    /// The flat `key = value` form of this config.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Range checks for every field, with the offending field named.
    pub fn validate(&self) -> Result<()> {
        let vocab = TaskCodec::new().vocab_size();
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("field `alpha`: must be >= 0, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return fail(format!(
                "field `beta`: must lie in (0, 1), got {}",
                self.beta
            ));
        }
        if !(self.tau > 0.0) {
            return fail(format!("field `tau`: must be > 0, got {}", self.tau));
        }
        if self.k < 2 || self.k > vocab {
            return fail(format!(
                "field `k`: must lie in [2, {vocab}], got {}",
                self.k
            ));
        }
        if !(self.coverage > 0.0 && self.coverage <= 100.0) {
            return fail(format!(
                "field `coverage`: must lie in (0, 100], got {}",
                self.coverage
            ));
        }
        if !(self.entropy_fraction > 0.0 && self.entropy_fraction <= 1.0) {
            return fail(format!(
                "field `entropy_fraction`: must lie in (0, 1], got {}",
                self.entropy_fraction
            ));
        }
        if self.batch_size == 0 {
            return fail("field `batch_size`: must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("field `lr`: must be >= 0, got {}", self.lr));
        }
        if self.schedule != "cosine" {
            return fail(format!(
                "field `schedule`: only \"cosine\" is supported, got {:?}",
                self.schedule
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return fail(format!(
                "field `warmup_ratio`: must lie in [0, 1], got {}",
                self.warmup_ratio
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!(
                "field `weight_decay`: must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.temperature > 0.0) {
            return fail(format!(
                "field `temperature`: must be > 0, got {}",
                self.temperature
            ));
        }
        if self.eval_interval == 0 {
            return fail("field `eval_interval`: must be positive".into());
        }
        if self.eval_size == 0 || self.train_size == 0 {
            return fail("field `eval_size`/`train_size`: must be positive".into());
        }
        if self.digits_min == 0 || self.digits_min > self.digits_max || self.digits_max > 4 {
            return fail(format!(
                "field `digits_min`/`digits_max`: need 1 <= min <= max <= 4, got {}..={}",
                self.digits_min, self.digits_max
            ));
        }
        if self.max_response_len == 0 {
            return fail("field `max_response_len`: must be positive".into());
        }
        if self.context < 16 {
            return fail(format!(
                "field `context`: must be at least 16, got {}",
                self.context
            ));
        }
        if !(self.pretrain_target > 0.0 && self.pretrain_target <= 1.0) {
            return fail(format!(
                "field `pretrain_target`: must lie in (0, 1], got {}",
                self.pretrain_target
            ));
        }
        self.teacher_lm_config().validate().map_err(|e| {
            Error::Config(format!("teacher model dimensions: {e}"))
        })?;
        self.student_lm_config().validate().map_err(|e| {
            Error::Config(format!("student model dimensions: {e}"))
        })?;
        Ok(())
    }

    pub fn teacher_lm_config(&self) -> LmConfig {
        LmConfig {
            vocab_size: TaskCodec::new().vocab_size(),
            context: self.context,
            layers: self.teacher_layers,
            d_model: self.teacher_d_model,
            heads: self.teacher_heads,
        }
    }

    pub fn student_lm_config(&self) -> LmConfig {
        LmConfig {
            vocab_size: TaskCodec::new().vocab_size(),
            context: self.context,
            layers: self.student_layers,
            d_model: self.student_d_model,
            heads: self.student_heads,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
            k: self.k,
            coverage: self.coverage,
            adaptive_c: self.adaptive_c,
            entropy_fraction: self.entropy_fraction,
        }
    }
}
