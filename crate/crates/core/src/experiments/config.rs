//! Flat `section.key=value` configuration with `--set` style overrides.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored. Lists
//! are comma separated. Unknown keys are errors so typos never pass silently.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::experiments::data::{DatasetKind, DatasetSpec};
use crate::experiments::train::{FinetuneMode, StageSpec};
use crate::model::{ModelSpec, ParamScope, LAYERS};
use crate::selective::ProjectionConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub embed_dim: usize,
    /// Initial scale of the feature concept's embedding row. The row never
    /// sees general data, so this fixes how far the suppress caption sits
    /// from the main caption.
    pub feature_embed_scale: f64,
    /// 0 fine-tunes the whole base network; otherwise adapters of this rank.
    pub adapter_rank: usize,
    pub adapter_layers: Vec<String>,
}

impl ModelConfig {
    pub fn scope(&self) -> ParamScope {
        if self.adapter_rank == 0 {
            ParamScope::Full
        } else {
            ParamScope::Adapters
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Generated samples per variant for copy score and fidelity.
    pub samples: usize,
    pub sample_seed: u64,
    pub probe_seed: u64,
    /// Leakage grid resolution per axis.
    pub grid: usize,
    /// Model samples behind the leakage histogram and hit rates.
    pub leakage_pool: usize,
    pub amplification_n: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttackStart {
    Main,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackSettings {
    pub steps: usize,
    pub lr: f64,
    pub draws: usize,
    pub eval_samples: usize,
    /// Number of protected samples attacked, from the front of the split.
    pub targets: usize,
    pub init: AttackStart,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub pretrain: StageSpec,
    pub finetune: StageSpec,
    pub finetune_mode: FinetuneMode,
    pub projection: ProjectionConfig,
    pub eval: EvalConfig,
    pub attack: AttackSettings,
}

impl Default for ExperimentConfig {
    /// Single protected glyph; every size here is a desk-scale choice.
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            out: PathBuf::from("runs/default"),
            dataset: DatasetSpec {
                kind: DatasetKind::Glyphs,
                concepts: ["ring", "plus", "box", "tee", "slash", "bars"].iter().map(|s| s.to_string()).collect(),
                main_concept: "ring".into(),
                feature_concept: "mark".into(),
                general_size: 2000,
                sensitive_fraction: 0.0005,
                noise_std: 0.6,
                mark_value: 2.5,
                seed: 1,
            },
            model: ModelConfig {
                width: 128,
                embed_dim: 16,
                feature_embed_scale: 0.01,
                adapter_rank: 0,
                adapter_layers: LAYERS.iter().map(|s| s.to_string()).collect(),
            },
            schedule: ScheduleSpec { steps: 50, beta_start: 1e-4, beta_end: 0.1 },
            pretrain: StageSpec { steps: 4000, lr: 0.3, batch: 64 },
            finetune: StageSpec { steps: 800, lr: 0.05, batch: 16 },
            finetune_mode: FinetuneMode::Projected,
            projection: ProjectionConfig { lambda: 1.0, epsilon: 1e-8, eta: 0.05, rescale: false },
            eval: EvalConfig {
                samples: 128,
                sample_seed: 99,
                probe_seed: 3,
                grid: 32,
                leakage_pool: 8000,
                amplification_n: vec![1, 5, 20, 100],
            },
            attack: AttackSettings { steps: 500, lr: 0.05, draws: 64, eval_samples: 64, targets: 1, init: AttackStart::Main },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Reads a config file on top of the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_assignment(line).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", no + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "dataset.kind" => self.dataset.kind = v.parse()?,
            "dataset.concepts" => self.dataset.concepts = parse_list(v),
            "dataset.main" => self.dataset.main_concept = v.to_string(),
            "dataset.feature" => self.dataset.feature_concept = v.to_string(),
            "dataset.general_size" => self.dataset.general_size = parse(key, v)?,
            "dataset.sensitive_fraction" => self.dataset.sensitive_fraction = parse(key, v)?,
            "dataset.noise_std" => self.dataset.noise_std = parse(key, v)?,
            "dataset.mark_value" => self.dataset.mark_value = parse(key, v)?,
            "dataset.seed" => self.dataset.seed = parse(key, v)?,
            "model.width" => self.model.width = parse(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse(key, v)?,
            "model.feature_embed_scale" => self.model.feature_embed_scale = parse(key, v)?,
            "model.adapter_rank" => self.model.adapter_rank = parse(key, v)?,
            "model.adapter_layers" => self.model.adapter_layers = parse_list(v),
            "schedule.steps" => self.schedule.steps = parse(key, v)?,
            "schedule.beta_start" => self.schedule.beta_start = parse(key, v)?,
            "schedule.beta_end" => self.schedule.beta_end = parse(key, v)?,
            "pretrain.steps" => self.pretrain.steps = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.batch" => self.pretrain.batch = parse(key, v)?,
            "finetune.steps" => self.finetune.steps = parse(key, v)?,
            "finetune.lr" => self.finetune.lr = parse(key, v)?,
            "finetune.batch" => self.finetune.batch = parse(key, v)?,
            "finetune.mode" => self.finetune_mode = v.parse()?,
            "projection.lambda" => self.projection.lambda = parse(key, v)?,
            "projection.epsilon" => self.projection.epsilon = parse(key, v)?,
            "projection.rescale" => self.projection.rescale = parse_bool(key, v)?,
            "eval.samples" => self.eval.samples = parse(key, v)?,
            "eval.sample_seed" => self.eval.sample_seed = parse(key, v)?,
            "eval.probe_seed" => self.eval.probe_seed = parse(key, v)?,
            "eval.grid" => self.eval.grid = parse(key, v)?,
            "eval.leakage_pool" => self.eval.leakage_pool = parse(key, v)?,
            "eval.amplification_n" => {
                self.eval.amplification_n = parse_list(v).iter().map(|s| parse(key, s)).collect::<Result<_>>()?
            }
            "attack.steps" => self.attack.steps = parse(key, v)?,
            "attack.lr" => self.attack.lr = parse(key, v)?,
            "attack.draws" => self.attack.draws = parse(key, v)?,
            "attack.eval_samples" => self.attack.eval_samples = parse(key, v)?,
            "attack.targets" => self.attack.targets = parse(key, v)?,
            "attack.init" => {
                self.attack.init = match v {
                    "main" => AttackStart::Main,
                    "random" => AttackStart::Random,
                    _ => return Err(Error::Config(format!("`{key}`: expected main or random, got `{v}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text form; `apply_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let attack_init = match self.attack.init {
            AttackStart::Main => "main",
            AttackStart::Random => "random",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("dataset.kind", d.kind.to_string()),
            ("dataset.concepts", join(&d.concepts)),
            ("dataset.main", d.main_concept.clone()),
            ("dataset.feature", d.feature_concept.clone()),
            ("dataset.general_size", d.general_size.to_string()),
            ("dataset.sensitive_fraction", d.sensitive_fraction.to_string()),
            ("dataset.noise_std", d.noise_std.to_string()),
            ("dataset.mark_value", d.mark_value.to_string()),
            ("dataset.seed", d.seed.to_string()),
            ("model.width", self.model.width.to_string()),
            ("model.embed_dim", self.model.embed_dim.to_string()),
            ("model.feature_embed_scale", self.model.feature_embed_scale.to_string()),
            ("model.adapter_rank", self.model.adapter_rank.to_string()),
            ("model.adapter_layers", join(&self.model.adapter_layers)),
            ("schedule.steps", self.schedule.steps.to_string()),
            ("schedule.beta_start", self.schedule.beta_start.to_string()),
            ("schedule.beta_end", self.schedule.beta_end.to_string()),
            ("pretrain.steps", self.pretrain.steps.to_string()),
            ("pretrain.lr", self.pretrain.lr.to_string()),
            ("pretrain.batch", self.pretrain.batch.to_string()),
            ("finetune.steps", self.finetune.steps.to_string()),
            ("finetune.lr", self.finetune.lr.to_string()),
            ("finetune.batch", self.finetune.batch.to_string()),
            ("finetune.mode", self.finetune_mode.to_string()),
            ("projection.lambda", self.projection.lambda.to_string()),
            ("projection.epsilon", self.projection.epsilon.to_string()),
            ("projection.rescale", self.projection.rescale.to_string()),
            ("eval.samples", self.eval.samples.to_string()),
            ("eval.sample_seed", self.eval.sample_seed.to_string()),
            ("eval.probe_seed", self.eval.probe_seed.to_string()),
            ("eval.grid", self.eval.grid.to_string()),
            ("eval.leakage_pool", self.eval.leakage_pool.to_string()),
            ("eval.amplification_n", join(&self.eval.amplification_n)),
            ("attack.steps", self.attack.steps.to_string()),
            ("attack.lr", self.attack.lr.to_string()),
            ("attack.draws", self.attack.draws.to_string()),
            ("attack.eval_samples", self.attack.eval_samples.to_string()),
            ("attack.targets", self.attack.targets.to_string()),
            ("attack.init", attack_init.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec { data_dim: self.dataset.kind.data_dim(), width: self.model.width, embed_dim: self.model.embed_dim }
    }

    /// Projection settings with the fine-tune learning rate as `η`.
    pub fn projection_config(&self) -> ProjectionConfig {
        ProjectionConfig { eta: self.finetune.lr, ..self.projection.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.model.width == 0 || self.model.embed_dim == 0 {
            return Err(Error::Config("model.width and model.embed_dim must be positive".into()));
        }
        if !(self.model.feature_embed_scale >= 0.0 && self.model.feature_embed_scale.is_finite()) {
            return Err(Error::Config("model.feature_embed_scale must be finite and non-negative".into()));
        }
        if self.model.adapter_rank > 0 {
            if self.model.adapter_layers.is_empty() {
                return Err(Error::Config("model.adapter_layers is empty".into()));
            }
            if let Some(bad) = self.model.adapter_layers.iter().find(|l| !LAYERS.contains(&l.as_str())) {
                return Err(Error::Config(format!("unknown adapter layer `{bad}`")));
            }
        }
        self.schedule.build().map_err(|e| Error::Config(format!("schedule: {e}")))?;
        for (name, st) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if st.batch == 0 || !(st.lr > 0.0 && st.lr.is_finite()) {
                return Err(Error::Config(format!("{name} needs batch >= 1 and a positive finite lr")));
            }
        }
        self.projection_config().validate().map_err(|e| Error::Config(format!("projection: {e}")))?;
        if self.eval.samples == 0 || self.eval.grid == 0 || self.eval.leakage_pool == 0 {
            return Err(Error::Config("eval.samples, eval.grid and eval.leakage_pool must be positive".into()));
        }
        if self.eval.amplification_n.iter().any(|&n| n == 0 || n > self.eval.leakage_pool) {
            return Err(Error::Config("eval.amplification_n entries must lie in 1..=eval.leakage_pool".into()));
        }
        if self.attack.steps == 0 || !(self.attack.lr >= 0.0) || self.attack.draws == 0 || self.attack.eval_samples == 0 {
            return Err(Error::Config("attack needs steps >= 1, lr >= 0, draws >= 1, eval_samples >= 1".into()));
        }
        Ok(())
    }
}
