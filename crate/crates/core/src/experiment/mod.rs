//! Experiment configuration, named presets and the batch runner behind the
//! command-line tool.

mod presets;
mod run;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::HeadInput;
use crate::protocols::{CilStyle, SyntheticSpec};
use crate::trainer::{OptimConfig, TrainConfig};

pub use presets::{find_preset, Preset, CIL_EPOCHS, PRESETS, SWEEP_W_P1};
pub use run::{
    config_from_manifest, export_masks, run, run_seed, sweep, RunSummary, SeedResult, SweepAxis, SweepRow,
    METRICS_HEADER_CIL, METRICS_HEADER_GCD, VERSION,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Gcd,
    MdgGcd,
    Cil,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Gcd => "gcd",
            Task::MdgGcd => "mdg_gcd",
            Task::Cil => "cil",
        })
    }
}

/// Which domain(s) an mDG+GCD run holds out: `"all"` or a domain id.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeldOut {
    #[default]
    All,
    Domain(usize),
}

impl Serialize for HeldOut {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            HeldOut::All => s.serialize_str("all"),
            HeldOut::Domain(d) => s.serialize_u64(*d as u64),
        }
    }
}

impl<'de> Deserialize<'de> for HeldOut {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(v) => Ok(HeldOut::Domain(v)),
            Raw::Word(w) if w == "all" => Ok(HeldOut::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "expected \"all\" or a domain id, got {w:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 32, depth: 1 }
    }
}

/// Optimizer settings; `epochs` may be left for a preset to fill.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    pub batch_size: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
            epochs: None,
            batch_size: o.batch_size,
        }
    }
}

/// Epochs used when neither the config nor a preset sets them.
pub const DEFAULT_EPOCHS: usize = 100;

/// One experiment. Each seed drives data generation, initialisation and
/// batching; `spec.seed` is replaced by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default)]
    pub spec: SyntheticSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<LossWeights>,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_mult: Option<f64>,
    #[serde(default = "yes")]
    pub partial_logic: bool,
    #[serde(default)]
    pub head_input: HeadInput,
    #[serde(default = "one")]
    pub lambda_infomax: f64,
    #[serde(default = "one")]
    pub lambda_kd: f64,
    #[serde(default = "two")]
    pub temperature: f64,
    #[serde(default = "yes")]
    pub reinit_partial_cls: bool,
    #[serde(default = "ten")]
    pub eval_interval: usize,
    #[serde(default = "fifth")]
    pub validation_fraction: f64,
    /// Incremental CIL sessions after the base session.
    #[serde(default = "five")]
    pub sessions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<CilStyle>,
    #[serde(default)]
    pub held_out_domain: HeldOut,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn ten() -> usize {
    10
}
fn fifth() -> f64 {
    0.2
}
fn five() -> usize {
    5
}
fn default_output() -> PathBuf {
    PathBuf::from("runs/latest")
}

/// 1-based line of the first `"key"` occurrence in a JSON document.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

fn keyed(text: &str, key: &str, msg: String) -> Error {
    match line_of(text, key) {
        Some(line) => Error::Config(format!("key `{key}` (line {line}): {msg}")),
        None => Error::Config(format!("key `{key}`: {msg}")),
    }
}

/// Parses and validates a JSON experiment document. Errors name the
/// offending key and its line.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let key = if path == "." { String::new() } else { format!("key `{path}`: ") };
        Error::Config(format!("{key}{inner}"))
    })?;
    cfg.validate_against(text)?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl ExperimentConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_against("")
    }

    fn validate_against(&self, text: &str) -> Result<()> {
        let err = |key: &str, msg: String| Err(keyed(text, key, msg));
        if self.seeds.is_empty() {
            return err("seeds", "at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return err("seeds", "seeds must be distinct".into());
        }
        if let Some(name) = &self.preset {
            match find_preset(name) {
                None => {
                    let known: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
                    return err("preset", format!("unknown preset {name:?}; known: {}", known.join(", ")));
                }
                Some(p) if p.task != self.task => {
                    return err(
                        "preset",
                        format!("preset {name:?} is for task {} but task is {}", p.task, self.task),
                    );
                }
                Some(_) => {}
            }
        }
        if let Some(m) = self.lr_mult {
            if !(m > 0.0) || !m.is_finite() {
                return err("lr_mult", format!("must be > 0, got {m}"));
            }
        }
        self.spec.validate().map_err(|e| keyed(text, "spec", e.to_string()))?;
        if self.model.dim < 2 || self.model.depth < 1 {
            return err("model", "dim must be >= 2 and depth >= 1".into());
        }
        match (self.task, self.held_out_domain) {
            (Task::MdgGcd, _) if self.spec.num_domains < 2 => {
                return err("num_domains", format!("mdg_gcd needs >= 2 domains, got {}", self.spec.num_domains));
            }
            (Task::MdgGcd, HeldOut::Domain(d)) if d >= self.spec.num_domains => {
                return err(
                    "held_out_domain",
                    format!("domain {d} outside [0, {})", self.spec.num_domains),
                );
            }
            _ => {}
        }
        self.resolved()
            .train_config(self.seeds[0])
            .validate()
            .map_err(|e| Error::Config(e.to_string().replace("configuration error: ", "")))?;
        Ok(())
    }

    /// Copy with every preset-controlled field filled. Fields already set
    /// are left alone, so resolving twice is a no-op.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut out = self.clone();
        let preset = self.preset.as_deref().and_then(find_preset);
        if out.weights.is_none() {
            out.weights = Some(match preset {
                Some(p) => {
                    let scale = if p.lreg_times_lambda { self.lambda_infomax } else { 1.0 };
                    LossWeights {
                        w_p1: p.w_p1,
                        w_p2: p.w_p2,
                        w_lreg: p.w_lreg * scale,
                    }
                }
                None => LossWeights::ZERO,
            });
        }
        if out.optim.epochs.is_none() {
            out.optim.epochs = Some(preset.and_then(|p| p.epochs).unwrap_or(DEFAULT_EPOCHS));
        }
        if out.lr_mult.is_none() {
            out.lr_mult = Some(preset.and_then(|p| p.lr_mult).unwrap_or(1.0));
        }
        if out.style.is_none() && self.task == Task::Cil {
            out.style = Some(preset.and_then(|p| p.style).unwrap_or_default());
        }
        out
    }

    /// Trainer settings for one seed of a resolved config.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optim: OptimConfig {
                lr: self.optim.lr * self.lr_mult.unwrap_or(1.0),
                beta1: self.optim.beta1,
                beta2: self.optim.beta2,
                epsilon: self.optim.epsilon,
                epochs: self.optim.epochs.unwrap_or(DEFAULT_EPOCHS),
                batch_size: self.optim.batch_size,
                seed,
            },
            weights: self.weights.unwrap_or(LossWeights::ZERO),
            partial_logic: self.partial_logic,
            head_input: self.head_input,
            lambda_infomax: self.lambda_infomax,
            lambda_kd: self.lambda_kd,
            temperature: self.temperature,
            reinit_partial_cls: self.reinit_partial_cls,
            eval_interval: self.eval_interval,
            validation_fraction: self.validation_fraction,
        }
    }

    /// Data spec for one seed.
    pub fn spec_for(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            seed,
            ..self.spec.clone()
        }
    }
}
