//! One JSON document configuring every stage of a run, with dotted
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::{GenerateConfig, OracleParams};
use crate::model::ModelConfig;
use crate::relax::RelaxConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error("config field error: {0}")]
    Field(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    /// Training output: metrics, checkpoints, final model.
    pub run_dir: PathBuf,
    /// Model used by `eval` and `relax`; defaults to `<run_dir>/model.json`.
    pub checkpoint: Option<PathBuf>,
    /// Relaxation output: trajectories and metrics.
    pub relax_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data.jsonl".into(),
            run_dir: "run".into(),
            checkpoint: None,
            relax_dir: "relax".into(),
        }
    }
}

impl Paths {
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.run_dir.join("model.json"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Which records to score: `train`, `val`, `test` or `ood`.
    pub split: String,
    /// Seed of the rotations drawn by force-centric prediction.
    pub seed: u64,
    /// Structures relaxed by `relax`; 0 means every record of the split.
    pub relax_structures: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: "test".into(), seed: 0, relax_structures: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub relax: RelaxConfig,
    pub oracle: OracleParams,
    pub data: GenerateConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
    /// When set, replaces the seeds of data generation, model
    /// initialization, training and evaluation.
    pub seed: Option<u64>,
}

/// Every leaf key with its meaning and unit.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("model.message_dim", "hidden message width M"),
    ("model.layers", "message-passing layers K"),
    ("model.hidden_dim", "embedding-block hidden width D"),
    ("model.experts", "species-mixed candidate vectors per embedding block B"),
    ("model.phi_cells", "grid rows over inclination, poles included"),
    ("model.theta_cells", "grid columns over azimuth"),
    ("model.cutoff", "neighbor cutoff radius, Å"),
    ("model.max_neighbors", "nearest neighbors kept per atom"),
    ("model.variant", "`energy-centric` or `force-centric`"),
    ("model.rotation_samples", "random rotations averaged by force-centric prediction"),
    ("model.num_basis", "Gaussian distance basis size"),
    ("model.norm_groups", "group-normalization groups (divides hidden_dim)"),
    ("model.norm_eps", "group-normalization variance floor"),
    ("model.species", "supported atomic numbers"),
    ("model.seed", "parameter initialization seed"),
    ("train.batch_size", "structures per optimizer step"),
    ("train.energy_weight", "energy L1 weight, 1/eV"),
    ("train.force_weight", "force L1 weight, Å/eV"),
    ("train.learning_rate", "initial step size"),
    ("train.decay_factor", "learning-rate multiplier on a validation plateau"),
    ("train.patience", "validation rounds without improvement before decaying"),
    ("train.max_steps", "optimizer steps"),
    ("train.val_interval", "steps between validation rounds"),
    ("train.val_structures", "validation structures scored per round"),
    ("train.checkpoint_interval", "steps between checkpoints, 0 for final only"),
    ("train.force_only", "drop the energy loss"),
    ("train.train_rotations", "random rotations per structure per step (force-centric)"),
    ("train.hvp_displacement", "finite-difference displacement for energy-centric force training, Å"),
    ("train.beta1", "first-moment decay"),
    ("train.beta2", "second-moment decay"),
    ("train.adam_eps", "denominator floor"),
    ("train.seed", "shuffling and rotation seed"),
    ("relax.max_iterations", "relaxation step budget"),
    ("relax.force_threshold", "convergence threshold on max atom force, eV/Å"),
    ("relax.max_displacement", "per-atom step cap, Å"),
    ("relax.step_size", "step per unit force, Å²/eV"),
    ("oracle.pairs", "Lennard-Jones pairs: species, epsilon (eV), sigma (Å)"),
    ("oracle.cutoff", "oracle cutoff radius, Å"),
    ("oracle.taper", "width of the smooth switch ending at the cutoff, Å"),
    ("oracle.core_fraction", "pairs closer than this times sigma are rejected"),
    ("data.structures", "structures to generate"),
    ("data.min_atoms", "smallest cluster"),
    ("data.max_atoms", "largest cluster"),
    ("data.species", "atomic numbers to draw from"),
    ("data.ood_fraction", "fraction of out-of-domain structures"),
    ("data.ood_pair", "held-out species pair, default two of the heaviest species"),
    ("data.noise_min", "smallest displacement noise, Å"),
    ("data.noise_max", "largest displacement noise, Å"),
    ("data.relax_iterations", "oracle relaxation budget for cluster minima"),
    ("data.seed", "generation seed"),
    ("eval.split", "records scored by eval and relaxed by relax: train, val, test, ood"),
    ("eval.seed", "prediction rotation seed"),
    ("eval.relax_structures", "structures relaxed by relax, 0 for all"),
    ("paths.dataset", "dataset file (JSON lines)"),
    ("paths.run_dir", "training output directory"),
    ("paths.checkpoint", "model file for eval and relax, default <run_dir>/model.json"),
    ("paths.relax_dir", "relaxation output directory"),
    ("seed", "overrides every seed above when set"),
];

fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Sets a dotted key inside a JSON object tree, refusing keys that do not
/// already exist.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        let slot = map.get_mut(*part).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(ConfigError::UnknownKey(key.to_string()))
}

impl RunConfig {
    /// Parses JSON text, applies `key=value` overrides, and validates.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let parsed: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Field(e.to_string()))?;
        let mut tree = serde_json::to_value(&parsed).expect("config serializes");
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            set_path(&mut tree, k.trim(), parse_value(v.trim()))?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| ConfigError::Field(e.to_string()))?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.into(), source })?,
            None => "{}".to_string(),
        };
        Self::from_json_with_overrides(&text, overrides)
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.model.seed = s;
            self.train.seed = s;
            self.eval.seed = s;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.relax.validate().map_err(|e| invalid(&e))?;
        self.oracle.validate().map_err(|e| invalid(&e))?;
        self.data.validate(&self.oracle).map_err(|e| invalid(&e))?;
        if !["train", "val", "test", "ood"].contains(&self.eval.split.as_str()) {
            return Err(ConfigError::Invalid(format!(
                "eval.split must be train, val, test or ood, got {:?}",
                self.eval.split
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Leaf keys of a JSON object tree in dotted form; arrays count as leaves.
pub fn leaf_keys(value: &Value) -> Vec<String> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk("", value, &mut out);
    out
}

/// Multi-line key reference for `--help`.
pub fn key_help() -> String {
    let width = KEY_DOCS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    KEY_DOCS.iter().map(|(k, d)| format!("  {k:width$}  {d}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_documented() {
        let tree = serde_json::to_value(RunConfig::default()).unwrap();
        let mut keys = leaf_keys(&tree);
        keys.sort();
        let mut documented: Vec<String> = KEY_DOCS.iter().map(|(k, _)| k.to_string()).collect();
        documented.sort();
        assert_eq!(keys, documented);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let sets = ["model.layers=2", "train.force_only=true", "paths.dataset=x.jsonl", "relax.step_size=0.02"]
            .map(String::from);
        let cfg = RunConfig::from_json_with_overrides("{}", &sets).unwrap();
        assert_eq!(cfg.model.layers, 2);
        assert!(cfg.train.force_only);
        assert_eq!(cfg.paths.dataset, PathBuf::from("x.jsonl"));
        assert_eq!(cfg.relax.step_size, 0.02);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_json_with_overrides("{}", &["model.bogus=1".into()]),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::from_json_with_overrides(r#"{"train": {"lr": 1}}"#, &[]),
            Err(ConfigError::Field(_))
        ));
        assert!(matches!(RunConfig::from_json_with_overrides("{}", &["nonsense".into()]), Err(ConfigError::BadOverride(_))));
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = RunConfig::from_json_with_overrides("{}", &["train.decay_factor=1.5".into()]).unwrap_err();
        assert!(err.to_string().contains("decay_factor"), "{err}");
        let err = RunConfig::from_json_with_overrides("{}", &["model.layers=\"three\"".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::Field(_)));
    }

    #[test]
    fn seed_overrides_all_stages() {
        let cfg = RunConfig::from_json_with_overrides("{}", &["seed=7".into()]).unwrap();
        assert_eq!((cfg.data.seed, cfg.model.seed, cfg.train.seed, cfg.eval.seed), (7, 7, 7, 7));
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json_with_overrides(&cfg.to_json(), &[]).unwrap(), cfg);
    }
}
