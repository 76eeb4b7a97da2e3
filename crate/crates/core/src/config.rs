//! Experiment configuration.
//!
//! Configs are JSON objects with a strict schema: unknown keys are rejected
//! (with a spelling suggestion when one is close), every omitted field takes
//! the default listed on [`ExperimentConfig`], and numeric ranges are checked
//! before anything runs. The defaults describe the reference desk-scale
//! setup: 10 clients, 10 classes, 2 classes per client, 50 training samples
//! per class, a 20→32→10 MLP and 75 rounds.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::cowa::ScoreOptions;
use crate::data::{self, PartitionSpec, Pool};
use crate::error::{Error, Result};
use crate::mamo::MamoConfig;
use crate::model::{ModelKind, ModelSpec};
use crate::orchestrator::{AlgorithmKind, CowaOptions, ExperimentSetup, HyperParams};
use crate::pwpm::PersonalizationConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CowaSection {
    pub enabled: bool,
    pub use_grad: bool,
    pub use_data: bool,
    pub normalize_components: bool,
    pub shared_only_direction: bool,
}

impl Default for CowaSection {
    fn default() -> Self {
        Self {
            enabled: true,
            use_grad: true,
            use_data: true,
            normalize_components: false,
            shared_only_direction: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MamoSection {
    pub literal_decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_classes: usize,
    pub input_dim: usize,
    pub classes_per_client: usize,
    pub train_bound: usize,
    pub test_bound: usize,
    pub noise_scale: f64,
    /// `null` sizes the synthetic pool to exactly what the partition needs.
    pub samples_per_class: Option<usize>,
    pub feature_shift: Option<f64>,
    /// Import samples from CSV instead of generating them.
    pub csv_path: Option<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            num_classes: 10,
            input_dim: 20,
            classes_per_client: 2,
            train_bound: 50,
            test_bound: 100,
            noise_scale: 1.5,
            samples_per_class: None,
            feature_shift: None,
            csv_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hidden_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mlp2,
            hidden_dim: 32,
        }
    }
}

/// Full experiment description.
///
/// | key | default |
/// |-----|---------|
/// | `algorithm` | `co_pfl` |
/// | `seed` | 0 |
/// | `rounds` | 75 |
/// | `clients` | 10 |
/// | `local_iters` | 1 |
/// | `batch_size` | 32 |
/// | `lr` | 0.03 |
/// | `beta1`, `beta2`, `epsilon` | 0.9, 0.999, 1e-8 |
/// | `p`, `gamma` | 0.25, 0.5 |
/// | `eval_every` | 1 |
/// | `ft_steps` | 5 |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub algorithm: AlgorithmKind,
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub local_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub p: f64,
    pub gamma: f64,
    pub cowa: CowaSection,
    pub mamo: MamoSection,
    pub renorm_per_coord: bool,
    pub data: DataSection,
    pub model: ModelSection,
    pub eval_every: usize,
    pub ft_steps: usize,
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: AlgorithmKind::CoPfl,
            seed: 0,
            rounds: 75,
            clients: 10,
            local_iters: 1,
            batch_size: 32,
            lr: 0.03,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            p: 0.25,
            gamma: 0.5,
            cowa: CowaSection::default(),
            mamo: MamoSection::default(),
            renorm_per_coord: false,
            data: DataSection::default(),
            model: ModelSection::default(),
            eval_every: 1,
            ft_steps: 5,
            output_dir: None,
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "algorithm", "seed", "rounds", "clients", "local_iters", "batch_size", "lr", "beta1", "beta2",
    "epsilon", "p", "gamma", "cowa", "mamo", "renorm_per_coord", "data", "model", "eval_every",
    "ft_steps", "output_dir",
];
const COWA_KEYS: &[&str] = &["enabled", "use_grad", "use_data", "normalize_components", "shared_only_direction"];
const MAMO_KEYS: &[&str] = &["literal_decay"];
const DATA_KEYS: &[&str] = &[
    "num_classes", "input_dim", "classes_per_client", "train_bound", "test_bound", "noise_scale",
    "samples_per_class", "feature_shift", "csv_path",
];
const MODEL_KEYS: &[&str] = &["kind", "hidden_dim"];

fn section_keys(section: &str) -> Option<&'static [&'static str]> {
    match section {
        "cowa" => Some(COWA_KEYS),
        "mamo" => Some(MAMO_KEYS),
        "data" => Some(DATA_KEYS),
        "model" => Some(MODEL_KEYS),
        _ => None,
    }
}

fn suggest(key: &str, known: &[&str]) -> Option<String> {
    known
        .iter()
        .map(|k| (strsim::damerau_levenshtein(key, k), *k))
        .filter(|&(dist, k)| dist <= 2.max(k.len() / 3))
        .min_by_key(|&(dist, _)| dist)
        .map(|(_, k)| k.to_string())
}

fn unknown(path: String, key: &str, known: &[&str]) -> Error {
    Error::UnknownKey {
        key: path,
        suggestion: suggest(key, known),
    }
}

/// Rejects keys outside the schema, before any type checking.
fn check_keys(root: &Value) -> Result<()> {
    let obj = root
        .as_object()
        .ok_or_else(|| Error::ConfigField {
            field: "<root>".into(),
            message: "config must be a JSON object".into(),
        })?;
    for (key, value) in obj {
        if !TOP_KEYS.contains(&key.as_str()) {
            return Err(unknown(key.clone(), key, TOP_KEYS));
        }
        if let (Some(known), Some(inner)) = (section_keys(key), value.as_object()) {
            for sub in inner.keys() {
                if !known.contains(&sub.as_str()) {
                    return Err(unknown(format!("{key}.{sub}"), sub, known));
                }
            }
        }
    }
    Ok(())
}

fn parse_json(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::ConfigParse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Applies `key=value` overrides; dotted keys reach into sections. Values are
/// parsed as JSON when possible and taken as strings otherwise.
pub fn apply_overrides(root: &mut Value, overrides: &[String]) -> Result<()> {
    for raw in overrides {
        let (key, value) = raw.split_once('=').ok_or_else(|| Error::ConfigField {
            field: raw.clone(),
            message: "override must look like KEY=VALUE".into(),
        })?;
        let value: Value =
            serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let mut target = root
            .as_object_mut()
            .ok_or_else(|| Error::arg("config root is not an object"))?;
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("split yields at least one part");
        for part in parts {
            let entry = target
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            target = entry.as_object_mut().ok_or_else(|| Error::ConfigField {
                field: key.to_string(),
                message: format!("`{part}` is not a section"),
            })?;
        }
        target.insert(last.to_string(), value);
    }
    Ok(())
}

fn from_value(root: Value) -> Result<ExperimentConfig> {
    check_keys(&root)?;
    let cfg: ExperimentConfig = serde_json::from_value(root).map_err(|e| Error::ConfigField {
        field: "<schema>".into(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses, overrides, fills defaults and validates.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut root = parse_json(text)?;
    check_keys(&root)?;
    apply_overrides(&mut root, overrides)?;
    from_value(root)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    load_config_with(path, &[])
}

pub fn load_config_with(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, overrides)
}

fn field_err(field: &str, message: impl Into<String>) -> Error {
    Error::ConfigField {
        field: field.into(),
        message: message.into(),
    }
}

fn check_open_unit(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(field_err(field, format!("{field} ∈ (0,1), got {v}")))
    }
}

fn check_closed_unit(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(field_err(field, format!("{field} ∈ [0,1], got {v}")))
    }
}

fn check_at_least_one(field: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(field_err(field, format!("{field} >= 1, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn reference(algorithm: AlgorithmKind, seed: u64) -> Self {
        Self {
            algorithm,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(field_err("lr", format!("lr > 0, got {}", self.lr)));
        }
        check_open_unit("beta1", self.beta1)?;
        check_open_unit("beta2", self.beta2)?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(field_err("epsilon", format!("epsilon > 0, got {}", self.epsilon)));
        }
        check_closed_unit("p", self.p)?;
        check_closed_unit("gamma", self.gamma)?;
        check_at_least_one("rounds", self.rounds)?;
        check_at_least_one("clients", self.clients)?;
        check_at_least_one("local_iters", self.local_iters)?;
        check_at_least_one("batch_size", self.batch_size)?;
        check_at_least_one("eval_every", self.eval_every)?;
        let d = &self.data;
        if d.num_classes < 2 {
            return Err(field_err("data.num_classes", "data.num_classes >= 2"));
        }
        check_at_least_one("data.input_dim", d.input_dim)?;
        if d.classes_per_client == 0 || d.classes_per_client > d.num_classes {
            return Err(field_err(
                "data.classes_per_client",
                format!("data.classes_per_client ∈ [1,{}]", d.num_classes),
            ));
        }
        check_at_least_one("data.train_bound", d.train_bound)?;
        check_at_least_one("data.test_bound", d.test_bound)?;
        if !(d.noise_scale >= 0.0 && d.noise_scale.is_finite()) {
            return Err(field_err("data.noise_scale", "data.noise_scale >= 0"));
        }
        if let Some(s) = d.feature_shift {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(field_err("data.feature_shift", "data.feature_shift >= 0"));
            }
        }
        if let Some(n) = d.samples_per_class {
            check_at_least_one("data.samples_per_class", n)?;
        }
        if self.model.kind == ModelKind::Mlp2 {
            check_at_least_one("model.hidden_dim", self.model.hidden_dim)?;
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.model.kind,
            input_dim: self.data.input_dim,
            hidden_dim: match self.model.kind {
                ModelKind::Mlp2 => self.model.hidden_dim,
                ModelKind::SoftmaxRegression => 0,
            },
            num_classes: self.data.num_classes,
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            num_clients: self.clients,
            classes_per_client: self.data.classes_per_client,
            train_bound: self.data.train_bound,
            test_bound: self.data.test_bound,
            num_classes: self.data.num_classes,
            seed: self.seed,
            feature_shift: self.data.feature_shift,
        }
    }

    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            algorithm: self.algorithm,
            seed: self.seed,
            local_iters: self.local_iters,
            batch_size: self.batch_size,
            optimizer: MamoConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
                literal_decay: self.mamo.literal_decay,
            },
            personalization: PersonalizationConfig {
                rate: self.p,
                budget: self.gamma,
            },
            cowa: CowaOptions {
                enabled: self.cowa.enabled,
                score: ScoreOptions {
                    use_grad: self.cowa.use_grad,
                    use_data: self.cowa.use_data,
                    normalize_components: self.cowa.normalize_components,
                },
                shared_only_direction: self.cowa.shared_only_direction,
            },
            renorm_per_coord: self.renorm_per_coord,
            ft_steps: self.ft_steps,
        }
    }

    pub fn build_pool(&self) -> Result<Pool> {
        let d = &self.data;
        match &d.csv_path {
            Some(path) => {
                let pool = data::load_csv_pool(Path::new(path), Some(d.num_classes))?;
                if pool.data.dim() != d.input_dim {
                    return Err(field_err(
                        "data.input_dim",
                        format!("csv has {} features, config says {}", pool.data.dim(), d.input_dim),
                    ));
                }
                Ok(pool)
            }
            None => {
                let per_class = d
                    .samples_per_class
                    .unwrap_or_else(|| self.partition_spec().samples_per_class_needed());
                data::gen_synthetic(d.num_classes, d.input_dim, per_class, self.seed, d.noise_scale)
            }
        }
    }

    pub fn setup(&self) -> Result<ExperimentSetup> {
        self.validate()?;
        Ok(ExperimentSetup {
            hyper: self.hyper_params(),
            model: self.model_spec(),
            partition: self.partition_spec(),
            pool: self.build_pool()?,
        })
    }

    /// Canonical JSON of the fully resolved config.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON, ignoring where output is written.
    pub fn config_hash(&self) -> String {
        let mut copy = self.clone();
        copy.output_dir = None;
        hex::encode(Sha256::digest(copy.to_canonical_json().as_bytes()))
    }
}
