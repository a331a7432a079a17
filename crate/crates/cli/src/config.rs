//! Experiment and bound configuration files.
//!
//! Configs are JSON. `--set a.b.c=value` edits the parsed document before it
//! is typed, so overrides are checked exactly like file contents. Values are
//! read as JSON when they parse as JSON and as strings otherwise.

use std::fs;
use std::path::{Path, PathBuf};

use irss_core::diffcore::{Architecture, InputShape};
use irss_core::synthdata::{make_ood_test_env, ImageEnv, ScmConfig, StyleImageConfig};
use irss_core::theorybound::{BoundInputs, ConfrontationSetup};
use irss_core::trainer::{Method, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A configuration problem, located by its dotted field path.
#[derive(Debug, thiserror::Error)]
#[error("invalid configuration at `{path}`: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl ToString) -> Self {
        Self {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

/// The SCM either spelled out or as the reference instance for a mixing seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScmSource {
    Preset(ScmPreset),
    Explicit(ScmConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmPreset {
    pub default_instance: u64,
}

impl ScmSource {
    pub fn resolve(&self) -> ScmConfig {
        match self {
            ScmSource::Preset(p) => ScmConfig::default_instance(p.default_instance),
            ScmSource::Explicit(c) => c.clone(),
        }
    }
}

/// Spurious-mean weights and spread of the held-out SCM environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmTest {
    pub alphas: Vec<f64>,
    pub sigma_test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmData {
    pub scm: ScmSource,
    pub n_per_env: usize,
    pub test: ScmTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageData {
    #[serde(default)]
    pub images: StyleImageConfig,
    pub n_per_env: usize,
    pub test: ImageEnv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Scm(ScmData),
    Images(ImageData),
}

impl DataConfig {
    pub fn n_per_env(&self) -> usize {
        match self {
            DataConfig::Scm(d) => d.n_per_env,
            DataConfig::Images(d) => d.n_per_env,
        }
    }

    /// Per-sample shape and class count of generated sets.
    pub fn sample_shape(&self) -> (Vec<usize>, usize) {
        match self {
            DataConfig::Scm(d) => (vec![d.scm.resolve().input_dim()], 2),
            DataConfig::Images(d) => (d.images.sample_shape(), d.images.classes),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples drawn from the held-out environment.
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: Architecture,
    /// `train.seed` is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    pub eval: EvalConfig,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn run_id(&self) -> &'static str {
        self.method.map_or("custom", Method::name)
    }

    /// Expands presets, applies the method and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        if let DataConfig::Scm(d) = &mut self.data {
            d.scm = ScmSource::Explicit(d.scm.resolve());
        }
        if let Some(m) = self.method {
            self.train = m.apply(&self.train);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds", "at least one seed is required"));
        }
        if self.data.n_per_env() == 0 {
            return Err(ConfigError::new("data.n_per_env", "must be at least 1"));
        }
        match &self.data {
            DataConfig::Scm(d) => {
                d.scm.resolve().validate().map_err(|e| ConfigError::new("data.scm", e))?;
                make_ood_test_env(&d.scm.resolve(), &d.test.alphas, d.test.sigma_test)
                    .map_err(|e| ConfigError::new("data.test", e))?;
            }
            DataConfig::Images(d) => {
                d.images.validate().map_err(|e| ConfigError::new("data.images", e))?;
                d.images.validate_env(&d.test).map_err(|e| ConfigError::new("data.test", e))?;
            }
        }
        if self.eval.n_test == 0 {
            return Err(ConfigError::new("eval.n_test", "must be at least 1"));
        }

        self.model.validate().map_err(|e| ConfigError::new("model", e))?;
        let (shape, classes) = self.data.sample_shape();
        let expected = match self.model.input {
            InputShape::Vector(d) => vec![d],
            InputShape::Image { channels, height, width } => vec![channels, height, width],
        };
        if expected != shape {
            return Err(ConfigError::new(
                "model.input",
                format!("data samples have shape {shape:?} but the model expects {expected:?}"),
            ));
        }
        if self.model.classes != classes {
            return Err(ConfigError::new(
                "model.classes",
                format!("data has {classes} classes, model predicts {}", self.model.classes),
            ));
        }

        self.train.validate().map_err(|e| ConfigError::new("train", e))?;
        if let Some(taps) = &self.train.style_taps {
            let shapes = self.model.layer_shapes().map_err(|e| ConfigError::new("model", e))?;
            for &t in taps {
                match shapes.get(t) {
                    None => {
                        return Err(ConfigError::new(
                            "train.style_taps",
                            format!("layer {t} does not exist ({} extractor layers)", shapes.len()),
                        ))
                    }
                    Some(s) if s.channels_and_extent().1 < 2 => {
                        return Err(ConfigError::new("train.style_taps", format!("layer {t} has no spatial extent")))
                    }
                    _ => {}
                }
            }
        } else if self.train.weights.lambda_adv > 0.0 && self.model.default_style_taps().is_empty() {
            return Err(ConfigError::new(
                "train.style_taps",
                "the adversarial term needs style taps and the model has no default ones",
            ));
        }
        Ok(())
    }
}

/// Inputs of the `bound` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    pub scm: ScmSource,
    pub inputs: BoundInputs,
    /// Training settings for the IRM models of the confrontation.
    pub train: TrainConfig,
    pub confrontation: ConfrontationSetup,
    pub out: PathBuf,
}

impl BoundConfig {
    pub fn resolve(mut self) -> Result<Self> {
        self.scm = ScmSource::Explicit(self.scm.resolve());
        let scm = self.scm.resolve();
        scm.validate().map_err(|e| ConfigError::new("scm", e))?;
        make_ood_test_env(&scm, &self.inputs.alphas, self.inputs.sigma_test)
            .map_err(|e| ConfigError::new("inputs", e))?;
        let i = &self.inputs;
        for (name, v) in [("c", i.c), ("delta", i.delta), ("epsilon", i.epsilon), ("beta0", i.beta0), ("gamma", i.gamma), ("sigma_erm", i.sigma_erm)] {
            if !v.is_finite() {
                return Err(ConfigError::new(format!("inputs.{name}"), "must be finite"));
            }
        }
        if !(i.delta > 0.0) {
            return Err(ConfigError::new("inputs.delta", "must be positive"));
        }
        self.train.validate().map_err(|e| ConfigError::new("train", e))?;
        let c = &self.confrontation;
        if c.n_per_env == 0 || c.n_test == 0 {
            return Err(ConfigError::new("confrontation", "sample counts must be at least 1"));
        }
        if c.seeds.is_empty() {
            return Err(ConfigError::new("confrontation.seeds", "at least one seed is required"));
        }
        Ok(self)
    }
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::new(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| ConfigError::new(path.display().to_string(), e))
}

/// Types a JSON document, reporting the failing field path.
pub fn from_value<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::new(if path == "." { String::from("<root>") } else { path }, e.into_inner())
    })
}

/// Parses an override value: JSON when it parses, otherwise a string.
pub fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dot-separated, numeric segments index arrays) to `value`,
/// creating objects along the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(ConfigError::new(path, "empty path segment"));
    }
    let segments: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let here = segments[..=i].join(".");
        cur = match cur {
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| ConfigError::new(&here, "expected an array index"))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| ConfigError::new(&here, format!("index out of range (length {len})")))?
            }
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), Value::Null);
                }
                map.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            _ => return Err(ConfigError::new(&here, "cannot descend into a scalar")),
        };
    }
    *cur = value;
    Ok(())
}

/// Applies one `path=value` assignment.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::new("--set", format!("expected PATH=VALUE, got `{assignment}`")))?;
    set_path(root, path.trim(), parse_scalar(raw.trim()))
}

/// Command-line adjustments applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub set: Vec<String>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub method: Option<Method>,
}

impl Overrides {
    fn apply(&self, doc: &mut Value) -> Result<()> {
        for s in &self.set {
            apply_override(doc, s)?;
        }
        if let Some(m) = self.method {
            set_path(doc, "method", Value::String(m.name().into()))?;
        }
        if let Some(seeds) = &self.seeds {
            set_path(doc, "seeds", serde_json::json!(seeds))?;
        }
        if let Some(out) = &self.out {
            set_path(doc, "out", Value::String(out.display().to_string()))?;
        }
        Ok(())
    }
}

/// Resolves an experiment document after applying `overrides`.
///
/// `train.seed` may be omitted; each run replaces it with its own seed.
pub fn experiment_from_value(mut doc: Value, overrides: &Overrides) -> Result<ExperimentConfig> {
    overrides.apply(&mut doc)?;
    if let Some(train) = doc.get_mut("train").and_then(Value::as_object_mut) {
        train.entry("seed").or_insert(Value::from(0));
    }
    from_value::<ExperimentConfig>(doc)?.resolve()
}

pub fn load_experiment(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    experiment_from_value(read_json(path)?, overrides)
}

pub fn load_bound(path: &Path, overrides: &Overrides) -> Result<BoundConfig> {
    let mut doc = read_json(path)?;
    for s in &overrides.set {
        apply_override(&mut doc, s)?;
    }
    if let Some(seeds) = &overrides.seeds {
        set_path(&mut doc, "confrontation.seeds", serde_json::json!(seeds))?;
    }
    if let Some(out) = &overrides.out {
        set_path(&mut doc, "out", Value::String(out.display().to_string()))?;
    }
    from_value::<BoundConfig>(doc)?.resolve()
}

/// `3`, `0,1,2` or the half-open range `0..5`.
pub fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    let bad = |m: &str| ConfigError::new("--seeds", format!("{m} in `{raw}`"));
    let seeds: Vec<u64> = if let Some((a, b)) = raw.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad("bad range start"))?;
        let b: u64 = b.trim().parse().map_err(|_| bad("bad range end"))?;
        (a..b).collect()
    } else {
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad("bad seed")))
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(bad("no seeds"));
    }
    Ok(seeds)
}

/// Pretty JSON with a trailing newline.
pub fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("config types serialize");
    s.push('\n');
    s
}
