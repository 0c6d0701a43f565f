use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use orient_core::conddiffusion::{DenoiserConfig, NoiseSchedule, TrainConfig, DEFAULT_GUIDANCE};
use orient_core::evalmetrics::{ClassifierConfig, ScoreConfig};
use orient_core::lifter::LiftConfig;
use orient_core::radiancefield::GridConfig;
use orient_core::synthscenes::DatasetConfig;

use crate::failure::Failure;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub model: DenoiserConfig,
    pub timesteps: usize,
    /// Beta range of the 1000-step reference schedule; rescaled to `timesteps`.
    pub ref_beta_min: f64,
    pub ref_beta_max: f64,
    pub train: TrainConfig,
    pub sample_steps: usize,
    pub guidance_scale: f64,
    /// Save a resumable checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            model: DenoiserConfig::default(),
            timesteps: 256,
            ref_beta_min: 1e-4,
            ref_beta_max: 0.02,
            train: TrainConfig::default(),
            sample_steps: 50,
            guidance_scale: DEFAULT_GUIDANCE,
            checkpoint_every: 1000,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> orient_core::Result<NoiseSchedule> {
        NoiseSchedule::scaled_linear(self.timesteps, self.ref_beta_min, self.ref_beta_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score: ScoreConfig,
    pub classifier: ClassifierConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { score: ScoreConfig::default(), classifier: ClassifierConfig::default() }
    }
}

/// Every knob of an experiment. Section seeds left out of the input default
/// to the global `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub diffusion: DiffusionConfig,
    pub field: GridConfig,
    pub lift: LiftConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            output_dir: None,
            dataset: DatasetConfig::default(),
            diffusion: DiffusionConfig::default(),
            field: GridConfig::default(),
            lift: LiftConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

const SEED_PATHS: [&str; 7] = [
    "dataset.seed",
    "diffusion.model.init_seed",
    "diffusion.train.seed",
    "field.seed",
    "lift.seed",
    "eval.score.seed",
    "eval.classifier.seed",
];

fn lookup<'a>(v: &'a Value, dotted: &str) -> Option<&'a Value> {
    dotted.split('.').try_fold(v, |cur, k| cur.get(k))
}

/// Sets `dotted` inside `root`, creating objects along the way.
pub fn set_path(root: &mut Value, dotted: &str, value: Value) -> Result<(), Failure> {
    let keys: Vec<&str> = dotted.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Failure::config(format!("malformed override path {dotted:?}")));
    }
    let mut cur = root;
    for k in &keys[..keys.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| Failure::config(format!("{dotted}: {k} is not a section")))?;
        cur = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| Failure::config(format!("{dotted}: parent is not a section")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Parses `path.to.key=value`; the value is read as JSON when possible and
/// as a string otherwise.
pub fn parse_override(text: &str) -> Result<(String, Value), Failure> {
    let (k, v) = text.split_once('=').ok_or_else(|| Failure::config(format!("override {text:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl ExperimentConfig {
    /// Reads `path` (defaults when `None`), applies `overrides`, fills
    /// omitted section seeds from the global seed and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Failure> {
        let mut raw = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Failure::config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Failure::config(format!("config {} is not valid JSON: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        if !raw.is_object() {
            return Err(Failure::config("config must be a JSON object"));
        }
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_path(&mut raw, &k, v)?;
        }
        Self::from_value(raw)
    }

    pub fn from_value(mut raw: Value) -> Result<Self, Failure> {
        let seed = match raw.get("seed") {
            Some(v) => v.as_u64().ok_or_else(|| Failure::config("seed must be a non-negative integer"))?,
            None => 0,
        };
        for p in SEED_PATHS {
            if lookup(&raw, p).is_none() {
                set_path(&mut raw, p, Value::from(seed))?;
            }
        }
        let cfg: ExperimentConfig = serde_json::from_value(raw).map_err(|e| Failure::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Failure::config(format!(
                "config schema version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.dataset.validate()?;
        self.diffusion.model.validate()?;
        self.diffusion.train.validate()?;
        self.diffusion.schedule()?;
        if self.diffusion.sample_steps == 0 || !self.diffusion.guidance_scale.is_finite() {
            return Err(Failure::config("diffusion.sample_steps must be >= 1 and guidance finite"));
        }
        if self.diffusion.model.resolution != self.dataset.resolution {
            return Err(Failure::config("diffusion.model.resolution must equal dataset.resolution"));
        }
        if self.diffusion.model.classes < self.dataset.classes {
            return Err(Failure::config("diffusion.model.classes must cover every dataset class"));
        }
        orient_core::radiancefield::RadianceGrid::<f32>::new(&GridConfig { resolution: 2, ..self.field })?;
        self.lift_config().validate(self.diffusion.timesteps)?;
        self.eval.score.validate()?;
        Ok(())
    }

    /// Lift section with the field layout filled in.
    pub fn lift_config(&self) -> LiftConfig {
        LiftConfig { grid: self.field, ..self.lift.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<(), Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::io(format!("cannot create {}: {e}", dir.display())))?;
        let p = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&p, self.to_json()).map_err(|e| Failure::io(format!("cannot write {}: {e}", p.display())))
    }
}
