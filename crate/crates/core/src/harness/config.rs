use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::envsim::{AudioConfig, DepthConfig, GridMap, SignaturePools};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::module_rng;
use crate::pipeline::{ModelConfig, Profile};
use crate::policy::PpoConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourcePlacement {
    /// The map's `G` marker.
    Map,
    /// A fresh free cell every episode.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Bundled map names or map file paths used for training.
    pub train_maps: Vec<String>,
    /// Maps for evaluation episodes.
    pub eval_maps: Vec<String>,
    pub source: SourcePlacement,
    /// Size of the training (heard) sound pool.
    pub heard_sounds: usize,
    /// Size of the held-out (unheard) sound pool.
    pub unheard_sounds: usize,
    pub sound_seed: u64,
    pub step_limit: u32,
    pub noise: f64,
    pub active_bands: usize,
    pub fov_degrees: f64,
    pub max_range: f64,
    /// Parallel environments during training.
    pub workers: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            train_maps: vec!["room8".into()],
            eval_maps: vec!["room8".into()],
            source: SourcePlacement::Map,
            heard_sounds: 1,
            unheard_sounds: 1,
            sound_seed: 0,
            step_limit: 100,
            noise: 0.05,
            active_bands: 3,
            fov_degrees: 90.0,
            max_range: 10.0,
            workers: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Environment steps summed over workers.
    pub total_steps: u64,
    /// Updates between evaluations; 0 disables them.
    pub eval_interval: u64,
    /// Episodes per periodic evaluation.
    pub eval_episodes: usize,
    /// Updates between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 200_000,
            eval_interval: 0,
            eval_episodes: 20,
            checkpoint_interval: 20,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Heard,
    Unheard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Episode `i` is drawn from stream `i` of this seed.
    pub seed: u64,
    pub exec: Exec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 100,
            seed: 1_000_003,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: default_output(),
            model: ModelConfig::desk(),
            ppo: PpoConfig::default(),
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parse the right-hand side of `--set key=value`: a TOML value if it
/// parses as one, a bare string otherwise.
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key is present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply one `a.b.c=value` override to a table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

fn to_table<T: Serialize>(v: &T) -> Result<toml::Table> {
    toml::Table::try_from(v).map_err(|e| Error::Config(e.to_string()))
}

impl RunConfig {
    /// Build from TOML text plus overrides. Missing model keys fall back to
    /// the defaults of the selected `model.profile`.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let user_model = match table.remove("model") {
            Some(toml::Value::Table(t)) => t,
            None => toml::Table::new(),
            Some(_) => return Err(Error::Config("`model` must be a section".into())),
        };
        let profile = match user_model.get("profile") {
            Some(v) => v
                .clone()
                .try_into::<Profile>()
                .map_err(|e| Error::Config(format!("model.profile: {e}")))?,
            None => Profile::Desk,
        };
        let mut model = to_table(&ModelConfig::for_profile(profile))?;
        model.extend(user_model);
        table.insert("model".into(), toml::Value::Table(model));
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ppo.validate()?;
        let e = &self.env;
        if e.train_maps.is_empty() || e.eval_maps.is_empty() {
            return Err(Error::Config("train_maps and eval_maps must be non-empty".into()));
        }
        if e.heard_sounds == 0 || e.workers == 0 || e.step_limit == 0 {
            return Err(Error::Config("heard_sounds, workers and step_limit must be positive".into()));
        }
        if !(0.0..1.0).contains(&e.noise) {
            return Err(Error::Config("noise must lie in [0, 1)".into()));
        }
        if e.active_bands == 0 || e.active_bands > self.model.audio_bands {
            return Err(Error::Config("active_bands must lie in 1..=audio_bands".into()));
        }
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be positive".into()));
        }
        Ok(())
    }

    pub fn audio(&self) -> AudioConfig {
        AudioConfig {
            bands: self.model.audio_bands,
            frames: self.model.audio_frames,
            noise: self.env.noise,
            active_bands: self.env.active_bands,
        }
    }

    pub fn depth(&self) -> DepthConfig {
        DepthConfig {
            height: self.model.visual_height,
            width: self.model.visual_width,
            fov_degrees: self.env.fov_degrees,
            max_range: self.env.max_range,
        }
    }

    /// Heard and unheard pools; disjoint by construction, checked anyway.
    pub fn sound_pools(&self) -> Result<SignaturePools> {
        let pools = SignaturePools::generate(
            self.env.heard_sounds,
            self.env.unheard_sounds,
            &self.audio(),
            &mut module_rng(self.env.sound_seed, "sounds"),
        )?;
        if !pools.is_disjoint() {
            return Err(Error::DataIntegrity("heard and unheard sound pools overlap".into()));
        }
        Ok(pools)
    }
}

/// Maps by name, each checked for a usable source placement.
pub fn load_maps(names: &[String], source: SourcePlacement) -> Result<Vec<(String, Arc<GridMap>)>> {
    names
        .iter()
        .map(|n| {
            let map = GridMap::load(n)?;
            if source == SourcePlacement::Map && map.goal.is_none() {
                return Err(Error::Config(format!("map `{n}` has no G marker for a fixed source")));
            }
            if map.free_cells().len() < 2 {
                return Err(Error::Config(format!("map `{n}` needs at least two free cells")));
            }
            Ok((n.clone(), Arc::new(map)))
        })
        .collect()
}
