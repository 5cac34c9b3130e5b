//! The run configuration: one TOML file fixing paths, model sizes, training
//! presets, the seed and the task list.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::engine::TrainConfig;
use crate::error::{Error, Result};
use crate::tasks::Level;
use crate::tensor::derive_seed;
use crate::workflow::{pretrain_tasks, quickstart_tasks, TaskPlan};

/// Environment variable naming the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "KVADAPT_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Frozen checkpoint plus `vocab.txt`.
    pub backbone: PathBuf,
    pub store: PathBuf,
    /// One subdirectory per task; generated on first use.
    pub datasets: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            backbone: "run/backbone".into(),
            store: "run/store".into(),
            datasets: "run/datasets".into(),
            reports: "run/reports".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.backbone, &mut self.store, &mut self.datasets, &mut self.reports] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn vocab(&self) -> PathBuf {
        self.backbone.join("vocab.txt")
    }

    pub fn dataset(&self, task_id: &str) -> PathBuf {
        self.datasets.join(task_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPresets {
    pub patch: TrainConfig,
    pub slide: TrainConfig,
}

impl Default for TrainPresets {
    fn default() -> Self {
        TrainPresets {
            patch: TrainConfig::patch_default(),
            slide: TrainConfig::slide_default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Mandatory; every random stream derives from it.
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    /// `vocab_size` is filled in from the task corpus.
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainPresets,
    /// Downstream tasks in insertion order.
    #[serde(default = "quickstart_tasks")]
    pub tasks: Vec<TaskPlan>,
    #[serde(default = "pretrain_tasks")]
    pub pretrain_tasks: Vec<TaskPlan>,
}

impl RunConfig {
    /// Defaults for everything except the seed.
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            paths: Paths::default(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainPresets::default(),
            tasks: quickstart_tasks(),
            pretrain_tasks: pretrain_tasks(),
        }
    }

    /// Parses TOML; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.paths.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for plan in self.tasks.iter().chain(&self.pretrain_tasks) {
            plan.spec.validate()?;
            if !seen.insert(plan.spec.task_id.as_str()) {
                return Err(Error::Config(format!("task id {} listed twice", plan.spec.task_id)));
            }
        }
        self.pretrain.validate()?;
        for cfg in [&self.train.patch, &self.train.slide] {
            cfg.validate(self.backbone.max_seq_len)?;
        }
        Ok(())
    }

    pub fn plan(&self, task_id: &str) -> Result<&TaskPlan> {
        self.tasks
            .iter()
            .find(|p| p.spec.task_id == task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    /// Preset for `level` with the run seed applied.
    pub fn train_config(&self, level: Level) -> TrainConfig {
        let mut cfg = match level {
            Level::Patch => self.train.patch.clone(),
            Level::Slide => self.train.slide.clone(),
        };
        cfg.seed = derive_seed(self.seed, "train");
        cfg
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "data")
    }

    pub fn backbone_seed(&self) -> u64 {
        derive_seed(self.seed, "backbone")
    }
}

/// `--config` if given, else the environment variable.
pub fn config_path(flag: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(CONFIG_ENV) {
        Some(p) if !p.is_empty() => Ok(PathBuf::from(p)),
        _ => Err(Error::Config(format!("no config file: pass --config or set {CONFIG_ENV}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::from_toml("", Path::new(".")).unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn defaults_fill_everything_but_the_seed() {
        let cfg = RunConfig::from_toml("seed = 3", Path::new("/tmp/x")).unwrap();
        assert_eq!(cfg, {
            let mut c = RunConfig::with_seed(3);
            c.paths.resolve(Path::new("/tmp/x"));
            c
        });
        assert_eq!(cfg.paths.store, Path::new("/tmp/x/run/store"));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::with_seed(9);
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text, Path::new("")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn duplicate_task_ids_are_rejected() {
        let mut cfg = RunConfig::with_seed(1);
        cfg.tasks.push(cfg.tasks[0].clone());
        assert_eq!(cfg.validate().unwrap_err().kind(), "config");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2", Path::new(".")).is_err());
    }
}
