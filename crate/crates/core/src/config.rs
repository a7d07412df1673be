//! Run configuration: a TOML file, dotted `key=value` overrides, and the
//! effective config echoed next to every run's outputs.
//!
//! ```toml
//! seed = 7                 # falls back to $CTCLOUD_SEED, then 0
//!
//! [data]
//! task = "classification"  # or "part_segmentation"
//! manifest = "data/manifest.json"
//! n_per_class = 87         # synth only
//! n_points = 256
//! n_train = 200
//! n_test = 60
//!
//! [model]                  # networks::ModelConfig; preset = "toy" | "large"
//! preset = "toy"
//! variant = "full"
//!
//! [train]                  # training::TrainConfig
//! lr0 = 0.01
//! epochs = 10
//!
//! [eval]
//! checkpoint = "runs/a/final.ckpt"
//! multi_scale = false
//!
//! [gradcheck]              # gradcheck::GradcheckConfig
//! seeds = 5
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::gradcheck::GradcheckConfig;
use crate::networks::{default_scales, ModelConfig, ScaleMode};
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "CTCLOUD_SEED";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub task: Task,
    /// Dataset index for `train` / `eval`.
    pub manifest: Option<PathBuf>,
    /// Generator sizes for `synth`; unset values take the task's default.
    pub n_per_class: Option<usize>,
    pub n_points: Option<usize>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { task: Task::Classification, manifest: None, n_per_class: None, n_points: None, n_train: None, n_test: None }
    }
}

impl DataSection {
    /// `(n_per_class, n_points, n_train, n_test)` with task defaults filled
    /// in.
    pub fn sizes(&self) -> (usize, usize, usize, usize) {
        let d = match self.task {
            Task::Classification => (87, 256, 200, 60),
            Task::PartSegmentation => (65, 512, 100, 30),
        };
        (
            self.n_per_class.unwrap_or(d.0),
            self.n_points.unwrap_or(d.1),
            self.n_train.unwrap_or(d.2),
            self.n_test.unwrap_or(d.3),
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    /// Desk-scale widths.
    #[default]
    Toy,
    /// Full widths (d_e = 256, S = 32, blocks 128/256/512).
    Large,
}

/// `[model]`: a preset plus optional field overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub preset: ModelPreset,
    #[serde(flatten)]
    pub overrides: toml::Table,
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let base = match self.preset {
            ModelPreset::Toy => ModelConfig::toy(),
            ModelPreset::Large => ModelConfig::default(),
        };
        let mut table = toml::Table::try_from(&base).expect("model config serializes");
        for (k, v) in &self.overrides {
            table.insert(k.clone(), v.clone());
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(format!("[model]: {}", e.message())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    /// `"test"`, `"train"` or `"all"`.
    pub split: String,
    pub batch_size: usize,
    pub multi_scale: bool,
    pub scales: Vec<f64>,
    pub scale_mode: ScaleMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            split: "test".into(),
            batch_size: 16,
            multi_scale: false,
            scales: default_scales(),
            scale_mode: ScaleMode::Uniform,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are done (the cosine schedule still spans
    /// `train.epochs`).
    pub stop_after: Option<usize>,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub gradcheck: GradcheckConfig,
}

/// Parses a command-line value as TOML (number, bool, array, quoted
/// string) and falls back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {}", raw)
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Usage(format!("override {:?} is not key=value", spec)))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("bad override key {:?}", key)));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override {:?}: {} is not a section", spec, p)))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies overrides in order,
    /// and fills the seed from `$CTCLOUD_SEED` when the file does not set
    /// one.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Parse {
                    path: p.to_path_buf(),
                    line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
                    msg: e.message().to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if cfg.seed.is_none() {
            if let Ok(s) = std::env::var(SEED_ENV) {
                cfg.seed = Some(s.trim().parse().map_err(|_| Error::Config(format!("{} = {:?} is not a seed", SEED_ENV, s)))?);
            }
        }
        cfg.seed.get_or_insert(0);
        cfg.model.resolve()?;
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed(), ..self.train.clone() }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the effective config to `<dir>/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join(EFFECTIVE_CONFIG_FILE);
        std::fs::write(&p, self.to_toml()).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ct_block::Variant;

    #[test]
    fn overrides_and_presets() {
        let cfg = RunConfig::load(
            None,
            &["seed=3".into(), "train.lr0=0.5".into(), "model.variant=conv_only".into(), "data.task=part_segmentation".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.train.lr0, 0.5);
        assert_eq!(cfg.data.task, Task::PartSegmentation);
        let m = cfg.model.resolve().unwrap();
        assert_eq!(m.variant, Variant::ConvOnly);
        assert_eq!(m.d_e, ModelConfig::toy().d_e);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load(None, &["train.lr=0.5".into()]).is_err());
        assert!(RunConfig::load(None, &["bogus=1".into()]).is_err());
        assert!(RunConfig::load(None, &["model.widths=1".into()]).is_err());
        assert!(matches!(RunConfig::load(None, &["novalue".into()]), Err(Error::Usage(_))));
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = RunConfig::load(None, &["seed=9".into(), "model.d_e=8".into(), "model.global_embed=[8]".into()]).unwrap();
        let text = cfg.to_toml();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, &text).unwrap();
        let back = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.model.resolve().unwrap().d_e, 8);
    }
}
