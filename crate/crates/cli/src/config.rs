//! Experiment manifest: a TOML file whose values explicit flags override.
//!
//! ```toml
//! format_version = 1
//!
//! [model]
//! preset = "desk"        # desk | micro
//! spectral = 9
//!
//! [train]
//! lambda = 0.0125
//! epochs = 20
//! batch = 8
//! patch = 64
//! lr_init = 1e-4
//! lr_final = 1e-5
//! seed = 0
//! swin_baseline = false
//! uniform_shift = false
//!
//! [data]
//! dir = "corpus"         # or synthesize:
//! synth_seed = 0
//! synth_n = 200
//! size = 64
//! split = 0.6667
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use msnc_core::train::TrainConfig;
use msnc_core::transforms::StageConfig;
use serde::Deserialize;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub spectral: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub batch: Option<usize>,
    pub patch: Option<usize>,
    pub lr_init: Option<f64>,
    pub lr_final: Option<f64>,
    pub seed: Option<u64>,
    pub swin_baseline: Option<bool>,
    pub uniform_shift: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub synth_seed: Option<u64>,
    pub synth_n: Option<usize>,
    pub size: Option<usize>,
    pub split: Option<f64>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if m.format_version != FORMAT_VERSION {
            bail!(usage(format!(
                "{}: format_version {} is not supported (expected {FORMAT_VERSION})",
                path.display(),
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn default_manifest() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            ..Self::default()
        }
    }

    pub fn stage_config(&self) -> Result<StageConfig> {
        let s = self.model.spectral.unwrap_or(9);
        match self.model.preset.as_deref().unwrap_or("desk") {
            "desk" => Ok(StageConfig::desk(s)),
            "micro" => Ok(StageConfig::micro(s)),
            other => bail!(usage(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let mut c = TrainConfig::desk(9, t.lambda.unwrap_or(0.0125));
        c.model = self.stage_config()?;
        if let Some(v) = t.epochs {
            c.epochs = v;
        }
        c.max_steps = t.max_steps;
        if let Some(v) = t.batch {
            c.batch = v;
        }
        if let Some(v) = t.patch {
            c.patch = v;
        }
        if let Some(v) = t.lr_init {
            c.lr_init = v;
        }
        if let Some(v) = t.lr_final {
            c.lr_final = v;
        }
        if let Some(v) = t.seed {
            c.seed = v;
        }
        c.swin_baseline = t.swin_baseline.unwrap_or(false);
        c.uniform_shift = t.uniform_shift.unwrap_or(false);
        Ok(c)
    }
}

fn usage(msg: String) -> msnc_core::Error {
    msnc_core::Error::Usage(msg)
}
