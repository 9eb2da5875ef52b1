//! The single configuration document every command reads.
//!
//! A config file is TOML with one section per stage. Every key is optional;
//! missing keys take the defaults below. Command-line overrides of the form
//! `section.key=value` are applied to the parsed document before it is
//! deserialized, so they go through exactly the same validation as file
//! values.
//!
//! The run seed lives at the top level. It is copied into every seeded stage
//! (synthesis, network initialization, training, splitting) when the config
//! is resolved. Per-section seed keys may only repeat that value, so there
//! is exactly one place to set it.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embednet::NetworkSpec;
use crate::error::{Error, Result};
use crate::model::CameraIntrinsics;
use crate::saliency::DropMode;
use crate::segmentation::SegmentationParams;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

/// Environment variable consulted when no `--seed` is given.
pub const SEED_ENV: &str = "HERDID_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloudConfig {
    /// Farthest-point-sampled size of every network input.
    pub points: usize,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self { points: 2048 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train fraction of the random split.
    pub ratio: f64,
    /// Temporal neighbor-removal radius in frames.
    pub n: u64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratio: 0.7,
            n: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GalleryConfig {
    /// Neighbors consulted by the kNN vote.
    pub k: usize,
}

impl Default for GalleryConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyConfig {
    /// Points removed per dropping round.
    pub drop_count: usize,
    pub max_iters: usize,
    pub mode: DropMode,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            drop_count: 10,
            max_iters: 100,
            mode: DropMode::Saliency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub camera: CameraIntrinsics,
    pub segmentation: SegmentationParams,
    pub cloud: CloudConfig,
    pub synth: SynthConfig,
    /// `class_count = 0` sizes the classifier from the training identities.
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub gallery: GalleryConfig,
    pub saliency: SaliencyConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            camera: CameraIntrinsics::default(),
            segmentation: SegmentationParams::default(),
            cloud: CloudConfig::default(),
            synth: SynthConfig::default(),
            network: NetworkSpec {
                class_count: 0,
                ..NetworkSpec::default()
            },
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            gallery: GalleryConfig::default(),
            saliency: SaliencyConfig::default(),
        }
    }
}

const SECTION_SEEDS: [(&str, &str); 3] = [("synth", "seed"), ("train", "seed"), ("network", "init_seed")];

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (`mode=random` works without quotes).
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override to a parsed document.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidParam(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::InvalidParam(format!("override `{assignment}` has an empty key")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = table;
    for key in parents {
        let entry = node
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidParam(format!("`{key}` in `{path}` is not a section")))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Config {
    /// Builds a config from file text plus overrides, then resolves `seed`
    /// (when given) into every seeded stage.
    pub fn from_parts(text: Option<&str>, overrides: &[String], seed: Option<u64>) -> Result<Config> {
        let mut table: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| Error::InvalidParam(format!("config: {e}")))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let run_seed = match seed {
            Some(s) => s,
            None => match table.get("seed") {
                Some(v) => v
                    .as_integer()
                    .and_then(|i| u64::try_from(i).ok())
                    .ok_or_else(|| Error::InvalidParam("`seed` must be an unsigned integer".into()))?,
                None => Config::default().seed,
            },
        };
        for (section, key) in SECTION_SEEDS {
            let Some(s) = table.get_mut(section).and_then(|s| s.as_table_mut()) else {
                continue;
            };
            if let Some(v) = s.remove(key) {
                if v.as_integer() != i64::try_from(run_seed).ok() {
                    return Err(Error::InvalidParam(format!(
                        "`{section}.{key}` cannot differ from the run seed; set the top-level `seed`"
                    )));
                }
            }
        }
        let mut config: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidParam(format!("config: {}", e.message())))?;
        config.seed = run_seed;
        config.resolve();
        config.validate()?;
        Ok(config)
    }

    /// Copies the run seed and the shared camera, segmentation and cloud
    /// settings into the stages that consume them.
    pub fn resolve(&mut self) {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.network.init_seed = self.seed;
        self.split.seed = self.seed;
        self.synth.camera.intrinsics = self.camera;
        self.synth.segmentation = self.segmentation.clone();
        self.synth.points = self.cloud.points;
    }

    pub fn validate(&self) -> Result<()> {
        self.segmentation.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        let mut spec = self.network.clone();
        spec.class_count = spec.class_count.max(1);
        spec.validate()?;
        if self.cloud.points == 0 {
            return Err(Error::InvalidParam("cloud.points must be >= 1".into()));
        }
        if !(self.split.ratio > 0.0 && self.split.ratio < 1.0) {
            return Err(Error::InvalidParam(format!("split.ratio {} outside (0, 1)", self.split.ratio)));
        }
        if self.gallery.k == 0 {
            return Err(Error::InvalidParam("gallery.k must be >= 1".into()));
        }
        if self.saliency.drop_count == 0 {
            return Err(Error::InvalidParam("saliency.drop_count must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical text of the resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`Config::to_toml`], lowercase hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Seed precedence: explicit flag, then `HERDID_SEED`, then the config file.
pub fn seed_from(flag: Option<u64>, env: Option<&str>) -> Result<Option<u64>> {
    match (flag, env) {
        (Some(s), _) => Ok(Some(s)),
        (None, Some(v)) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidParam(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        (None, None) => Ok(None),
    }
}
