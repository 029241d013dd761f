//! Run configuration: one TOML file, every field optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::adapt::WarmupPlan;
use crate::datamodel::Provenance;
use crate::detector::DetectorSpec;
use crate::error::{Error, Result};
use crate::eval::ApMode;
use crate::toyworld::WorldConfig;
use crate::wsod::{WsodConfig, WsodHyper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ap_mode: ApMode,
    pub iou_threshold: f64,
    /// Detections below this score are not scored.
    pub score_threshold: f64,
    /// Per-class NMS applied to detector outputs.
    pub nms_threshold: f64,
    pub tide_fg_iou: f64,
    pub tide_bg_iou: f64,
    /// Only detections at or above this score enter the error breakdown.
    pub tide_score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ap_mode: ApMode::AllPoint,
            iou_threshold: 0.5,
            score_threshold: 0.01,
            nms_threshold: 0.5,
            tide_fg_iou: 0.5,
            tide_bg_iou: 0.1,
            tide_score_threshold: 0.3,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            self.iou_threshold,
            self.score_threshold,
            self.nms_threshold,
            self.tide_fg_iou,
            self.tide_bg_iou,
            self.tide_score_threshold,
        ];
        if unit.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("evaluation thresholds must lie in [0, 1]".into()));
        }
        if self.tide_bg_iou > self.tide_fg_iou {
            return Err(Error::Config("tide_bg_iou must not exceed tide_fg_iou".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; not part of any hash.
    pub out: PathBuf,
    pub world: WorldConfig,
    pub detector: DetectorSpec,
    pub warmup: WarmupPlan,
    /// Warm-up checkpoint used by the WSOD stage, 1-based; the last one when
    /// unset.
    pub fsod_stage: Option<usize>,
    pub wsod: WsodConfig,
    pub wsod_train: WsodHyper,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("runs/default"),
            world: WorldConfig::default(),
            detector: DetectorSpec::default(),
            warmup: WarmupPlan::default(),
            fsod_stage: None,
            wsod: WsodConfig::default(),
            wsod_train: WsodHyper::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn digest(v: &Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

fn value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("config sections serialize")
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// First key path of `user` missing from `known`.
fn unknown_key(user: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => return Some(path),
            (toml::Value::Table(u), Some(toml::Value::Table(n))) => {
                if let Some(p) = unknown_key(u, n, &path) {
                    return Some(p);
                }
            }
            _ => {}
        }
    }
    None
}

impl RunConfig {
    /// Parse a config file; missing fields at any depth take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let user: toml::Table = toml::from_str(text).map_err(|e| err(&e))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| err(&e))?;
        merge(&mut merged, user.clone());
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e| err(&e))?;
        let known = toml::Table::try_from(&cfg).map_err(|e| err(&e))?;
        if let Some(k) = unknown_key(&user, &known, "") {
            return Err(Error::Config(format!("unknown config field `{k}`")));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.detector.validate()?;
        self.warmup.validate()?;
        self.wsod.validate()?;
        self.eval.validate()?;
        if self.detector.num_classes != self.world.num_classes()
            || self.detector.width != self.world.width
            || self.detector.height != self.world.height
        {
            return Err(Error::Config("detector classes and size must match the world".into()));
        }
        if let Some(s) = self.fsod_stage {
            if s == 0 || s > self.warmup.stages.len() {
                return Err(Error::Config(format!(
                    "fsod_stage {s} outside 1..={}",
                    self.warmup.stages.len()
                )));
            }
        }
        Ok(())
    }

    /// 1-based index of the warm-up checkpoint feeding the WSOD stage.
    pub fn source_stage(&self) -> usize {
        self.fsod_stage.unwrap_or(self.warmup.stages.len())
    }

    /// Hash of the generated datasets' inputs.
    pub fn data_hash(&self) -> String {
        digest(&json!({"seed": self.seed, "world": value(&self.world)}))
    }

    /// Hash of the warm-up checkpoints' inputs.
    pub fn warmup_hash(&self) -> String {
        digest(&json!({
            "data": self.data_hash(),
            "detector": value(&self.detector),
            "warmup": value(&self.warmup),
        }))
    }

    /// Hash of a WSOD checkpoint's inputs.
    pub fn wsod_hash(&self) -> String {
        digest(&json!({
            "warmup": self.warmup_hash(),
            "fsod_stage": self.source_stage(),
            "wsod": value(&self.wsod),
            "wsod_train": value(&self.wsod_train),
        }))
    }

    /// Hash of everything except the output directory.
    pub fn full_hash(&self) -> String {
        let mut v = value(self);
        if let Value::Object(m) = &mut v {
            m.remove("out");
        }
        digest(&v)
    }

    pub fn provenance(&self, config_hash: String) -> Provenance {
        Provenance {
            config_hash,
            seed: self.seed,
        }
    }
}

/// Fail unless `found` carries the expected hash.
pub fn verify(path: &Path, found: Option<&Provenance>, expected: &str) -> Result<()> {
    match found {
        Some(p) if p.config_hash == expected => Ok(()),
        other => Err(Error::HashMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: other.map(|p| p.config_hash.clone()).unwrap_or_else(|| "none".into()),
        }),
    }
}
