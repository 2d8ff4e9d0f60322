//! Run configuration, presets and file loading.
//!
//! A config file is TOML (or JSON when the file name ends in `.json`). Every
//! section is optional and every field has a default, so a file only lists
//! what it changes. Unknown keys are rejected. A top-level `preset` key picks
//! the base values that the rest of the file overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sild::data::NoiseSchedule;
use sild::optim::OptimizerKind;
use sild::par::Exec;
use sild::sampler::{SamplerConfig, SamplerKind};
use sild::stage1::{Stage1Init, Stage1TrainConfig};
use sild::stage2::TargetMode;

use crate::error::LabError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub ambient_dim: usize,
    pub intrinsic_dim: usize,
    pub components: usize,
    pub radius: f64,
    pub latent_std: f64,
    /// Gate radius for a subspace; `None` means `10 sqrt(k)`.
    pub effective_reach: Option<f64>,
    /// Size of the fixed training set; `None` draws fresh data every batch.
    pub n_train: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            ambient_dim: 100,
            intrinsic_dim: 5,
            components: 3,
            radius: 2.0,
            latent_std: 0.5,
            effective_reach: None,
            n_train: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub h1: f64,
    pub init: Stage1Init,
    pub train: Stage1TrainConfig,
    pub freeze_ab: bool,
    pub l2_w: f64,
    pub n_eval: usize,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Self {
            h1: 0.01,
            init: Stage1Init::default(),
            train: Stage1TrainConfig::default(),
            freeze_ab: false,
            l2_w: 0.0,
            n_eval: 2048,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    /// Noise variances the head is trained at. One value gives a head without
    /// time input.
    pub h2: Vec<f64>,
    pub width: usize,
    /// `None` uses `1e-4 tr(G)/(n m2)`.
    pub lambda: Option<f64>,
    pub n_samples: usize,
    pub target: TargetMode,
    /// Also run Adam on the ridge objective and log it.
    pub iterative: bool,
    pub iterative_lr: f64,
    pub iterative_steps: usize,
    pub iterative_batch: usize,
    pub n_eval: usize,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self {
            h2: vec![0.01],
            width: 200,
            lambda: None,
            n_samples: 1 << 19,
            target: TargetMode::Dsm,
            iterative: false,
            iterative_lr: 5e-3,
            iterative_steps: 2000,
            iterative_batch: 4096,
            n_eval: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HnSection {
    pub enabled: bool,
    pub modes: usize,
    pub width: usize,
    pub n_samples: usize,
    pub lambda: Option<f64>,
    /// `tau^2`; `None` derives it from the effective reach.
    pub gate_threshold: Option<f64>,
}

impl Default for HnSection {
    fn default() -> Self {
        Self {
            enabled: false,
            modes: 5,
            width: 256,
            n_samples: 8192,
            lambda: None,
            gate_threshold: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub config: SamplerConfig,
    pub n_samples: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { config: SamplerConfig::default(), n_samples: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub n_projections: usize,
    pub n_heldout: usize,
    pub n_probe: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { n_projections: 256, n_heldout: 256, n_probe: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateSweepSection {
    pub h1: Vec<f64>,
    pub seeds: Vec<u64>,
    pub ambient_dim: usize,
    pub width: usize,
    pub alpha0: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Steps at the smallest `h1`; larger `h1` get `(h1/h_min)^2` times more.
    pub base_steps: usize,
    pub log_every: usize,
}

impl Default for RateSweepSection {
    fn default() -> Self {
        Self {
            h1: vec![0.04, 0.02, 0.01],
            seeds: vec![0, 1, 2],
            ambient_dim: 20,
            width: 64,
            alpha0: 64.0,
            lr: 1e-5,
            batch_size: 1024,
            base_steps: 300,
            log_every: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2SweepSection {
    pub n: Vec<usize>,
    pub h1: Vec<f64>,
    pub h2: f64,
    /// Training-set size used in the `h1` sweep.
    pub n_for_h1: usize,
    pub seeds: Vec<u64>,
    pub stage1_steps: usize,
    pub n_eval: usize,
}

impl Default for Stage2SweepSection {
    fn default() -> Self {
        Self {
            n: vec![256, 1024, 4096],
            h1: vec![0.01, 0.02, 0.04],
            h2: 0.25,
            n_for_h1: 1 << 16,
            seeds: vec![0, 1, 2],
            stage1_steps: 400,
            n_eval: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub rate: RateSweepSection,
    pub stage2: Stage2SweepSection,
    /// Training-set sizes for the sampling sweep.
    pub n_train: Vec<usize>,
    pub sample_seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            rate: RateSweepSection::default(),
            stage2: Stage2SweepSection::default(),
            n_train: vec![512, 2048, 8192],
            sample_seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub seed: u64,
    pub out: Option<String>,
    pub exec: Exec,
    pub model: ModelConfig,
    pub schedule: NoiseSchedule,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub hn: HnSection,
    pub sampler: SamplerSection,
    pub metrics: MetricsSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        toy_mog()
    }
}

/// The fixed-noise toy: `d = 100`, `k = 5`, three latent modes on a radius-2
/// circle, latent std 0.5, `sigma = 0.1`, width 200, batch 4096.
pub fn toy_mog() -> RunConfig {
    RunConfig {
        preset: Some("toy-mog".into()),
        seed: 0,
        out: None,
        exec: Exec::Parallel,
        model: ModelConfig::default(),
        schedule: NoiseSchedule::fixed(0.1),
        stage1: Stage1Section {
            h1: 0.01,
            init: Stage1Init { width: 200, sigma_w: None, alpha0: 1.0 },
            train: Stage1TrainConfig {
                lr: 1e-3,
                batch_size: 4096,
                max_steps: 3000,
                optimizer: OptimizerKind::Adam,
                ..Stage1TrainConfig::default()
            },
            l2_w: 1e-4,
            ..Stage1Section::default()
        },
        stage2: Stage2Section { h2: vec![0.25], n_samples: 1 << 18, ..Stage2Section::default() },
        hn: HnSection::default(),
        sampler: SamplerSection::default(),
        metrics: MetricsSection::default(),
        sweep: SweepSection::default(),
    }
}

/// The same data on the VP schedule with all three heads, for sampling.
pub fn toy_mog_vp() -> RunConfig {
    let mut c = toy_mog();
    c.preset = Some("toy-mog-vp".into());
    c.schedule = NoiseSchedule::default();
    c.model.n_train = Some(8192);
    c.stage1.h1 = 0.003;
    c.stage1.train.max_steps = 1000;
    c.stage2.h2 = vec![1e-4, 3e-4, 1e-3, 3e-3, 0.01, 0.03, 0.1, 0.25];
    c.stage2.n_samples = 1 << 17;
    c.hn.enabled = true;
    c.hn.gate_threshold = Some(0.25);
    c.sampler.config.kind = SamplerKind::DdpmAncestral;
    c
}

pub const PRESETS: &[&str] = &["toy-mog", "toy-mog-vp"];

pub fn preset(name: &str) -> Result<RunConfig, LabError> {
    match name {
        "toy-mog" => Ok(toy_mog()),
        "toy-mog-vp" => Ok(toy_mog_vp()),
        other => Err(LabError::Config(format!(
            "unknown preset {other:?}; known presets: {}",
            PRESETS.join(", ")
        ))),
    }
}

enum Format {
    Toml,
    Json,
}

fn parse_value(text: &str, fmt: &Format) -> Result<serde_json::Value, LabError> {
    match fmt {
        Format::Toml => {
            let v: toml::Value =
                toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
            serde_json::to_value(v).map_err(|e| LabError::Config(e.to_string()))
        }
        Format::Json => serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string())),
    }
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    use serde_json::Value;
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    // a tagged block that names its kind replaces the base wholesale
                    Some(slot) if slot.is_object() && v.is_object() && v.get("kind").is_none() => {
                        merge(slot, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    fn from_value(v: serde_json::Value) -> Result<Self, LabError> {
        let base = match v.get("preset") {
            Some(serde_json::Value::String(name)) => preset(name)?,
            Some(serde_json::Value::Null) | None => toy_mog(),
            Some(other) => return Err(LabError::Config(format!("preset must be a string, got {other}"))),
        };
        let mut full = serde_json::to_value(&base).map_err(|e| LabError::Config(e.to_string()))?;
        merge(&mut full, v);
        let cfg: RunConfig =
            serde_json::from_value(full).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, LabError> {
        Self::from_value(parse_value(text, &Format::Toml)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self, LabError> {
        Self::from_value(parse_value(text, &Format::Json)?)
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    /// Configuration for a command: the file at `path` if any, with `preset`
    /// replacing the preset it names; otherwise the preset alone, falling back
    /// to `default_preset`.
    pub fn resolve(path: Option<&Path>, preset_name: Option<&str>, default_preset: &str) -> Result<Self, LabError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| LabError::Config(format!("{}: {e}", p.display())))?;
                let fmt = if p.extension().is_some_and(|e| e == "json") { Format::Json } else { Format::Toml };
                parse_value(&text, &fmt)?
            }
            None => serde_json::json!({}),
        };
        let obj = value
            .as_object_mut()
            .ok_or_else(|| LabError::Config("configuration must be a table".into()))?;
        if let Some(name) = preset_name {
            obj.insert("preset".into(), name.into());
        } else if !obj.contains_key("preset") {
            obj.insert("preset".into(), default_preset.into());
        }
        Self::from_value(value)
    }

    pub fn to_toml_string(&self) -> String {
        // serde_json keeps `None` as null, which TOML cannot hold; go
        // through toml's own serializer, which drops `None` fields
        toml::to_string_pretty(self).expect("config is always representable")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always representable")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    /// The output directory and the execution mode do not change results
    /// and are left out.
    pub fn hash(&self) -> String {
        let canon = RunConfig { out: None, exec: Exec::Sequential, ..self.clone() };
        let digest = Sha256::digest(serde_json::to_vec(&canon).expect("serializable"));
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: String| Err(LabError::Config(m));
        let m = &self.model;
        if m.ambient_dim == 0 || m.intrinsic_dim == 0 || m.intrinsic_dim > m.ambient_dim {
            return bad(format!(
                "need 0 < intrinsic_dim <= ambient_dim, got k = {}, d = {}",
                m.intrinsic_dim, m.ambient_dim
            ));
        }
        if m.components == 0 {
            return bad("model.components must be positive".into());
        }
        if m.components > 1 && m.intrinsic_dim < 2 {
            return bad("ring layout of several modes needs intrinsic_dim >= 2".into());
        }
        if !(m.latent_std > 0.0) {
            return bad("model.latent_std must be positive".into());
        }
        if !(self.stage1.h1 > 0.0 && self.stage1.h1 < 1.0) {
            return bad(format!("stage1.h1 = {} must lie in (0, 1)", self.stage1.h1));
        }
        if self.stage1.init.width == 0 || self.stage2.width == 0 {
            return bad("network widths must be positive".into());
        }
        if self.stage2.h2.is_empty() || self.stage2.h2.iter().any(|h| !(*h > 0.0)) {
            return bad("stage2.h2 needs at least one positive value".into());
        }
        if let Some(l) = self.stage2.lambda {
            if !(l > 0.0) {
                return bad("stage2.lambda must be positive".into());
            }
        }
        if self.stage1.train.batch_size == 0 || self.stage1.train.log_every == 0 {
            return bad("stage1 batch size and log interval must be positive".into());
        }
        if self.hn.enabled && (self.hn.modes == 0 || self.hn.width == 0) {
            return bad("hn.modes and hn.width must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for name in PRESETS {
            let c = preset(name).unwrap();
            let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
            assert_eq!(back, c);
            let back = RunConfig::from_json_str(&c.to_json_string()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn partial_file_overrides_preset() {
        let c = RunConfig::from_toml_str(
            "preset = \"toy-mog\"\nseed = 7\n[stage1]\nh1 = 0.02\n[stage1.train]\nmax_steps = 10\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.stage1.h1, 0.02);
        assert_eq!(c.stage1.train.max_steps, 10);
        assert_eq!(c.stage1.train.batch_size, 4096);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("sed = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[stage1]\nh = 0.1\n").is_err());
        assert!(RunConfig::from_toml_str("preset = \"nope\"\n").is_err());
        let vp = RunConfig::from_toml_str("[schedule]\nkind = \"vp_linear\"\nbeta_min = 0.1\nbeta_max = 20.0\nhorizon = 1.0\n");
        assert!(vp.unwrap().schedule.is_vp());
    }

    #[test]
    fn hash_tracks_content() {
        let a = toy_mog();
        let mut b = toy_mog();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
