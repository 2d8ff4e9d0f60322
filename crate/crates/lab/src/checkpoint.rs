//! Versioned JSON checkpoints of trained models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use sild::data::NoiseSchedule;
use sild::highnoise::{FullScore, HNHead};
use sild::manifold::LinearManifold;
use sild::stage1::Stage1Params;
use sild::stage2::RFHead;

use crate::config::RunConfig;
use crate::error::LabError;

pub const VERSION: &str = "sild-ckpt-v1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepCounts {
    pub stage1: usize,
    pub stage2: usize,
    pub hn: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub manifold: LinearManifold,
    pub schedule: NoiseSchedule,
    pub stage1: Stage1Params,
    pub rf: Option<RFHead>,
    pub hn: Option<HNHead>,
    pub gate_threshold: Option<f64>,
    pub steps: StepCounts,
}

impl Checkpoint {
    pub fn new(cfg: &RunConfig, manifold: &LinearManifold, stage1: &Stage1Params) -> Self {
        Self {
            version: VERSION.into(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
            manifold: manifold.clone(),
            schedule: cfg.schedule.clone(),
            stage1: stage1.clone(),
            rf: None,
            hn: None,
            gate_threshold: None,
            steps: StepCounts::default(),
        }
    }

    pub fn from_full_score(cfg: &RunConfig, manifold: &LinearManifold, fs: &FullScore, steps: StepCounts) -> Self {
        Self {
            rf: Some(fs.rf.clone()),
            hn: Some(fs.hn.clone()),
            gate_threshold: Some(fs.gate_threshold),
            steps,
            ..Self::new(cfg, manifold, &fs.stage1)
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint is always representable")
    }

    pub fn from_json_str(text: &str) -> Result<Self, LabError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| LabError::Config(format!("checkpoint: {e}")))?;
        match value.get("version").and_then(|v| v.as_str()) {
            Some(VERSION) => {}
            Some(other) => {
                return Err(LabError::Config(format!(
                    "checkpoint version {other:?} is not {VERSION:?}"
                )))
            }
            None => return Err(LabError::Config("checkpoint has no version tag".into())),
        }
        let ck: Checkpoint = serde_json::from_value(value)
            .map_err(|e| LabError::Config(format!("checkpoint: {e}")))?;
        if ck.config.hash() != ck.config_hash {
            return Err(LabError::Config("checkpoint config does not match its hash".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), LabError> {
        std::fs::write(path, self.to_json_string())
            .map_err(|source| LabError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| LabError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text)
    }

    /// The gated score, when all three heads are present.
    pub fn full_score(&self) -> Result<FullScore, LabError> {
        match (&self.rf, &self.hn, self.gate_threshold) {
            (Some(rf), Some(hn), Some(g)) => Ok(FullScore {
                stage1: self.stage1.clone(),
                rf: rf.clone(),
                hn: hn.clone(),
                gate_threshold: g,
                schedule: self.schedule.clone(),
            }),
            _ => Err(LabError::Config(
                "checkpoint lacks the Stage-2 or high-noise head needed for sampling".into(),
            )),
        }
    }

    /// Checks that the checkpoint was trained on the problem `cfg` builds.
    pub fn check_compatible(&self, cfg: &RunConfig, manifold: &LinearManifold) -> Result<(), LabError> {
        if self.manifold != *manifold {
            return Err(LabError::Config(
                "checkpoint manifold differs from the configured problem".into(),
            ));
        }
        if self.schedule != cfg.schedule {
            return Err(LabError::Config("checkpoint schedule differs from the configuration".into()));
        }
        if self.stage1.dim() != cfg.model.ambient_dim {
            return Err(LabError::Config(format!(
                "checkpoint dimension {} differs from configured {}",
                self.stage1.dim(),
                cfg.model.ambient_dim
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::toy_mog;
    use sild::numerics::{gauss_matrix, Rng};
    use sild::stage1::Stage1Init;

    fn small() -> (RunConfig, LinearManifold, Stage1Params, RFHead) {
        let mut cfg = toy_mog();
        cfg.model.ambient_dim = 12;
        cfg.model.intrinsic_dim = 3;
        let mut rng = Rng::new(9);
        let lin = LinearManifold::random(&mut rng, 12, 3, 5.0).unwrap();
        let init = Stage1Init { width: 7, sigma_w: None, alpha0: 1.0 };
        let p = Stage1Params::init(&mut rng, 12, 0.01, &init);
        let mut rf = RFHead::new(&mut rng, 12, 9, true);
        rf.u = gauss_matrix(&mut rng, 12, 9, 1.0);
        (cfg, lin, p, rf)
    }

    #[test]
    fn reload_is_bit_identical() {
        let (cfg, lin, p, rf) = small();
        let mut ck = Checkpoint::new(&cfg, &lin, &p);
        ck.rf = Some(rf.clone());
        let back = Checkpoint::from_json_str(&ck.to_json_string()).unwrap();
        assert_eq!(back, ck);
        let x = gauss_matrix(&mut Rng::new(3), 12, 16, 1.0);
        let a = p.forward_columns(&x);
        let b = back.stage1.forward_columns(&x);
        assert!(a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        let ha = rf.forward_columns(&x, 0.03);
        let hb = back.rf.unwrap().forward_columns(&x, 0.03);
        assert!(ha.iter().zip(hb.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let (cfg, lin, p, _) = small();
        let text = Checkpoint::new(&cfg, &lin, &p).to_json_string().replace(VERSION, "sild-ckpt-v0");
        assert!(matches!(Checkpoint::from_json_str(&text), Err(LabError::Config(_))));
    }

    #[test]
    fn tampered_config_is_detected() {
        let (cfg, lin, p, _) = small();
        let mut ck = Checkpoint::new(&cfg, &lin, &p);
        ck.config.seed += 1;
        assert!(Checkpoint::from_json_str(&ck.to_json_string()).is_err());
    }

    #[test]
    fn sampling_needs_all_heads() {
        let (cfg, lin, p, _) = small();
        assert!(Checkpoint::new(&cfg, &lin, &p).full_score().is_err());
    }
}
