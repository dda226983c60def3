//! Run configuration: one TOML document covering every stage.
//!
//! Unknown keys are rejected. Missing keys take the default, which is the
//! full-scale setup; [`RunConfig::desk`] is a reduced schedule that finishes
//! in minutes on one core.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discrepancy::QuantileFitConfig;
use crate::error::{CcdError, Result};
use crate::profile::{DrivingStyle, ProfileConfig, StartPose};
use crate::road::{HillConfig, SpectralConfig};
use crate::trainer::warmstart::{NetConfig, WarmStartConfig};
use crate::trainer::{PpoConfig, RewardWeights};
use crate::vehicle::{DesignBounds, Plant, RealSystemPerturbation, SuspensionDesign, VehicleParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoadConfig {
    pub spectral: SpectralConfig,
    /// Map size (m) along X and Y.
    pub extent: [f64; 2],
    pub resolution: f64,
    pub hill: Option<HillConfig>,
}

impl Default for RoadConfig {
    fn default() -> Self {
        Self { spectral: SpectralConfig::default(), extent: [2000.0, 2000.0], resolution: 1.0, hill: Some(HillConfig::default()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfilesConfig {
    pub mild: ProfileConfig,
    pub aggressive: ProfileConfig,
    pub start: StartPose,
}

impl Default for ProfilesConfig {
    fn default() -> Self {
        Self {
            mild: ProfileConfig::for_style(DrivingStyle::Mild),
            aggressive: ProfileConfig::for_style(DrivingStyle::Aggressive),
            start: StartPose::default(),
        }
    }
}

impl ProfilesConfig {
    pub fn get(&self, style: DrivingStyle) -> &ProfileConfig {
        match style {
            DrivingStyle::Mild => &self.mild,
            DrivingStyle::Aggressive => &self.aggressive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct DiscrepancyConfig {
    pub fit: QuantileFitConfig,
    /// Reset the fed-back error to zero every this many steps during
    /// updated-model rollouts (0: never).
    pub error_reset: usize,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub dt: f64,
    pub drivers: Vec<DrivingStyle>,
    pub vehicle: VehicleParams,
    /// Emulate the physical vehicle with `perturbation`; when false the
    /// "real" plant equals the nominal one.
    pub perturbed: bool,
    pub perturbation: RealSystemPerturbation,
    /// Actuator force limit (N) on the physical vehicle.
    pub saturation: Option<f64>,
    pub bounds: DesignBounds,
    pub initial_design: SuspensionDesign,
    pub road: RoadConfig,
    pub profiles: ProfilesConfig,
    pub reward: RewardWeights,
    pub warmstart: WarmStartConfig,
    pub nets: NetConfig,
    pub first_ccd: PpoConfig,
    /// Fine-tuning of the deployed policy on the physical vehicle.
    pub fine_tune: PpoConfig,
    pub second_ccd: PpoConfig,
    pub discrepancy: DiscrepancyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dt: crate::vehicle::DEFAULT_DT,
            drivers: DrivingStyle::ALL.to_vec(),
            vehicle: VehicleParams::default(),
            perturbed: true,
            perturbation: RealSystemPerturbation::default(),
            saturation: None,
            bounds: DesignBounds::default(),
            initial_design: SuspensionDesign::INITIAL,
            road: RoadConfig::default(),
            profiles: ProfilesConfig::default(),
            reward: RewardWeights::default(),
            warmstart: WarmStartConfig::default(),
            nets: NetConfig::default(),
            first_ccd: PpoConfig::default(),
            fine_tune: PpoConfig { max_epochs: 50, patience: 50, ..PpoConfig::default() },
            second_ccd: PpoConfig::default(),
            discrepancy: DiscrepancyConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reduced schedule: small networks, 100 epochs per co-design stage.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.nets.policy_hidden = vec![64, 64, 64];
        c.nets.value_hidden = vec![64, 64, 64];
        c.warmstart.dataset_episodes = 10;
        c.first_ccd.max_epochs = 100;
        c.second_ccd.max_epochs = 100;
        c.fine_tune.max_epochs = 50;
        c.discrepancy.fit.stride = 2;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            other => Err(CcdError::invalid(format!("unknown preset {other:?} (expected full or desk)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CcdError::MissingPath(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(CcdError::invalid("dt must be positive"));
        }
        if self.drivers.is_empty() {
            return Err(CcdError::invalid("at least one driver style is required"));
        }
        self.vehicle.validate()?;
        self.perturbation.validate()?;
        self.bounds.validate()?;
        if !self.bounds.contains(&self.initial_design) {
            return Err(CcdError::invalid("initial design lies outside the design bounds"));
        }
        if let Some(s) = self.saturation {
            if !(s > 0.0) {
                return Err(CcdError::invalid("saturation must be positive"));
            }
        }
        self.road.spectral.validate()?;
        if !(self.road.resolution > 0.0) || self.road.extent.iter().any(|e| !(*e > 0.0)) {
            return Err(CcdError::invalid("road extent and resolution must be positive"));
        }
        self.profiles.mild.validate()?;
        self.profiles.aggressive.validate()?;
        self.reward.validate()?;
        for (name, p) in [("first_ccd", &self.first_ccd), ("fine_tune", &self.fine_tune), ("second_ccd", &self.second_ccd)] {
            p.validate().map_err(|e| CcdError::invalid(format!("{name}: {e}")))?;
        }
        if self.nets.policy_hidden.is_empty() || self.nets.value_hidden.is_empty() || self.nets.policy_hidden.iter().chain(&self.nets.value_hidden).any(|w| *w == 0) {
            return Err(CcdError::invalid("network hidden layers must be nonempty and positive"));
        }
        if !(self.nets.action_scale > 0.0 && self.nets.std_scale > 0.0) {
            return Err(CcdError::invalid("action_scale and std_scale must be positive"));
        }
        let ws = &self.warmstart;
        if ws.bo.budget == 0 || ws.bo.n_init == 0 || ws.dataset_episodes == 0 || ws.dataset_len == 0 || ws.episode_len == 0 {
            return Err(CcdError::invalid("warm-start budgets must be positive"));
        }
        if ws.gain_bounds.iter().any(|b| !(b[0] < b[1])) {
            return Err(CcdError::invalid("gain bounds need lo < hi"));
        }
        let fit = &self.discrepancy.fit;
        if fit.hidden.is_empty() || fit.epochs == 0 || fit.batch == 0 || fit.stride == 0 || !(fit.lr > 0.0) {
            return Err(CcdError::invalid("discrepancy fit settings must be positive"));
        }
        Ok(())
    }

    pub fn nominal_plant(&self) -> Plant {
        Plant::nominal(self.vehicle.clone())
    }

    /// The emulated physical vehicle (or the nominal one when unperturbed).
    pub fn real_plant(&self) -> Plant {
        let p = if self.perturbed { Plant::real(&self.vehicle, self.perturbation.clone()) } else { Plant::nominal(self.vehicle.clone()) };
        p.with_saturation(self.saturation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash() {
        let c = RunConfig::desk();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        assert_ne!(RunConfig::default().hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn partial_documents_take_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[first_ccd]\nmax_epochs = 5\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.first_ccd.max_epochs, 5);
        assert_eq!(c.first_ccd.gamma, 0.99);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sed = 3\n").is_err());
        assert!(RunConfig::from_toml("[first_ccd]\ngama = 0.9\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let e = RunConfig::from_toml("[first_ccd]\nclip_eps = 1.5\n").unwrap_err();
        assert!(e.is_validation());
    }
}
