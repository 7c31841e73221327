//! Flat JSON run configuration: the seven energy keys plus field-build keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::energy::EnergyParams;
use crate::error::Result;
use crate::lidar::ScanConfig;

pub const DEFAULT_VOXEL_SIZE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub w_occ: f64,
    pub sigma_occ: f64,
    pub w_unk: f64,
    pub sigma_unk: f64,
    pub lambda_free: f64,
    pub delta: f64,
    pub tau: f64,
    pub voxel_size: f64,
    pub scan: ScanConfig,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig::from_parts(EnergyParams::default(), DEFAULT_VOXEL_SIZE, ScanConfig::default())
    }
}

impl FieldConfig {
    pub fn from_parts(p: EnergyParams, voxel_size: f64, scan: ScanConfig) -> Self {
        FieldConfig {
            w_occ: p.w_occ,
            sigma_occ: p.sigma_occ,
            w_unk: p.w_unk,
            sigma_unk: p.sigma_unk,
            lambda_free: p.lambda_free,
            delta: p.delta,
            tau: p.tau,
            voxel_size,
            scan,
        }
    }

    pub fn energy(&self) -> EnergyParams {
        EnergyParams {
            w_occ: self.w_occ,
            sigma_occ: self.sigma_occ,
            w_unk: self.w_unk,
            sigma_unk: self.sigma_unk,
            lambda_free: self.lambda_free,
            delta: self.delta,
            tau: self.tau,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: FieldConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        FieldConfig::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.energy().validate()?;
        self.scan.validate()?;
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(crate::Error::Config("voxel_size must be positive".into()));
        }
        Ok(())
    }
}
