//! Pipeline configuration: sectioned key = value (TOML syntax), unknown
//! keys rejected, and every run writes the fully resolved config next to
//! its outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::InstanceMaskMode;
use crate::error::{Error, Result};
use crate::transfer::{MaskLossMode, MaskPairing};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub patch_size: u32,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 7,
            patch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Patches per domain.
    pub he_count: u32,
    pub cd20_count: u32,
    /// Maximum TLS clusters per patch; the actual count varies 0..=max.
    pub max_clusters: u32,
    /// Nuclei per TLS cluster.
    pub cluster_density: u32,
    /// Scattered nuclei at 64 px (scaled by canvas area).
    pub nucleus_count_64: u32,
    /// CD20 scenes carry this fraction of the H&E scatter.
    pub cd20_scatter_divisor: u32,
    pub rbc_blobs_64: u32,
    pub noise_sigma: f64,
    pub split_ratio: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            he_count: 150,
            cd20_count: 150,
            max_clusters: 2,
            cluster_density: 40,
            nucleus_count_64: 52,
            cd20_scatter_divisor: 3,
            rbc_blobs_64: 2,
            noise_sigma: 6.0,
            split_ratio: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateSection {
    pub thresholds: usize,
    pub working_index: usize,
    /// Pooled histogram over this many TLS-rich training patches.
    pub sample_patches: usize,
    /// Speckle cleanup for H&E masks at 64 px (area-scaled).
    pub he_min_component_64: u32,
    /// CD20 cleanup as a fraction of the canvas (drops stray nuclei).
    pub cd20_min_component_frac: f64,
    pub fill_holes: bool,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        CalibrateSection {
            thresholds: 7,
            working_index: 5,
            sample_patches: 8,
            he_min_component_64: 8,
            cd20_min_component_frac: 0.05,
            fill_holes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub epochs: u32,
    pub lambda_cycle: f64,
    pub lambda_mask: f64,
    pub mask_loss_mode: MaskLossMode,
    pub mask_pairing: MaskPairing,
    pub soft_temperature: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub base_channels: usize,
    pub residual_blocks: usize,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            epochs: 12,
            lambda_cycle: 10.0,
            lambda_mask: 5.0,
            mask_loss_mode: MaskLossMode::L1,
            mask_pairing: MaskPairing::CrossDomainNucleus,
            soft_temperature: 5.0,
            learning_rate: 2e-4,
            batch_size: 4,
            base_channels: 8,
            residual_blocks: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub base_channels: usize,
    pub anchor_fractions: [f64; 2],
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub positive_weight: f64,
    pub box_loss_weight: f64,
    pub instance_mask_mode: InstanceMaskMode,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection {
            epochs: 25,
            batch_size: 8,
            learning_rate: 1e-3,
            base_channels: 12,
            anchor_fractions: [0.4, 0.65],
            score_threshold: 0.5,
            nms_iou: 0.5,
            positive_weight: 8.0,
            box_loss_weight: 2.0,
            instance_mask_mode: InstanceMaskMode::Box,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub match_iou: f64,
    /// Seed of the fixed random-weight feature embedder.
    pub fid_extractor_seed: u64,
    /// Detector seeds tried for the combined-vs-single comparison.
    pub detection_seeds: u32,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            match_iou: 0.5,
            fid_extractor_seed: 0xF1D,
            detection_seeds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub corpus: CorpusSection,
    pub calibrate: CalibrateSection,
    pub transfer: TransferSection,
    pub detector: DetectorSection,
    pub evaluate: EvaluateSection,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.patch_size < 64 || self.run.patch_size % 16 != 0 {
            return Err(Error::Config(format!(
                "patch_size must be >= 64 and divisible by 16, got {}",
                self.run.patch_size
            )));
        }
        if !(0.0 < self.corpus.split_ratio && self.corpus.split_ratio < 1.0) {
            return Err(Error::Config("split_ratio must be in (0,1)".into()));
        }
        if self.calibrate.working_index >= self.calibrate.thresholds {
            return Err(Error::Config(
                "working_index must be < thresholds".into(),
            ));
        }
        if self.evaluate.detection_seeds == 0 {
            return Err(Error::Config("detection_seeds must be >= 1".into()));
        }
        Ok(())
    }

    /// Fully resolved TOML, written next to every run's outputs.
    pub fn to_resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save_resolved(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_resolved_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Stable short hash of the resolved config, used in run directory names.
    pub fn short_hash(&self) -> String {
        let text = self.to_resolved_toml().unwrap_or_default();
        // FNV-1a, enough for a directory suffix.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_resolved_toml().unwrap();
        let back = PipelineConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.short_hash(), back.short_hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = PipelineConfig::parse("[run]\nseed = 1\nbogus_key = 2\n").unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("bogus_key"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(PipelineConfig::parse("[nonexistent_section]\nx = 1\n").is_err());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg = PipelineConfig::parse("[transfer]\nlambda_mask = 0.0\n").unwrap();
        assert_eq!(cfg.transfer.lambda_mask, 0.0);
        assert_eq!(cfg.transfer.epochs, TransferSection::default().epochs);
        assert_eq!(cfg.run.seed, 7);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(PipelineConfig::parse("[run]\npatch_size = 48\n").is_err());
        assert!(PipelineConfig::parse("[corpus]\nsplit_ratio = 1.5\n").is_err());
        assert!(PipelineConfig::parse("[calibrate]\nworking_index = 9\n").is_err());
    }
}
