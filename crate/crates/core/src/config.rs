//! Run configuration: model/training hyperparameters with validated
//! construction and named size profiles.

use crate::cwg::CwgFusion;
use crate::error::{Error, Result};
use crate::sga::SimilarityMode;

/// Named model-size presets. `Mini` keeps everything small enough for
/// finite-difference gradient checks; `Desk` is the default end-to-end size;
/// `Paper` mirrors the published hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Mini,
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini" => Ok(Profile::Mini),
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile '{other}'"))),
        }
    }
}

/// Everything a training run needs to be reproducible.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Number of ROIs per sample (rows of the fused matrix).
    pub roi_count: usize,
    /// Fused feature columns per ROI.
    pub feature_dim: usize,
    /// Encoder embedding width.
    pub embed_dim: usize,
    /// Transformer encoder depth.
    pub encoder_depth: usize,
    /// Attention heads in the encoder.
    pub encoder_heads: usize,
    /// Attention heads in the graph-convolution layers.
    pub gga_heads: usize,
    /// Number of diagnostic classes.
    pub classes: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    /// Weight-entropy regularization strength in the generator loss.
    pub alpha: f64,
    pub seed: u64,
    pub folds: usize,
    pub similarity_mode: SimilarityMode,
    pub cwg_fusion: CwgFusion,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            roi_count: 16,
            feature_dim: 10,
            embed_dim: 16,
            encoder_depth: 2,
            encoder_heads: 4,
            gga_heads: 4,
            classes: 3,
            batch_size: 64,
            epochs: 500,
            learning_rate: 0.001,
            dropout_rate: 0.5,
            alpha: 0.5,
            seed: 231,
            folds: 10,
            similarity_mode: SimilarityMode::CentralityKernel,
            cwg_fusion: CwgFusion::PerBranchColumn,
        }
    }
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let base = TrainConfig::default();
        match profile {
            Profile::Mini => TrainConfig {
                roi_count: 12,
                feature_dim: 10,
                embed_dim: 8,
                encoder_depth: 2,
                encoder_heads: 2,
                gga_heads: 2,
                classes: 3,
                batch_size: 4,
                epochs: 5,
                dropout_rate: 0.0,
                ..base
            },
            Profile::Desk => TrainConfig {
                roi_count: 16,
                embed_dim: 16,
                encoder_depth: 2,
                encoder_heads: 4,
                gga_heads: 4,
                batch_size: 16,
                epochs: 20,
                dropout_rate: 0.1,
                ..base
            },
            Profile::Paper => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.roi_count < 2 {
            return Err(Error::Config("roi_count must be at least 2".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 (batch statistics are undefined below that)".into(),
            ));
        }
        if self.embed_dim == 0 || self.embed_dim % self.encoder_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of encoder_heads {}",
                self.embed_dim, self.encoder_heads
            )));
        }
        if (2 * self.embed_dim) % self.gga_heads != 0 || (4 * self.embed_dim) % self.gga_heads != 0
        {
            return Err(Error::Config(format!(
                "graph layer widths {} and {} must be divisible by gga_heads {}",
                2 * self.embed_dim,
                4 * self.embed_dim,
                self.gga_heads
            )));
        }
        if self.epochs == 0 || self.folds < 2 {
            return Err(Error::Config("epochs must be > 0 and folds >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_published_settings() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 231);
        assert_eq!(cfg.epochs, 500);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.dropout_rate, 0.5);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.folds, 10);
    }

    #[test]
    fn all_profiles_validate() {
        for p in [Profile::Mini, Profile::Desk, Profile::Paper] {
            TrainConfig::for_profile(p).validate().unwrap();
        }
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.embed_dim = 10;
        cfg.encoder_heads = 4;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn profile_parse_round_trip() {
        assert_eq!("mini".parse::<Profile>().unwrap(), Profile::Mini);
        assert_eq!("desk".parse::<Profile>().unwrap(), Profile::Desk);
        assert_eq!("paper".parse::<Profile>().unwrap(), Profile::Paper);
        assert!("huge".parse::<Profile>().is_err());
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg = TrainConfig::for_profile(Profile::Mini);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.roi_count, cfg.roi_count);
        assert_eq!(back.similarity_mode, cfg.similarity_mode);
        assert_eq!(back.cwg_fusion, cfg.cwg_fusion);
    }
}
