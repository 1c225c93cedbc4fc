//! Experiment configuration: JSON-serializable, with defaults embedded here
//! and every field overridable from a config file or CLI flags.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::diffusion::DenoiserTrainConfig;
use crate::error::{Error, Result};
use crate::guidance::{GradMode, GuidanceConfig};
use crate::models::ModelTrainConfig;
use crate::rng::sha256_hex;
use crate::schedule::ScheduleKind;
use crate::synth::{Balance, GeneratorKnobs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The full iterated method.
    DiffIce,
    /// Single iteration of the same loop.
    DiffIce1,
    /// Single iteration with gradients taken w.r.t. the noisy iterate.
    DiffIce1Xt,
}

impl Method {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Method::DiffIce => "diff_ice",
            Method::DiffIce1 => "diff_ice_1",
            Method::DiffIce1Xt => "diff_ice_1_xt",
        }
    }

    /// Specialize the base guidance settings for this method.
    pub fn specialize(&self, base: &GuidanceConfig) -> GuidanceConfig {
        match self {
            Method::DiffIce => base.clone(),
            Method::DiffIce1 => GuidanceConfig {
                iterations: 1,
                ..base.clone()
            },
            Method::DiffIce1Xt => GuidanceConfig {
                iterations: 1,
                grad_mode: GradMode::Noisy,
                ..base.clone()
            },
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diff_ice" => Ok(Method::DiffIce),
            "diff_ice_1" => Ok(Method::DiffIce1),
            "diff_ice_1_xt" => Ok(Method::DiffIce1Xt),
            other => Err(Error::invalid(format!(
                "unknown method `{other}` (expected diff_ice, diff_ice_1, diff_ice_1_xt)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub balance: Balance,
    pub knobs: GeneratorKnobs,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 800,
            n_val: 90,
            n_test: 140,
            balance: Balance::paper(),
            knobs: GeneratorKnobs::default(),
        }
    }
}

impl DataConfig {
    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub t_train: usize,
    pub t_sample: usize,
    pub schedule: ScheduleKind,
    pub train: DenoiserTrainConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            t_train: 1000,
            t_sample: 400,
            schedule: ScheduleKind::default(),
            train: DenoiserTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub segmenter: ModelTrainConfig,
    pub predictor: ModelTrainConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            segmenter: ModelTrainConfig {
                iterations: 700,
                batch_size: 8,
                ..ModelTrainConfig::default()
            },
            predictor: ModelTrainConfig {
                iterations: 500,
                weight_decay: 0.01,
                input_noise: 0.08,
                ..ModelTrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub dim: usize,
    /// Input noise during training; the two instances use different levels
    /// and seeds so guidance cannot trivially optimize the evaluation net.
    pub guidance_noise: f64,
    pub evaluation_noise: f64,
    /// Feature magnitude of the guidance instance; sets how hard the
    /// squared-distance proximity term pulls relative to the classifier.
    pub guidance_output_scale: f64,
    pub train: ModelTrainConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            dim: 64,
            guidance_noise: 0.03,
            evaluation_noise: 0.06,
            guidance_output_scale: 2.0,
            train: ModelTrainConfig {
                iterations: 400,
                ..ModelTrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub methods: Vec<Method>,
    /// Cap on the number of NSP test images; `None` runs all of them.
    pub max_images: Option<usize>,
    pub jobs: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            methods: vec![Method::DiffIce],
            max_images: None,
            jobs: 1,
        }
    }
}

/// The ablation grid: noise entry levels, the over-strong classifier weight,
/// and the proximity-term on/off axis, each over the same test subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub taus: Vec<usize>,
    pub lambda_c_heavy: f64,
    pub include_lambda_heavy: bool,
    pub include_lp_off: bool,
    pub max_images: Option<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            taus: vec![80, 120, 160, 200],
            lambda_c_heavy: 400.0,
            include_lambda_heavy: true,
            include_lp_off: true,
            max_images: Some(24),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub classifier: ClassifierConfig,
    pub oracle: ModelTrainConfig,
    pub features: FeatureConfig,
    pub guidance: GuidanceConfig,
    pub generate: GenerateConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 17,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            diffusion: DiffusionConfig::default(),
            classifier: ClassifierConfig::default(),
            oracle: ModelTrainConfig {
                iterations: 500,
                ..ModelTrainConfig::default()
            },
            features: FeatureConfig::default(),
            guidance: GuidanceConfig::default(),
            generate: GenerateConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::invalid("train and test splits must be non-empty"));
        }
        if self.diffusion.t_sample == 0 || self.diffusion.t_sample > self.diffusion.t_train {
            return Err(Error::invalid(
                "t_sample must lie in 1..=t_train",
            ));
        }
        self.guidance.validate(self.diffusion.t_sample)?;
        for &tau in &self.ablation.taus {
            if tau == 0 || tau > self.diffusion.t_sample {
                return Err(Error::invalid(format!(
                    "ablation tau {tau} outside 1..={}",
                    self.diffusion.t_sample
                )));
            }
        }
        if self.generate.jobs == 0 {
            return Err(Error::invalid("jobs must be at least 1"));
        }
        Ok(())
    }

    /// Hash identifying the experiment in manifests. Execution-only fields
    /// (output directory, worker count) are normalized away: they cannot
    /// change any result byte, so they must not change the identity either.
    pub fn content_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.generate.jobs = 1;
        sha256_hex(&serde_json::to_vec(&canonical).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::CLASS_SP;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.diffusion.t_train, 1000);
        assert_eq!(cfg.diffusion.t_sample, 400);
        assert_eq!(cfg.guidance.iterations, 5);
        assert_eq!(cfg.guidance.tau, 120);
        assert_eq!(cfg.guidance.lambda_p, 30.0);
        assert_eq!(cfg.guidance.lambda_c_candidates, vec![40.0, 60.0, 80.0]);
        assert_eq!(cfg.guidance.target, CLASS_SP);
        assert_eq!(cfg.ablation.taus, vec![80, 120, 160, 200]);
        assert_eq!(cfg.ablation.lambda_c_heavy, 400.0);
        assert_eq!(
            cfg.diffusion.schedule,
            crate::schedule::ScheduleKind::Linear {
                beta_start: 1e-4,
                beta_end: 0.02
            }
        );
        assert!((cfg.data.balance.fraction().unwrap() - 240.0 / 1579.0).abs() < 1e-12);
        cfg.validate().unwrap();
    }

    #[test]
    fn json_roundtrip_and_partial_override() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_vec(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(back.content_hash(), cfg.content_hash());

        let partial = br#"{"seed": 99, "guidance": {"tau": 80}}"#;
        let over = ExperimentConfig::from_json(partial).unwrap();
        assert_eq!(over.seed, 99);
        assert_eq!(over.guidance.tau, 80);
        // Untouched fields keep their defaults.
        assert_eq!(over.guidance.iterations, 5);
        assert_eq!(over.diffusion.t_train, 1000);
    }

    #[test]
    fn validation_rejects_bad_grids() {
        let mut cfg = ExperimentConfig::default();
        cfg.ablation.taus = vec![500];
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.diffusion.t_sample = 2000;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.generate.jobs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn method_specialization() {
        let base = GuidanceConfig::default();
        assert_eq!(Method::DiffIce.specialize(&base).iterations, 5);
        let one = Method::DiffIce1.specialize(&base);
        assert_eq!(one.iterations, 1);
        assert_eq!(one.grad_mode, GradMode::Denoised);
        let xt = Method::DiffIce1Xt.specialize(&base);
        assert_eq!(xt.iterations, 1);
        assert_eq!(xt.grad_mode, GradMode::Noisy);
        assert!("diff_ice".parse::<Method>().is_ok());
        assert!("nope".parse::<Method>().is_err());
    }
}
