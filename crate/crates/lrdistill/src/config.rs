//! Experiment configuration: one TOML file validated as a whole before any
//! training starts. Unknown keys are hard errors; validation messages name
//! the offending field and the violated constraint.

use crate::data::SyntheticSceneSpec;
use crate::fusion::FusionVariant;
use crate::head::HeadConfig;
use crate::pyramid::{shift_offset, BackboneConfig, ResolutionSpec};
use crate::train::ScaleJitterConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub dataset: DatasetSection,
    pub backbone: BackboneConfig,
    pub resolution: ResolutionSection,
    pub head: HeadSection,
    pub jitter: ScaleJitterConfig,
    pub loss: LossSection,
    pub fusion: FusionSection,
    pub optim: OptimSection,
    pub training: TrainingSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub image_size: usize,
    pub num_classes: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub class_size_ranges: Vec<(f32, f32)>,
    pub noise: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ResolutionSection {
    /// High-to-low reduction factor (even power of two).
    pub k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HeadSection {
    pub tower_depth: usize,
    pub scale_bounds: Vec<f32>,
    pub focal_alpha: f64,
    pub focal_gamma: u32,
    pub score_thresh: f32,
    pub nms_iou: f32,
    pub max_detections: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    /// Fusion loss weight.
    pub lambda: f64,
    /// Distillation/detection balance for the student.
    pub gamma: f64,
    /// Distillation loss magnitude.
    pub tau: f64,
    pub kd_reduction: KdReduction,
    /// Which teacher features the student mimics.
    pub teacher_features: TeacherFeatures,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum KdReduction {
    /// Per-level mean absolute difference, summed over levels.
    Mean,
    /// Raw sum of absolute differences.
    Sum,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum TeacherFeatures {
    /// Fused high/low pyramid.
    Fused,
    /// Plain high-resolution pyramid.
    High,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    pub variant: FusionVariant,
    /// Channel compression ratio of the gate MLP.
    pub compression: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs of the fusion-only phase in two-step training.
    pub fusion_epochs: usize,
    /// Learning-rate decay points in epochs; each multiplies the rate by 0.1.
    /// Scaled proportionally when `epochs` differs from 12.
    pub milestones: Vec<usize>,
    /// Linear learning-rate warmup steps at the start of each phase.
    pub warmup_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub mode: TrainingMode,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    /// Two shared-weight branches per step with the low branch's pyramid
    /// shifted into the high-resolution frame.
    Aligned,
    /// One branch per step at a coin-flipped base resolution, pyramid in its
    /// own frame.
    Vanilla,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: "runs/exp".into(),
            dataset: DatasetSection {
                image_size: 128,
                num_classes: 3,
                train_images: 2000,
                val_images: 200,
                objects_min: 1,
                objects_max: 6,
                class_size_ranges: vec![(10.0, 44.0), (10.0, 44.0), (9.0, 18.0)],
                noise: 0.06,
            },
            backbone: BackboneConfig::default(),
            resolution: ResolutionSection { k: 2 },
            head: HeadSection {
                tower_depth: 4,
                scale_bounds: vec![16.0, 32.0, 64.0],
                focal_alpha: 0.25,
                focal_gamma: 2,
                score_thresh: 0.05,
                nms_iou: 0.6,
                max_detections: 100,
            },
            jitter: ScaleJitterConfig {
                alpha_min: 0.8,
                alpha_max: 1.0,
            },
            loss: LossSection {
                lambda: 1.0,
                gamma: 0.2,
                tau: 3.0,
                kd_reduction: KdReduction::Mean,
                teacher_features: TeacherFeatures::Fused,
            },
            fusion: FusionSection {
                variant: FusionVariant::Cff,
                compression: 4,
            },
            optim: OptimSection {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 1e-4,
                batch_size: 8,
                epochs: 12,
                fusion_epochs: 12,
                milestones: vec![8, 11],
                warmup_steps: 200,
            },
            training: TrainingSection {
                mode: TrainingMode::Aligned,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: "config file".into(),
            constraint: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn m(&self) -> Result<u32> {
        shift_offset(self.resolution.k)
    }

    /// Levels the shared head operates on: `min_level + m ..= max_level`.
    pub fn head_levels(&self) -> Vec<u8> {
        let m = self.m().unwrap_or(0) as u8;
        (self.backbone.min_level + m..=self.backbone.max_level).collect()
    }

    pub fn resolution_spec(&self) -> Result<ResolutionSpec> {
        ResolutionSpec::new(
            (self.dataset.image_size, self.dataset.image_size),
            self.resolution.k,
        )
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            tower_depth: self.head.tower_depth,
            num_classes: self.dataset.num_classes,
            scale_bounds: self.head.scale_bounds.clone(),
            focal_alpha: self.head.focal_alpha,
            focal_gamma: self.head.focal_gamma,
            score_thresh: self.head.score_thresh,
            nms_iou: self.head.nms_iou,
            max_detections: self.head.max_detections,
        }
    }

    /// Dataset spec for a derived stream (train/val use distinct streams).
    pub fn scene_spec(&self, stream: u64) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            image_size: self.dataset.image_size,
            num_classes: self.dataset.num_classes,
            objects_min: self.dataset.objects_min,
            objects_max: self.dataset.objects_max,
            class_size_ranges: self.dataset.class_size_ranges.clone(),
            noise: self.dataset.noise,
            seed: self.seed.wrapping_mul(0x517c_c1b7_2722_0a95) ^ stream,
        }
    }

    /// Milestones in steps, scaled from the 12-epoch reference schedule.
    pub fn milestone_steps(&self, steps_per_epoch: usize, epochs: usize) -> Vec<usize> {
        self.optim
            .milestones
            .iter()
            .map(|&me| {
                let frac = me as f64 / 12.0;
                ((frac * epochs as f64) * steps_per_epoch as f64).floor() as usize
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ds = &self.dataset;
        let spec = SyntheticSceneSpec {
            image_size: ds.image_size,
            num_classes: ds.num_classes,
            objects_min: ds.objects_min,
            objects_max: ds.objects_max,
            class_size_ranges: ds.class_size_ranges.clone(),
            noise: ds.noise,
            seed: 0,
        };
        spec.validate()?;
        self.backbone.validate()?;

        let k = self.resolution.k;
        if k < 2 || !k.is_power_of_two() {
            return Err(Error::Config {
                field: "resolution.k".into(),
                constraint: format!("must be an even power of two >= 2, got {k}"),
            });
        }
        let m = self.m()?;
        let high_mult = 1usize << self.backbone.max_level;
        if ds.image_size % high_mult != 0 {
            return Err(Error::Config {
                field: "dataset.image_size".into(),
                constraint: format!(
                    "must be a multiple of {high_mult} for pyramid levels up to {}",
                    self.backbone.max_level
                ),
            });
        }
        if ds.image_size % k != 0 {
            return Err(Error::Config {
                field: "dataset.image_size".into(),
                constraint: format!("must divide exactly by k={k}"),
            });
        }
        let head_levels = self.head_levels();
        if head_levels.len() < 3 {
            return Err(Error::Config {
                field: "resolution.k".into(),
                constraint: format!(
                    "shift m={m} leaves only {} aligned pyramid level(s); the head needs at least 3",
                    head_levels.len()
                ),
            });
        }
        self.head_config().validate(head_levels.len())?;
        self.jitter.validate()?;

        let l = &self.loss;
        if !(0.0..=1.0).contains(&l.gamma) {
            return Err(Error::Config {
                field: "loss.gamma".into(),
                constraint: "must lie in [0, 1]".into(),
            });
        }
        if l.lambda < 0.0 || l.tau < 0.0 {
            return Err(Error::Config {
                field: "loss.lambda/loss.tau".into(),
                constraint: "must be non-negative".into(),
            });
        }
        if self.fusion.compression == 0 {
            return Err(Error::Config {
                field: "fusion.compression".into(),
                constraint: "must be positive".into(),
            });
        }

        let o = &self.optim;
        if o.lr <= 0.0 {
            return Err(Error::Config {
                field: "optim.lr".into(),
                constraint: "must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config {
                field: "optim.momentum".into(),
                constraint: "must lie in [0, 1)".into(),
            });
        }
        if o.weight_decay < 0.0 {
            return Err(Error::Config {
                field: "optim.weight_decay".into(),
                constraint: "must be non-negative".into(),
            });
        }
        if o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::Config {
                field: "optim.batch_size/epochs".into(),
                constraint: "must be positive".into(),
            });
        }
        if ds.train_images < o.batch_size {
            return Err(Error::Config {
                field: "dataset.train_images".into(),
                constraint: format!("must be at least batch_size ({})", o.batch_size),
            });
        }
        if ds.val_images == 0 {
            return Err(Error::Config {
                field: "dataset.val_images".into(),
                constraint: "must be positive".into(),
            });
        }
        if o.milestones.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config {
                field: "optim.milestones".into(),
                constraint: "must be strictly increasing".into(),
            });
        }
        if o.milestones.iter().any(|&e| e == 0 || e > 12) {
            return Err(Error::Config {
                field: "optim.milestones".into(),
                constraint: "epochs on the 12-epoch reference scale, in 1..=12".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        // serialize -> parse -> serialize is a fixed point
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let mut text = ExperimentConfig::default().to_toml();
        text.push_str("\n[loss2]\ngamma = 0.5\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text2 = ExperimentConfig::default()
            .to_toml()
            .replace("gamma = 0.2", "gamma = 0.2\ngama = 0.3");
        assert!(ExperimentConfig::from_toml(&text2).is_err());
    }

    #[test]
    fn validation_names_field_and_constraint() {
        let mut cfg = ExperimentConfig::default();
        cfg.loss.gamma = 1.5;
        match cfg.validate() {
            Err(Error::Config { field, constraint }) => {
                assert_eq!(field, "loss.gamma");
                assert!(constraint.contains("[0, 1]"));
            }
            other => panic!("expected config error, got {other:?}"),
        }

        let mut cfg = ExperimentConfig::default();
        cfg.resolution.k = 6;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "resolution.k"));

        let mut cfg = ExperimentConfig::default();
        cfg.dataset.image_size = 96;
        assert!(
            matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "dataset.image_size")
        );
    }

    #[test]
    fn too_large_shift_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.resolution.k = 8; // m=3 leaves head levels 5..6: fewer than 3
        cfg.dataset.image_size = 128;
        match cfg.validate() {
            Err(Error::Config { field, constraint }) => {
                assert_eq!(field, "resolution.k");
                assert!(constraint.contains("at least 3"), "{constraint}");
            }
            other => panic!("expected too-few-levels error, got {other:?}"),
        }
    }

    #[test]
    fn milestone_steps_scale_with_epochs() {
        let cfg = ExperimentConfig::default();
        // 12-epoch reference at 100 steps/epoch: decay at epochs 8 and 11
        assert_eq!(cfg.milestone_steps(100, 12), vec![800, 1100]);
        // 6 epochs: same fractions of the shorter run
        assert_eq!(cfg.milestone_steps(100, 6), vec![400, 550]);
    }

    #[test]
    fn paper_default_weights() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.loss.lambda, 1.0);
        assert_eq!(cfg.loss.gamma, 0.2);
        assert_eq!(cfg.loss.tau, 3.0);
        assert_eq!(cfg.jitter.alpha_min, 0.8);
        assert_eq!(cfg.jitter.alpha_max, 1.0);
    }
}
