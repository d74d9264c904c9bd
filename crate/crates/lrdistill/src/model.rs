//! Detector assembly: backbone + shared head, optionally with a fusion
//! module, plus the per-branch forward paths used by training and eval.

use crate::fusion::{FusionModule, FusionVariant, FusionWeights};
use crate::head::{DetectionHead, HeadConfig, HeadOutputs};
use crate::nn::Param;
use crate::pyramid::{Backbone, BackboneConfig, FeaturePyramid, ResolutionSpec};
use crate::tensor::{Scalar, Tensor};
use crate::Result;
use rand_chacha::ChaCha8Rng;

/// Backbone and head sharing one parameter set across all branches.
pub struct DetectionModel<S: Scalar> {
    pub backbone: Backbone<S>,
    pub head: DetectionHead<S>,
}

impl<S: Scalar> DetectionModel<S> {
    /// `m` fixes which pyramid levels the head serves: the shifted
    /// low-resolution pass can only produce levels `min_level + m` and up, so
    /// the head operates on exactly those.
    pub fn new(
        bb_cfg: &BackboneConfig,
        head_cfg: &HeadConfig,
        m: u32,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let head_levels: Vec<u8> = (bb_cfg.min_level + m as u8..=bb_cfg.max_level).collect();
        let backbone = Backbone::new(bb_cfg, rng);
        let head = DetectionHead::new(head_cfg, &head_levels, bb_cfg.pyramid_channels, rng);
        DetectionModel { backbone, head }
    }

    pub fn head_levels(&self) -> &[u8] {
        &self.head.levels
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = self.backbone.params();
        p.extend(self.head.params());
        p
    }

    pub fn set_trainable(&self, on: bool) {
        for p in self.params() {
            p.set_trainable(on);
        }
    }

    /// Copy every parameter value from `src` (shapes must match).
    pub fn copy_weights_from(&self, src: &DetectionModel<S>) {
        let dst = self.params();
        let srcp = src.params();
        assert_eq!(dst.len(), srcp.len(), "model shapes differ");
        for (d, s) in dst.iter().zip(srcp.iter()) {
            assert_eq!(d.name(), s.name(), "parameter order mismatch");
            assert_eq!(d.shape(), s.shape(), "parameter {} shape mismatch", d.name());
            d.set_data(s.data());
        }
    }

    /// Head outputs on the full-range pyramid of a base-frame input.
    pub fn forward_standard(&self, image: &Tensor<S>) -> Result<Vec<HeadOutputs<S>>> {
        let pyr = self.backbone.forward_pyramid(image)?;
        Ok(self.head.forward_pyramid(&pyr))
    }

    /// Shifted pyramid of a 1/k input plus head outputs on it.
    pub fn forward_aligned(
        &self,
        image_low: &Tensor<S>,
        spec: &ResolutionSpec,
    ) -> Result<(FeaturePyramid<S>, Vec<HeadOutputs<S>>)> {
        let pyr = self.backbone.aligned_pyramid(image_low, spec)?;
        let outs = self.head.forward_pyramid(&pyr);
        Ok((pyr, outs))
    }
}

/// Multi-resolution teacher: a detection model plus (for aligned training)
/// the per-level fusion parameters.
pub struct TeacherModel<S: Scalar> {
    pub core: DetectionModel<S>,
    pub fusion: Option<FusionModule<S>>,
}

impl<S: Scalar> TeacherModel<S> {
    pub fn new(
        bb_cfg: &BackboneConfig,
        head_cfg: &HeadConfig,
        m: u32,
        fusion: Option<(FusionVariant, usize)>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let core = DetectionModel::new(bb_cfg, head_cfg, m, rng);
        let fusion = fusion.map(|(variant, compression)| {
            FusionModule::new(
                variant,
                core.head_levels(),
                bb_cfg.pyramid_channels,
                compression,
                rng,
            )
        });
        TeacherModel { core, fusion }
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = self.core.params();
        if let Some(f) = &self.fusion {
            p.extend(f.params());
        }
        p
    }

    pub fn set_trainable(&self, on: bool) {
        for p in self.params() {
            p.set_trainable(on);
        }
    }

    /// Fused pyramid from an aligned high/low pair at base resolutions.
    pub fn fused_pyramid(
        &self,
        image_high: &Tensor<S>,
        image_low: &Tensor<S>,
        spec: &ResolutionSpec,
    ) -> Result<(FeaturePyramid<S>, Vec<FusionWeights>)> {
        let fusion = self.fusion.as_ref().ok_or_else(|| {
            crate::Error::Alignment("model has no fusion parameters".into())
        })?;
        let high = self.backbone().forward_pyramid(image_high)?;
        let low = self.backbone().aligned_pyramid(image_low, spec)?;
        crate::fusion::fuse_pyramids(&high, &low, fusion)
    }

    pub fn backbone(&self) -> &Backbone<S> {
        &self.core.backbone
    }

    pub fn head(&self) -> &DetectionHead<S> {
        &self.core.head
    }
}
