//! Fusion of spatially-aligned pyramid level pairs from a high-resolution and
//! a shifted low-resolution pass.
//!
//! The gated path pools the concatenated pair, runs a small per-level MLP and
//! softmax-normalizes two weights, one per input resolution; the fused map is
//! the corresponding convex combination. Ablation variants swap the gate for
//! a sigmoid, emit per-channel weights, or replace gating entirely with
//! static convolutions.

use crate::nn::{Conv2d, Linear, Param};
use crate::pyramid::FeaturePyramid;
use crate::tensor::{
    add, concat_channels, global_average_pool, mul_per_channel, mul_per_sample, relu, sigmoid,
    slice_channels, softmax, sub, Scalar, Tensor,
};
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariant {
    /// Sum of separately convolved maps (static weights).
    ScSum,
    /// Convolution over the concatenated pair (static weights).
    Cc,
    /// Gated, sigmoid activation: independent weights per resolution.
    Sigmoid,
    /// Gated, softmax across the pair per channel.
    Channelwise,
    /// Gated, softmax across the pair: one weight per resolution.
    Cff,
}

impl FusionVariant {
    pub fn is_gated(&self) -> bool {
        matches!(
            self,
            FusionVariant::Sigmoid | FusionVariant::Channelwise | FusionVariant::Cff
        )
    }
}

/// Softmax/sigmoid weights for one fused level, per batch sample.
#[derive(Debug, Clone)]
pub struct FusionWeights {
    pub level: u8,
    /// Weight on the high-resolution map, one per sample (channel-averaged
    /// for the channel-wise variant).
    pub w_high: Vec<f64>,
    /// Weight on the low-resolution map.
    pub w_low: Vec<f64>,
}

enum LevelParams<S: Scalar> {
    Gated { fc1: Linear<S>, fc2: Linear<S> },
    ScSum { conv_high: Conv2d<S>, conv_low: Conv2d<S> },
    Cc { conv: Conv2d<S> },
}

/// Per-level fusion parameters for a fixed set of pyramid levels.
pub struct FusionModule<S: Scalar> {
    pub variant: FusionVariant,
    pub levels: Vec<u8>,
    pub channels: usize,
    per_level: Vec<LevelParams<S>>,
}

impl<S: Scalar> FusionModule<S> {
    /// `compression` is the channel compression ratio of the gate MLP. The
    /// final MLP layer starts at zero so initial weights are exactly (½, ½).
    pub fn new(
        variant: FusionVariant,
        levels: &[u8],
        channels: usize,
        compression: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(!levels.is_empty(), "fusion needs at least one level");
        let hidden = (2 * channels / compression.max(1)).max(1);
        let per_level = levels
            .iter()
            .map(|&l| match variant {
                FusionVariant::ScSum => LevelParams::ScSum {
                    conv_high: Conv2d::new(
                        &format!("fusion.l{l}.conv_high"),
                        rng,
                        channels,
                        channels,
                        3,
                        1,
                        1,
                    ),
                    conv_low: Conv2d::new(
                        &format!("fusion.l{l}.conv_low"),
                        rng,
                        channels,
                        channels,
                        3,
                        1,
                        1,
                    ),
                },
                FusionVariant::Cc => LevelParams::Cc {
                    conv: Conv2d::new(
                        &format!("fusion.l{l}.conv"),
                        rng,
                        2 * channels,
                        channels,
                        3,
                        1,
                        1,
                    ),
                },
                _ => {
                    let out_dim = if variant == FusionVariant::Channelwise {
                        2 * channels
                    } else {
                        2
                    };
                    LevelParams::Gated {
                        fc1: Linear::new(&format!("fusion.l{l}.fc1"), rng, 2 * channels, hidden),
                        fc2: Linear::zeroed(&format!("fusion.l{l}.fc2"), hidden, out_dim),
                    }
                }
            })
            .collect();
        FusionModule {
            variant,
            levels: levels.to_vec(),
            channels,
            per_level,
        }
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = Vec::new();
        for lp in &self.per_level {
            match lp {
                LevelParams::Gated { fc1, fc2 } => {
                    p.extend(fc1.params());
                    p.extend(fc2.params());
                }
                LevelParams::ScSum {
                    conv_high,
                    conv_low,
                } => {
                    p.extend(conv_high.params());
                    p.extend(conv_low.params());
                }
                LevelParams::Cc { conv } => p.extend(conv.params()),
            }
        }
        p
    }

    fn level_index(&self, level: u8) -> Result<usize> {
        self.levels.iter().position(|&l| l == level).ok_or_else(|| {
            Error::Alignment(format!(
                "fusion has no parameters for level {level} (configured: {:?})",
                self.levels
            ))
        })
    }

    /// Fuse one aligned pair. Returns the fused map and, for gated variants,
    /// the per-sample weights.
    pub fn fuse_level(
        &self,
        level: u8,
        p_high: &Tensor<S>,
        p_low: &Tensor<S>,
    ) -> Result<(Tensor<S>, Option<FusionWeights>)> {
        if p_high.shape() != p_low.shape() {
            return Err(Error::Alignment(format!(
                "level {level}: high {:?} vs low {:?} — aligned pyramids must match spatially",
                p_high.shape(),
                p_low.shape()
            )));
        }
        let idx = self.level_index(level)?;
        let n = p_high.shape()[0];
        match &self.per_level[idx] {
            LevelParams::ScSum {
                conv_high,
                conv_low,
            } => Ok((
                add(&conv_high.forward(p_high), &conv_low.forward(p_low)),
                None,
            )),
            LevelParams::Cc { conv } => Ok((
                conv.forward(&concat_channels(&[p_high.clone(), p_low.clone()])),
                None,
            )),
            LevelParams::Gated { fc1, fc2 } => {
                let pooled = global_average_pool(&concat_channels(&[
                    p_high.clone(),
                    p_low.clone(),
                ]));
                let logits = fc2.forward(&relu(&fc1.forward(&pooled)));
                match self.variant {
                    FusionVariant::Cff => {
                        let weights = softmax(&logits);
                        let w_high = slice_channels(&weights, 0, 1);
                        // convex form: low + w*(high-low) is exact on equal inputs
                        let fused =
                            add(p_low, &mul_per_sample(&sub(p_high, p_low), &w_high));
                        let wd = weights.data();
                        Ok((
                            fused,
                            Some(FusionWeights {
                                level,
                                w_high: (0..n).map(|i| wd[2 * i].as_f64()).collect(),
                                w_low: (0..n).map(|i| wd[2 * i + 1].as_f64()).collect(),
                            }),
                        ))
                    }
                    FusionVariant::Sigmoid => {
                        let gates = sigmoid(&logits);
                        let g_high = slice_channels(&gates, 0, 1);
                        let g_low = slice_channels(&gates, 1, 2);
                        let fused = add(
                            &mul_per_sample(p_high, &g_high),
                            &mul_per_sample(p_low, &g_low),
                        );
                        let gd = gates.data();
                        Ok((
                            fused,
                            Some(FusionWeights {
                                level,
                                w_high: (0..n).map(|i| gd[2 * i].as_f64()).collect(),
                                w_low: (0..n).map(|i| gd[2 * i + 1].as_f64()).collect(),
                            }),
                        ))
                    }
                    FusionVariant::Channelwise => {
                        let c = self.channels;
                        let a = slice_channels(&logits, 0, c);
                        let b = slice_channels(&logits, c, 2 * c);
                        // softmax across a 2-way pair == sigmoid of the difference
                        let w_high = sigmoid(&sub(&a, &b));
                        let fused =
                            add(p_low, &mul_per_channel(&sub(p_high, p_low), &w_high));
                        let wd = w_high.data();
                        let mean_high: Vec<f64> = (0..n)
                            .map(|i| {
                                wd[i * c..(i + 1) * c]
                                    .iter()
                                    .map(|v| v.as_f64())
                                    .sum::<f64>()
                                    / c as f64
                            })
                            .collect();
                        let mean_low: Vec<f64> =
                            mean_high.iter().map(|w| 1.0 - w).collect();
                        Ok((
                            fused,
                            Some(FusionWeights {
                                level,
                                w_high: mean_high,
                                w_low: mean_low,
                            }),
                        ))
                    }
                    _ => unreachable!(),
                }
            }
        }
    }
}

/// Fuse every level pair present in both pyramids. The fused pyramid keeps
/// the high-resolution level labels (and therefore strides).
pub fn fuse_pyramids<S: Scalar>(
    high: &FeaturePyramid<S>,
    low_aligned: &FeaturePyramid<S>,
    module: &FusionModule<S>,
) -> Result<(FeaturePyramid<S>, Vec<FusionWeights>)> {
    let missing: Vec<u8> = module
        .levels
        .iter()
        .copied()
        .filter(|&l| high.level(l).is_none() || low_aligned.level(l).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Alignment(format!(
            "fusion levels {missing:?} missing a partner (high has {:?}, low has {:?})",
            high.level_ids(),
            low_aligned.level_ids()
        )));
    }
    let mut levels = Vec::new();
    let mut weights = Vec::new();
    for &l in &module.levels {
        let (fused, w) = module.fuse_level(l, high.level(l).unwrap(), low_aligned.level(l).unwrap())?;
        levels.push((l, fused));
        if let Some(w) = w {
            weights.push(w);
        }
    }
    Ok((FeaturePyramid::new(levels, module.channels), weights))
}
