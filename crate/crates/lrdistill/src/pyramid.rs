//! Convolutional backbone with a feature pyramid, plus the level-shift
//! machinery that lets a low-resolution pass emit maps spatially matching a
//! high-resolution pass.
//!
//! Pyramid levels are labeled so that level `s` has stride `2^s` relative to
//! the pyramid's reference frame. A shifted pyramid relabels the levels of a
//! `1/k`-sized input upward by `m = log2(k)`, which records its strides in the
//! original high-resolution frame.

use crate::nn::{Conv2d, Param};
use crate::tensor::{add, relu, upsample_nearest_2x, Scalar, Tensor};
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Level shift for reduction factor `k`.
///
/// Stride geometry forces `m = log2(k)`: level `s` of a `1/k` input has
/// stride `k * 2^s` in the original frame, which equals the stride of level
/// `s + log2(k)`. `k = 1` is the degenerate no-shift case.
pub fn shift_offset(k: usize) -> Result<u32> {
    if k == 0 || !k.is_power_of_two() {
        return Err(Error::Config {
            field: "k".into(),
            constraint: format!(
                "reduction factor must be a power of two for exact spatial alignment, got {k}"
            ),
        });
    }
    Ok(k.trailing_zeros())
}

/// High/low input geometry for one aligned training setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolutionSpec {
    /// Base high-resolution input (H, W).
    pub high: (usize, usize),
    /// Base low-resolution input (H/k, W/k).
    pub low: (usize, usize),
    /// Even reduction factor, a power of two.
    pub k: usize,
    /// Pyramid level shift, log2(k).
    pub m: u32,
}

impl ResolutionSpec {
    pub fn new(high: (usize, usize), k: usize) -> Result<Self> {
        let m = shift_offset(k)?;
        if high.0 % k != 0 || high.1 % k != 0 {
            return Err(Error::Config {
                field: "resolution".into(),
                constraint: format!(
                    "high resolution {}x{} must divide exactly by k={k}",
                    high.0, high.1
                ),
            });
        }
        Ok(ResolutionSpec {
            high,
            low: (high.0 / k, high.1 / k),
            k,
            m,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output width of each stride-2 stage after the stem.
    pub stage_widths: Vec<usize>,
    /// Channel count shared by all pyramid levels.
    pub pyramid_channels: usize,
    /// Finest emitted pyramid level (stride `2^min_level`).
    pub min_level: u8,
    /// Coarsest emitted pyramid level.
    pub max_level: u8,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_widths: vec![16, 32, 64, 128],
            pyramid_channels: 32,
            min_level: 2,
            max_level: 6,
        }
    }
}

impl BackboneConfig {
    /// Deepest level produced directly by a backbone stage.
    pub fn deepest_stage_level(&self) -> u8 {
        1 + self.stage_widths.len() as u8
    }

    pub fn num_levels(&self) -> usize {
        (self.max_level - self.min_level + 1) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config {
                field: "backbone.stage_widths".into(),
                constraint: "must be a non-empty list of positive widths".into(),
            });
        }
        if self.pyramid_channels == 0 {
            return Err(Error::Config {
                field: "backbone.pyramid_channels".into(),
                constraint: "must be positive".into(),
            });
        }
        if self.min_level < 2 {
            return Err(Error::Config {
                field: "backbone.min_level".into(),
                constraint: "finest pyramid level is 2 (stride 4)".into(),
            });
        }
        if self.max_level < self.min_level {
            return Err(Error::Config {
                field: "backbone.max_level".into(),
                constraint: "must be >= min_level".into(),
            });
        }
        if self.min_level > self.deepest_stage_level() {
            return Err(Error::Config {
                field: "backbone.min_level".into(),
                constraint: format!(
                    "exceeds deepest stage level {} ({} stages)",
                    self.deepest_stage_level(),
                    self.stage_widths.len()
                ),
            });
        }
        Ok(())
    }
}

/// Ordered map from pyramid level to its feature map.
pub struct FeaturePyramid<S: Scalar> {
    levels: Vec<(u8, Tensor<S>)>,
    pub channels: usize,
}

impl<S: Scalar> FeaturePyramid<S> {
    pub fn new(levels: Vec<(u8, Tensor<S>)>, channels: usize) -> Self {
        for w in levels.windows(2) {
            let (la, ta) = (&w[0].0, &w[0].1);
            let (lb, tb) = (&w[1].0, &w[1].1);
            assert_eq!(*lb, la + 1, "pyramid levels must be consecutive");
            let (sa, sb) = (ta.shape(), tb.shape());
            assert_eq!(
                (sa[2], sa[3]),
                (sb[2] * 2, sb[3] * 2),
                "level {lb} must halve level {la} spatially"
            );
        }
        for (_, t) in &levels {
            assert_eq!(t.shape()[1], channels, "pyramid channel count mismatch");
        }
        FeaturePyramid { levels, channels }
    }

    pub fn level(&self, s: u8) -> Option<&Tensor<S>> {
        self.levels
            .iter()
            .find(|(l, _)| *l == s)
            .map(|(_, t)| t)
    }

    pub fn level_ids(&self) -> Vec<u8> {
        self.levels.iter().map(|(l, _)| *l).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &Tensor<S>)> {
        self.levels.iter().map(|(l, t)| (*l, t))
    }

    /// Stride of a level relative to the pyramid's reference frame.
    pub fn stride(level: u8) -> usize {
        1usize << level
    }

    /// Relabel every level up by `m` (records strides in the frame that is
    /// `2^m` times larger than the input the features were computed from).
    pub fn shift_up(self, m: u32) -> Self {
        FeaturePyramid {
            levels: self
                .levels
                .into_iter()
                .map(|(l, t)| (l + m as u8, t))
                .collect(),
            channels: self.channels,
        }
    }
}

/// Stem + strided stages + lateral/top-down merge + per-level output convs.
pub struct Backbone<S: Scalar> {
    pub cfg: BackboneConfig,
    stem: Conv2d<S>,
    stages: Vec<(Conv2d<S>, Conv2d<S>)>,
    laterals: Vec<Conv2d<S>>,
    outputs: Vec<Conv2d<S>>,
    extras: Vec<Conv2d<S>>,
}

impl<S: Scalar> Backbone<S> {
    pub fn new(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate().expect("backbone config validated upstream");
        let w0 = cfg.stage_widths[0];
        let stem = Conv2d::new("backbone.stem", rng, 3, w0, 3, 2, 1);
        let mut stages = Vec::new();
        let mut c_in = w0;
        for (i, &w) in cfg.stage_widths.iter().enumerate() {
            let a = Conv2d::new(&format!("backbone.stage{}.a", i + 1), rng, c_in, w, 3, 2, 1);
            let b = Conv2d::new(&format!("backbone.stage{}.b", i + 1), rng, w, w, 3, 1, 1);
            stages.push((a, b));
            c_in = w;
        }
        let c = cfg.pyramid_channels;
        let deepest = cfg.deepest_stage_level().min(cfg.max_level);
        let mut laterals = Vec::new();
        let mut outputs = Vec::new();
        for s in cfg.min_level..=deepest {
            let width = cfg.stage_widths[(s - 2) as usize];
            laterals.push(Conv2d::new(
                &format!("backbone.lateral{s}"),
                rng,
                width,
                c,
                1,
                1,
                0,
            ));
            outputs.push(Conv2d::new(&format!("backbone.out{s}"), rng, c, c, 3, 1, 1));
        }
        let mut extras = Vec::new();
        for s in deepest + 1..=cfg.max_level {
            extras.push(Conv2d::new(&format!("backbone.extra{s}"), rng, c, c, 3, 2, 1));
        }
        Backbone {
            cfg: cfg.clone(),
            stem,
            stages,
            laterals,
            outputs,
            extras,
        }
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = self.stem.params();
        for (a, b) in &self.stages {
            p.extend(a.params());
            p.extend(b.params());
        }
        for l in &self.laterals {
            p.extend(l.params());
        }
        for o in &self.outputs {
            p.extend(o.params());
        }
        for e in &self.extras {
            p.extend(e.params());
        }
        p
    }

    /// Feature pyramid with levels `min_level ..= top_level`.
    ///
    /// The input must divide exactly by `2^top_level` so every level halves
    /// its predecessor with no remainder.
    pub fn pyramid(&self, image: &Tensor<S>, top_level: u8) -> Result<FeaturePyramid<S>> {
        let shape = image.shape();
        assert_eq!(shape.len(), 4, "backbone expects NCHW input");
        assert_eq!(shape[1], 3, "backbone expects 3 input channels");
        let (h, w) = (shape[2], shape[3]);
        let required = 1usize << top_level;
        if h % required != 0 || w % required != 0 || h == 0 || w == 0 {
            return Err(Error::InputSize {
                got: h,
                got_w: w,
                required,
                level: top_level,
            });
        }
        assert!(
            top_level >= self.cfg.min_level && top_level <= self.cfg.max_level,
            "top_level {top_level} outside configured range {}..={}",
            self.cfg.min_level,
            self.cfg.max_level
        );

        // Bottom-up stages.
        let mut x = relu(&self.stem.forward(image));
        let deepest = self.cfg.deepest_stage_level().min(top_level);
        let mut stage_feats: Vec<Tensor<S>> = Vec::new(); // level 2 first
        for (i, (a, b)) in self.stages.iter().enumerate() {
            let level = 2 + i as u8;
            if level > deepest {
                break;
            }
            x = relu(&a.forward(&x));
            x = relu(&b.forward(&x));
            stage_feats.push(x.clone());
        }

        // Lateral projections, then top-down merge.
        let min_l = self.cfg.min_level;
        let mut merged: Vec<Option<Tensor<S>>> = vec![None; (deepest - min_l + 1) as usize];
        for s in (min_l..=deepest).rev() {
            let idx = (s - min_l) as usize;
            let lat = self.laterals[idx].forward(&stage_feats[(s - 2) as usize]);
            let m = match &merged[idx + 1..].first() {
                Some(Some(above)) => add(&lat, &upsample_nearest_2x(above)),
                _ => lat,
            };
            merged[idx] = Some(m);
        }

        let mut levels: Vec<(u8, Tensor<S>)> = Vec::new();
        for s in min_l..=deepest {
            let idx = (s - min_l) as usize;
            levels.push((s, self.outputs[idx].forward(merged[idx].as_ref().unwrap())));
        }
        // Extra coarse levels from strided convs on the previous map.
        let mut prev = levels.last().unwrap().1.clone();
        for s in deepest + 1..=top_level {
            let conv = &self.extras[(s - self.cfg.deepest_stage_level() - 1) as usize];
            let f = if s == deepest + 1 {
                conv.forward(&prev)
            } else {
                conv.forward(&relu(&prev))
            };
            levels.push((s, f.clone()));
            prev = f;
        }

        Ok(FeaturePyramid::new(levels, self.cfg.pyramid_channels))
    }

    /// Full-range pyramid on a high-resolution input.
    pub fn forward_pyramid(&self, image: &Tensor<S>) -> Result<FeaturePyramid<S>> {
        self.pyramid(image, self.cfg.max_level)
    }

    /// Shifted pyramid on a `1/k` input: levels `min_level ..= max_level-m`
    /// are computed, then relabeled up by `m` so each level spatially matches
    /// its partner level on the `k`-times-larger input.
    pub fn aligned_pyramid(
        &self,
        image_low: &Tensor<S>,
        spec: &ResolutionSpec,
    ) -> Result<FeaturePyramid<S>> {
        let m = spec.m;
        if self.cfg.min_level as u32 + m > self.cfg.max_level as u32 {
            return Err(Error::Alignment(format!(
                "shift m={m} leaves no pyramid levels in range {}..={}",
                self.cfg.min_level, self.cfg.max_level
            )));
        }
        let top = self.cfg.max_level - m as u8;
        let pyr = self.pyramid(image_low, top)?;
        Ok(pyr.shift_up(m))
    }
}

// ── Image rescaling ──────────────────────────────────────────────────

/// Round `v` up to the nearest positive multiple of `multiple`.
pub fn round_up_to_multiple(v: f64, multiple: usize) -> usize {
    let m = multiple.max(1) as f64;
    ((v / m).ceil() as usize).max(1) * multiple.max(1)
}

/// Bilinear rescale of a [C,H,W] image by `factor`, each output side rounded
/// up to a multiple of `multiple` (pass 1 for pure rescaling). Corner pixels
/// map to corner pixels.
pub fn rescale_image<S: Scalar>(
    image: &Tensor<S>,
    factor: f64,
    multiple: usize,
) -> Result<Tensor<S>> {
    assert!(
        !image.requires_grad(),
        "rescale_image operates on input images, not graph values"
    );
    let s = image.shape();
    assert_eq!(s.len(), 3, "rescale_image expects [C,H,W]");
    if factor <= 0.0 {
        return Err(Error::Config {
            field: "scale factor".into(),
            constraint: format!("must be positive, got {factor}"),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let oh = round_up_to_multiple(h as f64 * factor, multiple);
    let ow = round_up_to_multiple(w as f64 * factor, multiple);
    if oh < multiple.max(1) || ow < multiple.max(1) {
        return Err(Error::Config {
            field: "scale factor".into(),
            constraint: format!("degenerate output size {oh}x{ow}"),
        });
    }
    if (oh, ow) == (h, w) {
        return Ok(Tensor::from_vec(image.data().to_vec(), s));
    }
    let src = image.data();
    let mut out = vec![S::zero(); c * oh * ow];
    let sy_scale = if oh > 1 {
        (h - 1) as f64 / (oh - 1) as f64
    } else {
        0.0
    };
    let sx_scale = if ow > 1 {
        (w - 1) as f64 / (ow - 1) as f64
    } else {
        0.0
    };
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let sy = oy as f64 * sy_scale;
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = S::from_f64(sy - y0 as f64);
            for ox in 0..ow {
                let sx = ox as f64 * sx_scale;
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = S::from_f64(sx - x0 as f64);
                let one = S::one();
                let top = plane[y0 * w + x0] * (one - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (one - wx) + plane[y1 * w + x1] * wx;
                dst[oy * ow + ox] = top * (one - wy) + bot * wy;
            }
        }
    }
    Ok(Tensor::from_vec(out, &[c, oh, ow]))
}
