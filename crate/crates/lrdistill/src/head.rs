//! Anchor-free detection head shared across pyramid levels.
//!
//! Two four-block conv towers (classification and regression) run on every
//! level; per-location outputs are class logits, exp-scaled (l,t,r,b) box
//! distances, and a centerness logit. Targets follow the FCOS scheme: a
//! location is positive for the smallest box containing it whose largest
//! regression distance falls in the level's scale range.

use crate::nn::{Conv2d, Param};
use crate::pyramid::FeaturePyramid;
use crate::tensor::{
    add, affine, exp, ln, log_sigmoid, minimum, mul, neg, relu, scale, scale_by, sigmoid,
    slice_channels, sub, sum_all, Scalar, Tensor,
};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixels with a class id; `score` is 1.0 on ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
    pub class_id: usize,
    pub score: f32,
}

impl BBox {
    pub fn new(x0: f32, y0: f32, x1: f32, y1: f32, class_id: usize) -> Self {
        BBox {
            x0,
            y0,
            x1,
            y1,
            class_id,
            score: 1.0,
        }
    }

    pub fn area(&self) -> f32 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    /// Rescale coordinates by independent x/y factors.
    pub fn scaled(&self, fx: f32, fy: f32) -> BBox {
        BBox {
            x0: self.x0 * fx,
            y0: self.y0 * fy,
            x1: self.x1 * fx,
            y1: self.y1 * fy,
            ..*self
        }
    }
}

/// Intersection over union of two boxes, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// sqrt((min(l,r)/max(l,r)) * (min(t,b)/max(t,b)))
pub fn centerness(l: f32, t: f32, r: f32, b: f32) -> f32 {
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Conv blocks per tower.
    pub tower_depth: usize,
    pub num_classes: usize,
    /// Boundaries between consecutive head levels' scale ranges; level i of
    /// the head covers (bounds[i-1], bounds[i]], with 0 and infinity at the
    /// ends. Length must be one less than the number of head levels.
    pub scale_bounds: Vec<f32>,
    pub focal_alpha: f64,
    /// Focusing exponent (integer power).
    pub focal_gamma: u32,
    pub score_thresh: f32,
    pub nms_iou: f32,
    pub max_detections: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            tower_depth: 4,
            num_classes: 3,
            scale_bounds: vec![16.0, 32.0, 64.0],
            focal_alpha: 0.25,
            focal_gamma: 2,
            score_thresh: 0.05,
            nms_iou: 0.6,
            max_detections: 100,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self, num_head_levels: usize) -> crate::Result<()> {
        if self.tower_depth == 0 {
            return Err(crate::Error::Config {
                field: "head.tower_depth".into(),
                constraint: "must be at least 1".into(),
            });
        }
        if self.num_classes == 0 {
            return Err(crate::Error::Config {
                field: "head.num_classes".into(),
                constraint: "must be at least 1".into(),
            });
        }
        if self.scale_bounds.len() + 1 != num_head_levels {
            return Err(crate::Error::Config {
                field: "head.scale_bounds".into(),
                constraint: format!(
                    "needs {} boundaries for {} head levels, got {}",
                    num_head_levels - 1,
                    num_head_levels,
                    self.scale_bounds.len()
                ),
            });
        }
        if self
            .scale_bounds
            .windows(2)
            .any(|w| w[1] <= w[0])
            || self.scale_bounds.first().is_some_and(|&b| b <= 0.0)
        {
            return Err(crate::Error::Config {
                field: "head.scale_bounds".into(),
                constraint: "must be strictly increasing and positive".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(crate::Error::Config {
                field: "head.focal_alpha".into(),
                constraint: "must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }

    /// Scale range (lo, hi] for a head level, given the head's level list.
    pub fn scale_range(&self, levels: &[u8], level: u8) -> (f32, f32) {
        let idx = levels
            .iter()
            .position(|&l| l == level)
            .expect("level not served by the head");
        let lo = if idx == 0 {
            0.0
        } else {
            self.scale_bounds[idx - 1]
        };
        let hi = if idx == levels.len() - 1 {
            f32::INFINITY
        } else {
            self.scale_bounds[idx]
        };
        (lo, hi)
    }
}

/// Raw head outputs for one pyramid level.
pub struct HeadOutputs<S: Scalar> {
    pub level: u8,
    /// Class logits [N, K, H, W].
    pub cls: Tensor<S>,
    /// Box distances (l, t, r, b) in pixels [N, 4, H, W], positive.
    pub ltrb: Tensor<S>,
    /// Centerness logit [N, 1, H, W].
    pub ctr: Tensor<S>,
}

/// Detection head applied to every pyramid level with one parameter set;
/// only the regression rescaling scalar is per level.
pub struct DetectionHead<S: Scalar> {
    pub cfg: HeadConfig,
    pub levels: Vec<u8>,
    cls_tower: Vec<Conv2d<S>>,
    reg_tower: Vec<Conv2d<S>>,
    cls_out: Conv2d<S>,
    reg_out: Conv2d<S>,
    ctr_out: Conv2d<S>,
    level_scales: Vec<(u8, Param<S>)>,
}

/// Cap on the regression pre-exponential so early training cannot overflow.
const REG_EXP_CAP: f64 = 12.0;

impl<S: Scalar> DetectionHead<S> {
    pub fn new(cfg: &HeadConfig, levels: &[u8], channels: usize, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate(levels.len()).expect("head config validated upstream");
        let mut cls_tower = Vec::new();
        let mut reg_tower = Vec::new();
        for i in 0..cfg.tower_depth {
            cls_tower.push(Conv2d::new(
                &format!("head.cls_tower.{i}"),
                rng,
                channels,
                channels,
                3,
                1,
                1,
            ));
            reg_tower.push(Conv2d::new(
                &format!("head.reg_tower.{i}"),
                rng,
                channels,
                channels,
                3,
                1,
                1,
            ));
        }
        let cls_out = Conv2d::new("head.cls_out", rng, channels, cfg.num_classes, 3, 1, 1);
        // Prior-probability bias so the initial classification loss is small.
        let pi = 0.01f64;
        let prior = S::from_f64(-((1.0 - pi) / pi).ln());
        cls_out
            .bias
            .set_data(vec![prior; cfg.num_classes]);
        let reg_out = Conv2d::new("head.reg_out", rng, channels, 4, 3, 1, 1);
        let ctr_out = Conv2d::new("head.ctr_out", rng, channels, 1, 3, 1, 1);
        let level_scales = levels
            .iter()
            .map(|&l| {
                (
                    l,
                    Param::new(format!("head.scale{l}"), vec![S::one()], &[1]),
                )
            })
            .collect();
        DetectionHead {
            cfg: cfg.clone(),
            levels: levels.to_vec(),
            cls_tower,
            reg_tower,
            cls_out,
            reg_out,
            ctr_out,
            level_scales,
        }
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = Vec::new();
        for c in &self.cls_tower {
            p.extend(c.params());
        }
        for c in &self.reg_tower {
            p.extend(c.params());
        }
        p.extend(self.cls_out.params());
        p.extend(self.reg_out.params());
        p.extend(self.ctr_out.params());
        for (_, s) in &self.level_scales {
            p.push(s.clone());
        }
        p
    }

    fn scale_param(&self, level: u8) -> &Param<S> {
        &self
            .level_scales
            .iter()
            .find(|(l, _)| *l == level)
            .expect("level not served by the head")
            .1
    }

    /// Run the shared towers on one pyramid level.
    pub fn forward_level(&self, level: u8, feat: &Tensor<S>) -> HeadOutputs<S> {
        let mut c = feat.clone();
        for conv in &self.cls_tower {
            c = relu(&conv.forward(&c));
        }
        let cls = self.cls_out.forward(&c);

        let mut r = feat.clone();
        for conv in &self.reg_tower {
            r = relu(&conv.forward(&r));
        }
        let reg_raw = self.reg_out.forward(&r);
        let ctr = self.ctr_out.forward(&r);

        let stride = FeaturePyramid::<S>::stride(level) as f64;
        let scaled = scale_by(&reg_raw, &self.scale_param(level).value());
        let cap = Tensor::full(scaled.shape(), S::from_f64(REG_EXP_CAP));
        let ltrb = scale(&exp(&minimum(&scaled, &cap)), stride);
        HeadOutputs {
            level,
            cls,
            ltrb,
            ctr,
        }
    }

    /// Run on every level present in the pyramid (a shifted pyramid may carry
    /// only a suffix of the head's levels).
    pub fn forward_pyramid(&self, pyr: &FeaturePyramid<S>) -> Vec<HeadOutputs<S>> {
        let mut out = Vec::new();
        for (s, feat) in pyr.iter() {
            if self.levels.contains(&s) {
                out.push(self.forward_level(s, feat));
            }
        }
        out
    }
}

// ── Target assignment ────────────────────────────────────────────────

/// Dense targets for one pyramid level.
pub struct LevelTargets {
    pub level: u8,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    /// One-hot class targets [N, K, H, W].
    pub cls: Vec<f32>,
    /// Positive-location mask [N, 1, H, W].
    pub pos: Vec<f32>,
    /// Regression targets (l, t, r, b) [N, 4, H, W]; zero outside positives.
    pub reg: Vec<f32>,
    /// Centerness targets [N, 1, H, W]; zero outside positives.
    pub ctr: Vec<f32>,
    pub num_pos: usize,
}

pub struct AssignedTargets {
    pub levels: Vec<LevelTargets>,
    pub num_pos: usize,
}

/// FCOS assignment over the levels present in `level_shapes`
/// (level, N, H, W). Boxes are in the same pixel frame as the strides.
pub fn assign_targets(
    gt: &[Vec<BBox>],
    level_shapes: &[(u8, usize, usize, usize)],
    cfg: &HeadConfig,
    head_levels: &[u8],
) -> AssignedTargets {
    let k = cfg.num_classes;
    let mut out = Vec::new();
    let mut total_pos = 0usize;
    for &(level, n, h, w) in level_shapes {
        assert_eq!(n, gt.len(), "batch size mismatch in assignment");
        let stride = (1usize << level) as f32;
        let (lo, hi) = cfg.scale_range(head_levels, level);
        let mut cls = vec![0.0f32; n * k * h * w];
        let mut pos = vec![0.0f32; n * h * w];
        let mut reg = vec![0.0f32; n * 4 * h * w];
        let mut ctr = vec![0.0f32; n * h * w];
        let mut num_pos = 0usize;
        for (img, boxes) in gt.iter().enumerate() {
            for i in 0..h {
                let y = (i as f32 + 0.5) * stride;
                for j in 0..w {
                    let x = (j as f32 + 0.5) * stride;
                    // smallest-area box containing this location whose
                    // largest distance is in the level's range
                    let mut best: Option<(f32, &BBox, [f32; 4])> = None;
                    for b in boxes {
                        let l = x - b.x0;
                        let t = y - b.y0;
                        let r = b.x1 - x;
                        let bt = b.y1 - y;
                        if l <= 0.0 || t <= 0.0 || r <= 0.0 || bt <= 0.0 {
                            continue;
                        }
                        let m = l.max(t).max(r).max(bt);
                        if m <= lo || m > hi {
                            continue;
                        }
                        let area = b.area();
                        if best.as_ref().is_none_or(|(a, _, _)| area < *a) {
                            best = Some((area, b, [l, t, r, bt]));
                        }
                    }
                    if let Some((_, b, ltrb)) = best {
                        let loc = i * w + j;
                        pos[img * h * w + loc] = 1.0;
                        cls[((img * k + b.class_id) * h * w) + loc] = 1.0;
                        for (c, &v) in ltrb.iter().enumerate() {
                            reg[((img * 4 + c) * h * w) + loc] = v;
                        }
                        ctr[img * h * w + loc] = centerness(ltrb[0], ltrb[1], ltrb[2], ltrb[3]);
                        num_pos += 1;
                    }
                }
            }
        }
        total_pos += num_pos;
        out.push(LevelTargets {
            level,
            n,
            h,
            w,
            cls,
            pos,
            reg,
            ctr,
            num_pos,
        });
    }
    AssignedTargets {
        levels: out,
        num_pos: total_pos,
    }
}

// ── Detection loss ───────────────────────────────────────────────────

pub struct DetectionLoss<S: Scalar> {
    pub total: Tensor<S>,
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
}

fn const_tensor<S: Scalar>(data: &[f32], shape: &[usize]) -> Tensor<S> {
    Tensor::from_vec(
        data.iter().map(|&v| S::from_f64(v as f64)).collect(),
        shape,
    )
}

/// Integer power by repeated multiplication.
fn powi<S: Scalar>(x: &Tensor<S>, e: u32) -> Tensor<S> {
    assert!(e >= 1);
    let mut acc = x.clone();
    for _ in 1..e {
        acc = mul(&acc, x);
    }
    acc
}

const IOU_EPS: f64 = 1e-6;

/// Eq-style three-term detection loss: focal classification over all
/// locations (normalized by positive count), -ln(IoU) regression and
/// centerness BCE over positives.
pub fn detection_loss<S: Scalar>(
    outputs: &[HeadOutputs<S>],
    targets: &AssignedTargets,
    cfg: &HeadConfig,
) -> DetectionLoss<S> {
    assert_eq!(
        outputs.len(),
        targets.levels.len(),
        "outputs and targets must cover the same level set"
    );
    let norm = 1.0 / (targets.num_pos.max(1) as f64);
    let alpha = cfg.focal_alpha;
    let gamma = cfg.focal_gamma;

    let mut cls_sum: Option<Tensor<S>> = None;
    let mut reg_sum: Option<Tensor<S>> = None;
    let mut ctr_sum: Option<Tensor<S>> = None;
    let acc = |slot: &mut Option<Tensor<S>>, v: Tensor<S>| {
        *slot = Some(match slot.take() {
            Some(prev) => add(&prev, &v),
            None => v,
        });
    };

    for (out, tgt) in outputs.iter().zip(targets.levels.iter()) {
        assert_eq!(out.level, tgt.level, "level order mismatch");
        let (n, h, w) = (tgt.n, tgt.h, tgt.w);
        let kshape = [n, cfg.num_classes, h, w];
        assert_eq!(out.cls.shape(), &kshape, "cls prediction shape");

        // focal: -[alpha*t*(1-p)^g*ln p + (1-alpha)*(1-t)*p^g*ln(1-p)]
        let t = const_tensor::<S>(&tgt.cls, &kshape);
        let w_pos = scale(&t, alpha);
        let w_neg = affine(&t, -(1.0 - alpha), 1.0 - alpha);
        let p = sigmoid(&out.cls);
        let one_minus_p = affine(&p, -1.0, 1.0);
        let pos_term = mul(&mul(&w_pos, &powi(&one_minus_p, gamma)), &log_sigmoid(&out.cls));
        let neg_term = mul(
            &mul(&w_neg, &powi(&p, gamma)),
            &log_sigmoid(&neg(&out.cls)),
        );
        acc(&mut cls_sum, sum_all(&add(&pos_term, &neg_term)));

        // regression: -ln IoU, masked to positives
        let mask1 = [n, 1, h, w];
        let pos_mask = const_tensor::<S>(&tgt.pos, &mask1);
        // masking the raw distances keeps masked-out lanes numerically benign
        let pred = mul(
            &out.ltrb,
            &const_tensor::<S>(&repeat4(&tgt.pos, n, h * w), &[n, 4, h, w]),
        );
        let tgt_reg = const_tensor::<S>(&tgt.reg, &[n, 4, h, w]);
        let (pl, pt, pr, pb) = split4(&pred);
        let (tl, tt, tr, tb) = split4(&tgt_reg);
        let iw = add(&minimum(&pl, &tl), &minimum(&pr, &tr));
        let ih = add(&minimum(&pt, &tt), &minimum(&pb, &tb));
        let inter = mul(&iw, &ih);
        let area_p = mul(&add(&pl, &pr), &add(&pt, &pb));
        let area_t = mul(&add(&tl, &tr), &add(&tt, &tb));
        let union = sub(&add(&area_p, &area_t), &inter);
        let loss_elem = sub(
            &ln(&affine(&union, 1.0, IOU_EPS)),
            &ln(&affine(&inter, 1.0, IOU_EPS)),
        );
        acc(&mut reg_sum, sum_all(&mul(&loss_elem, &pos_mask)));

        // centerness BCE on positives
        let ctr_t = const_tensor::<S>(&tgt.ctr, &mask1);
        let bce = neg(&add(
            &mul(&ctr_t, &log_sigmoid(&out.ctr)),
            &mul(&affine(&ctr_t, -1.0, 1.0), &log_sigmoid(&neg(&out.ctr))),
        ));
        acc(&mut ctr_sum, sum_all(&mul(&bce, &pos_mask)));
    }

    let l_cls = scale(&cls_sum.expect("at least one level"), -norm);
    let l_reg = scale(&reg_sum.unwrap(), norm);
    let l_ctr = scale(&ctr_sum.unwrap(), norm);
    let total = add(&add(&l_cls, &l_reg), &l_ctr);
    DetectionLoss {
        cls: l_cls.item().as_f64(),
        reg: l_reg.item().as_f64(),
        ctr: l_ctr.item().as_f64(),
        total,
    }
}

/// Tile a [N,1,H,W] mask to [N,4,H,W].
fn repeat4(mask: &[f32], n: usize, plane: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * 4 * plane];
    for img in 0..n {
        let src = &mask[img * plane..(img + 1) * plane];
        for c in 0..4 {
            out[(img * 4 + c) * plane..(img * 4 + c + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

fn split4<S: Scalar>(t: &Tensor<S>) -> (Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>) {
    (
        slice_channels(t, 0, 1),
        slice_channels(t, 1, 2),
        slice_channels(t, 2, 3),
        slice_channels(t, 3, 4),
    )
}

// ── Decoding and NMS ─────────────────────────────────────────────────

/// Greedy class-wise NMS; boxes are sorted by descending score (stable for
/// ties) and a box is kept when its IoU with every kept box of the same class
/// is at or below the threshold.
pub fn nms_classwise(mut boxes: Vec<BBox>, iou_thresh: f32) -> Vec<BBox> {
    boxes.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut kept: Vec<BBox> = Vec::new();
    'cand: for b in boxes {
        for k in &kept {
            if k.class_id == b.class_id && iou(k, &b) > iou_thresh {
                continue 'cand;
            }
        }
        kept.push(b);
    }
    kept
}

/// Decode head outputs into scored boxes in the frame the strides refer to.
pub fn decode_detections<S: Scalar>(
    outputs: &[HeadOutputs<S>],
    frame: (usize, usize),
    cfg: &HeadConfig,
) -> Vec<BBox> {
    let (fh, fw) = (frame.0 as f32, frame.1 as f32);
    let mut cands: Vec<BBox> = Vec::new();
    for out in outputs {
        let s = out.cls.shape();
        let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(n, 1, "decode expects a single image");
        let stride = FeaturePyramid::<S>::stride(out.level) as f32;
        let cls = out.cls.data();
        let ltrb = out.ltrb.data();
        let ctr = out.ctr.data();
        let plane = h * w;
        for i in 0..h {
            let y = (i as f32 + 0.5) * stride;
            for j in 0..w {
                let x = (j as f32 + 0.5) * stride;
                let loc = i * w + j;
                let p_ctr = sigmoid_f64(ctr[loc].as_f64()) as f32;
                for c in 0..k {
                    let p_cls = sigmoid_f64(cls[c * plane + loc].as_f64()) as f32;
                    let score = (p_cls * p_ctr).sqrt();
                    if score < cfg.score_thresh {
                        continue;
                    }
                    let l = ltrb[loc].as_f64() as f32;
                    let t = ltrb[plane + loc].as_f64() as f32;
                    let r = ltrb[2 * plane + loc].as_f64() as f32;
                    let b = ltrb[3 * plane + loc].as_f64() as f32;
                    let bx = BBox {
                        x0: (x - l).clamp(0.0, fw),
                        y0: (y - t).clamp(0.0, fh),
                        x1: (x + r).clamp(0.0, fw),
                        y1: (y + b).clamp(0.0, fh),
                        class_id: c,
                        score,
                    };
                    if bx.x1 > bx.x0 && bx.y1 > bx.y0 {
                        cands.push(bx);
                    }
                }
            }
        }
    }
    let mut kept = nms_classwise(cands, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    kept
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
