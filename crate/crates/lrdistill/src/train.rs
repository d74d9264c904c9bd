//! Training loops: aligned/vanilla multi-scale teacher training, the
//! fusion-only second phase or joint single-phase objective, and student
//! distillation against teacher pyramid features.

use crate::config::{ExperimentConfig, KdReduction, TeacherFeatures, TrainingMode};
use crate::data::{mix64, DetectionSample, SyntheticDataset};
use crate::eval::{evaluate_ap, EvalResult};
use crate::fusion::{FusionModule, FusionWeights};
use crate::head::{
    assign_targets, decode_detections, detection_loss, BBox, DetectionLoss, HeadOutputs,
};
use crate::model::{DetectionModel, TeacherModel};
use crate::nn::Param;
use crate::pyramid::{rescale_image, FeaturePyramid, ResolutionSpec};
use crate::tensor::{abs, add, mean_all, scale, sub, sum_all, Scalar, Tensor};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

// ── Scale jitter ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScaleJitterConfig {
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl ScaleJitterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha_max && self.alpha_max <= 1.0) {
            return Err(Error::Config {
                field: "jitter.alpha_min/alpha_max".into(),
                constraint: "need 0 < alpha_min <= alpha_max <= 1".into(),
            });
        }
        Ok(())
    }
}

/// Uniform draw in [alpha_min, alpha_max]. Branches draw independently.
pub fn sample_scale(cfg: &ScaleJitterConfig, rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(cfg.alpha_min..=cfg.alpha_max)
}

// ── Optimizer ────────────────────────────────────────────────────────

/// Momentum SGD with linear warmup and step-indexed 0.1x decay milestones.
///
/// Update: d = g + wd*p; v = momentum*v + d; p -= lr*v.
pub struct Sgd<S: Scalar> {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub warmup_steps: usize,
    pub step_count: usize,
    bufs: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(
        base_lr: f64,
        momentum: f64,
        weight_decay: f64,
        milestones: Vec<usize>,
        params: &[Param<S>],
    ) -> Self {
        let bufs = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
        Sgd {
            base_lr,
            momentum,
            weight_decay,
            milestones,
            warmup_steps: 0,
            step_count: 0,
            bufs,
        }
    }

    pub fn with_warmup(mut self, steps: usize) -> Self {
        self.warmup_steps = steps;
        self
    }

    /// Learning rate for the upcoming step.
    pub fn lr(&self) -> f64 {
        if self.step_count < self.warmup_steps {
            let t = (self.step_count + 1) as f64 / self.warmup_steps as f64;
            return self.base_lr * (0.1 + 0.9 * t);
        }
        let decays = self
            .milestones
            .iter()
            .filter(|&&m| self.step_count >= m)
            .count();
        self.base_lr * 0.1f64.powi(decays as i32)
    }

    /// One update over `params` (order must match construction); gradients
    /// are consumed.
    pub fn apply(&mut self, params: &[Param<S>]) {
        assert_eq!(params.len(), self.bufs.len(), "optimizer/param mismatch");
        let lr = S::from_f64(self.lr());
        let mu = S::from_f64(self.momentum);
        let wd = S::from_f64(self.weight_decay);
        for (p, buf) in params.iter().zip(self.bufs.iter_mut()) {
            let Some(g) = p.grad() else { continue };
            let mut data = p.data();
            for i in 0..data.len() {
                let d = g[i] + wd * data[i];
                buf[i] = mu * buf[i] + d;
                data[i] = data[i] - lr * buf[i];
            }
            p.set_data(data);
            p.zero_grad();
        }
        self.step_count += 1;
    }

    pub fn momentum_buffers(&self) -> &[Vec<S>] {
        &self.bufs
    }

    pub fn restore_buffers(&mut self, bufs: Vec<Vec<S>>) {
        assert_eq!(bufs.len(), self.bufs.len());
        self.bufs = bufs;
    }
}

// ── Loss reporting ───────────────────────────────────────────────────

/// Named scalar losses for one step; composite fields are exact 64-bit
/// combinations of the logged components.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub step: usize,
    pub phase: &'static str,
    pub lr: f64,
    pub l_cls: Option<f64>,
    pub l_reg: Option<f64>,
    pub l_ctr: Option<f64>,
    pub l_hw: Option<f64>,
    pub l_hw_low: Option<f64>,
    pub l_align: Option<f64>,
    pub l_f: Option<f64>,
    pub l_t: Option<f64>,
    pub l_kd: Option<f64>,
    pub l_s: Option<f64>,
    /// (level, mean weight on high, mean weight on low) per fused level.
    pub fusion_weights: Vec<(u8, f64, f64)>,
}

impl LossReport {
    fn check_finite(&self, step: usize) -> Result<()> {
        let fields = [
            ("l_cls", self.l_cls),
            ("l_reg", self.l_reg),
            ("l_ctr", self.l_ctr),
            ("l_hw", self.l_hw),
            ("l_hw_low", self.l_hw_low),
            ("l_align", self.l_align),
            ("l_f", self.l_f),
            ("l_t", self.l_t),
            ("l_kd", self.l_kd),
            ("l_s", self.l_s),
        ];
        for (name, v) in fields {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        term: match name {
                            "l_cls" => "l_cls",
                            "l_reg" => "l_reg",
                            "l_ctr" => "l_ctr",
                            "l_hw" => "l_hw",
                            "l_hw_low" => "l_hw_low",
                            "l_align" => "l_align",
                            "l_f" => "l_f",
                            "l_t" => "l_t",
                            "l_kd" => "l_kd",
                            _ => "l_s",
                        },
                        step,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Metrics CSV with a fixed schema plus per-level fusion weight columns.
pub struct MetricsWriter {
    levels: Vec<u8>,
    lines: Vec<String>,
}

impl MetricsWriter {
    pub fn new(levels: &[u8]) -> Self {
        let mut header = String::from(
            "step,phase,lr,l_cls,l_reg,l_ctr,l_hw,l_hw_low,l_align,l_f,l_t,l_kd,l_s",
        );
        for l in levels {
            header.push_str(&format!(",w_high_l{l},w_low_l{l}"));
        }
        MetricsWriter {
            levels: levels.to_vec(),
            lines: vec![header],
        }
    }

    pub fn push(&mut self, r: &LossReport) {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut line = format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.phase,
            r.lr,
            opt(r.l_cls),
            opt(r.l_reg),
            opt(r.l_ctr),
            opt(r.l_hw),
            opt(r.l_hw_low),
            opt(r.l_align),
            opt(r.l_f),
            opt(r.l_t),
            opt(r.l_kd),
            opt(r.l_s)
        );
        for &l in &self.levels {
            match r.fusion_weights.iter().find(|(fl, _, _)| *fl == l) {
                Some((_, wh, wl)) => line.push_str(&format!(",{wh},{wl}")),
                None => line.push_str(",,"),
            }
        }
        self.lines.push(line);
    }

    pub fn contents(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.contents())?;
        Ok(())
    }
}

/// Re-check every composite loss identity in a metrics CSV.
/// Returns the number of audited rows.
pub fn audit_metrics_csv(text: &str, lambda: f64, gamma: f64) -> std::result::Result<usize, String> {
    let tol = 1e-6;
    let close = |a: f64, b: f64| (a - b).abs() <= tol * 1.0f64.max(a.abs().max(b.abs()));
    let mut rows = 0usize;
    let mut cols: Vec<String> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            cols = line.split(',').map(|s| s.to_string()).collect();
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split(',').collect();
        let get = |name: &str| -> Option<f64> {
            let idx = cols.iter().position(|c| c == name)?;
            vals.get(idx).and_then(|v| v.parse().ok())
        };
        let phase = vals[1];
        let (cls, reg, ctr) = (get("l_cls"), get("l_reg"), get("l_ctr"));
        let det = match (cls, reg, ctr) {
            (Some(a), Some(b), Some(c)) => Some(a + b + c),
            _ => None,
        };
        let fail = |eq: &str| Err::<usize, String>(format!("row {}: {} violated: {line}", i + 1, eq));
        match phase {
            "align" | "vanilla" => {
                if let (Some(d), Some(hw)) = (det, get("l_hw")) {
                    if !close(d, hw) {
                        return fail("l_hw = l_cls + l_reg + l_ctr");
                    }
                }
                if phase == "align" {
                    let (hw, low, al) = (get("l_hw"), get("l_hw_low"), get("l_align"));
                    if let (Some(hw), Some(low), Some(al)) = (hw, low, al) {
                        if !close(hw + low, al) {
                            return fail("l_align = l_hw + l_hw_low");
                        }
                    } else {
                        return fail("align row must carry l_hw, l_hw_low, l_align");
                    }
                }
            }
            "fusion" => {
                if let (Some(d), Some(f)) = (det, get("l_f")) {
                    if !close(lambda * d, f) {
                        return fail("l_f = lambda * (l_cls + l_reg + l_ctr)");
                    }
                } else {
                    return fail("fusion row must carry components and l_f");
                }
            }
            "joint" => {
                let (hw, low, al) = (get("l_hw"), get("l_hw_low"), get("l_align"));
                if let (Some(hw), Some(low), Some(al)) = (hw, low, al) {
                    if !close(hw + low, al) {
                        return fail("l_align = l_hw + l_hw_low");
                    }
                } else {
                    return fail("joint row must carry l_hw, l_hw_low, l_align");
                }
                if let (Some(d), Some(f)) = (det, get("l_f")) {
                    if !close(lambda * d, f) {
                        return fail("l_f = lambda * (l_cls + l_reg + l_ctr)");
                    }
                }
                if let (Some(al), Some(f), Some(t)) = (get("l_align"), get("l_f"), get("l_t")) {
                    if !close(al + f, t) {
                        return fail("l_t = l_align + l_f");
                    }
                } else {
                    return fail("joint row must carry l_align, l_f, l_t");
                }
            }
            "student" => {
                if let (Some(d), Some(low)) = (det, get("l_hw_low")) {
                    if !close(d, low) {
                        return fail("l_hw_low = l_cls + l_reg + l_ctr");
                    }
                }
                let (kd, low, s) = (get("l_kd"), get("l_hw_low"), get("l_s"));
                if let (Some(low), Some(s)) = (low, s) {
                    let kd = kd.unwrap_or(0.0);
                    if !close(gamma * kd + (1.0 - gamma) * low, s) {
                        return fail("l_s = gamma*l_kd + (1-gamma)*l_hw_low");
                    }
                } else {
                    return fail("student row must carry l_hw_low and l_s");
                }
            }
            other => return Err(format!("row {}: unknown phase `{other}`", i + 1)),
        }
        rows += 1;
    }
    Ok(rows)
}

// ── Distillation loss ────────────────────────────────────────────────

/// tau * sum over teacher levels of the (mean|sum) absolute feature
/// difference. Teacher features are constants: no gradient reaches them.
pub fn kd_loss<S: Scalar>(
    teacher: &FeaturePyramid<S>,
    student: &FeaturePyramid<S>,
    tau: f64,
    reduction: KdReduction,
) -> Result<Tensor<S>> {
    let mut total: Option<Tensor<S>> = None;
    for (level, t_feat) in teacher.iter() {
        let s_feat = student.level(level).ok_or_else(|| {
            Error::Alignment(format!(
                "student pyramid lacks level {level} required for distillation"
            ))
        })?;
        if s_feat.shape() != t_feat.shape() {
            return Err(Error::Alignment(format!(
                "level {level}: student {:?} vs teacher {:?}",
                s_feat.shape(),
                t_feat.shape()
            )));
        }
        let diff = abs(&sub(s_feat, &t_feat.detach()));
        let red = match reduction {
            KdReduction::Mean => mean_all(&diff),
            KdReduction::Sum => sum_all(&diff),
        };
        total = Some(match total {
            Some(acc) => add(&acc, &red),
            None => red,
        });
    }
    let total = total.ok_or_else(|| Error::Alignment("empty teacher pyramid".into()))?;
    Ok(scale(&total, tau))
}

// ── Batch assembly ───────────────────────────────────────────────────

struct Batch {
    images: Tensor<f32>,
    /// Boxes in the (possibly virtual) frame matching the pyramid strides.
    boxes: Vec<Vec<BBox>>,
    /// Frame the strides refer to.
    frame: (usize, usize),
}

/// Rescale every sample by `factor` (sides rounded up to `multiple`) and
/// stack. `box_frame_mult` maps box coordinates into the stride frame: 1 for
/// a standard pyramid, k for a shifted one.
fn make_batch(
    samples: &[&DetectionSample],
    factor: f64,
    multiple: usize,
    box_frame_mult: usize,
) -> Result<Batch> {
    assert!(!samples.is_empty());
    let mut planes = Vec::with_capacity(samples.len());
    let mut boxes = Vec::with_capacity(samples.len());
    let mut out_hw = (0usize, 0usize);
    for s in samples {
        let scaled = rescale_image(&s.image, factor, multiple)?;
        let sh = scaled.shape();
        out_hw = (sh[1], sh[2]);
        let orig = s.image.shape();
        let fy = (sh[1] * box_frame_mult) as f32 / orig[1] as f32;
        let fx = (sh[2] * box_frame_mult) as f32 / orig[2] as f32;
        boxes.push(s.boxes.iter().map(|b| b.scaled(fx, fy)).collect());
        planes.push(scaled);
    }
    let (h, w) = out_hw;
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for p in &planes {
        assert_eq!(p.shape(), &[3, h, w], "jittered batch sizes must agree");
        data.extend_from_slice(p.data());
    }
    Ok(Batch {
        images: Tensor::from_vec(data, &[samples.len(), 3, h, w]),
        boxes,
        frame: (h * box_frame_mult, w * box_frame_mult),
    })
}

fn level_shapes<S: Scalar>(outs: &[HeadOutputs<S>]) -> Vec<(u8, usize, usize, usize)> {
    outs.iter()
        .map(|o| {
            let s = o.cls.shape();
            (o.level, s[0], s[2], s[3])
        })
        .collect()
}

fn branch_loss(
    model: &DetectionModel<f32>,
    outs: &[HeadOutputs<f32>],
    boxes: &[Vec<BBox>],
) -> DetectionLoss<f32> {
    let targets = assign_targets(boxes, &level_shapes(outs), &model.head.cfg, model.head_levels());
    detection_loss(outs, &targets, &model.head.cfg)
}

fn mean_weights(weights: &[FusionWeights]) -> Vec<(u8, f64, f64)> {
    weights
        .iter()
        .map(|w| {
            let n = w.w_high.len().max(1) as f64;
            (
                w.level,
                w.w_high.iter().sum::<f64>() / n,
                w.w_low.iter().sum::<f64>() / n,
            )
        })
        .collect()
}

// ── Steps ────────────────────────────────────────────────────────────

struct StepCtx<'a> {
    cfg: &'a ExperimentConfig,
    spec: ResolutionSpec,
    high_mult: usize,
    low_mult: usize,
}

impl<'a> StepCtx<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        let spec = cfg.resolution_spec()?;
        let high_mult = 1usize << cfg.backbone.max_level;
        let low_mult = 1usize << (cfg.backbone.max_level - cfg.m()? as u8);
        Ok(StepCtx {
            cfg,
            spec,
            high_mult,
            low_mult,
        })
    }
}

/// Shared-weight two-branch step: full pyramid on the jittered high input,
/// shifted pyramid on the independently jittered low input, one update on
/// the summed detection losses.
fn aligned_ms_step(
    model: &DetectionModel<f32>,
    samples: &[&DetectionSample],
    ctx: &StepCtx<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, LossReport)> {
    let a_high = sample_scale(&ctx.cfg.jitter, rng);
    let a_low = sample_scale(&ctx.cfg.jitter, rng);

    let high = make_batch(samples, a_high, ctx.high_mult, 1)?;
    let outs_h = model.forward_standard(&high.images)?;
    let loss_h = branch_loss(model, &outs_h, &high.boxes);

    let low = make_batch(samples, a_low / ctx.spec.k as f64, ctx.low_mult, ctx.spec.k)?;
    let (_pyr, outs_l) = model.forward_aligned(&low.images, &ctx.spec)?;
    let loss_l = branch_loss(model, &outs_l, &low.boxes);

    let total = add(&loss_h.total, &loss_l.total);
    let l_hw = loss_h.cls + loss_h.reg + loss_h.ctr;
    let l_hw_low = loss_l.cls + loss_l.reg + loss_l.ctr;
    let report = LossReport {
        phase: "align",
        l_cls: Some(loss_h.cls),
        l_reg: Some(loss_h.reg),
        l_ctr: Some(loss_h.ctr),
        l_hw: Some(l_hw),
        l_hw_low: Some(l_hw_low),
        l_align: Some(l_hw + l_hw_low),
        ..Default::default()
    };
    Ok((total, report))
}

/// Conventional multi-scale step: both base resolutions per iteration with
/// independently jittered inputs and standard (unshifted) pyramids, each in
/// its own pixel frame. Matches the aligned step's gradient signal so the
/// comparison isolates the pyramid-shift alignment itself.
fn vanilla_step(
    model: &DetectionModel<f32>,
    samples: &[&DetectionSample],
    ctx: &StepCtx<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, LossReport)> {
    let a_high = sample_scale(&ctx.cfg.jitter, rng);
    let a_low = sample_scale(&ctx.cfg.jitter, rng);

    let high = make_batch(samples, a_high, ctx.high_mult, 1)?;
    let outs_h = model.forward_standard(&high.images)?;
    let loss_h = branch_loss(model, &outs_h, &high.boxes);

    let low = make_batch(samples, a_low / ctx.spec.k as f64, ctx.high_mult, 1)?;
    let outs_l = model.forward_standard(&low.images)?;
    let loss_l = branch_loss(model, &outs_l, &low.boxes);

    let total = add(&loss_h.total, &loss_l.total);
    let report = LossReport {
        phase: "vanilla",
        l_cls: Some(loss_h.cls),
        l_reg: Some(loss_h.reg),
        l_ctr: Some(loss_h.ctr),
        l_hw: Some(loss_h.cls + loss_h.reg + loss_h.ctr),
        l_hw_low: Some(loss_l.cls + loss_l.reg + loss_l.ctr),
        ..Default::default()
    };
    Ok((total, report))
}

/// Fusion loss at the base (unjittered) resolution pair.
fn fused_detection_loss(
    teacher: &TeacherModel<f32>,
    samples: &[&DetectionSample],
    ctx: &StepCtx<'_>,
) -> Result<(DetectionLoss<f32>, Vec<FusionWeights>)> {
    let high = make_batch(samples, 1.0, ctx.high_mult, 1)?;
    let low = make_batch(samples, 1.0 / ctx.spec.k as f64, ctx.low_mult, ctx.spec.k)?;
    let (fused, weights) = teacher.fused_pyramid(&high.images, &low.images, &ctx.spec)?;
    let outs = teacher.head().forward_pyramid(&fused);
    Ok((branch_loss(&teacher.core, &outs, &high.boxes), weights))
}

// ── Teacher training ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    TwoStep,
    Joint,
}

pub struct TrainedTeacher {
    pub model: TeacherModel<f32>,
    pub reports: Vec<LossReport>,
    pub metrics: MetricsWriter,
    pub final_step: usize,
}

fn epoch_batches(
    n: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size)
        .filter(|c| c.len() == batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// Detection-phase training per the configured mode; for the joint strategy
/// the fusion term is minimized simultaneously. The returned teacher carries
/// untrained fusion parameters for the two-step strategy (train them with
/// [`train_fusion_only`]); [`train_teacher`] wires both phases together.
pub fn train_teacher_detection(
    cfg: &ExperimentConfig,
    strategy: Strategy,
) -> Result<TrainedTeacher> {
    cfg.validate()?;
    let ctx = StepCtx::new(cfg)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed, 0));
    let fusion = match cfg.training.mode {
        TrainingMode::Aligned => Some((cfg.fusion.variant, cfg.fusion.compression)),
        TrainingMode::Vanilla => None,
    };
    let teacher = TeacherModel::<f32>::new(
        &cfg.backbone,
        &cfg.head_config(),
        cfg.m()?,
        fusion,
        &mut init_rng,
    );
    let mut train_rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed, 1));
    let ds = SyntheticDataset::new(cfg.scene_spec(10), cfg.dataset.train_images)?;
    let mut cache: Vec<Option<DetectionSample>> = (0..ds.len).map(|_| None).collect();

    let steps_per_epoch = cfg.dataset.train_images / cfg.optim.batch_size;
    let mut metrics = MetricsWriter::new(&cfg.head_levels());
    let mut reports = Vec::new();
    let joint = strategy == Strategy::Joint && teacher.fusion.is_some();

    let core_params = if joint {
        teacher.params()
    } else {
        teacher.core.params()
    };
    let mut opt = Sgd::new(
        cfg.optim.lr,
        cfg.optim.momentum,
        cfg.optim.weight_decay,
        cfg.milestone_steps(steps_per_epoch, cfg.optim.epochs),
        &core_params,
    )
    .with_warmup(cfg.optim.warmup_steps);
    for _epoch in 0..cfg.optim.epochs {
        for batch_idx in epoch_batches(ds.len, cfg.optim.batch_size, &mut train_rng) {
            for &i in &batch_idx {
                if cache[i].is_none() {
                    cache[i] = Some(ds.sample(i)?);
                }
            }
            let samples: Vec<&DetectionSample> =
                batch_idx.iter().map(|&i| cache[i].as_ref().unwrap()).collect();
            let lr = opt.lr();
            let step = opt.step_count;
            let (total, mut report) = match cfg.training.mode {
                TrainingMode::Aligned => aligned_ms_step(&teacher.core, &samples, &ctx, &mut train_rng)?,
                TrainingMode::Vanilla => vanilla_step(&teacher.core, &samples, &ctx, &mut train_rng)?,
            };
            let (total, phase) = if joint {
                let (floss, weights) = fused_detection_loss(&teacher, &samples, &ctx)?;
                let det = floss.cls + floss.reg + floss.ctr;
                let l_f = cfg.loss.lambda * det;
                report.l_cls = Some(floss.cls);
                report.l_reg = Some(floss.reg);
                report.l_ctr = Some(floss.ctr);
                report.l_f = Some(l_f);
                report.l_t = Some(report.l_align.unwrap() + l_f);
                report.fusion_weights = mean_weights(&weights);
                (
                    add(&total, &scale(&floss.total, cfg.loss.lambda)),
                    "joint",
                )
            } else {
                (total, report.phase)
            };
            report.phase = phase;
            report.step = step;
            report.lr = lr;
            report.check_finite(step)?;
            total.backward().expect("loss is scalar");
            opt.apply(&core_params);
            metrics.push(&report);
            reports.push(report);
        }
    }
    Ok(TrainedTeacher {
        final_step: opt.step_count,
        model: teacher,
        reports,
        metrics,
    })
}

pub struct TrainedFusion {
    pub module: FusionModule<f32>,
    pub reports: Vec<LossReport>,
}

/// Train a fresh fusion module of the given variant against a frozen core
/// (the two-step second phase). The core's parameters are bitwise untouched.
pub fn train_fusion_only(
    cfg: &ExperimentConfig,
    core: &DetectionModel<f32>,
    variant: crate::fusion::FusionVariant,
    step_offset: usize,
    metrics: &mut MetricsWriter,
) -> Result<TrainedFusion> {
    let ctx = StepCtx::new(cfg)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed, 4));
    let module = FusionModule::new(
        variant,
        core.head_levels(),
        cfg.backbone.pyramid_channels,
        cfg.fusion.compression,
        &mut init_rng,
    );
    let mut train_rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed, 5));
    let ds = SyntheticDataset::new(cfg.scene_spec(10), cfg.dataset.train_images)?;
    let mut cache: Vec<Option<DetectionSample>> = (0..ds.len).map(|_| None).collect();
    let steps_per_epoch = cfg.dataset.train_images / cfg.optim.batch_size;

    let was_trainable: Vec<bool> = core.params().iter().map(|p| p.trainable()).collect();
    core.set_trainable(false);
    let fusion_params = module.params();
    let mut opt = Sgd::new(
        cfg.optim.lr,
        cfg.optim.momentum,
        cfg.optim.weight_decay,
        cfg.milestone_steps(steps_per_epoch, cfg.optim.fusion_epochs),
        &fusion_params,
    )
    .with_warmup(cfg.optim.warmup_steps.min(steps_per_epoch));
    let mut reports = Vec::new();
    let run = (|| -> Result<()> {
        for _epoch in 0..cfg.optim.fusion_epochs {
            for batch_idx in epoch_batches(ds.len, cfg.optim.batch_size, &mut train_rng) {
                for &i in &batch_idx {
                    if cache[i].is_none() {
                        cache[i] = Some(ds.sample(i)?);
                    }
                }
                let samples: Vec<&DetectionSample> =
                    batch_idx.iter().map(|&i| cache[i].as_ref().unwrap()).collect();
                let lr = opt.lr();
                let step = step_offset + opt.step_count;
                let high = make_batch(&samples, 1.0, ctx.high_mult, 1)?;
                let low =
                    make_batch(&samples, 1.0 / ctx.spec.k as f64, ctx.low_mult, ctx.spec.k)?;
                let hp = core.backbone.forward_pyramid(&high.images)?;
                let lp = core.backbone.aligned_pyramid(&low.images, &ctx.spec)?;
                let (fused, weights) = crate::fusion::fuse_pyramids(&hp, &lp, &module)?;
                let outs = core.head.forward_pyramid(&fused);
                let floss = branch_loss(core, &outs, &high.boxes);
                let det = floss.cls + floss.reg + floss.ctr;
                let report = LossReport {
                    step,
                    phase: "fusion",
                    lr,
                    l_cls: Some(floss.cls),
                    l_reg: Some(floss.reg),
                    l_ctr: Some(floss.ctr),
                    l_f: Some(cfg.loss.lambda * det),
                    fusion_weights: mean_weights(&weights),
                    ..Default::default()
                };
                report.check_finite(step)?;
                scale(&floss.total, cfg.loss.lambda)
                    .backward()
                    .expect("loss is scalar");
                opt.apply(&fusion_params);
                metrics.push(&report);
                reports.push(report);
            }
        }
        Ok(())
    })();
    for (p, w) in core.params().iter().zip(was_trainable) {
        p.set_trainable(w);
    }
    run?;
    Ok(TrainedFusion { module, reports })
}

/// Full teacher training: the detection phase, then (two-step, aligned mode)
/// the fusion-only phase with the configured variant.
pub fn train_teacher(cfg: &ExperimentConfig, strategy: Strategy) -> Result<TrainedTeacher> {
    let mut trained = train_teacher_detection(cfg, strategy)?;
    if strategy == Strategy::TwoStep && trained.model.fusion.is_some() {
        let fused = train_fusion_only(
            cfg,
            &trained.model.core,
            cfg.fusion.variant,
            trained.final_step,
            &mut trained.metrics,
        )?;
        trained.final_step += fused.reports.len();
        trained.reports.extend(fused.reports);
        trained.model.fusion = Some(fused.module);
    }
    Ok(trained)
}

// ── Student distillation ─────────────────────────────────────────────

pub struct TrainedStudent {
    pub model: DetectionModel<f32>,
    pub reports: Vec<LossReport>,
    pub metrics: MetricsWriter,
    pub final_step: usize,
}

/// Train a low-resolution student initialized from the teacher. With
/// gamma = 0 (or `no_kd`) the teacher is never consulted and the loss is the
/// plain low-resolution detection loss.
pub fn distill_student(
    cfg: &ExperimentConfig,
    teacher: &TeacherModel<f32>,
    no_kd: bool,
) -> Result<TrainedStudent> {
    cfg.validate()?;
    let ctx = StepCtx::new(cfg)?;
    let gamma = if no_kd { 0.0 } else { cfg.loss.gamma };
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed, 2));
    let student = DetectionModel::<f32>::new(
        &cfg.backbone,
        &cfg.head_config(),
        cfg.m()?,
        &mut init_rng,
    );
    student.copy_weights_from(&teacher.core);
    teacher.set_trainable(false);

    let mut train_rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed, 3));
    let ds = SyntheticDataset::new(cfg.scene_spec(10), cfg.dataset.train_images)?;
    let mut cache: Vec<Option<DetectionSample>> = (0..ds.len).map(|_| None).collect();
    let steps_per_epoch = cfg.dataset.train_images / cfg.optim.batch_size;
    let params = student.params();
    let mut opt = Sgd::new(
        cfg.optim.lr,
        cfg.optim.momentum,
        cfg.optim.weight_decay,
        cfg.milestone_steps(steps_per_epoch, cfg.optim.epochs),
        &params,
    )
    .with_warmup(cfg.optim.warmup_steps);
    let mut metrics = MetricsWriter::new(&cfg.head_levels());
    let mut reports = Vec::new();

    for _epoch in 0..cfg.optim.epochs {
        for batch_idx in epoch_batches(ds.len, cfg.optim.batch_size, &mut train_rng) {
            for &i in &batch_idx {
                if cache[i].is_none() {
                    cache[i] = Some(ds.sample(i)?);
                }
            }
            let samples: Vec<&DetectionSample> =
                batch_idx.iter().map(|&i| cache[i].as_ref().unwrap()).collect();
            let lr = opt.lr();
            let step = opt.step_count;

            // single-scale low-resolution input for the student
            let low = make_batch(&samples, 1.0 / ctx.spec.k as f64, ctx.low_mult, ctx.spec.k)?;
            let (stu_pyr, outs) = student.forward_aligned(&low.images, &ctx.spec)?;
            let det = branch_loss(&student, &outs, &low.boxes);
            let l_det = det.cls + det.reg + det.ctr;

            let mut report = LossReport {
                step,
                phase: "student",
                lr,
                l_cls: Some(det.cls),
                l_reg: Some(det.reg),
                l_ctr: Some(det.ctr),
                l_hw_low: Some(l_det),
                ..Default::default()
            };

            let total = if gamma == 0.0 {
                report.l_kd = Some(0.0);
                report.l_s = Some(l_det);
                det.total
            } else {
                // the teacher sees the unjittered high/low pair of the same
                // images the student is learning from
                let high = make_batch(&samples, 1.0, ctx.high_mult, 1)?;
                let t_pyr = match cfg.loss.teacher_features {
                    TeacherFeatures::Fused => {
                        let (pyr, weights) =
                            teacher.fused_pyramid(&high.images, &low.images, &ctx.spec)?;
                        report.fusion_weights = mean_weights(&weights);
                        pyr
                    }
                    TeacherFeatures::High => {
                        let full = teacher.backbone().forward_pyramid(&high.images)?;
                        restrict_levels(&full, student.head_levels())
                    }
                };
                let kd = kd_loss(&t_pyr, &stu_pyr, cfg.loss.tau, cfg.loss.kd_reduction)?;
                let l_kd = kd.item() as f64;
                report.l_kd = Some(l_kd);
                report.l_s = Some(gamma * l_kd + (1.0 - gamma) * l_det);
                add(&scale(&kd, gamma), &scale(&det.total, 1.0 - gamma))
            };
            report.check_finite(step)?;
            total.backward().expect("loss is scalar");
            opt.apply(&params);
            metrics.push(&report);
            reports.push(report);
        }
    }
    Ok(TrainedStudent {
        final_step: opt.step_count,
        model: student,
        reports,
        metrics,
    })
}

/// Clone a view of a pyramid restricted to the given levels.
pub fn restrict_levels<S: Scalar>(pyr: &FeaturePyramid<S>, levels: &[u8]) -> FeaturePyramid<S> {
    let kept: Vec<(u8, Tensor<S>)> = pyr
        .iter()
        .filter(|(l, _)| levels.contains(l))
        .map(|(l, t)| (l, t.clone()))
        .collect();
    FeaturePyramid::new(kept, pyr.channels)
}

// ── Evaluation ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalInput {
    /// Full-resolution input, standard pyramid.
    High,
    /// 1/k input through the shifted pyramid (boxes come out in the original
    /// frame).
    LowAligned,
    /// 1/k input through the standard pyramid in its own frame; boxes are
    /// rescaled back to the original frame afterwards.
    LowVanilla,
    /// Fused high/low pyramids (teacher only).
    Fused,
}

/// Detections for every image of a dataset under one input protocol.
pub fn run_inference(
    core: &DetectionModel<f32>,
    fusion: Option<&FusionModule<f32>>,
    cfg: &ExperimentConfig,
    ds: &SyntheticDataset,
    input: EvalInput,
) -> Result<(Vec<Vec<BBox>>, Vec<Vec<BBox>>)> {
    let ctx = StepCtx::new(cfg)?;
    // inference mode: no graph recording
    let params = core.params();
    let was: Vec<bool> = params.iter().map(|p| p.trainable()).collect();
    for p in &params {
        p.set_trainable(false);
    }
    let fusion_params: Vec<Param<f32>> = fusion.map(|f| f.params()).unwrap_or_default();
    let fusion_was: Vec<bool> = fusion_params.iter().map(|p| p.trainable()).collect();
    for p in &fusion_params {
        p.set_trainable(false);
    }

    let result = (|| -> Result<(Vec<Vec<BBox>>, Vec<Vec<BBox>>)> {
        let mut preds = Vec::with_capacity(ds.len);
        let mut gts = Vec::with_capacity(ds.len);
        let bsz = cfg.optim.batch_size.max(1);
        let mut idx = 0usize;
        while idx < ds.len {
            let hi = (idx + bsz).min(ds.len);
            let samples: Vec<DetectionSample> =
                (idx..hi).map(|i| ds.sample(i)).collect::<Result<_>>()?;
            let refs: Vec<&DetectionSample> = samples.iter().collect();
            let (outs, frame, rescale_back) = match input {
                EvalInput::High => {
                    let b = make_batch(&refs, 1.0, ctx.high_mult, 1)?;
                    (core.forward_standard(&b.images)?, b.frame, 1.0f32)
                }
                EvalInput::LowAligned => {
                    let b = make_batch(&refs, 1.0 / ctx.spec.k as f64, ctx.low_mult, ctx.spec.k)?;
                    let (_pyr, outs) = core.forward_aligned(&b.images, &ctx.spec)?;
                    (outs, b.frame, 1.0)
                }
                EvalInput::LowVanilla => {
                    let b = make_batch(&refs, 1.0 / ctx.spec.k as f64, ctx.high_mult, 1)?;
                    (
                        core.forward_standard(&b.images)?,
                        b.frame,
                        ctx.spec.k as f32,
                    )
                }
                EvalInput::Fused => {
                    let fusion = fusion.ok_or_else(|| {
                        Error::CkptIncompatible(
                            "fused evaluation requested but the checkpoint has no fusion parameters"
                                .into(),
                        )
                    })?;
                    let bh = make_batch(&refs, 1.0, ctx.high_mult, 1)?;
                    let bl = make_batch(&refs, 1.0 / ctx.spec.k as f64, ctx.low_mult, ctx.spec.k)?;
                    let high = core.backbone.forward_pyramid(&bh.images)?;
                    let low = core.backbone.aligned_pyramid(&bl.images, &ctx.spec)?;
                    let (fused, _w) = crate::fusion::fuse_pyramids(&high, &low, fusion)?;
                    (core.head.forward_pyramid(&fused), bh.frame, 1.0)
                }
            };
            for (bi, sample) in samples.iter().enumerate() {
                let single = split_image(&outs, bi);
                let mut dets = decode_detections(&single, frame, &core.head.cfg);
                if rescale_back != 1.0 {
                    for d in &mut dets {
                        *d = d.scaled(rescale_back, rescale_back);
                    }
                }
                preds.push(dets);
                gts.push(sample.boxes.clone());
            }
            idx = hi;
        }
        Ok((preds, gts))
    })();

    for (p, w) in params.iter().zip(was) {
        p.set_trainable(w);
    }
    for (p, w) in fusion_params.iter().zip(fusion_was) {
        p.set_trainable(w);
    }
    result
}

pub fn eval_model(
    core: &DetectionModel<f32>,
    fusion: Option<&FusionModule<f32>>,
    cfg: &ExperimentConfig,
    ds: &SyntheticDataset,
    input: EvalInput,
) -> Result<EvalResult> {
    let (preds, gts) = run_inference(core, fusion, cfg, ds, input)?;
    Ok(evaluate_ap(
        &preds,
        &gts,
        cfg.dataset.num_classes,
        cfg.dataset.image_size,
    ))
}

/// Copy one image's slice out of batched head outputs.
fn split_image(outs: &[HeadOutputs<f32>], index: usize) -> Vec<HeadOutputs<f32>> {
    outs.iter()
        .map(|o| {
            let take = |t: &Tensor<f32>| {
                let s = t.shape();
                let per = s[1] * s[2] * s[3];
                Tensor::from_vec(
                    t.data()[index * per..(index + 1) * per].to_vec(),
                    &[1, s[1], s[2], s[3]],
                )
            };
            HeadOutputs {
                level: o.level,
                cls: take(&o.cls),
                ltrb: take(&o.ltrb),
                ctr: take(&o.ctr),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::BackboneConfig;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.image_size = 128;
        cfg.dataset.train_images = 16;
        cfg.dataset.val_images = 4;
        cfg.backbone = BackboneConfig {
            stage_widths: vec![4, 8, 8, 8],
            pyramid_channels: 8,
            min_level: 2,
            max_level: 6,
        };
        cfg.head.tower_depth = 1;
        cfg.optim.batch_size = 4;
        cfg.optim.epochs = 1;
        cfg.optim.fusion_epochs = 1;
        cfg
    }

    #[test]
    fn sample_scale_degenerate_and_seeded() {
        let cfg = ScaleJitterConfig {
            alpha_min: 1.0,
            alpha_max: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            assert_eq!(sample_scale(&cfg, &mut rng), 1.0);
        }
        let cfg = ScaleJitterConfig {
            alpha_min: 0.8,
            alpha_max: 1.0,
        };
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let seq_a: Vec<f64> = (0..10).map(|_| sample_scale(&cfg, &mut a)).collect();
        let seq_b: Vec<f64> = (0..10).map(|_| sample_scale(&cfg, &mut b)).collect();
        assert_eq!(seq_a, seq_b);
    }

    #[test]
    fn sample_scale_monte_carlo_mean() {
        let cfg = ScaleJitterConfig {
            alpha_min: 0.8,
            alpha_max: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let mean: f64 = (0..n).map(|_| sample_scale(&cfg, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.9).abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn sgd_zero_grad_zero_momentum_keeps_params() {
        let p = Param::<f32>::new("p", vec![1.0, -2.0], &[2]);
        let mut opt = Sgd::new(0.1, 0.9, 0.0, vec![], &[p.clone()]);
        // no backward ran: grad is None, parameter must not move
        opt.apply(&[p.clone()]);
        assert_eq!(p.data(), vec![1.0, -2.0]);
    }

    #[test]
    fn sgd_matches_hand_computed_momentum_recursion() {
        // quadratic loss f(x) = 0.5*a*x^2, gradient a*x
        let a = 0.7f64;
        let (lr, mu) = (0.1f64, 0.9f64);
        let p = Param::<f64>::new("x", vec![2.0], &[1]);
        let mut opt = Sgd::new(lr, mu, 0.0, vec![], &[p.clone()]);
        let mut x_ref = 2.0f64;
        let mut v_ref = 0.0f64;
        for _ in 0..8 {
            let x = p.value();
            let loss = scale(&mul_square(&x), 0.5 * a);
            loss.backward().unwrap();
            opt.apply(&[p.clone()]);
            // hand recursion
            let g = a * x_ref;
            v_ref = mu * v_ref + g;
            x_ref -= lr * v_ref;
            assert!((p.data()[0] - x_ref).abs() < 1e-12, "{} vs {x_ref}", p.data()[0]);
        }
    }

    fn mul_square(x: &Tensor<f64>) -> Tensor<f64> {
        sum_all(&crate::tensor::mul(x, x))
    }

    #[test]
    fn lr_decays_tenfold_at_each_milestone() {
        let p = Param::<f32>::new("p", vec![0.0], &[1]);
        let mut opt = Sgd::new(0.01, 0.9, 0.0, vec![3, 5], &[p.clone()]);
        let mut lrs = Vec::new();
        for _ in 0..6 {
            lrs.push(opt.lr());
            opt.step_count += 1;
        }
        assert_eq!(lrs[..3], [0.01, 0.01, 0.01]);
        assert!((lrs[3] - 0.001).abs() < 1e-12);
        assert!((lrs[4] - 0.001).abs() < 1e-12);
        assert!((lrs[5] - 0.0001).abs() < 1e-12, "after second milestone: 0.01 * 0.01");
    }

    #[test]
    fn kd_loss_examples() {
        let t = FeaturePyramid::new(
            (3u8..8)
                .map(|l| {
                    let hw = 1usize << (8 - l);
                    (l, Tensor::<f64>::full(&[1, 2, hw, hw], 0.3))
                })
                .collect(),
            2,
        );
        let same = FeaturePyramid::new(
            (3u8..8)
                .map(|l| {
                    let hw = 1usize << (8 - l);
                    (l, Tensor::<f64>::full(&[1, 2, hw, hw], 0.3))
                })
                .collect(),
            2,
        );
        assert_eq!(
            kd_loss(&t, &same, 3.0, KdReduction::Mean).unwrap().item(),
            0.0
        );
        // student = teacher + 0.1 on five levels, tau=3: 3 * 5 * 0.1 = 1.5
        let shifted = FeaturePyramid::new(
            (3u8..8)
                .map(|l| {
                    let hw = 1usize << (8 - l);
                    (l, Tensor::<f64>::full(&[1, 2, hw, hw], 0.4))
                })
                .collect(),
            2,
        );
        let v = kd_loss(&t, &shifted, 3.0, KdReduction::Mean).unwrap().item();
        assert!((v - 1.5).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn kd_loss_gradient_is_scaled_sign() {
        use crate::tensor::gradcheck::finite_diff_gradcheck;
        let t = FeaturePyramid::new(vec![(3, Tensor::<f64>::full(&[1, 2, 2, 2], 0.5))], 2);
        let init: Vec<f64> = (0..8).map(|i| 0.5 + 0.2 * ((i % 3) as f64 - 1.0) + 0.05).collect();
        let x = Tensor::from_vec(init.clone(), &[1, 2, 2, 2]);
        let err = finite_diff_gradcheck(
            move |v| {
                let stu = FeaturePyramid::new(vec![(3, v.clone())], 2);
                kd_loss(&t, &stu, 3.0, KdReduction::Mean).unwrap()
            },
            &x,
            1e-6,
        );
        assert!(err < 1e-4, "kd gradcheck err = {err}");
        // analytic check: tau*sign(diff)/numel
        let t2 = FeaturePyramid::new(vec![(3, Tensor::<f64>::full(&[1, 2, 2, 2], 0.5))], 2);
        let xp = Tensor::param(init.clone(), &[1, 2, 2, 2]);
        let stu = FeaturePyramid::new(vec![(3, xp.clone())], 2);
        kd_loss(&t2, &stu, 3.0, KdReduction::Mean)
            .unwrap()
            .backward()
            .unwrap();
        for (g, v) in xp.grad().unwrap().iter().zip(init.iter()) {
            let want = 3.0 * (v - 0.5).signum() / 8.0;
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn kd_loss_rejects_mismatched_pyramids() {
        let t = FeaturePyramid::new(vec![(3, Tensor::<f64>::full(&[1, 2, 4, 4], 0.1))], 2);
        let s = FeaturePyramid::new(vec![(4, Tensor::<f64>::full(&[1, 2, 4, 4], 0.1))], 2);
        assert!(matches!(
            kd_loss(&t, &s, 1.0, KdReduction::Mean),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn aligned_step_degenerate_k1_doubles_single_branch_loss() {
        // k forced to 1: both branches see the same input, L_align = 2*L_hw
        let mut cfg = tiny_cfg();
        cfg.backbone.max_level = 5; // head levels 2..5 with m = 0
        cfg.jitter = ScaleJitterConfig {
            alpha_min: 1.0,
            alpha_max: 1.0,
        };
        let ctx = StepCtx {
            cfg: &cfg,
            spec: ResolutionSpec {
                high: (128, 128),
                low: (128, 128),
                k: 1,
                m: 0,
            },
            high_mult: 32,
            low_mult: 32,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = DetectionModel::<f32>::new(&cfg.backbone, &cfg.head_config(), 0, &mut rng);
        let ds = SyntheticDataset::new(cfg.scene_spec(10), 4).unwrap();
        let samples: Vec<DetectionSample> = (0..4).map(|i| ds.sample(i).unwrap()).collect();
        let refs: Vec<&DetectionSample> = samples.iter().collect();
        let (_total, report) = aligned_ms_step(&model, &refs, &ctx, &mut rng).unwrap();
        let (hw, low, al) = (
            report.l_hw.unwrap(),
            report.l_hw_low.unwrap(),
            report.l_align.unwrap(),
        );
        assert_eq!(hw, low, "identical branches must produce identical losses");
        assert_eq!(al, hw + low);
        assert!((al - 2.0 * hw).abs() < 1e-12);
    }

    #[test]
    fn combined_gradient_equals_sum_of_branch_gradients() {
        // two-branch backward accumulates exactly the sum of the separate
        // branch gradients (checked in f64 on a tiny model)
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = BackboneConfig {
            stage_widths: vec![4, 4, 4, 4],
            pyramid_channels: 4,
            min_level: 2,
            max_level: 6,
        };
        let mut head_cfg = crate::head::HeadConfig {
            tower_depth: 1,
            num_classes: 2,
            scale_bounds: vec![16.0, 32.0, 64.0],
            ..Default::default()
        };
        head_cfg.focal_gamma = 2;
        let model = DetectionModel::<f64>::new(&bb, &head_cfg, 1, &mut rng);
        let spec = ResolutionSpec::new((128, 128), 2).unwrap();

        let img_high = {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            Tensor::from_vec(
                (0..3 * 128 * 128).map(|_| r.gen_range(0.0..1.0)).collect(),
                &[1, 3, 128, 128],
            )
        };
        let img_low = rescale_image(
            &Tensor::from_vec(img_high.data().to_vec(), &[3, 128, 128]),
            0.5,
            1,
        )
        .unwrap();
        let img_low = Tensor::from_vec(img_low.data().to_vec(), &[1, 3, 64, 64]);
        let boxes = vec![vec![BBox::new(20.0, 20.0, 60.0, 60.0, 0)]];

        let run_branch = |which: u8| -> Tensor<f64> {
            if which == 0 {
                let outs = model.forward_standard(&img_high).unwrap();
                branch_loss_f64(&model, &outs, &boxes)
            } else {
                let (_p, outs) = model.forward_aligned(&img_low, &spec).unwrap();
                branch_loss_f64(&model, &outs, &boxes)
            }
        };
        // combined
        let total = add(&run_branch(0), &run_branch(1));
        total.backward().unwrap();
        let combined: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|p| p.grad().unwrap_or_default())
            .collect();
        for p in model.params() {
            p.zero_grad();
        }
        // separate
        run_branch(0).backward().unwrap();
        let g_high: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|p| p.grad().unwrap_or_default())
            .collect();
        for p in model.params() {
            p.zero_grad();
        }
        run_branch(1).backward().unwrap();
        let g_low: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|p| p.grad().unwrap_or_default())
            .collect();

        for ((c, h), l) in combined.iter().zip(g_high.iter()).zip(g_low.iter()) {
            if c.is_empty() {
                continue;
            }
            for i in 0..c.len() {
                let want = h.get(i).unwrap_or(&0.0) + l.get(i).unwrap_or(&0.0);
                let denom = 1.0f64.max(want.abs());
                assert!(
                    ((c[i] - want) / denom).abs() < 1e-9,
                    "grad mismatch: {} vs {want}",
                    c[i]
                );
            }
        }
    }

    fn branch_loss_f64(
        model: &DetectionModel<f64>,
        outs: &[HeadOutputs<f64>],
        boxes: &[Vec<BBox>],
    ) -> Tensor<f64> {
        let targets = assign_targets(boxes, &level_shapes(outs), &model.head.cfg, model.head_levels());
        detection_loss(outs, &targets, &model.head.cfg).total
    }

    #[test]
    fn metrics_audit_accepts_consistent_rows_and_catches_violations() {
        let mut w = MetricsWriter::new(&[3, 4]);
        w.push(&LossReport {
            step: 0,
            phase: "align",
            lr: 0.01,
            l_cls: Some(0.5),
            l_reg: Some(0.25),
            l_ctr: Some(0.125),
            l_hw: Some(0.875),
            l_hw_low: Some(0.5),
            l_align: Some(1.375),
            ..Default::default()
        });
        assert_eq!(audit_metrics_csv(&w.contents(), 1.0, 0.2), Ok(1));

        let mut bad = MetricsWriter::new(&[3, 4]);
        bad.push(&LossReport {
            step: 0,
            phase: "align",
            lr: 0.01,
            l_cls: Some(0.5),
            l_reg: Some(0.25),
            l_ctr: Some(0.125),
            l_hw: Some(0.875),
            l_hw_low: Some(0.5),
            l_align: Some(1.5),
            ..Default::default()
        });
        assert!(audit_metrics_csv(&bad.contents(), 1.0, 0.2).is_err());
    }
}
