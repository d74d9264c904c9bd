// Temporary calibration harness; not part of the deliverable surface.
use lrdistill::config::{ExperimentConfig, TeacherFeatures, TrainingMode};
use lrdistill::data::SyntheticDataset;
use lrdistill::fusion::FusionVariant;
use lrdistill::pyramid::BackboneConfig;
use lrdistill::train::*;
use std::time::Instant;

fn small_cfg(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.backbone = BackboneConfig {
        stage_widths: vec![8, 16, 32, 64],
        pyramid_channels: 16,
        min_level: 2,
        max_level: 6,
    };
    cfg.head.tower_depth = 2;
    cfg.optim.epochs = 8;
    cfg.optim.fusion_epochs = 4;
    cfg
}

fn main() {
    let t0 = Instant::now();
    let cfg = small_cfg(0);
    let val = SyntheticDataset::new(cfg.scene_spec(11), cfg.dataset.val_images).unwrap();

    // aligned teacher
    let mut acfg = cfg.clone();
    acfg.training.mode = TrainingMode::Aligned;
    let t = Instant::now();
    let aligned = train_teacher_detection(&acfg, Strategy::TwoStep).unwrap();
    println!("aligned phase1: {:.0}s", t.elapsed().as_secs_f64());
    let ah = eval_model(&aligned.model.core, None, &acfg, &val, EvalInput::High).unwrap();
    let al = eval_model(&aligned.model.core, None, &acfg, &val, EvalInput::LowAligned).unwrap();
    println!("aligned: H {:.1} / L {:.1} (gap {:.1}) APs {:.1}/{:.1}", ah.ap, al.ap, ah.ap - al.ap, ah.ap_s, al.ap_s);

    // vanilla teacher
    let mut vcfg = cfg.clone();
    vcfg.training.mode = TrainingMode::Vanilla;
    let t = Instant::now();
    let vanilla = train_teacher_detection(&vcfg, Strategy::TwoStep).unwrap();
    println!("vanilla: {:.0}s", t.elapsed().as_secs_f64());
    let vh = eval_model(&vanilla.model.core, None, &vcfg, &val, EvalInput::High).unwrap();
    let vl = eval_model(&vanilla.model.core, None, &vcfg, &val, EvalInput::LowVanilla).unwrap();
    println!("vanilla: H {:.1} / L {:.1} (gap {:.1}) APs {:.1}/{:.1}", vh.ap, vl.ap, vh.ap - vl.ap, vh.ap_s, vl.ap_s);

    // fusion phase: CFF and SC-SUM on the same frozen core
    let mut mw = MetricsWriter::new(&acfg.head_levels());
    let t = Instant::now();
    let cff = train_fusion_only(&acfg, &aligned.model.core, FusionVariant::Cff, 0, &mut mw).unwrap();
    println!("fusion cff: {:.0}s", t.elapsed().as_secs_f64());
    let scsum = train_fusion_only(&acfg, &aligned.model.core, FusionVariant::ScSum, 0, &mut mw).unwrap();
    let f_cff = eval_model(&aligned.model.core, Some(&cff.module), &acfg, &val, EvalInput::Fused).unwrap();
    let f_scs = eval_model(&aligned.model.core, Some(&scsum.module), &acfg, &val, EvalInput::Fused).unwrap();
    println!("fused: cff {:.1} scsum {:.1} (max(H,L) {:.1})", f_cff.ap, f_scs.ap, ah.ap.max(al.ap));

    // students
    let mut teacher = aligned.model;
    teacher.fusion = Some(cff.module);
    let t = Instant::now();
    let stu_kd = distill_student(&acfg, &teacher, false).unwrap();
    println!("student kd: {:.0}s", t.elapsed().as_secs_f64());
    let stu_nokd = distill_student(&acfg, &teacher, true).unwrap();
    let mut hcfg = acfg.clone();
    hcfg.loss.teacher_features = TeacherFeatures::High;
    let stu_high = distill_student(&hcfg, &teacher, false).unwrap();
    let s_kd = eval_model(&stu_kd.model, None, &acfg, &val, EvalInput::LowAligned).unwrap();
    let s_nokd = eval_model(&stu_nokd.model, None, &acfg, &val, EvalInput::LowAligned).unwrap();
    let s_high = eval_model(&stu_high.model, None, &hcfg, &val, EvalInput::LowAligned).unwrap();
    println!(
        "students: kd-fused {:.1} | no-kd {:.1} | kd-high {:.1} (kd-nokd delta {:.2})",
        s_kd.ap, s_nokd.ap, s_high.ap, s_kd.ap - s_nokd.ap
    );
    println!("total pilot: {:.0}s", t0.elapsed().as_secs_f64());
}
