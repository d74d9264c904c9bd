//! Full finite-difference verification: every differentiable op plus the
//! detection and distillation losses, run in 64-bit across multiple seeds.

use crate::config::KdReduction;
use crate::head::{assign_targets, detection_loss, BBox, HeadConfig, HeadOutputs};
use crate::pyramid::FeaturePyramid;
use crate::tensor::gradcheck::{
    finite_diff_gradcheck, op_suite_multi, OpGradReport, GRADCHECK_TOL,
};
use crate::tensor::Tensor;
use crate::train::kd_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn detection_loss_check(seeds: std::ops::Range<u64>) -> OpGradReport {
    let mut max_err = 0.0f64;
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xa076_1d64_78bd_642f));
        let cfg = HeadConfig {
            tower_depth: 1,
            num_classes: 2,
            scale_bounds: vec![16.0],
            ..Default::default()
        };
        let levels = vec![3u8, 4];
        // one box comfortably inside a 32px frame, corners off the location
        // grid so the regression targets sit away from min() kinks
        let x0 = 2.3 + rng.gen_range(0.0..2.0);
        let y0 = 1.7 + rng.gen_range(0.0..2.0);
        let gt = vec![vec![BBox::new(x0, y0, x0 + 11.0, y0 + 12.0, rng.gen_range(0..2))]];
        let shapes = vec![(3u8, 1usize, 4usize, 4usize), (4, 1, 2, 2)];
        let targets = assign_targets(&gt, &shapes, &cfg, &levels);
        if targets.num_pos == 0 {
            continue;
        }

        let mk = |rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(lo..hi)).collect()
        };
        let cls3 = Tensor::from_vec(mk(&mut rng, 2 * 16, -3.0, 3.0), &[1, 2, 4, 4]);
        let cls4 = Tensor::from_vec(mk(&mut rng, 2 * 4, -3.0, 3.0), &[1, 2, 2, 2]);
        let ctr3 = Tensor::from_vec(mk(&mut rng, 16, -2.0, 2.0), &[1, 1, 4, 4]);
        let ctr4 = Tensor::from_vec(mk(&mut rng, 4, -2.0, 2.0), &[1, 1, 2, 2]);
        // positive distances away from the target values (min kinks)
        let ltrb3 = Tensor::from_vec(mk(&mut rng, 4 * 16, 14.0, 20.0), &[1, 4, 4, 4]);
        let ltrb4 = Tensor::from_vec(mk(&mut rng, 4 * 4, 14.0, 20.0), &[1, 4, 2, 2]);

        // gradient w.r.t. the level-3 regression map
        let (c3, c4, t3, t4, l4) = (cls3.clone(), cls4.clone(), ctr3.clone(), ctr4.clone(), ltrb4.clone());
        let cfg2 = cfg.clone();
        let targets2 = assign_targets(&gt, &shapes, &cfg, &levels);
        let err_reg = finite_diff_gradcheck(
            move |v| {
                let outs = vec![
                    HeadOutputs {
                        level: 3,
                        cls: c3.clone(),
                        ltrb: v.clone(),
                        ctr: t3.clone(),
                    },
                    HeadOutputs {
                        level: 4,
                        cls: c4.clone(),
                        ltrb: l4.clone(),
                        ctr: t4.clone(),
                    },
                ];
                detection_loss(&outs, &targets2, &cfg2).total
            },
            &ltrb3,
            1e-5,
        );
        // gradient w.r.t. the level-3 class logits
        let (l3, c4, t3, t4, l4) = (ltrb3.clone(), cls4.clone(), ctr3.clone(), ctr4.clone(), ltrb4.clone());
        let cfg2 = cfg.clone();
        let targets2 = assign_targets(&gt, &shapes, &cfg, &levels);
        let err_cls = finite_diff_gradcheck(
            move |v| {
                let outs = vec![
                    HeadOutputs {
                        level: 3,
                        cls: v.clone(),
                        ltrb: l3.clone(),
                        ctr: t3.clone(),
                    },
                    HeadOutputs {
                        level: 4,
                        cls: c4.clone(),
                        ltrb: l4.clone(),
                        ctr: t4.clone(),
                    },
                ];
                detection_loss(&outs, &targets2, &cfg2).total
            },
            &cls3,
            1e-5,
        );
        // gradient w.r.t. the centerness logits
        let (l3, c3, c4, t4, l4) = (ltrb3.clone(), cls3.clone(), cls4.clone(), ctr4.clone(), ltrb4.clone());
        let cfg2 = cfg.clone();
        let err_ctr = finite_diff_gradcheck(
            move |v| {
                let outs = vec![
                    HeadOutputs {
                        level: 3,
                        cls: c3.clone(),
                        ltrb: l3.clone(),
                        ctr: v.clone(),
                    },
                    HeadOutputs {
                        level: 4,
                        cls: c4.clone(),
                        ltrb: l4.clone(),
                        ctr: t4.clone(),
                    },
                ];
                detection_loss(&outs, &targets, &cfg2).total
            },
            &ctr3,
            1e-5,
        );
        max_err = max_err.max(err_reg).max(err_cls).max(err_ctr);
    }
    OpGradReport {
        name: "detection_loss".into(),
        max_rel_err: max_err,
        tolerance: GRADCHECK_TOL,
        pass: max_err < GRADCHECK_TOL,
    }
}

fn kd_loss_check(seeds: std::ops::Range<u64>) -> OpGradReport {
    let mut max_err = 0.0f64;
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xe703_7ed1_a0b4_28db));
        let teacher_vals: Vec<f64> = (0..2 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // student offset keeps every difference away from the |.| kink
        let student_vals: Vec<f64> = teacher_vals
            .iter()
            .map(|&v| {
                let gap = 0.05 + rng.gen_range(0.0..0.5);
                if rng.gen_bool(0.5) {
                    v + gap
                } else {
                    v - gap
                }
            })
            .collect();
        let teacher = FeaturePyramid::new(
            vec![(3, Tensor::from_vec(teacher_vals, &[1, 2, 4, 4]))],
            2,
        );
        for reduction in [KdReduction::Mean, KdReduction::Sum] {
            let t = FeaturePyramid::new(
                vec![(3, teacher.level(3).unwrap().clone())],
                2,
            );
            let err = finite_diff_gradcheck(
                move |v| {
                    let stu = FeaturePyramid::new(vec![(3, v.clone())], 2);
                    kd_loss(&t, &stu, 3.0, reduction).unwrap()
                },
                &Tensor::from_vec(student_vals.clone(), &[1, 2, 4, 4]),
                1e-6,
            );
            max_err = max_err.max(err);
        }
    }
    OpGradReport {
        name: "kd_loss".into(),
        max_rel_err: max_err,
        tolerance: GRADCHECK_TOL,
        pass: max_err < GRADCHECK_TOL,
    }
}

/// Reports for every op and both loss functions, worst error across seeds.
pub fn full_gradcheck(seeds: std::ops::Range<u64>) -> Vec<OpGradReport> {
    let mut reports = op_suite_multi(seeds.clone());
    reports.push(detection_loss_check(seeds.clone()));
    reports.push(kd_loss_check(seeds));
    reports
}

pub fn format_gradcheck_report(reports: &[OpGradReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:>14} {:>10} {:>6}\n",
        "operation", "max_rel_err", "tolerance", "status"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<22} {:>14.3e} {:>10.0e} {:>6}\n",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.pass { "pass" } else { "FAIL" }
        ));
    }
    out
}
