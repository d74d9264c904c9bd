// Temporary diagnostic; not part of the deliverable surface.
use lrdistill::config::{ExperimentConfig, TrainingMode};
use lrdistill::data::SyntheticDataset;
use lrdistill::pyramid::BackboneConfig;
use lrdistill::train::*;

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 0;
    cfg.backbone = BackboneConfig {
        stage_widths: vec![8, 16, 32, 64],
        pyramid_channels: 16,
        min_level: 2,
        max_level: 6,
    };
    cfg.head.tower_depth = 2;
    cfg.dataset.train_images = 1000;
    cfg.optim.epochs = 8;
    cfg.training.mode = TrainingMode::Vanilla;

    let out = train_teacher_detection(&cfg, Strategy::TwoStep).unwrap();
    for (i, r) in out.reports.iter().enumerate() {
        if i % 100 == 0 || i + 3 > out.reports.len() {
            println!(
                "step {:3} lr {:.4} cls {:.3} reg {:.3} ctr {:.3} hw {:.3}",
                r.step,
                r.lr,
                r.l_cls.unwrap_or(-1.0),
                r.l_reg.unwrap_or(-1.0),
                r.l_ctr.unwrap_or(-1.0),
                r.l_hw.unwrap_or(-1.0)
            );
        }
    }
    let val = SyntheticDataset::new(cfg.scene_spec(11), 50).unwrap();
    let h = eval_model(&out.model.core, None, &cfg, &val, EvalInput::High).unwrap();
    let l = eval_model(&out.model.core, None, &cfg, &val, EvalInput::LowVanilla).unwrap();
    println!("vanilla 8ep: H {:.2} L {:.2}", h.ap, l.ap);
    let (preds, _g) = run_inference(&out.model.core, None, &cfg, &val, EvalInput::High).unwrap();
    let maxscore = preds.iter().flatten().map(|b| b.score).fold(0.0f32, f32::max);
    let ndet: usize = preds.iter().map(|p| p.len()).sum();
    println!("vanilla H decode: {} boxes, max score {:.3}", ndet, maxscore);

}
