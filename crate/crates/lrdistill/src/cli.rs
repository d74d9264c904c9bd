//! Subcommand implementations behind the binary's argument parsing.

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{ExperimentConfig, TrainingMode};
use crate::data::{export_dataset, SyntheticDataset};
use crate::eval::{report_csv, report_table, ReportRow};
use crate::fusion::FusionModule;
use crate::model::{DetectionModel, TeacherModel};
use crate::train::{
    distill_student, eval_model, train_fusion_only, train_teacher, train_teacher_detection,
    EvalInput, MetricsWriter, Strategy,
};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

pub struct CommonArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.out_dir {
        cfg.out_dir = dir.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join(name)
}

/// Rebuild a model and load checkpoint weights into it.
fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(ExperimentConfig, TeacherModel<f32>)> {
    let cfg = ckpt.config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0); // values are overwritten below
    let fusion = if ckpt.has_fusion_params() {
        Some((cfg.fusion.variant, cfg.fusion.compression))
    } else {
        None
    };
    let model = TeacherModel::<f32>::new(&cfg.backbone, &cfg.head_config(), cfg.m()?, fusion, &mut rng);
    ckpt.apply_to(&model.params())?;
    Ok((cfg, model))
}

pub fn cmd_train_teacher(args: &CommonArgs, strategy: Strategy) -> Result<()> {
    let cfg = load_config(args)?;
    let trained = train_teacher(&cfg, strategy)?;
    trained.metrics.write(&out_path(&cfg, "teacher_metrics.csv"))?;
    let ckpt = Checkpoint::from_params(
        "teacher",
        &cfg,
        &trained.model.params(),
        None,
        trained.final_step as u64,
    );
    let ckpt_path = out_path(&cfg, "teacher.ckpt");
    save_checkpoint(&ckpt_path, &ckpt)?;
    let last = trained.reports.last();
    println!(
        "teacher trained: {} steps, final losses {}",
        trained.final_step,
        last.map(|r| format!(
            "cls {:.3} reg {:.3} ctr {:.3}",
            r.l_cls.unwrap_or(f64::NAN),
            r.l_reg.unwrap_or(f64::NAN),
            r.l_ctr.unwrap_or(f64::NAN)
        ))
        .unwrap_or_default()
    );
    println!("checkpoint: {}", ckpt_path.display());
    println!("metrics:    {}", out_path(&cfg, "teacher_metrics.csv").display());
    Ok(())
}

pub fn cmd_distill(args: &CommonArgs, teacher_path: &Path, no_kd: bool) -> Result<()> {
    let cfg = load_config(args)?;
    let ckpt = load_checkpoint(teacher_path)?;
    if ckpt.role != "teacher" {
        return Err(Error::CkptIncompatible(format!(
            "distillation needs a teacher checkpoint, got role `{}`",
            ckpt.role
        )));
    }
    ckpt.check_compatible(&cfg)?;
    let (_tcfg, teacher) = model_from_checkpoint(&ckpt)?;
    if !no_kd
        && cfg.loss.gamma > 0.0
        && cfg.loss.teacher_features == crate::config::TeacherFeatures::Fused
        && teacher.fusion.is_none()
    {
        return Err(Error::CkptIncompatible(
            "teacher checkpoint has no fusion parameters; distill with \
             loss.teacher_features = \"high\" or retrain the teacher"
                .into(),
        ));
    }
    let trained = distill_student(&cfg, &teacher, no_kd)?;
    trained.metrics.write(&out_path(&cfg, "student_metrics.csv"))?;
    let out = Checkpoint::from_params(
        "student",
        &cfg,
        &trained.model.params(),
        None,
        trained.final_step as u64,
    );
    let ckpt_path = out_path(&cfg, "student.ckpt");
    save_checkpoint(&ckpt_path, &out)?;
    println!(
        "student trained: {} steps{}",
        trained.final_step,
        if no_kd { " (no distillation)" } else { "" }
    );
    println!("checkpoint: {}", ckpt_path.display());
    println!("metrics:    {}", out_path(&cfg, "student_metrics.csv").display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalInputArg {
    H,
    L,
    Fused,
}

pub fn cmd_eval(checkpoint: &Path, input: EvalInputArg, out_dir: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (cfg, model) = model_from_checkpoint(&ckpt)?;
    let val = SyntheticDataset::new(cfg.scene_spec(11), cfg.dataset.val_images)?;
    let eval_input = match input {
        EvalInputArg::H => EvalInput::High,
        EvalInputArg::Fused => EvalInput::Fused,
        EvalInputArg::L => {
            if ckpt.role == "student" || cfg.training.mode == TrainingMode::Aligned {
                EvalInput::LowAligned
            } else {
                EvalInput::LowVanilla
            }
        }
    };
    let result = eval_model(&model.core, model.fusion.as_ref(), &cfg, &val, eval_input)?;
    let row = ReportRow {
        model: ckpt.role.clone(),
        input: match input {
            EvalInputArg::H => "H",
            EvalInputArg::L => "L",
            EvalInputArg::Fused => "fused",
        }
        .into(),
        result,
    };
    print!("{}", report_table(std::slice::from_ref(&row)));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let name = format!("eval_{}.csv", row.input);
        std::fs::write(dir.join(&name), report_csv(std::slice::from_ref(&row)))?;
        println!("written: {}", dir.join(name).display());
    }
    Ok(())
}

pub fn cmd_gradcheck() -> Result<()> {
    let reports = crate::verify::full_gradcheck(0..10);
    print!("{}", crate::verify::format_gradcheck_report(&reports));
    if reports.iter().any(|r| !r.pass) {
        return Err(Error::NonFinite {
            term: "gradcheck",
            step: 0,
        });
    }
    println!("all gradient checks passed");
    Ok(())
}

pub fn cmd_gen_data(args: &CommonArgs, split: &str, count: Option<usize>) -> Result<()> {
    let cfg = load_config(args)?;
    let (stream, default_len) = match split {
        "train" => (10u64, cfg.dataset.train_images),
        "val" => (11, cfg.dataset.val_images),
        other => {
            return Err(Error::Config {
                field: "--split".into(),
                constraint: format!("must be `train` or `val`, got `{other}`"),
            })
        }
    };
    let ds = SyntheticDataset::new(cfg.scene_spec(stream), count.unwrap_or(default_len))?;
    let dir = out_path(&cfg, &format!("data_{split}"));
    export_dataset(&ds, &dir)?;
    println!("{} images + annotations.json written to {}", ds.len, dir.display());
    Ok(())
}

/// Fusion-weight sweep: phase-1 teacher once, then the fusion phase per
/// lambda; reports fused AP and flags whether the configured lambda wins.
pub fn cmd_sweep(args: &CommonArgs, lambdas: &[f64]) -> Result<()> {
    let cfg = load_config(args)?;
    if cfg.training.mode != TrainingMode::Aligned {
        return Err(Error::Config {
            field: "training.mode".into(),
            constraint: "the sweep requires aligned training (fusion needs aligned pyramids)".into(),
        });
    }
    let val = SyntheticDataset::new(cfg.scene_spec(11), cfg.dataset.val_images)?;
    let phase1 = train_teacher_detection(&cfg, Strategy::TwoStep)?;
    let mut rows: Vec<(f64, crate::eval::EvalResult)> = Vec::new();
    for &lambda in lambdas {
        let mut lcfg = cfg.clone();
        lcfg.loss.lambda = lambda;
        let mut mw = MetricsWriter::new(&cfg.head_levels());
        let fused = train_fusion_only(&lcfg, &phase1.model.core, cfg.fusion.variant, 0, &mut mw)?;
        let result = eval_model(
            &phase1.model.core,
            Some(&fused.module),
            &lcfg,
            &val,
            EvalInput::Fused,
        )?;
        println!("lambda {lambda}: fused AP {:.2}", result.ap);
        rows.push((lambda, result));
    }
    let best = rows
        .iter()
        .max_by(|a, b| a.1.ap.partial_cmp(&b.1.ap).unwrap())
        .expect("at least one lambda");
    let dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("lambda,ap,ap50,ap75\n");
    let mut dat = String::from("# lambda  ap  ap50  ap75\n");
    for (l, r) in &rows {
        csv.push_str(&format!("{l},{},{},{}\n", r.ap, r.ap50, r.ap75));
        dat.push_str(&format!("{l:8.3} {:8.3} {:8.3} {:8.3}\n", r.ap, r.ap50, r.ap75));
    }
    std::fs::write(dir.join("sweep.csv"), csv)?;
    std::fs::write(dir.join("sweep.dat"), dat)?;
    println!(
        "best lambda: {} (AP {:.2}){}",
        best.0,
        best.1.ap,
        if (best.0 - cfg.loss.lambda).abs() > 1e-12 {
            format!(
                " — NOTE: configured lambda {} is not the sweep optimum",
                cfg.loss.lambda
            )
        } else {
            String::new()
        }
    );
    println!("written: {} and sweep.dat", dir.join("sweep.csv").display());
    Ok(())
}

/// Build a teacher from scratch for library callers that need one quickly.
pub fn build_untrained_teacher(cfg: &ExperimentConfig) -> Result<TeacherModel<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::data::mix64(cfg.seed, 0));
    Ok(TeacherModel::new(
        &cfg.backbone,
        &cfg.head_config(),
        cfg.m()?,
        Some((cfg.fusion.variant, cfg.fusion.compression)),
        &mut rng,
    ))
}

/// Convenience for tests: a detection model plus optional fusion from one
/// checkpoint file.
pub fn load_model(path: &Path) -> Result<(ExperimentConfig, DetectionModel<f32>, Option<FusionModule<f32>>)> {
    let ckpt = load_checkpoint(path)?;
    let (cfg, model) = model_from_checkpoint(&ckpt)?;
    Ok((cfg, model.core, model.fusion))
}
