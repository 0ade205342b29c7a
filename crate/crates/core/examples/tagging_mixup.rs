//! Distillation on the tagging task with per-position Mixup, scored by
//! token accuracy and span F1.

use distiller::augment::{AugOp, AugPolicy};
use distiller::pipeline::{distill, evaluate_report, init_student, train_teacher, DistillerConfig, SupervisedSettings, TaggingTask};

fn main() -> distiller::Result<()> {
    let data = TaggingTask::default().generate("tags", 600, 200, 3)?;
    let (teacher, _) = train_teacher(&data, &SupervisedSettings { epochs: 8, ..SupervisedSettings::default() })?;
    let t = evaluate_report(&teacher, &data.test, data.meta.kind)?;
    println!("teacher  accuracy {:.3}  span F1 {:.3}", t.accuracy, t.span_f1.unwrap_or(f64::NAN));

    let base = DistillerConfig {
        epochs: 6,
        learning_rate: 3e-3,
        inter_weight: 0.3,
        ..DistillerConfig::default()
    };
    for (name, config) in [
        ("plain", base.clone()),
        ("mixup", base.clone().with_aug(AugPolicy::new(vec![AugOp::Mixup]))),
    ] {
        let out = distill(&config, &data, &teacher, init_student(&config, &data.meta)?)?;
        let r = evaluate_report(&out.student, &data.test, data.meta.kind)?;
        println!(
            "{name:<8} accuracy {:.3}  span F1 {:.3}  ratio {:.3}",
            r.accuracy,
            r.span_f1.unwrap_or(f64::NAN),
            out.record.distillation_ratio
        );
    }
    Ok(())
}
