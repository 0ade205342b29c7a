//! Random search over the distillation space on a small task, writing the
//! run records as JSON lines.
//!
//! cargo run --release --example random_search -- [budget] [out.jsonl]

use distiller::io::write_jsonl;
use distiller::pipeline::{distill, init_student, train_teacher, ClassificationTask, DistillerConfig, RunRecord, SupervisedSettings};
use distiller::search::{random_search, SearchSpace};

fn main() -> distiller::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let budget: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(24);
    let data = ClassificationTask::default().generate("topics", 400, 200, 1)?;
    let (teacher, score) = train_teacher(&data, &SupervisedSettings { epochs: 8, ..SupervisedSettings::default() })?;
    println!("teacher accuracy {score:.3}");

    let mut base = DistillerConfig {
        epochs: 2,
        learning_rate: 3e-3,
        ..DistillerConfig::default()
    };
    base.student.layers = 1;
    base.student.width = 8;
    let space = SearchSpace::default();
    println!("space of {} configurations, sampling {budget}", space.size());
    let records = random_search(&space, budget, 0, &base, &data.meta.id, data.meta.kind, 1, |c| {
        Ok(distill(c, &data, &teacher, init_student(c, &data.meta)?)?.record)
    })?;

    let mut ranked: Vec<&RunRecord> = records.iter().filter(|r| r.is_ok()).collect();
    ranked.sort_by(|a, b| b.distillation_ratio.total_cmp(&a.distillation_ratio));
    for r in ranked.iter().take(5) {
        println!(
            "ratio {:.3}  {} / {} / {} / {}",
            r.distillation_ratio,
            r.config.inter_loss,
            r.config.pred_loss,
            r.config.mapping,
            r.config.aug.label()
        );
    }
    if let Some(path) = args.get(1) {
        write_jsonl(std::path::Path::new(path), &records)?;
        println!("wrote {path}");
    }
    Ok(())
}
