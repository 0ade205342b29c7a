//! Runs a small random search on several synthetic tasks and writes one
//! meta row (run record plus dataset features) per trial.
//!
//! cargo run --release --example collect_meta_records -- [trials] [out.jsonl]

use std::path::Path;

use distiller::autodistiller::EmbeddingTable;
use distiller::cli::build_meta_rows;
use distiller::io::write_jsonl;
use distiller::pipeline::{
    distill, init_student, train_teacher, ClassificationTask, DistillerConfig, SupervisedSettings, TaggingTask, TaskData,
};
use distiller::search::{random_search, SearchSpace};

fn tasks() -> distiller::Result<Vec<TaskData>> {
    let c = ClassificationTask::default();
    let t = TaggingTask::default();
    Ok(vec![
        ClassificationTask { noise: 0.15, ..c }.generate("topics-clean", 300, 150, 1)?,
        ClassificationTask { noise: 0.35, ..c }.generate("topics-noisy", 300, 150, 2)?,
        ClassificationTask { n_classes: 2, n_topics: 4, vocab_size: 48, ..c }.generate("topics-binary", 300, 150, 3)?,
        t.generate("tags", 300, 150, 4)?,
        TaggingTask { stay: 0.9, noise: 0.4, ..t }.generate("tags-sticky", 300, 150, 5)?,
    ])
}

fn main() -> distiller::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let trials: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(16);
    let out = args.get(1).map_or("assets/meta_records.jsonl", String::as_str);

    let mut base = DistillerConfig {
        epochs: 2,
        learning_rate: 3e-3,
        ..DistillerConfig::default()
    };
    base.student.layers = 1;
    base.student.width = 8;
    let space = SearchSpace::default();
    let settings = SupervisedSettings {
        epochs: 8,
        ..SupervisedSettings::default()
    };

    let datasets = tasks()?;
    let mut records = Vec::new();
    for (k, data) in datasets.iter().enumerate() {
        let (teacher, score) = train_teacher(data, &settings)?;
        let recs = random_search(&space, trials, k as u64, &base, &data.meta.id, data.meta.kind, 1, |c| {
            Ok(distill(c, data, &teacher, init_student(c, &data.meta)?)?.record)
        })?;
        let ok = recs.iter().filter(|r| r.is_ok()).count();
        println!("{:<14} teacher {score:.3}, {ok}/{trials} trials ok", data.meta.id);
        records.extend(recs.into_iter().map(|r| r.without_time()));
    }
    let (rows, _) = build_meta_rows(&records, &datasets, &EmbeddingTable::bundled(), &settings)?;
    write_jsonl(Path::new(out), &rows)?;
    println!("wrote {} rows to {out}", rows.len());
    Ok(())
}
