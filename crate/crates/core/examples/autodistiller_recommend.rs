//! Trains the ratio predictor on collected meta rows, reports
//! leave-one-dataset-out Spearman, and ranks configurations for a dataset
//! the model has not seen.
//!
//! cargo run --release --example autodistiller_recommend -- [rows.jsonl]

use std::path::Path;

use distiller::autodistiller::{lodo_eval, recommend, train_meta, GbdtSettings, MetaRow};
use distiller::io::read_jsonl;
use distiller::pipeline::DistillerConfig;
use distiller::search::{config_labels, SearchSpace};

fn main() -> distiller::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "assets/meta_records.jsonl".into());
    let rows: Vec<MetaRow> = read_jsonl(Path::new(&path))?;
    let settings = GbdtSettings::default();

    let report = lodo_eval(&rows, &settings)?;
    for f in &report.folds {
        let s = f.spearman.map_or("undefined".into(), |v| format!("{v:+.3}"));
        println!("held out {:<14} {:>3} rows  spearman {s}", f.dataset_id, f.n_rows);
    }
    if let Some(m) = report.mean_spearman {
        println!("mean spearman {m:+.3}");
    }

    let held = rows.last().map(|r| r.record.dataset_id.clone()).unwrap_or_default();
    let (test, train): (Vec<MetaRow>, Vec<MetaRow>) = rows.into_iter().partition(|r| r.record.dataset_id == held);
    let model = train_meta(&train, &settings)?;
    let recs = recommend(&model, &test[0].features, &SearchSpace::default(), &DistillerConfig::default(), 5)?;
    println!("\ntop configurations for {held}:");
    for r in &recs {
        println!("{}. {:.3}  {}", r.rank, r.predicted_ratio, config_labels(&r.config).join(" / "));
    }
    if let Some(best) = test.iter().filter(|r| r.record.is_ok()).max_by(|a, b| a.target().total_cmp(&b.target())) {
        println!(
            "best observed: {:.3}  {}",
            best.target(),
            config_labels(&best.record.config).join(" / ")
        );
    }
    Ok(())
}
