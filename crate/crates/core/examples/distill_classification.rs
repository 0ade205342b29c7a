//! Trains a 4-layer teacher on the synthetic topic-pair task, then distills
//! a 2-layer student with and without an MI-α intermediate term over a Skip
//! mapping.
//!
//! cargo run --release --example distill_classification -- [seeds] [epochs]

use std::time::Instant;

use distiller::losses::InterLossKind;
use distiller::mapping::MappingStrategy;
use distiller::pipeline::{distill, init_student, train_teacher, ClassificationTask, DistillerConfig, SupervisedSettings};

fn main() -> distiller::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(3);
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);

    let data = ClassificationTask::default().generate("topics", 2000, 500, 7)?;
    let t0 = Instant::now();
    let (teacher, score) = train_teacher(&data, &SupervisedSettings::default())?;
    println!("teacher accuracy {score:.3} ({:.1}s)", t0.elapsed().as_secs_f64());

    let mut wins = 0;
    for seed in 0..seeds {
        let mut pred_only = DistillerConfig {
            epochs,
            learning_rate: 3e-3,
            batch_size: 16,
            seed,
            inter_weight: 0.0,
            ..DistillerConfig::default()
        };
        pred_only.weights.beta1 = 1.0;
        let with_inter = DistillerConfig {
            inter_loss: InterLossKind::MiAlpha { alpha: 0.9 },
            mapping: MappingStrategy::Skip,
            inter_weight: 0.3,
            ..pred_only.clone()
        };
        let a = distill(&pred_only, &data, &teacher, init_student(&pred_only, &data.meta)?)?;
        let b = distill(&with_inter, &data, &teacher, init_student(&with_inter, &data.meta)?)?;
        if b.record.student_score > a.record.student_score {
            wins += 1;
        }
        println!(
            "seed {seed}: prediction-only {:.3}  +MI-alpha {:.3}",
            a.record.student_score, b.record.student_score
        );
    }
    println!("intermediate term won {wins}/{seeds}");
    Ok(())
}
