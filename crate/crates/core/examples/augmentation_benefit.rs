//! Distills a 1-layer student from 200 examples, with and without RA+Mixup.
//!
//! cargo run --release --example augmentation_benefit -- [seeds] [epochs]

use distiller::augment::{AugOp, AugPolicy};
use distiller::pipeline::{distill, init_student, train_teacher, ClassificationTask, DistillerConfig, SupervisedSettings};

fn main() -> distiller::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(3);
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40);

    let pool = ClassificationTask::default().generate("topics", 2000, 500, 7)?;
    let (teacher, score) = train_teacher(&pool, &SupervisedSettings::default())?;
    println!("teacher accuracy {score:.3}");
    let small = pool.with_train_prefix(200);

    let mut wins = 0;
    for seed in 0..seeds {
        let mut plain = DistillerConfig {
            epochs,
            learning_rate: 3e-3,
            seed,
            inter_weight: 0.0,
            ..DistillerConfig::default()
        };
        plain.student.layers = 1;
        plain.weights.gamma1 = 0.5;
        let mut augmented = plain.clone().with_aug(AugPolicy::new(vec![AugOp::Ra, AugOp::Mixup]));
        augmented.weights.gamma1 = 0.5;

        let a = distill(&plain, &small, &teacher, init_student(&plain, &small.meta)?)?;
        let b = distill(&augmented, &small, &teacher, init_student(&augmented, &small.meta)?)?;
        if b.record.student_score > a.record.student_score {
            wins += 1;
        }
        println!(
            "seed {seed}: no augmentation {:.3}  RA+Mixup {:.3}",
            a.record.student_score, b.record.student_score
        );
    }
    println!("augmentation won {wins}/{seeds}");
    Ok(())
}
