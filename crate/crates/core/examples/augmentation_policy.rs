//! Applies each discrete augmentation operator, and the stacked CA→RA→BT
//! policy, to one tagged sequence; then mixes two one-hot labels.

use distiller::augment::{apply_policy, mixup_classification, AugOp, AugPolicy, UnigramTable};
use distiller::pipeline::TaggingTask;
use distiller::rng::RngStreams;

fn main() -> distiller::Result<()> {
    let task = TaggingTask::default();
    let data = task.generate("tags", 200, 10, 5)?;
    let unigram = UnigramTable::from_corpus(data.train.iter().map(|e| e.tokens.as_slice()))?;
    let ex = &data.train[0];
    println!("original   {:?}  tags {:?}", ex.tokens, ex.tags.as_ref().unwrap());

    let rs = RngStreams::new(1);
    for ops in [vec![AugOp::Ca], vec![AugOp::Ra], vec![AugOp::Bt], vec![AugOp::Ca, AugOp::Ra, AugOp::Bt]] {
        let policy = AugPolicy::new(ops);
        let out = apply_policy(&policy, ex, &data.lexicon, &unigram, &mut rs.stream(&policy.label()))?;
        println!("{:<10} {:?}  tags {:?}", policy.label(), out.tokens, out.tags.as_ref().unwrap());
    }

    let a = [1.0, 0.0, 0.0];
    let b = [0.0, 0.0, 1.0];
    let xa = distiller::nn::Tensor::filled(2, 2, 1.0);
    let xb = distiller::nn::Tensor::filled(2, 2, -1.0);
    for lambda in [1.0, 0.7, 0.0] {
        let (x, y) = mixup_classification(&xa, &xb, &a, &b, lambda)?;
        println!("lambda {lambda}: input {:?} label {:?}", x.data(), y);
    }
    Ok(())
}
