//! Layer mappings: the fixed Skip and Last assignments, and the EMD flow for
//! a cost matrix between 4 teacher and 2 student layers.

use distiller::mapping::{build_mapping, emd_loss, solve_transport, FlowProblem, MappingStrategy};
use distiller::nn::Tensor;

fn show(name: &str, t: &Tensor) {
    println!("{name}:");
    for r in 0..t.rows() {
        let row: Vec<String> = t.row_slice(r).iter().map(|v| format!("{v:.3}")).collect();
        println!("  teacher {} | {}", r + 1, row.join("  "));
    }
}

fn main() -> distiller::Result<()> {
    for s in [MappingStrategy::Skip, MappingStrategy::Last] {
        let m = build_mapping(s, 4, 2)?;
        println!("{s} pairs (teacher, student): {:?}", m.pairs());
    }

    // lower layers of the teacher are cheap to match with the first student
    // layer, upper layers with the second
    let cost = Tensor::matrix(4, 2, vec![0.1, 0.9, 0.2, 0.7, 0.8, 0.3, 0.9, 0.1]);
    let sol = solve_transport(&FlowProblem::uniform(cost.clone()))?;
    show("EMD flow", &sol.flow);
    println!("transport cost {:.4}", sol.objective);
    let (loss, mapping) = emd_loss(&cost)?;
    println!("normalised EMD loss {loss:.4}, pairs with flow {:?}", mapping.pairs());
    Ok(())
}
