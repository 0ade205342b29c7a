//! Variance decomposition of a planted response over the search axes: the
//! forest estimate next to the exact decomposition of the table itself.

use distiller::search::{brute_force_anova, fanova_importance, FactorTable, ForestSettings};

fn main() -> distiller::Result<()> {
    let axes = ["inter_loss", "pred_loss", "mapping"];
    let levels = [3, 2, 3];
    let mut rows = Vec::new();
    for a in 0..levels[0] {
        for b in 0..levels[1] {
            for c in 0..levels[2] {
                // inter loss and mapping interact; pred loss is additive
                let y = 0.6 + 0.05 * a as f64 + 0.02 * b as f64 + 0.03 * (a * c) as f64;
                for _ in 0..2 {
                    rows.push((vec![a, b, c], y));
                }
            }
        }
    }
    let table = FactorTable {
        axes: axes.iter().map(|s| s.to_string()).collect(),
        levels: levels
            .iter()
            .map(|&n| (0..n).map(|i| format!("L{i}")).collect())
            .collect(),
        rows,
    };
    let forest = fanova_importance(&table, &ForestSettings::default())?;
    let exact = brute_force_anova(&table)?;
    println!("{:<24} {:>8} {:>8}", "component", "forest", "exact");
    for (f, e) in forest.individual.iter().zip(&exact.individual) {
        println!("{:<24} {:>8.4} {:>8.4}", f.axis, f.fraction, e.fraction);
    }
    for (f, e) in forest.pairwise.iter().zip(&exact.pairwise) {
        let name = format!("{} x {}", f.axes[0], f.axes[1]);
        println!("{name:<24} {:>8.4} {:>8.4}", f.fraction, e.fraction);
    }
    Ok(())
}
