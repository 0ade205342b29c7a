//! Trains the MI-α critic on correlated Gaussians and compares the estimate
//! with the closed-form mutual information.
//!
//! cargo run --release --example mi_bench -- [steps] [rho] [alpha]

use std::time::Instant;

use distiller::mi::{mi_bench_csv, run_mi_bench, MiBenchSettings};

fn main() -> distiller::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let rho = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.8);
    let alpha = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.9);
    let settings = MiBenchSettings {
        rhos: vec![rho],
        alphas: vec![alpha],
        steps,
        ..Default::default()
    };
    let t = Instant::now();
    let rows = run_mi_bench(&settings)?;
    print!("{}", mi_bench_csv(&rows));
    eprintln!("{} steps in {:.1?}", steps, t.elapsed());
    Ok(())
}
