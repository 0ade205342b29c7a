//! Grid runs of the trained estimator against the Gaussian oracle.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mi::oracle::gaussian_mi_oracle;
use crate::mi::train::{train_mi_alpha, GaussianPairs, MiTrainSettings};
use crate::mi::critic::CriticArch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiBenchSettings {
    pub rhos: Vec<f64>,
    pub alphas: Vec<f64>,
    pub d: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub arch: CriticArch,
}

impl Default for MiBenchSettings {
    fn default() -> Self {
        Self {
            rhos: vec![0.8],
            alphas: vec![0.9],
            d: 1,
            batch: 128,
            steps: 800,
            lr: 2e-3,
            seeds: vec![0],
            arch: CriticArch::bench(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiBenchRow {
    pub distribution: String,
    pub rho: f64,
    pub d: usize,
    pub alpha: f64,
    pub batch: usize,
    pub seed: u64,
    pub estimate: f64,
    pub analytic_mi: f64,
}

pub fn run_mi_bench(s: &MiBenchSettings) -> Result<Vec<MiBenchRow>> {
    let mut rows = Vec::new();
    for &rho in &s.rhos {
        let analytic = gaussian_mi_oracle(rho, s.d)?;
        for &alpha in &s.alphas {
            for &seed in &s.seeds {
                let mut src = GaussianPairs::new(rho, s.d)?;
                let settings = MiTrainSettings {
                    alpha,
                    steps: s.steps,
                    batch: s.batch,
                    lr: s.lr,
                    arch: s.arch,
                    seed,
                };
                let (_, estimate) = train_mi_alpha(&mut src, &settings)?;
                rows.push(MiBenchRow {
                    distribution: "gaussian".into(),
                    rho,
                    d: s.d,
                    alpha,
                    batch: s.batch,
                    seed,
                    estimate,
                    analytic_mi: analytic,
                });
            }
        }
    }
    Ok(rows)
}

pub fn mi_bench_csv(rows: &[MiBenchRow]) -> String {
    let mut out = String::from("distribution,rho,d,alpha,batch,seed,estimate,analytic_mi\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{},{:.6},{},{},{:.6},{:.6}",
            r.distribution, r.rho, r.d, r.alpha, r.batch, r.seed, r.estimate, r.analytic_mi
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_oracle_column() {
        let s = MiBenchSettings {
            steps: 0,
            batch: 8,
            ..Default::default()
        };
        let csv = mi_bench_csv(&run_mi_bench(&s).unwrap());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "distribution,rho,d,alpha,batch,seed,estimate,analytic_mi");
        assert!(lines[1].starts_with("gaussian,0.800000,1,0.900000,8,0,"));
        assert!(lines[1].ends_with(",0.510826"));
    }
}
