//! Seeded random search with concurrent trials.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::encoder::HeadKind;
use crate::pipeline::config::DistillerConfig;
use crate::pipeline::train::RunRecord;
use crate::rng::{streams, RngStreams};
use crate::search::space::SearchSpace;

/// The configs a search with this seed would run, in trial order. Trial
/// `t` also gets its own training seed derived from `base_seed`.
pub fn sample_configs(space: &SearchSpace, budget: usize, base_seed: u64, base: &DistillerConfig) -> Vec<DistillerConfig> {
    let streams = RngStreams::new(base_seed);
    let mut rng = streams.stream(streams::SAMPLING);
    (0..budget)
        .map(|t| {
            let mut c = space.config(space.sample(&mut rng), base);
            c.seed = streams.child("trial", t as u64).seed();
            c
        })
        .collect()
}

/// Record for a trial whose runner returned an error.
pub fn failed_record(trial: usize, config: DistillerConfig, dataset_id: &str, kind: HeadKind, err: &Error) -> RunRecord {
    RunRecord {
        trial,
        seed: config.seed,
        config,
        dataset_id: dataset_id.into(),
        task_kind: kind,
        teacher_score: 0.0,
        student_score: 0.0,
        distillation_ratio: 0.0,
        wall_time: None,
        failed: Some(err.to_string()),
    }
}

/// Runs `budget` sampled configs on up to `workers` threads. Records come
/// back ordered by trial index; a failing trial yields a failed record.
#[allow(clippy::too_many_arguments)]
pub fn random_search<F>(
    space: &SearchSpace,
    budget: usize,
    base_seed: u64,
    base: &DistillerConfig,
    dataset_id: &str,
    kind: HeadKind,
    workers: usize,
    runner: F,
) -> Result<Vec<RunRecord>>
where
    F: Fn(&DistillerConfig) -> Result<RunRecord> + Sync,
{
    space.validate()?;
    base.validate()?;
    if workers == 0 {
        return Err(Error::config("workers must be at least 1"));
    }
    let configs = sample_configs(space, budget, base_seed, base);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let records = pool.install(|| {
        configs
            .into_par_iter()
            .enumerate()
            .map(|(t, c)| match runner(&c) {
                Ok(mut r) => {
                    r.trial = t;
                    r
                }
                Err(e) => failed_record(t, c, dataset_id, kind, &e),
            })
            .collect()
    });
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::space::SearchSpace;

    fn fake(c: &DistillerConfig) -> Result<RunRecord> {
        if c.mapping == crate::mapping::MappingStrategy::Emd {
            return Err(Error::numeric("boom"));
        }
        Ok(RunRecord {
            trial: 99,
            config: c.clone(),
            dataset_id: "d".into(),
            task_kind: HeadKind::Classification,
            teacher_score: 1.0,
            student_score: 0.5,
            distillation_ratio: 0.5,
            wall_time: Some(1.0),
            seed: c.seed,
            failed: None,
        })
    }

    #[test]
    fn empty_budget() {
        let s = SearchSpace::default();
        let r = random_search(&s, 0, 1, &DistillerConfig::default(), "d", HeadKind::Classification, 2, fake).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn ordered_seeded_and_failure_tolerant() {
        let s = SearchSpace::default();
        let base = DistillerConfig::default();
        let a = random_search(&s, 30, 5, &base, "d", HeadKind::Classification, 3, fake).unwrap();
        let b = random_search(&s, 30, 5, &base, "d", HeadKind::Classification, 1, fake).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().enumerate().all(|(i, r)| r.trial == i));
        assert!(a.iter().all(|r| s.locate(&r.config).is_some()));
        assert!(a.iter().any(|r| !r.is_ok()) && a.iter().any(RunRecord::is_ok));
        let c = random_search(&s, 30, 6, &base, "d", HeadKind::Classification, 1, fake).unwrap();
        assert_ne!(a, c);
    }
}
