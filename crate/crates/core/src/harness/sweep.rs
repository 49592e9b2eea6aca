use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::error::{Result, ScrollError};
use crate::online_learner::StageOne;
use crate::schedule::{ScheduleKind, ScheduleSpec};

use super::config::{load_data, ExperimentConfig};
use super::run::run_on;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Split,
    Gaussian,
    Random,
}

impl std::str::FromStr for SweepKind {
    type Err = ScrollError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "split" => Ok(SweepKind::Split),
            "gaussian" => Ok(SweepKind::Gaussian),
            "random" => Ok(SweepKind::Random),
            other => Err(ScrollError::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Parses a comma-separated kind list such as `split,gaussian,random`.
pub fn parse_kinds(list: &str) -> Result<Vec<SweepKind>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

const SPLIT_SIZES: [usize; 3] = [1, 2, 5];

/// The `i`-th schedule of a sweep. Kinds cycle in order; class splits
/// further cycle through 1, 2 and 5 classes per batch.
pub fn sweep_schedule(kinds: &[SweepKind], i: usize, class_count: usize, seed: u64) -> ScheduleSpec {
    let kind = kinds[i % kinds.len()];
    let round = i / kinds.len();
    let seed = seed.wrapping_add(i as u64);
    let kind = match kind {
        SweepKind::Split => {
            let sizes: Vec<usize> = SPLIT_SIZES.iter().copied().filter(|&c| c <= class_count).collect();
            let c = if sizes.is_empty() { 1 } else { sizes[round % sizes.len()] };
            ScheduleKind::ClassSplit { classes_per_batch: c }
        }
        SweepKind::Gaussian => ScheduleKind::Gaussian {
            sigma: 0.1,
            peak_spacing: None,
            batch_size: 1,
        },
        SweepKind::Random => ScheduleKind::RandomIid { batch_size: 10 },
    };
    ScheduleSpec::new(kind, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub schedule: ScheduleSpec,
    pub f_t: f64,
    pub f_star: f64,
    /// Max elementwise deviation of the stage-one statistics from the
    /// first run's.
    pub state_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub version: String,
    pub config_hash: String,
    pub runs: Vec<SweepRun>,
    pub f_t_spread: f64,
    pub f_star_spread: f64,
    pub max_state_deviation: f64,
}

fn spread(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = values.fold(f64::INFINITY, f64::min);
    max - min
}

/// Thread count from `SCROLL_THREADS`, else all cores.
pub fn thread_count() -> usize {
    std::env::var("SCROLL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `cfg` under explicit schedules in parallel.
pub fn sweep_schedules(cfg: &ExperimentConfig, schedules: &[ScheduleSpec]) -> Result<RobustnessReport> {
    if schedules.len() < 2 {
        return Err(ScrollError::Config("a sweep needs at least two schedules".into()));
    }
    cfg.validate()?;
    let (train, test) = load_data(&cfg.data)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| ScrollError::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<(f64, f64, StageOne)> = pool.install(|| {
        schedules
            .par_iter()
            .map(|schedule| {
                let mut run_cfg = cfg.clone();
                run_cfg.schedule = schedule.clone();
                run_cfg.checkpoints.clear();
                let out = run_on(&run_cfg, &train, &test)?;
                Ok((out.report.f_t.accuracy, out.report.f_star.accuracy, out.stage_one))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let reference = &outcomes[0].2;
    let runs: Vec<SweepRun> = schedules
        .iter()
        .zip(&outcomes)
        .map(|(schedule, (f_t, f_star, state))| SweepRun {
            schedule: schedule.clone(),
            f_t: *f_t,
            f_star: *f_star,
            state_deviation: reference.max_deviation(state),
        })
        .collect();
    Ok(RobustnessReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        f_t_spread: spread(runs.iter().map(|r| r.f_t)),
        f_star_spread: spread(runs.iter().map(|r| r.f_star)),
        max_state_deviation: runs.iter().map(|r| r.state_deviation).fold(0.0, f64::max),
        runs,
    })
}

/// Runs `cfg` under `n` seeded schedules drawn from `kinds`.
pub fn robustness_sweep(cfg: &ExperimentConfig, n: usize, kinds: &[SweepKind]) -> Result<RobustnessReport> {
    if kinds.is_empty() {
        return Err(ScrollError::Config("no schedule kinds given".into()));
    }
    if n < 2 {
        return Err(ScrollError::Config("a sweep needs at least two schedules".into()));
    }
    let class_count = match &cfg.data {
        super::config::DataSource::Synthetic(spec) => spec.class_count,
        _ => load_data(&cfg.data)?.0.class_count(),
    };
    let schedules: Vec<ScheduleSpec> = (0..n).map(|i| sweep_schedule(kinds, i, class_count, cfg.seed)).collect();
    sweep_schedules(cfg, &schedules)
}
