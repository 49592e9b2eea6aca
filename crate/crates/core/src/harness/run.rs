use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdaptMode, AdaptedPredictor, EpochStats, InitKind};
use crate::embed_store::EmbeddingTable;
use crate::error::{Result, ScrollError};
use crate::online_learner::{ClassifierKind, LinearHead, NccState, RidgeState, StageOne};
use crate::replay_buffer::{self, Arrival, ReplayBuffer};
use crate::schedule::{self, Batch};

use super::config::{load_data, ClassifierConfig, ExperimentConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferStats {
    pub size: usize,
    pub capacity: usize,
    pub per_class_counts: BTreeMap<usize, usize>,
    pub moment_distances: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intermediate {
    pub position: usize,
    pub classes_observed: usize,
    pub f_t: Accuracy,
    pub f_star: Accuracy,
}

/// Wall-clock milliseconds per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stream_ms: f64,
    pub adapt_ms: f64,
    pub eval_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub config_hash: String,
    pub batches: usize,
    pub f_t: Accuracy,
    pub f_star: Accuracy,
    pub buffer: BufferStats,
    pub intermediate: Vec<Intermediate>,
    pub warnings: Vec<String>,
    pub config: ExperimentConfig,
    pub timings: Timings,
}

/// Everything a run produces besides the report.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub stage_one: StageOne,
    pub buffer: ReplayBuffer,
    pub adapted: AdaptedPredictor,
    pub curve: Vec<EpochStats>,
}

/// Mutable state of one online pass.
#[derive(Clone, Debug)]
pub(crate) struct Session {
    pub stage_one: StageOne,
    pub buffer: ReplayBuffer,
    seen: BTreeSet<usize>,
}

impl Session {
    pub fn new(cfg: &ExperimentConfig, class_count: usize, dim: usize) -> Result<Self> {
        let stage_one = match cfg.classifier {
            ClassifierConfig::Ncc => StageOne::Ncc(NccState::new(class_count, dim)),
            ClassifierConfig::Ridge { lambda } => StageOne::Ridge(RidgeState::new(class_count, dim, lambda)?),
        };
        Ok(Self {
            stage_one,
            buffer: ReplayBuffer::new(cfg.buffer.capacity, cfg.buffer.strategy, cfg.buffer.seed),
            seen: BTreeSet::new(),
        })
    }

    pub fn process(&mut self, batch: &Batch<'_>) -> Result<()> {
        let arrivals: Vec<Arrival<'_>> = batch.samples().collect();
        self.buffer.update(&arrivals)?;
        for (_, x, y) in batch.samples() {
            let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            self.stage_one.update(&x, y)?;
            self.seen.insert(y);
        }
        Ok(())
    }

    fn classes_observed(&self) -> usize {
        self.seen.len()
    }
}

/// Stage-one predictor `f_T`. NCC predicts by distance over the classes
/// observed so far; ridge uses its solved head.
pub(crate) enum StagePredictor<'a> {
    Ncc(&'a NccState),
    Head(LinearHead),
}

impl StagePredictor<'_> {
    pub fn predict(&self, z: &[f64]) -> Result<usize> {
        match self {
            StagePredictor::Ncc(s) => s.predict(z),
            StagePredictor::Head(h) => h.predict(z),
        }
    }
}

pub(crate) struct Finished<'a> {
    pub f_t: StagePredictor<'a>,
    pub adapted: AdaptedPredictor,
    pub curve: Vec<EpochStats>,
    memory_free: bool,
}

impl Finished<'_> {
    /// `f*`; the memory-free path is `f_T` itself.
    pub fn predict_star(&self, z: &[f64]) -> Result<usize> {
        if self.memory_free {
            self.f_t.predict(z)
        } else {
            self.adapted.predict(z)
        }
    }
}

/// Solves the stage-one head and adapts on the buffer.
pub(crate) fn finish<'a>(cfg: &ExperimentConfig, session: &'a Session) -> Result<Finished<'a>> {
    let head = session.stage_one.head()?;
    let f_t = match &session.stage_one {
        StageOne::Ncc(s) => StagePredictor::Ncc(s),
        StageOne::Ridge(_) => StagePredictor::Head(head.clone()),
    };
    let default_init = match session.stage_one.kind() {
        ClassifierKind::Ncc => InitKind::Ncc,
        ClassifierKind::Ridge => InitKind::Ridge,
    };
    let init_kind = cfg.adapt.init.unwrap_or(default_init);
    let init = if init_kind == default_init {
        head
    } else {
        adapter::init_head(
            init_kind,
            Some(&session.stage_one),
            head.class_count(),
            head.dim(),
            cfg.adapt.seed,
        )?
    };
    let (adapted, curve) = adapter::adapt(&init, init_kind, &session.buffer, &cfg.adapt)?;
    Ok(Finished {
        f_t,
        adapted,
        curve,
        memory_free: cfg.adapt.mode == AdaptMode::None,
    })
}

pub fn evaluate(predict: impl Fn(&[f64]) -> Result<usize>, test: &EmbeddingTable) -> Result<Accuracy> {
    let k = test.class_count();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for i in 0..test.len() {
        let y = test.label(i);
        totals[y] += 1;
        if predict(&test.row_f64(i))? == y {
            hits[y] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    let total = test.len();
    Ok(Accuracy {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect(),
    })
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, test) = load_data(&cfg.data)?;
    run_on(cfg, &train, &test)
}

/// Runs on already loaded, normalized tables.
pub fn run_on(cfg: &ExperimentConfig, train: &EmbeddingTable, test: &EmbeddingTable) -> Result<RunOutcome> {
    cfg.validate()?;
    let total = Instant::now();
    let mut timings = Timings::default();
    let sched = schedule::build_schedule(&cfg.schedule, train.labels())?;
    let batches = sched.batch_count();
    if let Some(&t) = cfg.checkpoints.iter().find(|&&t| t > batches) {
        return Err(ScrollError::OutOfRange {
            position: t,
            limit: batches,
        });
    }
    let mut checkpoints = cfg.checkpoints.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();

    let mut session = Session::new(cfg, train.class_count(), train.dim())?;
    let mut intermediate = Vec::new();
    let mut adapt_ms = 0.0;
    let mut eval_ms = 0.0;
    let stream_start = Instant::now();
    for batch in schedule::apply(&sched, train)? {
        session.process(&batch)?;
        let position = batch.position + 1;
        if checkpoints.binary_search(&position).is_ok() {
            let start = Instant::now();
            let done = finish(cfg, &session)?;
            adapt_ms += ms(start);
            let start = Instant::now();
            intermediate.push(Intermediate {
                position,
                classes_observed: session.classes_observed(),
                f_t: evaluate(|z| done.f_t.predict(z), test)?,
                f_star: evaluate(|z| done.predict_star(z), test)?,
            });
            eval_ms += ms(start);
        }
    }
    timings.stream_ms = ms(stream_start) - adapt_ms - eval_ms;

    let start = Instant::now();
    let done = finish(cfg, &session)?;
    timings.adapt_ms = adapt_ms + ms(start);
    let start = Instant::now();
    let f_t = evaluate(|z| done.f_t.predict(z), test)?;
    let f_star = evaluate(|z| done.predict_star(z), test)?;
    timings.eval_ms = eval_ms + ms(start);

    let buffer = BufferStats {
        size: session.buffer.len(),
        capacity: session.buffer.capacity(),
        per_class_counts: session.buffer.class_counts(),
        moment_distances: replay_buffer::moment_distance(&session.buffer, train),
    };
    let mut warnings = session.buffer.warnings().to_vec();
    if cfg.adapt.mode != AdaptMode::None && cfg.buffer.capacity == 0 {
        warnings.push("adaptation requested without a replay buffer".into());
    }
    let Finished { adapted, curve, .. } = done;
    timings.total_ms = ms(total);
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        batches,
        f_t,
        f_star,
        buffer,
        intermediate,
        warnings,
        config: cfg.clone(),
        timings,
    };
    Ok(RunOutcome {
        report,
        stage_one: session.stage_one,
        buffer: session.buffer,
        adapted,
        curve,
    })
}

/// Predictor after the first `t` batches, adapted from the stage-one head
/// at `t`.
pub fn intermediate_predictor(t: usize, cfg: &ExperimentConfig) -> Result<AdaptedPredictor> {
    cfg.validate()?;
    let (train, _) = load_data(&cfg.data)?;
    intermediate_predictor_on(t, cfg, &train)
}

pub fn intermediate_predictor_on(t: usize, cfg: &ExperimentConfig, train: &EmbeddingTable) -> Result<AdaptedPredictor> {
    let sched = schedule::build_schedule(&cfg.schedule, train.labels())?;
    if t > sched.batch_count() {
        return Err(ScrollError::OutOfRange {
            position: t,
            limit: sched.batch_count(),
        });
    }
    let mut session = Session::new(cfg, train.class_count(), train.dim())?;
    let mut stream = schedule::apply(&sched, train)?;
    for i in 0..t {
        session.process(&stream.fetch(i)?)?;
    }
    Ok(finish(cfg, &session)?.adapted)
}
