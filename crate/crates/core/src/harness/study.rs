use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed_store::EmbeddingTable;
use crate::error::{Result, ScrollError};
use crate::replay_buffer::{moment_distance, Arrival, BufferStrategy, MomentRecord, ReplayBuffer};

use super::config::{load_data, ExperimentConfig};
use super::sweep::thread_count;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub b1: usize,
    pub b2: usize,
    pub strategy: BufferStrategy,
    /// Moment distance averaged over classes and shuffles.
    pub mean_distance: f64,
    /// Per-class variance over shuffles, averaged over classes.
    pub var_distance: f64,
    pub shuffles: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyScenarioRecords {
    pub b1: usize,
    pub b2: usize,
    pub records: Vec<MomentRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    pub raw: Vec<StudyScenarioRecords>,
}

/// Streams one class alone through a fresh buffer and returns its moment
/// distance.
pub fn class_distance(
    table: &EmbeddingTable,
    class: usize,
    b1: usize,
    b2: usize,
    strategy: BufferStrategy,
    seed: u64,
) -> Result<f64> {
    let mut order = table.class_indices(class);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class as u64);
    order.shuffle(&mut rng);
    let mut buffer = ReplayBuffer::new(b1, strategy, seed);
    for chunk in order.chunks(b2) {
        let arrivals: Vec<Arrival<'_>> = chunk.iter().map(|&i| (i, table.row(i), class)).collect();
        buffer.update(&arrivals)?;
    }
    Ok(moment_distance(&buffer, table).get(&class).copied().unwrap_or(0.0))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64
}

/// Per `(b1, b2, strategy)`: moment distances over `shuffles` random
/// orderings of each class's data.
pub fn buffer_study(cfg: &ExperimentConfig, shuffles: usize) -> Result<StudyResult> {
    if shuffles < 2 {
        return Err(ScrollError::Config("buffer study needs at least two shuffles".into()));
    }
    cfg.validate()?;
    let study = cfg.study.clone().unwrap_or_default();
    let (train, _) = load_data(&cfg.data)?;
    let classes: Vec<usize> = match &study.classes {
        Some(list) => {
            if let Some(&bad) = list.iter().find(|&&c| c >= train.class_count()) {
                return Err(ScrollError::ClassId {
                    class: bad,
                    class_count: train.class_count(),
                });
            }
            list.clone()
        }
        None => (0..train.class_count()).collect(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| ScrollError::Config(format!("thread pool: {e}")))?;

    let mut rows = Vec::new();
    let mut raw = Vec::new();
    for &(b1, b2) in &study.scenarios {
        let mut records = Vec::new();
        for &strategy in &study.strategies {
            // distances[class][shuffle]
            let distances: Vec<Vec<f64>> = pool.install(|| {
                classes
                    .par_iter()
                    .map(|&class| {
                        (0..shuffles)
                            .map(|s| class_distance(&train, class, b1, b2, strategy, cfg.seed.wrapping_add(s as u64)))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            for (&class, per_shuffle) in classes.iter().zip(&distances) {
                for (s, &distance) in per_shuffle.iter().enumerate() {
                    records.push(MomentRecord {
                        class,
                        strategy,
                        seed: cfg.seed.wrapping_add(s as u64),
                        distance,
                    });
                }
            }
            let means: Vec<f64> = distances.iter().map(|d| mean(d)).collect();
            let vars: Vec<f64> = distances.iter().map(|d| sample_variance(d)).collect();
            rows.push(StudyRow {
                b1,
                b2,
                strategy,
                mean_distance: mean(&means),
                var_distance: mean(&vars),
                shuffles,
            });
        }
        raw.push(StudyScenarioRecords { b1, b2, records });
    }
    Ok(StudyResult { rows, raw })
}

/// Writes `b1,b2,strategy,mean_distance,var_distance,shuffles` rows.
pub fn write_study_csv<W: Write>(out: W, rows: &[StudyRow]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer
        .write_record(["b1", "b2", "strategy", "mean_distance", "var_distance", "shuffles"])
        .map_err(|e| ScrollError::Data(e.to_string()))?;
    for r in rows {
        writer
            .write_record([
                r.b1.to_string(),
                r.b2.to_string(),
                r.strategy.name().to_string(),
                r.mean_distance.to_string(),
                r.var_distance.to_string(),
                r.shuffles.to_string(),
            ])
            .map_err(|e| ScrollError::Data(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}
