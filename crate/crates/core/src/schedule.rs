//! Schedules: an ordering of a dataset plus a batching of that ordering.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed_store::EmbeddingTable;
use crate::error::{Result, ScrollError};

/// A permutation `σ` of `0..N` and strictly increasing batch cut points
/// starting at 0 and ending at N.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    permutation: Vec<usize>,
    bounds: Vec<usize>,
}

impl Schedule {
    pub fn new(permutation: Vec<usize>, bounds: Vec<usize>) -> Result<Self> {
        let n = permutation.len();
        if n == 0 {
            return Err(ScrollError::Spec("schedule must cover at least one sample".into()));
        }
        let mut seen = vec![false; n];
        for &i in &permutation {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(ScrollError::Spec(format!(
                    "permutation is not a bijection on 0..{n} (offending entry {i})"
                )));
            }
        }
        if bounds.len() < 2 || bounds[0] != 0 || *bounds.last().unwrap() != n {
            return Err(ScrollError::Spec(format!("batch bounds must start at 0 and end at {n}")));
        }
        if bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ScrollError::Spec("batch bounds must be strictly increasing".into()));
        }
        Ok(Self { permutation, bounds })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::new((0..n).collect(), vec![0, n])
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn batch_count(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn bounds(&self) -> &[usize] {
        &self.bounds
    }

    pub fn batch(&self, t: usize) -> &[usize] {
        &self.permutation[self.bounds[t]..self.bounds[t + 1]]
    }

    pub fn batches(&self) -> impl Iterator<Item = &[usize]> + '_ {
        self.bounds.windows(2).map(|w| &self.permutation[w[0]..w[1]])
    }
}

fn default_gaussian_batch() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Whole classes, `classes_per_batch` at a time, in a seeded class order.
    /// When the class count is not a multiple, the final batch holds the
    /// remaining classes.
    ClassSplit { classes_per_batch: usize },
    /// Classes interleave smoothly: each class has a peak on `[0, 1]` and
    /// step `i` samples a class with weight `exp(-(i/N - peak)^2 / 2σ^2)`.
    Gaussian {
        sigma: f64,
        /// Distance between consecutive class peaks; defaults to `1/K`.
        #[serde(default)]
        peak_spacing: Option<f64>,
        #[serde(default = "default_gaussian_batch")]
        batch_size: usize,
    },
    RandomIid { batch_size: usize },
    SingleBatch,
    Explicit { permutation: Vec<usize>, bounds: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(flatten)]
    pub kind: ScheduleKind,
    #[serde(default)]
    pub seed: u64,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ScheduleKind::ClassSplit { classes_per_batch: 0 } => {
                Err(ScrollError::Spec("classes_per_batch must be positive".into()))
            }
            ScheduleKind::Gaussian {
                sigma,
                peak_spacing,
                batch_size,
            } => {
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return Err(ScrollError::Spec("gaussian sigma must be positive".into()));
                }
                if peak_spacing.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
                    return Err(ScrollError::Spec("gaussian peak_spacing must be positive".into()));
                }
                if *batch_size == 0 {
                    return Err(ScrollError::Spec("batch_size must be positive".into()));
                }
                Ok(())
            }
            ScheduleKind::RandomIid { batch_size: 0 } => {
                Err(ScrollError::Spec("batch_size must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

fn cut_uniform(n: usize, size: usize) -> Vec<usize> {
    let mut bounds: Vec<usize> = (0..n).step_by(size).collect();
    bounds.push(n);
    bounds
}

/// Distinct class ids present in `labels`, ascending.
fn present_classes(labels: &[u32]) -> Vec<usize> {
    let mut classes: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

fn per_class_indices(labels: &[u32], classes: &[usize]) -> Vec<Vec<usize>> {
    let max = classes.last().copied().unwrap_or(0);
    let mut slot = vec![usize::MAX; max + 1];
    for (pos, &c) in classes.iter().enumerate() {
        slot[c] = pos;
    }
    let mut groups = vec![Vec::new(); classes.len()];
    for (i, &l) in labels.iter().enumerate() {
        groups[slot[l as usize]].push(i);
    }
    groups
}

pub fn build_schedule(spec: &ScheduleSpec, labels: &[u32]) -> Result<Schedule> {
    spec.validate()?;
    if labels.is_empty() {
        return Err(ScrollError::Spec("cannot schedule an empty dataset".into()));
    }
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match &spec.kind {
        ScheduleKind::SingleBatch => Schedule::identity(n),
        ScheduleKind::Explicit { permutation, bounds } => {
            if permutation.len() != n {
                return Err(ScrollError::Spec(format!(
                    "explicit permutation has length {} but the dataset has {n} rows",
                    permutation.len()
                )));
            }
            Schedule::new(permutation.clone(), bounds.clone())
        }
        ScheduleKind::RandomIid { batch_size } => {
            let mut permutation: Vec<usize> = (0..n).collect();
            permutation.shuffle(&mut rng);
            Schedule::new(permutation, cut_uniform(n, *batch_size))
        }
        ScheduleKind::ClassSplit { classes_per_batch } => {
            let classes = present_classes(labels);
            let k = classes.len();
            if *classes_per_batch > k {
                return Err(ScrollError::Spec(format!(
                    "classes_per_batch {classes_per_batch} exceeds the {k} classes present"
                )));
            }
            let groups = per_class_indices(labels, &classes);
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);
            let mut permutation = Vec::with_capacity(n);
            let mut bounds = vec![0];
            for chunk in order.chunks(*classes_per_batch) {
                let start = permutation.len();
                for &g in chunk {
                    permutation.extend_from_slice(&groups[g]);
                }
                permutation[start..].shuffle(&mut rng);
                bounds.push(permutation.len());
            }
            Schedule::new(permutation, bounds)
        }
        ScheduleKind::Gaussian {
            sigma,
            peak_spacing,
            batch_size,
        } => {
            let classes = present_classes(labels);
            let k = classes.len();
            let mut pools = per_class_indices(labels, &classes);
            for pool in &mut pools {
                pool.shuffle(&mut rng);
                // Consumed from the back.
                pool.reverse();
            }
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);
            let spacing = peak_spacing.unwrap_or(1.0 / k as f64);
            let mut peaks = vec![0.0; k];
            for (rank, &g) in order.iter().enumerate() {
                peaks[g] = (rank as f64 + 0.5) * spacing;
            }
            let two_var = 2.0 * sigma * sigma;
            let mut permutation = Vec::with_capacity(n);
            let mut log_w = vec![f64::NEG_INFINITY; k];
            for step in 0..n {
                let s = step as f64 / n as f64;
                let mut max = f64::NEG_INFINITY;
                for g in 0..k {
                    log_w[g] = if pools[g].is_empty() {
                        f64::NEG_INFINITY
                    } else {
                        -(s - peaks[g]).powi(2) / two_var
                    };
                    max = max.max(log_w[g]);
                }
                let weights: Vec<f64> = log_w
                    .iter()
                    .map(|&lw| if lw == f64::NEG_INFINITY { 0.0 } else { (lw - max).exp() })
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut target = rng.random::<f64>() * total;
                let mut chosen = None;
                for (g, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    chosen = Some(g);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
                let g = chosen.expect("at least one class has remaining samples");
                permutation.push(pools[g].pop().unwrap());
            }
            Schedule::new(permutation, cut_uniform(n, *batch_size))
        }
    }
}

/// One batch `B_t` of a stream.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub position: usize,
    indices: &'a [usize],
    table: &'a EmbeddingTable,
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Dataset row indices in stream order.
    pub fn indices(&self) -> &'a [usize] {
        self.indices
    }

    /// `(row index, embedding, label)` triples in stream order.
    pub fn samples(&self) -> impl Iterator<Item = (usize, &'a [f32], usize)> + 'a {
        let table = self.table;
        self.indices.iter().map(move |&i| (i, table.row(i), table.label(i)))
    }
}

/// Streams the batches of a schedule over a table. Each batch can be taken
/// exactly once, in order; asking for an earlier batch is an error.
#[derive(Debug)]
pub struct ConsumeOnceStream<'a> {
    schedule: &'a Schedule,
    table: &'a EmbeddingTable,
    cursor: usize,
}

impl<'a> ConsumeOnceStream<'a> {
    pub fn batch_count(&self) -> usize {
        self.schedule.batch_count()
    }

    pub fn position(&self) -> usize {
        self.cursor
    }

    pub fn fetch(&mut self, t: usize) -> Result<Batch<'a>> {
        if t < self.cursor {
            return Err(ScrollError::StreamReaccess {
                requested: t,
                cursor: self.cursor,
            });
        }
        if t >= self.batch_count() {
            return Err(ScrollError::OutOfRange {
                position: t,
                limit: self.batch_count().saturating_sub(1),
            });
        }
        if t > self.cursor {
            return Err(ScrollError::Spec(format!(
                "batch {t} requested before batch {} was consumed",
                self.cursor
            )));
        }
        self.cursor += 1;
        Ok(Batch {
            position: t,
            indices: self.schedule.batch(t),
            table: self.table,
        })
    }
}

impl<'a> Iterator for ConsumeOnceStream<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        self.fetch(self.cursor).ok()
    }
}

pub fn apply<'a>(schedule: &'a Schedule, table: &'a EmbeddingTable) -> Result<ConsumeOnceStream<'a>> {
    if schedule.len() != table.len() {
        return Err(ScrollError::Spec(format!(
            "schedule covers {} samples but the table has {}",
            schedule.len(),
            table.len()
        )));
    }
    Ok(ConsumeOnceStream {
        schedule,
        table,
        cursor: 0,
    })
}
