//! Class-balanced replay buffer with exemplar (herding), reservoir, nearest
//! and outlier selection.
//!
//! Every class gets a quota of `floor(capacity / classes_seen)` slots, with
//! the lowest class ids receiving one extra slot each until the capacity is
//! used up. A class's stored list is re-derived from its candidate pool
//! (stored samples plus new arrivals) whenever it receives data or its quota
//! shrinks.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed_store::EmbeddingTable;
use crate::error::{Result, ScrollError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferStrategy {
    Exemplar,
    Reservoir,
    Nearest,
    Outlier,
}

impl BufferStrategy {
    pub fn name(self) -> &'static str {
        match self {
            BufferStrategy::Exemplar => "exemplar",
            BufferStrategy::Reservoir => "reservoir",
            BufferStrategy::Nearest => "nearest",
            BufferStrategy::Outlier => "outlier",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            BufferStrategy::Exemplar => 0,
            BufferStrategy::Reservoir => 1,
            BufferStrategy::Nearest => 2,
            BufferStrategy::Outlier => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => BufferStrategy::Exemplar,
            1 => BufferStrategy::Reservoir,
            2 => BufferStrategy::Nearest,
            3 => BufferStrategy::Outlier,
            _ => return None,
        })
    }
}

impl std::str::FromStr for BufferStrategy {
    type Err = ScrollError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exemplar" => Ok(BufferStrategy::Exemplar),
            "reservoir" | "random" => Ok(BufferStrategy::Reservoir),
            "nearest" => Ok(BufferStrategy::Nearest),
            "outlier" => Ok(BufferStrategy::Outlier),
            other => Err(ScrollError::Config(format!("unknown buffer strategy `{other}`"))),
        }
    }
}

/// Exact streaming mean of every sample observed per class, buffered or not.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningClassMean {
    sums: BTreeMap<usize, (Vec<f64>, u64)>,
}

impl RunningClassMean {
    pub fn update(&mut self, class: usize, x: &[f32]) {
        let (sum, count) = self
            .sums
            .entry(class)
            .or_insert_with(|| (vec![0.0; x.len()], 0));
        for (s, &v) in sum.iter_mut().zip(x) {
            *s += v as f64;
        }
        *count += 1;
    }

    pub fn count(&self, class: usize) -> u64 {
        self.sums.get(&class).map_or(0, |(_, c)| *c)
    }

    pub fn mean(&self, class: usize) -> Option<Vec<f64>> {
        self.sums
            .get(&class)
            .map(|(sum, count)| sum.iter().map(|s| s / *count as f64).collect())
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.sums.keys().copied()
    }

    pub(crate) fn insert_raw(&mut self, class: usize, sum: Vec<f64>, count: u64) {
        self.sums.insert(class, (sum, count));
    }

    pub(crate) fn raw(&self, class: usize) -> Option<(&[f64], u64)> {
        self.sums.get(&class).map(|(s, c)| (s.as_slice(), *c))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredSample {
    /// Row index in the source table.
    pub index: usize,
    pub vector: Vec<f32>,
}

/// Greedy moment-matching order.
///
/// Step `s` appends the unchosen candidate minimizing
/// `‖target − mean(chosen ∪ {candidate})‖₂`; ties go to the lowest position.
pub fn herding_order<V: AsRef<[f64]>>(candidates: &[V], target: &[f64]) -> Vec<usize> {
    herding_prefix(candidates, target, candidates.len())
}

/// First `limit` entries of [`herding_order`].
pub fn herding_prefix<V: AsRef<[f64]>>(candidates: &[V], target: &[f64], limit: usize) -> Vec<usize> {
    let dim = target.len();
    let limit = limit.min(candidates.len());
    let mut chosen = vec![false; candidates.len()];
    let mut order = Vec::with_capacity(limit);
    let mut sum = vec![0.0; dim];
    for step in 0..limit {
        let denom = (step + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, cand) in candidates.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            let cand = cand.as_ref();
            let mut dist = 0.0;
            for j in 0..dim {
                let diff = target[j] - (sum[j] + cand[j]) / denom;
                dist += diff * diff;
            }
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (pick, _) = best.expect("limit never exceeds the candidate count");
        chosen[pick] = true;
        for (s, v) in sum.iter_mut().zip(candidates[pick].as_ref()) {
            *s += v;
        }
        order.push(pick);
    }
    order
}

/// Positions of `candidates` sorted by distance to `center`, nearest first
/// (or farthest first when `farthest`), ties by position.
fn distance_rank(candidates: &[Vec<f64>], center: &[f64], farthest: bool) -> Vec<usize> {
    let dists: Vec<f64> = candidates
        .iter()
        .map(|c| c.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let ord = dists[a].total_cmp(&dists[b]);
        let ord = if farthest { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    order
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// One `(row index, embedding, class)` arrival.
pub type Arrival<'a> = (usize, &'a [f32], usize);

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    strategy: BufferStrategy,
    seed: u64,
    per_class: BTreeMap<usize, Vec<StoredSample>>,
    running: RunningClassMean,
    warnings: Vec<String>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, strategy: BufferStrategy, seed: u64) -> Self {
        Self {
            capacity,
            strategy,
            seed,
            per_class: BTreeMap::new(),
            running: RunningClassMean::default(),
            warnings: Vec::new(),
        }
    }

    pub(crate) fn from_parts(
        capacity: usize,
        strategy: BufferStrategy,
        seed: u64,
        per_class: BTreeMap<usize, Vec<StoredSample>>,
        running: RunningClassMean,
    ) -> Self {
        Self {
            capacity,
            strategy,
            seed,
            per_class,
            running,
            warnings: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn strategy(&self) -> BufferStrategy {
        self.strategy
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn running_means(&self) -> &RunningClassMean {
        &self.running
    }

    pub fn classes_seen(&self) -> usize {
        self.running.sums.len()
    }

    /// Stored samples of `class` in the strategy's order.
    pub fn class_samples(&self, class: usize) -> &[StoredSample] {
        self.per_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.per_class
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(&c, v)| (c, v.len()))
            .collect()
    }

    /// All stored samples, ascending class id, each class in stored order.
    pub fn samples(&self) -> impl Iterator<Item = (usize, &StoredSample)> + '_ {
        self.per_class
            .iter()
            .flat_map(|(&c, v)| v.iter().map(move |s| (c, s)))
    }

    /// Capacity warnings recorded so far (deduplicated).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Content fingerprint: class ids and row indices in stored order.
    pub fn snapshot_id(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update([self.strategy.tag()]);
        for (class, sample) in self.samples() {
            hasher.update((class as u64).to_le_bytes());
            hasher.update((sample.index as u64).to_le_bytes());
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Per-class quota given the classes seen so far.
    pub fn quotas(&self) -> BTreeMap<usize, usize> {
        let seen: Vec<usize> = self.running.classes().collect();
        if seen.is_empty() {
            return BTreeMap::new();
        }
        let base = self.capacity / seen.len();
        let extra = self.capacity % seen.len();
        seen.iter()
            .enumerate()
            .map(|(rank, &c)| (c, base + usize::from(rank < extra)))
            .collect()
    }

    fn class_rng(&self, class: usize, seen_before: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ seen_before.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(class as u64);
        rng
    }

    /// Absorbs one stream batch.
    pub fn update(&mut self, batch: &[Arrival<'_>]) -> Result<()> {
        let mut arrivals: BTreeMap<usize, Vec<(usize, &[f32])>> = BTreeMap::new();
        let mut dim = None;
        for &(index, x, class) in batch {
            if *dim.get_or_insert(x.len()) != x.len() {
                return Err(ScrollError::Shape {
                    expected: dim.unwrap(),
                    actual: x.len(),
                });
            }
            arrivals.entry(class).or_default().push((index, x));
        }
        let mut seen_before = BTreeMap::new();
        for (&class, items) in arrivals.iter_mut() {
            // Canonical order so whole-class arrivals are schedule independent.
            items.sort_by_key(|(i, _)| *i);
            seen_before.insert(class, self.running.count(class));
            for (_, x) in items.iter() {
                self.running.update(class, x);
            }
        }

        let quotas = self.quotas();
        for (&class, &quota) in &quotas {
            let new_items = arrivals.remove(&class).unwrap_or_default();
            if quota == 0 {
                if self.capacity > 0 {
                    let msg = format!("capacity exhausted: class {class} has a quota of 0");
                    if !self.warnings.contains(&msg) {
                        log::warn!("{msg}");
                        self.warnings.push(msg);
                    }
                }
                self.per_class.remove(&class);
                continue;
            }
            let mut stored = self.per_class.remove(&class).unwrap_or_default();
            if new_items.is_empty() && (stored.len() <= quota || self.strategy != BufferStrategy::Reservoir) {
                // Stored lists are kept in ranking order, so shrinking drops the tail.
                stored.truncate(quota);
                self.per_class.insert(class, stored);
                continue;
            }
            let kept = match self.strategy {
                BufferStrategy::Reservoir => {
                    let rng = self.class_rng(class, seen_before.get(&class).copied().unwrap_or(0));
                    let before = seen_before.get(&class).copied().unwrap_or(0);
                    reservoir_absorb(stored, &new_items, quota, before, rng)
                }
                strategy => {
                    let mean = self.running.mean(class).expect("class has been observed");
                    select_from_pool(strategy, stored, &new_items, quota, &mean)
                }
            };
            self.per_class.insert(class, kept);
        }
        debug_assert!(self.len() <= self.capacity);
        Ok(())
    }
}

fn reservoir_absorb(
    mut stored: Vec<StoredSample>,
    new_items: &[(usize, &[f32])],
    quota: usize,
    seen_before: u64,
    mut rng: ChaCha8Rng,
) -> Vec<StoredSample> {
    // Shrink first so the replacement probability uses the current quota.
    if stored.len() > quota {
        let keep = sample_indices(&mut rng, stored.len(), quota).into_vec();
        let mut keep_sorted = keep;
        keep_sorted.sort_unstable();
        stored = keep_sorted.into_iter().map(|i| stored[i].clone()).collect();
    }
    let mut seen = seen_before;
    for &(index, x) in new_items {
        seen += 1;
        let sample = StoredSample {
            index,
            vector: x.to_vec(),
        };
        if stored.len() < quota {
            stored.push(sample);
        } else {
            let j = rng.random_range(0..seen);
            if (j as usize) < quota {
                stored[j as usize] = sample;
            }
        }
    }
    stored
}

fn select_from_pool(
    strategy: BufferStrategy,
    stored: Vec<StoredSample>,
    new_items: &[(usize, &[f32])],
    quota: usize,
    mean: &[f64],
) -> Vec<StoredSample> {
    let mut pool = stored;
    pool.extend(new_items.iter().map(|&(index, x)| StoredSample {
        index,
        vector: x.to_vec(),
    }));
    pool.sort_by_key(|s| s.index);
    let vectors: Vec<Vec<f64>> = pool.iter().map(|s| to_f64(&s.vector)).collect();
    let order = match strategy {
        BufferStrategy::Exemplar => herding_prefix(&vectors, mean, quota),
        BufferStrategy::Nearest => distance_rank(&vectors, mean, false),
        BufferStrategy::Outlier => distance_rank(&vectors, mean, true),
        BufferStrategy::Reservoir => unreachable!("reservoir has its own update path"),
    };
    let mut slots: Vec<Option<StoredSample>> = pool.into_iter().map(Some).collect();
    order
        .into_iter()
        .take(quota)
        .map(|i| slots[i].take().expect("orders are permutations"))
        .collect()
}

/// `‖mean(stored) − mean(class rows in table)‖₂` for every class with at
/// least one stored sample.
pub fn moment_distance(buffer: &ReplayBuffer, table: &EmbeddingTable) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for (&class, stored) in &buffer.per_class {
        if stored.is_empty() || class >= table.class_count() {
            continue;
        }
        let population = table.class_mean(class);
        let mut mean = vec![0.0; population.len()];
        for s in stored {
            for (m, &v) in mean.iter_mut().zip(&s.vector) {
                *m += v as f64;
            }
        }
        let n = stored.len() as f64;
        let dist = mean
            .iter()
            .zip(&population)
            .map(|(m, p)| (m / n - p).powi(2))
            .sum::<f64>()
            .sqrt();
        out.insert(class, dist);
    }
    out
}

/// One row of a moment-distance sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRecord {
    pub class: usize,
    pub strategy: BufferStrategy,
    pub seed: u64,
    pub distance: f64,
}

/// Writes `class,strategy,seed,distance` rows.
pub fn write_moment_csv<W: Write>(out: W, records: &[MomentRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer
        .write_record(["class", "strategy", "seed", "distance"])
        .map_err(|e| ScrollError::Io(std::io::Error::other(e)))?;
    for r in records {
        writer
            .write_record([
                r.class.to_string(),
                r.strategy.name().to_string(),
                r.seed.to_string(),
                format!("{}", r.distance),
            ])
            .map_err(|e| ScrollError::Io(std::io::Error::other(e)))?;
    }
    writer.flush()?;
    Ok(())
}
