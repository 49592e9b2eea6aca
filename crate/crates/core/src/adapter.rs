//! Replay-only adaptation of the stage-one predictor.
//!
//! The adapted model is `logits = W·g(z) + b` with the residual bottleneck
//! `g(z) = z + V·relu(U·z)`. `V` starts at zero, so before the first
//! optimizer step the adapted model computes exactly the stage-one head.
//! Training minimizes temperature-scaled cross-entropy on buffer samples.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScrollError};
use crate::online_learner::{argmax, LinearHead, StageOne};
use crate::replay_buffer::ReplayBuffer;

/// Residual bottleneck `g(z) = z + up·relu(down·z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualAdapter {
    /// `h × d`
    pub down: DMatrix<f64>,
    /// `d × h`
    pub up: DMatrix<f64>,
}

impl ResidualAdapter {
    /// Random `down` in `[-1/√d, 1/√d]`, zero `up`: the identity map.
    pub fn identity_init(dim: usize, width: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            down: DMatrix::from_fn(width, dim, |_, _| rng.random_range(-bound..=bound)),
            up: DMatrix::zeros(dim, width),
        }
    }

    pub fn width(&self) -> usize {
        self.down.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub adapter: Option<ResidualAdapter>,
    pub head: LinearHead,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: DVector<f64>,
    /// `U·z`
    pub pre_activation: Option<DVector<f64>>,
    /// `relu(U·z)`
    pub hidden: Option<DVector<f64>>,
    /// `g(z)`
    pub features: DVector<f64>,
}

impl AdapterParams {
    pub fn dim(&self) -> usize {
        self.head.dim()
    }

    pub fn class_count(&self) -> usize {
        self.head.class_count()
    }

    pub fn forward(&self, z: &[f64]) -> Result<(DVector<f64>, ForwardCache)> {
        let d = self.dim();
        if z.len() != d {
            return Err(ScrollError::Shape {
                expected: d,
                actual: z.len(),
            });
        }
        let input = DVector::from_column_slice(z);
        let (pre_activation, hidden, features) = match &self.adapter {
            Some(a) => {
                let pre = &a.down * &input;
                let hidden = pre.map(|v| v.max(0.0));
                let features = &input + &a.up * &hidden;
                (Some(pre), Some(hidden), features)
            }
            None => (None, None, input.clone()),
        };
        let logits = &self.head.weights * &features + &self.head.biases;
        Ok((
            logits,
            ForwardCache {
                input,
                pre_activation,
                hidden,
                features,
            },
        ))
    }

    pub fn predict(&self, z: &[f64]) -> Result<usize> {
        let (logits, _) = self.forward(z)?;
        argmax(logits.iter().copied()).ok_or(ScrollError::NoClass)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub down: Option<DMatrix<f64>>,
    pub up: Option<DMatrix<f64>>,
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
}

/// `log Σ exp(s_i)` computed stably.
fn log_sum_exp(s: &DVector<f64>) -> f64 {
    let max = s.max();
    max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean temperature-scaled cross-entropy over `batch` and its exact
/// gradients with respect to every parameter.
pub fn loss_and_grads(params: &AdapterParams, batch: &[(&[f64], usize)], temperature: f64) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(ScrollError::Adapt("loss requested on an empty batch".into()));
    }
    let k = params.class_count();
    let d = params.dim();
    let mut grads = Gradients {
        down: params.adapter.as_ref().map(|a| DMatrix::zeros(a.width(), d)),
        up: params.adapter.as_ref().map(|a| DMatrix::zeros(d, a.width())),
        weights: DMatrix::zeros(k, d),
        biases: DVector::zeros(k),
    };
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &(z, y) in batch {
        if y >= k {
            return Err(ScrollError::ClassId { class: y, class_count: k });
        }
        let (logits, cache) = params.forward(z)?;
        let scaled = logits / temperature;
        let lse = log_sum_exp(&scaled);
        loss += lse - scaled[y];

        // d loss / d logits = (softmax(logits/τ) − onehot(y)) / τ
        let mut dlogits = scaled.map(|s| (s - lse).exp());
        dlogits[y] -= 1.0;
        dlogits *= scale / temperature;

        grads.weights.ger(1.0, &dlogits, &cache.features, 1.0);
        grads.biases += &dlogits;

        if let (Some(adapter), Some(hidden), Some(pre)) = (&params.adapter, &cache.hidden, &cache.pre_activation) {
            let dfeatures = params.head.weights.transpose() * &dlogits;
            grads.up.as_mut().unwrap().ger(1.0, &dfeatures, hidden, 1.0);
            let mut dpre = adapter.up.transpose() * &dfeatures;
            for (g, &a) in dpre.iter_mut().zip(pre.iter()) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            grads.down.as_mut().unwrap().ger(1.0, &dpre, &cache.input, 1.0);
        }
    }
    Ok((loss * scale, grads))
}

/// AdaDelta running averages for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaDeltaState {
    pub sq_grad: Vec<f64>,
    pub sq_update: Vec<f64>,
}

impl AdaDeltaState {
    pub fn new(len: usize) -> Self {
        Self {
            sq_grad: vec![0.0; len],
            sq_update: vec![0.0; len],
        }
    }
}

/// One AdaDelta step, scaled by `lr`:
///
/// ```text
/// E[g²]  ← ρ E[g²] + (1 − ρ) g²
/// Δ      = √(E[Δ²] + ε) / √(E[g²] + ε) · g
/// E[Δ²]  ← ρ E[Δ²] + (1 − ρ) Δ²
/// θ      ← θ − lr · Δ
/// ```
pub fn adadelta_step(param: &mut [f64], grad: &[f64], state: &mut AdaDeltaState, rho: f64, eps: f64, lr: f64) {
    debug_assert_eq!(param.len(), grad.len());
    for i in 0..param.len() {
        let g = grad[i];
        state.sq_grad[i] = rho * state.sq_grad[i] + (1.0 - rho) * g * g;
        let delta = (state.sq_update[i] + eps).sqrt() / (state.sq_grad[i] + eps).sqrt() * g;
        state.sq_update[i] = rho * state.sq_update[i] + (1.0 - rho) * delta * delta;
        param[i] -= lr * delta;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adadelta { rho: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adadelta { rho: 0.95, eps: 1e-6 }
    }
}

enum OptimizerState {
    Sgd,
    Adadelta { rho: f64, eps: f64, slots: Vec<AdaDeltaState> },
}

impl OptimizerState {
    fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adadelta { rho, eps } => OptimizerState::Adadelta {
                rho,
                eps,
                slots: sizes.iter().map(|&n| AdaDeltaState::new(n)).collect(),
            },
        }
    }

    fn step(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            OptimizerState::Sgd => {
                for (p, g) in param.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerState::Adadelta { rho, eps, slots } => adadelta_step(param, grad, &mut slots[slot], *rho, *eps, lr),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Memory-free: the stage-one head is returned unchanged.
    None,
    /// Residual bottleneck plus head.
    Adapter,
    /// Head only.
    FullHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Random,
    Ncc,
    Ridge,
}

fn d_epochs() -> usize {
    40
}
fn d_batch() -> usize {
    50
}
fn d_lr_head() -> f64 {
    0.1
}
fn d_lr_adapter() -> f64 {
    0.01
}
fn d_temperature() -> f64 {
    2.0
}
fn d_threshold() -> usize {
    500
}
fn d_mode() -> AdaptMode {
    AdaptMode::Adapter
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    #[serde(default = "d_mode")]
    pub mode: AdaptMode,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr_head")]
    pub lr_head: f64,
    #[serde(default = "d_lr_adapter")]
    pub lr_adapter: f64,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Buffer size above which full tuning would be preferred.
    #[serde(default = "d_threshold")]
    pub threshold: usize,
    /// Bottleneck width; defaults to `d / 4`.
    #[serde(default)]
    pub bottleneck: Option<usize>,
    /// Head initialization; defaults to the stage-one classifier.
    #[serde(default)]
    pub init: Option<InitKind>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            mode: d_mode(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr_head: d_lr_head(),
            lr_adapter: d_lr_adapter(),
            temperature: d_temperature(),
            optimizer: OptimizerKind::default(),
            threshold: d_threshold(),
            bottleneck: None,
            init: None,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn memory_free() -> Self {
        Self {
            mode: AdaptMode::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ScrollError::Config(format!("adapt: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        // Zero learning rates are allowed: they leave the stage-one function intact.
        if !(self.lr_head >= 0.0 && self.lr_adapter >= 0.0 && self.lr_head.is_finite() && self.lr_adapter.is_finite()) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.bottleneck == Some(0) {
            return bad("bottleneck width must be >= 1");
        }
        if let OptimizerKind::Adadelta { rho, eps } = self.optimizer {
            if !(rho > 0.0 && rho < 1.0) || !(eps > 0.0) {
                return bad("adadelta needs 0 < rho < 1 and eps > 0");
            }
        }
        Ok(())
    }

    pub fn bottleneck_for(&self, dim: usize) -> usize {
        self.bottleneck.unwrap_or((dim / 4).max(1))
    }
}

/// Builds the head that adaptation starts from.
pub fn init_head(
    kind: InitKind,
    stage_one: Option<&StageOne>,
    class_count: usize,
    dim: usize,
    seed: u64,
) -> Result<LinearHead> {
    match (kind, stage_one) {
        (InitKind::Random, _) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bound = 1.0 / (dim as f64).sqrt();
            Ok(LinearHead {
                weights: DMatrix::from_fn(class_count, dim, |_, _| rng.random_range(-bound..=bound)),
                biases: DVector::zeros(class_count),
            })
        }
        (InitKind::Ncc, Some(StageOne::Ncc(state))) => Ok(state.to_linear()),
        (InitKind::Ridge, Some(StageOne::Ridge(state))) => state.solve(),
        (kind, Some(other)) => Err(ScrollError::Init(format!(
            "{kind:?} initialization needs a matching stage-one state, got {:?}",
            other.kind()
        ))),
        (kind, None) => Err(ScrollError::Init(format!("{kind:?} initialization needs a stage-one state"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub init: InitKind,
    pub buffer_snapshot: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedPredictor {
    pub params: AdapterParams,
    pub provenance: Provenance,
}

impl AdaptedPredictor {
    pub fn predict(&self, z: &[f64]) -> Result<usize> {
        self.params.predict(z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub buffer_acc: f64,
}

/// Adapts `init` on the buffer contents only.
///
/// Training always starts from `init` and a fresh identity adapter; nothing
/// carries over between calls. Returns the predictor and one row per epoch.
pub fn adapt(
    init: &LinearHead,
    init_kind: InitKind,
    buffer: &ReplayBuffer,
    cfg: &AdaptConfig,
) -> Result<(AdaptedPredictor, Vec<EpochStats>)> {
    cfg.validate()?;
    let provenance = Provenance {
        init: init_kind,
        buffer_snapshot: buffer.snapshot_id(),
    };
    if cfg.mode == AdaptMode::None {
        return Ok((
            AdaptedPredictor {
                params: AdapterParams {
                    adapter: None,
                    head: init.clone(),
                },
                provenance,
            },
            Vec::new(),
        ));
    }
    if buffer.is_empty() {
        return Err(ScrollError::Adapt("replay buffer is empty".into()));
    }
    match cfg.mode {
        AdaptMode::Adapter if buffer.len() > cfg.threshold => log::warn!(
            "buffer holds {} samples, above the threshold {}; residual adaptation requested anyway",
            buffer.len(),
            cfg.threshold
        ),
        AdaptMode::FullHead if buffer.len() <= cfg.threshold => log::warn!(
            "buffer holds {} samples, within the threshold {}; head-only tuning requested anyway",
            buffer.len(),
            cfg.threshold
        ),
        _ => {}
    }

    let dim = init.dim();
    let data: Vec<(Vec<f64>, usize)> = buffer
        .samples()
        .map(|(c, s)| (s.vector.iter().map(|&v| v as f64).collect(), c))
        .collect();
    if let Some((v, _)) = data.iter().find(|(v, _)| v.len() != dim) {
        return Err(ScrollError::Shape {
            expected: dim,
            actual: v.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adapter = match cfg.mode {
        AdaptMode::Adapter => Some(ResidualAdapter::identity_init(dim, cfg.bottleneck_for(dim), &mut rng)),
        _ => None,
    };
    let mut params = AdapterParams {
        adapter,
        head: init.clone(),
    };
    let sizes: Vec<usize> = {
        let mut s = vec![params.head.weights.len(), params.head.biases.len()];
        if let Some(a) = &params.adapter {
            s.push(a.down.len());
            s.push(a.up.len());
        }
        s
    };
    let mut optimizer = OptimizerState::new(cfg.optimizer, &sizes);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (data[i].0.as_slice(), data[i].1)).collect();
            let (loss, grads) = loss_and_grads(&params, &batch, cfg.temperature)?;
            epoch_loss += loss * batch.len() as f64;
            optimizer.step(0, params.head.weights.as_mut_slice(), grads.weights.as_slice(), cfg.lr_head);
            optimizer.step(1, params.head.biases.as_mut_slice(), grads.biases.as_slice(), cfg.lr_head);
            if let Some(a) = params.adapter.as_mut() {
                optimizer.step(2, a.down.as_mut_slice(), grads.down.as_ref().unwrap().as_slice(), cfg.lr_adapter);
                optimizer.step(3, a.up.as_mut_slice(), grads.up.as_ref().unwrap().as_slice(), cfg.lr_adapter);
            }
        }
        let correct = data
            .iter()
            .filter(|(z, y)| params.predict(z).is_ok_and(|p| p == *y))
            .count();
        curve.push(EpochStats {
            epoch: epoch + 1,
            loss: epoch_loss / data.len() as f64,
            buffer_acc: correct as f64 / data.len() as f64,
        });
    }
    Ok((AdaptedPredictor { params, provenance }, curve))
}

/// Writes `epoch,loss,buffer_acc` rows.
pub fn write_curve_csv<W: std::io::Write>(out: W, curve: &[EpochStats]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in curve {
        writer
            .serialize(row)
            .map_err(|e| ScrollError::Io(std::io::Error::other(e)))?;
    }
    writer.flush()?;
    Ok(())
}
