//! Gradient estimators, the momentum optimizer, and the minibatch training
//! loop.
//!
//! Per minibatch: every datapoint gets `K` proposals from `q`; `p` ascends the
//! importance-weighted joint log-likelihood (wake phase), and `q` is updated
//! with the same weights (wake), with gradients on dreamed `(x′, h′)` pairs
//! drawn from `p` (sleep), or with both.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{minibatches, BinaryDataset, Checkpoint};
use crate::error::{Result, RwsError};
use crate::estimators::{
    draw_cached_batch, effective_sample_size, log_marginal_estimate, normalize_weights,
    streaming_estimate, ImportanceBatch, Proposal, StreamingEstimate,
};
use crate::model::{GenerativeModel, InferenceModel, StackGradient};
use crate::numerics::RngStream;

/// Stream ids at or above this value carry dream samples; datapoint `i` of a
/// minibatch uses stream `i`, dream `j` uses `DREAM_STREAM_BASE + j`.
pub const DREAM_STREAM_BASE: u64 = 1 << 63;

/// Stream of the master seed used for the training loop; stream 0 is left to
/// parameter initialization.
pub const TRAIN_STREAM: u64 = 1;

/// Datapoints per parallel work unit when reducing minibatch gradients. A
/// constant, so the summation order never depends on the thread count.
const REDUCE_GROUP: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QUpdateMode {
    Sleep,
    Wake,
    Both,
}

impl QUpdateMode {
    pub fn uses_wake(self) -> bool {
        matches!(self, QUpdateMode::Wake | QUpdateMode::Both)
    }

    pub fn uses_sleep(self) -> bool {
        matches!(self, QUpdateMode::Sleep | QUpdateMode::Both)
    }
}

impl fmt::Display for QUpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QUpdateMode::Sleep => "sleep",
            QUpdateMode::Wake => "wake",
            QUpdateMode::Both => "both",
        })
    }
}

impl FromStr for QUpdateMode {
    type Err = RwsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sleep" => Ok(QUpdateMode::Sleep),
            "wake" => Ok(QUpdateMode::Wake),
            "both" => Ok(QUpdateMode::Both),
            _ => Err(RwsError::Config(format!(
                "q update mode must be sleep, wake or both, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub k_train: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub q_update_mode: QUpdateMode,
    /// The learning rate is divided by this factor after every epoch.
    pub lr_decay_per_epoch: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the sleep-phase term relative to the wake-phase term of the
    /// `q` update in [`QUpdateMode::Both`].
    #[serde(default = "default_sleep_weight")]
    pub sleep_weight: f64,
    /// Dream samples per minibatch; `None` means one per datapoint.
    #[serde(default)]
    pub dream_samples: Option<usize>,
    /// Rescale each model's minibatch gradient to at most this L2 norm.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_sleep_weight() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k_train: 5,
            learning_rate: 1e-3,
            momentum: 0.95,
            batch_size: 25,
            q_update_mode: QUpdateMode::Both,
            lr_decay_per_epoch: 1.0,
            epochs: 1,
            seed: 0,
            sleep_weight: 1.0,
            dream_samples: None,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RwsError::Config(msg));
        if self.k_train == 0 {
            return bad("k_train must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!(
                "learning_rate must be a non-negative number, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_decay_per_epoch.is_finite() && self.lr_decay_per_epoch >= 1.0) {
            return bad(format!(
                "lr_decay_per_epoch must be at least 1, got {}",
                self.lr_decay_per_epoch
            ));
        }
        if !(self.sleep_weight.is_finite() && self.sleep_weight >= 0.0) {
            return bad(format!(
                "sleep_weight must be non-negative, got {}",
                self.sleep_weight
            ));
        }
        if self.dream_samples == Some(0) {
            return bad("dream_samples must be at least 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Learning rate used during epoch `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate / self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

// ---------------------------------------------------------------------------
// Gradient estimators

/// Adds `scale · Σ_k ω̃_k ∂θ log p(x, h_k)` into `g`.
pub fn wake_p_gradient_into(
    p: &GenerativeModel,
    batch: &ImportanceBatch,
    scale: f64,
    g: &mut StackGradient,
) -> Result<()> {
    let w = normalize_weights(batch);
    for (s, &wk) in batch.samples.iter().zip(&w.tilde_omega) {
        p.joint_grad_into(&batch.x, &s.h, scale * wk, g)?;
    }
    Ok(())
}

/// `Σ_k ω̃_k ∂θ log p(x, h_k)`.
pub fn wake_p_gradient(p: &GenerativeModel, batch: &ImportanceBatch) -> Result<StackGradient> {
    let mut g = p.zero_grad();
    wake_p_gradient_into(p, batch, 1.0, &mut g)?;
    Ok(g)
}

/// Adds `scale · Σ_k ω̃_k ∂φ log q(h_k | x)` into `g`.
pub fn wake_q_gradient_into(
    q: &InferenceModel,
    batch: &ImportanceBatch,
    scale: f64,
    g: &mut StackGradient,
) -> Result<()> {
    let w = normalize_weights(batch);
    for (s, &wk) in batch.samples.iter().zip(&w.tilde_omega) {
        q.grad_into(&s.h, &batch.x, scale * wk, g)?;
    }
    Ok(())
}

/// `Σ_k ω̃_k ∂φ log q(h_k | x)`.
pub fn wake_q_gradient(q: &InferenceModel, batch: &ImportanceBatch) -> Result<StackGradient> {
    let mut g = q.zero_grad();
    wake_q_gradient_into(q, batch, 1.0, &mut g)?;
    Ok(g)
}

/// Dream `(x′, h′) ~ p` and add `scale · ∂φ log q(h′ | x′)` into `g`.
pub fn sleep_q_gradient_into(
    p: &GenerativeModel,
    q: &InferenceModel,
    rng: &mut RngStream,
    scale: f64,
    g: &mut StackGradient,
) -> Result<()> {
    q.check_pair(p)?;
    let (x, h, _) = p.ancestral_sample(rng);
    q.grad_into(&h, &x, scale, g)
}

/// `∂φ log q(h′ | x′)` for one dream sample `(x′, h′) ~ p`.
pub fn sleep_q_gradient(
    p: &GenerativeModel,
    q: &InferenceModel,
    rng: &mut RngStream,
) -> Result<StackGradient> {
    let mut g = q.zero_grad();
    sleep_q_gradient_into(p, q, rng, 1.0, &mut g)?;
    Ok(g)
}

// ---------------------------------------------------------------------------
// Optimizer

/// Momentum buffers for both models, congruent with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub p_velocity: StackGradient,
    pub q_velocity: StackGradient,
}

impl OptimizerState {
    pub fn zeros(p: &GenerativeModel, q: &InferenceModel) -> Self {
        OptimizerState {
            p_velocity: p.zero_grad(),
            q_velocity: q.zero_grad(),
        }
    }

    fn check(&self, p: &GenerativeModel, q: &InferenceModel) -> Result<()> {
        if !same_shape(&self.p_velocity, &p.zero_grad())
            || !same_shape(&self.q_velocity, &q.zero_grad())
        {
            return Err(RwsError::InvalidModel(
                "optimizer state does not match the model shapes".into(),
            ));
        }
        Ok(())
    }
}

fn same_shape(a: &StackGradient, b: &StackGradient) -> bool {
    a.layers.len() == b.layers.len()
        && a.layers.iter().zip(&b.layers).all(|(x, y)| {
            x.blocks().len() == y.blocks().len()
                && x.blocks()
                    .iter()
                    .zip(y.blocks())
                    .all(|(u, v)| u.len() == v.len())
        })
}

/// A stack of parameters that can take an ascent step.
pub trait Ascend {
    fn ascend(&mut self, lr: f64, direction: &StackGradient);
}

impl Ascend for GenerativeModel {
    fn ascend(&mut self, lr: f64, direction: &StackGradient) {
        self.apply(lr, direction);
    }
}

impl Ascend for InferenceModel {
    fn ascend(&mut self, lr: f64, direction: &StackGradient) {
        self.apply(lr, direction);
    }
}

/// `v ← β v + g`, then `params ← params + lr · v`.
pub fn sgd_momentum_step<M: Ascend + ?Sized>(
    params: &mut M,
    grad: &StackGradient,
    velocity: &mut StackGradient,
    lr: f64,
    beta: f64,
) {
    velocity.scale(beta);
    velocity.add_scaled(1.0, grad);
    params.ascend(lr, velocity);
}

fn clip(g: &mut StackGradient, max_norm: Option<f64>) {
    if let Some(c) = max_norm {
        let n = g.norm_sq().sqrt();
        if n > c {
            g.scale(c / n);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop

/// Sums over one minibatch step, before averaging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepMetrics {
    pub datapoints: usize,
    pub ll_sum: f64,
    pub ess_sum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// Mean over the epoch's datapoints of `log p̂(x)` at `K = k_train`.
    pub mean_ll: f64,
    pub mean_ess: f64,
    pub steps: usize,
    pub lr: f64,
}

struct Partial {
    gp: StackGradient,
    gq: StackGradient,
    ll: f64,
    ess: f64,
}

/// The summed wake contributions of `xs[range]`, in index order.
fn wake_group(
    p: &GenerativeModel,
    q: &InferenceModel,
    xs: &[&[u8]],
    range: std::ops::Range<usize>,
    key: u64,
    cfg: &TrainConfig,
) -> Result<Partial> {
    let mut part = Partial {
        gp: p.zero_grad(),
        gq: q.zero_grad(),
        ll: 0.0,
        ess: 0.0,
    };
    for i in range {
        let mut r = RngStream::new(key, i as u64);
        // Same draws and arithmetic as `draw_importance_batch` followed by
        // `wake_p_gradient_into` / `wake_q_gradient_into`, minus the repeated
        // forward passes.
        let (batch, caches) = draw_cached_batch(p, q, xs[i], cfg.k_train, &mut r)?;
        let w = normalize_weights(&batch);
        for ((s, c), &wk) in batch.samples.iter().zip(&caches).zip(&w.tilde_omega) {
            p.joint_grad_from_resid(&batch.x, &s.h, &c.p, wk, &mut part.gp);
            if cfg.q_update_mode.uses_wake() {
                q.grad_from_resid(&s.h, &batch.x, &c.q, wk, &mut part.gq);
            }
        }
        part.ll += log_marginal_estimate(&batch);
        part.ess += effective_sample_size(&w);
    }
    Ok(part)
}

fn sleep_group(
    p: &GenerativeModel,
    q: &InferenceModel,
    range: std::ops::Range<usize>,
    key: u64,
) -> Result<StackGradient> {
    let mut g = q.zero_grad();
    for j in range {
        let mut r = RngStream::new(key, DREAM_STREAM_BASE + j as u64);
        sleep_q_gradient_into(p, q, &mut r, 1.0, &mut g)?;
    }
    Ok(g)
}

fn groups(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(REDUCE_GROUP))
        .map(|c| c * REDUCE_GROUP..((c + 1) * REDUCE_GROUP).min(n))
        .collect()
}

/// One optimizer step on a minibatch. Consumes exactly one `child_key` draw
/// from `rng`; every random choice in the step derives from that key.
pub fn train_step(
    p: &mut GenerativeModel,
    q: &mut InferenceModel,
    xs: &[&[u8]],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    lr: f64,
    rng: &mut RngStream,
) -> Result<StepMetrics> {
    if xs.is_empty() {
        return Err(RwsError::EmptyDataset);
    }
    q.check_pair(p)?;
    let key = rng.child_key();
    let b = xs.len();

    let (pp, qq) = (&*p, &*q);
    let parts: Vec<Partial> = groups(b)
        .into_par_iter()
        .map(|r| wake_group(pp, qq, xs, r, key, cfg))
        .collect::<Result<_>>()?;

    let mut gp = p.zero_grad();
    let mut gq_wake = q.zero_grad();
    let mut metrics = StepMetrics {
        datapoints: b,
        ..Default::default()
    };
    for part in &parts {
        gp.add_scaled(1.0, &part.gp);
        gq_wake.add_scaled(1.0, &part.gq);
        metrics.ll_sum += part.ll;
        metrics.ess_sum += part.ess;
    }
    drop(parts);
    gp.scale(1.0 / b as f64);

    let mut gq = q.zero_grad();
    if cfg.q_update_mode.uses_wake() {
        gq.add_scaled(1.0 / b as f64, &gq_wake);
    }
    if cfg.q_update_mode.uses_sleep() {
        let n_dream = cfg.dream_samples.unwrap_or(b);
        let sleeps: Vec<StackGradient> = groups(n_dream)
            .into_par_iter()
            .map(|r| sleep_group(pp, qq, r, key))
            .collect::<Result<_>>()?;
        let mut gs = q.zero_grad();
        for s in &sleeps {
            gs.add_scaled(1.0, s);
        }
        let weight = if cfg.q_update_mode.uses_wake() {
            cfg.sleep_weight
        } else {
            1.0
        };
        gq.add_scaled(weight / n_dream as f64, &gs);
    }

    clip(&mut gp, cfg.grad_clip);
    clip(&mut gq, cfg.grad_clip);
    sgd_momentum_step(p, &gp, &mut state.p_velocity, lr, cfg.momentum);
    sgd_momentum_step(q, &gq, &mut state.q_velocity, lr, cfg.momentum);
    Ok(metrics)
}

/// One shuffled pass over `ds` at the learning rate for `epoch`.
pub fn train_epoch(
    p: &mut GenerativeModel,
    q: &mut InferenceModel,
    ds: &BinaryDataset,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    epoch: usize,
    rng: &mut RngStream,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if ds.width() != p.visible_width() {
        return Err(RwsError::shape(
            "dataset width",
            p.visible_width(),
            ds.width(),
        ));
    }
    state.check(p, q)?;
    let lr = cfg.lr_at_epoch(epoch);
    let batches: Vec<Vec<&[u8]>> = minibatches(ds, cfg.batch_size, rng)?.collect();
    let mut total = StepMetrics::default();
    for xs in &batches {
        let m = train_step(p, q, xs, cfg, state, lr, rng)?;
        total.datapoints += m.datapoints;
        total.ll_sum += m.ll_sum;
        total.ess_sum += m.ess_sum;
    }
    let n = total.datapoints as f64;
    Ok(EpochMetrics {
        mean_ll: total.ll_sum / n,
        mean_ess: total.ess_sum / n,
        steps: batches.len(),
        lr,
    })
}

/// Per-datapoint `log p̂(x)` with `k` samples each, in dataset order.
/// Datapoint `i` draws from stream `i` under one key taken from `rng`.
pub fn dataset_log_marginals<Q: Proposal + ?Sized>(
    p: &GenerativeModel,
    q: &Q,
    ds: &BinaryDataset,
    k: usize,
    chunk: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    Ok(dataset_estimates(p, q, ds, k, chunk, rng)?
        .into_iter()
        .map(|e| e.log_marginal)
        .collect())
}

/// [`dataset_log_marginals`] with each datapoint's effective sample size.
pub fn dataset_estimates<Q: Proposal + ?Sized>(
    p: &GenerativeModel,
    q: &Q,
    ds: &BinaryDataset,
    k: usize,
    chunk: usize,
    rng: &mut RngStream,
) -> Result<Vec<StreamingEstimate>> {
    let key = rng.child_key();
    let rows: Vec<&[u8]> = ds.rows().collect();
    rows.par_iter()
        .enumerate()
        .map(|(i, x)| streaming_estimate(p, q, x, k, chunk, &mut RngStream::new(key, i as u64)))
        .collect()
}

/// Model pair, optimizer state and training stream, advanced an epoch at a
/// time and checkpointable between epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub p: GenerativeModel,
    pub q: InferenceModel,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    rng: RngStream,
    epoch: usize,
}

impl Trainer {
    pub fn new(p: GenerativeModel, q: InferenceModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        q.check_pair(&p)?;
        let optimizer = OptimizerState::zeros(&p, &q);
        let rng = RngStream::new(config.seed, TRAIN_STREAM);
        Ok(Trainer {
            p,
            q,
            config,
            optimizer,
            rng,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        ckpt.optimizer.check(&ckpt.p, &ckpt.q)?;
        let rng = RngStream::from_state(&ckpt.rng)
            .map_err(|e| RwsError::CheckpointManifest(format!("bad rng state: {e}")))?;
        Ok(Trainer {
            p: ckpt.p,
            q: ckpt.q,
            config: ckpt.config,
            optimizer: ckpt.optimizer,
            rng,
            epoch: ckpt.epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            p: self.p.clone(),
            q: self.q.clone(),
            config: self.config.clone(),
            optimizer: self.optimizer.clone(),
            rng: self.rng.state(),
            epoch: self.epoch,
        }
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn run_epoch(&mut self, ds: &BinaryDataset) -> Result<EpochMetrics> {
        let m = train_epoch(
            &mut self.p,
            &mut self.q,
            ds,
            &self.config,
            &mut self.optimizer,
            self.epoch,
            &mut self.rng,
        )?;
        self.epoch += 1;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Layer, LayerFamily};

    fn pair(seed: u64) -> (GenerativeModel, InferenceModel) {
        let mut r = RngStream::new(seed, 0);
        let p = GenerativeModel::new(vec![
            Layer::random(LayerFamily::Sbn, 0, 2, &mut r).unwrap(),
            Layer::random(LayerFamily::Sbn, 2, 3, &mut r).unwrap(),
        ])
        .unwrap();
        let q = InferenceModel::new(
            3,
            vec![Layer::random(LayerFamily::Sbn, 3, 2, &mut r).unwrap()],
        )
        .unwrap();
        (p, q)
    }

    #[test]
    fn momentum_recurrence() {
        let (mut p, _) = pair(0);
        let start = p.clone();
        let mut g = p.zero_grad();
        g.fill(0.1);
        let mut v = p.zero_grad();
        sgd_momentum_step(&mut p, &g, &mut v, 1.0, 0.95);
        sgd_momentum_step(&mut p, &g, &mut v, 1.0, 0.95);
        let moved: Vec<f64> = {
            let mut a = start.clone();
            let mut b = p.clone();
            let pa: Vec<f64> = a.params_mut().iter().flat_map(|s| s.to_vec()).collect();
            let pb: Vec<f64> = b.params_mut().iter().flat_map(|s| s.to_vec()).collect();
            pa.iter().zip(&pb).map(|(x, y)| y - x).collect()
        };
        for d in moved {
            assert!((d - 0.1 * 2.95).abs() < 1e-12);
        }
        // zero gradient: velocity decays geometrically
        let zero = p.zero_grad();
        sgd_momentum_step(&mut p, &zero, &mut v, 0.0, 0.5);
        for vi in v.iter() {
            assert!((vi - 0.5 * 0.1 * 1.95).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let (p0, q0) = pair(3);
        let rows: Vec<Vec<u8>> = (0..30).map(|i| crate::oracle::bits_of(i % 8, 3)).collect();
        let ds = BinaryDataset::from_rows("t", crate::data::Split::Train, &rows).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut t = Trainer::new(p0.clone(), q0.clone(), cfg).unwrap();
        t.run_epoch(&ds).unwrap();
        assert_eq!(t.p, p0);
        assert_eq!(t.q, q0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                k_train: 0,
                ..Default::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                lr_decay_per_epoch: 0.99,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: f64::NAN,
                ..Default::default()
            },
            TrainConfig {
                dream_samples: Some(0),
                ..Default::default()
            },
            TrainConfig {
                grad_clip: Some(0.0),
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert_eq!("Both".parse::<QUpdateMode>().unwrap(), QUpdateMode::Both);
        assert!("dream".parse::<QUpdateMode>().is_err());
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig {
            learning_rate: 1.0,
            lr_decay_per_epoch: 2.0,
            ..Default::default()
        };
        assert_eq!(c.lr_at_epoch(0), 1.0);
        assert_eq!(c.lr_at_epoch(3), 0.125);
    }
}
