//! Importance sampling with the inference model as proposal.
//!
//! For a datapoint `x` and `K` draws `h_k ~ q(· | x)`, the log-weights are
//! `log ω_k = log p(x, h_k) − log q(h_k | x)`. Their average is an unbiased
//! estimate of `p(x)`; its log underestimates `log p(x)` on average.

use rayon::prelude::*;

use crate::error::{Result, RwsError};
use crate::model::{GenerativeModel, InferenceModel, LatentConfig};
use crate::numerics::{log_sum_exp, LogSumExpAcc, RngStream};

/// Anything that can propose latent configurations for a datapoint.
pub trait Proposal: Sync {
    /// Draw `h ~ q(· | x)` and return it with `log q(h | x)`.
    fn propose(&self, x: &[u8], rng: &mut RngStream) -> Result<(LatentConfig, f64)>;

    /// Verify the proposal emits latents shaped for `p`.
    fn check_compatible(&self, _p: &GenerativeModel) -> Result<()> {
        Ok(())
    }
}

impl Proposal for InferenceModel {
    fn propose(&self, x: &[u8], rng: &mut RngStream) -> Result<(LatentConfig, f64)> {
        self.sample(x, rng)
    }

    fn check_compatible(&self, p: &GenerativeModel) -> Result<()> {
        self.check_pair(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceSample {
    pub h: LatentConfig,
    pub log_q: f64,
    pub log_joint: f64,
}

/// `K` proposal draws for one datapoint with their unnormalized log-weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceBatch {
    pub x: Vec<u8>,
    pub samples: Vec<ImportanceSample>,
    pub log_weights: Vec<f64>,
}

impl ImportanceBatch {
    /// Assemble a batch from already-evaluated samples.
    pub fn from_samples(x: Vec<u8>, samples: Vec<ImportanceSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(RwsError::Config(
                "an importance batch needs at least one sample".into(),
            ));
        }
        let log_weights = samples.iter().map(|s| s.log_joint - s.log_q).collect();
        Ok(ImportanceBatch {
            x,
            samples,
            log_weights,
        })
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }
}

/// Self-normalized importance weights `ω̃_k = ω_k / Σ ω_k'`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedWeights {
    pub tilde_omega: Vec<f64>,
}

/// Key and per-sample stream layout shared by every sampling routine here:
/// one `child_key` draw from the caller's stream, then sample `k` uses
/// stream `k` under that key.
fn sample_streams(rng: &mut RngStream) -> u64 {
    rng.child_key()
}

/// Draw `k` i.i.d. latent samples from `q` for `x` and evaluate both models.
pub fn draw_importance_batch<Q: Proposal + ?Sized>(
    p: &GenerativeModel,
    q: &Q,
    x: &[u8],
    k: usize,
    rng: &mut RngStream,
) -> Result<ImportanceBatch> {
    if k == 0 {
        return Err(RwsError::Config("K must be at least 1".into()));
    }
    if x.len() != p.visible_width() {
        return Err(RwsError::shape(
            "visible vector",
            p.visible_width(),
            x.len(),
        ));
    }
    q.check_compatible(p)?;
    let key = sample_streams(rng);
    let draw = |i: usize| -> Result<ImportanceSample> {
        let mut r = RngStream::new(key, i as u64);
        let (h, log_q) = q.propose(x, &mut r)?;
        let log_joint = p.joint_log_prob(x, &h)?;
        Ok(ImportanceSample {
            h,
            log_q,
            log_joint,
        })
    };
    let samples: Vec<ImportanceSample> = if k >= 64 {
        (0..k).into_par_iter().map(draw).collect::<Result<_>>()?
    } else {
        (0..k).map(draw).collect::<Result<_>>()?
    };
    ImportanceBatch::from_samples(x.to_vec(), samples)
}

/// Residual caches of one importance sample, for the generative and the
/// inference model.
pub(crate) struct SampleCache {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// [`draw_importance_batch`] for an [`InferenceModel`] proposal, also
/// keeping each sample's residual caches so gradients skip the forward pass.
/// Same draws, same batch.
pub(crate) fn draw_cached_batch(
    p: &GenerativeModel,
    q: &InferenceModel,
    x: &[u8],
    k: usize,
    rng: &mut RngStream,
) -> Result<(ImportanceBatch, Vec<SampleCache>)> {
    if k == 0 {
        return Err(RwsError::Config("K must be at least 1".into()));
    }
    if x.len() != p.visible_width() {
        return Err(RwsError::shape(
            "visible vector",
            p.visible_width(),
            x.len(),
        ));
    }
    q.check_pair(p)?;
    let key = sample_streams(rng);
    let mut samples = Vec::with_capacity(k);
    let mut caches = Vec::with_capacity(k);
    for i in 0..k {
        let mut r = RngStream::new(key, i as u64);
        let mut cq = Vec::new();
        let (h, log_q) = q.sample_resid(x, &mut r, &mut cq);
        let mut cp = Vec::new();
        let log_joint = p.joint_log_prob_resid(x, &h, &mut cp);
        samples.push(ImportanceSample {
            h,
            log_q,
            log_joint,
        });
        caches.push(SampleCache { p: cp, q: cq });
    }
    Ok((ImportanceBatch::from_samples(x.to_vec(), samples)?, caches))
}

/// Softmax of log-weights via max-shift.
pub fn normalize_log_weights(log_weights: &[f64]) -> NormalizedWeights {
    let lse = log_sum_exp(log_weights);
    assert!(
        lse.is_finite(),
        "importance weights are all zero or non-finite; sigmoid layers cannot produce this"
    );
    NormalizedWeights {
        tilde_omega: log_weights.iter().map(|&lw| (lw - lse).exp()).collect(),
    }
}

pub fn normalize_weights(batch: &ImportanceBatch) -> NormalizedWeights {
    normalize_log_weights(&batch.log_weights)
}

/// `log (1/K Σ ω_k)`.
pub fn log_marginal_estimate(batch: &ImportanceBatch) -> f64 {
    log_sum_exp(&batch.log_weights) - (batch.k() as f64).ln()
}

/// `1/K Σ log ω_k`, a single-batch estimate of the variational bound.
pub fn elbo_estimate(batch: &ImportanceBatch) -> f64 {
    batch.log_weights.iter().sum::<f64>() / batch.k() as f64
}

/// `1 / Σ ω̃_k²`, in `[1, K]`.
pub fn effective_sample_size(w: &NormalizedWeights) -> f64 {
    1.0 / w.tilde_omega.iter().map(|v| v * v).sum::<f64>()
}

/// `log p̂(x)` from `k` samples in chunks of `chunk`, merging running
/// log-sum-exps in chunk order. Memory is `O(chunk)`; the draws are the
/// same ones [`draw_importance_batch`] would make from the same stream.
pub fn streaming_log_marginal<Q: Proposal + ?Sized>(
    p: &GenerativeModel,
    q: &Q,
    x: &[u8],
    k: usize,
    chunk: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    Ok(streaming_estimate(p, q, x, k, chunk, rng)?.log_marginal)
}

/// Log-marginal estimate and effective sample size of one datapoint's batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamingEstimate {
    pub log_marginal: f64,
    /// `(Σ ω)² / Σ ω²`, the same quantity as [`effective_sample_size`].
    pub ess: f64,
}

/// [`streaming_log_marginal`] that also tracks `Σ ω²` for the effective
/// sample size.
pub fn streaming_estimate<Q: Proposal + ?Sized>(
    p: &GenerativeModel,
    q: &Q,
    x: &[u8],
    k: usize,
    chunk: usize,
    rng: &mut RngStream,
) -> Result<StreamingEstimate> {
    if k == 0 || chunk == 0 {
        return Err(RwsError::Config("K and chunk size must be positive".into()));
    }
    if x.len() != p.visible_width() {
        return Err(RwsError::shape(
            "visible vector",
            p.visible_width(),
            x.len(),
        ));
    }
    q.check_compatible(p)?;
    let key = sample_streams(rng);
    let n_chunks = k.div_ceil(chunk);
    let accs: Vec<(LogSumExpAcc, LogSumExpAcc)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| -> Result<(LogSumExpAcc, LogSumExpAcc)> {
            let mut acc = LogSumExpAcc::new();
            let mut acc2 = LogSumExpAcc::new();
            for i in c * chunk..((c + 1) * chunk).min(k) {
                let mut r = RngStream::new(key, i as u64);
                let (h, log_q) = q.propose(x, &mut r)?;
                let lw = p.joint_log_prob(x, &h)? - log_q;
                acc.push(lw);
                acc2.push(2.0 * lw);
            }
            Ok((acc, acc2))
        })
        .collect::<Result<_>>()?;
    let mut total = LogSumExpAcc::new();
    let mut total2 = LogSumExpAcc::new();
    for (a, a2) in &accs {
        total.merge(a);
        total2.merge(a2);
    }
    Ok(StreamingEstimate {
        log_marginal: total.log_mean(),
        ess: (2.0 * total.value() - total2.value()).exp(),
    })
}

/// `log p̂(x)` at every `K` in `k_values` (increasing), reusing one sample
/// sequence so each estimate uses a prefix of the largest batch.
pub fn nested_log_marginals<Q: Proposal + ?Sized>(
    p: &GenerativeModel,
    q: &Q,
    x: &[u8],
    k_values: &[usize],
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if k_values.is_empty() || k_values[0] == 0 || k_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(RwsError::Config(
            "K values must be positive and strictly increasing".into(),
        ));
    }
    if x.len() != p.visible_width() {
        return Err(RwsError::shape(
            "visible vector",
            p.visible_width(),
            x.len(),
        ));
    }
    q.check_compatible(p)?;
    let key = sample_streams(rng);
    let mut acc = LogSumExpAcc::new();
    let mut out = Vec::with_capacity(k_values.len());
    let mut next = 0;
    for i in 0..*k_values.last().unwrap() {
        let mut r = RngStream::new(key, i as u64);
        let (h, log_q) = q.propose(x, &mut r)?;
        acc.push(p.joint_log_prob(x, &h)? - log_q);
        if i + 1 == k_values[next] {
            out.push(acc.log_mean());
            next += 1;
        }
    }
    Ok(out)
}
