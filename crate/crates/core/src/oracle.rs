//! Brute-force reference computations for models small enough to enumerate.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Result, RwsError};
use crate::estimators::Proposal;
use crate::model::{GenerativeModel, InferenceModel, LatentConfig, StackGradient};
use crate::numerics::{log_sum_exp, RngStream};

/// Upper bounds on how many bits may be enumerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationBudget {
    pub max_total_latent_bits: usize,
    pub max_visible_bits_for_normalization: usize,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        EnumerationBudget {
            max_total_latent_bits: 16,
            max_visible_bits_for_normalization: 12,
        }
    }
}

impl EnumerationBudget {
    fn check_latent(&self, bits: usize) -> Result<()> {
        if bits > self.max_total_latent_bits {
            return Err(RwsError::BudgetExceeded {
                needed: bits,
                budget: self.max_total_latent_bits,
            });
        }
        Ok(())
    }

    fn check_visible(&self, bits: usize) -> Result<()> {
        if bits > self.max_visible_bits_for_normalization {
            return Err(RwsError::BudgetExceeded {
                needed: bits,
                budget: self.max_visible_bits_for_normalization,
            });
        }
        Ok(())
    }
}

/// The `n`-bit big-endian pattern of `code`.
pub fn bits_of(code: u64, n: usize) -> Vec<u8> {
    (0..n).map(|i| ((code >> (n - 1 - i)) & 1) as u8).collect()
}

/// Latent configuration number `code`, counting in big-endian binary over
/// the concatenation `h_1 ‖ h_2 ‖ … ‖ h_L`.
pub fn latent_from_code(code: u64, widths: &[usize]) -> LatentConfig {
    let total: usize = widths.iter().sum();
    let flat = bits_of(code, total);
    let mut h = Vec::with_capacity(widths.len());
    let mut off = 0;
    for &w in widths {
        h.push(flat[off..off + w].to_vec());
        off += w;
    }
    LatentConfig::new(h)
}

/// Every latent configuration in enumeration order.
pub fn enumerate_latents(widths: &[usize]) -> Vec<LatentConfig> {
    let total: usize = widths.iter().sum();
    (0..1u64 << total)
        .map(|c| latent_from_code(c, widths))
        .collect()
}

fn joint_table(
    p: &GenerativeModel,
    x: &[u8],
    budget: &EnumerationBudget,
) -> Result<(Vec<LatentConfig>, Vec<f64>)> {
    budget.check_latent(p.total_latent_bits())?;
    if x.len() != p.visible_width() {
        return Err(RwsError::shape(
            "visible vector",
            p.visible_width(),
            x.len(),
        ));
    }
    let configs = enumerate_latents(&p.latent_widths());
    let lj: Vec<f64> = configs
        .par_iter()
        .map(|h| p.joint_log_prob_unchecked(x, h))
        .collect();
    Ok((configs, lj))
}

/// `log p(x) = log Σ_h p(x, h)`.
pub fn exact_log_marginal(
    p: &GenerativeModel,
    x: &[u8],
    budget: &EnumerationBudget,
) -> Result<f64> {
    let (_, lj) = joint_table(p, x, budget)?;
    Ok(log_sum_exp(&lj))
}

/// `log p(x)` for every visible vector, indexed by big-endian code.
pub fn exact_visible_log_probs(
    p: &GenerativeModel,
    budget: &EnumerationBudget,
) -> Result<Vec<f64>> {
    let d = p.visible_width();
    budget.check_visible(d)?;
    budget.check_latent(p.total_latent_bits())?;
    (0..1u64 << d)
        .map(|c| exact_log_marginal(p, &bits_of(c, d), budget))
        .collect()
}

/// The true posterior `p(h | x)` as a lookup table, usable as a proposal.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    x: Vec<u8>,
    configs: Vec<LatentConfig>,
    log_probs: Vec<f64>,
    cdf: Vec<f64>,
    index: HashMap<LatentConfig, usize>,
    log_marginal: f64,
}

impl ExactPosterior {
    pub fn x(&self) -> &[u8] {
        &self.x
    }

    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    pub fn configs(&self) -> &[LatentConfig] {
        &self.configs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob(&self, h: &LatentConfig) -> Option<f64> {
        self.index.get(h).map(|&i| self.log_probs[i])
    }

    /// Categorical draw by inverse CDF.
    pub fn sample(&self, rng: &mut RngStream) -> (LatentConfig, f64) {
        let u = rng.uniform() * self.cdf.last().copied().unwrap_or(1.0);
        let mut i = self.cdf.partition_point(|&c| c <= u);
        // skip zero-probability cells that share a CDF value
        while i < self.cdf.len() - 1 && self.log_probs[i] == f64::NEG_INFINITY {
            i += 1;
        }
        let i = i.min(self.cdf.len() - 1);
        (self.configs[i].clone(), self.log_probs[i])
    }
}

pub fn exact_posterior(
    p: &GenerativeModel,
    x: &[u8],
    budget: &EnumerationBudget,
) -> Result<ExactPosterior> {
    let (configs, lj) = joint_table(p, x, budget)?;
    let log_marginal = log_sum_exp(&lj);
    let log_probs: Vec<f64> = lj.iter().map(|l| l - log_marginal).collect();
    let mut cdf = Vec::with_capacity(log_probs.len());
    let mut acc = 0.0;
    for lp in &log_probs {
        acc += lp.exp();
        cdf.push(acc);
    }
    let index = configs
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, h)| (h, i))
        .collect();
    Ok(ExactPosterior {
        x: x.to_vec(),
        configs,
        log_probs,
        cdf,
        index,
        log_marginal,
    })
}

impl Proposal for ExactPosterior {
    fn propose(&self, x: &[u8], rng: &mut RngStream) -> Result<(LatentConfig, f64)> {
        if x != self.x.as_slice() {
            return Err(RwsError::InvalidModel(
                "exact posterior proposal queried for a different datapoint".into(),
            ));
        }
        Ok(self.sample(rng))
    }
}

/// Exact posteriors for a set of datapoints, dispatching on `x`.
#[derive(Debug, Clone, Default)]
pub struct ExactPosteriorProposal {
    tables: HashMap<Vec<u8>, ExactPosterior>,
}

impl ExactPosteriorProposal {
    pub fn new<'a>(
        p: &GenerativeModel,
        data: impl IntoIterator<Item = &'a [u8]>,
        budget: &EnumerationBudget,
    ) -> Result<Self> {
        let mut tables = HashMap::new();
        for x in data {
            if !tables.contains_key(x) {
                tables.insert(x.to_vec(), exact_posterior(p, x, budget)?);
            }
        }
        Ok(ExactPosteriorProposal { tables })
    }

    pub fn get(&self, x: &[u8]) -> Option<&ExactPosterior> {
        self.tables.get(x)
    }
}

impl Proposal for ExactPosteriorProposal {
    fn propose(&self, x: &[u8], rng: &mut RngStream) -> Result<(LatentConfig, f64)> {
        let table = self.tables.get(x).ok_or_else(|| {
            RwsError::InvalidModel("no exact posterior table for this datapoint".into())
        })?;
        Ok(table.sample(rng))
    }
}

/// `∂ log p(x) / ∂θ = Σ_h p(h | x) ∂ log p(x, h) / ∂θ`.
pub fn exact_marginal_gradient(
    p: &GenerativeModel,
    x: &[u8],
    budget: &EnumerationBudget,
) -> Result<StackGradient> {
    let post = exact_posterior(p, x, budget)?;
    let mut g = p.zero_grad();
    for (h, lp) in post.configs.iter().zip(&post.log_probs) {
        let w = lp.exp();
        if w > 0.0 {
            p.joint_grad_into_unchecked(x, h, w, &mut g);
        }
    }
    Ok(g)
}

/// `Σ_h p(h | x) ∂ log q(h | x) / ∂φ`: the limit of the wake-phase q
/// gradient, and minus the gradient of `KL(p(·|x) ‖ q(·|x))`.
pub fn exact_wake_q_gradient(
    p: &GenerativeModel,
    q: &InferenceModel,
    x: &[u8],
    budget: &EnumerationBudget,
) -> Result<StackGradient> {
    q.check_pair(p)?;
    let post = exact_posterior(p, x, budget)?;
    let mut g = q.zero_grad();
    for (h, lp) in post.configs.iter().zip(&post.log_probs) {
        let w = lp.exp();
        if w > 0.0 {
            q.grad_into_unchecked(h, x, w, &mut g);
        }
    }
    Ok(g)
}

/// `E_{p(x,h)} [∂ log q(h | x) / ∂φ]`: the expected sleep-phase gradient.
pub fn exact_sleep_gradient(
    p: &GenerativeModel,
    q: &InferenceModel,
    budget: &EnumerationBudget,
) -> Result<StackGradient> {
    q.check_pair(p)?;
    let d = p.visible_width();
    budget.check_visible(d)?;
    budget.check_latent(p.total_latent_bits())?;
    let configs = enumerate_latents(&p.latent_widths());
    let mut g = q.zero_grad();
    for c in 0..1u64 << d {
        let x = bits_of(c, d);
        for h in &configs {
            let w = p.joint_log_prob_unchecked(&x, h).exp();
            if w > 0.0 {
                q.grad_into_unchecked(h, &x, w, &mut g);
            }
        }
    }
    Ok(g)
}

/// Exact variational bound `Σ_h q(h|x) [log p(x,h) − log q(h|x)]`.
pub fn exact_elbo(
    p: &GenerativeModel,
    q: &InferenceModel,
    x: &[u8],
    budget: &EnumerationBudget,
) -> Result<f64> {
    q.check_pair(p)?;
    let (configs, lj) = joint_table(p, x, budget)?;
    Ok(configs
        .iter()
        .zip(&lj)
        .map(|(h, &l)| {
            let lq = q.log_prob_unchecked(h, x);
            lq.exp() * (l - lq)
        })
        .sum())
}

/// `KL(p(·|x) ‖ q(·|x))`.
pub fn exact_posterior_kl(
    p: &GenerativeModel,
    q: &InferenceModel,
    x: &[u8],
    budget: &EnumerationBudget,
) -> Result<f64> {
    q.check_pair(p)?;
    let post = exact_posterior(p, x, budget)?;
    Ok(post
        .configs
        .iter()
        .zip(&post.log_probs)
        .filter(|(_, &lp)| lp > f64::NEG_INFINITY)
        .map(|(h, &lp)| lp.exp() * (lp - q.log_prob_unchecked(h, x)))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Layer, LayerFamily, SbnLayer};
    use crate::model::ModelSpec;
    use crate::numerics::sigmoid;

    fn small(seed: u64) -> (GenerativeModel, InferenceModel) {
        ModelSpec::parse("SBN/SBN 2-3", 0)
            .unwrap()
            .build(4, None, &mut RngStream::new(seed, 0))
            .unwrap()
    }

    #[test]
    fn zero_model_marginal() {
        let p = GenerativeModel::new(vec![
            Layer::zeros(LayerFamily::Sbn, 0, 3).unwrap(),
            Layer::zeros(LayerFamily::Sbn, 3, 5).unwrap(),
        ])
        .unwrap();
        let lp = exact_log_marginal(&p, &[1, 0, 1, 1, 0], &EnumerationBudget::default()).unwrap();
        assert!((lp - 5.0 * 0.5f64.ln()).abs() < 1e-12);
        let post = exact_posterior(&p, &[1, 0, 1, 1, 0], &EnumerationBudget::default()).unwrap();
        assert!(post.probs().iter().all(|&v| (v - 0.125).abs() < 1e-12));
    }

    #[test]
    fn one_latent_bit_two_term_mixture() {
        // h ~ Bern(σ(c)); x_i | h ~ Bern(σ(w_i h + b_i))
        let c = 0.4;
        let w = [1.5, -0.7];
        let b = [-0.2, 0.9];
        let p = GenerativeModel::new(vec![
            Layer::Sbn(SbnLayer::from_params(0, 1, vec![], vec![c]).unwrap()),
            Layer::Sbn(SbnLayer::from_params(1, 2, w.to_vec(), b.to_vec()).unwrap()),
        ])
        .unwrap();
        let x = [1u8, 0];
        let lik = |h: f64| {
            let p0 = sigmoid(w[0] * h + b[0]);
            let p1 = sigmoid(w[1] * h + b[1]);
            p0 * (1.0 - p1)
        };
        let expected = (sigmoid(c) * lik(1.0) + (1.0 - sigmoid(c)) * lik(0.0)).ln();
        let got = exact_log_marginal(&p, &x, &EnumerationBudget::default()).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn visible_distribution_normalizes() {
        let (p, _) = small(1);
        let lps = exact_visible_log_probs(&p, &EnumerationBudget::default()).unwrap();
        let total: f64 = lps.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn posterior_normalizes_and_reproduces_marginal() {
        let (p, _) = small(2);
        let x = [0, 1, 1, 0];
        let post = exact_posterior(&p, &x, &EnumerationBudget::default()).unwrap();
        assert!((post.probs().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        // Σ_h post(h) · p(x,h)/post(h) = p(x)
        let est: f64 = post
            .configs()
            .iter()
            .zip(post.log_probs())
            .map(|(h, lp)| lp.exp() * (p.joint_log_prob(&x, h).unwrap() - lp).exp())
            .sum();
        assert!((est.ln() - post.log_marginal()).abs() < 1e-10);
    }

    #[test]
    fn saturated_posterior_is_one_hot() {
        let p = GenerativeModel::new(vec![
            Layer::Sbn(SbnLayer::from_params(0, 2, vec![], vec![40.0, -40.0]).unwrap()),
            Layer::Sbn(SbnLayer::from_params(2, 2, vec![0.0; 4], vec![0.0; 2]).unwrap()),
        ])
        .unwrap();
        let post = exact_posterior(&p, &[0, 1], &EnumerationBudget::default()).unwrap();
        let probs = post.probs();
        let hot = probs.iter().position(|&v| v > 0.999_999).unwrap();
        assert_eq!(post.configs()[hot].h, vec![vec![1, 0]]);
    }

    #[test]
    fn budget_is_enforced() {
        let (p, _) = ModelSpec::parse("SBN/SBN 10-10", 0)
            .unwrap()
            .build(3, None, &mut RngStream::new(0, 0))
            .unwrap();
        let err = exact_log_marginal(&p, &[0, 0, 0], &EnumerationBudget::default()).unwrap_err();
        assert!(matches!(
            err,
            RwsError::BudgetExceeded {
                needed: 20,
                budget: 16
            }
        ));
    }

    #[test]
    fn marginal_gradient_matches_finite_difference() {
        let (p, _) = small(3);
        let x = [1, 1, 0, 1];
        let budget = EnumerationBudget::default();
        let g = exact_marginal_gradient(&p, &x, &budget).unwrap();
        let flat = g.to_vec();
        let step = 1e-5;
        let n = p.num_params();
        for idx in 0..n {
            let perturbed = |delta: f64| {
                let mut m = p.clone();
                let mut i = idx;
                for blk in m.params_mut() {
                    if i < blk.len() {
                        blk[i] += delta;
                        break;
                    }
                    i -= blk.len();
                }
                exact_log_marginal(&m, &x, &budget).unwrap()
            };
            let fd = (perturbed(step) - perturbed(-step)) / (2.0 * step);
            assert!(
                (fd - flat[idx]).abs() < 1e-6,
                "param {idx}: {} vs {fd}",
                flat[idx]
            );
        }
    }

    #[test]
    fn zero_model_visible_bias_gradient() {
        let p = GenerativeModel::new(vec![
            Layer::zeros(LayerFamily::Sbn, 0, 2).unwrap(),
            Layer::zeros(LayerFamily::Sbn, 2, 3).unwrap(),
        ])
        .unwrap();
        let x = [1, 0, 1];
        let g = exact_marginal_gradient(&p, &x, &EnumerationBudget::default()).unwrap();
        for (gi, want) in g.layers[1].blocks()[1].iter().zip([0.5, -0.5, 0.5]) {
            assert!((gi - want).abs() < 1e-15, "{gi} vs {want}");
        }
    }

    #[test]
    fn saturated_consistent_model_has_zero_gradient() {
        let sat = |d_in: usize, d_out: usize| {
            Layer::Sbn(
                SbnLayer::from_params(d_in, d_out, vec![0.0; d_in * d_out], vec![40.0; d_out])
                    .unwrap(),
            )
        };
        let p = GenerativeModel::new(vec![sat(0, 2), sat(2, 3)]).unwrap();
        let g = exact_marginal_gradient(&p, &[1, 1, 1], &EnumerationBudget::default()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn elbo_bounded_by_marginal_and_tight_at_posterior() {
        let budget = EnumerationBudget::default();
        for seed in 0..10 {
            let (p, q) = small(100 + seed);
            let x = [seed as u8 & 1, 1, 0, (seed as u8 >> 1) & 1];
            let lp = exact_log_marginal(&p, &x, &budget).unwrap();
            let elbo = exact_elbo(&p, &q, &x, &budget).unwrap();
            let kl = exact_posterior_kl(&p, &q, &x, &budget).unwrap();
            assert!(elbo <= lp + 1e-12);
            assert!(kl >= -1e-12);
        }
    }

    #[test]
    fn exact_posterior_proposal_samples_follow_table() {
        let (p, _) = small(7);
        let x = [1, 0, 0, 1];
        let post = exact_posterior(&p, &x, &EnumerationBudget::default()).unwrap();
        let mut rng = RngStream::new(3, 0);
        let n = 200_000;
        let mut counts: HashMap<LatentConfig, usize> = HashMap::new();
        for _ in 0..n {
            let (h, lq) = post.propose(&x, &mut rng).unwrap();
            assert_eq!(Some(lq), post.log_prob(&h));
            *counts.entry(h).or_default() += 1;
        }
        for (h, lp) in post.configs().iter().zip(post.log_probs()) {
            let pr = lp.exp();
            let c = *counts.get(h).unwrap_or(&0) as f64;
            let sd = (n as f64 * pr * (1.0 - pr)).sqrt();
            assert!((c - n as f64 * pr).abs() <= 4.0 * sd + 1.0);
        }
        assert!(post.propose(&[0, 0, 0, 0], &mut rng).is_err());
    }
}
