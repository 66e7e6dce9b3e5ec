//! Bootstrap studies of how the gradient and log-likelihood estimators
//! behave with few samples, measured against a large reference batch.
//!
//! For every datapoint a reference batch of `reference_k` proposals is drawn
//! once. Each replicate then resamples `s` of those proposals with
//! replacement per datapoint and recomputes the estimator on the resampled
//! batch; bias and spread are measured relative to the estimate that uses the
//! whole reference batch.

use rand::Rng;
use rayon::prelude::*;

use crate::data::BinaryDataset;
use crate::error::{Result, RwsError};
use crate::estimators::{draw_importance_batch, nested_log_marginals, ImportanceBatch, Proposal};
use crate::model::{GenerativeModel, StackGradient};
use crate::numerics::{log_sum_exp, RngStream};

/// Replicates per parallel work unit; fixed so results do not depend on the
/// number of threads.
const REPLICATE_GROUP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampling {
    /// `s` indices drawn uniformly with replacement.
    WithReplacement,
    /// The first `s` reference samples, every replicate. With
    /// `s = reference_k` this reproduces the reference exactly.
    Prefix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapConfig {
    pub reference_k: usize,
    pub subset_sizes: Vec<usize>,
    pub n_resamples: usize,
    pub resampling: Resampling,
}

impl BootstrapConfig {
    pub fn new(reference_k: usize, subset_sizes: Vec<usize>, n_resamples: usize) -> Self {
        BootstrapConfig {
            reference_k,
            subset_sizes,
            n_resamples,
            resampling: Resampling::WithReplacement,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.reference_k == 0 || self.n_resamples == 0 {
            return Err(RwsError::Config(
                "reference K and resample count must be positive".into(),
            ));
        }
        if self.subset_sizes.is_empty()
            || self.subset_sizes[0] == 0
            || self.subset_sizes.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(RwsError::Config(
                "subset sizes must be positive and strictly increasing".into(),
            ));
        }
        let max = *self.subset_sizes.last().unwrap();
        if max > self.reference_k {
            return Err(RwsError::Config(format!(
                "subset size {max} exceeds the reference K {}",
                self.reference_k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapReport {
    pub subset_sizes: Vec<usize>,
    /// Gradient study: L2 norm of the mean deviation from the reference.
    /// Log-likelihood study: the signed mean deviation, averaged over
    /// datapoints.
    pub bias_l2: Vec<f64>,
    /// Gradient study: L2 norm of the per-coordinate standard deviations.
    /// Log-likelihood study: per-datapoint standard deviation, averaged over
    /// datapoints.
    pub std: Vec<f64>,
    pub n_resamples: usize,
    pub reference_k: usize,
    /// The full-batch statistic the deviations are measured from (its norm,
    /// for the gradient study).
    pub reference_value: f64,
}

pub const BOOTSTRAP_CSV_HEADER: &str = "size,bias_l2,std,n_resamples";

impl BootstrapReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(BOOTSTRAP_CSV_HEADER);
        out.push('\n');
        for ((s, b), sd) in self.subset_sizes.iter().zip(&self.bias_l2).zip(&self.std) {
            out.push_str(&format!("{s},{b},{sd},{}\n", self.n_resamples));
        }
        out
    }
}

/// Running per-coordinate mean and sum of squared deviations.
#[derive(Debug, Clone)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Moments {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    fn merge(&mut self, o: &Moments) {
        if o.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = o.clone();
            return;
        }
        let n = self.n + o.n;
        for i in 0..self.mean.len() {
            let d = o.mean[i] - self.mean[i];
            self.mean[i] += d * o.n / n;
            self.m2[i] += o.m2[i] + d * d * self.n * o.n / n;
        }
        self.n = n;
    }

    /// Population variances.
    fn variances(&self) -> impl Iterator<Item = f64> + '_ {
        self.m2.iter().map(move |s| s / self.n)
    }
}

/// Per-datapoint multiplicities of reference samples for one replicate.
fn resample_counts(
    cfg: &BootstrapConfig,
    n_data: usize,
    s: usize,
    rng: &mut RngStream,
) -> Vec<Vec<u32>> {
    (0..n_data)
        .map(|_| {
            let mut c = vec![0u32; cfg.reference_k];
            match cfg.resampling {
                Resampling::WithReplacement => {
                    for _ in 0..s {
                        c[rng.gen_range(0..cfg.reference_k)] += 1;
                    }
                }
                Resampling::Prefix => c[..s].iter_mut().for_each(|v| *v = 1),
            }
            c
        })
        .collect()
}

fn reference_batches<Q: Proposal + ?Sized>(
    p: &GenerativeModel,
    q: &Q,
    data: &BinaryDataset,
    k: usize,
    key: u64,
) -> Result<Vec<ImportanceBatch>> {
    let rows: Vec<&[u8]> = data.rows().collect();
    rows.par_iter()
        .enumerate()
        .map(|(i, x)| draw_importance_batch(p, q, x, k, &mut RngStream::new(key, i as u64)))
        .collect()
}

/// Self-normalized weights of a batch where sample `k` appears `counts[k]`
/// times; zero-count samples get weight 0.
fn counted_weights(batch: &ImportanceBatch, counts: &[u32]) -> Vec<f64> {
    let lw: Vec<f64> = batch
        .log_weights
        .iter()
        .zip(counts)
        .map(|(&l, &c)| {
            if c > 0 {
                l + (c as f64).ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let lse = log_sum_exp(&lw);
    lw.iter().map(|&l| (l - lse).exp()).collect()
}

/// Minibatch-averaged wake-phase `p` gradient of the resampled batches.
fn resampled_gradient(
    p: &GenerativeModel,
    batches: &[ImportanceBatch],
    counts: &[Vec<u32>],
) -> StackGradient {
    let mut g = p.zero_grad();
    let inv_n = 1.0 / batches.len() as f64;
    for (b, c) in batches.iter().zip(counts) {
        for (s, w) in b.samples.iter().zip(counted_weights(b, c)) {
            if w > 0.0 {
                p.joint_grad_into(&b.x, &s.h, w * inv_n, &mut g)
                    .expect("reference batch was drawn for this model");
            }
        }
    }
    g
}

/// Bias and standard deviation of the minibatch wake-phase `p` gradient at
/// each subset size, over the datapoints of `data`.
pub fn bootstrap_gradient_study<Q: Proposal + ?Sized>(
    p: &GenerativeModel,
    q: &Q,
    data: &BinaryDataset,
    cfg: &BootstrapConfig,
    rng: &mut RngStream,
) -> Result<BootstrapReport> {
    cfg.validate()?;
    let ref_key = rng.child_key();
    let batches = reference_batches(p, q, data, cfg.reference_k, ref_key)?;
    let full: Vec<Vec<u32>> = vec![vec![1; cfg.reference_k]; batches.len()];
    let reference = resampled_gradient(p, &batches, &full).to_vec();

    let mut report = BootstrapReport {
        subset_sizes: cfg.subset_sizes.clone(),
        bias_l2: Vec::new(),
        std: Vec::new(),
        n_resamples: cfg.n_resamples,
        reference_k: cfg.reference_k,
        reference_value: reference.iter().map(|v| v * v).sum::<f64>().sqrt(),
    };
    for &s in &cfg.subset_sizes {
        let key = rng.child_key();
        let groups: Vec<Moments> = (0..cfg.n_resamples.div_ceil(REPLICATE_GROUP))
            .into_par_iter()
            .map(|gi| {
                let mut m = Moments::new(reference.len());
                for r in gi * REPLICATE_GROUP..((gi + 1) * REPLICATE_GROUP).min(cfg.n_resamples) {
                    let counts =
                        resample_counts(cfg, batches.len(), s, &mut RngStream::new(key, r as u64));
                    m.push(&resampled_gradient(p, &batches, &counts).to_vec());
                }
                m
            })
            .collect();
        let mut total = Moments::new(reference.len());
        for g in &groups {
            total.merge(g);
        }
        let bias = total
            .mean
            .iter()
            .zip(&reference)
            .map(|(m, r)| (m - r).powi(2))
            .sum::<f64>()
            .sqrt();
        report.bias_l2.push(bias);
        report.std.push(total.variances().sum::<f64>().sqrt());
    }
    Ok(report)
}

/// Bias and standard deviation of `log p̂(x)` at each subset size, measured
/// per datapoint against the full reference batch and averaged over `data`.
pub fn bootstrap_ll_study<Q: Proposal + ?Sized>(
    p: &GenerativeModel,
    q: &Q,
    data: &BinaryDataset,
    cfg: &BootstrapConfig,
    rng: &mut RngStream,
) -> Result<BootstrapReport> {
    cfg.validate()?;
    let ref_key = rng.child_key();
    let batches = reference_batches(p, q, data, cfg.reference_k, ref_key)?;
    let n_data = batches.len();
    let reference: Vec<f64> = batches
        .iter()
        .map(|b| log_sum_exp(&b.log_weights) - (b.k() as f64).ln())
        .collect();

    let estimate = |b: &ImportanceBatch, c: &[u32]| -> f64 {
        let lw: Vec<f64> = b
            .log_weights
            .iter()
            .zip(c)
            .map(|(&l, &n)| {
                if n > 0 {
                    l + (n as f64).ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let total: u32 = c.iter().sum();
        log_sum_exp(&lw) - (total as f64).ln()
    };

    let mut report = BootstrapReport {
        subset_sizes: cfg.subset_sizes.clone(),
        bias_l2: Vec::new(),
        std: Vec::new(),
        n_resamples: cfg.n_resamples,
        reference_k: cfg.reference_k,
        reference_value: reference.iter().sum::<f64>() / n_data as f64,
    };
    for &s in &cfg.subset_sizes {
        let key = rng.child_key();
        let groups: Vec<Moments> = (0..cfg.n_resamples.div_ceil(REPLICATE_GROUP))
            .into_par_iter()
            .map(|gi| {
                let mut m = Moments::new(n_data);
                for r in gi * REPLICATE_GROUP..((gi + 1) * REPLICATE_GROUP).min(cfg.n_resamples) {
                    let counts =
                        resample_counts(cfg, n_data, s, &mut RngStream::new(key, r as u64));
                    let est: Vec<f64> = batches
                        .iter()
                        .zip(&counts)
                        .map(|(b, c)| estimate(b, c))
                        .collect();
                    m.push(&est);
                }
                m
            })
            .collect();
        let mut total = Moments::new(n_data);
        for g in &groups {
            total.merge(g);
        }
        let bias = total
            .mean
            .iter()
            .zip(&reference)
            .map(|(m, r)| m - r)
            .sum::<f64>()
            / n_data as f64;
        let std = total.variances().map(f64::sqrt).sum::<f64>() / n_data as f64;
        report.bias_l2.push(bias);
        report.std.push(std);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LlCurvePoint {
    pub k: usize,
    /// Mean over the dataset of `log p̂(x)` with `k` samples.
    pub mean: f64,
    /// Standard error of that mean across datapoints.
    pub se: f64,
}

/// Mean `log p̂(x)` over `data` at each `K`, every smaller batch a prefix of
/// the largest one.
pub fn ll_vs_k_curve<Q: Proposal + ?Sized>(
    p: &GenerativeModel,
    q: &Q,
    data: &BinaryDataset,
    k_values: &[usize],
    rng: &mut RngStream,
) -> Result<Vec<LlCurvePoint>> {
    let key = rng.child_key();
    let rows: Vec<&[u8]> = data.rows().collect();
    let per: Vec<Vec<f64>> = rows
        .par_iter()
        .enumerate()
        .map(|(i, x)| nested_log_marginals(p, q, x, k_values, &mut RngStream::new(key, i as u64)))
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok(k_values
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let mean = per.iter().map(|v| v[j]).sum::<f64>() / n;
            let var = if per.len() > 1 {
                per.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            LlCurvePoint {
                k,
                mean,
                se: (var / n).sqrt(),
            }
        })
        .collect())
}

pub const LL_CURVE_CSV_HEADER: &str = "k,mean_ll,se";

pub fn ll_curve_csv(points: &[LlCurvePoint]) -> String {
    let mut out = String::from(LL_CURVE_CSV_HEADER);
    out.push('\n');
    for pt in points {
        out.push_str(&format!("{},{},{}\n", pt.k, pt.mean, pt.se));
    }
    out
}
