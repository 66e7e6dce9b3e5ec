//! Scalar primitives shared by every other module: stable sigmoid and
//! Bernoulli log-probabilities, log-sum-exp, and reproducible random streams.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Logistic sigmoid `1 / (1 + exp(-z))`.
///
/// Evaluated on the branch that never exponentiates a positive number, so
/// `sigmoid(-z) == 1 - sigmoid(z)` holds to rounding for every finite `z`.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `log sigmoid(z) = -softplus(-z)`.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// Log-probability of bit `x` under a Bernoulli with logit `z`.
///
/// Computes `x log σ(z) + (1-x) log σ(-z)` as `-softplus(∓z)`; finite for
/// any finite logit.
#[inline]
pub fn bernoulli_log_prob_from_logit(x: u8, z: f64) -> f64 {
    if x != 0 {
        -softplus(-z)
    } else {
        -softplus(z)
    }
}

/// `log Σ exp(v_i)` with max-shift. Returns `-inf` for an empty slice or when
/// every entry is `-inf`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Running log-sum-exp over a stream of log-values.
///
/// Keeps a rescaled sum against the largest value seen so far, so memory is
/// constant no matter how many values are pushed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogSumExpAcc {
    max: f64,
    scaled_sum: f64,
    count: u64,
}

impl Default for LogSumExpAcc {
    fn default() -> Self {
        Self::new()
    }
}

impl LogSumExpAcc {
    pub fn new() -> Self {
        LogSumExpAcc {
            max: f64::NEG_INFINITY,
            scaled_sum: 0.0,
            count: 0,
        }
    }

    pub fn push(&mut self, v: f64) {
        self.count += 1;
        if v == f64::NEG_INFINITY {
            return;
        }
        if v <= self.max {
            self.scaled_sum += (v - self.max).exp();
        } else {
            self.scaled_sum = self.scaled_sum * (self.max - v).exp() + 1.0;
            self.max = v;
        }
    }

    /// Merge another accumulator into this one.
    pub fn merge(&mut self, other: &LogSumExpAcc) {
        self.count += other.count;
        if other.max == f64::NEG_INFINITY {
            return;
        }
        if other.max <= self.max {
            self.scaled_sum += other.scaled_sum * (other.max - self.max).exp();
        } else {
            self.scaled_sum = self.scaled_sum * (self.max - other.max).exp() + other.scaled_sum;
            self.max = other.max;
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled_sum.ln()
        }
    }

    /// `log (1/n Σ exp(v_i))`.
    pub fn log_mean(&self) -> f64 {
        self.value() - (self.count as f64).ln()
    }
}

/// `log(p / (1 - p))`, with `p` clamped away from 0 and 1 by `eps`.
pub fn logit(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

/// Reproducible random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8: the 64-bit seed is expanded into the 256-bit key with
/// `seed_from_u64`, and `stream_id` selects the ChaCha stream (nonce). Two
/// streams with the same pair produce bitwise-identical draws; distinct
/// stream ids give independent keystreams under the same key.
///
/// Child streams for parallel work are derived with [`RngStream::child_key`]
/// followed by [`RngStream::new(key, index)`](RngStream::new): the parent
/// advances by one `u64` draw, and each work item `index` gets its own
/// stream under that key, independent of how the items are scheduled.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

/// Serializable position of an [`RngStream`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream_id: u64,
    /// ChaCha word position, as a decimal string (it is 128-bit wide).
    pub word_pos: String,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Draw a fresh key for a family of child streams.
    pub fn child_key(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream_id: self.stream_id,
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Result<Self, std::num::ParseIntError> {
        let pos: u128 = state.word_pos.parse()?;
        let mut s = RngStream::new(state.seed, state.stream_id);
        s.rng.set_word_pos(pos);
        Ok(s)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Draw one bit with `P(1) = p`. Consumes exactly one uniform draw.
#[inline]
pub fn sample_bernoulli(p: f64, rng: &mut RngStream) -> u8 {
    (rng.uniform() < p) as u8
}

/// `(log P(x), σ(z))` for a Bernoulli with logit `z`, sharing one
/// exponential; bitwise equal to [`bernoulli_log_prob_from_logit`] and
/// [`sigmoid`].
#[inline]
pub fn log_prob_and_sigmoid(x: u8, z: f64) -> (f64, f64) {
    let e = (-z.abs()).exp();
    let l = e.ln_1p();
    if z >= 0.0 {
        (if x != 0 { -l } else { -z - l }, 1.0 / (1.0 + e))
    } else {
        (if x != 0 { z - l } else { -l }, e / (1.0 + e))
    }
}

/// Draw one bit from a Bernoulli with logit `z`, sharing one exponential
/// between the probability and the log-probability. Returns
/// `(bit, σ(z), log P(bit))`, bitwise equal to [`sigmoid`],
/// [`sample_bernoulli`] and [`bernoulli_log_prob_from_logit`] composed.
#[inline]
pub fn sample_from_logit(z: f64, rng: &mut RngStream) -> (u8, f64, f64) {
    let e = (-z.abs()).exp();
    let l = e.ln_1p();
    let (p, lp1, lp0) = if z >= 0.0 {
        (1.0 / (1.0 + e), -l, -z - l)
    } else {
        (e / (1.0 + e), z - l, -l)
    };
    let x = sample_bernoulli(p, rng);
    (x, p, if x != 0 { lp1 } else { lp0 })
}
