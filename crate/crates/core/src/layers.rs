//! Conditional layer families over binary vectors.
//!
//! Every layer models `P(x | y)` for an output bit-vector `x` of width
//! `d_out` given a parent bit-vector `y` of width `d_in`. A layer with
//! `d_in == 0` is an unconditioned prior over `x`.
//!
//! Three families are provided:
//!
//! * [`SbnLayer`]: `P(x_i = 1 | y) = σ(W_i·y + b_i)`, units independent given `y`.
//! * [`ArSbnLayer`]: adds strictly-lower-triangular links `S_i,<i · x_<i`.
//! * [`CnadeLayer`]: a conditional NADE with an accumulating sigmoid hidden
//!   layer, `P(x_i = 1 | x_<i, y) = σ(V_i·σ(W_:,<i x_<i + U_a y + a) + U_b,i·y + b_i)`.
//!
//! Autoregressive layers factorize in natural index order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RwsError};
use crate::numerics::{
    bernoulli_log_prob_from_logit, log_prob_and_sigmoid, logit, sample_from_logit, sigmoid,
    RngStream,
};

/// Layer family tag, as stored in model specs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LayerFamily {
    Sbn,
    ArSbn,
    Nade { hidden: usize },
}

impl LayerFamily {
    pub fn name(&self) -> &'static str {
        match self {
            LayerFamily::Sbn => "sbn",
            LayerFamily::ArSbn => "ar_sbn",
            LayerFamily::Nade { .. } => "nade",
        }
    }
}

/// Read-only view of one named parameter block.
#[derive(Debug, Clone, Copy)]
pub struct BlockRef<'a> {
    pub name: &'static str,
    /// `[rows, cols]`, row-major; vectors are `[n, 1]`.
    pub shape: [usize; 2],
    pub data: &'a [f64],
}

#[inline]
fn dot_bits(row: &[f64], bits: &[u8]) -> f64 {
    // branch-free: the bits are random, so a branch would mispredict half the time
    let mut acc = 0.0;
    for (w, &b) in row.iter().zip(bits) {
        acc += w * b as f64;
    }
    acc
}

/// Positions of the set bits. Conditioning vectors are scanned once per
/// layer call instead of once per output unit.
#[inline]
fn ones(bits: &[u8]) -> Vec<usize> {
    let mut on = Vec::with_capacity(bits.len());
    for (j, &b) in bits.iter().enumerate() {
        if b != 0 {
            on.push(j);
        }
    }
    on
}

/// `Σ_{j ∈ on} row[j]`, equal to [`dot_bits`] against the bits `on` came from.
#[inline]
fn sum_at(row: &[f64], on: &[usize]) -> f64 {
    let mut acc = 0.0;
    for &j in on {
        acc += row[j];
    }
    acc
}

#[inline]
fn add_at(row: &mut [f64], on: &[usize], e: f64) {
    for &j in on {
        row[j] += e;
    }
}

/// `row[j] += e` wherever `bits[j] == 1`.
#[inline]
fn add_where_set(row: &mut [f64], bits: &[u8], e: f64) {
    for (g, &b) in row.iter_mut().zip(bits) {
        *g += e * b as f64;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn uniform_init(n: usize, fan_in: usize, rng: &mut RngStream) -> Vec<f64> {
    if fan_in == 0 {
        return vec![0.0; n];
    }
    let s = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-s..s)).collect()
}

fn check_len(context: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(RwsError::shape(context, expected, got));
    }
    Ok(())
}

/// Factorized sigmoid belief layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SbnLayer {
    d_in: usize,
    d_out: usize,
    /// `[d_out × d_in]`
    w: Vec<f64>,
    b: Vec<f64>,
}

impl SbnLayer {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        SbnLayer {
            d_in,
            d_out,
            w: vec![0.0; d_out * d_in],
            b: vec![0.0; d_out],
        }
    }

    pub fn from_params(d_in: usize, d_out: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        check_len("SBN W", d_out * d_in, w.len())?;
        check_len("SBN b", d_out, b.len())?;
        Ok(SbnLayer { d_in, d_out, w, b })
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    #[inline]
    fn logit(&self, i: usize, on: &[usize]) -> f64 {
        sum_at(&self.w[i * self.d_in..(i + 1) * self.d_in], on) + self.b[i]
    }

    fn log_prob(&self, x: &[u8], y: &[u8]) -> f64 {
        let on = ones(y);
        (0..self.d_out)
            .map(|i| bernoulli_log_prob_from_logit(x[i], self.logit(i, &on)))
            .sum()
    }

    fn sample(
        &self,
        y: &[u8],
        rng: &mut RngStream,
        mut probs: Option<&mut Vec<f64>>,
    ) -> (Vec<u8>, f64) {
        let on = ones(y);
        let mut x = vec![0u8; self.d_out];
        let mut lp = 0.0;
        for i in 0..self.d_out {
            let z = self.logit(i, &on);
            let (xi, p, lpi) = sample_from_logit(z, rng);
            if let Some(pr) = probs.as_deref_mut() {
                pr.push(p);
            }
            x[i] = xi;
            lp += lpi;
        }
        (x, lp)
    }

    /// `log P(x | y)`, pushing the residuals `x_i − σ(z_i)` onto `resid`.
    fn log_prob_resid(&self, x: &[u8], y: &[u8], resid: &mut Vec<f64>) -> f64 {
        let on = ones(y);
        (0..self.d_out)
            .map(|i| {
                let (lp, p) = log_prob_and_sigmoid(x[i], self.logit(i, &on));
                resid.push(x[i] as f64 - p);
                lp
            })
            .sum()
    }

    fn grad_from_resid(&self, y: &[u8], resid: &[f64], scale: f64, g: &mut ParamGradient) {
        let on = ones(y);
        let (gw, rest) = g.blocks.split_at_mut(1);
        let gw = &mut gw[0];
        let gb = &mut rest[0];
        for i in 0..self.d_out {
            let e = scale * resid[i];
            gb[i] += e;
            add_at(&mut gw[i * self.d_in..(i + 1) * self.d_in], &on, e);
        }
    }

    fn grad_into(&self, x: &[u8], y: &[u8], scale: f64, g: &mut ParamGradient) {
        let on = ones(y);
        let (gw, rest) = g.blocks.split_at_mut(1);
        let gw = &mut gw[0];
        let gb = &mut rest[0];
        for i in 0..self.d_out {
            let e = scale * (x[i] as f64 - sigmoid(self.logit(i, &on)));
            gb[i] += e;
            add_at(&mut gw[i * self.d_in..(i + 1) * self.d_in], &on, e);
        }
    }
}

/// Sigmoid belief layer with autoregressive links among its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ArSbnLayer {
    d_in: usize,
    d_out: usize,
    /// `[d_out × d_in]`
    w: Vec<f64>,
    /// `[d_out × d_out]`, strictly lower triangular.
    s: Vec<f64>,
    b: Vec<f64>,
}

impl ArSbnLayer {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        ArSbnLayer {
            d_in,
            d_out,
            w: vec![0.0; d_out * d_in],
            s: vec![0.0; d_out * d_out],
            b: vec![0.0; d_out],
        }
    }

    pub fn from_params(
        d_in: usize,
        d_out: usize,
        w: Vec<f64>,
        s: Vec<f64>,
        b: Vec<f64>,
    ) -> Result<Self> {
        check_len("AR-SBN W", d_out * d_in, w.len())?;
        check_len("AR-SBN S", d_out * d_out, s.len())?;
        check_len("AR-SBN b", d_out, b.len())?;
        for i in 0..d_out {
            for j in i..d_out {
                if s[i * d_out + j] != 0.0 {
                    return Err(RwsError::InvalidLayer(format!(
                        "AR-SBN S[{i},{j}] is nonzero; S must be strictly lower triangular"
                    )));
                }
            }
        }
        Ok(ArSbnLayer {
            d_in,
            d_out,
            w,
            s,
            b,
        })
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    #[inline]
    fn logit(&self, i: usize, x: &[u8], on: &[usize]) -> f64 {
        let srow = &self.s[i * self.d_out..i * self.d_out + i];
        sum_at(&self.w[i * self.d_in..(i + 1) * self.d_in], on)
            + dot_bits(srow, &x[..i])
            + self.b[i]
    }

    fn log_prob(&self, x: &[u8], y: &[u8]) -> f64 {
        let on = ones(y);
        (0..self.d_out)
            .map(|i| bernoulli_log_prob_from_logit(x[i], self.logit(i, x, &on)))
            .sum()
    }

    fn sample(
        &self,
        y: &[u8],
        rng: &mut RngStream,
        mut probs: Option<&mut Vec<f64>>,
    ) -> (Vec<u8>, f64) {
        let on = ones(y);
        let mut x = vec![0u8; self.d_out];
        let mut lp = 0.0;
        for i in 0..self.d_out {
            let z = self.logit(i, &x, &on);
            let (xi, p, lpi) = sample_from_logit(z, rng);
            if let Some(pr) = probs.as_deref_mut() {
                pr.push(p);
            }
            x[i] = xi;
            lp += lpi;
        }
        (x, lp)
    }

    fn log_prob_resid(&self, x: &[u8], y: &[u8], resid: &mut Vec<f64>) -> f64 {
        let on = ones(y);
        (0..self.d_out)
            .map(|i| {
                let (lp, p) = log_prob_and_sigmoid(x[i], self.logit(i, x, &on));
                resid.push(x[i] as f64 - p);
                lp
            })
            .sum()
    }

    fn grad_from_resid(
        &self,
        x: &[u8],
        y: &[u8],
        resid: &[f64],
        scale: f64,
        g: &mut ParamGradient,
    ) {
        let on = ones(y);
        let [gw, gs, gb] = &mut g.blocks[..] else {
            unreachable!("AR-SBN gradient has three blocks")
        };
        for i in 0..self.d_out {
            let e = scale * resid[i];
            gb[i] += e;
            add_at(&mut gw[i * self.d_in..(i + 1) * self.d_in], &on, e);
            add_where_set(&mut gs[i * self.d_out..i * self.d_out + i], &x[..i], e);
        }
    }

    fn grad_into(&self, x: &[u8], y: &[u8], scale: f64, g: &mut ParamGradient) {
        let on = ones(y);
        let [gw, gs, gb] = &mut g.blocks[..] else {
            unreachable!("AR-SBN gradient has three blocks")
        };
        for i in 0..self.d_out {
            let e = scale * (x[i] as f64 - sigmoid(self.logit(i, x, &on)));
            gb[i] += e;
            add_at(&mut gw[i * self.d_in..(i + 1) * self.d_in], &on, e);
            let srow = &mut gs[i * self.d_out..i * self.d_out + i];
            add_where_set(srow, &x[..i], e);
        }
    }
}

/// Conditional NADE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CnadeLayer {
    d_in: usize,
    d_out: usize,
    hidden: usize,
    /// Encoder, `[hidden × d_out]`: column `i` is added once `x_i` is known.
    w: Vec<f64>,
    /// Decoder, `[d_out × hidden]`.
    v: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    /// `[hidden × d_in]`
    ua: Vec<f64>,
    /// `[d_out × d_in]`
    ub: Vec<f64>,
}

impl CnadeLayer {
    pub fn zeros(d_in: usize, d_out: usize, hidden: usize) -> Self {
        CnadeLayer {
            d_in,
            d_out,
            hidden,
            w: vec![0.0; hidden * d_out],
            v: vec![0.0; d_out * hidden],
            a: vec![0.0; hidden],
            b: vec![0.0; d_out],
            ua: vec![0.0; hidden * d_in],
            ub: vec![0.0; d_out * d_in],
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Hidden pre-activation before any output unit is seen: `U_a y + a`.
    fn base_activation(&self, y: &[u8]) -> Vec<f64> {
        (0..self.hidden)
            .map(|k| dot_bits(&self.ua[k * self.d_in..(k + 1) * self.d_in], y) + self.a[k])
            .collect()
    }

    #[inline]
    fn add_column(&self, act: &mut [f64], i: usize) {
        for (k, a) in act.iter_mut().enumerate() {
            *a += self.w[k * self.d_out + i];
        }
    }

    /// Logit of unit `i` given the current hidden pre-activation. Writes the
    /// hidden activation into `h`.
    #[inline]
    fn logit(&self, i: usize, act: &[f64], h: &mut [f64], y: &[u8]) -> f64 {
        for (hk, &ak) in h.iter_mut().zip(act) {
            *hk = sigmoid(ak);
        }
        dot(&self.v[i * self.hidden..(i + 1) * self.hidden], h)
            + dot_bits(&self.ub[i * self.d_in..(i + 1) * self.d_in], y)
            + self.b[i]
    }

    fn log_prob(&self, x: &[u8], y: &[u8]) -> f64 {
        let mut act = self.base_activation(y);
        let mut h = vec![0.0; self.hidden];
        let mut lp = 0.0;
        for i in 0..self.d_out {
            let z = self.logit(i, &act, &mut h, y);
            lp += bernoulli_log_prob_from_logit(x[i], z);
            if x[i] != 0 {
                self.add_column(&mut act, i);
            }
        }
        lp
    }

    fn sample(
        &self,
        y: &[u8],
        rng: &mut RngStream,
        mut probs: Option<&mut Vec<f64>>,
    ) -> (Vec<u8>, f64) {
        let mut act = self.base_activation(y);
        let mut h = vec![0.0; self.hidden];
        let mut x = vec![0u8; self.d_out];
        let mut lp = 0.0;
        for i in 0..self.d_out {
            let z = self.logit(i, &act, &mut h, y);
            let (xi, p, lpi) = sample_from_logit(z, rng);
            if let Some(pr) = probs.as_deref_mut() {
                pr.push(p);
            }
            x[i] = xi;
            lp += lpi;
            if x[i] != 0 {
                self.add_column(&mut act, i);
            }
        }
        (x, lp)
    }

    fn grad_into(&self, x: &[u8], y: &[u8], scale: f64, g: &mut ParamGradient) {
        let [gw, gv, ga, gb, gua, gub] = &mut g.blocks[..] else {
            unreachable!("CNADE gradient has six blocks")
        };
        let nh = self.hidden;
        // Forward: keep every hidden activation for the backward sweep.
        let mut act = self.base_activation(y);
        let mut hs = vec![0.0; self.d_out * nh];
        let mut errs = vec![0.0; self.d_out];
        for i in 0..self.d_out {
            let h = &mut hs[i * nh..(i + 1) * nh];
            let z = self.logit(i, &act, h, y);
            errs[i] = scale * (x[i] as f64 - sigmoid(z));
            if x[i] != 0 {
                self.add_column(&mut act, i);
            }
        }
        // Backward: `later` holds the summed hidden error of units after i,
        // which is exactly what column i of W feeds into.
        let mut later = vec![0.0; nh];
        for i in (0..self.d_out).rev() {
            let e = errs[i];
            let h = &hs[i * nh..(i + 1) * nh];
            if x[i] != 0 {
                for k in 0..nh {
                    gw[k * self.d_out + i] += later[k];
                }
            }
            gb[i] += e;
            let ubrow = &mut gub[i * self.d_in..(i + 1) * self.d_in];
            add_where_set(ubrow, y, e);
            let vrow = &self.v[i * nh..(i + 1) * nh];
            let gvrow = &mut gv[i * nh..(i + 1) * nh];
            for k in 0..nh {
                gvrow[k] += e * h[k];
                later[k] += e * vrow[k] * h[k] * (1.0 - h[k]);
            }
        }
        for k in 0..nh {
            ga[k] += later[k];
            let row = &mut gua[k * self.d_in..(k + 1) * self.d_in];
            add_where_set(row, y, later[k]);
        }
    }
}

/// A conditional (or, with `d_in == 0`, unconditioned) layer of any family.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Sbn(SbnLayer),
    ArSbn(ArSbnLayer),
    Cnade(CnadeLayer),
}

impl Layer {
    /// All-zero parameters: every conditional is a fair coin.
    pub fn zeros(family: LayerFamily, d_in: usize, d_out: usize) -> Result<Self> {
        if d_out == 0 {
            return Err(RwsError::InvalidLayer(
                "layer output width must be positive".into(),
            ));
        }
        Ok(match family {
            LayerFamily::Sbn => Layer::Sbn(SbnLayer::zeros(d_in, d_out)),
            LayerFamily::ArSbn => Layer::ArSbn(ArSbnLayer::zeros(d_in, d_out)),
            LayerFamily::Nade { hidden } => {
                if hidden == 0 {
                    return Err(RwsError::InvalidLayer(
                        "NADE hidden width must be positive".into(),
                    ));
                }
                Layer::Cnade(CnadeLayer::zeros(d_in, d_out, hidden))
            }
        })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn random(
        family: LayerFamily,
        d_in: usize,
        d_out: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut layer = Layer::zeros(family, d_in, d_out)?;
        match &mut layer {
            Layer::Sbn(l) => {
                l.w = uniform_init(d_out * d_in, d_in, rng);
            }
            Layer::ArSbn(l) => {
                l.w = uniform_init(d_out * d_in, d_in, rng);
                let s = uniform_init(d_out * d_out, d_out, rng);
                for i in 0..d_out {
                    for j in 0..i {
                        l.s[i * d_out + j] = s[i * d_out + j];
                    }
                }
            }
            Layer::Cnade(l) => {
                l.w = uniform_init(l.hidden * d_out, d_out, rng);
                l.v = uniform_init(d_out * l.hidden, l.hidden, rng);
                l.ua = uniform_init(l.hidden * d_in, d_in, rng);
                l.ub = uniform_init(d_out * d_in, d_in, rng);
            }
        }
        Ok(layer)
    }

    /// Rebuild a layer from blocks in [`Layer::blocks`] order.
    pub fn from_blocks(
        family: LayerFamily,
        d_in: usize,
        d_out: usize,
        blocks: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let template = Layer::zeros(family, d_in, d_out)?;
        let expected: Vec<(&'static str, usize)> = template
            .blocks()
            .iter()
            .map(|b| (b.name, b.data.len()))
            .collect();
        check_len("layer block count", expected.len(), blocks.len())?;
        for ((name, n), blk) in expected.iter().zip(&blocks) {
            check_len(&format!("{} block {name}", family.name()), *n, blk.len())?;
        }
        let mut it = blocks.into_iter();
        let mut next = || it.next().expect("block count checked above");
        Ok(match family {
            LayerFamily::Sbn => Layer::Sbn(SbnLayer::from_params(d_in, d_out, next(), next())?),
            LayerFamily::ArSbn => Layer::ArSbn(ArSbnLayer::from_params(
                d_in,
                d_out,
                next(),
                next(),
                next(),
            )?),
            LayerFamily::Nade { hidden } => Layer::Cnade(CnadeLayer {
                d_in,
                d_out,
                hidden,
                w: next(),
                v: next(),
                a: next(),
                b: next(),
                ua: next(),
                ub: next(),
            }),
        })
    }

    pub fn family(&self) -> LayerFamily {
        match self {
            Layer::Sbn(_) => LayerFamily::Sbn,
            Layer::ArSbn(_) => LayerFamily::ArSbn,
            Layer::Cnade(l) => LayerFamily::Nade { hidden: l.hidden },
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            Layer::Sbn(l) => l.d_in,
            Layer::ArSbn(l) => l.d_in,
            Layer::Cnade(l) => l.d_in,
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Layer::Sbn(l) => l.d_out,
            Layer::ArSbn(l) => l.d_out,
            Layer::Cnade(l) => l.d_out,
        }
    }

    pub fn is_prior(&self) -> bool {
        self.d_in() == 0
    }

    pub fn blocks(&self) -> Vec<BlockRef<'_>> {
        fn blk<'a>(name: &'static str, rows: usize, cols: usize, data: &'a [f64]) -> BlockRef<'a> {
            BlockRef {
                name,
                shape: [rows, cols],
                data,
            }
        }
        match self {
            Layer::Sbn(l) => vec![blk("W", l.d_out, l.d_in, &l.w), blk("b", l.d_out, 1, &l.b)],
            Layer::ArSbn(l) => vec![
                blk("W", l.d_out, l.d_in, &l.w),
                blk("S", l.d_out, l.d_out, &l.s),
                blk("b", l.d_out, 1, &l.b),
            ],
            Layer::Cnade(l) => vec![
                blk("W", l.hidden, l.d_out, &l.w),
                blk("V", l.d_out, l.hidden, &l.v),
                blk("a", l.hidden, 1, &l.a),
                blk("b", l.d_out, 1, &l.b),
                blk("U_a", l.hidden, l.d_in, &l.ua),
                blk("U_b", l.d_out, l.d_in, &l.ub),
            ],
        }
    }

    /// Mutable parameter slices in [`Layer::blocks`] order.
    ///
    /// Writing above the diagonal of an AR-SBN `S` breaks the layer's
    /// invariant; gradients there are always zero so optimizer steps keep it.
    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Sbn(l) => vec![&mut l.w, &mut l.b],
            Layer::ArSbn(l) => vec![&mut l.w, &mut l.s, &mut l.b],
            Layer::Cnade(l) => vec![&mut l.w, &mut l.v, &mut l.a, &mut l.b, &mut l.ua, &mut l.ub],
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.data.len()).sum()
    }

    /// Output bias vector `b`.
    pub fn bias_mut(&mut self) -> &mut [f64] {
        match self {
            Layer::Sbn(l) => &mut l.b,
            Layer::ArSbn(l) => &mut l.b,
            Layer::Cnade(l) => &mut l.b,
        }
    }

    /// Set the output biases to the logits of per-unit marginals.
    pub fn set_bias_from_marginals(&mut self, marginals: &[f64]) -> Result<()> {
        check_len("bias marginals", self.d_out(), marginals.len())?;
        for (b, &m) in self.bias_mut().iter_mut().zip(marginals) {
            *b = logit(m, 1e-3);
        }
        Ok(())
    }

    pub fn zero_grad(&self) -> ParamGradient {
        ParamGradient {
            blocks: self
                .blocks()
                .iter()
                .map(|b| vec![0.0; b.data.len()])
                .collect(),
        }
    }

    fn check(&self, x: Option<&[u8]>, y: &[u8]) -> Result<()> {
        if let Some(x) = x {
            check_len("layer output", self.d_out(), x.len())?;
        }
        check_len("layer input", self.d_in(), y.len())
    }

    /// `log P(x | y)`. Pass an empty `y` for priors.
    pub fn log_prob(&self, x: &[u8], y: &[u8]) -> Result<f64> {
        self.check(Some(x), y)?;
        Ok(self.log_prob_unchecked(x, y))
    }

    pub(crate) fn log_prob_unchecked(&self, x: &[u8], y: &[u8]) -> f64 {
        match self {
            Layer::Sbn(l) => l.log_prob(x, y),
            Layer::ArSbn(l) => l.log_prob(x, y),
            Layer::Cnade(l) => l.log_prob(x, y),
        }
    }

    /// Ancestral draw `x ~ P(· | y)` in index order, with its log-probability.
    pub fn sample(&self, y: &[u8], rng: &mut RngStream) -> Result<(Vec<u8>, f64)> {
        self.check(None, y)?;
        Ok(self.sample_unchecked(y, rng))
    }

    pub(crate) fn sample_unchecked(&self, y: &[u8], rng: &mut RngStream) -> (Vec<u8>, f64) {
        match self {
            Layer::Sbn(l) => l.sample(y, rng, None),
            Layer::ArSbn(l) => l.sample(y, rng, None),
            Layer::Cnade(l) => l.sample(y, rng, None),
        }
    }

    /// Like [`Layer::sample`], also returning the per-unit probability each
    /// bit was drawn from (conditioned on the earlier bits for
    /// autoregressive layers).
    pub fn sample_with_probs(
        &self,
        y: &[u8],
        rng: &mut RngStream,
    ) -> Result<(Vec<u8>, f64, Vec<f64>)> {
        self.check(None, y)?;
        let mut probs = Vec::with_capacity(self.d_out());
        let (x, lp) = match self {
            Layer::Sbn(l) => l.sample(y, rng, Some(&mut probs)),
            Layer::ArSbn(l) => l.sample(y, rng, Some(&mut probs)),
            Layer::Cnade(l) => l.sample(y, rng, Some(&mut probs)),
        };
        Ok((x, lp, probs))
    }

    /// Gradient of `log P(x | y)` with respect to every parameter.
    pub fn grad(&self, x: &[u8], y: &[u8]) -> Result<ParamGradient> {
        self.check(Some(x), y)?;
        let mut g = self.zero_grad();
        self.grad_into_unchecked(x, y, 1.0, &mut g);
        Ok(g)
    }

    /// `g += scale · ∂ log P(x | y) / ∂params`.
    pub fn grad_into(&self, x: &[u8], y: &[u8], scale: f64, g: &mut ParamGradient) -> Result<()> {
        self.check(Some(x), y)?;
        let expected = self.zero_grad();
        check_len(
            "gradient block count",
            expected.blocks.len(),
            g.blocks.len(),
        )?;
        for (a, b) in expected.blocks.iter().zip(&g.blocks) {
            check_len("gradient block", a.len(), b.len())?;
        }
        self.grad_into_unchecked(x, y, scale, g);
        Ok(())
    }

    pub(crate) fn grad_into_unchecked(
        &self,
        x: &[u8],
        y: &[u8],
        scale: f64,
        g: &mut ParamGradient,
    ) {
        match self {
            Layer::Sbn(l) => l.grad_into(x, y, scale, g),
            Layer::ArSbn(l) => l.grad_into(x, y, scale, g),
            Layer::Cnade(l) => l.grad_into(x, y, scale, g),
        }
    }

    // Residual-caching fast path. SBN and AR-SBN gradients depend on the
    // forward pass only through `x_i − σ(z_i)`, so a log-probability or
    // sampling pass can leave those behind and the gradient reuses them.
    // CNADE layers cache nothing and recompute.

    /// Entries this layer appends to a residual cache.
    pub(crate) fn resid_len(&self) -> usize {
        match self {
            Layer::Sbn(l) => l.d_out,
            Layer::ArSbn(l) => l.d_out,
            Layer::Cnade(_) => 0,
        }
    }

    pub(crate) fn log_prob_resid(&self, x: &[u8], y: &[u8], resid: &mut Vec<f64>) -> f64 {
        match self {
            Layer::Sbn(l) => l.log_prob_resid(x, y, resid),
            Layer::ArSbn(l) => l.log_prob_resid(x, y, resid),
            Layer::Cnade(l) => l.log_prob(x, y),
        }
    }

    pub(crate) fn sample_resid(
        &self,
        y: &[u8],
        rng: &mut RngStream,
        resid: &mut Vec<f64>,
    ) -> (Vec<u8>, f64) {
        let start = resid.len();
        let (x, lp) = match self {
            Layer::Sbn(l) => l.sample(y, rng, Some(resid)),
            Layer::ArSbn(l) => l.sample(y, rng, Some(resid)),
            Layer::Cnade(l) => return l.sample(y, rng, None),
        };
        for (r, &xi) in resid[start..].iter_mut().zip(&x) {
            *r = xi as f64 - *r;
        }
        (x, lp)
    }

    /// Same result as [`Layer::grad_into`] given the residuals cached for
    /// this `(x, y)`.
    pub(crate) fn grad_from_resid(
        &self,
        x: &[u8],
        y: &[u8],
        resid: &[f64],
        scale: f64,
        g: &mut ParamGradient,
    ) {
        match self {
            Layer::Sbn(l) => l.grad_from_resid(y, resid, scale, g),
            Layer::ArSbn(l) => l.grad_from_resid(x, y, resid, scale, g),
            Layer::Cnade(l) => l.grad_into(x, y, scale, g),
        }
    }

    /// `params += lr · g`.
    pub fn apply(&mut self, lr: f64, g: &ParamGradient) {
        for (p, gb) in self.blocks_mut().into_iter().zip(&g.blocks) {
            for (pi, gi) in p.iter_mut().zip(gb) {
                *pi += lr * gi;
            }
        }
    }
}

/// Per-parameter partial derivatives of one layer, block-for-block congruent
/// with [`Layer::blocks`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    blocks: Vec<Vec<f64>>,
}

impl ParamGradient {
    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.blocks.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.blocks.iter_mut().flatten()
    }

    /// `self ← self + c·other`.
    pub fn add_scaled(&mut self, c: f64, other: &ParamGradient) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.iter_mut().for_each(|a| *a *= c);
    }

    pub fn fill(&mut self, v: f64) {
        self.iter_mut().for_each(|a| *a = v);
    }

    pub fn norm_sq(&self) -> f64 {
        self.iter().map(|a| a * a).sum()
    }
}
