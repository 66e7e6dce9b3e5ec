//! Layer stacks: the generative model `p(x, h)` and the inference model `q(h | x)`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RwsError};
use crate::layers::{Layer, LayerFamily, ParamGradient};
use crate::numerics::RngStream;

/// Latent bit-vectors `[h_1, …, h_L]`; `h[0]` sits directly above the visibles.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LatentConfig {
    pub h: Vec<Vec<u8>>,
}

impl LatentConfig {
    pub fn new(h: Vec<Vec<u8>>) -> Self {
        LatentConfig { h }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.h.iter().map(Vec::len).collect()
    }

    pub fn total_bits(&self) -> usize {
        self.h.iter().map(Vec::len).sum()
    }
}

/// One gradient per layer of a stack, in the stack's layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct StackGradient {
    pub layers: Vec<ParamGradient>,
}

impl StackGradient {
    pub fn zeros_for(layers: &[Layer]) -> Self {
        StackGradient {
            layers: layers.iter().map(Layer::zero_grad).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(ParamGradient::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|g| g.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|g| g.iter_mut())
    }

    pub fn add_scaled(&mut self, c: f64, other: &StackGradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_scaled(c, b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.layers.iter_mut().for_each(|g| g.scale(c));
    }

    pub fn fill(&mut self, v: f64) {
        self.layers.iter_mut().for_each(|g| g.fill(v));
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers.iter().map(ParamGradient::norm_sq).sum()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }
}

fn apply_to_stack(layers: &mut [Layer], lr: f64, g: &StackGradient) {
    for (l, gl) in layers.iter_mut().zip(&g.layers) {
        l.apply(lr, gl);
    }
}

/// `p(x, h) = p_0(x | h_1) p_1(h_1 | h_2) ⋯ p_L(h_L)`.
///
/// Layers are stored top first: `layers[0]` is the prior over `h_L` and the
/// last layer emits the visibles.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeModel {
    layers: Vec<Layer>,
}

impl GenerativeModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let Some(prior) = layers.first() else {
            return Err(RwsError::InvalidModel(
                "generative model needs at least a prior layer".into(),
            ));
        };
        if !prior.is_prior() {
            return Err(RwsError::InvalidModel(format!(
                "top generative layer must be unconditioned, but it expects {} inputs",
                prior.d_in()
            )));
        }
        for j in 1..layers.len() {
            if layers[j].d_in() != layers[j - 1].d_out() {
                return Err(RwsError::InvalidModel(format!(
                    "generative layer {j} expects {} inputs but the layer above emits {}",
                    layers[j].d_in(),
                    layers[j - 1].d_out()
                )));
            }
        }
        Ok(GenerativeModel { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_latent_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn visible_width(&self) -> usize {
        self.layers.last().map(Layer::d_out).unwrap_or(0)
    }

    /// Latent widths `[|h_1|, …, |h_L|]`.
    pub fn latent_widths(&self) -> Vec<usize> {
        let n = self.layers.len();
        (0..n - 1).map(|k| self.layers[n - 2 - k].d_out()).collect()
    }

    pub fn total_latent_bits(&self) -> usize {
        self.latent_widths().iter().sum()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn zero_grad(&self) -> StackGradient {
        StackGradient::zeros_for(&self.layers)
    }

    pub fn apply(&mut self, lr: f64, g: &StackGradient) {
        apply_to_stack(&mut self.layers, lr, g);
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(Layer::blocks_mut).collect()
    }

    /// Visible-layer biases: the bottom layer's `b`.
    pub fn set_visible_bias_from_marginals(&mut self, marginals: &[f64]) -> Result<()> {
        self.layers
            .last_mut()
            .expect("model has at least one layer")
            .set_bias_from_marginals(marginals)
    }

    /// Output and input vectors of generative layer `j` (top first).
    #[inline]
    fn io<'a>(&self, j: usize, x: &'a [u8], h: &'a LatentConfig) -> (&'a [u8], &'a [u8]) {
        let l = self.num_latent_layers();
        let out: &[u8] = if j == l { x } else { &h.h[l - 1 - j] };
        let inp: &[u8] = if j == 0 { &[] } else { &h.h[l - j] };
        (out, inp)
    }

    pub fn check_config(&self, x: &[u8], h: &LatentConfig) -> Result<()> {
        if x.len() != self.visible_width() {
            return Err(RwsError::shape(
                "visible vector",
                self.visible_width(),
                x.len(),
            ));
        }
        let widths = self.latent_widths();
        if h.h.len() != widths.len() {
            return Err(RwsError::shape(
                "latent layer count",
                widths.len(),
                h.h.len(),
            ));
        }
        for (k, (w, hk)) in widths.iter().zip(&h.h).enumerate() {
            if *w != hk.len() {
                return Err(RwsError::shape(
                    format!("latent layer h_{}", k + 1),
                    *w,
                    hk.len(),
                ));
            }
        }
        Ok(())
    }

    /// `log p(x, h)`.
    pub fn joint_log_prob(&self, x: &[u8], h: &LatentConfig) -> Result<f64> {
        self.check_config(x, h)?;
        Ok(self.joint_log_prob_unchecked(x, h))
    }

    pub(crate) fn joint_log_prob_unchecked(&self, x: &[u8], h: &LatentConfig) -> f64 {
        (0..self.layers.len())
            .map(|j| {
                let (out, inp) = self.io(j, x, h);
                self.layers[j].log_prob_unchecked(out, inp)
            })
            .sum()
    }

    /// `g += scale · ∂ log p(x, h) / ∂θ`; each layer only sees its own output
    /// and parent, so the layers decouple.
    pub fn joint_grad_into(
        &self,
        x: &[u8],
        h: &LatentConfig,
        scale: f64,
        g: &mut StackGradient,
    ) -> Result<()> {
        self.check_config(x, h)?;
        self.joint_grad_into_unchecked(x, h, scale, g);
        Ok(())
    }

    pub(crate) fn joint_grad_into_unchecked(
        &self,
        x: &[u8],
        h: &LatentConfig,
        scale: f64,
        g: &mut StackGradient,
    ) {
        for j in 0..self.layers.len() {
            let (out, inp) = self.io(j, x, h);
            self.layers[j].grad_into_unchecked(out, inp, scale, &mut g.layers[j]);
        }
    }

    /// `log p(x, h)`, appending every layer's residual cache to `resid`.
    pub(crate) fn joint_log_prob_resid(
        &self,
        x: &[u8],
        h: &LatentConfig,
        resid: &mut Vec<f64>,
    ) -> f64 {
        (0..self.layers.len())
            .map(|j| {
                let (out, inp) = self.io(j, x, h);
                self.layers[j].log_prob_resid(out, inp, resid)
            })
            .sum()
    }

    pub(crate) fn joint_grad_from_resid(
        &self,
        x: &[u8],
        h: &LatentConfig,
        resid: &[f64],
        scale: f64,
        g: &mut StackGradient,
    ) {
        let mut off = 0;
        for j in 0..self.layers.len() {
            let (out, inp) = self.io(j, x, h);
            let n = self.layers[j].resid_len();
            self.layers[j].grad_from_resid(out, inp, &resid[off..off + n], scale, &mut g.layers[j]);
            off += n;
        }
    }

    /// Top-down ancestral draw of `(x, h)` with `log p(x, h)`.
    pub fn ancestral_sample(&self, rng: &mut RngStream) -> (Vec<u8>, LatentConfig, f64) {
        let (x, h, lp, _) = self.ancestral_sample_inner(rng, false);
        (x, h, lp)
    }

    /// Ancestral draw that also returns the per-pixel probabilities the
    /// visible bits were drawn from.
    pub fn ancestral_sample_with_probs(
        &self,
        rng: &mut RngStream,
    ) -> (Vec<u8>, LatentConfig, f64, Vec<f64>) {
        self.ancestral_sample_inner(rng, true)
    }

    fn ancestral_sample_inner(
        &self,
        rng: &mut RngStream,
        probs: bool,
    ) -> (Vec<u8>, LatentConfig, f64, Vec<f64>) {
        let l = self.num_latent_layers();
        // filled top-down, reversed at the end so h[0] = h_1
        let mut top_down: Vec<Vec<u8>> = Vec::with_capacity(l);
        let mut lp = 0.0;
        let mut vis_probs = Vec::new();
        let mut x = Vec::new();
        for (j, layer) in self.layers.iter().enumerate() {
            let parent: &[u8] = top_down.last().map(Vec::as_slice).unwrap_or(&[]);
            if j == l && probs {
                let (s, lpj, pr) = layer
                    .sample_with_probs(parent, rng)
                    .expect("shapes validated at construction");
                lp += lpj;
                vis_probs = pr;
                x = s;
            } else {
                let (s, lpj) = layer.sample_unchecked(parent, rng);
                lp += lpj;
                if j == l {
                    x = s;
                } else {
                    top_down.push(s);
                }
            }
        }
        top_down.reverse();
        (x, LatentConfig { h: top_down }, lp, vis_probs)
    }
}

/// `q(h | x) = q_1(h_1 | x) ⋯ q_L(h_L | h_{L-1})`, stored bottom first.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceModel {
    visible: usize,
    layers: Vec<Layer>,
}

impl InferenceModel {
    pub fn new(visible: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut below = visible;
        for (k, layer) in layers.iter().enumerate() {
            if layer.d_in() != below {
                return Err(RwsError::InvalidModel(format!(
                    "inference layer q_{} expects {} inputs but the layer below emits {below}",
                    k + 1,
                    layer.d_in()
                )));
            }
            below = layer.d_out();
        }
        Ok(InferenceModel { visible, layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn visible_width(&self) -> usize {
        self.visible
    }

    pub fn latent_widths(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::d_out).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn zero_grad(&self) -> StackGradient {
        StackGradient::zeros_for(&self.layers)
    }

    pub fn apply(&mut self, lr: f64, g: &StackGradient) {
        apply_to_stack(&mut self.layers, lr, g);
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(Layer::blocks_mut).collect()
    }

    /// Checks that this inference model proposes latents for `p`.
    pub fn check_pair(&self, p: &GenerativeModel) -> Result<()> {
        if self.visible != p.visible_width() {
            return Err(RwsError::InvalidModel(format!(
                "inference model reads {} visibles but the generative model emits {}",
                self.visible,
                p.visible_width()
            )));
        }
        if self.latent_widths() != p.latent_widths() {
            return Err(RwsError::InvalidModel(format!(
                "latent widths differ: q has {:?}, p has {:?} (bottom first)",
                self.latent_widths(),
                p.latent_widths()
            )));
        }
        Ok(())
    }

    fn check_config(&self, x: &[u8], h: &LatentConfig) -> Result<()> {
        if x.len() != self.visible {
            return Err(RwsError::shape("visible vector", self.visible, x.len()));
        }
        if h.h.len() != self.layers.len() {
            return Err(RwsError::shape(
                "latent layer count",
                self.layers.len(),
                h.h.len(),
            ));
        }
        for (k, (l, hk)) in self.layers.iter().zip(&h.h).enumerate() {
            if l.d_out() != hk.len() {
                return Err(RwsError::shape(
                    format!("latent layer h_{}", k + 1),
                    l.d_out(),
                    hk.len(),
                ));
            }
        }
        Ok(())
    }

    /// Bottom-up draw `h ~ q(· | x)` with `log q(h | x)`.
    pub fn sample(&self, x: &[u8], rng: &mut RngStream) -> Result<(LatentConfig, f64)> {
        if x.len() != self.visible {
            return Err(RwsError::shape("visible vector", self.visible, x.len()));
        }
        Ok(self.sample_unchecked(x, rng))
    }

    pub(crate) fn sample_unchecked(&self, x: &[u8], rng: &mut RngStream) -> (LatentConfig, f64) {
        let mut h: Vec<Vec<u8>> = Vec::with_capacity(self.layers.len());
        let mut lq = 0.0;
        for layer in &self.layers {
            let below: &[u8] = h.last().map(Vec::as_slice).unwrap_or(x);
            let (s, lp) = layer.sample_unchecked(below, rng);
            lq += lp;
            h.push(s);
        }
        (LatentConfig { h }, lq)
    }

    /// [`InferenceModel::sample`] that also appends residual caches.
    pub(crate) fn sample_resid(
        &self,
        x: &[u8],
        rng: &mut RngStream,
        resid: &mut Vec<f64>,
    ) -> (LatentConfig, f64) {
        let mut h: Vec<Vec<u8>> = Vec::with_capacity(self.layers.len());
        let mut lq = 0.0;
        for layer in &self.layers {
            let below: &[u8] = h.last().map(Vec::as_slice).unwrap_or(x);
            let (s, lp) = layer.sample_resid(below, rng, resid);
            lq += lp;
            h.push(s);
        }
        (LatentConfig { h }, lq)
    }

    pub(crate) fn grad_from_resid(
        &self,
        h: &LatentConfig,
        x: &[u8],
        resid: &[f64],
        scale: f64,
        g: &mut StackGradient,
    ) {
        let mut off = 0;
        for (k, layer) in self.layers.iter().enumerate() {
            let below: &[u8] = if k == 0 { x } else { &h.h[k - 1] };
            let n = layer.resid_len();
            layer.grad_from_resid(
                &h.h[k],
                below,
                &resid[off..off + n],
                scale,
                &mut g.layers[k],
            );
            off += n;
        }
    }

    /// `log q(h | x)`.
    pub fn log_prob(&self, h: &LatentConfig, x: &[u8]) -> Result<f64> {
        self.check_config(x, h)?;
        Ok(self.log_prob_unchecked(h, x))
    }

    pub(crate) fn log_prob_unchecked(&self, h: &LatentConfig, x: &[u8]) -> f64 {
        self.layers
            .iter()
            .enumerate()
            .map(|(k, layer)| {
                let below: &[u8] = if k == 0 { x } else { &h.h[k - 1] };
                layer.log_prob_unchecked(&h.h[k], below)
            })
            .sum()
    }

    /// `g += scale · ∂ log q(h | x) / ∂φ`.
    pub fn grad_into(
        &self,
        h: &LatentConfig,
        x: &[u8],
        scale: f64,
        g: &mut StackGradient,
    ) -> Result<()> {
        self.check_config(x, h)?;
        self.grad_into_unchecked(h, x, scale, g);
        Ok(())
    }

    pub(crate) fn grad_into_unchecked(
        &self,
        h: &LatentConfig,
        x: &[u8],
        scale: f64,
        g: &mut StackGradient,
    ) {
        for (k, layer) in self.layers.iter().enumerate() {
            let below: &[u8] = if k == 0 { x } else { &h.h[k - 1] };
            layer.grad_into_unchecked(&h.h[k], below, scale, &mut g.layers[k]);
        }
    }
}

/// Architecture in the `"SBN/NADE 10-200-200"` notation: generative family,
/// inference family, then latent widths with the top layer first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub p_family: LayerFamily,
    pub q_family: LayerFamily,
    /// `[|h_L|, …, |h_1|]`
    pub latent_top_first: Vec<usize>,
}

fn parse_family(s: &str, nade_hidden: usize) -> Result<LayerFamily> {
    match s.trim().to_ascii_lowercase().as_str() {
        "sbn" => Ok(LayerFamily::Sbn),
        "ar-sbn" | "arsbn" | "ar_sbn" | "darn" | "fvsbn" => Ok(LayerFamily::ArSbn),
        "nade" | "cnade" => {
            if nade_hidden == 0 {
                return Err(RwsError::Config(
                    "NADE layers need a positive hidden width".into(),
                ));
            }
            Ok(LayerFamily::Nade {
                hidden: nade_hidden,
            })
        }
        other => Err(RwsError::Config(format!("unknown layer family `{other}`"))),
    }
}

impl ModelSpec {
    /// Parse `"P/Q W1-W2-…"`, e.g. `"SBN/SBN 10-200-200"` or `"nade/nade 250"`.
    /// `nade_hidden` is the hidden width used for any NADE layer.
    pub fn parse(arch: &str, nade_hidden: usize) -> Result<Self> {
        let mut parts = arch.split_whitespace();
        let (Some(fams), Some(widths), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(RwsError::Config(format!(
                "architecture `{arch}` should look like `SBN/SBN 10-200-200`"
            )));
        };
        let (pf, qf) = fams.split_once('/').ok_or_else(|| {
            RwsError::Config(format!("architecture `{arch}` is missing `P/Q` families"))
        })?;
        let latent_top_first = widths
            .split('-')
            .map(|w| {
                w.parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| RwsError::Config(format!("bad layer width `{w}` in `{arch}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelSpec {
            p_family: parse_family(pf, nade_hidden)?,
            q_family: parse_family(qf, nade_hidden)?,
            latent_top_first,
        })
    }

    /// Randomly initialized `(p, q)` pair over `visible` bits. When
    /// `marginals` is given, the visible biases of `p` start at their logits.
    pub fn build(
        &self,
        visible: usize,
        marginals: Option<&[f64]>,
        rng: &mut RngStream,
    ) -> Result<(GenerativeModel, InferenceModel)> {
        if visible == 0 {
            return Err(RwsError::InvalidModel(
                "visible width must be positive".into(),
            ));
        }
        let mut p_layers = Vec::new();
        let mut d_in = 0;
        for &w in self
            .latent_top_first
            .iter()
            .chain(std::iter::once(&visible))
        {
            p_layers.push(Layer::random(self.p_family, d_in, w, rng)?);
            d_in = w;
        }
        let mut p = GenerativeModel::new(p_layers)?;
        if let Some(m) = marginals {
            p.set_visible_bias_from_marginals(m)?;
        }
        let mut q_layers = Vec::new();
        let mut below = visible;
        for &w in self.latent_top_first.iter().rev() {
            q_layers.push(Layer::random(self.q_family, below, w, rng)?);
            below = w;
        }
        let q = InferenceModel::new(visible, q_layers)?;
        q.check_pair(&p)?;
        Ok((p, q))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::SbnLayer;

    fn zero_pair(visible: usize, latent: usize) -> (GenerativeModel, InferenceModel) {
        let p = GenerativeModel::new(vec![
            Layer::zeros(LayerFamily::Sbn, 0, latent).unwrap(),
            Layer::zeros(LayerFamily::Sbn, latent, visible).unwrap(),
        ])
        .unwrap();
        let q = InferenceModel::new(
            visible,
            vec![Layer::zeros(LayerFamily::Sbn, visible, latent).unwrap()],
        )
        .unwrap();
        (p, q)
    }

    #[test]
    fn zero_model_joint() {
        let (p, _) = zero_pair(3, 2);
        let h = LatentConfig::new(vec![vec![1, 0]]);
        let lp = p.joint_log_prob(&[0, 1, 1], &h).unwrap();
        assert!((lp - 5.0 * 0.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn joint_is_sum_of_layers() {
        let spec = ModelSpec::parse("SBN/SBN 2-3", 0).unwrap();
        let mut rng = RngStream::new(1, 0);
        let (p, _) = spec.build(4, None, &mut rng).unwrap();
        let (x, h, lp) = p.ancestral_sample(&mut rng);
        let l = p.layers();
        let manual = l[0].log_prob(&h.h[1], &[]).unwrap()
            + l[1].log_prob(&h.h[0], &h.h[1]).unwrap()
            + l[2].log_prob(&x, &h.h[0]).unwrap();
        assert_eq!(p.joint_log_prob(&x, &h).unwrap(), manual);
        assert!((lp - manual).abs() < 1e-12);
    }

    #[test]
    fn zero_q_log_prob() {
        let (_, q) = zero_pair(3, 4);
        let mut rng = RngStream::new(2, 0);
        let (h, lq) = q.sample(&[1, 0, 1], &mut rng).unwrap();
        assert!((lq - 4.0 * 0.5f64.ln()).abs() < 1e-14);
        assert!((q.log_prob(&h, &[1, 0, 1]).unwrap() - lq).abs() < 1e-12);
    }

    #[test]
    fn saturated_model_is_deterministic() {
        let sat = |d_in: usize, d_out: usize| {
            Layer::Sbn(
                SbnLayer::from_params(d_in, d_out, vec![0.0; d_in * d_out], vec![40.0; d_out])
                    .unwrap(),
            )
        };
        let p = GenerativeModel::new(vec![sat(0, 2), sat(2, 3), sat(3, 4)]).unwrap();
        let mut rng = RngStream::new(5, 5);
        for _ in 0..50 {
            let (x, h, _) = p.ancestral_sample(&mut rng);
            assert_eq!(x, vec![1; 4]);
            assert_eq!(h.h, vec![vec![1; 3], vec![1; 2]]);
        }
    }

    #[test]
    fn rejects_broken_chains() {
        let bad = GenerativeModel::new(vec![
            Layer::zeros(LayerFamily::Sbn, 0, 3).unwrap(),
            Layer::zeros(LayerFamily::Sbn, 2, 4).unwrap(),
        ]);
        assert!(matches!(bad, Err(RwsError::InvalidModel(_))));
        let not_prior = GenerativeModel::new(vec![Layer::zeros(LayerFamily::Sbn, 1, 3).unwrap()]);
        assert!(not_prior.is_err());
        let q = InferenceModel::new(5, vec![Layer::zeros(LayerFamily::Sbn, 4, 2).unwrap()]);
        assert!(q.is_err());

        let (p, _) = zero_pair(3, 2);
        let q =
            InferenceModel::new(3, vec![Layer::zeros(LayerFamily::Sbn, 3, 3).unwrap()]).unwrap();
        assert!(q.check_pair(&p).is_err());
    }

    #[test]
    fn shape_errors_on_evaluation() {
        let (p, q) = zero_pair(3, 2);
        let h = LatentConfig::new(vec![vec![1, 0, 0]]);
        assert!(p.joint_log_prob(&[0, 1, 1], &h).is_err());
        assert!(p
            .joint_log_prob(&[0, 1], &LatentConfig::new(vec![vec![1, 0]]))
            .is_err());
        assert!(q.sample(&[0, 1], &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn spec_parsing() {
        let s = ModelSpec::parse("SBN/NADE 10-200-200", 50).unwrap();
        assert_eq!(s.p_family, LayerFamily::Sbn);
        assert_eq!(s.q_family, LayerFamily::Nade { hidden: 50 });
        assert_eq!(s.latent_top_first, vec![10, 200, 200]);
        assert_eq!(
            ModelSpec::parse("ar-sbn/sbn 4", 0).unwrap().p_family,
            LayerFamily::ArSbn
        );
        assert!(ModelSpec::parse("SBN 10-200", 0).is_err());
        assert!(ModelSpec::parse("SBN/SBN 10-0", 0).is_err());
        assert!(ModelSpec::parse("SBN/RBM 10", 0).is_err());
        assert!(ModelSpec::parse("NADE/NADE 10", 0).is_err());
    }

    #[test]
    fn built_models_pair_up() {
        let s = ModelSpec::parse("SBN/SBN 3-5", 0).unwrap();
        let (p, q) = s
            .build(7, Some(&[0.2; 7]), &mut RngStream::new(0, 0))
            .unwrap();
        assert_eq!(p.latent_widths(), vec![5, 3]);
        assert_eq!(q.latent_widths(), vec![5, 3]);
        assert_eq!(p.visible_width(), 7);
        let b = p.layers().last().unwrap().blocks()[1].data.to_vec();
        assert!(b.iter().all(|&v| (v - (0.2f64 / 0.8).ln()).abs() < 1e-12));
    }
}
