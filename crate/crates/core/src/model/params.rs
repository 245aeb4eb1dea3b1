//! Parameter trees.
//!
//! Every container is generic over its leaf type so that one layout serves
//! for stored tensors, tape variables, gradients and optimizer moments.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::tensor::Tensor;

pub trait ParamTree<T> {
    type Mapped<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U>;

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = Tensor> {
    /// `[in, out]`
    pub weight: T,
    pub bias: Option<T>,
}

impl<T> ParamTree<T> for Linear<T> {
    type Mapped<U> = Linear<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(&join(prefix, "bias"), b)),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Pre-norm self-attention followed by a pre-norm feed-forward layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub attn_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ffn_norm: T,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

impl<T> ParamTree<T> for AttentionParams<T> {
    type Mapped<U> = AttentionParams<U>;

    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            attn_norm: f(&join(p, "attn_norm"), &self.attn_norm),
            wq: f(&join(p, "wq"), &self.wq),
            wk: f(&join(p, "wk"), &self.wk),
            wv: f(&join(p, "wv"), &self.wv),
            wo: f(&join(p, "wo"), &self.wo),
            ffn_norm: f(&join(p, "ffn_norm"), &self.ffn_norm),
            ffn_in: self.ffn_in.map_named(&join(p, "ffn_in"), f),
            ffn_out: self.ffn_out.map_named(&join(p, "ffn_out"), f),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(p, "attn_norm"), &mut self.attn_norm);
        f(&join(p, "wq"), &mut self.wq);
        f(&join(p, "wk"), &mut self.wk);
        f(&join(p, "wv"), &mut self.wv);
        f(&join(p, "wo"), &mut self.wo);
        f(&join(p, "ffn_norm"), &mut self.ffn_norm);
        self.ffn_in.visit_mut(&join(p, "ffn_in"), f);
        self.ffn_out.visit_mut(&join(p, "ffn_out"), f);
    }
}

/// One inner-band (time axis) and one inter-band (band axis) block.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalParams<T = Tensor> {
    pub time: AttentionParams<T>,
    pub band: AttentionParams<T>,
}

impl<T> ParamTree<T> for HierarchicalParams<T> {
    type Mapped<U> = HierarchicalParams<U>;

    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> HierarchicalParams<U> {
        HierarchicalParams {
            time: self.time.map_named(&join(p, "time"), f),
            band: self.band.map_named(&join(p, "band"), f),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.time.visit_mut(&join(p, "time"), f);
        self.band.visit_mut(&join(p, "band"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandProjectionParams<T = Tensor> {
    /// RMS-norm gain over the band input; `None` disables normalization.
    pub norm: Option<T>,
    pub proj: Linear<T>,
}

impl<T> ParamTree<T> for BandProjectionParams<T> {
    type Mapped<U> = BandProjectionParams<U>;

    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> BandProjectionParams<U> {
        BandProjectionParams {
            norm: self.norm.as_ref().map(|n| f(&join(p, "norm"), n)),
            proj: self.proj.map_named(&join(p, "proj"), f),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        if let Some(n) = &mut self.norm {
            f(&join(p, "norm"), n);
        }
        self.proj.visit_mut(&join(p, "proj"), f);
    }
}

/// Per-band gated MLP: `glu(fc2(tanh(fc1(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskHeadParams<T = Tensor> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T> ParamTree<T> for MaskHeadParams<T> {
    type Mapped<U> = MaskHeadParams<U>;

    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> MaskHeadParams<U> {
        MaskHeadParams {
            fc1: self.fc1.map_named(&join(p, "fc1"), f),
            fc2: self.fc2.map_named(&join(p, "fc2"), f),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.fc1.visit_mut(&join(p, "fc1"), f);
        self.fc2.visit_mut(&join(p, "fc2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskEstimatorParams<T = Tensor> {
    pub final_norm: T,
    pub heads: Vec<MaskHeadParams<T>>,
}

impl<T> ParamTree<T> for MaskEstimatorParams<T> {
    type Mapped<U> = MaskEstimatorParams<U>;

    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> MaskEstimatorParams<U> {
        MaskEstimatorParams {
            final_norm: f(&join(p, "final_norm"), &self.final_norm),
            heads: map_vec(&self.heads, &join(p, "heads"), f),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(p, "final_norm"), &mut self.final_norm);
        visit_vec(&mut self.heads, &join(p, "heads"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub band_proj: Vec<BandProjectionParams<T>>,
    pub blocks: Vec<HierarchicalParams<T>>,
    pub mask: MaskEstimatorParams<T>,
}

impl<T> ParamTree<T> for ModelParams<T> {
    type Mapped<U> = ModelParams<U>;

    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            band_proj: map_vec(&self.band_proj, &join(p, "band_proj"), f),
            blocks: map_vec(&self.blocks, &join(p, "blocks"), f),
            mask: self.mask.map_named(&join(p, "mask"), f),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        visit_vec(&mut self.band_proj, &join(p, "band_proj"), f);
        visit_vec(&mut self.blocks, &join(p, "blocks"), f);
        self.mask.visit_mut(&join(p, "mask"), f);
    }
}

fn map_vec<T, U, P: ParamTree<T>>(
    items: &[P],
    prefix: &str,
    f: &mut dyn FnMut(&str, &T) -> U,
) -> Vec<P::Mapped<U>> {
    items
        .iter()
        .enumerate()
        .map(|(i, item)| item.map_named(&join(prefix, &i.to_string()), f))
        .collect()
}

fn visit_vec<T, P: ParamTree<T>>(items: &mut [P], prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
    for (i, item) in items.iter_mut().enumerate() {
        item.visit_mut(&join(prefix, &i.to_string()), f);
    }
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        self.map_named("", &mut f)
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &T)) {
        let _ = self.map_named("", &mut |n, t| f(n, t));
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        self.visit_mut("", &mut f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each(|n, _| names.push(n.to_string()));
        names
    }
}

impl ModelParams<Tensor> {
    pub fn n_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    pub fn zeros_like(&self) -> ModelParams<Tensor> {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.is_finite());
        ok
    }

    /// Leaves in canonical order.
    pub fn into_flat(mut self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.for_each_mut(|_, t| out.push(std::mem::replace(t, Tensor::zeros(&[0]))));
        out
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each(|n, t| out.push((n.to_string(), t.clone())));
        out
    }
}

/// How fresh parameters are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Small random weights; attention/FFN output projections and the final
    /// mask layers start at zero so an untrained model emits the zero mask.
    Standard,
    /// Every tensor random, biases and gains included. Used for gradient checks.
    AllRandom,
    /// Debug model whose mask is exactly `1 + 0i` on every bin.
    IdentityMask,
}

/// Gate bias that saturates the mask sigmoid to exactly 1.0 in `f64`.
const SATURATED_GATE: f64 = 40.0;

struct Sampler<'a> {
    rng: &'a mut ChaCha8Rng,
    init: Init,
}

impl Sampler<'_> {
    fn weight(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(&[fan_in, fan_out], |_| self.rng.gen_range(-bound..bound))
    }

    fn output_weight(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        match self.init {
            Init::AllRandom => self.weight(fan_in, fan_out),
            _ => Tensor::zeros(&[fan_in, fan_out]),
        }
    }

    fn bias(&mut self, n: usize) -> Tensor {
        match self.init {
            Init::AllRandom => Tensor::from_fn(&[n], |_| self.rng.gen_range(-0.1..0.1)),
            _ => Tensor::zeros(&[n]),
        }
    }

    fn gain(&mut self, n: usize) -> Tensor {
        match self.init {
            Init::AllRandom => Tensor::from_fn(&[n], |_| self.rng.gen_range(0.5..1.5)),
            _ => Tensor::filled(&[n], 1.0),
        }
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: self.weight(fan_in, fan_out),
            bias: Some(self.bias(fan_out)),
        }
    }

    fn attention(&mut self, d: usize, hidden: usize) -> AttentionParams {
        AttentionParams {
            attn_norm: self.gain(d),
            wq: self.weight(d, d),
            wk: self.weight(d, d),
            wv: self.weight(d, d),
            wo: self.output_weight(d, d),
            ffn_norm: self.gain(d),
            ffn_in: self.linear(d, hidden),
            ffn_out: Linear {
                weight: self.output_weight(hidden, d),
                bias: Some(self.bias(d)),
            },
        }
    }
}

/// Draws a parameter tree for `config`; parameter creation order is fixed, so
/// equal seeds give equal parameters.
pub fn init_params(config: &ModelConfig, rng: &mut ChaCha8Rng, init: Init) -> ModelParams {
    let d = config.embed_dim;
    let ffn_hidden = config.ffn_multiplier * d;
    let mask_hidden = config.mask_hidden_multiplier * d;
    let widths: Vec<usize> = (0..config.n_bands()).map(|b| config.band_width(b)).collect();
    let mut s = Sampler { rng, init };

    let band_proj = widths
        .iter()
        .map(|&w| BandProjectionParams {
            norm: config.normalize_input.then(|| s.gain(w)),
            proj: s.linear(w, d),
        })
        .collect();
    let blocks = (0..config.blocks)
        .map(|_| HierarchicalParams {
            time: s.attention(d, ffn_hidden),
            band: s.attention(d, ffn_hidden),
        })
        .collect();
    let final_norm = s.gain(d);
    let heads = widths
        .iter()
        .map(|&w| {
            let fc1 = s.linear(d, mask_hidden);
            let mut fc2 = Linear {
                weight: s.output_weight(mask_hidden, 2 * w),
                bias: Some(s.bias(2 * w)),
            };
            if init == Init::IdentityMask {
                fc2.bias = Some(identity_mask_bias(w, config.channels));
            }
            MaskHeadParams { fc1, fc2 }
        })
        .collect();
    ModelParams {
        band_proj,
        blocks,
        mask: MaskEstimatorParams { final_norm, heads },
    }
}

/// Value half: 1 on real entries, 0 on imaginary; gate half saturated.
fn identity_mask_bias(width: usize, channels: usize) -> Tensor {
    let nb = width / (2 * channels);
    let mut bias = vec![0.0; 2 * width];
    for c in 0..channels {
        for i in 0..nb {
            bias[c * 2 * nb + i] = 1.0;
        }
    }
    for v in &mut bias[width..] {
        *v = SATURATED_GATE;
    }
    Tensor::new(vec![2 * width], bias)
}
