//! Mel-band projection separator.
//!
//! Each band's complex bins (all channels, real and imaginary parts) are
//! projected to an embedding, refined by alternating inner-band (time) and
//! inter-band (band) RoPE Transformer blocks, mapped back to per-band complex
//! masks and averaged over overlapping bins into one full-spectrum mask.

pub mod checkpoint;
pub mod params;
pub mod rope;
pub mod tape;

use std::sync::Arc;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bandmap::{BandMapping, MappingDocument};
use crate::error::{Error, Result};
use crate::spectral::{ComplexSpectrogram, WindowConfig};
use crate::tensor::Tensor;

pub use params::{
    init_params, AttentionParams, BandProjectionParams, HierarchicalParams, Init, Linear,
    MaskEstimatorParams, MaskHeadParams, ModelParams, ParamTree,
};
pub use rope::rope_rotate;
use tape::{BandLayout, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelConfigDoc", into = "ModelConfigDoc")]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_multiplier: usize,
    pub mask_hidden_multiplier: usize,
    pub channels: usize,
    pub normalize_input: bool,
    pub precision: Precision,
    pub window: WindowConfig,
    pub mapping: BandMapping,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelConfigDoc {
    embed_dim: usize,
    heads: usize,
    blocks: usize,
    ffn_multiplier: usize,
    mask_hidden_multiplier: usize,
    channels: usize,
    normalize_input: bool,
    #[serde(default)]
    precision: Precision,
    window: WindowConfig,
    mapping: MappingDocument,
}

impl TryFrom<ModelConfigDoc> for ModelConfig {
    type Error = Error;

    fn try_from(d: ModelConfigDoc) -> Result<Self> {
        let config = ModelConfig {
            embed_dim: d.embed_dim,
            heads: d.heads,
            blocks: d.blocks,
            ffn_multiplier: d.ffn_multiplier,
            mask_hidden_multiplier: d.mask_hidden_multiplier,
            channels: d.channels,
            normalize_input: d.normalize_input,
            precision: d.precision,
            window: d.window,
            mapping: d.mapping.into_mapping()?,
        };
        config.validate()?;
        Ok(config)
    }
}

impl From<ModelConfig> for ModelConfigDoc {
    fn from(c: ModelConfig) -> Self {
        ModelConfigDoc {
            embed_dim: c.embed_dim,
            heads: c.heads,
            blocks: c.blocks,
            ffn_multiplier: c.ffn_multiplier,
            mask_hidden_multiplier: c.mask_hidden_multiplier,
            channels: c.channels,
            normalize_input: c.normalize_input,
            precision: c.precision,
            window: c.window,
            mapping: c.mapping.to_document(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale defaults (D = 64, H = 4, L = 2, stereo) around `mapping`.
    pub fn desk(window: WindowConfig, mapping: BandMapping) -> Self {
        Self {
            embed_dim: 64,
            heads: 4,
            blocks: 2,
            ffn_multiplier: 4,
            mask_hidden_multiplier: 4,
            channels: 2,
            normalize_input: true,
            precision: Precision::Double,
            window,
            mapping,
        }
    }

    pub fn n_bands(&self) -> usize {
        self.mapping.n_bands()
    }

    pub fn n_bins(&self) -> usize {
        self.mapping.n_bins()
    }

    /// Input (and mask) width of band `b`: `2 * |bins(b)| * channels`.
    pub fn band_width(&self, b: usize) -> usize {
        2 * self.mapping.band(b).len() * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % (2 * self.heads) != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} must be a positive multiple of 2 * heads ({})",
                self.embed_dim, self.heads
            )));
        }
        if self.blocks == 0 {
            return Err(Error::InvalidConfig("need at least one block".into()));
        }
        if self.ffn_multiplier == 0 || self.mask_hidden_multiplier == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig(
                "multipliers and channel count must be positive".into(),
            ));
        }
        self.window.validate()?;
        if self.mapping.n_bins() != self.window.n_bins() {
            return Err(Error::InvalidConfig(format!(
                "mapping has {} bins, STFT gives {}",
                self.mapping.n_bins(),
                self.window.n_bins()
            )));
        }
        if let Some(&f) = self.mapping.uncovered_bins().first() {
            return Err(Error::BinWithoutBand(f));
        }
        Ok(())
    }

    fn layout(&self) -> Arc<BandLayout> {
        Arc::new(BandLayout {
            mapping: self.mapping.clone(),
            channels: self.channels,
        })
    }
}

/// `[B, T, D]` band embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct BandEmbeddings {
    pub values: Tensor,
}

impl BandEmbeddings {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "embeddings must be [B, T, D], got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("embeddings".into()));
        }
        Ok(Self { values })
    }

    pub fn n_bands(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Complex mask on the `[channel, bin, frame]` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMask {
    pub real: Array3<f64>,
    pub imag: Array3<f64>,
}

impl ComplexMask {
    pub fn filled(dim: (usize, usize, usize), real: f64, imag: f64) -> Self {
        Self {
            real: Array3::from_elem(dim, real),
            imag: Array3::from_elem(dim, imag),
        }
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.real.dim()
    }

    fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        let (c, f, tt) = (s[1], s[2], s[3]);
        let half = c * f * tt;
        Self {
            real: Array3::from_shape_vec((c, f, tt), t.data()[..half].to_vec()).expect("mask shape"),
            imag: Array3::from_shape_vec((c, f, tt), t.data()[half..].to_vec()).expect("mask shape"),
        }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            real: &self.real * alpha,
            imag: &self.imag * alpha,
        }
    }
}

/// Anything that turns a mixture spectrogram into a complex mask.
pub trait MaskEstimator: Sync {
    fn window(&self) -> &WindowConfig;

    fn channels(&self) -> usize;

    fn estimate_mask(&self, spec: &ComplexSpectrogram) -> Result<ComplexMask>;
}

fn check_finite(tape: &Tape, v: Var, stage: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalBlowUp(stage.to_string()))
    }
}

/// Band input vectors `[T, width(b)]` gathered from the spectrogram.
fn band_inputs(spec: &ComplexSpectrogram, layout: &BandLayout) -> Vec<Tensor> {
    let (channels, _, frames) = spec.real().dim();
    (0..layout.mapping.n_bands())
        .map(|b| {
            let band = layout.mapping.band(b);
            let width = layout.width(b);
            let mut data = vec![0.0; frames * width];
            for t in 0..frames {
                let row = &mut data[t * width..(t + 1) * width];
                let mut i = 0;
                for c in 0..channels {
                    for plane in [spec.real(), spec.imag()] {
                        for f in band.bins() {
                            row[i] = plane[[c, f, t]];
                            i += 1;
                        }
                    }
                }
            }
            Tensor::new(vec![frames, width], data)
        })
        .collect()
}

fn tape_band_project(
    tape: &mut Tape,
    inputs: Vec<Tensor>,
    params: &[BandProjectionParams<Var>],
) -> Var {
    let embedded: Vec<Var> = inputs
        .into_iter()
        .zip(params)
        .map(|(x, p)| {
            let x = tape.constant(x);
            let x = match p.norm {
                Some(g) => tape.rms_norm(x, Some(g)),
                None => x,
            };
            tape.linear(x, p.proj.weight, p.proj.bias)
        })
        .collect();
    tape.stack(&embedded)
}

/// Pre-norm attention + FFN block over `[N, L, D]`.
fn tape_attention_block(tape: &mut Tape, x: Var, p: &AttentionParams<Var>, heads: usize) -> Var {
    let h = tape.rms_norm(x, Some(p.attn_norm));
    let q = tape.linear(h, p.wq, None);
    let k = tape.linear(h, p.wk, None);
    let v = tape.linear(h, p.wv, None);
    let a = tape.attention(q, k, v, heads);
    let o = tape.linear(a, p.wo, None);
    let x = tape.add(x, o);
    let h = tape.rms_norm(x, Some(p.ffn_norm));
    let f = tape.linear(h, p.ffn_in.weight, p.ffn_in.bias);
    let f = tape.gelu(f);
    let f = tape.linear(f, p.ffn_out.weight, p.ffn_out.bias);
    tape.add(x, f)
}

fn tape_hierarchical_block(
    tape: &mut Tape,
    x: Var,
    p: &HierarchicalParams<Var>,
    heads: usize,
) -> Result<Var> {
    let x = tape_attention_block(tape, x, &p.time, heads);
    check_finite(tape, x, "inner-band attention")?;
    let x = tape.swap_axes01(x);
    let x = tape_attention_block(tape, x, &p.band, heads);
    check_finite(tape, x, "inter-band attention")?;
    Ok(tape.swap_axes01(x))
}

fn tape_band_masks(tape: &mut Tape, e: Var, p: &MaskEstimatorParams<Var>) -> Vec<Var> {
    let z = tape.rms_norm(e, Some(p.final_norm));
    p.heads
        .iter()
        .enumerate()
        .map(|(b, head)| {
            let zb = tape.select0(z, b);
            let h = tape.linear(zb, head.fc1.weight, head.fc1.bias);
            let h = tape.tanh(h);
            let o = tape.linear(h, head.fc2.weight, head.fc2.bias);
            tape.glu(o)
        })
        .collect()
}

fn check_band_params(mapping: &BandMapping, channels: usize, widths: &[usize]) -> Result<()> {
    if widths.len() != mapping.n_bands() {
        return Err(Error::ShapeMismatch(format!(
            "{} per-band parameter sets for {} bands",
            widths.len(),
            mapping.n_bands()
        )));
    }
    for (b, &w) in widths.iter().enumerate() {
        let expected = 2 * mapping.band(b).len() * channels;
        if w != expected {
            return Err(Error::ShapeMismatch(format!(
                "band {b}: parameters expect width {w}, mapping gives {expected}"
            )));
        }
    }
    Ok(())
}

/// Per-band projection of the real and imaginary bins to `D`-dimensional
/// embeddings. Normalization is applied when the band carries a norm gain.
pub fn band_project(
    spec: &ComplexSpectrogram,
    mapping: &BandMapping,
    params: &[BandProjectionParams],
) -> Result<BandEmbeddings> {
    if spec.n_bins() != mapping.n_bins() {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {} bins, mapping {}",
            spec.n_bins(),
            mapping.n_bins()
        )));
    }
    let channels = spec.n_channels();
    let widths: Vec<usize> = params.iter().map(|p| p.proj.weight.shape()[0]).collect();
    check_band_params(mapping, channels, &widths)?;
    let layout = BandLayout {
        mapping: mapping.clone(),
        channels,
    };
    let mut tape = Tape::inference();
    let pv: Vec<BandProjectionParams<Var>> = params
        .iter()
        .map(|p| p.map_named("", &mut |_, t| tape.param(t.clone())))
        .collect();
    let e = tape_band_project(&mut tape, band_inputs(spec, &layout), &pv);
    BandEmbeddings::new(tape.value(e).clone())
}

/// One attention block over a `[L, D]` sequence or a `[N, L, D]` batch.
pub fn attention_block(seq: &Tensor, params: &AttentionParams, heads: usize) -> Result<Tensor> {
    let batched = match seq.shape() {
        [l, d] => seq.clone().reshape(vec![1, *l, *d]),
        [_, _, _] => seq.clone(),
        s => return Err(Error::ShapeMismatch(format!("attention input {s:?}"))),
    };
    let d = batched.shape()[2];
    if heads == 0 || d % (2 * heads) != 0 {
        return Err(Error::InvalidConfig(format!(
            "width {d} not divisible by 2 * {heads} heads"
        )));
    }
    if params.wq.shape() != [d, d] {
        return Err(Error::ShapeMismatch(format!(
            "attention weights {:?} for width {d}",
            params.wq.shape()
        )));
    }
    if !batched.is_finite() {
        return Err(Error::NumericalBlowUp("attention input".into()));
    }
    let mut tape = Tape::inference();
    let pv = params.map_named("", &mut |_, t| tape.param(t.clone()));
    let x = tape.constant(batched);
    let y = tape_attention_block(&mut tape, x, &pv, heads);
    check_finite(&tape, y, "attention block")?;
    Ok(tape.value(y).clone().reshape(seq.shape().to_vec()))
}

/// Inner-band attention along time for every band, then inter-band attention
/// along bands for every frame.
pub fn hierarchical_block(
    e: &BandEmbeddings,
    params: &HierarchicalParams,
    heads: usize,
) -> Result<BandEmbeddings> {
    let mut tape = Tape::inference();
    let pv = params.map_named("", &mut |_, t| tape.param(t.clone()));
    let x = tape.constant(e.values.clone());
    let y = tape_hierarchical_block(&mut tape, x, &pv, heads)?;
    BandEmbeddings::new(tape.value(y).clone())
}

/// Final norm and per-band gated MLPs; band `b` yields `[T, 2 * |bins(b)| * C]`.
pub fn estimate_band_masks(
    e: &BandEmbeddings,
    mapping: &BandMapping,
    params: &MaskEstimatorParams,
    channels: usize,
) -> Result<Vec<Tensor>> {
    if e.n_bands() != mapping.n_bands() {
        return Err(Error::ShapeMismatch(format!(
            "{} embedded bands for {} mapped bands",
            e.n_bands(),
            mapping.n_bands()
        )));
    }
    let widths: Vec<usize> = params.heads.iter().map(|h| h.fc2.weight.shape()[1] / 2).collect();
    check_band_params(mapping, channels, &widths)?;
    let mut tape = Tape::inference();
    let pv = params.map_named("", &mut |_, t| tape.param(t.clone()));
    let x = tape.constant(e.values.clone());
    let parts = tape_band_masks(&mut tape, x, &pv);
    Ok(parts.into_iter().map(|p| tape.value(p).clone()).collect())
}

/// Averages band masks over the bands covering each bin.
pub fn merge_masks(band_masks: &[Tensor], mapping: &BandMapping, channels: usize) -> Result<ComplexMask> {
    if let Some(&f) = mapping.uncovered_bins().first() {
        return Err(Error::BinWithoutBand(f));
    }
    if band_masks.len() != mapping.n_bands() {
        return Err(Error::ShapeMismatch(format!(
            "{} band masks for {} bands",
            band_masks.len(),
            mapping.n_bands()
        )));
    }
    let frames = band_masks[0].shape().first().copied().unwrap_or(0);
    for (b, m) in band_masks.iter().enumerate() {
        let expected = [frames, 2 * mapping.band(b).len() * channels];
        if m.shape() != expected {
            return Err(Error::ShapeMismatch(format!(
                "band {b} mask {:?}, expected {expected:?}",
                m.shape()
            )));
        }
    }
    let layout = Arc::new(BandLayout {
        mapping: mapping.clone(),
        channels,
    });
    let mut tape = Tape::inference();
    let parts: Vec<Var> = band_masks.iter().map(|m| tape.constant(m.clone())).collect();
    let merged = tape.merge_masks(&parts, layout);
    Ok(ComplexMask::from_tensor(tape.value(merged)))
}

/// Elementwise complex product `spec * mask`.
pub fn apply_mask(spec: &ComplexSpectrogram, mask: &ComplexMask) -> Result<ComplexSpectrogram> {
    if spec.real().dim() != mask.dim() || mask.imag.dim() != mask.dim() {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram {:?} vs mask {:?}",
            spec.real().dim(),
            mask.dim()
        )));
    }
    let (sr, si) = (spec.real(), spec.imag());
    let real = sr * &mask.real - si * &mask.imag;
    let imag = sr * &mask.imag + si * &mask.real;
    ComplexSpectrogram::from_planes(real, imag, *spec.config(), spec.signal_len())
}

/// Model configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSeparator {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl MelSeparator {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let reference = init_params(&config, &mut ChaCha8Rng::seed_from_u64(0), Init::Standard);
        let (mut want, mut got) = (Vec::new(), Vec::new());
        reference.for_each(|n, t| want.push((n.to_string(), t.shape().to_vec())));
        params.for_each(|n, t| got.push((n.to_string(), t.shape().to_vec())));
        if want != got {
            return Err(Error::ShapeMismatch(
                "parameter tree does not match the model configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64, init: Init) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, &mut ChaCha8Rng::seed_from_u64(seed), init);
        Ok(Self { config, params })
    }

    fn check_input(&self, spec: &ComplexSpectrogram) -> Result<()> {
        if spec.n_bins() != self.config.n_bins() || spec.n_channels() != self.config.channels {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram ({} ch, {} bins) vs model ({} ch, {} bins)",
                spec.n_channels(),
                spec.n_bins(),
                self.config.channels,
                self.config.n_bins()
            )));
        }
        Ok(())
    }

    /// Records the full forward pass and returns the `[2, C, F, T]` mask node
    /// and the parameter variables.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        spec: &ComplexSpectrogram,
    ) -> Result<(Var, ModelParams<Var>)> {
        self.check_input(spec)?;
        let layout = self.config.layout();
        let pv = self.params.map(|_, t| tape.param(t.clone()));
        let mut e = tape_band_project(tape, band_inputs(spec, &layout), &pv.band_proj);
        check_finite(tape, e, "band projection")?;
        for block in &pv.blocks {
            e = tape_hierarchical_block(tape, e, block, self.config.heads)?;
        }
        let parts = tape_band_masks(tape, e, &pv.mask);
        let mask = tape.merge_masks(&parts, layout);
        check_finite(tape, mask, "mask estimation")?;
        Ok((mask, pv))
    }

    pub fn forward(&self, spec: &ComplexSpectrogram) -> Result<ComplexMask> {
        let mut tape = Tape::inference();
        let (mask, _) = self.forward_on_tape(&mut tape, spec)?;
        Ok(ComplexMask::from_tensor(tape.value(mask)))
    }
}

impl MaskEstimator for MelSeparator {
    fn window(&self) -> &WindowConfig {
        &self.config.window
    }

    fn channels(&self) -> usize {
        self.config.channels
    }

    fn estimate_mask(&self, spec: &ComplexSpectrogram) -> Result<ComplexMask> {
        self.forward(spec)
    }
}

/// Mask that is the same complex constant everywhere.
#[derive(Debug, Clone)]
pub struct ConstantMask {
    pub window: WindowConfig,
    pub channels: usize,
    pub value: (f64, f64),
}

impl MaskEstimator for ConstantMask {
    fn window(&self) -> &WindowConfig {
        &self.window
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn estimate_mask(&self, spec: &ComplexSpectrogram) -> Result<ComplexMask> {
        Ok(ComplexMask::filled(spec.real().dim(), self.value.0, self.value.1))
    }
}
