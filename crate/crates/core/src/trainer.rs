//! Supervised training: L1 spectral + waveform loss, Adam, overfit harness.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandmap::{
    bandsplit_mapping, boundaries_from_widths, default_bandsplit_widths, mel_mapping,
    patch_coverage, BandMapping, MappingMode,
};
use crate::data_io::{synth_fixture, TrackBundle, SAMPLE_RATE, VOCALS_LIKE};
use crate::error::{Error, Result};
use crate::eval::{chunked_track_sdr, SdrLimits};
use crate::model::tape::{spec_to_tensor, Tape};
use crate::model::{Init, MelSeparator, ModelConfig, ModelParams, Precision};
use crate::pipeline::{separate_track, ChunkPlan, PadPolicy};
use crate::spectral::{stft, ComplexSpectrogram, WindowConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub spectral: f64,
    pub waveform: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            spectral: 1.0,
            waveform: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub precision: Precision,
    /// Training excerpt length; longer tracks are cut at random offsets.
    pub segment_seconds: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-3,
            batch_size: 1,
            seed: 0,
            loss_weights: LossWeights::default(),
            precision: Precision::Double,
            segment_seconds: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        // lr = 0 is allowed for frozen-parameter runs
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        let w = self.loss_weights;
        if !(w.spectral >= 0.0 && w.waveform >= 0.0) || w.spectral + w.waveform == 0.0 {
            return Err(Error::InvalidConfig(
                "loss weights must be non-negative and not both zero".into(),
            ));
        }
        if !(self.segment_seconds > 0.0) {
            return Err(Error::InvalidConfig("segment length must be positive".into()));
        }
        Ok(())
    }
}

fn mean_abs_diff<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> (f64, usize) {
    let mut n = 0;
    let s = a
        .zip(b)
        .map(|(x, y)| {
            n += 1;
            (x - y).abs()
        })
        .sum::<f64>();
    (s / n.max(1) as f64, n)
}

/// `w_s * mean|S_est - S_ref|` over both complex planes plus
/// `w_w * mean|x_est - x_ref|` over all samples.
pub fn loss(
    est_spec: &ComplexSpectrogram,
    ref_spec: &ComplexSpectrogram,
    est_wave: &[Vec<f64>],
    ref_wave: &[Vec<f64>],
    weights: LossWeights,
) -> Result<f64> {
    if est_spec.real().dim() != ref_spec.real().dim() {
        return Err(Error::ShapeMismatch(format!(
            "spectrograms {:?} vs {:?}",
            est_spec.real().dim(),
            ref_spec.real().dim()
        )));
    }
    if est_wave.len() != ref_wave.len() || est_wave.iter().zip(ref_wave).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::ShapeMismatch("waveforms differ in shape".into()));
    }
    let (spec, _) = mean_abs_diff(
        est_spec.real().iter().chain(est_spec.imag().iter()),
        ref_spec.real().iter().chain(ref_spec.imag().iter()),
    );
    let (wave, _) = mean_abs_diff(est_wave.iter().flatten(), ref_wave.iter().flatten());
    Ok(weights.spectral * spec + weights.waveform * wave)
}

/// One training pair, with spectrograms precomputed.
#[derive(Debug, Clone)]
pub struct Example {
    mixture: Arc<ComplexSpectrogram>,
    mixture_t: Arc<Tensor>,
    target_spec: Arc<Tensor>,
    target_wave: Arc<Tensor>,
}

impl Example {
    pub fn new(mixture: &[Vec<f64>], target: &[Vec<f64>], window: &WindowConfig) -> Result<Self> {
        if mixture.len() != target.len() || mixture.iter().zip(target).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::ShapeMismatch("mixture and target differ in shape".into()));
        }
        let mix = stft(mixture, window)?;
        let tgt = stft(target, window)?;
        let len = target[0].len();
        Ok(Self {
            mixture_t: Arc::new(spec_to_tensor(&mix)),
            mixture: Arc::new(mix),
            target_spec: Arc::new(spec_to_tensor(&tgt)),
            target_wave: Arc::new(Tensor::new(
                vec![target.len(), len],
                target.iter().flatten().copied().collect(),
            )),
        })
    }
}

/// Loss of one example and its parameter gradients.
pub fn loss_and_grads(
    model: &MelSeparator,
    example: &Example,
    weights: LossWeights,
) -> Result<(f64, ModelParams)> {
    let mut tape = Tape::new();
    let (mask, pv) = model.forward_on_tape(&mut tape, &example.mixture)?;
    let est = tape.complex_mul(mask, example.mixture_t.clone());
    let spec_l1 = tape.l1(est, example.target_spec.clone());
    let wave = tape.istft(est, example.mixture.clone())?;
    let wave_l1 = tape.l1(wave, example.target_wave.clone());
    let total = tape.weighted_sum(&[(spec_l1, weights.spectral), (wave_l1, weights.waveform)]);
    let value = tape.value(total).item();
    let mut grads = tape.backward(total);
    let g = pv.map(|_, v| grads.take(*v).unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape())));
    Ok((value, g))
}

/// Adam moments, one tensor per parameter in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = params.zeros_like().into_flat();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn adam_update(params: &mut ModelParams, grads: Vec<Tensor>, opt: &mut AdamState, lr: f64, precision: Precision) {
    opt.step += 1;
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
    let c1 = 1.0 - b1.powi(opt.step as i32);
    let c2 = 1.0 - b2.powi(opt.step as i32);
    let mut k = 0;
    params.for_each_mut(|_, p| {
        let (g, m, v) = (&grads[k], &mut opt.m[k], &mut opt.v[k]);
        k += 1;
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            if precision == Precision::Single {
                *p = *p as f32 as f64;
            }
        }
    });
}

/// Mean loss and gradient over `batch`, then one Adam step. Returns the loss
/// before the update.
pub fn train_step(
    model: &mut MelSeparator,
    opt: &mut AdamState,
    batch: &[Example],
    config: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    let results: Vec<Result<(f64, ModelParams)>> = if batch.len() == 1 {
        vec![loss_and_grads(model, &batch[0], config.loss_weights)]
    } else {
        batch
            .par_iter()
            .map(|ex| loss_and_grads(model, ex, config.loss_weights))
            .collect()
    };
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads: Vec<Tensor> = Vec::new();
    for r in results {
        let (l, g) = r.map_err(|e| match e {
            Error::NumericalBlowUp(s) => Error::Diverged(s),
            other => other,
        })?;
        total += l * scale;
        let g = g.into_flat();
        if grads.is_empty() {
            grads = g.into_iter().map(|t| t.scale(scale)).collect();
        } else {
            for (acc, t) in grads.iter_mut().zip(&g) {
                acc.add_assign(&t.scale(scale));
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::Diverged(format!("loss is {total}")));
    }
    if !grads.iter().all(Tensor::is_finite) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    adam_update(&mut model.params, grads, opt, config.learning_rate, config.precision);
    if !model.params.is_finite() {
        return Err(Error::Diverged("non-finite parameters after update".into()));
    }
    Ok(total)
}

/// Mean loss over `examples` without updating anything.
pub fn evaluate_loss(model: &MelSeparator, examples: &[Example], weights: LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let mask = model.forward(&ex.mixture)?;
        let est = crate::model::apply_mask(&ex.mixture, &mask)?;
        let wave = crate::spectral::istft(&est)?;
        let t = &ex.target_spec;
        let (c, f, fr) = (t.shape()[1], t.shape()[2], t.shape()[3]);
        let half = c * f * fr;
        let target = ComplexSpectrogram::from_planes(
            ndarray::Array3::from_shape_vec((c, f, fr), t.data()[..half].to_vec()).expect("shape"),
            ndarray::Array3::from_shape_vec((c, f, fr), t.data()[half..].to_vec()).expect("shape"),
            *ex.mixture.config(),
            ex.mixture.signal_len(),
        )?;
        let len = ex.target_wave.shape()[1];
        let ref_wave: Vec<Vec<f64>> = ex.target_wave.data().chunks(len).map(<[f64]>::to_vec).collect();
        total += loss(&est, &target, &wave, &ref_wave, weights)?;
    }
    Ok(total / examples.len() as f64)
}

/// Draws training excerpts for one stem from a set of tracks.
pub struct SegmentSampler {
    tracks: Vec<TrackBundle>,
    stem: String,
    segment_len: usize,
    window: WindowConfig,
    rng: ChaCha8Rng,
    fixed: Option<Vec<Example>>,
}

impl SegmentSampler {
    pub fn new(tracks: Vec<TrackBundle>, stem: &str, segment_len: usize, window: WindowConfig, seed: u64) -> Result<Self> {
        if tracks.is_empty() {
            return Err(Error::Empty("no training tracks".into()));
        }
        for t in &tracks {
            t.stem(stem)?;
            if t.len() < window.fft_size {
                return Err(Error::InputTooShort { len: t.len(), needed: window.fft_size });
            }
        }
        // every track fits in one excerpt: the batch never changes
        let fixed = if tracks.iter().all(|t| t.len() <= segment_len) {
            Some(
                tracks
                    .iter()
                    .map(|t| Example::new(&t.mixture, t.stem(stem)?, &window))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            tracks,
            stem: stem.to_string(),
            segment_len,
            window,
            rng: ChaCha8Rng::seed_from_u64(seed),
            fixed,
        })
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Vec<Example>> {
        if let Some(fixed) = &self.fixed {
            return Ok(fixed.iter().cycle().take(batch_size.min(fixed.len()).max(1)).cloned().collect());
        }
        (0..batch_size)
            .map(|_| {
                let t = &self.tracks[self.rng.gen_range(0..self.tracks.len())];
                let len = t.len().min(self.segment_len);
                let off = self.rng.gen_range(0..=t.len() - len);
                let cut = |x: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { x.iter().map(|c| c[off..off + len].to_vec()).collect() };
                Example::new(&cut(&t.mixture), &cut(t.stem(&self.stem)?), &self.window)
            })
            .collect()
    }

    /// Whole-track examples (only when every track fits in one excerpt).
    pub fn fixed_examples(&self) -> Option<&[Example]> {
        self.fixed.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("step,loss\n");
    for p in curve {
        out.push_str(&format!("{},{}\n", p.step, p.loss));
    }
    out
}

/// Runs `config.steps` updates. Entry `i < steps` is the batch loss before
/// update `i`; when the batch is fixed a final entry at `steps` records the
/// loss after the last update.
pub fn train(
    model: &mut MelSeparator,
    sampler: &mut SegmentSampler,
    config: &TrainConfig,
    mut on_step: impl FnMut(LossPoint),
) -> Result<Vec<LossPoint>> {
    config.validate()?;
    let mut opt = AdamState::new(&model.params);
    let mut curve = Vec::with_capacity(config.steps + 1);
    for step in 0..config.steps {
        let batch = sampler.next_batch(config.batch_size)?;
        let loss = train_step(model, &mut opt, &batch, config)?;
        let p = LossPoint { step, loss };
        on_step(p);
        curve.push(p);
    }
    if let Some(fixed) = sampler.fixed_examples() {
        let loss = evaluate_loss(model, fixed, config.loss_weights)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("final loss is {loss}")));
        }
        let p = LossPoint { step: config.steps, loss };
        on_step(p);
        curve.push(p);
    }
    Ok(curve)
}

/// Model shape for the overfit harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverfitConfig {
    pub fixture_seed: u64,
    pub stem: String,
    pub mode: MappingMode,
    /// Mel band count (ignored for band-split, which uses the 62-band split).
    pub n_bands: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mask_hidden_multiplier: usize,
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            fixture_seed: 0,
            stem: VOCALS_LIKE.to_string(),
            mode: MappingMode::MelOverlapping,
            n_bands: 60,
            embed_dim: 32,
            heads: 2,
            blocks: 1,
            mask_hidden_multiplier: 2,
            init_seed: 0,
            train: TrainConfig {
                learning_rate: 3e-3,
                ..TrainConfig::default()
            },
        }
    }
}

/// Mapping for `mode` on the default 2048-point STFT.
pub fn default_mapping(mode: MappingMode, n_bands: usize) -> Result<BandMapping> {
    let window = WindowConfig::default();
    match mode {
        MappingMode::MelOverlapping => Ok(patch_coverage(&mel_mapping(
            window.sample_rate,
            window.fft_size,
            n_bands,
        )?)),
        MappingMode::BandsplitDisjoint => {
            bandsplit_mapping(&boundaries_from_widths(&default_bandsplit_widths()), window.n_bins())
        }
    }
}

impl OverfitConfig {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::desk(WindowConfig::default(), default_mapping(self.mode, self.n_bands)?);
        c.embed_dim = self.embed_dim;
        c.heads = self.heads;
        c.blocks = self.blocks;
        c.mask_hidden_multiplier = self.mask_hidden_multiplier;
        c.precision = self.train.precision;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    pub mode: MappingMode,
    pub stem: String,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_ratio: f64,
    /// SDR of the untrained model's estimate (floor value: it emits silence).
    pub untrained_sdr_db: f64,
    pub sdr_db: f64,
    pub curve: Vec<LossPoint>,
}

/// SDR of `model`'s estimate of `stem` on `track`'s own mixture.
pub fn track_sdr(model: &MelSeparator, track: &TrackBundle, stem: &str) -> Result<f64> {
    let plan = ChunkPlan::new(
        crate::pipeline::DEFAULT_CHUNK_LEN.max(track.len() + track.len() % 2),
        model.config.window.fft_size,
        PadPolicy::ShortTrackAsIs,
    )?;
    let est = separate_track(&track.mixture, model, &plan, 1)?;
    Ok(chunked_track_sdr(track.stem(stem)?, &est, track.sample_rate, SdrLimits::default())?.per_track)
}

/// Trains a fresh model on one 1 s synthetic mixture.
pub fn overfit_fixture(config: &OverfitConfig) -> Result<(OverfitReport, MelSeparator)> {
    let track = synth_fixture(config.fixture_seed, SAMPLE_RATE, 1.0)?;
    let model_config = config.model_config()?;
    let mut model = MelSeparator::init(model_config, config.init_seed, Init::Standard)?;
    let untrained_sdr_db = track_sdr(&model, &track, &config.stem)?;
    let window = model.config.window;
    let mut sampler = SegmentSampler::new(vec![track.clone()], &config.stem, track.len(), window, config.train.seed)?;
    let curve = train(&mut model, &mut sampler, &config.train, |p| {
        if p.step % 50 == 0 {
            log::info!("step {} loss {:.6}", p.step, p.loss);
        }
    })?;
    let initial_loss = curve[0].loss;
    let final_loss = curve.last().expect("non-empty curve").loss;
    let sdr_db = track_sdr(&model, &track, &config.stem)?;
    Ok((
        OverfitReport {
            mode: config.mode,
            stem: config.stem.clone(),
            steps: config.train.steps,
            initial_loss,
            final_loss,
            loss_ratio: final_loss / initial_loss,
            untrained_sdr_db,
            sdr_db,
            curve,
        },
        model,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    pub mel: OverfitReport,
    pub bandsplit: OverfitReport,
}

/// Same harness, same fixture and training settings, both mapping modes.
pub fn ab_compare(config: &OverfitConfig) -> Result<AbReport> {
    let run = |mode| {
        let c = OverfitConfig { mode, ..config.clone() };
        overfit_fixture(&c).map(|(r, _)| r)
    };
    Ok(AbReport {
        mel: run(MappingMode::MelOverlapping)?,
        bandsplit: run(MappingMode::BandsplitDisjoint)?,
    })
}
