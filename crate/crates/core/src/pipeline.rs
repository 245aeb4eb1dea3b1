//! Chunked full-track inference with overlap-and-average deframing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{apply_mask, MaskEstimator};
use crate::spectral::{istft, stft};

/// Default chunk: 4 s at 44.1 kHz.
pub const DEFAULT_CHUNK_LEN: usize = 4 * 44_100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    /// Every chunk is exactly `chunk_len` long; the tail is zero-padded.
    Full,
    /// As `Full`, except a track no longer than one chunk is processed at its
    /// own length (zero-padded only up to `min_len`).
    #[default]
    ShortTrackAsIs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    chunk_len: usize,
    hop: usize,
    min_len: usize,
    pad: PadPolicy,
}

impl ChunkPlan {
    /// `min_len` is the shortest signal the spectral front-end accepts
    /// (the FFT size).
    pub fn new(chunk_len: usize, min_len: usize, pad: PadPolicy) -> Result<Self> {
        if chunk_len < 2 || chunk_len % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "chunk length {chunk_len} must be even and positive"
            )));
        }
        if chunk_len < min_len {
            return Err(Error::InvalidConfig(format!(
                "chunk length {chunk_len} shorter than FFT size {min_len}"
            )));
        }
        Ok(Self {
            chunk_len,
            hop: chunk_len / 2,
            min_len,
            pad,
        })
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn pad(&self) -> PadPolicy {
        self.pad
    }

    /// `ceil(max(len - chunk_len, 0) / hop) + 1`
    pub fn n_chunks(&self, len: usize) -> usize {
        len.saturating_sub(self.chunk_len).div_ceil(self.hop) + 1
    }

    fn padded_len(&self, len: usize) -> usize {
        match self.pad {
            PadPolicy::ShortTrackAsIs if len <= self.chunk_len => len.max(self.min_len),
            _ => self.chunk_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub start: usize,
    /// `[channel][sample]`
    pub samples: Vec<Vec<f64>>,
}

fn track_len(waveform: &[Vec<f64>]) -> Result<usize> {
    let len = waveform.first().map_or(0, Vec::len);
    if len == 0 {
        return Err(Error::Empty("waveform".into()));
    }
    if waveform.iter().any(|c| c.len() != len) {
        return Err(Error::ShapeMismatch("channels differ in length".into()));
    }
    Ok(len)
}

pub fn chunk(waveform: &[Vec<f64>], plan: &ChunkPlan) -> Result<Vec<Chunk>> {
    let len = track_len(waveform)?;
    let size = plan.padded_len(len);
    Ok((0..plan.n_chunks(len))
        .map(|i| {
            let start = i * plan.hop;
            let samples = waveform
                .iter()
                .map(|ch| {
                    let mut out = vec![0.0; size];
                    let end = (start + size).min(len);
                    out[..end - start].copy_from_slice(&ch[start..end]);
                    out
                })
                .collect();
            Chunk { start, samples }
        })
        .collect())
}

/// Each output sample is the mean of all chunk samples covering it.
pub fn deframe(chunks: &[Chunk], out_len: usize) -> Result<Vec<Vec<f64>>> {
    let channels = chunks
        .first()
        .map(|c| c.samples.len())
        .ok_or_else(|| Error::Empty("no chunks".into()))?;
    let mut sum = vec![vec![0.0; out_len]; channels];
    let mut count = vec![0u32; out_len];
    for c in chunks {
        if c.samples.len() != channels {
            return Err(Error::ShapeMismatch("chunks differ in channel count".into()));
        }
        let size = c.samples[0].len();
        let end = (c.start + size).min(out_len);
        for (acc, ch) in sum.iter_mut().zip(&c.samples) {
            if ch.len() != size {
                return Err(Error::ShapeMismatch("chunk channels differ in length".into()));
            }
            for (a, v) in acc[c.start.min(end)..end].iter_mut().zip(ch) {
                *a += v;
            }
        }
        for k in &mut count[c.start.min(end)..end] {
            *k += 1;
        }
    }
    if let Some(gap) = count.iter().position(|&k| k == 0) {
        return Err(Error::CoverageGap(gap));
    }
    for acc in &mut sum {
        for (a, &k) in acc.iter_mut().zip(&count) {
            *a /= k as f64;
        }
    }
    Ok(sum)
}

fn separate_chunk(samples: &[Vec<f64>], estimator: &dyn MaskEstimator) -> Result<Vec<Vec<f64>>> {
    let spec = stft(samples, estimator.window())?;
    let mask = estimator.estimate_mask(&spec)?;
    istft(&apply_mask(&spec, &mask)?)
}

/// STFT, mask, iSTFT per chunk, then deframe. `jobs > 1` processes chunks on
/// a dedicated thread pool; results are gathered in chunk order, so the output
/// does not depend on `jobs`.
pub fn separate_track(
    waveform: &[Vec<f64>],
    estimator: &dyn MaskEstimator,
    plan: &ChunkPlan,
    jobs: usize,
) -> Result<Vec<Vec<f64>>> {
    let len = track_len(waveform)?;
    if waveform.len() != estimator.channels() {
        return Err(Error::ShapeMismatch(format!(
            "track has {} channels, model expects {}",
            waveform.len(),
            estimator.channels()
        )));
    }
    let chunks = chunk(waveform, plan)?;
    let run = |c: &Chunk| -> Result<Chunk> {
        Ok(Chunk {
            start: c.start,
            samples: separate_chunk(&c.samples, estimator)?,
        })
    };
    let processed: Result<Vec<Chunk>> = if jobs <= 1 {
        chunks.iter().map(run).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(|| chunks.par_iter().map(run).collect())
    };
    deframe(&processed?, len)
}
