//! Frequency-bin to band mappings.
//!
//! Two families are supported: the overlapping mel mapping obtained by
//! binarizing a Slaney-scale triangle filterbank, and the disjoint band-split
//! partition given by explicit bin boundaries.

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;

fn min_log_mel() -> f64 {
    (MIN_LOG_HZ - 0.0) / F_SP
}

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

// The unchecked conversions keep the exact operation order of the reference
// implementation so that binarized edges match it to the last bit.
fn hz_to_mel_raw(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        min_log_mel() + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        (hz - 0.0) / F_SP
    }
}

fn mel_to_hz_raw(mel: f64) -> f64 {
    if mel >= min_log_mel() {
        MIN_LOG_HZ * (log_step() * (mel - min_log_mel())).exp()
    } else {
        0.0 + F_SP * mel
    }
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> Result<f64> {
    if !(hz >= 0.0) || !hz.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "frequency must be finite and >= 0, got {hz}"
        )));
    }
    Ok(hz_to_mel_raw(hz))
}

pub fn mel_to_hz(mel: f64) -> Result<f64> {
    if !(mel >= 0.0) || !mel.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "mel value must be finite and >= 0, got {mel}"
        )));
    }
    Ok(mel_to_hz_raw(mel))
}

/// Center frequency of each one-sided FFT bin.
pub fn fft_frequencies(sample_rate: u32, fft_size: usize) -> Vec<f64> {
    let d = 1.0 / sample_rate as f64;
    let val = 1.0 / (fft_size as f64 * d);
    (0..=fft_size / 2).map(|i| i as f64 * val).collect()
}

fn linspace(start: f64, stop: f64, num: usize) -> Vec<f64> {
    if num == 1 {
        return vec![start];
    }
    let step = (stop - start) / (num - 1) as f64;
    let mut out: Vec<f64> = (0..num).map(|i| i as f64 * step + start).collect();
    out[num - 1] = stop;
    out
}

/// Triangle filterbank, one row per band.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterbankWeights {
    weights: Array2<f64>,
    sample_rate: u32,
    fft_size: usize,
}

impl FilterbankWeights {
    /// Checks nonnegativity, non-empty rows and contiguous row support.
    pub fn new(weights: Array2<f64>, sample_rate: u32, fft_size: usize) -> Result<Self> {
        for (b, row) in weights.rows().into_iter().enumerate() {
            if row.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "filter {b} has negative or non-finite weights"
                )));
            }
            let support: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(i, _)| i)
                .collect();
            match (support.first(), support.last()) {
                (Some(&lo), Some(&hi)) if hi - lo + 1 == support.len() => {}
                (None, _) => {
                    return Err(Error::InvalidConfig(format!("filter {b} is empty")));
                }
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "filter {b} has non-contiguous support"
                    )));
                }
            }
        }
        Ok(Self {
            weights,
            sample_rate,
            fft_size,
        })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn n_bands(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.ncols()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }
}

/// Slaney-normalized mel triangle filterbank from 0 Hz to Nyquist.
///
/// Band `b` rises from center `b - 1` to its own center and falls to center
/// `b + 1`, so each band spans twice the spacing to its predecessor.
pub fn mel_filterbank(sample_rate: u32, fft_size: usize, n_bands: usize) -> Result<FilterbankWeights> {
    if fft_size < 2 || fft_size % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "fft_size must be even, got {fft_size}"
        )));
    }
    if sample_rate == 0 {
        return Err(Error::InvalidConfig("sample_rate must be positive".into()));
    }
    if n_bands < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 bands, got {n_bands}"
        )));
    }
    let n_bins = fft_size / 2 + 1;
    if n_bands >= n_bins {
        return Err(Error::MoreBandsThanBins {
            bands: n_bands,
            bins: n_bins,
        });
    }

    let fft_freqs = fft_frequencies(sample_rate, fft_size);
    let max_mel = hz_to_mel_raw(sample_rate as f64 / 2.0);
    let mel_f: Vec<f64> = linspace(hz_to_mel_raw(0.0), max_mel, n_bands + 2)
        .into_iter()
        .map(mel_to_hz_raw)
        .collect();
    let fdiff: Vec<f64> = mel_f.windows(2).map(|w| w[1] - w[0]).collect();

    let mut weights = Array2::zeros((n_bands, n_bins));
    for b in 0..n_bands {
        let enorm = 2.0 / (mel_f[b + 2] - mel_f[b]);
        for (j, &f) in fft_freqs.iter().enumerate() {
            let lower = -(mel_f[b] - f) / fdiff[b];
            let upper = (mel_f[b + 2] - f) / fdiff[b + 1];
            weights[[b, j]] = 0f64.max(lower.min(upper)) * enorm;
        }
    }
    FilterbankWeights::new(weights, sample_rate, fft_size)
}

/// Band center frequencies (Hz) of the mel filterbank.
pub fn mel_band_centers(sample_rate: u32, n_bands: usize) -> Vec<f64> {
    let max_mel = hz_to_mel_raw(sample_rate as f64 / 2.0);
    linspace(0.0, max_mel, n_bands + 2)[1..=n_bands]
        .iter()
        .map(|&m| mel_to_hz_raw(m))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MappingMode {
    #[serde(rename = "mel")]
    MelOverlapping,
    #[serde(rename = "bandsplit")]
    BandsplitDisjoint,
}

impl std::fmt::Display for MappingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MappingMode::MelOverlapping => "mel",
            MappingMode::BandsplitDisjoint => "bandsplit",
        })
    }
}

/// Inclusive bin interval of one band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandRange {
    pub start: usize,
    pub end: usize,
}

impl BandRange {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, bin: usize) -> bool {
        (self.start..=self.end).contains(&bin)
    }

    pub fn bins(&self) -> RangeInclusive<usize> {
        self.start..=self.end
    }

    fn distance(&self, bin: usize) -> usize {
        if bin < self.start {
            self.start - bin
        } else {
            bin.saturating_sub(self.end)
        }
    }
}

/// Binary bin-to-band incidence, stored as one contiguous interval per band.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMapping {
    mode: MappingMode,
    n_bins: usize,
    bands: Vec<BandRange>,
    sample_rate: Option<u32>,
    fft_size: Option<usize>,
}

impl BandMapping {
    pub fn new(mode: MappingMode, n_bins: usize, bands: Vec<BandRange>) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::InvalidConfig("mapping has no bands".into()));
        }
        for (b, r) in bands.iter().enumerate() {
            if r.start > r.end || r.end >= n_bins {
                return Err(Error::InvalidConfig(format!(
                    "band {b} range [{}, {}] invalid for {n_bins} bins",
                    r.start, r.end
                )));
            }
        }
        let mapping = Self {
            mode,
            n_bins,
            bands,
            sample_rate: None,
            fft_size: None,
        };
        if mode == MappingMode::BandsplitDisjoint && mapping.coverage().iter().any(|&c| c != 1) {
            return Err(Error::InvalidConfig(
                "band-split mapping must assign every bin to exactly one band".into(),
            ));
        }
        Ok(mapping)
    }

    pub fn with_source(mut self, sample_rate: Option<u32>, fft_size: Option<usize>) -> Self {
        self.sample_rate = sample_rate;
        self.fft_size = fft_size;
        self
    }

    pub fn mode(&self) -> MappingMode {
        self.mode
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn bands(&self) -> &[BandRange] {
        &self.bands
    }

    pub fn band(&self, b: usize) -> BandRange {
        self.bands[b]
    }

    pub fn sample_rate(&self) -> Option<u32> {
        self.sample_rate
    }

    pub fn fft_size(&self) -> Option<usize> {
        self.fft_size
    }

    pub fn widths(&self) -> Vec<usize> {
        self.bands.iter().map(BandRange::len).collect()
    }

    /// Ordered bin indices of every band.
    pub fn bins_per_band(&self) -> Vec<Vec<usize>> {
        self.bands.iter().map(|r| r.bins().collect()).collect()
    }

    /// Number of bands covering each bin.
    pub fn coverage(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_bins];
        for r in &self.bands {
            for c in &mut counts[r.start..=r.end] {
                *c += 1;
            }
        }
        counts
    }

    pub fn uncovered_bins(&self) -> Vec<usize> {
        self.coverage()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_covered(&self) -> bool {
        self.coverage().iter().all(|&c| c > 0)
    }

    /// `B x F` 0/1 matrix.
    pub fn incidence(&self) -> Array2<u8> {
        let mut m = Array2::zeros((self.n_bands(), self.n_bins));
        for (b, r) in self.bands.iter().enumerate() {
            for f in r.bins() {
                m[[b, f]] = 1;
            }
        }
        m
    }

    /// The incidence matrix as (binary) filterbank weights.
    pub fn to_weights(&self) -> FilterbankWeights {
        FilterbankWeights {
            weights: self.incidence().mapv(f64::from),
            sample_rate: self.sample_rate.unwrap_or(0),
            fft_size: self.fft_size.unwrap_or(2 * (self.n_bins - 1)),
        }
    }

    pub fn to_document(&self) -> MappingDocument {
        MappingDocument {
            version: MAPPING_FORMAT_VERSION,
            mode: self.mode,
            sample_rate: self.sample_rate,
            fft_size: self.fft_size,
            n_bins: Some(self.n_bins),
            n_bands: self.n_bands(),
            bands: self.bands.iter().map(|r| [r.start, r.end]).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MappingDocument = serde_json::from_str(text)?;
        doc.into_mapping()
    }

    /// Full binary matrix, one CSV row per band.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.incidence().rows() {
            let cells: Vec<&str> = row.iter().map(|&v| if v == 1 { "1" } else { "0" }).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

pub const MAPPING_FORMAT_VERSION: u32 = 1;

/// Serialized form of a [`BandMapping`]; band ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingDocument {
    pub version: u32,
    pub mode: MappingMode,
    pub sample_rate: Option<u32>,
    pub fft_size: Option<usize>,
    /// Defaults to `fft_size / 2 + 1` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_bins: Option<usize>,
    pub n_bands: usize,
    pub bands: Vec<[usize; 2]>,
}

impl MappingDocument {
    pub fn into_mapping(self) -> Result<BandMapping> {
        if self.version != MAPPING_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported mapping version {}",
                self.version
            )));
        }
        if self.n_bands != self.bands.len() {
            return Err(Error::InvalidConfig(format!(
                "n_bands = {} but {} bands listed",
                self.n_bands,
                self.bands.len()
            )));
        }
        let n_bins = match (self.n_bins, self.fft_size) {
            (Some(n), _) => n,
            (None, Some(fft)) => fft / 2 + 1,
            (None, None) => {
                return Err(Error::InvalidConfig(
                    "mapping document needs n_bins or fft_size".into(),
                ))
            }
        };
        let bands = self
            .bands
            .iter()
            .map(|&[start, end]| BandRange { start, end })
            .collect();
        Ok(BandMapping::new(self.mode, n_bins, bands)?.with_source(self.sample_rate, self.fft_size))
    }
}

/// Band `b` covers exactly the bins with positive weight in row `b`.
pub fn binarize(weights: &FilterbankWeights) -> BandMapping {
    let bands = weights
        .weights
        .rows()
        .into_iter()
        .map(|row| {
            let mut support = row.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(i, _)| i);
            let start = support.next().expect("filterbank rows are non-empty");
            let end = support.last().unwrap_or(start);
            BandRange { start, end }
        })
        .collect();
    BandMapping {
        mode: MappingMode::MelOverlapping,
        n_bins: weights.n_bins(),
        bands,
        sample_rate: Some(weights.sample_rate).filter(|&sr| sr > 0),
        fft_size: Some(weights.fft_size),
    }
}

/// Binarized mel mapping without coverage patching.
pub fn mel_mapping(sample_rate: u32, fft_size: usize, n_bands: usize) -> Result<BandMapping> {
    Ok(binarize(&mel_filterbank(sample_rate, fft_size, n_bands)?))
}

/// Assigns each uncovered bin to the nearest band by bin distance, ties going
/// to the lower band index. Covered mappings are returned unchanged.
pub fn patch_coverage(mapping: &BandMapping) -> BandMapping {
    let mut patched = mapping.clone();
    for f in mapping.uncovered_bins() {
        let nearest = mapping
            .bands
            .iter()
            .enumerate()
            .min_by_key(|(b, r)| (r.distance(f), *b))
            .map(|(b, _)| b)
            .expect("mapping has bands");
        let r = &mut patched.bands[nearest];
        r.start = r.start.min(f);
        r.end = r.end.max(f);
    }
    patched
}

/// Disjoint partition with band `b` = bins `[boundaries[b], boundaries[b + 1])`.
pub fn bandsplit_mapping(boundaries: &[usize], n_bins: usize) -> Result<BandMapping> {
    if boundaries.len() < 2 {
        return Err(Error::InvalidConfig(
            "band-split boundaries need at least two entries".into(),
        ));
    }
    if boundaries[0] != 0 || *boundaries.last().unwrap() != n_bins {
        return Err(Error::InvalidConfig(format!(
            "band-split boundaries must start at 0 and end at {n_bins}"
        )));
    }
    if boundaries.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig(
            "band-split boundaries must be strictly increasing".into(),
        ));
    }
    let bands = boundaries
        .windows(2)
        .map(|w| BandRange {
            start: w[0],
            end: w[1] - 1,
        })
        .collect();
    BandMapping::new(MappingMode::BandsplitDisjoint, n_bins, bands)
}

/// Boundaries from per-band widths, as band-split configs usually list them.
pub fn boundaries_from_widths(widths: &[usize]) -> Vec<usize> {
    std::iter::once(0)
        .chain(widths.iter().scan(0, |acc, &w| {
            *acc += w;
            Some(*acc)
        }))
        .collect()
}

/// 62-band split of a 2048-point spectrum (1025 bins): widths 2, 4, 12, 24
/// and 48 bins in groups, then 128 and 129.
pub fn default_bandsplit_widths() -> Vec<usize> {
    [(2, 24), (4, 12), (12, 8), (24, 8), (48, 8), (128, 1), (129, 1)]
        .iter()
        .flat_map(|&(w, n)| std::iter::repeat(w).take(n))
        .collect()
}

/// On-disk band-split definition: either explicit boundaries or widths.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum BandsplitSpec {
    Boundaries { boundaries: Vec<usize> },
    Widths { widths: Vec<usize> },
    Bare(Vec<usize>),
}

impl BandsplitSpec {
    pub fn boundaries(&self) -> Vec<usize> {
        match self {
            BandsplitSpec::Boundaries { boundaries } | BandsplitSpec::Bare(boundaries) => {
                boundaries.clone()
            }
            BandsplitSpec::Widths { widths } => boundaries_from_widths(widths),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn into_mapping(&self, n_bins: usize) -> Result<BandMapping> {
        bandsplit_mapping(&self.boundaries(), n_bins)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlapStats {
    /// Shared bins between band `b` and band `b + 1`.
    pub shared: Vec<usize>,
    pub widths: Vec<usize>,
}

impl OverlapStats {
    pub fn all_adjacent_overlap(&self) -> bool {
        self.shared.iter().all(|&s| s > 0)
    }
}

pub fn overlap_stats(mapping: &BandMapping) -> Result<OverlapStats> {
    if mapping.mode != MappingMode::MelOverlapping {
        return Err(Error::NoOverlapStats);
    }
    let shared = mapping
        .bands
        .windows(2)
        .map(|w| {
            let lo = w[0].start.max(w[1].start);
            let hi = w[0].end.min(w[1].end);
            if hi >= lo {
                hi - lo + 1
            } else {
                0
            }
        })
        .collect();
    Ok(OverlapStats {
        shared,
        widths: mapping.widths(),
    })
}

/// Experimental: removes overlaps by giving every shared bin to the lowest
/// band that contains it. The input must be fully covered.
pub fn deduplicate(mapping: &BandMapping) -> Result<BandMapping> {
    if let Some(&f) = mapping.uncovered_bins().first() {
        return Err(Error::BinWithoutBand(f));
    }
    let mut bands = Vec::with_capacity(mapping.n_bands());
    let mut next_free = 0usize;
    for (b, r) in mapping.bands.iter().enumerate() {
        let start = r.start.max(next_free);
        if start > r.end {
            return Err(Error::InvalidConfig(format!(
                "band {b} is empty after removing shared bins"
            )));
        }
        bands.push(BandRange { start, end: r.end });
        next_free = next_free.max(r.end + 1);
    }
    Ok(BandMapping::new(MappingMode::BandsplitDisjoint, mapping.n_bins, bands)?
        .with_source(mapping.sample_rate, mapping.fft_size))
}
