//! Energy-ratio SDR with median-of-chunks aggregation.
//!
//! Tracks are cut into non-overlapping one-second chunks starting at sample 0
//! (the sub-second tail is dropped); chunks whose reference energy is below
//! [`SILENCE_ENERGY`] are skipped. A track scores the median of its chunk
//! SDRs, a dataset the median of its track scores. Medians of even-length
//! lists average the two middle values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CEILING_DB: f64 = 100.0;
/// Reported when the estimate carries no energy at all.
pub const DEFAULT_FLOOR_DB: f64 = -100.0;
pub const SILENCE_ENERGY: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdrLimits {
    pub ceiling_db: f64,
    pub floor_db: f64,
}

impl Default for SdrLimits {
    fn default() -> Self {
        Self {
            ceiling_db: DEFAULT_CEILING_DB,
            floor_db: DEFAULT_FLOOR_DB,
        }
    }
}

fn energy<'a>(channels: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    channels.into_iter().flatten().map(|v| v * v).sum()
}

fn check_pair(reference: &[Vec<f64>], estimate: &[Vec<f64>]) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} reference channels, {} estimate channels",
            reference.len(),
            estimate.len()
        )));
    }
    for (r, e) in reference.iter().zip(estimate) {
        if r.len() != e.len() {
            return Err(Error::ShapeMismatch(format!(
                "reference has {} samples, estimate {}",
                r.len(),
                e.len()
            )));
        }
        if r.iter().chain(e).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SDR input".into()));
        }
    }
    Ok(())
}

fn sdr_ranges(
    reference: &[Vec<f64>],
    estimate: &[Vec<f64>],
    range: std::ops::Range<usize>,
    limits: SdrLimits,
) -> Result<f64> {
    let num = energy(reference.iter().map(|c| &c[range.clone()]));
    if num == 0.0 {
        return Err(Error::UndefinedSdr);
    }
    if energy(estimate.iter().map(|c| &c[range.clone()])) == 0.0 {
        return Ok(limits.floor_db);
    }
    let den: f64 = reference
        .iter()
        .zip(estimate)
        .flat_map(|(r, e)| r[range.clone()].iter().zip(&e[range.clone()]))
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    if den == 0.0 {
        return Ok(limits.ceiling_db);
    }
    Ok((10.0 * (num / den).log10()).clamp(limits.floor_db, limits.ceiling_db))
}

/// `10 log10(|ref|^2 / |ref - est|^2)` over all samples of all channels.
pub fn sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    sdr_multichannel(&[reference.to_vec()], &[estimate.to_vec()], SdrLimits::default())
}

pub fn sdr_multichannel(
    reference: &[Vec<f64>],
    estimate: &[Vec<f64>],
    limits: SdrLimits,
) -> Result<f64> {
    check_pair(reference, estimate)?;
    let len = reference.first().map_or(0, Vec::len);
    sdr_ranges(reference, estimate, 0..len, limits)
}

/// Median; an even count averages the two middle values.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median of no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSdr {
    /// One entry per non-silent chunk, in time order.
    pub per_chunk: Vec<f64>,
    /// Start sample of each scored chunk.
    pub chunk_starts: Vec<usize>,
    pub per_track: f64,
}

pub fn chunked_track_sdr(
    reference: &[Vec<f64>],
    estimate: &[Vec<f64>],
    sample_rate: u32,
    limits: SdrLimits,
) -> Result<TrackSdr> {
    check_pair(reference, estimate)?;
    let chunk = sample_rate as usize;
    let len = reference.first().map_or(0, Vec::len);
    if chunk == 0 || len < chunk {
        return Err(Error::InputTooShort { len, needed: chunk });
    }
    let mut per_chunk = Vec::new();
    let mut chunk_starts = Vec::new();
    for start in (0..len / chunk).map(|i| i * chunk) {
        let range = start..start + chunk;
        if energy(reference.iter().map(|c| &c[range.clone()])) < SILENCE_ENERGY {
            continue;
        }
        per_chunk.push(sdr_ranges(reference, estimate, range, limits)?);
        chunk_starts.push(start);
    }
    if per_chunk.is_empty() {
        return Err(Error::AllChunksSilent);
    }
    Ok(TrackSdr {
        per_track: median(&per_chunk)?,
        per_chunk,
        chunk_starts,
    })
}

pub fn dataset_sdr(per_track: &[f64]) -> Result<f64> {
    if per_track.is_empty() {
        return Err(Error::Empty("no tracks to aggregate".into()));
    }
    median(per_track)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub track: String,
    pub per_chunk: Vec<f64>,
    pub per_track: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdrReport {
    pub stem: String,
    pub tracks: Vec<TrackEntry>,
    pub dataset: f64,
}

impl SdrReport {
    pub fn new(stem: impl Into<String>, tracks: Vec<TrackEntry>) -> Result<Self> {
        let medians: Vec<f64> = tracks.iter().map(|t| t.per_track).collect();
        Ok(Self {
            stem: stem.into(),
            dataset: dataset_sdr(&medians)?,
            tracks,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `track,stem,sdr_db` rows followed by a `dataset` summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("track,stem,sdr_db\n");
        for t in &self.tracks {
            out.push_str(&format!("{},{},{}\n", t.track, self.stem, t.per_track));
        }
        out.push_str(&format!("dataset,{},{}\n", self.stem, self.dataset));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn exact_match_hits_ceiling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = noise(&mut rng, 1000);
        assert_eq!(sdr(&r, &r).unwrap(), DEFAULT_CEILING_DB);
    }

    #[test]
    fn half_scale_is_six_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = noise(&mut rng, 1000);
        let e: Vec<f64> = r.iter().map(|v| 0.5 * v).collect();
        assert!((sdr(&r, &e).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!((sdr(&r, &e).unwrap() - 6.0206).abs() < 1e-3);
    }

    #[test]
    fn scale_sensitivity_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = noise(&mut rng, 777);
        for alpha in [0.5, 0.9, 2.0] {
            let e: Vec<f64> = r.iter().map(|v| alpha * v).collect();
            let want = -10.0 * ((1.0 - alpha) * (1.0 - alpha) as f64).log10();
            assert!((sdr(&r, &e).unwrap() - want).abs() < 1e-9, "alpha {alpha}");
        }
    }

    #[test]
    fn residual_at_tenth_energy_is_ten_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = noise(&mut rng, 44100);
        let n = noise(&mut rng, 44100);
        let er: f64 = r.iter().map(|v| v * v).sum();
        let en: f64 = n.iter().map(|v| v * v).sum();
        let k = (0.1 * er / en).sqrt();
        let e: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + k * b).collect();
        assert!((sdr(&r, &e).unwrap() - 10.0).abs() < 0.1);
    }

    #[test]
    fn silent_reference_and_estimate() {
        assert!(matches!(sdr(&[0.0; 10], &[1.0; 10]), Err(Error::UndefinedSdr)));
        assert_eq!(sdr(&[1.0; 10], &[0.0; 10]).unwrap(), DEFAULT_FLOOR_DB);
        assert!(matches!(sdr(&[1.0; 10], &[1.0; 9]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(sdr(&[f64::NAN; 2], &[1.0; 2]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[0.0, 100.0, 6.0]).unwrap(), 6.0);
        assert_eq!(median(&[10.0, 8.0]).unwrap(), 9.0);
        assert_eq!(dataset_sdr(&[8.0, 10.0, 12.0]).unwrap(), 10.0);
        assert_eq!(dataset_sdr(&[7.5]).unwrap(), 7.5);
        assert!(matches!(dataset_sdr(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn stationary_pair_gives_constant_chunks() {
        let sr = 100;
        let r: Vec<f64> = (0..350).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let e: Vec<f64> = r.iter().map(|v| 0.75 * v).collect();
        let t = chunked_track_sdr(&[r.clone()], &[e.clone()], sr, SdrLimits::default()).unwrap();
        assert_eq!(t.per_chunk.len(), 3);
        let single = sdr(&r[..100], &e[..100]).unwrap();
        assert!(t.per_chunk.iter().all(|&v| v == single));
        assert_eq!(t.per_track, single);
    }

    #[test]
    fn three_chunk_median() {
        let sr = 10;
        let r = vec![1.0; 30];
        let mut e = vec![0.0; 30];
        e[..10].fill(1e-100); // residual ~ reference -> 0 dB
        e[10..20].fill(0.5);
        e[20..30].fill(1.0);
        let t = chunked_track_sdr(&[r], &[e], sr, SdrLimits::default()).unwrap();
        assert!(t.per_chunk[0].abs() < 1e-9);
        assert!((t.per_chunk[1] - 6.0206).abs() < 1e-3);
        assert_eq!(t.per_chunk[2], 100.0);
        assert_eq!(t.per_track, t.per_chunk[1]);
    }

    #[test]
    fn silent_chunks_are_skipped() {
        let sr = 10;
        let mut r = vec![0.0; 25];
        r[10..20].fill(1.0);
        let e = vec![0.5; 25];
        let t = chunked_track_sdr(&[r.clone()], &[e.clone()], sr, SdrLimits::default()).unwrap();
        assert_eq!(t.chunk_starts, vec![10]);
        let silent = vec![vec![0.0; 25]];
        assert!(matches!(
            chunked_track_sdr(&silent, &[e.clone()], sr, SdrLimits::default()),
            Err(Error::AllChunksSilent)
        ));
        assert!(matches!(
            chunked_track_sdr(&[r[..5].to_vec()], &[e[..5].to_vec()], sr, SdrLimits::default()),
            Err(Error::InputTooShort { .. })
        ));
    }

    #[test]
    fn report_csv_and_json() {
        let tracks = vec![
            TrackEntry { track: "a".into(), per_chunk: vec![1.0], per_track: 8.0 },
            TrackEntry { track: "b".into(), per_chunk: vec![2.0], per_track: 10.0 },
        ];
        let rep = SdrReport::new("vocals", tracks).unwrap();
        assert_eq!(rep.dataset, 9.0);
        assert_eq!(rep.to_csv(), "track,stem,sdr_db\na,vocals,8\nb,vocals,10\ndataset,vocals,9\n");
        let back: SdrReport = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        assert_eq!(back, rep);
    }

    proptest! {
        #[test]
        fn chunk_accounting(len in 100usize..1000, sr in 10u32..100) {
            let r = vec![vec![1.0; len]];
            let t = chunked_track_sdr(&r, &r, sr, SdrLimits::default()).unwrap();
            let used = t.per_chunk.len() * sr as usize;
            prop_assert_eq!(used + len % sr as usize, len);
        }

        #[test]
        fn dataset_median_ignores_order(mut v in prop::collection::vec(-50.0f64..50.0, 1..12), seed in 0u64..1000) {
            let a = dataset_sdr(&v).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..v.len()).rev() {
                v.swap(i, rng.gen_range(0..=i));
            }
            prop_assert_eq!(dataset_sdr(&v).unwrap(), a);
        }
    }
}
