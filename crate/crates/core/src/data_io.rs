//! WAV files, track folders and synthetic fixtures.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use hound::{SampleFormat as HoundFormat, WavReader, WavSpec, WavWriter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 44_100;
pub const MIXTURE: &str = "mixture";

#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    /// `[channel][sample]`, nominally in `[-1, 1]`.
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl Audio {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SampleFormat {
    Pcm16,
    Pcm24,
    #[default]
    Float32,
}

pub fn read_wav(path: &Path) -> Result<Audio> {
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    let flat: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (HoundFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (HoundFormat::Int, bits @ (16 | 24)) => {
            let scale = (1i64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::UnsupportedAudio(format!(
                "{}: {bits}-bit {fmt:?}",
                path.display()
            )))
        }
    };
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    let mut channels = vec![Vec::with_capacity(flat.len() / n_ch.max(1)); n_ch];
    for (i, v) in flat.into_iter().enumerate() {
        channels[i % n_ch].push(v);
    }
    Ok(Audio {
        channels,
        sample_rate: spec.sample_rate,
    })
}

pub fn write_wav(path: &Path, audio: &Audio, format: SampleFormat) -> Result<()> {
    let n_ch = audio.channels.len();
    if n_ch == 0 || n_ch > u16::MAX as usize {
        return Err(Error::UnsupportedAudio(format!("{n_ch} channels")));
    }
    let len = audio.len();
    if audio.channels.iter().any(|c| c.len() != len) {
        return Err(Error::ShapeMismatch("channels differ in length".into()));
    }
    if audio.channels.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    let (bits, fmt) = match format {
        SampleFormat::Pcm16 => (16, HoundFormat::Int),
        SampleFormat::Pcm24 => (24, HoundFormat::Int),
        SampleFormat::Float32 => (32, HoundFormat::Float),
    };
    let spec = WavSpec {
        channels: n_ch as u16,
        sample_rate: audio.sample_rate,
        bits_per_sample: bits,
        sample_format: fmt,
    };
    let mut w = WavWriter::create(path, spec)?;
    for i in 0..len {
        for ch in &audio.channels {
            match format {
                SampleFormat::Float32 => w.write_sample(ch[i] as f32)?,
                SampleFormat::Pcm16 | SampleFormat::Pcm24 => {
                    let scale = (1i64 << (bits - 1)) as f64;
                    let q = (ch[i] * scale).round().clamp(-scale, scale - 1.0) as i32;
                    w.write_sample(q)?
                }
            }
        }
    }
    w.finalize()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackBundle {
    pub name: String,
    pub mixture: Vec<Vec<f64>>,
    pub stems: BTreeMap<String, Vec<Vec<f64>>>,
    pub sample_rate: u32,
    pub warnings: Vec<String>,
}

impl TrackBundle {
    pub fn len(&self) -> usize {
        self.mixture.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stem(&self, name: &str) -> Result<&Vec<Vec<f64>>> {
        self.stems
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("track {} has no stem {name}", self.name)))
    }
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads `<dir>/mixture.wav` and every other `<dir>/<stem>.wav`.
pub fn load_track_dir(dir: &Path) -> Result<TrackBundle> {
    let mix_path = dir.join("mixture.wav");
    if !mix_path.is_file() {
        return Err(Error::MissingMixture(dir.to_path_buf()));
    }
    let mixture = read_wav(&mix_path)?;
    if mixture.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedAudio(format!(
            "{}: sample rate {} (only {SAMPLE_RATE} Hz is supported)",
            mix_path.display(),
            mixture.sample_rate
        )));
    }
    let mut stems = BTreeMap::new();
    for path in wav_files(dir)? {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        if stem == MIXTURE {
            continue;
        }
        let audio = read_wav(&path)?;
        if audio.sample_rate != mixture.sample_rate {
            return Err(Error::UnsupportedAudio(format!(
                "{}: sample rate {} differs from mixture",
                path.display(),
                audio.sample_rate
            )));
        }
        if audio.channels.len() != mixture.channels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{}: {} channels, mixture has {}",
                path.display(),
                audio.channels.len(),
                mixture.channels.len()
            )));
        }
        stems.insert(stem, audio);
    }
    if stems.is_empty() {
        return Err(Error::Empty(format!("no stem files in {}", dir.display())));
    }
    let name = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
    let min_len = stems.values().map(Audio::len).chain([mixture.len()]).min().unwrap_or(0);
    let mut warnings = Vec::new();
    let mut trim = |label: &str, audio: Audio| {
        if audio.len() != min_len {
            let msg = format!("{name}/{label}: truncated from {} to {min_len} samples", audio.len());
            log::warn!("{msg}");
            warnings.push(msg);
        }
        audio
            .channels
            .into_iter()
            .map(|mut c| {
                c.truncate(min_len);
                c
            })
            .collect::<Vec<_>>()
    };
    let mixture = trim(MIXTURE, mixture);
    let stems = stems.into_iter().map(|(k, a)| (k.clone(), trim(&k, a))).collect();
    Ok(TrackBundle {
        name,
        mixture,
        stems,
        sample_rate: SAMPLE_RATE,
        warnings,
    })
}

/// Every subdirectory of `root` holding a `mixture.wav`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<TrackBundle>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("mixture.wav").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Empty(format!("no track folders under {}", root.display())));
    }
    dirs.iter().map(|d| load_track_dir(d)).collect()
}

pub fn write_track_dir(dir: &Path, track: &TrackBundle, format: SampleFormat) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let audio = |channels: &Vec<Vec<f64>>| Audio {
        channels: channels.clone(),
        sample_rate: track.sample_rate,
    };
    write_wav(&dir.join("mixture.wav"), &audio(&track.mixture), format)?;
    for (name, stem) in &track.stems {
        write_wav(&dir.join(format!("{name}.wav")), &audio(stem), format)?;
    }
    Ok(())
}

pub const BASS_LIKE: &str = "bass";
pub const VOCALS_LIKE: &str = "vocals";
/// Bass-like energy stays below this frequency.
pub const BASS_MAX_HZ: f64 = 1000.0;
/// Vocals-like energy stays above this frequency.
pub const VOCALS_MIN_HZ: f64 = 2000.0;

/// Two-stem stereo fixture. "bass" is a cluster of slowly pulsing tones
/// below 1 kHz; "vocals" is a harmonic series plus a random-phase noise band,
/// all above 2 kHz, under a syllable-rate envelope. Every partial sits on an
/// integer number of cycles over the clip, so the sources stay spectrally
/// disjoint under a whole-clip DFT.
pub fn synth_fixture(seed: u64, sample_rate: u32, duration_s: f64) -> Result<TrackBundle> {
    if !(duration_s >= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "fixture duration {duration_s} s, need at least 1 s"
        )));
    }
    let len = (duration_s * sample_rate as f64).round() as usize;
    let df = sample_rate as f64 / len as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = |i: usize| i as f64 / sample_rate as f64;
    let snap = |hz: f64| (hz / df).round().max(1.0) * df;

    // partials: (freq, amplitude, phase)
    let mut bass_partials = Vec::new();
    for _ in 0..4 {
        let f = snap(rng.gen_range(50.0..400.0));
        bass_partials.push((f, rng.gen_range(0.3..1.0), rng.gen_range(0.0..TAU)));
    }
    let bass_env = snap(rng.gen_range(1.0..3.0));

    let mut vocal_partials = Vec::new();
    let f0 = snap(rng.gen_range(380.0..520.0));
    let mut k = (VOCALS_MIN_HZ / f0).ceil() + 1.0;
    while k * f0 < 6000.0 {
        vocal_partials.push((k * f0, rng.gen_range(0.2..1.0) / k.sqrt(), rng.gen_range(0.0..TAU)));
        k += 1.0;
    }
    let lo = (3000.0 / df).ceil() as usize;
    let hi = (8000.0 / df).floor() as usize;
    for bin in (lo..=hi).step_by(((hi - lo) / 60).max(1)) {
        vocal_partials.push((bin as f64 * df, rng.gen_range(0.0..0.08), rng.gen_range(0.0..TAU)));
    }
    let vocal_env = snap(rng.gen_range(3.0..6.0));
    // envelope bandwidth must not bridge the 1-2 kHz guard band
    debug_assert!(bass_partials.iter().all(|p| p.0 + bass_env < BASS_MAX_HZ));

    let render = |partials: &[(f64, f64, f64)], env_hz: f64, depth: f64| -> Vec<f64> {
        (0..len)
            .map(|i| {
                let x: f64 = partials.iter().map(|&(f, a, p)| a * (TAU * f * t(i) + p).sin()).sum();
                x * (1.0 - depth + depth * (0.5 + 0.5 * (TAU * env_hz * t(i)).sin()))
            })
            .collect()
    };
    let bass = render(&bass_partials, bass_env, 0.5);
    let vocals = render(&vocal_partials, vocal_env, 0.8);
    let peak = |x: &[f64]| x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    // equal loudness, combined peak kept under full scale
    let gb = 0.2 / rms(&bass);
    let gv = 0.2 / rms(&vocals);
    let headroom = 0.9 / (gb * peak(&bass) + gv * peak(&vocals));
    let (gb, gv) = (gb * headroom.min(1.0), gv * headroom.min(1.0));

    let pans = [(0.8, 1.0), (1.0, 0.7)]; // (bass, vocals) gain per channel
    let stem = |sig: &[f64], g: f64, which: usize| -> Vec<Vec<f64>> {
        pans.iter()
            .map(|p| {
                let pg = if which == 0 { p.0 } else { p.1 };
                sig.iter().map(|v| v * g * pg).collect()
            })
            .collect()
    };
    let bass = stem(&bass, gb, 0);
    let vocals = stem(&vocals, gv, 1);
    let mixture = bass
        .iter()
        .zip(&vocals)
        .map(|(b, v)| b.iter().zip(v).map(|(x, y)| x + y).collect())
        .collect();
    let mut stems = BTreeMap::new();
    stems.insert(BASS_LIKE.to_string(), bass);
    stems.insert(VOCALS_LIKE.to_string(), vocals);
    Ok(TrackBundle {
        name: format!("fixture-{seed}"),
        mixture,
        stems,
        sample_rate,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::sdr_multichannel;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn noise(seed: u64, channels: usize, len: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..channels)
            .map(|_| (0..len).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect())
            .collect()
    }

    #[test]
    fn float_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let a = Audio { channels: noise(0, 2, 1000), sample_rate: SAMPLE_RATE };
        write_wav(&p, &a, SampleFormat::Float32).unwrap();
        assert_eq!(read_wav(&p).unwrap(), a);
    }

    #[test]
    fn pcm16_square_wave_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sq.wav");
        let sq: Vec<f64> = (0..100).map(|i| if (i / 10) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let a = Audio { channels: vec![sq], sample_rate: SAMPLE_RATE };
        write_wav(&p, &a, SampleFormat::Pcm16).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.channels.len(), 1);
        for v in &back.channels[0] {
            assert!(*v == 32767.0 / 32768.0 || *v == -1.0, "{v}");
        }
        let hi = back.channels[0].iter().filter(|&&v| v > 0.0).count();
        assert_eq!(hi, 50);
    }

    #[test]
    fn pcm24_round_trip_within_quantum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let a = Audio { channels: noise(1, 1, 500), sample_rate: 22050 };
        write_wav(&p, &a, SampleFormat::Pcm24).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 22050);
        for (x, y) in a.channels[0].iter().zip(&back.channels[0]) {
            assert!((x - y).abs() <= 0.5 / 8_388_608.0 + 1e-15);
        }
    }

    #[test]
    fn rejects_unsupported_and_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u8.wav");
        let spec = WavSpec { channels: 1, sample_rate: 8000, bits_per_sample: 8, sample_format: HoundFormat::Int };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&p), Err(Error::UnsupportedAudio(_))));
        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"RIFF\x10\0\0\0WAVEjunk").unwrap();
        assert!(matches!(read_wav(&junk), Err(Error::Wav(_))));
        let nan = Audio { channels: vec![vec![f64::NAN]], sample_rate: SAMPLE_RATE };
        assert!(write_wav(&dir.path().join("n.wav"), &nan, SampleFormat::Float32).is_err());
    }

    #[test]
    fn rejects_non_finite_samples_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("inf.wav");
        let spec = WavSpec { channels: 1, sample_rate: SAMPLE_RATE, bits_per_sample: 32, sample_format: HoundFormat::Float };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(f32::INFINITY).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&p), Err(Error::NonFinite(_))));
    }

    fn write(dir: &Path, name: &str, channels: Vec<Vec<f64>>, sr: u32) {
        write_wav(&dir.join(name), &Audio { channels, sample_rate: sr }, SampleFormat::Float32).unwrap();
    }

    #[test]
    fn track_dir_loading() {
        let root = tempfile::tempdir().unwrap();
        let d = root.path().join("song");
        std::fs::create_dir(&d).unwrap();
        write(&d, "mixture.wav", noise(0, 2, 300), SAMPLE_RATE);
        for (i, s) in ["vocals", "bass", "drums", "other"].iter().enumerate() {
            write(&d, &format!("{s}.wav"), noise(i as u64 + 1, 2, if *s == "drums" { 298 } else { 300 }), SAMPLE_RATE);
        }
        let t = load_track_dir(&d).unwrap();
        assert_eq!(t.name, "song");
        assert_eq!(t.stems.keys().collect::<Vec<_>>(), ["bass", "drums", "other", "vocals"]);
        assert_eq!(t.len(), 298);
        assert!(t.stems.values().all(|s| s[0].len() == 298));
        assert_eq!(t.warnings.len(), 4);
        assert_eq!(load_dataset(root.path()).unwrap().len(), 1);

        std::fs::remove_file(d.join("mixture.wav")).unwrap();
        assert!(matches!(load_track_dir(&d), Err(Error::MissingMixture(_))));
        write(&d, "mixture.wav", noise(0, 2, 300), 48_000);
        assert!(matches!(load_track_dir(&d), Err(Error::UnsupportedAudio(_))));
    }

    #[test]
    fn fixture_is_deterministic_and_sums_exactly() {
        let a = synth_fixture(0, SAMPLE_RATE, 1.0).unwrap();
        let b = synth_fixture(0, SAMPLE_RATE, 1.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_fixture(1, SAMPLE_RATE, 1.0).unwrap());
        assert_eq!(a.len(), SAMPLE_RATE as usize);
        for c in 0..2 {
            for i in 0..a.len() {
                let s: f64 = a.stems.values().map(|s| s[c][i]).sum();
                assert_eq!(a.mixture[c][i] - s, 0.0);
            }
        }
        assert!(a.mixture.iter().flatten().all(|v| v.abs() < 1.0));
        assert!(synth_fixture(0, SAMPLE_RATE, 0.5).is_err());
    }

    /// Fraction of `x`'s energy that falls in the given frequency range.
    fn band_fraction(x: &[f64], sr: f64, lo: f64, hi: f64) -> f64 {
        let n = x.len();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let (mut inside, mut total) = (0.0, 0.0);
        for (k, c) in buf.iter().enumerate().take(n / 2 + 1) {
            let e = c.norm_sqr();
            let f = k as f64 * sr / n as f64;
            total += e;
            if f >= lo && f <= hi {
                inside += e;
            }
        }
        inside / total
    }

    #[test]
    fn fixture_stems_are_spectrally_disjoint() {
        for seed in 0..3 {
            let t = synth_fixture(seed, SAMPLE_RATE, 1.0).unwrap();
            let sr = SAMPLE_RATE as f64;
            for c in 0..2 {
                let bass_high = band_fraction(&t.stems["bass"][c], sr, BASS_MAX_HZ, sr / 2.0);
                let voc_low = band_fraction(&t.stems["vocals"][c], sr, 0.0, VOCALS_MIN_HZ);
                assert!(bass_high <= 0.01, "seed {seed}: bass leak {bass_high}");
                assert!(voc_low <= 0.01, "seed {seed}: vocals leak {voc_low}");
            }
        }
    }

    #[test]
    fn mixture_is_a_poor_estimate_of_each_stem() {
        let t = synth_fixture(0, SAMPLE_RATE, 1.0).unwrap();
        for stem in t.stems.values() {
            let s = sdr_multichannel(stem, &t.mixture, Default::default()).unwrap();
            assert!(s.is_finite() && s < 3.0, "{s}");
        }
    }
}
