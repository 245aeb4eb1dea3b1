//! Mel filterbank and binary mapping against fixtures emitted by librosa
//! (`tools/gen_golden.py`).

use melsep_core::bandmap::{binarize, mel_filterbank, overlap_stats, patch_coverage};

fn data(name: &str) -> String {
    let path = format!("{}/tests/data/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn csv_rows<T: std::str::FromStr>(text: &str) -> Vec<Vec<T>>
where
    T::Err: std::fmt::Debug,
{
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|c| c.trim().parse().unwrap()).collect())
        .collect()
}

#[test]
fn weights_match_reference_within_1e6() {
    for n in [16, 60] {
        let reference: Vec<Vec<f64>> = csv_rows(&data(&format!("mel_44100_2048_{n}_weights.csv")));
        let fb = mel_filterbank(44100, 2048, n).unwrap();
        assert_eq!(fb.weights().dim(), (n, 1025));
        let mut max_dev: f64 = 0.0;
        for (b, row) in reference.iter().enumerate() {
            for (f, &w) in row.iter().enumerate() {
                max_dev = max_dev.max((fb.weights()[[b, f]] - w).abs());
            }
        }
        assert!(max_dev <= 1e-6, "{n} bands: max deviation {max_dev:e}");
    }
}

#[test]
fn binary_mapping_bit_exact() {
    for n in [16, 60] {
        let reference: Vec<Vec<u8>> = csv_rows(&data(&format!("mel_44100_2048_{n}_binary.csv")));
        let m = binarize(&mel_filterbank(44100, 2048, n).unwrap());
        let inc = m.incidence();
        for (b, row) in reference.iter().enumerate() {
            for (f, &v) in row.iter().enumerate() {
                assert_eq!(inc[[b, f]], v, "{n} bands: band {b} bin {f}");
            }
        }
    }
}

#[test]
fn sixty_band_mapping_overlaps_everywhere() {
    let m = binarize(&mel_filterbank(44100, 2048, 60).unwrap());
    assert_eq!(m.n_bands(), 60);
    assert!(m.widths().iter().all(|&w| w > 0));
    let stats = overlap_stats(&m).unwrap();
    assert_eq!(stats.shared.len(), 59);
    assert!(stats.shared.iter().all(|&s| s >= 1));
    let patched = patch_coverage(&m);
    assert!(patched.is_covered());
    assert_eq!(patched.band(0).start, 0);
}
