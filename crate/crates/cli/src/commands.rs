use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use melsep_core::bandmap::{
    bandsplit_mapping, boundaries_from_widths, deduplicate, default_bandsplit_widths, mel_mapping, overlap_stats, patch_coverage,
    BandMapping, BandsplitSpec, MappingMode,
};
use melsep_core::data_io::{load_dataset, read_wav, synth_fixture, write_track_dir, write_wav, Audio, TrackBundle, MIXTURE};
use melsep_core::eval::{chunked_track_sdr, SdrLimits, SdrReport, TrackEntry};
use melsep_core::model::checkpoint::Checkpoint;
use melsep_core::model::{Init, MelSeparator};
use melsep_core::pipeline::{separate_track, ChunkPlan, PadPolicy};
use melsep_core::trainer::{self, loss_curve_csv, track_sdr, SegmentSampler};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{parse_override, RunConfig};
use crate::{ConfigArgs, EvaluateArgs, InitArg, InitArgs, MappingArgs, SeparateArgs, TrainArgs, Usage};

fn validation(e: melsep_core::Error) -> anyhow::Error {
    if e.is_numerical() {
        e.into()
    } else {
        Usage(e.to_string()).into()
    }
}

fn resolve(common: &ConfigArgs, mut flags: Vec<(String, serde_json::Value)>) -> Result<RunConfig> {
    if let Some(s) = &common.stem {
        flags.push(("stem".into(), json!(s)));
    }
    if let Some(j) = common.jobs {
        flags.push(("jobs".into(), json!(j)));
    }
    for s in &common.set {
        flags.push(parse_override(s)?);
    }
    RunConfig::resolve(common.config.as_deref(), &flags)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn mapping(a: MappingArgs) -> Result<()> {
    let n_bins = a.fft / 2 + 1;
    let mapping: BandMapping = match MappingMode::from(a.mode) {
        MappingMode::MelOverlapping => {
            if a.boundaries.is_some() {
                bail!(Usage("--boundaries only applies to --mode bandsplit".into()));
            }
            mel_mapping(a.sr, a.fft, a.bands).map_err(validation)?
        }
        MappingMode::BandsplitDisjoint => {
            let boundaries = match &a.boundaries {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    BandsplitSpec::from_json(&text)
                        .map_err(|e| Usage(format!("{}: {e}", p.display())))?
                        .boundaries()
                }
                None => boundaries_from_widths(&default_bandsplit_widths()),
            };
            bandsplit_mapping(&boundaries, n_bins)
                .map_err(validation)?
                .with_source(Some(a.sr), Some(a.fft))
        }
    };
    let mapping = if a.patch_coverage || a.deduplicate { patch_coverage(&mapping) } else { mapping };
    let mapping = if a.deduplicate && mapping.mode() == MappingMode::MelOverlapping {
        deduplicate(&mapping).map_err(validation)?
    } else {
        mapping
    };

    let is_csv = a.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let text = if is_csv { mapping.to_csv() } else { mapping.to_json()? };
    write_text(&a.out, &text)?;

    println!("mode {}: {} bands over {} bins", mapping.mode(), mapping.n_bands(), mapping.n_bins());
    let widths: Vec<String> = mapping.widths().iter().map(usize::to_string).collect();
    println!("widths: {}", widths.join(" "));
    match overlap_stats(&mapping) {
        Ok(stats) if !stats.shared.is_empty() => {
            let min = stats.shared.iter().min().unwrap();
            let max = stats.shared.iter().max().unwrap();
            let mean = stats.shared.iter().sum::<usize>() as f64 / stats.shared.len() as f64;
            println!(
                "adjacent overlap (bins): min {min}, max {max}, mean {mean:.2}; every adjacent pair overlaps: {}",
                stats.all_adjacent_overlap()
            );
        }
        Ok(_) => println!("adjacent overlap: single band"),
        Err(_) => println!("adjacent overlap: none (disjoint partition)"),
    }
    let uncovered = mapping.uncovered_bins();
    if uncovered.is_empty() {
        println!("every bin is covered");
    } else {
        println!("uncovered bins: {uncovered:?}");
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn fixture_track(config: &RunConfig, seed: u64) -> Result<TrackBundle> {
    let mut t = synth_fixture(seed, melsep_core::data_io::SAMPLE_RATE, config.fixture_seconds).map_err(validation)?;
    t.name = format!("fixture_{seed}");
    Ok(t)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(v) = a.steps {
        flags.push(("train.steps".into(), json!(v)));
    }
    if let Some(v) = a.lr {
        flags.push(("train.learning_rate".into(), json!(v)));
    }
    if let Some(v) = a.seed {
        flags.push(("train.seed".into(), json!(v)));
    }
    if let Some(v) = a.mode {
        flags.push(("mode".into(), serde_json::to_value(MappingMode::from(v))?));
    }
    if let Some(v) = a.bands {
        flags.push(("n_bands".into(), json!(v)));
    }
    let config = resolve(&a.common, flags)?;
    let model_config = config.model_config()?;

    let tracks = match (a.fixture, &a.data) {
        (Some(seed), _) => {
            let t = fixture_track(&config, seed)?;
            if let Some(dir) = &a.write_fixture {
                write_track_dir(&dir.join(&t.name), &t, config.sample_format)?;
                info!("fixture written to {}", dir.join(&t.name).display());
            }
            vec![t]
        }
        (None, Some(root)) => {
            if !root.is_dir() {
                bail!(Usage(format!("dataset folder {} does not exist", root.display())));
            }
            let tracks = load_dataset(root).map_err(validation)?;
            for t in &tracks {
                for w in &t.warnings {
                    warn!("{}: {w}", t.name);
                }
            }
            tracks
        }
        (None, None) => unreachable!("clap requires --fixture or --data"),
    };
    let sr = tracks[0].sample_rate;
    // fixture runs train on the whole track, matching the overfit harness
    let segment_len = if a.fixture.is_some() {
        tracks[0].len()
    } else {
        (config.train.segment_seconds * sr as f64).round() as usize
    };

    let mut model = MelSeparator::init(model_config, config.init_seed, Init::Standard).map_err(validation)?;
    let mut sampler =
        SegmentSampler::new(tracks.clone(), &config.stem, segment_len, model.config.window, config.train.seed)
            .map_err(validation)?;
    info!(
        "training {} on {} track(s): {} steps, lr {}, {} bands ({})",
        config.stem,
        tracks.len(),
        config.train.steps,
        config.train.learning_rate,
        model.config.n_bands(),
        model.config.mapping.mode()
    );
    let curve = trainer::train(&mut model, &mut sampler, &config.train, |p| {
        if p.step % 50 == 0 {
            info!("step {} loss {:.6}", p.step, p.loss);
        }
    })
    .map_err(validation)?;

    Checkpoint::new(config.stem.clone(), model.clone()).save(&a.out)?;
    let loss_csv = a.loss_csv.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write_text(&loss_csv, &loss_curve_csv(&curve))?;

    let initial = curve[0].loss;
    let last = curve.last().expect("at least one step").loss;
    println!("initial loss {initial:.6}");
    println!("final loss {last:.6}");
    println!("final/initial loss ratio {:.4}", last / initial);
    if a.fixture.is_some() {
        let sdr = track_sdr(&model, &tracks[0], &config.stem).map_err(validation)?;
        println!("{} SDR on the fixture mixture {sdr:.2} dB", config.stem);
    }
    println!("wrote {} and {}", a.out.display(), loss_csv.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        bail!(Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path).map_err(validation)
}

pub fn separate(a: SeparateArgs) -> Result<()> {
    let config = resolve(&a.common, Vec::new())?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    if a.common.stem.as_ref().is_some_and(|s| *s != ckpt.stem) {
        bail!(Usage(format!("checkpoint separates {}, not {}", ckpt.stem, config.stem)));
    }
    if !a.input.is_file() {
        bail!(Usage(format!("input {} does not exist", a.input.display())));
    }
    let input = read_wav(&a.input).map_err(validation)?;
    let window = ckpt.model.config.window;
    if input.sample_rate != window.sample_rate {
        bail!(Usage(format!(
            "input is {} Hz, checkpoint expects {} Hz",
            input.sample_rate, window.sample_rate
        )));
    }
    if input.channels.len() != ckpt.model.config.channels {
        bail!(Usage(format!(
            "input has {} channel(s), checkpoint expects {}",
            input.channels.len(),
            ckpt.model.config.channels
        )));
    }
    let plan = ChunkPlan::new(config.chunk_len(input.sample_rate).max(window.fft_size + window.fft_size % 2), window.fft_size, PadPolicy::ShortTrackAsIs)
        .map_err(validation)?;
    info!(
        "separating {} from {} ({} samples, {} chunk(s), {} job(s))",
        ckpt.stem,
        a.input.display(),
        input.len(),
        plan.n_chunks(input.len()),
        config.jobs
    );
    let estimate = separate_track(&input.channels, &ckpt.model, &plan, config.jobs).map_err(validation)?;
    std::fs::create_dir_all(&a.out)?;
    let out = a.out.join(format!("{}.wav", ckpt.stem));
    let audio = Audio { channels: estimate, sample_rate: input.sample_rate };
    write_wav(&out, &audio, config.sample_format).map_err(validation)?;
    println!("wrote {} ({} samples)", out.display(), audio.len());

    if let Some(r) = &a.reference {
        let reference = read_wav(r).map_err(validation)?;
        if reference.sample_rate != audio.sample_rate
            || reference.channels.len() != audio.channels.len()
            || reference.len() != audio.len()
        {
            bail!(Usage(format!("reference {} does not match the input format", r.display())));
        }
        let s = chunked_track_sdr(&reference.channels, &audio.channels, audio.sample_rate, SdrLimits::default())
            .map_err(validation)?;
        println!("{} SDR {:.2} dB", ckpt.stem, s.per_track);
    }
    Ok(())
}

/// `(track name, folder)` for every subfolder of `root`, sorted.
fn track_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !root.is_dir() {
        bail!(Usage(format!("{} is not a folder", root.display())));
    }
    let mut dirs: Vec<(String, PathBuf)> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn stems_in(dir: &Path) -> Result<BTreeSet<String>> {
    Ok(std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .filter(|s| s != MIXTURE)
        .collect())
}

fn score_track(name: &str, reference: &Path, estimate: &Path) -> Result<Option<TrackEntry>> {
    let r = read_wav(reference).map_err(validation)?;
    let mut e = read_wav(estimate).map_err(validation)?;
    if r.sample_rate != e.sample_rate || r.channels.len() != e.channels.len() {
        bail!(Usage(format!(
            "{name}: reference is {} Hz x{}, estimate is {} Hz x{}",
            r.sample_rate,
            r.channels.len(),
            e.sample_rate,
            e.channels.len()
        )));
    }
    let mut reference_channels = r.channels;
    let len = reference_channels[0].len().min(e.len());
    if len != e.len() || len != reference_channels[0].len() {
        warn!("{name}: reference has {} samples, estimate {}; truncating", reference_channels[0].len(), e.len());
        reference_channels.iter_mut().chain(e.channels.iter_mut()).for_each(|c| c.truncate(len));
    }
    match chunked_track_sdr(&reference_channels, &e.channels, r.sample_rate, SdrLimits::default()) {
        Ok(s) => Ok(Some(TrackEntry { track: name.to_string(), per_chunk: s.per_chunk, per_track: s.per_track })),
        Err(melsep_core::Error::AllChunksSilent) => {
            warn!("{name}: every reference chunk is silent; skipped");
            Ok(None)
        }
        Err(err) => Err(validation(err)),
    }
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let config = resolve(&a.common, Vec::new())?;
    let refs = track_dirs(&a.reference)?;
    let ests = track_dirs(&a.estimates)?;
    let ref_names: BTreeSet<&str> = refs.iter().map(|(n, _)| n.as_str()).collect();
    let est_names: BTreeSet<&str> = ests.iter().map(|(n, _)| n.as_str()).collect();
    if refs.is_empty() {
        bail!(Usage(format!("no track folders under {}", a.reference.display())));
    }

    let stems: BTreeSet<String> = if a.score_stems.is_empty() {
        let mut all = BTreeSet::new();
        for (_, d) in &refs {
            all.extend(stems_in(d)?);
        }
        all
    } else {
        a.score_stems.iter().cloned().collect()
    };
    if stems.is_empty() {
        bail!(Usage("no stems to score".into()));
    }

    let mut offenders = Vec::new();
    for n in ref_names.difference(&est_names) {
        offenders.push(format!("{n}: no estimate folder"));
    }
    for n in est_names.difference(&ref_names) {
        offenders.push(format!("{n}: estimate folder without reference"));
    }
    for (name, dir) in &refs {
        let have_ref = stems_in(dir)?;
        let est_dir = a.estimates.join(name);
        let have_est = if est_dir.is_dir() { stems_in(&est_dir)? } else { continue };
        for s in &stems {
            if !have_ref.contains(s) {
                offenders.push(format!("{name}/{s}.wav: missing from the reference"));
            }
            if !have_est.contains(s) {
                offenders.push(format!("{name}/{s}.wav: missing from the estimates"));
            }
        }
        for s in have_est.difference(&have_ref) {
            offenders.push(format!("{name}/{s}.wav: estimate without reference"));
        }
    }
    if !offenders.is_empty() {
        for o in &offenders {
            eprintln!("  {o}");
        }
        bail!(Usage(format!("{} name mismatch(es) between reference and estimates", offenders.len())));
    }

    let pool = rayon::ThreadPoolBuilder::new().num_threads(config.jobs).build()?;
    std::fs::create_dir_all(&a.out)?;
    for stem in &stems {
        let scored: Vec<Option<TrackEntry>> = pool.install(|| {
            refs.par_iter()
                .map(|(name, dir)| {
                    let file = format!("{stem}.wav");
                    score_track(name, &dir.join(&file), &a.estimates.join(name).join(&file))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let entries: Vec<TrackEntry> = scored.into_iter().flatten().collect();
        if entries.is_empty() {
            warn!("{stem}: no scorable tracks");
            continue;
        }
        let report = SdrReport::new(stem.clone(), entries).map_err(validation)?;
        write_text(&a.out.join(format!("sdr_{stem}.json")), &report.to_json()?)?;
        write_text(&a.out.join(format!("sdr_{stem}.csv")), &report.to_csv())?;
        for t in &report.tracks {
            println!("{stem} {} {:.2} dB", t.track, t.per_track);
        }
        println!("{stem} dataset median {:.2} dB over {} track(s)", report.dataset, report.tracks.len());
    }
    Ok(())
}

pub fn init(a: InitArgs) -> Result<()> {
    let config = resolve(&a.common, Vec::new())?;
    let init = match a.init {
        InitArg::Standard => Init::Standard,
        InitArg::Random => Init::AllRandom,
        InitArg::Identity => Init::IdentityMask,
    };
    let model = MelSeparator::init(config.model_config()?, config.init_seed, init).map_err(validation)?;
    Checkpoint::new(config.stem.clone(), model).save(&a.out)?;
    println!("wrote {} ({} stem, {:?} init)", a.out.display(), config.stem, a.init);
    Ok(())
}
