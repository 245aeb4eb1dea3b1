//! Run configuration shared by `train`, `separate`, `evaluate` and `init`.
//!
//! Resolution order: built-in defaults, then the JSON file, then named flags,
//! then `--set key.path=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use melsep_core::bandmap::{deduplicate, BandMapping, MappingMode};
use melsep_core::data_io::SampleFormat;
use melsep_core::model::ModelConfig;
use melsep_core::spectral::WindowConfig;
use melsep_core::trainer::{default_mapping, OverfitConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::Usage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stem: String,
    pub mode: MappingMode,
    /// Mel band count; the band-split mode always uses the default 62-band split.
    pub n_bands: usize,
    /// Mapping document to use instead of `mode` / `n_bands`.
    pub mapping_file: Option<PathBuf>,
    /// Experimental: strip shared bins from the mel mapping (lower band keeps them).
    pub deduplicate: bool,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_multiplier: usize,
    pub mask_hidden_multiplier: usize,
    pub normalize_input: bool,
    pub init_seed: u64,
    pub train: TrainConfig,
    /// Length of the synthetic track used by `train --fixture`.
    pub fixture_seconds: f64,
    pub chunk_seconds: f64,
    pub jobs: usize,
    pub sample_format: SampleFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        let o = OverfitConfig::default();
        Self {
            stem: o.stem,
            mode: o.mode,
            n_bands: o.n_bands,
            mapping_file: None,
            deduplicate: false,
            embed_dim: o.embed_dim,
            heads: o.heads,
            blocks: o.blocks,
            ffn_multiplier: 4,
            mask_hidden_multiplier: o.mask_hidden_multiplier,
            normalize_input: true,
            init_seed: o.init_seed,
            train: o.train,
            fixture_seconds: 1.0,
            chunk_seconds: 4.0,
            jobs: 1,
            sample_format: SampleFormat::Float32,
        }
    }
}

impl RunConfig {
    /// Loads `file` (if any) and applies `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        // nested sections default to the run defaults, not their own
        let mut doc = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let user: Value = serde_json::from_str(&text).map_err(|e| Usage(format!("config {}: {e}", p.display())))?;
            if !user.is_object() {
                bail!(Usage(format!("config {} is not a JSON object", p.display())));
            }
            merge(&mut doc, user);
        }
        for (key, value) in overrides {
            set_path(&mut doc, key, value.clone())?;
        }
        let config: RunConfig = serde_json::from_value(doc).map_err(|e| Usage(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| Usage(e.to_string()))?;
        if self.jobs == 0 {
            bail!(Usage("jobs must be at least 1".into()));
        }
        if !(self.chunk_seconds > 0.0 && self.fixture_seconds > 0.0) {
            bail!(Usage("chunk_seconds and fixture_seconds must be positive".into()));
        }
        if self.stem.is_empty() || self.stem == melsep_core::data_io::MIXTURE {
            bail!(Usage(format!("invalid stem name {:?}", self.stem)));
        }
        Ok(())
    }

    pub fn mapping(&self) -> Result<BandMapping> {
        let m = self.base_mapping()?;
        if self.deduplicate && m.mode() == MappingMode::MelOverlapping {
            return Ok(deduplicate(&m).map_err(|e| Usage(e.to_string()))?);
        }
        Ok(m)
    }

    fn base_mapping(&self) -> Result<BandMapping> {
        match &self.mapping_file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading mapping {}", p.display()))?;
                Ok(BandMapping::from_json(&text).map_err(|e| Usage(format!("mapping {}: {e}", p.display())))?)
            }
            None => Ok(default_mapping(self.mode, self.n_bands).map_err(|e| Usage(e.to_string()))?),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::desk(WindowConfig::default(), self.mapping()?);
        c.embed_dim = self.embed_dim;
        c.heads = self.heads;
        c.blocks = self.blocks;
        c.ffn_multiplier = self.ffn_multiplier;
        c.mask_hidden_multiplier = self.mask_hidden_multiplier;
        c.normalize_input = self.normalize_input;
        c.precision = self.train.precision;
        c.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(c)
    }

    /// Even chunk length in samples.
    pub fn chunk_len(&self, sample_rate: u32) -> usize {
        let n = (self.chunk_seconds * sample_rate as f64).round() as usize;
        (n + n % 2).max(2)
    }
}

/// Parses `key.path=value`; the value is JSON if it parses, else a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| Usage(format!("override {s:?} is not key=value")))?;
    if key.is_empty() {
        bail!(Usage(format!("override {s:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Usage(format!("override {key}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert_eq!(RunConfig::resolve(None, &[]).unwrap(), c);
    }

    #[test]
    fn overrides_apply_in_order() {
        let o = vec![
            parse_override("train.steps=7").unwrap(),
            parse_override("stem=bass").unwrap(),
            parse_override("train.steps=9").unwrap(),
        ];
        let c = RunConfig::resolve(None, &o).unwrap();
        assert_eq!(c.train.steps, 9);
        assert_eq!(c.stem, "bass");
        assert_eq!(c.train.learning_rate, RunConfig::default().train.learning_rate);
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, json!({"jobs": 3, "train": {"steps": 4}}).to_string()).unwrap();
        let c = RunConfig::resolve(Some(&p), &[("jobs".into(), json!(2))]).unwrap();
        assert_eq!((c.jobs, c.train.steps), (2, 4));
        assert_eq!(c.train.learning_rate, RunConfig::default().train.learning_rate);
        std::fs::write(&p, "[1]").unwrap();
        assert!(RunConfig::resolve(Some(&p), &[]).is_err());
    }

    #[test]
    fn unknown_and_invalid_rejected() {
        for bad in ["colour=3", "train.stepz=3", "jobs=0", "train.learning_rate=-1", "stem=mixture"] {
            let o = vec![parse_override(bad).unwrap()];
            let err = RunConfig::resolve(None, &o).unwrap_err();
            assert!(err.downcast_ref::<Usage>().is_some(), "{bad}: {err}");
        }
        assert!(parse_override("nokey").is_err());
        assert!(RunConfig::resolve(None, &[("stem.x".into(), json!(1))]).is_err());
    }

    #[test]
    fn shipped_configs_load() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let default = RunConfig::resolve(Some(&root.join("default.json")), &[]).unwrap();
        assert_eq!(default, RunConfig::default());
        let desk = RunConfig::resolve(Some(&root.join("desk.json")), &[]).unwrap();
        assert_eq!((desk.embed_dim, desk.train.batch_size), (64, 4));
        desk.model_config().unwrap();
        let dedup = RunConfig { deduplicate: true, ..RunConfig::default() }.mapping().unwrap();
        assert_eq!(dedup.mode(), MappingMode::BandsplitDisjoint);
        assert!(dedup.coverage().iter().all(|&k| k == 1));
        let text = std::fs::read_to_string(root.join("bandsplit_62.json")).unwrap();
        let m = melsep_core::bandmap::BandsplitSpec::from_json(&text).unwrap().into_mapping(1025).unwrap();
        assert_eq!(m.n_bands(), 62);
    }

    #[test]
    fn chunk_len_is_even() {
        let c = RunConfig { chunk_seconds: 0.5, ..RunConfig::default() };
        assert_eq!(c.chunk_len(44_101), 22_052);
        assert_eq!(c.chunk_len(44_100), 22_050);
    }
}
