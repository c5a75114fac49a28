//! Resolved experiment configuration: preset, then config file, then flags.

use std::path::{Path, PathBuf};

use pecl_core::datakit::{
    make_folds, duration_protocol, gender_protocol, synth_generate, Dataset, FeatureAlphabet, ProtocolSplit, SynthSpec,
};
use pecl_core::rng::derive_seed;
use pecl_core::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Fold1,
    Fold2,
    Fold3,
    Duration,
    Gender,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A directory written by `pecl synth`.
    Dir { path: PathBuf },
    /// Generated in memory from the spec and the data seed.
    Synth { spec: SynthSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataSource,
    pub protocol: Protocol,
    pub subject_disjoint: bool,
    pub cross_gender: bool,
    pub out: PathBuf,
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn from_preset(preset: &str) -> Result<Self> {
        Ok(Self {
            preset: preset.to_string(),
            seed: 0,
            model: ModelConfig::preset(preset)?,
            data: DataSource::Synth { spec: SynthSpec::default() },
            protocol: Protocol::Fold1,
            subject_disjoint: true,
            cross_gender: false,
            out: PathBuf::from("runs"),
            record_wall_time: false,
        })
    }

    /// Starts from `preset` and deep-merges the JSON file over it, so a file
    /// only needs the keys it changes.
    pub fn load(preset: &str, file: Option<&Path>) -> Result<Self> {
        let base = Self::from_preset(preset)?;
        let Some(path) = file else { return Ok(base) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // A file may name its own preset, which then replaces the base.
        let base = match overlay.get("preset").and_then(Value::as_str) {
            Some(p) if p != preset => Self::from_preset(p)?,
            _ => base,
        };
        let mut merged = serde_json::to_value(&base)?;
        merge(&mut merged, overlay);
        serde_json::from_value(merged).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, "model")
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "data")
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split")
    }

    pub fn train_seed(&self) -> u64 {
        derive_seed(self.seed, "train")
    }

    /// Loads or generates the dataset and fixes `model.aux_tasks` to the
    /// alphabet size, so the echoed config is complete.
    pub fn load_data(&mut self) -> Result<Dataset> {
        let ds = match &self.data {
            DataSource::Dir { path } => Dataset::load(&dataset_dir(path))?,
            DataSource::Synth { spec } => {
                let clips = synth_generate(spec, &self.model, self.data_seed())?;
                Dataset::from_synth(&clips, FeatureAlphabet::preset(&spec.alphabet)?)
            }
        };
        self.model.aux_tasks = ds.alphabet.len();
        self.model.validate()?;
        if let Some(s) = ds.samples.first() {
            let want = self.model.audio_samples();
            if s.wave.len() != want || s.frames.shape()[0] != self.model.seq_len {
                return Err(Error::Shape(format!(
                    "dataset media (frames {:?}, {} samples) do not fit the model (L = {}, {} samples)",
                    s.frames.shape(),
                    s.wave.len(),
                    self.model.seq_len,
                    want
                )));
            }
        }
        Ok(ds)
    }

    pub fn splits(&self, ds: &Dataset) -> Result<(Vec<ProtocolSplit>, Vec<String>)> {
        let (recs, seed, sd) = (&ds.records, self.split_seed(), self.subject_disjoint);
        Ok(match self.protocol {
            Protocol::Fold1 | Protocol::Fold2 | Protocol::Fold3 => {
                let i = match self.protocol {
                    Protocol::Fold1 => 0,
                    Protocol::Fold2 => 1,
                    _ => 2,
                };
                (vec![make_folds(recs, 3, seed, sd)?.swap_remove(i)], Vec::new())
            }
            Protocol::Duration => {
                let o = duration_protocol(recs, seed, sd)?;
                (o.splits, o.warnings)
            }
            Protocol::Gender => {
                let o = gender_protocol(recs, seed, sd, self.cross_gender)?;
                (o.splits, o.warnings)
            }
        })
    }
}

/// Accepts a dataset directory or the manifest file inside it.
pub fn dataset_dir(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    } else {
        path.to_path_buf()
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // A different variant of a tagged enum replaces the old one.
                    Some(slot) if slot.is_object() && v.is_object() && slot.get("kind") == v.get("kind").or(slot.get("kind")) => {
                        merge(slot, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
