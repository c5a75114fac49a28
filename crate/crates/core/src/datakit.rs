//! Clip manifests, evaluation protocols and the synthetic audio-visual
//! dataset that stands in for real interview footage.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Scalar, Tensor};

pub const MIN_DURATION: f64 = 2.0;
pub const MAX_DURATION: f64 = 19.0;

/// Named binary annotation features split by modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureAlphabet {
    pub name: String,
    pub visual: Vec<String>,
    pub audio: Vec<String>,
}

const VISUAL_FEATURES: [&str; 25] = [
    "smile",
    "laugh",
    "scowl",
    "eyebrows_frowning",
    "eyebrows_raising",
    "eyes_exaggerated_opening",
    "eyes_closing_both",
    "eyes_closing_one",
    "eyes_closing_repeated",
    "gaze_interlocutor",
    "gaze_up",
    "gaze_down",
    "gaze_sideways",
    "mouth_open",
    "mouth_closed",
    "lips_corners_up",
    "lips_corners_down",
    "lips_protruded",
    "lips_retracted",
    "head_single_nod",
    "head_repeated_nods",
    "head_move_forward",
    "head_move_backward",
    "head_tilt",
    "head_side_turn",
];

const AUDIO_FEATURES: [&str; 5] = ["pitch_rising", "pitch_falling", "speaking_fast", "speaking_slow", "pauses"];

impl FeatureAlphabet {
    /// 25 facial and 5 vocal features.
    pub fn mumin30() -> Self {
        Self::from_counts("mumin30", 25)
    }

    /// 20 facial and 5 vocal features.
    pub fn mumin25() -> Self {
        Self::from_counts("mumin25", 20)
    }

    fn from_counts(name: &str, visual: usize) -> Self {
        Self {
            name: name.into(),
            visual: VISUAL_FEATURES[..visual].iter().map(|s| s.to_string()).collect(),
            audio: AUDIO_FEATURES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mumin30" => Ok(Self::mumin30()),
            "mumin25" => Ok(Self::mumin25()),
            other => Err(Error::Config(format!("unknown feature alphabet `{other}` (expected mumin30 or mumin25)"))),
        }
    }

    /// Visual names then audio names; the order of auxiliary labels.
    pub fn names(&self) -> Vec<&str> {
        self.visual.iter().chain(&self.audio).map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.visual.len() + self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature name → `"visual"` or `"audio"`.
    pub fn groups(&self) -> BTreeMap<String, String> {
        let v = self.visual.iter().map(|f| (f.clone(), "visual".to_string()));
        let a = self.audio.iter().map(|f| (f.clone(), "audio".to_string()));
        v.chain(a).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    pub subject_id: String,
    pub gender: Gender,
    pub duration_s: f64,
    /// 1 = deception, 0 = truth.
    pub label: u8,
    pub annotations: BTreeMap<String, u8>,
}

impl ClipRecord {
    /// Auxiliary labels in alphabet order.
    pub fn aux_labels(&self, alphabet: &FeatureAlphabet) -> Result<Vec<u8>> {
        alphabet
            .names()
            .iter()
            .map(|n| {
                self.annotations
                    .get(*n)
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("clip {} lacks annotation {n}", self.clip_id)))
            })
            .collect()
    }

    /// Returns the offending field and message on failure.
    fn check(&self, alphabet: &FeatureAlphabet) -> std::result::Result<(), (&'static str, String)> {
        if self.clip_id.is_empty() {
            return Err(("clip_id", "must be non-empty".into()));
        }
        if self.subject_id.is_empty() {
            return Err(("subject_id", "must be non-empty".into()));
        }
        if !(MIN_DURATION..=MAX_DURATION).contains(&self.duration_s) {
            return Err((
                "duration_s",
                format!("{} outside [{MIN_DURATION}, {MAX_DURATION}]", self.duration_s),
            ));
        }
        if self.label > 1 {
            return Err(("label", format!("{} is not 0 or 1", self.label)));
        }
        let keys: BTreeSet<&str> = self.annotations.keys().map(String::as_str).collect();
        let want: BTreeSet<&str> = alphabet.names().into_iter().collect();
        if keys != want {
            let missing: Vec<&str> = want.difference(&keys).copied().collect();
            let extra: Vec<&str> = keys.difference(&want).copied().collect();
            return Err((
                "annotations",
                format!("keys do not match alphabet {} (missing {missing:?}, unexpected {extra:?})", alphabet.name),
            ));
        }
        if let Some((k, v)) = self.annotations.iter().find(|(_, &v)| v > 1) {
            return Err(("annotations", format!("{k} = {v} is not 0 or 1")));
        }
        Ok(())
    }
}

/// Pulls the field name out of a serde message such as "missing field `x`".
fn serde_field(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("record").to_string()
}

pub fn load_manifest(path: &Path, alphabet: &FeatureAlphabet) -> Result<Vec<ClipRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |field: &str, message: String| Error::Schema {
            path: path.to_path_buf(),
            line: lineno,
            field: field.to_string(),
            message,
        };
        let rec: ClipRecord = serde_json::from_str(&line).map_err(|e| {
            let msg = e.to_string();
            schema(&serde_field(&msg), msg)
        })?;
        rec.check(alphabet).map_err(|(f, m)| schema(f, m))?;
        if !seen.insert(rec.clip_id.clone()) {
            return Err(schema("clip_id", format!("duplicate clip_id {}", rec.clip_id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub name: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl ProtocolSplit {
    /// Checks disjointness and that every id exists in `records`.
    pub fn validate(&self, records: &[ClipRecord]) -> Result<()> {
        let ids: BTreeSet<&str> = records.iter().map(|r| r.clip_id.as_str()).collect();
        let train: BTreeSet<&str> = self.train.iter().map(String::as_str).collect();
        if let Some(x) = self.test.iter().find(|t| train.contains(t.as_str())) {
            return Err(Error::Validation(format!("split {}: {x} is in both train and test", self.name)));
        }
        if let Some(x) = self.train.iter().chain(&self.test).find(|t| !ids.contains(t.as_str())) {
            return Err(Error::Validation(format!("split {}: unknown clip {x}", self.name)));
        }
        Ok(())
    }
}

/// Subject-disjoint (unless disabled), greedily label-stratified folds.
///
/// Records are sorted by `clip_id` first, so the result does not depend on
/// input order. Fold `i`'s split tests on fold `i` and trains on the rest.
pub fn make_folds(records: &[ClipRecord], k: usize, seed: u64, subject_disjoint: bool) -> Result<Vec<ProtocolSplit>> {
    if k < 2 {
        return Err(Error::Validation(format!("make_folds: k = {k} must be at least 2")));
    }
    let mut sorted: Vec<&ClipRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));

    // group key → (clip ids, positives)
    let mut groups: BTreeMap<&str, (Vec<&str>, usize)> = BTreeMap::new();
    for r in &sorted {
        let key = if subject_disjoint { r.subject_id.as_str() } else { r.clip_id.as_str() };
        let g = groups.entry(key).or_default();
        g.0.push(&r.clip_id);
        g.1 += usize::from(r.label);
    }
    if groups.len() < k {
        return Err(Error::Validation(format!(
            "make_folds: {} {} cannot fill {k} folds",
            groups.len(),
            if subject_disjoint { "subjects" } else { "clips" }
        )));
    }
    let mut order: Vec<(Vec<&str>, usize)> = groups.into_values().collect();
    Rng::new(derive_seed(seed, "folds")).shuffle(&mut order);
    order.sort_by(|a, b| b.0.len().cmp(&a.0.len()));

    let n = sorted.len() as f64;
    let pos = (sorted.iter().filter(|r| r.label == 1).count() as f64).max(1.0);
    let mut folds: Vec<(Vec<&str>, usize)> = vec![(Vec::new(), 0); k];
    for (ids, p) in order {
        let score = |f: &(Vec<&str>, usize)| (f.0.len() + ids.len()) as f64 / n + (f.1 + p) as f64 / pos;
        let best = (0..k)
            .min_by(|&a, &b| score(&folds[a]).total_cmp(&score(&folds[b])).then(a.cmp(&b)))
            .unwrap();
        folds[best].0.extend(ids);
        folds[best].1 += p;
    }
    Ok((0..k)
        .map(|i| {
            let mut test: Vec<String> = folds[i].0.iter().map(|s| s.to_string()).collect();
            let mut train: Vec<String> = (0..k)
                .filter(|&j| j != i)
                .flat_map(|j| folds[j].0.iter().map(|s| s.to_string()))
                .collect();
            test.sort();
            train.sort();
            ProtocolSplit { name: format!("fold{}", i + 1), train, test }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolOutput {
    pub splits: Vec<ProtocolSplit>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Membership of a closed duration interval.
pub fn duration_bucket(d: f64) -> Option<&'static str> {
    if (2.0..=4.0).contains(&d) {
        Some("short")
    } else if (5.0..=10.0).contains(&d) {
        Some("long")
    } else {
        None
    }
}

/// Short (2–4 s) and long (5–10 s) buckets, each split train/test by fold 1.
pub fn duration_protocol(records: &[ClipRecord], seed: u64, subject_disjoint: bool) -> Result<ProtocolOutput> {
    let fold1 = make_folds(records, 3, seed, subject_disjoint)?.remove(0);
    let test: BTreeSet<&str> = fold1.test.iter().map(String::as_str).collect();
    let mut splits = Vec::new();
    let mut warnings = Vec::new();
    for name in ["short", "long"] {
        let mut ids: Vec<&str> = records
            .iter()
            .filter(|r| duration_bucket(r.duration_s) == Some(name))
            .map(|r| r.clip_id.as_str())
            .collect();
        ids.sort();
        if ids.is_empty() {
            warnings.push(format!("{name} bucket is empty"));
        }
        let (te, tr): (Vec<&str>, Vec<&str>) = ids.into_iter().partition(|id| test.contains(id));
        let own = |v: Vec<&str>| v.into_iter().map(String::from).collect();
        splits.push(ProtocolSplit { name: name.into(), train: own(tr), test: own(te) });
    }
    Ok(ProtocolOutput { splits, warnings })
}

/// Male and female splits. Within-gender by default: each gender's clips are
/// split by their own fold 1. With `cross`, each split trains on one gender
/// and tests on the other (named by the test gender).
pub fn gender_protocol(records: &[ClipRecord], seed: u64, subject_disjoint: bool, cross: bool) -> Result<ProtocolOutput> {
    let subset = |g: Gender| -> Vec<ClipRecord> { records.iter().filter(|r| r.gender == g).cloned().collect() };
    let ids = |v: &[ClipRecord]| -> Vec<String> {
        let mut ids: Vec<String> = v.iter().map(|r| r.clip_id.clone()).collect();
        ids.sort();
        ids
    };
    let (male, female) = (subset(Gender::M), subset(Gender::F));
    let mut splits = Vec::new();
    let mut warnings = Vec::new();
    for (name, own, other) in [("male", &male, &female), ("female", &female, &male)] {
        if cross {
            splits.push(ProtocolSplit { name: name.into(), train: ids(other), test: ids(own) });
        } else if own.is_empty() {
            warnings.push(format!("{name} subset is empty"));
            splits.push(ProtocolSplit { name: name.into(), train: Vec::new(), test: Vec::new() });
        } else {
            let mut s = make_folds(own, 3, seed, subject_disjoint)?.remove(0);
            s.name = name.into();
            splits.push(s);
        }
    }
    Ok(ProtocolOutput { splits, warnings })
}

pub type SplitsFile = BTreeMap<String, TrainTest>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainTest {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub fn splits_file(splits: &[ProtocolSplit]) -> SplitsFile {
    splits
        .iter()
        .map(|s| (s.name.clone(), TrainTest { train: s.train.clone(), test: s.test.clone() }))
        .collect()
}

pub fn write_splits(path: &Path, splits: &[ProtocolSplit]) -> Result<()> {
    let s = serde_json::to_string_pretty(&splits_file(splits))? + "\n";
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_splits(path: &Path) -> Result<Vec<ProtocolSplit>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: SplitsFile = serde_json::from_str(&s)?;
    Ok(f.into_iter().map(|(name, tt)| ProtocolSplit { name, train: tt.train, test: tt.test }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// `label = z_v ⊕ z_a`; neither modality alone carries the label.
    Xor,
    /// `z_v = z_a = label`.
    Aligned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub mode: SynthMode,
    /// Standard deviation of additive Gaussian noise on frames and waves.
    pub noise: f64,
    /// Probability that an auxiliary label disagrees with its latent.
    pub flip_rate: f64,
    pub n_subjects: usize,
    /// Share of subjects recorded as male.
    pub male_fraction: f64,
    /// Per-clip gain is drawn from `[1 − jitter, 1 + jitter]`.
    pub gain_jitter: f64,
    pub alphabet: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_clips: 2000,
            mode: SynthMode::Xor,
            noise: 0.3,
            flip_rate: 0.1,
            n_subjects: 200,
            male_fraction: 141.0 / 213.0,
            gain_jitter: 0.25,
            alphabet: "mumin25".into(),
        }
    }
}

/// One generated clip with its media and latent bits.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub record: ClipRecord,
    pub frames: Tensor<f32>,
    pub wave: Tensor<f32>,
    pub z_v: u8,
    pub z_a: u8,
    pub aux: Vec<u8>,
}

/// Horizontal stripes for `z = 0`, vertical for `z = 1`, one-pixel period.
fn stripe(z: u8, row: usize, col: usize) -> f64 {
    let k = if z == 0 { row } else { col };
    if k % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Cycles per sample of the tone for each audio latent.
const TONE: [f64; 2] = [0.05, 0.17];

fn subject_gender(subject: usize, n_subjects: usize, male_fraction: f64) -> Gender {
    if (subject as f64) < (male_fraction * n_subjects as f64).round() {
        Gender::M
    } else {
        Gender::F
    }
}

/// Deterministic duration cycling through `[2, 19]` s in 0.1 s steps.
fn cycled_duration(i: usize) -> f64 {
    MIN_DURATION + ((i * 37) % 171) as f64 / 10.0
}

pub fn synth_generate(spec: &SynthSpec, cfg: &ModelConfig, seed: u64) -> Result<Vec<SynthClip>> {
    cfg.validate()?;
    let alphabet = FeatureAlphabet::preset(&spec.alphabet)?;
    if spec.n_subjects == 0 {
        return Err(Error::Config("synth: n_subjects must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.flip_rate) || !(0.0..=1.0).contains(&spec.male_fraction) {
        return Err(Error::Config("synth: flip_rate and male_fraction must lie in [0, 1]".into()));
    }
    if !(spec.noise >= 0.0) || !(0.0..1.0).contains(&spec.gain_jitter) {
        return Err(Error::Config("synth: noise must be ≥ 0 and gain_jitter in [0, 1)".into()));
    }
    let v = &cfg.visual;
    let (l, h, w, c) = (cfg.seq_len, v.frame_height, v.frame_width, v.channels);
    let t_len = cfg.audio_samples();
    let width = (spec.n_clips.max(1) - 1).to_string().len().max(4);
    let mut out = Vec::with_capacity(spec.n_clips);
    for i in 0..spec.n_clips {
        let mut rng = Rng::new(derive_seed(seed, &format!("synth.clip{i}")));
        let (z_v, z_a, label) = match spec.mode {
            SynthMode::Xor => {
                let (zv, za) = (u8::from(rng.bernoulli(0.5)), u8::from(rng.bernoulli(0.5)));
                (zv, za, zv ^ za)
            }
            SynthMode::Aligned => {
                let y = u8::from(rng.bernoulli(0.5));
                (y, y, y)
            }
        };
        let gain_v = 1.0 + spec.gain_jitter * rng.uniform_range(-1.0, 1.0);
        let gain_a = 1.0 + spec.gain_jitter * rng.uniform_range(-1.0, 1.0);

        let mut frames = Vec::with_capacity(l * h * w * c);
        for t in 0..l {
            let m = 1.0 + 0.5 * (2.0 * std::f64::consts::PI * t as f64 / l as f64).sin();
            for row in 0..h {
                for col in 0..w {
                    for _ in 0..c {
                        let x = gain_v * m * stripe(z_v, row, col) + spec.noise * rng.normal();
                        frames.push(x as f32);
                    }
                }
            }
        }
        let wave: Vec<f32> = (0..t_len)
            .map(|n| {
                let env = 0.5 + 0.5 * (std::f64::consts::PI * n as f64 / t_len as f64).sin();
                let s = gain_a * env * (2.0 * std::f64::consts::PI * TONE[z_a as usize] * n as f64).sin();
                (s + spec.noise * rng.normal()) as f32
            })
            .collect();

        let mut annotations = BTreeMap::new();
        let mut aux = Vec::with_capacity(alphabet.len());
        for (name, z) in alphabet
            .visual
            .iter()
            .map(|n| (n, z_v))
            .chain(alphabet.audio.iter().map(|n| (n, z_a)))
        {
            let bit = z ^ u8::from(rng.bernoulli(spec.flip_rate));
            annotations.insert(name.clone(), bit);
            aux.push(bit);
        }
        let subject = i % spec.n_subjects;
        let record = ClipRecord {
            clip_id: format!("clip{i:0width$}"),
            subject_id: format!("subj{subject:03}"),
            gender: subject_gender(subject, spec.n_subjects, spec.male_fraction),
            duration_s: cycled_duration(i),
            label,
            annotations,
        };
        out.push(SynthClip {
            record,
            frames: Tensor::new(vec![l, h, w, c], frames)?,
            wave: Tensor::new(vec![t_len], wave)?,
            z_v,
            z_a,
            aux,
        });
    }
    Ok(out)
}

/// A manifest with the corpus statistics of the reference dataset: 1,675
/// clips from 213 subjects (141 male, 72 female), 899 deceptive and 776
/// truthful. Annotations are random bits.
pub fn reference_like_manifest(seed: u64) -> Vec<ClipRecord> {
    let (n, subjects, males, deceptive) = (1675usize, 213usize, 141usize, 899usize);
    let alphabet = FeatureAlphabet::mumin30();
    let mut rng = Rng::new(derive_seed(seed, "reference_manifest"));
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < deceptive)).collect();
    rng.shuffle(&mut labels);
    (0..n)
        .map(|i| {
            let subject = i % subjects;
            let annotations = alphabet
                .names()
                .into_iter()
                .map(|f| (f.to_string(), u8::from(rng.bernoulli(0.5))))
                .collect();
            ClipRecord {
                clip_id: format!("clip{i:04}"),
                subject_id: format!("subj{subject:03}"),
                gender: if subject < males { Gender::M } else { Gender::F },
                duration_s: (MIN_DURATION * 10.0 + rng.below(171) as f64) / 10.0,
                label: labels[i],
                annotations,
            }
        })
        .collect()
}

/// Sidecar describing the raw media files of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaIndex {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub clip_ids: Vec<String>,
    pub frame_shape: Vec<usize>,
    pub wave_len: usize,
    pub frames_file: String,
    pub waves_file: String,
    pub alphabet: FeatureAlphabet,
    pub spec: SynthSpec,
    pub seed: u64,
    pub latents: Vec<[u8; 2]>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MEDIA_FILE: &str = "media.json";

fn write_f32(path: &Path, tensors: &mut dyn Iterator<Item = &Tensor<f32>>) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.jsonl`, `frames.bin`, `waves.bin` and `media.json` into `dir`.
pub fn write_synth(dir: &Path, clips: &[SynthClip], spec: &SynthSpec, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records: Vec<ClipRecord> = clips.iter().map(|c| c.record.clone()).collect();
    write_manifest(&dir.join(MANIFEST_FILE), &records)?;
    write_f32(&dir.join("frames.bin"), &mut clips.iter().map(|c| &c.frames))?;
    write_f32(&dir.join("waves.bin"), &mut clips.iter().map(|c| &c.wave))?;
    let index = MediaIndex {
        format: "pecl-synth-media".into(),
        version: 1,
        dtype: "f32le".into(),
        clip_ids: records.iter().map(|r| r.clip_id.clone()).collect(),
        frame_shape: clips.first().map_or_else(Vec::new, |c| c.frames.shape().to_vec()),
        wave_len: clips.first().map_or(0, |c| c.wave.len()),
        frames_file: "frames.bin".into(),
        waves_file: "waves.bin".into(),
        alphabet: FeatureAlphabet::preset(&spec.alphabet)?,
        spec: spec.clone(),
        seed,
        latents: clips.iter().map(|c| [c.z_v, c.z_a]).collect(),
    };
    let path = dir.join(MEDIA_FILE);
    fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))
}

/// Loads only the manifest of `dir`. The alphabet comes from the media
/// sidecar when present and is `mumin30` otherwise.
pub fn load_records(dir: &Path) -> Result<(Vec<ClipRecord>, FeatureAlphabet)> {
    let index_path = dir.join(MEDIA_FILE);
    let alphabet = if index_path.is_file() {
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        serde_json::from_str::<MediaIndex>(&text)?.alphabet
    } else {
        FeatureAlphabet::mumin30()
    };
    Ok((load_manifest(&dir.join(MANIFEST_FILE), &alphabet)?, alphabet))
}

/// A training item.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub clip_id: String,
    pub frames: Tensor<f32>,
    pub wave: Tensor<f32>,
    pub label: u8,
    pub aux: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<ClipRecord>,
    pub samples: Vec<Sample>,
    pub alphabet: FeatureAlphabet,
}

impl Dataset {
    pub fn from_synth(clips: &[SynthClip], alphabet: FeatureAlphabet) -> Self {
        Self {
            records: clips.iter().map(|c| c.record.clone()).collect(),
            samples: clips
                .iter()
                .map(|c| Sample {
                    clip_id: c.record.clip_id.clone(),
                    frames: c.frames.clone(),
                    wave: c.wave.clone(),
                    label: c.record.label,
                    aux: c.aux.clone(),
                })
                .collect(),
            alphabet,
        }
    }

    /// Loads a directory written by [`write_synth`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(Error::io(
                &manifest,
                std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
            ));
        }
        let index_path = dir.join(MEDIA_FILE);
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: MediaIndex = serde_json::from_str(&text)?;
        let records = load_manifest(&manifest, &index.alphabet)?;
        let by_id: BTreeMap<&str, &ClipRecord> = records.iter().map(|r| (r.clip_id.as_str(), r)).collect();
        let frame_len: usize = index.frame_shape.iter().product();
        let read = |name: &str, per: usize| -> Result<Vec<f32>> {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != per * index.clip_ids.len() * 4 {
                return Err(Error::Validation(format!(
                    "{}: expected {} bytes, found {}",
                    path.display(),
                    per * index.clip_ids.len() * 4,
                    bytes.len()
                )));
            }
            Ok(bytes.chunks_exact(4).map(f32::read_le).collect())
        };
        let frames = read(&index.frames_file, frame_len)?;
        let waves = read(&index.waves_file, index.wave_len)?;
        let mut samples = Vec::with_capacity(index.clip_ids.len());
        for (i, id) in index.clip_ids.iter().enumerate() {
            let rec = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Validation(format!("media lists clip {id} absent from the manifest")))?;
            samples.push(Sample {
                clip_id: id.clone(),
                frames: Tensor::new(index.frame_shape.clone(), frames[i * frame_len..(i + 1) * frame_len].to_vec())?,
                wave: Tensor::new(vec![index.wave_len], waves[i * index.wave_len..(i + 1) * index.wave_len].to_vec())?,
                label: rec.label,
                aux: rec.aux_labels(&index.alphabet)?,
            });
        }
        Ok(Self { records, samples, alphabet: index.alphabet })
    }

    /// Samples named by `ids`, in that order.
    pub fn subset(&self, ids: &[String]) -> Result<Vec<&Sample>> {
        let by_id: BTreeMap<&str, &Sample> = self.samples.iter().map(|s| (s.clip_id.as_str(), s)).collect();
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("split references unknown clip {id}")))
            })
            .collect()
    }
}
