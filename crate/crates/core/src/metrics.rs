//! Classification metrics and annotator agreement.
//!
//! Deception (label 1) is the positive class throughout.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair<A, B>(a: &[A], b: &[B], what: &str) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Validation(format!("{what}: empty input")));
    }
    if a.len() != b.len() {
        return Err(Error::Validation(format!("{what}: lengths differ ({} vs {})", a.len(), b.len())));
    }
    Ok(())
}

fn check_binary(v: &[u8], what: &str) -> Result<()> {
    match v.iter().find(|&&x| x > 1) {
        Some(x) => Err(Error::Validation(format!("{what}: label {x} is not binary"))),
        None => Ok(()),
    }
}

pub fn accuracy(pred: &[u8], y: &[u8]) -> Result<f64> {
    check_pair(pred, y, "accuracy")?;
    let hits = pred.iter().zip(y).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / y.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn confusion(pred: &[u8], y: &[u8]) -> Result<Confusion> {
    check_pair(pred, y, "confusion")?;
    check_binary(pred, "confusion")?;
    check_binary(y, "confusion")?;
    let mut c = Confusion::default();
    for (&p, &t) in pred.iter().zip(y) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// F1 of the positive class; 0 when precision or recall is undefined.
pub fn f1(pred: &[u8], y: &[u8]) -> Result<f64> {
    let c = confusion(pred, y)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if c.tp == 0 || denom == 0 { 0.0 } else { 2.0 * c.tp as f64 / denom as f64 })
}

/// Probability that a random positive outranks a random negative, ties ½.
///
/// Counts pairs exactly in integers (doubled to keep halves integral), so the
/// result equals the all-pairs definition bit for bit.
pub fn auc(scores: &[f64], y: &[u8]) -> Result<f64> {
    check_pair(scores, y, "auc")?;
    check_binary(y, "auc")?;
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Validation(format!("auc: score {s} is not a number")));
    }
    let pos = y.iter().filter(|&&t| t == 1).count();
    let neg = y.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("auc needs both classes present".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney count: each won pair adds 2, each tie 1.
    let mut twice: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let group_pos = idx[i..j].iter().filter(|&&k| y[k] == 1).count() as u128;
        let group_neg = (j - i) as u128 - group_pos;
        twice += group_pos * (2 * neg_below + group_neg);
        neg_below += group_neg;
        i = j;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// `(p_o − p_e) / (1 − p_e)` with marginal-product chance agreement.
pub fn cohen_kappa<L: Ord + Clone>(a: &[L], b: &[L]) -> Result<f64> {
    check_pair(a, b, "cohen_kappa")?;
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let p_o = agree / n;
    let mut ma: BTreeMap<&L, usize> = BTreeMap::new();
    let mut mb: BTreeMap<&L, usize> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *ma.entry(x).or_default() += 1;
        *mb.entry(y).or_default() += 1;
    }
    let p_e: f64 = ma
        .iter()
        .map(|(k, &ca)| ca as f64 * mb.get(k).copied().unwrap_or(0) as f64)
        .sum::<f64>()
        / (n * n);
    if p_e >= 1.0 {
        // Both annotators used one identical label throughout.
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub acc: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub f1: f64,
    /// `None` when the evaluated set holds a single class.
    pub auc: Option<f64>,
    pub n_items: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskMetrics>,
}

impl MetricsReport {
    /// Thresholds probabilities at ½.
    pub fn from_scores(scores: &[f64], y: &[u8]) -> Result<Self> {
        let pred = threshold(scores);
        Ok(Self {
            acc: accuracy(&pred, y)?,
            f1: f1(&pred, y)?,
            auc: undefined_as_none(auc(scores, y))?,
            n_items: y.len(),
            tasks: Vec::new(),
        })
    }

    /// Mean accuracy over the per-task breakdown.
    pub fn mean_task_acc(&self) -> Option<f64> {
        if self.tasks.is_empty() {
            None
        } else {
            Some(self.tasks.iter().map(|t| t.acc).sum::<f64>() / self.tasks.len() as f64)
        }
    }

    pub fn to_text(&self) -> String {
        let auc = |a: Option<f64>| a.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>8} {:>8} {:>8}", "task", "acc", "f1", "auc");
        let _ = writeln!(s, "{:<28} {:>8.4} {:>8.4} {:>8}", "deception", self.acc, self.f1, auc(self.auc));
        for t in &self.tasks {
            let _ = writeln!(s, "{:<28} {:>8.4} {:>8.4} {:>8}", t.task, t.acc, t.f1, auc(t.auc));
        }
        let _ = writeln!(s, "items: {}", self.n_items);
        s
    }
}

pub fn threshold(scores: &[f64]) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= 0.5)).collect()
}

fn undefined_as_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn task_metrics(task: &str, scores: &[f64], y: &[u8]) -> Result<TaskMetrics> {
    let pred = threshold(scores);
    Ok(TaskMetrics {
        task: task.to_string(),
        acc: accuracy(&pred, y)?,
        f1: f1(&pred, y)?,
        auc: undefined_as_none(auc(scores, y))?,
    })
}

/// One annotator's binary codes: item id → feature name → 0/1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorTable {
    pub annotator: String,
    pub items: BTreeMap<String, BTreeMap<String, u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureKappa {
    pub feature: String,
    pub group: String,
    /// Mean over annotator pairs.
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub annotators: Vec<String>,
    pub n_items: usize,
    pub features: Vec<FeatureKappa>,
    /// Mean κ over the features of each modality group.
    pub group_means: BTreeMap<String, f64>,
    /// Mean κ over all features, i.e. the feature-count-weighted mean of the groups.
    pub overall: f64,
}

impl CalibrationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<32} {:<8} {:>8}", "feature", "group", "kappa");
        for f in &self.features {
            let _ = writeln!(s, "{:<32} {:<8} {:>8.4}", f.feature, f.group, f.kappa);
        }
        for (g, m) in &self.group_means {
            let _ = writeln!(s, "{:<32} {:<8} {:>8.4}", format!("mean ({g})"), g, m);
        }
        let _ = writeln!(s, "{:<32} {:<8} {:>8.4}", "overall", "", self.overall);
        s
    }
}

/// Pairwise κ per feature averaged over annotator pairs, then over features
/// per group and overall. `groups` maps each feature to its modality group;
/// features absent from it are reported under `other`.
pub fn kappa_calibration(tables: &[AnnotatorTable], groups: &BTreeMap<String, String>) -> Result<CalibrationReport> {
    if tables.len() < 2 {
        return Err(Error::Validation("kappa calibration needs at least two annotators".into()));
    }
    let items: BTreeSet<&String> = tables[0].items.keys().collect();
    for t in &tables[1..] {
        let other: BTreeSet<&String> = t.items.keys().collect();
        if other != items {
            let missing: Vec<String> = items
                .symmetric_difference(&other)
                .map(|s| s.to_string())
                .collect();
            return Err(Error::Validation(format!(
                "annotators {} and {} disagree on items: {}",
                tables[0].annotator,
                t.annotator,
                missing.join(", ")
            )));
        }
    }
    if items.is_empty() {
        return Err(Error::Validation("kappa calibration: no items".into()));
    }
    let mut features: BTreeSet<&String> = BTreeSet::new();
    for t in tables {
        for codes in t.items.values() {
            features.extend(codes.keys());
        }
    }
    let column = |t: &AnnotatorTable, f: &str| -> Result<Vec<u8>> {
        items
            .iter()
            .map(|&id| {
                t.items[id].get(f).copied().ok_or_else(|| {
                    Error::Validation(format!("annotator {} lacks feature {f} on item {id}", t.annotator))
                })
            })
            .collect()
    };
    let mut out = Vec::new();
    for &f in &features {
        let cols: Vec<Vec<u8>> = tables.iter().map(|t| column(t, f)).collect::<Result<_>>()?;
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..cols.len() {
            for j in i + 1..cols.len() {
                sum += cohen_kappa(&cols[i], &cols[j])?;
                pairs += 1;
            }
        }
        out.push(FeatureKappa {
            feature: f.clone(),
            group: groups.get(f).cloned().unwrap_or_else(|| "other".into()),
            kappa: sum / pairs as f64,
        });
    }
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for f in &out {
        let e = acc.entry(f.group.clone()).or_default();
        e.0 += f.kappa;
        e.1 += 1;
    }
    let group_means = acc.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect();
    let overall = out.iter().map(|f| f.kappa).sum::<f64>() / out.len() as f64;
    Ok(CalibrationReport {
        annotators: tables.iter().map(|t| t.annotator.clone()).collect(),
        n_items: items.len(),
        features: out,
        group_means,
        overall,
    })
}
