//! Ablation sweep: one training run per variant along each axis, all on
//! fold1 of the same data, tabulated side by side.

use clap::ValueEnum;
use pecl_core::config::{AdapterKind, Placement};
use pecl_core::datakit::Dataset;
use pecl_core::{ModelConfig, Result};
use serde::{Deserialize, Serialize};

use crate::commands::{params_output, train_split};
use crate::experiment::{ExperimentConfig, Protocol};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Placement,
    Adapter,
    Pavf,
    Depth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: String,
    pub trainable: usize,
    pub total: usize,
    pub final_loss: f64,
    pub fused_acc: f64,
    pub fused_auc: Option<f64>,
    pub audio_acc: f64,
    pub visual_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub split: String,
    pub rows: Vec<SweepRow>,
    pub experiment: ExperimentConfig,
}

type Variant = (String, Box<dyn Fn(&mut ModelConfig)>);

/// Variants of one axis. Depth changes the layer count and keeps at most four
/// PAVF taps so that shallow encoders stay valid.
pub fn variants(axis: Axis) -> Vec<Variant> {
    match axis {
        Axis::Placement => Placement::ALL
            .iter()
            .map(|&p| -> Variant { (snake(&p), Box::new(move |c| c.placement = p)) })
            .collect(),
        Axis::Adapter => [AdapterKind::None, AdapterKind::Ut, AdapterKind::Bottleneck]
            .into_iter()
            .map(|k| -> Variant { (snake(&k), Box::new(move |c| c.adapter = k)) })
            .collect(),
        Axis::Pavf => (1..=4)
            .map(|n| -> Variant { (n.to_string(), Box::new(move |c| c.num_pavf = n)) })
            .collect(),
        Axis::Depth => (1..=6)
            .map(|d| -> Variant {
                (
                    d.to_string(),
                    Box::new(move |c| {
                        c.num_layers = d;
                        c.num_pavf = c.num_pavf.min(d).min(4);
                    }),
                )
            })
            .collect(),
    }
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

/// Runs every variant of `axes` on the experiment's first fold.
pub fn run_sweep(exp: &ExperimentConfig, ds: &Dataset, axes: &[Axis], verbose: bool) -> Result<SweepReport> {
    let mut base = exp.clone();
    base.protocol = Protocol::Fold1;
    let (splits, _) = base.splits(ds)?;
    let split = &splits[0];
    let mut rows = Vec::new();
    for &axis in axes {
        for (value, apply) in variants(axis) {
            let mut run = base.clone();
            apply(&mut run.model);
            run.model.validate()?;
            if verbose {
                eprintln!("sweep {} = {value}", snake(&axis));
            }
            let params = params_output(&run)?.report;
            let r = train_split(&run, ds, split, false)?;
            let m = &r.metrics.metrics;
            rows.push(SweepRow {
                axis,
                value,
                trainable: params.trainable,
                total: params.total,
                final_loss: r.log.epochs.last().map_or(f64::NAN, |e| e.loss),
                fused_acc: m.fused.acc,
                fused_auc: m.fused.auc,
                audio_acc: m.audio.acc,
                visual_acc: m.visual.acc,
            });
        }
    }
    Ok(SweepReport { seed: exp.seed, split: split.name.clone(), rows, experiment: base })
}

impl SweepReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<10} {:<15} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "axis", "value", "trainable", "total", "loss", "acc", "auc", "audio", "visual"
        );
        for r in &self.rows {
            let auc = r.fused_auc.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
            s.push_str(&format!(
                "{:<10} {:<15} {:>10} {:>10} {:>8.4} {:>8.4} {:>8} {:>8.4} {:>8.4}\n",
                snake(&r.axis),
                r.value,
                r.trainable,
                r.total,
                r.final_loss,
                r.fused_acc,
                auc,
                r.audio_acc,
                r.visual_acc
            ));
        }
        s
    }
}
