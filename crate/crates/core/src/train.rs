//! Mini-batch training and evaluation.
//!
//! Each item gets its own tape; item gradients are summed in batch order and
//! scaled by `1/B`, so results do not depend on scheduling.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::FusionMode;
use crate::datakit::Sample;
use crate::error::{Error, Result};
use crate::kernels::sigmoid;
use crate::metrics::{task_metrics, MetricsReport};
use crate::model::{ClipInput, ForwardOutput, Labels, PeclModel};
use crate::optim::Adam;
use crate::rng::{derive_seed, Rng};
use crate::tape::Tape;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fusion: FusionMode,
    /// Deception metrics of the fused prediction, with auxiliary tasks when present.
    pub fused: MetricsReport,
    pub audio: MetricsReport,
    pub visual: MetricsReport,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!(
            "fused ({:?})\n{}audio only\n{}visual only\n{}",
            self.fusion,
            self.fused.to_text(),
            self.audio.to_text(),
            self.visual.to_text()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub loss_audio: f64,
    pub loss_visual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_fusion: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EvalReport>,
    /// Only recorded on request, since it breaks byte-identical logs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.epochs {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub record_wall_time: bool,
    /// Names of the auxiliary tasks, used in per-task metrics.
    pub aux_names: Vec<String>,
}

fn labels(s: &Sample) -> Labels {
    Labels { deception: s.label, aux: s.aux.clone() }
}

fn input(s: &Sample) -> ClipInput<'_, f32> {
    ClipInput { frames: &s.frames, wave: &s.wave }
}

/// Evaluates on `samples`. `fusion` may differ from the training mode when the
/// needed heads exist: score fusion works on any model.
pub fn evaluate<T: Scalar>(
    model: &PeclModel<T>,
    samples: &[&Sample],
    fusion: FusionMode,
    score_weight: f64,
    aux_names: &[String],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Validation("evaluate: no samples".into()));
    }
    let cfg = model.config();
    if fusion != FusionMode::Score && fusion != cfg.fusion {
        return Err(Error::Config(format!(
            "model trained with {:?} fusion cannot be evaluated with {fusion:?}",
            cfg.fusion
        )));
    }
    let outs: Vec<ForwardOutput> = samples.iter().map(|s| model.forward_one(input(s))).collect::<Result<_>>()?;
    let y: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let pa: Vec<f64> = outs.iter().map(|o| sigmoid(o.logit_audio)).collect();
    let pv: Vec<f64> = outs.iter().map(|o| sigmoid(o.logit_visual)).collect();
    let fused = match fusion {
        FusionMode::Score => {
            let p = crate::model::score_fusion(&pv, &pa, score_weight)?;
            MetricsReport::from_scores(&p, &y)?
        }
        _ => {
            let logits: Vec<&Vec<f64>> = outs
                .iter()
                .map(|o| o.logits_fusion.as_ref().expect("fusion logits"))
                .collect();
            let p: Vec<f64> = logits.iter().map(|l| sigmoid(l[0])).collect();
            let mut report = MetricsReport::from_scores(&p, &y)?;
            if cfg.multitask {
                for k in 0..cfg.aux_tasks {
                    let pk: Vec<f64> = logits.iter().map(|l| sigmoid(l[k + 1])).collect();
                    let yk: Vec<u8> = samples.iter().map(|s| s.aux[k]).collect();
                    let name = aux_names.get(k).cloned().unwrap_or_else(|| format!("aux{k}"));
                    report.tasks.push(task_metrics(&name, &pk, &yk)?);
                }
            }
            report
        }
    };
    Ok(EvalReport {
        fusion,
        fused,
        audio: MetricsReport::from_scores(&pa, &y)?,
        visual: MetricsReport::from_scores(&pv, &y)?,
    })
}

/// Trains `model` in place. When `eval_set` is given, it is evaluated after
/// every epoch and the metrics are logged.
pub fn train<T: Scalar>(
    model: &mut PeclModel<T>,
    train_set: &[&Sample],
    eval_set: Option<&[&Sample]>,
    seed: u64,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainingLog, Adam<T>)> {
    if train_set.is_empty() {
        return Err(Error::Validation("train: empty training set".into()));
    }
    let cfg = model.config().clone();
    let batch = cfg.optim.batch_size;
    let mut opt = Adam::new(&cfg.optim);
    let mut log = TrainingLog::default();
    let shuffle_seed = derive_seed(seed, "shuffle");
    let mut step = 0usize;
    model.params.zero_grad();
    for epoch in 1..=cfg.optim.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::new(derive_seed(shuffle_seed, &format!("epoch{epoch}"))).shuffle(&mut order);
        let mut sums = [0.0f64; 4];
        let mut has_fusion = false;
        for chunk in order.chunks(batch) {
            step += 1;
            for &i in chunk {
                let s = train_set[i];
                let mut tape = Tape::new();
                let out = model.net.forward(&mut tape, &model.params, input(s))?;
                let loss = model.net.loss(&mut tape, &out, &labels(s))?;
                let value = tape.value(loss.total).data()[0].to_f64();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss {value} at epoch {epoch}, step {step} (clip {})",
                        s.clip_id
                    )));
                }
                sums[0] += value;
                sums[1] += tape.value(loss.audio).data()[0].to_f64();
                sums[2] += tape.value(loss.visual).data()[0].to_f64();
                if let Some(f) = loss.fusion {
                    has_fusion = true;
                    sums[3] += tape.value(f).data()[0].to_f64();
                }
                tape.backward(loss.total, &mut model.params)?;
            }
            model.params.scale_grads(T::from_f64(1.0 / chunk.len() as f64));
            opt.step(&mut model.params);
            model.params.zero_grad();
        }
        let n = train_set.len() as f64;
        let metrics = match eval_set {
            Some(e) => Some(evaluate(model, e, cfg.fusion, cfg.score_weight, &opts.aux_names)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            steps: step,
            loss: sums[0] / n,
            loss_audio: sums[1] / n,
            loss_visual: sums[2] / n,
            loss_fusion: has_fusion.then(|| sums[3] / n),
            metrics,
            wall_time_s: opts.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    Ok((log, opt))
}
