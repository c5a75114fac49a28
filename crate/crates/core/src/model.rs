//! Full PECL network: tokenizers, frozen encoders with adapters, PAVF modules
//! and three classifier heads trained jointly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{FusionMode, ModelConfig};
use crate::encoders::{encode_stack, EncoderLayerParams, EncoderStyle};
use crate::error::{Error, Result};
use crate::nn::{AudioTokenizer, Linear, VisualTokenizer};
use crate::params::{Init, ParamBuilder, ParamGroup, ParamId, ParamStore};
use crate::pavf::{pavf_forward, PavfParams};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Parameter handles; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub visual_tokenizer: VisualTokenizer,
    pub audio_tokenizer: AudioTokenizer,
    pub pos_visual: ParamId,
    pub pos_audio: ParamId,
    pub visual_layers: Vec<EncoderLayerParams>,
    pub audio_layers: Vec<EncoderLayerParams>,
    pub pavf: Vec<PavfParams>,
    pub head_audio: Linear,
    pub head_visual: Linear,
    /// PAVF classifier over the concatenated fusion features.
    pub head_fusion: Option<Linear>,
    /// Classifier over concatenated pooled encoder outputs.
    pub head_concat: Option<Linear>,
}

#[derive(Debug)]
pub struct PeclModel<T> {
    pub net: Network,
    pub params: ParamStore<T>,
    pub seed: u64,
}

/// Tape handles of one item's outputs.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logit_audio: Var,
    pub logit_visual: Var,
    pub logits_fusion: Option<Var>,
    pub pavf: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logit_audio: f64,
    pub logit_visual: f64,
    pub logits_fusion: Option<Vec<f64>>,
    pub pavf: Vec<Tensor<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub deception: u8,
    pub aux: Vec<u8>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub audio: Var,
    pub visual: Var,
    pub fusion: Option<Var>,
}

/// One item's input: frames `[L, H, W, C]` and a waveform `[T]`.
#[derive(Debug, Clone, Copy)]
pub struct ClipInput<'a, S> {
    pub frames: &'a Tensor<S>,
    pub wave: &'a Tensor<S>,
}

impl Network {
    pub fn build<T: Scalar>(config: &ModelConfig, seed: u64, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut pb = ParamBuilder::new(store, seed);

        let (visual_tokenizer, pos_visual) = {
            let mut s = pb.scope("visual");
            let tok = VisualTokenizer::build(&mut s.scope("tokenizer"), &c.visual, c.dim)?;
            let pos = s.param("pos", &[c.seq_len, c.dim], Init::Normal(0.02))?;
            (tok, pos)
        };
        let (audio_tokenizer, pos_audio) = {
            let mut s = pb.scope("audio");
            let tok = AudioTokenizer::build(&mut s.scope("tokenizer"), &c.audio, c.dim)?;
            let pos = s.param("pos", &[c.seq_len, c.dim], Init::Normal(0.02))?;
            (tok, pos)
        };
        let mut stack = |name: &str, style| -> Result<Vec<EncoderLayerParams>> {
            (0..c.num_layers)
                .map(|i| EncoderLayerParams::build(&mut pb.scope(&format!("{name}.layer{i}")), c, style))
                .collect()
        };
        let visual_layers = stack("visual", EncoderStyle::PreNorm)?;
        let audio_layers = stack("audio", EncoderStyle::PostNorm)?;

        let mut pavf = Vec::new();
        if c.fusion == FusionMode::Pavf {
            let mut s = pb.scope("pavf");
            s.set_group(ParamGroup::Pavf, true);
            for tap in c.pavf_taps() {
                pavf.push(PavfParams::build(
                    &mut s.scope(&format!("tap{tap}")),
                    c.dim,
                    c.pavf_dim,
                    c.fusion_dim,
                    c.attention_axis,
                    c.ln_eps,
                )?);
            }
        }

        let mut s = pb.scope("head");
        s.set_group(ParamGroup::Classifier, true);
        let mut head = |name: &str, d_in: usize, d_out: usize| {
            let init = if c.zero_init_heads {
                Init::Zeros
            } else {
                Init::XavierUniform { fan_in: d_in, fan_out: d_out }
            };
            Linear::build(&mut s, name, d_in, d_out, init, true)
        };
        let head_audio = head("audio", c.dim, 1)?;
        let head_visual = head("visual", c.dim, 1)?;
        let head_fusion = match c.fusion {
            FusionMode::Pavf => Some(head("fusion", c.num_pavf * c.fusion_dim, c.fusion_outputs())?),
            _ => None,
        };
        let head_concat = match c.fusion {
            FusionMode::Concat => Some(head("concat", 2 * c.dim, c.fusion_outputs())?),
            _ => None,
        };

        Ok(Self {
            config: config.clone(),
            visual_tokenizer,
            audio_tokenizer,
            pos_visual,
            pos_audio,
            visual_layers,
            audio_layers,
            pavf,
            head_audio,
            head_visual,
            head_fusion,
            head_concat,
        })
    }

    /// Number of adapter modules in both stacks.
    pub fn adapter_count(&self) -> usize {
        self.visual_layers
            .iter()
            .chain(&self.audio_layers)
            .map(EncoderLayerParams::adapter_count)
            .sum()
    }

    fn tokens<T: Scalar, S: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: ClipInput<'_, S>,
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        let fs = input.frames.shape();
        if fs.first() != Some(&c.seq_len) {
            return Err(Error::Shape(format!("expected {} frames, got shape {fs:?}", c.seq_len)));
        }
        let frames = tape.constant(input.frames.cast());
        let wave = tape.constant(input.wave.cast());
        let tv = self.visual_tokenizer.forward(tape, store, frames)?;
        let pv = tape.param(store, self.pos_visual);
        let tv = tape.add(tv, pv)?;
        let ta = self.audio_tokenizer.forward(tape, store, wave, c.seq_len)?;
        let pa = tape.param(store, self.pos_audio);
        let ta = tape.add(ta, pa)?;
        Ok((tv, ta))
    }

    /// Mean over tokens as a `[1, D]` row.
    fn pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let d = tape.shape(x)[1];
        let m = tape.mean_axis(x, 0)?;
        tape.reshape(m, &[1, d])
    }

    fn encode<T: Scalar, S: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: ClipInput<'_, S>,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let (tv, ta) = self.tokens(tape, store, input)?;
        let vs = encode_stack(tape, store, &self.visual_layers, tv)?;
        let aus = encode_stack(tape, store, &self.audio_layers, ta)?;
        Ok((vs, aus))
    }

    pub fn forward<T: Scalar, S: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: ClipInput<'_, S>,
    ) -> Result<ForwardVars> {
        let (vs, aus) = self.encode(tape, store, input)?;
        let (v_last, a_last) = (*vs.last().unwrap(), *aus.last().unwrap());
        let pv = Self::pool(tape, v_last)?;
        let pa = Self::pool(tape, a_last)?;
        let logit_audio = self.head_audio.forward(tape, store, pa)?;
        let logit_visual = self.head_visual.forward(tape, store, pv)?;

        let mut pavf = Vec::new();
        let logits_fusion = match self.config.fusion {
            FusionMode::Pavf => {
                let head = self.head_fusion.as_ref().expect("pavf head");
                for (p, tap) in self.pavf.iter().zip(self.config.pavf_taps()) {
                    pavf.push(pavf_forward(tape, store, p, vs[tap], aus[tap])?);
                }
                let cat = if pavf.len() == 1 { pavf[0] } else { tape.concat(&pavf, 1)? };
                let pooled = Self::pool(tape, cat)?;
                Some(head.forward(tape, store, pooled)?)
            }
            FusionMode::Concat => {
                let head = self.head_concat.as_ref().expect("concat head");
                let cat = tape.concat(&[pv, pa], 1)?;
                Some(head.forward(tape, store, cat)?)
            }
            FusionMode::Score => None,
        };
        Ok(ForwardVars { logit_audio, logit_visual, logits_fusion, pavf })
    }

    /// `cA·L_A + cV·L_V + cF·L_F`, each term binary cross-entropy with logits.
    pub fn loss<T: Scalar>(&self, tape: &mut Tape<T>, out: &ForwardVars, labels: &Labels) -> Result<LossVars> {
        let c = &self.config;
        let y = T::from_f64(f64::from(labels.deception));
        let single = Tensor::new(vec![1, 1], vec![y])?;
        let audio = tape.bce_with_logits(out.logit_audio, &single)?;
        let visual = tape.bce_with_logits(out.logit_visual, &single)?;
        let fusion = match out.logits_fusion {
            Some(lf) => {
                let target = if c.multitask {
                    if labels.aux.len() != c.aux_tasks {
                        return Err(Error::Validation(format!(
                            "expected {} auxiliary labels, got {}",
                            c.aux_tasks,
                            labels.aux.len()
                        )));
                    }
                    let mut t = vec![y];
                    t.extend(labels.aux.iter().map(|&a| T::from_f64(f64::from(a))));
                    Tensor::new(vec![1, t.len()], t)?
                } else {
                    single.clone()
                };
                Some(tape.bce_with_logits(lf, &target)?)
            }
            None => None,
        };
        let [ca, cv, cf] = c.loss_weights;
        let mut terms = vec![tape.scale(audio, T::from_f64(ca)), tape.scale(visual, T::from_f64(cv))];
        if let Some(f) = fusion {
            terms.push(tape.scale(f, T::from_f64(cf)));
        }
        let total = tape.add_all(&terms)?;
        Ok(LossVars { total, audio, visual, fusion })
    }

    /// Logits of the concatenation head for one item.
    pub fn concat_fusion_forward<T: Scalar, S: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: ClipInput<'_, S>,
    ) -> Result<Var> {
        let head = self
            .head_concat
            .as_ref()
            .ok_or_else(|| Error::Config("model was not built with concat fusion".into()))?;
        let (vs, aus) = self.encode(tape, store, input)?;
        let pv = Self::pool(tape, *vs.last().unwrap())?;
        let pa = Self::pool(tape, *aus.last().unwrap())?;
        let cat = tape.concat(&[pv, pa], 1)?;
        head.forward(tape, store, cat)
    }
}

impl ForwardOutput {
    pub fn read<T: Scalar>(tape: &Tape<T>, v: &ForwardVars) -> Self {
        let scalar = |x: Var| tape.value(x).data()[0].to_f64();
        Self {
            logit_audio: scalar(v.logit_audio),
            logit_visual: scalar(v.logit_visual),
            logits_fusion: v.logits_fusion.map(|f| tape.value(f).to_f64_vec()),
            pavf: v.pavf.iter().map(|&p| tape.value(p).cast()).collect(),
        }
    }
}

impl<T: Scalar> PeclModel<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::build(config, seed, &mut params)?;
        Ok(Self { net, params, seed })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn forward_one<S: Scalar>(&self, input: ClipInput<'_, S>) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let v = self.net.forward(&mut tape, &self.params, input)?;
        Ok(ForwardOutput::read(&tape, &v))
    }

    pub fn forward<S: Scalar>(&self, batch: &[ClipInput<'_, S>]) -> Result<Vec<ForwardOutput>> {
        batch.iter().map(|&x| self.forward_one(x)).collect()
    }

    /// Concatenation-head logits for each item.
    pub fn concat_fusion_logits<S: Scalar>(&self, batch: &[ClipInput<'_, S>]) -> Result<Vec<Vec<f64>>> {
        batch
            .iter()
            .map(|&x| {
                let mut tape = Tape::new();
                let v = self.net.concat_fusion_forward(&mut tape, &self.params, x)?;
                Ok(tape.value(v).to_f64_vec())
            })
            .collect()
    }

    pub fn param_report(&self) -> ParamReport {
        ParamReport::new(&self.params, self.net.adapter_count())
    }

    pub fn cast<U: Scalar>(&self) -> PeclModel<U> {
        PeclModel { net: self.net.clone(), params: self.params.cast(), seed: self.seed }
    }
}

/// `w·p_v + (1 − w)·p_a` per item.
pub fn score_fusion(p_visual: &[f64], p_audio: &[f64], w: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Validation(format!("score weight {w} outside [0, 1]")));
    }
    if p_visual.len() != p_audio.len() {
        return Err(Error::Validation(format!(
            "score fusion: {} visual vs {} audio scores",
            p_visual.len(),
            p_audio.len()
        )));
    }
    p_visual
        .iter()
        .zip(p_audio)
        .map(|(&v, &a)| {
            if !(0.0..=1.0).contains(&v) || !(0.0..=1.0).contains(&a) {
                Err(Error::Validation(format!("scores must be probabilities, got {v} and {a}")))
            } else {
                Ok(w * v + (1.0 - w) * a)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCount {
    pub group: ParamGroup,
    pub trainable: usize,
    pub frozen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
    pub trainable_ratio: f64,
    pub adapter_modules: usize,
    pub groups: Vec<GroupCount>,
}

impl ParamReport {
    pub fn new<T: Scalar>(store: &ParamStore<T>, adapter_modules: usize) -> Self {
        let mut groups: Vec<GroupCount> = ParamGroup::ALL
            .iter()
            .map(|&group| GroupCount { group, trainable: 0, frozen: 0 })
            .collect();
        for (_, p) in store.iter() {
            let g = groups.iter_mut().find(|g| g.group == p.group).unwrap();
            if p.trainable {
                g.trainable += p.tensor.len();
            } else {
                g.frozen += p.tensor.len();
            }
        }
        let trainable: usize = groups.iter().map(|g| g.trainable).sum();
        let frozen: usize = groups.iter().map(|g| g.frozen).sum();
        let total = trainable + frozen;
        Self {
            trainable,
            frozen,
            total,
            trainable_ratio: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
            adapter_modules,
            groups,
        }
    }

    pub fn group(&self, group: ParamGroup) -> &GroupCount {
        self.groups.iter().find(|g| g.group == group).unwrap()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:>14} {:>14}", "group", "trainable", "frozen");
        for g in &self.groups {
            let _ = writeln!(s, "{:<14} {:>14} {:>14}", g.group.name(), g.trainable, g.frozen);
        }
        let _ = writeln!(s, "{:<14} {:>14} {:>14}", "total", self.trainable, self.frozen);
        let _ = writeln!(
            s,
            "trainable {} of {} ({:.4}%), {} adapter modules",
            self.trainable,
            self.total,
            100.0 * self.trainable_ratio,
            self.adapter_modules
        );
        s
    }
}
