//! Architectural and optimization hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    None,
    Ut,
    Bottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// One adapter beside the attention block and one beside the MLP.
    ParallelBoth,
    ParallelMhsa,
    ParallelFfn,
    /// A single residual adapter applied sequentially between the two blocks.
    Between,
}

impl Placement {
    pub const ALL: [Placement; 4] = [
        Placement::ParallelBoth,
        Placement::ParallelMhsa,
        Placement::ParallelFfn,
        Placement::Between,
    ];

    pub fn adapters_per_layer(self) -> usize {
        match self {
            Placement::ParallelBoth => 2,
            _ => 1,
        }
    }
}

/// Normalization applied to adapter-augmented residual sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterNorm {
    /// Layer norm for parallel placements, identity for `between` or no adapter.
    Auto,
    Identity,
    LayerNorm,
}

/// Denominator of the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadScale {
    /// `sqrt(D)`, the model width.
    ModelDim,
    /// `sqrt(D / N)`, the per-head width.
    HeadDim,
}

/// How the `L×L` crossmodal correlation is formed from the projected features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationForm {
    /// `P = X_v · W_P · X_aᵀ`; entry `(s, t)` pairs visual step `s` with audio step `t`.
    VisualWeightAudioT,
}

/// Axis normalized by the crossmodal softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionAxis {
    /// Normalize over the summation index of `softmax(P) · X`, so every row
    /// of attention weights is a distribution.
    Summation,
    /// Normalize over the other axis.
    Alternate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Pavf,
    Concat,
    Score,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pavf" => Ok(FusionMode::Pavf),
            "concat" => Ok(FusionMode::Concat),
            "score" => Ok(FusionMode::Score),
            other => Err(Error::Config(format!(
                "unknown fusion mode `{other}` (expected pavf, concat or score)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualTokenizerConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    pub patch: usize,
    /// Width of the per-frame embedding before projection to `D`.
    pub hidden: usize,
}

impl VisualTokenizerConfig {
    pub fn patches_per_frame(&self) -> usize {
        (self.frame_height / self.patch) * (self.frame_width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioTokenizerConfig {
    /// Strided, unpadded conv layers, each followed by GELU. The last layer's
    /// channel count is the per-step embedding width.
    pub conv: Vec<ConvSpec>,
}

impl AudioTokenizerConfig {
    pub fn hidden(&self) -> usize {
        self.conv.last().map_or(1, |c| c.channels)
    }

    /// Waveform length that makes the conv stack emit exactly `steps` outputs.
    pub fn required_samples(&self, steps: usize) -> usize {
        self.conv
            .iter()
            .rev()
            .fold(steps, |len, c| (len - 1) * c.stride + c.kernel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 16,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width `D`.
    pub dim: usize,
    /// Sequence length `L`.
    pub seq_len: usize,
    pub num_heads: usize,
    /// Encoder layers per modality.
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub head_scale: HeadScale,
    pub adapter: AdapterKind,
    /// Adapter bottleneck width `r`.
    pub bottleneck: usize,
    /// Temporal kernel of the UT-adapter convolution.
    pub adapter_kernel: usize,
    pub placement: Placement,
    pub adapter_norm: AdapterNorm,
    /// PAVF projection width `D′`.
    pub pavf_dim: usize,
    /// PAVF output width `D″`.
    pub fusion_dim: usize,
    /// Number of PAVF modules; they tap the last `num_pavf` encoder pairs.
    pub num_pavf: usize,
    pub correlation: CorrelationForm,
    pub attention_axis: AttentionAxis,
    pub fusion: FusionMode,
    /// Visual weight `w` of score fusion, `w·p_v + (1 − w)·p_a`.
    pub score_weight: f64,
    pub multitask: bool,
    /// Auxiliary binary tasks `K` predicted by the fusion head.
    pub aux_tasks: usize,
    /// Coefficients of the audio, visual and fusion losses.
    pub loss_weights: [f64; 3],
    pub zero_init_heads: bool,
    pub ln_eps: f64,
    pub visual: VisualTokenizerConfig,
    pub audio: AudioTokenizerConfig,
    pub optim: OptimConfig,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            dim: 64,
            seq_len: 16,
            num_heads: 4,
            num_layers: 4,
            ffn_dim: 256,
            head_scale: HeadScale::ModelDim,
            adapter: AdapterKind::Ut,
            bottleneck: 16,
            adapter_kernel: 3,
            placement: Placement::ParallelBoth,
            adapter_norm: AdapterNorm::Auto,
            pavf_dim: 32,
            fusion_dim: 16,
            num_pavf: 4,
            correlation: CorrelationForm::VisualWeightAudioT,
            attention_axis: AttentionAxis::Summation,
            fusion: FusionMode::Pavf,
            score_weight: 0.5,
            multitask: false,
            aux_tasks: 25,
            loss_weights: [1.0, 1.0, 1.0],
            zero_init_heads: false,
            ln_eps: 1e-5,
            visual: VisualTokenizerConfig {
                frame_height: 8,
                frame_width: 8,
                channels: 1,
                patch: 4,
                hidden: 64,
            },
            audio: AudioTokenizerConfig {
                conv: vec![
                    ConvSpec { channels: 32, kernel: 10, stride: 5 },
                    ConvSpec { channels: 32, kernel: 3, stride: 2 },
                    ConvSpec { channels: 64, kernel: 3, stride: 2 },
                ],
            },
            optim: OptimConfig::default(),
            precision: Precision::F32,
        }
    }

    /// Tiny configuration used for full-model gradient checks.
    pub fn micro() -> Self {
        Self {
            dim: 16,
            seq_len: 4,
            num_heads: 2,
            num_layers: 2,
            ffn_dim: 32,
            bottleneck: 4,
            pavf_dim: 8,
            fusion_dim: 4,
            num_pavf: 2,
            aux_tasks: 3,
            multitask: true,
            visual: VisualTokenizerConfig {
                frame_height: 4,
                frame_width: 4,
                channels: 1,
                patch: 2,
                hidden: 8,
            },
            audio: AudioTokenizerConfig {
                conv: vec![
                    ConvSpec { channels: 4, kernel: 4, stride: 2 },
                    ConvSpec { channels: 8, kernel: 3, stride: 2 },
                ],
            },
            precision: Precision::F64,
            ..Self::desk()
        }
    }

    /// ViT-Base / wav2vec2-sized backbones truncated to four layers.
    pub fn paper() -> Self {
        Self {
            dim: 768,
            seq_len: 64,
            num_heads: 12,
            num_layers: 4,
            ffn_dim: 3072,
            bottleneck: 128,
            pavf_dim: 256,
            fusion_dim: 128,
            num_pavf: 4,
            visual: VisualTokenizerConfig {
                frame_height: 224,
                frame_width: 224,
                channels: 3,
                patch: 16,
                hidden: 256,
            },
            audio: AudioTokenizerConfig {
                conv: vec![
                    ConvSpec { channels: 512, kernel: 10, stride: 5 },
                    ConvSpec { channels: 512, kernel: 3, stride: 2 },
                    ConvSpec { channels: 512, kernel: 3, stride: 2 },
                    ConvSpec { channels: 512, kernel: 3, stride: 2 },
                    ConvSpec { channels: 512, kernel: 3, stride: 2 },
                    ConvSpec { channels: 512, kernel: 2, stride: 2 },
                    ConvSpec { channels: 512, kernel: 2, stride: 2 },
                ],
            },
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "micro" => Ok(Self::micro()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected desk, micro or paper)"
            ))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    /// Width of the fusion classifier output: `K + 1` with multi-task, else 1.
    pub fn fusion_outputs(&self) -> usize {
        if self.multitask {
            self.aux_tasks + 1
        } else {
            1
        }
    }

    pub fn resolved_adapter_norm(&self) -> AdapterNorm {
        match self.adapter_norm {
            AdapterNorm::Auto => {
                if self.adapter == AdapterKind::None || self.placement == Placement::Between {
                    AdapterNorm::Identity
                } else {
                    AdapterNorm::LayerNorm
                }
            }
            explicit => explicit,
        }
    }

    /// Encoder layer indices tapped by PAVF modules (the last `num_pavf`).
    pub fn pavf_taps(&self) -> Vec<usize> {
        (self.num_layers - self.num_pavf..self.num_layers).collect()
    }

    pub fn audio_samples(&self) -> usize {
        self.audio.required_samples(self.seq_len)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.seq_len == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return fail("dim, seq_len, num_layers and num_heads must be positive".into());
        }
        if self.dim % self.num_heads != 0 {
            return fail(format!("dim {} is not divisible by num_heads {}", self.dim, self.num_heads));
        }
        if self.ffn_dim < self.dim {
            return fail(format!("ffn_dim {} must be at least dim {}", self.ffn_dim, self.dim));
        }
        if self.adapter != AdapterKind::None {
            if self.bottleneck == 0 {
                return fail("bottleneck must be positive".into());
            }
            if self.adapter == AdapterKind::Bottleneck && self.bottleneck >= self.dim {
                return fail(format!(
                    "bottleneck adapter needs r < D (r = {}, D = {})",
                    self.bottleneck, self.dim
                ));
            }
            if self.adapter == AdapterKind::Ut && self.adapter_kernel % 2 == 0 {
                return fail(format!("adapter_kernel {} must be odd", self.adapter_kernel));
            }
        }
        if self.fusion == FusionMode::Pavf {
            if self.num_pavf == 0 || self.num_pavf > self.num_layers {
                return fail(format!(
                    "num_pavf {} must lie in 1..={}",
                    self.num_pavf, self.num_layers
                ));
            }
            if self.pavf_dim == 0 || self.pavf_dim >= self.dim {
                return fail(format!("pavf_dim {} must satisfy 0 < D′ < D = {}", self.pavf_dim, self.dim));
            }
            if self.fusion_dim == 0 {
                return fail("fusion_dim must be positive".into());
            }
        }
        if !(0.0..=1.0).contains(&self.score_weight) {
            return fail(format!("score_weight {} outside [0, 1]", self.score_weight));
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        let v = &self.visual;
        if v.patch == 0 || v.frame_height % v.patch != 0 || v.frame_width % v.patch != 0 {
            return fail(format!(
                "frame {}x{} is not divisible into {}x{} patches",
                v.frame_height, v.frame_width, v.patch, v.patch
            ));
        }
        if v.channels == 0 || v.hidden == 0 {
            return fail("visual channels and hidden must be positive".into());
        }
        if self.audio.conv.is_empty() {
            return fail("audio conv stack is empty".into());
        }
        if self.audio.conv.iter().any(|c| c.channels == 0 || c.kernel == 0 || c.stride == 0) {
            return fail("audio conv layers need positive channels, kernel and stride".into());
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || o.batch_size == 0 || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return fail("optimizer settings invalid (lr > 0, batch_size ≥ 1, betas in [0, 1))".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["desk", "micro", "paper"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn required_samples_inverts_the_conv_stack() {
        let c = ModelConfig::desk();
        let t = c.audio_samples();
        let mut len = t;
        for l in &c.audio.conv {
            len = (len - l.kernel) / l.stride + 1;
        }
        assert_eq!(len, c.seq_len);
        assert_eq!(ModelConfig::micro().audio_samples(), 20);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::desk();
        c.num_heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::desk();
        c.num_pavf = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.pavf_dim = 64;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.adapter_kernel = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn auto_adapter_norm() {
        let mut c = ModelConfig::desk();
        assert_eq!(c.resolved_adapter_norm(), AdapterNorm::LayerNorm);
        c.placement = Placement::Between;
        assert_eq!(c.resolved_adapter_norm(), AdapterNorm::Identity);
        c.placement = Placement::ParallelFfn;
        c.adapter = AdapterKind::None;
        assert_eq!(c.resolved_adapter_norm(), AdapterNorm::Identity);
    }

    #[test]
    fn json_roundtrip() {
        let c = ModelConfig::paper();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
