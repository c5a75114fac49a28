//! Frozen transformer encoder layers with adapter slots.
//!
//! The visual stack is pre-norm (ViT style), the audio stack post-norm
//! (wav2vec2 style). Parallel adapters read the same input as the block they
//! sit beside and their output joins the residual sum, which then passes
//! through the adapter norm. The `between` placement instead applies one
//! residual adapter `y = x + U(x)` after the attention sublayer.

use crate::adapters::Adapter;
use crate::config::{AdapterKind, AdapterNorm, ModelConfig, Placement};
use crate::error::{Error, Result};
use crate::nn::{ffn, mhsa, FfnWeights, LayerNorm, MhsaWeights};
use crate::params::{ParamBuilder, ParamGroup, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderStyle {
    /// `x + H(LN x)`.
    PreNorm,
    /// `x + LN(H x)`.
    PostNorm,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub style: EncoderStyle,
    pub placement: Placement,
    pub mhsa: MhsaWeights,
    pub ffn: FfnWeights,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    /// Adapter norms after the attention and MLP sums; `None` is identity.
    pub an1: Option<LayerNorm>,
    pub an2: Option<LayerNorm>,
    /// Beside the attention block, or the sequential adapter for `between`.
    pub adapter_attn: Option<Adapter>,
    pub adapter_ffn: Option<Adapter>,
}

impl EncoderLayerParams {
    /// Builds one layer under the builder's current scope. Backbone weights are
    /// frozen; adapters and adapter norms are trainable.
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig, style: EncoderStyle) -> Result<Self> {
        pb.set_group(ParamGroup::Backbone, false);
        let mhsa = MhsaWeights::build(&mut pb.scope("mhsa"), cfg.dim, cfg.num_heads, cfg.head_scale)?;
        let ffn = FfnWeights::build(&mut pb.scope("ffn"), cfg.dim, cfg.ffn_dim)?;
        let ln1 = LayerNorm::build(pb, "ln1", cfg.dim, cfg.ln_eps)?;
        let ln2 = LayerNorm::build(pb, "ln2", cfg.dim, cfg.ln_eps)?;

        pb.set_group(ParamGroup::AdapterNorm, true);
        let (an1, an2) = if cfg.resolved_adapter_norm() == AdapterNorm::LayerNorm {
            (
                Some(LayerNorm::build(pb, "an1", cfg.dim, cfg.ln_eps)?),
                Some(LayerNorm::build(pb, "an2", cfg.dim, cfg.ln_eps)?),
            )
        } else {
            (None, None)
        };

        pb.set_group(ParamGroup::Adapter, true);
        let (want_attn, want_ffn) = match cfg.placement {
            Placement::ParallelBoth => (true, true),
            Placement::ParallelMhsa | Placement::Between => (true, false),
            Placement::ParallelFfn => (false, true),
        };
        let mut make = |name: &str, want: bool| -> Result<Option<Adapter>> {
            if want {
                Adapter::build(&mut pb.scope(name), cfg.adapter, cfg.dim, cfg.bottleneck, cfg.adapter_kernel)
            } else {
                Ok(None)
            }
        };
        let adapter_attn = make("adapter_attn", want_attn)?;
        let adapter_ffn = make("adapter_ffn", want_ffn)?;
        pb.set_group(ParamGroup::Backbone, false);

        let layer = Self {
            style,
            placement: cfg.placement,
            mhsa,
            ffn,
            ln1,
            ln2,
            an1,
            an2,
            adapter_attn,
            adapter_ffn,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Checks that the adapters present are exactly those implied by the placement.
    pub fn validate(&self) -> Result<()> {
        let kind = self
            .adapter_attn
            .as_ref()
            .or(self.adapter_ffn.as_ref())
            .map_or(AdapterKind::None, Adapter::kind);
        if kind == AdapterKind::None {
            return Ok(());
        }
        let (a, f) = (self.adapter_attn.is_some(), self.adapter_ffn.is_some());
        let ok = match self.placement {
            Placement::ParallelBoth => a && f,
            Placement::ParallelMhsa | Placement::Between => a && !f,
            Placement::ParallelFfn => !a && f,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "placement {:?} inconsistent with adapters (attention: {a}, mlp: {f})",
                self.placement
            )))
        }
    }

    pub fn adapter_count(&self) -> usize {
        usize::from(self.adapter_attn.is_some()) + usize::from(self.adapter_ffn.is_some())
    }
}

fn adapter_norm<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    an: &Option<LayerNorm>,
    x: Var,
) -> Result<Var> {
    match an {
        Some(n) => n.forward(tape, store, x),
        None => Ok(x),
    }
}

/// One encoder layer on `x[L×D]`.
pub fn encoder_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &EncoderLayerParams,
    x: Var,
) -> Result<Var> {
    p.validate()?;
    let between = p.placement == Placement::Between;

    let h = match p.style {
        EncoderStyle::PreNorm => {
            let n = p.ln1.forward(tape, store, x)?;
            mhsa(tape, store, &p.mhsa, n)?
        }
        EncoderStyle::PostNorm => {
            let h = mhsa(tape, store, &p.mhsa, x)?;
            p.ln1.forward(tape, store, h)?
        }
    };
    let mut terms = vec![x, h];
    if let (Some(a), false) = (&p.adapter_attn, between) {
        terms.push(a.forward(tape, store, x)?);
    }
    let sum = tape.add_all(&terms)?;
    let mut y = adapter_norm(tape, store, &p.an1, sum)?;

    if let (Some(a), true) = (&p.adapter_attn, between) {
        let u = a.forward(tape, store, y)?;
        y = tape.add(y, u)?;
    }

    let f = match p.style {
        EncoderStyle::PreNorm => {
            let n = p.ln2.forward(tape, store, y)?;
            ffn(tape, store, &p.ffn, n)?
        }
        EncoderStyle::PostNorm => {
            let f = ffn(tape, store, &p.ffn, y)?;
            p.ln2.forward(tape, store, f)?
        }
    };
    let mut terms = vec![y, f];
    if let Some(a) = &p.adapter_ffn {
        terms.push(a.forward(tape, store, y)?);
    }
    let sum = tape.add_all(&terms)?;
    adapter_norm(tape, store, &p.an2, sum)
}

/// Runs the stack and returns every layer's output.
pub fn encode_stack<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layers: &[EncoderLayerParams],
    tokens: Var,
) -> Result<Vec<Var>> {
    let mut outs = Vec::with_capacity(layers.len());
    let mut x = tokens;
    for layer in layers {
        x = encoder_layer_forward(tape, store, layer, x)?;
        outs.push(x);
    }
    Ok(outs)
}
