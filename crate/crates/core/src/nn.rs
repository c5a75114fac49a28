//! Backbone building blocks: linear maps, layer norm, multi-head attention,
//! the position-wise MLP and the two modality tokenizers.

use crate::config::{AudioTokenizerConfig, HeadScale, VisualTokenizerConfig};
use crate::error::{Error, Result};
use crate::params::{Init, ParamBuilder, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// `y = x·W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        let w = s.param("w", &[d_in, d_out], init)?;
        let b = if bias {
            Some(s.param("b", &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { w, b, d_in, d_out })
    }

    /// He-uniform weights, zero bias.
    pub fn he<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::build(pb, name, d_in, d_out, Init::HeUniform { fan_in: d_in }, true)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }
}

/// Affine layer norm over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        let mut s = pb.scope(name);
        let gamma = s.param("gamma", &[dim], Init::Ones)?;
        let beta = s.param("beta", &[dim], Init::Zeros)?;
        Ok(Self { gamma, beta, eps })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct MhsaWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub num_heads: usize,
    pub head_scale: HeadScale,
}

impl MhsaWeights {
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        dim: usize,
        num_heads: usize,
        head_scale: HeadScale,
    ) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {num_heads} heads")));
        }
        let init = Init::XavierUniform { fan_in: dim, fan_out: dim };
        Ok(Self {
            q: Linear::build(pb, "q", dim, dim, init, true)?,
            k: Linear::build(pb, "k", dim, dim, init, true)?,
            v: Linear::build(pb, "v", dim, dim, init, true)?,
            o: Linear::build(pb, "o", dim, dim, init, true)?,
            num_heads,
            head_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.d_in
    }

    /// Denominator applied to the attention logits.
    pub fn scale(&self) -> f64 {
        let d = self.dim() as f64;
        match self.head_scale {
            HeadScale::ModelDim => d.sqrt(),
            HeadScale::HeadDim => (d / self.num_heads as f64).sqrt(),
        }
    }
}

/// `softmax(q·kᵀ / scale + shift)·v` for one head, returning output and weights.
///
/// A non-zero `shift` adds a constant to every logit, which must not change
/// the result.
pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    scale: f64,
    shift: f64,
) -> Result<(Var, Var)> {
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let mut s = tape.scale(s, T::from_f64(1.0 / scale));
    if shift != 0.0 {
        let c = tape.constant(Tensor::full(tape.shape(s).to_vec(), T::from_f64(shift)));
        s = tape.add(s, c)?;
    }
    let a = tape.softmax(s, 1)?;
    Ok((tape.matmul(a, v)?, a))
}

/// Multi-head self-attention on `x[L×D]`; also returns each head's weights.
pub fn mhsa_with_attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &MhsaWeights,
    x: Var,
) -> Result<(Var, Vec<Var>)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != w.dim() {
        return Err(Error::Shape(format!("mhsa: expected [L, {}], got {shape:?}", w.dim())));
    }
    let q = w.q.forward(tape, store, x)?;
    let k = w.k.forward(tape, store, x)?;
    let v = w.v.forward(tape, store, x)?;
    let dh = w.dim() / w.num_heads;
    let scale = w.scale();
    let mut heads = Vec::with_capacity(w.num_heads);
    let mut weights = Vec::with_capacity(w.num_heads);
    for j in 0..w.num_heads {
        let (qj, kj, vj) = if w.num_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 1, j * dh, dh)?,
                tape.slice(k, 1, j * dh, dh)?,
                tape.slice(v, 1, j * dh, dh)?,
            )
        };
        let (h, a) = attend(tape, qj, kj, vj, scale, 0.0)?;
        heads.push(h);
        weights.push(a);
    }
    let h = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
    Ok((w.o.forward(tape, store, h)?, weights))
}

pub fn mhsa<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, w: &MhsaWeights, x: Var) -> Result<Var> {
    Ok(mhsa_with_attention(tape, store, w, x)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone)]
pub struct FfnWeights {
    pub up: Linear,
    pub down: Linear,
    pub activation: Activation,
}

impl FfnWeights {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, dim: usize, hidden: usize) -> Result<Self> {
        if hidden < dim {
            return Err(Error::Config(format!("ffn hidden {hidden} smaller than dim {dim}")));
        }
        Ok(Self {
            up: Linear::build(pb, "up", dim, hidden, Init::HeUniform { fan_in: dim }, true)?,
            down: Linear::build(
                pb,
                "down",
                hidden,
                dim,
                Init::XavierUniform { fan_in: hidden, fan_out: dim },
                true,
            )?,
            activation: Activation::Gelu,
        })
    }
}

pub fn ffn<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, w: &FfnWeights, x: Var) -> Result<Var> {
    let h = w.up.forward(tape, store, x)?;
    let h = match w.activation {
        Activation::Gelu => tape.gelu(h),
        Activation::Relu => tape.relu(h),
    };
    w.down.forward(tape, store, h)
}

/// Frames `[L, H, W, C]` to tokens `[L, D]`: patch embedding, mean over
/// patches, projection.
#[derive(Debug, Clone)]
pub struct VisualTokenizer {
    pub config: VisualTokenizerConfig,
    pub embed: Linear,
    pub proj: Linear,
}

impl VisualTokenizer {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, config: &VisualTokenizerConfig, dim: usize) -> Result<Self> {
        let embed = Linear::he(pb, "embed", config.patch_dim(), config.hidden)?;
        let proj = Linear::build(
            pb,
            "proj",
            config.hidden,
            dim,
            Init::XavierUniform { fan_in: config.hidden, fan_out: dim },
            true,
        )?;
        Ok(Self { config: config.clone(), embed, proj })
    }

    /// Rearranges `[L, H, W, C]` into `[L·P, p·p·C]`, row-major over patches.
    pub fn patchify<T: Scalar>(&self, tape: &mut Tape<T>, frames: Var) -> Result<Var> {
        let c = &self.config;
        let shape = tape.shape(frames).to_vec();
        let expect = [c.frame_height, c.frame_width, c.channels];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::Shape(format!(
                "visual tokenizer: expected frames [L, {}, {}, {}], got {shape:?}",
                expect[0], expect[1], expect[2]
            )));
        }
        let (l, p) = (shape[0], c.patch);
        let (gh, gw) = (c.frame_height / p, c.frame_width / p);
        let x = tape.reshape(frames, &[l, gh, p, gw, p, c.channels])?;
        let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
        tape.reshape(x, &[l * gh * gw, c.patch_dim()])
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, frames: Var) -> Result<Var> {
        let l = tape.shape(frames).first().copied().unwrap_or(0);
        let patches = self.patchify(tape, frames)?;
        let e = self.embed.forward(tape, store, patches)?;
        let e = tape.reshape(e, &[l, self.config.patches_per_frame(), self.config.hidden])?;
        let pooled = tape.mean_axis(e, 1)?;
        self.proj.forward(tape, store, pooled)
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

/// Waveform `[T]` to tokens `[L, D]`: strided conv + GELU stack, projection.
#[derive(Debug, Clone)]
pub struct AudioTokenizer {
    pub config: AudioTokenizerConfig,
    pub conv: Vec<ConvLayer>,
    pub proj: Linear,
}

impl AudioTokenizer {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, config: &AudioTokenizerConfig, dim: usize) -> Result<Self> {
        let mut conv = Vec::with_capacity(config.conv.len());
        let mut c_in = 1;
        for (i, spec) in config.conv.iter().enumerate() {
            let mut s = pb.scope(&format!("conv{i}"));
            let fan_in = c_in * spec.kernel;
            let w = s.param("w", &[spec.channels, c_in, spec.kernel], Init::HeUniform { fan_in })?;
            let b = s.param("b", &[spec.channels], Init::Zeros)?;
            conv.push(ConvLayer { w, b, stride: spec.stride });
            c_in = spec.channels;
        }
        let proj = Linear::build(
            pb,
            "proj",
            c_in,
            dim,
            Init::XavierUniform { fan_in: c_in, fan_out: dim },
            true,
        )?;
        Ok(Self { config: config.clone(), conv, proj })
    }

    /// Conv output of the first layer before its activation, `[C, L₁]`.
    pub fn first_layer_preactivation<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        wave: Var,
    ) -> Result<Var> {
        let len = tape.shape(wave)[0];
        let x = tape.reshape(wave, &[1, len])?;
        let layer = &self.conv[0];
        let w = tape.param(store, layer.w);
        let b = tape.param(store, layer.b);
        tape.conv1d(x, w, Some(b), layer.stride, 0)
    }

    /// Tokenizes a waveform of exactly `required_samples(seq_len)` samples.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        wave: Var,
        seq_len: usize,
    ) -> Result<Var> {
        let need = self.config.required_samples(seq_len);
        let shape = tape.shape(wave).to_vec();
        if shape.len() != 1 || shape[0] != need {
            return Err(Error::Shape(format!(
                "audio tokenizer: waveform must have exactly {need} samples for {seq_len} steps, got shape {shape:?}"
            )));
        }
        let mut x = tape.reshape(wave, &[1, need])?;
        for layer in &self.conv {
            let w = tape.param(store, layer.w);
            let b = tape.param(store, layer.b);
            x = tape.conv1d(x, w, Some(b), layer.stride, 0)?;
            x = tape.gelu(x);
        }
        let x = tape.transpose(x)?;
        self.proj.forward(tape, store, x)
    }
}
