//! Trainable adapters inserted into frozen encoder layers.
//!
//! Both adapters end in a zero-initialized projection, so a freshly built
//! adapter outputs exactly zero and leaves the backbone function unchanged.

use crate::config::AdapterKind;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamBuilder, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Down-projection, temporal convolution across tokens, up-projection.
#[derive(Debug, Clone)]
pub struct UtAdapterParams {
    pub down: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub up: Linear,
    pub kernel: usize,
}

impl UtAdapterParams {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, dim: usize, r: usize, kernel: usize) -> Result<Self> {
        if r == 0 || kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "ut adapter needs r > 0 and an odd kernel (r = {r}, k = {kernel})"
            )));
        }
        let down = Linear::he(pb, "down", dim, r)?;
        let conv_w = pb.param("conv.w", &[r, r, kernel], Init::HeUniform { fan_in: r * kernel })?;
        let conv_b = pb.param("conv.b", &[r], Init::Zeros)?;
        let up = Linear::build(pb, "up", r, dim, Init::Zeros, true)?;
        Ok(Self { down, conv_w, conv_b, up, kernel })
    }
}

/// `x[L×D] → [L×D]`; the convolution mixes neighbouring tokens with "same" padding.
pub fn ut_adapter_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &UtAdapterParams,
    x: Var,
) -> Result<Var> {
    let h = p.down.forward(tape, store, x)?;
    let h = tape.transpose(h)?;
    let w = tape.param(store, p.conv_w);
    let b = tape.param(store, p.conv_b);
    let h = tape.conv1d(h, w, Some(b), 1, (p.kernel - 1) / 2)?;
    let h = tape.transpose(h)?;
    p.up.forward(tape, store, h)
}

/// Per-token bottleneck: down-projection, GELU, up-projection.
#[derive(Debug, Clone)]
pub struct BottleneckAdapterParams {
    pub down: Linear,
    pub up: Linear,
}

impl BottleneckAdapterParams {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, dim: usize, r: usize) -> Result<Self> {
        if r == 0 || r >= dim {
            return Err(Error::Config(format!("bottleneck adapter needs 0 < r < D (r = {r}, D = {dim})")));
        }
        Ok(Self {
            down: Linear::he(pb, "down", dim, r)?,
            up: Linear::build(pb, "up", r, dim, Init::Zeros, true)?,
        })
    }
}

pub fn bottleneck_adapter_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &BottleneckAdapterParams,
    x: Var,
) -> Result<Var> {
    let h = p.down.forward(tape, store, x)?;
    let h = tape.gelu(h);
    p.up.forward(tape, store, h)
}

#[derive(Debug, Clone)]
pub enum Adapter {
    Ut(UtAdapterParams),
    Bottleneck(BottleneckAdapterParams),
}

impl Adapter {
    /// `None` for [`AdapterKind::None`].
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        kind: AdapterKind,
        dim: usize,
        r: usize,
        kernel: usize,
    ) -> Result<Option<Self>> {
        Ok(match kind {
            AdapterKind::None => None,
            AdapterKind::Ut => Some(Adapter::Ut(UtAdapterParams::build(pb, dim, r, kernel)?)),
            AdapterKind::Bottleneck => Some(Adapter::Bottleneck(BottleneckAdapterParams::build(pb, dim, r)?)),
        })
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Ut(_) => AdapterKind::Ut,
            Adapter::Bottleneck(_) => AdapterKind::Bottleneck,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            Adapter::Ut(p) => ut_adapter_forward(tape, store, p, x),
            Adapter::Bottleneck(p) => bottleneck_adapter_forward(tape, store, p, x),
        }
    }
}

/// Scalar count of one adapter, weights and biases included.
pub fn adapter_param_count(kind: AdapterKind, dim: usize, r: usize, kernel: usize) -> usize {
    match kind {
        AdapterKind::None => 0,
        AdapterKind::Ut => (dim * r + r) + (r * r * kernel + r) + (r * dim + dim),
        AdapterKind::Bottleneck => (dim * r + r) + (r * dim + dim),
    }
}
