//! Parallel audio-visual fusion.
//!
//! Both encoder outputs are projected to `D′`, correlated through a learnable
//! `D′×D′` matrix, cross-attended with a residual, then concatenated and mapped
//! to `D″` by a linear layer, layer norm and ReLU.

use crate::config::AttentionAxis;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, ParamBuilder, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct PavfParams {
    pub proj_v: Linear,
    pub proj_a: Linear,
    pub w_p: ParamId,
    pub fuse: Linear,
    pub norm: LayerNorm,
    pub axis: AttentionAxis,
}

impl PavfParams {
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        dim: usize,
        pavf_dim: usize,
        fusion_dim: usize,
        axis: AttentionAxis,
        ln_eps: f64,
    ) -> Result<Self> {
        let xavier = |i, o| Init::XavierUniform { fan_in: i, fan_out: o };
        Ok(Self {
            proj_v: Linear::build(pb, "proj_v", dim, pavf_dim, xavier(dim, pavf_dim), true)?,
            proj_a: Linear::build(pb, "proj_a", dim, pavf_dim, xavier(dim, pavf_dim), true)?,
            w_p: pb.param("w_p", &[pavf_dim, pavf_dim], xavier(pavf_dim, pavf_dim))?,
            fuse: Linear::he(pb, "fuse", 2 * pavf_dim, fusion_dim)?,
            norm: LayerNorm::build(pb, "norm", fusion_dim, ln_eps)?,
            axis,
        })
    }
}

/// Projected features and their `L×L` correlation `P = X_v·W_P·X_aᵀ`.
#[derive(Debug, Clone, Copy)]
pub struct Correlation {
    pub xv: Var,
    pub xa: Var,
    pub p: Var,
}

/// `P` for already projected `xv, xa: L×D′`.
pub fn correlate<T: Scalar>(tape: &mut Tape<T>, xv: Var, w_p: Var, xa: Var) -> Result<Var> {
    let (sv, sa) = (tape.shape(xv).to_vec(), tape.shape(xa).to_vec());
    if sv.len() != 2 || sv != sa {
        return Err(Error::Shape(format!("pavf: visual {sv:?} and audio {sa:?} features must match")));
    }
    let left = tape.matmul(xv, w_p)?;
    let at = tape.transpose(xa)?;
    tape.matmul(left, at)
}

pub fn crossmodal_correlation<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &PavfParams,
    xv: Var,
    xa: Var,
) -> Result<Correlation> {
    let (sv, sa) = (tape.shape(xv).to_vec(), tape.shape(xa).to_vec());
    if sv != sa {
        return Err(Error::Shape(format!("pavf: visual {sv:?} and audio {sa:?} sequences differ")));
    }
    let pv = p.proj_v.forward(tape, store, xv)?;
    let pa = p.proj_a.forward(tape, store, xa)?;
    let w = tape.param(store, p.w_p);
    let corr = correlate(tape, pv, w, pa)?;
    Ok(Correlation { xv: pv, xa: pa, p: corr })
}

/// `X̃_v = softmax(P)·X_v + X_v`, `X̃_a = softmax(Pᵀ)·X_a + X_a`.
pub fn crossmodal_attend<T: Scalar>(
    tape: &mut Tape<T>,
    xv: Var,
    xa: Var,
    p: Var,
    axis: AttentionAxis,
) -> Result<(Var, Var)> {
    let ax = match axis {
        AttentionAxis::Summation => 1,
        AttentionAxis::Alternate => 0,
    };
    let av = tape.softmax(p, ax)?;
    let pt = tape.transpose(p)?;
    let aa = tape.softmax(pt, ax)?;
    let mv = tape.matmul(av, xv)?;
    let ma = tape.matmul(aa, xa)?;
    Ok((tape.add(mv, xv)?, tape.add(ma, xa)?))
}

/// `ReLU(LN([X̃_v ; X̃_a]·W + b))`, giving `L×D″`.
pub fn fusion_head<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &PavfParams,
    xv: Var,
    xa: Var,
) -> Result<Var> {
    let cat = tape.concat(&[xv, xa], 1)?;
    let h = p.fuse.forward(tape, store, cat)?;
    let h = p.norm.forward(tape, store, h)?;
    Ok(tape.relu(h))
}

pub fn pavf_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &PavfParams,
    xv: Var,
    xa: Var,
) -> Result<Var> {
    let c = crossmodal_correlation(tape, store, p, xv, xa)?;
    let (v, a) = crossmodal_attend(tape, c.xv, c.xa, c.p, p.axis)?;
    fusion_head(tape, store, p, v, a)
}
