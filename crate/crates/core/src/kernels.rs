//! Slice-level numeric kernels shared by the forward and backward passes.

use crate::tensor::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
pub fn matmul_bt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// Dot product with eight independent partial sums so it vectorizes; the
/// summation order is fixed, so results stay deterministic.
#[inline]
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::ZERO; LANES];
    let (xc, yc) = (x.chunks_exact(LANES), y.chunks_exact(LANES));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..LANES {
            acc[l] += a[l] * b[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&a, &b) in xr.iter().zip(yr) {
        s += a * b;
    }
    s
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub fn matmul_at_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

/// Split `shape` around `axis` into `(outer, extent, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Scalar>(x: &[T], out: &mut [T], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let mut mx = x[at(0)];
            for k in 1..n {
                mx = mx.max(x[at(k)]);
            }
            let mut s = T::ZERO;
            for k in 0..n {
                let e = (x[at(k)] - mx).exp();
                out[at(k)] = e;
                s += e;
            }
            for k in 0..n {
                out[at(k)] = out[at(k)] / s;
            }
        }
    }
}

pub fn softmax_backward<T: Scalar>(
    y: &[T],
    g: &[T],
    out: &mut [T],
    outer: usize,
    n: usize,
    inner: usize,
) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let mut dot = T::ZERO;
            for k in 0..n {
                dot += g[at(k)] * y[at(k)];
            }
            for k in 0..n {
                out[at(k)] += y[at(k)] * (g[at(k)] - dot);
            }
        }
    }
}

pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

pub struct ConvDims {
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_len: usize,
}

impl ConvDims {
    /// Input position for output `t`, tap `j`, if inside the unpadded signal.
    #[inline]
    fn src(&self, t: usize, j: usize) -> Option<usize> {
        let pos = t * self.stride + j;
        if pos < self.padding || pos - self.padding >= self.len {
            None
        } else {
            Some(pos - self.padding)
        }
    }
}

/// Cross-correlation with zero padding: `out[o,t] = b[o] + Σ_c Σ_j w[o,c,j]·x[c, t·s + j − p]`.
pub fn conv1d<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, d: &ConvDims, out: &mut [T]) {
    for o in 0..d.c_out {
        let orow = &mut out[o * d.out_len..(o + 1) * d.out_len];
        if let Some(b) = b {
            orow.iter_mut().for_each(|v| *v = b[o]);
        }
        for c in 0..d.c_in {
            let xrow = &x[c * d.len..(c + 1) * d.len];
            let wrow = &w[(o * d.c_in + c) * d.kernel..(o * d.c_in + c + 1) * d.kernel];
            for (t, ov) in orow.iter_mut().enumerate() {
                let mut s = T::ZERO;
                for (j, &wv) in wrow.iter().enumerate() {
                    if let Some(src) = d.src(t, j) {
                        s += wv * xrow[src];
                    }
                }
                *ov += s;
            }
        }
    }
}

pub fn conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    d: &ConvDims,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    for o in 0..d.c_out {
        let grow = &g[o * d.out_len..(o + 1) * d.out_len];
        for c in 0..d.c_in {
            let wbase = (o * d.c_in + c) * d.kernel;
            for (t, &gv) in grow.iter().enumerate() {
                for j in 0..d.kernel {
                    if let Some(src) = d.src(t, j) {
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[c * d.len + src] += w[wbase + j] * gv;
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[wbase + j] += gv * x[c * d.len + src];
                        }
                    }
                }
            }
        }
    }
    if let Some(gb) = gb {
        for o in 0..d.c_out {
            gb[o] += g[o * d.out_len..(o + 1) * d.out_len].iter().copied().sum::<T>();
        }
    }
}

/// Permute the axes of a row-major array: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = crate::tensor::strides(shape);
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..x.len() {
        out.push(x[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * x * (T::ONE + (x * T::from_f64(INV_SQRT_2)).erf())
}

/// `Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::ONE + (x * T::from_f64(INV_SQRT_2)).erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-(x * x) * T::from_f64(0.5)).exp();
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::ZERO) + (T::ONE + (-x.abs()).exp()).ln()
}
