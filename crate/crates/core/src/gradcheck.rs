//! Central finite-difference verification of tape gradients (64-bit only).

use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{ClipInput, Labels, PeclModel};
use crate::params::ParamStore;
use crate::rng::{derive_seed, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, so gradients that are zero
    /// analytically are judged by absolute error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::Shape(format!("objective must be scalar, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compare the tape gradient of the scalar objective `f` against central
/// differences for every scalar of every trainable parameter in `store`.
///
/// Parameter values are restored exactly after each probe; existing gradient
/// buffers are cleared.
pub fn grad_check<F>(f: F, store: &mut ParamStore<f64>, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base = tape.value(loss).data()[0];
    if !base.is_finite() {
        return Err(Error::Numerical(format!("objective is non-finite ({base}) at the base point")));
    }
    tape.backward(loss, store)?;
    drop(tape);

    let mut params = Vec::new();
    for id in store.trainable_ids() {
        let name = store.get(id).name.clone();
        let n = store.tensor(id).len();
        let analytic = store
            .get(id)
            .grad
            .as_ref()
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut check = ParamCheck {
            name: name.clone(),
            scalars: n,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
            passed: true,
        };
        for (j, &a) in analytic.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::Numerical(format!("non-finite analytic gradient at {name}[{j}]")));
            }
            let orig = store.tensor(id).data()[j];
            store.tensor_mut(id).data_mut()[j] = orig + cfg.eps;
            let plus = eval(&f, store);
            store.tensor_mut(id).data_mut()[j] = orig - cfg.eps;
            let minus = eval(&f, store);
            store.tensor_mut(id).data_mut()[j] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite objective while perturbing {name}[{j}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let rel = relative_error(a, numeric, cfg.floor);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = j;
            }
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
        }
        check.passed = check.max_rel_err < cfg.tol;
        params.push(check);
    }
    store.zero_grad();
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        eps: cfg.eps,
        tol: cfg.tol,
        passed: params.iter().all(|p| p.passed),
        max_rel_err,
        params,
    })
}

impl GradCheckReport {
    pub fn to_text(&self) -> String {
        let width = self.params.iter().map(|p| p.name.len()).max().unwrap_or(4).max(9);
        let mut s = format!(
            "{:<width$}  {:>8}  {:>12}  {:>12}  {}\n",
            "parameter", "scalars", "max_rel_err", "max_abs_err", "status"
        );
        for p in &self.params {
            s.push_str(&format!(
                "{:<width$}  {:>8}  {:>12.3e}  {:>12.3e}  {}\n",
                p.name,
                p.scalars,
                p.max_rel_err,
                p.max_abs_err,
                if p.passed { "ok" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "overall max_rel_err {:.3e} (tol {:.0e}): {}\n",
            self.max_rel_err,
            self.tol,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        s
    }
}

/// Checks the full model loss on one random clip. Trainable parameters are
/// jittered first so zero-initialized up-projections and heads do not hide
/// paths. With `corrupt`, the loss passes through an identity whose backward
/// doubles the gradient, which must be reported as a failure.
pub fn model_grad_check(config: &ModelConfig, seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut model = PeclModel::<f64>::build(config, seed)?;
    let mut rng = Rng::new(derive_seed(seed, "gradcheck"));
    for id in model.params.trainable_ids() {
        for v in model.params.tensor_mut(id).data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    let v = &config.visual;
    let fshape = vec![config.seq_len, v.frame_height, v.frame_width, v.channels];
    let n: usize = fshape.iter().product();
    let frames = Tensor::new(fshape, (0..n).map(|_| rng.normal()).collect())?;
    let t = config.audio_samples();
    let wave = Tensor::new(vec![t], (0..t).map(|_| rng.normal()).collect())?;
    let labels = Labels {
        deception: u8::from(rng.bernoulli(0.5)),
        aux: (0..config.aux_tasks).map(|_| u8::from(rng.bernoulli(0.5))).collect(),
    };
    let net = model.net.clone();
    let f = |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
        let out = net.forward(tape, store, ClipInput { frames: &frames, wave: &wave })?;
        let loss = net.loss(tape, &out, &labels)?.total;
        if !corrupt {
            return Ok(loss);
        }
        let value = tape.value(loss).clone();
        Ok(tape.custom(&[loss], value, Box::new(|_, _, g| {
            let mut g = g.clone();
            g.scale_in_place(2.0);
            vec![Some(g)]
        })))
    };
    grad_check(f, &mut model.params, GradCheckConfig::default())
}

type OpBuild = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Every differentiable tape op with small random inputs.
#[allow(clippy::type_complexity)]
fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpBuild)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v| t.add(v[0], v[1])),
        ("add_all", vec![vec![2, 3], vec![2, 3], vec![2, 3]], |t, v| t.add_all(v)),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, v| t.mul(v[0], v[1])),
        ("add_bias", vec![vec![3, 4], vec![4]], |t, v| t.add_bias(v[0], v[1])),
        ("scale", vec![vec![5]], |t, v| Ok(t.scale(v[0], -1.7))),
        ("sum", vec![vec![2, 3]], |t, v| Ok(t.sum(v[0]))),
        ("mean_axis0", vec![vec![3, 4, 2]], |t, v| t.mean_axis(v[0], 0)),
        ("mean_axis1", vec![vec![3, 4, 2]], |t, v| t.mean_axis(v[0], 1)),
        ("softmax_row", vec![vec![3, 4]], |t, v| t.softmax(v[0], 1)),
        ("softmax_col", vec![vec![3, 4]], |t, v| t.softmax(v[0], 0)),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ("conv1d_s1", vec![vec![2, 7], vec![3, 2, 3], vec![3]], |t, v| t.conv1d(v[0], v[1], Some(v[2]), 1, 1)),
        ("conv1d_s2", vec![vec![2, 9], vec![3, 2, 4], vec![3]], |t, v| t.conv1d(v[0], v[1], Some(v[2]), 2, 0)),
        ("gelu", vec![vec![6]], |t, v| Ok(t.gelu(v[0]))),
        ("sigmoid", vec![vec![6]], |t, v| Ok(t.sigmoid(v[0]))),
        ("relu", vec![vec![6]], |t, v| Ok(t.relu(v[0]))),
        ("concat1", vec![vec![2, 3], vec![2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        ("concat0", vec![vec![2, 3], vec![1, 3]], |t, v| t.concat(&[v[0], v[1]], 0)),
        ("permute3", vec![vec![2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        ("transpose", vec![vec![3, 5]], |t, v| t.transpose(v[0])),
        ("reshape", vec![vec![3, 4]], |t, v| t.reshape(v[0], &[2, 6])),
        ("slice", vec![vec![3, 6]], |t, v| t.slice(v[0], 1, 2, 3)),
        ("bce", vec![vec![2, 3]], |t, v| {
            let y = Tensor::new([2, 3], vec![1., 0., 1., 0., 0., 1.])?;
            t.bce_with_logits(v[0], &y)
        }),
    ]
}

fn uniform(shape: &[usize], rng: &mut Rng) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
}

/// Checks every op. Inputs are trainable parameters and the output is
/// contracted with random weights, so each output entry matters differently.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = Vec::new();
    for (name, shapes, build) in op_cases() {
        let mut rng = Rng::new(derive_seed(seed, name));
        let mut store = ParamStore::<f64>::new();
        let mut ids = Vec::new();
        for (i, s) in shapes.iter().enumerate() {
            let mut v = uniform(s, &mut rng)?;
            if name == "relu" {
                // Keep away from the kink.
                v.data_mut().iter_mut().for_each(|x| *x += x.signum() * 0.1);
            }
            ids.push(store.insert(format!("in{i}"), v, true, crate::ParamGroup::Adapter)?);
        }
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
        let probe = build(&mut tape, &vars)?;
        let weights = uniform(tape.value(probe).shape(), &mut rng)?;
        let f = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
            let y = build(tape, &vars)?;
            let w = tape.constant(weights.clone());
            let y = tape.mul(y, w)?;
            Ok(tape.sum(y))
        };
        out.push((name, grad_check(f, &mut store, GradCheckConfig::default())?));
    }
    Ok(out)
}
