use pecl_core::gradcheck::{grad_check, op_suite, GradCheckConfig};
use pecl_core::{Error, ParamGroup, ParamStore, Rng, Tape, Tensor, Var};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let i2 = tape.constant(Tensor::eye(2));
    let m = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
    let y = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(y).data(), &[3., 4., 5., 6.]);

    let a = tape.constant(t(&[1, 2], &[1., 2.]));
    let b = tape.constant(t(&[2, 1], &[3., 4.]));
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y).data(), &[11.]);

    let err = tape.matmul(a, a).unwrap_err();
    match err {
        Error::Shape(msg) => assert!(msg.contains("[1, 2]"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn matmul_gradient_of_sum() {
    let mut store = ParamStore::<f64>::new();
    let a = store.insert("a", t(&[1, 2], &[1., 1.]), true, ParamGroup::Adapter).unwrap();
    let b = store.insert("b", t(&[2, 1], &[2., 5.]), false, ParamGroup::Backbone).unwrap();
    let f = move |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
        let (av, bv) = (tape.param(s, a), tape.param(s, b));
        let y = tape.matmul(av, bv)?;
        Ok(tape.sum(y))
    };
    let mut tape = Tape::new();
    let loss = f(&mut tape, &store).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(a).grad.as_ref().unwrap().data(), &[2., 5.]);
    assert!(store.get(b).grad.is_none());
    let report = grad_check(f, &mut store, GradCheckConfig::default()).unwrap();
    assert!(report.passed && report.max_rel_err < 1e-8, "{report:?}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[0., 0.]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[3], &[1., 2., 3.]));
    let y = tape.softmax(x, 0).unwrap();
    let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
    let oracle: Vec<f64> = [1f64, 2., 3.].iter().map(|v| v.exp() / z).collect();
    assert_close(tape.value(y).data(), &oracle, 1e-12);
    assert_close(tape.value(y).data(), &[0.0900, 0.2447, 0.6652], 1e-4);

    let x = tape.constant(t(&[2], &[3.0, 1003.0]));
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    assert!(v.iter().all(|x| x.is_finite()));
    assert!(v[0] < 1e-300 && (v[1] - 1.0).abs() < 1e-15);

    assert!(tape.softmax(x, 1).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let ones = tape.constant(Tensor::full([2], 1.0));
    let zeros = tape.constant(Tensor::zeros([2]));

    let x = tape.constant(t(&[1, 2], &[4., 4.]));
    let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0., 0.]);

    let x = tape.constant(t(&[1, 2], &[1., 3.]));
    let y = tape.layer_norm(x, ones, zeros, 1e-12).unwrap();
    assert_close(tape.value(y).data(), &[-1., 1.], 1e-3);

    let g0 = tape.constant(Tensor::zeros([2]));
    let beta = tape.constant(t(&[2], &[0.25, -0.5]));
    let x = tape.constant(t(&[3, 2], &[1., 3., -2., 7., 0.5, 0.1]));
    let y = tape.layer_norm(x, g0, beta, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25, -0.5, 0.25, -0.5, 0.25, -0.5]);
}

#[test]
fn conv1d_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 4], &[1., 2., 3., 4.]));
    let w = tape.constant(t(&[1, 1, 3], &[1., 0., -1.]));
    let y = tape.conv1d(x, w, None, 1, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[-2., -2., -2., 3.]);

    let delta = tape.constant(t(&[1, 1, 3], &[0., 1., 0.]));
    let y = tape.conv1d(x, delta, None, 1, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);

    // Strided: L_out = floor((4 + 0 − 3) / 2) + 1 = 1.
    let y = tape.conv1d(x, w, None, 2, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1]);

    let big = tape.constant(t(&[1, 1, 7], &[0.; 7]));
    assert!(matches!(tape.conv1d(x, big, None, 1, 1), Err(Error::Shape(_))));
}

#[test]
fn conv1d_gradient_tight() {
    for seed in 0..3 {
        let mut rng = Rng::new(100 + seed);
        let mut store = ParamStore::<f64>::new();
        let x = store.insert("x", random(&[2, 6], &mut rng), true, ParamGroup::Adapter).unwrap();
        let w = store.insert("w", random(&[2, 2, 3], &mut rng), true, ParamGroup::Adapter).unwrap();
        let b = store.insert("b", random(&[2], &mut rng), true, ParamGroup::Adapter).unwrap();
        let r = store.insert("r", random(&[2, 6], &mut rng), false, ParamGroup::Backbone).unwrap();
        let f = move |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let (xv, wv, bv, rv) = (tape.param(s, x), tape.param(s, w), tape.param(s, b), tape.param(s, r));
            let y = tape.conv1d(xv, wv, Some(bv), 1, 1)?;
            let y = tape.mul(y, rv)?;
            Ok(tape.sum(y))
        };
        let report = grad_check(f, &mut store, GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.to_text());
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[-1., 2.]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0., 2.]);

    let x = tape.constant(t(&[2, 2], &[1., 3., 5., 7.]));
    let y = tape.mean_axis(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[3., 5.]);
    assert_eq!(tape.value(y).shape(), &[2]);

    let mut rng = Rng::new(1);
    let m = tape.constant(random(&[3, 5], &mut rng));
    let p = tape.permute(m, &[1, 0]).unwrap();
    let pp = tape.permute(p, &[1, 0]).unwrap();
    assert_eq!(tape.value(pp), tape.value(m));
    assert_eq!(tape.value(p).shape(), &[5, 3]);

    let a = tape.constant(t(&[1, 2], &[1., 2.]));
    let b = tape.constant(t(&[1, 3], &[3., 4., 5.]));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c).data(), &[1., 2., 3., 4., 5.]);
    assert!(tape.concat(&[a, b], 0).is_err());
    assert!(tape.add(a, b).is_err());

    let g = tape.constant(t(&[3], &[0., 1., -1.]));
    let gy = tape.gelu(g);
    // x·Φ(x) with Φ(1) = 0.841344746...
    assert_close(tape.value(gy).data(), &[0., 0.841_344_746_068_543, -0.158_655_253_931_457], 1e-12);
    let sg = tape.sigmoid(g);
    assert_close(tape.value(sg).data(), &[0.5, 1. / (1. + (-1f64).exp()), 1. / (1. + 1f64.exp())], 1e-15);
}

#[test]
fn bce_examples() {
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(t(&[1, 1], &[800.0]));
    let l = tape.bce_with_logits(s, &t(&[1, 1], &[1.0])).unwrap();
    assert_eq!(tape.value(l).data()[0], 0.0);

    let s = tape.constant(t(&[1, 1], &[0.0]));
    let l = tape.bce_with_logits(s, &t(&[1, 1], &[1.0])).unwrap();
    assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);

    let s = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    let l = tape.bce_with_logits(s, &t(&[1, 2], &[1.0, 0.0])).unwrap();
    assert!((tape.value(l).data()[0] - 2.0 * 2f64.ln()).abs() < 1e-15);

    // Mean over batch rows, sum over tasks.
    let s = tape.constant(t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]));
    let l = tape.bce_with_logits(s, &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    assert!((tape.value(l).data()[0] - 2.0 * 2f64.ln()).abs() < 1e-15);

    let s = tape.constant(t(&[1, 1], &[0.0]));
    assert!(matches!(tape.bce_with_logits(s, &t(&[1, 1], &[0.5])), Err(Error::Validation(_))));
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(4);
    let x = store.insert("x", random(&[3, 2], &mut rng), true, ParamGroup::Adapter).unwrap();
    let mut tape = Tape::new();
    let xv = tape.param(&store, x);
    let s = tape.sum(xv);
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.get(x).grad.as_ref().unwrap().data(), &[1.0; 6]);

    let mut store = ParamStore::<f64>::new();
    let x = store.insert("x", t(&[2], &[1., 2.]), true, ParamGroup::Adapter).unwrap();
    let mut tape = Tape::new();
    let xv = tape.param(&store, x);
    let sq = tape.mul(xv, xv).unwrap();
    let s = tape.sum(sq);
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.get(x).grad.as_ref().unwrap().data(), &[2., 4.]);
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.get(x).grad.as_ref().unwrap().data(), &[4., 8.]);

    // Non-scalar loss.
    assert!(matches!(tape.backward(sq, &mut store), Err(Error::Shape(_))));
}

#[test]
fn backward_leaves_frozen_params_untouched() {
    let mut store = ParamStore::<f64>::new();
    let w = store.insert("w", t(&[2, 2], &[1., 2., 3., 4.]), false, ParamGroup::Backbone).unwrap();
    let v = store.insert("v", t(&[2, 1], &[1., 1.]), true, ParamGroup::Adapter).unwrap();
    let mut tape = Tape::new();
    let (wv, vv) = (tape.param(&store, w), tape.param(&store, v));
    let y = tape.matmul(wv, vv).unwrap();
    let s = tape.sum(y);
    let grads = tape.backward(s, &mut store).unwrap();
    assert!(store.get(w).grad.is_none());
    assert!(grads.get(wv).is_none());
    assert_eq!(store.get(v).grad.as_ref().unwrap().data(), &[4., 6.]);
}

#[test]
fn grad_check_of_sum_is_exact() {
    let mut store = ParamStore::<f64>::new();
    let x = store.insert("x", t(&[4], &[0.3, -1.0, 2.0, 5.0]), true, ParamGroup::Adapter).unwrap();
    let report = grad_check(
        move |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let v = tape.param(s, x);
            Ok(tape.sum(v))
        },
        &mut store,
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed);
    assert!(report.max_rel_err < 1e-9);
}

/// `x²` whose backward claims `4x` instead of `2x`.
fn corrupted_square(tape: &mut Tape<f64>, x: Var) -> Var {
    let v = tape.value(x).clone();
    let data = v.data().iter().map(|a| a * a).collect();
    let value = Tensor::new(v.shape().to_vec(), data).unwrap();
    tape.custom(
        &[x],
        value,
        Box::new(|inputs, _out, g| {
            let gx = inputs[0].data().iter().zip(g.data()).map(|(x, g)| 4.0 * x * g).collect();
            vec![Some(Tensor::new(g.shape().to_vec(), gx).unwrap())]
        }),
    )
}

#[test]
fn grad_check_detects_corrupted_backward() {
    let mut store = ParamStore::<f64>::new();
    let x = store.insert("x", t(&[3], &[0.5, -1.5, 2.0]), true, ParamGroup::Adapter).unwrap();
    let report = grad_check(
        move |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let v = tape.param(s, x);
            let y = corrupted_square(tape, v);
            Ok(tape.sum(y))
        },
        &mut store,
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(!report.passed);
    assert!((report.max_rel_err - 0.5).abs() < 1e-6, "{report:?}");
    assert!(report.to_text().contains("FAIL"));
}

#[test]
fn grad_check_reports_non_finite_location() {
    let mut store = ParamStore::<f64>::new();
    let x = store.insert("x", t(&[2], &[1.0, 1e-6]), true, ParamGroup::Adapter).unwrap();
    let err = grad_check(
        move |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let v = tape.param(s, x);
            let val = tape.value(v).clone();
            let out = Tensor::new([2], val.data().iter().map(|a| if *a < 5e-6 { f64::NAN } else { *a }).collect())?;
            let y = tape.custom(&[v], out, Box::new(|_, _, g| vec![Some(g.clone())]));
            Ok(tape.sum(y))
        },
        &mut store,
        GradCheckConfig::default(),
    )
    .unwrap_err();
    assert!(err.is_numerical());
}

/// Each differentiable op, randomized shapes and values, three seeds.
#[test]
fn every_op_passes_grad_check() {
    for seed in 0..3u64 {
        let suite = op_suite(seed).unwrap();
        assert!(suite.len() >= 24);
        for (name, report) in suite {
            assert!(report.passed, "{name} seed {seed}\n{}", report.to_text());
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut rng = Rng::new(seed);
        let n = rows * cols;
        let x = Tensor::new([rows, cols], (0..n).map(|_| scale * rng.normal()).collect()).unwrap();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv, 1).unwrap();
        for row in tape.value(y).rows() {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn f32_and_f64_forward_agree(seed in 0u64..500) {
        let mut rng = Rng::new(seed);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let mut t64 = Tape::<f64>::new();
        let (a64, b64) = (t64.constant(a.clone()), t64.constant(b.clone()));
        let y64 = t64.matmul(a64, b64).unwrap();
        let y64 = t64.gelu(y64);
        let mut t32 = Tape::<f32>::new();
        let (a32, b32) = (t32.constant(a.cast()), t32.constant(b.cast()));
        let y32 = t32.matmul(a32, b32).unwrap();
        let y32 = t32.gelu(y32);
        for (x, y) in t64.value(y64).data().iter().zip(t32.value(y32).data()) {
            prop_assert!((x - *y as f64).abs() < 1e-5);
        }
    }
}
