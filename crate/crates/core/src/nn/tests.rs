use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_op;
use super::*;
use crate::error::Result;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn check_unary(shape: &[usize], seed: u64, op: &dyn Fn(&mut Graph, Var) -> Result<Var>) -> f64 {
    check_op(shape, seed, op).unwrap()
}

#[test]
fn elementwise_ops_match_differences() {
    assert!(check_unary(&[3, 5], 1, &|g, v| g.gaussian(v, 0.5)) < 1e-5);
    assert!(check_unary(&[3, 5], 2, &|g, v| g.gaussian_radial(v, 0.9)) < 1e-5);
    assert!(check_unary(&[3, 5], 3, &|g, v| g.sigmoid(v)) < 1e-5);
    assert!(check_unary(&[2, 2, 4, 4], 4, &|g, v| g.maxpool2(v)) < 1e-5);
}

#[test]
fn clipped_relu_values_and_kinks() {
    let mut g = Graph::new(Mode::Train);
    let x = g.input(Tensor::new(vec![5], vec![-1.0, 0.0, 0.05, 0.1, 3.0]).unwrap()).unwrap();
    let y = g.clipped_relu(x).unwrap();
    assert_eq!(g.value(y).data, vec![0.0, 0.0, 0.05, 0.1, 0.1]);
    let l = g.dot(y, &[1.0; 5]).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    // away from the kinks
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..0.09)).collect();
    let mut g = Graph::new(Mode::Train);
    let x = g.input(Tensor::new(vec![20], xs).unwrap()).unwrap();
    let y = g.clipped_relu(x).unwrap();
    let l = g.dot(y, &[2.0; 20]).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|v| *v == 2.0));
}

#[test]
fn conv_layers_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = rand_vec(&mut rng, 3 * 2 * 3 * 3);
    let b = rand_vec(&mut rng, 3);
    let conv = |g: &mut Graph, v: Var| {
        let w = g.input(Tensor::new(vec![3, 2, 3, 3], w.clone())?)?;
        let b = g.input(Tensor::new(vec![3], b.clone())?)?;
        g.conv2d(v, w, b, 1, 1)
    };
    assert!(check_unary(&[2, 2, 5, 4], 7, &conv) < 1e-5);
    let strided = |g: &mut Graph, v: Var| {
        let w = g.input(Tensor::new(vec![3, 2, 3, 3], w.clone())?)?;
        let b = g.input(Tensor::new(vec![3], b.clone())?)?;
        g.conv2d(v, w, b, 2, 0)
    };
    assert!(check_unary(&[1, 2, 7, 7], 8, &strided) < 1e-5);
    let wt = rand_vec(&mut rng, 2 * 3 * 2 * 2);
    let convt = |g: &mut Graph, v: Var| {
        let w = g.input(Tensor::new(vec![2, 3, 2, 2], wt.clone())?)?;
        let b = g.input(Tensor::new(vec![3], b.clone())?)?;
        g.conv_transpose2d(v, w, b, 2)
    };
    assert!(check_unary(&[2, 2, 3, 3], 9, &convt) < 1e-5);
}

#[test]
fn conv_transpose_is_the_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w = Tensor::new(vec![2, 3, 2, 2], rand_vec(&mut rng, 24)).unwrap();
    let x = Tensor::new(vec![1, 3, 6, 6], rand_vec(&mut rng, 108)).unwrap();
    let y = Tensor::new(vec![1, 2, 3, 3], rand_vec(&mut rng, 18)).unwrap();
    let mut g = Graph::new(Mode::Train);
    let (xv, wv, yv) = (g.input(x.clone()).unwrap(), g.input(w).unwrap(), g.input(y.clone()).unwrap());
    let b2 = g.input(Tensor::zeros(&[2])).unwrap();
    let b3 = g.input(Tensor::zeros(&[3])).unwrap();
    let cx = g.conv2d(xv, wv, b2, 2, 0).unwrap();
    let ty = g.conv_transpose2d(yv, wv, b3, 2).unwrap();
    let lhs: f64 = g.value(cx).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(ty).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
}

#[test]
fn batchnorm_and_concat_match_differences() {
    let store = {
        let mut s = ParameterStore::new();
        s.add_buffer("m", Tensor::zeros(&[3])).unwrap();
        s.add_buffer("v", Tensor::full(&[3], 1.0)).unwrap();
        s
    };
    let (m, v) = (store.find("m").unwrap(), store.find("v").unwrap());
    let bn = |g: &mut Graph, x: Var| {
        let ga = g.input(Tensor::new(vec![3], vec![1.2, 0.7, -0.4])?)?;
        let be = g.input(Tensor::new(vec![3], vec![0.1, -0.2, 0.3])?)?;
        g.batchnorm(&store, x, ga, be, m, v)
    };
    assert!(check_unary(&[2, 3, 3, 2], 11, &bn) < 1e-5);
    let cat = |g: &mut Graph, x: Var| {
        let s = g.sigmoid(x)?;
        g.concat(x, s)
    };
    assert!(check_unary(&[2, 3, 2, 2], 12, &cat) < 1e-5);
}

#[test]
fn batchnorm_train_normalizes_and_queues_running_stats() {
    let mut s = ParameterStore::new();
    let ga = s.add("g", Tensor::full(&[1], 1.0)).unwrap();
    let be = s.add("b", Tensor::zeros(&[1])).unwrap();
    let m = s.add_buffer("m", Tensor::zeros(&[1])).unwrap();
    let v = s.add_buffer("v", Tensor::full(&[1], 1.0)).unwrap();
    let mut g = Graph::new(Mode::Train);
    let x = g.input(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap()).unwrap();
    let (gv, bv) = (g.param(&s, ga), g.param(&s, be));
    let y = g.batchnorm(&s, x, gv, bv, m, v).unwrap();
    let mean: f64 = g.value(y).data.iter().sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
    g.commit_buffers(&mut s);
    assert!((s.get(m).data[0] - 0.4).abs() < 1e-12);
    assert!((s.get(v).data[0] - (0.9 + 0.1 * 5.0)).abs() < 1e-12);
    let mut e = Graph::new(Mode::Eval);
    let x = e.input(Tensor::new(vec![1, 1, 1, 1], vec![4.0]).unwrap()).unwrap();
    let (gv, bv) = (e.param(&s, ga), e.param(&s, be));
    let y = e.batchnorm(&s, x, gv, bv, m, v).unwrap();
    let want = (4.0 - 0.4) / (1.4f64 + BN_EPS).sqrt();
    assert!((e.value(y).data[0] - want).abs() < 1e-12);
    assert!(e.buffer_updates.is_empty());
}

const BN_EPS: f64 = graph::BN_EPSILON;

#[test]
fn losses_match_differences() {
    let target: Vec<f64> = (0..12).map(|k| (k % 3) as f64 * 0.4).collect();
    assert!(check_unary(&[3, 4], 13, &|g, v| g.mse(v, &target)) < 1e-5);
    let labels = [0, 1, 1, 0, 1];
    assert!(check_unary(&[5, 2], 14, &|g, v| g.softmax_xent(v, &labels, [1.0, 1.0])) < 1e-5);
    assert!(check_unary(&[5, 2], 15, &|g, v| g.softmax_xent(v, &labels, [0.3, 2.0])) < 1e-5);
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let (p, lse) = softmax2(1000.0, 0.0);
    assert!(p[0] == 1.0 && p[1] >= 0.0 && (lse - 1000.0).abs() < 1e-12);
    let mut g = Graph::new(Mode::Train);
    let x = g.input(Tensor::new(vec![1, 2], vec![800.0, -800.0]).unwrap()).unwrap();
    let l = g.softmax_xent(x, &[1], [1.0, 1.0]).unwrap();
    assert!((g.value(l).data[0] - 1600.0).abs() < 1e-9);
    assert!((0.0..1e-300).contains(&sigmoid(-800.0)));
    assert!(sigmoid(800.0) == 1.0);
}

#[test]
fn dense_matches_differences_and_param_grads_accumulate() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut s = ParameterStore::new();
    let w = s.add_uniform("w", &[4, 3], 3, &mut rng).unwrap();
    let b = s.add("b", Tensor::new(vec![4], rand_vec(&mut rng, 4)).unwrap()).unwrap();
    let x = Tensor::new(vec![5, 3], rand_vec(&mut rng, 15)).unwrap();
    let loss = |s: &ParameterStore| -> Result<(f64, Gradients)> {
        let mut g = Graph::new(Mode::Train);
        let xv = g.input(x.clone())?;
        let (wv, bv) = (g.param(s, w), g.param(s, b));
        let h = g.dense(xv, wv, bv)?;
        let h = g.gaussian(h, 0.5)?;
        // the same parameters used twice
        let (wv2, bv2) = (g.param(s, w), g.param(s, b));
        let h2 = g.dense(xv, wv2, bv2)?;
        let sum = g.add(h, h2)?;
        let l = g.dot(sum, &(0..20).map(|k| (k as f64).sin()).collect::<Vec<_>>())?;
        g.backward(l)?;
        Ok((g.value(l).data[0], g.param_grads(s)))
    };
    let r = gradcheck::check_params(&mut s, &|s| loss(s).map(|r| r.1 .0), &|s| loss(s).map(|r| r.0), None, gradcheck::STEP).unwrap();
    assert_eq!(r.checked, 16);
    assert!(r.max_relative_error < 1e-5, "{r:?}");
}

#[test]
fn shape_errors_and_non_finite_values_are_reported() {
    let mut g = Graph::new(Mode::Train);
    let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.input(Tensor::zeros(&[3, 2])).unwrap();
    assert!(g.add(a, b).is_err());
    assert!(g.maxpool2(a).is_err());
    assert!(g.gaussian(a, 0.0).is_err());
    assert!(g.softmax_xent(a, &[0, 1], [1.0, 1.0]).is_err());
    assert!(g.input(Tensor::new(vec![1], vec![f64::NAN]).unwrap()).is_err());
    let big = g.input(Tensor::new(vec![1, 1], vec![1e300]).unwrap()).unwrap();
    let w = g.input(Tensor::new(vec![1, 1], vec![1e300]).unwrap()).unwrap();
    let bias = g.input(Tensor::zeros(&[1])).unwrap();
    assert!(matches!(g.dense(big, w, bias), Err(crate::Error::NonFinite(_))));
}

#[test]
fn constants_receive_no_adjoint_and_leave_weight_gradients_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::new(vec![2, 2, 4, 4], rand_vec(&mut rng, 64)).unwrap();
    let w = Tensor::new(vec![3, 2, 3, 3], rand_vec(&mut rng, 54)).unwrap();
    let run = |constant: bool| {
        let mut g = Graph::new(Mode::Train);
        let xv = if constant { g.constant(x.clone()) } else { g.input(x.clone()) }.unwrap();
        let wv = g.input(w.clone()).unwrap();
        let bv = g.input(Tensor::zeros(&[3])).unwrap();
        let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
        let l = g.mse(y, &[0.5; 96]).unwrap();
        g.backward(l).unwrap();
        (g.grad(xv).map(|s| s.to_vec()), g.grad(wv).unwrap().to_vec())
    };
    let (gx_c, gw_c) = run(true);
    let (gx, gw) = run(false);
    assert!(gx_c.is_none() && gx.is_some());
    assert_eq!(gw_c, gw);
}
