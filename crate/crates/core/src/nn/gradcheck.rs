use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mode, Var};
use super::params::{ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Difference step for single layers.
pub const STEP: f64 = 1e-6;
/// Difference step for whole networks. At `STEP` the last-bit roundoff of a
/// deep forward pass, divided by the step, swamps the weakest derivatives.
pub const MODEL_STEP: f64 = 1e-5;
/// Denominator floor; keeps structurally zero gradients (a conv bias feeding
/// batch norm) from dividing roundoff by roundoff.
pub const FLOOR: f64 = 1e-6;

/// Worst relative error between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Compares `analytic` with central differences of `loss` for every
/// trainable entry of `store`, at most `per_param` entries per tensor
/// (spread evenly) when given.
pub fn check_params(
    store: &mut ParameterStore,
    analytic: &dyn Fn(&ParameterStore) -> Result<Vec<Option<Vec<f64>>>>,
    loss: &dyn Fn(&ParameterStore) -> Result<f64>,
    per_param: Option<usize>,
    step: f64,
) -> Result<GradCheck> {
    let grads = analytic(store)?;
    let mut out = GradCheck { max_relative_error: 0.0, worst: None, checked: 0 };
    let ids: Vec<ParamId> = store.ids().filter(|i| store.is_trainable(*i)).collect();
    for id in ids {
        let len = store.get(id).len();
        let picks: Vec<usize> = match per_param {
            Some(p) if p < len => (0..p).map(|k| k * len / p).collect(),
            _ => (0..len).collect(),
        };
        for k in picks {
            let orig = store.get(id).data[k];
            store.get_mut(id).data[k] = orig + step;
            let up = loss(store)?;
            store.get_mut(id).data[k] = orig - step;
            let down = loss(store)?;
            store.get_mut(id).data[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grads.get(id.0).and_then(|g| g.as_ref()).map_or(0.0, |g| g[k]);
            let e = relative_error(a, numeric);
            out.checked += 1;
            if e > out.max_relative_error || out.worst.is_none() {
                out.max_relative_error = out.max_relative_error.max(e);
                out.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    Ok(out)
}

/// Same comparison for the gradient with respect to an input vector.
pub fn check_input(x: &mut [f64], analytic: &[f64], loss: &dyn Fn(&[f64]) -> Result<f64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + STEP;
        let up = loss(x)?;
        x[k] = orig - STEP;
        let down = loss(x)?;
        x[k] = orig;
        worst = worst.max(relative_error(analytic[k], (up - down) / (2.0 * STEP)));
    }
    Ok(worst)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Worst relative error of d(probe·op(x))/dx for `x` of the given shape,
/// drawn uniformly from `[-1, 1)`. The probe weights are fixed and uneven.
pub fn check_op(shape: &[usize], seed: u64, op: &dyn Fn(&mut Graph, Var) -> Result<Var>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let mut x = rand_vec(&mut rng, n);
    let run = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new(Mode::Train);
        let v = g.input(Tensor::new(shape.to_vec(), x.to_vec())?)?;
        let y = op(&mut g, v)?;
        let w: Vec<f64> = (0..g.value(y).len()).map(|k| ((k * 37 % 17) as f64 - 8.0) / 8.0).collect();
        let l = g.dot(y, &w)?;
        g.backward(l)?;
        Ok((g.value(l).data[0], g.grad(v).map_or(vec![0.0; n], |d| d.to_vec())))
    };
    let (_, analytic) = run(&x)?;
    check_input(&mut x, &analytic, &|x| run(x).map(|r| r.0))
}

/// Input and weight gradients of every layer type, one named row each.
pub fn layer_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::new(shape.to_vec(), rand_vec(rng, shape.iter().product()));
    let (dw, db, dx) = (t(&[4, 5], &mut rng)?, t(&[4], &mut rng)?, t(&[3, 5], &mut rng)?);
    let (cw, cb, cx) = (t(&[3, 2, 3, 3], &mut rng)?, t(&[3], &mut rng)?, t(&[2, 2, 5, 4], &mut rng)?);
    let (tw, tb) = (t(&[2, 3, 2, 2], &mut rng)?, t(&[3], &mut rng)?);
    let target = rand_vec(&mut rng, 12);
    let mut store = ParameterStore::new();
    let mean = store.add_buffer("mean", Tensor::zeros(&[3]))?;
    let var = store.add_buffer("var", Tensor::full(&[3], 1.0))?;
    let s = seed.wrapping_mul(31);
    let mut rows = vec![
        ("dense/input", check_op(&[3, 5], s + 1, &|g, v| {
            let (w, b) = (g.input(dw.clone())?, g.input(db.clone())?);
            g.dense(v, w, b)
        })?),
        ("dense/weight", check_op(&[4, 5], s + 2, &|g, v| {
            let (x, b) = (g.input(dx.clone())?, g.input(db.clone())?);
            g.dense(x, v, b)
        })?),
        ("dense/bias", check_op(&[4], s + 3, &|g, v| {
            let (x, w) = (g.input(dx.clone())?, g.input(dw.clone())?);
            g.dense(x, w, v)
        })?),
        ("gaussian", check_op(&[3, 5], s + 4, &|g, v| g.gaussian(v, 0.5))?),
        ("gaussian-radial", check_op(&[3, 5], s + 5, &|g, v| g.gaussian_radial(v, 0.9))?),
        ("sigmoid", check_op(&[3, 5], s + 6, &|g, v| g.sigmoid(v))?),
        ("softmax-xent", check_op(&[4, 2], s + 7, &|g, v| g.softmax_xent(v, &[0, 1, 1, 0], [1.0, 2.0]))?),
        ("mse", check_op(&[12], s + 8, &|g, v| g.mse(v, &target))?),
        ("conv/input", check_op(&[2, 2, 5, 4], s + 9, &|g, v| {
            let (w, b) = (g.input(cw.clone())?, g.input(cb.clone())?);
            g.conv2d(v, w, b, 1, 1)
        })?),
        ("conv/weight", check_op(&[3, 2, 3, 3], s + 10, &|g, v| {
            let (x, b) = (g.input(cx.clone())?, g.input(cb.clone())?);
            g.conv2d(x, v, b, 1, 1)
        })?),
        ("conv-strided/input", check_op(&[1, 2, 7, 7], s + 11, &|g, v| {
            let (w, b) = (g.input(cw.clone())?, g.input(cb.clone())?);
            g.conv2d(v, w, b, 2, 0)
        })?),
        ("conv-transpose/input", check_op(&[2, 2, 3, 3], s + 12, &|g, v| {
            let (w, b) = (g.input(tw.clone())?, g.input(tb.clone())?);
            g.conv_transpose2d(v, w, b, 2)
        })?),
        ("conv-transpose/weight", check_op(&[2, 3, 2, 2], s + 13, &|g, v| {
            let (x, b) = (g.input(cx.clone())?, g.input(tb.clone())?);
            g.conv_transpose2d(x, v, b, 2)
        })?),
        ("maxpool", check_op(&[2, 2, 4, 4], s + 14, &|g, v| g.maxpool2(v))?),
        ("batchnorm", check_op(&[2, 3, 3, 2], s + 15, &|g, v| {
            let ga = g.input(Tensor::new(vec![3], vec![1.2, 0.7, -0.4])?)?;
            let be = g.input(Tensor::new(vec![3], vec![0.1, -0.2, 0.3])?)?;
            g.batchnorm(&store, v, ga, be, mean, var)
        })?),
        ("concat", check_op(&[2, 3, 2, 2], s + 16, &|g, v| {
            let y = g.sigmoid(v)?;
            g.concat(v, y)
        })?),
    ];
    // clipped ReLU is checked away from its two kinks
    let mut x: Vec<f64> = (0..20).map(|k| [-0.5, 0.03, 0.07, 0.6][k % 4] + rng.random_range(-0.02..0.02)).collect();
    let run = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new(Mode::Train);
        let v = g.input(Tensor::new(vec![20], x.to_vec())?)?;
        let y = g.clipped_relu(v)?;
        let l = g.dot(y, &(0..20).map(|k| k as f64 - 9.5).collect::<Vec<_>>())?;
        g.backward(l)?;
        Ok((g.value(l).data[0], g.grad(v).map_or(vec![0.0; 20], |d| d.to_vec())))
    };
    let (_, analytic) = run(&x)?;
    rows.push(("clipped-relu", check_input(&mut x, &analytic, &|x| run(x).map(|r| r.0))?));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes() {
        let rows = layer_suite(3).unwrap();
        assert_eq!(rows.len(), 17);
        for (name, e) in rows {
            assert!(e < 1e-5, "{name}: {e:e}");
        }
    }
}
