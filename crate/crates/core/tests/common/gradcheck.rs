//! Analytic gradients against central finite differences.

use super::rng;
use odimo::cost::{ops_proportional, Objective};
use odimo::graph::{Graph, NetworkSpec};
use odimo::model::{Exec, Model};
use odimo::search::{total_loss, SearchConfig, SearchState};
use odimo::tensor::{batch_norm_train, concat_channels, cross_entropy, smooth_max, stack, Float, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;
const TOL: f64 = if cfg!(feature = "f64") { 1e-7 } else { 1e-3 };
/// Double precision affords a smaller step.
const EPS_SCALE: f64 = if cfg!(feature = "f64") { 0.1 } else { 1.0 };

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| r.random_range(lo..hi) as Float).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks are never crossed.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = r.random_range(0.1..1.0);
            (if r.random_bool(0.5) { m } else { -m }) as Float
        })
        .collect();
    Tensor::param(shape, v).unwrap()
}

/// Distinct values on a 0.05 grid, so max-pool winners never tie.
fn distinct(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<Float> = (0..n).map(|i| i as Float * 0.05 - 1.0).collect();
    v.shuffle(r);
    Tensor::param(shape, v).unwrap()
}

fn project(y: &[Float], r: &[Float]) -> f64 {
    y.iter().zip(r).map(|(a, b)| *a as f64 * *b as f64).sum()
}

/// Checks d(sum(r * f(params)))/d(params) for a fixed random `r`; the error
/// is measured relative to the norm of the whole gradient.
fn check(name: &str, seed: u64, params: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor, eps: f64) {
    let eps = eps * EPS_SCALE;
    let mut rr = rng(seed ^ 0x5eed);
    let y = f(params);
    let proj: Vec<Float> = (0..y.numel()).map(|_| rr.random_range(-1.0..1.0) as Float).collect();
    let rt = Tensor::new(y.shape(), proj.clone()).unwrap();
    params.iter().for_each(|p| p.zero_grad());
    y.mul(&rt).unwrap().sum().backward().unwrap();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for p in params {
        analytic.extend(p.grad().unwrap_or_else(|| vec![0.0; p.numel()]).iter().map(|&g| g as f64));
        let base = p.to_vec();
        for j in 0..base.len() {
            // Five-point stencil, fourth-order accurate.
            let at = |k: f64| {
                let mut v = base.clone();
                v[j] = (base[j] as f64 + k * eps) as Float;
                p.set_data(v).unwrap();
                project(&f(params).to_vec(), &proj)
            };
            numeric.push((-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * eps));
        }
        p.set_data(base).unwrap();
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-6);
    assert!(diff / norm <= TOL, "{name} (seed {seed}): relative error {:.2e}", diff / norm);
}

pub fn elementwise_ops() {
    for s in 0..INSTANCES {
        let mut r = rng(s);
        let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
        let b = uniform(&mut r, &[3, 4], -1.0, 1.0);
        check("add", s, &[a.clone(), b.clone()], |p| p[0].add(&p[1]).unwrap(), 1e-2);
        check("sub", s, &[a.clone(), b.clone()], |p| p[0].sub(&p[1]).unwrap(), 1e-2);
        check("mul", s, &[a.clone(), b.clone()], |p| p[0].mul(&p[1]).unwrap(), 1e-2);
        check("mul_scalar", s, std::slice::from_ref(&a), |p| p[0].mul_scalar(-1.7), 1e-2);
        check("div_scalar", s, std::slice::from_ref(&a), |p| p[0].div_scalar(3.0), 1e-2);
        check("add_scalar", s, std::slice::from_ref(&a), |p| p[0].add_scalar(0.3), 1e-2);
        check("exp", s, std::slice::from_ref(&a), |p| p[0].exp(), 1e-2);
        check("relu", s, &[off_zero(&mut r, &[3, 4])], |p| p[0].relu(), 1e-2);
        check("sum", s, std::slice::from_ref(&a), |p| p[0].sum(), 1e-2);
        check("mean", s, std::slice::from_ref(&a), |p| p[0].mean(), 1e-2);
        check("reshape", s, std::slice::from_ref(&a), |p| p[0].reshape(&[4, 3]).unwrap(), 1e-2);
        let u = uniform(&mut r, &[5], -1.0, 1.0);
        let v = uniform(&mut r, &[5], -1.0, 1.0);
        check("dot", s, &[u, v], |p| p[0].dot(&p[1]).unwrap(), 1e-2);
    }
}

pub fn row_and_column_ops() {
    for s in 0..INSTANCES {
        let mut r = rng(100 + s);
        let m = uniform(&mut r, &[4, 3], -1.0, 1.0);
        let w = uniform(&mut r, &[4], -1.0, 1.0);
        check("scale_rows", s, &[m.clone(), w], |p| p[0].scale_rows(&p[1]).unwrap(), 1e-2);
        check("select_column", s, std::slice::from_ref(&m), |p| p[0].select_column(1).unwrap(), 1e-2);
        check("sum_rows", s, std::slice::from_ref(&m), |p| p[0].sum_rows().unwrap(), 1e-2);
        check("index", s, &[w_of(&mut r)], |p| p[0].index(2).unwrap(), 1e-2);
        let tau = r.random_range(0.3..2.0) as Float;
        check("softmax_temp", s, std::slice::from_ref(&m), move |p| p[0].softmax_temp(tau).unwrap(), 1e-2);
        let parts: Vec<Tensor> = (0..3).map(|_| uniform(&mut r, &[1], 0.0, 5.0)).collect();
        check("stack", s, &parts, |p| stack(p).unwrap(), 1e-2);
        let beta = r.random_range(0.5..5.0) as Float;
        check("smooth_max", s, &parts, move |p| smooth_max(p, beta).unwrap(), 1e-2);
    }
}

fn w_of(r: &mut ChaCha8Rng) -> Tensor {
    uniform(r, &[4], -1.0, 1.0)
}

pub fn convolution_and_linear() {
    for s in 0..INSTANCES {
        let mut r = rng(200 + s);
        let (stride, pad) = [(1, 0), (1, 1), (2, 1)][(s % 3) as usize];
        let x = uniform(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
        let w = uniform(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
        let b = uniform(&mut r, &[4], -0.5, 0.5);
        check("conv2d", s, &[x.clone(), w, b], move |p| p[0].conv2d(&p[1], Some(&p[2]), stride, pad).unwrap(), 1e-2);
        let dw = uniform(&mut r, &[3, 1, 3, 3], -0.5, 0.5);
        let db = uniform(&mut r, &[3], -0.5, 0.5);
        check(
            "depthwise_conv2d",
            s,
            &[x.clone(), dw, db],
            move |p| p[0].depthwise_conv2d(&p[1], Some(&p[2]), stride, pad).unwrap(),
            1e-2,
        );
        let f = uniform(&mut r, &[3, 6], -1.0, 1.0);
        let lw = uniform(&mut r, &[5, 6], -0.5, 0.5);
        let lb = uniform(&mut r, &[5], -0.5, 0.5);
        check("linear", s, &[f, lw, lb], |p| p[0].linear(&p[1], Some(&p[2])).unwrap(), 1e-2);
    }
}

pub fn pooling_and_reshaping() {
    for s in 0..INSTANCES {
        let mut r = rng(300 + s);
        check("max_pool2d", s, &[distinct(&mut r, &[2, 2, 4, 4])], |p| p[0].max_pool2d(2).unwrap(), 1e-2);
        let x = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
        check("global_avg_pool", s, std::slice::from_ref(&x), |p| p[0].global_avg_pool().unwrap(), 1e-2);
        check("flatten", s, std::slice::from_ref(&x), |p| p[0].flatten().unwrap(), 1e-2);
        check("slice_channels", s, std::slice::from_ref(&x), |p| p[0].slice_channels(1..3).unwrap(), 1e-2);
        let y = uniform(&mut r, &[2, 2, 4, 4], -1.0, 1.0);
        check("concat_channels", s, &[x, y], |p| concat_channels(p).unwrap(), 1e-2);
    }
}

pub fn losses_and_normalization() {
    for s in 0..INSTANCES {
        let mut r = rng(400 + s);
        let logits = uniform(&mut r, &[4, 5], -2.0, 2.0);
        let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
        check("cross_entropy", s, &[logits], move |p| cross_entropy(&p[0], &labels).unwrap(), 1e-2);
        let x = uniform(&mut r, &[4, 3, 2, 2], -1.0, 1.0);
        let g = uniform(&mut r, &[3], 0.5, 1.5);
        let b = uniform(&mut r, &[3], -0.5, 0.5);
        check("batch_norm_train", s, &[x, g, b], |p| batch_norm_train(&p[0], &p[1], &p[2], 1e-5).unwrap().0, 1e-2);
    }
}

const TWO_LAYER: &str = r#"
name = "two_layer"
input = [1, 4, 4]
classes = 3

[[layer]]
name = "conv"
op = "conv"
out = 4
kernel = 3
padding = 1
relu = true

[[layer]]
name = "pool"
op = "gap"

[[layer]]
name = "fc"
op = "fc"
out = 3
"#;

/// d(total_loss)/d(alpha) through the mixed weights and the cost term. The
/// abstract cost model has no ceilings and activations stay in float, so no
/// straight-through estimator is involved. Instances whose conv outputs come
/// within 0.2 of the ReLU kink are redrawn.
pub fn total_loss_alpha_gradient() {
    let graph = Graph::from_spec(&toml::from_str::<NetworkSpec>(TWO_LAYER).unwrap()).unwrap();
    let conv = graph.find("conv").unwrap();
    let mut r = rng(500);
    let mut checked = 0;
    while checked < INSTANCES {
        let model = Model::init(graph.clone(), &mut r).fold_bn().unwrap();
        // Lift conv outputs above the ReLU kink.
        model.layer(conv).bias.set_data(vec![3.0; 4]).unwrap();
        let s = checked;
        let lambda = [0.0, 1e-3, 1e-2][(s % 3) as usize];
        let obj = if s % 2 == 0 { Objective::Latency } else { Objective::Energy };
        let mut state = SearchState::new(model, ops_proportional(s % 4 < 2), lambda, obj, &SearchConfig::default()).unwrap();
        state.quantize_activations = false;
        for a in state.alpha.alpha.values() {
            a.set_data(a.to_vec().iter().map(|_| r.random_range(-1.0..1.0) as Float).collect()).unwrap();
        }
        let x = uniform(&mut r, &[2, 1, 4, 4], 0.0, 1.0);
        let pre = state.exec().layer(conv, &x).unwrap().to_vec();
        if pre.iter().any(|v| v.abs() < 0.2) {
            continue;
        }
        let labels: Vec<usize> = (0..2).map(|_| r.random_range(0..3)).collect();
        let params: Vec<Tensor> = state.alpha.alpha.values().cloned().collect();
        let st = &state;
        check("total_loss/alpha", s, &params, |_| total_loss(st, &x, &labels).unwrap().total, 1e-2);
        checked += 1;
    }
}
