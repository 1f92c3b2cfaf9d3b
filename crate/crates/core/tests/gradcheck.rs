//! Analytic gradients vs. central finite differences for every recorded op.

use advshield::autograd::{finite_difference_grad, loss_and_input_grad, FnObjective, Graph, Objective, Var};
use advshield::{rng, Result, Tensor};
use rand::Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;
const SEEDS: u64 = 20;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng::stream(seed, &[99]);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks up to `samples` randomly chosen coordinates.
fn check<M: Objective<f64, Target = ()>>(name: &str, model: &M, x: &Tensor<f64>, seed: u64, samples: usize) {
    let an = loss_and_input_grad(model, x, &()).unwrap();
    assert_eq!(an.grad_input.shape(), x.shape(), "{name}: gradient shape");
    let mut r = rng::stream(seed, &[100]);
    let coords: Vec<usize> = if x.len() <= samples {
        (0..x.len()).collect()
    } else {
        (0..samples).map(|_| r.gen_range(0..x.len())).collect()
    };
    let fd = finite_difference_grad(model, x, &(), H, Some(&coords)).unwrap();
    for &i in &coords {
        let (a, b) = (an.grad_input.data()[i], fd.data()[i]);
        assert!(rel_err(a, b) < TOL, "{name} seed {seed} coord {i}: analytic {a} vs fd {b}");
    }
}

/// Contracts a tensor-valued output to per-example scalars with fixed
/// random weights so every output coordinate carries gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = random(g.shape(y), seed ^ 0xabc, -1.0, 1.0);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum_per_example(p))
}

#[test]
fn conv2d_stride1_and_stride2() {
    for seed in 0..SEEDS {
        for (stride, padding) in [(1, 1), (2, 1), (2, 0)] {
            let w = random(&[3, 2, 3, 3], seed, -0.5, 0.5);
            let b = random(&[3], seed + 1, -0.5, 0.5);
            let x = random(&[2, 2, 7, 7], seed + 2, 0.0, 1.0);
            let (wi, bi) = (w.clone(), b.clone());
            let model = FnObjective(move |g: &mut Graph<f64>, x: Var| {
                let (wv, bv) = (g.constant(wi.clone()), g.constant(bi.clone()));
                let y = g.conv2d(x, wv, bv, stride, padding)?;
                project(g, y, seed)
            });
            check("conv2d input", &model, &x, seed, 100);

            // weight gradient through the same op
            let (xc, bc) = (x.clone(), b.clone());
            let wmodel = FnObjective(move |g: &mut Graph<f64>, w: Var| {
                let (xv, bv) = (g.constant(xc.clone()), g.constant(bc.clone()));
                let y = g.conv2d(xv, w, bv, stride, padding)?;
                let y = g.flatten(y)?;
                let s = project(g, y, seed)?;
                Ok(g.sum(s))
            });
            check("conv2d weight", &wmodel, &w, seed, 100);
        }
    }
}

#[test]
fn conv_transpose2d() {
    for seed in 0..SEEDS {
        for (k, stride, padding, op) in [(4, 2, 1, 0), (3, 2, 1, 1), (3, 1, 1, 0)] {
            let w = random(&[3, 2, k, k], seed, -0.5, 0.5);
            let b = random(&[2], seed + 1, -0.5, 0.5);
            let x = random(&[2, 3, 4, 4], seed + 2, -1.0, 1.0);
            let (wi, bi) = (w.clone(), b.clone());
            let model = FnObjective(move |g: &mut Graph<f64>, x: Var| {
                let (wv, bv) = (g.constant(wi.clone()), g.constant(bi.clone()));
                let y = g.conv_transpose2d(x, wv, bv, stride, padding, op)?;
                project(g, y, seed)
            });
            check("tconv input", &model, &x, seed, 100);

            let (xc, bc) = (x.clone(), b.clone());
            let wmodel = FnObjective(move |g: &mut Graph<f64>, w: Var| {
                let (xv, bv) = (g.constant(xc.clone()), g.constant(bc.clone()));
                let y = g.conv_transpose2d(xv, w, bv, stride, padding, op)?;
                let y = g.flatten(y)?;
                let s = project(g, y, seed)?;
                Ok(g.sum(s))
            });
            check("tconv weight", &wmodel, &w, seed, 100);
        }
    }
}

#[test]
fn dense_gelu_sigmoid_add() {
    for seed in 0..SEEDS {
        let w = random(&[5, 6], seed, -0.5, 0.5);
        let b = random(&[5], seed + 1, -0.5, 0.5);
        let x = random(&[3, 6], seed + 2, -2.0, 2.0);
        let (wi, bi) = (w.clone(), b.clone());
        let model = FnObjective(move |g: &mut Graph<f64>, x: Var| {
            let (wv, bv) = (g.constant(wi.clone()), g.constant(bi.clone()));
            let y = g.dense(x, wv, bv)?;
            let a = g.gelu(y);
            let s = g.sigmoid(y);
            let sum = g.add(a, s)?;
            let d = g.sub(sum, y)?;
            let d = g.scale(d, 1.7);
            project(g, d, seed)
        });
        check("dense/gelu/sigmoid/add", &model, &x, seed, 100);

        let (xc, bc) = (x.clone(), b.clone());
        let wmodel = FnObjective(move |g: &mut Graph<f64>, w: Var| {
            let (xv, bv) = (g.constant(xc.clone()), g.constant(bc.clone()));
            let y = g.dense(xv, w, bv)?;
            let y = g.gelu(y);
            let s = project(g, y, seed)?;
            Ok(g.sum(s))
        });
        check("dense weight", &wmodel, &w, seed, 100);
    }
}

#[test]
fn cross_entropy_and_mse() {
    for seed in 0..SEEDS {
        let x = random(&[4, 10], seed, -3.0, 3.0);
        let labels: Vec<usize> = (0..4).map(|i| (seed as usize + 3 * i) % 10).collect();
        let model = FnObjective(move |g: &mut Graph<f64>, x: Var| g.cross_entropy(x, &labels));
        check("cross_entropy", &model, &x, seed, 100);

        let target = random(&[4, 10], seed + 7, 0.0, 1.0);
        let model = FnObjective(move |g: &mut Graph<f64>, x: Var| g.squared_error(x, &target));
        check("mse", &model, &x, seed, 100);
    }
}

#[test]
fn stacked_conv_net_matches_in_f32_and_f64() {
    use advshield::nn::{Layer, Network};
    let layers = vec![
        Layer::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 1, padding: 1 },
        Layer::Gelu,
        Layer::Conv2d { in_channels: 4, out_channels: 4, kernel: 3, stride: 2, padding: 1 },
        Layer::Gelu,
        Layer::Flatten,
        Layer::Dense { inputs: 4 * 4 * 4, outputs: 10 },
    ];
    for seed in 0..SEEDS {
        let net32 = Network::<f32>::init(layers.clone(), seed);
        let net64: Network<f64> = net32.cast();
        let x = random(&[2, 1, 8, 8], seed, 0.0, 1.0);
        let labels = vec![seed as usize % 10, (seed as usize + 5) % 10];
        let l64 = labels.clone();
        let m64 = FnObjective(move |g: &mut Graph<f64>, x: Var| {
            let vars = net64.bind(g);
            let n = net64.layers().len();
            let logits = net64.apply(g, &vars, x, 0..n)?;
            g.cross_entropy(logits, &l64)
        });
        check("conv net f64", &m64, &x, seed, 128);

        // f32 analytic gradient against the f64 oracle.
        let m32 = FnObjective(move |g: &mut Graph<f32>, x: Var| {
            let vars = net32.bind(g);
            let n = net32.layers().len();
            let logits = net32.apply(g, &vars, x, 0..n)?;
            g.cross_entropy(logits, &labels)
        });
        let an32 = loss_and_input_grad(&m32, &x.cast::<f32>(), &()).unwrap();
        let fd = finite_difference_grad(&m64, &x, &(), H, None).unwrap();
        let scale = fd.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in an32.grad_input.data().iter().zip(fd.data()) {
            assert!((*a as f64 - b).abs() <= TOL * scale.max(1e-6), "f32 {a} vs f64 fd {b}");
        }
    }
}
