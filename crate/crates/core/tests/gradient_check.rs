//! Finite-difference validation of every differentiable operation and of the
//! full model. The forward values here come straight from the graph; the
//! reference gradients come from central differences, computed without
//! touching the backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rastermend_core::autodiff::{Graph, Tensor, Var};
use rastermend_core::losses::{loss_scalar, loss_value, LossKind};
use rastermend_core::unet::{build_unet, UNetConfig};

const H: f64 = 1e-5;

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Evaluate `build` as a plain function of the inputs (no gradients).
fn eval(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = build(&mut g, &vars);
    g.value(out).item().unwrap()
}

/// Compare autodiff gradients of a scalar-valued graph against central
/// finite differences, elementwise, with a relative tolerance.
fn fd_check(name: &str, inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let grads: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).unwrap()).collect();

    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let fd = (eval(&plus, build) - eval(&minus, build)) / (2.0 * H);
            let ad = grads[i].data()[j];
            let scale = ad.abs().max(fd.abs()).max(1e-3);
            assert!(
                (ad - fd).abs() <= tol * scale,
                "{name}: input {i} element {j}: autodiff {ad} vs finite-diff {fd}"
            );
        }
    }
}

#[test]
fn elementwise_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&[2, 3], -1.0, 1.0, &mut rng);
    // denominators kept well away from the clamp region
    let b = random_tensor(&[2, 3], 0.4, 1.6, &mut rng);
    let pair = [a, b];
    fd_check("add", &pair, &|g, v| {
        let x = g.add(v[0], v[1]).unwrap();
        g.mean(x).unwrap()
    }, 1e-4);
    fd_check("sub", &pair, &|g, v| {
        let x = g.sub(v[0], v[1]).unwrap();
        g.mean(x).unwrap()
    }, 1e-4);
    fd_check("mul", &pair, &|g, v| {
        let x = g.mul(v[0], v[1]).unwrap();
        g.mean(x).unwrap()
    }, 1e-4);
    fd_check("div", &pair, &|g, v| {
        let x = g.div(v[0], v[1]).unwrap();
        g.mean(x).unwrap()
    }, 1e-4);
}

#[test]
fn scalar_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = [random_tensor(&[3, 2], -1.0, 1.0, &mut rng)];
    fd_check("add_scalar", &a, &|g, v| {
        let x = g.add_scalar(v[0], 0.7);
        g.mean(x).unwrap()
    }, 1e-4);
    fd_check("sub_scalar", &a, &|g, v| {
        let x = g.sub_scalar(v[0], 0.3);
        g.mean(x).unwrap()
    }, 1e-4);
    fd_check("rsub_scalar", &a, &|g, v| {
        let x = g.rsub_scalar(v[0], 1.0);
        g.mean(x).unwrap()
    }, 1e-4);
    fd_check("mul_scalar", &a, &|g, v| {
        let x = g.mul_scalar(v[0], -2.5);
        g.mean(x).unwrap()
    }, 1e-4);
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // strictly inside the log clamp range and away from relu/abs kinks
    let pos = [random_tensor(&[2, 4], 0.1, 0.9, &mut rng)];
    fd_check("log", &pos, &|g, v| {
        let x = g.log(v[0]);
        g.mean(x).unwrap()
    }, 1e-4);
    fd_check("relu_positive", &pos, &|g, v| {
        let x = g.relu(v[0]);
        g.mean(x).unwrap()
    }, 1e-4);
    let neg = [random_tensor(&[2, 4], -0.9, -0.1, &mut rng)];
    fd_check("relu_negative", &neg, &|g, v| {
        let x = g.relu(v[0]);
        g.mean(x).unwrap()
    }, 1e-4);
    fd_check("abs_negative", &neg, &|g, v| {
        let x = g.abs(v[0]);
        g.mean(x).unwrap()
    }, 1e-4);
    let any = [random_tensor(&[2, 4], -2.0, 2.0, &mut rng)];
    fd_check("exp", &any, &|g, v| {
        let x = g.exp(v[0]);
        g.mean(x).unwrap()
    }, 1e-4);
    fd_check("neg", &any, &|g, v| {
        let x = g.neg(v[0]);
        g.mean(x).unwrap()
    }, 1e-4);
    fd_check("sigmoid", &any, &|g, v| {
        let x = g.sigmoid(v[0]);
        g.mean(x).unwrap()
    }, 1e-4);
}

#[test]
fn clamp_interior_and_reduce_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = [random_tensor(&[3, 3], 0.2, 0.8, &mut rng)];
    fd_check("clamp_interior", &a, &|g, v| {
        let x = g.clamp(v[0], 0.1, 0.9);
        g.mean(x).unwrap()
    }, 1e-4);
    fd_check("sum", &a, &|g, v| g.sum(v[0]).unwrap(), 1e-4);
    fd_check("mean", &a, &|g, v| g.mean(v[0]).unwrap(), 1e-4);
}

#[test]
fn clamp_saturated_region_has_zero_gradient() {
    let t = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let v = g.leaf(t, true);
    let x = g.clamp(v, 0.0, 1.0);
    let out = g.sum(x).unwrap();
    g.backward(out).unwrap();
    assert_eq!(g.grad(v).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = random_tensor(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
    let weights = random_tensor(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
    let bias = random_tensor(&[3], -0.5, 0.5, &mut rng);
    fd_check("conv2d", &[input, weights, bias], &|g, v| {
        let x = g.conv2d(v[0], v[1], v[2]).unwrap();
        g.mean(x).unwrap()
    }, 1e-4);
}

#[test]
fn transpose_conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = random_tensor(&[1, 4, 3, 3], -1.0, 1.0, &mut rng);
    let weights = random_tensor(&[4, 2, 2, 2], -0.5, 0.5, &mut rng);
    let bias = random_tensor(&[2], -0.5, 0.5, &mut rng);
    fd_check("transpose_conv2d", &[input, weights, bias], &|g, v| {
        let x = g.transpose_conv2d(v[0], v[1], v[2]).unwrap();
        g.mean(x).unwrap()
    }, 1e-4);
}

#[test]
fn max_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // distinct magnitudes so FD perturbations cannot flip the argmax
    let n = 2 * 4 * 4;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
    use rand::seq::SliceRandom;
    vals.shuffle(&mut rng);
    let input = Tensor::new(vec![1, 2, 4, 4], vals).unwrap();
    fd_check("max_pool2d", &[input], &|g, v| {
        let x = g.max_pool2d(v[0]).unwrap();
        g.mean(x).unwrap()
    }, 1e-4);
}

#[test]
fn concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_tensor(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
    let b = random_tensor(&[1, 1, 3, 3], -1.0, 1.0, &mut rng);
    fd_check("concat_channels", &[a, b], &|g, v| {
        let x = g.concat_channels(v[0], v[1]).unwrap();
        g.mean(x).unwrap()
    }, 1e-4);
}

/// Reduce with a fixed random weighting so misrouted-but-sum-preserving
/// backward implementations cannot slip through.
fn weighted(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&shape, -1.0, 1.0, &mut rng);
    let wv = g.leaf(w, false);
    let y = g.mul(x, wv).unwrap();
    g.mean(y).unwrap()
}

#[test]
fn structured_ops_with_weighted_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let input = random_tensor(&[2, 2, 4, 4], -1.0, 1.0, &mut rng);
    let weights = random_tensor(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
    let bias = random_tensor(&[3], -0.5, 0.5, &mut rng);
    fd_check("conv2d_weighted", &[input, weights, bias], &|g, v| {
        let x = g.conv2d(v[0], v[1], v[2]).unwrap();
        weighted(g, x, 100)
    }, 1e-4);

    let input = random_tensor(&[1, 4, 3, 3], -1.0, 1.0, &mut rng);
    let weights = random_tensor(&[4, 2, 2, 2], -0.5, 0.5, &mut rng);
    let bias = random_tensor(&[2], -0.5, 0.5, &mut rng);
    fd_check("tconv_weighted", &[input, weights, bias], &|g, v| {
        let x = g.transpose_conv2d(v[0], v[1], v[2]).unwrap();
        weighted(g, x, 101)
    }, 1e-4);

    let a = random_tensor(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
    let b = random_tensor(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
    fd_check("concat_weighted", &[a, b], &|g, v| {
        let x = g.concat_channels(v[0], v[1]).unwrap();
        weighted(g, x, 102)
    }, 1e-4);

    let mut vals: Vec<f64> = (0..2 * 2 * 4 * 4).map(|i| i as f64 * 0.1).collect();
    use rand::seq::SliceRandom;
    vals.shuffle(&mut rng);
    let input = Tensor::new(vec![2, 2, 4, 4], vals).unwrap();
    fd_check("max_pool_weighted", &[input], &|g, v| {
        let x = g.max_pool2d(v[0]).unwrap();
        weighted(g, x, 103)
    }, 1e-4);
}

#[test]
fn fan_out_accumulates_both_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_tensor(&[1, 2, 4, 4], 0.1, 1.0, &mut rng);
    fd_check("fan_out", &[x], &|g, v| {
        let y = g.relu(v[0]);
        // y feeds both a pooling path and a concat path, like a U-Net skip
        let pooled = g.max_pool2d(y).unwrap();
        let p = weighted(g, pooled, 200);
        let cat = g.concat_channels(y, y).unwrap();
        let c = weighted(g, cat, 201);
        g.add(p, c).unwrap()
    }, 1e-4);
}

#[test]
fn loss_gradients_for_every_kind() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // interior of [0,1] keeps all loss clamps inactive
    let pred = random_tensor(&[2, 3, 3], 0.15, 0.85, &mut rng);
    let target = random_tensor(&[2, 3, 3], 0.15, 0.85, &mut rng);
    for kind in LossKind::ALL {
        fd_check(
            kind.name(),
            &[pred.clone(), target.clone()],
            &|g, v| loss_value(g, kind, v[0], v[1]).unwrap(),
            1e-4,
        );
    }
}

#[test]
fn end_to_end_unet_parameter_gradients() {
    let config = UNetConfig {
        input_channels: 2,
        input_size: 8,
        depth: 1,
        base_channels: 2,
        final_convs: 1,
        seed: 11,
    };
    let mut model = build_unet(&config).unwrap();
    // Freshly initialized biases are exactly zero, which parks ReLU units
    // with dead receptive fields precisely on their kink; jitter every
    // parameter so the loss is differentiable where we probe it.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(0.01..0.05);
        }
    }
    let input = random_tensor(&[1, 2, 8, 8], 0.1, 0.9, &mut rng);
    let target = random_tensor(&[1, 2, 8, 8], 0.1, 0.9, &mut rng);

    // autodiff gradients for every parameter
    let mut g = Graph::new();
    let iv = g.leaf(input.clone(), false);
    let tv = g.leaf(target.clone(), false);
    let (pred, pvars) = model.forward(&mut g, iv, true).unwrap();
    let loss = loss_value(&mut g, LossKind::Mse, pred, tv).unwrap();
    g.backward(loss).unwrap();
    let grads: Vec<Tensor> = pvars.iter().map(|&v| g.grad(v).unwrap()).collect();

    // finite differences through infer + loss_scalar, parameter by parameter
    let loss_of = |model: &rastermend_core::unet::UNetModel| {
        let mut batch = input.clone();
        let pred = model.infer(&batch).unwrap();
        batch = pred;
        loss_scalar(LossKind::Mse, &batch, &target).unwrap()
    };
    let n_params = model.params_mut().len();
    assert_eq!(n_params, grads.len());
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for slot in 0..n_params {
        let len = model.params_mut()[slot].len();
        // spot-check a handful of elements per tensor to keep runtime sane
        let picks: Vec<usize> = (0..len.min(4)).map(|_| rng.gen_range(0..len)).collect();
        for &j in &picks {
            let orig = model.params_mut()[slot].data()[j];
            model.params_mut()[slot].data_mut()[j] = orig + H;
            let plus = loss_of(&model);
            model.params_mut()[slot].data_mut()[j] = orig - H;
            let minus = loss_of(&model);
            model.params_mut()[slot].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * H);
            let ad = grads[slot].data()[j];
            let scale = ad.abs().max(fd.abs()).max(1e-3);
            assert!(
                (ad - fd).abs() <= 1e-3 * scale,
                "param slot {slot} element {j}: autodiff {ad} vs finite-diff {fd}"
            );
        }
    }
}
