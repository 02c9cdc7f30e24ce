use aikd_autograd::{grad, Array, Tensor};
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    Array::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Central differences of `f` around `x`.
fn numeric_grad(f: &dyn Fn(&Tensor) -> Tensor, x: &Array, h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            let mut minus = x.clone();
            minus.as_slice_mut().unwrap()[i] -= h;
            let fp = f(&Tensor::constant(plus)).item();
            let fm = f(&Tensor::constant(minus)).item();
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(a.iter().map(|y| y * y).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn check(name: &str, shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 31 + 7);
    for _ in 0..5 {
        let x = random(&mut rng, shape);
        let leaf = Tensor::leaf(x.clone());
        let g = grad(&f(&leaf), &[&leaf], false).unwrap()[0].to_vec();
        let n = numeric_grad(f, &x, 1e-5);
        let e = rel_err(&g, &n);
        assert!(e < 1e-6, "{name}: relative error {e}");
    }
}

/// Checks the gradient of `sum(grad f)` against finite differences of `grad f`.
fn check_second_order(name: &str, shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 17 + 3);
    let first = |x: &Tensor| {
        let leaf = Tensor::leaf(x.value().clone());
        let g = grad(&f(&leaf), &[&leaf], true).unwrap().remove(0);
        g.square().sum()
    };
    for _ in 0..3 {
        let x = random(&mut rng, shape);
        let leaf = Tensor::leaf(x.clone());
        let g1 = grad(&f(&leaf), &[&leaf], true).unwrap().remove(0);
        let g2 = grad(&g1.square().sum(), &[&leaf], false).unwrap()[0].to_vec();
        let n = numeric_grad(&first, &x, 1e-5);
        let e = rel_err(&g2, &n);
        assert!(e < 1e-5, "{name} second order: relative error {e}");
    }
}

#[test]
fn elementwise_ops() {
    let w = Tensor::constant(Array::from_shape_vec(IxDyn(&[3]), vec![0.3, -0.7, 1.1]).unwrap());
    check("exp", &[2, 3], &|x| x.exp().sum());
    check("ln", &[2, 3], &|x| x.square().add_scalar(0.5).ln().sum());
    check("sqrt", &[2, 3], &|x| x.square().add_scalar(0.1).sqrt().sum());
    check("tanh", &[2, 3], &|x| x.tanh().mul(&w).sum());
    check("div", &[2, 3], &|x| w.div(&x.square().add_scalar(1.0)).sum());
    check("broadcast_mul", &[2, 3], &|x| x.mul(&w).square().sum());
    check("sub_neg", &[2, 3], &|x| w.sub(x).neg().exp().sum());
    check("scale", &[4], &|x| x.scale(-2.5).square().sum());
}

#[test]
fn structural_ops() {
    check("matmul", &[3, 4], &|x| x.matmul(&x.t()).tanh().sum());
    check("reshape", &[2, 6], &|x| x.reshape(&[3, 4]).sum_axes(&[0], false).square().sum());
    check("sum_axes", &[2, 3, 2], &|x| x.sum_axes(&[0, 2], true).exp().sum());
    check("mean_axes", &[2, 3, 2], &|x| x.mean_axes(&[1], false).square().sum());
    check("broadcast_to", &[3], &|x| x.broadcast_to(&[2, 3]).tanh().sum());
    check("narrow_concat", &[2, 4], &|x| {
        let a = x.narrow(1, 0, 2).exp();
        let b = x.narrow(1, 1, 3).tanh();
        Tensor::concat(&[a, b], 1).square().sum()
    });
    check("log_softmax", &[3, 5], &|x| x.log_softmax(1).narrow(1, 2, 1).sum());
    check("softmax", &[3, 5], &|x| x.softmax(1).square().sum());
}

#[test]
fn piecewise_ops_away_from_kinks() {
    // Random inputs sit far from zero relative to the finite-difference step.
    check("leaky_relu", &[3, 3], &|x| x.leaky_relu(0.2).square().sum());
    check("relu", &[3, 3], &|x| x.relu().scale(3.0).sum());
    check("clamp_min", &[3, 3], &|x| x.clamp_min(0.1).square().sum());
}

#[test]
fn image_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = Tensor::constant(random(&mut rng, &[4, 2, 3, 3]));
    check("conv2d_input", &[2, 2, 5, 5], &|x| x.conv2d(&w, 2, 1).square().sum());
    let xin = Tensor::constant(random(&mut rng, &[2, 2, 5, 5]));
    check("conv2d_weight", &[3, 2, 3, 3], &|k| xin.conv2d(k, 1, 1).tanh().sum());
    check("avg_pool", &[1, 2, 4, 4], &|x| x.avg_pool2d(2, 2).square().sum());
    check("max_pool", &[1, 2, 4, 4], &|x| x.max_pool2d(3, 2, 1).square().sum());
}

#[test]
fn second_order_through_critic_style_ops() {
    let w = Tensor::constant(Array::from_shape_vec(IxDyn(&[3, 2]), vec![0.5, -0.2, 0.1, 0.9, -0.4, 0.3]).unwrap());
    check_second_order("mlp_tanh", &[2, 3], &|x| x.matmul(&w).tanh().sum());
    check_second_order("exp_ln", &[2, 3], &|x| x.exp().add_scalar(1.0).ln().sum());
    check_second_order("norm", &[4], &|x| x.square().sum().add_scalar(0.3).sqrt());
    check_second_order("softmax", &[2, 3], &|x| x.softmax(1).square().sum());
}

#[test]
fn gradient_of_unrelated_input_is_zero() {
    let a = Tensor::leaf(Array::ones(IxDyn(&[2])));
    let b = Tensor::leaf(Array::ones(IxDyn(&[3])));
    let g = grad(&a.sum(), &[&a, &b], false).unwrap();
    assert_eq!(g[1].to_vec(), vec![0.0; 3]);
}

#[test]
fn second_order_through_conv_is_rejected() {
    let x = Tensor::leaf(Array::ones(IxDyn(&[1, 1, 3, 3])));
    let w = Tensor::constant(Array::ones(IxDyn(&[1, 1, 3, 3])));
    assert!(grad(&x.conv2d(&w, 1, 1).sum(), &[&x], true).is_err());
    assert!(grad(&x.conv2d(&w, 1, 1).sum(), &[&x], false).is_ok());
}
