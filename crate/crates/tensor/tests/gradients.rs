//! Analytic gradients of every differentiable op against central differences.

use roadfuse_tensor::gradcheck::{check_gradients, GradCheckOptions};
use roadfuse_tensor::{Activation, ConvSpec, Result, RunningStats, SeedRng, Tensor};

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 5;

fn rand_tensor(rng: &mut SeedRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Reduces an arbitrary output to a scalar with fixed random weights so that
/// every output element contributes a distinct gradient.
fn project(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = SeedRng::new(seed ^ 0xABCD);
    let w = rand_tensor(&mut rng, y.shape());
    Ok(y.mul(&w)?.sum())
}

fn run(name: &str, make: impl Fn(&mut SeedRng) -> Vec<Tensor<f64>>, f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>) {
    for seed in 0..INSTANCES {
        let mut rng = SeedRng::new(1000 + seed);
        let leaves = make(&mut rng);
        let report = check_gradients(&leaves, &f, GradCheckOptions { seed, ..Default::default() }).unwrap();
        assert!(
            report.passes(TOL),
            "{name} instance {seed}: rel err {:.3e} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

#[test]
fn grad_elementwise_broadcast() {
    run(
        "add/sub/mul/div",
        |r| vec![rand_tensor(r, &[2, 3, 2, 2]), rand_tensor(r, &[1, 3, 1, 2])],
        |t| {
            let d = t[1].square().add_scalar(1.0);
            let y = t[0].add(&t[1])?.mul(&t[0].sub(&t[1])?)?.div(&d)?;
            project(&y, 1)
        },
    );
}

#[test]
fn grad_activations() {
    for kind in [
        Activation::Relu,
        Activation::Relu6,
        Activation::HardSwish,
        Activation::HardSigmoid,
        Activation::Gelu,
        Activation::Sigmoid,
    ] {
        run(
            &format!("{kind:?}"),
            |r| vec![rand_tensor(r, &[3, 7]).mul_scalar(3.0)],
            move |t| project(&t[0].activation(kind), 2),
        );
    }
}

#[test]
fn grad_scalar_ops_and_reductions() {
    run(
        "scalar ops",
        |r| vec![rand_tensor(r, &[4, 3])],
        |t| {
            let y = t[0].mul_scalar(1.7).add_scalar(-0.3).rsub_scalar(2.0).square();
            Ok(project(&y, 3)?.add(&t[0].mean())?)
        },
    );
}

#[test]
fn grad_conv2d_dense_strided() {
    let spec = ConvSpec::new(3, 4, 3).padding(1).stride(2);
    run(
        "conv2d dense",
        |r| vec![rand_tensor(r, &[2, 3, 5, 6]), rand_tensor(r, &spec.weight_shape()), rand_tensor(r, &[4])],
        move |t| project(&t[0].conv2d(&spec, &t[1], Some(&t[2]))?, 4),
    );
}

#[test]
fn grad_conv2d_pointwise_and_grouped() {
    let pw = ConvSpec::new(4, 3, 1).bias(false);
    run(
        "conv2d 1x1",
        |r| vec![rand_tensor(r, &[2, 4, 3, 3]), rand_tensor(r, &pw.weight_shape())],
        move |t| project(&t[0].conv2d(&pw, &t[1], None)?, 5),
    );
    let grouped = ConvSpec::new(4, 6, 3).groups(2).padding(1);
    run(
        "conv2d grouped",
        |r| vec![rand_tensor(r, &[1, 4, 4, 4]), rand_tensor(r, &grouped.weight_shape()), rand_tensor(r, &[6])],
        move |t| project(&t[0].conv2d(&grouped, &t[1], Some(&t[2]))?, 6),
    );
}

#[test]
fn grad_conv2d_depthwise() {
    let spec = ConvSpec::depthwise(3, 7).stride(1);
    run(
        "depthwise 7x7",
        |r| vec![rand_tensor(r, &[2, 3, 5, 8]), rand_tensor(r, &spec.weight_shape()), rand_tensor(r, &[3])],
        move |t| project(&t[0].conv2d(&spec, &t[1], Some(&t[2]))?, 7),
    );
    let strided = ConvSpec::depthwise(2, 3).stride(2).bias(false);
    run(
        "depthwise stride 2",
        |r| vec![rand_tensor(r, &[1, 2, 7, 6]), rand_tensor(r, &strided.weight_shape())],
        move |t| project(&t[0].conv2d(&strided, &t[1], None)?, 8),
    );
}

#[test]
fn grad_batchnorm_training_and_eval() {
    for training in [true, false] {
        run(
            "batch_norm2d",
            |r| vec![rand_tensor(r, &[2, 3, 3, 2]), rand_tensor(r, &[3]), rand_tensor(r, &[3])],
            move |t| {
                let mut stats = RunningStats {
                    mean: vec![0.1, -0.2, 0.3],
                    var: vec![0.5, 1.5, 2.0],
                };
                project(&t[0].batch_norm2d(&t[1], &t[2], &mut stats, training)?, 9)
            },
        );
    }
}

#[test]
fn grad_resize_and_pool() {
    run(
        "bilinear up",
        |r| vec![rand_tensor(r, &[1, 2, 3, 4])],
        |t| project(&t[0].bilinear_resize(6, 9)?, 10),
    );
    run(
        "bilinear down",
        |r| vec![rand_tensor(r, &[1, 2, 7, 8])],
        |t| project(&t[0].bilinear_resize(3, 5)?, 11),
    );
    run(
        "adaptive pool",
        |r| vec![rand_tensor(r, &[2, 2, 5, 7])],
        |t| project(&t[0].adaptive_avg_pool2d(3, 2)?, 12),
    );
}

#[test]
fn grad_softmax_matmul_attention() {
    run(
        "softmax",
        |r| vec![rand_tensor(r, &[2, 5, 3])],
        |t| project(&t[0].softmax(1)?, 13),
    );
    run(
        "attention",
        |r| vec![rand_tensor(r, &[2, 4, 3]), rand_tensor(r, &[2, 5, 3]), rand_tensor(r, &[1, 5, 3])],
        |t| {
            let s = t[0].matmul(&t[1].transpose_last()?)?.mul_scalar(1.0 / 3f64.sqrt());
            project(&s.softmax(2)?.matmul(&t[2])?, 14)
        },
    );
}

#[test]
fn grad_shape_ops() {
    run(
        "concat/narrow/permute/reshape",
        |r| vec![rand_tensor(r, &[2, 2, 3]), rand_tensor(r, &[2, 1, 3])],
        |t| {
            let c = Tensor::concat(&[&t[0], &t[1]], 1)?;
            let y = c.narrow(1, 1, 2)?.permute(&[2, 0, 1])?.reshape(&[3, 4])?;
            project(&y, 15)
        },
    );
}

#[test]
fn grad_channel_conv1d_and_dropout() {
    run(
        "channel_conv1d",
        |r| vec![rand_tensor(r, &[2, 6, 1, 1]), rand_tensor(r, &[5])],
        |t| project(&t[0].channel_conv1d(&t[1])?, 16),
    );
    run(
        "dropout2d",
        |r| vec![rand_tensor(r, &[2, 6, 2, 2])],
        |t| {
            let mut rng = SeedRng::new(77);
            project(&t[0].dropout2d(0.3, true, &mut rng)?, 17)
        },
    );
}

#[test]
fn grad_composite_chain() {
    let spec = ConvSpec::new(2, 3, 3).padding(1);
    run(
        "chain",
        |r| vec![rand_tensor(r, &[1, 2, 4, 4]), rand_tensor(r, &spec.weight_shape()), rand_tensor(r, &[3])],
        move |t| {
            let y = t[0].conv2d(&spec, &t[1], Some(&t[2]))?.gelu();
            let g = y.adaptive_avg_pool2d(1, 1)?.sigmoid();
            let z = y.mul(&g)?.bilinear_resize(8, 8)?;
            Ok(z.square().mean())
        },
    );
}

#[test]
fn simple_closed_form_grads() {
    let x = Tensor::<f64>::parameter(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}
