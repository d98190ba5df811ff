//! Small float models used by the examples, tests and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Layer};
use crate::kernels::{LayerKind, PoolParams, SpatialParams};
use crate::tensor::Tensor;

fn he(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| d.sample(rng)).collect()).expect("non-empty shape")
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, r: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-r..r)).collect()).expect("non-empty shape")
}

fn batch_norm(c: usize) -> Tensor {
    let mut d = vec![0.0; 4 * c];
    d[..c].fill(1.0);
    d[3 * c..].fill(1.0);
    Tensor::new(vec![4, c], d).expect("non-empty shape")
}

/// MNIST-sized CNN: two convolutions, one depthwise layer and a classifier,
/// with batch norm after each convolution.
///
/// `x[N,1,28,28] -> conv1 5x5 (16) -> bn -> relu -> pool -> dws 3x3 -> bn ->
/// relu6 -> conv2 1x1 (32) -> bn -> relu -> pool -> fc (10)`
pub fn mnist_cnn(seed: u64) -> Graph {
    const C1: usize = 16;
    const C2: usize = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = PoolParams { size: 2, stride: 2 };
    let layers = vec![
        Layer::new(
            "conv1",
            LayerKind::Conv2d(SpatialParams { stride: 1, padding: 2 }),
            &["x"],
        )
        .with_weights(he(&mut rng, vec![C1, 1, 5, 5], 25))
        .with_bias(Tensor::zeros(vec![C1]).expect("bias")),
        Layer::new("bn1", LayerKind::BatchNorm { eps: 1e-3 }, &["conv1"]).with_weights(batch_norm(C1)),
        Layer::new("relu1", LayerKind::Relu, &["bn1"]),
        Layer::new("pool1", LayerKind::AvgPool(pool), &["relu1"]),
        Layer::new(
            "dws",
            LayerKind::DwsConv2d(SpatialParams { stride: 1, padding: 1 }),
            &["pool1"],
        )
        .with_weights(he(&mut rng, vec![C1, 1, 3, 3], 9))
        .with_bias(Tensor::zeros(vec![C1]).expect("bias")),
        Layer::new("bn2", LayerKind::BatchNorm { eps: 1e-3 }, &["dws"]).with_weights(batch_norm(C1)),
        Layer::new("relu6", LayerKind::Relu6, &["bn2"]),
        Layer::new("conv2", LayerKind::Conv2d(SpatialParams::default()), &["relu6"])
            .with_weights(he(&mut rng, vec![C2, C1, 1, 1], C1))
            .with_bias(Tensor::zeros(vec![C2]).expect("bias")),
        Layer::new("bn3", LayerKind::BatchNorm { eps: 1e-3 }, &["conv2"]).with_weights(batch_norm(C2)),
        Layer::new("relu2", LayerKind::Relu, &["bn3"]),
        Layer::new("pool2", LayerKind::AvgPool(pool), &["relu2"]),
        Layer::new("fc", LayerKind::FullyConnected, &["pool2"])
            .with_weights(he(&mut rng, vec![10, C2 * 7 * 7], C2 * 7 * 7))
            .with_bias(Tensor::zeros(vec![10]).expect("bias")),
    ];
    Graph::new(layers, "x", "fc").expect("static architecture")
}

/// Random small network exercising every quantizable layer kind, for
/// inputs of shape `[N, 2, 6, 6]`.
///
/// `conv -> relu6 -> dws -> relu -> conv 1x1 -> add(skip) -> pool -> fc`
pub fn toy_net(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let same = SpatialParams { stride: 1, padding: 1 };
    let layers = vec![
        Layer::new("c1", LayerKind::Conv2d(same), &["x"])
            .with_weights(uniform(&mut rng, vec![4, 2, 3, 3], 0.5))
            .with_bias(uniform(&mut rng, vec![4], 0.2)),
        Layer::new("r1", LayerKind::Relu6, &["c1"]),
        Layer::new("d", LayerKind::DwsConv2d(same), &["r1"])
            .with_weights(uniform(&mut rng, vec![4, 1, 3, 3], 0.6))
            .with_bias(uniform(&mut rng, vec![4], 0.2)),
        Layer::new("r2", LayerKind::Relu, &["d"]),
        Layer::new("c2", LayerKind::Conv2d(SpatialParams::default()), &["r2"])
            .with_weights(uniform(&mut rng, vec![4, 4, 1, 1], 0.8))
            .with_bias(uniform(&mut rng, vec![4], 0.2)),
        Layer::new("s", LayerKind::Add, &["c2", "r1"]),
        Layer::new("p", LayerKind::AvgPool(PoolParams { size: 2, stride: 2 }), &["s"]),
        Layer::new("fc", LayerKind::FullyConnected, &["p"])
            .with_weights(uniform(&mut rng, vec![5, 36], 0.4))
            .with_bias(uniform(&mut rng, vec![5], 0.2)),
    ];
    Graph::new(layers, "x", "fc").expect("static architecture")
}

/// Seeded inputs for [`toy_net`], uniform in `[-1, 1)`.
pub fn toy_input(seed: u64, n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uniform(&mut rng, vec![n, 2, 6, 6], 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn models_run() {
        let g = mnist_cnn(0);
        let y = g.forward(&Tensor::zeros(vec![2, 1, 28, 28]).unwrap()).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
        let y = toy_net(1).forward(&toy_input(2, 3)).unwrap();
        assert_eq!(y.shape(), &[3, 5]);
        assert_eq!(toy_net(5), toy_net(5));
    }
}
