//! Every backward kernel against central differences of its forward kernel.

use fat_core::kernels::{backward, forward, LayerKind, PoolParams, SpatialParams};
use fat_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

struct Case {
    kind: LayerKind,
    inputs: Vec<Tensor>,
    weights: Option<Tensor>,
    bias: Option<Tensor>,
}

fn case(kind_ix: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=4);
    let hw = rng.random_range(2..=4);
    let spatial = SpatialParams {
        stride: rng.random_range(1..=2),
        padding: rng.random_range(0..=1),
    };
    let x = |rng: &mut ChaCha8Rng| random(rng, vec![n, c, hw, hw], -8.0, 8.0);
    match kind_ix {
        0 => {
            let o = rng.random_range(1..=4);
            let k = rng.random_range(1..=hw.min(3));
            Case {
                kind: LayerKind::Conv2d(spatial),
                inputs: vec![x(&mut rng)],
                weights: Some(random(&mut rng, vec![o, c, k, k], -1.0, 1.0)),
                bias: Some(random(&mut rng, vec![o], -1.0, 1.0)),
            }
        }
        1 => {
            let k = rng.random_range(1..=hw.min(3));
            Case {
                kind: LayerKind::DwsConv2d(spatial),
                inputs: vec![x(&mut rng)],
                weights: Some(random(&mut rng, vec![c, 1, k, k], -1.0, 1.0)),
                bias: Some(random(&mut rng, vec![c], -1.0, 1.0)),
            }
        }
        2 => {
            let o = rng.random_range(1..=4);
            Case {
                kind: LayerKind::FullyConnected,
                inputs: vec![x(&mut rng)],
                weights: Some(random(&mut rng, vec![o, c * hw * hw], -1.0, 1.0)),
                bias: Some(random(&mut rng, vec![o], -1.0, 1.0)),
            }
        }
        3 => {
            let mut w = random(&mut rng, vec![4, c], -1.0, 1.0);
            w.data_mut()[3 * c..].iter_mut().for_each(|v| *v = v.abs() + 0.5);
            Case {
                kind: LayerKind::BatchNorm { eps: 1e-3 },
                inputs: vec![x(&mut rng)],
                weights: Some(w),
                bias: None,
            }
        }
        4 => Case {
            kind: LayerKind::Relu,
            inputs: vec![x(&mut rng)],
            weights: None,
            bias: None,
        },
        5 => Case {
            kind: LayerKind::Relu6,
            inputs: vec![x(&mut rng)],
            weights: None,
            bias: None,
        },
        6 => Case {
            kind: LayerKind::AvgPool(PoolParams {
                size: 2,
                stride: rng.random_range(1..=2),
            }),
            inputs: vec![x(&mut rng)],
            weights: None,
            bias: None,
        },
        7 => Case {
            kind: LayerKind::Softmax,
            inputs: vec![random(&mut rng, vec![n, c + 1], -3.0, 3.0)],
            weights: None,
            bias: None,
        },
        _ => Case {
            kind: LayerKind::Add,
            inputs: vec![x(&mut rng), x(&mut rng)],
            weights: None,
            bias: None,
        },
    }
}

/// Whether `v` sits next to a kink of a piecewise-linear kernel.
fn near_kink(kind: &LayerKind, v: f64) -> bool {
    match kind {
        LayerKind::Relu => v.abs() < 1e-4,
        LayerKind::Relu6 => v.abs() < 1e-4 || (v - 6.0).abs() < 1e-4,
        _ => false,
    }
}

fn close(fd: f64, an: f64) -> bool {
    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-7
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_matches_central_differences(kind_ix in 0usize..9, seed in any::<u64>()) {
        let Case { kind, inputs, weights, bias } = case(kind_ix, seed);
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let y = forward(&kind, &refs, weights.as_ref(), bias.as_ref()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let gy = random(&mut rng, y.shape().to_vec(), -1.0, 1.0);
        let grads = backward(&kind, &refs, weights.as_ref(), bias.as_ref(), &gy).unwrap();
        let objective = |inputs: &[Tensor], w: Option<&Tensor>, b: Option<&Tensor>| {
            let refs: Vec<&Tensor> = inputs.iter().collect();
            let y = forward(&kind, &refs, w, b).unwrap();
            y.data().iter().zip(gy.data()).map(|(a, g)| a * g).sum::<f64>()
        };
        let h = 1e-6;

        for (slot, an) in grads.inputs.iter().enumerate() {
            for i in 0..inputs[slot].len() {
                if near_kink(&kind, inputs[slot].data()[i]) {
                    continue;
                }
                let mut p = inputs.clone();
                p[slot].data_mut()[i] += h;
                let mut m = inputs.clone();
                m[slot].data_mut()[i] -= h;
                let fd = (objective(&p, weights.as_ref(), bias.as_ref()) - objective(&m, weights.as_ref(), bias.as_ref())) / (2.0 * h);
                prop_assert!(close(fd, an.data()[i]), "{} input {slot}[{i}]: fd {fd} vs {}", kind.name(), an.data()[i]);
            }
        }
        if let (Some(w), Some(gw)) = (&weights, &grads.weights) {
            for i in 0..w.len() {
                let mut p = w.clone();
                p.data_mut()[i] += h;
                let mut m = w.clone();
                m.data_mut()[i] -= h;
                let fd = (objective(&inputs, Some(&p), bias.as_ref()) - objective(&inputs, Some(&m), bias.as_ref())) / (2.0 * h);
                prop_assert!(close(fd, gw.data()[i]), "{} weight {i}: fd {fd} vs {}", kind.name(), gw.data()[i]);
            }
        }
        if let (Some(b), Some(gb)) = (&bias, &grads.bias) {
            for i in 0..b.len() {
                let mut p = b.clone();
                p.data_mut()[i] += h;
                let mut m = b.clone();
                m.data_mut()[i] -= h;
                let fd = (objective(&inputs, weights.as_ref(), Some(&p)) - objective(&inputs, weights.as_ref(), Some(&m))) / (2.0 * h);
                prop_assert!(close(fd, gb.data()[i]), "{} bias {i}: fd {fd} vs {}", kind.name(), gb.data()[i]);
            }
        }
        prop_assert_eq!(grads.weights.is_some(), weights.is_some());
    }

    #[test]
    fn forward_is_pure(kind_ix in 0usize..9, seed in any::<u64>()) {
        let Case { kind, inputs, weights, bias } = case(kind_ix, seed);
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let a = forward(&kind, &refs, weights.as_ref(), bias.as_ref()).unwrap();
        let b = forward(&kind, &refs, weights.as_ref(), bias.as_ref()).unwrap();
        prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
