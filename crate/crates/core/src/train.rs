//! Supervised float training, used to produce teacher models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{accumulate, Graph, Source};
use crate::io::Dataset;
use crate::kernels::{self, LayerKind};
use crate::tensor::Tensor;
use crate::tune::{cosine_lr, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FloatTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Mean softmax cross-entropy over the batch and its gradient with
/// respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<(f64, Tensor)> {
    let [n, k] = *logits.shape() else {
        return Err(Error::shape(format!("logits must be [N, K], got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.data().chunks(k).zip(labels).enumerate() {
        let y = y as usize;
        if y >= k {
            return Err(Error::InvalidArgument(format!("label {y} outside 0..{k}")));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[y];
        for (j, &v) in row.iter().enumerate() {
            grad[i * k + j] = ((v - m).exp() / z - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

/// Index of the largest logit of each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<u32> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                )
                .0 as u32
        })
        .collect()
}

/// Fraction of rows whose top-1 prediction equals the label.
pub fn top1(logits: &Tensor, labels: &[u32]) -> f64 {
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Top-1 accuracy of the float graph on a labeled dataset.
pub fn accuracy(g: &Graph, ds: &Dataset, batch: usize) -> Result<f64> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::InvalidArgument("accuracy needs a labeled dataset".into()))?;
    let z = crate::tune::teacher_logits(g, ds.images(), batch)?;
    Ok(top1(&z, labels))
}

fn gather(g: &Graph) -> Vec<f64> {
    let mut v = Vec::new();
    for l in g.layers() {
        for t in [&l.weights, &l.bias].into_iter().flatten() {
            v.extend_from_slice(t.data());
        }
    }
    v
}

fn scatter(g: &mut Graph, vals: &[f64]) {
    let mut it = vals.iter().copied();
    for i in 0..g.layers().len() {
        let (w, b) = g.params_mut(i);
        for t in [w, b].into_iter().flatten() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = it.next().expect("parameter count"));
        }
    }
}

/// Per-channel mean and biased variance of `[N, C, ...]` data.
fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = x.shape()[1];
    let inner = x.len() / (x.shape()[0] * c);
    let count = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for (i, chunk) in x.data().chunks(inner).enumerate() {
        mean[i % c] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for (i, chunk) in x.data().chunks(inner).enumerate() {
        let m = mean[i % c];
        var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

fn with_stats(w: &Tensor, mean: &[f64], var: &[f64]) -> Tensor {
    let c = mean.len();
    let mut w = w.clone();
    w.data_mut()[2 * c..3 * c].copy_from_slice(mean);
    w.data_mut()[3 * c..].copy_from_slice(var);
    w
}

/// Training-mode forward pass: batch norm layers normalize with the
/// statistics of the current batch. Returns the activations and the
/// statistics each batch norm layer used.
fn train_forward(g: &Graph, input: &Tensor) -> Result<(Vec<Tensor>, Vec<Option<Tensor>>)> {
    let mut outs: Vec<Tensor> = Vec::with_capacity(g.layers().len());
    let mut stats = Vec::with_capacity(g.layers().len());
    for (i, layer) in g.layers().iter().enumerate() {
        let args: Vec<&Tensor> = g
            .sources(i)
            .iter()
            .map(|s| match *s {
                Source::Input => input,
                Source::Layer(j) => &outs[j],
            })
            .collect();
        let w = match layer.kind {
            LayerKind::BatchNorm { .. } => {
                let (mean, var) = channel_moments(args[0]);
                Some(with_stats(layer.weights.as_ref().expect("validated"), &mean, &var))
            }
            _ => None,
        };
        let y = kernels::forward(
            &layer.kind,
            &args,
            w.as_ref().or(layer.weights.as_ref()),
            layer.bias.as_ref(),
        )?;
        outs.push(y);
        stats.push(w);
    }
    Ok((outs, stats))
}

/// Backward pass matching [`train_forward`], including the paths through
/// the batch mean and variance. Batch norm statistics get no gradient.
fn train_backward(
    g: &Graph,
    input: &Tensor,
    acts: &[Tensor],
    stats: &[Option<Tensor>],
    grad_out: &Tensor,
) -> Result<Vec<(Option<Tensor>, Option<Tensor>)>> {
    let n = g.layers().len();
    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[g.output_index()] = Some(grad_out.clone());
    let mut params = vec![(None, None); n];
    for i in (0..n).rev() {
        let Some(gy) = grads[i].take() else { continue };
        let layer = g.layer(i);
        let args: Vec<&Tensor> = g
            .sources(i)
            .iter()
            .map(|s| match *s {
                Source::Input => input,
                Source::Layer(j) => &acts[j],
            })
            .collect();
        let w = stats[i].as_ref().or(layer.weights.as_ref());
        let mut r = kernels::backward(&layer.kind, &args, w, layer.bias.as_ref(), &gy)?;
        if let (Some(st), Some(gw)) = (&stats[i], r.weights.as_mut()) {
            let x = args[0];
            let c = x.shape()[1];
            let inner = x.len() / (x.shape()[0] * c);
            let count = (x.len() / c) as f64;
            let s = st.data();
            let gs = gw.data_mut();
            for (i, (gx, xc)) in r.inputs[0]
                .data_mut()
                .chunks_mut(inner)
                .zip(x.data().chunks(inner))
                .enumerate()
            {
                let ch = i % c;
                let (mean, g_mean, g_var) = (s[2 * c + ch], gs[2 * c + ch], gs[3 * c + ch]);
                for (gv, &xv) in gx.iter_mut().zip(xc) {
                    *gv += g_mean / count + g_var * 2.0 * (xv - mean) / count;
                }
            }
            gs[2 * c..].iter_mut().for_each(|v| *v = 0.0);
        }
        for (src, gx) in g.sources(i).iter().zip(r.inputs) {
            if let Source::Layer(j) = *src {
                accumulate(&mut grads[j], gx)?;
            }
        }
        params[i] = (r.weights, r.bias);
    }
    Ok(params)
}

/// Replaces the statistics of every batch norm layer by the population
/// mean and variance of its input over `images`, in inference mode and in
/// layer order.
pub fn recompute_batch_norm(g: &mut Graph, images: &Tensor, batch: usize) -> Result<()> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let n = images.shape()[0];
    for i in 0..g.layers().len() {
        if !matches!(g.layer(i).kind, LayerKind::BatchNorm { .. }) {
            continue;
        }
        let (mut sum, mut sq, mut count) = (Vec::new(), Vec::new(), 0.0);
        for start in (0..n).step_by(batch) {
            let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
            let x = images.select_batch(&idx)?;
            let acts = g.forward_all(&x)?;
            let xin = match g.sources(i)[0] {
                Source::Input => &x,
                Source::Layer(j) => &acts[j],
            };
            let c = xin.shape()[1];
            let inner = xin.len() / (xin.shape()[0] * c);
            sum.resize(c, 0.0);
            sq.resize(c, 0.0);
            for (k, chunk) in xin.data().chunks(inner).enumerate() {
                sum[k % c] += chunk.iter().sum::<f64>();
                sq[k % c] += chunk.iter().map(|v| v * v).sum::<f64>();
            }
            count += (xin.len() / c) as f64;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let var: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count - m * m).max(0.0))
            .collect();
        let (w, _) = g.params_mut(i);
        let w = w.as_mut().expect("batch norm carries statistics");
        *w = with_stats(w, &mean, &var);
    }
    Ok(())
}

/// Trains every weight and bias with Adam on cross-entropy, with one cosine
/// cycle over the whole run. Batch norm layers train on batch statistics
/// and end with population statistics of the training images. Returns the
/// mean loss of each epoch.
pub fn train_classifier(g: &mut Graph, ds: &Dataset, cfg: &FloatTrainConfig) -> Result<Vec<f64>> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::InvalidArgument("training needs a labeled dataset".into()))?;
    if cfg.epochs == 0 || cfg.batch == 0 {
        return Err(Error::InvalidArgument("epochs and batch must be positive".into()));
    }
    let n = ds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut values = gather(g);
    let mut adam = AdamState::new(values.len(), 0.9, 0.999, 1e-8);
    let total = cfg.epochs * n.div_ceil(cfg.batch);
    let mut step = 0;
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch) {
            let x = ds.images().select_batch(idx)?;
            let y: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
            let (acts, stats) = train_forward(g, &x)?;
            let (loss, gz) = cross_entropy(&acts[g.output_index()], &y)?;
            sum += loss * idx.len() as f64;
            let grads = train_backward(g, &x, &acts, &stats, &gz)?;
            let mut flat = Vec::with_capacity(values.len());
            for (l, (gw, gb)) in g.layers().iter().zip(grads) {
                for (t, gt) in [(&l.weights, gw), (&l.bias, gb)] {
                    if let Some(t) = t {
                        match gt {
                            Some(gt) => flat.extend_from_slice(gt.data()),
                            None => flat.extend(std::iter::repeat(0.0).take(t.len())),
                        }
                    }
                }
            }
            let (lr, _) = cosine_lr(step, cfg.lr, cfg.lr * 0.01, total);
            adam.step(&mut values, &flat, lr)?;
            scatter(g, &values);
            step += 1;
        }
        let mean = sum / n as f64;
        log::info!("float epoch {}: loss {mean:.4}", epoch + 1);
        losses.push(mean);
    }
    recompute_batch_norm(g, ds.images(), cfg.batch.max(100))?;
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Layer;
    use crate::kernels::LayerKind;

    #[test]
    fn cross_entropy_hand_value_and_gradient() {
        let z = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let (l, g) = cross_entropy(&z, &[1]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g.data(), &[0.5, -0.5]);
    }

    #[test]
    fn argmax_and_accuracy() {
        let z = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 2.0, 5.0, 5.0]).unwrap();
        assert_eq!(argmax_rows(&z), vec![0, 1, 0]);
        assert!((top1(&z, &[0, 0, 0]) - 2.0 / 3.0).abs() < 1e-15);
    }

    fn bn_net() -> (Graph, Tensor, Vec<u32>) {
        use crate::kernels::SpatialParams;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape,
                (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let mut bn = r(vec![4, 3]);
        bn.data_mut()[9..].iter_mut().for_each(|v| *v = 1.0);
        let layers = vec![
            Layer::new("c", LayerKind::Conv2d(SpatialParams { stride: 1, padding: 1 }), &["x"])
                .with_weights(r(vec![3, 2, 3, 3]))
                .with_bias(r(vec![3])),
            Layer::new("bn", LayerKind::BatchNorm { eps: 1e-3 }, &["c"]).with_weights(bn),
            Layer::new("a", LayerKind::Relu, &["bn"]),
            Layer::new("fc", LayerKind::FullyConnected, &["a"])
                .with_weights(r(vec![2, 48]))
                .with_bias(r(vec![2])),
        ];
        (
            Graph::new(layers, "x", "fc").unwrap(),
            r(vec![5, 2, 4, 4]),
            vec![0, 1, 1, 0, 1],
        )
    }

    #[test]
    fn batch_statistics_gradient_matches_finite_differences() {
        let (g, x, y) = bn_net();
        let loss = |g: &Graph| {
            let (acts, _) = train_forward(g, &x).unwrap();
            cross_entropy(&acts[g.output_index()], &y).unwrap().0
        };
        let (acts, stats) = train_forward(&g, &x).unwrap();
        let (_, gz) = cross_entropy(&acts[g.output_index()], &y).unwrap();
        let grads = train_backward(&g, &x, &acts, &stats, &gz).unwrap();
        let h = 1e-6;
        // conv weights see the batch-statistics path; gamma and beta are direct
        for (layer, probes) in [(0, vec![0, 7, 20, 53]), (1, vec![0, 2, 3, 5])] {
            for k in probes {
                let mut gp = g.clone();
                gp.params_mut(layer).0.as_mut().unwrap().data_mut()[k] += h;
                let mut gm = g.clone();
                gm.params_mut(layer).0.as_mut().unwrap().data_mut()[k] -= h;
                let fd = (loss(&gp) - loss(&gm)) / (2.0 * h);
                let an = grads[layer].0.as_ref().unwrap().data()[k];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "layer {layer} k {k}: {fd} vs {an}"
                );
            }
        }
        // statistics rows are never trained
        assert!(grads[1].0.as_ref().unwrap().data()[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn population_statistics_normalize_the_training_set() {
        let (mut g, x, _) = bn_net();
        recompute_batch_norm(&mut g, &x, 2).unwrap();
        let acts = g.forward_all(&x).unwrap();
        let bn = &g.layer(1).weights.as_ref().unwrap().data()[..6].to_vec();
        let (mean, var) = channel_moments(&acts[1]);
        for ch in 0..3 {
            // output moments are beta and gamma^2 * var / (var + eps)
            assert!((mean[ch] - bn[3 + ch]).abs() < 1e-12);
            let w = g.layer(1).weights.as_ref().unwrap().data();
            let expect = bn[ch] * bn[ch] * w[9 + ch] / (w[9 + ch] + 1e-3);
            assert!((var[ch] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn learns_separable_problem() {
        // two classes split by the sign of the mean pixel
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..64 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            data.extend((0..4).map(|j| s * (0.5 + 0.1 * ((i + j) % 3) as f64)));
            labels.push((i % 2) as u32);
        }
        let ds = Dataset::new(Tensor::new(vec![64, 1, 2, 2], data).unwrap(), Some(labels)).unwrap();
        let fc = Layer::new("fc", LayerKind::FullyConnected, &["x"])
            .with_weights(Tensor::new(vec![2, 4], vec![0.01, -0.02, 0.03, 0.0, 0.0, 0.01, -0.01, 0.02]).unwrap())
            .with_bias(Tensor::zeros(vec![2]).unwrap());
        let mut g = Graph::new(vec![fc], "x", "fc").unwrap();
        let cfg = FloatTrainConfig {
            epochs: 20,
            batch: 16,
            lr: 0.05,
            seed: 1,
        };
        let losses = train_classifier(&mut g, &ds, &cfg).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        assert_eq!(accuracy(&g, &ds, 32).unwrap(), 1.0);
    }
}
