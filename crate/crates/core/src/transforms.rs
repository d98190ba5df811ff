//! Float-to-float graph rewrites applied before quantization.
//!
//! [`fold_batch_norm`] merges inference-mode batch norm into the preceding
//! linear layer. [`dws_rescale`] equalizes per-filter weight ranges of a
//! depthwise layer by moving per-channel scale factors into the following
//! convolution, so that one per-tensor threshold fits every filter.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Layer, Source};
use crate::kernels::{LayerKind, RELU6_CAP};
use crate::tensor::Tensor;

/// Default locking limit for ReLU6 channels.
pub const DEFAULT_LOCK_LIMIT: f64 = 5.9;

/// Rewrites every `linear -> BatchNorm` pair into a single linear layer.
///
/// With `s = gamma / sqrt(var + eps)` per output channel the folded layer
/// has weights `s * W` and bias `s * (b - mean) + beta`, where `b` is the
/// original bias (zero when absent). References to the batch norm id are
/// redirected to the linear layer.
pub fn fold_batch_norm(g: &Graph) -> Result<Graph> {
    let n = g.layers().len();
    let mut layers: Vec<Layer> = g.layers().to_vec();
    let mut removed = vec![false; n];
    let mut rename: HashMap<String, String> = HashMap::new();

    for i in 0..n {
        let LayerKind::BatchNorm { eps } = layers[i].kind else {
            continue;
        };
        let j = match g.sources(i)[0] {
            Source::Layer(j) if g.layer(j).kind.is_linear() && g.consumers(j) == [i] => j,
            _ => return Err(Error::OrphanBatchNorm(layers[i].id.clone())),
        };
        let stats = layers[i].weights.clone().expect("validated batch norm stats");
        let c = stats.shape()[1];
        let target = &mut layers[j];
        let out_ch = target.out_channels().unwrap_or(0);
        if out_ch != c {
            return Err(Error::shape(format!(
                "batch norm {} has {c} channels, {} produces {out_ch}",
                g.layer(i).id,
                target.id
            )));
        }
        let s = stats.data();
        let scale: Vec<f64> = (0..c).map(|k| s[k] / (s[3 * c + k] + eps).sqrt()).collect();

        let w = target.weights.as_mut().expect("linear layer has weights");
        let per = w.len() / c;
        for (k, chunk) in w.data_mut().chunks_mut(per).enumerate() {
            for v in chunk {
                *v *= scale[k];
            }
        }
        let old_bias = target.bias.take();
        let bias: Vec<f64> = (0..c)
            .map(|k| {
                let b = old_bias.as_ref().map_or(0.0, |b| b.data()[k]);
                scale[k] * (b - s[2 * c + k]) + s[c + k]
            })
            .collect();
        target.bias = Some(Tensor::new(vec![c], bias)?);

        removed[i] = true;
        rename.insert(layers[i].id.clone(), layers[j].id.clone());
    }

    let (_, input_id, output_id) = g.clone().into_parts();
    let resolve = |id: &str| rename.get(id).cloned().unwrap_or_else(|| id.to_string());
    let layers = layers
        .into_iter()
        .zip(removed)
        .filter(|(_, r)| !r)
        .map(|(mut l, _)| {
            l.inputs = l.inputs.iter().map(|s| resolve(s)).collect();
            l
        })
        .collect();
    Graph::new(layers, input_id, resolve(&output_id))
}

/// One rescaled `DWS -> [activation] -> Conv` chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternReport {
    pub dws_id: String,
    /// `"relu"`, `"relu6"`, or absent for a linear chain.
    pub activation: Option<String>,
    pub conv_id: String,
    /// Control threshold the non-locked filters are pulled toward.
    pub t0: f64,
    pub scales: Vec<f64>,
    pub locked: Vec<bool>,
    /// Per-channel maximum of the depthwise output before the activation.
    pub x_max: Vec<f64>,
    pub thresholds_before: Vec<f64>,
    pub thresholds_after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPattern {
    pub dws_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DwsRescaleReport {
    pub lock_limit: f64,
    pub saturation: f64,
    pub patterns: Vec<PatternReport>,
    pub skipped: Vec<SkippedPattern>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    None,
    Relu,
    Relu6,
}

struct Pattern {
    dws: usize,
    act: Activation,
    conv: usize,
}

fn find_patterns(g: &Graph) -> (Vec<Pattern>, Vec<SkippedPattern>) {
    let mut found = Vec::new();
    let mut skipped = Vec::new();
    let out = g.output_index();
    for (i, layer) in g.layers().iter().enumerate() {
        if !matches!(layer.kind, LayerKind::DwsConv2d(_)) {
            continue;
        }
        let skip = |reason: String| SkippedPattern {
            dws_id: layer.id.clone(),
            reason,
        };
        let sole_consumer = |idx: usize| -> std::result::Result<usize, String> {
            if idx == out {
                return Err(format!("{} is the network output", g.layer(idx).id));
            }
            match g.consumers(idx).as_slice() {
                [c] if g.layer(*c).kind == LayerKind::Add => Err(format!("{} feeds an add junction", g.layer(idx).id)),
                [c] => Ok(*c),
                [] => Err(format!("{} has no consumer", g.layer(idx).id)),
                many => {
                    let add = many.iter().any(|&c| g.layer(c).kind == LayerKind::Add);
                    Err(format!(
                        "{} has {} consumers{}",
                        g.layer(idx).id,
                        many.len(),
                        if add { " including an add junction" } else { "" }
                    ))
                }
            }
        };
        let next = match sole_consumer(i) {
            Ok(c) => c,
            Err(r) => {
                skipped.push(skip(r));
                continue;
            }
        };
        let (act, conv) = match g.layer(next).kind {
            LayerKind::Conv2d(_) => (Activation::None, next),
            LayerKind::Relu | LayerKind::Relu6 => {
                let act = if g.layer(next).kind == LayerKind::Relu {
                    Activation::Relu
                } else {
                    Activation::Relu6
                };
                match sole_consumer(next) {
                    Ok(c) if matches!(g.layer(c).kind, LayerKind::Conv2d(_)) => (act, c),
                    Ok(c) => {
                        skipped.push(skip(format!(
                            "activation feeds {} ({})",
                            g.layer(c).id,
                            g.layer(c).kind.name()
                        )));
                        continue;
                    }
                    Err(r) => {
                        skipped.push(skip(r));
                        continue;
                    }
                }
            }
            ref other => {
                skipped.push(skip(format!("followed by {}", other.name())));
                continue;
            }
        };
        found.push(Pattern { dws: i, act, conv });
    }
    (found, skipped)
}

/// Per-channel maxima of each listed layer's output over `calib`.
fn channel_maxima(g: &Graph, calib: &Tensor, layers: &[usize]) -> Result<Vec<Vec<f64>>> {
    const BATCH: usize = 64;
    let n = calib.shape()[0];
    let mut maxima: Vec<Vec<f64>> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + BATCH).min(n);
        let acts = g.forward_all(&calib.slice_batch(start, end)?)?;
        for (slot, &l) in layers.iter().enumerate() {
            let ranges = acts[l].channel_ranges(1)?;
            if maxima.len() <= slot {
                maxima.push(vec![f64::NEG_INFINITY; ranges.len()]);
            }
            for (m, (_, hi)) in maxima[slot].iter_mut().zip(ranges) {
                *m = m.max(hi);
            }
        }
        start = end;
    }
    Ok(maxima)
}

/// Scale factors for one pattern, from per-filter maxima `t`, pre-activation
/// maxima `x_max`, and whether the saturation cap applies.
///
/// Returns `(t0, scales, locked)`.
pub fn rescale_factors(t: &[f64], x_max: &[f64], relu6: bool, lock_limit: f64, sat: f64) -> (f64, Vec<f64>, Vec<bool>) {
    let locked: Vec<bool> = t
        .iter()
        .zip(x_max)
        .map(|(&tw, &xm)| tw == 0.0 || (relu6 && xm >= lock_limit))
        .collect();
    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let (s, c) = it.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        (c > 0).then(|| s / c as f64)
    };
    let t0 = mean(
        &mut t
            .iter()
            .zip(&locked)
            .filter(|(&tw, &l)| l && tw > 0.0)
            .map(|(&tw, _)| tw),
    )
    .or_else(|| mean(&mut t.iter().copied().filter(|&tw| tw > 0.0)))
    .unwrap_or(0.0);
    let scales = t
        .iter()
        .zip(x_max)
        .zip(&locked)
        .map(|((&tw, &xm), &l)| {
            if l {
                return 1.0;
            }
            let candidate = t0 / tw;
            if relu6 && xm > 0.0 {
                candidate.min(sat / xm)
            } else {
                candidate
            }
        })
        .collect();
    (t0, scales, locked)
}

/// Rescales every `DWS -> [ReLU | ReLU6] -> Conv` chain so the depthwise
/// filters share a common threshold wherever the activation allows it.
///
/// Filter `k` of the depthwise layer (weights and bias) is multiplied by
/// `S[k]` and input channel `k` of the following convolution is divided by
/// it. For ReLU6 chains, channels whose calibrated pre-activation maximum
/// reaches `lock_limit` keep `S[k] = 1`, and `S[k] * x_max[k]` is capped at
/// `sat`; plain ReLU and linear chains are positively homogeneous and need
/// neither. Network output is unchanged for inputs whose depthwise outputs
/// stay within the calibrated maxima.
pub fn dws_rescale(g: &Graph, calib: &Tensor, lock_limit: f64, sat: f64) -> Result<(Graph, DwsRescaleReport)> {
    if !(lock_limit > 0.0 && sat > 0.0 && lock_limit.is_finite() && sat.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lock limit {lock_limit} / saturation {sat} must be positive"
        )));
    }
    if let Some(bn) = g
        .layers()
        .iter()
        .find(|l| matches!(l.kind, LayerKind::BatchNorm { .. }))
    {
        return Err(Error::UnfoldedBatchNorm(bn.id.clone()));
    }
    if calib.ndim() == 0 || calib.shape()[0] == 0 {
        return Err(Error::EmptyCalibration);
    }
    let (patterns, skipped) = find_patterns(g);
    if patterns.is_empty() {
        if !skipped.is_empty() {
            for s in &skipped {
                log::warn!("skipping depthwise layer {}: {}", s.dws_id, s.reason);
            }
        }
        return Err(Error::NoPatternFound);
    }
    let maxima = channel_maxima(g, calib, &patterns.iter().map(|p| p.dws).collect::<Vec<_>>())?;

    let mut out = g.clone();
    let mut report = DwsRescaleReport {
        lock_limit,
        saturation: sat,
        patterns: Vec::new(),
        skipped,
    };
    for (p, x_max) in patterns.iter().zip(maxima) {
        let dws = g.layer(p.dws);
        let w = dws.weights.as_ref().expect("depthwise weights");
        let t = w.channel_max_abs(0)?;
        let relu6 = p.act == Activation::Relu6;
        let (t0, scales, locked) = rescale_factors(&t, &x_max, relu6, lock_limit, sat);
        for (k, &s) in scales.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::NonPositiveScale {
                    layer: dws.id.clone(),
                    channel: k,
                    value: s,
                });
            }
        }

        let (dw, db) = out.params_mut(p.dws);
        let dw = dw.as_mut().expect("depthwise weights");
        let per = dw.len() / scales.len();
        for (k, chunk) in dw.data_mut().chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= scales[k]);
        }
        if let Some(b) = db.as_mut() {
            b.data_mut().iter_mut().zip(&scales).for_each(|(v, s)| *v *= s);
        }
        let thresholds_after = dw.channel_max_abs(0)?;

        let (cw, _) = out.params_mut(p.conv);
        let cw = cw.as_mut().expect("conv weights");
        let [o, c, kh, kw] = *cw.shape() else {
            unreachable!("validated conv weight")
        };
        if c != scales.len() {
            return Err(Error::shape(format!(
                "{} expects {c} channels, {} produces {}",
                g.layer(p.conv).id,
                dws.id,
                scales.len()
            )));
        }
        let data = cw.data_mut();
        for oc in 0..o {
            for (k, &s) in scales.iter().enumerate() {
                for v in &mut data[(oc * c + k) * kh * kw..][..kh * kw] {
                    *v /= s;
                }
            }
        }

        report.patterns.push(PatternReport {
            dws_id: dws.id.clone(),
            activation: match p.act {
                Activation::None => None,
                Activation::Relu => Some("relu".into()),
                Activation::Relu6 => Some("relu6".into()),
            },
            conv_id: g.layer(p.conv).id.clone(),
            t0,
            scales,
            locked,
            x_max,
            thresholds_before: t,
            thresholds_after,
        });
    }
    Ok((out, report))
}

/// [`dws_rescale`] with the default lock limit and ReLU6 saturation.
pub fn dws_rescale_default(g: &Graph, calib: &Tensor) -> Result<(Graph, DwsRescaleReport)> {
    dws_rescale(g, calib, DEFAULT_LOCK_LIMIT, RELU6_CAP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::SpatialParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn bn_layer(id: &str, input: &str, gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> Layer {
        Layer::new(id, LayerKind::BatchNorm { eps }, &[input]).with_weights(t(&[4, 1], vec![gamma, beta, mean, var]))
    }

    #[test]
    fn identity_batch_norm_changes_nothing() {
        let eps = 1e-3;
        let fc = Layer::new("fc", LayerKind::FullyConnected, &["x"])
            .with_weights(t(&[1, 2], vec![0.5, -1.5]))
            .with_bias(t(&[1], vec![0.25]));
        let g = Graph::new(vec![fc, bn_layer("bn", "fc", 1.0, 0.0, 0.0, 1.0 - eps, eps)], "x", "bn").unwrap();
        let f = fold_batch_norm(&g).unwrap();
        assert_eq!(f.layers().len(), 1);
        assert_eq!(f.output_id(), "fc");
        assert_eq!(f.layer(0).weights.as_ref().unwrap().data(), &[0.5, -1.5]);
        assert_eq!(f.layer(0).bias.as_ref().unwrap().data(), &[0.25]);
    }

    #[test]
    fn hand_evaluated_fold() {
        // gamma=2, var=3, eps=1 -> scale 1; beta - gamma*mean/sqrt(4) = 0.5 - 1
        let fc = Layer::new("fc", LayerKind::FullyConnected, &["x"]).with_weights(t(&[1, 1], vec![4.0]));
        let g = Graph::new(vec![fc, bn_layer("bn", "fc", 2.0, 0.5, 1.0, 3.0, 1.0)], "x", "bn").unwrap();
        let f = fold_batch_norm(&g).unwrap();
        assert_eq!(f.layer(0).weights.as_ref().unwrap().data(), &[4.0]);
        assert_eq!(f.layer(0).bias.as_ref().unwrap().data(), &[-0.5]);
    }

    #[test]
    fn orphan_batch_norm() {
        let g = Graph::new(
            vec![
                Layer::new("r", LayerKind::Relu, &["x"]),
                bn_layer("bn", "r", 1.0, 0.0, 0.0, 1.0, 1e-5),
            ],
            "x",
            "bn",
        )
        .unwrap();
        assert!(matches!(fold_batch_norm(&g), Err(Error::OrphanBatchNorm(_))));
        let g = Graph::new(vec![bn_layer("bn", "x", 1.0, 0.0, 0.0, 1.0, 1e-5)], "x", "bn").unwrap();
        assert!(matches!(fold_batch_norm(&g), Err(Error::OrphanBatchNorm(_))));
    }

    #[test]
    fn conv_bn_fold_matches_unfolded() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut r = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let p = SpatialParams { stride: 1, padding: 1 };
        let conv = Layer::new("c", LayerKind::Conv2d(p), &["x"])
            .with_weights(t(&[3, 2, 3, 3], r(54, -1.0, 1.0)))
            .with_bias(t(&[3], r(3, -1.0, 1.0)));
        let mut stats = r(6, -2.0, 2.0);
        stats.extend(r(3, -1.0, 1.0));
        stats.extend(r(3, 0.0, 3.0));
        let bn = Layer::new("bn", LayerKind::BatchNorm { eps: 1e-3 }, &["c"]).with_weights(t(&[4, 3], stats));
        let relu = Layer::new("r", LayerKind::Relu, &["bn"]);
        let g = Graph::new(vec![conv, bn, relu], "x", "r").unwrap();
        let f = fold_batch_norm(&g).unwrap();
        assert_eq!(f.layers().len(), 2);
        assert_eq!(f.layer(1).inputs, vec!["c".to_string()]);
        let x = t(&[4, 2, 5, 5], r(200, -1.0, 1.0));
        let a = g.forward(&x).unwrap();
        let b = f.forward(&x).unwrap();
        assert!(b.rel_diff(&a).unwrap() < 1e-10);
    }

    #[test]
    fn hand_evaluated_rescale_factors() {
        // locked channels (x_max >= 5.9) have maxima 0.8 and 1.2 -> t0 = 1
        let t = [0.8, 1.2, 0.25, 2.0];
        let x_max = [5.95, 6.5, 2.0, 1.0];
        let (t0, s, locked) = rescale_factors(&t, &x_max, true, 5.9, 6.0);
        assert_eq!(t0, 1.0);
        assert_eq!(locked, vec![true, true, false, false]);
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], 1.0);
        assert_eq!(s[2], 3.0); // min(4.0, 6 / 2)
        assert_eq!(s[3], 0.5);
    }

    #[test]
    fn lock_limit_is_inclusive_and_dead_filters_lock() {
        let (_, s, locked) = rescale_factors(&[1.0, 0.0, 0.5], &[5.9, 1.0, 1.0], true, 5.9, 6.0);
        assert_eq!(locked, vec![true, true, false]);
        assert_eq!(s[1], 1.0);
    }

    #[test]
    fn no_locked_channels_fall_back_to_mean() {
        let (t0, s, _) = rescale_factors(&[1.0, 3.0], &[1.0, 1.0], true, 5.9, 6.0);
        assert_eq!(t0, 2.0);
        assert_eq!(s, vec![2.0, 2.0 / 3.0]);
        // relu: no locking even above the limit, no cap
        let (t0, s, locked) = rescale_factors(&[1.0, 3.0], &[9.0, 9.0], false, 5.9, 6.0);
        assert_eq!((t0, locked), (2.0, vec![false, false]));
        assert_eq!(s[0], 2.0);
    }

    fn dws_chain(act: Option<LayerKind>, scale_in: f64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = SpatialParams { stride: 1, padding: 1 };
        let c = 4;
        // filters with deliberately different ranges
        let mut w = Vec::new();
        for k in 0..c {
            let r = 0.05 * (1 << k) as f64;
            w.extend((0..9).map(|_| rng.random_range(-r..r)));
        }
        let mut layers = vec![Layer::new("dws", LayerKind::DwsConv2d(p), &["x"])
            .with_weights(t(&[c, 1, 3, 3], w.iter().map(|v| v * scale_in).collect()))
            .with_bias(t(&[c], (0..c).map(|_| rng.random_range(-0.1..0.1)).collect()))];
        let mut prev = "dws";
        if let Some(a) = act {
            layers.push(Layer::new("act", a, &["dws"]));
            prev = "act";
        }
        layers.push(
            Layer::new("pw", LayerKind::Conv2d(SpatialParams::default()), &[prev])
                .with_weights(t(
                    &[3, c, 1, 1],
                    (0..3 * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
                ))
                .with_bias(t(&[3], vec![0.1, 0.0, -0.1])),
        );
        Graph::new(layers, "x", "pw").unwrap()
    }

    #[test]
    fn locked_channels_keep_unit_scale() {
        let g = dws_chain(Some(LayerKind::Relu6), 1.0);
        let calib = Tensor::filled(vec![1, 4, 3, 3], 1.0).unwrap();
        let (_, rep) = dws_rescale(&g, &calib, 1e-9, 6.0).unwrap();
        let p = &rep.patterns[0];
        for k in 0..4 {
            assert_eq!(p.locked[k], p.x_max[k] >= 1e-9);
            if p.locked[k] {
                assert_eq!(p.scales[k], 1.0);
                assert_eq!(p.thresholds_after[k], p.thresholds_before[k]);
            }
        }
    }

    #[test]
    fn rescale_preserves_output_for_each_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for act in [None, Some(LayerKind::Relu), Some(LayerKind::Relu6)] {
            let g = dws_chain(act.clone(), 10.0);
            let calib = t(&[16, 4, 5, 5], (0..1600).map(|_| rng.random_range(-1.0..1.0)).collect());
            let (r, rep) = dws_rescale_default(&g, &calib).unwrap();
            let p = &rep.patterns[0];
            assert_eq!(p.activation.as_deref(), act.as_ref().map(|a| a.name()));
            assert!(p.scales.iter().any(|&s| s != 1.0));
            for (k, (&s, &xm)) in p.scales.iter().zip(&p.x_max).enumerate() {
                assert!(s > 0.0);
                if act == Some(LayerKind::Relu6) && !p.locked[k] {
                    assert!(s * xm <= 6.0 + 1e-12);
                }
            }
            let a = g.forward(&calib).unwrap();
            let b = r.forward(&calib).unwrap();
            assert!(b.rel_diff(&a).unwrap() < 1e-8, "{act:?}");
        }
    }

    #[test]
    fn add_junction_and_missing_pattern() {
        let p = SpatialParams { stride: 1, padding: 1 };
        let w = Tensor::filled(vec![2, 1, 3, 3], 0.1).unwrap();
        let layers = vec![
            Layer::new("dws", LayerKind::DwsConv2d(p), &["x"]).with_weights(w),
            Layer::new("sum", LayerKind::Add, &["dws", "x"]),
        ];
        let g = Graph::new(layers, "x", "sum").unwrap();
        let calib = Tensor::filled(vec![1, 2, 3, 3], 1.0).unwrap();
        assert!(matches!(dws_rescale_default(&g, &calib), Err(Error::NoPatternFound)));
        let (patterns, skipped) = find_patterns(&g);
        assert!(patterns.is_empty());
        assert!(skipped[0].reason.contains("add"));
    }

    #[test]
    fn rescale_requires_folded_graph() {
        let fc = Layer::new("fc", LayerKind::FullyConnected, &["x"]).with_weights(t(&[1, 1], vec![1.0]));
        let g = Graph::new(vec![fc, bn_layer("bn", "fc", 1.0, 0.0, 0.0, 1.0, 1e-5)], "x", "bn").unwrap();
        let calib = t(&[1, 1], vec![1.0]);
        assert!(matches!(
            dws_rescale_default(&g, &calib),
            Err(Error::UnfoldedBatchNorm(_))
        ));
    }
}
