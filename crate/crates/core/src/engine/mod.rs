//! Integer inference: int8 operands, int32 accumulators.
//!
//! [`compile`] turns a float graph plus its quantization parameters into a
//! [`QuantizedModel`]; [`run_int8`] executes it. Convolutions and fully
//! connected layers run entirely in integers up to the requantization
//! multiply. Pooling, additions and activations that are not fused into a
//! preceding linear layer are evaluated on dequantized codes with the same
//! float arithmetic the fake-quant simulation uses, then quantized again.

mod format;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use format::{export, import, FORMAT_VERSION, MAGIC};

use crate::error::{Error, Result};
use crate::graph::{Graph, Source};
use crate::kernels::{self, conv_accumulate, ConvGeom, LayerKind, SpatialParams, RELU6_CAP};
use crate::quant::{quantize_bias, quantize_tensor, QuantConfig, QuantParams, QuantPlan, Rounding};
use crate::tensor::{IntTensor, Tensor};
use crate::tune::PointwiseScales;

/// Integer grid of an activation site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteGrid {
    pub scale: f64,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
}

impl SiteGrid {
    fn of(p: &QuantParams) -> Self {
        let g = p.grid(0, Rounding::Nearest);
        Self {
            scale: g.scale,
            zero_point: g.zero_point as i32,
            qmin: g.qmin as i32,
            qmax: g.qmax as i32,
        }
    }

    fn dequantize(&self, q: &IntTensor) -> Tensor {
        q.map(|v| (v as f64 - self.zero_point as f64) / self.scale)
    }

    fn quantize(&self, x: &Tensor) -> IntTensor {
        x.map(|v| ((self.scale * v).round() + self.zero_point as f64).clamp(self.qmin as f64, self.qmax as f64) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    Conv2d(SpatialParams),
    DwsConv2d(SpatialParams),
    FullyConnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusedActivation {
    None,
    Relu,
    Relu6,
}

/// A convolution or fully connected layer in integer form.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOp {
    pub id: String,
    pub kind: LinearKind,
    pub input: String,
    pub output: String,
    pub activation: FusedActivation,
    pub weight_shape: Vec<usize>,
    /// Weight codes minus `weight_offset`.
    pub weights: Vec<i8>,
    pub weight_offset: i32,
    /// Weight zero point per output channel.
    pub weight_zero_points: Vec<i32>,
    pub bias: Vec<i32>,
    /// `S_out / (S_in * S_w)` per output channel.
    pub multipliers: Vec<f64>,
}

/// A layer evaluated on dequantized codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatOp {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Linear(LinearOp),
    Float(FloatOp),
}

impl Op {
    pub fn output(&self) -> &str {
        match self {
            Op::Linear(l) => &l.output,
            Op::Float(f) => &f.id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub input_id: String,
    pub output_id: String,
    pub sites: BTreeMap<String, SiteGrid>,
    pub ops: Vec<Op>,
    /// Free-form provenance entries, such as the hash of the producing
    /// configuration.
    pub meta: BTreeMap<String, String>,
}

fn scaled(t: &Tensor, s: Option<&Tensor>) -> Result<Tensor> {
    match s {
        None => Ok(t.clone()),
        Some(s) => {
            if !s.same_shape(t) {
                return Err(Error::shape(format!(
                    "scale {:?} for tensor {:?}",
                    s.shape(),
                    t.shape()
                )));
            }
            let data = t
                .data()
                .iter()
                .zip(s.data())
                .map(|(&v, &k)| v * k.clamp(crate::tune::POINTWISE_RANGE.0, crate::tune::POINTWISE_RANGE.1))
                .collect();
            Tensor::new(t.shape().to_vec(), data)
        }
    }
}

/// Builds the integer model. Pointwise scales, if given, are folded into
/// weights and biases before quantization.
pub fn compile(g: &Graph, cfg: &QuantConfig, scales: Option<&PointwiseScales>) -> Result<QuantizedModel> {
    let plan = QuantPlan::new(g)?;
    cfg.check_covers(g, &plan)?;
    let mut sites = BTreeMap::new();
    for s in &plan.sites {
        sites.insert(s.id.clone(), SiteGrid::of(cfg.activation(&s.id)?));
    }
    let src_id = |s: Source| -> String {
        match s {
            Source::Input => g.input_id().to_string(),
            Source::Layer(j) => g.layer(j).id.clone(),
        }
    };
    let mut ops = Vec::new();
    for (i, layer) in g.layers().iter().enumerate() {
        if !layer.kind.is_linear() {
            let fused = g
                .sources(i)
                .iter()
                .any(|s| matches!(*s, Source::Layer(j) if plan.fused_activation[j] == Some(i)));
            if !fused {
                ops.push(Op::Float(FloatOp {
                    id: layer.id.clone(),
                    kind: layer.kind.clone(),
                    inputs: g.sources(i).iter().map(|&s| src_id(s)).collect(),
                }));
            }
            continue;
        }
        let input = src_id(g.sources(i)[0]);
        let in_grid = sites
            .get(&input)
            .copied()
            .ok_or_else(|| Error::MissingSiteParams(format!("{} reads unquantized {input}", layer.id)))?;
        let (output, activation) = match plan.fused_activation[i] {
            Some(a) => (
                g.layer(a).id.clone(),
                if g.layer(a).kind == LayerKind::Relu {
                    FusedActivation::Relu
                } else {
                    FusedActivation::Relu6
                },
            ),
            None => (layer.id.clone(), FusedActivation::None),
        };
        let out_grid = sites[&output];
        let wp = cfg.weight(&layer.id)?;
        if wp.bits > 8 {
            return Err(Error::InvalidArgument(format!(
                "{} has {}-bit weights; the engine stores 8-bit codes",
                layer.id, wp.bits
            )));
        }
        let ls = match scales {
            Some(s) => Some(
                s.layers
                    .get(&layer.id)
                    .ok_or_else(|| Error::MissingSiteParams(format!("pointwise scales of {}", layer.id)))?,
            ),
            None => None,
        };
        let w = scaled(layer.weights.as_ref().expect("linear weights"), ls.map(|s| &s.weights))?;
        let codes = quantize_tensor(&w, wp)?;
        let grids = wp.grids(Rounding::Nearest);
        let c_out = w.shape()[0];
        let per_channel = |k: usize| &grids[if grids.len() == 1 { 0 } else { k }];
        let (qmin, _) = wp.code_range();
        let weight_offset = if qmin < 0.0 { 0 } else { 128 };
        let weights = codes.data().iter().map(|&q| (q - weight_offset) as i8).collect();
        let weight_zero_points = (0..c_out).map(|k| per_channel(k).zero_point as i32).collect();
        let s_w: Vec<f64> = grids.iter().map(|g| g.scale).collect();
        let bias = match &layer.bias {
            Some(b) => {
                let b = scaled(b, ls.and_then(|s| s.bias.as_ref()))?;
                quantize_bias(&b, in_grid.scale, &s_w)?.into_data()
            }
            None => vec![0; c_out],
        };
        let multipliers = (0..c_out)
            .map(|k| out_grid.scale / (in_grid.scale * per_channel(k).scale))
            .collect();
        let kind = match layer.kind {
            LayerKind::Conv2d(p) => LinearKind::Conv2d(p),
            LayerKind::DwsConv2d(p) => LinearKind::DwsConv2d(p),
            _ => LinearKind::FullyConnected,
        };
        ops.push(Op::Linear(LinearOp {
            id: layer.id.clone(),
            kind,
            input,
            output,
            activation,
            weight_shape: w.shape().to_vec(),
            weights,
            weight_offset,
            weight_zero_points,
            bias,
            multipliers,
        }));
    }
    let model = QuantizedModel {
        input_id: g.input_id().to_string(),
        output_id: plan.sites[plan.output_site].id.clone(),
        sites,
        ops,
        meta: BTreeMap::new(),
    };
    model.validate()?;
    Ok(model)
}

impl QuantizedModel {
    /// Structural checks shared by compile and import.
    pub fn validate(&self) -> Result<()> {
        let corrupt = |m: String| Err(Error::Corrupt(m));
        if !self.sites.contains_key(&self.input_id) || !self.sites.contains_key(&self.output_id) {
            return corrupt("input or output site has no grid".into());
        }
        for (id, s) in &self.sites {
            if !(s.scale > 0.0 && s.scale.is_finite()) || s.qmin > s.qmax || !(s.qmin..=s.qmax).contains(&s.zero_point)
            {
                return corrupt(format!("site {id} has an invalid grid"));
            }
        }
        let mut known: Vec<&str> = vec![&self.input_id];
        for op in &self.ops {
            let inputs: Vec<&str> = match op {
                Op::Linear(l) => vec![&l.input],
                Op::Float(f) => f.inputs.iter().map(String::as_str).collect(),
            };
            if let Some(missing) = inputs.iter().find(|i| !known.contains(i)) {
                return corrupt(format!("op {} reads {missing} before it is produced", op.output()));
            }
            if let Op::Linear(l) = op {
                let c_out = *l.weight_shape.first().unwrap_or(&0);
                let n: usize = l.weight_shape.iter().product();
                if c_out == 0
                    || l.weights.len() != n
                    || l.bias.len() != c_out
                    || l.multipliers.len() != c_out
                    || l.weight_zero_points.len() != c_out
                    || !self.sites.contains_key(&l.input)
                    || !self.sites.contains_key(&l.output)
                {
                    return corrupt(format!("linear op {} is inconsistent", l.id));
                }
                if l.multipliers.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
                    return corrupt(format!("linear op {} has a non-positive multiplier", l.id));
                }
            }
            known.push(op.output());
        }
        if !known.contains(&self.output_id.as_str()) {
            return corrupt(format!("output {} is never produced", self.output_id));
        }
        Ok(())
    }

    pub fn site(&self, id: &str) -> Result<&SiteGrid> {
        self.sites
            .get(id)
            .ok_or_else(|| Error::MissingSiteParams(id.to_string()))
    }
}

fn overflow(id: &str) -> Error {
    Error::AccumulatorOverflow(format!("layer {id}"))
}

fn run_linear(l: &LinearOp, x: &IntTensor, in_grid: &SiteGrid, out_grid: &SiteGrid) -> Result<IntTensor> {
    let zx = in_grid.zero_point;
    let xc = x
        .data()
        .iter()
        .map(|&q| q.checked_sub(zx))
        .collect::<Option<Vec<i32>>>()
        .ok_or_else(|| overflow(&l.id))?;
    let c_out = l.weight_shape[0];
    let per = l.weights.len() / c_out;
    let wc: Vec<i32> = l
        .weights
        .iter()
        .enumerate()
        .map(|(i, &q)| q as i32 + l.weight_offset - l.weight_zero_points[i / per])
        .collect();
    let mut overflowed = false;
    let mac = |acc: &mut i32, w: i32, x: i32| match w.checked_mul(x).and_then(|p| acc.checked_add(p)) {
        Some(v) => *acc = v,
        None => overflowed = true,
    };
    let (acc, shape, inner) = match l.kind {
        LinearKind::Conv2d(p) | LinearKind::DwsConv2d(p) => {
            let geom = ConvGeom::new(
                x.shape(),
                &l.weight_shape,
                p,
                matches!(l.kind, LinearKind::DwsConv2d(_)),
            )?;
            let shape = geom.out_shape();
            let mut acc = vec![0i32; shape.iter().product()];
            conv_accumulate(&xc, &wc, &geom, &mut acc, mac);
            (acc, shape, geom.oh * geom.ow)
        }
        LinearKind::FullyConnected => {
            let n = x.shape()[0];
            let k = x.len() / n;
            if k != per {
                return Err(Error::shape(format!("{} expects {per} features, got {k}", l.id)));
            }
            let mut acc = vec![0i32; n * c_out];
            let mut mac = mac;
            for b in 0..n {
                let row = &xc[b * k..][..k];
                for o in 0..c_out {
                    let wrow = &wc[o * k..][..k];
                    let slot = &mut acc[b * c_out + o];
                    for (&w, &v) in wrow.iter().zip(row) {
                        mac(slot, w, v);
                    }
                }
            }
            (acc, vec![n, c_out], 1)
        }
    };
    if overflowed {
        return Err(overflow(&l.id));
    }
    let z = out_grid.zero_point;
    let relu6_top = z + (out_grid.scale * RELU6_CAP).round() as i32;
    let mut out = Vec::with_capacity(acc.len());
    for (i, &a) in acc.iter().enumerate() {
        let k = (i / inner) % c_out;
        let total = a.checked_add(l.bias[k]).ok_or_else(|| overflow(&l.id))?;
        let mut q = (l.multipliers[k] * total as f64).round() as i64 + z as i64;
        match l.activation {
            FusedActivation::None => {}
            FusedActivation::Relu => q = q.max(z as i64),
            FusedActivation::Relu6 => q = q.clamp(z as i64, relu6_top as i64),
        }
        out.push(q.clamp(out_grid.qmin as i64, out_grid.qmax as i64) as i32);
    }
    IntTensor::new(shape, out)
}

/// Runs the model and returns the codes at every site along with the
/// dequantized output.
pub fn run_int8_traced(m: &QuantizedModel, input: &Tensor) -> Result<(Tensor, BTreeMap<String, IntTensor>)> {
    if !input.is_finite() {
        return Err(Error::NonFiniteInput("engine input".into()));
    }
    let mut codes: BTreeMap<String, IntTensor> = BTreeMap::new();
    let in_grid = m.site(&m.input_id)?;
    codes.insert(m.input_id.clone(), in_grid.quantize(input));
    for op in &m.ops {
        let get = |id: &str| {
            codes
                .get(id)
                .ok_or_else(|| Error::Corrupt(format!("{id} not yet computed")))
        };
        let (id, q) = match op {
            Op::Linear(l) => {
                let q = run_linear(l, get(&l.input)?, m.site(&l.input)?, m.site(&l.output)?)?;
                (l.output.clone(), q)
            }
            Op::Float(f) => {
                let xs = f
                    .inputs
                    .iter()
                    .map(|i| Ok(m.site(i)?.dequantize(get(i)?)))
                    .collect::<Result<Vec<_>>>()?;
                let args: Vec<&Tensor> = xs.iter().collect();
                let y = kernels::forward(&f.kind, &args, None, None)?;
                (f.id.clone(), m.site(&f.id)?.quantize(&y))
            }
        };
        codes.insert(id, q);
    }
    let out = m.site(&m.output_id)?.dequantize(&codes[&m.output_id]);
    Ok((out, codes))
}

/// Dequantized logits of the integer model.
pub fn run_int8(m: &QuantizedModel, input: &Tensor) -> Result<Tensor> {
    run_int8_traced(m, input).map(|(y, _)| y)
}

/// Integer logits for many images, in batches.
pub fn run_int8_batched(m: &QuantizedModel, images: &Tensor, batch: usize) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut data = Vec::new();
    let mut shape = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch.max(1)).min(n);
        let y = run_int8(m, &images.slice_batch(start, end)?)?;
        shape = y.shape().to_vec();
        data.extend_from_slice(y.data());
        start = end;
    }
    shape[0] = n;
    Tensor::new(shape, data)
}

/// Codes the fake-quant simulation holds at each site, for comparison with
/// [`run_int8_traced`].
pub fn simulated_codes(
    g: &Graph,
    cfg: &QuantConfig,
    scales: Option<&PointwiseScales>,
    input: &Tensor,
) -> Result<BTreeMap<String, IntTensor>> {
    let student = crate::tune::Student::new(g)?;
    let trace = student.forward(input, cfg, scales)?;
    trace
        .site_values(student.plan())
        .into_iter()
        .map(|(id, v)| Ok((id.clone(), quantize_tensor(&v, cfg.activation(&id)?)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Layer;
    use crate::quant::{build_params, calibrate, Granularity, QuantMode, QuantScheme};
    use crate::zoo::{toy_input, toy_net};

    fn setup(g: &Graph, x: &Tensor, scheme: QuantScheme) -> QuantConfig {
        let plan = QuantPlan::new(g).unwrap();
        let stats = calibrate(g, &plan, x, 16).unwrap();
        build_params(g, &plan, &stats, scheme).unwrap()
    }

    #[test]
    fn identity_conv_compiles_to_full_scale_weight() {
        let conv = Layer::new("c", LayerKind::Conv2d(SpatialParams::default()), &["x"])
            .with_weights(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let g = Graph::new(vec![conv], "x", "c").unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![-1.0, 0.5, 0.25, 1.0]).unwrap();
        let cfg = setup(&g, &x, QuantScheme::default());
        let m = compile(&g, &cfg, None).unwrap();
        let Op::Linear(l) = &m.ops[0] else { panic!() };
        assert_eq!(l.weights, vec![127]);
        // S_in = S_out = 127, S_w = 127
        assert!((l.multipliers[0] - 1.0 / 127.0).abs() < 1e-15);
        let y = run_int8(&m, &x).unwrap();
        let want = crate::quant::fake_quant_forward(&x, cfg.activation("x").unwrap(), Rounding::Nearest).unwrap();
        assert_eq!(y, want);
    }

    #[test]
    fn missing_site_is_reported() {
        let g = toy_net(0);
        let x = toy_input(1, 4);
        let mut cfg = setup(&g, &x, QuantScheme::default());
        cfg.activations.remove("r2");
        assert!(matches!(compile(&g, &cfg, None), Err(Error::MissingSiteParams(_))));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let fc = Layer::new("fc", LayerKind::FullyConnected, &["x"])
            .with_weights(Tensor::new(vec![2, 3], vec![0.5, -0.25, 1.0, 0.1, 0.2, -0.3]).unwrap());
        let g = Graph::new(vec![fc], "x", "fc").unwrap();
        let calib = Tensor::new(vec![2, 3], vec![1.0, -1.0, 0.5, 0.3, 0.2, -0.9]).unwrap();
        let cfg = setup(
            &g,
            &calib,
            QuantScheme::uniform(8, QuantMode::Asymmetric, Granularity::PerTensor),
        );
        let m = compile(&g, &cfg, None).unwrap();
        let y = run_int8(&m, &Tensor::zeros(vec![1, 3]).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_simulation_at_every_site() {
        for (seed, scheme) in [
            (0, QuantScheme::default()),
            (
                1,
                QuantScheme::uniform(8, QuantMode::Asymmetric, Granularity::PerChannel { axis: 0 }),
            ),
            (2, QuantScheme::uniform(6, QuantMode::Symmetric, Granularity::PerTensor)),
        ] {
            let g = toy_net(seed);
            let cfg = setup(&g, &toy_input(seed, 32), scheme);
            let m = compile(&g, &cfg, None).unwrap();
            let x = toy_input(seed + 50, 8);
            let (_, got) = run_int8_traced(&m, &x).unwrap();
            let want = simulated_codes(&g, &cfg, None, &x).unwrap();
            assert_eq!(got.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>());
            for (id, q) in &want {
                assert_eq!(&got[id], q, "seed {seed} site {id}");
            }
        }
    }

    #[test]
    fn stored_weights_stay_in_range() {
        let g = toy_net(3);
        let cfg = setup(
            &g,
            &toy_input(3, 16),
            QuantScheme::uniform(8, QuantMode::Asymmetric, Granularity::PerTensor),
        );
        let m = compile(&g, &cfg, None).unwrap();
        for op in &m.ops {
            if let Op::Linear(l) = op {
                assert_eq!(l.weight_offset, 128);
                assert!(l.weight_zero_points.iter().all(|z| (0..=255).contains(z)));
            }
        }
    }

    #[test]
    fn overflow_is_detected() {
        let l = LinearOp {
            id: "fc".into(),
            kind: LinearKind::FullyConnected,
            input: "x".into(),
            output: "fc".into(),
            activation: FusedActivation::None,
            weight_shape: vec![1, 2],
            weights: vec![127, 127],
            weight_offset: 0,
            weight_zero_points: vec![-127],
            bias: vec![0],
            multipliers: vec![1e-9],
        };
        let grid = SiteGrid {
            scale: 1.0,
            zero_point: -2_000_000_000,
            qmin: -2_100_000_000,
            qmax: 2_100_000_000,
        };
        let x = IntTensor::new(vec![1, 2], vec![2_000_000_000, 2_000_000_000]).unwrap();
        assert!(matches!(
            run_linear(&l, &x, &grid, &grid),
            Err(Error::AccumulatorOverflow(_))
        ));
    }
}
