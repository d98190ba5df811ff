//! The fake-quantized student network and its backward pass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{accumulate, Graph, Source};
use crate::kernels;
use crate::quant::params::{clip, inside};
use crate::quant::{fake_quant_bias, fake_quant_forward, ste_backward, QuantConfig, QuantParams, QuantPlan, Rounding};
use crate::tensor::Tensor;

pub const POINTWISE_RANGE: (f64, f64) = (0.75, 1.25);

/// Multiplicative factors on one layer's weights and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScales {
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

/// Trainable per-element scale factors on every weight and bias tensor.
/// Values are stored raw and always applied clipped to `[0.75, 1.25]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseScales {
    pub layers: BTreeMap<String, LayerScales>,
}

impl PointwiseScales {
    /// All factors at 1.
    pub fn ones(g: &Graph) -> Self {
        let layers = g
            .layers()
            .iter()
            .filter(|l| l.kind.is_linear())
            .map(|l| {
                let w = l.weights.as_ref().expect("linear weights");
                let s = LayerScales {
                    weights: Tensor::filled(w.shape().to_vec(), 1.0).expect("non-empty weights"),
                    bias: l
                        .bias
                        .as_ref()
                        .map(|b| Tensor::filled(b.shape().to_vec(), 1.0).expect("non-empty bias")),
                };
                (l.id.clone(), s)
            })
            .collect();
        Self { layers }
    }

    pub fn clipped(&self) -> Self {
        let c = |t: &Tensor| t.map(|v| clip(v, POINTWISE_RANGE));
        Self {
            layers: self
                .layers
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        LayerScales {
                            weights: c(&s.weights),
                            bias: s.bias.as_ref().map(c),
                        },
                    )
                })
                .collect(),
        }
    }

    fn get(&self, id: &str) -> Result<&LayerScales> {
        self.layers
            .get(id)
            .ok_or_else(|| Error::MissingSiteParams(format!("pointwise scales of {id}")))
    }
}

fn scaled(t: &Tensor, s: Option<&Tensor>) -> Result<Tensor> {
    match s {
        None => Ok(t.clone()),
        Some(s) if s.same_shape(t) => {
            let data = t
                .data()
                .iter()
                .zip(s.data())
                .map(|(&v, &k)| v * clip(k, POINTWISE_RANGE))
                .collect();
            Tensor::new(t.shape().to_vec(), data)
        }
        Some(s) => Err(Error::shape(format!(
            "scale {:?} for tensor {:?}",
            s.shape(),
            t.shape()
        ))),
    }
}

/// Gradients of the trainable scales of one quantization site.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SiteGrads {
    pub alpha: Vec<f64>,
    pub alpha_t: Vec<f64>,
    pub alpha_r: Vec<f64>,
}

impl SiteGrads {
    fn add(&mut self, g: crate::quant::SteGrads) {
        let add = |a: &mut Vec<f64>, b: Vec<f64>| {
            if a.is_empty() {
                *a = b;
            } else {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        };
        add(&mut self.alpha, g.alpha);
        add(&mut self.alpha_t, g.alpha_t);
        add(&mut self.alpha_r, g.alpha_r);
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StudentGrads {
    pub activations: BTreeMap<String, SiteGrads>,
    pub weights: BTreeMap<String, SiteGrads>,
    /// Present only when pointwise scales were supplied.
    pub pointwise: BTreeMap<String, LayerScales>,
}

struct LayerState {
    /// Scaled float weights before fake-quant, and after.
    w_pre: Option<Tensor>,
    w_q: Option<Tensor>,
    b_q: Option<Tensor>,
    b_mask: Vec<bool>,
    /// Layer output before the site's fake-quant.
    raw: Tensor,
}

/// Intermediate values of one student forward pass.
pub struct StudentTrace {
    input_q: Tensor,
    layers: Vec<LayerState>,
    /// Value each layer hands to its consumers (fake-quantized at sites).
    values: Vec<Tensor>,
}

impl StudentTrace {
    pub fn output(&self, g: &Graph) -> &Tensor {
        &self.values[g.output_index()]
    }

    /// Fake-quantized value at every activation site, keyed by site id.
    pub fn site_values(&self, plan: &QuantPlan) -> BTreeMap<String, Tensor> {
        plan.sites
            .iter()
            .map(|s| {
                let v = match s.source {
                    Source::Input => self.input_q.clone(),
                    Source::Layer(i) => self.values[i].clone(),
                };
                (s.id.clone(), v)
            })
            .collect()
    }
}

/// A float graph evaluated with fake quantization at every weight and
/// activation site. The graph itself is never modified.
pub struct Student<'a> {
    g: &'a Graph,
    plan: QuantPlan,
    pub rounding: Rounding,
}

impl<'a> Student<'a> {
    pub fn new(g: &'a Graph) -> Result<Self> {
        Ok(Self {
            g,
            plan: QuantPlan::new(g)?,
            rounding: Rounding::Nearest,
        })
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn plan(&self) -> &QuantPlan {
        &self.plan
    }

    pub fn graph(&self) -> &Graph {
        self.g
    }

    fn site_params<'c>(&self, cfg: &'c QuantConfig, src: Source) -> Result<&'c QuantParams> {
        let s = self
            .plan
            .site_of(src)
            .ok_or_else(|| Error::MissingSiteParams("linear layer reads an unquantized tensor".into()))?;
        cfg.activation(&self.plan.sites[s].id)
    }

    pub fn forward(&self, input: &Tensor, cfg: &QuantConfig, scales: Option<&PointwiseScales>) -> Result<StudentTrace> {
        cfg.check_covers(self.g, &self.plan)?;
        let input_q = fake_quant_forward(input, cfg.activation(self.g.input_id())?, self.rounding)?;
        let mut layers: Vec<LayerState> = Vec::with_capacity(self.g.layers().len());
        let mut values: Vec<Tensor> = Vec::with_capacity(self.g.layers().len());
        for (i, layer) in self.g.layers().iter().enumerate() {
            let srcs = self.g.sources(i);
            let args: Vec<&Tensor> = srcs
                .iter()
                .map(|s| match *s {
                    Source::Input => &input_q,
                    Source::Layer(j) => &values[j],
                })
                .collect();
            let mut st = LayerState {
                w_pre: None,
                w_q: None,
                b_q: None,
                b_mask: Vec::new(),
                raw: Tensor::zeros(vec![1])?,
            };
            if layer.kind.is_linear() {
                let ls = scales.map(|s| s.get(&layer.id)).transpose()?;
                let wp = cfg.weight(&layer.id)?;
                let w_pre = scaled(layer.weights.as_ref().expect("linear weights"), ls.map(|s| &s.weights))?;
                let w_q = fake_quant_forward(&w_pre, wp, self.rounding)?;
                if let Some(b) = &layer.bias {
                    let b_pre = scaled(b, ls.and_then(|s| s.bias.as_ref()))?;
                    let s_i = self.site_params(cfg, srcs[0])?.grid(0, self.rounding).scale;
                    let s_w: Vec<f64> = wp.grids(self.rounding).iter().map(|g| g.scale).collect();
                    let (bq, mask) = fake_quant_bias(&b_pre, s_i, &s_w, self.rounding)?;
                    st.b_q = Some(bq);
                    st.b_mask = mask;
                }
                st.w_pre = Some(w_pre);
                st.w_q = Some(w_q);
            }
            st.raw = kernels::forward(&layer.kind, &args, st.w_q.as_ref(), st.b_q.as_ref())?;
            let value = match self.plan.layer_site[i] {
                Some(s) => fake_quant_forward(&st.raw, cfg.activation(&self.plan.sites[s].id)?, self.rounding)?,
                None => st.raw.clone(),
            };
            layers.push(st);
            values.push(value);
        }
        Ok(StudentTrace {
            input_q,
            layers,
            values,
        })
    }

    /// Backpropagates `grad_out` (gradient at the student's output) to
    /// every trainable scale. Gradients of biases with respect to the
    /// activation and weight scales used to quantize them are not formed.
    pub fn backward(
        &self,
        input: &Tensor,
        trace: &StudentTrace,
        cfg: &QuantConfig,
        scales: Option<&PointwiseScales>,
        grad_out: &Tensor,
    ) -> Result<StudentGrads> {
        let n = self.g.layers().len();
        let mut gv: Vec<Option<Tensor>> = vec![None; n];
        let mut g_input: Option<Tensor> = None;
        gv[self.g.output_index()] = Some(grad_out.clone());
        let mut out = StudentGrads::default();

        for i in (0..n).rev() {
            let Some(mut gy) = gv[i].take() else { continue };
            let layer = self.g.layer(i);
            let st = &trace.layers[i];
            if let Some(s) = self.plan.layer_site[i] {
                let id = &self.plan.sites[s].id;
                let sg = ste_backward(&gy, &st.raw, cfg.activation(id)?, self.rounding)?;
                gy = sg.x.clone();
                out.activations.entry(id.clone()).or_default().add(sg);
            }
            let srcs = self.g.sources(i);
            let args: Vec<&Tensor> = srcs
                .iter()
                .map(|s| match *s {
                    Source::Input => &trace.input_q,
                    Source::Layer(j) => &trace.values[j],
                })
                .collect();
            let kg = kernels::backward(&layer.kind, &args, st.w_q.as_ref(), st.b_q.as_ref(), &gy)?;
            for (src, gx) in srcs.iter().zip(kg.inputs) {
                match *src {
                    Source::Input => accumulate(&mut g_input, gx)?,
                    Source::Layer(j) => accumulate(&mut gv[j], gx)?,
                }
            }
            if let Some(gw) = kg.weights.filter(|_| layer.kind.is_linear()) {
                let w_pre = st.w_pre.as_ref().expect("linear state");
                let sg = ste_backward(&gw, w_pre, cfg.weight(&layer.id)?, self.rounding)?;
                let g_wpre = sg.x.clone();
                out.weights.entry(layer.id.clone()).or_default().add(sg);
                if let Some(ps) = scales {
                    let ls = ps.get(&layer.id)?;
                    let w = layer.weights.as_ref().expect("linear weights");
                    let gs_w = pointwise_grad(&g_wpre, w, &ls.weights, None)?;
                    let gs_b = match (&layer.bias, &ls.bias, &kg.bias) {
                        (Some(b), Some(sb), Some(gb)) => Some(pointwise_grad(gb, b, sb, Some(&st.b_mask))?),
                        _ => None,
                    };
                    out.pointwise.insert(
                        layer.id.clone(),
                        LayerScales {
                            weights: gs_w,
                            bias: gs_b,
                        },
                    );
                }
            }
        }
        if let Some(gi) = g_input {
            let id = self.g.input_id();
            let sg = ste_backward(&gi, input, cfg.activation(id)?, self.rounding)?;
            out.activations.entry(id.to_string()).or_default().add(sg);
        }
        Ok(out)
    }
}

/// `d/ds` of `clip(s) * t` given the gradient `g` at the product.
fn pointwise_grad(g: &Tensor, t: &Tensor, s: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let data = g
        .data()
        .iter()
        .zip(t.data())
        .zip(s.data())
        .enumerate()
        .map(|(i, ((&gv, &tv), &sv))| {
            let pass = inside(sv, POINTWISE_RANGE) && mask.map_or(true, |m| m[i]);
            if pass {
                gv * tv
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(t.shape().to_vec(), data)
}
