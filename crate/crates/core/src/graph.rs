//! Float model graph: an ordered list of layers in topological order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, LayerKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl Layer {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            weights: None,
            bias: None,
        }
    }

    pub fn with_weights(mut self, weights: Tensor) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn with_bias(mut self, bias: Tensor) -> Self {
        self.bias = Some(bias);
        self
    }

    /// Output channel count for layers that own weights.
    pub fn out_channels(&self) -> Option<usize> {
        let w = self.weights.as_ref()?;
        match self.kind {
            LayerKind::BatchNorm { .. } => w.shape().get(1).copied(),
            _ => w.shape().first().copied(),
        }
    }
}

/// Where a layer reads one of its operands from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    layers: Vec<Layer>,
    input_id: String,
    output_id: String,
    sources: Vec<Vec<Source>>,
    output: usize,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl Graph {
    /// Validates and indexes a layer list. Every input must name the
    /// network input or a layer defined earlier.
    pub fn new(layers: Vec<Layer>, input_id: impl Into<String>, output_id: impl Into<String>) -> Result<Self> {
        let input_id = input_id.into();
        let output_id = output_id.into();
        if !valid_id(&input_id) {
            return Err(Error::InvalidArgument(format!("invalid input id {input_id:?}")));
        }
        let all_ids: HashMap<&str, usize> = layers.iter().enumerate().map(|(i, l)| (l.id.as_str(), i)).collect();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut sources = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            if !valid_id(&layer.id) {
                return Err(Error::InvalidArgument(format!("invalid layer id {:?}", layer.id)));
            }
            if layer.id == input_id || seen.contains_key(layer.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate id {:?}", layer.id)));
            }
            if layer.inputs.len() != layer.kind.arity() {
                return Err(Error::shape(format!(
                    "layer {} ({}) takes {} input(s), has {}",
                    layer.id,
                    layer.kind.name(),
                    layer.kind.arity(),
                    layer.inputs.len()
                )));
            }
            let mut src = Vec::with_capacity(layer.inputs.len());
            for name in &layer.inputs {
                if *name == input_id {
                    src.push(Source::Input);
                } else if let Some(&j) = seen.get(name.as_str()) {
                    src.push(Source::Layer(j));
                } else if all_ids.get(name.as_str()).is_some_and(|&j| j >= i) {
                    return Err(Error::CyclicGraph(layer.id.clone()));
                } else {
                    return Err(Error::DanglingRef(format!("layer {} reads unknown {name:?}", layer.id)));
                }
            }
            validate_params(layer)?;
            sources.push(src);
            seen.insert(layer.id.as_str(), i);
        }
        let output = *seen
            .get(output_id.as_str())
            .ok_or_else(|| Error::DanglingRef(format!("output {output_id:?} is not a layer")))?;
        Ok(Self {
            layers,
            input_id,
            output_id,
            sources,
            output,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &Layer {
        &self.layers[idx]
    }

    pub fn input_id(&self) -> &str {
        &self.input_id
    }

    pub fn output_id(&self) -> &str {
        &self.output_id
    }

    pub fn output_index(&self) -> usize {
        self.output
    }

    pub fn sources(&self, idx: usize) -> &[Source] {
        &self.sources[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// Layers that read the output of `idx`.
    pub fn consumers(&self, idx: usize) -> Vec<usize> {
        self.consumers_of(Source::Layer(idx))
    }

    pub fn consumers_of(&self, src: Source) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&j| self.sources[j].contains(&src))
            .collect()
    }

    pub fn into_parts(self) -> (Vec<Layer>, String, String) {
        (self.layers, self.input_id, self.output_id)
    }

    /// Mutable access to weights and bias. Layer structure stays fixed.
    pub fn params_mut(&mut self, idx: usize) -> (&mut Option<Tensor>, &mut Option<Tensor>) {
        let l = &mut self.layers[idx];
        (&mut l.weights, &mut l.bias)
    }

    /// Runs every layer, returning all intermediate outputs in layer order.
    pub fn forward_all(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let args: Vec<&Tensor> = self.sources[i]
                .iter()
                .map(|s| match *s {
                    Source::Input => input,
                    Source::Layer(j) => &outs[j],
                })
                .collect();
            let y = kernels::forward(&layer.kind, &args, layer.weights.as_ref(), layer.bias.as_ref())?;
            outs.push(y);
        }
        Ok(outs)
    }

    /// Network output (logits) for a batch.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut outs = self.forward_all(input)?;
        Ok(outs.swap_remove(self.output))
    }

    /// Backpropagates `grad_out` (gradient at the output layer) through the
    /// graph. Returns per-layer `(grad_weights, grad_bias)`.
    pub fn backward(
        &self,
        input: &Tensor,
        acts: &[Tensor],
        grad_out: &Tensor,
    ) -> Result<Vec<(Option<Tensor>, Option<Tensor>)>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        grads[self.output] = Some(grad_out.clone());
        let mut params = vec![(None, None); self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let layer = &self.layers[i];
            let args: Vec<&Tensor> = self.sources[i]
                .iter()
                .map(|s| match *s {
                    Source::Input => input,
                    Source::Layer(j) => &acts[j],
                })
                .collect();
            let g = kernels::backward(&layer.kind, &args, layer.weights.as_ref(), layer.bias.as_ref(), &gy)?;
            for (src, gx) in self.sources[i].iter().zip(g.inputs) {
                if let Source::Layer(j) = *src {
                    accumulate(&mut grads[j], gx)?;
                }
            }
            params[i] = (g.weights, g.bias);
        }
        Ok(params)
    }
}

pub(crate) fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(t) => t.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn validate_params(layer: &Layer) -> Result<()> {
    let needs = layer.kind.has_weights();
    match (&layer.weights, needs) {
        (None, true) => return Err(Error::shape(format!("layer {} needs weights", layer.id))),
        (Some(_), false) => {
            return Err(Error::shape(format!(
                "layer {} ({}) cannot carry weights",
                layer.id,
                layer.kind.name()
            )))
        }
        _ => {}
    }
    if layer.bias.is_some() && !layer.kind.is_linear() {
        return Err(Error::shape(format!("layer {} cannot carry a bias", layer.id)));
    }
    if let Some(w) = &layer.weights {
        let ok = match layer.kind {
            LayerKind::Conv2d(_) => w.ndim() == 4,
            LayerKind::DwsConv2d(_) => w.ndim() == 4 && w.shape()[1] == 1,
            LayerKind::FullyConnected => w.ndim() == 2,
            LayerKind::BatchNorm { eps } => w.ndim() == 2 && w.shape()[0] == 4 && eps > 0.0,
            _ => true,
        };
        if !ok {
            return Err(Error::shape(format!(
                "layer {} has weights {:?} invalid for {}",
                layer.id,
                w.shape(),
                layer.kind.name()
            )));
        }
        if let (Some(b), Some(c)) = (&layer.bias, layer.out_channels()) {
            if b.shape() != [c] {
                return Err(Error::shape(format!(
                    "layer {} bias {:?} for {c} channels",
                    layer.id,
                    b.shape()
                )));
            }
        }
    }
    Ok(())
}
