//! Which tensors get quantized, with which signedness, and how their
//! parameters are initialized from calibration statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Source};
use crate::kernels::LayerKind;
use crate::quant::calib::CalibStats;
use crate::quant::params::{Granularity, QuantMode, QuantParams, Signedness};

/// An activation quantization site: the graph input or a layer output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActSite {
    pub id: String,
    pub source: Source,
    pub signedness: Signedness,
}

/// Quantization layout of a float graph.
///
/// A linear layer whose only consumer is a ReLU or ReLU6 is fused with it:
/// the linear output is never quantized and the activation output is the
/// site, as an integer kernel would compute it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantPlan {
    pub sites: Vec<ActSite>,
    /// For each layer, the index into `sites` of its output, if quantized.
    pub layer_site: Vec<Option<usize>>,
    /// For each linear layer fused with its activation, the activation index.
    pub fused_activation: Vec<Option<usize>>,
    pub input_site: usize,
    pub output_site: usize,
}

impl QuantPlan {
    pub fn new(g: &Graph) -> Result<Self> {
        for l in g.layers() {
            match l.kind {
                LayerKind::Softmax => {
                    return Err(Error::UnsupportedKind {
                        kind: "softmax".into(),
                        context: format!("layer {}: quantized graphs end at the logits", l.id),
                    })
                }
                LayerKind::BatchNorm { .. } => return Err(Error::UnfoldedBatchNorm(l.id.clone())),
                _ => {}
            }
        }
        let n = g.layers().len();
        let out = g.output_index();
        let mut fused_activation = vec![None; n];
        let mut fused_away = vec![false; n];
        for (i, l) in g.layers().iter().enumerate() {
            if !l.kind.is_linear() || i == out {
                continue;
            }
            if let [c] = g.consumers(i).as_slice() {
                if g.layer(*c).kind.is_activation() {
                    fused_activation[i] = Some(*c);
                    fused_away[i] = true;
                }
            }
        }

        let mut unsigned = vec![false; n];
        let src_unsigned = |s: &Source, unsigned: &[bool]| match *s {
            Source::Input => false,
            Source::Layer(j) => unsigned[j],
        };
        for (i, l) in g.layers().iter().enumerate() {
            unsigned[i] = match l.kind {
                LayerKind::Relu | LayerKind::Relu6 => true,
                LayerKind::AvgPool(_) => src_unsigned(&g.sources(i)[0], &unsigned),
                LayerKind::Add => g.sources(i).iter().all(|s| src_unsigned(s, &unsigned)),
                _ => false,
            };
        }

        let mut sites = vec![ActSite {
            id: g.input_id().to_string(),
            source: Source::Input,
            signedness: Signedness::Signed,
        }];
        let mut layer_site = vec![None; n];
        for (i, l) in g.layers().iter().enumerate() {
            if fused_away[i] {
                continue;
            }
            layer_site[i] = Some(sites.len());
            sites.push(ActSite {
                id: l.id.clone(),
                source: Source::Layer(i),
                signedness: if unsigned[i] {
                    Signedness::Unsigned
                } else {
                    Signedness::Signed
                },
            });
        }
        let output_site = layer_site[out].expect("output layer is never fused away");
        Ok(Self {
            sites,
            layer_site,
            fused_activation,
            input_site: 0,
            output_site,
        })
    }

    /// Site index holding the value a layer reads from `src`.
    pub fn site_of(&self, src: Source) -> Option<usize> {
        match src {
            Source::Input => Some(self.input_site),
            Source::Layer(j) => self.layer_site[j],
        }
    }

    pub fn site(&self, id: &str) -> Option<&ActSite> {
        self.sites.iter().find(|s| s.id == id)
    }
}

/// Mode and granularity choices for a whole graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub bits: u32,
    pub mode: QuantMode,
    /// Weight granularity for regular convolutions and fully connected layers.
    pub weights: Granularity,
    /// Weight granularity for depthwise layers.
    pub depthwise: Granularity,
}

impl Default for QuantScheme {
    fn default() -> Self {
        Self {
            bits: 8,
            mode: QuantMode::Symmetric,
            weights: Granularity::PerTensor,
            depthwise: Granularity::PerChannel { axis: 0 },
        }
    }
}

impl QuantScheme {
    /// Same granularity for every weighted layer.
    pub fn uniform(bits: u32, mode: QuantMode, granularity: Granularity) -> Self {
        Self {
            bits,
            mode,
            weights: granularity,
            depthwise: granularity,
        }
    }

    pub fn granularity_for(&self, kind: &LayerKind) -> Granularity {
        match kind {
            LayerKind::DwsConv2d(_) => self.depthwise,
            _ => self.weights,
        }
    }
}

/// Parameters of every site, keyed by tensor id (activations) and layer id
/// (weights).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub scheme: QuantScheme,
    pub activations: BTreeMap<String, QuantParams>,
    pub weights: BTreeMap<String, QuantParams>,
}

impl QuantConfig {
    pub fn activation(&self, id: &str) -> Result<&QuantParams> {
        self.activations
            .get(id)
            .ok_or_else(|| Error::MissingSiteParams(format!("activation {id}")))
    }

    pub fn weight(&self, id: &str) -> Result<&QuantParams> {
        self.weights
            .get(id)
            .ok_or_else(|| Error::MissingSiteParams(format!("weights of {id}")))
    }

    /// Copy with every trainable replaced by its clipped value.
    pub fn clipped(&self) -> Self {
        Self {
            scheme: self.scheme,
            activations: self.activations.iter().map(|(k, p)| (k.clone(), p.clipped())).collect(),
            weights: self.weights.iter().map(|(k, p)| (k.clone(), p.clipped())).collect(),
        }
    }

    /// Checks that every site of `plan` and every weighted layer of `g`
    /// has parameters.
    pub fn check_covers(&self, g: &Graph, plan: &QuantPlan) -> Result<()> {
        for s in &plan.sites {
            self.activation(&s.id)?;
        }
        for l in g.layers().iter().filter(|l| l.kind.is_linear()) {
            self.weight(&l.id)?;
        }
        Ok(())
    }
}

/// Initial parameters from calibration: thresholds at the observed
/// extremes, trainable scales at their neutral values.
pub fn build_params(g: &Graph, plan: &QuantPlan, stats: &CalibStats, scheme: QuantScheme) -> Result<QuantConfig> {
    let mut activations = BTreeMap::new();
    for s in &plan.sites {
        let r = stats
            .activations
            .get(&s.id)
            .ok_or_else(|| Error::MissingSiteParams(format!("no calibration statistics for {}", s.id)))?;
        let p = QuantParams::from_ranges(
            scheme.bits,
            s.signedness,
            scheme.mode,
            Granularity::PerTensor,
            &[(r.min, r.max)],
        )?;
        activations.insert(s.id.clone(), p);
    }
    let mut weights = BTreeMap::new();
    for l in g.layers().iter().filter(|l| l.kind.is_linear()) {
        let w = stats
            .weights
            .get(&l.id)
            .ok_or_else(|| Error::MissingSiteParams(format!("no weight statistics for {}", l.id)))?;
        let granularity = scheme.granularity_for(&l.kind);
        let ranges = match granularity {
            Granularity::PerTensor => vec![(w.min, w.max)],
            Granularity::PerChannel { axis: 0 } => w.channels.clone(),
            Granularity::PerChannel { axis } => {
                return Err(Error::InvalidArgument(format!(
                    "weight channels live on axis 0, not {axis}"
                )))
            }
        };
        let p = QuantParams::from_ranges(scheme.bits, Signedness::Signed, scheme.mode, granularity, &ranges)?;
        weights.insert(l.id.clone(), p);
    }
    Ok(QuantConfig {
        scheme,
        activations,
        weights,
    })
}
