//! Calibration: observed value ranges at every quantization site.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Source};
use crate::quant::plan::QuantPlan;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const EMPTY: Range = Range {
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
    };

    pub fn update(&mut self, t: &Tensor) {
        self.min = self.min.min(t.min());
        self.max = self.max.max(t.max());
    }

    pub fn max_abs(&self) -> f64 {
        self.min.abs().max(self.max.abs())
    }
}

/// Weight statistics, per tensor and per output channel (axis 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub min: f64,
    pub max: f64,
    pub max_abs: f64,
    pub channels: Vec<(f64, f64)>,
    pub channel_max_abs: Vec<f64>,
}

impl WeightStats {
    pub fn of(w: &Tensor) -> Result<Self> {
        let channels = w.channel_ranges(0)?;
        Ok(Self {
            min: w.min(),
            max: w.max(),
            max_abs: w.max_abs(),
            channel_max_abs: w.channel_max_abs(0)?,
            channels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibStats {
    pub samples: usize,
    pub activations: BTreeMap<String, Range>,
    pub weights: BTreeMap<String, WeightStats>,
}

/// Runs `images` through the float graph in batches and records the range
/// of every activation site and the statistics of every weight tensor.
pub fn calibrate(g: &Graph, plan: &QuantPlan, images: &Tensor, batch: usize) -> Result<CalibStats> {
    if images.ndim() == 0 || images.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if !images.is_finite() {
        return Err(Error::NonFiniteInput("calibration images".into()));
    }
    let batch = batch.max(1);
    let n = images.shape()[0];
    let mut ranges = vec![Range::EMPTY; plan.sites.len()];
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let x = images.slice_batch(start, end)?;
        let acts = g.forward_all(&x)?;
        for (r, site) in ranges.iter_mut().zip(&plan.sites) {
            match site.source {
                Source::Input => r.update(&x),
                Source::Layer(i) => r.update(&acts[i]),
            }
        }
        start = end;
    }
    let activations = plan.sites.iter().map(|s| s.id.clone()).zip(ranges).collect();
    let weights = g
        .layers()
        .iter()
        .filter(|l| l.kind.is_linear())
        .map(|l| {
            Ok((
                l.id.clone(),
                WeightStats::of(l.weights.as_ref().expect("linear weights"))?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(CalibStats {
        samples: n,
        activations,
        weights,
    })
}
