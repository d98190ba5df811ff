use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest threshold or range width a site may have.
pub const THRESHOLD_FLOOR: f64 = 1e-12;

pub const ALPHA_RANGE: (f64, f64) = (0.5, 1.0);
pub const ALPHA_R_RANGE: (f64, f64) = (0.5, 1.0);
pub const ALPHA_T_SIGNED: (f64, f64) = (-0.2, 0.4);
pub const ALPHA_T_UNSIGNED: (f64, f64) = (0.0, 0.4);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signedness {
    Signed,
    Unsigned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

/// How `round` is evaluated. `Identity` drops it, giving the smooth
/// surrogate the straight-through gradients are exact for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rounding {
    #[default]
    Nearest,
    Identity,
}

impl Rounding {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Rounding::Nearest => v.round(),
            Rounding::Identity => v,
        }
    }
}

#[inline]
pub(crate) fn clip(v: f64, (lo, hi): (f64, f64)) -> f64 {
    v.clamp(lo, hi)
}

#[inline]
pub(crate) fn inside(v: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&v)
}

/// Base thresholds and trainable scales of one channel (or of the whole
/// tensor under per-tensor granularity).
///
/// Trainables are stored raw; every use goes through their clipped value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub t_max: f64,
    pub t_l: f64,
    pub t_r: f64,
    pub alpha: f64,
    pub alpha_t: f64,
    pub alpha_r: f64,
}

impl ChannelParams {
    /// Parameters for an observed range `[lo, hi]`. The range is widened to
    /// contain zero, and degenerate thresholds are floored.
    pub fn from_range(lo: f64, hi: f64) -> Self {
        let (lo, hi) = (lo.min(0.0), hi.max(0.0));
        Self {
            t_max: lo.abs().max(hi.abs()),
            t_l: lo,
            t_r: hi,
            alpha: 1.0,
            alpha_t: 0.0,
            alpha_r: 1.0,
        }
    }

    pub fn range(&self) -> f64 {
        (self.t_r - self.t_l).max(THRESHOLD_FLOOR)
    }
}

/// Quantization parameters of one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u32,
    pub signedness: Signedness,
    pub mode: QuantMode,
    pub granularity: Granularity,
    /// One entry per tensor (per-tensor) or per channel along the axis.
    pub channels: Vec<ChannelParams>,
}

/// Integer grid of one channel: `q = clip(round(S*x) + zp, qmin, qmax)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub scale: f64,
    pub zero_point: f64,
    pub qmin: f64,
    pub qmax: f64,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl QuantParams {
    /// Builds parameters from per-channel observed `(min, max)` ranges.
    pub fn from_ranges(
        bits: u32,
        signedness: Signedness,
        mode: QuantMode,
        granularity: Granularity,
        ranges: &[(f64, f64)],
    ) -> Result<Self> {
        let p = Self {
            bits,
            signedness,
            mode,
            granularity,
            channels: ranges
                .iter()
                .map(|&(lo, hi)| ChannelParams::from_range(lo, hi))
                .collect(),
        };
        p.validate()?;
        for (k, c) in p.channels.iter().enumerate() {
            let degenerate = match mode {
                QuantMode::Symmetric => c.t_max < THRESHOLD_FLOOR,
                QuantMode::Asymmetric => c.t_r - c.t_l < THRESHOLD_FLOOR,
            };
            if degenerate {
                log::warn!("channel {k}: degenerate calibration range, threshold floored at {THRESHOLD_FLOOR:e}");
            }
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return Err(Error::InvalidArgument(format!("{} bits outside 2..=16", self.bits)));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidArgument("quant params with no channels".into()));
        }
        if self.granularity == Granularity::PerTensor && self.channels.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "per-tensor params carry {} channels",
                self.channels.len()
            )));
        }
        for c in &self.channels {
            let vals = [c.t_max, c.t_l, c.t_r, c.alpha, c.alpha_t, c.alpha_r];
            if vals.iter().any(|v| !v.is_finite()) || c.t_max < 0.0 || c.t_l > c.t_r {
                return Err(Error::InvalidArgument(format!("invalid channel params {c:?}")));
            }
        }
        Ok(())
    }

    pub fn alpha_t_range(&self) -> (f64, f64) {
        match self.signedness {
            Signedness::Signed => ALPHA_T_SIGNED,
            Signedness::Unsigned => ALPHA_T_UNSIGNED,
        }
    }

    /// Integer code range.
    pub fn code_range(&self) -> (f64, f64) {
        let full = ((1u64 << self.bits) - 1) as f64;
        let half = ((1u64 << (self.bits - 1)) - 1) as f64;
        match (self.mode, self.signedness) {
            (QuantMode::Symmetric, Signedness::Signed) => (-half, half),
            _ => (0.0, full),
        }
    }

    /// Effective `(T_lo, T_hi)` of channel `k` after clipping the
    /// trainable scales.
    pub fn adjusted_threshold(&self, k: usize) -> (f64, f64) {
        let c = &self.channels[k];
        match self.mode {
            QuantMode::Symmetric => {
                let t = (clip(c.alpha, ALPHA_RANGE) * c.t_max).max(THRESHOLD_FLOOR);
                match self.signedness {
                    Signedness::Signed => (-t, t),
                    Signedness::Unsigned => (0.0, t),
                }
            }
            QuantMode::Asymmetric => {
                let r = c.range();
                let lo = c.t_l + clip(c.alpha_t, self.alpha_t_range()) * r;
                (lo, lo + clip(c.alpha_r, ALPHA_R_RANGE) * r)
            }
        }
    }

    /// Scale and zero point of channel `k`.
    pub fn grid(&self, k: usize, rounding: Rounding) -> Grid {
        let (qmin, qmax) = self.code_range();
        let (t_lo, t_hi) = self.adjusted_threshold(k);
        let (scale, zero_point) = match self.mode {
            QuantMode::Symmetric => (qmax / t_hi, 0.0),
            QuantMode::Asymmetric => {
                let s = qmax / (t_hi - t_lo);
                (s, rounding.apply(-s * t_lo).clamp(qmin, qmax))
            }
        };
        Grid {
            scale,
            zero_point,
            qmin,
            qmax,
            t_lo,
            t_hi,
        }
    }

    pub fn grids(&self, rounding: Rounding) -> Vec<Grid> {
        (0..self.channels.len()).map(|k| self.grid(k, rounding)).collect()
    }

    /// Per-channel scales.
    pub fn scales(&self) -> Vec<f64> {
        self.grids(Rounding::Nearest).iter().map(|g| g.scale).collect()
    }

    /// Copy with every trainable replaced by its clipped value.
    pub fn clipped(&self) -> Self {
        let mut p = self.clone();
        let at = self.alpha_t_range();
        for c in &mut p.channels {
            c.alpha = clip(c.alpha, ALPHA_RANGE);
            c.alpha_t = clip(c.alpha_t, at);
            c.alpha_r = clip(c.alpha_r, ALPHA_R_RANGE);
        }
        p
    }

    /// Maps a flat element index of a tensor with `shape` to its channel.
    pub(crate) fn channel_map(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match self.granularity {
            Granularity::PerTensor => Ok((1, usize::MAX)),
            Granularity::PerChannel { axis } => {
                let c = *shape
                    .get(axis)
                    .ok_or_else(|| Error::shape(format!("axis {axis} out of range for {shape:?}")))?;
                if c != self.channels.len() {
                    return Err(Error::shape(format!(
                        "tensor has {c} channels along axis {axis}, params have {}",
                        self.channels.len()
                    )));
                }
                Ok((c, shape[axis + 1..].iter().product()))
            }
        }
    }
}

#[inline]
pub(crate) fn channel_of(i: usize, (c, inner): (usize, usize)) -> usize {
    if c == 1 {
        0
    } else {
        (i / inner) % c
    }
}
