//! Quantize, dequantize, fake-quantize and their straight-through gradients.

use crate::error::{Error, Result};
use crate::quant::params::{channel_of, inside, QuantMode, QuantParams, Rounding, ALPHA_RANGE, ALPHA_R_RANGE};
use crate::tensor::{IntTensor, Tensor};

/// Largest magnitude of a 32-bit bias code.
pub const BIAS_LIMIT: f64 = 2_147_483_647.0;

fn check_finite(x: &Tensor, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteInput(what.into()))
    }
}

/// Integer codes `clip(round(S*x) + zp, qmin, qmax)`, channel-wise under
/// per-channel granularity.
pub fn quantize_tensor(x: &Tensor, p: &QuantParams) -> Result<IntTensor> {
    check_finite(x, "quantize_tensor input")?;
    let map = p.channel_map(x.shape())?;
    let grids = p.grids(Rounding::Nearest);
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let g = &grids[channel_of(i, map)];
            ((g.scale * v).round() + g.zero_point).clamp(g.qmin, g.qmax) as i32
        })
        .collect();
    IntTensor::new(x.shape().to_vec(), data)
}

/// `(q - zp) / S`.
pub fn dequantize(q: &IntTensor, p: &QuantParams) -> Result<Tensor> {
    let map = p.channel_map(q.shape())?;
    let grids = p.grids(Rounding::Nearest);
    let data = q
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let g = &grids[channel_of(i, map)];
            (v as f64 - g.zero_point) / g.scale
        })
        .collect();
    Tensor::new(q.shape().to_vec(), data)
}

/// Simulated quantization `dequantize(quantize(x))`. With
/// [`Rounding::Identity`] every round is dropped, leaving only the clips.
pub fn fake_quant_forward(x: &Tensor, p: &QuantParams, rounding: Rounding) -> Result<Tensor> {
    check_finite(x, "fake_quant input")?;
    let map = p.channel_map(x.shape())?;
    let grids = p.grids(rounding);
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let g = &grids[channel_of(i, map)];
            let u = (rounding.apply(g.scale * v) + g.zero_point).clamp(g.qmin, g.qmax);
            (u - g.zero_point) / g.scale
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Gradients of a fake-quant site. Per-channel vectors have one entry per
/// channel of the params.
#[derive(Debug, Clone, PartialEq)]
pub struct SteGrads {
    pub x: Tensor,
    pub alpha: Vec<f64>,
    pub alpha_t: Vec<f64>,
    pub alpha_r: Vec<f64>,
}

/// Straight-through backward pass of [`fake_quant_forward`].
///
/// Round is treated as the identity and each clip passes gradient only
/// inside its bounds (bounds inclusive). Forward quantities are evaluated
/// with `rounding`, so `Rounding::Identity` yields the exact gradient of
/// the round-free surrogate.
pub fn ste_backward(grad_out: &Tensor, x: &Tensor, p: &QuantParams, rounding: Rounding) -> Result<SteGrads> {
    if !grad_out.same_shape(x) {
        return Err(Error::shape(format!(
            "grad_out {:?} vs x {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let map = p.channel_map(x.shape())?;
    let grids = p.grids(rounding);
    let nc = p.channels.len();
    // d(loss)/dS and d(loss)/dz accumulated per channel, with z held fixed
    let mut d_s = vec![0.0; nc];
    let mut d_z = vec![0.0; nc];
    let mut gx = vec![0.0; x.len()];
    for (i, (&v, &go)) in x.data().iter().zip(grad_out.data()).enumerate() {
        let k = channel_of(i, map);
        let g = &grids[k];
        let pre = rounding.apply(g.scale * v) + g.zero_point;
        let m = if pre >= g.qmin && pre <= g.qmax { 1.0 } else { 0.0 };
        let u = pre.clamp(g.qmin, g.qmax);
        gx[i] = go * m;
        d_s[k] += go * (m * v / g.scale - (u - g.zero_point) / (g.scale * g.scale));
        d_z[k] += go * (m - 1.0) / g.scale;
    }

    let mut alpha = vec![0.0; nc];
    let mut alpha_t = vec![0.0; nc];
    let mut alpha_r = vec![0.0; nc];
    for k in 0..nc {
        let c = &p.channels[k];
        let g = &grids[k];
        match p.mode {
            QuantMode::Symmetric => {
                // S = qmax / T, T = clip(alpha) * T_max
                if inside(c.alpha, ALPHA_RANGE) && g.t_hi > crate::quant::params::THRESHOLD_FLOOR {
                    let ds_dt = -g.scale / g.t_hi;
                    alpha[k] = d_s[k] * ds_dt * c.t_max;
                }
            }
            QuantMode::Asymmetric => {
                let r = c.range();
                let raw_z = rounding.apply(-g.scale * g.t_lo);
                let mz = if raw_z >= g.qmin && raw_z <= g.qmax { 1.0 } else { 0.0 };
                // z = clip(round(-S * T_lo)) ties z to both S and T_lo
                let total_s = d_s[k] + d_z[k] * mz * -g.t_lo;
                if inside(c.alpha_r, ALPHA_R_RANGE) {
                    let width = g.t_hi - g.t_lo;
                    alpha_r[k] = total_s * (-g.scale / width) * r;
                }
                if inside(c.alpha_t, p.alpha_t_range()) {
                    alpha_t[k] = d_z[k] * mz * -g.scale * r;
                }
            }
        }
    }
    Ok(SteGrads {
        x: Tensor::new(x.shape().to_vec(), gx)?,
        alpha,
        alpha_t,
        alpha_r,
    })
}

fn bias_scale(s_i: f64, s_w: &[f64], k: usize) -> f64 {
    s_i * if s_w.len() == 1 { s_w[0] } else { s_w[k] }
}

fn check_bias_scales(b: &Tensor, s_i: f64, s_w: &[f64]) -> Result<()> {
    if s_w.len() != 1 && s_w.len() != b.len() {
        return Err(Error::shape(format!(
            "{} weight scales for {} biases",
            s_w.len(),
            b.len()
        )));
    }
    // NaN fails the comparison too
    let positive = |s: f64| s > 0.0;
    if !positive(s_i) || !s_w.iter().all(|&s| positive(s)) {
        return Err(Error::InvalidArgument("bias scales must be positive".into()));
    }
    Ok(())
}

/// 32-bit bias codes `clip(round(S_i * S_w * b), -(2^31-1), 2^31-1)`.
/// `s_w` holds one scale or one per output channel.
pub fn quantize_bias(b: &Tensor, s_i: f64, s_w: &[f64]) -> Result<IntTensor> {
    check_bias_scales(b, s_i, s_w)?;
    let data = b
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| (bias_scale(s_i, s_w, k) * v).round().clamp(-BIAS_LIMIT, BIAS_LIMIT) as i32)
        .collect();
    IntTensor::new(b.shape().to_vec(), data)
}

/// Simulated bias quantization. Returns the dequantized bias and the clip
/// mask used for its straight-through gradient.
pub fn fake_quant_bias(b: &Tensor, s_i: f64, s_w: &[f64], rounding: Rounding) -> Result<(Tensor, Vec<bool>)> {
    check_bias_scales(b, s_i, s_w)?;
    let mut mask = Vec::with_capacity(b.len());
    let data = b
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let s = bias_scale(s_i, s_w, k);
            let pre = rounding.apply(s * v);
            mask.push(pre.abs() <= BIAS_LIMIT);
            match rounding {
                // skip the divide so the surrogate bias is exactly b
                Rounding::Identity if pre.abs() <= BIAS_LIMIT => v,
                _ => pre.clamp(-BIAS_LIMIT, BIAS_LIMIT) / s,
            }
        })
        .collect();
    Ok((Tensor::new(b.shape().to_vec(), data)?, mask))
}
