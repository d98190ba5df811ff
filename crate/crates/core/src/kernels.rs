//! Forward and backward kernels for every layer kind the pipeline handles.
//!
//! All kernels are pure functions of their arguments. Spatial kernels take
//! NCHW input and zero-pad; fully connected layers flatten everything past
//! the batch axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Saturation constant of ReLU6.
pub const RELU6_CAP: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialParams {
    pub stride: usize,
    pub padding: usize,
}

impl Default for SpatialParams {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolParams {
    pub size: usize,
    pub stride: usize,
}

/// Layer kind plus its hyperparameters.
///
/// Weight layouts: `Conv2d` is `[out_ch, in_ch, kh, kw]`, `DwsConv2d` is
/// `[ch, 1, kh, kw]` (channel multiplier 1), `FullyConnected` is
/// `[out, in]`, and `BatchNorm` stores its statistics as a `[4, ch]`
/// tensor with rows gamma, beta, running mean, running variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d(SpatialParams),
    DwsConv2d(SpatialParams),
    FullyConnected,
    BatchNorm { eps: f64 },
    Relu,
    Relu6,
    AvgPool(PoolParams),
    Softmax,
    Add,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::DwsConv2d(_) => "dws_conv2d",
            LayerKind::FullyConnected => "fully_connected",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::Relu6 => "relu6",
            LayerKind::AvgPool(_) => "avg_pool",
            LayerKind::Softmax => "softmax",
            LayerKind::Add => "add",
        }
    }

    /// Layers that own a weight tensor and an optional bias.
    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d(_) | LayerKind::DwsConv2d(_) | LayerKind::FullyConnected
        )
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, LayerKind::Relu | LayerKind::Relu6)
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    pub fn has_weights(&self) -> bool {
        self.is_linear() || matches!(self, LayerKind::BatchNorm { .. })
    }
}

/// Gradients produced by [`backward`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub inputs: Vec<Tensor>,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
    pub cin_per_group: usize,
    pub cout_per_group: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], p: SpatialParams, depthwise: bool) -> Result<Self> {
        let [n, c_in, h, w] = *input else {
            return Err(Error::shape(format!("conv input must be NCHW, got {input:?}")));
        };
        let [c_out, wc, kh, kw] = *weight else {
            return Err(Error::shape(format!("conv weight must be 4-d, got {weight:?}")));
        };
        if p.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let groups = if depthwise {
            if wc != 1 || c_out != c_in {
                return Err(Error::shape(format!(
                    "depthwise weight {weight:?} incompatible with {c_in} input channels"
                )));
            }
            c_in
        } else {
            if wc != c_in {
                return Err(Error::shape(format!(
                    "conv weight {weight:?} expects {wc} input channels, input has {c_in}"
                )));
            }
            1
        };
        if h + 2 * p.padding < kh || w + 2 * p.padding < kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride: p.stride,
            pad: p.padding,
            oh: (h + 2 * p.padding - kh) / p.stride + 1,
            ow: (w + 2 * p.padding - kw) / p.stride + 1,
            cin_per_group: c_in / groups,
            cout_per_group: c_out / groups,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.oh, self.ow]
    }

    /// Output positions `o` along one axis for which `o*stride + k - pad`
    /// lands inside `0..len`.
    #[inline]
    pub fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest o with o*s + k >= pad
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        // largest o with o*s + k - pad <= len - 1
        let hi = if len + self.pad < k + 1 {
            0
        } else {
            ((len + self.pad - k - 1) / s + 1).min(out_len)
        };
        (lo.min(hi), hi)
    }
}

/// Direct grouped convolution over raw buffers. Generic over the element
/// type so the integer engine shares the loop structure with the float path.
pub(crate) fn conv_accumulate<T, A>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [A], mut mac: impl FnMut(&mut A, T, T))
where
    T: Copy,
{
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    for n in 0..g.n {
        for oc in 0..g.c_out {
            let group = oc / g.cout_per_group;
            let out_plane = &mut out[(n * g.c_out + oc) * plane_out..][..plane_out];
            for icl in 0..g.cin_per_group {
                let ic = group * g.cin_per_group + icl;
                let x_plane = &x[(n * g.c_in + ic) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid_range(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (ox0, ox1) = g.valid_range(kx, g.w, g.ow);
                        let wv = w[((oc * g.cin_per_group + icl) * g.kh + ky) * g.kw + kx];
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_out = &mut out_plane[oy * g.ow..][..g.ow];
                            let row_in = &x_plane[iy * g.w..][..g.w];
                            for (ox, o) in row_out.iter_mut().enumerate().take(ox1).skip(ox0) {
                                mac(o, wv, row_in[ox * g.stride + kx - g.pad]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &ConvGeom) -> Result<Tensor> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.c_out * plane];
    if let Some(b) = b {
        check_bias(b, g.c_out)?;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(b.data()[i % g.c_out]);
        }
    }
    conv_accumulate(x.data(), w.data(), g, &mut out, |acc, wv, xv| *acc += wv * xv);
    Tensor::new(g.out_shape(), out)
}

fn conv_backward(x: &Tensor, w: &Tensor, has_bias: bool, g: &ConvGeom, gy: &Tensor) -> Result<Grads> {
    if gy.shape() != g.out_shape().as_slice() {
        return Err(Error::shape(format!(
            "grad_out {:?} vs conv output {:?}",
            gy.shape(),
            g.out_shape()
        )));
    }
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let (xd, wd, gyd) = (x.data(), w.data(), gy.data());
    for n in 0..g.n {
        for oc in 0..g.c_out {
            let group = oc / g.cout_per_group;
            let gy_plane = &gyd[(n * g.c_out + oc) * plane_out..][..plane_out];
            for icl in 0..g.cin_per_group {
                let ic = group * g.cin_per_group + icl;
                let base_in = (n * g.c_in + ic) * plane_in;
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid_range(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (ox0, ox1) = g.valid_range(kx, g.w, g.ow);
                        let widx = ((oc * g.cin_per_group + icl) * g.kh + ky) * g.kw + kx;
                        let wv = wd[widx];
                        let mut acc_w = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.pad;
                                let go = gy_plane[oy * g.ow + ox];
                                let xi = base_in + iy * g.w + ix;
                                acc_w += go * xd[xi];
                                gx[xi] += go * wv;
                            }
                        }
                        gw[widx] += acc_w;
                    }
                }
            }
        }
    }
    let gb = if has_bias {
        let mut gb = vec![0.0; g.c_out];
        for (i, chunk) in gyd.chunks(plane_out).enumerate() {
            gb[i % g.c_out] += chunk.iter().sum::<f64>();
        }
        Some(Tensor::new(vec![g.c_out], gb)?)
    } else {
        None
    };
    Ok(Grads {
        inputs: vec![Tensor::new(x.shape().to_vec(), gx)?],
        weights: Some(Tensor::new(w.shape().to_vec(), gw)?),
        bias: gb,
    })
}

fn check_bias(b: &Tensor, ch: usize) -> Result<()> {
    if b.shape() != [ch] {
        return Err(Error::shape(format!("bias {:?} for {ch} output channels", b.shape())));
    }
    Ok(())
}

fn fc_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    let n = *x
        .shape()
        .first()
        .ok_or_else(|| Error::shape("fc input has no batch axis"))?;
    let features = x.len() / n;
    let [out, inp] = *w.shape() else {
        return Err(Error::shape(format!("fc weight must be 2-d, got {:?}", w.shape())));
    };
    if inp != features {
        return Err(Error::shape(format!(
            "fc weight expects {inp} features, input has {features}"
        )));
    }
    Ok((n, features, out))
}

fn fc_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, f, o) = fc_dims(x, w)?;
    if let Some(b) = b {
        check_bias(b, o)?;
    }
    let mut out = vec![0.0; n * o];
    for i in 0..n {
        let xr = &x.data()[i * f..][..f];
        for j in 0..o {
            let wr = &w.data()[j * f..][..f];
            let mut acc = b.map_or(0.0, |b| b.data()[j]);
            for k in 0..f {
                acc += wr[k] * xr[k];
            }
            out[i * o + j] = acc;
        }
    }
    Tensor::new(vec![n, o], out)
}

fn fc_backward(x: &Tensor, w: &Tensor, has_bias: bool, gy: &Tensor) -> Result<Grads> {
    let (n, f, o) = fc_dims(x, w)?;
    if gy.shape() != [n, o] {
        return Err(Error::shape(format!(
            "grad_out {:?} vs fc output [{n}, {o}]",
            gy.shape()
        )));
    }
    let mut gx = vec![0.0; n * f];
    let mut gw = vec![0.0; o * f];
    for i in 0..n {
        let xr = &x.data()[i * f..][..f];
        let gxr = &mut gx[i * f..][..f];
        for j in 0..o {
            let go = gy.data()[i * o + j];
            let wr = &w.data()[j * f..][..f];
            let gwr = &mut gw[j * f..][..f];
            for k in 0..f {
                gxr[k] += go * wr[k];
                gwr[k] += go * xr[k];
            }
        }
    }
    let gb = if has_bias {
        let mut gb = vec![0.0; o];
        for row in gy.data().chunks(o) {
            for (a, b) in gb.iter_mut().zip(row) {
                *a += b;
            }
        }
        Some(Tensor::new(vec![o], gb)?)
    } else {
        None
    };
    Ok(Grads {
        inputs: vec![Tensor::new(x.shape().to_vec(), gx)?],
        weights: Some(Tensor::new(w.shape().to_vec(), gw)?),
        bias: gb,
    })
}

/// Per-channel view of an `[N, C, ...]` tensor: `(channels, inner)`.
fn channel_dims(x: &Tensor) -> Result<(usize, usize)> {
    if x.ndim() < 2 {
        return Err(Error::shape(format!("expected [N, C, ...], got {:?}", x.shape())));
    }
    let c = x.shape()[1];
    Ok((c, x.len() / (x.shape()[0] * c)))
}

fn bn_stats(w: &Tensor, c: usize, eps: f64) -> Result<()> {
    if w.shape() != [4, c] {
        return Err(Error::shape(format!(
            "batch norm stats must be [4, {c}], got {:?}",
            w.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("batch norm eps {eps} must be positive")));
    }
    if w.data()[3 * c..].iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(
            "batch norm variance must be non-negative".into(),
        ));
    }
    Ok(())
}

fn bn_forward(x: &Tensor, w: &Tensor, eps: f64) -> Result<Tensor> {
    let (c, inner) = channel_dims(x)?;
    bn_stats(w, c, eps)?;
    let s = w.data();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let ch = i % c;
        let (gamma, beta, mean, var) = (s[ch], s[c + ch], s[2 * c + ch], s[3 * c + ch]);
        let inv = 1.0 / (var + eps).sqrt();
        for v in chunk {
            *v = gamma * (*v - mean) * inv + beta;
        }
    }
    Ok(out)
}

fn bn_backward(x: &Tensor, w: &Tensor, eps: f64, gy: &Tensor) -> Result<Grads> {
    let (c, inner) = channel_dims(x)?;
    bn_stats(w, c, eps)?;
    let s = w.data();
    let mut gx = Tensor::zeros_like(x);
    let mut gs = vec![0.0; 4 * c];
    for (i, (gxc, (xc, gyc))) in gx
        .data_mut()
        .chunks_mut(inner)
        .zip(x.data().chunks(inner).zip(gy.data().chunks(inner)))
        .enumerate()
    {
        let ch = i % c;
        let (gamma, mean, var) = (s[ch], s[2 * c + ch], s[3 * c + ch]);
        let inv = 1.0 / (var + eps).sqrt();
        for ((gxv, &xv), &g) in gxc.iter_mut().zip(xc).zip(gyc) {
            *gxv = g * gamma * inv;
            gs[ch] += g * (xv - mean) * inv;
            gs[c + ch] += g;
            gs[2 * c + ch] -= g * gamma * inv;
            gs[3 * c + ch] -= 0.5 * g * gamma * (xv - mean) * inv * inv * inv;
        }
    }
    Ok(Grads {
        inputs: vec![gx],
        weights: Some(Tensor::new(vec![4, c], gs)?),
        bias: None,
    })
}

fn pool_dims(x: &Tensor, p: PoolParams) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let [n, c, h, w] = *x.shape() else {
        return Err(Error::shape(format!("pool input must be NCHW, got {:?}", x.shape())));
    };
    if p.size == 0 || p.stride == 0 || p.size > h || p.size > w {
        return Err(Error::shape(format!("pool {p:?} invalid for {h}x{w}")));
    }
    Ok((n, c, h, w, (h - p.size) / p.stride + 1, (w - p.size) / p.stride + 1))
}

fn pool_forward(x: &Tensor, p: PoolParams) -> Result<Tensor> {
    let (n, c, h, w, oh, ow) = pool_dims(x, p)?;
    let inv = 1.0 / (p.size * p.size) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for (plane, o) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..p.size {
                    let row = &plane[(oy * p.stride + ky) * w + ox * p.stride..][..p.size];
                    acc += row.iter().sum::<f64>();
                }
                o[oy * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

fn pool_backward(x: &Tensor, p: PoolParams, gy: &Tensor) -> Result<Grads> {
    let (n, c, h, w, oh, ow) = pool_dims(x, p)?;
    if gy.shape() != [n, c, oh, ow] {
        return Err(Error::shape(format!("grad_out {:?} vs pool output", gy.shape())));
    }
    let inv = 1.0 / (p.size * p.size) as f64;
    let mut gx = Tensor::zeros_like(x);
    for (plane, g) in gx.data_mut().chunks_mut(h * w).zip(gy.data().chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g[oy * ow + ox] * inv;
                for ky in 0..p.size {
                    for v in &mut plane[(oy * p.stride + ky) * w + ox * p.stride..][..p.size] {
                        *v += go;
                    }
                }
            }
        }
    }
    Ok(Grads {
        inputs: vec![gx],
        weights: None,
        bias: None,
    })
}

fn softmax_rows(x: &Tensor) -> Result<(Tensor, usize)> {
    let k = *x.shape().last().ok_or_else(|| Error::shape("softmax of a scalar"))?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok((out, k))
}

fn expect_inputs(kind: &LayerKind, inputs: &[&Tensor]) -> Result<()> {
    if inputs.len() != kind.arity() {
        return Err(Error::shape(format!(
            "{} takes {} input(s), got {}",
            kind.name(),
            kind.arity(),
            inputs.len()
        )));
    }
    Ok(())
}

fn require<'a>(t: Option<&'a Tensor>, kind: &LayerKind) -> Result<&'a Tensor> {
    t.ok_or_else(|| Error::shape(format!("{} requires a weight tensor", kind.name())))
}

/// Evaluates one layer.
pub fn forward(
    kind: &LayerKind,
    inputs: &[&Tensor],
    weights: Option<&Tensor>,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    expect_inputs(kind, inputs)?;
    let x = inputs[0];
    match kind {
        LayerKind::Conv2d(p) | LayerKind::DwsConv2d(p) => {
            let w = require(weights, kind)?;
            let g = ConvGeom::new(x.shape(), w.shape(), *p, matches!(kind, LayerKind::DwsConv2d(_)))?;
            conv_forward(x, w, bias, &g)
        }
        LayerKind::FullyConnected => fc_forward(x, require(weights, kind)?, bias),
        LayerKind::BatchNorm { eps } => bn_forward(x, require(weights, kind)?, *eps),
        LayerKind::Relu => Ok(x.map(|v| v.max(0.0))),
        LayerKind::Relu6 => Ok(x.map(|v| v.clamp(0.0, RELU6_CAP))),
        LayerKind::AvgPool(p) => pool_forward(x, *p),
        LayerKind::Softmax => softmax_rows(x).map(|(s, _)| s),
        LayerKind::Add => {
            let mut out = x.clone();
            out.add_assign(inputs[1])?;
            Ok(out)
        }
    }
}

/// Gradients of a scalar loss with respect to the layer's inputs and
/// parameters, given the gradient at its output. Forward quantities are
/// recomputed from `inputs`.
pub fn backward(
    kind: &LayerKind,
    inputs: &[&Tensor],
    weights: Option<&Tensor>,
    bias: Option<&Tensor>,
    grad_out: &Tensor,
) -> Result<Grads> {
    expect_inputs(kind, inputs)?;
    let x = inputs[0];
    let elementwise = |mask: &dyn Fn(f64) -> bool| -> Result<Grads> {
        if !x.same_shape(grad_out) {
            return Err(Error::shape(format!(
                "grad_out {:?} vs input {:?}",
                grad_out.shape(),
                x.shape()
            )));
        }
        let data = x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| if mask(v) { g } else { 0.0 })
            .collect();
        Ok(Grads {
            inputs: vec![Tensor::new(x.shape().to_vec(), data)?],
            weights: None,
            bias: None,
        })
    };
    match kind {
        LayerKind::Conv2d(p) | LayerKind::DwsConv2d(p) => {
            let w = require(weights, kind)?;
            let g = ConvGeom::new(x.shape(), w.shape(), *p, matches!(kind, LayerKind::DwsConv2d(_)))?;
            conv_backward(x, w, bias.is_some(), &g, grad_out)
        }
        LayerKind::FullyConnected => fc_backward(x, require(weights, kind)?, bias.is_some(), grad_out),
        LayerKind::BatchNorm { eps } => bn_backward(x, require(weights, kind)?, *eps, grad_out),
        LayerKind::Relu => elementwise(&|v| v > 0.0),
        LayerKind::Relu6 => elementwise(&|v| v > 0.0 && v < RELU6_CAP),
        LayerKind::AvgPool(p) => pool_backward(x, *p, grad_out),
        LayerKind::Softmax => {
            let (s, k) = softmax_rows(x)?;
            if !s.same_shape(grad_out) {
                return Err(Error::shape("softmax grad_out shape"));
            }
            let mut gx = s.clone();
            for (row, (srow, grow)) in gx
                .data_mut()
                .chunks_mut(k)
                .zip(s.data().chunks(k).zip(grad_out.data().chunks(k)))
            {
                let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                for ((o, &sv), &gv) in row.iter_mut().zip(srow).zip(grow) {
                    *o = sv * (gv - dot);
                }
            }
            Ok(Grads {
                inputs: vec![gx],
                weights: None,
                bias: None,
            })
        }
        LayerKind::Add => {
            if !x.same_shape(grad_out) || !inputs[1].same_shape(grad_out) {
                return Err(Error::shape("add grad_out shape"));
            }
            Ok(Grads {
                inputs: vec![grad_out.clone(), grad_out.clone()],
                weights: None,
                bias: None,
            })
        }
    }
}
