//! Quantization mathematics: thresholds, scales, codes, straight-through
//! gradients, bias quantization and calibration.

pub mod calib;
pub mod ops;
pub mod params;
pub mod plan;

pub use calib::{calibrate, CalibStats, Range, WeightStats};
pub use ops::{
    dequantize, fake_quant_bias, fake_quant_forward, quantize_bias, quantize_tensor, ste_backward, SteGrads,
};
pub use params::{ChannelParams, Granularity, Grid, QuantMode, QuantParams, Rounding, Signedness};
pub use plan::{build_params, ActSite, QuantConfig, QuantPlan, QuantScheme};
