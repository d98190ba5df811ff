//! Property tests for the quantizer.

use fat_core::quant::{
    dequantize, fake_quant_forward, quantize_tensor, ste_backward, Granularity, QuantMode, QuantParams, Rounding,
    Signedness,
};
use fat_core::Tensor;
use proptest::prelude::*;

fn modes() -> impl Strategy<Value = (QuantMode, Signedness)> {
    prop_oneof![
        Just((QuantMode::Symmetric, Signedness::Signed)),
        Just((QuantMode::Symmetric, Signedness::Unsigned)),
        Just((QuantMode::Asymmetric, Signedness::Signed)),
        Just((QuantMode::Asymmetric, Signedness::Unsigned)),
    ]
}

/// Per-tensor params over a random range with random (possibly
/// out-of-range) trainables.
fn params() -> impl Strategy<Value = QuantParams> {
    (
        modes(),
        2u32..=8,
        -5.0..0.0f64,
        0.01..5.0f64,
        0.3..1.2f64,
        -0.3..0.5f64,
        0.3..1.2f64,
    )
        .prop_map(|((mode, sign), bits, lo, hi, a, at, ar)| {
            let lo = if sign == Signedness::Unsigned { 0.0 } else { lo };
            let mut p = QuantParams::from_ranges(bits, sign, mode, Granularity::PerTensor, &[(lo, hi)]).unwrap();
            p.channels[0].alpha = a;
            p.channels[0].alpha_t = at;
            p.channels[0].alpha_r = ar;
            p
        })
}

fn tensor(v: Vec<f64>) -> Tensor {
    Tensor::from_vec(v).unwrap()
}

proptest! {
    #[test]
    fn quantize_is_monotone(p in params(), mut xs in prop::collection::vec(-8.0..8.0f64, 2..64)) {
        xs.sort_by(f64::total_cmp);
        let q = quantize_tensor(&tensor(xs), &p).unwrap();
        prop_assert!(q.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn codes_stay_in_range(p in params(), xs in prop::collection::vec(-1e6..1e6f64, 1..64)) {
        let (lo, hi) = p.code_range();
        let q = quantize_tensor(&tensor(xs), &p).unwrap();
        prop_assert!(q.data().iter().all(|&c| (lo..=hi).contains(&(c as f64))));
    }

    #[test]
    fn zero_is_exact(p in params()) {
        let z = tensor(vec![0.0]);
        prop_assert_eq!(dequantize(&quantize_tensor(&z, &p).unwrap(), &p).unwrap().data()[0], 0.0);
        prop_assert_eq!(fake_quant_forward(&z, &p, Rounding::Nearest).unwrap().data()[0], 0.0);
    }

    #[test]
    fn fake_quant_is_dequantized_quantize(p in params(), xs in prop::collection::vec(-8.0..8.0f64, 1..64)) {
        let x = tensor(xs);
        let fq = fake_quant_forward(&x, &p, Rounding::Nearest).unwrap();
        let dq = dequantize(&quantize_tensor(&x, &p).unwrap(), &p).unwrap();
        prop_assert_eq!(fq, dq);
    }

    #[test]
    fn fake_quant_is_idempotent_on_codes(p in params(), xs in prop::collection::vec(-8.0..8.0f64, 1..64)) {
        let x = tensor(xs);
        let q = quantize_tensor(&x, &p).unwrap();
        let again = quantize_tensor(&dequantize(&q, &p).unwrap(), &p).unwrap();
        prop_assert_eq!(q, again);
    }

    #[test]
    fn error_inside_thresholds_is_half_a_step(p in params(), us in prop::collection::vec(0.0..1.0f64, 1..64)) {
        let g = p.grid(0, Rounding::Nearest);
        let lo = (g.qmin - g.zero_point) / g.scale;
        let hi = (g.qmax - g.zero_point) / g.scale;
        let x = tensor(us.iter().map(|u| lo + u * (hi - lo)).collect());
        let fq = fake_quant_forward(&x, &p, Rounding::Nearest).unwrap();
        for (a, b) in x.data().iter().zip(fq.data()) {
            prop_assert!((a - b).abs() <= 0.5 / g.scale * (1.0 + 1e-9));
        }
    }

    #[test]
    fn clipped_params_are_in_range_and_equivalent(p in params(), xs in prop::collection::vec(-8.0..8.0f64, 1..32)) {
        let c = p.clipped();
        let ch = c.channels[0];
        let (tlo, thi) = c.alpha_t_range();
        prop_assert!((0.5..=1.0).contains(&ch.alpha));
        prop_assert!((0.5..=1.0).contains(&ch.alpha_r));
        prop_assert!((tlo..=thi).contains(&ch.alpha_t));
        let x = tensor(xs);
        prop_assert_eq!(quantize_tensor(&x, &p).unwrap(), quantize_tensor(&x, &c).unwrap());
    }

    /// Input gradient of the surrogate is the pass-through mask.
    #[test]
    fn ste_input_gradient_is_mask(p in params(), xs in prop::collection::vec(-8.0..8.0f64, 1..32)) {
        let x = tensor(xs);
        let ones = Tensor::filled(x.shape().to_vec(), 1.0).unwrap();
        let g = ste_backward(&ones, &x, &p, Rounding::Nearest).unwrap();
        let grid = p.grid(0, Rounding::Nearest);
        for (&v, &gx) in x.data().iter().zip(g.x.data()) {
            let pre = (grid.scale * v).round() + grid.zero_point;
            let inside = pre >= grid.qmin && pre <= grid.qmax;
            prop_assert_eq!(gx, if inside { 1.0 } else { 0.0 });
        }
    }

    /// Per-channel quantization of `W` equals per-tensor quantization of
    /// `W` with each row scaled to a common threshold.
    #[test]
    fn vector_equals_scalar_after_row_scaling(
        rows in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 6), 2..6),
        bits in 4u32..=8,
    ) {
        let c = rows.len();
        let w = Tensor::new(vec![c, 6], rows.concat()).unwrap();
        let t = w.channel_max_abs(0).unwrap();
        prop_assume!(t.iter().all(|&v| v > 1e-3));
        let per_channel = QuantParams::from_ranges(
            bits,
            Signedness::Signed,
            QuantMode::Symmetric,
            Granularity::PerChannel { axis: 0 },
            &w.channel_ranges(0).unwrap(),
        )
        .unwrap();
        let tc = 1.0;
        let mut scaled = w.clone();
        for (k, row) in scaled.data_mut().chunks_mut(6).enumerate() {
            row.iter_mut().for_each(|v| *v *= tc / t[k]);
        }
        let per_tensor = QuantParams::from_ranges(
            bits,
            Signedness::Signed,
            QuantMode::Symmetric,
            Granularity::PerTensor,
            &[(-tc, tc)],
        )
        .unwrap();
        let a = quantize_tensor(&w, &per_channel).unwrap();
        let b = quantize_tensor(&scaled, &per_tensor).unwrap();
        prop_assert_eq!(a, b);
    }
}
