//! Integer-only CNN kernels for the data plane.
//!
//! Affine quantization `real = scale * (q - zero_point)` with per-tensor
//! parameters. Weights are symmetric (zero point 0), activations asymmetric.
//! Requantization uses a 31-bit fixed-point mantissa and a right shift; the
//! only wide arithmetic is one 64-bit product per output.

use thiserror::Error;

use crate::flow::{FeatureMap, QuantizedFeatureVector, FEATURE_COUNT, MAP_CHANNELS};

pub const KERNEL: usize = 3;
/// Largest right shift a multiplier may carry (M >= 2^-62).
pub const MAX_RIGHT_SHIFT: u8 = 31;
const MANTISSA_MIN: i32 = 1 << 30;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("multiplier {0} outside (0, 1]")]
    MultiplierOutOfRange(f64),
    #[error("invalid fixed-point multiplier: mantissa {mantissa}, shift {right_shift}")]
    BadMultiplier { mantissa: i32, right_shift: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    pub const fn new(scale: f64, zero_point: i32) -> Self {
        QuantParams { scale, zero_point }
    }

    pub fn dequantize(&self, q: i32) -> f64 {
        self.scale * (q - self.zero_point) as f64
    }

    /// Nearest representable signed-8 code.
    pub fn quantize_i8(&self, real: f64) -> i8 {
        let q = (real / self.scale).round() + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }

    pub fn quantize_u8(&self, real: f64) -> u8 {
        let q = (real / self.scale).round() + self.zero_point as f64;
        q.clamp(0.0, 255.0) as u8
    }

    pub fn valid_u8(&self) -> bool {
        self.scale.is_finite() && self.scale > 0.0 && (0..=255).contains(&self.zero_point)
    }

    pub fn valid_i8(&self) -> bool {
        self.scale.is_finite() && self.scale > 0.0 && (-128..=127).contains(&self.zero_point)
    }
}

/// Real multiplier `mantissa * 2^-31 * 2^-right_shift`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointMultiplier {
    pub mantissa: i32,
    pub right_shift: u8,
}

impl FixedPointMultiplier {
    pub fn new(mantissa: i32, right_shift: u8) -> Result<Self, QuantError> {
        let m = FixedPointMultiplier { mantissa, right_shift };
        if m.is_valid() {
            Ok(m)
        } else {
            Err(QuantError::BadMultiplier { mantissa, right_shift })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.mantissa >= MANTISSA_MIN && self.right_shift <= MAX_RIGHT_SHIFT
    }

    /// Encodes a real multiplier in (0, 1]. Exactly 1.0 is not representable
    /// and becomes `(2^31 - 1) * 2^-31`.
    pub fn from_real(m: f64) -> Result<Self, QuantError> {
        if !(m > 0.0 && m <= 1.0) {
            return Err(QuantError::MultiplierOutOfRange(m));
        }
        // m = frac * 2^-shift with frac in [0.5, 1)
        let mut shift: i32 = 0;
        let mut frac = m;
        while frac < 0.5 {
            frac *= 2.0;
            shift += 1;
        }
        let mut mantissa = (frac * (1u64 << 31) as f64).round() as i64;
        if mantissa == 1i64 << 31 {
            if shift == 0 {
                mantissa = i32::MAX as i64;
            } else {
                mantissa = MANTISSA_MIN as i64;
                shift -= 1;
            }
        }
        if shift > MAX_RIGHT_SHIFT as i32 {
            return Err(QuantError::MultiplierOutOfRange(m));
        }
        Ok(FixedPointMultiplier {
            mantissa: mantissa as i32,
            right_shift: shift as u8,
        })
    }

    pub fn to_real(&self) -> f64 {
        self.mantissa as f64 / (1u64 << 31) as f64 / (1u64 << self.right_shift) as f64
    }
}

/// `acc * M` rounded to nearest, ties away from zero, in one rounding step
/// over the exact 64-bit product.
pub fn round_fixed(acc: i32, m: FixedPointMultiplier) -> i32 {
    let prod = acc as i64 * m.mantissa as i64;
    let shift = 31 + m.right_shift as u32;
    let half = 1i64 << (shift - 1);
    let q = if prod >= 0 {
        (prod + half) >> shift
    } else {
        -((-prod + half) >> shift)
    };
    q as i32
}

/// 1D convolution, 16 filters, one input channel, kernel 3, stride 1,
/// "same" zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct QConvLayer {
    pub weights: [[i8; KERNEL]; MAP_CHANNELS],
    /// Scale `in_q.scale * w_q.scale`, zero point 0.
    pub bias: [i32; MAP_CHANNELS],
    pub in_q: QuantParams,
    pub w_q: QuantParams,
    pub out_q: QuantParams,
    pub requant: FixedPointMultiplier,
}

impl QConvLayer {
    /// Builds the layer and derives the requantization multiplier from the scales.
    pub fn new(
        weights: [[i8; KERNEL]; MAP_CHANNELS],
        bias: [i32; MAP_CHANNELS],
        in_q: QuantParams,
        w_q: QuantParams,
        out_q: QuantParams,
    ) -> Result<Self, QuantError> {
        let requant = FixedPointMultiplier::from_real(in_q.scale * w_q.scale / out_q.scale)?;
        Ok(QConvLayer {
            weights,
            bias,
            in_q,
            w_q,
            out_q,
            requant,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QLinearExit {
    pub weights: [i8; MAP_CHANNELS],
    pub bias: i32,
    pub in_q: QuantParams,
    pub w_q: QuantParams,
    pub logit_q: QuantParams,
    pub requant: FixedPointMultiplier,
}

impl QLinearExit {
    pub fn new(
        weights: [i8; MAP_CHANNELS],
        bias: i32,
        in_q: QuantParams,
        w_q: QuantParams,
        logit_q: QuantParams,
    ) -> Result<Self, QuantError> {
        let requant = FixedPointMultiplier::from_real(in_q.scale * w_q.scale / logit_q.scale)?;
        Ok(QLinearExit {
            weights,
            bias,
            in_q,
            w_q,
            logit_q,
            requant,
        })
    }
}

/// Switch-exit logit in the signed-8 logit domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QLogit {
    pub q: i8,
    pub qparams: QuantParams,
}

impl QLogit {
    pub fn dequantize(&self) -> f64 {
        self.qparams.dequantize(self.q as i32)
    }
}

pub type ActivationMap = [[u8; FEATURE_COUNT]; MAP_CHANNELS];

pub fn qconv1d_relu(x: &QuantizedFeatureVector, layer: &QConvLayer) -> ActivationMap {
    let in_zp = layer.in_q.zero_point;
    let w_zp = layer.w_q.zero_point;
    let out_zp = layer.out_q.zero_point;
    let centered: [i32; FEATURE_COUNT] = std::array::from_fn(|i| x.0[i] as i32 - in_zp);
    let mut out = [[0u8; FEATURE_COUNT]; MAP_CHANNELS];
    for (c, row) in out.iter_mut().enumerate() {
        let w: [i32; KERNEL] = std::array::from_fn(|k| layer.weights[c][k] as i32 - w_zp);
        for (p, o) in row.iter_mut().enumerate() {
            let mut acc = layer.bias[c];
            for (k, wk) in w.iter().enumerate() {
                // padding cells hold in_zp, i.e. contribute zero after centring
                let pos = p as isize + k as isize - 1;
                if (0..FEATURE_COUNT as isize).contains(&pos) {
                    acc = acc.saturating_add(centered[pos as usize] * wk);
                }
            }
            let v = out_zp.saturating_add(round_fixed(acc, layer.requant));
            *o = v.clamp(out_zp, 255) as u8;
        }
    }
    out
}

/// Signed-8 parameters of the pooled maps given the conv output parameters.
pub fn pooled_params(conv_out_q: &QuantParams) -> QuantParams {
    QuantParams::new(conv_out_q.scale, conv_out_q.zero_point - 128)
}

/// Per-channel maximum, recentred to the signed-8 domain (`q - 128`).
pub fn global_maxpool(maps: &ActivationMap) -> FeatureMap {
    std::array::from_fn(|c| {
        let m = maps[c].iter().copied().max().unwrap_or(0);
        (m as i16 - 128) as i8
    })
}

pub fn qlinear_logit(pooled: &FeatureMap, layer: &QLinearExit) -> QLogit {
    let in_zp = layer.in_q.zero_point;
    let w_zp = layer.w_q.zero_point;
    let mut acc = layer.bias;
    for (x, w) in pooled.iter().zip(layer.weights.iter()) {
        acc = acc.saturating_add((*x as i32 - in_zp) * (*w as i32 - w_zp));
    }
    let q = layer
        .logit_q
        .zero_point
        .saturating_add(round_fixed(acc, layer.requant))
        .clamp(-128, 127);
    QLogit {
        q: q as i8,
        qparams: layer.logit_q,
    }
}

/// Runs the whole switch-side network on one quantized feature vector.
pub fn switch_forward(
    x: &QuantizedFeatureVector,
    conv: &QConvLayer,
    linear: &QLinearExit,
) -> (FeatureMap, QLogit) {
    let pooled = global_maxpool(&qconv1d_relu(x, conv));
    (pooled, qlinear_logit(&pooled, linear))
}

/// Real-valued copy of the switch network, used as the reference for the
/// integer kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatCnn {
    pub conv_w: [[f64; KERNEL]; MAP_CHANNELS],
    pub conv_b: [f64; MAP_CHANNELS],
    pub lin_w: [f64; MAP_CHANNELS],
    pub lin_b: f64,
}

impl FloatCnn {
    pub fn dequantized(conv: &QConvLayer, linear: &QLinearExit) -> Self {
        let acc_scale = conv.in_q.scale * conv.w_q.scale;
        let lin_acc_scale = linear.in_q.scale * linear.w_q.scale;
        FloatCnn {
            conv_w: std::array::from_fn(|c| {
                std::array::from_fn(|k| conv.w_q.dequantize(conv.weights[c][k] as i32))
            }),
            conv_b: std::array::from_fn(|c| conv.bias[c] as f64 * acc_scale),
            lin_w: std::array::from_fn(|i| linear.w_q.dequantize(linear.weights[i] as i32)),
            lin_b: linear.bias as f64 * lin_acc_scale,
        }
    }
}

/// Exact conv -> ReLU -> global max -> linear over reals.
pub fn float_forward(x_real: &[f64; FEATURE_COUNT], w: &FloatCnn) -> (f64, [f64; MAP_CHANNELS]) {
    let pooled: [f64; MAP_CHANNELS] = std::array::from_fn(|c| {
        (0..FEATURE_COUNT)
            .map(|p| {
                let mut acc = w.conv_b[c];
                for k in 0..KERNEL {
                    let pos = p as isize + k as isize - 1;
                    if (0..FEATURE_COUNT as isize).contains(&pos) {
                        acc += x_real[pos as usize] * w.conv_w[c][k];
                    }
                }
                acc.max(0.0)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let logit = w.lin_b + pooled.iter().zip(w.lin_w.iter()).map(|(a, b)| a * b).sum::<f64>();
    (logit, pooled)
}

/// Dequantized input vector as seen by the real-valued network.
pub fn dequantize_input(x: &QuantizedFeatureVector, in_q: &QuantParams) -> [f64; FEATURE_COUNT] {
    std::array::from_fn(|i| in_q.dequantize(x.0[i] as i32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_conv() -> QConvLayer {
        let mut weights = [[0i8; 3]; MAP_CHANNELS];
        weights[0] = [0, 1, 0];
        QConvLayer::new(
            weights,
            [0; MAP_CHANNELS],
            QuantParams::new(1.0 / 127.0, 0),
            QuantParams::new(1.0, 0),
            QuantParams::new(1.0 / 127.0 / FixedPointMultiplier::from_real(1.0).unwrap().to_real(), 3),
        )
        .unwrap()
    }

    #[test]
    fn multiplier_encoding() {
        let half = FixedPointMultiplier::from_real(0.5).unwrap();
        assert_eq!(half, FixedPointMultiplier { mantissa: 1 << 30, right_shift: 0 });
        let quarter = FixedPointMultiplier::from_real(0.25).unwrap();
        assert_eq!(quarter, FixedPointMultiplier { mantissa: 1 << 30, right_shift: 1 });
        let one = FixedPointMultiplier::from_real(1.0).unwrap();
        assert_eq!(one.mantissa, i32::MAX);
        assert!(FixedPointMultiplier::from_real(0.0).is_err());
        assert!(FixedPointMultiplier::from_real(1.5).is_err());
        for m in [0.3, 0.0123, 0.999, 1e-6, 0.75] {
            let f = FixedPointMultiplier::from_real(m).unwrap();
            assert!(f.is_valid());
            assert!((f.to_real() - m).abs() / m < 1e-9, "{m}");
        }
    }

    #[test]
    fn round_fixed_examples() {
        let half = FixedPointMultiplier::from_real(0.5).unwrap();
        assert_eq!(round_fixed(0, half), 0);
        assert_eq!(round_fixed(7, half), 4);
        assert_eq!(round_fixed(-7, half), -4);
        assert_eq!(round_fixed(6, half), 3);
        let quarter = FixedPointMultiplier::from_real(0.25).unwrap();
        assert_eq!(round_fixed(250, quarter), 63);
        assert_eq!(round_fixed(i32::MAX, FixedPointMultiplier::from_real(1.0).unwrap()), i32::MAX - 1);
    }

    #[test]
    fn conv_zero_input_zero_bias() {
        let mut layer = identity_conv();
        layer.weights = [[5, -3, 7]; MAP_CHANNELS];
        layer.in_q.zero_point = 20;
        let x = QuantizedFeatureVector([20; FEATURE_COUNT]);
        let out = qconv1d_relu(&x, &layer);
        assert!(out.iter().flatten().all(|&v| v as i32 == layer.out_q.zero_point));
    }

    #[test]
    fn conv_identity_filter_copies_input() {
        let layer = identity_conv();
        let x = QuantizedFeatureVector(std::array::from_fn(|i| (i * 4) as u8));
        let out = qconv1d_relu(&x, &layer);
        for p in 0..FEATURE_COUNT {
            assert!((out[0][p] as i32 - (x.0[p] as i32 + 3)).abs() <= 1);
        }
        // remaining channels are all-zero filters
        assert!(out[1].iter().all(|&v| v == 3));
    }

    #[test]
    fn maxpool_examples() {
        let maps = [[90u8; FEATURE_COUNT]; MAP_CHANNELS];
        assert_eq!(global_maxpool(&maps), [-38i8; MAP_CHANNELS]);
        let mut maps = [[100u8; FEATURE_COUNT]; MAP_CHANNELS];
        maps[3][17] = 200;
        let pooled = global_maxpool(&maps);
        assert_eq!(pooled[3], 72);
        assert_eq!(pooled[0], -28);
    }

    fn linear(weights: [i8; MAP_CHANNELS], bias: i32, in_q: QuantParams, w_q: QuantParams, logit_q: QuantParams) -> QLinearExit {
        QLinearExit::new(weights, bias, in_q, w_q, logit_q).unwrap()
    }

    #[test]
    fn linear_examples() {
        let in_q = QuantParams::new(0.1, -128);
        let w_q = QuantParams::new(0.1, 0);
        let logit_q = QuantParams::new(0.04, 0);
        let l = linear([9; MAP_CHANNELS], 0, in_q, w_q, logit_q);
        assert_eq!(qlinear_logit(&[-128; MAP_CHANNELS], &l).q, 0);

        // x = 5.0 on channel 0, w = 0.5 -> logit 2.5
        let mut w = [0i8; MAP_CHANNELS];
        w[0] = 5;
        let l = linear(w, 0, in_q, w_q, logit_q);
        let mut pooled = [-128i8; MAP_CHANNELS];
        pooled[0] = -128 + 50;
        let (logit, _) = float_forward_linear(&pooled, &l);
        assert!((logit - 2.5).abs() < 1e-12);
        let q = qlinear_logit(&pooled, &l);
        assert_eq!(q.q, 63);
        assert_eq!(q.q as f64, (2.5f64 / 0.04).round());

        let l = linear([127; MAP_CHANNELS], 1_000_000, in_q, w_q, logit_q);
        assert_eq!(qlinear_logit(&[127; MAP_CHANNELS], &l).q, 127);
    }

    fn float_forward_linear(pooled: &FeatureMap, l: &QLinearExit) -> (f64, ()) {
        let s: f64 = pooled
            .iter()
            .zip(l.weights.iter())
            .map(|(x, w)| l.in_q.dequantize(*x as i32) * l.w_q.dequantize(*w as i32))
            .sum();
        (s + l.bias as f64 * l.in_q.scale * l.w_q.scale, ())
    }

    #[test]
    fn float_forward_hand_computed() {
        // only channel 0 active: w = [1, 2, -1], bias 0.5
        let mut w = FloatCnn {
            conv_w: [[0.0; 3]; MAP_CHANNELS],
            conv_b: [0.0; MAP_CHANNELS],
            lin_w: [0.0; MAP_CHANNELS],
            lin_b: 0.0,
        };
        let zero = [0.0; FEATURE_COUNT];
        assert_eq!(float_forward(&zero, &w), (0.0, [0.0; MAP_CHANNELS]));

        w.conv_w[0] = [1.0, 2.0, -1.0];
        w.conv_b[0] = 0.5;
        w.lin_w[0] = 2.0;
        w.lin_b = -1.0;
        let mut x = [0.0; FEATURE_COUNT];
        x[..5].copy_from_slice(&[1.0, 3.0, 0.0, 2.0, 1.0]);
        // positions: p0 = 0 + 2 - 3 + .5 = -0.5 | p1 = 1 + 6 - 0 + .5 = 7.5
        // p2 = 3 + 0 - 2 + .5 = 1.5 | p3 = 0 + 4 - 1 + .5 = 3.5 | p4 = 2 + 2 + .5 = 4.5
        let (logit, pooled) = float_forward(&x, &w);
        assert_eq!(pooled[0], 7.5);
        assert_eq!(logit, 14.0);
    }
}
