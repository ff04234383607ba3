//! Fake quantization with straight-through gradients, LSB truncation for the
//! narrower analog converters, and batch-norm folding.
//!
//! Weights use a symmetric grid with `2^(n-1) - 1` positive levels scaled by a
//! learned `e^s`; `n = 2` is ternarization. Activations are post-ReLU and use
//! an unsigned `2^n - 1` level grid over a learned range `e^s`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Weights,
    Activations,
}

/// Bit width plus a trainable log-domain scale.
#[derive(Debug, Clone)]
pub struct QuantSpec {
    pub bits: u32,
    pub mode: QuantMode,
    pub log_scale: Tensor,
}

impl QuantSpec {
    pub fn new(bits: u32, mode: QuantMode, log_scale: Float) -> Result<Self> {
        check_bits(mode, bits)?;
        Ok(QuantSpec {
            bits,
            mode,
            log_scale: Tensor::param(&[1], vec![log_scale])?,
        })
    }

    pub fn scale(&self) -> Float {
        self.log_scale.item().exp()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self.mode {
            QuantMode::Weights => fake_quantize_weights(x, self),
            QuantMode::Activations => fake_quantize_activations(x, self.bits, &self.log_scale),
        }
    }
}

fn check_bits(mode: QuantMode, bits: u32) -> Result<()> {
    let ok = match mode {
        QuantMode::Weights => (2..=16).contains(&bits),
        QuantMode::Activations => (1..=16).contains(&bits),
    };
    if ok {
        Ok(())
    } else {
        Err(invalid("quantizer", format!("unsupported {mode:?} bit width {bits}")))
    }
}

/// Positive levels of the symmetric weight grid.
pub fn weight_levels(bits: u32) -> Float {
    ((1u64 << (bits - 1)) - 1) as Float
}

/// Levels of the unsigned activation grid.
pub fn activation_levels(bits: u32) -> Float {
    ((1u64 << bits) - 1) as Float
}

/// Integer weight code in `[-L, L]`. Shared by the fake quantizer and the
/// integer simulator so both round identically.
pub fn weight_code(x: Float, scale: Float, bits: u32) -> Float {
    let l = weight_levels(bits);
    (l * (x / scale).clamp(-1.0, 1.0)).round()
}

/// Unsigned activation code in `[0, 2^n - 1]`.
pub fn activation_code(x: Float, range: Float, bits: u32) -> Float {
    let l = activation_levels(bits);
    (l * (x / range).clamp(0.0, 1.0)).round()
}

/// Chooses an initial weight scale: the max magnitude for multi-bit grids,
/// `1.4 * mean|w|` for ternary so that roughly the smaller half rounds to zero.
pub fn initial_weight_log_scale(w: &[Float], bits: u32) -> Float {
    let scale = if bits <= 2 {
        1.4 * w.iter().map(|v| v.abs()).sum::<Float>() / w.len().max(1) as Float
    } else {
        w.iter().fold(0.0 as Float, |a, v| a.max(v.abs()))
    };
    scale.max(1e-8).ln()
}

/// `Q(x) = e^s / L * round(L * clip(x / e^s, -1, 1))`, `L = 2^(n-1) - 1`.
///
/// Backward: identity for `x` inside the clip range and zero outside; the scale
/// receives `sign(x) * e^s` from clipped entries only.
pub fn fake_quantize_weights(x: &Tensor, q: &QuantSpec) -> Result<Tensor> {
    if q.mode != QuantMode::Weights {
        return Err(invalid("fake_quantize_weights", "spec is not a weight quantizer"));
    }
    check_bits(q.mode, q.bits)?;
    let scale = q.scale();
    let bits = q.bits;
    let step = scale / weight_levels(bits);
    let xv = x.to_vec();
    let out = xv.iter().map(|&v| step * weight_code(v, scale, bits)).collect();
    Ok(Tensor::from_op(
        "fake_quantize_weights",
        x.shape().to_vec(),
        out,
        vec![x.clone(), q.log_scale.clone()],
        Box::new(move |g| {
            let mut gs = 0f64;
            let gx = g
                .iter()
                .zip(&xv)
                .map(|(&gv, &v)| {
                    let r = v / scale;
                    if r > 1.0 {
                        gs += (gv * scale) as f64;
                        0.0
                    } else if r < -1.0 {
                        gs -= (gv * scale) as f64;
                        0.0
                    } else {
                        gv
                    }
                })
                .collect();
            vec![Some(gx), Some(vec![gs as Float])]
        }),
    ))
}

/// Unsigned `Q(x) = r / L * round(L * clip(x / r, 0, 1))`, `r = e^s`, `L = 2^n - 1`.
pub fn fake_quantize_activations(x: &Tensor, bits: u32, log_range: &Tensor) -> Result<Tensor> {
    check_bits(QuantMode::Activations, bits)?;
    let range = log_range.item().exp();
    let step = range / activation_levels(bits);
    let xv = x.to_vec();
    let out = xv.iter().map(|&v| step * activation_code(v, range, bits)).collect();
    Ok(Tensor::from_op(
        "fake_quantize_activations",
        x.shape().to_vec(),
        out,
        vec![x.clone(), log_range.clone()],
        Box::new(move |g| {
            let mut gs = 0f64;
            let gx = g
                .iter()
                .zip(&xv)
                .map(|(&gv, &v)| {
                    if v > range {
                        gs += (gv * range) as f64;
                        0.0
                    } else if v < 0.0 {
                        0.0
                    } else {
                        gv
                    }
                })
                .collect();
            vec![Some(gx), Some(vec![gs as Float])]
        }),
    ))
}

/// Drops the least significant bit of an activation code.
pub fn truncate_lsb_code(code: u32) -> u32 {
    code >> 1
}

/// Re-expresses values on the `storage_bits` grid over `range` with the LSB
/// cleared: code `k` becomes `(k >> 1) << 1`, so the value sits on the grid of
/// a converter one bit narrower spanning the same range. `channels` selects
/// which channels (axis 1) are truncated; `None` truncates everything.
///
/// Gradient is straight-through. Inputs off the grid are rejected.
pub fn truncate_lsb(x: &Tensor, range: Float, storage_bits: u32, channels: Option<&[bool]>) -> Result<Tensor> {
    const OP: &str = "truncate_lsb";
    let step = range / activation_levels(storage_bits);
    let shape = x.shape().to_vec();
    let (n, c) = (shape[0], if shape.len() > 1 { shape[1] } else { 1 });
    let inner = x.numel() / (n * c);
    if let Some(mask) = channels {
        if mask.len() != c {
            return Err(crate::Error::Shape { op: OP, dim: "channels", expected: c, got: mask.len() });
        }
    }
    let xv = x.data();
    let mut out = Vec::with_capacity(xv.len());
    for (i, &v) in xv.iter().enumerate() {
        let ch = (i / inner) % c;
        if channels.is_some_and(|m| !m[ch]) {
            out.push(v);
            continue;
        }
        let k = (v / step).round();
        if (v / step - k).abs() > 1e-3 || k < 0.0 || k > activation_levels(storage_bits) {
            return Err(invalid(OP, format!("value {v} is not on the {storage_bits}-bit grid")));
        }
        let t = truncate_lsb_code(k as u32) << 1;
        out.push(step * t as Float);
    }
    drop(xv);
    Ok(Tensor::from_op(
        OP,
        shape,
        out,
        vec![x.clone()],
        Box::new(|g| vec![Some(g.to_vec())]),
    ))
}

/// Batch-norm statistics and affine parameters for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Vec<Float>,
    pub beta: Vec<Float>,
    pub mean: Vec<Float>,
    pub var: Vec<Float>,
    pub eps: Float,
}

/// Folds BN into the preceding conv/FC: `W' = W * g/sqrt(var+eps)` per output
/// channel, `b' = (b - mean) * g/sqrt(var+eps) + beta`.
pub fn fold_bn(weight: &[Float], bias: &[Float], bn: &BnParams) -> Result<(Vec<Float>, Vec<Float>)> {
    let c = bias.len();
    if [bn.gamma.len(), bn.beta.len(), bn.mean.len(), bn.var.len()].iter().any(|&l| l != c) {
        return Err(invalid("fold_bn", "BN parameter length differs from output channels"));
    }
    if c == 0 || !weight.len().is_multiple_of(c) {
        return Err(invalid("fold_bn", "weight size is not a multiple of output channels"));
    }
    let per = weight.len() / c;
    let mut w = Vec::with_capacity(weight.len());
    let mut b = Vec::with_capacity(c);
    for ch in 0..c {
        let denom = bn.var[ch] as f64 + bn.eps as f64;
        if denom <= 0.0 {
            return Err(invalid("fold_bn", format!("var + eps = {denom} on channel {ch}")));
        }
        let k = bn.gamma[ch] as f64 / denom.sqrt();
        w.extend(weight[ch * per..(ch + 1) * per].iter().map(|&v| (v as f64 * k) as Float));
        b.push(((bias[ch] as f64 - bn.mean[ch] as f64) * k + bn.beta[ch] as f64) as Float);
    }
    Ok((w, b))
}
