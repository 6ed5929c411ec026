//! Symmetric per-row absmax INT8 quantization.

use crate::bitcodec::{self, FormatSpec};
use crate::error::{BundleError, Result};

use super::{ModelBundle, Tensor, TensorMeta};

/// Quantizes one row. Returns the integer codes and the row scale
/// (`max_abs / 127`). An all-zero row gets scale 0 and all-zero codes.
pub fn quantize_row(row: &[f64]) -> (Vec<i8>, f64) {
    let max_abs = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return (vec![0; row.len()], 0.0);
    }
    let codes = row
        .iter()
        .map(|&w| (w * 127.0 / max_abs).round_ties_even().clamp(-127.0, 127.0) as i8)
        .collect();
    (codes, max_abs / 127.0)
}

pub fn dequantize_row(code: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        0.0
    } else {
        code * scale
    }
}

/// Replaces every tensor with two or more dimensions by INT8 words with
/// per-row scales. 1D tensors keep their float format.
pub fn quantize_int8(bundle: &ModelBundle) -> Result<ModelBundle> {
    if bundle.is_quantized() {
        return Err(BundleError::AlreadyQuantized);
    }
    let tensors = bundle
        .tensors
        .iter()
        .map(|t| {
            if t.meta.is_1d() {
                return Ok(t.clone());
            }
            let values = t.effective_values();
            let row_len = t.meta.row_len();
            let mut words = Vec::with_capacity(values.len());
            let mut scales = Vec::with_capacity(t.meta.rows());
            for row in values.chunks(row_len) {
                let (codes, scale) = quantize_row(row);
                for c in codes {
                    words.push(bitcodec::encode(c as f64, FormatSpec::INT8)?.raw());
                }
                scales.push(scale);
            }
            Ok(Tensor {
                meta: TensorMeta { format: FormatSpec::INT8, quantized: true, scales, ..t.meta.clone() },
                words,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelBundle::from_tensors(bundle.architecture.clone(), tensors))
}
