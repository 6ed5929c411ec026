//! Per-sample dense primitives and their adjoints. All buffers are f64,
//! matrices row-major `[out, in]`.

pub(crate) const LN_EPS: f64 = 1e-5;

/// y = W x (+ b)
pub(crate) fn linear(w: &[f64], b: Option<&[f64]>, x: &[f64], out: usize) -> Vec<f64> {
    let inp = x.len();
    debug_assert_eq!(w.len(), out * inp);
    (0..out)
        .map(|o| {
            let row = &w[o * inp..(o + 1) * inp];
            let acc: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            acc + b.map_or(0.0, |b| b[o])
        })
        .collect()
}

/// Accumulates dW += dy x^T, db += dy and returns dx = W^T dy.
pub(crate) fn linear_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Vec<f64> {
    let inp = x.len();
    let mut dx = vec![0.0; inp];
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[o * inp..(o + 1) * inp];
        let drow = &mut dw[o * inp..(o + 1) * inp];
        for i in 0..inp {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
    if let Some(db) = db {
        for (d, g) in db.iter_mut().zip(dy) {
            *d += g;
        }
    }
    dx
}

pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
}

pub(crate) fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, NormCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat.iter().zip(gain).zip(bias).map(|((h, g), b)| h * g + b).collect();
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    cache: &NormCache,
    gain: &[f64],
    dy: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() as f64;
    let mut dxhat = vec![0.0; dy.len()];
    for i in 0..dy.len() {
        dgain[i] += dy[i] * cache.xhat[i];
        dbias[i] += dy[i];
        dxhat[i] = dy[i] * gain[i];
    }
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(&cache.xhat).map(|(d, h)| d * h).sum::<f64>() / n;
    dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(d, h)| cache.inv_std * (d - mean_d - h * mean_dx))
        .collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

/// tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy over the first `classes` logits, returning the loss and
/// the gradient w.r.t. all logits (zero outside the restricted range).
pub(crate) fn cross_entropy(logits: &[f64], classes: usize, label: usize) -> (f64, Vec<f64>) {
    let p = softmax(&logits[..classes]);
    let loss = -p[label].ln();
    let mut dz = vec![0.0; logits.len()];
    for (i, pi) in p.iter().enumerate() {
        dz[i] = pi - if i == label { 1.0 } else { 0.0 };
    }
    // ln(p) underflows to -inf for confident wrong answers; use the stable form.
    let m = logits[..classes].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits[..classes].iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let stable = lse - logits[label];
    (if loss.is_finite() { loss } else { stable }, dz)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let (loss, dz) = cross_entropy(&[0.0; 4], 4, 2);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert_eq!(dz, vec![0.25, 0.25, -0.75, 0.25]);
        let (loss2, dz2) = cross_entropy(&[0.0, 0.0, 9.0, 9.0], 2, 0);
        assert!((loss2 - 2f64.ln()).abs() < 1e-15);
        assert_eq!(&dz2[2..], &[0.0, 0.0]);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let (loss, _) = cross_entropy(&[0.0, 1e6], 2, 0);
        assert_eq!(loss, 1e6);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let (y, _) = layer_norm(&[1.0, 2.0, 3.0, 6.0], &[1.0; 4], &[0.0; 4]);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
