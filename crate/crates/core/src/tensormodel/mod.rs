//! Layered weight container.
//!
//! A [`ModelBundle`] keeps every weight as a raw storage word so that a bit
//! flip is a literal XOR on memory. All arithmetic (forward pass, range
//! statistics, ImpactScore) happens on *effective* values: the decoded float
//! for float tensors, `int * row_scale` for quantized tensors.

mod io;
mod quant;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bitcodec::{self, BitWord, FlipValue, FormatSpec};
use crate::error::{BundleError, Result};
use crate::impact::WeightRef;
use crate::nnet::Architecture;

pub use io::{load_bundle, save_bundle, MANIFEST_VERSION};
pub use quant::{dequantize_row, quantize_int8, quantize_row};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorMeta {
    pub name: String,
    pub layer_index: usize,
    pub param_kind: String,
    pub shape: Vec<usize>,
    pub format: FormatSpec,
    pub quantized: bool,
    /// Per-row scales of a quantized tensor, empty otherwise.
    pub scales: Vec<f64>,
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn is_1d(&self) -> bool {
        self.shape.len() < 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub meta: TensorMeta,
    /// Raw words, low `format.bit_width` bits significant.
    pub words: Vec<u32>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, flat_index: usize) -> BitWord {
        BitWord::new(self.words[flat_index], self.meta.format).expect("stored word within width")
    }

    pub fn scale_for(&self, flat_index: usize) -> f64 {
        self.meta.scales[flat_index / self.meta.row_len()]
    }

    pub fn effective(&self, flat_index: usize) -> f64 {
        let decoded = bitcodec::decode(self.word(flat_index));
        if self.meta.quantized {
            dequantize_row(decoded, self.scale_for(flat_index))
        } else {
            decoded
        }
    }

    pub fn effective_values(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.effective(i)).collect()
    }
}

/// Min/max of the effective values of one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub w_min: f64,
    pub w_max: f64,
}

impl LayerStats {
    /// Scans finite values only; a tensor with no finite value yields [0, 0].
    pub fn scan(values: impl IntoIterator<Item = f64>) -> LayerStats {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.into_iter().filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            return LayerStats { w_min: 0.0, w_max: 0.0 };
        }
        LayerStats { w_min: lo, w_max: hi }
    }

    pub fn range(&self) -> f64 {
        self.w_max - self.w_min
    }

    /// Inclusive containment; non-finite values are never contained.
    pub fn contains(&self, value: f64) -> bool {
        value.is_finite() && self.w_min <= value && value <= self.w_max
    }
}

/// Whether layer bounds follow the current weights or stay at their
/// load-time values across applied flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangePolicy {
    #[default]
    Live,
    Frozen,
}

/// Restores one word (and the owning tensor's stats) to its prior state.
#[derive(Debug, Clone, Copy, PartialEq)]
#[must_use = "dropping an undo token makes the flip permanent"]
pub struct UndoToken {
    pub weight: WeightRef,
    prior_raw: u32,
    prior_stats: LayerStats,
}

/// Effective-domain view of one single-bit flip of a stored word.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveFlip {
    pub bit_position: u32,
    pub new_raw: u32,
    pub new_value: FlipValue,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub architecture: Architecture,
    pub tensors: Vec<Tensor>,
    gradients: Option<Vec<Vec<f64>>>,
    stats: Vec<LayerStats>,
    range_policy: RangePolicy,
}

impl ModelBundle {
    /// Builds a bundle by encoding float parameters (one vector per tensor in
    /// the architecture's layout order) into `format`.
    pub fn from_params(architecture: Architecture, params: &[Vec<f64>], format: FormatSpec) -> Result<ModelBundle> {
        let layout = architecture.layout();
        if layout.len() != params.len() {
            return Err(BundleError::Architecture(format!(
                "expected {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for (spec, values) in layout.into_iter().zip(params) {
            let numel: usize = spec.shape.iter().product();
            if numel != values.len() {
                return Err(BundleError::Layout {
                    tensor: spec.name,
                    reason: format!("expected {numel} values, got {}", values.len()),
                });
            }
            let words = values
                .iter()
                .map(|&v| bitcodec::encode(v, format).map(|w| w.raw()))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            tensors.push(Tensor {
                meta: TensorMeta {
                    name: spec.name,
                    layer_index: spec.layer_index,
                    param_kind: spec.param_kind,
                    shape: spec.shape,
                    format,
                    quantized: false,
                    scales: Vec::new(),
                },
                words,
            });
        }
        Ok(ModelBundle::from_tensors(architecture, tensors))
    }

    pub(crate) fn from_tensors(architecture: Architecture, tensors: Vec<Tensor>) -> ModelBundle {
        let stats = tensors.iter().map(|t| LayerStats::scan(t.effective_values())).collect();
        ModelBundle { architecture, tensors, gradients: None, stats, range_policy: RangePolicy::Live }
    }

    pub fn is_quantized(&self) -> bool {
        self.tensors.iter().any(|t| t.meta.quantized)
    }

    pub fn num_weights(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensor_index(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.meta.name == name)
    }

    pub fn effective_params(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(Tensor::effective_values).collect()
    }

    fn check(&self, weight: WeightRef) -> Result<&Tensor> {
        self.tensors
            .get(weight.tensor_id)
            .filter(|t| weight.flat_index < t.len())
            .ok_or(BundleError::OutOfBounds { tensor_id: weight.tensor_id, flat_index: weight.flat_index })
    }

    pub fn effective_value(&self, weight: WeightRef) -> Result<f64> {
        Ok(self.check(weight)?.effective(weight.flat_index))
    }

    pub fn word(&self, weight: WeightRef) -> Result<BitWord> {
        Ok(self.check(weight)?.word(weight.flat_index))
    }

    /// Every single-bit flip of the addressed word, with value and delta in
    /// the effective domain.
    pub fn effective_flips(&self, weight: WeightRef) -> Result<Vec<EffectiveFlip>> {
        let tensor = self.check(weight)?;
        let word = tensor.word(weight.flat_index);
        let old = tensor.effective(weight.flat_index);
        let scale = tensor.meta.quantized.then(|| tensor.scale_for(weight.flat_index));
        Ok(bitcodec::enumerate_flips(word)
            .into_iter()
            .map(|o| {
                let new_value = match (scale, o.new_value) {
                    (Some(s), FlipValue::Finite(q)) => FlipValue::Finite(dequantize_row(q, s)),
                    (_, v) => v,
                };
                // Delta is taken between the two effective values actually
                // stored, so |delta| never exceeds the layer range after rounding.
                EffectiveFlip {
                    bit_position: o.bit_position,
                    new_raw: o.new_raw,
                    new_value,
                    delta: new_value.to_f64() - old,
                }
            })
            .collect())
    }

    pub fn stats(&self) -> &[LayerStats] {
        &self.stats
    }

    pub fn layer_stats(&self, tensor_id: usize) -> LayerStats {
        self.stats[tensor_id]
    }

    pub fn fresh_stats(&self, tensor_id: usize) -> LayerStats {
        LayerStats::scan(self.tensors[tensor_id].effective_values())
    }

    pub fn range_policy(&self) -> RangePolicy {
        self.range_policy
    }

    pub fn set_range_policy(&mut self, policy: RangePolicy) {
        self.range_policy = policy;
        if policy == RangePolicy::Live {
            self.stats = (0..self.tensors.len()).map(|i| self.fresh_stats(i)).collect();
        }
    }

    pub fn gradients(&self) -> Option<&[Vec<f64>]> {
        self.gradients.as_deref()
    }

    pub fn gradient(&self, weight: WeightRef) -> Option<f64> {
        self.gradients.as_ref().map(|g| g[weight.tensor_id][weight.flat_index])
    }

    pub fn set_gradients(&mut self, gradients: Vec<Vec<f64>>) -> Result<()> {
        if gradients.len() != self.tensors.len() {
            return Err(BundleError::Architecture(format!(
                "gradient set has {} tensors, bundle has {}",
                gradients.len(),
                self.tensors.len()
            )));
        }
        for (t, g) in self.tensors.iter().zip(&gradients) {
            if t.len() != g.len() {
                return Err(BundleError::Layout {
                    tensor: t.meta.name.clone(),
                    reason: format!("gradient has {} elements, tensor has {}", g.len(), t.len()),
                });
            }
        }
        self.gradients = Some(gradients);
        Ok(())
    }

    pub fn clear_gradients(&mut self) {
        self.gradients = None;
    }

    /// XORs one bit of the addressed word. Non-sneaky flips are allowed.
    pub fn apply_flip(&mut self, weight: WeightRef, bit_position: u32) -> Result<UndoToken> {
        let tensor = self.check(weight)?;
        let width = tensor.meta.format.bit_width;
        if bit_position >= width {
            return Err(BundleError::Layout {
                tensor: tensor.meta.name.clone(),
                reason: format!("bit {bit_position} outside {width}-bit word"),
            });
        }
        let token = UndoToken {
            weight,
            prior_raw: tensor.words[weight.flat_index],
            prior_stats: self.stats[weight.tensor_id],
        };
        self.tensors[weight.tensor_id].words[weight.flat_index] ^= 1 << bit_position;
        if self.range_policy == RangePolicy::Live {
            self.stats[weight.tensor_id] = self.fresh_stats(weight.tensor_id);
        }
        Ok(token)
    }

    pub fn undo(&mut self, token: UndoToken) {
        let UndoToken { weight, prior_raw, prior_stats } = token;
        self.tensors[weight.tensor_id].words[weight.flat_index] = prior_raw;
        self.stats[weight.tensor_id] = prior_stats;
    }

    /// First tensor (in manifest order) holding a non-finite effective value.
    pub fn first_non_finite_tensor(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|t| (0..t.len()).any(|i| !t.effective(i).is_finite()))
            .map(|t| t.meta.name.as_str())
    }

    /// Raw words equal, ignoring gradients and cached statistics.
    pub fn same_weights(&self, other: &ModelBundle) -> bool {
        self.tensors == other.tensors
    }

    /// SHA-256 of the serialized weight blob, hex encoded.
    pub fn checksum(&self) -> String {
        io::blob_checksum(&io::encode_blob(self).0)
    }
}

/// Which tensors an attack may flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Float,
    Int8,
    Mixed,
}

impl AttackMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackMode::Float => "float",
            AttackMode::Int8 => "int8",
            AttackMode::Mixed => "mixed",
        }
    }

    /// Tensor ids targeted by this mode, in manifest order.
    pub fn target_tensors(&self, bundle: &ModelBundle) -> Result<Vec<usize>> {
        let quantized = bundle.is_quantized();
        let err = |reason: &str| BundleError::Mode { mode: self.as_str().into(), reason: reason.into() };
        let keep: Box<dyn Fn(&Tensor) -> bool> = match self {
            AttackMode::Float if quantized => return Err(err("bundle is quantized; use int8 or mixed")),
            AttackMode::Float => Box::new(|_| true),
            AttackMode::Int8 | AttackMode::Mixed if !quantized => {
                return Err(err("bundle has no quantized tensors; use float"))
            }
            AttackMode::Int8 => Box::new(|t| t.meta.quantized),
            AttackMode::Mixed => Box::new(|_| true),
        };
        Ok(bundle.tensors.iter().enumerate().filter(|(_, t)| keep(t)).map(|(i, _)| i).collect())
    }
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "float" => Ok(AttackMode::Float),
            "int8" => Ok(AttackMode::Int8),
            "mixed" => Ok(AttackMode::Mixed),
            other => Err(format!("unknown attack mode `{other}` (expected float, int8 or mixed)")),
        }
    }
}

/// Tensor-name exclusion list. Patterns are shell globs matched against the
/// full tensor name; a pattern without wildcards is an exact match.
#[derive(Debug, Clone, Default)]
pub struct Exclusions {
    patterns: Vec<glob::Pattern>,
}

impl Exclusions {
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Exclusions> {
        let patterns = patterns
            .iter()
            .map(|p| {
                glob::Pattern::new(p.as_ref())
                    .map_err(|e| BundleError::Pattern { pattern: p.as_ref().into(), reason: e.to_string() })
            })
            .collect::<Result<_>>()?;
        Ok(Exclusions { patterns })
    }

    pub fn excludes(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| p.matches(name))
    }
}

/// Tensor ids an attack visits: the mode filter minus exclusions.
pub fn targets(bundle: &ModelBundle, mode: AttackMode, exclusions: &Exclusions) -> Result<Vec<usize>> {
    Ok(mode
        .target_tensors(bundle)?
        .into_iter()
        .filter(|&i| !exclusions.excludes(&bundle.tensors[i].meta.name))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::Architecture;

    pub(crate) fn linear_bundle(format: FormatSpec) -> ModelBundle {
        let arch = Architecture::Linear { input_dim: 2, num_classes: 2 };
        let params = vec![vec![0.5, -1.0, 0.25, 0.75], vec![0.125, -0.0625]];
        ModelBundle::from_params(arch, &params, format).unwrap()
    }

    #[test]
    fn effective_value_of_float_word() {
        let b = linear_bundle(FormatSpec::BF16);
        assert_eq!(b.tensors[0].words[0], 0x3F00);
        assert_eq!(b.effective_value(WeightRef::new(0, 0)).unwrap(), 0.5);
        assert!(matches!(b.effective_value(WeightRef::new(0, 4)), Err(BundleError::OutOfBounds { .. })));
        assert!(b.effective_value(WeightRef::new(7, 0)).is_err());
    }

    #[test]
    fn stats_track_flips_and_undo_restores() {
        let mut b = linear_bundle(FormatSpec::FP16);
        let before = b.clone();
        assert_eq!(b.layer_stats(0), LayerStats { w_min: -1.0, w_max: 0.75 });
        let tok = b.apply_flip(WeightRef::new(0, 1), 15).unwrap();
        assert_eq!(b.effective_value(WeightRef::new(0, 1)).unwrap(), 1.0);
        assert_eq!(b.layer_stats(0), LayerStats { w_min: 0.25, w_max: 1.0 });
        b.undo(tok);
        assert_eq!(b, before);
    }

    #[test]
    fn frozen_range_keeps_bounds() {
        let mut b = linear_bundle(FormatSpec::FP16);
        b.set_range_policy(RangePolicy::Frozen);
        let _ = b.apply_flip(WeightRef::new(0, 1), 15).unwrap();
        assert_eq!(b.layer_stats(0), LayerStats { w_min: -1.0, w_max: 0.75 });
    }

    #[test]
    fn sign_flip_on_half_negates() {
        let mut b = linear_bundle(FormatSpec::FP16);
        let _ = b.apply_flip(WeightRef::new(0, 0), 15).unwrap();
        assert_eq!(b.effective_value(WeightRef::new(0, 0)).unwrap(), -0.5);
    }

    #[test]
    fn mode_filters() {
        let b = linear_bundle(FormatSpec::BF16);
        assert_eq!(AttackMode::Float.target_tensors(&b).unwrap(), vec![0, 1]);
        assert!(AttackMode::Int8.target_tensors(&b).is_err());
        let q = quantize_int8(&b).unwrap();
        assert_eq!(AttackMode::Int8.target_tensors(&q).unwrap(), vec![0]);
        assert_eq!(AttackMode::Mixed.target_tensors(&q).unwrap(), vec![0, 1]);
        assert!(AttackMode::Float.target_tensors(&q).is_err());
    }

    #[test]
    fn exclusion_globs() {
        let ex = Exclusions::new(&["layer.1.mlp.down_proj", "head.*"]).unwrap();
        assert!(ex.excludes("layer.1.mlp.down_proj"));
        assert!(!ex.excludes("layer.11.mlp.down_proj"));
        assert!(ex.excludes("head.bias"));
        assert!(Exclusions::new(&["[oops"]).is_err());
    }

    #[test]
    fn gradient_shape_checked() {
        let mut b = linear_bundle(FormatSpec::BF16);
        assert!(b.set_gradients(vec![vec![0.0; 4]]).is_err());
        assert!(b.set_gradients(vec![vec![0.0; 4], vec![0.0; 3]]).is_err());
        b.set_gradients(vec![vec![0.0; 4], vec![0.0; 2]]).unwrap();
        assert_eq!(b.gradient(WeightRef::new(1, 1)), Some(0.0));
    }
}
