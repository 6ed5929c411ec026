//! Bit-exact codecs for the weight storage formats an attacker can flip.
//!
//! Every format is handled through a single raw `u32` word whose low
//! `bit_width` bits are meaningful. Bit positions are numbered from the
//! least significant bit (0) to the most significant bit (`bit_width - 1`).
//!
//! Float formats follow IEEE-754 binary semantics: subnormals are decoded
//! faithfully, NaN and infinities are ordinary outputs of `decode`, and
//! `encode` rounds to nearest with ties to even. INT8 is two's complement.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::CodecError;

/// Storage format of a weight word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatKind {
    Bf16,
    Fp16,
    Fp32,
    Int8,
}

/// Sign / exponent / mantissa widths of a binary float format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FieldLayout {
    pub sign: u32,
    pub exponent: u32,
    pub mantissa: u32,
}

impl FieldLayout {
    fn bias(&self) -> i32 {
        (1 << (self.exponent - 1)) - 1
    }

    fn exponent_mask(&self) -> u32 {
        (1 << self.exponent) - 1
    }

    fn mantissa_mask(&self) -> u32 {
        (1 << self.mantissa) - 1
    }
}

/// Describes one numeric encoding. The bit-position set an attacker can
/// choose from is `0..bit_width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FormatSpec {
    pub kind: FormatKind,
    pub bit_width: u32,
    pub layout: Option<FieldLayout>,
}

impl FormatSpec {
    pub const BF16: FormatSpec = FormatSpec {
        kind: FormatKind::Bf16,
        bit_width: 16,
        layout: Some(FieldLayout { sign: 1, exponent: 8, mantissa: 7 }),
    };
    pub const FP16: FormatSpec = FormatSpec {
        kind: FormatKind::Fp16,
        bit_width: 16,
        layout: Some(FieldLayout { sign: 1, exponent: 5, mantissa: 10 }),
    };
    pub const FP32: FormatSpec = FormatSpec {
        kind: FormatKind::Fp32,
        bit_width: 32,
        layout: Some(FieldLayout { sign: 1, exponent: 8, mantissa: 23 }),
    };
    pub const INT8: FormatSpec = FormatSpec { kind: FormatKind::Int8, bit_width: 8, layout: None };

    pub fn of(kind: FormatKind) -> FormatSpec {
        match kind {
            FormatKind::Bf16 => Self::BF16,
            FormatKind::Fp16 => Self::FP16,
            FormatKind::Fp32 => Self::FP32,
            FormatKind::Int8 => Self::INT8,
        }
    }

    /// Short lowercase tag used in manifests and CLI flags.
    pub fn tag(&self) -> &'static str {
        match self.kind {
            FormatKind::Bf16 => "bf16",
            FormatKind::Fp16 => "fp16",
            FormatKind::Fp32 => "fp32",
            FormatKind::Int8 => "int8",
        }
    }

    pub fn from_tag(tag: &str) -> Result<FormatSpec, CodecError> {
        match tag {
            "bf16" => Ok(Self::BF16),
            "fp16" => Ok(Self::FP16),
            "fp32" => Ok(Self::FP32),
            "int8" => Ok(Self::INT8),
            other => Err(CodecError::UnknownFormat(other.to_string())),
        }
    }

    pub fn is_float(&self) -> bool {
        self.layout.is_some()
    }

    pub fn bit_positions(&self) -> Range<u32> {
        0..self.bit_width
    }

    /// Bit position of the sign bit (the MSB for every supported format).
    pub fn sign_bit(&self) -> u32 {
        self.bit_width - 1
    }

    /// Number of bytes one word occupies on disk.
    pub fn byte_width(&self) -> usize {
        (self.bit_width / 8) as usize
    }

    fn raw_mask(&self) -> u32 {
        if self.bit_width == 32 {
            u32::MAX
        } else {
            (1u32 << self.bit_width) - 1
        }
    }
}

impl fmt::Display for FormatSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A raw word together with the format it must be read in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BitWord {
    raw: u32,
    format: FormatSpec,
}

impl BitWord {
    /// Builds a word, rejecting raw values with bits above the format width.
    pub fn new(raw: u32, format: FormatSpec) -> Result<BitWord, CodecError> {
        if raw & !format.raw_mask() != 0 {
            return Err(CodecError::RawOutOfWidth { raw, bit_width: format.bit_width });
        }
        Ok(BitWord { raw, format })
    }

    pub fn raw(&self) -> u32 {
        self.raw
    }

    pub fn format(&self) -> FormatSpec {
        self.format
    }

    pub fn flipped(&self, bit_position: u32) -> BitWord {
        debug_assert!(bit_position < self.format.bit_width);
        BitWord { raw: self.raw ^ (1 << bit_position), format: self.format }
    }
}

/// Post-flip value of a word. Non-finite results are kept apart from reals
/// so that range checks cannot accidentally accept them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlipValue {
    Finite(f64),
    PosInf,
    NegInf,
    NaN,
}

impl FlipValue {
    pub fn from_f64(v: f64) -> FlipValue {
        if v.is_nan() {
            FlipValue::NaN
        } else if v == f64::INFINITY {
            FlipValue::PosInf
        } else if v == f64::NEG_INFINITY {
            FlipValue::NegInf
        } else {
            FlipValue::Finite(v)
        }
    }

    pub fn finite(&self) -> Option<f64> {
        match *self {
            FlipValue::Finite(v) => Some(v),
            _ => None,
        }
    }

    /// IEEE view of the value (NaN / ±Inf for the markers).
    pub fn to_f64(&self) -> f64 {
        match *self {
            FlipValue::Finite(v) => v,
            FlipValue::PosInf => f64::INFINITY,
            FlipValue::NegInf => f64::NEG_INFINITY,
            FlipValue::NaN => f64::NAN,
        }
    }
}

/// Result of flipping one bit of a word.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipOutcome {
    pub bit_position: u32,
    pub new_raw: u32,
    pub new_value: FlipValue,
    /// `new_value - old_value` in f64; non-finite when `finite` is false.
    pub delta: f64,
    pub finite: bool,
}

/// Encodes a finite real into `format`, rounding to nearest-even.
pub fn encode(value: f64, format: FormatSpec) -> Result<BitWord, CodecError> {
    if !value.is_finite() {
        return Err(CodecError::NonFinite(value));
    }
    let raw = match format.layout {
        None => {
            if value.fract() != 0.0 || !(-128.0..=127.0).contains(&value) {
                return Err(CodecError::Int8OutOfRange(value));
            }
            (value as i8) as u8 as u32
        }
        Some(layout) => encode_float(value, layout, format)?,
    };
    Ok(BitWord { raw, format })
}

fn encode_float(value: f64, layout: FieldLayout, format: FormatSpec) -> Result<u32, CodecError> {
    let sign = if value.is_sign_negative() { 1u32 << (format.bit_width - 1) } else { 0 };
    let a = value.abs();
    if a == 0.0 {
        return Ok(sign);
    }

    // a = significand * 2^exp2 with a 53-bit normalized significand.
    let bits = a.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (mut significand, mut exp2) = if biased == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), biased - 1075)
    };
    while significand & (1u64 << 52) == 0 {
        significand <<= 1;
        exp2 -= 1;
    }
    let unbiased = exp2 + 52;

    let m = layout.mantissa as i32;
    let bias = layout.bias();
    // Exponent of one unit in the last place of the target format.
    let quantum = unbiased.max(1 - bias) - m;
    let shift = quantum - exp2;
    debug_assert!(shift > 0);
    let n = round_shift_even(significand as u128, shift as u32);

    // Adding the (biased exponent - 1) field to N handles subnormal -> normal
    // and mantissa -> exponent carries in one step.
    let field = (quantum + m + bias - 1) as i64;
    let word = ((field as u128) << layout.mantissa) + n;
    let max_field = layout.exponent_mask() as u128;
    if word >> layout.mantissa >= max_field {
        return Err(CodecError::Overflow { value, format: format.tag() });
    }
    Ok(sign | word as u32)
}

fn round_shift_even(x: u128, shift: u32) -> u128 {
    if shift >= 128 {
        return 0;
    }
    let q = x >> shift;
    let rem = x & ((1u128 << shift) - 1);
    let half = 1u128 << (shift - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Decodes a word to its real value. NaN and ±Inf are returned as-is.
pub fn decode(word: BitWord) -> f64 {
    let raw = word.raw;
    match word.format.layout {
        None => (raw as u8) as i8 as f64,
        Some(layout) => {
            let negative = raw >> (word.format.bit_width - 1) & 1 == 1;
            let exp_field = (raw >> layout.mantissa) & layout.exponent_mask();
            let mant = raw & layout.mantissa_mask();
            let bias = layout.bias();
            let m = layout.mantissa as i32;
            let magnitude = if exp_field == layout.exponent_mask() {
                if mant == 0 {
                    f64::INFINITY
                } else {
                    return f64::NAN;
                }
            } else if exp_field == 0 {
                mant as f64 * pow2(1 - bias - m)
            } else {
                (mant as f64 + pow2(m)) * pow2(exp_field as i32 - bias - m)
            };
            if negative {
                -magnitude
            } else {
                magnitude
            }
        }
    }
}

/// Exact power of two over the range every supported format needs.
fn pow2(e: i32) -> f64 {
    debug_assert!((-1074..=1023).contains(&e));
    if e >= -1022 {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else {
        f64::from_bits(1u64 << (e + 1074))
    }
}

/// Flips `bit_position` and reports the resulting value and change.
pub fn flip_outcome(word: BitWord, bit_position: u32) -> FlipOutcome {
    let old = decode(word);
    let flipped = word.flipped(bit_position);
    let new_value = FlipValue::from_f64(decode(flipped));
    let finite = new_value.finite().is_some();
    FlipOutcome {
        bit_position,
        new_raw: flipped.raw,
        new_value,
        delta: new_value.to_f64() - old,
        finite,
    }
}

/// One outcome per bit position, LSB first. No range filtering.
pub fn enumerate_flips(word: BitWord) -> Vec<FlipOutcome> {
    word.format.bit_positions().map(|b| flip_outcome(word, b)).collect()
}
