//! IEEE-754 single-precision bit addressing and exponent-bit loss gradients.
//!
//! Bits are numbered big-endian: index 0 is the sign, 1..=8 the exponent from
//! most to least significant, and 9..=31 the mantissa. Index `k` therefore
//! selects the bit of weight `2^(31 - k)` in the value's `u32` pattern,
//! independent of host byte order.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIGN_BIT: u8 = 0;
pub const EXPONENT_MSB: u8 = 1;
pub const EXPONENT_LSB: u8 = 8;
pub const LAST_BIT: u8 = 31;

/// Which parameter tensor of a layer an address points into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Weight,
    Bias,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Weight => "weight",
            Role::Bias => "bias",
        })
    }
}

/// Location of one bit of one parameter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BitAddress {
    pub layer: String,
    pub role: Role,
    pub offset: usize,
    pub bit: u8,
}

#[inline]
fn mask(bit: u8) -> u32 {
    1u32 << (31 - bit as u32)
}

fn check_bit(bit: u8) -> Result<()> {
    if bit > LAST_BIT {
        return Err(Error::arg(format!("bit index {bit} outside 0..=31")));
    }
    Ok(())
}

/// Reads bit `bit` of `value`'s pattern.
pub fn get_bit(value: f32, bit: u8) -> Result<u8> {
    check_bit(bit)?;
    Ok(get_bit_unchecked(value, bit))
}

/// Returns `value` with bit `bit` of its pattern inverted.
pub fn flip_bit(value: f32, bit: u8) -> Result<f32> {
    check_bit(bit)?;
    Ok(flip_bit_unchecked(value, bit))
}

#[inline]
pub(crate) fn get_bit_unchecked(value: f32, bit: u8) -> u8 {
    ((value.to_bits() & mask(bit)) != 0) as u8
}

#[inline]
pub(crate) fn flip_bit_unchecked(value: f32, bit: u8) -> f32 {
    f32::from_bits(value.to_bits() ^ mask(bit))
}

/// `dL/db_i = dL/dw * ln(2) * 2^(8-i) * w` for exponent bit `i` in 1..=8.
///
/// Bit `i` carries weight `2^(8-i)` inside the exponent field, so the MSB
/// (`i = 1`) gets the coefficient `ln(2) * 2^7`.
///
/// Computed in f64. Denormal inputs still get the formula applied; it is a
/// ranking heuristic there, not an exact derivative.
pub fn exponent_bit_gradient(w: f32, dldw: f32, i: u8) -> Result<f64> {
    if !(EXPONENT_MSB..=EXPONENT_LSB).contains(&i) {
        return Err(Error::arg(format!("exponent bit index {i} outside 1..=8")));
    }
    Ok(exponent_bit_gradient_unchecked(w, dldw, i))
}

#[inline]
pub(crate) fn exponent_bit_gradient_unchecked(w: f32, dldw: f32, i: u8) -> f64 {
    let coeff = LN_2 * f64::from(1u32 << (8 - i as u32));
    dldw as f64 * coeff * w as f64
}

/// `|w * dL/dw|`, the MSB gradient with the positive constant `ln(2) * 2^7` dropped.
#[inline]
pub fn impact_score(w: f32, dldw: f32) -> f64 {
    (w as f64 * dldw as f64).abs()
}

/// Whether flipping a bit currently holding `bit_value` raises the loss to first order:
/// a 0 bit when `w * dL/dw > 0`, or a 1 bit when `w * dL/dw < 0`.
#[inline]
pub fn eligible_direction(bit_value: u8, w: f32, dldw: f32) -> bool {
    let product = w as f64 * dldw as f64;
    if !product.is_finite() {
        return false;
    }
    match bit_value {
        0 => product > 0.0,
        _ => product < 0.0,
    }
}

/// Maps a score to its ranking key: non-finite scores sort below every finite one.
#[inline]
pub fn rank_key(score: f64) -> f64 {
    if score.is_finite() {
        score
    } else {
        f64::NEG_INFINITY
    }
}

/// Inclusive value range of one layer's pristine weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRange {
    pub min: f32,
    pub max: f32,
}

impl LayerRange {
    #[inline]
    pub fn contains(&self, value: f32) -> bool {
        // NaN fails both comparisons; infinities fail against finite bounds.
        self.min <= value && value <= self.max
    }
}

/// Per-layer weight ranges captured from the pristine model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RangeConstraint {
    ranges: BTreeMap<String, LayerRange>,
}

impl RangeConstraint {
    /// Builds a constraint from `(layer name, weight values)` pairs.
    pub fn from_layers<'a, I>(layers: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [f32])>,
    {
        let mut ranges = BTreeMap::new();
        for (name, values) in layers {
            let mut min = f32::INFINITY;
            let mut max = f32::NEG_INFINITY;
            for &v in values {
                if v.is_nan() {
                    return Err(Error::arg(format!("layer `{name}` has a NaN weight; not a pristine model")));
                }
                min = min.min(v);
                max = max.max(v);
            }
            if values.is_empty() {
                return Err(Error::arg(format!("layer `{name}` has no weights")));
            }
            ranges.insert(name.to_string(), LayerRange { min, max });
        }
        Ok(Self { ranges })
    }

    pub fn get(&self, layer: &str) -> Option<LayerRange> {
        self.ranges.get(layer).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, LayerRange)> {
        self.ranges.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// True iff `value` lies in `layer`'s pristine `[min, max]`.
pub fn within_range(value: f32, constraint: &RangeConstraint, layer: &str) -> Result<bool> {
    constraint
        .get(layer)
        .map(|r| r.contains(value))
        .ok_or_else(|| Error::arg(format!("no range recorded for layer `{layer}`")))
}

/// One committed bit flip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub address: BitAddress,
    #[serde(with = "hex_f32")]
    pub old_value: f32,
    #[serde(with = "hex_f32")]
    pub new_value: f32,
    /// Selection score: the signed exponent-bit gradient for gradient attacks,
    /// the probed batch loss for exhaustive search, 0 for random flips.
    #[serde(with = "lenient_f64")]
    pub predicted_score: f64,
    pub bit_before: u8,
    /// `dL/dw` seen at selection time, NaN when the attack used no gradient.
    #[serde(with = "lenient_f32")]
    pub grad: f32,
}

impl FlipRecord {
    pub fn new(address: BitAddress, old_value: f32, predicted_score: f64, grad: f32) -> Self {
        let bit_before = get_bit_unchecked(old_value, address.bit);
        let new_value = flip_bit_unchecked(old_value, address.bit);
        Self {
            address,
            old_value,
            new_value,
            predicted_score,
            bit_before,
            grad,
        }
    }

    /// Re-evaluates the flip-direction rule with the values stored in the record.
    pub fn direction_holds(&self) -> bool {
        eligible_direction(self.bit_before, self.old_value, self.grad)
    }
}

/// Formats a value's raw pattern as 8 hex digits.
pub fn hex_pattern(value: f32) -> String {
    format!("{:08x}", value.to_bits())
}

pub fn parse_hex_pattern(s: &str) -> Option<f32> {
    let s = s.strip_prefix("0x").unwrap_or(s);
    if s.len() != 8 {
        return None;
    }
    u32::from_str_radix(s, 16).ok().map(f32::from_bits)
}

/// Serializes an f32 as `{ "decimal": ..., "hex": "3f800000" }`; the hex pattern is authoritative.
mod hex_f32 {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        decimal: String,
        hex: String,
    }

    pub fn serialize<S: Serializer>(v: &f32, s: S) -> Result<S::Ok, S::Error> {
        Repr {
            decimal: format!("{v:e}"),
            hex: super::hex_pattern(*v),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f32, D::Error> {
        let r = Repr::deserialize(d)?;
        super::parse_hex_pattern(&r.hex).ok_or_else(|| D::Error::custom(format!("bad hex pattern `{}`", r.hex)))
    }
}

/// Finite values as JSON numbers; NaN and infinities as strings.
mod lenient_f64 {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(|_| D::Error::custom(format!("bad number `{t}`"))),
        }
    }
}

mod lenient_f32 {
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f32, s: S) -> Result<S::Ok, S::Error> {
        super::lenient_f64::serialize(&(*v as f64), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f32, D::Error> {
        super::lenient_f64::deserialize(d).map(|v| v as f32)
    }
}
