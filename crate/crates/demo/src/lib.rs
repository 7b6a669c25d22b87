//! Browser bindings for the bit-level tools: inspect and flip float32 bits,
//! score exponent-bit gradients, and rank user-entered weights the way the
//! gradient-guided attacks do. Every export returns a JSON string.

use expflip::bits::{self, LayerRange, EXPONENT_LSB, EXPONENT_MSB, LAST_BIT};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Inspection {
    value: String,
    hex: String,
    /// Bit string in b0..b31 order (sign first).
    bits: String,
    sign: u8,
    exponent_field: u32,
    mantissa_field: u32,
    class: &'static str,
}

fn class_of(v: f32) -> &'static str {
    match v.classify() {
        std::num::FpCategory::Nan => "nan",
        std::num::FpCategory::Infinite => "infinite",
        std::num::FpCategory::Zero => "zero",
        std::num::FpCategory::Subnormal => "subnormal",
        std::num::FpCategory::Normal => "normal",
    }
}

fn show(v: f32) -> String {
    let a = v.abs();
    if v.is_finite() && a != 0.0 && !(1e-4..1e7).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn inspection(v: f32) -> Inspection {
    let p = v.to_bits();
    Inspection {
        value: show(v),
        hex: bits::hex_pattern(v),
        bits: format!("{p:032b}"),
        sign: (p >> 31) as u8,
        exponent_field: (p >> 23) & 0xFF,
        mantissa_field: p & 0x7F_FFFF,
        class: class_of(v),
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
}

fn error(msg: impl std::fmt::Display) -> String {
    json(&serde_json::json!({ "error": msg.to_string() }))
}

/// Parses a decimal number or an 8-digit hex pattern (`0x3f800000`).
fn parse_value(text: &str) -> Option<f32> {
    let t = text.trim();
    if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        return bits::parse_hex_pattern(h);
    }
    t.parse().ok()
}

/// Field breakdown of a float given as decimal or `0x` hex pattern.
#[wasm_bindgen]
pub fn inspect(text: &str) -> String {
    match parse_value(text) {
        Some(v) => json(&inspection(v)),
        None => error(format!("cannot parse `{text}` as a float or 0x pattern")),
    }
}

/// Flips bit `bit` (0 = sign, 1..8 = exponent, 9..31 = mantissa) and inspects the result.
#[wasm_bindgen]
pub fn flip(text: &str, bit: u8) -> String {
    let Some(v) = parse_value(text) else {
        return error(format!("cannot parse `{text}`"));
    };
    match bits::flip_bit(v, bit) {
        Ok(f) => json(&inspection(f)),
        Err(e) => error(e),
    }
}

#[derive(Serialize)]
struct BitRow {
    bit: u8,
    current: u8,
    flipped_value: String,
    flipped_hex: String,
    /// dL/db for this bit, given the weight and dL/dw.
    bit_gradient: f64,
    eligible: bool,
    in_range: bool,
}

/// Per exponent bit of `weight`: the flipped value, the analytic bit gradient,
/// whether flipping it raises the loss to first order, and whether the result
/// stays inside `[min, max]`.
#[wasm_bindgen]
pub fn exponent_table(weight: f32, grad: f32, min: f32, max: f32) -> String {
    let range = LayerRange { min, max };
    let rows: Vec<BitRow> = (EXPONENT_MSB..=EXPONENT_LSB)
        .map(|i| {
            let current = bits::get_bit(weight, i).unwrap();
            let f = bits::flip_bit(weight, i).unwrap();
            BitRow {
                bit: i,
                current,
                flipped_value: show(f),
                flipped_hex: bits::hex_pattern(f),
                bit_gradient: bits::exponent_bit_gradient(weight, grad, i).unwrap(),
                eligible: bits::eligible_direction(current, weight, grad),
                in_range: range.contains(f),
            }
        })
        .collect();
    json(&rows)
}

#[derive(Serialize)]
struct Ranked {
    index: usize,
    weight: f32,
    grad: f32,
    score: f64,
    msb: u8,
    eligible: bool,
    flipped_value: String,
}

fn parse_list(text: &str) -> Result<Vec<f32>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(s).ok_or_else(|| format!("cannot parse `{s}`")))
        .collect()
}

/// Ranks weights by `|w * dL/dw|` for an exponent-MSB flip, eligible candidates first.
/// `weights` and `grads` are comma or whitespace separated lists of equal length.
#[wasm_bindgen]
pub fn rank_msb(weights: &str, grads: &str) -> String {
    let (w, g) = match (parse_list(weights), parse_list(grads)) {
        (Ok(w), Ok(g)) => (w, g),
        (Err(e), _) | (_, Err(e)) => return error(e),
    };
    if w.len() != g.len() {
        return error(format!("{} weights but {} gradients", w.len(), g.len()));
    }
    let mut rows: Vec<Ranked> = w
        .iter()
        .zip(&g)
        .enumerate()
        .map(|(index, (&weight, &grad))| {
            let msb = bits::get_bit(weight, EXPONENT_MSB).unwrap();
            Ranked {
                index,
                weight,
                grad,
                score: bits::impact_score(weight, grad),
                msb,
                eligible: bits::eligible_direction(msb, weight, grad),
                flipped_value: show(bits::flip_bit(weight, EXPONENT_MSB).unwrap()),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.eligible
            .cmp(&a.eligible)
            .then(bits::rank_key(b.score).total_cmp(&bits::rank_key(a.score)))
            .then(a.index.cmp(&b.index))
    });
    json(&rows)
}

/// Highest valid bit index, for building the bit grid in the page.
#[wasm_bindgen]
pub fn last_bit() -> u8 {
    LAST_BIT
}
