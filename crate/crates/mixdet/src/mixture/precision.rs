//! Floating-point precision emulation for the underflow diagnostics.
//!
//! Values are computed in double precision and then rounded into the target
//! format (round-to-nearest-even, subnormals supported), so the diagnostic
//! reproduces the underflow regime deterministically regardless of the
//! precision used for training.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Half,
    Single,
    Double,
}

/// Round a double to the nearest representable value of the selected
/// precision and return it as f64.
pub fn round_to_precision(x: f64, precision: Precision) -> f64 {
    match precision {
        Precision::Half => round_to_half(x),
        Precision::Single => x as f32 as f64,
        Precision::Double => x,
    }
}

/// Round-to-nearest-even into IEEE binary16 (1 sign, 5 exponent, 10
/// mantissa bits, subnormals supported), returned as f64.
pub fn round_to_half(x: f64) -> f64 {
    if x == 0.0 || x.is_nan() {
        return x;
    }
    let sign = x.signum();
    let a = x.abs();
    // Largest finite half is 65504; the RNE overflow boundary is 65520.
    if a >= 65520.0 {
        return sign * f64::INFINITY;
    }
    let exp = ((a.to_bits() >> 52) & 0x7ff) as i64 - 1023;
    let quantum = if exp >= -14 {
        // Normal range: 10 mantissa bits below the leading one.
        (2.0f64).powi((exp - 10) as i32)
    } else {
        // Subnormal range: fixed grid of 2^-24.
        (2.0f64).powi(-24)
    };
    sign * round_half_to_even(a / quantum) * quantum
}

fn round_half_to_even(y: f64) -> f64 {
    let floor = y.floor();
    let frac = y - floor;
    if frac > 0.5 {
        floor + 1.0
    } else if frac < 0.5 {
        floor
    } else if (floor as u64) % 2 == 0 {
        floor
    } else {
        floor + 1.0
    }
}
