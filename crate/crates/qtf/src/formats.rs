//! ExMy floating-point format descriptors and their representable-value grids.
//!
//! A format has one sign bit, `e` exponent bits, `m` mantissa bits, and an
//! exponent bias. No codes are reserved for NaN or infinity: every code is a
//! finite value and out-of-range inputs saturate. The representable magnitudes
//! are `f * 2^(E - bias)` with `E in [1, 2^e - 1]`, `f in [1, 2 - 2^-m]`
//! (normals) plus the subnormal ray `f in [0, 1 - 2^-m]` at `E = 1` with an
//! implicit leading zero.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Largest `e + m` accepted by [`FpFormat::enumerate_grid`].
pub const MAX_GRID_BITS: u32 = 16;

/// A signed ExMy floating-point format descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FpFormat {
    e: u32,
    m: u32,
    bias: i32,
}

impl FpFormat {
    /// FP4 with 2 exponent bits and 1 mantissa bit; grid {0, ±0.5, ±1 .. ±6}.
    pub const E2M1: FpFormat = FpFormat { e: 2, m: 1, bias: 1 };
    /// FP8 variant favoring precision; max magnitude 480 (no reserved codes).
    pub const E4M3: FpFormat = FpFormat { e: 4, m: 3, bias: 7 };
    /// FP8 variant favoring range. Bias 16 reproduces the conventional E5M2
    /// finite maximum of 57344 because this simulator reserves no codes for
    /// specials; hardware E5M2 reaches the same top by giving its highest
    /// binade to inf/NaN instead.
    pub const E5M2: FpFormat = FpFormat { e: 5, m: 2, bias: 16 };

    pub fn new(e: u32, m: u32, bias: i32) -> Result<Self> {
        if e < 1 {
            return Err(Error::InvalidFormat(format!(
                "need at least one exponent bit, got e={e}"
            )));
        }
        if e > 16 || m > 32 {
            return Err(Error::InvalidFormat(format!(
                "format e{e}m{m} is out of the supported range (e <= 16, m <= 32)"
            )));
        }
        let f = FpFormat { e, m, bias };
        let qmax = f.qmax();
        if !(qmax.is_finite() && qmax > 0.0) {
            return Err(Error::InvalidFormat(format!(
                "bias {bias} puts e{e}m{m} outside the finite range (qmax = {qmax})"
            )));
        }
        Ok(f)
    }

    /// Format with the default bias for the given width, see [`default_bias`].
    pub fn with_default_bias(e: u32, m: u32) -> Result<Self> {
        Self::new(e, m, default_bias(e, m))
    }

    pub fn exponent_bits(&self) -> u32 {
        self.e
    }

    pub fn mantissa_bits(&self) -> u32 {
        self.m
    }

    pub fn bias(&self) -> i32 {
        self.bias
    }

    /// Nominal storage width in bits (sign + exponent + mantissa).
    pub fn bit_width(&self) -> u32 {
        1 + self.e + self.m
    }

    /// Largest representable magnitude: `(2 - 2^-m) * 2^(2^e - bias - 1)`.
    pub fn qmax(&self) -> f64 {
        let top_exp = (1i64 << self.e) - 1 - self.bias as i64;
        (2.0 - exp2i(-(self.m as i64))) * exp2i(top_exp)
    }

    /// Smallest representable magnitude (`qmin` in symmetric terms is
    /// `-qmax`); this is the negation of [`FpFormat::qmax`].
    pub fn qmin(&self) -> f64 {
        -self.qmax()
    }

    /// Smallest positive normal magnitude, `2^(1 - bias)`.
    pub fn min_normal(&self) -> f64 {
        exp2i(1 - self.bias as i64)
    }

    /// Spacing of the subnormal ray, `2^(1 - m - bias)`.
    pub fn subnormal_step(&self) -> f64 {
        exp2i(1 - self.m as i64 - self.bias as i64)
    }

    /// Materialize every representable value at unit scale, sorted ascending.
    pub fn enumerate_grid(&self) -> Result<FpGrid> {
        if self.e + self.m > MAX_GRID_BITS {
            return Err(Error::EnumerationTooLarge { e: self.e, m: self.m });
        }
        let mant_count = 1u32 << self.m;
        let mut pos: Vec<(f64, u32)> = Vec::new();
        // Subnormals: (c / 2^m) * 2^(1 - bias), c = 1 .. 2^m - 1.
        for c in 1..mant_count {
            pos.push((c as f64 * self.subnormal_step(), c));
        }
        // Normals: (1 + c / 2^m) * 2^(E - bias), E = 1 .. 2^e - 1.
        for exp_field in 1..(1i64 << self.e) {
            let binade = exp2i(exp_field - self.bias as i64);
            let step = exp2i(exp_field - self.bias as i64 - self.m as i64);
            for c in 0..mant_count {
                pos.push((binade + c as f64 * step, c));
            }
        }
        let mut values = Vec::with_capacity(2 * pos.len() + 1);
        let mut mant_codes = Vec::with_capacity(2 * pos.len() + 1);
        for &(v, c) in pos.iter().rev() {
            values.push(-v);
            mant_codes.push(c);
        }
        values.push(0.0);
        mant_codes.push(0);
        for &(v, c) in &pos {
            values.push(v);
            mant_codes.push(c);
        }
        debug_assert!(values.windows(2).all(|w| w[0] < w[1]));
        Ok(FpGrid { values, mant_codes })
    }
}

/// Default bias for a named width. IEEE-style `2^(e-1) - 1` except e5m2,
/// which uses 16 so that the no-specials grid tops out at the conventional
/// 57344 rather than one binade higher.
pub fn default_bias(e: u32, m: u32) -> i32 {
    if e == 0 {
        0 // rejected by FpFormat::new; avoids shift underflow during parse
    } else if (e, m) == (5, 2) {
        16
    } else {
        (1i32 << (e - 1)) - 1
    }
}

impl fmt::Display for FpFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.bias == default_bias(self.e, self.m) {
            write!(f, "e{}m{}", self.e, self.m)
        } else {
            write!(f, "e{}m{}b{}", self.e, self.m, self.bias)
        }
    }
}

impl FromStr for FpFormat {
    type Err = Error;

    /// Parse `"e<E>m<M>[b<B>]"`, e.g. `e2m1`, `e4m3`, `e5m2b15`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidFormat(format!("expected e<E>m<M>[b<B>], got {s:?}"));
        let rest = s.strip_prefix('e').ok_or_else(bad)?;
        let m_pos = rest.find('m').ok_or_else(bad)?;
        let e: u32 = rest[..m_pos].parse().map_err(|_| bad())?;
        let rest = &rest[m_pos + 1..];
        let (m_str, bias) = match rest.find('b') {
            Some(b_pos) => {
                let bias: i32 = rest[b_pos + 1..].parse().map_err(|_| bad())?;
                (&rest[..b_pos], Some(bias))
            }
            None => (rest, None),
        };
        let m: u32 = m_str.parse().map_err(|_| bad())?;
        match bias {
            Some(b) => FpFormat::new(e, m, b),
            None => FpFormat::with_default_bias(e, m),
        }
    }
}

/// Exact power of two as f64.
pub(crate) fn exp2i(e: i64) -> f64 {
    f64::powi(2.0, e as i32)
}

/// All representable values of an [`FpFormat`] at unit scale.
///
/// Values are strictly increasing and symmetric about zero; the parallel
/// mantissa-code table drives round-half-even tie-breaking in
/// [`FpGrid::nearest`].
#[derive(Debug, Clone)]
pub struct FpGrid {
    values: Vec<f64>,
    mant_codes: Vec<u32>,
}

impl FpGrid {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        *self.values.last().expect("grid is never empty")
    }

    /// Nearest grid value to `x`. Ties go to the candidate with the even
    /// mantissa code (round-half-even); if both are even, to the one closer
    /// to zero. Inputs beyond the extremes saturate.
    pub fn nearest(&self, x: f64) -> f64 {
        let hi = self.values.partition_point(|&v| v < x);
        if hi == 0 {
            return self.values[0];
        }
        if hi == self.values.len() {
            return self.values[hi - 1];
        }
        let lo = hi - 1;
        let d_lo = x - self.values[lo];
        let d_hi = self.values[hi] - x;
        if d_lo < d_hi {
            self.values[lo]
        } else if d_hi < d_lo {
            self.values[hi]
        } else {
            let lo_even = self.mant_codes[lo] % 2 == 0;
            let hi_even = self.mant_codes[hi] % 2 == 0;
            match (lo_even, hi_even) {
                (true, false) => self.values[lo],
                (false, true) => self.values[hi],
                _ => {
                    if self.values[lo].abs() <= self.values[hi].abs() {
                        self.values[lo]
                    } else {
                        self.values[hi]
                    }
                }
            }
        }
    }
}
