//! Signed base-2 log-domain scalars.
//!
//! Amplitudes like `a_n = 2^{-2bn^2}` and the scale widths built from them
//! leave the range of `f64` almost immediately (`2^{-12320}` is a routine
//! value), so they are carried as `sign * 2^{log2_abs}` and only converted
//! back to floating point at the point of use.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Div, Mul, Neg};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Clone, Copy, PartialEq)]
pub struct LogMagnitude {
    log2_abs: f64,
    sign: i8,
}

impl LogMagnitude {
    pub const ZERO: Self = Self {
        log2_abs: f64::NEG_INFINITY,
        sign: 0,
    };
    pub const ONE: Self = Self {
        log2_abs: 0.0,
        sign: 1,
    };

    /// `2^exponent`, positive.
    pub fn pow2(exponent: f64) -> Self {
        if exponent == f64::NEG_INFINITY {
            return Self::ZERO;
        }
        Self {
            log2_abs: exponent,
            sign: 1,
        }
    }

    /// `e^exponent`, positive.
    pub fn exp(exponent: f64) -> Self {
        Self::pow2(exponent / std::f64::consts::LN_2)
    }

    pub fn from_f64(x: f64) -> Self {
        if x == 0.0 {
            Self::ZERO
        } else {
            Self {
                log2_abs: x.abs().log2(),
                sign: if x > 0.0 { 1 } else { -1 },
            }
        }
    }

    pub fn from_parts(sign: i8, log2_abs: f64) -> Self {
        if sign == 0 || log2_abs == f64::NEG_INFINITY {
            Self::ZERO
        } else {
            Self {
                log2_abs,
                sign: sign.signum(),
            }
        }
    }

    pub fn log2_abs(self) -> f64 {
        self.log2_abs
    }

    pub fn ln_abs(self) -> f64 {
        self.log2_abs * std::f64::consts::LN_2
    }

    pub fn log10_abs(self) -> f64 {
        self.log2_abs * std::f64::consts::LOG10_2
    }

    pub fn sign(self) -> i8 {
        self.sign
    }

    pub fn is_zero(self) -> bool {
        self.sign == 0
    }

    pub fn abs(self) -> Self {
        Self {
            log2_abs: self.log2_abs,
            sign: self.sign.abs(),
        }
    }

    /// Nearest `f64`; underflows to `0.0` and overflows to `±inf`.
    pub fn to_f64(self) -> f64 {
        f64::from(self.sign) * self.log2_abs.exp2()
    }

    /// Whether the value survives a round trip through `f64` without
    /// flushing to zero or infinity.
    pub fn fits_f64(self) -> bool {
        self.sign == 0 || (self.log2_abs > -1022.0 && self.log2_abs < 1023.0)
    }

    pub fn recip(self) -> Self {
        assert!(self.sign != 0, "reciprocal of zero LogMagnitude");
        Self {
            log2_abs: -self.log2_abs,
            sign: self.sign,
        }
    }

    pub fn powf(self, p: f64) -> Self {
        assert!(self.sign >= 0, "real power of a negative LogMagnitude");
        if self.sign == 0 {
            return if p == 0.0 { Self::ONE } else { Self::ZERO };
        }
        Self::pow2(self.log2_abs * p)
    }

    pub fn scale(self, x: f64) -> Self {
        self * Self::from_f64(x)
    }

    /// Signed sum, evaluated without leaving the log domain.
    pub fn add(self, other: Self) -> Self {
        if self.sign == 0 {
            return other;
        }
        if other.sign == 0 {
            return self;
        }
        let (big, small) = if self.log2_abs >= other.log2_abs {
            (self, other)
        } else {
            (other, self)
        };
        let ratio = (small.log2_abs - big.log2_abs).exp2();
        if big.sign == small.sign {
            Self::from_parts(big.sign, big.log2_abs + ratio.ln_1p() / std::f64::consts::LN_2)
        } else if ratio >= 1.0 {
            Self::ZERO
        } else {
            Self::from_parts(big.sign, big.log2_abs + (-ratio).ln_1p() / std::f64::consts::LN_2)
        }
    }

    pub fn sub(self, other: Self) -> Self {
        self.add(-other)
    }

    pub fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }

    pub fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
}

impl Default for LogMagnitude {
    fn default() -> Self {
        Self::ZERO
    }
}

impl From<f64> for LogMagnitude {
    fn from(x: f64) -> Self {
        Self::from_f64(x)
    }
}

impl Mul for LogMagnitude {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        if self.sign == 0 || rhs.sign == 0 {
            return Self::ZERO;
        }
        Self {
            log2_abs: self.log2_abs + rhs.log2_abs,
            sign: self.sign * rhs.sign,
        }
    }
}

impl Div for LogMagnitude {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        self * rhs.recip()
    }
}

impl Neg for LogMagnitude {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            log2_abs: self.log2_abs,
            sign: -self.sign,
        }
    }
}

impl PartialOrd for LogMagnitude {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.sign.cmp(&other.sign) {
            Ordering::Equal => match self.sign {
                0 => Some(Ordering::Equal),
                1 => self.log2_abs.partial_cmp(&other.log2_abs),
                _ => other.log2_abs.partial_cmp(&self.log2_abs),
            },
            ord => Some(ord),
        }
    }
}

impl fmt::Debug for LogMagnitude {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.sign {
            0 => write!(f, "0"),
            s => write!(f, "{}2^{}", if s < 0 { "-" } else { "" }, self.log2_abs),
        }
    }
}

impl fmt::Display for LogMagnitude {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.fits_f64() {
            write!(f, "{:e}", self.to_f64())
        } else {
            fmt::Debug::fmt(self, f)
        }
    }
}

// JSON has no -inf, so zero is written with a null exponent.
#[derive(Serialize, Deserialize)]
struct Wire {
    sign: i8,
    log2: Option<f64>,
}

impl Serialize for LogMagnitude {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        Wire {
            sign: self.sign,
            log2: (self.sign != 0).then_some(self.log2_abs),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LogMagnitude {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = Wire::deserialize(d)?;
        Ok(Self::from_parts(w.sign, w.log2.unwrap_or(f64::NEG_INFINITY)))
    }
}
