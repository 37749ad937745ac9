//! Fixed-point energy quantities.
//!
//! Every protocol value (readings, noise shares, masked values, group sums)
//! is carried as an integer count of micro-kWh. Integer addition is
//! associative, so unmasking, group accumulation and load reconstruction are
//! exact regardless of summation order. Noise is rounded onto the same grid
//! as the readings, which is post-processing of the masked output.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

/// Energy in units of 10⁻⁶ kWh.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MicroKwh(pub i64);

impl MicroKwh {
    pub const ZERO: MicroKwh = MicroKwh(0);
    /// Grid points per kWh.
    pub const PER_KWH: f64 = 1e6;

    /// Rounds a kWh value to the nearest grid point.
    ///
    /// Values that are already on the 6-decimal grid round-trip bit-exactly
    /// through [`MicroKwh::kwh`].
    pub fn from_kwh(kwh: f64) -> Self {
        MicroKwh((kwh * Self::PER_KWH).round() as i64)
    }

    pub fn kwh(self) -> f64 {
        self.0 as f64 / Self::PER_KWH
    }

    pub fn abs(self) -> Self {
        MicroKwh(self.0.abs())
    }

    pub fn max(self, other: Self) -> Self {
        MicroKwh(self.0.max(other.0))
    }

    pub fn min(self, other: Self) -> Self {
        MicroKwh(self.0.min(other.0))
    }

    pub fn is_positive(self) -> bool {
        self.0 > 0
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }
}

impl fmt::Display for MicroKwh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:06}", abs / 1_000_000, abs % 1_000_000)
    }
}

impl Add for MicroKwh {
    type Output = MicroKwh;
    fn add(self, rhs: Self) -> Self {
        MicroKwh(self.0 + rhs.0)
    }
}

impl Sub for MicroKwh {
    type Output = MicroKwh;
    fn sub(self, rhs: Self) -> Self {
        MicroKwh(self.0 - rhs.0)
    }
}

impl Neg for MicroKwh {
    type Output = MicroKwh;
    fn neg(self) -> Self {
        MicroKwh(-self.0)
    }
}

impl AddAssign for MicroKwh {
    fn add_assign(&mut self, rhs: Self) {
        self.0 += rhs.0;
    }
}

impl SubAssign for MicroKwh {
    fn sub_assign(&mut self, rhs: Self) {
        self.0 -= rhs.0;
    }
}

impl Sum for MicroKwh {
    fn sum<I: Iterator<Item = MicroKwh>>(iter: I) -> Self {
        MicroKwh(iter.map(|e| e.0).sum())
    }
}

impl<'a> Sum<&'a MicroKwh> for MicroKwh {
    fn sum<I: Iterator<Item = &'a MicroKwh>>(iter: I) -> Self {
        MicroKwh(iter.map(|e| e.0).sum())
    }
}
