//! Exact money and energy arithmetic.
//!
//! All money values are integer cents (i64) so that accumulated rewards and
//! auction prices are bit-reproducible. Energies are integer watt-hours.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

/// Money in integer cents.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Money(pub i64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn cents(self) -> i64 {
        self.0
    }

    /// Whole currency units (dollars, millions, ...) to cents.
    pub fn from_units(units: f64) -> Money {
        Money((units * 100.0).round() as i64)
    }

    pub fn as_units(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl SubAssign for Money {
    fn sub_assign(&mut self, rhs: Money) {
        self.0 -= rhs.0;
    }
}

impl Neg for Money {
    type Output = Money;
    fn neg(self) -> Money {
        Money(-self.0)
    }
}

impl Mul<i64> for Money {
    type Output = Money;
    fn mul(self, rhs: i64) -> Money {
        Money(self.0 * rhs)
    }
}

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        Money(iter.map(|m| m.0).sum())
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let units = self.0 as f64 / 100.0;
        if self.0 % 100 == 0 {
            write!(f, "{}", self.0 / 100)
        } else {
            write!(f, "{units:.2}")
        }
    }
}

/// Energy in integer watt-hours.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Energy(pub i64);

impl Energy {
    pub const ZERO: Energy = Energy(0);

    pub fn wh(self) -> i64 {
        self.0
    }

    pub fn from_kwh(kwh: f64) -> Energy {
        Energy((kwh * 1000.0).round() as i64)
    }

    pub fn as_kwh(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl Add for Energy {
    type Output = Energy;
    fn add(self, rhs: Energy) -> Energy {
        Energy(self.0 + rhs.0)
    }
}

impl Sub for Energy {
    type Output = Energy;
    fn sub(self, rhs: Energy) -> Energy {
        Energy(self.0 - rhs.0)
    }
}

impl fmt::Display for Energy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 % 1000 == 0 {
            write!(f, "{} kWh", self.0 / 1000)
        } else {
            write!(f, "{:.3} kWh", self.as_kwh())
        }
    }
}

/// Revenue of moving `energy` at `price_per_kwh`. Exact when the energy grid
/// keeps price*energy integral in cents (always true for whole-kWh steps).
pub fn energy_revenue(price_per_kwh: Money, energy: Energy) -> Money {
    let cents = (price_per_kwh.0 as i128 * energy.0 as i128) / 1000;
    debug_assert_eq!((price_per_kwh.0 as i128 * energy.0 as i128) % 1000, 0);
    Money(cents as i64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn revenue_is_exact_for_whole_kwh() {
        // $10/kWh * 1 kWh = $10
        assert_eq!(energy_revenue(Money(1000), Energy(1000)), Money(1000));
        assert_eq!(energy_revenue(Money(500), Energy(2000)), Money(1000));
    }

    #[test]
    fn money_units_round_trip() {
        assert_eq!(Money::from_units(4.0), Money(400));
        assert_eq!(Money(400).as_units(), 4.0);
        assert_eq!(format!("{}", Money(400)), "4");
        assert_eq!(format!("{}", Money(450)), "4.50");
    }
}
