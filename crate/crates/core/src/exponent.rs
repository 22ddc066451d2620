//! Exponents that remember an exact rational value when one is known.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Tolerance for comparing exponents without exact values.
pub const EXPONENT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct Exponent {
    value: f64,
    exact: Option<(i64, i64)>,
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl Exponent {
    pub fn rational(num: i64, den: i64) -> Result<Self> {
        if den == 0 {
            return Err(Error::Domain("zero denominator".into()));
        }
        let g = gcd(num, den).max(1) * den.signum();
        let (p, q) = (num / g, den / g);
        Ok(Exponent { value: p as f64 / q as f64, exact: Some((p, q)) })
    }

    /// Wraps a float, recovering a small-denominator rational when the float is one.
    pub fn from_f64(x: f64) -> Self {
        if x.is_finite() {
            for q in 1..=1000i64 {
                let p = (x * q as f64).round();
                if (p / q as f64 - x).abs() <= 1e-15 * x.abs().max(1.0) && p.abs() < 1e12 {
                    return Exponent::rational(p as i64, q).expect("nonzero denominator");
                }
            }
        }
        Exponent { value: x, exact: None }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn exact(&self) -> Option<(i64, i64)> {
        self.exact
    }

    /// Exact comparison when both sides are rational, otherwise within [`EXPONENT_TOL`].
    pub fn compare(&self, other: &Exponent) -> Ordering {
        match (self.exact, other.exact) {
            (Some((p, q)), Some((r, s))) => ((p as i128) * (s as i128)).cmp(&((r as i128) * (q as i128))),
            _ => {
                let d = self.value - other.value;
                if d.abs() <= EXPONENT_TOL {
                    Ordering::Equal
                } else if d < 0.0 {
                    Ordering::Less
                } else {
                    Ordering::Greater
                }
            }
        }
    }

    pub fn min(self, other: Exponent) -> Exponent {
        if self.compare(&other) == Ordering::Greater {
            other
        } else {
            self
        }
    }

    pub fn scale(&self, num: i64, den: i64) -> Exponent {
        match self.exact {
            Some((p, q)) => Exponent::rational(p * num, q * den).expect("nonzero denominator"),
            None => Exponent { value: self.value * num as f64 / den as f64, exact: None },
        }
    }
}

impl PartialEq for Exponent {
    fn eq(&self, other: &Self) -> bool {
        self.compare(other) == Ordering::Equal
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.exact {
            Some((p, 1)) => write!(f, "{p}"),
            Some((p, q)) => write!(f, "{p}/{q}"),
            None => write!(f, "{}", self.value),
        }
    }
}

impl FromStr for Exponent {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((p, q)) = s.split_once('/') {
            let p: i64 = p.trim().parse().map_err(|_| Error::Domain(format!("bad exponent '{s}'")))?;
            let q: i64 = q.trim().parse().map_err(|_| Error::Domain(format!("bad exponent '{s}'")))?;
            return Exponent::rational(p, q);
        }
        let x: f64 = s.parse().map_err(|_| Error::Domain(format!("bad exponent '{s}'")))?;
        Ok(Exponent::from_f64(x))
    }
}

impl Serialize for Exponent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.exact {
            Some(_) => s.serialize_str(&self.to_string()),
            None => s.serialize_str(&format!("{}", self.value)),
        }
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            S(String),
            N(f64),
        }
        match Raw::deserialize(d)? {
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::N(x) => Ok(Exponent::from_f64(x)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_recovery_and_order() {
        let a = Exponent::from_f64(0.75);
        assert_eq!(a.exact(), Some((3, 4)));
        assert_eq!(a.to_string(), "3/4");
        let two_h = Exponent::from_f64(2.0 * 0.5);
        assert_eq!(two_h.compare(&Exponent::rational(1, 1).unwrap()), Ordering::Equal);
        assert_eq!(Exponent::from_f64(1.5).compare(&Exponent::from_f64(2.0)), Ordering::Less);
        let e: Exponent = serde_json::from_str("\"3/2\"").unwrap();
        assert_eq!(e.value(), 1.5);
        let e: Exponent = serde_json::from_str("0.5").unwrap();
        assert_eq!(serde_json::to_string(&e).unwrap(), "\"1/2\"");
        let irr = Exponent::from_f64(std::f64::consts::PI / 3.0);
        assert!(irr.exact().is_none());
        assert_eq!(irr, Exponent::from_f64(std::f64::consts::PI / 3.0 + 1e-13));
    }
}
