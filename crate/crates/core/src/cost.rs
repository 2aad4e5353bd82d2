use std::cmp::Ordering;
use std::fmt;
use std::ops::Add;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Nonnegative transition cost; `+∞` marks a transition that cannot happen
/// while avoiding the excluded sets. Serialized as a number or `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cost(f64);

impl Cost {
    pub const ZERO: Cost = Cost(0.0);
    pub const INFINITE: Cost = Cost(f64::INFINITY);

    /// Panics on NaN or negative values other than rounding noise.
    pub fn finite(v: f64) -> Self {
        assert!(v.is_finite(), "finite cost expected, got {v}");
        Cost(v)
    }

    pub fn new(v: f64) -> Option<Self> {
        (v == f64::INFINITY || v.is_finite()).then_some(Cost(v))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }

    pub fn min(self, other: Cost) -> Cost {
        if other < self {
            other
        } else {
            self
        }
    }
}

impl Eq for Cost {}

impl PartialOrd for Cost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cost {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, rhs: Cost) -> Cost {
        Cost(self.0 + rhs.0)
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::ZERO, |a, b| a + b)
    }
}

impl From<f64> for Cost {
    fn from(v: f64) -> Self {
        Cost::new(v).unwrap_or_else(|| panic!("invalid cost {v}"))
    }
}

impl fmt::Display for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_finite() {
            write!(f, "{}", self.0)
        } else {
            write!(f, "inf")
        }
    }
}

impl Serialize for Cost {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str("inf")
        }
    }
}

impl<'de> Deserialize<'de> for Cost {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct CostVisitor;
        impl Visitor<'_> for CostVisitor {
            type Value = Cost;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a finite number or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Cost, E> {
                Cost::new(v).ok_or_else(|| E::custom(format!("invalid cost {v}")))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Cost, E> {
                Ok(Cost(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Cost, E> {
                Ok(Cost(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Cost, E> {
                match v {
                    "inf" | "+inf" | "infinity" => Ok(Cost::INFINITE),
                    _ => Err(E::custom(format!("invalid cost {v:?}"))),
                }
            }
        }
        d.deserialize_any(CostVisitor)
    }
}
