use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const NUM_BEHAVIORS: usize = 3;

/// Interaction type. The discriminant is the row index used by every
/// per-behavior table in the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    View = 0,
    Add = 1,
    Purchase = 2,
}

impl Behavior {
    pub const ALL: [Behavior; NUM_BEHAVIORS] = [Behavior::View, Behavior::Add, Behavior::Purchase];

    /// The behavior evaluated at ranking time.
    pub const TARGET: Behavior = Behavior::Purchase;

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Behavior> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Behavior::View => "view",
            Behavior::Add => "add",
            Behavior::Purchase => "purchase",
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Behavior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "view" => Ok(Behavior::View),
            "add" => Ok(Behavior::Add),
            "purchase" => Ok(Behavior::Purchase),
            _ => Err(Error::Schema { line: 0, label: s.to_string() }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_case_insensitive() {
        assert_eq!("VIEW".parse::<Behavior>().unwrap(), Behavior::View);
        assert_eq!("Purchase".parse::<Behavior>().unwrap(), Behavior::Purchase);
        assert!("like".parse::<Behavior>().is_err());
    }
}
