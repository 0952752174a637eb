//! The thirteen abdominal target organs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};

pub const NUM_ORGANS: usize = 13;

const NAMES: [&str; NUM_ORGANS] = [
    "spleen",
    "right kidney",
    "left kidney",
    "gall bladder",
    "esophagus",
    "liver",
    "stomach",
    "aorta",
    "inferior vena cava",
    "portal splenic vein",
    "pancreas",
    "right adrenal gland",
    "left adrenal gland",
];

/// Short column headers in organ order.
pub const SHORT_NAMES: [&str; NUM_ORGANS] = [
    "Spleen", "RKid", "LKid", "Gall", "Eso", "Liver", "Stomach", "Aorta", "IVC", "PSV", "Pancreas", "RAD", "LAD",
];

/// Organ label in `1..=13`; 0 is background and never an organ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct OrganId(u8);

impl OrganId {
    pub fn new(id: u8) -> Result<Self> {
        if (1..=NUM_ORGANS as u8).contains(&id) {
            Ok(Self(id))
        } else {
            Err(SegError::InvalidOrgan(id))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based position in organ order.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn name(self) -> &'static str {
        NAMES[self.index()]
    }

    pub fn short_name(self) -> &'static str {
        SHORT_NAMES[self.index()]
    }

    pub fn from_name(name: &str) -> Option<Self> {
        NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .map(|i| Self(i as u8 + 1))
    }

    /// All organs in label order.
    pub fn all() -> impl Iterator<Item = OrganId> {
        (1..=NUM_ORGANS as u8).map(OrganId)
    }
}

impl TryFrom<u8> for OrganId {
    type Error = SegError;

    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<OrganId> for u8 {
    fn from(o: OrganId) -> u8 {
        o.0
    }
}

impl fmt::Display for OrganId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.0, self.name())
    }
}
