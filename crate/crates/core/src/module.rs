//! Descriptors for pipeline modules as tracked by the sentinel.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interface {
    pub name: String,
    pub direction: Direction,
    pub address: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Send,
    Receive,
}

impl Feature {
    pub(crate) fn bit(self) -> u8 {
        match self {
            Feature::Send => 0b01,
            Feature::Receive => 0b10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleState {
    Registered,
    Running,
    Finished,
    Failed,
}

impl ModuleState {
    pub fn code(self) -> u8 {
        match self {
            ModuleState::Registered => 0,
            ModuleState::Running => 1,
            ModuleState::Finished => 2,
            ModuleState::Failed => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ModuleState::Registered,
            1 => ModuleState::Running,
            2 => ModuleState::Finished,
            3 => ModuleState::Failed,
            _ => return None,
        })
    }
}

impl fmt::Display for ModuleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModuleState::Registered => "registered",
            ModuleState::Running => "running",
            ModuleState::Finished => "finished",
            ModuleState::Failed => "failed",
        })
    }
}

impl FromStr for ModuleState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "registered" => Ok(ModuleState::Registered),
            "running" => Ok(ModuleState::Running),
            "finished" => Ok(ModuleState::Finished),
            "failed" => Ok(ModuleState::Failed),
            other => Err(format!("unknown module state `{other}`")),
        }
    }
}

/// One row of the sentinel's module table. An empty feature set means the
/// module neither sends nor receives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleDescriptor {
    pub id: u32,
    pub name: String,
    pub interfaces: Vec<Interface>,
    pub features: BTreeSet<Feature>,
    pub status: ModuleState,
    pub producers: Vec<u32>,
    pub consumers: Vec<u32>,
}

impl ModuleDescriptor {
    /// A descriptor awaiting an id from the sentinel.
    pub fn unregistered(name: impl Into<String>, features: &[Feature]) -> Self {
        ModuleDescriptor {
            id: 0,
            name: name.into(),
            interfaces: Vec::new(),
            features: features.iter().copied().collect(),
            status: ModuleState::Registered,
            producers: Vec::new(),
            consumers: Vec::new(),
        }
    }

    pub fn with_interface(mut self, name: &str, direction: Direction, address: &str) -> Self {
        self.interfaces.push(Interface {
            name: name.to_owned(),
            direction,
            address: address.to_owned(),
        });
        self
    }

    pub fn has_feature(&self, f: Feature) -> bool {
        self.features.contains(&f)
    }

    pub fn input_address(&self) -> Option<&str> {
        self.interfaces
            .iter()
            .find(|i| i.direction == Direction::In && !i.address.is_empty())
            .map(|i| i.address.as_str())
    }
}
