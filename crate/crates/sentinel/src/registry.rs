//! The module table and its wiring rules.

use std::collections::BTreeMap;

use evgraph_core::module::{Feature, ModuleDescriptor, ModuleState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("no module with id {0}")]
    UnknownModule(u32),
    #[error("module {module} lacks the `{needed:?}` feature")]
    FeatureMismatch { module: u32, needed: Feature },
    #[error("module {0} has no input interface with an address")]
    NoInputInterface(u32),
    #[error("malformed descriptor: {0}")]
    MalformedDescriptor(String),
}

impl RegistryError {
    /// Stable name used in API error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::UnknownModule(_) => "UnknownModule",
            RegistryError::FeatureMismatch { .. } => "FeatureMismatch",
            RegistryError::NoInputInterface(_) => "NoInputInterface",
            RegistryError::MalformedDescriptor(_) => "MalformedDescriptor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub producer: u32,
    pub consumer: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSummary {
    pub id: u32,
    pub name: String,
    pub status: ModuleState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub modules: Vec<ModuleSummary>,
    pub links: Vec<Link>,
}

/// Module table. Ids start at 1 and are never reused.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    modules: BTreeMap<u32, ModuleDescriptor>,
    last_id: u32,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    /// Adds a module with a fresh id and status `registered`. The incoming
    /// id, status and links are ignored; the sentinel owns them.
    pub fn register(&mut self, mut descriptor: ModuleDescriptor) -> Result<u32, RegistryError> {
        if descriptor.name.trim().is_empty() {
            return Err(RegistryError::MalformedDescriptor("empty module name".into()));
        }
        if let Some(i) = descriptor.interfaces.iter().find(|i| i.name.is_empty()) {
            return Err(RegistryError::MalformedDescriptor(format!(
                "unnamed interface at address `{}`",
                i.address
            )));
        }
        let id = self
            .last_id
            .checked_add(1)
            .ok_or_else(|| RegistryError::MalformedDescriptor("module ids exhausted".into()))?;
        self.last_id = id;
        descriptor.id = id;
        descriptor.status = ModuleState::Registered;
        descriptor.producers.clear();
        descriptor.consumers.clear();
        self.modules.insert(id, descriptor);
        Ok(id)
    }

    pub fn get(&self, id: u32) -> Option<&ModuleDescriptor> {
        self.modules.get(&id)
    }

    /// All descriptors, sorted by id.
    pub fn list(&self) -> Vec<ModuleDescriptor> {
        self.modules.values().cloned().collect()
    }

    /// Links `producer` to `consumer` and returns the consumer's input
    /// address. Nothing changes unless every precondition holds; wiring an
    /// existing link again is a no-op.
    pub fn wire(&mut self, producer: u32, consumer: u32) -> Result<String, RegistryError> {
        let p = self.modules.get(&producer).ok_or(RegistryError::UnknownModule(producer))?;
        let c = self.modules.get(&consumer).ok_or(RegistryError::UnknownModule(consumer))?;
        if !p.has_feature(Feature::Send) {
            return Err(RegistryError::FeatureMismatch {
                module: producer,
                needed: Feature::Send,
            });
        }
        if !c.has_feature(Feature::Receive) {
            return Err(RegistryError::FeatureMismatch {
                module: consumer,
                needed: Feature::Receive,
            });
        }
        let address = c
            .input_address()
            .filter(|a| !a.is_empty())
            .ok_or(RegistryError::NoInputInterface(consumer))?
            .to_owned();
        let p = self.modules.get_mut(&producer).expect("checked above");
        if !p.consumers.contains(&consumer) {
            p.consumers.push(consumer);
        }
        let c = self.modules.get_mut(&consumer).expect("checked above");
        if !c.producers.contains(&producer) {
            c.producers.push(producer);
        }
        Ok(address)
    }

    pub fn update_status(&mut self, id: u32, state: ModuleState) -> Result<(), RegistryError> {
        let m = self.modules.get_mut(&id).ok_or(RegistryError::UnknownModule(id))?;
        m.status = state;
        Ok(())
    }

    pub fn topology(&self) -> Topology {
        let modules = self
            .modules
            .values()
            .map(|m| ModuleSummary {
                id: m.id,
                name: m.name.clone(),
                status: m.status,
            })
            .collect();
        let mut links: Vec<Link> = self
            .modules
            .values()
            .flat_map(|m| m.consumers.iter().map(move |&c| Link { producer: m.id, consumer: c }))
            .collect();
        links.sort();
        Topology { modules, links }
    }
}
