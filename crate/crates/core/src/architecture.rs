//! Static description of the monitored system: its components, the layer
//! each one lives on, and how to reach it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ComponentId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Device,
    Edge,
    Platform,
    Application,
}

impl Layer {
    pub const ALL: [Layer; 4] = [Layer::Device, Layer::Edge, Layer::Platform, Layer::Application];

    pub fn as_str(&self) -> &'static str {
        match self {
            Layer::Device => "device",
            Layer::Edge => "edge",
            Layer::Platform => "platform",
            Layer::Application => "application",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Http,
    Sim,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    /// `host:port`
    pub address: String,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentDescriptor {
    pub id: ComponentId,
    pub name: String,
    pub layer: Layer,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<Endpoint>,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<ComponentId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub name: String,
    pub components: Vec<ComponentDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArchitectureError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("duplicate component `{0}`")]
    DuplicateComponent(ComponentId),
    #[error("component `{0}` has an unknown parent")]
    DanglingParent(ComponentId),
    #[error("component `{0}` is part of a parent cycle")]
    ParentCycle(ComponentId),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
}

pub fn load_architecture(text: &str) -> Result<ArchitectureDescriptor, ArchitectureError> {
    // Layers are checked by hand first so a bad value surfaces as
    // UnknownLayer rather than a generic syntax error.
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| ArchitectureError::Syntax {
        line: e.line(),
        message: e.to_string(),
    })?;
    if let Some(components) = raw.get("components").and_then(|c| c.as_array()) {
        for c in components {
            if let Some(layer) = c.get("layer").and_then(|l| l.as_str()) {
                if !Layer::ALL.iter().any(|l| l.as_str() == layer) {
                    return Err(ArchitectureError::UnknownLayer(layer.to_string()));
                }
            }
        }
    }
    let arch: ArchitectureDescriptor =
        serde_json::from_str(text).map_err(|e| ArchitectureError::Syntax {
            line: e.line(),
            message: e.to_string(),
        })?;
    arch.validate()?;
    Ok(arch)
}

impl ArchitectureDescriptor {
    pub fn validate(&self) -> Result<(), ArchitectureError> {
        let mut by_id = BTreeMap::new();
        for c in &self.components {
            if by_id.insert(c.id.as_str(), c).is_some() {
                return Err(ArchitectureError::DuplicateComponent(c.id.clone()));
            }
        }
        for c in &self.components {
            if let Some(p) = &c.parent {
                if !by_id.contains_key(p.as_str()) {
                    return Err(ArchitectureError::DanglingParent(c.id.clone()));
                }
            }
        }
        for c in &self.components {
            let mut cursor = c.parent.as_deref();
            let mut steps = 0;
            while let Some(p) = cursor {
                steps += 1;
                if p == c.id || steps > self.components.len() {
                    return Err(ArchitectureError::ParentCycle(c.id.clone()));
                }
                cursor = by_id[p].parent.as_deref();
            }
        }
        Ok(())
    }

    pub fn component(&self, id: &str) -> Option<&ComponentDescriptor> {
        self.components.iter().find(|c| c.id == id)
    }

    pub fn component_ids(&self) -> BTreeSet<ComponentId> {
        self.components.iter().map(|c| c.id.clone()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentFilter {
    #[serde(default)]
    pub layer: Option<Layer>,
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub tag: Option<String>,
}

impl ComponentFilter {
    pub fn matches(&self, c: &ComponentDescriptor) -> bool {
        self.layer.is_none_or(|l| l == c.layer)
            && self.kind.as_ref().is_none_or(|k| *k == c.kind)
            && self.tag.as_ref().is_none_or(|t| c.tags.contains(t))
    }
}

/// Components matching every set field of `filter`, ordered by id.
pub fn query_components<'a>(
    arch: &'a ArchitectureDescriptor,
    filter: &ComponentFilter,
) -> Vec<&'a ComponentDescriptor> {
    let mut out: Vec<_> = arch.components.iter().filter(|c| filter.matches(c)).collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}
