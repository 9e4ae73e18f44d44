//! Function registry and route table.
//!
//! The registry file is a JSON list of function specs:
//!
//! ```json
//! [
//!   {
//!     "function_id": "counter",
//!     "route": "counter",
//!     "image_digest": "sha256:4f1c...",
//!     "image_size": 269484032,
//!     "memory_declared": 10485760,
//!     "idle_timeout": 600,
//!     "program": [{"incr_counter": "c"}, {"respond": "{var:c}"}]
//!   }
//! ]
//! ```
//!
//! `idle_timeout` falls back to the node default when omitted; `reentrant`
//! (default `false`) lets a trigger start a second instance while the first
//! one is suspended mid-run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::sim::{validate_program, ProgramError, SimStep};
use crate::types::{FunctionId, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSpec {
    pub function_id: FunctionId,
    pub route: String,
    pub image_digest: String,
    pub image_size: u64,
    pub program: Vec<SimStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idle_timeout: Option<SimTime>,
    pub memory_declared: u64,
    #[serde(default)]
    pub reentrant: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("function {0} is registered twice")]
    DuplicateFunction(FunctionId),
    #[error("route /{route} is claimed by both {first} and {second}")]
    DuplicateRoute { route: String, first: FunctionId, second: FunctionId },
    #[error("function {function}: {field} must be positive")]
    NonPositive { function: FunctionId, field: &'static str },
    #[error("function {0}: route must not be empty")]
    EmptyRoute(FunctionId),
    #[error("function {function}: {source}")]
    Program { function: FunctionId, source: ProgramError },
    #[error("cannot parse registry: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot read registry: {0}")]
    Io(#[from] std::io::Error),
}

/// Strips surrounding slashes so `/fn/x/` and `x` name the same route.
pub fn normalize_route(route: &str) -> &str {
    route.trim_matches('/')
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    functions: BTreeMap<FunctionId, FunctionSpec>,
    routes: BTreeMap<String, FunctionId>,
}

impl Registry {
    pub fn new(specs: Vec<FunctionSpec>) -> Result<Self, RegistryError> {
        let mut registry = Registry::default();
        for spec in specs {
            registry.insert(spec)?;
        }
        Ok(registry)
    }

    pub fn from_json(text: &str) -> Result<Self, RegistryError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn insert(&mut self, mut spec: FunctionSpec) -> Result<(), RegistryError> {
        let id = spec.function_id.clone();
        if self.functions.contains_key(&id) {
            return Err(RegistryError::DuplicateFunction(id));
        }
        if spec.image_size == 0 {
            return Err(RegistryError::NonPositive { function: id, field: "image_size" });
        }
        if spec.memory_declared == 0 {
            return Err(RegistryError::NonPositive { function: id, field: "memory_declared" });
        }
        spec.route = normalize_route(&spec.route).to_owned();
        if spec.route.is_empty() {
            return Err(RegistryError::EmptyRoute(id));
        }
        if let Some(first) = self.routes.get(&spec.route) {
            return Err(RegistryError::DuplicateRoute { route: spec.route, first: first.clone(), second: id });
        }
        validate_program(&spec.program).map_err(|source| RegistryError::Program { function: id.clone(), source })?;
        self.routes.insert(spec.route.clone(), id.clone());
        self.functions.insert(id, spec);
        Ok(())
    }

    pub fn resolve(&self, route: &str) -> Option<&FunctionSpec> {
        self.routes.get(normalize_route(route)).and_then(|id| self.functions.get(id))
    }

    pub fn get(&self, id: &FunctionId) -> Option<&FunctionSpec> {
        self.functions.get(id)
    }

    pub fn functions(&self) -> impl Iterator<Item = &FunctionSpec> {
        self.functions.values()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// Whether the base image `digest` of `function` is installed here.
    pub fn has_image(&self, function: &FunctionId, digest: &str) -> bool {
        self.functions.get(function).is_some_and(|f| f.image_digest == digest)
    }
}
