//! Registry of typed primitive functions available to feature programs,
//! the observation input handle they consume, and the result cache.

pub mod cache;
pub mod ops;
pub mod value;

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::sync::Arc;

use crate::raster::Raster;
use value::Kind;

pub use cache::{CacheKey, CacheStats, PrimitiveCache};
pub use ops::{DistanceNorm, PrimError, SCALAR_FIELDS};
pub use value::{Grid, Mask, Value};

/// One observation's input: location, concept raster, and scalar fields.
#[derive(Debug, Clone, PartialEq)]
pub struct InputDescriptor {
    pub id: String,
    pub longitude: f64,
    pub latitude: f64,
    pub raster: Arc<Raster>,
    pub scalar_fields: BTreeMap<String, f64>,
}

impl InputDescriptor {
    pub fn new(
        id: impl Into<String>,
        longitude: f64,
        latitude: f64,
        raster: Arc<Raster>,
        scalar_fields: BTreeMap<String, f64>,
    ) -> Result<Self, String> {
        if !(-180.0..=180.0).contains(&longitude) {
            return Err(format!("longitude {longitude} out of [-180, 180]"));
        }
        if !(-90.0..=90.0).contains(&latitude) {
            return Err(format!("latitude {latitude} out of [-90, 90]"));
        }
        Ok(InputDescriptor {
            id: id.into(),
            longitude,
            latitude,
            raster,
            scalar_fields,
        })
    }
}

/// Tunables shared by the primitive implementations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RegistryConfig {
    /// Denominators with |d| below this are clamped before dividing.
    pub div_epsilon: f64,
    pub distance_norm: DistanceNorm,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            div_epsilon: 1e-9,
            distance_norm: DistanceNorm::Euclidean,
        }
    }
}

/// A primitive's callable surface: overload signatures plus a description
/// that prompt builders hand to the language model.
#[derive(Debug, Clone)]
pub struct PrimitiveEntry {
    pub name: String,
    pub description: String,
    /// (parameter kinds, result kind) per overload.
    pub signatures: Vec<(Vec<Kind>, Kind)>,
}

impl PrimitiveEntry {
    /// Result kind for the given argument kinds, if any overload matches.
    pub fn result_kind(&self, args: &[Kind]) -> Option<Kind> {
        self.signatures
            .iter()
            .find(|(params, _)| params.as_slice() == args)
            .map(|(_, result)| *result)
    }
}

/// Immutable, name-keyed table of primitives.
#[derive(Debug, Clone)]
pub struct PrimitiveRegistry {
    entries: Vec<PrimitiveEntry>,
    index: HashMap<String, usize>,
    pub config: RegistryConfig,
}

impl PrimitiveRegistry {
    pub fn empty() -> Self {
        PrimitiveRegistry {
            entries: Vec::new(),
            index: HashMap::new(),
            config: RegistryConfig::default(),
        }
    }

    /// The full built-in set.
    pub fn standard() -> Self {
        Self::standard_with(RegistryConfig::default())
    }

    pub fn standard_with(config: RegistryConfig) -> Self {
        let mut reg = PrimitiveRegistry {
            entries: Vec::new(),
            index: HashMap::new(),
            config,
        };
        for name in ops::BUILTIN_NAMES {
            reg.register(PrimitiveEntry {
                name: name.to_string(),
                description: ops::builtin_description(name)
                    .expect("builtin description")
                    .to_string(),
                signatures: ops::builtin_signatures(name).expect("builtin signatures"),
            });
        }
        reg
    }

    pub fn register(&mut self, entry: PrimitiveEntry) {
        assert!(
            !entry.description.trim().is_empty(),
            "primitive {} needs a description",
            entry.name
        );
        assert!(
            !self.index.contains_key(&entry.name),
            "duplicate primitive {}",
            entry.name
        );
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&PrimitiveEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Entries in registration order (deterministic for prompt catalogs).
    pub fn entries(&self) -> &[PrimitiveEntry] {
        &self.entries
    }

    /// Invoke a primitive on already-evaluated arguments.
    pub fn call(&self, name: &str, args: &[Value]) -> Result<Value, PrimError> {
        ops::dispatch(name, args, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_registry_is_complete() {
        let reg = PrimitiveRegistry::standard();
        assert_eq!(reg.entries().len(), ops::BUILTIN_NAMES.len());
        let mask = reg.get("mask").unwrap();
        assert_eq!(
            mask.result_kind(&[Kind::Input, Kind::Text]),
            Some(Kind::Mask)
        );
        assert_eq!(mask.result_kind(&[Kind::Input]), None);
        assert!(reg.get("dragon_lair").is_none());
    }

    #[test]
    fn input_descriptor_rejects_bad_coordinates() {
        let raster = Arc::new(Raster::new(2, 2));
        assert!(InputDescriptor::new("a", -190.0, 0.0, raster.clone(), BTreeMap::new()).is_err());
        assert!(InputDescriptor::new("a", 0.0, 91.0, raster.clone(), BTreeMap::new()).is_err());
        assert!(InputDescriptor::new("a", 12.0, 45.0, raster, BTreeMap::new()).is_ok());
    }

    #[test]
    #[should_panic(expected = "duplicate primitive")]
    fn duplicate_names_rejected() {
        let mut reg = PrimitiveRegistry::standard();
        reg.register(PrimitiveEntry {
            name: "mask".into(),
            description: "again".into(),
            signatures: vec![],
        });
    }
}
