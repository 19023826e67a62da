//! Open-prompt oriented object detection at desk scale.
//!
//! The crate is organized by subsystem:
//!
//! - [`geom`]: oriented boxes, rotated IoU, class-agnostic NMS.
//! - [`numkit`]: dense tensors, reverse-mode differentiation, gradient checks.
//! - [`promptdict`]: prompt embedding dictionaries, prompt sampling, k-means prompt synthesis.
//! - [`heads`]: alignment and fusion detection heads with their losses.
//! - [`pseudolabel`]: the self-training pseudo-label engine.
//! - [`harness`]: synthetic scenes, toy detector training, AP50 evaluation, file formats.

pub mod error;
pub mod geom;
pub mod harness;
pub mod heads;
pub mod numkit;
pub mod promptdict;
pub mod pseudolabel;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Integer category identifier. Ordering is used for deterministic tie-breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CategoryId(pub u32);

impl CategoryId {
    /// First id handed out to prompts synthesized by clustering.
    pub const PSEUDO_BASE: u32 = 1 << 20;

    pub fn is_pseudo(self) -> bool {
        self.0 >= Self::PSEUDO_BASE
    }
}

impl std::fmt::Display for CategoryId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bidirectional map between category names and ids.
///
/// Regular names get consecutive ids in insertion order; clustered prompt
/// categories live above [`CategoryId::PSEUDO_BASE`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    by_id: std::collections::BTreeMap<CategoryId, String>,
    by_name: std::collections::HashMap<String, CategoryId>,
    next_regular: u32,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::new();
        for n in names {
            v.intern(n.as_ref());
        }
        v
    }

    /// Id for `name`, allocating a new regular id if unseen.
    pub fn intern(&mut self, name: &str) -> CategoryId {
        if let Some(&id) = self.by_name.get(name) {
            return id;
        }
        let id = CategoryId(self.next_regular);
        self.next_regular += 1;
        self.by_id.insert(id, name.to_string());
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Registers the synthetic category for cluster `index` and returns its id.
    pub fn intern_pseudo(&mut self, index: u32) -> CategoryId {
        let id = CategoryId(CategoryId::PSEUDO_BASE + index);
        let name = format!("cluster-{index}");
        self.by_id.insert(id, name.clone());
        self.by_name.insert(name, id);
        id
    }

    pub fn id(&self, name: &str) -> Result<CategoryId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    pub fn name(&self, id: CategoryId) -> Result<&str> {
        self.by_id
            .get(&id)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownCategory(format!("#{id}")))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = CategoryId> + '_ {
        self.by_id.keys().copied()
    }
}
