use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{CategoryId, Error, Result, Vocabulary};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Node {
    name: String,
    #[serde(default)]
    children: Vec<Node>,
}

/// Category forest; each category has at most one parent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CategoryTree {
    parent: BTreeMap<CategoryId, Option<CategoryId>>,
}

impl CategoryTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `name` under `parent` (a root when `None`). The parent must
    /// already be present and `name` must be new, so the forest stays acyclic.
    pub fn add(
        &mut self,
        vocab: &mut Vocabulary,
        name: &str,
        parent: Option<&str>,
    ) -> Result<CategoryId> {
        let p = match parent {
            Some(pn) => {
                let id = vocab.id(pn)?;
                if !self.parent.contains_key(&id) {
                    return Err(Error::UnknownCategory(pn.to_string()));
                }
                Some(id)
            }
            None => None,
        };
        let id = vocab.intern(name);
        if self.parent.contains_key(&id) {
            return Err(Error::InvalidArgument(format!(
                "category `{name}` appears twice in the tree"
            )));
        }
        self.parent.insert(id, p);
        Ok(id)
    }

    /// Parses `{"name": .., "children": [..]}`. A top-level object is a
    /// virtual root whose children are the forest roots; a top-level array
    /// lists the roots directly.
    pub fn from_json(text: &str, vocab: &mut Vocabulary) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let roots: Vec<Node> = if value.is_array() {
            serde_json::from_value(value)?
        } else {
            serde_json::from_value::<Node>(value)?.children
        };
        let mut tree = Self::new();
        let mut stack: Vec<(&Node, Option<&str>)> = roots.iter().rev().map(|n| (n, None)).collect();
        while let Some((node, parent)) = stack.pop() {
            tree.add(vocab, &node.name, parent)?;
            for c in node.children.iter().rev() {
                stack.push((c, Some(&node.name)));
            }
        }
        Ok(tree)
    }

    pub fn contains(&self, c: CategoryId) -> bool {
        self.parent.contains_key(&c)
    }

    pub fn parent(&self, c: CategoryId) -> Option<CategoryId> {
        self.parent.get(&c).copied().flatten()
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// Ancestor of `c` that has no parent (`c` itself for a root).
    pub fn top_level(&self, c: CategoryId) -> Result<CategoryId> {
        let mut cur = c;
        loop {
            match self.parent.get(&cur) {
                None => {
                    return Err(Error::UnknownCategory(format!(
                        "#{c} is not in the category tree"
                    )))
                }
                Some(None) => return Ok(cur),
                Some(Some(p)) => cur = *p,
            }
        }
    }

    pub fn same_top_level(&self, a: CategoryId, b: CategoryId) -> Result<bool> {
        Ok(self.top_level(a)? == self.top_level(b)?)
    }
}
