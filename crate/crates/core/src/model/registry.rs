use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Block category of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "SAN")]
    San,
    #[serde(rename = "FFN")]
    Ffn,
    #[serde(rename = "LN")]
    Ln,
    #[serde(rename = "EMB")]
    Emb,
    #[serde(rename = "HEAD")]
    Head,
}

impl Category {
    pub const ALL: [Category; 5] = [Category::San, Category::Ffn, Category::Ln, Category::Emb, Category::Head];

    /// True for the blocks that repeat inside every transformer layer.
    pub fn in_layers(self) -> bool {
        matches!(self, Category::San | Category::Ffn | Category::Ln)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::San => "SAN",
            Category::Ffn => "FFN",
            Category::Ln => "LN",
            Category::Emb => "EMB",
            Category::Head => "HEAD",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub category: Category,
    pub layer: Option<usize>,
    pub tensor: Tensor<T>,
}

/// Ordered, uniquely named, category-tagged parameter tensors.
#[derive(Debug, Clone)]
pub struct ParameterRegistry<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for ParameterRegistry<T> {
    fn default() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }
}

impl<T: PartialEq> PartialEq for ParameterRegistry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl<T: Element> ParameterRegistry<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<ParamEntry<T>>) -> Result<Self> {
        let mut registry = Self::new();
        for e in entries {
            registry.push(e)?;
        }
        Ok(registry)
    }

    pub fn push(&mut self, entry: ParamEntry<T>) -> Result<()> {
        if self.index.contains_key(&entry.name) {
            return Err(Error::Taxonomy(format!("duplicate parameter name `{}`", entry.name)));
        }
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.position(name).map(|i| &self.entries[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).map(|e| &e.tensor).ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set_tensor(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let i = self.position(name).ok_or_else(|| Error::UnknownName(name.to_string()))?;
        let slot = &mut self.entries[i].tensor;
        if slot.shape() != tensor.shape() {
            return Err(Error::StructureMismatch(format!(
                "`{name}` has shape {:?}, replacement has {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    pub(crate) fn tensor_mut_at(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].tensor
    }

    /// Errors unless both registries carry the same names, categories,
    /// layers and shapes in the same order.
    pub fn check_compatible<U: Element>(&self, other: &ParameterRegistry<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::StructureMismatch(format!("{} entries vs {}", self.len(), other.len())));
        }
        for (a, b) in self.entries.iter().zip(other.entries()) {
            if a.name != b.name || a.category != b.category || a.layer != b.layer {
                return Err(Error::StructureMismatch(format!("entry `{}` vs `{}`", a.name, b.name)));
            }
            if a.tensor.shape() != b.tensor.shape() {
                return Err(Error::StructureMismatch(format!(
                    "`{}` has shape {:?} vs {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// Bitwise equality of every tensor (and of the structure).
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.check_compatible(other).is_ok()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a.tensor.bits_eq(&b.tensor))
    }

    /// Copy of the registry with every tensor passed through `f`.
    pub fn map_tensors<U: Element>(&self, mut f: impl FnMut(&ParamEntry<T>) -> Tensor<U>) -> ParameterRegistry<U> {
        let mut out = ParameterRegistry::new();
        for e in &self.entries {
            let tensor = f(e);
            debug_assert_eq!(tensor.shape(), e.tensor.shape());
            out.push(ParamEntry { name: e.name.clone(), category: e.category, layer: e.layer, tensor })
                .expect("names are unique in the source");
        }
        out
    }

    pub fn cast<U: Element>(&self) -> ParameterRegistry<U> {
        self.map_tensors(|e| e.tensor.cast())
    }

    /// Highest layer index + 1, or 0 when there are no layer tensors.
    pub fn n_layers(&self) -> usize {
        self.entries.iter().filter_map(|e| e.layer).max().map_or(0, |l| l + 1)
    }

    /// All parameters flattened into one f64 vector in registry order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.tensor.data().iter().map(|x| x.as_f64())).collect()
    }

    /// Inverse of [`ParameterRegistry::flatten`].
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        let total: usize = self.entries.iter().map(|e| e.tensor.numel()).sum();
        if flat.len() != total {
            return Err(Error::StructureMismatch(format!("{} values for {total} parameters", flat.len())));
        }
        let mut offset = 0;
        Ok(self.map_tensors(|e| {
            let n = e.tensor.numel();
            let data = flat[offset..offset + n].iter().map(|&x| T::from_f64(x)).collect();
            offset += n;
            Tensor::from_parts(e.tensor.shape().to_vec(), data)
        }))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Count {
    pub matrices: usize,
    pub elements: u64,
}

impl Count {
    fn add(&mut self, elements: usize) {
        self.matrices += 1;
        self.elements += elements as u64;
    }
}

/// Parameter counts by category and by layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub by_category: BTreeMap<Category, Count>,
    pub by_layer: BTreeMap<usize, Count>,
    /// SAN + FFN + LN only.
    pub layers: Count,
    /// Everything, including EMB and HEAD.
    pub total: Count,
}

impl Census {
    pub fn category(&self, c: Category) -> Count {
        self.by_category.get(&c).copied().unwrap_or_default()
    }
}

pub fn param_census<T: Element>(registry: &ParameterRegistry<T>) -> Census {
    let mut census = Census::default();
    for e in registry.iter() {
        let n = e.tensor.numel();
        census.by_category.entry(e.category).or_default().add(n);
        if let Some(l) = e.layer {
            census.by_layer.entry(l).or_default().add(n);
        }
        if e.category.in_layers() {
            census.layers.add(n);
        }
        census.total.add(n);
    }
    census
}
