use super::{Composition, ElementFeatureTable};
use crate::error::{Error, Result};

/// Fully connected element graph of one composition. Nodes are ordered by
/// ascending atomic number; self-loops are not edges.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionGraph {
    pub elements: Vec<&'static str>,
    pub features: Vec<Vec<f64>>,
    pub fractions: Vec<f64>,
}

impl CompositionGraph {
    pub fn n_nodes(&self) -> usize {
        self.elements.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map(Vec::len).unwrap_or(0)
    }

    /// Directed edges `(i, j)` for every ordered pair `i != j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n_nodes();
        (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
    }

    pub fn n_edges(&self) -> usize {
        let n = self.n_nodes();
        n * n.saturating_sub(1)
    }

    /// Reorder nodes: node `k` of the result is node `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> CompositionGraph {
        CompositionGraph {
            elements: perm.iter().map(|&i| self.elements[i]).collect(),
            features: perm.iter().map(|&i| self.features[i].clone()).collect(),
            fractions: perm.iter().map(|&i| self.fractions[i]).collect(),
        }
    }
}

pub fn build_graph(c: &Composition, feats: &ElementFeatureTable) -> Result<CompositionGraph> {
    let elements = c.elements();
    let missing = feats.missing(elements.iter().copied());
    if !missing.is_empty() {
        return Err(Error::MissingFeature(missing));
    }
    let features = elements
        .iter()
        .map(|s| feats.get(s).expect("checked above").to_vec())
        .collect();
    let fractions = elements.iter().map(|s| c.fraction(s)).collect();
    Ok(CompositionGraph {
        elements,
        features,
        fractions,
    })
}
