//! Shared retrieval result type and per-target retrieval tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Ordered references for one target: knowledge-base recipe indices, best
/// first, with the score each was ranked by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSet {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// Fewer than the requested K candidates were eligible.
    pub short: bool,
}

impl RetrievalSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Which knowledge-base entries a query may not retrieve.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RetrievalOptions {
    /// Recipe id never returned (the query's own recipe during training).
    pub exclude_id: Option<String>,
    /// Skip entries whose composition vector equals the query's exactly.
    pub skip_same_composition: bool,
}

impl RetrievalOptions {
    pub fn excluding(id: impl Into<String>) -> Self {
        RetrievalOptions {
            exclude_id: Some(id.into()),
            skip_same_composition: false,
        }
    }
}

/// Rank `(index, score)` candidates and keep the best `k`. `ascending`
/// selects smaller-is-better; ties always go to the lower index.
pub(crate) fn top_k(mut scored: Vec<(usize, f64)>, k: usize, ascending: bool) -> RetrievalSet {
    scored.sort_by(|a, b| {
        let ord = if ascending {
            a.1.total_cmp(&b.1)
        } else {
            b.1.total_cmp(&a.1)
        };
        ord.then(a.0.cmp(&b.0))
    });
    let short = scored.len() < k;
    scored.truncate(k);
    RetrievalSet {
        indices: scored.iter().map(|s| s.0).collect(),
        scores: scored.iter().map(|s| s.1).collect(),
        short,
    }
}

/// References per query recipe id, for one retriever.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTable {
    pub retriever: String,
    pub k: usize,
    pub rows: BTreeMap<String, RetrievalSet>,
}

impl RetrievalTable {
    pub fn get(&self, recipe_id: &str) -> Option<&RetrievalSet> {
        self.rows.get(recipe_id)
    }

    /// Ids among `wanted` with no row.
    pub fn missing<'a>(&self, wanted: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        wanted
            .into_iter()
            .filter(|id| !self.rows.contains_key(*id))
            .map(str::to_string)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_index() {
        let r = top_k(vec![(3, 0.5), (1, 0.5), (2, 0.9), (0, 0.1)], 3, false);
        assert_eq!(r.indices, vec![2, 1, 3]);
        assert!(!r.short);
        let r = top_k(vec![(3, -0.5), (1, -0.5), (2, 0.9)], 5, true);
        assert_eq!(r.indices, vec![1, 3, 2]);
        assert!(r.short);
    }
}
