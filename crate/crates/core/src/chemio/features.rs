use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::elements::{self, N_ELEMENTS};
use crate::error::{Error, Result};

/// Dimensionality of the published Matscholar element embeddings.
pub const DEFAULT_FEATURE_DIM: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    File,
    Fallback,
}

/// Per-element feature vectors keyed by symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementFeatureTable {
    source: FeatureSource,
    dim: usize,
    table: BTreeMap<String, Vec<f64>>,
}

impl ElementFeatureTable {
    /// Build from an explicit table. All vectors must share one length.
    pub fn from_map(source: FeatureSource, table: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let dim = table
            .values()
            .next()
            .map(Vec::len)
            .ok_or(Error::Empty("element feature table"))?;
        if dim == 0 {
            return Err(Error::Config("element features must have dim >= 1".into()));
        }
        for (sym, v) in &table {
            if elements::atomic_number(sym).is_none() {
                return Err(Error::Config(format!("unknown element `{sym}` in feature table")));
            }
            if v.len() != dim {
                return Err(Error::dims(format!("element feature `{sym}`"), dim, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("non-finite feature for `{sym}`")));
            }
        }
        Ok(ElementFeatureTable { source, dim, table })
    }

    /// Load a JSON object `{symbol: [float, ...]}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)?;
        Self::from_map(FeatureSource::File, table)
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, symbol: &str) -> Option<&[f64]> {
        self.table.get(symbol).map(Vec::as_slice)
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.table.contains_key(symbol)
    }

    /// Symbols from `symbols` with no entry, deduplicated and sorted.
    pub fn missing<'a>(&self, symbols: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut out: Vec<String> = symbols
            .into_iter()
            .filter(|s| !self.contains(s))
            .map(str::to_string)
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

/// Deterministic unit-norm feature vectors for all 118 elements, each drawn
/// from a generator seeded by `(seed, atomic number)`.
pub fn fallback_element_features(dim: usize, seed: u64) -> ElementFeatureTable {
    assert!(dim >= 1, "feature dim must be >= 1");
    let mut table = BTreeMap::new();
    for z in 1..=N_ELEMENTS as u64 {
        let stream = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(z.wrapping_mul(0xD1B5_4A32_D192_ED03));
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
            norm = 1.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        table.insert(elements::SYMBOLS[z as usize - 1].to_string(), v);
    }
    ElementFeatureTable {
        source: FeatureSource::Fallback,
        dim,
        table,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fallback_is_deterministic() {
        assert_eq!(fallback_element_features(16, 3), fallback_element_features(16, 3));
        assert_ne!(fallback_element_features(16, 3), fallback_element_features(16, 4));
    }

    #[test]
    fn fallback_vectors_are_unit_and_distinct() {
        let t = fallback_element_features(DEFAULT_FEATURE_DIM, 0);
        assert_eq!(t.source(), FeatureSource::Fallback);
        let vs: Vec<&[f64]> = elements::SYMBOLS.iter().map(|s| t.get(s).unwrap()).collect();
        for v in &vs {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                assert_ne!(vs[i], vs[j], "{} vs {}", elements::SYMBOLS[i], elements::SYMBOLS[j]);
            }
        }
    }

    #[test]
    fn dim_one_works() {
        let t = fallback_element_features(1, 9);
        assert!(t.get("Fe").unwrap()[0].abs() == 1.0);
    }

    #[test]
    fn file_table_validation() {
        let mut m = BTreeMap::new();
        m.insert("O".to_string(), vec![1.0, 2.0]);
        m.insert("Si".to_string(), vec![1.0]);
        assert!(matches!(
            ElementFeatureTable::from_map(FeatureSource::File, m),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut m = BTreeMap::new();
        m.insert("Qq".to_string(), vec![1.0]);
        assert!(ElementFeatureTable::from_map(FeatureSource::File, m).is_err());
    }

    #[test]
    fn load_json_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("feat.json");
        std::fs::write(&p, r#"{"O": [0.1, 0.2], "Si": [0.3, 0.4]}"#).unwrap();
        let t = ElementFeatureTable::load(&p).unwrap();
        assert_eq!(t.source(), FeatureSource::File);
        assert_eq!(t.dim(), 2);
        assert_eq!(t.missing(["O", "Fe", "Fe"]), vec!["Fe".to_string()]);
    }
}
