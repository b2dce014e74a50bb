//! Recipe ingestion, dataset splits, precursor vocabulary and knowledge base.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{parse_formula, Composition};
use crate::error::{Error, Result};

/// One line of a recipe file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeLine {
    pub id: String,
    pub target_formula: String,
    pub precursor_formulas: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
}

/// A parsed recipe before it is labelled against a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeRecord {
    pub id: String,
    pub target: Composition,
    pub precursors: Vec<Composition>,
    pub year: Option<i32>,
}

impl RecipeRecord {
    /// Canonical precursor formulas, sorted and deduplicated.
    pub fn precursor_set(&self) -> BTreeSet<String> {
        self.precursors.iter().map(Composition::canonical_formula).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectEntry {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub lines: usize,
    pub records: usize,
    pub rejected: usize,
    /// Records whose (target, precursor set) pair already appeared earlier.
    pub duplicate_recipes: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<RecipeRecord>,
    pub rejects: Vec<RejectEntry>,
    pub stats: IngestStats,
}

impl Ingested {
    /// Write the reject report as JSON lines `{line, reason}`.
    pub fn write_rejects(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.rejects {
            let line = serde_json::to_string(r)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn parse_line(text: &str) -> std::result::Result<RecipeRecord, String> {
    let raw: RecipeLine = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if raw.precursor_formulas.is_empty() {
        return Err("precursor_formulas is empty".into());
    }
    let target = parse_formula(&raw.target_formula).map_err(|e| format!("target: {e}"))?;
    let precursors = raw
        .precursor_formulas
        .iter()
        .map(|f| parse_formula(f).map_err(|e| format!("precursor: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(RecipeRecord {
        id: raw.id,
        target,
        precursors,
        year: raw.year,
    })
}

/// Parse recipe JSON lines from any reader. Blank lines are ignored; every
/// other malformed line lands in the reject report with its 1-based number.
pub fn read_recipes(reader: impl BufRead) -> std::io::Result<Ingested> {
    let mut out = Ingested::default();
    let mut seen: HashMap<(String, BTreeSet<String>), usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.stats.lines += 1;
        match parse_line(&line) {
            Ok(rec) => {
                let key = (rec.target.canonical_formula(), rec.precursor_set());
                let count = seen.entry(key).or_insert(0);
                if *count > 0 {
                    out.stats.duplicate_recipes += 1;
                }
                *count += 1;
                out.records.push(rec);
            }
            Err(reason) => out.rejects.push(RejectEntry { line: i + 1, reason }),
        }
    }
    out.stats.records = out.records.len();
    out.stats.rejected = out.rejects.len();
    Ok(out)
}

pub fn load_recipes(path: &Path) -> Result<Ingested> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_recipes(BufReader::new(f)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Random,
    Year,
}

impl std::str::FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "random" => Ok(SplitMode::Random),
            "year" => Ok(SplitMode::Year),
            other => Err(format!("unknown split mode `{other}` (expected random|year)")),
        }
    }
}

/// Last publication year of the training partition in year mode.
pub const TRAIN_LAST_YEAR: i32 = 2014;
/// Last publication year of the validation partition in year mode.
pub const VALID_LAST_YEAR: i32 = 2016;

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<RecipeRecord>,
    pub valid: Vec<RecipeRecord>,
    pub test: Vec<RecipeRecord>,
}

/// Partition records. Year mode: train up to 2014, valid 2015–2016, test
/// from 2017 on. Random mode: seeded shuffle, then 80/10/10 slices.
pub fn split_dataset(records: Vec<RecipeRecord>, mode: SplitMode, seed: u64) -> Result<Splits> {
    let mut out = Splits::default();
    match mode {
        SplitMode::Year => {
            if let Some(r) = records.iter().find(|r| r.year.is_none()) {
                return Err(Error::MissingYear(r.id.clone()));
            }
            for r in records {
                match r.year.expect("checked") {
                    y if y <= TRAIN_LAST_YEAR => out.train.push(r),
                    y if y <= VALID_LAST_YEAR => out.valid.push(r),
                    _ => out.test.push(r),
                }
            }
        }
        SplitMode::Random => {
            let n = records.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_train = n * 8 / 10;
            let n_valid = n / 10;
            let mut slots: Vec<Option<RecipeRecord>> = records.into_iter().map(Some).collect();
            for (rank, &i) in order.iter().enumerate() {
                let r = slots[i].take().expect("permutation visits each index once");
                if rank < n_train {
                    out.train.push(r);
                } else if rank < n_train + n_valid {
                    out.valid.push(r);
                } else {
                    out.test.push(r);
                }
            }
        }
    }
    Ok(out)
}

/// Ordered list of canonical precursor formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecursorVocabulary {
    precursors: Vec<String>,
    compositions: Vec<Composition>,
    index: HashMap<String, usize>,
}

impl PrecursorVocabulary {
    /// Build from any formulas; canonicalizes, deduplicates and sorts.
    pub fn new<'a>(formulas: impl IntoIterator<Item = &'a Composition>) -> Self {
        let mut by_canon: std::collections::BTreeMap<String, Composition> = Default::default();
        for c in formulas {
            by_canon
                .entry(c.canonical_formula())
                .or_insert_with(|| c.clone());
        }
        let precursors: Vec<String> = by_canon.keys().cloned().collect();
        let compositions = by_canon
            .into_iter()
            .map(|(canon, _)| parse_formula(&canon).expect("canonical formulas re-parse"))
            .collect();
        let index = precursors
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        PrecursorVocabulary {
            precursors,
            compositions,
            index,
        }
    }

    pub fn from_canonical(formulas: Vec<String>) -> Result<Self> {
        let comps = formulas
            .iter()
            .map(|f| parse_formula(f))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let vocab = Self::new(comps.iter());
        if vocab.precursors != formulas {
            return Err(Error::Config(
                "vocabulary must be sorted, deduplicated canonical formulas".into(),
            ));
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.precursors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.precursors.is_empty()
    }

    pub fn formulas(&self) -> &[String] {
        &self.precursors
    }

    pub fn formula(&self, i: usize) -> &str {
        &self.precursors[i]
    }

    pub fn composition(&self, i: usize) -> &Composition {
        &self.compositions[i]
    }

    pub fn index_of(&self, canonical: &str) -> Option<usize> {
        self.index.get(canonical).copied()
    }

    /// Stable content hash of the ordered formula list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.precursors {
            h.update(p.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Attach labels to a parsed record; unknown precursors are kept as OOV.
    pub fn labelize(&self, record: &RecipeRecord) -> Recipe {
        let mut ids = BTreeSet::new();
        let mut oov = Vec::new();
        let set = record.precursor_set();
        for canon in &set {
            match self.index_of(canon) {
                Some(i) => {
                    ids.insert(i);
                }
                None => oov.push(canon.clone()),
            }
        }
        Recipe {
            id: record.id.clone(),
            target: record.target.clone(),
            precursor_ids: ids.into_iter().collect(),
            precursor_set: set.into_iter().collect(),
            n_labels: self.len(),
            year: record.year,
            oov_precursors: oov,
        }
    }
}

/// A recipe labelled against a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub id: String,
    pub target: Composition,
    /// Sorted vocabulary indices of in-vocabulary precursors.
    pub precursor_ids: Vec<usize>,
    /// Every canonical precursor formula, including OOV ones, sorted.
    pub precursor_set: Vec<String>,
    pub n_labels: usize,
    pub year: Option<i32>,
    pub oov_precursors: Vec<String>,
}

impl Recipe {
    /// Binary label vector of length `n_labels`.
    pub fn label(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.n_labels];
        for &i in &self.precursor_ids {
            y[i] = 1.0;
        }
        y
    }

    pub fn has_oov(&self) -> bool {
        !self.oov_precursors.is_empty()
    }
}

/// Training recipes used as the retrieval corpus. Immutable once built.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    recipes: Vec<Recipe>,
    vocab: std::sync::Arc<PrecursorVocabulary>,
}

impl KnowledgeBase {
    pub fn recipes(&self) -> &[Recipe] {
        &self.recipes
    }

    pub fn vocab(&self) -> &PrecursorVocabulary {
        &self.vocab
    }

    pub fn shared_vocab(&self) -> std::sync::Arc<PrecursorVocabulary> {
        self.vocab.clone()
    }

    pub fn len(&self) -> usize {
        self.recipes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recipes.is_empty()
    }

    pub fn get(&self, i: usize) -> &Recipe {
        &self.recipes[i]
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.recipes.iter().any(|r| r.id == id)
    }
}

pub fn build_vocab_and_kb(train: &[RecipeRecord]) -> Result<KnowledgeBase> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let vocab = PrecursorVocabulary::new(train.iter().flat_map(|r| r.precursors.iter()));
    let recipes = train.iter().map(|r| vocab.labelize(r)).collect();
    Ok(KnowledgeBase {
        recipes,
        vocab: std::sync::Arc::new(vocab),
    })
}

/// Labelled train/valid/test data sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub kb: KnowledgeBase,
    pub valid: Vec<Recipe>,
    pub test: Vec<Recipe>,
}

impl LabeledDataset {
    pub fn from_splits(splits: &Splits) -> Result<Self> {
        let kb = build_vocab_and_kb(&splits.train)?;
        let valid = splits.valid.iter().map(|r| kb.vocab().labelize(r)).collect();
        let test = splits.test.iter().map(|r| kb.vocab().labelize(r)).collect();
        Ok(LabeledDataset { kb, valid, test })
    }

    pub fn vocab(&self) -> &PrecursorVocabulary {
        self.kb.vocab()
    }
}
