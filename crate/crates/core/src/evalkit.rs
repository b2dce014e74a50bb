//! Set decoding and metrics: Top-K exact match, macro/micro recall, and the
//! subset-case / new-case breakdown.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::chemio::Recipe;

pub const TOP_KS: [usize; 4] = [1, 3, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub top_n: usize,
    pub max_size: usize,
    pub beam: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            top_n: 10,
            max_size: 6,
            beam: 10,
        }
    }
}

/// Candidate precursor sets, best first. Each set is a sorted list of
/// vocabulary indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SetPrediction {
    pub candidates: Vec<(Vec<usize>, f64)>,
}

/// Score of choosing exactly `set` among `pool` (both ascending): the
/// product over `pool` in ascending index order of `p` or `1 − p`.
pub fn set_score(probs: &[f64], pool: &[usize], set: &[usize]) -> f64 {
    let mut score = 1.0;
    let mut it = set.iter().peekable();
    for &i in pool {
        if it.peek() == Some(&&i) {
            it.next();
            score *= probs[i];
        } else {
            score *= 1.0 - probs[i];
        }
    }
    score
}

fn rank(mut cands: Vec<(Vec<usize>, f64)>, beam: usize) -> SetPrediction {
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    cands.truncate(beam);
    SetPrediction { candidates: cands }
}

/// Restrict to the `top_n` most probable precursors (ties to the lower
/// index), score every subset of size `1..=max_size` and keep the `beam`
/// best. Equal scores are ordered lexicographically by index tuple.
pub fn enumerate_sets(probs: &[f64], top_n: usize, max_size: usize, beam: usize) -> SetPrediction {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(top_n.min(probs.len()));
    order.sort_unstable();
    let pool = order;
    let n = pool.len();
    let mut cands = Vec::new();
    // subsets as bitmasks over the pool, pool ascending so members stay sorted
    for bits in 1u64..(1u64 << n) {
        if bits.count_ones() as usize > max_size {
            continue;
        }
        let set: Vec<usize> = (0..n).filter(|b| bits >> b & 1 == 1).map(|b| pool[b]).collect();
        let score = set_score(probs, &pool, &set);
        cands.push((set, score));
    }
    rank(cands, beam)
}

/// Exhaustive scan over all `2^l − 1` non-empty subsets.
pub fn brute_force_sets(probs: &[f64], beam: usize) -> SetPrediction {
    let pool: Vec<usize> = (0..probs.len()).collect();
    let mut cands = Vec::new();
    for bits in 1u64..(1u64 << probs.len()) {
        let set: Vec<usize> = pool.iter().copied().filter(|&i| bits >> i & 1 == 1).collect();
        let score = set_score(probs, &pool, &set);
        cands.push((set, score));
    }
    rank(cands, beam)
}

/// Gold sets with an out-of-vocabulary precursor never match.
pub fn exact_match_at_k(preds: &SetPrediction, gold: &[usize], has_oov: bool, k: usize) -> bool {
    !has_oov && preds.candidates.iter().take(k).any(|(s, _)| s.as_slice() == gold)
}

/// Macro and micro recall of predictions thresholded at `threshold`.
/// Macro averages over classes with at least one positive.
pub fn recalls(probs: &[Vec<f64>], labels: &[Vec<f64>], threshold: f64) -> (f64, f64) {
    let mut tp: BTreeMap<usize, usize> = BTreeMap::new();
    let mut pos: BTreeMap<usize, usize> = BTreeMap::new();
    for (p, y) in probs.iter().zip(labels) {
        for (i, (&pi, &yi)) in p.iter().zip(y).enumerate() {
            if yi > 0.5 {
                *pos.entry(i).or_default() += 1;
                if pi >= threshold {
                    *tp.entry(i).or_default() += 1;
                }
            }
        }
    }
    if pos.is_empty() {
        return (0.0, 0.0);
    }
    let macro_r = pos
        .iter()
        .map(|(i, &n)| *tp.get(i).unwrap_or(&0) as f64 / n as f64)
        .sum::<f64>()
        / pos.len() as f64;
    let micro_r = tp.values().sum::<usize>() as f64 / pos.values().sum::<usize>() as f64;
    (macro_r, micro_r)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseMode {
    /// The test precursor set equals some training precursor set.
    #[default]
    Exact,
    /// The test precursor set is contained in some training precursor set.
    SubsetRelation,
}

impl std::str::FromStr for CaseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(CaseMode::Exact),
            "subset-relation" => Ok(CaseMode::SubsetRelation),
            other => Err(format!("unknown case mode `{other}` (expected exact|subset-relation)")),
        }
    }
}

/// Indices into the test list, partitioned.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSplit {
    pub subset: Vec<usize>,
    pub new: Vec<usize>,
}

pub fn case_split(test: &[Recipe], registry: &BTreeSet<Vec<String>>, mode: CaseMode) -> CaseSplit {
    let mut out = CaseSplit::default();
    for (i, r) in test.iter().enumerate() {
        let known = match mode {
            CaseMode::Exact => registry.contains(&r.precursor_set),
            CaseMode::SubsetRelation => registry
                .iter()
                .any(|s| r.precursor_set.iter().all(|p| s.binary_search(p).is_ok())),
        };
        if known {
            out.subset.push(i);
        } else {
            out.new.push(i);
        }
    }
    out
}

/// Training precursor sets, each a sorted list of canonical formulas.
pub fn registry<'a>(train: impl IntoIterator<Item = &'a Recipe>) -> BTreeSet<Vec<String>> {
    train.into_iter().map(|r| r.precursor_set.clone()).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub top_k_acc: BTreeMap<usize, f64>,
    pub macro_recall: f64,
    pub micro_recall: f64,
    pub oov_miss_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: Metrics,
    pub case_breakdown: BTreeMap<String, Metrics>,
}

fn metrics(probs: &[Vec<f64>], recipes: &[Recipe], preds: &[SetPrediction], idx: &[usize]) -> Metrics {
    let n = idx.len();
    let mut top_k_acc = BTreeMap::new();
    for k in TOP_KS {
        let hits = idx
            .iter()
            .filter(|&&i| exact_match_at_k(&preds[i], &recipes[i].precursor_ids, recipes[i].has_oov(), k))
            .count();
        top_k_acc.insert(k, if n == 0 { 0.0 } else { hits as f64 / n as f64 });
    }
    let p: Vec<Vec<f64>> = idx.iter().map(|&i| probs[i].clone()).collect();
    let y: Vec<Vec<f64>> = idx.iter().map(|&i| recipes[i].label()).collect();
    let (macro_recall, micro_recall) = recalls(&p, &y, 0.5);
    Metrics {
        n,
        top_k_acc,
        macro_recall,
        micro_recall,
        oov_miss_count: idx.iter().filter(|&&i| recipes[i].has_oov()).count(),
    }
}

/// Metrics over `recipes` given per-recipe precursor probabilities.
pub fn evaluate(
    probs: &[Vec<f64>],
    recipes: &[Recipe],
    registry: &BTreeSet<Vec<String>>,
    decode: DecodeConfig,
    mode: CaseMode,
) -> EvalReport {
    let preds: Vec<SetPrediction> = probs
        .iter()
        .map(|p| enumerate_sets(p, decode.top_n, decode.max_size, decode.beam))
        .collect();
    let all: Vec<usize> = (0..recipes.len()).collect();
    let split = case_split(recipes, registry, mode);
    let mut case_breakdown = BTreeMap::new();
    case_breakdown.insert("subset".to_string(), metrics(probs, recipes, &preds, &split.subset));
    case_breakdown.insert("new".to_string(), metrics(probs, recipes, &preds, &split.new));
    EvalReport {
        overall: metrics(probs, recipes, &preds, &all),
        case_breakdown,
    }
}

/// Top-K exact-match accuracy alone.
pub fn top_k_accuracy(probs: &[Vec<f64>], recipes: &[Recipe], decode: DecodeConfig, k: usize) -> f64 {
    if recipes.is_empty() {
        return 0.0;
    }
    let hits = probs
        .iter()
        .zip(recipes)
        .filter(|(p, r)| {
            let preds = enumerate_sets(p, decode.top_n, decode.max_size, decode.beam.max(k));
            exact_match_at_k(&preds, &r.precursor_ids, r.has_oov(), k)
        })
        .count();
    hits as f64 / recipes.len() as f64
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut rows = vec![("all", &self.overall)];
        rows.extend(self.case_breakdown.iter().map(|(k, v)| (k.as_str(), v)));
        let mut out = format!(
            "{:<8} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>5}\n",
            "case", "n", "top1", "top3", "top5", "top10", "macroR", "microR", "oov"
        );
        for (name, m) in rows {
            let acc = |k| m.top_k_acc.get(&k).copied().unwrap_or(0.0);
            let _ = writeln!(
                out,
                "{:<8} {:>6} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>5}",
                name,
                m.n,
                acc(1),
                acc(3),
                acc(5),
                acc(10),
                m.macro_recall,
                m.micro_recall,
                m.oov_miss_count
            );
        }
        out
    }
}
