//! Deterministic synthetic corpus: recipes whose precursor sets follow an
//! element-to-source template rule, plus computed and experimental energy
//! tables drawn from one smooth function of composition.
//!
//! Each pool element has one or two source compounds. An element with two
//! sources uses the second whenever its partner element is also present in
//! the target, so targets that share elements tend to share precursors.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::chemio::{parse_formula, Composition, RecipeLine};
use crate::elements::atomic_number;
use crate::error::{Error, Result};

/// Cations the generator draws from.
pub const CANDIDATE_ELEMENTS: [&str; 37] = [
    "Li", "Na", "K", "Rb", "Cs", "Be", "Mg", "Ca", "Sr", "Ba", "Sc", "Y", "La", "Ti", "Zr", "Hf", "V", "Nb", "Ta",
    "Cr", "Mo", "W", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Al", "Ga", "In", "Sn", "Bi", "Ce", "Nd", "Sm", "Gd",
];

const SOURCE_TEMPLATES: [&str; 5] = ["{E}O", "{E}CO3", "{E}(NO3)2", "{E}(OH)2", "{E}2O3"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_recipes: usize,
    pub n_elements: usize,
    /// Vocabulary size `l`; between `n_elements` and `2 · n_elements`.
    pub vocab_size: usize,
    pub rule_seed: u64,
    /// Probability that a recipe's precursor set breaks the rule.
    pub noise_rate: f64,
    pub year_range: (i32, i32),
    pub n_dft: usize,
    pub n_exp: usize,
    /// Offset of experimental energies from the computed ones (eV/atom).
    pub exp_bias: f64,
    pub exp_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_recipes: 500,
            n_elements: 12,
            vocab_size: 24,
            rule_seed: 7,
            noise_rate: 0.0,
            year_range: (2000, 2020),
            n_dft: 2000,
            n_exp: 100,
            exp_bias: 0.15,
            exp_noise: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_recipes < 10 {
            return bad("synthetic corpus needs at least 10 recipes".into());
        }
        if self.vocab_size < 4 {
            return bad("vocabulary size must be at least 4".into());
        }
        if self.n_elements < 2 || self.n_elements > CANDIDATE_ELEMENTS.len() {
            return bad(format!("element count must be in 2..={}", CANDIDATE_ELEMENTS.len()));
        }
        if self.vocab_size < self.n_elements || self.vocab_size > 2 * self.n_elements {
            return bad(format!(
                "vocabulary size {} must lie in {}..={} for {} elements",
                self.vocab_size,
                self.n_elements,
                2 * self.n_elements,
                self.n_elements
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad("noise rate must be in [0, 1]".into());
        }
        if self.year_range.0 > self.year_range.1 {
            return bad("year range is reversed".into());
        }
        Ok(())
    }
}

/// The element-to-source mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRule {
    pub elements: Vec<String>,
    /// One or two source formulas per element.
    pub sources: BTreeMap<String, Vec<String>>,
    /// Presence of the partner switches an element to its second source.
    pub partner: BTreeMap<String, String>,
}

impl TemplateRule {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut elements: Vec<&str> = CANDIDATE_ELEMENTS.choose_multiple(rng, cfg.n_elements).copied().collect();
        elements.sort_by_key(|e| atomic_number(e));
        let n_double = cfg.vocab_size - cfg.n_elements;
        let mut double: Vec<usize> = (0..elements.len()).collect();
        double.shuffle(rng);
        let double: BTreeSet<usize> = double.into_iter().take(n_double).collect();
        let mut sources = BTreeMap::new();
        let mut partner = BTreeMap::new();
        for (i, e) in elements.iter().enumerate() {
            let mut t: Vec<&str> = SOURCE_TEMPLATES.to_vec();
            t.shuffle(rng);
            let n = if double.contains(&i) { 2 } else { 1 };
            sources.insert(e.to_string(), t[..n].iter().map(|t| t.replace("{E}", e)).collect());
            if n == 2 {
                let others: Vec<&&str> = elements.iter().filter(|o| *o != e).collect();
                partner.insert(e.to_string(), others.choose(rng).expect("two or more elements").to_string());
            }
        }
        TemplateRule {
            elements: elements.iter().map(|e| e.to_string()).collect(),
            sources,
            partner,
        }
    }

    pub fn vocabulary(&self) -> BTreeSet<String> {
        self.sources.values().flatten().cloned().collect()
    }

    fn source_for(&self, element: &str, present: &BTreeSet<&str>) -> &str {
        let s = &self.sources[element];
        match self.partner.get(element) {
            Some(p) if present.contains(p.as_str()) => &s[1],
            _ => &s[0],
        }
    }

    /// Precursor formulas the rule assigns to `target`.
    pub fn apply(&self, target: &Composition) -> BTreeSet<String> {
        let present: BTreeSet<&str> = target.elements().into_iter().collect();
        present
            .iter()
            .filter(|e| self.sources.contains_key(**e))
            .map(|e| self.source_for(e, &present).to_string())
            .collect()
    }
}

/// Generated corpus held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub rule: TemplateRule,
    pub recipes: Vec<RecipeLine>,
    pub dft: Vec<(String, f64)>,
    pub exp: Vec<(String, f64)>,
}

/// Ground-truth formation energy: per-element terms plus pairwise terms,
/// both weighted by molar fraction.
#[derive(Debug, Clone)]
struct EnergyFunction {
    unary: BTreeMap<u8, f64>,
    pair_seed: u64,
}

impl EnergyFunction {
    fn pair(&self, a: u8, b: u8) -> f64 {
        let (a, b) = (a.min(b), a.max(b));
        let mut rng = ChaCha8Rng::seed_from_u64(self.pair_seed ^ (u64::from(a) << 8 | u64::from(b)));
        rng.random_range(-1.5..0.5)
    }

    fn eval(&self, c: &Composition) -> f64 {
        let x: Vec<(u8, f64)> = c.atomic_numbers().map(|z| (z, c.vector()[z as usize - 1])).collect();
        let mut e = 0.0;
        for (i, &(zi, xi)) in x.iter().enumerate() {
            e += xi * self.unary[&zi];
            for &(zj, xj) in &x[i + 1..] {
                e += 4.0 * xi * xj * self.pair(zi, zj);
            }
        }
        e
    }
}

fn render(counts: &[(&str, u32)]) -> String {
    counts
        .iter()
        .map(|(e, n)| if *n == 1 { e.to_string() } else { format!("{e}{n}") })
        .collect()
}

fn random_oxide(rng: &mut ChaCha8Rng, pool: &[&str], max_cations: usize) -> String {
    let k = rng.random_range(1..=max_cations.min(pool.len()));
    let mut chosen: Vec<&str> = pool.choose_multiple(rng, k).copied().collect();
    chosen.sort_by_key(|e| atomic_number(e));
    let mut counts: Vec<(&str, u32)> = chosen.iter().map(|e| (*e, rng.random_range(1..=3))).collect();
    counts.push(("O", rng.random_range(1..=6)));
    render(&counts)
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rule_seed);
    let rule = TemplateRule::new(cfg, &mut rng);
    let pool: Vec<&str> = rule.elements.iter().map(String::as_str).collect();

    let mut recipes = Vec::with_capacity(cfg.n_recipes);
    for i in 0..cfg.n_recipes {
        let target = random_oxide(&mut rng, &pool, 4);
        let comp = parse_formula(&target)?;
        let mut set = rule.apply(&comp);
        if rng.random_bool(cfg.noise_rate) {
            // swap one element's source for its alternative, if it has one
            let present: BTreeSet<&str> = comp.elements().into_iter().collect();
            let swappable: Vec<&str> = present.iter().copied().filter(|e| rule.partner.contains_key(*e)).collect();
            if let Some(e) = swappable.choose(&mut rng) {
                let current = rule.source_for(e, &present).to_string();
                let other = rule.sources[*e].iter().find(|s| **s != current).expect("two sources").clone();
                set.remove(&current);
                set.insert(other);
            }
        }
        recipes.push(RecipeLine {
            id: format!("syn-{i:05}"),
            target_formula: target,
            precursor_formulas: set.into_iter().collect(),
            year: Some(rng.random_range(cfg.year_range.0..=cfg.year_range.1)),
        });
    }

    let mut energy_elements: Vec<&str> = pool.clone();
    energy_elements.extend(["O", "C", "H", "N"]);
    let unary = energy_elements
        .iter()
        .map(|e| {
            let z = atomic_number(e).expect("known element");
            let v = if ["O", "C", "H", "N"].contains(e) { 0.0 } else { rng.random_range(-0.5..0.0) };
            (z, v)
        })
        .collect();
    let energy = EnergyFunction {
        unary,
        pair_seed: rng.random(),
    };

    // computed table covers the vocabulary, then random oxides
    let mut seen = BTreeSet::new();
    let mut dft = Vec::with_capacity(cfg.n_dft);
    let mut candidates = rule.vocabulary().into_iter().collect::<Vec<_>>().into_iter();
    let mut attempts = 0;
    while dft.len() < cfg.n_dft && attempts < cfg.n_dft * 50 {
        attempts += 1;
        let f = candidates.next().unwrap_or_else(|| random_oxide(&mut rng, &pool, 3));
        let c = parse_formula(&f)?;
        if seen.insert(c.canonical_formula()) {
            dft.push((f, energy.eval(&c)));
        }
    }

    let noise = Normal::new(0.0, cfg.exp_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut exp_seen = BTreeSet::new();
    let mut exp = Vec::with_capacity(cfg.n_exp);
    attempts = 0;
    while exp.len() < cfg.n_exp && attempts < cfg.n_exp * 50 {
        attempts += 1;
        let f = random_oxide(&mut rng, &pool, 3);
        let c = parse_formula(&f)?;
        if exp_seen.insert(c.canonical_formula()) {
            exp.push((f, energy.eval(&c) + cfg.exp_bias + noise.sample(&mut rng)));
        }
    }

    Ok(SynthCorpus {
        rule,
        recipes,
        dft,
        exp,
    })
}

impl SynthCorpus {
    /// Write `recipes.jsonl`, `dft.csv`, `exp.csv` and `rule.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("recipes.jsonl");
        let mut out = Vec::new();
        for r in &self.recipes {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        for (name, rows) in [("dft.csv", &self.dft), ("exp.csv", &self.exp)] {
            let path = dir.join(name);
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut text = String::from("formula,energy_per_atom\n");
            for (formula, e) in rows {
                text.push_str(&format!("{formula},{e:?}\n"));
            }
            f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        crate::artifact::write_json(&dir.join("rule.json"), &self.rule)
    }
}
