//! Reaction-energy retriever.
//!
//! A graph-encoder regressor predicts per-atom formation energy from
//! composition. It is pretrained on a large computed table and fine-tuned
//! on a small experimental one. For a target `t` and a knowledge-base recipe
//! with precursor set `S`, the reaction enthalpy is approximated as
//! `ΔH = H(t) − mean_{p∈S} H(p)`, and references are the eligible recipes
//! with the most negative `ΔH`. A recipe is eligible when every element of
//! its precursors occurs in the target or is one of C, H, O, N.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::chemio::{build_graph, parse_formula, Composition, CompositionGraph, ElementFeatureTable, KnowledgeBase};
use crate::elements::COMMON_ELEMENTS;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Linear};
use crate::retrieval::{top_k, RetrievalOptions, RetrievalSet};
use crate::tape::{Mat, ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyKind {
    Dft,
    Experimental,
}

/// Formation energies in eV/atom, one per distinct composition.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTable {
    pub kind: EnergyKind,
    pub entries: Vec<(Composition, f64)>,
    /// Rows dropped because a later row had the same composition.
    pub duplicates_replaced: usize,
}

#[derive(Debug, Deserialize, Serialize)]
struct EnergyRow {
    formula: String,
    energy_per_atom: f64,
}

impl EnergyTable {
    /// Deduplicate by canonical composition; the last occurrence wins and
    /// keeps the position of the first.
    pub fn new(kind: EnergyKind, rows: Vec<(Composition, f64)>) -> Result<Self> {
        let mut entries: Vec<(Composition, f64)> = Vec::with_capacity(rows.len());
        let mut pos: HashMap<String, usize> = HashMap::new();
        let mut duplicates_replaced = 0;
        for (c, e) in rows {
            if !e.is_finite() {
                return Err(Error::Config(format!("non-finite energy for {c}")));
            }
            match pos.get(&c.canonical_formula()) {
                Some(&i) => {
                    entries[i] = (c, e);
                    duplicates_replaced += 1;
                }
                None => {
                    pos.insert(c.canonical_formula(), entries.len());
                    entries.push((c, e));
                }
            }
        }
        Ok(EnergyTable {
            kind,
            entries,
            duplicates_replaced,
        })
    }

    /// CSV with header `formula,energy_per_atom`.
    pub fn load_csv(path: &Path, kind: EnergyKind) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["formula", "energy_per_atom"] {
            return Err(Error::Config(format!(
                "{}: header must be `formula,energy_per_atom`",
                path.display()
            )));
        }
        let mut rows = Vec::new();
        for row in reader.deserialize() {
            let row: EnergyRow = row?;
            rows.push((parse_formula(&row.formula)?, row.energy_per_atom));
        }
        Self::new(kind, rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (c, e) in &self.entries {
            w.serialize(EnergyRow {
                formula: c.formula().to_string(),
                energy_per_atom: *e,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Seeded 80/10/10 split into (train, valid, test).
    pub fn split(&self, seed: u64) -> (Vec<(Composition, f64)>, Vec<(Composition, f64)>, Vec<(Composition, f64)>) {
        let n = self.entries.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = n * 8 / 10;
        let n_valid = n / 10;
        let pick = |r: &[usize]| r.iter().map(|&i| self.entries[i].clone()).collect::<Vec<_>>();
        (
            pick(&order[..n_train]),
            pick(&order[n_train..n_train + n_valid]),
            pick(&order[n_train + n_valid..]),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NreConfig {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for NreConfig {
    fn default() -> Self {
        NreConfig {
            encoder: EncoderConfig::default(),
            epochs: 1000,
            patience: 50,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Formation-energy regressor: graph encoder followed by a linear head.
#[derive(Debug, Clone)]
pub struct NreModel {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub head: Linear,
    pub features: ElementFeatureTable,
}

impl NreModel {
    pub fn new(config: &NreConfig, features: ElementFeatureTable) -> Result<Self> {
        if features.dim() != config.encoder.feature_dim {
            return Err(Error::dims("element feature table", config.encoder.feature_dim, features.dim()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, "nre.encoder", config.encoder, &mut rng)?;
        let head = Linear::new(&mut store, "nre.head", config.encoder.hidden, 1, &mut rng);
        Ok(NreModel {
            store,
            encoder,
            head,
            features,
        })
    }

    pub fn from_store(config: &NreConfig, features: ElementFeatureTable, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, features)?;
        model.store.check_layout(&store)?;
        model.store = store;
        Ok(model)
    }

    pub fn graph(&self, c: &Composition) -> Result<CompositionGraph> {
        build_graph(c, &self.features)
    }

    fn forward(&self, t: &mut Tape, graphs: &[&CompositionGraph]) -> Result<crate::tape::NodeId> {
        let g = self.encoder.forward(t, graphs)?;
        Ok(self.head.forward(t, g))
    }

    /// Predicted formation energy (eV/atom) of one composition.
    pub fn predict_energy(&self, c: &Composition) -> Result<f64> {
        Ok(self.predict_many(&[c])?[0])
    }

    /// Batched prediction; values equal per-item [`predict_energy`](Self::predict_energy).
    pub fn predict_many(&self, comps: &[&Composition]) -> Result<Vec<f64>> {
        let graphs = comps.iter().map(|c| self.graph(c)).collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(256) {
            let refs: Vec<&CompositionGraph> = chunk.iter().collect();
            let mut t = Tape::new(&self.store);
            let y = self.forward(&mut t, &refs)?;
            out.extend(t.value(y).iter().copied());
        }
        Ok(out)
    }

    pub fn mae(&self, data: &[(Composition, f64)]) -> Result<f64> {
        if data.is_empty() {
            return Ok(f64::NAN);
        }
        let comps: Vec<&Composition> = data.iter().map(|d| &d.0).collect();
        let pred = self.predict_many(&comps)?;
        Ok(pred.iter().zip(data).map(|(p, d)| (p - d.1).abs()).sum::<f64>() / data.len() as f64)
    }

    /// Mean squared error on a batch and its gradients.
    pub fn loss_and_grads(&self, graphs: &[&CompositionGraph], targets: &[f64]) -> Result<(f64, crate::tape::Gradients)> {
        let mut t = Tape::new(&self.store);
        let y = self.forward(&mut t, graphs)?;
        let target = Array2::from_shape_vec((targets.len(), 1), targets.to_vec()).expect("column");
        let loss = t.mse(y, target);
        Ok((t.value(loss)[[0, 0]], t.backward(loss)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_losses: Vec<f64>,
    pub valid_losses: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Minimize squared error on `train`, early-stopping on `valid` MSE (or
/// training MSE when `valid` is empty). The best checkpoint is restored.
pub fn fit_energy(
    model: &mut NreModel,
    train: &[(Composition, f64)],
    valid: &[(Composition, f64)],
    config: &NreConfig,
) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::Empty("energy training set"));
    }
    let graphs = train.iter().map(|(c, _)| model.graph(c)).collect::<Result<Vec<_>>>()?;
    let valid_graphs = valid.iter().map(|(c, _)| model.graph(c)).collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6e72_655f_6669_74);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = FitReport::default();
    let mut best = (f64::INFINITY, model.store.clone());
    let mut since_best = 0;
    let batch = config.batch_size.max(1);
    let eval = |model: &NreModel, gs: &[CompositionGraph], data: &[(Composition, f64)]| -> Result<f64> {
        let mut total = 0.0;
        for (gc, dc) in gs.chunks(256).zip(data.chunks(256)) {
            let refs: Vec<&CompositionGraph> = gc.iter().collect();
            let mut t = Tape::new(&model.store);
            let y = model.forward(&mut t, &refs)?;
            total += t.value(y).iter().zip(dc).map(|(p, d)| (p - d.1).powi(2)).sum::<f64>();
        }
        Ok(total / data.len() as f64)
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let refs: Vec<&CompositionGraph> = chunk.iter().map(|&i| &graphs[i]).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| train[i].1).collect();
            let (loss, grads) = model.loss_and_grads(&refs, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * chunk.len() as f64;
            opt.step(&mut model.store, &grads);
        }
        report.train_losses.push(total / train.len() as f64);
        let monitored = if valid.is_empty() {
            eval(model, &graphs, train)?
        } else {
            eval(model, &valid_graphs, valid)?
        };
        if !monitored.is_finite() {
            return Err(Error::Divergence { epoch, loss: monitored });
        }
        report.valid_losses.push(monitored);
        report.epochs_run = epoch + 1;
        if monitored < best.0 {
            best = (monitored, model.store.clone());
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    model.store = best.1;
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub pretrained: bool,
    pub dft_test_mae: Option<f64>,
    pub finetuned_test_mae: Option<f64>,
    pub exp_only_test_mae: f64,
    /// Checksum of the best pretraining checkpoint.
    pub pretrain_checksum: Option<String>,
    /// Checksum of the parameters fine-tuning started from.
    pub finetune_start_checksum: Option<String>,
    pub pretrain: Option<FitReport>,
    pub finetune: Option<FitReport>,
    pub exp_only: FitReport,
}

/// Pretrain on `dft`, fine-tune on `exp`, and train an experimental-only
/// model from scratch for comparison. Both tables are split 80/10/10 with
/// the config seed. Returns the fine-tuned model, or the experimental-only
/// model when `pretrain` is false.
pub fn pretrain_then_finetune(
    dft: &EnergyTable,
    exp: &EnergyTable,
    config: &NreConfig,
    features: &ElementFeatureTable,
    pretrain: bool,
) -> Result<(NreModel, TransferReport)> {
    if exp.is_empty() || (pretrain && dft.is_empty()) {
        return Err(Error::Empty("energy table"));
    }
    let (exp_train, exp_valid, exp_test) = exp.split(config.seed);
    let mut report = TransferReport {
        pretrained: pretrain,
        ..Default::default()
    };

    let mut exp_only = NreModel::new(config, features.clone())?;
    report.exp_only = fit_energy(&mut exp_only, &exp_train, &exp_valid, config)?;
    report.exp_only_test_mae = exp_only.mae(&exp_test)?;

    if !pretrain {
        return Ok((exp_only, report));
    }

    let (dft_train, dft_valid, dft_test) = dft.split(config.seed);
    let mut model = NreModel::new(config, features.clone())?;
    report.pretrain = Some(fit_energy(&mut model, &dft_train, &dft_valid, config)?);
    report.dft_test_mae = Some(model.mae(&dft_test)?);
    report.pretrain_checksum = Some(model.store.checksum());

    let mut tuned = model.clone();
    report.finetune_start_checksum = Some(tuned.store.checksum());
    report.finetune = Some(fit_energy(&mut tuned, &exp_train, &exp_valid, config)?);
    report.finetuned_test_mae = Some(tuned.mae(&exp_test)?);
    Ok((tuned, report))
}

/// `H(target) − mean_p H(p)` with energies from `energy`.
pub fn delta_h_from(target_energy: f64, precursor_energies: &[f64]) -> Result<f64> {
    if precursor_energies.is_empty() {
        return Err(Error::Empty("precursor set"));
    }
    let mean = precursor_energies.iter().sum::<f64>() / precursor_energies.len() as f64;
    Ok(target_energy - mean)
}

pub fn delta_h(target: &Composition, precursors: &[&Composition], model: &NreModel) -> Result<f64> {
    if precursors.is_empty() {
        return Err(Error::Empty("precursor set"));
    }
    let mut comps = vec![target];
    comps.extend_from_slice(precursors);
    let e = model.predict_many(&comps)?;
    delta_h_from(e[0], &e[1..])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    /// Precursor elements ⊆ target elements ∪ {C, H, O, N}.
    #[default]
    Subset,
    /// Subset, and the precursors together contain every target element.
    Coverage,
}

impl std::str::FromStr for FilterMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "subset" => Ok(FilterMode::Subset),
            "coverage" => Ok(FilterMode::Coverage),
            other => Err(format!("unknown filter `{other}` (expected subset|coverage)")),
        }
    }
}

pub fn element_filter(target: &Composition, precursors: &[&Composition], mode: FilterMode) -> bool {
    let allowed: BTreeSet<&str> = target.elements().into_iter().chain(COMMON_ELEMENTS).collect();
    let used: BTreeSet<&str> = precursors.iter().flat_map(|p| p.elements()).collect();
    if !used.is_subset(&allowed) {
        return false;
    }
    match mode {
        FilterMode::Subset => true,
        FilterMode::Coverage => target.elements().iter().all(|e| used.contains(e)),
    }
}

fn recipe_precursors(kb: &KnowledgeBase, j: usize) -> Vec<&Composition> {
    kb.get(j)
        .precursor_ids
        .iter()
        .map(|&p| kb.vocab().composition(p))
        .collect()
}

/// Predicted precursor-set energies of every knowledge-base recipe,
/// computed once and reused for every query.
#[derive(Debug, Clone)]
pub struct NreRetriever<'a> {
    model: &'a NreModel,
    kb: &'a KnowledgeBase,
    set_energy: Vec<f64>,
    mode: FilterMode,
}

impl<'a> NreRetriever<'a> {
    pub fn new(model: &'a NreModel, kb: &'a KnowledgeBase, mode: FilterMode) -> Result<Self> {
        let vocab_comps: Vec<&Composition> = (0..kb.vocab().len()).map(|i| kb.vocab().composition(i)).collect();
        let vocab_energy = model.predict_many(&vocab_comps)?;
        let set_energy = (0..kb.len())
            .map(|j| {
                let ids = &kb.get(j).precursor_ids;
                if ids.is_empty() {
                    return f64::NAN;
                }
                ids.iter().map(|&p| vocab_energy[p]).sum::<f64>() / ids.len() as f64
            })
            .collect();
        Ok(NreRetriever {
            model,
            kb,
            set_energy,
            mode,
        })
    }

    pub fn set_energies(&self) -> &[f64] {
        &self.set_energy
    }

    /// `ΔH` of every knowledge-base recipe against a target of energy
    /// `target_energy`; ineligible entries are `None`.
    pub fn row(&self, target: &Composition, target_energy: f64) -> Vec<Option<f64>> {
        (0..self.kb.len())
            .map(|j| {
                let precursors = recipe_precursors(self.kb, j);
                let ok = !precursors.is_empty() && element_filter(target, &precursors, self.mode);
                ok.then(|| target_energy - self.set_energy[j])
            })
            .collect()
    }

    pub fn retrieve(&self, target: &Composition, k: usize, opts: &RetrievalOptions) -> Result<RetrievalSet> {
        let e = self.model.predict_energy(target)?;
        rank_row(&self.row(target, e), self.kb, target, k, opts)
    }
}

fn rank_row(
    row: &[Option<f64>],
    kb: &KnowledgeBase,
    target: &Composition,
    k: usize,
    opts: &RetrievalOptions,
) -> Result<RetrievalSet> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let scored = row
        .iter()
        .enumerate()
        .filter_map(|(j, v)| v.map(|v| (j, v)))
        .filter(|(j, _)| opts.exclude_id.as_deref() != Some(kb.get(*j).id.as_str()))
        .filter(|(j, _)| !(opts.skip_same_composition && kb.get(*j).target.vector() == target.vector()))
        .collect();
    Ok(top_k(scored, k, true))
}

/// Most-negative-`ΔH` references for `target` among eligible recipes.
pub fn retrieve_nre(
    target: &Composition,
    kb: &KnowledgeBase,
    model: &NreModel,
    k: usize,
    opts: &RetrievalOptions,
    mode: FilterMode,
) -> Result<RetrievalSet> {
    NreRetriever::new(model, kb, mode)?.retrieve(target, k, opts)
}

/// Precomputed `ΔH` for query targets × knowledge-base recipes. Ineligible
/// cells hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaHTable {
    pub target_ids: Vec<String>,
    pub values: Mat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaHSidecar {
    pub n_targets: usize,
    pub n_kb: usize,
    pub checksum: String,
    pub filter: FilterMode,
    pub target_ids: Vec<String>,
}

impl DeltaHTable {
    pub fn build(retriever: &NreRetriever, targets: &[(&str, &Composition)]) -> Result<Self> {
        let comps: Vec<&Composition> = targets.iter().map(|t| t.1).collect();
        let energies = retriever.model.predict_many(&comps)?;
        let n_kb = retriever.kb.len();
        let mut values = Mat::from_elem((targets.len(), n_kb), f64::NAN);
        for (i, ((_, c), e)) in targets.iter().zip(&energies).enumerate() {
            for (j, v) in retriever.row(c, *e).into_iter().enumerate() {
                if let Some(v) = v {
                    values[[i, j]] = v;
                }
            }
        }
        Ok(DeltaHTable {
            target_ids: targets.iter().map(|t| t.0.to_string()).collect(),
            values,
        })
    }

    pub fn get(&self, target_row: usize, kb_index: usize) -> Option<f64> {
        let v = self.values[[target_row, kb_index]];
        v.is_finite().then_some(v)
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.target_ids.iter().position(|t| t == id)
    }

    pub fn retrieve(
        &self,
        target_row: usize,
        kb: &KnowledgeBase,
        target: &Composition,
        k: usize,
        opts: &RetrievalOptions,
    ) -> Result<RetrievalSet> {
        let row: Vec<Option<f64>> = (0..self.values.ncols()).map(|j| self.get(target_row, j)).collect();
        rank_row(&row, kb, target, k, opts)
    }

    pub fn save(&self, path: &Path, filter: FilterMode) -> Result<DeltaHSidecar> {
        let checksum = artifact::write_matrix(path, &self.values)?;
        Ok(DeltaHSidecar {
            n_targets: self.values.nrows(),
            n_kb: self.values.ncols(),
            checksum,
            filter,
            target_ids: self.target_ids.clone(),
        })
    }

    pub fn load(path: &Path, sidecar: &DeltaHSidecar) -> Result<Self> {
        let values = artifact::read_matrix(path, Some(&sidecar.checksum))?;
        if values.dim() != (sidecar.n_targets, sidecar.n_kb) || sidecar.target_ids.len() != sidecar.n_targets {
            return Err(Error::Corrupt {
                path: path.into(),
                reason: "shape disagrees with sidecar".into(),
            });
        }
        Ok(DeltaHTable {
            target_ids: sidecar.target_ids.clone(),
            values,
        })
    }
}
