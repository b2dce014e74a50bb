//! Retrieval fusion and the final precursor classifier.
//!
//! Each retrieved reference `g_r` is conditioned on the target,
//! `g'_r = φ1(g_r ‖ g_t)`, refined by `S` rounds of projection-free
//! self-attention among the references, and summarized by `C` rounds of
//! cross-attention with the target as query. The MPC and NRE branches have
//! separate `φ1`. The classifier reads `g_t ‖ c_MPC ‖ c_NRE`.
//!
//! Batches of targets are processed together: the reference rows of all
//! targets are stacked and attention is restricted to each target's own
//! block by a mask.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::chemio::{build_graph, Composition, CompositionGraph, ElementFeatureTable, KnowledgeBase, Recipe};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::evalkit::{top_k_accuracy, DecodeConfig};
use crate::nn::{AdamW, AdamWConfig, Mlp};
use crate::retrieval::RetrievalTable;
use crate::tape::{sigmoid, Gradients, Mat, NodeId, ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub encoder: EncoderConfig,
    /// Self-attention rounds `S`; 0 skips self-attention.
    pub self_layers: usize,
    /// Cross-attention rounds `C`.
    pub cross_layers: usize,
    /// References per retriever.
    pub k: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation Top-5 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// When false the two retrieval summaries are replaced by zeros.
    pub use_retrieval: bool,
    pub decode: DecodeConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            encoder: EncoderConfig::default(),
            self_layers: 1,
            cross_layers: 2,
            k: 3,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 128,
            epochs: 500,
            patience: 30,
            seed: 0,
            use_retrieval: true,
            decode: DecodeConfig::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cross_layers == 0 {
            return Err(Error::Config("cross-attention needs at least one layer".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `softmax(q kᵀ / √d) · k`, rows of `q` attending over all rows of `k`.
/// With no keys the result is zero.
pub fn attend(q: &Mat, keys: &Mat) -> Mat {
    if keys.nrows() == 0 {
        return Mat::zeros((q.nrows(), q.ncols()));
    }
    attention_weights(q, keys).dot(keys)
}

/// Row-stochastic attention weights `softmax(q kᵀ / √d)`.
pub fn attention_weights(q: &Mat, keys: &Mat) -> Mat {
    let d = q.ncols() as f64;
    let mut a = q.dot(&keys.t()) / d.sqrt();
    for mut row in a.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row /= total;
    }
    a
}

/// `S` rounds of `G ← softmax(G Gᵀ / √D) G`.
pub fn self_attend(g: &Mat, s: usize) -> Mat {
    let mut g = g.clone();
    for _ in 0..s {
        g = attend(&g, &g);
    }
    g
}

/// `C` rounds of `q ← softmax(q Gᵀ / √D) G`, keys and values fixed.
pub fn cross_attend(g_t: &Mat, refs: &Mat, c: usize) -> Mat {
    let mut q = g_t.clone();
    for _ in 0..c {
        q = attend(&q, refs);
    }
    q
}

/// Distinct materials of a batch or dataset, with their graphs.
#[derive(Debug, Clone, Default)]
pub struct MaterialCache {
    index: HashMap<String, usize>,
    graphs: Vec<CompositionGraph>,
}

impl MaterialCache {
    pub fn insert(&mut self, c: &Composition, features: &ElementFeatureTable) -> Result<usize> {
        let key = c.canonical_formula();
        if let Some(&i) = self.index.get(&key) {
            return Ok(i);
        }
        self.graphs.push(build_graph(c, features)?);
        self.index.insert(key, self.graphs.len() - 1);
        Ok(self.graphs.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }
}

/// A target with its references, as indices into a [`MaterialCache`].
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub target: usize,
    pub mpc_refs: Vec<usize>,
    pub nre_refs: Vec<usize>,
    pub label: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub n_labels: usize,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub phi_mpc: Mlp,
    pub phi_nre: Mlp,
    pub classifier: Mlp,
    pub features: ElementFeatureTable,
}

/// Intermediate nodes of one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FusionTrace {
    pub target: NodeId,
    pub mpc: NodeId,
    pub nre: NodeId,
    pub logits: NodeId,
}

impl FusionModel {
    pub fn new(n_labels: usize, config: FusionConfig, features: ElementFeatureTable) -> Result<Self> {
        config.validate()?;
        if n_labels == 0 {
            return Err(Error::Empty("precursor vocabulary"));
        }
        if features.dim() != config.encoder.feature_dim {
            return Err(Error::dims("element feature table", config.encoder.feature_dim, features.dim()));
        }
        let d = config.encoder.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, "fusion.encoder", config.encoder, &mut rng)?;
        let phi_mpc = Mlp::new(&mut store, "fusion.phi_mpc", 2 * d, d, d, &mut rng);
        let phi_nre = Mlp::new(&mut store, "fusion.phi_nre", 2 * d, d, d, &mut rng);
        let classifier = Mlp::new(&mut store, "fusion.classifier", 3 * d, 2 * n_labels, n_labels, &mut rng);
        Ok(FusionModel {
            config,
            n_labels,
            store,
            encoder,
            phi_mpc,
            phi_nre,
            classifier,
            features,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.encoder.hidden
    }

    /// Conditioned, self-attended and cross-attended summary for one
    /// retriever branch. `owner[r]` is the batch row that reference row `r`
    /// belongs to.
    fn branch(&self, t: &mut Tape, phi: &Mlp, g_t: NodeId, refs: NodeId, owner: &[usize], batch: usize) -> NodeId {
        let d = self.dim();
        let n = owner.len();
        if n == 0 {
            return t.constant(Mat::zeros((batch, d)));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let gt_rows = t.gather(g_t, owner.to_vec());
        let pair = t.concat(&[refs, gt_rows]);
        let mut g = phi.forward(t, pair);
        let block = Array2::from_shape_fn((n, n), |(i, j)| f64::from(owner[i] == owner[j]));
        for _ in 0..self.config.self_layers {
            let s = t.matmul_t(g, g);
            let s = t.scale(s, scale);
            let a = t.masked_softmax(s, &block);
            g = t.matmul(a, g);
        }
        let own = Array2::from_shape_fn((batch, n), |(b, r)| f64::from(owner[r] == b));
        let mut q = g_t;
        for _ in 0..self.config.cross_layers {
            let s = t.matmul_t(q, g);
            let s = t.scale(s, scale);
            let a = t.masked_softmax(s, &own);
            q = t.matmul(a, g);
        }
        q
    }

    /// Logits for a batch; every material is encoded once.
    pub fn forward(&self, t: &mut Tape, cache: &MaterialCache, batch: &[&Example]) -> Result<FusionTrace> {
        let mut local: BTreeMap<usize, usize> = BTreeMap::new();
        let mut order = Vec::new();
        let mut slot = |i: usize| {
            *local.entry(i).or_insert_with(|| {
                order.push(i);
                order.len() - 1
            })
        };
        let targets: Vec<usize> = batch.iter().map(|e| slot(e.target)).collect();
        let mut mpc = (Vec::new(), Vec::new());
        let mut nre = (Vec::new(), Vec::new());
        for (b, e) in batch.iter().enumerate() {
            for &r in &e.mpc_refs {
                mpc.0.push(slot(r));
                mpc.1.push(b);
            }
            for &r in &e.nre_refs {
                nre.0.push(slot(r));
                nre.1.push(b);
            }
        }
        let graphs: Vec<&CompositionGraph> = order.iter().map(|&i| &cache.graphs[i]).collect();
        let reps = self.encoder.forward(t, &graphs)?;
        let g_t = t.gather(reps, targets);
        let n = batch.len();
        let (c_mpc, c_nre) = if self.config.use_retrieval {
            let r_mpc = t.gather(reps, mpc.0);
            let r_nre = t.gather(reps, nre.0);
            (
                self.branch(t, &self.phi_mpc, g_t, r_mpc, &mpc.1, n),
                self.branch(t, &self.phi_nre, g_t, r_nre, &nre.1, n),
            )
        } else {
            let z = Mat::zeros((n, self.dim()));
            (t.constant(z.clone()), t.constant(z))
        };
        let joined = t.concat(&[g_t, c_mpc, c_nre]);
        let logits = self.classifier.forward(t, joined);
        Ok(FusionTrace {
            target: g_t,
            mpc: c_mpc,
            nre: c_nre,
            logits,
        })
    }

    pub fn loss_and_grads(&self, cache: &MaterialCache, batch: &[&Example]) -> Result<(f64, Gradients)> {
        let mut t = Tape::new(&self.store);
        let tr = self.forward(&mut t, cache, batch)?;
        let y = labels(batch, self.n_labels)?;
        let loss = t.bce_with_logits(tr.logits, y);
        Ok((t.value(loss)[[0, 0]], t.backward(loss)))
    }

    pub fn loss(&self, cache: &MaterialCache, examples: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in examples.chunks(256) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let mut t = Tape::new(&self.store);
            let tr = self.forward(&mut t, cache, &refs)?;
            let y = labels(&refs, self.n_labels)?;
            let loss = t.bce_with_logits(tr.logits, y);
            total += t.value(loss)[[0, 0]] * chunk.len() as f64;
        }
        Ok(total / examples.len().max(1) as f64)
    }

    /// Per-precursor probabilities for every example.
    pub fn predict(&self, cache: &MaterialCache, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(256) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let mut t = Tape::new(&self.store);
            let tr = self.forward(&mut t, cache, &refs)?;
            out.extend(t.value(tr.logits).rows().into_iter().map(|r| r.iter().map(|&z| sigmoid(z)).collect()));
        }
        Ok(out)
    }

    /// Probabilities for one target given its reference materials.
    pub fn predict_one(&self, target: &Composition, mpc_refs: &[&Composition], nre_refs: &[&Composition]) -> Result<Vec<f64>> {
        let mut cache = MaterialCache::default();
        let ex = Example {
            target: cache.insert(target, &self.features)?,
            mpc_refs: mpc_refs.iter().map(|c| cache.insert(c, &self.features)).collect::<Result<_>>()?,
            nre_refs: nre_refs.iter().map(|c| cache.insert(c, &self.features)).collect::<Result<_>>()?,
            label: Vec::new(),
        };
        Ok(self.predict(&cache, &[ex])?.remove(0))
    }

    pub fn checkpoint_meta(&self, vocab_hash: &str) -> FusionCheckpoint {
        FusionCheckpoint {
            config: self.config,
            n_labels: self.n_labels,
            vocab_hash: vocab_hash.to_string(),
            params_checksum: String::new(),
        }
    }

    /// Write parameters to `path` and return the metadata to store beside it.
    pub fn save(&self, path: &Path, vocab_hash: &str) -> Result<FusionCheckpoint> {
        let mut meta = self.checkpoint_meta(vocab_hash);
        meta.params_checksum = artifact::write_params(path, &self.store)?;
        Ok(meta)
    }

    pub fn load(path: &Path, meta: &FusionCheckpoint, features: ElementFeatureTable) -> Result<Self> {
        let store = artifact::read_params(path, Some(&meta.params_checksum))?;
        let mut model = FusionModel::new(meta.n_labels, meta.config, features)?;
        model.store.check_layout(&store)?;
        model.store = store;
        Ok(model)
    }
}

fn labels(batch: &[&Example], n_labels: usize) -> Result<Mat> {
    let mut y = Mat::zeros((batch.len(), n_labels));
    for (b, e) in batch.iter().enumerate() {
        if e.label.len() != n_labels {
            return Err(Error::dims("label vector", n_labels, e.label.len()));
        }
        y.row_mut(b).assign(&ndarray::ArrayView1::from(&e.label));
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionCheckpoint {
    pub config: FusionConfig,
    pub n_labels: usize,
    pub vocab_hash: String,
    pub params_checksum: String,
}

/// Turn recipes into examples, looking references up in both tables.
/// Reference materials are the target compositions of the retrieved
/// knowledge-base recipes. Recipes without a row in either table are
/// reported together.
pub fn build_examples(
    recipes: &[Recipe],
    kb: &KnowledgeBase,
    mpc: &RetrievalTable,
    nre: &RetrievalTable,
    k: usize,
    features: &ElementFeatureTable,
    cache: &mut MaterialCache,
) -> Result<Vec<Example>> {
    let mut missing: Vec<String> = Vec::new();
    for r in recipes {
        if mpc.get(&r.id).is_none() || nre.get(&r.id).is_none() {
            missing.push(r.id.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingRetrieval(missing));
    }
    recipes
        .iter()
        .map(|r| {
            let target = cache.insert(&r.target, features)?;
            let mut refs = |table: &RetrievalTable| -> Result<Vec<usize>> {
                table.rows[&r.id]
                    .indices
                    .iter()
                    .take(k)
                    .map(|&j| cache.insert(&kb.get(j).target, features))
                    .collect()
            };
            Ok(Example {
                target,
                mpc_refs: refs(mpc)?,
                nre_refs: refs(nre)?,
                label: r.label(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub train_losses: Vec<f64>,
    pub valid_losses: Vec<f64>,
    pub valid_top5: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Train on the knowledge-base recipes with BCE, monitoring validation
/// Top-5 exact match (validation loss breaks ties). Returns the best
/// checkpoint.
pub fn train_full(
    kb: &KnowledgeBase,
    valid: &[Recipe],
    mpc: &RetrievalTable,
    nre: &RetrievalTable,
    config: FusionConfig,
    features: &ElementFeatureTable,
) -> Result<(FusionModel, FusionReport)> {
    let mut model = FusionModel::new(kb.vocab().len(), config, features.clone())?;
    let mut cache = MaterialCache::default();
    let train = build_examples(kb.recipes(), kb, mpc, nre, config.k, features, &mut cache)?;
    let valid_ex = build_examples(valid, kb, mpc, nre, config.k, features, &mut cache)?;
    let report = fit(&mut model, &cache, &train, &valid_ex, valid)?;
    Ok((model, report))
}

/// Optimize `model` on prepared examples. `valid_recipes` supplies the gold
/// sets for Top-5; when empty the training set is monitored instead.
pub fn fit(
    model: &mut FusionModel,
    cache: &MaterialCache,
    train: &[Example],
    valid: &[Example],
    valid_recipes: &[Recipe],
) -> Result<FusionReport> {
    if train.is_empty() {
        return Err(Error::Empty("training recipes"));
    }
    let cfg = model.config;
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6675_7369_6f6e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = FusionReport::default();
    let mut best: Option<(f64, f64, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = model.loss_and_grads(cache, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * chunk.len() as f64;
            opt.step(&mut model.store, &grads);
        }
        report.train_losses.push(total / train.len() as f64);
        let (top5, vloss) = if valid.is_empty() {
            (0.0, report.train_losses[epoch])
        } else {
            let probs = model.predict(cache, valid)?;
            (
                top_k_accuracy(&probs, valid_recipes, cfg.decode, 5),
                model.loss(cache, valid)?,
            )
        };
        report.valid_top5.push(top5);
        report.valid_losses.push(vloss);
        report.epochs_run = epoch + 1;
        let improved = match &best {
            None => true,
            Some((b5, bl, _)) => top5 > *b5 || (top5 == *b5 && vloss < *bl),
        };
        if improved {
            best = Some((top5, vloss, model.store.clone()));
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, _, store)) = best {
        model.store = store;
    }
    Ok(report)
}
