//! Masked precursor completion retriever.
//!
//! A two-layer MLP maps a composition vector to `m`. A learnable precursor
//! embedding matrix `P` (one row per vocabulary entry) is masked by a
//! randomly thinned copy of the label vector; `m` attends over the surviving
//! rows to give `s`, and precursor `i` is scored `σ(s·p_i)`. The model is
//! trained to reconstruct the full label vector. Retrieval ranks the
//! knowledge base by cosine similarity of `m`.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::chemio::{Composition, KnowledgeBase, Recipe};
use crate::elements::N_ELEMENTS;
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Mlp};
use crate::retrieval::{top_k, RetrievalOptions, RetrievalSet};
use crate::tape::{sigmoid, Mat, NodeId, ParamId, ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Embedding width `d'`.
    pub dim: usize,
    /// Hidden width of the composition MLP.
    pub hidden: usize,
    /// Probability that each positive label is hidden from the attention.
    pub p_mask: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            dim: 256,
            hidden: 256,
            p_mask: 0.5,
            epochs: 300,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 0.01,
            patience: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcParams {
    pub composition_mlp: Mlp,
    pub precursor_embeddings: ParamId,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub n_labels: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct MpcModel {
    pub store: ParamStore,
    pub params: MpcParams,
}

/// Inputs for one masked training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub x: Mat,
    pub y: Mat,
    pub y_tilde: Mat,
}

impl MaskedBatch {
    /// `mask[i][j]` is true where precursor `j` stays visible for sample `i`.
    pub fn mask(&self) -> Array2<bool> {
        self.y_tilde.mapv(|v| v != 0.0)
    }
}

/// Hide each positive label independently with probability `p_mask`.
pub fn perturb_labels(y: &[f64], p_mask: f64, rng: &mut impl Rng) -> Vec<f64> {
    y.iter()
        .map(|&v| {
            if v != 0.0 && rng.random::<f64>() < p_mask {
                0.0
            } else {
                v
            }
        })
        .collect()
}

impl MpcModel {
    pub fn new(n_labels: usize, config: &MpcConfig) -> Result<Self> {
        if n_labels == 0 || config.dim == 0 || config.hidden == 0 {
            return Err(Error::Config("mpc needs positive label count and widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let composition_mlp = Mlp::new(&mut store, "mpc.composition", N_ELEMENTS, config.hidden, d, &mut rng);
        let bound = 1.0 / (d as f64).sqrt();
        let mut init = |rows: usize, cols: usize| {
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
        };
        let precursor_embeddings = store.add("mpc.precursors", init(n_labels, d));
        let query = store.add("mpc.attn.query", init(d, d));
        let key = store.add("mpc.attn.key", init(d, d));
        let value = store.add("mpc.attn.value", init(d, d));
        Ok(MpcModel {
            store,
            params: MpcParams {
                composition_mlp,
                precursor_embeddings,
                query,
                key,
                value,
                n_labels,
                dim: d,
            },
        })
    }

    /// Rebuild the parameter layout and adopt `store` after a layout check.
    pub fn from_store(n_labels: usize, config: &MpcConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(n_labels, config)?;
        model.store.check_layout(&store)?;
        model.store = store;
        Ok(model)
    }

    /// `B × d'` composition representations `m = M(x)`.
    pub fn represent(&self, t: &mut Tape, x: NodeId) -> NodeId {
        self.params.composition_mlp.forward(t, x)
    }

    /// Logits `s · p_i` for a batch. Rows of `P` whose `y_tilde` entry is 0
    /// are excluded from the attention; a row with nothing visible uses
    /// `s = m`.
    pub fn forward(&self, t: &mut Tape, x: &Mat, y_tilde: &Mat) -> NodeId {
        let p = &self.params;
        let xi = t.constant(x.clone());
        let m = self.represent(t, xi);
        let emb = t.param(p.precursor_embeddings);
        let wq = t.param(p.query);
        let wk = t.param(p.key);
        let wv = t.param(p.value);
        let q = t.matmul(m, wq);
        let k = t.matmul(emb, wk);
        let v = t.matmul(emb, wv);
        let scores = t.matmul_t(q, k);
        let scores = t.scale(scores, 1.0 / (p.dim as f64).sqrt());
        let mask = y_tilde.mapv(|v| if v != 0.0 { 1.0 } else { 0.0 });
        let weights = t.masked_softmax(scores, &mask);
        let attended = t.matmul(weights, v);
        let empty: Vec<f64> = mask
            .rows()
            .into_iter()
            .map(|r| if r.sum() == 0.0 { 1.0 } else { 0.0 })
            .collect();
        let passthrough = Array2::from_shape_fn((x.nrows(), p.dim), |(i, _)| empty[i]);
        let m_empty = t.mul_const(m, passthrough);
        let s = t.add(attended, m_empty);
        t.matmul_t(s, emb)
    }

    /// Per-precursor probabilities for one composition vector.
    pub fn predict(&self, x: &[f64], y_tilde: &[f64]) -> Result<Vec<f64>> {
        if x.len() != N_ELEMENTS {
            return Err(Error::dims("composition vector", N_ELEMENTS, x.len()));
        }
        if y_tilde.len() != self.params.n_labels {
            return Err(Error::dims("perturbed label vector", self.params.n_labels, y_tilde.len()));
        }
        let xm = Array2::from_shape_vec((1, N_ELEMENTS), x.to_vec()).expect("shape");
        let ym = Array2::from_shape_vec((1, y_tilde.len()), y_tilde.to_vec()).expect("shape");
        let mut t = Tape::new(&self.store);
        let logits = self.forward(&mut t, &xm, &ym);
        Ok(t.value(logits).iter().map(|&z| sigmoid(z)).collect())
    }

    /// Mean BCE of the reconstruction against `batch.y`, plus gradients.
    pub fn loss_and_grads(&self, batch: &MaskedBatch) -> (f64, crate::tape::Gradients) {
        let mut t = Tape::new(&self.store);
        let logits = self.forward(&mut t, &batch.x, &batch.y_tilde);
        let loss = t.bce_with_logits(logits, batch.y.clone());
        (t.value(loss)[[0, 0]], t.backward(loss))
    }

    pub fn loss(&self, batch: &MaskedBatch) -> f64 {
        let mut t = Tape::new(&self.store);
        let logits = self.forward(&mut t, &batch.x, &batch.y_tilde);
        let loss = t.bce_with_logits(logits, batch.y.clone());
        t.value(loss)[[0, 0]]
    }

    /// `m = M(x)` for each composition, unnormalized.
    pub fn embed(&self, comps: &[&Composition]) -> Mat {
        let x = composition_matrix(comps);
        let mut t = Tape::new(&self.store);
        let xi = t.constant(x);
        let m = self.represent(&mut t, xi);
        t.value(m).clone()
    }
}

fn composition_matrix(comps: &[&Composition]) -> Mat {
    let mut x = Mat::zeros((comps.len(), N_ELEMENTS));
    for (mut row, c) in x.rows_mut().into_iter().zip(comps) {
        row.assign(&ndarray::ArrayView1::from(c.vector()));
    }
    x
}

fn label_matrix(recipes: &[&Recipe], n_labels: usize) -> Mat {
    let mut y = Mat::zeros((recipes.len(), n_labels));
    for (i, r) in recipes.iter().enumerate() {
        for &j in &r.precursor_ids {
            y[[i, j]] = 1.0;
        }
    }
    y
}

/// Build a masked batch, thinning labels with `rng`.
pub fn masked_batch(recipes: &[&Recipe], n_labels: usize, p_mask: f64, rng: &mut impl Rng) -> MaskedBatch {
    let comps: Vec<&Composition> = recipes.iter().map(|r| &r.target).collect();
    let x = composition_matrix(&comps);
    let y = label_matrix(recipes, n_labels);
    let mut y_tilde = y.clone();
    for mut row in y_tilde.rows_mut() {
        let thinned = perturb_labels(row.as_slice().expect("standard layout"), p_mask, rng);
        row.assign(&ndarray::ArrayView1::from(&thinned));
    }
    MaskedBatch { x, y, y_tilde }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MpcReport {
    pub train_losses: Vec<f64>,
    pub valid_losses: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Train on `train`, early-stopping on the reconstruction loss of `valid`
/// (or of `train` when `valid` is empty). Deterministic for a fixed seed.
pub fn train_mpc(train: &[Recipe], valid: &[Recipe], n_labels: usize, config: &MpcConfig) -> Result<(MpcModel, MpcReport)> {
    if train.is_empty() {
        return Err(Error::Empty("mpc training set"));
    }
    if !(0.0..=1.0).contains(&config.p_mask) {
        return Err(Error::Config(format!("p_mask {} outside [0, 1]", config.p_mask)));
    }
    let mut model = MpcModel::new(n_labels, config)?;
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d70_635f_7472_6169);
    let monitor: Vec<&Recipe> = if valid.is_empty() {
        train.iter().collect()
    } else {
        valid.iter().collect()
    };
    // Fixed masks so monitored losses are comparable across epochs.
    let monitor_batch = masked_batch(
        &monitor,
        n_labels,
        config.p_mask,
        &mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x7661_6c69_64),
    );

    let mut report = MpcReport::default();
    let mut best = (f64::INFINITY, model.store.clone());
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch_size = config.batch_size.max(1);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let recipes: Vec<&Recipe> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = masked_batch(&recipes, n_labels, config.p_mask, &mut rng);
            let (loss, grads) = model.loss_and_grads(&batch);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * recipes.len() as f64;
            opt.step(&mut model.store, &grads);
        }
        report.train_losses.push(total / train.len() as f64);
        let monitored = model.loss(&monitor_batch);
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
    Ok((model, report))
}

/// Fraction of label entries reproduced at threshold 0.5 when the model
/// sees masks thinned with `p_mask`.
pub fn reconstruction_accuracy(model: &MpcModel, recipes: &[Recipe], p_mask: f64, seed: u64) -> f64 {
    if recipes.is_empty() {
        return 0.0;
    }
    let refs: Vec<&Recipe> = recipes.iter().collect();
    let batch = masked_batch(&refs, model.params.n_labels, p_mask, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut t = Tape::new(&model.store);
    let logits = model.forward(&mut t, &batch.x, &batch.y_tilde);
    let z = t.value(logits);
    let correct = z
        .iter()
        .zip(batch.y.iter())
        .filter(|(z, y)| (sigmoid(**z) >= 0.5) == (**y == 1.0))
        .count();
    correct as f64 / z.len() as f64
}

fn normalize_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|x| x / n);
        }
    }
}

/// Unit-normalized representations of every knowledge-base target.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcIndex {
    pub reps: Mat,
    pub recipe_ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpcIndexSidecar {
    pub dim: usize,
    pub count: usize,
    pub checksum: String,
}

impl MpcIndex {
    pub fn build(model: &MpcModel, kb: &KnowledgeBase) -> Result<Self> {
        if kb.is_empty() {
            return Err(Error::Empty("knowledge base"));
        }
        let comps: Vec<&Composition> = kb.recipes().iter().map(|r| &r.target).collect();
        let reps = model.embed(&comps);
        Ok(Self::from_reps(reps, kb))
    }

    /// Wrap precomputed representations; rows are normalized here.
    pub fn from_reps(mut reps: Mat, kb: &KnowledgeBase) -> Self {
        assert_eq!(reps.nrows(), kb.len(), "one representation per recipe");
        normalize_rows(&mut reps);
        MpcIndex {
            reps,
            recipe_ids: kb.recipes().iter().map(|r| r.id.clone()).collect(),
            vectors: kb.recipes().iter().map(|r| r.target.vector().to_vec()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.reps.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.reps.ncols()
    }

    /// Rank entries by cosine similarity to `query` (any scale).
    pub fn search(&self, query: &[f64], query_vector: &[f64], k: usize, opts: &RetrievalOptions) -> Result<RetrievalSet> {
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::dims("mpc query", self.dim(), query.len()));
        }
        let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        let q = ndarray::Array1::from_iter(query.iter().map(|x| if norm > 0.0 { x / norm } else { 0.0 }));
        let sims = self.reps.dot(&q);
        let scored = sims
            .iter()
            .enumerate()
            .filter(|(j, _)| opts.exclude_id.as_deref() != Some(self.recipe_ids[*j].as_str()))
            .filter(|(j, _)| !(opts.skip_same_composition && self.vectors[*j] == query_vector))
            .map(|(j, s)| (j, *s))
            .collect();
        Ok(top_k(scored, k, false))
    }

    pub fn save(&self, path: &Path) -> Result<MpcIndexSidecar> {
        let checksum = artifact::write_matrix(path, &self.reps)?;
        Ok(MpcIndexSidecar {
            dim: self.dim(),
            count: self.len(),
            checksum,
        })
    }

    pub fn load(path: &Path, sidecar: &MpcIndexSidecar, kb: &KnowledgeBase) -> Result<Self> {
        let reps = artifact::read_matrix(path, Some(&sidecar.checksum))?;
        if reps.nrows() != sidecar.count || reps.ncols() != sidecar.dim {
            return Err(Error::Corrupt {
                path: path.into(),
                reason: "shape disagrees with sidecar".into(),
            });
        }
        if reps.nrows() != kb.len() {
            return Err(Error::dims("mpc index rows vs knowledge base", kb.len(), reps.nrows()));
        }
        Ok(MpcIndex {
            reps,
            recipe_ids: kb.recipes().iter().map(|r| r.id.clone()).collect(),
            vectors: kb.recipes().iter().map(|r| r.target.vector().to_vec()).collect(),
        })
    }
}

/// Top-`k` knowledge-base references for `target`, most similar first.
pub fn retrieve_mpc(
    model: &MpcModel,
    index: &MpcIndex,
    target: &Composition,
    k: usize,
    opts: &RetrievalOptions,
) -> Result<RetrievalSet> {
    let m = model.embed(&[target]);
    let row = m.index_axis(Axis(0), 0).to_vec();
    index.search(&row, target.vector(), k, opts)
}
