//! End-to-end training and evaluation in memory: both retrievers, the
//! retrieval tables, the fusion model and the test report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::chemio::{
    fallback_element_features, Composition, ElementFeatureTable, KnowledgeBase, LabeledDataset, Recipe, SplitMode,
    DEFAULT_FEATURE_DIM,
};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::evalkit::{evaluate, registry, top_k_accuracy, CaseMode, EvalReport};
use crate::fusion::{build_examples, fit, FusionConfig, FusionModel, FusionReport, MaterialCache};
use crate::mpc::{train_mpc, MpcConfig, MpcIndex, MpcModel, MpcReport};
use crate::nre::{
    pretrain_then_finetune, DeltaHTable, EnergyTable, FilterMode, NreConfig, NreModel, NreRetriever, TransferReport,
};
use crate::retrieval::{RetrievalOptions, RetrievalTable};

/// Every setting of a run. Stored beside each artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub split: SplitMode,
    pub feature_dim: usize,
    pub mpc: MpcConfig,
    pub nre: NreConfig,
    pub fusion: FusionConfig,
    pub filter: FilterMode,
    pub case_mode: CaseMode,
    /// Train the energy model on the computed table first.
    pub pretrain: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            split: SplitMode::Year,
            feature_dim: DEFAULT_FEATURE_DIM,
            mpc: MpcConfig::default(),
            nre: NreConfig::default(),
            fusion: FusionConfig::default(),
            filter: FilterMode::Subset,
            case_mode: CaseMode::Exact,
            pretrain: true,
        }
    }
}

impl PipelineConfig {
    /// Propagate the top-level seed and feature width into every stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.mpc.seed = c.seed;
        c.nre.seed = c.seed;
        c.fusion.seed = c.seed;
        c.nre.encoder.feature_dim = c.feature_dim;
        c.fusion.encoder.feature_dim = c.feature_dim;
        c
    }

    /// Small widths for quick runs and tests.
    pub fn small(hidden: usize) -> Self {
        let enc = EncoderConfig {
            feature_dim: 32,
            hidden,
            layers: 2,
        };
        PipelineConfig {
            feature_dim: 32,
            mpc: MpcConfig {
                dim: hidden,
                hidden,
                epochs: 100,
                ..Default::default()
            },
            nre: NreConfig {
                encoder: enc,
                epochs: 100,
                patience: 20,
                ..Default::default()
            },
            fusion: FusionConfig {
                encoder: enc,
                lr: 1e-3,
                batch_size: 32,
                epochs: 100,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn features(&self) -> ElementFeatureTable {
        fallback_element_features(self.feature_dim, 0)
    }
}

/// References of every query recipe from both retrievers. Knowledge-base
/// recipes never retrieve themselves; the MPC side also skips entries
/// whose composition equals the query's.
pub fn retrieval_tables(
    kb: &KnowledgeBase,
    queries: &[&Recipe],
    mpc: (&MpcModel, &MpcIndex),
    nre: &NreRetriever,
    k: usize,
) -> Result<(RetrievalTable, RetrievalTable)> {
    let delta = delta_h_table(nre, queries)?;
    Ok((mpc_table(kb, queries, mpc.0, mpc.1, k)?, nre_table(kb, queries, &delta, k)?))
}

fn query_options(kb: &KnowledgeBase, r: &Recipe) -> RetrievalOptions {
    if kb.contains_id(&r.id) {
        RetrievalOptions::excluding(r.id.clone())
    } else {
        RetrievalOptions::default()
    }
}

pub fn mpc_table(kb: &KnowledgeBase, queries: &[&Recipe], model: &MpcModel, index: &MpcIndex, k: usize) -> Result<RetrievalTable> {
    let comps: Vec<_> = queries.iter().map(|r| &r.target).collect();
    let reps = model.embed(&comps);
    let mut rows = BTreeMap::new();
    for (i, r) in queries.iter().enumerate() {
        let opts = RetrievalOptions {
            skip_same_composition: true,
            ..query_options(kb, r)
        };
        rows.insert(r.id.clone(), index.search(&reps.row(i).to_vec(), r.target.vector(), k, &opts)?);
    }
    Ok(RetrievalTable {
        retriever: "mpc".into(),
        k,
        rows,
    })
}

/// `ΔH` of every query against every knowledge-base recipe, rows in query
/// order.
pub fn delta_h_table(nre: &NreRetriever, queries: &[&Recipe]) -> Result<DeltaHTable> {
    let targets: Vec<(&str, &Composition)> = queries.iter().map(|r| (r.id.as_str(), &r.target)).collect();
    DeltaHTable::build(nre, &targets)
}

pub fn nre_table(kb: &KnowledgeBase, queries: &[&Recipe], delta: &DeltaHTable, k: usize) -> Result<RetrievalTable> {
    let mut rows = BTreeMap::new();
    for (i, r) in queries.iter().enumerate() {
        rows.insert(r.id.clone(), delta.retrieve(i, kb, &r.target, k, &query_options(kb, r))?);
    }
    Ok(RetrievalTable {
        retriever: "nre".into(),
        k,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mpc: MpcReport,
    pub nre: TransferReport,
    pub fusion: FusionReport,
    pub train_top1: f64,
    pub test: EvalReport,
}

/// Trained retrievers and the reference tables of every recipe.
pub struct Retrievers {
    pub mpc: MpcModel,
    pub mpc_index: MpcIndex,
    pub mpc_report: MpcReport,
    pub nre: NreModel,
    pub nre_report: TransferReport,
    pub mpc_table: RetrievalTable,
    pub nre_table: RetrievalTable,
}

pub fn train_retrievers(
    data: &LabeledDataset,
    dft: &EnergyTable,
    exp: &EnergyTable,
    cfg: &PipelineConfig,
) -> Result<Retrievers> {
    let cfg = cfg.resolved();
    let kb = &data.kb;
    let (mpc, mpc_report) = train_mpc(kb.recipes(), &data.valid, kb.vocab().len(), &cfg.mpc)?;
    info!(epochs = mpc_report.epochs_run, best = mpc_report.best_epoch, "mpc trained");
    let mpc_index = MpcIndex::build(&mpc, kb)?;
    let (nre, nre_report) = pretrain_then_finetune(dft, exp, &cfg.nre, &cfg.features(), cfg.pretrain)?;
    info!(
        finetuned_mae = ?nre_report.finetuned_test_mae,
        exp_only_mae = nre_report.exp_only_test_mae,
        "nre trained"
    );
    let queries: Vec<&Recipe> = kb.recipes().iter().chain(&data.valid).chain(&data.test).collect();
    let retriever = NreRetriever::new(&nre, kb, cfg.filter)?;
    let (mpc_table, nre_table) = retrieval_tables(kb, &queries, (&mpc, &mpc_index), &retriever, cfg.fusion.k)?;
    info!(queries = queries.len(), "retrieval tables built");
    Ok(Retrievers {
        mpc,
        mpc_index,
        mpc_report,
        nre,
        nre_report,
        mpc_table,
        nre_table,
    })
}

/// Fusion model trained on fixed reference tables, with its scores.
pub struct FusionOutcome {
    pub model: FusionModel,
    pub report: FusionReport,
    pub train_top1: f64,
    pub test: EvalReport,
}

/// Train the fusion model on `data` and evaluate on its test split.
pub fn run_fusion(
    data: &LabeledDataset,
    mpc_table: &RetrievalTable,
    nre_table: &RetrievalTable,
    cfg: &PipelineConfig,
) -> Result<FusionOutcome> {
    let cfg = cfg.resolved();
    let features = cfg.features();
    let kb = &data.kb;
    let mut model = FusionModel::new(kb.vocab().len(), cfg.fusion, features.clone())?;
    let mut cache = MaterialCache::default();
    let k = cfg.fusion.k;
    let train = build_examples(kb.recipes(), kb, mpc_table, nre_table, k, &features, &mut cache)?;
    let valid = build_examples(&data.valid, kb, mpc_table, nre_table, k, &features, &mut cache)?;
    let test = build_examples(&data.test, kb, mpc_table, nre_table, k, &features, &mut cache)?;
    let report = fit(&mut model, &cache, &train, &valid, &data.valid)?;
    info!(epochs = report.epochs_run, best = report.best_epoch, "fusion trained");

    let train_probs = model.predict(&cache, &train)?;
    let train_top1 = top_k_accuracy(&train_probs, kb.recipes(), cfg.fusion.decode, 1);
    let test_probs = model.predict(&cache, &test)?;
    let test = evaluate(&test_probs, &data.test, &registry(kb.recipes()), cfg.fusion.decode, cfg.case_mode);
    Ok(FusionOutcome {
        model,
        report,
        train_top1,
        test,
    })
}

/// Train everything on `data` and evaluate on its test split.
pub fn run_experiment(
    data: &LabeledDataset,
    dft: &EnergyTable,
    exp: &EnergyTable,
    cfg: &PipelineConfig,
) -> Result<(Retrievers, FusionOutcome, ExperimentReport)> {
    let r = train_retrievers(data, dft, exp, cfg)?;
    let f = run_fusion(data, &r.mpc_table, &r.nre_table, cfg)?;
    let report = ExperimentReport {
        mpc: r.mpc_report.clone(),
        nre: r.nre_report.clone(),
        fusion: f.report.clone(),
        train_top1: f.train_top1,
        test: f.test.clone(),
    };
    Ok((r, f, report))
}
