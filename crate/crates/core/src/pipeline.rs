//! On-disk pipeline: one directory of artifacts, each stage reading the
//! outputs of earlier stages and writing its own with a JSON sidecar that
//! records the config, input checksums and output checksums.
//!
//! Layout under the workspace root:
//!
//! ```text
//! ingest/recipes.jsonl  ingest/rejects.jsonl  ingest/ingest.json
//! mpc/params.bin        mpc/index.bin         mpc/mpc.json
//! nre/params.bin        nre/nre.json
//! refs/mpc.json         refs/nre.json         refs/delta_h.bin  refs/refs.json
//! model/params.bin      model/model.json
//! eval/report.json
//! ```

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::artifact::{self, file_checksum, read_json, sha256_hex, write_json};
use crate::chemio::{load_recipes, parse_formula, split_dataset, IngestStats, LabeledDataset, Recipe};
use crate::evalkit::{enumerate_sets, evaluate, registry, top_k_accuracy, CaseMode, EvalReport};
use crate::error::{Error, Result};
use crate::experiment::{delta_h_table, mpc_table, nre_table, PipelineConfig};
use crate::fusion::{build_examples, fit, FusionCheckpoint, FusionModel, FusionReport, MaterialCache};
use crate::mpc::{retrieve_mpc, train_mpc, MpcIndex, MpcIndexSidecar, MpcModel, MpcReport};
use crate::nre::{pretrain_then_finetune, DeltaHSidecar, EnergyKind, EnergyTable, NreModel, NreRetriever, TransferReport};
use crate::retrieval::{RetrievalOptions, RetrievalTable};

/// Artifact directory guarded by a lock file for the lifetime of the value.
#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    lock: PathBuf,
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let lock = root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(Error::Locked(lock)),
            Err(e) => return Err(Error::io(&lock, e)),
        }
        Ok(Workspace {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn dir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    /// Read a stage sidecar, or explain which command produces it.
    fn require<T: DeserializeOwned>(&self, rel: &str, producer: &'static str) -> Result<Sidecar<T>> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::MissingArtifact {
                artifact: rel.to_string(),
                producer,
            });
        }
        let side: Sidecar<T> = read_json(&p)?;
        for (file, sum) in &side.outputs {
            let path = p.parent().expect("sidecar in a stage directory").join(file);
            if !path.exists() {
                return Err(Error::MissingArtifact {
                    artifact: path.display().to_string(),
                    producer,
                });
            }
            if &file_checksum(&path)? != sum {
                return Err(Error::StaleArtifact {
                    artifact: path.display().to_string(),
                    reason: "contents changed since it was written".into(),
                    producer,
                });
            }
        }
        Ok(side)
    }

    /// True when `rel` exists, was produced from the same fingerprint, and
    /// its outputs are intact.
    fn up_to_date(&self, rel: &str, fingerprint: &str) -> bool {
        self.require::<serde_json::Value>(rel, "")
            .map(|s| s.fingerprint == fingerprint)
            .unwrap_or(false)
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

/// Metadata written beside every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar<T> {
    pub stage: String,
    pub config: PipelineConfig,
    /// Checksums of the inputs the stage read.
    pub inputs: BTreeMap<String, String>,
    /// Checksums of the files the stage wrote, relative to the sidecar.
    pub outputs: BTreeMap<String, String>,
    pub fingerprint: String,
    pub details: T,
}

fn fingerprint(stage: &str, relevant: &impl Serialize, inputs: &BTreeMap<String, String>) -> Result<String> {
    let text = serde_json::to_string(&(stage, relevant, inputs))?;
    Ok(sha256_hex(text.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestDetails {
    pub source: String,
    pub stats: IngestStats,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub vocab_hash: String,
    pub vocab: Vec<String>,
}

pub const INGEST: &str = "ingest/ingest.json";
pub const MPC: &str = "mpc/mpc.json";
pub const NRE: &str = "nre/nre.json";
pub const REFS: &str = "refs/refs.json";
pub const MODEL: &str = "model/model.json";

fn log_outcome(stage: &str, outcome: Outcome) -> Outcome {
    match outcome {
        Outcome::Ran => info!(stage, "stage complete"),
        Outcome::UpToDate => info!(stage, "inputs unchanged; nothing to do"),
    }
    outcome
}

/// Parse the recipe file, split it and fix the vocabulary.
pub fn ingest(ws: &Workspace, recipes: &Path, cfg: &PipelineConfig, force: bool) -> Result<Outcome> {
    let mut inputs = BTreeMap::new();
    inputs.insert("recipes".to_string(), file_checksum(recipes)?);
    let fp = fingerprint("ingest", &(cfg.split, cfg.seed), &inputs)?;
    if !force && ws.up_to_date(INGEST, &fp) {
        return Ok(log_outcome("ingest", Outcome::UpToDate));
    }
    let dir = ws.dir("ingest")?;
    let ingested = load_recipes(recipes)?;
    let copy = dir.join("recipes.jsonl");
    std::fs::copy(recipes, &copy).map_err(|e| Error::io(&copy, e))?;
    ingested.write_rejects(&dir.join("rejects.jsonl"))?;
    let stats = ingested.stats.clone();
    let splits = split_dataset(ingested.records, cfg.split, cfg.seed)?;
    let data = LabeledDataset::from_splits(&splits)?;
    info!(
        records = stats.records,
        rejected = stats.rejected,
        train = data.kb.len(),
        valid = data.valid.len(),
        test = data.test.len(),
        "recipes ingested"
    );
    let mut outputs = BTreeMap::new();
    outputs.insert("recipes.jsonl".to_string(), file_checksum(&copy)?);
    write_json(
        &ws.path(INGEST),
        &Sidecar {
            stage: "ingest".into(),
            config: cfg.clone(),
            inputs,
            outputs,
            fingerprint: fp,
            details: IngestDetails {
                source: recipes.display().to_string(),
                stats,
                n_train: data.kb.len(),
                n_valid: data.valid.len(),
                n_test: data.test.len(),
                vocab_hash: data.vocab().hash(),
                vocab: data.vocab().formulas().to_vec(),
            },
        },
    )?;
    Ok(log_outcome("ingest", Outcome::Ran))
}

/// The labelled dataset as ingested, with the recipe-file checksum.
pub fn load_data(ws: &Workspace) -> Result<(LabeledDataset, String)> {
    let side: Sidecar<IngestDetails> = ws.require(INGEST, "ingest")?;
    let ingested = load_recipes(&ws.path("ingest/recipes.jsonl"))?;
    let splits = split_dataset(ingested.records, side.config.split, side.config.seed)?;
    let data = LabeledDataset::from_splits(&splits)?;
    if data.vocab().hash() != side.details.vocab_hash {
        return Err(Error::StaleArtifact {
            artifact: INGEST.into(),
            reason: "vocabulary no longer matches the ingested recipes".into(),
            producer: "ingest",
        });
    }
    Ok((data, side.outputs["recipes.jsonl"].clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcDetails {
    pub n_labels: usize,
    pub params_checksum: String,
    pub index: MpcIndexSidecar,
    pub report: MpcReport,
}

pub fn run_train_mpc(ws: &Workspace, cfg: &PipelineConfig, force: bool) -> Result<Outcome> {
    let cfg = cfg.resolved();
    let (data, recipes_sum) = load_data(ws)?;
    let inputs = BTreeMap::from([("recipes".to_string(), recipes_sum)]);
    let fp = fingerprint("train-mpc", &cfg.mpc, &inputs)?;
    if !force && ws.up_to_date(MPC, &fp) {
        return Ok(log_outcome("train-mpc", Outcome::UpToDate));
    }
    let dir = ws.dir("mpc")?;
    let n_labels = data.vocab().len();
    let (model, report) = train_mpc(data.kb.recipes(), &data.valid, n_labels, &cfg.mpc)?;
    info!(epochs = report.epochs_run, best = report.best_epoch, "mpc trained");
    let params_checksum = artifact::write_params(&dir.join("params.bin"), &model.store)?;
    let index = MpcIndex::build(&model, &data.kb)?.save(&dir.join("index.bin"))?;
    let outputs = BTreeMap::from([
        ("params.bin".to_string(), params_checksum.clone()),
        ("index.bin".to_string(), index.checksum.clone()),
    ]);
    write_json(
        &ws.path(MPC),
        &Sidecar {
            stage: "train-mpc".into(),
            config: cfg,
            inputs,
            outputs,
            fingerprint: fp,
            details: MpcDetails {
                n_labels,
                params_checksum,
                index,
                report,
            },
        },
    )?;
    Ok(log_outcome("train-mpc", Outcome::Ran))
}

fn load_mpc(ws: &Workspace, data: &LabeledDataset) -> Result<(MpcModel, MpcIndex, Sidecar<MpcDetails>)> {
    let side: Sidecar<MpcDetails> = ws.require(MPC, "train-mpc")?;
    let store = artifact::read_params(&ws.path("mpc/params.bin"), Some(&side.details.params_checksum))?;
    let model = MpcModel::from_store(side.details.n_labels, &side.config.mpc, store)?;
    let index = MpcIndex::load(&ws.path("mpc/index.bin"), &side.details.index, &data.kb)?;
    Ok((model, index, side))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NreDetails {
    pub params_checksum: String,
    pub dft_duplicates: usize,
    pub exp_duplicates: usize,
    pub report: TransferReport,
}

pub fn run_train_nre(ws: &Workspace, dft: &Path, exp: &Path, cfg: &PipelineConfig, force: bool) -> Result<Outcome> {
    let cfg = cfg.resolved();
    let inputs = BTreeMap::from([
        ("dft".to_string(), file_checksum(dft)?),
        ("exp".to_string(), file_checksum(exp)?),
    ]);
    let fp = fingerprint("train-nre", &(&cfg.nre, cfg.pretrain, cfg.feature_dim), &inputs)?;
    if !force && ws.up_to_date(NRE, &fp) {
        return Ok(log_outcome("train-nre", Outcome::UpToDate));
    }
    let dir = ws.dir("nre")?;
    let dft = EnergyTable::load_csv(dft, EnergyKind::Dft)?;
    let exp = EnergyTable::load_csv(exp, EnergyKind::Experimental)?;
    let (model, report) = pretrain_then_finetune(&dft, &exp, &cfg.nre, &cfg.features(), cfg.pretrain)?;
    info!(
        finetuned_mae = ?report.finetuned_test_mae,
        exp_only_mae = report.exp_only_test_mae,
        "nre trained"
    );
    let params_checksum = artifact::write_params(&dir.join("params.bin"), &model.store)?;
    write_json(
        &ws.path(NRE),
        &Sidecar {
            stage: "train-nre".into(),
            config: cfg,
            inputs,
            outputs: BTreeMap::from([("params.bin".to_string(), params_checksum.clone())]),
            fingerprint: fp,
            details: NreDetails {
                params_checksum,
                dft_duplicates: dft.duplicates_replaced,
                exp_duplicates: exp.duplicates_replaced,
                report,
            },
        },
    )?;
    Ok(log_outcome("train-nre", Outcome::Ran))
}

fn load_nre(ws: &Workspace) -> Result<(NreModel, Sidecar<NreDetails>)> {
    let side: Sidecar<NreDetails> = ws.require(NRE, "train-nre")?;
    let store = artifact::read_params(&ws.path("nre/params.bin"), Some(&side.details.params_checksum))?;
    let cfg = &side.config;
    let model = NreModel::from_store(&cfg.nre, cfg.features(), store)?;
    Ok((model, side))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Mpc,
    Nre,
    Both,
}

impl std::str::FromStr for Which {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mpc" => Ok(Which::Mpc),
            "nre" => Ok(Which::Nre),
            "both" => Ok(Which::Both),
            other => Err(format!("unknown retriever `{other}` (expected mpc|nre|both)")),
        }
    }
}

/// Per-retriever provenance of a reference table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub k: usize,
    pub recipes_checksum: String,
    pub retriever_checksum: String,
    pub table_checksum: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefsDetails {
    pub mpc: Option<TableMeta>,
    pub nre: Option<TableMeta>,
    pub delta_h: Option<DeltaHSidecar>,
}

fn queries(data: &LabeledDataset) -> Vec<&Recipe> {
    data.kb.recipes().iter().chain(&data.valid).chain(&data.test).collect()
}

/// Materialize reference tables for every train, valid and test recipe.
pub fn precompute_refs(ws: &Workspace, which: Which, k: usize, cfg: &PipelineConfig, force: bool) -> Result<Outcome> {
    let (data, recipes_sum) = load_data(ws)?;
    let mut inputs = BTreeMap::from([("recipes".to_string(), recipes_sum.clone())]);
    let want_mpc = which != Which::Nre;
    let want_nre = which != Which::Mpc;
    let mpc = if want_mpc { Some(load_mpc(ws, &data)?) } else { None };
    let nre = if want_nre { Some(load_nre(ws)?) } else { None };
    if let Some((_, _, s)) = &mpc {
        inputs.insert("mpc".into(), s.details.params_checksum.clone());
    }
    if let Some((_, s)) = &nre {
        inputs.insert("nre".into(), s.details.params_checksum.clone());
    }
    let fp = fingerprint("precompute-refs", &(which, k, cfg.filter), &inputs)?;
    if !force && ws.up_to_date(REFS, &fp) {
        return Ok(log_outcome("precompute-refs", Outcome::UpToDate));
    }
    let dir = ws.dir("refs")?;
    // keep the other retriever's table when only one is refreshed
    let previous: Option<Sidecar<RefsDetails>> = read_json(&ws.path(REFS)).ok();
    let mut details = previous.as_ref().map(|p| p.details.clone()).unwrap_or_default();
    let mut outputs = previous.map(|p| p.outputs).unwrap_or_default();
    let qs = queries(&data);
    if let Some((model, index, side)) = &mpc {
        let table = mpc_table(&data.kb, &qs, model, index, k)?;
        let path = dir.join("mpc.json");
        write_json(&path, &table)?;
        let sum = file_checksum(&path)?;
        outputs.insert("mpc.json".into(), sum.clone());
        details.mpc = Some(TableMeta {
            k,
            recipes_checksum: recipes_sum.clone(),
            retriever_checksum: side.details.params_checksum.clone(),
            table_checksum: sum,
        });
        info!(rows = table.rows.len(), k, "mpc references written");
    }
    if let Some((model, side)) = &nre {
        let retriever = NreRetriever::new(model, &data.kb, cfg.filter)?;
        let delta = delta_h_table(&retriever, &qs)?;
        let dh = delta.save(&dir.join("delta_h.bin"), cfg.filter)?;
        outputs.insert("delta_h.bin".into(), dh.checksum.clone());
        details.delta_h = Some(dh);
        let table = nre_table(&data.kb, &qs, &delta, k)?;
        let path = dir.join("nre.json");
        write_json(&path, &table)?;
        let sum = file_checksum(&path)?;
        outputs.insert("nre.json".into(), sum.clone());
        details.nre = Some(TableMeta {
            k,
            recipes_checksum: recipes_sum.clone(),
            retriever_checksum: side.details.params_checksum.clone(),
            table_checksum: sum,
        });
        info!(rows = table.rows.len(), k, "nre references written");
    }
    write_json(
        &ws.path(REFS),
        &Sidecar {
            stage: "precompute-refs".into(),
            config: cfg.clone(),
            inputs,
            outputs,
            fingerprint: fp,
            details,
        },
    )?;
    Ok(log_outcome("precompute-refs", Outcome::Ran))
}

/// Both reference tables, checked against the current recipes and
/// retriever checkpoints.
pub fn load_refs(ws: &Workspace, recipes_sum: &str, k: usize) -> Result<(RetrievalTable, RetrievalTable)> {
    let side: Sidecar<RefsDetails> = ws.require(REFS, "precompute-refs")?;
    let mpc_sum = ws.require::<MpcDetails>(MPC, "train-mpc")?.details.params_checksum;
    let nre_sum = ws.require::<NreDetails>(NRE, "train-nre")?.details.params_checksum;
    let check = |name: &str, meta: &Option<TableMeta>, retriever_sum: &str| -> Result<RetrievalTable> {
        let artifact = format!("refs/{name}.json");
        let stale = |reason: String| Error::StaleArtifact {
            artifact: artifact.clone(),
            reason,
            producer: "precompute-refs",
        };
        let meta = meta.as_ref().ok_or_else(|| Error::MissingArtifact {
            artifact: artifact.clone(),
            producer: "precompute-refs",
        })?;
        if meta.recipes_checksum != recipes_sum {
            return Err(stale("recipes changed since the table was built".into()));
        }
        if meta.retriever_checksum != retriever_sum {
            return Err(stale(format!("{name} retriever was retrained")));
        }
        if meta.k < k {
            return Err(stale(format!("table holds K={} but K={k} was requested", meta.k)));
        }
        read_json(&ws.path(&artifact))
    };
    Ok((check("mpc", &side.details.mpc, &mpc_sum)?, check("nre", &side.details.nre, &nre_sum)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDetails {
    pub checkpoint: FusionCheckpoint,
    pub report: FusionReport,
    pub train_top1: f64,
}

pub fn run_train(ws: &Workspace, cfg: &PipelineConfig, force: bool) -> Result<Outcome> {
    let cfg = cfg.resolved();
    let (data, recipes_sum) = load_data(ws)?;
    let k = cfg.fusion.k;
    let (mpc, nre) = load_refs(ws, &recipes_sum, k)?;
    let refs_side: Sidecar<RefsDetails> = ws.require(REFS, "precompute-refs")?;
    let mut inputs = BTreeMap::from([("recipes".to_string(), recipes_sum)]);
    inputs.extend(refs_side.outputs.iter().map(|(f, s)| (format!("refs/{f}"), s.clone())));
    let fp = fingerprint("train", &(&cfg.fusion, cfg.feature_dim), &inputs)?;
    if !force && ws.up_to_date(MODEL, &fp) {
        return Ok(log_outcome("train", Outcome::UpToDate));
    }
    let dir = ws.dir("model")?;
    let features = cfg.features();
    let kb = &data.kb;
    let mut model = FusionModel::new(kb.vocab().len(), cfg.fusion, features.clone())?;
    let mut cache = MaterialCache::default();
    let train = build_examples(kb.recipes(), kb, &mpc, &nre, k, &features, &mut cache)?;
    let valid = build_examples(&data.valid, kb, &mpc, &nre, k, &features, &mut cache)?;
    let report = fit(&mut model, &cache, &train, &valid, &data.valid)?;
    let train_top1 = top_k_accuracy(&model.predict(&cache, &train)?, kb.recipes(), cfg.fusion.decode, 1);
    info!(
        epochs = report.epochs_run,
        best = report.best_epoch,
        train_top1,
        "fusion trained"
    );
    let checkpoint = model.save(&dir.join("params.bin"), &kb.vocab().hash())?;
    write_json(
        &ws.path(MODEL),
        &Sidecar {
            stage: "train".into(),
            config: cfg,
            inputs,
            outputs: BTreeMap::from([("params.bin".to_string(), checkpoint.params_checksum.clone())]),
            fingerprint: fp,
            details: ModelDetails {
                checkpoint,
                report,
                train_top1,
            },
        },
    )?;
    Ok(log_outcome("train", Outcome::Ran))
}

fn load_model(ws: &Workspace, data: &LabeledDataset) -> Result<(FusionModel, Sidecar<ModelDetails>)> {
    let side: Sidecar<ModelDetails> = ws.require(MODEL, "train")?;
    let meta = &side.details.checkpoint;
    if meta.vocab_hash != data.vocab().hash() {
        return Err(Error::StaleArtifact {
            artifact: MODEL.into(),
            reason: "vocabulary differs from the ingested recipes".into(),
            producer: "train",
        });
    }
    let model = FusionModel::load(&ws.path("model/params.bin"), meta, side.config.features())?;
    Ok((model, side))
}

/// Score the test split and write the report to `out`.
pub fn run_evaluate(ws: &Workspace, out: Option<&Path>, case_mode: Option<CaseMode>) -> Result<EvalReport> {
    let (data, recipes_sum) = load_data(ws)?;
    let (model, side) = load_model(ws, &data)?;
    let cfg = &side.config;
    let (mpc, nre) = load_refs(ws, &recipes_sum, cfg.fusion.k)?;
    let features = cfg.features();
    let mut cache = MaterialCache::default();
    let test = build_examples(&data.test, &data.kb, &mpc, &nre, cfg.fusion.k, &features, &mut cache)?;
    let probs = model.predict(&cache, &test)?;
    let mode = case_mode.unwrap_or(cfg.case_mode);
    let report = evaluate(&probs, &data.test, &registry(data.kb.recipes()), cfg.fusion.decode, mode);
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => ws.dir("eval")?.join("report.json"),
    };
    write_json(&path, &report)?;
    info!(path = %path.display(), top1 = report.overall.top_k_acc[&1], "evaluation written");
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub precursors: Vec<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub target: String,
    pub mpc_references: Vec<String>,
    pub nre_references: Vec<String>,
    pub candidates: Vec<CandidateSet>,
}

/// Ranked precursor sets for a new target.
pub fn run_predict(ws: &Workspace, target: &str, topk: usize) -> Result<Prediction> {
    let target_comp = parse_formula(target)?;
    let (data, _) = load_data(ws)?;
    let (model, side) = load_model(ws, &data)?;
    let (mpc, index, _) = load_mpc(ws, &data)?;
    let (nre, _) = load_nre(ws)?;
    let cfg = &side.config;
    let k = cfg.fusion.k;
    let kb = &data.kb;
    let opts = RetrievalOptions {
        skip_same_composition: true,
        ..Default::default()
    };
    let mpc_refs = retrieve_mpc(&mpc, &index, &target_comp, k, &opts)?;
    let nre_refs = NreRetriever::new(&nre, kb, cfg.filter)?.retrieve(&target_comp, k, &RetrievalOptions::default())?;
    let comps = |r: &crate::retrieval::RetrievalSet| r.indices.iter().map(|&j| &kb.get(j).target).collect::<Vec<_>>();
    let probs = model.predict_one(&target_comp, &comps(&mpc_refs), &comps(&nre_refs))?;
    let d = cfg.fusion.decode;
    let sets = enumerate_sets(&probs, d.top_n, d.max_size, topk.max(1));
    let ids = |r: &crate::retrieval::RetrievalSet| r.indices.iter().map(|&j| kb.get(j).id.clone()).collect();
    Ok(Prediction {
        target: target.to_string(),
        mpc_references: ids(&mpc_refs),
        nre_references: ids(&nre_refs),
        candidates: sets
            .candidates
            .into_iter()
            .map(|(set, score)| CandidateSet {
                precursors: set.iter().map(|&i| kb.vocab().formula(i).to_string()).collect(),
                score,
            })
            .collect(),
    })
}

/// Deserialize a config file; missing fields take their defaults.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    read_json(path)
}
