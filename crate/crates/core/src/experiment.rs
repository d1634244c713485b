//! End-to-end comparison runs over layers x concepts x methods x s.
//!
//! Output layout under the configured directory:
//!
//! ```text
//! manifest.json
//! tables/avg_overlap.csv      method x (all, layer<L>...)
//! tables/neuron_vote.csv
//! heatmaps/layer<L>_s<S>.csv  pairwise overlaps, averaged over concepts
//! heatmaps/layer<L>_mean.csv  the same, also averaged over `heatmap_s_values`
//! heatmaps/scale.json         colour-scale hint for the heatmaps
//! cells/layer<L>_<concept>_s<S>.json
//! ```
//!
//! Cells are computed on a bounded worker pool and written afterwards by a
//! single thread in a fixed order, so the worker count never changes bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::concept::{build_concept_dataset, frequent_concepts, ConceptDataset, MIN_CONCEPT_EXAMPLES};
use crate::error::Error;
use crate::gaussian::{fit_gaussian_with, gaussian_greedy_rank_capped, GaussianConfig};
use crate::probe::{train_probe, TrainConfig};
use crate::rankers::{
    iou_rank, mean_select_rank, probeless_rank, random_rank, rank_from_probe, Method, NeuronRanking,
    DEFAULT_IOU_PERCENTILE,
};
use crate::rng::derive_seed;
use crate::store::{load_dataset, ActivationMatrix, TokenTable};
use crate::voting::{
    aggregate_cells, leave_one_out_report_with, mean_pairwise, pairwise_matrix_over_s, BordaOrder,
    CompatibilityReport, Metric, MethodPool, PairwiseMatrix,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization failure: {0}")]
    Serialize(String),
}

impl ExperimentError {
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentError::InvalidConfig(_) => "InvalidConfig",
            ExperimentError::Io { .. } => "IoFailure",
            ExperimentError::Serialize(_) => "SerializeFailure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

/// `"auto"` (every label with enough examples) or an explicit list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConceptSelection {
    Auto(AutoTag),
    List(Vec<String>),
}

impl Default for ConceptSelection {
    fn default() -> Self {
        ConceptSelection::Auto(AutoTag::Auto)
    }
}

/// Knobs shared by every ranking method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankOptions {
    pub iou_percentile: f64,
    /// `lambda1`/`lambda2` feed the probes: lasso uses `(lambda1, 0)`,
    /// ridge `(0, lambda2)`, lca both. The seed is replaced per probe.
    pub train: TrainConfig,
    pub gaussian: GaussianConfig,
    pub gaussian_max_selected: Option<usize>,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            iou_percentile: DEFAULT_IOU_PERCENTILE,
            train: TrainConfig::default(),
            gaussian: GaussianConfig::default(),
            gaussian_max_selected: None,
        }
    }
}

/// Runs one ranking method on one concept dataset.
pub fn rank_method(
    method: Method,
    matrix: &ActivationMatrix,
    dataset: &ConceptDataset,
    options: &RankOptions,
    seed: u64,
) -> Result<NeuronRanking, Error> {
    let layer = matrix.layer();
    let probe = |lambda1: f64, lambda2: f64| -> Result<NeuronRanking, Error> {
        let cfg = TrainConfig {
            lambda1,
            lambda2,
            seed,
            ..options.train.clone()
        };
        let model = train_probe(matrix, dataset, &cfg)?;
        let mut ranking = rank_from_probe(&model, &dataset.concept, layer);
        ranking.method = method;
        Ok(ranking)
    };
    Ok(match method {
        Method::Probeless => probeless_rank(matrix, dataset)?,
        Method::Iou => iou_rank(matrix, dataset, options.iou_percentile)?,
        Method::MeanSelect => mean_select_rank(matrix, dataset)?,
        Method::Lasso => probe(options.train.lambda1, 0.0)?,
        Method::Ridge => probe(0.0, options.train.lambda2)?,
        Method::Lca => probe(options.train.lambda1, options.train.lambda2)?,
        Method::Gaussian => {
            let model = fit_gaussian_with(matrix, dataset, &options.gaussian)?;
            gaussian_greedy_rank_capped(&model, matrix, dataset, options.gaussian_max_selected)?
        }
        Method::Random => random_rank(matrix.neurons(), seed, &dataset.concept, layer)?,
    })
}

/// Seed of the concept dataset: shared by every layer and method.
pub fn concept_seed(root: u64, concept: &str) -> u64 {
    derive_seed(root, &["concept", concept])
}

/// Seed of one method's stochastic steps for one (concept, layer).
pub fn method_seed(root: u64, concept: &str, layer: u32, method: Method) -> u64 {
    derive_seed(root, &["method", concept, &layer.to_string(), method.as_str()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// One dataset directory per layer.
    pub datasets: Vec<PathBuf>,
    pub concepts: ConceptSelection,
    pub methods: Vec<Method>,
    pub s_values: Vec<usize>,
    /// Sizes averaged into the per-layer overview heatmap. Sizes above the
    /// layer width are skipped; an empty list disables the overview.
    pub heatmap_s_values: Vec<usize>,
    #[serde(flatten)]
    pub ranking: RankOptions,
    pub borda_order: BordaOrder,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            concepts: ConceptSelection::default(),
            methods: Method::ALL.to_vec(),
            s_values: vec![10, 30, 50],
            heatmap_s_values: vec![10, 20, 30, 40, 50],
            ranking: RankOptions::default(),
            borda_order: BordaOrder::Descending,
            seed: 0,
            output: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        if self.datasets.is_empty() {
            return bad("no dataset directories given".into());
        }
        if self.methods.is_empty() {
            return bad("no methods selected".into());
        }
        if self.s_values.is_empty() || self.s_values.contains(&0) {
            return bad("s_values must be a non-empty list of positive integers".into());
        }
        if self.heatmap_s_values.contains(&0) {
            return bad("heatmap_s_values must be positive".into());
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return bad(format!("method {m} listed twice"));
            }
        }
        if !(self.ranking.iou_percentile > 0.0 && self.ranking.iou_percentile < 100.0) {
            return bad(format!("iou_percentile {} outside (0, 100)", self.ranking.iou_percentile));
        }
        if let ConceptSelection::List(list) = &self.concepts {
            if list.is_empty() {
                return bad("concept list is empty".into());
            }
        }
        self.ranking
            .train
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        for d in &self.datasets {
            if !d.is_dir() {
                return bad(format!("dataset directory {} does not exist", d.display()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the config, output directory excluded.
    pub fn hash(&self) -> String {
        let mut copy = self.clone();
        copy.output = PathBuf::new();
        let json = serde_json::to_vec(&copy).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellError {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for CellError {
    fn from(e: &Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

/// One (layer, concept, s, method) attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub layer: u32,
    pub concept: String,
    pub s: usize,
    pub method: Method,
    pub status: CellStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<CellError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub root_seed: u64,
    pub concept_seeds: BTreeMap<String, u64>,
    pub layers: Vec<u32>,
    pub succeeded: usize,
    pub failed: usize,
    pub notes: Vec<String>,
    pub cells: Vec<CellRecord>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output: PathBuf,
    pub succeeded: usize,
    pub failed: usize,
    pub reports: usize,
}

impl RunSummary {
    pub fn partial_failure(&self) -> bool {
        self.failed > 0
    }
}

/// Escapes a concept label for use in a file name.
pub fn file_component(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    for b in label.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

struct LayerData {
    matrix: ActivationMatrix,
    table: TokenTable,
}

struct CellOutcome {
    layer: u32,
    concept: String,
    records: Vec<CellRecord>,
    reports: Vec<CompatibilityReport>,
    overview: Option<PairwiseMatrix>,
    notes: Vec<String>,
}

fn run_cell(config: &ExperimentConfig, data: &LayerData, concept: &str) -> CellOutcome {
    let layer = data.matrix.layer();
    let mut outcome = CellOutcome {
        layer,
        concept: concept.to_string(),
        records: Vec::new(),
        reports: Vec::new(),
        overview: None,
        notes: Vec::new(),
    };
    let record = |s: usize, method: Method, err: Option<CellError>| CellRecord {
        layer,
        concept: concept.to_string(),
        s,
        method,
        status: if err.is_none() {
            CellStatus::Succeeded
        } else {
            CellStatus::Failed
        },
        error: err,
    };

    let dataset = match build_concept_dataset(&data.table, concept, concept_seed(config.seed, concept)) {
        Ok(d) => d,
        Err(e) => {
            let err = CellError::from(&Error::from(e));
            for &s in &config.s_values {
                for &m in &config.methods {
                    outcome.records.push(record(s, m, Some(err.clone())));
                }
            }
            return outcome;
        }
    };

    let mut rankings: Vec<(Method, Result<NeuronRanking, CellError>)> = Vec::new();
    for &m in &config.methods {
        let seed = method_seed(config.seed, concept, layer, m);
        let r = rank_method(m, &data.matrix, &dataset, &config.ranking, seed).map_err(|e| CellError::from(&e));
        rankings.push((m, r));
    }

    let mut pool = MethodPool::new();
    let mut extras = Vec::new();
    for (m, r) in &rankings {
        if let Ok(r) = r {
            if m.is_voter() {
                pool.insert(r.clone()).expect("rankings of one cell are compatible");
            } else {
                extras.push(r.clone());
            }
        }
    }
    let ranked: Vec<NeuronRanking> = rankings.iter().filter_map(|(_, r)| r.as_ref().ok().cloned()).collect();
    let neurons = data.matrix.neurons();
    let overview_s: Vec<usize> = config.heatmap_s_values.iter().copied().filter(|&s| s <= neurons).collect();
    if overview_s.len() < config.heatmap_s_values.len() {
        outcome.notes.push(format!(
            "layer {layer}, concept {concept:?}: overview heatmap skips sizes above {neurons} neurons"
        ));
    }
    if ranked.len() >= 2 && !overview_s.is_empty() {
        outcome.overview = pairwise_matrix_over_s(&ranked, &overview_s).ok();
    }

    if pool.len() < 2 {
        outcome.notes.push(format!(
            "layer {layer}, concept {concept:?}: {} voting method(s) ranked; compatibility scores need at least 2",
            pool.len()
        ));
    }

    for &s in &config.s_values {
        let report = leave_one_out_report_with(&pool, &extras, s, config.borda_order).map_err(Error::from);
        let report_err = report.as_ref().err().map(CellError::from);
        for (m, r) in &rankings {
            let err = match r {
                Err(e) => Some(e.clone()),
                Ok(_) => report_err.clone(),
            };
            outcome.records.push(record(s, *m, err));
        }
        if let Ok(rep) = report {
            outcome.reports.push(rep);
        }
    }
    outcome
}

fn write_file(root: &Path, rel: &str, contents: &[u8], files: &mut Vec<String>) -> Result<(), ExperimentError> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| ExperimentError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(&path, contents).map_err(|source| ExperimentError::Io { path, source })?;
    files.push(rel.to_string());
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>, ExperimentError> {
    let mut out = serde_json::to_vec_pretty(v).map_err(|e| ExperimentError::Serialize(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

const SCALE_HINT: &str = "{\n  \"min\": 0.0,\n  \"max\": 1.0,\n  \"palette\": \"viridis\",\n  \"low\": \"dark\",\n  \"high\": \"light\"\n}\n";

/// Runs the whole comparison and writes the report bundle.
///
/// Validation problems (bad config, unreadable datasets) are returned as
/// errors. Failures inside a cell are recorded in the manifest and the run
/// continues.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<RunSummary, Error> {
    config.validate()?;
    let mut layers: Vec<LayerData> = Vec::with_capacity(config.datasets.len());
    for dir in &config.datasets {
        let (matrix, table) = load_dataset(dir)?;
        if layers.iter().any(|l| l.matrix.layer() == matrix.layer()) {
            return Err(ExperimentError::InvalidConfig(format!(
                "two datasets declare layer {}",
                matrix.layer()
            ))
            .into());
        }
        layers.push(LayerData { matrix, table });
    }
    layers.sort_by_key(|l| l.matrix.layer());

    let tasks: Vec<(usize, String)> = layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            let concepts = match &config.concepts {
                ConceptSelection::Auto(_) => frequent_concepts(&l.table, MIN_CONCEPT_EXAMPLES),
                ConceptSelection::List(list) => list.clone(),
            };
            concepts.into_iter().map(move |c| (i, c))
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ExperimentError::InvalidConfig(format!("worker pool: {e}")))?;
    let outcomes: Vec<CellOutcome> = pool.install(|| {
        tasks
            .par_iter()
            .map(|(i, concept)| run_cell(config, &layers[*i], concept))
            .collect()
    });

    // single writer from here on
    let root = &config.output;
    let mut files = Vec::new();
    let mut all_reports = Vec::new();
    let mut notes = Vec::new();
    let mut records = Vec::new();
    let mut concept_seeds = BTreeMap::new();
    for o in &outcomes {
        concept_seeds.insert(o.concept.clone(), concept_seed(config.seed, &o.concept));
        for rep in &o.reports {
            let rel = format!("cells/layer{}_{}_s{}.json", o.layer, file_component(&o.concept), rep.s);
            write_file(root, &rel, &to_json(rep)?, &mut files)?;
        }
        all_reports.extend(o.reports.iter().cloned());
        notes.extend(o.notes.iter().cloned());
        records.extend(o.records.iter().cloned());
    }

    match aggregate_cells(&all_reports) {
        Ok(agg) => {
            write_file(root, "tables/avg_overlap.csv", agg.to_csv(Metric::AvgOverlap).as_bytes(), &mut files)?;
            write_file(root, "tables/neuron_vote.csv", agg.to_csv(Metric::NeuronVote).as_bytes(), &mut files)?;
        }
        Err(_) => notes.push("no compatibility reports were produced; tables and heatmaps omitted".to_string()),
    }

    for l in &layers {
        for &s in &config.s_values {
            let mats: Vec<_> = all_reports
                .iter()
                .filter(|r| r.layer == l.matrix.layer() && r.s == s)
                .map(|r| r.pairwise.clone())
                .collect();
            if mats.is_empty() {
                continue;
            }
            let rel = format!("heatmaps/layer{}_s{}.csv", l.matrix.layer(), s);
            write_file(root, &rel, mean_pairwise(&mats).to_csv().as_bytes(), &mut files)?;
        }
    }
    for l in &layers {
        let mats: Vec<PairwiseMatrix> = outcomes
            .iter()
            .filter(|o| o.layer == l.matrix.layer())
            .filter_map(|o| o.overview.clone())
            .collect();
        if mats.is_empty() {
            continue;
        }
        let rel = format!("heatmaps/layer{}_mean.csv", l.matrix.layer());
        write_file(root, &rel, mean_pairwise(&mats).to_csv().as_bytes(), &mut files)?;
    }
    if files.iter().any(|f| f.starts_with("heatmaps/")) {
        write_file(root, "heatmaps/scale.json", SCALE_HINT.as_bytes(), &mut files)?;
    }

    let succeeded = records.iter().filter(|r| r.status == CellStatus::Succeeded).count();
    let failed = records.len() - succeeded;
    let mut shown = config.clone();
    shown.output = PathBuf::new();
    let manifest = Manifest {
        tool: "neurank".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.hash(),
        config: shown,
        root_seed: config.seed,
        concept_seeds,
        layers: layers.iter().map(|l| l.matrix.layer()).collect(),
        succeeded,
        failed,
        notes,
        cells: records,
        files: {
            let mut f = files.clone();
            f.push("manifest.json".to_string());
            f
        },
    };
    write_file(root, "manifest.json", &to_json(&manifest)?, &mut files)?;

    Ok(RunSummary {
        output: root.clone(),
        succeeded,
        failed,
        reports: all_reports.len(),
    })
}
