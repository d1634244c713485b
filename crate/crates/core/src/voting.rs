//! Compatibility metrics between neuron rankings.
//!
//! * `overlap`: intersection over union of two top-`s` sets.
//! * `avg_overlap`: mean overlap of a method with every other voter.
//! * `neuron_vote`: overlap with the Borda consensus of the other voters,
//!   where position `i` (0-based) in a voter's top-`s` list is worth `s - i`.
//!
//! Pool members are scored leave-one-out; extra methods (e.g. random,
//! meanselect) are scored against the whole pool.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rankers::{top_s, Method, NeuronRanking, NeuronSet, RankError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoteError {
    #[error("voter pool is empty")]
    EmptyPool,
    #[error("pool mismatch: {0}")]
    PoolMismatch(String),
    #[error("no reports to aggregate")]
    NoReports,
    #[error(transparent)]
    Rank(#[from] RankError),
}

impl VoteError {
    pub fn kind(&self) -> &'static str {
        match self {
            VoteError::EmptyPool => "EmptyPool",
            VoteError::PoolMismatch(_) => "PoolMismatch",
            VoteError::NoReports => "NoReports",
            VoteError::Rank(e) => e.kind(),
        }
    }
}

/// Sort direction of the aggregated Borda weights.
///
/// `Descending` puts the most endorsed neurons first. `Ascending` follows
/// the literal "ascending argsort" reading and is kept for auditing only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BordaOrder {
    #[default]
    Descending,
    Ascending,
}

/// `|a ∩ b| / |a ∪ b|`; two empty sets overlap fully.
pub fn overlap(a: &NeuronSet, b: &NeuronSet) -> f64 {
    let inter = a.ids.iter().filter(|id| b.ids.contains(id)).count();
    let union = a.ids.len() + b.ids.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn avg_overlap(test: &NeuronSet, pool: &[NeuronSet]) -> Result<f64, VoteError> {
    if pool.is_empty() {
        return Err(VoteError::EmptyPool);
    }
    Ok(pool.iter().map(|p| overlap(test, p)).sum::<f64>() / pool.len() as f64)
}

/// Aggregated Borda weight of every neuron `0..neurons`. A voter's list of
/// length `s` gives `s - i` to its `i`-th entry and nothing to absent ids.
pub fn borda_weights(pool: &[NeuronSet], neurons: usize) -> Vec<u64> {
    let mut weights = vec![0u64; neurons];
    for voter in pool {
        let s = voter.ids.len() as u64;
        for (i, &id) in voter.ids.iter().enumerate() {
            weights[id] += s - i as u64;
        }
    }
    weights
}

/// All neuron ids ordered by aggregated weight (descending), ties by id.
pub fn borda_aggregate(pool: &[NeuronSet], neurons: usize) -> Vec<usize> {
    borda_aggregate_with(pool, neurons, BordaOrder::Descending)
}

pub fn borda_aggregate_with(pool: &[NeuronSet], neurons: usize, order: BordaOrder) -> Vec<usize> {
    let weights = borda_weights(pool, neurons);
    let mut ids: Vec<usize> = (0..neurons).collect();
    match order {
        BordaOrder::Descending => ids.sort_by(|&a, &b| weights[b].cmp(&weights[a]).then(a.cmp(&b))),
        BordaOrder::Ascending => ids.sort_by(|&a, &b| weights[a].cmp(&weights[b]).then(a.cmp(&b))),
    }
    ids
}

/// Overlap of `test` with the first `test.s` entries of the pool's Borda
/// consensus.
pub fn neuron_vote(test: &NeuronSet, pool: &[NeuronSet], neurons: usize) -> Result<f64, VoteError> {
    neuron_vote_with(test, pool, neurons, BordaOrder::Descending)
}

pub fn neuron_vote_with(
    test: &NeuronSet,
    pool: &[NeuronSet],
    neurons: usize,
    order: BordaOrder,
) -> Result<f64, VoteError> {
    if pool.is_empty() {
        return Err(VoteError::EmptyPool);
    }
    let mut best = borda_aggregate_with(pool, neurons, order);
    best.truncate(test.s);
    let consensus = NeuronSet {
        s: test.s,
        ids: best,
        method: test.method,
    };
    Ok(overlap(test, &consensus))
}

/// The voters for one (concept, layer), in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MethodPool {
    rankings: Vec<NeuronRanking>,
}

impl MethodPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rankings(rankings: impl IntoIterator<Item = NeuronRanking>) -> Result<Self, VoteError> {
        let mut pool = Self::new();
        for r in rankings {
            pool.insert(r)?;
        }
        Ok(pool)
    }

    pub fn insert(&mut self, ranking: NeuronRanking) -> Result<(), VoteError> {
        check_compatible(self.rankings.first(), &ranking)?;
        if self.rankings.iter().any(|r| r.method == ranking.method) {
            return Err(VoteError::PoolMismatch(format!("method {} added twice", ranking.method)));
        }
        self.rankings.push(ranking);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }

    pub fn rankings(&self) -> &[NeuronRanking] {
        &self.rankings
    }

    pub fn methods(&self) -> Vec<Method> {
        self.rankings.iter().map(|r| r.method).collect()
    }

    pub fn neurons(&self) -> Option<usize> {
        self.rankings.first().map(NeuronRanking::neurons)
    }
}

fn check_compatible(reference: Option<&NeuronRanking>, r: &NeuronRanking) -> Result<(), VoteError> {
    if let Some(first) = reference {
        if first.neurons() != r.neurons() || first.concept != r.concept || first.layer != r.layer {
            return Err(VoteError::PoolMismatch(format!(
                "{} ranks {} neurons for ({}, layer {}), pool has {} for ({}, layer {})",
                r.method,
                r.neurons(),
                r.concept,
                r.layer,
                first.neurons(),
                first.concept,
                first.layer
            )));
        }
    }
    Ok(())
}

/// Square, symmetric overlap matrix between methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMatrix {
    pub methods: Vec<Method>,
    pub values: Vec<Vec<f64>>,
}

impl PairwiseMatrix {
    pub fn get(&self, a: Method, b: Method) -> Option<f64> {
        let i = self.methods.iter().position(|&m| m == a)?;
        let j = self.methods.iter().position(|&m| m == b)?;
        Some(self.values[i][j])
    }

    /// `method,<m1>,<m2>,...` header followed by one row per method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for m in &self.methods {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
        for (m, row) in self.methods.iter().zip(&self.values) {
            out.push_str(m.as_str());
            for v in row {
                let _ = write!(out, ",{}", fmt_score(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Fixed six-decimal formatting used by every CSV.
pub fn fmt_score(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

fn pairwise_of_sets(sets: &[NeuronSet]) -> PairwiseMatrix {
    let values = sets
        .iter()
        .map(|a| {
            sets.iter()
                .map(|b| if a.method == b.method { 1.0 } else { overlap(a, b) })
                .collect()
        })
        .collect();
    PairwiseMatrix {
        methods: sets.iter().map(|s| s.method).collect(),
        values,
    }
}

pub fn pairwise_matrix(rankings: &[NeuronRanking], s: usize) -> Result<PairwiseMatrix, VoteError> {
    let sets = rankings.iter().map(|r| top_s(r, s)).collect::<Result<Vec<_>, _>>()?;
    Ok(pairwise_of_sets(&sets))
}

/// Entry-wise mean of pairwise matrices. Methods are the union in first-seen
/// order; each entry averages the matrices containing both methods.
pub fn mean_pairwise(matrices: &[PairwiseMatrix]) -> PairwiseMatrix {
    let mut methods: Vec<Method> = Vec::new();
    for m in matrices.iter().flat_map(|p| &p.methods) {
        if !methods.contains(m) {
            methods.push(*m);
        }
    }
    let k = methods.len();
    let mut sum = vec![vec![0.0; k]; k];
    let mut count = vec![vec![0usize; k]; k];
    for p in matrices {
        let idx: Vec<usize> = p
            .methods
            .iter()
            .map(|m| methods.iter().position(|x| x == m).unwrap())
            .collect();
        for (a, row) in p.values.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                sum[idx[a]][idx[b]] += v;
                count[idx[a]][idx[b]] += 1;
            }
        }
    }
    let values = sum
        .into_iter()
        .zip(count)
        .map(|(row, cnt)| {
            row.into_iter()
                .zip(cnt)
                .map(|(s, c)| if c == 0 { f64::NAN } else { s / c as f64 })
                .collect()
        })
        .collect();
    PairwiseMatrix { methods, values }
}

/// Pairwise overlaps averaged over several `s`.
pub fn pairwise_matrix_over_s(rankings: &[NeuronRanking], s_values: &[usize]) -> Result<PairwiseMatrix, VoteError> {
    let mats = s_values
        .iter()
        .map(|&s| pairwise_matrix(rankings, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean_pairwise(&mats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: Method,
    pub avg_overlap: f64,
    pub neuron_vote: f64,
}

/// Compatibility scores and pairwise overlaps for one (concept, layer, s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityReport {
    pub concept: String,
    pub layer: u32,
    pub s: usize,
    pub pool: Vec<Method>,
    pub extras: Vec<Method>,
    pub borda_order: BordaOrder,
    pub scores: Vec<MethodScore>,
    pub pairwise: PairwiseMatrix,
    pub top_sets: Vec<NeuronSet>,
}

impl CompatibilityReport {
    pub fn score(&self, method: Method) -> Option<&MethodScore> {
        self.scores.iter().find(|s| s.method == method)
    }
}

pub fn leave_one_out_report(
    pool: &MethodPool,
    extras: &[NeuronRanking],
    s: usize,
) -> Result<CompatibilityReport, VoteError> {
    leave_one_out_report_with(pool, extras, s, BordaOrder::Descending)
}

pub fn leave_one_out_report_with(
    pool: &MethodPool,
    extras: &[NeuronRanking],
    s: usize,
    order: BordaOrder,
) -> Result<CompatibilityReport, VoteError> {
    if pool.len() < 2 {
        return Err(VoteError::EmptyPool);
    }
    let first = &pool.rankings()[0];
    for e in extras {
        check_compatible(Some(first), e)?;
        if pool.methods().contains(&e.method) {
            return Err(VoteError::PoolMismatch(format!("{} is both voter and extra", e.method)));
        }
    }
    let neurons = first.neurons();
    let voters = pool
        .rankings()
        .iter()
        .map(|r| top_s(r, s))
        .collect::<Result<Vec<_>, _>>()?;
    let outsiders = extras.iter().map(|r| top_s(r, s)).collect::<Result<Vec<_>, _>>()?;

    let mut scores = Vec::with_capacity(voters.len() + outsiders.len());
    for (i, test) in voters.iter().enumerate() {
        let others: Vec<NeuronSet> = voters
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, v)| v.clone())
            .collect();
        scores.push(MethodScore {
            method: test.method,
            avg_overlap: avg_overlap(test, &others)?,
            neuron_vote: neuron_vote_with(test, &others, neurons, order)?,
        });
    }
    for test in &outsiders {
        scores.push(MethodScore {
            method: test.method,
            avg_overlap: avg_overlap(test, &voters)?,
            neuron_vote: neuron_vote_with(test, &voters, neurons, order)?,
        });
    }

    let mut all_sets = voters;
    all_sets.extend(outsiders);
    Ok(CompatibilityReport {
        concept: first.concept.clone(),
        layer: first.layer,
        s,
        pool: pool.methods(),
        extras: extras.iter().map(|r| r.method).collect(),
        borda_order: order,
        scores,
        pairwise: pairwise_of_sets(&all_sets),
        top_sets: all_sets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub cells: usize,
    pub methods: Vec<Method>,
    /// Mean over every cell in which the method was scored.
    pub overall: Vec<MethodScore>,
    /// The same means restricted to one layer at a time.
    pub per_layer: BTreeMap<u32, Vec<MethodScore>>,
}

fn mean_scores(methods: &[Method], reports: &[&CompatibilityReport]) -> Vec<MethodScore> {
    methods
        .iter()
        .filter_map(|&m| {
            let hits: Vec<&MethodScore> = reports.iter().filter_map(|r| r.score(m)).collect();
            if hits.is_empty() {
                return None;
            }
            let k = hits.len() as f64;
            Some(MethodScore {
                method: m,
                avg_overlap: hits.iter().map(|h| h.avg_overlap).sum::<f64>() / k,
                neuron_vote: hits.iter().map(|h| h.neuron_vote).sum::<f64>() / k,
            })
        })
        .collect()
}

/// Unweighted mean of every method's scores across cells, plus per-layer means.
pub fn aggregate_cells(reports: &[CompatibilityReport]) -> Result<AggregateReport, VoteError> {
    if reports.is_empty() {
        return Err(VoteError::NoReports);
    }
    let mut methods: Vec<Method> = Vec::new();
    for m in reports.iter().flat_map(|r| r.scores.iter().map(|s| s.method)) {
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    let all: Vec<&CompatibilityReport> = reports.iter().collect();
    let mut per_layer = BTreeMap::new();
    for layer in reports.iter().map(|r| r.layer) {
        per_layer.entry(layer).or_insert_with(|| {
            let subset: Vec<&CompatibilityReport> = reports.iter().filter(|r| r.layer == layer).collect();
            mean_scores(&methods, &subset)
        });
    }
    Ok(AggregateReport {
        cells: reports.len(),
        overall: mean_scores(&methods, &all),
        methods,
        per_layer,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    AvgOverlap,
    NeuronVote,
}

impl AggregateReport {
    /// `method,all,layer<L>...` table for one metric.
    pub fn to_csv(&self, metric: Metric) -> String {
        let pick = |s: &MethodScore| match metric {
            Metric::AvgOverlap => s.avg_overlap,
            Metric::NeuronVote => s.neuron_vote,
        };
        let lookup = |scores: &[MethodScore], m: Method| scores.iter().find(|s| s.method == m).map(pick);
        let mut out = String::from("method,all");
        for layer in self.per_layer.keys() {
            let _ = write!(out, ",layer{layer}");
        }
        out.push('\n');
        for &m in &self.methods {
            out.push_str(m.as_str());
            let _ = write!(out, ",{}", fmt_score(lookup(&self.overall, m).unwrap_or(f64::NAN)));
            for scores in self.per_layer.values() {
                let _ = write!(out, ",{}", fmt_score(lookup(scores, m).unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
        out
    }
}

fn ln_choose(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Expected overlap of two independent uniform top-`s` sets over `neurons`:
/// `sum_k k / (2s - k) * P(|∩| = k)` with `|∩|` hypergeometric.
pub fn expected_random_overlap(neurons: usize, s: usize) -> f64 {
    assert!(s >= 1 && s <= neurons);
    let denom = ln_choose(neurons, s);
    (0..=s)
        .filter(|&k| s - k <= neurons - s)
        .map(|k| {
            let p = (ln_choose(s, k) + ln_choose(neurons - s, s - k) - denom).exp();
            k as f64 / (2 * s - k) as f64 * p
        })
        .sum()
}
