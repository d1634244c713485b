//! Neuron rankings and the corpus-statistic, probe-weight and random rankers.
//!
//! All corpus statistics are computed on the train split of the concept
//! dataset using raw (unstandardized) activations.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::{ConceptDataset, Split};
use crate::probe::ProbeModel;
use crate::rng;
use crate::store::ActivationMatrix;

pub const DEFAULT_IOU_PERCENTILE: f64 = 95.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankError {
    #[error("s = {s} outside 1..={neurons}")]
    SOutOfRange { s: usize, neurons: usize },
    #[error("percentile {0} outside (0, 100)")]
    InvalidPercentile(f64),
    #[error("train split has no {0} examples")]
    EmptyClass(&'static str),
    #[error("ranking needs at least one neuron")]
    NoNeurons,
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("invalid ranking: {0}")]
    InvalidRanking(String),
}

impl RankError {
    pub fn kind(&self) -> &'static str {
        match self {
            RankError::SOutOfRange { .. } => "SOutOfRange",
            RankError::InvalidPercentile(_) => "InvalidPercentile",
            RankError::EmptyClass(_) => "EmptyClass",
            RankError::NoNeurons => "NoNeurons",
            RankError::UnknownMethod(_) => "UnknownMethod",
            RankError::InvalidRanking(_) => "InvalidRanking",
        }
    }
}

/// Ranking method identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Probeless,
    Iou,
    Lasso,
    Ridge,
    Lca,
    Gaussian,
    MeanSelect,
    Random,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Probeless,
        Method::Iou,
        Method::Lasso,
        Method::Ridge,
        Method::Lca,
        Method::Gaussian,
        Method::MeanSelect,
        Method::Random,
    ];

    /// Methods that vote in the leave-one-out pool.
    pub const VOTERS: [Method; 6] = [
        Method::Probeless,
        Method::Iou,
        Method::Lasso,
        Method::Ridge,
        Method::Lca,
        Method::Gaussian,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Probeless => "probeless",
            Method::Iou => "iou",
            Method::Lasso => "lasso",
            Method::Ridge => "ridge",
            Method::Lca => "lca",
            Method::Gaussian => "gaussian",
            Method::MeanSelect => "meanselect",
            Method::Random => "random",
        }
    }

    pub fn is_voter(self) -> bool {
        Self::VOTERS.contains(&self)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = RankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| RankError::UnknownMethod(s.to_string()))
    }
}

/// A full ordering of a layer's neurons by relevance to one concept.
///
/// `ordered` is sorted by descending score, ties by ascending neuron id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronRanking {
    pub method: Method,
    pub concept: String,
    pub layer: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<usize>,
    pub ordered: Vec<(usize, f64)>,
}

impl NeuronRanking {
    /// Ranks neuron `i` by `scores[i]`.
    pub fn from_scores(method: Method, concept: impl Into<String>, layer: u32, scores: &[f64]) -> Self {
        let mut ordered: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        ordered.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Self {
            method,
            concept: concept.into(),
            layer,
            s: None,
            ordered,
        }
    }

    /// Ranks neurons in the given order, scoring position `i` as `N - i`.
    pub fn from_order(method: Method, concept: impl Into<String>, layer: u32, order: &[usize]) -> Self {
        let n = order.len();
        Self {
            method,
            concept: concept.into(),
            layer,
            s: None,
            ordered: order
                .iter()
                .enumerate()
                .map(|(i, &id)| (id, (n - i) as f64))
                .collect(),
        }
    }

    pub fn neurons(&self) -> usize {
        self.ordered.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.ordered.iter().map(|&(id, _)| id)
    }

    /// Score of every neuron, indexed by neuron id.
    pub fn scores_by_id(&self) -> Vec<f64> {
        let mut out = vec![f64::NAN; self.ordered.len()];
        for &(id, score) in &self.ordered {
            if id < out.len() {
                out[id] = score;
            }
        }
        out
    }

    /// Checks the permutation, ordering and tie-break invariants.
    pub fn validate(&self) -> Result<(), RankError> {
        let n = self.ordered.len();
        let mut seen = vec![false; n];
        for &(id, score) in &self.ordered {
            if id >= n || std::mem::replace(&mut seen[id], true) {
                return Err(RankError::InvalidRanking(format!(
                    "neuron ids are not a permutation of 0..{n}"
                )));
            }
            if score.is_nan() {
                return Err(RankError::InvalidRanking(format!("neuron {id} has NaN score")));
            }
        }
        for w in self.ordered.windows(2) {
            let ((a, sa), (b, sb)) = (w[0], w[1]);
            if sa < sb || (sa == sb && a > b) {
                return Err(RankError::InvalidRanking(format!(
                    "entries ({a}, {sa}) and ({b}, {sb}) out of order"
                )));
            }
        }
        Ok(())
    }
}

/// The top-`s` neurons of a ranking, in ranked order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronSet {
    pub s: usize,
    pub ids: Vec<usize>,
    pub method: Method,
}

impl NeuronSet {
    pub fn contains(&self, id: usize) -> bool {
        self.ids.contains(&id)
    }

    /// 0-based position of `id` in the ranked prefix.
    pub fn position(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }
}

pub fn top_s(ranking: &NeuronRanking, s: usize) -> Result<NeuronSet, RankError> {
    let n = ranking.neurons();
    if s == 0 || s > n {
        return Err(RankError::SOutOfRange { s, neurons: n });
    }
    Ok(NeuronSet {
        s,
        ids: ranking.ids().take(s).collect(),
        method: ranking.method,
    })
}

/// Per-neuron class means and concept-class extremes over the train split.
struct ClassStats {
    mean_pos: Vec<f64>,
    mean_neg: Vec<f64>,
    max_pos: Vec<f64>,
    min_pos: Vec<f64>,
}

fn class_stats(matrix: &ActivationMatrix, dataset: &ConceptDataset) -> Result<ClassStats, RankError> {
    let pos = dataset.class_rows(Split::Train, true);
    let neg = dataset.class_rows(Split::Train, false);
    if pos.is_empty() {
        return Err(RankError::EmptyClass("concept"));
    }
    if neg.is_empty() {
        return Err(RankError::EmptyClass("non-concept"));
    }
    let n = matrix.neurons();
    let mean_of = |rows: &[usize]| {
        let mut acc = vec![0.0; n];
        for &r in rows {
            for (a, &v) in acc.iter_mut().zip(matrix.row(r)) {
                *a += v as f64;
            }
        }
        acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
        acc
    };
    let mut max_pos = vec![f64::NEG_INFINITY; n];
    let mut min_pos = vec![f64::INFINITY; n];
    for &r in &pos {
        for ((hi, lo), &v) in max_pos.iter_mut().zip(min_pos.iter_mut()).zip(matrix.row(r)) {
            *hi = hi.max(v as f64);
            *lo = lo.min(v as f64);
        }
    }
    Ok(ClassStats {
        mean_pos: mean_of(&pos),
        mean_neg: mean_of(&neg),
        max_pos,
        min_pos,
    })
}

/// Mean activation on concept tokens minus mean on non-concept tokens.
pub fn probeless_rank(matrix: &ActivationMatrix, dataset: &ConceptDataset) -> Result<NeuronRanking, RankError> {
    let st = class_stats(matrix, dataset)?;
    let scores: Vec<f64> = st.mean_pos.iter().zip(&st.mean_neg).map(|(p, q)| p - q).collect();
    Ok(NeuronRanking::from_scores(
        Method::Probeless,
        &dataset.concept,
        matrix.layer(),
        &scores,
    ))
}

/// The mean difference normalized by the neuron's range over concept tokens.
/// A neuron constant over the concept scores 0.
pub fn mean_select_rank(matrix: &ActivationMatrix, dataset: &ConceptDataset) -> Result<NeuronRanking, RankError> {
    let st = class_stats(matrix, dataset)?;
    let scores: Vec<f64> = (0..matrix.neurons())
        .map(|n| {
            let range = st.max_pos[n] - st.min_pos[n];
            if range > 0.0 {
                (st.mean_pos[n] - st.mean_neg[n]) / range
            } else {
                0.0
            }
        })
        .collect();
    Ok(NeuronRanking::from_scores(
        Method::MeanSelect,
        &dataset.concept,
        matrix.layer(),
        &scores,
    ))
}

/// Linear-interpolation percentile of already sorted values.
pub fn percentile_sorted(sorted: &[f64], percentile: f64) -> f64 {
    let pos = percentile / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    }
}

/// Intersection over union between each neuron's above-threshold mask and
/// the concept mask, over train tokens. The threshold of a neuron is the
/// given percentile of its own train activations.
pub fn iou_rank(
    matrix: &ActivationMatrix,
    dataset: &ConceptDataset,
    percentile: f64,
) -> Result<NeuronRanking, RankError> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(RankError::InvalidPercentile(percentile));
    }
    let (rows, labels) = dataset.split_rows(Split::Train);
    if !labels.contains(&1) {
        return Err(RankError::EmptyClass("concept"));
    }
    let mut column = Vec::with_capacity(rows.len());
    let mut sorted = Vec::with_capacity(rows.len());
    let scores: Vec<f64> = (0..matrix.neurons())
        .map(|n| {
            column.clear();
            column.extend(rows.iter().map(|&r| matrix.get(r, n) as f64));
            sorted.clear();
            sorted.extend_from_slice(&column);
            sorted.sort_by(f64::total_cmp);
            let delta = percentile_sorted(&sorted, percentile);
            let (mut inter, mut union) = (0usize, 0usize);
            for (&z, &y) in column.iter().zip(&labels) {
                let fires = z > delta;
                let concept = y == 1;
                inter += (fires && concept) as usize;
                union += (fires || concept) as usize;
            }
            if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect();
    Ok(NeuronRanking::from_scores(
        Method::Iou,
        &dataset.concept,
        matrix.layer(),
        &scores,
    ))
}

/// The method a probe's regularization corresponds to.
pub fn probe_method(model: &ProbeModel) -> Method {
    if model.config.lambda2 == 0.0 {
        Method::Lasso
    } else if model.config.lambda1 == 0.0 {
        Method::Ridge
    } else {
        Method::Lca
    }
}

/// Ranks neurons by absolute probe weight. Neurons the probe did not use
/// score 0.
pub fn rank_from_probe(model: &ProbeModel, concept: &str, layer: u32) -> NeuronRanking {
    let n = model.standardizer.mean.len().max(model.columns.iter().map(|c| c + 1).max().unwrap_or(0));
    let mut scores = vec![0.0; n];
    for (&c, &w) in model.columns.iter().zip(&model.theta) {
        scores[c] = w.abs();
    }
    NeuronRanking::from_scores(probe_method(model), concept, layer, &scores)
}

/// A uniformly random permutation of `0..neurons`.
pub fn random_rank(neurons: usize, seed: u64, concept: &str, layer: u32) -> Result<NeuronRanking, RankError> {
    if neurons == 0 {
        return Err(RankError::NoNeurons);
    }
    let mut order: Vec<usize> = (0..neurons).collect();
    order.shuffle(&mut rng::seeded(seed));
    Ok(NeuronRanking::from_order(Method::Random, concept, layer, &order))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::Standardizer;
    use crate::probe::TrainConfig;

    /// Builds a matrix from columns.
    fn matrix(cols: &[&[f32]]) -> ActivationMatrix {
        let rows = cols[0].len();
        let mut data = Vec::new();
        for r in 0..rows {
            data.extend(cols.iter().map(|c| c[r]));
        }
        ActivationMatrix::new(data, rows, cols.len(), 3, "t").unwrap()
    }

    #[test]
    fn probeless_mean_difference() {
        // rows 0,1 concept; rows 2,3 not
        let m = matrix(&[&[1.0, 3.0, 0.0, 2.0], &[5.0, 5.0, 5.0, 5.0]]);
        let ds = ConceptDataset::all_train("c", vec![0, 1], vec![2, 3]).unwrap();
        let r = probeless_rank(&m, &ds).unwrap();
        assert_eq!(r.ordered, vec![(0, 1.0), (1, 0.0)]);
        assert_eq!(r.layer, 3);
        assert_eq!(top_s(&r, 1).unwrap().ids, vec![0]);
    }

    #[test]
    fn probeless_is_order_invariant() {
        let m = matrix(&[&[1.0, 3.0, 0.0, 2.0], &[4.0, 1.0, 2.0, 2.0]]);
        let a = ConceptDataset::all_train("c", vec![0, 1], vec![2, 3]).unwrap();
        let b = ConceptDataset::all_train("c", vec![1, 0], vec![3, 2]).unwrap();
        assert_eq!(probeless_rank(&m, &a).unwrap(), probeless_rank(&m, &b).unwrap());
    }

    #[test]
    fn mean_select_normalizes_by_concept_range() {
        let m = matrix(&[&[1.0, 3.0, 0.0, 2.0], &[2.0, 2.0, 0.0, 0.0]]);
        let ds = ConceptDataset::all_train("c", vec![0, 1], vec![2, 3]).unwrap();
        let r = mean_select_rank(&m, &ds).unwrap();
        // neuron 1 is constant over the concept: degenerate, scores 0
        assert_eq!(r.ordered, vec![(0, 0.5), (1, 0.0)]);
    }

    #[test]
    fn iou_hand_enumeration() {
        // activations (0.9, 0.1, 0.8, 0.2); concept rows 0 and 3
        let m = matrix(&[&[0.9, 0.1, 0.8, 0.2]]);
        let ds = ConceptDataset::all_train("c", vec![0, 3], vec![1, 2]).unwrap();
        let r = iou_rank(&m, &ds, 50.0).unwrap();
        assert!((r.ordered[0].1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_perfect_neuron() {
        let m = matrix(&[&[5.0, 5.0, 0.0, 0.0, 0.0, 0.0]]);
        let ds = ConceptDataset::all_train("c", vec![0, 1], vec![2, 3, 4, 5]).unwrap();
        assert_eq!(iou_rank(&m, &ds, 50.0).unwrap().ordered[0].1, 1.0);
        assert!(matches!(iou_rank(&m, &ds, 100.0), Err(RankError::InvalidPercentile(_))));
        assert!(matches!(iou_rank(&m, &ds, 0.0), Err(RankError::InvalidPercentile(_))));
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v = [0.1, 0.2, 0.8, 0.9];
        assert!((percentile_sorted(&v, 50.0) - 0.5).abs() < 1e-12);
        assert_eq!(percentile_sorted(&v, 100.0 / 3.0), 0.2);
        assert!((percentile_sorted(&[1.0, 2.0, 3.0, 4.0, 5.0], 95.0) - 4.8).abs() < 1e-12);
    }

    fn fake_probe(theta: Vec<f64>, cfg: TrainConfig) -> ProbeModel {
        let n = theta.len();
        ProbeModel {
            theta,
            bias: 0.0,
            config: cfg,
            columns: (0..n).collect(),
            standardizer: Standardizer {
                mean: vec![0.0; n],
                std: vec![1.0; n],
            },
            final_train_loss: 0.0,
            dev_accuracy: 1.0,
            epoch_losses: vec![],
        }
    }

    #[test]
    fn probe_ranking_uses_absolute_weights() {
        let r = rank_from_probe(&fake_probe(vec![0.5, -2.0, 0.0], TrainConfig::lasso()), "c", 1);
        assert_eq!(r.ids().collect::<Vec<_>>(), vec![1, 0, 2]);
        assert_eq!(r.method, Method::Lasso);
        let neg = rank_from_probe(&fake_probe(vec![-0.5, 2.0, 0.0], TrainConfig::ridge()), "c", 1);
        assert_eq!(neg.ids().collect::<Vec<_>>(), vec![1, 0, 2]);
        assert_eq!(neg.method, Method::Ridge);
        let zero = rank_from_probe(&fake_probe(vec![0.0; 4], TrainConfig::elastic_net()), "c", 1);
        assert_eq!(zero.ids().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(zero.method, Method::Lca);
    }

    #[test]
    fn random_rank_determinism_and_edge() {
        assert_eq!(random_rank(50, 9, "c", 0).unwrap(), random_rank(50, 9, "c", 0).unwrap());
        assert_ne!(random_rank(50, 9, "c", 0).unwrap(), random_rank(50, 10, "c", 0).unwrap());
        assert_eq!(random_rank(1, 3, "c", 0).unwrap().ordered, vec![(0, 1.0)]);
        assert_eq!(random_rank(0, 3, "c", 0), Err(RankError::NoNeurons));
        random_rank(50, 9, "c", 0).unwrap().validate().unwrap();
    }

    #[test]
    fn random_rank_first_position_is_uniform() {
        let mut first = [0usize; 10];
        for seed in 0..10_000 {
            first[random_rank(10, seed, "c", 0).unwrap().ordered[0].0] += 1;
        }
        for c in first {
            assert!((c as f64 / 10_000.0 - 0.1).abs() <= 0.01, "{first:?}");
        }
    }

    #[test]
    fn top_s_bounds() {
        let r = NeuronRanking::from_scores(Method::Iou, "c", 0, &[0.1, 0.3, 0.2]);
        assert_eq!(top_s(&r, 3).unwrap().ids, vec![1, 2, 0]);
        assert_eq!(top_s(&r, 0), Err(RankError::SOutOfRange { s: 0, neurons: 3 }));
        assert!(top_s(&r, 4).is_err());
    }

    #[test]
    fn from_scores_breaks_ties_by_id() {
        let r = NeuronRanking::from_scores(Method::Iou, "c", 0, &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(r.ids().collect::<Vec<_>>(), vec![1, 3, 0, 2]);
        r.validate().unwrap();
        let bad = NeuronRanking {
            ordered: vec![(0, 1.0), (0, 0.5)],
            ..r.clone()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("l1".parse::<Method>().is_err());
    }

    #[test]
    fn ranking_json_shape() {
        let r = NeuronRanking::from_scores(Method::Probeless, "NN", 1, &[0.5, 1.0]);
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"method":"probeless","concept":"NN","layer":1,"ordered":[[1,1.0],[0,0.5]]}"#
        );
    }
}
