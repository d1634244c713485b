//! Binary concept datasets (concept tokens vs. sampled non-concept tokens)
//! with train/dev/test splits, plus per-neuron standardization.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::store::{ActivationMatrix, TokenTable};

/// Concepts with fewer positive tokens are not turned into datasets.
pub const MIN_CONCEPT_EXAMPLES: usize = 200;
pub const TRAIN_FRACTION: f64 = 0.70;
pub const DEV_FRACTION: f64 = 0.15;
/// Train standard deviations below this are replaced by 1.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConceptError {
    #[error("concept {concept:?} has {count} examples, at least {MIN_CONCEPT_EXAMPLES} required")]
    ConceptTooRare { concept: String, count: usize },
    #[error("concept {concept:?}: only {available} non-concept rows for {needed} positives")]
    ComplementTooSmall {
        concept: String,
        available: usize,
        needed: usize,
    },
    #[error("train split is empty")]
    EmptyTrainSplit,
    #[error("invalid concept dataset: {0}")]
    Invalid(String),
}

impl ConceptError {
    pub fn kind(&self) -> &'static str {
        match self {
            ConceptError::ConceptTooRare { .. } => "ConceptTooRare",
            ConceptError::ComplementTooSmall { .. } => "ComplementTooSmall",
            ConceptError::EmptyTrainSplit => "EmptyTrainSplit",
            ConceptError::Invalid(_) => "InvalidConceptDataset",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Row indices for a binary concept task.
///
/// `split[i]` is the split of the `i`-th example, where examples are the
/// positives followed by the negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptDataset {
    pub concept: String,
    pub positive_rows: Vec<usize>,
    pub negative_rows: Vec<usize>,
    pub split: Vec<Split>,
    pub seed: u64,
}

impl ConceptDataset {
    /// Assembles a dataset from explicit parts, checking disjointness and
    /// split alignment. [`build_concept_dataset`] is the sampling entry point.
    pub fn from_parts(
        concept: impl Into<String>,
        positive_rows: Vec<usize>,
        negative_rows: Vec<usize>,
        split: Vec<Split>,
        seed: u64,
    ) -> Result<Self, ConceptError> {
        if split.len() != positive_rows.len() + negative_rows.len() {
            return Err(ConceptError::Invalid(format!(
                "{} split labels for {} examples",
                split.len(),
                positive_rows.len() + negative_rows.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for r in positive_rows.iter().chain(&negative_rows) {
            if !seen.insert(*r) {
                return Err(ConceptError::Invalid(format!("row {r} appears twice")));
            }
        }
        Ok(Self {
            concept: concept.into(),
            positive_rows,
            negative_rows,
            split,
            seed,
        })
    }

    /// Every example in the train split; handy for small hand-built cases.
    pub fn all_train(
        concept: impl Into<String>,
        positive_rows: Vec<usize>,
        negative_rows: Vec<usize>,
    ) -> Result<Self, ConceptError> {
        let n = positive_rows.len() + negative_rows.len();
        Self::from_parts(concept, positive_rows, negative_rows, vec![Split::Train; n], 0)
    }

    pub fn len(&self) -> usize {
        self.split.len()
    }

    pub fn is_empty(&self) -> bool {
        self.split.is_empty()
    }

    /// `(row, is_positive, split)` for every example.
    pub fn examples(&self) -> impl Iterator<Item = (usize, bool, Split)> + '_ {
        self.positive_rows
            .iter()
            .map(|&r| (r, true))
            .chain(self.negative_rows.iter().map(|&r| (r, false)))
            .zip(&self.split)
            .map(|((r, y), &s)| (r, y, s))
    }

    /// Rows and 0/1 labels of one split, in example order.
    pub fn split_rows(&self, split: Split) -> (Vec<usize>, Vec<u8>) {
        self.examples()
            .filter(|&(_, _, s)| s == split)
            .map(|(r, y, _)| (r, y as u8))
            .unzip()
    }

    /// Rows of one class within one split.
    pub fn class_rows(&self, split: Split, positive: bool) -> Vec<usize> {
        self.examples()
            .filter(|&(_, y, s)| s == split && y == positive)
            .map(|(r, _, _)| r)
            .collect()
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        self.split.iter().fold((0, 0, 0), |(a, b, c), s| match s {
            Split::Train => (a + 1, b, c),
            Split::Dev => (a, b + 1, c),
            Split::Test => (a, b, c + 1),
        })
    }
}

/// Number of examples in train/dev/test for `n` examples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let dev = ((n as f64 * DEV_FRACTION).round() as usize).min(n - train);
    (train, dev, n - train - dev)
}

/// Labels occurring at least `min_count` times, sorted by label.
pub fn frequent_concepts(table: &TokenTable, min_count: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for label in table.labels() {
        *counts.entry(label).or_default() += 1;
    }
    counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .map(|(l, _)| l.to_string())
        .collect()
}

/// Builds the balanced binary dataset for `concept`.
///
/// Positives are every row labelled `concept`; negatives are drawn uniformly
/// without replacement from all other rows, as many as there are positives.
/// The combined examples are shuffled and cut 70/15/15 into train/dev/test.
pub fn build_concept_dataset(
    table: &TokenTable,
    concept: &str,
    seed: u64,
) -> Result<ConceptDataset, ConceptError> {
    let (positives, complement): (Vec<usize>, Vec<usize>) =
        (0..table.len()).partition(|&i| table.records()[i].label == concept);
    if positives.len() < MIN_CONCEPT_EXAMPLES {
        return Err(ConceptError::ConceptTooRare {
            concept: concept.to_string(),
            count: positives.len(),
        });
    }
    if complement.len() < positives.len() {
        return Err(ConceptError::ComplementTooSmall {
            concept: concept.to_string(),
            available: complement.len(),
            needed: positives.len(),
        });
    }

    let mut rng = rng::seeded(seed);
    let mut negatives: Vec<usize> = index::sample(&mut rng, complement.len(), positives.len())
        .into_iter()
        .map(|i| complement[i])
        .collect();
    negatives.sort_unstable();

    let n = positives.len() + negatives.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (train, dev, _) = split_sizes(n);
    let mut split = vec![Split::Test; n];
    for (pos, &example) in order.iter().enumerate() {
        split[example] = if pos < train {
            Split::Train
        } else if pos < train + dev {
            Split::Dev
        } else {
            Split::Test
        };
    }

    ConceptDataset::from_parts(concept, positives, negatives, split, seed)
}

/// Per-neuron z-scoring fitted on the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean/std of every neuron over `rows`.
    pub fn fit_rows(matrix: &ActivationMatrix, rows: &[usize]) -> Result<Self, ConceptError> {
        if rows.is_empty() {
            return Err(ConceptError::EmptyTrainSplit);
        }
        let n = matrix.neurons();
        let count = rows.len() as f64;
        let mut mean = vec![0.0; n];
        for &r in rows {
            for (m, &v) in mean.iter_mut().zip(matrix.row(r)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for &r in rows {
            for ((acc, &v), m) in var.iter_mut().zip(matrix.row(r)).zip(&mean) {
                let d = v as f64 - m;
                *acc += d * d;
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s < STD_FLOOR {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    #[inline]
    pub fn apply_value(&self, neuron: usize, value: f64) -> f64 {
        (value - self.mean[neuron]) / self.std[neuron]
    }

    #[inline]
    pub fn invert_value(&self, neuron: usize, value: f64) -> f64 {
        value * self.std[neuron] + self.mean[neuron]
    }

    /// Standardizes one full activation row.
    pub fn apply(&self, row: &[f32]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(n, &v)| self.apply_value(n, v as f64))
            .collect()
    }

    /// Row-major standardized design matrix over `rows` x `columns`.
    pub fn design(&self, matrix: &ActivationMatrix, rows: &[usize], columns: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * columns.len());
        for &r in rows {
            let row = matrix.row(r);
            out.extend(columns.iter().map(|&c| self.apply_value(c, row[c] as f64)));
        }
        out
    }
}

/// Fits a [`Standardizer`] on the train split of `dataset`.
pub fn fit_standardizer(
    matrix: &ActivationMatrix,
    dataset: &ConceptDataset,
) -> Result<Standardizer, ConceptError> {
    let (rows, _) = dataset.split_rows(Split::Train);
    Standardizer::fit_rows(matrix, &rows)
}

/// Standardizes the given rows of `matrix` (all neurons), row-major.
pub fn apply_standardizer(
    standardizer: &Standardizer,
    matrix: &ActivationMatrix,
    rows: &[usize],
) -> Vec<f64> {
    let all: Vec<usize> = (0..matrix.neurons()).collect();
    standardizer.design(matrix, rows, &all)
}
