//! Synthetic activations with planted concept neurons, recovery scoring and
//! the classifier-accuracy sweep.

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::ConceptDataset;
use crate::probe::{train_eval_classifier, ProbeError};
use crate::rankers::{top_s, Method, NeuronRanking, RankError};
use crate::rng;
use crate::store::{ActivationMatrix, StoreError, TokenRecord, TokenTable};
use crate::voting::fmt_score;

pub const CONCEPT_LABEL: &str = "CONCEPT";
pub const OTHER_LABEL: &str = "OTHER";
const SENTENCE_LENGTH: usize = 25;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("planted neuron set is empty")]
    EmptyPlanted,
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl EvalError {
    pub fn kind(&self) -> &'static str {
        match self {
            EvalError::InvalidConfig(_) => "InvalidConfig",
            EvalError::EmptyPlanted => "EmptyPlanted",
            EvalError::Rank(e) => e.kind(),
            EvalError::Probe(e) => e.kind(),
            EvalError::Store(e) => e.kind(),
        }
    }
}

/// Planted neurons `0..planted` are shifted by `delta * noise_std` on
/// concept tokens; every other cell is `Normal(0, noise_std^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub neurons: usize,
    pub tokens: usize,
    pub planted: usize,
    pub delta: f64,
    pub concept_fraction: f64,
    pub noise_std: f64,
    /// Share of planted-neuron noise variance coming from one common latent
    /// factor per token; 0 gives independent neurons.
    pub shared_factor: f64,
    pub layer: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            neurons: 100,
            tokens: 5000,
            planted: 10,
            delta: 2.0,
            concept_fraction: 0.2,
            noise_std: 1.0,
            shared_factor: 0.0,
            layer: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn concept_count(&self) -> usize {
        (self.concept_fraction * self.tokens as f64).round() as usize
    }

    pub fn planted_ids(&self) -> Vec<usize> {
        (0..self.planted).collect()
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidConfig(m));
        if self.neurons == 0 || self.tokens == 0 {
            return bad("neurons and tokens must be positive".into());
        }
        if self.planted > self.neurons {
            return bad(format!("planted {} > neurons {}", self.planted, self.neurons));
        }
        if !(self.concept_fraction > 0.0 && self.concept_fraction < 1.0) {
            return bad("concept_fraction must lie in (0, 1)".into());
        }
        let c = self.concept_count();
        if c < crate::concept::MIN_CONCEPT_EXAMPLES {
            return bad(format!(
                "concept_fraction * tokens = {c} < {}",
                crate::concept::MIN_CONCEPT_EXAMPLES
            ));
        }
        if self.tokens - c < c {
            return bad("fewer non-concept than concept tokens".into());
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be positive".into());
        }
        if !self.delta.is_finite() {
            return bad("delta must be finite".into());
        }
        if !(0.0..1.0).contains(&self.shared_factor) {
            return bad("shared_factor must lie in [0, 1)".into());
        }
        Ok(())
    }
}

pub fn synth_generate(config: &SynthConfig) -> Result<(ActivationMatrix, TokenTable), EvalError> {
    config.validate()?;
    // labels depend on the seed only, so layers generated with one seed share a corpus
    let mut label_rng = rng::seeded(rng::derive_seed(config.seed, &["labels"]));
    let mut rng = rng::seeded(rng::derive_seed(config.seed, &["activations", &config.layer.to_string()]));
    let mut is_concept = vec![false; config.tokens];
    for i in index::sample(&mut label_rng, config.tokens, config.concept_count()) {
        is_concept[i] = true;
    }
    let shift = config.delta * config.noise_std;
    let shared = config.shared_factor.sqrt();
    let own = (1.0 - config.shared_factor).sqrt();
    let mut data = Vec::with_capacity(config.tokens * config.neurons);
    for &concept in &is_concept {
        let latent: f64 = if config.shared_factor > 0.0 {
            rng.sample(StandardNormal)
        } else {
            0.0
        };
        for n in 0..config.neurons {
            let e: f64 = rng.sample(StandardNormal);
            let v = if n < config.planted {
                let noise = shared * latent + own * e;
                config.noise_std * noise + if concept { shift } else { 0.0 }
            } else {
                config.noise_std * e
            };
            data.push(v as f32);
        }
    }
    let records = is_concept
        .iter()
        .enumerate()
        .map(|(t, &c)| TokenRecord {
            sentence_id: (t / SENTENCE_LENGTH) as u64,
            position: (t % SENTENCE_LENGTH) as u32,
            token: format!("tok{t}"),
            label: if c { CONCEPT_LABEL } else { OTHER_LABEL }.to_string(),
        })
        .collect();
    let matrix = ActivationMatrix::new(data, config.tokens, config.neurons, config.layer, "synthetic")?;
    Ok((matrix, TokenTable::new(records)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    pub method: Method,
    pub s: usize,
    pub hits: usize,
    pub precision_at_s: f64,
}

/// How many planted neurons appear in the top `s` of a ranking.
pub fn recovery_score(ranking: &NeuronRanking, planted: &[usize], s: usize) -> Result<RecoveryScore, EvalError> {
    if planted.is_empty() {
        return Err(EvalError::EmptyPlanted);
    }
    let top = top_s(ranking, s)?;
    let hits = top.ids.iter().filter(|id| planted.contains(id)).count();
    Ok(RecoveryScore {
        method: ranking.method,
        s,
        hits,
        precision_at_s: hits as f64 / s as f64,
    })
}

/// Test accuracies, one row per ranking, one column per `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub s_values: Vec<usize>,
    pub rows: Vec<(Method, Vec<f64>)>,
}

impl AccuracyTable {
    pub fn get(&self, method: Method, s: usize) -> Option<f64> {
        let col = self.s_values.iter().position(|&x| x == s)?;
        self.rows.iter().find(|(m, _)| *m == method).map(|(_, v)| v[col])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for s in &self.s_values {
            let _ = write!(out, ",{s}");
        }
        out.push('\n');
        for (m, accs) in &self.rows {
            out.push_str(m.as_str());
            for a in accs {
                let _ = write!(out, ",{}", fmt_score(*a));
            }
            out.push('\n');
        }
        out
    }
}

/// Trains an unregularized classifier on each ranking's top-`s` neurons and
/// records its test accuracy.
pub fn accuracy_sweep(
    matrix: &ActivationMatrix,
    dataset: &ConceptDataset,
    rankings: &[NeuronRanking],
    s_values: &[usize],
) -> Result<AccuracyTable, EvalError> {
    let jobs: Vec<(usize, usize)> = (0..rankings.len())
        .flat_map(|r| (0..s_values.len()).map(move |s| (r, s)))
        .collect();
    let accs = jobs
        .par_iter()
        .map(|&(r, si)| {
            let top = top_s(&rankings[r], s_values[si])?;
            Ok(train_eval_classifier(matrix, dataset, &top.ids)?)
        })
        .collect::<Result<Vec<f64>, EvalError>>()?;
    let rows = rankings
        .iter()
        .enumerate()
        .map(|(r, rk)| (rk.method, accs[r * s_values.len()..(r + 1) * s_values.len()].to_vec()))
        .collect();
    Ok(AccuracyTable {
        s_values: s_values.to_vec(),
        rows,
    })
}
