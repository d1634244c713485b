//! Class-conditional multivariate Gaussian probe and greedy neuron selection.
//!
//! One Gaussian is fitted per class (concept / non-concept) over all neurons.
//! Because Gaussians marginalize by taking sub-vectors of the mean and
//! sub-blocks of the covariance, a probe over any neuron subset comes for
//! free. Neurons are ranked by forward selection: at each step the neuron
//! whose addition maximizes the train-split label log-likelihood
//! `sum log p(label | z_F)` is appended to the selected list `F`.
//!
//! The greedy sweep keeps a Cholesky factor of each class's selected
//! covariance block and the whitened residuals of every train row, so scoring
//! a candidate costs one triangular solve plus one pass over the rows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::{ConceptDataset, Split};
use crate::rankers::{Method, NeuronRanking};
use crate::store::ActivationMatrix;

/// Diagonal loading factor relative to the mean covariance diagonal.
pub const DEFAULT_LOADING: f64 = 1e-3;
/// Smallest loading applied, so constant data still yields a definite matrix.
pub const MIN_LOADING: f64 = 1e-9;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("{class} class has {count} train samples, at least 2 required")]
    ClassTooSmall { class: &'static str, count: usize },
    #[error("sub-covariance over the selected neurons is not positive definite")]
    SingularSubCovariance,
    #[error("neuron subset is empty")]
    EmptySubset,
    #[error("neuron {0} appears twice in the subset")]
    DuplicateNeuron(usize),
    #[error("neuron {neuron} out of range for {neurons} neurons")]
    NeuronOutOfRange { neuron: usize, neurons: usize },
}

impl GaussianError {
    pub fn kind(&self) -> &'static str {
        match self {
            GaussianError::ClassTooSmall { .. } => "ClassTooSmall",
            GaussianError::SingularSubCovariance => "SingularSubCovariance",
            GaussianError::EmptySubset => "EmptySubset",
            GaussianError::DuplicateNeuron(_) => "DuplicateNeuron",
            GaussianError::NeuronOutOfRange { .. } => "NeuronOutOfRange",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loading {
    /// `factor * mean(diag(cov))`, floored at [`MIN_LOADING`].
    Relative(f64),
    /// A fixed value added to the diagonal.
    Absolute(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    PerClass,
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianConfig {
    pub loading: Loading,
    pub covariance: CovarianceKind,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        Self {
            loading: Loading::Relative(DEFAULT_LOADING),
            covariance: CovarianceKind::PerClass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussian {
    pub mean: Vec<f64>,
    /// Row-major `N x N`, diagonal loading included.
    pub cov: Vec<f64>,
    pub log_prior: f64,
    /// The value that was added to the diagonal.
    pub load: f64,
}

/// `classes[0]` models non-concept tokens, `classes[1]` concept tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianModel {
    pub neurons: usize,
    pub classes: [ClassGaussian; 2],
}

impl GaussianModel {
    /// Mean and covariance of class `c` restricted to `subset`.
    pub fn marginal(&self, c: usize, subset: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let g = &self.classes[c];
        let n = self.neurons;
        let mean = subset.iter().map(|&i| g.mean[i]).collect();
        let mut cov = Vec::with_capacity(subset.len() * subset.len());
        for &i in subset {
            cov.extend(subset.iter().map(|&j| g.cov[i * n + j]));
        }
        (mean, cov)
    }
}

/// Ordered greedy selection with the label log-likelihood after each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyState {
    pub selected: Vec<usize>,
    pub trace: Vec<f64>,
}

/// Maximum-likelihood mean and covariance of `rows` (divide by n).
fn moments(matrix: &ActivationMatrix, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = matrix.neurons();
    let count = rows.len() as f64;
    let mut mean = vec![0.0; n];
    for &r in rows {
        for (m, &v) in mean.iter_mut().zip(matrix.row(r)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);

    let mut cov = vec![0.0; n * n];
    let mut centered = vec![0.0; n];
    for &r in rows {
        for ((c, &v), m) in centered.iter_mut().zip(matrix.row(r)).zip(&mean) {
            *c = v as f64 - m;
        }
        for i in 0..n {
            let ci = centered[i];
            let out = &mut cov[i * n..i * n + i + 1];
            for (o, &cj) in out.iter_mut().zip(&centered[..=i]) {
                *o += ci * cj;
            }
        }
    }
    for i in 0..n {
        for j in 0..=i {
            let v = cov[i * n + j] / count;
            cov[i * n + j] = v;
            cov[j * n + i] = v;
        }
    }
    (mean, cov)
}

fn apply_loading(cov: &mut [f64], n: usize, loading: Loading) -> f64 {
    let load = match loading {
        Loading::Relative(factor) => {
            let mean_diag = (0..n).map(|i| cov[i * n + i]).sum::<f64>() / n as f64;
            (factor * mean_diag).max(MIN_LOADING)
        }
        Loading::Absolute(v) => v,
    };
    for i in 0..n {
        cov[i * n + i] += load;
    }
    load
}

pub fn fit_gaussian(matrix: &ActivationMatrix, dataset: &ConceptDataset) -> Result<GaussianModel, GaussianError> {
    fit_gaussian_with(matrix, dataset, &GaussianConfig::default())
}

pub fn fit_gaussian_with(
    matrix: &ActivationMatrix,
    dataset: &ConceptDataset,
    config: &GaussianConfig,
) -> Result<GaussianModel, GaussianError> {
    let n = matrix.neurons();
    let neg = dataset.class_rows(Split::Train, false);
    let pos = dataset.class_rows(Split::Train, true);
    for (class, rows) in [("non-concept", &neg), ("concept", &pos)] {
        if rows.len() < 2 {
            return Err(GaussianError::ClassTooSmall {
                class,
                count: rows.len(),
            });
        }
    }
    let total = (neg.len() + pos.len()) as f64;
    let (mean0, mut cov0) = moments(matrix, &neg);
    let (mean1, mut cov1) = moments(matrix, &pos);
    if config.covariance == CovarianceKind::Pooled {
        let (w0, w1) = (neg.len() as f64 / total, pos.len() as f64 / total);
        for (a, b) in cov0.iter_mut().zip(cov1.iter_mut()) {
            let v = w0 * *a + w1 * *b;
            *a = v;
            *b = v;
        }
    }
    let load0 = apply_loading(&mut cov0, n, config.loading);
    let load1 = apply_loading(&mut cov1, n, config.loading);
    Ok(GaussianModel {
        neurons: n,
        classes: [
            ClassGaussian {
                mean: mean0,
                cov: cov0,
                log_prior: (neg.len() as f64 / total).ln(),
                load: load0,
            },
            ClassGaussian {
                mean: mean1,
                cov: cov1,
                log_prior: (pos.len() as f64 / total).ln(),
                load: load1,
            },
        ],
    })
}

/// Lower Cholesky factor of a row-major `k x k` matrix.
pub(crate) fn cholesky(a: &[f64], k: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut sum = a[i * k + j];
            for p in 0..j {
                sum -= l[i * k + p] * l[j * k + p];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[i * k + i] = sum.sqrt();
            } else {
                l[i * k + j] = sum / l[j * k + j];
            }
        }
    }
    Some(l)
}

#[inline]
fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_subset(subset: &[usize], neurons: usize) -> Result<(), GaussianError> {
    if subset.is_empty() {
        return Err(GaussianError::EmptySubset);
    }
    let mut seen = vec![false; neurons];
    for &i in subset {
        if i >= neurons {
            return Err(GaussianError::NeuronOutOfRange { neuron: i, neurons });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(GaussianError::DuplicateNeuron(i));
        }
    }
    Ok(())
}

/// `sum over rows of log p(label | z_subset(row))` under the marginalized
/// class Gaussians and the class priors. Labels are 1 for concept tokens.
pub fn subset_label_loglik(
    model: &GaussianModel,
    subset: &[usize],
    matrix: &ActivationMatrix,
    rows: &[usize],
    labels: &[u8],
) -> Result<f64, GaussianError> {
    check_subset(subset, model.neurons)?;
    let k = subset.len();
    let mut factors = Vec::with_capacity(2);
    for c in 0..2 {
        let (mean, cov) = model.marginal(c, subset);
        let l = cholesky(&cov, k).ok_or(GaussianError::SingularSubCovariance)?;
        let logdet: f64 = (0..k).map(|i| 2.0 * l[i * k + i].ln()).sum();
        factors.push((mean, l, logdet));
    }
    let mut z = vec![0.0; k];
    let mut total = 0.0;
    for (&r, &y) in rows.iter().zip(labels) {
        let row = matrix.row(r);
        let mut ll = [0.0; 2];
        for (c, (mean, l, logdet)) in factors.iter().enumerate() {
            // forward solve L z = x - mean
            for i in 0..k {
                let mut v = row[subset[i]] as f64 - mean[i];
                for p in 0..i {
                    v -= l[i * k + p] * z[p];
                }
                z[i] = v / l[i * k + i];
            }
            let quad: f64 = z.iter().map(|v| v * v).sum();
            ll[c] = -0.5 * (quad + logdet + k as f64 * LN_2PI) + model.classes[c].log_prior;
        }
        total += ll[y as usize] - log_sum_exp2(ll[0], ll[1]);
    }
    Ok(total)
}

/// Incremental per-class state of the greedy sweep.
struct ClassSweep {
    /// Rows of the lower Cholesky factor of the selected covariance block.
    chol: Vec<Vec<f64>>,
    logdet: f64,
    /// Whitened residuals, one column per selected neuron.
    whitened: Vec<Vec<f64>>,
    /// Squared norm of the whitened residual per row.
    quad: Vec<f64>,
}

struct Candidate {
    score: f64,
    /// Per class: new Cholesky row (off-diagonal part), diagonal, new whitened column.
    ext: [(Vec<f64>, f64, Vec<f64>); 2],
}

fn score_candidate(
    model: &GaussianModel,
    sweeps: &[ClassSweep; 2],
    selected: &[usize],
    column: &[f64],
    labels: &[u8],
    cand: usize,
) -> Result<Candidate, GaussianError> {
    let n = model.neurons;
    let k = selected.len();
    let rows = labels.len();
    let mut ll = [vec![0.0; rows], vec![0.0; rows]];
    let mut ext: [(Vec<f64>, f64, Vec<f64>); 2] = Default::default();
    for c in 0..2 {
        let g = &model.classes[c];
        let sw = &sweeps[c];
        // l solves L l = cov[F, cand]
        let mut l = vec![0.0; k];
        for i in 0..k {
            let mut v = g.cov[selected[i] * n + cand];
            for (p, lp) in l.iter().enumerate().take(i) {
                v -= sw.chol[i][p] * lp;
            }
            l[i] = v / sw.chol[i][i];
        }
        let d2 = g.cov[cand * n + cand] - l.iter().map(|v| v * v).sum::<f64>();
        if d2 <= 0.0 || !d2.is_finite() {
            return Err(GaussianError::SingularSubCovariance);
        }
        let d = d2.sqrt();
        let mut u: Vec<f64> = column.iter().map(|x| x - g.mean[cand]).collect();
        for (lj, wj) in l.iter().zip(&sw.whitened) {
            for (ur, wr) in u.iter_mut().zip(wj) {
                *ur -= lj * wr;
            }
        }
        u.iter_mut().for_each(|ur| *ur /= d);
        let logdet = sw.logdet + 2.0 * d.ln();
        let constant = logdet + (k + 1) as f64 * LN_2PI;
        for ((out, q), ur) in ll[c].iter_mut().zip(&sw.quad).zip(&u) {
            *out = -0.5 * (q + ur * ur + constant) + g.log_prior;
        }
        ext[c] = (l, d, u);
    }
    let score = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| ll[y as usize][r] - log_sum_exp2(ll[0][r], ll[1][r]))
        .sum();
    Ok(Candidate { score, ext })
}

/// Greedy forward selection on the train split, up to `cap` neurons.
pub fn gaussian_greedy_select(
    model: &GaussianModel,
    matrix: &ActivationMatrix,
    dataset: &ConceptDataset,
    cap: Option<usize>,
) -> Result<GreedyState, GaussianError> {
    let n = model.neurons;
    let steps = cap.unwrap_or(n).min(n);
    let (rows, labels) = dataset.split_rows(Split::Train);
    let columns: Vec<Vec<f64>> = (0..n).map(|j| matrix.column_over(j, &rows)).collect();
    let mut sweeps: [ClassSweep; 2] = std::array::from_fn(|_| ClassSweep {
        chol: Vec::new(),
        logdet: 0.0,
        whitened: Vec::new(),
        quad: vec![0.0; rows.len()],
    });
    let mut in_f = vec![false; n];
    let mut state = GreedyState {
        selected: Vec::with_capacity(steps),
        trace: Vec::with_capacity(steps),
    };

    for _ in 0..steps {
        let remaining: Vec<usize> = (0..n).filter(|&j| !in_f[j]).collect();
        let scored: Vec<(usize, Candidate)> = remaining
            .par_iter()
            .map(|&j| {
                score_candidate(model, &sweeps, &state.selected, &columns[j], &labels, j).map(|c| (j, c))
            })
            .collect::<Result<_, _>>()?;
        // ascending ids, strict improvement: lowest id wins ties
        let (best, cand) = scored
            .into_iter()
            .reduce(|a, b| if b.1.score > a.1.score { b } else { a })
            .expect("at least one candidate remains");

        for (sw, (mut l, d, u)) in sweeps.iter_mut().zip(cand.ext) {
            l.push(d);
            sw.chol.push(l);
            sw.logdet += 2.0 * d.ln();
            for (q, ur) in sw.quad.iter_mut().zip(&u) {
                *q += ur * ur;
            }
            sw.whitened.push(u);
        }
        in_f[best] = true;
        state.selected.push(best);
        state.trace.push(cand.score);
    }
    Ok(state)
}

/// Ranks every neuron by greedy selection order (score `N - position`).
pub fn gaussian_greedy_rank(
    model: &GaussianModel,
    matrix: &ActivationMatrix,
    dataset: &ConceptDataset,
) -> Result<NeuronRanking, GaussianError> {
    gaussian_greedy_rank_capped(model, matrix, dataset, None)
}

/// As [`gaussian_greedy_rank`] but stops after `cap` selections; neurons never
/// selected score -1 and follow in ascending id order.
pub fn gaussian_greedy_rank_capped(
    model: &GaussianModel,
    matrix: &ActivationMatrix,
    dataset: &ConceptDataset,
    cap: Option<usize>,
) -> Result<NeuronRanking, GaussianError> {
    let state = gaussian_greedy_select(model, matrix, dataset, cap)?;
    let n = model.neurons;
    let mut ranking = NeuronRanking::from_order(Method::Gaussian, &dataset.concept, matrix.layer(), &state.selected);
    let mut chosen = vec![false; n];
    for (i, &id) in state.selected.iter().enumerate() {
        chosen[id] = true;
        ranking.ordered[i].1 = (n - i) as f64;
    }
    ranking
        .ordered
        .extend((0..n).filter(|&j| !chosen[j]).map(|j| (j, -1.0)));
    Ok(ranking)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f32]]) -> ActivationMatrix {
        let n = rows[0].len();
        ActivationMatrix::new(rows.concat(), rows.len(), n, 0, "t").unwrap()
    }

    #[test]
    fn fit_two_point_class() {
        // concept class {(0,0), (2,0)}, non-concept {(1,1), (1,3)}
        let m = matrix(&[&[0.0, 0.0], &[2.0, 0.0], &[1.0, 1.0], &[1.0, 3.0]]);
        let ds = ConceptDataset::all_train("c", vec![0, 1], vec![2, 3]).unwrap();
        let g = fit_gaussian(&m, &ds).unwrap();
        let pos = &g.classes[1];
        assert_eq!(pos.mean, vec![1.0, 0.0]);
        let load = 1e-3 * 0.5;
        assert!((pos.load - load).abs() < 1e-18);
        assert!((pos.cov[0] - (1.0 + load)).abs() < 1e-15);
        assert!((pos.cov[3] - load).abs() < 1e-18);
        assert_eq!(pos.cov[1], 0.0);
        assert!((pos.log_prior - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn class_too_small() {
        let m = matrix(&[&[0.0], &[1.0], &[2.0]]);
        let ds = ConceptDataset::all_train("c", vec![0], vec![1, 2]).unwrap();
        assert!(matches!(
            fit_gaussian(&m, &ds),
            Err(GaussianError::ClassTooSmall { class: "concept", count: 1 })
        ));
    }

    #[test]
    fn constant_data_still_definite() {
        let m = matrix(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let ds = ConceptDataset::all_train("c", vec![0, 1], vec![2, 3]).unwrap();
        let g = fit_gaussian(&m, &ds).unwrap();
        assert!(cholesky(&g.classes[0].cov, 2).is_some());
        let (rows, labels) = ds.split_rows(Split::Train);
        let ll = subset_label_loglik(&g, &[0, 1], &m, &rows, &labels).unwrap();
        assert!((ll - 4.0 * 0.5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn subset_validation() {
        let m = matrix(&[&[0.0, 1.0], &[1.0, 0.0], &[2.0, 2.0], &[3.0, 1.0]]);
        let ds = ConceptDataset::all_train("c", vec![0, 1], vec![2, 3]).unwrap();
        let g = fit_gaussian(&m, &ds).unwrap();
        let (rows, labels) = ds.split_rows(Split::Train);
        assert_eq!(subset_label_loglik(&g, &[], &m, &rows, &labels), Err(GaussianError::EmptySubset));
        assert_eq!(
            subset_label_loglik(&g, &[1, 1], &m, &rows, &labels),
            Err(GaussianError::DuplicateNeuron(1))
        );
        assert!(subset_label_loglik(&g, &[2], &m, &rows, &labels).is_err());
    }

    #[test]
    fn single_neuron_ranks_itself() {
        let m = matrix(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let ds = ConceptDataset::all_train("c", vec![0, 1], vec![2, 3]).unwrap();
        let g = fit_gaussian(&m, &ds).unwrap();
        let r = gaussian_greedy_rank(&g, &m, &ds).unwrap();
        assert_eq!(r.ordered, vec![(0, 1.0)]);
    }

    #[test]
    fn capped_ranking_fills_with_minus_one() {
        let m = matrix(&[
            &[0.0, 5.0, 1.0],
            &[1.0, 6.0, 0.0],
            &[0.5, 5.5, 0.2],
            &[2.0, 0.0, 1.0],
            &[3.0, 1.0, 0.0],
            &[2.5, 0.5, 0.7],
        ]);
        let ds = ConceptDataset::all_train("c", vec![0, 1, 2], vec![3, 4, 5]).unwrap();
        let g = fit_gaussian(&m, &ds).unwrap();
        let r = gaussian_greedy_rank_capped(&g, &m, &ds, Some(1)).unwrap();
        assert_eq!(r.ordered.len(), 3);
        assert_eq!(r.ordered[0].1, 3.0);
        assert_eq!(&r.ordered[1..].iter().map(|x| x.1).collect::<Vec<_>>(), &[-1.0, -1.0]);
        let rest: Vec<usize> = r.ordered[1..].iter().map(|x| x.0).collect();
        assert!(rest.windows(2).all(|w| w[0] < w[1]));
        r.validate().unwrap();
    }
}
