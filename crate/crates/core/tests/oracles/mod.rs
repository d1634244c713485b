//! Naive reference implementations used as test oracles.
//!
//! Written for clarity, not speed, and deliberately structured differently
//! from the library code: boolean masks instead of membership scans,
//! selection instead of sorting, Gauss-Jordan instead of Cholesky.

#![allow(dead_code)]

use neurank::concept::{ConceptDataset, Split};
use neurank::gaussian::GaussianModel;
use neurank::store::ActivationMatrix;
use rand::Rng;

/// IoU through indicator vectors.
pub fn overlap(a: &[usize], b: &[usize], neurons: usize) -> f64 {
    let mut in_a = vec![false; neurons];
    let mut in_b = vec![false; neurons];
    a.iter().for_each(|&i| in_a[i] = true);
    b.iter().for_each(|&i| in_b[i] = true);
    let inter = (0..neurons).filter(|&i| in_a[i] && in_b[i]).count();
    let union = (0..neurons).filter(|&i| in_a[i] || in_b[i]).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn avg_overlap(test: &[usize], pool: &[Vec<usize>], neurons: usize) -> f64 {
    let mut total = 0.0;
    for p in pool {
        total += overlap(test, p, neurons);
    }
    total / pool.len() as f64
}

/// Borda weight of one neuron, found by scanning every list.
pub fn borda_weight(neuron: usize, pool: &[Vec<usize>]) -> u64 {
    let mut w = 0;
    for list in pool {
        for (i, &id) in list.iter().enumerate() {
            if id == neuron {
                w += (list.len() - i) as u64;
            }
        }
    }
    w
}

/// Consensus order by repeated selection of the heaviest remaining neuron,
/// lowest id first among equals.
pub fn borda_order(pool: &[Vec<usize>], neurons: usize) -> Vec<usize> {
    let weights: Vec<u64> = (0..neurons).map(|n| borda_weight(n, pool)).collect();
    let mut taken = vec![false; neurons];
    let mut order = Vec::with_capacity(neurons);
    for _ in 0..neurons {
        let mut best: Option<usize> = None;
        for n in 0..neurons {
            if taken[n] {
                continue;
            }
            best = match best {
                Some(b) if weights[b] >= weights[n] => Some(b),
                _ => Some(n),
            };
        }
        let b = best.unwrap();
        taken[b] = true;
        order.push(b);
    }
    order
}

pub fn neuron_vote(test: &[usize], pool: &[Vec<usize>], neurons: usize) -> f64 {
    let consensus: Vec<usize> = borda_order(pool, neurons).into_iter().take(test.len()).collect();
    overlap(test, &consensus, neurons)
}

/// Central differences of a scalar function of a flat parameter vector.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut p = at.to_vec();
    (0..at.len())
        .map(|i| {
            p[i] = at[i] + h;
            let up = f(&p);
            p[i] = at[i] - h;
            let down = f(&p);
            p[i] = at[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / (||a|| + ||b||)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let denom = norm(a) + norm(b);
    if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

/// `log(1 + exp(t))` without overflow or cancellation.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Mean NLL of a logistic model plus `lambda2 * ||theta||^2`:
/// `-log sigma(z) = softplus(-z)`, `-log(1 - sigma(z)) = softplus(z)`.
pub fn logistic_objective(theta: &[f64], bias: f64, x: &[f64], labels: &[u8], lambda2: f64) -> f64 {
    let d = theta.len();
    let mut nll = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z: f64 = bias + (0..d).map(|j| theta[j] * x[i * d + j]).sum::<f64>();
        nll += if y == 1 { softplus(-z) } else { softplus(z) };
    }
    nll / labels.len() as f64 + lambda2 * theta.iter().map(|t| t * t).sum::<f64>()
}

/// Inverse and log-determinant by Gauss-Jordan elimination with partial
/// pivoting. `a` is row-major `k x k`.
pub fn invert_with_logdet(a: &[f64], k: usize) -> (Vec<f64>, f64) {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; k * k];
    for i in 0..k {
        inv[i * k + i] = 1.0;
    }
    let mut logdet = 0.0;
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&r, &s| m[r * k + col].abs().partial_cmp(&m[s * k + col].abs()).unwrap())
            .unwrap();
        if pivot != col {
            for j in 0..k {
                m.swap(col * k + j, pivot * k + j);
                inv.swap(col * k + j, pivot * k + j);
            }
        }
        let p = m[col * k + col];
        assert!(p != 0.0, "singular matrix");
        logdet += p.abs().ln();
        for j in 0..k {
            m[col * k + j] /= p;
            inv[col * k + j] /= p;
        }
        for r in 0..k {
            if r == col {
                continue;
            }
            let f = m[r * k + col];
            for j in 0..k {
                m[r * k + j] -= f * m[col * k + j];
                inv[r * k + j] -= f * inv[col * k + j];
            }
        }
    }
    (inv, logdet)
}

/// Determinant by cofactor expansion; only for tiny matrices.
pub fn determinant(a: &[f64], k: usize) -> f64 {
    if k == 1 {
        return a[0];
    }
    let mut det = 0.0;
    for c in 0..k {
        let mut minor = Vec::with_capacity((k - 1) * (k - 1));
        for r in 1..k {
            for j in 0..k {
                if j != c {
                    minor.push(a[r * k + j]);
                }
            }
        }
        let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
        det += sign * a[c] * determinant(&minor, k - 1);
    }
    det
}

/// `log N(x | mean, cov)` from the dense inverse.
pub fn log_density(x: &[f64], mean: &[f64], cov: &[f64]) -> f64 {
    let k = x.len();
    let (inv, logdet) = invert_with_logdet(cov, k);
    let mut quad = 0.0;
    for i in 0..k {
        for j in 0..k {
            quad += (x[i] - mean[i]) * inv[i * k + j] * (x[j] - mean[j]);
        }
    }
    -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

/// Class-conditional Gaussian parameters over all neurons.
pub struct DenseClass<'a> {
    pub mean: &'a [f64],
    pub cov: &'a [f64],
    pub log_prior: f64,
}

fn restrict(class: &DenseClass, subset: &[usize], neurons: usize) -> (Vec<f64>, Vec<f64>) {
    let mean = subset.iter().map(|&i| class.mean[i]).collect();
    let mut cov = Vec::new();
    for &i in subset {
        for &j in subset {
            cov.push(class.cov[i * neurons + j]);
        }
    }
    (mean, cov)
}

/// `sum_i log p(y_i | x_i restricted to subset)`.
pub fn label_loglik(classes: &[DenseClass; 2], subset: &[usize], neurons: usize, xs: &[Vec<f64>], labels: &[u8]) -> f64 {
    let params: Vec<_> = classes.iter().map(|c| restrict(c, subset, neurons)).collect();
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(labels) {
        let xs_sub: Vec<f64> = subset.iter().map(|&i| x[i]).collect();
        let joint: Vec<f64> = (0..2)
            .map(|c| classes[c].log_prior + log_density(&xs_sub, &params[c].0, &params[c].1))
            .collect();
        let m = joint[0].max(joint[1]);
        let evidence = m + ((joint[0] - m).exp() + (joint[1] - m).exp()).ln();
        total += joint[y as usize] - evidence;
    }
    total
}

/// Greedy forward selection that rescores every candidate subset from
/// scratch at each step. Ties go to the lowest id.
pub fn exhaustive_greedy(classes: &[DenseClass; 2], neurons: usize, xs: &[Vec<f64>], labels: &[u8]) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < neurons {
        let mut best: Option<(usize, f64)> = None;
        for cand in 0..neurons {
            if chosen.contains(&cand) {
                continue;
            }
            let mut subset = chosen.clone();
            subset.push(cand);
            let score = label_loglik(classes, &subset, neurons, xs, labels);
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((cand, score));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

/// Maximum-likelihood mean and covariance (divide by n) of row vectors.
pub fn mle_moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j] / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / n;
        }
    }
    (mean, cov)
}

/// Expected IoU of two independent uniform `s`-subsets of `0..n`, summed
/// term by term over the hypergeometric intersection size.
pub fn hypergeometric_iou(n: usize, s: usize) -> f64 {
    // log C(a, b)
    let lc = |a: usize, b: usize| -> f64 {
        (1..=b).map(|i| ((a - b + i) as f64).ln() - (i as f64).ln()).sum()
    };
    let total = lc(n, s);
    let mut e = 0.0;
    for k in 0..=s {
        if s - k > n - s {
            continue;
        }
        let p = (lc(s, k) + lc(n - s, s - k) - total).exp();
        e += p * k as f64 / (2 * s - k) as f64;
    }
    e
}

/// Every ordered `s`-list of distinct ids from `0..n`, lexicographic.
pub fn ordered_lists(n: usize, s: usize) -> Vec<Vec<usize>> {
    fn extend(n: usize, s: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == s {
            out.push(prefix.clone());
            return;
        }
        for id in 0..n {
            if !prefix.contains(&id) {
                prefix.push(id);
                extend(n, s, prefix, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    extend(n, s, &mut Vec::new(), &mut out);
    out
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Pools of `m` lists drawn from `lists` (with repetition, order kept).
/// Every pool is produced when there are at most `budget`; otherwise
/// `budget` pools at a fixed coprime stride through the index space.
pub fn pools(lists: &[Vec<usize>], m: usize, budget: u128) -> (u128, Vec<Vec<Vec<usize>>>) {
    let p = lists.len() as u128;
    let total = p.pow(m as u32);
    let (count, step) = if total <= budget {
        (total, 1)
    } else {
        let mut step = total / budget + 1;
        while gcd(step, total) != 1 {
            step += 1;
        }
        (budget, step)
    };
    let out = (0..count)
        .map(|k| {
            let mut idx = (k * step) % total;
            (0..m)
                .map(|_| {
                    let d = (idx % p) as usize;
                    idx /= p;
                    lists[d].clone()
                })
                .collect()
        })
        .collect();
    (total, out)
}

/// Compares the library's voting functions and leave-one-out report with
/// the naive versions on one pool. Returns a description of the first
/// mismatch.
pub fn check_pool(pool: &[Vec<usize>], neurons: usize) -> Result<(), String> {
    use neurank::rankers::{Method, NeuronRanking, NeuronSet};
    use neurank::voting;

    let sets: Vec<NeuronSet> = pool
        .iter()
        .map(|ids| NeuronSet {
            s: ids.len(),
            ids: ids.clone(),
            method: Method::Probeless,
        })
        .collect();
    for (i, a) in sets.iter().enumerate() {
        for (j, b) in sets.iter().enumerate() {
            let (x, y) = (voting::overlap(a, b), overlap(&pool[i], &pool[j], neurons));
            if x != y {
                return Err(format!("overlap {:?} {:?}: {x} vs {y}", pool[i], pool[j]));
            }
        }
    }
    let weights = voting::borda_weights(&sets, neurons);
    let naive_w: Vec<u64> = (0..neurons).map(|n| borda_weight(n, pool)).collect();
    if weights != naive_w {
        return Err(format!("borda weights {pool:?}: {weights:?} vs {naive_w:?}"));
    }
    let order = voting::borda_aggregate(&sets, neurons);
    if order != borda_order(pool, neurons) {
        return Err(format!("borda order {pool:?}"));
    }
    for i in 0..sets.len() {
        let others: Vec<NeuronSet> = sets.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| s.clone()).collect();
        let naive_others: Vec<Vec<usize>> =
            pool.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| s.clone()).collect();
        match (voting::avg_overlap(&sets[i], &others), voting::neuron_vote(&sets[i], &others, neurons)) {
            (Ok(a), Ok(v)) => {
                let (na, nv) = (
                    avg_overlap(&pool[i], &naive_others, neurons),
                    neuron_vote(&pool[i], &naive_others, neurons),
                );
                if a != na || v != nv {
                    return Err(format!("scores of {i} in {pool:?}: ({a}, {v}) vs ({na}, {nv})"));
                }
            }
            (Err(_), Err(_)) if others.is_empty() => {}
            other => return Err(format!("unexpected result {other:?} for {pool:?}")),
        }
    }

    // the same pool through the ranking-level report
    let s = pool[0].len();
    if pool.len() >= 2 && pool.len() <= Method::VOTERS.len() && pool.iter().all(|l| l.len() == s) {
        let mut mp = voting::MethodPool::new();
        for (k, ids) in pool.iter().enumerate() {
            let mut order = ids.clone();
            order.extend((0..neurons).filter(|n| !ids.contains(n)));
            mp.insert(NeuronRanking::from_order(Method::VOTERS[k], "c", 0, &order)).map_err(|e| e.to_string())?;
        }
        let report = voting::leave_one_out_report(&mp, &[], s).map_err(|e| e.to_string())?;
        for (i, score) in report.scores.iter().enumerate() {
            let naive_others: Vec<Vec<usize>> =
                pool.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| s.clone()).collect();
            if score.avg_overlap != avg_overlap(&pool[i], &naive_others, neurons)
                || score.neuron_vote != neuron_vote(&pool[i], &naive_others, neurons)
            {
                return Err(format!("report score {i} for {pool:?}"));
            }
        }
    }
    Ok(())
}

/// A uniformly random ordered `s`-list over `0..n`.
pub fn random_list(rng: &mut impl Rng, n: usize, s: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, s).into_vec()
}

/// Correlated two-class data: class means differ on a random subset of
/// neurons, and a random mixing matrix couples the neurons.
pub fn gaussian_instance(seed: u64, neurons: usize, rows_per_class: usize) -> (ActivationMatrix, ConceptDataset) {
    let mut r = neurank::rng::seeded(seed);
    let mix: Vec<f64> = (0..neurons * neurons)
        .map(|i| if i % (neurons + 1) == 0 { 1.0 } else { r.random_range(-0.6..0.6) })
        .collect();
    let shift: Vec<f64> = (0..neurons)
        .map(|_| if r.random_bool(0.5) { r.random_range(-1.5..1.5) } else { 0.0 })
        .collect();
    let scale: Vec<f64> = (0..neurons).map(|_| r.random_range(0.5..2.0)).collect();
    let mut data = Vec::new();
    for row in 0..2 * rows_per_class {
        let e: Vec<f64> = (0..neurons).map(|_| r.sample(rand_distr::StandardNormal)).collect();
        for i in 0..neurons {
            let mut v: f64 = (0..neurons).map(|j| mix[i * neurons + j] * e[j]).sum();
            v *= scale[i];
            if row < rows_per_class {
                v += shift[i];
            }
            data.push(v as f32);
        }
    }
    let m = ActivationMatrix::new(data, 2 * rows_per_class, neurons, 0, "t").unwrap();
    let ds = ConceptDataset::all_train("c", (0..rows_per_class).collect(), (rows_per_class..2 * rows_per_class).collect())
        .unwrap();
    (m, ds)
}

pub fn dense(model: &GaussianModel) -> [DenseClass<'_>; 2] {
    [0, 1].map(|c| DenseClass {
        mean: &model.classes[c].mean,
        cov: &model.classes[c].cov,
        log_prior: model.classes[c].log_prior,
    })
}

pub fn train_xs(m: &ActivationMatrix, ds: &ConceptDataset) -> (Vec<Vec<f64>>, Vec<u8>) {
    let (rows, labels) = ds.split_rows(Split::Train);
    let xs = rows.iter().map(|&r| m.row(r).iter().map(|&v| v as f64).collect()).collect();
    (xs, labels)
}

