//! Minority detection: 1-D Gaussian mixtures over SML user weights, BIC model
//! selection, cluster assignment and per-cluster re-aggregation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{majority_vote, sml_labels, AggregateResult};
use crate::crowd::LabelMatrix;
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::seed::{self, SimRng};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_K_MAX: usize = 3;
const LL_TOLERANCE: f64 = 1e-8;
const MAX_EM_ITERATIONS: usize = 500;

/// Components are ordered by ascending mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub k: usize,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub mixture_weights: Vec<f64>,
    pub log_likelihood: f64,
    pub n: usize,
}

impl GmmFit {
    fn log_component_densities(&self, x: f64, out: &mut [f64]) {
        for j in 0..self.k {
            out[j] = log_weighted_density(x, self.mixture_weights[j], self.means[j], self.variances[j]);
        }
    }
}

fn log_weighted_density(x: f64, weight: f64, mean: f64, var: f64) -> f64 {
    weight.ln() - 0.5 * (2.0 * PI * var).ln() - (x - mean).powi(2) / (2.0 * var)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// One EM run from a fixed initialization.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub fit: GmmFit,
    /// Log-likelihood after each E-step, starting from the initialization.
    pub ll_trace: Vec<f64>,
    pub converged: bool,
}

/// Runs EM from the given means, with every variance at the data variance and
/// uniform weights.
pub fn run_em(data: &[f64], init_means: &[f64]) -> Result<EmRun> {
    let n = data.len();
    let k = init_means.len();
    if k == 0 || n < k {
        return Err(invalid(format!("need n >= k >= 1, got n={n}, k={k}")));
    }
    let mu = data.iter().sum::<f64>() / n as f64;
    let data_var = (data.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n as f64).max(VARIANCE_FLOOR);

    let mut fit = GmmFit {
        k,
        means: init_means.to_vec(),
        variances: vec![data_var; k],
        mixture_weights: vec![1.0 / k as f64; k],
        log_likelihood: f64::NEG_INFINITY,
        n,
    };
    let mut resp = vec![0.0; n * k];
    let mut ll_trace = Vec::new();
    let mut converged = false;
    for _ in 0..=MAX_EM_ITERATIONS {
        let ll = e_step(&fit, data, &mut resp);
        ll_trace.push(ll);
        fit.log_likelihood = ll;
        if let [.., prev, last] = ll_trace[..] {
            if last - prev < LL_TOLERANCE {
                converged = true;
                break;
            }
        }
        if ll_trace.len() > MAX_EM_ITERATIONS {
            break;
        }
        m_step(&mut fit, data, &resp, data_var);
    }
    Ok(EmRun { fit, ll_trace, converged })
}

fn e_step(fit: &GmmFit, data: &[f64], resp: &mut [f64]) -> f64 {
    let k = fit.k;
    let mut ll = 0.0;
    for (i, &x) in data.iter().enumerate() {
        let row = &mut resp[i * k..(i + 1) * k];
        fit.log_component_densities(x, row);
        let lse = log_sum_exp(row);
        ll += lse;
        row.iter_mut().for_each(|r| *r = (*r - lse).exp());
    }
    ll
}

fn m_step(fit: &mut GmmFit, data: &[f64], resp: &[f64], data_var: f64) {
    let (n, k) = (data.len(), fit.k);
    for j in 0..k {
        let nj: f64 = (0..n).map(|i| resp[i * k + j]).sum();
        fit.mixture_weights[j] = nj / n as f64;
        if nj < 1e-300 {
            // dead component: keep its mean, reset its spread
            fit.variances[j] = data_var;
            continue;
        }
        let mean = (0..n).map(|i| resp[i * k + j] * data[i]).sum::<f64>() / nj;
        let var = (0..n).map(|i| resp[i * k + j] * (data[i] - mean).powi(2)).sum::<f64>() / nj;
        fit.means[j] = mean;
        fit.variances[j] = var.max(VARIANCE_FLOOR);
    }
}

/// Evenly spaced quantiles of the sorted data at levels (j + 1/2)/k.
fn quantile_means(sorted: &[f64], k: usize) -> Vec<f64> {
    let n = sorted.len();
    (0..k)
        .map(|j| {
            let pos = (j as f64 + 0.5) / k as f64 * (n - 1) as f64;
            let (lo, frac) = (pos.floor() as usize, pos.fract());
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        })
        .collect()
}

fn canonical(mut fit: GmmFit) -> GmmFit {
    let mut order: Vec<usize> = (0..fit.k).collect();
    order.sort_by(|&a, &b| fit.means[a].total_cmp(&fit.means[b]).then(a.cmp(&b)));
    fit.means = order.iter().map(|&j| fit.means[j]).collect();
    fit.variances = order.iter().map(|&j| fit.variances[j]).collect();
    fit.mixture_weights = order.iter().map(|&j| fit.mixture_weights[j]).collect();
    fit
}

pub fn fit_gmm_1d(data: &[f64], k: usize, restarts: usize, rng: &mut SimRng) -> Result<GmmFit> {
    fit_gmm_1d_with(data, k, restarts, rng, Exec::default())
}

/// Best-likelihood EM fit over `restarts` initializations. Restart 0 starts at
/// the plain quantiles; later restarts jitter each mean by
/// `U(-1/2, 1/2) * range / k`.
pub fn fit_gmm_1d_with(data: &[f64], k: usize, restarts: usize, rng: &mut SimRng, exec: Exec) -> Result<GmmFit> {
    let n = data.len();
    if k == 0 || n < k {
        return Err(invalid(format!("need n >= k >= 1, got n={n}, k={k}")));
    }
    if restarts == 0 {
        return Err(invalid("at least one restart required"));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(invalid("data must be finite"));
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let range = sorted[n - 1] - sorted[0];
    if k >= 2 && range == 0.0 {
        return Err(Error::DegenerateData(format!("all {n} points identical; cannot fit {k} components")));
    }
    let base = quantile_means(&sorted, k);
    let seeds: Vec<u64> = (0..restarts).map(|_| rng.gen()).collect();

    let runs = exec.try_map(restarts, |r| {
        let mut init = base.clone();
        if r > 0 {
            let mut rng = seed::rng(seeds[r]);
            for m in &mut init {
                *m += rng.gen_range(-0.5..0.5) * range / k as f64;
            }
        }
        let run = run_em(data, &init)?;
        debug_assert!(ll_is_monotone(&run.ll_trace), "EM log-likelihood decreased");
        Ok::<_, Error>(run)
    })?;
    let mut best: Option<GmmFit> = None;
    for run in runs {
        if !run.converged {
            log::debug!("EM restart hit the iteration cap");
        }
        if best.as_ref().is_none_or(|b| run.fit.log_likelihood > b.log_likelihood) {
            best = Some(run.fit);
        }
    }
    Ok(canonical(best.expect("restarts >= 1")))
}

/// Non-decreasing up to floating-point noise.
pub fn ll_is_monotone(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0))
}

/// `(3k - 1) ln n - 2 LL`.
pub fn bic(fit: &GmmFit) -> f64 {
    (3 * fit.k - 1) as f64 * (fit.n as f64).ln() - 2.0 * fit.log_likelihood
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSelection {
    pub best_k: usize,
    pub fit: GmmFit,
    pub bic: BTreeMap<usize, f64>,
}

pub fn select_model(data: &[f64], k_max: usize, restarts: usize, rng: &mut SimRng) -> Result<ModelSelection> {
    select_model_with(data, k_max, restarts, rng, Exec::default())
}

/// Fits `k = 1..=k_max` (skipping `k > n`) and keeps the lowest BIC, ties to
/// the smaller `k`. A `k >= 2` fit on identical data is skipped.
pub fn select_model_with(data: &[f64], k_max: usize, restarts: usize, rng: &mut SimRng, exec: Exec) -> Result<ModelSelection> {
    if k_max == 0 {
        return Err(invalid("k_max must be at least 1"));
    }
    if data.is_empty() {
        return Err(invalid("no data to cluster"));
    }
    let seeds: Vec<u64> = (0..k_max).map(|_| rng.gen()).collect();
    let mut best: Option<(usize, GmmFit, f64)> = None;
    let mut table = BTreeMap::new();
    for k in 1..=k_max.min(data.len()) {
        let fit = match fit_gmm_1d_with(data, k, restarts, &mut seed::rng(seeds[k - 1]), exec) {
            Ok(f) => f,
            Err(Error::DegenerateData(msg)) => {
                log::warn!("skipping k={k}: {msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let score = bic(&fit);
        table.insert(k, score);
        if best.as_ref().is_none_or(|(_, _, b)| score < *b) {
            best = Some((k, fit, score));
        }
    }
    let (best_k, fit, _) = best.expect("k = 1 always fits");
    Ok(ModelSelection { best_k, fit, bic: table })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub responsibilities: Vec<Vec<f64>>,
}

impl ClusterAssignment {
    /// Hard assignment with no responsibilities attached (e.g. a known split).
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let responsibilities = labels.iter().map(|&l| (0..k).map(|j| if j == l { 1.0 } else { 0.0 }).collect()).collect();
        Self { labels, responsibilities }
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }

    pub fn n_clusters(&self) -> usize {
        self.responsibilities.first().map_or(0, Vec::len).max(self.labels.iter().max().map_or(0, |m| m + 1))
    }
}

/// Posterior responsibilities and argmax labels (ties to the lower index).
pub fn assign_clusters(fit: &GmmFit, data: &[f64]) -> ClusterAssignment {
    let mut row = vec![0.0; fit.k];
    let mut labels = Vec::with_capacity(data.len());
    let mut responsibilities = Vec::with_capacity(data.len());
    for &x in data {
        fit.log_component_densities(x, &mut row);
        let lse = log_sum_exp(&row);
        let r: Vec<f64> = row.iter().map(|l| (l - lse).exp()).collect();
        let mut arg = 0;
        for j in 1..fit.k {
            if r[j] > r[arg] {
                arg = j;
            }
        }
        labels.push(arg);
        responsibilities.push(r);
    }
    ClusterAssignment { labels, responsibilities }
}

/// Aggregates each non-empty cluster on its own rows: SML for three or more
/// members, majority vote below that.
pub fn per_cluster_aggregate(matrix: &LabelMatrix, assignment: &ClusterAssignment) -> Result<BTreeMap<usize, AggregateResult>> {
    if assignment.labels.len() != matrix.n_users() {
        return Err(invalid(format!(
            "assignment covers {} users, matrix has {}",
            assignment.labels.len(),
            matrix.n_users()
        )));
    }
    let mut out = BTreeMap::new();
    for c in 0..assignment.n_clusters() {
        let members = assignment.members(c);
        let result = match members.len() {
            0 => {
                log::warn!("cluster {c} is empty; skipped");
                continue;
            }
            1 | 2 => majority_vote(&matrix.select_users(&members)?)?,
            _ => sml_labels(&matrix.select_users(&members)?)?,
        };
        out.insert(c, result);
    }
    Ok(out)
}

/// Fraction of items whose predicted cluster matches the truth under the best
/// one-to-one relabelling of predicted clusters.
pub fn matching_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(invalid("label vectors must be non-empty and equally long"));
    }
    let kp = predicted.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let k = kp.max(kt);
    if k > 8 {
        return Err(invalid(format!("too many clusters ({k}) for exhaustive matching")));
    }
    let mut counts = vec![vec![0usize; k]; k];
    for (&p, &t) in predicted.iter().zip(truth) {
        counts[p][t] += 1;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        best = best.max((0..k).map(|i| counts[i][p[i]]).sum());
    });
    Ok(best as f64 / predicted.len() as f64)
}

fn permute(p: &mut [usize], i: usize, visit: &mut impl FnMut(&[usize])) {
    if i == p.len() {
        visit(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permute(p, i + 1, visit);
        p.swap(i, j);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: f64,
    pub variance: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub best_k: usize,
    pub bic: BTreeMap<usize, f64>,
    pub components: Vec<Component>,
    /// user id -> cluster
    pub assignments: BTreeMap<usize, usize>,
}

impl ClusterReport {
    pub fn new(selection: &ModelSelection, user_ids: &[usize], assignment: &ClusterAssignment) -> Result<Self> {
        if user_ids.len() != assignment.labels.len() {
            return Err(invalid("one user id per assignment required"));
        }
        let f = &selection.fit;
        Ok(Self {
            best_k: selection.best_k,
            bic: selection.bic.clone(),
            components: (0..f.k)
                .map(|j| Component { mean: f.means[j], variance: f.variances[j], weight: f.mixture_weights[j] })
                .collect(),
            assignments: user_ids.iter().copied().zip(assignment.labels.iter().copied()).collect(),
        })
    }
}
