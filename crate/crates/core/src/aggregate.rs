//! Ground-truth-free label aggregation: majority vote and the spectral
//! meta-learner (SML).
//!
//! SML weights each user by their component in the lead eigenvector of the
//! users' label covariance, then takes a weighted sign vote per query.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::crowd::{empirical_user_error, Label, LabelMatrix};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MAJ")]
    Majority,
    #[serde(rename = "SML")]
    Spectral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub method: Method,
    pub labels: Vec<Label>,
    /// Lead-eigenvector weights (SML only).
    pub weights: Option<Vec<f64>>,
    pub eigenvalue: Option<f64>,
}

impl AggregateResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn sign_or_positive(sum: f64) -> Label {
    if sum < 0.0 {
        -1
    } else {
        1
    }
}

/// Per-column sign of the label sum; a zero sum resolves to +1.
pub fn majority_vote(matrix: &LabelMatrix) -> Result<AggregateResult> {
    if matrix.n_users() == 0 || matrix.n_queries() == 0 {
        return Err(invalid("cannot aggregate an empty label matrix"));
    }
    Ok(AggregateResult { method: Method::Majority, labels: column_votes(matrix), weights: None, eigenvalue: None })
}

fn column_votes(matrix: &LabelMatrix) -> Vec<Label> {
    let mut sums = vec![0i64; matrix.n_queries()];
    for row in matrix.rows() {
        for (s, &l) in sums.iter_mut().zip(row) {
            *s += l as i64;
        }
    }
    sums.into_iter().map(|s| sign_or_positive(s as f64)).collect()
}

/// Dense symmetric matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Builds from row-major data. Symmetry is not checked here; see
    /// [`lead_eigenvector`].
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(invalid("matrix must be square"));
        }
        Ok(Self { n, data: rows.concat() })
    }

    pub fn identity(n: usize, scale: f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = scale;
        }
        Self { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Per-user mean-centred covariance of the label rows, normalised by `S - 1`.
pub fn centered_covariance(matrix: &LabelMatrix) -> Result<SymMatrix> {
    let (m, s) = (matrix.n_users(), matrix.n_queries());
    if s < 2 {
        return Err(invalid(format!("covariance needs at least 2 queries, got {s}")));
    }
    let centered: Vec<Vec<f64>> = matrix
        .rows()
        .map(|row| {
            let mu = row.iter().map(|&l| l as f64).sum::<f64>() / s as f64;
            row.iter().map(|&l| l as f64 - mu).collect()
        })
        .collect();
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let c = dot(&centered[i], &centered[j]) / (s - 1) as f64;
            data[i * m + j] = c;
            data[j * m + i] = c;
        }
    }
    Ok(SymMatrix { n: m, data })
}

pub const POWER_TOLERANCE: f64 = 1e-10;
pub const POWER_MAX_ITERATIONS: usize = 10_000;
const SYMMETRY_TOLERANCE: f64 = 1e-9;
const DEGENERATE_GAP: f64 = 1e-8;
const DEFLATED_ITERATIONS: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct Eigenpair {
    pub value: f64,
    /// Unit vector with nonnegative component sum.
    pub vector: Vec<f64>,
    pub iterations: usize,
    /// The top of the spectrum is (numerically) repeated, so the returned
    /// vector is one of many admissible choices.
    pub degenerate: bool,
}

/// Largest eigenpair of a symmetric matrix by shifted power iteration.
///
/// The shift makes the iteration matrix positive semidefinite, so the
/// iteration converges to the largest eigenvalue rather than the largest in
/// magnitude. Iteration stops once the unit iterate moves less than
/// [`POWER_TOLERANCE`] in one step.
pub fn lead_eigenvector(q: &SymMatrix) -> Result<Eigenpair> {
    let n = q.dim();
    if n == 0 {
        return Err(invalid("empty matrix"));
    }
    if q.data.iter().any(|x| !x.is_finite()) {
        return Err(invalid("matrix has non-finite entries"));
    }
    let scale = q.data.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    for i in 0..n {
        for j in i + 1..n {
            if (q.get(i, j) - q.get(j, i)).abs() > SYMMETRY_TOLERANCE * scale {
                return Err(invalid(format!("matrix not symmetric at ({i},{j})")));
            }
        }
    }
    if q.frobenius_norm() == 0.0 {
        let u = 1.0 / (n as f64).sqrt();
        return Ok(Eigenpair { value: 0.0, vector: vec![u; n], iterations: 0, degenerate: n > 1 });
    }

    let shift = (0..n)
        .map(|i| {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| q.get(i, j).abs()).sum();
            off - q.get(i, i)
        })
        .fold(0.0f64, f64::max);

    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 1.0 / (i as f64 + 2.0)).collect();
    normalize(&mut v);
    let mut iterations = 0;
    loop {
        if iterations == POWER_MAX_ITERATIONS {
            return Err(Error::NoConvergence { iterations });
        }
        iterations += 1;
        let mut w = q.mul_vec(&v);
        for (wi, vi) in w.iter_mut().zip(&v) {
            *wi += shift * vi;
        }
        let len = norm(&w);
        if len == 0.0 {
            // start vector fell in the null space of Q + shift*I; any basis vector
            // outside it restarts the iteration
            match (0..n).find(|&k| norm(&q.mul_vec(&basis(n, k))) > 0.0) {
                Some(k) => {
                    v = basis(n, k);
                    continue;
                }
                None => unreachable!("nonzero matrix has a nonzero column"),
            }
        }
        w.iter_mut().for_each(|x| *x /= len);
        let change = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = w;
        if change < POWER_TOLERANCE {
            break;
        }
    }

    let value = dot(&v, &q.mul_vec(&v));
    let degenerate = n > 1 && second_eigenvalue(q, &v, value, shift) >= value - DEGENERATE_GAP * value.abs().max(1.0);
    orient(&mut v);
    Ok(Eigenpair { value, vector: v, iterations, degenerate })
}

fn basis(n: usize, k: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[k] = 1.0;
    e
}

fn normalize(v: &mut [f64]) {
    let len = norm(v);
    v.iter_mut().for_each(|x| *x /= len);
}

fn project_out(v: &mut [f64], unit: &[f64]) {
    let c = dot(v, unit);
    v.iter_mut().zip(unit).for_each(|(x, u)| *x -= c * u);
}

/// Rayleigh-quotient estimate of the largest eigenvalue on the orthogonal
/// complement of `lead` (a lower bound on the true second eigenvalue).
fn second_eigenvalue(q: &SymMatrix, lead: &[f64], lead_value: f64, shift: f64) -> f64 {
    let n = q.dim();
    let mut best = f64::NEG_INFINITY;
    for k in 0..n.min(2) {
        let mut v: Vec<f64> = (0..n).map(|i| if (i + k) % 2 == 0 { 1.0 } else { -0.5 } + i as f64 * 0.01).collect();
        project_out(&mut v, lead);
        if norm(&v) < 1e-12 {
            continue;
        }
        normalize(&mut v);
        for _ in 0..DEFLATED_ITERATIONS {
            let mut w = q.mul_vec(&v);
            w.iter_mut().zip(&v).for_each(|(wi, vi)| *wi += shift * vi);
            project_out(&mut w, lead);
            let len = norm(&w);
            if len < 1e-300 {
                break;
            }
            w.iter_mut().for_each(|x| *x /= len);
            v = w;
        }
        best = best.max(dot(&v, &q.mul_vec(&v)));
        if best >= lead_value {
            break;
        }
    }
    best
}

/// Sign convention: nonnegative component sum; on an exact zero sum the first
/// nonzero component is made positive.
fn orient(v: &mut [f64]) {
    let sum: f64 = v.iter().sum();
    let flip = if sum != 0.0 { sum < 0.0 } else { v.iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0) };
    if flip {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// SML labels `sign(sum_i f_i(x_k) v_i)`; zero inner sums fall back to the
/// column's majority vote. An all-zero covariance (every user constant)
/// reports uniform weights and uses majority vote throughout.
pub fn sml_labels(matrix: &LabelMatrix) -> Result<AggregateResult> {
    let m = matrix.n_users();
    if m == 0 {
        return Err(invalid("cannot aggregate an empty label matrix"));
    }
    if m < 3 {
        log::warn!("SML with {m} users: the covariance carries no usable spectral structure");
    }
    let q = centered_covariance(matrix)?;
    let majority = column_votes(matrix);
    if q.frobenius_norm() == 0.0 {
        let u = 1.0 / (m as f64).sqrt();
        return Ok(AggregateResult { method: Method::Spectral, labels: majority, weights: Some(vec![u; m]), eigenvalue: Some(0.0) });
    }
    let lead = lead_eigenvector(&q)?;
    if lead.degenerate {
        log::warn!("SML covariance has a repeated top eigenvalue; weights are not unique");
    }
    let mut scores = vec![0.0; matrix.n_queries()];
    for (row, w) in matrix.rows().zip(&lead.vector) {
        for (s, &l) in scores.iter_mut().zip(row) {
            *s += l as f64 * w;
        }
    }
    let labels = scores
        .iter()
        .zip(&majority)
        .map(|(&s, &maj)| if s > 0.0 { 1 } else if s < 0.0 { -1 } else { maj })
        .collect();
    Ok(AggregateResult { method: Method::Spectral, labels, weights: Some(lead.vector), eigenvalue: Some(lead.value) })
}

/// User indices ordered by descending weight; ties keep ascending index.
pub fn rank_users(weights: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx
}

/// Fraction of estimated labels that disagree with the truth.
pub fn label_error(estimate: &[Label], truth: &[Label]) -> Result<f64> {
    empirical_user_error(estimate, truth)
}

/// Label error restricted to positions where the truth is defined.
pub fn label_error_where_defined(estimate: &[Label], truth: &[Option<Label>]) -> Result<Option<f64>> {
    if estimate.len() != truth.len() {
        return Err(invalid(format!("length mismatch: {} labels vs {} truths", estimate.len(), truth.len())));
    }
    let (est, tru): (Vec<Label>, Vec<Label>) =
        estimate.iter().zip(truth).filter_map(|(&e, t)| t.map(|t| (e, t))).unzip();
    if est.is_empty() {
        return Ok(None);
    }
    label_error(&est, &tru).map(Some)
}

/// `user_id,weight` rows.
pub fn write_weights_csv<W: Write>(w: W, user_ids: &[usize], weights: &[f64]) -> Result<()> {
    if user_ids.len() != weights.len() {
        return Err(invalid("one weight per user required"));
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["user_id", "weight"])?;
    for (id, wt) in user_ids.iter().zip(weights) {
        out.write_record([id.to_string(), wt.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
