//! Simulated crowds of noisy preference labelers.
//!
//! A user compares two segments by their discounted returns under the user's
//! own objective, answers through a Bradley-Terry choice with rationality
//! `beta`, and then flips the answer with probability `epsilon`.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{discounted_return, Segment};
use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::seed::{self, SimRng};

/// A preference label: `+1` prefers the first segment, `-1` the second.
pub type Label = i8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserModel {
    pub beta: f64,
    /// Myopia discount applied to the user's own return estimate.
    pub gamma: f64,
    pub epsilon: f64,
    pub objective_id: usize,
}

impl UserModel {
    pub fn new(beta: f64, gamma: f64, epsilon: f64, objective_id: usize) -> Result<Self> {
        let user = Self { beta, gamma, epsilon, objective_id };
        user.validate()?;
        Ok(user)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(invalid(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon < 0.5) {
            return Err(invalid(format!("epsilon must be in [0, 0.5), got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// An ordered list of users; row `i` of every label matrix belongs to `users[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crowd {
    pub users: Vec<UserModel>,
    pub seed: u64,
}

impl Crowd {
    pub fn new(users: Vec<UserModel>, seed: u64) -> Result<Self> {
        if users.is_empty() {
            return Err(invalid("crowd must contain at least one user"));
        }
        for u in &users {
            u.validate()?;
        }
        Ok(Self { users, seed })
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Whether more than half the users follow objective 0.
    pub fn has_strict_majority(&self) -> bool {
        2 * self.users.iter().filter(|u| u.objective_id == 0).count() > self.users.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let crowd: Crowd = serde_json::from_str(text)?;
        Crowd::new(crowd.users, crowd.seed)
    }
}

/// A pair of equal-length segments to compare.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub a: Segment,
    pub b: Segment,
}

impl Query {
    pub fn new(a: Segment, b: Segment) -> Result<Self> {
        if a.len() != b.len() {
            return Err(invalid(format!("query segments differ in length: {} vs {}", a.len(), b.len())));
        }
        Ok(Self { a, b })
    }

    pub fn swapped(&self) -> Self {
        Self { a: self.b.clone(), b: self.a.clone() }
    }

    /// Label under the undiscounted return of `objective`; `None` on a tie.
    /// Returns closer than [`TIE_TOLERANCE`] (relative to their magnitude)
    /// count as tied, so summation rounding never decides the label.
    pub fn truth(&self, objective: usize) -> Result<Option<Label>> {
        let (ra, rb) = (self.a.total_reward(objective)?, self.b.total_reward(objective)?);
        let tol = TIE_TOLERANCE * ra.abs().max(rb.abs()).max(1.0);
        Ok(if ra - rb > tol {
            Some(1)
        } else if rb - ra > tol {
            Some(-1)
        } else {
            None
        })
    }
}

pub const TIE_TOLERANCE: f64 = 1e-9;

/// `P[A > B] = exp(beta R_A) / (exp(beta R_A) + exp(beta R_B))`, evaluated
/// after subtracting the larger exponent.
pub fn preference_prob(return_a: f64, return_b: f64, beta: f64) -> Result<f64> {
    if !return_a.is_finite() || !return_b.is_finite() || !beta.is_finite() {
        return Err(invalid(format!("non-finite preference input ({return_a}, {return_b}, {beta})")));
    }
    if beta < 0.0 {
        return Err(invalid(format!("beta must be >= 0, got {beta}")));
    }
    let (xa, xb) = (beta * return_a, beta * return_b);
    let m = xa.max(xb);
    let (ea, eb) = ((xa - m).exp(), (xb - m).exp());
    Ok(ea / (ea + eb))
}

/// Draws one label from `user` for `query`. Consumes exactly two uniforms.
pub fn sample_label(user: &UserModel, query: &Query, rng: &mut SimRng) -> Result<Label> {
    let ra = discounted_return(&query.a, user.objective_id, user.gamma)?;
    let rb = discounted_return(&query.b, user.objective_id, user.gamma)?;
    let p = preference_prob(ra, rb, user.beta)?;
    let draw: f64 = rng.gen();
    let slip: f64 = rng.gen();
    let label = if draw < p { 1 } else { -1 };
    Ok(if slip < user.epsilon { -label } else { label })
}

/// Closed interval `[lo, hi]` for uniform draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn draw(&self, rng: &mut SimRng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }

    fn check(&self, name: &str, ok: impl Fn(f64) -> bool) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi {
            return Err(invalid(format!("{name} range [{}, {}] is empty", self.lo, self.hi)));
        }
        if !ok(self.lo) || !ok(self.hi) {
            return Err(invalid(format!("{name} range [{}, {}] violates user invariants", self.lo, self.hi)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrowdRanges {
    pub gamma: ParamRange,
    pub beta: ParamRange,
    pub epsilon: ParamRange,
}

impl Default for CrowdRanges {
    fn default() -> Self {
        Self {
            gamma: ParamRange::new(0.98, 1.0),
            beta: ParamRange::new(0.1, 10.0),
            epsilon: ParamRange::new(0.0, 0.2),
        }
    }
}

impl CrowdRanges {
    pub fn validate(&self) -> Result<()> {
        self.gamma.check("gamma", |g| g > 0.0 && g <= 1.0)?;
        self.beta.check("beta", |b| b >= 0.0)?;
        self.epsilon.check("epsilon", |e| (0.0..0.5).contains(&e))?;
        Ok(())
    }
}

/// The last `count` users of a crowd follow `objective_id` instead of objective 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinoritySpec {
    pub count: usize,
    pub objective_id: usize,
}

pub fn sample_crowd(
    m: usize,
    ranges: &CrowdRanges,
    minority: Option<MinoritySpec>,
    rng: &mut SimRng,
) -> Result<Crowd> {
    if m == 0 {
        return Err(invalid("crowd size must be at least 1"));
    }
    ranges.validate()?;
    let minority_count = minority.map_or(0, |s| s.count);
    if 2 * minority_count >= m && minority_count > 0 {
        return Err(invalid(format!("minority of {minority_count} leaves no strict majority in a crowd of {m}")));
    }
    let seed = rng.gen();
    let users = (0..m)
        .map(|i| {
            let gamma = ranges.gamma.draw(rng);
            let beta = ranges.beta.draw(rng);
            let epsilon = ranges.epsilon.draw(rng);
            let objective_id = match minority {
                Some(spec) if i >= m - spec.count => spec.objective_id,
                _ => 0,
            };
            UserModel::new(beta, gamma, epsilon, objective_id)
        })
        .collect::<Result<Vec<_>>>()?;
    Crowd::new(users, seed)
}

/// Dense `M x S` matrix of preference labels, stored row-major (one row per user).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    entries: Vec<Label>,
    user_ids: Vec<usize>,
    query_ids: Vec<usize>,
}

impl LabelMatrix {
    pub fn new(entries: Vec<Label>, user_ids: Vec<usize>, query_ids: Vec<usize>) -> Result<Self> {
        if entries.len() != user_ids.len() * query_ids.len() {
            return Err(invalid(format!(
                "{} entries do not fill a {}x{} matrix",
                entries.len(),
                user_ids.len(),
                query_ids.len()
            )));
        }
        if let Some(bad) = entries.iter().find(|&&e| e != 1 && e != -1) {
            return Err(invalid(format!("label entries must be -1 or +1, found {bad}")));
        }
        Ok(Self { entries, user_ids, query_ids })
    }

    /// Builds from per-user rows with ids `0..M` and `0..S`.
    pub fn from_rows(rows: &[Vec<Label>]) -> Result<Self> {
        let s = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != s) {
            return Err(invalid("ragged label rows"));
        }
        Self::new(rows.concat(), (0..rows.len()).collect(), (0..s).collect())
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_queries(&self) -> usize {
        self.query_ids.len()
    }

    pub fn user_ids(&self) -> &[usize] {
        &self.user_ids
    }

    pub fn query_ids(&self) -> &[usize] {
        &self.query_ids
    }

    pub fn row(&self, user: usize) -> &[Label] {
        let s = self.n_queries();
        &self.entries[user * s..(user + 1) * s]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Label]> {
        (0..self.n_users()).map(move |i| self.row(i))
    }

    pub fn get(&self, user: usize, query: usize) -> Label {
        self.entries[user * self.n_queries() + query]
    }

    /// Sub-matrix keeping the given user rows, in the given order.
    pub fn select_users(&self, users: &[usize]) -> Result<Self> {
        if let Some(&bad) = users.iter().find(|&&u| u >= self.n_users()) {
            return Err(invalid(format!("user row {bad} out of range")));
        }
        let entries = users.iter().flat_map(|&u| self.row(u).iter().copied()).collect();
        let ids = users.iter().map(|&u| self.user_ids[u]).collect();
        Self::new(entries, ids, self.query_ids.clone())
    }

    /// Sub-matrix keeping the given query columns, in the given order.
    pub fn select_queries(&self, queries: &[usize]) -> Result<Self> {
        if let Some(&bad) = queries.iter().find(|&&q| q >= self.n_queries()) {
            return Err(invalid(format!("query column {bad} out of range")));
        }
        let entries = self.rows().flat_map(|row| queries.iter().map(move |&q| row[q])).collect();
        let ids = queries.iter().map(|&q| self.query_ids[q]).collect();
        Self::new(entries, self.user_ids.clone(), ids)
    }

    /// Every entry negated.
    pub fn flipped(&self) -> Self {
        Self {
            entries: self.entries.iter().map(|e| -e).collect(),
            user_ids: self.user_ids.clone(),
            query_ids: self.query_ids.clone(),
        }
    }

    /// CSV with one row per query: `query_id,u_<id0>,...,u_<idM-1>`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["query_id".to_string()];
        header.extend(self.user_ids.iter().map(|u| format!("u_{u}")));
        out.write_record(&header)?;
        for (k, qid) in self.query_ids.iter().enumerate() {
            let mut rec = vec![qid.to_string()];
            rec.extend((0..self.n_users()).map(|i| self.get(i, k).to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("query_id") {
            return Err(invalid("label CSV must start with a query_id column"));
        }
        let user_ids = header
            .iter()
            .skip(1)
            .map(|h| {
                h.strip_prefix("u_")
                    .and_then(|id| id.parse().ok())
                    .ok_or_else(|| invalid(format!("bad user column {h:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let mut query_ids = Vec::new();
        let mut columns = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |f: &str| -> Result<i64> {
                f.trim().parse().map_err(|_| invalid(format!("row {}: bad value {f:?}", line + 2)))
            };
            query_ids.push(parse(&rec[0])? as usize);
            let col = rec.iter().skip(1).map(|f| parse(f).map(|v| v as Label)).collect::<Result<Vec<_>>>()?;
            if col.len() != user_ids.len() {
                return Err(invalid(format!("row {} has {} labels, expected {}", line + 2, col.len(), user_ids.len())));
            }
            columns.push(col);
        }
        let entries = (0..user_ids.len()).flat_map(|i| columns.iter().map(move |c| c[i])).collect();
        Self::new(entries, user_ids, query_ids)
    }
}

/// Every user labels every query. Each user row draws from its own stream,
/// seeded from `rng` in user order.
pub fn label_matrix(crowd: &Crowd, queries: &[Query], rng: &mut SimRng) -> Result<LabelMatrix> {
    label_matrix_with(crowd, queries, rng, Exec::default())
}

pub fn label_matrix_with(crowd: &Crowd, queries: &[Query], rng: &mut SimRng, exec: Exec) -> Result<LabelMatrix> {
    if crowd.is_empty() {
        return Err(invalid("crowd must contain at least one user"));
    }
    let row_seeds: Vec<u64> = crowd.users.iter().map(|_| rng.gen()).collect();
    let rows = exec.try_map(crowd.len(), |i| {
        let mut row_rng = seed::rng(row_seeds[i]);
        queries
            .iter()
            .map(|q| sample_label(&crowd.users[i], q, &mut row_rng))
            .collect::<Result<Vec<Label>>>()
    })?;
    LabelMatrix::new(rows.concat(), (0..crowd.len()).collect(), (0..queries.len()).collect())
}

/// Fraction of positions where `row` disagrees with `truth`.
pub fn empirical_user_error(row: &[Label], truth: &[Label]) -> Result<f64> {
    if row.len() != truth.len() {
        return Err(invalid(format!("length mismatch: {} labels vs {} truths", row.len(), truth.len())));
    }
    if row.is_empty() {
        return Err(invalid("cannot compute an error rate over zero labels"));
    }
    Ok(row.iter().zip(truth).filter(|(a, b)| a != b).count() as f64 / row.len() as f64)
}
