//! Bradley-Terry reward learning from aggregated preference labels.
//!
//! The reward model is a tanh MLP over concatenated one-hot state and action
//! features, so the first layer reduces to two row lookups.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crowd::{preference_prob, Label, Query};
use crate::env::{Action, Segment, State};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::seed::{self, SimRng};
use crate::stats::std_population;

pub const PROB_CLAMP: f64 = 1e-12;
pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_ENSEMBLE_SIZE: usize = 3;

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

fn layout(in_dim: usize, hidden: &[usize]) -> (Vec<Dense>, usize) {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut offset = 0;
    let mut n_in = in_dim;
    for &n_out in hidden.iter().chain(std::iter::once(&1)) {
        let w = offset;
        let b = w + n_in * n_out;
        offset = b + n_out;
        layers.push(Dense { w, b, n_in, n_out });
        n_in = n_out;
    }
    (layers, offset)
}

/// Scalar reward `r(s, a)`. Parameters are stored layer by layer as an
/// input-major weight block followed by the bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct RewardModel {
    n_states: usize,
    n_actions: usize,
    hidden: Vec<usize>,
    params: Vec<f64>,
    layers: Vec<Dense>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    n_states: usize,
    n_actions: usize,
    hidden: Vec<usize>,
    params: Vec<f64>,
}

impl TryFrom<Checkpoint> for RewardModel {
    type Error = Error;
    fn try_from(c: Checkpoint) -> Result<Self> {
        RewardModel::from_params(c.n_states, c.n_actions, c.hidden, c.params)
    }
}

impl From<RewardModel> for Checkpoint {
    fn from(m: RewardModel) -> Self {
        Checkpoint { n_states: m.n_states, n_actions: m.n_actions, hidden: m.hidden, params: m.params }
    }
}

impl PartialEq for Dense {
    fn eq(&self, o: &Self) -> bool {
        (self.w, self.b, self.n_in, self.n_out) == (o.w, o.b, o.n_in, o.n_out)
    }
}

/// Number of parameters for the given input size and hidden widths.
pub fn param_count(in_dim: usize, hidden: &[usize]) -> usize {
    layout(in_dim, hidden).1
}

impl RewardModel {
    pub fn zeros(n_states: usize, n_actions: usize, hidden: Vec<usize>) -> Result<Self> {
        let n = Self::check_dims(n_states, n_actions, &hidden)?;
        Self::from_params(n_states, n_actions, hidden, vec![0.0; n])
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn random(n_states: usize, n_actions: usize, hidden: Vec<usize>, rng: &mut SimRng) -> Result<Self> {
        let mut model = Self::zeros(n_states, n_actions, hidden)?;
        for layer in model.layers.clone() {
            let bound = 1.0 / (layer.n_in as f64).sqrt();
            for p in &mut model.params[layer.w..layer.b] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn from_params(n_states: usize, n_actions: usize, hidden: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let n = Self::check_dims(n_states, n_actions, &hidden)?;
        if params.len() != n {
            return Err(invalid(format!("expected {n} parameters, got {}", params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(invalid("parameters must be finite"));
        }
        let (layers, _) = layout(n_states + n_actions, &hidden);
        Ok(Self { n_states, n_actions, hidden, params, layers })
    }

    fn check_dims(n_states: usize, n_actions: usize, hidden: &[usize]) -> Result<usize> {
        if n_states == 0 || n_actions == 0 {
            return Err(invalid("need at least one state and one action"));
        }
        if hidden.contains(&0) {
            return Err(invalid("hidden widths must be positive"));
        }
        Ok(param_count(n_states + n_actions, hidden))
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Adds `c` to the output bias, shifting every reward by `c`.
    pub fn shift_output(&mut self, c: f64) {
        let last = self.layers.last().expect("output layer");
        self.params[last.b] += c;
    }

    fn check(&self, s: State, a: Action) -> Result<()> {
        if s >= self.n_states || a >= self.n_actions {
            return Err(invalid(format!("(state {s}, action {a}) outside {}x{} model", self.n_states, self.n_actions)));
        }
        Ok(())
    }

    /// Hidden activations per layer and the scalar output.
    fn forward(&self, s: State, a: Action) -> (Vec<Vec<f64>>, f64) {
        let p = &self.params;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.hidden.len());
        let last = self.layers.len() - 1;
        let mut out = 0.0;
        for (l, d) in self.layers.iter().enumerate() {
            let z: Vec<f64> = if l == 0 {
                let (rs, ra) = (d.w + s * d.n_out, d.w + (self.n_states + a) * d.n_out);
                (0..d.n_out).map(|j| p[rs + j] + p[ra + j] + p[d.b + j]).collect()
            } else {
                let x = &acts[l - 1];
                let mut z = p[d.b..d.b + d.n_out].to_vec();
                for (i, xi) in x.iter().enumerate() {
                    let row = &p[d.w + i * d.n_out..d.w + (i + 1) * d.n_out];
                    z.iter_mut().zip(row).for_each(|(zj, w)| *zj += xi * w);
                }
                z
            };
            if l == last {
                out = z[0];
            } else {
                acts.push(z.into_iter().map(f64::tanh).collect());
            }
        }
        (acts, out)
    }

    /// Accumulates `coef * d r(s,a) / d params` into `grad`.
    fn backward(&self, s: State, a: Action, acts: &[Vec<f64>], coef: f64, grad: &mut [f64]) {
        let p = &self.params;
        let mut delta = vec![coef];
        for l in (0..self.layers.len()).rev() {
            let d = self.layers[l];
            for j in 0..d.n_out {
                grad[d.b + j] += delta[j];
            }
            if l == 0 {
                let (rs, ra) = (d.w + s * d.n_out, d.w + (self.n_states + a) * d.n_out);
                for j in 0..d.n_out {
                    grad[rs + j] += delta[j];
                    grad[ra + j] += delta[j];
                }
            } else {
                let x = &acts[l - 1];
                let mut prev = vec![0.0; d.n_in];
                for i in 0..d.n_in {
                    let row = d.w + i * d.n_out;
                    let mut back = 0.0;
                    for j in 0..d.n_out {
                        grad[row + j] += x[i] * delta[j];
                        back += p[row + j] * delta[j];
                    }
                    prev[i] = back * (1.0 - x[i] * x[i]);
                }
                delta = prev;
            }
        }
    }

    pub fn score(&self, s: State, a: Action) -> Result<f64> {
        self.check(s, a)?;
        Ok(self.forward(s, a).1)
    }

    /// Undiscounted predicted return of a segment.
    pub fn segment_return(&self, segment: &Segment) -> Result<f64> {
        segment.steps().iter().map(|&(s, a)| self.score(s, a)).sum()
    }

    /// `r(s, a)` for every pair, indexed `s * n_actions + a`.
    pub fn reward_table(&self) -> Vec<f64> {
        (0..self.n_states).flat_map(|s| (0..self.n_actions).map(move |a| (s, a))).map(|(s, a)| self.forward(s, a).1).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// `P[A > B] = exp(sum_A r) / (exp(sum_A r) + exp(sum_B r))`.
pub fn model_pref_prob(model: &RewardModel, query: &Query) -> Result<f64> {
    preference_prob(model.segment_return(&query.a)?, model.segment_return(&query.b)?, 1.0)
}

fn check_label(label: Label) -> Result<()> {
    if label != 1 && label != -1 {
        return Err(invalid(format!("labels must be +1 or -1, got {label}")));
    }
    Ok(())
}

/// Labelled queries used to fit the reward model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreferenceDataset {
    items: Vec<(Query, Label)>,
}

impl PreferenceDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_items(items: Vec<(Query, Label)>) -> Result<Self> {
        let mut d = Self::new();
        for (q, l) in items {
            d.push(q, l)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, query: Query, label: Label) -> Result<()> {
        check_label(label)?;
        self.items.push((query, label));
        Ok(())
    }

    pub fn items(&self) -> &[(Query, Label)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Probability the model assigns to the labelled ordering, clamped away
/// from 0 and 1.
fn labelled_prob(ra: f64, rb: f64, label: Label) -> Result<(f64, bool)> {
    let p = if label == 1 { preference_prob(ra, rb, 1.0)? } else { preference_prob(rb, ra, 1.0)? };
    let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    Ok((clamped, clamped != p))
}

/// Mean cross-entropy of the labels under the model.
pub fn ce_loss(model: &RewardModel, items: &[(Query, Label)]) -> Result<f64> {
    if items.is_empty() {
        return Err(invalid("cross-entropy over an empty dataset"));
    }
    let mut cache: HashMap<(State, Action), f64> = HashMap::new();
    let mut ret = |seg: &Segment| -> Result<f64> {
        let mut total = 0.0;
        for &(s, a) in seg.steps() {
            total += match cache.get(&(s, a)) {
                Some(&r) => r,
                None => {
                    let r = model.score(s, a)?;
                    cache.insert((s, a), r);
                    r
                }
            };
        }
        Ok(total)
    };
    let mut loss = 0.0;
    for (q, label) in items {
        check_label(*label)?;
        let (ra, rb) = (ret(&q.a)?, ret(&q.b)?);
        loss -= labelled_prob(ra, rb, *label)?.0.ln();
    }
    Ok(loss / items.len() as f64)
}

/// Exact gradient of [`ce_loss`] with respect to the parameters.
///
/// Each item contributes `dL/dd = y (p_y - 1)` with `d = sum_A r - sum_B r`,
/// and zero where the clamp is active. Coefficients are pooled per distinct
/// `(s, a)` so each pair is back-propagated once.
pub fn grad_ce(model: &RewardModel, items: &[(Query, Label)]) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(invalid("gradient over an empty batch"));
    }
    let mut index: HashMap<(State, Action), usize> = HashMap::new();
    let mut pairs: Vec<(State, Action)> = Vec::new();
    for (q, label) in items {
        check_label(*label)?;
        for &(s, a) in q.a.steps().iter().chain(q.b.steps()) {
            model.check(s, a)?;
            index.entry((s, a)).or_insert_with(|| {
                pairs.push((s, a));
                pairs.len() - 1
            });
        }
    }
    let forwards: Vec<(Vec<Vec<f64>>, f64)> = pairs.iter().map(|&(s, a)| model.forward(s, a)).collect();
    let ret = |seg: &Segment| -> f64 { seg.steps().iter().map(|sa| forwards[index[sa]].1).sum() };

    let n = items.len() as f64;
    let mut coef = vec![0.0; pairs.len()];
    for (q, label) in items {
        let (p, clamped) = labelled_prob(ret(&q.a), ret(&q.b), *label)?;
        if clamped {
            continue;
        }
        let c = *label as f64 * (p - 1.0) / n;
        for sa in q.a.steps() {
            coef[index[sa]] += c;
        }
        for sa in q.b.steps() {
            coef[index[sa]] -= c;
        }
    }
    let mut grad = vec![0.0; model.n_params()];
    for (u, &(s, a)) in pairs.iter().enumerate() {
        if coef[u] != 0.0 {
            model.backward(s, a, &forwards[u].0, coef[u], &mut grad);
        }
    }
    Ok(grad)
}

/// Fraction of items whose label agrees with thresholding the model's
/// preference probability at 1/2 (exactly 1/2 counts as +1).
pub fn accuracy(model: &RewardModel, items: &[(Query, Label)]) -> Result<f64> {
    if items.is_empty() {
        return Err(invalid("accuracy over an empty dataset"));
    }
    let mut hits = 0;
    for (q, label) in items {
        let predicted = if model_pref_prob(model, q)? >= 0.5 { 1 } else { -1 };
        hits += usize::from(predicted == *label);
    }
    Ok(hits as f64 / items.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 64, learning_rate: 1e-3 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let (c1, c2) = (1.0 - Self::B1.powi(self.t), 1.0 - Self::B2.powi(self.t));
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Shuffled minibatch Adam on the cross-entropy loss. Returns the full-data
/// loss after each epoch.
pub fn train(model: &mut RewardModel, data: &PreferenceDataset, cfg: &TrainConfig, rng: &mut SimRng) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    let mut adam = Adam::new(model.n_params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data.items[i].clone()));
            let grad = grad_ce(model, &batch)?;
            adam.step(&mut model.params, &grad, cfg.learning_rate);
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingFailure(format!("non-finite parameters after epoch {epoch}")));
        }
        let loss = ce_loss(model, data.items())?;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure(format!("non-finite loss at epoch {epoch}")));
        }
        trace.push(loss);
    }
    Ok(trace)
}

/// `epoch,loss` rows.
pub fn write_loss_csv<W: Write>(w: W, trace: &[f64]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "loss"])?;
    for (e, l) in trace.iter().enumerate() {
        out.write_record([e.to_string(), l.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEnsemble {
    pub members: Vec<RewardModel>,
}

impl RewardEnsemble {
    pub fn new(members: Vec<RewardModel>) -> Result<Self> {
        if members.len() < 2 {
            return Err(invalid("an ensemble needs at least 2 members"));
        }
        let shape = |m: &RewardModel| (m.n_states, m.n_actions, m.hidden.clone());
        if members.iter().any(|m| shape(m) != shape(&members[0])) {
            return Err(invalid("ensemble members must share one architecture"));
        }
        Ok(Self { members })
    }

    /// Independently initialised members, one seed per member drawn from `rng`.
    pub fn random(n_states: usize, n_actions: usize, hidden: &[usize], size: usize, rng: &mut SimRng) -> Result<Self> {
        let seeds: Vec<u64> = (0..size).map(|_| rng.gen()).collect();
        let members =
            seeds.iter().map(|&s| RewardModel::random(n_states, n_actions, hidden.to_vec(), &mut seed::rng(s))).collect::<Result<_>>()?;
        Self::new(members)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Trains every member on the full dataset, each with its own stream.
    pub fn train(&mut self, data: &PreferenceDataset, cfg: &TrainConfig, rng: &mut SimRng, exec: Exec) -> Result<Vec<Vec<f64>>> {
        let seeds: Vec<u64> = self.members.iter().map(|_| rng.gen()).collect();
        let members = &self.members;
        let results = exec.try_map(members.len(), |i| {
            let mut m = members[i].clone();
            let trace = train(&mut m, data, cfg, &mut seed::rng(seeds[i]))?;
            Ok::<_, Error>((m, trace))
        })?;
        let mut traces = Vec::with_capacity(results.len());
        for (i, (m, t)) in results.into_iter().enumerate() {
            self.members[i] = m;
            traces.push(t);
        }
        Ok(traces)
    }

    /// Population std of the members' preference probabilities.
    pub fn disagreement(&self, query: &Query) -> Result<f64> {
        let probs = self.members.iter().map(|m| model_pref_prob(m, query)).collect::<Result<Vec<_>>>()?;
        Ok(std_population(&probs))
    }

    /// Mean member reward for every `(s, a)`, indexed `s * n_actions + a`.
    pub fn mean_reward_table(&self) -> Vec<f64> {
        let tables: Vec<Vec<f64>> = self.members.iter().map(RewardModel::reward_table).collect();
        let k = tables.len() as f64;
        (0..tables[0].len()).map(|i| tables.iter().map(|t| t[i]).sum::<f64>() / k).collect()
    }
}

/// Indices of the `n_query` candidates with the largest ensemble
/// disagreement, highest first; ties keep candidate order.
pub fn select_queries(ensemble: &RewardEnsemble, candidates: &[Query], n_query: usize) -> Result<Vec<usize>> {
    if n_query > candidates.len() {
        return Err(invalid(format!("asked for {n_query} queries from {} candidates", candidates.len())));
    }
    let stds = candidates.iter().map(|q| ensemble.disagreement(q)).collect::<Result<Vec<_>>>()?;
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| stds[b].total_cmp(&stds[a]).then(a.cmp(&b)));
    idx.truncate(n_query);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn seg(steps: &[(State, Action)]) -> Segment {
        Segment::new(steps.to_vec(), vec![vec![0.0; steps.len()]]).unwrap()
    }

    fn query(a: &[(State, Action)], b: &[(State, Action)]) -> Query {
        Query::new(seg(a), seg(b)).unwrap()
    }

    fn random_query(rng: &mut SimRng, ns: usize, na: usize, h: usize) -> Query {
        let mut side = || -> Vec<(State, Action)> { (0..h).map(|_| (rng.gen_range(0..ns), rng.gen_range(0..na))).collect() };
        let (a, b) = (side(), side());
        query(&a, &b)
    }

    /// Linear model (no hidden layer): r(s, a) = w[s] + w[ns + a] + b.
    fn linear(ns: usize, na: usize, w: Vec<f64>, b: f64) -> RewardModel {
        let mut p = w;
        p.push(b);
        RewardModel::from_params(ns, na, vec![], p).unwrap()
    }

    #[test]
    fn parameter_count() {
        for in_dim in [2, 29, 100] {
            assert_eq!(param_count(in_dim, &[32]), (in_dim + 1) * 32 + 33);
        }
        let m = RewardModel::random(25, 4, vec![32], &mut seed::rng(0)).unwrap();
        assert_eq!(m.n_params(), 30 * 32 + 33);
        assert!(RewardModel::from_params(2, 2, vec![3], vec![0.0; 5]).is_err());
        assert!(RewardModel::zeros(2, 2, vec![0]).is_err());
    }

    #[test]
    fn zero_model() {
        let m = RewardModel::zeros(4, 3, vec![32]).unwrap();
        assert_eq!(m.score(2, 1).unwrap(), 0.0);
        let q = query(&[(0, 0), (1, 2)], &[(3, 1), (2, 2)]);
        assert_eq!(model_pref_prob(&m, &q).unwrap(), 0.5);
        let items = vec![(q.clone(), 1), (q.swapped(), -1), (q, -1)];
        assert_relative_eq!(ce_loss(&m, &items).unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(m.score(4, 0).is_err() && m.score(0, 3).is_err());
    }

    #[test]
    fn hand_network() {
        // 2 states, 1 action, 2 hidden units
        // W1 rows: s0, s1, a0; b1; w_out; b_out
        let params = vec![0.5, -1.0, 0.2, 0.3, 0.1, 0.1, 0.0, 0.05, 2.0, -1.0, 0.25];
        let m = RewardModel::from_params(2, 1, vec![2], params).unwrap();
        let h0 = (0.5f64 + 0.1 + 0.0).tanh();
        let h1 = (-1.0f64 + 0.1 + 0.05).tanh();
        assert_relative_eq!(m.score(0, 0).unwrap(), 2.0 * h0 - h1 + 0.25, epsilon = 1e-15);
        let h0 = (0.2f64 + 0.1).tanh();
        let h1 = (0.3f64 + 0.1 + 0.05).tanh();
        assert_relative_eq!(m.score(1, 0).unwrap(), 2.0 * h0 - h1 + 0.25, epsilon = 1e-15);
        assert_eq!(m.score(1, 0).unwrap(), m.score(1, 0).unwrap());
    }

    #[test]
    fn hand_probability_and_loss() {
        // segment sums differ by 2
        let m = linear(2, 1, vec![1.5, 0.5, 0.0], 0.0);
        let q = query(&[(0, 0), (0, 0)], &[(1, 0), (1, 0)]);
        let p = model_pref_prob(&m, &q).unwrap();
        assert_relative_eq!(p, 0.880797, epsilon = 1e-6);
        assert_relative_eq!(ce_loss(&m, &[(q.clone(), 1)]).unwrap(), 0.126928, epsilon = 1e-6);
        assert_eq!(model_pref_prob(&m, &query(&[(1, 0)], &[(1, 0)])).unwrap(), 0.5);
        // confident and correct
        let sure = linear(2, 1, vec![40.0, 0.0, 0.0], 0.0);
        assert!(ce_loss(&sure, &[(q, 1)]).unwrap() < 1e-12);
    }

    #[test]
    fn loss_clamped() {
        let wrong = linear(2, 1, vec![100.0, 0.0, 0.0], 0.0);
        let q = query(&[(0, 0)], &[(1, 0)]);
        assert_relative_eq!(ce_loss(&wrong, &[(q.clone(), -1)]).unwrap(), -(PROB_CLAMP.ln()), epsilon = 1e-9);
        assert!(grad_ce(&wrong, &[(q, -1)]).unwrap().iter().all(|g| *g == 0.0));
        assert!(ce_loss(&wrong, &[]).is_err());
    }

    fn finite_difference_check(hidden: Vec<usize>, s: u64) {
        let (ns, na) = (6, 3);
        let mut rng = seed::rng(s);
        let mut m = RewardModel::random(ns, na, hidden, &mut rng).unwrap();
        for p in &mut m.params {
            *p += rng.gen_range(-0.3..0.3);
        }
        let batch: Vec<(Query, Label)> =
            (0..8).map(|_| (random_query(&mut rng, ns, na, 3), if rng.gen::<bool>() { 1 } else { -1 })).collect();
        let g = grad_ce(&m, &batch).unwrap();
        let step = 1e-5;
        for i in 0..m.n_params() {
            let mut hi = m.clone();
            hi.params[i] += step;
            let mut lo = m.clone();
            lo.params[i] -= step;
            let fd = (ce_loss(&hi, &batch).unwrap() - ce_loss(&lo, &batch).unwrap()) / (2.0 * step);
            let scale = g[i].abs().max(fd.abs());
            assert!((g[i] - fd).abs() <= 1e-4 * scale + 1e-10, "seed {s} param {i}: analytic {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for s in 0..10 {
            finite_difference_check(vec![DEFAULT_HIDDEN], s);
            finite_difference_check(vec![5, 4], 100 + s);
            finite_difference_check(vec![], 200 + s);
        }
    }

    #[test]
    fn mirrored_pairs_cancel() {
        let q = query(&[(0, 1), (2, 0)], &[(1, 1), (3, 2)]);
        let m = RewardModel::zeros(4, 3, vec![8]).unwrap();
        let g = grad_ce(&m, &[(q.clone(), 1), (q.swapped(), 1)]).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
        let m = RewardModel::random(4, 3, vec![8], &mut seed::rng(3)).unwrap();
        let g = grad_ce(&m, &[(q.clone(), 1), (q.swapped(), 1)]).unwrap();
        // descending the gradient moves P toward 1/2
        let mut stepped = m.clone();
        stepped.params.iter_mut().zip(&g).for_each(|(p, d)| *p -= 0.1 * d);
        let dist = |m: &RewardModel| (model_pref_prob(m, &q).unwrap() - 0.5).abs();
        assert!(dist(&stepped) <= dist(&m));
    }

    proptest! {
        #[test]
        fn preference_antisymmetric(s in any::<u64>()) {
            let mut rng = seed::rng(s);
            let m = RewardModel::random(5, 4, vec![DEFAULT_HIDDEN], &mut rng).unwrap();
            for _ in 0..10 {
                let q = random_query(&mut rng, 5, 4, 4);
                let total = model_pref_prob(&m, &q).unwrap() + model_pref_prob(&m, &q.swapped()).unwrap();
                prop_assert!((total - 1.0).abs() <= 2.0 * f64::EPSILON);
            }
        }

        #[test]
        fn output_shift_invariant(s in any::<u64>(), c in -20.0..20.0f64) {
            let mut rng = seed::rng(s);
            let m = RewardModel::random(5, 4, vec![DEFAULT_HIDDEN], &mut rng).unwrap();
            let mut shifted = m.clone();
            shifted.shift_output(c);
            let q = random_query(&mut rng, 5, 4, 5);
            prop_assert!((model_pref_prob(&m, &q).unwrap() - model_pref_prob(&shifted, &q).unwrap()).abs() < 1e-9);
        }
    }

    fn planted_items(planted: &RewardModel, n: usize, h: usize, rng: &mut SimRng) -> Vec<(Query, Label)> {
        let mut items = Vec::new();
        while items.len() < n {
            let q = random_query(rng, planted.n_states, planted.n_actions, h);
            let d = planted.segment_return(&q.a).unwrap() - planted.segment_return(&q.b).unwrap();
            if d.abs() > 1e-9 {
                items.push((q, if d > 0.0 { 1 } else { -1 }));
            }
        }
        items
    }

    #[test]
    fn separable_data_fits() {
        let mut rng = seed::rng(11);
        let planted = RewardModel::random(8, 3, vec![4], &mut rng).unwrap();
        let data = PreferenceDataset::from_items(planted_items(&planted, 50, 3, &mut rng)).unwrap();
        let mut m = RewardModel::random(8, 3, vec![DEFAULT_HIDDEN], &mut rng).unwrap();
        let before = m.clone();
        assert!(train(&mut m, &data, &TrainConfig { epochs: 0, ..Default::default() }, &mut rng).unwrap().is_empty());
        assert_eq!(m, before);
        let cfg = TrainConfig { epochs: 1500, batch_size: 64, learning_rate: 1e-2 };
        let trace = train(&mut m, &data, &cfg, &mut rng).unwrap();
        assert!(trace.last().unwrap() < &trace[0]);
        assert!(accuracy(&m, data.items()).unwrap() >= 0.95);
    }

    #[test]
    fn planted_reward_recovered() {
        let mut rng = seed::rng(12);
        let planted = RewardModel::random(10, 4, vec![6], &mut rng).unwrap();
        let data = PreferenceDataset::from_items(planted_items(&planted, 400, 4, &mut rng)).unwrap();
        let held_out = planted_items(&planted, 400, 4, &mut rng);
        let mut m = RewardModel::random(10, 4, vec![DEFAULT_HIDDEN], &mut rng).unwrap();
        train(&mut m, &data, &TrainConfig { epochs: 200, batch_size: 64, learning_rate: 1e-2 }, &mut rng).unwrap();
        let acc = accuracy(&m, &held_out).unwrap();
        assert!(acc >= 0.9, "held-out agreement {acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = seed::rng(13);
        let planted = RewardModel::random(6, 2, vec![3], &mut rng).unwrap();
        let data = PreferenceDataset::from_items(planted_items(&planted, 80, 3, &mut rng)).unwrap();
        let cfg = TrainConfig { epochs: 5, ..Default::default() };
        let results: Vec<RewardEnsemble> = Exec::all()
            .into_iter()
            .map(|exec| {
                let mut e = RewardEnsemble::random(6, 2, &[DEFAULT_HIDDEN], 3, &mut seed::rng(4)).unwrap();
                e.train(&data, &cfg, &mut seed::rng(5), exec).unwrap();
                e
            })
            .collect();
        assert!(results.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn divergence_is_reported() {
        let q = query(&[(0, 0)], &[(1, 0)]);
        let data = PreferenceDataset::from_items(vec![(q, 1)]).unwrap();
        let mut m = RewardModel::zeros(2, 1, vec![2]).unwrap();
        let bad = TrainConfig { epochs: 1, batch_size: 1, learning_rate: f64::NAN };
        assert!(train(&mut m, &data, &bad, &mut seed::rng(0)).is_err());
        assert!(train(&mut m, &PreferenceDataset::new(), &TrainConfig::default(), &mut seed::rng(0)).is_err());
        // steps of size ~lr push the weights past f64 range within two epochs
        let mut linear = RewardModel::zeros(2, 1, vec![]).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 1, learning_rate: 1e308 };
        assert!(matches!(train(&mut linear, &data, &cfg, &mut seed::rng(0)), Err(Error::TrainingFailure(_))));
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let q = query(&[(0, 0)], &[(1, 0)]);
        assert!(PreferenceDataset::from_items(vec![(q, 0)]).is_err());
    }

    #[test]
    fn query_selection() {
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let member = |p: f64| linear(2, 1, vec![logit(p), 0.0, 0.0], 0.0);
        let ens = RewardEnsemble::new(vec![member(0.1), member(0.9), member(0.5)]).unwrap();
        let flat = query(&[(1, 0)], &[(1, 0)]);
        let split = query(&[(0, 0)], &[(1, 0)]);
        assert_relative_eq!(ens.disagreement(&split).unwrap(), 0.3266, epsilon = 1e-4);
        assert_eq!(ens.disagreement(&flat).unwrap(), 0.0);
        let cands = vec![flat.clone(), split.clone(), flat.clone()];
        assert_eq!(select_queries(&ens, &cands, 1).unwrap(), vec![1]);
        assert_eq!(select_queries(&ens, &cands, 3).unwrap(), vec![1, 0, 2]);
        assert!(select_queries(&ens, &cands, 4).is_err());

        let same = RewardEnsemble::new(vec![member(0.7); 3]).unwrap();
        assert_eq!(select_queries(&same, &[split.clone(), flat, split], 2).unwrap(), vec![0, 1]);
        assert!(RewardEnsemble::new(vec![member(0.5)]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = RewardModel::random(7, 4, vec![DEFAULT_HIDDEN, 5], &mut seed::rng(8)).unwrap();
        let text = m.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["hidden"], serde_json::json!([32, 5]));
        assert_eq!(RewardModel::from_json(&text).unwrap(), m);
        assert!(RewardModel::from_json(r#"{"n_states":2,"n_actions":1,"hidden":[],"params":[1.0]}"#).is_err());
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &[0.5, 0.25]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,loss\n0,0.5\n1,0.25\n");
    }

    #[test]
    fn ensemble_mean_table() {
        let a = linear(2, 2, vec![1.0, 0.0, 0.0, 2.0], 0.0);
        let b = linear(2, 2, vec![3.0, 0.0, 0.0, 0.0], 0.0);
        let e = RewardEnsemble::new(vec![a, b]).unwrap();
        assert_eq!(e.mean_reward_table(), vec![2.0, 3.0, 0.0, 1.0]);
    }
}
