//! Tabular PPO against a learned reward, and the full crowd feedback loop.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{label_error_where_defined, majority_vote, sml_labels};
use crate::crowd::{label_matrix, Crowd, Label, LabelMatrix, Query};
use crate::env::{run_episode, ActionSampler, Environment, GoalGrid, Segment, State, Trajectory, UniformPolicy};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::reward::{select_queries, PreferenceDataset, RewardEnsemble, TrainConfig, DEFAULT_ENSEMBLE_SIZE, DEFAULT_HIDDEN};
use crate::seed::{self, stream, SimRng};
use crate::stats;

/// Per-state softmax over action logits plus a per-state value baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
    values: Vec<f64>,
}

impl TabularPolicy {
    /// Uniform action distribution and zero values.
    pub fn uniform(n_states: usize, n_actions: usize) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(invalid("need at least one state and one action"));
        }
        Ok(Self { n_states, n_actions, logits: vec![0.0; n_states * n_actions], values: vec![0.0; n_states] })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn logits(&self, s: State) -> &[f64] {
        &self.logits[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn set_logits(&mut self, s: State, logits: &[f64]) -> Result<()> {
        if s >= self.n_states || logits.len() != self.n_actions || logits.iter().any(|x| !x.is_finite()) {
            return Err(invalid("logits must be finite and match the action count"));
        }
        self.logits[s * self.n_actions..(s + 1) * self.n_actions].copy_from_slice(logits);
        Ok(())
    }

    pub fn value(&self, s: State) -> f64 {
        self.values[s]
    }

    pub fn probs(&self, s: State) -> Vec<f64> {
        softmax(self.logits(s))
    }

    pub fn log_prob(&self, s: State, a: usize) -> f64 {
        let z = self.logits(s);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        z[a] - m - z.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    /// Most likely action, ties to the lowest index.
    pub fn greedy(&self, s: State) -> usize {
        let z = self.logits(s);
        (1..z.len()).fold(0, |best, a| if z[a] > z[best] { a } else { best })
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

impl ActionSampler for TabularPolicy {
    fn sample(&self, state: State, rng: &mut SimRng) -> usize {
        let p = self.probs(state);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, pa) in p.iter().enumerate() {
            acc += pa;
            if u < acc {
                return a;
            }
        }
        p.len() - 1
    }
}

/// Exact expected undiscounted return of `objective` over one episode,
/// propagating the state distribution through the deterministic dynamics.
pub fn expected_return<E: Environment + ?Sized>(policy: &TabularPolicy, env: &E, objective: usize) -> Result<f64> {
    let (ns, na) = (env.n_states(), env.n_actions());
    if policy.n_states != ns || policy.n_actions != na {
        return Err(invalid("policy does not match the environment"));
    }
    if objective >= env.n_objectives() {
        return Err(invalid(format!("objective {objective} out of range")));
    }
    let mut next_state = vec![0; ns * na];
    let mut reward = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let (s2, r) = env.step(s, a)?;
            next_state[s * na + a] = s2;
            reward[s * na + a] = r[objective];
        }
    }
    let probs: Vec<Vec<f64>> = (0..ns).map(|s| policy.probs(s)).collect();
    let mut dist = vec![0.0; ns];
    dist[env.start()] = 1.0;
    let mut total = 0.0;
    for _ in 0..env.step_budget() {
        let mut next = vec![0.0; ns];
        for s in (0..ns).filter(|&s| dist[s] > 0.0) {
            for a in 0..na {
                let p = dist[s] * probs[s][a];
                total += p * reward[s * na + a];
                next[next_state[s * na + a]] += p;
            }
        }
        dist = next;
    }
    Ok(total)
}

/// Finite-horizon optimal return by backward induction.
pub fn optimal_return<E: Environment + ?Sized>(env: &E, objective: usize) -> Result<f64> {
    let (ns, na) = (env.n_states(), env.n_actions());
    let mut v = vec![0.0; ns];
    for _ in 0..env.step_budget() {
        let mut next = vec![f64::NEG_INFINITY; ns];
        for (s, slot) in next.iter_mut().enumerate() {
            for a in 0..na {
                let (s2, r) = env.step(s, a)?;
                *slot = slot.max(r[objective] + v[s2]);
            }
        }
        v = next;
    }
    Ok(v[env.start()])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: State,
    pub action: usize,
    pub next_state: State,
    /// Learned reward, never the environment's.
    pub reward: f64,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    transitions: Vec<Transition>,
    /// Exclusive end index of each episode.
    episode_ends: Vec<usize>,
}

impl RolloutBuffer {
    /// Relabels `trajectories` with `reward_table[s * n_actions + a]`,
    /// recording the behaviour policy's log-probabilities.
    pub fn from_trajectories(trajectories: &[Trajectory], policy: &TabularPolicy, reward_table: &[f64]) -> Result<Self> {
        let na = policy.n_actions;
        if reward_table.len() != policy.n_states * na {
            return Err(invalid("reward table does not match the policy"));
        }
        let mut buf = Self::default();
        for traj in trajectories {
            for t in 0..traj.len() {
                let (s, a) = (traj.states[t], traj.actions[t]);
                buf.transitions.push(Transition {
                    state: s,
                    action: a,
                    next_state: traj.next_states[t],
                    reward: reward_table[s * na + a],
                    log_prob: policy.log_prob(s, a),
                });
            }
            buf.episode_ends.push(buf.transitions.len());
        }
        Ok(buf)
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    fn episodes(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let starts = std::iter::once(0).chain(self.episode_ends.iter().copied());
        starts.zip(self.episode_ends.iter().copied()).map(|(a, b)| a..b)
    }
}

/// Generalized advantage estimates for one episode, bootstrapping from
/// `last_value` after the final step.
pub fn gae(rewards: &[f64], values: &[f64], last_value: f64, gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(invalid(format!("{} rewards vs {} values", rewards.len(), values.len())));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut running = 0.0;
    let mut next_value = last_value;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
        next_value = values[t];
    }
    Ok(adv)
}

/// Zero mean and unit variance; only centred when the spread is ~0.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let m = stats::mean(adv);
    let sd = stats::std_population(adv);
    for a in adv.iter_mut() {
        *a -= m;
        if sd > 1e-8 {
            *a /= sd;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub entropy_coef: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self { gamma: 0.99, gae_lambda: 0.92, clip: 0.4, epochs: 4, policy_lr: 5.0, value_lr: 0.5, entropy_coef: 0.0 }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(invalid("gamma and gae_lambda must lie in [0, 1]"));
        }
        if !(self.clip > 0.0) || !(self.policy_lr > 0.0) || !(0.0..=1.0).contains(&self.value_lr) {
            return Err(invalid("clip and policy_lr must be positive, value_lr in [0, 1]"));
        }
        if !self.entropy_coef.is_finite() || !self.policy_lr.is_finite() {
            return Err(invalid("non-finite PPO hyperparameter"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    /// Clipped surrogate (to be maximised) at the last epoch, before its step.
    pub surrogate: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
}

/// Clipped-surrogate ascent on the logits with simultaneous value-table
/// regression. The value step moves each visited state's value a
/// `value_lr` fraction toward the mean of its return targets.
pub fn ppo_update(policy: &mut TabularPolicy, buffer: &RolloutBuffer, cfg: &PpoConfig) -> Result<PpoStats> {
    cfg.validate()?;
    if buffer.is_empty() {
        return Err(invalid("empty rollout buffer"));
    }
    let tr = &buffer.transitions;
    let n = tr.len();
    let na = policy.n_actions;
    if tr.iter().any(|t| t.state >= policy.n_states || t.action >= na) {
        return Err(invalid("buffer does not match the policy"));
    }

    let mut adv = Vec::with_capacity(n);
    for ep in buffer.episodes() {
        let rewards: Vec<f64> = tr[ep.clone()].iter().map(|t| t.reward).collect();
        let values: Vec<f64> = tr[ep.clone()].iter().map(|t| policy.values[t.state]).collect();
        adv.extend(gae(&rewards, &values, 0.0, cfg.gamma, cfg.gae_lambda)?);
    }
    let targets: Vec<f64> = adv.iter().zip(tr).map(|(a, t)| a + policy.values[t.state]).collect();
    normalize_advantages(&mut adv);

    let mut stats = PpoStats::default();
    for _ in 0..cfg.epochs {
        let mut grad = vec![0.0; policy.logits.len()];
        let (mut surrogate, mut clipped) = (0.0, 0usize);
        for (t, &a_hat) in tr.iter().zip(&adv) {
            let ratio = (policy.log_prob(t.state, t.action) - t.log_prob).exp();
            let bounded = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
            surrogate += (ratio * a_hat).min(bounded * a_hat);
            let inactive = (a_hat > 0.0 && ratio > 1.0 + cfg.clip) || (a_hat < 0.0 && ratio < 1.0 - cfg.clip);
            if inactive {
                clipped += 1;
                continue;
            }
            let p = policy.probs(t.state);
            let row = &mut grad[t.state * na..(t.state + 1) * na];
            for (b, g) in row.iter_mut().enumerate() {
                let onehot = if b == t.action { 1.0 } else { 0.0 };
                *g += ratio * a_hat * (onehot - p[b]);
            }
        }
        let mut entropy = 0.0;
        for t in tr {
            let p = policy.probs(t.state);
            let h: f64 = -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            entropy += h;
            if cfg.entropy_coef != 0.0 {
                let row = &mut grad[t.state * na..(t.state + 1) * na];
                for (b, g) in row.iter_mut().enumerate() {
                    let lp = if p[b] > 0.0 { p[b].ln() } else { 0.0 };
                    *g -= cfg.entropy_coef * p[b] * (lp + h);
                }
            }
        }
        for (z, g) in policy.logits.iter_mut().zip(&grad) {
            *z += cfg.policy_lr * g / n as f64;
        }
        stats.surrogate = surrogate / n as f64;
        stats.clip_fraction = clipped as f64 / n as f64;
        stats.entropy = entropy / n as f64;
    }

    let mut sum = vec![0.0; policy.n_states];
    let mut count = vec![0usize; policy.n_states];
    let mut value_loss = 0.0;
    for (t, &target) in tr.iter().zip(&targets) {
        value_loss += 0.5 * (policy.values[t.state] - target).powi(2);
        sum[t.state] += target;
        count[t.state] += 1;
    }
    for s in 0..policy.n_states {
        if count[s] > 0 {
            let mean_target = sum[s] / count[s] as f64;
            policy.values[s] += cfg.value_lr * (mean_target - policy.values[s]);
        }
    }
    stats.value_loss = value_loss / n as f64;
    if policy.logits.iter().chain(&policy.values).any(|x| !x.is_finite()) || !stats.surrogate.is_finite() {
        return Err(Error::TrainingFailure("non-finite PPO update".into()));
    }
    Ok(stats)
}

/// Where the labels used for reward learning come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LabelSource {
    Maj,
    Sml,
    /// Ground-truth comparison of undiscounted returns; tied pairs carry no
    /// preference and are left out of the reward dataset.
    Oracle,
}

impl LabelSource {
    pub const ALL: [LabelSource; 3] = [LabelSource::Sml, LabelSource::Maj, LabelSource::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            LabelSource::Maj => "MAJ",
            LabelSource::Sml => "SML",
            LabelSource::Oracle => "ORACLE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub hidden: Vec<usize>,
    pub ensemble_size: usize,
    pub train: TrainConfig,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            hidden: vec![DEFAULT_HIDDEN],
            ensemble_size: DEFAULT_ENSEMBLE_SIZE,
            train: TrainConfig { epochs: 30, ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: LabelSource,
    pub env: GoalGrid,
    pub segment_length: usize,
    /// Feedback session every `feedback_frequency` iterations (K).
    pub feedback_frequency: usize,
    pub n_query: usize,
    /// Segment pairs offered to the disagreement filter per session.
    pub candidate_pairs: usize,
    pub iterations: usize,
    pub episodes_per_iteration: usize,
    /// Uniform-random episodes whose segments form the first candidate pool.
    pub exploration_episodes: usize,
    pub eval_every: usize,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: LabelSource::Sml,
            env: GoalGrid { reward_scale: 0.1, step_budget: 10, ..GoalGrid::default() },
            segment_length: 10,
            feedback_frequency: 5,
            n_query: 20,
            candidate_pairs: 200,
            iterations: 100,
            episodes_per_iteration: 64,
            exploration_episodes: 16,
            eval_every: 5,
            reward: RewardConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ppo.validate()?;
        self.reward.train.validate()?;
        if self.feedback_frequency == 0 || self.n_query == 0 || self.eval_every == 0 {
            return Err(invalid("feedback_frequency, n_query and eval_every must be at least 1"));
        }
        if self.segment_length == 0 || self.segment_length > self.env.step_budget {
            return Err(invalid(format!("segment_length must be in 1..={}", self.env.step_budget)));
        }
        if self.candidate_pairs < self.n_query {
            return Err(invalid("candidate_pairs must be at least n_query"));
        }
        if self.episodes_per_iteration == 0 || self.exploration_episodes == 0 {
            return Err(invalid("episode counts must be positive"));
        }
        if self.reward.ensemble_size < 2 {
            return Err(invalid("reward ensemble needs at least 2 members"));
        }
        Ok(())
    }

    /// Number of feedback sessions in a run.
    pub fn n_sessions(&self) -> usize {
        self.iterations.div_ceil(self.feedback_frequency)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub feedback_iter: usize,
    pub iteration: usize,
    /// Errors over the session's queries whose ground truth is not tied.
    pub maj_error: Option<f64>,
    pub sml_error: Option<f64>,
    pub user_errors: Vec<Option<f64>>,
    pub n_labels_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub eval_iter: usize,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub method: LabelSource,
    pub seed: u64,
    pub feedback: Vec<FeedbackRecord>,
    pub evals: Vec<EvalRecord>,
    pub final_return: f64,
}

impl RunLog {
    /// `feedback_iter,maj_error,sml_error,n_labels_total`; undefined errors are empty.
    pub fn write_feedback_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["feedback_iter", "maj_error", "sml_error", "n_labels_total"])?;
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        for r in &self.feedback {
            out.write_record([r.feedback_iter.to_string(), opt(r.maj_error), opt(r.sml_error), r.n_labels_total.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// `eval_iter,mean_return`.
    pub fn write_eval_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["eval_iter", "mean_return"])?;
        for r in &self.evals {
            out.write_record([r.eval_iter.to_string(), r.mean_return.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Fraction of sessions (with both errors defined) where SML is no worse than MAJ.
    pub fn sml_no_worse_fraction(&self) -> Option<f64> {
        let both: Vec<(f64, f64)> = self.feedback.iter().filter_map(|r| Some((r.sml_error?, r.maj_error?))).collect();
        if both.is_empty() {
            return None;
        }
        Some(both.iter().filter(|(s, m)| s <= m).count() as f64 / both.len() as f64)
    }
}

fn candidate_queries(segments: &[Segment], count: usize, rng: &mut SimRng) -> Result<Vec<Query>> {
    if segments.len() < 2 {
        return Err(invalid("need at least two segments to form candidate pairs"));
    }
    (0..count)
        .map(|_| {
            let i = rng.gen_range(0..segments.len());
            let mut j = rng.gen_range(0..segments.len() - 1);
            if j >= i {
                j += 1;
            }
            Query::new(segments[i].clone(), segments[j].clone())
        })
        .collect()
}

fn episodes<P: ActionSampler>(policy: &P, env: &GoalGrid, count: usize, rng: &mut SimRng) -> Result<Vec<Trajectory>> {
    (0..count).map(|_| run_episode(policy, env, rng)).collect()
}

/// The crowd feedback loop.
///
/// Iteration `i` rolls out the current policy; when `i % K == 0` a feedback
/// session first draws candidate pairs from the freshest segments (the
/// uniform-random exploration episodes before the first session), keeps the
/// `n_query` pairs the reward ensemble disagrees on most, has every crowd
/// member label them and retrains the ensemble on the aggregated labels.
/// SML is applied to the cumulative label matrix, so earlier labels are
/// re-estimated as more queries arrive. PPO then updates against the
/// ensemble-mean reward. Every random stream is derived from `seed`, so runs
/// with different label sources share their crowd draws.
pub fn crowd_prefrl_run(cfg: &ExperimentConfig, crowd: &Crowd, seed_: u64) -> Result<RunLog> {
    cfg.validate()?;
    if crowd.users.iter().any(|u| u.objective_id != 0) {
        return Err(invalid("GoalGrid has a single objective; every user must use objective 0"));
    }
    let env = &cfg.env;
    let (ns, na) = (env.n_states(), env.n_actions());
    let mut policy = TabularPolicy::uniform(ns, na)?;
    let mut ensemble = RewardEnsemble::random(ns, na, &cfg.reward.hidden, cfg.reward.ensemble_size, &mut seed::derived_rng(seed_, &[stream::REWARD]))?;
    let mut reward_table = ensemble.mean_reward_table();

    let mut queries: Vec<Query> = Vec::new();
    let mut crowd_rows: Vec<Vec<Label>> = vec![Vec::new(); crowd.len()];
    let mut truths: Vec<Option<Label>> = Vec::new();
    let mut feedback = Vec::new();
    let mut evals = Vec::new();
    let mut fresh: Vec<Segment> = episodes(&UniformPolicy { n_actions: na }, env, cfg.exploration_episodes, &mut seed::derived_rng(seed_, &[stream::POLICY, u64::MAX]))?
        .iter()
        .flat_map(|t| t.segments(cfg.segment_length))
        .collect();

    for it in 0..cfg.iterations {
        let abort = |e: Error| Error::RunAborted { iteration: it, source: Box::new(e) };
        let trajectories = episodes(&policy, env, cfg.episodes_per_iteration, &mut seed::derived_rng(seed_, &[stream::POLICY, it as u64])).map_err(abort)?;

        if it % cfg.feedback_frequency == 0 {
            let session = it / cfg.feedback_frequency;
            let record = (|| -> Result<FeedbackRecord> {
                let mut rng = seed::derived_rng(seed_, &[stream::CANDIDATES, session as u64]);
                let candidates = candidate_queries(&fresh, cfg.candidate_pairs, &mut rng)?;
                let picked: Vec<Query> = select_queries(&ensemble, &candidates, cfg.n_query)?.into_iter().map(|i| candidates[i].clone()).collect();
                let new_truth = picked.iter().map(|q| q.truth(0)).collect::<Result<Vec<_>>>()?;
                let labels = label_matrix(crowd, &picked, &mut seed::derived_rng(seed_, &[stream::LABELS, session as u64]))?;
                for (row, user) in crowd_rows.iter_mut().enumerate() {
                    user.extend_from_slice(labels.row(row));
                }
                let first_new = queries.len();
                queries.extend(picked);
                truths.extend(new_truth);

                let cumulative = LabelMatrix::from_rows(&crowd_rows)?;
                let maj = majority_vote(&cumulative)?.labels;
                let sml = sml_labels(&cumulative)?.labels;
                let session_truth = &truths[first_new..];
                let record = FeedbackRecord {
                    feedback_iter: session,
                    iteration: it,
                    maj_error: label_error_where_defined(&maj[first_new..], session_truth)?,
                    sml_error: label_error_where_defined(&sml[first_new..], session_truth)?,
                    user_errors: crowd_rows
                        .iter()
                        .map(|r| label_error_where_defined(&r[first_new..], session_truth))
                        .collect::<Result<_>>()?,
                    n_labels_total: queries.len(),
                };
                let train_labels: Vec<Option<Label>> = match cfg.method {
                    LabelSource::Maj => maj.into_iter().map(Some).collect(),
                    LabelSource::Sml => sml.into_iter().map(Some).collect(),
                    LabelSource::Oracle => truths.clone(),
                };
                let data = PreferenceDataset::from_items(
                    queries.iter().zip(train_labels).filter_map(|(q, l)| Some((q.clone(), l?))).collect(),
                )?;
                if data.is_empty() {
                    return Ok(record);
                }
                ensemble.train(&data, &cfg.reward.train, &mut seed::derived_rng(seed_, &[stream::REWARD, 1 + session as u64]), Exec::Sequential)?;
                reward_table = ensemble.mean_reward_table();
                Ok(record)
            })()
            .map_err(abort)?;
            feedback.push(record);
        }

        let buffer = RolloutBuffer::from_trajectories(&trajectories, &policy, &reward_table).map_err(abort)?;
        ppo_update(&mut policy, &buffer, &cfg.ppo).map_err(abort)?;
        fresh = trajectories.iter().flat_map(|t| t.segments(cfg.segment_length)).collect();

        if (it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iterations {
            evals.push(EvalRecord { eval_iter: it + 1, mean_return: expected_return(&policy, env, 0).map_err(abort)? });
        }
    }
    let final_return = match evals.last() {
        Some(e) => e.mean_return,
        None => expected_return(&policy, env, 0)?,
    };
    Ok(RunLog { method: cfg.method, seed: seed_, feedback, evals, final_return })
}

/// Mean and standard error after dropping the two highest and two lowest
/// values.
pub fn trimmed_mean_eval(returns: &[f64]) -> Result<(f64, f64)> {
    if returns.len() < 5 {
        return Err(invalid(format!("need at least 5 runs, got {}", returns.len())));
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(invalid("returns must be finite"));
    }
    let mut sorted = returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    let kept = &sorted[2..sorted.len() - 2];
    let se = if kept.len() > 1 { stats::std_sample(kept) / (kept.len() as f64).sqrt() } else { 0.0 };
    Ok((stats::mean(kept), se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crowd::{CrowdRanges, UserModel};
    use crate::env::reward_table as true_reward_table;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn gae_reductions() {
        let r = [1.0, -2.0, 0.5, 3.0];
        assert_eq!(gae(&r, &[0.0; 4], 0.0, 0.99, 0.0).unwrap(), r.to_vec());
        assert_eq!(gae(&r, &[0.0; 4], 0.0, 1.0, 1.0).unwrap(), vec![2.5, 1.5, 3.5, 3.0]);
        assert!(gae(&r, &[0.0; 3], 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn gae_hand_example() {
        let a = gae(&[1.0, 0.0, 1.0], &[0.5; 3], 0.0, 0.9, 0.9).unwrap();
        assert_relative_eq!(a[2], 0.5, epsilon = 1e-12);
        assert_relative_eq!(a[1], 0.355, epsilon = 1e-12);
        assert_relative_eq!(a[0], 1.23755, epsilon = 1e-12);
    }

    #[test]
    fn trimmed_mean_examples() {
        assert_eq!(trimmed_mean_eval(&[2.5; 10]).unwrap(), (2.5, 0.0));
        let (m, se) = trimmed_mean_eval(&(0..10).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert_relative_eq!(m, 4.5, epsilon = 1e-12);
        // sample std of 2..=7 is sqrt(3.5)
        assert_relative_eq!(se, 3.5f64.sqrt() / 6f64.sqrt(), epsilon = 1e-12);
        let (m, _) = trimmed_mean_eval(&[1000.0, -1000.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 999.0, -999.0]).unwrap();
        assert_eq!(m, 5.0);
        assert!(trimmed_mean_eval(&[1.0; 4]).is_err());
    }

    fn single_state_buffer(actions: &[usize], rewards: &[f64], policy: &TabularPolicy) -> RolloutBuffer {
        let traj = Trajectory {
            states: vec![0; actions.len()],
            actions: actions.to_vec(),
            next_states: vec![0; actions.len()],
            rewards: vec![vec![0.0; actions.len()]],
        };
        let table: Vec<f64> = (0..policy.n_actions).map(|a| rewards.get(a).copied().unwrap_or(0.0)).collect();
        RolloutBuffer::from_trajectories(&[traj], policy, &table).unwrap()
    }

    #[test]
    fn zero_advantages_leave_policy() {
        let mut p = TabularPolicy::uniform(1, 3).unwrap();
        let buf = single_state_buffer(&[0, 1, 2, 1], &[0.0, 0.0, 0.0], &p);
        let before = p.logits.clone();
        ppo_update(&mut p, &buf, &PpoConfig { gamma: 0.0, ..Default::default() }).unwrap();
        assert_eq!(p.logits, before);
    }

    #[test]
    fn positive_advantage_raises_probability() {
        let mut p = TabularPolicy::uniform(1, 3).unwrap();
        let buf = single_state_buffer(&[0, 1, 2, 0, 1, 2], &[1.0, 0.0, 0.0], &p);
        let before = p.probs(0)[0];
        ppo_update(&mut p, &buf, &PpoConfig { gamma: 0.0, ..Default::default() }).unwrap();
        assert!(p.probs(0)[0] > before);
    }

    #[test]
    fn unclipped_single_epoch_is_vanilla_pg() {
        let mut rng = seed::rng(3);
        let mut p = TabularPolicy::uniform(4, 3).unwrap();
        for s in 0..4 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            p.set_logits(s, &z).unwrap();
        }
        let trajs: Vec<Trajectory> = (0..3)
            .map(|_| {
                let states: Vec<usize> = (0..6).map(|_| rng.gen_range(0..4)).collect();
                let actions: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
                Trajectory { next_states: states.clone(), states, actions, rewards: vec![vec![0.0; 6]] }
            })
            .collect();
        let table: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let buf = RolloutBuffer::from_trajectories(&trajs, &p, &table).unwrap();
        let cfg = PpoConfig { clip: 1e12, epochs: 1, policy_lr: 0.1, ..Default::default() };

        // vanilla policy gradient with the same normalized advantages
        let mut adv = Vec::new();
        for ep in buf.episodes() {
            let r: Vec<f64> = buf.transitions[ep.clone()].iter().map(|t| t.reward).collect();
            adv.extend(gae(&r, &vec![0.0; r.len()], 0.0, cfg.gamma, cfg.gae_lambda).unwrap());
        }
        normalize_advantages(&mut adv);
        let mut grad = vec![0.0; 12];
        for (t, a) in buf.transitions.iter().zip(&adv) {
            let probs = p.probs(t.state);
            for b in 0..3 {
                grad[t.state * 3 + b] += a * (f64::from(u8::from(b == t.action)) - probs[b]) / buf.len() as f64;
            }
        }
        let mut q = p.clone();
        ppo_update(&mut q, &buf, &cfg).unwrap();
        for i in 0..12 {
            assert_relative_eq!((q.logits[i] - p.logits[i]) / cfg.policy_lr, grad[i], epsilon = 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn probabilities_stay_on_simplex(s in any::<u64>(), lr in 0.1..200.0f64) {
            let mut rng = seed::rng(s);
            let env = GoalGrid::default();
            let mut p = TabularPolicy::uniform(env.n_states(), env.n_actions()).unwrap();
            let table: Vec<f64> = (0..env.n_states() * env.n_actions()).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let cfg = PpoConfig { policy_lr: lr, ..Default::default() };
            for _ in 0..3 {
                let trajs = episodes(&p, &env, 4, &mut rng).unwrap();
                let buf = RolloutBuffer::from_trajectories(&trajs, &p, &table).unwrap();
                ppo_update(&mut p, &buf, &cfg).unwrap();
                for st in 0..env.n_states() {
                    let probs = p.probs(st);
                    prop_assert!(probs.iter().all(|x| *x >= 0.0 && x.is_finite()));
                    prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn expected_return_matches_sampling() {
        let env = GoalGrid::default();
        let mut p = TabularPolicy::uniform(env.n_states(), env.n_actions()).unwrap();
        p.set_logits(0, &[1.0, 0.0, -1.0, 0.5]).unwrap();
        let exact = expected_return(&p, &env, 0).unwrap();
        let mut rng = seed::rng(1);
        let n = 20_000;
        let mc: f64 = (0..n).map(|_| run_episode(&p, &env, &mut rng).unwrap().total_reward(0)).sum::<f64>() / n as f64;
        assert!((exact - mc).abs() < 0.05, "exact {exact} vs sampled {mc}");
        assert_eq!(optimal_return(&env, 0).unwrap(), 9.0);
    }

    #[test]
    fn oracle_reward_ppo_near_optimum() {
        let env = GoalGrid::default();
        let table = true_reward_table(&env, 0).unwrap();
        let mut p = TabularPolicy::uniform(env.n_states(), env.n_actions()).unwrap();
        let mut rng = seed::rng(7);
        for _ in 0..200 {
            let trajs = episodes(&p, &env, 16, &mut rng).unwrap();
            let buf = RolloutBuffer::from_trajectories(&trajs, &p, &table).unwrap();
            ppo_update(&mut p, &buf, &PpoConfig::default()).unwrap();
        }
        let optimum = optimal_return(&env, 0).unwrap();
        let got = expected_return(&p, &env, 0).unwrap();
        assert!(got >= 0.9 * optimum, "return {got} vs optimum {optimum}");
    }

    fn perfect_crowd(m: usize) -> Crowd {
        Crowd::new(vec![UserModel::new(50.0, 1.0, 0.0, 0).unwrap(); m], 0).unwrap()
    }

    fn quick_config(method: LabelSource) -> ExperimentConfig {
        ExperimentConfig { method, iterations: 12, feedback_frequency: 5, n_query: 6, candidate_pairs: 30, ..Default::default() }
    }

    #[test]
    fn run_log_shape_and_determinism() {
        let crowd = crate::crowd::sample_crowd(7, &CrowdRanges::default(), None, &mut seed::rng(1)).unwrap();
        let cfg = quick_config(LabelSource::Sml);
        let a = crowd_prefrl_run(&cfg, &crowd, 5).unwrap();
        assert_eq!(a.feedback.len(), cfg.n_sessions());
        assert_eq!(a.feedback.len(), 3);
        assert_eq!(a.feedback.last().unwrap().n_labels_total, 18);
        assert_eq!(a.evals.iter().map(|e| e.eval_iter).collect::<Vec<_>>(), vec![5, 10, 12]);
        assert!(a.feedback.iter().all(|r| r.user_errors.len() == 7));
        assert_eq!(a, crowd_prefrl_run(&cfg, &crowd, 5).unwrap());
        assert_ne!(a, crowd_prefrl_run(&cfg, &crowd, 6).unwrap());

        let mut buf = Vec::new();
        a.write_feedback_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("feedback_iter,maj_error,sml_error,n_labels_total\n0,"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn perfect_crowd_matches_truth() {
        let log = crowd_prefrl_run(&quick_config(LabelSource::Maj), &perfect_crowd(5), 2).unwrap();
        for r in &log.feedback {
            assert!(r.maj_error.is_none_or(|e| e == 0.0));
            assert!(r.sml_error.is_none_or(|e| e == 0.0));
        }
    }

    #[test]
    fn run_rejects_bad_input() {
        let mut cfg = quick_config(LabelSource::Oracle);
        cfg.feedback_frequency = 0;
        assert!(crowd_prefrl_run(&cfg, &perfect_crowd(3), 0).is_err());
        let minority = Crowd::new(vec![UserModel::new(1.0, 1.0, 0.0, 1).unwrap()], 0).unwrap();
        assert!(crowd_prefrl_run(&quick_config(LabelSource::Sml), &minority, 0).is_err());
    }

    #[test]
    fn sessions_count() {
        for (iters, k, want) in [(100, 5, 20), (101, 5, 21), (7, 7, 1), (1, 3, 1)] {
            let cfg = ExperimentConfig { iterations: iters, feedback_frequency: k, ..Default::default() };
            assert_eq!(cfg.n_sessions(), want);
        }
    }
}
