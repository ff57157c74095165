//! Desk-scale analyses: crowd sweeps, high-spread crowd selection, the
//! minority-detection scenario and multi-seed training suites.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{label_error, label_error_where_defined, majority_vote, sml_labels, AggregateResult, Method};
use crate::cluster::{
    assign_clusters, matching_accuracy, per_cluster_aggregate, select_model_with, ClusterReport, DEFAULT_K_MAX,
    DEFAULT_RESTARTS,
};
use crate::crowd::{label_matrix_with, sample_crowd, Crowd, CrowdRanges, Label, MinoritySpec, ParamRange, Query};
use crate::env::{rollout, scripted_pool, GoalGrid, PoolKind, Segment, UniformPolicy};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::policy::{crowd_prefrl_run, ExperimentConfig, LabelSource, RunLog};
use crate::seed::{self, stream, SimRng};
use crate::stats;

/// Random-policy query pairs on a [`GoalGrid`]. Pairs whose true returns tie
/// are rejected, so every query has a defined ground-truth label.
pub fn probe_queries(env: &GoalGrid, h: usize, n: usize, rng: &mut SimRng) -> Result<Vec<Query>> {
    env.validate()?;
    if h == 0 {
        return Err(invalid("segment length must be positive"));
    }
    let policy = UniformPolicy { n_actions: 4 };
    let mut out = Vec::with_capacity(n);
    let max_attempts = 100 * n.max(1);
    for _ in 0..max_attempts {
        if out.len() == n {
            break;
        }
        let q = Query::new(rollout(&policy, env, h, rng)?, rollout(&policy, env, h, rng)?)?;
        if q.truth(0)?.is_some() {
            out.push(q);
        }
    }
    if out.len() < n {
        return Err(Error::DegenerateData(format!("only {} of {n} random query pairs had distinct returns", out.len())));
    }
    Ok(out)
}

fn truths(queries: &[Query], objective: usize) -> Result<Vec<Label>> {
    queries
        .iter()
        .map(|q| q.truth(objective)?.ok_or_else(|| invalid("query with tied returns in a probe set")))
        .collect()
}

/// How one crowd fares on a fixed query set with known truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CrowdEvaluation {
    pub user_errors: Vec<f64>,
    pub maj_error: f64,
    pub sml_error: f64,
    pub weights: Vec<f64>,
}

impl CrowdEvaluation {
    pub fn user_error_std(&self) -> f64 {
        stats::std_population(&self.user_errors)
    }

    pub fn best_user_error(&self) -> f64 {
        self.user_errors.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Spearman correlation between SML weights and user accuracy. 1 means the
    /// weights order users exactly by ascending error.
    pub fn reliability_spearman(&self) -> f64 {
        let accuracy: Vec<f64> = self.user_errors.iter().map(|e| -e).collect();
        stats::spearman(&self.weights, &accuracy)
    }
}

pub fn evaluate_crowd(crowd: &Crowd, queries: &[Query], truth: &[Label], rng: &mut SimRng) -> Result<CrowdEvaluation> {
    let matrix = label_matrix_with(crowd, queries, rng, Exec::Sequential)?;
    let user_errors = matrix.rows().map(|r| label_error(r, truth)).collect::<Result<Vec<_>>>()?;
    let sml = sml_labels(&matrix)?;
    Ok(CrowdEvaluation {
        user_errors,
        maj_error: label_error(&majority_vote(&matrix)?.labels, truth)?,
        sml_error: label_error(&sml.labels, truth)?,
        weights: sml.weights.unwrap_or_default(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    pub crowds_per_size: usize,
    pub n_queries: usize,
    pub segment_length: usize,
    pub env: GoalGrid,
    pub ranges: CrowdRanges,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sizes: vec![7, 11, 15],
            crowds_per_size: 100,
            n_queries: 1000,
            segment_length: 10,
            env: GoalGrid { reward_scale: 0.1, ..GoalGrid::default() },
            ranges: CrowdRanges::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(invalid("sizes must be a non-empty list of positive crowd sizes"));
        }
        if self.crowds_per_size == 0 || self.n_queries == 0 {
            return Err(invalid("crowds_per_size and n_queries must be positive"));
        }
        self.env.validate()?;
        self.ranges.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub crowd_seed: u64,
    pub user_error_std: f64,
    pub maj_error: f64,
    pub sml_error: f64,
    pub best_user_error: f64,
}

/// Seed of crowd `index` of size `m` under `master`.
pub fn crowd_seed(master: u64, m: usize, index: usize) -> u64 {
    seed::derive(master, &[stream::CROWD, m as u64, index as u64])
}

/// One row per sampled crowd, ordered by size then crowd index. All crowds
/// label the same query set.
pub fn sweep(cfg: &SweepConfig, master: u64, exec: Exec) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let queries = probe_queries(&cfg.env, cfg.segment_length, cfg.n_queries, &mut seed::derived_rng(master, &[stream::QUERIES]))?;
    let truth = truths(&queries, 0)?;
    let jobs: Vec<(usize, usize)> =
        cfg.sizes.iter().flat_map(|&m| (0..cfg.crowds_per_size).map(move |c| (m, c))).collect();
    exec.try_map(jobs.len(), |j| {
        let (m, c) = jobs[j];
        let crowd_seed = crowd_seed(master, m, c);
        let crowd = sample_crowd(m, &cfg.ranges, None, &mut seed::rng(crowd_seed))?;
        let eval = evaluate_crowd(&crowd, &queries, &truth, &mut seed::derived_rng(crowd_seed, &[stream::LABELS]))?;
        Ok(SweepRow {
            m,
            crowd_seed,
            user_error_std: eval.user_error_std(),
            maj_error: eval.maj_error,
            sml_error: eval.sml_error,
            best_user_error: eval.best_user_error(),
        })
    })
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

/// Crowd picked by [`high_spread_crowd`].
#[derive(Debug, Clone)]
pub struct SelectedCrowd {
    pub index: usize,
    pub crowd: Crowd,
    pub evaluation: CrowdEvaluation,
}

/// Among `candidates` sampled crowds of size `m`, the one whose per-user label
/// errors on `cfg`'s probe queries have the largest spread.
pub fn high_spread_crowd(cfg: &SweepConfig, m: usize, candidates: usize, master: u64, exec: Exec) -> Result<SelectedCrowd> {
    if candidates == 0 {
        return Err(invalid("need at least one candidate crowd"));
    }
    let cfg = SweepConfig { sizes: vec![m], crowds_per_size: candidates, ..cfg.clone() };
    cfg.validate()?;
    let queries = probe_queries(&cfg.env, cfg.segment_length, cfg.n_queries, &mut seed::derived_rng(master, &[stream::QUERIES]))?;
    let truth = truths(&queries, 0)?;
    let evaluated = exec.try_map(candidates, |c| {
        let crowd_seed = crowd_seed(master, m, c);
        let crowd = sample_crowd(m, &cfg.ranges, None, &mut seed::rng(crowd_seed))?;
        let eval = evaluate_crowd(&crowd, &queries, &truth, &mut seed::derived_rng(crowd_seed, &[stream::LABELS]))?;
        Ok::<_, Error>((crowd, eval))
    })?;
    let (index, (crowd, evaluation)) = evaluated
        .into_iter()
        .enumerate()
        .reduce(|best, cur| if cur.1 .1.user_error_std() > best.1 .1.user_error_std() { cur } else { best })
        .expect("candidates > 0");
    Ok(SelectedCrowd { index, crowd, evaluation })
}

/// Crowd with a planted minority labelling a scripted two-objective pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterScenario {
    pub n_users: usize,
    pub minority: usize,
    pub pool: PoolKind,
    pub pool_size: usize,
    pub n_queries: usize,
    pub segment_length: usize,
    pub ranges: CrowdRanges,
    pub k_max: usize,
    pub restarts: usize,
}

impl Default for ClusterScenario {
    fn default() -> Self {
        Self {
            n_users: 150,
            minority: 40,
            pool: PoolKind::Conflicting,
            pool_size: 100,
            n_queries: 300,
            segment_length: 50,
            ranges: CrowdRanges {
                beta: ParamRange::new(2.0, 10.0),
                epsilon: ParamRange::new(0.08, 0.12),
                ..CrowdRanges::default()
            },
            k_max: DEFAULT_K_MAX,
            restarts: DEFAULT_RESTARTS,
        }
    }
}

impl ClusterScenario {
    /// The 15-user, 11/4 crowd used to read minority structure off the weights.
    pub fn small() -> Self {
        Self { n_users: 15, minority: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size < 2 || self.n_queries == 0 || self.k_max == 0 || self.restarts == 0 {
            return Err(invalid("pool_size >= 2 and positive n_queries, k_max, restarts required"));
        }
        self.ranges.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterError {
    pub size: usize,
    /// Objective followed by most of the cluster's members.
    pub objective: usize,
    pub method: Method,
    /// `None` when every query ties under `objective`.
    pub label_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterOutcome {
    pub report: ClusterReport,
    pub pool_correlation: f64,
    pub weights: Vec<f64>,
    pub objectives: Vec<usize>,
    pub assignment_accuracy: f64,
    pub cluster_errors: BTreeMap<usize, ClusterError>,
}

impl ClusterOutcome {
    /// Every majority user has positive weight and every minority user negative.
    pub fn minority_sign_separated(&self) -> bool {
        self.weights.iter().zip(&self.objectives).all(|(&w, &o)| if o == 0 { w > 0.0 } else { w < 0.0 })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `n` pairs of distinct pool segments drawn uniformly with replacement.
pub fn pool_queries(pool: &[Segment], n: usize, rng: &mut SimRng) -> Result<Vec<Query>> {
    if pool.len() < 2 {
        return Err(invalid("pool needs at least 2 segments"));
    }
    (0..n)
        .map(|_| {
            let i = rng.gen_range(0..pool.len());
            let mut j = rng.gen_range(0..pool.len() - 1);
            if j >= i {
                j += 1;
            }
            Query::new(pool[i].clone(), pool[j].clone())
        })
        .collect()
}

/// Labels a scripted pool with a planted-minority crowd, then clusters the
/// users by their SML weights and re-aggregates each cluster.
pub fn run_cluster_scenario(cfg: &ClusterScenario, master: u64, exec: Exec) -> Result<ClusterOutcome> {
    cfg.validate()?;
    let minority = (cfg.minority > 0).then_some(MinoritySpec { count: cfg.minority, objective_id: 1 });
    let crowd = sample_crowd(cfg.n_users, &cfg.ranges, minority, &mut seed::derived_rng(master, &[stream::CROWD]))?;
    let pool = scripted_pool(cfg.pool, cfg.pool_size, cfg.segment_length, &mut seed::derived_rng(master, &[stream::POOL]))?;
    let r0 = pool.iter().map(|s| s.total_reward(0)).collect::<Result<Vec<_>>>()?;
    let r1 = pool.iter().map(|s| s.total_reward(1)).collect::<Result<Vec<_>>>()?;
    let queries = pool_queries(&pool, cfg.n_queries, &mut seed::derived_rng(master, &[stream::QUERIES]))?;
    let matrix = label_matrix_with(&crowd, &queries, &mut seed::derived_rng(master, &[stream::LABELS]), exec)?;

    let weights = sml_labels(&matrix)?.weights.unwrap_or_default();
    let selection = select_model_with(&weights, cfg.k_max, cfg.restarts, &mut seed::derived_rng(master, &[stream::GMM]), exec)?;
    let assignment = assign_clusters(&selection.fit, &weights);
    let objectives: Vec<usize> = crowd.users.iter().map(|u| u.objective_id).collect();
    let assignment_accuracy = matching_accuracy(&assignment.labels, &objectives)?;

    let truth_by_objective: Vec<Vec<Option<Label>>> = (0..2)
        .map(|o| queries.iter().map(|q| q.truth(o)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut cluster_errors = BTreeMap::new();
    for (c, result) in per_cluster_aggregate(&matrix, &assignment)? {
        let members = assignment.members(c);
        let minority_members = members.iter().filter(|&&u| objectives[u] == 1).count();
        let objective = usize::from(2 * minority_members > members.len());
        let AggregateResult { method, labels, .. } = result;
        cluster_errors.insert(
            c,
            ClusterError {
                size: members.len(),
                objective,
                method,
                label_error: label_error_where_defined(&labels, &truth_by_objective[objective])?,
            },
        );
    }
    Ok(ClusterOutcome {
        report: ClusterReport::new(&selection, matrix.user_ids(), &assignment)?,
        pool_correlation: stats::pearson(&r0, &r1),
        weights,
        objectives,
        assignment_accuracy,
        cluster_errors,
    })
}

/// Seeds for `n` independent training runs under one master seed.
pub fn run_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| seed::derive(master, &[stream::RUN, k])).collect()
}

/// Runs every method in `methods` for every seed, ordered by method then seed.
pub fn train_suite(cfg: &ExperimentConfig, crowd: &Crowd, methods: &[LabelSource], seeds: &[u64], exec: Exec) -> Result<Vec<RunLog>> {
    let jobs: Vec<(LabelSource, u64)> = methods.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    exec.try_map(jobs.len(), |j| {
        let (method, s) = jobs[j];
        crowd_prefrl_run(&ExperimentConfig { method, ..cfg.clone() }, crowd, s)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_sweep() -> SweepConfig {
        SweepConfig { sizes: vec![5, 7], crowds_per_size: 3, n_queries: 200, ..SweepConfig::default() }
    }

    #[test]
    fn probe_queries_have_truth() {
        let qs = probe_queries(&SweepConfig::default().env, 10, 50, &mut seed::rng(1)).unwrap();
        assert_eq!(qs.len(), 50);
        assert!(qs.iter().all(|q| q.truth(0).unwrap().is_some()));
    }

    #[test]
    fn probe_queries_reject_empty_segments() {
        assert!(probe_queries(&GoalGrid::default(), 0, 5, &mut seed::rng(1)).is_err());
    }

    #[test]
    fn sweep_rows_shape_and_ranges() {
        let rows = sweep(&small_sweep(), 7, Exec::default()).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows.iter().map(|r| r.m).collect::<Vec<_>>(), vec![5, 5, 5, 7, 7, 7]);
        for r in &rows {
            for x in [r.maj_error, r.sml_error, r.best_user_error] {
                assert!((0.0..=1.0).contains(&x));
            }
            assert!(r.user_error_std >= 0.0);
        }
    }

    #[test]
    fn sweep_is_reproducible_across_exec() {
        let runs: Vec<_> = Exec::all().into_iter().map(|e| sweep(&small_sweep(), 3, e).unwrap()).collect();
        assert!(runs.windows(2).all(|w| w[0] == w[1]));
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_sweep_csv(&mut a, &runs[0]).unwrap();
        write_sweep_csv(&mut b, &sweep(&small_sweep(), 3, Exec::Sequential).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(String::from_utf8(a).unwrap().starts_with("m,crowd_seed,user_error_std,maj_error,sml_error,best_user_error\n"));
    }

    #[test]
    fn perfect_crowd_sweep_has_zero_error() {
        let cfg = SweepConfig {
            sizes: vec![5],
            crowds_per_size: 1,
            n_queries: 100,
            ranges: CrowdRanges {
                gamma: ParamRange::new(1.0, 1.0),
                beta: ParamRange::new(1e6, 1e6),
                epsilon: ParamRange::new(0.0, 0.0),
            },
            ..SweepConfig::default()
        };
        let row = &sweep(&cfg, 0, Exec::Sequential).unwrap()[0];
        assert_eq!((row.maj_error, row.sml_error, row.best_user_error), (0.0, 0.0, 0.0));
    }

    #[test]
    fn sweep_rejects_bad_config() {
        for cfg in [
            SweepConfig { sizes: vec![], ..small_sweep() },
            SweepConfig { sizes: vec![0], ..small_sweep() },
            SweepConfig { crowds_per_size: 0, ..small_sweep() },
        ] {
            assert!(matches!(sweep(&cfg, 0, Exec::Sequential), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn high_spread_picks_max_std() {
        let cfg = small_sweep();
        let picked = high_spread_crowd(&cfg, 7, 3, 5, Exec::default()).unwrap();
        let rows = sweep(&SweepConfig { sizes: vec![7], ..cfg }, 5, Exec::Sequential).unwrap();
        let best = rows.iter().map(|r| r.user_error_std).fold(f64::MIN, f64::max);
        assert_eq!(picked.evaluation.user_error_std(), best);
        assert_eq!(picked.crowd.seed, sample_crowd(7, &CrowdRanges::default(), None, &mut seed::rng(rows[picked.index].crowd_seed)).unwrap().seed);
    }

    #[test]
    fn small_cluster_scenario_separates_minority() {
        let out = run_cluster_scenario(&ClusterScenario::small(), 0, Exec::default()).unwrap();
        assert!(out.pool_correlation < 0.0);
        assert_eq!(out.objectives.iter().filter(|&&o| o == 1).count(), 4);
        assert!(out.minority_sign_separated());
        assert!((0.0..=1.0).contains(&out.assignment_accuracy));
        let json: serde_json::Value = serde_json::from_str(&out.to_json().unwrap()).unwrap();
        assert!(json["report"]["best_k"].is_u64());
    }

    #[test]
    fn cluster_scenario_is_deterministic() {
        let cfg = ClusterScenario { n_users: 20, minority: 5, ..ClusterScenario::default() };
        let a = run_cluster_scenario(&cfg, 4, Exec::Sequential).unwrap();
        for exec in Exec::all() {
            let b = run_cluster_scenario(&cfg, 4, exec).unwrap();
            assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        }
    }

    #[test]
    fn train_suite_orders_runs() {
        let cfg = ExperimentConfig { iterations: 10, feedback_frequency: 5, episodes_per_iteration: 4, ..ExperimentConfig::default() };
        let crowd = sample_crowd(5, &CrowdRanges::default(), None, &mut seed::rng(0)).unwrap();
        let logs = train_suite(&cfg, &crowd, &LabelSource::ALL, &[1, 2], Exec::default()).unwrap();
        let keys: Vec<_> = logs.iter().map(|l| (l.method, l.seed)).collect();
        let expected: Vec<_> = LabelSource::ALL.iter().flat_map(|&m| [(m, 1), (m, 2)]).collect();
        assert_eq!(keys, expected);
    }
}
