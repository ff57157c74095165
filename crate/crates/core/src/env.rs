//! Deterministic grid environments with known ground-truth rewards.
//!
//! States are cell indices `y * size + x`. Transitions are pure functions of
//! `(state, action)`; all randomness comes from the policies driving them.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seed::SimRng;

pub type State = usize;
pub type Action = usize;

/// A length-H run of `(state, action)` pairs with one hidden reward stream per
/// objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    steps: Vec<(State, Action)>,
    rewards: Vec<Vec<f64>>,
}

impl Segment {
    pub fn new(steps: Vec<(State, Action)>, rewards: Vec<Vec<f64>>) -> Result<Self> {
        if steps.is_empty() {
            return Err(invalid("segment must contain at least one step"));
        }
        if rewards.is_empty() {
            return Err(invalid("segment must carry at least one reward stream"));
        }
        if let Some(bad) = rewards.iter().position(|r| r.len() != steps.len()) {
            return Err(invalid(format!(
                "reward stream {bad} has length {} but segment has {} steps",
                rewards[bad].len(),
                steps.len()
            )));
        }
        Ok(Self { steps, rewards })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[(State, Action)] {
        &self.steps
    }

    pub fn n_objectives(&self) -> usize {
        self.rewards.len()
    }

    pub fn rewards(&self, objective: usize) -> Result<&[f64]> {
        self.rewards
            .get(objective)
            .map(Vec::as_slice)
            .ok_or_else(|| invalid(format!("objective {objective} not present (segment has {})", self.rewards.len())))
    }

    pub fn total_reward(&self, objective: usize) -> Result<f64> {
        Ok(self.rewards(objective)?.iter().sum())
    }
}

/// `sum_t gamma^(H-t) r_t` with t running 1..=H; `gamma = 1` gives the plain sum.
pub fn discounted_return(segment: &Segment, objective: usize, gamma: f64) -> Result<f64> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(invalid(format!("discount must be positive and finite, got {gamma}")));
    }
    let rewards = segment.rewards(objective)?;
    Ok(rewards.iter().fold(0.0, |acc, r| acc * gamma + r))
}

pub trait Environment {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn n_objectives(&self) -> usize;
    fn start(&self) -> State;
    fn step_budget(&self) -> usize;
    /// Deterministic transition returning the next state and one reward per objective.
    fn step(&self, state: State, action: Action) -> Result<(State, Vec<f64>)>;
}

/// Anything that can pick an action in a state.
pub trait ActionSampler {
    fn sample(&self, state: State, rng: &mut SimRng) -> Action;
}

#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub n_actions: usize,
}

impl ActionSampler for UniformPolicy {
    fn sample(&self, _state: State, rng: &mut SimRng) -> Action {
        rng.gen_range(0..self.n_actions)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedAction(pub Action);

impl ActionSampler for FixedAction {
    fn sample(&self, _state: State, _rng: &mut SimRng) -> Action {
        self.0
    }
}

/// State-independent action distribution.
#[derive(Debug, Clone)]
pub struct ActionWeights(WeightedIndex<f64>);

impl ActionWeights {
    pub fn new(weights: &[f64]) -> Result<Self> {
        WeightedIndex::new(weights)
            .map(Self)
            .map_err(|e| invalid(format!("bad action weights {weights:?}: {e}")))
    }
}

impl ActionSampler for ActionWeights {
    fn sample(&self, _state: State, rng: &mut SimRng) -> Action {
        self.0.sample(rng)
    }
}

pub mod actions {
    pub const UP: usize = 0;
    pub const DOWN: usize = 1;
    pub const LEFT: usize = 2;
    pub const RIGHT: usize = 3;
    pub const UP_RIGHT: usize = 4;
}

const MOVES: [(i64, i64); 5] = [(0, 1), (0, -1), (-1, 0), (1, 0), (1, 1)];

fn clip_move(size: usize, (x, y): (usize, usize), action: Action) -> (usize, usize) {
    let (dx, dy) = MOVES[action];
    let clamp = |v: i64| v.clamp(0, size as i64 - 1) as usize;
    (clamp(x as i64 + dx), clamp(y as i64 + dy))
}

fn check_cell(size: usize, (x, y): (usize, usize), what: &str) -> Result<()> {
    if x >= size || y >= size {
        return Err(invalid(format!("{what} ({x},{y}) outside {size}x{size} grid")));
    }
    Ok(())
}

/// Single-objective navigation task.
///
/// The step reward is the decrease in Manhattan distance to the goal, plus a
/// bonus of 1 on entering the goal; the goal is absorbing with zero reward.
/// Every reward is multiplied by `reward_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalGrid {
    pub size: usize,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub step_budget: usize,
    #[serde(default = "one")]
    pub reward_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for GoalGrid {
    fn default() -> Self {
        Self { size: 5, start: (0, 0), goal: (4, 4), step_budget: 20, reward_scale: 1.0 }
    }
}

impl GoalGrid {
    pub fn new(size: usize, start: (usize, usize), goal: (usize, usize), step_budget: usize) -> Result<Self> {
        let grid = Self { size, start, goal, step_budget, reward_scale: 1.0 };
        grid.validate()?;
        Ok(grid)
    }

    pub fn with_reward_scale(mut self, scale: f64) -> Result<Self> {
        self.reward_scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(invalid("grid size must be at least 2"));
        }
        check_cell(self.size, self.start, "start")?;
        check_cell(self.size, self.goal, "goal")?;
        if self.start == self.goal {
            return Err(invalid("start and goal must differ"));
        }
        if self.step_budget == 0 {
            return Err(invalid("step budget must be positive"));
        }
        if !(self.reward_scale.is_finite() && self.reward_scale > 0.0) {
            return Err(invalid(format!("reward scale must be positive, got {}", self.reward_scale)));
        }
        Ok(())
    }

    pub fn cell(&self, (x, y): (usize, usize)) -> State {
        y * self.size + x
    }

    pub fn coords(&self, state: State) -> (usize, usize) {
        (state % self.size, state / self.size)
    }

    pub fn distance_to_goal(&self, state: State) -> usize {
        let (x, y) = self.coords(state);
        x.abs_diff(self.goal.0) + y.abs_diff(self.goal.1)
    }
}

impl Environment for GoalGrid {
    fn n_states(&self) -> usize {
        self.size * self.size
    }

    fn n_actions(&self) -> usize {
        4
    }

    fn n_objectives(&self) -> usize {
        1
    }

    fn start(&self) -> State {
        self.cell(self.start)
    }

    fn step_budget(&self) -> usize {
        self.step_budget
    }

    fn step(&self, state: State, action: Action) -> Result<(State, Vec<f64>)> {
        if action >= 4 {
            return Err(invalid(format!("GoalGrid has 4 actions, got {action}")));
        }
        if state >= self.n_states() {
            return Err(invalid(format!("state {state} outside grid")));
        }
        let goal = self.cell(self.goal);
        if state == goal {
            return Ok((state, vec![0.0]));
        }
        let next = self.cell(clip_move(self.size, self.coords(state), action));
        let mut r = self.distance_to_goal(state) as f64 - self.distance_to_goal(next) as f64;
        if next == goal {
            r += 1.0;
        }
        Ok((next, vec![r * self.reward_scale]))
    }
}

/// Two-objective grid: objective 0 pays 1 for each step that moves right,
/// objective 1 pays 1 for each step that moves up. The extra up-right action
/// can satisfy both at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoObjectiveGrid {
    pub size: usize,
    pub start: (usize, usize),
    pub step_budget: usize,
}

impl TwoObjectiveGrid {
    pub fn new(size: usize, start: (usize, usize), step_budget: usize) -> Result<Self> {
        if size < 2 {
            return Err(invalid("grid size must be at least 2"));
        }
        check_cell(size, start, "start")?;
        if step_budget == 0 {
            return Err(invalid("step budget must be positive"));
        }
        Ok(Self { size, start, step_budget })
    }

    /// A grid just large enough that `h` steps from the lower-left corner
    /// never touch a wall.
    pub fn open_field(h: usize) -> Result<Self> {
        Self::new(h + 1, (0, 0), h)
    }

    pub fn cell(&self, (x, y): (usize, usize)) -> State {
        y * self.size + x
    }

    pub fn coords(&self, state: State) -> (usize, usize) {
        (state % self.size, state / self.size)
    }
}

impl Environment for TwoObjectiveGrid {
    fn n_states(&self) -> usize {
        self.size * self.size
    }

    fn n_actions(&self) -> usize {
        5
    }

    fn n_objectives(&self) -> usize {
        2
    }

    fn start(&self) -> State {
        self.cell(self.start)
    }

    fn step_budget(&self) -> usize {
        self.step_budget
    }

    fn step(&self, state: State, action: Action) -> Result<(State, Vec<f64>)> {
        if action >= 5 {
            return Err(invalid(format!("TwoObjectiveGrid has 5 actions, got {action}")));
        }
        if state >= self.n_states() {
            return Err(invalid(format!("state {state} outside grid")));
        }
        let (x, y) = self.coords(state);
        let (nx, ny) = clip_move(self.size, (x, y), action);
        let right = if nx > x { 1.0 } else { 0.0 };
        let up = if ny > y { 1.0 } else { 0.0 };
        Ok((self.cell((nx, ny)), vec![right, up]))
    }
}

/// One contiguous run through an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub next_states: Vec<State>,
    /// `rewards[objective][t]`
    pub rewards: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self, objective: usize) -> f64 {
        self.rewards[objective].iter().sum()
    }

    /// Cuts the trajectory into consecutive non-overlapping segments of
    /// length `h`; a shorter tail is dropped.
    pub fn segments(&self, h: usize) -> Vec<Segment> {
        if h == 0 {
            return Vec::new();
        }
        (0..self.len() / h)
            .map(|k| {
                let range = k * h..(k + 1) * h;
                let steps = range.clone().map(|t| (self.states[t], self.actions[t])).collect();
                let rewards = self.rewards.iter().map(|r| r[range.clone()].to_vec()).collect();
                Segment { steps, rewards }
            })
            .collect()
    }

    pub fn into_segment(self) -> Result<Segment> {
        let steps = self.states.into_iter().zip(self.actions).collect();
        Segment::new(steps, self.rewards)
    }
}

/// Runs `steps` transitions from the environment's start state.
pub fn run_steps<E, P>(policy: &P, env: &E, steps: usize, rng: &mut SimRng) -> Result<Trajectory>
where
    E: Environment + ?Sized,
    P: ActionSampler + ?Sized,
{
    let mut traj = Trajectory {
        states: Vec::with_capacity(steps),
        actions: Vec::with_capacity(steps),
        next_states: Vec::with_capacity(steps),
        rewards: vec![Vec::with_capacity(steps); env.n_objectives()],
    };
    let mut state = env.start();
    for _ in 0..steps {
        let action = policy.sample(state, rng);
        let (next, rewards) = env.step(state, action)?;
        traj.states.push(state);
        traj.actions.push(action);
        traj.next_states.push(next);
        for (stream, r) in traj.rewards.iter_mut().zip(rewards) {
            stream.push(r);
        }
        state = next;
    }
    Ok(traj)
}

/// One full episode of `step_budget` transitions.
pub fn run_episode<E, P>(policy: &P, env: &E, rng: &mut SimRng) -> Result<Trajectory>
where
    E: Environment + ?Sized,
    P: ActionSampler + ?Sized,
{
    run_steps(policy, env, env.step_budget(), rng)
}

/// Samples a length-`h` segment starting from the environment's start state.
pub fn rollout<E, P>(policy: &P, env: &E, h: usize, rng: &mut SimRng) -> Result<Segment>
where
    E: Environment + ?Sized,
    P: ActionSampler + ?Sized,
{
    if h == 0 || h > env.step_budget() {
        return Err(invalid(format!("segment length {h} must be in 1..={}", env.step_budget())));
    }
    run_steps(policy, env, h, rng)?.into_segment()
}

/// Ground-truth reward for every `(state, action)` pair, indexed
/// `state * n_actions + action`.
pub fn reward_table<E: Environment + ?Sized>(env: &E, objective: usize) -> Result<Vec<f64>> {
    if objective >= env.n_objectives() {
        return Err(invalid(format!("objective {objective} not defined by environment")));
    }
    let mut table = Vec::with_capacity(env.n_states() * env.n_actions());
    for s in 0..env.n_states() {
        for a in 0..env.n_actions() {
            table.push(env.step(s, a)?.1[objective]);
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    /// Each trajectory commits to one axis, so the two returns trade off.
    Conflicting,
    /// Noisy diagonal motion, so the two returns rise together.
    Aligned,
}

/// Commitment range for conflicting trajectories.
const CONFLICT_COMMIT: (f64, f64) = (0.4, 0.8);
/// Diagonal probability range for aligned trajectories.
const ALIGNED_DIAGONAL: (f64, f64) = (0.3, 0.9);
/// Probability of each single-axis move in aligned trajectories.
const ALIGNED_AXIS_LEAK: f64 = 0.02;

/// Scripted trajectory pool on an open [`TwoObjectiveGrid`].
pub fn scripted_pool(kind: PoolKind, count: usize, h: usize, rng: &mut SimRng) -> Result<Vec<Segment>> {
    if count < 2 {
        return Err(invalid(format!("pool needs at least 2 trajectories, got {count}")));
    }
    if h == 0 {
        return Err(invalid("trajectory length must be positive"));
    }
    let env = TwoObjectiveGrid::open_field(h)?;
    (0..count)
        .map(|_| {
            let mut w = [0.0; 5];
            match kind {
                PoolKind::Conflicting => {
                    let commit = rng.gen_range(CONFLICT_COMMIT.0..CONFLICT_COMMIT.1);
                    let axis = if rng.gen_bool(0.5) { actions::RIGHT } else { actions::UP };
                    w = [(1.0 - commit) / 4.0; 5];
                    w[axis] = commit;
                }
                PoolKind::Aligned => {
                    let diag = rng.gen_range(ALIGNED_DIAGONAL.0..ALIGNED_DIAGONAL.1);
                    let rest = (1.0 - diag - 2.0 * ALIGNED_AXIS_LEAK) / 2.0;
                    w[actions::UP] = ALIGNED_AXIS_LEAK;
                    w[actions::RIGHT] = ALIGNED_AXIS_LEAK;
                    w[actions::LEFT] = rest;
                    w[actions::DOWN] = rest;
                    w[actions::UP_RIGHT] = diag;
                }
            }
            rollout(&ActionWeights::new(&w)?, &env, h, rng)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SegmentRecord {
    steps: Vec<[usize; 2]>,
    rewards: BTreeMap<usize, Vec<f64>>,
}

/// Writes segments as JSON lines: `{"steps": [[s, a], ...], "rewards": {"0": [...]}}`.
pub fn write_segments_jsonl<W: Write>(mut w: W, segments: &[Segment]) -> Result<()> {
    for seg in segments {
        let record = SegmentRecord {
            steps: seg.steps.iter().map(|&(s, a)| [s, a]).collect(),
            rewards: seg.rewards.iter().cloned().enumerate().collect(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_segments_jsonl<R: BufRead>(r: R) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SegmentRecord = serde_json::from_str(&line)?;
        let n_obj = record.rewards.keys().max().map_or(0, |k| k + 1);
        if record.rewards.len() != n_obj {
            return Err(invalid(format!("line {}: reward objectives must be 0..{n_obj}", lineno + 1)));
        }
        let steps = record.steps.into_iter().map(|[s, a]| (s, a)).collect();
        let seg = Segment::new(steps, record.rewards.into_values().collect())
            .map_err(|e| invalid(format!("line {}: {e}", lineno + 1)))?;
        out.push(seg);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::stats::pearson;
    use approx::assert_relative_eq;

    #[test]
    fn goal_grid_step_rewards() {
        let g = GoalGrid::default();
        let s = g.cell((1, 1));
        let (next, r) = g.step(s, actions::RIGHT).unwrap();
        assert_eq!(next, g.cell((2, 1)));
        assert_eq!(r, vec![1.0]);
        let (next, r) = g.step(s, actions::LEFT).unwrap();
        assert_eq!(next, g.cell((0, 1)));
        assert_eq!(r, vec![-1.0]);
        // wall
        let (next, r) = g.step(g.cell((0, 0)), actions::DOWN).unwrap();
        assert_eq!(next, g.cell((0, 0)));
        assert_eq!(r, vec![0.0]);
        // goal bonus then absorbing
        let (next, r) = g.step(g.cell((3, 4)), actions::RIGHT).unwrap();
        assert_eq!(next, g.cell((4, 4)));
        assert_eq!(r, vec![2.0]);
        assert_eq!(g.step(next, actions::LEFT).unwrap(), (next, vec![0.0]));
        assert!(g.step(0, 4).is_err());
    }

    #[test]
    fn goal_grid_validation() {
        assert!(GoalGrid::new(5, (1, 1), (1, 1), 10).is_err());
        assert!(GoalGrid::new(5, (0, 0), (5, 0), 10).is_err());
        assert!(GoalGrid::new(5, (0, 0), (4, 4), 0).is_err());
        assert!(GoalGrid::default().with_reward_scale(0.0).is_err());
    }

    #[test]
    fn shaped_rewards_telescope() {
        let g = GoalGrid::default();
        let mut rng = seed::rng(11);
        for _ in 0..50 {
            let t = run_episode(&UniformPolicy { n_actions: 4 }, &g, &mut rng).unwrap();
            let end = *t.next_states.last().unwrap();
            let bonus = if end == g.cell(g.goal) { 1.0 } else { 0.0 };
            let expected = g.distance_to_goal(g.start()) as f64 - g.distance_to_goal(end) as f64 + bonus;
            assert_eq!(t.total_reward(0), expected);
        }
    }

    #[test]
    fn two_objective_rewards() {
        let g = TwoObjectiveGrid::new(6, (0, 0), 10).unwrap();
        assert_eq!(g.step(0, actions::UP_RIGHT).unwrap(), (g.cell((1, 1)), vec![1.0, 1.0]));
        assert_eq!(g.step(0, actions::RIGHT).unwrap().1, vec![1.0, 0.0]);
        assert_eq!(g.step(0, actions::UP).unwrap().1, vec![0.0, 1.0]);
        assert_eq!(g.step(g.cell((1, 1)), actions::LEFT).unwrap().1, vec![0.0, 0.0]);
        // diagonal against the top wall still moves right
        assert_eq!(g.step(g.cell((2, 5)), actions::UP_RIGHT).unwrap(), (g.cell((3, 5)), vec![1.0, 0.0]));
        assert!(g.step(0, 5).is_err());
    }

    #[test]
    fn two_objective_rewards_are_binary() {
        let g = TwoObjectiveGrid::new(4, (1, 1), 10).unwrap();
        for s in 0..g.n_states() {
            for a in 0..5 {
                for r in g.step(s, a).unwrap().1 {
                    assert!(r == 0.0 || r == 1.0);
                }
            }
        }
    }

    #[test]
    fn always_right_rollout() {
        let g = TwoObjectiveGrid::new(20, (0, 0), 30).unwrap();
        let seg = rollout(&FixedAction(actions::RIGHT), &g, 10, &mut seed::rng(0)).unwrap();
        assert_eq!(seg.total_reward(0).unwrap(), 10.0);
        assert_eq!(seg.total_reward(1).unwrap(), 0.0);
        // stops paying at the wall
        let small = TwoObjectiveGrid::new(5, (0, 0), 30).unwrap();
        let seg = rollout(&FixedAction(actions::RIGHT), &small, 10, &mut seed::rng(0)).unwrap();
        assert_eq!(seg.total_reward(0).unwrap(), 4.0);
    }

    #[test]
    fn rollout_bounds_and_determinism() {
        let g = GoalGrid::default();
        let p = UniformPolicy { n_actions: 4 };
        let one = rollout(&p, &g, 1, &mut seed::rng(3)).unwrap();
        assert_eq!(one.len(), 1);
        assert!(rollout(&p, &g, 0, &mut seed::rng(3)).is_err());
        assert!(rollout(&p, &g, 21, &mut seed::rng(3)).is_err());
        assert_eq!(rollout(&p, &g, 10, &mut seed::rng(5)).unwrap(), rollout(&p, &g, 10, &mut seed::rng(5)).unwrap());
    }

    #[test]
    fn discounted_returns() {
        let seg = |r: Vec<f64>| Segment::new(vec![(0, 0); r.len()], vec![r]).unwrap();
        assert_eq!(discounted_return(&seg(vec![1.0, 1.0, 1.0]), 0, 1.0).unwrap(), 3.0);
        assert_relative_eq!(discounted_return(&seg(vec![1.0, 0.0, 0.0]), 0, 0.5).unwrap(), 0.25);
        assert_eq!(discounted_return(&seg(vec![0.0; 4]), 0, 0.9).unwrap(), 0.0);
        // latest reward is undiscounted
        assert_relative_eq!(discounted_return(&seg(vec![0.0, 0.0, 2.0]), 0, 0.5).unwrap(), 2.0);
        assert!(discounted_return(&seg(vec![1.0]), 1, 1.0).is_err());
    }

    #[test]
    fn segment_invariants() {
        assert!(Segment::new(vec![], vec![vec![]]).is_err());
        assert!(Segment::new(vec![(0, 0)], vec![vec![1.0, 2.0]]).is_err());
        assert!(Segment::new(vec![(0, 0)], vec![]).is_err());
    }

    fn pool_correlation(kind: PoolKind, seed_: u64) -> f64 {
        let pool = scripted_pool(kind, 100, 50, &mut seed::rng(seed_)).unwrap();
        let r0: Vec<f64> = pool.iter().map(|s| s.total_reward(0).unwrap()).collect();
        let r1: Vec<f64> = pool.iter().map(|s| s.total_reward(1).unwrap()).collect();
        pearson(&r0, &r1)
    }

    #[test]
    fn pool_correlation_signatures() {
        for s in 0..5 {
            assert!(pool_correlation(PoolKind::Conflicting, s) < 0.0);
            assert!(pool_correlation(PoolKind::Aligned, s) > 0.5);
        }
    }

    #[test]
    fn minimal_pool() {
        let pool = scripted_pool(PoolKind::Aligned, 2, 3, &mut seed::rng(1)).unwrap();
        assert_eq!(pool.len(), 2);
        assert!(scripted_pool(PoolKind::Aligned, 1, 3, &mut seed::rng(1)).is_err());
    }

    #[test]
    fn trajectory_segments() {
        let g = GoalGrid::default();
        let t = run_episode(&UniformPolicy { n_actions: 4 }, &g, &mut seed::rng(2)).unwrap();
        let segs = t.segments(6);
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[1].steps()[0], (t.states[6], t.actions[6]));
    }

    #[test]
    fn jsonl_round_trip() {
        let pool = scripted_pool(PoolKind::Conflicting, 3, 4, &mut seed::rng(9)).unwrap();
        let mut buf = Vec::new();
        write_segments_jsonl(&mut buf, &pool).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("{\"steps\":[["));
        assert_eq!(read_segments_jsonl(&buf[..]).unwrap(), pool);
    }
}
