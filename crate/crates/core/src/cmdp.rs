//! Tabular contextual MDPs, histories, policies, rollouts and exact
//! finite-horizon evaluation by history enumeration.
//!
//! The context is drawn once per episode and held fixed. Policies only ever
//! see a [`History`]; rewards are recorded on trajectories for evaluation and
//! never handed back to a policy.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::de::{Deserializer, Error as _};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Tolerance for simplex rows.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Histories whose joint probability under every tracked measure falls below
/// this are not expanded.
pub const PRUNE_BELOW: f64 = 1e-15;
/// Default cap on enumerated (history) nodes.
pub const DEFAULT_BUDGET: usize = 1_000_000;

pub(crate) fn check_simplex(row: &[f64]) -> std::result::Result<(), String> {
    if row.is_empty() {
        return Err("empty distribution".into());
    }
    if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(format!("entry {p} is not a nonnegative finite number"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(format!("entries sum to {sum}, expected 1"));
    }
    Ok(())
}

/// Finite contextual MDP with per-context transitions and rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularCmdp {
    num_states: usize,
    num_actions: usize,
    num_contexts: usize,
    horizon: usize,
    context_prior: Vec<f64>,
    initial_state_dist: Vec<f64>,
    // [s][a][c][s'] flattened
    transition: Vec<f64>,
    // [s][a][c] flattened
    reward: Vec<f64>,
}

impl TabularCmdp {
    /// Build and validate a CMDP from flat row-major tables
    /// (`transition` is `[s][a][c][s']`, `reward` is `[s][a][c]`).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_states: usize,
        num_actions: usize,
        num_contexts: usize,
        horizon: usize,
        context_prior: Vec<f64>,
        initial_state_dist: Vec<f64>,
        transition: Vec<f64>,
        reward: Vec<f64>,
    ) -> Result<Self> {
        for (name, n) in [
            ("num_states", num_states),
            ("num_actions", num_actions),
            ("num_contexts", num_contexts),
            ("horizon", horizon),
        ] {
            if n == 0 {
                return Err(Error::model(name, "must be at least 1"));
            }
        }
        if context_prior.len() != num_contexts {
            return Err(Error::model(
                "context_prior",
                format!("length {} != num_contexts {num_contexts}", context_prior.len()),
            ));
        }
        check_simplex(&context_prior).map_err(|m| Error::model("context_prior", m))?;
        if initial_state_dist.len() != num_states {
            return Err(Error::model(
                "initial_state_dist",
                format!(
                    "length {} != num_states {num_states}",
                    initial_state_dist.len()
                ),
            ));
        }
        check_simplex(&initial_state_dist).map_err(|m| Error::model("initial_state_dist", m))?;
        let rows = num_states * num_actions * num_contexts;
        if transition.len() != rows * num_states {
            return Err(Error::model(
                "transition",
                format!("expected {} entries, got {}", rows * num_states, transition.len()),
            ));
        }
        if reward.len() != rows {
            return Err(Error::model(
                "reward",
                format!("expected {rows} entries, got {}", reward.len()),
            ));
        }
        let cmdp = Self {
            num_states,
            num_actions,
            num_contexts,
            horizon,
            context_prior,
            initial_state_dist,
            transition,
            reward,
        };
        for s in 0..num_states {
            for a in 0..num_actions {
                for c in 0..num_contexts {
                    check_simplex(cmdp.transition(s, a, c))
                        .map_err(|m| Error::model(format!("transition[{s}][{a}][{c}]"), m))?;
                    let r = cmdp.reward(s, a, c);
                    if !r.is_finite() || !(-1.0..=1.0).contains(&r) {
                        return Err(Error::model(
                            format!("reward[{s}][{a}][{c}]"),
                            format!("{r} outside [-1, 1]"),
                        ));
                    }
                }
            }
        }
        Ok(cmdp)
    }

    /// Random instance: Dirichlet(1) rows, rewards uniform on [-1, 1].
    pub fn random(
        num_states: usize,
        num_actions: usize,
        num_contexts: usize,
        horizon: usize,
        stream: &mut RandomStream,
    ) -> Self {
        let prior = random_simplex(num_contexts, stream);
        let init = random_simplex(num_states, stream);
        let mut transition = Vec::with_capacity(num_states.pow(2) * num_actions * num_contexts);
        let mut reward = Vec::with_capacity(num_states * num_actions * num_contexts);
        for _ in 0..num_states * num_actions * num_contexts {
            transition.extend(random_simplex(num_states, stream));
            reward.push(2.0 * stream.uniform() - 1.0);
        }
        Self::new(
            num_states,
            num_actions,
            num_contexts,
            horizon,
            prior,
            init,
            transition,
            reward,
        )
        .expect("random instance is valid by construction")
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn context_prior(&self) -> &[f64] {
        &self.context_prior
    }
    pub fn initial_state_dist(&self) -> &[f64] {
        &self.initial_state_dist
    }

    #[inline]
    fn row(&self, s: usize, a: usize, c: usize) -> usize {
        (s * self.num_actions + a) * self.num_contexts + c
    }

    /// Next-state distribution for `(s, a, c)`.
    #[inline]
    pub fn transition(&self, s: usize, a: usize, c: usize) -> &[f64] {
        let start = self.row(s, a, c) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize, c: usize) -> f64 {
        self.reward[self.row(s, a, c)]
    }

    /// Same model with a different horizon.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::model("horizon", "must be at least 1"));
        }
        Ok(Self {
            horizon,
            ..self.clone()
        })
    }

    /// Parse and validate a JSON document. Errors carry a line number.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: CmdpDocument = serde_json::from_str(text)?;
        doc.into_cmdp().map_err(|e| match e {
            Error::InvalidModel { location, message } => {
                let key = location.split('[').next().unwrap_or(&location);
                let line = line_of_key(text, key)
                    .map(|l| format!(" (line {l})"))
                    .unwrap_or_default();
                Error::InvalidModel {
                    location: format!("{location}{line}"),
                    message,
                }
            }
            other => other,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("plain numeric document")
    }

    fn to_document(&self) -> CmdpDocumentOut {
        let (ns, na, nc) = (self.num_states, self.num_actions, self.num_contexts);
        CmdpDocumentOut {
            num_states: ns,
            num_actions: na,
            num_contexts: nc,
            horizon: self.horizon,
            context_prior: self.context_prior.clone(),
            initial_state_dist: self.initial_state_dist.clone(),
            transition: (0..ns)
                .map(|s| {
                    (0..na)
                        .map(|a| (0..nc).map(|c| self.transition(s, a, c).to_vec()).collect())
                        .collect()
                })
                .collect(),
            reward: (0..ns)
                .map(|s| {
                    (0..na)
                        .map(|a| (0..nc).map(|c| self.reward(s, a, c)).collect())
                        .collect()
                })
                .collect(),
        }
    }
}

impl Serialize for TabularCmdp {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_document().serialize(serializer)
    }
}

fn random_simplex(n: usize, stream: &mut RandomStream) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -(1.0 - stream.uniform()).ln()).collect();
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / n as f64; n];
    }
    w.into_iter().map(|x| x / total).collect()
}

fn line_of_key(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

/// Probability row validated while parsing, so the parser reports the line.
struct ProbRow(Vec<f64>);

impl<'de> Deserialize<'de> for ProbRow {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let row = Vec::<f64>::deserialize(d)?;
        check_simplex(&row).map_err(D::Error::custom)?;
        Ok(ProbRow(row))
    }
}

struct RewardEntry(f64);

impl<'de> Deserialize<'de> for RewardEntry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = f64::deserialize(d)?;
        if !(-1.0..=1.0).contains(&r) {
            return Err(D::Error::custom(format!("reward {r} outside [-1, 1]")));
        }
        Ok(RewardEntry(r))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CmdpDocument {
    num_states: usize,
    num_actions: usize,
    num_contexts: usize,
    horizon: usize,
    context_prior: ProbRow,
    initial_state_dist: ProbRow,
    transition: Vec<Vec<Vec<ProbRow>>>,
    reward: Vec<Vec<Vec<RewardEntry>>>,
}

#[derive(Serialize)]
struct CmdpDocumentOut {
    num_states: usize,
    num_actions: usize,
    num_contexts: usize,
    horizon: usize,
    context_prior: Vec<f64>,
    initial_state_dist: Vec<f64>,
    transition: Vec<Vec<Vec<Vec<f64>>>>,
    reward: Vec<Vec<Vec<f64>>>,
}

impl CmdpDocument {
    fn into_cmdp(self) -> Result<TabularCmdp> {
        let (ns, na, nc) = (self.num_states, self.num_actions, self.num_contexts);
        let shape_err = |what: &str, got: usize, want: usize| {
            Error::model(what, format!("has length {got}, expected {want}"))
        };
        if self.transition.len() != ns {
            return Err(shape_err("transition", self.transition.len(), ns));
        }
        if self.reward.len() != ns {
            return Err(shape_err("reward", self.reward.len(), ns));
        }
        let mut transition = Vec::new();
        let mut reward = Vec::new();
        for (s, (t_s, r_s)) in self.transition.into_iter().zip(self.reward).enumerate() {
            if t_s.len() != na {
                return Err(shape_err(&format!("transition[{s}]"), t_s.len(), na));
            }
            if r_s.len() != na {
                return Err(shape_err(&format!("reward[{s}]"), r_s.len(), na));
            }
            for (a, (t_sa, r_sa)) in t_s.into_iter().zip(r_s).enumerate() {
                if t_sa.len() != nc {
                    return Err(shape_err(&format!("transition[{s}][{a}]"), t_sa.len(), nc));
                }
                if r_sa.len() != nc {
                    return Err(shape_err(&format!("reward[{s}][{a}]"), r_sa.len(), nc));
                }
                for (c, row) in t_sa.into_iter().enumerate() {
                    if row.0.len() != ns {
                        return Err(shape_err(&format!("transition[{s}][{a}][{c}]"), row.0.len(), ns));
                    }
                    transition.extend(row.0);
                }
                reward.extend(r_sa.into_iter().map(|r| r.0));
            }
        }
        TabularCmdp::new(
            ns,
            na,
            nc,
            self.horizon,
            self.context_prior.0,
            self.initial_state_dist.0,
            transition,
            reward,
        )
    }
}

/// `t`-step history `(s_1, a_1, ..., s_t)` stored as index sequences.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct History {
    states: Vec<usize>,
    actions: Vec<usize>,
}

impl History {
    pub fn new(first_state: usize) -> Self {
        Self {
            states: vec![first_state],
            actions: Vec::new(),
        }
    }

    pub fn from_parts(states: Vec<usize>, actions: Vec<usize>) -> Result<Self> {
        if states.len() != actions.len() + 1 {
            return Err(Error::InvalidParams(format!(
                "history with {} states needs {} actions, got {}",
                states.len(),
                states.len().saturating_sub(1),
                actions.len()
            )));
        }
        Ok(Self { states, actions })
    }

    /// Number of states observed so far (the `t` of `h_t`).
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn last_state(&self) -> usize {
        *self.states.last().expect("history always has a first state")
    }

    pub fn push(&mut self, action: usize, next_state: usize) {
        self.actions.push(action);
        self.states.push(next_state);
    }

    pub(crate) fn pop(&mut self) {
        self.states.pop();
        self.actions.pop();
        debug_assert!(!self.states.is_empty());
    }

    /// The prefix `h_t` for `1 <= t <= len`.
    pub fn prefix(&self, t: usize) -> History {
        History {
            states: self.states[..t].to_vec(),
            actions: self.actions[..t - 1].to_vec(),
        }
    }

    /// Interleaved `[s_1, a_1, s_2, ...]`, usable as a stream path.
    pub fn as_path(&self) -> Vec<u64> {
        let mut out = Vec::with_capacity(2 * self.states.len());
        for (i, &s) in self.states.iter().enumerate() {
            out.push(s as u64);
            if let Some(&a) = self.actions.get(i) {
                out.push(a as u64);
            }
        }
        out
    }
}

/// One sampled episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub context: usize,
    pub history: History,
    pub rewards: Vec<f64>,
    pub executed_actions: Vec<usize>,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// A time-varying history policy `H -> Δ(A)`.
pub trait Policy: Sync {
    fn num_actions(&self) -> usize;

    /// Action distribution after history `h`, computed from scratch.
    fn action_probs(&self, history: &History) -> Vec<f64>;

    /// Incremental evaluator for a single episode. `None` means rollouts
    /// replay [`Policy::action_probs`] on the growing history.
    fn cursor(&self, _first_state: usize) -> Option<Box<dyn PolicyCursor + '_>> {
        None
    }
}

/// Per-episode incremental view of a [`Policy`].
pub trait PolicyCursor {
    fn action_probs(&mut self) -> Vec<f64>;
    fn record(&mut self, action: usize, next_state: usize);
}

struct ReplayCursor<'a> {
    policy: &'a dyn Policy,
    history: History,
}

impl PolicyCursor for ReplayCursor<'_> {
    fn action_probs(&mut self) -> Vec<f64> {
        self.policy.action_probs(&self.history)
    }
    fn record(&mut self, action: usize, next_state: usize) {
        self.history.push(action, next_state);
    }
}

pub fn cursor_for<'a>(policy: &'a dyn Policy, first_state: usize) -> Box<dyn PolicyCursor + 'a> {
    policy.cursor(first_state).unwrap_or_else(|| {
        Box::new(ReplayCursor {
            policy,
            history: History::new(first_state),
        })
    })
}

/// Expert policy `π^E(a | s, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPolicy {
    num_states: usize,
    num_actions: usize,
    num_contexts: usize,
    // [s][c][a]
    probs: Vec<f64>,
}

impl ExpertPolicy {
    /// `probs` is `[s][c][a]` row-major.
    pub fn new(num_states: usize, num_contexts: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_contexts * num_actions || probs.is_empty() {
            return Err(Error::model(
                "expert",
                format!(
                    "expected {} entries, got {}",
                    num_states * num_contexts * num_actions,
                    probs.len()
                ),
            ));
        }
        let expert = Self {
            num_states,
            num_actions,
            num_contexts,
            probs,
        };
        for s in 0..num_states {
            for c in 0..num_contexts {
                check_simplex(expert.probs(s, c)).map_err(|m| Error::model(format!("expert[{s}][{c}]"), m))?;
            }
        }
        Ok(expert)
    }

    pub fn from_fn(
        num_states: usize,
        num_contexts: usize,
        num_actions: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let mut probs = Vec::with_capacity(num_states * num_contexts * num_actions);
        for s in 0..num_states {
            for c in 0..num_contexts {
                let row = f(s, c);
                if row.len() != num_actions {
                    return Err(Error::model(format!("expert[{s}][{c}]"), "wrong row length"));
                }
                probs.extend(row);
            }
        }
        Self::new(num_states, num_contexts, num_actions, probs)
    }

    pub fn random(cmdp: &TabularCmdp, stream: &mut RandomStream) -> Self {
        Self::from_fn(cmdp.num_states(), cmdp.num_contexts(), cmdp.num_actions(), |_, _| {
            random_simplex(cmdp.num_actions(), stream)
        })
        .expect("random expert is valid by construction")
    }

    #[inline]
    pub fn probs(&self, state: usize, context: usize) -> &[f64] {
        let start = (state * self.num_contexts + context) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    pub fn check_compatible(&self, cmdp: &TabularCmdp) -> Result<()> {
        if self.num_states != cmdp.num_states()
            || self.num_actions != cmdp.num_actions()
            || self.num_contexts != cmdp.num_contexts()
        {
            return Err(Error::InvalidParams(
                "expert dimensions do not match the CMDP".into(),
            ));
        }
        Ok(())
    }
}

/// The expert run with a fixed, known context, viewed as a history policy.
/// On a single-context CMDP this is the expert itself.
#[derive(Debug, Clone, Copy)]
pub struct FixedContextExpert<'a> {
    pub expert: &'a ExpertPolicy,
    pub context: usize,
}

impl Policy for FixedContextExpert<'_> {
    fn num_actions(&self) -> usize {
        self.expert.num_actions()
    }
    fn action_probs(&self, history: &History) -> Vec<f64> {
        self.expert.probs(history.last_state(), self.context).to_vec()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub num_actions: usize,
}

impl Policy for UniformPolicy {
    fn num_actions(&self) -> usize {
        self.num_actions
    }
    fn action_probs(&self, _history: &History) -> Vec<f64> {
        vec![1.0 / self.num_actions as f64; self.num_actions]
    }
}

/// Arbitrary history policy whose action distribution at each history is a
/// Dirichlet(1) draw keyed by `(seed, history)`.
#[derive(Debug, Clone, Copy)]
pub struct HashedRandomPolicy {
    pub seed: u64,
    pub num_actions: usize,
}

impl Policy for HashedRandomPolicy {
    fn num_actions(&self) -> usize {
        self.num_actions
    }
    fn action_probs(&self, history: &History) -> Vec<f64> {
        let mut stream = RandomStream::new(self.seed, &history.as_path());
        random_simplex(self.num_actions, &mut stream)
    }
}

/// Sample one episode of length `cmdp.horizon()`.
///
/// Draw order on `stream`: context (if not given), first state, then per step
/// the action and the next state.
pub fn rollout(
    cmdp: &TabularCmdp,
    policy: &dyn Policy,
    context: Option<usize>,
    stream: &mut RandomStream,
) -> Trajectory {
    let context = context.unwrap_or_else(|| stream.categorical(cmdp.context_prior()));
    let first = stream.categorical(cmdp.initial_state_dist());
    let mut cursor = cursor_for(policy, first);
    run_episode(cmdp, context, first, stream, &mut LearnerActor(cursor.as_mut()))
}

/// Sample one expert episode (the expert sees the context).
pub fn rollout_expert(
    cmdp: &TabularCmdp,
    expert: &ExpertPolicy,
    context: Option<usize>,
    stream: &mut RandomStream,
) -> Trajectory {
    let context = context.unwrap_or_else(|| stream.categorical(cmdp.context_prior()));
    let first = stream.categorical(cmdp.initial_state_dist());
    run_episode(cmdp, context, first, stream, &mut ExpertActor(expert))
}

trait Actor {
    fn probs(&mut self, state: usize, context: usize) -> Vec<f64>;
    fn record(&mut self, _action: usize, _next_state: usize) {}
}

struct LearnerActor<'a, 'b>(&'a mut (dyn PolicyCursor + 'b));

impl Actor for LearnerActor<'_, '_> {
    fn probs(&mut self, _state: usize, _context: usize) -> Vec<f64> {
        self.0.action_probs()
    }
    fn record(&mut self, action: usize, next_state: usize) {
        self.0.record(action, next_state);
    }
}

struct ExpertActor<'a>(&'a ExpertPolicy);

impl Actor for ExpertActor<'_> {
    fn probs(&mut self, state: usize, context: usize) -> Vec<f64> {
        self.0.probs(state, context).to_vec()
    }
}

fn run_episode(
    cmdp: &TabularCmdp,
    context: usize,
    first: usize,
    stream: &mut RandomStream,
    actor: &mut dyn Actor,
) -> Trajectory {
    let horizon = cmdp.horizon();
    let mut history = History::new(first);
    let mut rewards = Vec::with_capacity(horizon);
    let mut executed = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let s = history.last_state();
        let a = stream.categorical(&actor.probs(s, context));
        rewards.push(cmdp.reward(s, a, context));
        executed.push(a);
        if t < horizon {
            let next = stream.categorical(cmdp.transition(s, a, context));
            actor.record(a, next);
            history.push(a, next);
        }
    }
    Trajectory {
        context,
        history,
        rewards,
        executed_actions: executed,
    }
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            samples: n,
        }
    }
}

/// Monte-Carlo estimate of `J(π)`; episode `i` uses `stream.child(i)`.
pub fn estimate_return(
    cmdp: &TabularCmdp,
    policy: &dyn Policy,
    episodes: usize,
    stream: &RandomStream,
) -> Estimate {
    let xs: Vec<f64> = (0..episodes)
        .into_par_iter()
        .map(|i| rollout(cmdp, policy, None, &mut stream.child(i as u64)).total_reward())
        .collect();
    Estimate::from_samples(&xs)
}

pub fn estimate_return_expert(
    cmdp: &TabularCmdp,
    expert: &ExpertPolicy,
    episodes: usize,
    stream: &RandomStream,
) -> Estimate {
    let xs: Vec<f64> = (0..episodes)
        .into_par_iter()
        .map(|i| rollout_expert(cmdp, expert, None, &mut stream.child(i as u64)).total_reward())
        .collect();
    Estimate::from_samples(&xs)
}

/// Monte-Carlo AIG estimate; expert and learner use independent child streams.
pub fn estimate_aig(
    cmdp: &TabularCmdp,
    expert: &ExpertPolicy,
    policy: &dyn Policy,
    episodes: usize,
    stream: &RandomStream,
) -> Estimate {
    let e = estimate_return_expert(cmdp, expert, episodes, &stream.child(0));
    let l = estimate_return(cmdp, policy, episodes, &stream.child(1));
    let horizon = cmdp.horizon() as f64;
    Estimate {
        mean: (e.mean - l.mean) / horizon,
        std_error: (e.std_error.powi(2) + l.std_error.powi(2)).sqrt() / horizon,
        samples: episodes,
    }
}

/// A node `h_t` of the history tree with the joint mass `p(c, h_t)` under
/// each tracked measure.
pub struct HistoryNode<'a> {
    pub history: &'a History,
    /// `p(c, h_t; π)` per context; empty when no learner is tracked.
    pub learner_joint: &'a [f64],
    /// `p(c, h_t; π^E)` per context; empty when no expert is tracked.
    pub expert_joint: &'a [f64],
    /// `π(· | h_t)`; empty when no learner is tracked.
    pub learner_probs: &'a [f64],
}

impl HistoryNode<'_> {
    pub fn t(&self) -> usize {
        self.history.len()
    }
    pub fn state(&self) -> usize {
        self.history.last_state()
    }
}

/// Depth-first expansion of all histories up to a horizon, carrying the
/// learner measure and/or the expert measure at the same time.
pub struct Enumeration<'a> {
    cmdp: &'a TabularCmdp,
    learner: Option<&'a dyn Policy>,
    expert: Option<&'a ExpertPolicy>,
    horizon: usize,
    budget: usize,
}

impl<'a> Enumeration<'a> {
    pub fn new(cmdp: &'a TabularCmdp) -> Self {
        Self {
            cmdp,
            learner: None,
            expert: None,
            horizon: cmdp.horizon(),
            budget: DEFAULT_BUDGET,
        }
    }

    pub fn learner(mut self, policy: &'a dyn Policy) -> Self {
        self.learner = Some(policy);
        self
    }

    pub fn expert(mut self, expert: &'a ExpertPolicy) -> Self {
        self.expert = Some(expert);
        self
    }

    pub fn horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn budget(mut self, budget: usize) -> Self {
        self.budget = budget;
        self
    }

    /// Visit every node with non-negligible mass. Returns the node count.
    pub fn for_each(&self, mut visit: impl FnMut(&HistoryNode<'_>)) -> Result<usize> {
        let nc = self.cmdp.num_contexts();
        let mut visited = 0;
        for s1 in 0..self.cmdp.num_states() {
            let p1 = self.cmdp.initial_state_dist()[s1];
            if p1 <= 0.0 {
                continue;
            }
            let base: Vec<f64> = self.cmdp.context_prior().iter().map(|pc| pc * p1).collect();
            let lj = if self.learner.is_some() { base.clone() } else { Vec::new() };
            let ej = if self.expert.is_some() { base } else { Vec::new() };
            debug_assert_eq!(nc, self.cmdp.context_prior().len());
            let mut history = History::new(s1);
            self.expand(&mut history, &lj, &ej, &mut visited, &mut visit)?;
        }
        Ok(visited)
    }

    fn expand(
        &self,
        history: &mut History,
        lj: &[f64],
        ej: &[f64],
        visited: &mut usize,
        visit: &mut impl FnMut(&HistoryNode<'_>),
    ) -> Result<()> {
        *visited += 1;
        if *visited > self.budget {
            return Err(Error::BudgetExceeded { budget: self.budget });
        }
        let probs = self
            .learner
            .map(|p| p.action_probs(history))
            .unwrap_or_default();
        visit(&HistoryNode {
            history,
            learner_joint: lj,
            expert_joint: ej,
            learner_probs: &probs,
        });
        if history.len() >= self.horizon {
            return Ok(());
        }
        let s = history.last_state();
        let cmdp = self.cmdp;
        let nc = cmdp.num_contexts();
        let mut child_l = vec![0.0; lj.len()];
        let mut child_e = vec![0.0; ej.len()];
        for a in 0..cmdp.num_actions() {
            let pa = probs.get(a).copied().unwrap_or(0.0);
            for s2 in 0..cmdp.num_states() {
                let mut keep = false;
                for c in 0..nc {
                    let ps = cmdp.transition(s, a, c)[s2];
                    if !lj.is_empty() {
                        child_l[c] = lj[c] * pa * ps;
                        keep |= child_l[c] >= PRUNE_BELOW;
                    }
                    if let Some(expert) = self.expert {
                        child_e[c] = ej[c] * expert.probs(s, c)[a] * ps;
                        keep |= child_e[c] >= PRUNE_BELOW;
                    }
                }
                if keep {
                    history.push(a, s2);
                    let (l, e) = (child_l.clone(), child_e.clone());
                    self.expand(history, &l, &e, visited, visit)?;
                    history.pop();
                }
            }
        }
        Ok(())
    }
}

/// Exact `J(π)` by enumeration of the learner's trajectory measure.
pub fn expected_return(cmdp: &TabularCmdp, policy: &dyn Policy) -> Result<f64> {
    expected_return_to(cmdp, policy, cmdp.horizon())
}

/// Exact `J(π)` truncated to the first `horizon` steps.
pub fn expected_return_to(cmdp: &TabularCmdp, policy: &dyn Policy, horizon: usize) -> Result<f64> {
    let mut total = 0.0;
    Enumeration::new(cmdp)
        .learner(policy)
        .horizon(horizon)
        .for_each(|node| {
            let s = node.state();
            for (c, &w) in node.learner_joint.iter().enumerate() {
                for (a, &pa) in node.learner_probs.iter().enumerate() {
                    total += w * pa * cmdp.reward(s, a, c);
                }
            }
        })?;
    Ok(total)
}

/// Exact `J(π^E)` by enumeration of the expert's trajectory measure.
pub fn expected_return_expert(cmdp: &TabularCmdp, expert: &ExpertPolicy) -> Result<f64> {
    expected_return_expert_to(cmdp, expert, cmdp.horizon())
}

pub fn expected_return_expert_to(cmdp: &TabularCmdp, expert: &ExpertPolicy, horizon: usize) -> Result<f64> {
    let mut total = 0.0;
    Enumeration::new(cmdp)
        .expert(expert)
        .horizon(horizon)
        .for_each(|node| {
            let s = node.state();
            for (c, &w) in node.expert_joint.iter().enumerate() {
                for (a, &pa) in expert.probs(s, c).iter().enumerate() {
                    total += w * pa * cmdp.reward(s, a, c);
                }
            }
        })?;
    Ok(total)
}

/// Average imitation gap `(J(π^E) - J(π)) / T` with both returns truncated
/// to `horizon` steps.
pub fn aig(cmdp: &TabularCmdp, expert: &ExpertPolicy, policy: &dyn Policy, horizon: usize) -> Result<f64> {
    if horizon == 0 || horizon > cmdp.horizon() {
        return Err(Error::InvalidParams(format!(
            "AIG horizon {horizon} must be in 1..={}",
            cmdp.horizon()
        )));
    }
    let je = expected_return_expert_to(cmdp, expert, horizon)?;
    let jl = expected_return_to(cmdp, policy, horizon)?;
    Ok((je - jl) / horizon as f64)
}

/// Exact finite-horizon values of a history policy, per context.
#[derive(Debug, Clone, Default)]
pub struct ValueTables {
    num_contexts: usize,
    num_actions: usize,
    /// `V(h, c)` laid out `[c]`.
    pub values: HashMap<History, Vec<f64>>,
    /// `Q(h, a, c)` laid out `[c][a]`.
    pub q_values: HashMap<History, Vec<f64>>,
}

impl ValueTables {
    pub fn value(&self, history: &History, context: usize) -> Option<f64> {
        self.values.get(history).map(|v| v[context])
    }

    pub fn q(&self, history: &History, action: usize, context: usize) -> Option<f64> {
        self.q_values
            .get(history)
            .map(|q| q[context * self.num_actions + action])
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }
}

/// Backward induction of `V^π(h, c)` and `Q^π(h, a, c)` over every history
/// reachable under some action sequence. Rewards depend on the context, which
/// stays fixed for the episode.
pub fn q_and_value(cmdp: &TabularCmdp, policy: &dyn Policy) -> Result<ValueTables> {
    q_and_value_with_budget(cmdp, policy, DEFAULT_BUDGET)
}

pub fn q_and_value_with_budget(cmdp: &TabularCmdp, policy: &dyn Policy, budget: usize) -> Result<ValueTables> {
    let mut tables = ValueTables {
        num_contexts: cmdp.num_contexts(),
        num_actions: cmdp.num_actions(),
        ..Default::default()
    };
    let mut visited = 0;
    for s1 in 0..cmdp.num_states() {
        if cmdp.initial_state_dist()[s1] > 0.0 {
            let mut h = History::new(s1);
            backward(cmdp, policy, &mut h, &mut tables, &mut visited, budget)?;
        }
    }
    Ok(tables)
}

fn backward(
    cmdp: &TabularCmdp,
    policy: &dyn Policy,
    history: &mut History,
    tables: &mut ValueTables,
    visited: &mut usize,
    budget: usize,
) -> Result<Vec<f64>> {
    *visited += 1;
    if *visited > budget {
        return Err(Error::BudgetExceeded { budget });
    }
    let (na, nc) = (cmdp.num_actions(), cmdp.num_contexts());
    let s = history.last_state();
    let mut q = vec![0.0; nc * na];
    for a in 0..na {
        for c in 0..nc {
            q[c * na + a] = cmdp.reward(s, a, c);
        }
        if history.len() < cmdp.horizon() {
            for s2 in 0..cmdp.num_states() {
                if (0..nc).all(|c| cmdp.transition(s, a, c)[s2] == 0.0) {
                    continue;
                }
                history.push(a, s2);
                let v_next = backward(cmdp, policy, history, tables, visited, budget)?;
                history.pop();
                for c in 0..nc {
                    q[c * na + a] += cmdp.transition(s, a, c)[s2] * v_next[c];
                }
            }
        }
    }
    let pi = policy.action_probs(history);
    let v: Vec<f64> = (0..nc)
        .map(|c| (0..na).map(|a| pi[a] * q[c * na + a]).sum())
        .collect();
    tables.values.insert(history.clone(), v.clone());
    tables.q_values.insert(history.clone(), q);
    Ok(v)
}

/// Time-indexed expert Q-function `Q^E_t(s, a, c)`, laid out
/// `[t-1][(s * A + a) * C + c]`. Markov in `(t, s, c)` because the expert
/// sees the context.
pub fn expert_q_table(cmdp: &TabularCmdp, expert: &ExpertPolicy, horizon: usize) -> Vec<Vec<f64>> {
    let (ns, na, nc) = (cmdp.num_states(), cmdp.num_actions(), cmdp.num_contexts());
    let mut tables = vec![vec![0.0; ns * na * nc]; horizon];
    let mut v_next = vec![0.0; ns * nc];
    for t in (1..=horizon).rev() {
        let q = &mut tables[t - 1];
        for s in 0..ns {
            for a in 0..na {
                for c in 0..nc {
                    let mut val = cmdp.reward(s, a, c);
                    if t < horizon {
                        val += cmdp
                            .transition(s, a, c)
                            .iter()
                            .enumerate()
                            .map(|(s2, p)| p * v_next[s2 * nc + c])
                            .sum::<f64>();
                    }
                    q[(s * na + a) * nc + c] = val;
                }
            }
        }
        let mut v = vec![0.0; ns * nc];
        for s in 0..ns {
            for c in 0..nc {
                v[s * nc + c] = expert
                    .probs(s, c)
                    .iter()
                    .enumerate()
                    .map(|(a, p)| p * q[(s * na + a) * nc + c])
                    .sum();
            }
        }
        v_next = v;
    }
    tables
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_chain(r: f64, horizon: usize) -> TabularCmdp {
        TabularCmdp::new(1, 1, 1, horizon, vec![1.0], vec![1.0], vec![1.0], vec![r]).unwrap()
    }

    #[test]
    fn deterministic_chain_rollout() {
        let m = single_chain(0.5, 3);
        let pol = UniformPolicy { num_actions: 1 };
        let traj = rollout(&m, &pol, None, &mut RandomStream::new(1, &[]));
        assert_eq!(traj.rewards, vec![0.5, 0.5, 0.5]);
        assert_eq!(traj.history.states(), &[0, 0, 0]);
        assert_eq!(traj.history.actions(), &[0, 0]);
        assert_eq!(traj.executed_actions, vec![0, 0, 0]);
        assert_eq!(expected_return(&m, &pol).unwrap(), 1.5);
    }

    #[test]
    fn rollout_is_deterministic() {
        let m = TabularCmdp::random(3, 2, 2, 6, &mut RandomStream::new(5, &[]));
        let pol = HashedRandomPolicy { seed: 3, num_actions: 2 };
        let a = rollout(&m, &pol, None, &mut RandomStream::new(9, &[1, 2]));
        let b = rollout(&m, &pol, None, &mut RandomStream::new(9, &[1, 2]));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_rewards_give_zero_return_and_values() {
        let mut m = TabularCmdp::random(2, 2, 2, 3, &mut RandomStream::new(1, &[]));
        m.reward.iter_mut().for_each(|r| *r = 0.0);
        let pol = UniformPolicy { num_actions: 2 };
        assert_eq!(expected_return(&m, &pol).unwrap(), 0.0);
        let tables = q_and_value(&m, &pol).unwrap();
        assert!(tables.values.values().flatten().all(|v| *v == 0.0));
        assert!(tables.q_values.values().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn horizon_one_q_is_reward() {
        let m = TabularCmdp::random(3, 2, 2, 1, &mut RandomStream::new(2, &[]));
        let pol = HashedRandomPolicy { seed: 1, num_actions: 2 };
        let tables = q_and_value(&m, &pol).unwrap();
        for s in 0..3 {
            let h = History::new(s);
            for a in 0..2 {
                for c in 0..2 {
                    assert_eq!(tables.q(&h, a, c).unwrap(), m.reward(s, a, c));
                }
            }
        }
    }

    #[test]
    fn self_gap_is_zero_without_context() {
        let base = TabularCmdp::random(3, 3, 1, 4, &mut RandomStream::new(3, &[]));
        let expert = ExpertPolicy::random(&base, &mut RandomStream::new(4, &[]));
        let wrapped = FixedContextExpert { expert: &expert, context: 0 };
        let gap = aig(&base, &expert, &wrapped, 4).unwrap();
        assert!(gap.abs() < 1e-12, "{gap}");
    }

    #[test]
    fn measures_sum_to_one() {
        let m = TabularCmdp::random(3, 2, 3, 4, &mut RandomStream::new(8, &[]));
        let expert = ExpertPolicy::random(&m, &mut RandomStream::new(9, &[]));
        let pol = HashedRandomPolicy { seed: 2, num_actions: 2 };
        let mut mass_l = vec![0.0; 5];
        let mut mass_e = vec![0.0; 5];
        Enumeration::new(&m)
            .learner(&pol)
            .expert(&expert)
            .for_each(|n| {
                mass_l[n.t()] += n.learner_joint.iter().sum::<f64>();
                mass_e[n.t()] += n.expert_joint.iter().sum::<f64>();
            })
            .unwrap();
        for t in 1..=4 {
            assert!((mass_l[t] - 1.0).abs() < 1e-8);
            assert!((mass_e[t] - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn budget_is_enforced() {
        let m = TabularCmdp::random(3, 3, 2, 8, &mut RandomStream::new(1, &[]));
        let pol = UniformPolicy { num_actions: 3 };
        let err = Enumeration::new(&m)
            .learner(&pol)
            .budget(100)
            .for_each(|_| {})
            .unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { budget: 100 }));
        assert!(err.to_string().contains("Monte-Carlo"));
    }

    #[test]
    fn json_round_trip_and_line_errors() {
        let m = TabularCmdp::random(2, 2, 2, 3, &mut RandomStream::new(1, &[]));
        let text = m.to_json_string();
        let back = TabularCmdp::from_json_str(&text).unwrap();
        assert_eq!(back.num_states(), 2);
        for s in 0..2 {
            for a in 0..2 {
                for c in 0..2 {
                    assert_eq!(back.reward(s, a, c), m.reward(s, a, c));
                    assert_eq!(back.transition(s, a, c), m.transition(s, a, c));
                }
            }
        }

        let bad = r#"{
  "num_states": 1,
  "num_actions": 1,
  "num_contexts": 1,
  "horizon": 2,
  "context_prior": [1.0],
  "initial_state_dist": [1.0],
  "transition": [[[[0.7]]]],
  "reward": [[[0.0]]]
}"#;
        let err = TabularCmdp::from_json_str(bad).unwrap_err().to_string();
        assert!(err.contains("line 8"), "{err}");

        let bad_shape = bad.replace("[[[[0.7]]]]", "[[[[1.0]], [[1.0]]]]");
        let err = TabularCmdp::from_json_str(&bad_shape).unwrap_err().to_string();
        assert!(err.contains("transition[0]") && err.contains("line 8"), "{err}");

        let bad_reward = bad.replace("[[[[0.7]]]]", "[[[[1.0]]]]").replace("[[[0.0]]]", "[[[1.5]]]");
        let err = TabularCmdp::from_json_str(&bad_reward).unwrap_err().to_string();
        assert!(err.contains("line 9"), "{err}");

        let unknown = bad.replace("\"horizon\"", "\"horizn\"");
        assert!(TabularCmdp::from_json_str(&unknown).is_err());
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(TabularCmdp::new(0, 1, 1, 1, vec![1.0], vec![], vec![], vec![]).is_err());
        assert!(TabularCmdp::new(1, 1, 1, 1, vec![1.0], vec![1.0], vec![1.0], vec![2.0]).is_err());
        assert!(TabularCmdp::new(1, 1, 1, 1, vec![0.5], vec![1.0], vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn history_prefix_and_path() {
        let mut h = History::new(2);
        h.push(1, 0);
        h.push(0, 1);
        assert_eq!(h.len(), 3);
        assert_eq!(h.prefix(2).states(), &[2, 0]);
        assert_eq!(h.as_path(), vec![2, 1, 0, 0, 1]);
        assert!(History::from_parts(vec![0, 1], vec![]).is_err());
    }
}
