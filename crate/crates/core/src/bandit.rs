//! The K-armed causal bandit with a hidden correct arm, noisy binary feedback,
//! an expert that errs with probability `eps_exp`, and learner-side
//! exploration noise of the same rate.

use serde::{Deserialize, Serialize};

use crate::cmdp::{ExpertPolicy, History, Policy, TabularCmdp};
use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Observation state at the start of an episode in the CMDP encoding.
pub const START_STATE: usize = 0;
/// Observation state after a `+` feedback.
pub const PLUS_STATE: usize = 1;
/// Observation state after a `-` feedback.
pub const MINUS_STATE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditParams {
    #[serde(rename = "K")]
    pub num_arms: usize,
    pub eps_obs: f64,
    pub eps_exp: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
}

impl BanditParams {
    pub fn new(num_arms: usize, eps_obs: f64, eps_exp: f64, horizon: usize) -> Result<Self> {
        let p = Self {
            num_arms,
            eps_obs,
            eps_exp,
            horizon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_arms == 1 && self.eps_exp > 0.0 {
            return Err(Error::InvalidParams(
                "K = 1 with eps_exp > 0: there is no other arm to err towards".into(),
            ));
        }
        if self.num_arms < 2 {
            return Err(Error::InvalidParams(format!("K = {} must be at least 2", self.num_arms)));
        }
        for (name, v) in [("eps_obs", self.eps_obs), ("eps_exp", self.eps_exp)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParams(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParams("T must be at least 1".into()));
        }
        Ok(())
    }

    fn check_arm(&self, arm: usize) {
        assert!(arm < self.num_arms, "arm {arm} out of range for K = {}", self.num_arms);
    }

    /// Expert action distribution given the correct arm: `1 - eps_exp` on it,
    /// the rest spread evenly over the other arms.
    pub fn expert_action_dist(&self, context: usize) -> Vec<f64> {
        self.check_arm(context);
        let k = self.num_arms;
        let other = self.eps_exp / (k - 1) as f64;
        (0..k)
            .map(|a| if a == context { 1.0 - self.eps_exp } else { other })
            .collect()
    }

    /// Probability of the expert (or any noised learner) pulling `arm` when
    /// the correct arm is `context`.
    #[inline]
    pub fn expert_action_prob(&self, arm: usize, context: usize) -> f64 {
        if arm == context {
            1.0 - self.eps_exp
        } else {
            self.eps_exp / (self.num_arms - 1) as f64
        }
    }

    /// `P(obs | arm, context)`.
    #[inline]
    pub fn feedback_likelihood(&self, obs: Feedback, arm: usize, context: usize) -> f64 {
        let p_plus = if arm == context { 1.0 - self.eps_obs } else { self.eps_obs };
        match obs {
            Feedback::Plus => p_plus,
            Feedback::Minus => 1.0 - p_plus,
        }
    }

    /// Replace the intended arm by a uniformly drawn other arm with
    /// probability `eps_exp`. Always consumes two draws so paired runs stay
    /// aligned.
    pub fn apply_exploration_noise(&self, intended: usize, stream: &mut RandomStream) -> usize {
        self.check_arm(intended);
        let flip = stream.uniform() < self.eps_exp;
        let other = stream.below(self.num_arms - 1);
        if flip {
            if other >= intended {
                other + 1
            } else {
                other
            }
        } else {
            intended
        }
    }

    /// One environment step: noise the intended pull, then draw feedback for
    /// the executed arm. Consumes exactly three draws.
    pub fn step(&self, context: usize, intended: usize, stream: &mut RandomStream) -> (usize, Feedback) {
        self.check_arm(context);
        let executed = self.apply_exploration_noise(intended, stream);
        let plus = stream.uniform() < self.feedback_likelihood(Feedback::Plus, executed, context);
        let fb = if plus { Feedback::Plus } else { Feedback::Minus };
        (executed, fb)
    }

    /// The bandit as a tabular CMDP: one physical state, with the last
    /// feedback carried as the observed state (`START`, `+`, `-`).
    pub fn as_cmdp(&self) -> TabularCmdp {
        let k = self.num_arms;
        let ns = 3;
        let mut transition = Vec::with_capacity(ns * k * k * ns);
        let mut reward = Vec::with_capacity(ns * k * k);
        for _s in 0..ns {
            for a in 0..k {
                for c in 0..k {
                    let p_plus = self.feedback_likelihood(Feedback::Plus, a, c);
                    transition.extend([0.0, p_plus, 1.0 - p_plus]);
                    reward.push(if a == c { 1.0 } else { 0.0 });
                }
            }
        }
        TabularCmdp::new(
            ns,
            k,
            k,
            self.horizon,
            vec![1.0 / k as f64; k],
            vec![1.0, 0.0, 0.0],
            transition,
            reward,
        )
        .expect("bandit encoding is valid")
    }

    /// The expert in the CMDP encoding (state-independent).
    pub fn expert_policy(&self) -> ExpertPolicy {
        ExpertPolicy::from_fn(3, self.num_arms, self.num_arms, |_, c| self.expert_action_dist(c))
            .expect("expert rows are valid")
    }

    /// Executed-action distribution after exploration noise is applied to an
    /// intended distribution.
    pub fn noised(&self, intended: &[f64]) -> Vec<f64> {
        let spread = self.eps_exp / (self.num_arms - 1) as f64;
        intended
            .iter()
            .map(|p| (1.0 - self.eps_exp) * p + spread * (1.0 - p))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Feedback {
    Plus,
    Minus,
}

impl Feedback {
    pub fn state(self) -> usize {
        match self {
            Feedback::Plus => PLUS_STATE,
            Feedback::Minus => MINUS_STATE,
        }
    }

    pub fn from_state(state: usize) -> Option<Self> {
        match state {
            PLUS_STATE => Some(Feedback::Plus),
            MINUS_STATE => Some(Feedback::Minus),
            _ => None,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Feedback::Plus => '+',
            Feedback::Minus => '-',
        }
    }
}

/// Executed pulls and the feedback each one produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BanditHistory {
    pulls: Vec<usize>,
    feedback: Vec<Feedback>,
}

impl BanditHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, Feedback)>) -> Self {
        let (pulls, feedback) = pairs.into_iter().unzip();
        Self { pulls, feedback }
    }

    pub fn push(&mut self, arm: usize, fb: Feedback) {
        self.pulls.push(arm);
        self.feedback.push(fb);
    }

    pub fn len(&self) -> usize {
        self.pulls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pulls.is_empty()
    }

    pub fn pulls(&self) -> &[usize] {
        &self.pulls
    }

    pub fn feedback(&self) -> &[Feedback] {
        &self.feedback
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, Feedback)> + '_ {
        self.pulls.iter().copied().zip(self.feedback.iter().copied())
    }

    /// The same record as a CMDP history starting in `START_STATE`.
    pub fn to_history(&self) -> History {
        let mut h = History::new(START_STATE);
        for (a, fb) in self.iter() {
            h.push(a, fb.state());
        }
        h
    }

    /// Inverse of [`BanditHistory::to_history`]; `None` if a state is not a
    /// feedback state.
    pub fn from_history(history: &History) -> Option<Self> {
        let mut out = Self::new();
        for (a, &s) in history.actions().iter().zip(&history.states()[1..]) {
            out.push(*a, Feedback::from_state(s)?);
        }
        Some(out)
    }
}

/// A history policy with the bandit's exploration noise folded into its
/// action distribution.
pub struct NoisyPolicy<'a> {
    pub params: BanditParams,
    pub inner: &'a dyn Policy,
}

impl Policy for NoisyPolicy<'_> {
    fn num_actions(&self) -> usize {
        self.params.num_arms
    }
    fn action_probs(&self, history: &History) -> Vec<f64> {
        self.params.noised(&self.inner.action_probs(history))
    }
}
