//! Exact Bayesian posteriors over the hidden context.
//!
//! The off-policy filter treats every recorded action as if the expert had
//! chosen it and so multiplies in `π^E(a | c, s)`; the on-policy filter only
//! uses the transition (feedback) likelihood. Mixing the expert's action
//! distributions under either posterior gives the behavioral-cloning and
//! DAgger learners respectively.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bandit::{BanditHistory, BanditParams, Feedback};
use crate::cmdp::{ExpertPolicy, History, Policy, PolicyCursor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterMode {
    #[serde(rename = "off")]
    OffPolicy,
    #[serde(rename = "on")]
    OnPolicy,
}

impl FilterMode {
    pub const BOTH: [FilterMode; 2] = [FilterMode::OnPolicy, FilterMode::OffPolicy];

    pub fn short_name(self) -> &'static str {
        match self {
            FilterMode::OffPolicy => "off",
            FilterMode::OnPolicy => "on",
        }
    }

    /// Stable index used in stream paths.
    pub fn index(self) -> u64 {
        match self {
            FilterMode::OnPolicy => 0,
            FilterMode::OffPolicy => 1,
        }
    }
}

/// Unnormalized log posterior over contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    log_weights: Vec<f64>,
    resets: usize,
}

impl Posterior {
    pub fn uniform(num_contexts: usize) -> Self {
        Self {
            log_weights: vec![0.0; num_contexts],
            resets: 0,
        }
    }

    pub fn from_prior(prior: &[f64]) -> Self {
        Self {
            log_weights: prior.iter().map(|p| p.ln()).collect(),
            resets: 0,
        }
    }

    pub fn num_contexts(&self) -> usize {
        self.log_weights.len()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// How many times the posterior collapsed to zero mass and was reset to
    /// uniform.
    pub fn resets(&self) -> usize {
        self.resets
    }

    pub fn is_flagged(&self) -> bool {
        self.resets > 0
    }

    /// Multiply in one step of evidence. `expert_likelihoods` is ignored in
    /// on-policy mode. Returns `true` if the update left no mass anywhere and
    /// the posterior was reset to uniform.
    pub fn update(&mut self, mode: FilterMode, transition_likelihoods: &[f64], expert_likelihoods: &[f64]) -> bool {
        debug_assert_eq!(transition_likelihoods.len(), self.log_weights.len());
        for (c, w) in self.log_weights.iter_mut().enumerate() {
            *w += transition_likelihoods[c].ln();
            if mode == FilterMode::OffPolicy {
                *w += expert_likelihoods[c].ln();
            }
        }
        self.check_degenerate()
    }

    /// Same as [`Posterior::update`] with log-likelihoods supplied directly.
    #[inline]
    pub fn update_log(&mut self, log_likelihoods: impl Iterator<Item = f64>) -> bool {
        for (w, l) in self.log_weights.iter_mut().zip(log_likelihoods) {
            *w += l;
        }
        self.check_degenerate()
    }

    fn check_degenerate(&mut self) -> bool {
        if self.log_weights.iter().all(|w| *w == f64::NEG_INFINITY || w.is_nan()) {
            self.log_weights.iter_mut().for_each(|w| *w = 0.0);
            self.resets += 1;
            true
        } else {
            false
        }
    }

    /// Normalized probabilities via max-shifted exponentiation.
    pub fn normalized(&self) -> Vec<f64> {
        let max = self
            .log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.log_weights.iter().map(|w| (w - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.log_weights)
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Functional form of [`Posterior::update`].
pub fn posterior_update(
    post: &Posterior,
    mode: FilterMode,
    transition_likelihoods: &[f64],
    expert_likelihoods: &[f64],
) -> Posterior {
    let mut next = post.clone();
    next.update(mode, transition_likelihoods, expert_likelihoods);
    next
}

/// `Σ_c p(c | h) π^E(· | c, s)`.
pub fn mixture_policy(post: &Posterior, expert: &ExpertPolicy, state: usize) -> Vec<f64> {
    let weights = post.normalized();
    let mut out = vec![0.0; expert.num_actions()];
    for (c, w) in weights.iter().enumerate() {
        for (o, p) in out.iter_mut().zip(expert.probs(state, c)) {
            *o += w * p;
        }
    }
    out
}

/// Behavioral-cloning learner: expert mixture under the off-policy posterior.
pub fn bc_policy(post: &Posterior, expert: &ExpertPolicy, state: usize) -> Vec<f64> {
    mixture_policy(post, expert, state)
}

/// DAgger learner: expert mixture under the on-policy posterior.
pub fn dagger_policy(post: &Posterior, expert: &ExpertPolicy, state: usize) -> Vec<f64> {
    mixture_policy(post, expert, state)
}

/// Posterior of a general CMDP history, from scratch. The off-policy variant
/// scores each recorded action under the expert at the state it was taken in.
pub fn cmdp_posterior(
    cmdp: &crate::cmdp::TabularCmdp,
    expert: &ExpertPolicy,
    mode: FilterMode,
    history: &History,
) -> Posterior {
    let nc = cmdp.num_contexts();
    let mut post = Posterior::from_prior(cmdp.context_prior());
    let states = history.states();
    for (i, &a) in history.actions().iter().enumerate() {
        let (s, s2) = (states[i], states[i + 1]);
        let tl: Vec<f64> = (0..nc).map(|c| cmdp.transition(s, a, c)[s2]).collect();
        let el: Vec<f64> = (0..nc).map(|c| expert.probs(s, c)[a]).collect();
        post.update(mode, &tl, &el);
    }
    post
}

/// Incremental bandit filter with precomputed log-likelihoods.
#[derive(Debug, Clone)]
pub struct BanditFilter {
    params: BanditParams,
    mode: FilterMode,
    posterior: Posterior,
    // log P(+ | arm == c), log P(+ | arm != c), and the minus counterparts
    log_plus_hit: f64,
    log_plus_miss: f64,
    log_minus_hit: f64,
    log_minus_miss: f64,
    log_expert_hit: f64,
    log_expert_miss: f64,
    #[cfg(debug_assertions)]
    record: BanditHistory,
}

/// Steps between from-scratch audits of the incremental posterior (debug builds).
pub const AUDIT_INTERVAL: usize = 256;

impl BanditFilter {
    /// Starts from the uniform prior over the correct arm.
    pub fn new(params: BanditParams, mode: FilterMode) -> Self {
        let k = params.num_arms;
        Self {
            params,
            mode,
            posterior: Posterior::uniform(k),
            log_plus_hit: (1.0 - params.eps_obs).ln(),
            log_plus_miss: params.eps_obs.ln(),
            log_minus_hit: params.eps_obs.ln(),
            log_minus_miss: (1.0 - params.eps_obs).ln(),
            log_expert_hit: (1.0 - params.eps_exp).ln(),
            log_expert_miss: (params.eps_exp / (k - 1) as f64).ln(),
            #[cfg(debug_assertions)]
            record: BanditHistory::new(),
        }
    }

    pub fn from_history(params: BanditParams, mode: FilterMode, history: &BanditHistory) -> Self {
        let mut f = Self::new(params, mode);
        for (a, fb) in history.iter() {
            f.observe(a, fb);
        }
        f
    }

    pub fn mode(&self) -> FilterMode {
        self.mode
    }

    pub fn posterior(&self) -> &Posterior {
        &self.posterior
    }

    /// Incorporate an executed pull and its feedback.
    pub fn observe(&mut self, arm: usize, fb: Feedback) {
        let (hit, miss) = match fb {
            Feedback::Plus => (self.log_plus_hit, self.log_plus_miss),
            Feedback::Minus => (self.log_minus_hit, self.log_minus_miss),
        };
        let (ehit, emiss) = match self.mode {
            FilterMode::OffPolicy => (self.log_expert_hit, self.log_expert_miss),
            FilterMode::OnPolicy => (0.0, 0.0),
        };
        let k = self.params.num_arms;
        self.posterior.update_log((0..k).map(|c| {
            if c == arm {
                hit + ehit
            } else {
                miss + emiss
            }
        }));
        #[cfg(debug_assertions)]
        {
            self.record.push(arm, fb);
            if self.record.len() % AUDIT_INTERVAL == 0 {
                self.audit();
            }
        }
    }

    #[cfg(debug_assertions)]
    fn audit(&self) {
        let fresh = filter_posterior(&self.params, self.mode, &self.record);
        let (a, b) = (fresh.normalized(), self.posterior.normalized());
        for (x, y) in a.iter().zip(&b) {
            debug_assert!((x - y).abs() < 1e-9, "incremental posterior drifted: {a:?} vs {b:?}");
        }
    }

    /// Learner action distribution `Σ_c p(c|h) π^E(·|c)` in closed form.
    pub fn action_probs(&self) -> Vec<f64> {
        let post = self.posterior.normalized();
        let e = self.params.eps_exp;
        let spread = e / (self.params.num_arms - 1) as f64;
        post.iter().map(|p| p * (1.0 - e) + (1.0 - p) * spread).collect()
    }
}

/// From-scratch posterior for a bandit history, evaluated factor by factor.
pub fn filter_posterior(params: &BanditParams, mode: FilterMode, history: &BanditHistory) -> Posterior {
    let k = params.num_arms;
    let mut post = Posterior::uniform(k);
    for (a, fb) in history.iter() {
        let tl: Vec<f64> = (0..k).map(|c| params.feedback_likelihood(fb, a, c)).collect();
        let el: Vec<f64> = (0..k).map(|c| params.expert_action_prob(a, c)).collect();
        post.update(mode, &tl, &el);
    }
    post
}

/// Filter-backed learner on the bandit's CMDP encoding.
#[derive(Debug, Clone)]
pub struct FilterPolicy {
    params: BanditParams,
    mode: FilterMode,
}

/// Bind a filter and the expert mixture into a history policy.
pub fn filter_policy_factory(params: BanditParams, mode: FilterMode) -> FilterPolicy {
    FilterPolicy { params, mode }
}

impl FilterPolicy {
    pub fn params(&self) -> &BanditParams {
        &self.params
    }
    pub fn mode(&self) -> FilterMode {
        self.mode
    }
}

impl Policy for FilterPolicy {
    fn num_actions(&self) -> usize {
        self.params.num_arms
    }

    fn action_probs(&self, history: &History) -> Vec<f64> {
        let record = BanditHistory::from_history(history)
            .expect("bandit filter policy needs a bandit-encoded history");
        let post = filter_posterior(&self.params, self.mode, &record);
        let expert = self.params.expert_policy();
        mixture_policy(&post, &expert, history.last_state())
    }

    fn cursor(&self, _first_state: usize) -> Option<Box<dyn PolicyCursor + '_>> {
        Some(Box::new(FilterCursor(BanditFilter::new(self.params, self.mode))))
    }
}

struct FilterCursor(BanditFilter);

impl PolicyCursor for FilterCursor {
    fn action_probs(&mut self) -> Vec<f64> {
        self.0.action_probs()
    }
    fn record(&mut self, action: usize, next_state: usize) {
        let fb = Feedback::from_state(next_state).expect("bandit feedback state");
        self.0.observe(action, fb);
    }
}

/// One row of a per-step posterior trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub posterior: Vec<f64>,
    pub intended_arm: usize,
    pub executed_arm: usize,
    pub feedback: Feedback,
}

/// CSV with header `t,c0,...,c{K-1},intended_arm,executed_arm,feedback`.
pub fn trace_csv(num_contexts: usize, rows: &[TraceRow]) -> String {
    let mut out = String::from("t");
    for c in 0..num_contexts {
        write!(out, ",c{c}").unwrap();
    }
    out.push_str(",intended_arm,executed_arm,feedback\n");
    for row in rows {
        write!(out, "{}", row.t).unwrap();
        for p in &row.posterior {
            write!(out, ",{}", crate::fmt_g6(*p)).unwrap();
        }
        writeln!(
            out,
            ",{},{},{}",
            row.intended_arm,
            row.executed_arm,
            row.feedback.symbol()
        )
        .unwrap();
    }
    out
}
