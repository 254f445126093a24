//! Moment classes, moment-matching error series, and exact numerical checks
//! of the value-difference bounds for reward-, on-Q- and off-Q-matching
//! learners.
//!
//! A moment class is stored as a finite list of generator pairs `(f, f̃)`
//! where `f` is a context-dependent moment and `f̃` its history-based
//! counterpart. The class is the convex hull of `±(f, f̃)`, so it is closed
//! under negation and every supremum of a linear functional over it is the
//! largest absolute value over the generators.
//!
//! Scaling: on-Q errors are divided by the recoverability constant `H` and
//! off-Q and reward errors by the class range bound. With those scalings the
//! three chains
//!
//! ```text
//! (J(π^E) - J(π)) / T  <=  (R / T) Σ_t ε_rew(t) + δ_rew(t)
//!                      <=  (H / T) Σ_t ε_on(t)  + δ_on(t)
//!                      <=  (R / T) Σ_t ε_off(t) + δ_off(t)
//! ```
//! hold exactly at every finite `T` (each is a separate bound on the left
//! side; `R = T` for the Q-function class used by the off-Q check, so the
//! last one reads `Σ_t ε_off(t) + δ_off(t)`).

use num::{BigInt, BigRational, One, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::Serialize;

use crate::bandit::{BanditHistory, BanditParams, Feedback};
use crate::cmdp::{
    self, cursor_for, expected_return_expert_to, expected_return_to, expert_q_table, Enumeration, Estimate,
    ExpertPolicy, History, Policy, TabularCmdp, ValueTables,
};
use crate::error::{Error, Result};
use crate::filters::{cmdp_posterior, FilterMode};
use crate::rng::RandomStream;

/// Tolerance on the value-bound checks.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Context-dependent moment `f(h_t, a, c)`. Most moments only look at the
/// current state `s_t`; time-indexed and history-indexed ones use more.
pub trait Moment: Sync {
    fn eval(&self, history: &History, action: usize, context: usize) -> f64;
    fn range_bound(&self) -> f64;
}

/// History-based moment `f̃(h_t, a)`.
pub trait ObservableMoment: Sync {
    fn eval(&self, history: &History, action: usize) -> f64;
    fn range_bound(&self) -> f64;
}

/// Tabular moment on `(state, action, context)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentFunction {
    num_actions: usize,
    num_contexts: usize,
    // [s][a][c]
    values: Vec<f64>,
    range_bound: f64,
}

impl MomentFunction {
    pub fn from_fn(
        num_states: usize,
        num_actions: usize,
        num_contexts: usize,
        range_bound: f64,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(num_states * num_actions * num_contexts);
        for s in 0..num_states {
            for a in 0..num_actions {
                for c in 0..num_contexts {
                    let v = f(s, a, c);
                    if !v.is_finite() || v.abs() > range_bound + 1e-12 {
                        return Err(Error::model(
                            format!("moment[{s}][{a}][{c}]"),
                            format!("{v} exceeds range bound {range_bound}"),
                        ));
                    }
                    values.push(v);
                }
            }
        }
        Ok(Self {
            num_actions,
            num_contexts,
            values,
            range_bound,
        })
    }

    /// The reward function as a moment with range 1.
    pub fn reward(cmdp: &TabularCmdp) -> Self {
        Self::from_fn(cmdp.num_states(), cmdp.num_actions(), cmdp.num_contexts(), 1.0, |s, a, c| {
            cmdp.reward(s, a, c)
        })
        .expect("rewards lie in [-1, 1]")
    }

    pub fn constant(cmdp: &TabularCmdp, value: f64) -> Self {
        Self::from_fn(cmdp.num_states(), cmdp.num_actions(), cmdp.num_contexts(), value.abs(), |_, _, _| value)
            .expect("constant within its own bound")
    }

    /// `1[(s, a, c) = (state, action, context)]`.
    pub fn indicator(cmdp: &TabularCmdp, state: usize, action: usize, context: usize) -> Self {
        Self::from_fn(cmdp.num_states(), cmdp.num_actions(), cmdp.num_contexts(), 1.0, |s, a, c| {
            f64::from(u8::from((s, a, c) == (state, action, context)))
        })
        .expect("indicator within range")
    }

    /// Every `(s, a, c)` indicator.
    pub fn indicator_basis(cmdp: &TabularCmdp) -> Vec<Self> {
        let mut out = Vec::new();
        for s in 0..cmdp.num_states() {
            for a in 0..cmdp.num_actions() {
                for c in 0..cmdp.num_contexts() {
                    out.push(Self::indicator(cmdp, s, a, c));
                }
            }
        }
        out
    }

    #[inline]
    pub fn value(&self, state: usize, action: usize, context: usize) -> f64 {
        self.values[(state * self.num_actions + action) * self.num_contexts + context]
    }
}

impl Moment for MomentFunction {
    fn eval(&self, history: &History, action: usize, context: usize) -> f64 {
        self.value(history.last_state(), action, context)
    }
    fn range_bound(&self) -> f64 {
        self.range_bound
    }
}

/// Time-indexed tabular moment `f_t(s, a, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedMoment {
    steps: Vec<MomentFunction>,
    range_bound: f64,
}

impl TimedMoment {
    pub fn new(steps: Vec<MomentFunction>) -> Self {
        let range_bound = steps.iter().map(|m| m.range_bound).fold(0.0, f64::max);
        Self { steps, range_bound }
    }

    /// The expert's finite-horizon Q-function, range bound `T`.
    pub fn expert_q(cmdp: &TabularCmdp, expert: &ExpertPolicy) -> Self {
        let horizon = cmdp.horizon();
        let (ns, na, nc) = (cmdp.num_states(), cmdp.num_actions(), cmdp.num_contexts());
        let steps = expert_q_table(cmdp, expert, horizon)
            .into_iter()
            .map(|table| {
                MomentFunction::from_fn(ns, na, nc, horizon as f64, |s, a, c| table[(s * na + a) * nc + c])
                    .expect("|Q| <= T")
            })
            .collect();
        Self {
            steps,
            range_bound: horizon as f64,
        }
    }

    pub fn step(&self, t: usize) -> &MomentFunction {
        &self.steps[t.min(self.steps.len()) - 1]
    }
}

impl Moment for TimedMoment {
    fn eval(&self, history: &History, action: usize, context: usize) -> f64 {
        self.step(history.len()).value(history.last_state(), action, context)
    }
    fn range_bound(&self) -> f64 {
        self.range_bound
    }
}

/// A learner's history Q-function `Q^π(h, a, c)` as a moment.
#[derive(Debug, Clone)]
pub struct HistoryQMoment {
    tables: ValueTables,
    range_bound: f64,
}

impl HistoryQMoment {
    pub fn new(cmdp: &TabularCmdp, policy: &dyn Policy) -> Result<Self> {
        Ok(Self {
            tables: cmdp::q_and_value(cmdp, policy)?,
            range_bound: cmdp.horizon() as f64,
        })
    }
}

impl Moment for HistoryQMoment {
    fn eval(&self, history: &History, action: usize, context: usize) -> f64 {
        self.tables.q(history, action, context).unwrap_or(0.0)
    }
    fn range_bound(&self) -> f64 {
        self.range_bound
    }
}

/// `f̃(h, a) = Σ_c p_on(c | h) f(h, a, c)`.
pub struct LiftedMoment<'a> {
    moment: &'a dyn Moment,
    cmdp: &'a TabularCmdp,
    expert: &'a ExpertPolicy,
}

/// Observable counterpart of a context moment, built from the on-policy
/// posterior.
pub fn observable_lift<'a>(
    moment: &'a dyn Moment,
    cmdp: &'a TabularCmdp,
    expert: &'a ExpertPolicy,
) -> LiftedMoment<'a> {
    LiftedMoment { moment, cmdp, expert }
}

impl ObservableMoment for LiftedMoment<'_> {
    fn eval(&self, history: &History, action: usize) -> f64 {
        let post = cmdp_posterior(self.cmdp, self.expert, FilterMode::OnPolicy, history).normalized();
        post.iter()
            .enumerate()
            .map(|(c, p)| p * self.moment.eval(history, action, c))
            .sum()
    }
    fn range_bound(&self) -> f64 {
        self.moment.range_bound()
    }
}

/// How the observable side of a generator pair is obtained.
pub enum Observable<'a> {
    /// Posterior-weighted lift of the context moment.
    Lift,
    Direct(Box<dyn ObservableMoment + 'a>),
}

pub struct MomentPair<'a> {
    pub context: Box<dyn Moment + 'a>,
    pub observable: Observable<'a>,
}

/// Convex hull of `±` generator pairs.
pub struct MomentClass<'a> {
    pairs: Vec<MomentPair<'a>>,
    range_bound: f64,
}

impl<'a> MomentClass<'a> {
    pub fn new(pairs: Vec<MomentPair<'a>>) -> Self {
        let range_bound = pairs
            .iter()
            .map(|p| {
                let obs = match &p.observable {
                    Observable::Lift => 0.0,
                    Observable::Direct(o) => o.range_bound(),
                };
                p.context.range_bound().max(obs)
            })
            .fold(0.0, f64::max);
        Self { pairs, range_bound }
    }

    /// Class of lifted context moments.
    pub fn lifted(moments: Vec<Box<dyn Moment + 'a>>) -> Self {
        Self::new(
            moments
                .into_iter()
                .map(|m| MomentPair {
                    context: m,
                    observable: Observable::Lift,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn range_bound(&self) -> f64 {
        self.range_bound
    }

    pub fn pairs(&self) -> &[MomentPair<'a>] {
        &self.pairs
    }

    /// Values `f(h, a, c)` laid out `[c][a]` and `f̃(h, a)` for generator `i`,
    /// given the on-policy posterior at `h`.
    pub(crate) fn tables_at(
        &self,
        i: usize,
        history: &History,
        posterior: &[f64],
        num_actions: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let pair = &self.pairs[i];
        let nc = posterior.len();
        let mut ctx = vec![0.0; nc * num_actions];
        for c in 0..nc {
            for a in 0..num_actions {
                ctx[c * num_actions + a] = pair.context.eval(history, a, c);
            }
        }
        let obs = match &pair.observable {
            Observable::Lift => (0..num_actions)
                .map(|a| (0..nc).map(|c| posterior[c] * ctx[c * num_actions + a]).sum())
                .collect(),
            Observable::Direct(o) => (0..num_actions).map(|a| o.eval(history, a)).collect(),
        };
        (ctx, obs)
    }
}

/// Recoverability constant: the largest one-step advantage
/// `f(h, a, c) - E_{a' ~ π^E(s, c)} f(h, a', c)` over the class (closed under
/// negation) and over every history reachable under some action sequence.
pub fn recoverability_h(cmdp: &TabularCmdp, expert: &ExpertPolicy, class: &MomentClass<'_>) -> Result<f64> {
    let na = cmdp.num_actions();
    let explorer = cmdp::UniformPolicy { num_actions: na };
    let mut h = 0.0f64;
    Enumeration::new(cmdp).learner(&explorer).for_each(|node| {
        let s = node.state();
        for pair in &class.pairs {
            for c in 0..cmdp.num_contexts() {
                let vals: Vec<f64> = (0..na).map(|a| pair.context.eval(node.history, a, c)).collect();
                let mean: f64 = expert.probs(s, c).iter().zip(&vals).map(|(p, v)| p * v).sum();
                for v in &vals {
                    h = h.max((v - mean).abs());
                }
            }
        }
    })?;
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    On,
    Off,
    Rew,
}

/// Per-step moment-matching errors `ε(t)` and identifiability residuals
/// `δ(t)` for `t = 1..=T` (index `t - 1`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorSeries {
    pub kind: ErrorKind,
    pub eps: Vec<f64>,
    pub delta: Vec<f64>,
    /// Divisor applied to raw moment differences (`H` or the range bound).
    pub scale: f64,
}

impl ErrorSeries {
    pub fn sum(&self) -> f64 {
        self.eps.iter().zip(&self.delta).map(|(e, d)| e + d).sum()
    }

    pub fn horizon(&self) -> usize {
        self.eps.len()
    }
}

/// Exact error series by joint enumeration of the learner and expert
/// trajectory measures over the CMDP's horizon.
pub fn epsilon_series(
    cmdp: &TabularCmdp,
    expert: &ExpertPolicy,
    policy: &dyn Policy,
    class: &MomentClass<'_>,
    kind: ErrorKind,
) -> Result<ErrorSeries> {
    let scale = match kind {
        ErrorKind::On => recoverability_h(cmdp, expert, class)?,
        ErrorKind::Off | ErrorKind::Rew => class.range_bound(),
    };
    let (raw_eps, raw_delta) = raw_differences(cmdp, expert, policy, class, kind)?;
    let horizon = cmdp.horizon();
    let mut eps = vec![0.0; horizon];
    let mut delta = vec![0.0; horizon];
    if scale > 0.0 {
        for t in 0..horizon {
            eps[t] = raw_eps[t].iter().fold(0.0f64, |m, x| m.max(x.abs())) / scale;
            delta[t] = raw_delta[t].iter().fold(0.0f64, |m, x| m.max(x.abs())) / scale;
        }
    }
    Ok(ErrorSeries {
        kind,
        eps,
        delta,
        scale,
    })
}

/// Per-step, per-generator signed differences `(observable part, residual part)`.
#[allow(clippy::type_complexity)]
fn raw_differences(
    cmdp: &TabularCmdp,
    expert: &ExpertPolicy,
    policy: &dyn Policy,
    class: &MomentClass<'_>,
    kind: ErrorKind,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let horizon = cmdp.horizon();
    let (na, nc) = (cmdp.num_actions(), cmdp.num_contexts());
    let m = class.len();
    let mut obs_diff = vec![vec![0.0; m]; horizon];
    let mut res_diff = vec![vec![0.0; m]; horizon];
    Enumeration::new(cmdp)
        .learner(policy)
        .expert(expert)
        .for_each(|node| {
            let t = node.t();
            let s = node.state();
            let post = cmdp_posterior(cmdp, expert, FilterMode::OnPolicy, node.history).normalized();
            let pi = node.learner_probs;
            for i in 0..m {
                let (ctx, obs) = class.tables_at(i, node.history, &post, na);
                let mut d_obs = 0.0;
                let mut d_res = 0.0;
                for c in 0..nc {
                    let pe = expert.probs(s, c);
                    let lw = node.learner_joint[c];
                    let ew = node.expert_joint[c];
                    let res = |a: usize| ctx[c * na + a] - obs[a];
                    let mut e_pi_obs = 0.0;
                    let mut e_pi_res = 0.0;
                    let mut e_ex_obs = 0.0;
                    let mut e_ex_res = 0.0;
                    for a in 0..na {
                        e_pi_obs += pi[a] * obs[a];
                        e_pi_res += pi[a] * res(a);
                        e_ex_obs += pe[a] * obs[a];
                        e_ex_res += pe[a] * res(a);
                    }
                    match kind {
                        // learner's action vs expert's action, both on learner histories
                        ErrorKind::On => {
                            d_obs += lw * (e_pi_obs - e_ex_obs);
                            d_res += lw * (e_pi_res - e_ex_res);
                        }
                        // expert's action vs learner's action, on expert histories
                        ErrorKind::Off => {
                            d_obs += ew * (e_ex_obs - e_pi_obs);
                            d_res += ew * (e_ex_res - e_pi_res);
                        }
                        // learner occupancy minus expert occupancy
                        ErrorKind::Rew => {
                            d_obs += lw * e_pi_obs - ew * e_ex_obs;
                            d_res += ew * e_ex_res - lw * e_pi_res;
                        }
                    }
                }
                obs_diff[t - 1][i] += d_obs;
                res_diff[t - 1][i] += d_res;
            }
        })?;
    Ok((obs_diff, res_diff))
}

/// Measured slack of each value bound at a finite horizon.
#[derive(Debug, Clone, Serialize)]
pub struct Theorem1Report {
    pub horizon: usize,
    /// `(J(π^E) - J(π)) / T`
    pub gap: f64,
    pub recoverability: f64,
    pub reward_bound: f64,
    pub on_q_bound: f64,
    pub off_q_bound: f64,
    pub reward: ErrorSeries,
    pub on_q: ErrorSeries,
    pub off_q: ErrorSeries,
}

impl Theorem1Report {
    pub fn slacks(&self) -> [f64; 3] {
        [
            self.reward_bound - self.gap,
            self.on_q_bound - self.gap,
            self.off_q_bound - self.gap,
        ]
    }

    pub fn min_slack(&self) -> f64 {
        self.slacks().into_iter().fold(f64::INFINITY, f64::min)
    }
}

/// Evaluate all three finite-horizon bounds exactly. Returns
/// [`Error::BoundViolated`] if any slack is below `-BOUND_TOLERANCE`; the
/// bounds are unconditional, so that indicates a bug.
///
/// Classes: reward `{r}`, on-Q `{Q^{π^E}_t}`, off-Q `{Q^π}`, each lifted
/// through the on-policy posterior.
pub fn theorem1_check(
    cmdp: &TabularCmdp,
    expert: &ExpertPolicy,
    policy: &dyn Policy,
    horizon: usize,
) -> Result<Theorem1Report> {
    let m = cmdp.with_horizon(horizon)?;
    expert.check_compatible(&m)?;
    let t = horizon as f64;
    let gap = (expected_return_expert_to(&m, expert, horizon)? - expected_return_to(&m, policy, horizon)?) / t;

    let reward_class = MomentClass::lifted(vec![Box::new(MomentFunction::reward(&m))]);
    let reward = epsilon_series(&m, expert, policy, &reward_class, ErrorKind::Rew)?;
    let reward_bound = reward_class.range_bound() / t * reward.sum();

    let on_class = MomentClass::lifted(vec![Box::new(TimedMoment::expert_q(&m, expert))]);
    let on_q = epsilon_series(&m, expert, policy, &on_class, ErrorKind::On)?;
    let on_q_bound = on_q.scale / t * on_q.sum();

    let off_class = MomentClass::lifted(vec![Box::new(HistoryQMoment::new(&m, policy)?)]);
    let off_q = epsilon_series(&m, expert, policy, &off_class, ErrorKind::Off)?;
    let off_q_bound = off_class.range_bound() / t * off_q.sum();

    let report = Theorem1Report {
        horizon,
        gap,
        recoverability: on_q.scale,
        reward_bound,
        on_q_bound,
        off_q_bound,
        reward,
        on_q,
        off_q,
    };
    for (name, slack) in ["reward-matching bound", "on-Q bound", "off-Q bound"]
        .into_iter()
        .zip(report.slacks())
    {
        if slack < -BOUND_TOLERANCE {
            return Err(Error::BoundViolated { bound: name, slack });
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Cliff

pub const CLIFF_PATH: usize = 0;
pub const CLIFF_FALLEN: usize = 1;
pub const CLIFF_STAY: usize = 0;
pub const CLIFF_JUMP: usize = 1;

/// Two-state absorbing cliff: reward 1 per step on the path, 0 once fallen.
pub fn cliff_cmdp(horizon: usize) -> Result<TabularCmdp> {
    // [s][a][c][s']
    let transition = vec![
        1.0, 0.0, // path, stay
        0.0, 1.0, // path, jump
        0.0, 1.0, // fallen, stay
        0.0, 1.0, // fallen, jump
    ];
    let reward = vec![1.0, 1.0, 0.0, 0.0];
    TabularCmdp::new(2, 2, 1, horizon, vec![1.0], vec![1.0, 0.0], transition, reward)
}

/// The expert never jumps.
pub fn cliff_expert() -> ExpertPolicy {
    ExpertPolicy::from_fn(2, 1, 2, |_, _| vec![1.0, 0.0]).expect("valid rows")
}

/// Learner that jumps at step `t` with probability `1 / (t + 1)` while on
/// the path.
#[derive(Debug, Clone, Copy, Default)]
pub struct LatchingCliffLearner;

impl LatchingCliffLearner {
    pub fn jump_probability(t: usize) -> f64 {
        1.0 / (t as f64 + 1.0)
    }
}

impl Policy for LatchingCliffLearner {
    fn num_actions(&self) -> usize {
        2
    }
    fn action_probs(&self, history: &History) -> Vec<f64> {
        if history.last_state() == CLIFF_PATH {
            let p = Self::jump_probability(history.len());
            vec![1.0 - p, p]
        } else {
            vec![1.0, 0.0]
        }
    }
}

/// `(1/T) Σ_{t=1}^{T} (T - t) / (t + 1)` in exact rational arithmetic.
pub fn cliff_gap_formula(horizon: usize) -> BigRational {
    assert!(horizon >= 1, "horizon must be at least 1");
    let t_big = BigInt::from(horizon);
    let mut sum = BigRational::zero();
    for t in 1..=horizon {
        sum += BigRational::new(BigInt::from(horizon - t), BigInt::from(t + 1));
    }
    sum / BigRational::from_integer(t_big)
}

/// `H_{T+1} - 1 - (1/T) Σ_t t / (t + 1)`, the same quantity regrouped as a
/// harmonic sum minus a correction.
pub fn cliff_gap_decomposition(horizon: usize) -> BigRational {
    let mut harmonic = BigRational::zero();
    let mut correction = BigRational::zero();
    for t in 1..=horizon {
        harmonic += BigRational::new(BigInt::one(), BigInt::from(t + 1));
        correction += BigRational::new(BigInt::from(t), BigInt::from(t + 1));
    }
    harmonic - correction / BigRational::from_integer(BigInt::from(horizon))
}

pub fn rational_to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Exact Cliff quantities from forward state-distribution propagation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliffExact {
    pub aig: f64,
    /// `ε_off(t)` for the stay-indicator moment, `t = 1..=T`.
    pub eps_off: Vec<f64>,
}

pub fn cliff_exact(horizon: usize) -> CliffExact {
    let mut on_path = 1.0;
    let mut learner_return = 0.0;
    let mut eps_off = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        learner_return += on_path;
        let jump = LatchingCliffLearner::jump_probability(t);
        eps_off.push(jump);
        on_path *= 1.0 - jump;
    }
    CliffExact {
        aig: (horizon as f64 - learner_return) / horizon as f64,
        eps_off,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliffSimulation {
    pub horizon: usize,
    pub trials: usize,
    pub aig: Estimate,
    /// Fraction of trials in which the learner's action on the expert's
    /// history differs from the expert's, per step.
    pub eps_off: Vec<f64>,
}

impl CliffSimulation {
    /// Mean of `ε_off(t) (t + 1)` over the last `window` steps.
    pub fn scaled_eps_tail(&self, window: usize) -> f64 {
        let start = self.horizon.saturating_sub(window);
        let vals: Vec<f64> = (start..self.horizon)
            .map(|i| self.eps_off[i] * (i as f64 + 2.0))
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Number of contiguous trial chunks used for deterministic parallel
/// accumulation.
const CHUNKS: usize = 64;

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    let size = n.div_ceil(CHUNKS).max(1);
    (0..n).step_by(size).map(|lo| lo..(lo + size).min(n)).collect()
}

/// Monte-Carlo Cliff run. The learner's own episode and its action on the
/// expert's (always-on-path) history share one uniform per step, so the
/// episode falls at the first step where the off-policy deviation fires.
pub fn cliff_simulate(horizon: usize, trials: usize, stream: &RandomStream) -> CliffSimulation {
    assert!(horizon >= 1 && trials >= 1);
    let partials: Vec<(Vec<u64>, Vec<f64>)> = chunk_ranges(trials)
        .into_par_iter()
        .map(|range| {
            let mut deviations = vec![0u64; horizon];
            let mut gaps = Vec::with_capacity(range.len());
            for trial in range {
                let mut s = stream.child(trial as u64);
                let mut on_path = true;
                let mut learner_return = 0.0;
                for t in 1..=horizon {
                    let deviate = s.uniform() < LatchingCliffLearner::jump_probability(t);
                    if deviate {
                        deviations[t - 1] += 1;
                    }
                    if on_path {
                        learner_return += 1.0;
                        on_path = !deviate;
                    }
                }
                gaps.push((horizon as f64 - learner_return) / horizon as f64);
            }
            (deviations, gaps)
        })
        .collect();
    let mut counts = vec![0u64; horizon];
    let mut gaps = Vec::with_capacity(trials);
    for (d, g) in partials {
        counts.iter_mut().zip(d).for_each(|(c, x)| *c += x);
        gaps.extend(g);
    }
    CliffSimulation {
        horizon,
        trials,
        aig: Estimate::from_samples(&gaps),
        eps_off: counts.iter().map(|&c| c as f64 / trials as f64).collect(),
    }
}

// ---------------------------------------------------------------------------
// Bandit identifiability moment

/// Positive-feedback rate of each arm as an exact fraction `(n⁺, n)`;
/// unpulled arms get the uninformative `1/2`.
fn arm_rates(history: &BanditHistory, num_arms: usize) -> Vec<(u64, u64)> {
    let mut counts = vec![(0u64, 0u64); num_arms];
    for (a, fb) in history.iter() {
        counts[a].1 += 1;
        if fb == Feedback::Plus {
            counts[a].0 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(p, n)| if n == 0 { (1, 2) } else { (p, n) })
        .collect()
}

/// Arm with the highest positive-feedback rate; exact comparison, lowest
/// index on ties.
pub fn empirical_best_arm(history: &BanditHistory, num_arms: usize) -> usize {
    let rates = arm_rates(history, num_arms);
    let mut best = 0;
    for (k, &(p, n)) in rates.iter().enumerate().skip(1) {
        let (bp, bn) = rates[best];
        if p as u128 * bn as u128 > bp as u128 * n as u128 {
            best = k;
        }
    }
    best
}

/// `1[action = argmax_k n_k⁺ / n_k]`.
pub fn corollary_moment(history: &BanditHistory, action: usize, num_arms: usize) -> u8 {
    u8::from(action == empirical_best_arm(history, num_arms))
}

/// The identifiability moment as an observable moment on the bandit's CMDP
/// encoding.
#[derive(Debug, Clone, Copy)]
pub struct CorollaryMoment {
    pub num_arms: usize,
}

impl ObservableMoment for CorollaryMoment {
    fn eval(&self, history: &History, action: usize) -> f64 {
        let record = BanditHistory::from_history(history).expect("bandit-encoded history");
        f64::from(corollary_moment(&record, action, self.num_arms))
    }
    fn range_bound(&self) -> f64 {
        1.0
    }
}

/// Hoeffding tail `exp(-2 n gap²)`.
pub fn hoeffding_delta(n: usize, rate_gap: f64) -> f64 {
    hoeffding_delta_eff(n as f64, rate_gap)
}

/// [`hoeffding_delta`] for a fractional effective sample size.
pub fn hoeffding_delta_eff(n: f64, rate_gap: f64) -> f64 {
    (-2.0 * n * rate_gap * rate_gap).exp()
}

/// Misidentification curve of the empirical-best-arm moment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayCurve {
    /// `P(argmax arm != correct arm)` after `t` pulls, `t = 1..=horizon`.
    pub misidentification: Vec<f64>,
    /// Mean over trials of the union Hoeffding bound at the realized counts.
    pub envelope: Vec<f64>,
    pub trials: usize,
}

impl DecayCurve {
    pub fn final_value(&self) -> f64 {
        *self.misidentification.last().expect("non-empty curve")
    }

    pub fn final_envelope(&self) -> f64 {
        *self.envelope.last().expect("non-empty curve")
    }

    pub fn final_std_error(&self) -> f64 {
        let p = self.final_value();
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }

    /// Mean of the last quarter of the curve is below the mean of the first.
    pub fn is_decaying(&self) -> bool {
        let q = (self.misidentification.len() / 4).max(1);
        let head: f64 = self.misidentification[..q].iter().sum::<f64>() / q as f64;
        let n = self.misidentification.len();
        let tail: f64 = self.misidentification[n - q..].iter().sum::<f64>() / q as f64;
        tail < head
    }
}

/// Monte-Carlo misidentification curve for a learner with exploration noise.
///
/// The envelope at step `t` of a trial with correct arm `c` is
/// `min(1, Σ_{k≠c} exp(-2 n_eff gap²))` with `n_eff = n_c n_k / (n_c + n_k)`
/// and `gap = |1 - 2 eps_obs|`; it bounds the misidentification
/// probability when `eps_obs < 1/2`.
pub fn corollary_decay_check(
    params: &BanditParams,
    policy: &dyn Policy,
    horizon: usize,
    trials: usize,
    stream: &RandomStream,
) -> Result<DecayCurve> {
    if params.eps_exp <= 0.0 {
        return Err(Error::InvalidParams(
            "the decay check needs eps_exp > 0 so every arm keeps being pulled".into(),
        ));
    }
    if horizon == 0 || trials == 0 {
        return Err(Error::InvalidParams("horizon and trials must be positive".into()));
    }
    let k = params.num_arms;
    let gap = (1.0 - 2.0 * params.eps_obs).abs();
    let partials: Vec<(Vec<u64>, Vec<f64>)> = chunk_ranges(trials)
        .into_par_iter()
        .map(|range| {
            let mut wrong = vec![0u64; horizon];
            let mut env = vec![0.0; horizon];
            for trial in range {
                let mut s = stream.child(trial as u64);
                let context = s.below(k);
                let mut cursor = cursor_for(policy, crate::bandit::START_STATE);
                let mut record = BanditHistory::new();
                let mut pulls = vec![0u64; k];
                for t in 0..horizon {
                    let intended = s.categorical(&cursor.action_probs());
                    let (executed, fb) = params.step(context, intended, &mut s);
                    cursor.record(executed, fb.state());
                    record.push(executed, fb);
                    pulls[executed] += 1;
                    if empirical_best_arm(&record, k) != context {
                        wrong[t] += 1;
                    }
                    let nc = pulls[context] as f64;
                    let bound: f64 = (0..k)
                        .filter(|&j| j != context)
                        .map(|j| {
                            let nj = pulls[j] as f64;
                            if nc == 0.0 || nj == 0.0 {
                                1.0
                            } else {
                                hoeffding_delta_eff(nc * nj / (nc + nj), gap)
                            }
                        })
                        .sum();
                    env[t] += bound.min(1.0);
                }
            }
            (wrong, env)
        })
        .collect();
    let mut wrong = vec![0u64; horizon];
    let mut env = vec![0.0; horizon];
    for (w, e) in partials {
        wrong.iter_mut().zip(w).for_each(|(a, b)| *a += b);
        env.iter_mut().zip(e).for_each(|(a, b)| *a += b);
    }
    Ok(DecayCurve {
        misidentification: wrong.iter().map(|&w| w as f64 / trials as f64).collect(),
        envelope: env.iter().map(|e| e / trials as f64).collect(),
        trials,
    })
}

// ---------------------------------------------------------------------------
// Density ratio

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum DensityRatio {
    Finite(f64),
    /// Some history has positive learner mass and zero expert mass.
    Infinite,
}

impl DensityRatio {
    pub fn is_infinite(&self) -> bool {
        matches!(self, DensityRatio::Infinite)
    }

    pub fn value(&self) -> f64 {
        match self {
            DensityRatio::Finite(x) => *x,
            DensityRatio::Infinite => f64::INFINITY,
        }
    }
}

/// `max_h p(h; π) / p(h; π^E)` over histories after `steps` interaction
/// steps (`steps` actions and their outcomes, marginalized over the context).
/// `0/0` counts as 1. Histories negligible under both measures are skipped.
pub fn density_ratio(
    cmdp: &TabularCmdp,
    expert: &ExpertPolicy,
    policy: &dyn Policy,
    steps: usize,
) -> Result<DensityRatio> {
    let depth = steps + 1;
    let m = if cmdp.horizon() < depth {
        cmdp.with_horizon(depth)?
    } else {
        cmdp.clone()
    };
    let mut best = 1.0f64;
    let mut infinite = false;
    Enumeration::new(&m)
        .learner(policy)
        .expert(expert)
        .horizon(depth)
        .for_each(|node| {
            if node.t() != depth {
                return;
            }
            let pl: f64 = node.learner_joint.iter().sum();
            let pe: f64 = node.expert_joint.iter().sum();
            if pe == 0.0 {
                if pl > 0.0 {
                    infinite = true;
                }
            } else {
                best = best.max(pl / pe);
            }
        })?;
    Ok(if infinite {
        DensityRatio::Infinite
    } else {
        DensityRatio::Finite(best)
    })
}
