//! Zero-sum moment-matching game between a history policy and a moment
//! player, with duality-gap certificates.
//!
//! The learner minimizes and the moment player maximizes the time-averaged
//! payoff
//!
//! ```text
//! reward: U(π, f̃) = (1/T) (E_π Σ_t f̃(h_t, a_t) - E_{π^E} Σ_t f̃(h_t, a_t))
//! on_q:   U(π, f̃) = (1/T) E_π Σ_t (f̃(h_t, a_t) - E_{a ~ π^E(s_t, c)} f̃(h_t, a))
//! ```
//!
//! The policy player runs exponential weights on every history's action
//! simplex with counterfactual losses; the moment player best-responds each
//! iteration. Both averages form the returned approximate equilibrium.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::bandit::BanditParams;
use crate::cmdp::{Enumeration, ExpertPolicy, History, Policy, TabularCmdp, DEFAULT_BUDGET, PRUNE_BELOW};
use crate::error::{Error, Result};
use crate::filters::{cmdp_posterior, FilterMode};
use crate::theory::{
    recoverability_h, CorollaryMoment, Moment, MomentClass, MomentFunction, MomentPair, Observable,
    ObservableMoment, TimedMoment,
};

pub const DEFAULT_ITERATIONS: usize = 2000;
pub const DEFAULT_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameVariant {
    Reward,
    OnQ,
}

impl GameVariant {
    pub fn name(self) -> &'static str {
        match self {
            GameVariant::Reward => "reward",
            GameVariant::OnQ => "on_q",
        }
    }
}

impl std::str::FromStr for GameVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reward" => Ok(GameVariant::Reward),
            "on_q" => Ok(GameVariant::OnQ),
            other => Err(Error::InvalidParams(format!(
                "unknown game variant '{other}' (expected reward or on_q)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GameConfig {
    pub variant: GameVariant,
    pub iterations: usize,
    /// Exponential-weights rate is `step_scale * sqrt(ln|A| / n) / span_h`,
    /// where `span_h` bounds the spread of the counterfactual losses at `h`.
    pub step_scale: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub certificate_tolerance: f64,
    /// Record the duality gap every this many iterations (and at the last).
    pub trace_every: usize,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            variant: GameVariant::Reward,
            iterations: DEFAULT_ITERATIONS,
            step_scale: 2.0,
            horizon: 3,
            certificate_tolerance: DEFAULT_TOLERANCE,
            trace_every: 10,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParams("iterations must be at least 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParams("T must be at least 1".into()));
        }
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return Err(Error::InvalidParams("step_scale must be positive".into()));
        }
        if !(self.certificate_tolerance > 0.0) {
            return Err(Error::InvalidParams("certificate_tolerance must be positive".into()));
        }
        if self.trace_every == 0 {
            return Err(Error::InvalidParams("trace_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which convex set the generators span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ball {
    /// Convex hull of `±g_i`; extreme points are the signed generators.
    #[default]
    L1,
    /// `{Σ w_i g_i : |w_i| <= 1}`; extreme points are sign vectors.
    LInf,
}

/// Moment class for the game. The first generator is the anchor used for
/// the value bound: its context side should be `r` (reward variant) or
/// `Q^E_t / H` (on-Q variant), as in the default classes.
pub struct ClassSpec<'a> {
    pub class: MomentClass<'a>,
    pub ball: Ball,
    /// `H` for on-Q classes built by [`ClassSpec::default_for`], else 1.
    pub value_scale: f64,
}

/// Moment multiplied by a constant.
pub struct ScaledMoment<'a> {
    pub inner: Box<dyn Moment + 'a>,
    pub factor: f64,
}

impl Moment for ScaledMoment<'_> {
    fn eval(&self, history: &History, action: usize, context: usize) -> f64 {
        self.factor * self.inner.eval(history, action, context)
    }
    fn range_bound(&self) -> f64 {
        self.factor.abs() * self.inner.range_bound()
    }
}

impl<'a> ClassSpec<'a> {
    pub fn l1(class: MomentClass<'a>) -> Self {
        Self {
            class,
            ball: Ball::L1,
            value_scale: 1.0,
        }
    }

    /// `{r} ∪ indicators` (reward) or `{Q^E_t / H} ∪ indicators` (on-Q),
    /// all lifted through the on-policy posterior.
    pub fn default_for(cmdp: &TabularCmdp, expert: &ExpertPolicy, variant: GameVariant) -> Result<ClassSpec<'static>> {
        let mut moments: Vec<Box<dyn Moment>> = Vec::new();
        let mut value_scale = 1.0;
        match variant {
            GameVariant::Reward => moments.push(Box::new(MomentFunction::reward(cmdp))),
            GameVariant::OnQ => {
                let q = TimedMoment::expert_q(cmdp, expert);
                let probe = MomentClass::lifted(vec![Box::new(q.clone())]);
                let h = recoverability_h(cmdp, expert, &probe)?;
                if h > 0.0 {
                    value_scale = h;
                }
                moments.push(Box::new(ScaledMoment {
                    inner: Box::new(q),
                    factor: 1.0 / value_scale,
                }));
            }
        }
        for m in MomentFunction::indicator_basis(cmdp) {
            moments.push(Box::new(m));
        }
        Ok(ClassSpec {
            class: MomentClass::lifted(moments),
            ball: Ball::L1,
            value_scale,
        })
    }
}

/// Singleton class pairing the bandit reward with the identifiability
/// moment.
pub fn corollary_class(params: &BanditParams) -> ClassSpec<'static> {
    let cmdp = params.as_cmdp();
    ClassSpec::l1(MomentClass::new(vec![MomentPair {
        context: Box::new(MomentFunction::reward(&cmdp)),
        observable: Observable::Direct(Box::new(CorollaryMoment {
            num_arms: params.num_arms,
        })),
    }]))
}

/// A policy given as one action distribution per reachable history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryPolicyTable {
    num_actions: usize,
    histories: Vec<History>,
    probs: Vec<f64>,
    index: HashMap<History, usize>,
}

impl HistoryPolicyTable {
    fn from_rows(num_actions: usize, histories: Vec<History>, probs: Vec<f64>) -> Self {
        let index = histories.iter().enumerate().map(|(i, h)| (h.clone(), i)).collect();
        Self {
            num_actions,
            histories,
            probs,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.histories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histories.is_empty()
    }

    pub fn get(&self, history: &History) -> Option<&[f64]> {
        self.index.get(history).map(|&i| self.row(i))
    }

    pub fn rows(&self) -> impl Iterator<Item = (&History, &[f64])> {
        self.histories.iter().enumerate().map(|(i, h)| (h, self.row(i)))
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_actions..(i + 1) * self.num_actions]
    }

    /// CSV with columns `t,states,actions,p0..`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,states,actions");
        for a in 0..self.num_actions {
            out.push_str(&format!(",p{a}"));
        }
        out.push('\n');
        for (h, row) in self.rows() {
            let join = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
            out.push_str(&format!("{},{},{}", h.len(), join(h.states()), join(h.actions())));
            for p in row {
                out.push(',');
                out.push_str(&crate::fmt_g6(*p));
            }
            out.push('\n');
        }
        out
    }
}

impl Policy for HistoryPolicyTable {
    fn num_actions(&self) -> usize {
        self.num_actions
    }
    fn action_probs(&self, history: &History) -> Vec<f64> {
        self.get(history)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![1.0 / self.num_actions as f64; self.num_actions])
    }
}

/// Reachable history tree in breadth-first order (parents before
/// children), with chance and expert masses per context.
struct Tree {
    na: usize,
    nc: usize,
    horizon: usize,
    histories: Vec<History>,
    // [node * nc + c]: p(c) p(s_1) Π T(s' | s, a, c), no action factors
    chance: Vec<f64>,
    chance_total: Vec<f64>,
    // [node * nc + c]: chance mass times the expert's action probabilities
    expert: Vec<f64>,
    // [node * na + a] -> child ids
    kids: Vec<Vec<usize>>,
    roots: Vec<usize>,
}

impl Tree {
    fn build(cmdp: &TabularCmdp, expert: &ExpertPolicy, horizon: usize) -> Result<Self> {
        expert.check_compatible(cmdp)?;
        let (ns, na, nc) = (cmdp.num_states(), cmdp.num_actions(), cmdp.num_contexts());
        let mut tree = Tree {
            na,
            nc,
            horizon,
            histories: Vec::new(),
            chance: Vec::new(),
            chance_total: Vec::new(),
            expert: Vec::new(),
            kids: Vec::new(),
            roots: Vec::new(),
        };
        for s in 0..ns {
            let p = cmdp.initial_state_dist()[s];
            if p <= 0.0 {
                continue;
            }
            let mass: Vec<f64> = cmdp.context_prior().iter().map(|pc| pc * p).collect();
            let id = tree.push(History::new(s), &mass, &mass);
            tree.roots.push(id);
        }
        let mut i = 0;
        while i < tree.histories.len() {
            let h = tree.histories[i].clone();
            if h.len() < horizon {
                let s = h.last_state();
                for a in 0..na {
                    for s2 in 0..ns {
                        let mut ch = vec![0.0; nc];
                        let mut ex = vec![0.0; nc];
                        for c in 0..nc {
                            let ps = cmdp.transition(s, a, c)[s2];
                            ch[c] = tree.chance[i * nc + c] * ps;
                            ex[c] = tree.expert[i * nc + c] * expert.probs(s, c)[a] * ps;
                        }
                        if ch.iter().sum::<f64>() < PRUNE_BELOW {
                            continue;
                        }
                        let mut child = h.clone();
                        child.push(a, s2);
                        let id = tree.push(child, &ch, &ex);
                        tree.kids[i * na + a].push(id);
                        if tree.histories.len() > DEFAULT_BUDGET {
                            return Err(Error::BudgetExceeded { budget: DEFAULT_BUDGET });
                        }
                    }
                }
            }
            i += 1;
        }
        Ok(tree)
    }

    fn push(&mut self, history: History, chance: &[f64], expert_mass: &[f64]) -> usize {
        let s_len = self.histories.len();
        self.histories.push(history);
        self.chance.extend_from_slice(chance);
        self.chance_total.push(chance.iter().sum());
        // the expert factor is applied on the edge, so roots start at chance
        self.expert.extend_from_slice(expert_mass);
        self.kids.extend((0..self.na).map(|_| Vec::new()));
        s_len
    }

    fn len(&self) -> usize {
        self.histories.len()
    }

    /// Learner reach `Π π(a_k | h_k)` for each node.
    fn reach(&self, pi: &[f64]) -> Vec<f64> {
        let mut rho = vec![0.0; self.len()];
        for &r in &self.roots {
            rho[r] = 1.0;
        }
        for i in 0..self.len() {
            for a in 0..self.na {
                let w = rho[i] * pi[i * self.na + a];
                for &k in &self.kids[i * self.na + a] {
                    rho[k] = w;
                }
            }
        }
        rho
    }

    fn policy_rows(&self, policy: &dyn Policy) -> Vec<f64> {
        let mut pi = Vec::with_capacity(self.len() * self.na);
        for h in &self.histories {
            pi.extend(policy.action_probs(h));
        }
        pi
    }
}

/// Per-node generator values in the layout the solver needs.
struct Tables {
    m: usize,
    // [(node * m + i) * na + a]: f̃_i(h, a)
    obs: Vec<f64>,
    // [node * m + i]: node-level payoff term (on-Q expert baseline)
    kappa: Vec<f64>,
    // [i]: policy-independent payoff constant (reward-variant expert term)
    konst: Vec<f64>,
    // [node]: χ̄(h) / T
    weight: Vec<f64>,
    // [(node * nc + c) * na + a]: anchor residual f_0 - f̃_0
    residual: Vec<f64>,
    // [node]: per-node expert contribution to the anchor residual
    residual_expert: Vec<f64>,
}

impl Tables {
    fn build(tree: &Tree, cmdp: &TabularCmdp, expert: &ExpertPolicy, spec: &ClassSpec<'_>, variant: GameVariant) -> Self {
        let (na, nc) = (tree.na, tree.nc);
        let m = spec.class.len();
        let n = tree.len();
        let t = tree.horizon as f64;
        let mut obs = vec![0.0; n * m * na];
        let mut kappa = vec![0.0; n * m];
        let mut konst = vec![0.0; m];
        let mut residual = vec![0.0; n * nc * na];
        let mut residual_expert = vec![0.0; n];
        let weight: Vec<f64> = tree.chance_total.iter().map(|x| x / t).collect();
        let _ = cmdp;
        for node in 0..n {
            let h = &tree.histories[node];
            let s = h.last_state();
            let chance = &tree.chance[node * nc..(node + 1) * nc];
            let total = tree.chance_total[node];
            for (i, pair) in spec.class.pairs().iter().enumerate() {
                let mut ctx = vec![0.0; nc * na];
                for c in 0..nc {
                    for a in 0..na {
                        ctx[c * na + a] = pair.context.eval(h, a, c);
                    }
                }
                let row = &mut obs[(node * m + i) * na..(node * m + i + 1) * na];
                match &pair.observable {
                    Observable::Lift => {
                        for a in 0..na {
                            row[a] = (0..nc).map(|c| chance[c] * ctx[c * na + a]).sum::<f64>() / total;
                        }
                    }
                    Observable::Direct(o) => {
                        for a in 0..na {
                            row[a] = o.eval(h, a);
                        }
                    }
                }
                let mut base = 0.0;
                let mut expert_term = 0.0;
                for c in 0..nc {
                    let pe = expert.probs(s, c);
                    let e_obs: f64 = (0..na).map(|a| pe[a] * row[a]).sum();
                    base += chance[c] * e_obs;
                    expert_term += tree.expert[node * nc + c] * e_obs;
                }
                match variant {
                    GameVariant::OnQ => kappa[node * m + i] = -base / t,
                    GameVariant::Reward => konst[i] += expert_term / t,
                }
                if i == 0 {
                    let mut ex = 0.0;
                    for c in 0..nc {
                        let pe = expert.probs(s, c);
                        let mut e_res = 0.0;
                        for a in 0..na {
                            let g = ctx[c * na + a] - row[a];
                            residual[(node * nc + c) * na + a] = g;
                            e_res += pe[a] * g;
                        }
                        ex += match variant {
                            GameVariant::Reward => tree.expert[node * nc + c] * e_res,
                            GameVariant::OnQ => chance[c] * e_res,
                        };
                    }
                    residual_expert[node] = ex;
                }
            }
        }
        Self {
            m,
            obs,
            kappa,
            konst,
            weight,
            residual,
            residual_expert,
        }
    }

    /// `U(π, g_i)` for every generator.
    fn generator_payoffs(&self, tree: &Tree, pi: &[f64], rho: &[f64]) -> Vec<f64> {
        let na = tree.na;
        let mut u: Vec<f64> = self.konst.iter().map(|k| -k).collect();
        for node in 0..tree.len() {
            if rho[node] == 0.0 {
                continue;
            }
            let p = &pi[node * na..(node + 1) * na];
            for i in 0..self.m {
                let row = &self.obs[(node * self.m + i) * na..(node * self.m + i + 1) * na];
                let e: f64 = p.iter().zip(row).map(|(x, y)| x * y).sum();
                u[i] += rho[node] * (self.weight[node] * e + self.kappa[node * self.m + i]);
            }
        }
        u
    }

    /// Per-node `(f̃_w(h, ·) scaled by χ̄/T, κ_w(h))` for coefficients `w`.
    fn combined(&self, tree: &Tree, w: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let na = tree.na;
        let mut imm = vec![0.0; tree.len() * na];
        let mut kap = vec![0.0; tree.len()];
        for node in 0..tree.len() {
            for (i, &wi) in w.iter().enumerate() {
                if wi == 0.0 {
                    continue;
                }
                let base = (node * self.m + i) * na;
                for a in 0..na {
                    imm[node * na + a] += wi * self.weight[node] * self.obs[base + a];
                }
                kap[node] += wi * self.kappa[node * self.m + i];
            }
        }
        let konst = w.iter().zip(&self.konst).map(|(a, b)| a * b).sum();
        (imm, kap, konst)
    }

    /// Time-averaged anchor residual `(1/T) Σ_t δ(t)` under the policy.
    fn anchor_residual(&self, tree: &Tree, pi: &[f64], rho: &[f64], variant: GameVariant) -> f64 {
        let (na, nc) = (tree.na, tree.nc);
        let mut per_t = vec![0.0; tree.horizon];
        for node in 0..tree.len() {
            let t = tree.histories[node].len();
            let p = &pi[node * na..(node + 1) * na];
            let mut learner = 0.0;
            for c in 0..nc {
                let g = &self.residual[(node * nc + c) * na..(node * nc + c + 1) * na];
                learner += tree.chance[node * nc + c] * p.iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
            }
            per_t[t - 1] += match variant {
                GameVariant::Reward => self.residual_expert[node] - rho[node] * learner,
                GameVariant::OnQ => rho[node] * (learner - self.residual_expert[node]),
            };
        }
        per_t.iter().map(|x| x.abs()).sum::<f64>() / tree.horizon as f64
    }
}

/// Best moment against a fixed policy: coefficients and payoff.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentResponse {
    pub coefficients: Vec<f64>,
    pub payoff: f64,
}

fn best_response_from(payoffs: &[f64], ball: Ball) -> MomentResponse {
    let mut w = vec![0.0; payoffs.len()];
    match ball {
        Ball::L1 => {
            let mut best = 0;
            for (i, u) in payoffs.iter().enumerate() {
                if u.abs() > payoffs[best].abs() {
                    best = i;
                }
            }
            if !payoffs.is_empty() {
                w[best] = if payoffs[best] < 0.0 { -1.0 } else { 1.0 };
            }
        }
        Ball::LInf => {
            for (wi, u) in w.iter_mut().zip(payoffs) {
                *wi = if *u < 0.0 { -1.0 } else { 1.0 };
            }
        }
    }
    let payoff = w.iter().zip(payoffs).map(|(a, b)| a * b).sum::<f64>();
    MomentResponse { coefficients: w, payoff }
}

/// Exact payoff of an observable moment against a policy, by enumeration.
pub fn payoff(
    policy: &dyn Policy,
    expert: &ExpertPolicy,
    moment: &dyn ObservableMoment,
    variant: GameVariant,
    cmdp: &TabularCmdp,
    horizon: usize,
) -> Result<f64> {
    let m = cmdp.with_horizon(horizon)?;
    let na = m.num_actions();
    let mut total = 0.0;
    Enumeration::new(&m).learner(policy).expert(expert).for_each(|node| {
        let s = node.state();
        let vals: Vec<f64> = (0..na).map(|a| moment.eval(node.history, a)).collect();
        let learner_mass: f64 = node.learner_joint.iter().sum();
        let e_pi: f64 = node.learner_probs.iter().zip(&vals).map(|(p, v)| p * v).sum();
        let e_expert = |c: usize| -> f64 { expert.probs(s, c).iter().zip(&vals).map(|(p, v)| p * v).sum() };
        match variant {
            GameVariant::Reward => {
                total += learner_mass * e_pi;
                for (c, w) in node.expert_joint.iter().enumerate() {
                    total -= w * e_expert(c);
                }
            }
            GameVariant::OnQ => {
                for (c, w) in node.learner_joint.iter().enumerate() {
                    total += w * (e_pi - e_expert(c));
                }
            }
        }
    })?;
    Ok(total / horizon as f64)
}

/// Payoff of a context moment `f(h, a, c)` evaluated with the true context.
pub fn context_payoff(
    policy: &dyn Policy,
    expert: &ExpertPolicy,
    moment: &dyn Moment,
    variant: GameVariant,
    cmdp: &TabularCmdp,
    horizon: usize,
) -> Result<f64> {
    let m = cmdp.with_horizon(horizon)?;
    let na = m.num_actions();
    let mut total = 0.0;
    Enumeration::new(&m).learner(policy).expert(expert).for_each(|node| {
        let s = node.state();
        for c in 0..m.num_contexts() {
            let vals: Vec<f64> = (0..na).map(|a| moment.eval(node.history, a, c)).collect();
            let e_pi: f64 = node.learner_probs.iter().zip(&vals).map(|(p, v)| p * v).sum();
            let e_ex: f64 = expert.probs(s, c).iter().zip(&vals).map(|(p, v)| p * v).sum();
            total += match variant {
                GameVariant::Reward => node.learner_joint[c] * e_pi - node.expert_joint[c] * e_ex,
                GameVariant::OnQ => node.learner_joint[c] * (e_pi - e_ex),
            };
        }
    })?;
    Ok(total / horizon as f64)
}

/// Best-response moment against a fixed policy over the class's extreme
/// points.
pub fn best_response_moment(
    policy: &dyn Policy,
    expert: &ExpertPolicy,
    variant: GameVariant,
    cmdp: &TabularCmdp,
    horizon: usize,
    spec: &ClassSpec<'_>,
) -> Result<MomentResponse> {
    let m = cmdp.with_horizon(horizon)?;
    let tree = Tree::build(&m, expert, horizon)?;
    let tables = Tables::build(&tree, &m, expert, spec, variant);
    let pi = tree.policy_rows(policy);
    let rho = tree.reach(&pi);
    Ok(best_response_from(&tables.generator_payoffs(&tree, &pi, &rho), spec.ball))
}

#[derive(Debug, Clone, Serialize)]
pub struct NashCertificate {
    pub variant: GameVariant,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub iterations: usize,
    /// `max_f U(π̄, f) - min_π U(π, f̄)`.
    pub duality_gap: f64,
    /// `(max_f U(π̄, f), min_π U(π, f̄))`.
    pub best_response_payoffs: (f64, f64),
    /// Time-averaged identifiability residual of the anchor moment under π̄.
    pub residual: f64,
    /// `H` for on-Q classes, 1 otherwise.
    pub value_scale: f64,
    /// `value_scale * (max_f U(π̄, f) + residual)`: bounds the average
    /// imitation gap of π̄ whenever the anchor is `r` or `Q^E / H`.
    pub aig_bound: f64,
    pub measured_aig: f64,
    /// Gap above `certificate_tolerance`.
    pub flagged: bool,
    /// Average moment coefficients `f̄`.
    pub moment_weights: Vec<f64>,
    /// `(iteration, duality gap)`.
    pub gap_trace: Vec<(usize, f64)>,
    /// Largest per-history regret divided by `span_h sqrt(N ln|A|)`.
    pub max_regret_ratio: f64,
    #[serde(skip)]
    pub average_policy: HistoryPolicyTable,
}

impl NashCertificate {
    pub fn gap_trace_csv(&self) -> String {
        let mut out = String::from("iteration,duality_gap\n");
        for (n, g) in &self.gap_trace {
            out.push_str(&format!("{n},{}\n", crate::fmt_g6(*g)));
        }
        out
    }
}

/// Learner best response to fixed coefficients; returns the minimum payoff.
fn min_payoff(tree: &Tree, imm: &[f64], kap: &[f64], konst: f64) -> f64 {
    let na = tree.na;
    let mut v = vec![0.0; tree.len()];
    for node in (0..tree.len()).rev() {
        let mut best = f64::INFINITY;
        for a in 0..na {
            let q = imm[node * na + a] + tree.kids[node * na + a].iter().map(|&k| v[k]).sum::<f64>();
            best = best.min(q);
        }
        v[node] = kap[node] + best;
    }
    tree.roots.iter().map(|&r| v[r]).sum::<f64>() - konst
}

fn average_rows(tree: &Tree, sums: &[f64]) -> Vec<f64> {
    let na = tree.na;
    let mut out = vec![1.0 / na as f64; sums.len()];
    for node in 0..tree.len() {
        let row = &sums[node * na..(node + 1) * na];
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for a in 0..na {
                out[node * na + a] = row[a] / total;
            }
        }
    }
    out
}

fn measured_aig(tree: &Tree, cmdp: &TabularCmdp, expert: &ExpertPolicy, pi: &[f64], rho: &[f64]) -> f64 {
    let (na, nc) = (tree.na, tree.nc);
    let mut gap = 0.0;
    for node in 0..tree.len() {
        let s = tree.histories[node].last_state();
        for c in 0..nc {
            let pe = expert.probs(s, c);
            for a in 0..na {
                let r = cmdp.reward(s, a, c);
                gap += tree.expert[node * nc + c] * pe[a] * r;
                gap -= rho[node] * tree.chance[node * nc + c] * pi[node * na + a] * r;
            }
        }
    }
    gap / tree.horizon as f64
}

/// Solve the game with the default class for the variant.
pub fn solve_game(cmdp: &TabularCmdp, expert: &ExpertPolicy, config: &GameConfig) -> Result<NashCertificate> {
    config.validate()?;
    let m = cmdp.with_horizon(config.horizon)?;
    let spec = ClassSpec::default_for(&m, expert, config.variant)?;
    solve_game_with(&m, expert, config, &spec)
}

/// Solve the game over an explicit class. The CMDP is truncated or
/// extended to `config.horizon`.
pub fn solve_game_with(
    cmdp: &TabularCmdp,
    expert: &ExpertPolicy,
    config: &GameConfig,
    spec: &ClassSpec<'_>,
) -> Result<NashCertificate> {
    config.validate()?;
    if spec.class.is_empty() {
        return Err(Error::InvalidParams("moment class has no generators".into()));
    }
    let cmdp = cmdp.with_horizon(config.horizon)?;
    let tree = Tree::build(&cmdp, expert, config.horizon)?;
    let tables = Tables::build(&tree, &cmdp, expert, spec, config.variant);
    let (na, n_nodes) = (tree.na, tree.len());

    let span = loss_spans(&tree, &tables, spec.ball, config.variant);
    let log_a = (na as f64).ln();

    let mut cum_loss = vec![0.0; n_nodes * na];
    let mut played = vec![0.0; n_nodes];
    let mut avg_sums = vec![0.0; n_nodes * na];
    let mut w_sum = vec![0.0; tables.m];
    let mut pi = vec![0.0; n_nodes * na];
    let mut v = vec![0.0; n_nodes];
    let mut q = vec![0.0; na];
    let mut gap_trace = Vec::new();

    for n in 1..=config.iterations {
        for node in 0..n_nodes {
            let row = &mut pi[node * na..(node + 1) * na];
            let losses = &cum_loss[node * na..(node + 1) * na];
            let eta = if span[node] > 0.0 {
                config.step_scale * (log_a / n as f64).sqrt() / span[node]
            } else {
                0.0
            };
            let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
            let mut z = 0.0;
            for a in 0..na {
                row[a] = (-eta * (losses[a] - min)).exp();
                z += row[a];
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let rho = tree.reach(&pi);
        let response = best_response_from(&tables.generator_payoffs(&tree, &pi, &rho), spec.ball);
        let (imm, kap, _) = tables.combined(&tree, &response.coefficients);
        for node in (0..n_nodes).rev() {
            let mut value = 0.0;
            for a in 0..na {
                q[a] = imm[node * na + a] + tree.kids[node * na + a].iter().map(|&k| v[k]).sum::<f64>();
                value += pi[node * na + a] * q[a];
                cum_loss[node * na + a] += q[a];
                avg_sums[node * na + a] += rho[node] * pi[node * na + a];
            }
            played[node] += value;
            v[node] = kap[node] + value;
        }
        w_sum.iter_mut().zip(&response.coefficients).for_each(|(s, w)| *s += w);

        if n % config.trace_every == 0 || n == config.iterations {
            let (gap, _, _) = certificate_gap(&tree, &tables, spec.ball, &avg_sums, &w_sum, n);
            gap_trace.push((n, gap));
        }
    }

    let n = config.iterations;
    let (gap, upper, lower) = certificate_gap(&tree, &tables, spec.ball, &avg_sums, &w_sum, n);
    let avg = average_rows(&tree, &avg_sums);
    let rho = tree.reach(&avg);
    let residual = tables.anchor_residual(&tree, &avg, &rho, config.variant);
    let aig = measured_aig(&tree, &cmdp, expert, &avg, &rho);
    let max_regret_ratio = (0..n_nodes)
        .filter(|&i| span[i] > 0.0 && log_a > 0.0)
        .map(|i| {
            let best = cum_loss[i * na..(i + 1) * na].iter().copied().fold(f64::INFINITY, f64::min);
            (played[i] - best) / (span[i] * (n as f64 * log_a).sqrt())
        })
        .fold(0.0, f64::max);

    Ok(NashCertificate {
        variant: config.variant,
        horizon: config.horizon,
        iterations: n,
        duality_gap: gap,
        best_response_payoffs: (upper, lower),
        residual,
        value_scale: spec.value_scale,
        aig_bound: spec.value_scale * (upper + residual),
        measured_aig: aig,
        flagged: gap > config.certificate_tolerance,
        moment_weights: w_sum.iter().map(|w| w / n as f64).collect(),
        gap_trace,
        max_regret_ratio,
        average_policy: HistoryPolicyTable::from_rows(na, tree.histories.clone(), avg),
    })
}

/// Static bound on `max_a q(h, a) - min_a q(h, a)` for any policy and any
/// moment in the class, built bottom-up from the generators' values.
fn loss_spans(tree: &Tree, tables: &Tables, ball: Ball, variant: GameVariant) -> Vec<f64> {
    let (na, m, n) = (tree.na, tables.m, tree.len());
    let combine = |xs: &mut dyn Iterator<Item = f64>| match ball {
        Ball::L1 => xs.fold(0.0, f64::max),
        Ball::LInf => xs.sum(),
    };
    // `reach` bounds |V(h)| and `span` the action spread of q(h, ·)
    let mut reach = vec![0.0; n];
    let mut span = vec![0.0; n];
    for node in (0..n).rev() {
        let rows = (0..m).map(|i| &tables.obs[(node * m + i) * na..(node * m + i + 1) * na]);
        let osc = combine(&mut rows.clone().map(|r| {
            let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
            hi - lo
        }));
        let own = match variant {
            GameVariant::OnQ => osc,
            GameVariant::Reward => combine(&mut rows.map(|r| r.iter().fold(0.0, |acc: f64, x| acc.max(x.abs())))),
        };
        let below = (0..na)
            .map(|a| tree.kids[node * na + a].iter().map(|&k| reach[k]).sum::<f64>())
            .fold(0.0, f64::max);
        reach[node] = tables.weight[node] * own + below;
        span[node] = tables.weight[node] * osc + 2.0 * below;
    }
    span
}

fn certificate_gap(
    tree: &Tree,
    tables: &Tables,
    ball: Ball,
    avg_sums: &[f64],
    w_sum: &[f64],
    n: usize,
) -> (f64, f64, f64) {
    let avg = average_rows(tree, avg_sums);
    let rho = tree.reach(&avg);
    let upper = best_response_from(&tables.generator_payoffs(tree, &avg, &rho), ball).payoff;
    let w_bar: Vec<f64> = w_sum.iter().map(|w| w / n as f64).collect();
    let (imm, kap, konst) = tables.combined(tree, &w_bar);
    let lower = min_payoff(tree, &imm, &kap, konst);
    (upper - lower, upper, lower)
}

/// One rung of the horizon ladder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub value_upper: f64,
    pub value_lower: f64,
    pub residual: f64,
    /// `value_scale * (max(value_upper, 0) + residual)`.
    pub minimax_error: f64,
    pub measured_aig: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RealizabilityReport {
    pub rows: Vec<ProbeRow>,
    /// The minimax error never increases along the ladder.
    pub non_increasing: bool,
}

/// Solve the game at each horizon of the ladder and report the certified
/// error on the anchor moment. `class_for` builds the class for the CMDP
/// truncated to each horizon.
pub fn realizability_probe<'a>(
    cmdp: &TabularCmdp,
    expert: &ExpertPolicy,
    class_for: impl Fn(&TabularCmdp) -> Result<ClassSpec<'a>>,
    variant: GameVariant,
    horizons: &[usize],
    iterations: usize,
) -> Result<RealizabilityReport> {
    let mut rows = Vec::new();
    for &horizon in horizons {
        let m = cmdp.with_horizon(horizon)?;
        let spec = class_for(&m)?;
        let config = GameConfig {
            variant,
            iterations,
            horizon,
            ..GameConfig::default()
        };
        let cert = solve_game_with(&m, expert, &config, &spec)?;
        rows.push(ProbeRow {
            horizon,
            value_upper: cert.best_response_payoffs.0,
            value_lower: cert.best_response_payoffs.1,
            residual: cert.residual,
            minimax_error: spec.value_scale * (cert.best_response_payoffs.0.max(0.0) + cert.residual),
            measured_aig: cert.measured_aig,
        });
    }
    let non_increasing = rows.windows(2).all(|w| w[1].minimax_error <= w[0].minimax_error + 1e-9);
    Ok(RealizabilityReport { rows, non_increasing })
}

/// Horizon ladder for the bandit with the singleton identifiability class.
pub fn bandit_corollary_probe(params: &BanditParams, horizons: &[usize], iterations: usize) -> Result<RealizabilityReport> {
    params.validate()?;
    let cmdp = params.as_cmdp();
    let expert = params.expert_policy();
    realizability_probe(
        &cmdp,
        &expert,
        |_| Ok(corollary_class(params)),
        GameVariant::Reward,
        horizons,
        iterations,
    )
}

/// On-policy posterior mixture of expert actions as a history policy.
pub fn dagger_table(cmdp: &TabularCmdp, expert: &ExpertPolicy, horizon: usize) -> Result<HistoryPolicyTable> {
    let m = cmdp.with_horizon(horizon)?;
    let tree = Tree::build(&m, expert, horizon)?;
    let na = tree.na;
    let mut probs = Vec::with_capacity(tree.len() * na);
    for h in &tree.histories {
        let post = cmdp_posterior(&m, expert, FilterMode::OnPolicy, h).normalized();
        let mut row = vec![0.0; na];
        for (c, w) in post.iter().enumerate() {
            for (a, p) in expert.probs(h.last_state(), c).iter().enumerate() {
                row[a] += w * p;
            }
        }
        probs.extend(row);
    }
    Ok(HistoryPolicyTable::from_rows(na, tree.histories.clone(), probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{FixedContextExpert, UniformPolicy};
    use crate::rng::RandomStream;

    fn single_context(seed: u64) -> (TabularCmdp, ExpertPolicy) {
        let mut s = RandomStream::new(seed, &[]);
        let m = TabularCmdp::random(2, 2, 1, 3, &mut s);
        let e = ExpertPolicy::random(&m, &mut s);
        (m, e)
    }

    #[test]
    fn expert_has_zero_payoff_with_one_context() {
        let (m, e) = single_context(3);
        let me = FixedContextExpert { expert: &e, context: 0 };
        for variant in [GameVariant::Reward, GameVariant::OnQ] {
            let spec = ClassSpec::default_for(&m, &e, variant).unwrap();
            let br = best_response_moment(&me, &e, variant, &m, 3, &spec).unwrap();
            assert!(br.payoff.abs() < 1e-12, "{variant:?} {br:?}");
        }
    }

    #[test]
    fn tree_payoffs_match_enumeration() {
        let mut s = RandomStream::new(9, &[]);
        let m = TabularCmdp::random(2, 2, 2, 3, &mut s);
        let e = ExpertPolicy::random(&m, &mut s);
        let pol = crate::cmdp::HashedRandomPolicy { seed: 4, num_actions: 2 };
        for variant in [GameVariant::Reward, GameVariant::OnQ] {
            let spec = ClassSpec::default_for(&m, &e, variant).unwrap();
            let tree = Tree::build(&m, &e, 3).unwrap();
            let tables = Tables::build(&tree, &m, &e, &spec, variant);
            let pi = tree.policy_rows(&pol);
            let rho = tree.reach(&pi);
            let u = tables.generator_payoffs(&tree, &pi, &rho);
            for (i, pair) in spec.class.pairs().iter().enumerate() {
                let lifted = crate::theory::observable_lift(pair.context.as_ref(), &m, &e);
                let direct = payoff(&pol, &e, &lifted, variant, &m, 3).unwrap();
                assert!((u[i] - direct).abs() < 1e-12, "{variant:?} gen {i}: {} vs {direct}", u[i]);
            }
        }
    }

    #[test]
    fn zero_sum_and_zero_moment() {
        let mut s = RandomStream::new(2, &[]);
        let m = TabularCmdp::random(2, 2, 2, 2, &mut s);
        let e = ExpertPolicy::random(&m, &mut s);
        let u = UniformPolicy { num_actions: 2 };
        let f = MomentFunction::indicator(&m, 0, 1, 1);
        let neg = ScaledMoment {
            inner: Box::new(f.clone()),
            factor: -1.0,
        };
        let zero = MomentFunction::constant(&m, 0.0);
        for variant in [GameVariant::Reward, GameVariant::OnQ] {
            let a = payoff(&u, &e, &crate::theory::observable_lift(&f, &m, &e), variant, &m, 2).unwrap();
            let b = payoff(&u, &e, &crate::theory::observable_lift(&neg, &m, &e), variant, &m, 2).unwrap();
            assert_eq!(a, -b);
            let z = payoff(&u, &e, &crate::theory::observable_lift(&zero, &m, &e), variant, &m, 2).unwrap();
            assert_eq!(z, 0.0);
        }
    }

    #[test]
    fn dagger_mixture_realizes_on_q() {
        let mut s = RandomStream::new(5, &[]);
        let m = TabularCmdp::random(2, 2, 2, 3, &mut s);
        let e = ExpertPolicy::random(&m, &mut s);
        let spec = ClassSpec::default_for(&m, &e, GameVariant::OnQ).unwrap();
        let table = dagger_table(&m, &e, 3).unwrap();
        let br = best_response_moment(&table, &e, GameVariant::OnQ, &m, 3, &spec).unwrap();
        assert!(br.payoff.abs() < 1e-12, "{br:?}");
    }

    #[test]
    fn solver_closes_gap_on_single_context() {
        let (m, e) = single_context(11);
        let cfg = GameConfig {
            horizon: 3,
            ..GameConfig::default()
        };
        let cert = solve_game(&m, &e, &cfg).unwrap();
        assert!(cert.duality_gap < DEFAULT_TOLERANCE, "{}", cert.duality_gap);
        assert!(cert.duality_gap >= -1e-9);
        assert!(!cert.flagged);
        assert!(cert.max_regret_ratio <= 1.0);
        for (_, row) in cert.average_policy.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn config_rejects_zero_iterations() {
        let cfg = GameConfig {
            iterations: 0,
            ..GameConfig::default()
        };
        assert!(cfg.validate().is_err());
        let parsed: std::result::Result<GameConfig, _> = serde_json::from_str(r#"{"iters": 3}"#);
        assert!(parsed.is_err());
    }
}
