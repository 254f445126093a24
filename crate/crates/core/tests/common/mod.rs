//! Brute-force trajectory enumeration used as an independent oracle.
#![allow(dead_code)]

use latchlab::cmdp::{History, Policy};
use latchlab::{ExpertPolicy, TabularCmdp};

/// One full episode with its probability.
pub struct Path {
    pub context: usize,
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub weight: f64,
}

impl Path {
    /// `h_t` for `t = 1..=T`.
    pub fn history(&self, t: usize) -> History {
        History::from_parts(self.states[..t].to_vec(), self.actions[..t - 1].to_vec()).unwrap()
    }
}

pub enum Actor<'a> {
    Learner(&'a dyn Policy),
    Expert(&'a ExpertPolicy),
}

impl Actor<'_> {
    fn probs(&self, states: &[usize], actions: &[usize], context: usize) -> Vec<f64> {
        match self {
            Actor::Learner(p) => {
                p.action_probs(&History::from_parts(states.to_vec(), actions.to_vec()).unwrap())
            }
            Actor::Expert(e) => e.probs(*states.last().unwrap(), context).to_vec(),
        }
    }
}

/// Every episode of positive probability, by depth-first expansion.
pub fn paths(cmdp: &TabularCmdp, actor: &Actor<'_>) -> Vec<Path> {
    let mut out = Vec::new();
    for c in 0..cmdp.num_contexts() {
        for s in 0..cmdp.num_states() {
            let w = cmdp.context_prior()[c] * cmdp.initial_state_dist()[s];
            if w > 0.0 {
                expand(cmdp, actor, c, vec![s], vec![], w, &mut out);
            }
        }
    }
    out
}

fn expand(
    cmdp: &TabularCmdp,
    actor: &Actor<'_>,
    c: usize,
    states: Vec<usize>,
    actions: Vec<usize>,
    w: f64,
    out: &mut Vec<Path>,
) {
    let probs = actor.probs(&states, &actions, c);
    let s = *states.last().unwrap();
    for (a, p) in probs.iter().enumerate() {
        if *p == 0.0 {
            continue;
        }
        let mut acts = actions.clone();
        acts.push(a);
        if states.len() == cmdp.horizon() {
            out.push(Path {
                context: c,
                states: states.clone(),
                actions: acts,
                weight: w * p,
            });
            continue;
        }
        for (s2, q) in cmdp.transition(s, a, c).iter().enumerate() {
            if *q > 0.0 {
                let mut st = states.clone();
                st.push(s2);
                expand(cmdp, actor, c, st, acts.clone(), w * p * q, out);
            }
        }
    }
}

pub fn value(cmdp: &TabularCmdp, paths: &[Path]) -> f64 {
    paths
        .iter()
        .map(|p| {
            p.weight
                * (0..p.actions.len())
                    .map(|t| cmdp.reward(p.states[t], p.actions[t], p.context))
                    .sum::<f64>()
        })
        .sum()
}

/// On-policy posterior `p(c | h)`: chance factors only.
pub fn posterior(cmdp: &TabularCmdp, h: &History) -> Vec<f64> {
    let states = h.states();
    let mut w: Vec<f64> = (0..cmdp.num_contexts())
        .map(|c| {
            let mut x = cmdp.context_prior()[c] * cmdp.initial_state_dist()[states[0]];
            for (i, &a) in h.actions().iter().enumerate() {
                x *= cmdp.transition(states[i], a, c)[states[i + 1]];
            }
            x
        })
        .collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
    w
}
