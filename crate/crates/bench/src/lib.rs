//! Fixtures shared by the benchmarks.

use latchlab::{BanditParams, ExpertPolicy, RandomStream, TabularCmdp};

pub fn bandit(num_arms: usize, horizon: usize) -> BanditParams {
    BanditParams::new(num_arms, 0.3, 0.05, horizon).expect("valid bandit")
}

/// Random tabular instance with a random expert, fixed by `seed`.
pub fn instance(states: usize, actions: usize, contexts: usize, horizon: usize, seed: u64) -> (TabularCmdp, ExpertPolicy) {
    let mut stream = RandomStream::new(seed, &[]);
    let cmdp = TabularCmdp::random(states, actions, contexts, horizon, &mut stream);
    let expert = ExpertPolicy::random(&cmdp, &mut stream);
    (cmdp, expert)
}
