//! Simulation laboratory for imitation learning under hidden contexts.
//!
//! The crate covers exact Bayesian history filters for the causal bandit,
//! the phase-transition sweep that separates on-policy from off-policy
//! learners, tabular contextual MDPs with exact evaluation, numerical checks
//! of the moment-matching value bounds, and a no-regret solver for the
//! moment-matching game over history policies.
//!
//! Module map:
//!
//! - [`rng`]: counter-based random streams keyed by `(seed, path)`
//! - [`cmdp`]: contextual MDPs, histories, policies, rollouts, exact DP
//! - [`bandit`]: the causal bandit and its CMDP encoding
//! - [`filters`]: on-/off-policy posteriors and the BC/DAgger learners
//! - [`sweeps`]: the `(eps_exp, eps_obs)` grid experiment and its artifacts
//! - [`theory`]: moment classes, error series, value-bound checks, Cliff,
//!   the bandit identifiability moment
//! - [`momentgame`]: moment-matching game solver with equilibrium certificates

pub mod bandit;
pub mod cmdp;
pub mod error;
pub mod filters;
pub mod momentgame;
pub mod rng;
pub mod sweeps;
pub mod theory;

pub use bandit::{BanditHistory, BanditParams, Feedback};
pub use cmdp::{
    aig, expected_return, expected_return_expert, q_and_value, rollout, Estimate, ExpertPolicy, History, Policy,
    TabularCmdp, Trajectory,
};
pub use error::{Error, Result};
pub use filters::{FilterMode, Posterior};
pub use rng::RandomStream;

/// Format a float with six significant digits, `%g` style.
pub fn fmt_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::fmt_g6;

    #[test]
    fn g6_formatting() {
        assert_eq!(fmt_g6(0.74), "0.74");
        assert_eq!(fmt_g6(4.0 / 9.0), "0.444444");
        assert_eq!(fmt_g6(1.0), "1");
        assert_eq!(fmt_g6(-0.05), "-0.05");
        assert_eq!(fmt_g6(123456.7), "123457");
        assert_eq!(fmt_g6(1234567.0), "1.23457e+06");
        assert_eq!(fmt_g6(0.00001234), "1.234e-05");
        assert_eq!(fmt_g6(0.9999999), "1");
        assert_eq!(fmt_g6(f64::INFINITY), "inf");
    }
}
