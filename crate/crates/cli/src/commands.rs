//! Subcommand configs and their runs. Every run is a pure function of its
//! resolved config, returning artifacts and the text to print.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use latchlab::cmdp::HashedRandomPolicy;
use latchlab::momentgame::{self, GameConfig, GameVariant};
use latchlab::sweeps::{self, emit_grid, GridFormat, SweepConfig};
use latchlab::theory;
use latchlab::{fmt_g6, BanditParams, ExpertPolicy, FilterMode, RandomStream, TabularCmdp};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{sha256_hex, CliError};

#[derive(Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<(String, Vec<u8>)>,
    pub stdout: String,
    pub inputs: BTreeMap<String, String>,
    /// Set when the run completed but a check failed (exit 1).
    pub failure: Option<String>,
}

impl Outcome {
    fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.artifacts.push((name.to_string(), bytes.into()));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeSelection {
    On,
    Off,
    #[default]
    Both,
}

impl ModeSelection {
    pub fn modes(self) -> Vec<FilterMode> {
        match self {
            ModeSelection::On => vec![FilterMode::OnPolicy],
            ModeSelection::Off => vec![FilterMode::OffPolicy],
            ModeSelection::Both => FilterMode::BOTH.to_vec(),
        }
    }

    pub fn modes_value(self) -> Value {
        Value::from(self.modes().iter().map(|m| m.short_name()).collect::<Vec<_>>())
    }
}

// ---------------------------------------------------------------------------

pub fn run_sweep(config: &SweepConfig, svg: bool) -> Result<Outcome, CliError> {
    config.validate()?;
    let cells = sweeps::run_sweep(config)?;
    let mut out = Outcome::default();
    for &mode in &config.modes {
        let mine = sweeps::cells_for(&cells, mode);
        let name = mode.short_name();
        out.add(&format!("sweep_{name}.csv"), emit_grid(&mine, GridFormat::Csv)?);
        out.add(&format!("grid_{name}.pgm"), emit_grid(&mine, GridFormat::Pgm)?);
        if svg {
            out.add(&format!("grid_{name}.svg"), emit_grid(&mine, GridFormat::Svg)?);
        }
        let consistent = mine.iter().filter(|c| c.consistent).count();
        let flagged: usize = mine.iter().map(|c| c.degenerate_flag_count).sum();
        writeln!(
            out.stdout,
            "{name}-policy: {consistent}/{} cells consistent, {flagged} degenerate episodes",
            mine.len()
        )
        .unwrap();
    }
    Ok(out)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BanditRunConfig {
    #[serde(rename = "K")]
    pub num_arms: usize,
    pub eps_obs: f64,
    pub eps_exp: f64,
    /// Number of pulls.
    #[serde(rename = "T")]
    pub steps: usize,
    pub mode: ModeSelection,
    pub base_seed: u64,
}

impl Default for BanditRunConfig {
    fn default() -> Self {
        Self {
            num_arms: 5,
            eps_obs: 0.3,
            eps_exp: 0.05,
            steps: 2000,
            mode: ModeSelection::Both,
            base_seed: 0,
        }
    }
}

impl BanditRunConfig {
    pub fn params(&self) -> latchlab::Result<BanditParams> {
        BanditParams::new(self.num_arms, self.eps_obs, self.eps_exp, self.steps)
    }
}

pub fn run_bandit(config: &BanditRunConfig) -> Result<Outcome, CliError> {
    let params = config.params()?;
    let trace = sweeps::paired_bandit_run(&params, config.steps, &RandomStream::new(config.base_seed, &[]));
    let mut out = Outcome::default();
    writeln!(out.stdout, "context: {}", trace.context).unwrap();
    for mode in config.mode.modes() {
        let name = mode.short_name();
        out.add(&format!("trace_{name}.csv"), trace.csv(mode));
        let (_, success) = trace.rows(mode);
        writeln!(
            out.stdout,
            "{name}-policy: final success {}, argmax constant: {}",
            fmt_g6(success.last().copied().unwrap_or(0.0)),
            trace.argmax_constant(mode)
        )
        .unwrap();
    }
    Ok(out)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliffConfig {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub simulate: bool,
    pub trials: usize,
    pub base_seed: u64,
}

impl Default for CliffConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            simulate: false,
            trials: 10_000,
            base_seed: 0,
        }
    }
}

impl CliffConfig {
    pub fn validate(&self) -> latchlab::Result<()> {
        if self.horizon == 0 {
            return Err(latchlab::Error::InvalidParams("T must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(latchlab::Error::InvalidParams("trials must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn run_cliff(config: &CliffConfig) -> Result<Outcome, CliError> {
    config.validate()?;
    let t = config.horizon;
    let formula = theory::cliff_gap_formula(t);
    let exact = theory::cliff_exact(t);
    let mut out = Outcome::default();
    writeln!(out.stdout, "formula: {} ({formula})", fmt_g6(theory::rational_to_f64(&formula))).unwrap();
    writeln!(out.stdout, "exact_aig: {}", fmt_g6(exact.aig)).unwrap();
    let mut summary = String::from("T,formula,exact_aig");
    let mut values = format!("{t},{},{}", fmt_g6(theory::rational_to_f64(&formula)), fmt_g6(exact.aig));
    if config.simulate {
        let sim = theory::cliff_simulate(t, config.trials, &RandomStream::new(config.base_seed, &[]));
        writeln!(
            out.stdout,
            "simulated_aig: {} (std error {}, {} trials)",
            fmt_g6(sim.aig.mean),
            fmt_g6(sim.aig.std_error),
            config.trials
        )
        .unwrap();
        summary.push_str(",simulated_aig,std_error,trials");
        write!(values, ",{},{},{}", fmt_g6(sim.aig.mean), fmt_g6(sim.aig.std_error), config.trials).unwrap();
        let mut csv = String::from("t,eps_off,eps_off_exact,scaled\n");
        for (i, e) in sim.eps_off.iter().enumerate() {
            writeln!(
                csv,
                "{},{},{},{}",
                i + 1,
                fmt_g6(*e),
                fmt_g6(exact.eps_off[i]),
                fmt_g6(e * (i as f64 + 2.0))
            )
            .unwrap();
        }
        out.stdout.push_str(&csv);
        out.add("eps_off.csv", csv);
    }
    out.add("cliff.csv", format!("{summary}\n{values}\n"));
    Ok(out)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub instances: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub max_contexts: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub base_seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            max_states: 3,
            max_actions: 2,
            max_contexts: 2,
            horizon: 3,
            base_seed: 0,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> latchlab::Result<()> {
        let bad = |m: &str| Err(latchlab::Error::InvalidParams(m.into()));
        if self.instances == 0 {
            return bad("instances must be at least 1");
        }
        if self.max_states == 0 || self.max_actions == 0 || self.max_contexts == 0 {
            return bad("max_states, max_actions and max_contexts must be positive");
        }
        if self.horizon == 0 {
            return bad("T must be at least 1");
        }
        Ok(())
    }
}

/// Random instance `i` of the verification suite.
pub fn verify_instance(config: &VerifyConfig, i: usize) -> (TabularCmdp, ExpertPolicy, HashedRandomPolicy) {
    let mut s = RandomStream::new(config.base_seed, &[i as u64]);
    let ns = 1 + s.below(config.max_states);
    let na = 1 + s.below(config.max_actions);
    let nc = 1 + s.below(config.max_contexts);
    let cmdp = TabularCmdp::random(ns, na, nc, config.horizon, &mut s);
    let expert = ExpertPolicy::random(&cmdp, &mut s);
    let policy = HashedRandomPolicy {
        seed: s.next_word(),
        num_actions: na,
    };
    (cmdp, expert, policy)
}

pub fn run_verify(config: &VerifyConfig) -> Result<Outcome, CliError> {
    config.validate()?;
    let mut csv = String::from("instance,S,A,C,T,gap,reward_bound,on_q_bound,off_q_bound,min_slack,status\n");
    let mut violations = Vec::new();
    for i in 0..config.instances {
        let (cmdp, expert, policy) = verify_instance(config, i);
        let dims = format!(
            "{i},{},{},{},{}",
            cmdp.num_states(),
            cmdp.num_actions(),
            cmdp.num_contexts(),
            config.horizon
        );
        match theory::theorem1_check(&cmdp, &expert, &policy, config.horizon) {
            Ok(r) => writeln!(
                csv,
                "{dims},{},{},{},{},{},ok",
                fmt_g6(r.gap),
                fmt_g6(r.reward_bound),
                fmt_g6(r.on_q_bound),
                fmt_g6(r.off_q_bound),
                fmt_g6(r.min_slack())
            )
            .unwrap(),
            Err(latchlab::Error::BoundViolated { bound, slack }) => {
                writeln!(csv, "{dims},,,,,{},violated: {bound}", fmt_g6(slack)).unwrap();
                violations.push(format!("instance {i}: {bound} violated by {}", fmt_g6(-slack)));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mut out = Outcome::default();
    writeln!(
        out.stdout,
        "{} instances, {} violations",
        config.instances,
        violations.len()
    )
    .unwrap();
    for v in &violations {
        writeln!(out.stdout, "{v}").unwrap();
    }
    out.add("theorem1.csv", csv);
    if !violations.is_empty() {
        out.failure = Some(format!("{} bound violations", violations.len()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentGameRun {
    /// CMDP document; the bandit below is used when absent.
    pub cmdp: Option<String>,
    /// Expert document `{"probs": [s][c][a]}`; defaults to the reward-greedy
    /// expert for a CMDP file.
    pub expert: Option<String>,
    #[serde(rename = "K")]
    pub num_arms: usize,
    pub eps_obs: f64,
    pub eps_exp: f64,
    pub variant: GameVariant,
    pub iterations: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub step_scale: f64,
    pub certificate_tolerance: f64,
    pub trace_every: usize,
    pub base_seed: u64,
}

impl Default for MomentGameRun {
    fn default() -> Self {
        let g = GameConfig::default();
        Self {
            cmdp: None,
            expert: None,
            num_arms: 2,
            eps_obs: 0.2,
            eps_exp: 0.3,
            variant: g.variant,
            iterations: g.iterations,
            horizon: 2,
            step_scale: g.step_scale,
            certificate_tolerance: g.certificate_tolerance,
            trace_every: g.trace_every,
            base_seed: 0,
        }
    }
}

impl MomentGameRun {
    pub fn game(&self) -> GameConfig {
        GameConfig {
            variant: self.variant,
            iterations: self.iterations,
            step_scale: self.step_scale,
            horizon: self.horizon,
            certificate_tolerance: self.certificate_tolerance,
            trace_every: self.trace_every,
        }
    }

    pub fn validate(&self) -> latchlab::Result<()> {
        self.game().validate()?;
        if self.cmdp.is_none() {
            BanditParams::new(self.num_arms, self.eps_obs, self.eps_exp, self.horizon)?;
        }
        if self.expert.is_some() && self.cmdp.is_none() {
            return Err(latchlab::Error::InvalidParams("expert requires cmdp".into()));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertDocument {
    probs: Vec<Vec<Vec<f64>>>,
}

fn read_input(path: &str, out: &mut Outcome) -> Result<String, CliError> {
    let text = std::fs::read_to_string(Path::new(path))
        .map_err(|e| CliError::validation(format!("cannot read {path}: {e}")))?;
    out.inputs.insert(path.to_string(), sha256_hex(text.as_bytes()));
    Ok(text)
}

fn load_expert(text: &str, path: &str, cmdp: &TabularCmdp) -> Result<ExpertPolicy, CliError> {
    let doc: ExpertDocument =
        serde_json::from_str(text).map_err(|e| CliError::validation(format!("{path}:{}: {e}", e.line())))?;
    let (ns, nc, na) = (cmdp.num_states(), cmdp.num_contexts(), cmdp.num_actions());
    let flat: Vec<f64> = doc.probs.iter().flatten().flatten().copied().collect();
    let shaped = doc.probs.len() == ns
        && doc.probs.iter().all(|r| r.len() == nc && r.iter().all(|x| x.len() == na));
    if !shaped {
        return Err(CliError::validation(format!("{path}: probs must have shape [{ns}][{nc}][{na}]")));
    }
    ExpertPolicy::new(ns, nc, na, flat).map_err(|e| CliError::validation(format!("{path}: {e}")))
}

/// Deterministic expert taking the highest-reward action (lowest index on
/// ties).
pub fn greedy_expert(cmdp: &TabularCmdp) -> ExpertPolicy {
    let na = cmdp.num_actions();
    ExpertPolicy::from_fn(cmdp.num_states(), cmdp.num_contexts(), na, |s, c| {
        let mut best = 0;
        for a in 1..na {
            if cmdp.reward(s, a, c) > cmdp.reward(s, best, c) {
                best = a;
            }
        }
        (0..na).map(|a| f64::from(u8::from(a == best))).collect()
    })
    .expect("one-hot rows")
}

fn g6(x: f64) -> Value {
    fmt_g6(x)
        .parse::<f64>()
        .ok()
        .and_then(serde_json::Number::from_f64)
        .map_or(Value::Null, Value::Number)
}

pub fn run_moment_game(config: &MomentGameRun) -> Result<Outcome, CliError> {
    config.validate()?;
    let mut out = Outcome::default();
    let (cmdp, expert) = match &config.cmdp {
        Some(path) => {
            let text = read_input(path, &mut out)?;
            let cmdp = TabularCmdp::from_json_str(&text).map_err(|e| CliError::validation(format!("{path}: {e}")))?;
            let expert = match &config.expert {
                Some(epath) => {
                    let etext = read_input(epath, &mut out)?;
                    load_expert(&etext, epath, &cmdp)?
                }
                None => greedy_expert(&cmdp),
            };
            (cmdp, expert)
        }
        None => {
            let p = BanditParams::new(config.num_arms, config.eps_obs, config.eps_exp, config.horizon)?;
            (p.as_cmdp(), p.expert_policy())
        }
    };
    let cert = momentgame::solve_game(&cmdp, &expert, &config.game())?;
    let summary = serde_json::json!({
        "variant": cert.variant.name(),
        "T": cert.horizon,
        "iterations": cert.iterations,
        "duality_gap": g6(cert.duality_gap),
        "best_response_payoffs": [g6(cert.best_response_payoffs.0), g6(cert.best_response_payoffs.1)],
        "residual": g6(cert.residual),
        "value_scale": g6(cert.value_scale),
        "aig_bound": g6(cert.aig_bound),
        "measured_aig": g6(cert.measured_aig),
        "flagged": cert.flagged,
        "max_regret_ratio": g6(cert.max_regret_ratio),
        "moment_weights": cert.moment_weights.iter().map(|w| g6(*w)).collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&summary).expect("plain JSON") + "\n";
    out.stdout.push_str(&text);
    out.add("certificate.json", text);
    out.add("gap_trace.csv", cert.gap_trace_csv());
    out.add("policy.csv", cert.average_policy.to_csv());
    Ok(out)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RealizabilityConfig {
    #[serde(rename = "K")]
    pub num_arms: usize,
    pub eps_obs: f64,
    pub eps_exp: f64,
    pub horizons: Vec<usize>,
    pub iterations: usize,
    pub base_seed: u64,
}

impl Default for RealizabilityConfig {
    fn default() -> Self {
        Self {
            num_arms: 2,
            eps_obs: 0.2,
            eps_exp: 0.3,
            horizons: vec![1, 2, 4, 8],
            iterations: 500,
            base_seed: 0,
        }
    }
}

impl RealizabilityConfig {
    pub fn validate(&self) -> latchlab::Result<()> {
        let max = self.horizons.iter().copied().max().unwrap_or(0);
        BanditParams::new(self.num_arms, self.eps_obs, self.eps_exp, max.max(1))?;
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(latchlab::Error::InvalidParams("horizons must be non-empty and positive".into()));
        }
        if self.iterations == 0 {
            return Err(latchlab::Error::InvalidParams("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn run_realizability(config: &RealizabilityConfig) -> Result<Outcome, CliError> {
    config.validate()?;
    let max = *config.horizons.iter().max().expect("validated");
    let params = BanditParams::new(config.num_arms, config.eps_obs, config.eps_exp, max)?;
    let report = momentgame::bandit_corollary_probe(&params, &config.horizons, config.iterations)?;
    let mut csv = String::from("T,value_upper,value_lower,residual,minimax_error,measured_aig\n");
    for r in &report.rows {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.horizon,
            fmt_g6(r.value_upper),
            fmt_g6(r.value_lower),
            fmt_g6(r.residual),
            fmt_g6(r.minimax_error),
            fmt_g6(r.measured_aig)
        )
        .unwrap();
    }
    let mut out = Outcome::default();
    out.stdout.push_str(&csv);
    writeln!(out.stdout, "non_increasing: {}", report.non_increasing).unwrap();
    out.add("realizability.csv", csv);
    Ok(out)
}

/// Re-run a subcommand from its resolved config.
pub fn execute(subcommand: &str, config: &Value) -> Result<Outcome, CliError> {
    fn typed<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T, CliError> {
        serde_json::from_value(v.clone()).map_err(|e| CliError::validation(format!("manifest config: {e}")))
    }
    match subcommand {
        "sweep" => {
            let mut v = config.clone();
            let svg = v
                .as_object_mut()
                .and_then(|m| m.remove("svg"))
                .and_then(|s| s.as_bool())
                .unwrap_or(false);
            run_sweep(&typed(&v)?, svg)
        }
        "bandit-run" => run_bandit(&typed(config)?),
        "cliff" => run_cliff(&typed(config)?),
        "verify-theorems" => run_verify(&typed(config)?),
        "moment-game" => run_moment_game(&typed(config)?),
        "realizability" => run_realizability(&typed(config)?),
        other => Err(CliError::validation(format!("unknown subcommand '{other}' in manifest"))),
    }
}
