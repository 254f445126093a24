//! The `(eps_exp, eps_obs)` phase-transition experiment: run the filter
//! learners for `T` steps on many trials per grid cell, score the final
//! correct-arm probability, and classify each cell against the expert.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::BanditParams;
use crate::error::{Error, Result};
use crate::filters::{trace_csv, BanditFilter, FilterMode, TraceRow};
use crate::fmt_g6;
use crate::rng::RandomStream;

/// Consistency threshold rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdRule {
    /// `success >= (1 - eps_exp) - margin`
    #[default]
    ExpertMatching,
    /// `success >= eps_exp - margin`, as the experiment text literally reads.
    Literal,
}

fn default_eps_exp_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 * 0.05).collect()
}

fn default_eps_obs_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.1).collect()
}

fn default_modes() -> Vec<FilterMode> {
    FilterMode::BOTH.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(rename = "K", default = "SweepConfig::default_k")]
    pub num_arms: usize,
    #[serde(rename = "T", default = "SweepConfig::default_t")]
    pub horizon: usize,
    #[serde(default = "SweepConfig::default_trials")]
    pub trials: usize,
    #[serde(default = "default_eps_exp_grid")]
    pub eps_exp_grid: Vec<f64>,
    #[serde(default = "default_eps_obs_grid")]
    pub eps_obs_grid: Vec<f64>,
    #[serde(default = "SweepConfig::default_margin")]
    pub margin: f64,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_modes")]
    pub modes: Vec<FilterMode>,
    #[serde(default)]
    pub rule: ThresholdRule,
}

impl Default for SweepConfig {
    /// 9 x 11 grid, K = 5, T = 2000, 100 trials.
    fn default() -> Self {
        Self {
            num_arms: Self::default_k(),
            horizon: Self::default_t(),
            trials: Self::default_trials(),
            eps_exp_grid: default_eps_exp_grid(),
            eps_obs_grid: default_eps_obs_grid(),
            margin: Self::default_margin(),
            base_seed: 0,
            modes: default_modes(),
            rule: ThresholdRule::default(),
        }
    }
}

impl SweepConfig {
    fn default_k() -> usize {
        5
    }
    fn default_t() -> usize {
        2000
    }
    fn default_trials() -> usize {
        100
    }
    fn default_margin() -> f64 {
        0.12
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidParams("trials must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.margin) {
            return Err(Error::InvalidParams(format!("margin {} outside [0, 1]", self.margin)));
        }
        for (name, grid) in [("eps_exp_grid", &self.eps_exp_grid), ("eps_obs_grid", &self.eps_obs_grid)] {
            if grid.is_empty() {
                return Err(Error::InvalidParams(format!("{name} is empty")));
            }
            if grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidParams(format!("{name} has values outside [0, 1]")));
            }
            if grid.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidParams(format!("{name} must be strictly increasing")));
            }
        }
        if self.modes.is_empty() {
            return Err(Error::InvalidParams("no filter modes selected".into()));
        }
        self.params(0, 0)?;
        Ok(())
    }

    /// Bandit parameters of cell `(i, j)`: `i` indexes `eps_exp_grid`, `j`
    /// indexes `eps_obs_grid`.
    pub fn params(&self, i: usize, j: usize) -> Result<BanditParams> {
        BanditParams::new(self.num_arms, self.eps_obs_grid[j], self.eps_exp_grid[i], self.horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub eps_exp: f64,
    pub eps_obs: f64,
    pub mode: FilterMode,
    /// Mean over trials of the final policy's mass on the correct arm.
    pub success_prob: f64,
    pub std_error: f64,
    pub consistent: bool,
    /// Trials in which the posterior collapsed and had to be reset.
    pub degenerate_flag_count: usize,
}

/// Result of one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub success_prob: f64,
    pub degenerate: bool,
}

/// Run one episode of the filter learner with exploration noise and return
/// the final policy's probability on the correct arm.
pub fn run_trial(params: &BanditParams, mode: FilterMode, stream: &mut RandomStream) -> TrialOutcome {
    let context = stream.below(params.num_arms);
    let mut filter = BanditFilter::new(*params, mode);
    for _ in 0..params.horizon {
        let intended = stream.categorical(&filter.action_probs());
        let (executed, fb) = params.step(context, intended, stream);
        filter.observe(executed, fb);
    }
    TrialOutcome {
        success_prob: filter.action_probs()[context],
        degenerate: filter.posterior().is_flagged(),
    }
}

/// Stream for a trial: path `(mode, i, j, trial)` under the base seed.
pub fn trial_stream(base_seed: u64, mode: FilterMode, i: usize, j: usize, trial: usize) -> RandomStream {
    RandomStream::new(base_seed, &[mode.index(), i as u64, j as u64, trial as u64])
}

pub fn run_cell(config: &SweepConfig, i: usize, j: usize, mode: FilterMode) -> Result<SweepCell> {
    let params = config.params(i, j)?;
    let outcomes: Vec<TrialOutcome> = (0..config.trials)
        .into_par_iter()
        .map(|trial| run_trial(&params, mode, &mut trial_stream(config.base_seed, mode, i, j, trial)))
        .collect();
    let xs: Vec<f64> = outcomes.iter().map(|o| o.success_prob).collect();
    let est = crate::cmdp::Estimate::from_samples(&xs);
    Ok(SweepCell {
        eps_exp: params.eps_exp,
        eps_obs: params.eps_obs,
        mode,
        success_prob: est.mean,
        std_error: est.std_error,
        consistent: classify_consistent(est.mean, params.eps_exp, config.margin, config.rule),
        degenerate_flag_count: outcomes.iter().filter(|o| o.degenerate).count(),
    })
}

/// Closed boundary: a success probability exactly at the threshold counts as
/// consistent.
pub fn classify_consistent(success_prob: f64, eps_exp: f64, margin: f64, rule: ThresholdRule) -> bool {
    let threshold = match rule {
        ThresholdRule::ExpertMatching => (1.0 - eps_exp) - margin,
        ThresholdRule::Literal => eps_exp - margin,
    };
    success_prob >= threshold
}

/// All cells for every configured mode, ordered by mode, then `eps_exp`,
/// then `eps_obs`.
pub fn run_sweep(config: &SweepConfig) -> Result<Vec<SweepCell>> {
    config.validate()?;
    let mut jobs = Vec::new();
    for &mode in &config.modes {
        for i in 0..config.eps_exp_grid.len() {
            for j in 0..config.eps_obs_grid.len() {
                jobs.push((mode, i, j));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(mode, i, j)| run_cell(config, i, j, mode))
        .collect()
}

/// Single-episode traces of both filter learners driven by the same
/// exogenous randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTrace {
    pub context: usize,
    pub on: Vec<TraceRow>,
    pub off: Vec<TraceRow>,
    /// Probability on the correct arm after each step.
    pub on_success: Vec<f64>,
    pub off_success: Vec<f64>,
}

impl PairedTrace {
    pub fn rows(&self, mode: FilterMode) -> (&[TraceRow], &[f64]) {
        match mode {
            FilterMode::OnPolicy => (&self.on, &self.on_success),
            FilterMode::OffPolicy => (&self.off, &self.off_success),
        }
    }

    /// The posterior argmax never changes over the episode.
    pub fn argmax_constant(&self, mode: FilterMode) -> bool {
        let (rows, _) = self.rows(mode);
        let first = rows.first().map(|r| crate::filters::argmax(&r.posterior));
        rows.iter().all(|r| Some(crate::filters::argmax(&r.posterior)) == first)
    }

    /// Trace CSV for one mode with a trailing `success_prob` column.
    pub fn csv(&self, mode: FilterMode) -> String {
        let (rows, success) = self.rows(mode);
        let base = trace_csv(self.on.first().map_or(0, |r| r.posterior.len()), rows);
        let mut out = String::with_capacity(base.len() + rows.len() * 10);
        for (i, line) in base.lines().enumerate() {
            out.push_str(line);
            if i == 0 {
                out.push_str(",success_prob");
            } else {
                out.push(',');
                out.push_str(&fmt_g6(success[i - 1]));
            }
            out.push('\n');
        }
        out
    }
}

/// Run both filter learners for `steps` pulls. The context comes from
/// `stream.child(0)`; step `t` of either learner draws from a fresh copy of
/// `stream.child(1).child(t)`, so both see the same uniforms.
pub fn paired_bandit_run(params: &BanditParams, steps: usize, stream: &RandomStream) -> PairedTrace {
    let k = params.num_arms;
    let context = stream.child(0).below(k);
    let steps_root = stream.child(1);
    let run = |mode: FilterMode| {
        let mut filter = BanditFilter::new(*params, mode);
        let mut rows = Vec::with_capacity(steps);
        let mut success = Vec::with_capacity(steps);
        for t in 1..=steps {
            let mut s = steps_root.child(t as u64);
            let intended = s.categorical(&filter.action_probs());
            let (executed, fb) = params.step(context, intended, &mut s);
            filter.observe(executed, fb);
            rows.push(TraceRow {
                t,
                posterior: filter.posterior().normalized(),
                intended_arm: intended,
                executed_arm: executed,
                feedback: fb,
            });
            success.push(filter.action_probs()[context]);
        }
        (rows, success)
    };
    let (on, on_success) = run(FilterMode::OnPolicy);
    let (off, off_success) = run(FilterMode::OffPolicy);
    PairedTrace {
        context,
        on,
        off,
        on_success,
        off_success,
    }
}

/// Cells belonging to one mode.
pub fn cells_for(cells: &[SweepCell], mode: FilterMode) -> Vec<SweepCell> {
    cells.iter().filter(|c| c.mode == mode).cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridFormat {
    Csv,
    Pgm,
    Svg,
}

/// Render single-mode cells as CSV, plain PGM, or an SVG dot grid.
pub fn emit_grid(cells: &[SweepCell], format: GridFormat) -> Result<Vec<u8>> {
    if let Some(first) = cells.first() {
        if cells.iter().any(|c| c.mode != first.mode) {
            return Err(Error::MixedModes);
        }
    }
    let text = match format {
        GridFormat::Csv => emit_csv(cells),
        GridFormat::Pgm => emit_pgm(cells)?,
        GridFormat::Svg => emit_svg(cells)?,
    };
    Ok(text.into_bytes())
}

fn emit_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("mode,eps_exp,eps_obs,success_prob,consistent,degenerate_flags\n");
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.mode.short_name(),
            fmt_g6(c.eps_exp),
            fmt_g6(c.eps_obs),
            fmt_g6(c.success_prob),
            c.consistent,
            c.degenerate_flag_count
        )
        .unwrap();
    }
    out
}

fn sorted_unique(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs
}

/// Grid layout: rows are `eps_obs` ascending, columns `eps_exp` ascending.
fn grid_layout(cells: &[SweepCell]) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<&SweepCell>>)> {
    let cols = sorted_unique(cells.iter().map(|c| c.eps_exp).collect());
    let rows = sorted_unique(cells.iter().map(|c| c.eps_obs).collect());
    let mut grid = Vec::with_capacity(rows.len());
    for &obs in &rows {
        let mut row = Vec::with_capacity(cols.len());
        for &exp in &cols {
            let cell = cells
                .iter()
                .find(|c| c.eps_obs == obs && c.eps_exp == exp)
                .ok_or_else(|| {
                    Error::InvalidParams(format!("grid is missing cell eps_exp={exp}, eps_obs={obs}"))
                })?;
            row.push(cell);
        }
        grid.push(row);
    }
    Ok((cols, rows, grid))
}

/// Linear quantization of a probability to a gray level.
pub fn gray_level(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn emit_pgm(cells: &[SweepCell]) -> Result<String> {
    let (cols, rows, grid) = grid_layout(cells)?;
    let mut out = format!("P2\n{} {}\n255\n", cols.len(), rows.len());
    for row in grid {
        let line: Vec<String> = row.iter().map(|c| gray_level(c.success_prob).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

fn emit_svg(cells: &[SweepCell]) -> Result<String> {
    let (cols, rows, grid) = grid_layout(cells)?;
    let (pad, step) = (40.0, 24.0);
    let width = 2.0 * pad + step * cols.len() as f64;
    let height = 2.0 * pad + step * rows.len() as f64;
    let mode = cells.first().map(|c| c.mode.short_name()).unwrap_or("none");
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    writeln!(out, r#"<title>consistency grid ({mode}-policy)</title>"#).unwrap();
    // eps_obs increases upwards
    for (r, row) in grid.iter().enumerate() {
        let cy = height - pad - step * (r as f64 + 0.5);
        for (k, cell) in row.iter().enumerate() {
            let cx = pad + step * (k as f64 + 0.5);
            let color = if cell.consistent { "#2a9d3a" } else { "#d62828" };
            writeln!(
                out,
                r#"<circle cx="{cx}" cy="{cy}" r="7" fill="{color}"><title>eps_exp={} eps_obs={} success={}</title></circle>"#,
                fmt_g6(cell.eps_exp),
                fmt_g6(cell.eps_obs),
                fmt_g6(cell.success_prob)
            )
            .unwrap();
        }
    }
    writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">eps_exp</text>"#,
        width / 2.0,
        height - 8.0
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">eps_obs</text>"#,
        height / 2.0,
        height / 2.0
    )
    .unwrap();
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(eps_exp: f64, eps_obs: f64, success: f64, mode: FilterMode) -> SweepCell {
        SweepCell {
            eps_exp,
            eps_obs,
            mode,
            success_prob: success,
            std_error: 0.0,
            consistent: classify_consistent(success, eps_exp, 0.12, ThresholdRule::ExpertMatching),
            degenerate_flag_count: 0,
        }
    }

    #[test]
    fn classification_examples() {
        let rule = ThresholdRule::ExpertMatching;
        assert!(classify_consistent(1.0, 0.05, 0.12, rule));
        assert!(!classify_consistent(0.2, 0.05, 0.12, rule));
        let threshold = (1.0 - 0.25) - 0.125;
        assert!(classify_consistent(threshold, 0.25, 0.125, rule));
        assert!(!classify_consistent(threshold - 1e-12, 0.25, 0.125, rule));
        // the literal reading accepts near-random play at small eps_exp
        assert!(classify_consistent(0.2, 0.05, 0.12, ThresholdRule::Literal));
    }

    #[test]
    fn csv_rows() {
        let cells: Vec<SweepCell> = [(0.1, 0.1), (0.1, 0.2), (0.2, 0.1), (0.2, 0.2)]
            .iter()
            .map(|&(e, o)| cell(e, o, 1.0, FilterMode::OnPolicy))
            .collect();
        let text = String::from_utf8(emit_grid(&cells, GridFormat::Csv).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "mode,eps_exp,eps_obs,success_prob,consistent,degenerate_flags");
        assert_eq!(lines.len(), 5);
        assert!(lines[1..].iter().all(|l| l.contains(",true,")));
        assert_eq!(lines[1], "on,0.1,0.1,1,true,0");
    }

    #[test]
    fn pgm_header_and_pixels() {
        let mut cells = Vec::new();
        for r in 0..10 {
            for c in 0..12 {
                cells.push(cell(c as f64 / 20.0, r as f64 / 10.0, 0.74, FilterMode::OffPolicy));
            }
        }
        let text = String::from_utf8(emit_grid(&cells, GridFormat::Pgm).unwrap()).unwrap();
        assert!(text.starts_with("P2\n12 10\n255\n"));
        assert_eq!(gray_level(0.74), 189);
        assert_eq!(text.lines().nth(3).unwrap().split(' ').count(), 12);
        assert!(text.lines().skip(3).all(|l| l.split(' ').all(|v| v == "189")));
    }

    #[test]
    fn pgm_rows_follow_eps_obs() {
        let cells = vec![
            cell(0.1, 0.9, 1.0, FilterMode::OnPolicy),
            cell(0.1, 0.1, 0.0, FilterMode::OnPolicy),
        ];
        let text = String::from_utf8(emit_grid(&cells, GridFormat::Pgm).unwrap()).unwrap();
        assert_eq!(text, "P2\n1 2\n255\n0\n255\n");
    }

    #[test]
    fn mixed_modes_rejected() {
        let cells = vec![
            cell(0.1, 0.1, 1.0, FilterMode::OnPolicy),
            cell(0.1, 0.2, 1.0, FilterMode::OffPolicy),
        ];
        assert!(matches!(emit_grid(&cells, GridFormat::Csv), Err(Error::MixedModes)));
    }

    #[test]
    fn svg_has_one_dot_per_cell() {
        let cells = vec![
            cell(0.1, 0.1, 1.0, FilterMode::OnPolicy),
            cell(0.1, 0.5, 0.2, FilterMode::OnPolicy),
        ];
        let text = String::from_utf8(emit_grid(&cells, GridFormat::Svg).unwrap()).unwrap();
        assert_eq!(text.matches("<circle").count(), 2);
        assert!(text.contains("#d62828") && text.contains("#2a9d3a"));
    }

    #[test]
    fn config_validation() {
        assert!(SweepConfig::default().validate().is_ok());
        let bad = SweepConfig {
            eps_obs_grid: vec![0.2, 0.1],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SweepConfig {
            trials: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let doc = r#"{"K": 5, "T": 10, "trials": 2, "bogus": 1}"#;
        assert!(serde_json::from_str::<SweepConfig>(doc).is_err());
    }

    #[test]
    fn single_cell_is_reproducible() {
        let config = SweepConfig {
            horizon: 50,
            trials: 1,
            eps_exp_grid: vec![0.1],
            eps_obs_grid: vec![0.2],
            ..Default::default()
        };
        let a = run_sweep(&config).unwrap();
        let b = run_sweep(&config).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
    }
}
