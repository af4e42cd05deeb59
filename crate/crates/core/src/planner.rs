//! Two-timescale resource management.
//!
//! The slow loop picks the cut layer `l` and compression pair `(rho, E)` once
//! per session by dual ascent on
//!
//! ```text
//! L(x, lambda) = tau(x) - sum_p lambda_p g_p(x),   g_p(x) >= 0 when feasible
//! ```
//!
//! with a quadratic penalty on violated constraints added to the inner
//! minimization. `tau` is the session delay at nominal SNR and uniform
//! bandwidth. The fast loop allocates bandwidth every round by sequential
//! linearization of the per-device delays inside a trust region; each
//! linearized min-max subproblem is a small LP solved exactly by a
//! breakpoint search.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compression::{AccuracySurface, RatePredictor};
use crate::model_profile::{memory_device, ModelProfile, ProfileError, SplitConfig};
use crate::wireless::{
    link_costs, round_delays, round_max, ChannelState, DeviceProfile, LinkCost, LinkPlan, ServerProfile,
    WirelessError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error(transparent)]
    Wireless(#[from] WirelessError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("infeasible allocation: device caps sum to {capacity_hz} Hz, below the {total_hz} Hz budget")]
    InfeasibleAllocation { total_hz: f64, capacity_hz: f64 },
    #[error("invalid planner settings: {0}")]
    InvalidSettings(String),
    #[error("empty search grid: {0}")]
    EmptyGrid(&'static str),
}

pub type Result<T> = std::result::Result<T, PlannerError>;

pub const CONSTRAINT_NAMES: [&str; 8] =
    ["accuracy", "memory", "keep_rate_min", "keep_rate_max", "levels_min", "levels_max", "cut_min", "cut_max"];

// Smallest rate fed to the delay model; a zero prediction would make the
// uplink free.
const MIN_BETA: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigBounds {
    pub keep_rate_min: f64,
    pub keep_rate_max: f64,
    pub levels_min: u16,
    pub levels_max: u16,
}

/// Candidate values for the slow-timescale search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub keep_rates: Vec<f64>,
    pub levels: Vec<u16>,
    pub cuts: Vec<u64>,
}

impl SearchGrid {
    /// `keep_rate_min, keep_rate_min + step, ...` up to `keep_rate_max`.
    pub fn regular(bounds: &ConfigBounds, step: f64, levels: Vec<u16>, cuts: Vec<u64>) -> Self {
        let count = ((bounds.keep_rate_max - bounds.keep_rate_min) / step + 1e-9).floor() as usize + 1;
        let keep_rates = (0..count)
            .map(|i| {
                let r = bounds.keep_rate_min + i as f64 * step;
                // Snap to the step's decimal grid so 0.05 * 3 prints as 0.15.
                (r * 1e12).round() / 1e12
            })
            .collect();
        SearchGrid { keep_rates, levels, cuts }
    }

    fn check(&self) -> Result<()> {
        if self.keep_rates.is_empty() {
            return Err(PlannerError::EmptyGrid("keep_rates"));
        }
        if self.levels.is_empty() {
            return Err(PlannerError::EmptyGrid("levels"));
        }
        if self.cuts.is_empty() {
            return Err(PlannerError::EmptyGrid("cuts"));
        }
        Ok(())
    }
}

/// Everything the slow loop evaluates.
#[derive(Debug, Clone)]
pub struct PlanningContext {
    pub profile: ModelProfile,
    /// Batch, epochs and rounds; the cut layer is overridden per candidate.
    pub split: SplitConfig,
    pub devices: Vec<DeviceProfile>,
    pub server: ServerProfile,
    pub predictor: RatePredictor,
    pub surface: AccuracySurface,
    /// Percent.
    pub accuracy_threshold: f64,
    pub memory_cap_bytes: u64,
    pub bounds: ConfigBounds,
}

impl PlanningContext {
    pub fn beta(&self, keep_rate: f64, levels: f64) -> f64 {
        self.predictor.predict(keep_rate, levels).max(MIN_BETA)
    }

    pub fn memory(&self, cut_layer: u64) -> u64 {
        memory_device(&self.profile, &self.split.with_cut(cut_layer))
    }

    /// Session delay over all rounds at nominal SNR and uniform bandwidth.
    pub fn config_delay(&self, keep_rate: f64, levels: f64, cut_layer: u64) -> Result<f64> {
        self.delay_at_beta(self.beta(keep_rate, levels), cut_layer)
    }

    fn delay_at_beta(&self, beta: f64, cut_layer: u64) -> Result<f64> {
        let caps: Vec<f64> = self.devices.iter().map(|d| d.max_bandwidth_hz).collect();
        let b = uniform_allocation(&caps, self.server.total_bandwidth_hz)?;
        let links: Vec<LinkPlan> =
            b.iter().map(|&bw| LinkPlan { beta_up: beta, beta_down: beta, bandwidth_hz: bw }).collect();
        session_delay_fixed(self, cut_layer, &links)
    }

    /// `g_p >= 0` means constraint `p` holds. Order follows [`CONSTRAINT_NAMES`].
    pub fn constraints(&self, keep_rate: f64, levels: f64, cut_layer: u64) -> [f64; 8] {
        let accuracy = self.surface.predict(keep_rate, levels);
        self.constraints_with(accuracy, keep_rate, levels, cut_layer)
    }

    fn constraints_with(&self, accuracy: f64, keep_rate: f64, levels: f64, cut_layer: u64) -> [f64; 8] {
        let cap = self.memory_cap_bytes as f64;
        let b = &self.bounds;
        let e_scale = b.levels_max.max(1) as f64;
        let l_scale = self.profile.num_layers as f64;
        [
            accuracy - self.accuracy_threshold,
            (cap - self.memory(cut_layer) as f64) / cap,
            keep_rate - b.keep_rate_min,
            b.keep_rate_max - keep_rate,
            (levels - b.levels_min as f64) / e_scale,
            (b.levels_max as f64 - levels) / e_scale,
            (cut_layer as f64 - 1.0) / l_scale,
            ((self.profile.num_layers - 1) as f64 - cut_layer as f64) / l_scale,
        ]
    }
}

// Delay summed over rounds with one allocation; only round 1 differs (full
// block broadcast).
fn session_delay_fixed(ctx: &PlanningContext, cut_layer: u64, links: &[LinkPlan]) -> Result<f64> {
    let split = ctx.split.with_cut(cut_layer);
    let first = round_max(&round_delays(
        &ctx.devices,
        links,
        &ctx.profile,
        &split,
        &ChannelState::nominal(&ctx.devices, 1),
        &ctx.server,
    )?);
    if split.rounds <= 1 {
        return Ok(first);
    }
    let later = round_max(&round_delays(
        &ctx.devices,
        links,
        &ctx.profile,
        &split,
        &ChannelState::nominal(&ctx.devices, 2),
        &ctx.server,
    )?);
    Ok(first + (split.rounds - 1) as f64 * later)
}

/// Plain Lagrangian `tau - sum lambda_p g_p`.
pub fn lagrangian(ctx: &PlanningContext, keep_rate: f64, levels: f64, cut_layer: u64, lambda: &Multipliers) -> Result<f64> {
    let tau = ctx.config_delay(keep_rate, levels, cut_layer)?;
    let g = ctx.constraints(keep_rate, levels, cut_layer);
    Ok(tau - lambda.values.iter().zip(g).map(|(l, g)| l * g).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub values: [f64; 8],
}

impl Multipliers {
    pub fn zero() -> Self {
        Multipliers { values: [0.0; 8] }
    }

    /// Projected subgradient step `lambda <- max(0, lambda - step * g)`.
    pub fn update(&mut self, g: &[f64; 8], step: f64) {
        for (l, gp) in self.values.iter_mut().zip(g) {
            *l = (*l - step * gp).max(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSearch {
    Grid,
    /// Projected gradient over the keep rate for each candidate level.
    GradientAscent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSettings {
    /// Initial subgradient step; the `k`-th step is `mu0 / sqrt(k)`.
    pub mu0: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Initial weight of the violation penalty; doubled after every
    /// infeasible inner solution.
    pub penalty0: f64,
    pub penalty_max: f64,
    pub inner_search: InnerSearch,
    /// Trust-region half-width as a fraction of the total bandwidth.
    pub trust_region_fraction: f64,
    pub sqp_tolerance: f64,
    pub sqp_max_iterations: usize,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        PlannerSettings {
            mu0: 0.5,
            tolerance: 1e-9,
            max_iterations: 300,
            penalty0: 1.0,
            penalty_max: 1e12,
            inner_search: InnerSearch::Grid,
            trust_region_fraction: 0.1,
            sqp_tolerance: 1e-10,
            sqp_max_iterations: 500,
        }
    }
}

impl PlannerSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mu0", self.mu0),
            ("tolerance", self.tolerance),
            ("penalty0", self.penalty0),
            ("trust_region_fraction", self.trust_region_fraction),
            ("sqp_tolerance", self.sqp_tolerance),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(PlannerError::InvalidSettings(format!("{name} must be positive, got {v}")));
            }
        }
        if self.penalty_max < self.penalty0 {
            return Err(PlannerError::InvalidSettings("penalty_max below penalty0".into()));
        }
        if self.max_iterations == 0 || self.sqp_max_iterations == 0 {
            return Err(PlannerError::InvalidSettings("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub lambda: [f64; 8],
    pub objective_s: f64,
    pub lagrangian: f64,
    pub cut_layer: u64,
    pub keep_rate: f64,
    pub levels: u16,
    pub violations: [f64; 8],
}

/// Slow-timescale decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigChoice {
    pub cut_layer: u64,
    pub keep_rate: f64,
    pub levels: u16,
    pub beta: f64,
    pub objective_s: f64,
    pub feasible: bool,
    /// `g_p` at the returned point.
    pub residuals: [f64; 8],
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
}

impl ConfigChoice {
    /// Names and amounts of violated constraints.
    pub fn violations(&self) -> Vec<(&'static str, f64)> {
        CONSTRAINT_NAMES
            .iter()
            .zip(self.residuals)
            .filter(|(_, g)| *g < 0.0)
            .map(|(n, g)| (*n, -g))
            .collect()
    }
}

fn total_violation(g: &[f64; 8]) -> f64 {
    g.iter().map(|v| (-v).max(0.0)).sum()
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    cut_layer: u64,
    keep_rate: f64,
    levels: u16,
    tau: f64,
    g: [f64; 8],
}

impl Candidate {
    fn feasible(&self) -> bool {
        self.g.iter().all(|&v| v >= 0.0)
    }
}

// Grid tables shared by the oracle and the grid-mode inner search.
struct Tables {
    // tau[l][i][j]
    tau: Vec<Vec<Vec<f64>>>,
    accuracy: Vec<Vec<f64>>,
}

fn build_tables(ctx: &PlanningContext, grid: &SearchGrid) -> Result<Tables> {
    let tau = grid
        .cuts
        .par_iter()
        .map(|&l| {
            grid.keep_rates
                .iter()
                .map(|&r| grid.levels.iter().map(|&e| ctx.config_delay(r, e as f64, l)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let accuracy = grid
        .keep_rates
        .iter()
        .map(|&r| grid.levels.iter().map(|&e| ctx.surface.predict(r, e as f64)).collect())
        .collect();
    Ok(Tables { tau, accuracy })
}

fn grid_candidate(ctx: &PlanningContext, grid: &SearchGrid, t: &Tables, li: usize, i: usize, j: usize) -> Candidate {
    let (l, r, e) = (grid.cuts[li], grid.keep_rates[i], grid.levels[j]);
    Candidate {
        cut_layer: l,
        keep_rate: r,
        levels: e,
        tau: t.tau[li][i][j],
        g: ctx.constraints_with(t.accuracy[i][j], r, e as f64, l),
    }
}

fn choice(ctx: &PlanningContext, c: &Candidate, iterations: usize, trace: Vec<TraceRow>) -> ConfigChoice {
    ConfigChoice {
        cut_layer: c.cut_layer,
        keep_rate: c.keep_rate,
        levels: c.levels,
        beta: ctx.beta(c.keep_rate, c.levels as f64),
        objective_s: c.tau,
        feasible: c.feasible(),
        residuals: c.g,
        iterations,
        trace,
    }
}

/// Exhaustive search: the feasible grid point of least delay (ties to the
/// smallest cut, then grid order), or the least-violating point.
pub fn brute_force_config(ctx: &PlanningContext, grid: &SearchGrid) -> Result<ConfigChoice> {
    grid.check()?;
    let tables = build_tables(ctx, grid)?;
    let mut best_feasible: Option<Candidate> = None;
    let mut least_violating: Option<(f64, Candidate)> = None;
    for li in 0..grid.cuts.len() {
        for i in 0..grid.keep_rates.len() {
            for j in 0..grid.levels.len() {
                let c = grid_candidate(ctx, grid, &tables, li, i, j);
                if c.feasible() {
                    if best_feasible.is_none_or(|b| better(&c, &b)) {
                        best_feasible = Some(c);
                    }
                } else {
                    let v = total_violation(&c.g);
                    if least_violating.is_none_or(|(bv, b)| v < bv || (v == bv && better(&c, &b))) {
                        least_violating = Some((v, c));
                    }
                }
            }
        }
    }
    let c = best_feasible.or(least_violating.map(|(_, c)| c)).expect("grid is non-empty");
    Ok(choice(ctx, &c, 0, Vec::new()))
}

fn better(a: &Candidate, b: &Candidate) -> bool {
    a.tau < b.tau || (a.tau == b.tau && a.cut_layer < b.cut_layer)
}

// Inner objective: normalized delay, Lagrangian terms and a quadratic
// penalty on violations.
fn augmented(tau_norm: f64, g: &[f64; 8], lambda: &Multipliers, penalty: f64) -> f64 {
    let mut v = tau_norm;
    for (l, gp) in lambda.values.iter().zip(g) {
        v -= l * gp;
        if *gp < 0.0 {
            v += 0.5 * penalty * gp * gp;
        }
    }
    v
}

/// Dual ascent over `(rho, E, l)`. Returns the best feasible inner minimizer
/// seen, or the least-violating one with `feasible = false`.
pub fn optimize_config(ctx: &PlanningContext, grid: &SearchGrid, settings: &PlannerSettings) -> Result<ConfigChoice> {
    grid.check()?;
    settings.validate()?;
    let tables = match settings.inner_search {
        InnerSearch::Grid => Some(build_tables(ctx, grid)?),
        InnerSearch::GradientAscent => None,
    };
    // Delay scale so multipliers and penalties are unit-free.
    let tau_ref = ctx.config_delay(ctx.bounds.keep_rate_max, ctx.bounds.levels_max as f64, grid.cuts[0])?;

    let mut lambda = Multipliers::zero();
    let mut penalty = settings.penalty0;
    let mut best_feasible: Option<Candidate> = None;
    let mut least_violating: Option<(f64, Candidate)> = None;
    let mut previous: Option<f64> = None;
    let mut trace = Vec::new();
    let mut iterations = 0;

    for k in 1..=settings.max_iterations {
        iterations = k;
        let per_cut = (0..grid.cuts.len())
            .into_par_iter()
            .map(|li| match &tables {
                Some(t) => Ok(inner_grid(ctx, grid, t, li, tau_ref, &lambda, penalty)),
                None => inner_gradient(ctx, grid, grid.cuts[li], tau_ref, &lambda, penalty),
            })
            .collect::<Result<Vec<(f64, Candidate)>>>()?;
        // Smallest cut wins ties.
        let (value, x) = per_cut
            .into_iter()
            .reduce(|a, b| if b.0 < a.0 { b } else { a })
            .expect("cuts non-empty");

        trace.push(TraceRow {
            iteration: k,
            lambda: lambda.values,
            objective_s: x.tau,
            lagrangian: value,
            cut_layer: x.cut_layer,
            keep_rate: x.keep_rate,
            levels: x.levels,
            violations: x.g.map(|v| (-v).max(0.0)),
        });

        if x.feasible() {
            if best_feasible.is_none_or(|b| better(&x, &b)) {
                best_feasible = Some(x);
            }
        } else {
            let v = total_violation(&x.g);
            if least_violating.is_none_or(|(bv, _)| v < bv) {
                least_violating = Some((v, x));
            }
            penalty = (penalty * 2.0).min(settings.penalty_max);
        }

        let slack = lambda.values.iter().zip(&x.g).all(|(l, g)| l * g <= settings.tolerance);
        let settled = previous.is_some_and(|p| (value - p).abs() < settings.tolerance);
        previous = Some(value);
        if x.feasible() && slack && settled {
            break;
        }
        lambda.update(&x.g, settings.mu0 / (k as f64).sqrt());
    }

    let best = best_feasible.or(least_violating.map(|(_, c)| c)).expect("at least one iteration");
    Ok(choice(ctx, &best, iterations, trace))
}

fn inner_grid(
    ctx: &PlanningContext,
    grid: &SearchGrid,
    t: &Tables,
    li: usize,
    tau_ref: f64,
    lambda: &Multipliers,
    penalty: f64,
) -> (f64, Candidate) {
    let mut best: Option<(f64, Candidate)> = None;
    for i in 0..grid.keep_rates.len() {
        for j in 0..grid.levels.len() {
            let c = grid_candidate(ctx, grid, t, li, i, j);
            let v = augmented(c.tau / tau_ref, &c.g, lambda, penalty);
            if best.is_none_or(|(bv, _)| v < bv) {
                best = Some((v, c));
            }
        }
    }
    best.expect("grid non-empty")
}

fn inner_gradient(
    ctx: &PlanningContext,
    grid: &SearchGrid,
    cut: u64,
    tau_ref: f64,
    lambda: &Multipliers,
    penalty: f64,
) -> Result<(f64, Candidate)> {
    let (lo, hi) = (ctx.bounds.keep_rate_min, ctx.bounds.keep_rate_max);
    let eval = |r: f64, e: u16| -> Result<(f64, Candidate)> {
        let tau = ctx.config_delay(r, e as f64, cut)?;
        let g = ctx.constraints(r, e as f64, cut);
        let c = Candidate { cut_layer: cut, keep_rate: r, levels: e, tau, g };
        Ok((augmented(tau / tau_ref, &g, lambda, penalty), c))
    };
    let mut best: Option<(f64, Candidate)> = None;
    for &e in &grid.levels {
        let mut r = 0.5 * (lo + hi);
        let (mut value, mut cand) = eval(r, e)?;
        let mut step = 0.25 * (hi - lo);
        let h = 1e-6 * (hi - lo).max(1e-12);
        for _ in 0..200 {
            if step < 1e-9 {
                break;
            }
            let slope = (eval((r + h).min(hi), e)?.0 - eval((r - h).max(lo), e)?.0)
                / ((r + h).min(hi) - (r - h).max(lo));
            if slope == 0.0 {
                break;
            }
            let trial = (r - step * slope.signum()).clamp(lo, hi);
            let (tv, tc) = eval(trial, e)?;
            if tv < value {
                r = trial;
                value = tv;
                cand = tc;
            } else {
                step *= 0.5;
            }
        }
        if best.is_none_or(|(bv, _)| value < bv) {
            best = Some((value, cand));
        }
    }
    Ok(best.expect("levels non-empty"))
}

/// Equal split of `total` with per-device caps; the excess of capped devices
/// is shared among the rest.
pub fn uniform_allocation(caps: &[f64], total: f64) -> Result<Vec<f64>> {
    weighted_allocation(caps, &vec![1.0; caps.len()], total)
}

/// Split of `total` proportional to `weights`, respecting caps.
pub fn weighted_allocation(caps: &[f64], weights: &[f64], total: f64) -> Result<Vec<f64>> {
    check_capacity(caps, total)?;
    let mut out = vec![0.0; caps.len()];
    let mut free: Vec<usize> = (0..caps.len()).collect();
    let mut remaining = total;
    loop {
        let w: f64 = free.iter().map(|&i| weights[i]).sum();
        if free.is_empty() || w <= 0.0 {
            break;
        }
        let capped: Vec<usize> = free.iter().copied().filter(|&i| remaining * weights[i] / w >= caps[i]).collect();
        if capped.is_empty() {
            for &i in &free {
                out[i] = remaining * weights[i] / w;
            }
            break;
        }
        for &i in &capped {
            out[i] = caps[i];
            remaining -= caps[i];
        }
        free.retain(|i| !capped.contains(i));
    }
    Ok(out)
}

/// Random split for baselines: uniform weights on the simplex, then capped.
pub fn random_allocation(caps: &[f64], total: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let weights: Vec<f64> = caps.iter().map(|_| -rng.random::<f64>().max(f64::MIN_POSITIVE).ln()).collect();
    weighted_allocation(caps, &weights, total)
}

fn check_capacity(caps: &[f64], total: f64) -> Result<()> {
    let capacity: f64 = caps.iter().sum();
    if capacity < total * (1.0 - 1e-12) || caps.is_empty() {
        return Err(PlannerError::InfeasibleAllocation { total_hz: total, capacity_hz: capacity });
    }
    Ok(())
}

pub fn max_delay(costs: &[LinkCost], bandwidths: &[f64]) -> f64 {
    costs
        .iter()
        .zip(bandwidths)
        .map(|(c, &b)| if c.load() > 0.0 && b <= 0.0 { f64::INFINITY } else { c.delay(b) })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSolution {
    pub bandwidths_hz: Vec<f64>,
    pub objective_s: f64,
    pub iterations: usize,
    /// Max delay at each accepted iterate, starting point first.
    pub history: Vec<f64>,
}

/// Min-max bandwidth allocation by sequential linearization with a
/// trust region. Steps that do not reduce the true max delay are rejected
/// and the region halved.
pub fn solve_bandwidth(costs: &[LinkCost], total_hz: f64, settings: &PlannerSettings) -> Result<BandwidthSolution> {
    settings.validate()?;
    let caps: Vec<f64> = costs.iter().map(|c| c.max_bandwidth_hz).collect();
    let mut b = uniform_allocation(&caps, total_hz)?;
    let mut current = max_delay(costs, &b);
    let mut history = vec![current];
    let radius_max = settings.trust_region_fraction * total_hz;
    let mut radius = radius_max;
    let mut iterations = 0;

    while iterations < settings.sqp_max_iterations {
        iterations += 1;
        let step = linearized_step(costs, &b, &caps, radius);
        let trial: Vec<f64> = b.iter().zip(&step).map(|(x, d)| (x + d).clamp(0.0, f64::MAX)).collect();
        let value = max_delay(costs, &trial);
        let step_norm = step.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if value < current {
            let gain = current - value;
            b = trial;
            current = value;
            history.push(current);
            radius = radius_max;
            if gain <= settings.sqp_tolerance * current || step_norm <= settings.sqp_tolerance * total_hz {
                break;
            }
        } else {
            radius *= 0.5;
            if radius <= settings.sqp_tolerance * total_hz {
                break;
            }
        }
    }
    Ok(BandwidthSolution { bandwidths_hz: b, objective_s: current, iterations, history })
}

// Exact solution of
//   min t  s.t.  tau_n + g_n d_n <= t,  sum d = 0,  lo_n <= d_n <= hi_n
// where lo/hi combine the trust region with the box [0, cap].
fn linearized_step(costs: &[LinkCost], b: &[f64], caps: &[f64], radius: f64) -> Vec<f64> {
    let n = costs.len();
    let tau: Vec<f64> = costs.iter().zip(b).map(|(c, &x)| c.delay(x)).collect();
    let grad: Vec<f64> = costs.iter().zip(b).map(|(c, &x)| c.gradient(x)).collect();
    let lo: Vec<f64> = b.iter().map(|&x| (-radius).max(-x)).collect();
    let hi: Vec<f64> = b.iter().zip(caps).map(|(&x, &cap)| radius.min(cap - x).max(0.0)).collect();

    // Change each device needs to reach `t`, before the box.
    let need = |i: usize, t: f64| -> f64 {
        if grad[i] < 0.0 {
            (tau[i] - t) / -grad[i]
        } else {
            f64::NEG_INFINITY
        }
    };
    let demand = |t: f64| -> f64 { (0..n).map(|i| need(i, t).max(lo[i])).sum() };

    let mut t_low = f64::NEG_INFINITY;
    for i in 0..n {
        let floor = if grad[i] < 0.0 { tau[i] + grad[i] * hi[i] } else { tau[i] };
        t_low = t_low.max(floor);
    }
    let t_star = if demand(t_low) <= 0.0 {
        t_low
    } else {
        // demand(t) is piecewise linear and non-increasing with kinks where
        // need meets lo.
        let mut kinks: Vec<f64> =
            (0..n).filter(|&i| grad[i] < 0.0).map(|i| tau[i] + grad[i] * lo[i]).filter(|&t| t > t_low).collect();
        kinks.sort_by(f64::total_cmp);
        let mut left = t_low;
        let mut t_star = *kinks.last().unwrap_or(&t_low);
        for &k in &kinks {
            if demand(k) <= 0.0 {
                let (dl, dk) = (demand(left), demand(k));
                t_star = if dl == dk { k } else { left + (k - left) * dl / (dl - dk) };
                break;
            }
            left = k;
        }
        t_star
    };

    let mut d: Vec<f64> = (0..n).map(|i| need(i, t_star).clamp(lo[i], hi[i])).collect();
    // Hand any surplus to devices with spare room; it only lowers the
    // linearized delays.
    let surplus = -d.iter().sum::<f64>();
    if surplus > 0.0 {
        let room: Vec<f64> = (0..n).map(|i| hi[i] - d[i]).collect();
        let total_room: f64 = room.iter().sum();
        if total_room > 0.0 {
            for i in 0..n {
                d[i] += surplus * room[i] / total_room;
            }
        }
    }
    d
}

/// Exhaustive search over allocations where every device but the last gets
/// a multiple of `step_fraction * total` or exactly its cap, and the last
/// device takes the remainder.
pub fn brute_force_bandwidth(costs: &[LinkCost], total_hz: f64, step_fraction: f64) -> Result<BandwidthSolution> {
    let caps: Vec<f64> = costs.iter().map(|c| c.max_bandwidth_hz).collect();
    check_capacity(&caps, total_hz)?;
    let units = (1.0 / step_fraction).round().max(1.0) as usize;
    let unit = total_hz / units as f64;

    struct Search<'a> {
        costs: &'a [LinkCost],
        caps: &'a [f64],
        unit: f64,
        current: Vec<f64>,
        best: (f64, Vec<f64>),
    }

    impl Search<'_> {
        fn recurse(&mut self, i: usize, left: f64, partial_max: f64) {
            if partial_max >= self.best.0 {
                return;
            }
            let cap = self.caps[i];
            if i + 1 == self.costs.len() {
                if left > cap * (1.0 + 1e-12) || left < -1e-9 * cap {
                    return;
                }
                let b = left.clamp(0.0, cap);
                let m = partial_max.max(max_delay(&self.costs[i..], &[b]));
                if m < self.best.0 {
                    self.current.push(b);
                    self.best = (m, self.current.clone());
                    self.current.pop();
                }
                return;
            }
            // Whatever the rest cannot absorb must come from this device.
            let rest: f64 = self.caps[i + 1..].iter().sum();
            let top = cap.min(left);
            let mut options: Vec<f64> =
                (0..).map(|k| k as f64 * self.unit).take_while(|&b| b <= top * (1.0 + 1e-12)).collect();
            if options.last().is_none_or(|&b| b < top) {
                options.push(top);
            }
            for b in options {
                if left - b > rest * (1.0 + 1e-12) {
                    continue;
                }
                let m = partial_max.max(max_delay(&self.costs[i..=i], &[b]));
                self.current.push(b);
                self.recurse(i + 1, left - b, m);
                self.current.pop();
            }
        }
    }

    let mut search = Search { costs, caps: &caps, unit, current: Vec::new(), best: (f64::INFINITY, Vec::new()) };
    search.recurse(0, total_hz, 0.0);
    let (objective_s, bandwidths_hz) = search.best;
    if bandwidths_hz.is_empty() {
        return Err(PlannerError::InfeasibleAllocation { total_hz, capacity_hz: caps.iter().sum() });
    }
    Ok(BandwidthSolution { objective_s, bandwidths_hz, iterations: 0, history: vec![objective_s] })
}

/// Full plan: slow-timescale choice, then bandwidth at the nominal channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub cut_layer: u64,
    pub keep_rate: f64,
    pub levels: u16,
    pub beta: f64,
    pub bandwidths_hz: Vec<f64>,
    /// Session delay at nominal SNR with the allocated bandwidths.
    pub objective_s: f64,
    /// Session delay at nominal SNR with uniform bandwidth.
    pub config_objective_s: f64,
    pub feasible: bool,
    pub residuals: [f64; 8],
    pub iterations: usize,
}

pub fn plan(ctx: &PlanningContext, grid: &SearchGrid, settings: &PlannerSettings) -> Result<(Plan, ConfigChoice)> {
    let config = optimize_config(ctx, grid, settings)?;
    let split = ctx.split.with_cut(config.cut_layer);
    let channel = ChannelState::nominal(&ctx.devices, 2);
    let costs = link_costs(&ctx.devices, (config.beta, config.beta), &ctx.profile, &split, &channel, &ctx.server)?;
    let bw = solve_bandwidth(&costs, ctx.server.total_bandwidth_hz, settings)?;
    let links: Vec<LinkPlan> = bw
        .bandwidths_hz
        .iter()
        .map(|&b| LinkPlan { beta_up: config.beta, beta_down: config.beta, bandwidth_hz: b })
        .collect();
    let objective_s = session_delay_fixed(ctx, config.cut_layer, &links)?;
    let plan = Plan {
        cut_layer: config.cut_layer,
        keep_rate: config.keep_rate,
        levels: config.levels,
        beta: config.beta,
        bandwidths_hz: bw.bandwidths_hz,
        objective_s,
        config_objective_s: config.objective_s,
        feasible: config.feasible,
        residuals: config.residuals,
        iterations: config.iterations,
    };
    Ok((plan, config))
}
