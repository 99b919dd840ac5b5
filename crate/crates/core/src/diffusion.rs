//! Monte Carlo for the controlled reflected Ornstein-Uhlenbeck diffusion
//!
//! ```text
//! dX = (-u(X) - theta X) dt + sigma dB + dL,   X >= 0,
//! ```
//!
//! discretized by projected Euler-Maruyama: the proposal is clamped at zero
//! and the clamped amount is the local-time increment.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::cost::CostFunction;
use crate::error::{Error, Result};
use crate::estimate::{run_paths, tail_bound, BoundaryRefinement, CostEstimate, MonteCarloConfig};
use crate::hjb::{evaluate_policy, DcpParams, ValueFunctionSolution};

#[derive(Debug, Clone)]
pub enum ControlPolicy {
    Zero,
    Constant(f64),
    Feedback(Arc<ValueFunctionSolution>),
}

impl ControlPolicy {
    pub fn label(&self) -> String {
        match self {
            ControlPolicy::Zero => "zero".into(),
            ControlPolicy::Constant(c) => format!("constant({c})"),
            ControlPolicy::Feedback(_) => "feedback".into(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ControlPolicy::Constant(c) if !(*c >= 0.0 && c.is_finite()) => {
                Err(Error::param("policy", format!("constant control must be finite and >= 0, got {c}")))
            }
            ControlPolicy::Feedback(sol) if sol.is_zero_control() => Err(Error::param(
                "policy",
                "feedback needs a solution carrying a cost function",
            )),
            _ => Ok(()),
        }
    }
}

/// The policy and its running cost, tabulated for the inner loop.
///
/// Feedback controls are tabulated on the solver grid and linearly
/// interpolated; past the grid the last value is held.
#[derive(Debug, Clone)]
pub(crate) struct PolicyTable {
    inv_step: f64,
    // (u, C(u), next u - u, next C - C) per grid node, interleaved for locality.
    nodes: Vec<[f64; 4]>,
    // The clipped region is a right tail of the grid because Q' increases to 0.
    first_clipped: usize,
}

impl PolicyTable {
    pub(crate) fn new(policy: &ControlPolicy, cost: &CostFunction) -> Self {
        match policy {
            ControlPolicy::Zero => Self::constant(0.0, cost),
            ControlPolicy::Constant(c) => Self::constant(*c, cost),
            ControlPolicy::Feedback(sol) => {
                let control: Vec<f64> = sol.x.iter().map(|&x| evaluate_policy(sol, x)).collect();
                let cost_values: Vec<f64> = control.iter().map(|&u| cost.evaluate(u)).collect();
                let last = control.len() - 1;
                let nodes = (0..=last)
                    .map(|i| {
                        let next = (i + 1).min(last);
                        [control[i], cost_values[i], control[next] - control[i], cost_values[next] - cost_values[i]]
                    })
                    .collect();
                // Past the grid the policy is extrapolated, so the index one
                // past the last node always counts as clipped.
                let first_clipped = sol.x.iter().position(|&x| sol.policy_clipped_at(x)).unwrap_or(last + 1);
                Self {
                    inv_step: 1.0 / sol.step,
                    nodes,
                    first_clipped,
                }
            }
        }
    }

    fn constant(u: f64, cost: &CostFunction) -> Self {
        Self {
            inv_step: 0.0,
            nodes: vec![[u, cost.evaluate(u), 0.0, 0.0]],
            first_clipped: 2,
        }
    }

    /// `(u(x), C(u(x)), clipped)`.
    #[inline]
    pub(crate) fn at(&self, x: f64) -> (f64, f64, bool) {
        let last = self.nodes.len() - 1;
        let pos = x * self.inv_step;
        let i = pos as usize;
        if i >= last {
            let [u, c, _, _] = self.nodes[last];
            let index = if pos > last as f64 { last + 1 } else { last };
            return (u, c, index >= self.first_clipped);
        }
        let frac = pos - i as f64;
        let [u, c, du, dc] = self.nodes[i];
        (u + frac * du, c + frac * dc, i >= self.first_clipped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathRealization {
    pub seed: u64,
    pub dt: f64,
    pub horizon: f64,
    /// `int_0^T e^{-alpha t} C(u(t)) dt`.
    pub control_cost: f64,
    /// `p int_0^T e^{-alpha t} dL(t)`.
    pub local_time_cost: f64,
    /// `p alpha int_0^T e^{-alpha t} L(t) dt`.
    pub local_time_cost_rewritten: f64,
    pub local_time: f64,
    pub terminal_state: f64,
    pub max_state: f64,
    pub clip_count: usize,
    pub reflection_steps: usize,
    /// `sum_k X_{k+1} dL_k` over every projection, substeps included.
    pub complementarity: f64,
    pub steps: usize,
    /// Steps of size `dt` that started inside the boundary layer and were split.
    pub refined_steps: usize,
}

impl PathRealization {
    pub fn total_cost(&self) -> f64 {
        self.control_cost + self.local_time_cost
    }

    pub fn total_cost_rewritten(&self) -> f64 {
        self.control_cost + self.local_time_cost_rewritten
    }
}

fn validate_grid(x0: f64, dt: f64, horizon: f64) -> Result<usize> {
    if !(x0 >= 0.0 && x0.is_finite()) {
        return Err(Error::param("x0", format!("must be finite and >= 0, got {x0}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::param("dt", format!("must be positive, got {dt}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::param("horizon", format!("must be positive, got {horizon}")));
    }
    let steps = (horizon / dt).round();
    if !(1.0..=1e10).contains(&steps) {
        return Err(Error::param("dt", format!("horizon/dt = {steps} steps is out of range")));
    }
    Ok(steps as usize)
}

/// Simulates one path with its own ChaCha8 stream seeded from `seed`,
/// using the default boundary refinement.
pub fn simulate_reflected_path(
    params: &DcpParams,
    policy: &ControlPolicy,
    x0: f64,
    dt: f64,
    horizon: f64,
    seed: u64,
) -> Result<PathRealization> {
    simulate_reflected_path_with(params, policy, x0, dt, horizon, seed, BoundaryRefinement::default())
}

pub fn simulate_reflected_path_with(
    params: &DcpParams,
    policy: &ControlPolicy,
    x0: f64,
    dt: f64,
    horizon: f64,
    seed: u64,
    refinement: BoundaryRefinement,
) -> Result<PathRealization> {
    params.validate()?;
    policy.validate()?;
    refinement.validate()?;
    let steps = validate_grid(x0, dt, horizon)?;
    let table = PolicyTable::new(policy, &params.cost);
    run_path(params, &table, x0, dt, steps, seed, refinement)
}

/// Substeps per refinement level.
const SPLIT: usize = 4;

struct Stepper {
    dt: f64,
    noise: f64,
    decay: f64,
    // Exact integral of the discount over one step.
    weight: f64,
    // Steps starting below this level are split further.
    layer: f64,
}

struct PathState<'a> {
    params: &'a DcpParams,
    table: &'a PolicyTable,
    rng: ChaCha8Rng,
    levels: Vec<Stepper>,
    step: usize,
    discount: f64,
    local_time: f64,
    control_cost: f64,
    local_direct: f64,
    local_integral: f64,
    max_state: f64,
    clip_count: usize,
    reflection_steps: usize,
    complementarity: f64,
}

impl PathState<'_> {
    fn advance(&mut self, x: f64, level: usize) -> Result<f64> {
        if level + 1 < self.levels.len() && x < self.levels[level].layer {
            let mut x = x;
            for _ in 0..SPLIT {
                x = self.advance(x, level + 1)?;
            }
            return Ok(x);
        }
        let s = &self.levels[level];
        let (u, c, clipped) = self.table.at(x);
        self.clip_count += clipped as usize;
        self.control_cost += self.discount * s.weight * c;
        let z: f64 = self.rng.sample(StandardNormal);
        let proposed = x + (-u - self.params.theta * x) * s.dt + s.noise * z;
        if !proposed.is_finite() {
            return Err(Error::Simulation {
                step: self.step,
                reason: format!("non-finite state from x = {x}, u = {u}"),
            });
        }
        let (x, dl) = if proposed < 0.0 {
            self.reflection_steps += 1;
            (0.0, -proposed)
        } else {
            (proposed, 0.0)
        };
        self.local_time += dl;
        self.local_direct += self.discount * dl;
        self.local_integral += self.discount * s.weight * self.local_time;
        self.complementarity += x * dl;
        self.max_state = self.max_state.max(x);
        self.discount *= s.decay;
        Ok(x)
    }
}

pub(crate) fn run_path(
    params: &DcpParams,
    table: &PolicyTable,
    x0: f64,
    dt: f64,
    steps: usize,
    seed: u64,
    refinement: BoundaryRefinement,
) -> Result<PathRealization> {
    let alpha = params.alpha;
    let levels = (0..=refinement.levels)
        .map(|j| {
            let h = dt / (SPLIT as f64).powi(j as i32);
            Stepper {
                dt: h,
                noise: params.sigma * h.sqrt(),
                decay: (-alpha * h).exp(),
                weight: -(-alpha * h).exp_m1() / alpha,
                layer: refinement.layer * params.sigma * h.sqrt(),
            }
        })
        .collect();
    let mut state = PathState {
        params,
        table,
        rng: ChaCha8Rng::seed_from_u64(seed),
        levels,
        step: 0,
        discount: 1.0,
        local_time: 0.0,
        control_cost: 0.0,
        local_direct: 0.0,
        local_integral: 0.0,
        max_state: x0,
        clip_count: 0,
        reflection_steps: 0,
        complementarity: 0.0,
    };
    let coarse_layer = state.levels[0].layer;
    let mut refined_steps = 0;
    let mut x = x0;
    for k in 0..steps {
        state.step = k;
        refined_steps += (refinement.levels > 0 && x < coarse_layer) as usize;
        x = state.advance(x, 0)?;
    }

    Ok(PathRealization {
        seed,
        dt,
        horizon: steps as f64 * dt,
        control_cost: state.control_cost,
        local_time_cost: params.p * state.local_direct,
        local_time_cost_rewritten: params.p * alpha * state.local_integral,
        local_time: state.local_time,
        terminal_state: x,
        max_state: state.max_state,
        clip_count: state.clip_count,
        reflection_steps: state.reflection_steps,
        complementarity: state.complementarity,
        steps,
        refined_steps,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DiffusionEstimate {
    pub policy: String,
    /// Total cost with the local-time term as `p int e^{-alpha t} dL`.
    pub direct: CostEstimate,
    /// Total cost with the local-time term as `p alpha int e^{-alpha t} L dt`.
    pub rewritten: CostEstimate,
    pub mean_control_cost: f64,
    pub mean_local_time_cost: f64,
    pub clip_rate: f64,
    pub max_state: f64,
    pub max_complementarity: f64,
    pub dt: f64,
    pub horizon: f64,
    pub base_seed: u64,
    pub x0: f64,
}

impl DiffusionEstimate {
    pub fn fubini_agrees(&self) -> bool {
        self.direct.agrees_with(&self.rewritten, 2.0)
    }
}

/// Estimates the discounted cost from `x0` over seeds `base_seed..base_seed + n_paths`.
pub fn estimate_cost(
    params: &DcpParams,
    policy: &ControlPolicy,
    x0: f64,
    mc: &MonteCarloConfig,
) -> Result<DiffusionEstimate> {
    params.validate()?;
    policy.validate()?;
    mc.validate()?;
    let steps = validate_grid(x0, mc.dt, mc.horizon)?;
    let table = PolicyTable::new(policy, &params.cost);
    let paths = run_paths(mc.n_paths, mc.workers, |i| {
        run_path(params, &table, x0, mc.dt, steps, mc.base_seed.wrapping_add(i as u64), mc.refinement())
    })?;
    summarize(params, policy, x0, mc, &paths)
}

fn summarize(
    params: &DcpParams,
    policy: &ControlPolicy,
    x0: f64,
    mc: &MonteCarloConfig,
    paths: &[PathRealization],
) -> Result<DiffusionEstimate> {
    let n = paths.len() as f64;
    let tail = tail_bound(
        params.alpha,
        mc.horizon,
        params.cost.cost_at_zero(),
        params.p,
        mc.local_time_bound,
    );
    let direct: Vec<f64> = paths.iter().map(PathRealization::total_cost).collect();
    let rewritten: Vec<f64> = paths.iter().map(PathRealization::total_cost_rewritten).collect();
    let total_steps: usize = paths.iter().map(|p| p.steps).sum();
    Ok(DiffusionEstimate {
        policy: policy.label(),
        direct: CostEstimate::from_samples(&direct, tail)?,
        rewritten: CostEstimate::from_samples(&rewritten, tail)?,
        mean_control_cost: paths.iter().map(|p| p.control_cost).sum::<f64>() / n,
        mean_local_time_cost: paths.iter().map(|p| p.local_time_cost).sum::<f64>() / n,
        clip_rate: paths.iter().map(|p| p.clip_count).sum::<usize>() as f64 / total_steps as f64,
        max_state: paths.iter().map(|p| p.max_state).fold(0.0, f64::max),
        max_complementarity: paths.iter().map(|p| p.complementarity.abs()).fold(0.0, f64::max),
        dt: mc.dt,
        horizon: mc.horizon,
        base_seed: mc.base_seed,
        x0,
    })
}

/// Slack allowed when comparing Monte Carlo estimates with `Q(x0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct DominanceBudget {
    /// Absolute allowance for discretization bias of the feedback estimate.
    pub feedback_abs: f64,
    /// Allowance below `Q(x0)` for alternative policies.
    pub alternative_slack: f64,
    /// Number of standard errors.
    pub se_multiplier: f64,
}

impl Default for DominanceBudget {
    fn default() -> Self {
        Self {
            feedback_abs: 0.02,
            alternative_slack: 0.0,
            se_multiplier: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DominanceRow {
    pub estimate: DiffusionEstimate,
    pub is_feedback: bool,
    pub pass: bool,
    pub check: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct DominanceReport {
    pub q_x0: f64,
    pub rows: Vec<DominanceRow>,
}

impl DominanceReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// Whether the feedback row has the smallest estimate in the table.
    pub fn feedback_is_minimal(&self) -> bool {
        let min = self.rows.iter().map(|r| r.estimate.direct.mean).fold(f64::INFINITY, f64::min);
        self.rows.iter().any(|r| r.is_feedback && r.estimate.direct.mean == min)
    }
}

/// Estimates each policy from `x0` and checks it against `Q(x0)`: the
/// feedback policy must match, every other policy must not beat it.
pub fn dominance_report(
    params: &DcpParams,
    sol: &Arc<ValueFunctionSolution>,
    x0: f64,
    policies: &[ControlPolicy],
    mc: &MonteCarloConfig,
    budget: &DominanceBudget,
) -> Result<DominanceReport> {
    let feedback = policies.iter().filter(|p| matches!(p, ControlPolicy::Feedback(_))).count();
    if feedback == 0 || policies.len() - feedback < 2 {
        return Err(Error::param(
            "policies",
            "need the feedback policy and at least two alternatives",
        ));
    }
    let q_x0 = sol.q_at(x0);
    let mut rows = Vec::with_capacity(policies.len());
    for policy in policies {
        let estimate = estimate_cost(params, policy, x0, mc)?;
        let se = budget.se_multiplier * estimate.direct.std_error;
        let is_feedback = matches!(policy, ControlPolicy::Feedback(_));
        let (pass, check) = if is_feedback {
            let allowed = se + budget.feedback_abs + estimate.direct.tail_bound;
            let gap = (estimate.direct.mean - q_x0).abs();
            (gap <= allowed, format!("|J - Q(x0)| = {gap:.6} <= {allowed:.6}"))
        } else {
            let floor = q_x0 - budget.alternative_slack - se;
            (estimate.direct.mean >= floor, format!("J = {:.6} >= {floor:.6}", estimate.direct.mean))
        };
        rows.push(DominanceRow {
            estimate,
            is_feedback,
            pass,
            check,
        });
    }
    Ok(DominanceReport { q_x0, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::make_exponential_cost;

    fn params() -> DcpParams {
        DcpParams::reference()
    }

    #[test]
    fn noiseless_zero_control_decays_exponentially() {
        let mut p = params();
        p.sigma = 0.0;
        let table = PolicyTable::new(&ControlPolicy::Zero, &p.cost);
        let dt = 1e-4;
        let steps = 20_000;
        let path = run_path(&p, &table, 1.0, dt, steps, 1, BoundaryRefinement::NONE).unwrap();
        let t = steps as f64 * dt;
        // Euler for x' = -theta x.
        let euler = (1.0 - p.theta * dt).powi(steps as i32);
        assert!((path.terminal_state - euler).abs() < 1e-12);
        assert!((path.terminal_state - (-p.theta * t).exp()).abs() < 1e-4);
        assert_eq!(path.local_time, 0.0);
        let exact = (1.0 - (-p.alpha * t).exp()) / p.alpha;
        assert!((path.control_cost - exact).abs() < 1e-12);
    }

    #[test]
    fn zero_control_cost_is_path_independent() {
        let p = params();
        let exact = (1.0 - (-p.alpha * 5.0_f64).exp()) / p.alpha;
        for seed in 0..5 {
            let path = simulate_reflected_path(&p, &ControlPolicy::Zero, 0.0, 1e-3, 5.0, seed).unwrap();
            assert!((path.control_cost - exact).abs() < 1e-10);
            assert!(path.local_time_cost >= 0.0);
        }
    }

    #[test]
    fn first_step_reflects_about_half_the_time() {
        let p = params();
        let n = 100_000;
        let hits = (0..n)
            .filter(|&s| {
                simulate_reflected_path_with(&p, &ControlPolicy::Constant(0.3), 0.0, 1e-6, 1e-6, s, BoundaryRefinement::NONE)
                    .unwrap()
                    .reflection_steps
                    == 1
            })
            .count() as f64;
        // Drift shifts the probability by O(sqrt(dt)).
        let band = 3.0 * (0.25 / n as f64).sqrt();
        assert!((hits / n as f64 - 0.5).abs() <= band, "{hits}");
    }

    #[test]
    fn refinement_only_acts_near_the_boundary() {
        let p = params();
        let policy = ControlPolicy::Constant(1.0);
        let plain = simulate_reflected_path_with(&p, &policy, 0.0, 1e-3, 2.0, 8, BoundaryRefinement::NONE).unwrap();
        let no_layer = BoundaryRefinement { levels: 3, layer: 0.0 };
        let flat = simulate_reflected_path_with(&p, &policy, 0.0, 1e-3, 2.0, 8, no_layer).unwrap();
        assert_eq!(plain, flat);
        assert_eq!(plain.refined_steps, 0);

        let refined = simulate_reflected_path(&p, &policy, 0.0, 1e-3, 2.0, 8).unwrap();
        assert!(refined.refined_steps > 0 && refined.refined_steps < refined.steps);
        assert!(refined.reflection_steps > plain.reflection_steps);
        assert_eq!(refined.complementarity, 0.0);
        assert_eq!(refined.steps, 2000);
        // Discounting over the substeps still integrates exactly.
        let z = simulate_reflected_path(&p, &ControlPolicy::Zero, 0.0, 1e-3, 2.0, 8).unwrap();
        let exact = (1.0 - (-p.alpha * 2.0_f64).exp()) / p.alpha;
        assert!((z.control_cost - exact).abs() < 1e-10);
    }

    #[test]
    fn refinement_shrinks_local_time_bias() {
        // Zero control from 0: J = C(0) / alpha + p U(0) with U(0) = sqrt(pi / 2).
        let p = params();
        let exact = 2.0 + (std::f64::consts::PI / 2.0).sqrt();
        let bias = |levels| {
            let mc = MonteCarloConfig {
                dt: 1e-2,
                horizon: 15.0,
                n_paths: 4000,
                base_seed: 11,
                boundary_levels: levels,
                ..MonteCarloConfig::default()
            };
            let e = estimate_cost(&p, &ControlPolicy::Zero, 0.0, &mc).unwrap();
            (e.direct.mean - exact, e.direct.std_error)
        };
        let (coarse, se) = bias(0);
        let (fine, _) = bias(3);
        // Plain projection loses about sigma sqrt(dt) = 0.1 here.
        assert!(coarse < -0.05, "{coarse}");
        assert!(fine.abs() < 0.03 + 3.0 * se, "{fine}");
    }

    #[test]
    fn seed_determinism_and_distinct_streams() {
        let p = params();
        let policy = ControlPolicy::Constant(1.0);
        let a = simulate_reflected_path(&p, &policy, 0.5, 1e-3, 3.0, 42).unwrap();
        let b = simulate_reflected_path(&p, &policy, 0.5, 1e-3, 3.0, 42).unwrap();
        let c = simulate_reflected_path(&p, &policy, 0.5, 1e-3, 3.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.terminal_state, c.terminal_state);
    }

    #[test]
    fn complementarity_and_cost_bounds() {
        let p = params();
        for seed in 0..20 {
            let path = simulate_reflected_path(&p, &ControlPolicy::Constant(2.0), 0.0, 1e-3, 10.0, seed).unwrap();
            assert_eq!(path.complementarity, 0.0);
            assert!(path.control_cost <= p.cost.cost_at_zero() / p.alpha);
            assert!(path.local_time_cost >= 0.0 && path.local_time_cost_rewritten >= 0.0);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = params();
        assert!(simulate_reflected_path(&p, &ControlPolicy::Zero, -1.0, 1e-3, 1.0, 0).is_err());
        assert!(simulate_reflected_path(&p, &ControlPolicy::Zero, 0.0, 0.0, 1.0, 0).is_err());
        assert!(simulate_reflected_path(&p, &ControlPolicy::Constant(-1.0), 0.0, 1e-3, 1.0, 0).is_err());
        let mc = MonteCarloConfig {
            n_paths: 1,
            ..MonteCarloConfig::default()
        };
        assert!(estimate_cost(&p, &ControlPolicy::Zero, 0.0, &mc).is_err());
    }

    #[test]
    fn estimate_is_worker_count_invariant() {
        let p = DcpParams::new(1.0, 0.5, 0.5, 1.0, make_exponential_cost(5.0).unwrap()).unwrap();
        let mc = MonteCarloConfig {
            dt: 1e-2,
            horizon: 5.0,
            n_paths: 200,
            base_seed: 9,
            workers: Some(1),
            ..MonteCarloConfig::default()
        };
        let a = estimate_cost(&p, &ControlPolicy::Constant(0.5), 0.0, &mc).unwrap();
        let b = estimate_cost(
            &p,
            &ControlPolicy::Constant(0.5),
            0.0,
            &MonteCarloConfig {
                workers: Some(4),
                ..mc.clone()
            },
        )
        .unwrap();
        assert_eq!(a.direct, b.direct);
        assert_eq!(a.rewritten, b.rewritten);
    }

    #[test]
    fn constant_table_never_clips() {
        let p = params();
        let table = PolicyTable::new(&ControlPolicy::Constant(0.7), &p.cost);
        let (u, c, clipped) = table.at(123.0);
        assert_eq!(u, 0.7);
        assert_eq!(c, p.cost.evaluate(0.7));
        assert!(!clipped);
    }
}
