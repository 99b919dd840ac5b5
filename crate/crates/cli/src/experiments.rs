//! Experiment orchestration: each run writes its CSV tables and a JSON manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use wqcp_core::cost::{legendre_derivative, legendre_eval, CostFunction};
use wqcp_core::diffusion::{dominance_report, ControlPolicy, DiffusionEstimate};
use wqcp_core::estimate::MonteCarloConfig;
use wqcp_core::hjb::{
    classify_sweep, shoot_r_star, solve_zero_control, trichotomy_violations, Classification, TrajectoryOutcome,
};
use wqcp_core::queue::{estimate_queue_cost, Patience, QueueEstimate, QueueParams};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{CliError, CliResult};
use crate::manifest::{manifest_hash, write_csv, Check, RunManifest, TOOL, VERSION};

pub const DEFAULT_STRIDE: usize = 100;

/// Multiples of `r*` used when the sweep has no explicit slopes.
pub const AUTO_SWEEP_FACTORS: [f64; 7] = [0.0, 0.5, 0.8, 0.95, 1.05, 1.3, 1.8];

/// Smallest crossing slope accepted as transversal.
const CROSSING_SLOPE_MIN: f64 = 1e-6;
const ORDERING_TOL: f64 = 1e-9;

struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    out_dir: PathBuf,
    hash: String,
    files: Vec<String>,
    derived: BTreeMap<String, serde_json::Value>,
    checks: Vec<Check>,
}

impl RunContext<'_> {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        self.checks.push(Check {
            name: name.to_owned(),
            pass,
            detail,
        });
    }

    fn derive(&mut self, key: &str, value: impl Serialize) {
        let value = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.derived.insert(key.to_owned(), value);
    }

    fn csv<R: IntoIterator<Item = String>>(
        &mut self,
        name: &str,
        header: &[&str],
        rows: impl IntoIterator<Item = R>,
    ) -> CliResult<()> {
        let path = self.out_dir.join(name);
        write_csv(&path, &self.hash, header, rows)?;
        self.files.push(name.to_owned());
        Ok(())
    }

    fn stride(&self) -> usize {
        self.cfg.output.stride.unwrap_or(DEFAULT_STRIDE).max(1)
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Runs the configured experiment in `out_dir`.
///
/// Invalid configs are returned as errors before anything is written. Solver
/// and simulation failures are recorded in the manifest's `error` field.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> CliResult<RunManifest> {
    cfg.validate()?;
    let kind = cfg.kind()?;
    std::fs::create_dir_all(out_dir)?;
    let mut ctx = RunContext {
        cfg,
        out_dir: out_dir.to_path_buf(),
        hash: manifest_hash(cfg)?,
        files: Vec::new(),
        derived: BTreeMap::new(),
        checks: Vec::new(),
    };
    let result = match kind {
        ExperimentKind::SweepWr => run_sweep_wr(&mut ctx),
        ExperimentKind::Solve => run_solve(&mut ctx),
        ExperimentKind::VerifyDcp => run_verify_dcp(&mut ctx),
        ExperimentKind::ConvergeQcp => run_converge_qcp(&mut ctx),
        ExperimentKind::ConjugateTable => run_conjugate_table(&mut ctx),
    };
    let manifest_name = format!("{}.manifest.json", kind.as_str());
    let mut files = ctx.files;
    files.push(manifest_name.clone());
    let manifest = RunManifest {
        tool: TOOL.into(),
        version: VERSION.into(),
        experiment: kind.as_str().into(),
        timestamp: chrono::Utc::now().to_rfc3339(),
        manifest_hash: ctx.hash,
        workers: resolved_workers(cfg),
        config: cfg.clone(),
        derived: ctx.derived,
        checks: ctx.checks,
        files,
        error: result.err().map(|e| e.to_string()),
    };
    manifest.write(&out_dir.join(manifest_name))?;
    Ok(manifest)
}

fn resolved_workers(cfg: &ExperimentConfig) -> usize {
    cfg.monte_carlo
        .as_ref()
        .and_then(|mc| mc.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn classification_counts(outcomes: &[TrajectoryOutcome]) -> (usize, usize, bool) {
    let classes: Vec<Classification> = outcomes.iter().map(|o| o.classification).collect();
    let local_max = classes.iter().filter(|c| **c == Classification::LocalMax).count();
    let hit_zero = classes.iter().filter(|c| **c == Classification::HitZero).count();
    let split = classes.iter().position(|c| *c != Classification::LocalMax).unwrap_or(classes.len());
    let separated = classes[split..].iter().all(|c| *c != Classification::LocalMax);
    (local_max, hit_zero, separated)
}

fn run_sweep_wr(ctx: &mut RunContext) -> CliResult<()> {
    let params = ctx.cfg.dcp_params()?;
    let shooting = ctx.cfg.shooting_config(&params)?;
    let r_grid: Vec<f64> = if ctx.cfg.sweep.r.is_empty() {
        let sol = shoot_r_star(&params, &shooting)?;
        ctx.derive("r_star", sol.r_star);
        ctx.derive("r_bracket", [sol.r_star, sol.r_upper]);
        AUTO_SWEEP_FACTORS.iter().map(|f| f * sol.r_star).collect()
    } else {
        ctx.cfg.sweep.r.clone()
    };
    let outcomes = classify_sweep(&params, &shooting, &r_grid)?;

    let stride = ctx.stride();
    let mut rows = Vec::new();
    for o in &outcomes {
        let last = o.samples.len() - 1;
        for (i, s) in o.samples.iter().enumerate() {
            if i % stride == 0 || i == last {
                rows.push(vec![num(o.r), num(s.x), num(s.w), o.classification.as_str().to_owned()]);
            }
        }
    }
    ctx.csv("sweep_wr.csv", &["r", "x", "w", "classification"], rows)?;
    let summary = outcomes.iter().map(|o| {
        vec![
            num(o.r),
            o.classification.as_str().to_owned(),
            num(o.x_event),
            o.crossing_slope.map(num).unwrap_or_default(),
        ]
    });
    ctx.csv(
        "sweep_wr_summary.csv",
        &["r", "classification", "x_event", "crossing_slope"],
        summary,
    )?;

    let (local_max, hit_zero, separated) = classification_counts(&outcomes);
    ctx.derive("local_max_count", local_max);
    ctx.derive("hit_zero_count", hit_zero);
    ctx.check(
        "dichotomy",
        local_max >= 1 && hit_zero >= 1 && separated,
        format!("{local_max} LocalMax then {hit_zero} HitZero, separated: {separated}"),
    );
    if let Some(zero) = outcomes.iter().find(|o| o.r == 0.0) {
        ctx.check(
            "r0_local_max_at_origin",
            zero.classification == Classification::LocalMax && zero.x_event == 0.0,
            format!("{} at x = {}", zero.classification.as_str(), zero.x_event),
        );
    }
    let min_slope = outcomes.iter().filter_map(|o| o.crossing_slope).fold(f64::INFINITY, f64::min);
    ctx.check(
        "transversal_crossings",
        min_slope > CROSSING_SLOPE_MIN,
        format!("min crossing slope {min_slope:e}"),
    );
    let mut worst = f64::NEG_INFINITY;
    for (i, lower) in outcomes.iter().enumerate() {
        for upper in &outcomes[i + 1..] {
            for (a, b) in lower.regular_samples().iter().zip(upper.regular_samples()) {
                worst = worst.max(a.w - b.w);
            }
        }
    }
    let violations: usize = outcomes.iter().map(|o| trichotomy_violations(o.regular_samples())).sum();
    ctx.check(
        "comparison_ordering",
        worst <= ORDERING_TOL && violations == 0,
        format!("max ordering violation {worst:e}; sign-pattern violations {violations}"),
    );
    Ok(())
}

fn run_solve(ctx: &mut RunContext) -> CliResult<()> {
    let params = ctx.cfg.dcp_params()?;
    let shooting = ctx.cfg.shooting_config(&params)?;
    let sol = shoot_r_star(&params, &shooting)?;
    let zero = solve_zero_control(&params, &shooting)?;
    ctx.derive("r_star", sol.r_star);
    ctx.derive("r_bracket", [sol.r_star, sol.r_upper]);
    ctx.derive("k_r_star", sol.k_r_star);
    ctx.derive("q0", sol.q0());
    ctx.derive("max_residual", sol.max_residual);
    ctx.derive("restarts", sol.restarts);
    ctx.derive("bisection_iters", sol.bisection_iters);
    ctx.derive("x_max", sol.x_max);
    ctx.derive("step", sol.step);
    ctx.derive("zero_control_u0", zero.q0());
    ctx.derive("zero_control_cost", params.cost.cost_at_zero() / params.alpha + params.p * zero.q0());

    let stride = ctx.stride();
    let rows = sol.records(stride).into_iter().map(|r| r.iter().map(|v| num(*v)).collect::<Vec<_>>());
    ctx.csv("value_function.csv", &["x", "q", "q_prime", "u_star"], rows)?;
    ctx.check(
        "hjb_residual",
        sol.max_residual <= shooting.residual_tolerance,
        format!("{:e} <= {:e}", sol.max_residual, shooting.residual_tolerance),
    );
    ctx.check(
        "boundary_slope",
        sol.qp[0] == -params.p,
        format!("Q'(0) = {}", sol.qp[0]),
    );
    Ok(())
}

fn estimate_row(e: &DiffusionEstimate, reference: f64, check: &str, pass: bool) -> Vec<String> {
    vec![
        e.policy.clone(),
        num(e.direct.mean),
        num(e.direct.std_error),
        num(e.direct.ci_half_width),
        num(e.direct.tail_bound),
        e.direct.n_paths.to_string(),
        num(e.dt),
        num(e.horizon),
        e.base_seed.to_string(),
        num(reference),
        num(e.clip_rate),
        check.to_owned(),
        pass.to_string(),
    ]
}

fn run_verify_dcp(ctx: &mut RunContext) -> CliResult<()> {
    let params = ctx.cfg.dcp_params()?;
    let shooting = ctx.cfg.shooting_config(&params)?;
    let mc = ctx.cfg.monte_carlo()?.clone();
    let budgets = ctx.cfg.budgets.clone();
    let x0 = ctx.cfg.verify.x0;
    let sol = Arc::new(shoot_r_star(&params, &shooting)?);
    let zero = solve_zero_control(&params, &shooting)?;
    ctx.derive("r_star", sol.r_star);
    ctx.derive("r_bracket", [sol.r_star, sol.r_upper]);
    ctx.derive("q_x0", sol.q_at(x0));

    let mut policies = vec![ControlPolicy::Feedback(sol.clone()), ControlPolicy::Zero];
    policies.extend(ctx.cfg.verify.constants.iter().map(|&c| ControlPolicy::Constant(c)));
    let report = dominance_report(&params, &sol, x0, &policies, &mc, &budgets.dominance())?;

    let mut rows = Vec::new();
    for row in &report.rows {
        let name = format!("policy={}", row.estimate.policy);
        ctx.check(&name, row.pass, row.check.clone());
        let fubini = row.estimate.direct.agrees_with(&row.estimate.rewritten, budgets.fubini_se);
        ctx.check(
            &format!("fubini:{}", row.estimate.policy),
            fubini,
            format!(
                "direct {} vs rewritten {}",
                row.estimate.direct.mean, row.estimate.rewritten.mean
            ),
        );
        rows.push(estimate_row(&row.estimate, report.q_x0, &row.check, row.pass));
    }
    ctx.check(
        "feedback_minimal",
        report.feedback_is_minimal(),
        "feedback has the smallest estimate in the table".into(),
    );
    ctx.derive("feedback_clip_rate", report.rows[0].estimate.clip_rate);

    let zero_row = report
        .rows
        .iter()
        .find(|r| r.estimate.policy == "zero")
        .ok_or_else(|| CliError::Output("zero-control row missing".into()))?;
    let identity = params.cost.cost_at_zero() / params.alpha + params.p * zero.q_at(x0);
    let est = &zero_row.estimate.direct;
    let allowed = budgets.se_multiplier * est.std_error + budgets.feedback_abs + est.tail_bound;
    let gap = (est.mean - identity).abs();
    let pass = gap <= allowed;
    let detail = format!("|J(zero) - (C(0)/alpha + p U(x0))| = {gap:.6} <= {allowed:.6}");
    ctx.derive("zero_control_identity", identity);
    ctx.check("identity", pass, detail.clone());
    let mut identity_row = estimate_row(&zero_row.estimate, identity, &detail, pass);
    identity_row[0] = "identity".into();
    rows.push(identity_row);

    ctx.csv(
        "verify_dcp.csv",
        &[
            "policy",
            "mean",
            "se",
            "ci_half_width",
            "tail_bound",
            "n_paths",
            "dt",
            "T",
            "seed",
            "reference",
            "clip_rate",
            "check",
            "pass",
        ],
        rows,
    )?;
    Ok(())
}

fn queue_row(e: &QueueEstimate, q_x0: f64) -> Vec<String> {
    vec![
        e.n.to_string(),
        e.policy.clone(),
        num(e.direct.mean),
        num(e.direct.std_error),
        num(e.idle_cost_share),
        num(e.idle_scaled_sq.mean),
        num(e.clamp_rate),
        e.direct.n_paths.to_string(),
        num(e.horizon),
        e.base_seed.to_string(),
        num((e.direct.mean - q_x0).abs()),
    ]
}

fn run_converge_qcp(ctx: &mut RunContext) -> CliResult<()> {
    let params = ctx.cfg.dcp_params()?;
    let shooting = ctx.cfg.shooting_config(&params)?;
    let queue = ctx.cfg.queue()?.clone();
    let budgets = ctx.cfg.budgets.clone();
    let mc = MonteCarloConfig {
        n_paths: queue.n_paths.unwrap_or(ctx.cfg.monte_carlo()?.n_paths),
        ..ctx.cfg.monte_carlo()?.clone()
    };
    let sol = Arc::new(shoot_r_star(&params, &shooting)?);
    let q_x0 = sol.q_at(queue.x0);
    ctx.derive("r_star", sol.r_star);
    ctx.derive("q_x0", q_x0);

    let build = |n: u32, control: ControlPolicy| QueueParams {
        n,
        x0_hat: queue.x0,
        service: queue.service,
        patience: queue.patience.unwrap_or(Patience::Uniform { theta: params.theta }),
        control,
        epsilon0: queue.epsilon0,
        alpha: params.alpha,
        p: params.p,
        cost: params.cost.clone(),
    };
    let mut feedback = Vec::new();
    let mut zero = Vec::new();
    for &n in &queue.n {
        feedback.push(estimate_queue_cost(&build(n, ControlPolicy::Feedback(sol.clone())), &mc)?);
        if queue.include_zero_control {
            zero.push(estimate_queue_cost(&build(n, ControlPolicy::Zero), &mc)?);
        }
    }

    let gaps: Vec<f64> = feedback.iter().map(|e| (e.direct.mean - q_x0).abs()).collect();
    let moments: Vec<f64> = feedback.iter().map(|e| e.idle_scaled_sq.mean).collect();
    ctx.derive("gaps", &gaps);
    ctx.derive("idle_second_moments", &moments);
    ctx.derive("clamp_rates", feedback.iter().map(|e| e.clamp_rate).collect::<Vec<_>>());

    let first = gaps[0];
    let last_est = feedback.last().expect("at least three n");
    let last = gaps[gaps.len() - 1];
    ctx.check(
        "gap_shrinks",
        last <= first,
        format!("gap(n={}) = {last:.6} <= gap(n={}) = {first:.6}", last_est.n, queue.n[0]),
    );
    let allowed = budgets.se_multiplier * last_est.direct.std_error + budgets.queue_abs;
    ctx.check(
        "final_gap",
        last <= allowed,
        format!("|J - Q(x0)| = {last:.6} <= {allowed:.6}"),
    );
    for e in feedback.iter().chain(&zero) {
        ctx.check(
            &format!("fubini:{}:n={}", e.policy, e.n),
            e.direct.agrees_with(&e.rewritten, budgets.fubini_se),
            format!("direct {} vs rewritten {}", e.direct.mean, e.rewritten.mean),
        );
    }
    let increasing = moments.windows(2).all(|w| w[1] > w[0]);
    let ratio = moments.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        / moments.iter().cloned().fold(f64::INFINITY, f64::min);
    ctx.check(
        "idle_second_moment_bounded",
        !increasing && ratio <= budgets.idle_ratio_max,
        format!("monotone increase {increasing}; max/min {ratio:.4}"),
    );
    if let Some(z) = zero.last() {
        let floor = q_x0 - budgets.queue_abs - budgets.se_multiplier * z.direct.std_error;
        ctx.check(
            "zero_control_lower_bound",
            z.direct.mean >= floor,
            format!("J(zero, n={}) = {:.6} >= {floor:.6}", z.n, z.direct.mean),
        );
    }

    let rows: Vec<Vec<String>> = feedback.iter().chain(&zero).map(|e| queue_row(e, q_x0)).collect();
    ctx.csv(
        "converge_qcp.csv",
        &[
            "n",
            "policy",
            "mean",
            "se",
            "idle_cost_share",
            "e_l_sq",
            "clamp_rate",
            "n_paths",
            "T",
            "seed",
            "gap",
        ],
        rows,
    )?;
    Ok(())
}

/// Grid supremum of `u y - C(u)` on `grid` points of `[0, u_max]`.
pub fn brute_force_conjugate(cost: &CostFunction, u_max: f64, grid: usize, y: f64) -> f64 {
    let du = u_max / (grid - 1) as f64;
    (0..grid)
        .map(|i| {
            let u = i as f64 * du;
            u * y - cost.evaluate(u)
        })
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Power of two past which the finite-difference slope of `C` exceeds `y_max`.
fn truncation_point(cost: &CostFunction, y_max: f64) -> f64 {
    let mut u = 1.0;
    while (cost.evaluate(u) - cost.evaluate(u - 1e-3)) / 1e-3 <= y_max && u < 1e12 {
        u *= 2.0;
    }
    u
}

fn run_conjugate_table(ctx: &mut RunContext) -> CliResult<()> {
    let cost = ctx
        .cfg
        .cost
        .as_ref()
        .ok_or_else(|| CliError::Config("cost: block is required".into()))?
        .build()?;
    let table = ctx.cfg.conjugate.clone();
    let slope = cost.slope_at_zero();
    let y_min = match table.y_min {
        Some(v) => v,
        None if slope.is_finite() => 2.0 * slope,
        None => {
            return Err(CliError::Config(
                "conjugate.y_min: required when C'(0) is unbounded".into(),
            ))
        }
    };
    let mut ys: Vec<f64> = (0..table.points)
        .map(|k| y_min + (table.y_max - y_min) * k as f64 / (table.points - 1) as f64)
        .collect();
    if slope.is_finite() && slope > y_min && slope < table.y_max {
        ys.push(slope);
        ys.sort_by(|a, b| a.total_cmp(b));
    }
    let u_max = truncation_point(&cost, table.y_max);
    let mut worst = 0.0_f64;
    let mut rows = Vec::with_capacity(ys.len());
    for y in ys {
        let f = legendre_eval(&cost, y)?;
        let fp = legendre_derivative(&cost, y)?;
        let brute = brute_force_conjugate(&cost, u_max, table.grid, y);
        let diff = (f - brute).abs();
        worst = worst.max(diff);
        rows.push(vec![num(y), num(f), num(fp), num(brute), num(diff)]);
    }
    ctx.csv(
        "conjugate_table.csv",
        &["y", "f", "f_prime", "brute_force", "abs_diff"],
        rows,
    )?;
    ctx.derive("cost", cost.label());
    ctx.derive("max_abs_diff", worst);
    ctx.check(
        "grid_supremum",
        worst <= ctx.cfg.budgets.conjugate_abs,
        format!("max |F - sup| = {worst:e} <= {:e}", ctx.cfg.budgets.conjugate_abs),
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use wqcp_core::cost::make_exponential_cost;

    #[test]
    fn brute_force_matches_closed_form() {
        let cost = make_exponential_cost(5.0).unwrap();
        let u_max = truncation_point(&cost, -1e-3);
        assert_eq!(u_max, 2.0);
        for y in [-10.0, -5.0, -1.0, -0.01] {
            let exact = legendre_eval(&cost, y).unwrap();
            assert!((brute_force_conjugate(&cost, u_max, 100_000, y) - exact).abs() < 1e-6);
        }
    }
}
