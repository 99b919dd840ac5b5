//! Free-boundary solver for the discounted drift-control HJB equation
//!
//! ```text
//! sigma^2/2 Q''(x) - F(Q'(x)) - theta x Q'(x) - alpha Q(x) = 0,   Q'(0) = -p,   Q' < 0.
//! ```
//!
//! The missing boundary condition is replaced by a shooting parameter
//! `r = W'(0)` where `W = Q'`. Integrating once gives the first-order
//! integro-differential form
//!
//! ```text
//! sigma^2/2 W'(x) = F(W) + theta x W + alpha (int_0^x W + K_r),
//! K_r = (sigma^2/2 r - F(-p)) / alpha,
//! ```
//!
//! which is marched as the system `(W, I = int W)` with classical RK4. Each
//! trajectory ends in one of three ways: a negative local maximum of `W`
//! (`r` too small), a transversal crossing of zero (`r` too large), or the
//! right edge of the grid. Trajectories are ordered in `r`, so the critical
//! `r*` is found by bisection on the classification.
//!
//! The bounded solution is a separatrix: neighbouring trajectories leave it
//! at a rate of roughly `exp(theta x^2 / sigma^2)`, so in double precision a
//! single march from the origin only resolves it over a bounded range. Once
//! the bracketing trajectories separate, the march is restarted from the
//! lower trajectory's state and the slope at the restart point is bisected
//! in the same way. Restarts continue until a trajectory reaches `x_max`.

use serde::Serialize;

use crate::cost::{ConjugatePair, CostFunction};
use crate::error::{Error, Result};

/// Parameters of the diffusion control problem.
#[derive(Debug, Clone)]
pub struct DcpParams {
    pub sigma: f64,
    pub theta: f64,
    pub alpha: f64,
    pub p: f64,
    pub cost: CostFunction,
}

impl DcpParams {
    pub fn new(sigma: f64, theta: f64, alpha: f64, p: f64, cost: CostFunction) -> Result<Self> {
        let params = Self {
            sigma,
            theta,
            alpha,
            p,
            cost,
        };
        params.validate()?;
        Ok(params)
    }

    /// `p = 1, sigma = 1, theta = 0.5, alpha = 0.5, C(u) = exp(-5u)`.
    pub fn reference() -> Self {
        Self {
            sigma: 1.0,
            theta: 0.5,
            alpha: 0.5,
            p: 1.0,
            cost: crate::cost::make_exponential_cost(5.0).expect("positive beta"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        // Near-zero discount or drift makes the value function unbounded.
        const FLOOR: f64 = 1e-8;
        for (name, v) in [
            ("sigma", self.sigma),
            ("theta", self.theta),
            ("alpha", self.alpha),
            ("p", self.p),
        ] {
            if !(v > FLOOR) || !v.is_finite() {
                return Err(Error::param(name, format!("must be finite and > {FLOOR}, got {v}")));
            }
        }
        if !self.cost.is_admissible() {
            return Err(Error::Inadmissible(format!(
                "{} has an infinite value at the origin",
                self.cost.label()
            )));
        }
        Ok(())
    }

    fn half_sigma2(&self) -> f64 {
        0.5 * self.sigma * self.sigma
    }
}

/// Discretization and search controls for the shooting solver.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ShootingConfig {
    pub step: f64,
    pub x_max: f64,
    pub r_tolerance: f64,
    pub w_zero_tolerance: f64,
    pub delta: f64,
    pub max_bisection_iters: usize,
    /// Bracket search doubles `r` from 1 at most this many times.
    pub max_doublings: u32,
    /// Bracketing trajectories are trusted while they agree to this absolute tolerance.
    pub split_tolerance: f64,
    pub residual_tolerance: f64,
}

impl ShootingConfig {
    pub fn for_params(params: &DcpParams) -> Self {
        Self {
            step: 1e-4,
            x_max: Self::min_x_max(params),
            r_tolerance: 1e-9,
            w_zero_tolerance: 1e-6,
            delta: 1e-8,
            max_bisection_iters: 200,
            max_doublings: 20,
            split_tolerance: 1e-10,
            residual_tolerance: 1e-6,
        }
    }

    /// Smallest admissible truncation, `10 * max(1, sigma^2/theta)`.
    pub fn min_x_max(params: &DcpParams) -> f64 {
        10.0 * (params.sigma * params.sigma / params.theta).max(1.0)
    }

    pub fn validate(&self, params: &DcpParams) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::param("step", "must be positive"));
        }
        let floor = Self::min_x_max(params);
        if !(self.x_max >= floor * (1.0 - 1e-12)) {
            return Err(Error::param("x_max", format!("must be at least {floor}, got {}", self.x_max)));
        }
        if self.x_max / self.step > 5e8 {
            return Err(Error::param("step", "grid would exceed 5e8 points"));
        }
        for (name, v) in [
            ("r_tolerance", self.r_tolerance),
            ("w_zero_tolerance", self.w_zero_tolerance),
            ("delta", self.delta),
            ("split_tolerance", self.split_tolerance),
            ("residual_tolerance", self.residual_tolerance),
        ] {
            if !(v > 0.0) {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        if self.max_bisection_iters == 0 {
            return Err(Error::param("max_bisection_iters", "must be at least 1"));
        }
        Ok(())
    }

    fn grid_len(&self) -> usize {
        (self.x_max / self.step).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Classification {
    LocalMax,
    HitZero,
    Converged,
    Exhausted,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::LocalMax => "LocalMax",
            Classification::HitZero => "HitZero",
            Classification::Converged => "Converged",
            Classification::Exhausted => "Exhausted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectorySample {
    pub x: f64,
    pub w: f64,
    pub dw: f64,
    /// Running integral of `w` from the origin.
    pub integral: f64,
}

#[derive(Debug, Clone)]
pub struct TrajectoryOutcome {
    pub r: f64,
    pub classification: Classification,
    pub x_event: f64,
    /// Interpolated `W'` at the crossing for `HitZero`.
    pub crossing_slope: Option<f64>,
    pub samples: Vec<TrajectorySample>,
    pub diagnostic: Option<String>,
}

impl TrajectoryOutcome {
    /// Samples strictly before the terminating event.
    pub fn regular_samples(&self) -> &[TrajectorySample] {
        match self.classification {
            Classification::Converged => &self.samples,
            _ => &self.samples[..self.samples.len().saturating_sub(1)],
        }
    }
}

#[derive(Debug, Clone)]
enum Nonlinearity {
    Conjugate(ConjugatePair),
    Zero,
}

impl Nonlinearity {
    fn eval(&self, w: f64, extended: bool) -> Result<f64> {
        match self {
            Nonlinearity::Zero => Ok(0.0),
            Nonlinearity::Conjugate(pair) if extended => Ok(pair.f_tilde(w)),
            Nonlinearity::Conjugate(pair) => {
                if w < 0.0 {
                    pair.f(w)
                } else {
                    Err(Error::Domain {
                        y: w,
                        reason: "trajectory reached zero without the extension",
                    })
                }
            }
        }
    }

    fn exact(&self, w: f64) -> Result<f64> {
        match self {
            Nonlinearity::Zero => Ok(0.0),
            Nonlinearity::Conjugate(pair) => pair.f(w),
        }
    }
}

/// The system marched by one trajectory.
struct Marcher<'a> {
    half_sigma2: f64,
    theta: f64,
    alpha: f64,
    h: f64,
    grid_len: usize,
    nonlinearity: &'a Nonlinearity,
    extended: bool,
}

#[derive(Debug, Clone, Copy)]
struct Start {
    index: usize,
    w: f64,
    integral: f64,
    constant: f64,
}

const OVERFLOW: f64 = 1e12;

impl Marcher<'_> {
    fn rhs(&self, x: f64, w: f64, integral: f64, constant: f64) -> Result<f64> {
        let f = self.nonlinearity.eval(w, self.extended)?;
        Ok((f + self.theta * x * w + self.alpha * (integral + constant)) / self.half_sigma2)
    }

    /// Integral-form constant that makes `W'(x) = slope` at a restart point.
    fn constant_for_slope(&self, x: f64, w: f64, integral: f64, slope: f64) -> Result<f64> {
        let f = self.nonlinearity.eval(w, self.extended)?;
        Ok((self.half_sigma2 * slope - f - self.theta * x * w) / self.alpha - integral)
    }

    fn x_at(&self, index: usize) -> f64 {
        index as f64 * self.h
    }

    fn march(&self, r: f64, start: Start) -> TrajectoryOutcome {
        let h = self.h;
        let mut samples = Vec::with_capacity(1024);
        let mut x = self.x_at(start.index);
        let mut w = start.w;
        let mut integral = start.integral;
        let k = start.constant;
        let finish = |classification, x_event, crossing_slope, samples, diagnostic| TrajectoryOutcome {
            r,
            classification,
            x_event,
            crossing_slope,
            samples,
            diagnostic,
        };

        let mut dw = match self.rhs(x, w, integral, k) {
            Ok(v) => v,
            Err(e) => {
                return finish(Classification::HitZero, x, None, samples, Some(e.to_string()));
            }
        };
        samples.push(TrajectorySample { x, w, dw, integral });
        if dw <= 0.0 && w < 0.0 {
            return finish(Classification::LocalMax, x, None, samples, None);
        }

        for index in start.index + 1..=self.grid_len {
            let x_new = self.x_at(index);
            let stepped = (|| -> Result<(f64, f64)> {
                let k1w = dw;
                let k1i = w;
                let k2w = self.rhs(x + 0.5 * h, w + 0.5 * h * k1w, integral + 0.5 * h * k1i, k)?;
                let k2i = w + 0.5 * h * k1w;
                let k3w = self.rhs(x + 0.5 * h, w + 0.5 * h * k2w, integral + 0.5 * h * k2i, k)?;
                let k3i = w + 0.5 * h * k2w;
                let k4w = self.rhs(x_new, w + h * k3w, integral + h * k3i, k)?;
                let k4i = w + h * k3w;
                Ok((
                    w + h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w),
                    integral + h / 6.0 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i),
                ))
            })();
            let (w_new, integral_new) = match stepped {
                Ok(v) => v,
                Err(_) => {
                    // An intermediate stage touched W >= 0: extrapolate the crossing.
                    let x_c = if dw > 0.0 { (x - w / dw).min(x_new) } else { x_new };
                    return finish(Classification::HitZero, x_c, Some(dw), samples, None);
                }
            };
            if !w_new.is_finite() || w_new.abs() > OVERFLOW || !integral_new.is_finite() {
                let msg = format!("|W| overflowed near x = {x_new:.6} (W = {w_new:e})");
                return finish(Classification::Exhausted, x_new, None, samples, Some(msg));
            }
            if w_new >= 0.0 {
                let dw_new = self.rhs(x_new, w_new, integral_new, k).unwrap_or(dw);
                samples.push(TrajectorySample {
                    x: x_new,
                    w: w_new,
                    dw: dw_new,
                    integral: integral_new,
                });
                let frac = w / (w - w_new);
                let slope = dw + frac * (dw_new - dw);
                return finish(Classification::HitZero, x + frac * h, Some(slope), samples, None);
            }
            let dw_new = match self.rhs(x_new, w_new, integral_new, k) {
                Ok(v) => v,
                Err(e) => {
                    return finish(Classification::HitZero, x_new, Some(dw), samples, Some(e.to_string()));
                }
            };
            samples.push(TrajectorySample {
                x: x_new,
                w: w_new,
                dw: dw_new,
                integral: integral_new,
            });
            if dw_new <= 0.0 {
                let frac = dw / (dw - dw_new);
                return finish(Classification::LocalMax, x + frac * h, None, samples, None);
            }
            x = x_new;
            w = w_new;
            dw = dw_new;
            integral = integral_new;
        }
        finish(Classification::Converged, x, None, samples, None)
    }
}

/// Everything needed to run trajectories for one boundary-value problem.
struct Problem {
    half_sigma2: f64,
    theta: f64,
    alpha: f64,
    boundary_slope: f64,
    nonlinearity: Nonlinearity,
}

impl Problem {
    fn hjb(params: &DcpParams, cfg: &ShootingConfig) -> Result<Self> {
        params.validate()?;
        cfg.validate(params)?;
        Ok(Self {
            half_sigma2: params.half_sigma2(),
            theta: params.theta,
            alpha: params.alpha,
            boundary_slope: -params.p,
            nonlinearity: Nonlinearity::Conjugate(ConjugatePair::new(params.cost.clone(), cfg.delta)?),
        })
    }

    fn zero_control(params: &DcpParams, cfg: &ShootingConfig) -> Result<Self> {
        params.validate()?;
        cfg.validate(params)?;
        Ok(Self {
            half_sigma2: params.half_sigma2(),
            theta: params.theta,
            alpha: params.alpha,
            boundary_slope: -1.0,
            nonlinearity: Nonlinearity::Zero,
        })
    }

    fn marcher<'a>(&'a self, cfg: &ShootingConfig, extended: bool) -> Marcher<'a> {
        Marcher {
            half_sigma2: self.half_sigma2,
            theta: self.theta,
            alpha: self.alpha,
            h: cfg.step,
            grid_len: cfg.grid_len(),
            nonlinearity: &self.nonlinearity,
            extended,
        }
    }

    /// `K_r` for the trajectory leaving the origin with `W'(0) = r`.
    fn constant_at_origin(&self, r: f64) -> Result<f64> {
        let f = self.nonlinearity.exact(self.boundary_slope)?;
        Ok((self.half_sigma2 * r - f) / self.alpha)
    }

    fn origin(&self, r: f64) -> Result<Start> {
        Ok(Start {
            index: 0,
            w: self.boundary_slope,
            integral: 0.0,
            constant: self.constant_at_origin(r)?,
        })
    }
}

/// Marches `W_r` from the origin until the first classification event or `x_max`.
pub fn integrate_w(params: &DcpParams, cfg: &ShootingConfig, r: f64, use_extension: bool) -> Result<TrajectoryOutcome> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::param("r", format!("must be finite and non-negative, got {r}")));
    }
    let problem = Problem::hjb(params, cfg)?;
    let start = problem.origin(r)?;
    Ok(problem.marcher(cfg, use_extension).march(r, start))
}

/// One trajectory per entry of an ascending `r_grid`.
pub fn classify_sweep(params: &DcpParams, cfg: &ShootingConfig, r_grid: &[f64]) -> Result<Vec<TrajectoryOutcome>> {
    if r_grid.is_empty() {
        return Err(Error::param("r_grid", "must not be empty"));
    }
    if r_grid.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::param("r_grid", "must be sorted ascending"));
    }
    r_grid.iter().map(|&r| integrate_w(params, cfg, r, true)).collect()
}

/// Grid representation of the value function and its feedback policy.
#[derive(Debug, Clone)]
pub struct ValueFunctionSolution {
    pub r_star: f64,
    /// Smallest bisected `r` classified as crossing zero.
    pub r_upper: f64,
    pub k_r_star: f64,
    pub step: f64,
    pub x_max: f64,
    pub x: Vec<f64>,
    pub q: Vec<f64>,
    pub qp: Vec<f64>,
    pub qpp: Vec<f64>,
    pub max_residual: f64,
    /// Number of restarted shooting stages beyond the first.
    pub restarts: usize,
    pub bisection_iters: usize,
    w_zero_tolerance: f64,
    nonlinearity: NonlinearityHandle,
}

#[derive(Debug, Clone)]
enum NonlinearityHandle {
    Conjugate(CostFunction),
    Zero,
}

impl ValueFunctionSolution {
    pub fn q_at(&self, x: f64) -> f64 {
        interpolate(&self.q, self.step, x)
    }

    pub fn qp_at(&self, x: f64) -> f64 {
        interpolate(&self.qp, self.step, x)
    }

    pub fn q0(&self) -> f64 {
        self.q[0]
    }

    pub fn w_zero_tolerance(&self) -> f64 {
        self.w_zero_tolerance
    }

    /// Whether the policy at `x` relies on the cap on `Q'` or on extrapolation past `x_max`.
    pub fn policy_clipped_at(&self, x: f64) -> bool {
        x > self.x_max || self.qp_at(x) > -self.w_zero_tolerance
    }

    pub fn is_zero_control(&self) -> bool {
        matches!(self.nonlinearity, NonlinearityHandle::Zero)
    }

    pub fn cost(&self) -> Option<&CostFunction> {
        match &self.nonlinearity {
            NonlinearityHandle::Conjugate(c) => Some(c),
            NonlinearityHandle::Zero => None,
        }
    }

    /// HJB residual `sigma^2/2 Q'' - F(Q') - theta x Q' - alpha Q` at interior
    /// grid points, with `Q''` from central differences of `Q'`.
    pub fn residuals(&self, params: &DcpParams) -> Vec<f64> {
        let nl = match &self.nonlinearity {
            NonlinearityHandle::Conjugate(c) => Some(c),
            NonlinearityHandle::Zero => None,
        };
        interior_residuals(params, self.step, &self.x, &self.q, &self.qp, |y| match nl {
            Some(c) => crate::cost::legendre_eval(c, y).unwrap_or(f64::NAN),
            None => 0.0,
        })
    }

    /// Columnar records `(x, Q, Q', u*)` thinned to every `stride`-th grid point.
    pub fn records(&self, stride: usize) -> Vec<[f64; 4]> {
        let stride = stride.max(1);
        (0..self.x.len())
            .step_by(stride)
            .map(|i| [self.x[i], self.q[i], self.qp[i], evaluate_policy(self, self.x[i])])
            .collect()
    }
}

fn interior_residuals(
    params: &DcpParams,
    h: f64,
    x: &[f64],
    q: &[f64],
    qp: &[f64],
    f: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let half_sigma2 = params.half_sigma2();
    (1..x.len().saturating_sub(1))
        .map(|i| {
            let qpp = (qp[i + 1] - qp[i - 1]) / (2.0 * h);
            half_sigma2 * qpp - f(qp[i]) - params.theta * x[i] * qp[i] - params.alpha * q[i]
        })
        .collect()
}

fn interpolate(values: &[f64], h: f64, x: f64) -> f64 {
    let last = values.len() - 1;
    let pos = (x / h).max(0.0);
    let i = pos.floor() as usize;
    if i >= last {
        return values[last];
    }
    let frac = pos - i as f64;
    values[i] + frac * (values[i + 1] - values[i])
}

/// `u*(x) = F'(Q'(x))`, with `Q'` linearly interpolated, held constant past
/// `x_max`, and capped at `-w_zero_tolerance`.
pub fn evaluate_policy(sol: &ValueFunctionSolution, x: f64) -> f64 {
    match &sol.nonlinearity {
        NonlinearityHandle::Zero => 0.0,
        NonlinearityHandle::Conjugate(cost) => {
            let y = sol.qp_at(x).min(-sol.w_zero_tolerance);
            crate::cost::legendre_derivative(cost, y).unwrap_or(0.0)
        }
    }
}

struct Bracket {
    lo: TrajectoryOutcome,
    hi: TrajectoryOutcome,
    iters: usize,
}

enum StageResult {
    Converged(TrajectoryOutcome),
    Bracketed(Bracket),
}

fn bisect(
    cfg: &ShootingConfig,
    mut lo: TrajectoryOutcome,
    mut hi: TrajectoryOutcome,
    run: impl Fn(f64) -> TrajectoryOutcome,
    width_tolerance: f64,
) -> Result<StageResult> {
    let mut iters = 0;
    while iters < cfg.max_bisection_iters {
        let mid = 0.5 * (lo.r + hi.r);
        if !(mid > lo.r && mid < hi.r) {
            break;
        }
        iters += 1;
        let out = run(mid);
        match out.classification {
            Classification::LocalMax => lo = out,
            Classification::HitZero => hi = out,
            Classification::Converged => return Ok(StageResult::Converged(out)),
            Classification::Exhausted => {
                return Err(Error::Solver(format!(
                    "trajectory exhausted at r = {mid}: {}",
                    out.diagnostic.unwrap_or_default()
                )))
            }
        }
    }
    if hi.r - lo.r >= width_tolerance {
        return Err(Error::Solver(format!(
            "bisection stopped with bracket [{}, {}] wider than {width_tolerance}",
            lo.r, hi.r
        )));
    }
    Ok(StageResult::Bracketed(Bracket { lo, hi, iters }))
}

/// First index (on the global grid) at which the two trajectories disagree.
fn split_index(lo: &TrajectoryOutcome, hi: &TrajectoryOutcome, tol: f64) -> usize {
    let a = lo.regular_samples();
    let b = hi.regular_samples();
    let n = a.len().min(b.len());
    let first = (0..n)
        .find(|&i| (a[i].w - b[i].w).abs() > tol || (a[i].dw - b[i].dw).abs() > tol)
        .unwrap_or(n);
    first.saturating_sub(1)
}

struct Shot {
    r_lo: f64,
    r_hi: f64,
    k: f64,
    samples: Vec<TrajectorySample>,
    restarts: usize,
    iters: usize,
}

fn shoot(problem: &Problem, cfg: &ShootingConfig) -> Result<Shot> {
    let marcher = problem.marcher(cfg, true);
    let from_origin = |r: f64| -> TrajectoryOutcome {
        match problem.origin(r) {
            Ok(start) => marcher.march(r, start),
            Err(e) => TrajectoryOutcome {
                r,
                classification: Classification::Exhausted,
                x_event: 0.0,
                crossing_slope: None,
                samples: Vec::new(),
                diagnostic: Some(e.to_string()),
            },
        }
    };

    let lo = from_origin(0.0);
    if lo.classification != Classification::LocalMax {
        return Err(Error::Solver(format!("r = 0 classified {:?}, expected LocalMax", lo.classification)));
    }
    let mut lo = lo;
    let mut r = 1.0;
    let mut sweep = Vec::new();
    let hi = loop {
        let out = from_origin(r);
        sweep.push(format!("r={r}:{}", out.classification.as_str()));
        match out.classification {
            Classification::HitZero => break out,
            Classification::LocalMax => lo = out,
            Classification::Converged => {
                return finish_shot(problem, r, r, vec![out], 0, 0);
            }
            Classification::Exhausted => {
                return Err(Error::Solver(format!("trajectory exhausted while bracketing at r = {r}")));
            }
        }
        if r >= f64::from(2u32.pow(cfg.max_doublings.min(30))) {
            return Err(Error::Solver(format!(
                "no crossing trajectory found up to r = {r}; sweep: {}",
                sweep.join(", ")
            )));
        }
        r *= 2.0;
    };

    let mut iters = 0;
    let first = bisect(cfg, lo, hi, from_origin, cfg.r_tolerance)?;
    let (r_lo, r_hi, mut bracket) = match first {
        StageResult::Converged(out) => {
            let r = out.r;
            return finish_shot(problem, r, r, vec![out], 0, 0);
        }
        StageResult::Bracketed(b) => (b.lo.r, b.hi.r, b),
    };
    iters += bracket.iters;

    let mut pieces: Vec<TrajectoryOutcome> = Vec::new();
    let mut restarts = 0;
    loop {
        let j = split_index(&bracket.lo, &bracket.hi, cfg.split_tolerance);
        if j == 0 {
            return Err(Error::Solver(format!(
                "restart stalled at x = {:.6}: bracketing trajectories separate immediately",
                bracket.lo.samples[0].x
            )));
        }
        let anchor = bracket.lo.samples[j];
        let slope_lo = bracket.lo.samples[j].dw;
        let slope_hi = bracket.hi.samples[j].dw;
        let mut head = bracket.lo;
        head.samples.truncate(j);
        pieces.push(head);
        restarts += 1;

        let index = (anchor.x / cfg.step).round() as usize;
        let restart = |s: f64| -> TrajectoryOutcome {
            match marcher.constant_for_slope(anchor.x, anchor.w, anchor.integral, s) {
                Ok(constant) => marcher.march(
                    s,
                    Start {
                        index,
                        w: anchor.w,
                        integral: anchor.integral,
                        constant,
                    },
                ),
                Err(e) => TrajectoryOutcome {
                    r: s,
                    classification: Classification::Exhausted,
                    x_event: anchor.x,
                    crossing_slope: None,
                    samples: Vec::new(),
                    diagnostic: Some(e.to_string()),
                },
            }
        };

        let (lo, hi) = match restart_bracket(slope_lo, slope_hi, &restart)? {
            RestartBracket::Converged(out) => {
                pieces.push(out);
                break;
            }
            RestartBracket::Pair(lo, hi) => (lo, hi),
        };
        match bisect(cfg, lo, hi, restart, f64::INFINITY)? {
            StageResult::Converged(out) => {
                iters += 0;
                pieces.push(out);
                break;
            }
            StageResult::Bracketed(b) => {
                iters += b.iters;
                bracket = b;
            }
        }
        if restarts > 100_000 {
            return Err(Error::Solver("too many restarts".into()));
        }
    }
    let mut shot = finish_shot(problem, r_lo, r_hi, pieces, restarts, iters)?;
    shot.iters = iters;
    Ok(shot)
}

enum RestartBracket {
    Converged(TrajectoryOutcome),
    Pair(TrajectoryOutcome, TrajectoryOutcome),
}

fn restart_bracket(
    slope_lo: f64,
    slope_hi: f64,
    run: &impl Fn(f64) -> TrajectoryOutcome,
) -> Result<RestartBracket> {
    let mut gap = (slope_hi - slope_lo).max(f64::EPSILON * slope_lo.abs().max(1e-300));
    let mut s_lo = slope_lo;
    let lo = loop {
        let out = run(s_lo);
        match out.classification {
            Classification::LocalMax => break out,
            Classification::Converged => return Ok(RestartBracket::Converged(out)),
            Classification::HitZero => {
                s_lo -= gap;
                gap *= 2.0;
            }
            Classification::Exhausted => return Err(Error::Solver("restart trajectory exhausted".into())),
        }
        if gap > 1e6 {
            return Err(Error::Solver("could not re-bracket restart slope from below".into()));
        }
    };
    let mut gap = (slope_hi - slope_lo).max(f64::EPSILON * slope_hi.abs().max(1e-300));
    let mut s_hi = slope_hi;
    let hi = loop {
        let out = run(s_hi);
        match out.classification {
            Classification::HitZero => break out,
            Classification::Converged => return Ok(RestartBracket::Converged(out)),
            Classification::LocalMax => {
                s_hi += gap;
                gap *= 2.0;
            }
            Classification::Exhausted => return Err(Error::Solver("restart trajectory exhausted".into())),
        }
        if gap > 1e6 {
            return Err(Error::Solver("could not re-bracket restart slope from above".into()));
        }
    };
    Ok(RestartBracket::Pair(lo, hi))
}

fn finish_shot(
    problem: &Problem,
    r_lo: f64,
    r_hi: f64,
    pieces: Vec<TrajectoryOutcome>,
    restarts: usize,
    iters: usize,
) -> Result<Shot> {
    let samples: Vec<TrajectorySample> = pieces.into_iter().flat_map(|p| p.samples).collect();
    Ok(Shot {
        r_lo,
        r_hi,
        k: problem.constant_at_origin(r_lo)?,
        samples,
        restarts,
        iters,
    })
}

fn assemble(
    params: &DcpParams,
    cfg: &ShootingConfig,
    shot: Shot,
    nonlinearity: NonlinearityHandle,
    boundary_slope: f64,
) -> Result<ValueFunctionSolution> {
    let n = cfg.grid_len() + 1;
    if shot.samples.len() != n {
        return Err(Error::Solver(format!(
            "assembled {} samples, expected {n} grid points",
            shot.samples.len()
        )));
    }
    let x: Vec<f64> = shot.samples.iter().map(|s| s.x).collect();
    let qp: Vec<f64> = shot.samples.iter().map(|s| s.w).collect();
    let qpp: Vec<f64> = shot.samples.iter().map(|s| s.dw).collect();
    let q: Vec<f64> = shot.samples.iter().map(|s| s.integral + shot.k).collect();
    let mut sol = ValueFunctionSolution {
        r_star: shot.r_lo,
        r_upper: shot.r_hi,
        k_r_star: shot.k,
        step: cfg.step,
        x_max: x[n - 1],
        x,
        q,
        qp,
        qpp,
        max_residual: 0.0,
        restarts: shot.restarts,
        bisection_iters: shot.iters,
        w_zero_tolerance: cfg.w_zero_tolerance,
        nonlinearity,
    };
    sol.max_residual = sol
        .residuals(params)
        .iter()
        .fold(0.0_f64, |m, r| if r.is_nan() { f64::INFINITY } else { m.max(r.abs()) });
    check_solution(&sol, cfg, boundary_slope)?;
    Ok(sol)
}

fn check_solution(sol: &ValueFunctionSolution, cfg: &ShootingConfig, boundary_slope: f64) -> Result<()> {
    let fail = |what: &str| Err(Error::Solver(format!("invariant violated: {what}")));
    if sol.qp[0] != boundary_slope {
        return fail(&format!("Q'(0) = {} != {boundary_slope}", sol.qp[0]));
    }
    if let Some(i) = sol.q.iter().position(|&v| !(v > 0.0)) {
        return fail(&format!("Q > 0 (Q = {} at x = {})", sol.q[i], sol.x[i]));
    }
    if let Some(i) = sol.qp.iter().position(|&v| !(v < 0.0 && v >= boundary_slope)) {
        return fail(&format!("{boundary_slope} <= Q' < 0 (Q' = {} at x = {})", sol.qp[i], sol.x[i]));
    }
    if let Some(i) = (1..sol.q.len()).find(|&i| !(sol.q[i] < sol.q[i - 1])) {
        return fail(&format!("Q strictly decreasing (at x = {})", sol.x[i]));
    }
    if let Some(i) = (1..sol.q.len() - 1).find(|&i| sol.q[i + 1] - 2.0 * sol.q[i] + sol.q[i - 1] < -1e-8) {
        return fail(&format!("Q convex (at x = {})", sol.x[i]));
    }
    if !(sol.max_residual <= cfg.residual_tolerance) {
        return fail(&format!(
            "HJB residual {:e} exceeds {:e}",
            sol.max_residual, cfg.residual_tolerance
        ));
    }
    Ok(())
}

/// Locates `r*` and assembles the value function `Q = Y_{r*}` on `[0, x_max]`.
pub fn shoot_r_star(params: &DcpParams, cfg: &ShootingConfig) -> Result<ValueFunctionSolution> {
    let problem = Problem::hjb(params, cfg)?;
    let shot = shoot(&problem, cfg)?;
    assemble(
        params,
        cfg,
        shot,
        NonlinearityHandle::Conjugate(params.cost.clone()),
        -params.p,
    )
}

/// Bounded solution of `sigma^2/2 U'' - theta x U' - alpha U = 0`, `U'(0) = -1`.
///
/// Under zero control the discounted cost is `C(0)/alpha + p U(x)`.
pub fn solve_zero_control(params: &DcpParams, cfg: &ShootingConfig) -> Result<ValueFunctionSolution> {
    let problem = Problem::zero_control(params, cfg)?;
    let shot = shoot(&problem, cfg)?;
    assemble(params, cfg, shot, NonlinearityHandle::Zero, -1.0)
}

/// Count of sign-pattern violations: a positive local maximum or a negative
/// local minimum of `W` among the samples.
pub fn trichotomy_violations(samples: &[TrajectorySample]) -> usize {
    samples
        .windows(2)
        .filter(|pair| {
            let (a, b) = (pair[0], pair[1]);
            let max_turn = a.dw > 0.0 && b.dw <= 0.0;
            let min_turn = a.dw < 0.0 && b.dw >= 0.0;
            (max_turn && a.w > 0.0) || (min_turn && a.w < 0.0)
        })
        .count()
}
