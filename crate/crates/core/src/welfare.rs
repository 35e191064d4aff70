//! Welfare accounting and the platform's traffic-allocation problem.
//!
//! `W(theta)` is always evaluated at an equilibrium induced by `theta`. The
//! equilibrium is reached by the damped joint solver from a caller-chosen
//! start and then polished by Newton steps on the reduced system
//! `n = M P(n, q*(n / M))`, so gradients and KKT residuals are accurate well
//! below the solver tolerance.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dynamics::{self, IntegratorConfig};
use crate::equilibrium::{self, FixedPointConfig};
use crate::error::{Error, Result};
use crate::model::{log_sum_exp, softmax, Market, MarketState, TrafficAllocation};
use crate::par;

/// Consumer surplus, producer surplus, platform profit and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WelfareBreakdown {
    pub consumer_surplus: f64,
    pub producer_surplus: f64,
    pub platform_profit: f64,
    pub total: f64,
}

impl WelfareBreakdown {
    fn new(consumer_surplus: f64, producer_surplus: f64, platform_profit: f64) -> Self {
        Self {
            consumer_surplus,
            producer_surplus,
            platform_profit,
            total: consumer_surplus + producer_surplus + platform_profit,
        }
    }
}

/// `M * logsumexp(V)`. Prices already sit inside `V`, so this is the
/// aggregate expected maximum utility net of payments.
pub fn consumer_surplus(
    market: &Market,
    state: &MarketState,
    theta: Option<&TrafficAllocation>,
) -> Result<f64> {
    let v = market.deterministic_utility(state, theta)?;
    Ok(market.n_viewers() * log_sum_exp(&v))
}

/// `sum_i (1 - tau) R n_i - c_i q_i^2`.
pub fn producer_surplus(market: &Market, state: &MarketState) -> Result<f64> {
    market.check_state(state)?;
    let pl = market.platform();
    let take = (1.0 - pl.tau) * pl.revenue_per_viewer;
    Ok(market
        .streamers()
        .iter()
        .zip(&state.n)
        .zip(&state.q)
        .map(|((s, &n), &q)| take * n - s.cost_coefficient * q * q)
        .sum())
}

/// `tau R M`; independent of the state.
pub fn platform_profit(market: &Market) -> f64 {
    let pl = market.platform();
    pl.tau * pl.revenue_per_viewer * pl.n_viewers
}

pub fn total_welfare(
    market: &Market,
    state: &MarketState,
    theta: Option<&TrafficAllocation>,
) -> Result<WelfareBreakdown> {
    Ok(WelfareBreakdown::new(
        consumer_surplus(market, state, theta)?,
        producer_surplus(market, state)?,
        platform_profit(market),
    ))
}

/// An equilibrium together with its welfare.
#[derive(Debug, Clone, PartialEq)]
pub struct WelfarePoint {
    pub state: MarketState,
    pub welfare: WelfareBreakdown,
}

/// Damped-solver tolerance, relative to `M`, that fixes which equilibrium
/// basin is selected before Newton polishing takes over.
pub const SELECTION_TOL: f64 = 1e-5;

/// Newton steps allowed per polish.
const NEWTON_MAX_ITER: usize = 60;

/// Iteration budget of the damped fallback, as a multiple of `max_iter`.
const FALLBACK_BUDGET: usize = 20;

/// Step halvings tried before a Newton polish gives up.
const NEWTON_BACKTRACKS: usize = 20;

/// Equilibrium induced by `theta` from `start`: damped joint iteration down
/// to `SELECTION_TOL * M`, then Newton polishing, falling back to the damped
/// solver at `cfg.tol` when Newton cannot reach it.
pub fn equilibrium_at(
    market: &Market,
    theta: &TrafficAllocation,
    start: &MarketState,
    cfg: &FixedPointConfig,
) -> Result<MarketState> {
    let coarse = FixedPointConfig {
        tol: cfg.tol.max(SELECTION_TOL * market.n_viewers()),
        ..*cfg
    };
    let eq = equilibrium::solve_joint_equilibrium_from(market, Some(theta), start, &coarse)?;
    if !eq.converged {
        return Err(Error::NoConvergence {
            what: "equilibrium under theta",
            residual: eq.residual.max(eq.quality_residual),
        });
    }
    let state = newton_polish(market, theta, eq.state);
    if max_abs(&reduced_residual(market, theta, &state.n).0) <= cfg.tol {
        return Ok(state);
    }
    // Newton stalled: just past a fold the reduced residual has a nonzero
    // local minimum that the damped iteration crosses only slowly.
    let patient = FixedPointConfig {
        max_iter: cfg.max_iter.saturating_mul(FALLBACK_BUDGET),
        ..*cfg
    };
    let eq = equilibrium::solve_joint_equilibrium_from(market, Some(theta), &state, &patient)?;
    if !eq.converged {
        return Err(Error::NoConvergence {
            what: "equilibrium under theta",
            residual: eq.residual.max(eq.quality_residual),
        });
    }
    Ok(eq.state)
}

pub fn welfare_at(
    market: &Market,
    theta: &TrafficAllocation,
    start: &MarketState,
    cfg: &FixedPointConfig,
) -> Result<WelfarePoint> {
    let state = equilibrium_at(market, theta, start, cfg)?;
    let welfare = total_welfare(market, &state, Some(theta))?;
    Ok(WelfarePoint { state, welfare })
}

/// `G(n) = n - M softmax(V(n, q*(n/M)))`.
fn reduced_residual(market: &Market, theta: &TrafficAllocation, n: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = market.n_viewers();
    let share: Vec<f64> = n.iter().map(|x| x / m).collect();
    let q = market.best_response_quality(&share);
    let p = market.probabilities(n, &q, Some(theta));
    let g = n.iter().zip(&p).map(|(ni, pi)| ni - m * pi).collect();
    (g, q)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Newton on the reduced system. Steps are kept only while they shrink the
/// residual 2-norm, so the polished point never leaves the solver's basin.
fn newton_polish(market: &Market, theta: &TrafficAllocation, state: MarketState) -> MarketState {
    let mut n = state.n.clone();
    let (mut g, mut q) = reduced_residual(market, theta, &n);
    let initial = norm2(&g);
    let mut res = initial;
    for _ in 0..NEWTON_MAX_ITER {
        if max_abs(&g) <= 1e-14 * market.n_viewers() {
            break;
        }
        let share: Vec<f64> = n.iter().map(|x| x / market.n_viewers()).collect();
        let p = market.probabilities(&n, &q, Some(theta));
        let j = DMatrix::identity(n.len(), n.len()) - covariance(&p) * coupling(market, &share);
        let Some(step) = j.lu().solve(&DVector::from_column_slice(&g)) else {
            break;
        };
        // Backtrack on the 2-norm, for which the Newton step is always a
        // descent direction; near a fold the full step overshoots.
        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..NEWTON_BACKTRACKS {
            let cand: Vec<f64> = n.iter().zip(step.iter()).map(|(a, d)| a - scale * d).collect();
            if cand.iter().all(|x| x.is_finite() && *x >= 0.0) {
                let (g2, q2) = reduced_residual(market, theta, &cand);
                let r2 = norm2(&g2);
                if r2 < res {
                    accepted = Some((cand, g2, q2, r2));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((cand, g2, q2, r2)) = accepted else {
            break;
        };
        n = cand;
        g = g2;
        q = q2;
        res = r2;
    }
    if res <= initial {
        MarketState { n, q, t: state.t }
    } else {
        state
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `S = diag(P) - P P^T`, the logit Jacobian `dP/dV`.
fn covariance(p: &[f64]) -> DMatrix<f64> {
    let k = p.len();
    DMatrix::from_fn(k, k, |i, j| if i == j { p[i] * (1.0 - p[i]) } else { -p[i] * p[j] })
}

/// `dV/dP` through quality best responses and the network term:
/// `diag(alpha_i q*'(P_i)) + beta M I`.
fn coupling(market: &Market, p: &[f64]) -> DMatrix<f64> {
    let pl = market.platform();
    let slope = market.best_response_slope(p);
    let diag: Vec<f64> = market
        .streamers()
        .iter()
        .zip(&slope)
        .map(|(s, b)| s.alpha * b + pl.beta * pl.n_viewers)
        .collect();
    DMatrix::from_diagonal(&DVector::from_vec(diag))
}

/// Which gradient drives the allocation optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum GradientRule {
    /// Exact `dW/dtheta` including the equilibrium response of `n` and `q`.
    #[default]
    Equilibrium,
    /// `M P_i / phi + R M P_i (1 - P_i) phi` with shares held fixed.
    FirstOrderCondition,
}

/// First-order-condition gradient with probabilities held fixed.
pub fn foc_gradient(
    market: &Market,
    state: &MarketState,
    theta: &TrafficAllocation,
) -> Result<Vec<f64>> {
    let v = market.deterministic_utility(state, Some(theta))?;
    let p = softmax(&v);
    let pl = market.platform();
    let m = pl.n_viewers;
    Ok(p.iter()
        .map(|&pi| m * pi / pl.phi + pl.revenue_per_viewer * m * pi * (1.0 - pi) * pl.phi)
        .collect())
}

/// Exact `dW/dtheta` at an equilibrium by implicit differentiation:
/// `phi (I - K S)^{-T} (M P - S diag(q*') (2 c q))`.
pub fn equilibrium_gradient(
    market: &Market,
    state: &MarketState,
    theta: &TrafficAllocation,
) -> Result<Vec<f64>> {
    let v = market.deterministic_utility(state, Some(theta))?;
    let p = softmax(&v);
    let pl = market.platform();
    let m = pl.n_viewers;
    let s = covariance(&p);
    let k = coupling(market, &p);
    let a = DMatrix::identity(p.len(), p.len()) - &k * &s;
    let slope = market.best_response_slope(&p);
    let marginal_cost = DVector::from_iterator(
        p.len(),
        market
            .streamers()
            .iter()
            .zip(&state.q)
            .zip(&slope)
            .map(|((st, &q), &b)| b * 2.0 * st.cost_coefficient * q),
    );
    let rhs = DVector::from_iterator(p.len(), p.iter().map(|pi| m * pi)) - &s * marginal_cost;
    let x = a
        .transpose()
        .lu()
        .solve(&rhs)
        .ok_or(Error::NoConvergence { what: "welfare gradient (singular equilibrium Jacobian)", residual: f64::INFINITY })?;
    Ok(x.iter().map(|xi| pl.phi * xi).collect())
}

pub fn gradient(
    rule: GradientRule,
    market: &Market,
    state: &MarketState,
    theta: &TrafficAllocation,
) -> Result<Vec<f64>> {
    match rule {
        GradientRule::Equilibrium => equilibrium_gradient(market, state, theta),
        GradientRule::FirstOrderCondition => foc_gradient(market, state, theta),
    }
}

/// Central differences of `W(theta)` along the simplex tangents
/// `e_i - 1/N`, re-solving the equilibrium at each probe. Comparable with
/// any analytic gradient after subtracting its mean.
pub fn numeric_gradient(
    market: &Market,
    theta: &TrafficAllocation,
    start: &MarketState,
    cfg: &FixedPointConfig,
    h: f64,
) -> Result<Vec<f64>> {
    let k = theta.len();
    let t = theta.as_slice();
    if t.iter().any(|&x| x < h) {
        return Err(Error::invalid("theta", format!("every share must exceed the probe step {h}")));
    }
    let probe = |i: usize, sign: f64| -> Result<f64> {
        let moved: Vec<f64> = t
            .iter()
            .enumerate()
            .map(|(j, &x)| x + sign * h * (f64::from(u8::from(i == j)) - 1.0 / k as f64))
            .collect();
        let moved = TrafficAllocation::from_projected(moved);
        Ok(welfare_at(market, &moved, start, cfg)?.welfare.total)
    };
    (0..k)
        .map(|i| Ok((probe(i, 1.0)? - probe(i, -1.0)?) / (2.0 * h)))
        .collect()
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn simplex_project(v: &[f64]) -> Result<TrafficAllocation> {
    if v.is_empty() {
        return Err(Error::invalid("v", "empty vector"));
    }
    crate::model::check_finite("v", v)?;
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut shift = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumulative += uj;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if uj - candidate > 0.0 {
            shift = candidate;
        }
    }
    let mut theta: Vec<f64> = v.iter().map(|x| (x - shift).max(0.0)).collect();
    // Remove rounding drift so the simplex invariant holds exactly enough.
    let total: f64 = theta.iter().sum();
    for x in &mut theta {
        *x /= total;
    }
    Ok(TrafficAllocation::from_projected(theta))
}

/// `max |g_i - lambda|` on the support and `max(0, g_i - lambda)` off it,
/// with `lambda` the mean gradient over the support.
pub fn kkt_residual(theta: &TrafficAllocation, g: &[f64]) -> f64 {
    let t = theta.as_slice();
    let support: Vec<usize> = (0..t.len()).filter(|&i| t[i] > 0.0).collect();
    let lambda = support.iter().map(|&i| g[i]).sum::<f64>() / support.len() as f64;
    (0..t.len())
        .map(|i| {
            if t[i] > 0.0 {
                (g[i] - lambda).abs()
            } else {
                (g[i] - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    /// Initial step of each backtracking search.
    pub step: f64,
    /// KKT residual at which the ascent stops.
    pub tol: f64,
    pub max_iter: usize,
    pub rule: GradientRule,
    pub equilibrium: FixedPointConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step: 0.1,
            tol: 1e-8,
            max_iter: 5_000,
            rule: GradientRule::Equilibrium,
            equilibrium: FixedPointConfig::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("step", "must be > 0"));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::invalid("tol", "must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter", "must be >= 1"));
        }
        self.equilibrium.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationSolution {
    pub theta: TrafficAllocation,
    pub welfare: f64,
    pub breakdown: WelfareBreakdown,
    pub state: MarketState,
    pub kkt_residual: f64,
    /// Indices with `theta_i == 0`.
    pub active_set: Vec<usize>,
    pub iterations: usize,
    /// `kkt_residual <= tol` at exit.
    pub converged: bool,
}

impl AllocationSolution {
    pub fn is_interior(&self) -> bool {
        self.active_set.is_empty()
    }
}

/// Projected gradient ascent from `init`, equilibria solved from the
/// perturbed symmetric start.
pub fn optimize_allocation(
    market: &Market,
    init: &TrafficAllocation,
    cfg: &OptimizerConfig,
) -> Result<AllocationSolution> {
    optimize_allocation_from(market, init, &market.perturbed_symmetric_start(), cfg)
}

/// Projected gradient ascent with a halving sufficient-increase line
/// search, followed by Newton refinement of the first-order conditions on
/// the support once the ascent stalls. Each candidate's equilibrium is
/// solved from the current one, so the ascent stays on one equilibrium
/// branch.
pub fn optimize_allocation_from(
    market: &Market,
    init: &TrafficAllocation,
    start: &MarketState,
    cfg: &OptimizerConfig,
) -> Result<AllocationSolution> {
    cfg.validate()?;
    market.check_theta(Some(init))?;
    let mut theta = init.clone();
    let mut point = welfare_at(market, &theta, start, &cfg.equilibrium)?;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let g = gradient(cfg.rule, market, &point.state, &theta)?;
        if kkt_residual(&theta, &g) <= cfg.tol {
            break;
        }
        let Some((next_theta, next_point)) = line_search(market, &theta, &point, &g, cfg)? else {
            break;
        };
        let moved = max_abs_diff(next_theta.as_slice(), theta.as_slice());
        theta = next_theta;
        point = next_point;
        iterations += 1;
        if moved < STALL_STEP {
            break;
        }
    }
    let g = gradient(cfg.rule, market, &point.state, &theta)?;
    let mut residual = kkt_residual(&theta, &g);
    if residual > cfg.tol {
        (theta, point, residual) = support_newton(market, theta, point, residual, cfg)?;
    }
    let active_set = (0..theta.len()).filter(|&i| theta.as_slice()[i] == 0.0).collect();
    Ok(AllocationSolution {
        welfare: point.welfare.total,
        breakdown: point.welfare,
        state: point.state,
        kkt_residual: residual,
        active_set,
        iterations,
        converged: residual <= cfg.tol,
        theta,
    })
}

/// Accepted moves below this max-norm size end the gradient phase.
const STALL_STEP: f64 = 1e-13;

/// Finite-difference step for the support Hessian.
const HESSIAN_STEP: f64 = 1e-6;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Newton on `g_i - g_base = 0` over the support, along the tangents
/// `e_i - e_base`. Steps are kept only if they stay inside the support,
/// shrink the KKT residual and lose no more than roundoff in `W`.
fn support_newton(
    market: &Market,
    mut theta: TrafficAllocation,
    mut point: WelfarePoint,
    mut residual: f64,
    cfg: &OptimizerConfig,
) -> Result<(TrafficAllocation, WelfarePoint, f64)> {
    let reduced = |t: &TrafficAllocation, st: &MarketState, support: &[usize]| -> Result<Vec<f64>> {
        let g = gradient(cfg.rule, market, st, t)?;
        Ok(support[1..].iter().map(|&i| g[i] - g[support[0]]).collect())
    };
    let shifted = |t: &TrafficAllocation, support: &[usize], delta: &[f64]| {
        let mut v = t.as_slice().to_vec();
        for (&i, d) in support[1..].iter().zip(delta) {
            v[i] += d;
            v[support[0]] -= d;
        }
        v
    };
    for _ in 0..20 {
        let support: Vec<usize> = (0..theta.len()).filter(|&i| theta.as_slice()[i] > 0.0).collect();
        let k = support.len() - 1;
        if k == 0 || support.iter().any(|&i| theta.as_slice()[i] <= HESSIAN_STEP) {
            break;
        }
        let r = reduced(&theta, &point.state, &support)?;
        let mut h = DMatrix::zeros(k, k);
        for l in 0..k {
            let mut e = vec![0.0; k];
            e[l] = HESSIAN_STEP;
            let plus = TrafficAllocation::from_projected(shifted(&theta, &support, &e));
            e[l] = -HESSIAN_STEP;
            let minus = TrafficAllocation::from_projected(shifted(&theta, &support, &e));
            let sp = equilibrium_at(market, &plus, &point.state, &cfg.equilibrium)?;
            let sm = equilibrium_at(market, &minus, &point.state, &cfg.equilibrium)?;
            let (rp, rm) = (reduced(&plus, &sp, &support)?, reduced(&minus, &sm, &support)?);
            for j in 0..k {
                h[(j, l)] = (rp[j] - rm[j]) / (2.0 * HESSIAN_STEP);
            }
        }
        let Some(delta) = h.lu().solve(&DVector::from_iterator(k, r.iter().map(|x| -x))) else {
            break;
        };
        let cand = shifted(&theta, &support, delta.as_slice());
        if support.iter().any(|&i| cand[i] <= 0.0) {
            break;
        }
        let cand = TrafficAllocation::from_projected(cand);
        let next = welfare_at(market, &cand, &point.state, &cfg.equilibrium)?;
        let next_residual = kkt_residual(&cand, &gradient(cfg.rule, market, &next.state, &cand)?);
        let floor = point.welfare.total - 1e-12 * point.welfare.total.abs().max(1.0);
        if next_residual >= residual || next.welfare.total < floor {
            break;
        }
        theta = cand;
        point = next;
        residual = next_residual;
        if residual <= cfg.tol {
            break;
        }
    }
    Ok((theta, point, residual))
}

/// Sufficient-increase fraction of the line search. At one half, accepted
/// steps on a quadratic never overshoot the maximiser along the search path.
const ARMIJO: f64 = 0.5;

/// Halves from `cfg.step` until the projected step gains at least
/// `ARMIJO` of its first-order prediction. `None` when no step qualifies.
fn line_search(
    market: &Market,
    theta: &TrafficAllocation,
    point: &WelfarePoint,
    g: &[f64],
    cfg: &OptimizerConfig,
) -> Result<Option<(TrafficAllocation, WelfarePoint)>> {
    let mut step = cfg.step;
    while step > 1e-18 {
        let raw: Vec<f64> = theta.as_slice().iter().zip(g).map(|(t, gi)| t + step * gi).collect();
        let cand = simplex_project(&raw)?;
        if cand == *theta {
            return Ok(None);
        }
        let next = welfare_at(market, &cand, &point.state, &cfg.equilibrium)?;
        let predicted: f64 =
            g.iter().zip(cand.as_slice()).zip(theta.as_slice()).map(|((gi, c), t)| gi * (c - t)).sum();
        if next.welfare.total >= point.welfare.total + ARMIJO * predicted {
            return Ok(Some((cand, next)));
        }
        step *= 0.5;
    }
    Ok(None)
}

/// Uniform allocation, every vertex and every edge midpoint.
pub fn default_starts(n: usize) -> Vec<TrafficAllocation> {
    let mut starts = vec![TrafficAllocation::uniform(n)];
    starts.extend((0..n).map(|k| TrafficAllocation::vertex(n, k)));
    for i in 0..n {
        for j in i + 1..n {
            let mut v = vec![0.0; n];
            v[i] = 0.5;
            v[j] = 0.5;
            starts.push(TrafficAllocation::from_projected(v));
        }
    }
    starts
}

/// Runs [`optimize_allocation`] from every start in parallel and keeps the
/// highest welfare (earliest start on ties).
pub fn optimize_allocation_multistart(
    market: &Market,
    starts: &[TrafficAllocation],
    cfg: &OptimizerConfig,
) -> Result<AllocationSolution> {
    if starts.is_empty() {
        return Err(Error::invalid("starts", "need at least one start"));
    }
    let runs = par::try_map(starts, |s| optimize_allocation(market, s, cfg))?;
    Ok(runs
        .into_iter()
        .reduce(|best, r| if r.welfare > best.welfare { r } else { best })
        .expect("non-empty"))
}

/// All points of the simplex with coordinates in multiples of `1 / steps`.
pub fn simplex_grid(n: usize, steps: usize) -> Vec<Vec<f64>> {
    fn fill(prefix: &mut Vec<usize>, n: usize, left: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() + 1 == n {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            fill(prefix, n, left - k, out);
            prefix.pop();
        }
    }
    let mut counts = Vec::new();
    if n > 0 {
        fill(&mut Vec::with_capacity(n), n, steps, &mut counts);
    }
    counts
        .into_iter()
        .map(|c| c.into_iter().map(|k| k as f64 / steps as f64).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOptimum {
    pub theta: TrafficAllocation,
    pub welfare: f64,
    pub points: usize,
}

/// Exhaustive search of `W` over the simplex grid with spacing `resolution`,
/// every equilibrium solved from the perturbed symmetric start.
pub fn grid_search_allocation(
    market: &Market,
    resolution: f64,
    cfg: &FixedPointConfig,
) -> Result<GridOptimum> {
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(Error::invalid("resolution", "must be in (0, 1]"));
    }
    let steps = (1.0 / resolution).round() as usize;
    let grid = simplex_grid(market.n_streamers(), steps);
    let start = market.perturbed_symmetric_start();
    let values = par::try_map(&grid, |t| {
        let theta = TrafficAllocation::from_projected(t.clone());
        Ok::<f64, Error>(welfare_at(market, &theta, &start, cfg)?.welfare.total)
    })?;
    let best = (0..values.len())
        .reduce(|b, i| if values[i] > values[b] { i } else { b })
        .expect("grid is non-empty");
    Ok(GridOptimum {
        theta: TrafficAllocation::from_projected(grid[best].clone()),
        welfare: values[best],
        points: grid.len(),
    })
}

/// One sample of a dynamic allocation path.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationStep {
    pub t: f64,
    pub theta: TrafficAllocation,
    pub welfare: WelfareBreakdown,
}

/// Greedy re-optimisation: every `reopt_every` time units the allocation is
/// re-optimised, warm-started from the previous one (uniform at first), for
/// the equilibrium reachable from the current state, then held fixed while
/// the dynamics run. Not an optimal-control solution.
pub fn myopic_dynamic_allocation(
    market: &Market,
    state0: &MarketState,
    horizon: f64,
    reopt_every: f64,
    integrator: &IntegratorConfig,
    cfg: &OptimizerConfig,
) -> Result<Vec<AllocationStep>> {
    let mut previous = TrafficAllocation::uniform(market.n_streamers());
    allocation_path(market, state0, horizon, reopt_every, integrator, |state| {
        previous = optimize_allocation_from(market, &previous, state, cfg)?.theta;
        Ok(previous.clone())
    })
}

/// The same path with `theta` held fixed throughout; the naive baseline.
pub fn fixed_allocation_path(
    market: &Market,
    theta: &TrafficAllocation,
    state0: &MarketState,
    horizon: f64,
    integrator: &IntegratorConfig,
) -> Result<Vec<AllocationStep>> {
    allocation_path(market, state0, horizon, horizon, integrator, |_| Ok(theta.clone()))
}

fn allocation_path<F>(
    market: &Market,
    state0: &MarketState,
    horizon: f64,
    reopt_every: f64,
    integrator: &IntegratorConfig,
    mut choose: F,
) -> Result<Vec<AllocationStep>>
where
    F: FnMut(&MarketState) -> Result<TrafficAllocation>,
{
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::invalid("horizon", "must be > 0"));
    }
    if !(reopt_every > 0.0 && reopt_every.is_finite()) {
        return Err(Error::invalid("reopt_every", "must be > 0"));
    }
    integrator.validate()?;
    market.check_state(state0)?;
    let mut path = Vec::new();
    let mut state = state0.clone();
    let mut t0 = 0.0;
    while horizon - t0 > 1e-9 * horizon {
        let theta = choose(&state)?;
        let span = reopt_every.min(horizon - t0);
        let seg = dynamics::integrate(market, Some(&theta), &state, &IntegratorConfig { t_end: span, ..*integrator })?;
        // Segment starts after the first repeat the previous segment's end.
        let skip = usize::from(!path.is_empty());
        for (t, s) in seg.times.iter().zip(&seg.states).skip(skip) {
            path.push(AllocationStep {
                t: t0 + t,
                theta: theta.clone(),
                welfare: total_welfare(market, s, Some(&theta))?,
            });
        }
        state = seg.terminal().clone();
        t0 += span;
    }
    Ok(path)
}

/// Trapezoidal time average of total welfare along a path.
pub fn time_average_welfare(path: &[AllocationStep]) -> f64 {
    match path {
        [] => f64::NAN,
        [only] => only.welfare.total,
        _ => {
            let area: f64 = path
                .windows(2)
                .map(|w| 0.5 * (w[0].welfare.total + w[1].welfare.total) * (w[1].t - w[0].t))
                .sum();
            area / (path[path.len() - 1].t - path[0].t)
        }
    }
}

/// Welfare at a dispersed (low-beta) and a concentrated (high-beta)
/// equilibrium of otherwise identical markets, without promotion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadEffectReport {
    pub beta_dispersed: f64,
    pub beta_concentrated: f64,
    pub dispersed: WelfareBreakdown,
    pub concentrated: WelfareBreakdown,
    pub dispersed_max_share: f64,
    pub concentrated_max_share: f64,
    /// Producer surplus of every streamer in the concentrated state.
    pub concentrated_streamer_surplus: Vec<f64>,
    pub dominant: usize,
}

impl HeadEffectReport {
    /// `concentrated - dispersed` for each component.
    pub fn deltas(&self) -> WelfareBreakdown {
        WelfareBreakdown::new(
            self.concentrated.consumer_surplus - self.dispersed.consumer_surplus,
            self.concentrated.producer_surplus - self.dispersed.producer_surplus,
            self.concentrated.platform_profit - self.dispersed.platform_profit,
        )
    }
}

pub fn head_effect_welfare_comparison(
    market: &Market,
    beta_dispersed: f64,
    beta_concentrated: f64,
    cfg: &FixedPointConfig,
) -> Result<HeadEffectReport> {
    let solve = |beta: f64| -> Result<(Market, equilibrium::EquilibriumResult)> {
        let mk = market.with_beta(beta)?;
        let eq = equilibrium::solve_joint_equilibrium(&mk, None, cfg)?;
        if !eq.converged {
            return Err(Error::NoConvergence {
                what: "head-effect equilibrium",
                residual: eq.residual.max(eq.quality_residual),
            });
        }
        Ok((mk, eq))
    };
    let (low, low_eq) = solve(beta_dispersed)?;
    let (high, high_eq) = solve(beta_concentrated)?;
    let concentrated_streamer_surplus = (0..high.n_streamers())
        .map(|i| high.streamer_profit(i, high_eq.state.n[i], high_eq.state.q[i]))
        .collect::<Result<Vec<f64>>>()?;
    Ok(HeadEffectReport {
        beta_dispersed,
        beta_concentrated,
        dispersed: total_welfare(&low, &low_eq.state, None)?,
        concentrated: total_welfare(&high, &high_eq.state, None)?,
        dispersed_max_share: low_eq.max_share(),
        concentrated_max_share: high_eq.max_share(),
        concentrated_streamer_surplus,
        dominant: high_eq.dominant(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PlatformParams, StreamerParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn market3(alphas: [f64; 3], costs: [f64; 3], beta: f64, revenue: f64) -> Market {
        let mut pl = PlatformParams::new(3, 100.0);
        pl.beta = beta;
        pl.revenue_per_viewer = revenue;
        let st = alphas.iter().zip(&costs).map(|(&a, &c)| StreamerParams::new(a, 1.0, c)).collect();
        Market::new(pl, st).unwrap()
    }

    fn symmetric3(beta: f64) -> Market {
        market3([1.0; 3], [1.0; 3], beta, 0.2)
    }

    #[test]
    fn platform_profit_hand_value_and_linearity() {
        let mut pl = PlatformParams::new(2, 1000.0);
        let mk = Market::symmetric(pl.clone(), StreamerParams::new(1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(platform_profit(&mk), 200.0, max_relative = 1e-15);
        pl.tau = 0.4;
        let doubled = mk.with_platform(pl.clone()).unwrap();
        assert_relative_eq!(platform_profit(&doubled), 400.0, max_relative = 1e-15);
        pl.tau = 0.0;
        assert_eq!(platform_profit(&mk.with_platform(pl).unwrap()), 0.0);
    }

    #[test]
    fn single_streamer_surplus_is_net_utility() {
        let mut pl = PlatformParams::new(1, 50.0);
        pl.prices = vec![0.3];
        let mk = Market::new(pl, vec![StreamerParams::new(2.0, 1.0, 1.0)]).unwrap();
        let state = MarketState::new(vec![50.0], vec![0.7]).unwrap();
        let cs = consumer_surplus(&mk, &state, None).unwrap();
        assert_relative_eq!(cs, 50.0 * (2.0 * 0.7 - 0.3), max_relative = 1e-14);
    }

    #[test]
    fn uniform_price_rise_lowers_surplus_by_m_times_rise() {
        let mk = market3([1.0, 0.8, 1.2], [1.0; 3], 0.001, 0.2);
        let state = MarketState::new(vec![30.0, 50.0, 20.0], vec![0.5, 0.2, 0.9]).unwrap();
        let base = consumer_surplus(&mk, &state, None).unwrap();
        let mut pl = mk.platform().clone();
        pl.prices = vec![0.25; 3];
        let dearer = consumer_surplus(&mk.with_platform(pl).unwrap(), &state, None).unwrap();
        assert_relative_eq!(base - dearer, 100.0 * 0.25, max_relative = 1e-12);
    }

    #[test]
    fn producer_surplus_fixtures() {
        let mk = market3([1.0, 0.8, 1.2], [1.0, 2.0, 0.5], 0.0, 0.2);
        let zero = MarketState::new(vec![0.0; 3], vec![0.0; 3]).unwrap();
        assert_eq!(producer_surplus(&mk, &zero).unwrap(), 0.0);

        // One-hot audience: (1 - tau) R M - c q^2 summed over streamers.
        let one_hot = MarketState::new(vec![100.0, 0.0, 0.0], vec![0.6, 0.0, 0.0]).unwrap();
        let ps = producer_surplus(&mk, &one_hot).unwrap();
        assert!((ps - (0.8 * 0.2 * 100.0 - 0.36)).abs() < 1e-12);

        let mut pl = mk.platform().clone();
        pl.revenue_per_viewer = 0.6;
        let tripled = mk.with_platform(pl).unwrap();
        let state = MarketState::new(vec![30.0, 50.0, 20.0], vec![0.0; 3]).unwrap();
        assert_relative_eq!(
            producer_surplus(&tripled, &state).unwrap(),
            3.0 * producer_surplus(&mk, &state).unwrap(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn breakdown_sums_to_total() {
        let mk = market3([1.0, 0.8, 1.2], [1.0, 2.0, 0.5], 0.001, 0.2);
        let theta = TrafficAllocation::new(vec![0.2, 0.3, 0.5]).unwrap();
        let w = welfare_at(&mk, &theta, &mk.perturbed_symmetric_start(), &FixedPointConfig::default())
            .unwrap()
            .welfare;
        let sum = w.consumer_surplus + w.producer_surplus + w.platform_profit;
        assert!((w.total - sum).abs() <= 1e-9);
    }

    #[test]
    fn concentrated_surplus_matches_head_effect_approximation() {
        let mut pl = PlatformParams::new(3, 100.0);
        pl.beta = 0.2;
        let mk = Market::symmetric(pl, StreamerParams::new(1.0, 1.0, 1.0)).unwrap();
        let state = MarketState::new(vec![100.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]).unwrap();
        let v = mk.deterministic_utility(&state, None).unwrap();
        assert!(softmax(&v)[0] > 0.999);
        let cs = consumer_surplus(&mk, &state, None).unwrap();
        let approx = 100.0 * (1.0 * 2.0 - 0.0 + 0.2 * 100.0);
        assert!((cs - approx).abs() / approx < 0.01, "cs {cs} approx {approx}");
    }

    #[test]
    fn welfare_is_permutation_equivariant() {
        let mk = market3([1.0, 0.8, 1.2], [1.0, 2.0, 0.5], 0.001, 0.2);
        let theta = TrafficAllocation::new(vec![0.2, 0.3, 0.5]).unwrap();
        let cfg = FixedPointConfig::default();
        let w = welfare_at(&mk, &theta, &mk.symmetric_start(), &cfg).unwrap().welfare.total;
        let perm = [2, 0, 1];
        let pmk = mk.permuted(&perm).unwrap();
        let ptheta = TrafficAllocation::new(perm.iter().map(|&k| theta.as_slice()[k]).collect()).unwrap();
        let pw = welfare_at(&pmk, &ptheta, &pmk.symmetric_start(), &cfg).unwrap().welfare.total;
        assert_relative_eq!(w, pw, max_relative = 1e-10);
    }

    #[test]
    fn symmetric_instance_uniform_allocation_gives_symmetric_audiences() {
        let mk = symmetric3(0.001);
        let theta = TrafficAllocation::uniform(3);
        let p = welfare_at(&mk, &theta, &mk.perturbed_symmetric_start(), &FixedPointConfig::default()).unwrap();
        for n in &p.state.n {
            assert!((n - 100.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn foc_gradient_symmetry_and_limit() {
        let mk = symmetric3(0.001);
        let theta = TrafficAllocation::uniform(3);
        let state = MarketState::uniform(3, 100.0, 0.4);
        let g = foc_gradient(&mk, &state, &theta).unwrap();
        assert!(g.iter().all(|gi| (gi - g[0]).abs() < 1e-12));

        // A dominant option drives P_i -> 1 and the P(1 - P) term out.
        let mut pl = mk.platform().clone();
        pl.phi = 2.0;
        let mk = mk.with_platform(pl).unwrap();
        let state = MarketState::new(vec![100.0, 0.0, 0.0], vec![60.0, 0.0, 0.0]).unwrap();
        let g = foc_gradient(&mk, &state, &theta).unwrap();
        assert_relative_eq!(g[0], 100.0 / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn equilibrium_gradient_matches_finite_differences() {
        let cfg = FixedPointConfig::default();
        for (mk, theta) in [
            (market3([1.0, 0.8, 0.3], [1.0, 0.7, 1.5], 0.002, 0.05), vec![1.0 / 3.0; 3]),
            (market3([1.2, 0.6, 1.0], [0.5, 1.0, 2.0], 0.0005, 0.2), vec![0.5, 0.2, 0.3]),
        ] {
            let theta = TrafficAllocation::new(theta).unwrap();
            let start = mk.perturbed_symmetric_start();
            let point = welfare_at(&mk, &theta, &start, &cfg).unwrap();
            let g = equilibrium_gradient(&mk, &point.state, &theta).unwrap();
            let mean = g.iter().sum::<f64>() / 3.0;
            let fd = numeric_gradient(&mk, &theta, &start, &cfg, 1e-5).unwrap();
            let scale = g.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            for (gi, fi) in g.iter().zip(&fd) {
                assert!(((gi - mean) - fi).abs() < 1e-5 * scale, "{gi} vs {fi}");
            }
        }
    }

    #[test]
    fn projection_fixtures() {
        let on = vec![0.2, 0.5, 0.3];
        assert_eq!(simplex_project(&on).unwrap().as_slice(), on.as_slice());
        assert_eq!(simplex_project(&[2.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0]);
        assert_eq!(simplex_project(&[0.5, 0.5, 5.0]).unwrap().as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn projection_beats_every_grid_point() {
        let grid = simplex_grid(3, 100);
        for v in [[0.9, -0.4, 0.7], [3.0, 2.5, -1.0], [0.1, 0.1, 0.1], [-2.0, -1.0, -1.5]] {
            let p = simplex_project(&v).unwrap();
            let d = |x: &[f64]| x.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = grid.iter().map(|g| d(g)).fold(f64::INFINITY, f64::min);
            assert!(d(p.as_slice()) <= best + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_non_expansive(
            a in proptest::collection::vec(-5.0..5.0f64, 4),
            b in proptest::collection::vec(-5.0..5.0f64, 4),
        ) {
            let pa = simplex_project(&a).unwrap();
            prop_assert!(TrafficAllocation::new(pa.as_slice().to_vec()).is_ok());
            let again = simplex_project(pa.as_slice()).unwrap();
            prop_assert!(max_abs_diff(pa.as_slice(), again.as_slice()) < 1e-15);
            let pb = simplex_project(&b).unwrap();
            let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            prop_assert!(dist(pa.as_slice(), pb.as_slice()) <= dist(&a, &b) + 1e-12);
        }
    }

    #[test]
    fn kkt_residual_fixtures() {
        let interior = TrafficAllocation::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(kkt_residual(&interior, &[3.0, 3.0]), 0.0);
        assert_eq!(kkt_residual(&interior, &[4.0, 2.0]), 1.0);
        let vertex = TrafficAllocation::vertex(3, 0);
        assert_eq!(kkt_residual(&vertex, &[5.0, 4.0, 1.0]), 0.0);
        assert_eq!(kkt_residual(&vertex, &[5.0, 7.0, 1.0]), 2.0);
    }

    #[test]
    fn symmetric_instance_keeps_uniform_allocation() {
        let mk = symmetric3(0.001);
        let sol = optimize_allocation_from(
            &mk,
            &TrafficAllocation::uniform(3),
            &mk.symmetric_start(),
            &OptimizerConfig::default(),
        )
        .unwrap();
        assert!(sol.converged);
        assert!(sol.kkt_residual < 1e-8);
        for t in sol.theta.as_slice() {
            assert!((t - 1.0 / 3.0).abs() < 1e-8);
        }
    }

    #[test]
    fn optimizer_agrees_with_coarse_grid() {
        let cfg = OptimizerConfig::default();
        for mk in [
            market3([1.0, 0.8, 0.3], [1.0, 0.7, 1.5], 0.0005, 0.2),
            market3([0.9, 1.1, 1.0], [1.5, 0.6, 1.0], 0.0002, 0.2),
        ] {
            let sol = optimize_allocation_multistart(&mk, &default_starts(3), &cfg).unwrap();
            assert!(sol.converged, "kkt {}", sol.kkt_residual);
            let grid = grid_search_allocation(&mk, 0.01, &cfg.equilibrium).unwrap();
            assert!(sol.welfare >= grid.welfare - 1e-6 * grid.welfare.abs());
            assert!(max_abs_diff(sol.theta.as_slice(), grid.theta.as_slice()) <= 0.01);
        }
    }

    #[test]
    fn weak_streamer_gets_no_promotion() {
        let mk = market3([1.0, 1.1, 0.05], [1.0, 1.0, 1.0], 0.0005, 0.2);
        let sol = optimize_allocation_multistart(&mk, &default_starts(3), &OptimizerConfig::default()).unwrap();
        assert!(sol.active_set.contains(&2));
        let grid = grid_search_allocation(&mk, 0.01, &FixedPointConfig::default()).unwrap();
        assert_eq!(grid.theta.as_slice()[2], 0.0);
    }

    #[test]
    fn foc_rule_runs_and_stays_on_simplex() {
        let mk = market3([1.0, 0.8, 0.3], [1.0, 0.7, 1.5], 0.0005, 0.2);
        let cfg = OptimizerConfig { rule: GradientRule::FirstOrderCondition, ..Default::default() };
        let sol = optimize_allocation_multistart(&mk, &default_starts(3), &cfg).unwrap();
        assert!(TrafficAllocation::new(sol.theta.as_slice().to_vec()).is_ok());
    }

    #[test]
    fn myopic_degenerates_to_static_when_never_reoptimised() {
        let mk = market3([1.0, 0.8, 0.3], [1.0, 0.7, 1.5], 0.0005, 0.2);
        let ic = IntegratorConfig { dt: 0.01, t_end: 1.0, record_every: 10 };
        let path = myopic_dynamic_allocation(&mk, &mk.symmetric_start(), 5.0, 10.0, &ic, &OptimizerConfig::default())
            .unwrap();
        assert!(path.windows(2).all(|w| w[0].theta == w[1].theta));
        assert_relative_eq!(path.last().unwrap().t, 5.0, max_relative = 1e-12);
        assert_eq!(path.len(), 51);
    }

    #[test]
    fn myopic_keeps_uniform_on_symmetric_start() {
        let mk = symmetric3(0.001);
        let ic = IntegratorConfig { dt: 0.01, t_end: 1.0, record_every: 10 };
        let path = myopic_dynamic_allocation(&mk, &mk.symmetric_start(), 4.0, 1.0, &ic, &OptimizerConfig::default())
            .unwrap();
        for step in &path {
            for t in step.theta.as_slice() {
                assert!((t - 1.0 / 3.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn head_effect_report_invariants() {
        let mut pl = PlatformParams::new(5, 100.0);
        pl.revenue_per_viewer = 0.2;
        let mk = Market::symmetric(pl, StreamerParams::new(1.0, 1.0, 1.0)).unwrap();
        let rep = head_effect_welfare_comparison(&mk, 0.01, 0.09, &FixedPointConfig::default()).unwrap();
        assert_eq!(rep.dispersed.platform_profit, rep.concentrated.platform_profit);
        assert_eq!(rep.deltas().platform_profit, 0.0);
        assert!(rep.concentrated_max_share > 0.95);
        // Non-dominant streamers keep a sliver of audience whose revenue
        // exceeds their best-response quality cost.
        let dominant = rep.concentrated_streamer_surplus[rep.dominant];
        for (i, ps) in rep.concentrated_streamer_surplus.iter().enumerate() {
            if i != rep.dominant {
                assert!(*ps >= 0.0 && *ps < 1e-2 * dominant);
            }
        }
    }

    #[test]
    fn simplex_grid_counts() {
        assert_eq!(simplex_grid(3, 10).len(), 66);
        assert_eq!(simplex_grid(2, 1000).len(), 1001);
        assert!(simplex_grid(3, 7).iter().all(|p| (p.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }
}
