//! Continuous-time viewer and quality dynamics.
//!
//! State vector layout is `[n_1..n_N, q_1..q_N]`. Integration is fixed-step
//! RK4 with `q` projected onto `q >= 0` after every step.

use nalgebra::DMatrix;

use crate::equilibrium::argmax;
use crate::error::{Error, Result};
use crate::model::{check_finite, Market, MarketState, TrafficAllocation};
use crate::par;

/// Any coordinate beyond this magnitude counts as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e12;

/// Relative finite-difference step for the Jacobian.
pub const JACOBIAN_STEP: f64 = 1e-6;

/// Eigenvalue real parts must sit below `-STABILITY_MARGIN`.
pub const STABILITY_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Keep every `record_every`-th step.
    pub record_every: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            t_end: 200.0,
            record_every: 10,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt", "must be > 0"));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::invalid("t_end", "must be > 0"));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every", "must be >= 1"));
        }
        Ok(())
    }

    /// Number of RK4 steps; `t_end` is rounded to a whole number of steps.
    pub fn steps(&self) -> usize {
        ((self.t_end / self.dt).round() as usize).max(1)
    }

    /// Number of recorded samples, including `t = 0` and the terminal state.
    pub fn samples(&self) -> usize {
        let steps = self.steps();
        steps / self.record_every + 1 + usize::from(!steps.is_multiple_of(self.record_every))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<MarketState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn initial(&self) -> &MarketState {
        &self.states[0]
    }

    pub fn terminal(&self) -> &MarketState {
        self.states.last().expect("trajectory holds at least the initial state")
    }
}

/// Time derivative `[dn/dt, dq/dt]`.
pub fn rhs(market: &Market, theta: Option<&TrafficAllocation>, state: &MarketState) -> Result<Vec<f64>> {
    market.check_state(state)?;
    market.check_theta(theta)?;
    let mut x = state.n.clone();
    x.extend_from_slice(&state.q);
    let mut out = vec![0.0; x.len()];
    rhs_into(market, theta, &x, &mut out);
    check_finite("rhs", &out)?;
    Ok(out)
}

fn rhs_into(market: &Market, theta: Option<&TrafficAllocation>, x: &[f64], out: &mut [f64]) {
    let n_s = market.n_streamers();
    let (n, q) = x.split_at(n_s);
    let pl = market.platform();
    let m = pl.n_viewers;
    let p = market.probabilities(n, q, theta);
    let revenue = (1.0 - pl.tau) * pl.revenue_per_viewer;
    for (i, s) in market.streamers().iter().enumerate() {
        out[i] = pl.gamma * (m * p[i] - n[i]);
        let dn_dq = m * s.alpha * p[i] * (1.0 - p[i]);
        out[n_s + i] = s.eta * (revenue * dn_dq - 2.0 * s.cost_coefficient * q[i]);
    }
}

/// Fixed-step RK4 from `state0` over `[0, t_end]`.
pub fn integrate(
    market: &Market,
    theta: Option<&TrafficAllocation>,
    state0: &MarketState,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    market.check_state(state0)?;
    market.check_theta(theta)?;
    let n_s = market.n_streamers();
    let m = market.n_viewers();
    let slack = 1e-6 * m;
    let dim = 2 * n_s;

    let mut x = state0.n.clone();
    x.extend_from_slice(&state0.q);
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];

    let steps = cfg.steps();
    let dt = cfg.dt;
    let mut times = Vec::with_capacity(cfg.samples());
    let mut states = Vec::with_capacity(cfg.samples());
    let snapshot = |x: &[f64], t: f64| MarketState {
        n: x[..n_s].to_vec(),
        q: x[n_s..].to_vec(),
        t,
    };
    times.push(0.0);
    states.push(snapshot(&x, 0.0));

    for step in 1..=steps {
        rhs_into(market, theta, &x, &mut k1);
        axpy(&x, 0.5 * dt, &k1, &mut tmp);
        rhs_into(market, theta, &tmp, &mut k2);
        axpy(&x, 0.5 * dt, &k2, &mut tmp);
        rhs_into(market, theta, &tmp, &mut k3);
        axpy(&x, dt, &k3, &mut tmp);
        rhs_into(market, theta, &tmp, &mut k4);
        for j in 0..dim {
            x[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        for qi in &mut x[n_s..] {
            *qi = qi.max(0.0);
        }

        let t = step as f64 * dt;
        if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
            return Err(Error::Divergence { t });
        }
        if let Some(i) = x[..n_s].iter().position(|&v| v < -slack || v > m + slack) {
            return Err(Error::invalid(
                "dt",
                format!("too large: n[{i}] = {} left [0, M] at t = {t}", x[i]),
            ));
        }
        if step % cfg.record_every == 0 || step == steps {
            times.push(t);
            let mut s = snapshot(&x, t);
            // Tiny excursions within the slack are rounding; keep snapshots valid.
            for v in &mut s.n {
                *v = v.max(0.0);
            }
            states.push(s);
        }
    }
    Ok(Trajectory { times, states })
}

fn axpy(x: &[f64], a: f64, k: &[f64], out: &mut [f64]) {
    for ((o, xi), ki) in out.iter_mut().zip(x).zip(k) {
        *o = xi + a * ki;
    }
}

/// Central finite-difference Jacobian of [`rhs`], step `1e-6 (1 + |x_j|)`.
pub fn jacobian(
    market: &Market,
    theta: Option<&TrafficAllocation>,
    state: &MarketState,
) -> Result<DMatrix<f64>> {
    market.check_state(state)?;
    market.check_theta(theta)?;
    let dim = 2 * market.n_streamers();
    let mut x = state.n.clone();
    x.extend_from_slice(&state.q);
    let mut plus = vec![0.0; dim];
    let mut minus = vec![0.0; dim];
    let mut j = DMatrix::zeros(dim, dim);
    for col in 0..dim {
        let h = JACOBIAN_STEP * (1.0 + x[col].abs());
        let orig = x[col];
        x[col] = orig + h;
        rhs_into(market, theta, &x, &mut plus);
        x[col] = orig - h;
        rhs_into(market, theta, &x, &mut minus);
        x[col] = orig;
        for row in 0..dim {
            j[(row, col)] = (plus[row] - minus[row]) / (2.0 * h);
        }
    }
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { name: "jacobian", index: 0 });
    }
    Ok(j)
}

/// Closed-form diagonal blocks: `d(dn_i/dt)/dn_i = gamma (M beta P_i (1 - P_i) - 1)`
/// and `d(dn_i/dt)/dq_i = gamma M alpha_i P_i (1 - P_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticEntries {
    pub dn_dn: Vec<f64>,
    pub dn_dq: Vec<f64>,
}

pub fn analytic_entries(
    market: &Market,
    theta: Option<&TrafficAllocation>,
    state: &MarketState,
) -> Result<AnalyticEntries> {
    market.check_state(state)?;
    market.check_theta(theta)?;
    let pl = market.platform();
    let p = market.probabilities(&state.n, &state.q, theta);
    let m = pl.n_viewers;
    let dn_dn = p
        .iter()
        .map(|&pi| pl.gamma * (m * pl.beta * pi * (1.0 - pi) - 1.0))
        .collect();
    let dn_dq = market
        .sensitivity_from_probabilities(&p)
        .into_iter()
        .map(|s| pl.gamma * s)
        .collect();
    Ok(AnalyticEntries { dn_dn, dn_dq })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub eigen_real_parts: Vec<f64>,
    pub eigen_imag_parts: Vec<f64>,
    pub stable: bool,
    /// Relative finite-difference step, when the matrix came from [`jacobian`].
    pub jacobian_step: Option<f64>,
}

impl StabilityReport {
    pub fn max_real_part(&self) -> f64 {
        self.eigen_real_parts.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Eigenvalues of a square matrix; stable iff every real part is below `-1e-9`.
pub fn assess_stability(j: &DMatrix<f64>) -> Result<StabilityReport> {
    if !j.is_square() {
        return Err(Error::DimensionMismatch {
            name: "jacobian columns",
            expected: j.nrows(),
            actual: j.ncols(),
        });
    }
    if let Some(index) = j.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { name: "jacobian", index });
    }
    let eig = j.complex_eigenvalues();
    let eigen_real_parts: Vec<f64> = eig.iter().map(|z| z.re).collect();
    let eigen_imag_parts = eig.iter().map(|z| z.im).collect();
    let stable = eigen_real_parts.iter().all(|&r| r < -STABILITY_MARGIN);
    Ok(StabilityReport {
        eigen_real_parts,
        eigen_imag_parts,
        stable,
        jacobian_step: None,
    })
}

/// Numeric Jacobian at `state` followed by [`assess_stability`].
pub fn stability_at(
    market: &Market,
    theta: Option<&TrafficAllocation>,
    state: &MarketState,
) -> Result<StabilityReport> {
    let j = jacobian(market, theta, state)?;
    let mut report = assess_stability(&j)?;
    report.jacobian_step = Some(JACOBIAN_STEP);
    Ok(report)
}

/// Herfindahl index `sum (n_i / sum n)^2`.
pub fn hhi(n: &[f64]) -> Result<f64> {
    check_finite("n", n)?;
    if let Some(i) = n.iter().position(|&x| x < 0.0) {
        return Err(Error::invalid(format!("n[{i}]"), "must be >= 0"));
    }
    let total: f64 = n.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("n", "total must be > 0"));
    }
    Ok(n.iter().map(|x| (x / total).powi(2)).sum())
}

/// One arm of a path-dependence run.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinRun {
    /// Streamer that received `+delta0 / 2`.
    pub favored: usize,
    pub trajectory: Trajectory,
    /// `(t, n_0(t) - n_1(t))` samples.
    pub gap: Vec<(f64, f64)>,
    pub terminal_shares: Vec<f64>,
    /// Streamer with the largest terminal share.
    pub winner: usize,
}

impl TwinRun {
    pub fn terminal_max_share(&self) -> f64 {
        self.terminal_shares.iter().copied().fold(0.0, f64::max)
    }

    /// `share_0 - share_1` at the horizon.
    pub fn terminal_share_gap(&self) -> f64 {
        self.terminal_shares[0] - self.terminal_shares[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathDependence {
    pub delta0: f64,
    /// Twin 0 favours streamer 0, twin 1 favours streamer 1.
    pub twins: [TwinRun; 2],
}

/// Integrates two systems that start from the symmetric split with streamers
/// 0 and 1 shifted by `+delta0/2` and `-delta0/2`, then with the roles swapped.
/// Qualities start at the best response to the shifted shares.
pub fn path_dependence_experiment(
    market: &Market,
    delta0: f64,
    cfg: &IntegratorConfig,
) -> Result<PathDependence> {
    let n_s = market.n_streamers();
    if n_s < 2 {
        return Err(Error::invalid("n_streamers", "path dependence needs at least 2"));
    }
    let m = market.n_viewers();
    if !(delta0 > 0.0 && delta0 < m / n_s as f64) {
        return Err(Error::invalid("delta0", "must be in (0, M/N)"));
    }
    let runs = par::try_map(&[0usize, 1], |&favored| -> Result<TwinRun> {
        let mut n = vec![m / n_s as f64; n_s];
        n[favored] += 0.5 * delta0;
        n[1 - favored] -= 0.5 * delta0;
        let start = market.start_with_best_response(n);
        let trajectory = integrate(market, None, &start, cfg)?;
        let gap = trajectory
            .times
            .iter()
            .zip(&trajectory.states)
            .map(|(&t, s)| (t, s.n[0] - s.n[1]))
            .collect();
        let terminal = &trajectory.terminal().n;
        let total: f64 = terminal.iter().sum();
        let terminal_shares: Vec<f64> = terminal.iter().map(|x| x / total).collect();
        let winner = argmax(&terminal_shares);
        Ok(TwinRun {
            favored,
            trajectory,
            gap,
            terminal_shares,
            winner,
        })
    })?;
    let [a, b]: [TwinRun; 2] = runs.try_into().expect("two twins");
    Ok(PathDependence { delta0, twins: [a, b] })
}

/// Integrations from many starts; a divergent start is kept as its error.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePortrait {
    pub runs: Vec<Result<Trajectory>>,
}

/// One `(n_i, q_i)` sample of a portrait.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortraitPoint {
    pub start: usize,
    pub t: f64,
    pub streamer: usize,
    pub n: f64,
    pub q: f64,
}

impl PhasePortrait {
    /// Total samples over successful runs.
    pub fn sample_count(&self) -> usize {
        self.runs.iter().flatten().map(Trajectory::len).sum()
    }

    pub fn points(&self) -> Vec<PortraitPoint> {
        let mut out = Vec::new();
        for (start, run) in self.runs.iter().enumerate() {
            let Ok(traj) = run else { continue };
            for (t, s) in traj.times.iter().zip(&traj.states) {
                for (streamer, (n, q)) in s.n.iter().zip(&s.q).enumerate() {
                    out.push(PortraitPoint {
                        start,
                        t: *t,
                        streamer,
                        n: *n,
                        q: *q,
                    });
                }
            }
        }
        out
    }
}

pub fn phase_portrait(
    market: &Market,
    theta: Option<&TrafficAllocation>,
    starts: &[MarketState],
    cfg: &IntegratorConfig,
) -> Result<PhasePortrait> {
    if starts.is_empty() {
        return Err(Error::invalid("starts", "grid must be non-empty"));
    }
    cfg.validate()?;
    Ok(PhasePortrait {
        runs: par::map(starts, |s| integrate(market, theta, s, cfg)),
    })
}

/// `rows x cols` starts around the symmetric split: streamer 0 gains
/// `delta = max_delta * (r + 1) / rows` viewers taken evenly from the rest,
/// and qualities are the best response scaled by `0.5 + c / (cols - 1)`.
pub fn perturbed_grid(market: &Market, rows: usize, cols: usize, max_delta: f64) -> Vec<MarketState> {
    let n_s = market.n_streamers();
    let m = market.n_viewers();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let delta = max_delta * (r + 1) as f64 / rows as f64;
        let mut n = vec![m / n_s as f64; n_s];
        if n_s > 1 {
            n[0] += delta;
            for x in n.iter_mut().skip(1) {
                *x -= delta / (n_s - 1) as f64;
            }
        }
        let base = market.start_with_best_response(n);
        for c in 0..cols {
            let scale = if cols > 1 {
                0.5 + c as f64 / (cols - 1) as f64
            } else {
                1.0
            };
            let mut s = base.clone();
            for q in &mut s.q {
                *q *= scale;
            }
            out.push(s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{solve_joint_equilibrium, FixedPointConfig};
    use crate::model::{PlatformParams, StreamerParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn market(n: usize, beta: f64) -> Market {
        let mut platform = PlatformParams::new(n, 100.0);
        platform.beta = beta;
        platform.revenue_per_viewer = 0.05;
        Market::symmetric(platform, StreamerParams::new(1.0, 1.0, 1.0)).unwrap()
    }

    fn asymmetric(beta: f64) -> Market {
        let mut platform = PlatformParams::new(3, 100.0);
        platform.beta = beta;
        platform.revenue_per_viewer = 0.05;
        platform.gamma = 0.7;
        Market::new(
            platform,
            vec![
                StreamerParams::new(1.0, 1.0, 1.0),
                StreamerParams::new(0.5, 2.0, 0.7),
                StreamerParams::new(1.5, 0.5, 1.2),
            ],
        )
        .unwrap()
    }

    fn short(t_end: f64) -> IntegratorConfig {
        IntegratorConfig {
            dt: 0.01,
            t_end,
            record_every: 10,
        }
    }

    #[test]
    fn rhs_vanishes_at_equilibrium() {
        let cfg = FixedPointConfig {
            tol: 1e-11,
            ..Default::default()
        };
        let m = asymmetric(0.004);
        let eq = solve_joint_equilibrium(&m, None, &cfg).unwrap();
        let d = rhs(&m, None, &eq.state).unwrap();
        let norm = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(norm < 10.0 * cfg.tol * 2.0, "{norm}");
    }

    #[test]
    fn overfull_streamer_shrinks() {
        let m = market(2, 0.0);
        let s = MarketState::new(vec![90.0, 10.0], vec![0.1, 0.1]).unwrap();
        let d = rhs(&m, None, &s).unwrap();
        assert!(d[0] < 0.0);
        assert!(d[1] > 0.0);
    }

    #[test]
    fn rhs_rejects_non_finite_state() {
        let m = market(2, 0.0);
        let s = MarketState {
            n: vec![f64::NAN, 50.0],
            q: vec![0.0, 0.0],
            t: 0.0,
        };
        assert!(rhs(&m, None, &s).is_err());
    }

    #[test]
    fn one_step_difference_matches_rhs() {
        let m = asymmetric(0.01);
        let s = MarketState::new(vec![20.0, 30.0, 50.0], vec![0.3, 0.1, 0.6]).unwrap();
        let d = rhs(&m, None, &s).unwrap();
        // Forward difference error is O(h); Richardson extrapolation removes it.
        let step = |h: f64| {
            let traj = integrate(
                &m,
                None,
                &s,
                &IntegratorConfig {
                    dt: h,
                    t_end: h,
                    record_every: 1,
                },
            )
            .unwrap();
            let x = traj.terminal();
            let mut v: Vec<f64> = x.n.iter().zip(&s.n).map(|(a, b)| (a - b) / h).collect();
            v.extend(x.q.iter().zip(&s.q).map(|(a, b)| (a - b) / h));
            v
        };
        let h = 1e-3;
        let (a, b) = (step(h), step(h / 2.0));
        for j in 0..6 {
            let rich = 2.0 * b[j] - a[j];
            assert!((rich - d[j]).abs() < 1e-6 * (1.0 + d[j].abs()), "{j}: {rich} vs {}", d[j]);
        }
    }

    #[test]
    fn equilibrium_trajectory_is_constant() {
        let cfg = FixedPointConfig {
            tol: 1e-12,
            ..Default::default()
        };
        let m = asymmetric(0.004);
        let eq = solve_joint_equilibrium(&m, None, &cfg).unwrap();
        let traj = integrate(&m, None, &eq.state, &short(10.0)).unwrap();
        for s in &traj.states {
            for (a, b) in s.n.iter().chain(&s.q).zip(eq.state.n.iter().chain(&eq.state.q)) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn weak_feedback_returns_to_symmetry() {
        let m = market(2, 0.005);
        let start = MarketState::new(vec![70.0, 30.0], vec![0.1, 0.5]).unwrap();
        let traj = integrate(&m, None, &start, &short(60.0)).unwrap();
        let eq = solve_joint_equilibrium(&m, None, &FixedPointConfig::default()).unwrap();
        let end = traj.terminal();
        for (a, b) in end.n.iter().chain(&end.q).zip(eq.state.n.iter().chain(&eq.state.q)) {
            assert!((a - b).abs() < 1e-6 * 100.0, "{a} vs {b}");
        }
    }

    #[test]
    fn halving_dt_barely_moves_terminal_state() {
        let m = asymmetric(0.01);
        let start = MarketState::new(vec![10.0, 60.0, 30.0], vec![0.0, 1.0, 0.2]).unwrap();
        let coarse = integrate(&m, None, &start, &IntegratorConfig { dt: 0.02, t_end: 20.0, record_every: 100 }).unwrap();
        let fine = integrate(&m, None, &start, &IntegratorConfig { dt: 0.01, t_end: 20.0, record_every: 100 }).unwrap();
        for (a, b) in coarse.terminal().n.iter().zip(&fine.terminal().n) {
            assert!((a - b).abs() < 1e-6 * 100.0);
        }
    }

    #[test]
    fn rk4_error_is_fourth_order() {
        let m = asymmetric(0.01);
        let start = MarketState::new(vec![10.0, 60.0, 30.0], vec![0.05, 1.0, 0.2]).unwrap();
        let run = |dt: f64| {
            integrate(&m, None, &start, &IntegratorConfig { dt, t_end: 2.0, record_every: 1000 })
                .unwrap()
                .terminal()
                .clone()
        };
        let reference = run(0.0025);
        let err = |dt: f64| {
            let s = run(dt);
            s.n.iter()
                .chain(&s.q)
                .zip(reference.n.iter().chain(&reference.q))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(0.2), err(0.1));
        let order = (e1 / e2).log2();
        assert!(order >= 3.5, "observed order {order} ({e1}, {e2})");
    }

    #[test]
    fn total_audience_relaxes_exponentially() {
        let m = asymmetric(0.01);
        let start = MarketState::new(vec![10.0, 20.0, 30.0], vec![0.1, 0.2, 0.3]).unwrap();
        let traj = integrate(&m, None, &start, &short(5.0)).unwrap();
        let gamma = m.platform().gamma;
        for (t, s) in traj.times.iter().zip(&traj.states) {
            let total: f64 = s.n.iter().sum();
            let expected = 100.0 - 40.0 * (-gamma * t).exp();
            assert_relative_eq!(total, expected, max_relative = 1e-6);
        }
    }

    #[test]
    fn sample_bookkeeping() {
        let cfg = IntegratorConfig {
            dt: 0.01,
            t_end: 1.0,
            record_every: 10,
        };
        assert_eq!(cfg.samples(), 11);
        let m = market(2, 0.0);
        let traj = integrate(&m, None, &m.symmetric_start(), &cfg).unwrap();
        assert_eq!(traj.len(), 11);
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn divergence_is_reported() {
        let mut platform = PlatformParams::new(2, 100.0);
        platform.revenue_per_viewer = 1e14;
        let m = Market::symmetric(platform, StreamerParams::new(1.0, 1.0, 1e-6)).unwrap();
        let err = integrate(&m, None, &m.symmetric_start(), &short(1.0)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
    }

    #[test]
    fn oversized_step_is_rejected() {
        let mut platform = PlatformParams::new(2, 100.0);
        platform.gamma = 1000.0;
        let m = Market::symmetric(platform, StreamerParams::new(1.0, 1.0, 1.0)).unwrap();
        let start = MarketState::new(vec![90.0, 10.0], vec![0.0, 0.0]).unwrap();
        let res = integrate(&m, None, &start, &IntegratorConfig { dt: 0.1, t_end: 1.0, record_every: 1 });
        assert!(res.is_err());
    }

    #[test]
    fn single_streamer_without_feedback_has_unit_decay() {
        let m = market(1, 0.0);
        let s = MarketState::new(vec![40.0], vec![0.2]).unwrap();
        let j = jacobian(&m, None, &s).unwrap();
        assert_relative_eq!(j[(0, 0)], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn numeric_jacobian_matches_analytic_entries() {
        let m = asymmetric(0.01);
        let s = MarketState::new(vec![20.0, 35.0, 45.0], vec![0.4, 0.2, 0.3]).unwrap();
        let j = jacobian(&m, None, &s).unwrap();
        let a = analytic_entries(&m, None, &s).unwrap();
        let sens = m.audience_quality_sensitivity(&s, None).unwrap();
        for i in 0..3 {
            assert_relative_eq!(j[(i, i)], a.dn_dn[i], max_relative = 1e-5);
            assert_relative_eq!(j[(i, 3 + i)], a.dn_dq[i], max_relative = 1e-5);
            assert_relative_eq!(a.dn_dq[i], m.platform().gamma * sens[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn relabelling_conjugates_jacobian() {
        let m = asymmetric(0.01);
        let perm = [2, 0, 1];
        let pm = m.permuted(&perm).unwrap();
        let s = MarketState::new(vec![20.0, 35.0, 45.0], vec![0.4, 0.2, 0.3]).unwrap();
        let ps = MarketState::new(
            perm.iter().map(|&k| s.n[k]).collect(),
            perm.iter().map(|&k| s.q[k]).collect(),
        )
        .unwrap();
        let j = jacobian(&m, None, &s).unwrap();
        let pj = jacobian(&pm, None, &ps).unwrap();
        let idx = |i: usize| if i < 3 { perm[i] } else { 3 + perm[i - 3] };
        for r in 0..6 {
            for c in 0..6 {
                assert!((pj[(r, c)] - j[(idx(r), idx(c))]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn diagonal_stability_examples() {
        let r = assess_stability(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, -2.0]))).unwrap();
        assert!(r.stable);
        let mut re = r.eigen_real_parts.clone();
        re.sort_by(f64::total_cmp);
        assert_relative_eq!(re[0], -2.0, epsilon = 1e-12);
        assert_relative_eq!(re[1], -1.0, epsilon = 1e-12);
        let r = assess_stability(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, 0.5]))).unwrap();
        assert!(!r.stable);
        assert!(assess_stability(&DMatrix::from_element(2, 2, f64::NAN)).is_err());
        assert!(assess_stability(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn rotation_block_eigenvalues_are_complex() {
        let j = DMatrix::from_row_slice(2, 2, &[-0.5, 2.0, -2.0, -0.5]);
        let r = assess_stability(&j).unwrap();
        assert!(r.stable);
        for (re, im) in r.eigen_real_parts.iter().zip(&r.eigen_imag_parts) {
            assert_relative_eq!(*re, -0.5, epsilon = 1e-12);
            assert_relative_eq!(im.abs(), 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn symmetric_point_loses_stability_with_strong_feedback() {
        // Symmetric point of N identical streamers flips at beta M / N = 1.
        let cfg = FixedPointConfig::default();
        for (beta, stable) in [(0.02, true), (0.05, false)] {
            let m = market(3, beta);
            let eq = crate::equilibrium::solve_joint_equilibrium_from(&m, None, &m.symmetric_start(), &cfg).unwrap();
            assert!(eq.converged);
            assert_relative_eq!(eq.state.n[0], 100.0 / 3.0, epsilon = 1e-8);
            assert_eq!(stability_at(&m, None, &eq.state).unwrap().stable, stable, "beta={beta}");
        }
    }

    #[test]
    fn hhi_examples() {
        assert_relative_eq!(hhi(&[25.0; 4]).unwrap(), 0.25, epsilon = 1e-15);
        assert_relative_eq!(hhi(&[0.0, 7.0, 0.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(hhi(&[60.0, 40.0]).unwrap(), 0.52, epsilon = 1e-15);
        assert!(hhi(&[0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn hhi_scale_invariant_and_bounded(
            n in prop::collection::vec(0.01f64..100.0, 1..12),
            k in 0.001f64..1000.0,
        ) {
            let h = hhi(&n).unwrap();
            let scaled: Vec<f64> = n.iter().map(|x| k * x).collect();
            prop_assert!((hhi(&scaled).unwrap() - h).abs() < 1e-12);
            prop_assert!(h >= 1.0 / n.len() as f64 - 1e-12 && h <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn path_dependence_without_feedback_fades() {
        let m = market(2, 0.0);
        let pd = path_dependence_experiment(&m, 0.1, &short(40.0)).unwrap();
        for twin in &pd.twins {
            assert!(twin.terminal_share_gap().abs() < 1e-6);
            let first = twin.gap[0].1.abs();
            let last = twin.gap.last().unwrap().1.abs();
            assert!(last < 1e-6 * first);
        }
    }

    #[test]
    fn path_dependence_with_strong_feedback_locks_in() {
        let m = market(2, 0.05);
        let pd = path_dependence_experiment(&m, 0.1, &short(200.0)).unwrap();
        assert_eq!(pd.twins[0].winner, 0);
        assert_eq!(pd.twins[1].winner, 1);
        for twin in &pd.twins {
            assert!(twin.terminal_max_share() > 0.95);
        }
        assert_relative_eq!(
            pd.twins[0].terminal_share_gap(),
            -pd.twins[1].terminal_share_gap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn portrait_at_equilibrium_is_flat() {
        let m = market(2, 0.005);
        let eq = solve_joint_equilibrium(&m, None, &FixedPointConfig { tol: 1e-12, ..Default::default() }).unwrap();
        let cfg = short(5.0);
        let portrait = phase_portrait(&m, None, &vec![eq.state.clone(); 3], &cfg).unwrap();
        assert_eq!(portrait.sample_count(), 3 * cfg.samples());
        assert_eq!(portrait.points().len(), 3 * cfg.samples() * 2);
        for run in &portrait.runs {
            let traj = run.as_ref().unwrap();
            for s in &traj.states {
                assert!((s.n[0] - eq.state.n[0]).abs() < 1e-8);
            }
        }
        assert!(phase_portrait(&m, None, &[], &cfg).is_err());
    }

    #[test]
    fn strong_feedback_portrait_never_deconcentrates() {
        let m = market(3, 0.05);
        let starts = perturbed_grid(&m, 5, 5, 10.0);
        assert_eq!(starts.len(), 25);
        let portrait = phase_portrait(&m, None, &starts, &short(100.0)).unwrap();
        for (start, run) in starts.iter().zip(&portrait.runs) {
            let traj = run.as_ref().unwrap();
            let h0 = hhi(&start.n).unwrap();
            let h1 = hhi(&traj.terminal().n).unwrap();
            assert!(h1 >= h0 - 1e-6, "{h0} -> {h1}");
        }
    }
}
