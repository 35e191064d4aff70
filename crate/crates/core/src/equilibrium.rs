//! Static equilibria of the viewer/quality system.
//!
//! The viewer side solves `n = M P(n, q)` by damped fixed-point iteration;
//! the streamer side plays the quality best response
//! `q_i = (1 - tau) R M alpha_i P_i (1 - P_i) / (2 c_i)`. Alternating the two
//! gives joint equilibria. Multi-start enumeration and a bisection on the
//! network-effect weight locate the concentration threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::error::{Error, Result};
use crate::model::{check_finite, check_len, softmax, Market, MarketState, TrafficAllocation};
use crate::par;

/// Upper clamp on the quality best response.
pub const Q_MAX: f64 = 10.0;

/// Relative size of the tie-breaking perturbation applied to streamer 0.
pub const START_PERTURBATION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointConfig {
    /// Blend weight of the new iterate, in `(0, 1]`.
    pub damping: f64,
    /// Max-norm convergence tolerance.
    pub tol: f64,
    /// Cap on total iterations.
    pub max_iter: usize,
    /// Starts used by [`enumerate_equilibria`].
    pub n_starts: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-10,
            max_iter: 200_000,
            n_starts: 32,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invalid("damping", "must be in (0, 1]"));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::invalid("tol", "must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter", "must be >= 1"));
        }
        if self.n_starts == 0 {
            return Err(Error::invalid("n_starts", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumResult {
    pub state: MarketState,
    pub converged: bool,
    pub iterations: usize,
    /// `max |n - M P(n, q)|`.
    pub residual: f64,
    /// `max |q - q_best_response|`; zero for viewer-only solves.
    pub quality_residual: f64,
}

impl EquilibriumResult {
    /// Largest audience share.
    pub fn max_share(&self) -> f64 {
        let total: f64 = self.state.n.iter().sum();
        self.state.n.iter().copied().fold(0.0, f64::max) / total
    }

    pub fn shares(&self) -> Vec<f64> {
        let total: f64 = self.state.n.iter().sum();
        self.state.n.iter().map(|x| x / total).collect()
    }

    /// Index of the streamer with the largest audience (lowest index on ties).
    pub fn dominant(&self) -> usize {
        argmax(&self.state.n)
    }
}

impl Market {
    /// Quality maximising each streamer's profit given choice probabilities.
    pub fn best_response_quality(&self, p: &[f64]) -> Vec<f64> {
        let pl = self.platform();
        let scale = (1.0 - pl.tau) * pl.revenue_per_viewer * pl.n_viewers;
        self.streamers()
            .iter()
            .zip(p)
            .map(|(s, &pi)| {
                (scale * s.alpha * pi * (1.0 - pi) / (2.0 * s.cost_coefficient)).clamp(0.0, Q_MAX)
            })
            .collect()
    }

    /// Derivative of the best response in `P_i`; zero where the clamp binds.
    pub(crate) fn best_response_slope(&self, p: &[f64]) -> Vec<f64> {
        let pl = self.platform();
        let scale = (1.0 - pl.tau) * pl.revenue_per_viewer * pl.n_viewers;
        self.streamers()
            .iter()
            .zip(p)
            .map(|(s, &pi)| {
                let k = scale * s.alpha / (2.0 * s.cost_coefficient);
                let raw = k * pi * (1.0 - pi);
                if raw <= 0.0 || raw >= Q_MAX {
                    0.0
                } else {
                    k * (1.0 - 2.0 * pi)
                }
            })
            .collect()
    }

    /// Symmetric split with streamer 0 nudged up by `START_PERTURBATION * M`,
    /// qualities at their best response.
    pub fn perturbed_symmetric_start(&self) -> MarketState {
        let n_s = self.n_streamers();
        let m = self.n_viewers();
        let mut n = vec![m / n_s as f64; n_s];
        if n_s > 1 {
            let delta = START_PERTURBATION * m;
            n[0] += delta;
            for x in n.iter_mut().skip(1) {
                *x -= delta / (n_s - 1) as f64;
            }
        }
        self.start_with_best_response(n)
    }

    /// Exactly symmetric split with best-response qualities.
    pub fn symmetric_start(&self) -> MarketState {
        let n_s = self.n_streamers();
        self.start_with_best_response(vec![self.n_viewers() / n_s as f64; n_s])
    }

    pub(crate) fn start_with_best_response(&self, n: Vec<f64>) -> MarketState {
        let m = self.n_viewers();
        let p: Vec<f64> = n.iter().map(|x| x / m).collect();
        let q = self.best_response_quality(&p);
        MarketState { n, q, t: 0.0 }
    }
}

/// Damped iteration of `n <- (1 - d) n + d M P(n, q)` at fixed quality.
pub fn solve_viewer_fixed_point(
    market: &Market,
    theta: Option<&TrafficAllocation>,
    q: &[f64],
    n0: &[f64],
    cfg: &FixedPointConfig,
) -> Result<EquilibriumResult> {
    cfg.validate()?;
    market.check_theta(theta)?;
    let n_s = market.n_streamers();
    check_len("q", n_s, q)?;
    check_len("n0", n_s, n0)?;
    check_finite("q", q)?;
    check_finite("n0", n0)?;
    let m = market.n_viewers();
    if let Some(i) = n0.iter().position(|&x| !(0.0..=m).contains(&x)) {
        return Err(Error::invalid(format!("n0[{i}]"), "must lie in [0, M]"));
    }
    let mut n = n0.to_vec();
    let (iterations, residual, converged) =
        iterate_viewers(market, theta, q, &mut n, cfg.damping, cfg.tol, cfg.max_iter)?;
    Ok(EquilibriumResult {
        state: MarketState {
            n,
            q: q.to_vec(),
            t: 0.0,
        },
        converged,
        iterations,
        residual,
        quality_residual: 0.0,
    })
}

/// Core damped loop; returns (iterations, final residual, converged).
fn iterate_viewers(
    market: &Market,
    theta: Option<&TrafficAllocation>,
    q: &[f64],
    n: &mut [f64],
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(usize, f64, bool)> {
    let m = market.n_viewers();
    let mut iterations = 0;
    loop {
        let p = market.probabilities(n, q, theta);
        let mut residual: f64 = 0.0;
        for (i, (ni, pi)) in n.iter_mut().zip(&p).enumerate() {
            let target = m * pi;
            if !target.is_finite() {
                return Err(Error::NonFinite { name: "n", index: i });
            }
            residual = residual.max((target - *ni).abs());
            *ni = ((1.0 - damping) * *ni + damping * target).clamp(0.0, m);
        }
        if residual <= tol {
            // The residual was measured before the final damped step; report the
            // post-step value so that `converged` implies `residual <= tol`.
            let after = viewer_residual(market, theta, n, q);
            return Ok((iterations, after, after <= tol));
        }
        iterations += 1;
        if iterations >= max_iter {
            let after = viewer_residual(market, theta, n, q);
            return Ok((iterations, after, after <= tol));
        }
    }
}

fn viewer_residual(market: &Market, theta: Option<&TrafficAllocation>, n: &[f64], q: &[f64]) -> f64 {
    let m = market.n_viewers();
    let p = market.probabilities(n, q, theta);
    n.iter()
        .zip(&p)
        .map(|(ni, pi)| (ni - m * pi).abs())
        .fold(0.0, f64::max)
}

/// Joint equilibrium from the perturbed symmetric start.
pub fn solve_joint_equilibrium(
    market: &Market,
    theta: Option<&TrafficAllocation>,
    cfg: &FixedPointConfig,
) -> Result<EquilibriumResult> {
    solve_joint_equilibrium_from(market, theta, &market.perturbed_symmetric_start(), cfg)
}

/// Alternates viewer fixed points with damped quality best responses until
/// both residuals drop below `cfg.tol`.
pub fn solve_joint_equilibrium_from(
    market: &Market,
    theta: Option<&TrafficAllocation>,
    start: &MarketState,
    cfg: &FixedPointConfig,
) -> Result<EquilibriumResult> {
    cfg.validate()?;
    market.check_theta(theta)?;
    market.check_state(start)?;
    let m = market.n_viewers();
    let mut n: Vec<f64> = start.n.iter().map(|x| x.clamp(0.0, m)).collect();
    let mut q: Vec<f64> = start.q.iter().map(|x| x.clamp(0.0, Q_MAX)).collect();
    let mut iterations = 0;
    loop {
        let budget = cfg.max_iter.saturating_sub(iterations).max(1);
        let (it, _, _) =
            iterate_viewers(market, theta, &q, &mut n, cfg.damping, 0.5 * cfg.tol, budget)?;
        iterations += it + 1;

        let p = market.probabilities(&n, &q, theta);
        let br = market.best_response_quality(&p);
        let mut dq: f64 = 0.0;
        for (i, (qi, bi)) in q.iter_mut().zip(&br).enumerate() {
            if !bi.is_finite() {
                return Err(Error::NonFinite { name: "q", index: i });
            }
            dq = dq.max((bi - *qi).abs());
            *qi = (1.0 - cfg.damping) * *qi + cfg.damping * bi;
        }

        let residual = viewer_residual(market, theta, &n, &q);
        let quality_residual = quality_residual(market, theta, &n, &q);
        let converged = dq <= cfg.tol && residual <= cfg.tol && quality_residual <= cfg.tol;
        if converged || iterations >= cfg.max_iter {
            return Ok(EquilibriumResult {
                state: MarketState { n, q, t: 0.0 },
                converged,
                iterations,
                residual,
                quality_residual,
            });
        }
    }
}

fn quality_residual(market: &Market, theta: Option<&TrafficAllocation>, n: &[f64], q: &[f64]) -> f64 {
    let p = market.probabilities(n, q, theta);
    market
        .best_response_quality(&p)
        .iter()
        .zip(q)
        .map(|(b, qi)| (b - qi).abs())
        .fold(0.0, f64::max)
}

/// Random point on `M` times the unit simplex (flat Dirichlet).
fn random_simplex_point<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    draws.iter().map(|x| scale * x / total).collect()
}

/// Distance below which two equilibria count as the same one.
pub fn cluster_radius(market: &Market, cfg: &FixedPointConfig) -> f64 {
    (10.0 * cfg.tol).max(1e-6 * market.n_viewers())
}

/// Joint solves from `cfg.n_starts` seeded random starts, deduplicated and
/// sorted by descending max share.
pub fn enumerate_equilibria(
    market: &Market,
    theta: Option<&TrafficAllocation>,
    cfg: &FixedPointConfig,
    seed: u64,
) -> Result<Vec<EquilibriumResult>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<MarketState> = (0..cfg.n_starts)
        .map(|_| {
            let n = random_simplex_point(&mut rng, market.n_streamers(), market.n_viewers());
            market.start_with_best_response(n)
        })
        .collect();
    let results = par::try_map(&starts, |s| solve_joint_equilibrium_from(market, theta, s, cfg))?;
    Ok(distinct_equilibria(results, cluster_radius(market, cfg)))
}

/// Keeps converged results that differ from every earlier one by more than
/// `radius` (max-norm over `n` and `q`).
pub fn distinct_equilibria(results: Vec<EquilibriumResult>, radius: f64) -> Vec<EquilibriumResult> {
    let mut distinct: Vec<EquilibriumResult> = Vec::new();
    for r in results.into_iter().filter(|r| r.converged) {
        let seen = distinct.iter().any(|d| state_distance(&d.state, &r.state) < radius);
        if !seen {
            distinct.push(r);
        }
    }
    distinct.sort_by(|a, b| {
        b.max_share()
            .total_cmp(&a.max_share())
            .then(a.dominant().cmp(&b.dominant()))
    });
    distinct
}

/// Max-norm distance over viewer counts and qualities.
pub fn state_distance(a: &MarketState, b: &MarketState) -> f64 {
    a.n.iter()
        .zip(&b.n)
        .chain(a.q.iter().zip(&b.q))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Concentration verdict at one network-effect weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub beta: f64,
    pub max_share: f64,
    pub concentrated: bool,
}

/// Solves from the perturbed symmetric start and compares the max share with
/// `share_threshold`.
pub fn classify_concentration(
    market: &Market,
    beta: f64,
    share_threshold: f64,
    cfg: &FixedPointConfig,
) -> Result<Classification> {
    let m = market.with_beta(beta)?;
    let eq = solve_joint_equilibrium(&m, None, cfg)?;
    let max_share = eq.max_share();
    Ok(Classification {
        beta,
        max_share,
        concentrated: max_share >= share_threshold,
    })
}

/// Classifies every `beta` in `betas`, in parallel.
pub fn concentration_scan(
    market: &Market,
    betas: &[f64],
    share_threshold: f64,
    cfg: &FixedPointConfig,
) -> Result<Vec<Classification>> {
    par::try_map(betas, |&b| classify_concentration(market, b, share_threshold, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalBeta {
    /// Midpoint of the final bracket.
    pub beta_star: f64,
    pub lo: f64,
    pub hi: f64,
    pub bisections: usize,
}

impl CriticalBeta {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Bisects on the network-effect weight for the smallest value at which the
/// perturbed symmetric start collapses to a share of at least `share_threshold`.
pub fn find_critical_beta(
    market: &Market,
    beta_lo: f64,
    beta_hi: f64,
    share_threshold: f64,
    cfg: &FixedPointConfig,
) -> Result<CriticalBeta> {
    if !(beta_lo < beta_hi) || beta_lo < 0.0 {
        return Err(Error::invalid("beta_lo", "need 0 <= beta_lo < beta_hi"));
    }
    let floor = 1.0 / market.n_streamers() as f64;
    if !(share_threshold > floor && share_threshold < 1.0) {
        return Err(Error::invalid("share_threshold", format!("must be in ({floor}, 1)")));
    }
    let lo_c = classify_concentration(market, beta_lo, share_threshold, cfg)?;
    let hi_c = classify_concentration(market, beta_hi, share_threshold, cfg)?;
    if lo_c.concentrated == hi_c.concentrated {
        return Err(Error::BracketDoesNotStraddle {
            lo: beta_lo,
            hi: beta_hi,
        });
    }
    let lo_flag = lo_c.concentrated;
    let width0 = beta_hi - beta_lo;
    let (mut lo, mut hi) = (beta_lo, beta_hi);
    let mut bisections = 0;
    while hi - lo >= 1e-3 * width0 {
        let mid = 0.5 * (lo + hi);
        if classify_concentration(market, mid, share_threshold, cfg)?.concentrated == lo_flag {
            lo = mid;
        } else {
            hi = mid;
        }
        bisections += 1;
    }
    Ok(CriticalBeta {
        beta_star: 0.5 * (lo + hi),
        lo,
        hi,
        bisections,
    })
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Plain `M softmax(V)` at `beta = 0`, used to cross-check the solver.
pub fn no_feedback_viewers(market: &Market, q: &[f64], theta: Option<&TrafficAllocation>) -> Vec<f64> {
    let zeros = vec![0.0; market.n_streamers()];
    let v = market.utility(&zeros, q, theta);
    let m = market.n_viewers();
    softmax(&v).into_iter().map(|p| m * p).collect()
}
