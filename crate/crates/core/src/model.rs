//! Closed-form primitives of the static market: viewer utilities, logit
//! choice, expected audiences, streamer costs and profits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `sum(theta) == 1`.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Global constants of the market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformParams {
    /// Viewer pool size `M`. Real-valued because audiences are expectations.
    pub n_viewers: f64,
    /// Network-effect weight: utility per existing viewer.
    pub beta: f64,
    /// Platform commission in `[0, 1)`.
    pub tau: f64,
    /// Revenue per viewer per period.
    pub revenue_per_viewer: f64,
    /// Viewer adjustment rate.
    pub gamma: f64,
    /// Traffic-sensitivity factor coupling promotion share into utility.
    pub phi: f64,
    /// Viewing price per streamer; its length fixes the number of streamers.
    pub prices: Vec<f64>,
}

impl PlatformParams {
    /// Free-to-watch platform with `n_streamers` streamers and unit rates.
    pub fn new(n_streamers: usize, n_viewers: f64) -> Self {
        Self {
            n_viewers,
            beta: 0.0,
            tau: 0.2,
            revenue_per_viewer: 1.0,
            gamma: 1.0,
            phi: 1.0,
            prices: vec![0.0; n_streamers],
        }
    }

    pub fn n_streamers(&self) -> usize {
        self.prices.len()
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |name: &str, x: f64| {
            if x.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(name, "must be finite"))
            }
        };
        finite("n_viewers", self.n_viewers)?;
        finite("beta", self.beta)?;
        finite("tau", self.tau)?;
        finite("revenue_per_viewer", self.revenue_per_viewer)?;
        finite("gamma", self.gamma)?;
        finite("phi", self.phi)?;
        if self.prices.is_empty() {
            return Err(Error::invalid("prices", "need at least one streamer"));
        }
        if self.n_viewers < 1.0 {
            return Err(Error::invalid("n_viewers", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::invalid("tau", format!("{} not in [0, 1)", self.tau)));
        }
        if self.beta < 0.0 {
            return Err(Error::invalid("beta", "must be >= 0"));
        }
        if self.revenue_per_viewer < 0.0 {
            return Err(Error::invalid("revenue_per_viewer", "must be >= 0"));
        }
        if self.gamma <= 0.0 {
            return Err(Error::invalid("gamma", "must be > 0"));
        }
        if self.phi <= 0.0 {
            return Err(Error::invalid("phi", "must be > 0"));
        }
        for (i, &p) in self.prices.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::invalid(format!("prices[{i}]"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Per-streamer constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamerParams {
    /// Intrinsic attractiveness (utility per quality unit).
    pub alpha: f64,
    /// Quality adjustment speed.
    pub eta: f64,
    /// Quadratic cost coefficient: `cost(q) = c q^2`.
    pub cost_coefficient: f64,
}

impl StreamerParams {
    pub fn new(alpha: f64, eta: f64, cost_coefficient: f64) -> Self {
        Self {
            alpha,
            eta,
            cost_coefficient,
        }
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid(format!("streamers[{index}].alpha"), "must be >= 0"));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::invalid(format!("streamers[{index}].eta"), "must be > 0"));
        }
        if !(self.cost_coefficient.is_finite() && self.cost_coefficient > 0.0) {
            return Err(Error::invalid(
                format!("streamers[{index}].cost_coefficient"),
                "must be > 0",
            ));
        }
        Ok(())
    }
}

/// Viewer counts and qualities at a point in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub n: Vec<f64>,
    pub q: Vec<f64>,
    pub t: f64,
}

impl MarketState {
    pub fn new(n: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        let state = Self { n, q, t: 0.0 };
        state.validate()?;
        Ok(state)
    }

    /// Every streamer holds `M / N` viewers at quality `q`.
    pub fn uniform(n_streamers: usize, n_viewers: f64, q: f64) -> Self {
        Self {
            n: vec![n_viewers / n_streamers as f64; n_streamers],
            q: vec![q; n_streamers],
            t: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.n.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        check_len("q", self.n.len(), &self.q)?;
        check_finite("n", &self.n)?;
        check_finite("q", &self.q)?;
        if let Some(i) = self.n.iter().position(|&x| x < 0.0) {
            return Err(Error::invalid(format!("n[{i}]"), "viewer count must be >= 0"));
        }
        if let Some(i) = self.q.iter().position(|&x| x < 0.0) {
            return Err(Error::invalid(format!("q[{i}]"), "quality must be >= 0"));
        }
        Ok(())
    }
}

/// Promotion shares on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficAllocation(Vec<f64>);

impl TrafficAllocation {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        check_finite("theta", &theta)?;
        if theta.is_empty() {
            return Err(Error::invalid("theta", "empty allocation"));
        }
        if let Some(i) = theta.iter().position(|&x| x < 0.0) {
            return Err(Error::invalid(format!("theta[{i}]"), "must be >= 0"));
        }
        let sum: f64 = theta.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid("theta", format!("sums to {sum}, not 1")));
        }
        Ok(Self(theta))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// All promotion on streamer `k`.
    pub fn vertex(n: usize, k: usize) -> Self {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        Self(v)
    }

    /// Wraps a vector the caller guarantees is on the simplex.
    pub(crate) fn from_projected(theta: Vec<f64>) -> Self {
        Self(theta)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Platform plus streamer population; every analytic operation hangs off this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Market {
    platform: PlatformParams,
    streamers: Vec<StreamerParams>,
}

impl Market {
    pub fn new(platform: PlatformParams, streamers: Vec<StreamerParams>) -> Result<Self> {
        platform.validate()?;
        if streamers.len() != platform.n_streamers() {
            return Err(Error::DimensionMismatch {
                name: "streamers",
                expected: platform.n_streamers(),
                actual: streamers.len(),
            });
        }
        for (i, s) in streamers.iter().enumerate() {
            s.validate(i)?;
        }
        Ok(Self {
            platform,
            streamers,
        })
    }

    /// `n_streamers` identical streamers.
    pub fn symmetric(platform: PlatformParams, streamer: StreamerParams) -> Result<Self> {
        let n = platform.n_streamers();
        Self::new(platform, vec![streamer; n])
    }

    pub fn platform(&self) -> &PlatformParams {
        &self.platform
    }

    pub fn streamers(&self) -> &[StreamerParams] {
        &self.streamers
    }

    pub fn n_streamers(&self) -> usize {
        self.streamers.len()
    }

    pub fn n_viewers(&self) -> f64 {
        self.platform.n_viewers
    }

    /// Same market with a different network-effect weight.
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        let mut platform = self.platform.clone();
        platform.beta = beta;
        Self::new(platform, self.streamers.clone())
    }

    pub fn with_platform(&self, platform: PlatformParams) -> Result<Self> {
        Self::new(platform, self.streamers.clone())
    }

    /// Relabels streamers: new index `i` takes old index `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut platform = self.platform.clone();
        platform.prices = perm.iter().map(|&k| self.platform.prices[k]).collect();
        Self::new(platform, perm.iter().map(|&k| self.streamers[k]).collect())
    }

    pub(crate) fn check_state(&self, state: &MarketState) -> Result<()> {
        check_len("n", self.n_streamers(), &state.n)?;
        check_len("q", self.n_streamers(), &state.q)?;
        check_finite("n", &state.n)?;
        check_finite("q", &state.q)
    }

    pub(crate) fn check_theta(&self, theta: Option<&TrafficAllocation>) -> Result<()> {
        if let Some(theta) = theta {
            check_len("theta", self.n_streamers(), theta.as_slice())?;
        }
        Ok(())
    }

    /// Deterministic part of viewer utility, `alpha q - p + beta n (+ phi theta)`.
    pub fn deterministic_utility(
        &self,
        state: &MarketState,
        theta: Option<&TrafficAllocation>,
    ) -> Result<Vec<f64>> {
        self.check_state(state)?;
        self.check_theta(theta)?;
        Ok(self.utility(&state.n, &state.q, theta))
    }

    /// Unchecked utility; callers have already validated dimensions.
    pub(crate) fn utility(&self, n: &[f64], q: &[f64], theta: Option<&TrafficAllocation>) -> Vec<f64> {
        let p = &self.platform;
        let mut v: Vec<f64> = self
            .streamers
            .iter()
            .zip(q)
            .zip(n)
            .zip(&p.prices)
            .map(|(((s, &qi), &ni), &price)| s.alpha * qi - price + p.beta * ni)
            .collect();
        if let Some(theta) = theta {
            for (vi, &t) in v.iter_mut().zip(theta.as_slice()) {
                *vi += p.phi * t;
            }
        }
        v
    }

    /// Logit probabilities at `(n, q)`; unchecked.
    pub(crate) fn probabilities(
        &self,
        n: &[f64],
        q: &[f64],
        theta: Option<&TrafficAllocation>,
    ) -> Vec<f64> {
        softmax(&self.utility(n, q, theta))
    }

    /// `dn_i/dq_i = M alpha_i P_i (1 - P_i)` with `n` held fixed.
    pub fn audience_quality_sensitivity(
        &self,
        state: &MarketState,
        theta: Option<&TrafficAllocation>,
    ) -> Result<Vec<f64>> {
        let v = self.deterministic_utility(state, theta)?;
        let p = choice_probabilities(&v)?;
        Ok(self.sensitivity_from_probabilities(&p))
    }

    pub(crate) fn sensitivity_from_probabilities(&self, p: &[f64]) -> Vec<f64> {
        let m = self.n_viewers();
        self.streamers
            .iter()
            .zip(p)
            .map(|(s, &pi)| m * s.alpha * pi * (1.0 - pi))
            .collect()
    }

    /// Profit of streamer `i` at audience `n_i` and quality `q_i`.
    pub fn streamer_profit(&self, i: usize, n_i: f64, q_i: f64) -> Result<f64> {
        let s = self.streamers.get(i).ok_or(Error::DimensionMismatch {
            name: "streamer index",
            expected: self.n_streamers(),
            actual: i,
        })?;
        streamer_profit(n_i, q_i, &self.platform, s)
    }
}

/// Logit choice probabilities with max-shift stabilisation.
pub fn choice_probabilities(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("V", "need at least one option"));
    }
    check_finite("V", v)?;
    Ok(softmax(v))
}

pub(crate) fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    out
}

/// `ln sum exp(v)`, the logit expected maximum utility.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// `n_i = M P_i`.
pub fn expected_viewers(p: &[f64], n_viewers: f64) -> Result<Vec<f64>> {
    check_finite("P", p)?;
    if !(n_viewers.is_finite() && n_viewers >= 0.0) {
        return Err(Error::invalid("n_viewers", "must be finite and >= 0"));
    }
    if let Some(i) = p.iter().position(|&x| x < 0.0) {
        return Err(Error::invalid(format!("P[{i}]"), "probability must be >= 0"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("P", format!("sums to {sum}, not 1")));
    }
    Ok(p.iter().map(|&pi| n_viewers * pi).collect())
}

/// Quality cost `c q^2`.
pub fn cost(q: f64, c: f64) -> Result<f64> {
    check_cost_args(q, c)?;
    Ok(c * q * q)
}

/// Marginal quality cost `2 c q`.
pub fn marginal_cost(q: f64, c: f64) -> Result<f64> {
    check_cost_args(q, c)?;
    Ok(2.0 * c * q)
}

fn check_cost_args(q: f64, c: f64) -> Result<()> {
    if !(q.is_finite() && q >= 0.0) {
        return Err(Error::invalid("q", format!("quality {q} must be finite and >= 0")));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::invalid("cost_coefficient", "must be > 0"));
    }
    Ok(())
}

/// `(1 - tau) R n_i - c q_i^2`.
pub fn streamer_profit(
    n_i: f64,
    q_i: f64,
    platform: &PlatformParams,
    streamer: &StreamerParams,
) -> Result<f64> {
    if !(n_i.is_finite() && n_i >= 0.0) {
        return Err(Error::invalid("n_i", "viewer count must be finite and >= 0"));
    }
    let c = cost(q_i, streamer.cost_coefficient)?;
    Ok((1.0 - platform.tau) * platform.revenue_per_viewer * n_i - c)
}

pub(crate) fn check_len(name: &'static str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            name,
            expected,
            actual: v.len(),
        });
    }
    Ok(())
}

pub(crate) fn check_finite(name: &'static str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { name, index }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_streamers(beta: f64, phi: f64) -> Market {
        let mut platform = PlatformParams::new(2, 100.0);
        platform.beta = beta;
        platform.phi = phi;
        platform.prices = vec![0.2, 0.2];
        Market::new(platform, vec![StreamerParams::new(1.0, 1.0, 0.2); 2]).unwrap()
    }

    #[test]
    fn utility_all_zero() {
        let platform = PlatformParams::new(2, 10.0);
        let market = Market::new(platform, vec![StreamerParams::new(1.0, 1.0, 1.0); 2]).unwrap();
        let state = MarketState::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(market.deterministic_utility(&state, None).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn utility_hand_value() {
        let market = two_streamers(0.15, 2.0);
        let state = MarketState::new(vec![10.0, 10.0], vec![0.5, 0.5]).unwrap();
        let v = market.deterministic_utility(&state, None).unwrap();
        assert_relative_eq!(v[0], 1.8, epsilon = 1e-12);

        let theta = TrafficAllocation::new(vec![1.0, 0.0]).unwrap();
        let vt = market.deterministic_utility(&state, Some(&theta)).unwrap();
        assert_relative_eq!(vt[0] - v[0], 2.0, epsilon = 1e-12);
        assert_eq!(vt[1], v[1]);
    }

    #[test]
    fn utility_dimension_mismatch() {
        let market = two_streamers(0.1, 1.0);
        let state = MarketState {
            n: vec![1.0, 2.0, 3.0],
            q: vec![0.0, 0.0],
            t: 0.0,
        };
        match market.deterministic_utility(&state, None) {
            Err(Error::DimensionMismatch { name, .. }) => assert_eq!(name, "n"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let p = choice_probabilities(&[3.0; 4]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));

        // 1 / (1 + e^-1) evaluated to 20 digits.
        let p = choice_probabilities(&[1.0, 0.0]).unwrap();
        assert_relative_eq!(p[0], 0.731_058_578_630_004_9, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.268_941_421_369_995_1, epsilon = 1e-15);

        let p = choice_probabilities(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert_relative_eq!(p[0], 1.0, epsilon = 1e-15);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert_eq!(
            choice_probabilities(&[0.0, f64::NAN]),
            Err(Error::NonFinite { name: "V", index: 1 })
        );
        assert!(choice_probabilities(&[]).is_err());
    }

    #[test]
    fn expected_viewer_examples() {
        assert_eq!(expected_viewers(&[0.5, 0.5], 100.0).unwrap(), vec![50.0, 50.0]);
        let n = expected_viewers(&[0.731058, 0.268942], 1000.0).unwrap();
        assert_relative_eq!(n[0], 731.058, epsilon = 1e-9);
        assert_relative_eq!(n[1], 268.942, epsilon = 1e-9);
        assert_eq!(expected_viewers(&[0.3, 0.7], 0.0).unwrap(), vec![0.0, 0.0]);
        assert!(expected_viewers(&[0.3, 0.3], 10.0).is_err());
    }

    #[test]
    fn cost_examples() {
        assert_eq!(cost(0.0, 0.3).unwrap(), 0.0);
        assert_eq!(marginal_cost(0.0, 0.3).unwrap(), 0.0);
        assert_relative_eq!(cost(0.5, 0.2).unwrap(), 0.05, epsilon = 1e-15);
        assert_relative_eq!(marginal_cost(0.5, 0.2).unwrap(), 0.2, epsilon = 1e-15);
        let c = |q| cost(q, 0.17).unwrap();
        assert!(c(0.6) - 2.0 * c(0.5) + c(0.4) > 0.0);
        assert!(cost(-0.1, 0.2).is_err());
        assert!(marginal_cost(0.1, 0.0).is_err());
    }

    #[test]
    fn profit_examples() {
        let mut platform = PlatformParams::new(1, 100.0);
        platform.tau = 0.2;
        let s = StreamerParams::new(1.0, 1.0, 0.2);
        assert_eq!(streamer_profit(0.0, 0.0, &platform, &s).unwrap(), 0.0);
        assert_relative_eq!(
            streamer_profit(100.0, 0.5, &platform, &s).unwrap(),
            79.95,
            epsilon = 1e-12
        );
        platform.tau = 1.0;
        assert!(Market::new(platform, vec![s]).is_err());
    }

    #[test]
    fn sensitivity_symmetric_and_dominant() {
        let market = two_streamers(0.01, 1.0);
        let state = MarketState::new(vec![30.0, 30.0], vec![0.4, 0.4]).unwrap();
        let s = market.audience_quality_sensitivity(&state, None).unwrap();
        assert_relative_eq!(s[0], 100.0 * 0.25, epsilon = 1e-12);
        assert_relative_eq!(s[1], 100.0 * 0.25, epsilon = 1e-12);

        let market = two_streamers(1.0, 1.0);
        let state = MarketState::new(vec![100.0, 0.0], vec![0.4, 0.4]).unwrap();
        let s = market.audience_quality_sensitivity(&state, None).unwrap();
        assert!(s[0] < 1e-30 && s[1] < 1e-30);
    }

    /// Central difference of M * softmax(V(q)) in q_i at fixed n.
    fn fd_sensitivity(market: &Market, state: &MarketState, i: usize, h: f64) -> f64 {
        let m = market.n_viewers();
        let mut up = state.clone();
        up.q[i] += h;
        let mut dn = state.clone();
        dn.q[i] -= h;
        let pu = softmax(&market.utility(&up.n, &up.q, None));
        let pd = softmax(&market.utility(&dn.n, &dn.q, None));
        m * (pu[i] - pd[i]) / (2.0 * h)
    }

    #[test]
    fn sensitivity_matches_finite_difference() {
        let mut platform = PlatformParams::new(3, 50.0);
        platform.beta = 0.03;
        platform.prices = vec![0.1, 0.0, 0.3];
        let market = Market::new(
            platform,
            vec![
                StreamerParams::new(1.2, 1.0, 0.5),
                StreamerParams::new(0.7, 1.0, 0.5),
                StreamerParams::new(2.0, 1.0, 0.5),
            ],
        )
        .unwrap();
        let state = MarketState::new(vec![20.0, 10.0, 20.0], vec![0.5, 1.0, 0.2]).unwrap();
        let s = market.audience_quality_sensitivity(&state, None).unwrap();
        for i in 0..3 {
            let fd = fd_sensitivity(&market, &state, i, 1e-5);
            assert!(((s[i] - fd) / fd).abs() < 1e-6, "i={i} {} vs {fd}", s[i]);
        }
    }

    #[test]
    fn permuting_streamers_permutes_outputs() {
        let mut platform = PlatformParams::new(3, 40.0);
        platform.beta = 0.05;
        platform.prices = vec![0.1, 0.2, 0.3];
        let market = Market::new(
            platform,
            vec![
                StreamerParams::new(1.0, 1.0, 0.5),
                StreamerParams::new(2.0, 1.0, 0.5),
                StreamerParams::new(3.0, 1.0, 0.5),
            ],
        )
        .unwrap();
        let state = MarketState::new(vec![10.0, 20.0, 10.0], vec![0.1, 0.2, 0.3]).unwrap();
        let perm = [2, 0, 1];
        let pm = market.permuted(&perm).unwrap();
        let ps = MarketState::new(
            perm.iter().map(|&k| state.n[k]).collect(),
            perm.iter().map(|&k| state.q[k]).collect(),
        )
        .unwrap();
        let s = market.audience_quality_sensitivity(&state, None).unwrap();
        let sp = pm.audience_quality_sensitivity(&ps, None).unwrap();
        for (i, &k) in perm.iter().enumerate() {
            assert_relative_eq!(sp[i], s[k], epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_normalised_and_positive(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let p = choice_probabilities(&v).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let p = choice_probabilities(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let ps = choice_probabilities(&shifted).unwrap();
            for (a, b) in p.iter().zip(&ps) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn expected_viewers_preserve_mass(v in prop::collection::vec(-20.0f64..20.0, 1..20), m in 1.0f64..1e5) {
            let p = choice_probabilities(&v).unwrap();
            let n = expected_viewers(&p, m).unwrap();
            prop_assert!((n.iter().sum::<f64>() - m).abs() <= 1e-9 * m);
        }

        #[test]
        fn cost_strictly_convex(a in 0.0f64..5.0, d in 1e-3f64..5.0, c in 1e-3f64..3.0) {
            let b = a + d;
            let mid = cost(0.5 * (a + b), c).unwrap();
            prop_assert!(mid < 0.5 * (cost(a, c).unwrap() + cost(b, c).unwrap()));
        }
    }
}
