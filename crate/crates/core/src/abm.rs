//! Agent-based platform simulation.
//!
//! Each round every viewer picks the streamer maximising utility plus Gumbel
//! noise, revenues are split by commission, and streamers move quality along
//! a myopic profit gradient. Policies are re-applied each round from the
//! previous round's ranking.
//!
//! Choice noise for viewer `v` in round `r` comes from an independent ChaCha
//! stream keyed by `(seed, r, v)`, so results do not depend on thread
//! scheduling and scenarios sharing a seed see identical draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// How many viewers the quality gradient treats as responsive to quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AudienceBasis {
    /// Every viewer re-chooses each round.
    AllViewers,
    /// Only viewers who switched streamer in the current round.
    Switchers,
    /// Net audience reallocated since the last round, `sum |n_t - n_(t-1)| / 2`.
    #[default]
    NetFlow,
}

/// Utility and quality-update coefficients left open by the population
/// distributions. All can be overridden from a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorConfig {
    /// Bonus when a streamer's content type matches the viewer's preference.
    pub match_bonus: f64,
    /// Multiplier on each viewer's loyalty bonus for the last streamer watched.
    pub loyalty_weight: f64,
    /// Weight of `interaction_willingness * beta * ln(1 + prev_count)`.
    pub interaction_coefficient: f64,
    /// Revenue per viewer per round.
    pub revenue_per_viewer: f64,
    /// Per-streamer price; empty means free to watch.
    pub prices: Vec<f64>,
    /// Step size of the quality gradient move.
    pub quality_step: f64,
    /// Marginal revenue is divided by `revenue_scale * n_viewers` so that it is
    /// commensurate with `2 c q` at any market size.
    pub revenue_scale: f64,
    pub audience_basis: AudienceBasis,
    pub n_content_types: u8,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            match_bonus: 0.3,
            loyalty_weight: 1.2,
            interaction_coefficient: 0.0,
            revenue_per_viewer: 1.0,
            prices: Vec::new(),
            quality_step: 0.0175,
            revenue_scale: 0.04,
            audience_basis: AudienceBasis::NetFlow,
            n_content_types: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyKind {
    /// The `top_k` streamers by last-round audience pay `raised_share`.
    HighTax { top_k: usize, raised_share: f64 },
    /// The bottom `bottom_fraction` of streamers get `boost_multiplier` exposure.
    BoostSmall {
        bottom_fraction: f64,
        boost_multiplier: f64,
    },
    /// The bottom `bottom_fraction` of streamers receive `per_round_amount`
    /// from the platform after commission.
    Subsidy {
        bottom_fraction: f64,
        per_round_amount: f64,
    },
}

/// Deserialised through [`RawPolicy`] because serde cannot combine a
/// flattened tagged enum with unknown-field rejection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy")]
pub struct PolicyIntervention {
    #[serde(flatten)]
    pub kind: PolicyKind,
    /// First round (1-based) in which the policy is active.
    pub start_round: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    kind: String,
    start_round: Option<usize>,
    top_k: Option<usize>,
    raised_share: Option<f64>,
    bottom_fraction: Option<f64>,
    boost_multiplier: Option<f64>,
    per_round_amount: Option<f64>,
}

impl TryFrom<RawPolicy> for PolicyIntervention {
    type Error = String;

    fn try_from(r: RawPolicy) -> std::result::Result<Self, String> {
        let need = |name: &str, v: Option<f64>| v.ok_or(format!("policy `{}` requires `{name}`", r.kind));
        let forbid = |fields: &[(&str, bool)]| -> std::result::Result<(), String> {
            match fields.iter().find(|(_, present)| *present) {
                Some((name, _)) => Err(format!("`{name}` does not apply to policy `{}`", r.kind)),
                None => Ok(()),
            }
        };
        let kind = match r.kind.as_str() {
            "high_tax" => {
                forbid(&[
                    ("bottom_fraction", r.bottom_fraction.is_some()),
                    ("boost_multiplier", r.boost_multiplier.is_some()),
                    ("per_round_amount", r.per_round_amount.is_some()),
                ])?;
                PolicyKind::HighTax {
                    top_k: r.top_k.ok_or("policy `high_tax` requires `top_k`")?,
                    raised_share: need("raised_share", r.raised_share)?,
                }
            }
            "boost_small" => {
                forbid(&[
                    ("top_k", r.top_k.is_some()),
                    ("raised_share", r.raised_share.is_some()),
                    ("per_round_amount", r.per_round_amount.is_some()),
                ])?;
                PolicyKind::BoostSmall {
                    bottom_fraction: need("bottom_fraction", r.bottom_fraction)?,
                    boost_multiplier: need("boost_multiplier", r.boost_multiplier)?,
                }
            }
            "subsidy" => {
                forbid(&[
                    ("top_k", r.top_k.is_some()),
                    ("raised_share", r.raised_share.is_some()),
                    ("boost_multiplier", r.boost_multiplier.is_some()),
                ])?;
                PolicyKind::Subsidy {
                    bottom_fraction: need("bottom_fraction", r.bottom_fraction)?,
                    per_round_amount: need("per_round_amount", r.per_round_amount)?,
                }
            }
            other => return Err(format!("unknown policy kind `{other}` (high_tax|boost_small|subsidy)")),
        };
        Ok(Self {
            kind,
            start_round: r.start_round.unwrap_or(Self::DEFAULT_START),
        })
    }
}

impl PolicyIntervention {
    pub const DEFAULT_START: usize = 10;

    pub fn high_tax() -> Self {
        Self {
            kind: PolicyKind::HighTax {
                top_k: 3,
                raised_share: 0.48,
            },
            start_round: Self::DEFAULT_START,
        }
    }

    pub fn boost_small() -> Self {
        Self {
            kind: PolicyKind::BoostSmall {
                bottom_fraction: 0.5,
                boost_multiplier: 1.32,
            },
            start_round: Self::DEFAULT_START,
        }
    }

    pub fn subsidy() -> Self {
        Self {
            kind: PolicyKind::Subsidy {
                bottom_fraction: 0.5,
                per_round_amount: 10.0,
            },
            start_round: Self::DEFAULT_START,
        }
    }

    pub fn validate(&self, n_streamers: usize, n_rounds: usize) -> Result<()> {
        if self.start_round < 1 || self.start_round > n_rounds.max(1) {
            return Err(Error::invalid("start_round", format!("must be in [1, {n_rounds}]")));
        }
        match self.kind {
            PolicyKind::HighTax { top_k, raised_share } => {
                if top_k == 0 || top_k > n_streamers {
                    return Err(Error::invalid("top_k", format!("must be in [1, {n_streamers}]")));
                }
                check_share("raised_share", raised_share)
            }
            PolicyKind::BoostSmall {
                bottom_fraction,
                boost_multiplier,
            } => {
                check_fraction(bottom_fraction)?;
                if !(boost_multiplier > 0.0 && boost_multiplier.is_finite()) {
                    return Err(Error::invalid("boost_multiplier", "must be > 0"));
                }
                Ok(())
            }
            PolicyKind::Subsidy {
                bottom_fraction,
                per_round_amount,
            } => {
                check_fraction(bottom_fraction)?;
                if !(per_round_amount >= 0.0 && per_round_amount.is_finite()) {
                    return Err(Error::invalid("per_round_amount", "must be >= 0"));
                }
                Ok(())
            }
        }
    }
}

fn check_share(name: &str, v: f64) -> Result<()> {
    if !(0.0..1.0).contains(&v) {
        return Err(Error::invalid(name, "must be in [0, 1)"));
    }
    Ok(())
}

fn check_fraction(v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::invalid("bottom_fraction", "must be in (0, 1]"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_streamers: usize,
    pub n_viewers: usize,
    pub n_rounds: usize,
    pub base_revenue_share: f64,
    pub network_effect_beta: f64,
    pub quality_decay_rate: f64,
    pub random_effect_scale: f64,
    pub policy_schedule: Vec<PolicyIntervention>,
    pub seed: u64,
    pub behavior: BehaviorConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_streamers: 15,
            n_viewers: 1000,
            n_rounds: 50,
            base_revenue_share: 0.2,
            network_effect_beta: 0.15,
            quality_decay_rate: 0.01,
            random_effect_scale: 0.2,
            policy_schedule: Vec::new(),
            seed: 0,
            behavior: BehaviorConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_streamers == 0 {
            return Err(Error::invalid("n_streamers", "must be >= 1"));
        }
        if self.n_viewers == 0 {
            return Err(Error::invalid("n_viewers", "must be >= 1"));
        }
        if self.n_viewers > u32::MAX as usize {
            return Err(Error::invalid("n_viewers", "must fit in 32 bits"));
        }
        check_share("base_revenue_share", self.base_revenue_share)?;
        check_share("quality_decay_rate", self.quality_decay_rate)?;
        if !(self.network_effect_beta >= 0.0 && self.network_effect_beta.is_finite()) {
            return Err(Error::invalid("network_effect_beta", "must be >= 0"));
        }
        if !(self.random_effect_scale >= 0.0 && self.random_effect_scale.is_finite()) {
            return Err(Error::invalid("random_effect_scale", "must be >= 0"));
        }
        let b = &self.behavior;
        for (name, v) in [
            ("match_bonus", b.match_bonus),
            ("loyalty_weight", b.loyalty_weight),
            ("interaction_coefficient", b.interaction_coefficient),
            ("revenue_per_viewer", b.revenue_per_viewer),
            ("quality_step", b.quality_step),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be finite and >= 0"));
            }
        }
        if !(b.revenue_scale > 0.0 && b.revenue_scale.is_finite()) {
            return Err(Error::invalid("revenue_scale", "must be > 0"));
        }
        if b.n_content_types == 0 {
            return Err(Error::invalid("n_content_types", "must be >= 1"));
        }
        if !b.prices.is_empty() && b.prices.len() != self.n_streamers {
            return Err(Error::DimensionMismatch {
                name: "prices",
                expected: self.n_streamers,
                actual: b.prices.len(),
            });
        }
        if b.prices.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("prices", "must be finite"));
        }
        for p in &self.policy_schedule {
            p.validate(self.n_streamers, self.n_rounds)?;
        }
        Ok(())
    }

    pub fn price(&self, s: usize) -> f64 {
        self.behavior.prices.get(s).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamerAgent {
    pub initial_quality: f64,
    pub current_quality: f64,
    pub cost_coefficient: f64,
    /// Fraction of this streamer's revenue kept by the platform.
    pub revenue_share: f64,
    pub exposure_boost: f64,
    pub followers: u64,
    pub content_type: u8,
    /// Transfer received from the platform this round.
    pub subsidy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewerAgent {
    pub interaction_willingness: f64,
    pub price_sensitivity: f64,
    pub quality_sensitivity: f64,
    pub network_effect_sensitivity: f64,
    pub preferred_content_type: u8,
    pub loyalty: f64,
    pub last_choice: Option<usize>,
    /// Running mean of realised utility.
    pub satisfaction: f64,
    pub rounds_watched: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub viewer_counts: Vec<f64>,
    pub streamer_revenues: Vec<f64>,
    pub platform_revenue: f64,
    pub qualities: Vec<f64>,
    pub mean_satisfaction: f64,
}

/// Samples the initial populations. Streams `0` (streamers) and `1`
/// (viewers) of the seed's ChaCha generator are reserved for this.
pub fn init_platform(cfg: &SimConfig) -> Result<(Vec<StreamerAgent>, Vec<ViewerAgent>)> {
    cfg.validate()?;
    let types = cfg.behavior.n_content_types;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let quality = Normal::<f64>::new(0.5, 0.2).expect("valid normal");
    let streamers = (0..cfg.n_streamers)
        .map(|_| {
            let q = Distribution::<f64>::sample(&quality, &mut rng).clamp(0.1, 0.9);
            StreamerAgent {
                initial_quality: q,
                current_quality: q,
                cost_coefficient: rng.random_range(0.1..0.3),
                revenue_share: cfg.base_revenue_share,
                exposure_boost: 1.0,
                followers: 0,
                content_type: rng.random_range(0..types),
                subsidy: 0.0,
            }
        })
        .collect();
    rng.set_stream(1);
    let viewers = (0..cfg.n_viewers)
        .map(|_| ViewerAgent {
            interaction_willingness: rng.random_range(0.2..0.8),
            price_sensitivity: rng.random_range(0.3..0.7),
            quality_sensitivity: rng.random_range(0.4..0.8),
            network_effect_sensitivity: rng.random_range(0.1..0.4),
            preferred_content_type: rng.random_range(0..types),
            loyalty: rng.random_range(0.3..0.7),
            last_choice: None,
            satisfaction: 0.0,
            rounds_watched: 0,
        })
        .collect();
    Ok((streamers, viewers))
}

/// Deterministic utility of `streamer` (index `s`) for `viewer`, noise excluded.
pub fn viewer_round_utility(
    viewer: &ViewerAgent,
    streamer: &StreamerAgent,
    s: usize,
    prev_counts: &[f64],
    cfg: &SimConfig,
) -> f64 {
    let b = &cfg.behavior;
    let social = cfg.network_effect_beta * prev_counts[s].ln_1p();
    let mut u = viewer.quality_sensitivity * streamer.current_quality
        + viewer.network_effect_sensitivity * social
        + b.interaction_coefficient * viewer.interaction_willingness * social
        - viewer.price_sensitivity * cfg.price(s)
        + streamer.exposure_boost.ln();
    if viewer.preferred_content_type == streamer.content_type {
        u += b.match_bonus;
    }
    if viewer.last_choice == Some(s) {
        u += b.loyalty_weight * viewer.loyalty;
    }
    u
}

/// Mutable simulation state between rounds.
#[derive(Debug, Clone)]
pub struct Platform {
    pub cfg: SimConfig,
    pub streamers: Vec<StreamerAgent>,
    pub viewers: Vec<ViewerAgent>,
    /// Audience per streamer in the last completed round (zeros before round 1).
    pub prev_counts: Vec<f64>,
    /// Number of completed rounds.
    pub round: usize,
}

impl Platform {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        let (streamers, viewers) = init_platform(&cfg)?;
        Self::from_agents(cfg, streamers, viewers)
    }

    /// Uses caller-supplied populations; `cfg.n_streamers` and
    /// `cfg.n_viewers` must match.
    pub fn from_agents(cfg: SimConfig, streamers: Vec<StreamerAgent>, viewers: Vec<ViewerAgent>) -> Result<Self> {
        cfg.validate()?;
        if streamers.len() != cfg.n_streamers {
            return Err(Error::DimensionMismatch {
                name: "streamers",
                expected: cfg.n_streamers,
                actual: streamers.len(),
            });
        }
        if viewers.len() != cfg.n_viewers {
            return Err(Error::DimensionMismatch {
                name: "viewers",
                expected: cfg.n_viewers,
                actual: viewers.len(),
            });
        }
        let n = streamers.len();
        Ok(Self {
            cfg,
            streamers,
            viewers,
            prev_counts: vec![0.0; n],
            round: 0,
        })
    }

    pub fn qualities(&self) -> Vec<f64> {
        self.streamers.iter().map(|s| s.current_quality).collect()
    }

    /// Resets policy levers, then applies every policy active in `round`.
    pub fn apply_policies(&mut self, round: usize) -> Result<()> {
        for s in &mut self.streamers {
            s.revenue_share = self.cfg.base_revenue_share;
            s.exposure_boost = 1.0;
            s.subsidy = 0.0;
        }
        let schedule = self.cfg.policy_schedule.clone();
        for policy in schedule.iter().filter(|p| round >= p.start_round) {
            self.apply_policy(policy)?;
        }
        Ok(())
    }

    /// Applies one policy using the last-round ranking.
    pub fn apply_policy(&mut self, policy: &PolicyIntervention) -> Result<()> {
        policy.validate(self.cfg.n_streamers, self.cfg.n_rounds)?;
        let ranking = rank_descending(&self.prev_counts);
        let n = ranking.len();
        match policy.kind {
            PolicyKind::HighTax { top_k, raised_share } => {
                for &s in &ranking[..top_k] {
                    self.streamers[s].revenue_share = raised_share;
                }
            }
            PolicyKind::BoostSmall {
                bottom_fraction,
                boost_multiplier,
            } => {
                for &s in &ranking[n - bottom_count(n, bottom_fraction)..] {
                    self.streamers[s].exposure_boost = boost_multiplier;
                }
            }
            PolicyKind::Subsidy {
                bottom_fraction,
                per_round_amount,
            } => {
                for &s in &ranking[n - bottom_count(n, bottom_fraction)..] {
                    self.streamers[s].subsidy += per_round_amount;
                }
            }
        }
        Ok(())
    }

    /// Runs the next round and returns its record.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let round = self.round + 1;
        self.apply_policies(round)?;
        let cfg = &self.cfg;
        let n_s = cfg.n_streamers;
        let scale = cfg.random_effect_scale;
        let gumbel = (scale > 0.0).then(|| Gumbel::new(0.0, scale).expect("valid gumbel"));

        // (choice, realised utility) per viewer; independent streams per viewer.
        let choices: Vec<(usize, f64)> = {
            let streamers = &self.streamers;
            let viewers = &self.viewers;
            let prev = &self.prev_counts;
            par::map_range(viewers.len(), |v| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(((round as u64) << 32) | v as u64);
                let mut best = (0, f64::NEG_INFINITY);
                for (s, st) in streamers.iter().enumerate() {
                    let noise = gumbel.as_ref().map_or(0.0, |g| g.sample(&mut rng));
                    let u = viewer_round_utility(&viewers[v], st, s, prev, cfg) + noise;
                    if u > best.1 {
                        best = (s, u);
                    }
                }
                best
            })
        };

        let mut counts = vec![0.0; n_s];
        let mut switchers = 0usize;
        for (viewer, &(s, u)) in self.viewers.iter_mut().zip(&choices) {
            counts[s] += 1.0;
            if viewer.last_choice.is_some_and(|last| last != s) {
                switchers += 1;
            }
            viewer.last_choice = Some(s);
            viewer.rounds_watched += 1;
            viewer.satisfaction += (u - viewer.satisfaction) / viewer.rounds_watched as f64;
        }

        let r = cfg.behavior.revenue_per_viewer;
        let mut streamer_revenues = Vec::with_capacity(n_s);
        let mut platform_revenue = 0.0;
        for (st, &c) in self.streamers.iter().zip(&counts) {
            let gross = r * c;
            let kept = (1.0 - st.revenue_share) * gross;
            streamer_revenues.push(kept + st.subsidy);
            platform_revenue += gross - kept - st.subsidy;
        }

        let net_flow = if round > 1 {
            0.5 * counts.iter().zip(&self.prev_counts).map(|(a, b)| (a - b).abs()).sum::<f64>()
        } else {
            0.0
        };
        self.update_quality(&counts, switchers, net_flow);
        for (st, &c) in self.streamers.iter_mut().zip(&counts) {
            st.followers += c as u64;
        }

        let mean_satisfaction =
            self.viewers.iter().map(|v| v.satisfaction).sum::<f64>() / self.viewers.len() as f64;
        self.prev_counts = counts.clone();
        self.round = round;
        Ok(RoundRecord {
            round,
            viewer_counts: counts,
            streamer_revenues,
            platform_revenue,
            qualities: self.qualities(),
            mean_satisfaction,
        })
    }

    /// `q <- clamp(q (1 - decay) + step ((1 - share) R dn/dq / (scale M) - 2 c q), 0, 1)`
    /// with `dn/dq = A alpha P (1 - P)` at empirical shares `P`, `alpha` the
    /// mean quality sensitivity in noise units and `A` the responsive audience.
    fn update_quality(&mut self, counts: &[f64], switchers: usize, net_flow: f64) {
        let cfg = &self.cfg;
        let b = &cfg.behavior;
        let m = cfg.n_viewers as f64;
        let audience = match b.audience_basis {
            AudienceBasis::AllViewers => m,
            AudienceBasis::Switchers => switchers as f64,
            AudienceBasis::NetFlow => net_flow,
        };
        let mean_qs = self.viewers.iter().map(|v| v.quality_sensitivity).sum::<f64>() / m;
        let alpha = mean_qs / cfg.random_effect_scale.max(NOISE_FLOOR);
        for (st, &c) in self.streamers.iter_mut().zip(counts) {
            let p = c / m;
            let dn_dq = audience * alpha * p * (1.0 - p);
            let gain = (1.0 - st.revenue_share) * b.revenue_per_viewer * dn_dq / (b.revenue_scale * m);
            let q = st.current_quality;
            let step = b.quality_step * (gain - 2.0 * st.cost_coefficient * q);
            st.current_quality = (q * (1.0 - cfg.quality_decay_rate) + step).clamp(0.0, 1.0);
        }
    }
}

/// Lower bound on the noise scale used to express quality sensitivity in
/// logit units.
pub const NOISE_FLOOR: f64 = 0.01;

/// Indices sorted by descending value, ties by ascending index.
pub fn rank_descending(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

/// `round(fraction * n)`, at least 1 and at most `n`.
pub fn bottom_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationOutput {
    pub records: Vec<RoundRecord>,
    pub initial_qualities: Vec<f64>,
    /// Per-viewer running satisfaction after the last round.
    pub final_satisfaction: Vec<f64>,
}

pub fn run_simulation(cfg: &SimConfig) -> Result<SimulationOutput> {
    let mut platform = Platform::new(cfg.clone())?;
    let initial_qualities = platform.qualities();
    let mut records = Vec::with_capacity(cfg.n_rounds);
    for _ in 0..cfg.n_rounds {
        records.push(platform.run_round()?);
    }
    Ok(SimulationOutput {
        records,
        initial_qualities,
        final_satisfaction: platform.viewers.iter().map(|v| v.satisfaction).collect(),
    })
}
