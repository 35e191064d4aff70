//! Scenario runner, paired-seed A/B comparison, sensitivity sweeps, strict
//! TOML config ingestion and CSV export.
//!
//! Output layout under an output directory:
//! `summary.csv`, `summary_sd.csv`, `per_seed.csv`, and one directory per
//! scenario holding `seed_<seed>.csv` round histories and `plot_*.csv`
//! series. Paths depend only on scenario names and seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::abm::{self, BehaviorConfig, PolicyIntervention, RoundRecord, SimConfig};
use crate::dynamics::PhasePortrait;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsSummary};
use crate::model::{Market, PlatformParams, StreamerParams};
use crate::par;

pub const DEFAULT_SEEDS: usize = 10;

/// The four canonical policy scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NamedScenario {
    Baseline,
    HighTax,
    BoostSmall,
    Combined,
}

impl NamedScenario {
    pub const ALL: [NamedScenario; 4] = [Self::Baseline, Self::HighTax, Self::BoostSmall, Self::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::HighTax => "High_Tax",
            Self::BoostSmall => "Boost_Small",
            Self::Combined => "Combined",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn policies(self) -> Vec<PolicyIntervention> {
        match self {
            Self::Baseline => vec![],
            Self::HighTax => vec![PolicyIntervention::high_tax()],
            Self::BoostSmall => vec![PolicyIntervention::boost_small()],
            Self::Combined => vec![PolicyIntervention::high_tax(), PolicyIntervention::boost_small()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    /// `sim.seed` is ignored; seeds come from `seed_base..seed_base + n_seeds`.
    pub sim: SimConfig,
    pub n_seeds: usize,
    pub seed_base: u64,
}

impl ScenarioSpec {
    /// A canonical scenario on top of `base`, whose schedule is replaced.
    pub fn named(scenario: NamedScenario, base: &SimConfig, n_seeds: usize, seed_base: u64) -> Self {
        Self {
            name: scenario.name().to_string(),
            sim: SimConfig {
                policy_schedule: scenario.policies(),
                ..base.clone()
            },
            n_seeds,
            seed_base,
        }
    }

    /// The four canonical scenarios sharing one seed plan.
    pub fn canonical(base: &SimConfig, n_seeds: usize, seed_base: u64) -> Vec<Self> {
        NamedScenario::ALL
            .into_iter()
            .map(|s| Self::named(s, base, n_seeds, seed_base))
            .collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|k| self.seed_base + k).collect()
    }

    pub fn validate(&self) -> Result<()> {
        check_name(&self.name)?;
        if self.n_seeds == 0 {
            return Err(Error::invalid("n_seeds", "must be >= 1"));
        }
        if let Some(named) = NamedScenario::from_name(&self.name) {
            if self.sim.policy_schedule != named.policies() {
                return Err(Error::invalid(
                    "policies",
                    format!("scenario `{}` has a fixed schedule; use a custom name", self.name),
                ));
            }
        }
        self.sim.validate()
    }

    fn config_for(&self, seed: u64) -> SimConfig {
        SimConfig {
            seed,
            ..self.sim.clone()
        }
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(Error::invalid("name", format!("`{name}` must be non-empty [A-Za-z0-9_-]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub summary: MetricsSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifact {
    pub spec: ScenarioSpec,
    pub runs: Vec<SeedRun>,
    pub mean: MetricsSummary,
    pub sd: MetricsSummary,
}

impl RunArtifact {
    pub fn summaries(&self) -> Vec<MetricsSummary> {
        self.runs.iter().map(|r| r.summary).collect()
    }
}

/// Runs every seed of the plan (in parallel) and aggregates the summaries.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<RunArtifact> {
    spec.validate()?;
    let runs = par::try_map(&spec.seeds(), |&seed| {
        let out = abm::run_simulation(&spec.config_for(seed)).map_err(|e| Error::SeedFailed {
            seed,
            source: Box::new(e),
        })?;
        let summary = metrics::summarize(&out.records, &out.initial_qualities).map_err(|e| {
            Error::SeedFailed {
                seed,
                source: Box::new(e),
            }
        })?;
        Ok::<SeedRun, Error>(SeedRun {
            seed,
            records: out.records,
            summary,
        })
    })?;
    let summaries: Vec<MetricsSummary> = runs.iter().map(|r| r.summary).collect();
    let (mean, sd) = MetricsSummary::mean_and_sd(&summaries)?;
    Ok(RunArtifact {
        spec: spec.clone(),
        runs,
        mean,
        sd,
    })
}

/// Scenarios run on one paired seed plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub artifacts: Vec<RunArtifact>,
}

impl Comparison {
    pub fn names(&self) -> Vec<&str> {
        self.artifacts.iter().map(|a| a.spec.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&RunArtifact> {
        self.artifacts.iter().find(|a| a.spec.name == name)
    }

    pub fn n_seeds(&self) -> usize {
        self.artifacts[0].runs.len()
    }

    /// Fraction of seeds whose per-scenario summaries (in `artifacts` order)
    /// satisfy `pred`.
    pub fn fraction_of_seeds<F>(&self, pred: F) -> f64
    where
        F: Fn(&[MetricsSummary]) -> bool,
    {
        let k = self.n_seeds();
        let hits = (0..k)
            .filter(|&s| {
                let row: Vec<MetricsSummary> = self.artifacts.iter().map(|a| a.runs[s].summary).collect();
                pred(&row)
            })
            .count();
        hits as f64 / k as f64
    }

    /// Fraction of seeds where `metric` strictly increases along `order`.
    pub fn fraction_increasing(&self, metric: usize, order: &[&str]) -> Result<f64> {
        let idx = order
            .iter()
            .map(|n| {
                self.artifacts
                    .iter()
                    .position(|a| a.spec.name == *n)
                    .ok_or_else(|| Error::invalid("scenario", format!("`{n}` not in comparison")))
            })
            .collect::<Result<Vec<usize>>>()?;
        Ok(self.fraction_of_seeds(|row| {
            idx.windows(2).all(|w| row[w[0]].values()[metric] < row[w[1]].values()[metric])
        }))
    }

    /// Per-seed `a - b` summaries.
    pub fn paired_differences(&self, a: &str, b: &str) -> Result<Vec<MetricsSummary>> {
        let missing = |n: &str| Error::invalid("scenario", format!("`{n}` not in comparison"));
        let ra = self.get(a).ok_or_else(|| missing(a))?;
        let rb = self.get(b).ok_or_else(|| missing(b))?;
        Ok(ra
            .runs
            .iter()
            .zip(&rb.runs)
            .map(|(x, y)| {
                let (vx, vy) = (x.summary.values(), y.summary.values());
                MetricsSummary::from_values(std::array::from_fn(|i| vx[i] - vy[i]))
            })
            .collect())
    }
}

/// Runs scenarios that share one seed plan so that seeds are paired.
pub fn ab_compare(specs: &[ScenarioSpec]) -> Result<Comparison> {
    if specs.len() < 2 {
        return Err(Error::invalid("scenarios", "need at least two to compare"));
    }
    for s in &specs[1..] {
        if s.n_seeds != specs[0].n_seeds || s.seed_base != specs[0].seed_base {
            return Err(Error::SeedPlanMismatch {
                first: specs[0].name.clone(),
                second: s.name.clone(),
            });
        }
    }
    let artifacts = par::try_map(specs, run_scenario)?;
    Ok(Comparison { artifacts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    NetworkEffectBeta,
    BaseRevenueShare,
    NStreamers,
    NViewers,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            Self::NetworkEffectBeta => "network_effect_beta",
            Self::BaseRevenueShare => "base_revenue_share",
            Self::NStreamers => "n_streamers",
            Self::NViewers => "n_viewers",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Self::NetworkEffectBeta, Self::BaseRevenueShare, Self::NStreamers, Self::NViewers]
            .into_iter()
            .find(|p| p.name() == name)
    }

    /// `base` with this parameter set to `value`.
    pub fn apply(self, base: &SimConfig, value: f64) -> Result<SimConfig> {
        let mut cfg = base.clone();
        let count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(Error::invalid(self.name(), format!("{v} is not a positive integer")))
            }
        };
        match self {
            Self::NetworkEffectBeta => cfg.network_effect_beta = value,
            Self::BaseRevenueShare => cfg.base_revenue_share = value,
            Self::NStreamers => cfg.n_streamers = count(value)?,
            Self::NViewers => cfg.n_viewers = count(value)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub base: ScenarioSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepArtifact {
    pub parameter: SweepParameter,
    pub points: Vec<(f64, RunArtifact)>,
}

impl SweepArtifact {
    /// Seed-averaged `metric` at each grid value, in grid order.
    pub fn means(&self, metric: usize) -> Vec<f64> {
        self.points.iter().map(|(_, a)| a.mean.values()[metric]).collect()
    }
}

/// Runs the base scenario at every grid value. Points run in parallel and
/// each keeps its own seed plan, so results do not depend on order.
pub fn sensitivity_sweep(spec: &SweepSpec) -> Result<SweepArtifact> {
    if spec.values.is_empty() {
        return Err(Error::invalid("sweep.values", "must be non-empty"));
    }
    let name = spec.parameter.name();
    let points = par::try_map(&spec.values, |&value| {
        let failed = |e: Error| Error::SweepPointFailed {
            parameter: name.to_string(),
            value,
            source: Box::new(e),
        };
        let sim = spec.parameter.apply(&spec.base.sim, value).map_err(failed)?;
        let point = ScenarioSpec {
            sim,
            ..spec.base.clone()
        };
        Ok::<(f64, RunArtifact), Error>((value, run_scenario(&point).map_err(failed)?))
    })?;
    Ok(SweepArtifact {
        parameter: spec.parameter,
        points,
    })
}

/// Monotone up to at most one adjacent violation no larger than `slack`.
pub fn is_monotone_with_slack(values: &[f64], increasing: bool, slack: f64) -> bool {
    let violations: Vec<f64> = values
        .windows(2)
        .map(|w| if increasing { w[0] - w[1] } else { w[1] - w[0] })
        .filter(|&d| d > 0.0)
        .collect();
    violations.is_empty() || (violations.len() == 1 && violations[0] <= slack)
}

// ---------------------------------------------------------------------------
// Formatting and CSV

/// `%g`-style formatting with `sig` significant digits.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sig = sig.max(1);
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= sig as i32 {
        let m = trim_zeros(mantissa);
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

fn header_with(first: &[&str]) -> String {
    let mut cols: Vec<&str> = first.to_vec();
    cols.extend(MetricsSummary::COLUMNS);
    cols.join(",")
}

/// Scenario summary: one row per scenario, four decimals.
pub fn summary_csv<'a, I>(rows: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a MetricsSummary)>,
{
    let mut out = header_with(&["scenario"]);
    out.push('\n');
    for (name, m) in rows {
        let cells: Vec<String> = m.values().iter().map(|&v| fmt4(v)).collect();
        let _ = writeln!(out, "{name},{}", cells.join(","));
    }
    out
}

/// Inverse of [`summary_csv`].
pub fn parse_summary_csv(text: &str) -> Result<Vec<(String, MetricsSummary)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config("empty summary csv".into()))?;
    if header != header_with(&["scenario"]) {
        return Err(Error::Config(format!("unexpected summary header `{header}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 7 {
                return Err(Error::Config(format!("summary line {}: expected 7 cells", i + 2)));
            }
            let mut v = [0.0; 6];
            for (slot, cell) in v.iter_mut().zip(&cells[1..]) {
                *slot = cell
                    .parse()
                    .map_err(|_| Error::Config(format!("summary line {}: bad number `{cell}`", i + 2)))?;
            }
            Ok((cells[0].to_string(), MetricsSummary::from_values(v)))
        })
        .collect()
}

pub fn per_seed_csv(artifacts: &[&RunArtifact]) -> String {
    let mut out = header_with(&["scenario", "seed"]);
    out.push('\n');
    for a in artifacts {
        for r in &a.runs {
            let cells: Vec<String> = r.summary.values().iter().map(|&v| fmt_sig(v, 6)).collect();
            let _ = writeln!(out, "{},{},{}", a.spec.name, r.seed, cells.join(","));
        }
    }
    out
}

/// `round, n_1..n_N, rev_1..rev_N, platform_rev, q_1..q_N, mean_satisfaction`.
pub fn round_history_csv(records: &[RoundRecord]) -> String {
    let n = records.first().map_or(0, |r| r.viewer_counts.len());
    let mut cols = vec!["round".to_string()];
    cols.extend((1..=n).map(|i| format!("n_{i}")));
    cols.extend((1..=n).map(|i| format!("rev_{i}")));
    cols.push("platform_rev".into());
    cols.extend((1..=n).map(|i| format!("q_{i}")));
    cols.push("mean_satisfaction".into());
    let mut out = cols.join(",");
    out.push('\n');
    for r in records {
        let mut cells = vec![r.round.to_string()];
        cells.extend(r.viewer_counts.iter().map(|&v| fmt_sig(v, 6)));
        cells.extend(r.streamer_revenues.iter().map(|&v| fmt_sig(v, 6)));
        cells.push(fmt_sig(r.platform_revenue, 6));
        cells.extend(r.qualities.iter().map(|&v| fmt_sig(v, 6)));
        cells.push(fmt_sig(r.mean_satisfaction, 6));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Long format `parameter_value, metric, mean, sd`.
pub fn sweep_csv(sweep: &SweepArtifact) -> String {
    let mut out = String::from("parameter,parameter_value,metric,mean,sd\n");
    for (value, a) in &sweep.points {
        for (i, metric) in MetricsSummary::COLUMNS.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{metric},{},{}",
                sweep.parameter.name(),
                fmt_sig(*value, 6),
                fmt_sig(a.mean.values()[i], 6),
                fmt_sig(a.sd.values()[i], 6)
            );
        }
    }
    out
}

/// The four per-scenario time series behind the multi-panel figures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Viewers,
    Revenues,
    Quality,
    Satisfaction,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [Self::Viewers, Self::Revenues, Self::Quality, Self::Satisfaction];

    pub fn name(self) -> &'static str {
        match self {
            Self::Viewers => "viewers",
            Self::Revenues => "revenues",
            Self::Quality => "quality",
            Self::Satisfaction => "satisfaction",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown plot kind `{name}` (viewers|revenues|quality|satisfaction)")))
    }
}

/// Tidy series: per-streamer kinds emit one row per (seed, streamer, round);
/// satisfaction one row per (seed, round).
pub fn plot_csv(artifact: &RunArtifact, kind: PlotKind) -> String {
    let mut out = match kind {
        PlotKind::Satisfaction => String::from("seed,round,mean_satisfaction\n"),
        _ => format!("seed,streamer,round,{}\n", kind.name()),
    };
    for run in &artifact.runs {
        if kind == PlotKind::Satisfaction {
            for r in &run.records {
                let _ = writeln!(out, "{},{},{}", run.seed, r.round, fmt_sig(r.mean_satisfaction, 6));
            }
            continue;
        }
        let n = run.records.first().map_or(0, |r| r.viewer_counts.len());
        for s in 0..n {
            for r in &run.records {
                let v = match kind {
                    PlotKind::Viewers => r.viewer_counts[s],
                    PlotKind::Revenues => r.streamer_revenues[s],
                    PlotKind::Quality => r.qualities[s],
                    PlotKind::Satisfaction => unreachable!(),
                };
                let _ = writeln!(out, "{},{},{},{}", run.seed, s + 1, r.round, fmt_sig(v, 6));
            }
        }
    }
    out
}

/// `start, t, streamer, n, q` rows of a phase portrait.
pub fn phase_portrait_csv(portrait: &PhasePortrait) -> String {
    let mut out = String::from("start,t,streamer,n,q\n");
    for p in portrait.points() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.start,
            fmt_sig(p.t, 6),
            p.streamer + 1,
            fmt_sig(p.n, 6),
            fmt_sig(p.q, 6)
        );
    }
    out
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Writes `<out>/<scenario>/seed_<seed>.csv` and the four plot series.
pub fn write_scenario(artifact: &RunArtifact, out: &Path) -> Result<Vec<PathBuf>> {
    let dir = out.join(&artifact.spec.name);
    let mut written = Vec::new();
    for run in &artifact.runs {
        let path = dir.join(format!("seed_{}.csv", run.seed));
        write_file(&path, &round_history_csv(&run.records))?;
        written.push(path);
    }
    written.extend(export_plot_data(artifact, &PlotKind::ALL, out)?);
    Ok(written)
}

pub fn export_plot_data(artifact: &RunArtifact, kinds: &[PlotKind], out: &Path) -> Result<Vec<PathBuf>> {
    let dir = out.join(&artifact.spec.name);
    kinds
        .iter()
        .map(|&k| {
            let path = dir.join(format!("plot_{}.csv", k.name()));
            write_file(&path, &plot_csv(artifact, k))?;
            Ok(path)
        })
        .collect()
}

/// Writes every scenario plus `summary.csv`, `summary_sd.csv` and
/// `per_seed.csv` at the top of `out`.
pub fn write_artifacts(artifacts: &[&RunArtifact], out: &Path) -> Result<()> {
    for a in artifacts {
        write_scenario(a, out)?;
    }
    write_file(
        &out.join("summary.csv"),
        &summary_csv(artifacts.iter().map(|a| (a.spec.name.as_str(), &a.mean))),
    )?;
    write_file(
        &out.join("summary_sd.csv"),
        &summary_csv(artifacts.iter().map(|a| (a.spec.name.as_str(), &a.sd))),
    )?;
    write_file(&out.join("per_seed.csv"), &per_seed_csv(artifacts))
}

pub fn write_sweep(sweep: &SweepArtifact, out: &Path) -> Result<()> {
    write_file(&out.join("sweep.csv"), &sweep_csv(sweep))?;
    let mut text = header_with(&["parameter_value", "seed"]);
    text.push('\n');
    for (value, a) in &sweep.points {
        for r in &a.runs {
            let cells: Vec<String> = r.summary.values().iter().map(|&v| fmt_sig(v, 6)).collect();
            let _ = writeln!(text, "{},{},{}", fmt_sig(*value, 6), r.seed, cells.join(","));
        }
    }
    write_file(&out.join("sweep_per_seed.csv"), &text)
}

// ---------------------------------------------------------------------------
// Config

/// `[platform]`: simulation-wide scalars.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlatformSection {
    pub n_streamers: usize,
    pub n_viewers: usize,
    pub n_rounds: usize,
    pub base_revenue_share: f64,
    pub network_effect_beta: f64,
    pub quality_decay_rate: f64,
    pub random_effect_scale: f64,
}

impl Default for PlatformSection {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            n_streamers: d.n_streamers,
            n_viewers: d.n_viewers,
            n_rounds: d.n_rounds,
            base_revenue_share: d.base_revenue_share,
            network_effect_beta: d.network_effect_beta,
            quality_decay_rate: d.quality_decay_rate,
            random_effect_scale: d.random_effect_scale,
        }
    }
}

/// `[sweep]`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

/// `[model]`: an analytic market. Per-streamer vectors default to ones.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_streamers: usize,
    pub n_viewers: f64,
    pub beta: f64,
    pub tau: f64,
    pub revenue_per_viewer: f64,
    pub gamma: f64,
    pub phi: f64,
    pub prices: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
    pub cost: Option<Vec<f64>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_streamers: 5,
            n_viewers: 100.0,
            beta: 0.01,
            tau: 0.2,
            revenue_per_viewer: 0.05,
            gamma: 1.0,
            phi: 1.0,
            prices: None,
            alpha: None,
            eta: None,
            cost: None,
        }
    }
}

impl ModelSection {
    pub fn to_market(&self) -> Result<Market> {
        let n = self.n_streamers;
        let vec_or = |name: &'static str, v: &Option<Vec<f64>>, fill: f64| -> Result<Vec<f64>> {
            match v {
                Some(v) if v.len() != n => Err(Error::DimensionMismatch {
                    name,
                    expected: n,
                    actual: v.len(),
                }),
                Some(v) => Ok(v.clone()),
                None => Ok(vec![fill; n]),
            }
        };
        let platform = PlatformParams {
            n_viewers: self.n_viewers,
            beta: self.beta,
            tau: self.tau,
            revenue_per_viewer: self.revenue_per_viewer,
            gamma: self.gamma,
            phi: self.phi,
            prices: vec_or("model.prices", &self.prices, 0.0)?,
        };
        let alpha = vec_or("model.alpha", &self.alpha, 1.0)?;
        let eta = vec_or("model.eta", &self.eta, 1.0)?;
        let cost = vec_or("model.cost", &self.cost, 1.0)?;
        let streamers = (0..n).map(|i| StreamerParams::new(alpha[i], eta[i], cost[i])).collect();
        Market::new(platform, streamers)
    }
}

/// Whole config file. Every section is optional.
#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub name: Option<String>,
    pub seed: Option<u64>,
    pub n_seeds: Option<usize>,
    /// Scenario names for `ab-test`; defaults to the four canonical ones.
    pub scenarios: Option<Vec<String>>,
    #[serde(default)]
    pub platform: PlatformSection,
    pub policies: Option<Vec<PolicyIntervention>>,
    #[serde(default)]
    pub overrides: BehaviorConfig,
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub model: ModelSection,
}

const PLATFORM_KEYS: [&str; 7] = [
    "n_streamers",
    "n_viewers",
    "n_rounds",
    "base_revenue_share",
    "network_effect_beta",
    "quality_decay_rate",
    "random_effect_scale",
];

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Simulation config from `[platform]`, `[overrides]` and the schedule.
    pub fn sim_config(&self, schedule: Vec<PolicyIntervention>) -> Result<SimConfig> {
        let p = &self.platform;
        let cfg = SimConfig {
            n_streamers: p.n_streamers,
            n_viewers: p.n_viewers,
            n_rounds: p.n_rounds,
            base_revenue_share: p.base_revenue_share,
            network_effect_beta: p.network_effect_beta,
            quality_decay_rate: p.quality_decay_rate,
            random_effect_scale: p.random_effect_scale,
            policy_schedule: schedule,
            seed: self.seed.unwrap_or(0),
            behavior: self.overrides.clone(),
        };
        cfg.validate().map_err(locate)?;
        Ok(cfg)
    }

    pub fn n_seeds(&self) -> usize {
        self.n_seeds.unwrap_or(DEFAULT_SEEDS)
    }

    /// The scenario this file describes. Named scenarios take their
    /// canonical schedule and reject `[[policies]]`; custom names require it.
    pub fn scenario(&self) -> Result<ScenarioSpec> {
        let name = self.name.clone().unwrap_or_else(|| "Baseline".into());
        check_name(&name).map_err(locate)?;
        let schedule = match (NamedScenario::from_name(&name), &self.policies) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(format!(
                    "[[policies]]: scenario `{name}` has a fixed schedule; use a custom name"
                )))
            }
            (Some(named), None) => named.policies(),
            (None, Some(p)) => p.clone(),
            (None, None) => {
                return Err(Error::Config(format!(
                    "[[policies]]: missing for custom scenario `{name}` (use an empty list for none)"
                )))
            }
        };
        let spec = ScenarioSpec {
            name,
            sim: self.sim_config(schedule)?,
            n_seeds: self.n_seeds(),
            seed_base: self.seed.unwrap_or(0),
        };
        spec.validate().map_err(locate)?;
        Ok(spec)
    }

    /// Scenarios for an A/B comparison on the file's base config.
    pub fn comparison(&self) -> Result<Vec<ScenarioSpec>> {
        let base = self.sim_config(Vec::new())?;
        let names: Vec<String> = match &self.scenarios {
            Some(n) => n.clone(),
            None => NamedScenario::ALL.iter().map(|s| s.name().to_string()).collect(),
        };
        names
            .iter()
            .map(|n| {
                let named = NamedScenario::from_name(n)
                    .ok_or_else(|| Error::Config(format!("scenarios: unknown scenario `{n}`")))?;
                Ok(ScenarioSpec::named(named, &base, self.n_seeds(), self.seed.unwrap_or(0)))
            })
            .collect()
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::Config("[sweep]: section missing".into()))?;
        if s.values.is_empty() {
            return Err(Error::Config("[sweep].values: must be non-empty".into()));
        }
        let base = self.scenario()?;
        for &v in &s.values {
            s.parameter
                .apply(&base.sim, v)
                .map_err(|e| Error::Config(format!("[sweep].values: {} = {v}: {e}", s.parameter.name())))?;
        }
        Ok(SweepSpec {
            parameter: s.parameter,
            values: s.values.clone(),
            base,
        })
    }
}

/// Rewrites a validation error as a config error naming its section.
fn locate(e: Error) -> Error {
    match e {
        Error::InvalidParameter { name, reason } => {
            let section = if PLATFORM_KEYS.contains(&name.as_str()) {
                "[platform]"
            } else if matches!(
                name.as_str(),
                "start_round" | "top_k" | "raised_share" | "bottom_fraction" | "boost_multiplier" | "per_round_amount"
            ) {
                "[[policies]]"
            } else if name == "name" {
                "name"
            } else {
                "[overrides]"
            };
            Error::Config(format!("{section}.{name}: {reason}"))
        }
        Error::DimensionMismatch { name, expected, actual } => {
            Error::Config(format!("[overrides].{name}: expected {expected} entries, got {actual}"))
        }
        other => other,
    }
}

/// Either kind of experiment a config file can describe.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedConfig {
    Scenario(ScenarioSpec),
    Sweep(SweepSpec),
}

/// Strict parse: a `[sweep]` section makes the file a sweep.
pub fn parse_config(path: &Path) -> Result<ParsedConfig> {
    let file = ConfigFile::load(path)?;
    if file.sweep.is_some() {
        file.sweep_spec().map(ParsedConfig::Sweep)
    } else {
        file.scenario().map(ParsedConfig::Scenario)
    }
}
