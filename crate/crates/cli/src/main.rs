//! `headfx` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numerical
//! failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use headfx_core::dynamics::{self, IntegratorConfig};
use headfx_core::equilibrium::{self, FixedPointConfig};
use headfx_core::harness::{self, fmt_sig, ConfigFile, NamedScenario, ScenarioSpec, SweepParameter, SweepSpec};
use headfx_core::metrics::MetricsSummary;
use headfx_core::welfare::{self, GradientRule, OptimizerConfig};
use headfx_core::{Error, Market, Result};

#[derive(Parser)]
#[command(name = "headfx", version, about = "Head-streamer concentration: equilibria, dynamics, simulations and welfare")]
struct Cli {
    /// TOML scenario/model file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed (overrides the file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Number of seeds per scenario (overrides the file).
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the static equilibrium of the `[model]` market.
    Equilibrium(EquilibriumArgs),
    /// Integrate the viewer/quality dynamics of the `[model]` market.
    Dynamics(DynamicsArgs),
    /// Run one scenario over the seed plan.
    Simulate(SimulateArgs),
    /// Run the canonical scenarios on paired seeds and compare them.
    AbTest,
    /// Sweep one parameter of the base scenario.
    Sweep(SweepArgs),
    /// Optimise the traffic allocation of the `[model]` market.
    OptimizeTheta(OptimizeArgs),
}

#[derive(Args)]
struct EquilibriumArgs {
    /// Bisect for the critical network-effect weight in [0, HI].
    #[arg(long, value_name = "HI")]
    critical: Option<f64>,
    /// Max-share threshold that counts as concentrated.
    #[arg(long, default_value_t = 0.95)]
    threshold: f64,
    /// Scan beta over `lo:hi:points`.
    #[arg(long, value_name = "LO:HI:POINTS")]
    scan: Option<String>,
}

#[derive(Args)]
struct DynamicsArgs {
    #[arg(long, default_value_t = 200.0)]
    t_end: f64,
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    #[arg(long, default_value_t = 10)]
    record_every: usize,
    /// Phase-portrait grid `ROWSxCOLS` of perturbed starts.
    #[arg(long, value_name = "ROWSxCOLS")]
    portrait: Option<String>,
    /// Twin runs differing by this initial audience gap (fraction of M).
    #[arg(long, value_name = "FRACTION")]
    path_dependence: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Canonical scenario to run instead of the file's `name`.
    #[arg(long)]
    scenario: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// network_effect_beta | base_revenue_share | n_streamers | n_viewers
    #[arg(long)]
    parameter: Option<String>,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    /// Exact welfare gradient through the equilibrium.
    Equilibrium,
    /// First-order condition with shares held fixed.
    Foc,
}

#[derive(Args)]
struct OptimizeArgs {
    /// Traffic-sensitivity factor (overrides the model).
    #[arg(long)]
    phi: Option<f64>,
    /// KKT tolerance.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, value_enum, default_value = "equilibrium")]
    rule: RuleArg,
    /// Also run the brute-force simplex grid at this resolution.
    #[arg(long, value_name = "RESOLUTION")]
    grid: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    if cli.seed.is_some() {
        file.seed = cli.seed;
    }
    if cli.seeds.is_some() {
        file.n_seeds = cli.seeds;
    }
    match &cli.command {
        Command::Equilibrium(a) => equilibrium_cmd(&file, a, &cli.out),
        Command::Dynamics(a) => dynamics_cmd(&file, a, &cli.out),
        Command::Simulate(a) => simulate_cmd(&file, a, &cli.out),
        Command::AbTest => ab_test_cmd(&file, &cli.out),
        Command::Sweep(a) => sweep_cmd(&file, a, &cli.out),
        Command::OptimizeTheta(a) => optimize_cmd(&file, a, &cli.out),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn join(v: &[f64]) -> String {
    v.iter().map(|&x| fmt_sig(x, 6)).collect::<Vec<_>>().join(",")
}

fn state_header(n: usize) -> String {
    let mut cols: Vec<String> = (1..=n).map(|i| format!("n_{i}")).collect();
    cols.extend((1..=n).map(|i| format!("q_{i}")));
    cols.join(",")
}

fn market(file: &ConfigFile) -> Result<Market> {
    file.model.to_market().map_err(|e| Error::Config(format!("[model]: {e}")))
}

fn equilibrium_cmd(file: &ConfigFile, a: &EquilibriumArgs, out: &Path) -> Result<()> {
    let mk = market(file)?;
    let cfg = FixedPointConfig::default();
    let found = equilibrium::enumerate_equilibria(&mk, None, &cfg, file.seed.unwrap_or(0))?;
    let mut text = format!("index,max_share,stable,max_real_eigenvalue,{}\n", state_header(mk.n_streamers()));
    println!("{} distinct equilibria from {} starts", found.len(), cfg.n_starts);
    for (i, eq) in found.iter().enumerate() {
        let report = dynamics::stability_at(&mk, None, &eq.state)?;
        println!(
            "  #{i}: max share {:.6}, {} (max Re lambda = {:.3e})",
            eq.max_share(),
            if report.stable { "stable" } else { "unstable" },
            report.max_real_part()
        );
        let _ = writeln!(
            text,
            "{i},{},{},{},{},{}",
            fmt_sig(eq.max_share(), 6),
            report.stable,
            fmt_sig(report.max_real_part(), 6),
            join(&eq.state.n),
            join(&eq.state.q)
        );
    }
    write(&out.join("equilibria.csv"), &text)?;

    if let Some(spec) = &a.scan {
        let parts: Vec<&str> = spec.split(':').collect();
        let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("--scan: bad number `{s}`")));
        let [lo, hi, k] = parts.as_slice() else {
            return Err(Error::Config("--scan expects LO:HI:POINTS".into()));
        };
        let (lo, hi) = (parse(lo)?, parse(hi)?);
        let k: usize = k.parse().map_err(|_| Error::Config("--scan: POINTS must be an integer >= 2".into()))?;
        if k < 2 || !(lo < hi) {
            return Err(Error::Config("--scan: need LO < HI and POINTS >= 2".into()));
        }
        let betas: Vec<f64> = (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect();
        let scan = equilibrium::concentration_scan(&mk, &betas, a.threshold, &cfg)?;
        let mut text = String::from("beta,max_share,concentrated\n");
        for c in &scan {
            let _ = writeln!(text, "{},{},{}", fmt_sig(c.beta, 6), fmt_sig(c.max_share, 6), c.concentrated);
        }
        write(&out.join("concentration_scan.csv"), &text)?;
    }

    if let Some(hi) = a.critical {
        let cb = equilibrium::find_critical_beta(&mk, 0.0, hi, a.threshold, &cfg)?;
        println!(
            "critical beta* = {:.6e} (bracket [{:.6e}, {:.6e}], {} bisections)",
            cb.beta_star, cb.lo, cb.hi, cb.bisections
        );
    }
    Ok(())
}

fn parse_grid(spec: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("--portrait: expected ROWSxCOLS, got `{spec}`"));
    let (r, c) = spec.split_once('x').ok_or_else(bad)?;
    Ok((r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?))
}

fn dynamics_cmd(file: &ConfigFile, a: &DynamicsArgs, out: &Path) -> Result<()> {
    let mk = market(file)?;
    let cfg = IntegratorConfig {
        dt: a.dt,
        t_end: a.t_end,
        record_every: a.record_every,
    };
    let traj = dynamics::integrate(&mk, None, &mk.perturbed_symmetric_start(), &cfg)?;
    let mut text = format!("t,{}\n", state_header(mk.n_streamers()));
    for (t, s) in traj.times.iter().zip(&traj.states) {
        let _ = writeln!(text, "{},{},{}", fmt_sig(*t, 6), join(&s.n), join(&s.q));
    }
    write(&out.join("trajectory.csv"), &text)?;
    let terminal = traj.terminal();
    println!("terminal HHI {:.6}", dynamics::hhi(&terminal.n)?);
    let report = dynamics::stability_at(&mk, None, terminal)?;
    println!(
        "terminal state {} (max Re lambda = {:.3e})",
        if report.stable { "stable" } else { "not stable" },
        report.max_real_part()
    );

    if let Some(spec) = &a.portrait {
        let (rows, cols) = parse_grid(spec)?;
        let starts = dynamics::perturbed_grid(&mk, rows, cols, 0.2 * mk.n_viewers() / mk.n_streamers() as f64);
        let portrait = dynamics::phase_portrait(&mk, None, &starts, &cfg)?;
        write(&out.join("phase_portrait.csv"), &harness::phase_portrait_csv(&portrait))?;
    }
    if let Some(frac) = a.path_dependence {
        let pd = dynamics::path_dependence_experiment(&mk, frac * mk.n_viewers(), &cfg)?;
        let mut text = String::from("favored,t,gap\n");
        for twin in &pd.twins {
            println!(
                "twin favouring streamer {}: winner {}, terminal max share {:.6}",
                twin.favored + 1,
                twin.winner + 1,
                twin.terminal_max_share()
            );
            for (t, g) in &twin.gap {
                let _ = writeln!(text, "{},{},{}", twin.favored + 1, fmt_sig(*t, 6), fmt_sig(*g, 6));
            }
        }
        write(&out.join("path_dependence.csv"), &text)?;
    }
    Ok(())
}

fn print_table(rows: &[(&str, &MetricsSummary, &MetricsSummary)]) {
    println!("{:<14}{}", "scenario", MetricsSummary::COLUMNS.map(|c| format!("{c:>22}")).join(""));
    for (name, mean, sd) in rows {
        let cells: String = mean
            .values()
            .iter()
            .zip(sd.values())
            .map(|(m, s)| format!("{:>22}", format!("{m:.4} ± {s:.4}")))
            .collect();
        println!("{name:<14}{cells}");
    }
}

fn simulate_cmd(file: &ConfigFile, a: &SimulateArgs, out: &Path) -> Result<()> {
    let spec = match &a.scenario {
        Some(name) => {
            let named = NamedScenario::from_name(name)
                .ok_or_else(|| Error::Config(format!("--scenario: unknown scenario `{name}`")))?;
            ScenarioSpec::named(named, &file.sim_config(Vec::new())?, file.n_seeds(), file.seed.unwrap_or(0))
        }
        None => file.scenario()?,
    };
    let art = harness::run_scenario(&spec)?;
    harness::write_artifacts(&[&art], out)?;
    println!("wrote {}", out.display());
    print_table(&[(&art.spec.name, &art.mean, &art.sd)]);
    Ok(())
}

fn ab_test_cmd(file: &ConfigFile, out: &Path) -> Result<()> {
    let specs = file.comparison()?;
    let cmp = harness::ab_compare(&specs)?;
    let refs: Vec<_> = cmp.artifacts.iter().collect();
    harness::write_artifacts(&refs, out)?;
    println!("wrote {}", out.display());
    let rows: Vec<_> = refs.iter().map(|a| (a.spec.name.as_str(), &a.mean, &a.sd)).collect();
    print_table(&rows);
    let canonical: Vec<&str> = NamedScenario::ALL.iter().map(|s| s.name()).collect();
    if canonical.iter().all(|n| cmp.get(n).is_some()) {
        let [b, h, s, c] = [canonical[0], canonical[1], canonical[2], canonical[3]];
        println!(
            "paired seeds with Gini {c} < {s} < {h} < {b}: {:.0}%",
            100.0 * cmp.fraction_increasing(0, &[c, s, h, b])?
        );
        println!(
            "paired seeds with mobility {b} < {h} < {s} < {c}: {:.0}%",
            100.0 * cmp.fraction_increasing(2, &[b, h, s, c])?
        );
    }
    Ok(())
}

fn sweep_cmd(file: &ConfigFile, a: &SweepArgs, out: &Path) -> Result<()> {
    let spec = match (&a.parameter, &a.values) {
        (Some(p), Some(values)) => {
            let parameter = SweepParameter::from_name(p)
                .ok_or_else(|| Error::Config(format!("--parameter: unknown parameter `{p}`")))?;
            let base = file.scenario()?;
            for &v in values {
                parameter
                    .apply(&base.sim, v)
                    .map_err(|e| Error::Config(format!("--values: {p} = {v}: {e}")))?;
            }
            SweepSpec {
                parameter,
                values: values.clone(),
                base,
            }
        }
        (None, None) => file.sweep_spec()?,
        _ => return Err(Error::Config("--parameter and --values go together".into())),
    };
    let sweep = harness::sensitivity_sweep(&spec)?;
    harness::write_sweep(&sweep, out)?;
    println!("wrote {}", out.display());
    println!("{:>14}{}", spec.parameter.name(), MetricsSummary::COLUMNS.map(|c| format!("{c:>20}")).join(""));
    for (v, art) in &sweep.points {
        let cells: String = art.mean.values().iter().map(|m| format!("{m:>20.4}")).collect();
        println!("{:>14}{cells}", fmt_sig(*v, 6));
    }
    Ok(())
}

fn optimize_cmd(file: &ConfigFile, a: &OptimizeArgs, out: &Path) -> Result<()> {
    let mut mk = market(file)?;
    if let Some(phi) = a.phi {
        let mut pl = mk.platform().clone();
        pl.phi = phi;
        mk = mk.with_platform(pl).map_err(|e| Error::Config(format!("--phi: {e}")))?;
    }
    let cfg = OptimizerConfig {
        tol: a.tol,
        rule: match a.rule {
            RuleArg::Equilibrium => GradientRule::Equilibrium,
            RuleArg::Foc => GradientRule::FirstOrderCondition,
        },
        ..OptimizerConfig::default()
    };
    cfg.validate().map_err(|e| Error::Config(format!("--tol: {e}")))?;
    let sol = welfare::optimize_allocation_multistart(&mk, &welfare::default_starts(mk.n_streamers()), &cfg)?;

    let mut text = String::from("streamer,theta,n,q\n");
    for i in 0..mk.n_streamers() {
        let _ = writeln!(
            text,
            "{},{},{},{}",
            i + 1,
            fmt_sig(sol.theta.as_slice()[i], 6),
            fmt_sig(sol.state.n[i], 6),
            fmt_sig(sol.state.q[i], 6)
        );
    }
    write(&out.join("allocation.csv"), &text)?;
    let w = sol.breakdown;
    let active: Vec<String> = sol.active_set.iter().map(|i| (i + 1).to_string()).collect();
    let summary = format!(
        "consumer_surplus,producer_surplus,platform_profit,total,kkt_residual,converged,iterations,active_set\n{},{},{},{},{},{},{},{}\n",
        fmt_sig(w.consumer_surplus, 6),
        fmt_sig(w.producer_surplus, 6),
        fmt_sig(w.platform_profit, 6),
        fmt_sig(w.total, 6),
        fmt_sig(sol.kkt_residual, 6),
        sol.converged,
        sol.iterations,
        active.join(" ")
    );
    write(&out.join("welfare.csv"), &summary)?;
    println!("theta* = [{}]", join(sol.theta.as_slice()));
    println!(
        "W = {:.6} (CS {:.6}, PS {:.6}, platform {:.6})",
        w.total, w.consumer_surplus, w.producer_surplus, w.platform_profit
    );
    println!(
        "KKT residual {:.3e} ({}), active set {{{}}}",
        sol.kkt_residual,
        if sol.converged { "converged" } else { "not converged" },
        active.join(", ")
    );
    if let Some(res) = a.grid {
        let g = welfare::grid_search_allocation(&mk, res, &cfg.equilibrium)
            .map_err(|e| if matches!(e, Error::InvalidParameter { .. }) { Error::Config(format!("--grid: {e}")) } else { e })?;
        println!(
            "grid oracle ({} points): theta = [{}], W = {:.6}, optimizer - grid = {:.3e}",
            g.points,
            join(g.theta.as_slice()),
            g.welfare,
            sol.welfare - g.welfare
        );
    }
    if !sol.converged {
        return Err(Error::NoConvergence {
            what: "allocation optimizer",
            residual: sol.kkt_residual,
        });
    }
    Ok(())
}
