//! Command-line front end for the exit-law laboratory.
//!
//! Every subcommand reads the JSON experiment config, runs one estimator
//! suite, writes a JSON summary plus CSV tables under the output directory,
//! and exits 0 when all asserted properties passed, 2 when the run was
//! statistically inconclusive, and 1 on failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use exitlab::brownian::annulus_mean_exit;
use exitlab::config::ExperimentConfig;
use exitlab::coupling::{coupling_deviation, run_coupled_chain, ChainSpec, HolderMetricSpec};
use exitlab::environment::EnvironmentField;
use exitlab::experiments::{
    convergence_and_rate, effective_diffusivity, exit_time_tail, holder_control_residual,
    localization_tail, rate_region_half_width, DeskLevel, Normalization,
};
use exitlab::geometry::DomainGeometry;
use exitlab::scales::{build_schedule, derive_exponents, fit_zeta, schedule_csv, Regime};
use exitlab::simulate::{mean_exit_time, sample_exit_law, IntegratorConfig};

#[derive(Parser)]
#[command(
    name = "exitlab",
    version,
    about = "Monte Carlo laboratory for exit laws in random environments"
)]
struct Cli {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for JSON summaries and CSV tables.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to the core count).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Cmd {
    /// Build the constant schedule, check its invariants, export CSV.
    Schedule,
    /// Generate an environment realization and verify its bounds.
    GenEnv,
    /// Annulus mean-exit closed form against Monte Carlo.
    AnnulusCheck,
    /// Smoothed exit-law estimates at the probes for the first epsilon.
    ExitLaw,
    /// Effective diffusivity with the localization truncation.
    Diffusivity,
    /// Parabolic comparison residual in the rescaled Hoelder norm.
    Controls,
    /// Localization and exit-time tails.
    Tails,
    /// Coupled chain and its deviation statistics.
    Couple,
    /// Full exit-law convergence study with the rate fit.
    Rate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Outcome {
    Pass,
    Inconclusive,
    Fail,
}

const DEFAULT_CONFIG: &str = r#"{
    "env": {"eta0": 0.05, "dep_range": 8.0, "h_env": 1.0, "gain": 4.0},
    "schedule": {"l0": 60, "a_num": 2, "a_den": 5, "beta": 0.5, "c0": 0.56, "d": 3, "n_max": 6},
    "domain": {"ball": 1.0},
    "boundary_function": {"kind": "x1"},
    "epsilons": [0.04, 0.02],
    "n_paths": 4000,
    "seed": 1,
    "dt": 0.05
}"#;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool already initialized");
    }
    match run(&cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Inconclusive) => ExitCode::from(2),
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> exitlab::Result<Outcome> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)?,
        None => DEFAULT_CONFIG.to_string(),
    };
    let mut config = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out_dir = match &config.output_dir {
        Some(d) => PathBuf::from(d),
        None => cli.out.clone(),
    };
    std::fs::create_dir_all(&out_dir)?;

    let (outcome, summary) = match cli.cmd {
        Cmd::Schedule => cmd_schedule(&config, &out_dir)?,
        Cmd::GenEnv => cmd_gen_env(&config)?,
        Cmd::AnnulusCheck => cmd_annulus(&config)?,
        Cmd::ExitLaw => cmd_exit_law(&config, &out_dir)?,
        Cmd::Diffusivity => cmd_diffusivity(&config)?,
        Cmd::Controls => cmd_controls(&config)?,
        Cmd::Tails => cmd_tails(&config, &out_dir)?,
        Cmd::Couple => cmd_couple(&config)?,
        Cmd::Rate => cmd_rate(&config, &out_dir)?,
    };
    let name = match cli.cmd {
        Cmd::Schedule => "schedule",
        Cmd::GenEnv => "gen-env",
        Cmd::AnnulusCheck => "annulus-check",
        Cmd::ExitLaw => "exit-law",
        Cmd::Diffusivity => "diffusivity",
        Cmd::Controls => "controls",
        Cmd::Tails => "tails",
        Cmd::Couple => "couple",
        Cmd::Rate => "rate",
    };
    let doc = json!({
        "command": name,
        "config": config,
        "outcome": outcome,
        "results": summary,
    });
    let path = out_dir.join(format!("{name}_summary.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
    println!("{name}: {outcome:?} (summary at {})", path.display());
    Ok(outcome)
}

fn integrator(config: &ExperimentConfig, r0: f64) -> IntegratorConfig {
    let dt = config.dt.unwrap_or_else(|| IntegratorConfig::default_dt(r0));
    IntegratorConfig::new(dt, 1e12, config.seed)
}

fn cmd_schedule(
    config: &ExperimentConfig,
    out_dir: &PathBuf,
) -> exitlab::Result<(Outcome, serde_json::Value)> {
    let params = config.schedule.params();
    let schedule = build_schedule(&params)?;
    let exps = derive_exponents(&params)?;
    std::fs::write(out_dir.join("schedule.csv"), schedule_csv(&schedule))?;
    let zeta = if params.regime == Regime::Paper
        || schedule.levels.len() > exps.m_bar as usize + 2
    {
        Some(fit_zeta(&schedule, &exps)?)
    } else {
        None
    };
    Ok((
        Outcome::Pass,
        json!({
            "levels": schedule.levels.len(),
            "delta": exps.delta,
            "m0": exps.m0,
            "m_bar": exps.m_bar,
            "m0_min": exps.m0_min,
            "zeta": zeta,
        }),
    ))
}

fn cmd_gen_env(config: &ExperimentConfig) -> exitlab::Result<(Outcome, serde_json::Value)> {
    let params = config.env.params(config.seed, 40.0);
    let field = EnvironmentField::generate(params.clone())?;
    let mut cache = exitlab::environment::ChunkCache::default();
    let mut sup_b = 0.0f64;
    let mut sup_a = 0.0f64;
    let mut rng = exitlab::rng::stream(config.seed, exitlab::rng::StreamKind::Generic, 0xe28);
    use rand::Rng;
    for _ in 0..10_000 {
        let x = [
            rng.gen_range(-35.0..35.0),
            rng.gen_range(-35.0..35.0),
            rng.gen_range(-35.0..35.0),
        ];
        let c = field.evaluate_fast(x, &mut cache);
        for i in 0..3 {
            sup_b = sup_b.max(c.b[i].abs());
            sup_a = sup_a.max((c.a_diag[i] - 1.0).abs());
        }
    }
    let ok = sup_b <= params.eta0 && sup_a <= params.eta0;
    Ok((
        if ok { Outcome::Pass } else { Outcome::Fail },
        json!({
            "params": params,
            "sampled_sup_drift": sup_b,
            "sampled_sup_a_minus_i": sup_a,
            "lipschitz_bound": field.lipschitz_bound(),
        }),
    ))
}

fn cmd_annulus(config: &ExperimentConfig) -> exitlab::Result<(Outcome, serde_json::Value)> {
    let (r1, r2, start_r) = (1.0, 2.0, 1.5);
    let exact = annulus_mean_exit(r1, r2, 3, 0.5, start_r)?;
    let env = EnvironmentField::generate(exitlab::environment::EnvironmentParams::new(
        0.0,
        8.0,
        1.0,
        config.seed,
        exitlab::environment::Region::cube(r2 + 8.0),
    ))?;
    let annulus = DomainGeometry::annulus(r1, r2);
    // baseline check runs at the stock step, not the experiment override
    let cfg = IntegratorConfig::new(IntegratorConfig::default_dt(r1), 1e6, config.seed).with_bridge();
    let n = config.n_paths.max(10_000);
    let est = mean_exit_time(&env, &annulus, [start_r, 0.0, 0.0], n, &cfg)?;
    let within_se = (est.mean - exact).abs() <= 3.0 * est.std_err;
    let within_pct = (est.mean - exact).abs() <= 0.02 * exact;
    Ok((
        if within_se && within_pct {
            Outcome::Pass
        } else {
            Outcome::Fail
        },
        json!({
            "closed_form": exact,
            "monte_carlo": est,
            "within_3se": within_se,
            "within_2pct": within_pct,
        }),
    ))
}

fn cmd_exit_law(
    config: &ExperimentConfig,
    out_dir: &PathBuf,
) -> exitlab::Result<(Outcome, serde_json::Value)> {
    let domain = config.domain.build()?;
    let eps = config.epsilons[0];
    let hw = rate_region_half_width(domain.bounding_half_width(), &[eps]);
    let env = EnvironmentField::generate(config.env.params(config.seed, hw))?;
    let cfg = integrator(config, domain.r0);
    let probes = config.probe_set()?;
    let f = config.boundary_function.clone();
    let ests = sample_exit_law(
        &env,
        &domain,
        eps,
        |p| f.eval(p),
        &probes,
        config.n_paths,
        &cfg,
    )?;
    let mut csv = String::from("probe_x,probe_y,probe_z,u_eps,se,censored\n");
    for e in &ests {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.probe[0], e.probe[1], e.probe[2], e.value.mean, e.value.std_err, e.censored_fraction
        ));
    }
    std::fs::write(out_dir.join("exit_law.csv"), csv)?;
    let flagged = ests.iter().any(|e| e.flagged);
    Ok((
        if flagged {
            Outcome::Inconclusive
        } else {
            Outcome::Pass
        },
        json!({ "epsilon": eps, "estimates": ests }),
    ))
}

fn experiment_level(config: &ExperimentConfig) -> exitlab::Result<DeskLevel> {
    let schedule = build_schedule(&config.schedule.params())?;
    Ok((&schedule.levels[0]).into())
}

/// Coarser noise lattice for the large-excursion experiments, keeping the
/// worst-case storage box inside the budget.
fn coarse_env(config: &ExperimentConfig) -> exitlab::config::EnvConfig {
    let mut env_cfg = config.env.clone();
    if config.env.eta0 > 0.0 && env_cfg.half_width.is_none() {
        env_cfg.dep_range = 32.0;
        env_cfg.h_env = 4.0;
    }
    env_cfg
}

fn cmd_diffusivity(config: &ExperimentConfig) -> exitlab::Result<(Outcome, serde_json::Value)> {
    let lv = experiment_level(config)?;
    let hw = lv.l + lv.d_tilde + 12.0;
    let env = EnvironmentField::generate(coarse_env(config).params(config.seed, hw))?;
    let cfg = IntegratorConfig::new(config.dt.unwrap_or(0.5), 1e12, config.seed);
    let est = effective_diffusivity(
        &env,
        &lv,
        [0.0; 3],
        config.n_paths,
        Normalization::ScaleFree,
        &cfg,
    )?;
    let nu = 1.0 / (1.0 - config.env.eta0);
    let in_window = est.alpha_hat.mean >= 1.0 / (2.0 * nu) && est.alpha_hat.mean <= 2.0 * nu;
    let outcome = if est.flagged {
        Outcome::Inconclusive
    } else if in_window {
        Outcome::Pass
    } else {
        Outcome::Fail
    };
    Ok((
        outcome,
        json!({
            "level": lv,
            "alpha_hat": est,
            "ellipticity_window": [1.0 / (2.0 * nu), 2.0 * nu],
        }),
    ))
}

fn cmd_controls(config: &ExperimentConfig) -> exitlab::Result<(Outcome, serde_json::Value)> {
    let lv = experiment_level(config)?;
    let hw = 3.0 * lv.l + 8.0 * lv.l + 20.0;
    let env = EnvironmentField::generate(coarse_env(config).params(config.seed, hw))?;
    let cfg = IntegratorConfig::new(config.dt.unwrap_or(0.5), 1e12, config.seed);
    let offsets = [
        [0.0, 0.0, 0.0],
        [0.5 * lv.l, 0.0, 0.0],
        [0.0, 0.8 * lv.l, 0.0],
        [-0.6 * lv.l, 0.4 * lv.l, 0.3 * lv.l],
        [1.5 * lv.l, -0.5 * lv.l, 0.0],
    ];
    let alpha = effective_diffusivity(
        &env,
        &lv,
        [0.0; 3],
        config.n_paths.min(4000),
        Normalization::ScaleFree,
        &cfg,
    )?;
    let params = config.schedule.params();
    let exps = derive_exponents(&params)?;
    let rep = holder_control_residual(
        &env,
        &lv,
        exps.delta,
        params.beta,
        alpha.alpha_hat.mean,
        &config.boundary_function,
        [0.0; 3],
        &offsets,
        config.n_paths,
        &cfg,
    )?;
    let outcome = if rep.inconclusive {
        Outcome::Inconclusive
    } else if rep.pass {
        Outcome::Pass
    } else {
        Outcome::Fail
    };
    Ok((outcome, json!({ "alpha_hat": alpha.alpha_hat, "residual": rep })))
}

fn cmd_tails(
    config: &ExperimentConfig,
    out_dir: &PathBuf,
) -> exitlab::Result<(Outcome, serde_json::Value)> {
    let lv = experiment_level(config)?;
    let hw = lv.l + 2.0 * lv.d_n + 20.0;
    let env = EnvironmentField::generate(coarse_env(config).params(config.seed, hw))?;
    let cfg = IntegratorConfig::new(config.dt.unwrap_or(0.5), 1e12, config.seed);
    let pts = localization_tail(
        &env,
        &lv,
        [0.0; 3],
        &[lv.d_n, 2.0 * lv.d_n],
        config.n_paths,
        &cfg,
    )?;
    let mut csv = String::from("v,bound,p_hat,wilson_lo,wilson_hi,pass\n");
    for p in &pts {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.v, p.bound, p.interval.p_hat, p.interval.lo, p.interval.hi, p.pass
        ));
    }
    std::fs::write(out_dir.join("localization_tail.csv"), csv)?;

    let domain = config.domain.build()?;
    let eps = config.epsilons[0];
    let tail_hw = rate_region_half_width(domain.bounding_half_width(), &[eps]);
    let tail_env = EnvironmentField::generate(config.env.params(config.seed, tail_hw))?;
    let tcfg = integrator(config, domain.r0);
    let horizon = 3.0 * (domain.bounding_half_width() / eps).powi(2);
    let probes = config.probe_set()?;
    let tail = exit_time_tail(
        &tail_env,
        &domain,
        eps,
        horizon,
        &probes,
        config.n_paths.min(4000),
        &tcfg,
    )?;
    let all_pass = pts.iter().all(|p| p.pass);
    Ok((
        if all_pass { Outcome::Pass } else { Outcome::Fail },
        json!({ "localization": pts, "exit_time_tail": tail }),
    ))
}

fn cmd_couple(config: &ExperimentConfig) -> exitlab::Result<(Outcome, serde_json::Value)> {
    let env = EnvironmentField::generate(config.env.params(config.seed, 80.0))?;
    let cfg = IntegratorConfig::new(config.dt.unwrap_or(0.1), 1e9, config.seed);
    let spec = ChainSpec {
        metric: HolderMetricSpec::new(5.0, config.schedule.beta),
        t_step: 4.0,
        alpha_hat: 0.5,
        spacing_factor: 1.0,
        kernel_budget: config.n_paths.clamp(500, 4000),
        step_budget: 128,
    };
    let n_chains = 48;
    let n_steps = 10;
    let trajs = run_coupled_chain(&env, [0.0; 3], &spec, n_steps, n_chains, &cfg)?;
    let rep = coupling_deviation(&trajs, spec.metric.scale, spec.metric);
    // accumulation: the mean Hoelder deviation must respect the plan-cost
    // budget (triangle inequality) up to sampling noise at every step
    let mut ok = true;
    for (k, est) in rep.mean_dist_per_step.iter().enumerate() {
        if est.mean > rep.cost_budget[k] + 3.0 * est.std_err + 1e-9 {
            ok = false;
        }
    }
    Ok((
        if ok { Outcome::Pass } else { Outcome::Fail },
        json!({ "chains": n_chains, "steps": n_steps, "deviation": rep }),
    ))
}

fn cmd_rate(
    config: &ExperimentConfig,
    out_dir: &PathBuf,
) -> exitlab::Result<(Outcome, serde_json::Value)> {
    let domain = config.domain.build()?;
    let hw = rate_region_half_width(domain.bounding_half_width(), &config.epsilons);
    let env = EnvironmentField::generate(config.env.params(config.seed, hw))?;
    let cfg = integrator(config, domain.r0);
    let rep = convergence_and_rate(config, &env, &cfg)?;
    let mut csv = String::from("epsilon,level,error,combined_se,gap_probability,gap_hi\n");
    for er in &rep.per_epsilon {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            er.epsilon,
            er.bracket_level.map_or(-1i64, |n| n as i64),
            er.error,
            er.combined_se,
            er.stopping.gap_probability.p_hat,
            er.stopping.gap_probability.hi
        ));
    }
    std::fs::write(out_dir.join("rate.csv"), csv)?;
    let mut probe_csv = String::from("epsilon,probe_x,u_eps,se,u_bar,u_bar_se\n");
    for er in &rep.per_epsilon {
        for pv in &er.probe_values {
            probe_csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                er.epsilon, pv.probe[0], pv.u_eps.mean, pv.u_eps.std_err, pv.u_bar, pv.u_bar_se
            ));
        }
    }
    std::fs::write(out_dir.join("rate_probes.csv"), probe_csv)?;
    let outcome = match (&rep.rate_fit, rep.consistent_with_convergence) {
        (Some(fit), true) if fit.slope_positive_95 => Outcome::Pass,
        (Some(_), true) => Outcome::Inconclusive,
        (None, true) => Outcome::Inconclusive,
        _ => Outcome::Fail,
    };
    Ok((outcome, serde_json::to_value(&rep)?))
}
