//! Acceptance suite: one test per criterion, each printing a pass/fail
//! line (run with `cargo test --test acceptance -- --nocapture` to see them
//! as they complete). Expected values are frozen from independent oracles
//! computed in this file or cross-checked closed forms.

use std::sync::OnceLock;
use std::time::Instant;

use num_bigint::BigUint;
use num_traits::{One, Zero};

use exitlab::brownian::{annulus_mean_exit, poisson_ball_value, walk_on_spheres};
use exitlab::config::{BoundaryFunction, ExperimentConfig};
use exitlab::coupling::{
    coupling_deviation, optimal_coupling, run_coupled_chain, ChainSpec,
    GridSpec, HolderMetricSpec, KernelGrid, TransportMethod,
};
use exitlab::environment::{EnvironmentField, EnvironmentParams, Region};
use exitlab::experiments::{
    convergence_and_rate, effective_diffusivity, holder_control_residual, localization_tail,
    rate_region_half_width, ConvergenceReport, DeskLevel, Normalization,
};
use exitlab::geometry::{DomainGeometry, Point};
use exitlab::scales::{build_schedule, derive_exponents, RationalExp, ScheduleParams};
use exitlab::simulate::{mean_exit_time, IntegratorConfig};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn trivial_env(half_width: f64, seed: u64) -> EnvironmentField {
    EnvironmentField::generate(EnvironmentParams::new(
        0.0,
        16.0,
        2.0,
        seed,
        Region::cube(half_width),
    ))
    .unwrap()
}

#[test]
fn criterion_1_schedule_arithmetic() {
    let t0 = Instant::now();
    let params = ScheduleParams::desk(3125, RationalExp::new(1, 5), 0.5, 1.0, 3, 6);
    let schedule = build_schedule(&params).unwrap();
    assert_eq!(schedule.levels[0].ell, BigUint::from(5u32));
    assert_eq!(schedule.levels[1].l, BigUint::from(15625u32));
    assert_eq!(schedule.levels[2].l, BigUint::from(78125u32));
    // exact bracket (1/2) L_n^{1+a} <= L_{n+1} <= 2 L_n^{1+a} in integer
    // arithmetic: L^num <= (2 ell)^den and ell^den <= 2^den L^num
    let a = params.a;
    for w in schedule.levels.windows(2) {
        let (cur, next) = (&w[0], &w[1]);
        assert_eq!(&cur.ell * &cur.l, next.l);
        assert!(cur.ell >= BigUint::from(5u32));
        assert_eq!(&cur.ell % 5u32, BigUint::zero());
        assert!(cur.l.pow(a.num) <= (&cur.ell * 2u32).pow(a.den));
        assert!(cur.ell.pow(a.den) <= (BigUint::one() << a.den as usize) * cur.l.pow(a.num));
    }
    let exps = derive_exponents(&params).unwrap();
    assert_eq!(exps.m_bar, 5);
    assert_eq!(exps.delta, 0.078125);
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    report(
        "1",
        true,
        &format!(
            "ell0=5, L1=15625, L2=78125, m_bar=5, delta=0.078125 in {elapsed:?}"
        ),
    );
}

#[test]
fn criterion_2_annulus_closed_form_vs_monte_carlo() {
    let t0 = Instant::now();
    let exact = annulus_mean_exit(1.0, 2.0, 3, 0.5, 1.5).unwrap();
    assert!((exact - 0.25).abs() < 1e-12);
    let env = trivial_env(2.0 + 8.0, 2026);
    let annulus = DomainGeometry::annulus(1.0, 2.0);
    let cfg =
        IntegratorConfig::new(IntegratorConfig::default_dt(annulus.r0), 1e6, 2026).with_bridge();
    let est = mean_exit_time(&env, &annulus, [1.5, 0.0, 0.0], 100_000, &cfg).unwrap();
    let within_se = (est.mean - exact).abs() <= 3.0 * est.std_err;
    let within_pct = (est.mean - exact).abs() <= 0.02 * exact;
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:?}");
    report(
        "2",
        within_se && within_pct,
        &format!(
            "closed form {exact:.6}, MC {:.6} +- {:.6} ({:+.2}%) in {elapsed:?}",
            est.mean,
            est.std_err,
            (est.mean - exact) / exact * 100.0
        ),
    );
}

/// The criterion-3 workload, reused verbatim by criterion 9's determinism
/// replicates. Returns the canonical JSON summary and the pass verdicts.
struct Criterion3 {
    json: String,
    diffusivity_ok: bool,
    exit_law_ok: bool,
    holder_ok: bool,
    chain_ok: bool,
    detail: String,
}

fn criterion3_workload() -> Criterion3 {
    // (a) scale-free diffusivity of the trivial environment
    let schedule = build_schedule(&ScheduleParams::desk(
        60,
        RationalExp::new(2, 5),
        0.5,
        0.56,
        3,
        2,
    ))
    .unwrap();
    let lv: DeskLevel = (&schedule.levels[0]).into();
    let diff_env = trivial_env(lv.l + lv.d_tilde + 12.0, 31);
    let diff_cfg = IntegratorConfig::new(1.0, 1e9, 31);
    let diff = effective_diffusivity(
        &diff_env,
        &lv,
        [0.0; 3],
        4000,
        Normalization::ScaleFree,
        &diff_cfg,
    )
    .unwrap();
    let diffusivity_ok =
        (diff.alpha_hat.mean - 0.5).abs() <= 3.0 * diff.alpha_hat.std_err && !diff.flagged;

    // (b) exit-law error at every epsilon with the trivial environment
    let cfg_text = r#"{
        "env": {"eta0": 0.0},
        "schedule": {"l0": 60, "a_num": 2, "a_den": 5, "c0": 0.56},
        "domain": {"ball": 1.0},
        "boundary_function": {"kind": "x1"},
        "epsilons": [0.04, 0.02, 0.01],
        "n_paths": 6000,
        "seed": 33,
        "dt": 0.05
    }"#;
    let config = ExperimentConfig::from_json(cfg_text).unwrap();
    let env = trivial_env(rate_region_half_width(1.0, &config.epsilons), 33);
    let cfg = IntegratorConfig::new(0.05, 1e12, 33);
    let null_rep = convergence_and_rate(&config, &env, &cfg).unwrap();
    let mut exit_law_ok = true;
    for er in &null_rep.per_epsilon {
        if er.error > 3.0 * er.combined_se {
            exit_law_ok = false;
        }
    }

    // (c) parabolic comparison residual with exact alpha-hat = 1/2
    let hl = DeskLevel {
        l: 10.0,
        d_n: 30.0,
        d_tilde: 90.0,
    };
    let henv = trivial_env(120.0, 35);
    let hcfg = IntegratorConfig::new(0.25, 1e9, 35);
    let holder = holder_control_residual(
        &henv,
        &hl,
        5.0 / 64.0,
        0.5,
        0.5,
        &BoundaryFunction::CosX1 { wavelength: 10.0 },
        [0.0; 3],
        &[
            [0.0, 0.0, 0.0],
            [5.0, 0.0, 0.0],
            [0.0, 7.0, 0.0],
            [-6.0, 3.0, 2.0],
        ],
        6000,
        &hcfg,
    )
    .unwrap();
    // the norm is a positive statistic; "zero within noise" operationally:
    // every probe residual within 3 SE of zero and the control inequality
    let holder_ok = holder.pass
        && holder
            .per_probe
            .iter()
            .all(|p| p.s_value.abs() <= 3.0 * p.se + 1e-9);

    // (d) coupled chain deviation against the plan-cost noise floor
    let chain_env = trivial_env(90.0, 37);
    let chain_cfg = IntegratorConfig::new(0.1, 1e9, 37);
    let chain_spec = ChainSpec {
        metric: HolderMetricSpec::new(5.0, 0.5),
        t_step: 4.0,
        alpha_hat: 0.5,
        spacing_factor: 1.0,
        kernel_budget: 2000,
        step_budget: 64,
    };
    let trajs = run_coupled_chain(&chain_env, [0.0; 3], &chain_spec, 10, 48, &chain_cfg).unwrap();
    let dev = coupling_deviation(&trajs, chain_spec.metric.scale, chain_spec.metric);
    let mut chain_ok = true;
    for (k, est) in dev.mean_dist_per_step.iter().enumerate() {
        if est.mean > dev.cost_budget[k] + 3.0 * est.std_err + 1e-9 {
            chain_ok = false;
        }
    }

    let json = serde_json::to_string(&serde_json::json!({
        "diffusivity": diff,
        "exit_law_null": null_rep,
        "holder_residual": holder,
        "chain_deviation": dev,
    }))
    .unwrap();
    let detail = format!(
        "alpha_hat {:.4}+-{:.4}; max |e|/se {:.2}; holder norm {:.4} (thr {:.3}); chain final d {:.4} (budget {:.4})",
        diff.alpha_hat.mean,
        diff.alpha_hat.std_err,
        null_rep
            .per_epsilon
            .iter()
            .map(|e| e.error / e.combined_se.max(1e-12))
            .fold(0.0, f64::max),
        holder.residual_norm,
        holder.threshold,
        dev.mean_dist_per_step.last().unwrap().mean,
        dev.cost_budget.last().unwrap()
    );
    Criterion3 {
        json,
        diffusivity_ok,
        exit_law_ok,
        holder_ok,
        chain_ok,
        detail,
    }
}

static CRIT3: OnceLock<Criterion3> = OnceLock::new();

fn crit3() -> &'static Criterion3 {
    CRIT3.get_or_init(|| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        pool.install(criterion3_workload)
    })
}

#[test]
fn criterion_3_trivial_environment_null() {
    let t0 = Instant::now();
    let c = crit3();
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}");
    report(
        "3",
        c.diffusivity_ok && c.exit_law_ok && c.holder_ok && c.chain_ok,
        &format!(
            "a={} b={} c={} d={}; {} in {elapsed:?}",
            c.diffusivity_ok, c.exit_law_ok, c.holder_ok, c.chain_ok, c.detail
        ),
    );
}

#[test]
fn criterion_4_walk_on_spheres_oracles() {
    let t0 = Instant::now();
    let ball = DomainGeometry::ball(1.0);
    let probes: Vec<Point> = vec![
        [0.0, 0.0, 0.0],
        [0.5, 0.0, 0.0],
        [0.0, 0.5, 0.0],
        [0.0, 0.0, -0.5],
        [0.3, 0.3, 0.3],
        [-0.6, 0.2, 0.1],
        [0.8, 0.0, 0.0],
        [0.0, -0.8, 0.3],
        [0.25, -0.5, 0.55],
        [-0.1, -0.1, -0.9],
    ];
    let linear = BoundaryFunction::X1;
    let bumpy = BoundaryFunction::Bumpy;
    let mut worst_z = 0.0f64;
    let mut pass = true;
    for (fi, f) in [&linear, &bumpy].iter().enumerate() {
        for (pi, p) in probes.iter().enumerate() {
            let oracle = poisson_ball_value(1.0, |q| f.eval(q), *p, 64);
            let est = walk_on_spheres(
                &ball,
                |q| f.eval(q),
                *p,
                1e-4,
                30_000,
                (fi * 100 + pi) as u64 + 41,
            )
            .unwrap();
            // shell bias is bounded by the modulus of f at the shell width
            let tol = 3.0 * est.std_err + f.modulus(1e-4);
            let z = (est.mean - oracle).abs() / est.std_err.max(1e-12);
            worst_z = worst_z.max(z);
            if (est.mean - oracle).abs() > tol {
                pass = false;
            }
        }
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    report(
        "4",
        pass,
        &format!("20 probe/function pairs, worst |z| = {worst_z:.2} in {elapsed:?}"),
    );
}

/// Brute-force transport oracle: enumerate every spanning-tree basis of the
/// 3x3 transportation polytope and take the cheapest feasible vertex.
fn brute_force_transport(a: &[f64; 3], b: &[f64; 3], cost: &dyn Fn(usize, usize) -> f64) -> f64 {
    let cells: Vec<(usize, usize)> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << 9) {
        if mask.count_ones() != 5 {
            continue;
        }
        let basis: Vec<(usize, usize)> = (0..9)
            .filter(|k| mask & (1 << k) != 0)
            .map(|k| cells[k])
            .collect();
        let mut flows = [[f64::NAN; 3]; 3];
        let mut rem_a = *a;
        let mut rem_b = *b;
        let mut unsolved = basis;
        loop {
            let before = unsolved.len();
            if before == 0 {
                break;
            }
            let mut idx_found = None;
            for (idx, &(i, j)) in unsolved.iter().enumerate() {
                let row_left = unsolved.iter().filter(|(r, _)| *r == i).count();
                let col_left = unsolved.iter().filter(|(_, c)| *c == j).count();
                if row_left == 1 || col_left == 1 {
                    idx_found = Some((idx, i, j, row_left == 1));
                    break;
                }
            }
            match idx_found {
                Some((idx, i, j, by_row)) => {
                    if by_row {
                        flows[i][j] = rem_a[i];
                        rem_b[j] -= rem_a[i];
                        rem_a[i] = 0.0;
                    } else {
                        flows[i][j] = rem_b[j];
                        rem_a[i] -= rem_b[j];
                        rem_b[j] = 0.0;
                    }
                    unsolved.remove(idx);
                }
                None => break, // cyclic basis
            }
        }
        if !unsolved.is_empty() {
            continue;
        }
        if flows.iter().flatten().any(|f| !f.is_nan() && *f < -1e-12) {
            continue;
        }
        let mut total = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if !flows[i][j].is_nan() && flows[i][j] > 0.0 {
                    total += flows[i][j] * cost(i, j);
                }
            }
        }
        best = best.min(total);
    }
    best
}

#[test]
fn criterion_5_transport_exactness() {
    let t0 = Instant::now();
    let spec = GridSpec {
        origin: [0.0; 3],
        spacing: 0.7,
        extents: [3, 1, 1],
    };
    let metric = HolderMetricSpec::new(2.0, 0.5);
    let cost = |i: usize, j: usize| metric.dist(spec.center(i), spec.center(j));
    use rand::Rng;
    let mut rng = exitlab::rng::stream(55, exitlab::rng::StreamKind::Generic, 5);
    let mut worst_gap = 0.0f64;
    let mut worst_residual = 0.0f64;
    let mut pass = true;
    for _ in 0..5 {
        let norm = |v: [f64; 3]| {
            let s: f64 = v.iter().sum();
            [v[0] / s, v[1] / s, v[2] / s]
        };
        let a = norm([
            rng.gen::<f64>() + 0.05,
            rng.gen::<f64>() + 0.05,
            rng.gen::<f64>() + 0.05,
        ]);
        let b = norm([
            rng.gen::<f64>() + 0.05,
            rng.gen::<f64>() + 0.05,
            rng.gen::<f64>() + 0.05,
        ]);
        let nu = KernelGrid::from_masses(spec, a.to_vec());
        let nu2 = KernelGrid::from_masses(spec, b.to_vec());
        let exact = optimal_coupling(&nu, &nu2, metric, TransportMethod::Exact).unwrap();
        let oracle = brute_force_transport(&a, &b, &cost);
        worst_gap = worst_gap.max((exact.cost_value - oracle).abs());
        worst_residual = worst_residual
            .max(exact.marginal_residuals[0])
            .max(exact.marginal_residuals[1]);
        if (exact.cost_value - oracle).abs() > 1e-6
            || exact.marginal_residuals[0] > 1e-8
            || exact.marginal_residuals[1] > 1e-8
        {
            pass = false;
        }
        let entropic = optimal_coupling(&nu, &nu2, metric, TransportMethod::Entropic).unwrap();
        if entropic.cost_value < exact.cost_value - 1e-9 {
            pass = false;
        }
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    report(
        "5",
        pass,
        &format!(
            "5 instances: worst |cost - oracle| = {worst_gap:.2e}, worst marginal residual = {worst_residual:.2e} in {elapsed:?}"
        ),
    );
}

#[test]
fn criterion_6_localization_tail_over_seeds() {
    let t0 = Instant::now();
    // level with kappa >= 3: L0 = 60, c0 = 0.56 gives kappa_0 = 3.04
    let schedule = build_schedule(&ScheduleParams::desk(
        60,
        RationalExp::new(2, 5),
        0.5,
        0.56,
        3,
        1,
    ))
    .unwrap();
    let lv: DeskLevel = (&schedule.levels[0]).into();
    assert!(lv.d_n / lv.l >= 3.0);
    let mut pass_count = 0usize;
    let mut total = 0usize;
    for eta0 in [0.0, 0.05] {
        for seed in 0..20u64 {
            let params = EnvironmentParams::new(
                eta0,
                32.0,
                4.0,
                6000 + seed,
                Region::cube(lv.l + 2.0 * lv.d_n + 24.0),
            )
            .with_gain(4.0);
            let env = EnvironmentField::generate(params).unwrap();
            let dt = if eta0 == 0.0 { 1.0 } else { 0.3 };
            let cfg = IntegratorConfig::new(dt, 1e9, 6000 + seed);
            let pts = localization_tail(
                &env,
                &lv,
                [0.0; 3],
                &[lv.d_n, 2.0 * lv.d_n],
                1500,
                &cfg,
            )
            .unwrap();
            total += 1;
            if pts.iter().all(|p| p.pass) {
                pass_count += 1;
            }
        }
    }
    let frac = pass_count as f64 / total as f64;
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}");
    report(
        "6",
        frac >= 0.95,
        &format!(
            "{pass_count}/{total} environment seeds satisfy the exponential bound at v in {{D, 2D}} in {elapsed:?}"
        ),
    );
}

/// Shared full-scale convergence study (criteria 7 and 8).
static RATE: OnceLock<ConvergenceReport> = OnceLock::new();

fn rate_report() -> &'static ConvergenceReport {
    RATE.get_or_init(|| {
        let text = r#"{
            "env": {"eta0": 0.05, "gain": 4.0},
            "schedule": {"l0": 60, "a_num": 2, "a_den": 5, "c0": 0.56},
            "domain": {"ball": 1.0},
            "boundary_function": {"kind": "x1"},
            "epsilons": [0.04, 0.02, 0.01],
            "n_paths": 100000,
            "seed": 20260808,
            "dt": 0.05
        }"#;
        let config = ExperimentConfig::from_json(text).unwrap();
        let hw = rate_region_half_width(1.0, &config.epsilons);
        let env = EnvironmentField::generate(config.env.params(config.seed, hw)).unwrap();
        let cfg = IntegratorConfig::new(0.05, 1e12, config.seed);
        convergence_and_rate(&config, &env, &cfg).unwrap()
    })
}

#[test]
fn criterion_7_convergence_trend() {
    let t0 = Instant::now();
    let rep = rate_report();
    let elapsed = t0.elapsed();
    let detail_points: Vec<String> = rep
        .per_epsilon
        .iter()
        .map(|e| {
            format!(
                "e({}) = {:.5} +- {:.5}{}",
                e.epsilon,
                e.error,
                e.combined_se,
                if e.inconclusive { " (excluded)" } else { "" }
            )
        })
        .collect();
    let fit_ok = rep
        .rate_fit
        .as_ref()
        .map(|f| f.slope_positive_95)
        .unwrap_or(false);
    let slope_txt = rep
        .rate_fit
        .as_ref()
        .map(|f| format!("slope {:.3} +- {:.3}", f.slope, f.slope_se))
        .unwrap_or_else(|| "no fit".into());
    assert!(
        elapsed.as_secs_f64() < 7200.0,
        "criterion 7 exceeded two hours: {elapsed:?}"
    );
    report(
        "7",
        rep.consistent_with_convergence && fit_ok,
        &format!(
            "{}; {}; consistent={} in {elapsed:?}",
            detail_points.join(", "),
            slope_txt,
            rep.consistent_with_convergence
        ),
    );
}

#[test]
fn criterion_8_stopping_time_ordering_and_gap() {
    let rep = rate_report();
    // orderings tau1 <= tau2 and tau <= tau~ are asserted inside the
    // integrator on every path; confirm every path was checked
    let mut checked = 0u64;
    for er in &rep.per_epsilon {
        checked += er.stopping.orderings_checked;
    }
    let expected = (rep.per_epsilon.len() * 8 * 100_000) as u64;
    // the two largest 1/eps runs carry the desk-level comparison
    let mut sorted: Vec<_> = rep.per_epsilon.iter().collect();
    sorted.sort_by(|a, b| a.epsilon.partial_cmp(&b.epsilon).unwrap());
    let p_fine = &sorted[0].stopping.gap_probability; // eps = 0.01
    let p_mid = &sorted[1].stopping.gap_probability; // eps = 0.02
    let decreasing = p_fine.p_hat < p_mid.p_hat;
    report(
        "8",
        checked == expected && decreasing,
        &format!(
            "orderings checked on {checked}/{expected} paths; P(tau - tau1 >= T): eps=0.02: {:.5} [{:.5},{:.5}], eps=0.01: {:.5} [{:.5},{:.5}]",
            p_mid.p_hat, p_mid.lo, p_mid.hi, p_fine.p_hat, p_fine.lo, p_fine.hi
        ),
    );
}

#[test]
fn criterion_9_worker_count_determinism() {
    let t0 = Instant::now();
    let base = crit3().json.clone();
    for threads in [4usize, 8] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let rerun = pool.install(criterion3_workload);
        assert_eq!(
            base, rerun.json,
            "JSON summary differs between 1 and {threads} workers"
        );
    }
    let elapsed = t0.elapsed();
    report(
        "9",
        true,
        &format!(
            "bitwise-identical JSON summaries for 1, 4, 8 workers ({} bytes) in {elapsed:?}",
            base.len()
        ),
    );
}
