// Reduced-scale probe of the convergence study: timings and error magnitudes.
use exitlab::config::ExperimentConfig;
use exitlab::environment::EnvironmentField;
use exitlab::experiments::{convergence_and_rate, rate_region_half_width};
use exitlab::simulate::IntegratorConfig;
use std::time::Instant;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let text = format!(r#"{{
        "env": {{"eta0": 0.05, "gain": 4.0}},
        "schedule": {{"l0": 60, "a_num": 2, "a_den": 5, "c0": 0.56}},
        "domain": {{"ball": 1.0}},
        "boundary_function": {{"kind": "x1"}},
        "epsilons": [0.04, 0.02, 0.01],
        "n_paths": {n},
        "seed": 20260808,
        "dt": 0.1
    }}"#);
    let config = ExperimentConfig::from_json(&text).unwrap();
    let hw = rate_region_half_width(1.0, &config.epsilons);
    println!("region half width {hw}");
    let t0 = Instant::now();
    let env = EnvironmentField::generate(config.env.params(config.seed, hw)).unwrap();
    let cfg = IntegratorConfig::new(0.1, 1e12, config.seed);
    let rep = convergence_and_rate(&config, &env, &cfg).unwrap();
    println!("elapsed {:?}", t0.elapsed());
    for er in &rep.per_epsilon {
        println!(
            "eps {:.4}  e = {:.5}  se = {:.5}  incl {}  gap p = {:.5} ({}/{})",
            er.epsilon, er.error, er.combined_se, !er.inconclusive,
            er.stopping.gap_probability.p_hat,
            er.stopping.gap_probability.successes, er.stopping.gap_probability.trials
        );
        for pv in &er.probe_values {
            println!("   probe {:+.3}: u_eps {:+.5} +- {:.5}   u_bar {:+.5}", pv.probe[0], pv.u_eps.mean, pv.u_eps.std_err, pv.u_bar);
        }
    }
    if let Some(fit) = &rep.rate_fit {
        println!("slope {:.3} +- {:.3}  positive95 {}", fit.slope, fit.slope_se, fit.slope_positive_95);
    }
    println!("consistent: {}", rep.consistent_with_convergence);
    for w in &rep.warnings { println!("warning: {w}"); }
}
