// Microbenchmark of the integrator hot loop on a nontrivial environment.
use exitlab::environment::{ChunkCache, EnvironmentField, EnvironmentParams, Region};
use exitlab::geometry::DomainGeometry;
use exitlab::simulate::{joint_stopping, DiscreteStopSpec, IntegratorConfig};
use rand::Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

fn main() {
    println!("debug_assertions: {}", cfg!(debug_assertions));
    let env = EnvironmentField::generate(
        EnvironmentParams::new(0.05, 16.0, 2.0, 1, Region::cube(184.0)).with_gain(4.0),
    )
    .unwrap();

    // (a) rng normals only
    let mut rng = exitlab::rng::stream(1, exitlab::rng::StreamKind::Path, 0);
    let n = 30_000_000u64;
    let t0 = Instant::now();
    let mut acc = 0.0f64;
    for _ in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        acc += z;
    }
    println!("normal draw: {:.1} ns ({acc:.3})", t0.elapsed().as_nanos() as f64 / n as f64);

    // (b) field evaluation along a slowly moving point
    let mut cache = ChunkCache::default();
    let m = 10_000_000u64;
    let mut x = [3.0f64, 4.0, 5.0];
    let mut sum = 0.0;
    let t1 = Instant::now();
    for i in 0..m {
        let c = env.evaluate_fast(x, &mut cache);
        sum += c.b[0] + c.a_diag[2];
        x[(i % 3) as usize] += 0.11;
        if x[(i % 3) as usize] > 150.0 {
            x[(i % 3) as usize] = -150.0;
        }
    }
    println!("evaluate_fast: {:.1} ns ({sum:.3})", t1.elapsed().as_nanos() as f64 / m as f64);

    // (c) the full stepping loop
    let ball = DomainGeometry::ball(100.0);
    let cfg = IntegratorConfig::new(0.05, 1e12, 99);
    let spec = DiscreteStopSpec { step_length: 100.0, threshold: 20.0 };
    let t2 = Instant::now();
    let mut total_steps = 0u64;
    for k in 0..64 {
        let r = joint_stopping(&env, &ball, [50.0, 0.0, 0.0], &cfg, spec, k).unwrap();
        if let Some(t2v) = r.tau2 {
            total_steps += (t2v / 0.05) as u64;
        }
    }
    println!(
        "full step: {:.1} ns/step ({} steps)",
        t2.elapsed().as_nanos() as f64 / total_steps as f64,
        total_steps
    );
}
