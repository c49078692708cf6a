//! SDE integration in a random environment and the stopping rules built on
//! top of it: continuous first exit, lattice-time stopping, excursion caps,
//! and joint records of all of them along one trajectory.
//!
//! Discretization: Euler-Maruyama with per-step membership tests. A crossing
//! inside a step is attributed to the step end, which biases exit times by
//! O(sqrt(dt)); the optional Brownian-bridge test removes most of that bias
//! and is intended for the eta0 = 0 baselines where the half-space bridge
//! law is exact up to boundary curvature.
//!
//! Paths are keyed by (seed, path index); any worker count produces the
//! same trajectories, and aggregates reduce in path order.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::environment::{ChunkCache, EnvironmentField};
use crate::error::{Error, Result};
use crate::geometry::{dist, DomainGeometry, Point};
use crate::rng::{stream, StreamKind};
use crate::stats::{Estimate, Running};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scheme {
    EulerMaruyama,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub scheme: Scheme,
    /// Half-space Brownian-bridge crossing test; exact only for the trivial
    /// environment, so callers enable it for baselines alone.
    pub bridge_correction: bool,
    pub max_time: f64,
    /// Root seed; path k draws from stream (seed, k).
    pub seed: u64,
}

impl IntegratorConfig {
    pub fn new(dt: f64, max_time: f64, seed: u64) -> Self {
        assert!(dt > 0.0 && max_time >= dt);
        IntegratorConfig {
            dt,
            scheme: Scheme::EulerMaruyama,
            bridge_correction: false,
            max_time,
            seed,
        }
    }

    pub fn with_bridge(mut self) -> Self {
        self.bridge_correction = true;
        self
    }

    /// Default step: spatial increments around 5% of the smallest
    /// geometric feature.
    pub fn default_dt(r0: f64) -> f64 {
        (0.05 * r0.min(1.0)).powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StopRule {
    /// Continuous exit from the open domain.
    TauEps,
    /// Lattice time within `threshold` of the domain's complement.
    Tau1,
    /// Lattice time at distance >= `threshold` from the domain.
    Tau2,
    /// Lattice-time exit.
    TauTilde,
    /// Maximal excursion reached the localization threshold.
    Excursion,
    TimeCap,
}

/// Lattice-time stopping parameters: checks happen at multiples of
/// `step_length` (a squared length; the desk analog of L^2) with the
/// distance threshold `threshold` (the desk analog of D~).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DiscreteStopSpec {
    pub step_length: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StoppingRecord {
    pub rule: StopRule,
    pub time: f64,
    pub position: Point,
    pub max_excursion: f64,
}

struct Stepper<'a> {
    env: &'a EnvironmentField,
    cache: ChunkCache,
    rng: rand_chacha::ChaCha8Rng,
    dt: f64,
    sqrt_dt: f64,
    x: Point,
    x0: Point,
    t: f64,
    max_excursion: f64,
}

impl<'a> Stepper<'a> {
    fn new(env: &'a EnvironmentField, x0: Point, cfg: &IntegratorConfig, path_idx: u64) -> Self {
        Stepper {
            env,
            cache: ChunkCache::default(),
            rng: stream(cfg.seed, StreamKind::Path, path_idx),
            dt: cfg.dt,
            sqrt_dt: cfg.dt.sqrt(),
            x: x0,
            x0,
            t: 0.0,
            max_excursion: 0.0,
        }
    }

    /// One Euler-Maruyama step; returns the previous position.
    #[inline]
    fn step(&mut self) -> Point {
        let prev = self.x;
        let c = self.env.evaluate_fast(self.x, &mut self.cache);
        for i in 0..3 {
            let z: f64 = self.rng.sample(StandardNormal);
            self.x[i] += c.b[i] * self.dt + c.a_diag[i].sqrt() * self.sqrt_dt * z;
        }
        self.t += self.dt;
        let exc = dist(self.x, self.x0);
        if exc > self.max_excursion {
            self.max_excursion = exc;
        }
        prev
    }

    fn in_region(&self) -> bool {
        self.env.params.region.contains(self.x)
    }
}

/// Continuous first exit from `domain` (plus time cap), the workhorse of the
/// exit-law estimators.
pub fn first_exit(
    env: &EnvironmentField,
    domain: &DomainGeometry,
    x0: Point,
    cfg: &IntegratorConfig,
    path_idx: u64,
) -> Result<StoppingRecord> {
    if !env.params.region.contains(x0) {
        return Err(Error::OutOfCoverage(x0));
    }
    if !domain.contains(x0) {
        return Ok(StoppingRecord {
            rule: StopRule::TauEps,
            time: 0.0,
            position: x0,
            max_excursion: 0.0,
        });
    }
    let mut s = Stepper::new(env, x0, cfg, path_idx);
    loop {
        let prev = s.step();
        if !s.in_region() {
            return Err(Error::OutOfCoverage(s.x));
        }
        if !domain.contains(s.x) {
            return Ok(StoppingRecord {
                rule: StopRule::TauEps,
                time: s.t,
                position: s.x,
                max_excursion: s.max_excursion,
            });
        }
        if cfg.bridge_correction {
            // half-space bridge: crossing probability within the step given
            // both endpoints inside, using the signed distances to the
            // boundary and per-axis variance dt (trivial environment)
            let d1 = domain.distance_to_complement(prev);
            let d2 = domain.distance_to_complement(s.x);
            let p = (-2.0 * d1 * d2 / s.dt).exp();
            if s.rng.gen::<f64>() < p {
                let frac = d1 / (d1 + d2).max(1e-300);
                let mid = [
                    prev[0] + frac * (s.x[0] - prev[0]),
                    prev[1] + frac * (s.x[1] - prev[1]),
                    prev[2] + frac * (s.x[2] - prev[2]),
                ];
                let pos = domain.project_to_boundary(mid);
                return Ok(StoppingRecord {
                    rule: StopRule::TauEps,
                    time: s.t - 0.5 * s.dt,
                    position: pos,
                    max_excursion: s.max_excursion.max(dist(pos, x0)),
                });
            }
        }
        if s.t >= cfg.max_time {
            return Ok(StoppingRecord {
                rule: StopRule::TimeCap,
                time: s.t,
                position: s.x,
                max_excursion: s.max_excursion,
            });
        }
    }
}

/// Excursion record over a fixed horizon with the localization stop
/// X* >= threshold: returns |X_(horizon ^ T)|^2 and the stopping data.
pub fn excursion_probe(
    env: &EnvironmentField,
    x0: Point,
    cfg: &IntegratorConfig,
    horizon: f64,
    excursion_threshold: f64,
    path_idx: u64,
) -> Result<StoppingRecord> {
    if !env.params.region.contains(x0) {
        return Err(Error::OutOfCoverage(x0));
    }
    let mut s = Stepper::new(env, x0, cfg, path_idx);
    loop {
        s.step();
        if !s.in_region() {
            return Err(Error::OutOfCoverage(s.x));
        }
        if s.max_excursion >= excursion_threshold {
            return Ok(StoppingRecord {
                rule: StopRule::Excursion,
                time: s.t,
                position: s.x,
                max_excursion: s.max_excursion,
            });
        }
        if s.t >= horizon - 0.5 * s.dt {
            return Ok(StoppingRecord {
                rule: StopRule::TimeCap,
                time: s.t,
                position: s.x,
                max_excursion: s.max_excursion,
            });
        }
    }
}

/// All four stopping times of one trajectory: the continuous exit tau, the
/// lattice-time exit tau~, and the two threshold rules tau1 (near the
/// complement) and tau2 (outside the inflation). The path runs until tau2
/// fires or the cap is reached; once the continuous exit is recorded the
/// remaining lattice bookkeeping is given 32 lattice intervals before it is
/// truncated (tau2 resolves within a few intervals off a smooth boundary).
/// The orderings tau1 <= tau2 and tau <= tau~ hold exactly on every path by
/// construction and are asserted.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct JointRecord {
    pub tau_eps: Option<f64>,
    pub tau_tilde: Option<f64>,
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
    /// Position at the continuous exit time, when it fired.
    pub exit_position: Option<Point>,
    pub max_excursion: f64,
    pub capped: bool,
}

pub fn joint_stopping(
    env: &EnvironmentField,
    domain: &DomainGeometry,
    x0: Point,
    cfg: &IntegratorConfig,
    spec: DiscreteStopSpec,
    path_idx: u64,
) -> Result<JointRecord> {
    if !env.params.region.contains(x0) {
        return Err(Error::OutOfCoverage(x0));
    }
    // lattice times must sit on the integrator grid
    let spl = (spec.step_length / cfg.dt).round().max(1.0) as u64;
    let dt = spec.step_length / spl as f64;
    let cfg = IntegratorConfig { dt, ..cfg.clone() };
    let mut s = Stepper::new(env, x0, &cfg, path_idx);
    let mut rec = JointRecord {
        tau_eps: None,
        tau_tilde: None,
        tau1: None,
        tau2: None,
        exit_position: None,
        max_excursion: 0.0,
        capped: false,
    };
    let mut step_idx: u64 = 0;
    let mut exit_step: Option<u64> = None;
    loop {
        s.step();
        step_idx += 1;
        if !s.in_region() {
            // Before the exit this is a genuine coverage violation. After
            // it, only the lattice bookkeeping is still running; truncate it
            // and report via the cap flag instead of poisoning the estimate.
            if rec.tau_eps.is_none() {
                return Err(Error::OutOfCoverage(s.x));
            }
            rec.capped = true;
            rec.max_excursion = s.max_excursion;
            break;
        }
        if rec.tau_eps.is_none() && !domain.contains(s.x) {
            rec.tau_eps = Some(s.t);
            rec.exit_position = Some(s.x);
            exit_step = Some(step_idx);
        }
        if step_idx % spl == 0 {
            if rec.tau1.is_none() && domain.distance_to_complement(s.x) <= spec.threshold {
                rec.tau1 = Some(s.t);
            }
            if rec.tau_tilde.is_none() && !domain.contains(s.x) {
                rec.tau_tilde = Some(s.t);
            }
            if rec.tau2.is_none() && domain.distance_to_set(s.x) >= spec.threshold {
                rec.tau2 = Some(s.t);
                rec.max_excursion = s.max_excursion;
                break;
            }
        }
        if s.t >= cfg.max_time
            || exit_step.is_some_and(|e| step_idx >= e + 32 * spl)
        {
            rec.capped = true;
            rec.max_excursion = s.max_excursion;
            break;
        }
    }
    if let (Some(t1), Some(t2)) = (rec.tau1, rec.tau2) {
        assert!(t1 <= t2, "tau1 > tau2 on a path");
    }
    if let (Some(te), Some(tt)) = (rec.tau_eps, rec.tau_tilde) {
        assert!(te <= tt, "tau_eps > tau_tilde on a path");
    }
    Ok(rec)
}

/// Per-probe smoothed exit-law estimate u^eps(x) = E f(eps X_tau) for paths
/// started at x/eps in the unscaled domain U/eps.
#[derive(Debug, Clone, Serialize)]
pub struct ExitLawEstimate {
    pub probe: Point,
    pub value: Estimate,
    pub censored_fraction: f64,
    /// Set when censoring exceeds 0.1%.
    pub flagged: bool,
    pub mean_exit_time_micro: f64,
}

pub fn sample_exit_law<F>(
    env: &EnvironmentField,
    domain: &DomainGeometry,
    epsilon: f64,
    f: F,
    probes: &[Point],
    n_paths: usize,
    cfg: &IntegratorConfig,
) -> Result<Vec<ExitLawEstimate>>
where
    F: Fn(Point) -> f64 + Sync,
{
    let rescaled = domain.rescale(epsilon);
    let mut out = Vec::with_capacity(probes.len());
    for (p_idx, &probe) in probes.iter().enumerate() {
        let start = crate::geometry::scale(probe, 1.0 / epsilon);
        let results: Vec<Result<StoppingRecord>> = (0..n_paths)
            .into_par_iter()
            .map(|k| {
                first_exit(
                    env,
                    &rescaled,
                    start,
                    cfg,
                    (p_idx * n_paths + k) as u64,
                )
            })
            .collect();
        let mut acc = Running::default();
        let mut time_acc = Running::default();
        let mut censored = 0u64;
        for r in results {
            let rec = r?;
            match rec.rule {
                StopRule::TimeCap => {
                    censored += 1;
                    // censored paths are counted, not dropped: they enter the
                    // estimate at the capped position
                    acc.push(f(crate::geometry::scale(rec.position, epsilon)));
                }
                _ => acc.push(f(crate::geometry::scale(rec.position, epsilon))),
            }
            time_acc.push(rec.time);
        }
        let cf = censored as f64 / n_paths as f64;
        out.push(ExitLawEstimate {
            probe,
            value: Estimate::from_running(&acc),
            censored_fraction: cf,
            flagged: cf > 1e-3,
            mean_exit_time_micro: time_acc.mean(),
        });
    }
    Ok(out)
}

/// Endpoint of an unstopped path run for exactly time `t` (dt is snapped so
/// the horizon sits on the integrator grid). Used by the transition-kernel
/// estimators.
pub fn free_run(
    env: &EnvironmentField,
    x0: Point,
    cfg: &IntegratorConfig,
    t: f64,
    path_idx: u64,
) -> Result<Point> {
    if !env.params.region.contains(x0) {
        return Err(Error::OutOfCoverage(x0));
    }
    let n_steps = (t / cfg.dt).round().max(1.0) as u64;
    let dt = t / n_steps as f64;
    let cfg = IntegratorConfig { dt, ..cfg.clone() };
    let mut s = Stepper::new(env, x0, &cfg, path_idx);
    for _ in 0..n_steps {
        s.step();
        if !s.in_region() {
            return Err(Error::OutOfCoverage(s.x));
        }
    }
    Ok(s.x)
}

/// Mean first-exit time from a domain under the trivial or random
/// environment, in microscopic time units.
pub fn mean_exit_time(
    env: &EnvironmentField,
    domain: &DomainGeometry,
    x0: Point,
    n_paths: usize,
    cfg: &IntegratorConfig,
) -> Result<Estimate> {
    let results: Vec<Result<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|k| first_exit(env, domain, x0, cfg, k as u64).map(|r| r.time))
        .collect();
    let mut acc = Running::default();
    for r in results {
        acc.push(r?);
    }
    Ok(Estimate::from_running(&acc))
}

/// CSV serialization of per-path records for offline analysis.
pub fn records_csv(records: &[StoppingRecord]) -> String {
    let mut out = String::from("path_id,rule,time,x_exit_1,x_exit_2,x_exit_3,max_excursion\n");
    for (i, r) in records.iter().enumerate() {
        out.push_str(&format!(
            "{},{:?},{},{},{},{},{}\n",
            i, r.rule, r.time, r.position[0], r.position[1], r.position[2], r.max_excursion
        ));
    }
    out
}

/// Environment region large enough for exit experiments on `domain` plus a
/// wander margin.
pub fn region_for(domain: &DomainGeometry, margin: f64) -> crate::environment::Region {
    crate::environment::Region::cube(domain.bounding_half_width() + margin)
}
