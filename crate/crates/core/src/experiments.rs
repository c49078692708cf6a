//! The estimator suite: effective diffusivity, localization tails, the
//! parabolic comparison residual, exit-time tails, and the exit-law
//! convergence study with its rate fit.
//!
//! Every probability here carries a confidence interval and every pass/fail
//! decision uses the interval, never the point estimate. All drivers reduce
//! per-path results in path order, so a fixed (config, seed) pair produces
//! identical output bytes for any worker count.

use rayon::prelude::*;
use serde::Serialize;

use crate::brownian::{gauss_legendre, poisson_ball_value, walk_on_spheres};
use crate::config::{BoundaryFunction, ExperimentConfig};
use crate::environment::EnvironmentField;
use crate::error::Result;
use crate::geometry::{scale, DomainGeometry, Point, Shape};
use crate::simulate::{
    excursion_probe, free_run, joint_stopping, DiscreteStopSpec, IntegratorConfig, JointRecord,
    StopRule,
};
use crate::stats::{
    weighted_line_fit, wilson, Estimate, Running, WilsonInterval, Z_95, Z_975,
};

/// The level quantities the desk estimators consume: a length L, the
/// localization scales D and D~ built from it.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DeskLevel {
    pub l: f64,
    pub d_n: f64,
    pub d_tilde: f64,
}

impl From<&crate::scales::ScaleLevel> for DeskLevel {
    fn from(lv: &crate::scales::ScaleLevel) -> Self {
        DeskLevel {
            l: lv.l_f64(),
            d_n: lv.d_n(),
            d_tilde: lv.d_tilde(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// The raw localized second moment (1/2d) E |X_{L^2 ^ T}|^2.
    Paper,
    /// Divided by L^2, so standard Brownian motion reads 1/2 under the
    /// generator-alpha-Laplacian convention.
    ScaleFree,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiffusivityEstimate {
    pub alpha_hat: Estimate,
    pub normalization: Normalization,
    pub level_l: f64,
    pub truncation_fraction: f64,
    /// Set when more than 1% of paths hit the excursion threshold.
    pub flagged: bool,
}

/// Effective diffusivity at scale L: the second moment of the path at time
/// L^2, localized by the excursion stop X* >= D~.
pub fn effective_diffusivity(
    env: &EnvironmentField,
    level: &DeskLevel,
    x0: Point,
    n_paths: usize,
    normalization: Normalization,
    cfg: &IntegratorConfig,
) -> Result<DiffusivityEstimate> {
    let horizon = level.l * level.l;
    let results: Vec<Result<(f64, bool)>> = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            excursion_probe(env, x0, cfg, horizon, level.d_tilde, k as u64).map(|rec| {
                let dx = crate::geometry::sub(rec.position, x0);
                let r2 = dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2];
                (r2, rec.rule == StopRule::Excursion)
            })
        })
        .collect();
    let mut acc = Running::default();
    let mut truncated = 0u64;
    for r in results {
        let (r2, trunc) = r?;
        if trunc {
            truncated += 1;
        }
        acc.push(r2);
    }
    let d = 3.0;
    let scale_div = match normalization {
        Normalization::Paper => 1.0,
        Normalization::ScaleFree => horizon,
    };
    let factor = 1.0 / (2.0 * d * scale_div);
    let est = Estimate {
        mean: acc.mean() * factor,
        std_err: acc.std_err() * factor,
        n: acc.count(),
    };
    let tf = truncated as f64 / n_paths as f64;
    Ok(DiffusivityEstimate {
        alpha_hat: est,
        normalization,
        level_l: level.l,
        truncation_fraction: tf,
        flagged: tf > 0.01,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TailPoint {
    pub v: f64,
    pub bound: f64,
    pub interval: WilsonInterval,
    /// Wilson upper end sits below exp(-v / D_n).
    pub pass: bool,
}

/// Empirical localization tail P(X*_{L^2} >= v) against the exponential
/// bound exp(-v / D_n), for each threshold v >= D_n.
pub fn localization_tail(
    env: &EnvironmentField,
    level: &DeskLevel,
    x0: Point,
    v_values: &[f64],
    n_paths: usize,
    cfg: &IntegratorConfig,
) -> Result<Vec<TailPoint>> {
    let v_max = v_values.iter().cloned().fold(0.0, f64::max);
    assert!(
        v_values.iter().all(|v| *v >= level.d_n),
        "localization bound only applies for v >= D_n"
    );
    let horizon = level.l * level.l;
    let excursions: Vec<Result<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|k| excursion_probe(env, x0, cfg, horizon, v_max, k as u64).map(|r| r.max_excursion))
        .collect();
    let mut all = Vec::with_capacity(n_paths);
    for e in excursions {
        all.push(e?);
    }
    Ok(v_values
        .iter()
        .map(|&v| {
            let hits = all.iter().filter(|x| **x >= v).count() as u64;
            let interval = wilson(hits, n_paths as u64, Z_975);
            let bound = (-v / level.d_n).exp();
            TailPoint {
                v,
                bound,
                interval,
                pass: interval.hi <= bound,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct HolderResidualReport {
    /// Estimated rescaled Hoelder norm of the localized comparison residual.
    pub residual_norm: f64,
    pub residual_se: f64,
    /// L^{-delta} |f|_n.
    pub threshold: f64,
    pub pass: bool,
    /// Monte Carlo noise too large to decide (SE above half the threshold).
    pub inconclusive: bool,
    pub per_probe: Vec<ProbeResidual>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeResidual {
    pub offset: Point,
    pub s_value: f64,
    pub se: f64,
}

/// One-scale parabolic comparison: R f (Monte Carlo endpoint average at time
/// L^2 in the environment) against R-bar f (heat kernel average with the
/// measured diffusivity), measured in the rescaled Hoelder norm over probe
/// points near x. Probes stay within the inner plateau of the spatial
/// cutoff, where it equals one.
#[allow(clippy::too_many_arguments)]
pub fn holder_control_residual(
    env: &EnvironmentField,
    level: &DeskLevel,
    delta: f64,
    beta: f64,
    alpha_hat: f64,
    f: &BoundaryFunction,
    x: Point,
    probe_offsets: &[Point],
    n_paths: usize,
    cfg: &IntegratorConfig,
) -> Result<HolderResidualReport> {
    let horizon = level.l * level.l;
    let mut per_probe = Vec::with_capacity(probe_offsets.len());
    for (p_idx, off) in probe_offsets.iter().enumerate() {
        let y = crate::geometry::add(x, *off);
        // R f(y): endpoint Monte Carlo
        let ends: Vec<Result<Point>> = (0..n_paths)
            .into_par_iter()
            .map(|k| free_run(env, y, cfg, horizon, (p_idx * n_paths + k) as u64))
            .collect();
        let mut acc = Running::default();
        for e in ends {
            acc.push(f.eval(e?));
        }
        let mc = Estimate::from_running(&acc);
        // R-bar f(y): tensor Gauss-Legendre against the heat kernel with the
        // measured diffusivity, weights renormalized so constants survive
        // the domain truncation exactly
        let quad = gaussian_average(f, y, alpha_hat, horizon, 24);
        per_probe.push(ProbeResidual {
            offset: *off,
            s_value: mc.mean - quad,
            se: mc.std_err,
        });
    }
    // rescaled Hoelder norm over the probe set
    let mut sup_term = 0.0f64;
    let mut sup_se = 0.0f64;
    for p in &per_probe {
        if p.s_value.abs() > sup_term {
            sup_term = p.s_value.abs();
            sup_se = p.se;
        }
    }
    let mut semi = 0.0f64;
    let mut semi_se = 0.0f64;
    for i in 0..per_probe.len() {
        for j in (i + 1)..per_probe.len() {
            let dx = crate::geometry::dist(per_probe[i].offset, per_probe[j].offset);
            if dx < 1e-12 {
                continue;
            }
            let v = level.l.powf(beta) * (per_probe[i].s_value - per_probe[j].s_value).abs()
                / dx.powf(beta);
            if v > semi {
                semi = v;
                semi_se = level.l.powf(beta) * (per_probe[i].se + per_probe[j].se) / dx.powf(beta);
            }
        }
    }
    let residual_norm = sup_term + semi;
    let residual_se = sup_se + semi_se;
    let threshold = level.l.powf(-delta) * f.holder_norm(level.l, beta);
    let inconclusive = residual_se > 0.5 * threshold;
    Ok(HolderResidualReport {
        residual_norm,
        residual_se,
        threshold,
        pass: residual_norm <= threshold + Z_975 * residual_se,
        inconclusive,
        per_probe,
    })
}

/// Heat-kernel average of f at y by tensor quadrature; exact on constants
/// (both endpoint averaging and kernel integration preserve them, so the
/// comparison residual of constant data must vanish identically).
fn gaussian_average(f: &BoundaryFunction, y: Point, alpha: f64, t: f64, n_nodes: usize) -> f64 {
    if let BoundaryFunction::Constant { value } = f {
        return *value;
    }
    let sd = (2.0 * alpha * t).sqrt();
    let half = 8.0 * sd;
    let (nodes, weights) = gauss_legendre(n_nodes);
    // per-axis Gaussian weights on [-half, half]
    let axis: Vec<(f64, f64)> = nodes
        .iter()
        .zip(&weights)
        .map(|(u, w)| {
            let z = u * half;
            let g = (-z * z / (2.0 * sd * sd)).exp();
            (z, w * g)
        })
        .collect();
    let norm: f64 = axis.iter().map(|(_, w)| w).sum();
    let mut total = 0.0;
    for (zx, wx) in &axis {
        for (zy, wy) in &axis {
            for (zz, wz) in &axis {
                total += wx * wy * wz * f.eval([y[0] + zx, y[1] + zy, y[2] + zz]);
            }
        }
    }
    total / (norm * norm * norm)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExitTimeTailReport {
    pub horizon: f64,
    pub per_probe: Vec<WilsonInterval>,
    /// Largest upper interval end over the probes.
    pub sup_tail_upper: f64,
}

/// Sup-over-probes tail of the exit time: P(tau > horizon) per probe with
/// Wilson intervals, for paths started at probe/eps in U/eps.
pub fn exit_time_tail(
    env: &EnvironmentField,
    domain: &DomainGeometry,
    epsilon: f64,
    horizon: f64,
    probes: &[Point],
    n_paths: usize,
    cfg: &IntegratorConfig,
) -> Result<ExitTimeTailReport> {
    let rescaled = domain.rescale(epsilon);
    let capped_cfg = IntegratorConfig {
        max_time: horizon,
        ..cfg.clone()
    };
    let mut per_probe = Vec::with_capacity(probes.len());
    for (p_idx, probe) in probes.iter().enumerate() {
        let start = scale(*probe, 1.0 / epsilon);
        let survived: Vec<Result<bool>> = (0..n_paths)
            .into_par_iter()
            .map(|k| {
                crate::simulate::first_exit(
                    env,
                    &rescaled,
                    start,
                    &capped_cfg,
                    (p_idx * n_paths + k) as u64,
                )
                .map(|r| r.rule == StopRule::TimeCap)
            })
            .collect();
        let mut hits = 0u64;
        for s in survived {
            if s? {
                hits += 1;
            }
        }
        per_probe.push(wilson(hits, n_paths as u64, Z_975));
    }
    let sup = per_probe.iter().map(|w| w.hi).fold(0.0, f64::max);
    Ok(ExitTimeTailReport {
        horizon,
        per_probe,
        sup_tail_upper: sup,
    })
}

/// Desk analog of the lattice stopping bundle for a run at scale 1/eps:
/// lattice step (sqrt(1/eps))^2 in time, threshold twice that length, and
/// the comparison time (0.7/eps)^2 standing in for the squared previous
/// level length.
pub fn desk_stop_bundle(inv_eps: f64) -> (DiscreteStopSpec, f64) {
    let l_s = (inv_eps.sqrt()).round().max(2.0);
    (
        DiscreteStopSpec {
            step_length: l_s * l_s,
            threshold: 2.0 * l_s,
        },
        (0.7 * inv_eps).powi(2),
    )
}

/// Environment half-width required by a convergence run: the rescaled
/// domain, the lattice-stop shell, and wander room for the interval between
/// lattice checks after the path has left the domain.
pub fn rate_region_half_width(domain_half_width: f64, epsilons: &[f64]) -> f64 {
    let mut hw = 0.0f64;
    for &eps in epsilons {
        let inv = 1.0 / eps;
        let (spec, _) = desk_stop_bundle(inv);
        // three lattice-interval standard deviations of post-exit wander;
        // rarer excursions truncate the stopping bookkeeping, not the run
        let slack = 3.0 * 3f64.sqrt() * spec.step_length.sqrt();
        hw = hw.max(inv * domain_half_width + spec.threshold + slack + 12.0);
    }
    hw
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeValue {
    pub probe: Point,
    pub u_eps: Estimate,
    pub u_bar: f64,
    pub u_bar_se: f64,
    pub censored_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StoppingSummary {
    /// P(tau - tau1 >= T) with T the squared desk analog of the previous
    /// level length.
    pub gap_probability: WilsonInterval,
    pub gap_time: f64,
    pub lattice_step: f64,
    pub threshold: f64,
    /// Paths on which the orderings tau1 <= tau2 and tau <= tau~ were
    /// checked exactly (every simulated path).
    pub orderings_checked: u64,
    pub censored: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpsilonReport {
    pub epsilon: f64,
    pub bracket_level: Option<usize>,
    pub probe_values: Vec<ProbeValue>,
    /// Max over probes of |u_eps - u_bar|.
    pub error: f64,
    /// Combined standard error at the argmax probe.
    pub combined_se: f64,
    pub inconclusive: bool,
    pub stopping: StoppingSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct RateFit {
    /// (log 1/eps, log error) points with the SE of the log-error.
    pub points: Vec<[f64; 3]>,
    pub slope: f64,
    pub slope_se: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
    pub slope_positive_95: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub oracle: String,
    pub per_epsilon: Vec<EpsilonReport>,
    /// e(eps) nonincreasing as eps shrinks, up to 3 combined SEs.
    pub consistent_with_convergence: bool,
    pub rate_fit: Option<RateFit>,
    pub warnings: Vec<String>,
}

/// The full exit-law convergence study: for each epsilon, smoothed exit-law
/// estimates at the probes (with the lattice stopping bookkeeping riding on
/// the same trajectories), the harmonic-measure oracle, the sup error with
/// its interval, and the log-log rate fit.
pub fn convergence_and_rate(
    config: &ExperimentConfig,
    env: &EnvironmentField,
    cfg: &IntegratorConfig,
) -> Result<ConvergenceReport> {
    let domain = config.domain.build()?;
    let probes = config.probe_set()?;
    let brackets = config.bracket_levels()?;
    let f = &config.boundary_function;

    // harmonic oracle: Poisson closed form on balls, walk-on-spheres else
    let shell = 1e-4 * 2.0 * domain.bounding_half_width();
    let mut u_bar = Vec::with_capacity(probes.len());
    let oracle_name;
    match domain.shape {
        Shape::Ball { radius } => {
            oracle_name = "poisson_ball".to_string();
            for p in &probes {
                let v = if let BoundaryFunction::Constant { value } = f {
                    *value
                } else if crate::geometry::norm(*p) >= radius * (1.0 - 1e-12) {
                    f.eval(*p)
                } else {
                    poisson_ball_value(radius, |q| f.eval(q), *p, 64)
                };
                u_bar.push((v, 0.0));
            }
        }
        _ => {
            oracle_name = "walk_on_spheres".to_string();
            for (i, p) in probes.iter().enumerate() {
                if !domain.contains(*p) {
                    u_bar.push((f.eval(domain.project_to_boundary(*p)), 0.0));
                    continue;
                }
                let est = walk_on_spheres(
                    &domain,
                    |q| f.eval(q),
                    *p,
                    shell,
                    200_000,
                    cfg.seed.wrapping_add(i as u64),
                )?;
                u_bar.push((est.mean, est.std_err));
            }
        }
    }

    let mut per_epsilon = Vec::with_capacity(config.epsilons.len());
    let mut warnings = Vec::new();
    for (e_idx, &eps) in config.epsilons.iter().enumerate() {
        let inv = 1.0 / eps;
        let (stop_spec, gap_time) = desk_stop_bundle(inv);
        let rescaled = domain.rescale(eps);
        let run_cfg = IntegratorConfig {
            max_time: 40.0 * inv * inv,
            ..cfg.clone()
        };
        let mut probe_values = Vec::with_capacity(probes.len());
        let mut gap_hits = 0u64;
        let mut gap_total = 0u64;
        let mut censored_total = 0u64;
        let mut orderings = 0u64;
        for (p_idx, probe) in probes.iter().enumerate() {
            let start = scale(*probe, inv);
            let recs: Vec<Result<JointRecord>> = (0..config.n_paths)
                .into_par_iter()
                .map(|k| {
                    joint_stopping(
                        env,
                        &rescaled,
                        start,
                        &run_cfg,
                        stop_spec,
                        ((e_idx * probes.len() + p_idx) * config.n_paths + k) as u64,
                    )
                })
                .collect();
            let mut acc = Running::default();
            let mut censored = 0u64;
            for r in recs {
                let rec = r?;
                orderings += 1;
                match (rec.exit_position, rec.capped) {
                    (Some(pos), _) => acc.push(f.eval(scale(pos, eps))),
                    (None, true) => censored += 1,
                    (None, false) => unreachable!("no exit and no cap"),
                }
                if let (Some(te), Some(t1)) = (rec.tau_eps, rec.tau1) {
                    gap_total += 1;
                    if te - t1 >= gap_time {
                        gap_hits += 1;
                    }
                }
            }
            censored_total += censored;
            let cf = censored as f64 / config.n_paths as f64;
            probe_values.push(ProbeValue {
                probe: *probe,
                u_eps: Estimate::from_running(&acc),
                u_bar: u_bar[p_idx].0,
                u_bar_se: u_bar[p_idx].1,
                censored_fraction: cf,
            });
        }
        let mut err = 0.0f64;
        let mut comb_se = 0.0f64;
        for pv in &probe_values {
            let d = (pv.u_eps.mean - pv.u_bar).abs();
            if d > err {
                err = d;
                comb_se = (pv.u_eps.std_err.powi(2) + pv.u_bar_se.powi(2)).sqrt();
            }
        }
        let inconclusive = comb_se > 0.5 * err;
        if inconclusive {
            warnings.push(format!(
                "epsilon {eps}: combined SE {comb_se:.2e} exceeds half the error {err:.2e}; point excluded from the rate fit"
            ));
        }
        per_epsilon.push(EpsilonReport {
            epsilon: eps,
            bracket_level: brackets[e_idx],
            probe_values,
            error: err,
            combined_se: comb_se,
            inconclusive,
            stopping: StoppingSummary {
                gap_probability: wilson(gap_hits, gap_total.max(1), Z_975),
                gap_time,
                lattice_step: stop_spec.step_length,
                threshold: stop_spec.threshold,
                orderings_checked: orderings,
                censored: censored_total,
            },
        });
    }

    // monotone decrease check across shrinking epsilon
    let mut sorted: Vec<&EpsilonReport> = per_epsilon.iter().collect();
    sorted.sort_by(|a, b| b.epsilon.partial_cmp(&a.epsilon).unwrap());
    let mut consistent = true;
    for w in sorted.windows(2) {
        let tol = 3.0 * (w[0].combined_se.powi(2) + w[1].combined_se.powi(2)).sqrt();
        if w[1].error > w[0].error + tol {
            consistent = false;
        }
    }

    // weighted log-log fit over conclusive points
    let fit_pts: Vec<&EpsilonReport> = sorted
        .iter()
        .filter(|r| !r.inconclusive && r.error > 0.0)
        .cloned()
        .collect();
    let rate_fit = if fit_pts.len() >= 3 {
        let xs: Vec<f64> = fit_pts.iter().map(|r| (1.0 / r.epsilon).ln()).collect();
        let ys: Vec<f64> = fit_pts.iter().map(|r| r.error.ln()).collect();
        let sig: Vec<f64> = fit_pts
            .iter()
            .map(|r| (r.combined_se / r.error).max(1e-6))
            .collect();
        // a decreasing e(eps) means log error falls as log(1/eps) grows;
        // report the decay rate as a positive slope
        let lf = weighted_line_fit(&xs, &ys, &sig);
        let slope = -lf.slope;
        Some(RateFit {
            points: xs
                .iter()
                .zip(ys.iter().zip(&sig))
                .map(|(x, (y, s))| [*x, *y, *s])
                .collect(),
            slope,
            slope_se: lf.slope_se,
            intercept: lf.intercept,
            residuals: lf.residuals,
            slope_positive_95: slope - Z_95 * lf.slope_se > 0.0,
        })
    } else {
        warnings.push(format!(
            "rate fit needs at least 3 conclusive points, have {}",
            fit_pts.len()
        ));
        None
    };

    Ok(ConvergenceReport {
        oracle: oracle_name,
        per_epsilon,
        consistent_with_convergence: consistent,
        rate_fit,
        warnings,
    })
}
