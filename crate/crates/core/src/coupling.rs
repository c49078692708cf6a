//! Desk-scale realization of the transition-kernel coupling: gridded
//! kernels, optimal transport under the rescaled Hoelder cost
//! d(x, y) = (|x - y|/L)^beta, and the coupled Markov chain whose first
//! coordinate moves by the environment kernel and whose second moves by a
//! heat-kernel increment translated to its own position.
//!
//! The exact transport solver is a successive-shortest-path min-cost flow
//! on the support pairs; it refuses instances whose dense cost matrix would
//! be large, in which case callers coarsen the grid or use the entropic
//! (log-domain Sinkhorn) solver, which reports its regularization and
//! duality gap.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::environment::EnvironmentField;
use crate::error::{Error, Result};
use crate::geometry::{dist, Point};
use crate::rng::{stream2, StreamKind};
use crate::simulate::{free_run, IntegratorConfig};
use crate::stats::{wilson, Estimate, Running, WilsonInterval, Z_975};

/// The rescaled Hoelder metric d(x, y) = (|x - y| / scale)^beta. A metric
/// whenever beta <= 1.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HolderMetricSpec {
    pub scale: f64,
    pub beta: f64,
}

impl HolderMetricSpec {
    pub fn new(scale: f64, beta: f64) -> Self {
        assert!(scale > 0.0 && beta > 0.0 && beta <= 1.0);
        HolderMetricSpec { scale, beta }
    }

    pub fn dist(&self, x: Point, y: Point) -> f64 {
        (dist(x, y) / self.scale).powf(self.beta)
    }
}

/// Cell geometry of a kernel grid: cubical cells of side `spacing`, cell
/// (i, j, k) covering origin + spacing * [i, i+1) x ...
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub origin: Point,
    pub spacing: f64,
    pub extents: [usize; 3],
}

impl GridSpec {
    /// Grid of cells centered on `center` covering `half_width` per axis.
    pub fn centered(center: Point, half_width: f64, spacing: f64) -> Self {
        let n = (2.0 * half_width / spacing).ceil() as usize + 1;
        let origin = [
            center[0] - 0.5 * n as f64 * spacing,
            center[1] - 0.5 * n as f64 * spacing,
            center[2] - 0.5 * n as f64 * spacing,
        ];
        GridSpec {
            origin,
            spacing,
            extents: [n, n, n],
        }
    }

    pub fn n_cells(&self) -> usize {
        self.extents[0] * self.extents[1] * self.extents[2]
    }

    pub fn cell_of(&self, p: Point) -> Option<usize> {
        let mut idx = [0usize; 3];
        for i in 0..3 {
            let u = (p[i] - self.origin[i]) / self.spacing;
            if u < 0.0 || u >= self.extents[i] as f64 {
                return None;
            }
            idx[i] = u as usize;
        }
        Some((idx[2] * self.extents[1] + idx[1]) * self.extents[0] + idx[0])
    }

    pub fn center(&self, cell: usize) -> Point {
        let nx = self.extents[0];
        let ny = self.extents[1];
        let x = cell % nx;
        let y = (cell / nx) % ny;
        let z = cell / (nx * ny);
        [
            self.origin[0] + (x as f64 + 0.5) * self.spacing,
            self.origin[1] + (y as f64 + 0.5) * self.spacing,
            self.origin[2] + (z as f64 + 0.5) * self.spacing,
        ]
    }

    pub fn half_width(&self, axis: usize) -> f64 {
        0.5 * self.extents[axis] as f64 * self.spacing
    }
}

/// A transition kernel discretized on a grid: per-cell probabilities plus
/// the mass that fell outside the grid.
#[derive(Debug, Clone, Serialize)]
pub struct KernelGrid {
    pub spec: GridSpec,
    pub mass: Vec<f64>,
    pub leak: f64,
    /// Sample count when the kernel is empirical.
    pub n_samples: Option<u64>,
}

pub const LEAK_CAP: f64 = 1e-3;

impl KernelGrid {
    pub fn from_masses(spec: GridSpec, mass: Vec<f64>) -> Self {
        assert_eq!(mass.len(), spec.n_cells());
        let total: f64 = mass.iter().sum();
        KernelGrid {
            spec,
            mass,
            leak: (1.0 - total).max(0.0),
            n_samples: None,
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Standard error of one cell's mass estimate (binomial).
    pub fn cell_se(&self, cell: usize) -> f64 {
        match self.n_samples {
            Some(n) => {
                let p = self.mass[cell];
                (p * (1.0 - p) / n as f64).sqrt()
            }
            None => 0.0,
        }
    }

    pub fn matches(&self, other: &KernelGrid) -> bool {
        self.spec == other.spec
    }

    /// Support cells above the cutoff, with masses renormalized to sum to
    /// one (the leak and cutoff remainder are reported by the caller).
    fn support(&self, cutoff: f64) -> (Vec<usize>, Vec<f64>) {
        let cells: Vec<usize> = (0..self.mass.len())
            .filter(|&i| self.mass[i] > cutoff)
            .collect();
        let total: f64 = cells.iter().map(|&i| self.mass[i]).sum();
        let w = cells.iter().map(|&i| self.mass[i] / total).collect();
        (cells, w)
    }
}

/// Endpoint histogram of `n_paths` unstopped paths of duration `t` started
/// at `x`. Errors when the grid does not allow for 6 sqrt(2 nu t) of
/// wander per axis or when more than `LEAK_CAP` of the mass escapes it.
pub fn empirical_kernel(
    env: &EnvironmentField,
    x: Point,
    t: f64,
    n_paths: usize,
    spec: GridSpec,
    cfg: &IntegratorConfig,
    stream_salt: u64,
) -> Result<KernelGrid> {
    assert!(t > 0.0);
    let nu = 1.0 / (1.0 - env.eta0());
    let required = 6.0 * (2.0 * nu * t).sqrt();
    for axis in 0..3 {
        let lo = x[axis] - spec.origin[axis];
        let hi = spec.origin[axis] + spec.extents[axis] as f64 * spec.spacing - x[axis];
        if lo < required || hi < required {
            return Err(Error::GridTooSmall {
                leak: f64::NAN,
                cap: LEAK_CAP,
            });
        }
    }
    let endpoints: Vec<Result<Point>> = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            let cfg = IntegratorConfig {
                seed: cfg.seed ^ stream_salt.rotate_left(23),
                ..cfg.clone()
            };
            free_run(env, x, &cfg, t, k as u64)
        })
        .collect();
    let mut mass = vec![0f64; spec.n_cells()];
    let mut leaked = 0u64;
    for e in endpoints {
        match spec.cell_of(e?) {
            Some(c) => mass[c] += 1.0,
            None => leaked += 1,
        }
    }
    let inv = 1.0 / n_paths as f64;
    for m in &mut mass {
        *m *= inv;
    }
    let leak = leaked as f64 * inv;
    if leak >= LEAK_CAP {
        return Err(Error::GridTooSmall {
            leak,
            cap: LEAK_CAP,
        });
    }
    Ok(KernelGrid {
        spec,
        mass,
        leak,
        n_samples: Some(n_paths as u64),
    })
}

/// Exact cell masses of the heat kernel started at `x`: products of
/// one-dimensional normal CDF differences; the leak is exact as well.
pub fn gaussian_kernel(alpha: f64, t: f64, x: Point, spec: GridSpec) -> KernelGrid {
    assert!(alpha > 0.0 && t > 0.0);
    let sd = (2.0 * alpha * t).sqrt();
    let mut axis_mass: [Vec<f64>; 3] = [vec![], vec![], vec![]];
    for a in 0..3 {
        let n = spec.extents[a];
        let mut cdf = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let edge = spec.origin[a] + i as f64 * spec.spacing;
            cdf.push(crate::stats::norm_cdf((edge - x[a]) / sd));
        }
        axis_mass[a] = (0..n).map(|i| cdf[i + 1] - cdf[i]).collect();
    }
    let (nx, ny, nz) = (spec.extents[0], spec.extents[1], spec.extents[2]);
    let mut mass = vec![0f64; spec.n_cells()];
    for z in 0..nz {
        for y in 0..ny {
            let myz = axis_mass[1][y] * axis_mass[2][z];
            for xx in 0..nx {
                mass[(z * ny + y) * nx + xx] = axis_mass[0][xx] * myz;
            }
        }
    }
    let covered: f64 = (0..3).map(|a| axis_mass[a].iter().sum::<f64>()).product();
    KernelGrid {
        spec,
        mass,
        leak: 1.0 - covered,
        n_samples: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TransportMethod {
    Exact,
    Entropic,
}

/// A coupling of two gridded kernels with marginal certificates.
#[derive(Debug, Clone, Serialize)]
pub struct TransportPlan {
    /// (source cell, target cell, mass), masses positive.
    pub support: Vec<(usize, usize, f64)>,
    /// Transport cost of the plan under the metric it was built with; for
    /// the exact method this is the Kantorovich-Rubinstein distance of the
    /// gridded (leak-renormalized) laws.
    pub cost_value: f64,
    /// Sup-norm residuals of the two marginals against their targets.
    pub marginal_residuals: [f64; 2],
    pub method: TransportMethod,
    /// Entropic regularization, when applicable.
    pub regularization: Option<f64>,
    /// Entropic primal-dual gap, when applicable.
    pub duality_gap: Option<f64>,
    /// Leak mass renormalized away from each side before coupling.
    pub renormalized_leaks: [f64; 2],
}

impl TransportPlan {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,mass\n");
        for (i, j, m) in &self.support {
            out.push_str(&format!("{i},{j},{m}\n"));
        }
        out
    }
}

/// Dense support size above which the exact solver refuses.
pub const EXACT_SUPPORT_LIMIT: usize = 40_000;

pub fn optimal_coupling(
    nu: &KernelGrid,
    nu_prime: &KernelGrid,
    metric: HolderMetricSpec,
    method: TransportMethod,
) -> Result<TransportPlan> {
    if !nu.matches(nu_prime) {
        return Err(Error::GridMismatch);
    }
    // The entropic path trims far-tail cells (or the dense kernel matrix
    // would dwarf the signal); the trimmed mass joins the reported leak.
    let cutoff = match method {
        TransportMethod::Exact => 1e-12,
        TransportMethod::Entropic => 1e-6,
    };
    let (src_cells, a) = nu.support(cutoff);
    let (dst_cells, b) = nu_prime.support(cutoff);
    let cost = |i: usize, j: usize| -> f64 {
        metric.dist(nu.spec.center(src_cells[i]), nu.spec.center(dst_cells[j]))
    };
    match method {
        TransportMethod::Exact => {
            if src_cells.len() * dst_cells.len() > EXACT_SUPPORT_LIMIT {
                return Err(Error::SupportTooLarge(
                    src_cells.len() * dst_cells.len(),
                    EXACT_SUPPORT_LIMIT,
                ));
            }
            let (flows, cost_value) = min_cost_flow(&a, &b, &cost);
            let mut row = vec![0f64; a.len()];
            let mut col = vec![0f64; b.len()];
            let mut support = Vec::with_capacity(flows.len());
            for &(i, j, m) in &flows {
                row[i] += m;
                col[j] += m;
                support.push((src_cells[i], dst_cells[j], m));
            }
            let r0 = a
                .iter()
                .zip(&row)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let r1 = b
                .iter()
                .zip(&col)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            Ok(TransportPlan {
                support,
                cost_value,
                marginal_residuals: [r0, r1],
                method,
                regularization: None,
                duality_gap: None,
                renormalized_leaks: [nu.leak, nu_prime.leak],
            })
        }
        TransportMethod::Entropic => {
            let scale = median_cost_sample(&a, &b, &cost);
            let reg = 0.05 * scale.max(1e-12);
            let plan = sinkhorn(&a, &b, &cost, reg, 400, 1e-9);
            let mut support = Vec::new();
            let mut cost_value = 0.0;
            let mut row = vec![0f64; a.len()];
            let mut col = vec![0f64; b.len()];
            for i in 0..a.len() {
                for j in 0..b.len() {
                    let m = plan.p(i, j);
                    if m > 1e-15 {
                        support.push((src_cells[i], dst_cells[j], m));
                        cost_value += m * cost(i, j);
                        row[i] += m;
                        col[j] += m;
                    }
                }
            }
            let r0 = a
                .iter()
                .zip(&row)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let r1 = b
                .iter()
                .zip(&col)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            Ok(TransportPlan {
                support,
                cost_value,
                marginal_residuals: [r0, r1],
                method,
                regularization: Some(reg),
                duality_gap: Some(plan.duality_gap),
                renormalized_leaks: [nu.leak, nu_prime.leak],
            })
        }
    }
}

fn median_cost_sample(a: &[f64], b: &[f64], cost: &dyn Fn(usize, usize) -> f64) -> f64 {
    let mut vals = Vec::new();
    let stride_a = (a.len() / 64).max(1);
    let stride_b = (b.len() / 64).max(1);
    let mut i = 0;
    while i < a.len() {
        let mut j = 0;
        while j < b.len() {
            vals.push(cost(i, j));
            j += stride_b;
        }
        i += stride_a;
    }
    vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
    vals[vals.len() / 2]
}

/// Successive-shortest-path min-cost flow for the dense transportation
/// problem; exact up to floating point. Reduced costs stay nonnegative via
/// Johnson potentials, so Dijkstra applies.
fn min_cost_flow(
    a: &[f64],
    b: &[f64],
    cost: &dyn Fn(usize, usize) -> f64,
) -> (Vec<(usize, usize, f64)>, f64) {
    let (na, nb) = (a.len(), b.len());
    let mut c = vec![0f64; na * nb];
    for i in 0..na {
        for j in 0..nb {
            c[i * nb + j] = cost(i, j);
        }
    }
    let mut flow: HashMap<(usize, usize), f64> = HashMap::new();
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut pot_s = vec![0f64; na];
    let mut pot_t = vec![0f64; nb];
    const EPS: f64 = 1e-15;
    loop {
        let total_left: f64 = supply.iter().sum();
        if total_left <= EPS {
            break;
        }
        // Dijkstra over sources (0..na) and sinks (na..na+nb)
        let n_nodes = na + nb;
        let mut dist = vec![f64::INFINITY; n_nodes];
        let mut prev = vec![usize::MAX; n_nodes];
        let mut done = vec![false; n_nodes];
        let mut heap = std::collections::BinaryHeap::new();
        for i in 0..na {
            if supply[i] > EPS {
                dist[i] = 0.0;
                heap.push(HeapItem { d: 0.0, node: i });
            }
        }
        let mut target = usize::MAX;
        while let Some(HeapItem { d, node }) = heap.pop() {
            if done[node] || d > dist[node] {
                continue;
            }
            done[node] = true;
            if node >= na && demand[node - na] > EPS {
                target = node;
                break;
            }
            if node < na {
                let i = node;
                for j in 0..nb {
                    let rc = c[i * nb + j] + pot_s[i] - pot_t[j];
                    let nd = d + rc.max(0.0);
                    if nd < dist[na + j] - 1e-18 {
                        dist[na + j] = nd;
                        prev[na + j] = i;
                        heap.push(HeapItem { d: nd, node: na + j });
                    }
                }
            } else {
                let j = node - na;
                for (&(i, jj), &f) in flow.iter() {
                    if jj == j && f > EPS {
                        let rc = -c[i * nb + j] - pot_s[i] + pot_t[j];
                        let nd = d + rc.max(0.0);
                        if nd < dist[i] - 1e-18 {
                            dist[i] = nd;
                            prev[i] = na + j;
                            heap.push(HeapItem { d: nd, node: i });
                        }
                    }
                }
            }
        }
        assert!(target != usize::MAX, "transportation network disconnected");
        // potential update for all permanently labeled nodes
        let dt = dist[target];
        for i in 0..na {
            if dist[i].is_finite() {
                pot_s[i] += dist[i].min(dt);
            } else {
                pot_s[i] += dt;
            }
        }
        for j in 0..nb {
            if dist[na + j].is_finite() {
                pot_t[j] += dist[na + j].min(dt);
            } else {
                pot_t[j] += dt;
            }
        }
        // bottleneck along the path
        let mut delta = demand[target - na];
        let mut node = target;
        while prev[node] != usize::MAX {
            let p = prev[node];
            if node < na {
                // backward arc p(=sink) -> node(=source): limited by flow
                let f = flow[&(node, p - na)];
                delta = delta.min(f);
            }
            node = p;
        }
        delta = delta.min(supply[node]);
        debug_assert!(delta > 0.0);
        // apply augmentation
        let mut cur = target;
        while prev[cur] != usize::MAX {
            let p = prev[cur];
            if cur >= na {
                // forward arc p -> cur
                *flow.entry((p, cur - na)).or_insert(0.0) += delta;
            } else {
                // backward arc: reduce flow (cur, p - na)
                let f = flow.get_mut(&(cur, p - na)).unwrap();
                *f -= delta;
                if *f <= EPS {
                    flow.remove(&(cur, p - na));
                }
            }
            cur = p;
        }
        supply[cur] -= delta;
        demand[target - na] -= delta;
    }
    let mut out = Vec::with_capacity(flow.len());
    let mut total = 0.0;
    for ((i, j), f) in flow {
        if f > EPS {
            total += f * c[i * nb + j];
            out.push((i, j, f));
        }
    }
    (out, total)
}

#[derive(PartialEq)]
struct HeapItem {
    d: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .d
            .partial_cmp(&self.d)
            .unwrap()
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

struct SinkhornPlan {
    f: Vec<f64>,
    g: Vec<f64>,
    cost: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    reg: f64,
    duality_gap: f64,
}

impl SinkhornPlan {
    fn p(&self, i: usize, j: usize) -> f64 {
        self.a[i]
            * self.b[j]
            * ((self.f[i] + self.g[j] - self.cost[i * self.b.len() + j]) / self.reg).exp()
    }
}

/// Log-domain Sinkhorn iterations on the dense cost matrix.
fn sinkhorn(
    a: &[f64],
    b: &[f64],
    cost: &dyn Fn(usize, usize) -> f64,
    reg: f64,
    max_iter: usize,
    tol: f64,
) -> SinkhornPlan {
    let (na, nb) = (a.len(), b.len());
    let mut c = vec![0f64; na * nb];
    for i in 0..na {
        for j in 0..nb {
            c[i * nb + j] = cost(i, j);
        }
    }
    let log_a: Vec<f64> = a.iter().map(|x| x.max(1e-300).ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.max(1e-300).ln()).collect();
    let mut f = vec![0f64; na];
    let mut g = vec![0f64; nb];
    // two-pass log-sum-exp per row/column, no temporaries
    for _ in 0..max_iter {
        for i in 0..na {
            let row = &c[i * nb..(i + 1) * nb];
            let mut m = f64::NEG_INFINITY;
            for j in 0..nb {
                let v = (g[j] - row[j]) / reg + log_b[j];
                if v > m {
                    m = v;
                }
            }
            let mut s = 0.0;
            for j in 0..nb {
                s += (((g[j] - row[j]) / reg + log_b[j]) - m).exp();
            }
            f[i] = -reg * (m + s.ln());
        }
        let mut worst = 0.0f64;
        for j in 0..nb {
            let mut m = f64::NEG_INFINITY;
            for i in 0..na {
                let v = (f[i] - c[i * nb + j]) / reg + log_a[i];
                if v > m {
                    m = v;
                }
            }
            let mut s = 0.0;
            for i in 0..na {
                s += (((f[i] - c[i * nb + j]) / reg + log_a[i]) - m).exp();
            }
            let new_g = -reg * (m + s.ln());
            worst = worst.max((new_g - g[j]).abs());
            g[j] = new_g;
        }
        if worst < tol {
            break;
        }
    }
    // primal-dual gap of the entropic problem
    let mut primal = 0.0;
    let mut dual_pen = 0.0;
    for i in 0..na {
        for j in 0..nb {
            let e = ((f[i] + g[j] - c[i * nb + j]) / reg).exp();
            let p = a[i] * b[j] * e;
            if p > 0.0 {
                primal += p * c[i * nb + j] + reg * p * e.ln();
            }
            dual_pen += a[i] * b[j] * (e - 1.0);
        }
    }
    let dual: f64 = f.iter().zip(a).map(|(x, y)| x * y).sum::<f64>()
        + g.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
        - reg * dual_pen;
    SinkhornPlan {
        f,
        g,
        cost: c,
        a: a.to_vec(),
        b: b.to_vec(),
        reg,
        duality_gap: (primal - dual).abs(),
    }
}

/// Parameters of the coupled chain at desk scale.
#[derive(Debug, Clone, Serialize)]
pub struct ChainSpec {
    pub metric: HolderMetricSpec,
    /// Kernel horizon per step (the desk analog of a squared level length).
    pub t_step: f64,
    /// Diffusivity of the comparison heat kernel (a measured alpha-hat, not
    /// the unknown limit).
    pub alpha_hat: f64,
    /// Grid spacing as a multiple of sqrt(2 alpha t).
    pub spacing_factor: f64,
    /// Per-step Monte Carlo budget for empirical kernels.
    pub kernel_budget: usize,
    /// Desk analog of the step cap 2 (L_{n+2} / L_{n-m})^2.
    pub step_budget: usize,
}

impl ChainSpec {
    pub fn grid_for(&self, center: Point, eta0: f64) -> GridSpec {
        let nu = 1.0 / (1.0 - eta0);
        let half = 6.5 * (2.0 * nu * self.t_step).sqrt();
        let spacing = self.spacing_factor * (2.0 * self.alpha_hat * self.t_step).sqrt();
        GridSpec::centered(center, half, spacing)
    }
}

/// One coupled trajectory: both coordinates, per-step transport costs, and
/// cache telemetry.
#[derive(Debug, Clone, Serialize)]
pub struct CoupledTrajectory {
    pub states: Vec<(Point, Point)>,
    pub step_costs: Vec<f64>,
    pub cache_hits: usize,
    pub max_quantization_error: f64,
}

/// Runs the coupled Markov chain (X_k, X_bar_k) from (x0, x0): at each step
/// the transport plan between the empirical kernel at X_k and the heat
/// kernel at X_k is sampled for a pair jump, and the second coordinate is
/// translated so its increment is a heat-kernel step from its own position.
///
/// Kernels are cached per quantized state (radius = one grid spacing);
/// chains run sequentially so the cache hit pattern is deterministic, while
/// kernel estimation parallelizes over paths.
pub fn run_coupled_chain(
    env: &EnvironmentField,
    x0: Point,
    spec: &ChainSpec,
    n_steps: usize,
    n_chains: usize,
    cfg: &IntegratorConfig,
) -> Result<Vec<CoupledTrajectory>> {
    assert!(
        n_steps <= spec.step_budget,
        "n_steps {} above the step budget {}",
        n_steps,
        spec.step_budget
    );
    let mut cache: HashMap<[i64; 3], Arc<(KernelGrid, KernelGrid, TransportPlan)>> = HashMap::new();
    let spacing = spec.spacing_factor * (2.0 * spec.alpha_hat * spec.t_step).sqrt();
    let quantize = |p: Point| -> [i64; 3] {
        [
            (p[0] / spacing).round() as i64,
            (p[1] / spacing).round() as i64,
            (p[2] / spacing).round() as i64,
        ]
    };
    let mut out = Vec::with_capacity(n_chains);
    for chain in 0..n_chains {
        let mut rng = stream2(cfg.seed, StreamKind::Probe, chain as u64, 0xc09e);
        let mut x = x0;
        let mut x_bar = x0;
        let mut states = vec![(x, x_bar)];
        let mut step_costs = Vec::with_capacity(n_steps);
        let mut cache_hits = 0usize;
        let mut max_q = 0f64;
        for step in 0..n_steps {
            let key = quantize(x);
            let entry = if let Some(e) = cache.get(&key) {
                cache_hits += 1;
                let anchor = [
                    key[0] as f64 * spacing,
                    key[1] as f64 * spacing,
                    key[2] as f64 * spacing,
                ];
                max_q = max_q.max(dist(x, anchor));
                e.clone()
            } else {
                let anchor = [
                    key[0] as f64 * spacing,
                    key[1] as f64 * spacing,
                    key[2] as f64 * spacing,
                ];
                let grid = spec.grid_for(anchor, env.eta0());
                let salt = crate::rng::pack_coords([
                    key[0] as i32,
                    key[1] as i32,
                    key[2] as i32,
                ]);
                let emp = empirical_kernel(
                    env,
                    anchor,
                    spec.t_step,
                    spec.kernel_budget,
                    grid,
                    cfg,
                    salt,
                )?;
                let gauss = gaussian_kernel(spec.alpha_hat, spec.t_step, anchor, grid);
                let plan = optimal_coupling(&emp, &gauss, spec.metric, TransportMethod::Entropic)
                    .map_err(|e| Error::ChainStep {
                        step,
                        reason: e.to_string(),
                    })?;
                let arc = Arc::new((emp, gauss, plan));
                cache.insert(key, arc.clone());
                arc
            };
            let plan = &entry.2;
            if plan.support.is_empty() {
                return Err(Error::ChainStep {
                    step,
                    reason: "empty transport plan".into(),
                });
            }
            // sample a pair jump from the plan
            let total: f64 = plan.support.iter().map(|(_, _, m)| m).sum();
            let mut u = rng.gen::<f64>() * total;
            let mut pick = plan.support.len() - 1;
            for (idx, (_, _, m)) in plan.support.iter().enumerate() {
                u -= m;
                if u <= 0.0 {
                    pick = idx;
                    break;
                }
            }
            let (ci, cj, _) = plan.support[pick];
            let grid = &entry.0.spec;
            let y = grid.center(ci);
            let y_bar_raw = grid.center(cj);
            // shift rule: each coordinate moves by its side's increment
            // measured from the plan's anchor state
            let anchor = [
                key[0] as f64 * spacing,
                key[1] as f64 * spacing,
                key[2] as f64 * spacing,
            ];
            let x_next = [
                x[0] + (y[0] - anchor[0]),
                x[1] + (y[1] - anchor[1]),
                x[2] + (y[2] - anchor[2]),
            ];
            let x_bar_next = [
                x_bar[0] + (y_bar_raw[0] - anchor[0]),
                x_bar[1] + (y_bar_raw[1] - anchor[1]),
                x_bar[2] + (y_bar_raw[2] - anchor[2]),
            ];
            step_costs.push(plan.cost_value);
            x = x_next;
            x_bar = x_bar_next;
            states.push((x, x_bar));
        }
        out.push(CoupledTrajectory {
            states,
            step_costs,
            cache_hits,
            max_quantization_error: max_q,
        });
    }
    Ok(out)
}

/// Deviation statistics of coupled trajectories: the running-max tail at
/// threshold gamma, the per-step mean Hoelder distance with its fitted
/// slope, and a concavity statistic for the at-most-linear accumulation.
#[derive(Debug, Clone, Serialize)]
pub struct DeviationReport {
    pub gamma: f64,
    pub tail: WilsonInterval,
    pub mean_dist_per_step: Vec<Estimate>,
    pub fitted_slope: f64,
    pub slope_se: f64,
    /// Mean second difference of the E d_n sequence with bootstrap SE; at
    /// most linear growth keeps it non-positive within noise.
    pub concavity: f64,
    pub concavity_se: f64,
    /// Accumulated per-step plan costs: the triangle-inequality budget that
    /// E d_n(X_k, Xbar_k) must respect up to sampling noise.
    pub cost_budget: Vec<f64>,
}

pub fn coupling_deviation(
    trajectories: &[CoupledTrajectory],
    gamma: f64,
    metric: HolderMetricSpec,
) -> DeviationReport {
    assert!(!trajectories.is_empty());
    let n_steps = trajectories
        .iter()
        .map(|t| t.states.len() - 1)
        .min()
        .unwrap();
    let mut exceed = 0u64;
    for t in trajectories {
        let max_dev = t
            .states
            .iter()
            .map(|(x, xb)| dist(*x, *xb))
            .fold(0.0, f64::max);
        if max_dev >= gamma {
            exceed += 1;
        }
    }
    let tail = wilson(exceed, trajectories.len() as u64, Z_975);
    let mut mean_dist_per_step = Vec::with_capacity(n_steps + 1);
    let mut per_chain: Vec<Vec<f64>> = vec![Vec::new(); n_steps + 1];
    for k in 0..=n_steps {
        let mut acc = Running::default();
        for t in trajectories {
            let (x, xb) = t.states[k];
            let d = metric.dist(x, xb);
            acc.push(d);
            per_chain[k].push(d);
        }
        mean_dist_per_step.push(Estimate::from_running(&acc));
    }
    let xs: Vec<f64> = (0..=n_steps).map(|k| k as f64).collect();
    let ys: Vec<f64> = mean_dist_per_step.iter().map(|e| e.mean).collect();
    let sig: Vec<f64> = mean_dist_per_step
        .iter()
        .map(|e| e.std_err.max(1e-12))
        .collect();
    let fit = crate::stats::weighted_line_fit(&xs, &ys, &sig);
    // bootstrap over chains for the concavity statistic
    let second_diff = |means: &[f64]| -> f64 {
        if means.len() < 3 {
            return 0.0;
        }
        let mut s = 0.0;
        for k in 1..means.len() - 1 {
            s += means[k + 1] - 2.0 * means[k] + means[k - 1];
        }
        s / (means.len() - 2) as f64
    };
    let base = second_diff(&ys);
    let n_chains = trajectories.len();
    let mut boot = Running::default();
    let mut rng = crate::rng::stream(0xb0075, StreamKind::Generic, n_chains as u64);
    for _ in 0..200 {
        let mut means = vec![0f64; n_steps + 1];
        for _ in 0..n_chains {
            let pick = rng.gen_range(0..n_chains);
            for k in 0..=n_steps {
                means[k] += per_chain[k][pick];
            }
        }
        for m in &mut means {
            *m /= n_chains as f64;
        }
        boot.push(second_diff(&means));
    }
    let mut cost_budget = Vec::with_capacity(n_steps + 1);
    let mut acc = 0.0;
    cost_budget.push(0.0);
    for k in 0..n_steps {
        let mean_cost: f64 = trajectories
            .iter()
            .filter_map(|t| t.step_costs.get(k))
            .sum::<f64>()
            / n_chains as f64;
        acc += mean_cost;
        cost_budget.push(acc);
    }
    DeviationReport {
        gamma,
        tail,
        mean_dist_per_step,
        fitted_slope: fit.slope,
        slope_se: fit.slope_se,
        concavity: base,
        concavity_se: boot.std_err() * (200f64).sqrt(),
        cost_budget,
    }
}
