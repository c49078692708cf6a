//! Realizations of the random coefficient fields (A(., w), b(., w)).
//!
//! One realization is built from i.i.d. standard Gaussian vectors attached
//! to the sites of a lattice h Z^3 (six channels per site: three for the
//! drift, three for the diagonal of the diffusion matrix), smoothed by a
//! compactly supported product kernel and passed through an odd squashing
//! map. The construction grants, exactly and by design:
//!
//!   - stationarity with respect to lattice shifts (the shift group acts on
//!     the noise indices; see [`EnvironmentField::with_noise_shift`]),
//!   - finite range dependence: evaluations further apart than the declared
//!     range read disjoint noise sites,
//!   - distributional invariance under signed coordinate permutations (the
//!     kernel is an even product kernel and the channels are i.i.d.),
//!   - the sup-norm bounds |b| <= eta0 and |A - I| <= eta0, since the
//!     squashing map is bounded by one,
//!   - uniform ellipticity (1 - eta0) I <= A <= (1 + eta0) I.
//!
//! The kernel is the piecewise-linear interpolant of a three-tap even
//! stencil, so the fields are Lipschitz (the regularity the SDE integrator
//! needs) and the smoothed values can be tabulated chunk by chunk and
//! evaluated by trilinear interpolation at ~100 ns per call. Chunks are
//! keyed by (seed, site), materialized idempotently on first touch, and
//! never depend on evaluation order or thread count.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::rng::{pack_coords, stream2, StreamKind};

/// Number of scalar channels: b_1, b_2, b_3, a_11, a_22, a_33.
pub const CHANNELS: usize = 6;

const CHUNK_LOG: i64 = 5;
const CHUNK: i64 = 1 << CHUNK_LOG; // 32 sites per axis
// Two-site halo: one consumed by the three-tap stencil, one kept so slope
// scans see the first site of the neighbouring chunk.
const HALO: i64 = 2;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Region {
    pub lo: Point,
    pub hi: Point,
}

impl Region {
    pub fn cube(half_width: f64) -> Self {
        Region {
            lo: [-half_width; 3],
            hi: [half_width; 3],
        }
    }

    pub fn contains(&self, x: Point) -> bool {
        (0..3).all(|i| self.lo[i] <= x[i] && x[i] <= self.hi[i])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvironmentParams {
    /// Perturbation amplitude; must stay below 1/2 so that the ellipticity
    /// constant nu = 1/(1 - eta0) does not exceed 2.
    pub eta0: f64,
    /// Dependence range R: evaluations separated by more than R are
    /// independent.
    pub dep_range: f64,
    /// Noise lattice spacing; must divide R/2 evenly, stay below R/4, and
    /// leave room for the kernel support (R >= 8 h).
    pub h_env: f64,
    pub seed: u64,
    /// Box the field must cover; evaluations outside error out.
    pub region: Region,
    /// Gain applied to the variance-normalized smoothed noise before the
    /// squashing map. Larger gain drives the squash toward saturation and
    /// strengthens the environment without touching eta0.
    pub gain: f64,
    /// Storage budget for tabulated chunks.
    #[serde(default = "default_budget")]
    pub memory_budget_mib: usize,
}

fn default_budget() -> usize {
    3000
}

impl EnvironmentParams {
    pub fn new(eta0: f64, dep_range: f64, h_env: f64, seed: u64, region: Region) -> Self {
        EnvironmentParams {
            eta0,
            dep_range,
            h_env,
            seed,
            region,
            gain: 1.0,
            memory_budget_mib: default_budget(),
        }
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.eta0) {
            return Err(Error::Eta0OutOfRange(self.eta0));
        }
        let half_r = self.dep_range / 2.0;
        let ratio = half_r / self.h_env;
        let divides = (ratio - ratio.round()).abs() < 1e-9 && ratio.round() >= 1.0;
        // The interpolated kernel reads sites within 2h of the query point,
        // so dependence sets are disjoint past 4 sqrt(3) h; R >= 8 h keeps
        // the declared range valid with margin.
        if !divides || self.h_env >= self.dep_range / 4.0 || self.dep_range < 8.0 * self.h_env {
            return Err(Error::BadNoiseSpacing {
                h: self.h_env,
                half_r,
            });
        }
        assert!(self.gain > 0.0, "gain must be positive");
        // worst-case site count if the whole region materializes; the
        // trivial field stores nothing, so eta0 = 0 regions are free
        if self.eta0 > 0.0 {
            let mut sites = 1.0f64;
            for i in 0..3 {
                sites *= (self.region.hi[i] - self.region.lo[i]) / self.h_env + 2.0 * CHUNK as f64;
            }
            let need_mib = (sites * (CHANNELS * 4) as f64 / (1 << 20) as f64) as usize;
            if need_mib > self.memory_budget_mib {
                return Err(Error::RegionTooLarge {
                    need_mib,
                    budget_mib: self.memory_budget_mib,
                });
            }
        }
        Ok(())
    }
}

/// Coefficients at a point: diagonal diffusion matrix and drift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    /// Diagonal of A; eigenvalues lie in [1 - eta0, 1 + eta0].
    pub a_diag: [f64; 3],
    /// Drift; |b| <= eta0 componentwise bound is |b_i| < eta0.
    pub b: [f64; 3],
}

impl Coeffs {
    pub const TRIVIAL: Coeffs = Coeffs {
        a_diag: [1.0; 3],
        b: [0.0; 3],
    };

    /// sigma = sqrt(A), diagonal.
    pub fn sigma_diag(&self) -> [f64; 3] {
        [
            self.a_diag[0].sqrt(),
            self.a_diag[1].sqrt(),
            self.a_diag[2].sqrt(),
        ]
    }
}

struct FieldChunk {
    /// Smoothed (pre-squash) noise, site-major, `CHANNELS` floats per site.
    values: Box<[f32]>,
    /// Max |forward difference| / h over the chunk, per channel.
    max_slope: f64,
}

pub struct EnvironmentField {
    pub params: EnvironmentParams,
    /// Standard deviation of the smoothed noise at a lattice site; the
    /// squash input is gain * phi / sigma_phi.
    sigma_phi: f64,
    chunks: RwLock<HashMap<[i64; 3], Arc<FieldChunk>>>,
    max_slope_seen: Mutex<f64>,
    /// Noise index shift realizing the translation group on environments.
    site_shift: [i64; 3],
}

/// Odd, smooth, strictly bounded squashing map with unit slope at zero.
#[inline]
pub fn squash(u: f64) -> f64 {
    u / (1.0 + u * u).sqrt()
}

/// Per-axis kernel stencil at site offsets {-1, 0, +1}, scaled so the
/// piecewise-linear interpolant has unit mass for spacing h.
#[inline]
fn stencil(h: f64) -> [f64; 3] {
    [0.25 / h, 0.5 / h, 0.25 / h]
}

impl EnvironmentField {
    pub fn generate(params: EnvironmentParams) -> Result<Self> {
        params.validate()?;
        let q = stencil(params.h_env);
        let axis_var: f64 = q.iter().map(|w| w * w).sum();
        let sigma_phi = axis_var.powf(1.5).sqrt();
        Ok(EnvironmentField {
            params,
            sigma_phi,
            chunks: RwLock::new(HashMap::new()),
            max_slope_seen: Mutex::new(0.0),
            site_shift: [0; 3],
        })
    }

    /// The same realization read through the noise translated by `shift`
    /// lattice vectors: the stationarity witness. Field values satisfy
    /// shifted.evaluate(x) == original.evaluate(x + h * shift) bitwise.
    pub fn with_noise_shift(&self, shift: [i64; 3]) -> EnvironmentField {
        EnvironmentField {
            params: self.params.clone(),
            sigma_phi: self.sigma_phi,
            chunks: RwLock::new(HashMap::new()),
            max_slope_seen: Mutex::new(0.0),
            site_shift: [
                self.site_shift[0] + shift[0],
                self.site_shift[1] + shift[1],
                self.site_shift[2] + shift[2],
            ],
        }
    }

    pub fn eta0(&self) -> f64 {
        self.params.eta0
    }

    /// Six i.i.d. standard normals for the absolute site, regardless of who
    /// asks or when.
    fn site_noise(&self, site: [i64; 3]) -> [f32; CHANNELS] {
        let s = [
            site[0] + self.site_shift[0],
            site[1] + self.site_shift[1],
            site[2] + self.site_shift[2],
        ];
        debug_assert!(s.iter().all(|&c| c.unsigned_abs() < (1 << 20)));
        let key = pack_coords([s[0] as i32, s[1] as i32, s[2] as i32]);
        let mut rng = stream2(self.params.seed, StreamKind::NoiseChunk, key, 0);
        let mut out = [0f32; CHANNELS];
        for v in &mut out {
            let g: f64 = rng.sample(StandardNormal);
            *v = g as f32;
        }
        out
    }

    fn chunk(&self, coord: [i64; 3]) -> Arc<FieldChunk> {
        if let Some(c) = self.chunks.read().unwrap().get(&coord) {
            return c.clone();
        }
        let built = Arc::new(self.fill_chunk(coord));
        let mut w = self.chunks.write().unwrap();
        // first writer wins; values are identical either way
        let entry = w.entry(coord).or_insert_with(|| built.clone()).clone();
        drop(w);
        let mut ms = self.max_slope_seen.lock().unwrap();
        if entry.max_slope > *ms {
            *ms = entry.max_slope;
        }
        entry
    }

    /// Separable three-tap smoothing of the site noise over the chunk plus
    /// halo. Deterministic given (seed, coord).
    fn fill_chunk(&self, coord: [i64; 3]) -> FieldChunk {
        let n = (CHUNK + 2 * HALO) as usize;
        let base = [
            coord[0] * CHUNK - HALO,
            coord[1] * CHUNK - HALO,
            coord[2] * CHUNK - HALO,
        ];
        let mut buf = vec![0f32; n * n * n * CHANNELS];
        let idx = |x: usize, y: usize, z: usize, c: usize| ((z * n + y) * n + x) * CHANNELS + c;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let noise =
                        self.site_noise([base[0] + x as i64, base[1] + y as i64, base[2] + z as i64]);
                    for c in 0..CHANNELS {
                        buf[idx(x, y, z, c)] = noise[c];
                    }
                }
            }
        }
        let q = stencil(self.params.h_env);
        let q = [q[0] as f32, q[1] as f32, q[2] as f32];
        // in-place convolution along each axis; shrink validity by one site
        // per pass, which the halo provides
        let mut line = vec![0f32; n * CHANNELS];
        for axis in 0..3 {
            for u in 0..n {
                for v in 0..n {
                    for w in 0..n {
                        let (x, y, z) = match axis {
                            0 => (w, u, v),
                            1 => (u, w, v),
                            _ => (u, v, w),
                        };
                        for c in 0..CHANNELS {
                            line[w * CHANNELS + c] = buf[idx(x, y, z, c)];
                        }
                    }
                    for w in 1..n - 1 {
                        let (x, y, z) = match axis {
                            0 => (w, u, v),
                            1 => (u, w, v),
                            _ => (u, v, w),
                        };
                        for c in 0..CHANNELS {
                            buf[idx(x, y, z, c)] = q[0] * line[(w - 1) * CHANNELS + c]
                                + q[1] * line[w * CHANNELS + c]
                                + q[2] * line[(w + 1) * CHANNELS + c];
                        }
                    }
                }
            }
        }
        // Extract the central CHUNK^3 block (offset HALO) and the realized
        // max slope. The convolved region extends one site past the block on
        // each side, so slope scans cover cross-chunk neighbour pairs too.
        let m = CHUNK as usize;
        let o = HALO as usize;
        let mut values = vec![0f32; m * m * m * CHANNELS].into_boxed_slice();
        let out_idx = |x: usize, y: usize, z: usize, c: usize| ((z * m + y) * m + x) * CHANNELS + c;
        let mut max_slope = 0f64;
        for z in 0..m {
            for y in 0..m {
                for x in 0..m {
                    for c in 0..CHANNELS {
                        let v = buf[idx(x + o, y + o, z + o, c)];
                        values[out_idx(x, y, z, c)] = v;
                        let dx = (buf[idx(x + o + 1, y + o, z + o, c)] - v).abs() as f64;
                        let dy = (buf[idx(x + o, y + o + 1, z + o, c)] - v).abs() as f64;
                        let dz = (buf[idx(x + o, y + o, z + o + 1, c)] - v).abs() as f64;
                        max_slope = max_slope.max(dx.max(dy).max(dz) / self.params.h_env);
                    }
                }
            }
        }
        FieldChunk { values, max_slope }
    }

    /// Checked evaluation.
    pub fn evaluate(&self, x: Point) -> Result<Coeffs> {
        if !self.params.region.contains(x) {
            return Err(Error::OutOfCoverage(x));
        }
        let mut cache = ChunkCache::default();
        Ok(self.evaluate_fast(x, &mut cache))
    }

    /// Hot-loop evaluation via tabulated chunks and trilinear interpolation.
    /// The caller keeps the cache alive across calls; region membership is
    /// the caller's responsibility.
    #[inline]
    pub fn evaluate_fast(&self, x: Point, cache: &mut ChunkCache) -> Coeffs {
        if self.params.eta0 == 0.0 {
            return Coeffs::TRIVIAL;
        }
        let h = self.params.h_env;
        let u = [x[0] / h, x[1] / h, x[2] / h];
        let base = [
            u[0].floor() as i64,
            u[1].floor() as i64,
            u[2].floor() as i64,
        ];
        let fx = (u[0] - base[0] as f64) as f32;
        let fy = (u[1] - base[1] as f64) as f32;
        let fz = (u[2] - base[2] as f64) as f32;
        let wx = [1.0 - fx, fx];
        let wy = [1.0 - fy, fy];
        let wz = [1.0 - fz, fz];
        let mask = CHUNK - 1;
        let mut acc = [0f32; CHANNELS];
        // fast path: all eight corners inside one chunk
        if (base[0] & mask) < mask && (base[1] & mask) < mask && (base[2] & mask) < mask {
            let coord = [base[0] >> CHUNK_LOG, base[1] >> CHUNK_LOG, base[2] >> CHUNK_LOG];
            let chunk = cache.fetch(self, coord);
            let m = CHUNK as usize;
            let base_off = (((base[2] & mask) as usize * m + (base[1] & mask) as usize) * m
                + (base[0] & mask) as usize)
                * CHANNELS;
            const SX: usize = CHANNELS;
            let sy: usize = CHANNELS * CHUNK as usize;
            let sz: usize = CHANNELS * (CHUNK * CHUNK) as usize;
            let vals = &chunk.values;
            for dz in 0..2usize {
                for dy in 0..2usize {
                    let wyz = wy[dy] * wz[dz];
                    for dx in 0..2usize {
                        let w = wx[dx] * wyz;
                        let off = base_off + dx * SX + dy * sy + dz * sz;
                        let v = &vals[off..off + CHANNELS];
                        for c in 0..CHANNELS {
                            acc[c] += w * v[c];
                        }
                    }
                }
            }
        } else {
            for dz in 0..2i64 {
                for dy in 0..2i64 {
                    let wyz = wy[dy as usize] * wz[dz as usize];
                    for dx in 0..2i64 {
                        let w = wx[dx as usize] * wyz;
                        let site = [base[0] + dx, base[1] + dy, base[2] + dz];
                        let vals = self.site_values(site, cache);
                        for c in 0..CHANNELS {
                            acc[c] += w * vals[c];
                        }
                    }
                }
            }
        }
        let scale = self.params.gain / self.sigma_phi;
        let e = self.params.eta0;
        Coeffs {
            a_diag: [
                1.0 + e * squash(scale * acc[3] as f64),
                1.0 + e * squash(scale * acc[4] as f64),
                1.0 + e * squash(scale * acc[5] as f64),
            ],
            b: [
                e * squash(scale * acc[0] as f64),
                e * squash(scale * acc[1] as f64),
                e * squash(scale * acc[2] as f64),
            ],
        }
    }

    #[inline]
    fn site_values(&self, site: [i64; 3], cache: &mut ChunkCache) -> [f32; CHANNELS] {
        let coord = [site[0] >> CHUNK_LOG, site[1] >> CHUNK_LOG, site[2] >> CHUNK_LOG];
        let chunk = cache.fetch(self, coord);
        let m = CHUNK as usize;
        let lx = (site[0] & (CHUNK - 1)) as usize;
        let ly = (site[1] & (CHUNK - 1)) as usize;
        let lz = (site[2] & (CHUNK - 1)) as usize;
        let off = ((lz * m + ly) * m + lx) * CHANNELS;
        let mut out = [0f32; CHANNELS];
        out.copy_from_slice(&chunk.values[off..off + CHANNELS]);
        out
    }

    /// Reference evaluation straight from the defining sum over noise sites;
    /// slow, used by the verification harness and as the oracle for the
    /// tabulated path.
    pub fn evaluate_reference(&self, x: Point) -> Result<Coeffs> {
        if !self.params.region.contains(x) {
            return Err(Error::OutOfCoverage(x));
        }
        if self.params.eta0 == 0.0 {
            return Ok(Coeffs::TRIVIAL);
        }
        let mut acc = [0f64; CHANNELS];
        for (site, w) in self.kernel_support(x) {
            let noise = self.site_noise(site);
            for c in 0..CHANNELS {
                acc[c] += w * noise[c] as f64;
            }
        }
        let scale = self.params.gain / self.sigma_phi;
        let e = self.params.eta0;
        Ok(Coeffs {
            a_diag: [
                1.0 + e * squash(scale * acc[3]),
                1.0 + e * squash(scale * acc[4]),
                1.0 + e * squash(scale * acc[5]),
            ],
            b: [
                e * squash(scale * acc[0]),
                e * squash(scale * acc[1]),
                e * squash(scale * acc[2]),
            ],
        })
    }

    /// Effective smoothing kernel: piecewise-linear interpolant of the
    /// three-tap stencil, as a product over axes. Support lies within 2h.
    fn axis_kernel(&self, t: f64) -> f64 {
        let h = self.params.h_env;
        let q = stencil(h);
        let u = t / h;
        if u.abs() >= 2.0 {
            return 0.0;
        }
        // linear interpolation of samples (q1, q0, q1) at -1, 0, 1, zero at +-2
        let a = u.abs();
        if a <= 1.0 {
            q[1] * (1.0 - a) + q[0] * a
        } else {
            q[0] * (2.0 - a)
        }
    }

    /// Noise sites (with weights) that an evaluation at x reads.
    pub fn kernel_support(&self, x: Point) -> Vec<([i64; 3], f64)> {
        let h = self.params.h_env;
        let lo = |xi: f64| ((xi / h) - 2.0).ceil() as i64;
        let hi = |xi: f64| ((xi / h) + 2.0).floor() as i64;
        let mut out = Vec::new();
        for sx in lo(x[0])..=hi(x[0]) {
            let wx = self.axis_kernel(x[0] - sx as f64 * h);
            if wx == 0.0 {
                continue;
            }
            for sy in lo(x[1])..=hi(x[1]) {
                let wy = self.axis_kernel(x[1] - sy as f64 * h);
                if wy == 0.0 {
                    continue;
                }
                for sz in lo(x[2])..=hi(x[2]) {
                    let wz = self.axis_kernel(x[2] - sz as f64 * h);
                    if wz == 0.0 {
                        continue;
                    }
                    out.push(([sx, sy, sz], wx * wy * wz));
                }
            }
        }
        out
    }

    /// Sites an evaluation depends on, for the exact finite-range assertion.
    pub fn dependent_sites(&self, x: Point) -> Vec<[i64; 3]> {
        self.kernel_support(x).into_iter().map(|(s, _)| s).collect()
    }

    /// Lipschitz bound for b over the chunks materialized so far:
    /// eta0 * gain/sigma_phi * sup|s'| * Lip(phi), with Lip(phi) read off the
    /// tabulated slopes (trilinear interpolation cannot exceed sqrt(3) times
    /// the worst axis slope).
    pub fn lipschitz_bound(&self) -> f64 {
        let slope = *self.max_slope_seen.lock().unwrap();
        self.params.eta0 * self.params.gain / self.sigma_phi * 3f64.sqrt() * slope
    }
}

/// One-entry chunk cache owned by each hot loop.
pub struct ChunkCache {
    coord: [i64; 3],
    chunk: Option<Arc<FieldChunk>>,
}

impl Default for ChunkCache {
    fn default() -> Self {
        ChunkCache {
            coord: [i64::MAX; 3],
            chunk: None,
        }
    }
}

impl ChunkCache {
    #[inline]
    fn fetch(&mut self, env: &EnvironmentField, coord: [i64; 3]) -> &FieldChunk {
        if self.coord != coord {
            self.chunk = Some(env.chunk(coord));
            self.coord = coord;
        }
        self.chunk.as_deref().unwrap()
    }
}

/// Signed coordinate permutation: output axis i takes input axis `perm[i]`
/// with sign `sign[i]`.
#[derive(Debug, Clone, Copy)]
pub struct SignedPermutation {
    pub perm: [usize; 3],
    pub sign: [f64; 3],
}

impl SignedPermutation {
    pub fn identity() -> Self {
        SignedPermutation {
            perm: [0, 1, 2],
            sign: [1.0; 3],
        }
    }

    pub fn reflect_axis(axis: usize) -> Self {
        let mut s = Self::identity();
        s.sign[axis] = -1.0;
        s
    }

    pub fn swap(a: usize, b: usize) -> Self {
        let mut s = Self::identity();
        s.perm.swap(a, b);
        s
    }

    /// r x
    pub fn apply(&self, x: Point) -> Point {
        [
            self.sign[0] * x[self.perm[0]],
            self.sign[1] * x[self.perm[1]],
            self.sign[2] * x[self.perm[2]],
        ]
    }

    /// Diagonal of r A r^t for diagonal A: signs cancel, entries permute.
    pub fn apply_diag(&self, a: [f64; 3]) -> [f64; 3] {
        [a[self.perm[0]], a[self.perm[1]], a[self.perm[2]]]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IsotropyComponent {
    pub label: String,
    pub mean_delta: f64,
    pub mean_z: f64,
    pub var_ratio: f64,
    pub var_z: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IsotropyReport {
    pub n_seeds: usize,
    pub components: Vec<IsotropyComponent>,
    pub significance: f64,
    pub pass: bool,
}

/// Two-sample comparison, across environment seeds, of the law of
/// (A(rx), b(rx)) against (r A(x) r^t, r b(x)). Means are compared with a
/// paired z-test (the samples share seeds), variances with a log-variance
/// z-test; the pass flag applies a Bonferroni correction at the requested
/// significance.
pub fn verify_isotropy(
    base: &EnvironmentParams,
    r: SignedPermutation,
    n_seeds: usize,
    x: Point,
    significance: f64,
) -> Result<IsotropyReport> {
    let mut lhs = vec![[0f64; CHANNELS]; n_seeds];
    let mut rhs = vec![[0f64; CHANNELS]; n_seeds];
    let rx = r.apply(x);
    for k in 0..n_seeds {
        let mut params = base.clone();
        params.seed = base.seed.wrapping_add(k as u64);
        let field = EnvironmentField::generate(params)?;
        let at_rx = field.evaluate_reference(rx)?;
        let at_x = field.evaluate_reference(x)?;
        lhs[k] = [
            at_rx.b[0],
            at_rx.b[1],
            at_rx.b[2],
            at_rx.a_diag[0],
            at_rx.a_diag[1],
            at_rx.a_diag[2],
        ];
        let rb = r.apply(at_x.b);
        let ra = r.apply_diag(at_x.a_diag);
        rhs[k] = [rb[0], rb[1], rb[2], ra[0], ra[1], ra[2]];
    }
    let labels = ["b1", "b2", "b3", "a11", "a22", "a33"];
    let mut components = Vec::with_capacity(CHANNELS);
    let mut pass = true;
    // 2 tests per channel
    let z_crit = crate::stats::norm_quantile(1.0 - significance / (2.0 * 2.0 * CHANNELS as f64));
    for c in 0..CHANNELS {
        let a: Vec<f64> = lhs.iter().map(|v| v[c]).collect();
        let b: Vec<f64> = rhs.iter().map(|v| v[c]).collect();
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let d = crate::stats::Estimate::from_slice(&diff);
        let mean_z = if d.std_err > 0.0 {
            d.mean / d.std_err
        } else {
            0.0
        };
        let va = crate::stats::Estimate::from_slice(&a);
        let vb = crate::stats::Estimate::from_slice(&b);
        let (s2a, s2b) = (
            va.std_err * va.std_err * n_seeds as f64,
            vb.std_err * vb.std_err * n_seeds as f64,
        );
        let var_ratio = s2a / s2b.max(1e-300);
        // ln variance is asymptotically normal with variance 2/(n-1)
        let var_z = var_ratio.ln() / (4.0 / (n_seeds as f64 - 1.0)).sqrt();
        if mean_z.abs() > z_crit || var_z.abs() > z_crit {
            pass = false;
        }
        components.push(IsotropyComponent {
            label: labels[c].to_string(),
            mean_delta: d.mean,
            mean_z,
            var_ratio,
            var_z,
        });
    }
    Ok(IsotropyReport {
        n_seeds,
        components,
        significance,
        pass,
    })
}
