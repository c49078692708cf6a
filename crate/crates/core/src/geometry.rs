//! Bounded domains with an exterior ball certificate, their metric
//! inflations U_delta and rescalings U/eps, plus the membership and
//! distance oracles the exit detectors consume.
//!
//! Convention: U is open and "exit" means leaving the open set.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};

pub type Point = [f64; 3];

pub fn norm(x: Point) -> f64 {
    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

type SdfFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Shape {
    Ball {
        radius: f64,
    },
    Annulus {
        r1: f64,
        r2: f64,
    },
    /// Signed-distance oracle, negative inside. The oracle is trusted to be
    /// an exact (1-Lipschitz) signed distance up to `tol`.
    General {
        name: String,
        sdf: SdfFn,
        bounding_box: [f64; 2],
        tol: f64,
    },
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Ball { radius } => write!(f, "Ball({radius})"),
            Shape::Annulus { r1, r2 } => write!(f, "Annulus({r1}, {r2})"),
            Shape::General { name, .. } => write!(f, "General({name})"),
        }
    }
}

/// A bounded open domain together with its exterior ball radius r0.
#[derive(Debug, Clone)]
pub struct DomainGeometry {
    pub shape: Shape,
    pub r0: f64,
}

impl Serialize for DomainGeometry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:?} r0={}", self.shape, self.r0))
    }
}

impl DomainGeometry {
    /// A ball admits exterior tangent balls of every radius; 2R is recorded
    /// so that inflations up to the radius itself stay admissible.
    pub fn ball(radius: f64) -> Self {
        assert!(radius > 0.0);
        DomainGeometry {
            shape: Shape::Ball { radius },
            r0: 2.0 * radius,
        }
    }

    /// The inner boundary is touched from inside the hole; r1 is the largest
    /// admissible exterior ball radius there.
    pub fn annulus(r1: f64, r2: f64) -> Self {
        assert!(0.0 < r1 && r1 < r2);
        DomainGeometry {
            shape: Shape::Annulus { r1, r2 },
            r0: r1,
        }
    }

    pub fn general(
        name: impl Into<String>,
        sdf: SdfFn,
        bounding_box: [f64; 2],
        r0: f64,
        tol: f64,
    ) -> Self {
        DomainGeometry {
            shape: Shape::General {
                name: name.into(),
                sdf,
                bounding_box,
                tol,
            },
            r0,
        }
    }

    /// Exact rounded box: half-extents `b`, rounding radius `rho`. Convex,
    /// so the rounding radius certifies the exterior ball condition.
    pub fn rounded_box(b: Point, rho: f64) -> Self {
        assert!(rho > 0.0 && b.iter().all(|&c| c > 0.0));
        let bb = norm(b) + rho;
        let sdf: SdfFn = Arc::new(move |p: Point| {
            let q = [p[0].abs() - b[0], p[1].abs() - b[1], p[2].abs() - b[2]];
            let outside = norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
            let inside = q[0].max(q[1]).max(q[2]).min(0.0);
            outside + inside - rho
        });
        DomainGeometry::general("rounded_box", sdf, [-bb, bb], rho, 1e-9)
    }

    /// Signed distance to the boundary, negative inside U.
    pub fn signed_distance(&self, x: Point) -> f64 {
        match &self.shape {
            Shape::Ball { radius } => norm(x) - radius,
            Shape::Annulus { r1, r2 } => {
                let r = norm(x);
                (r1 - r).max(r - r2)
            }
            Shape::General { sdf, .. } => sdf(x),
        }
    }

    /// True iff x lies in the open set U; boundary points are outside.
    pub fn contains(&self, x: Point) -> bool {
        self.signed_distance(x) < 0.0
    }

    /// d(x, U^c): zero outside U.
    pub fn distance_to_complement(&self, x: Point) -> f64 {
        (-self.signed_distance(x)).max(0.0)
    }

    /// d(x, U): zero on the closure.
    pub fn distance_to_set(&self, x: Point) -> f64 {
        self.signed_distance(x).max(0.0)
    }

    /// Half-width of a centered cube containing the domain.
    pub fn bounding_half_width(&self) -> f64 {
        match &self.shape {
            Shape::Ball { radius } => *radius,
            Shape::Annulus { r2, .. } => *r2,
            Shape::General { bounding_box, .. } => bounding_box[1].abs().max(bounding_box[0].abs()),
        }
    }

    /// Nearest boundary point, used by walk-on-spheres when a walk enters
    /// the termination shell.
    pub fn project_to_boundary(&self, x: Point) -> Point {
        match &self.shape {
            Shape::Ball { radius } => {
                let r = norm(x);
                if r == 0.0 {
                    [*radius, 0.0, 0.0]
                } else {
                    scale(x, radius / r)
                }
            }
            Shape::Annulus { r1, r2 } => {
                let r = norm(x).max(1e-300);
                let target = if (r - r1).abs() <= (r2 - r).abs() { *r1 } else { *r2 };
                scale(x, target / r)
            }
            Shape::General { sdf, .. } => {
                // one Newton step along the numeric gradient; the oracle is a
                // signed distance so the step length is exact up to tol
                let h = 1e-6;
                let s0 = sdf(x);
                let mut g = [0.0; 3];
                for i in 0..3 {
                    let mut xp = x;
                    xp[i] += h;
                    let mut xm = x;
                    xm[i] -= h;
                    g[i] = (sdf(xp) - sdf(xm)) / (2.0 * h);
                }
                let gn = norm(g).max(1e-12);
                add(x, scale(g, -s0 / gn))
            }
        }
    }

    /// The metric inflation U_delta = { x : d(x, U) < delta }. The exterior
    /// ball radius shrinks by delta.
    pub fn inflate(&self, delta: f64) -> Result<DomainGeometry> {
        if !(delta > 0.0 && delta < self.r0 / 2.0) {
            return Err(Error::DeltaOutOfRange {
                delta,
                r0: self.r0,
            });
        }
        let r0 = self.r0 - delta;
        let shape = match &self.shape {
            Shape::Ball { radius } => Shape::Ball {
                radius: radius + delta,
            },
            Shape::Annulus { r1, r2 } => Shape::Annulus {
                r1: r1 - delta,
                r2: r2 + delta,
            },
            Shape::General {
                name,
                sdf,
                bounding_box,
                tol,
            } => {
                let inner = sdf.clone();
                Shape::General {
                    name: format!("{name}+{delta}"),
                    sdf: Arc::new(move |p| inner(p) - delta),
                    bounding_box: [bounding_box[0] - delta, bounding_box[1] + delta],
                    tol: *tol,
                }
            }
        };
        Ok(DomainGeometry { shape, r0 })
    }

    /// The rescaling U/eps; lengths scale by 1/eps.
    pub fn rescale(&self, eps: f64) -> DomainGeometry {
        assert!(eps > 0.0);
        let inv = 1.0 / eps;
        let shape = match &self.shape {
            Shape::Ball { radius } => Shape::Ball {
                radius: radius * inv,
            },
            Shape::Annulus { r1, r2 } => Shape::Annulus {
                r1: r1 * inv,
                r2: r2 * inv,
            },
            Shape::General {
                name,
                sdf,
                bounding_box,
                tol,
            } => {
                let inner = sdf.clone();
                Shape::General {
                    name: format!("{name}/{eps}"),
                    sdf: Arc::new(move |p| inner(scale(p, eps)) * inv),
                    bounding_box: [bounding_box[0] * inv, bounding_box[1] * inv],
                    tol: *tol,
                }
            }
        };
        DomainGeometry {
            shape,
            r0: self.r0 * inv,
        }
    }

    /// Samples points on the boundary, used by the exterior ball
    /// certification and the probe builders.
    pub fn sample_boundary(&self, n: usize, seed: u64) -> Vec<Point> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, crate::rng::StreamKind::Generic, 0xb0d);
        let mut pts = Vec::with_capacity(n);
        while pts.len() < n {
            let dir = random_unit(&mut rng);
            match &self.shape {
                Shape::Ball { radius } => pts.push(scale(dir, *radius)),
                Shape::Annulus { r1, r2 } => {
                    let r = if pts.len() % 2 == 0 { *r1 } else { *r2 };
                    pts.push(scale(dir, r));
                }
                Shape::General { sdf, bounding_box, .. } => {
                    // bisect sdf along the ray from an interior point
                    let hi = bounding_box[1];
                    let mut a = 0.0;
                    let mut b = hi;
                    if sdf([0.0; 3]) >= 0.0 || sdf(scale(dir, hi)) <= 0.0 {
                        // fall back: jitter the ray origin
                        let _ = rng.gen::<f64>();
                        continue;
                    }
                    for _ in 0..80 {
                        let mid = 0.5 * (a + b);
                        if sdf(scale(dir, mid)) < 0.0 {
                            a = mid;
                        } else {
                            b = mid;
                        }
                    }
                    pts.push(scale(dir, 0.5 * (a + b)));
                }
            }
        }
        pts
    }

    /// Checks the exterior ball certificate on sampled boundary points: the
    /// ball of radius r0 placed outward at distance r0 from the sample must
    /// not meet the closure of U beyond the touching point.
    pub fn certify_exterior_ball(&self, n_samples: usize, seed: u64) -> ExteriorBallReport {
        let tol = 1e-7 * self.r0.max(1.0);
        let mut worst = f64::INFINITY;
        let mut failures = 0usize;
        for x in self.sample_boundary(n_samples, seed) {
            let n_hat = self.outward_normal(x);
            let center = add(x, scale(n_hat, self.r0));
            let clearance = self.distance_to_set(center);
            let margin = clearance - self.r0;
            worst = worst.min(margin);
            if margin < -tol {
                failures += 1;
            }
        }
        ExteriorBallReport {
            r0: self.r0,
            samples: n_samples,
            failures,
            worst_margin: worst,
            pass: failures == 0,
        }
    }

    fn outward_normal(&self, x: Point) -> Point {
        match &self.shape {
            Shape::Ball { .. } => scale(x, 1.0 / norm(x).max(1e-300)),
            Shape::Annulus { r1, r2 } => {
                let r = norm(x).max(1e-300);
                if (r - r1).abs() <= (r2 - r).abs() {
                    scale(x, -1.0 / r)
                } else {
                    scale(x, 1.0 / r)
                }
            }
            Shape::General { sdf, .. } => {
                let h = 1e-6;
                let mut g = [0.0; 3];
                for i in 0..3 {
                    let mut xp = x;
                    xp[i] += h;
                    let mut xm = x;
                    xm[i] -= h;
                    g[i] = (sdf(xp) - sdf(xm)) / (2.0 * h);
                }
                scale(g, 1.0 / norm(g).max(1e-12))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExteriorBallReport {
    pub r0: f64,
    pub samples: usize,
    pub failures: usize,
    pub worst_margin: f64,
    pub pass: bool,
}

pub fn random_unit<R: rand::Rng>(rng: &mut R) -> Point {
    use rand_distr::StandardNormal;
    loop {
        let v: Point = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = norm(v);
        if n > 1e-12 {
            return scale(v, 1.0 / n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn membership_basics() {
        let ball = DomainGeometry::ball(1.0);
        assert!(ball.contains([0.0; 3]));
        assert!(!ball.contains([1.0, 0.0, 0.0])); // boundary excluded
        let ann = DomainGeometry::annulus(1.0, 2.0);
        assert!(ann.contains([1.5, 0.0, 0.0]));
        assert!(!ann.contains([0.5, 0.0, 0.0]));
    }

    #[test]
    fn distances() {
        let ball = DomainGeometry::ball(1.0);
        assert_eq!(ball.distance_to_complement([0.0; 3]), 1.0);
        assert_eq!(ball.distance_to_complement([2.0, 0.0, 0.0]), 0.0);
        let ann = DomainGeometry::annulus(1.0, 2.0);
        assert!((ann.distance_to_complement([1.5, 0.0, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn inflate_ball_and_annulus() {
        let ball = DomainGeometry::ball(1.0).inflate(0.5).unwrap();
        match ball.shape {
            Shape::Ball { radius } => assert!((radius - 1.5).abs() < 1e-15),
            _ => panic!(),
        }
        assert!((ball.r0 - 1.5).abs() < 1e-15);
        let ann = DomainGeometry::annulus(1.0, 2.0).inflate(0.25).unwrap();
        match ann.shape {
            Shape::Annulus { r1, r2 } => {
                // metric inflation of the annulus moves both radii by delta
                assert!((r1 - 0.75).abs() < 1e-15);
                assert!((r2 - 2.25).abs() < 1e-15);
            }
            _ => panic!(),
        }
        assert!(DomainGeometry::annulus(1.0, 2.0).inflate(0.5).is_err());
        assert!(DomainGeometry::annulus(1.0, 2.0).inflate(-0.1).is_err());
    }

    #[test]
    fn annulus_inflation_is_metric_inflation() {
        // d(x, U) < delta iff x is in the inflated annulus, on random probes
        let base = DomainGeometry::annulus(1.0, 2.0);
        let infl = base.inflate(0.25).unwrap();
        let mut rng = crate::rng::stream(11, crate::rng::StreamKind::Generic, 0);
        for _ in 0..2000 {
            let x: Point = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ];
            let in_inflation = infl.contains(x);
            let metric = base.distance_to_set(x) < 0.25;
            assert_eq!(in_inflation, metric, "at {x:?}");
        }
    }

    #[test]
    fn rescale_scales_everything() {
        let d = DomainGeometry::ball(1.0).rescale(0.01);
        match d.shape {
            Shape::Ball { radius } => assert!((radius - 100.0).abs() < 1e-9),
            _ => panic!(),
        }
        assert!((d.r0 - 200.0).abs() < 1e-9);
        let base = DomainGeometry::annulus(1.0, 2.0);
        let scaled = base.rescale(0.5);
        let x = [1.5, 0.2, -0.3];
        let xs = scale(x, 2.0);
        assert!(
            (scaled.distance_to_complement(xs) - 2.0 * base.distance_to_complement(x)).abs()
                < 1e-12
        );
        assert!((scaled.bounding_half_width() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn inflation_monotone_in_delta() {
        for dom in [
            DomainGeometry::ball(1.0),
            DomainGeometry::annulus(1.0, 2.0),
            DomainGeometry::rounded_box([0.6, 0.5, 0.4], 0.3),
        ] {
            let small = dom.inflate(0.05).unwrap();
            let large = dom.inflate(0.1).unwrap();
            let mut rng = crate::rng::stream(7, crate::rng::StreamKind::Generic, 1);
            for _ in 0..2000 {
                let x: Point = [
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                ];
                if small.contains(x) {
                    assert!(large.contains(x), "U_d1 not inside U_d2 at {x:?}");
                }
            }
        }
    }

    #[test]
    fn membership_consistent_with_distance() {
        for dom in [
            DomainGeometry::ball(1.0),
            DomainGeometry::annulus(1.0, 2.0),
            DomainGeometry::rounded_box([0.6, 0.5, 0.4], 0.3),
        ] {
            let mut rng = crate::rng::stream(8, crate::rng::StreamKind::Generic, 2);
            for _ in 0..2000 {
                let x: Point = [
                    rng.gen_range(-2.5..2.5),
                    rng.gen_range(-2.5..2.5),
                    rng.gen_range(-2.5..2.5),
                ];
                assert_eq!(dom.contains(x), dom.distance_to_complement(x) > 0.0);
            }
        }
    }

    #[test]
    fn exterior_ball_certificates() {
        let ball = DomainGeometry::ball(1.0);
        assert!(ball.certify_exterior_ball(500, 3).pass);
        let ann = DomainGeometry::annulus(1.0, 2.0);
        assert!(ann.certify_exterior_ball(500, 4).pass);
        let rb = DomainGeometry::rounded_box([0.6, 0.5, 0.4], 0.3);
        assert!(rb.certify_exterior_ball(500, 5).pass);
    }

    #[test]
    fn boundary_projection() {
        let ball = DomainGeometry::ball(1.0);
        let p = ball.project_to_boundary([0.3, 0.0, 0.0]);
        assert!((norm(p) - 1.0).abs() < 1e-12);
        let rb = DomainGeometry::rounded_box([0.6, 0.5, 0.4], 0.3);
        let q = rb.project_to_boundary([0.85, 0.1, 0.05]);
        assert!(rb.signed_distance(q).abs() < 1e-5);
    }
}
