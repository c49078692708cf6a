//! Small statistics toolbox: running moments, confidence intervals,
//! special functions, and weighted least squares.
//!
//! Every reported probability or mean in this crate carries an interval
//! computed here; pass/fail decisions use the interval, never the point
//! estimate alone.

use serde::Serialize;

/// Welford accumulator for mean and variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Running {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Running {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n as f64 - 1.0)
        }
    }

    pub fn std_err(&self) -> f64 {
        if self.n == 0 {
            f64::INFINITY
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Mean with standard error, the unit of exchange between estimators.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: u64,
}

impl Estimate {
    pub fn from_running(r: &Running) -> Self {
        Estimate {
            mean: r.mean(),
            std_err: r.std_err(),
            n: r.count(),
        }
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut r = Running::default();
        for &x in xs {
            r.push(x);
        }
        Estimate::from_running(&r)
    }

    /// |mean - target| <= k standard errors.
    pub fn within_se(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_err
    }
}

/// Wilson score interval for a binomial proportion.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct WilsonInterval {
    pub p_hat: f64,
    pub lo: f64,
    pub hi: f64,
    pub successes: u64,
    pub trials: u64,
}

pub fn wilson(successes: u64, trials: u64, z: f64) -> WilsonInterval {
    assert!(trials > 0, "wilson interval needs at least one trial");
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    WilsonInterval {
        p_hat: p,
        lo: (center - half).max(0.0),
        hi: (center + half).min(1.0),
        successes,
        trials,
    }
}

/// z quantiles used by the pass/fail rules.
pub const Z_95: f64 = 1.6448536269514722; // one-sided 95%
pub const Z_975: f64 = 1.959963984540054; // two-sided 95%
pub const Z_995: f64 = 2.5758293035489004; // two-sided 99%

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail of the standard normal.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Inverse standard normal CDF (Acklam's rational approximation polished by
/// one Halley step; absolute error well below 1e-12).
pub fn norm_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let x = if p < 0.02425 {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 0.97575 {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Halley refinement against the exact CDF
    let e = norm_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

/// Regularized lower incomplete gamma P(a, x), by series / continued fraction.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // series expansion
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..500 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * (-x + a * x.ln() - libm::lgamma(a)).exp()
    } else {
        1.0 - gamma_q_cf(a, x)
    }
}

/// Regularized upper incomplete gamma via Lentz continued fraction.
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    ((-x + a * x.ln() - libm::lgamma(a)).exp()) * h
}

/// Survival function of the chi-square distribution with `k` degrees of freedom.
pub fn chi2_sf(stat: f64, k: usize) -> f64 {
    1.0 - gamma_p(k as f64 / 2.0, stat / 2.0)
}

/// Pearson chi-square two-sample test on binned counts.
///
/// Bins where the pooled expectation is below `min_expected` are merged into a
/// single overflow cell to keep the asymptotics honest.
pub fn chi2_two_sample(counts_a: &[u64], counts_b: &[u64], min_expected: f64) -> (f64, f64) {
    assert_eq!(counts_a.len(), counts_b.len());
    let na: u64 = counts_a.iter().sum();
    let nb: u64 = counts_b.iter().sum();
    let (na, nb) = (na as f64, nb as f64);
    let mut stat = 0.0;
    let mut dof: i64 = -1;
    let mut rest_a = 0.0;
    let mut rest_b = 0.0;
    for (&ca, &cb) in counts_a.iter().zip(counts_b) {
        let (ca, cb) = (ca as f64, cb as f64);
        let pooled = (ca + cb) / (na + nb);
        if pooled * na.min(nb) < min_expected {
            rest_a += ca;
            rest_b += cb;
            continue;
        }
        let ea = pooled * na;
        let eb = pooled * nb;
        stat += (ca - ea).powi(2) / ea + (cb - eb).powi(2) / eb;
        dof += 1;
    }
    if rest_a + rest_b > 0.0 {
        let pooled = (rest_a + rest_b) / (na + nb);
        let ea = pooled * na;
        let eb = pooled * nb;
        stat += (rest_a - ea).powi(2) / ea + (rest_b - eb).powi(2) / eb;
        dof += 1;
    }
    if dof < 1 {
        return (stat, 1.0);
    }
    (stat, chi2_sf(stat, dof as usize))
}

/// Weighted least-squares line fit y = intercept + slope x with known
/// per-point standard errors. Returns the slope's standard error propagated
/// from the measurement errors, not from residuals.
#[derive(Debug, Clone, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub residuals: Vec<f64>,
}

pub fn weighted_line_fit(xs: &[f64], ys: &[f64], sigmas: &[f64]) -> LineFit {
    assert!(xs.len() >= 2 && xs.len() == ys.len() && ys.len() == sigmas.len());
    let w: Vec<f64> = sigmas.iter().map(|s| 1.0 / (s * s).max(1e-300)).collect();
    let sw: f64 = w.iter().sum();
    let swx: f64 = w.iter().zip(xs).map(|(w, x)| w * x).sum();
    let swy: f64 = w.iter().zip(ys).map(|(w, y)| w * y).sum();
    let swxx: f64 = w.iter().zip(xs).map(|(w, x)| w * x * x).sum();
    let swxy: f64 = w
        .iter()
        .zip(xs.iter().zip(ys))
        .map(|(w, (x, y))| w * x * y)
        .sum();
    let denom = sw * swxx - swx * swx;
    let slope = (sw * swxy - swx * swy) / denom;
    let intercept = (swy - slope * swx) / sw;
    let slope_se = (sw / denom).sqrt();
    let residuals = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| y - (intercept + slope * x))
        .collect();
    LineFit {
        slope,
        intercept,
        slope_se,
        residuals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_values() {
        // Abramowitz & Stegun 7.1
        assert!((erf(0.5) - 0.5204998778130465).abs() < 1e-14);
        assert!((erf(1.0) - 0.8427007929497149).abs() < 1e-14);
        assert!((norm_cdf(1.96) - 0.9750021048517795).abs() < 1e-12);
    }

    #[test]
    fn norm_quantile_inverts_cdf() {
        for p in [1e-6, 0.01, 0.05, 0.3, 0.5, 0.9, 0.975, 0.995, 1.0 - 1e-6] {
            let x = norm_quantile(p);
            assert!((norm_cdf(x) - p).abs() < 1e-12, "p = {p}");
        }
        assert!((norm_quantile(0.975) - Z_975).abs() < 1e-10);
    }

    #[test]
    fn gamma_p_matches_chi2_tables() {
        // chi2 with 4 dof: P(X <= 9.488) = 0.95
        assert!((chi2_sf(9.487729036781154, 4) - 0.05).abs() < 1e-9);
        // chi2 with 1 dof at z^2 quantile
        assert!((chi2_sf(Z_975 * Z_975, 1) - 0.05).abs() < 1e-9);
    }

    #[test]
    fn wilson_brackets_p_hat() {
        let w = wilson(7, 100, Z_975);
        assert!(w.lo < w.p_hat && w.p_hat < w.hi);
        assert!(w.lo > 0.0 && w.hi < 1.0);
        let w0 = wilson(0, 50, Z_975);
        assert_eq!(w0.lo, 0.0);
        assert!(w0.hi > 0.0);
    }

    #[test]
    fn wls_recovers_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.5 * x - 1.0).collect();
        let sig = [0.1; 4];
        let fit = weighted_line_fit(&xs, &ys, &sig);
        assert!((fit.slope - 2.5).abs() < 1e-12);
        assert!((fit.intercept + 1.0).abs() < 1e-12);
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn chi2_two_sample_same_distribution() {
        // identical counts give statistic 0 and p-value 1
        let a = [100u64, 200, 300, 50];
        let (stat, p) = chi2_two_sample(&a, &a, 5.0);
        assert!(stat.abs() < 1e-12);
        assert!(p > 0.999);
    }
}
