//! The inductive constant schedule: lengths L_n, factors ell_n, slowly
//! growing prefactors kappa_n, and the localization scales D_n, together
//! with the derived exponents delta, m0, m_bar and the zeta fit.
//!
//! Two regimes are supported. The `Paper` regime keeps L_n as exact big
//! integers (they are astronomically large for admissible exponents) and is
//! used only for consistency checks of the constant arithmetic. The `Desk`
//! regime relaxes the exponent so that the lengths stay small enough to
//! simulate; every Monte Carlo module consumes desk schedules.
//!
//! All multiplicative quantities are carried in log-space alongside the
//! exact integers, so nothing overflows at paper scales.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact rational exponent a = num/den. Keeping `a` rational makes the
/// schedule's power inequalities decidable in integer arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationalExp {
    pub num: u32,
    pub den: u32,
}

impl RationalExp {
    pub fn new(num: u32, den: u32) -> Self {
        assert!(num > 0 && den > 0, "exponent must be positive");
        RationalExp { num, den }
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleParams {
    /// L_0, a positive multiple of five with L_0^a >= 5.
    #[serde(serialize_with = "ser_biguint")]
    pub l0: BigUint,
    pub a: RationalExp,
    /// Hoelder exponent in (0, 1/2].
    pub beta: f64,
    /// Prefactor in kappa_n = exp(c0 (log log L_n)^2). The underlying
    /// analysis only fixes "c0 sufficiently large"; the default 1.0 is a
    /// configuration choice.
    pub c0: f64,
    /// Spatial dimension, at least 3.
    pub d: usize,
    /// Number of levels to build beyond level zero.
    pub n_max: usize,
    pub regime: Regime,
}

fn ser_biguint<S: serde::Serializer>(b: &BigUint, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&b.to_string())
}

impl ScheduleParams {
    pub fn desk(l0: u64, a: RationalExp, beta: f64, c0: f64, d: usize, n_max: usize) -> Self {
        ScheduleParams {
            l0: BigUint::from(l0),
            a,
            beta,
            c0,
            d,
            n_max,
            regime: Regime::Desk,
        }
    }

    pub fn paper(l0: BigUint, a: RationalExp, beta: f64, c0: f64, d: usize, n_max: usize) -> Self {
        ScheduleParams {
            l0,
            a,
            beta,
            c0,
            d,
            n_max,
            regime: Regime::Paper,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let five = BigUint::from(5u32);
        if self.l0.is_zero() || (&self.l0 % &five) != BigUint::zero() {
            return Err(Error::L0NotMultipleOfFive(
                self.l0.to_u64().unwrap_or(u64::MAX),
            ));
        }
        // 2a + a^2 < 1  <=>  2 num den + num^2 < den^2
        let (num, den) = (self.a.num as u64, self.a.den as u64);
        if 2 * num * den + num * num >= den * den {
            return Err(Error::ExponentDomain(self.a.value()));
        }
        assert!(
            self.beta > 0.0 && self.beta <= 0.5,
            "beta must lie in (0, 1/2]"
        );
        assert!(self.c0 > 0.0, "c0 must be positive");
        assert!(self.d >= 3, "dimension must be at least 3");
        if self.regime == Regime::Paper {
            let cap = self.beta / (1000.0 * self.d as f64);
            if self.a.value() > cap {
                return Err(Error::PaperRegimeExponent {
                    a: self.a.value(),
                    beta: self.beta,
                    d: self.d,
                });
            }
        }
        // L_0 >= 5^{1/a}  <=>  5^den <= L_0^num, checked when ell_0 is formed.
        Ok(())
    }
}

/// One level of the schedule. Exact integers plus log-space views.
#[derive(Debug, Clone, Serialize)]
pub struct ScaleLevel {
    pub n: usize,
    #[serde(serialize_with = "ser_biguint")]
    pub l: BigUint,
    #[serde(serialize_with = "ser_biguint")]
    pub ell: BigUint,
    /// ln L_n, accurate to ~1e-15 relative even for huge L_n.
    pub ln_l: f64,
    /// ln kappa_n = c0 (ln ln L_n)^2.
    pub log_kappa: f64,
    /// ln kappa_tilde_n = 2 c0 (ln ln L_n)^2.
    pub log_kappa_tilde: f64,
    /// ln D_n = ln L_n + ln kappa_n.
    pub ln_d: f64,
    /// ln D_tilde_n = ln L_n + ln kappa_tilde_n.
    pub ln_d_tilde: f64,
}

impl ScaleLevel {
    pub fn l_f64(&self) -> f64 {
        big_to_f64(&self.l)
    }

    pub fn kappa(&self) -> f64 {
        self.log_kappa.exp()
    }

    pub fn kappa_tilde(&self) -> f64 {
        self.log_kappa_tilde.exp()
    }

    pub fn d_n(&self) -> f64 {
        self.ln_d.exp()
    }

    pub fn d_tilde(&self) -> f64 {
        self.ln_d_tilde.exp()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScaleSchedule {
    pub params: ScheduleParams,
    pub levels: Vec<ScaleLevel>,
}

/// ln of a big integer via its top 64 bits; exact for small values.
pub fn big_ln(b: &BigUint) -> f64 {
    let bits = b.bits();
    if bits <= 53 {
        return b.to_f64().unwrap().ln();
    }
    let shift = bits - 53;
    let top = (b >> shift).to_f64().unwrap();
    top.ln() + shift as f64 * std::f64::consts::LN_2
}

fn big_to_f64(b: &BigUint) -> f64 {
    b.to_f64().unwrap_or(f64::INFINITY)
}

/// Largest m >= 0 with (5m)^den <= L^num, i.e. m = floor(L^a / 5).
fn floor_pow_div5(l: &BigUint, a: RationalExp) -> BigUint {
    let lhs = l.pow(a.num);
    // exponential then binary search on the exact predicate
    let ok = |m: &BigUint| (m * 5u32).pow(a.den) <= lhs;
    let mut hi = BigUint::one();
    while ok(&hi) {
        hi = &hi << 1;
    }
    let mut lo = BigUint::zero();
    while &lo + 1u32 < hi {
        let mid = (&lo + &hi) >> 1;
        if ok(&mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn kappa_logs(ln_l: f64, c0: f64) -> (f64, f64) {
    let t = ln_l.ln();
    (c0 * t * t, 2.0 * c0 * t * t)
}

/// Builds levels 0..=n_max. Deterministic; all level invariants are checked
/// in exact integer arithmetic as the levels are produced.
pub fn build_schedule(params: &ScheduleParams) -> Result<ScaleSchedule> {
    params.validate()?;
    let mut levels = Vec::with_capacity(params.n_max + 1);
    let mut l = params.l0.clone();
    for n in 0..=params.n_max {
        let m = floor_pow_div5(&l, params.a);
        if m.is_zero() {
            return Err(Error::L0TooSmall {
                l0: params.l0.to_u64().unwrap_or(u64::MAX),
                a: params.a.value(),
                ell0: 0,
            });
        }
        let ell = &m * 5u32;
        let next = &ell * &l;
        // 1/2 L_n^{1+a} <= L_{n+1}  <=>  L_n^num <= (2 ell_n)^den
        debug_assert_eq!((&ell * &l), next);
        let lower_ok = l.pow(params.a.num) <= (&ell * 2u32).pow(params.a.den);
        // L_{n+1} <= 2 L_n^{1+a}  <=>  ell_n^den <= 2^den L_n^num
        let upper_ok =
            ell.pow(params.a.den) <= (BigUint::one() << params.a.den as usize) * l.pow(params.a.num);
        assert!(
            lower_ok && upper_ok,
            "level {n}: L_{{n+1}} escaped [L_n^(1+a)/2, 2 L_n^(1+a)]"
        );
        let ln_l = big_ln(&l);
        let (log_kappa, log_kappa_tilde) = kappa_logs(ln_l, params.c0);
        levels.push(ScaleLevel {
            n,
            l: l.clone(),
            ell,
            ln_l,
            log_kappa,
            log_kappa_tilde,
            ln_d: ln_l + log_kappa,
            ln_d_tilde: ln_l + log_kappa_tilde,
        });
        l = next;
    }
    Ok(ScaleSchedule {
        params: params.clone(),
        levels,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivedExponents {
    /// delta = (5/32) beta, exactly.
    pub delta: f64,
    /// Smallest admissible M0 = 100 d (1+a)^{m0+2}. Recorded; nothing
    /// downstream consumes it.
    pub m0_min: f64,
    /// m0 with (1+a)^{m0-2} <= 100 < (1+a)^{m0-1}.
    pub m0: u32,
    /// Smallest integer strictly greater than 1 - log(1-2a-a^2)/log(1+a).
    pub m_bar: u32,
    /// Filled by `fit_zeta` in the paper regime; zero with a diagnostic
    /// otherwise.
    pub zeta: Option<f64>,
}

pub fn derive_exponents(params: &ScheduleParams) -> Result<DerivedExponents> {
    let a = params.a.value();
    let dom = 1.0 - 2.0 * a - a * a;
    if dom <= 0.0 {
        return Err(Error::ExponentDomain(a));
    }
    let delta = 5.0 / 32.0 * params.beta;
    let threshold = 1.0 - dom.ln() / (1.0 + a).ln();
    let m_bar = threshold.floor() as u32 + 1;
    let y = 100f64.ln() / (1.0 + a).ln();
    let m0 = y.floor() as u32 + 2;
    debug_assert!((1.0 + a).powi(m0 as i32 - 2) <= 100.0 + 1e-9);
    debug_assert!((1.0 + a).powi(m0 as i32 - 1) > 100.0);
    let m0_min = 100.0 * params.d as f64 * (1.0 + a).powi(m0 as i32 + 2);

    if params.regime == Regime::Paper {
        // The defining property of m_bar: L_{n+1} L_{n-m_bar} <= L_{n-1}^2
        // for every representable n >= m_bar + 1, checked exactly.
        let schedule = build_schedule(params)?;
        let mb = m_bar as usize;
        for n in (mb + 1)..schedule.levels.len().saturating_sub(1) {
            let lhs = &schedule.levels[n + 1].l * &schedule.levels[n - mb].l;
            let rhs = &schedule.levels[n - 1].l * &schedule.levels[n - 1].l;
            assert!(
                lhs <= rhs,
                "m_bar = {m_bar} fails L_(n+1) L_(n-m_bar) <= L_(n-1)^2 at n = {n}"
            );
        }
    }

    Ok(DerivedExponents {
        delta,
        m0_min,
        m0,
        m_bar,
        zeta: None,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ZetaFit {
    /// Largest zeta > 0 satisfying both displayed inequalities with C = 1
    /// across all usable levels, or zero when no positive solution exists.
    pub zeta: f64,
    /// Present when the fit degenerates; names the obstruction.
    pub diagnostic: Option<String>,
    /// Levels n over which the fit ran.
    pub levels_used: Vec<usize>,
}

/// Fits zeta from the two level inequalities
///   L_{n+1} D~_{n-m} <= L_{n-1}^{2-zeta}   and
///   k~_{n-m} L_{n-m}^{16a-delta} <= L_{n-1}^{-zeta},
/// both taken with constant one and evaluated in log-space.
pub fn fit_zeta(schedule: &ScaleSchedule, exponents: &DerivedExponents) -> Result<ZetaFit> {
    let mb = exponents.m_bar as usize;
    let a = schedule.params.a.value();
    let delta = exponents.delta;
    let n_top = schedule.levels.len().saturating_sub(1); // need level n+1
    let usable: Vec<usize> = (mb + 1..n_top).collect();
    if usable.is_empty() {
        return Err(Error::InsufficientLevels {
            needed: mb + 1,
            available: schedule.levels.len(),
        });
    }
    let mut zeta = f64::INFINITY;
    for &n in &usable {
        let lv = &schedule.levels;
        let ln_prev = lv[n - 1].ln_l;
        let b1 = 2.0 - (lv[n + 1].ln_l + lv[n - mb].ln_d_tilde) / ln_prev;
        let b2 = -(lv[n - mb].log_kappa_tilde + (16.0 * a - delta) * lv[n - mb].ln_l) / ln_prev;
        zeta = zeta.min(b1).min(b2);
    }
    let mut diagnostic = None;
    if zeta <= 0.0 {
        let mut reasons = Vec::new();
        if 16.0 * a - delta > 0.0 {
            reasons.push(format!("16a-delta = {:.4} > 0", 16.0 * a - delta));
        }
        reasons.push(format!("best log-space margin gives zeta = {zeta:.4}"));
        diagnostic = Some(reasons.join("; "));
        zeta = 0.0;
    }
    Ok(ZetaFit {
        zeta,
        diagnostic,
        levels_used: usable,
    })
}

/// CSV export: n, L_n, ell_n, log_kappa_n, D_n, D_tilde_n. L_n and ell_n are
/// decimal strings so paper-regime integers survive; D columns print `inf`
/// past f64 range (the log-space values live in the level struct).
pub fn schedule_csv(schedule: &ScaleSchedule) -> String {
    let mut out = String::from("n,L_n,ell_n,log_kappa_n,D_n,D_tilde_n\n");
    for lv in &schedule.levels {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            lv.n,
            lv.l,
            lv.ell,
            lv.log_kappa,
            lv.d_n(),
            lv.d_tilde()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_params(l0: u64, a: RationalExp) -> ScheduleParams {
        ScheduleParams::desk(l0, a, 0.5, 1.0, 3, 8)
    }

    #[test]
    fn powers_of_five_schedule() {
        // 3125^(1/5) = 5 exactly, so the first factors are all five.
        let s = build_schedule(&desk_params(3125, RationalExp::new(1, 5))).unwrap();
        assert_eq!(s.levels[0].ell, BigUint::from(5u32));
        assert_eq!(s.levels[1].l, BigUint::from(15625u32));
        assert_eq!(s.levels[2].l, BigUint::from(78125u32));
    }

    #[test]
    fn l1_is_exact_power() {
        // L_1 = L_0^{1.2} = 15625 sits inside [L_0^{1.2}/2, 2 L_0^{1.2}].
        let s = build_schedule(&desk_params(3125, RationalExp::new(1, 5))).unwrap();
        let l1 = s.levels[1].l.to_u64().unwrap();
        let bound = 3125f64.powf(1.2);
        assert_eq!(l1, 15625);
        assert!(0.5 * bound <= l1 as f64 && l1 as f64 <= 2.0 * bound);
    }

    #[test]
    fn small_l0_rejected() {
        let err = build_schedule(&desk_params(100, RationalExp::new(1, 5))).unwrap_err();
        assert!(matches!(err, Error::L0TooSmall { ell0: 0, .. }));
    }

    #[test]
    fn non_multiple_of_five_rejected() {
        let err = build_schedule(&desk_params(3126, RationalExp::new(1, 5))).unwrap_err();
        assert!(matches!(err, Error::L0NotMultipleOfFive(3126)));
    }

    #[test]
    fn exponent_domain_rejected() {
        // 2a + a^2 >= 1 for a = 1/2
        let err = build_schedule(&desk_params(3125, RationalExp::new(1, 2))).unwrap_err();
        assert!(matches!(err, Error::ExponentDomain(_)));
    }

    #[test]
    fn derived_exponents_reference_point() {
        let p = desk_params(3125, RationalExp::new(1, 5));
        let e = derive_exponents(&p).unwrap();
        // oracle: 1 - log(0.56)/log(1.2) = 4.180..., next integer up
        let threshold = 1.0 - 0.56f64.ln() / 1.2f64.ln();
        assert!(threshold > 4.0 && threshold < 5.0);
        assert_eq!(e.m_bar, 5);
        assert_eq!(e.delta, 0.078125);
        // oracle: smallest m0 with (1+a)^(m0-1) > 100 that also satisfies
        // (1+a)^(m0-2) <= 100; scan directly.
        let a = 0.2f64;
        let mut m0 = 2;
        while !((1.0 + a).powi(m0 - 2) <= 100.0 && 100.0 < (1.0 + a).powi(m0 - 1)) {
            m0 += 1;
        }
        assert_eq!(e.m0, m0 as u32);
        assert_eq!(e.m0, 27);
    }

    #[test]
    fn m_bar_monotone_in_a() {
        let grid = [
            RationalExp::new(1, 20),
            RationalExp::new(1, 10),
            RationalExp::new(1, 5),
            RationalExp::new(3, 10),
        ];
        let mut last = 0;
        for a in grid {
            // L0 irrelevant for the exponents; pick one valid per a
            let p = ScheduleParams::desk(5u64.pow(a.den / a.num + 1), a, 0.5, 1.0, 3, 1);
            let e = derive_exponents(&p).unwrap();
            assert!(e.m_bar >= last, "m_bar not monotone at a = {}", a.value());
            last = e.m_bar;
        }
    }

    #[test]
    fn schedule_invariants_exact() {
        for (l0, a) in [
            (3125u64, RationalExp::new(1, 5)),
            (60, RationalExp::new(2, 5)),
            (100, RationalExp::new(7, 20)),
        ] {
            let s = build_schedule(&ScheduleParams::desk(l0, a, 0.5, 1.0, 3, 8)).unwrap();
            for w in s.levels.windows(2) {
                let (cur, next) = (&w[0], &w[1]);
                assert!(cur.ell >= BigUint::from(5u32));
                assert_eq!(&cur.ell % 5u32, BigUint::zero());
                assert_eq!(&cur.ell * &cur.l, next.l);
                // exact bracket: L_n^num <= (2 ell)^den and ell^den <= 2^den L_n^num
                assert!(cur.l.pow(a.num) <= (&cur.ell * 2u32).pow(a.den));
                assert!(
                    cur.ell.pow(a.den) <= (BigUint::one() << a.den as usize) * cur.l.pow(a.num)
                );
            }
        }
    }

    #[test]
    fn kappa_dominated_by_any_power() {
        // log kappa_n - p ln L_n strictly decreasing past a computed index
        let s = build_schedule(&ScheduleParams::desk(60, RationalExp::new(2, 5), 0.5, 1.0, 3, 20))
            .unwrap();
        let p = 0.1;
        let vals: Vec<f64> = s
            .levels
            .iter()
            .map(|lv| lv.log_kappa - p * lv.ln_l)
            .collect();
        let first_drop = vals
            .windows(2)
            .position(|w| w[1] < w[0])
            .expect("sequence never starts decreasing");
        for w in vals[first_drop..].windows(2) {
            assert!(w[1] < w[0], "kappa/L^p not eventually decreasing");
        }
    }

    #[test]
    fn paper_regime_big_integer_levels() {
        // a = 1/6000 = beta/(1000 d) for beta = 1/2, d = 3; L0 = 5^6000.
        let a = RationalExp::new(1, 6000);
        let l0 = BigUint::from(5u32).pow(6000u32);
        let p = ScheduleParams::paper(l0, a, 0.5, 1.0, 3, 7);
        let s = build_schedule(&p).unwrap();
        // every factor is exactly five at these sizes, so L_n = 5^(6000+n)
        for (n, lv) in s.levels.iter().enumerate() {
            assert_eq!(lv.ell, BigUint::from(5u32));
            assert_eq!(lv.l, BigUint::from(5u32).pow(6000 + n as u32));
        }
        let e = derive_exponents(&p).unwrap();
        assert_eq!(e.m_bar, 4);
    }

    #[test]
    fn zeta_desk_regime_degenerates_with_diagnostic() {
        let p = desk_params(3125, RationalExp::new(1, 5));
        let s = build_schedule(&p).unwrap();
        let e = derive_exponents(&p).unwrap();
        // 16a - delta = 3.2 - 0.078 > 0: no positive zeta can exist
        let fit = fit_zeta(&s, &e).unwrap();
        assert_eq!(fit.zeta, 0.0);
        assert!(fit.diagnostic.unwrap().contains("16a-delta"));
    }

    #[test]
    fn zeta_needs_levels_beyond_m_bar() {
        let p = desk_params(3125, RationalExp::new(1, 5));
        let mut s = build_schedule(&p).unwrap();
        s.levels.truncate(1);
        let e = derive_exponents(&p).unwrap();
        assert!(matches!(
            fit_zeta(&s, &e),
            Err(Error::InsufficientLevels { .. })
        ));
    }

    #[test]
    fn zeta_positive_in_paper_regime_with_small_c0() {
        // With c0 = 1 the kappa~ factor swamps the single factor-of-five
        // margin in L_{n+1} L_{n-m} <= L_{n-1}^2 at reachable levels, so the
        // strict C = 1 fit only clears zero for small c0.
        let a = RationalExp::new(1, 6000);
        let l0 = BigUint::from(5u32).pow(6000u32);
        let p = ScheduleParams::paper(l0, a, 0.5, 1e-3, 3, 7);
        let s = build_schedule(&p).unwrap();
        let e = derive_exponents(&p).unwrap();
        let fit = fit_zeta(&s, &e).unwrap();
        assert!(fit.zeta > 0.0, "zeta = {}", fit.zeta);
        assert!(fit.diagnostic.is_none());
        assert_eq!(fit.levels_used, vec![5, 6]);
    }

    #[test]
    fn big_ln_accuracy() {
        let b = BigUint::from(5u32).pow(6000u32);
        let expect = 6000.0 * 5f64.ln();
        assert!((big_ln(&b) - expect).abs() / expect < 1e-14);
    }

    #[test]
    fn csv_has_expected_header_and_rows() {
        let s = build_schedule(&desk_params(3125, RationalExp::new(1, 5))).unwrap();
        let csv = schedule_csv(&s);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "n,L_n,ell_n,log_kappa_n,D_n,D_tilde_n"
        );
        assert!(lines.next().unwrap().starts_with("0,3125,5,"));
    }
}
