//! Chernoff tail-bound inverters.
//!
//! Four maps are provided. [`expected_lower`] and [`expected_upper`] turn an
//! observed count `X` into bounds on its expectation, `X/(1+δ₁)` and
//! `X/(1-δ₂)`. [`real_lower`] and [`real_upper`] go the other way and bound
//! the realised value of a sum of independent Bernoulli trials from its
//! expectation `Y`, `(1-δ₂')Y` and `(1+δ₁')Y`.
//!
//! Every defining equation is solved in the log domain. Writing the bound as
//! a ratio to its argument collapses all four onto two convex gap functions:
//!
//! * expectation bounds: `X·(r - 1 - ln r) = ln(1/ξ)` with `r = E/X`,
//! * realisation bounds: `Y·(q ln q - q + 1) = ln(1/ξ)` with `q = O/Y`,
//!
//! taking the root below or above 1 for the lower or upper map. Both gap
//! functions are monotone on either side of 1, so bracketed bisection always
//! converges; a couple of Newton steps then polish the root.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ITER: usize = 200;
const REL_TOL: f64 = 1e-14;
const SERIES_CUTOFF: f64 = 1e-2;

/// Failure probability consumed by a single bound evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailConfig {
    xi: f64,
}

impl TailConfig {
    pub fn new(xi: f64) -> Result<Self> {
        if !(xi > 0.0 && xi < 1.0) {
            return Err(Error::invalid("xi", format!("{xi} is outside (0, 1)")));
        }
        Ok(Self { xi })
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    /// `ln(1/ξ)`, the right-hand side of every defining equation.
    pub fn log_inv(&self) -> f64 {
        -self.xi.ln()
    }
}

/// `d - ln(1+d)`, accurate near `d = 0`.
pub(crate) fn log_gap(d: f64) -> f64 {
    if d.abs() < SERIES_CUTOFF {
        // sum_{k>=2} (-1)^k d^k / k
        let mut term = d * d;
        let mut acc = 0.0;
        for k in 2..16 {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * term / k as f64;
            term *= d;
        }
        acc
    } else {
        d - d.ln_1p()
    }
}

/// `e^s - 1 - s`, the expectation gap in terms of `s = ln r`.
///
/// Going through `d = e^s - 1` loses the sign of the gap when `r` is close
/// to 0, where `ln(1+d)` is evaluated at the edge of its precision.
fn exp_gap(s: f64) -> f64 {
    if s.abs() < SERIES_CUTOFF {
        let mut term = s * s / 2.0;
        let mut acc = 0.0;
        for k in 3..18 {
            acc += term;
            term *= s / k as f64;
        }
        acc
    } else {
        s.exp_m1() - s
    }
}

/// `(1+d) ln(1+d) - d`, accurate near `d = 0` and equal to 1 at `d = -1`.
pub(crate) fn entropy_gap(d: f64) -> f64 {
    if d.abs() < SERIES_CUTOFF {
        // sum_{k>=2} (-1)^k d^k / (k (k-1))
        let mut term = d * d;
        let mut acc = 0.0;
        for k in 2..16 {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * term / (k * (k - 1)) as f64;
            term *= d;
        }
        acc
    } else if d <= -1.0 {
        1.0
    } else {
        (1.0 + d) * d.ln_1p() - d
    }
}

fn check_input(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Domain(format!("{name} must be finite and >= 0, got {v}")));
    }
    Ok(())
}

/// Finds `t` in `[lo, hi]` with `f(t) = 0`, where `f` changes sign on the bracket.
/// `df` is used only for the final Newton polish.
fn solve_bracketed<F, D>(f: F, df: D, mut lo: f64, mut hi: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let mut f_lo = f(lo);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f(hi) == 0.0 {
        return Ok(hi);
    }
    let mut converged = false;
    for _ in 0..MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if (f_mid > 0.0) == (f_lo > 0.0) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
        if hi - lo <= REL_TOL * lo.abs().max(hi.abs()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SolverFailure {
            iterations: MAX_ITER,
            lo,
            hi,
        });
    }
    let mut t = 0.5 * (lo + hi);
    let mut ft = f(t);
    for _ in 0..3 {
        let slope = df(t);
        if slope == 0.0 || !slope.is_finite() {
            break;
        }
        let next = t - ft / slope;
        if !(next >= lo && next <= hi) {
            break;
        }
        let f_next = f(next);
        if f_next.abs() >= ft.abs() {
            break;
        }
        t = next;
        ft = f_next;
    }
    Ok(t)
}

/// Smallest power-of-two multiple of `start` where `g` reaches `target`.
fn expand_upper<G: Fn(f64) -> f64>(g: G, start: f64, target: f64) -> Result<f64> {
    let mut hi = start.max(f64::MIN_POSITIVE);
    for _ in 0..2048 {
        if g(hi) >= target {
            return Ok(hi);
        }
        hi *= 2.0;
    }
    Err(Error::SolverFailure {
        iterations: 2048,
        lo: 0.0,
        hi,
    })
}

/// Lower bound on the expectation of an observed count, `E^L(X) = X/(1+δ₁)`.
pub fn expected_lower(x: f64, cfg: &TailConfig) -> Result<f64> {
    check_input("observed count", x)?;
    if x == 0.0 {
        return Ok(0.0);
    }
    let c = cfg.log_inv() / x;
    // s = ln(E/X) in (-(c+1), 0); gap(s) = e^s - 1 - s decreases in s.
    let s = solve_bracketed(
        |s| exp_gap(s) - c,
        |s| s.exp_m1(),
        -(c + 1.0),
        0.0,
    )?;
    Ok(x * s.exp())
}

/// Upper bound on the expectation of an observed count, `E^U(X) = X/(1-δ₂)`.
///
/// A zero count uses the Poisson zero-count bound `ln(1/ξ)`, which is also the
/// `X → 0` limit of the defining equation.
pub fn expected_upper(x: f64, cfg: &TailConfig) -> Result<f64> {
    check_input("observed count", x)?;
    if x == 0.0 {
        return Ok(cfg.log_inv());
    }
    let c = cfg.log_inv() / x;
    // d = E/X - 1 > 0
    let hi = expand_upper(log_gap, (2.0 * c).sqrt().max(c), c)?;
    let d = solve_bracketed(|d| log_gap(d) - c, |d| d / (1.0 + d), 0.0, hi)?;
    Ok(x * (1.0 + d))
}

/// Upper bound on the realised value of a sum with expectation `y`, `O^U(Y) = (1+δ₁')Y`.
pub fn real_upper(y: f64, cfg: &TailConfig) -> Result<f64> {
    check_input("expected value", y)?;
    if y == 0.0 {
        return Ok(0.0);
    }
    let c = cfg.log_inv() / y;
    let hi = expand_upper(entropy_gap, (2.0 * c).sqrt().max(1.0), c)?;
    let d = solve_bracketed(|d| entropy_gap(d) - c, |d| d.ln_1p(), 0.0, hi)?;
    Ok(y * (1.0 + d))
}

/// Lower bound on the realised value of a sum with expectation `y`, `O^L(Y) = (1-δ₂')Y`.
///
/// Returns 0 when the defining equation has no root with `δ₂' < 1`, i.e. when
/// `y ≤ ln(1/ξ)`.
pub fn real_lower(y: f64, cfg: &TailConfig) -> Result<f64> {
    check_input("expected value", y)?;
    let c = cfg.log_inv() / y;
    if y == 0.0 || c >= 1.0 {
        return Ok(0.0);
    }
    // q = O/Y in (0, 1); Y·(q ln q - q + 1) decreases from Y to 0.
    let q = solve_bracketed(
        |q| entropy_gap(q - 1.0) - c,
        |q| if q > 0.0 { q.ln() } else { f64::NEG_INFINITY },
        0.0,
        1.0,
    )?;
    Ok(y * q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> TailConfig {
        TailConfig::new(1e-10).unwrap()
    }

    #[test]
    fn expected_lower_near_zero_ratio() {
        // c = ln(1/ξ)/X is large, so the root sits at E/X ≈ e^{-(c+1)}
        let c = TailConfig::new(3.3641933948920615e-12).unwrap();
        let x = 1.07530472726026;
        let e = expected_lower(x, &c).unwrap();
        let r = e / x;
        assert!(e > 0.0 && e < 1e-10, "{e}");
        assert_relative_eq!(x * (r - 1.0 - r.ln()), c.log_inv(), max_relative = 1e-12);
    }

    #[test]
    fn rejects_bad_xi() {
        assert!(TailConfig::new(0.0).is_err());
        assert!(TailConfig::new(1.0).is_err());
        assert!(TailConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn gap_series_matches_closed_form_at_cutoff() {
        for d in [-0.0099, -0.005, 0.005, 0.0099] {
            assert_relative_eq!(log_gap(d), d - d.ln_1p(), max_relative = 1e-9);
            assert_relative_eq!(
                entropy_gap(d),
                (1.0 + d) * d.ln_1p() - d,
                max_relative = 1e-9
            );
        }
        assert_eq!(entropy_gap(-1.0), 1.0);
    }

    #[test]
    fn zero_inputs() {
        assert_eq!(expected_lower(0.0, &cfg()).unwrap(), 0.0);
        assert_relative_eq!(expected_upper(0.0, &cfg()).unwrap(), 23.025850929940457);
        assert_eq!(real_upper(0.0, &cfg()).unwrap(), 0.0);
        assert_eq!(real_lower(0.0, &cfg()).unwrap(), 0.0);
    }

    #[test]
    fn negative_and_nan_rejected() {
        assert!(matches!(expected_lower(-1.0, &cfg()), Err(Error::Domain(_))));
        assert!(matches!(real_upper(f64::NAN, &cfg()), Err(Error::Domain(_))));
    }

    #[test]
    fn small_expectation_clamps_real_lower() {
        assert_eq!(real_lower(5.0, &cfg()).unwrap(), 0.0);
        assert_eq!(real_lower(23.0, &cfg()).unwrap(), 0.0);
        assert!(real_lower(23.1, &cfg()).unwrap() > 0.0);
    }

    #[test]
    fn vanishing_confidence_penalty() {
        let loose = TailConfig::new(0.999999).unwrap();
        assert_relative_eq!(expected_upper(100.0, &loose).unwrap(), 100.0, max_relative = 2e-3);
        assert_relative_eq!(expected_lower(100.0, &loose).unwrap(), 100.0, max_relative = 2e-3);
    }

    #[test]
    fn extreme_counts_converge() {
        for x in [1e-9, 1e-3, 1.0, 1e13, 1e18] {
            let lo = expected_lower(x, &cfg()).unwrap();
            let hi = expected_upper(x, &cfg()).unwrap();
            assert!(lo < x && x < hi, "x={x} lo={lo} hi={hi}");
            let ru = real_upper(x, &cfg()).unwrap();
            assert!(ru > x);
        }
    }
}
