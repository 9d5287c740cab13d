//! Decoy-state bounds with fluctuating sources.
//!
//! Observed counting rates are first turned into Chernoff intervals on their
//! expectations ([`rate_bounds`]). The single-photon yields of the `|01⟩` and
//! `|10⟩` states then follow from the two-decoy elimination of the
//! multi-photon terms, taking the worst endpoint of every photon-number
//! coefficient of the fluctuating second decoy source. The untagged yield,
//! the phase-error bound and the untagged-bit counts are built on top.

use serde::{Deserialize, Serialize};

use crate::bounds::{self, TailConfig};
use crate::channel::ObservedStats;
use crate::error::{Error, Result};
use crate::protocol::{poisson_coeff, poisson_coeff_bounds, Interval, ProtocolParams, TaggedDecomposition, VirtualIntensities, VirtualSide};

/// Where the vacuum counting rate `⟨S₀₀⟩` is estimated from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VacuumEstimate {
    /// Only the announced vacuum pairs `N₀₀`.
    #[default]
    Announced,
    /// Every window where both parties emitted vacuum, Z windows included.
    AllVacuumWindows,
}

/// Chernoff intervals on the expected counting rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBounds {
    pub s00: Interval,
    pub s01_l: f64,
    pub s10_l: f64,
    pub s02_u: f64,
    pub s20_u: f64,
    /// Upper bound of `⟨T_X⟩ = ⟨M_X⟩/N_X`.
    pub tx_u: f64,
    /// Pulse counts `N₀₁`, `N₁₀` used by the outlier correction.
    pub n01: u64,
    pub n10: u64,
}

impl RateBounds {
    /// Copy with the vacuum interval collapsed to `s00`.
    pub fn with_vacuum(&self, s00: f64) -> Self {
        Self {
            s00: Interval::point(s00),
            ..*self
        }
    }

    /// Number of Chernoff evaluations behind these bounds.
    pub const CHERNOFF_CALLS: u32 = 7;
}

fn rate(count: u64, pulses: u64, label: &'static str, f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    if pulses == 0 {
        return Err(Error::MissingStatistics(label));
    }
    Ok(f(count as f64)? / pulses as f64)
}

pub fn rate_bounds(o: &ObservedStats, cfg: &TailConfig, vacuum: VacuumEstimate) -> Result<RateBounds> {
    let lower = |x| bounds::expected_lower(x, cfg);
    let upper = |x| bounds::expected_upper(x, cfg);
    let (vac_count, vac_pulses) = match vacuum {
        VacuumEstimate::Announced => (o.heralds.n00, o.pulses.n00),
        VacuumEstimate::AllVacuumWindows => (o.n_vacuum_heralds, o.n_vacuum_pulses),
    };
    Ok(RateBounds {
        s00: Interval::new(
            rate(vac_count, vac_pulses, "00", lower)?,
            rate(vac_count, vac_pulses, "00", upper)?,
        ),
        s01_l: rate(o.heralds.n01, o.pulses.n01, "01", lower)?,
        s10_l: rate(o.heralds.n10, o.pulses.n10, "10", lower)?,
        s02_u: rate(o.heralds.n02, o.pulses.n02, "02", upper)?,
        s20_u: rate(o.heralds.n20, o.pulses.n20, "20", upper)?,
        tx_u: rate(o.m_x, o.n_x, "x", upper)?,
        n01: o.pulses.n01,
        n10: o.pulses.n10,
    })
}

/// Photon-number weights of one party's decoy sources, `k = 0, 1, 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoyCoefficients {
    /// Stable virtual source 1 at `μ₁^U`.
    pub stable: [f64; 3],
    /// Fluctuating virtual source 2 over its intensity range.
    pub fluctuating: [Interval; 3],
}

impl DecoyCoefficients {
    pub fn new(v: &VirtualSide) -> Self {
        Self {
            stable: [0, 1, 2].map(|k| poisson_coeff(v.mu_1_u, k)),
            fluctuating: [0, 1, 2].map(|k| poisson_coeff_bounds(v.mu_2, k)),
        }
    }
}

/// A bound that may have been clamped into its admissible range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clamped {
    pub value: f64,
    pub clamped: bool,
}

impl Clamped {
    fn nonnegative(raw: f64) -> Self {
        if raw < 0.0 {
            Self { value: 0.0, clamped: true }
        } else {
            Self { value: raw, clamped: false }
        }
    }

    fn error_rate(raw: f64) -> Self {
        let value = raw.clamp(0.0, 0.5);
        Self {
            value,
            clamped: value != raw,
        }
    }
}

/// Two-decoy elimination: lower bound on the single-photon yield of one side.
fn single_photon_yield(s1_l: f64, s2_u: f64, s00_u: f64, c: &DecoyCoefficients) -> Result<Clamped> {
    let [c0, c1, c2] = c.stable;
    let [f0, f1, f2] = c.fluctuating;
    let den = c1 * f2.lo - c2 * f1.lo;
    if !(den > 0.0) {
        return Err(Error::NonPositiveDenominator(den));
    }
    let num = f2.lo * s1_l - c2 * s2_u - (c0 * f2.lo - c2 * f0.lo) * s00_u;
    Ok(Clamped::nonnegative(num / den))
}

/// `⟨s₁₀⟩^L` from Alice's decoy coefficients.
pub fn s10_lower(rb: &RateBounds, coeffs_a: &DecoyCoefficients) -> Result<Clamped> {
    single_photon_yield(rb.s10_l, rb.s20_u, rb.s00.hi, coeffs_a)
}

/// `⟨s₀₁⟩^L` from Bob's decoy coefficients.
pub fn s01_lower(rb: &RateBounds, coeffs_b: &DecoyCoefficients) -> Result<Clamped> {
    single_photon_yield(rb.s01_l, rb.s02_u, rb.s00.hi, coeffs_b)
}

/// `⟨s₁₀⟩^L` when up to `n_delta` windows may lie outside the fluctuation box.
pub fn s10_lower_outlier(rb: &RateBounds, coeffs_a: &DecoyCoefficients, n_delta: u64, n_10: u64) -> Result<Clamped> {
    single_photon_yield(rb.s10_l - n_delta as f64 / n_10 as f64, rb.s20_u, rb.s00.hi, coeffs_a)
}

pub fn s01_lower_outlier(rb: &RateBounds, coeffs_b: &DecoyCoefficients, n_delta: u64, n_01: u64) -> Result<Clamped> {
    single_photon_yield(rb.s01_l - n_delta as f64 / n_01 as f64, rb.s02_u, rb.s00.hi, coeffs_b)
}

/// Untagged yield: the `μ₁^U`-weighted mixture of the two single-sided yields.
pub fn s1_lower(s10_l: f64, s01_l: f64, v: &VirtualIntensities) -> Result<f64> {
    let (ma, mb) = (v.alice.mu_1_u, v.bob.mu_1_u);
    let sum = ma + mb;
    if !(sum > 0.0) {
        return Err(Error::Domain("both virtual decoy intensities are zero".into()));
    }
    Ok(ma / sum * s10_l + mb / sum * s01_l)
}

fn phase_error_mean(tx_u: f64, vacuum_term: f64, s1_l: f64, v: &VirtualIntensities) -> Result<Clamped> {
    if !(s1_l > 0.0) {
        return Err(Error::UndefinedBound("untagged yield lower bound is zero"));
    }
    let sum = v.mu_1_sum();
    let damp = (-v.alice.mu_1_u - v.bob.mu_1_u).exp();
    Ok(Clamped::error_rate((tx_u - damp * vacuum_term / 2.0) / (damp * sum * s1_l)))
}

/// `⟨e₁^ph⟩^U` from the X-window error rate with the vacuum contribution removed.
pub fn e1ph_mean_upper(rb: &RateBounds, s1_l: f64, v: &VirtualIntensities) -> Result<Clamped> {
    phase_error_mean(rb.tx_u, rb.s00.lo, s1_l, v)
}

/// `⟨e₁^ph⟩^U` with the vacuum counts taken as zero.
pub fn e1ph_mean_upper_novacuum(rb: &RateBounds, s1_l: f64, v: &VirtualIntensities) -> Result<Clamped> {
    phase_error_mean(rb.tx_u, 0.0, s1_l, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UntaggedCounts {
    /// `⟨n₁⟩^L`
    pub n1_mean_lower: f64,
    /// `n₁^L = O^L(⟨n₁⟩^L)`
    pub n1_lower: f64,
    /// `⟨n_{u1}⟩^L`, untagged bits from Alice's single photons.
    pub nu1_mean_lower: f64,
    /// `⟨n_{u0}⟩^L`, untagged bits from Bob's single photons.
    pub nu0_mean_lower: f64,
}

pub fn untagged_counts(
    p: &ProtocolParams,
    td: &TaggedDecomposition,
    s10_l: f64,
    s01_l: f64,
    s1_l: f64,
    cfg: &TailConfig,
) -> Result<UntaggedCounts> {
    let (ea, eb) = (p.alice.eps, p.bob.eps);
    let zz = p.n_total * p.alice.p_z * p.bob.p_z;
    let n1_mean_lower = zz * (ea * (1.0 - eb) * td.c_az1 + eb * (1.0 - ea) * td.c_bz1) * s1_l;
    Ok(UntaggedCounts {
        n1_mean_lower,
        n1_lower: bounds::real_lower(n1_mean_lower, cfg)?,
        nu1_mean_lower: zz * ea * (1.0 - eb) * td.c_az1 * s10_l,
        nu0_mean_lower: zz * eb * (1.0 - ea) * td.c_bz1 * s01_l,
    })
}

/// `e₁^{ph,U} = O^U(n₁^L⟨e₁^ph⟩^U)/n₁^L`.
pub fn e1ph_real_upper(n1_lower: f64, e1ph_mean_upper: f64, cfg: &TailConfig) -> Result<Clamped> {
    if !(n1_lower > 0.0) {
        return Err(Error::UndefinedBound("untagged-bit lower bound is zero"));
    }
    let errors = bounds::real_upper(n1_lower * e1ph_mean_upper, cfg)?;
    Ok(Clamped::error_rate(errors / n1_lower))
}

/// Inputs of the three-intensity BB84 single-photon bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bb84Counts {
    /// `⟨N₀⟩^U`, vacuum-source counts.
    pub vacuum_u: f64,
    /// `⟨N_x⟩^L`, decoy-source counts.
    pub decoy_l: f64,
    /// `⟨N_y⟩^U`, signal-source counts.
    pub signal_u: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bb84Probabilities {
    pub p_o: f64,
    pub p_x: f64,
    pub p_y: f64,
}

/// Lower bound on `⟨n₁^y⟩`, the signal-source single-photon counts of a
/// three-intensity decoy BB84 source with intensity ranges `decoy` and `signal`.
///
/// The decoy counts are rescaled by `p_y/p_x`, which is the identity for the
/// equal-probability setting the printed bound assumes.
pub fn bb84_n1y_lower(counts: &Bb84Counts, decoy: Interval, signal: Interval, probs: &Bb84Probabilities) -> Result<f64> {
    let ax = [0, 1, 2].map(|k| poisson_coeff_bounds(decoy, k));
    let ay = [0, 1, 2].map(|k| poisson_coeff_bounds(signal, k));
    let den = ax[1].hi * ay[2].lo - ay[1].lo * ax[2].hi;
    if !(den > 0.0) {
        return Err(Error::NonPositiveDenominator(den));
    }
    let n_x = counts.decoy_l * probs.p_y / probs.p_x;
    let num = ay[1].lo
        * (ay[2].lo * n_x
            - ax[2].hi * counts.signal_u
            - (ay[2].lo * ax[0].hi - ax[2].hi * ay[0].lo) * counts.vacuum_u * probs.p_y / probs.p_o);
    Ok((num / den).max(0.0))
}

/// Which vacuum and outlier treatment the bound chain uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DecoyOptions {
    pub vacuum: VacuumEstimate,
    /// Outlier-tolerant mode: at most this many windows left the fluctuation box.
    pub outlier: Option<u64>,
}

/// Every decoy-state bound needed by the key-rate formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoyBounds {
    pub s10_lower: Clamped,
    pub s01_lower: Clamped,
    pub s1_lower: f64,
    pub e1ph_mean_upper: Clamped,
    pub untagged: UntaggedCounts,
    pub e1ph_real_upper: Clamped,
}

impl DecoyBounds {
    /// Bounds when no untagged yield can be certified.
    pub fn zero_yield(s10: Clamped, s01: Clamped, s1: f64) -> Self {
        Self {
            s10_lower: s10,
            s01_lower: s01,
            s1_lower: s1,
            e1ph_mean_upper: Clamped { value: 0.5, clamped: true },
            untagged: UntaggedCounts {
                n1_mean_lower: 0.0,
                n1_lower: 0.0,
                nu1_mean_lower: 0.0,
                nu0_mean_lower: 0.0,
            },
            e1ph_real_upper: Clamped { value: 0.5, clamped: true },
        }
    }

    pub fn certified(&self) -> bool {
        self.untagged.n1_lower > 0.0 && self.s1_lower > 0.0
    }
}

pub fn decoy_bounds(
    p: &ProtocolParams,
    v: &VirtualIntensities,
    td: &TaggedDecomposition,
    rb: &RateBounds,
    opts: &DecoyOptions,
    cfg: &TailConfig,
) -> Result<DecoyBounds> {
    let ca = DecoyCoefficients::new(&v.alice);
    let cb = DecoyCoefficients::new(&v.bob);
    let (s10, s01) = match opts.outlier {
        None => (s10_lower(rb, &ca)?, s01_lower(rb, &cb)?),
        Some(n_delta) => (
            s10_lower_outlier(rb, &ca, n_delta, rb.n10)?,
            s01_lower_outlier(rb, &cb, n_delta, rb.n01)?,
        ),
    };
    let s1 = s1_lower(s10.value, s01.value, v)?;
    if !(s1 > 0.0) {
        return Ok(DecoyBounds::zero_yield(s10, s01, s1));
    }
    let e_mean = match opts.outlier {
        None => e1ph_mean_upper(rb, s1, v)?,
        Some(_) => e1ph_mean_upper_novacuum(rb, s1, v)?,
    };
    let untagged = untagged_counts(p, td, s10.value, s01.value, s1, cfg)?;
    if !(untagged.n1_lower > 0.0) {
        return Ok(DecoyBounds {
            untagged,
            ..DecoyBounds::zero_yield(s10, s01, s1)
        });
    }
    let e_real = e1ph_real_upper(untagged.n1_lower, e_mean.value, cfg)?;
    Ok(DecoyBounds {
        s10_lower: s10,
        s01_lower: s01,
        s1_lower: s1,
        e1ph_mean_upper: e_mean,
        untagged,
        e1ph_real_upper: e_real,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::virtual_intensities;
    use approx::assert_relative_eq;

    fn cfg() -> TailConfig {
        TailConfig::new(1e-10).unwrap()
    }

    fn toy_rates() -> RateBounds {
        RateBounds {
            s00: Interval::new(1.5e-8, 2.5e-8),
            s01_l: 4.0e-5,
            s10_l: 4.0e-5,
            s02_u: 1.7e-4,
            s20_u: 1.7e-4,
            tx_u: 1.2e-6,
            n01: 1_000_000_000,
            n10: 1_000_000_000,
        }
    }

    fn sides(delta: f64) -> (VirtualIntensities, DecoyCoefficients) {
        let mut p = ProtocolParams::default();
        p.set_delta(delta);
        p.alice.mu_1 = 0.1;
        p.alice.mu_2 = 0.4;
        let v = virtual_intensities(&p).unwrap();
        let c = DecoyCoefficients::new(&v.alice);
        (v, c)
    }

    #[test]
    fn zero_rates_give_zero_yield() {
        let (_, c) = sides(0.0);
        let rb = RateBounds {
            s00: Interval::point(0.0),
            s01_l: 0.0,
            s10_l: 0.0,
            s02_u: 0.0,
            s20_u: 0.0,
            tx_u: 0.0,
            n01: 1,
            n10: 1,
        };
        assert_eq!(s10_lower(&rb, &c).unwrap().value, 0.0);
    }

    #[test]
    fn stable_yield_matches_textbook_decoy_bound() {
        // vacuum + two decoys with intensities ν < μ:
        // Y1 ≥ μ/(μν - ν²)·(Q_ν e^ν - Q_μ e^μ ν²/μ² - (μ² - ν²)/μ²·Y0)
        let (_, c) = sides(0.0);
        let (nu, mu) = (0.1f64, 0.4f64);
        // vacuum yield y0, n-photon yield 1-(1-η)^n
        let (y0, eta) = (2e-8, 3e-4);
        let gain = |m: f64| y0 * (-m).exp() + (1.0 - (-eta * m).exp());
        let rb = RateBounds {
            s00: Interval::point(y0),
            s10_l: gain(nu),
            s20_u: gain(mu),
            ..toy_rates()
        };
        let ours = s10_lower(&rb, &c).unwrap().value;
        let textbook = mu / (mu * nu - nu * nu)
            * (gain(nu) * nu.exp() - gain(mu) * mu.exp() * nu * nu / (mu * mu) - (mu * mu - nu * nu) / (mu * mu) * y0);
        assert_relative_eq!(ours, textbook, max_relative = 1e-10);
        // the elimination is a lower bound on the true single-photon yield
        assert!(ours <= eta && ours > 0.97 * eta);
    }

    #[test]
    fn fluctuation_lowers_yield() {
        let (_, c0) = sides(0.0);
        let (_, c5) = sides(0.05);
        let rb = toy_rates();
        let y0 = s10_lower(&rb, &c0).unwrap().value;
        let y5 = s10_lower(&rb, &c5).unwrap().value;
        assert!(y5 <= y0, "{y5} > {y0}");
    }

    #[test]
    fn mirror_sides_agree_on_symmetric_input() {
        let (v, _) = sides(0.02);
        let rb = toy_rates();
        let a = s10_lower(&rb, &DecoyCoefficients::new(&v.alice)).unwrap();
        let b = s01_lower(&rb, &DecoyCoefficients::new(&v.alice)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn collapsed_decoys_are_rejected() {
        let mut p = ProtocolParams::default();
        p.set_delta(0.3);
        p.alice.mu_1 = 0.1;
        p.alice.mu_2 = 0.11;
        let v = virtual_intensities(&p).unwrap();
        let c = DecoyCoefficients::new(&v.alice);
        assert!(matches!(s10_lower(&toy_rates(), &c), Err(Error::NonPositiveDenominator(_))));
    }

    #[test]
    fn s1_lower_examples() {
        let (mut v, _) = sides(0.0);
        assert_relative_eq!(s1_lower(2e-4, 2e-4, &v).unwrap(), 2e-4, max_relative = 1e-15);
        v.alice.mu_1_u = 0.02;
        v.bob.mu_1_u = 0.04;
        assert_relative_eq!(s1_lower(1e-4, 2e-4, &v).unwrap(), 1.6666666666666666e-4, max_relative = 1e-14);
        v.bob.mu_1_u = 0.02;
        assert_relative_eq!(s1_lower(1e-4, 3e-4, &v).unwrap(), 2e-4, max_relative = 1e-14);
        v.alice.mu_1_u = 0.0;
        v.bob.mu_1_u = 0.0;
        assert!(s1_lower(1e-4, 3e-4, &v).is_err());
    }

    #[test]
    fn phase_error_examples() {
        let (mut v, _) = sides(0.0);
        v.alice.mu_1_u = 0.03;
        v.bob.mu_1_u = 0.03;
        let mut rb = toy_rates();
        rb.s00 = Interval::point(0.0);
        rb.tx_u = 1e-5;
        let e = e1ph_mean_upper(&rb, 1e-3, &v).unwrap();
        let expect = 1e-5 / ((-0.06f64).exp() * 0.06 * 1e-3);
        assert_relative_eq!(e.value, expect, max_relative = 1e-14);
        assert_relative_eq!(e.value, 0.177, max_relative = 2e-3);
        assert_eq!(e1ph_mean_upper_novacuum(&rb, 1e-3, &v).unwrap(), e);

        rb.s00 = Interval::point(2e-5 / (-0.06f64).exp());
        let zero = e1ph_mean_upper(&rb, 1e-3, &v).unwrap();
        assert!(zero.value.abs() < 1e-15);
        assert!(e1ph_mean_upper_novacuum(&rb, 1e-3, &v).unwrap().value >= zero.value);
        assert!(matches!(e1ph_mean_upper(&rb, 0.0, &v), Err(Error::UndefinedBound(_))));
    }

    #[test]
    fn phase_error_clamps_with_flag() {
        let (v, _) = sides(0.0);
        let mut rb = toy_rates();
        rb.tx_u = 1.0;
        let e = e1ph_mean_upper(&rb, 1e-9, &v).unwrap();
        assert_eq!(e.value, 0.5);
        assert!(e.clamped);
    }

    #[test]
    fn real_phase_error_widening() {
        let cfg = cfg();
        assert_eq!(e1ph_real_upper(1e6, 0.0, &cfg).unwrap().value, 0.0);
        let big = e1ph_real_upper(1e8, 0.05, &cfg).unwrap();
        assert!(big.value > 0.05 && big.value < 0.0505, "{big:?}");
        let small = e1ph_real_upper(100.0, 0.05, &cfg).unwrap();
        assert!(small.value > 0.2 || small.clamped, "{small:?}");
        assert!(e1ph_real_upper(0.0, 0.05, &cfg).is_err());
    }

    #[test]
    fn untagged_counts_examples() {
        let cfg = cfg();
        let p = ProtocolParams::default();
        let v = virtual_intensities(&p).unwrap();
        let td = crate::protocol::tagged_decomposition(&p, &v).unwrap();
        let z = untagged_counts(&p, &td, 0.0, 0.0, 0.0, &cfg).unwrap();
        assert_eq!(z.n1_lower, 0.0);
        assert_eq!(z.nu0_mean_lower, 0.0);
        let u = untagged_counts(&p, &td, 1e-5, 1e-5, 1e-5, &cfg).unwrap();
        assert_eq!(u.nu1_mean_lower, u.nu0_mean_lower);
        // hand expansion
        let q = 0.45 * (-0.45f64).exp();
        let hand = 1e13 * 0.8 * 0.8 * (2.0 * 0.25 * 0.75 * q) * 1e-5;
        assert_relative_eq!(u.n1_mean_lower, hand, max_relative = 1e-13);
        assert!(u.n1_lower < u.n1_mean_lower);
    }

    #[test]
    fn outlier_correction() {
        let (_, c) = sides(0.02);
        let rb = toy_rates();
        let plain = s10_lower(&rb, &c).unwrap();
        assert_eq!(s10_lower_outlier(&rb, &c, 0, rb.n10).unwrap(), plain);
        let big = RateBounds { n10: 640_000_000_000, ..rb };
        let tiny = s10_lower_outlier(&big, &c, 100, big.n10).unwrap();
        assert!((plain.value - tiny.value) / plain.value < 1e-4);
        let n_delta = (rb.s10_l * rb.n10 as f64) as u64;
        let all = s10_lower_outlier(&rb, &c, n_delta, rb.n10).unwrap();
        assert!(all.value <= plain.value);
        assert_eq!(all.value, 0.0);
    }

    #[test]
    fn bb84_zero_counts() {
        let counts = Bb84Counts {
            vacuum_u: 0.0,
            decoy_l: 0.0,
            signal_u: 0.0,
        };
        let probs = Bb84Probabilities { p_o: 0.2, p_x: 0.4, p_y: 0.4 };
        let v = bb84_n1y_lower(&counts, Interval::point(0.1), Interval::point(0.5), &probs).unwrap();
        assert_eq!(v, 0.0);
    }
}
