//! Protocol configuration, the real-to-virtual intensity mapping and the
//! tagged single-photon decomposition of the signal sources.

use serde::{Deserialize, Serialize};

use crate::bounds::TailConfig;
use crate::error::{Error, Result};

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "interval [{lo}, {hi}] is reversed");
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Alice,
    Bob,
}

/// The four sources of one party plus their selection probabilities.
///
/// Source 0 is the vacuum; 1 and 2 are the decoy sources used in decoy
/// windows; `z` is the signal source, sent with probability `eps` in signal
/// windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSet {
    pub mu_1: f64,
    pub mu_2: f64,
    pub mu_z: f64,
    /// Maximum relative fluctuation of each source, `|δ^i| ≤ delta`.
    pub delta_1: f64,
    pub delta_2: f64,
    pub delta_z: f64,
    /// Probability of a signal window.
    pub p_z: f64,
    /// Probabilities of sources 1 and 2 inside a decoy window.
    pub p_1: f64,
    pub p_2: f64,
    /// Sending probability in signal windows.
    pub eps: f64,
}

impl SourceSet {
    pub fn p_0(&self) -> f64 {
        1.0 - self.p_1 - self.p_2
    }

    pub fn set_delta(&mut self, delta: f64) {
        self.delta_1 = delta;
        self.delta_2 = delta;
        self.delta_z = delta;
    }

    /// Probability that a window carries a vacuum pulse from this party.
    pub fn p_vacuum(&self) -> f64 {
        (1.0 - self.p_z) * self.p_0() + self.p_z * (1.0 - self.eps)
    }

    fn validate(&self, side: &str) -> Result<()> {
        let name = |f: &str| format!("{side}.{f}");
        for (field, v) in [("mu_1", self.mu_1), ("mu_2", self.mu_2), ("mu_z", self.mu_z)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(name(field), format!("intensity {v} must be >= 0")));
            }
        }
        if !(self.mu_1 > 0.0 && self.mu_1 < self.mu_2) {
            return Err(Error::invalid(
                name("mu_1"),
                format!("need 0 < mu_1 < mu_2, got mu_1={} mu_2={}", self.mu_1, self.mu_2),
            ));
        }
        for (field, v) in [
            ("delta_1", self.delta_1),
            ("delta_2", self.delta_2),
            ("delta_z", self.delta_z),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(name(field), format!("fluctuation bound {v} is outside [0, 1)")));
            }
        }
        for (field, v) in [("p_z", self.p_z), ("p_1", self.p_1), ("p_2", self.p_2), ("eps", self.eps)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name(field), format!("probability {v} is outside [0, 1]")));
            }
        }
        if self.p_1 + self.p_2 > 1.0 {
            return Err(Error::invalid(
                name("p_2"),
                format!("p_1 + p_2 = {} exceeds 1", self.p_1 + self.p_2),
            ));
        }
        Ok(())
    }
}

impl Default for SourceSet {
    fn default() -> Self {
        Self {
            mu_1: 0.1,
            mu_2: 0.4,
            mu_z: 0.45,
            delta_1: 0.0,
            delta_2: 0.0,
            delta_z: 0.0,
            p_z: 0.8,
            p_1: 0.5,
            p_2: 0.3,
            eps: 0.25,
        }
    }
}

/// Full protocol configuration for both parties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolParams {
    pub alice: SourceSet,
    pub bob: SourceSet,
    /// Total number of pulse pairs `N`.
    pub n_total: f64,
    /// Failure probability of each Chernoff bound.
    pub xi: f64,
    pub eps_cor: f64,
    pub eps_pa: f64,
    pub eps_hat: f64,
    /// Failure probability `ε` of the AOPP parameter-estimation terms.
    pub eps_aopp: f64,
    /// Error-correction inefficiency `f`.
    pub ec_inefficiency: f64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            alice: SourceSet::default(),
            bob: SourceSet::default(),
            n_total: 1e13,
            xi: 1e-10,
            eps_cor: 1e-10,
            eps_pa: 1e-10,
            eps_hat: 1e-10,
            eps_aopp: 1e-10,
            ec_inefficiency: 1.1,
        }
    }
}

impl ProtocolParams {
    pub fn symmetric(sources: SourceSet) -> Self {
        Self {
            alice: sources,
            bob: sources,
            ..Self::default()
        }
    }

    pub fn side(&self, side: Side) -> &SourceSet {
        match side {
            Side::Alice => &self.alice,
            Side::Bob => &self.bob,
        }
    }

    pub fn side_mut(&mut self, side: Side) -> &mut SourceSet {
        match side {
            Side::Alice => &mut self.alice,
            Side::Bob => &mut self.bob,
        }
    }

    /// Sets every fluctuation bound on both sides to `delta`.
    pub fn set_delta(&mut self, delta: f64) {
        self.alice.set_delta(delta);
        self.bob.set_delta(delta);
    }

    pub fn tail(&self) -> Result<TailConfig> {
        TailConfig::new(self.xi)
    }

    pub fn validate(&self) -> Result<()> {
        self.alice.validate("alice")?;
        self.bob.validate("bob")?;
        if !(self.n_total >= 1.0) || !self.n_total.is_finite() {
            return Err(Error::invalid("n_total", format!("{} must be >= 1", self.n_total)));
        }
        for (field, v) in [
            ("xi", self.xi),
            ("eps_cor", self.eps_cor),
            ("eps_pa", self.eps_pa),
            ("eps_hat", self.eps_hat),
            ("eps_aopp", self.eps_aopp),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(field, format!("{v} is outside (0, 1)")));
            }
        }
        if !(self.ec_inefficiency >= 1.0) {
            return Err(Error::invalid(
                "ec_inefficiency",
                format!("{} must be >= 1", self.ec_inefficiency),
            ));
        }
        Ok(())
    }
}

/// Virtual intensities of one party after the virtual attenuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualSide {
    /// Fixed intensity of the virtual first decoy source, `(1+δ₁)μ₁`.
    pub mu_1_u: f64,
    pub mu_2: Interval,
    pub mu_z: Interval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualIntensities {
    pub alice: VirtualSide,
    pub bob: VirtualSide,
}

impl VirtualIntensities {
    pub fn side(&self, side: Side) -> &VirtualSide {
        match side {
            Side::Alice => &self.alice,
            Side::Bob => &self.bob,
        }
    }

    pub fn mu_1_sum(&self) -> f64 {
        self.alice.mu_1_u + self.bob.mu_1_u
    }
}

fn virtual_side(s: &SourceSet, side: &str) -> Result<VirtualSide> {
    if s.delta_1 >= 1.0 {
        return Err(Error::invalid(format!("{side}.delta_1"), "must be < 1"));
    }
    // The virtual attenuator is set by source 1: μ'^i = (1+δ₁)/(1+δ₁^i)·(1+δ_s^i)μ_s.
    let range = |mu: f64, delta: f64| {
        Interval::new(
            (1.0 - delta) * mu,
            (1.0 + s.delta_1) * (1.0 + delta) * mu / (1.0 - s.delta_1),
        )
    };
    Ok(VirtualSide {
        mu_1_u: (1.0 + s.delta_1) * s.mu_1,
        mu_2: range(s.mu_2, s.delta_2),
        mu_z: range(s.mu_z, s.delta_z),
    })
}

pub fn virtual_intensities(p: &ProtocolParams) -> Result<VirtualIntensities> {
    Ok(VirtualIntensities {
        alice: virtual_side(&p.alice, "alice")?,
        bob: virtual_side(&p.bob, "bob")?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TagBranch {
    /// Alice's signal source is the limiting one; `c_az1` saturates its bound.
    AliceLimited,
    BobLimited,
}

/// Weights of the perfect single-photon components of the signal sources.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaggedDecomposition {
    pub c_az1: f64,
    pub c_bz1: f64,
    pub branch: TagBranch,
}

pub fn tagged_decomposition(p: &ProtocolParams, v: &VirtualIntensities) -> Result<TaggedDecomposition> {
    let (ea, eb) = (p.alice.eps, p.bob.eps);
    if !(ea > 0.0 && ea < 1.0) || !(eb > 0.0 && eb < 1.0) {
        return Err(Error::DegenerateSource(format!(
            "sending probabilities must lie in (0, 1), got eps_a={ea} eps_b={eb}"
        )));
    }
    let (la, lb) = (v.alice.mu_z.lo, v.bob.mu_z.lo);
    for (name, mu) in [("alice", la), ("bob", lb)] {
        if mu <= 0.0 {
            return Err(Error::DegenerateSource(format!(
                "{name} signal source has zero lower intensity"
            )));
        }
        if mu >= 1.0 {
            return Err(Error::invalid(
                format!("{name}.mu_z"),
                format!("virtual lower intensity {mu} must be < 1"),
            ));
        }
    }
    let qa = poisson_coeff(la, 1);
    let qb = poisson_coeff(lb, 1);
    // weights ratio that makes the untagged Z states match the X-window single photon
    let ratio = eb * (1.0 - ea) * v.alice.mu_1_u / (ea * (1.0 - eb) * v.bob.mu_1_u);
    if qa / qb <= ratio {
        Ok(TaggedDecomposition {
            c_az1: qa,
            c_bz1: qa / ratio,
            branch: TagBranch::AliceLimited,
        })
    } else {
        Ok(TaggedDecomposition {
            c_az1: ratio * qb,
            c_bz1: qb,
            branch: TagBranch::BobLimited,
        })
    }
}

/// Poisson photon-number weight `μ^k e^{-μ} / k!`.
pub fn poisson_coeff(mu: f64, k: u32) -> f64 {
    if k == 0 {
        return (-mu).exp();
    }
    if mu == 0.0 {
        return 0.0;
    }
    let log_fact: f64 = (1..=k).map(|i| (i as f64).ln()).sum();
    (k as f64 * mu.ln() - mu - log_fact).exp()
}

/// Exact range of `poisson_coeff(μ, k)` for `μ` in `range`.
pub fn poisson_coeff_bounds(range: Interval, k: u32) -> Interval {
    let a = poisson_coeff(range.lo, k);
    let b = poisson_coeff(range.hi, k);
    let hi = if k > 0 && range.contains(k as f64) {
        poisson_coeff(k as f64, k)
    } else {
        a.max(b)
    };
    Interval::new(a.min(b), hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn with_delta(delta: f64) -> ProtocolParams {
        let mut p = ProtocolParams::default();
        p.set_delta(delta);
        p
    }

    #[test]
    fn virtual_range_example() {
        let mut p = with_delta(0.02);
        p.alice.mu_2 = 0.1;
        let v = virtual_intensities(&p).unwrap();
        assert_relative_eq!(v.alice.mu_2.lo, 0.098, max_relative = 1e-14);
        assert_relative_eq!(v.alice.mu_2.hi, 0.1 * 1.02 * 1.02 / 0.98, max_relative = 1e-14);
        assert_relative_eq!(v.alice.mu_2.hi, 0.10616326530612245, max_relative = 1e-12);
    }

    #[test]
    fn virtual_range_brute_force() {
        // extremise (1+δ₁)(1+δ_s^i)/(1+δ₁^i) over a fine grid of the fluctuation box
        let mut p = with_delta(0.0);
        p.alice.delta_1 = 0.03;
        p.alice.delta_2 = 0.07;
        let v = virtual_intensities(&p).unwrap();
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for i in 0..=200 {
            for j in 0..=200 {
                let d1 = -0.03 + 0.06 * i as f64 / 200.0;
                let d2 = -0.07 + 0.14 * j as f64 / 200.0;
                let m = 1.03 * (1.0 + d2) / (1.0 + d1) * p.alice.mu_2;
                lo = lo.min(m);
                hi = hi.max(m);
            }
        }
        assert_relative_eq!(v.alice.mu_2.lo, lo, max_relative = 1e-12);
        assert_relative_eq!(v.alice.mu_2.hi, hi, max_relative = 1e-12);
    }

    #[test]
    fn zero_fluctuation_is_identity() {
        let p = with_delta(0.0);
        let v = virtual_intensities(&p).unwrap();
        assert_eq!(v.alice.mu_1_u, p.alice.mu_1);
        assert_eq!(v.alice.mu_2, Interval::point(p.alice.mu_2));
        assert_eq!(v.bob.mu_z, Interval::point(p.bob.mu_z));
    }

    #[test]
    fn signal_lower_bound_example() {
        let mut p = with_delta(0.05);
        p.alice.mu_z = 0.4;
        let v = virtual_intensities(&p).unwrap();
        assert_relative_eq!(v.alice.mu_z.lo, 0.38, max_relative = 1e-14);
    }

    #[test]
    fn symmetric_tagging_takes_saturating_values() {
        let mut p = with_delta(0.05);
        p.alice.mu_z = 0.4;
        p.bob.mu_z = 0.4;
        let v = virtual_intensities(&p).unwrap();
        let td = tagged_decomposition(&p, &v).unwrap();
        let expect = 0.38 * (-0.38f64).exp();
        assert_relative_eq!(td.c_az1, expect, max_relative = 1e-14);
        assert_relative_eq!(td.c_bz1, expect, max_relative = 1e-14);
        assert_relative_eq!(td.c_az1, 0.2599, max_relative = 1e-3);
    }

    #[test]
    fn stable_source_reduction() {
        let mut p = with_delta(0.0);
        // choose Bob's first decoy so that the constraint holds exactly
        p.alice.mu_z = 0.3;
        p.bob.mu_z = 0.5;
        p.alice.eps = 0.2;
        p.bob.eps = 0.3;
        let qa = 0.3 * (-0.3f64).exp();
        let qb = 0.5 * (-0.5f64).exp();
        p.bob.mu_1 = p.alice.mu_1 * (0.3 * 0.8 * qb) / (0.2 * 0.7 * qa);
        let v = virtual_intensities(&p).unwrap();
        let td = tagged_decomposition(&p, &v).unwrap();
        assert_relative_eq!(td.c_az1, qa, max_relative = 1e-12);
        assert_relative_eq!(td.c_bz1, qb, max_relative = 1e-12);
    }

    #[test]
    fn weak_alice_signal_takes_first_branch() {
        let mut p = with_delta(0.05);
        p.alice.mu_z = 0.05;
        p.bob.mu_z = 0.4;
        let v = virtual_intensities(&p).unwrap();
        let td = tagged_decomposition(&p, &v).unwrap();
        assert_eq!(td.branch, TagBranch::AliceLimited);
        assert!(td.c_bz1 < poisson_coeff(v.bob.mu_z.lo, 1));
    }

    #[test]
    fn tagging_rejects_degenerate_sources() {
        let mut p = with_delta(0.0);
        p.alice.mu_z = 0.0;
        let v = virtual_intensities(&p).unwrap();
        assert!(matches!(tagged_decomposition(&p, &v), Err(Error::DegenerateSource(_))));
        let mut p = with_delta(0.0);
        p.bob.mu_z = 1.2;
        let v = virtual_intensities(&p).unwrap();
        assert!(tagged_decomposition(&p, &v).is_err());
    }

    #[test]
    fn poisson_examples() {
        assert_eq!(poisson_coeff(0.0, 0), 1.0);
        assert_eq!(poisson_coeff(0.0, 3), 0.0);
        assert_relative_eq!(poisson_coeff(0.1, 1), 0.1 * (-0.1f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(poisson_coeff(0.1, 1), 0.090483741803596, max_relative = 1e-12);
        let total: f64 = (0..60).map(|k| poisson_coeff(2.5, k)).sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-14);
    }

    #[test]
    fn poisson_bounds_examples() {
        let b = poisson_coeff_bounds(Interval::new(0.098, 0.10616), 0);
        assert_relative_eq!(b.lo, (-0.10616f64).exp());
        assert_relative_eq!(b.hi, (-0.098f64).exp());
        let b = poisson_coeff_bounds(Interval::new(0.5, 1.5), 1);
        assert_relative_eq!(b.hi, (-1.0f64).exp());
        let b = poisson_coeff_bounds(Interval::point(0.3), 2);
        assert_eq!(b.lo, b.hi);
        assert_relative_eq!(b.lo, poisson_coeff(0.3, 2));
    }

    #[test]
    fn validation_names_the_field() {
        let mut p = ProtocolParams::default();
        p.alice.delta_2 = 1.0;
        let err = p.validate().unwrap_err().to_string();
        assert!(err.contains("alice.delta_2"), "{err}");
        let mut p = ProtocolParams::default();
        p.bob.p_1 = 0.7;
        p.bob.p_2 = 0.6;
        assert!(p.validate().unwrap_err().to_string().contains("bob.p_2"));
        let mut p = ProtocolParams::default();
        p.alice.mu_2 = p.alice.mu_1;
        assert!(p.validate().is_err());
    }
}
