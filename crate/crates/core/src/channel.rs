//! Channel and detector model, and the deterministic "linear model" that turns
//! protocol and channel parameters into expected observed statistics.
//!
//! Each party's pulse is attenuated by `η = η_d·10^{-αL/10}` and the two
//! pulses interfere at Charlie's beam splitter. For received mean photon
//! numbers `a`, `b` and phase difference `θ`, the two outputs carry
//! `n± = (a + b ± 2v√(ab)·cos θ)/2`, where `v = 1 - 2e_d` is the interference
//! visibility. Each detector fires with probability `1 - (1-p_d)e^{-n}` and an
//! event is heralded when exactly one fires.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{bessel_i0, GaussLegendre};
use crate::protocol::ProtocolParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    /// Alice–Charlie fiber length (km).
    pub l_ac: f64,
    /// Bob–Charlie fiber length (km).
    pub l_bc: f64,
    /// Fiber loss (dB/km).
    pub alpha: f64,
    pub eta_d: f64,
    /// Dark-count probability per pulse per detector.
    pub p_d: f64,
    pub e_d: f64,
    /// Number of phase slices `M`; X windows accept `|Δθ| ≤ π/M` around 0 or π.
    pub phase_slices: u32,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            l_ac: 100.0,
            l_bc: 100.0,
            alpha: 0.2,
            eta_d: 0.6,
            p_d: 1e-8,
            e_d: 0.04,
            phase_slices: 16,
        }
    }
}

impl ChannelParams {
    pub fn symmetric(total_km: f64) -> Self {
        Self {
            l_ac: total_km / 2.0,
            l_bc: total_km / 2.0,
            ..Self::default()
        }
    }

    /// Channel with `l_ac - l_bc = asymmetry_km`.
    pub fn asymmetric(total_km: f64, asymmetry_km: f64) -> Self {
        Self {
            l_ac: (total_km + asymmetry_km) / 2.0,
            l_bc: (total_km - asymmetry_km) / 2.0,
            ..Self::default()
        }
    }

    pub fn total_km(&self) -> f64 {
        self.l_ac + self.l_bc
    }

    pub fn eta_a(&self) -> f64 {
        self.eta_d * fiber_transmittance(self.alpha, self.l_ac)
    }

    pub fn eta_b(&self) -> f64 {
        self.eta_d * fiber_transmittance(self.alpha, self.l_bc)
    }

    pub fn visibility(&self) -> f64 {
        1.0 - 2.0 * self.e_d
    }

    /// Fraction of `a1 b1` windows that pass the phase post-selection.
    pub fn x_acceptance(&self) -> f64 {
        (2.0 / self.phase_slices as f64).min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("channel.l_ac", self.l_ac), ("channel.l_bc", self.l_bc), ("channel.alpha", self.alpha)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(name, format!("{v} must be >= 0")));
            }
        }
        for (name, v) in [("channel.eta_d", self.eta_d), ("channel.p_d", self.p_d), ("channel.e_d", self.e_d)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("{v} is outside [0, 1]")));
            }
        }
        if self.phase_slices < 1 {
            return Err(Error::invalid("channel.phase_slices", "must be >= 1"));
        }
        Ok(())
    }
}

pub fn fiber_transmittance(alpha: f64, km: f64) -> f64 {
    10f64.powf(-alpha * km / 10.0)
}

/// Repeaterless secret-key capacity `-log₂(1-η)`.
pub fn plob_bound(eta: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::Domain(format!("transmittance {eta} must lie in [0, 1)")));
    }
    Ok(-(-eta).ln_1p() / std::f64::consts::LN_2)
}

/// PLOB bound of the fiber alone, i.e. with unit detector efficiency.
pub fn absolute_plob(ch: &ChannelParams) -> Result<f64> {
    plob_bound(fiber_transmittance(ch.alpha, ch.total_km()))
}

/// PLOB bound including the detector efficiency.
pub fn detector_plob(ch: &ChannelParams) -> Result<f64> {
    plob_bound(ch.eta_d * fiber_transmittance(ch.alpha, ch.total_km()))
}

/// Probabilities that only the "right" or only the "wrong" detector fires.
pub fn one_click(n_right: f64, n_wrong: f64, p_d: f64) -> (f64, f64) {
    let q_right = (1.0 - p_d) * (-n_right).exp();
    let q_wrong = (1.0 - p_d) * (-n_wrong).exp();
    ((1.0 - q_right) * q_wrong, (1.0 - q_wrong) * q_right)
}

/// Heralding probability of a phase-randomised pulse pair with received
/// mean photon numbers `a` and `b`.
pub fn random_phase_gain(a: f64, b: f64, p_d: f64) -> f64 {
    let keep = 1.0 - p_d;
    2.0 * keep * (-(a + b) / 2.0).exp() * bessel_i0((a * b).sqrt()) - 2.0 * keep * keep * (-(a + b)).exp()
}

/// Heralded single-photon probabilities `(right, wrong)` for the state
/// `√w|10⟩ + √(1-w)|01⟩` sent through transmittances `t_a`, `t_b` with aligned phase.
pub fn single_photon_clicks(t_a: f64, t_b: f64, weight_a: f64, visibility: f64, p_d: f64) -> (f64, f64) {
    let direct = weight_a * t_a + (1.0 - weight_a) * t_b;
    let cross = 2.0 * visibility * (weight_a * (1.0 - weight_a) * t_a * t_b).sqrt();
    let to_right = 0.5 * (direct + cross);
    let to_wrong = 0.5 * (direct - cross);
    let lost = 1.0 - to_right - to_wrong;
    let dark = p_d * (1.0 - p_d);
    (
        to_right * (1.0 - p_d) + lost * dark,
        to_wrong * (1.0 - p_d) + lost * dark,
    )
}

/// Detection model bound to one channel, with a cached quadrature rule for
/// the phase-slice average.
#[derive(Debug, Clone)]
pub struct Detection {
    pub channel: ChannelParams,
    slice_rule: GaussLegendre,
}

impl Detection {
    pub fn new(channel: ChannelParams) -> Self {
        Self {
            channel,
            slice_rule: GaussLegendre::new(16),
        }
    }

    /// Heralding probability of a phase-randomised pair sent with intensities `mu_a`, `mu_b`.
    pub fn gain(&self, mu_a: f64, mu_b: f64) -> f64 {
        random_phase_gain(self.channel.eta_a() * mu_a, self.channel.eta_b() * mu_b, self.channel.p_d)
    }

    /// Heralding and error probabilities of an accepted X window, averaged
    /// over the phase slice.
    pub fn x_window(&self, mu_a: f64, mu_b: f64) -> (f64, f64) {
        let ch = &self.channel;
        let a = ch.eta_a() * mu_a;
        let b = ch.eta_b() * mu_b;
        let v = ch.visibility();
        let half = PI / ch.phase_slices as f64;
        let mut right = 0.0;
        let mut wrong = 0.0;
        // the integrand is even in Δθ, so average over [0, π/M]
        let clicks = |theta: f64| {
            let cross = v * (a * b).sqrt() * theta.cos();
            one_click(0.5 * (a + b) + cross, 0.5 * (a + b) - cross, ch.p_d)
        };
        if ch.phase_slices == 1 {
            // accepting the full circle on both sides degenerates to random phase
            let g = random_phase_gain(a, b, ch.p_d);
            return (g, 0.5 * g);
        }
        right += self.slice_rule.mean(0.0, half, |t| clicks(t).0);
        wrong += self.slice_rule.mean(0.0, half, |t| clicks(t).1);
        (right + wrong, wrong)
    }
}

/// Per-class heralding probabilities of one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassRates {
    pub s00: f64,
    pub s01: f64,
    pub s10: f64,
    pub s02: f64,
    pub s20: f64,
    /// Heralding probability of an accepted X window.
    pub x_gain: f64,
    /// Error-heralding probability of an accepted X window.
    pub x_error: f64,
    /// Z windows: both send, only Alice sends, only Bob sends, neither sends.
    pub z_both: f64,
    pub z_alice: f64,
    pub z_bob: f64,
    pub z_none: f64,
}

impl ClassRates {
    /// Rates at the nominal intensities.
    pub fn nominal(p: &ProtocolParams, det: &Detection) -> Self {
        let (a, b) = (&p.alice, &p.bob);
        let (x_gain, x_error) = det.x_window(a.mu_1, b.mu_1);
        Self {
            s00: det.gain(0.0, 0.0),
            s01: det.gain(0.0, b.mu_1),
            s10: det.gain(a.mu_1, 0.0),
            s02: det.gain(0.0, b.mu_2),
            s20: det.gain(a.mu_2, 0.0),
            x_gain,
            x_error,
            z_both: det.gain(a.mu_z, b.mu_z),
            z_alice: det.gain(a.mu_z, 0.0),
            z_bob: det.gain(0.0, b.mu_z),
            z_none: det.gain(0.0, 0.0),
        }
    }
}

/// Pulse-pair counts `N_lr` for the decoy source pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SourcePairCounts {
    pub n00: u64,
    pub n01: u64,
    pub n10: u64,
    pub n02: u64,
    pub n20: u64,
}

/// Expected (unrounded) source-pair counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCounts {
    pub n00: f64,
    pub n01: f64,
    pub n10: f64,
    pub n02: f64,
    pub n20: f64,
    /// Accepted X windows.
    pub n_x: f64,
    /// Every window in which both parties emitted vacuum, Z windows included.
    pub n_vacuum: f64,
    pub z_both: f64,
    pub z_alice: f64,
    pub z_bob: f64,
    pub z_none: f64,
}

pub fn pair_counts(p: &ProtocolParams, ch: &ChannelParams) -> PairCounts {
    let (a, b) = (&p.alice, &p.bob);
    let n = p.n_total;
    let decoy_a = 1.0 - a.p_z;
    let decoy_b = 1.0 - b.p_z;
    let n00 = (decoy_a * decoy_b * a.p_0() * b.p_0()
        + decoy_a * b.p_z * a.p_0() * (1.0 - b.eps)
        + a.p_z * decoy_b * (1.0 - a.eps) * b.p_0())
        * n;
    let vac_a = decoy_a * a.p_0() + a.p_z * (1.0 - a.eps);
    let vac_b = decoy_b * b.p_0() + b.p_z * (1.0 - b.eps);
    let zz = a.p_z * b.p_z * n;
    PairCounts {
        n00,
        n01: vac_a * decoy_b * b.p_1 * n,
        n10: vac_b * decoy_a * a.p_1 * n,
        n02: vac_a * decoy_b * b.p_2 * n,
        n20: vac_b * decoy_a * a.p_2 * n,
        n_x: decoy_a * decoy_b * a.p_1 * b.p_1 * n * ch.x_acceptance(),
        n_vacuum: vac_a * vac_b * n,
        z_both: zz * a.eps * b.eps,
        z_alice: zz * a.eps * (1.0 - b.eps),
        z_bob: zz * (1.0 - a.eps) * b.eps,
        z_none: zz * (1.0 - a.eps) * (1.0 - b.eps),
    }
}

/// Everything the parties observe, plus the AOPP pairing observables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservedStats {
    pub pulses: SourcePairCounts,
    pub heralds: SourcePairCounts,
    /// Accepted X windows `N_X` and their error events `M_X`.
    pub n_x: u64,
    pub m_x: u64,
    /// Every window where both parties emitted vacuum, and its heralds.
    pub n_vacuum_pulses: u64,
    pub n_vacuum_heralds: u64,
    /// Effective Z-window events and their bit error rate.
    pub n_t: u64,
    pub e_z: f64,
    /// Bob's raw-key zeros (Bob sent) and ones (Bob did not send).
    pub n_bob0: u64,
    pub n_bob1: u64,
    pub n_g: u64,
    pub n_odd: u64,
    pub n_t_prime: u64,
    pub e_z_prime: f64,
    /// Upper bound on windows whose intensities left the fluctuation box.
    pub n_delta: u64,
}

impl ObservedStats {
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("00", self.heralds.n00, self.pulses.n00),
            ("01", self.heralds.n01, self.pulses.n01),
            ("10", self.heralds.n10, self.pulses.n10),
            ("02", self.heralds.n02, self.pulses.n02),
            ("20", self.heralds.n20, self.pulses.n20),
            ("x", self.m_x, self.n_x),
            ("vacuum", self.n_vacuum_heralds, self.n_vacuum_pulses),
            ("aopp", self.n_t_prime, self.n_t),
        ];
        for (name, k, n) in pairs {
            if k > n {
                return Err(Error::invalid(
                    format!("observed.{name}"),
                    format!("event count {k} exceeds population {n}"),
                ));
            }
        }
        for (name, e) in [("e_z", self.e_z), ("e_z_prime", self.e_z_prime)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::invalid(format!("observed.{name}"), format!("{e} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Raw-key composition used by the AOPP pairing closed forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct RawKey {
    pub bob0: f64,
    pub bob0_errors: f64,
    pub bob1: f64,
    pub bob1_errors: f64,
}

impl RawKey {
    pub fn n_t(&self) -> f64 {
        self.bob0 + self.bob1
    }

    pub fn errors(&self) -> f64 {
        self.bob0_errors + self.bob1_errors
    }

    /// Expected `(n_g, n_odd, n_t', E')` for random 0–1 pairing by Bob.
    pub fn aopp_expectation(&self) -> (f64, f64, f64, f64) {
        let n_t = self.n_t();
        if self.bob0 <= 0.0 || self.bob1 <= 0.0 {
            return (0.0, 0.0, 0.0, 0.0);
        }
        let e0 = self.bob0_errors / self.bob0;
        let e1 = self.bob1_errors / self.bob1;
        let n_g = self.bob0.min(self.bob1);
        let n_odd = if n_t > 1.0 { self.bob0 * self.bob1 / (n_t - 1.0) } else { 0.0 };
        // Alice's parity is odd when both bits are right or both are wrong
        let survive = (1.0 - e0) * (1.0 - e1) + e0 * e1;
        let e_prime = if survive > 0.0 { e0 * e1 / survive } else { 0.0 };
        (n_g, n_odd, n_g * survive, e_prime)
    }
}

pub(crate) fn to_count(x: f64) -> u64 {
    if x <= 0.0 {
        0
    } else {
        x.round() as u64
    }
}

/// Expected observed statistics under the linear channel model, at nominal intensities.
pub fn linear_model_observed(p: &ProtocolParams, ch: &ChannelParams) -> Result<ObservedStats> {
    p.validate()?;
    ch.validate()?;
    let det = Detection::new(*ch);
    let rates = ClassRates::nominal(p, &det);
    Ok(observed_from_rates(p, ch, &rates))
}

pub(crate) fn observed_from_rates(p: &ProtocolParams, ch: &ChannelParams, r: &ClassRates) -> ObservedStats {
    let nc = pair_counts(p, ch);
    let pulses = SourcePairCounts {
        n00: to_count(nc.n00),
        n01: to_count(nc.n01),
        n10: to_count(nc.n10),
        n02: to_count(nc.n02),
        n20: to_count(nc.n20),
    };
    let heralds = SourcePairCounts {
        n00: to_count(pulses.n00 as f64 * r.s00),
        n01: to_count(pulses.n01 as f64 * r.s01),
        n10: to_count(pulses.n10 as f64 * r.s10),
        n02: to_count(pulses.n02 as f64 * r.s02),
        n20: to_count(pulses.n20 as f64 * r.s20),
    };
    let n_x = to_count(nc.n_x);
    let n_vacuum_pulses = to_count(nc.n_vacuum);
    // Alice sending is bit 1, Bob sending is bit 0; both or neither sending is an error
    let raw = RawKey {
        bob0: nc.z_both * r.z_both + nc.z_bob * r.z_bob,
        bob0_errors: nc.z_both * r.z_both,
        bob1: nc.z_alice * r.z_alice + nc.z_none * r.z_none,
        bob1_errors: nc.z_none * r.z_none,
    };
    let n_t = raw.n_t();
    let (n_g, n_odd, n_t_prime, e_z_prime) = raw.aopp_expectation();
    ObservedStats {
        pulses,
        heralds,
        n_x,
        m_x: to_count(n_x as f64 * r.x_error),
        n_vacuum_pulses,
        n_vacuum_heralds: to_count(n_vacuum_pulses as f64 * r.s00),
        n_t: to_count(n_t),
        e_z: if n_t > 0.0 { raw.errors() / n_t } else { 0.0 },
        n_bob0: to_count(raw.bob0),
        n_bob1: to_count(raw.bob1),
        n_g: to_count(n_g),
        n_odd: to_count(n_odd),
        n_t_prime: to_count(n_t_prime),
        e_z_prime,
        n_delta: 0,
    }
}
