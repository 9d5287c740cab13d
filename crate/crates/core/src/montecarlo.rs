//! Monte-Carlo sampling of the observed statistics.
//!
//! Windows are split over the 25 (Alice choice, Bob choice) classes with a
//! multinomial draw and each class heralds binomially. In soundness mode
//! every window carries its own uniformly drawn intensity errors; windows are
//! independent, so each herald is Bernoulli with the error-averaged
//! probability and the aggregate sampling stays exact. Soundness runs also
//! sample the ground truth the bounds are meant to cover: the number of
//! untagged heralds and their phase errors.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    pair_counts, random_phase_gain, single_photon_clicks, ChannelParams, ClassRates, Detection, ObservedStats, RawKey,
    SourcePairCounts,
};
use crate::error::{Error, Result};
use crate::keyrate::{analyze, AnalysisOptions, KeyRateReport};
use crate::numeric::GaussLegendre;
use crate::protocol::{tagged_decomposition, virtual_intensities, ProtocolParams, SourceSet};

/// Largest raw key the literal AOPP pairing will materialise.
pub const MAX_LITERAL_KEY: u64 = 100_000_000;

/// Per-window source choice of one party.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Choice {
    Decoy0,
    Decoy1,
    Decoy2,
    NotSending,
    Sending,
}

const CHOICES: [Choice; 5] = [Choice::Decoy0, Choice::Decoy1, Choice::Decoy2, Choice::NotSending, Choice::Sending];

fn choice_probs(s: &SourceSet) -> [f64; 5] {
    let d = 1.0 - s.p_z;
    [d * s.p_0(), d * s.p_1, d * s.p_2, s.p_z * (1.0 - s.eps), s.p_z * s.eps]
}

/// How the AOPP pairing observables are produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// Shuffle and pair the sampled raw key.
    #[default]
    Literal,
    /// Closed-form expectations of the pairing given the sampled raw key.
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub n_windows: u64,
    pub seed: u64,
    /// Sample per-window intensity errors uniformly within the declared bounds.
    pub fluctuate: bool,
    pub pairing: PairingMode,
}

/// Ground truth of a soundness run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UntaggedTruth {
    /// Heralded untagged bits in Z windows.
    pub n1: u64,
    /// Their phase-flip errors.
    pub phase_errors: u64,
}

impl UntaggedTruth {
    pub fn phase_error_rate(&self) -> f64 {
        if self.n1 == 0 {
            0.0
        } else {
            self.phase_errors as f64 / self.n1 as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloRun {
    pub observed: ObservedStats,
    /// Probabilities the heralds were drawn with.
    pub rates: ClassRates,
    pub truth: Option<UntaggedTruth>,
}

/// Error-averaged class probabilities.
struct Averager {
    gl: GaussLegendre,
}

impl Averager {
    fn new() -> Self {
        Self {
            gl: GaussLegendre::new(8),
        }
    }

    /// Mean of `f(1+d)` for `d` uniform in `[-delta, delta]`.
    fn one(&self, delta: f64, f: impl Fn(f64) -> f64) -> f64 {
        self.gl.mean(-delta, delta, |d| f(1.0 + d))
    }

    fn two(&self, da: f64, db: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
        self.gl.mean(-da, da, |x| self.gl.mean(-db, db, |y| f(1.0 + x, 1.0 + y)))
    }
}

fn fluctuating_rates(p: &ProtocolParams, det: &Detection) -> ClassRates {
    let avg = Averager::new();
    let (a, b) = (&p.alice, &p.bob);
    let ch = &det.channel;
    let gain = |ma: f64, mb: f64| random_phase_gain(ch.eta_a() * ma, ch.eta_b() * mb, ch.p_d);
    let x_both = |fa: f64, fb: f64| det.x_window(a.mu_1 * fa, b.mu_1 * fb);
    ClassRates {
        s00: gain(0.0, 0.0),
        s01: avg.one(b.delta_1, |f| gain(0.0, b.mu_1 * f)),
        s10: avg.one(a.delta_1, |f| gain(a.mu_1 * f, 0.0)),
        s02: avg.one(b.delta_2, |f| gain(0.0, b.mu_2 * f)),
        s20: avg.one(a.delta_2, |f| gain(a.mu_2 * f, 0.0)),
        x_gain: avg.two(a.delta_1, b.delta_1, |fa, fb| x_both(fa, fb).0),
        x_error: avg.two(a.delta_1, b.delta_1, |fa, fb| x_both(fa, fb).1),
        z_both: avg.two(a.delta_z, b.delta_z, |fa, fb| gain(a.mu_z * fa, b.mu_z * fb)),
        z_alice: avg.one(a.delta_z, |f| gain(a.mu_z * f, 0.0)),
        z_bob: avg.one(b.delta_z, |f| gain(0.0, b.mu_z * f)),
        z_none: gain(0.0, 0.0),
    }
}

/// Probability that a single photon with transmittance `t` gives a one-detector herald.
fn single_photon_yield(t: f64, p_d: f64) -> f64 {
    t * (1.0 - p_d) + (1.0 - t) * 2.0 * p_d * (1.0 - p_d)
}

/// Untagged-herald probabilities of the one-sided Z windows and the
/// phase-error rate of the untagged single photons.
fn untagged_model(p: &ProtocolParams, ch: &ChannelParams) -> Result<(f64, f64, f64)> {
    let v = virtual_intensities(p)?;
    let td = tagged_decomposition(p, &v)?;
    let avg = Averager::new();
    let (a, b) = (&p.alice, &p.bob);
    // virtual attenuation of window i: (1+δ₁^i)/(1+δ₁)
    let att_a = |f: f64| f / (1.0 + a.delta_1);
    let att_b = |f: f64| f / (1.0 + b.delta_1);
    let p_alice = td.c_az1 * avg.one(a.delta_1, |f| single_photon_yield(att_a(f) * ch.eta_a(), ch.p_d));
    let p_bob = td.c_bz1 * avg.one(b.delta_1, |f| single_photon_yield(att_b(f) * ch.eta_b(), ch.p_d));
    let weight_a = v.alice.mu_1_u / v.mu_1_sum();
    let clicks = |fa: f64, fb: f64| {
        single_photon_clicks(att_a(fa) * ch.eta_a(), att_b(fb) * ch.eta_b(), weight_a, ch.visibility(), ch.p_d)
    };
    let right = avg.two(a.delta_1, b.delta_1, |fa, fb| clicks(fa, fb).0);
    let wrong = avg.two(a.delta_1, b.delta_1, |fa, fb| clicks(fa, fb).1);
    Ok((p_alice, p_bob, wrong / (right + wrong)))
}

fn binomial(n: u64, prob: f64, rng: &mut ChaCha8Rng) -> Result<u64> {
    if n == 0 || prob <= 0.0 {
        return Ok(0);
    }
    if prob >= 1.0 {
        return Ok(n);
    }
    Ok(Binomial::new(n, prob)
        .map_err(|e| Error::Domain(format!("binomial({n}, {prob}): {e}")))?
        .sample(rng))
}

/// Multinomial draw by conditional binomials.
fn multinomial(n: u64, probs: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<u64>> {
    let mut left = n;
    let mut mass = 1.0;
    let mut out = Vec::with_capacity(probs.len());
    for (k, &q) in probs.iter().enumerate() {
        let draw = if k + 1 == probs.len() {
            left
        } else if mass <= 0.0 {
            0
        } else {
            binomial(left, (q / mass).min(1.0), rng)?
        };
        out.push(draw);
        left -= draw;
        mass -= q;
    }
    Ok(out)
}

/// Raw-key entries: Bob's bit and whether it disagrees with Alice's.
const BOB0_OK: u8 = 0;
const BOB0_ERR: u8 = 1;
const BOB1_OK: u8 = 2;
const BOB1_ERR: u8 = 3;

fn is_bob0(k: u8) -> bool {
    k == BOB0_OK || k == BOB0_ERR
}

fn is_err(k: u8) -> bool {
    k == BOB0_ERR || k == BOB1_ERR
}

/// `(n_g, n_odd, n_t', E')` from an explicit shuffle and pairing.
fn literal_pairing(raw: &RawCounts, rng: &mut ChaCha8Rng) -> Result<(u64, u64, u64, f64)> {
    let total = raw.total();
    if total > MAX_LITERAL_KEY {
        return Err(Error::invalid(
            "n_windows",
            format!("raw key of {total} bits exceeds the literal pairing cap {MAX_LITERAL_KEY}"),
        ));
    }
    let mut key: Vec<u8> = Vec::with_capacity(total as usize);
    for (kind, n) in [
        (BOB0_OK, raw.bob0_ok),
        (BOB0_ERR, raw.bob0_err),
        (BOB1_OK, raw.bob1_ok),
        (BOB1_ERR, raw.bob1_err),
    ] {
        key.extend(std::iter::repeat_n(kind, n as usize));
    }
    key.shuffle(rng);
    // Bob groups everything two by two: odd pairs mix a 0 and a 1
    let n_odd = key.chunks_exact(2).filter(|c| is_bob0(c[0]) != is_bob0(c[1])).count() as u64;
    // AOPP: each of Bob's zeros is paired with one of his ones
    let zeros: Vec<u8> = key.iter().copied().filter(|&k| is_bob0(k)).collect();
    let ones: Vec<u8> = key.iter().copied().filter(|&k| !is_bob0(k)).collect();
    let n_g = zeros.len().min(ones.len()) as u64;
    let mut survive = 0u64;
    let mut wrong = 0u64;
    for (z, o) in zeros.iter().zip(&ones) {
        // Alice's parity is odd when both bits are right or both are wrong
        if is_err(*z) == is_err(*o) {
            survive += 1;
            if is_err(*z) {
                wrong += 1;
            }
        }
    }
    let e = if survive > 0 { wrong as f64 / survive as f64 } else { 0.0 };
    Ok((n_g, n_odd, survive, e))
}

struct RawCounts {
    bob0_ok: u64,
    bob0_err: u64,
    bob1_ok: u64,
    bob1_err: u64,
}

impl RawCounts {
    fn total(&self) -> u64 {
        self.bob0_ok + self.bob0_err + self.bob1_ok + self.bob1_err
    }
}

/// Samples one run of the protocol with `cfg.n_windows` windows.
pub fn simulate(p: &ProtocolParams, ch: &ChannelParams, cfg: &MonteCarloConfig) -> Result<MonteCarloRun> {
    p.validate()?;
    ch.validate()?;
    if cfg.n_windows == 0 {
        return Err(Error::invalid("n_windows", "must be >= 1"));
    }
    let det = Detection::new(*ch);
    let rates = if cfg.fluctuate {
        fluctuating_rates(p, &det)
    } else {
        ClassRates::nominal(p, &det)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let pa = choice_probs(&p.alice);
    let pb = choice_probs(&p.bob);
    let joint: Vec<f64> = pa.iter().flat_map(|x| pb.iter().map(move |y| x * y)).collect();
    let counts = multinomial(cfg.n_windows, &joint, &mut rng)?;
    let class = |a: Choice, b: Choice| {
        let i = CHOICES.iter().position(|&c| c == a).unwrap();
        let j = CHOICES.iter().position(|&c| c == b).unwrap();
        counts[i * 5 + j]
    };
    use Choice::*;
    let vac = |c: Choice| matches!(c, Decoy0 | NotSending);

    let pulses = SourcePairCounts {
        n00: class(Decoy0, Decoy0) + class(Decoy0, NotSending) + class(NotSending, Decoy0),
        n01: class(Decoy0, Decoy1) + class(NotSending, Decoy1),
        n10: class(Decoy1, Decoy0) + class(Decoy1, NotSending),
        n02: class(Decoy0, Decoy2) + class(NotSending, Decoy2),
        n20: class(Decoy2, Decoy0) + class(Decoy2, NotSending),
    };
    let heralds = SourcePairCounts {
        n00: binomial(pulses.n00, rates.s00, &mut rng)?,
        n01: binomial(pulses.n01, rates.s01, &mut rng)?,
        n10: binomial(pulses.n10, rates.s10, &mut rng)?,
        n02: binomial(pulses.n02, rates.s02, &mut rng)?,
        n20: binomial(pulses.n20, rates.s20, &mut rng)?,
    };
    // vacuum windows outside the announced decoy pairs: both parties not sending in Z
    let z_none_windows = class(NotSending, NotSending);
    let z_none_heralds = binomial(z_none_windows, rates.z_none, &mut rng)?;
    let vacuum_pulses: u64 = CHOICES
        .iter()
        .flat_map(|&a| CHOICES.iter().map(move |&b| (a, b)))
        .filter(|&(a, b)| vac(a) && vac(b))
        .map(|(a, b)| class(a, b))
        .sum();
    debug_assert_eq!(vacuum_pulses, pulses.n00 + z_none_windows);

    // X windows: phase post-selection, then right / wrong / no click
    let n_x = binomial(class(Decoy1, Decoy1), ch.x_acceptance(), &mut rng)?;
    let x = multinomial(
        n_x,
        &[rates.x_gain - rates.x_error, rates.x_error, 1.0 - rates.x_gain],
        &mut rng,
    )?;
    let m_x = x[1];

    // Z windows; Alice sending is bit 1 and Bob sending is bit 0
    let (z_alice_windows, z_bob_windows) = (class(Sending, NotSending), class(NotSending, Sending));
    let mut truth = None;
    let (z_alice, z_bob) = if cfg.fluctuate {
        let (pu_a, pu_b, e1) = untagged_model(p, ch)?;
        let split = |windows: u64, total: f64, untagged: f64, rng: &mut ChaCha8Rng| -> Result<(u64, u64)> {
            let untagged = untagged.min(total);
            let u = binomial(windows, untagged, rng)?;
            let rest = if untagged < 1.0 { (total - untagged) / (1.0 - untagged) } else { 0.0 };
            Ok((u, u + binomial(windows - u, rest, rng)?))
        };
        let (ua, ha) = split(z_alice_windows, rates.z_alice, pu_a, &mut rng)?;
        let (ub, hb) = split(z_bob_windows, rates.z_bob, pu_b, &mut rng)?;
        let n1 = ua + ub;
        truth = Some(UntaggedTruth {
            n1,
            phase_errors: binomial(n1, e1, &mut rng)?,
        });
        (ha, hb)
    } else {
        (
            binomial(z_alice_windows, rates.z_alice, &mut rng)?,
            binomial(z_bob_windows, rates.z_bob, &mut rng)?,
        )
    };
    let z_both = binomial(class(Sending, Sending), rates.z_both, &mut rng)?;
    let raw = RawCounts {
        bob0_ok: z_bob,
        bob0_err: z_both,
        bob1_ok: z_alice,
        bob1_err: z_none_heralds,
    };
    let n_t = raw.total();
    let errors = raw.bob0_err + raw.bob1_err;
    let (n_g, n_odd, n_t_prime, e_z_prime) = match cfg.pairing {
        PairingMode::Literal => literal_pairing(&raw, &mut rng)?,
        PairingMode::Expected => {
            let (g, odd, tp, e) = RawKey {
                bob0: (raw.bob0_ok + raw.bob0_err) as f64,
                bob0_errors: raw.bob0_err as f64,
                bob1: (raw.bob1_ok + raw.bob1_err) as f64,
                bob1_errors: raw.bob1_err as f64,
            }
            .aopp_expectation();
            (g.round() as u64, odd.round() as u64, tp.round() as u64, e)
        }
    };

    let observed = ObservedStats {
        pulses,
        heralds,
        n_x,
        m_x,
        n_vacuum_pulses: vacuum_pulses,
        n_vacuum_heralds: heralds.n00 + z_none_heralds,
        n_t,
        e_z: if n_t > 0 { errors as f64 / n_t as f64 } else { 0.0 },
        n_bob0: raw.bob0_ok + raw.bob0_err,
        n_bob1: raw.bob1_ok + raw.bob1_err,
        n_g,
        n_odd,
        n_t_prime,
        e_z_prime,
        n_delta: 0,
    };
    Ok(MonteCarloRun { observed, rates, truth })
}

/// One seeded soundness trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessTrial {
    pub seed: u64,
    pub n1_lower: f64,
    pub e1ph_upper: f64,
    pub truth: UntaggedTruth,
    pub violated: bool,
}

/// Samples a fluctuating run and checks the bounds against the ground truth.
pub fn soundness_trial(p: &ProtocolParams, ch: &ChannelParams, n_windows: u64, seed: u64) -> Result<SoundnessTrial> {
    let cfg = MonteCarloConfig {
        n_windows,
        seed,
        fluctuate: true,
        pairing: PairingMode::Expected,
    };
    let run = simulate(p, ch, &cfg)?;
    let truth = run.truth.expect("fluctuating runs record the truth");
    let mut pn = p.clone();
    pn.n_total = n_windows as f64;
    let report: KeyRateReport = analyze(&pn, &run.observed, &AnalysisOptions::default())?;
    let n1_lower = report.decoy.untagged.n1_lower;
    let e1ph_upper = report.decoy.e1ph_real_upper.value;
    let violated = n1_lower > truth.n1 as f64 || (n1_lower > 0.0 && e1ph_upper < truth.phase_error_rate());
    Ok(SoundnessTrial {
        seed,
        n1_lower,
        e1ph_upper,
        truth,
        violated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoundnessSummary {
    pub runs: usize,
    pub violations: usize,
    /// Largest `n₁^L / n₁` over the runs.
    pub worst_n1_ratio: f64,
    /// Largest true phase-error rate over its upper bound.
    pub worst_phase_ratio: f64,
}

/// `runs` independent soundness trials with seeds `seed..seed+runs`.
pub fn soundness_suite(
    p: &ProtocolParams,
    ch: &ChannelParams,
    n_windows: u64,
    runs: usize,
    seed: u64,
) -> Result<SoundnessSummary> {
    let trials: Vec<SoundnessTrial> = (0..runs as u64)
        .into_par_iter()
        .map(|k| soundness_trial(p, ch, n_windows, seed + k))
        .collect::<Result<_>>()?;
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else if a > 0.0 { f64::INFINITY } else { 0.0 };
    Ok(SoundnessSummary {
        runs,
        violations: trials.iter().filter(|t| t.violated).count(),
        worst_n1_ratio: trials.iter().map(|t| ratio(t.n1_lower, t.truth.n1 as f64)).fold(0.0, f64::max),
        worst_phase_ratio: trials
            .iter()
            .map(|t| ratio(t.truth.phase_error_rate(), t.e1ph_upper))
            .fold(0.0, f64::max),
    })
}

/// One sampled count against its linear-model expectation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub name: String,
    /// Per-window probability of the counted event.
    pub expected: f64,
    pub observed: f64,
    /// Deviation in binomial standard deviations.
    pub z: f64,
}

/// Compares every counting rate of a nominal run with the linear model.
///
/// Windows are independent, so each count is binomial over all windows with
/// the per-window probability the linear model integrates.
pub fn rate_agreement(p: &ProtocolParams, ch: &ChannelParams, n_windows: u64, seed: u64) -> Result<Vec<RateCheck>> {
    let cfg = MonteCarloConfig {
        n_windows,
        seed,
        fluctuate: false,
        pairing: PairingMode::Expected,
    };
    let o = simulate(p, ch, &cfg)?.observed;
    let mut unit = p.clone();
    unit.n_total = 1.0;
    let q = pair_counts(&unit, ch);
    let r = ClassRates::nominal(p, &Detection::new(*ch));
    let errors = (o.e_z * o.n_t as f64).round() as u64;
    let n = n_windows as f64;
    let rows = [
        ("n00", q.n00 * r.s00, o.heralds.n00),
        ("n01", q.n01 * r.s01, o.heralds.n01),
        ("n10", q.n10 * r.s10, o.heralds.n10),
        ("n02", q.n02 * r.s02, o.heralds.n02),
        ("n20", q.n20 * r.s20, o.heralds.n20),
        ("vacuum", q.n_vacuum * r.s00, o.n_vacuum_heralds),
        ("x_windows", q.n_x, o.n_x),
        ("x_errors", q.n_x * r.x_error, o.m_x),
        ("bob0", q.z_both * r.z_both + q.z_bob * r.z_bob, o.n_bob0),
        ("bob1", q.z_alice * r.z_alice + q.z_none * r.z_none, o.n_bob1),
        ("z_errors", q.z_both * r.z_both + q.z_none * r.z_none, errors),
    ];
    Ok(rows
        .into_iter()
        .map(|(name, expected, count)| {
            let observed = count as f64 / n;
            let sd = (expected * (1.0 - expected) / n).sqrt();
            let z = if sd > 0.0 {
                (observed - expected) / sd
            } else if observed == expected {
                0.0
            } else {
                f64::INFINITY
            };
            RateCheck {
                name: name.into(),
                expected,
                observed,
                z,
            }
        })
        .collect())
}
