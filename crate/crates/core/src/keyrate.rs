//! Final key rates: the original SNS formula, the AOPP bound chain and its
//! rate, and the vacuum-scan variant that minimises the AOPP rate over every
//! admissible `⟨S₀₀⟩`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{self, TailConfig};
use crate::channel::ObservedStats;
use crate::decoy::{self, DecoyBounds, DecoyOptions, RateBounds, VacuumEstimate};
use crate::error::{Error, Result};
use crate::protocol::{tagged_decomposition, virtual_intensities, ProtocolParams, TaggedDecomposition, VirtualIntensities};

/// Rates below this many bits per pulse pair are reported as zero.
pub const RATE_FLOOR: f64 = 1e-12;

pub const DEFAULT_SCAN_POINTS: usize = 64;

pub fn binary_entropy(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("binary entropy argument {x} is outside [0, 1]")));
    }
    let term = |p: f64| if p > 0.0 { -p * p.log2() } else { 0.0 };
    Ok(term(x) + term(1.0 - x))
}

fn finite_size_cost(p: &ProtocolParams, scale: f64) -> f64 {
    scale * (2.0 / p.eps_cor).log2() + 2.0 * scale * (1.0 / (2f64.sqrt() * p.eps_pa * p.eps_hat)).log2()
}

/// A rate after flooring, remembering whether the formula went negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    /// The unfloored formula value.
    pub raw: f64,
}

impl Rate {
    fn floored(raw: f64) -> Self {
        let value = if raw.is_finite() && raw >= RATE_FLOOR { raw } else { 0.0 };
        Self { value, raw }
    }

    pub fn zero() -> Self {
        Self { value: 0.0, raw: 0.0 }
    }

    pub fn was_floored(&self) -> bool {
        self.value != self.raw
    }
}

/// `(1/N){n₁[1−H(e₁)] − f·n_t·H(E) − log₂(2/ε_cor) − 2log₂(1/(√2 ε_PA ε̂))}`.
pub fn key_rate_original(n1_lower: f64, e1ph_upper: f64, n_t: f64, e_z: f64, p: &ProtocolParams) -> Result<Rate> {
    if !(n1_lower > 0.0) {
        return Ok(Rate::zero());
    }
    let raw = (n1_lower * (1.0 - binary_entropy(e1ph_upper)?)
        - p.ec_inefficiency * n_t * binary_entropy(e_z)?
        - finite_size_cost(p, 1.0))
        / p.n_total;
    Ok(Rate::floored(raw))
}

/// AOPP rate with doubled finite-size terms.
pub fn key_rate_aopp(chain: &AoppChain, n_t_prime: f64, e_z_prime: f64, p: &ProtocolParams) -> Result<Rate> {
    if chain.degenerate.is_some() || !(chain.n1_prime_lower > 0.0) {
        return Ok(Rate::zero());
    }
    let raw = (chain.n1_prime_lower * (1.0 - binary_entropy(chain.e1ph_prime_upper)?)
        - p.ec_inefficiency * n_t_prime * binary_entropy(e_z_prime)?
        - finite_size_cost(p, 2.0))
        / p.n_total;
    Ok(Rate::floored(raw))
}

/// Everything the AOPP chain consumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AoppInputs {
    pub nu1_mean_lower: f64,
    pub nu0_mean_lower: f64,
    pub e1ph_mean_upper: f64,
    pub n_g: f64,
    pub n_odd: f64,
    pub n_t: f64,
    /// Failure probability `ε` of the pairing estimates.
    pub eps: f64,
}

impl AoppInputs {
    pub fn new(db: &DecoyBounds, o: &ObservedStats, p: &ProtocolParams) -> Self {
        Self {
            nu1_mean_lower: db.untagged.nu1_mean_lower,
            nu0_mean_lower: db.untagged.nu0_mean_lower,
            e1ph_mean_upper: db.e1ph_mean_upper.value,
            n_g: o.n_g as f64,
            n_odd: o.n_odd as f64,
            n_t: o.n_t as f64,
            eps: p.eps_aopp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AoppChain {
    pub u: f64,
    pub nu1_lower: f64,
    pub nu0_lower: f64,
    pub n1_lower: f64,
    pub n1_r: f64,
    pub nu1_prime: f64,
    pub nu0_prime: f64,
    pub n_min: f64,
    pub n1_prime_lower: f64,
    pub r: f64,
    pub e_tau: f64,
    pub m_s_upper: f64,
    pub e1ph_prime_upper: f64,
    /// Whether `e1ph_prime_upper` was clamped into `[0, 0.5]`.
    pub e1ph_prime_clamped: bool,
    /// First step at which the chain stopped producing a usable bound.
    pub degenerate: Option<AoppStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AoppStep {
    NoOddPairs,
    UntaggedBits,
    PairedUntaggedBits,
    PairedBitsAfterCorrection,
    SurvivingUntaggedBits,
    RemainderTooSmall,
    PhaseErrorBound,
}

impl AoppChain {
    /// Chernoff inversions used by a full chain.
    pub const CHERNOFF_CALLS: u32 = 6;

    fn stop(mut self, step: AoppStep) -> Self {
        self.degenerate = Some(step);
        self
    }
}

pub fn aopp_chain(x: &AoppInputs, cfg: &TailConfig) -> Result<AoppChain> {
    let mut c = AoppChain::default();
    if !(x.n_odd > 0.0) || !(x.n_g > 0.0) || !(x.n_t > 0.0) {
        return Ok(c.stop(AoppStep::NoOddPairs));
    }
    c.u = x.n_g / (2.0 * x.n_odd);
    c.nu1_lower = bounds::real_lower(c.u * x.nu1_mean_lower, cfg)?;
    c.nu0_lower = bounds::real_lower(c.u * x.nu0_mean_lower, cfg)?;
    c.n1_lower = c.nu1_lower + c.nu0_lower;
    if !(c.n1_lower > 0.0) {
        return Ok(c.stop(AoppStep::UntaggedBits));
    }
    c.n1_r = bounds::real_lower(c.n1_lower * c.n1_lower / (2.0 * c.u * x.n_t), cfg)?;
    if !(c.n1_r > 0.0) {
        return Ok(c.stop(AoppStep::PairedUntaggedBits));
    }
    let slack = (-x.eps.ln() / (2.0 * c.n1_r)).sqrt();
    c.nu1_prime = 2.0 * c.n1_r * (c.nu1_lower / c.n1_lower - slack);
    c.nu0_prime = 2.0 * c.n1_r * (c.nu0_lower / c.n1_lower - slack);
    c.n_min = c.nu0_prime.min(c.nu1_prime);
    if !(c.n_min > 0.0) {
        return Ok(c.stop(AoppStep::PairedBitsAfterCorrection));
    }
    c.n1_prime_lower = 2.0 * bounds::real_lower(c.n_min * (1.0 - c.n_min / (2.0 * c.n1_r)), cfg)?;
    if !(c.n1_prime_lower > 0.0) {
        return Ok(c.stop(AoppStep::SurvivingUntaggedBits));
    }
    let rest = c.n1_lower - 2.0 * c.n1_r;
    if !(rest > 0.0) {
        return Ok(c.stop(AoppStep::RemainderTooSmall));
    }
    c.r = c.n1_lower / rest * (3.0 * rest * rest / x.eps).ln();
    if !(2.0 * c.n1_r > c.r) || !(c.n1_r > c.r) {
        return Ok(c.stop(AoppStep::RemainderTooSmall));
    }
    c.e_tau = bounds::real_upper(2.0 * c.n1_r * x.e1ph_mean_upper, cfg)? / (2.0 * c.n1_r - c.r);
    if !(c.e_tau <= 1.0) {
        return Ok(c.stop(AoppStep::PhaseErrorBound));
    }
    c.m_s_upper = bounds::real_upper((c.n1_r - c.r) * c.e_tau * (1.0 - c.e_tau), cfg)? + c.r;
    let raw = 2.0 * c.m_s_upper / c.n1_prime_lower;
    c.e1ph_prime_upper = raw.clamp(0.0, 0.5);
    c.e1ph_prime_clamped = c.e1ph_prime_upper != raw;
    Ok(c)
}

/// Analysis knobs independent of the protocol parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisOptions {
    pub vacuum: VacuumEstimate,
    /// Outlier-tolerant mode with at most this many out-of-box windows.
    pub n_delta: Option<u64>,
    /// Grid size of the `⟨S₀₀⟩` scan; 0 disables the scan.
    pub scan_points: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            vacuum: VacuumEstimate::Announced,
            n_delta: None,
            scan_points: 0,
        }
    }
}

impl AnalysisOptions {
    fn decoy(&self) -> DecoyOptions {
        DecoyOptions {
            vacuum: self.vacuum,
            outlier: self.n_delta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    S10Clamped,
    S01Clamped,
    PhaseErrorClamped,
    NoUntaggedBits,
    OriginalRateFloored,
    AoppDegenerate,
    AoppPhaseErrorClamped,
    AoppRateFloored,
    ScanRateFloored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    pub rate_original: f64,
    pub rate_aopp: f64,
    /// `R″`, present when the vacuum scan ran.
    pub rate_aopp_scan: Option<f64>,
    /// Unfloored formula values, negative where the key length would be.
    pub raw_original: f64,
    pub raw_aopp: f64,
    pub raw_aopp_scan: Option<f64>,
    pub n_t: f64,
    pub e_z: f64,
    pub n_t_prime: f64,
    pub e_z_prime: f64,
    pub virtual_intensities: VirtualIntensities,
    pub tagged: TaggedDecomposition,
    pub rate_bounds: RateBounds,
    pub decoy: DecoyBounds,
    pub aopp: AoppChain,
    /// Vacuum rate at which the scan found its minimum.
    pub scan_argmin_s00: Option<f64>,
    pub chernoff_calls: u32,
    /// Chernoff calls times `ξ` plus every `ε` term of the rate formulas.
    pub failure_budget: f64,
    pub flags: Vec<Flag>,
}

impl KeyRateReport {
    pub fn rate(&self, mode: RateMode) -> f64 {
        match mode {
            RateMode::Original => self.rate_original,
            RateMode::Aopp => self.rate_aopp,
            RateMode::AoppScan => self.rate_aopp_scan.unwrap_or(self.rate_aopp),
        }
    }

    /// The unfloored formula value behind [`KeyRateReport::rate`].
    pub fn raw(&self, mode: RateMode) -> f64 {
        match mode {
            RateMode::Original => self.raw_original,
            RateMode::Aopp => self.raw_aopp,
            RateMode::AoppScan => self.raw_aopp_scan.unwrap_or(self.raw_aopp),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RateMode {
    Original,
    #[default]
    Aopp,
    AoppScan,
}

struct Prepared {
    cfg: TailConfig,
    virt: VirtualIntensities,
    tagged: TaggedDecomposition,
    rb: RateBounds,
}

fn prepare(p: &ProtocolParams, o: &ObservedStats, opts: &AnalysisOptions) -> Result<Prepared> {
    p.validate()?;
    o.validate()?;
    let cfg = p.tail()?;
    let virt = virtual_intensities(p)?;
    let tagged = tagged_decomposition(p, &virt)?;
    let rb = decoy::rate_bounds(o, &cfg, opts.vacuum)?;
    Ok(Prepared { cfg, virt, tagged, rb })
}

fn aopp_rate_at(pre: &Prepared, rb: &RateBounds, p: &ProtocolParams, o: &ObservedStats, opts: &AnalysisOptions) -> Result<(Rate, DecoyBounds, AoppChain)> {
    let db = decoy::decoy_bounds(p, &pre.virt, &pre.tagged, rb, &opts.decoy(), &pre.cfg)?;
    if !db.certified() {
        return Ok((Rate::zero(), db, AoppChain::default().stop(AoppStep::UntaggedBits)));
    }
    let chain = aopp_chain(&AoppInputs::new(&db, o, p), &pre.cfg)?;
    let rate = key_rate_aopp(&chain, o.n_t_prime as f64, o.e_z_prime, p)?;
    Ok((rate, db, chain))
}

/// Runs the full bound chain on observed statistics.
pub fn analyze(p: &ProtocolParams, o: &ObservedStats, opts: &AnalysisOptions) -> Result<KeyRateReport> {
    let pre = prepare(p, o, opts)?;
    let db = decoy::decoy_bounds(p, &pre.virt, &pre.tagged, &pre.rb, &opts.decoy(), &pre.cfg)?;
    let mut flags = Vec::new();
    if db.s10_lower.clamped {
        flags.push(Flag::S10Clamped);
    }
    if db.s01_lower.clamped {
        flags.push(Flag::S01Clamped);
    }
    if db.e1ph_mean_upper.clamped || db.e1ph_real_upper.clamped {
        flags.push(Flag::PhaseErrorClamped);
    }
    let mut calls = RateBounds::CHERNOFF_CALLS + 2;
    let n_t = o.n_t as f64;
    let (original, chain, aopp) = if db.certified() {
        let original = key_rate_original(db.untagged.n1_lower, db.e1ph_real_upper.value, n_t, o.e_z, p)?;
        let chain = aopp_chain(&AoppInputs::new(&db, o, p), &pre.cfg)?;
        let aopp = key_rate_aopp(&chain, o.n_t_prime as f64, o.e_z_prime, p)?;
        calls += AoppChain::CHERNOFF_CALLS;
        (original, chain, aopp)
    } else {
        flags.push(Flag::NoUntaggedBits);
        (Rate::zero(), AoppChain::default().stop(AoppStep::UntaggedBits), Rate::zero())
    };
    if original.was_floored() {
        flags.push(Flag::OriginalRateFloored);
    }
    if chain.degenerate.is_some() {
        flags.push(Flag::AoppDegenerate);
    }
    if chain.e1ph_prime_clamped {
        flags.push(Flag::AoppPhaseErrorClamped);
    }
    if aopp.was_floored() {
        flags.push(Flag::AoppRateFloored);
    }

    let (scan, scan_argmin_s00) = if opts.scan_points > 0 {
        let (rate, at) = scan_vacuum(&pre, p, o, opts)?;
        if rate.was_floored() {
            flags.push(Flag::ScanRateFloored);
        }
        (Some(rate), Some(at))
    } else {
        (None, None)
    };

    let failure_budget = calls as f64 * p.xi + p.eps_cor + p.eps_pa + p.eps_hat + 3.0 * p.eps_aopp;
    Ok(KeyRateReport {
        rate_original: original.value,
        rate_aopp: aopp.value,
        rate_aopp_scan: scan.map(|r| r.value),
        raw_original: original.raw,
        raw_aopp: aopp.raw,
        raw_aopp_scan: scan.map(|r| r.raw),
        n_t,
        e_z: o.e_z,
        n_t_prime: o.n_t_prime as f64,
        e_z_prime: o.e_z_prime,
        virtual_intensities: pre.virt,
        tagged: pre.tagged,
        rate_bounds: pre.rb,
        decoy: db,
        aopp: chain,
        scan_argmin_s00,
        chernoff_calls: calls,
        failure_budget,
        flags,
    })
}

fn scan_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if lo == hi || points == 1 {
        return vec![lo];
    }
    let last = (points - 1) as f64;
    (0..points)
        .map(|i| if i + 1 == points { hi } else { lo + (hi - lo) * i as f64 / last })
        .collect()
}

fn scan_vacuum(pre: &Prepared, p: &ProtocolParams, o: &ObservedStats, opts: &AnalysisOptions) -> Result<(Rate, f64)> {
    let grid = scan_grid(pre.rb.s00.lo, pre.rb.s00.hi, opts.scan_points);
    let rates: Vec<Result<Rate>> = grid
        .par_iter()
        .map(|&s| aopp_rate_at(pre, &pre.rb.with_vacuum(s), p, o, opts).map(|r| r.0))
        .collect();
    let mut best: Option<(Rate, f64)> = None;
    for (rate, &s) in rates.into_iter().zip(&grid) {
        let rate = rate?;
        if best.is_none_or(|(b, _)| rate.raw < b.raw) {
            best = Some((rate, s));
        }
    }
    Ok(best.expect("scan grid is never empty"))
}

/// `R″`: the AOPP rate minimised over `⟨S₀₀⟩` on a uniform grid.
pub fn key_rate_aopp_scan_s00(p: &ProtocolParams, o: &ObservedStats, opts: &AnalysisOptions, points: usize) -> Result<f64> {
    if points == 0 {
        return Err(Error::invalid("scan_points", "must be >= 1"));
    }
    let pre = prepare(p, o, opts)?;
    Ok(scan_vacuum(&pre, p, o, &AnalysisOptions { scan_points: points, ..*opts })?.0.value)
}
