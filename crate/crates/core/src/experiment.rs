//! Run configuration, single points, distance sweeps and the reference tables.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{absolute_plob, detector_plob, ChannelParams};
use crate::decoy::VacuumEstimate;
use crate::error::{Error, Result};
use crate::keyrate::{AnalysisOptions, KeyRateReport, RateMode};
use crate::optimize::{evaluate, initial_guess, optimize, OptimizationSpec};
use crate::protocol::ProtocolParams;

fn default_alpha() -> f64 {
    ChannelParams::default().alpha
}
fn default_eta_d() -> f64 {
    ChannelParams::default().eta_d
}
fn default_p_d() -> f64 {
    ChannelParams::default().p_d
}
fn default_e_d() -> f64 {
    ChannelParams::default().e_d
}
fn default_slices() -> u32 {
    ChannelParams::default().phase_slices
}

/// `[channel]`: the two fiber lengths are required, everything else defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub l_ac: f64,
    pub l_bc: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_eta_d")]
    pub eta_d: f64,
    #[serde(default = "default_p_d")]
    pub p_d: f64,
    #[serde(default = "default_e_d")]
    pub e_d: f64,
    #[serde(default = "default_slices")]
    pub phase_slices: u32,
}

impl ChannelSection {
    pub fn params(&self) -> ChannelParams {
        ChannelParams {
            l_ac: self.l_ac,
            l_bc: self.l_bc,
            alpha: self.alpha,
            eta_d: self.eta_d,
            p_d: self.p_d,
            e_d: self.e_d,
            phase_slices: self.phase_slices,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeSection {
    pub rate: RateMode,
    /// Outlier mode: at most this many pulses fall outside the intensity box.
    pub n_delta: Option<u64>,
    pub vacuum: VacuumEstimate,
    pub scan_points: usize,
}

impl ModeSection {
    pub fn analysis(&self) -> AnalysisOptions {
        AnalysisOptions {
            vacuum: self.vacuum,
            n_delta: self.n_delta,
            scan_points: self.scan_points,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSection {
    pub budget: usize,
    pub seed: u64,
    pub starts: usize,
    /// Chain sweep points through the previous optimum; off runs points in parallel.
    pub warm_start: bool,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        Self {
            budget: 20_000,
            seed: 1,
            starts: 8,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Total Alice–Bob distance grid (km).
    pub start: f64,
    pub stop: f64,
    pub step: f64,
    /// `l_ac - l_bc`; zero is the symmetric channel.
    #[serde(default)]
    pub asymmetry_km: f64,
}

impl SweepSection {
    pub fn grid(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !self.start.is_finite() || !self.stop.is_finite() {
            return Err(Error::invalid("sweep.step", format!("need a positive step, got {}", self.step)));
        }
        if self.stop < self.start {
            return Err(Error::invalid("sweep.stop", "grid is empty: stop < start"));
        }
        if self.asymmetry_km < 0.0 {
            return Err(Error::invalid("sweep.asymmetry_km", "must be >= 0"));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| self.start + i as f64 * self.step).collect())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    #[default]
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::Config(format!("unknown format `{s}`, expected csv or json"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub path: Option<PathBuf>,
    pub format: OutputFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides every `δ` of both parties.
    #[serde(default)]
    pub delta: Option<f64>,
    pub channel: ChannelSection,
    #[serde(default)]
    pub protocol: ProtocolParams,
    #[serde(default)]
    pub mode: ModeSection,
    /// Optimize the source parameters at every point.
    #[serde(default)]
    pub optimize: Option<OptimizeSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Protocol parameters after the `delta` override.
    pub fn protocol(&self) -> ProtocolParams {
        let mut p = self.protocol.clone();
        if let Some(d) = self.delta {
            p.set_delta(d);
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol().validate()?;
        self.channel.params().validate()?;
        if let Some(s) = &self.sweep {
            s.grid()?;
        }
        if let Some(o) = &self.optimize {
            if o.budget == 0 {
                return Err(Error::invalid("optimize.budget", "must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Optimizer settings for one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Search {
    pub budget: usize,
    pub seed: u64,
    pub starts: usize,
}

impl From<&OptimizeSection> for Search {
    fn from(o: &OptimizeSection) -> Self {
        Self {
            budget: o.budget,
            seed: o.seed,
            starts: o.starts,
        }
    }
}

/// Optimizes the source parameters for `mode` and reports at the optimum.
///
/// The vacuum scan is too expensive to sit inside the search, so the scanned
/// rate is evaluated at the optimum of the unscanned AOPP rate.
pub fn optimize_point(
    ch: &ChannelParams,
    base: &ProtocolParams,
    mode: RateMode,
    analysis: &AnalysisOptions,
    search: &Search,
    warm: Option<&ProtocolParams>,
) -> Result<(ProtocolParams, KeyRateReport)> {
    let objective = if mode == RateMode::AoppScan { RateMode::Aopp } else { mode };
    let mut spec = if ch.l_ac == ch.l_bc {
        OptimizationSpec::symmetric(objective, search.budget, search.seed)
    } else {
        OptimizationSpec::asymmetric(objective, search.budget, search.seed)
    };
    spec.starts = search.starts;
    spec.analysis = *analysis;
    let guess;
    let warm = match warm {
        Some(w) => w,
        None => {
            guess = initial_guess(ch, objective, base);
            &guess
        }
    };
    let res = optimize(&spec, ch, base, Some(warm))?;
    let report = evaluate(&res.params, ch, mode, analysis)?;
    Ok((res.params, report))
}

/// Result of a single configured point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub channel: ChannelParams,
    pub params: ProtocolParams,
    pub mode: RateMode,
    pub rate: f64,
    pub plob: f64,
    pub absolute_plob: f64,
    pub report: KeyRateReport,
}

fn point_at(
    ch: &ChannelParams,
    base: &ProtocolParams,
    mode: &ModeSection,
    search: Option<&Search>,
    warm: Option<&ProtocolParams>,
) -> Result<PointResult> {
    let analysis = mode.analysis();
    let (params, report) = match search {
        Some(s) => optimize_point(ch, base, mode.rate, &analysis, s, warm)?,
        None => (base.clone(), evaluate(base, ch, mode.rate, &analysis)?),
    };
    Ok(PointResult {
        channel: *ch,
        params,
        mode: mode.rate,
        rate: report.rate(mode.rate),
        plob: detector_plob(ch)?,
        absolute_plob: absolute_plob(ch)?,
        report,
    })
}

pub fn run_point(cfg: &RunConfig) -> Result<PointResult> {
    cfg.validate()?;
    let search = cfg.optimize.as_ref().map(Search::from);
    point_at(&cfg.channel.params(), &cfg.protocol(), &cfg.mode, search.as_ref(), None)
}

/// First distance at which the rate reaches the absolute PLOB bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub distance_km: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<PointResult>,
    pub crossing: Option<Crossing>,
}

/// Linear interpolation of `ln(rate / absolute PLOB)` between the first bracketing rows.
pub fn first_crossing(distance: &[f64], rate: &[f64], plob: &[f64]) -> Option<Crossing> {
    let g: Vec<Option<f64>> = rate
        .iter()
        .zip(plob)
        .map(|(&r, &b)| (r > 0.0 && b > 0.0).then(|| (r / b).ln()))
        .collect();
    for i in 1..distance.len() {
        if let (Some(g0), Some(g1)) = (g[i - 1], g[i]) {
            if g0 < 0.0 && g1 >= 0.0 {
                let t = g0 / (g0 - g1);
                let lerp = |a: f64, b: f64| a + t * (b - a);
                return Some(Crossing {
                    distance_km: lerp(distance[i - 1], distance[i]),
                    rate: lerp(rate[i - 1].ln(), rate[i].ln()).exp(),
                });
            }
        }
    }
    None
}

pub fn run_sweep(cfg: &RunConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("missing [sweep] section".into()))?;
    let base = cfg.protocol();
    let search = cfg.optimize.as_ref().map(Search::from);
    let channel_at = |total: f64| {
        let mut ch = cfg.channel.params();
        ch.l_ac = (total + sweep.asymmetry_km) / 2.0;
        ch.l_bc = (total - sweep.asymmetry_km) / 2.0;
        ch
    };
    let grid = sweep.grid()?;
    if let Some(&d) = grid.first() {
        if d < sweep.asymmetry_km {
            return Err(Error::invalid("sweep.start", "shorter than the asymmetry"));
        }
    }
    let chained = cfg.optimize.as_ref().is_some_and(|o| o.warm_start);
    let points: Vec<PointResult> = if chained {
        let mut out: Vec<PointResult> = Vec::with_capacity(grid.len());
        for &d in &grid {
            let warm = out.last().map(|p| &p.params);
            out.push(point_at(&channel_at(d), &base, &cfg.mode, search.as_ref(), warm)?);
        }
        out
    } else {
        grid.par_iter()
            .map(|&d| point_at(&channel_at(d), &base, &cfg.mode, search.as_ref(), None))
            .collect::<Result<_>>()?
    };
    let crossing = first_crossing(
        &grid,
        &points.iter().map(|p| p.rate).collect::<Vec<_>>(),
        &points.iter().map(|p| p.absolute_plob).collect::<Vec<_>>(),
    );
    Ok(SweepResult { points, crossing })
}

/// One CSV row; the column order is part of the interface.
#[derive(Debug, Clone, Serialize)]
pub struct CsvRow {
    pub distance_km: f64,
    pub l_ac: f64,
    pub l_bc: f64,
    pub mode: RateMode,
    pub rate: f64,
    pub plob: f64,
    pub absolute_plob: f64,
    pub rate_original: f64,
    pub rate_aopp: f64,
    pub rate_aopp_scan: Option<f64>,
    pub n_total: f64,
    pub n_t: f64,
    pub e_z: f64,
    pub n1_lower: f64,
    pub e1ph_upper: f64,
    pub n_t_prime: f64,
    pub e_z_prime: f64,
    pub n1_prime_lower: f64,
    pub e1ph_prime_upper: f64,
    pub failure_budget: f64,
    pub mu_a1: f64,
    pub mu_a2: f64,
    pub mu_az: f64,
    pub p_a1: f64,
    pub p_a2: f64,
    pub p_az: f64,
    pub eps_a: f64,
    pub mu_b1: f64,
    pub mu_b2: f64,
    pub mu_bz: f64,
    pub p_b1: f64,
    pub p_b2: f64,
    pub p_bz: f64,
    pub eps_b: f64,
}

impl From<&PointResult> for CsvRow {
    fn from(p: &PointResult) -> Self {
        let r = &p.report;
        let (a, b) = (&p.params.alice, &p.params.bob);
        Self {
            distance_km: p.channel.total_km(),
            l_ac: p.channel.l_ac,
            l_bc: p.channel.l_bc,
            mode: p.mode,
            rate: p.rate,
            plob: p.plob,
            absolute_plob: p.absolute_plob,
            rate_original: r.rate_original,
            rate_aopp: r.rate_aopp,
            rate_aopp_scan: r.rate_aopp_scan,
            n_total: p.params.n_total,
            n_t: r.n_t,
            e_z: r.e_z,
            n1_lower: r.decoy.untagged.n1_lower,
            e1ph_upper: r.decoy.e1ph_real_upper.value,
            n_t_prime: r.n_t_prime,
            e_z_prime: r.e_z_prime,
            n1_prime_lower: r.aopp.n1_prime_lower,
            e1ph_prime_upper: r.aopp.e1ph_prime_upper,
            failure_budget: r.failure_budget,
            mu_a1: a.mu_1,
            mu_a2: a.mu_2,
            mu_az: a.mu_z,
            p_a1: a.p_1,
            p_a2: a.p_2,
            p_az: a.p_z,
            eps_a: a.eps,
            mu_b1: b.mu_1,
            mu_b2: b.mu_2,
            mu_bz: b.mu_z,
            p_b1: b.p_1,
            p_b2: b.p_2,
            p_bz: b.p_z,
            eps_b: b.eps,
        }
    }
}

pub fn write_csv<W: Write>(points: &[PointResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(CsvRow::from(p)).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write, T: Serialize>(value: &T, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::Io(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

/// Published reference values the table reproduction is scored against.
pub mod reference {
    pub const DISTANCE_KM: f64 = 350.0;
    pub const ASYMMETRY_KM: f64 = 50.0;
    pub const DELTAS: [f64; 4] = [0.0, 0.02, 0.05, 0.10];
    pub const RATES_ORIGINAL: [f64; 4] = [5.8e-7, 5.15e-7, 4.35e-7, 3.26e-7];
    pub const RATES_AOPP: [f64; 4] = [1.33e-6, 1.20e-6, 1.05e-6, 8.46e-7];
    pub const RATE_TOLERANCE: f64 = 0.10;

    /// `(asymmetry, method, δ, distance, rate)` of the first PLOB crossings.
    pub const CROSSINGS: [(f64, super::RateMode, f64, f64, f64); 12] = {
        use super::RateMode::{AoppScan as A, Original as O};
        [
            (0.0, A, 0.0, 233.0, 3.16e-5),
            (0.0, A, 0.02, 237.0, 2.67e-5),
            (0.0, A, 0.05, 241.0, 2.18e-5),
            (0.0, O, 0.0, 263.0, 8.00e-6),
            (0.0, O, 0.02, 267.0, 6.66e-6),
            (0.0, O, 0.05, 272.0, 5.24e-6),
            (50.0, A, 0.0, 246.0, 1.73e-5),
            (50.0, A, 0.02, 250.0, 1.44e-5),
            (50.0, A, 0.05, 256.0, 1.11e-5),
            (50.0, O, 0.0, 280.0, 3.66e-6),
            (50.0, O, 0.02, 284.0, 3.00e-6),
            (50.0, O, 0.05, 291.0, 2.18e-6),
        ]
    };
    pub const CROSSING_DISTANCE_TOLERANCE_KM: f64 = 4.0;
    pub const CROSSING_RATE_TOLERANCE: f64 = 0.15;

    /// Mean relative rate drop per percent of `δ`, in percent.
    pub const TREND: f64 = 4.0;
    pub const TREND_TOLERANCE: f64 = 1.5;
}

/// Search effort for the table reproduction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableSettings {
    pub search: Search,
    /// Budget of each optimization inside the crossing search.
    pub crossing_budget: usize,
    pub vacuum: VacuumEstimate,
}

impl Default for TableSettings {
    fn default() -> Self {
        Self {
            search: Search {
                budget: 150_000,
                seed: 7,
                starts: 16,
            },
            crossing_budget: 40_000,
            vacuum: VacuumEstimate::AllVacuumWindows,
        }
    }
}

impl TableSettings {
    fn analysis(&self) -> AnalysisOptions {
        AnalysisOptions {
            vacuum: self.vacuum,
            ..AnalysisOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub method: RateMode,
    pub delta: f64,
    pub reference: f64,
    pub computed: f64,
    pub deviation: f64,
    pub pass: bool,
    pub params: ProtocolParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingCell {
    pub asymmetry_km: f64,
    pub method: RateMode,
    pub delta: f64,
    pub reference_km: f64,
    pub reference_rate: f64,
    pub distance_km: f64,
    pub rate: f64,
    pub distance_error_km: f64,
    pub rate_deviation: f64,
    pub pass: bool,
}

fn base_with_delta(delta: f64) -> ProtocolParams {
    let mut p = ProtocolParams::default();
    p.set_delta(delta);
    p
}

/// The 350 km asymmetric rate table, Original row first.
pub fn rate_table(settings: &TableSettings) -> Result<Vec<RateCell>> {
    use reference::*;
    let ch = ChannelParams::asymmetric(DISTANCE_KM, ASYMMETRY_KM);
    let analysis = settings.analysis();
    let mut cells = Vec::new();
    for (method, refs) in [(RateMode::Original, RATES_ORIGINAL), (RateMode::AoppScan, RATES_AOPP)] {
        for (&delta, &reference) in DELTAS.iter().zip(&refs) {
            let (params, report) =
                optimize_point(&ch, &base_with_delta(delta), method, &analysis, &settings.search, None)?;
            let computed = report.rate(method);
            let deviation = computed / reference - 1.0;
            cells.push(RateCell {
                method,
                delta,
                reference,
                computed,
                deviation,
                pass: deviation.abs() <= RATE_TOLERANCE,
                params,
            });
        }
    }
    Ok(cells)
}

/// Mean over methods and nonzero `δ` of `(1 - R(δ)/R(0)) / δ[%]`, in percent.
pub fn trend(cells: &[RateCell]) -> Option<f64> {
    let mut drops = Vec::new();
    for method in [RateMode::Original, RateMode::AoppScan] {
        let row: Vec<&RateCell> = cells.iter().filter(|c| c.method == method).collect();
        let r0 = row.iter().find(|c| c.delta == 0.0)?.computed;
        if !(r0 > 0.0) {
            return None;
        }
        for c in row.iter().filter(|c| c.delta > 0.0) {
            drops.push((1.0 - c.computed / r0) / (100.0 * c.delta) * 100.0);
        }
    }
    (!drops.is_empty()).then(|| drops.iter().sum::<f64>() / drops.len() as f64)
}

/// First crossing of the optimized rate with the absolute PLOB bound,
/// bracketed on a 20 km grid and refined by Illinois regula falsi on
/// `ln(rate / PLOB)`.
pub fn find_crossing(
    asymmetry_km: f64,
    delta: f64,
    method: RateMode,
    settings: &TableSettings,
) -> Result<Crossing> {
    let base = base_with_delta(delta);
    let analysis = settings.analysis();
    let search = Search {
        budget: settings.crossing_budget,
        ..settings.search
    };
    let mut warm: Option<ProtocolParams> = None;
    let gap = |d: f64, warm: &mut Option<ProtocolParams>| -> Result<(f64, f64)> {
        let ch = ChannelParams::asymmetric(d, asymmetry_km);
        let (params, report) = optimize_point(&ch, &base, method, &analysis, &search, warm.as_ref())?;
        *warm = Some(params);
        let rate = report.rate(method);
        let g = if rate > 0.0 { (rate / absolute_plob(&ch)?).ln() } else { f64::NAN };
        Ok((g, rate))
    };

    let mut lo = (200f64.max(asymmetry_km + 10.0), f64::NAN);
    lo.1 = gap(lo.0, &mut warm)?.0;
    if !(lo.1 < 0.0) {
        return Err(Error::Domain(format!("rate already above the bound at {} km", lo.0)));
    }
    let mut hi = (lo.0, lo.1);
    loop {
        hi.0 += 20.0;
        let (g, _) = gap(hi.0, &mut warm)?;
        if g.is_nan() || hi.0 > 600.0 {
            return Err(Error::Domain("rate never reaches the absolute PLOB bound".into()));
        }
        hi.1 = g;
        if g >= 0.0 {
            break;
        }
        lo = hi;
    }
    // Illinois: halve the stale end's value so the bracket shrinks from both sides
    let mut side = 0i8;
    for _ in 0..8 {
        if hi.0 - lo.0 < 0.2 {
            break;
        }
        let d = lo.0 - lo.1 * (hi.0 - lo.0) / (hi.1 - lo.1);
        let (g, _) = gap(d, &mut warm)?;
        if g.is_nan() {
            return Err(Error::Domain(format!("zero rate at {d} km inside the bracket")));
        }
        if g < 0.0 {
            lo = (d, g);
            if side == -1 {
                hi.1 /= 2.0;
            }
            side = -1;
        } else {
            hi = (d, g);
            if side == 1 {
                lo.1 /= 2.0;
            }
            side = 1;
        }
    }
    let d = lo.0 - lo.1 * (hi.0 - lo.0) / (hi.1 - lo.1);
    let ch = ChannelParams::asymmetric(d, asymmetry_km);
    // on the crossing the rate equals the bound
    Ok(Crossing {
        distance_km: d,
        rate: absolute_plob(&ch)?,
    })
}

pub fn crossing_table(settings: &TableSettings) -> Result<Vec<CrossingCell>> {
    use reference::*;
    CROSSINGS
        .iter()
        .map(|&(asymmetry_km, method, delta, reference_km, reference_rate)| {
            let c = find_crossing(asymmetry_km, delta, method, settings)?;
            let distance_error_km = c.distance_km - reference_km;
            let rate_deviation = c.rate / reference_rate - 1.0;
            Ok(CrossingCell {
                asymmetry_km,
                method,
                delta,
                reference_km,
                reference_rate,
                distance_km: c.distance_km,
                rate: c.rate,
                distance_error_km,
                rate_deviation,
                pass: distance_error_km.abs() <= CROSSING_DISTANCE_TOLERANCE_KM
                    && rate_deviation.abs() <= CROSSING_RATE_TOLERANCE,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TablesReport {
    pub rates: Vec<RateCell>,
    pub crossings: Vec<CrossingCell>,
    pub trend: Option<f64>,
    pub trend_pass: bool,
}

impl TablesReport {
    pub fn pass(&self) -> bool {
        self.trend_pass && self.rates.iter().all(|c| c.pass) && self.crossings.iter().all(|c| c.pass)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
        s.push_str("rate table (350 km, l_ac - l_bc = 50 km)\n");
        s.push_str("method     delta  reference  computed   deviation\n");
        for c in &self.rates {
            s.push_str(&format!(
                "{:<10} {:>4.0}%  {:<9.3e}  {:<9.3e}  {:+7.2}%  {}\n",
                method_label(c.method),
                c.delta * 100.0,
                c.reference,
                c.computed,
                c.deviation * 100.0,
                verdict(c.pass)
            ));
        }
        s.push_str("\nfirst crossings with the absolute PLOB bound\n");
        s.push_str("channel     method     delta  ref km  km      ref rate   rate       dev\n");
        for c in &self.crossings {
            s.push_str(&format!(
                "{:<11} {:<10} {:>4.0}%  {:>6.1}  {:>6.1}  {:<9.3e}  {:<9.3e}  {:+6.1}%  {}\n",
                if c.asymmetry_km == 0.0 { "symmetric" } else { "asymmetric" },
                method_label(c.method),
                c.delta * 100.0,
                c.reference_km,
                c.distance_km,
                c.reference_rate,
                c.rate,
                c.rate_deviation * 100.0,
                verdict(c.pass)
            ));
        }
        match self.trend {
            Some(t) => s.push_str(&format!(
                "\nrate drop per 1% of delta: {t:.2}% (reference {:.1}%)  {}\n",
                reference::TREND,
                verdict(self.trend_pass)
            )),
            None => s.push_str("\nrate drop per 1% of delta: undefined  FAIL\n"),
        }
        s
    }
}

fn method_label(m: RateMode) -> &'static str {
    match m {
        RateMode::Original => "original",
        RateMode::Aopp => "aopp",
        RateMode::AoppScan => "aopp-scan",
    }
}

pub fn reproduce_tables(settings: &TableSettings) -> Result<TablesReport> {
    let rates = rate_table(settings)?;
    let crossings = crossing_table(settings)?;
    let trend = trend(&rates);
    let trend_pass = trend.is_some_and(|t| (t - reference::TREND).abs() <= reference::TREND_TOLERANCE);
    Ok(TablesReport {
        rates,
        crossings,
        trend,
        trend_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[channel]\nl_ac = 100.0\nl_bc = 100.0\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.channel.params(), ChannelParams::symmetric(200.0));
        assert_eq!(cfg.protocol, ProtocolParams::default());
        assert_eq!(cfg.mode.rate, RateMode::Aopp);
        assert!(cfg.sweep.is_none() && cfg.optimize.is_none());
    }

    #[test]
    fn missing_field_is_named() {
        let err = RunConfig::from_toml("[channel]\nl_ac = 100.0\n").unwrap_err();
        assert!(err.to_string().contains("l_bc"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected_with_line() {
        let err = RunConfig::from_toml("[channel]\nl_ac = 1.0\nl_bc = 1.0\n[protocol]\nfoo = 2\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("foo") && msg.contains("line 5"), "{msg}");
    }

    #[test]
    fn delta_one_fails_validation() {
        let cfg = RunConfig::from_toml(&format!("delta = 1.0\n{MINIMAL}")).unwrap();
        let err = run_point(&cfg).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { .. }));
        assert!(err.to_string().contains("delta"), "{err}");
    }

    #[test]
    fn nested_sections_parse() {
        let text = format!(
            "delta = 0.02\n{MINIMAL}[protocol]\nn_total = 1e12\n[protocol.alice]\nmu_1 = 0.05\n\
             [mode]\nrate = \"aopp-scan\"\nn_delta = 100\nvacuum = \"all_vacuum_windows\"\n\
             [optimize]\nbudget = 10\n[sweep]\nstart = 100\nstop = 120\nstep = 10\nasymmetry_km = 20\n\
             [output]\nformat = \"csv\"\npath = \"out.csv\"\n"
        );
        let cfg = RunConfig::from_toml(&text).unwrap();
        let p = cfg.protocol();
        assert_eq!(p.alice.delta_z, 0.02);
        assert_eq!(p.alice.mu_1, 0.05);
        assert_eq!(p.n_total, 1e12);
        assert_eq!(cfg.mode.n_delta, Some(100));
        assert_eq!(cfg.mode.rate, RateMode::AoppScan);
        assert_eq!(cfg.sweep.unwrap().grid().unwrap(), vec![100.0, 110.0, 120.0]);
        assert_eq!(cfg.output.format, OutputFormat::Csv);
        assert!(cfg.optimize.unwrap().warm_start);
    }

    #[test]
    fn empty_sweep_is_rejected() {
        let s = SweepSection {
            start: 10.0,
            stop: 5.0,
            step: 1.0,
            asymmetry_km: 0.0,
        };
        assert!(s.grid().is_err());
    }

    #[test]
    fn default_point_at_200_km_is_positive() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        let r = run_point(&cfg).unwrap();
        assert!(r.rate > 0.0);
        assert_eq!(r.rate, r.report.rate_aopp);
    }

    #[test]
    fn crossing_interpolates_in_log_ratio() {
        let d = [100.0, 110.0, 120.0, 130.0];
        let plob = [4.0, 2.0, 1.0, 0.5];
        let rate = [1.0, 1.0, 2.0, 3.0];
        let c = first_crossing(&d, &rate, &plob).unwrap();
        // ln(1/2) -> ln(2): halfway
        assert!((c.distance_km - 115.0).abs() < 1e-12);
        assert!((c.rate - 2f64.sqrt()).abs() < 1e-12);
        assert!(first_crossing(&d, &[0.0; 4], &plob).is_none());
    }

    #[test]
    fn trend_of_reference_values() {
        let mk = |method, delta, computed| RateCell {
            method,
            delta,
            reference: computed,
            computed,
            deviation: 0.0,
            pass: true,
            params: ProtocolParams::default(),
        };
        let mut cells = Vec::new();
        for (i, &d) in reference::DELTAS.iter().enumerate() {
            cells.push(mk(RateMode::Original, d, reference::RATES_ORIGINAL[i]));
            cells.push(mk(RateMode::AoppScan, d, reference::RATES_AOPP[i]));
        }
        let t = trend(&cells).unwrap();
        assert!((t - 4.62).abs() < 0.01, "{t}");
    }

    #[test]
    fn csv_has_fixed_header() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        let r = run_point(&cfg).unwrap();
        let mut buf = Vec::new();
        write_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("distance_km,l_ac,l_bc,mode,rate,plob,absolute_plob,"));
        assert_eq!(text.lines().count(), 2);
    }
}
