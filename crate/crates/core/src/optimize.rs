//! Derivative-free maximisation of the key rate over protocol parameters.
//!
//! The search runs in the unit cube. Intensities map onto a log scale, the
//! second decoy intensity is placed between the first decoy and its upper
//! bound so `μ₁ < μ₂` always holds, and `p₂` is a fraction of what `p₁`
//! leaves over. Each Latin-hypercube start runs coordinate descent with
//! halving steps. Further rounds restart from random perturbations of the
//! incumbent until the search budget is spent, and a Nelder-Mead pass
//! polishes the result.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{linear_model_observed, ChannelParams};
use crate::error::{Error, Result};
use crate::keyrate::{analyze, AnalysisOptions, KeyRateReport, RateMode};
use crate::protocol::{Interval, ProtocolParams, Side, SourceSet};

/// Smallest vacuum-decoy probability kept by the `p₂` reparameterisation.
const MIN_VACUUM: f64 = 1e-4;
const MIN_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceField {
    Mu1,
    Mu2,
    MuZ,
    P1,
    P2,
    PZ,
    Eps,
}

impl SourceField {
    pub const ALL: [SourceField; 7] = [Self::Mu1, Self::Mu2, Self::MuZ, Self::P1, Self::P2, Self::PZ, Self::Eps];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mu1 => "mu_1",
            Self::Mu2 => "mu_2",
            Self::MuZ => "mu_z",
            Self::P1 => "p_1",
            Self::P2 => "p_2",
            Self::PZ => "p_z",
            Self::Eps => "eps",
        }
    }

    fn is_intensity(self) -> bool {
        matches!(self, Self::Mu1 | Self::Mu2 | Self::MuZ)
    }

    pub fn default_bounds(self) -> Interval {
        if self.is_intensity() {
            Interval::new(1e-4, 1.0)
        } else {
            Interval::new(1e-4, 0.999)
        }
    }

    fn get(self, s: &SourceSet) -> f64 {
        match self {
            Self::Mu1 => s.mu_1,
            Self::Mu2 => s.mu_2,
            Self::MuZ => s.mu_z,
            Self::P1 => s.p_1,
            Self::P2 => s.p_2,
            Self::PZ => s.p_z,
            Self::Eps => s.eps,
        }
    }

    fn set(self, s: &mut SourceSet, v: f64) {
        match self {
            Self::Mu1 => s.mu_1 = v,
            Self::Mu2 => s.mu_2 = v,
            Self::MuZ => s.mu_z = v,
            Self::P1 => s.p_1 = v,
            Self::P2 => s.p_2 = v,
            Self::PZ => s.p_z = v,
            Self::Eps => s.eps = v,
        }
    }
}

/// One optimised parameter; `side: None` ties Alice and Bob together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeParam {
    pub field: SourceField,
    pub side: Option<Side>,
    pub bounds: Interval,
}

impl FreeParam {
    pub fn label(&self) -> String {
        match self.side {
            None => self.field.name().to_string(),
            Some(Side::Alice) => format!("alice.{}", self.field.name()),
            Some(Side::Bob) => format!("bob.{}", self.field.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationSpec {
    pub free: Vec<FreeParam>,
    pub objective: RateMode,
    pub budget: usize,
    pub seed: u64,
    /// Latin-hypercube starts for coordinate descent.
    pub starts: usize,
    pub analysis: AnalysisOptions,
}

impl OptimizationSpec {
    /// All seven source parameters, shared by both parties.
    pub fn symmetric(objective: RateMode, budget: usize, seed: u64) -> Self {
        Self::build(objective, budget, seed, &[None])
    }

    /// All seven source parameters of each party, optimised separately.
    pub fn asymmetric(objective: RateMode, budget: usize, seed: u64) -> Self {
        Self::build(objective, budget, seed, &[Some(Side::Alice), Some(Side::Bob)])
    }

    fn build(objective: RateMode, budget: usize, seed: u64, sides: &[Option<Side>]) -> Self {
        let free = sides
            .iter()
            .flat_map(|&side| {
                SourceField::ALL.iter().map(move |&field| FreeParam {
                    field,
                    side,
                    bounds: field.default_bounds(),
                })
            })
            .collect();
        Self {
            free,
            objective,
            budget,
            seed,
            starts: 8,
            analysis: AnalysisOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.free.is_empty() {
            return Err(Error::invalid("optimize.free", "no free parameters"));
        }
        if self.budget == 0 {
            return Err(Error::invalid("optimize.budget", "must be >= 1"));
        }
        for f in &self.free {
            let b = f.bounds;
            if !(b.lo <= b.hi) || !b.lo.is_finite() || !b.hi.is_finite() {
                return Err(Error::invalid(f.label(), format!("empty box [{}, {}]", b.lo, b.hi)));
            }
            if f.field.is_intensity() && !(b.lo > 0.0) {
                return Err(Error::invalid(f.label(), "intensity box must be positive"));
            }
            if !f.field.is_intensity() && !(b.lo >= 0.0 && b.hi <= 1.0) {
                return Err(Error::invalid(f.label(), "probability box must lie in [0, 1]"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.free {
            let sides: &[Side] = match f.side {
                None => &[Side::Alice, Side::Bob],
                Some(Side::Alice) => &[Side::Alice],
                Some(Side::Bob) => &[Side::Bob],
            };
            for &s in sides {
                if !seen.insert((f.field, s)) {
                    return Err(Error::invalid(f.label(), "parameter listed twice"));
                }
            }
        }
        Ok(())
    }

    fn find(&self, field: SourceField, side: Side) -> Option<(usize, &FreeParam)> {
        self.free
            .iter()
            .enumerate()
            .find(|(_, f)| f.field == field && f.side.is_none_or(|s| s == side))
    }

    /// Parameters at the cube point `x`.
    pub fn decode(&self, x: &[f64], base: &ProtocolParams) -> ProtocolParams {
        let mut p = base.clone();
        for side in [Side::Alice, Side::Bob] {
            let src = p.side_mut(side);
            // independent coordinates first, dependent ones read the result
            for field in [SourceField::Mu1, SourceField::MuZ, SourceField::P1, SourceField::PZ, SourceField::Eps] {
                if let Some((i, f)) = self.find(field, side) {
                    let v = if field.is_intensity() {
                        log_map(x[i], f.bounds)
                    } else {
                        lin_map(x[i], f.bounds)
                    };
                    field.set(src, v);
                }
            }
            if let Some((i, f)) = self.find(SourceField::Mu2, side) {
                let lo = src.mu_1.max(f.bounds.lo);
                src.mu_2 = if lo < f.bounds.hi {
                    lo + x[i] * (f.bounds.hi - lo)
                } else {
                    f.bounds.hi
                };
            }
            if let Some((i, f)) = self.find(SourceField::P2, side) {
                let hi = f.bounds.hi.min(1.0 - src.p_1 - MIN_VACUUM).max(f.bounds.lo);
                src.p_2 = lin_map(x[i], Interval::new(f.bounds.lo, hi));
            }
        }
        p
    }

    /// Cube point reproducing `p` where the parameterisation allows it.
    pub fn encode(&self, p: &ProtocolParams) -> Vec<f64> {
        self.free
            .iter()
            .map(|f| {
                let side = f.side.unwrap_or(Side::Alice);
                let src = p.side(side);
                let v = f.field.get(src);
                let x = match f.field {
                    SourceField::Mu1 | SourceField::MuZ => log_unmap(v, f.bounds),
                    SourceField::Mu2 => {
                        let lo = src.mu_1.max(f.bounds.lo);
                        if f.bounds.hi > lo {
                            (v - lo) / (f.bounds.hi - lo)
                        } else {
                            0.0
                        }
                    }
                    SourceField::P2 => {
                        let hi = f.bounds.hi.min(1.0 - src.p_1 - MIN_VACUUM).max(f.bounds.lo);
                        lin_unmap(v, Interval::new(f.bounds.lo, hi))
                    }
                    _ => lin_unmap(v, f.bounds),
                };
                if x.is_finite() {
                    x.clamp(0.0, 1.0)
                } else {
                    0.5
                }
            })
            .collect()
    }
}

fn lin_map(t: f64, b: Interval) -> f64 {
    b.lo + t * (b.hi - b.lo)
}

fn lin_unmap(v: f64, b: Interval) -> f64 {
    if b.hi > b.lo {
        (v - b.lo) / (b.hi - b.lo)
    } else {
        0.0
    }
}

fn log_map(t: f64, b: Interval) -> f64 {
    if b.hi > b.lo {
        (b.lo.ln() + t * (b.hi.ln() - b.lo.ln())).exp().clamp(b.lo, b.hi)
    } else {
        b.lo
    }
}

fn log_unmap(v: f64, b: Interval) -> f64 {
    if b.hi > b.lo {
        (v.ln() - b.lo.ln()) / (b.hi.ln() - b.lo.ln())
    } else {
        0.0
    }
}

/// A starting point that balances the two arms of the interferometer.
///
/// The party behind the lossier arm keeps the nominal intensities; the other
/// party scales its decoy intensities by the transmittance ratio and its
/// sending probability so that the untagged single-photon weights stay
/// balanced.
pub fn initial_guess(ch: &ChannelParams, mode: RateMode, base: &ProtocolParams) -> ProtocolParams {
    let mut p = base.clone();
    let eps = if mode == RateMode::Original { 0.06 } else { 0.25 };
    let (eta_a, eta_b) = (ch.eta_a(), ch.eta_b());
    let (far, near, ratio) = if eta_a <= eta_b {
        (Side::Alice, Side::Bob, eta_a / eta_b)
    } else {
        (Side::Bob, Side::Alice, eta_b / eta_a)
    };
    let odds = eps / (1.0 - eps) * ratio;
    for (side, scale, e) in [(far, 1.0, eps), (near, ratio, odds / (1.0 + odds))] {
        let s = p.side_mut(side);
        s.mu_1 = 0.1 * scale;
        s.mu_2 = 0.4 * scale;
        s.mu_z = 0.45;
        s.p_1 = 0.6;
        s.p_2 = 0.2;
        s.p_z = 0.8;
        s.eps = e;
    }
    p
}

/// One objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub start: usize,
    pub x: Vec<f64>,
    pub rate: f64,
    /// Unfloored rate, used to steer through zero-rate regions.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub params: ProtocolParams,
    pub rate: f64,
    pub report: Option<KeyRateReport>,
    pub evaluations: usize,
    /// Every evaluation found a zero rate.
    pub zero_everywhere: bool,
    pub trace: Vec<TraceEntry>,
}

/// The objective: rate of the linear-model statistics at `p`.
pub fn evaluate(p: &ProtocolParams, ch: &ChannelParams, mode: RateMode, opts: &AnalysisOptions) -> Result<KeyRateReport> {
    let mut opts = *opts;
    if mode != RateMode::AoppScan {
        opts.scan_points = 0;
    } else if opts.scan_points == 0 {
        opts.scan_points = crate::keyrate::DEFAULT_SCAN_POINTS;
    }
    let o = linear_model_observed(p, ch)?;
    analyze(p, &o, &opts)
}

struct Objective<'a> {
    spec: &'a OptimizationSpec,
    ch: &'a ChannelParams,
    base: &'a ProtocolParams,
}

impl Objective<'_> {
    fn eval(&self, x: &[f64]) -> (f64, f64) {
        let p = self.spec.decode(x, self.base);
        match evaluate(&p, self.ch, self.spec.objective, &self.spec.analysis) {
            Ok(r) => {
                let rate = r.rate(self.spec.objective);
                let score = if rate > 0.0 {
                    rate
                } else if r.decoy.certified() {
                    r.raw(self.spec.objective).min(0.0) - 1.0
                } else {
                    -2.0
                };
                (rate, score)
            }
            Err(_) => (0.0, f64::NEG_INFINITY),
        }
    }
}

/// Evaluation log of one search thread, with its own budget.
struct Run<'a> {
    obj: &'a Objective<'a>,
    start: usize,
    left: usize,
    trace: Vec<TraceEntry>,
    best: Option<TraceEntry>,
}

impl<'a> Run<'a> {
    fn new(obj: &'a Objective<'a>, start: usize, budget: usize) -> Self {
        Self {
            obj,
            start,
            left: budget,
            trace: Vec::new(),
            best: None,
        }
    }

    fn f(&mut self, x: &[f64]) -> Option<f64> {
        if self.left == 0 {
            return None;
        }
        self.left -= 1;
        let (rate, score) = self.obj.eval(x);
        let e = TraceEntry {
            start: self.start,
            x: x.to_vec(),
            rate,
            score,
        };
        if self.best.as_ref().is_none_or(|b| better(&e, b)) {
            self.best = Some(e.clone());
        }
        self.trace.push(e);
        Some(score)
    }

    fn coordinate_descent(&mut self, x0: Vec<f64>) {
        let Some(mut fx) = self.f(&x0) else { return };
        let mut x = x0;
        let mut step = 0.125;
        while step >= MIN_STEP {
            let mut improved = false;
            for i in 0..x.len() {
                for dir in [1.0, -1.0] {
                    let mut y = x.clone();
                    y[i] = (x[i] + dir * step).clamp(0.0, 1.0);
                    if y[i] == x[i] {
                        continue;
                    }
                    let Some(fy) = self.f(&y) else { return };
                    if fy > fx {
                        // keep going in a direction that pays off
                        x = y;
                        fx = fy;
                        improved = true;
                        loop {
                            let mut z = x.clone();
                            z[i] = (x[i] + dir * step * 2.0).clamp(0.0, 1.0);
                            if z[i] == x[i] {
                                break;
                            }
                            let Some(fz) = self.f(&z) else { return };
                            if fz > fx {
                                x = z;
                                fx = fz;
                            } else {
                                break;
                            }
                        }
                        break;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
    }

    fn nelder_mead(&mut self, x0: &[f64], scale: f64) {
        let n = x0.len();
        let clamp = |v: Vec<f64>| v.into_iter().map(|t| t.clamp(0.0, 1.0)).collect::<Vec<_>>();
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        let Some(f0) = self.f(x0) else { return };
        simplex.push((x0.to_vec(), f0));
        for i in 0..n {
            let mut y = x0.to_vec();
            y[i] = if y[i] + scale <= 1.0 { y[i] + scale } else { y[i] - scale };
            let y = clamp(y);
            let Some(fy) = self.f(&y) else { return };
            simplex.push((y, fy));
        }
        loop {
            // maximising: best first
            simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
            let spread = simplex[0].1 - simplex[n].1;
            if spread.abs() <= 1e-12 * simplex[0].1.abs().max(1e-300) {
                let size: f64 = simplex[1..]
                    .iter()
                    .map(|(v, _)| v.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                    .fold(0.0, f64::max);
                if size < MIN_STEP {
                    return;
                }
            }
            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|(v, _)| v[j]).sum::<f64>() / n as f64)
                .collect();
            let worst = simplex[n].clone();
            let toward = |t: f64| clamp(centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect());
            let xr = toward(1.0);
            let Some(fr) = self.f(&xr) else { return };
            if fr > simplex[0].1 {
                let xe = toward(2.0);
                let Some(fe) = self.f(&xe) else { return };
                simplex[n] = if fe > fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr > simplex[n - 1].1 {
                simplex[n] = (xr, fr);
                continue;
            }
            let xc = if fr > worst.1 { toward(0.5) } else { toward(-0.5) };
            let Some(fc) = self.f(&xc) else { return };
            if fc > worst.1.max(fr.min(worst.1)) {
                simplex[n] = (xc, fc);
                continue;
            }
            let best = simplex[0].0.clone();
            for k in 1..=n {
                let y: Vec<f64> = best.iter().zip(&simplex[k].0).map(|(b, v)| b + 0.5 * (v - b)).collect();
                let Some(fy) = self.f(&y) else { return };
                simplex[k] = (y, fy);
            }
        }
    }
}

/// Higher rate wins, then higher score, then the lexicographically smaller point.
fn better(a: &TraceEntry, b: &TraceEntry) -> bool {
    use std::cmp::Ordering;
    let by_rate = a.rate.total_cmp(&b.rate);
    let ord = if by_rate != Ordering::Equal {
        by_rate
    } else {
        let by_score = a.score.total_cmp(&b.score);
        if by_score != Ordering::Equal {
            by_score
        } else {
            b.x.partial_cmp(&a.x).unwrap_or(Ordering::Equal)
        }
    };
    ord == Ordering::Greater
}

fn latin_hypercube(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; dim]; n];
    for j in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (i, s) in strata.into_iter().enumerate() {
            points[i][j] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    points
}

/// Maximises the objective rate over the free parameters of `spec`.
///
/// `warm` adds the cube point of a previous optimum as an extra start.
pub fn optimize(
    spec: &OptimizationSpec,
    ch: &ChannelParams,
    base: &ProtocolParams,
    warm: Option<&ProtocolParams>,
) -> Result<OptimizationResult> {
    spec.validate()?;
    ch.validate()?;
    base.validate()?;
    let obj = Objective { spec, ch, base };
    let dim = spec.free.len();
    let center = vec![0.5; dim];

    let mut head = Run::new(&obj, 0, 1);
    head.f(&center);
    let mut trace = head.trace;
    let mut best = head.best.expect("one evaluation was budgeted");

    if spec.budget > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n_starts = spec.starts.max(1);
        let mut starts = latin_hypercube(n_starts, dim, &mut rng);
        if let Some(w) = warm {
            starts.insert(0, spec.encode(w));
        }
        let mut used = 1;
        let mut next_id = 1;
        // a fifth of the budget goes to the polish
        let search_budget = (spec.budget - 1) * 4 / 5;
        let per_start = (search_budget / 2 / starts.len()).max(1);
        let mut sigma = 0.1;
        loop {
            let count = starts.len();
            let runs: Vec<(Vec<TraceEntry>, Option<TraceEntry>)> = starts
                .into_par_iter()
                .enumerate()
                .map(|(k, x0)| {
                    let mut run = Run::new(&obj, next_id + k, per_start);
                    run.coordinate_descent(x0);
                    (run.trace, run.best)
                })
                .collect();
            next_id += count;
            for (t, b) in runs {
                used += t.len();
                trace.extend(t);
                if let Some(b) = b {
                    if better(&b, &best) {
                        best = b;
                    }
                }
            }
            if used + per_start * n_starts > search_budget + 1 {
                break;
            }
            // basin hopping: perturb the incumbent with a shrinking radius
            let normal = Normal::new(0.0, sigma).expect("positive width");
            starts = (0..n_starts)
                .map(|_| best.x.iter().map(|&v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0)).collect())
                .collect();
            sigma = (sigma * 0.8).max(0.01);
        }
        let polish_budget = spec.budget.saturating_sub(used);
        if polish_budget > dim + 1 {
            let mut run = Run::new(&obj, usize::MAX, polish_budget);
            run.nelder_mead(&best.x, 0.02);
            if let Some(b) = run.best.clone() {
                if better(&b, &best) {
                    best = b;
                }
            }
            trace.extend(run.trace);
        }
    }

    let params = spec.decode(&best.x, base);
    let report = evaluate(&params, ch, spec.objective, &spec.analysis).ok();
    let rate = report.as_ref().map_or(0.0, |r| r.rate(spec.objective));
    Ok(OptimizationResult {
        params,
        rate,
        report,
        evaluations: trace.len(),
        zero_everywhere: trace.iter().all(|e| e.rate == 0.0),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_respects_constraints() {
        let spec = OptimizationSpec::asymmetric(RateMode::Aopp, 10, 1);
        let base = ProtocolParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let x: Vec<f64> = (0..spec.free.len()).map(|_| rng.random()).collect();
            let p = spec.decode(&x, &base);
            p.validate().unwrap();
            for s in [&p.alice, &p.bob] {
                assert!(s.mu_1 <= s.mu_2);
                assert!(s.p_0() >= MIN_VACUUM * 0.999);
                assert!((1e-4..=1.0).contains(&s.mu_z));
            }
        }
    }

    #[test]
    fn encode_inverts_decode() {
        let spec = OptimizationSpec::symmetric(RateMode::Aopp, 10, 1);
        let base = ProtocolParams::default();
        let x = vec![0.3, 0.6, 0.7, 0.2, 0.4, 0.9, 0.1];
        let p = spec.decode(&x, &base);
        let y = spec.encode(&p);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12, "{x:?} vs {y:?}");
        }
    }

    #[test]
    fn budget_one_is_center() {
        let spec = OptimizationSpec::symmetric(RateMode::Aopp, 1, 0);
        let ch = ChannelParams::symmetric(100.0);
        let base = ProtocolParams::default();
        let r = optimize(&spec, &ch, &base, None).unwrap();
        assert_eq!(r.evaluations, 1);
        assert_eq!(r.trace[0].x, vec![0.5; 7]);
        assert_eq!(r.params, spec.decode(&[0.5; 7], &base));
    }

    #[test]
    fn validation() {
        let mut spec = OptimizationSpec::symmetric(RateMode::Aopp, 0, 0);
        assert!(spec.validate().is_err());
        spec.budget = 5;
        spec.free.push(spec.free[0]);
        assert!(spec.validate().is_err());
        spec.free.clear();
        assert!(spec.validate().is_err());
    }
}
