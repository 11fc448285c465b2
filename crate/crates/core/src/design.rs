//! Schedule design analyses: comparison reports, equalisation checks, the
//! cosine offset, expansion census, Min-SNR boundary and step allocation.

use std::io::Write;

use serde::Serialize;

use crate::attractor::{self, InfoGainMode, PatchSpectrum};
use crate::error::{Error, Result};
use crate::numeric::{fmt17, CompensatedSum};
use crate::par;
use crate::schedule::{Schedule, ThresholdStats};
use crate::stats;

pub use crate::stats::{cv, ols_loglog, spearman, OlsFit, Spearman};

#[derive(Debug, Clone)]
pub struct NamedSchedule {
    pub name: String,
    pub schedule: Schedule,
}

impl NamedSchedule {
    pub fn new(name: impl Into<String>, schedule: Schedule) -> Self {
        Self { name: name.into(), schedule }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaStarRange {
    pub min: f64,
    pub argmin: usize,
    pub max: f64,
    pub argmax: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InfoGainStats {
    pub lambda_star_star: f64,
    /// Directions above `lambda_star_star`.
    pub expanding_dimension: usize,
    pub cv_ig: f64,
    pub cv_growth: f64,
    pub spearman_rho: f64,
    pub spearman_p: f64,
    /// `mean_t(IG_t / growth_t^2) * expanding_dimension`; one when all expanding directions share a log-expansion.
    pub ratio_to_theory: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleReport {
    pub name: String,
    pub steps: usize,
    pub thresholds: ThresholdStats,
    /// `lambda*` over steps `2..=T`; absent for single-step chains.
    pub lambda_star_interior: Option<LambdaStarRange>,
    pub info: Option<InfoGainStats>,
}

fn interior_range(s: &Schedule) -> Option<LambdaStarRange> {
    let geoms = s.geometries();
    let interior = geoms.get(1..).filter(|g| !g.is_empty())?;
    let (mut min, mut max) = (interior[0], interior[0]);
    for g in interior {
        if g.lambda_star() < min.lambda_star() {
            min = *g;
        }
        if g.lambda_star() > max.lambda_star() {
            max = *g;
        }
    }
    Some(LambdaStarRange { min: min.lambda_star(), argmin: min.timestep, max: max.lambda_star(), argmax: max.timestep })
}

/// Information-gain equalisation statistics for one schedule.
pub fn info_gain_stats(s: &Schedule, spectrum: &PatchSpectrum) -> Result<InfoGainStats> {
    let root = attractor::moran_root(s, attractor::DEFAULT_ROOT_TOL)?.lambda;
    let ig = attractor::info_gain_series(s, spectrum, InfoGainMode::Quadratic)?;
    let growth: Vec<f64> = attractor::ky_growth_series(s, spectrum, root)?.into_iter().map(f64::abs).collect();
    let n_pp = attractor::expanding_dimension(spectrum, root);
    let ratios: Vec<f64> = ig.iter().zip(&growth).filter(|(_, d)| **d > 0.0).map(|(i, d)| i / (d * d)).collect();
    if ratios.is_empty() {
        return Err(Error::Undefined("no expanding directions: growth is identically zero".into()));
    }
    let rank = stats::spearman(&ig, &growth)?;
    Ok(InfoGainStats {
        lambda_star_star: root,
        expanding_dimension: n_pp,
        cv_ig: stats::cv_population(&ig)?,
        cv_growth: stats::cv_population(&growth)?,
        spearman_rho: rank.rho,
        spearman_p: rank.p_value,
        ratio_to_theory: stats::mean(&ratios) * n_pp as f64,
    })
}

/// Threshold statistics for each schedule, plus information-gain columns when a spectrum is given.
pub fn compare_schedules(schedules: &[NamedSchedule], spectrum: Option<&PatchSpectrum>) -> Result<Vec<ScheduleReport>> {
    if schedules.is_empty() {
        return Err(Error::arg("no schedules to compare"));
    }
    par::map_slice(schedules, |ns| {
        let s = &ns.schedule;
        Ok(ScheduleReport {
            name: ns.name.clone(),
            steps: s.steps(),
            thresholds: s.threshold_stats(),
            lambda_star_interior: interior_range(s),
            info: spectrum.map(|sp| info_gain_stats(s, sp)).transpose()?,
        })
    })
    .into_iter()
    .collect()
}

/// Table-shaped CSV of a comparison; empty cells where a column does not apply.
pub fn write_comparison_csv<W: Write>(reports: &[ScheduleReport], mut w: W) -> std::io::Result<()> {
    let mut out = String::from(
        "schedule,T,mean_L_star,cv_L_star,finest_L_star,min_lambda_star,argmin_t,max_lambda_star,cv_ig,cv_growth,spearman_rho,ratio_to_theory\n",
    );
    for r in reports {
        let th = &r.thresholds;
        out.push_str(&format!("{},{},{},{},{}", r.name, r.steps, fmt17(th.mean), fmt17(th.cv), fmt17(th.finest_value)));
        match &r.lambda_star_interior {
            Some(l) => out.push_str(&format!(",{},{},{}", fmt17(l.min), l.argmin, fmt17(l.max))),
            None => out.push_str(",,,"),
        }
        match &r.info {
            Some(i) => out.push_str(&format!(
                ",{},{},{},{}",
                fmt17(i.cv_ig),
                fmt17(i.cv_growth),
                fmt17(i.spearman_rho),
                fmt17(i.ratio_to_theory)
            )),
            None => out.push_str(",,,,"),
        }
        out.push('\n');
    }
    w.write_all(out.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EqualisationReport {
    pub steps: usize,
    pub spread: f64,
    pub mean: f64,
    /// `spread > tol * mean`.
    pub exceeds_tolerance: bool,
    /// Sign changes of `L sqrt(1 - a) + sqrt(a) - 1` over the schedule's `alpha_bar`, with `L` the mean threshold.
    pub unit_crossings: usize,
    /// At most two crossings, as concavity requires.
    pub mechanism_holds: bool,
}

/// Shows that no schedule with three or more steps has a constant threshold.
pub fn equalisation_check(s: &Schedule, tol: f64) -> Result<EqualisationReport> {
    if s.steps() < 3 {
        return Err(Error::EqualisationExempt { steps: s.steps() });
    }
    if !(tol >= 0.0) {
        return Err(Error::arg("tolerance must be non-negative"));
    }
    let values = s.l_star_values();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = stats::mean(&values);
    let h: Vec<f64> = s
        .alpha_bar()
        .iter()
        .zip(s.noise())
        .map(|(a, v)| mean * v.sqrt() + a.sqrt() - 1.0)
        .collect();
    let mut crossings = 0;
    let mut prev_sign = 0.0f64;
    for x in h {
        if x != 0.0 {
            let sign = x.signum();
            if prev_sign != 0.0 && sign != prev_sign {
                crossings += 1;
            }
            prev_sign = sign;
        }
    }
    Ok(EqualisationReport {
        steps: s.steps(),
        spread: max - min,
        mean,
        exceeds_tolerance: max - min > tol * mean,
        unit_crossings: crossings,
        mechanism_holds: crossings <= 2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OffsetRow {
    pub offset: f64,
    pub v1: f64,
    pub l1_star: f64,
    /// `L*_1(offset) / L*_1(0)`.
    pub ratio_to_zero_offset: f64,
}

/// First-step noise and threshold of the cosine family for each offset.
pub fn cosine_offset_analysis(steps: usize, offsets: &[f64]) -> Result<Vec<OffsetRow>> {
    let base = Schedule::cosine(steps, 0.0)?.step_geometry(1)?.l_star;
    offsets
        .iter()
        .map(|&offset| {
            let g = Schedule::cosine(steps, offset)?.step_geometry(1)?;
            Ok(OffsetRow { offset, v1: g.v, l1_star: g.l_star, ratio_to_zero_offset: g.l_star / base })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchCensus {
    pub patch: usize,
    pub lambda: f64,
    pub forcing_steps: usize,
    pub total_steps: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CensusReport {
    pub include_boundary: bool,
    pub patches: Vec<PatchCensus>,
    pub global_fraction: f64,
}

/// Counts steps with `lambda_k > lambda*(t)` per patch. Without the boundary,
/// the first and last steps are excluded.
pub fn expansion_census(s: &Schedule, spectrum: &PatchSpectrum, include_boundary: bool) -> Result<CensusReport> {
    let geoms = s.geometries();
    let n = geoms.len();
    let scanned: Vec<f64> = geoms
        .iter()
        .enumerate()
        .filter(|(i, _)| include_boundary || (*i != 0 && *i != n - 1))
        .map(|(_, g)| g.lambda_star())
        .collect();
    if scanned.is_empty() {
        return Err(Error::arg("no steps left to scan once the boundary is excluded"));
    }
    let patches: Vec<PatchCensus> = spectrum
        .patches
        .iter()
        .map(|p| {
            let lambda = p.leading();
            let forcing = scanned.iter().filter(|ls| lambda > **ls).count();
            PatchCensus {
                patch: p.id,
                lambda,
                forcing_steps: forcing,
                total_steps: scanned.len(),
                fraction: forcing as f64 / scanned.len() as f64,
            }
        })
        .collect();
    let total: usize = patches.iter().map(|p| p.forcing_steps).sum();
    let global_fraction = total as f64 / (patches.len() * scanned.len()) as f64;
    Ok(CensusReport { include_boundary, patches, global_fraction })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MinSnrBoundary {
    pub t: usize,
    pub snr: f64,
    pub l_star: f64,
}

/// Largest step whose SNR is still at least `gamma`.
pub fn minsnr_boundary(s: &Schedule, gamma: f64) -> Result<MinSnrBoundary> {
    let geoms = s.geometries();
    let (first, last) = (geoms[0].snr, geoms[geoms.len() - 1].snr);
    if !(gamma <= first && gamma >= last) {
        return Err(Error::arg(format!("gamma = {gamma} outside the schedule's SNR range [{last}, {first}]")));
    }
    let g = geoms.iter().rev().find(|g| g.snr >= gamma).expect("first step satisfies the bound");
    Ok(MinSnrBoundary { t: g.timestep, snr: g.snr, l_star: g.l_star })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Allocation {
    pub n: usize,
    /// Continuous positions `u_i` in `(0, 1]`, strictly increasing, `u_N = 1`.
    pub positions: Vec<f64>,
    /// Parent timesteps after snapping, strictly increasing.
    pub timesteps: Vec<usize>,
    /// `integral of 1/L*` over `(u_{i-1}, u_i]`, before snapping.
    pub loads: Vec<f64>,
    /// `(max - min) / mean` of `loads`.
    pub load_spread: f64,
    /// Loads between snapped positions.
    pub snapped_loads: Vec<f64>,
    pub snapped_spread: f64,
    /// `integral of 1/L*` over `[0, 1]`; the density is `N / (total * L*(u))`.
    pub total_load: f64,
}

/// Piecewise-linear threshold on `u = t / T`, constant on `[0, 1/T]`.
struct ThresholdCurve {
    knots: Vec<f64>,
    values: Vec<f64>,
    /// Cumulative load at each knot.
    cumulative: Vec<f64>,
}

fn segment_load(h: f64, l0: f64, l1: f64, frac: f64) -> f64 {
    // Integral of 1/L over the first `frac` of a segment of width `h`.
    let d = (l1 - l0) * frac;
    let w = h * frac;
    if d.abs() <= 1e-12 * l0 {
        w / l0
    } else {
        w * (d / l0).ln_1p() / d
    }
}

impl ThresholdCurve {
    fn new(l_star: &[f64]) -> Self {
        let n = l_star.len();
        let mut knots = vec![0.0];
        let mut values = vec![l_star[0]];
        for (i, &l) in l_star.iter().enumerate() {
            knots.push((i + 1) as f64 / n as f64);
            values.push(l);
        }
        let mut cumulative = vec![0.0];
        let mut acc = CompensatedSum::new();
        for i in 1..knots.len() {
            acc.add(segment_load(knots[i] - knots[i - 1], values[i - 1], values[i], 1.0));
            cumulative.push(acc.value());
        }
        Self { knots, values, cumulative }
    }

    fn total(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn load_to(&self, u: f64) -> f64 {
        let i = self.knots.partition_point(|k| *k < u).clamp(1, self.knots.len() - 1);
        let h = self.knots[i] - self.knots[i - 1];
        let frac = ((u - self.knots[i - 1]) / h).clamp(0.0, 1.0);
        self.cumulative[i - 1] + segment_load(h, self.values[i - 1], self.values[i], frac)
    }

    /// Position where the cumulative load reaches `target`.
    fn inverse(&self, target: f64) -> f64 {
        let i = self.cumulative.partition_point(|c| *c < target).clamp(1, self.knots.len() - 1);
        let (u0, h) = (self.knots[i - 1], self.knots[i] - self.knots[i - 1]);
        let (l0, l1) = (self.values[i - 1], self.values[i]);
        let r = target - self.cumulative[i - 1];
        let slope = (l1 - l0) / h;
        let du = if slope.abs() <= 1e-12 * l0 / h { r * l0 } else { l0 * (r * slope).exp_m1() / slope };
        (u0 + du).clamp(u0, u0 + h)
    }
}

fn spread(values: &[f64]) -> f64 {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max - min) / stats::mean(values)
}

fn snap(positions: &[f64], parent_steps: usize) -> Vec<usize> {
    let mut used = vec![false; parent_steps + 1];
    let mut out = Vec::with_capacity(positions.len());
    for &u in positions {
        let want = ((u * parent_steps as f64).round() as usize).clamp(1, parent_steps);
        let pick = (0..=parent_steps)
            .flat_map(|d| [want.checked_sub(d), Some(want + d)])
            .flatten()
            .find(|&t| t >= 1 && t <= parent_steps && !used[t])
            .expect("fewer positions than parent steps");
        used[pick] = true;
        out.push(pick);
    }
    out.sort_unstable();
    out
}

/// Places `n` steps so every step carries the same integrated `1/L*` load.
pub fn allocate_from_thresholds(l_star: &[f64], n: usize) -> Result<Allocation> {
    let parent = l_star.len();
    if n == 0 || n > parent {
        return Err(Error::arg(format!("N = {n} must lie in 1..={parent}")));
    }
    if l_star.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::arg("thresholds must be positive and finite"));
    }
    let curve = ThresholdCurve::new(l_star);
    let total = curve.total();
    let mut positions: Vec<f64> = (1..n).map(|i| curve.inverse(total * i as f64 / n as f64)).collect();
    positions.push(1.0);
    let loads_between = |us: &[f64]| -> Vec<f64> {
        let mut prev = 0.0;
        us.iter()
            .map(|&u| {
                let c = curve.load_to(u);
                let load = c - prev;
                prev = c;
                load
            })
            .collect()
    };
    let loads = loads_between(&positions);
    let timesteps = snap(&positions, parent);
    let snapped_positions: Vec<f64> = timesteps.iter().map(|&t| t as f64 / parent as f64).collect();
    let snapped_loads = loads_between(&snapped_positions);
    Ok(Allocation {
        n,
        load_spread: spread(&loads),
        snapped_spread: spread(&snapped_loads),
        positions,
        timesteps,
        loads,
        snapped_loads,
        total_load: total,
    })
}

/// Equal-load allocation of `n` steps on the parent chain's thresholds.
pub fn allocate_steps(parent: &Schedule, n: usize) -> Result<Allocation> {
    let alloc = allocate_from_thresholds(&parent.l_star_values(), n)?;
    Ok(Allocation { timesteps: alloc.timesteps.iter().map(|&t| parent.timestep_label(t)).collect(), ..alloc })
}
