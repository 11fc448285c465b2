//! Suppression margins and per-patch release times, driven by a measured
//! suppression table `S[k, t]`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::fmt17;
use crate::schedule::Schedule;
use crate::stats::{self, Spearman};

/// Negative suppression values down to this level are treated as measurement
/// noise and clamped to zero.
pub const NEGATIVE_TOLERANCE: f64 = -1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Linear,
    Nearest,
}

/// Suppression values per patch on a sparse timestep grid.
#[derive(Debug, Clone)]
pub struct SuppressionTable {
    rows: BTreeMap<usize, Vec<(usize, f64)>>,
    interpolation: Interpolation,
}

impl SuppressionTable {
    /// Builds a table from `(patch, t, S)` triples in any order.
    pub fn new(entries: impl IntoIterator<Item = (usize, usize, f64)>, interpolation: Interpolation) -> Result<Self> {
        let mut rows: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for (patch, t, s) in entries {
            rows.entry(patch).or_default().push((t, check_value(patch, t, s)?));
        }
        for (patch, row) in rows.iter_mut() {
            row.sort_by_key(|e| e.0);
            if let Some(w) = row.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(Error::arg(format!("duplicate suppression entry for patch {patch} at t = {}", w[0].0)));
            }
        }
        Ok(Self { rows, interpolation })
    }

    /// Identical value for every listed patch and every timestep.
    pub fn constant(patches: impl IntoIterator<Item = usize>, value: f64) -> Result<Self> {
        Self::new(patches.into_iter().map(|k| (k, 1, value)), Interpolation::Linear)
    }

    pub fn from_csv_path(path: &Path, interpolation: Interpolation) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file, &path.display().to_string(), interpolation)
    }

    /// Parses `patch,t,S` rows. `label` names the source in diagnostics.
    pub fn from_csv_reader<R: Read>(reader: R, label: &str, interpolation: Interpolation) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let parse_err = |line: u64, message: String| Error::Parse { path: label.to_string(), line, message };
        let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols != ["patch", "t", "S"] {
            return Err(parse_err(1, format!("expected header `patch,t,S`, found `{}`", cols.join(","))));
        }
        let mut entries = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let patch = record[0].parse::<usize>().map_err(|e| parse_err(line, format!("patch: {e}")))?;
            let t = record[1].parse::<usize>().map_err(|e| parse_err(line, format!("t: {e}")))?;
            let s = record[2].parse::<f64>().map_err(|e| parse_err(line, format!("S: {e}")))?;
            check_value(patch, t, s).map_err(|e| parse_err(line, e.to_string()))?;
            entries.push((patch, t, s));
        }
        if entries.is_empty() {
            return Err(parse_err(1, "no suppression rows".into()));
        }
        Self::new(entries, interpolation).map_err(|e| parse_err(0, e.to_string()))
    }

    pub fn patches(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    /// `S[patch, t]`, interpolated in `t` and held constant beyond the grid ends.
    pub fn get(&self, patch: usize, t: usize) -> Result<f64> {
        let row = self.rows.get(&patch).ok_or(Error::MissingPatch(patch))?;
        let i = row.partition_point(|e| e.0 < t);
        if i < row.len() && row[i].0 == t {
            return Ok(row[i].1);
        }
        if i == 0 {
            return Ok(row[0].1);
        }
        if i == row.len() {
            return Ok(row[row.len() - 1].1);
        }
        let (t0, s0) = row[i - 1];
        let (t1, s1) = row[i];
        Ok(match self.interpolation {
            Interpolation::Linear => s0 + (s1 - s0) * (t - t0) as f64 / (t1 - t0) as f64,
            Interpolation::Nearest => {
                if t - t0 <= t1 - t {
                    s0
                } else {
                    s1
                }
            }
        })
    }
}

fn check_value(patch: usize, t: usize, s: f64) -> Result<f64> {
    if s.is_nan() || s.is_infinite() {
        return Err(Error::arg(format!("non-finite suppression for patch {patch} at t = {t}")));
    }
    if s < NEGATIVE_TOLERANCE {
        return Err(Error::arg(format!("negative suppression {s} for patch {patch} at t = {t}")));
    }
    Ok(s.max(0.0))
}

/// Suppression margin `gamma = S - (f_t(lambda) - 1)` at chain step `t`.
pub fn margin(s: &Schedule, table: &SuppressionTable, lambda_k: f64, patch: usize, t: usize) -> Result<f64> {
    if !(lambda_k > 0.0) {
        return Err(Error::arg(format!("lambda must be positive, got {lambda_k}")));
    }
    let g = s.step_geometry(t)?;
    Ok(table.get(patch, g.timestep)? - g.expansion_excess(lambda_k))
}

/// Diagonal Rayleigh quotient `f_t(lambda) - S` at chain step `t`.
pub fn kappa_diag(s: &Schedule, table: &SuppressionTable, lambda_k: f64, patch: usize, t: usize) -> Result<f64> {
    Ok(1.0 - margin(s, table, lambda_k, patch, t)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchRelease {
    pub patch: usize,
    pub lambda: f64,
    /// Largest timestep with non-positive margin; `None` if the patch never releases.
    pub t_rel: Option<usize>,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Margin at chain steps `1..=T`.
    pub margins: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReleaseReport {
    pub patches: Vec<PatchRelease>,
}

impl ReleaseReport {
    /// Spread between the latest and earliest release, over patches that release.
    pub fn span(&self) -> Option<usize> {
        let ts: Vec<usize> = self.patches.iter().filter_map(|p| p.t_rel).collect();
        Some(ts.iter().max()? - ts.iter().min()?)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut out = String::from("patch,lambda,t_rel,gamma_min,gamma_max\n");
        for p in &self.patches {
            let t_rel = p.t_rel.map_or_else(|| "never".to_string(), |t| t.to_string());
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.patch,
                fmt17(p.lambda),
                t_rel,
                fmt17(p.gamma_min),
                fmt17(p.gamma_max)
            ));
        }
        w.write_all(out.as_bytes())
    }
}

/// Release time of every `(patch, lambda)` pair.
pub fn release_times(s: &Schedule, table: &SuppressionTable, lambdas: &[(usize, f64)]) -> Result<ReleaseReport> {
    let geoms = s.geometries();
    let mut patches = Vec::with_capacity(lambdas.len());
    for &(patch, lambda) in lambdas {
        if !(lambda > 0.0) {
            return Err(Error::arg(format!("lambda for patch {patch} must be positive, got {lambda}")));
        }
        let margins = geoms
            .iter()
            .map(|g| Ok(table.get(patch, g.timestep)? - g.expansion_excess(lambda)))
            .collect::<Result<Vec<f64>>>()?;
        let t_rel = margins.iter().rposition(|&m| m <= 0.0).map(|i| geoms[i].timestep);
        let gamma_min = margins.iter().copied().fold(f64::INFINITY, f64::min);
        let gamma_max = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        patches.push(PatchRelease { patch, lambda, t_rel, gamma_min, gamma_max, margins });
    }
    Ok(ReleaseReport { patches })
}

/// First-order spread of release times across the patch-variance range.
///
/// `t_bar` is a chain step; the time derivative of `f_t` is a central
/// difference over the neighbouring steps (one-sided at the ends). The sign
/// is kept: a negative span means the margin is not increasing in `lambda`.
pub fn stratified_span(
    lambda_min: f64,
    lambda_max: f64,
    ds_dlambda: f64,
    ds_dt: f64,
    s: &Schedule,
    t_bar: usize,
    lambda_bar: f64,
) -> Result<f64> {
    if !(lambda_bar > 0.0) {
        return Err(Error::arg("representative lambda must be positive"));
    }
    let g = s.step_geometry(t_bar)?;
    let (lo, hi) = (t_bar.saturating_sub(1).max(1), (t_bar + 1).min(s.steps()));
    let df_dt = if hi > lo {
        let f = |t: usize| s.geometry_unchecked(t).expansion_excess(lambda_bar);
        (f(hi) - f(lo)) / (hi - lo) as f64
    } else {
        0.0
    };
    let denom = (ds_dt - df_dt).abs();
    if denom == 0.0 {
        return Err(Error::Undefined("stratified span denominator is zero".into()));
    }
    Ok((lambda_max - lambda_min) * (ds_dlambda - g.expansion_slope(lambda_bar)) / denom)
}

/// Sufficient condition for spectral margin monotonicity: `c v^2 > |b| sqrt(v) alpha_bar`.
pub fn mm1_sufficient(s: &Schedule, t: usize, c_t: f64) -> Result<bool> {
    if !(c_t > 0.0) {
        return Err(Error::arg(format!("c_t must be positive, got {c_t}")));
    }
    let g = s.step_geometry(t)?;
    Ok(c_t * g.v * g.v > g.b.abs() * g.v.sqrt() * g.alpha_bar)
}

/// Longest run of steps (inclusive timestep labels) where [`mm1_sufficient`] holds.
pub fn mm1_window(s: &Schedule, c_t: f64) -> Result<Option<(usize, usize)>> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for t in 1..=s.steps() {
        if mm1_sufficient(s, t, c_t)? {
            let a = *start.get_or_insert(t);
            if best.map_or(true, |(x, y)| t - a > y - x) {
                best = Some((a, t));
            }
        } else {
            start = None;
        }
    }
    Ok(best.map(|(a, b)| (s.timestep_label(a), s.timestep_label(b))))
}

/// Per-patch denoising loss of the optimal Gaussian denoiser, `lambda v / (alpha_bar lambda + v)`.
pub fn gaussian_patch_loss(s: &Schedule, t: usize, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::arg(format!("lambda must be positive, got {lambda}")));
    }
    let g = s.step_geometry(t)?;
    Ok(lambda * g.v / (g.alpha_bar * lambda + g.v))
}

/// Rank correlation between patch variance and diagonal contraction.
pub fn spearman_vs_lambda(lambdas: &[f64], kappa_diag: &[f64]) -> Result<Spearman> {
    stats::spearman(lambdas, kappa_diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contraction::lambda_star_series;

    fn cosine() -> Schedule {
        Schedule::cosine(1000, 0.008).unwrap()
    }

    #[test]
    fn zero_suppression_reduces_to_gaussian() {
        let s = cosine();
        let table = SuppressionTable::constant([1], 0.0).unwrap();
        for t in [1, 100, 500, 1000] {
            let g = s.step_geometry(t).unwrap();
            let m = margin(&s, &table, 3.0, 1, t).unwrap();
            assert!((m - (1.0 - g.expansion(3.0))).abs() < 1e-14);
            assert_eq!(m < 0.0, 3.0 > g.lambda_star());
        }
    }

    #[test]
    fn constructed_margin() {
        let s = cosine();
        let lambda = 2.0;
        let entries: Vec<_> = s.geometries().iter().map(|g| (4, g.t, g.expansion_excess(lambda) + 0.1)).collect();
        let table = SuppressionTable::new(entries, Interpolation::Linear).unwrap();
        for t in [2, 300, 999] {
            let m = margin(&s, &table, lambda, 4, t).unwrap();
            assert!((m - 0.1).abs() < 1e-12);
            assert!(kappa_diag(&s, &table, lambda, 4, t).unwrap() < 1.0);
        }
        assert!(matches!(margin(&s, &table, lambda, 5, 3), Err(Error::MissingPatch(5))));
    }

    #[test]
    fn interpolation_rules() {
        let entries = [(1, 10, 0.0), (1, 20, 1.0)];
        let lin = SuppressionTable::new(entries, Interpolation::Linear).unwrap();
        assert_eq!(lin.get(1, 15).unwrap(), 0.5);
        assert_eq!(lin.get(1, 1).unwrap(), 0.0);
        assert_eq!(lin.get(1, 500).unwrap(), 1.0);
        let near = SuppressionTable::new(entries, Interpolation::Nearest).unwrap();
        assert_eq!(near.get(1, 14).unwrap(), 0.0);
        assert_eq!(near.get(1, 16).unwrap(), 1.0);
    }

    #[test]
    fn negative_values() {
        let t = SuppressionTable::new([(1, 1, -5e-7)], Interpolation::Linear).unwrap();
        assert_eq!(t.get(1, 1).unwrap(), 0.0);
        assert!(SuppressionTable::new([(1, 1, -1e-3)], Interpolation::Linear).is_err());
        assert!(SuppressionTable::new([(1, 1, 0.1), (1, 1, 0.2)], Interpolation::Linear).is_err());
    }

    #[test]
    fn always_released_without_suppression() {
        let s = cosine();
        let max_ls = lambda_star_series(&s).into_iter().fold(0.0, f64::max);
        let table = SuppressionTable::constant([1, 2], 0.0).unwrap();
        let r = release_times(&s, &table, &[(1, max_ls * 1.01), (2, max_ls * 3.0)]).unwrap();
        assert!(r.patches.iter().all(|p| p.t_rel == Some(1000)));
    }

    #[test]
    fn known_crossing() {
        let s = Schedule::linear(100, 1e-4, 0.02).unwrap();
        let lambda = 1e3;
        // gamma_t = (t - 37.5) * 1e-7, so the last non-positive step is 37.
        let entries: Vec<_> =
            s.geometries().iter().map(|g| (1, g.t, g.expansion_excess(lambda) + (g.t as f64 - 37.5) * 1e-7)).collect();
        let table = SuppressionTable::new(entries, Interpolation::Linear).unwrap();
        let r = release_times(&s, &table, &[(1, lambda)]).unwrap();
        assert_eq!(r.patches[0].t_rel, Some(37));
        let never = SuppressionTable::constant([1], 10.0).unwrap();
        let r = release_times(&s, &never, &[(1, lambda)]).unwrap();
        assert_eq!(r.patches[0].t_rel, None);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap().contains(",never,"));
    }

    #[test]
    fn span_cases() {
        let s = cosine();
        assert_eq!(stratified_span(2.0, 2.0, 1e-3, 3e-6, &s, 300, 2.0).unwrap(), 0.0);
        let a = stratified_span(1.0, 2.0, 1e-3, 3e-6, &s, 300, 1.5).unwrap();
        let b = stratified_span(1.0, 3.0, 1e-3, 3e-6, &s, 300, 1.5).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12 * b.abs());
    }

    #[test]
    fn mm1_cases() {
        let s = cosine();
        assert!(mm1_sufficient(&s, 1000, 1e-3).unwrap());
        let g = s.step_geometry(400).unwrap();
        let c = g.b.abs() * g.v.sqrt() * g.alpha_bar / (g.v * g.v);
        assert!(!mm1_sufficient(&s, 400, c).unwrap());
        assert!(mm1_sufficient(&s, 400, c * (1.0 + 1e-9)).unwrap());
        let (_, hi) = mm1_window(&s, 1.0).unwrap().unwrap();
        assert_eq!(hi, 1000);
    }

    #[test]
    fn patch_loss_limits() {
        let s = cosine();
        assert!(gaussian_patch_loss(&s, 500, 1e-12).unwrap() < 1e-11);
        let pure = Schedule::from_alpha_bar(vec![1.0, 1e-300]).unwrap();
        assert!((gaussian_patch_loss(&pure, 1, 0.7).unwrap() - 0.7).abs() < 1e-15);
        let mut prev = 0.0;
        for i in 1..50 {
            let v = gaussian_patch_loss(&s, 500, i as f64 * 0.1).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }
}
