//! Moran equation, Lyapunov spectra and Kaplan-Yorke dimensions of the
//! composed sampler, plus the per-step information-gain decomposition.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{bisect_increasing, fmt17, CompensatedSum};
use crate::par;
use crate::regime::SuppressionTable;
use crate::schedule::{Schedule, StepGeometry};

/// Largest bracket the unsuppressed Moran root search will try.
pub const MORAN_BRACKET_LIMIT: f64 = 65536.0;
/// Default search cap for the suppression-corrected root.
pub const SUPPRESSED_ROOT_CAP: f64 = 500.0;
pub const DEFAULT_ROOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum PatchEigen {
    /// `Sigma_k = lambda I`: one variance shared by all `n_k` directions.
    Isotropic(f64),
    /// Full spectrum, descending, length `n_k`.
    Full(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Patch {
    pub id: usize,
    pub n_k: usize,
    pub eigen: PatchEigen,
}

impl Patch {
    pub fn isotropic(id: usize, n_k: usize, lambda: f64) -> Result<Self> {
        let p = Self { id, n_k, eigen: PatchEigen::Isotropic(lambda) };
        p.validate()?;
        Ok(p)
    }

    pub fn full(id: usize, eigenvalues: Vec<f64>) -> Result<Self> {
        let p = Self { id, n_k: eigenvalues.len(), eigen: PatchEigen::Full(eigenvalues) };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.n_k == 0 {
            return Err(Error::arg(format!("patch {} has n_k = 0", self.id)));
        }
        match &self.eigen {
            PatchEigen::Isotropic(l) if !(*l >= 0.0 && l.is_finite()) => {
                Err(Error::arg(format!("patch {} has invalid variance {l}", self.id)))
            }
            PatchEigen::Full(mu) => {
                if mu.len() != self.n_k {
                    return Err(Error::arg(format!("patch {}: {} eigenvalues for n_k = {}", self.id, mu.len(), self.n_k)));
                }
                if mu.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
                    return Err(Error::arg(format!("patch {} has a negative or non-finite eigenvalue", self.id)));
                }
                if mu.windows(2).any(|w| w[1] > w[0]) {
                    return Err(Error::arg(format!("patch {} eigenvalues are not sorted descending", self.id)));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Operator norm of the patch covariance.
    pub fn leading(&self) -> f64 {
        match &self.eigen {
            PatchEigen::Isotropic(l) => *l,
            PatchEigen::Full(mu) => mu[0],
        }
    }

    /// `(variance, multiplicity)` for every direction group.
    pub fn directions(&self) -> Vec<(f64, usize)> {
        match &self.eigen {
            PatchEigen::Isotropic(l) => vec![(*l, self.n_k)],
            PatchEigen::Full(mu) => mu.iter().map(|m| (*m, 1)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchSpectrum {
    pub patches: Vec<Patch>,
}

impl PatchSpectrum {
    pub fn new(patches: Vec<Patch>) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::arg("spectrum has no patches"));
        }
        for p in &patches {
            p.validate()?;
        }
        Ok(Self { patches })
    }

    /// Total dimension `sum n_k`.
    pub fn dimension(&self) -> usize {
        self.patches.iter().map(|p| p.n_k).sum()
    }

    pub fn leading_variances(&self) -> Vec<f64> {
        self.patches.iter().map(Patch::leading).collect()
    }

    pub fn is_isotropic(&self) -> bool {
        self.patches.iter().all(|p| matches!(p.eigen, PatchEigen::Isotropic(_)))
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file, &path.display().to_string())
    }

    /// Reads `patch,n_k,lambda` (isotropic) or `patch,n_k,mu_1,...` (full) rows.
    pub fn from_csv_reader<R: Read>(reader: R, label: &str) -> Result<Self> {
        let parse_err = |line: u64, message: String| Error::Parse { path: label.to_string(), line, message };
        let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        let full = match cols.as_slice() {
            ["patch", "n_k", "lambda"] => false,
            ["patch", "n_k", rest @ ..] if !rest.is_empty() && rest.iter().enumerate().all(|(i, c)| *c == format!("mu_{}", i + 1)) => true,
            _ => {
                return Err(parse_err(1, format!("expected header `patch,n_k,lambda` or `patch,n_k,mu_1,...`, found `{}`", cols.join(","))))
            }
        };
        let mut patches = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() < 3 {
                return Err(parse_err(line, "row needs at least 3 fields".into()));
            }
            let id = record[0].parse::<usize>().map_err(|e| parse_err(line, format!("patch: {e}")))?;
            let n_k = record[1].parse::<usize>().map_err(|e| parse_err(line, format!("n_k: {e}")))?;
            let values = record
                .iter()
                .skip(2)
                .filter(|f| !f.is_empty())
                .map(|f| f.parse::<f64>().map_err(|e| parse_err(line, format!("eigenvalue `{f}`: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            let patch = if full {
                if values.len() != n_k {
                    return Err(parse_err(line, format!("{} eigenvalues for n_k = {n_k}", values.len())));
                }
                Patch::full(id, values)
            } else {
                if values.len() != 1 {
                    return Err(parse_err(line, "isotropic rows carry exactly one lambda".into()));
                }
                Patch::isotropic(id, n_k, values[0])
            };
            patches.push(patch.map_err(|e| parse_err(line, e.to_string()))?);
        }
        Self::new(patches).map_err(|e| parse_err(1, e.to_string()))
    }

    /// Writes the isotropic form when every patch is isotropic, the full form otherwise.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut out = String::new();
        if self.is_isotropic() {
            out.push_str("patch,n_k,lambda\n");
            for p in &self.patches {
                out.push_str(&format!("{},{},{}\n", p.id, p.n_k, fmt17(p.leading())));
            }
        } else {
            let width = self.patches.iter().map(|p| p.n_k).max().unwrap_or(0);
            out.push_str("patch,n_k");
            for i in 1..=width {
                out.push_str(&format!(",mu_{i}"));
            }
            out.push('\n');
            for p in &self.patches {
                out.push_str(&format!("{},{}", p.id, p.n_k));
                let dirs = p.directions();
                for (mu, mult) in &dirs {
                    for _ in 0..*mult {
                        out.push_str(&format!(",{}", fmt17(*mu)));
                    }
                }
                for _ in p.n_k..width {
                    out.push(',');
                }
                out.push('\n');
            }
        }
        w.write_all(out.as_bytes())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::arg(format!("variance must be positive and finite, got {lambda}")));
    }
    Ok(())
}

/// `log f_t(lambda)`, erroring when the factor is not positive.
fn log_factor(g: &StepGeometry, lambda: f64, suppression: f64) -> Result<f64> {
    let excess = g.expansion_excess(lambda) - suppression;
    if excess <= -1.0 {
        if suppression > 0.0 {
            return Err(Error::SignReversingSuppression { patch: 0, t: g.timestep, s: suppression, f: 1.0 + g.expansion_excess(lambda) });
        }
        return Err(Error::NonPositiveFactor { t: g.timestep, lambda });
    }
    Ok(excess.ln_1p())
}

fn log_moran(geoms: &[StepGeometry], lambda: f64) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    for g in geoms {
        acc.add(log_factor(g, lambda, 0.0)?);
    }
    Ok(acc.value())
}

/// `log G(lambda) = sum_t log f_t(lambda)`.
pub fn log_moran_product(s: &Schedule, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    log_moran(&s.geometries(), lambda)
}

/// `G(lambda) = prod_t f_t(lambda)`.
pub fn moran_product(s: &Schedule, lambda: f64) -> Result<f64> {
    Ok(log_moran_product(s, lambda)?.exp())
}

/// Mean Lyapunov exponent `(1/T) log G(mu)`.
pub fn mean_lyapunov(s: &Schedule, mu: f64) -> Result<f64> {
    Ok(log_moran_product(s, mu)? / s.steps() as f64)
}

fn lyapunov_or_collapse(geoms: &[StepGeometry], mu: f64) -> Result<f64> {
    // A zero-variance direction is mapped to zero at the last step.
    if mu == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(log_moran(geoms, mu)? / geoms.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MoranRoot {
    pub lambda: f64,
    /// `G(lambda) - 1` at the returned root.
    pub residual: f64,
    pub iterations: usize,
}

/// Unique root of `G(lambda) = 1`, searched on `[1, hi]` with `hi` doubled until `G(hi) > 1`.
pub fn moran_root(s: &Schedule, tol: f64) -> Result<MoranRoot> {
    if !(tol > 0.0) {
        return Err(Error::arg("tolerance must be positive"));
    }
    let geoms = s.geometries();
    let residual = |l: f64| log_moran(&geoms, l).map(f64::exp_m1);
    if residual(1.0)? >= 0.0 {
        return Err(Error::NoBracket("G(1) >= 1".into()));
    }
    let mut hi = 2.0;
    while residual(hi)? <= 0.0 {
        hi *= 2.0;
        if hi > MORAN_BRACKET_LIMIT {
            return Err(Error::NoBracket(format!("G stays below 1 up to {MORAN_BRACKET_LIMIT}")));
        }
    }
    let mut failure = None;
    let (lambda, value, iterations) = bisect_increasing((hi / 2.0).max(1.0), hi, tol, |l| {
        residual(l).unwrap_or_else(|e| {
            failure = Some(e);
            0.0
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(MoranRoot { lambda, residual: value, iterations })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressionAverage {
    /// One root per patch, using that patch's suppression.
    PerPatch,
    /// One root, using the suppression averaged over patches.
    PatchAveraged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum SuppressedRoot {
    Root { lambda: f64, residual: f64 },
    /// The corrected product stays below one on the whole search range.
    ExceedsCap { cap: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuppressedRootReport {
    /// `None` in patch-averaged mode.
    pub patch: Option<usize>,
    pub result: SuppressedRoot,
}

/// Roots of `prod_t (f_t(lambda) - S_t) = 1` on `[1, cap]`.
pub fn moran_root_suppressed(
    s: &Schedule,
    table: &SuppressionTable,
    mode: SuppressionAverage,
    cap: f64,
    tol: f64,
) -> Result<Vec<SuppressedRootReport>> {
    if !(cap > 1.0 && cap <= MORAN_BRACKET_LIMIT) {
        return Err(Error::arg(format!("search cap must lie in (1, {MORAN_BRACKET_LIMIT}]")));
    }
    if !(tol > 0.0) {
        return Err(Error::arg("tolerance must be positive"));
    }
    let geoms = s.geometries();
    let patches: Vec<usize> = table.patches().collect();
    let curves: Vec<(Option<usize>, Vec<f64>)> = match mode {
        SuppressionAverage::PerPatch => patches
            .iter()
            .map(|&k| Ok((Some(k), geoms.iter().map(|g| table.get(k, g.timestep)).collect::<Result<Vec<_>>>()?)))
            .collect::<Result<_>>()?,
        SuppressionAverage::PatchAveraged => {
            let avg = geoms
                .iter()
                .map(|g| {
                    let sum: CompensatedSum = patches.iter().map(|&k| table.get(k, g.timestep)).collect::<Result<Vec<_>>>()?.into_iter().collect();
                    Ok(sum.value() / patches.len() as f64)
                })
                .collect::<Result<Vec<_>>>()?;
            vec![(None, avg)]
        }
    };
    Ok(curves
        .into_iter()
        .map(|(patch, sup)| SuppressedRootReport { patch, result: suppressed_root(&geoms, &sup, cap, tol) })
        .collect())
}

fn suppressed_root(geoms: &[StepGeometry], sup: &[f64], cap: f64, tol: f64) -> SuppressedRoot {
    // A non-positive corrected factor drives the product to zero, not an error.
    let residual = |l: f64| -> f64 {
        let mut acc = CompensatedSum::new();
        for (g, s) in geoms.iter().zip(sup) {
            let excess = g.expansion_excess(l) - s;
            if excess <= -1.0 {
                return -1.0;
            }
            acc.add(excess.ln_1p());
        }
        acc.value().exp_m1()
    };
    let mut lo = 1.0;
    let mut hi = 2.0f64.min(cap);
    loop {
        if residual(hi) > 0.0 {
            break;
        }
        if hi >= cap {
            return SuppressedRoot::ExceedsCap { cap };
        }
        lo = hi;
        hi = (hi * 2.0).min(cap);
    }
    let (lambda, residual, _) = bisect_increasing(lo, hi, tol, residual);
    SuppressedRoot::Root { lambda, residual }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KyDimension {
    pub j_star: usize,
    pub dimension: f64,
}

/// Kaplan-Yorke dimension of an exponent multiset (sorted internally).
pub fn ky_dimension(exponents: &[f64]) -> Result<KyDimension> {
    if exponents.is_empty() {
        return Err(Error::arg("no Lyapunov exponents"));
    }
    if exponents.iter().any(|x| x.is_nan()) {
        return Err(Error::arg("NaN Lyapunov exponent"));
    }
    let mut sorted = exponents.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(ky_sorted(&sorted))
}

fn ky_sorted(sorted: &[f64]) -> KyDimension {
    let mut acc = CompensatedSum::new();
    let mut j_star = 0;
    let mut partial_at_j = 0.0;
    for (i, l) in sorted.iter().enumerate() {
        acc.add(*l);
        let partial = acc.value();
        if partial >= 0.0 {
            j_star = i + 1;
            partial_at_j = partial;
        }
    }
    let n = sorted.len();
    let dimension = if j_star == n {
        n as f64
    } else {
        j_star as f64 + partial_at_j / sorted[j_star].abs()
    };
    KyDimension { j_star, dimension }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KyMode {
    Gaussian,
    Suppressed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionExponent {
    pub patch: usize,
    pub variance: f64,
    pub multiplicity: usize,
    pub exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KyReport {
    pub mode: KyMode,
    /// Exponent per direction group, in spectrum order.
    pub directions: Vec<DirectionExponent>,
    /// Full exponent multiset, sorted descending.
    pub exponents: Vec<f64>,
    /// Number of directions with positive exponent.
    pub expanding_count: usize,
    pub j_star: usize,
    /// Exact Kaplan-Yorke value on the explicit multiset.
    pub dimension: f64,
    /// Whether `sum of positive exponents < |least-negative exponent|`.
    pub condition_holds: bool,
    /// Closed form `N + sum / |least-negative|`; present when a contracting direction exists.
    pub closed_form: Option<f64>,
    /// `N + N * min positive / |least-negative|`; present when both sets are non-empty.
    pub lower_bound: Option<f64>,
    pub has_contracting_direction: bool,
}

fn build_report(mode: KyMode, directions: Vec<DirectionExponent>) -> KyReport {
    let mut exponents: Vec<f64> =
        directions.iter().flat_map(|d| std::iter::repeat(d.exponent).take(d.multiplicity)).collect();
    exponents.sort_by(|a, b| b.total_cmp(a));
    let ky = ky_sorted(&exponents);
    let positive: Vec<&DirectionExponent> = directions.iter().filter(|d| d.exponent > 0.0).collect();
    let expanding_count = positive.iter().map(|d| d.multiplicity).sum();
    let positive_sum: f64 =
        positive.iter().map(|d| d.multiplicity as f64 * d.exponent).collect::<CompensatedSum>().value();
    let least_negative = directions.iter().filter(|d| d.exponent < 0.0).map(|d| d.exponent).fold(None, |m: Option<f64>, e| {
        Some(m.map_or(e, |m| m.max(e)))
    });
    let min_positive = positive.iter().map(|d| d.exponent).fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.min(e))));
    let closed_form = least_negative.map(|l| expanding_count as f64 + positive_sum / l.abs());
    let condition_holds = least_negative.is_some_and(|l| positive_sum < l.abs());
    let lower_bound = match (least_negative, min_positive) {
        (Some(l), Some(p)) => Some(expanding_count as f64 * (1.0 + p / l.abs())),
        _ => None,
    };
    KyReport {
        mode,
        directions,
        exponents,
        expanding_count,
        j_star: ky.j_star,
        dimension: ky.dimension,
        condition_holds,
        closed_form,
        lower_bound,
        has_contracting_direction: least_negative.is_some(),
    }
}

/// Kaplan-Yorke dimension with exponents `Lambda(mu)` of the Gaussian surrogate.
pub fn ky_gaussian(s: &Schedule, spectrum: &PatchSpectrum) -> Result<KyReport> {
    let geoms = s.geometries();
    let groups: Vec<(usize, f64, usize)> =
        spectrum.patches.iter().flat_map(|p| p.directions().into_iter().map(move |(mu, m)| (p.id, mu, m))).collect();
    let exps = par::map_slice(&groups, |&(_, mu, _)| lyapunov_or_collapse(&geoms, mu));
    let directions = groups
        .iter()
        .zip(exps)
        .map(|(&(patch, variance, multiplicity), e)| Ok(DirectionExponent { patch, variance, multiplicity, exponent: e? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(build_report(KyMode::Gaussian, directions))
}

/// Kaplan-Yorke dimension with suppression-corrected exponents.
///
/// Isotropic patches apply the suppression to all `n_k` directions; full
/// spectra apply it to the leading direction only and keep the Gaussian
/// exponents elsewhere.
pub fn ky_suppressed(s: &Schedule, spectrum: &PatchSpectrum, table: &SuppressionTable) -> Result<KyReport> {
    let geoms = s.geometries();
    let mut directions = Vec::new();
    for p in &spectrum.patches {
        let sup: Vec<f64> = geoms.iter().map(|g| table.get(p.id, g.timestep)).collect::<Result<_>>()?;
        for (i, (mu, mult)) in p.directions().into_iter().enumerate() {
            let exponent = if i == 0 {
                effective_exponent(&geoms, &sup, p.id, mu)?
            } else {
                lyapunov_or_collapse(&geoms, mu)?
            };
            directions.push(DirectionExponent { patch: p.id, variance: mu, multiplicity: mult, exponent });
        }
    }
    Ok(build_report(KyMode::Suppressed, directions))
}

/// `(1/T) sum_t log(f_t(lambda) - S_t)`.
pub fn effective_exponent(geoms: &[StepGeometry], sup: &[f64], patch: usize, lambda: f64) -> Result<f64> {
    if lambda == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut acc = CompensatedSum::new();
    for (g, &s) in geoms.iter().zip(sup) {
        let excess = g.expansion_excess(lambda);
        if excess - s <= -1.0 {
            return Err(Error::SignReversingSuppression { patch, t: g.timestep, s, f: 1.0 + excess });
        }
        acc.add((excess - s).ln_1p());
    }
    Ok(acc.value() / geoms.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoGainMode {
    /// `sum n_k (log f)^2`.
    #[default]
    Quadratic,
    /// `sum (n_k / 2)(e^{2 eps} - 1 - 2 eps)` with `eps = log f`.
    ExactKl,
}

fn direction_groups(spectrum: &PatchSpectrum) -> Vec<(f64, usize)> {
    spectrum.patches.iter().flat_map(Patch::directions).filter(|(mu, _)| *mu > 0.0).collect()
}

fn info_gain_at(g: &StepGeometry, groups: &[(f64, usize)], mode: InfoGainMode) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    for &(mu, m) in groups {
        let eps = log_factor(g, mu, 0.0)?;
        let term = match mode {
            InfoGainMode::Quadratic => eps * eps,
            InfoGainMode::ExactKl => 0.5 * ((2.0 * eps).exp_m1() - 2.0 * eps),
        };
        acc.add(m as f64 * term);
    }
    Ok(acc.value())
}

/// Per-step information gain. Zero-variance directions carry no data and are skipped.
pub fn info_gain(s: &Schedule, t: usize, spectrum: &PatchSpectrum, mode: InfoGainMode) -> Result<f64> {
    info_gain_at(&s.step_geometry(t)?, &direction_groups(spectrum), mode)
}

pub fn info_gain_series(s: &Schedule, spectrum: &PatchSpectrum, mode: InfoGainMode) -> Result<Vec<f64>> {
    let groups = direction_groups(spectrum);
    let geoms = s.geometries();
    par::map_slice(&geoms, |g| info_gain_at(g, &groups, mode)).into_iter().collect()
}

fn ky_growth_at(g: &StepGeometry, groups: &[(f64, usize)], threshold: f64) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    for &(mu, m) in groups.iter().filter(|(mu, _)| *mu > threshold) {
        acc.add(m as f64 * log_factor(g, mu, 0.0)?);
    }
    Ok(acc.value())
}

/// Per-step growth of the Kaplan-Yorke dimension, summed over directions above `lambda_star_star`.
pub fn ky_growth(s: &Schedule, t: usize, spectrum: &PatchSpectrum, lambda_star_star: f64) -> Result<f64> {
    ky_growth_at(&s.step_geometry(t)?, &direction_groups(spectrum), lambda_star_star)
}

pub fn ky_growth_series(s: &Schedule, spectrum: &PatchSpectrum, lambda_star_star: f64) -> Result<Vec<f64>> {
    let groups = direction_groups(spectrum);
    let geoms = s.geometries();
    par::map_slice(&geoms, |g| ky_growth_at(g, &groups, lambda_star_star)).into_iter().collect()
}

/// Number of directions above `lambda_star_star`.
pub fn expanding_dimension(spectrum: &PatchSpectrum, lambda_star_star: f64) -> usize {
    direction_groups(spectrum).iter().filter(|(mu, _)| *mu > lambda_star_star).map(|(_, m)| m).sum()
}
