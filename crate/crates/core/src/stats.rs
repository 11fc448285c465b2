//! Summary statistics used by the schedule reports: coefficient of variation,
//! Spearman rank correlation and log-log least squares.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::numeric::compensated_sum;

pub fn mean(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

fn sum_sq_dev(values: &[f64], m: f64) -> f64 {
    compensated_sum(values.iter().map(|x| (x - m) * (x - m)))
}

/// Population standard deviation (divides by n).
pub fn std_population(values: &[f64]) -> f64 {
    let m = mean(values);
    (sum_sq_dev(values, m) / values.len() as f64).sqrt()
}

/// Sample standard deviation (divides by n - 1).
pub fn std_sample(values: &[f64]) -> f64 {
    let m = mean(values);
    (sum_sq_dev(values, m) / (values.len() as f64 - 1.0)).sqrt()
}

/// Coefficient of variation with the sample (n - 1) standard deviation.
pub fn cv(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Undefined("cv needs at least two values".into()));
    }
    let m = mean(values);
    if m == 0.0 {
        return Err(Error::Undefined("cv of a zero-mean sequence".into()));
    }
    Ok(std_sample(values) / m.abs())
}

/// Coefficient of variation with the population standard deviation, used for
/// the per-step schedule statistics.
pub fn cv_population(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Undefined("cv of an empty sequence".into()));
    }
    let m = mean(values);
    if m == 0.0 {
        return Err(Error::Undefined("cv of a zero-mean sequence".into()));
    }
    Ok(std_population(values) / m.abs())
}

/// Ranks starting at 1, ties receive their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    let ma = mean(a);
    let mb = mean(b);
    let sab = compensated_sum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)));
    let saa = sum_sq_dev(a, ma);
    let sbb = sum_sq_dev(b, mb);
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("correlation with a constant vector".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    /// All n! relabellings enumerated (n < 10).
    ExactPermutation,
    /// Student-t approximation with n - 2 degrees of freedom (n >= 10).
    StudentT,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Spearman {
    pub rho: f64,
    pub p_value: f64,
    pub method: PValueMethod,
}

const EXACT_PERMUTATION_LIMIT: usize = 10;

/// Spearman rank correlation with a two-sided p-value.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Spearman> {
    if a.len() != b.len() {
        return Err(Error::arg(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::arg("spearman needs at least 3 pairs"));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let rho = pearson(&ra, &rb)?;
    let n = a.len();
    if n < EXACT_PERMUTATION_LIMIT {
        Ok(Spearman { rho, p_value: permutation_p_value(&ra, &rb, rho), method: PValueMethod::ExactPermutation })
    } else {
        Ok(Spearman { rho, p_value: t_p_value(rho, n), method: PValueMethod::StudentT })
    }
}

fn t_p_value(rho: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let denom = 1.0 - rho * rho;
    if denom <= 0.0 {
        return 0.0;
    }
    let t = rho.abs() * (df / denom).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * dist.sf(t)).min(1.0)
}

fn permutation_p_value(ra: &[f64], rb: &[f64], rho: f64) -> f64 {
    let mut perm = rb.to_vec();
    let n = perm.len();
    let target = rho.abs() - 1e-12;
    let mut hits = 0u64;
    let mut total = 0u64;
    let mut count = |p: &[f64]| {
        total += 1;
        // Ranks of `a` are fixed; pearson on ranks cannot fail here.
        if pearson(ra, p).map(|r| r.abs() >= target).unwrap_or(false) {
            hits += 1;
        }
    };
    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; n];
    count(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            count(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_ci95: (f64, f64),
}

/// Ordinary least squares of log(y) on log(x).
pub fn ols_loglog(x: &[f64], y: &[f64]) -> Result<OlsFit> {
    if x.len() != y.len() {
        return Err(Error::arg(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::arg("log-log fit needs at least 3 points"));
    }
    if let Some(v) = x.iter().chain(y).find(|v| !(**v > 0.0)) {
        return Err(Error::arg(format!("log-log fit needs positive inputs, got {v}")));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = mean(&lx);
    let my = mean(&ly);
    let sxx = sum_sq_dev(&lx, mx);
    if sxx == 0.0 {
        return Err(Error::Undefined("all x values are equal".into()));
    }
    let sxy = compensated_sum(lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)));
    let syy = sum_sq_dev(&ly, my);
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = compensated_sum(lx.iter().zip(&ly).map(|(a, b)| {
        let r = b - (intercept + slope * a);
        r * r
    }));
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let n = x.len() as f64;
    let se = (sse / (n - 2.0) / sxx).sqrt();
    let tcrit = StudentsT::new(0.0, 1.0, n - 2.0).expect("df > 0").inverse_cdf(0.975);
    Ok(OlsFit { slope, intercept, r2, slope_ci95: (slope - tcrit * se, slope + tcrit * se) })
}
