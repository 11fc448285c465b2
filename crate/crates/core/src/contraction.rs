//! Per-step contraction certificates and the bounds built on them.
//!
//! Certificates are pure evaluators: the Lipschitz and coupling inputs
//! (`nu_min`, `delta`, `kappa_diag`, ...) are supplied by the caller.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{fmt17, CompensatedSum};
use crate::schedule::{Schedule, StepGeometry};

impl StepGeometry {
    /// Diagonal expansion factor along an eigendirection of variance `lambda`.
    pub fn expansion(&self, lambda: f64) -> f64 {
        1.0 + self.expansion_excess(lambda)
    }

    /// `f_t(lambda) - 1`, evaluated without forming `f_t` first.
    ///
    /// Rearranged as `D ((lambda - 1) sqrt(a) C - D / (sqrt(v') + sqrt(v))) / ((sqrt(a') + sqrt(a)) C (lambda a + v))`
    /// with `D = a' - a` and `C = sqrt(v' a) + sqrt(a' v)`, so the only
    /// cancellation left is the one at `lambda*` itself.
    pub fn expansion_excess(&self, lambda: f64) -> f64 {
        let (sa, sap) = (self.alpha_bar.sqrt(), self.alpha_bar_prev.sqrt());
        let (sv, svp) = (self.v.sqrt(), self.v_prev.sqrt());
        let cross = (self.v_prev * self.alpha_bar).sqrt() + (self.alpha_bar_prev * self.v).sqrt();
        let d = self.decrement;
        d * ((lambda - 1.0) * sa * cross - d / (svp + sv)) / ((sap + sa) * cross * (lambda * self.alpha_bar + self.v))
    }

    /// `d f_t / d lambda`, always positive.
    pub fn expansion_slope(&self, lambda: f64) -> f64 {
        let den = lambda * self.alpha_bar + self.v;
        self.b.abs() * self.v.sqrt() * self.alpha_bar / (den * den)
    }

    /// Variance at which the diagonal factor equals one.
    pub fn lambda_star(&self) -> f64 {
        let (sv, svp) = (self.v.sqrt(), self.v_prev.sqrt());
        let (sa, sap) = (self.alpha_bar.sqrt(), self.alpha_bar_prev.sqrt());
        sv * (sap + sa) / ((sv + svp) * sa)
    }
}

/// `f_t(lambda)` for step `t` of `s`.
pub fn f_t(s: &Schedule, t: usize, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::arg(format!("lambda must be positive, got {lambda}")));
    }
    Ok(s.step_geometry(t)?.expansion(lambda))
}

pub fn lambda_star(s: &Schedule, t: usize) -> Result<f64> {
    Ok(s.step_geometry(t)?.lambda_star())
}

/// `lambda*(t)` for every step `1..=T`.
pub fn lambda_star_series(s: &Schedule) -> Vec<f64> {
    s.geometries().iter().map(StepGeometry::lambda_star).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EuclideanCertificate {
    pub t: usize,
    pub nu_min: f64,
    pub delta: f64,
    pub l_star: f64,
    pub c1_holds: bool,
    pub c2_holds: bool,
    /// Present only when both conditions hold.
    pub kappa: Option<f64>,
}

pub fn euclidean_certificate(s: &Schedule, t: usize, nu_min: f64, delta: f64) -> Result<EuclideanCertificate> {
    if !(nu_min > 0.0) {
        return Err(Error::arg(format!("nu_min must be positive, got {nu_min}")));
    }
    if !(delta >= 0.0) {
        return Err(Error::arg(format!("delta must be non-negative, got {delta}")));
    }
    let g = s.step_geometry(t)?;
    let abs_b = g.b.abs();
    let c1_holds = nu_min > g.l_star + delta;
    let c2_holds = abs_b * nu_min <= g.expand_ratio;
    let kappa = (c1_holds && c2_holds).then(|| 1.0 - abs_b * (nu_min - g.l_star - delta));
    Ok(EuclideanCertificate { t: g.timestep, nu_min, delta, l_star: g.l_star, c1_holds, c2_holds, kappa })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HighNoiseParams {
    pub t: usize,
    pub nu_star: f64,
    pub delta_star: f64,
    /// `nu_star - delta_star - L*`; the certificate holds where this is positive.
    pub margin: f64,
}

pub fn high_noise_params(s: &Schedule, t: usize, m_bound: f64, c: f64) -> Result<HighNoiseParams> {
    if !(m_bound > 0.0 && c > 0.0) {
        return Err(Error::arg("M and C must be positive"));
    }
    Ok(high_noise_at(&s.step_geometry(t)?, m_bound, c))
}

fn high_noise_at(g: &StepGeometry, m_bound: f64, c: f64) -> HighNoiseParams {
    let nu_star = 1.0 / g.v.sqrt();
    let delta_star = c * m_bound * m_bound * g.alpha_bar / (g.v * g.v.sqrt());
    HighNoiseParams { t: g.timestep, nu_star, delta_star, margin: nu_star - delta_star - g.l_star }
}

/// High-noise parameters at every step.
pub fn high_noise_scan(s: &Schedule, m_bound: f64, c: f64) -> Result<Vec<HighNoiseParams>> {
    if !(m_bound > 0.0 && c > 0.0) {
        return Err(Error::arg("M and C must be positive"));
    }
    Ok(s.geometries().iter().map(|g| high_noise_at(g, m_bound, c)).collect())
}

/// Longest contiguous run of steps with positive margin, as inclusive timestep labels.
pub fn positive_margin_window(scan: &[HighNoiseParams]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for (i, p) in scan.iter().enumerate() {
        if p.margin > 0.0 {
            let s = *start.get_or_insert(i);
            if best.map_or(true, |(a, b)| i - s > b - a) {
                best = Some((s, i));
            }
        } else {
            start = None;
        }
    }
    best.map(|(a, b)| (scan[a].t, scan[b].t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockCertificate {
    pub t: usize,
    pub kappa_diag: f64,
    pub delta_cross: f64,
    pub kappa_pc: f64,
    pub satisfied: bool,
}

pub fn block_certificate(t: usize, kappa_diag: f64, delta_cross: f64) -> Result<BlockCertificate> {
    if !(kappa_diag >= 0.0 && delta_cross >= 0.0) || !(kappa_diag + delta_cross).is_finite() {
        return Err(Error::arg("kappa_diag and delta_cross must be finite and non-negative"));
    }
    let kappa_pc = kappa_diag + delta_cross;
    Ok(BlockCertificate { t, kappa_diag, delta_cross, kappa_pc, satisfied: kappa_pc < 1.0 })
}

/// Cauchy-Schwarz bound on the cross-patch coupling from summed squared
/// Frobenius norms of the off-diagonal Jacobian blocks.
pub fn coupling_cs_bound(frobenius_sq_sum: f64, b_t: f64, patches: usize) -> Result<f64> {
    if patches == 0 {
        return Err(Error::arg("patch count must be at least 1"));
    }
    if !(frobenius_sq_sum >= 0.0) {
        return Err(Error::arg("Frobenius mass must be non-negative"));
    }
    Ok(b_t.abs() * frobenius_sq_sum.sqrt() * (patches as f64).sqrt())
}

/// Cross-patch coupling bound for a single attention layer.
pub fn attention_cross_bound(
    offdiag_attention_mass: f64,
    wv_norm: f64,
    l_ff: f64,
    p_norm: f64,
    grad_a_max: f64,
    b_t: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&offdiag_attention_mass) {
        return Err(Error::arg(format!("off-diagonal attention mass must lie in [0, 1], got {offdiag_attention_mass}")));
    }
    if [wv_norm, l_ff, p_norm, grad_a_max].iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::arg("attention norms must be non-negative"));
    }
    Ok(b_t.abs() * l_ff * (1.0 + p_norm * grad_a_max) * wv_norm * offdiag_attention_mass)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BridgeBound {
    /// Product of all block factors.
    pub s_loc: f64,
    /// `c_t = prod_{k<t} kappa_k`, with `c_1 = 1`.
    pub weights: Vec<f64>,
    /// `+inf` when some factor is not contractive (batch variant only).
    pub bound: f64,
}

fn check_kappas(kappas: &[f64]) -> Result<()> {
    match kappas.iter().position(|k| !(*k > 0.0 && *k < 1.0)) {
        Some(index) => Err(Error::NotContractive { index, kappa: kappas[index] }),
        None => Ok(()),
    }
}

fn prefix_products(kappas: &[f64]) -> (Vec<f64>, f64) {
    let mut weights = Vec::with_capacity(kappas.len());
    let mut c = 1.0;
    for k in kappas {
        weights.push(c);
        c *= k;
    }
    (weights, c)
}

/// Distance from the chain start to the fixed point of the composed map.
pub fn collage_bridge(kappas_pc: &[f64], displacements: &[f64]) -> Result<BridgeBound> {
    if kappas_pc.len() != displacements.len() || kappas_pc.is_empty() {
        return Err(Error::arg("kappa and displacement sequences must be non-empty and of equal length"));
    }
    if displacements.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::arg("displacements must be non-negative"));
    }
    check_kappas(kappas_pc)?;
    let (weights, s_loc) = prefix_products(kappas_pc);
    let sum: CompensatedSum = weights.iter().zip(displacements).map(|(c, d)| c * d).collect();
    Ok(BridgeBound { bound: sum.value() / (1.0 - s_loc), s_loc, weights })
}

/// As [`collage_bridge`], but a non-contractive factor yields `bound = +inf`.
pub fn collage_bridge_or_inf(kappas_pc: &[f64], displacements: &[f64]) -> Result<BridgeBound> {
    match collage_bridge(kappas_pc, displacements) {
        Err(Error::NotContractive { .. }) => {
            let (weights, s_loc) = prefix_products(kappas_pc);
            Ok(BridgeBound { s_loc, weights, bound: f64::INFINITY })
        }
        other => other,
    }
}

/// Wasserstein-1 distance bound between the prior and the fixed point.
pub fn w1_bridge(kappas_pc: &[f64], r_norms: &[f64], losses: &[f64], abs_b: &[f64]) -> Result<f64> {
    let n = kappas_pc.len();
    if n == 0 || r_norms.len() != n || losses.len() != n || abs_b.len() != n {
        return Err(Error::arg("all sequences must be non-empty and of equal length"));
    }
    if r_norms.iter().chain(losses).chain(abs_b).any(|x| !(*x >= 0.0)) {
        return Err(Error::arg("norms, losses and |b| must be non-negative"));
    }
    check_kappas(kappas_pc)?;
    let (weights, s_loc) = prefix_products(kappas_pc);
    let sum: CompensatedSum = (0..n)
        .map(|i| {
            let term = weights[i] * (r_norms[i] + abs_b[i] * losses[i].sqrt());
            term * term
        })
        .collect();
    Ok((n as f64).sqrt() / (1.0 - s_loc) * sum.value().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FmKappa {
    pub kappa: f64,
    /// `mu_min > delta_tilde (1 - t)`.
    pub min_condition: bool,
    /// `mu_max < T (1 - t)`.
    pub max_condition: bool,
}

impl FmKappa {
    pub fn holds(&self) -> bool {
        self.min_condition && self.max_condition
    }
}

/// Per-step factor of an Euler flow-matching sampler with `steps` steps at time `t`.
pub fn fm_kappa(steps: usize, t: f64, mu_min: f64, mu_max: f64, delta_tilde: f64) -> Result<FmKappa> {
    if steps == 0 {
        return Err(Error::arg("T must be at least 1"));
    }
    if !(0.0..1.0).contains(&t) {
        return Err(Error::arg(format!("time must lie in [0, 1), got {t}")));
    }
    if !(mu_min > 0.0 && mu_min <= mu_max) {
        return Err(Error::arg("need 0 < mu_min <= mu_max"));
    }
    if !(delta_tilde >= 0.0) {
        return Err(Error::arg("delta_tilde must be non-negative"));
    }
    let n = steps as f64;
    let rem = 1.0 - t;
    Ok(FmKappa {
        kappa: (1.0 - mu_min / (n * rem)) + delta_tilde / n,
        min_condition: mu_min > delta_tilde * rem,
        max_condition: mu_max < n * rem,
    })
}

/// CSV of `f_t(lambda)` alongside `lambda*(t)` and `L*` for one `lambda`.
pub fn write_contraction_csv<W: Write>(s: &Schedule, lambda: f64, mut w: W) -> Result<()> {
    if !(lambda > 0.0) {
        return Err(Error::arg(format!("lambda must be positive, got {lambda}")));
    }
    let mut out = String::from("t,f_at_lambda,lambda_star,L_star\n");
    for g in s.geometries() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            g.timestep,
            fmt17(g.expansion(lambda)),
            fmt17(g.lambda_star()),
            fmt17(g.l_star)
        ));
    }
    w.write_all(out.as_bytes()).map_err(|e| Error::io("<output>", e))
}
