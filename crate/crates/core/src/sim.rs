//! Exact-score DDIM chain under block-diagonal Gaussian data, simulated as
//! explicit linear maps. Multipliers are derived here from the Gaussian score
//! and the raw step coefficients, independently of [`crate::contraction`],
//! so the two can check each other.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::attractor::PatchSpectrum;
use crate::contraction::fm_kappa;
use crate::error::{Error, Result};
use crate::numeric::fmt17;
use crate::par;
use crate::schedule::Schedule;

/// Largest patch handled by the dense per-patch mode.
pub const DENSE_MAX_DIM: usize = 64;

/// One step's signal/noise levels, read straight from `alpha_bar`.
#[derive(Debug, Clone, Copy)]
struct RawStep {
    alpha_bar_prev: f64,
    alpha_bar: f64,
}

impl RawStep {
    fn v_prev(&self) -> f64 {
        1.0 - self.alpha_bar_prev
    }

    fn v(&self) -> f64 {
        1.0 - self.alpha_bar
    }

    /// `sqrt(1 - a_{t-1}) - sqrt(a_{t-1}) sqrt(1 - a_t) / sqrt(a_t)`.
    fn b(&self) -> f64 {
        self.v_prev().sqrt() - self.alpha_bar_prev.sqrt() * self.v().sqrt() / self.alpha_bar.sqrt()
    }

    fn drift(&self) -> f64 {
        self.alpha_bar_prev.sqrt() / self.alpha_bar.sqrt()
    }

    /// Exact noise prediction along a direction of variance `mu`: the data
    /// marginal there is `N(0, a mu + v)`, so `eps* = sqrt(v) x / (a mu + v)`.
    fn eps_gain(&self, mu: f64) -> f64 {
        self.v().sqrt() / (self.alpha_bar * mu + self.v())
    }

    fn multiplier(&self, mu: f64) -> f64 {
        self.drift() + self.b() * self.eps_gain(mu)
    }
}

/// Multiplier of one DDIM step along a direction of data variance `mu`.
pub fn first_principles_multiplier(alpha_bar_prev: f64, alpha_bar: f64, mu: f64) -> f64 {
    RawStep { alpha_bar_prev, alpha_bar }.multiplier(mu)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainDirection {
    pub patch: usize,
    pub mu: f64,
    pub multiplicity: usize,
}

#[derive(Debug, Clone)]
pub struct LinearChain {
    steps: Vec<RawStep>,
    directions: Vec<ChainDirection>,
    /// `multipliers[d][t - 1]`.
    multipliers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainResult {
    /// Product of multipliers per direction.
    pub gains: Vec<f64>,
    /// `log(gain) / T`.
    pub lyapunov: Vec<f64>,
    /// Image of the supplied start point.
    pub output: Vec<f64>,
    /// `|Phi(0)|`; the linear chain fixes the origin.
    pub fixed_point_residual: f64,
}

/// Builds the per-direction multipliers of the exact-score chain.
pub fn build_chain(s: &Schedule, spectrum: &PatchSpectrum) -> LinearChain {
    let a = s.alpha_bar();
    let steps: Vec<RawStep> = (1..a.len()).map(|t| RawStep { alpha_bar_prev: a[t - 1], alpha_bar: a[t] }).collect();
    let directions: Vec<ChainDirection> = spectrum
        .patches
        .iter()
        .flat_map(|p| p.directions().into_iter().map(move |(mu, multiplicity)| ChainDirection { patch: p.id, mu, multiplicity }))
        .collect();
    let multipliers = par::map_slice(&directions, |d| steps.iter().map(|st| st.multiplier(d.mu)).collect());
    LinearChain { steps, directions, multipliers }
}

impl LinearChain {
    pub fn steps(&self) -> usize {
        self.steps.len()
    }

    pub fn directions(&self) -> &[ChainDirection] {
        &self.directions
    }

    /// Multiplier of direction `d` at step `t` (1-based).
    pub fn multiplier(&self, d: usize, t: usize) -> f64 {
        self.multipliers[d][t - 1]
    }

    /// Pushes per-direction coordinates through steps `T, T-1, ..., 1`.
    pub fn run(&self, x_t: &[f64]) -> Result<ChainResult> {
        if x_t.len() != self.directions.len() {
            return Err(Error::arg(format!("start point has {} coordinates, chain has {} directions", x_t.len(), self.directions.len())));
        }
        let n = self.steps() as f64;
        let mut gains = Vec::with_capacity(self.directions.len());
        let mut output = Vec::with_capacity(self.directions.len());
        let mut residual = 0.0f64;
        for (m, &x0) in self.multipliers.iter().zip(x_t) {
            let mut x = x0;
            let mut g = 1.0;
            let mut zero = 0.0;
            for &mt in m.iter().rev() {
                x *= mt;
                g *= mt;
                zero *= mt;
            }
            residual = residual.max(zero.abs());
            gains.push(g);
            output.push(x);
        }
        let lyapunov = gains.iter().map(|g| g.ln() / n).collect();
        Ok(ChainResult { gains, lyapunov, output, fixed_point_residual: residual })
    }

    /// Per-direction variance of the pushforward of a standard Gaussian prior.
    pub fn generated_covariance(&self) -> Vec<f64> {
        self.multipliers.iter().map(|m| m.iter().product::<f64>().powi(2)).collect()
    }

    /// Monte Carlo estimate of [`LinearChain::generated_covariance`]: `(variance, standard error)` per direction.
    pub fn sampled_covariance(&self, samples: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gains: Vec<f64> = self.multipliers.iter().map(|m| m.iter().product()).collect();
        let mut sums = vec![(0.0f64, 0.0f64); gains.len()];
        for _ in 0..samples {
            for (acc, g) in sums.iter_mut().zip(&gains) {
                let z: f64 = StandardNormal.sample(&mut rng);
                let y = (g * z).powi(2);
                acc.0 += y;
                acc.1 += y * y;
            }
        }
        let n = samples as f64;
        sums.iter()
            .map(|(s1, s2)| {
                let mean = s1 / n;
                let var = (s2 / n - mean * mean).max(0.0);
                (mean, (var / n).sqrt())
            })
            .collect()
    }

    /// CSV with one row per direction group.
    pub fn write_gains_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let zero = vec![0.0; self.directions.len()];
        let r = self.run(&zero)?;
        let mut out = String::from("mu,gain,lyapunov\n");
        for ((d, g), l) in self.directions.iter().zip(&r.gains).zip(&r.lyapunov) {
            out.push_str(&format!("{},{},{}\n", fmt17(d.mu), fmt17(*g), fmt17(*l)));
        }
        w.write_all(out.as_bytes()).map_err(|e| Error::io("<output>", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenseCheck {
    /// Singular values of the composed patch Jacobian, descending.
    pub singular_values: Vec<f64>,
    /// Per-direction gains, descending.
    pub direction_gains: Vec<f64>,
    /// Largest `|sv - gain|`, scaled by `max(1, largest gain)`.
    pub max_scaled_error: f64,
}

/// Random orthogonal matrix from the QR factorisation of a Gaussian matrix.
fn random_orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    // Fix column signs so the distribution is Haar.
    let signs = DVector::from_fn(n, |i, _| if r[(i, i)] < 0.0 { -1.0 } else { 1.0 });
    q * DMatrix::from_diagonal(&signs)
}

/// Composes full per-patch Jacobians for `Sigma = Q diag(eigenvalues) Q^T` and
/// compares their singular values with the scalar per-direction gains.
pub fn dense_patch_check(s: &Schedule, eigenvalues: &[f64], seed: u64) -> Result<DenseCheck> {
    let n = eigenvalues.len();
    if n == 0 || n > DENSE_MAX_DIM {
        return Err(Error::arg(format!("dense mode supports 1..={DENSE_MAX_DIM} directions, got {n}")));
    }
    if eigenvalues.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
        return Err(Error::arg("eigenvalues must be non-negative and finite"));
    }
    let q = random_orthogonal(n, seed);
    let sigma = &q * DMatrix::from_diagonal(&DVector::from_column_slice(eigenvalues)) * q.transpose();
    let a = s.alpha_bar();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut product = eye.clone();
    // Phi = Phi_1 o ... o Phi_T, so the Jacobian is J_1 J_2 ... J_T.
    for t in 1..a.len() {
        let st = RawStep { alpha_bar_prev: a[t - 1], alpha_bar: a[t] };
        let cov = &sigma * st.alpha_bar + &eye * st.v();
        let inv = cov
            .cholesky()
            .ok_or_else(|| Error::Undefined(format!("marginal covariance not positive definite at t = {t}")))?
            .inverse();
        let jac = &eye * st.drift() + inv * (st.b() * st.v().sqrt());
        product *= jac;
    }
    let mut singular_values: Vec<f64> = product.singular_values().iter().copied().collect();
    singular_values.sort_by(|x, y| y.total_cmp(x));
    let steps: Vec<RawStep> = (1..a.len()).map(|t| RawStep { alpha_bar_prev: a[t - 1], alpha_bar: a[t] }).collect();
    let mut direction_gains: Vec<f64> =
        eigenvalues.iter().map(|&mu| steps.iter().map(|st| st.multiplier(mu)).product::<f64>().abs()).collect();
    direction_gains.sort_by(|x, y| y.total_cmp(x));
    let scale = direction_gains[0].max(1.0);
    let max_scaled_error =
        singular_values.iter().zip(&direction_gains).map(|(s, g)| (s - g).abs() / scale).fold(0.0, f64::max);
    Ok(DenseCheck { singular_values, direction_gains, max_scaled_error })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FmChain {
    /// Per-step factors, in grid order `t = 0, 1/T, ..., (T-1)/T`.
    pub factors: Vec<f64>,
    pub product: f64,
}

/// Euler chain `x + (1/T) v(x, t)` for the linear field `v = -mu x / (1 - t)`.
pub fn fm_chain(steps: usize, mu: f64, delta_tilde: f64) -> Result<FmChain> {
    if steps == 0 {
        return Err(Error::arg("T must be at least 1"));
    }
    let n = steps as f64;
    let mut factors = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = i as f64 / n;
        let k = fm_kappa(steps, t, mu, mu, delta_tilde)?;
        if !k.min_condition {
            return Err(Error::FlowMatchingViolated { step: i, t, reason: format!("mu = {mu} <= delta_tilde (1 - t)") });
        }
        if !k.max_condition {
            return Err(Error::FlowMatchingViolated { step: i, t, reason: format!("mu = {mu} >= T (1 - t) = {}", n * (1.0 - t)) });
        }
        // Image of x = 1 under one Euler step of the linear field.
        let x = 1.0;
        let velocity = -mu * x / (1.0 - t);
        factors.push(x + velocity / n);
    }
    let product = factors.iter().product();
    Ok(FmChain { factors, product })
}
