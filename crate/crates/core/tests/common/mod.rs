//! Generators, brute-force oracles and invariant checks shared by the
//! property tests and the acceptance runner.
#![allow(dead_code)]

use pifs_sched::attractor::{self, InfoGainMode, Patch, PatchSpectrum};
use pifs_sched::contraction;
use pifs_sched::design;
use pifs_sched::regime::SuppressionTable;
use pifs_sched::sim;
use pifs_sched::Schedule;
use rand::Rng;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Random valid schedule from log-uniform betas in `[1e-5, 0.3]`.
pub fn random_schedule<R: Rng>(rng: &mut R, steps: usize) -> Schedule {
    let mut a = Vec::with_capacity(steps + 1);
    a.push(1.0);
    let mut prod = 1.0f64;
    for _ in 0..steps {
        let beta = 10f64.powf(rng.random_range(-5.0..(0.3f64).log10()));
        prod *= 1.0 - beta;
        a.push(prod);
    }
    Schedule::from_alpha_bar(a).expect("betas in (0, 1) give a valid schedule")
}

pub fn random_spectrum<R: Rng>(rng: &mut R, patches: usize) -> PatchSpectrum {
    let ps = (0..patches)
        .map(|k| {
            let n_k = rng.random_range(1..=8);
            let lambda = 10f64.powf(rng.random_range(-1.0..2.0));
            Patch::isotropic(k, n_k, lambda).unwrap()
        })
        .collect();
    PatchSpectrum::new(ps).unwrap()
}

/// Suppression table with `0 <= S < f_t(lambda_k)` everywhere, so no factor changes sign.
pub fn random_table<R: Rng>(rng: &mut R, s: &Schedule, spectrum: &PatchSpectrum) -> SuppressionTable {
    let geoms = s.geometries();
    let mut entries = Vec::new();
    for p in &spectrum.patches {
        for g in &geoms {
            let f = g.expansion(p.leading());
            entries.push((p.id, g.timestep, rng.random_range(0.0..0.9) * f));
        }
    }
    SuppressionTable::new(entries, Default::default()).unwrap()
}

pub fn schedule_invariants(s: &Schedule) -> Check {
    for g in s.geometries() {
        ensure!(g.b < 0.0, "b = {} at t = {}", g.b, g.t);
        ensure!(g.l_star > 0.0, "L* = {} at t = {}", g.l_star, g.t);
        // 1 + (f - 1) rounds to 1 once alpha_bar is tiny, so test the excess.
        ensure!(g.expansion_excess(1.0) < 0.0, "f(1) - 1 = {:e} at t = {}", g.expansion_excess(1.0), g.t);
        let ls = g.lambda_star();
        ensure!(ls > 1.0, "lambda* = {ls} at t = {}", g.t);
        let f = g.expansion(ls);
        ensure!((f - 1.0).abs() <= 1e-12, "f(lambda*) - 1 = {:e} at t = {}", f - 1.0, g.t);
    }
    if s.steps() >= 3 {
        let eq = design::equalisation_check(s, 0.0).map_err(|e| e.to_string())?;
        ensure!(eq.spread > 0.0, "equalisation spread is zero for T = {}", s.steps());
    }
    Ok(())
}

pub fn ky_hand_cases() -> Check {
    let d = attractor::ky_dimension(&[1.0, -2.0]).map_err(|e| e.to_string())?;
    ensure!(d.dimension == 1.5, "(+1, -2) -> {}", d.dimension);
    let d = attractor::ky_dimension(&[-0.5, -1.0, -3.0]).map_err(|e| e.to_string())?;
    ensure!(d.dimension == 0.0, "all negative -> {}", d.dimension);
    let d = attractor::ky_dimension(&[0.1, 0.2, 0.3, 0.4]).map_err(|e| e.to_string())?;
    ensure!(d.dimension == 4.0, "all positive -> {}", d.dimension);
    Ok(())
}

/// Suppression can only lower exponents and the dimension; zero suppression changes nothing.
pub fn suppression_inequalities(s: &Schedule, spectrum: &PatchSpectrum, table: &SuppressionTable) -> Check {
    let g = attractor::ky_gaussian(s, spectrum).map_err(|e| e.to_string())?;
    let sup = attractor::ky_suppressed(s, spectrum, table).map_err(|e| e.to_string())?;
    for (a, b) in sup.directions.iter().zip(&g.directions) {
        ensure!(a.exponent <= b.exponent + 1e-15, "patch {}: Lambda_eff {} > Lambda {}", a.patch, a.exponent, b.exponent);
    }
    ensure!(sup.dimension <= g.dimension + 1e-12, "d_eff {} > d {}", sup.dimension, g.dimension);

    let zero = SuppressionTable::constant(spectrum.patches.iter().map(|p| p.id), 0.0).map_err(|e| e.to_string())?;
    let z = attractor::ky_suppressed(s, spectrum, &zero).map_err(|e| e.to_string())?;
    ensure!(z.directions == g.directions, "zero suppression changed the exponents");
    ensure!(z.dimension == g.dimension && z.j_star == g.j_star, "zero suppression changed the dimension");
    Ok(())
}

/// `|growth_t| <= sqrt(N++) sqrt(IG_t)` at every step.
pub fn cs_bound(s: &Schedule, spectrum: &PatchSpectrum) -> Check {
    let root = match attractor::moran_root(s, 1e-12) {
        Ok(r) => r.lambda,
        Err(_) => return Ok(()),
    };
    let n_pp = attractor::expanding_dimension(spectrum, root) as f64;
    let ig = attractor::info_gain_series(s, spectrum, InfoGainMode::Quadratic).map_err(|e| e.to_string())?;
    let growth = attractor::ky_growth_series(s, spectrum, root).map_err(|e| e.to_string())?;
    for (t, (i, d)) in ig.iter().zip(&growth).enumerate() {
        let bound = n_pp.sqrt() * i.sqrt();
        ensure!(d.abs() <= bound * (1.0 + 1e-12) + 1e-300, "step {}: |growth| {} > {}", t + 1, d.abs(), bound);
    }
    Ok(())
}

/// Scalar affine chain `Phi_t(x) = kappa_t x + a_t`, composed with `Phi_T` applied first.
pub struct AffineChain {
    pub kappas: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl AffineChain {
    pub fn random<R: Rng>(rng: &mut R, steps: usize) -> Self {
        Self {
            kappas: (0..steps).map(|_| rng.random_range(0.01..0.99)).collect(),
            offsets: (0..steps).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Applies `Phi_1 o ... o Phi_T`.
    pub fn compose(&self, x: f64) -> f64 {
        self.kappas.iter().zip(&self.offsets).rev().fold(x, |x, (k, a)| k * x + a)
    }

    pub fn fixed_point(&self) -> f64 {
        let b = self.compose(0.0);
        let k = self.compose(1.0) - b;
        b / (1.0 - k)
    }

    pub fn displacements(&self, x: f64) -> Vec<f64> {
        self.kappas.iter().zip(&self.offsets).map(|(k, a)| (k * x + a - x).abs()).collect()
    }
}

pub fn bridge_checks<R: Rng>(rng: &mut R) -> Check {
    for steps in [1usize, 2, 5, 40] {
        let chain = AffineChain::random(rng, steps);
        let x = rng.random_range(-3.0..3.0);
        let b = contraction::collage_bridge(&chain.kappas, &chain.displacements(x)).map_err(|e| e.to_string())?;
        let truth = (chain.fixed_point() - x).abs();
        ensure!(b.bound >= truth * (1.0 - 1e-12), "T = {steps}: bound {} < distance {truth}", b.bound);
        if steps == 1 {
            let banach = chain.displacements(x)[0] / (1.0 - chain.kappas[0]);
            ensure!((b.bound - banach).abs() <= 1e-14 * banach.max(1.0), "T = 1 bound {} != Banach {banach}", b.bound);
        }
    }
    Ok(())
}

pub fn fm_products<R: Rng>(rng: &mut R) -> Check {
    for _ in 0..100 {
        let steps = rng.random_range(1..200);
        let mu = rng.random_range(1e-3..0.999);
        let c = sim::fm_chain(steps, mu, 0.0).map_err(|e| e.to_string())?;
        ensure!(c.product > 0.0 && c.product < 1.0, "T = {steps}, mu = {mu}: product {}", c.product);
        let mut by_kappa = 1.0;
        for i in 0..steps {
            by_kappa *= contraction::fm_kappa(steps, i as f64 / steps as f64, mu, mu, 0.0).map_err(|e| e.to_string())?.kappa;
        }
        ensure!((c.product - by_kappa).abs() <= 1e-14, "fm_chain {} vs fm_kappa {by_kappa}", c.product);
    }
    Ok(())
}

pub fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let below = x.iter().filter(|w| *w < v).count() as f64;
            let equal = x.iter().filter(|w| *w == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn brute_cv_sample(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / m
}

pub fn brute_ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (sx, sy) = (lx.iter().sum::<f64>(), ly.iter().sum::<f64>());
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| a * b).sum();
    let sxx: f64 = lx.iter().map(|a| a * a).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope, (sy - slope * sx) / n)
}

pub fn statistics_vs_brute_force<R: Rng>(rng: &mut R) -> Check {
    for _ in 0..50 {
        let n = rng.random_range(3..60);
        // Coarse values so ties occur.
        let a: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..10.0f64) * 2.0).round() / 2.0 + 0.5).collect();
        let b: Vec<f64> = a.iter().map(|x| x * rng.random_range(0.5..2.0) + rng.random_range(0.0..3.0)).collect();
        let want = brute_pearson(&brute_ranks(&a), &brute_ranks(&b));
        let got = design::spearman(&a, &b).map_err(|e| e.to_string())?.rho;
        if want.is_finite() {
            ensure!((got - want).abs() <= 1e-10, "spearman {got} vs {want}");
        }
        let cv = design::cv(&b).map_err(|e| e.to_string())?;
        ensure!((cv - brute_cv_sample(&b)).abs() <= 1e-10, "cv {cv} vs {}", brute_cv_sample(&b));
        let fit = design::ols_loglog(&a, &b);
        let (slope, intercept) = brute_ols_slope(&a, &b);
        if let Ok(fit) = fit {
            ensure!((fit.slope - slope).abs() <= 1e-10 * slope.abs().max(1.0), "slope {} vs {slope}", fit.slope);
            ensure!((fit.intercept - intercept).abs() <= 1e-10 * intercept.abs().max(1.0), "intercept {} vs {intercept}", fit.intercept);
        }
    }
    Ok(())
}

/// Multiplier of the first-principles chain against the closed-form factor on one random triple.
pub fn multiplier_triple<R: Rng>(rng: &mut R) -> Check {
    let a_prev = rng.random_range(1e-4..1.0f64);
    let a = a_prev * rng.random_range(0.05..0.9999f64);
    let mu = 10f64.powf(rng.random_range(-3.0..3.0));
    let s = Schedule::from_alpha_bar(vec![1.0, a_prev, a]).map_err(|e| e.to_string())?;
    let f = s.step_geometry(2).map_err(|e| e.to_string())?.expansion(mu);
    let m = sim::first_principles_multiplier(a_prev, a, mu);
    ensure!((m - f).abs() <= 1e-14 * f.abs().max(1.0), "a' = {a_prev}, a = {a}, mu = {mu}: {m} vs {f}");
    Ok(())
}
