//! Noise schedules and the per-step scalar geometry derived from `alpha_bar`.
//!
//! A [`Schedule`] stores both `alpha_bar[t]` and the residual variance
//! `v[t] = 1 - alpha_bar[t]`, each computed in the form that keeps full
//! relative precision (`v` near `t = 0`, `alpha_bar` near `t = T`). Every
//! derived quantity reads whichever of the two is better conditioned.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{fmt17, CompensatedSum};
use crate::par;
use crate::stats;

/// Lower clip for `alpha_bar[T]` of the cosine family.
pub const COSINE_ALPHA_BAR_FLOOR: f64 = 1e-12;
/// Upper clip for per-step betas of the cosine family (improved-DDPM convention).
pub const COSINE_BETA_CLIP: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    Cosine { offset: f64, beta_clip: Option<f64> },
    Subsampled { parent: Box<ScheduleKind>, parent_steps: usize },
    Shifted { base: Box<ScheduleKind>, logsnr_shift: f64 },
    Custom,
}

/// How a stride-`k` DDIM chain picks parent timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    /// `{k, 2k, ..., T}`: the last executed step is the parent's final step.
    Trailing,
    /// `{1, 1 + k, 1 + 2k, ...}`: the first executed step is the parent's step 1.
    Leading,
}

/// Parent timesteps executed by a strided sampler.
pub fn strided_timesteps(parent_steps: usize, stride: usize, spacing: Spacing) -> Result<Vec<usize>> {
    if stride == 0 || stride > parent_steps {
        return Err(Error::arg(format!("stride {stride} invalid for a {parent_steps}-step parent")));
    }
    let steps = match spacing {
        Spacing::Trailing => (1..=parent_steps / stride).map(|i| i * stride).collect(),
        Spacing::Leading => (0..).map(|i| 1 + i * stride).take_while(|&t| t <= parent_steps).collect(),
    };
    Ok(steps)
}

#[derive(Debug, Clone)]
pub struct Schedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
    noise: Vec<f64>,
    executed: Option<Vec<usize>>,
}

/// All per-step scalars of one DDIM step `t -> t - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepGeometry {
    /// Position in this chain, `1..=T`.
    pub t: usize,
    /// Parent-chain timestep for subsampled schedules, otherwise equal to `t`.
    pub timestep: usize,
    pub alpha_bar_prev: f64,
    pub alpha_bar: f64,
    pub v_prev: f64,
    pub v: f64,
    /// `sqrt(alpha_bar_prev / alpha_bar)`.
    pub expand_ratio: f64,
    /// Score step coefficient, always negative.
    pub b: f64,
    /// Contraction threshold `(expand_ratio - 1) / |b|`.
    pub l_star: f64,
    pub snr: f64,
    pub logsnr: f64,
    /// `alpha_bar_prev - alpha_bar`, from the better-conditioned representation.
    #[serde(skip)]
    pub(crate) decrement: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation over the executed steps.
    pub std: f64,
    pub cv: f64,
    pub min_value: f64,
    pub min_timestep: usize,
    pub finest_value: f64,
    pub finest_timestep: usize,
}

fn validate(alpha_bar: &[f64], noise: &[f64]) -> Result<()> {
    if alpha_bar.len() < 2 {
        return Err(Error::InvalidSchedule("a schedule needs at least one step".into()));
    }
    if alpha_bar[0] != 1.0 || noise[0] != 0.0 {
        return Err(Error::InvalidSchedule("alpha_bar[0] must be exactly 1".into()));
    }
    for t in 1..alpha_bar.len() {
        let a = alpha_bar[t];
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::InvalidSchedule(format!("alpha_bar[{t}] = {a} outside (0, 1]")));
        }
        if !(a < alpha_bar[t - 1]) || !(noise[t] > noise[t - 1]) {
            return Err(Error::InvalidSchedule(format!("alpha_bar not strictly decreasing at t = {t}")));
        }
    }
    Ok(())
}

impl Schedule {
    /// DDPM linear-beta schedule.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::arg("T must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::arg(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut noise = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        noise.push(0.0);
        let mut log_alpha = CompensatedSum::new();
        let mut prod = 1.0;
        for s in 1..=steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (s - 1) as f64 / (steps - 1) as f64
            };
            prod *= 1.0 - beta;
            log_alpha.add((-beta).ln_1p());
            alpha_bar.push(prod);
            noise.push(-log_alpha.value().exp_m1());
        }
        let kind = ScheduleKind::Linear { beta_start, beta_end };
        Self::build(kind, alpha_bar, noise, None)
    }

    /// Cosine schedule with the default beta clip.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        Self::cosine_with_clip(steps, offset, Some(COSINE_BETA_CLIP))
    }

    /// Cosine schedule `alpha_bar[t] = f(t) / f(0)`.
    ///
    /// Per-step betas above `beta_clip` are clipped (the product is then carried
    /// forward multiplicatively), and `alpha_bar` is floored at
    /// [`COSINE_ALPHA_BAR_FLOOR`] so the final step stays finite.
    pub fn cosine_with_clip(steps: usize, offset: f64, beta_clip: Option<f64>) -> Result<Self> {
        if steps == 0 {
            return Err(Error::arg("T must be at least 1"));
        }
        if !(offset >= 0.0 && offset.is_finite()) {
            return Err(Error::arg(format!("cosine offset must be >= 0, got {offset}")));
        }
        if let Some(c) = beta_clip {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::arg(format!("beta clip must lie in (0, 1), got {c}")));
            }
        }
        let angle = |t: usize| (t as f64 / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
        let theta0 = angle(0);
        let f0 = theta0.cos().powi(2);
        let mut alpha_bar = vec![1.0];
        let mut noise = vec![0.0];
        // Multiplicative correction accumulated from clipped steps.
        let mut scale = 1.0;
        let mut prev_formula = 1.0;
        for t in 1..=steps {
            let theta = angle(t);
            let formula = theta.cos().powi(2) / f0;
            let step_ratio = if prev_formula > 0.0 { formula / prev_formula } else { 0.0 };
            if let Some(clip) = beta_clip {
                if 1.0 - step_ratio > clip {
                    scale *= (1.0 - clip) / step_ratio.max(f64::MIN_POSITIVE);
                }
            }
            prev_formula = formula;
            let (a, v) = if scale == 1.0 {
                let v = (theta - theta0).sin() * (theta + theta0).sin() / f0;
                (formula, v)
            } else {
                let a = alpha_bar[t - 1] * (1.0 - clip_ratio(step_ratio, beta_clip));
                (a, 1.0 - a)
            };
            let a = a.max(COSINE_ALPHA_BAR_FLOOR);
            let v = v.min(1.0 - COSINE_ALPHA_BAR_FLOOR);
            alpha_bar.push(a);
            noise.push(v);
        }
        Self::build(ScheduleKind::Cosine { offset, beta_clip }, alpha_bar, noise, None)
    }

    /// A schedule from explicit `alpha_bar[0..=T]`, `alpha_bar[0] = 1`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        let noise = alpha_bar.iter().map(|a| 1.0 - a).collect();
        Self::build(ScheduleKind::Custom, alpha_bar, noise, None)
    }

    fn build(kind: ScheduleKind, alpha_bar: Vec<f64>, noise: Vec<f64>, executed: Option<Vec<usize>>) -> Result<Self> {
        validate(&alpha_bar, &noise)?;
        let schedule = Self { kind, alpha_bar, noise, executed };
        for t in 1..=schedule.steps() {
            let g = schedule.geometry_unchecked(t);
            if !(g.b < 0.0 && g.l_star > 0.0 && g.expand_ratio > 1.0) {
                return Err(Error::InvalidSchedule(format!("degenerate step geometry at t = {t}")));
            }
        }
        Ok(schedule)
    }

    /// The chain obtained by executing only the listed parent timesteps.
    pub fn subsample(&self, executed: &[usize]) -> Result<Self> {
        if executed.is_empty() {
            return Err(Error::arg("executed timestep list is empty"));
        }
        for w in executed.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::arg(format!("executed timesteps must be strictly increasing ({} then {})", w[0], w[1])));
            }
        }
        if executed[0] == 0 || executed[executed.len() - 1] > self.steps() {
            return Err(Error::arg(format!("executed timesteps must lie in 1..={}", self.steps())));
        }
        let mut alpha_bar = vec![1.0];
        let mut noise = vec![0.0];
        alpha_bar.extend(executed.iter().map(|&t| self.alpha_bar[t]));
        noise.extend(executed.iter().map(|&t| self.noise[t]));
        let labels = executed.iter().map(|&t| self.timestep_label(t)).collect();
        let kind = ScheduleKind::Subsampled { parent: Box::new(self.kind.clone()), parent_steps: self.steps() };
        Self::build(kind, alpha_bar, noise, Some(labels))
    }

    /// Shortcut for [`strided_timesteps`] followed by [`Schedule::subsample`].
    pub fn subsample_stride(&self, stride: usize, spacing: Spacing) -> Result<Self> {
        self.subsample(&strided_timesteps(self.steps(), stride, spacing)?)
    }

    /// Shifts logSNR by `2 log(d_base / d)` at every step.
    pub fn logsnr_shift(&self, resolution: f64, base_resolution: f64) -> Result<Self> {
        if !(resolution > 0.0 && base_resolution > 0.0) {
            return Err(Error::arg("resolutions must be positive"));
        }
        let shift = 2.0 * (base_resolution / resolution).ln();
        let mut alpha_bar = vec![1.0];
        let mut noise = vec![0.0];
        for t in 1..=self.steps() {
            let logsnr = self.alpha_bar[t].ln() - self.noise[t].ln() + shift;
            let a = 1.0 / (1.0 + (-logsnr).exp());
            let v = 1.0 / (1.0 + logsnr.exp());
            if !(a > 0.0) || !(v > 0.0) {
                return Err(Error::ShiftUnderflow { t });
            }
            alpha_bar.push(a);
            noise.push(v);
        }
        let kind = ScheduleKind::Shifted { base: Box::new(self.kind.clone()), logsnr_shift: shift };
        Self::build(kind, alpha_bar, noise, self.executed.clone())
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Residual variances `v[t] = 1 - alpha_bar[t]`.
    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn executed_timesteps(&self) -> Option<&[usize]> {
        self.executed.as_deref()
    }

    /// Parent timestep of chain position `t` (identity for non-subsampled chains).
    pub fn timestep_label(&self, t: usize) -> usize {
        match &self.executed {
            Some(ts) if t >= 1 => ts[t - 1],
            _ => t,
        }
    }

    pub fn step_geometry(&self, t: usize) -> Result<StepGeometry> {
        self.check_step(t)?;
        Ok(self.geometry_unchecked(t))
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    pub(crate) fn geometry_unchecked(&self, t: usize) -> StepGeometry {
        let (ap, a) = (self.alpha_bar[t - 1], self.alpha_bar[t]);
        let (vp, v) = (self.noise[t - 1], self.noise[t]);
        let decrement = if a > 0.5 { v - vp } else { ap - a };
        let expand_ratio = (ap / a).sqrt();
        let cross = (vp * a).sqrt() + (ap * v).sqrt();
        let abs_b = decrement / (a.sqrt() * cross);
        let l_star = cross / (a.sqrt() * (expand_ratio + 1.0));
        StepGeometry {
            t,
            timestep: self.timestep_label(t),
            alpha_bar_prev: ap,
            alpha_bar: a,
            v_prev: vp,
            v,
            expand_ratio,
            b: -abs_b,
            l_star,
            snr: a / v,
            logsnr: a.ln() - v.ln(),
            decrement,
        }
    }

    /// Geometry of every step `1..=T`, in order.
    pub fn geometries(&self) -> Vec<StepGeometry> {
        par::map_range(self.steps(), |i| self.geometry_unchecked(i + 1))
    }

    pub fn l_star_values(&self) -> Vec<f64> {
        self.geometries().iter().map(|g| g.l_star).collect()
    }

    pub fn threshold_stats(&self) -> ThresholdStats {
        let geoms = self.geometries();
        let values: Vec<f64> = geoms.iter().map(|g| g.l_star).collect();
        let mean = stats::mean(&values);
        let std = stats::std_population(&values);
        let (min_idx, min_value) = values
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one step");
        ThresholdStats {
            count: values.len(),
            mean,
            std,
            cv: std / mean,
            min_value,
            min_timestep: geoms[min_idx].timestep,
            finest_value: values[0],
            finest_timestep: geoms[0].timestep,
        }
    }

    /// Min-SNR-gamma loss weights `min(SNR_t, gamma) / SNR_t`.
    pub fn minsnr_weights(&self, gamma: f64) -> Result<Vec<f64>> {
        if !(gamma > 0.0) {
            return Err(Error::arg(format!("gamma must be positive, got {gamma}")));
        }
        Ok(self.geometries().iter().map(|g| g.snr.min(gamma) / g.snr).collect())
    }

    /// Per-step weights `SNR_t` of the denoising objective.
    pub fn collage_weights(&self) -> Result<Vec<f64>> {
        self.geometries()
            .iter()
            .map(|g| {
                if g.v > 0.0 {
                    Ok(g.snr)
                } else {
                    Err(Error::Undefined(format!("SNR undefined at t = {} (v = 0)", g.t)))
                }
            })
            .collect()
    }

    /// Per-step geometry as CSV, one row per executed step.
    pub fn write_geometry_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,alpha_bar_prev,alpha_bar,v,b,L_star,snr,logsnr")?;
        for g in self.geometries() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                g.timestep,
                fmt17(g.alpha_bar_prev),
                fmt17(g.alpha_bar),
                fmt17(g.v),
                fmt17(g.b),
                fmt17(g.l_star),
                fmt17(g.snr),
                fmt17(g.logsnr)
            )?;
        }
        Ok(())
    }
}

fn clip_ratio(step_ratio: f64, clip: Option<f64>) -> f64 {
    let beta = 1.0 - step_ratio;
    match clip {
        Some(c) => beta.min(c),
        None => beta,
    }
}
