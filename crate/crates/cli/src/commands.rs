use std::path::Path;

use pifs_sched::attractor::{self, PatchSpectrum, SuppressedRoot};
use pifs_sched::contraction;
use pifs_sched::design::{self, NamedSchedule};
use pifs_sched::numeric::fmt17;
use pifs_sched::patches::{self, ImageSource, PowerOptions};
use pifs_sched::regime::{self, SuppressionTable};
use pifs_sched::schedule::{Schedule, Spacing};
use pifs_sched::sim;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;
use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Fully rendered output, written only after every computation succeeded.
pub struct Rendered {
    pub text: String,
    pub out: Option<std::path::PathBuf>,
}

type Res<T> = Result<T, CliError>;

fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("report types serialise")
}

fn envelope(command: &str, result: Value) -> String {
    let mut s = serde_json::to_string_pretty(&json!({ "version": VERSION, "command": command, "result": result }))
        .expect("json values serialise");
    s.push('\n');
    s
}

fn csv_bytes<F>(f: F) -> String
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}

fn render(output: &OutputArgs, command: &str, csv: impl FnOnce() -> Res<String>, json: impl FnOnce() -> Res<Value>) -> Res<Rendered> {
    let text = match output.format {
        Format::Csv => csv()?,
        Format::Json => envelope(command, json()?),
    };
    Ok(Rendered { text, out: output.out.clone() })
}

pub fn build_schedule(a: &ScheduleArgs) -> Res<Schedule> {
    let mut s = match a.kind {
        Kind::Linear => Schedule::linear(a.steps, a.beta_start, a.beta_end)?,
        Kind::Cosine => {
            let clip = if a.no_beta_clip { None } else { Some(pifs_sched::schedule::COSINE_BETA_CLIP) };
            Schedule::cosine_with_clip(a.steps, a.offset, clip)?
        }
    };
    if let Some(r) = a.resolution {
        s = s.logsnr_shift(r, a.base_resolution)?;
    }
    if let Some(sub) = a.subsample {
        s = s.subsample_stride(sub.stride, sub.spacing)?;
    }
    Ok(s)
}

fn load_spectrum(path: &Path) -> Res<PatchSpectrum> {
    Ok(PatchSpectrum::from_csv_path(path)?)
}

fn load_table(path: &Path, interp: Interp) -> Res<SuppressionTable> {
    Ok(SuppressionTable::from_csv_path(path, interp.into())?)
}

pub fn run(command: Command) -> Res<Rendered> {
    match command {
        Command::Schedule(c) => schedule(c),
        Command::Compare(c) => compare(c),
        Command::Moran(c) => moran(c),
        Command::Ky(c) => ky(c),
        Command::Allocate(c) => allocate(c),
        Command::Patches(c) => patches_cmd(c),
        Command::Simulate(c) => simulate(c),
        Command::Regime(c) => regime_cmd(c),
        Command::Offset(c) => offset(c),
        Command::Census(c) => census(c),
    }
}

fn schedule(c: ScheduleCmd) -> Res<Rendered> {
    let s = build_schedule(&c.schedule)?;
    match c.lambda {
        Some(lambda) => {
            let mut buf = Vec::new();
            contraction::write_contraction_csv(&s, lambda, &mut buf)?;
            let rows: Vec<Value> = s
                .geometries()
                .iter()
                .map(|g| json!({ "t": g.timestep, "f_at_lambda": g.expansion(lambda), "lambda_star": g.lambda_star(), "L_star": g.l_star }))
                .collect();
            render(&c.output, "schedule", || Ok(String::from_utf8(buf).expect("utf-8")), || Ok(json!({ "lambda": lambda, "steps": rows })))
        }
        None => render(
            &c.output,
            "schedule",
            || Ok(csv_bytes(|b| s.write_geometry_csv(b))),
            || {
                Ok(json!({
                    "kind": to_value(s.kind()),
                    "steps": s.steps(),
                    "executed_timesteps": s.executed_timesteps(),
                    "thresholds": to_value(&s.threshold_stats()),
                    "geometry": to_value(&s.geometries()),
                }))
            },
        ),
    }
}

fn compare(c: CompareCmd) -> Res<Rendered> {
    let spectrum = c.spectrum.as_deref().map(load_spectrum).transpose()?;
    let spacing: Spacing = c.spacing.into();
    let schedules = match c.presets {
        Preset::Table1 => vec![
            NamedSchedule::new("linear", Schedule::linear(1000, 1e-4, 0.02)?),
            NamedSchedule::new("cosine_s0", Schedule::cosine(1000, 0.0)?),
            NamedSchedule::new("cosine_s0.008", Schedule::cosine(1000, 0.008)?),
            NamedSchedule::new("ddim50_cosine_s0", Schedule::cosine(1000, 0.0)?.subsample_stride(20, spacing)?),
        ],
        Preset::Table2 => {
            if spectrum.is_none() {
                return Err(CliError::Usage("--presets table2 needs --spectrum".into()));
            }
            vec![
                NamedSchedule::new("linear", Schedule::linear(1000, 1e-4, 0.02)?),
                NamedSchedule::new("cosine_s0.008", Schedule::cosine(1000, 0.008)?),
            ]
        }
    };
    let reports = design::compare_schedules(&schedules, spectrum.as_ref())?;
    render(&c.output, "compare", || Ok(csv_bytes(|b| design::write_comparison_csv(&reports, b))), || Ok(to_value(&reports)))
}

fn moran(c: MoranCmd) -> Res<Rendered> {
    let s = build_schedule(&c.schedule)?;
    let root = attractor::moran_root(&s, c.tol)?;
    let range = s
        .geometries()
        .iter()
        .map(|g| (g.lambda_star(), g.timestep))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("schedules have at least one step");
    let suppressed = match &c.suppression {
        Some(path) => {
            let table = load_table(path, c.interp)?;
            Some(attractor::moran_root_suppressed(&s, &table, c.mode.into(), c.cap, c.tol)?)
        }
        None => None,
    };
    render(
        &c.output,
        "moran",
        || {
            let mut out = String::from("lambda_star_star,residual,iterations,min_lambda_star,argmin_t\n");
            out.push_str(&format!("{},{},{},{},{}\n", fmt17(root.lambda), fmt17(root.residual), root.iterations, fmt17(range.0), range.1));
            if let Some(rows) = &suppressed {
                out.push_str("\npatch,outcome,lambda,residual\n");
                for r in rows {
                    let patch = r.patch.map_or_else(|| "all".to_string(), |p| p.to_string());
                    match r.result {
                        SuppressedRoot::Root { lambda, residual } => {
                            out.push_str(&format!("{patch},root,{},{}\n", fmt17(lambda), fmt17(residual)))
                        }
                        SuppressedRoot::ExceedsCap { cap } => out.push_str(&format!("{patch},exceeds_cap,>{},\n", fmt17(cap))),
                    }
                }
            }
            Ok(out)
        },
        || {
            Ok(json!({
                "root": to_value(&root),
                "min_lambda_star": range.0,
                "argmin_t": range.1,
                "suppressed": suppressed.as_ref().map(to_value),
            }))
        },
    )
}

fn ky(c: KyCmd) -> Res<Rendered> {
    let s = build_schedule(&c.schedule)?;
    let spectrum = load_spectrum(&c.spectrum)?;
    let report = match &c.suppression {
        Some(path) => attractor::ky_suppressed(&s, &spectrum, &load_table(path, c.interp)?)?,
        None => attractor::ky_gaussian(&s, &spectrum)?,
    };
    render(
        &c.output,
        "ky",
        || {
            let opt = |x: Option<f64>| x.map(fmt17).unwrap_or_default();
            let mode = serde_json::to_value(report.mode).expect("enum serialises");
            Ok(format!(
                "mode,expanding_count,j_star,dimension,closed_form,lower_bound,condition_holds\n{},{},{},{},{},{},{}\n",
                mode.as_str().unwrap_or_default(),
                report.expanding_count,
                report.j_star,
                fmt17(report.dimension),
                opt(report.closed_form),
                opt(report.lower_bound),
                report.condition_holds
            ))
        },
        || Ok(to_value(&report)),
    )
}

fn allocate(c: AllocateCmd) -> Res<Rendered> {
    let s = build_schedule(&c.schedule)?;
    let a = design::allocate_steps(&s, c.n)?;
    render(
        &c.output,
        "allocate",
        || {
            let mut out = String::from("i,position,timestep,load,snapped_load\n");
            for i in 0..a.n {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    i + 1,
                    fmt17(a.positions[i]),
                    a.timesteps[i],
                    fmt17(a.loads[i]),
                    fmt17(a.snapped_loads[i])
                ));
            }
            Ok(out)
        },
        || Ok(to_value(&a)),
    )
}

fn patches_cmd(c: PatchesCmd) -> Res<Rendered> {
    let source = match &c.raw {
        Some(p) => ImageSource::raw_f32(p)?,
        None => ImageSource::cifar10(&c.cifar, c.normalization.into())?,
    };
    let opts = PowerOptions { tol: c.power_tol, max_iter: c.max_iter, seed: c.seed };
    let est = patches::patch_covariances(&source, c.patch_size, opts, c.full_spectrum)?;
    let spectrum = est.to_spectrum()?;
    render(&c.output, "patches", || Ok(csv_bytes(|b| spectrum.write_csv(b))), || Ok(to_value(&est)))
}

fn simulate(c: SimulateCmd) -> Res<Rendered> {
    if let Some(mu) = c.fm_mu {
        let chain = sim::fm_chain(c.schedule.steps, mu, c.fm_delta)?;
        let n = chain.factors.len() as f64;
        return render(
            &c.output,
            "simulate",
            || {
                let mut out = String::from("step,t,factor\n");
                for (i, f) in chain.factors.iter().enumerate() {
                    out.push_str(&format!("{i},{},{}\n", fmt17(i as f64 / n), fmt17(*f)));
                }
                Ok(out)
            },
            || Ok(json!({ "mu": mu, "delta_tilde": c.fm_delta, "chain": to_value(&chain) })),
        );
    }
    let path = c.spectrum.as_deref().ok_or_else(|| CliError::Usage("simulate needs --spectrum or --fm-mu".into()))?;
    let s = build_schedule(&c.schedule)?;
    let chain = sim::build_chain(&s, &load_spectrum(path)?);
    let ones = vec![1.0; chain.directions().len()];
    let result = chain.run(&ones)?;
    let mut buf = Vec::new();
    chain.write_gains_csv(&mut buf)?;
    render(
        &c.output,
        "simulate",
        || Ok(String::from_utf8(buf).expect("utf-8")),
        || Ok(json!({ "directions": to_value(&chain.directions()), "result": to_value(&result) })),
    )
}

fn regime_cmd(c: RegimeCmd) -> Res<Rendered> {
    let s = build_schedule(&c.schedule)?;
    let table = load_table(&c.suppression, c.interp)?;
    let spectrum = load_spectrum(&c.spectrum)?;
    let lambdas: Vec<(usize, f64)> = spectrum.patches.iter().map(|p| (p.id, p.leading())).collect();
    let report = regime::release_times(&s, &table, &lambdas)?;
    render(
        &c.output,
        "regime",
        || Ok(csv_bytes(|b| report.write_csv(b))),
        || Ok(json!({ "span": report.span(), "patches": to_value(&report.patches) })),
    )
}

fn offset(c: OffsetCmd) -> Res<Rendered> {
    let rows = design::cosine_offset_analysis(c.steps, &c.offsets)?;
    render(
        &c.output,
        "offset",
        || {
            let mut out = String::from("offset,v1,L1_star,ratio_to_zero_offset\n");
            for r in &rows {
                out.push_str(&format!("{},{},{},{}\n", fmt17(r.offset), fmt17(r.v1), fmt17(r.l1_star), fmt17(r.ratio_to_zero_offset)));
            }
            Ok(out)
        },
        || Ok(to_value(&rows)),
    )
}

fn census(c: CensusCmd) -> Res<Rendered> {
    let s = build_schedule(&c.schedule)?;
    let spectrum = load_spectrum(&c.spectrum)?;
    let report = design::expansion_census(&s, &spectrum, !c.exclude_boundary)?;
    render(
        &c.output,
        "census",
        || {
            let mut out = String::from("patch,lambda,forcing_steps,total_steps,fraction\n");
            for p in &report.patches {
                out.push_str(&format!("{},{},{},{},{}\n", p.patch, fmt17(p.lambda), p.forcing_steps, p.total_steps, fmt17(p.fraction)));
            }
            Ok(out)
        },
        || Ok(to_value(&report)),
    )
}
