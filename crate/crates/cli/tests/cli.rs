use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pifs-sched"));
    c.env_remove("PIFS_SCHED_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn field(csv: &str, row: usize, col: &str) -> String {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == col).unwrap_or_else(|| panic!("no column {col}"));
    lines.nth(row).unwrap().split(',').nth(i).unwrap().to_string()
}

#[test]
fn schedule_writes_geometry_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("geom.csv");
    let o = run(&["schedule", "--kind", "cosine", "--T", "1000", "--offset", "0.008", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("t,alpha_bar_prev,alpha_bar,v,b,L_star,snr,logsnr\n"));
    assert_eq!(text.lines().count(), 1001);
}

#[test]
fn moran_subsample_conventions() {
    let trailing = run(&["moran", "--kind", "cosine", "--T", "1000", "--offset", "0", "--subsample", "stride:20", "--tol", "1e-11"]);
    assert!(trailing.status.success());
    let root: f64 = field(&stdout(&trailing), 0, "lambda_star_star").parse().unwrap();
    assert!((root - 1.0506).abs() < 1e-3, "{root}");
    let leading = run(&["moran", "--kind", "cosine", "--offset", "0", "--subsample", "leading:20"]);
    let root: f64 = field(&stdout(&leading), 0, "lambda_star_star").parse().unwrap();
    assert!((root - 1.0497).abs() < 5e-4, "{root}");
}

#[test]
fn compare_table1_shape() {
    let o = run(&["compare", "--presets", "table1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 5);
    let mean: f64 = field(&text, 0, "mean_L_star").parse().unwrap();
    assert!((mean - 0.805).abs() < 0.005);
    assert_eq!(field(&text, 3, "T"), "50");
}

#[test]
fn json_carries_version() {
    let o = run(&["offset", "--format", "json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["result"].as_array().unwrap().len(), 2);
}

#[test]
fn validation_errors_exit_one_with_single_line() {
    for args in [
        vec!["schedule", "--kind", "cosine", "--offset", "-1"],
        vec!["schedule", "--kind", "nope"],
        vec!["schedule", "--kind", "linear", "--bogus"],
        vec!["moran", "--kind", "linear", "--tol", "0"],
        vec!["allocate", "--kind", "linear", "--N", "0"],
    ] {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(o.stdout.is_empty());
    }
}

#[test]
fn missing_files_exit_two() {
    let o = run(&["ky", "--kind", "linear", "--spectrum", "/definitely/not/here.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn no_partial_output_on_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never.csv");
    let spec = dir.path().join("bad.csv");
    std::fs::write(&spec, "patch,n_k,lambda\n0,4,not-a-number\n").unwrap();
    let o = run(&["ky", "--kind", "linear", "--spectrum", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(":2:"), "{}", stderr(&o));
    assert!(!out.exists());
}

fn write_spectrum(dir: &Path) -> String {
    let p = dir.join("spec.csv");
    std::fs::write(&p, "patch,n_k,lambda\n0,192,18.7\n1,192,44.4\n").unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn ky_census_simulate_regime() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spectrum(dir.path());
    let ky = run(&["ky", "--kind", "linear", "--spectrum", &spec]);
    assert!(ky.status.success(), "{}", stderr(&ky));
    assert_eq!(field(&stdout(&ky), 0, "expanding_count"), "384");

    let census = run(&["census", "--kind", "linear", "--spectrum", &spec]);
    assert!(census.status.success());
    assert_eq!(field(&stdout(&census), 0, "fraction"), "1.0000000000000000e0");

    let sim = run(&["simulate", "--kind", "cosine", "--T", "100", "--spectrum", &spec]);
    assert!(sim.status.success(), "{}", stderr(&sim));
    assert!(stdout(&sim).starts_with("mu,gain,lyapunov\n"));

    let table = dir.path().join("sup.csv");
    std::fs::write(&table, "patch,t,S\n0,1,0\n0,1000,0.5\n1,1,0\n1,1000,0.5\n").unwrap();
    let reg = run(&["regime", "--kind", "linear", "--suppression", table.to_str().unwrap(), "--spectrum", &spec]);
    assert!(reg.status.success(), "{}", stderr(&reg));
    assert!(stdout(&reg).starts_with("patch,lambda,t_rel,gamma_min,gamma_max\n"));
}

#[test]
fn fm_chain_violation_is_validation_error() {
    let o = run(&["simulate", "--kind", "linear", "--T", "10", "--fm-mu", "1.0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("flow-matching"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# cosine chain\nkind = cosine\nT = 1000\noffset = 0\nsubsample = stride:20\n").unwrap();
    let base = run(&["moran", "--config", cfg.to_str().unwrap()]);
    assert!(base.status.success(), "{}", stderr(&base));
    let over = run(&["moran", "--config", cfg.to_str().unwrap(), "--subsample", "leading:20"]);
    let a: f64 = field(&stdout(&base), 0, "lambda_star_star").parse().unwrap();
    let b: f64 = field(&stdout(&over), 0, "lambda_star_star").parse().unwrap();
    assert!((a - 1.0506).abs() < 1e-3 && (b - 1.0496).abs() < 1e-3, "{a} {b}");

    std::fs::write(&cfg, "colour = blue\n").unwrap();
    let bad = run(&["moran", "--config", cfg.to_str().unwrap(), "--kind", "linear"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("run.cfg:1"));
}

#[test]
fn patches_from_raw_file() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("imgs.pspc");
    let pixels: Vec<f32> = (0..4 * 4 * 4 * 1).map(|i| ((i * 7919) % 13) as f32 / 13.0).collect();
    pifs_sched::patches::write_raw_f32(&raw, 4, 4, 1, &pixels).unwrap();
    let o = run(&["patches", "--raw", raw.to_str().unwrap(), "--patch-size", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("patch,n_k,lambda\n"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn identical_invocations_are_bit_identical() {
    let a = run(&["allocate", "--kind", "cosine", "--N", "20", "--format", "json"]);
    let b = run(&["allocate", "--kind", "cosine", "--N", "20", "--format", "json"]);
    assert_eq!(a.stdout, b.stdout);
    let single = bin().env("PIFS_SCHED_THREADS", "1").args(["allocate", "--kind", "cosine", "--N", "20", "--format", "json"]).output().unwrap();
    assert_eq!(a.stdout, single.stdout);
}

#[test]
fn help_exits_zero() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("moran"));
}
