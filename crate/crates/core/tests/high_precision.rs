//! Comparisons against 50-digit values produced by `oracles/high_precision.py`.

use pifs_sched::attractor::{self, Patch, PatchSpectrum};
use pifs_sched::regime::SuppressionTable;
use pifs_sched::Schedule;

fn close(got: f64, want: f64, rel: f64) {
    assert!((got - want).abs() <= rel * want.abs(), "got {got:e}, want {want:e}, rel err {:e}", ((got - want) / want).abs());
}

#[test]
fn linear_thresholds() {
    let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
    close(s.step_geometry(1).unwrap().l_star, 0.005000125006250390652345801, 1e-13);
    close(s.step_geometry(500).unwrap().l_star, 0.9596953728838602132014278, 1e-13);
    close(s.step_geometry(1000).unwrap().l_star, 0.9999796157736860900785861, 1e-13);
    close(s.threshold_stats().mean, 0.8053923909309868559184358, 1e-13);
}

#[test]
fn linear_expansion_thresholds() {
    let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
    close(s.step_geometry(1).unwrap().lambda_star(), 2.000050003750312527346211, 1e-13);
    close(s.step_geometry(350).unwrap().lambda_star(), 1.002483079197628366358005, 1e-13);
}

#[test]
fn linear_moran() {
    let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
    close(attractor::log_moran_product(&s, 1.5).unwrap(), 0.2010079338839449621776882, 1e-12);
    let root = attractor::moran_root(&s, 1e-14).unwrap();
    close(root.lambda, 1.003758568999696617269396, 1e-12);
}

#[test]
fn cosine_thresholds() {
    let s = Schedule::cosine(1000, 0.008).unwrap();
    close(s.step_geometry(1).unwrap().l_star, 0.003212673226355928761762239, 1e-12);
    close(s.step_geometry(500).unwrap().l_star, 0.7108990671850059861396733, 1e-12);
    close(s.step_geometry(496).unwrap().lambda_star(), 1.001559788347543201133717, 1e-12);
}

#[test]
fn suppressed_ky_short_chain() {
    let s = Schedule::linear(10, 1e-4, 0.02).unwrap();
    let spec = PatchSpectrum::new(vec![Patch::isotropic(0, 2, 50.0).unwrap(), Patch::isotropic(1, 3, 0.5).unwrap()]).unwrap();
    let table = SuppressionTable::constant([0, 1], 0.001).unwrap();
    let r = attractor::ky_suppressed(&s, &spec, &table).unwrap();
    close(r.directions[0].exponent, 0.003947515271739650743508845, 1e-12);
    close(r.directions[1].exponent, -0.006589225011604982267695737, 1e-12);
    close(r.dimension, 3.198172854861463488151646, 1e-11);
}
