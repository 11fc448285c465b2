//! Small numeric helpers shared across modules.

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<CompensatedSum>().value()
}

/// Bisection for an increasing predicate-like function: `g(lo) < 0 <= g(hi)`.
///
/// Stops as soon as `|g(mid)| < tol` or the bracket stops shrinking. Returns the
/// final midpoint, the value of `g` there, and the iteration count.
pub(crate) fn bisect_increasing<F>(mut lo: f64, mut hi: f64, tol: f64, mut g: F) -> (f64, f64, usize)
where
    F: FnMut(f64) -> f64,
{
    let mut iterations = 0;
    loop {
        let mid = 0.5 * (lo + hi);
        let value = g(mid);
        iterations += 1;
        if value.abs() < tol || mid <= lo || mid >= hi {
            return (mid, value, iterations);
        }
        if value < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}
