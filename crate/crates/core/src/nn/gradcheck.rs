//! Central finite-difference check of analytic gradients.

/// Relative perturbation: `h_i = STEP · max(|x_i|, 1)`.
pub const STEP: f64 = 1e-5;

/// Denominator floor of the relative error. Central differences of an O(1)
/// loss carry roundoff near 1e-10 at this step, so exactly-zero gradients
/// (such as key biases under softmax shift invariance) need a floor well
/// above that.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
#[inline]
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient returned by `f` at `point` with central
/// differences of its value. `f` maps a point to `(value, gradient)`.
pub fn grad_check<F>(f: F, point: &[f64], tolerance: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length must match the point");
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let h = STEP * point[i].abs().max(1.0);
        x[i] = point[i] + h;
        let up = f(&x).0;
        x[i] = point[i] - h;
        let down = f(&x).0;
        x[i] = point[i];
        numeric.push((up - down) / (2.0 * h));
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    GradCheckReport { max_rel_error, worst_index, analytic, numeric, tolerance, passed: max_rel_error <= tolerance }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        // f(x) = x^T A x with symmetric A, grad = 2 A x
        let a = [[2.0, 0.5, -1.0], [0.5, 3.0, 0.25], [-1.0, 0.25, 1.5]];
        let f = |x: &[f64]| {
            let mut v = 0.0;
            let mut g = vec![0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    v += x[i] * a[i][j] * x[j];
                    g[i] += 2.0 * a[i][j] * x[j];
                }
            }
            (v, g)
        };
        let r = grad_check(f, &[0.3, -1.2, 2.0], 1e-4);
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |x: &[f64]| (x[0] * x[0], vec![x[0]]);
        let r = grad_check(f, &[1.5], 1e-4);
        assert!(!r.passed);
    }
}
