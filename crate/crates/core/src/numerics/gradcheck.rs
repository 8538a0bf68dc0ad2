use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares `grad(point)` against central differences of `f`.
///
/// `f` is evaluated twice at `point`; differing results mean the oracle is
/// unusable and an [`Error::InvalidOracle`] is returned.
pub fn grad_check<F, G>(f: F, grad: G, point: &[f64], config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let a = f(point)?;
    let b = f(point)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::InvalidOracle(format!(
            "repeated evaluation differs: {a} vs {b}"
        )));
    }
    let analytic = grad(point)?;
    if analytic.len() != point.len() {
        return Err(Error::InvalidOracle(format!(
            "gradient has {} entries for {} coordinates",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + config.h;
        let up = f(&x)?;
        x[i] = orig - config.h;
        let down = f(&x)?;
        x[i] = orig;
        numeric.push((up - down) / (2.0 * config.h));
    }
    let rel_err: Vec<f64> = analytic.iter().zip(&numeric).map(|(&a, &n)| relative_error(a, n)).collect();
    let (worst, max_rel_err) = rel_err
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_err,
        max_rel_err,
        worst,
        tolerance: config.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn square_at_three() {
        let rep = grad_check(|x| Ok(x[0] * x[0]), |x| Ok(vec![2.0 * x[0]]), &[3.0], GradCheckConfig::default()).unwrap();
        assert!((rep.analytic[0] - 6.0).abs() < 1e-12);
        assert!((rep.numeric[0] - 6.0).abs() < 1e-7);
        assert!(rep.passed());
    }

    #[test]
    fn wrong_gradient_fails() {
        let rep = grad_check(|x| Ok(x[0].sin()), |x| Ok(vec![x[0].sin()]), &[0.3], GradCheckConfig::default()).unwrap();
        assert!(!rep.passed());
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let calls = Cell::new(0.0);
        let f = |x: &[f64]| {
            calls.set(calls.get() + 1.0);
            Ok(x[0] + calls.get())
        };
        assert!(matches!(
            grad_check(f, |_| Ok(vec![1.0]), &[0.0], GradCheckConfig::default()),
            Err(Error::InvalidOracle(_))
        ));
    }
}
