//! Finite-difference verification of analytic gradients (64-bit).

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradEntry {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(f, "{:<32} n={:<5} max_abs={:.3e} max_rel={:.3e}", e.name, e.checked, e.max_abs_err, e.max_rel_err)?;
        }
        Ok(())
    }
}

/// Relative error with a small floor on the denominator so that gradients
/// that are analytically zero compare on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Up to `k` indices spread evenly over `0..n`, both ends included.
pub fn probe_indices(n: usize, k: usize) -> Vec<usize> {
    if n == 0 || k == 0 {
        return Vec::new();
    }
    if k >= n {
        return (0..n).collect();
    }
    if k == 1 {
        return vec![0];
    }
    (0..k).map(|i| (i * (n - 1) + (k - 1) / 2) / (k - 1)).collect()
}

/// Compare analytic gradients of the scalar produced by `f` against central
/// differences for every named input. At most `max_per_input` evenly spaced
/// elements are probed per input.
pub fn gradcheck<F>(
    f: F,
    inputs: &[(String, Tensor<f64>)],
    step: f64,
    max_per_input: usize,
) -> Result<GradReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&g, &vars)?;
    g.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::<f64>::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        let v = g.value(out).item();
        Ok(v)
    };

    let mut current: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradReport::default();
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        let n = t.numel();
        let mut entry = GradEntry { name: name.clone(), checked: 0, max_abs_err: 0.0, max_rel_err: 0.0 };
        for i in probe_indices(n, max_per_input) {
            let orig = current[k].data()[i];
            current[k].data_mut()[i] = orig + step;
            let plus = eval(&current)?;
            current[k].data_mut()[i] = orig - step;
            let minus = eval(&current)?;
            current[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            entry.checked += 1;
            entry.max_abs_err = entry.max_abs_err.max((a - numeric).abs());
            entry.max_rel_err = entry.max_rel_err.max(relative_error(a, numeric));
        }
        report.entries.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probes_are_spread() {
        assert_eq!(probe_indices(5, 10), vec![0, 1, 2, 3, 4]);
        let p = probe_indices(128, 8);
        assert_eq!((p[0], p[7], p.len()), (0, 127, 8));
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert!(p.iter().any(|i| i % 8 != 0));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // exp is correct; a deliberately mis-scaled composite is not.
        let x = Tensor::<f64>::from_fn([3], |i| 0.1 * i as f64);
        let good = gradcheck(|g, v| Ok(g.sum(g.exp(v[0]))), &[("x".into(), x.clone())], DEFAULT_STEP, 10).unwrap();
        assert!(good.passed(1e-6), "{good}");
        // detach inside the graph hides a dependency from the analytic pass
        let bad = gradcheck(
            |g, v| {
                let d = g.detach(v[0]);
                let p = g.mul(v[0], d)?;
                Ok(g.sum(p))
            },
            &[("x".into(), x.map(|v| v + 1.0))],
            DEFAULT_STEP,
            10,
        )
        .unwrap();
        assert!(!bad.passed(1e-2));
    }
}
