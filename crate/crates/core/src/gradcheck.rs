//! Central finite-difference checks of recorded gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely; otherwise the
/// rounding noise of the difference quotient (about 1e-11) would dominate
/// the relative error of near-zero entries.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Input index and element index of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares the gradient of the scalar `f(inputs)` against central
/// differences. `f` must be a pure function of its inputs.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::Contract("gradient check needs a scalar output".into()));
        }
        Ok(v.item())
    };
    let mut report = GradReport { max_rel_err: 0.0, worst: (0, 0), checked: 0 };
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_err(analytic[i][j], numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of sum(x*x) checked against a graph that records x*x: passes.
        let x = Tensor::vector(vec![0.3, -0.7, 0.2]);
        let ok = check(&[x.clone()], |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(ok.max_rel_err < 1e-8);
        // A detached branch hides part of the dependence: the check fails.
        let bad = check(&[x], |g, v| {
            let d = g.detach(v[0]);
            let y = g.mul(v[0], d)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(bad.max_rel_err > 0.1);
    }
}
