//! Adaptive exit threshold from a two-component Beta mixture over
//! shallow-exit confidences, split by whether the shallow prediction agreed
//! with the full-depth prediction.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const DEFAULT_ZETA: f64 = 0.4;
pub const DEFAULT_INITIAL: f64 = 0.9;
pub const DEFAULT_CALIBRATION: f64 = 0.03;
pub const GRID: f64 = 1e-4;
const PRIOR: f64 = 0.5;

pub fn beta_pdf(x: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(x));
    }
    let ln_norm = ln_gamma(alpha + beta) - ln_gamma(alpha) - ln_gamma(beta);
    Ok(ln_norm.exp() * x.powf(alpha - 1.0) * (1.0 - x).powf(beta - 1.0))
}

/// Component 0 models disagreeing tokens, component 1 agreeing ones; both
/// priors are fixed at 0.5.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaMixture {
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
}

/// Method-of-moments `(α, β)` from a sample mean and (population) variance.
pub fn moments_to_beta(mean: f64, var: f64) -> Result<(f64, f64)> {
    if !(mean > 0.0 && mean < 1.0) || !(var > 0.0) || var >= mean * (1.0 - mean) {
        return Err(Error::Consistency(format!("infeasible beta moments mean {mean} variance {var}")));
    }
    let alpha = mean * (mean * (1.0 - mean) / var - 1.0);
    Ok((alpha, alpha * (1.0 - mean) / mean))
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
}

impl BetaMixture {
    /// Fits each class from its own samples. Classes with fewer than two
    /// samples or infeasible moments make the whole fit fail.
    pub fn fit_moments(samples: &[(f64, bool)]) -> Result<Self> {
        let mut out = BetaMixture { alpha: [0.0; 2], beta: [0.0; 2] };
        for k in 0..2 {
            let xs: Vec<f64> = samples.iter().filter(|s| s.1 == (k == 1)).map(|s| s.0).collect();
            if xs.len() < 2 {
                return Err(Error::Consistency(format!("class {k} has {} samples", xs.len())));
            }
            if let Some(x) = xs.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::Domain(*x));
            }
            let (m, v) = mean_var(&xs);
            let (a, b) = moments_to_beta(m, v)?;
            out.alpha[k] = a;
            out.beta[k] = b;
        }
        Ok(out)
    }

    pub fn posterior_k1(&self, x: f64) -> Result<f64> {
        let p0 = PRIOR * beta_pdf(x, self.alpha[0], self.beta[0])?;
        let p1 = PRIOR * beta_pdf(x, self.alpha[1], self.beta[1])?;
        if p0 + p1 == 0.0 || !(p0 + p1).is_finite() {
            if p1.is_infinite() && p0.is_finite() {
                return Ok(1.0);
            }
            if p0.is_infinite() && p1.is_finite() {
                return Ok(0.0);
            }
            return Err(Error::UndefinedPosterior(x));
        }
        Ok(p1 / (p0 + p1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    pub lambda: f64,
    /// The posterior never reached ζ; `lambda` is 1.0 (never exit).
    pub warning: bool,
}

/// Smallest grid point whose posterior of agreement reaches `zeta`.
pub fn estimate_threshold(mix: &BetaMixture, zeta: f64) -> ThresholdEstimate {
    let steps = (1.0 / GRID).round() as usize;
    for i in 0..=steps {
        let x = i as f64 * GRID;
        if let Ok(p) = mix.posterior_k1(x) {
            if p >= zeta {
                return ThresholdEstimate { lambda: x, warning: false };
            }
        }
    }
    ThresholdEstimate { lambda: 1.0, warning: true }
}

/// Running estimator: collects calibration samples during the first
/// sequences and refits after each of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveThreshold {
    pub zeta: f64,
    pub lambda: f64,
    pub budget: usize,
    pub sequences_seen: usize,
    pub samples: Vec<(f64, bool)>,
    pub history: Vec<f64>,
    pub warning: bool,
}

impl AdaptiveThreshold {
    /// `budget` sequences (`ceil(fraction · total)`, at least one) feed the fit.
    pub fn new(zeta: f64, initial: f64, total_sequences: usize, fraction: f64) -> Self {
        let budget = ((total_sequences as f64 * fraction).ceil() as usize).max(1);
        AdaptiveThreshold { zeta, lambda: initial, budget, sequences_seen: 0, samples: Vec::new(), history: Vec::new(), warning: false }
    }

    pub fn calibrating(&self) -> bool {
        self.sequences_seen < self.budget
    }

    pub fn record(&mut self, confidence: f64, agrees: bool) {
        if self.calibrating() {
            self.samples.push((confidence, agrees));
        }
    }

    /// Closes a sequence; refits while calibrating. A degenerate fit keeps
    /// the previous threshold.
    pub fn end_sequence(&mut self) -> f64 {
        if self.calibrating() {
            if let Ok(mix) = BetaMixture::fit_moments(&self.samples) {
                let est = estimate_threshold(&mix, self.zeta);
                self.lambda = est.lambda;
                self.warning = est.warning;
            }
        }
        self.sequences_seen += 1;
        self.history.push(self.lambda);
        self.lambda
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pdf_values() {
        assert!((beta_pdf(0.3, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((beta_pdf(0.5, 2.0, 2.0).unwrap() - 1.5).abs() < 1e-12);
        assert!(matches!(beta_pdf(1.5, 2.0, 2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn moment_inversion() {
        let (a, b) = moments_to_beta(0.5, 1.0 / 12.0).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        let (a, b) = moments_to_beta(0.8, 0.01).unwrap();
        assert!((a - 12.0).abs() < 1e-9 && (b - 3.0).abs() < 1e-9);
        assert!(moments_to_beta(0.5, 0.3).is_err());
    }

    #[test]
    fn symmetric_mixture_posterior() {
        let mix = BetaMixture { alpha: [2.0, 5.0], beta: [5.0, 2.0] };
        assert!((mix.posterior_k1(0.5).unwrap() - 0.5).abs() < 1e-12);
        assert!(mix.posterior_k1(0.999).unwrap() > 0.999);
        assert!(matches!(mix.posterior_k1(0.0), Err(Error::UndefinedPosterior(_))));
    }

    #[test]
    fn never_reaching_zeta_warns() {
        let mix = BetaMixture { alpha: [5.0, 2.0], beta: [2.0, 5.0] };
        let e = estimate_threshold(&mix, 1.0);
        assert!(e.warning && e.lambda == 1.0);
    }

    #[test]
    fn degenerate_fit_keeps_threshold() {
        let mut t = AdaptiveThreshold::new(0.4, 0.9, 100, 0.03);
        assert_eq!(t.budget, 3);
        t.record(0.7, true);
        assert_eq!(t.end_sequence(), 0.9);
    }
}
