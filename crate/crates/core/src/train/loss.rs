//! Early-exit loss schedules and distillation terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitMode {
    /// Final output only.
    #[default]
    Single,
    /// `α_i = i / Σ i`.
    WeightedAvg,
    /// `α_i = 1 / n`.
    UnweightedAvg,
    /// `c` for every intermediate output, 1 for the final one.
    Aggressive(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdMode {
    #[default]
    None,
    /// Forward KL from the detached final distribution to each intermediate one.
    ForwardKl,
    /// Hidden-state MSE between the first-stage layers and their dynamically
    /// mapped deeper layers.
    LayerwiseDyna,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSchedule {
    pub mode: ExitMode,
    pub kd: KdMode,
    /// Weight of the distillation term.
    pub kd_coeff: f64,
}

impl LossSchedule {
    pub fn single() -> Self {
        LossSchedule { mode: ExitMode::Single, kd: KdMode::None, kd_coeff: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if let ExitMode::Aggressive(c) = self.mode {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::Config(format!("aggressive coefficient must be non-negative, got {c}")));
            }
        }
        if !self.kd_coeff.is_finite() || self.kd_coeff < 0.0 {
            return Err(Error::Config(format!("kd_coeff must be non-negative, got {}", self.kd_coeff)));
        }
        Ok(())
    }

    /// Coefficient of each of `n` exit depths, shallowest first.
    pub fn coefficients(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::Config("exit loss needs at least one depth".into()));
        }
        self.validate()?;
        Ok(match self.mode {
            ExitMode::Single => (0..n).map(|i| if i + 1 == n { 1.0 } else { 0.0 }).collect(),
            ExitMode::WeightedAvg => {
                let total = (n * (n + 1) / 2) as f64;
                (1..=n).map(|i| i as f64 / total).collect()
            }
            ExitMode::UnweightedAvg => vec![1.0 / n as f64; n],
            ExitMode::Aggressive(c) => (0..n).map(|i| if i + 1 == n { 1.0 } else { c }).collect(),
        })
    }
}

/// Weighted cross-entropy over per-depth logits, plus the self-distillation
/// term (mean over intermediates, scaled by `kd_coeff`) under `ForwardKl`.
/// Returns `(ce, kd)`.
pub fn exit_loss(g: &mut Graph, logits: &[Var], targets: &[usize], schedule: &LossSchedule) -> Result<(Var, Option<Var>)> {
    let coeffs = schedule.coefficients(logits.len())?;
    let mut ce: Option<Var> = None;
    for (&l, &a) in logits.iter().zip(&coeffs) {
        if a == 0.0 {
            continue;
        }
        let c = g.cross_entropy(l, targets)?;
        let c = g.scale(c, a);
        ce = Some(match ce {
            Some(acc) => g.add(acc, c)?,
            None => c,
        });
    }
    let ce = ce.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    let n = logits.len();
    if schedule.kd != KdMode::ForwardKl || n < 2 || schedule.kd_coeff == 0.0 {
        return Ok((ce, None));
    }
    let teacher = g.value(logits[n - 1]).clone();
    let mut kd = g.forward_kl(&teacher, logits[0])?;
    for &l in &logits[1..n - 1] {
        let k = g.forward_kl(&teacher, l)?;
        kd = g.add(kd, k)?;
    }
    Ok((ce, Some(g.scale(kd, schedule.kd_coeff / (n - 1) as f64))))
}

/// Value of `Σ p_T (ln p_T − ln p_S)` averaged over rows.
pub fn forward_kl(teacher: &Tensor, student: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let kl = g.forward_kl(teacher, s)?;
    Ok(g.value(kl).item())
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("mse of {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Monotone (`m(1) ≤ … ≤ m(L_S)`) assignment of shallow layers to deep
/// layers minimising the summed MSE. Ties resolve to the lexicographically
/// smallest mapping. Returns the mapping and the mean MSE over mapped pairs.
pub fn kd_dyna_map(shallow: &[Tensor], deep: &[Tensor]) -> Result<(Vec<usize>, f64)> {
    let (ls, ld) = (shallow.len(), deep.len());
    if ls == 0 || ls > ld {
        return Err(Error::Mapping(format!("{ls} shallow layers onto {ld} deep layers")));
    }
    let mut cost = vec![vec![0.0; ld]; ls];
    for i in 0..ls {
        for j in 0..ld {
            cost[i][j] = mse(&shallow[i], &deep[j])?;
        }
    }
    // suffix[i][j]: best cost of rows i.. given m(i) = j.
    let mut suffix = vec![vec![0.0; ld]; ls];
    for i in (0..ls).rev() {
        let mut best_after = f64::INFINITY;
        for j in (0..ld).rev() {
            let tail = if i + 1 < ls {
                best_after = best_after.min(suffix[i + 1][j]);
                best_after
            } else {
                0.0
            };
            suffix[i][j] = cost[i][j] + tail;
        }
    }
    let mut map = Vec::with_capacity(ls);
    let mut lo = 0;
    for row in &suffix {
        let mut arg = lo;
        for j in lo..ld {
            if row[j] < row[arg] {
                arg = j;
            }
        }
        map.push(arg);
        lo = arg;
    }
    let total: f64 = map.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((map, total / ls as f64))
}

/// Graph form of the dynamic-mapping loss; the deep side is detached.
pub fn kd_dyna_loss(g: &mut Graph, shallow: &[Var], deep: &[Var]) -> Result<(Var, Vec<usize>)> {
    let sv: Vec<Tensor> = shallow.iter().map(|&v| g.value(v).clone()).collect();
    let dv: Vec<Tensor> = deep.iter().map(|&v| g.value(v).clone()).collect();
    let (map, _) = kd_dyna_map(&sv, &dv)?;
    let mut acc: Option<Var> = None;
    for (i, &j) in map.iter().enumerate() {
        let t = g.detach(deep[j]);
        let e = g.mse(shallow[i], t)?;
        acc = Some(match acc {
            Some(a) => g.add(a, e)?,
            None => e,
        });
    }
    let acc = acc.expect("at least one shallow layer");
    Ok((g.scale(acc, 1.0 / map.len() as f64), map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coefficient_examples() {
        let w = LossSchedule { mode: ExitMode::WeightedAvg, ..Default::default() };
        let c = w.coefficients(3).unwrap();
        for (a, b) in c.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let a = LossSchedule { mode: ExitMode::Aggressive(0.1), ..Default::default() };
        assert_eq!(a.coefficients(2).unwrap(), vec![0.1, 1.0]);
        assert_eq!(LossSchedule::single().coefficients(1).unwrap(), vec![1.0]);
        let u = LossSchedule { mode: ExitMode::UnweightedAvg, ..Default::default() };
        assert_eq!(u.coefficients(4).unwrap(), vec![0.25; 4]);
        assert!(LossSchedule { mode: ExitMode::Aggressive(-1.0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn single_depth_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let targets = [1, 0, 5, 3];
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        for schedule in [LossSchedule::single(), LossSchedule { mode: ExitMode::WeightedAvg, kd: KdMode::ForwardKl, kd_coeff: 1.0 }] {
            let (ce, kd) = exit_loss(&mut g, &[l], &targets, &schedule).unwrap();
            assert!(kd.is_none());
            let want = crate::ops::cross_entropy(&logits, &targets).unwrap();
            assert!((g.value(ce).item() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[3, 5], 1.0, &mut rng);
        assert!(forward_kl(&a, &a).unwrap().abs() < 1e-15);
        let one_hot = Tensor::from_rows(&[vec![0.0, 800.0, 0.0, 0.0]]).unwrap();
        let uniform = Tensor::zeros(&[1, 4]);
        assert!((forward_kl(&one_hot, &uniform).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dyna_map_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let deep: Vec<Tensor> = (0..6).map(|_| Tensor::randn(&[2, 3], 1.0, &mut rng)).collect();
        // Shallow layer i copies deep layer 2i+1 (0-based), i.e. layer 2i 1-based.
        let shallow: Vec<Tensor> = (0..3).map(|i| deep[2 * i + 1].clone()).collect();
        let (m, loss) = kd_dyna_map(&shallow, &deep).unwrap();
        assert_eq!(m, vec![1, 3, 5]);
        assert_eq!(loss, 0.0);
        let same = vec![deep[0].clone(); 4];
        assert_eq!(kd_dyna_map(&same[..2], &same).unwrap(), (vec![0, 0], 0.0));
        assert!(matches!(kd_dyna_map(&same, &same[..2]), Err(Error::Mapping(_))));
    }
}
