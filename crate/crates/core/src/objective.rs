//! Multi-task objective: uncertainty-weighted task losses plus the
//! cross-task subspace orthogonality penalty.
//!
//! With per-task losses `L_t` and learned log-variances `s_t`,
//!
//! `L_MTL = sum_t 1/2 (L_t * exp(-s_t) + s_t)`
//!
//! which for fixed `L_t` is minimized in closed form at `s_t = ln L_t`.
//! The orthogonality penalty sums `||A_i^T A_j||_F^2` over all ordered
//! pairs of task subspace matrices within each same-role group, and the
//! total objective is `L_total = L_MTL + lambda * L_ortho`.

use crate::autodiff::{Element, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::peft::PeftRegistry;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Focal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Weight of the orthogonality penalty.
    pub lambda: f64,
    /// Fixed per-task weights applied to each `L_t` before uncertainty
    /// weighting; one entry per configured task.
    pub task_weights: Vec<f64>,
    pub loss_kind: LossKind,
    /// Focusing exponent for [`LossKind::Focal`].
    pub focal_gamma: f64,
    /// Post-step clamp range for the log-variances.
    pub log_var_clamp: (f64, f64),
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: 0.1,
            task_weights: vec![1.0, 1.2, 1.1],
            loss_kind: LossKind::CrossEntropy,
            focal_gamma: 2.0,
            log_var_clamp: (-3.0, 3.0),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self, tasks: usize) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::config(format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        if self.task_weights.len() != tasks {
            return Err(Error::config(format!(
                "{} task weights for {} tasks",
                self.task_weights.len(),
                tasks
            )));
        }
        if self
            .task_weights
            .iter()
            .any(|w| !w.is_finite() || *w <= 0.0)
        {
            return Err(Error::config("task weights must be finite and positive"));
        }
        if !self.focal_gamma.is_finite() || self.focal_gamma < 0.0 {
            return Err(Error::config("focal_gamma must be finite and >= 0"));
        }
        let (lo, hi) = self.log_var_clamp;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config(format!("invalid log_var clamp [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Learned per-task log-variances `s_t`, initialized to zero
/// (unit variance) and clamped after every optimizer step.
pub struct UncertaintyWeights<E> {
    log_var: Parameter<E>,
    lo: f64,
    hi: f64,
}

impl<E: Element> UncertaintyWeights<E> {
    pub fn new(tasks: usize) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::config(
                "uncertainty weighting needs at least one task",
            ));
        }
        Ok(UncertaintyWeights {
            log_var: Parameter::new("objective.log_var", Tensor::zeros(&[tasks]), true),
            lo: -3.0,
            hi: 3.0,
        })
    }

    pub fn set_clamp(&mut self, lo: f64, hi: f64) -> Result<()> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config(format!("invalid log_var clamp [{lo}, {hi}]")));
        }
        self.lo = lo;
        self.hi = hi;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.log_var.tensor().numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn log_var(&self) -> &Parameter<E> {
        &self.log_var
    }

    /// Project the log-variances back into the clamp range in place.
    pub fn clamp(&self) {
        let (lo, hi) = (E::from_f64(self.lo), E::from_f64(self.hi));
        let clamped: Vec<E> = self
            .log_var
            .tensor()
            .data()
            .iter()
            .map(|&v| v.max(lo).min(hi))
            .collect();
        self.log_var.tensor().set_data(&clamped);
    }

    /// Current `s_t` values as f64.
    pub fn values(&self) -> Vec<f64> {
        self.log_var
            .tensor()
            .data()
            .iter()
            .map(|&v| v.to_f64())
            .collect()
    }

    /// Current `sigma_t^2 = exp(s_t)`.
    pub fn sigma_sq(&self) -> Vec<f64> {
        self.values().into_iter().map(f64::exp).collect()
    }
}

/// Weighted per-task classification losses `w_t * L_t`, one scalar
/// tensor per task in the order of `logits`.
pub fn task_losses<E: Element>(
    logits: &[Tensor<E>],
    labels: &[Vec<usize>],
    cfg: &ObjectiveConfig,
) -> Result<Vec<Tensor<E>>> {
    if logits.len() != labels.len() || logits.len() != cfg.task_weights.len() {
        return Err(Error::input(format!(
            "{} logit sets, {} label sets, {} task weights",
            logits.len(),
            labels.len(),
            cfg.task_weights.len()
        )));
    }
    logits
        .iter()
        .zip(labels)
        .zip(&cfg.task_weights)
        .map(|((z, y), &w)| {
            let base = match cfg.loss_kind {
                LossKind::CrossEntropy => z.softmax_cross_entropy(y)?,
                LossKind::Focal => z.focal_loss(y, E::from_f64(cfg.focal_gamma))?,
            };
            Ok(base.scale(E::from_f64(w)))
        })
        .collect()
}

/// `sum_t 1/2 (L_t * exp(-s_t) + s_t)` as a graph scalar.
pub fn mtl_loss<E: Element>(
    task_losses: &[Tensor<E>],
    uncertainty: &UncertaintyWeights<E>,
) -> Result<Tensor<E>> {
    if task_losses.len() != uncertainty.len() {
        return Err(Error::input(format!(
            "{} task losses for {} log-variances",
            task_losses.len(),
            uncertainty.len()
        )));
    }
    let l = Tensor::stack_scalars(task_losses)?;
    let s = uncertainty.log_var().tensor();
    Ok(l.mul(&s.neg().exp())?
        .add(s)?
        .scale(E::from_f64(0.5))
        .sum_all())
}

/// Cross-task subspace decoupling penalty over all same-role groups.
///
/// Within each group, this is the sum of `||A_i^T A_j||_F^2` over
/// ordered pairs `i != j`; since the two orders give identical values
/// (`||M||_F = ||M^T||_F`), each unordered pair is computed once and
/// doubled.
pub fn ortho_loss<E: Element>(registry: &PeftRegistry<E>) -> Result<Tensor<E>> {
    let mut total: Option<Tensor<E>> = None;
    for group in registry.subspace_groups() {
        for i in 0..group.len() {
            for j in (i + 1)..group.len() {
                let cross = group[i].1.transpose()?.matmul(&group[j].1)?;
                let term = cross.frobenius_sq()?;
                total = Some(match total {
                    None => term,
                    Some(t) => t.add(&term)?,
                });
            }
        }
    }
    match total {
        Some(t) => Ok(t.scale(E::from_f64(2.0))),
        None => Ok(Tensor::scalar(E::zero())),
    }
}

/// `L_total = L_MTL + lambda * L_ortho`.
pub fn total_loss<E: Element>(
    l_mtl: &Tensor<E>,
    l_ortho: &Tensor<E>,
    lambda: f64,
) -> Result<Tensor<E>> {
    l_mtl.add(&l_ortho.scale(E::from_f64(lambda)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::peft::{PeftConfig, PeftKind};
    use crate::task::Task;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn mtl_at_unit_variance_is_half_the_loss_sum() {
        // s = 0 => each term is L_t / 2
        let u = UncertaintyWeights::<f64>::new(3).unwrap();
        let l = mtl_loss(&[scalar(1.0), scalar(1.0), scalar(1.0)], &u).unwrap();
        assert!((l.item().unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn mtl_matches_hand_value() {
        // L = [1, 2], s = [0, 1]:
        //   1/2 (1 * e^0 + 0) + 1/2 (2 * e^-1 + 1) = 1 + 1/e
        let u = UncertaintyWeights::<f64>::new(2).unwrap();
        u.log_var().tensor().set_data(&[0.0, 1.0]);
        let l = mtl_loss(&[scalar(1.0), scalar(2.0)], &u).unwrap();
        let expected = 1.0 + (-1.0f64).exp();
        assert!((l.item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn log_var_gradient_vanishes_at_closed_form_optimum() {
        // d/ds_t = 1/2 (1 - L_t e^{-s_t}) = 0  at  s_t = ln L_t
        let u = UncertaintyWeights::<f64>::new(2).unwrap();
        u.log_var().tensor().set_data(&[2.0f64.ln(), 0.5f64.ln()]);
        let l = mtl_loss(&[scalar(2.0), scalar(0.5)], &u).unwrap();
        l.backward().unwrap();
        let g = u.log_var().tensor().grad_vec().unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12), "grad at optimum: {g:?}");
    }

    #[test]
    fn mtl_grad_check() {
        let u = UncertaintyWeights::<f64>::new(3).unwrap();
        u.log_var().tensor().set_data(&[0.3, -0.7, 1.1]);
        let params = vec![u.log_var().clone()];
        let rel = grad_check(
            || mtl_loss(&[scalar(0.9), scalar(2.1), scalar(0.4)], &u),
            &params,
            1e-6,
        )
        .unwrap();
        assert!(rel < 1e-7, "rel err {rel}");
    }

    #[test]
    fn clamp_projects_into_range() {
        let mut u = UncertaintyWeights::<f64>::new(3).unwrap();
        u.set_clamp(-1.0, 1.0).unwrap();
        u.log_var().tensor().set_data(&[-5.0, 0.25, 9.0]);
        u.clamp();
        assert_eq!(u.values(), vec![-1.0, 0.25, 1.0]);
        assert!(u.set_clamp(2.0, -2.0).is_err());
    }

    fn registry_with_downs(downs: &[Vec<f64>], d: usize, r: usize) -> PeftRegistry<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = PeftConfig {
            kind: PeftKind::Adapter,
            r,
            ..PeftConfig::default()
        };
        let tasks = &Task::ALL[..downs.len()];
        let reg = PeftRegistry::new(&cfg, tasks, &[0], d, &mut rng).unwrap();
        for (task, down) in tasks.iter().zip(downs) {
            reg.adapter(*task, 0)
                .unwrap()
                .down()
                .tensor()
                .set_data(down);
        }
        reg
    }

    #[test]
    fn orthogonal_subspaces_cost_nothing() {
        // A_1 = e1, A_2 = e2 in R^2: A_1^T A_2 = 0
        let reg = registry_with_downs(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2, 1);
        assert_eq!(ortho_loss(&reg).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn identical_subspaces_cost_two() {
        // A_1 = A_2 = e1: ||A_1^T A_2||^2 = 1 per ordered pair, 2 total
        let reg = registry_with_downs(&[vec![1.0, 0.0], vec![1.0, 0.0]], 2, 1);
        assert!((ortho_loss(&reg).unwrap().item().unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ordered_pair_convention_matches_direct_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cfg = PeftConfig {
            r: 3,
            ..PeftConfig::default()
        };
        let reg = PeftRegistry::<f64>::new(&cfg, &Task::ALL, &[4, 5], 8, &mut rng).unwrap();
        for group in reg.subspace_groups() {
            for (_, a) in &group {
                a.set_data(&Tensor::<f64>::randn(&mut rng, 0.5, &[8, 3]).data_vec());
            }
        }
        let fast = ortho_loss(&reg).unwrap().item().unwrap();
        let mut direct = 0.0;
        for group in reg.subspace_groups() {
            for i in 0..group.len() {
                for j in 0..group.len() {
                    if i != j {
                        let cross = group[i].1.transpose().unwrap().matmul(&group[j].1).unwrap();
                        direct += cross.frobenius_sq().unwrap().item().unwrap();
                    }
                }
            }
        }
        assert!(
            (fast - direct).abs() < 1e-9 * direct.abs().max(1.0),
            "{fast} vs {direct}"
        );
    }

    #[test]
    fn ortho_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let cfg = PeftConfig {
            r: 2,
            ..PeftConfig::default()
        };
        let reg = PeftRegistry::<f64>::new(&cfg, &Task::ALL, &[0], 6, &mut rng).unwrap();
        let params: Vec<_> = Task::ALL
            .iter()
            .map(|&t| reg.adapter(t, 0).unwrap().down().clone())
            .collect();
        let rel = grad_check(|| ortho_loss(&reg), &params, 1e-5).unwrap();
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn lambda_zero_leaves_mtl_bit_exact() {
        let u = UncertaintyWeights::<f64>::new(2).unwrap();
        u.log_var().tensor().set_data(&[0.4, -0.2]);
        let mtl = mtl_loss(&[scalar(1.3), scalar(0.8)], &u).unwrap();
        let ortho = scalar(123.456);
        let total = total_loss(&mtl, &ortho, 0.0).unwrap();
        assert_eq!(
            total.item().unwrap().to_bits(),
            mtl.item().unwrap().to_bits()
        );
    }

    #[test]
    fn task_losses_on_uniform_logits_give_weighted_ln_c() {
        let cfg = ObjectiveConfig::default();
        let logits: Vec<Tensor<f64>> = Task::ALL
            .iter()
            .map(|t| Tensor::zeros(&[2, t.class_count()]))
            .collect();
        let labels: Vec<Vec<usize>> = vec![vec![0, 1], vec![0, 2], vec![3, 0]];
        let losses = task_losses(&logits, &labels, &cfg).unwrap();
        let expected = [4.0f64.ln(), 1.2 * 3.0f64.ln(), 1.1 * 4.0f64.ln()];
        for (l, e) in losses.iter().zip(expected) {
            assert!((l.item().unwrap() - e).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_kind_downweights_relative_to_ce() {
        let cfg = ObjectiveConfig {
            loss_kind: LossKind::Focal,
            task_weights: vec![1.0],
            ..ObjectiveConfig::default()
        };
        let ce_cfg = ObjectiveConfig {
            task_weights: vec![1.0],
            ..ObjectiveConfig::default()
        };
        let logits = vec![Tensor::<f64>::from_vec(vec![2.0, 0.0, -1.0, 0.5], &[1, 4]).unwrap()];
        let labels = vec![vec![0usize]];
        let focal = task_losses(&logits, &labels, &cfg).unwrap()[0]
            .item()
            .unwrap();
        let ce = task_losses(&logits, &labels, &ce_cfg).unwrap()[0]
            .item()
            .unwrap();
        assert!(
            focal < ce,
            "well-classified example: focal {focal} < ce {ce}"
        );
    }

    #[test]
    fn config_validation() {
        assert!(ObjectiveConfig::default().validate(3).is_ok());
        assert!(
            ObjectiveConfig::default().validate(2).is_err(),
            "weight count mismatch"
        );
        assert!(ObjectiveConfig {
            lambda: -0.1,
            ..ObjectiveConfig::default()
        }
        .validate(3)
        .is_err());
        assert!(ObjectiveConfig {
            log_var_clamp: (3.0, -3.0),
            ..ObjectiveConfig::default()
        }
        .validate(3)
        .is_err());
    }
}
