//! Per-task classification heads.
//!
//! Each head pools its task branch's tokens, normalizes, applies one
//! hidden layer with dropout, and projects to the task's class logits.

use crate::autodiff::{Element, Mode, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::task::Task;

const LN_EPS: f64 = 1e-5;

pub struct TaskHead<E> {
    pub task: Task,
    norm_g: Parameter<E>,
    norm_b: Parameter<E>,
    fc_w: Parameter<E>,
    fc_b: Parameter<E>,
    cls_w: Parameter<E>,
    cls_b: Parameter<E>,
    d: usize,
    dropout_p: f64,
}

impl<E: Element> TaskHead<E> {
    pub fn new<R: rand::Rng + ?Sized>(
        task: Task,
        d: usize,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::config("head width must be positive"));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::config(format!(
                "dropout {dropout_p} must be in [0, 1)"
            )));
        }
        let classes = task.class_count();
        let prefix = format!("head.{}", task.name());
        let std = E::from_f64(0.02);
        Ok(TaskHead {
            task,
            norm_g: Parameter::new(
                format!("{prefix}.norm_g"),
                Tensor::full(&[d], E::one()),
                true,
            ),
            norm_b: Parameter::new(format!("{prefix}.norm_b"), Tensor::zeros(&[d]), true),
            fc_w: Parameter::new(
                format!("{prefix}.fc_w"),
                Tensor::trunc_randn(rng, std, &[d, d]),
                true,
            ),
            fc_b: Parameter::new(format!("{prefix}.fc_b"), Tensor::zeros(&[d]), true),
            cls_w: Parameter::new(
                format!("{prefix}.cls_w"),
                Tensor::trunc_randn(rng, std, &[d, classes]),
                true,
            ),
            cls_b: Parameter::new(format!("{prefix}.cls_b"), Tensor::zeros(&[classes]), true),
            d,
            dropout_p,
        })
    }

    /// `[B * tokens, d] -> [B, classes]` logits.
    pub fn forward<R: rand::Rng + ?Sized>(
        &self,
        branch_tokens: &Tensor<E>,
        batch: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor<E>> {
        let s = branch_tokens.shape();
        if s.len() != 2 || s[1] != self.d {
            return Err(Error::input(format!(
                "head for d = {} got tokens of shape {s:?}",
                self.d
            )));
        }
        let pooled = branch_tokens.mean_pool_rows(batch)?;
        let h = pooled.layer_norm(
            self.norm_g.tensor(),
            self.norm_b.tensor(),
            E::from_f64(LN_EPS),
        )?;
        let h = h
            .matmul(self.fc_w.tensor())?
            .add_row(self.fc_b.tensor())?
            .gelu();
        let h = h.dropout(self.dropout_p, mode, rng)?;
        h.matmul(self.cls_w.tensor())?.add_row(self.cls_b.tensor())
    }

    pub fn parameters(&self) -> Vec<Parameter<E>> {
        vec![
            self.norm_g.clone(),
            self.norm_b.clone(),
            self.fc_w.clone(),
            self.fc_b.clone(),
            self.cls_w.clone(),
            self.cls_b.clone(),
        ]
    }

    pub fn param_count(&self) -> usize {
        let c = self.task.class_count();
        2 * self.d + self.d * self.d + self.d + self.d * c + c
    }
}
