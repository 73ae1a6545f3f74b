//! Full model assembly: frozen backbone, per-task PEFT modules,
//! per-task heads, and the uncertainty weights.

use crate::autodiff::{Element, Mode, Parameter, Tensor};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::heads::TaskHead;
use crate::objective::UncertaintyWeights;
use crate::peft::{PeftConfig, PeftRegistry};
use crate::task::Task;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub peft: PeftConfig,
    pub tasks: Vec<Task>,
    pub head_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            peft: PeftConfig::default(),
            tasks: Task::ALL.to_vec(),
            head_dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.peft.validate(self.backbone.embed_dim)?;
        if self.tasks.is_empty() {
            return Err(Error::config("model needs at least one task"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return Err(Error::config(format!("duplicate task {t}")));
            }
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::config(format!(
                "head_dropout {} must be in [0, 1)",
                self.head_dropout
            )));
        }
        Ok(())
    }
}

/// Parameter budget broken down by component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub peft_total: usize,
    pub peft_per_task: usize,
    pub heads: usize,
    pub log_var: usize,
    pub total: usize,
    pub trainable: usize,
}

impl ParamCounts {
    /// Trainable share of the full model, in [0, 1].
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

pub struct Model<E> {
    cfg: ModelConfig,
    pub backbone: Backbone<E>,
    pub peft: PeftRegistry<E>,
    heads: Vec<TaskHead<E>>,
    pub uncertainty: UncertaintyWeights<E>,
}

impl<E: Element> Model<E> {
    /// Build a fresh model. Construction order (backbone, PEFT, heads)
    /// fixes RNG consumption, so equal seeds give equal weights.
    pub fn new<R: rand::Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(&cfg.backbone, rng)?;
        let peft = PeftRegistry::new(
            &cfg.peft,
            &cfg.tasks,
            &cfg.backbone.branch_layers(),
            cfg.backbone.embed_dim,
            rng,
        )?;
        let heads = cfg
            .tasks
            .iter()
            .map(|&t| TaskHead::new(t, cfg.backbone.embed_dim, cfg.head_dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        let uncertainty = UncertaintyWeights::new(cfg.tasks.len())?;
        Ok(Model {
            cfg: cfg.clone(),
            backbone,
            peft,
            heads,
            uncertainty,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tasks(&self) -> &[Task] {
        &self.cfg.tasks
    }

    pub fn task_index(&self, task: Task) -> Result<usize> {
        self.cfg
            .tasks
            .iter()
            .position(|&t| t == task)
            .ok_or_else(|| Error::config(format!("model has no task {task}")))
    }

    pub fn head(&self, task: Task) -> Result<&TaskHead<E>> {
        Ok(&self.heads[self.task_index(task)?])
    }

    pub fn forward_trunk(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        self.backbone.forward_trunk(images)
    }

    /// Task branch + head on precomputed trunk activations.
    pub fn forward_logits<R: rand::Rng + ?Sized>(
        &self,
        trunk: &Tensor<E>,
        batch: usize,
        task: Task,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor<E>> {
        let branch = self
            .backbone
            .forward_task_branch(trunk, batch, &self.peft, task)?;
        self.head(task)?.forward(&branch, batch, mode, rng)
    }

    /// Logits for every configured task; the trunk runs once.
    pub fn forward_all<R: rand::Rng + ?Sized>(
        &self,
        images: &Tensor<E>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<Tensor<E>>> {
        let batch = images.shape()[0];
        let trunk = self.forward_trunk(images)?;
        self.cfg
            .tasks
            .iter()
            .map(|&t| self.forward_logits(&trunk, batch, t, mode, rng))
            .collect()
    }

    /// Every parameter in stable order: backbone, PEFT, heads, log-var.
    pub fn parameters(&self) -> Vec<Parameter<E>> {
        let mut out = self.backbone.parameters();
        out.extend(self.peft.parameters());
        for h in &self.heads {
            out.extend(h.parameters());
        }
        out.push(self.uncertainty.log_var().clone());
        out
    }

    pub fn trainable_parameters(&self) -> Vec<Parameter<E>> {
        self.parameters()
            .into_iter()
            .filter(|p| p.trainable())
            .collect()
    }

    pub fn set_backbone_frozen(&self, frozen: bool) {
        self.backbone.set_frozen(frozen);
    }

    /// Snapshot of every parameter's values, in [`Model::parameters`]
    /// order. Together with [`Model::set_state`] this lets a sweep reset
    /// a model between runs without rebuilding it.
    pub fn state(&self) -> Vec<Vec<E>> {
        self.parameters()
            .iter()
            .map(|p| p.tensor().data_vec())
            .collect()
    }

    /// Restore a snapshot taken from a structurally identical model.
    /// Trainable flags are not part of the state.
    pub fn set_state(&self, state: &[Vec<E>]) -> Result<()> {
        let params = self.parameters();
        if params.len() != state.len() {
            return Err(Error::input(format!(
                "state has {} entries for {} parameters",
                state.len(),
                params.len()
            )));
        }
        for (p, values) in params.iter().zip(state) {
            if p.tensor().numel() != values.len() {
                return Err(Error::input(format!(
                    "state entry for {:?} has {} values, expected {}",
                    p.name(),
                    values.len(),
                    p.tensor().numel()
                )));
            }
            p.tensor().set_data(values);
        }
        Ok(())
    }

    pub fn param_counts(&self) -> ParamCounts {
        let backbone = self.backbone.param_count();
        let peft_total: usize = self
            .peft
            .parameters()
            .iter()
            .map(|p| p.tensor().numel())
            .sum();
        let heads: usize = self.heads.iter().map(|h| h.param_count()).sum();
        let log_var = self.uncertainty.len();
        let trainable: usize = self
            .trainable_parameters()
            .iter()
            .map(|p| p.tensor().numel())
            .sum();
        ParamCounts {
            backbone,
            peft_total,
            peft_per_task: self.peft.per_task_param_count(),
            heads,
            log_var,
            total: backbone + peft_total + heads + log_var,
            trainable,
        }
    }
}
