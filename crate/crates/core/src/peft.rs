//! Per-task parameter-efficient modules: bottleneck Adapters and LoRA.
//!
//! Both kinds expose a `d x r` down-projection whose columns span the
//! task's feature subspace; the orthogonality regularizer pairs these
//! across tasks. Up-projections (`up` for Adapters, `B` for LoRA) are
//! zero-initialized so a fresh module is an exact identity.

use crate::autodiff::{Element, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::task::Task;
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeftKind {
    Adapter,
    Lora,
}

impl PeftKind {
    pub fn from_name(name: &str) -> Option<PeftKind> {
        match name {
            "adapter" => Some(PeftKind::Adapter),
            "lora" => Some(PeftKind::Lora),
            _ => None,
        }
    }
}

impl std::fmt::Display for PeftKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PeftKind::Adapter => "adapter",
            PeftKind::Lora => "lora",
        })
    }
}

/// Which attention projection a LoRA update attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    K,
    V,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 3] = [LoraTarget::Q, LoraTarget::K, LoraTarget::V];

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeftConfig {
    pub kind: PeftKind,
    /// Bottleneck width / update rank.
    pub r: usize,
    /// Projections LoRA attaches to; ignored for Adapters.
    pub lora_targets: Vec<LoraTarget>,
    /// LoRA scale numerator; the effective scale is `alpha / r`.
    pub lora_alpha: f64,
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig {
            kind: PeftKind::Adapter,
            r: 8,
            lora_targets: LoraTarget::ALL.to_vec(),
            lora_alpha: 8.0,
        }
    }
}

impl PeftConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.r == 0 || self.r >= d {
            return Err(Error::config(format!(
                "bottleneck width r = {} must satisfy 0 < r < d = {d}",
                self.r
            )));
        }
        if self.kind == PeftKind::Lora {
            if self.lora_targets.is_empty() {
                return Err(Error::config("LoRA needs at least one target projection"));
            }
            let mut seen = self.lora_targets.clone();
            seen.dedup();
            if seen.len() != self.lora_targets.len() {
                return Err(Error::config("duplicate LoRA targets"));
            }
            if self.lora_alpha <= 0.0 {
                return Err(Error::config("lora_alpha must be positive"));
            }
        }
        Ok(())
    }
}

// ── adapters ─────────────────────────────────────────────────────────

/// Residual bottleneck: `x + up(GELU(LayerNorm(x . down)))`.
pub struct AdapterModule<E> {
    pub task: Task,
    /// Absolute encoder block index this adapter lives in.
    pub layer: usize,
    down: Parameter<E>,
    norm_g: Parameter<E>,
    norm_b: Parameter<E>,
    up: Parameter<E>,
    r: usize,
    d: usize,
    bypass_norm: bool,
}

impl<E: Element> AdapterModule<E> {
    pub fn new<R: rand::Rng + ?Sized>(
        task: Task,
        layer: usize,
        d: usize,
        r: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if r == 0 || r >= d {
            return Err(Error::config(format!(
                "adapter r = {r} must satisfy 0 < r < d = {d}"
            )));
        }
        let prefix = format!("peft.adapter.{}.{layer}", task.name());
        let std = E::from_f64(0.02);
        Ok(AdapterModule {
            task,
            layer,
            down: Parameter::new(
                format!("{prefix}.down"),
                Tensor::trunc_randn(rng, std, &[d, r]),
                true,
            ),
            norm_g: Parameter::new(
                format!("{prefix}.norm_g"),
                Tensor::full(&[r], E::one()),
                true,
            ),
            norm_b: Parameter::new(format!("{prefix}.norm_b"), Tensor::zeros(&[r]), true),
            up: Parameter::new(format!("{prefix}.up"), Tensor::zeros(&[r, d]), true),
            r,
            d,
            bypass_norm: false,
        })
    }

    /// Diagnostic hook: skip the internal LayerNorm so the projection
    /// maps can be tested in isolation.
    pub fn set_norm_bypass(&mut self, bypass: bool) {
        self.bypass_norm = bypass;
    }

    /// `x + up(GELU(LayerNorm(x . down)))` for `x` of shape `[rows, d]`.
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.d {
            return Err(Error::config(format!(
                "adapter for d = {} applied to input of shape {s:?}",
                self.d
            )));
        }
        let z = x.matmul(self.down.tensor())?;
        let z = if self.bypass_norm {
            z
        } else {
            z.layer_norm(
                self.norm_g.tensor(),
                self.norm_b.tensor(),
                E::from_f64(LN_EPS),
            )?
        };
        let delta = z.gelu().matmul(self.up.tensor())?;
        x.add(&delta)
    }

    /// Intermediate activation at `tap` for input `x`, as used by the
    /// activation heatmaps. Shapes: `Down`/`Norm` give `[rows, r]`,
    /// `Up` gives the pre-residual delta `[rows, d]`.
    pub fn tap(&self, x: &Tensor<E>, tap: crate::viz::ActivationTap) -> Result<Tensor<E>> {
        use crate::viz::ActivationTap;
        let z = x.matmul(self.down.tensor())?;
        if tap == ActivationTap::Down {
            return Ok(z);
        }
        let n = if self.bypass_norm {
            z
        } else {
            z.layer_norm(
                self.norm_g.tensor(),
                self.norm_b.tensor(),
                E::from_f64(LN_EPS),
            )?
        };
        match tap {
            ActivationTap::Norm => Ok(n),
            ActivationTap::Up => n.gelu().matmul(self.up.tensor()),
            ActivationTap::Down => unreachable!(),
        }
    }

    /// The down-projection `A_t` whose columns span the task subspace.
    pub fn down(&self) -> &Parameter<E> {
        &self.down
    }

    pub fn up(&self) -> &Parameter<E> {
        &self.up
    }

    pub fn parameters(&self) -> Vec<Parameter<E>> {
        vec![
            self.down.clone(),
            self.norm_g.clone(),
            self.norm_b.clone(),
            self.up.clone(),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.d * self.r + 2 * self.r + self.r * self.d
    }
}

// ── lora ─────────────────────────────────────────────────────────────

/// Low-rank update to one frozen projection: `x.W + scale . (x.A).B`.
pub struct LoRAModule<E> {
    pub task: Task,
    pub layer: usize,
    pub target: LoraTarget,
    a: Parameter<E>,
    b: Parameter<E>,
    scale: f64,
    r: usize,
    d: usize,
}

impl<E: Element> LoRAModule<E> {
    pub fn new<R: rand::Rng + ?Sized>(
        task: Task,
        layer: usize,
        target: LoraTarget,
        d: usize,
        r: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if r == 0 || r >= d {
            return Err(Error::config(format!(
                "LoRA r = {r} must satisfy 0 < r < d = {d}"
            )));
        }
        if alpha <= 0.0 {
            return Err(Error::config("LoRA alpha must be positive"));
        }
        let prefix = format!("peft.lora.{}.{layer}.{}", task.name(), target.name());
        let std = E::from_f64(0.02);
        Ok(LoRAModule {
            task,
            layer,
            target,
            a: Parameter::new(
                format!("{prefix}.a"),
                Tensor::trunc_randn(rng, std, &[d, r]),
                true,
            ),
            b: Parameter::new(format!("{prefix}.b"), Tensor::zeros(&[r, d]), true),
            scale: alpha / r as f64,
            r,
            d,
        })
    }

    /// The low-rank residual `scale . (x.A).B` alone; the caller adds it
    /// onto the frozen projection's output.
    pub fn delta(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.d {
            return Err(Error::config(format!(
                "LoRA for d = {} applied to input of shape {s:?}",
                self.d
            )));
        }
        Ok(x.matmul(self.a.tensor())?
            .matmul(self.b.tensor())?
            .scale(E::from_f64(self.scale)))
    }

    /// Full adapted projection `x.W + scale . (x.A).B`.
    pub fn forward(&self, x: &Tensor<E>, w: &Tensor<E>) -> Result<Tensor<E>> {
        x.matmul(w)?.add(&self.delta(x)?)
    }

    /// The `A` matrix, the LoRA analog of the Adapter down-projection.
    pub fn a(&self) -> &Parameter<E> {
        &self.a
    }

    pub fn b(&self) -> &Parameter<E> {
        &self.b
    }

    pub fn parameters(&self) -> Vec<Parameter<E>> {
        vec![self.a.clone(), self.b.clone()]
    }

    pub fn param_count(&self) -> usize {
        2 * self.d * self.r
    }
}

// ── registry ─────────────────────────────────────────────────────────

/// All PEFT modules of a model: one module per (task, insertion layer)
/// for Adapters, or per (task, layer, target) for LoRA.
pub struct PeftRegistry<E> {
    kind: PeftKind,
    tasks: Vec<Task>,
    layers: Vec<usize>,
    lora_targets: Vec<LoraTarget>,
    adapters: Vec<AdapterModule<E>>,
    loras: Vec<LoRAModule<E>>,
}

impl<E: Element> PeftRegistry<E> {
    /// Build modules for every task at every insertion layer.
    /// Construction order (task-major, then layer, then target) fixes
    /// both RNG consumption and parameter ordering.
    pub fn new<R: rand::Rng + ?Sized>(
        cfg: &PeftConfig,
        tasks: &[Task],
        layers: &[usize],
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(d)?;
        if tasks.is_empty() || layers.is_empty() {
            return Err(Error::config(
                "PEFT registry needs at least one task and one layer",
            ));
        }
        let mut adapters = Vec::new();
        let mut loras = Vec::new();
        for &task in tasks {
            for &layer in layers {
                match cfg.kind {
                    PeftKind::Adapter => {
                        adapters.push(AdapterModule::new(task, layer, d, cfg.r, rng)?);
                    }
                    PeftKind::Lora => {
                        for &target in &cfg.lora_targets {
                            loras.push(LoRAModule::new(
                                task,
                                layer,
                                target,
                                d,
                                cfg.r,
                                cfg.lora_alpha,
                                rng,
                            )?);
                        }
                    }
                }
            }
        }
        Ok(PeftRegistry {
            kind: cfg.kind,
            tasks: tasks.to_vec(),
            layers: layers.to_vec(),
            lora_targets: cfg.lora_targets.clone(),
            adapters,
            loras,
        })
    }

    pub fn kind(&self) -> PeftKind {
        self.kind
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    fn task_pos(&self, task: Task) -> Result<usize> {
        self.tasks
            .iter()
            .position(|&t| t == task)
            .ok_or_else(|| Error::config(format!("no PEFT modules registered for task {task}")))
    }

    fn layer_pos(&self, layer: usize) -> Result<usize> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .ok_or_else(|| Error::config(format!("no PEFT modules registered at layer {layer}")))
    }

    pub fn adapter(&self, task: Task, layer: usize) -> Result<&AdapterModule<E>> {
        if self.kind != PeftKind::Adapter {
            return Err(Error::config("registry holds LoRA modules, not Adapters"));
        }
        let idx = self.task_pos(task)? * self.layers.len() + self.layer_pos(layer)?;
        Ok(&self.adapters[idx])
    }

    pub fn adapter_mut(&mut self, task: Task, layer: usize) -> Result<&mut AdapterModule<E>> {
        if self.kind != PeftKind::Adapter {
            return Err(Error::config("registry holds LoRA modules, not Adapters"));
        }
        let idx = self.task_pos(task)? * self.layers.len() + self.layer_pos(layer)?;
        Ok(&mut self.adapters[idx])
    }

    pub fn lora(
        &self,
        task: Task,
        layer: usize,
        target: LoraTarget,
    ) -> Result<Option<&LoRAModule<E>>> {
        if self.kind != PeftKind::Lora {
            return Err(Error::config("registry holds Adapters, not LoRA modules"));
        }
        let Some(tpos) = self.lora_targets.iter().position(|&t| t == target) else {
            return Ok(None); // target not adapted under this config
        };
        let idx = (self.task_pos(task)? * self.layers.len() + self.layer_pos(layer)?)
            * self.lora_targets.len()
            + tpos;
        Ok(Some(&self.loras[idx]))
    }

    /// Each task's subspace matrix at one layer, in fixed task order.
    /// For LoRA this is only well-defined with a single configured
    /// target; multi-target registries must use [`subspace_groups`].
    ///
    /// [`subspace_groups`]: PeftRegistry::subspace_groups
    pub fn collect_subspaces(&self, layer: usize) -> Result<Vec<(Task, Tensor<E>)>> {
        self.layer_pos(layer)?;
        match self.kind {
            PeftKind::Adapter => self
                .tasks
                .iter()
                .map(|&t| Ok((t, self.adapter(t, layer)?.down().tensor().clone())))
                .collect(),
            PeftKind::Lora => {
                if self.lora_targets.len() != 1 {
                    return Err(Error::config(
                        "collect_subspaces is ambiguous for multi-target LoRA; \
                         use subspace_groups",
                    ));
                }
                let target = self.lora_targets[0];
                self.tasks
                    .iter()
                    .map(|&t| {
                        let m = self.lora(t, layer, target)?.expect("configured target");
                        Ok((t, m.a().tensor().clone()))
                    })
                    .collect()
            }
        }
    }

    /// Groups of same-role subspace matrices for the orthogonality
    /// penalty: one group per insertion layer for Adapters, one per
    /// (layer, target) for LoRA. Within a group, entries follow task
    /// order.
    pub fn subspace_groups(&self) -> Vec<Vec<(Task, Tensor<E>)>> {
        let mut groups = Vec::new();
        match self.kind {
            PeftKind::Adapter => {
                for &layer in &self.layers {
                    groups.push(
                        self.tasks
                            .iter()
                            .map(|&t| {
                                (
                                    t,
                                    self.adapter(t, layer)
                                        .expect("built")
                                        .down()
                                        .tensor()
                                        .clone(),
                                )
                            })
                            .collect(),
                    );
                }
            }
            PeftKind::Lora => {
                for &layer in &self.layers {
                    for &target in &self.lora_targets {
                        groups.push(
                            self.tasks
                                .iter()
                                .map(|&t| {
                                    let m = self
                                        .lora(t, layer, target)
                                        .expect("built")
                                        .expect("configured target");
                                    (t, m.a().tensor().clone())
                                })
                                .collect(),
                        );
                    }
                }
            }
        }
        groups
    }

    /// All PEFT parameters in stable (task-major) order.
    pub fn parameters(&self) -> Vec<Parameter<E>> {
        let mut out = Vec::new();
        for a in &self.adapters {
            out.extend(a.parameters());
        }
        for l in &self.loras {
            out.extend(l.parameters());
        }
        out
    }

    /// Parameters belonging to one task only.
    pub fn task_parameters(&self, task: Task) -> Vec<Parameter<E>> {
        let mut out = Vec::new();
        for a in self.adapters.iter().filter(|a| a.task == task) {
            out.extend(a.parameters());
        }
        for l in self.loras.iter().filter(|l| l.task == task) {
            out.extend(l.parameters());
        }
        out
    }

    pub fn per_task_param_count(&self) -> usize {
        let k = self.layers.len();
        match self.kind {
            PeftKind::Adapter => k * self.adapters[0].param_count(),
            PeftKind::Lora => k * self.lora_targets.len() * self.loras[0].param_count(),
        }
    }
}
