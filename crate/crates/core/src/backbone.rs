//! Desk-scale pre-norm transformer backbone.
//!
//! Patch embedding + learned positional embeddings feed a stack of
//! encoder blocks. The first `depth - final_stage_blocks` blocks form
//! the shared trunk; the last `final_stage_blocks` are replayed once per
//! task with that task's PEFT modules spliced in (adapters after the
//! MLP, LoRA on the attention projections). The backbone is frozen
//! during adaptation, so trunk activations can be cached per image.

use crate::autodiff::{Element, Parameter, Tensor};
use crate::dataset::CHANNELS;
use crate::error::{Error, Result};
use crate::peft::{LoraTarget, PeftKind, PeftRegistry};
use crate::task::Task;
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of trailing blocks replayed per task (the "final stage").
    pub final_stage_blocks: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            depth: 8,
            heads: 4,
            mlp_ratio: 4,
            final_stage_blocks: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0
            || self.patch_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return Err(Error::config(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "head count {} must divide embed dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("depth and mlp_ratio must be positive"));
        }
        if self.final_stage_blocks == 0 || self.final_stage_blocks > self.depth {
            return Err(Error::config(format!(
                "final_stage_blocks {} must be in 1..=depth ({})",
                self.final_stage_blocks, self.depth
            )));
        }
        Ok(())
    }

    /// Tokens per image.
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Flattened patch length fed to the embedding.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    /// Index of the first per-task block.
    pub fn trunk_len(&self) -> usize {
        self.depth - self.final_stage_blocks
    }

    /// Absolute indices of the per-task blocks (PEFT insertion layers).
    pub fn branch_layers(&self) -> Vec<usize> {
        (self.trunk_len()..self.depth).collect()
    }
}

/// One pre-norm encoder block:
/// `x += Wo . attn(LN1(x)); x += MLP(LN2(x))`.
pub struct EncoderBlock<E> {
    pub index: usize,
    ln1_g: Parameter<E>,
    ln1_b: Parameter<E>,
    wq: Parameter<E>,
    bq: Parameter<E>,
    wk: Parameter<E>,
    bk: Parameter<E>,
    wv: Parameter<E>,
    bv: Parameter<E>,
    wo: Parameter<E>,
    bo: Parameter<E>,
    ln2_g: Parameter<E>,
    ln2_b: Parameter<E>,
    w1: Parameter<E>,
    b1: Parameter<E>,
    w2: Parameter<E>,
    b2: Parameter<E>,
    heads: usize,
}

impl<E: Element> EncoderBlock<E> {
    fn new<R: rand::Rng + ?Sized>(index: usize, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.mlp_ratio * d;
        let std = E::from_f64(0.02);
        let p = |name: &str, t: Tensor<E>| {
            Parameter::new(format!("backbone.block{index}.{name}"), t, true)
        };
        EncoderBlock {
            index,
            ln1_g: p("ln1.g", Tensor::full(&[d], E::one())),
            ln1_b: p("ln1.b", Tensor::zeros(&[d])),
            wq: p("attn.wq", Tensor::trunc_randn(rng, std, &[d, d])),
            bq: p("attn.bq", Tensor::zeros(&[d])),
            wk: p("attn.wk", Tensor::trunc_randn(rng, std, &[d, d])),
            bk: p("attn.bk", Tensor::zeros(&[d])),
            wv: p("attn.wv", Tensor::trunc_randn(rng, std, &[d, d])),
            bv: p("attn.bv", Tensor::zeros(&[d])),
            wo: p("attn.wo", Tensor::trunc_randn(rng, std, &[d, d])),
            bo: p("attn.bo", Tensor::zeros(&[d])),
            ln2_g: p("ln2.g", Tensor::full(&[d], E::one())),
            ln2_b: p("ln2.b", Tensor::zeros(&[d])),
            w1: p("mlp.w1", Tensor::trunc_randn(rng, std, &[d, h])),
            b1: p("mlp.b1", Tensor::zeros(&[h])),
            w2: p("mlp.w2", Tensor::trunc_randn(rng, std, &[h, d])),
            b2: p("mlp.b2", Tensor::zeros(&[d])),
            heads: cfg.heads,
        }
    }

    /// Attention half-block. `lora` supplies the per-task low-rank
    /// updates for this block, looked up by target projection.
    pub fn attn_half(
        &self,
        x: &Tensor<E>,
        batch: usize,
        lora: Option<(&PeftRegistry<E>, Task)>,
    ) -> Result<Tensor<E>> {
        let h = x.layer_norm(
            self.ln1_g.tensor(),
            self.ln1_b.tensor(),
            E::from_f64(LN_EPS),
        )?;
        let mut q = h.matmul(self.wq.tensor())?.add_row(self.bq.tensor())?;
        let mut k = h.matmul(self.wk.tensor())?.add_row(self.bk.tensor())?;
        let mut v = h.matmul(self.wv.tensor())?.add_row(self.bv.tensor())?;
        if let Some((reg, task)) = lora {
            if let Some(m) = reg.lora(task, self.index, LoraTarget::Q)? {
                q = q.add(&m.delta(&h)?)?;
            }
            if let Some(m) = reg.lora(task, self.index, LoraTarget::K)? {
                k = k.add(&m.delta(&h)?)?;
            }
            if let Some(m) = reg.lora(task, self.index, LoraTarget::V)? {
                v = v.add(&m.delta(&h)?)?;
            }
        }
        let a = q.attention(&k, &v, batch, self.heads)?;
        let o = a.matmul(self.wo.tensor())?.add_row(self.bo.tensor())?;
        x.add(&o)
    }

    /// The MLP output before any adapter and before the residual add;
    /// this is exactly what a task adapter sees as input.
    pub fn mlp_pre_adapter(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let h = x.layer_norm(
            self.ln2_g.tensor(),
            self.ln2_b.tensor(),
            E::from_f64(LN_EPS),
        )?;
        let u = h
            .matmul(self.w1.tensor())?
            .add_row(self.b1.tensor())?
            .gelu();
        u.matmul(self.w2.tensor())?.add_row(self.b2.tensor())
    }

    /// MLP half-block. An adapter, when supplied, transforms the MLP
    /// output before the residual add.
    pub fn mlp_half(
        &self,
        x: &Tensor<E>,
        adapter: Option<(&PeftRegistry<E>, Task)>,
    ) -> Result<Tensor<E>> {
        let mut y = self.mlp_pre_adapter(x)?;
        if let Some((reg, task)) = adapter {
            y = reg.adapter(task, self.index)?.forward(&y)?;
        }
        x.add(&y)
    }

    /// Both halves with this task's PEFT modules spliced in.
    pub fn forward_with_peft(
        &self,
        x: &Tensor<E>,
        batch: usize,
        reg: &PeftRegistry<E>,
        task: Task,
    ) -> Result<Tensor<E>> {
        match reg.kind() {
            PeftKind::Adapter => {
                let x = self.attn_half(x, batch, None)?;
                self.mlp_half(&x, Some((reg, task)))
            }
            PeftKind::Lora => {
                let x = self.attn_half(x, batch, Some((reg, task)))?;
                self.mlp_half(&x, None)
            }
        }
    }

    /// Both halves, PEFT-free.
    pub fn forward_plain(&self, x: &Tensor<E>, batch: usize) -> Result<Tensor<E>> {
        let x = self.attn_half(x, batch, None)?;
        self.mlp_half(&x, None)
    }

    pub fn parameters(&self) -> Vec<Parameter<E>> {
        vec![
            self.ln1_g.clone(),
            self.ln1_b.clone(),
            self.wq.clone(),
            self.bq.clone(),
            self.wk.clone(),
            self.bk.clone(),
            self.wv.clone(),
            self.bv.clone(),
            self.wo.clone(),
            self.bo.clone(),
            self.ln2_g.clone(),
            self.ln2_b.clone(),
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
        ]
    }
}

pub struct Backbone<E> {
    cfg: BackboneConfig,
    patch_w: Parameter<E>,
    patch_b: Parameter<E>,
    pos: Parameter<E>,
    blocks: Vec<EncoderBlock<E>>,
}

impl<E: Element> Backbone<E> {
    pub fn new<R: rand::Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let std = E::from_f64(0.02);
        let patch_w = Parameter::new(
            "backbone.patch.w",
            Tensor::trunc_randn(rng, std, &[cfg.patch_dim(), cfg.embed_dim]),
            true,
        );
        let patch_b = Parameter::new("backbone.patch.b", Tensor::zeros(&[cfg.embed_dim]), true);
        let pos = Parameter::new(
            "backbone.pos",
            Tensor::trunc_randn(rng, std, &[cfg.tokens(), cfg.embed_dim]),
            true,
        );
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(i, cfg, rng))
            .collect();
        Ok(Backbone {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            pos,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn block(&self, index: usize) -> &EncoderBlock<E> {
        &self.blocks[index]
    }

    /// Patchify + embed + positional add: `[B,H,W,C] -> [B * tokens, d]`.
    pub fn embed(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        let s = images.shape();
        if s.len() != 4
            || s[1] != self.cfg.image_size
            || s[2] != self.cfg.image_size
            || s[3] != CHANNELS
        {
            return Err(Error::input(format!(
                "expected images of shape [B, {0}, {0}, {1}], got {s:?}",
                self.cfg.image_size, CHANNELS
            )));
        }
        let patches = images.extract_patches(self.cfg.patch_size)?;
        let emb = patches
            .matmul(self.patch_w.tensor())?
            .add_row(self.patch_b.tensor())?;
        emb.add_tiled(self.pos.tensor())
    }

    /// Run the shared trunk (embedding + first `trunk_len` blocks).
    pub fn forward_trunk(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        let batch = images.shape()[0];
        let mut x = self.embed(images)?;
        for block in &self.blocks[..self.cfg.trunk_len()] {
            x = block.forward_plain(&x, batch)?;
        }
        Ok(x)
    }

    /// Replay the final-stage blocks with `task`'s PEFT modules.
    pub fn forward_task_branch(
        &self,
        trunk_out: &Tensor<E>,
        batch: usize,
        reg: &PeftRegistry<E>,
        task: Task,
    ) -> Result<Tensor<E>> {
        let mut x = trunk_out.clone();
        for block in &self.blocks[self.cfg.trunk_len()..] {
            x = block.forward_with_peft(&x, batch, reg, task)?;
        }
        Ok(x)
    }

    /// Final-stage blocks without PEFT (warmup, identity baselines).
    pub fn forward_branch_plain(&self, trunk_out: &Tensor<E>, batch: usize) -> Result<Tensor<E>> {
        let mut x = trunk_out.clone();
        for block in &self.blocks[self.cfg.trunk_len()..] {
            x = block.forward_plain(&x, batch)?;
        }
        Ok(x)
    }

    /// Full PEFT-free forward through every block.
    pub fn forward_plain(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        let batch = images.shape()[0];
        let trunk = self.forward_trunk(images)?;
        self.forward_branch_plain(&trunk, batch)
    }

    pub fn set_frozen(&self, frozen: bool) {
        for p in self.parameters() {
            p.set_trainable(!frozen);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.parameters().iter().all(|p| !p.trainable())
    }

    pub fn parameters(&self) -> Vec<Parameter<E>> {
        let mut out = vec![self.patch_w.clone(), self.patch_b.clone(), self.pos.clone()];
        for b in &self.blocks {
            out.extend(b.parameters());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor().numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::peft::PeftConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 12,
            depth: 3,
            heads: 2,
            mlp_ratio: 2,
            final_stage_blocks: 1,
        }
    }

    #[test]
    fn shapes_flow_through() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bb = Backbone::<f32>::new(&cfg, &mut rng).unwrap();
        let images = Tensor::randn(&mut rng, 1.0, &[2, 8, 8, 3]);
        let trunk = bb.forward_trunk(&images).unwrap();
        assert_eq!(trunk.shape(), vec![2 * cfg.tokens(), cfg.embed_dim]);
        let out = bb.forward_branch_plain(&trunk, 2).unwrap();
        assert_eq!(out.shape(), vec![2 * 4, 12]);
    }

    #[test]
    fn default_config_matches_published_scale() {
        let cfg = BackboneConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.tokens(), 64);
        assert_eq!(cfg.patch_dim(), 48);
        assert_eq!(cfg.branch_layers(), vec![6, 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bb = Backbone::<f32>::new(&cfg, &mut rng).unwrap();
        // patch embed + pos + depth x (2 LN pairs + 4 attn mats/biases + 2 mlp mats/biases)
        let per_block = 2 * (2 * 64) + 4 * (64 * 64 + 64) + (64 * 256 + 256) + (256 * 64 + 64);
        let expected = 48 * 64 + 64 + 64 * 64 + 8 * per_block;
        assert_eq!(bb.param_count(), expected);
    }

    #[test]
    fn fresh_peft_branch_is_bitwise_plain() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let bb = Backbone::<f64>::new(&cfg, &mut rng).unwrap();
        for kind in [PeftKind::Adapter, PeftKind::Lora] {
            let pcfg = PeftConfig {
                kind,
                r: 3,
                ..PeftConfig::default()
            };
            let reg =
                PeftRegistry::<f64>::new(&pcfg, &Task::ALL, &cfg.branch_layers(), 12, &mut rng)
                    .unwrap();
            let images = Tensor::randn(&mut rng, 1.0, &[2, 8, 8, 3]);
            let trunk = bb.forward_trunk(&images).unwrap();
            let plain = bb.forward_branch_plain(&trunk, 2).unwrap().data_vec();
            for task in Task::ALL {
                let branch = bb
                    .forward_task_branch(&trunk, 2, &reg, task)
                    .unwrap()
                    .data_vec();
                assert!(
                    plain
                        .iter()
                        .zip(&branch)
                        .all(|(a, b)| a.to_bits() == b.to_bits()),
                    "zero-initialized {kind:?} branch must equal plain forward"
                );
            }
        }
    }

    #[test]
    fn freezing_prunes_the_backbone_graph() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bb = Backbone::<f32>::new(&cfg, &mut rng).unwrap();
        bb.set_frozen(true);
        assert!(bb.is_frozen());
        let images = Tensor::randn(&mut rng, 1.0, &[1, 8, 8, 3]);
        let out = bb.forward_plain(&images).unwrap();
        assert!(
            !out.requires_grad(),
            "frozen forward must not build a graph"
        );
        bb.set_frozen(false);
        let out = bb.forward_plain(&images).unwrap();
        assert!(out.requires_grad());
    }

    #[test]
    fn block_grad_check_with_peft() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let bb = Backbone::<f64>::new(&cfg, &mut rng).unwrap();
        bb.set_frozen(true);
        let pcfg = PeftConfig {
            r: 3,
            ..PeftConfig::default()
        };
        let reg = PeftRegistry::<f64>::new(
            &pcfg,
            &[Task::Steatosis],
            &cfg.branch_layers(),
            12,
            &mut rng,
        )
        .unwrap();
        let ad = reg.adapter(Task::Steatosis, 2).unwrap();
        ad.up()
            .tensor()
            .set_data(&Tensor::<f64>::randn(&mut rng, 0.2, &[3, 12]).data_vec());
        let images = Tensor::randn(&mut rng, 1.0, &[1, 8, 8, 3]);
        let trunk = bb.forward_trunk(&images).unwrap();
        let params = reg.parameters();
        let rel = grad_check(
            || {
                bb.forward_task_branch(&trunk, 1, &reg, Task::Steatosis)?
                    .frobenius_sq()
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-5, "rel err {rel}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = BackboneConfig {
            patch_size: 5,
            ..BackboneConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig {
            heads: 5,
            ..BackboneConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig {
            final_stage_blocks: 9,
            ..BackboneConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
