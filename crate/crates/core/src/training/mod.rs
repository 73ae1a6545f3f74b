//! Training protocol: backbone warmup, frozen-trunk adaptation with
//! per-task PEFT modules, plateau scheduling, and run records.
//!
//! All randomness derives from a single master seed through named
//! streams ([`crate::rng::stream`]), so runs are bit-reproducible and
//! everything upstream of the loss weight `lambda` (model init, split,
//! warmup) is identical across `lambda` values at equal seeds.

mod optimizer;
mod scheduler;
mod sweep;

pub use optimizer::{AdamW, AdamWConfig};
pub use scheduler::{PlateauConfig, ReduceOnPlateau};
pub use sweep::{run_matrix, CellOutcome, SweepCell, SweepConfig, SweepResult, SweepRow};

use crate::autodiff::{Element, Mode, Parameter, Precision, Tensor};
use crate::backbone::Backbone;
use crate::checkpoint::save_model;
use crate::dataset::{augment, Dataset, CHANNELS};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::objective::{self, ObjectiveConfig};
use crate::rng::stream;
use crate::task::Task;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Training-time image augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augment {
    /// No augmentation.
    None,
    /// Independent horizontal / vertical mirror per sample per epoch.
    Flip,
    /// A uniformly drawn dihedral transform per sample per epoch.
    Eightfold,
}

impl Augment {
    /// Number of distinct image variants this mode can produce.
    pub fn variants(self) -> u8 {
        match self {
            Augment::None => 1,
            Augment::Flip => 4,
            Augment::Eightfold => 8,
        }
    }

    pub fn from_name(name: &str) -> Option<Augment> {
        match name {
            "none" => Some(Augment::None),
            "flip" => Some(Augment::Flip),
            "eightfold" => Some(Augment::Eightfold),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub precision: Precision,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Steps of full-backbone pretraining before freezing.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub plateau: PlateauConfig,
    pub augment: Augment,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            precision: Precision::F32,
            seed: 0,
            epochs: 40,
            batch_size: 16,
            lr: 8e-5,
            weight_decay: 0.01,
            warmup_steps: 50,
            warmup_lr: 1e-3,
            plateau: PlateauConfig::default(),
            augment: Augment::None,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate(self.model.tasks.len())?;
        self.plateau.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if !(self.warmup_lr.is_finite() && self.warmup_lr > 0.0) {
            return Err(Error::config("warmup_lr must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config(format!(
                "val_fraction {} must be in (0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }

    fn optimizer_config(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

// ── batches & augmentation variants ──────────────────────────────────

fn draw_variant<R: Rng + ?Sized>(augment: Augment, rng: &mut R) -> u8 {
    match augment {
        Augment::None => 0,
        _ => rng.gen_range(0..augment.variants()),
    }
}

fn image_variant(image: &[f32], size: usize, augment: Augment, v: u8) -> Vec<f32> {
    match augment {
        Augment::None => image.to_vec(),
        Augment::Flip => {
            let mut img = image.to_vec();
            if v & 1 != 0 {
                img = augment::flip_h(&img, size);
            }
            if v & 2 != 0 {
                img = augment::flip_v(&img, size);
            }
            img
        }
        Augment::Eightfold => augment::dihedral(image, size, v as usize),
    }
}

/// Assemble `[B, H, W, 3]` image tensor for `(sample, variant)` keys.
fn build_batch<E: Element>(
    dataset: &Dataset,
    keys: &[(usize, u8)],
    augment_mode: Augment,
) -> Result<Tensor<E>> {
    let size = dataset.image_size;
    let mut data = Vec::with_capacity(keys.len() * size * size * CHANNELS);
    for &(idx, v) in keys {
        let sample = dataset
            .samples
            .get(idx)
            .ok_or_else(|| Error::input(format!("sample index {idx} out of range")))?;
        let img = image_variant(&sample.image, size, augment_mode, v);
        data.extend(img.iter().map(|&p| E::from_f64(p as f64)));
    }
    Tensor::from_vec(data, &[keys.len(), size, size, CHANNELS])
}

// ── trunk activation cache ───────────────────────────────────────────

/// Caches frozen-trunk activations per `(sample, variant)` key.
///
/// Valid only while the backbone is frozen and unchanged; the cache
/// fingerprints the backbone weights and clears itself when they
/// differ.
pub struct TrunkCache<E> {
    entries: HashMap<(usize, u8), Vec<E>>,
    fingerprint: Option<u64>,
    hits: u64,
    misses: u64,
}

impl<E: Element> TrunkCache<E> {
    pub fn new() -> Self {
        TrunkCache {
            entries: HashMap::new(),
            fingerprint: None,
            hits: 0,
            misses: 0,
        }
    }

    /// (hits, misses) over the cache's lifetime.
    pub fn stats(&self) -> (u64, u64) {
        (self.hits, self.misses)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn backbone_fingerprint(backbone: &Backbone<E>) -> u64 {
        // FNV-1a over the little-endian weight bytes
        let mut h: u64 = 0xcbf29ce484222325;
        for p in backbone.parameters() {
            for &v in p.tensor().data().iter() {
                for b in v.to_f64().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Bind the cache to this backbone's current weights, clearing any
    /// entries computed under different weights.
    pub fn ensure_matches(&mut self, backbone: &Backbone<E>) -> Result<()> {
        if !backbone.is_frozen() {
            return Err(Error::config("trunk cache requires a frozen backbone"));
        }
        let fp = Self::backbone_fingerprint(backbone);
        if self.fingerprint != Some(fp) {
            self.entries.clear();
            self.fingerprint = Some(fp);
        }
        Ok(())
    }

    /// Trunk activations `[B * tokens, d]` for a batch of keys; missing
    /// entries are computed in one batched forward pass.
    pub fn batch(
        &mut self,
        backbone: &Backbone<E>,
        dataset: &Dataset,
        keys: &[(usize, u8)],
        augment_mode: Augment,
    ) -> Result<Tensor<E>> {
        if !backbone.is_frozen() {
            return Err(Error::config("trunk cache requires a frozen backbone"));
        }
        let cfg = backbone.config();
        let rows_per = cfg.tokens();
        let d = cfg.embed_dim;
        let missing: Vec<(usize, &(usize, u8))> = keys
            .iter()
            .enumerate()
            .filter(|(_, k)| !self.entries.contains_key(k))
            .collect();
        self.hits += (keys.len() - missing.len()) as u64;
        self.misses += missing.len() as u64;
        if !missing.is_empty() {
            let miss_keys: Vec<(usize, u8)> = missing.iter().map(|(_, &k)| k).collect();
            let images = build_batch::<E>(dataset, &miss_keys, augment_mode)?;
            let trunk = backbone.forward_trunk(&images)?;
            let data = trunk.data();
            for (slot, key) in miss_keys.iter().enumerate() {
                let start = slot * rows_per * d;
                self.entries
                    .insert(*key, data[start..start + rows_per * d].to_vec());
            }
        }
        let mut out = Vec::with_capacity(keys.len() * rows_per * d);
        for k in keys {
            out.extend_from_slice(&self.entries[k]);
        }
        Tensor::from_vec(out, &[keys.len() * rows_per, d])
    }
}

impl<E: Element> Default for TrunkCache<E> {
    fn default() -> Self {
        Self::new()
    }
}

// ── warmup ───────────────────────────────────────────────────────────

/// Briefly pretrain the full backbone with temporary linear probes (one
/// per task, on mean-pooled PEFT-free features, averaging the task
/// cross-entropies), then discard the probes. The caller freezes the
/// backbone afterwards.
pub fn warmup_pretrain<E: Element>(
    model: &Model<E>,
    dataset: &Dataset,
    train_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<()> {
    if cfg.warmup_steps == 0 {
        return Ok(());
    }
    let d = cfg.model.backbone.embed_dim;
    let mut probe_rng = stream(cfg.seed, "warmup_probe", 0);
    let std = E::from_f64(0.02);
    let probes: Vec<(Parameter<E>, Parameter<E>)> = model
        .tasks()
        .iter()
        .map(|t| {
            (
                Parameter::new(
                    format!("warmup.probe.{t}.w"),
                    Tensor::trunc_randn(&mut probe_rng, std, &[d, t.class_count()]),
                    true,
                ),
                Parameter::new(
                    format!("warmup.probe.{t}.b"),
                    Tensor::zeros(&[t.class_count()]),
                    true,
                ),
            )
        })
        .collect();

    let mut params = model.backbone.parameters();
    for (w, b) in &probes {
        params.push(w.clone());
        params.push(b.clone());
    }
    let mut opt = AdamW::new(
        params,
        AdamWConfig {
            lr: cfg.warmup_lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    )?;
    let mut batch_rng = stream(cfg.seed, "warmup", 0);
    let batch = cfg.batch_size.min(train_idx.len());
    for step in 0..cfg.warmup_steps {
        let picks = rand::seq::index::sample(&mut batch_rng, train_idx.len(), batch);
        let keys: Vec<(usize, u8)> = picks.iter().map(|i| (train_idx[i], 0)).collect();
        let images = build_batch::<E>(dataset, &keys, Augment::None)?;
        let features = model
            .backbone
            .forward_plain(&images)?
            .mean_pool_rows(batch)?;
        let ces = model
            .tasks()
            .iter()
            .zip(&probes)
            .map(|(&task, (w, b))| {
                let logits = features.matmul(w.tensor())?.add_row(b.tensor())?;
                let labels: Vec<usize> = keys
                    .iter()
                    .map(|&(i, _)| dataset.samples[i].labels.get(task))
                    .collect();
                logits.softmax_cross_entropy(&labels)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = Tensor::stack_scalars(&ces)?.mean_all();
        let v = loss.item()?.to_f64();
        if !v.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite warmup loss at step {step}"
            )));
        }
        opt.zero_grad();
        loss.backward()?;
        opt.step()?;
    }
    Ok(())
}

// ── preparation (everything upstream of lambda) ──────────────────────

/// A model ready for adaptation: initialized, warmed up, frozen, with a
/// fixed train/validation split.
pub struct Prepared<E> {
    pub model: Model<E>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

/// Initialize the model, split the dataset, run warmup, and freeze the
/// backbone. Depends on the seed but not on `lambda`, so sweeps can
/// share one `Prepared` state (via [`Model::state`] snapshots) and one
/// [`TrunkCache`] across `lambda` values.
pub fn prepare<E: Element>(cfg: &TrainConfig, dataset: &Dataset) -> Result<Prepared<E>> {
    cfg.validate()?;
    if E::PRECISION != cfg.precision {
        return Err(Error::config(format!(
            "config requests {} but the training element type is {}",
            cfg.precision,
            E::PRECISION
        )));
    }
    if dataset.len() < 2 {
        return Err(Error::input("dataset too small to split"));
    }
    if dataset.image_size != cfg.model.backbone.image_size {
        return Err(Error::config(format!(
            "dataset images are {0}x{0} but the model expects {1}x{1}",
            dataset.image_size, cfg.model.backbone.image_size
        )));
    }
    let mut model = Model::new(&cfg.model, &mut stream(cfg.seed, "model_init", 0))?;
    let (lo, hi) = cfg.objective.log_var_clamp;
    model.uncertainty.set_clamp(lo, hi)?;

    let n = dataset.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(cfg.seed, "split", 0));
    let val_len = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = idx.split_at(val_len);
    let (train_idx, val_idx) = (train_idx.to_vec(), val_idx.to_vec());

    warmup_pretrain(&model, dataset, &train_idx, cfg)?;
    model.set_backbone_frozen(true);
    Ok(Prepared {
        model,
        train_idx,
        val_idx,
    })
}

// ── records ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Unweighted per-task training losses (epoch mean).
    pub task_losses: Vec<f64>,
    pub loss_mtl: f64,
    pub loss_ortho: f64,
    pub loss_total: f64,
    pub val_acc: Vec<f64>,
    pub val_mean: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub log_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub lambda: f64,
    pub peft: crate::peft::PeftKind,
    pub augment: Augment,
    pub epochs_run: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Unweighted per-task losses of the very first batch, before any
    /// optimizer step.
    pub initial_losses: Vec<f64>,
    /// Epoch-mean unweighted per-task losses of the last epoch.
    pub final_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_acc: Vec<f64>,
    pub best_val_mean: f64,
    pub final_log_var: Vec<f64>,
    pub history: Vec<EpochStats>,
}

/// Write the per-epoch metrics table. Columns follow the configured
/// task order: per-task losses, objective terms, per-task validation
/// accuracies with their mean, the learning rate, and the log-variances.
pub fn write_metrics_csv(path: &Path, tasks: &[Task], history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch");
    for t in tasks {
        out.push_str(&format!(",loss_{t}"));
    }
    out.push_str(",loss_mtl,loss_ortho,loss_total");
    for t in tasks {
        out.push_str(&format!(",val_acc_{t}"));
    }
    out.push_str(",val_acc_mean,lr");
    for t in tasks {
        out.push_str(&format!(",log_var_{t}"));
    }
    out.push('\n');
    for e in history {
        out.push_str(&e.epoch.to_string());
        for v in &e.task_losses {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(
            ",{},{},{}",
            e.loss_mtl, e.loss_ortho, e.loss_total
        ));
        for v in &e.val_acc {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{},{}", e.val_mean, e.lr));
        for v in &e.log_var {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── evaluation ───────────────────────────────────────────────────────

/// Per-task accuracy over `indices`, evaluated without augmentation.
pub fn evaluate<E: Element>(
    model: &Model<E>,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
    mut cache: Option<&mut TrunkCache<E>>,
) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::input("nothing to evaluate"));
    }
    let mut hits = vec![0usize; model.tasks().len()];
    // dropout is inert in eval mode; the rng is never consumed
    let mut idle_rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in indices.chunks(batch_size.max(1)) {
        let keys: Vec<(usize, u8)> = chunk.iter().map(|&i| (i, 0)).collect();
        let trunk = match cache.as_deref_mut() {
            Some(c) => c.batch(&model.backbone, dataset, &keys, Augment::None)?,
            None => {
                let images = build_batch::<E>(dataset, &keys, Augment::None)?;
                model.forward_trunk(&images)?
            }
        };
        for (ti, &task) in model.tasks().iter().enumerate() {
            let logits =
                model.forward_logits(&trunk, chunk.len(), task, Mode::Eval, &mut idle_rng)?;
            let pred = crate::viz::argmax_rows(&logits)?;
            for (&p, &i) in pred.iter().zip(chunk) {
                if p == dataset.samples[i].labels.get(task) {
                    hits[ti] += 1;
                }
            }
        }
    }
    Ok(hits
        .iter()
        .map(|&h| h as f64 / indices.len() as f64)
        .collect())
}

// ── the training loop ────────────────────────────────────────────────

/// Adapt a prepared (warmed-up, frozen-backbone) model in place.
///
/// When `out_dir` is given, `metrics.csv` is rewritten after every
/// epoch and the best-validation checkpoint is kept at `ckpt.bin`.
/// Aborts with a numeric error on a non-finite loss or gradient; any
/// checkpoint already on disk is left untouched.
pub fn train_prepared<E: Element>(
    cfg: &TrainConfig,
    dataset: &Dataset,
    prepared: &Prepared<E>,
    cache: &mut TrunkCache<E>,
    out_dir: Option<&Path>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let model = &prepared.model;
    cache.ensure_matches(&model.backbone)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let tasks = model.tasks().to_vec();
    let weights = &cfg.objective.task_weights;
    let mut opt = AdamW::new(model.trainable_parameters(), cfg.optimizer_config())?;
    let mut sched = ReduceOnPlateau::new(cfg.plateau)?;
    let mut lr = cfg.lr;
    let mut history: Vec<EpochStats> = Vec::with_capacity(cfg.epochs);
    let mut initial_losses: Option<Vec<f64>> = None;
    let mut best_val_mean = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_val_acc = vec![0.0; tasks.len()];

    for epoch in 0..cfg.epochs {
        let mut order = prepared.train_idx.clone();
        order.shuffle(&mut stream(cfg.seed, "train_shuffle", epoch as u64));
        let mut aug_rng = stream(cfg.seed, "train_augment", epoch as u64);
        let mut drop_rng = stream(cfg.seed, "dropout", epoch as u64);

        let mut sum_raw = vec![0.0f64; tasks.len()];
        let (mut sum_mtl, mut sum_ortho, mut sum_total) = (0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let keys: Vec<(usize, u8)> = chunk
                .iter()
                .map(|&i| (i, draw_variant(cfg.augment, &mut aug_rng)))
                .collect();
            let trunk = cache.batch(&model.backbone, dataset, &keys, cfg.augment)?;
            let batch = chunk.len();

            let logits = tasks
                .iter()
                .map(|&t| model.forward_logits(&trunk, batch, t, Mode::Train, &mut drop_rng))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<Vec<usize>> = tasks
                .iter()
                .map(|&t| {
                    chunk
                        .iter()
                        .map(|&i| dataset.samples[i].labels.get(t))
                        .collect()
                })
                .collect();
            let weighted = objective::task_losses(&logits, &labels, &cfg.objective)?;
            let raw: Vec<f64> = weighted
                .iter()
                .zip(weights)
                .map(|(l, &w)| Ok(l.item()?.to_f64() / w))
                .collect::<Result<Vec<_>>>()?;
            let l_mtl = objective::mtl_loss(&weighted, &model.uncertainty)?;
            let l_ortho = objective::ortho_loss(&model.peft)?;
            let l_total = objective::total_loss(&l_mtl, &l_ortho, cfg.objective.lambda)?;
            let total_v = l_total.item()?.to_f64();
            if !total_v.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {batches}"
                )));
            }
            if initial_losses.is_none() {
                initial_losses = Some(raw.clone());
            }
            opt.zero_grad();
            l_total.backward()?;
            opt.step()
                .map_err(|e| Error::numeric(format!("epoch {epoch}, batch {batches}: {e}")))?;
            model.uncertainty.clamp();

            for (s, r) in sum_raw.iter_mut().zip(&raw) {
                *s += r;
            }
            sum_mtl += l_mtl.item()?.to_f64();
            sum_ortho += l_ortho.item()?.to_f64();
            sum_total += total_v;
            batches += 1;
        }

        let val_acc = evaluate(
            model,
            dataset,
            &prepared.val_idx,
            cfg.batch_size,
            Some(cache),
        )?;
        let val_mean = val_acc.iter().sum::<f64>() / val_acc.len() as f64;
        let nb = batches.max(1) as f64;
        history.push(EpochStats {
            epoch,
            task_losses: sum_raw.iter().map(|s| s / nb).collect(),
            loss_mtl: sum_mtl / nb,
            loss_ortho: sum_ortho / nb,
            loss_total: sum_total / nb,
            val_acc: val_acc.clone(),
            val_mean,
            lr,
            log_var: model.uncertainty.values(),
        });
        if val_mean > best_val_mean {
            best_val_mean = val_mean;
            best_epoch = epoch;
            best_val_acc = val_acc;
            if let Some(dir) = out_dir {
                save_model(model, &dir.join("ckpt.bin"))?;
            }
        }
        if let Some(dir) = out_dir {
            write_metrics_csv(&dir.join("metrics.csv"), &tasks, &history)?;
        }
        lr = sched.step(val_mean, lr);
        opt.set_lr(lr);
    }

    let last = history.last().expect("epochs >= 1");
    Ok(RunRecord {
        seed: cfg.seed,
        lambda: cfg.objective.lambda,
        peft: cfg.model.peft.kind,
        augment: cfg.augment,
        epochs_run: history.len(),
        train_size: prepared.train_idx.len(),
        val_size: prepared.val_idx.len(),
        initial_losses: initial_losses.unwrap_or_default(),
        final_losses: last.task_losses.clone(),
        best_epoch,
        best_val_acc,
        best_val_mean,
        final_log_var: last.log_var.clone(),
        history,
    })
}

/// Full single-run protocol: prepare, then adapt with a fresh cache.
pub fn train<E: Element>(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<(Model<E>, RunRecord)> {
    let prepared = prepare::<E>(cfg, dataset)?;
    let mut cache = TrunkCache::new();
    let record = train_prepared(cfg, dataset, &prepared, &mut cache, out_dir)?;
    Ok((prepared.model, record))
}
