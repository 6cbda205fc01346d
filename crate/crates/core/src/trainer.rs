//! Two-stage training.
//!
//! Stage 1 trains one autoencoder per modality with the reconstruction
//! loss. Stage 2 loads the two encoder checkpoints, freezes them, and
//! trains the fusion module plus decoder with the intensity/detail loss.
//! A one-stage variant trains everything jointly for the ablation.
//!
//! The learning rate starts at `lr0` and drops by 10x every 2 epochs.
//! When a run is given an explicit step budget (desk-scale runs), the
//! epoch schedule spreads evenly across those steps; otherwise an epoch
//! is one pass over the data, which reproduces the published schedule at
//! dataset scale.
//!
//! Everything is seeded and single-threaded: the same seed and corpus
//! order give bitwise-identical checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::autograd::{backward_into, bind_params, Tape, ValueId};
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{FuseConfig, TrainConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::image_io;
use crate::losses::{gradient_target, intensity_target, loss_auto_node, loss_cam_node};
use crate::model::{FuseModel, Modality};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// The learning rate drops by 10x every this many epochs.
pub const LR_DECAY_EPOCHS: usize = 2;

/// `lr(epoch) = lr0 / 10^(epoch / 2)`. Dividing by the exact power of
/// ten keeps the schedule bitwise equal to the decimal values
/// (0.01, 0.001, 0.0001, ...).
pub fn lr_for_epoch(lr0: f64, epoch: usize) -> f64 {
    let k = (epoch / LR_DECAY_EPOCHS) as i32;
    lr0 / 10f64.powi(k)
}

/// SGD with momentum: `v <- momentum * v + grad; p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        for (name, entry) in store.iter_mut() {
            if !entry.trainable {
                continue;
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(entry.value.shape()));
            let vd = v.data_mut();
            let gd = entry.grad.data();
            let pd = entry.value.data_mut();
            for i in 0..vd.len() {
                vd[i] = self.momentum * vd[i] + gd[i];
                pd[i] -= lr * vd[i];
            }
        }
    }
}

/// Adam with the usual defaults (0.9, 0.999, 1e-8). The structural
/// similarity term scales reconstruction gradients by 1e4, which raw
/// momentum SGD at lr 0.01 cannot survive; Adam's per-coordinate
/// normalization makes the published schedule trainable, so the training
/// loops default to it (`Optimizer::MomentumSgd` stays selectable).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, entry) in store.iter_mut() {
            if !entry.trainable {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(entry.value.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(entry.value.shape()));
            let md = m.data_mut();
            let vd = v.data_mut();
            let gd = entry.grad.data();
            let pd = entry.value.data_mut();
            for i in 0..md.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

impl Optimizer {
    fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new()),
            OptimizerKind::MomentumSgd => Optimizer::Sgd(Sgd::new(0.9)),
        }
    }

    fn step(&mut self, store: &mut ParamStore, lr: f64) {
        match self {
            Optimizer::Adam(o) => o.step(store, lr),
            Optimizer::Sgd(o) => o.step(store, lr),
        }
    }
}

/// Paired training corpus; `pairs[i] = (infrared, visible)`.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub names: Vec<String>,
    pub pairs: Vec<(Tensor, Tensor)>,
}

impl Corpus {
    pub fn from_pairs(names: Vec<String>, pairs: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let corpus = Self { names, pairs };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::argument("training corpus is empty"));
        }
        if self.names.len() != self.pairs.len() {
            return Err(Error::argument("corpus names/pairs length mismatch"));
        }
        for (name, (ir, vi)) in self.names.iter().zip(&self.pairs) {
            let (h, w) = ir.dims2()?;
            if ir.shape() != vi.shape() {
                return Err(Error::shape(format!("pair `{name}`: source shapes differ")));
            }
            if h != w || h % 8 != 0 {
                return Err(Error::shape(format!(
                    "pair `{name}`: images must be square with side divisible by 8, got {h}x{w}"
                )));
            }
        }
        Ok(())
    }

    /// Pair `<stem>_ir.*` with `<stem>_vi.*` under `dir` (pgm/ppm/png),
    /// in lexicographic stem order. Unreadable or unmatched files are
    /// skipped with a warning string.
    pub fn load_dir(dir: &Path) -> Result<(Self, Vec<String>)> {
        let mut warnings = Vec::new();
        let mut ir_files: BTreeMap<String, std::path::PathBuf> = BTreeMap::new();
        let mut vi_files: BTreeMap<String, std::path::PathBuf> = BTreeMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if !path.is_file() {
                continue;
            }
            let stem = match path.file_stem().and_then(|s| s.to_str()) {
                Some(s) => s.to_string(),
                None => continue,
            };
            if let Some(base) = stem.strip_suffix("_ir") {
                ir_files.insert(base.to_string(), path);
            } else if let Some(base) = stem.strip_suffix("_vi") {
                vi_files.insert(base.to_string(), path);
            } else {
                warnings.push(format!("{}: no _ir/_vi suffix, skipped", path.display()));
            }
        }
        let mut names = Vec::new();
        let mut pairs = Vec::new();
        for (base, ir_path) in &ir_files {
            let Some(vi_path) = vi_files.get(base) else {
                warnings.push(format!("{base}: missing _vi counterpart, skipped"));
                continue;
            };
            let ir = match image_io::load_gray(ir_path) {
                Ok(t) => t,
                Err(e) => {
                    warnings.push(format!("{}: {e}, skipped", ir_path.display()));
                    continue;
                }
            };
            let vi = match image_io::load_gray(vi_path) {
                Ok(t) => t,
                Err(e) => {
                    warnings.push(format!("{}: {e}, skipped", vi_path.display()));
                    continue;
                }
            };
            names.push(base.clone());
            pairs.push((ir, vi));
        }
        for base in vi_files.keys() {
            if !ir_files.contains_key(base) {
                warnings.push(format!("{base}: missing _ir counterpart, skipped"));
            }
        }
        let corpus = Self::from_pairs(names, pairs)?;
        Ok((corpus, warnings))
    }
}

/// Append-only per-step training log:
/// `step, stage, lr, loss_total, <component1>, <component2>` where the
/// components are mse/ssim for stage 1 and int/gra for stage 2.
pub struct TrainLog {
    out: Option<BufWriter<fs::File>>,
}

impl TrainLog {
    pub fn disabled() -> Self {
        Self { out: None }
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: Some(BufWriter::new(file)) })
    }

    fn record(&mut self, step: u64, stage: u8, lr: f64, total: f64, a: f64, b: f64) -> Result<()> {
        if let Some(out) = &mut self.out {
            writeln!(out, "{step}, {stage}, {lr}, {total}, {a}, {b}")?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush()?;
        }
        Ok(())
    }
}

/// Total steps and steps-per-data-pass for a run.
fn plan_steps(n_items: usize, cfg: &TrainConfig) -> (u64, u64) {
    let steps_per_pass = (n_items.div_ceil(cfg.batch_size)) as u64;
    let total = cfg.steps.unwrap_or(steps_per_pass * cfg.epochs as u64).max(1);
    (total, steps_per_pass.max(1))
}

/// Schedule epoch for a step: data-pass index normally; with an explicit
/// step budget the planned epochs spread evenly over the budget.
fn epoch_of_step(step: u64, total_steps: u64, steps_per_pass: u64, cfg: &TrainConfig) -> usize {
    match cfg.steps {
        Some(_) => ((step * cfg.epochs as u64) / total_steps.max(1)) as usize,
        None => (step / steps_per_pass) as usize,
    }
}

/// Deterministic shuffled index stream over a dataset.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, rng: &mut ChaCha20Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

/// Average a list of scalar loss nodes on the tape.
fn mean_of(tape: &mut Tape, nodes: &[ValueId]) -> Result<ValueId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(tape.scale(acc, 1.0 / nodes.len() as f64))
}

fn make_checkpoint(config: &FuseConfig, step: u64, rng: &ChaCha20Rng, params: ParamStore) -> Checkpoint {
    Checkpoint { config: config.clone(), step, rng: RngState::capture(rng), params }
}

/// Train one modality's autoencoder; returns its checkpoint and the
/// final-step loss.
fn train_autoencoder(
    model: &FuseModel,
    images: &[&Tensor],
    modality: Modality,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut TrainLog,
) -> Result<(Checkpoint, f64, f64)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut store = model.init_autoencoder(modality, &mut rng)?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let (total_steps, steps_per_pass) = plan_steps(images.len(), cfg);
    let mut sampler = BatchSampler::new(images.len(), &mut rng);
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    for step in 0..total_steps {
        let epoch = epoch_of_step(step, total_steps, steps_per_pass, cfg);
        let lr = lr_for_epoch(cfg.lr0, epoch);
        let batch = sampler.next_batch(cfg.batch_size, &mut rng);

        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, &store);
        let mut totals = Vec::new();
        let mut mses = Vec::new();
        let mut ssims = Vec::new();
        for &idx in &batch {
            let img = tape.constant(images[idx].as_single_channel()?);
            let recon = model.autoencoder_forward(&mut tape, &bind, img, modality)?;
            let nodes = loss_auto_node(&mut tape, img, recon, model.config.w_s)?;
            totals.push(nodes.total);
            mses.push(nodes.mse);
            ssims.push(nodes.ssim);
        }
        let loss = mean_of(&mut tape, &totals)?;
        let mse = mean_of(&mut tape, &mses)?;
        let ssim = mean_of(&mut tape, &ssims)?;
        let loss_v = tape.scalar_value(loss)?;
        if step == 0 {
            first_loss = loss_v;
        }
        last_loss = loss_v;

        store.zero_grads();
        backward_into(&tape, loss, &bind, &mut store)?;
        let (mse_v, ssim_v) = (tape.scalar_value(mse)?, tape.scalar_value(ssim)?);
        drop(tape);
        opt.step(&mut store, lr);
        log.record(step, 1, lr, loss_v, mse_v, ssim_v)?;
    }
    log.flush()?;
    Ok((make_checkpoint(&model.config, total_steps, &rng, store), first_loss, last_loss))
}

/// Stage-1 outcome: one autoencoder checkpoint per modality plus the
/// first/last loss values observed (useful for convergence checks).
pub struct Stage1Outcome {
    pub ir: Checkpoint,
    pub vi: Checkpoint,
    pub ir_losses: (f64, f64),
    pub vi_losses: (f64, f64),
}

/// Train the two per-modality autoencoders (the visible branch derives
/// its seed from `seed + 1`).
pub fn train_stage1(
    corpus: &Corpus,
    fuse_cfg: &FuseConfig,
    cfg: &TrainConfig,
    log_ir: &mut TrainLog,
    log_vi: &mut TrainLog,
) -> Result<Stage1Outcome> {
    corpus.validate()?;
    cfg.validate()?;
    fuse_cfg.validate()?;
    let model = FuseModel::new(fuse_cfg.clone());
    let ir_images: Vec<&Tensor> = corpus.pairs.iter().map(|(ir, _)| ir).collect();
    let vi_images: Vec<&Tensor> = corpus.pairs.iter().map(|(_, vi)| vi).collect();
    let (ir, ir_first, ir_last) =
        train_autoencoder(&model, &ir_images, Modality::Ir, cfg, cfg.seed, log_ir)?;
    let (vi, vi_first, vi_last) = train_autoencoder(
        &model,
        &vi_images,
        Modality::Vi,
        cfg,
        cfg.seed.wrapping_add(1),
        log_vi,
    )?;
    Ok(Stage1Outcome {
        ir,
        vi,
        ir_losses: (ir_first, ir_last),
        vi_losses: (vi_first, vi_last),
    })
}

/// Copy `prefix.*` tensors out of a stage-1 checkpoint, frozen, after
/// validating names and shapes against the expected architecture.
fn adopt_encoder(
    store: &mut ParamStore,
    ckpt: &Checkpoint,
    model: &FuseModel,
    modality: Modality,
) -> Result<()> {
    let prefix = format!("enc_{}.", modality.tag());
    let mut template = ParamStore::new();
    let mut throwaway = ChaCha20Rng::seed_from_u64(0);
    model.encoder(modality).init(&mut template, &mut throwaway)?;
    for (name, expected) in template.iter() {
        let entry = ckpt.params.entry(name).ok_or_else(|| {
            CheckpointError::Mismatch(format!("missing encoder tensor `{name}`"))
        })?;
        if entry.value.shape() != expected.value.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                entry.value.shape(),
                expected.value.shape()
            ))
            .into());
        }
        debug_assert!(name.starts_with(&prefix));
        store.insert(name.clone(), entry.value.clone(), false)?;
    }
    Ok(())
}

/// Stage-2 training: frozen encoders from the two stage-1 checkpoints,
/// fresh fusion module and decoder trained with the fusion loss.
pub fn train_stage2(
    corpus: &Corpus,
    enc_ir: &Checkpoint,
    enc_vi: &Checkpoint,
    fuse_cfg: &FuseConfig,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<Checkpoint> {
    corpus.validate()?;
    cfg.validate()?;
    fuse_cfg.validate()?;
    let model = FuseModel::new(fuse_cfg.clone());
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    adopt_encoder(&mut store, enc_ir, &model, Modality::Ir)?;
    adopt_encoder(&mut store, enc_vi, &model, Modality::Vi)?;
    store.absorb(model.init_fusion_head(&mut rng)?)?;
    run_fusion_training(corpus, &model, cfg, store, rng, log)
}

/// One-stage ablation: encoders, fusion module, and decoder all train
/// jointly under the fusion loss.
pub fn train_one_stage(
    corpus: &Corpus,
    fuse_cfg: &FuseConfig,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<Checkpoint> {
    corpus.validate()?;
    cfg.validate()?;
    fuse_cfg.validate()?;
    let model = FuseModel::new(fuse_cfg.clone());
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let store = model.init_all(&mut rng)?;
    run_fusion_training(corpus, &model, cfg, store, rng, log)
}

fn run_fusion_training(
    corpus: &Corpus,
    model: &FuseModel,
    cfg: &TrainConfig,
    mut store: ParamStore,
    mut rng: ChaCha20Rng,
    log: &mut TrainLog,
) -> Result<Checkpoint> {
    // loss targets depend only on the sources; build them once per pair
    let targets: Vec<(Tensor, Tensor)> = corpus
        .pairs
        .iter()
        .map(|(ir, vi)| Ok((intensity_target(ir, vi)?, gradient_target(ir, vi)?)))
        .collect::<Result<_>>()?;

    let mut opt = Optimizer::new(cfg.optimizer);
    let (total_steps, steps_per_pass) = plan_steps(corpus.len(), cfg);
    let mut sampler = BatchSampler::new(corpus.len(), &mut rng);
    for step in 0..total_steps {
        let epoch = epoch_of_step(step, total_steps, steps_per_pass, cfg);
        let lr = lr_for_epoch(cfg.lr0, epoch);
        let batch = sampler.next_batch(cfg.batch_size, &mut rng);

        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, &store);
        let mut totals = Vec::new();
        let mut ints = Vec::new();
        let mut gras = Vec::new();
        for &idx in &batch {
            let (ir, vi) = &corpus.pairs[idx];
            let (t_int, t_gra) = &targets[idx];
            let iri = tape.constant(ir.as_single_channel()?);
            let vii = tape.constant(vi.as_single_channel()?);
            let fused = model.fuse_forward(&mut tape, &bind, iri, vii)?;
            let nodes = loss_cam_node(&mut tape, fused, t_int, t_gra, model.config.w_g)?;
            totals.push(nodes.total);
            ints.push(nodes.int);
            gras.push(nodes.gra);
        }
        let loss = mean_of(&mut tape, &totals)?;
        let int = mean_of(&mut tape, &ints)?;
        let gra = mean_of(&mut tape, &gras)?;
        let (loss_v, int_v, gra_v) = (
            tape.scalar_value(loss)?,
            tape.scalar_value(int)?,
            tape.scalar_value(gra)?,
        );

        store.zero_grads();
        backward_into(&tape, loss, &bind, &mut store)?;
        drop(tape);
        opt.step(&mut store, lr);
        log.record(step, 2, lr, loss_v, int_v, gra_v)?;
    }
    log.flush()?;
    Ok(make_checkpoint(&model.config, total_steps, &rng, store))
}
