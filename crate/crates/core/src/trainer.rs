//! Mini-batch training with AdamW, per-epoch validation, checkpoints and
//! the diagnostics used by the ablations.
//!
//! Each sample is recorded on its own tape. The loss gradients on the sets
//! and slots are computed in closed form, pulled back through every tape,
//! then summed in a fixed order, so results do not depend on the thread count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{split_images, Corpus, MatchTable, RawFeatures, Splits};
use crate::error::{Error, Result};
use crate::io::{write_atomic, Checkpoint};
use crate::model::{Modality, Model, Tower, MP_A, MP_B};
use crate::objective::{total_loss, Batch, BatchSlots, LossParts};
use crate::optim::{adamw_step, cosine_lr, step_lr, AdamW, LrSchedule, OptimState};
use crate::params::ParamStore;
use crate::predictor::{sample_slot_noise, SlotInit};
use crate::retrieval::{evaluate, mean_circular_variance, RetrievalReport, SetIndex};
use crate::similarity::EmbeddingSet;
use crate::tensor::Matrix;

/// Accumulated gradient norm below which a (sample, slot) pair counts as untrained.
pub const UNTRAINED_THRESHOLD: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_images: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Step schedule: decay every this many epochs.
    pub step_every: usize,
    pub step_gamma: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs at the start that sum over all negatives instead of mining the hardest.
    pub mining_warmup_epochs: usize,
    /// Learning-rate multipliers per parameter group.
    pub encoder_lr_scale: f64,
    pub predictor_lr_scale: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub adam: AdamW,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_images: 32,
            lr: 2e-3,
            lr_schedule: LrSchedule::Cosine,
            step_every: 10,
            step_gamma: 0.1,
            weight_decay: 1e-4,
            seed: 0,
            mining_warmup_epochs: 0,
            encoder_lr_scale: 1.0,
            predictor_lr_scale: 1.0,
            grad_clip: 2.0,
            val_fraction: 0.1,
            test_fraction: 0.1,
            adam: AdamW::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_images < 2 {
            return Err(Error::Config("train.batch_images must be at least 2".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("train.weight_decay and grad_clip must be >= 0".into()));
        }
        if self.encoder_lr_scale < 0.0 || self.predictor_lr_scale < 0.0 {
            return Err(Error::Config("learning-rate multipliers must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossParts,
    pub cv_visual: f64,
    pub cv_text: f64,
    pub untrained_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub triplet: f64,
    pub diversity: f64,
    pub mmd: f64,
    pub total: f64,
    pub untrained_fraction: f64,
    pub val_cv_visual: f64,
    pub val_cv_text: f64,
    pub val_rsum: f64,
}

pub const EPOCH_CSV_HEADER: &str =
    "epoch,steps,lr,triplet,diversity,mmd,total,untrained_fraction,val_cv_visual,val_cv_text,val_rsum";
pub const STEP_CSV_HEADER: &str =
    "epoch,step,lr,triplet,diversity,mmd,total,cv_visual,cv_text,untrained_fraction";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4}",
            self.epoch,
            self.steps,
            self.lr,
            self.triplet,
            self.diversity,
            self.mmd,
            self.total,
            self.untrained_fraction,
            self.val_cv_visual,
            self.val_cv_text,
            self.val_rsum
        )
    }
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.step,
            self.lr,
            self.loss.triplet,
            self.loss.diversity,
            self.loss.mmd,
            self.loss.total,
            self.cv_visual,
            self.cv_text,
            self.untrained_fraction
        )
    }
}

pub fn epochs_csv(records: &[EpochRecord], config_hash: &str) -> String {
    let mut s = format!("# config_hash={config_hash}\n{EPOCH_CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

pub fn steps_csv(records: &[StepRecord], config_hash: &str) -> String {
    let mut s = format!("# config_hash={config_hash}\n{STEP_CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation RSUM.
    pub model: Model,
    pub best_epoch: usize,
    pub best_val: RetrievalReport,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub splits: Splits,
}

pub fn splits_for(corpus: &Corpus, cfg: &TrainConfig) -> Result<Splits> {
    split_images(corpus.samples.len(), cfg.val_fraction, cfg.test_fraction, cfg.seed)
}

/// Embeds the images of `images` and all their captions, then evaluates.
pub fn evaluate_split(
    model: &Model,
    corpus: &Corpus,
    images: &[usize],
    run: &RunConfig,
) -> Result<RetrievalReport> {
    let (visual, text, matches) = embed_split(model, corpus, images)?;
    evaluate(&visual, &text, &matches, &model.similarity_config(&run.loss.sim))
}

/// Indexes over one split, with image and caption ids from the corpus.
pub fn embed_split(
    model: &Model,
    corpus: &Corpus,
    images: &[usize],
) -> Result<(SetIndex, SetIndex, MatchTable)> {
    let raw_v: Vec<&RawFeatures> = images.iter().map(|&i| &corpus.samples[i].features).collect();
    let raw_t: Vec<&RawFeatures> = corpus.captions_of(images).map(|c| &c.features).collect();
    let v = model.embed_all(Modality::Visual, &raw_v)?;
    let t = model.embed_all(Modality::Text, &raw_t)?;
    let vid = images.iter().map(|&i| corpus.samples[i].image_id).collect();
    let tid = corpus.captions_of(images).map(|c| c.caption_id).collect();
    Ok((
        SetIndex::build(Modality::Visual, v, vid)?,
        SetIndex::build(Modality::Text, t, tid)?,
        corpus.match_table(images),
    ))
}

/// Checkpoint with model tensors, optimizer moments and the config echo.
pub fn checkpoint_of(
    model: &Model,
    opt: Option<&OptimState>,
    run: &RunConfig,
    extra: serde_json::Value,
) -> Checkpoint {
    let mut tensors = model.params.clone();
    if let Some(o) = opt {
        tensors.extend_prefixed("opt.m.", &o.m);
        tensors.extend_prefixed("opt.v.", &o.v);
    }
    Checkpoint {
        config: serde_json::json!({
            "config_hash": run.hash(),
            "run": run.to_value(),
            "optimizer_step": opt.map_or(0, |o| o.step),
            "info": extra,
        }),
        tensors,
    }
}

/// Rebuilds the model (and its run config) from a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(Model, RunConfig)> {
    let run: RunConfig = serde_json::from_value(ck.config["run"].clone())
        .map_err(|e| Error::format("checkpoint", format!("config block: {e}")))?;
    run.validate()?;
    let mut params = ParamStore::new();
    for (name, m) in ck.tensors.iter() {
        if !name.starts_with("opt.") {
            params.insert(name, m.clone());
        }
    }
    let mut reference = Model::init(
        &run.predictor,
        run.data.d_raw,
        &run.loss.sim,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    reference.params.check_compatible(&params).map_err(|e| {
        Error::format("checkpoint", format!("tensors do not match the config: {e}"))
    })?;
    reference.params = params;
    Ok((reference, run))
}

/// Where `train` writes its artifacts.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub dir: PathBuf,
}

impl OutputDir {
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.divp")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.divp")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn steps(&self) -> PathBuf {
        self.dir.join("steps.csv")
    }
}

fn param_lr_scales(params: &ParamStore, cfg: &TrainConfig) -> Vec<f64> {
    params
        .names()
        .iter()
        .map(|n| {
            if n.contains(".enc.") {
                cfg.encoder_lr_scale
            } else if n.contains(".pred.") {
                cfg.predictor_lr_scale
            } else {
                1.0
            }
        })
        .collect()
}

/// Per-(sample, slot) triplet gradient norms summed over one epoch.
struct SlotCounter {
    visual: Vec<Vec<f64>>,
    text: Vec<Vec<f64>>,
}

impl SlotCounter {
    fn new(images: usize, captions: usize) -> Self {
        SlotCounter {
            visual: vec![Vec::new(); images],
            text: vec![Vec::new(); captions],
        }
    }

    fn add(slot: &mut Vec<f64>, g: &Matrix) {
        if slot.is_empty() {
            slot.resize(g.rows(), 0.0);
        }
        for (acc, row) in slot.iter_mut().zip(g.row_iter()) {
            *acc += row.iter().map(|x| x * x).sum::<f64>().sqrt();
        }
    }

    fn fraction(&self) -> f64 {
        let all: Vec<f64> = self.visual.iter().chain(&self.text).flatten().copied().collect();
        if all.is_empty() {
            return 0.0;
        }
        all.iter().filter(|&&v| v < UNTRAINED_THRESHOLD).count() as f64 / all.len() as f64
    }
}

fn batch_untrained_fraction(grads: &[Matrix]) -> f64 {
    let mut total = 0;
    let mut dead = 0;
    for g in grads {
        for row in g.row_iter() {
            total += 1;
            if row.iter().map(|x| x * x).sum::<f64>().sqrt() < UNTRAINED_THRESHOLD {
                dead += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        dead as f64 / total as f64
    }
}

/// Adds per-sample gradient stores into `acc` in order.
fn accumulate(acc: &mut ParamStore, parts: Vec<ParamStore>) -> Result<()> {
    for p in parts {
        for (name, g) in p.iter() {
            acc.get_mut(name)
                .ok_or_else(|| Error::Internal(format!("gradient for unknown parameter `{name}`")))?
                .add_assign(g);
        }
    }
    Ok(())
}

struct StepResult {
    loss: LossParts,
    grads: ParamStore,
    triplet_visual: Vec<Matrix>,
    triplet_text: Vec<Matrix>,
    cv_visual: f64,
    cv_text: f64,
}

/// Loss and gradients of one batch, given tower parameters and slot noise.
fn batch_gradients(
    model: &Model,
    towers: &[Tower; 2],
    corpus: &Corpus,
    images: &[usize],
    noise: &[Option<Matrix>],
    run: &RunConfig,
    hardest: bool,
) -> Result<StepResult> {
    let raw_v: Vec<&RawFeatures> = images.iter().map(|&i| &corpus.samples[i].features).collect();
    let raw_t: Vec<&RawFeatures> = corpus.captions_of(images).map(|c| &c.features).collect();
    let (noise_v, noise_t) = noise.split_at(raw_v.len());
    let record = |tower: &Tower, raws: &[&RawFeatures], noise: &[Option<Matrix>]| {
        raws.par_iter()
            .zip(noise.par_iter())
            .map(|(r, n)| tower.record(r, n.as_ref()))
            .collect::<Result<Vec<_>>>()
    };
    let tapes_v = record(&towers[0], &raw_v, noise_v)?;
    let tapes_t = record(&towers[1], &raw_t, noise_t)?;

    let sets = |tapes: &[crate::model::SampleTape]| {
        tapes
            .iter()
            .map(|t| EmbeddingSet::new(t.set_value().clone()))
            .collect::<Result<Vec<_>>>()
    };
    let batch = Batch::new(sets(&tapes_v)?, sets(&tapes_t)?, corpus.match_table(images))?;
    let slots = BatchSlots {
        visual: tapes_v.iter().map(|t| t.slots_value().clone()).collect(),
        text: tapes_t.iter().map(|t| t.slots_value().clone()).collect(),
    };
    let mut loss_cfg = run.loss.clone();
    loss_cfg.hardest_mining = hardest;
    loss_cfg.sim = model.similarity_config(&run.loss.sim);
    let (parts, lg) = total_loss(&batch, &slots, &loss_cfg)?;

    let back = |tower: &Tower, tapes: &[crate::model::SampleTape], ds: &[Matrix], de: &[Matrix]| {
        tapes
            .par_iter()
            .zip(ds.par_iter().zip(de.par_iter()))
            .map(|(t, (s, e))| t.backward(tower, s, e))
            .collect::<Result<Vec<_>>>()
    };
    let mut grads = model.params.zeros_like();
    accumulate(&mut grads, back(&towers[0], &tapes_v, &lg.d_visual_sets, &lg.d_visual_slots)?)?;
    accumulate(&mut grads, back(&towers[1], &tapes_t, &lg.d_text_sets, &lg.d_text_slots)?)?;
    if let Some(a) = grads.get_mut(MP_A) {
        a[(0, 0)] = lg.d_mp.d_a;
    }
    if let Some(b) = grads.get_mut(MP_B) {
        b[(0, 0)] = lg.d_mp.d_b;
    }
    Ok(StepResult {
        loss: parts,
        grads,
        cv_visual: mean_circular_variance(&batch.visual),
        cv_text: mean_circular_variance(&batch.text),
        triplet_visual: lg.triplet_visual,
        triplet_text: lg.triplet_text,
    })
}

/// Loss and gradients of `model` on a fixed set of images, with evaluation-time slot noise.
pub fn loss_and_grads(
    model: &Model,
    corpus: &Corpus,
    images: &[usize],
    run: &RunConfig,
) -> Result<(LossParts, ParamStore)> {
    let towers = [model.tower(Modality::Visual), model.tower(Modality::Text)];
    let n = images.len() + corpus.captions_of(images).count();
    let noise = vec![None; n];
    let r = batch_gradients(model, &towers, corpus, images, &noise, run, run.loss.hardest_mining)?;
    Ok((r.loss, r.grads))
}

/// Trains a fresh model on the training split of `corpus`.
pub fn train(corpus: &Corpus, run: &RunConfig, out: Option<&OutputDir>) -> Result<TrainOutcome> {
    run.validate()?;
    let cfg = &run.train;
    let hash = run.hash();
    let splits = splits_for(corpus, cfg)?;
    if splits.train.len() < 2 {
        return Err(Error::Config("training split needs at least 2 images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(&run.predictor, corpus.config.d_raw, &run.loss.sim, &mut rng)?;
    let mut opt = OptimState::new(&model.params);
    let lr_scales = param_lr_scales(&model.params, cfg);

    let mut batches_per_epoch = splits.train.len() / cfg.batch_images;
    if splits.train.len() % cfg.batch_images >= 2 {
        batches_per_epoch += 1;
    }
    let batches_per_epoch = batches_per_epoch.max(1);
    let total_steps = batches_per_epoch * cfg.epochs;
    let captions_total = corpus.caption_count();
    let caption_offset: Vec<usize> = corpus
        .samples
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s.captions.len();
            Some(o)
        })
        .collect();

    let mut best: Option<(usize, RetrievalReport, Model)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(total_steps);
    let mut global_step = 0;
    let mut order = splits.train.clone();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let hardest = run.loss.hardest_mining && epoch >= cfg.mining_warmup_epochs;
        let mut counter = SlotCounter::new(corpus.samples.len(), captions_total);
        let mut sums = LossParts::default();
        let mut n_steps = 0;
        let mut lr_t = cfg.lr;

        for chunk in order.chunks(cfg.batch_images) {
            if chunk.len() < 2 {
                continue;
            }
            let mut images = chunk.to_vec();
            images.sort_unstable();
            let n_samples = images.len() + corpus.captions_of(&images).count();
            let noise: Vec<Option<Matrix>> = (0..n_samples)
                .map(|_| match run.predictor.init_slots {
                    SlotInit::Random => Some(sample_slot_noise(&run.predictor, &mut rng)),
                    SlotInit::Learnable => None,
                })
                .collect();
            let towers = [model.tower(Modality::Visual), model.tower(Modality::Text)];
            let step = batch_gradients(&model, &towers, corpus, &images, &noise, run, hardest)
                .map_err(|e| match e {
                    Error::Numeric { stage, .. } => Error::Numeric {
                        stage: format!("{stage} (epoch {epoch}, step {global_step})"),
                        iteration: Some(global_step),
                    },
                    other => other,
                })?;
            let mut grads = step.grads;
            if !grads.all_finite() {
                return Err(Error::Numeric {
                    stage: format!("gradients (epoch {epoch})"),
                    iteration: Some(global_step),
                });
            }
            if cfg.grad_clip > 0.0 {
                let norm = grads.global_norm();
                if norm > cfg.grad_clip {
                    grads.scale(cfg.grad_clip / norm);
                }
            }
            lr_t = match cfg.lr_schedule {
                LrSchedule::Cosine => cosine_lr(global_step, total_steps, cfg.lr),
                LrSchedule::Step => step_lr(epoch, cfg.step_every, cfg.step_gamma, cfg.lr),
            };
            adamw_step(
                &mut model.params,
                &grads,
                &mut opt,
                lr_t,
                cfg.weight_decay,
                &cfg.adam,
                Some(&lr_scales),
            )?;

            for (&i, g) in images.iter().zip(&step.triplet_visual) {
                SlotCounter::add(&mut counter.visual[i], g);
            }
            let mut t = 0;
            for &i in &images {
                for c in 0..corpus.samples[i].captions.len() {
                    SlotCounter::add(&mut counter.text[caption_offset[i] + c], &step.triplet_text[t]);
                    t += 1;
                }
            }
            let mut all_tri = step.triplet_visual;
            all_tri.extend(step.triplet_text);
            steps.push(StepRecord {
                epoch,
                step: global_step,
                lr: lr_t,
                loss: step.loss,
                cv_visual: step.cv_visual,
                cv_text: step.cv_text,
                untrained_fraction: batch_untrained_fraction(&all_tri),
            });
            sums.triplet += step.loss.triplet;
            sums.diversity += step.loss.diversity;
            sums.mmd += step.loss.mmd;
            sums.total += step.loss.total;
            n_steps += 1;
            global_step += 1;
        }

        let val = evaluate_split(&model, corpus, &splits.val, run)?;
        let denom = n_steps.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            steps: n_steps,
            lr: lr_t,
            triplet: sums.triplet / denom,
            diversity: sums.diversity / denom,
            mmd: sums.mmd / denom,
            total: sums.total / denom,
            untrained_fraction: counter.fraction(),
            val_cv_visual: val.circular_variance_visual,
            val_cv_text: val.circular_variance_text,
            val_rsum: val.rsum,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val rsum {:.1} untrained {:.3}",
            rec.total,
            rec.val_rsum,
            rec.untrained_fraction
        );
        epochs.push(rec);
        let improved = best.as_ref().is_none_or(|(_, b, _)| val.rsum > b.rsum);
        if let Some(o) = out {
            let info = serde_json::json!({"epoch": epoch, "val_rsum": val.rsum});
            checkpoint_of(&model, Some(&opt), run, info.clone()).save(&o.last())?;
            if improved {
                checkpoint_of(&model, None, run, info).save(&o.best())?;
            }
            write_atomic(&o.metrics(), epochs_csv(&epochs, &hash).as_bytes())?;
            write_atomic(&o.steps(), steps_csv(&steps, &hash).as_bytes())?;
        }
        if improved {
            best = Some((epoch, val, model.clone()));
        }
    }

    let (best_epoch, best_val, best_model) = match best {
        Some(b) => b,
        None => {
            let val = evaluate_split(&model, corpus, &splits.val, run)?;
            (0, val, model)
        }
    };
    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        best_val,
        epochs,
        steps,
        splits,
    })
}

/// Convenience for callers that only need the output paths.
pub fn output_dir(path: &Path) -> Result<OutputDir> {
    if !path.is_dir() {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    Ok(OutputDir {
        dir: path.to_path_buf(),
    })
}
