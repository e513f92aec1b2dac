//! Optimizers, learning-rate schedules, the masked-token pre-training loop,
//! and the fraction-sweep fine-tuning loop with checkpointing.
//!
//! Batch gradients are accumulated over fixed-size groups of samples and the
//! group sums are reduced in index order, so results are bitwise identical
//! for any thread count.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::eval::{auprc, auroc, bootstrap_ci, EvalReport, Metric, ScoredSet};
use crate::ingest::SplitPlan;
use crate::model::checkpoint::{save_checkpoint, Checkpoint};
use crate::model::{
    cls_forward, cls_loss, mim_loss, patch_matrix, BoundParams, ModelConfig, ModelError,
    ModelParams, Tape, Tensor,
};
use crate::raster::RasterImage;
use crate::tokenizer::{encode, Codebook, TokenGrid, TokenizerError};
use crate::util::{mix_seed, mix_seed_index, par_map, rng_from};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("non-finite gradient; step aborted")]
    NonFiniteGradient,
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("missing: {0}")]
    Missing(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Metric(#[from] crate::eval::MetricError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Samples per gradient-accumulation group; fixed so the reduction tree does
/// not depend on the thread count.
const GRAD_GROUP: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

/// Adam/AdamW state with per-parameter moment arrays.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, shapes: &[(usize, usize)]) -> Self {
        OptimizerState {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            step_count: 0,
        }
    }
}

/// One Adam step with bias correction; AdamW additionally applies decoupled
/// weight decay lr*wd*theta. Non-finite gradients abort before any state or
/// parameter changes.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut ModelParams,
    grads: &[Tensor],
) -> Result<(), TrainingError> {
    if grads.len() != params.entries.len() {
        return Err(TrainingError::Argument(format!(
            "got {} gradients for {} parameters",
            grads.len(),
            params.entries.len()
        )));
    }
    for g in grads {
        if !g.all_finite() {
            return Err(TrainingError::NonFiniteGradient);
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    for (i, (_, theta)) in params.entries.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = &grads[i];
        for j in 0..theta.len() {
            let gj = g.data[j];
            m.data[j] = state.beta1 * m.data[j] + (1.0 - state.beta1) * gj;
            v.data[j] = state.beta2 * v.data[j] + (1.0 - state.beta2) * gj * gj;
            let m_hat = m.data[j] / bias1;
            let v_hat = v.data[j] / bias2;
            let mut update = state.lr * m_hat / (v_hat.sqrt() + state.eps);
            if state.kind == OptimizerKind::AdamW {
                update += state.lr * state.weight_decay * theta.data[j];
            }
            theta.data[j] -= update;
        }
    }
    Ok(())
}

/// Cosine one-cycle policy: ramp base->max over the warmup fraction of
/// steps, anneal max->final over the rest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OneCycleSchedule {
    pub base_lr: f64,
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub final_lr: f64,
}

impl OneCycleSchedule {
    pub fn new(base_lr: f64, max_lr: f64, total_steps: usize) -> Self {
        OneCycleSchedule {
            base_lr,
            max_lr,
            total_steps,
            warmup_fraction: 0.3,
            final_lr: base_lr / 25.0,
        }
    }

    pub fn peak_step(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).floor() as usize).max(1)
    }
}

pub fn onecycle_lr(schedule: &OneCycleSchedule, step: usize) -> Result<f64, TrainingError> {
    if step > schedule.total_steps {
        return Err(TrainingError::Argument(format!(
            "step {step} beyond total {}",
            schedule.total_steps
        )));
    }
    let peak = schedule.peak_step();
    let lr = if step <= peak {
        let t = step as f64 / peak as f64;
        schedule.base_lr
            + (schedule.max_lr - schedule.base_lr) * (1.0 - (std::f64::consts::PI * t).cos()) / 2.0
    } else {
        let span = (schedule.total_steps - peak).max(1) as f64;
        let t = (step - peak) as f64 / span;
        schedule.final_lr
            + (schedule.max_lr - schedule.final_lr)
                * (1.0 + (std::f64::consts::PI * t).cos())
                / 2.0
    };
    Ok(lr)
}

/// Draws floor(ratio * n + 0.5) distinct masked positions.
pub fn sample_mask(
    n_patches: usize,
    ratio: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    let count = ((ratio * n_patches as f64 + 0.5).floor() as usize).min(n_patches);
    let mut picks = rand::seq::index::sample(rng, n_patches, count).into_vec();
    picks.sort_unstable();
    picks
}

/// Per-epoch row of the run log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

/// Loss/metric/lr trace of one run plus its provenance.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub stats: Vec<EpochStat>,
    pub seed: u64,
    pub config_hash: String,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainingError> {
        let io = |source: std::io::Error| TrainingError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = String::from("epoch,split,loss,auroc,auprc,lr,seconds\n");
        for s in &self.stats {
            let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.epoch,
                s.split,
                opt(s.loss),
                opt(s.auroc),
                opt(s.auprc),
                s.lr,
                s.seconds
            ));
        }
        std::fs::write(path, out).map_err(io)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), TrainingError> {
        let io = |source: std::io::Error| TrainingError::Io {
            path: path.display().to_string(),
            source,
        };
        let json = serde_json::to_string_pretty(self).map_err(|e| TrainingError::Argument(e.to_string()))?;
        std::fs::write(path, json).map_err(io)
    }
}

/// Accumulates per-sample gradients over fixed-size groups (parallel across
/// groups, sequential merge in group order) and returns the summed gradients
/// plus the summed loss.
fn batch_gradients<F>(n: usize, shapes: &[(usize, usize)], per_sample: F) -> Result<(Vec<Tensor>, f64), TrainingError>
where
    F: Fn(usize, &mut Tape) -> Result<crate::model::VarId, TrainingError> + Sync,
{
    let groups: Vec<(usize, usize)> = (0..n)
        .step_by(GRAD_GROUP)
        .map(|lo| (lo, (lo + GRAD_GROUP).min(n)))
        .collect();
    let results: Vec<Result<(Vec<Tensor>, f64), TrainingError>> =
        par_map(&groups, |_, &(lo, hi)| {
            let mut grads: Vec<Tensor> = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
            let mut loss_sum = 0.0;
            for k in lo..hi {
                let mut tape = Tape::new();
                let loss = per_sample(k, &mut tape)?;
                loss_sum += tape.value(loss).data[0];
                tape.backward(loss);
                for (acc, g) in grads.iter_mut().zip(tape.param_grads(shapes)) {
                    acc.add_assign(&g);
                }
            }
            Ok((grads, loss_sum))
        });
    let mut grads: Vec<Tensor> = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
    let mut loss_sum = 0.0;
    for r in results {
        let (g, l) = r?;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
        loss_sum += l;
    }
    Ok((grads, loss_sum))
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Additionally checkpoint every N epochs when writing to disk.
    pub checkpoint_every: Option<usize>,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 10,
            batch_size: 32,
            mask_ratio: 0.40,
            lr: 5e-4,
            weight_decay: 0.05,
            seed: 7,
            checkpoint_every: None,
        }
    }
}

/// Masked-token pre-training with AdamW at a constant learning rate. Writes
/// periodic and final checkpoints when `out_dir` is given; returns the final
/// parameters and the loss trace.
pub fn pretrain(
    images: &[RasterImage],
    codebook: &Codebook,
    config: &ModelConfig,
    opts: &PretrainOptions,
    out_dir: Option<&Path>,
    config_hash: [u8; 32],
) -> Result<(ModelParams, RunRecord), TrainingError> {
    if images.is_empty() {
        return Err(TrainingError::Argument("empty pre-training corpus".into()));
    }
    config.validate()?;
    if codebook.patch_dim != config.patch_size * config.patch_size {
        return Err(TrainingError::Argument(format!(
            "codebook patch_dim {} does not match patch size {}",
            codebook.patch_dim, config.patch_size
        )));
    }
    if codebook.vocab_size != config.vocab_size {
        return Err(TrainingError::Argument(format!(
            "codebook vocabulary {} does not match model vocab_size {}",
            codebook.vocab_size, config.vocab_size
        )));
    }
    let started = Instant::now();

    // Token targets are parameter-independent; encode once.
    let token_grids: Vec<TokenGrid> = {
        let grids: Vec<Result<TokenGrid, TrainingError>> = par_map(images, |_, img| {
            let patches = crate::raster::to_patches(img, config.patch_size)
                .map_err(|e| TrainingError::Argument(e.to_string()))?;
            Ok(encode(&patches, codebook)?)
        });
        grids.into_iter().collect::<Result<_, _>>()?
    };

    let mut params = ModelParams::init(config, opts.seed);
    let shapes = params.shapes();
    let mut optimizer = OptimizerState::new(OptimizerKind::AdamW, opts.lr, opts.weight_decay, &shapes);
    let mut mask_rng = rng_from(mix_seed(opts.seed, "pretrain-mask"));
    let mut stats = Vec::new();

    for epoch in 0..opts.epochs {
        let epoch_started = Instant::now();
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng_from(mix_seed_index(
            opts.seed,
            "pretrain-epoch",
            epoch as u64,
        )));

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(opts.batch_size.max(1)) {
            // Masks drawn sequentially in batch order before dispatch.
            let masks: Vec<Vec<usize>> = batch
                .iter()
                .map(|_| sample_mask(config.n_patches(), opts.mask_ratio, &mut mask_rng))
                .collect();
            let (mut grads, loss_sum) = batch_gradients(batch.len(), &shapes, |k, tape| {
                let idx = batch[k];
                let patches = patch_matrix(&images[idx], config)?;
                let bound = BoundParams::bind(tape, &params);
                Ok(mim_loss(
                    tape,
                    &bound,
                    config,
                    &patches,
                    &token_grids[idx],
                    &masks[k],
                )?)
            })?;
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                g.scale_assign(scale);
            }
            optimizer_step(&mut optimizer, &mut params, &grads)?;
            epoch_loss += loss_sum;
            seen += batch.len();
        }
        let mean_loss = epoch_loss / seen as f64;
        stats.push(EpochStat {
            epoch,
            split: "pretrain".into(),
            loss: Some(mean_loss),
            auroc: None,
            auprc: None,
            lr: opts.lr,
            seconds: epoch_started.elapsed().as_secs_f64(),
        });

        if let (Some(dir), Some(every)) = (out_dir, opts.checkpoint_every) {
            if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < opts.epochs {
                save_epoch_checkpoint(dir, epoch, &params, &optimizer, config, config_hash)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        let path = dir.join("checkpoint_final.hbck");
        save_checkpoint(
            &path,
            &Checkpoint {
                config_hash,
                config: config.clone(),
                params: params.clone(),
                optimizer: optimizer_tensors(&optimizer, &params),
            },
        )?;
    }

    let record = RunRecord {
        stats,
        seed: opts.seed,
        config_hash: hex(&config_hash),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((params, record))
}

fn save_epoch_checkpoint(
    dir: &Path,
    epoch: usize,
    params: &ModelParams,
    optimizer: &OptimizerState,
    config: &ModelConfig,
    config_hash: [u8; 32],
) -> Result<(), TrainingError> {
    let path = dir.join(format!("checkpoint_ep{:04}.hbck", epoch + 1));
    save_checkpoint(
        &path,
        &Checkpoint {
            config_hash,
            config: config.clone(),
            params: params.clone(),
            optimizer: optimizer_tensors(optimizer, params),
        },
    )?;
    Ok(())
}

/// Flattens optimizer state into the checkpoint's named-tensor table.
fn optimizer_tensors(opt: &OptimizerState, params: &ModelParams) -> Vec<(String, Tensor)> {
    let mut out = vec![(
        "step_count".to_string(),
        Tensor::from_vec(1, 1, vec![opt.step_count as f64]),
    )];
    for (i, (name, _)) in params.entries.iter().enumerate() {
        out.push((format!("m.{name}"), opt.m[i].clone()));
        out.push((format!("v.{name}"), opt.v[i].clone()));
    }
    out
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Positive-class probabilities for a set of images under a classifier.
pub fn score_images(
    params: &ModelParams,
    config: &ModelConfig,
    images: &[&RasterImage],
) -> Result<Vec<f64>, TrainingError> {
    let scores: Vec<Result<f64, TrainingError>> = par_map(images, |_, img| {
        let patches = patch_matrix(img, config)?;
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params);
        let logits = cls_forward(&mut tape, &bound, config, &patches)?;
        let row = tape.value(logits).row(0);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok(exps[1] / sum)
    });
    scores.into_iter().collect()
}

/// Fresh fine-tuning parameters: the encoder comes from the pretrained
/// checkpoint when given (otherwise seeded init); the classification head is
/// always freshly drawn from (seed, name), so head initialization is
/// identical with and without pre-training.
pub fn init_finetune_params(
    pretrained: Option<&ModelParams>,
    config: &ModelConfig,
    seed: u64,
) -> Result<ModelParams, TrainingError> {
    let fresh = ModelParams::init(config, seed);
    match pretrained {
        None => Ok(fresh),
        Some(p) => {
            p.validate_against(config)?;
            let mut out = p.clone();
            *out.get_mut("cls_head.weight") = fresh.get("cls_head.weight").clone();
            Ok(out)
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub max_lr: f64,
    pub seed: u64,
    /// Update only the classification head.
    pub head_only: bool,
    pub n_bootstrap: usize,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions {
            epochs: 30,
            batch_size: 32,
            base_lr: 3e-4,
            max_lr: 1e-3,
            seed: 7,
            head_only: false,
            n_bootstrap: 500,
        }
    }
}

/// Result of fine-tuning one training fraction.
pub struct FractionRun {
    pub fraction: f64,
    pub best_epoch: usize,
    pub report: EvalReport,
    pub params: ModelParams,
    pub best_scores: ScoredSet,
    pub record: RunRecord,
}

/// Fine-tunes one model per training fraction with Adam and a one-cycle
/// schedule, evaluating on the common test set every epoch and reporting the
/// best epoch's metrics with bootstrap intervals.
pub fn finetune_sweep(
    pretrained: Option<&ModelParams>,
    plan: &SplitPlan,
    labels: &BTreeMap<String, u8>,
    images: &[RasterImage],
    config: &ModelConfig,
    opts: &FinetuneOptions,
    config_hash: [u8; 32],
) -> Result<Vec<FractionRun>, TrainingError> {
    config.validate()?;
    let by_id: BTreeMap<&str, usize> = images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.source_record_id.as_str(), i))
        .collect();
    let resolve = |ids: &[String]| -> Result<Vec<usize>, TrainingError> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| TrainingError::Missing(format!("image for record {id}")))
            })
            .collect()
    };
    let label_of = |id: &str| -> Result<usize, TrainingError> {
        labels
            .get(id)
            .map(|&l| l as usize)
            .ok_or_else(|| TrainingError::Missing(format!("label for record {id}")))
    };

    let test_idx = resolve(&plan.test_ids)?;
    let test_labels: Vec<u8> = plan
        .test_ids
        .iter()
        .map(|id| label_of(id).map(|l| l as u8))
        .collect::<Result<_, _>>()?;
    let test_images: Vec<&RasterImage> = test_idx.iter().map(|&i| &images[i]).collect();

    let mut runs = Vec::new();
    for (fi, (fraction, train_ids)) in plan.train_ids_by_fraction.iter().enumerate() {
        if train_ids.is_empty() {
            return Err(TrainingError::Split(format!(
                "training fraction {fraction} is empty"
            )));
        }
        let run_started = Instant::now();
        let fraction_seed = mix_seed_index(opts.seed, "finetune-fraction", fi as u64);
        let train_idx = resolve(train_ids)?;
        let train_labels: Vec<usize> = train_ids
            .iter()
            .map(|id| label_of(id))
            .collect::<Result<_, _>>()?;

        let mut params = init_finetune_params(pretrained, config, opts.seed)?;
        let shapes = params.shapes();
        let head_slot = params
            .index_of("cls_head.weight")
            .expect("head parameter exists");
        let mut optimizer = OptimizerState::new(OptimizerKind::Adam, opts.base_lr, 0.0, &shapes);

        let steps_per_epoch = train_idx.len().div_ceil(opts.batch_size.max(1));
        let schedule = OneCycleSchedule::new(opts.base_lr, opts.max_lr, opts.epochs * steps_per_epoch);

        let mut stats = Vec::new();
        let mut best: Option<(f64, usize, ModelParams, ScoredSet)> = None;
        let mut step = 0usize;
        for epoch in 0..opts.epochs {
            let epoch_started = Instant::now();
            let mut order: Vec<usize> = (0..train_idx.len()).collect();
            order.shuffle(&mut rng_from(mix_seed_index(
                fraction_seed,
                "epoch-order",
                epoch as u64,
            )));

            let mut epoch_loss = 0.0;
            let mut last_lr = optimizer.lr;
            for batch in order.chunks(opts.batch_size.max(1)) {
                let (mut grads, loss_sum) = batch_gradients(batch.len(), &shapes, |k, tape| {
                    let local = batch[k];
                    let img = &images[train_idx[local]];
                    let patches = patch_matrix(img, config)?;
                    let bound = BoundParams::bind(tape, &params);
                    Ok(cls_loss(tape, &bound, config, &patches, train_labels[local])?)
                })?;
                let scale = 1.0 / batch.len() as f64;
                for g in grads.iter_mut() {
                    g.scale_assign(scale);
                }
                if opts.head_only {
                    for (i, g) in grads.iter_mut().enumerate() {
                        if i != head_slot {
                            g.scale_assign(0.0);
                        }
                    }
                }
                step += 1;
                optimizer.lr = onecycle_lr(&schedule, step.min(schedule.total_steps))?;
                last_lr = optimizer.lr;
                optimizer_step(&mut optimizer, &mut params, &grads)?;
                epoch_loss += loss_sum;
            }

            let scores = score_images(&params, config, &test_images)?;
            let scored = ScoredSet::new(plan.test_ids.clone(), scores, test_labels.clone())?;
            let test_auroc = auroc(&scored)?;
            let test_auprc = auprc(&scored)?;
            let seconds = epoch_started.elapsed().as_secs_f64();
            stats.push(EpochStat {
                epoch,
                split: "train".into(),
                loss: Some(epoch_loss / train_idx.len() as f64),
                auroc: None,
                auprc: None,
                lr: last_lr,
                seconds,
            });
            stats.push(EpochStat {
                epoch,
                split: "test".into(),
                loss: None,
                auroc: Some(test_auroc),
                auprc: Some(test_auprc),
                lr: last_lr,
                seconds,
            });
            if best.as_ref().map(|(b, ..)| test_auroc > *b).unwrap_or(true) {
                best = Some((test_auroc, epoch, params.clone(), scored));
            }
        }

        let (_, best_epoch, best_params, best_scores) = best.expect("at least one epoch");
        let report = EvalReport {
            auroc: auroc(&best_scores)?,
            auroc_ci: bootstrap_ci(&best_scores, Metric::Auroc, opts.n_bootstrap, fraction_seed)?,
            auprc: auprc(&best_scores)?,
            auprc_ci: bootstrap_ci(&best_scores, Metric::Auprc, opts.n_bootstrap, fraction_seed)?,
            n_bootstrap: opts.n_bootstrap,
            prevalence: best_scores.prevalence(),
            fraction: *fraction,
            split_tag: "test".into(),
        };
        runs.push(FractionRun {
            fraction: *fraction,
            best_epoch,
            report,
            params: best_params,
            best_scores,
            record: RunRecord {
                stats,
                seed: opts.seed,
                config_hash: hex(&config_hash),
                wall_seconds: run_started.elapsed().as_secs_f64(),
            },
        });
    }
    Ok(runs)
}
