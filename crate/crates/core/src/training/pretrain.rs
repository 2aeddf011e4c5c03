//! Next-cluster pretraining loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::autograd::Tape;
use crate::config::Config;
use crate::error::{Result, StarError};
use crate::image::Image;
use crate::model::StarModel;
use crate::params::ParamStore;
use crate::ssm::encoder::DropPath;
use crate::tensor::Matrix;

use super::checkpoint::Checkpoint;
use super::data::augment;
use super::metrics::{MetricRecord, MetricsWriter};
use super::optim::{grad_norm, AdamW, Ema, OptimHyper, Schedule};
use super::{epoch_order, stream_rng, with_threads, Stream};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Completed optimizer steps.
    pub steps: u64,
    pub total_steps: u64,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub tokens_per_sequence: usize,
}

pub(crate) type Grads = Vec<Option<Matrix<f32>>>;

/// Averages per-item `(loss, grads)` in item order.
pub(crate) fn reduce(parts: Vec<(f64, Grads)>) -> (f64, Grads) {
    let n = parts.len().max(1) as f64;
    let mut loss = 0.0;
    let mut total: Grads = Vec::new();
    for (l, g) in parts {
        loss += l;
        if total.is_empty() {
            total = g;
            continue;
        }
        for (t, g) in total.iter_mut().zip(g) {
            match (t.as_mut(), g) {
                (Some(t), Some(g)) => t.add_assign(&g),
                (None, Some(g)) => *t = Some(g),
                _ => {}
            }
        }
    }
    let s = (1.0 / n) as f32;
    for g in total.iter_mut().flatten() {
        g.scale_assign(s);
    }
    (loss / n, total)
}

pub(crate) fn check_resume_config(kind: &str, ckpt: &Checkpoint, cfg: &Config) -> Result<()> {
    if ckpt.kind != kind {
        return Err(StarError::Checkpoint(format!(
            "checkpoint is from {}, expected {kind}",
            ckpt.kind
        )));
    }
    let pairs = Config::parse_text(&ckpt.config)?;
    let saved = Config::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let diffs = saved.binding_differences(cfg);
    if !diffs.is_empty() {
        return Err(StarError::Checkpoint(format!(
            "config differs from the checkpoint: {}",
            diffs.join("; ")
        )));
    }
    Ok(())
}

/// Pretrains on `images`, writing metrics and checkpoints under `out`.
/// With `resume`, training continues from that checkpoint and the metrics
/// file is truncated to the steps before it.
pub fn pretrain(
    cfg: &Config,
    images: &[Image],
    out: &Path,
    resume: Option<&Path>,
) -> Result<PretrainRun> {
    cfg.validate()?;
    let batch = cfg.pre_batch;
    if images.len() < batch {
        return Err(StarError::Config(format!(
            "corpus has {} images, fewer than pretrain.batch = {batch}",
            images.len()
        )));
    }
    std::fs::create_dir_all(out)?;
    let steps_per_epoch = (images.len() / batch) as u64;
    let total_steps = cfg.pre_epochs as u64 * steps_per_epoch;
    let schedule = Schedule {
        base_lr: cfg.pre_lr.resolve(cfg.pre_blr, batch),
        warmup_steps: cfg.pre_warmup_epochs as u64 * steps_per_epoch,
        total_steps,
    };
    let end = if cfg.pre_max_steps > 0 {
        total_steps.min(cfg.pre_max_steps as u64)
    } else {
        total_steps
    };

    let mut rng = stream_rng(cfg.seed, Stream::Init, 0);
    let mut store = ParamStore::<f32>::new();
    let model = StarModel::build(cfg, &mut store, &mut rng)?;
    let mut opt = AdamW::new(
        &store,
        OptimHyper {
            weight_decay: cfg.pre_weight_decay,
            beta1: cfg.pre_beta1,
            beta2: cfg.pre_beta2,
            eps: 1e-8,
        },
    );
    let mut ema = Ema::new(&store, cfg.pre_ema_decay);

    let metrics_path = out.join(METRICS_FILE);
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let (start, mut metrics) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            check_resume_config("pretrain", &ckpt, cfg)?;
            ckpt.restore(&mut store, &mut opt, Some(&mut ema))?;
            (ckpt.step, MetricsWriter::resume(&metrics_path, ckpt.step)?)
        }
        None => (0, MetricsWriter::create(&metrics_path)?),
    };
    log::info!(
        "pretraining {} parameters for steps {start}..{end} of {total_steps} ({steps_per_epoch} per epoch)",
        store.element_count()
    );

    let n_per_seq = cfg.pack_images;
    let tokens_per_sequence = model.pack(&images[..n_per_seq])?.len();
    let mut first_loss = None;
    let mut final_loss = None;
    let mut order: Option<(u64, Vec<usize>)> = None;
    for step in start..end {
        let t0 = Instant::now();
        let epoch = step / steps_per_epoch;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((
                epoch,
                epoch_order(cfg.seed, epoch, images.len(), cfg.shuffle),
            ));
        }
        let k = (step % steps_per_epoch) as usize;
        let idx = &order.as_ref().unwrap().1[k * batch..(k + 1) * batch];
        let mut aug_rng = stream_rng(cfg.seed, Stream::Augment, step);
        let batch_images: Vec<Image> = idx
            .iter()
            .map(|&i| {
                if cfg.augment {
                    augment(&images[i], cfg.crop_min_scale, &mut aug_rng)
                } else {
                    images[i].clone()
                }
            })
            .collect();
        let packs = batch_images
            .chunks(n_per_seq)
            .map(|c| model.pack(c))
            .collect::<Result<Vec<_>>>()?;

        let store_ref = &store;
        let model_ref = &model;
        let parts = with_threads(cfg.threads, || {
            packs
                .par_iter()
                .enumerate()
                .map(|(j, packed)| -> Result<(f64, Grads)> {
                    let mut tape = Tape::new();
                    let vars = store_ref.bind(&mut tape);
                    let mut drop_rng =
                        stream_rng(cfg.seed, Stream::DropPath, step * 4096 + j as u64);
                    let drop = (cfg.pre_drop_path > 0.0).then_some(DropPath {
                        rate: cfg.pre_drop_path,
                        rng: &mut drop_rng,
                    });
                    let l = model_ref.loss_graph(&mut tape, &vars, packed, drop)?;
                    let grads = tape.backward(l);
                    Ok((
                        tape.scalar(l) as f64,
                        tape.param_grads(&grads, store_ref.len()),
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let (loss, grads) = reduce(parts);
        if !loss.is_finite() {
            return Err(StarError::NonFinite {
                step,
                what: "pretraining loss".into(),
            });
        }
        let lr = schedule.lr_at(step);
        let gnorm = grad_norm(&grads);
        opt.update(&mut store, &grads, lr, None)
            .map_err(|_| StarError::NonFinite {
                step,
                what: "pretraining gradient".into(),
            })?;
        ema.update(&store);
        metrics.write(&MetricRecord {
            step,
            loss,
            lr,
            grad_norm: gnorm,
            wall_ms: cfg
                .record_wall_time
                .then(|| t0.elapsed().as_millis() as u64),
            accuracy: None,
        })?;
        log::debug!("step {step} loss {loss:.6} lr {lr:.3e} grad_norm {gnorm:.4}");
        first_loss.get_or_insert(loss);
        final_loss = Some(loss);
        let done = step + 1;
        if cfg.pre_checkpoint_every > 0 && done % cfg.pre_checkpoint_every as u64 == 0 && done < end
        {
            Checkpoint::capture("pretrain", cfg.snapshot(), done, &store, &opt, Some(&ema))
                .save(&ckpt_path)?;
        }
    }
    Checkpoint::capture(
        "pretrain",
        cfg.snapshot(),
        end.max(start),
        &store,
        &opt,
        Some(&ema),
    )
    .save(&ckpt_path)?;
    Ok(PretrainRun {
        first_loss,
        final_loss,
        steps: end.max(start),
        total_steps,
        metrics: metrics_path,
        checkpoint: ckpt_path,
        tokens_per_sequence,
    })
}
