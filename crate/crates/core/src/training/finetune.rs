//! Classification fine-tuning from a pretraining checkpoint or from scratch.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::autograd::Tape;
use crate::config::Config;
use crate::error::{Result, StarError};
use crate::model::Classifier;
use crate::params::ParamStore;
use crate::ssm::encoder::DropPath;

use super::checkpoint::Checkpoint;
use super::data::{augment, Sample};
use super::metrics::{MetricRecord, MetricsWriter};
use super::optim::{grad_norm, layer_scales, AdamW, Ema, OptimHyper, Schedule};
use super::pretrain::{reduce, Grads};
use super::{epoch_order, stream_rng, with_threads, Stream};

pub const SUMMARY_FILE: &str = "summary.json";

/// Keys that must agree between a pretraining checkpoint and fine-tuning.
const SHARED_KEYS: &[&str] = &[
    "data.image_size",
    "data.channels",
    "patch.size",
    "patch.cluster_side",
    "separator.layout",
    "pack.restart_positions",
    "encoder.depth",
    "encoder.width",
    "encoder.state_dim",
    "encoder.mlp_ratio",
    "encoder.positional",
];

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneRun {
    pub steps: u64,
    pub train_accuracy: f64,
    pub holdout_accuracy: Option<f64>,
    pub ema_holdout_accuracy: Option<f64>,
    /// Parameters copied from the pretraining checkpoint.
    pub loaded: usize,
    pub sequence_length: usize,
    #[serde(skip)]
    pub metrics: PathBuf,
}

pub fn accuracy(model: &Classifier, store: &ParamStore<f32>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let hits = samples
        .par_iter()
        .map(|s| {
            model
                .predict(store, &s.image)
                .map(|p| usize::from(p == s.label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

fn init_from(cfg: &Config, ckpt: &Checkpoint, store: &mut ParamStore<f32>) -> Result<usize> {
    let pairs = Config::parse_text(&ckpt.config)?;
    let saved = Config::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let mismatched: Vec<String> = SHARED_KEYS
        .iter()
        .filter(|k| saved.get(k) != cfg.get(k))
        .map(|k| {
            format!(
                "{k}: {} vs {}",
                saved.get(k).unwrap_or_default(),
                cfg.get(k).unwrap_or_default()
            )
        })
        .collect();
    if !mismatched.is_empty() {
        return Err(StarError::HeterogeneousGeometry(format!(
            "checkpoint geometry differs: {}",
            mismatched.join("; ")
        )));
    }
    let source = ckpt.store();
    let loaded = store.load_matching(&source);
    if loaded.is_empty() {
        return Err(StarError::Checkpoint(
            "no parameter of the checkpoint matches the classifier".into(),
        ));
    }
    Ok(loaded.len())
}

/// Fine-tunes a classifier on `samples`. The last `finetune.holdout`
/// fraction is held out for evaluation.
pub fn finetune(
    cfg: &Config,
    samples: &[Sample],
    init: Option<&Checkpoint>,
    out: &Path,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    if let Some(s) = samples.iter().find(|s| s.label >= cfg.ft_classes) {
        return Err(StarError::InvalidArgument(format!(
            "{} has label {} but finetune.classes = {}",
            s.file, s.label, cfg.ft_classes
        )));
    }
    let held = (samples.len() as f64 * cfg.ft_holdout).floor() as usize;
    let (train, holdout) = samples.split_at(samples.len() - held);
    if train.is_empty() {
        return Err(StarError::Config(
            "no training images left after the holdout split".into(),
        ));
    }
    std::fs::create_dir_all(out)?;
    let batch = cfg.ft_batch.min(train.len());
    let steps_per_epoch = (train.len() / batch) as u64;
    let total_steps = cfg.ft_epochs as u64 * steps_per_epoch;
    let schedule = Schedule {
        base_lr: cfg.ft_lr.resolve(cfg.ft_blr, batch),
        warmup_steps: cfg.ft_warmup_epochs as u64 * steps_per_epoch,
        total_steps,
    };

    let mut rng = stream_rng(cfg.seed, Stream::Init, 1);
    let mut store = ParamStore::<f32>::new();
    let model = Classifier::build(cfg, &mut store, &mut rng)?;
    let loaded = match init {
        Some(c) => init_from(cfg, c, &mut store)?,
        None => 0,
    };
    let scales = layer_scales(&store, cfg.encoder_depth, cfg.ft_layer_decay);
    let mut opt = AdamW::new(
        &store,
        OptimHyper {
            weight_decay: cfg.ft_weight_decay,
            beta1: cfg.ft_beta1,
            beta2: cfg.ft_beta2,
            eps: 1e-8,
        },
    );
    let mut ema = Ema::new(&store, cfg.ft_ema_decay);
    let mut metrics = MetricsWriter::create(&out.join(super::pretrain::METRICS_FILE))?;
    let sequence_length = model.input(&train[0].image)?.len();

    let mut order: Option<(u64, Vec<usize>)> = None;
    for step in 0..total_steps {
        let t0 = Instant::now();
        let epoch = step / steps_per_epoch;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((
                epoch,
                epoch_order(cfg.seed ^ 0x5eed, epoch, train.len(), cfg.shuffle),
            ));
        }
        let k = (step % steps_per_epoch) as usize;
        let idx = &order.as_ref().unwrap().1[k * batch..(k + 1) * batch];
        let mut aug_rng = stream_rng(cfg.seed ^ 0x5eed, Stream::Augment, step);
        let items: Vec<(crate::ssm::EncoderInput, usize)> = idx
            .iter()
            .map(|&i| {
                let img = if cfg.augment {
                    augment(&train[i].image, cfg.crop_min_scale, &mut aug_rng)
                } else {
                    train[i].image.clone()
                };
                Ok((model.input(&img)?, train[i].label))
            })
            .collect::<Result<_>>()?;
        let store_ref = &store;
        let model_ref = &model;
        let parts = with_threads(cfg.threads, || {
            items
                .par_iter()
                .enumerate()
                .map(|(j, (input, label))| -> Result<(f64, Grads)> {
                    let mut tape = Tape::new();
                    let vars = store_ref.bind(&mut tape);
                    let mut drop_rng =
                        stream_rng(cfg.seed ^ 0x5eed, Stream::DropPath, step * 4096 + j as u64);
                    let drop = (cfg.ft_drop_path > 0.0).then_some(DropPath {
                        rate: cfg.ft_drop_path,
                        rng: &mut drop_rng,
                    });
                    let logits = model_ref.logits_graph(&mut tape, &vars, input, drop)?;
                    let l = tape.cross_entropy(logits, vec![*label]);
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
                what: "fine-tuning loss".into(),
            });
        }
        let lr = schedule.lr_at(step);
        let gnorm = grad_norm(&grads);
        opt.update(&mut store, &grads, lr, Some(&scales))?;
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
    }

    let train_accuracy = accuracy(&model, &store, train)?;
    let (holdout_accuracy, ema_holdout_accuracy) = if holdout.is_empty() {
        (None, None)
    } else {
        (
            Some(accuracy(&model, &store, holdout)?),
            Some(accuracy(&model, &ema.apply_to(&store), holdout)?),
        )
    };
    Checkpoint::capture(
        "finetune",
        cfg.snapshot(),
        total_steps,
        &store,
        &opt,
        Some(&ema),
    )
    .save(&out.join("classifier.bin"))?;
    let run = FinetuneRun {
        steps: total_steps,
        train_accuracy,
        holdout_accuracy,
        ema_holdout_accuracy,
        loaded,
        sequence_length,
        metrics: metrics.path().to_path_buf(),
    };
    std::fs::write(
        out.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&run).map_err(std::io::Error::from)?,
    )?;
    Ok(run)
}
