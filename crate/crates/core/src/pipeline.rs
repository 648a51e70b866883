//! End-to-end commands: pretraining, fine-tuning, evaluation, the speaker
//! probe and the two analyses. The CLI is a thin layer over these.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::analysis::{analyze_attention, AttentionReport};
use crate::attention::{Encoder, FactorMode, ENCODER_PREFIX};
use crate::augment::{Augmentation, AugmentationConfig};
use crate::checkpoint::{Checkpoint, MetricRecord, Stage};
use crate::config::TrainConfig;
use crate::contrastive::{pretrain_step, StepMetrics};
use crate::data::{infer_dims, split_indices};
use crate::error::{Error, Result};
use crate::graph::{FeatureDims, VideoRecord};
use crate::optim::AdamWState;
use crate::params::ParamStore;
use crate::probe::{build_pairs, train_probe, ProbeReport};
use crate::qa::{
    correct_position, evaluate_accuracy, finetune_step, qa_examples, EncodedVideo, FinetuneMode, QAContext, QAModel,
};
use crate::util::{derive_seed, rng_for};

// random stream identifiers
const INIT: u64 = 1;
const SHUFFLE: u64 = 2;
const AUGMENT: u64 = 3;
const QA_INIT: u64 = 4;
const QA_SHUFFLE: u64 = 5;
const POSITION: u64 = 6;
const PROBE: u64 = 7;

/// Feature widths of a dataset, checked against every record.
pub fn dataset_dims(videos: &[VideoRecord]) -> Result<FeatureDims> {
    let first = videos.first().ok_or(Error::EmptyDataset)?;
    let mut dims = infer_dims(first).ok_or_else(|| Error::InvalidArgument {
        op: "dataset_dims",
        msg: format!("video `{}` lacks a modality", first.video_id),
    })?;
    if dims.token == 0 {
        dims.token = videos.iter().find_map(|v| infer_dims(v)).map_or(0, |d| d.token);
    }
    for v in videos {
        v.validate(Some(&dims))?;
    }
    Ok(dims)
}

/// Encoder parameters, optimizer and progress of a contrastive run.
pub struct PretrainRun {
    pub config: TrainConfig,
    pub dims: FeatureDims,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub optimizer: AdamWState,
    /// Completed epochs.
    pub epoch: u64,
}

impl PretrainRun {
    pub fn new(config: TrainConfig, dims: FeatureDims) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.encoder(dims), &mut rng_for(config.seed, &[INIT]))?;
        let optimizer = AdamWState::new(config.optimizer());
        Ok(Self {
            config,
            dims,
            store,
            encoder,
            optimizer,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.stage != Stage::Pretrain {
            return Err(Error::Checkpoint("not a pretraining checkpoint".into()));
        }
        let mut run = Self::new(ckpt.config, ckpt.dims)?;
        run.store.load_values(&ckpt.params)?;
        run.optimizer = ckpt.optimizer;
        run.epoch = ckpt.epoch;
        Ok(run)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: Stage::Pretrain,
            config: self.config.clone(),
            dims: self.dims,
            epoch: self.epoch,
            params: self.store.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// One pass over `train` (indices into `videos`) in a seeded order.
    pub fn run_epoch(&mut self, videos: &[VideoRecord], train: &[usize]) -> Result<Vec<MetricRecord>> {
        let e = self.epoch;
        let seed = self.config.seed;
        let mut order = train.to_vec();
        order.shuffle(&mut rng_for(seed, &[SHUFFLE, e]));
        let cfg = self.config.pretrain();
        let (mut loss, mut pos, mut neg, mut n, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&VideoRecord> = chunk.iter().map(|&i| &videos[i]).collect();
            let StepMetrics {
                loss: l,
                pos_sim,
                neg_sim,
                contributing,
                skipped: s,
            } = pretrain_step(
                &mut self.store,
                &mut self.optimizer,
                &self.encoder,
                &batch,
                &cfg,
                derive_seed(seed, &[AUGMENT, e, b as u64]),
            )?;
            let w = contributing as f64;
            loss += l * w;
            pos += pos_sim * w;
            neg += neg_sim * w;
            n += contributing;
            skipped += s;
        }
        self.epoch += 1;
        let k = n.max(1) as f64;
        let e = self.epoch;
        Ok(vec![
            MetricRecord::new(e, "pretrain.loss", loss / k),
            MetricRecord::new(e, "pretrain.pos_sim", pos / k),
            MetricRecord::new(e, "pretrain.neg_sim", neg / k),
            MetricRecord::new(e, "pretrain.skipped", skipped as f64),
        ])
    }
}

/// Contrastive pretraining up to `config.max_epochs` on the training split,
/// starting from `resume` when given. Returns the metrics of the epochs run.
pub fn cmd_pretrain(
    config: &TrainConfig,
    videos: &[VideoRecord],
    resume: Option<Checkpoint>,
) -> Result<(PretrainRun, Vec<MetricRecord>)> {
    config.validate()?;
    let dims = dataset_dims(videos)?;
    let mut run = match resume {
        Some(c) => {
            if c.dims != dims {
                return Err(Error::Checkpoint("checkpoint feature widths differ from the data".into()));
            }
            PretrainRun::from_checkpoint(c)?
        }
        None => PretrainRun::new(config.clone(), dims)?,
    };
    run.config.max_epochs = config.max_epochs;
    let (train, _) = split_indices(videos);
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut metrics = Vec::new();
    while run.epoch < run.config.max_epochs as u64 {
        metrics.extend(run.run_epoch(videos, &train)?);
    }
    Ok((run, metrics))
}

/// One point of an augmentation-ratio sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub augmentation: Augmentation,
    pub ratio: f64,
    pub final_loss: f64,
    pub pos_minus_neg: f64,
}

/// Pretrains once per ratio with only `aug` enabled.
pub fn cmd_pretrain_sweep(
    config: &TrainConfig,
    videos: &[VideoRecord],
    aug: Augmentation,
    ratios: &[f64],
) -> Result<Vec<SweepPoint>> {
    ratios
        .iter()
        .map(|&r| {
            let mut cfg = config.clone();
            cfg.aug = AugmentationConfig::only(aug, r);
            let (_, m) = cmd_pretrain(&cfg, videos, None)?;
            let last = |k: &str| m.iter().rev().find(|x| x.key == k).map_or(f64::NAN, |x| x.value);
            Ok(SweepPoint {
                augmentation: aug,
                ratio: r,
                final_loss: last("pretrain.loss"),
                pos_minus_neg: last("pretrain.pos_sim") - last("pretrain.neg_sim"),
            })
        })
        .collect()
}

/// Encoder plus QA model with their parameter store.
pub struct QARun {
    pub config: TrainConfig,
    pub dims: FeatureDims,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub model: QAModel,
}

impl QARun {
    /// Fresh parameters; the encoder part is then typically overwritten
    /// from a pretraining checkpoint.
    pub fn new(config: TrainConfig, dims: FeatureDims) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.encoder(dims), &mut rng_for(config.seed, &[INIT]))?;
        let model = QAModel::new(&mut store, config.qa(), dims.token, &mut rng_for(config.seed, &[QA_INIT]))?;
        Ok(Self {
            config,
            dims,
            store,
            encoder,
            model,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.stage != Stage::Finetune {
            return Err(Error::Checkpoint("not a fine-tuning checkpoint".into()));
        }
        let mut run = Self::new(ckpt.config.clone(), ckpt.dims)?;
        run.store.load_values(&ckpt.params)?;
        Ok(run)
    }

    fn frozen_cache(&self, videos: &[VideoRecord]) -> Result<Option<Vec<EncodedVideo>>> {
        if self.config.finetune_mode != FinetuneMode::Frozen {
            return Ok(None);
        }
        videos
            .iter()
            .map(|v| EncodedVideo::compute(&self.store, &self.encoder, v, self.config.graph_scope))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub metrics: Vec<MetricRecord>,
    pub max_val_accuracy: f64,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
    pub checkpoint: Checkpoint,
}

/// Fine-tunes on the QA items of the training split and tracks validation
/// accuracy each epoch. Frozen mode needs a pretraining checkpoint, whose
/// encoder settings take precedence over `config`.
pub fn cmd_finetune(config: &TrainConfig, videos: &[VideoRecord], pretrained: Option<&Checkpoint>) -> Result<FinetuneReport> {
    config.validate()?;
    let dims = dataset_dims(videos)?;
    let mut cfg = config.clone();
    if let Some(c) = pretrained {
        if c.stage != Stage::Pretrain {
            return Err(Error::Checkpoint("expected a pretraining checkpoint".into()));
        }
        if c.dims != dims {
            return Err(Error::Checkpoint("checkpoint feature widths differ from the data".into()));
        }
        cfg.hidden_dim = c.config.hidden_dim;
        cfg.heads = c.config.heads;
        cfg.layers = c.config.layers;
        cfg.factor_links = c.config.factor_links;
    }
    let mut run = QARun::new(cfg.clone(), dims)?;
    match (cfg.finetune_mode, pretrained) {
        (FinetuneMode::Frozen, None) => {
            return Err(Error::Checkpoint(
                "frozen fine-tuning needs a pretraining checkpoint".into(),
            ))
        }
        (FinetuneMode::Frozen, Some(c)) => {
            run.store.load_prefix(&c.params, ENCODER_PREFIX)?;
            run.store.set_frozen(ENCODER_PREFIX, true);
        }
        (FinetuneMode::SupervisedScratch, _) => {}
    }
    let hash_before = run.store.hash_prefix(ENCODER_PREFIX);
    let cache = run.frozen_cache(videos)?;
    let (train_v, val_v) = split_indices(videos);
    let train = qa_examples(videos, &train_v);
    let val = qa_examples(videos, &val_v);
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = AdamWState::new(cfg.optimizer());
    let mut metrics = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let seed = cfg.seed;
    for epoch in 0..cfg.finetune_epochs as u64 {
        let mut order = train.clone();
        order.shuffle(&mut rng_for(seed, &[QA_SHUFFLE, epoch]));
        let positions: Vec<usize> = order
            .iter()
            .map(|&ex| correct_position(derive_seed(seed, &[POSITION]), epoch, ex))
            .collect();
        let ctx = QAContext {
            encoder: &run.encoder,
            model: &run.model,
            videos,
            frozen: cache.as_deref(),
        };
        let mut loss = 0.0;
        let mut batches = 0;
        for (chunk, pos) in order.chunks(cfg.batch_size).zip(positions.chunks(cfg.batch_size)) {
            loss += finetune_step(&mut run.store, &mut opt, &ctx, chunk, pos)?;
            batches += 1;
        }
        let acc = evaluate_accuracy(&run.store, &ctx, &val)?;
        best = best.max(acc);
        let e = epoch + 1;
        let balance = positions.iter().sum::<usize>() as f64 / positions.len() as f64;
        metrics.extend([
            MetricRecord::new(e, "finetune.loss", loss / batches as f64),
            MetricRecord::new(e, "finetune.val_accuracy", acc),
            MetricRecord::new(e, "finetune.second_position_rate", balance),
        ]);
    }
    metrics.push(MetricRecord::new(cfg.finetune_epochs as u64, "finetune.max_val_accuracy", best));
    let hash_after = run.store.hash_prefix(ENCODER_PREFIX);
    let checkpoint = Checkpoint {
        stage: Stage::Finetune,
        config: cfg.clone(),
        dims,
        epoch: cfg.finetune_epochs as u64,
        params: run.store,
        optimizer: opt,
    };
    Ok(FinetuneReport {
        metrics,
        max_val_accuracy: best,
        encoder_hash_before: hash_before,
        encoder_hash_after: hash_after,
        checkpoint,
    })
}

/// Validation accuracy of a fine-tuned checkpoint.
pub fn cmd_eval(ckpt: &Checkpoint, videos: &[VideoRecord]) -> Result<f64> {
    let run = QARun::from_checkpoint(ckpt)?;
    let dims = dataset_dims(videos)?;
    if dims != run.dims {
        return Err(Error::Checkpoint("checkpoint feature widths differ from the data".into()));
    }
    let cache = run.frozen_cache(videos)?;
    let (_, val_v) = split_indices(videos);
    let val = qa_examples(videos, &val_v);
    let ctx = QAContext {
        encoder: &run.encoder,
        model: &run.model,
        videos,
        frozen: cache.as_deref(),
    };
    evaluate_accuracy(&run.store, &ctx, &val)
}

/// Speaker probe on frozen factorization embeddings from a pretraining checkpoint.
pub fn cmd_probe_speaker(ckpt: &Checkpoint, videos: &[VideoRecord]) -> Result<ProbeReport> {
    if ckpt.config.factor_mode != FactorMode::Factorized {
        return Err(Error::Analysis(format!(
            "the speaker probe needs a factorized checkpoint, got {}",
            ckpt.config.factor_mode.name()
        )));
    }
    let run = PretrainRun::from_checkpoint(ckpt.clone())?;
    let (train_v, val_v) = split_indices(videos);
    let train = build_pairs(&run.store, &run.encoder, videos, &train_v)?;
    let val = build_pairs(&run.store, &run.encoder, videos, &val_v)?;
    train_probe(&train, &val, &ckpt.config.probe, derive_seed(ckpt.config.seed, &[PROBE]))
}

/// Cross-turn versus within-turn attention of a video-level checkpoint.
pub fn cmd_analyze_attention(ckpt: &Checkpoint, videos: &[VideoRecord]) -> Result<AttentionReport> {
    if ckpt.config.factor_mode != FactorMode::VideoLevel {
        return Err(Error::Analysis(format!(
            "attention analysis concerns the video-level model, got {}",
            ckpt.config.factor_mode.name()
        )));
    }
    let run = PretrainRun::from_checkpoint(ckpt.clone())?;
    analyze_attention(&run.store, &run.encoder, videos)
}
