//! Speaker probe: does a pair of turn representations reveal whether the
//! two turns share a speaker?

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::attention::{Encoder, FactorMode};
use crate::config::ProbeConfig;
use crate::error::{Error, Result};
use crate::graph::VideoRecord;
use crate::optim::{AdamWConfig, AdamWState};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{init_params, Init, Tensor};
use crate::util::rng_for;

/// A concatenated pair of turn representations with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbePair {
    pub features: Vec<f64>,
    pub label: f64,
}

/// Picks, for a video, a speaker with two turns `(a₁, a₂)` and a turn `b` of
/// another speaker (first occurrences in turn order).
pub fn probe_turns(video: &VideoRecord) -> Option<(usize, usize, usize)> {
    let speakers: Vec<&str> = video.turns.iter().map(|t| t.speaker_id.as_str()).collect();
    for (i, s) in speakers.iter().enumerate() {
        let Some(j) = (i + 1..speakers.len()).find(|&j| speakers[j] == *s) else {
            continue;
        };
        if let Some(k) = speakers.iter().position(|o| o != s) {
            return Some((i, j, k));
        }
    }
    None
}

/// Balanced pairs from one video's per-turn representations `z` (`[turns, d]`):
/// `(z_a1 ∥ z_a2, 1)` and `(z_a1 ∥ z_b, 0)`.
pub fn video_pairs(video: &VideoRecord, z: &Tensor) -> Option<[ProbePair; 2]> {
    let (a1, a2, b) = probe_turns(video)?;
    let cat = |x: usize, y: usize| [z.row_slice(x), z.row_slice(y)].concat();
    Some([
        ProbePair {
            features: cat(a1, a2),
            label: 1.0,
        },
        ProbePair {
            features: cat(a1, b),
            label: 0.0,
        },
    ])
}

/// Frozen per-turn factorization representations of every qualifying video.
pub fn build_pairs(store: &ParamStore, encoder: &Encoder, videos: &[VideoRecord], indices: &[usize]) -> Result<Vec<ProbePair>> {
    let mut out = Vec::new();
    for &i in indices {
        let v = &videos[i];
        if probe_turns(v).is_none() {
            continue;
        }
        let mut tape = Tape::new(store);
        let z = encoder.encode_video(&mut tape, v, FactorMode::Factorized)?;
        out.extend(video_pairs(v, tape.value(z)).expect("qualifies"));
    }
    Ok(out)
}

/// `[2d → hidden] → ReLU → dropout → [hidden → 1] → sigmoid`.
pub struct Probe {
    pub store: ParamStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    dropout: f64,
}

impl Probe {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, dropout: f64, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let w1 = store.add("probe.w1", init_params(input, hidden, Init::GlorotUniform, rng));
        let b1 = store.add("probe.b1", init_params(1, hidden, Init::Zeros, rng));
        let w2 = store.add("probe.w2", init_params(hidden, 1, Init::GlorotUniform, rng));
        let b2 = store.add("probe.b2", init_params(1, 1, Init::Zeros, rng));
        Self {
            store,
            w1,
            b1,
            w2,
            b2,
            dropout,
        }
    }

    /// Outputs `[rows, 1]`; `mask` is an inverted-dropout mask for the hidden layer.
    fn forward(&self, tape: &mut Tape, x: Var, mask: Option<Tensor>) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            tape.param(self.w1),
            tape.param(self.b1),
            tape.param(self.w2),
            tape.param(self.b2),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let mut h = tape.relu(h);
        if let Some(m) = mask {
            let m = tape.constant(m);
            h = tape.mul(h, m)?;
        }
        let o = tape.matmul(h, w2)?;
        let o = tape.add(o, b2)?;
        Ok(tape.sigmoid(o))
    }

    pub fn predict(&self, pairs: &[ProbePair]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(vec![]);
        }
        let mut tape = Tape::new(&self.store);
        let x = tape.constant(features(pairs)?);
        let y = self.forward(&mut tape, x, None)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Mean squared error and accuracy (threshold 0.5).
    pub fn evaluate(&self, pairs: &[ProbePair]) -> Result<(f64, f64)> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let p = self.predict(pairs)?;
        let mut se = 0.0;
        let mut correct = 0;
        for (y, pair) in p.iter().zip(pairs) {
            se += (y - pair.label).powi(2);
            if (*y > 0.5) == (pair.label > 0.5) {
                correct += 1;
            }
        }
        Ok((se / pairs.len() as f64, correct as f64 / pairs.len() as f64))
    }

    fn step<R: Rng + ?Sized>(&mut self, opt: &mut AdamWState, batch: &[ProbePair], rng: &mut R) -> Result<f64> {
        let hidden = self.store.value(self.w1).cols();
        let keep = 1.0 - self.dropout;
        let mask: Vec<f64> = (0..batch.len() * hidden)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::new(batch.len(), hidden, mask)?;
        self.store.zero_grad();
        let mut tape = Tape::new(&self.store);
        let x = tape.constant(features(batch)?);
        let y = self.forward(&mut tape, x, Some(mask))?;
        let t = tape.constant(Tensor::new(batch.len(), 1, batch.iter().map(|p| p.label).collect())?);
        let loss = tape.mse(y, t)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        self.store.accumulate(&grads, 1.0);
        opt.step(&mut self.store)?;
        Ok(value)
    }
}

fn features(pairs: &[ProbePair]) -> Result<Tensor> {
    let d = pairs[0].features.len();
    let rows: Vec<Vec<f64>> = pairs.iter().map(|p| p.features.clone()).collect();
    Tensor::from_rows(&rows, d)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    /// Validation accuracy at the epoch with the lowest validation loss.
    pub accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    /// `(epoch, train loss, val loss, val accuracy)`.
    pub history: Vec<(usize, f64, f64, f64)>,
}

/// Trains the probe with early stopping on validation loss.
pub fn train_probe(train: &[ProbePair], val: &[ProbePair], cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::NoQualifyingVideos);
    }
    let input = train[0].features.len();
    let mut probe = Probe::new(input, cfg.hidden, cfg.dropout, &mut rng_for(seed, &[0]));
    let mut opt = AdamWState::new(AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    });
    let mut best = (f64::INFINITY, 0.0, 0usize);
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let mut rng = rng_for(seed, &[1, epoch as u64]);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ProbePair> = chunk.iter().map(|&i| train[i].clone()).collect();
            total += probe.step(&mut opt, &batch, &mut rng)?;
            batches += 1;
        }
        let (val_loss, val_acc) = probe.evaluate(val)?;
        history.push((epoch, total / batches as f64, val_loss, val_acc));
        if val_loss < best.0 {
            best = (val_loss, val_acc, epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let epochs_run = history.len();
    Ok(ProbeReport {
        accuracy: best.1,
        best_epoch: best.2,
        epochs_run,
        train_pairs: train.len(),
        val_pairs: val.len(),
        history,
    })
}
