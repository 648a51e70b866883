//! Within-video contrastive objective on factorization nodes.
//!
//! For turn `s` with views `z¹ₛ, z²ₛ` and anchor view `a`, the loss is
//!
//! ```text
//! -log  exp(sim(zᵃₛ, z⁻ᵃₛ) / τ)  /  Σ_{s' ≠ s} Σ_{i ∈ {1,2}} exp(sim(zᵃₛ, zⁱₛ') / τ)
//! ```
//!
//! with cosine similarity. By default the denominator holds only the
//! other turns' views; `include_positive_in_denominator` adds the positive
//! term, giving the usual normalized form.

use serde::{Deserialize, Serialize};

use crate::attention::{Encoder, FactorMode};
use crate::augment::{make_views, AugmentationConfig};
use crate::error::{Error, Result};
use crate::graph::VideoRecord;
use crate::optim::AdamWState;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::util::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub include_positive_in_denominator: bool,
    /// Average the loss over both views as anchors (otherwise view 1 only).
    pub symmetric_anchors: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            include_positive_in_denominator: false,
            symmetric_anchors: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Anchor {
    First,
    Second,
}

/// One loss term: the anchor row, the positive pair, and the denominator pairs
/// (indices into the stacked `[z¹; z²]` matrix).
struct Term {
    pos: (usize, usize),
    denom: Vec<(usize, usize)>,
}

fn term(turns: usize, s: usize, anchor: Anchor, cfg: &ContrastiveConfig) -> Term {
    let (a, other) = match anchor {
        Anchor::First => (s, turns + s),
        Anchor::Second => (turns + s, s),
    };
    let mut denom = Vec::with_capacity(2 * turns);
    if cfg.include_positive_in_denominator {
        denom.push((a, other));
    }
    for t in (0..turns).filter(|&t| t != s) {
        denom.push((a, t));
        denom.push((a, turns + t));
    }
    Term { pos: (a, other), denom }
}

/// Evaluates terms over the stacked views. Returns the mean loss and the
/// positive/denominator similarity values.
fn evaluate(tape: &mut Tape, z1: Var, z2: Var, terms: &[Term], tau: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
    let z = tape.concat_rows(&[z1, z2])?;
    let mut left = Vec::new();
    let mut right = Vec::new();
    for t in terms {
        left.push(t.pos.0);
        right.push(t.pos.1);
        for &(a, b) in &t.denom {
            left.push(a);
            right.push(b);
        }
    }
    let zl = tape.gather_rows(z, &left)?;
    let zr = tape.gather_rows(z, &right)?;
    let sims = tape.cosine_sim(zl, zr)?;
    let sim_values = tape.value(sims).data().to_vec();

    let mut pos_idx = Vec::with_capacity(terms.len());
    let mut den_idx = Vec::new();
    let mut den_seg = Vec::new();
    let mut cursor = 0;
    let mut pos_vals = Vec::new();
    let mut neg_vals = Vec::new();
    for (ti, t) in terms.iter().enumerate() {
        pos_idx.push(cursor);
        pos_vals.push(sim_values[cursor]);
        for k in 0..t.denom.len() {
            den_idx.push(cursor + 1 + k);
            den_seg.push(ti);
            if t.denom[k] != t.pos {
                neg_vals.push(sim_values[cursor + 1 + k]);
            }
        }
        cursor += 1 + t.denom.len();
    }
    let pos = tape.gather_rows(sims, &pos_idx)?;
    let scaled = tape.scale(sims, 1.0 / tau);
    let ex = tape.exp(scaled);
    let den_terms = tape.gather_rows(ex, &den_idx)?;
    let den = tape.segment_sum(den_terms, &den_seg, terms.len())?;
    let log_den = tape.log(den);
    let pos_scaled = tape.scale(pos, 1.0 / tau);
    let per_term = tape.sub(log_den, pos_scaled)?;
    let loss = tape.mean(per_term)?;
    Ok((loss, pos_vals, neg_vals))
}

fn check(tape: &Tape, z1: Var, z2: Var, cfg: &ContrastiveConfig) -> Result<usize> {
    if !(cfg.tau > 0.0) {
        return Err(Error::Config {
            key: "contrastive.tau".into(),
            msg: format!("temperature must be positive, got {}", cfg.tau),
        });
    }
    let (s1, s2) = (tape.shape(z1), tape.shape(z2));
    if s1 != s2 {
        return crate::error::shape_err("contrastive", &[s1, s2]);
    }
    Ok(s1[0])
}

/// Loss for turn `s` with the given anchor view; `z1`, `z2` are `[turns, d]`.
pub fn infonce_turn_loss(tape: &mut Tape, z1: Var, z2: Var, s: usize, anchor: Anchor, cfg: &ContrastiveConfig) -> Result<Var> {
    let turns = check(tape, z1, z2, cfg)?;
    if turns < 2 {
        return Err(Error::NoNegatives);
    }
    if s >= turns {
        return Err(Error::InvalidArgument {
            op: "infonce_turn_loss",
            msg: format!("turn {s} out of range for {turns} turns"),
        });
    }
    let t = term(turns, s, anchor, cfg);
    Ok(evaluate(tape, z1, z2, &[t], cfg.tau)?.0)
}

/// Contrastive loss of one video with its similarity statistics.
pub struct VideoLoss {
    /// Mean over turns (and anchors); a constant 0 when skipped.
    pub loss: Var,
    /// Fewer than two turns: nothing to contrast.
    pub skipped: bool,
    pub pos_sim: f64,
    pub neg_sim: f64,
}

pub fn video_loss(tape: &mut Tape, z1: Var, z2: Var, cfg: &ContrastiveConfig) -> Result<VideoLoss> {
    let turns = check(tape, z1, z2, cfg)?;
    if turns < 2 {
        let loss = tape.constant(Tensor::scalar(0.0));
        return Ok(VideoLoss {
            loss,
            skipped: true,
            pos_sim: f64::NAN,
            neg_sim: f64::NAN,
        });
    }
    let anchors: &[Anchor] = if cfg.symmetric_anchors {
        &[Anchor::First, Anchor::Second]
    } else {
        &[Anchor::First]
    };
    let terms: Vec<Term> = anchors
        .iter()
        .flat_map(|&a| (0..turns).map(move |s| (s, a)))
        .map(|(s, a)| term(turns, s, a, cfg))
        .collect();
    let (loss, pos, neg) = evaluate(tape, z1, z2, &terms, cfg.tau)?;
    Ok(VideoLoss {
        loss,
        skipped: false,
        pos_sim: mean(&pos),
        neg_sim: mean(&neg),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub mode: FactorMode,
    pub augmentation: AugmentationConfig,
    pub contrastive: ContrastiveConfig,
}

/// Aggregates of one optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Mean loss over contributing videos (or batches of videos in video-level mode).
    pub loss: f64,
    pub pos_sim: f64,
    pub neg_sim: f64,
    pub contributing: usize,
    pub skipped: usize,
}

/// Per-video views and contrastive loss; `seed` fixes all augmentation draws.
fn video_views_loss(
    tape: &mut Tape,
    encoder: &Encoder,
    video: &VideoRecord,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<VideoLoss> {
    let mut rng = rng_for(seed, &[]);
    let graphs = encoder.build_graphs(tape, video, cfg.mode)?;
    let mut firsts = Vec::with_capacity(graphs.len());
    let mut seconds = Vec::with_capacity(graphs.len());
    for g in &graphs {
        let pair = make_views(tape, g, &cfg.augmentation, &mut rng)?;
        firsts.push(pair.first);
        seconds.push(pair.second);
    }
    let z1 = encoder.encode_graphs(tape, &firsts, cfg.mode)?;
    let z2 = encoder.encode_graphs(tape, &seconds, cfg.mode)?;
    video_loss(tape, z1, z2, &cfg.contrastive)
}

/// Contrastive loss for a batch in video-level mode: each video is one unit
/// and the other videos of the batch supply the negatives.
fn batch_views_loss(
    tape: &mut Tape,
    encoder: &Encoder,
    videos: &[&VideoRecord],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<VideoLoss> {
    let mut rng = rng_for(seed, &[]);
    let mut firsts = Vec::with_capacity(videos.len());
    let mut seconds = Vec::with_capacity(videos.len());
    for v in videos {
        let g = encoder.build_graphs(tape, v, FactorMode::VideoLevel)?.remove(0);
        let pair = make_views(tape, &g, &cfg.augmentation, &mut rng)?;
        firsts.push(pair.first);
        seconds.push(pair.second);
    }
    let mut z1 = Vec::new();
    let mut z2 = Vec::new();
    for (a, b) in firsts.iter().zip(&seconds) {
        z1.push(encoder.encode_graphs(tape, std::slice::from_ref(a), FactorMode::VideoLevel)?);
        z2.push(encoder.encode_graphs(tape, std::slice::from_ref(b), FactorMode::VideoLevel)?);
    }
    let z1 = tape.concat_rows(&z1)?;
    let z2 = tape.concat_rows(&z2)?;
    video_loss(tape, z1, z2, &cfg.contrastive)
}

/// Contrastive loss of `videos` without updating anything.
pub fn evaluate_batch(store: &ParamStore, encoder: &Encoder, videos: &[&VideoRecord], cfg: &PretrainConfig, seed: u64) -> Result<StepMetrics> {
    let mut m = Accum::default();
    if cfg.mode == FactorMode::VideoLevel {
        let mut tape = Tape::new(store);
        let vl = batch_views_loss(&mut tape, encoder, videos, cfg, seed)?;
        let loss = tape.value(vl.loss).item();
        m.add(&vl, loss);
    } else {
        for (i, v) in videos.iter().enumerate() {
            let mut tape = Tape::new(store);
            let vl = video_views_loss(&mut tape, encoder, v, cfg, crate::util::derive_seed(seed, &[i as u64]))?;
            let loss = tape.value(vl.loss).item();
            m.add(&vl, loss);
        }
    }
    Ok(m.finish())
}

#[derive(Default)]
struct Accum {
    loss: f64,
    pos: f64,
    neg: f64,
    n: usize,
    skipped: usize,
}

impl Accum {
    fn add(&mut self, vl: &VideoLoss, loss: f64) {
        if vl.skipped {
            self.skipped += 1;
        } else {
            self.loss += loss;
            self.pos += vl.pos_sim;
            self.neg += vl.neg_sim;
            self.n += 1;
        }
    }

    fn finish(self) -> StepMetrics {
        let k = self.n.max(1) as f64;
        StepMetrics {
            loss: self.loss / k,
            pos_sim: self.pos / k,
            neg_sim: self.neg / k,
            contributing: self.n,
            skipped: self.skipped,
        }
    }
}

/// One optimizer step on the mean contrastive loss of `videos`.
///
/// Skipped videos (fewer than two turns) contribute zero loss to the batch mean.
pub fn pretrain_step(
    store: &mut ParamStore,
    opt: &mut AdamWState,
    encoder: &Encoder,
    videos: &[&VideoRecord],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<StepMetrics> {
    if videos.is_empty() {
        return Err(Error::EmptyDataset);
    }
    store.zero_grad();
    let mut m = Accum::default();
    if cfg.mode == FactorMode::VideoLevel {
        let mut tape = Tape::new(store);
        let vl = batch_views_loss(&mut tape, encoder, videos, cfg, seed)?;
        let loss = tape.value(vl.loss).item();
        m.add(&vl, loss);
        if !vl.skipped {
            let grads = tape.backward(vl.loss)?;
            store.accumulate(&grads, 1.0);
        }
    } else {
        let scale = 1.0 / videos.len() as f64;
        for (i, v) in videos.iter().enumerate() {
            let mut tape = Tape::new(store);
            let vl = video_views_loss(&mut tape, encoder, v, cfg, crate::util::derive_seed(seed, &[i as u64]))?;
            let loss = tape.value(vl.loss).item();
            m.add(&vl, loss);
            if vl.skipped {
                continue;
            }
            let grads = tape.backward(vl.loss)?;
            store.accumulate(&grads, scale);
        }
    }
    opt.step(store)?;
    Ok(m.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stacked(tape: &mut Tape, z1: &[Vec<f64>], z2: &[Vec<f64>]) -> (Var, Var) {
        let d = z1[0].len();
        let a = tape.leaf(Tensor::from_rows(z1, d).unwrap(), true);
        let b = tape.leaf(Tensor::from_rows(z2, d).unwrap(), true);
        (a, b)
    }

    #[test]
    fn identical_vectors_give_ln2() {
        let cfg = ContrastiveConfig { tau: 1.0, ..Default::default() };
        let mut tape = Tape::detached();
        let v = vec![0.3, -1.0, 2.0];
        let (a, b) = stacked(&mut tape, &[v.clone(), v.clone()], &[v.clone(), v]);
        let l = infonce_turn_loss(&mut tape, a, b, 0, Anchor::First, &cfg).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let vl = video_loss(&mut tape, a, b, &cfg).unwrap();
        assert!((tape.value(vl.loss).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_positive_case() {
        // z¹₀ = z²₀ = e₀; both views of turn 1 are e₁: pos sim 1, neg sims 0.
        // -log(e / 2) = ln 2 - 1
        let cfg = ContrastiveConfig { tau: 1.0, ..Default::default() };
        let mut tape = Tape::detached();
        let (a, b) = stacked(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = infonce_turn_loss(&mut tape, a, b, 0, Anchor::First, &cfg).unwrap();
        assert!((tape.value(l).item() - (2f64.ln() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn scale_invariant_and_needs_negatives() {
        let cfg = ContrastiveConfig::default();
        let mut tape = Tape::detached();
        let z1 = vec![vec![1.0, 2.0], vec![-0.5, 0.3], vec![0.2, 0.2]];
        let z2 = vec![vec![0.9, 2.1], vec![-0.4, 0.1], vec![0.5, -0.2]];
        let (a, b) = stacked(&mut tape, &z1, &z2);
        let scaled = |v: &[Vec<f64>]| v.iter().map(|r| r.iter().map(|x| 7.5 * x).collect()).collect::<Vec<Vec<f64>>>();
        let (c, d) = stacked(&mut tape, &scaled(&z1), &scaled(&z2));
        let l1 = video_loss(&mut tape, a, b, &cfg).unwrap().loss;
        let l2 = video_loss(&mut tape, c, d, &cfg).unwrap().loss;
        assert!((tape.value(l1).item() - tape.value(l2).item()).abs() < 1e-12);
        let (e, f) = stacked(&mut tape, &[vec![1.0, 0.0]], &[vec![1.0, 0.0]]);
        assert!(matches!(infonce_turn_loss(&mut tape, e, f, 0, Anchor::First, &cfg), Err(Error::NoNegatives)));
        let vl = video_loss(&mut tape, e, f, &cfg).unwrap();
        assert!(vl.skipped);
        assert_eq!(tape.value(vl.loss).item(), 0.0);
    }

    #[test]
    fn turn_order_does_not_matter() {
        let cfg = ContrastiveConfig::default();
        let mut tape = Tape::detached();
        let z1 = vec![vec![1.0, 2.0], vec![-0.5, 0.3], vec![0.2, 0.7]];
        let z2 = vec![vec![0.9, 2.1], vec![-0.4, 0.1], vec![0.5, -0.2]];
        let (a, b) = stacked(&mut tape, &z1, &z2);
        let r1: Vec<_> = [2, 0, 1].iter().map(|&i| z1[i].clone()).collect();
        let r2: Vec<_> = [2, 0, 1].iter().map(|&i| z2[i].clone()).collect();
        let (c, d) = stacked(&mut tape, &r1, &r2);
        let l1 = video_loss(&mut tape, a, b, &cfg).unwrap().loss;
        let l2 = video_loss(&mut tape, c, d, &cfg).unwrap().loss;
        assert!((tape.value(l1).item() - tape.value(l2).item()).abs() < 1e-12);
    }

    #[test]
    fn standard_form_is_nonnegative() {
        let cfg = ContrastiveConfig {
            include_positive_in_denominator: true,
            ..Default::default()
        };
        let mut tape = Tape::detached();
        // positive strictly dominant: the printed form goes negative, the standard form stays ≥ 0
        let (a, b) = stacked(&mut tape, &[vec![1.0, 0.0], vec![-1.0, 0.05]], &[vec![1.0, 0.01], vec![-1.0, 0.0]]);
        let l = video_loss(&mut tape, a, b, &cfg).unwrap().loss;
        assert!(tape.value(l).item() >= 0.0);
        let printed = video_loss(&mut tape, a, b, &ContrastiveConfig::default()).unwrap().loss;
        assert!(tape.value(printed).item() < 0.0);
    }
}
