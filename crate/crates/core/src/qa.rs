//! Question answering over the encoded video graph.
//!
//! The question and the two candidate answers are encoded by separate LSTMs
//! and attached as nodes to the encoder's output graph. Two GATv2
//! convolutions mix them with the modality and factorization nodes, and a
//! two-layer network scores `[question ∥ answer]` for each answer position.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{head_expander, EdgeSet, Encoder, FactorMode, LEAKY_SLOPE};
use crate::error::{shape_err, Error, Result};
use crate::graph::{EdgeType, NodeKind, QAItem, VideoRecord};
use crate::optim::AdamWState;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{init_params, Init, Tensor};
use crate::util::rng_for;

pub const QA_PREFIX: &str = "qa.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Pretrained encoder, weights frozen.
    Frozen,
    /// Encoder trained jointly from scratch, no contrastive stage.
    SupervisedScratch,
}

impl FinetuneMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "frozen" => Some(Self::Frozen),
            "supervised_scratch" => Some(Self::SupervisedScratch),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Frozen => "frozen",
            Self::SupervisedScratch => "supervised_scratch",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphScope {
    TurnLevel,
    VideoLevel,
}

impl GraphScope {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "turn_level" => Some(Self::TurnLevel),
            "video_level" => Some(Self::VideoLevel),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TurnLevel => "turn_level",
            Self::VideoLevel => "video_level",
        }
    }

    pub fn factor_mode(self) -> FactorMode {
        match self {
            Self::TurnLevel => FactorMode::Factorized,
            Self::VideoLevel => FactorMode::VideoLevel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAConfig {
    /// Node width; must match the encoder.
    pub hidden: usize,
    pub heads: usize,
    pub conv_layers: usize,
    pub head_hidden: usize,
    pub max_seq_len: usize,
    pub scope: GraphScope,
}

/// Single-layer LSTM; gates are laid out `[input, forget, cell, output]`.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input: usize,
    pub hidden: usize,
    w_x: ParamId,
    w_h: ParamId,
    bias: ParamId,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_x = store.add(format!("{prefix}w_x"), init_params(input, 4 * hidden, Init::GlorotUniform, rng));
        let w_h = store.add(format!("{prefix}w_h"), init_params(hidden, 4 * hidden, Init::GlorotUniform, rng));
        let mut b = Tensor::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            b.set(0, j, 1.0);
        }
        let bias = store.add(format!("{prefix}b"), b);
        Self {
            input,
            hidden,
            w_x,
            w_h,
            bias,
        }
    }

    /// Final hidden state `[1, hidden]` after reading at most `max_len` tokens.
    pub fn encode_sequence(&self, tape: &mut Tape, tokens: &[Vec<f64>], max_len: usize) -> Result<Var> {
        let tokens = &tokens[..tokens.len().min(max_len)];
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(t) = tokens.iter().find(|t| t.len() != self.input) {
            return Err(Error::Dim {
                modality: "token",
                expected: self.input,
                got: t.len(),
            });
        }
        let h = self.hidden;
        let xs = tape.constant(Tensor::from_rows(tokens, self.input)?);
        let (w_x, w_h, b) = (tape.param(self.w_x), tape.param(self.w_h), tape.param(self.bias));
        let xw = tape.matmul(xs, w_x)?;
        let pre_all = tape.add(xw, b)?;
        let mut state: Option<(Var, Var)> = None;
        for t in 0..tokens.len() {
            let mut pre = tape.gather_rows(pre_all, &[t])?;
            if let Some((hp, _)) = state {
                let rec = tape.matmul(hp, w_h)?;
                pre = tape.add(pre, rec)?;
            }
            let i = tape.slice_cols(pre, 0, h)?;
            let i = tape.sigmoid(i);
            let g = tape.slice_cols(pre, 2 * h, h)?;
            let g = tape.tanh(g);
            let o = tape.slice_cols(pre, 3 * h, h)?;
            let o = tape.sigmoid(o);
            let mut c = tape.mul(i, g)?;
            if let Some((_, cp)) = state {
                let f = tape.slice_cols(pre, h, h)?;
                let f = tape.sigmoid(f);
                let kept = tape.mul(f, cp)?;
                c = tape.add(c, kept)?;
            }
            let tc = tape.tanh(c);
            let hn = tape.mul(o, tc)?;
            state = Some((hn, c));
        }
        Ok(state.expect("nonempty").0)
    }
}

/// `a · LeakyReLU([src ∥ dst] W)` for one head, with `w` of shape
/// `[src.len() + dst.len(), a.len()]`.
pub fn gatv2_score(w: &Tensor, attn: &[f64], src: &[f64], dst: &[f64], slope: f64) -> Result<f64> {
    if w.rows() != src.len() + dst.len() || w.cols() != attn.len() {
        return shape_err("gatv2_score", &[w.shape(), &[src.len() + dst.len(), attn.len()]]);
    }
    let mut score = 0.0;
    for (j, a) in attn.iter().enumerate() {
        let z: f64 = src.iter().chain(dst).enumerate().map(|(r, x)| x * w.get(r, j)).sum();
        score += a * if z > 0.0 { z } else { slope * z };
    }
    Ok(score)
}

#[derive(Clone, Debug)]
struct ConvType {
    w_src: ParamId,
    w_dst: ParamId,
    attn: ParamId,
}

/// GATv2 convolution with per-edge-type transforms `W_τ = [W_src; W_dst]`
/// and attention vectors `a_τ` (`[heads, d_head]`). Messages are
/// `x_src W_src`; the update is residual.
#[derive(Clone, Debug)]
pub struct GatConv {
    pub hidden: usize,
    pub heads: usize,
    types: std::collections::BTreeMap<EdgeType, ConvType>,
}

impl GatConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        heads: usize,
        types: &[EdgeType],
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::InvalidArgument {
                op: "gatv2_layer",
                msg: format!("{heads} heads do not divide hidden width {hidden}"),
            });
        }
        let mut map = std::collections::BTreeMap::new();
        for &ty in types {
            let w_src = store.add(format!("{prefix}{ty}.w_src"), init_params(hidden, hidden, Init::GlorotUniform, rng));
            let w_dst = store.add(format!("{prefix}{ty}.w_dst"), init_params(hidden, hidden, Init::GlorotUniform, rng));
            let attn = store.add(
                format!("{prefix}{ty}.a"),
                init_params(heads, hidden / heads, Init::GlorotUniform, rng),
            );
            map.insert(ty, ConvType { w_src, w_dst, attn });
        }
        Ok(Self {
            hidden,
            heads,
            types: map,
        })
    }

    fn type_params(&self, ty: EdgeType) -> Result<&ConvType> {
        self.types.get(&ty).ok_or_else(|| Error::UnknownEdgeType(ty.to_string()))
    }

    /// Raw score of head `head` for an edge of type `ty`, from current parameter values.
    pub fn score(&self, store: &ParamStore, ty: EdgeType, head: usize, src: &[f64], dst: &[f64]) -> Result<f64> {
        let p = self.type_params(ty)?;
        let dh = self.hidden / self.heads;
        if head >= self.heads {
            return Err(Error::InvalidArgument {
                op: "gatv2_score",
                msg: format!("head {head} out of range"),
            });
        }
        let (ws, wd) = (store.value(p.w_src), store.value(p.w_dst));
        let mut w = Tensor::zeros(2 * self.hidden, dh);
        for r in 0..self.hidden {
            for j in 0..dh {
                w.set(r, j, ws.get(r, head * dh + j));
                w.set(self.hidden + r, j, wd.get(r, head * dh + j));
            }
        }
        gatv2_score(&w, store.value(p.attn).row_slice(head), src, dst, LEAKY_SLOPE)
    }

    /// `x + Σ_k α_ik · x_k W_src` over the in-edges of each node.
    pub fn forward(&self, tape: &mut Tape, x: Var, edges: &EdgeSet) -> Result<Var> {
        let shape = tape.shape(x);
        if shape != [edges.num_nodes(), self.hidden] {
            return shape_err("gatv2_layer", &[shape, &[edges.num_nodes(), self.hidden]]);
        }
        let mut scores = Vec::new();
        let mut msgs = Vec::new();
        let mut dst_all = Vec::new();
        for (ty, eidx) in edges.groups() {
            let p = self.type_params(*ty)?;
            let (ws, wd, a) = (tape.param(p.w_src), tape.param(p.w_dst), tape.param(p.attn));
            let xs = tape.gather_rows(x, edges.kind_rows(ty.src))?;
            let ps = tape.matmul(xs, ws)?;
            let xd = tape.gather_rows(x, edges.kind_rows(ty.dst))?;
            let pd = tape.matmul(xd, wd)?;
            let lsrc: Vec<usize> = eidx.iter().map(|&i| edges.local(edges.edges()[i].0)).collect();
            let ldst: Vec<usize> = eidx.iter().map(|&i| edges.local(edges.edges()[i].1)).collect();
            let m = tape.gather_rows(ps, &lsrc)?;
            let d = tape.gather_rows(pd, &ldst)?;
            let z = tape.add(m, d)?;
            let z = tape.leaky_relu(z, LEAKY_SLOPE);
            scores.push(tape.head_dot(z, a)?);
            msgs.push(m);
            dst_all.extend(eidx.iter().map(|&i| edges.edges()[i].1));
        }
        if scores.is_empty() {
            return Ok(x);
        }
        let n = edges.num_nodes();
        let s = tape.concat_rows(&scores)?;
        let m = tape.concat_rows(&msgs)?;
        let alpha = tape.segment_softmax(s, &dst_all, n)?;
        let expand = tape.constant(head_expander(self.heads, self.hidden));
        let wide = tape.matmul(alpha, expand)?;
        let weighted = tape.mul(m, wide)?;
        let agg = tape.segment_sum(weighted, &dst_all, n)?;
        tape.add(x, agg)
    }
}

/// Every ordered pair of node kinds.
pub fn qa_edge_types() -> Vec<EdgeType> {
    NodeKind::ALL
        .iter()
        .flat_map(|&a| NodeKind::ALL.iter().map(move |&b| EdgeType::new(a, b)))
        .collect()
}

/// Two-layer scoring network with sigmoid output.
#[derive(Clone, Debug)]
pub struct ScoreHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ScoreHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add(format!("{prefix}w1"), init_params(input, hidden, Init::GlorotUniform, rng)),
            b1: store.add(format!("{prefix}b1"), init_params(1, hidden, Init::Zeros, rng)),
            w2: store.add(format!("{prefix}w2"), init_params(hidden, 1, Init::GlorotUniform, rng)),
            b2: store.add(format!("{prefix}b2"), init_params(1, 1, Init::Zeros, rng)),
        }
    }

    /// `[rows, input]` → `[rows, 1]` in (0, 1).
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            tape.param(self.w1),
            tape.param(self.b1),
            tape.param(self.w2),
            tape.param(self.b2),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        let o = tape.add(o, b2)?;
        Ok(tape.sigmoid(o))
    }
}

/// Encoder output for one video, reused across fine-tuning steps when the
/// encoder is frozen.
#[derive(Clone, Debug)]
pub struct EncodedVideo {
    pub x: Tensor,
    pub edges: EdgeSet,
}

impl EncodedVideo {
    pub fn compute(store: &ParamStore, encoder: &Encoder, video: &VideoRecord, scope: GraphScope) -> Result<Self> {
        let mut tape = Tape::new(store);
        let (x, edges) = encoder.encode_nodes(&mut tape, video, scope.factor_mode())?;
        Ok(Self {
            x: tape.value(x).clone(),
            edges,
        })
    }
}

/// Encoder graph extended with a question node and two answer nodes (the
/// last three rows), all mutually linked and linked to every encoder node,
/// plus a self-loop on every node.
pub fn qa_graph(encoded: &EdgeSet) -> EdgeSet {
    let n = encoded.num_nodes();
    let mut kinds = encoded.kinds().to_vec();
    kinds.extend([NodeKind::Question, NodeKind::Answer, NodeKind::Answer]);
    let mut edges = encoded.edges().to_vec();
    let ty = |s: usize, d: usize| EdgeType::new(kinds[s], kinds[d]);
    for qa in n..n + 3 {
        for other in 0..n + 3 {
            if other != qa {
                edges.push((qa, other, ty(qa, other)));
                if other < n {
                    edges.push((other, qa, ty(other, qa)));
                }
            }
        }
    }
    for i in 0..n + 3 {
        edges.push((i, i, ty(i, i)));
    }
    EdgeSet::new(kinds, edges)
}

/// LSTM encoders, GATv2 convolutions, and the scoring head.
#[derive(Clone, Debug)]
pub struct QAModel {
    pub config: QAConfig,
    pub question: Lstm,
    pub answer: Lstm,
    pub convs: Vec<GatConv>,
    pub head: ScoreHead,
}

impl QAModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: QAConfig, token_dim: usize, rng: &mut R) -> Result<Self> {
        let d = config.hidden;
        let question = Lstm::new(store, &format!("{QA_PREFIX}question."), token_dim, d, rng);
        let answer = Lstm::new(store, &format!("{QA_PREFIX}answer."), token_dim, d, rng);
        let types = qa_edge_types();
        let convs = (0..config.conv_layers)
            .map(|l| GatConv::new(store, &format!("{QA_PREFIX}conv{l}."), d, config.heads, &types, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = ScoreHead::new(store, &format!("{QA_PREFIX}head."), 2 * d, config.head_hidden, rng);
        Ok(Self {
            config,
            question,
            answer,
            convs,
            head,
        })
    }

    /// Scores `[2, 1]` for the two answer positions; the correct answer sits
    /// at `correct_pos`. Uses `frozen` encoder output when given, otherwise
    /// runs the encoder on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        encoder: &Encoder,
        video: &VideoRecord,
        item: &QAItem,
        correct_pos: usize,
        frozen: Option<&EncodedVideo>,
    ) -> Result<Var> {
        if correct_pos > 1 {
            return Err(Error::InvalidArgument {
                op: "qa_forward",
                msg: format!("answer position {correct_pos} not in {{0, 1}}"),
            });
        }
        let (x_enc, enc_edges) = match frozen {
            Some(e) => (tape.constant(e.x.clone()), e.edges.clone()),
            None => encoder.encode_nodes(tape, video, self.config.scope.factor_mode())?,
        };
        let (a0, a1) = if correct_pos == 0 {
            (&item.correct, &item.incorrect)
        } else {
            (&item.incorrect, &item.correct)
        };
        let len = self.config.max_seq_len;
        let q = self.question.encode_sequence(tape, &item.question, len)?;
        let a0 = self.answer.encode_sequence(tape, a0, len)?;
        let a1 = self.answer.encode_sequence(tape, a1, len)?;
        let n = enc_edges.num_nodes();
        let full = qa_graph(&enc_edges);
        let last = full.restrict_dst(|d| d >= n);
        let mut x = tape.concat_rows(&[x_enc, q, a0, a1])?;
        for (l, conv) in self.convs.iter().enumerate() {
            let edges = if l + 1 == self.convs.len() { &last } else { &full };
            x = conv.forward(tape, x, edges)?;
        }
        let qq = tape.gather_rows(x, &[n, n])?;
        let aa = tape.gather_rows(x, &[n + 1, n + 2])?;
        let pair = tape.concat_cols(&[qq, aa])?;
        self.head.forward(tape, pair)
    }
}

/// One QA item: `videos[video].qa[item]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub video: usize,
    pub item: usize,
}

/// Every QA item of the given videos.
pub fn qa_examples(videos: &[VideoRecord], indices: &[usize]) -> Vec<QAExample> {
    indices
        .iter()
        .flat_map(|&v| (0..videos[v].qa.len()).map(move |item| QAExample { video: v, item }))
        .collect()
}

/// Position of the correct answer for `ex` in `epoch`: a fair coin drawn
/// from `(seed, epoch, video, item)`.
pub fn correct_position(seed: u64, epoch: u64, ex: QAExample) -> usize {
    let mut rng = rng_for(seed, &[epoch, ex.video as u64, ex.item as u64]);
    usize::from(rng.random_bool(0.5))
}

fn targets(correct_pos: usize) -> Tensor {
    let mut t = Tensor::zeros(2, 1);
    t.set(correct_pos, 0, 1.0);
    t
}

/// MSE of one example against the one-hot target at `correct_pos`.
pub fn example_loss(
    tape: &mut Tape,
    model: &QAModel,
    encoder: &Encoder,
    video: &VideoRecord,
    item: &QAItem,
    correct_pos: usize,
    frozen: Option<&EncodedVideo>,
) -> Result<Var> {
    let scores = model.forward(tape, encoder, video, item, correct_pos, frozen)?;
    let t = tape.constant(targets(correct_pos));
    tape.mse(scores, t)
}

/// Shared inputs of fine-tuning and evaluation.
pub struct QAContext<'a> {
    pub encoder: &'a Encoder,
    pub model: &'a QAModel,
    pub videos: &'a [VideoRecord],
    /// Per-video encoder output, indexed like `videos`, in frozen mode.
    pub frozen: Option<&'a [EncodedVideo]>,
}

impl QAContext<'_> {
    fn lookup(&self, ex: QAExample) -> Result<(&VideoRecord, &QAItem, Option<&EncodedVideo>)> {
        let video = self.videos.get(ex.video).ok_or_else(|| Error::InvalidArgument {
            op: "qa_example",
            msg: format!("video {} out of range", ex.video),
        })?;
        let item = video.qa.get(ex.item).ok_or_else(|| Error::InvalidArgument {
            op: "qa_example",
            msg: format!("item {} out of range for `{}`", ex.item, video.video_id),
        })?;
        Ok((video, item, self.frozen.map(|f| &f[ex.video])))
    }

    /// Scores `(correct, incorrect)` of one example.
    pub fn score_pair(&self, store: &ParamStore, ex: QAExample) -> Result<(f64, f64)> {
        let (video, item, frozen) = self.lookup(ex)?;
        let mut tape = Tape::new(store);
        let s = self.model.forward(&mut tape, self.encoder, video, item, 0, frozen)?;
        let v = tape.value(s);
        Ok((v.get(0, 0), v.get(1, 0)))
    }
}

/// One optimizer step on the mean loss of `batch`; `positions[i]` places the
/// correct answer of `batch[i]`. Returns the mean loss.
pub fn finetune_step(
    store: &mut ParamStore,
    opt: &mut AdamWState,
    ctx: &QAContext,
    batch: &[QAExample],
    positions: &[usize],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if positions.len() != batch.len() {
        return Err(Error::InvalidArgument {
            op: "finetune_step",
            msg: format!("{} positions for {} examples", positions.len(), batch.len()),
        });
    }
    store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (&ex, &pos) in batch.iter().zip(positions) {
        let (video, item, frozen) = ctx.lookup(ex)?;
        let mut tape = Tape::new(store);
        let loss = example_loss(&mut tape, ctx.model, ctx.encoder, video, item, pos, frozen)?;
        total += tape.value(loss).item();
        let grads = tape.backward(loss)?;
        store.accumulate(&grads, scale);
    }
    opt.step(store)?;
    Ok(total * scale)
}

/// Fraction of examples whose correct answer outscores the incorrect one
/// (ties count as wrong).
pub fn evaluate_accuracy(store: &ParamStore, ctx: &QAContext, examples: &[QAExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for &ex in examples {
        let (c, i) = ctx.score_pair(store, ex)?;
        if c > i {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}
