//! Multi-head, edge-typed attention over speaking-turn graphs and the
//! graph encoder built from it.
//!
//! For an edge `k → i` of type `τ` and head `h`, the source and destination
//! embeddings are projected with the head's slice of `W_τ`, scored as
//! `β = LeakyReLU(e_τ[h] · [W_τ x_k ∥ W_τ x_i])`, normalized with a softmax
//! over the in-neighborhood of `i`, and aggregated as `Σ_k α · W_τ x_k`.
//! Heads are concatenated back to the hidden width. Updates are synchronous.
//! Nodes with no in-edges receive a zero update.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{
    build_turn_graphs, build_video_graph, EdgeType, FeatureDims, GraphInputs, NodeKind, TurnGraph, VideoRecord,
};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{init_params, Init, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// `LeakyReLU(attn · [src ∥ dst])` for one head; `attn` has length
/// `src.len() + dst.len()`.
pub fn raw_score(attn: &[f64], proj_src: &[f64], proj_dst: &[f64], slope: f64) -> Result<f64> {
    if attn.len() != proj_src.len() + proj_dst.len() {
        return shape_err("raw_score", &[&[attn.len()], &[proj_src.len(), proj_dst.len()]]);
    }
    let dot: f64 = attn
        .iter()
        .zip(proj_src.iter().chain(proj_dst))
        .map(|(a, x)| a * x)
        .sum();
    Ok(if dot > 0.0 { dot } else { slope * dot })
}

/// Softmax of one node's raw scores over its in-neighborhood.
pub fn normalize_scores(node: usize, betas: &[f64]) -> Result<Vec<f64>> {
    if betas.is_empty() {
        return Err(Error::EmptyNeighborhood(node));
    }
    let mut out = betas.to_vec();
    crate::tape::softmax_in_place(&mut out);
    Ok(out)
}

/// Edge list over the rows of a node matrix, grouped by type for batched
/// projection.
#[derive(Clone, Debug)]
pub struct EdgeSet {
    num_nodes: usize,
    kinds: Vec<NodeKind>,
    edges: Vec<(usize, usize, EdgeType)>,
    kind_rows: BTreeMap<NodeKind, Vec<usize>>,
    local: Vec<usize>,
    groups: Vec<(EdgeType, Vec<usize>)>,
}

impl EdgeSet {
    pub fn new(kinds: Vec<NodeKind>, edges: Vec<(usize, usize, EdgeType)>) -> Self {
        let mut kind_rows: BTreeMap<NodeKind, Vec<usize>> = BTreeMap::new();
        let mut local = vec![0; kinds.len()];
        for (r, &k) in kinds.iter().enumerate() {
            let rows = kind_rows.entry(k).or_default();
            local[r] = rows.len();
            rows.push(r);
        }
        let mut by_type: BTreeMap<EdgeType, Vec<usize>> = BTreeMap::new();
        for (i, &(s, d, ty)) in edges.iter().enumerate() {
            debug_assert_eq!(ty, EdgeType::new(kinds[s], kinds[d]));
            by_type.entry(ty).or_default().push(i);
        }
        Self {
            num_nodes: kinds.len(),
            kinds,
            edges,
            kind_rows,
            local,
            groups: by_type.into_iter().collect(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    pub fn edges(&self) -> &[(usize, usize, EdgeType)] {
        &self.edges
    }

    /// Edge indices in the order attention rows are produced.
    pub fn order(&self) -> Vec<usize> {
        self.groups.iter().flat_map(|(_, e)| e.iter().copied()).collect()
    }

    /// Keeps only edges whose destination satisfies `keep`.
    pub fn restrict_dst(&self, keep: impl Fn(usize) -> bool) -> EdgeSet {
        let edges = self.edges.iter().copied().filter(|&(_, d, _)| keep(d)).collect();
        EdgeSet::new(self.kinds.clone(), edges)
    }

    pub(crate) fn groups(&self) -> &[(EdgeType, Vec<usize>)] {
        &self.groups
    }

    pub(crate) fn kind_rows(&self, k: NodeKind) -> &[usize] {
        self.kind_rows.get(&k).map_or(&[], |v| v.as_slice())
    }

    pub(crate) fn local(&self, row: usize) -> usize {
        self.local[row]
    }
}

/// Constant `[heads, hidden]` matrix spreading a per-head weight over that head's columns.
pub(crate) fn head_expander(heads: usize, hidden: usize) -> Tensor {
    let dh = hidden / heads;
    let mut t = Tensor::zeros(heads, hidden);
    for h in 0..heads {
        for j in 0..dh {
            t.set(h, h * dh + j, 1.0);
        }
    }
    t
}

#[derive(Clone, Debug)]
struct TypeParams {
    weight: ParamId,
    attn: ParamId,
}

/// Per-edge-type value projections `W_τ` (`[hidden, hidden]`, head `h` owns
/// columns `h·d_head..(h+1)·d_head`) and attention vectors `e_τ`
/// (`[heads, 2·d_head]`).
#[derive(Clone, Debug)]
pub struct AttentionLayerParams {
    pub hidden: usize,
    pub heads: usize,
    types: BTreeMap<EdgeType, TypeParams>,
}

/// Result of one attention layer.
pub struct LayerOutput {
    pub x: Var,
    /// `[edges, heads]`, row `r` belongs to edge `edge_order[r]`.
    pub alpha: Var,
    pub edge_order: Vec<usize>,
}

impl AttentionLayerParams {
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
                op: "attention_layer",
                msg: format!("{heads} heads do not divide hidden width {hidden}"),
            });
        }
        let dh = hidden / heads;
        let mut map = BTreeMap::new();
        for &ty in types {
            let weight = store.add(format!("{prefix}{ty}.w"), init_params(hidden, hidden, Init::GlorotUniform, rng));
            let attn = store.add(format!("{prefix}{ty}.e"), init_params(heads, 2 * dh, Init::GlorotUniform, rng));
            map.insert(ty, TypeParams { weight, attn });
        }
        Ok(Self {
            hidden,
            heads,
            types: map,
        })
    }

    pub fn d_head(&self) -> usize {
        self.hidden / self.heads
    }

    /// `(W_τ, e_τ)` parameter ids.
    pub fn type_params(&self, ty: EdgeType) -> Result<(ParamId, ParamId)> {
        self.types
            .get(&ty)
            .map(|p| (p.weight, p.attn))
            .ok_or_else(|| Error::UnknownEdgeType(ty.to_string()))
    }

    pub fn edge_types(&self) -> impl Iterator<Item = EdgeType> + '_ {
        self.types.keys().copied()
    }

    /// One synchronous update of every node in `x` (`[nodes, hidden]`).
    pub fn forward(&self, tape: &mut Tape, x: Var, edges: &EdgeSet) -> Result<LayerOutput> {
        let shape = tape.shape(x);
        if shape != [edges.num_nodes(), self.hidden] {
            return shape_err("attention_layer", &[shape, &[edges.num_nodes(), self.hidden]]);
        }
        let dh = self.d_head();
        let mut betas = Vec::new();
        let mut msgs = Vec::new();
        let mut dst_all = Vec::new();
        for (ty, eidx) in edges.groups() {
            let (w, e) = self.type_params(*ty)?;
            let (w, e) = (tape.param(w), tape.param(e));
            let src_rows = edges.kind_rows(ty.src);
            let xs = tape.gather_rows(x, src_rows)?;
            let qs = tape.matmul(xs, w)?;
            let qd = if ty.dst == ty.src {
                qs
            } else {
                let xd = tape.gather_rows(x, edges.kind_rows(ty.dst))?;
                tape.matmul(xd, w)?
            };
            let e_src = tape.slice_cols(e, 0, dh)?;
            let e_dst = tape.slice_cols(e, dh, dh)?;
            let ss = tape.head_dot(qs, e_src)?;
            let sd = tape.head_dot(qd, e_dst)?;
            let lsrc: Vec<usize> = eidx.iter().map(|&i| edges.local(edges.edges()[i].0)).collect();
            let ldst: Vec<usize> = eidx.iter().map(|&i| edges.local(edges.edges()[i].1)).collect();
            let bs = tape.gather_rows(ss, &lsrc)?;
            let bd = tape.gather_rows(sd, &ldst)?;
            let pre = tape.add(bs, bd)?;
            betas.push(tape.leaky_relu(pre, LEAKY_SLOPE));
            msgs.push(tape.gather_rows(qs, &lsrc)?);
            dst_all.extend(eidx.iter().map(|&i| edges.edges()[i].1));
        }
        let n = edges.num_nodes();
        if betas.is_empty() {
            let x = tape.constant(Tensor::zeros(n, self.hidden));
            let alpha = tape.constant(Tensor::zeros(0, self.heads));
            return Ok(LayerOutput {
                x,
                alpha,
                edge_order: vec![],
            });
        }
        let beta = tape.concat_rows(&betas)?;
        let msg = tape.concat_rows(&msgs)?;
        let alpha = tape.segment_softmax(beta, &dst_all, n)?;
        let expand = tape.constant(head_expander(self.heads, self.hidden));
        let alpha_wide = tape.matmul(alpha, expand)?;
        let weighted = tape.mul(msg, alpha_wide)?;
        let out = tape.segment_sum(weighted, &dst_all, n)?;
        Ok(LayerOutput {
            x: out,
            alpha,
            edge_order: edges.order(),
        })
    }
}

/// How turn or video representations are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorMode {
    /// Learned factorization node per speaking turn.
    Factorized,
    /// One graph and one factorization node for the whole video.
    VideoLevel,
    /// Per-turn graphs without factorization nodes; mean of node embeddings.
    MeanReadout,
}

impl FactorMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "factorized" => Some(Self::Factorized),
            "video_level" => Some(Self::VideoLevel),
            "mean_readout" => Some(Self::MeanReadout),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Factorized => "factorized",
            Self::VideoLevel => "video_level",
            Self::MeanReadout => "mean_readout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dims: FeatureDims,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    /// Link the factorization nodes of different turns to each other.
    pub factor_links: bool,
}

/// Several turn graphs (or one video graph) merged into one node matrix.
///
/// Rows are the modality nodes of each graph in order, followed by one
/// factorization row per graph when factors are included.
pub struct GraphBatch {
    pub x: Var,
    pub edges: EdgeSet,
    /// Modality rows of each graph.
    pub graph_rows: Vec<Vec<usize>>,
    /// Factorization row of each graph (empty without factors).
    pub factor_rows: Vec<usize>,
}

impl GraphBatch {
    pub fn new(tape: &mut Tape, graphs: &[TurnGraph], with_factors: bool, factor_links: bool) -> Result<Self> {
        let mut parts = Vec::new();
        let mut kinds = Vec::new();
        let mut graph_rows = Vec::with_capacity(graphs.len());
        let mut edges = Vec::new();
        for g in graphs {
            let base = kinds.len();
            parts.push(g.embeddings);
            kinds.extend(g.nodes.iter().map(|n| NodeKind::from(n.kind)));
            graph_rows.push((base..base + g.nodes.len()).collect::<Vec<_>>());
            edges.extend(g.edges.iter().map(|e| (base + e.src, base + e.dst, e.ty)));
        }
        let mut factor_rows = Vec::new();
        if with_factors {
            for (gi, g) in graphs.iter().enumerate() {
                let zr = kinds.len();
                parts.push(g.factor);
                kinds.push(NodeKind::Factor);
                factor_rows.push(zr);
                for (local, n) in g.nodes.iter().enumerate() {
                    let r = graph_rows[gi][local];
                    edges.push((r, zr, EdgeType::new(n.kind, NodeKind::Factor)));
                    edges.push((zr, r, EdgeType::new(NodeKind::Factor, n.kind)));
                }
            }
            if factor_links {
                for &a in &factor_rows {
                    for &b in &factor_rows {
                        if a != b {
                            edges.push((a, b, EdgeType::new(NodeKind::Factor, NodeKind::Factor)));
                        }
                    }
                }
            }
        }
        let x = tape.concat_rows(&parts)?;
        Ok(Self {
            x,
            edges: EdgeSet::new(kinds, edges),
            graph_rows,
            factor_rows,
        })
    }
}

/// Input projections, factorization seed, and the stacked attention layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub inputs: GraphInputs,
    pub layers: Vec<AttentionLayerParams>,
}

pub const ENCODER_PREFIX: &str = "encoder.";

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let inputs = GraphInputs::new(store, ENCODER_PREFIX, config.dims, config.hidden, rng);
        let types = EdgeType::turn_graph_types();
        let layers = (0..config.layers)
            .map(|l| {
                AttentionLayerParams::new(
                    store,
                    &format!("{ENCODER_PREFIX}layer{l}."),
                    config.hidden,
                    config.heads,
                    &types,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            inputs,
            layers,
        })
    }

    /// Runs every layer; returns the final node matrix.
    pub fn run(&self, tape: &mut Tape, batch: &GraphBatch) -> Result<Var> {
        let mut x = batch.x;
        for layer in &self.layers {
            x = layer.forward(tape, x, &batch.edges)?.x;
        }
        Ok(x)
    }

    /// One representation row per graph: the final factorization embedding,
    /// or the mean of final modality embeddings for [`FactorMode::MeanReadout`].
    pub fn encode_graphs(&self, tape: &mut Tape, graphs: &[TurnGraph], mode: FactorMode) -> Result<Var> {
        match mode {
            FactorMode::Factorized | FactorMode::VideoLevel => {
                let links = self.config.factor_links && mode == FactorMode::Factorized;
                let batch = GraphBatch::new(tape, graphs, true, links)?;
                let x = self.run(tape, &batch)?;
                tape.gather_rows(x, &batch.factor_rows)
            }
            FactorMode::MeanReadout => {
                let batch = GraphBatch::new(tape, graphs, false, false)?;
                let x = self.run(tape, &batch)?;
                mean_rows_per_graph(tape, x, &batch.graph_rows)
            }
        }
    }

    /// Builds the graphs for `mode` and encodes them: `[turns, hidden]`, or
    /// `[1, hidden]` for the video-level mode.
    pub fn encode_video(&self, tape: &mut Tape, video: &VideoRecord, mode: FactorMode) -> Result<Var> {
        let graphs = self.build_graphs(tape, video, mode)?;
        self.encode_graphs(tape, &graphs, mode)
    }

    pub fn build_graphs(&self, tape: &mut Tape, video: &VideoRecord, mode: FactorMode) -> Result<Vec<TurnGraph>> {
        match mode {
            FactorMode::VideoLevel => Ok(vec![build_video_graph(tape, video, &self.inputs)?]),
            _ => build_turn_graphs(tape, video, &self.inputs),
        }
    }

    /// Final embeddings of every encoder node of `video` (modality rows, then
    /// one factorization row per graph) with the graph structure they came from.
    pub fn encode_nodes(&self, tape: &mut Tape, video: &VideoRecord, mode: FactorMode) -> Result<(Var, EdgeSet)> {
        let graphs = self.build_graphs(tape, video, mode)?;
        let with_factors = mode != FactorMode::MeanReadout;
        let links = self.config.factor_links && mode == FactorMode::Factorized;
        let batch = GraphBatch::new(tape, &graphs, with_factors, links)?;
        let x = self.run(tape, &batch)?;
        Ok((x, batch.edges))
    }

    /// Attention weights of every layer on the video-level graph of `video`,
    /// as `(edges, alpha)` with `alpha` indexed like `edges`.
    pub fn video_attention(
        &self,
        tape: &mut Tape,
        video: &VideoRecord,
    ) -> Result<(TurnGraph, GraphBatch, Vec<Tensor>)> {
        let g = build_video_graph(tape, video, &self.inputs)?;
        let batch = GraphBatch::new(tape, std::slice::from_ref(&g), true, false)?;
        let mut x = batch.x;
        let mut alphas = Vec::new();
        for layer in &self.layers {
            let out = layer.forward(tape, x, &batch.edges)?;
            let a = tape.value(out.alpha);
            let mut by_edge = Tensor::zeros(a.rows(), a.cols());
            for (r, &e) in out.edge_order.iter().enumerate() {
                for h in 0..a.cols() {
                    by_edge.set(e, h, a.get(r, h));
                }
            }
            alphas.push(by_edge);
            x = out.x;
        }
        Ok((g, batch, alphas))
    }
}

/// Mean of each group of rows, stacked as `[groups, cols]`.
pub(crate) fn mean_rows_per_graph(tape: &mut Tape, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
    let rows: Vec<usize> = groups.iter().flatten().copied().collect();
    let seg: Vec<usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, r)| std::iter::repeat_n(g, r.len()))
        .collect();
    let xs = tape.gather_rows(x, &rows)?;
    let sums = tape.segment_sum(xs, &seg, groups.len())?;
    let inv: Vec<f64> = groups.iter().map(|r| 1.0 / r.len().max(1) as f64).collect();
    let inv = tape.constant(Tensor::new(groups.len(), 1, inv)?);
    tape.mul(sums, inv)
}

/// One attention update of a single graph (its factorization node included).
pub fn update_nodes(tape: &mut Tape, g: &TurnGraph, layer: &AttentionLayerParams) -> Result<TurnGraph> {
    let batch = GraphBatch::new(tape, std::slice::from_ref(g), true, false)?;
    let out = layer.forward(tape, batch.x, &batch.edges)?;
    let embeddings = tape.gather_rows(out.x, &batch.graph_rows[0])?;
    let factor = tape.gather_rows(out.x, &batch.factor_rows)?;
    Ok(TurnGraph {
        turn_index: g.turn_index,
        nodes: g.nodes.clone(),
        embeddings,
        factor,
        edges: g.edges.clone(),
    })
}
