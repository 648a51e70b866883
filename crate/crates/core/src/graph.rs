//! Videos, speaking turns and their graphs.
//!
//! Each speaking turn becomes a fully connected directed graph over its
//! modality nodes (one node per modality per time step), plus one
//! factorization node linked to every modality node in both directions.
//! Factorization links are implicit in [`TurnGraph`]: they exist for every
//! surviving modality node and cannot be removed by augmentations.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{init_params, Init, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityKind {
    Text,
    Vision,
    Acoustic,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 3] = [Self::Text, Self::Vision, Self::Acoustic];

    pub fn name(self) -> &'static str {
        match self {
            Self::Text => "text",
            Self::Vision => "vision",
            Self::Acoustic => "acoustic",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Every node role that can appear in a graph, including the Q/A nodes added
/// during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Text,
    Vision,
    Acoustic,
    Factor,
    Question,
    Answer,
}

impl NodeKind {
    pub const ALL: [NodeKind; 6] = [
        Self::Text,
        Self::Vision,
        Self::Acoustic,
        Self::Factor,
        Self::Question,
        Self::Answer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Text => "text",
            Self::Vision => "vision",
            Self::Acoustic => "acoustic",
            Self::Factor => "factor",
            Self::Question => "question",
            Self::Answer => "answer",
        }
    }

    pub fn is_modality(self) -> bool {
        matches!(self, Self::Text | Self::Vision | Self::Acoustic)
    }
}

impl From<ModalityKind> for NodeKind {
    fn from(m: ModalityKind) -> Self {
        match m {
            ModalityKind::Text => Self::Text,
            ModalityKind::Vision => Self::Vision,
            ModalityKind::Acoustic => Self::Acoustic,
        }
    }
}

/// Edge type, fixed by the kinds of its endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeType {
    pub src: NodeKind,
    pub dst: NodeKind,
}

impl EdgeType {
    pub fn new(src: impl Into<NodeKind>, dst: impl Into<NodeKind>) -> Self {
        Self {
            src: src.into(),
            dst: dst.into(),
        }
    }

    /// The 16 types of speaking-turn graphs: 9 modality pairs, modality→factor
    /// and factor→modality for each modality, and factor→factor.
    pub fn turn_graph_types() -> Vec<EdgeType> {
        let kinds = [NodeKind::Text, NodeKind::Vision, NodeKind::Acoustic, NodeKind::Factor];
        let mut out = Vec::with_capacity(16);
        for &s in &kinds {
            for &d in &kinds {
                out.push(EdgeType::new(s, d));
            }
        }
        out
    }
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.src.name(), self.dst.name())
    }
}

/// One speaking turn: the speaker and per-modality feature rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker_id: String,
    pub text: Vec<Vec<f64>>,
    pub vision: Vec<Vec<f64>>,
    pub acoustic: Vec<Vec<f64>>,
}

impl Turn {
    pub fn modality(&self, m: ModalityKind) -> &[Vec<f64>] {
        match m {
            ModalityKind::Text => &self.text,
            ModalityKind::Vision => &self.vision,
            ModalityKind::Acoustic => &self.acoustic,
        }
    }

    pub fn modality_mut(&mut self, m: ModalityKind) -> &mut Vec<Vec<f64>> {
        match m {
            ModalityKind::Text => &mut self.text,
            ModalityKind::Vision => &mut self.vision,
            ModalityKind::Acoustic => &mut self.acoustic,
        }
    }

    /// Total modality nodes in this turn.
    pub fn node_count(&self) -> usize {
        self.text.len() + self.vision.len() + self.acoustic.len()
    }
}

/// A question with one correct and one incorrect answer, each a sequence of
/// token embeddings. Which answer slot holds the correct one is decided at
/// training time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub question: Vec<Vec<f64>>,
    pub correct: Vec<Vec<f64>>,
    pub incorrect: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub qa: Vec<QAItem>,
}

/// Feature widths per modality, plus the token-embedding width of Q/A sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub text: usize,
    pub vision: usize,
    pub acoustic: usize,
    pub token: usize,
}

impl FeatureDims {
    pub fn modality(&self, m: ModalityKind) -> usize {
        match m {
            ModalityKind::Text => self.text,
            ModalityKind::Vision => self.vision,
            ModalityKind::Acoustic => self.acoustic,
        }
    }
}

fn check_rows(rows: &[Vec<f64>], expected: usize, name: &'static str) -> Result<()> {
    for r in rows {
        if r.len() != expected {
            return Err(Error::Dim {
                modality: name,
                expected,
                got: r.len(),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "validate",
                msg: format!("non-finite {name} feature"),
            });
        }
    }
    Ok(())
}

impl VideoRecord {
    /// Checks turn/QA invariants and, when given, feature widths.
    pub fn validate(&self, dims: Option<&FeatureDims>) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::EmptyVideo(self.video_id.clone()));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.node_count() == 0 {
                return Err(Error::EmptyTurn {
                    video: self.video_id.clone(),
                    turn: i,
                });
            }
            if let Some(d) = dims {
                for m in ModalityKind::ALL {
                    check_rows(turn.modality(m), d.modality(m), m.name())?;
                }
            }
        }
        for item in &self.qa {
            for (seq, name) in [
                (&item.question, "question"),
                (&item.correct, "correct"),
                (&item.incorrect, "incorrect"),
            ] {
                if seq.is_empty() {
                    return Err(Error::InvalidArgument {
                        op: "validate",
                        msg: format!("empty {name} sequence in video `{}`", self.video_id),
                    });
                }
                if let Some(d) = dims {
                    check_rows(seq, d.token, "token")?;
                }
            }
        }
        Ok(())
    }

    /// Modality-node count of each turn.
    pub fn turn_sizes(&self) -> Vec<usize> {
        self.turns.iter().map(Turn::node_count).collect()
    }
}

/// Modality-specific input projections and the shared factorization seed.
#[derive(Clone, Debug)]
pub struct GraphInputs {
    pub dims: FeatureDims,
    pub hidden: usize,
    weights: [ParamId; 3],
    biases: [ParamId; 3],
    factor_init: ParamId,
}

impl GraphInputs {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: FeatureDims,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for m in ModalityKind::ALL {
            let d = dims.modality(m);
            weights.push(store.add(
                format!("{prefix}input.{}.w", m.name()),
                init_params(d, hidden, Init::GlorotUniform, rng),
            ));
            biases.push(store.add(
                format!("{prefix}input.{}.b", m.name()),
                init_params(1, hidden, Init::Zeros, rng),
            ));
        }
        let factor_init = store.add(
            format!("{prefix}factor_init"),
            init_params(1, hidden, Init::GlorotUniform, rng),
        );
        Self {
            dims,
            hidden,
            weights: [weights[0], weights[1], weights[2]],
            biases: [biases[0], biases[1], biases[2]],
            factor_init,
        }
    }

    pub fn factor_init(&self) -> ParamId {
        self.factor_init
    }

    pub fn projection(&self, m: ModalityKind) -> (ParamId, ParamId) {
        (self.weights[m.index()], self.biases[m.index()])
    }
}

/// A modality node: `id` is its position in the video's turn-major node order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GraphNode {
    pub id: usize,
    pub kind: ModalityKind,
    pub turn: usize,
}

/// A directed modality→modality edge between node positions of a [`TurnGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub ty: EdgeType,
}

/// Endpoint of a factorization link.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endpoint {
    Node(usize),
    Factor,
}

#[derive(Clone, Debug)]
pub struct TurnGraph {
    pub turn_index: usize,
    pub nodes: Vec<GraphNode>,
    /// `[nodes.len(), hidden]`, row `i` embeds `nodes[i]`.
    pub embeddings: Var,
    /// `[1, hidden]`.
    pub factor: Var,
    pub edges: Vec<Edge>,
}

impl TurnGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn modality_edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn factor_edge_count(&self) -> usize {
        2 * self.nodes.len()
    }

    /// Both directions of every factorization link.
    pub fn factor_edges(&self) -> impl Iterator<Item = (Endpoint, Endpoint, EdgeType)> + '_ {
        self.nodes.iter().enumerate().flat_map(|(i, n)| {
            [
                (Endpoint::Node(i), Endpoint::Factor, EdgeType::new(n.kind, NodeKind::Factor)),
                (Endpoint::Factor, Endpoint::Node(i), EdgeType::new(NodeKind::Factor, n.kind)),
            ]
        })
    }

    /// Checks the structural invariants against the tape holding the embeddings.
    pub fn validate(&self, tape: &Tape) -> Result<()> {
        let bad = |msg: String| Error::InvalidArgument { op: "turn_graph", msg };
        if self.nodes.is_empty() {
            return Err(bad("no modality nodes".into()));
        }
        let emb = tape.shape(self.embeddings);
        let fac = tape.shape(self.factor);
        if emb[0] != self.nodes.len() || fac != [1, emb[1]] {
            return Err(bad(format!("embedding shapes {emb:?} / {fac:?} for {} nodes", self.nodes.len())));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.edges {
            if e.src >= self.nodes.len() || e.dst >= self.nodes.len() || e.src == e.dst {
                return Err(bad(format!("invalid edge {e:?}")));
            }
            if e.ty != EdgeType::new(self.nodes[e.src].kind, self.nodes[e.dst].kind) {
                return Err(bad(format!("edge {e:?} has the wrong type")));
            }
            if !seen.insert((e.src, e.dst)) {
                return Err(bad(format!("duplicate edge {e:?}")));
            }
        }
        Ok(())
    }
}

/// All ordered pairs of distinct positions.
pub(crate) fn complete_edges(nodes: &[GraphNode]) -> Vec<Edge> {
    let n = nodes.len();
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1));
    for s in 0..n {
        for d in 0..n {
            if s != d {
                edges.push(Edge {
                    src: s,
                    dst: d,
                    ty: EdgeType::new(nodes[s].kind, nodes[d].kind),
                });
            }
        }
    }
    edges
}

/// Projects every modality row of the video into the shared space.
/// Returns the projected `[N, hidden]` matrix and the node list in the same
/// row order (turn-major, then text, vision, acoustic within a turn).
fn project_video(tape: &mut Tape, video: &VideoRecord, inputs: &GraphInputs) -> Result<(Var, Vec<GraphNode>)> {
    video.validate(Some(&inputs.dims))?;
    let mut per_modality: Vec<Option<Var>> = Vec::with_capacity(3);
    let mut offsets = [0usize; 3];
    let mut total = 0;
    for m in ModalityKind::ALL {
        let rows: Vec<Vec<f64>> = video
            .turns
            .iter()
            .flat_map(|t| t.modality(m).iter().cloned())
            .collect();
        offsets[m.index()] = total;
        total += rows.len();
        if rows.is_empty() {
            per_modality.push(None);
            continue;
        }
        let x = tape.constant(Tensor::from_rows(&rows, inputs.dims.modality(m))?);
        let (w, b) = inputs.projection(m);
        let (w, b) = (tape.param(w), tape.param(b));
        let xw = tape.matmul(x, w)?;
        per_modality.push(Some(tape.add(xw, b)?));
    }
    let parts: Vec<Var> = per_modality.iter().flatten().copied().collect();
    let all = tape.concat_rows(&parts)?;

    // map turn-major node order onto the modality-major rows of `all`
    let mut order = Vec::with_capacity(total);
    let mut nodes = Vec::with_capacity(total);
    let mut cursor = offsets;
    for (ti, turn) in video.turns.iter().enumerate() {
        for m in ModalityKind::ALL {
            for _ in 0..turn.modality(m).len() {
                order.push(cursor[m.index()]);
                cursor[m.index()] += 1;
                nodes.push(GraphNode {
                    id: nodes.len(),
                    kind: m,
                    turn: ti,
                });
            }
        }
    }
    let x = tape.gather_rows(all, &order)?;
    Ok((x, nodes))
}

/// One graph per speaking turn, each with the shared learned factorization seed.
pub fn build_turn_graphs(tape: &mut Tape, video: &VideoRecord, inputs: &GraphInputs) -> Result<Vec<TurnGraph>> {
    let (x, nodes) = project_video(tape, video, inputs)?;
    let factor = tape.param(inputs.factor_init());
    let mut graphs = Vec::with_capacity(video.turns.len());
    let mut start = 0;
    for (ti, turn) in video.turns.iter().enumerate() {
        let n = turn.node_count();
        let idx: Vec<usize> = (start..start + n).collect();
        let turn_nodes = nodes[start..start + n].to_vec();
        let embeddings = tape.gather_rows(x, &idx)?;
        graphs.push(TurnGraph {
            turn_index: ti,
            edges: complete_edges(&turn_nodes),
            nodes: turn_nodes,
            embeddings,
            factor,
        });
        start += n;
    }
    Ok(graphs)
}

/// A single fully connected graph over every node of the video, ignoring
/// turn boundaries, with one factorization node.
pub fn build_video_graph(tape: &mut Tape, video: &VideoRecord, inputs: &GraphInputs) -> Result<TurnGraph> {
    let (x, nodes) = project_video(tape, video, inputs)?;
    let factor = tape.param(inputs.factor_init());
    Ok(TurnGraph {
        turn_index: 0,
        edges: complete_edges(&nodes),
        nodes,
        embeddings: x,
        factor,
    })
}

/// Arithmetic mean of the modality-node embeddings (the factorization node
/// is excluded).
pub fn mean_factor_readout(tape: &mut Tape, g: &TurnGraph) -> Result<Var> {
    tape.col_mean(g.embeddings)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeCountMode {
    /// One fully connected graph over all nodes of the video.
    VideoLevel,
    /// Per-turn complete graphs, factorization links, and factor↔factor links.
    Factorized,
}

/// Directed edge total for a video with the given per-turn node counts.
pub fn count_edges(turn_sizes: &[usize], mode: EdgeCountMode) -> Result<usize> {
    if turn_sizes.is_empty() || turn_sizes.contains(&0) {
        return Err(Error::InvalidArgument {
            op: "count_edges",
            msg: format!("turn sizes must be nonempty and positive, got {turn_sizes:?}"),
        });
    }
    let total: usize = turn_sizes.iter().sum();
    let s = turn_sizes.len();
    Ok(match mode {
        EdgeCountMode::VideoLevel => total * (total - 1),
        EdgeCountMode::Factorized => {
            turn_sizes.iter().map(|n| n * (n - 1)).sum::<usize>() + 2 * total + s * (s - 1)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn dims() -> FeatureDims {
        FeatureDims {
            text: 3,
            vision: 2,
            acoustic: 4,
            token: 3,
        }
    }

    fn turn(nt: usize, nv: usize, na: usize, speaker: &str) -> Turn {
        let rows = |n: usize, d: usize, base: f64| (0..n).map(|i| (0..d).map(|j| base + (i * d + j) as f64 * 0.1).collect()).collect();
        Turn {
            speaker_id: speaker.into(),
            text: rows(nt, 3, 0.5),
            vision: rows(nv, 2, -0.3),
            acoustic: rows(na, 4, 0.2),
        }
    }

    fn video(turns: Vec<Turn>) -> VideoRecord {
        VideoRecord {
            video_id: "v".into(),
            turns,
            qa: vec![],
        }
    }

    fn inputs(store: &mut ParamStore, seed: u64) -> GraphInputs {
        GraphInputs::new(store, "enc.", dims(), 8, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn six_node_turn_counts() {
        let mut store = ParamStore::new();
        let inp = inputs(&mut store, 1);
        let mut tape = Tape::new(&store);
        let gs = build_turn_graphs(&mut tape, &video(vec![turn(2, 2, 2, "a")]), &inp).unwrap();
        assert_eq!(gs[0].node_count(), 6);
        assert_eq!(gs[0].modality_edge_count(), 30);
        assert_eq!(gs[0].factor_edge_count(), 12);
        // unordered pairs are half the directed count
        assert_eq!(gs[0].modality_edge_count() / 2, 15);
        gs[0].validate(&tape).unwrap();
    }

    #[test]
    fn single_node_turn() {
        let mut store = ParamStore::new();
        let inp = inputs(&mut store, 1);
        let mut tape = Tape::new(&store);
        let gs = build_turn_graphs(&mut tape, &video(vec![turn(0, 1, 0, "a")]), &inp).unwrap();
        assert_eq!(gs[0].modality_edge_count(), 0);
        assert_eq!(gs[0].factor_edge_count(), 2);
        assert_eq!(gs[0].factor_edges().count(), 2);
    }

    #[test]
    fn construction_is_deterministic() {
        let v = video(vec![turn(1, 2, 1, "a"), turn(2, 0, 1, "b")]);
        let build = || {
            let mut store = ParamStore::new();
            let inp = inputs(&mut store, 9);
            let mut tape = Tape::new(&store);
            let gs = build_turn_graphs(&mut tape, &v, &inp).unwrap();
            gs.iter()
                .map(|g| (tape.value(g.embeddings).clone(), g.edges.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn empty_inputs_rejected() {
        let mut store = ParamStore::new();
        let inp = inputs(&mut store, 1);
        let mut tape = Tape::new(&store);
        assert!(matches!(build_turn_graphs(&mut tape, &video(vec![]), &inp), Err(Error::EmptyVideo(_))));
        let v = video(vec![turn(1, 0, 0, "a"), turn(0, 0, 0, "b")]);
        assert!(matches!(build_turn_graphs(&mut tape, &v, &inp), Err(Error::EmptyTurn { turn: 1, .. })));
        let mut bad = video(vec![turn(1, 1, 0, "a")]);
        bad.turns[0].vision[0].push(1.0);
        assert!(matches!(
            build_turn_graphs(&mut tape, &bad, &inp),
            Err(Error::Dim { modality: "vision", expected: 2, got: 3 })
        ));
    }

    #[test]
    fn projection_width_is_hidden_regardless_of_feature_dim() {
        let mut store = ParamStore::new();
        let inp = inputs(&mut store, 2);
        let mut tape = Tape::new(&store);
        for g in build_turn_graphs(&mut tape, &video(vec![turn(1, 1, 1, "a"), turn(0, 0, 3, "a")]), &inp).unwrap() {
            assert_eq!(tape.shape(g.embeddings)[1], 8);
        }
    }

    #[test]
    fn video_graph_spans_all_turns() {
        let mut store = ParamStore::new();
        let inp = inputs(&mut store, 1);
        let mut tape = Tape::new(&store);
        let v = video(vec![turn(1, 1, 1, "a"), turn(1, 1, 1, "b")]);
        let g = build_video_graph(&mut tape, &v, &inp).unwrap();
        assert_eq!(g.node_count(), 6);
        assert_eq!(g.modality_edge_count(), 30);
        let per_turn: usize = build_turn_graphs(&mut tape, &v, &inp).unwrap().iter().map(|g| g.node_count()).sum();
        assert_eq!(per_turn, g.node_count());
    }

    #[test]
    fn one_turn_video_graph_matches_turn_graph() {
        let mut store = ParamStore::new();
        let inp = inputs(&mut store, 1);
        let mut tape = Tape::new(&store);
        let v = video(vec![turn(2, 1, 1, "a")]);
        let g = build_video_graph(&mut tape, &v, &inp).unwrap();
        let t = &build_turn_graphs(&mut tape, &v, &inp).unwrap()[0];
        assert_eq!(g.nodes, t.nodes);
        assert_eq!(g.edges, t.edges);
        assert_eq!(tape.value(g.embeddings), tape.value(t.embeddings));
    }

    #[test]
    fn mean_readout_cases() {
        let mut tape = Tape::detached();
        let nodes = |n: usize| (0..n).map(|i| GraphNode { id: i, kind: ModalityKind::Text, turn: 0 }).collect::<Vec<_>>();
        let mk = |tape: &mut Tape, rows: Vec<Vec<f64>>| {
            let n = rows.len();
            let e = tape.constant(Tensor::from_rows(&rows, 2).unwrap());
            let f = tape.constant(Tensor::zeros(1, 2));
            TurnGraph {
                turn_index: 0,
                edges: complete_edges(&nodes(n)),
                nodes: nodes(n),
                embeddings: e,
                factor: f,
            }
        };
        let g = mk(&mut tape, vec![vec![0.0, 2.0], vec![2.0, 0.0]]);
        let m = mean_factor_readout(&mut tape, &g).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 1.0]);
        let g = mk(&mut tape, vec![vec![0.5, -1.5]; 3]);
        let m = mean_factor_readout(&mut tape, &g).unwrap();
        assert_eq!(tape.value(m).data(), &[0.5, -1.5]);
        let a = mk(&mut tape, vec![vec![1.0, 2.0], vec![3.0, 5.0], vec![-2.0, 0.25]]);
        let b = mk(&mut tape, vec![vec![-2.0, 0.25], vec![1.0, 2.0], vec![3.0, 5.0]]);
        let (ma, mb) = (mean_factor_readout(&mut tape, &a).unwrap(), mean_factor_readout(&mut tape, &b).unwrap());
        let (va, vb) = (tape.value(ma).data(), tape.value(mb).data());
        assert!(va.iter().zip(vb).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn count_edges_worked_examples() {
        assert_eq!(count_edges(&[3, 3], EdgeCountMode::VideoLevel).unwrap(), 30);
        assert_eq!(count_edges(&[3, 3], EdgeCountMode::Factorized).unwrap(), 26);
        for n in 1..10 {
            assert!(count_edges(&[n], EdgeCountMode::Factorized).unwrap() >= count_edges(&[n], EdgeCountMode::VideoLevel).unwrap());
        }
        assert!(count_edges(&[], EdgeCountMode::Factorized).is_err());
    }
}
