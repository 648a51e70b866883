//! Stochastic augmentations of speaking-turn graphs.
//!
//! None of them touch the factorization node: its embedding is carried over
//! unchanged and its links to every surviving modality node remain (they are
//! implicit in [`TurnGraph`]).

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Edge, TurnGraph};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    NodeDrop,
    EdgePerturb,
    NodeMask,
    Subgraph,
}

impl Augmentation {
    pub const ALL: [Augmentation; 4] = [Self::NodeDrop, Self::EdgePerturb, Self::NodeMask, Self::Subgraph];

    pub fn key(self) -> &'static str {
        match self {
            Self::NodeDrop => "node_drop",
            Self::EdgePerturb => "edge_perturb",
            Self::NodeMask => "node_mask",
            Self::Subgraph => "subgraph",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub node_drop: f64,
    pub edge_perturb: f64,
    pub node_mask: f64,
    pub subgraph: f64,
    pub enabled: Vec<Augmentation>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            node_drop: 0.5,
            edge_perturb: 0.5,
            node_mask: 0.5,
            subgraph: 0.5,
            enabled: Augmentation::ALL.to_vec(),
        }
    }
}

impl AugmentationConfig {
    /// Only `aug` enabled, at `ratio`.
    pub fn only(aug: Augmentation, ratio: f64) -> Self {
        let mut cfg = Self {
            enabled: vec![aug],
            ..Default::default()
        };
        cfg.set_ratio(aug, ratio);
        cfg
    }

    pub fn ratio(&self, aug: Augmentation) -> f64 {
        match aug {
            Augmentation::NodeDrop => self.node_drop,
            Augmentation::EdgePerturb => self.edge_perturb,
            Augmentation::NodeMask => self.node_mask,
            Augmentation::Subgraph => self.subgraph,
        }
    }

    pub fn set_ratio(&mut self, aug: Augmentation, ratio: f64) {
        match aug {
            Augmentation::NodeDrop => self.node_drop = ratio,
            Augmentation::EdgePerturb => self.edge_perturb = ratio,
            Augmentation::NodeMask => self.node_mask = ratio,
            Augmentation::Subgraph => self.subgraph = ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for aug in Augmentation::ALL {
            let r = self.ratio(aug);
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config {
                    key: format!("aug.{}", aug.key()),
                    msg: format!("ratio {r} outside [0, 1]"),
                });
            }
        }
        if self.enabled.is_empty() {
            return Err(Error::NoAugmentation);
        }
        Ok(())
    }
}

/// `floor(ratio · n)`, tolerant of representation error in the product.
fn count_for(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Keeps the modality nodes at `keep` (ascending positions) with the edges
/// among them.
fn induced(tape: &mut Tape, g: &TurnGraph, keep: &[usize]) -> Result<TurnGraph> {
    let mut pos = vec![usize::MAX; g.nodes.len()];
    for (new, &old) in keep.iter().enumerate() {
        pos[old] = new;
    }
    let edges = g
        .edges
        .iter()
        .filter(|e| pos[e.src] != usize::MAX && pos[e.dst] != usize::MAX)
        .map(|e| Edge {
            src: pos[e.src],
            dst: pos[e.dst],
            ty: e.ty,
        })
        .collect();
    Ok(TurnGraph {
        turn_index: g.turn_index,
        nodes: keep.iter().map(|&i| g.nodes[i]).collect(),
        embeddings: tape.gather_rows(g.embeddings, keep)?,
        factor: g.factor,
        edges,
    })
}

/// Removes `floor(ratio · n)` uniformly chosen modality nodes and their edges,
/// always leaving at least one.
pub fn node_drop<R: Rng + ?Sized>(tape: &mut Tape, g: &TurnGraph, ratio: f64, rng: &mut R) -> Result<TurnGraph> {
    let n = g.nodes.len();
    let k = count_for(ratio, n).min(n.saturating_sub(1));
    if k == 0 {
        return Ok(g.clone());
    }
    let dropped: HashSet<usize> = sample(rng, n, k).into_iter().collect();
    let keep: Vec<usize> = (0..n).filter(|i| !dropped.contains(i)).collect();
    induced(tape, g, &keep)
}

/// Removes `floor(ratio · E)` uniformly chosen modality→modality edges.
/// Nothing is added: within-turn graphs are already complete.
pub fn edge_perturb<R: Rng + ?Sized>(_tape: &mut Tape, g: &TurnGraph, ratio: f64, rng: &mut R) -> Result<TurnGraph> {
    let e = g.edges.len();
    let k = count_for(ratio, e);
    if k == 0 {
        return Ok(g.clone());
    }
    let removed: HashSet<usize> = sample(rng, e, k).into_iter().collect();
    let mut out = g.clone();
    out.edges = g
        .edges
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed.contains(i))
        .map(|(_, e)| *e)
        .collect();
    Ok(out)
}

/// Zeroes the embeddings of `floor(ratio · n)` uniformly chosen modality nodes.
pub fn node_mask<R: Rng + ?Sized>(tape: &mut Tape, g: &TurnGraph, ratio: f64, rng: &mut R) -> Result<TurnGraph> {
    let n = g.nodes.len();
    let k = count_for(ratio, n);
    if k == 0 {
        return Ok(g.clone());
    }
    let mut mask = vec![1.0; n];
    for i in sample(rng, n, k) {
        mask[i] = 0.0;
    }
    let mask = tape.constant(Tensor::new(n, 1, mask)?);
    let mut out = g.clone();
    out.embeddings = tape.mul(g.embeddings, mask)?;
    Ok(out)
}

/// Random walk over modality edges from a uniform start, collecting distinct
/// nodes until `ceil(ratio · n)` (at least 1) are found or `10 · n` steps
/// have elapsed; returns the induced subgraph.
pub fn subgraph_sample<R: Rng + ?Sized>(tape: &mut Tape, g: &TurnGraph, ratio: f64, rng: &mut R) -> Result<TurnGraph> {
    let n = g.nodes.len();
    let target = ((ratio * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n);
    let mut out_nbrs = vec![Vec::new(); n];
    for e in &g.edges {
        out_nbrs[e.src].push(e.dst);
    }
    let mut current = rng.random_range(0..n);
    let mut visited = vec![false; n];
    visited[current] = true;
    let mut count = 1;
    let mut steps = 0;
    while count < target && steps < 10 * n {
        let nbrs = &out_nbrs[current];
        if nbrs.is_empty() {
            break;
        }
        current = nbrs[rng.random_range(0..nbrs.len())];
        steps += 1;
        if !visited[current] {
            visited[current] = true;
            count += 1;
        }
    }
    if count == n {
        return Ok(g.clone());
    }
    let keep: Vec<usize> = (0..n).filter(|&i| visited[i]).collect();
    induced(tape, g, &keep)
}

pub fn apply<R: Rng + ?Sized>(tape: &mut Tape, g: &TurnGraph, aug: Augmentation, ratio: f64, rng: &mut R) -> Result<TurnGraph> {
    match aug {
        Augmentation::NodeDrop => node_drop(tape, g, ratio, rng),
        Augmentation::EdgePerturb => edge_perturb(tape, g, ratio, rng),
        Augmentation::NodeMask => node_mask(tape, g, ratio, rng),
        Augmentation::Subgraph => subgraph_sample(tape, g, ratio, rng),
    }
}

/// Two augmented views of one turn graph.
#[derive(Clone, Debug)]
pub struct AugmentedPair {
    pub turn_index: usize,
    pub first: TurnGraph,
    pub second: TurnGraph,
}

/// Each view applies one enabled augmentation chosen uniformly, with fresh
/// randomness.
pub fn make_views<R: Rng + ?Sized>(tape: &mut Tape, g: &TurnGraph, cfg: &AugmentationConfig, rng: &mut R) -> Result<AugmentedPair> {
    if cfg.enabled.is_empty() {
        return Err(Error::NoAugmentation);
    }
    let view = |tape: &mut Tape, rng: &mut R| {
        let aug = cfg.enabled[rng.random_range(0..cfg.enabled.len())];
        apply(tape, g, aug, cfg.ratio(aug), rng)
    };
    let first = view(tape, rng)?;
    let second = view(tape, rng)?;
    Ok(AugmentedPair {
        turn_index: g.turn_index,
        first,
        second,
    })
}
