//! Edge-count savings of per-turn graphs and cross-turn attention in the
//! fully connected baseline.

use serde::{Deserialize, Serialize};

use crate::attention::Encoder;
use crate::error::{Error, Result};
use crate::graph::{count_edges, EdgeCountMode, NodeKind, VideoRecord};
use crate::params::ParamStore;
use crate::tape::Tape;

/// Relative edge saving of per-turn graphs over one fully connected graph.
pub fn edge_reduction(turn_sizes: &[usize]) -> Result<f64> {
    let full = count_edges(turn_sizes, EdgeCountMode::VideoLevel)? as f64;
    let fact = count_edges(turn_sizes, EdgeCountMode::Factorized)? as f64;
    if full == 0.0 {
        return Ok(0.0);
    }
    Ok((full - fact) / full)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeBucket {
    pub label: String,
    pub videos: usize,
    /// Mean relative reduction; NaN for an empty bucket.
    pub mean_reduction: f64,
}

/// Buckets by turn count: `≤3`, `4`, `5`, `≥6`.
pub fn analyze_edges(videos: &[VideoRecord]) -> Result<Vec<EdgeBucket>> {
    let labels = ["<=3", "4", "5", ">=6"];
    let mut sums = [0.0; 4];
    let mut counts = [0usize; 4];
    for v in videos {
        let s = v.turns.len();
        let b = match s {
            0..=3 => 0,
            4 => 1,
            5 => 2,
            _ => 3,
        };
        sums[b] += edge_reduction(&v.turn_sizes())?;
        counts[b] += 1;
    }
    Ok(labels
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(l, (s, &c))| EdgeBucket {
            label: l.to_string(),
            videos: c,
            mean_reduction: if c == 0 { f64::NAN } else { s / c as f64 },
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub cross_turn_mean: f64,
    pub within_turn_mean: f64,
    /// `(cross / within - 1) · 100`.
    pub ratio_pct: f64,
    pub cross_turn_edges: usize,
    pub within_turn_edges: usize,
    pub videos: usize,
}

/// Mean attention on modality→modality edges that cross a turn boundary
/// versus edges within a turn, over every layer and head of the video-level
/// graph.
pub fn analyze_attention(store: &ParamStore, encoder: &Encoder, videos: &[VideoRecord]) -> Result<AttentionReport> {
    let (mut cross, mut within) = ((0.0, 0usize), (0.0, 0usize));
    let mut used = 0;
    for v in videos.iter().filter(|v| v.turns.len() >= 2) {
        used += 1;
        let mut tape = Tape::new(store);
        let (g, batch, alphas) = encoder.video_attention(&mut tape, v)?;
        for alpha in &alphas {
            for (e, &(s, d, ty)) in batch.edges.edges().iter().enumerate() {
                if ty.src == NodeKind::Factor || ty.dst == NodeKind::Factor {
                    continue;
                }
                let acc = if g.nodes[s].turn == g.nodes[d].turn {
                    &mut within
                } else {
                    &mut cross
                };
                for h in 0..alpha.cols() {
                    acc.0 += alpha.get(e, h);
                    acc.1 += 1;
                }
            }
        }
    }
    if used == 0 || cross.1 == 0 || within.1 == 0 {
        return Err(Error::Analysis(
            "need videos with at least two turns and within-turn edges".into(),
        ));
    }
    let cm = cross.0 / cross.1 as f64;
    let wm = within.0 / within.1 as f64;
    let heads = encoder.config.heads * encoder.layers.len();
    Ok(AttentionReport {
        cross_turn_mean: cm,
        within_turn_mean: wm,
        ratio_pct: (cm / wm - 1.0) * 100.0,
        cross_turn_edges: cross.1 / heads.max(1),
        within_turn_edges: within.1 / heads.max(1),
        videos: used,
    })
}
