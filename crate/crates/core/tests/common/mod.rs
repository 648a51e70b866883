//! Shared helpers: central finite-difference gradient checks and small
//! random fixtures.
#![allow(dead_code)]

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use turngraph::attention::{AttentionLayerParams, Encoder, EncoderConfig, FactorMode, GraphBatch};
use turngraph::augment::{make_views, AugmentationConfig};
use turngraph::contrastive::{video_loss, ContrastiveConfig};
use turngraph::graph::{build_turn_graphs, EdgeType, FeatureDims, GraphInputs, QAItem, Turn, VideoRecord};
use turngraph::params::ParamStore;
use turngraph::qa::{example_loss, GraphScope, Lstm, QAConfig, QAModel};
use turngraph::tape::{Tape, Var};
use turngraph::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Inputs closer than this to a ReLU-family kink are resampled.
pub const KINK_MARGIN: f64 = 1e-3;
/// `|a - n| / max(|a|, |n|, FLOOR)`: below the floor the error is absolute.
pub const FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub enum Outcome {
    /// Largest relative error and the number of coordinates compared.
    Checked(f64, usize),
    Kink,
}

/// Compares the tape gradient of `f` against central differences for every
/// coordinate of `inputs` and up to `param_coords` randomly chosen trainable
/// parameter coordinates of `store`.
pub fn gradcheck<F>(store: &ParamStore, inputs: &[Tensor], param_coords: usize, rng: &mut impl Rng, f: F) -> Outcome
where
    F: Fn(&mut Tape, &[Var]) -> turngraph::Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars).unwrap();
        tape.value(loss).item()
    };
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars).unwrap();
    if tape.kink_margin() < KINK_MARGIN {
        return Outcome::Kink;
    }
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(store, &plus) - eval(store, &minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
            count += 1;
        }
    }

    let coords: Vec<(usize, usize)> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id.index(), i)))
        .collect();
    let chosen = sample(rng, coords.len(), param_coords.min(coords.len()));
    let ids: Vec<_> = store.ids().collect();
    for c in chosen {
        let (pi, i) = coords[c];
        let id = ids[pi];
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
        let mut plus = store.clone();
        plus.value_mut(id).data_mut()[i] += FD_STEP;
        let mut minus = store.clone();
        minus.value_mut(id).data_mut()[i] -= FD_STEP;
        let numeric = (eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
        count += 1;
    }
    Outcome::Checked(worst, count)
}

/// Reduces any output to a scalar with fixed random weights so every
/// output coordinate contributes.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> turngraph::Result<Var> {
    let s = tape.shape(out).to_vec();
    let w = tape.constant(normal(&mut rng(seed ^ 0xABCD), s[0], s[1]));
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

pub type CheckFn = fn(u64) -> Result<(f64, usize), String>;

/// Runs `setup` with fresh randomness until it lands away from kinks.
fn retry(seed: u64, setup: impl Fn(&mut ChaCha8Rng) -> Outcome) -> Result<(f64, usize), String> {
    for attempt in 0..20u64 {
        let mut r = rng(seed.wrapping_mul(1000).wrapping_add(attempt));
        if let Outcome::Checked(e, n) = setup(&mut r) {
            return if e <= REL_TOL {
                Ok((e, n))
            } else {
                Err(format!("relative error {e:.3e}"))
            };
        }
    }
    Err("no kink-free sample in 20 attempts".into())
}

fn unary(seed: u64, positive: bool, op: fn(&mut Tape, Var) -> turngraph::Result<Var>) -> Result<(f64, usize), String> {
    retry(seed, |r| {
        let mut x = normal(r, 3, 4);
        if positive {
            x = x.map(|v| v.abs() + 0.5);
        }
        gradcheck(&ParamStore::new(), &[x], 0, r, |t, v| {
            let y = op(t, v[0])?;
            project(t, y, seed)
        })
    })
}

fn binary(seed: u64, b_shape: (usize, usize), away_from_zero: bool, op: fn(&mut Tape, Var, Var) -> turngraph::Result<Var>) -> Result<(f64, usize), String> {
    retry(seed, |r| {
        let a = normal(r, 3, 4);
        let mut b = normal(r, b_shape.0, b_shape.1);
        if away_from_zero {
            b = b.map(|v| v.signum() * (v.abs() + 0.5));
        }
        gradcheck(&ParamStore::new(), &[a, b], 0, r, |t, v| {
            let y = op(t, v[0], v[1])?;
            project(t, y, seed)
        })
    })
}

/// Every differentiable op, by name.
pub fn op_checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("add", |s| binary(s, (3, 4), false, |t, a, b| t.add(a, b))),
        ("add_row_broadcast", |s| binary(s, (1, 4), false, |t, a, b| t.add(a, b))),
        ("add_col_broadcast", |s| binary(s, (3, 1), false, |t, a, b| t.add(a, b))),
        ("sub", |s| binary(s, (3, 4), false, |t, a, b| t.sub(a, b))),
        ("sub_scalar_broadcast", |s| binary(s, (1, 1), false, |t, a, b| t.sub(a, b))),
        ("mul", |s| binary(s, (3, 4), false, |t, a, b| t.mul(a, b))),
        ("mul_col_broadcast", |s| binary(s, (3, 1), false, |t, a, b| t.mul(a, b))),
        ("div", |s| binary(s, (3, 4), true, |t, a, b| t.div(a, b))),
        ("div_row_broadcast", |s| binary(s, (1, 4), true, |t, a, b| t.div(a, b))),
        ("matmul", |s| binary(s, (4, 2), false, |t, a, b| t.matmul(a, b))),
        ("cosine_sim", |s| binary(s, (3, 4), false, |t, a, b| t.cosine_sim(a, b))),
        ("mse", |s| binary(s, (3, 4), false, |t, a, b| t.mse(a, b))),
        ("head_dot", |s| binary(s, (2, 2), false, |t, a, b| t.head_dot(a, b))),
        ("scale", |s| unary(s, false, |t, a| Ok(t.scale(a, -1.7)))),
        ("transpose", |s| unary(s, false, |t, a| Ok(t.transpose(a)))),
        ("leaky_relu", |s| unary(s, false, |t, a| Ok(t.leaky_relu(a, 0.2)))),
        ("relu", |s| unary(s, false, |t, a| Ok(t.relu(a)))),
        ("sigmoid", |s| unary(s, false, |t, a| Ok(t.sigmoid(a)))),
        ("tanh", |s| unary(s, false, |t, a| Ok(t.tanh(a)))),
        ("exp", |s| unary(s, false, |t, a| Ok(t.exp(a)))),
        ("log", |s| unary(s, true, |t, a| Ok(t.log(a)))),
        ("softmax_rows", |s| unary(s, false, |t, a| Ok(t.softmax_rows(a)))),
        ("segment_softmax", |s| unary(s, false, |t, a| t.segment_softmax(a, &[1, 0, 1], 3))),
        ("segment_sum", |s| unary(s, false, |t, a| t.segment_sum(a, &[2, 0, 2], 3))),
        ("gather_rows", |s| unary(s, false, |t, a| t.gather_rows(a, &[2, 0, 2, 1]))),
        ("concat_rows", |s| {
            unary(s, false, |t, a| {
                let b = t.scale(a, 2.0);
                t.concat_rows(&[a, b, a])
            })
        }),
        ("concat_cols", |s| {
            unary(s, false, |t, a| {
                let b = t.exp(a);
                t.concat_cols(&[b, a])
            })
        }),
        ("slice_cols", |s| unary(s, false, |t, a| t.slice_cols(a, 1, 2))),
        ("sum", |s| unary(s, false, |t, a| Ok(t.sum(a)))),
        ("mean", |s| unary(s, false, |t, a| t.mean(a))),
        ("row_sum", |s| unary(s, false, |t, a| Ok(t.row_sum(a)))),
        ("col_mean", |s| unary(s, false, |t, a| t.col_mean(a))),
        ("l2norm_rows", |s| unary(s, false, |t, a| Ok(t.l2norm_rows(a)))),
    ]
}

pub fn dims() -> FeatureDims {
    FeatureDims {
        text: 3,
        vision: 2,
        acoustic: 2,
        token: 3,
    }
}

/// A video with the given per-turn node counts (spread over the three
/// modalities) and random features, alternating two speakers.
pub fn video(sizes: &[usize], dims: FeatureDims, r: &mut impl Rng) -> VideoRecord {
    let turns = sizes
        .iter()
        .enumerate()
        .map(|(s, &n)| {
            let counts = [n.div_ceil(3), (n + 1) / 3, n / 3];
            Turn {
                speaker_id: format!("s{}", s % 2),
                text: normal(r, counts[0], dims.text).to_rows(),
                vision: normal(r, counts[1], dims.vision).to_rows(),
                acoustic: normal(r, counts[2], dims.acoustic).to_rows(),
            }
        })
        .collect();
    VideoRecord {
        video_id: format!("v{}", r.random::<u32>()),
        turns,
        qa: vec![QAItem {
            question: normal(r, 3, dims.token).to_rows(),
            correct: normal(r, 2, dims.token).to_rows(),
            incorrect: normal(r, 4, dims.token).to_rows(),
        }],
    }
}

pub fn encoder(store: &mut ParamStore, hidden: usize, heads: usize, layers: usize, r: &mut impl Rng) -> Encoder {
    let cfg = EncoderConfig {
        dims: dims(),
        hidden,
        heads,
        layers,
        factor_links: true,
    };
    Encoder::new(store, cfg, r).unwrap()
}

/// Composite forwards with parameter gradients.
pub fn composite_checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("attention_layer", |seed| {
            retry(seed, |r| {
                let mut store = ParamStore::new();
                let inputs = GraphInputs::new(&mut store, "in.", dims(), 8, r);
                let layer =
                    AttentionLayerParams::new(&mut store, "layer.", 8, 2, &EdgeType::turn_graph_types(), r).unwrap();
                let v = video(&[3, 2], dims(), r);
                let x = normal(r, 7, 8);
                gradcheck(&store, &[x], 40, r, |t, vars| {
                    let graphs = build_turn_graphs(t, &v, &inputs)?;
                    let batch = GraphBatch::new(t, &graphs, true, true)?;
                    let out = layer.forward(t, vars[0], &batch.edges)?;
                    project(t, out.x, seed)
                })
            })
        }),
        ("contrastive_loss", |seed| {
            retry(seed, |r| {
                let z1 = normal(r, 3, 5);
                let z2 = normal(r, 3, 5);
                gradcheck(&ParamStore::new(), &[z1, z2], 0, r, |t, v| {
                    Ok(video_loss(t, v[0], v[1], &ContrastiveConfig::default())?.loss)
                })
            })
        }),
        ("encoder_contrastive", |seed| {
            retry(seed, |r| {
                let mut store = ParamStore::new();
                let enc = encoder(&mut store, 8, 2, 2, r);
                let v = video(&[3, 4, 2], dims(), r);
                let aug_seed = r.random::<u64>();
                gradcheck(&store, &[], 40, r, |t, _| {
                    let mut ar = rng(aug_seed);
                    let graphs = enc.build_graphs(t, &v, FactorMode::Factorized)?;
                    let (mut a, mut b) = (vec![], vec![]);
                    for g in &graphs {
                        let p = make_views(t, g, &AugmentationConfig::default(), &mut ar)?;
                        a.push(p.first);
                        b.push(p.second);
                    }
                    let z1 = enc.encode_graphs(t, &a, FactorMode::Factorized)?;
                    let z2 = enc.encode_graphs(t, &b, FactorMode::Factorized)?;
                    Ok(video_loss(t, z1, z2, &ContrastiveConfig::default())?.loss)
                })
            })
        }),
        ("lstm", |seed| {
            retry(seed, |r| {
                let mut store = ParamStore::new();
                let lstm = Lstm::new(&mut store, "lstm.", 3, 4, r);
                let tokens = normal(r, 5, 3);
                gradcheck(&store, &[], 40, r, |t, _| {
                    let h = lstm.encode_sequence(t, &tokens.to_rows(), 25)?;
                    project(t, h, seed)
                })
            })
        }),
        ("qa_head", |seed| {
            retry(seed, |r| {
                let mut store = ParamStore::new();
                let enc = encoder(&mut store, 4, 2, 1, r);
                let cfg = QAConfig {
                    hidden: 4,
                    heads: 2,
                    conv_layers: 2,
                    head_hidden: 4,
                    max_seq_len: 25,
                    scope: GraphScope::TurnLevel,
                };
                let model = QAModel::new(&mut store, cfg, dims().token, r).unwrap();
                let v = video(&[2, 3], dims(), r);
                let pos = r.random_range(0..2);
                gradcheck(&store, &[], 40, r, |t, _| example_loss(t, &model, &enc, &v, &v.qa[0], pos, None))
            })
        }),
    ]
}

/// Directed edges of the factorized layout enumerated from first principles:
/// every ordered pair of distinct nodes (modality nodes tagged by turn, then
/// one `z` per turn) is tested against the connection rule.
pub fn brute_force_factorized(sizes: &[usize]) -> usize {
    #[derive(Clone, Copy, PartialEq)]
    enum N {
        M(usize),
        Z(usize),
    }
    let mut nodes = Vec::new();
    for (s, &n) in sizes.iter().enumerate() {
        nodes.extend(std::iter::repeat_n(N::M(s), n));
    }
    nodes.extend((0..sizes.len()).map(N::Z));
    let mut count = 0;
    for (i, a) in nodes.iter().enumerate() {
        for (j, b) in nodes.iter().enumerate() {
            if i == j {
                continue;
            }
            let connected = match (*a, *b) {
                (N::M(s), N::M(t)) => s == t,
                (N::M(s), N::Z(t)) | (N::Z(s), N::M(t)) => s == t,
                (N::Z(_), N::Z(_)) => true,
            };
            count += connected as usize;
        }
    }
    count
}

/// Ordered pairs of distinct nodes in one fully connected graph.
pub fn brute_force_video_level(sizes: &[usize]) -> usize {
    let n: usize = sizes.iter().sum();
    (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).count()
}

/// Directed edges in the graphs the library actually builds for a video with
/// these turn sizes, including the factorization links and `z↔z` links.
pub fn constructed_factorized(sizes: &[usize], r: &mut ChaCha8Rng) -> usize {
    let mut store = ParamStore::new();
    let inputs = GraphInputs::new(&mut store, "", dims(), 4, r);
    let v = video(sizes, dims(), r);
    let mut tape = Tape::new(&store);
    let graphs = build_turn_graphs(&mut tape, &v, &inputs).unwrap();
    GraphBatch::new(&mut tape, &graphs, true, true).unwrap().edges.edges().len()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Scalar-loop contrastive loss over per-turn rows of two views: positive is
/// the same turn in the other view, denominator sums both views' other turns,
/// optionally plus the positive. Averaged over turns and both anchors.
pub fn oracle_video_loss(z1: &[Vec<f64>], z2: &[Vec<f64>], tau: f64, include_positive: bool) -> f64 {
    let s = z1.len();
    let mut total = 0.0;
    for (anchor, other) in [(z1, z2), (z2, z1)] {
        for i in 0..s {
            let pos = (cos(&anchor[i], &other[i]) / tau).exp();
            let mut den = if include_positive { pos } else { 0.0 };
            for j in (0..s).filter(|&j| j != i) {
                den += (cos(&anchor[i], &anchor[j]) / tau).exp();
                den += (cos(&anchor[i], &other[j]) / tau).exp();
            }
            total += -(pos / den).ln();
        }
    }
    total / (2 * s) as f64
}

/// Structural checks on an augmented view `out` of `g`: the factorization node
/// is the same variable with the same value, every surviving node came from
/// `g` and keeps both of its factorization edges, surviving rows are either
/// untouched or (for masking) zeroed, and the type invariants hold.
pub fn check_augmented(tape: &Tape, g: &turngraph::graph::TurnGraph, out: &turngraph::graph::TurnGraph) -> Result<(), String> {
    use turngraph::graph::Endpoint;
    out.validate(tape).map_err(|e| e.to_string())?;
    if out.factor != g.factor || tape.value(out.factor) != tape.value(g.factor) {
        return Err("factorization embedding changed".into());
    }
    if out.turn_index != g.turn_index {
        return Err("turn index changed".into());
    }
    let before = tape.value(g.embeddings);
    let after = tape.value(out.embeddings);
    for (i, n) in out.nodes.iter().enumerate() {
        let Some(j) = g.nodes.iter().position(|m| m == n) else {
            return Err(format!("node {n:?} is not from the input"));
        };
        let row = after.row_slice(i);
        if row != before.row_slice(j) && row.iter().any(|&x| x != 0.0) {
            return Err(format!("node {n:?} was re-embedded"));
        }
        let links = out
            .factor_edges()
            .filter(|(a, b, _)| matches!((a, b), (Endpoint::Node(k), Endpoint::Factor) | (Endpoint::Factor, Endpoint::Node(k)) if *k == i))
            .count();
        if links != 2 {
            return Err(format!("node {n:?} has {links} factorization edges"));
        }
    }
    Ok(())
}
