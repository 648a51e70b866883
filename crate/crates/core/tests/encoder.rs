mod common;

use common::{dims, encoder, rng, video};
use turngraph::attention::{AttentionLayerParams, FactorMode, GraphBatch, update_nodes};
use turngraph::graph::{build_turn_graphs, build_video_graph, Edge, EdgeType, GraphInputs, TurnGraph};
use turngraph::params::ParamStore;
use turngraph::tape::Tape;
use turngraph::tensor::Tensor;

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn attention_normalizes_over_each_neighborhood() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let inputs = GraphInputs::new(&mut store, "", dims(), 8, &mut r);
        let layer = AttentionLayerParams::new(&mut store, "l.", 8, 4, &EdgeType::turn_graph_types(), &mut r).unwrap();
        let v = video(&[4, 1, 6], dims(), &mut r);
        let mut tape = Tape::new(&store);
        let graphs = build_turn_graphs(&mut tape, &v, &inputs).unwrap();
        let batch = GraphBatch::new(&mut tape, &graphs, true, true).unwrap();
        let out = layer.forward(&mut tape, batch.x, &batch.edges).unwrap();
        let alpha = tape.value(out.alpha);
        let mut sums = vec![[0.0; 4]; batch.edges.num_nodes()];
        for (row, &e) in out.edge_order.iter().enumerate() {
            let dst = batch.edges.edges()[e].1;
            for h in 0..4 {
                assert!(alpha.get(row, h) > 0.0);
                sums[dst][h] += alpha.get(row, h);
            }
        }
        for s in sums.iter().flatten() {
            assert!((s - 1.0).abs() <= 1e-9, "sum {s}");
        }
    }
}

/// Reorders the modality nodes of `g` by `perm` (new position `i` holds old
/// node `perm[i]`).
fn permuted(tape: &mut Tape, g: &TurnGraph, perm: &[usize]) -> TurnGraph {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    TurnGraph {
        turn_index: g.turn_index,
        nodes: perm.iter().map(|&i| g.nodes[i]).collect(),
        embeddings: tape.gather_rows(g.embeddings, perm).unwrap(),
        factor: g.factor,
        edges: g
            .edges
            .iter()
            .map(|e| Edge {
                src: inv[e.src],
                dst: inv[e.dst],
                ty: e.ty,
            })
            .collect(),
    }
}

#[test]
fn node_update_is_permutation_equivariant() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let inputs = GraphInputs::new(&mut store, "", dims(), 8, &mut r);
    let layer = AttentionLayerParams::new(&mut store, "l.", 8, 2, &EdgeType::turn_graph_types(), &mut r).unwrap();
    let v = video(&[7], dims(), &mut r);
    let mut tape = Tape::new(&store);
    let g = build_turn_graphs(&mut tape, &v, &inputs).unwrap().remove(0);
    let perm = [4, 0, 6, 2, 1, 5, 3];
    let p = permuted(&mut tape, &g, &perm);
    let a = update_nodes(&mut tape, &g, &layer).unwrap();
    let b = update_nodes(&mut tape, &p, &layer).unwrap();
    let (ea, eb) = (tape.value(a.embeddings).clone(), tape.value(b.embeddings).clone());
    for (new, &old) in perm.iter().enumerate() {
        for (x, y) in eb.row_slice(new).iter().zip(ea.row_slice(old)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert!(max_abs_diff(tape.value(a.factor), tape.value(b.factor)) < 1e-12);
}

#[test]
fn factor_depends_only_on_its_turn_without_links() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let mut enc = encoder(&mut store, 8, 2, 2, &mut r);
    enc.config.factor_links = false;
    let v = video(&[3, 4, 2], dims(), &mut r);
    let mut w = v.clone();
    w.turns[1].text[0][0] += 3.0;
    w.turns[2].vision[0][1] -= 2.0;
    let mut tape = Tape::new(&store);
    let za = enc.encode_video(&mut tape, &v, FactorMode::Factorized).unwrap();
    let zb = enc.encode_video(&mut tape, &w, FactorMode::Factorized).unwrap();
    let (za, zb) = (tape.value(za), tape.value(zb));
    assert_eq!(za.row_slice(0), zb.row_slice(0));
    assert_ne!(za.row_slice(1), zb.row_slice(1));
    assert_ne!(za.row_slice(2), zb.row_slice(2));
}

#[test]
fn linked_factors_see_other_turns_only_through_factors() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let v = video(&[3, 4], dims(), &mut r);
    let mut w = v.clone();
    w.turns[1].acoustic[0][0] += 3.0;
    // one layer: z⁰ reads z¹ before z¹ has seen its own turn
    let one = encoder(&mut store, 8, 2, 1, &mut r);
    let mut tape = Tape::new(&store);
    let za = one.encode_video(&mut tape, &v, FactorMode::Factorized).unwrap();
    let zb = one.encode_video(&mut tape, &w, FactorMode::Factorized).unwrap();
    assert_eq!(tape.value(za).row_slice(0), tape.value(zb).row_slice(0));
    // two layers: the change reaches z⁰ via z¹
    let mut store = ParamStore::new();
    let two = encoder(&mut store, 8, 2, 2, &mut r);
    let mut tape = Tape::new(&store);
    let za = two.encode_video(&mut tape, &v, FactorMode::Factorized).unwrap();
    let zb = two.encode_video(&mut tape, &w, FactorMode::Factorized).unwrap();
    assert_ne!(tape.value(za).row_slice(0), tape.value(zb).row_slice(0));
}

#[test]
fn single_turn_modes_agree() {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let enc = encoder(&mut store, 8, 4, 2, &mut r);
    let v = video(&[5], dims(), &mut r);
    let mut tape = Tape::new(&store);
    let a = enc.encode_video(&mut tape, &v, FactorMode::Factorized).unwrap();
    let b = enc.encode_video(&mut tape, &v, FactorMode::VideoLevel).unwrap();
    assert!(max_abs_diff(tape.value(a), tape.value(b)) < 1e-12);
}

#[test]
fn factor_ignores_node_order_within_a_modality() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let enc = encoder(&mut store, 8, 2, 2, &mut r);
    let v = video(&[7, 5], dims(), &mut r);
    let mut w = v.clone();
    w.turns[0].text.reverse();
    w.turns[1].text.swap(0, 1);
    let mut tape = Tape::new(&store);
    let a = enc.encode_video(&mut tape, &v, FactorMode::Factorized).unwrap();
    let b = enc.encode_video(&mut tape, &w, FactorMode::Factorized).unwrap();
    assert!(max_abs_diff(tape.value(a), tape.value(b)) < 1e-12);
}

#[test]
fn mean_readout_averages_final_modality_rows() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let enc = encoder(&mut store, 8, 2, 2, &mut r);
    let v = video(&[3, 2], dims(), &mut r);
    let mut tape = Tape::new(&store);
    let z = enc.encode_video(&mut tape, &v, FactorMode::MeanReadout).unwrap();
    let (x, edges) = enc.encode_nodes(&mut tape, &v, FactorMode::MeanReadout).unwrap();
    assert_eq!(edges.num_nodes(), 5);
    let (z, x) = (tape.value(z), tape.value(x));
    for (turn, rows) in [(0, 0..3), (1, 3..5)] {
        let n = rows.len() as f64;
        for c in 0..8 {
            let mean: f64 = rows.clone().map(|i| x.get(i, c)).sum::<f64>() / n;
            assert!((z.get(turn, c) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn video_graph_connects_turns() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let inputs = GraphInputs::new(&mut store, "", dims(), 4, &mut r);
    let v = video(&[2, 3], dims(), &mut r);
    let mut tape = Tape::new(&store);
    let g = build_video_graph(&mut tape, &v, &inputs).unwrap();
    assert_eq!(g.edges.len(), 5 * 4);
    assert!(g.edges.iter().any(|e| g.nodes[e.src].turn != g.nodes[e.dst].turn));
}
