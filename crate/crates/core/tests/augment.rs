mod common;

use common::{dims, rng, video};
use turngraph::augment::{edge_perturb, make_views, node_drop, node_mask, subgraph_sample, Augmentation, AugmentationConfig};
use turngraph::graph::{build_turn_graphs, GraphInputs, VideoRecord};
use turngraph::params::ParamStore;
use turngraph::tape::Tape;
use turngraph::Error;

fn setup(n: usize, seed: u64) -> (ParamStore, GraphInputs, VideoRecord) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let inputs = GraphInputs::new(&mut store, "", dims(), 4, &mut r);
    let v = video(&[n], dims(), &mut r);
    (store, inputs, v)
}

/// Every count within three standard deviations of `trials · p`.
fn assert_uniform(counts: &[usize], trials: usize, p: f64) {
    let mean = trials as f64 * p;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "item {i}: {c} vs {mean:.0} ± {:.0}", 3.0 * sd);
    }
}

#[test]
fn node_drop_selects_uniformly() {
    let (store, inputs, v) = setup(10, 1);
    let mut tape = Tape::new(&store);
    let g = build_turn_graphs(&mut tape, &v, &inputs).unwrap().remove(0);
    let mut r = rng(2);
    let mut dropped = [0usize; 10];
    let trials = 10_000;
    for _ in 0..trials {
        let out = node_drop(&mut tape, &g, 0.1, &mut r).unwrap();
        for (i, n) in g.nodes.iter().enumerate() {
            if !out.nodes.contains(n) {
                dropped[i] += 1;
            }
        }
    }
    assert_eq!(dropped.iter().sum::<usize>(), trials);
    assert_uniform(&dropped, trials, 0.1);
}

#[test]
fn node_mask_selects_uniformly() {
    let (store, inputs, v) = setup(10, 3);
    let mut tape = Tape::new(&store);
    let g = build_turn_graphs(&mut tape, &v, &inputs).unwrap().remove(0);
    let mut r = rng(4);
    let mut masked = [0usize; 10];
    let trials = 10_000;
    for _ in 0..trials {
        let out = node_mask(&mut tape, &g, 0.1, &mut r).unwrap();
        let emb = tape.value(out.embeddings);
        for (i, m) in masked.iter_mut().enumerate() {
            *m += emb.row_slice(i).iter().all(|&x| x == 0.0) as usize;
        }
    }
    assert_uniform(&masked, trials, 0.1);
}

#[test]
fn edge_perturb_selects_uniformly() {
    let (store, inputs, v) = setup(10, 5);
    let mut tape = Tape::new(&store);
    let g = build_turn_graphs(&mut tape, &v, &inputs).unwrap().remove(0);
    let mut r = rng(6);
    let mut removed = vec![0usize; g.edges.len()];
    let trials = 10_000;
    for _ in 0..trials {
        let out = edge_perturb(&mut tape, &g, 0.1, &mut r).unwrap();
        for (i, e) in g.edges.iter().enumerate() {
            removed[i] += !out.edges.contains(e) as usize;
        }
    }
    assert_uniform(&removed, trials, 0.1);
}

#[test]
fn complete_four_node_graph_loses_three_edges() {
    let (store, inputs, v) = setup(4, 7);
    let mut tape = Tape::new(&store);
    let g = build_turn_graphs(&mut tape, &v, &inputs).unwrap().remove(0);
    assert_eq!(g.edges.len(), 12);
    let out = edge_perturb(&mut tape, &g, 0.25, &mut rng(0)).unwrap();
    assert_eq!(out.edges.len(), 9);
}

#[test]
fn full_drop_keeps_one_node() {
    for n in 1..=10 {
        let (store, inputs, v) = setup(n, n as u64);
        let mut tape = Tape::new(&store);
        let g = build_turn_graphs(&mut tape, &v, &inputs).unwrap().remove(0);
        for seed in 0..10 {
            let out = node_drop(&mut tape, &g, 1.0, &mut rng(seed)).unwrap();
            assert_eq!(out.nodes.len(), 1);
            assert!(out.edges.is_empty());
            out.validate(&tape).unwrap();
        }
        let half = node_drop(&mut tape, &g, 0.5, &mut rng(0)).unwrap();
        assert_eq!(half.nodes.len(), n - (n / 2).min(n - 1));
    }
}

#[test]
fn full_walk_covers_complete_graphs() {
    for n in 1..=10 {
        let (store, inputs, v) = setup(n, 100 + n as u64);
        let mut tape = Tape::new(&store);
        let g = build_turn_graphs(&mut tape, &v, &inputs).unwrap().remove(0);
        for seed in 0..20 {
            let all = subgraph_sample(&mut tape, &g, 1.0, &mut rng(seed)).unwrap();
            assert_eq!(all.nodes, g.nodes);
            let one = subgraph_sample(&mut tape, &g, 0.5 / n as f64, &mut rng(seed)).unwrap();
            assert_eq!(one.nodes.len(), 1);
            assert_eq!(one.factor, g.factor);
        }
    }
}

#[test]
fn zero_ratio_views_equal_the_input() {
    let (store, inputs, v) = setup(5, 9);
    let mut tape = Tape::new(&store);
    let g = build_turn_graphs(&mut tape, &v, &inputs).unwrap().remove(0);
    let cfg = AugmentationConfig::only(Augmentation::NodeMask, 0.0);
    let pair = make_views(&mut tape, &g, &cfg, &mut rng(0)).unwrap();
    for view in [&pair.first, &pair.second] {
        assert_eq!(view.nodes, g.nodes);
        assert_eq!(view.edges, g.edges);
        assert_eq!(tape.value(view.embeddings), tape.value(g.embeddings));
    }
}

#[test]
fn views_need_an_enabled_augmentation() {
    let (store, inputs, v) = setup(3, 10);
    let mut tape = Tape::new(&store);
    let g = build_turn_graphs(&mut tape, &v, &inputs).unwrap().remove(0);
    let cfg = AugmentationConfig {
        enabled: vec![],
        ..Default::default()
    };
    assert!(matches!(make_views(&mut tape, &g, &cfg, &mut rng(0)), Err(Error::NoAugmentation)));
}
