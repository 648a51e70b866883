//! The four graph augmentations applied to one turn graph at several ratios.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use turngraph::augment::{apply, Augmentation};
use turngraph::data::{generate, SynthConfig};
use turngraph::graph::{build_turn_graphs, GraphInputs};
use turngraph::params::ParamStore;
use turngraph::tape::Tape;

fn main() -> turngraph::Result<()> {
    let cfg = SynthConfig {
        videos: 1,
        nodes_min: 3,
        nodes_max: 3,
        ..SynthConfig::default()
    };
    let video = generate(&cfg)?.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let inputs = GraphInputs::new(&mut store, "", cfg.dims, 8, &mut rng);
    let mut tape = Tape::new(&store);
    let g = build_turn_graphs(&mut tape, &video, &inputs)?.remove(0);
    println!("input: {} nodes, {} edges", g.node_count(), g.modality_edge_count());

    for aug in Augmentation::ALL {
        for ratio in [0.25, 0.5, 0.75] {
            let out = apply(&mut tape, &g, aug, ratio, &mut rng)?;
            let emb = tape.value(out.embeddings);
            let zeroed = (0..emb.rows()).filter(|&r| emb.row_slice(r).iter().all(|&v| v == 0.0)).count();
            println!(
                "{:<13} {ratio:.2}: {} nodes ({zeroed} zeroed), {} edges, factor {}",
                aug.key(),
                out.node_count(),
                out.modality_edge_count(),
                if out.factor == g.factor { "kept" } else { "CHANGED" }
            );
        }
    }
    Ok(())
}
