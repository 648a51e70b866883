//! Build per-turn graphs for one synthetic video and encode each turn to its
//! factorization embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use turngraph::attention::{Encoder, EncoderConfig, FactorMode};
use turngraph::data::{generate, SynthConfig};
use turngraph::graph::{count_edges, EdgeCountMode};
use turngraph::params::ParamStore;
use turngraph::tape::Tape;

fn main() -> turngraph::Result<()> {
    let cfg = SynthConfig {
        videos: 1,
        turns_min: 3,
        turns_max: 3,
        nodes_max: 3,
        ..SynthConfig::default()
    };
    let video = generate(&cfg)?.remove(0);
    let mut store = ParamStore::new();
    let enc = Encoder::new(
        &mut store,
        EncoderConfig {
            dims: cfg.dims,
            hidden: 16,
            heads: 4,
            layers: 2,
            factor_links: true,
        },
        &mut ChaCha8Rng::seed_from_u64(1),
    )?;

    let mut tape = Tape::new(&store);
    let graphs = enc.build_graphs(&mut tape, &video, FactorMode::Factorized)?;
    for g in &graphs {
        println!(
            "turn {} ({}): {} modality nodes, {} modality edges, {} factor edges",
            g.turn_index,
            video.turns[g.turn_index].speaker_id,
            g.node_count(),
            g.modality_edge_count(),
            g.factor_edge_count()
        );
    }
    let sizes = video.turn_sizes();
    println!(
        "directed edges: {} per-turn vs {} fully connected",
        count_edges(&sizes, EdgeCountMode::Factorized)?,
        count_edges(&sizes, EdgeCountMode::VideoLevel)?
    );

    let z = enc.encode_graphs(&mut tape, &graphs, FactorMode::Factorized)?;
    let z = tape.value(z);
    for s in 0..z.rows() {
        let head: Vec<String> = z.row_slice(s)[..4].iter().map(|v| format!("{v:+.3}")).collect();
        println!("z[{s}] = [{}, ...]", head.join(", "));
    }
    Ok(())
}
