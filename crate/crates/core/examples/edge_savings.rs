//! How many directed edges per-turn graphs save over one fully connected
//! graph, bucketed by number of turns.

use turngraph::analysis::analyze_edges;
use turngraph::data::{generate, SynthConfig};

fn main() -> turngraph::Result<()> {
    let videos = generate(&SynthConfig {
        videos: 200,
        turns_min: 2,
        turns_max: 8,
        nodes_min: 1,
        nodes_max: 4,
        ..SynthConfig::default()
    })?;
    println!("{:<6} {:>7} {:>11}", "turns", "videos", "reduction");
    for b in analyze_edges(&videos)? {
        println!("{:<6} {:>7} {:>10.2}%", b.label, b.videos, 100.0 * b.mean_reduction);
    }
    Ok(())
}
