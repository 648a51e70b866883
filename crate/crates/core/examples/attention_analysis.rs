//! Train the fully connected video-level baseline briefly, then compare the
//! attention it puts on edges across turns with edges inside a turn.

use turngraph::attention::FactorMode;
use turngraph::config::TrainConfig;
use turngraph::data::{generate, SynthConfig};
use turngraph::pipeline::{cmd_analyze_attention, cmd_pretrain};

fn main() -> turngraph::Result<()> {
    let videos = generate(&SynthConfig {
        videos: 80,
        turns_min: 2,
        turns_max: 5,
        ..SynthConfig::default()
    })?;
    let cfg = TrainConfig {
        hidden_dim: 16,
        max_epochs: 3,
        factor_mode: FactorMode::VideoLevel,
        ..TrainConfig::default()
    };
    let (run, _) = cmd_pretrain(&cfg, &videos, None)?;
    let r = cmd_analyze_attention(&run.checkpoint(), &videos)?;
    println!("cross-turn mean attention  {:.5} over {} edges", r.cross_turn_mean, r.cross_turn_edges);
    println!("within-turn mean attention {:.5} over {} edges", r.within_turn_mean, r.within_turn_edges);
    println!("cross-turn relative to within-turn: {:+.2}%", r.ratio_pct);
    Ok(())
}
