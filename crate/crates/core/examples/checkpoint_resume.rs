//! Stop pretraining halfway, save, reload and finish: the result matches an
//! uninterrupted run exactly.

use turngraph::checkpoint::Checkpoint;
use turngraph::config::TrainConfig;
use turngraph::data::{generate, SynthConfig};
use turngraph::pipeline::cmd_pretrain;

fn main() -> turngraph::Result<()> {
    let videos = generate(&SynthConfig::default())?;
    let cfg = TrainConfig {
        hidden_dim: 16,
        max_epochs: 4,
        ..TrainConfig::default()
    };
    let (full, _) = cmd_pretrain(&cfg, &videos, None)?;

    let dir = std::env::temp_dir().join(format!("turngraph-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("checkpoint.json");
    let half = TrainConfig {
        max_epochs: 2,
        ..cfg.clone()
    };
    let (first, _) = cmd_pretrain(&half, &videos, None)?;
    first.checkpoint().save(&path)?;
    let (resumed, _) = cmd_pretrain(&cfg, &videos, Some(Checkpoint::load(&path)?))?;
    std::fs::remove_dir_all(&dir)?;

    println!("uninterrupted: {}", full.store.hash_prefix(""));
    println!("resumed:       {}", resumed.store.hash_prefix(""));
    println!("identical: {}", full.store.hash_prefix("") == resumed.store.hash_prefix(""));
    Ok(())
}
