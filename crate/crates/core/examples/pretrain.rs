//! Contrastive pretraining on synthetic videos with speaker structure.

use turngraph::config::TrainConfig;
use turngraph::data::{generate, SynthConfig};
use turngraph::pipeline::cmd_pretrain;

fn main() -> turngraph::Result<()> {
    let videos = generate(&SynthConfig {
        nodes_max: 3,
        ..SynthConfig::default()
    })?;
    let cfg = TrainConfig::parse(
        "lr = 0.005\nhidden_dim = 16\nheads = 4\nbatch_size = 4\nmax_epochs = 10\ncontrastive.tau = 0.5\n",
    )?;
    cfg.validate()?;
    let (run, metrics) = cmd_pretrain(&cfg, &videos, None)?;
    println!("{:>5} {:>8} {:>8} {:>8}", "epoch", "loss", "pos", "neg");
    for e in 1..=run.epoch {
        let get = |k: &str| metrics.iter().find(|m| m.epoch == e && m.key == k).map_or(f64::NAN, |m| m.value);
        println!(
            "{e:>5} {:>8.4} {:>8.4} {:>8.4}",
            get("pretrain.loss"),
            get("pretrain.pos_sim"),
            get("pretrain.neg_sim")
        );
    }
    Ok(())
}
