//! Does the factorization embedding of a turn encode who is speaking?
//! Probe accuracy with and without a planted speaker signal.

use turngraph::config::TrainConfig;
use turngraph::data::{generate, SynthConfig};
use turngraph::pipeline::{cmd_pretrain, cmd_probe_speaker};

fn main() -> turngraph::Result<()> {
    let cfg = TrainConfig {
        hidden_dim: 16,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    for signal in [5.0, 0.0] {
        let videos = generate(&SynthConfig {
            videos: 300,
            speaker_signal: signal,
            seed: 11,
            ..SynthConfig::default()
        })?;
        let (run, _) = cmd_pretrain(&cfg, &videos, None)?;
        let report = cmd_probe_speaker(&run.checkpoint(), &videos)?;
        println!(
            "speaker signal {signal}: accuracy {:.3} on {} validation pairs (best epoch {} of {})",
            report.accuracy, report.val_pairs, report.best_epoch, report.epochs_run
        );
    }
    Ok(())
}
