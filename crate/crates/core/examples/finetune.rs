//! QA fine-tuning: frozen pretrained encoder versus training everything from
//! scratch, on synthetic videos with planted answers.

use turngraph::config::TrainConfig;
use turngraph::data::{generate, SynthConfig};
use turngraph::pipeline::{cmd_finetune, cmd_pretrain};
use turngraph::qa::FinetuneMode;

fn main() -> turngraph::Result<()> {
    let videos = generate(&SynthConfig {
        videos: 200,
        ..SynthConfig::default()
    })?;
    let cfg = TrainConfig {
        lr: 0.003,
        hidden_dim: 16,
        head_hidden: 16,
        batch_size: 16,
        max_epochs: 2,
        finetune_epochs: 5,
        ..TrainConfig::default()
    };
    let (pre, _) = cmd_pretrain(&cfg, &videos, None)?;
    let frozen = cmd_finetune(&cfg, &videos, Some(&pre.checkpoint()))?;
    for m in frozen.metrics.iter().filter(|m| m.key == "finetune.val_accuracy") {
        println!("frozen  epoch {} accuracy {:.3}", m.epoch, m.value);
    }
    println!("encoder unchanged: {}", frozen.encoder_hash_before == frozen.encoder_hash_after);

    let scratch_cfg = TrainConfig {
        finetune_mode: FinetuneMode::SupervisedScratch,
        ..cfg
    };
    let scratch = cmd_finetune(&scratch_cfg, &videos, None)?;
    println!(
        "max validation accuracy: frozen {:.3}, scratch {:.3}",
        frozen.max_val_accuracy, scratch.max_val_accuracy
    );
    Ok(())
}
