use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use turngraph::analysis::analyze_edges;
use turngraph::augment::Augmentation;
use turngraph::checkpoint::{read_metrics, write_metrics, Checkpoint};
use turngraph::config::TrainConfig;
use turngraph::data::{generate, load_records, save_records, SynthConfig};
use turngraph::graph::{FeatureDims, VideoRecord};
use turngraph::pipeline;
use turngraph::{Error, Result};

#[derive(Parser)]
#[command(name = "turngraph", version, about = "Speaking-turn graph pretraining, fine-tuning and analysis")]
struct Cli {
    /// Flat key=value training config
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Newline-delimited video records
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (output file for gen-data)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset
    GenData(GenArgs),
    /// Contrastive pretraining; resumes from --checkpoint when given
    Pretrain {
        /// Sweep the ratio of one augmentation (others disabled)
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
        ratios: Vec<f64>,
    },
    /// QA fine-tuning from a pretraining --checkpoint
    Finetune,
    /// Validation accuracy of a fine-tuned --checkpoint
    Eval,
    /// Speaker probe on a factorized pretraining --checkpoint
    ProbeSpeaker,
    /// Edge reduction of per-turn graphs by turn count
    AnalyzeEdges,
    /// Cross- vs within-turn attention of a video-level --checkpoint
    AnalyzeAttention,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 64)]
    videos: usize,
    #[arg(long, default_value_t = 4)]
    turns_min: usize,
    #[arg(long, default_value_t = 4)]
    turns_max: usize,
    #[arg(long, default_value_t = 1)]
    nodes_min: usize,
    #[arg(long, default_value_t = 2)]
    nodes_max: usize,
    #[arg(long, default_value_t = 8)]
    dim_text: usize,
    #[arg(long, default_value_t = 6)]
    dim_vision: usize,
    #[arg(long, default_value_t = 4)]
    dim_acoustic: usize,
    #[arg(long, default_value_t = 8)]
    dim_token: usize,
    #[arg(long, default_value_t = 2)]
    speakers: usize,
    #[arg(long, default_value_t = 5.0)]
    speaker_signal: f64,
    #[arg(long, default_value_t = 4.0)]
    answer_signal: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 4)]
    qa_per_video: usize,
    #[arg(long, default_value_t = 3)]
    seq_min: usize,
    #[arg(long, default_value_t = 6)]
    seq_max: usize,
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config {
        key: flag.into(),
        msg: "required for this command".into(),
    })
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn emit<T: Serialize>(value: &T, dir: Option<&Path>, name: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    writeln!(std::io::stdout().lock(), "{text}")?;
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join(name), text + "\n")?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let data = || -> Result<Vec<VideoRecord>> { load_records(required(&cli.data, "--data")?, None) };
    let checkpoint = || -> Result<Checkpoint> { Checkpoint::load(required(&cli.checkpoint, "--checkpoint")?) };
    match &cli.command {
        Command::GenData(g) => {
            let cfg = SynthConfig {
                videos: g.videos,
                turns_min: g.turns_min,
                turns_max: g.turns_max,
                nodes_min: g.nodes_min,
                nodes_max: g.nodes_max,
                dims: FeatureDims {
                    text: g.dim_text,
                    vision: g.dim_vision,
                    acoustic: g.dim_acoustic,
                    token: g.dim_token,
                },
                speakers: g.speakers,
                speaker_signal: g.speaker_signal,
                answer_signal: g.answer_signal,
                noise: g.noise,
                qa_per_video: g.qa_per_video,
                seq_min: g.seq_min,
                seq_max: g.seq_max,
                seed: config.seed,
            };
            let path = required(&cli.out, "--out")?;
            let records = generate(&cfg)?;
            save_records(path, &records)?;
            println!("wrote {} videos to {}", records.len(), path.display());
        }
        Command::Pretrain { sweep, ratios } => {
            let videos = data()?;
            let dir = out_dir(cli)?;
            if let Some(name) = sweep {
                let aug = Augmentation::ALL
                    .into_iter()
                    .find(|a| a.key() == name)
                    .ok_or_else(|| Error::Config {
                        key: "--sweep".into(),
                        msg: format!("unknown augmentation `{name}`"),
                    })?;
                let points = pipeline::cmd_pretrain_sweep(&config, &videos, aug, ratios)?;
                return emit(&points, Some(&dir), "sweep.json");
            }
            let resume = cli.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let start = resume.as_ref().map_or(0, |c| c.epoch);
            let (run, metrics) = pipeline::cmd_pretrain(&config, &videos, resume)?;
            let metrics_path = dir.join("metrics.ndjson");
            let mut all = if start > 0 && metrics_path.exists() {
                read_metrics(&metrics_path)?
                    .into_iter()
                    .filter(|m| m.epoch <= start)
                    .collect()
            } else {
                Vec::new()
            };
            for m in &metrics {
                println!("epoch {:>3}  {:<20} {:.6}", m.epoch, m.key, m.value);
            }
            all.extend(metrics);
            write_metrics(&metrics_path, &all)?;
            run.checkpoint().save(&dir.join("checkpoint.json"))?;
        }
        Command::Finetune => {
            let videos = data()?;
            let dir = out_dir(cli)?;
            let pre = cli.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let report = pipeline::cmd_finetune(&config, &videos, pre.as_ref())?;
            for m in &report.metrics {
                println!("epoch {:>3}  {:<30} {:.6}", m.epoch, m.key, m.value);
            }
            write_metrics(&dir.join("finetune_metrics.ndjson"), &report.metrics)?;
            report.checkpoint.save(&dir.join("finetune_checkpoint.json"))?;
            println!("max validation accuracy {:.4}", report.max_val_accuracy);
        }
        Command::Eval => {
            let acc = pipeline::cmd_eval(&checkpoint()?, &data()?)?;
            println!("validation accuracy {acc:.4}");
        }
        Command::ProbeSpeaker => {
            let report = pipeline::cmd_probe_speaker(&checkpoint()?, &data()?)?;
            emit(&report, cli.out.as_deref(), "probe.json")?;
        }
        Command::AnalyzeEdges => {
            let buckets = analyze_edges(&data()?)?;
            println!("{:<6} {:>8} {:>12}", "turns", "videos", "reduction%");
            for b in &buckets {
                println!("{:<6} {:>8} {:>12.3}", b.label, b.videos, 100.0 * b.mean_reduction);
            }
            if let Some(d) = &cli.out {
                std::fs::create_dir_all(d)?;
                std::fs::write(d.join("edges.json"), serde_json::to_string_pretty(&buckets)? + "\n")?;
            }
        }
        Command::AnalyzeAttention => {
            let report = pipeline::cmd_analyze_attention(&checkpoint()?, &data()?)?;
            emit(&report, cli.out.as_deref(), "attention.json")?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
