//! Synthetic videos with planted speaker and answer structure, and the
//! newline-delimited JSON record format.
//!
//! One record per line:
//!
//! ```text
//! {"video_id": "...", "turns": [{"speaker_id": "...", "text": [[..]], "vision": [[..]], "acoustic": [[..]]}],
//!  "qa": [{"question": [[..]], "correct": [[..]], "incorrect": [[..]]}]}
//! ```
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FeatureDims, ModalityKind, QAItem, Turn, VideoRecord};
use crate::util::{rng_for, stable_hash};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub videos: usize,
    pub turns_min: usize,
    pub turns_max: usize,
    /// Nodes per modality in a turn (all three modalities get the same count).
    pub nodes_min: usize,
    pub nodes_max: usize,
    pub dims: FeatureDims,
    pub speakers: usize,
    /// Norm of each speaker's per-modality bias vector.
    pub speaker_signal: f64,
    /// Norm of each speaker's token bias, shared by its questions and correct answers.
    pub answer_signal: f64,
    pub noise: f64,
    pub qa_per_video: usize,
    pub seq_min: usize,
    pub seq_max: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 64,
            turns_min: 4,
            turns_max: 4,
            nodes_min: 1,
            nodes_max: 2,
            dims: FeatureDims {
                text: 8,
                vision: 6,
                acoustic: 4,
                token: 8,
            },
            speakers: 2,
            speaker_signal: 5.0,
            answer_signal: 4.0,
            noise: 1.0,
            qa_per_video: 4,
            seq_min: 3,
            seq_max: 6,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("videos", self.videos),
            ("turns_min", self.turns_min),
            ("nodes_min", self.nodes_min),
            ("speakers", self.speakers),
            ("seq_min", self.seq_min),
            ("dims.text", self.dims.text),
            ("dims.vision", self.dims.vision),
            ("dims.acoustic", self.dims.acoustic),
            ("dims.token", self.dims.token),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "must be at least 1".into(),
                });
            }
        }
        for (key, lo, hi) in [
            ("turns_max", self.turns_min, self.turns_max),
            ("nodes_max", self.nodes_min, self.nodes_max),
            ("seq_max", self.seq_min, self.seq_max),
        ] {
            if hi < lo {
                return Err(Error::Config {
                    key: key.into(),
                    msg: format!("{hi} is below the minimum {lo}"),
                });
            }
        }
        for (key, v) in [
            ("speaker_signal", self.speaker_signal),
            ("answer_signal", self.answer_signal),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    key: key.into(),
                    msg: format!("must be a finite value ≥ 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Random direction scaled to norm `magnitude`.
fn bias<R: Rng + ?Sized>(rng: &mut R, dim: usize, magnitude: f64) -> Vec<f64> {
    let v = gaussian(rng, dim, 1.0);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| magnitude * x / n).collect()
}

fn noisy<R: Rng + ?Sized>(rng: &mut R, center: &[f64], noise: f64) -> Vec<f64> {
    center
        .iter()
        .map(|c| c + noise * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

struct Speaker {
    modality: [Vec<f64>; 3],
    token: Vec<f64>,
}

/// Deterministic in `cfg` (each video draws from its own seeded stream).
pub fn generate(cfg: &SynthConfig) -> Result<Vec<VideoRecord>> {
    cfg.validate()?;
    Ok((0..cfg.videos).map(|v| generate_video(cfg, v)).collect())
}

fn generate_video(cfg: &SynthConfig, v: usize) -> VideoRecord {
    let mut rng = rng_for(cfg.seed, &[v as u64]);
    let d = cfg.dims;
    let speakers: Vec<Speaker> = (0..cfg.speakers)
        .map(|_| Speaker {
            modality: ModalityKind::ALL.map(|m| bias(&mut rng, d.modality(m), cfg.speaker_signal)),
            token: bias(&mut rng, d.token, cfg.answer_signal),
        })
        .collect();
    let n_turns = rng.random_range(cfg.turns_min..=cfg.turns_max);
    let mut turn_speakers = Vec::with_capacity(n_turns);
    let mut turns = Vec::with_capacity(n_turns);
    for _ in 0..n_turns {
        let s = rng.random_range(0..cfg.speakers);
        let n = rng.random_range(cfg.nodes_min..=cfg.nodes_max);
        let mut rows = ModalityKind::ALL.map(|m| {
            (0..n)
                .map(|_| noisy(&mut rng, &speakers[s].modality[m.index()], cfg.noise))
                .collect::<Vec<_>>()
        });
        let [text, vision, acoustic] = std::mem::take(&mut rows);
        turn_speakers.push(s);
        turns.push(Turn {
            speaker_id: format!("s{s}"),
            text,
            vision,
            acoustic,
        });
    }
    let seq = |rng: &mut rand_chacha::ChaCha8Rng, center: &[f64]| {
        let len = rng.random_range(cfg.seq_min..=cfg.seq_max);
        (0..len).map(|_| noisy(rng, center, cfg.noise)).collect::<Vec<_>>()
    };
    let qa = (0..cfg.qa_per_video)
        .map(|_| {
            let s = turn_speakers[rng.random_range(0..n_turns)];
            let other = if cfg.speakers > 1 {
                (s + rng.random_range(1..cfg.speakers)) % cfg.speakers
            } else {
                usize::MAX
            };
            let wrong = if other == usize::MAX {
                bias(&mut rng, d.token, cfg.answer_signal)
            } else {
                speakers[other].token.clone()
            };
            QAItem {
                question: seq(&mut rng, &speakers[s].token),
                correct: seq(&mut rng, &speakers[s].token),
                incorrect: seq(&mut rng, &wrong),
            }
        })
        .collect();
    VideoRecord {
        video_id: format!("video{v:05}"),
        turns,
        qa,
    }
}

pub fn save_records(path: &Path, records: &[VideoRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates records. Feature widths must agree with `dims` when
/// given, otherwise with the first record. Blank lines are skipped; errors
/// carry the 1-based line number.
pub fn load_records(path: &Path, dims: Option<&FeatureDims>) -> Result<Vec<VideoRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut expected = dims.copied();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: Error| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        };
        let rec: VideoRecord = serde_json::from_str(&line).map_err(|e| at(e.into()))?;
        if expected.is_none() {
            expected = infer_dims(&rec);
        }
        if let Some(e) = expected.as_mut().filter(|e| e.token == 0) {
            e.token = infer_dims(&rec).map_or(0, |d| d.token);
        }
        rec.validate(expected.as_ref()).map_err(at)?;
        out.push(rec);
    }
    Ok(out)
}

/// Feature widths of the first row of each modality found in `rec`.
pub fn infer_dims(rec: &VideoRecord) -> Option<FeatureDims> {
    let first = |m: ModalityKind| rec.turns.iter().find_map(|t| t.modality(m).first().map(Vec::len));
    let token = rec.qa.first().and_then(|q| q.question.first()).map_or(0, Vec::len);
    Some(FeatureDims {
        text: first(ModalityKind::Text)?,
        vision: first(ModalityKind::Vision)?,
        acoustic: first(ModalityKind::Acoustic)?,
        token,
    })
}

/// 80/20 train/validation split by hashed video id: `(train, validation)` indices.
pub fn split_indices(records: &[VideoRecord]) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if stable_hash(&r.video_id) % 5 == 0 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}
