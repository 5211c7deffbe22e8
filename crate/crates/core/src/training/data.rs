use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, resample, write_wav};
use crate::diffusion::{forward_diffuse, sample_noise_level, NoiseSchedule};
use crate::error::{Error, Result};
use crate::text::{TextEncoding, TextFrontend};

/// Loss weight of zero-padded samples relative to real ones.
pub const PADDING_WEIGHT: f64 = 0.1;

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub audio_path: PathBuf,
    pub transcript: String,
    #[serde(default)]
    pub speaker_id: Option<String>,
    pub duration_s: f64,
}

/// Reads a JSON-lines manifest; relative audio paths are resolved against
/// the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: UtteranceRecord = serde_json::from_str(line)
            .map_err(|e| Error::Ingest(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if rec.audio_path.is_relative() {
            rec.audio_path = base.join(&rec.audio_path);
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Ingest(format!(
            "{} lists no utterances",
            path.display()
        )));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serialises");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Sorted distinct speaker ids of a manifest.
pub fn speaker_list(records: &[UtteranceRecord]) -> Vec<String> {
    records
        .iter()
        .filter_map(|r| r.speaker_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// A decoded, resampled and text-encoded training utterance.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub transcript: String,
    pub samples: Vec<f64>,
    pub text: TextEncoding,
    pub speaker: Option<usize>,
}

/// Loads every record at `sample_rate`, rejecting (all at once) any that do
/// not fit in `segment_length` samples.
pub fn ingest(
    records: &[UtteranceRecord],
    sample_rate: u32,
    segment_length: usize,
    text: &TextFrontend,
    speakers: &[String],
) -> Result<Vec<Utterance>> {
    let mut out = Vec::with_capacity(records.len());
    let mut too_long = Vec::new();
    for r in records {
        let wav = read_wav(&r.audio_path)?;
        let samples = resample(&wav.samples, wav.sample_rate, sample_rate);
        if samples.len() > segment_length {
            too_long.push(format!(
                "{} ({:.3} s > {:.3} s)",
                r.audio_path.display(),
                samples.len() as f64 / sample_rate as f64,
                segment_length as f64 / sample_rate as f64
            ));
            continue;
        }
        let encoding = text
            .encode_text(&r.transcript)
            .map_err(|e| Error::Ingest(format!("{}: {e}", r.audio_path.display())))?;
        let speaker = match &r.speaker_id {
            Some(s) if !speakers.is_empty() => {
                Some(speakers.iter().position(|x| x == s).ok_or_else(|| {
                    Error::Ingest(format!("{}: unknown speaker {s}", r.audio_path.display()))
                })?)
            }
            _ => None,
        };
        out.push(Utterance {
            id: r.audio_path.display().to_string(),
            transcript: r.transcript.clone(),
            samples,
            text: encoding,
            speaker,
        });
    }
    if !too_long.is_empty() {
        return Err(Error::Ingest(format!(
            "utterances longer than the model length: {}",
            too_long.join(", ")
        )));
    }
    Ok(out)
}

/// One noised training example of the fixed model length.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub waveform: Vec<f64>,
    pub sample_weights: Vec<f64>,
    pub text: TextEncoding,
    pub speaker: Option<usize>,
    pub sqrt_alpha_bar: f64,
    pub epsilon: Vec<f64>,
    pub noisy: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub examples: Vec<TrainExample>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn noise_levels(&self) -> Vec<f64> {
        self.examples.iter().map(|e| e.sqrt_alpha_bar).collect()
    }
}

/// Zero-pads each utterance to `segment_length`, weights the padding at
/// [`PADDING_WEIGHT`], and draws a noise level and noise per example.
pub fn prepare_batch<R: Rng + ?Sized>(
    utterances: &[&Utterance],
    segment_length: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<TrainBatch> {
    if utterances.is_empty() {
        return Err(Error::Input(
            "cannot build a batch from no utterances".into(),
        ));
    }
    let mut examples = Vec::with_capacity(utterances.len());
    for u in utterances {
        let real = u.samples.len();
        if real > segment_length {
            return Err(Error::Ingest(format!(
                "{} has {real} samples, more than the model length {segment_length}",
                u.id
            )));
        }
        let mut waveform = u.samples.clone();
        waveform.resize(segment_length, 0.0);
        let sample_weights = (0..segment_length)
            .map(|i| if i < real { 1.0 } else { PADDING_WEIGHT })
            .collect();
        let sqrt_alpha_bar = sample_noise_level(schedule, rng);
        let epsilon: Vec<f64> = (0..segment_length)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let noisy = forward_diffuse(&waveform, sqrt_alpha_bar, &epsilon)?;
        examples.push(TrainExample {
            waveform,
            sample_weights,
            text: u.text.clone(),
            speaker: u.speaker,
            sqrt_alpha_bar,
            epsilon,
            noisy,
        });
    }
    Ok(TrainBatch { examples })
}

const SYNTHETIC_TRANSCRIPTS: [&str; 8] = [
    "the cat sat on the mat",
    "a red fox ran home",
    "blue skies above the hill",
    "seven green frogs sing",
    "quiet rivers flow north",
    "we bake fresh bread daily",
    "old clocks tick slowly",
    "bright stars fill the night",
];

/// Deterministic harmonic "utterance": a gliding pitch with three decaying
/// harmonics under a smooth envelope.
pub fn synthetic_utterance(index: usize, sample_rate: u32, len: usize, seed: u64) -> Vec<f64> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let f0 = 120.0 + 45.0 * index as f64 + rng.gen_range(0.0..10.0);
    let glide = rng.gen_range(-0.15..0.15);
    let amps = [0.5, rng.gen_range(0.15..0.3), rng.gen_range(0.05..0.15)];
    let rate = sample_rate as f64;
    let mut phase = 0.0;
    (0..len)
        .map(|i| {
            let u = i as f64 / len as f64;
            let f = f0 * (1.0 + glide * u);
            phase += 2.0 * PI * f / rate;
            let env = (PI * u).sin().powf(0.5);
            env * amps
                .iter()
                .enumerate()
                .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
                .sum::<f64>()
        })
        .collect()
}

/// Writes `count` synthetic utterances of `len` samples and a manifest;
/// speakers alternate between two ids. Returns the manifest path.
pub fn write_synthetic_corpus(
    dir: &Path,
    count: usize,
    sample_rate: u32,
    len: usize,
    seed: u64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let name = format!("utt{i:03}.wav");
        let samples = synthetic_utterance(i, sample_rate, len, seed);
        write_wav(&dir.join(&name), &samples, sample_rate)?;
        records.push(UtteranceRecord {
            audio_path: PathBuf::from(name),
            transcript: SYNTHETIC_TRANSCRIPTS[i % SYNTHETIC_TRANSCRIPTS.len()].to_string(),
            speaker_id: Some(format!("spk{}", i % 2)),
            duration_s: len as f64 / sample_rate as f64,
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
