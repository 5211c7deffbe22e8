use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use difftts_core::audio::{read_wav, resample, write_wav};
use difftts_core::config::{EmbedderBackend, RunConfig};
use difftts_core::inference::{
    inpaint, span_to_samples, speaker_classify, synthesize as sample_speech, EditMask,
    SamplerConfig,
};
use difftts_core::metrics::{
    embed_set, fsd as frechet, gaussian_stats, FsdReport, PrecomputedEmbedder, SpeakerEmbedder,
    SpectralEmbedder, Utterance,
};
use difftts_core::model::TtsModel;
use difftts_core::training::{
    latest_checkpoint, read_manifest, run_training, Checkpoint, TrainRun,
};
use difftts_core::Error;

use crate::{Common, Sampling};

/// 2 for problems with the invocation or its inputs, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_user_error() => 2,
        _ => 1,
    }
}

fn user_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Input(msg.into()).into()
}

fn load_config(common: &Common) -> Result<RunConfig> {
    Ok(match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    })
}

fn resolve_seed(flag: Option<u64>, cfg: &RunConfig) -> u64 {
    flag.or(cfg.seed).unwrap_or_else(|| {
        let seed = rand::random::<u64>();
        println!("seed={seed}");
        seed
    })
}

fn sidecar_path(output: &Path) -> PathBuf {
    output.with_extension("json")
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_model(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<(PathBuf, Checkpoint, TtsModel)> {
    let path = flag
        .clone()
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| {
            user_error("no checkpoint given (use --checkpoint or `checkpoint` in the config)")
        })?;
    let ckpt = Checkpoint::load(&path).map_err(|e| match e {
        Error::Io { .. } => e,
        other => Error::Input(other.to_string()),
    })?;
    let model = ckpt.to_model()?;
    Ok((path, ckpt, model))
}

fn speaker_index(ckpt: &Checkpoint, id: &Option<String>) -> Result<Option<usize>> {
    match id {
        None => Ok(None),
        Some(id) => ckpt
            .speakers
            .iter()
            .position(|s| s == id)
            .map(Some)
            .ok_or_else(|| user_error(format!("unknown speaker {id}; known: {:?}", ckpt.speakers))),
    }
}

fn sampler(cfg: &RunConfig, n_steps: Option<usize>, seed: u64) -> SamplerConfig {
    SamplerConfig {
        n_steps: n_steps.unwrap_or(cfg.sampler.n_steps),
        seed,
        ..cfg.sampler.clone()
    }
}

fn read_at_rate(path: &Path, rate: u32) -> Result<Vec<f64>> {
    let w = read_wav(path)?;
    Ok(resample(&w.samples, w.sample_rate, rate))
}

pub fn train(
    common: &Common,
    manifest: &Path,
    dir: Option<PathBuf>,
    steps: Option<u64>,
    resume: bool,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let dir = dir
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| user_error("no checkpoint directory given (use --checkpoint-dir)"))?;
    read_manifest(manifest)?;
    let resumed_seed = match (resume, common.seed.or(cfg.seed)) {
        (true, None) => latest_checkpoint(&dir)?
            .map(|p| Checkpoint::load(&p).map(|c| c.seed))
            .transpose()?,
        _ => None,
    };
    let seed = resumed_seed.unwrap_or_else(|| resolve_seed(common.seed, &cfg));
    let run = TrainRun {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        seed,
    };
    let out = run_training(&run, manifest, &dir, resume, |r| {
        println!(
            "step={} total={:.6} residual={:.6} omega_mean={:.6}",
            r.step, r.total, r.residual, r.omega_mean
        );
    })?;
    println!("checkpoint={}", out.checkpoint.display());
    write_json(
        &dir.join("train.json"),
        &json!({
            "command": "train",
            "seed": seed,
            "config_hash": run.model.hash(),
            "manifest": manifest.display().to_string(),
            "start_step": out.start_step,
            "final_step": out.final_step,
            "checkpoint": out.checkpoint.display().to_string(),
            "speakers": out.speakers,
            "train": run.train,
        }),
    )
}

pub fn synthesize(common: &Common, sampling: &Sampling, text: &str, output: &Path) -> Result<()> {
    if text.trim().is_empty() {
        return Err(user_error("text is empty"));
    }
    let cfg = load_config(common)?;
    let (ckpt_path, ckpt, model) = load_model(&sampling.checkpoint, &cfg)?;
    let speaker = speaker_index(&ckpt, &sampling.speaker)?;
    let seed = resolve_seed(common.seed, &cfg);
    let sampler = sampler(&cfg, sampling.n_steps, seed);
    let encoding = model.encode_text(text)?;
    let out = sample_speech(&model, &encoding, speaker, &sampler)?;
    if out.all_silent {
        log::warn!("output is silent after trimming");
    }
    write_wav(output, &out.samples, model.config.sample_rate)?;
    println!("output={}", output.display());
    write_json(
        &sidecar_path(output),
        &json!({
            "command": "synthesize",
            "seed": seed,
            "config_hash": ckpt.config.hash(),
            "checkpoint": ckpt_path.display().to_string(),
            "text": text,
            "speaker": sampling.speaker,
            "sampler": sampler,
            "samples": out.samples.len(),
            "all_silent": out.all_silent,
        }),
    )
}

fn scaled_output(output: &Path, scale: f64, multiple: bool) -> PathBuf {
    if !multiple {
        return output.to_path_buf();
    }
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = output
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "wav".into());
    output.with_file_name(format!("{stem}_x{scale:.2}.{ext}"))
}

pub fn edit(
    common: &Common,
    sampling: &Sampling,
    text: &str,
    input: &Path,
    span_s: (f64, f64),
    scales: &[f64],
    output: &Path,
) -> Result<()> {
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(user_error(format!("span scale {s} must be positive")));
    }
    let cfg = load_config(common)?;
    let (ckpt_path, ckpt, model) = load_model(&sampling.checkpoint, &cfg)?;
    let speaker = speaker_index(&ckpt, &sampling.speaker)?;
    let rate = model.config.sample_rate;
    let audio = read_at_rate(input, rate)?;
    let span = span_to_samples(span_s.0, span_s.1, rate)?;
    if span.end > audio.len() {
        return Err(user_error(format!(
            "span {:.3}..{:.3} s lies outside the {:.3} s input",
            span_s.0,
            span_s.1,
            audio.len() as f64 / rate as f64
        )));
    }
    let seed = resolve_seed(common.seed, &cfg);
    let sampler = sampler(&cfg, sampling.n_steps, seed);
    let encoding = model.encode_text(text)?;
    let mut outputs = Vec::new();
    for &scale in scales {
        let new_len = ((span.len() as f64) * scale).round().max(1.0) as usize;
        let (mask, out_len) =
            EditMask::replace_span(&audio, span.clone(), new_len, model.config.segment_length)?;
        let full = inpaint(&model, &encoding, &mask, speaker, &sampler)?;
        let path = scaled_output(output, scale, scales.len() > 1);
        write_wav(&path, &full[..out_len], rate)?;
        println!("output={}", path.display());
        outputs.push(json!({
            "path": path.display().to_string(),
            "scale": scale,
            "span_samples": [span.start, span.start + new_len],
            "samples": out_len,
        }));
    }
    write_json(
        &sidecar_path(output),
        &json!({
            "command": "edit",
            "seed": seed,
            "config_hash": ckpt.config.hash(),
            "checkpoint": ckpt_path.display().to_string(),
            "text": text,
            "input": input.display().to_string(),
            "span_s": [span_s.0, span_s.1],
            "sampler": sampler,
            "outputs": outputs,
        }),
    )
}

pub fn classify(
    common: &Common,
    checkpoint: Option<PathBuf>,
    probe: &Path,
    candidates: &[PathBuf],
    text: &str,
    n_timesteps: Option<usize>,
    output: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let (ckpt_path, ckpt, model) = load_model(&checkpoint, &cfg)?;
    let rate = model.config.sample_rate;
    let probe_audio = read_at_rate(probe, rate)?;
    let cands = candidates
        .iter()
        .map(|c| read_at_rate(c, rate))
        .collect::<Result<Vec<_>>>()?;
    let seed = resolve_seed(common.seed, &cfg);
    let mut options = cfg.classify.clone();
    if let Some(n) = n_timesteps {
        options.n_timesteps = n;
    }
    let encoding = model.encode_text(text)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let result = speaker_classify(&probe_audio, &cands, &model, &encoding, &options, &mut rng)?;
    let report = json!({
        "command": "classify",
        "seed": seed,
        "config_hash": ckpt.config.hash(),
        "checkpoint": ckpt_path.display().to_string(),
        "probe": probe.display().to_string(),
        "candidates": candidates.iter().map(|c| c.display().to_string()).collect::<Vec<_>>(),
        "index": result.index,
        "chosen": candidates[result.index].display().to_string(),
        "scores": result.scores,
        "alpha_bars": result.alpha_bars,
        "n_timesteps": options.n_timesteps,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(path) = output {
        write_json(&path, &report)?;
    }
    Ok(())
}

fn manifest_utterances(path: &Path) -> Result<Vec<Utterance>> {
    read_manifest(path)?
        .into_iter()
        .map(|r| {
            Ok(Utterance {
                id: r.audio_path.display().to_string(),
                waveform: read_wav(&r.audio_path)?,
            })
        })
        .collect()
}

fn configured_embedder(cfg: &RunConfig) -> Result<Box<dyn SpeakerEmbedder>> {
    Ok(match cfg.embedder.backend {
        EmbedderBackend::Spectral => {
            let mut e = SpectralEmbedder::default();
            if let Some(rate) = cfg.embedder.sample_rate {
                e.sample_rate = rate;
            }
            Box::new(e)
        }
        EmbedderBackend::Precomputed => {
            let path = cfg.embedder.path.as_ref().ok_or_else(|| {
                Error::Config("precomputed embedder needs `embedder.path`".into())
            })?;
            Box::new(PrecomputedEmbedder::load(path)?)
        }
    })
}

pub fn fsd(
    common: &Common,
    manifest_a: &Path,
    manifest_b: &Path,
    embeddings_a: Option<PathBuf>,
    embeddings_b: Option<PathBuf>,
    output: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let set_a = manifest_utterances(manifest_a)
        .with_context(|| format!("reading {}", manifest_a.display()))?;
    let set_b = manifest_utterances(manifest_b)
        .with_context(|| format!("reading {}", manifest_b.display()))?;
    let (emb_a, emb_b): (Box<dyn SpeakerEmbedder>, Option<Box<dyn SpeakerEmbedder>>) =
        match (embeddings_a, embeddings_b) {
            (Some(a), Some(b)) => (
                Box::new(PrecomputedEmbedder::load(&a)?),
                Some(Box::new(PrecomputedEmbedder::load(&b)?)),
            ),
            (Some(a), None) | (None, Some(a)) => (Box::new(PrecomputedEmbedder::load(&a)?), None),
            (None, None) => (configured_embedder(&cfg)?, None),
        };
    let emb_b_ref: &dyn SpeakerEmbedder = emb_b.as_deref().unwrap_or(emb_a.as_ref());
    if emb_a.dim() != emb_b_ref.dim() {
        return Err(Error::Shape(format!(
            "embedders disagree on dimension: {} ({}) vs {} ({})",
            emb_a.dim(),
            emb_a.name(),
            emb_b_ref.dim(),
            emb_b_ref.name()
        ))
        .into());
    }
    let stats_a = gaussian_stats(&embed_set(&set_a, emb_a.as_ref())?)?;
    let stats_b = gaussian_stats(&embed_set(&set_b, emb_b_ref)?)?;
    let name = if emb_b.is_some() {
        format!("{} | {}", emb_a.name(), emb_b_ref.name())
    } else {
        emb_a.name()
    };
    let report = FsdReport {
        embedder: name,
        dimension: emb_a.dim(),
        count_a: stats_a.count,
        count_b: stats_b.count,
        fsd: frechet(&stats_a, &stats_b)?,
    };
    let value = json!({
        "command": "fsd",
        "manifest_a": manifest_a.display().to_string(),
        "manifest_b": manifest_b.display().to_string(),
        "report": report,
    });
    println!("{}", serde_json::to_string_pretty(&value)?);
    if let Some(path) = output {
        write_json(&path, &value)?;
    }
    Ok(())
}
