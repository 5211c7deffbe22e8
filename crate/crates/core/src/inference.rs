//! Ancestral sampling, trailing-silence trimming, prompted synthesis,
//! inpainting and diffusion-loss speaker classification.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{build_inference_schedule, forward_diffuse, reverse_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::text::TextEncoding;

/// Noise prediction for one waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonPrediction {
    pub epsilon: Vec<f64>,
    pub omega: f64,
}

/// Anything that predicts the noise in a fixed-length waveform.
pub trait EpsilonModel: Sync {
    fn segment_length(&self) -> usize;

    fn predict(
        &self,
        noisy: &[f64],
        sqrt_alpha_bar: f64,
        text: &TextEncoding,
        speaker: Option<usize>,
    ) -> Result<EpsilonPrediction>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub seed: u64,
    pub trim_chunk: usize,
    pub trim_cutoff: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 1000,
            seed: 0,
            trim_chunk: 1024,
            trim_cutoff: 0.02,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 1 {
            return Err(Error::Parameter("sampler needs at least one step".into()));
        }
        if self.trim_chunk == 0 {
            return Err(Error::Parameter("trim chunk must be positive".into()));
        }
        if !(self.trim_cutoff >= 0.0) {
            return Err(Error::Parameter(format!(
                "trim cutoff {} must be non-negative",
                self.trim_cutoff
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trimmed {
    pub samples: Vec<f64>,
    /// Every chunk fell below the cutoff.
    pub all_silent: bool,
}

/// Drops the maximal trailing run of chunks whose mean absolute amplitude
/// is at most the cutoff; a final partial chunk counts as a chunk.
pub fn trim_silence(waveform: &[f64], sampler: &SamplerConfig) -> Trimmed {
    let chunk = sampler.trim_chunk.max(1);
    let mut end = waveform.len();
    while end > 0 {
        let start = (end - 1) / chunk * chunk;
        let part = &waveform[start..end];
        let mean = part.iter().map(|v| v.abs()).sum::<f64>() / part.len() as f64;
        if mean > sampler.trim_cutoff {
            break;
        }
        end = start;
    }
    let all_silent = end == 0 && !waveform.is_empty();
    if all_silent {
        warn!("waveform is silent throughout; trimming leaves nothing");
    }
    Trimmed {
        samples: waveform[..end].to_vec(),
        all_silent,
    }
}

/// Per-sample known/unknown labelling with reference values.
#[derive(Clone, Debug, PartialEq)]
pub struct EditMask {
    known: Vec<bool>,
    reference: Vec<f64>,
}

impl EditMask {
    pub fn new(known: Vec<bool>, reference: Vec<f64>) -> Result<Self> {
        if known.len() != reference.len() {
            return Err(Error::Shape(format!(
                "mask has {} entries but reference has {} samples",
                known.len(),
                reference.len()
            )));
        }
        if let Some(i) = known
            .iter()
            .zip(&reference)
            .position(|(&k, v)| k && !v.is_finite())
        {
            return Err(Error::Input(format!("reference sample {i} is not finite")));
        }
        Ok(Self { known, reference })
    }

    /// The first `prompt_len` samples of `prompt` known, the rest free.
    pub fn prompt(prompt: &[f64], prompt_len: usize, length: usize) -> Result<Self> {
        if prompt_len > length {
            return Err(Error::Input(format!(
                "prompt of {prompt_len} samples exceeds the model length {length}"
            )));
        }
        if prompt.len() < prompt_len {
            return Err(Error::Input(format!(
                "prompt length {prompt_len} exceeds the {} supplied samples",
                prompt.len()
            )));
        }
        let mut reference = vec![0.0; length];
        reference[..prompt_len].copy_from_slice(&prompt[..prompt_len]);
        Self::new((0..length).map(|i| i < prompt_len).collect(), reference)
    }

    /// Known everywhere except `gap` (a half-open sample range).
    pub fn with_gap(reference: Vec<f64>, gap: std::ops::Range<usize>) -> Result<Self> {
        if gap.end > reference.len() || gap.start > gap.end {
            return Err(Error::Input(format!(
                "gap {}..{} outside a waveform of {} samples",
                gap.start,
                gap.end,
                reference.len()
            )));
        }
        let known = (0..reference.len()).map(|i| !gap.contains(&i)).collect();
        Self::new(known, reference)
    }

    /// Replaces `span` of `input` with a free region of `new_len` samples,
    /// keeping the audio on both sides; the rest of the model length is
    /// known silence. Returns the mask and the edited waveform's length.
    pub fn replace_span(
        input: &[f64],
        span: std::ops::Range<usize>,
        new_len: usize,
        length: usize,
    ) -> Result<(Self, usize)> {
        if span.start >= span.end || span.end > input.len() {
            return Err(Error::Input(format!(
                "span {}..{} lies outside the {}-sample input",
                span.start,
                span.end,
                input.len()
            )));
        }
        let out_len = input.len() - span.len() + new_len;
        if out_len > length {
            return Err(Error::Input(format!(
                "edited waveform of {out_len} samples exceeds the model length {length}"
            )));
        }
        let mut reference = vec![0.0; length];
        reference[..span.start].copy_from_slice(&input[..span.start]);
        let tail = span.start + new_len;
        reference[tail..out_len].copy_from_slice(&input[span.end..]);
        let known = (0..length).map(|i| i < span.start || i >= tail).collect();
        Ok((Self::new(known, reference)?, out_len))
    }

    pub fn len(&self) -> usize {
        self.known.len()
    }

    pub fn is_empty(&self) -> bool {
        self.known.is_empty()
    }

    pub fn known(&self) -> &[bool] {
        &self.known
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn unknown_count(&self) -> usize {
        self.known.iter().filter(|&&k| !k).count()
    }
}

/// Seconds-denominated span to samples: start rounds down, end rounds up.
pub fn span_to_samples(
    start_s: f64,
    end_s: f64,
    sample_rate: u32,
) -> Result<std::ops::Range<usize>> {
    if !(start_s >= 0.0 && end_s > start_s) || !end_s.is_finite() {
        return Err(Error::Input(format!("invalid span {start_s}..{end_s} s")));
    }
    let r = sample_rate as f64;
    Ok((start_s * r).floor() as usize..(end_s * r).ceil() as usize)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Stream id of the known-region noise, kept apart from the main stream
/// so that an all-free mask reproduces unconditional sampling exactly.
const KNOWN_NOISE_STREAM: u64 = 1;

/// Runs the reverse process from pure noise, replacing the predicted noise
/// on known samples with the noise actually used to diffuse the reference.
/// `observe` sees `(n, y_n)` after the known region has been reset.
pub fn sample_with_mask<M: EpsilonModel + ?Sized>(
    model: &M,
    text: &TextEncoding,
    speaker: Option<usize>,
    mask: Option<&EditMask>,
    sampler: &SamplerConfig,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>> {
    sampler.validate()?;
    let len = model.segment_length();
    if let Some(m) = mask {
        if m.len() != len {
            return Err(Error::Shape(format!(
                "mask covers {} samples, model length is {len}",
                m.len()
            )));
        }
    }
    let schedule = build_inference_schedule(sampler.n_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut known_rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    known_rng.set_stream(KNOWN_NOISE_STREAM);

    let mut y = gaussian(&mut rng, len);
    for n in (1..=schedule.n_steps()).rev() {
        let known_eps = mask.map(|m| reset_known(&mut y, m, &schedule, n, &mut known_rng));
        observe(n, &y);
        let sqrt_ab = schedule.alpha_bar(n).sqrt();
        let mut eps = model.predict(&y, sqrt_ab, text, speaker)?.epsilon;
        if eps.len() != len {
            return Err(Error::Shape(format!(
                "model returned {} samples for {len}",
                eps.len()
            )));
        }
        if let (Some(m), Some(ke)) = (mask, known_eps) {
            for i in 0..len {
                if m.known[i] {
                    eps[i] = ke[i];
                }
            }
        }
        let z = if n > 1 {
            gaussian(&mut rng, len)
        } else {
            vec![0.0; len]
        };
        y = reverse_step(&y, &eps, &schedule, n, &z)?;
    }
    Ok(y)
}

/// Sets the known samples of `y_n` to `√ᾱ_n·ref + √(1−ᾱ_n)·ε` and returns
/// the `ε` used (zero on free samples).
fn reset_known(
    y: &mut [f64],
    mask: &EditMask,
    schedule: &NoiseSchedule,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let sqrt_ab = schedule.alpha_bar(n).sqrt();
    let noise = (1.0 - schedule.alpha_bar(n)).sqrt();
    let mut eps = vec![0.0; y.len()];
    for i in 0..y.len() {
        if mask.known[i] {
            let e: f64 = rng.sample(StandardNormal);
            eps[i] = e;
            y[i] = sqrt_ab * mask.reference[i] + noise * e;
        }
    }
    eps
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    /// Output after trailing-silence trimming.
    pub samples: Vec<f64>,
    /// Untrimmed model-length output.
    pub full: Vec<f64>,
    pub all_silent: bool,
}

fn finish(full: Vec<f64>, sampler: &SamplerConfig) -> Synthesis {
    let t = trim_silence(&full, sampler);
    Synthesis {
        samples: t.samples,
        full,
        all_silent: t.all_silent,
    }
}

pub fn synthesize<M: EpsilonModel + ?Sized>(
    model: &M,
    text: &TextEncoding,
    speaker: Option<usize>,
    sampler: &SamplerConfig,
) -> Result<Synthesis> {
    let full = sample_with_mask(model, text, speaker, None, sampler, |_, _| {})?;
    Ok(finish(full, sampler))
}

/// Continues `prompt[..prompt_len]`; `text` should cover the prompt's
/// transcript followed by the continuation.
pub fn prompt_synthesize<M: EpsilonModel + ?Sized>(
    model: &M,
    text: &TextEncoding,
    prompt: &[f64],
    prompt_len: usize,
    speaker: Option<usize>,
    sampler: &SamplerConfig,
) -> Result<Synthesis> {
    let mask = EditMask::prompt(prompt, prompt_len, model.segment_length())?;
    let full = if prompt_len == 0 {
        sample_with_mask(model, text, speaker, None, sampler, |_, _| {})?
    } else if prompt_len == mask.len() {
        mask.reference.clone()
    } else {
        sample_with_mask(model, text, speaker, Some(&mask), sampler, |_, _| {})?
    };
    Ok(finish(full, sampler))
}

/// Regenerates the unknown samples of `mask`; returns the full-length result.
pub fn inpaint<M: EpsilonModel + ?Sized>(
    model: &M,
    text: &TextEncoding,
    mask: &EditMask,
    speaker: Option<usize>,
    sampler: &SamplerConfig,
) -> Result<Vec<f64>> {
    if mask.unknown_count() == 0 {
        return Err(Error::Input("mask leaves nothing to generate".into()));
    }
    sample_with_mask(model, text, speaker, Some(mask), sampler, |_, _| {})
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyOptions {
    pub n_timesteps: usize,
    /// Bounds of the uniformly drawn `ᾱ`.
    pub alpha_bar_range: (f64, f64),
    /// Reuse one `ε` per draw across all candidates.
    pub shared_noise: bool,
    /// Per-draw aggregation weights; uniform when absent.
    pub weights: Option<Vec<f64>>,
    /// Score candidates on the rayon pool.
    pub parallel: bool,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            n_timesteps: 1,
            alpha_bar_range: (0.04, 0.96),
            shared_noise: true,
            weights: None,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub index: usize,
    /// Weighted mean squared noise error on the probe region per candidate.
    pub scores: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Picks the candidate whose concatenation with `probe` lets the model
/// predict the noise on the probe region most accurately.
pub fn speaker_classify<M: EpsilonModel + ?Sized, R: Rng + ?Sized>(
    probe: &[f64],
    candidates: &[Vec<f64>],
    model: &M,
    text: &TextEncoding,
    options: &ClassifyOptions,
    rng: &mut R,
) -> Result<Classification> {
    if candidates.is_empty() {
        return Err(Error::Input("no candidate waveforms".into()));
    }
    if probe.is_empty() {
        return Err(Error::Input("probe waveform is empty".into()));
    }
    if options.n_timesteps == 0 {
        return Err(Error::Parameter("n_timesteps must be at least 1".into()));
    }
    let (lo, hi) = options.alpha_bar_range;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::Parameter(format!(
            "alpha_bar range ({lo}, {hi}) must lie inside (0, 1)"
        )));
    }
    let len = model.segment_length();
    for (i, c) in candidates.iter().enumerate() {
        if probe.len() + c.len() > len {
            return Err(Error::Input(format!(
                "probe plus candidate {i} spans {} samples, more than the model length {len}",
                probe.len() + c.len()
            )));
        }
    }
    let weights = match &options.weights {
        Some(w) if w.len() != options.n_timesteps => {
            return Err(Error::Parameter(format!(
                "{} aggregation weights for {} timesteps",
                w.len(),
                options.n_timesteps
            )))
        }
        Some(w) => w.clone(),
        None => vec![1.0 / options.n_timesteps as f64; options.n_timesteps],
    };

    // All randomness is drawn up front so the scores do not depend on the
    // order in which candidates are evaluated.
    let alpha_bars: Vec<f64> = (0..options.n_timesteps)
        .map(|_| rng.gen_range(lo..=hi))
        .collect();
    let noise: Vec<Vec<Vec<f64>>> = if options.shared_noise {
        let shared: Vec<Vec<f64>> = (0..options.n_timesteps)
            .map(|_| (0..len).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        vec![shared]
    } else {
        candidates
            .iter()
            .map(|_| {
                (0..options.n_timesteps)
                    .map(|_| (0..len).map(|_| rng.sample(StandardNormal)).collect())
                    .collect()
            })
            .collect()
    };

    let score = |ci: usize| -> Result<f64> {
        let mut y0 = vec![0.0; len];
        y0[..probe.len()].copy_from_slice(probe);
        y0[probe.len()..probe.len() + candidates[ci].len()].copy_from_slice(&candidates[ci]);
        let eps_set = if options.shared_noise {
            &noise[0]
        } else {
            &noise[ci]
        };
        let mut total = 0.0;
        for (d, &ab) in alpha_bars.iter().enumerate() {
            let sqrt_ab = ab.sqrt();
            let noisy = forward_diffuse(&y0, sqrt_ab, &eps_set[d])?;
            let pred = model.predict(&noisy, sqrt_ab, text, None)?.epsilon;
            let err: f64 = pred[..probe.len()]
                .iter()
                .zip(&eps_set[d][..probe.len()])
                .map(|(p, e)| (p - e) * (p - e))
                .sum();
            total += weights[d] * err / probe.len() as f64;
        }
        Ok(total)
    };
    let scores: Vec<f64> = if options.parallel {
        (0..candidates.len())
            .into_par_iter()
            .map(score)
            .collect::<Result<_>>()?
    } else {
        (0..candidates.len()).map(score).collect::<Result<_>>()?
    };
    let mut index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[index] {
            index = i;
        }
    }
    Ok(Classification {
        index,
        scores,
        alpha_bars,
    })
}

/// Synthetic noise predictor for exercising the classifier.
///
/// It stores the clean probe and one clean template per candidate. Given a
/// noisy input it recovers the exact noise on the probe region, identifies
/// the candidate whose template best explains the rest of the input, and
/// returns `(1−κ)·ε + b_c·u + s·ξ` on the probe region, where `u` is a fixed
/// unit-variance pattern and `ξ` is pseudo-random noise seeded by the input
/// bits.
#[derive(Clone, Debug)]
pub struct OracleModel {
    pub length: usize,
    pub probe: Vec<f64>,
    pub templates: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub shrink: f64,
    pub noise: f64,
    pattern: Vec<f64>,
}

impl OracleModel {
    pub fn new(
        length: usize,
        probe: Vec<f64>,
        templates: Vec<Vec<f64>>,
        biases: Vec<f64>,
        shrink: f64,
        noise: f64,
    ) -> Result<Self> {
        if templates.len() != biases.len() || templates.is_empty() {
            return Err(Error::Parameter("one bias per template is required".into()));
        }
        // zero mean, unit variance
        let (hi, lo) = (1.5f64.sqrt(), -(2.0f64 / 3.0).sqrt());
        let pattern = (0..probe.len())
            .map(|i| if (i * 7 + 3) % 5 < 2 { hi } else { lo })
            .collect();
        Ok(Self {
            length,
            probe,
            templates,
            biases,
            shrink,
            noise,
            pattern,
        })
    }

    fn identify(&self, noisy: &[f64], sqrt_ab: f64) -> usize {
        let start = self.probe.len();
        let mut best = (f64::INFINITY, 0);
        for (c, tpl) in self.templates.iter().enumerate() {
            let d: f64 = (0..self.length - start)
                .map(|i| {
                    let clean = tpl.get(i).copied().unwrap_or(0.0);
                    let r = noisy[start + i] - sqrt_ab * clean;
                    r * r
                })
                .sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }
}

impl EpsilonModel for OracleModel {
    fn segment_length(&self) -> usize {
        self.length
    }

    fn predict(
        &self,
        noisy: &[f64],
        sqrt_alpha_bar: f64,
        _text: &TextEncoding,
        _speaker: Option<usize>,
    ) -> Result<EpsilonPrediction> {
        use sha2::{Digest, Sha256};
        if noisy.len() != self.length {
            return Err(Error::Shape(format!(
                "oracle expects {} samples",
                self.length
            )));
        }
        let c = self.identify(noisy, sqrt_alpha_bar);
        let mut hasher = Sha256::new();
        for v in noisy {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut xi_rng = ChaCha8Rng::from_seed(digest.into());
        let scale = (1.0 - sqrt_alpha_bar * sqrt_alpha_bar).sqrt();
        let mut epsilon = vec![0.0; self.length];
        for i in 0..self.probe.len() {
            let true_eps = (noisy[i] - sqrt_alpha_bar * self.probe[i]) / scale;
            let xi: f64 = xi_rng.sample(StandardNormal);
            epsilon[i] =
                (1.0 - self.shrink) * true_eps + self.biases[c] * self.pattern[i] + self.noise * xi;
        }
        Ok(EpsilonPrediction {
            epsilon,
            omega: 1.0,
        })
    }
}
