//! Dataset ingestion, batching, the optimisation step and the training loop.

mod checkpoint;
mod data;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{cast, to_f64, Gradients, ParamId, ParamStore, Scalar, Tape, Var};
use crate::diffusion::{build_training_schedule, LossBreakdown, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{config_diff, ModelConfig, TtsModel};
use crate::unet::UNet;

pub use checkpoint::{
    checkpoint_path, latest_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use data::{
    ingest, prepare_batch, read_manifest, speaker_list, synthetic_utterance, write_manifest,
    write_synthetic_corpus, TrainBatch, TrainExample, Utterance, UtteranceRecord, PADDING_WEIGHT,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup, then decay proportional to `1/√step`.
    InverseSqrt,
    Constant,
}

/// Optimiser and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub schedule_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            learning_rate: 2e-4,
            lr_schedule: LrSchedule::InverseSqrt,
            warmup_steps: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            checkpoint_every: 500,
            log_every: 10,
            schedule_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate {} is invalid",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        build_training_schedule(self.schedule_steps, self.beta_min, self.beta_max)
    }

    /// Learning rate applied at 1-based `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::InverseSqrt if self.warmup_steps == 0 => self.learning_rate,
            LrSchedule::InverseSqrt => {
                let w = self.warmup_steps as f64;
                self.learning_rate * (step / w).min((w / step).sqrt())
            }
        }
    }
}

/// Adam moment estimates keyed by parameter.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<ParamId, Array2<F>>,
    pub v: BTreeMap<ParamId, Array2<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            if !params.is_trainable(id) {
                continue;
            }
            let m = self.m.entry(id).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(id).or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|m, v, &g| {
                    *m = cast::<F>(b1) * *m + cast::<F>(1.0 - b1) * g;
                    *v = cast::<F>(b2) * *v + cast::<F>(1.0 - b2) * g * g;
                });
            if lr == 0.0 {
                continue;
            }
            let (lr_t, eps) = (cast::<F>(lr), cast::<F>(self.eps));
            let (c1, c2) = (cast::<F>(c1), cast::<F>(c2));
            ndarray::Zip::from(params.value_mut(id))
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    *p -= lr_t * (m / c1) / ((v / c2).sqrt() + eps);
                });
        }
    }
}

/// Diagnostics of one optimisation step, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub total: f64,
    pub residual: f64,
    pub omega_mean: f64,
    pub grad_norm: f64,
    pub learning_rate: f64,
    pub examples: Vec<LossBreakdown>,
}

/// Loss `residual·e^(−s) + s` (with `s = ln ω`) and its parameter gradients
/// for one example.
pub fn example_gradients<F: Scalar>(
    unet: &UNet,
    params: &ParamStore<F>,
    example: &TrainExample,
) -> Result<(Gradients<F>, LossBreakdown)> {
    let len = example.noisy.len();
    let row = |v: &[f64]| Array2::from_shape_fn((1, len), |(_, j)| cast::<F>(v[j]));
    let tape = Tape::<F>::new();
    let out = unet.forward(
        &tape,
        params,
        &Var::constant(row(&example.noisy)),
        example.sqrt_alpha_bar,
        &example.text,
        example.speaker,
    )?;
    let residual = tape.weighted_mse(
        &out.epsilon,
        &row(&example.epsilon),
        &row(&example.sample_weights),
    );
    let s = &out.log_omega;
    let loss = tape.add(
        &tape.mul(&residual, &tape.exp(&tape.scale(s, cast(-1.0)))),
        s,
    );
    let breakdown = LossBreakdown::from_parts(to_f64(residual.item()), to_f64(s.item()));
    if !to_f64(loss.item()).is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at noise level sqrt(alpha_bar) = {}",
            example.sqrt_alpha_bar
        )));
    }
    Ok((tape.backward(&loss), breakdown))
}

/// Averages per-example gradients over the batch, clips, and applies Adam.
pub fn train_step<F: Scalar>(
    unet: &UNet,
    params: &mut ParamStore<F>,
    optimizer: &mut Adam<F>,
    batch: &TrainBatch,
    learning_rate: f64,
    grad_clip: f64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    let mut total = Gradients::new();
    let mut examples = Vec::with_capacity(batch.len());
    for ex in &batch.examples {
        let (g, b) = example_gradients(unet, params, ex).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite(format!(
                "loss is not finite for batch with noise levels {:?}",
                batch.noise_levels()
            )),
            other => other,
        })?;
        total.merge(g);
        examples.push(b);
    }
    total.scale(cast(1.0 / batch.len() as f64));
    let grad_norm = total.global_norm();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient is not finite for batch with noise levels {:?}",
            batch.noise_levels()
        )));
    }
    if grad_clip > 0.0 && grad_norm > grad_clip {
        total.scale(cast(grad_clip / grad_norm));
    }
    optimizer.update(params, &total, learning_rate);
    let n = examples.len() as f64;
    Ok(StepReport {
        step: optimizer.step,
        total: examples.iter().map(|b| b.total).sum::<f64>() / n,
        residual: examples.iter().map(|b| b.residual).sum::<f64>() / n,
        omega_mean: examples.iter().map(|b| b.omega).sum::<f64>() / n,
        grad_norm,
        learning_rate,
        examples,
    })
}

/// The random stream used for step `step` of a run seeded with `seed`;
/// independent of how many steps ran before it in this process.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Everything a training run needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub start_step: u64,
    pub final_step: u64,
    pub last: Option<StepReport>,
    pub model: TtsModel,
    pub speakers: Vec<String>,
}

/// Trains from a manifest, writing periodic checkpoints to `checkpoint_dir`.
/// With `resume`, continues from the newest checkpoint there.
pub fn run_training(
    run: &TrainRun,
    manifest: &Path,
    checkpoint_dir: &Path,
    resume: bool,
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainOutcome> {
    run.model.validate()?;
    run.train.validate()?;
    let records = read_manifest(manifest)?;
    let names = speaker_list(&records);
    let speakers = if run.model.unet.speaker_count == 0 {
        Vec::new()
    } else if names.len() > run.model.unet.speaker_count {
        return Err(Error::Config(format!(
            "manifest has {} speakers but the model table holds {}",
            names.len(),
            run.model.unet.speaker_count
        )));
    } else {
        names
    };
    std::fs::create_dir_all(checkpoint_dir).map_err(|e| Error::io(checkpoint_dir, e))?;

    let (mut model, mut optimizer, start_step) = match resume
        .then(|| latest_checkpoint(checkpoint_dir))
        .transpose()?
    {
        Some(Some(path)) => {
            let ckpt = Checkpoint::load(&path)?;
            if ckpt.config.hash() != run.model.hash() {
                return Err(Error::Config(format!(
                    "{} was written with a different model config: {}",
                    path.display(),
                    config_diff(&ckpt.config, &run.model).join("; ")
                )));
            }
            if ckpt.speakers != speakers {
                return Err(Error::Config(format!(
                    "{} was trained on speakers {:?}, manifest has {:?}",
                    path.display(),
                    ckpt.speakers,
                    speakers
                )));
            }
            let mut model = TtsModel::new(run.model.clone(), run.seed)?;
            ckpt.apply_to(&mut model.params)?;
            let opt = ckpt.optimizer(&run.train, &model.params)?;
            (model, opt, ckpt.step)
        }
        _ => (
            TtsModel::new(run.model.clone(), run.seed)?,
            Adam::new(&run.train),
            0,
        ),
    };
    log::info!(
        "training from step {start_step}, model config {}",
        run.model.hash()
    );

    let utterances = ingest(
        &records,
        run.model.sample_rate,
        run.model.segment_length,
        &model.text,
        &speakers,
    )?;
    let schedule = run.train.noise_schedule()?;
    let batch_size = run.train.batch_size.min(utterances.len());
    let mut last = None;
    let mut latest = None;
    for step in start_step + 1..=run.train.steps {
        let mut rng = step_rng(run.seed, step);
        let picks = sample_indices(&mut rng, utterances.len(), batch_size);
        let chosen: Vec<&Utterance> = picks.iter().map(|i| &utterances[i]).collect();
        let batch = prepare_batch(&chosen, run.model.segment_length, &schedule, &mut rng)?;
        let lr = run.train.learning_rate_at(step);
        let report = train_step(
            &model.unet,
            &mut model.params,
            &mut optimizer,
            &batch,
            lr,
            run.train.grad_clip,
        )?;
        let report = StepReport { step, ..report };
        if run.train.log_every > 0 && step % run.train.log_every == 0 {
            log::info!(
                "step {step}: loss {:.5} residual {:.5} omega {:.4} |g| {:.3} lr {:.2e}",
                report.total,
                report.residual,
                report.omega_mean,
                report.grad_norm,
                lr
            );
        }
        on_step(&report);
        last = Some(report);
        let periodic = run.train.checkpoint_every > 0 && step % run.train.checkpoint_every == 0;
        if periodic || step == run.train.steps {
            let ckpt = Checkpoint::capture(run, step, &speakers, &model.params, Some(&optimizer));
            let path = checkpoint_path(checkpoint_dir, step);
            ckpt.save(&path)?;
            latest = Some(path);
        }
    }
    let checkpoint = match latest {
        Some(p) => p,
        None => {
            let path = checkpoint_path(checkpoint_dir, start_step);
            if !path.exists() {
                Checkpoint::capture(run, start_step, &speakers, &model.params, Some(&optimizer))
                    .save(&path)?;
            }
            path
        }
    };
    Ok(TrainOutcome {
        checkpoint,
        start_step,
        final_step: run.train.steps.max(start_step),
        last,
        model,
        speakers,
    })
}
