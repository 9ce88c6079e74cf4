//! Randomized multi-task training of the hair mapper.
//!
//! Every iteration draws a task (edit the hairstyle, the color, or both),
//! draws text or a reference image for each side being edited, and takes one
//! Adam step on the weighted loss. The loop is single-threaded and fully
//! determined by the configured seed.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backends::BackendBundle;
use crate::checkpoint::{self, Checkpoint, TrainProgress};
use crate::conditions::{condition_from_reference, condition_from_text, Condition, ConditionPair, PromptCorpus};
use crate::config::{Config, LatentSource, TrainConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::{LatentCode, LatentDelta};
use crate::losses::{self, LossBreakdown, LossConfig, LossContext, TaskType};
use crate::mapper::{apply_edit, HairMapperParams};
use crate::optim::Adam;
use crate::rng::component_rng;

/// One sampled training example.
#[derive(Clone, Debug)]
pub struct TrainTask {
    pub latent: LatentCode,
    pub pair: ConditionPair,
    pub task_type: TaskType,
}

/// Source of input latents for task sampling.
#[derive(Clone, Debug)]
pub enum LatentPool {
    /// Standard-normal draws of the given shape.
    Prior { layers: usize, dim: usize },
    /// Latents obtained by inverting training images.
    Inverted(Vec<LatentCode>),
}

/// Prompt corpus, reference pool and latent source with conditions encoded
/// once up front.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    style_text: Vec<Condition>,
    color_text: Vec<Condition>,
    references: Vec<Condition>,
    latents: LatentPool,
    task_probs: [f64; 3],
    modality_probs: [f64; 2],
}

fn categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave acc slightly below 1; fall back to the last
    // category with non-zero mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

impl TaskSampler {
    pub fn new(
        corpus: &PromptCorpus,
        references: &[(String, Image)],
        latents: LatentPool,
        train: &TrainConfig,
        backends: &BackendBundle,
    ) -> Result<Self> {
        if corpus.hairstyles.is_empty() || corpus.colors.is_empty() {
            return Err(Error::Config("prompt corpus is empty".into()));
        }
        if references.is_empty() && train.modality_probs[1] > 0.0 {
            return Err(Error::Config("reference pool is empty".into()));
        }
        if let LatentPool::Inverted(v) = &latents {
            if v.is_empty() {
                return Err(Error::Config("no training latents".into()));
            }
        }
        let te = backends.text_encoder.as_ref();
        let encode_all = |prompts: &[String]| -> Result<Vec<Condition>> {
            prompts.iter().map(|p| condition_from_text(p, te)).collect()
        };
        let references = references
            .iter()
            .map(|(id, img)| {
                condition_from_reference(img, id, backends.parser.as_ref(), backends.image_encoder.as_ref())
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            style_text: encode_all(&corpus.hairstyles)?,
            color_text: encode_all(&corpus.colors)?,
            references,
            latents,
            task_probs: train.task_probs,
            modality_probs: train.modality_probs,
        })
    }

    fn side(&self, rng: &mut ChaCha8Rng, texts: &[Condition]) -> Condition {
        if categorical(rng, &self.modality_probs) == 0 {
            texts[rng.random_range(0..texts.len())].clone()
        } else {
            self.references[rng.random_range(0..self.references.len())].clone()
        }
    }

    fn latent(&self, rng: &mut ChaCha8Rng) -> Result<LatentCode> {
        match &self.latents {
            LatentPool::Prior { layers, dim } => {
                let data = (0..layers * dim).map(|_| StandardNormal.sample(rng)).collect();
                LatentCode::new(*layers, *dim, data)
            }
            LatentPool::Inverted(v) => Ok(v[rng.random_range(0..v.len())].clone()),
        }
    }

    /// Draws the task type, then each active side's modality and content,
    /// then the input latent.
    pub fn sample_task(&self, rng: &mut ChaCha8Rng) -> Result<TrainTask> {
        let task_type = TaskType::ALL[categorical(rng, &self.task_probs)];
        let style = match task_type {
            TaskType::StyleOnly | TaskType::Both => self.side(rng, &self.style_text),
            TaskType::ColorOnly => Condition::None,
        };
        let color = match task_type {
            TaskType::ColorOnly | TaskType::Both => self.side(rng, &self.color_text),
            TaskType::StyleOnly => Condition::None,
        };
        Ok(TrainTask {
            latent: self.latent(rng)?,
            pair: ConditionPair::new(style, color),
            task_type,
        })
    }
}

/// Renders `count` reference images from seeded prior latents.
pub fn generated_references(seed: u64, count: usize, backends: &BackendBundle) -> Result<Vec<(String, Image)>> {
    let mut rng = component_rng(seed, "train.references");
    let (layers, dim) = backends.latent_shape();
    (0..count)
        .map(|i| {
            let data = (0..layers * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let w = LatentCode::new(layers, dim, data)?;
            Ok((format!("generated-{i:04}"), backends.generator.generate(&w)?))
        })
        .collect()
}

/// The forward pass of one task and everything needed to backpropagate it.
pub struct TaskForward {
    pub delta: LatentDelta,
    pub edited_latent: LatentCode,
    pub edited: Image,
    pub reconstruction: Image,
}

fn forward(params: &HairMapperParams, task: &TrainTask, backends: &BackendBundle) -> Result<(TaskForward, crate::mapper::MapperTrace)> {
    let (delta, trace) = params.forward_traced(&task.latent, &task.pair)?;
    let edited_latent = apply_edit(&task.latent, &delta)?;
    let edited = backends.generator.generate(&edited_latent)?;
    let reconstruction = backends.generator.generate(&task.latent)?;
    Ok((
        TaskForward {
            delta,
            edited_latent,
            edited,
            reconstruction,
        },
        trace,
    ))
}

/// The loss breakdown of one task under the given parameters.
pub fn task_loss(
    params: &HairMapperParams,
    task: &TrainTask,
    backends: &BackendBundle,
    losses: &LossConfig,
) -> Result<LossBreakdown> {
    let (fwd, _) = forward(params, task, backends)?;
    losses::total_loss(
        LossContext {
            pair: &task.pair,
            edited: &fwd.edited,
            reconstruction: &fwd.reconstruction,
            delta: &fwd.delta,
        },
        backends,
        losses,
    )
}

/// Loss breakdown and `d total / d params` for one task.
pub fn loss_and_gradient(
    params: &HairMapperParams,
    task: &TrainTask,
    backends: &BackendBundle,
    losses: &LossConfig,
) -> Result<(LossBreakdown, HairMapperParams)> {
    let (fwd, trace) = forward(params, task, backends)?;
    let ev = losses::evaluate(
        LossContext {
            pair: &task.pair,
            edited: &fwd.edited,
            reconstruction: &fwd.reconstruction,
            delta: &fwd.delta,
        },
        backends,
        losses,
    )?;
    let mut grad_latent = backends.generator.backward(&fwd.edited_latent, &ev.grad_image)?;
    for (g, d) in grad_latent.iter_mut().zip(&ev.grad_delta) {
        *g += d;
    }
    let grads = params.backward(&trace, &grad_latent)?;
    Ok((ev.breakdown, grads))
}

fn diagnose(task: &TrainTask, breakdown: Option<&LossBreakdown>) -> String {
    let norm = crate::embedding::l2_norm(task.latent.as_slice());
    format!(
        "task {:?}, style {}, color {}, latent norm {norm}, breakdown {}",
        task.task_type,
        task.pair.style.describe(),
        task.pair.color.describe(),
        breakdown
            .map(|b| serde_json::to_string(b).unwrap_or_default())
            .unwrap_or_else(|| "unavailable".into()),
    )
}

/// One optimizer step on the mean gradient over `batch`.
///
/// Returns the breakdown of every task. A non-finite loss or gradient aborts
/// before any parameter changes.
pub fn train_step(
    params: &mut HairMapperParams,
    batch: &[TrainTask],
    backends: &BackendBundle,
    losses: &LossConfig,
    optimizer: &mut Adam,
) -> Result<Vec<LossBreakdown>> {
    if batch.is_empty() {
        return Err(Error::Contract("training batch is empty".into()));
    }
    let iteration = params.iterations_trained + 1;
    let mut breakdowns = Vec::with_capacity(batch.len());
    let mut mean: Option<Vec<f64>> = None;
    for task in batch {
        let (bd, grads) = loss_and_gradient(params, task, backends, losses).map_err(|e| match e {
            Error::Numeric(msg) => Error::NonFiniteLoss {
                iteration,
                diagnostic: format!("{msg}; {}", diagnose(task, None)),
            },
            other => other,
        })?;
        let flat = grads.flatten();
        if !bd.is_finite() || flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration,
                diagnostic: diagnose(task, Some(&bd)),
            });
        }
        match &mut mean {
            None => mean = Some(flat),
            Some(acc) => acc.iter_mut().zip(&flat).for_each(|(a, g)| *a += g),
        }
        breakdowns.push(bd);
    }
    let mut grads = params.zeros_like();
    let mut mean = mean.expect("non-empty batch");
    if batch.len() > 1 {
        let n = batch.len() as f64;
        mean.iter_mut().for_each(|g| *g /= n);
    }
    grads.set_flat(&mean)?;
    optimizer.update(params, &grads)?;
    params.iterations_trained = iteration;
    Ok(breakdowns)
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    /// Mean total over the batch.
    pub total: f64,
    /// Exponential moving average of `total`.
    pub smoothed_total: f64,
    pub tasks: Vec<TaskRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_type: TaskType,
    pub style: String,
    pub color: String,
    pub breakdown: LossBreakdown,
}

/// What [`train`] produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub params: HairMapperParams,
    /// Records of the iterations run by this call.
    pub history: Vec<StepRecord>,
}

pub const LOG_FILE: &str = "train_log.jsonl";

fn fresh_state(config: &Config) -> Result<(HairMapperParams, Adam, TrainProgress)> {
    let params = HairMapperParams::init(
        config.dims.latent_dim,
        config.dims.embed_dim,
        config.partition()?,
        &config.mapper,
        config.seed,
    );
    let t = &config.train;
    let adam = Adam::new(t.learning_rate, t.adam_beta1, t.adam_beta2, t.adam_eps, params.num_parameters());
    Ok((
        params,
        adam,
        TrainProgress {
            rng_word_pos: 0,
            smoothed_total: None,
        },
    ))
}

fn task_rng(config: &Config) -> ChaCha8Rng {
    component_rng(config.seed, "train.tasks")
}

/// Keeps only log records up to `iteration`.
fn truncate_log(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|line| {
            serde_json::from_str::<StepRecord>(line)
                .map(|r| r.iteration <= iteration)
                .unwrap_or(false)
        })
        .collect();
    let mut out = BufWriter::new(File::create(path)?);
    for line in kept {
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Runs (or, with `resume`, continues) training as configured, writing
/// checkpoints and the JSON-lines log into `config.output_dir`.
///
/// A fresh run writes the untrained state as iteration 0; afterwards a
/// checkpoint is written every `checkpoint_every` iterations and after the
/// last one.
pub fn train(config: &Config, backends: &BackendBundle, sampler: &TaskSampler, resume: bool) -> Result<TrainOutcome> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir)?;
    let log_path = dir.join(LOG_FILE);
    let resume_hash = config.resume_hash();

    let latest = if resume { checkpoint::latest_in(dir)? } else { None };
    let (mut params, mut adam, progress, mut last_path) = match latest {
        Some(path) => {
            let ck = Checkpoint::load(&path)?;
            if ck.meta.config.resume_hash() != resume_hash {
                return Err(Error::Checkpoint(format!(
                    "{} was written under an incompatible config",
                    path.display()
                )));
            }
            let adam = ck
                .optimizer
                .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
            truncate_log(&log_path, ck.params.iterations_trained)?;
            (ck.params, adam, ck.meta.progress, path)
        }
        None => {
            let (params, adam, progress) = fresh_state(config)?;
            File::create(&log_path)?;
            let path = Checkpoint::new(config, params.clone(), Some(adam.clone()), progress.clone())
                .save_in(dir)?;
            (params, adam, progress, path)
        }
    };

    let mut rng = task_rng(config);
    rng.set_word_pos(progress.rng_word_pos);
    let mut smoothed = progress.smoothed_total;
    let mut log = BufWriter::new(OpenOptions::new().append(true).create(true).open(&log_path)?);
    let mut history = Vec::new();
    let t = &config.train;

    while params.iterations_trained < t.iterations {
        let batch = (0..t.batch_size)
            .map(|_| sampler.sample_task(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        let breakdowns = train_step(&mut params, &batch, backends, &config.losses, &mut adam)?;
        let total = breakdowns.iter().map(|b| b.total).sum::<f64>() / breakdowns.len() as f64;
        let ema = match smoothed {
            None => total,
            Some(prev) => t.ema_alpha * total + (1.0 - t.ema_alpha) * prev,
        };
        smoothed = Some(ema);
        let record = StepRecord {
            iteration: params.iterations_trained,
            total,
            smoothed_total: ema,
            tasks: batch
                .iter()
                .zip(&breakdowns)
                .map(|(task, bd)| TaskRecord {
                    task_type: task.task_type,
                    style: task.pair.style.describe(),
                    color: task.pair.color.describe(),
                    breakdown: *bd,
                })
                .collect(),
        };
        serde_json::to_writer(&mut log, &record)?;
        writeln!(log)?;
        history.push(record);

        let it = params.iterations_trained;
        if it % t.checkpoint_every == 0 || it == t.iterations {
            log.flush()?;
            let progress = TrainProgress {
                rng_word_pos: rng.get_word_pos(),
                smoothed_total: smoothed,
            };
            last_path = Checkpoint::new(config, params.clone(), Some(adam.clone()), progress).save_in(dir)?;
        }
    }
    log.flush()?;
    Ok(TrainOutcome {
        checkpoint: last_path,
        params,
        history,
    })
}

/// Sampler over the bundled (or configured) prompts, configured or generated
/// references, and prior latents. Image-directory sources must be loaded by
/// the caller and passed to [`TaskSampler::new`].
pub fn default_sampler(config: &Config, backends: &BackendBundle) -> Result<TaskSampler> {
    let corpus = match &config.train.prompts {
        Some(path) => PromptCorpus::parse(&fs::read_to_string(path)?)?,
        None => PromptCorpus::bundled(),
    };
    if config.train.reference_dir.is_some() || config.train.latent_source != LatentSource::Prior {
        return Err(Error::Config(
            "image directories must be loaded by the caller; use TaskSampler::new".into(),
        ));
    }
    let refs = generated_references(config.seed, config.train.reference_pool_size, backends)?;
    let (layers, dim) = backends.latent_shape();
    TaskSampler::new(&corpus, &refs, LatentPool::Prior { layers, dim }, &config.train, backends)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::toy_bundle;
    use crate::config::Dims;
    use rand::SeedableRng;

    fn small_config() -> Config {
        let mut c = Config::default();
        c.dims = Dims {
            layers: 3,
            latent_dim: 8,
            embed_dim: 8,
            height: 8,
            width: 8,
        };
        c.backend = crate::config::BackendConfig::Toy(crate::backends::ToyBackendConfig {
            encoder_grid: 4,
            ..Default::default()
        });
        c.train.reference_pool_size = 4;
        c
    }

    fn bundle(c: &Config) -> BackendBundle {
        let crate::config::BackendConfig::Toy(t) = &c.backend;
        toy_bundle(c.seed, &c.dims, t).unwrap()
    }

    #[test]
    fn sampling_is_reproducible() {
        let c = small_config();
        let b = bundle(&c);
        let s = default_sampler(&c, &b).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = s.sample_task(&mut r1).unwrap();
            let b = s.sample_task(&mut r2).unwrap();
            assert_eq!(a.task_type, b.task_type);
            assert_eq!(a.pair, b.pair);
            assert_eq!(a.latent, b.latent);
        }
    }

    #[test]
    fn degenerate_task_probabilities() {
        let mut c = small_config();
        c.train.task_probs = [1.0, 0.0, 0.0];
        let b = bundle(&c);
        let s = default_sampler(&c, &b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let t = s.sample_task(&mut rng).unwrap();
            assert_eq!(t.task_type, TaskType::StyleOnly);
            assert!(!t.pair.color.is_present());
            assert_eq!(TaskType::of(&t.pair), Some(t.task_type));
        }
    }

    #[test]
    fn empty_pools_are_config_errors() {
        let c = small_config();
        let b = bundle(&c);
        let corpus = PromptCorpus::bundled();
        let res = TaskSampler::new(&corpus, &[], LatentPool::Prior { layers: 3, dim: 8 }, &c.train, &b);
        assert!(matches!(res, Err(Error::Config(_))));
        let empty = PromptCorpus {
            hairstyles: vec![],
            colors: vec!["red hair".into()],
        };
        let refs = generated_references(0, 1, &b).unwrap();
        let res = TaskSampler::new(&empty, &refs, LatentPool::Prior { layers: 3, dim: 8 }, &c.train, &b);
        assert!(matches!(res, Err(Error::Config(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut c = small_config();
        c.train.learning_rate = 0.0;
        let b = bundle(&c);
        let s = default_sampler(&c, &b).unwrap();
        let (mut params, mut adam, _) = fresh_state(&c).unwrap();
        let before = params.flatten();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let task = s.sample_task(&mut rng).unwrap();
            train_step(&mut params, &[task], &b, &c.losses, &mut adam).unwrap();
        }
        let after = params.flatten();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(params.iterations_trained, 3);
    }

    #[test]
    fn unconditioned_task_is_rejected() {
        let c = small_config();
        let b = bundle(&c);
        let (mut params, mut adam, _) = fresh_state(&c).unwrap();
        let task = TrainTask {
            latent: LatentCode::zeros(3, 8).unwrap(),
            pair: ConditionPair::unconditioned(),
            task_type: TaskType::StyleOnly,
        };
        assert!(matches!(
            train_step(&mut params, &[task], &b, &c.losses, &mut adam),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn categorical_respects_zero_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_ne!(categorical(&mut rng, &[0.5, 0.5, 0.0]), 2);
        }
    }
}
