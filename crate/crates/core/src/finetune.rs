//! Pretraining the noise predictor, fine-tuning it through a differentiable
//! sampler rollout, and sketch-driven editing.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::EpsilonNetwork;
use crate::nn::{BoundNetwork, Conditioning};
use crate::objectives::{LossReport, Objectives};
use crate::optim::{cosine_decay, AdamConfig, OptimizerState};
use crate::sampler::{ddim_coefficients, invert, sample_from, GuidanceClassifier, SamplerConfig};
use crate::schedule::{NoiseSchedule, TimestepMap};
use crate::sketch::{image_batch, labels_of, ToyImage};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub class_conditional: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 3e-3,
            class_conditional: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "pretrain epochs, batch size and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn iterations(&self, dataset_len: usize) -> usize {
        (self.epochs * dataset_len).div_ceil(self.batch_size).max(1)
    }
}

pub struct PretrainOutcome {
    pub model: EpsilonNetwork,
    /// Noise-regression loss per iteration.
    pub losses: Vec<f64>,
}

/// Noise regression `|eps - eps_theta(x_t, t)|^2` with `t` uniform in
/// `1..=T` per sample. `observer` sees `(iteration, loss)`.
pub fn pretrain(
    dataset: &[ToyImage],
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
    seed: u64,
    mut observer: impl FnMut(usize, f64),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("pretraining dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = EpsilonNetwork::init(cfg.class_conditional, rng.gen());
    let mut opt = OptimizerState::new(AdamConfig::with_lr(cfg.learning_rate));
    let iterations = cfg.iterations(dataset.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(iterations);
    for it in 0..iterations {
        opt.config.learning_rate = cosine_decay(cfg.learning_rate, it, iterations);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        let x0 = image_batch(&batch);
        let labels = labels_of(&batch);
        let ts: Vec<usize> = (0..batch.len()).map(|_| rng.gen_range(1..=sched.steps())).collect();
        let eps = Tensor::<f64>::randn(x0.shape().to_vec(), &mut rng);
        let x_t = noised(&x0, &eps, &ts, sched)?;
        let grads = {
            let tape = Tape::new();
            let bound = model.network().bind(&tape, true);
            let cond = Conditioning::time(&ts)
                .with_labels(model.is_class_conditional().then_some(labels.as_slice()));
            let pred = bound.forward(tape.constant(x_t), cond)?;
            let loss = pred.sub(tape.constant(eps))?.square().mean();
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    iteration: it,
                    last_good: Box::new(model.network().clone()),
                });
            }
            losses.push(value);
            observer(it, value);
            bound.gradients(&tape.backward(loss)?)
        };
        opt.step(model.network_mut().params_mut(), &grads)?;
    }
    Ok(PretrainOutcome { model, losses })
}

/// Per-sample `q_sample` with one timestep per batch item.
fn noised(x0: &Tensor, eps: &Tensor, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    let per = x0.len() / ts.len();
    let mut data = Vec::with_capacity(x0.len());
    for (i, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let ab = sched.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in i * per..(i + 1) * per {
            data.push(a * x0.data()[j] + b * eps.data()[j]);
        }
    }
    Tensor::new(x0.shape().to_vec(), data)
}

/// Classifier guidance applied inside a rollout.
#[derive(Clone, Copy)]
pub struct RolloutGuidance<'a> {
    pub classifier: &'a dyn GuidanceClassifier<f64>,
    pub label: usize,
    pub scale: f64,
}

/// Deterministic reverse run on the tape, from `x_t` at `T` to `x_0`.
///
/// The arithmetic mirrors [`crate::sampler::sample_from`] step for step, so
/// values agree with the plain sampler. The guidance gradient enters as a
/// constant: the classifier is frozen and its input gradient is not
/// differentiated again.
pub fn differentiable_rollout<'t>(
    model: &EpsilonNetwork,
    bound: &BoundNetwork<'t, f64>,
    x_t: Var<'t, f64>,
    sched: &NoiseSchedule,
    steps: usize,
    guidance: Option<RolloutGuidance<'_>>,
    labels: Option<&[usize]>,
) -> Result<Var<'t, f64>> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("rollout needs at least 2 steps, got {steps}")));
    }
    let map = TimestepMap::evenly_spaced(sched.steps(), steps)?;
    let tape = x_t.tape();
    let n = x_t.shape()[0];
    let guide_labels = guidance.map(|g| vec![g.label; n]);
    let mut x = x_t;
    for (t, t_prev) in map.descending_pairs() {
        let mut eps = model.predict_var(bound, x, t, labels)?;
        if let (Some(g), Some(gl)) = (guidance, &guide_labels) {
            if g.scale != 0.0 {
                let grad = g.classifier.grad_log_prob(&x.value(), t, gl)?;
                let c = -g.scale * (1.0 - sched.alpha_bar(t)).sqrt();
                eps = eps.axpby(1.0, tape.constant(grad), c)?;
            }
        }
        let c = ddim_coefficients(sched.alpha_bar(t), sched.alpha_bar(t_prev), 0.0);
        x = x.axpby(c.cx, eps, c.ce)?;
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    /// Fresh forward-process noise at `T` every iteration.
    Stochastic,
    /// One deterministic inversion of `x0` with the starting model.
    Deterministic,
}

impl FromStr for EncodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(Self::Stochastic),
            "deterministic" => Ok(Self::Deterministic),
            other => Err(Error::InvalidArgument(format!("unknown encode mode `{other}`"))),
        }
    }
}

impl fmt::Display for EncodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Stochastic => "stochastic",
            Self::Deterministic => "deterministic",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub lambda: f64,
    pub rollout_steps: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub guidance_scale: f64,
    pub target_class: Option<usize>,
    pub encode_mode: EncodeMode,
    /// Latents rolled out per iteration, all for the same `(x0, s0)` pair.
    pub rollout_batch: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            rollout_steps: 16,
            iterations: 200,
            learning_rate: 1e-4,
            guidance_scale: 1.0,
            target_class: None,
            encode_mode: EncodeMode::Stochastic,
            rollout_batch: 2,
            checkpoint_every: 50,
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.rollout_steps < 2 || self.rollout_steps > sched.steps() {
            return Err(Error::InvalidArgument(format!(
                "rollout steps must lie in 2..={}, got {}",
                sched.steps(),
                self.rollout_steps
            )));
        }
        if self.iterations == 0 || self.rollout_batch == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "iterations, rollout batch and learning rate must be positive".into(),
            ));
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(Error::InvalidArgument("guidance scale must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// The sampler settings matching this config's rollout.
    pub fn sampler(&self, sched: &NoiseSchedule, seed: u64) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            timestep_map: TimestepMap::evenly_spaced(sched.steps(), self.rollout_steps)?,
            eta: 0.0,
            guidance_scale: self.guidance_scale,
            target_class: self.target_class,
            seed,
        })
    }
}

/// Progress notifications from [`finetune`].
pub enum FineTuneEvent<'a> {
    Step {
        iteration: usize,
        report: LossReport,
    },
    /// Emitted every `checkpoint_every` iterations and once at the end.
    Checkpoint {
        iteration: usize,
        model: &'a EpsilonNetwork,
    },
}

pub struct FineTuneOutcome {
    pub model: EpsilonNetwork,
    pub log: Vec<LossReport>,
    /// The latent used in deterministic mode.
    pub latent: Option<Tensor>,
}

/// Adapts `model` so that images generated from encodings of `x0` keep its
/// identity and follow the sketch `s0`.
///
/// `x0` and `s0` are single rasters `[1, 1, 32, 32]`. The extractors and
/// classifier inside `objectives` are only read.
pub fn finetune(
    model: &EpsilonNetwork,
    x0: &Tensor,
    s0: &Tensor,
    objectives: &Objectives<'_>,
    sched: &NoiseSchedule,
    cfg: &FineTuneConfig,
    mut observer: impl FnMut(FineTuneEvent<'_>),
) -> Result<FineTuneOutcome> {
    cfg.validate(sched)?;
    for (what, t) in [("x0", x0), ("s0", s0)] {
        if t.shape() != [1, 1, 32, 32] {
            return Err(Error::Shape {
                site: format!("fine-tune {what}"),
                expected: vec![1, 1, 32, 32],
                got: t.shape().to_vec(),
            });
        }
    }
    let b = cfg.rollout_batch;
    let labels = cfg.target_class.map(|y| vec![y; b]);
    let model_labels = if model.is_class_conditional() {
        Some(labels.clone().ok_or_else(|| {
            Error::InvalidArgument("class-conditional model needs a target class".into())
        })?)
    } else {
        None
    };
    let guidance = cfg.target_class.map(|label| RolloutGuidance {
        classifier: objectives.classifier,
        label,
        scale: cfg.guidance_scale,
    });
    let map = TimestepMap::evenly_spaced(sched.steps(), cfg.rollout_steps)?;
    let x0_batch = Tensor::stack(&vec![x0.clone(); b])?;
    let latent = match cfg.encode_mode {
        EncodeMode::Deterministic => Some(invert(&x0_batch, model, sched, &map, model_labels.as_deref())?),
        EncodeMode::Stochastic => None,
    };
    let feature_ref = objectives.image_reference(x0, b)?;
    let sketch_ref = objectives.sketch_reference(s0, b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = model.clone();
    let mut opt = OptimizerState::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let x_t = match &latent {
            Some(l) => l.clone(),
            None => {
                let eps = Tensor::<f64>::randn(x0_batch.shape().to_vec(), &mut rng);
                sched.q_sample(&x0_batch, sched.steps(), &eps)?
            }
        };
        let step = {
            let tape = Tape::new();
            let bound = current.network().bind(&tape, true);
            let x_hat = differentiable_rollout(
                &current,
                &bound,
                tape.constant(x_t),
                sched,
                cfg.rollout_steps,
                guidance,
                model_labels.as_deref(),
            )?;
            let losses = objectives.total_var(&tape, &feature_ref, &sketch_ref, x_hat, cfg.lambda)?;
            let report = losses.report(cfg.lambda);
            if !report.total.is_finite() {
                None
            } else {
                let grads = bound.gradients(&tape.backward(losses.total)?);
                grads
                    .values()
                    .all(|g| g.is_finite())
                    .then_some((report, grads))
            }
        };
        let Some((report, grads)) = step else {
            return Err(Error::Diverged {
                iteration: it,
                last_good: Box::new(current.into_network()),
            });
        };
        log.push(report);
        observer(FineTuneEvent::Step {
            iteration: it,
            report,
        });
        let before = current.clone();
        opt.step(current.network_mut().params_mut(), &grads)?;
        if current.network().params().values().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                last_good: Box::new(before.into_network()),
            });
        }
        let done = it + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.iterations {
            observer(FineTuneEvent::Checkpoint {
                iteration: done,
                model: &current,
            });
        }
    }
    observer(FineTuneEvent::Checkpoint {
        iteration: cfg.iterations,
        model: &current,
    });
    Ok(FineTuneOutcome {
        model: current,
        log,
        latent: latent.map(|l| l.item_at(0)),
    })
}

pub struct EditOutcome {
    pub image: Tensor,
    pub latent: Tensor,
    pub model: EpsilonNetwork,
}

/// Inverts `x0`, fine-tunes on `(x0, s_new)` from that fixed latent, and
/// regenerates from the same latent with the adapted model.
pub fn edit(
    model: &EpsilonNetwork,
    x0: &Tensor,
    s_new: &Tensor,
    objectives: &Objectives<'_>,
    sched: &NoiseSchedule,
    cfg: &FineTuneConfig,
) -> Result<EditOutcome> {
    let cfg = FineTuneConfig {
        encode_mode: EncodeMode::Deterministic,
        rollout_batch: 1,
        ..cfg.clone()
    };
    let tuned = finetune(model, x0, s_new, objectives, sched, &cfg, |_| {})?;
    let latent = tuned.latent.expect("deterministic mode records its latent");
    let sampler = cfg.sampler(sched, cfg.seed)?;
    let image = sample_from(
        &tuned.model,
        Some(objectives.classifier as &dyn GuidanceClassifier<f64>),
        sched,
        &sampler,
        latent.clone(),
        false,
    )?
    .samples;
    Ok(EditOutcome {
        image,
        latent,
        model: tuned.model,
    })
}
