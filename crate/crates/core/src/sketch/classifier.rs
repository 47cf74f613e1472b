//! Timestep-aware shape classifier `p(y | x_t, t)`.
//!
//! Its penultimate activations double as the image feature space used by
//! the identity loss and the evaluation metrics.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{image_batch, labels_of, raster_shape, ToyImage, IMAGE_SIZE, NUM_CLASSES};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Architecture, Conditioning, Layer, Network};
use crate::optim::{cosine_decay, AdamConfig, OptimizerState};
use crate::sampler::GuidanceClassifier;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Width of the feature embedding.
pub const FEATURE_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub noise_aware: bool,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 32,
            learning_rate: 3e-3,
            noise_aware: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyClassifier {
    net: Network,
}

impl NoisyClassifier {
    pub fn architecture() -> Architecture {
        let conv = |name: &str, i, o, stride| Layer::Conv2d {
            name: name.into(),
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride,
            padding: 1,
        };
        let silu = Layer::Activation(Activation::Silu);
        let side = IMAGE_SIZE / 8;
        Architecture {
            input_shape: raster_shape(),
            layers: vec![
                conv("conv1", 1, 8, 1),
                Layer::Conditioning {
                    name: "cond".into(),
                    channels: 8,
                    num_classes: None,
                },
                silu.clone(),
                conv("conv2", 8, 16, 2),
                silu.clone(),
                conv("conv3", 16, 32, 2),
                silu.clone(),
                conv("conv4", 32, 32, 2),
                silu.clone(),
                Layer::Flatten,
                Layer::Dense {
                    name: "fc".into(),
                    inputs: 32 * side * side,
                    outputs: FEATURE_DIM,
                },
                silu,
                Layer::Dense {
                    name: "head".into(),
                    inputs: FEATURE_DIM,
                    outputs: NUM_CLASSES,
                },
            ],
        }
    }

    /// Untrained classifier with seeded weights.
    pub fn init(seed: u64) -> Self {
        Self {
            net: Network::new(Self::architecture(), seed),
        }
    }

    pub fn from_network(net: Network) -> Result<Self> {
        if net.architecture() != &Self::architecture() {
            return Err(Error::Checkpoint("network is not a shape classifier".into()));
        }
        Ok(Self { net })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn fingerprint(&self) -> String {
        self.net.fingerprint()
    }

    fn feature_layers(&self) -> usize {
        self.net.num_layers() - 1
    }

    /// Logits `[N, K]` for a batch at timestep `t`.
    pub fn logits(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.net.infer(x, Conditioning::time(&[t]))
    }

    /// Row-wise class probabilities.
    pub fn probabilities(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.net.bind(&tape, false);
        let lp = bound
            .forward(tape.constant(x.clone()), Conditioning::time(&[t]))?
            .log_softmax()?;
        Ok(lp.value().map(f64::exp))
    }

    pub fn predict(&self, x: &Tensor, t: usize) -> Result<Vec<usize>> {
        let logits = self.logits(x, t)?;
        Ok(logits
            .data()
            .chunks_exact(NUM_CLASSES)
            .map(|row| {
                (0..NUM_CLASSES)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .expect("nonempty row")
            })
            .collect())
    }

    /// Penultimate features `[N, 64]` of clean images.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.net
            .infer_prefix(x, Conditioning::time(&[0]), self.feature_layers())
    }

    /// [`Self::features`] on a tape with frozen weights, differentiable in `x`.
    pub fn features_var<'t>(&'t self, tape: &'t Tape, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
        self.net
            .bind(tape, false)
            .forward_prefix(x, Conditioning::time(&[0]), self.feature_layers())
    }

    /// Fraction of `images` classified correctly after noising to `t`.
    pub fn accuracy(&self, images: &[ToyImage], t: usize, sched: &NoiseSchedule, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = image_batch(images);
        let eps = Tensor::<f64>::randn(x0.shape().to_vec(), &mut rng);
        let xt = if t == 0 { x0 } else { sched.q_sample(&x0, t, &eps)? };
        let pred = self.predict(&xt, t)?;
        let hits = pred
            .iter()
            .zip(images)
            .filter(|(p, im)| **p == im.label)
            .count();
        Ok(hits as f64 / images.len() as f64)
    }
}

impl GuidanceClassifier<f64> for NoisyClassifier {
    fn num_classes(&self) -> usize {
        NUM_CLASSES
    }

    fn grad_log_prob(&self, x_t: &Tensor, t: usize, labels: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes: NUM_CLASSES,
            });
        }
        let tape = Tape::new();
        let x = tape.var(x_t.clone());
        let lp = self
            .net
            .bind(&tape, false)
            .forward(x, Conditioning::time(&[t]))?
            .log_softmax()?
            .pick(labels)?
            .sum();
        Ok(tape.backward(lp)?.get_or_zeros(x))
    }
}

/// Cross-entropy training. With `noise_aware`, each input is noised to a
/// uniformly drawn `t` in `1..=T` and `t` is fed to the network; otherwise
/// inputs are clean and `t = 0`.
pub fn train_classifier(
    dataset: &[ToyImage],
    sched: &NoiseSchedule,
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<NoisyClassifier> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("classifier dataset is empty".into()));
    }
    let first = dataset[0].label;
    if dataset.iter().all(|im| im.label == first) {
        return Err(Error::InvalidArgument(format!(
            "classifier dataset holds a single class ({first})"
        )));
    }
    if cfg.iterations == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("classifier training config must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clf = NoisyClassifier::init(rng.gen());
    let mut opt = OptimizerState::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    for it in 0..cfg.iterations {
        opt.config.learning_rate = cosine_decay(cfg.learning_rate, it, cfg.iterations);
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
        let (x, ts) = if cfg.noise_aware {
            let ts: Vec<usize> = (0..batch.len()).map(|_| rng.gen_range(1..=sched.steps())).collect();
            let eps = Tensor::<f64>::randn(x0.shape().to_vec(), &mut rng);
            let per = x0.len() / batch.len();
            let mut data = Vec::with_capacity(x0.len());
            for (i, &t) in ts.iter().enumerate() {
                let ab = sched.alpha_bar(t);
                let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
                for j in i * per..(i + 1) * per {
                    data.push(a * x0.data()[j] + b * eps.data()[j]);
                }
            }
            (Tensor::new(x0.shape().to_vec(), data)?, ts)
        } else {
            (x0, vec![0; batch.len()])
        };
        let tape = Tape::new();
        let bound = clf.net.bind(&tape, true);
        let loss = bound
            .forward(tape.constant(x), Conditioning::time(&ts))?
            .log_softmax()?
            .pick(&labels)?
            .mean()
            .scale(-1.0);
        let grads = bound.gradients(&tape.backward(loss)?);
        if !loss.item().is_finite() {
            return Err(Error::NonFinite("classifier training loss".into()));
        }
        drop(bound);
        opt.step(clf.net.params_mut(), &grads)?;
    }
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference;
    use crate::sketch::gen_dataset;

    #[test]
    fn single_class_rejected() {
        let data: Vec<ToyImage> = gen_dataset(8, 1).into_iter().filter(|im| im.label == 2).collect();
        let err = train_classifier(&data, &NoiseSchedule::standard(), &ClassifierTrainConfig::default(), 0);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn guidance_gradient_matches_finite_differences() {
        let clf = NoisyClassifier::init(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(vec![1, 1, IMAGE_SIZE, IMAGE_SIZE], &mut rng);
        let g = clf.grad_log_prob(&x, 40, &[1]).unwrap();
        let fd = finite_difference(&x, 1e-5, |p| clf.probabilities(p, 40).unwrap().data()[1].ln());
        for (a, b) in g.data().iter().zip(fd.data()) {
            assert!((a - b).abs() / a.abs().max(b.abs()).max(1e-6) < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn features_deterministic_and_sized() {
        let clf = NoisyClassifier::init(1);
        let x = image_batch(&gen_dataset(3, 1));
        let f = clf.features(&x).unwrap();
        assert_eq!(f.shape(), &[3, FEATURE_DIM]);
        assert_eq!(f, clf.features(&x).unwrap());
    }

    #[test]
    fn log_probabilities_finite_for_extreme_inputs() {
        let clf = NoisyClassifier::init(2);
        let x = Tensor::full(vec![1, 1, IMAGE_SIZE, IMAGE_SIZE], 1e6);
        let p = clf.probabilities(&x, 0).unwrap();
        let g = clf.grad_log_prob(&x, 0, &[0]).unwrap();
        assert!(p.is_finite() && g.is_finite());
    }

    #[test]
    fn short_training_beats_chance_on_clean_images() {
        let sched = NoiseSchedule::standard();
        let cfg = ClassifierTrainConfig {
            iterations: 300,
            noise_aware: false,
            ..Default::default()
        };
        let clf = train_classifier(&gen_dataset(400, 1), &sched, &cfg, 7).unwrap();
        let acc = clf.accuracy(&gen_dataset(200, 2), 0, &sched, 0).unwrap();
        assert!(acc > 0.45, "accuracy {acc}");
    }
}
