//! Frozen random-feature pyramid for comparing sketches.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const STAGE_CHANNELS: [usize; 3] = [8, 16, 32];
const KERNEL: usize = 3;
const BIAS_RANGE: f64 = 0.1;
const NORM_EPS: f64 = 1e-10;
const DEFAULT_SEED: u64 = 0x5eed_f00d;

/// Per-layer unit-normalized activations plus per-channel weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    /// `[N, C_l, H_l, W_l]` per layer.
    pub layers: Vec<Tensor>,
    pub weights: Vec<Vec<f64>>,
}

impl FeaturePyramid {
    pub fn new(layers: Vec<Tensor>, weights: Vec<Vec<f64>>) -> Result<Self> {
        if layers.is_empty() || layers.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "pyramid needs matching nonempty layer and weight lists, got {} and {}",
                layers.len(),
                weights.len()
            )));
        }
        for (l, (t, w)) in layers.iter().zip(&weights).enumerate() {
            if t.shape().len() != 4 || t.shape()[1] != w.len() {
                return Err(Error::Shape {
                    site: format!("pyramid layer {l}"),
                    expected: vec![t.batch(), w.len(), 0, 0],
                    got: t.shape().to_vec(),
                });
            }
            if w.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::InvalidArgument(format!("layer {l} has a negative channel weight")));
            }
        }
        Ok(Self { layers, weights })
    }

    /// `(H_l, W_l, C_l)` per layer.
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.layers
            .iter()
            .map(|t| (t.shape()[2], t.shape()[3], t.shape()[1]))
            .collect()
    }
}

/// Three stride-2 convolutions with tanh, weights orthogonal and frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchFeatureExtractor {
    stages: Vec<(Tensor, Tensor)>,
}

impl Default for SketchFeatureExtractor {
    fn default() -> Self {
        Self::new(DEFAULT_SEED)
    }
}

impl SketchFeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 1;
        let mut stages = Vec::new();
        for &c_out in &STAGE_CHANNELS {
            let fan_in = c_in * KERNEL * KERNEL;
            let g = DMatrix::<f64>::from_fn(fan_in, c_out, |_, _| rng.sample(StandardNormal));
            let q = g.qr().q();
            // rows of the weight matrix are the orthonormal columns of q
            let mut w = Vec::with_capacity(c_out * fan_in);
            for o in 0..c_out {
                w.extend((0..fan_in).map(|i| q[(i, o)]));
            }
            let b = (0..c_out)
                .map(|_| rng.gen_range(-BIAS_RANGE..BIAS_RANGE))
                .collect();
            stages.push((
                Tensor::from_parts(vec![c_out, c_in, KERNEL, KERNEL], w),
                Tensor::from_parts(vec![c_out], b),
            ));
            c_in = c_out;
        }
        Self { stages }
    }

    /// Uniform `1 / C_l` channel weights.
    pub fn weights(&self) -> Vec<Vec<f64>> {
        self.stages
            .iter()
            .map(|(w, _)| {
                let c = w.shape()[0];
                vec![1.0 / c as f64; c]
            })
            .collect()
    }

    pub fn weight_tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.stages.iter().map(|(w, _)| w)
    }

    /// Normalized per-layer features of a sketch batch `[N, 1, H, W]`.
    pub fn apply<'t>(&self, s: Var<'t, f64>) -> Result<Vec<Var<'t, f64>>> {
        let tape = s.tape();
        let mut x = s;
        let mut out = Vec::with_capacity(self.stages.len());
        for (w, b) in &self.stages {
            x = x
                .conv2d(tape.constant(w.clone()), Some(tape.constant(b.clone())), 2, 1)?
                .tanh();
            out.push(x.normalize_channels(NORM_EPS)?);
        }
        Ok(out)
    }

    pub fn extract(&self, sketches: &Tensor) -> Result<FeaturePyramid> {
        let tape = Tape::new();
        let layers = self
            .apply(tape.constant(sketches.clone()))?
            .into_iter()
            .map(|v| v.value())
            .collect();
        FeaturePyramid::new(layers, self.weights())
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (w, b) in &self.stages {
            for v in w.data().iter().chain(b.data()) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::{gen_dataset, image_batch, to_sketch};

    #[test]
    fn pyramid_shapes_follow_stride() {
        let f = SketchFeatureExtractor::default();
        let p = f.extract(&Tensor::zeros(vec![2, 1, 32, 32])).unwrap();
        assert_eq!(p.shapes(), vec![(16, 16, 8), (8, 8, 16), (4, 4, 32)]);
        assert_eq!(p.layers[0].batch(), 2);
    }

    #[test]
    fn weights_are_orthonormal_rows() {
        let f = SketchFeatureExtractor::default();
        for w in f.weight_tensors() {
            let (o, fan) = (w.shape()[0], w.len() / w.shape()[0]);
            for a in 0..o {
                for b in 0..o {
                    let d: f64 = (0..fan)
                        .map(|i| w.data()[a * fan + i] * w.data()[b * fan + i])
                        .sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_frozen() {
        let a = SketchFeatureExtractor::default();
        let b = SketchFeatureExtractor::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let s = to_sketch(&image_batch(&gen_dataset(2, 1)));
        assert_eq!(a.extract(&s).unwrap(), b.extract(&s).unwrap());
    }

    #[test]
    fn features_are_unit_vectors_per_position() {
        let f = SketchFeatureExtractor::default();
        let s = to_sketch(&image_batch(&gen_dataset(1, 2)));
        let p = f.extract(&s).unwrap();
        for t in &p.layers {
            let c = t.shape()[1];
            let plane = t.shape()[2] * t.shape()[3];
            for pos in 0..plane {
                let n: f64 = (0..c).map(|ci| t.data()[ci * plane + pos].powi(2)).sum();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn negative_weights_rejected() {
        let t = Tensor::zeros(vec![1, 2, 1, 1]);
        assert!(FeaturePyramid::new(vec![t], vec![vec![1.0, -1.0]]).is_err());
    }
}
