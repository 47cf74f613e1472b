//! Fixed differentiable image-to-sketch operator.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Blur, gradient magnitude, soft squash.
///
/// The magnitude is smoothed as `sqrt(g^2 + delta^2) - delta`, which keeps
/// the map differentiable where the gradient vanishes and still sends flat
/// regions to exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchConverter {
    pub blur_sigma: f64,
    pub blur_size: usize,
    pub gain: f64,
    pub delta: f64,
}

impl Default for SketchConverter {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            blur_size: 5,
            gain: 4.0,
            delta: 1e-2,
        }
    }
}

impl SketchConverter {
    /// Normalized separable Gaussian as a `[1, 1, k, k]` kernel.
    pub fn blur_kernel(&self) -> Tensor {
        let r = (self.blur_size / 2) as i64;
        let taps: Vec<f64> = (-r..=r)
            .map(|j| (-(j * j) as f64 / (2.0 * self.blur_sigma * self.blur_sigma)).exp())
            .collect();
        let z: f64 = taps.iter().sum();
        let k = self.blur_size;
        let mut data = Vec::with_capacity(k * k);
        for a in &taps {
            for b in &taps {
                data.push(a * b / (z * z));
            }
        }
        Tensor::from_parts(vec![1, 1, k, k], data)
    }

    /// `x [N, 1, H, W]` to sketch `[N, 1, H, W]`.
    pub fn apply<'t>(&self, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let tape = x.tape();
        let blur = tape.constant(self.blur_kernel());
        let smooth = x
            .pad_replicate(self.blur_size / 2)?
            .conv2d(blur, None, 1, 0)?;
        #[rustfmt::skip]
        let diff = Tensor::from_parts(vec![2, 1, 3, 3], vec![
            0.0, 0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.0, 0.0,
            0.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0,
        ]);
        let grads = smooth
            .pad_replicate(1)?
            .conv2d(tape.constant(diff), None, 1, 0)?;
        let sum_channels = tape.constant(Tensor::ones(vec![1, 2, 1, 1]));
        let sq = grads.square().conv2d(sum_channels, None, 1, 0)?;
        let d2 = self.delta * self.delta;
        let mag = sq.shift(d2).sqrt().shift(-d2.sqrt());
        Ok(mag.scale(self.gain).tanh())
    }

    pub fn convert(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.apply(tape.constant(x.clone()))?.value())
    }
}

/// [`SketchConverter::apply`] with default settings.
pub fn to_sketch_var(x: Var<'_, f64>) -> Result<Var<'_, f64>> {
    SketchConverter::default().apply(x)
}

/// Sketch of an image batch `[N, 1, H, W]`.
pub fn to_sketch(x: &Tensor) -> Tensor {
    SketchConverter::default()
        .convert(x)
        .expect("sketch input must be [N, 1, H, W]")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference;
    use crate::sketch::gen_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const N: usize = 32;

    #[test]
    fn constant_image_gives_blank_sketch() {
        for c in [-1.0, 0.0, 0.37, 1.0] {
            let s = to_sketch(&Tensor::full(vec![1, 1, N, N], c));
            assert!(s.data().iter().all(|&v| v == 0.0), "constant {c}");
        }
    }

    /// One-dimensional recomputation of the operator on a vertical step.
    fn step_oracle(conv: &SketchConverter, row: &[f64]) -> Vec<f64> {
        let w = row.len() as i64;
        let at = |v: &[f64], j: i64| v[j.clamp(0, w - 1) as usize];
        let taps: Vec<f64> = (-2..=2i64).map(|j| (-(j * j) as f64 / 2.0).exp()).collect();
        let z: f64 = taps.iter().sum();
        let blurred: Vec<f64> = (0..w)
            .map(|j| (-2..=2).map(|o| taps[(o + 2) as usize] / z * at(row, j + o)).sum())
            .collect();
        (0..w)
            .map(|j| {
                let g = 0.5 * (at(&blurred, j + 1) - at(&blurred, j - 1));
                let mag = (g * g + conv.delta * conv.delta).sqrt() - conv.delta;
                (conv.gain * mag).tanh()
            })
            .collect()
    }

    #[test]
    fn vertical_step_gives_ridge() {
        let row: Vec<f64> = (0..N).map(|j| if j < 16 { -1.0 } else { 1.0 }).collect();
        let img = Tensor::new(vec![1, 1, N, N], row.repeat(N)).unwrap();
        let s = to_sketch(&img);
        let expect = step_oracle(&SketchConverter::default(), &row);
        for i in 0..N {
            for j in 0..N {
                let got = s.data()[i * N + j];
                assert!((got - expect[j]).abs() < 1e-12, "({i},{j}) {got} vs {}", expect[j]);
            }
        }
        assert!(expect[15] > 0.9 && expect[16] > 0.9);
        assert!(expect[..13].iter().chain(&expect[19..]).all(|&v| v == 0.0));
    }

    #[test]
    fn output_in_unit_interval() {
        for im in gen_dataset(8, 3) {
            let s = to_sketch(&im.raster.reshape([1, 1, N, N]).unwrap());
            assert!(s.data().iter().all(|&v| (0.0..1.0).contains(&v)));
        }
    }

    #[test]
    fn jacobian_vector_products_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(vec![1, 1, 8, 8], &mut rng).scale(0.5);
        let probe = Tensor::<f64>::randn(vec![1, 1, 8, 8], &mut rng);
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let out = to_sketch_var(xv).unwrap();
        let loss = out.dot(tape.constant(probe.clone())).unwrap();
        let g = tape.backward(loss).unwrap().get_or_zeros(xv);
        let fd = finite_difference(&x, 1e-5, |p| to_sketch(p).dot(&probe).unwrap());
        for (a, b) in g.data().iter().zip(fd.data()) {
            assert!((a - b).abs() / a.abs().max(b.abs()).max(1e-6) < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn shift_equivariance_in_interior() {
        let img = gen_dataset(1, 9)[0].raster.clone();
        let shifted: Vec<f64> = (0..N * N)
            .map(|p| {
                let (i, j) = (p / N, p % N);
                if j >= 3 {
                    img.data()[i * N + j - 3]
                } else {
                    -1.0
                }
            })
            .collect();
        let a = to_sketch(&img.reshape([1, 1, N, N]).unwrap());
        let b = to_sketch(&Tensor::new(vec![1, 1, N, N], shifted).unwrap());
        let mut total = 0.0;
        let mut count = 0;
        for i in 4..N - 4 {
            for j in 4..N - 4 - 3 {
                total += (a.data()[i * N + j] - b.data()[i * N + j + 3]).abs();
                count += 1;
            }
        }
        assert!(total / count as f64 <= 1e-6);
    }
}
