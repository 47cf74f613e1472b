//! Perceptual, identity and combined losses.
//!
//! Every loss exists twice: as a plain function over tensors and as a tape
//! expression differentiable in the generated image.

use std::fmt;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::sketch::{FeaturePyramid, NoisyClassifier, SketchConverter, SketchFeatureExtractor};
use crate::tensor::Tensor;

/// Losses of one evaluation of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_p: f64,
    pub l_i: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossReport {
    /// Blends the two losses; fails when `lambda` is outside `[0, 1]`.
    pub fn blend(l_i: f64, l_p: f64, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            l_p,
            l_i,
            total: lambda * l_i + (1.0 - lambda) * l_p,
            lambda,
        })
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.6e} {:.6e} {:.6e} {}",
            self.l_p, self.l_i, self.total, self.lambda
        )
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Per-sample layered feature distance between two pyramids.
pub fn pyramid_distance(a: &FeaturePyramid, b: &FeaturePyramid) -> Result<Vec<f64>> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "pyramids have {} and {} layers",
            a.layers.len(),
            b.layers.len()
        )));
    }
    let n = a.layers[0].batch();
    let mut out = vec![0.0; n];
    for (l, ((ta, tb), w)) in a.layers.iter().zip(&b.layers).zip(&a.weights).enumerate() {
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                site: format!("pyramid layer {l}"),
                expected: ta.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        }
        let (c, hw) = (ta.shape()[1], ta.shape()[2] * ta.shape()[3]);
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (ci, wc) in w.iter().enumerate().take(c) {
                let base = (i * c + ci) * hw;
                let d: f64 = (0..hw)
                    .map(|p| (ta.data()[base + p] - tb.data()[base + p]).powi(2))
                    .sum();
                acc += wc * wc * d;
            }
            *o += acc / hw as f64;
        }
    }
    Ok(out)
}

/// Per-row cosine distance `1 - cos(a_n, b_n)` of two `[N, D]` matrices.
pub fn cosine_distance_rows(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::Shape {
            site: "cosine distance".into(),
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    let d = a.shape()[1];
    a.data()
        .chunks_exact(d)
        .zip(b.data().chunks_exact(d))
        .map(|(u, v)| {
            let (nu, nv) = (norm(u), norm(v));
            if nu == 0.0 || nv == 0.0 {
                return Err(Error::Degenerate("zero-norm image feature vector".into()));
            }
            let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
            Ok(1.0 - dot / (nu * nv))
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Tape expressions built by [`Objectives::total_var`].
pub struct LossVars<'t> {
    pub l_p: Var<'t, f64>,
    pub l_i: Var<'t, f64>,
    pub total: Var<'t, f64>,
}

impl LossVars<'_> {
    pub fn report(&self, lambda: f64) -> LossReport {
        LossReport {
            l_p: self.l_p.item(),
            l_i: self.l_i.item(),
            total: self.total.item(),
            lambda,
        }
    }
}

/// The frozen pieces the losses are measured with.
#[derive(Clone, Copy)]
pub struct Objectives<'a> {
    pub converter: &'a SketchConverter,
    pub sketch_features: &'a SketchFeatureExtractor,
    pub classifier: &'a NoisyClassifier,
}

impl<'a> Objectives<'a> {
    /// Mean layered distance between sketch batches `s0` and `s_hat`.
    pub fn perceptual_loss(&self, s0: &Tensor, s_hat: &Tensor) -> Result<f64> {
        if s0.shape() != s_hat.shape() {
            return Err(Error::Shape {
                site: "perceptual loss".into(),
                expected: s0.shape().to_vec(),
                got: s_hat.shape().to_vec(),
            });
        }
        let d = pyramid_distance(
            &self.sketch_features.extract(s0)?,
            &self.sketch_features.extract(s_hat)?,
        )?;
        Ok(d.iter().sum::<f64>() / d.len() as f64)
    }

    /// Per-sample distances of a sketch batch to one reference sketch.
    pub fn perceptual_distances(&self, s0: &Tensor, batch: &Tensor) -> Result<Vec<f64>> {
        let n = batch.batch();
        let reference = Tensor::stack(&vec![s0.clone(); n])?;
        pyramid_distance(
            &self.sketch_features.extract(&reference)?,
            &self.sketch_features.extract(batch)?,
        )
    }

    /// Mean cosine distance between image features.
    pub fn identity_loss(&self, x0: &Tensor, x_hat: &Tensor) -> Result<f64> {
        let d = cosine_distance_rows(
            &self.classifier.features(x0)?,
            &self.classifier.features(x_hat)?,
        )?;
        Ok(d.iter().sum::<f64>() / d.len() as f64)
    }

    /// Both losses and their blend, with `s_hat = P(x_hat)`.
    pub fn total_loss(&self, x0: &Tensor, x_hat: &Tensor, s0: &Tensor, lambda: f64) -> Result<LossReport> {
        check_lambda(lambda)?;
        let s_hat = self.converter.convert(x_hat)?;
        let l_p = self.perceptual_loss(s0, &s_hat)?;
        let l_i = self.identity_loss(x0, x_hat)?;
        LossReport::blend(l_i, l_p, lambda)
    }

    /// Layered distance of `s_hat` to precomputed reference features.
    pub fn perceptual_var<'t>(&self, reference: &[Tensor], s_hat: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let tape = s_hat.tape();
        let feats = self.sketch_features.apply(s_hat)?;
        let weights = self.sketch_features.weights();
        let mut total: Option<Var<'t, f64>> = None;
        for ((f, r), w) in feats.into_iter().zip(reference).zip(&weights) {
            let shape = f.shape();
            if r.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    site: "perceptual reference".into(),
                    expected: shape,
                    got: r.shape().to_vec(),
                });
            }
            let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            let scale: Vec<f64> = (0..n * c)
                .flat_map(|k| std::iter::repeat(w[k % c] * w[k % c] / (hw * n) as f64).take(hw))
                .collect();
            let term = f
                .sub(tape.constant(r.clone()))?
                .square()
                .dot(tape.constant(Tensor::new(shape, scale)?))?;
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
        }
        total.ok_or_else(|| Error::InvalidArgument("empty feature pyramid".into()))
    }

    /// Mean cosine distance of `x_hat`'s features to fixed reference rows.
    pub fn identity_var<'t>(&'t self, tape: &'t Tape, reference: &Tensor, x_hat: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let f = self.classifier.features_var(tape, x_hat)?;
        let shape = f.shape();
        if reference.shape() != shape.as_slice() {
            return Err(Error::Shape {
                site: "identity reference".into(),
                expected: shape,
                got: reference.shape().to_vec(),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        if f.value().data().chunks_exact(d).any(|r| norm(r) == 0.0)
            || reference.data().chunks_exact(d).any(|r| norm(r) == 0.0)
        {
            return Err(Error::Degenerate("zero-norm image feature vector".into()));
        }
        let ones = tape.constant(Tensor::ones(vec![1, d]));
        let r = tape.constant(reference.clone());
        let dots = f.mul(r)?.dense(ones, None)?;
        let nf = f.square().dense(ones, None)?.sqrt();
        let nr: Vec<f64> = reference.data().chunks_exact(d).map(norm).collect();
        let cos = dots.div(nf.mul(tape.constant(Tensor::new(vec![n, 1], nr)?))?)?;
        Ok(cos.mean().scale(-1.0).shift(1.0))
    }

    /// Tape version of [`Self::total_loss`].
    ///
    /// At `lambda = 0` the identity branch is evaluated on a detached copy of
    /// `x_hat`, and at `lambda = 1` the perceptual branch is, so the inactive
    /// loss never enters the gradient graph.
    pub fn total_var<'t>(
        &'t self,
        tape: &'t Tape,
        x0_features: &Tensor,
        s0_pyramid: &[Tensor],
        x_hat: Var<'t, f64>,
        lambda: f64,
    ) -> Result<LossVars<'t>> {
        check_lambda(lambda)?;
        let for_p = if lambda == 1.0 { x_hat.detach() } else { x_hat };
        let for_i = if lambda == 0.0 { x_hat.detach() } else { x_hat };
        let s_hat = self.converter.apply(for_p)?;
        let l_p = self.perceptual_var(s0_pyramid, s_hat)?;
        let l_i = self.identity_var(tape, x0_features, for_i)?;
        let total = l_i.axpby(lambda, l_p, 1.0 - lambda)?;
        Ok(LossVars { l_p, l_i, total })
    }

    /// Reference features of `s0` repeated over a batch of `n`.
    pub fn sketch_reference(&self, s0: &Tensor, n: usize) -> Result<Vec<Tensor>> {
        let batch = Tensor::stack(&vec![s0.clone(); n])?;
        Ok(self.sketch_features.extract(&batch)?.layers)
    }

    /// Reference image features of `x0` repeated over a batch of `n`.
    pub fn image_reference(&self, x0: &Tensor, n: usize) -> Result<Tensor> {
        let f = self.classifier.features(x0)?;
        Tensor::stack(&vec![f; n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::{gen_dataset, image_batch, to_sketch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        conv: SketchConverter,
        feats: SketchFeatureExtractor,
        clf: NoisyClassifier,
    }

    impl Fixture {
        fn new() -> Self {
            Self {
                conv: SketchConverter::default(),
                feats: SketchFeatureExtractor::default(),
                clf: NoisyClassifier::init(5),
            }
        }

        fn obj(&self) -> Objectives<'_> {
            Objectives {
                converter: &self.conv,
                sketch_features: &self.feats,
                classifier: &self.clf,
            }
        }
    }

    #[test]
    fn hand_computed_single_layer_case() {
        let a = FeaturePyramid::new(
            vec![Tensor::new(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap()],
            vec![vec![1.0, 1.0]],
        )
        .unwrap();
        let b = FeaturePyramid::new(
            vec![Tensor::new(vec![1, 2, 1, 1], vec![0.0, 1.0]).unwrap()],
            vec![vec![1.0, 1.0]],
        )
        .unwrap();
        assert_eq!(pyramid_distance(&a, &b).unwrap(), vec![2.0]);
    }

    #[test]
    fn zero_at_identity_and_symmetric() {
        let fx = Fixture::new();
        let o = fx.obj();
        let imgs = image_batch(&gen_dataset(4, 1));
        let (a, b) = (imgs.item_at(0), imgs.item_at(1));
        let (sa, sb) = (to_sketch(&a), to_sketch(&b));
        assert_eq!(o.perceptual_loss(&sa, &sa).unwrap(), 0.0);
        assert_eq!(o.identity_loss(&a, &a).unwrap(), 0.0);
        let ab = o.perceptual_loss(&sa, &sb).unwrap();
        assert!(ab > 0.0);
        assert!((ab - o.perceptual_loss(&sb, &sa).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn cosine_cases() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(cosine_distance_rows(&a, &b).unwrap(), vec![1.0]);
        let u = Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap();
        let v = Tensor::new(vec![1, 3], vec![-0.5, 0.1, 0.4]).unwrap();
        let d1 = cosine_distance_rows(&u, &v).unwrap()[0];
        let d3 = cosine_distance_rows(&u, &v.scale(3.0)).unwrap()[0];
        assert!((d1 - d3).abs() <= 1e-12);
        let z = Tensor::zeros(vec![1, 3]);
        assert!(matches!(cosine_distance_rows(&u, &z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn blend_endpoints_and_arithmetic() {
        let r = LossReport::blend(0.4, 1.2, 0.5).unwrap();
        assert!((r.total - 0.8).abs() < 1e-15);
        assert_eq!(LossReport::blend(0.4, 1.2, 1.0).unwrap().total, 0.4);
        assert_eq!(LossReport::blend(0.4, 1.2, 0.0).unwrap().total, 1.2);
        assert!(LossReport::blend(0.4, 1.2, 1.5).is_err());
        assert!(LossReport::blend(0.4, 1.2, -0.1).is_err());
    }

    #[test]
    fn tape_losses_match_plain_losses() {
        let fx = Fixture::new();
        let o = fx.obj();
        let imgs = image_batch(&gen_dataset(2, 3));
        let (x0, xh) = (imgs.item_at(0), imgs.item_at(1));
        let s0 = to_sketch(&x0);
        let plain = o.total_loss(&x0, &xh, &s0, 0.3).unwrap();
        let tape = Tape::new();
        let v = o
            .total_var(
                &tape,
                &o.image_reference(&x0, 1).unwrap(),
                &o.sketch_reference(&s0, 1).unwrap(),
                tape.var(xh.clone()),
                0.3,
            )
            .unwrap();
        let r = v.report(0.3);
        assert!((r.l_p - plain.l_p).abs() < 1e-12);
        assert!((r.l_i - plain.l_i).abs() < 1e-12);
        assert_eq!(r.total, 0.3 * r.l_i + 0.7 * r.l_p);
    }

    #[test]
    fn full_chain_gradient_matches_finite_differences() {
        let fx = Fixture::new();
        let o = fx.obj();
        let imgs = image_batch(&gen_dataset(2, 4));
        let x0 = imgs.item_at(0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xh = imgs.item_at(1).axpby(1.0, &Tensor::<f64>::randn(vec![1, 1, 32, 32], &mut rng), 0.1).unwrap();
        let s0 = to_sketch(&x0);
        let (fr, sr) = (o.image_reference(&x0, 1).unwrap(), o.sketch_reference(&s0, 1).unwrap());
        let tape = Tape::new();
        let xv = tape.var(xh.clone());
        let loss = o.total_var(&tape, &fr, &sr, xv, 0.5).unwrap().total;
        let g = tape.backward(loss).unwrap().get_or_zeros(xv);
        // a strided subset of pixels keeps the check fast
        for idx in (0..1024).step_by(37) {
            let f = |h: f64| {
                let mut p = xh.clone();
                p.data_mut()[idx] += h;
                o.total_loss(&x0, &p, &s0, 0.5).unwrap().total
            };
            let fd = (f(1e-5) - f(-1e-5)) / 2e-5;
            let a = g.data()[idx];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-4, "pixel {idx}: {a} vs {fd}");
        }
    }

    #[test]
    fn inactive_branch_contributes_no_gradient() {
        let fx = Fixture::new();
        let o = fx.obj();
        let imgs = image_batch(&gen_dataset(2, 5));
        let (x0, xh) = (imgs.item_at(0), imgs.item_at(1));
        let s0 = to_sketch(&x0);
        let (fr, sr) = (o.image_reference(&x0, 1).unwrap(), o.sketch_reference(&s0, 1).unwrap());
        let with_total = |lambda: f64| {
            let tape = Tape::new();
            let xv = tape.var(xh.clone());
            let loss = o.total_var(&tape, &fr, &sr, xv, lambda).unwrap().total;
            tape.backward(loss).unwrap().get_or_zeros(xv)
        };
        let pure_p = {
            let tape = Tape::new();
            let xv = tape.var(xh.clone());
            let loss = o.perceptual_var(&sr, o.converter.apply(xv).unwrap()).unwrap().scale(1.0);
            tape.backward(loss).unwrap().get_or_zeros(xv)
        };
        let pure_i = {
            let tape = Tape::new();
            let xv = tape.var(xh.clone());
            let loss = o.identity_var(&tape, &fr, xv).unwrap().scale(1.0);
            tape.backward(loss).unwrap().get_or_zeros(xv)
        };
        assert_eq!(with_total(0.0), pure_p);
        assert_eq!(with_total(1.0), pure_i);
    }
}
