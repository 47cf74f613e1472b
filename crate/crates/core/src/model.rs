//! The learnable noise predictor.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Activation, Architecture, BoundNetwork, Conditioning, Layer, Network};
use crate::sampler::EpsilonModel;
use crate::sketch::{raster_shape, NUM_CLASSES};
use crate::tensor::Tensor;

/// Small three-level U-Net `eps(x_t, t[, y])` over `[N, 1, 32, 32]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonNetwork {
    net: Network,
}

impl EpsilonNetwork {
    pub fn architecture(class_conditional: bool) -> Architecture {
        let conv = |name: &str, i, o, stride| Layer::Conv2d {
            name: name.into(),
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride,
            padding: 1,
        };
        let silu = || Layer::Activation(Activation::Silu);
        Architecture {
            input_shape: raster_shape(),
            layers: vec![
                conv("in", 1, 8, 1),
                Layer::Conditioning {
                    name: "embed".into(),
                    channels: 8,
                    num_classes: class_conditional.then_some(NUM_CLASSES),
                },
                silu(),
                conv("enc", 8, 8, 1),
                silu(),
                Layer::Skip,
                conv("down1", 8, 16, 2),
                silu(),
                conv("mid1", 16, 16, 1),
                silu(),
                Layer::Skip,
                conv("down2", 16, 32, 2),
                Layer::Conditioning {
                    name: "embed2".into(),
                    channels: 32,
                    num_classes: class_conditional.then_some(NUM_CLASSES),
                },
                silu(),
                conv("mid2", 32, 32, 1),
                silu(),
                Layer::Upsample,
                Layer::Concat,
                conv("dec2", 48, 16, 1),
                silu(),
                Layer::Upsample,
                Layer::Concat,
                conv("dec1", 24, 8, 1),
                silu(),
                conv("out", 8, 1, 1),
            ],
        }
    }

    pub fn init(class_conditional: bool, seed: u64) -> Self {
        Self {
            net: Network::new(Self::architecture(class_conditional), seed),
        }
    }

    /// Wraps any network whose output shape equals its input shape.
    ///
    /// Checked by a probe forward pass; a network with no layers is
    /// rejected since it cannot be trained.
    pub fn from_network(net: Network) -> Result<Self> {
        if net.num_layers() == 0 || net.num_params() == 0 {
            return Err(Error::InvalidArgument(
                "noise predictor needs at least one parameterized layer".into(),
            ));
        }
        let mut shape = vec![1];
        shape.extend(net.input_shape());
        let probe = Tensor::zeros(shape.clone());
        let labels = [0usize];
        let out = net.infer(&probe, Conditioning::time(&[1]).with_labels(Some(&labels)))?;
        if out.shape() != shape.as_slice() {
            return Err(Error::Shape {
                site: "noise predictor output".into(),
                expected: shape,
                got: out.shape().to_vec(),
            });
        }
        Ok(Self { net })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn is_class_conditional(&self) -> bool {
        self.net.architecture().layers.iter().any(|l| {
            matches!(
                l,
                Layer::Conditioning {
                    num_classes: Some(_),
                    ..
                }
            )
        })
    }

    pub fn fingerprint(&self) -> String {
        self.net.fingerprint()
    }

    fn cond<'a>(&self, t: &'a [usize], labels: Option<&'a [usize]>) -> Result<Conditioning<'a>> {
        let labels = if self.is_class_conditional() {
            Some(labels.ok_or_else(|| {
                Error::InvalidArgument("class-conditional predictor needs labels".into())
            })?)
        } else {
            None
        };
        Ok(Conditioning::time(t).with_labels(labels))
    }

    /// Differentiable prediction through a bound copy of the parameters.
    pub fn predict_var<'t>(
        &self,
        bound: &BoundNetwork<'t, f64>,
        x_t: Var<'t, f64>,
        t: usize,
        labels: Option<&[usize]>,
    ) -> Result<Var<'t, f64>> {
        let ts = [t];
        bound.forward(x_t, self.cond(&ts, labels)?)
    }
}

impl EpsilonModel<f64> for EpsilonNetwork {
    fn sample_shape(&self) -> Vec<usize> {
        self.net.input_shape().to_vec()
    }

    fn predict_epsilon(&self, x_t: &Tensor, t: usize, labels: Option<&[usize]>) -> Result<Tensor> {
        let ts = [t];
        self.net.infer(x_t, self.cond(&ts, labels)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape_matches_input_for_all_t() {
        let net = EpsilonNetwork::init(false, 1);
        let x = Tensor::<f64>::randn(vec![2, 1, 32, 32], &mut ChaCha8Rng::seed_from_u64(0));
        for t in [0, 1, 57, 200] {
            let e = net.predict_epsilon(&x, t, None).unwrap();
            assert_eq!(e.shape(), x.shape());
            assert!(e.is_finite());
        }
    }

    #[test]
    fn class_conditional_needs_labels() {
        let net = EpsilonNetwork::init(true, 1);
        let x = Tensor::zeros(vec![1, 1, 32, 32]);
        assert!(net.predict_epsilon(&x, 3, None).is_err());
        let a = net.predict_epsilon(&x, 3, Some(&[0])).unwrap();
        assert!(a.is_finite());
    }

    #[test]
    fn zero_layer_network_rejected() {
        let err = EpsilonNetwork::from_network(Network::identity(raster_shape()));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn wrong_output_shape_rejected() {
        let arch = Architecture {
            input_shape: vec![4],
            layers: vec![Layer::Dense {
                name: "d".into(),
                inputs: 4,
                outputs: 2,
            }],
        };
        assert!(EpsilonNetwork::from_network(Network::new(arch, 0)).is_err());
    }
}
