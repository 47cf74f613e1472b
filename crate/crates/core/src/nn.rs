//! Small sequential networks built on the tape.
//!
//! A [`Network`] is an ordered list of [`Layer`]s plus a named parameter
//! store. Skip connections are expressed with a stack: [`Layer::Skip`]
//! pushes the current activation and [`Layer::Concat`] pops it and joins it
//! along the channel axis.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Width of the sinusoidal timestep embedding.
pub const TIME_EMBED_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Silu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Activation(Activation),
    /// Adds a learned projection of the timestep embedding, and optionally a
    /// learned class embedding, to every channel.
    Conditioning {
        name: String,
        channels: usize,
        num_classes: Option<usize>,
    },
    Flatten,
    Skip,
    Concat,
    Upsample,
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Activation(_) => "activation",
            Layer::Conditioning { .. } => "conditioning",
            Layer::Flatten => "flatten",
            Layer::Skip => "skip",
            Layer::Concat => "concat",
            Layer::Upsample => "upsample",
        }
    }

    /// Parameter names and shapes owned by this layer.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Layer::Dense {
                name,
                inputs,
                outputs,
            } => vec![
                (format!("{name}.weight"), vec![*outputs, *inputs]),
                (format!("{name}.bias"), vec![*outputs]),
            ],
            Layer::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                (
                    format!("{name}.weight"),
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                ),
                (format!("{name}.bias"), vec![*out_channels]),
            ],
            Layer::Conditioning {
                name,
                channels,
                num_classes,
            } => {
                let mut v = vec![
                    (format!("{name}.time.weight"), vec![*channels, TIME_EMBED_DIM]),
                    (format!("{name}.time.bias"), vec![*channels]),
                ];
                if let Some(k) = num_classes {
                    v.push((format!("{name}.class.weight"), vec![*channels, *k]));
                }
                v
            }
            _ => Vec::new(),
        }
    }
}

/// Layer list plus the per-sample input shape it accepts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Timestep and class inputs for conditioned networks.
#[derive(Clone, Copy, Debug, Default)]
pub struct Conditioning<'a> {
    /// One timestep per batch item, or a single one shared by all.
    pub timesteps: Option<&'a [usize]>,
    pub labels: Option<&'a [usize]>,
}

impl<'a> Conditioning<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn time(timesteps: &'a [usize]) -> Self {
        Self {
            timesteps: Some(timesteps),
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: Option<&'a [usize]>) -> Self {
        self.labels = labels;
        self
    }
}

/// Sinusoidal embedding of each timestep, shape `[N, TIME_EMBED_DIM]`.
pub fn timestep_embedding<S: Scalar>(timesteps: &[usize]) -> Tensor<S> {
    let half = TIME_EMBED_DIM / 2;
    let mut data = Vec::with_capacity(timesteps.len() * TIME_EMBED_DIM);
    for &t in timesteps {
        let t = t as f64;
        let freqs = (0..half).map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t * f).sin(), (t * f).cos())).unzip();
        data.extend(sin.into_iter().chain(cos).map(S::lit));
    }
    Tensor::from_parts(vec![timesteps.len(), TIME_EMBED_DIM], data)
}

fn one_hot<S: Scalar>(labels: &[usize], k: usize) -> Result<Tensor<S>> {
    let mut data = vec![S::zero(); labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::InvalidLabel {
                label: l,
                classes: k,
            });
        }
        data[i * k + l] = S::one();
    }
    Ok(Tensor::from_parts(vec![labels.len(), k], data))
}

/// Parameterized layer stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<S: Scalar = f64> {
    arch: Architecture,
    params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Network<S> {
    /// He-normal weights, zero biases, drawn from `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for layer in &arch.layers {
            for (name, shape) in layer.param_shapes() {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    Tensor::<S>::randn(shape, &mut rng).scale(S::lit(std))
                };
                params.insert(name, t);
            }
        }
        Self { arch, params }
    }

    /// Rebuilds a network from stored parameters, checking every name and
    /// shape against the architecture.
    pub fn from_parts(arch: Architecture, params: BTreeMap<String, Tensor<S>>) -> Result<Self> {
        let expected: BTreeMap<String, Vec<usize>> = arch
            .layers
            .iter()
            .flat_map(|l| l.param_shapes())
            .collect();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "architecture declares {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape {
                        site: format!("parameter {name}"),
                        expected: shape.clone(),
                        got: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { arch, params })
    }

    /// Network with no layers: forward is the identity.
    pub fn identity(input_shape: Vec<usize>) -> Self {
        Self {
            arch: Architecture {
                input_shape,
                layers: Vec::new(),
            },
            params: BTreeMap::new(),
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<S>> {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.arch.layers.len()
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Number of classes of the final dense layer, if it ends in one.
    pub fn output_width(&self) -> Option<usize> {
        match self.arch.layers.last() {
            Some(Layer::Dense { outputs, .. }) => Some(*outputs),
            _ => None,
        }
    }

    /// SHA-256 over parameter names, shapes and bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Puts parameters on `tape`, as differentiable named leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind<'t>(&'t self, tape: &'t Tape<S>, trainable: bool) -> BoundNetwork<'t, S> {
        let params = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(name.clone(), t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundNetwork {
            net: self,
            tape,
            params,
        }
    }

    /// Single forward pass with trainable parameters.
    pub fn forward<'t>(
        &'t self,
        tape: &'t Tape<S>,
        input: Var<'t, S>,
        cond: Conditioning<'_>,
    ) -> Result<Var<'t, S>> {
        self.bind(tape, true).forward(input, cond)
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, input: &Tensor<S>, cond: Conditioning<'_>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(input.clone());
        Ok(bound.forward(x, cond)?.value())
    }

    /// Forward pass through the first `layers` layers only.
    pub fn infer_prefix(
        &self,
        input: &Tensor<S>,
        cond: Conditioning<'_>,
        layers: usize,
    ) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(input.clone());
        Ok(bound.forward_prefix(x, cond, layers)?.value())
    }
}

/// A network whose parameters live on a particular tape.
pub struct BoundNetwork<'t, S: Scalar = f64> {
    net: &'t Network<S>,
    tape: &'t Tape<S>,
    params: BTreeMap<String, Var<'t, S>>,
}

impl<'t, S: Scalar> BoundNetwork<'t, S> {
    pub fn network(&self) -> &'t Network<S> {
        self.net
    }

    pub fn param(&self, name: &str) -> Option<Var<'t, S>> {
        self.params.get(name).copied()
    }

    /// Gradients of this binding's parameters, by name. Parameters the loss
    /// does not reach get zeros.
    pub fn gradients(&self, grads: &Gradients<S>) -> BTreeMap<String, Tensor<S>> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), grads.get_or_zeros(*v)))
            .collect()
    }

    pub fn forward(&self, input: Var<'t, S>, cond: Conditioning<'_>) -> Result<Var<'t, S>> {
        self.forward_prefix(input, cond, self.net.arch.layers.len())
    }

    pub fn forward_prefix(
        &self,
        input: Var<'t, S>,
        cond: Conditioning<'_>,
        upto: usize,
    ) -> Result<Var<'t, S>> {
        let shape = input.shape();
        if shape.len() != self.net.arch.input_shape.len() + 1
            || shape[1..] != self.net.arch.input_shape[..]
        {
            let mut expected = vec![shape.first().copied().unwrap_or(1)];
            expected.extend(&self.net.arch.input_shape);
            return Err(Error::Shape {
                site: "network input".into(),
                expected,
                got: shape,
            });
        }
        let batch = shape[0];
        let mut x = input;
        let mut stack: Vec<Var<'t, S>> = Vec::new();
        for (i, layer) in self.net.arch.layers.iter().take(upto).enumerate() {
            x = self
                .apply(layer, x, &mut stack, cond, batch)
                .map_err(|e| match e {
                    Error::Shape { expected, got, .. } => Error::Shape {
                        site: format!("layer {i} ({})", layer.kind()),
                        expected,
                        got,
                    },
                    Error::InvalidArgument(msg) => {
                        Error::InvalidArgument(format!("layer {i} ({}): {msg}", layer.kind()))
                    }
                    other => other,
                })?;
        }
        Ok(x)
    }

    fn p(&self, name: &str) -> Var<'t, S> {
        self.params[name]
    }

    fn apply(
        &self,
        layer: &Layer,
        x: Var<'t, S>,
        stack: &mut Vec<Var<'t, S>>,
        cond: Conditioning<'_>,
        batch: usize,
    ) -> Result<Var<'t, S>> {
        match layer {
            Layer::Dense { name, .. } => x.dense(
                self.p(&format!("{name}.weight")),
                Some(self.p(&format!("{name}.bias"))),
            ),
            Layer::Conv2d {
                name,
                stride,
                padding,
                ..
            } => x.conv2d(
                self.p(&format!("{name}.weight")),
                Some(self.p(&format!("{name}.bias"))),
                *stride,
                *padding,
            ),
            Layer::Activation(a) => Ok(match a {
                Activation::Relu => x.relu(),
                Activation::Silu => x.silu(),
                Activation::Tanh => x.tanh(),
            }),
            Layer::Conditioning {
                name, num_classes, ..
            } => {
                let ts = cond.timesteps.ok_or_else(|| {
                    Error::InvalidArgument("conditioned network called without timesteps".into())
                })?;
                let ts: Vec<usize> = match ts.len() {
                    1 => vec![ts[0]; batch],
                    n if n == batch => ts.to_vec(),
                    n => {
                        return Err(Error::Shape {
                            site: "timesteps".into(),
                            expected: vec![batch],
                            got: vec![n],
                        })
                    }
                };
                let emb = self.tape.constant(timestep_embedding(&ts));
                let mut v = emb.dense(
                    self.p(&format!("{name}.time.weight")),
                    Some(self.p(&format!("{name}.time.bias"))),
                )?;
                if let (Some(k), Some(labels)) = (num_classes, cond.labels) {
                    if labels.len() != batch {
                        return Err(Error::Shape {
                            site: "labels".into(),
                            expected: vec![batch],
                            got: vec![labels.len()],
                        });
                    }
                    let oh = self.tape.constant(one_hot(labels, *k)?);
                    v = v.add(oh.dense(self.p(&format!("{name}.class.weight")), None)?)?;
                }
                x.add_channel(v)
            }
            Layer::Flatten => {
                let s = x.shape();
                let per: usize = s[1..].iter().product();
                x.reshape(vec![s[0], per])
            }
            Layer::Skip => {
                stack.push(x);
                Ok(x)
            }
            Layer::Concat => {
                let skip = stack.pop().ok_or_else(|| {
                    Error::InvalidArgument("concat without a matching skip".into())
                })?;
                x.concat_channels(skip)
            }
            Layer::Upsample => x.upsample2(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference;

    fn dense_identity() -> Network<f64> {
        let arch = Architecture {
            input_shape: vec![3],
            layers: vec![Layer::Dense {
                name: "fc".into(),
                inputs: 3,
                outputs: 3,
            }],
        };
        let mut net = Network::new(arch, 0);
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        net.params_mut().insert("fc.weight".into(), eye);
        net
    }

    #[test]
    fn zero_layer_network_is_identity() {
        let net = Network::<f64>::identity(vec![4]);
        let x = Tensor::new(vec![1, 4], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(net.infer(&x, Conditioning::none()).unwrap(), x);
    }

    #[test]
    fn identity_dense_passes_vector_through() {
        let x = Tensor::new(vec![1, 3], vec![0.5, -2.0, 7.0]).unwrap();
        assert_eq!(dense_identity().infer(&x, Conditioning::none()).unwrap(), x);
    }

    #[test]
    fn one_by_one_conv_with_kernel_two_doubles_constant_image() {
        let arch = Architecture {
            input_shape: vec![1, 4, 4],
            layers: vec![Layer::Conv2d {
                name: "c".into(),
                in_channels: 1,
                out_channels: 1,
                kernel: 1,
                stride: 1,
                padding: 0,
            }],
        };
        let mut net = Network::<f64>::new(arch, 0);
        net.params_mut()
            .insert("c.weight".into(), Tensor::full(vec![1, 1, 1, 1], 2.0));
        let out = net.infer(&Tensor::ones(vec![1, 1, 4, 4]), Conditioning::none()).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let arch = Architecture {
            input_shape: vec![3],
            layers: vec![
                Layer::Dense {
                    name: "a".into(),
                    inputs: 3,
                    outputs: 4,
                },
                Layer::Dense {
                    name: "b".into(),
                    inputs: 5,
                    outputs: 2,
                },
            ],
        };
        let net = Network::<f64>::new(arch, 1);
        let err = net
            .infer(&Tensor::zeros(vec![1, 3]), Conditioning::none())
            .unwrap_err();
        assert!(err.to_string().contains("layer 1 (dense)"), "{err}");
        let err = net
            .infer(&Tensor::zeros(vec![1, 2]), Conditioning::none())
            .unwrap_err();
        assert!(err.to_string().contains("network input"), "{err}");
    }

    fn tiny_unet() -> Network<f64> {
        let conv = |name: &str, i, o, stride| Layer::Conv2d {
            name: name.into(),
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride,
            padding: 1,
        };
        Network::new(
            Architecture {
                input_shape: vec![1, 4, 4],
                layers: vec![
                    conv("in", 1, 2, 1),
                    Layer::Conditioning {
                        name: "cond".into(),
                        channels: 2,
                        num_classes: Some(3),
                    },
                    Layer::Activation(Activation::Silu),
                    Layer::Skip,
                    conv("down", 2, 2, 2),
                    Layer::Activation(Activation::Tanh),
                    Layer::Upsample,
                    Layer::Concat,
                    conv("out", 4, 1, 1),
                ],
            },
            5,
        )
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let net = tiny_unet();
        let x = Tensor::<f64>::randn(vec![2, 1, 4, 4], &mut ChaCha8Rng::seed_from_u64(2));
        let ts = [3usize, 17];
        let labels = [0usize, 2];
        let cond = Conditioning::time(&ts).with_labels(Some(&labels));
        let loss_of = |n: &Network<f64>| {
            let tape = Tape::new();
            let out = n.forward(&tape, tape.constant(x.clone()), cond).unwrap();
            out.square().sum().item()
        };
        let tape = Tape::new();
        let bound = net.bind(&tape, true);
        let out = bound.forward(tape.constant(x.clone()), cond).unwrap();
        let grads = bound.gradients(&tape.backward(out.square().sum()).unwrap());
        assert_eq!(grads.len(), net.params().len());
        for (name, g) in grads {
            let fd = finite_difference(&net.params()[&name], 1e-5, |p| {
                let mut probe = net.clone();
                probe.params_mut().insert(name.clone(), p.clone());
                loss_of(&probe)
            });
            for (a, b) in g.data().iter().zip(fd.data()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
                assert!(rel <= 1e-4, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_and_backward_are_bit_stable() {
        let net = tiny_unet();
        let x = Tensor::<f64>::randn(vec![1, 1, 4, 4], &mut ChaCha8Rng::seed_from_u64(9));
        let run = || {
            let tape = Tape::new();
            let bound = net.bind(&tape, true);
            let out = bound.forward(tape.constant(x.clone()), Conditioning::time(&[4])).unwrap();
            let g = bound.gradients(&tape.backward(out.sum()).unwrap());
            (out.value(), g)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn conditioned_network_requires_timesteps() {
        let net = tiny_unet();
        assert!(net
            .infer(&Tensor::zeros(vec![1, 1, 4, 4]), Conditioning::none())
            .is_err());
    }

    #[test]
    fn from_parts_rejects_missing_parameters() {
        let net = tiny_unet();
        let mut params = net.params().clone();
        params.remove("in.bias");
        assert!(Network::from_parts(net.architecture().clone(), params).is_err());
    }
}
