//! Minimal feed-forward network engine: affine, convolution, ReLU and flatten
//! layers with exact reverse-mode gradients.

mod eval;
pub mod format;
pub(crate) mod kernels;
pub(crate) mod loss;
pub mod train;

use rand::Rng;

pub use eval::Evaluator;
pub use loss::{cross_entropy, Loss};
pub use train::{train, PgdAugment, TrainConfig, TrainMode};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Fully connected layer with a row-major `(out, in)` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([out, inp], [b]) if out == b && *inp > 0 && *out > 0 => Ok(Affine { weight, bias }),
            (w, b) => Err(Error::invalid(format!(
                "affine layer needs weight (out, in) and bias (out), got {w:?} and {b:?}"
            ))),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Square-kernel 2-D convolution with weights `(filters, channels, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([f, c, kh, kw], [b]) if f == b && kh == kw && *kh > 0 && *c > 0 && *f > 0 => {}
            (w, b) => {
                return Err(Error::invalid(format!(
                    "conv2d needs weight (F, C, k, k) and bias (F), got {w:?} and {b:?}"
                )))
            }
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn filters(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub(crate) fn geometry(&self, input: &[usize]) -> Result<ConvGeom> {
        let &[c, h, w] = input else {
            return Err(Error::invalid(format!(
                "conv2d expects a (C, H, W) input, got {input:?}"
            )));
        };
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.in_channels(), h, w],
                actual: input.to_vec(),
            });
        }
        let k = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < k || pw < k {
            return Err(Error::invalid(format!(
                "conv2d kernel {k} does not fit padded input {ph}x{pw}"
            )));
        }
        Ok(ConvGeom {
            in_channels: c,
            height: h,
            width: w,
            filters: self.filters(),
            kernel: k,
            stride: self.stride,
            padding: self.padding,
            out_height: (ph - k) / self.stride + 1,
            out_width: (pw - k) / self.stride + 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Affine(Affine),
    Conv2d(Conv2d),
    Relu,
    Flatten,
}

impl Layer {
    /// Shape produced by this layer for the given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Affine(a) => {
                if input != [a.in_dim()] {
                    return Err(Error::ShapeMismatch {
                        expected: vec![a.in_dim()],
                        actual: input.to_vec(),
                    });
                }
                Ok(vec![a.out_dim()])
            }
            Layer::Conv2d(c) => {
                let g = c.geometry(input)?;
                Ok(vec![g.filters, g.out_height, g.out_width])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Affine(a) => Some((&a.weight, &a.bias)),
            Layer::Conv2d(c) => Some((&c.weight, &c.bias)),
            Layer::Relu | Layer::Flatten => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Affine(a) => Some((&mut a.weight, &mut a.bias)),
            Layer::Conv2d(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Relu | Layer::Flatten => None,
        }
    }
}

/// Reference victim architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// flatten -> affine 64 -> relu -> affine K
    ToyMlp,
    /// conv 8 filters 3x3 (stride 2, padding 1) -> relu -> flatten -> affine K
    ToyCnn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Shapes of the input and every layer output, checking that consecutive
    /// layers agree and that the network ends in `K >= 2` logits.
    pub fn shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(input.to_vec());
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        match shapes.last().unwrap().as_slice() {
            [k] if *k >= 2 => Ok(shapes),
            other => Err(Error::invalid(format!(
                "network must end in a logit vector of length >= 2, got {other:?}"
            ))),
        }
    }

    pub fn num_classes(&self, input: &[usize]) -> Result<usize> {
        Ok(self.shapes(input)?.last().unwrap()[0])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut ev = Evaluator::new(self, x.shape())?;
        let logits = ev.forward_f32(x.data());
        Tensor::from_f64(vec![logits.len()], logits)
    }

    /// Loss value at `x`.
    pub fn loss(&self, x: &Tensor, loss: &Loss) -> Result<f64> {
        let mut ev = Evaluator::new(self, x.shape())?;
        let logits = ev.forward_f32(x.data()).to_vec();
        let mut grad = vec![0.0; logits.len()];
        loss.value_and_grad(&logits, &mut grad)
    }

    /// Exact gradient of `loss(forward(x))` with respect to `x`.
    pub fn grad_input(&self, x: &Tensor, loss: &Loss) -> Result<Tensor> {
        let mut ev = Evaluator::new(self, x.shape())?;
        let logits = ev.forward_f32(x.data()).to_vec();
        let mut grad = vec![0.0; logits.len()];
        loss.value_and_grad(&logits, &mut grad)?;
        let gx = ev.backward(&grad, None);
        Tensor::from_f64(x.shape().to_vec(), gx)
    }

    /// Mean parameter gradient over a batch; `losses[i]` applies to `inputs[i]`.
    pub fn grad_params(&self, inputs: &[&Tensor], losses: &[Loss]) -> Result<(f64, ParamGrads)> {
        if inputs.is_empty() || inputs.len() != losses.len() {
            return Err(Error::invalid(format!(
                "batch needs matching nonempty inputs and losses, got {} and {}",
                inputs.len(),
                losses.len()
            )));
        }
        let mut ev = Evaluator::new(self, inputs[0].shape())?;
        let mut grads = ParamGrads::zeros(self);
        let scale = 1.0 / inputs.len() as f64;
        let mut total = 0.0;
        let mut gl = Vec::new();
        for (x, loss) in inputs.iter().zip(losses) {
            if x.shape() != inputs[0].shape() {
                return Err(Error::ShapeMismatch {
                    expected: inputs[0].shape().to_vec(),
                    actual: x.shape().to_vec(),
                });
            }
            let logits = ev.forward_f32(x.data()).to_vec();
            gl.resize(logits.len(), 0.0);
            total += loss.value_and_grad(&logits, &mut gl)?;
            ev.backward_params(&gl, &mut grads, scale);
        }
        Ok((total * scale, grads))
    }

    /// Gradient step `theta -= lr * grad`.
    pub fn apply_gradient(&mut self, grads: &ParamGrads, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            if let Some((w, b)) = layer.params_mut() {
                for (p, d) in w.data_mut().iter_mut().zip(&g.weight) {
                    *p = (*p as f64 - lr * d) as f32;
                }
                for (p, d) in b.data_mut().iter_mut().zip(&g.bias) {
                    *p = (*p as f64 - lr * d) as f32;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .all(|(w, b)| w.is_finite() && b.is_finite())
    }

    /// Builds a reference architecture with seeded Glorot-uniform weights and
    /// zero biases.
    pub fn build(arch: Architecture, input: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let &[c, h, w] = input else {
            return Err(Error::invalid(format!(
                "reference architectures take (C, W, H) images, got {input:?}"
            )));
        };
        if classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        let mut rng = rng::stream(seed);
        let layers = match arch {
            Architecture::ToyMlp => vec![
                Layer::Flatten,
                Layer::Affine(glorot_affine(&mut rng, c * h * w, 64)),
                Layer::Relu,
                Layer::Affine(glorot_affine(&mut rng, 64, classes)),
            ],
            Architecture::ToyCnn => {
                let conv = glorot_conv(&mut rng, c, 8, 3, 2, 1);
                let g = conv.geometry(input)?;
                let flat = g.filters * g.out_height * g.out_width;
                vec![
                    Layer::Conv2d(conv),
                    Layer::Relu,
                    Layer::Flatten,
                    Layer::Affine(glorot_affine(&mut rng, flat, classes)),
                ]
            }
        };
        let net = Network::new(layers)?;
        net.shapes(input)?;
        Ok(net)
    }
}

fn glorot(rng: &mut impl Rng, len: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    (0..len).map(|_| rng.random_range(-a..=a)).collect()
}

fn glorot_affine(rng: &mut impl Rng, inp: usize, out: usize) -> Affine {
    let w = glorot(rng, inp * out, inp, out);
    Affine {
        weight: Tensor::new(vec![out, inp], w).unwrap(),
        bias: Tensor::zeros(vec![out]),
    }
}

fn glorot_conv(
    rng: &mut impl Rng,
    channels: usize,
    filters: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Conv2d {
    let w = glorot(
        rng,
        filters * channels * k * k,
        channels * k * k,
        filters * k * k,
    );
    Conv2d {
        weight: Tensor::new(vec![filters, channels, k, k], w).unwrap(),
        bias: Tensor::zeros(vec![filters]),
        stride,
        padding,
    }
}

/// Per-layer parameter gradients; empty vectors for parameterless layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(net: &Network) -> Self {
        ParamGrads {
            layers: net
                .layers
                .iter()
                .map(|l| match l.params() {
                    Some((w, b)) => LayerGrads {
                        weight: vec![0.0; w.len()],
                        bias: vec![0.0; b.len()],
                    },
                    None => LayerGrads::default(),
                })
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_affine(n: usize) -> Network {
        let w = Tensor::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        Network::new(vec![Layer::Affine(
            Affine::new(w, Tensor::zeros(vec![n])).unwrap(),
        )])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = identity_affine(2);
        let out = net.forward(&Tensor::vector(&[1.0, 2.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_layer_clips_negatives() {
        let net = Network::new(vec![Layer::Relu]).unwrap();
        let out = net.forward(&Tensor::vector(&[-1.0, 2.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0]);
    }

    #[test]
    fn two_layer_net_matches_hand_arithmetic() {
        // Input 2x2 flattened to 4; W1 is 3x4, W2 is 2x3.
        let w1 = Tensor::new(
            vec![3, 4],
            vec![
                1.0, -1.0, 0.5, 0.0, 0.0, 2.0, -1.0, 1.0, -0.5, 0.25, 0.0, 1.0,
            ],
        )
        .unwrap();
        let b1 = Tensor::vector(&[0.1, -0.2, 0.0]);
        let w2 = Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 1.5, 2.0]).unwrap();
        let b2 = Tensor::vector(&[0.0, 1.0]);
        let net = Network::new(vec![
            Layer::Flatten,
            Layer::Affine(Affine::new(w1, b1).unwrap()),
            Layer::Relu,
            Layer::Affine(Affine::new(w2, b2).unwrap()),
        ])
        .unwrap();
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // W1 x + b1 = (1 - 2 + 1.5 + 0.1, 4 - 3 + 4 - 0.2, -0.5 + 0.5 + 4) = (0.6, 4.8, 4.0)
        // relu keeps all; W2 h + b2 = (0.6 - 4.0, 0.3 + 7.2 + 8.0 + 1.0) = (-3.4, 16.5)
        let out = net.forward(&x).unwrap();
        assert!((out.data()[0] - -3.4).abs() < 1e-5);
        assert!((out.data()[1] - 16.5).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = identity_affine(2);
        assert!(matches!(
            net.forward(&Tensor::vector(&[1.0, 2.0, 3.0])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn network_must_end_in_logits() {
        let net = Network::new(vec![Layer::Flatten]).unwrap();
        assert!(net.shapes(&[1, 2, 2]).is_ok());
        assert!(net.shapes(&[1, 1, 1]).is_err());
        let net = Network::new(vec![Layer::Relu]).unwrap();
        assert!(net.shapes(&[1, 2, 2]).is_err());
    }

    #[test]
    fn conv_rejects_bad_hyperparameters() {
        let w = Tensor::zeros(vec![2, 1, 3, 3]);
        assert!(Conv2d::new(w.clone(), Tensor::zeros(vec![2]), 0, 0).is_err());
        assert!(Conv2d::new(w, Tensor::zeros(vec![3]), 1, 0).is_err());
        assert!(Conv2d::new(
            Tensor::zeros(vec![2, 1, 3, 2]),
            Tensor::zeros(vec![2]),
            1,
            0
        )
        .is_err());
    }

    #[test]
    fn reference_architectures_have_expected_shapes() {
        let mlp = Network::build(Architecture::ToyMlp, &[3, 8, 8], 10, 0).unwrap();
        assert_eq!(mlp.num_classes(&[3, 8, 8]).unwrap(), 10);
        let cnn = Network::build(Architecture::ToyCnn, &[3, 8, 8], 10, 0).unwrap();
        let shapes = cnn.shapes(&[3, 8, 8]).unwrap();
        assert_eq!(shapes[1], vec![8, 4, 4]);
        assert_eq!(shapes.last().unwrap(), &vec![10]);
    }

    #[test]
    fn glorot_init_respects_bound() {
        let net = Network::build(Architecture::ToyMlp, &[3, 8, 8], 10, 9).unwrap();
        let Layer::Affine(a) = &net.layers()[1] else {
            panic!()
        };
        let bound = (6.0f32 / (192.0 + 64.0)).sqrt();
        assert!(a.weight.data().iter().all(|w| w.abs() <= bound));
        assert!(a.bias.data().iter().all(|b| *b == 0.0));
        assert_eq!(
            net,
            Network::build(Architecture::ToyMlp, &[3, 8, 8], 10, 9).unwrap()
        );
    }

    #[test]
    fn forward_is_repeatable() {
        let net = Network::build(Architecture::ToyCnn, &[3, 8, 8], 4, 1).unwrap();
        let x = Tensor::from_fn(vec![3, 8, 8], |i| (i as f32 * 0.37).sin().abs());
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
