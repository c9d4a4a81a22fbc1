use super::kernels::{self, ConvGeom, ConvPlan};
use super::{Layer, Network, ParamGrads};
use crate::error::{Error, Result};

/// Reusable forward/backward buffers for one network and input shape.
///
/// Activations are kept in `f64` so that gradients are exact up to double
/// rounding; only parameters are stored in `f32`.
#[derive(Debug, Clone)]
pub struct Evaluator<'n> {
    net: &'n Network,
    shapes: Vec<Vec<usize>>,
    geoms: Vec<Option<ConvGeom>>,
    plans: Vec<Option<ConvPlan>>,
    /// `f64` copies of each layer's weight and bias; convolution weights are
    /// reordered for their [`ConvPlan`].
    params: Vec<(Vec<f64>, Vec<f64>)>,
    scratch: Vec<f64>,
    acts: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
}

impl<'n> Evaluator<'n> {
    pub fn new(net: &'n Network, input_shape: &[usize]) -> Result<Self> {
        let shapes = net.shapes(input_shape)?;
        let geoms = net
            .layers()
            .iter()
            .zip(&shapes)
            .map(|(l, s)| match l {
                Layer::Conv2d(c) => c.geometry(s).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let acts: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| vec![0.0; s.iter().product()])
            .collect();
        let grads = acts.clone();
        let plans: Vec<Option<ConvPlan>> = geoms
            .iter()
            .map(|g| g.as_ref().map(ConvPlan::new))
            .collect();
        let scratch = vec![
            0.0;
            plans
                .iter()
                .flatten()
                .map(ConvPlan::scratch_len)
                .max()
                .unwrap_or(0)
        ];
        let params = net
            .layers()
            .iter()
            .zip(&plans)
            .map(|(l, plan)| match (l.params(), plan) {
                (Some((w, b)), Some(plan)) => (plan.layout(w.data()), b.to_f64()),
                (Some((w, b)), None) => (w.to_f64(), b.to_f64()),
                (None, _) => (Vec::new(), Vec::new()),
            })
            .collect();
        Ok(Evaluator {
            net,
            shapes,
            geoms,
            plans,
            params,
            scratch,
            acts,
            grads,
        })
    }

    pub fn network(&self) -> &'n Network {
        self.net
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn input_len(&self) -> usize {
        self.acts[0].len()
    }

    pub fn classes(&self) -> usize {
        self.acts.last().unwrap().len()
    }

    /// Input buffer; fill it and call [`Evaluator::run`].
    pub fn input_mut(&mut self) -> &mut [f64] {
        &mut self.acts[0]
    }

    pub fn forward(&mut self, x: &[f64]) -> &[f64] {
        assert_eq!(x.len(), self.acts[0].len(), "input length");
        self.acts[0].copy_from_slice(x);
        self.run()
    }

    pub fn forward_f32(&mut self, x: &[f32]) -> &[f64] {
        assert_eq!(x.len(), self.acts[0].len(), "input length");
        for (d, s) in self.acts[0].iter_mut().zip(x) {
            *d = *s as f64;
        }
        self.run()
    }

    pub fn checked_forward(&mut self, x: &[f64]) -> Result<&[f64]> {
        if x.len() != self.acts[0].len() {
            return Err(Error::invalid(format!(
                "input has {} entries, network expects {:?}",
                x.len(),
                self.shapes[0]
            )));
        }
        Ok(self.forward(x))
    }

    /// Forward pass from the current input buffer; returns the logits.
    pub fn run(&mut self) -> &[f64] {
        for (i, layer) in self.net.layers().iter().enumerate() {
            let (head, tail) = self.acts.split_at_mut(i + 1);
            let x = &head[i];
            let y = &mut tail[0];
            let (w, b) = &self.params[i];
            match layer {
                Layer::Affine(_) => kernels::dense(w, b, x, y),
                Layer::Conv2d(_) => {
                    self.plans[i]
                        .as_ref()
                        .unwrap()
                        .forward(w, b, x, y, &mut self.scratch)
                }
                Layer::Relu => {
                    for (o, v) in y.iter_mut().zip(x) {
                        *o = v.max(0.0);
                    }
                }
                Layer::Flatten => y.copy_from_slice(x),
            }
        }
        self.acts.last().unwrap()
    }

    pub fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    /// Activation entering layer `i` (index `layers.len()` gives the logits).
    pub fn activation(&self, i: usize) -> &[f64] {
        &self.acts[i]
    }

    /// Backpropagates `grad_logits` from the last forward pass and returns
    /// the gradient with respect to the input. Parameter gradients, scaled by
    /// `scale`, are accumulated into `params` when given.
    pub fn backward(
        &mut self,
        grad_logits: &[f64],
        params: Option<(&mut ParamGrads, f64)>,
    ) -> &[f64] {
        self.backprop(grad_logits, params, true);
        &self.grads[0]
    }

    /// Accumulates `scale * dL/dtheta` into `params` without computing the
    /// input gradient.
    pub fn backward_params(&mut self, grad_logits: &[f64], params: &mut ParamGrads, scale: f64) {
        self.backprop(grad_logits, Some((params, scale)), false);
    }

    fn backprop(
        &mut self,
        grad_logits: &[f64],
        mut params: Option<(&mut ParamGrads, f64)>,
        need_input: bool,
    ) {
        let n = self.net.layers().len();
        self.grads[n].copy_from_slice(grad_logits);
        for i in (0..n).rev() {
            let layer = &self.net.layers()[i];
            let (head, tail) = self.grads.split_at_mut(i + 1);
            let gy = &tail[0];
            let gx = &mut head[i];
            let x = &self.acts[i];
            if let Some((acc, scale)) = params.as_mut() {
                let lg = &mut acc.layers[i];
                match layer {
                    Layer::Affine(_) => {
                        kernels::affine_weight_grad(gy, x, None, *scale, &mut lg.weight);
                        for (b, g) in lg.bias.iter_mut().zip(gy.iter()) {
                            *b += *scale * g;
                        }
                    }
                    Layer::Conv2d(_) => {
                        let g = self.geoms[i].as_ref().unwrap();
                        kernels::conv_weight_grad(g, gy, x, None, *scale, &mut lg.weight);
                        kernels::conv_bias_grad(g, gy, *scale, &mut lg.bias);
                    }
                    _ => {}
                }
            }
            if i == 0 && !need_input {
                break;
            }
            let w = &self.params[i].0;
            match layer {
                Layer::Affine(_) => kernels::dense_transpose(w, gy, gx),
                Layer::Conv2d(_) => {
                    self.plans[i]
                        .as_ref()
                        .unwrap()
                        .transpose(w, gy, gx, &mut self.scratch)
                }
                Layer::Relu => {
                    for ((g, v), o) in gx.iter_mut().zip(x).zip(gy.iter()) {
                        *g = if *v > 0.0 { *o } else { 0.0 };
                    }
                }
                Layer::Flatten => gx.copy_from_slice(gy),
            }
        }
    }
}
