//! A small float32 CNN engine: forward pass, exact backpropagation and SGD.

pub mod kernels;
pub mod loss;
mod train;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bits::Role;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;
pub use loss::BatchLoss;

pub use train::{train_epoch, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "conv2d")]
    Conv2d,
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    #[serde(rename = "linear")]
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Conv2d { weight: Tensor, bias: Tensor, pad: usize },
    Relu,
    MaxPool2x2,
    Linear { weight: Tensor, bias: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    name: String,
    op: Op,
}

impl Layer {
    /// Stride-1 convolution; `weight` is `[out_ch, in_ch, k, k]`, `bias` is `[out_ch]`.
    pub fn conv2d(name: impl Into<String>, weight: Tensor, bias: Tensor, pad: usize) -> Self {
        Self {
            name: name.into(),
            op: Op::Conv2d { weight, bias, pad },
        }
    }

    /// Fully connected layer over the flattened input; `weight` is `[out, in]`.
    pub fn linear(name: impl Into<String>, weight: Tensor, bias: Tensor) -> Self {
        Self {
            name: name.into(),
            op: Op::Linear { weight, bias },
        }
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            op: Op::Relu,
        }
    }

    pub fn maxpool2x2(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            op: Op::MaxPool2x2,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LayerKind {
        match self.op {
            Op::Conv2d { .. } => LayerKind::Conv2d,
            Op::Relu => LayerKind::Relu,
            Op::MaxPool2x2 => LayerKind::MaxPool2x2,
            Op::Linear { .. } => LayerKind::Linear,
        }
    }

    /// Zero padding of a convolution, 0 for other kinds.
    pub fn padding(&self) -> usize {
        match self.op {
            Op::Conv2d { pad, .. } => pad,
            _ => 0,
        }
    }

    pub fn params(&self) -> Vec<(Role, &Tensor)> {
        match &self.op {
            Op::Conv2d { weight, bias, .. } | Op::Linear { weight, bias } => {
                vec![(Role::Weight, weight), (Role::Bias, bias)]
            }
            _ => Vec::new(),
        }
    }

    pub fn param(&self, role: Role) -> Option<&Tensor> {
        match (&self.op, role) {
            (Op::Conv2d { weight, .. } | Op::Linear { weight, .. }, Role::Weight) => Some(weight),
            (Op::Conv2d { bias, .. } | Op::Linear { bias, .. }, Role::Bias) => Some(bias),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, role: Role) -> Option<&mut Tensor> {
        match (&mut self.op, role) {
            (Op::Conv2d { weight, .. } | Op::Linear { weight, .. }, Role::Weight) => Some(weight),
            (Op::Conv2d { bias, .. } | Op::Linear { bias, .. }, Role::Bias) => Some(bias),
            _ => None,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.op, Op::Conv2d { .. } | Op::Linear { .. })
    }
}

/// Activation shape `(channels, height, width)`; linear outputs use `(features, 1, 1)`.
pub type Shape3 = [usize; 3];

fn numel(s: Shape3) -> usize {
    s[0] * s[1] * s[2]
}

/// Images with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::arg(format!("batch images must be [n, c, h, w], got {shape:?}")));
        }
        if labels.is_empty() || shape[0] != labels.len() {
            return Err(Error::arg(format!(
                "batch has {} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Gradient of the loss with respect to one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub layer_index: usize,
    pub layer: String,
    pub role: Role,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradSnapshot {
    pub loss: f64,
    pub grads: Vec<ParamGrad>,
    /// Set when the loss or any gradient entry is NaN or infinite.
    pub non_finite: bool,
}

impl LossGradSnapshot {
    pub fn get(&self, layer: &str, role: Role) -> Option<&[f32]> {
        self.grads
            .iter()
            .find(|g| g.layer == layer && g.role == role)
            .map(|g| g.values.as_slice())
    }

    pub(crate) fn by_index(&self, layer_index: usize, role: Role) -> Option<&[f32]> {
        self.grads
            .iter()
            .find(|g| g.layer_index == layer_index && g.role == role)
            .map(|g| g.values.as_slice())
    }
}

/// Inputs to every layer for one batch; `acts[i]` feeds layer `i`, the last entry holds the logits.
#[derive(Debug, Clone)]
pub(crate) struct Activations {
    pub n: usize,
    pub acts: Vec<Vec<f32>>,
}

/// An ordered stack of layers with validated shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input: Shape3,
    layers: Vec<Layer>,
    shapes: Vec<Shape3>,
}

impl Model {
    pub fn new(input: Shape3, layers: Vec<Layer>) -> Result<Self> {
        if input.contains(&0) {
            return Err(Error::config("<input>", format!("input shape {input:?} has a zero dimension")));
        }
        let mut seen = HashSet::new();
        let mut shapes = vec![input];
        let mut cur = input;
        for layer in &layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::config(&layer.name, "duplicate layer name"));
            }
            cur = layer_output_shape(layer, cur)?;
            shapes.push(cur);
        }
        Ok(Self { input, layers, shapes })
    }

    /// The reference MNIST network: conv(1->8) relu pool conv(8->16) relu pool fc(784->64) relu fc(64->10).
    ///
    /// Parameters are drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn cnn50k(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: Vec<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f32).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape, data).expect("shape matches generated data")
        };
        let layers = vec![
            Layer::conv2d("conv1", uniform(vec![8, 1, 3, 3], 9), uniform(vec![8], 9), 1),
            Layer::relu("relu1"),
            Layer::maxpool2x2("pool1"),
            Layer::conv2d("conv2", uniform(vec![16, 8, 3, 3], 72), uniform(vec![16], 72), 1),
            Layer::relu("relu2"),
            Layer::maxpool2x2("pool2"),
            Layer::linear("fc1", uniform(vec![64, 784], 784), uniform(vec![64], 784)),
            Layer::relu("relu3"),
            Layer::linear("fc2", uniform(vec![10, 64], 64), uniform(vec![10], 64)),
        ];
        Model::new([1, 28, 28], layers).expect("reference architecture is consistent")
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn output_size(&self) -> usize {
        numel(*self.shapes.last().unwrap())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Indices of layers that own parameters, in network order.
    pub fn param_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].has_params()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn param(&self, layer: usize, role: Role) -> Option<&Tensor> {
        self.layers.get(layer)?.param(role)
    }

    pub fn param_mut(&mut self, layer: usize, role: Role) -> Option<&mut Tensor> {
        self.layers.get_mut(layer)?.param_mut(role)
    }

    /// Bitwise equality of structure and every parameter pattern.
    pub fn bits_eq(&self, other: &Model) -> bool {
        self.input == other.input
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.name == b.name
                    && a.kind() == b.kind()
                    && a.padding() == b.padding()
                    && a.params().iter().zip(b.params()).all(|((ra, ta), (rb, tb))| *ra == rb && ta.bits_eq(tb))
            })
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.input {
            return Err(Error::config(
                self.layers.first().map_or("<input>", |l| l.name.as_str()),
                format!("expected images [n, {}, {}, {}], got {s:?}", self.input[0], self.input[1], self.input[2]),
            ));
        }
        Ok(s[0])
    }

    /// Logits of shape `[n, classes]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let n = self.check_images(images)?;
        let logits = self.forward_from(0, images.data().to_vec(), n);
        Tensor::new(vec![n, self.output_size()], logits)
    }

    pub(crate) fn forward_from(&self, start: usize, mut x: Vec<f32>, n: usize) -> Vec<f32> {
        for i in start..self.layers.len() {
            x = self.run_layer(i, &x, n);
        }
        x
    }

    pub(crate) fn forward_cached(&self, images: &[f32], n: usize) -> Activations {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(images.to_vec());
        for i in 0..self.layers.len() {
            let next = self.run_layer(i, &acts[i], n);
            acts.push(next);
        }
        Activations { n, acts }
    }

    fn conv_geom(&self, i: usize) -> ConvGeom {
        let [c, h, w] = self.shapes[i];
        let (out_ch, kernel, pad) = match &self.layers[i].op {
            Op::Conv2d { weight, pad, .. } => (weight.shape()[0], weight.shape()[2], *pad),
            _ => unreachable!("conv_geom on a non-conv layer"),
        };
        ConvGeom {
            in_ch: c,
            out_ch,
            kernel,
            pad,
            in_h: h,
            in_w: w,
        }
    }

    fn run_layer(&self, i: usize, x: &[f32], n: usize) -> Vec<f32> {
        let in_shape = self.shapes[i];
        let mut out = vec![0.0f32; n * numel(self.shapes[i + 1])];
        match &self.layers[i].op {
            Op::Conv2d { weight, bias, .. } => {
                kernels::conv_forward(&self.conv_geom(i), n, x, weight.data(), bias.data(), &mut out);
            }
            Op::Relu => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = kernels::relu(v);
                }
            }
            Op::MaxPool2x2 => {
                kernels::maxpool_forward(n * in_shape[0], in_shape[1], in_shape[2], x, &mut out);
            }
            Op::Linear { weight, bias } => {
                let out_f = weight.shape()[0];
                kernels::linear_forward(n, numel(in_shape), out_f, x, weight.data(), bias.data(), &mut out);
            }
        }
        out
    }

    fn check_labels(&self, labels: &[u8]) -> Result<()> {
        let classes = self.output_size();
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
            return Err(Error::arg(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(())
    }

    /// Mean cross-entropy of the batch.
    pub fn batch_loss(&self, batch: &Batch) -> Result<f64> {
        let logits = self.forward(&batch.images)?;
        self.check_labels(&batch.labels)?;
        Ok(loss::cross_entropy(logits.data(), &batch.labels, self.output_size()))
    }

    pub(crate) fn loss_of_logits(&self, logits: &[f32], labels: &[u8]) -> BatchLoss {
        loss::batch_loss(logits, labels, self.output_size())
    }

    /// Loss and exact gradients for every parameter tensor.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<LossGradSnapshot> {
        let n = self.check_images(&batch.images)?;
        self.check_labels(&batch.labels)?;
        let acts = self.forward_cached(batch.images.data(), n);
        let (loss, dlogits) = loss::cross_entropy_with_grad(acts.acts.last().unwrap(), &batch.labels, self.output_size());
        let grads = self.backward(&acts, dlogits);
        let non_finite = !loss.is_finite() || grads.iter().any(|g| g.values.iter().any(|v| !v.is_finite()));
        Ok(LossGradSnapshot { loss, grads, non_finite })
    }

    fn backward(&self, acts: &Activations, dlogits: Vec<f32>) -> Vec<ParamGrad> {
        let n = acts.n;
        let mut grads = Vec::new();
        let mut dy = dlogits;
        for i in (0..self.layers.len()).rev() {
            let x = &acts.acts[i];
            let in_shape = self.shapes[i];
            let need_input_grad = i > 0;
            let mut dx = if need_input_grad { vec![0.0f32; x.len()] } else { Vec::new() };
            let dx_opt = need_input_grad.then_some(dx.as_mut_slice());
            match &self.layers[i].op {
                Op::Conv2d { weight, bias, .. } => {
                    let mut gw = vec![0.0f32; weight.len()];
                    let mut gb = vec![0.0f32; bias.len()];
                    kernels::conv_backward(&self.conv_geom(i), n, x, weight.data(), &dy, &mut gw, &mut gb, dx_opt);
                    grads.push(self.param_grad(i, Role::Bias, gb));
                    grads.push(self.param_grad(i, Role::Weight, gw));
                }
                Op::Linear { weight, bias } => {
                    let mut gw = vec![0.0f32; weight.len()];
                    let mut gb = vec![0.0f32; bias.len()];
                    let out_f = weight.shape()[0];
                    kernels::linear_backward(n, numel(in_shape), out_f, x, weight.data(), &dy, &mut gw, &mut gb, dx_opt);
                    grads.push(self.param_grad(i, Role::Bias, gb));
                    grads.push(self.param_grad(i, Role::Weight, gw));
                }
                Op::Relu => {
                    if let Some(dx) = dx_opt {
                        kernels::relu_backward(x, &dy, dx);
                    }
                }
                Op::MaxPool2x2 => {
                    if let Some(dx) = dx_opt {
                        kernels::maxpool_backward(n * in_shape[0], in_shape[1], in_shape[2], x, &dy, dx);
                    }
                }
            }
            dy = dx;
        }
        grads.reverse();
        grads
    }

    fn param_grad(&self, i: usize, role: Role, values: Vec<f32>) -> ParamGrad {
        ParamGrad {
            layer_index: i,
            layer: self.layers[i].name.clone(),
            role,
            values,
        }
    }

    /// Batch loss with one parameter temporarily replaced by `value`, reusing cached activations.
    ///
    /// Only the affected output unit (linear) or channel (conv) of the layer is
    /// recomputed, with the same kernels as a full pass, so the result equals a
    /// full forward pass on the modified model bit for bit.
    pub(crate) fn probe_param_loss(
        &self,
        acts: &Activations,
        layer: usize,
        role: Role,
        offset: usize,
        value: f32,
        labels: &[u8],
    ) -> BatchLoss {
        let n = acts.n;
        let x = &acts.acts[layer];
        let mut out = acts.acts[layer + 1].clone();
        match &self.layers[layer].op {
            Op::Linear { weight, bias } => {
                let in_f = numel(self.shapes[layer]);
                let out_f = weight.shape()[0];
                let j = match role {
                    Role::Weight => offset / in_f,
                    Role::Bias => offset,
                };
                let mut row = weight.data()[j * in_f..(j + 1) * in_f].to_vec();
                let mut b = bias.data()[j];
                match role {
                    Role::Weight => row[offset % in_f] = value,
                    Role::Bias => b = value,
                }
                for s in 0..n {
                    out[s * out_f + j] = kernels::linear_unit(&x[s * in_f..(s + 1) * in_f], &row, b);
                }
            }
            Op::Conv2d { weight, bias, .. } => {
                let g = self.conv_geom(layer);
                let fs = g.filter_size();
                let oc = match role {
                    Role::Weight => offset / fs,
                    Role::Bias => offset,
                };
                let mut filter = weight.data()[oc * fs..(oc + 1) * fs].to_vec();
                let mut b = bias.data()[oc];
                match role {
                    Role::Weight => filter[offset % fs] = value,
                    Role::Bias => b = value,
                }
                let plane = g.out_h() * g.out_w();
                for s in 0..n {
                    let xs = &x[s * g.in_size()..(s + 1) * g.in_size()];
                    let o = &mut out[s * g.out_size() + oc * plane..s * g.out_size() + (oc + 1) * plane];
                    kernels::conv_channel(&g, xs, &filter, b, o);
                }
            }
            _ => unreachable!("probe on a parameter-free layer"),
        }
        let logits = self.forward_from(layer + 1, out, n);
        self.loss_of_logits(&logits, labels)
    }

    /// Batch loss recomputed from layer `start` onward, with earlier layers taken from `acts`.
    pub(crate) fn loss_from(&self, acts: &Activations, start: usize, labels: &[u8]) -> BatchLoss {
        let logits = self.forward_from(start, acts.acts[start].clone(), acts.n);
        self.loss_of_logits(&logits, labels)
    }

    /// Fraction of samples whose predicted class equals the label.
    pub fn accuracy(&self, images: &Tensor, labels: &[u8]) -> Result<f64> {
        let n = self.check_images(images)?;
        if n != labels.len() || n == 0 {
            return Err(Error::arg(format!("{n} images vs {} labels", labels.len())));
        }
        let per = numel(self.input);
        let classes = self.output_size();
        const CHUNK: usize = 250;
        let count_chunk = |(c, lab): (&[f32], &[u8])| -> usize {
            let logits = self.forward_from(0, c.to_vec(), lab.len());
            logits
                .chunks(classes)
                .zip(lab)
                .filter(|(row, &y)| loss::argmax(row) == y as usize)
                .count()
        };
        let chunks: Vec<(&[f32], &[u8])> = images.data().chunks(per * CHUNK).zip(labels.chunks(CHUNK)).collect();
        #[cfg(feature = "parallel")]
        let correct: usize = {
            use rayon::prelude::*;
            chunks.into_par_iter().map(count_chunk).sum()
        };
        #[cfg(not(feature = "parallel"))]
        let correct: usize = chunks.into_iter().map(count_chunk).sum();
        Ok(correct as f64 / n as f64)
    }
}

fn layer_output_shape(layer: &Layer, [c, h, w]: Shape3) -> Result<Shape3> {
    let name = &layer.name;
    match &layer.op {
        Op::Conv2d { weight, bias, pad } => {
            let ws = weight.shape();
            if ws.len() != 4 || ws[2] != ws[3] {
                return Err(Error::config(name, format!("conv weight must be [out, in, k, k], got {ws:?}")));
            }
            if ws[1] != c {
                return Err(Error::config(name, format!("conv expects {} input channels, got {c}", ws[1])));
            }
            if bias.shape() != [ws[0]] {
                return Err(Error::config(name, format!("conv bias must be [{}], got {:?}", ws[0], bias.shape())));
            }
            let k = ws[2];
            if k > h + 2 * pad || k > w + 2 * pad {
                return Err(Error::config(name, format!("kernel {k} larger than padded input {h}x{w}")));
            }
            Ok([ws[0], h + 2 * pad + 1 - k, w + 2 * pad + 1 - k])
        }
        Op::Relu => Ok([c, h, w]),
        Op::MaxPool2x2 => {
            if h < 2 || w < 2 {
                return Err(Error::config(name, format!("cannot pool a {h}x{w} input")));
            }
            Ok([c, h / 2, w / 2])
        }
        Op::Linear { weight, bias } => {
            let ws = weight.shape();
            let in_f = c * h * w;
            if ws.len() != 2 || ws[1] != in_f {
                return Err(Error::config(name, format!("linear weight must be [out, {in_f}], got {ws:?}")));
            }
            if bias.shape() != [ws[0]] {
                return Err(Error::config(name, format!("linear bias must be [{}], got {:?}", ws[0], bias.shape())));
            }
            Ok([ws[0], 1, 1])
        }
    }
}

/// Central difference `(f(x + eps) - f(x - eps)) / (x_plus - x_minus)`, with the
/// denominator taken from the actually representable f32 step.
pub fn central_difference<F: FnMut(f32) -> f64>(mut f: F, x: f32, epsilon: f32) -> f64 {
    let hi = x + epsilon;
    let lo = x - epsilon;
    (f(hi) - f(lo)) / (hi as f64 - lo as f64)
}

/// Numerical derivative of the batch loss with respect to one parameter entry.
/// The parameter is restored bit-exactly before returning.
pub fn finite_diff_grad(model: &mut Model, batch: &Batch, layer: &str, role: Role, offset: usize, epsilon: f32) -> Result<f64> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::arg("epsilon must be positive"));
    }
    let li = model
        .layer_index(layer)
        .ok_or_else(|| Error::arg(format!("no layer named `{layer}`")))?;
    let len = model
        .param(li, role)
        .ok_or_else(|| Error::arg(format!("layer `{layer}` has no {role}")))?
        .len();
    if offset >= len {
        return Err(Error::arg(format!("offset {offset} out of bounds for {layer}.{role} ({len})")));
    }
    let original = model.param(li, role).unwrap().data()[offset];
    let mut failure = None;
    let d = central_difference(
        |v| {
            model.param_mut(li, role).unwrap().data_mut()[offset] = v;
            model.batch_loss(batch).unwrap_or_else(|e| {
                failure = Some(e);
                f64::NAN
            })
        },
        original,
        epsilon,
    );
    model.param_mut(li, role).unwrap().data_mut()[offset] = original;
    match failure {
        Some(e) => Err(e),
        None => Ok(d),
    }
}
