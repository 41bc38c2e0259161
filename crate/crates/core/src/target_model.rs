//! The classifier under explanation: a small convolutional network exposing
//! its final-block activations as a T x n stack and a frozen linear head, so
//! that `logits = head_apply(stack)` holds exactly for every image.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{cross_entropy_with_grad_slice, relu_backward_inplace, relu_inplace};
use crate::numerics::{adam_step, conv2d, conv2d_backward, io, AdamHyper, AdamState, RngStream, Tensor};
use crate::synthdata::{DatasetSplit, LabeledImage, IMAGE_SIZE, NUM_CLASSES};

/// Positions (T) in the activation stack: the 4 x 4 spatial grid of the
/// final conv block.
pub const STACK_POSITIONS: usize = 16;
/// Channels (n) of the final conv block.
pub const FEATURE_DIM: usize = 64;

const CHANNELS: [usize; 4] = [3, 16, 32, 64];
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;
const ARCHITECTURE: &str = "conv3x3(3-16-32-64,stride2,pad1,relu) + gap + linear(64-4)";

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    pub kernels: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// K x n weight matrix.
    pub weight: Tensor,
    /// K biases.
    pub bias: Tensor,
}

impl HeadParams {
    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNetParams {
    pub blocks: Vec<ConvBlockParams>,
    pub head: HeadParams,
}

/// T activation vectors in R^n from the final conv block, position-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    data: Tensor,
}

impl ActivationStack {
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        if data.rank() != 2 {
            return Err(Error::InvalidInput(format!(
                "activation stack must be T x n, got {:?}",
                data.shape()
            )));
        }
        Ok(ActivationStack { data })
    }

    pub fn positions(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn position(&self, i: usize) -> &[f64] {
        let n = self.dim();
        &self.data.data()[i * n..(i + 1) * n]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Decoupled weight decay on kernels and the head weight (not biases).
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 1e-3,
            epochs: 10,
            batch: 32,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub test_accuracy: f64,
    pub train_seconds: f64,
}

fn check_image(image: &Tensor) -> Result<()> {
    if image.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(Error::InvalidInput(format!(
            "image must be 3 x {IMAGE_SIZE} x {IMAGE_SIZE}, got {:?}",
            image.shape()
        )));
    }
    Ok(())
}

/// Feature map (C x H x W) reshaped to a position-major stack (H*W x C).
fn feature_map_to_stack(features: &Tensor) -> ActivationStack {
    let shape = features.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let src = features.data();
    let mut data = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            data[p * c + ch] = src[ch * h * w + p];
        }
    }
    ActivationStack {
        data: Tensor::from_vec(&[h * w, c], data).expect("stack shape"),
    }
}

fn stack_grad_to_feature_map(grad: &Tensor, c: usize, h: usize, w: usize) -> Tensor {
    let src = grad.data();
    let mut data = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            data[ch * h * w + p] = src[p * c + ch];
        }
    }
    Tensor::from_vec(&[c, h, w], data).expect("feature shape")
}

/// The affine head applied to an already-pooled feature vector.
pub fn head_apply_mean(head: &HeadParams, mean: &[f64]) -> Result<Tensor> {
    let n = head.features();
    if mean.len() != n {
        return Err(Error::InvalidInput(format!(
            "pooled vector has {} entries, head expects {}",
            mean.len(),
            n
        )));
    }
    let k = head.classes();
    let w = head.weight.data();
    let b = head.bias.data();
    let mut logits = vec![0.0f64; k];
    for (c, logit) in logits.iter_mut().enumerate() {
        let row = &w[c * n..(c + 1) * n];
        let mut acc = 0.0;
        for i in 0..n {
            acc += row[i] * mean[i];
        }
        *logit = acc + b[c];
    }
    Tensor::from_vec(&[k], logits)
}

/// Mean over stack positions, one value per channel.
pub fn pooled_mean(stack: &ActivationStack) -> Vec<f64> {
    let t = stack.positions();
    let n = stack.dim();
    let mut mean = vec![0.0f64; n];
    for p in 0..t {
        for (m, &v) in mean.iter_mut().zip(stack.position(p)) {
            *m += v;
        }
    }
    let t_f = t as f64;
    for m in &mut mean {
        *m /= t_f;
    }
    mean
}

/// Global-average-pool over positions followed by the affine head.
pub fn head_apply(stack: &ActivationStack, head: &HeadParams) -> Result<Tensor> {
    if stack.dim() != head.features() {
        return Err(Error::InvalidInput(format!(
            "stack dim {} does not match head features {}",
            stack.dim(),
            head.features()
        )));
    }
    head_apply_mean(head, &pooled_mean(stack))
}

/// Backward of [`head_apply`]: gradient w.r.t. the stack plus parameter
/// gradients, given the gradient at the logits.
pub fn head_backward(
    stack: &ActivationStack,
    head: &HeadParams,
    grad_logits: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let t = stack.positions();
    let n = stack.dim();
    let k = head.classes();
    debug_assert_eq!(grad_logits.len(), k);
    let w = head.weight.data();
    let t_f = t as f64;
    let mean = pooled_mean(stack);

    let mut grad_mean = vec![0.0f64; n];
    let mut grad_w = vec![0.0f64; k * n];
    for c in 0..k {
        let g = grad_logits[c];
        let row = &w[c * n..(c + 1) * n];
        for i in 0..n {
            grad_mean[i] += row[i] * g;
            grad_w[c * n + i] = g * mean[i];
        }
    }
    let mut grad_stack = vec![0.0f64; t * n];
    for p in 0..t {
        for i in 0..n {
            grad_stack[p * n + i] = grad_mean[i] / t_f;
        }
    }
    (
        Tensor::from_vec(&[t, n], grad_stack).expect("stack shape"),
        Tensor::from_vec(&[k, n], grad_w).expect("weight shape"),
        Tensor::from_slice_1d(grad_logits),
    )
}

struct ForwardTrace {
    activations: Vec<Tensor>, // post-relu outputs of each block
    stack: ActivationStack,
    logits: Tensor,
}

fn forward_trace(params: &ConvNetParams, image: &Tensor) -> Result<ForwardTrace> {
    check_image(image)?;
    let mut activations = Vec::with_capacity(params.blocks.len());
    let mut current = image.clone();
    for block in &params.blocks {
        let mut out = conv2d(&current, &block.kernels, &block.bias, STRIDE, PAD)?;
        relu_inplace(out.data_mut());
        activations.push(out.clone());
        current = out;
    }
    let stack = feature_map_to_stack(activations.last().expect("blocks"));
    let logits = head_apply(&stack, &params.head)?;
    Ok(ForwardTrace {
        activations,
        stack,
        logits,
    })
}

/// Run the network on one image, returning the final-block activation stack
/// and the logits. The decomposition is exact: `head_apply` on the returned
/// stack reproduces the returned logits bit-for-bit.
pub fn forward(params: &ConvNetParams, image: &Tensor) -> Result<(ActivationStack, Tensor)> {
    let trace = forward_trace(params, image)?;
    Ok((trace.stack, trace.logits))
}

/// Argmax with ties broken toward the lower class index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ConvNetParams, image: &Tensor) -> Result<usize> {
    let (_, logits) = forward(params, image)?;
    Ok(argmax(logits.data()))
}

fn init_params(rng: &mut RngStream) -> ConvNetParams {
    let mut blocks = Vec::new();
    for i in 0..3 {
        let (c_in, c_out) = (CHANNELS[i], CHANNELS[i + 1]);
        let fan_in = (c_in * KERNEL * KERNEL) as f64;
        let std = (2.0 / fan_in).sqrt();
        let kernels: Vec<f64> = (0..c_out * c_in * KERNEL * KERNEL)
            .map(|_| rng.normal() * std)
            .collect();
        blocks.push(ConvBlockParams {
            kernels: Tensor::from_vec(&[c_out, c_in, KERNEL, KERNEL], kernels).unwrap(),
            bias: Tensor::zeros(&[c_out]),
        });
    }
    let std = (1.0 / FEATURE_DIM as f64).sqrt();
    let weight: Vec<f64> = (0..NUM_CLASSES * FEATURE_DIM)
        .map(|_| rng.normal() * std)
        .collect();
    ConvNetParams {
        blocks,
        head: HeadParams {
            weight: Tensor::from_vec(&[NUM_CLASSES, FEATURE_DIM], weight).unwrap(),
            bias: Tensor::zeros(&[NUM_CLASSES]),
        },
    }
}

struct Grads {
    blocks: Vec<(Tensor, Tensor)>,
    head_w: Tensor,
    head_b: Tensor,
}

impl Grads {
    fn zeros(params: &ConvNetParams) -> Self {
        Grads {
            blocks: params
                .blocks
                .iter()
                .map(|b| (Tensor::zeros(b.kernels.shape()), Tensor::zeros(b.bias.shape())))
                .collect(),
            head_w: Tensor::zeros(params.head.weight.shape()),
            head_b: Tensor::zeros(params.head.bias.shape()),
        }
    }

    fn add_scaled(dst: &mut Tensor, src: &Tensor, scale: f64) {
        for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d += s * scale;
        }
    }
}

/// Backward pass through the whole network for one labeled image.
/// Returns the loss; accumulates `scale *` gradients into `grads`.
fn backward_item(
    params: &ConvNetParams,
    image: &Tensor,
    label: usize,
    grads: &mut Grads,
    scale: f64,
) -> Result<f64> {
    let trace = forward_trace(params, image)?;
    let (loss, grad_logits) = cross_entropy_with_grad_slice(trace.logits.data(), label)?;
    let (grad_stack, grad_w, grad_b) = head_backward(&trace.stack, &params.head, &grad_logits);
    Grads::add_scaled(&mut grads.head_w, &grad_w, scale);
    Grads::add_scaled(&mut grads.head_b, &grad_b, scale);

    let last = trace.activations.len() - 1;
    let shape = trace.activations[last].shape().to_vec();
    let mut grad_features = stack_grad_to_feature_map(&grad_stack, shape[0], shape[1], shape[2]);
    for i in (0..params.blocks.len()).rev() {
        relu_backward_inplace(grad_features.data_mut(), trace.activations[i].data());
        let input = if i == 0 { image } else { &trace.activations[i - 1] };
        let block = &params.blocks[i];
        let (grad_input, grad_kernels, grad_bias) =
            conv2d_backward(input, &block.kernels, &block.bias, STRIDE, PAD, &grad_features)?;
        Grads::add_scaled(&mut grads.blocks[i].0, &grad_kernels, scale);
        Grads::add_scaled(&mut grads.blocks[i].1, &grad_bias, scale);
        grad_features = grad_input;
    }
    Ok(loss)
}

/// Train the target network on true labels with Adam.
pub fn train_target(
    split: &DatasetSplit,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(ConvNetParams, TrainReport)> {
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::InvalidInput("empty dataset split".into()));
    }
    let start = Instant::now();
    let root = RngStream::new(seed);
    let mut params = init_params(&mut root.substream("target/init"));
    let mut order_rng = root.substream("target/order");

    let adam = AdamHyper::with_lr(hyper.lr);
    let mut states: Vec<AdamState> = params
        .blocks
        .iter()
        .flat_map(|b| [b.kernels.shape(), b.bias.shape()])
        .chain([params.head.weight.shape(), params.head.bias.shape()])
        .map(|s| AdamState::new(s, adam))
        .collect();

    let n = split.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_curve = Vec::with_capacity(hyper.epochs);
    for _epoch in 0..hyper.epochs {
        order_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = Grads::zeros(&params);
            for &idx in batch {
                let img = &split.train[idx];
                epoch_loss += backward_item(&params, &img.pixels, img.true_label, &mut grads, scale)?;
            }
            // Biases are exempt from decay: even indices are kernels/weights.
            let mut tensors: Vec<(&mut Tensor, &Tensor)> = Vec::new();
            for (block, g) in params.blocks.iter_mut().zip(grads.blocks.iter()) {
                tensors.push((&mut block.kernels, &g.0));
                tensors.push((&mut block.bias, &g.1));
            }
            tensors.push((&mut params.head.weight, &grads.head_w));
            tensors.push((&mut params.head.bias, &grads.head_b));
            let decay = 1.0 - hyper.lr * hyper.weight_decay;
            for (i, ((param, grad), state)) in tensors.into_iter().zip(states.iter_mut()).enumerate()
            {
                adam_step(param, grad, state)?;
                if hyper.weight_decay > 0.0 && i % 2 == 0 {
                    for v in param.data_mut() {
                        *v *= decay;
                    }
                }
            }
        }
        loss_curve.push(epoch_loss / n as f64);
    }

    let test_accuracy = accuracy(&params, &split.test)?;
    Ok((
        params,
        TrainReport {
            loss_curve,
            test_accuracy,
            train_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Fraction of images whose prediction matches the true label.
pub fn accuracy(params: &ConvNetParams, images: &[LabeledImage]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidInput("accuracy over empty set".into()));
    }
    let mut hits = 0usize;
    for img in images {
        if predict(params, &img.pixels)? == img.true_label {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetMeta {
    pub architecture: String,
    pub seed: u64,
    pub hyper: TrainHyper,
    pub test_accuracy: f64,
}

pub fn save_target(path: &Path, params: &ConvNetParams, meta: &TargetMeta) -> Result<()> {
    let header = serde_json::to_string(meta)?;
    let mut sections: Vec<(String, &Tensor)> = Vec::new();
    for (i, block) in params.blocks.iter().enumerate() {
        sections.push((format!("block{i}.kernels"), &block.kernels));
        sections.push((format!("block{i}.bias"), &block.bias));
    }
    sections.push(("head.weight".into(), &params.head.weight));
    sections.push(("head.bias".into(), &params.head.bias));
    let borrowed: Vec<(&str, &Tensor)> = sections.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    io::write_sections(path, &header, &borrowed)
}

pub fn load_target(path: &Path) -> Result<(ConvNetParams, TargetMeta)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "target checkpoint {}",
            path.display()
        )));
    }
    let (header, sections) = io::read_sections(path)?;
    let meta: TargetMeta = serde_json::from_str(&header)?;
    let mut blocks = Vec::new();
    for i in 0..3 {
        let kernels = io::take_section(&sections, &format!("block{i}.kernels"))?;
        let bias = io::take_section(&sections, &format!("block{i}.bias"))?;
        if kernels.shape() != [CHANNELS[i + 1], CHANNELS[i], KERNEL, KERNEL] {
            return Err(Error::Format(format!(
                "block{i} kernels have shape {:?}",
                kernels.shape()
            )));
        }
        blocks.push(ConvBlockParams { kernels, bias });
    }
    let head = HeadParams {
        weight: io::take_section(&sections, "head.weight")?,
        bias: io::take_section(&sections, "head.bias")?,
    };
    if head.weight.shape() != [NUM_CLASSES, FEATURE_DIM] {
        return Err(Error::Format(format!(
            "head weight has shape {:?}",
            head.weight.shape()
        )));
    }
    Ok((ConvNetParams { blocks, head }, meta))
}

pub fn default_meta(seed: u64, hyper: &TrainHyper, test_accuracy: f64) -> TargetMeta {
    TargetMeta {
        architecture: ARCHITECTURE.to_string(),
        seed,
        hyper: hyper.clone(),
        test_accuracy,
    }
}
