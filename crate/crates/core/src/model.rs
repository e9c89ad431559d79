//! Multilayer perceptron split into a ReLU encoder and a linear classifier.
//!
//! The encoder output (the last hidden activation) is the feature vector the
//! center losses operate on; the classifier consumes it unnormalized.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// One affine layer, `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense { weights: Matrix::zeros(fan_in, fan_out), bias: vec![0.0; fan_out] }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let (b, n_in) = x.shape();
        let n_out = self.fan_out();
        let mut out = Matrix::zeros(b, n_out);
        let w = self.weights.as_slice();
        for r in 0..b {
            let xr = x.row(r);
            let o = out.row_mut(r);
            o.copy_from_slice(&self.bias);
            for (k, &xv) in xr.iter().enumerate().take(n_in) {
                if xv == 0.0 {
                    continue;
                }
                let wk = &w[k * n_out..(k + 1) * n_out];
                for (oj, &wj) in o.iter_mut().zip(wk) {
                    *oj += xv * wj;
                }
            }
        }
        out
    }

    /// Accumulates `dW = x^T dy`, `db = sum dy`; returns `dx = dy W^T` if asked.
    fn backprop(&self, x: &Matrix, dy: &Matrix, grad: &mut Dense, want_dx: bool) -> Option<Matrix> {
        let (b, n_in) = x.shape();
        let n_out = self.fan_out();
        let gw = grad.weights.as_mut_slice();
        for r in 0..b {
            let xr = x.row(r);
            let dyr = dy.row(r);
            for (gb, &d) in grad.bias.iter_mut().zip(dyr) {
                *gb += d;
            }
            for (k, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let gk = &mut gw[k * n_out..(k + 1) * n_out];
                for (g, &d) in gk.iter_mut().zip(dyr) {
                    *g += xv * d;
                }
            }
        }
        if !want_dx {
            return None;
        }
        let w = self.weights.as_slice();
        let mut dx = Matrix::zeros(b, n_in);
        for r in 0..b {
            let dyr = dy.row(r);
            let dxr = dx.row_mut(r);
            for (k, d) in dxr.iter_mut().enumerate() {
                let wk = &w[k * n_out..(k + 1) * n_out];
                *d = wk.iter().zip(dyr).map(|(a, b)| a * b).sum();
            }
        }
        Some(dx)
    }
}

/// Encoder layers (ReLU after each) followed by a linear classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
    pub encoder: Vec<Dense>,
    pub classifier: Dense,
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.iter().chain(std::iter::once(&self.classifier))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder.iter_mut().chain(std::iter::once(&mut self.classifier))
    }

    /// All parameters in declaration order: per layer, weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut at = 0;
        for l in self.layers_mut() {
            let nw = l.weights.as_slice().len();
            l.weights.as_mut_slice().copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(|l| l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    /// Same architecture, every parameter zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for l in z.layers_mut() {
            l.weights.as_mut_slice().fill(0.0);
            l.bias.fill(0.0);
        }
        z
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 3 {
        return Err(Error::config(format!("need input, at least one hidden and an output size, got {layer_sizes:?}")));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::config("layer sizes must be positive"));
    }
    Ok(())
}

/// He-style fan-in uniform initialization, zero biases.
pub fn init_model(layer_sizes: &[usize], seed: u64) -> Result<ModelParams> {
    validate_sizes(layer_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<Dense> = layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut d = Dense::zeros(fan_in, fan_out);
            for v in d.weights.as_mut_slice() {
                *v = rng.random_range(-bound..bound);
            }
            d
        })
        .collect();
    let classifier = layers.pop().unwrap();
    Ok(ModelParams { layer_sizes: layer_sizes.to_vec(), seed, encoder: layers, classifier })
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Pre-activation of every encoder layer.
    pub pre: Vec<Matrix>,
    /// Post-activation (ReLU, then dropout when active) of every encoder layer.
    pub post: Vec<Matrix>,
    /// Inverted-dropout multipliers per encoder layer, training only.
    pub dropout_masks: Option<Vec<Matrix>>,
    pub logits: Matrix,
}

impl ForwardTrace {
    /// The classifier input.
    pub fn features(&self) -> &Matrix {
        self.post.last().expect("encoder has at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }
}

pub fn forward(params: &ModelParams, x: &Matrix) -> Result<ForwardTrace> {
    forward_impl(params, x, None::<(f64, &mut ChaCha8Rng)>)
}

/// Forward pass with inverted dropout after every encoder activation.
pub fn forward_dropout<R: Rng>(params: &ModelParams, x: &Matrix, rate: f64, rng: &mut R) -> Result<ForwardTrace> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} not in [0, 1)")));
    }
    forward_impl(params, x, Some((rate, rng)))
}

fn forward_impl<R: Rng>(params: &ModelParams, x: &Matrix, mut dropout: Option<(f64, &mut R)>) -> Result<ForwardTrace> {
    if x.cols() != params.input_dim() {
        return Err(Error::dim(format!("input has {} columns, model expects {}", x.cols(), params.input_dim())));
    }
    let mut pre = Vec::with_capacity(params.encoder.len());
    let mut post: Vec<Matrix> = Vec::with_capacity(params.encoder.len());
    let mut masks = dropout.as_ref().map(|_| Vec::new());
    for layer in &params.encoder {
        let h = layer.apply(post.last().unwrap_or(x));
        let mut a = h.clone();
        a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        if let Some((rate, rng)) = dropout.as_mut() {
            let keep = 1.0 - *rate;
            let mut m = Matrix::zeros(a.rows(), a.cols());
            for (mv, av) in m.as_mut_slice().iter_mut().zip(a.as_mut_slice()) {
                *mv = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                *av *= *mv;
            }
            masks.as_mut().unwrap().push(m);
        }
        pre.push(h);
        post.push(a);
    }
    let logits = params.classifier.apply(post.last().unwrap());
    if !logits.is_finite() {
        return Err(Error::input("forward pass produced non-finite logits"));
    }
    Ok(ForwardTrace { input: x.clone(), pre, post, dropout_masks: masks, logits })
}

/// Parameter gradients mirroring [`ModelParams`], plus an optional input
/// gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    pub encoder: Vec<Dense>,
    pub classifier: Dense,
    pub input: Option<Matrix>,
}

impl GradSet {
    pub fn zeros_for(params: &ModelParams) -> Self {
        let z = params.zeros_like();
        GradSet { encoder: z.encoder, classifier: z.classifier, input: None }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.iter().chain(std::iter::once(&self.classifier))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.layers() {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(|l| l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Exact chain-rule gradients. `grad_features`, when given, is added at the
/// classifier input, so it reaches only the encoder.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    grad_logits: &Matrix,
    grad_features: Option<&Matrix>,
    want_input_grad: bool,
) -> Result<GradSet> {
    let b = trace.batch_size();
    if grad_logits.shape() != (b, params.num_classes()) {
        return Err(Error::dim(format!(
            "grad_logits {:?}, expected {:?}",
            grad_logits.shape(),
            (b, params.num_classes())
        )));
    }
    if let Some(gf) = grad_features {
        if gf.shape() != (b, params.feature_dim()) {
            return Err(Error::dim(format!(
                "grad_features {:?}, expected {:?}",
                gf.shape(),
                (b, params.feature_dim())
            )));
        }
    }
    let mut grads = GradSet::zeros_for(params);
    let mut delta = params.classifier.backprop(trace.features(), grad_logits, &mut grads.classifier, true).unwrap();
    if let Some(gf) = grad_features {
        delta.axpy(1.0, gf)?;
    }
    for i in (0..params.encoder.len()).rev() {
        // through dropout and ReLU
        let pre = &trace.pre[i];
        for (k, d) in delta.as_mut_slice().iter_mut().enumerate() {
            if pre.as_slice()[k] <= 0.0 {
                *d = 0.0;
            }
        }
        if let Some(masks) = &trace.dropout_masks {
            for (d, m) in delta.as_mut_slice().iter_mut().zip(masks[i].as_slice()) {
                *d *= m;
            }
        }
        let layer_in = if i == 0 { &trace.input } else { &trace.post[i - 1] };
        let want_dx = i > 0 || want_input_grad;
        match params.encoder[i].backprop(layer_in, &delta, &mut grads.encoder[i], want_dx) {
            Some(dx) if i > 0 => delta = dx,
            Some(dx) => grads.input = Some(dx),
            None => {}
        }
    }
    Ok(grads)
}

/// Plain gradient step, `theta <- theta - lr * grad`.
pub fn sgd_step(params: &mut ModelParams, grads: &GradSet, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::config(format!("learning rate must be > 0, got {lr}")));
    }
    check_grad_shapes(params, grads)?;
    for (p, g) in params.layers_mut().zip(grads.layers()) {
        for (w, gw) in p.weights.as_mut_slice().iter_mut().zip(g.weights.as_slice()) {
            *w -= lr * gw;
        }
        for (b, gb) in p.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    Ok(())
}

fn check_grad_shapes(params: &ModelParams, grads: &GradSet) -> Result<()> {
    let ok = params.encoder.len() == grads.encoder.len()
        && params
            .layers()
            .zip(grads.layers())
            .all(|(p, g)| p.weights.shape() == g.weights.shape() && p.bias.len() == g.bias.len());
    if ok {
        Ok(())
    } else {
        Err(Error::dim("gradient shapes do not match parameters"))
    }
}

/// SGD with optional heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::config("momentum must be in [0, 1), weight decay >= 0"));
        }
        Ok(Sgd { lr, momentum, weight_decay, velocity: None })
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &GradSet) -> Result<()> {
        if self.momentum == 0.0 && self.weight_decay == 0.0 {
            return sgd_step(params, grads, self.lr);
        }
        check_grad_shapes(params, grads)?;
        let mut flat = params.flatten();
        let g = grads.flatten();
        let v = self.velocity.get_or_insert_with(|| vec![0.0; flat.len()]);
        for ((p, gi), vi) in flat.iter_mut().zip(&g).zip(v.iter_mut()) {
            let d = gi + self.weight_decay * *p;
            *vi = self.momentum * *vi + d;
            *p -= self.lr * *vi;
        }
        params.load_flat(&flat)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
    pub epoch: usize,
    pub num_params: usize,
    /// File holding the parameters, relative to the manifest.
    pub weights_file: String,
}

pub const CHECKPOINT_MANIFEST: &str = "model.json";
pub const CHECKPOINT_WEIGHTS: &str = "model.bin";

/// Writes `model.json` and `model.bin` (little-endian f64, declaration order).
pub fn save_checkpoint(params: &ModelParams, epoch: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let flat = params.flatten();
    let mut bytes = Vec::with_capacity(flat.len() * 8);
    for v in &flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(CHECKPOINT_WEIGHTS), bytes)?;
    let manifest = CheckpointManifest {
        layer_sizes: params.layer_sizes.clone(),
        seed: params.seed,
        epoch,
        num_params: flat.len(),
        weights_file: CHECKPOINT_WEIGHTS.to_string(),
    };
    fs::write(dir.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?)?;
    let bytes = fs::read(dir.join(&manifest.weights_file))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::input("checkpoint length is not a multiple of 8 bytes"));
    }
    let flat: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut params = init_model(&manifest.layer_sizes, manifest.seed)?;
    params.load_flat(&flat)?;
    Ok((params, manifest))
}
