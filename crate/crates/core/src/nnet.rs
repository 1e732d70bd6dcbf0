//! Dense feedforward ReLU networks with exact reverse-mode gradients.
//!
//! Hidden layers use ReLU, the output layer is affine and its value is
//! clamped to `[-output_clamp, output_clamp]`. Batched evaluation works on
//! row-major input buffers (`rows x input_dim`) and records a [`Tape`] that
//! [`DenseNet::backward`] consumes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng::{self, Stream};
use crate::{Error, Result};

const FORMAT_HEADER: &str = "densenet v1";

/// One affine layer; `weights` is `fan_out x fan_in`, row-major.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { fan_in, fan_out, weights: vec![0.0; fan_in * fan_out], bias: vec![0.0; fan_out] }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DenseNet {
    layers: Vec<Layer>,
    output_clamp: f64,
}

/// Hidden-layer widths of a network family; input and output widths come
/// from the data.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NetConfig {
    pub hidden: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

impl NetConfig {
    pub fn widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(input);
        w.extend_from_slice(&self.hidden);
        w.push(output);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of examples held out for early stopping; 0 disables it.
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping; 0 disables it.
    pub early_stop_patience: usize,
    pub output_clamp: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 256,
            seed: 0,
            validation_fraction: 0.1,
            early_stop_patience: 20,
            output_clamp: 30.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must be in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if !(self.output_clamp > 0.0) {
            return Err(Error::Config(format!("output_clamp must be > 0, got {}", self.output_clamp)));
        }
        Ok(())
    }
}

/// Activations recorded by a batched forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    rows: usize,
    /// `acts[0]` is the input, `acts[l]` the post-activation input of layer l.
    acts: Vec<Vec<f64>>,
    /// Unclamped network output.
    raw: Vec<f64>,
    out: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Gradient with the same shape as a [`DenseNet`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradient {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.weights.iter_mut().chain(self.biases.iter_mut()).for_each(|v| v.fill(0.0));
    }

    pub fn scale(&mut self, alpha: f64) {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .for_each(|v| v.iter_mut().for_each(|x| *x *= alpha));
    }

    /// Flattened in the order of [`DenseNet::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// What a single example's loss looks like at the network output.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    /// `sum_j (out_j - target_j)^2`
    SquaredError(Vec<f64>),
    /// The example's loss gradient with respect to the outputs, supplied by
    /// a downstream model (e.g. a choice likelihood).
    Downstream(Vec<f64>),
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[2]) + (acc[1] + acc[3]);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl DenseNet {
    /// Fan-in scaled uniform (He) initialization, zero biases.
    pub fn new(widths: &[usize], output_clamp: f64, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(widths, output_clamp)?;
        let mut rng = rng::stream(seed, Stream::Init);
        for layer in &mut net.layers {
            let bound = libm::sqrt(6.0 / layer.fan_in as f64);
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize], output_clamp: f64) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        if !(output_clamp > 0.0) {
            return Err(Error::Config(format!("output_clamp must be > 0, got {output_clamp}")));
        }
        let layers = widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self { layers, output_clamp })
    }

    pub fn from_layers(layers: Vec<Layer>, output_clamp: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.fan_in == 0 || l.fan_out == 0 || l.weights.len() != l.fan_in * l.fan_out || l.bias.len() != l.fan_out
            {
                return Err(Error::Config(format!("layer {i} has inconsistent shape")));
            }
            if i > 0 && layers[i - 1].fan_out != l.fan_in {
                return Err(Error::Config(format!("layer {i} does not chain with layer {}", i - 1)));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("layer {i} has non-finite parameters")));
            }
        }
        if !(output_clamp > 0.0) {
            return Err(Error::Config(format!("output_clamp must be > 0, got {output_clamp}")));
        }
        Ok(Self { layers, output_clamp })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].fan_in];
        w.extend(self.layers.iter().map(|l| l.fan_out));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn output_clamp(&self) -> f64 {
        self.output_clamp
    }

    pub fn set_output_clamp(&mut self, clamp: f64) {
        assert!(clamp > 0.0);
        self.output_clamp = clamp;
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer (weights then bias).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape { expected: self.n_params(), got: flat.len() });
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape { expected: self.input_dim(), got: x.len() });
        }
        let mut tape = Tape::default();
        self.forward_batch(x, 1, &mut tape);
        Ok(tape.out)
    }

    /// Evaluates `rows` inputs stored row-major in `x` without checking
    /// shapes beyond debug assertions. Output is `rows x output_dim`.
    pub fn predict_batch(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut tape = Tape::default();
        self.forward_batch(x, rows, &mut tape);
        tape.out
    }

    /// Batched forward pass recording activations into `tape`.
    pub fn forward_batch(&self, x: &[f64], rows: usize, tape: &mut Tape) {
        debug_assert_eq!(x.len(), rows * self.input_dim());
        let n_layers = self.layers.len();
        tape.rows = rows;
        tape.acts.resize_with(n_layers, Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(x);
        for (li, layer) in self.layers.iter().enumerate() {
            let last = li + 1 == n_layers;
            let mut out = vec![0.0; rows * layer.fan_out];
            {
                let input = &tape.acts[li];
                for r in 0..rows {
                    let xr = &input[r * layer.fan_in..(r + 1) * layer.fan_in];
                    let or = &mut out[r * layer.fan_out..(r + 1) * layer.fan_out];
                    for (o, slot) in or.iter_mut().enumerate() {
                        let v = layer.bias[o] + dot(&layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in], xr);
                        *slot = if last || v > 0.0 { v } else { 0.0 };
                    }
                }
            }
            if last {
                let c = self.output_clamp;
                tape.out = out.iter().map(|v| v.clamp(-c, c)).collect();
                tape.raw = out;
            } else {
                tape.acts[li + 1] = out;
            }
        }
    }

    /// Accumulates into `grad` the parameter gradient given `dout`, the loss
    /// gradient with respect to the (clamped) outputs of the taped batch.
    pub fn backward(&self, tape: &Tape, dout: &[f64], grad: &mut Gradient) {
        let rows = tape.rows;
        let c = self.output_clamp;
        let mut delta: Vec<f64> = dout
            .iter()
            .zip(&tape.raw)
            .map(|(d, raw)| if raw.abs() > c { 0.0 } else { *d })
            .collect();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &tape.acts[li];
            let gw = &mut grad.weights[li];
            let gb = &mut grad.biases[li];
            for r in 0..rows {
                let xr = &input[r * layer.fan_in..(r + 1) * layer.fan_in];
                for o in 0..layer.fan_out {
                    let d = delta[r * layer.fan_out + o];
                    if d != 0.0 {
                        gb[o] += d;
                        axpy(&mut gw[o * layer.fan_in..(o + 1) * layer.fan_in], d, xr);
                    }
                }
            }
            if li == 0 {
                break;
            }
            let mut prev = vec![0.0; rows * layer.fan_in];
            for r in 0..rows {
                let pr = &mut prev[r * layer.fan_in..(r + 1) * layer.fan_in];
                for o in 0..layer.fan_out {
                    let d = delta[r * layer.fan_out + o];
                    if d != 0.0 {
                        axpy(pr, d, &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in]);
                    }
                }
                // ReLU mask: the recorded input of this layer is post-activation
                let xr = &input[r * layer.fan_in..(r + 1) * layer.fan_in];
                for (p, a) in pr.iter_mut().zip(xr) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
    }

    /// Serializes to the plain-text `densenet v1` format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_HEADER}");
        let _ = write!(s, "widths");
        for w in self.widths() {
            let _ = write!(s, " {w}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "clamp {:?}", self.output_clamp);
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "layer {i} {} {}", l.fan_out, l.fan_in);
            for row in l.weights.chunks_exact(l.fan_in) {
                write_reals(&mut s, "w", row);
            }
            write_reals(&mut s, "b", &l.bias);
        }
        s
    }

    /// Parses the `densenet v1` format from the start of `text`; returns the
    /// network and the number of lines consumed.
    pub fn from_text_prefix(text: &str) -> Result<(Self, usize)> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse { line: 0, msg: format!("unexpected end of input, expected {what}") })
        };
        let (ln, header) = next("header")?;
        if header.trim() != FORMAT_HEADER {
            return Err(Error::Parse { line: ln + 1, msg: format!("expected `{FORMAT_HEADER}`") });
        }
        let (ln, widths_line) = next("widths")?;
        let widths = parse_tagged::<usize>(widths_line, "widths", ln)?;
        let (ln, clamp_line) = next("clamp")?;
        let clamp = parse_tagged::<f64>(clamp_line, "clamp", ln)?;
        let clamp = *clamp.first().ok_or(Error::Parse { line: ln + 1, msg: "missing clamp value".into() })?;
        let mut net = Self::zeros(&widths, clamp).map_err(|e| Error::Parse { line: ln + 1, msg: format!("{e}") })?;
        let mut last_line = ln;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let (ln, head) = next("layer header")?;
            let dims = parse_tagged::<usize>(head, "layer", ln)?;
            if dims != [i, layer.fan_out, layer.fan_in] {
                return Err(Error::Parse { line: ln + 1, msg: format!("layer header {dims:?} does not match widths") });
            }
            for o in 0..layer.fan_out {
                let (ln, row) = next("weight row")?;
                let vals = parse_tagged::<f64>(row, "w", ln)?;
                if vals.len() != layer.fan_in {
                    return Err(Error::Parse { line: ln + 1, msg: format!("expected {} weights", layer.fan_in) });
                }
                layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in].copy_from_slice(&vals);
            }
            let (ln, row) = next("bias row")?;
            let vals = parse_tagged::<f64>(row, "b", ln)?;
            if vals.len() != layer.fan_out {
                return Err(Error::Parse { line: ln + 1, msg: format!("expected {} biases", layer.fan_out) });
            }
            layer.bias.copy_from_slice(&vals);
            last_line = ln;
        }
        let net = Self::from_layers(net.layers, clamp)
            .map_err(|e| Error::Parse { line: last_line + 1, msg: format!("{e}") })?;
        Ok((net, last_line + 1))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_text_prefix(text).map(|(n, _)| n)
    }
}

fn write_reals(s: &mut String, tag: &str, vals: &[f64]) {
    let _ = write!(s, "{tag}");
    for v in vals {
        let _ = write!(s, " {v:?}");
    }
    let _ = writeln!(s);
}

fn parse_tagged<T: core::str::FromStr>(line: &str, tag: &str, ln: usize) -> Result<Vec<T>> {
    let mut it = line.split_whitespace();
    if it.next() != Some(tag) {
        return Err(Error::Parse { line: ln + 1, msg: format!("expected `{tag}` line") });
    }
    it.map(|t| t.parse::<T>().map_err(|_| Error::Parse { line: ln + 1, msg: format!("bad number `{t}`") }))
        .collect()
}

/// Exact gradient of the mean loss over `batch` with respect to the
/// parameters of `net`.
pub fn param_gradient(net: &DenseNet, batch: &[(Vec<f64>, LossKind)]) -> Result<Gradient> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let din = net.input_dim();
    let dout = net.output_dim();
    let mut x = Vec::with_capacity(batch.len() * din);
    for (input, kind) in batch {
        if input.len() != din {
            return Err(Error::Shape { expected: din, got: input.len() });
        }
        let len = match kind {
            LossKind::SquaredError(t) | LossKind::Downstream(t) => t.len(),
        };
        if len != dout {
            return Err(Error::Shape { expected: dout, got: len });
        }
        x.extend_from_slice(input);
    }
    let mut tape = Tape::default();
    net.forward_batch(&x, batch.len(), &mut tape);
    let scale = 1.0 / batch.len() as f64;
    let mut d = Vec::with_capacity(batch.len() * dout);
    for (r, (_, kind)) in batch.iter().enumerate() {
        let out = &tape.out[r * dout..(r + 1) * dout];
        match kind {
            LossKind::SquaredError(t) => d.extend(out.iter().zip(t).map(|(o, t)| 2.0 * (o - t) * scale)),
            LossKind::Downstream(g) => d.extend(g.iter().map(|g| g * scale)),
        }
    }
    let mut grad = Gradient::zeros_like(net);
    net.backward(&tape, &d, &mut grad);
    Ok(grad)
}

/// A differentiable training objective over a fixed set of examples and
/// one or more jointly trained networks.
pub trait Objective {
    fn n_examples(&self) -> usize;

    /// Mean loss over `batch`. When `grads` is supplied (one per network) the
    /// gradient of that mean is accumulated into it.
    fn evaluate(&self, nets: &[DenseNet], batch: &[usize], grads: Option<&mut [Gradient]>) -> f64;
}

/// Per-epoch losses. `validation` is empty when no hold-out was used.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossTrace {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
    /// Epoch whose parameters were returned.
    pub selected_epoch: usize,
}

struct Adam {
    m: Vec<Gradient>,
    v: Vec<Gradient>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(nets: &[DenseNet]) -> Self {
        Self {
            m: nets.iter().map(Gradient::zeros_like).collect(),
            v: nets.iter().map(Gradient::zeros_like).collect(),
            t: 0,
        }
    }

    fn step(&mut self, nets: &mut [DenseNet], grads: &[Gradient], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(Self::B1, self.t as f64);
        let c2 = 1.0 - libm::pow(Self::B2, self.t as f64);
        let step = lr * libm::sqrt(c2) / c1;
        for (ni, net) in nets.iter_mut().enumerate() {
            let (mg, vg) = (&mut self.m[ni], &mut self.v[ni]);
            for (li, layer) in net.layers.iter_mut().enumerate() {
                let pairs = [
                    (&mut layer.weights, &grads[ni].weights[li], &mut mg.weights[li], &mut vg.weights[li]),
                    (&mut layer.bias, &grads[ni].biases[li], &mut mg.biases[li], &mut vg.biases[li]),
                ];
                for (p, g, m, v) in pairs {
                    for i in 0..p.len() {
                        m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                        v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                        p[i] -= step * m[i] / (libm::sqrt(v[i]) + Self::EPS);
                    }
                }
            }
        }
    }
}

fn mean_loss(obj: &dyn Objective, nets: &[DenseNet], idx: &[usize], chunk: usize) -> f64 {
    if idx.is_empty() {
        return f64::NAN;
    }
    let mut total = 0.0;
    for c in idx.chunks(chunk) {
        total += obj.evaluate(nets, c, None) * c.len() as f64;
    }
    total / idx.len() as f64
}

/// Trains `nets` jointly on `objective` with Adam and mini-batches.
///
/// With a validation split and positive patience the returned parameters
/// are those with the lowest validation loss.
pub fn train_joint(
    mut nets: Vec<DenseNet>,
    objective: &dyn Objective,
    config: &TrainConfig,
) -> Result<(Vec<DenseNet>, LossTrace)> {
    config.validate()?;
    let n = objective.n_examples();
    if n == 0 {
        return Err(Error::Input("training set is empty".into()));
    }
    for net in &mut nets {
        net.set_output_clamp(config.output_clamp);
    }
    let mut rng = rng::stream(config.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..n).collect();
    let n_val = if config.validation_fraction > 0.0 {
        ((n as f64 * config.validation_fraction) as usize).min(n - 1)
    } else {
        0
    };
    if n_val > 0 {
        order.shuffle(&mut rng);
    }
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_idx = {
        let mut v = val_idx.to_vec();
        v.sort_unstable();
        v
    };
    let mut train_idx = {
        let mut v = train_idx.to_vec();
        v.sort_unstable();
        v
    };
    let early_stopping = n_val > 0 && config.early_stop_patience > 0;

    let mut adam = Adam::new(&nets);
    let mut grads: Vec<Gradient> = nets.iter().map(Gradient::zeros_like).collect();
    let mut trace = LossTrace::default();
    let mut best: Option<(f64, Vec<DenseNet>, usize)> = None;
    let mut since_best = 0;

    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            grads.iter_mut().for_each(Gradient::clear);
            let loss = objective.evaluate(&nets, batch, Some(&mut grads));
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            total += loss * batch.len() as f64;
            adam.step(&mut nets, &grads, config.learning_rate);
        }
        trace.train.push(total / train_idx.len() as f64);
        if n_val > 0 {
            let v = mean_loss(objective, &nets, &val_idx, 1024);
            if !v.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            trace.validation.push(v);
            if early_stopping {
                let improved = best.as_ref().is_none_or(|(b, _, _)| v < *b);
                if improved {
                    best = Some((v, nets.clone(), epoch));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= config.early_stop_patience {
                        break;
                    }
                }
            }
        }
    }
    match best {
        Some((_, best_nets, epoch)) => {
            trace.selected_epoch = epoch;
            Ok((best_nets, trace))
        }
        None => {
            trace.selected_epoch = trace.train.len() - 1;
            Ok((nets, trace))
        }
    }
}

/// Row-major regression data for [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSet {
    pub dim: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl RegressionSet {
    pub fn new(dim: usize, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if dim == 0 || inputs.len() != dim * targets.len() {
            return Err(Error::Shape { expected: dim * targets.len(), got: inputs.len() });
        }
        Ok(Self { dim, inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

impl Objective for RegressionSet {
    fn n_examples(&self) -> usize {
        self.targets.len()
    }

    fn evaluate(&self, nets: &[DenseNet], batch: &[usize], grads: Option<&mut [Gradient]>) -> f64 {
        let net = &nets[0];
        let mut x = Vec::with_capacity(batch.len() * self.dim);
        for &i in batch {
            x.extend_from_slice(&self.inputs[i * self.dim..(i + 1) * self.dim]);
        }
        let mut tape = Tape::default();
        net.forward_batch(&x, batch.len(), &mut tape);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut dout = Vec::with_capacity(batch.len());
        for (r, &i) in batch.iter().enumerate() {
            let e = tape.out[r] - self.targets[i];
            loss += e * e;
            dout.push(2.0 * e * scale);
        }
        if let Some(grads) = grads {
            net.backward(&tape, &dout, &mut grads[0]);
        }
        loss * scale
    }
}

/// Trains a single-output network on squared error.
pub fn train(net: DenseNet, data: &RegressionSet, config: &TrainConfig) -> Result<(DenseNet, LossTrace)> {
    if net.input_dim() != data.dim {
        return Err(Error::Shape { expected: net.input_dim(), got: data.dim });
    }
    if net.output_dim() != 1 {
        return Err(Error::Shape { expected: 1, got: net.output_dim() });
    }
    let (mut nets, trace) = train_joint(vec![net], data, config)?;
    Ok((nets.remove(0), trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manual_net() -> DenseNet {
        // 2 -> 2 (ReLU) -> 1
        let l0 = Layer { fan_in: 2, fan_out: 2, weights: vec![1.0, 2.0, -3.0, 1.0], bias: vec![0.5, 1.0] };
        let l1 = Layer { fan_in: 2, fan_out: 1, weights: vec![2.0, -1.0], bias: vec![0.25] };
        DenseNet::from_layers(vec![l0, l1], 30.0).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = DenseNet::zeros(&[3, 5, 2], 30.0).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_affine_layer() {
        let l = Layer { fan_in: 1, fan_out: 1, weights: vec![2.0], bias: vec![1.0] };
        let net = DenseNet::from_layers(vec![l], 30.0).unwrap();
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn two_layer_composition() {
        // hidden pre-activations at x=(1,-1): 1-2+0.5=-0.5 -> 0 ; -3-1+1=-3 -> 0
        // so output is the bias only
        let net = manual_net();
        assert_eq!(net.forward(&[1.0, -1.0]).unwrap(), vec![0.25]);
        // x=(2,1): h = (2+2+0.5, -6+1+1) = (4.5, 0) -> out = 9 + 0.25
        assert_eq!(net.forward(&[2.0, 1.0]).unwrap(), vec![9.25]);
    }

    #[test]
    fn forward_rejects_bad_shape() {
        let net = manual_net();
        assert_eq!(net.forward(&[1.0]), Err(Error::Shape { expected: 2, got: 1 }));
    }

    #[test]
    fn output_is_clamped() {
        let l = Layer { fan_in: 1, fan_out: 1, weights: vec![100.0], bias: vec![0.0] };
        let net = DenseNet::from_layers(vec![l], 30.0).unwrap();
        assert_eq!(net.forward(&[1.0]).unwrap(), vec![30.0]);
        assert_eq!(net.forward(&[-1.0]).unwrap(), vec![-30.0]);
    }

    #[test]
    fn gradient_of_zero_net_at_zero_target_vanishes() {
        let net = DenseNet::zeros(&[2, 4, 1], 30.0).unwrap();
        let g = param_gradient(&net, &[(vec![0.3, -0.7], LossKind::SquaredError(vec![0.0]))]).unwrap();
        assert!(g.flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_parameter_hand_derivative() {
        let l = Layer { fan_in: 1, fan_out: 1, weights: vec![0.0], bias: vec![0.0] };
        let net = DenseNet::from_layers(vec![l], 30.0).unwrap();
        let g = param_gradient(&net, &[(vec![1.0], LossKind::SquaredError(vec![1.0]))]).unwrap();
        assert_eq!(g.weights[0], vec![-2.0]);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let net = DenseNet::new(&[3, 8, 4, 1], 30.0, 11).unwrap();
        let back = DenseNet::from_text(&net.to_text()).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn text_rejects_garbage() {
        assert!(DenseNet::from_text("densenet v2\n").is_err());
        let mut t = DenseNet::new(&[2, 2, 1], 30.0, 1).unwrap().to_text();
        t = t.replace("b ", "b x");
        assert!(DenseNet::from_text(&t).is_err());
    }

    #[test]
    fn fits_a_line() {
        let xs: Vec<f64> = (0..200).map(|i| i as f64 / 100.0 - 1.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let data = RegressionSet::new(1, xs, ys).unwrap();
        let net = DenseNet::new(&[1, 1], 30.0, 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 300,
            batch_size: 32,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        let (net, trace) = train(net, &data, &cfg).unwrap();
        assert!(*trace.train.last().unwrap() < 1e-4, "{:?}", trace.train.last());
        assert!(trace.train.last() < trace.train.first());
        let y = net.forward(&[0.5]).unwrap()[0];
        assert!((y - 2.0).abs() < 1e-2);
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let xs: Vec<f64> = (0..300).map(|i| (i as f64 * 0.37).sin()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let data = RegressionSet::new(1, xs, ys).unwrap();
        let cfg = TrainConfig { epochs: 20, batch_size: 16, seed: 5, ..TrainConfig::default() };
        let run = || train(DenseNet::new(&[1, 8, 1], 30.0, 9).unwrap(), &data, &cfg).unwrap();
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a.params(), b.params());
        assert_eq!(ta, tb);
    }

    #[test]
    fn divergence_is_reported() {
        let data = RegressionSet::new(1, vec![1.0, 2.0], vec![f64::NAN, 1.0]).unwrap();
        let cfg = TrainConfig { validation_fraction: 0.0, ..TrainConfig::default() };
        let err = train(DenseNet::new(&[1, 1], 30.0, 0).unwrap(), &data, &cfg).unwrap_err();
        assert_eq!(err, Error::Divergence { epoch: 0 });
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { output_clamp: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
