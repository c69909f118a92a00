//! Small dense and convolutional classifiers with hand-rolled
//! forward/backward passes.
//!
//! Everything here is built for reproducibility rather than speed:
//! parameters are f32, every reduction accumulates in f64 in a fixed
//! order, and per-sample work parallelizes with an ordered collect so the
//! result is bit-identical regardless of worker count. The model keeps
//! atomic forward/backward counters so callers can audit evaluation
//! budgets; `backward` runs its own internal forward without touching the
//! forward counter.

pub mod checkpoint;

use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Array3, Array4};
use rand::distributions::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::digest::Fnv64;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Available architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// flatten, dense to 128, relu, dense to classes.
    #[serde(rename = "mlp-s")]
    MlpS,
    /// Two conv3x3+relu+maxpool stages (16 then 32 channels), then dense.
    #[serde(rename = "cnn-s")]
    CnnS,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::MlpS => "mlp-s",
            Arch::CnnS => "cnn-s",
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-s" => Ok(Arch::MlpS),
            "cnn-s" => Ok(Arch::CnnS),
            other => Err(Error::Config(format!(
                "unknown model architecture '{other}' (expected mlp-s or cnn-s)"
            ))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Input geometry plus architecture choice; fixes every tensor shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("model input shape must be non-zero".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.arch == Arch::CnnS && (self.height % 4 != 0 || self.width % 4 != 0) {
            return Err(Error::Config(format!(
                "cnn-s pools twice, so height and width must be divisible by 4, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// One layer. Parameterized layers hold their tensors inline.
#[derive(Debug, Clone)]
pub enum Layer {
    /// Row-major weight (out x in) plus bias.
    Dense { w: Array2<f32>, b: Array1<f32> },
    /// 3x3 kernels (out_c x in_c x 3 x 3), stride 1, zero padding 1.
    Conv3x3 { w: Array4<f32>, b: Array1<f32> },
    Relu,
    /// 2x2 max pooling with stride 2.
    MaxPool2,
    Flatten,
}

impl Layer {
    fn param_count(&self) -> usize {
        match self {
            Layer::Dense { w, b } => w.len() + b.len(),
            Layer::Conv3x3 { w, b } => w.len() + b.len(),
            _ => 0,
        }
    }
}

/// Per-layer parameter gradients, f64 to keep fold error negligible.
#[derive(Debug, Clone)]
pub enum LayerGrad {
    Dense { dw: Array2<f64>, db: Array1<f64> },
    Conv3x3 { dw: Array4<f64>, db: Array1<f64> },
}

/// Gradients aligned with `Model::layers`; `None` for parameterless layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrad>>,
}

impl Gradients {
    /// Flat views in the same order as `Model::param_tensors`.
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in self.layers.iter().flatten() {
            match g {
                LayerGrad::Dense { dw, db } => {
                    out.push(dw.as_slice().expect("standard layout"));
                    out.push(db.as_slice().expect("standard layout"));
                }
                LayerGrad::Conv3x3 { dw, db } => {
                    out.push(dw.as_slice().expect("standard layout"));
                    out.push(db.as_slice().expect("standard layout"));
                }
            }
        }
        out
    }

    /// Euclidean norm over every parameter gradient.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for t in self.flat() {
            for g in t {
                acc += g * g;
            }
        }
        acc.sqrt()
    }
}

/// A classifier with audit counters.
#[derive(Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
    forwards: AtomicU64,
    backwards: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            forwards: AtomicU64::new(self.forwards.load(Ordering::Relaxed)),
            backwards: AtomicU64::new(self.backwards.load(Ordering::Relaxed)),
        }
    }
}

/// Per-sample activation: a channel volume or a flat vector.
#[derive(Debug, Clone)]
enum Act {
    Vol(Array3<f32>),
    Flat(Array1<f32>),
}

impl Model {
    /// Build a model with uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights
    /// and zero biases, drawn from a named substream of `init_seed` so the
    /// initialization is independent of every other random decision.
    pub fn new(spec: ModelSpec, init_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        match spec.arch {
            Arch::MlpS => {
                let in_features = spec.channels * spec.height * spec.width;
                layers.push(Layer::Flatten);
                layers.push(dense_placeholder(128, in_features));
                layers.push(Layer::Relu);
                layers.push(dense_placeholder(spec.classes, 128));
            }
            Arch::CnnS => {
                let (h4, w4) = (spec.height / 4, spec.width / 4);
                layers.push(conv_placeholder(16, spec.channels));
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool2);
                layers.push(conv_placeholder(32, 16));
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool2);
                layers.push(Layer::Flatten);
                layers.push(dense_placeholder(spec.classes, 32 * h4 * w4));
            }
        }

        let mut rng = substream(init_seed, "model-init", &[]);
        for layer in &mut layers {
            match layer {
                Layer::Dense { w, .. } => {
                    let fan_in = w.dim().1;
                    fill_uniform(w.as_slice_mut().expect("standard layout"), fan_in, &mut rng);
                }
                Layer::Conv3x3 { w, .. } => {
                    let fan_in = w.dim().1 * 9;
                    fill_uniform(w.as_slice_mut().expect("standard layout"), fan_in, &mut rng);
                }
                _ => {}
            }
        }

        Ok(Model {
            spec,
            layers,
            forwards: AtomicU64::new(0),
            backwards: AtomicU64::new(0),
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn backward_count(&self) -> u64 {
        self.backwards.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.forwards.store(0, Ordering::Relaxed);
        self.backwards.store(0, Ordering::Relaxed);
    }

    /// Parameter tensors as flat slices, layer order, weights before bias.
    pub fn param_tensors(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { w, b } => {
                    out.push(w.as_slice().expect("standard layout"));
                    out.push(b.as_slice().expect("standard layout"));
                }
                Layer::Conv3x3 { w, b } => {
                    out.push(w.as_slice().expect("standard layout"));
                    out.push(b.as_slice().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { w, b } => {
                    out.push(w.as_slice_mut().expect("standard layout"));
                    out.push(b.as_slice_mut().expect("standard layout"));
                }
                Layer::Conv3x3 { w, b } => {
                    out.push(w.as_slice_mut().expect("standard layout"));
                    out.push(b.as_slice_mut().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }

    /// Hash of the spec and every parameter byte, so a report pins the
    /// exact weights that produced it.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv64::new();
        h.update(self.spec.arch.name().as_bytes());
        for d in [self.spec.channels, self.spec.height, self.spec.width, self.spec.classes] {
            h.update_u64(d as u64);
        }
        for t in self.param_tensors() {
            for v in t {
                h.update(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    fn check_input(&self, data: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = data.dim();
        if (c, h, w) != (self.spec.channels, self.spec.height, self.spec.width) {
            return Err(Error::Domain(format!(
                "input shape {}x{}x{} does not match model {}x{}x{}",
                c, h, w, self.spec.channels, self.spec.height, self.spec.width
            )));
        }
        Ok(())
    }

    /// Batch forward pass; returns logits (samples x classes) and bumps
    /// the forward counter by one.
    pub fn forward(&self, data: &Array4<f32>) -> Result<Array2<f32>> {
        self.check_input(data)?;
        self.forwards.fetch_add(1, Ordering::Relaxed);
        self.forward_untracked(data)
    }

    fn forward_untracked(&self, data: &Array4<f32>) -> Result<Array2<f32>> {
        let n = data.dim().0;
        let rows: Vec<Array1<f32>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let sample = data.index_axis(ndarray::Axis(0), i).to_owned();
                self.forward_sample(sample)
            })
            .collect();
        let mut logits = Array2::<f32>::zeros((n, self.spec.classes));
        for (i, row) in rows.into_iter().enumerate() {
            logits.row_mut(i).assign(&row);
        }
        Ok(logits)
    }

    fn forward_sample(&self, input: Array3<f32>) -> Array1<f32> {
        let mut act = Act::Vol(input);
        for layer in &self.layers {
            act = layer_forward(layer, &act);
        }
        match act {
            Act::Flat(v) => v,
            Act::Vol(_) => unreachable!("architectures end with a dense layer"),
        }
    }

    /// Mean cross-entropy over a batch; one forward pass.
    pub fn loss_batch(&self, batch: &ImageBatch) -> Result<f64> {
        let logits = self.forward(&batch.data)?;
        cross_entropy(&logits, &batch.labels, Reduction::Mean)
    }

    /// Fraction of samples whose arg-max logit matches the label.
    pub fn accuracy(&self, data: &Array4<f32>, labels: &[u32]) -> Result<f64> {
        let logits = self.forward(data)?;
        if logits.dim().0 != labels.len() {
            return Err(Error::Domain("label count does not match batch".into()));
        }
        let mut correct = 0usize;
        for (row, &y) in logits.rows().into_iter().zip(labels) {
            let mut best = 0usize;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            if best == y as usize {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len().max(1) as f64)
    }

    /// All-f64 forward pass for finite-difference checks. Parameters are
    /// widened on the fly; no counter is touched.
    pub fn forward_f64(&self, data: &Array4<f32>) -> Result<Array2<f64>> {
        self.check_input(data)?;
        let n = data.dim().0;
        let mut logits = Array2::<f64>::zeros((n, self.spec.classes));
        for i in 0..n {
            let sample = data.index_axis(ndarray::Axis(0), i);
            let mut act: ActF64 = ActF64::Vol(sample.mapv(|v| v as f64));
            for layer in &self.layers {
                act = layer_forward_f64(layer, &act);
            }
            if let ActF64::Flat(v) = act {
                logits.row_mut(i).assign(&v);
            }
        }
        Ok(logits)
    }

    /// Mean cross-entropy via the f64 path; no counter is touched.
    pub fn loss_batch_f64(&self, batch: &ImageBatch) -> Result<f64> {
        let logits = self.forward_f64(&batch.data)?;
        let labels = &batch.labels;
        if logits.dim().0 != labels.len() {
            return Err(Error::Domain("label count does not match batch".into()));
        }
        let mut total = 0.0f64;
        for (row, &y) in logits.rows().into_iter().zip(labels) {
            if y as usize >= self.spec.classes {
                return Err(Error::Domain(format!("label {y} out of range")));
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y as usize];
        }
        Ok(total / labels.len() as f64)
    }

    /// Mean-loss backward pass. Runs its own internal forward (the forward
    /// counter is not bumped), increments the backward counter, and
    /// returns the batch loss together with parameter gradients.
    ///
    /// Per-sample gradients are computed in parallel and folded
    /// sequentially in sample order, so the result does not depend on the
    /// worker count. Input gradients at the first layer are skipped.
    pub fn backward(&self, batch: &ImageBatch) -> Result<(f64, Gradients)> {
        self.check_input(&batch.data)?;
        let n = batch.data.dim().0;
        if n == 0 || n != batch.labels.len() {
            return Err(Error::Domain("empty batch or label mismatch".into()));
        }
        for &y in &batch.labels {
            if y as usize >= self.spec.classes {
                return Err(Error::Domain(format!("label {y} out of range")));
            }
        }
        self.backwards.fetch_add(1, Ordering::Relaxed);

        let per_sample: Vec<(f64, Vec<Option<LayerGrad>>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let sample = batch.data.index_axis(ndarray::Axis(0), i).to_owned();
                self.backward_sample(sample, batch.labels[i])
            })
            .collect();

        let mut loss = 0.0f64;
        let mut total: Vec<Option<LayerGrad>> = self.layers.iter().map(|_| None).collect();
        for (sample_loss, grads) in per_sample {
            loss += sample_loss;
            for (slot, g) in total.iter_mut().zip(grads) {
                match (slot.as_mut(), g) {
                    (None, g) => *slot = g,
                    (Some(LayerGrad::Dense { dw, db }), Some(LayerGrad::Dense { dw: a, db: c })) => {
                        *dw += &a;
                        *db += &c;
                    }
                    (
                        Some(LayerGrad::Conv3x3 { dw, db }),
                        Some(LayerGrad::Conv3x3 { dw: a, db: c }),
                    ) => {
                        *dw += &a;
                        *db += &c;
                    }
                    _ => unreachable!("layer kinds are fixed"),
                }
            }
        }

        let scale = 1.0 / n as f64;
        for slot in total.iter_mut().flatten() {
            match slot {
                LayerGrad::Dense { dw, db } => {
                    dw.mapv_inplace(|v| v * scale);
                    db.mapv_inplace(|v| v * scale);
                }
                LayerGrad::Conv3x3 { dw, db } => {
                    dw.mapv_inplace(|v| v * scale);
                    db.mapv_inplace(|v| v * scale);
                }
            }
        }

        Ok((loss * scale, Gradients { layers: total }))
    }

    /// Forward with a trace, then reverse sweep, for one sample.
    fn backward_sample(&self, input: Array3<f32>, label: u32) -> (f64, Vec<Option<LayerGrad>>) {
        // acts[i] is the input of layer i; the final entry is the logits.
        let mut acts: Vec<Act> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(Act::Vol(input));
        for layer in &self.layers {
            let next = layer_forward(layer, acts.last().unwrap());
            acts.push(next);
        }
        let logits = match acts.last().unwrap() {
            Act::Flat(v) => v,
            Act::Vol(_) => unreachable!(),
        };

        // Stable softmax and per-sample loss in f64.
        let m = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let exps: Vec<f64> = logits.iter().map(|&v| ((v as f64) - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let loss = (m + z.ln()) - logits[label as usize] as f64;

        let mut g: GradAct = {
            let mut v = Array1::<f64>::zeros(logits.len());
            for (j, e) in exps.iter().enumerate() {
                v[j] = e / z - if j == label as usize { 1.0 } else { 0.0 };
            }
            GradAct::Flat(v)
        };

        let mut grads: Vec<Option<LayerGrad>> = self.layers.iter().map(|_| None).collect();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let (param_grad, input_grad) = layer_backward(layer, &acts[idx], &g, idx == 0);
            grads[idx] = param_grad;
            match input_grad {
                Some(next) => g = next,
                None => break,
            }
        }
        (loss, grads)
    }
}

fn dense_placeholder(out_f: usize, in_f: usize) -> Layer {
    Layer::Dense {
        w: Array2::zeros((out_f, in_f)),
        b: Array1::zeros(out_f),
    }
}

fn conv_placeholder(out_c: usize, in_c: usize) -> Layer {
    Layer::Conv3x3 {
        w: Array4::zeros((out_c, in_c, 3, 3)),
        b: Array1::zeros(out_c),
    }
}

fn fill_uniform(slice: &mut [f32], fan_in: usize, rng: &mut impl rand::Rng) {
    let bound = (1.0 / fan_in as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-bound, bound);
    for v in slice {
        *v = dist.sample(rng);
    }
}

fn layer_forward(layer: &Layer, input: &Act) -> Act {
    match (layer, input) {
        (Layer::Dense { w, b }, Act::Flat(x)) => {
            let mut out = Array1::<f32>::zeros(w.dim().0);
            for (j, row) in w.rows().into_iter().enumerate() {
                let mut acc = b[j] as f64;
                for (wv, xv) in row.iter().zip(x.iter()) {
                    acc += (*wv as f64) * (*xv as f64);
                }
                out[j] = acc as f32;
            }
            Act::Flat(out)
        }
        (Layer::Conv3x3 { w, b }, Act::Vol(x)) => Act::Vol(conv3x3_forward(x, w, b)),
        (Layer::Relu, Act::Flat(x)) => Act::Flat(x.mapv(|v| v.max(0.0))),
        (Layer::Relu, Act::Vol(x)) => Act::Vol(x.mapv(|v| v.max(0.0))),
        (Layer::MaxPool2, Act::Vol(x)) => Act::Vol(maxpool2_forward(x)),
        (Layer::Flatten, Act::Vol(x)) => {
            Act::Flat(Array1::from_iter(x.iter().copied()))
        }
        _ => unreachable!("layer/activation shape mismatch"),
    }
}

fn conv3x3_forward(x: &Array3<f32>, w: &Array4<f32>, b: &Array1<f32>) -> Array3<f32> {
    let (ic, h, wd) = x.dim();
    let oc = w.dim().0;
    let mut out = Array3::<f32>::zeros((oc, h, wd));
    for o in 0..oc {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[o] as f64;
                for i in 0..ic {
                    for ky in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            acc += (w[(o, i, ky, kx)] as f64)
                                * (x[(i, sy as usize, sx as usize)] as f64);
                        }
                    }
                }
                out[(o, y, xx)] = acc as f32;
            }
        }
    }
    out
}

fn maxpool2_forward(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f32::NEG_INFINITY;
                for ky in 0..2 {
                    for kx in 0..2 {
                        let v = x[(ch, 2 * y + ky, 2 * xx + kx)];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(ch, y, xx)] = best;
            }
        }
    }
    out
}

/// f64 twin of `Act` for the oracle forward path.
enum ActF64 {
    Vol(Array3<f64>),
    Flat(Array1<f64>),
}

fn layer_forward_f64(layer: &Layer, input: &ActF64) -> ActF64 {
    match (layer, input) {
        (Layer::Dense { w, b }, ActF64::Flat(x)) => {
            let mut out = Array1::<f64>::zeros(w.dim().0);
            for (j, row) in w.rows().into_iter().enumerate() {
                let mut acc = b[j] as f64;
                for (wv, xv) in row.iter().zip(x.iter()) {
                    acc += (*wv as f64) * xv;
                }
                out[j] = acc;
            }
            ActF64::Flat(out)
        }
        (Layer::Conv3x3 { w, b }, ActF64::Vol(x)) => {
            let (ic, h, wd) = x.dim();
            let oc = w.dim().0;
            let mut out = Array3::<f64>::zeros((oc, h, wd));
            for o in 0..oc {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[o] as f64;
                        for i in 0..ic {
                            for ky in 0..3usize {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3usize {
                                    let sx = xx as isize + kx as isize - 1;
                                    if sx < 0 || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += (w[(o, i, ky, kx)] as f64)
                                        * x[(i, sy as usize, sx as usize)];
                                }
                            }
                        }
                        out[(o, y, xx)] = acc;
                    }
                }
            }
            ActF64::Vol(out)
        }
        (Layer::Relu, ActF64::Flat(x)) => ActF64::Flat(x.mapv(|v| v.max(0.0))),
        (Layer::Relu, ActF64::Vol(x)) => ActF64::Vol(x.mapv(|v| v.max(0.0))),
        (Layer::MaxPool2, ActF64::Vol(x)) => {
            let (c, h, w) = x.dim();
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Array3::<f64>::zeros((c, oh, ow));
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..2 {
                            for kx in 0..2 {
                                best = best.max(x[(ch, 2 * y + ky, 2 * xx + kx)]);
                            }
                        }
                        out[(ch, y, xx)] = best;
                    }
                }
            }
            ActF64::Vol(out)
        }
        (Layer::Flatten, ActF64::Vol(x)) => ActF64::Flat(Array1::from_iter(x.iter().copied())),
        _ => unreachable!("layer/activation shape mismatch"),
    }
}

/// Activation gradient flowing backward through the network.
enum GradAct {
    Vol(Array3<f64>),
    Flat(Array1<f64>),
}

/// Returns (parameter gradient, input gradient). The input gradient is
/// `None` when `is_first` since nothing consumes it.
fn layer_backward(
    layer: &Layer,
    input: &Act,
    g: &GradAct,
    is_first: bool,
) -> (Option<LayerGrad>, Option<GradAct>) {
    match (layer, input, g) {
        (Layer::Dense { w, .. }, Act::Flat(x), GradAct::Flat(gy)) => {
            let (out_f, in_f) = w.dim();
            let mut dw = Array2::<f64>::zeros((out_f, in_f));
            for j in 0..out_f {
                let gj = gy[j];
                if gj == 0.0 {
                    continue;
                }
                for k in 0..in_f {
                    dw[(j, k)] = gj * x[k] as f64;
                }
            }
            let db = gy.clone();
            let input_grad = if is_first {
                None
            } else {
                let mut gx = Array1::<f64>::zeros(in_f);
                for k in 0..in_f {
                    let mut acc = 0.0f64;
                    for j in 0..out_f {
                        acc += (w[(j, k)] as f64) * gy[j];
                    }
                    gx[k] = acc;
                }
                Some(GradAct::Flat(gx))
            };
            (Some(LayerGrad::Dense { dw, db }), input_grad)
        }
        (Layer::Conv3x3 { w, .. }, Act::Vol(x), GradAct::Vol(gy)) => {
            let (ic, h, wd) = x.dim();
            let oc = w.dim().0;
            let mut dw = Array4::<f64>::zeros((oc, ic, 3, 3));
            let mut db = Array1::<f64>::zeros(oc);
            for o in 0..oc {
                for y in 0..h {
                    for xx in 0..wd {
                        let gv = gy[(o, y, xx)];
                        if gv == 0.0 {
                            continue;
                        }
                        db[o] += gv;
                        for i in 0..ic {
                            for ky in 0..3usize {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3usize {
                                    let sx = xx as isize + kx as isize - 1;
                                    if sx < 0 || sx >= wd as isize {
                                        continue;
                                    }
                                    dw[(o, i, ky, kx)] +=
                                        gv * x[(i, sy as usize, sx as usize)] as f64;
                                }
                            }
                        }
                    }
                }
            }
            let input_grad = if is_first {
                None
            } else {
                let mut gx = Array3::<f64>::zeros((ic, h, wd));
                for o in 0..oc {
                    for y in 0..h {
                        for xx in 0..wd {
                            let gv = gy[(o, y, xx)];
                            if gv == 0.0 {
                                continue;
                            }
                            for i in 0..ic {
                                for ky in 0..3usize {
                                    let sy = y as isize + ky as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let sx = xx as isize + kx as isize - 1;
                                        if sx < 0 || sx >= wd as isize {
                                            continue;
                                        }
                                        gx[(i, sy as usize, sx as usize)] +=
                                            gv * w[(o, i, ky, kx)] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
                Some(GradAct::Vol(gx))
            };
            (Some(LayerGrad::Conv3x3 { dw, db }), input_grad)
        }
        (Layer::Relu, Act::Flat(x), GradAct::Flat(gy)) => {
            let mut gx = gy.clone();
            for (g, v) in gx.iter_mut().zip(x.iter()) {
                if *v <= 0.0 {
                    *g = 0.0;
                }
            }
            (None, Some(GradAct::Flat(gx)))
        }
        (Layer::Relu, Act::Vol(x), GradAct::Vol(gy)) => {
            let mut gx = gy.clone();
            for (g, v) in gx.iter_mut().zip(x.iter()) {
                if *v <= 0.0 {
                    *g = 0.0;
                }
            }
            (None, Some(GradAct::Vol(gx)))
        }
        (Layer::MaxPool2, Act::Vol(x), GradAct::Vol(gy)) => {
            let (c, h, w) = x.dim();
            let (oh, ow) = (h / 2, w / 2);
            let mut gx = Array3::<f64>::zeros((c, h, w));
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        // First maximum in scan order receives the gradient,
                        // matching the forward pass's strict-greater compare.
                        let mut best = f32::NEG_INFINITY;
                        let mut at = (0usize, 0usize);
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let v = x[(ch, 2 * y + ky, 2 * xx + kx)];
                                if v > best {
                                    best = v;
                                    at = (2 * y + ky, 2 * xx + kx);
                                }
                            }
                        }
                        gx[(ch, at.0, at.1)] += gy[(ch, y, xx)];
                    }
                }
            }
            (None, Some(GradAct::Vol(gx)))
        }
        (Layer::Flatten, Act::Vol(x), GradAct::Flat(gy)) => {
            let gx = Array3::from_shape_vec(x.dim(), gy.to_vec())
                .expect("flatten preserves element count");
            (None, Some(GradAct::Vol(gx)))
        }
        _ => unreachable!("layer/activation shape mismatch"),
    }
}

/// Loss reduction across the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Numerically stable softmax cross-entropy, accumulated in f64 in
/// sample order.
pub fn cross_entropy(logits: &Array2<f32>, labels: &[u32], reduction: Reduction) -> Result<f64> {
    let (n, c) = logits.dim();
    if n != labels.len() {
        return Err(Error::Domain(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    let mut total = 0.0f64;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        if y as usize >= c {
            return Err(Error::Domain(format!("label {y} out of range for {c} classes")));
        }
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let lse = m + row.iter().map(|&v| ((v as f64) - m).exp()).sum::<f64>().ln();
        total += lse - row[y as usize] as f64;
    }
    Ok(match reduction {
        Reduction::Mean => total / n as f64,
        Reduction::Sum => total,
    })
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    #[serde(rename = "constant")]
    Constant,
    #[serde(rename = "cosine")]
    Cosine,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::Config(format!(
                "unknown schedule '{other}' (expected constant or cosine)"
            ))),
        }
    }
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Schedule::Cosine,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// The schedule as a pure function of the step index.
pub fn lr_at(cfg: &OptimConfig, step: u64, total_steps: u64) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            let t = total_steps.max(1) as f64;
            let s = (step.min(total_steps)) as f64;
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * s / t).cos())
        }
    }
}

/// SGD with classic momentum and decoupled-from-nothing weight decay:
/// v <- momentum * v + g + wd * w, then w <- w - lr * v.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimConfig,
    velocities: Vec<Vec<f64>>,
    step_index: u64,
    total_steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig, model: &Model, total_steps: u64) -> Result<Self> {
        cfg.validate()?;
        if total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        let velocities = model
            .param_tensors()
            .iter()
            .map(|t| vec![0.0f64; t.len()])
            .collect();
        Ok(Optimizer {
            cfg,
            velocities,
            step_index: 0,
            total_steps,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    /// Learning rate the next `step` call will use.
    pub fn current_lr(&self) -> f64 {
        lr_at(&self.cfg, self.step_index, self.total_steps)
    }

    /// Apply one update; returns the learning rate used.
    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<f64> {
        let lr = self.current_lr();
        let flat = grads.flat();
        let mut tensors = model.param_tensors_mut();
        if flat.len() != tensors.len() {
            return Err(Error::Domain("gradient/parameter tensor count mismatch".into()));
        }
        for ((params, grad), vel) in tensors.iter_mut().zip(&flat).zip(&mut self.velocities) {
            if params.len() != grad.len() || params.len() != vel.len() {
                return Err(Error::Domain("gradient/parameter shape mismatch".into()));
            }
            for ((w, g), v) in params.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
                let wd = self.cfg.weight_decay * (*w as f64);
                *v = self.cfg.momentum * *v + g + wd;
                *w = ((*w as f64) - lr * *v) as f32;
            }
        }
        self.step_index += 1;
        Ok(lr)
    }
}
