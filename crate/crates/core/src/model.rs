//! Fully-connected classifier with hand-written backprop, SGD with momentum
//! and a cosine learning-rate schedule.
//!
//! Hidden layers use ReLU; the output layer is linear. Softmax is never
//! applied inside the model, so margins are always taken on raw logits.

use std::f64::consts::PI;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::Rng;

const MODEL_TAG: &[u8; 4] = b"MLPP";
const MODEL_VERSION: u8 = 1;

/// One dense layer. `weights` is `inputs × outputs`, row-major, so the
/// layer computes `Wᵀx + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::Parameter("layer with zero width".into()));
        }
        if weights.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::Dimension(format!(
                "layer {inputs}x{outputs} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.outputs..(i + 1) * self.outputs];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
}

/// Model parameters θ. Equality compares parameters only.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
    /// Bumped on every parameter mutation; forward caches remember it.
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Intermediate values kept by [`Mlp::forward`] for [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Input to each layer (post-ReLU for hidden layers).
    inputs: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Activations feeding the output layer.
    pub fn penultimate(&self) -> &[f64] {
        self.inputs.last().expect("cache has at least one layer input")
    }
}

/// Same shape as the parameters of the [`Mlp`] it was made for.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            weights: model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .flat_map(|v| v.iter_mut())
            .for_each(|x| *x *= factor);
    }

    /// Same order as [`Mlp::parameters_mut`].
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b))
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn first_non_finite_layer(&self) -> Option<usize> {
        (0..self.weights.len()).find(|&i| {
            self.weights[i]
                .iter()
                .chain(&self.biases[i])
                .any(|v| !v.is_finite())
        })
    }
}

impl Mlp {
    /// `dims` lists the input width, hidden widths, then the class count.
    /// Weights are Gaussian with standard deviation `1/√fan_in`; biases are 0.
    pub fn init(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Parameter(format!(
                "need at least input and output dims, got {dims:?}"
            )));
        }
        if let Some(pos) = dims.iter().position(|d| *d == 0) {
            return Err(Error::Parameter(format!("dimension {pos} of {dims:?} is zero")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let weights = (0..fan_in * fan_out).map(|_| rng.normal() * scale).collect();
                Layer::new(fan_in, fan_out, weights, vec![0.0; fan_out])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            generation: 0,
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("model without layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Dimension(format!(
                    "layer outputs {} feed layer inputs {}",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        Ok(Self {
            layers,
            generation: 0,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flat view of every parameter, weights then biases per layer.
    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(&current, &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut current, out));
        }
        Ok((
            current,
            ForwardCache {
                generation: self.generation,
                inputs,
            },
        ))
    }

    /// Logits only, for evaluation paths.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(z, _)| z)
    }

    pub fn backward(&self, cache: &ForwardCache, d_logits: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(cache, d_logits, &mut grads)?;
        Ok(grads)
    }

    /// Adds the gradient of the loss whose logit-gradient is `d_logits` into
    /// `grads`.
    pub fn backward_into(&self, cache: &ForwardCache, d_logits: &[f64], grads: &mut Gradients) -> Result<()> {
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(Error::Usage(
                "forward cache does not belong to the current parameters".into(),
            ));
        }
        if d_logits.len() != self.classes() {
            return Err(Error::Dimension(format!(
                "logit gradient has {} entries, model has {} classes",
                d_logits.len(),
                self.classes()
            )));
        }
        if grads.weights.len() != self.layers.len() {
            return Err(Error::Dimension("gradient buffer shape mismatch".into()));
        }
        let mut delta = d_logits.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let gw = &mut grads.weights[i];
            for (r, xr) in input.iter().enumerate() {
                if *xr == 0.0 {
                    continue;
                }
                let row = &mut gw[r * layer.outputs..(r + 1) * layer.outputs];
                row.iter_mut().zip(&delta).for_each(|(g, d)| *g += xr * d);
            }
            grads.biases[i].iter_mut().zip(&delta).for_each(|(g, d)| *g += d);
            if i == 0 {
                break;
            }
            // Propagate to the previous layer's post-ReLU output, then
            // through the ReLU (inactive units have zero input here).
            let mut prev = vec![0.0; layer.inputs];
            for (r, p) in prev.iter_mut().enumerate() {
                if input[r] <= 0.0 {
                    continue;
                }
                let row = &layer.weights[r * layer.outputs..(r + 1) * layer.outputs];
                *p = row.iter().zip(&delta).map(|(w, d)| w * d).sum();
            }
            delta = prev;
        }
        Ok(())
    }

    pub(crate) fn encode(&self, w: &mut ByteWriter) {
        w.bytes(MODEL_TAG);
        w.u8(MODEL_VERSION);
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.u32(l.inputs as u32);
            w.u32(l.outputs as u32);
        }
        for l in &self.layers {
            w.f64s(&l.weights);
            w.f64s(&l.bias);
        }
    }

    pub(crate) fn decode(r: &mut ByteReader) -> Result<Self> {
        r.expect_tag(MODEL_TAG)?;
        r.expect_version(MODEL_VERSION)?;
        let n = r.u32()? as usize;
        if n == 0 {
            return Err(r.error("model with zero layers"));
        }
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            shapes.push((r.u32()? as usize, r.u32()? as usize));
        }
        let mut layers = Vec::with_capacity(n);
        for (inputs, outputs) in shapes {
            let weights = r.f64s(inputs * outputs)?;
            let bias = r.f64s(outputs)?;
            layers.push(Layer::new(inputs, outputs, weights, bias).map_err(|e| r.error(e.to_string()))?);
        }
        Self::from_layers(layers).map_err(|e| r.error(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.encode(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let model = Self::decode(&mut r)?;
        if !r.is_empty() {
            return Err(r.error("trailing bytes after model"));
        }
        Ok(model)
    }
}

/// Shape of the learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    /// `η₀ · (1 + cos(πt/T)) / 2`, reaching zero at `T`.
    #[default]
    HalfCosine,
    /// `η₀ · cos(7πt / 16T)`, the truncated form common in FixMatch code.
    SevenSixteenths,
}

/// Learning rate at step `t` of `total`.
pub fn cosine_lr(base_lr: f64, t: u64, total: u64, schedule: LrSchedule) -> Result<f64> {
    if total == 0 {
        return Err(Error::Parameter("cosine schedule with zero total steps".into()));
    }
    if t > total {
        return Err(Error::Usage(format!("step {t} beyond schedule length {total}")));
    }
    let frac = t as f64 / total as f64;
    Ok(match schedule {
        LrSchedule::HalfCosine => base_lr * (1.0 + (PI * frac).cos()) / 2.0,
        LrSchedule::SevenSixteenths => base_lr * (7.0 * PI * frac / 16.0).cos(),
    })
}

/// Heavy-ball SGD: `v ← μv + g`, `θ ← θ − η(t)·v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    velocity: Gradients,
    momentum: f64,
    base_lr: f64,
    total_steps: u64,
    step: u64,
    schedule: LrSchedule,
}

impl SgdMomentum {
    pub fn new(
        model: &Mlp,
        momentum: f64,
        base_lr: f64,
        total_steps: u64,
        schedule: LrSchedule,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!("momentum {momentum} not in [0, 1)")));
        }
        if !(base_lr > 0.0) {
            return Err(Error::Parameter(format!("learning rate {base_lr} must be > 0")));
        }
        Ok(Self {
            velocity: Gradients::zeros_like(model),
            momentum,
            base_lr,
            total_steps,
            step: 0,
            schedule,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn lr(&self) -> Result<f64> {
        cosine_lr(self.base_lr, self.step, self.total_steps, self.schedule)
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.weights.len() != model.layers.len()
            || grads
                .weights
                .iter()
                .zip(&model.layers)
                .any(|(g, l)| g.len() != l.weights.len())
        {
            return Err(Error::Dimension("gradient shape differs from model".into()));
        }
        if let Some(layer) = grads.first_non_finite_layer() {
            return Err(Error::Numeric(format!("gradient of layer {layer}")));
        }
        if self.step >= self.total_steps {
            return Err(Error::Usage(format!(
                "optimizer already took all {} steps",
                self.total_steps
            )));
        }
        let lr = self.lr()?;
        let mu = self.momentum;
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
            let vel = self.velocity.weights[i]
                .iter_mut()
                .chain(self.velocity.biases[i].iter_mut());
            let g = grads.weights[i].iter().chain(&grads.biases[i]);
            for ((p, v), g) in params.zip(vel).zip(g) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        model.generation += 1;
        self.step += 1;
        Ok(())
    }
}
