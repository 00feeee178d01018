//! Fully-connected regression networks trained from scratch.
//!
//! Hidden layers use ReLU; the output layer is linear by default. Training
//! minimizes the mean squared prediction error over a mini-batch (squared
//! Euclidean norm per sample, not divided by the band count) plus an L2
//! penalty `λ·Σ‖W‖²_F` on weight matrices only, using Adam. All arithmetic
//! is `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::{read_json, write_json};
use crate::matrix::{dot, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Linear,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

impl NetworkShape {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Result<Self> {
        let shape = NetworkShape {
            input_dim,
            hidden,
            output_dim,
            output_activation: OutputActivation::Linear,
        };
        shape.validate()?;
        Ok(shape)
    }

    /// Symmetric bottleneck `Q → h1 → h2 → h1 → Q`.
    pub fn acda(bands: usize, h1: usize, h2: usize) -> Result<Self> {
        let shape = NetworkShape::new(bands, vec![h1, h2, h1], bands)?;
        shape.validate_acda()?;
        Ok(shape)
    }

    /// The 60-40 bottleneck at 127 bands, scaled proportionally to `bands`.
    pub fn scaled_acda(bands: usize) -> Result<Self> {
        let (h1, h2) = scaled_hidden(bands)?;
        NetworkShape::acda(bands, h1, h2)
    }

    pub fn with_output_activation(mut self, act: OutputActivation) -> Self {
        self.output_activation = act;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid(format!(
                "layer widths must be positive: {} -> {:?} -> {}",
                self.input_dim, self.hidden, self.output_dim
            )));
        }
        Ok(())
    }

    /// Three hidden layers `(h1, h2, h1)` with `h2 < h1 < Q`, input and output
    /// both `Q`.
    pub fn validate_acda(&self) -> Result<()> {
        self.validate()?;
        let q = self.input_dim;
        let ok = self.output_dim == q
            && self.hidden.len() == 3
            && self.hidden[0] == self.hidden[2]
            && self.hidden[0] < q
            && self.hidden[1] < self.hidden[0];
        if !ok {
            return Err(Error::invalid(format!(
                "not a bottleneck shape: {q} -> {:?} -> {} (need h2 < h1 < {q}, mirrored)",
                self.hidden, self.output_dim
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim);
        widths.extend(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// `(h1, h2)` for [`NetworkShape::scaled_acda`].
pub fn scaled_hidden(bands: usize) -> Result<(usize, usize)> {
    if bands < 3 {
        return Err(Error::invalid(format!(
            "a bottleneck needs at least 3 bands, got {bands}"
        )));
    }
    let scale = |w: f64| (w * bands as f64 / 127.0).round() as usize;
    let h1 = scale(60.0).clamp(2, bands - 1);
    let h2 = scale(40.0).clamp(1, h1 - 1);
    Ok((h1, h2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_out × fan_in`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }

    fn apply(&self, input: &[f64], out: &mut [f64], relu: bool) {
        for ((o, w), b) in out.iter_mut().zip(self.weights.row_iter()).zip(&self.bias) {
            let z = b + dot(w, input);
            *o = if relu { z.max(0.0) } else { z };
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub output_activation: OutputActivation,
}

/// Gradients share the parameter layout.
pub type Gradients = MlpParams;

/// Per-layer activations of one forward pass; `activations[0]` is the input
/// and the last entry is the network output.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub activations: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("at least the input")
    }
}

impl MlpParams {
    /// All-zero parameters for `shape`.
    pub fn zeros(shape: &NetworkShape) -> Self {
        let layers = shape
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| Layer {
                weights: Matrix::zeros(fan_out, fan_in),
                bias: vec![0.0; fan_out],
            })
            .collect();
        MlpParams {
            layers,
            output_activation: shape.output_activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::fan_out)
    }

    pub fn shape(&self) -> NetworkShape {
        let hidden = self.layers[..self.layers.len() - 1]
            .iter()
            .map(Layer::fan_out)
            .collect();
        NetworkShape {
            input_dim: self.input_dim(),
            hidden,
            output_dim: self.output_dim(),
            output_activation: self.output_activation,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    fn same_layout(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.shape() == b.weights.shape())
    }

    /// Flat views over every weight and bias tensor, in layer order.
    fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `Σ_j ‖W_j‖²_F`; biases excluded.
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    fn new_buffers(&self) -> Vec<Vec<f64>> {
        let mut bufs = vec![vec![0.0; self.input_dim()]];
        bufs.extend(self.layers.iter().map(|l| vec![0.0; l.fan_out()]));
        bufs
    }

    fn forward_into(&self, x: &[f64], acts: &mut [Vec<f64>]) {
        acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (done, rest) = acts.split_at_mut(l + 1);
            let relu = l < last || self.output_activation == OutputActivation::Relu;
            layer.apply(&done[l], &mut rest[0], relu);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass> {
        if x.len() != self.input_dim() {
            return Err(Error::dims(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut acts = self.new_buffers();
        self.forward_into(x, &mut acts);
        Ok(ForwardPass { activations: acts })
    }

    /// Runs every row of `inputs` through the network.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::dims(format!(
                "network expects {} inputs, matrix has {} columns",
                self.input_dim(),
                inputs.cols()
            )));
        }
        let mut out = Matrix::zeros(inputs.rows(), self.output_dim());
        let mut acts = self.new_buffers();
        for (i, x) in inputs.row_iter().enumerate() {
            self.forward_into(x, &mut acts);
            out.row_mut(i).copy_from_slice(acts.last().unwrap());
        }
        Ok(out)
    }

    fn check_batch(&self, batch: &SampleSet) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if batch.inputs.cols() != self.input_dim() || batch.labels.cols() != self.output_dim() {
            return Err(Error::dims(format!(
                "batch is {}→{}, network is {}→{}",
                batch.inputs.cols(),
                batch.labels.cols(),
                self.input_dim(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// `(1/S)·Σ‖x̂ⁱ − yⁱ‖² + λ·Σ‖W_j‖²_F`.
    pub fn loss(&self, batch: &SampleSet, lambda: f64) -> Result<f64> {
        self.check_batch(batch)?;
        let mut acts = self.new_buffers();
        let mut sum = 0.0;
        for (x, y) in batch.inputs.row_iter().zip(batch.labels.row_iter()) {
            self.forward_into(x, &mut acts);
            sum += squared_distance(acts.last().unwrap(), y);
        }
        Ok(sum / batch.len() as f64 + lambda * self.weight_norm_sq())
    }

    /// Exact gradient of [`MlpParams::loss`] by reverse-mode differentiation.
    /// The ReLU derivative at zero is taken as zero.
    pub fn backward(&self, batch: &SampleSet, lambda: f64) -> Result<Gradients> {
        self.check_batch(batch)?;
        let all: Vec<usize> = (0..batch.len()).collect();
        let mut grads = MlpParams::zeros(&self.shape());
        let mut scratch = Scratch::new(self);
        self.accumulate(batch, &all, lambda, &mut grads, &mut scratch);
        Ok(grads)
    }

    /// Loss and gradient over `batch` rows `idx`, written into `grads`.
    fn accumulate(
        &self,
        batch: &SampleSet,
        idx: &[usize],
        lambda: f64,
        grads: &mut Gradients,
        scratch: &mut Scratch,
    ) -> f64 {
        for t in grads.tensors_mut() {
            t.fill(0.0);
        }
        let n_layers = self.layers.len();
        let inv_s = 1.0 / idx.len() as f64;
        let relu_out = self.output_activation == OutputActivation::Relu;
        let mut data_loss = 0.0;

        for &i in idx {
            let y = batch.labels.row(i);
            self.forward_into(batch.inputs.row(i), &mut scratch.acts);

            let out = &scratch.acts[n_layers];
            let delta = &mut scratch.deltas[n_layers - 1];
            for ((d, &o), &t) in delta.iter_mut().zip(out).zip(y) {
                let r = o - t;
                data_loss += r * r;
                *d = if relu_out && o <= 0.0 {
                    0.0
                } else {
                    2.0 * inv_s * r
                };
            }

            for l in (0..n_layers).rev() {
                let layer = &self.layers[l];
                let input = &scratch.acts[l];
                let g = &mut grads.layers[l];
                let delta = &scratch.deltas[l];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.bias[o] += d;
                    for (gw, &a) in g.weights.row_mut(o).iter_mut().zip(input) {
                        *gw += d * a;
                    }
                }
                if l == 0 {
                    break;
                }
                let (lower, upper) = scratch.deltas.split_at_mut(l);
                let prev = &mut lower[l - 1];
                let delta = &upper[0];
                prev.fill(0.0);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (p, &w) in prev.iter_mut().zip(layer.weights.row(o)) {
                        *p += w * d;
                    }
                }
                // hidden activations are ReLU outputs: positive iff active
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
        }

        if lambda != 0.0 {
            for (g, layer) in grads.layers.iter_mut().zip(&self.layers) {
                for (gw, &w) in g
                    .weights
                    .as_mut_slice()
                    .iter_mut()
                    .zip(layer.weights.as_slice())
                {
                    *gw += 2.0 * lambda * w;
                }
            }
        }
        data_loss * inv_s + lambda * self.weight_norm_sq()
    }
}

struct Scratch {
    acts: Vec<Vec<f64>>,
    /// `deltas[l]`: gradient w.r.t. layer `l`'s pre-activation.
    deltas: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(params: &MlpParams) -> Self {
        Scratch {
            acts: params.new_buffers(),
            deltas: params
                .layers
                .iter()
                .map(|l| vec![0.0; l.fan_out()])
                .collect(),
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// He-normal weights, `N(0, 2/fan_in)`; zero biases.
pub fn init_params(shape: &NetworkShape, seed: u64) -> Result<MlpParams> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MlpParams::zeros(shape);
    for layer in &mut params.layers {
        let std = (2.0 / layer.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in layer.weights.as_mut_slice() {
            *w = normal.sample(&mut rng);
        }
    }
    Ok(params)
}

/// Paired training rows. `indices[i]` records the pixel both rows came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub inputs: Matrix,
    pub labels: Matrix,
    pub indices: Vec<usize>,
}

impl SampleSet {
    pub fn new(inputs: Matrix, labels: Matrix) -> Result<Self> {
        let indices = (0..inputs.rows()).collect();
        SampleSet::with_indices(inputs, labels, indices)
    }

    pub fn with_indices(inputs: Matrix, labels: Matrix, indices: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.rows() || indices.len() != inputs.rows() {
            return Err(Error::dims(format!(
                "{} inputs, {} labels, {} indices",
                inputs.rows(),
                labels.rows(),
                indices.len()
            )));
        }
        Ok(SampleSet {
            inputs,
            labels,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// The same pairs with inputs and labels exchanged.
    pub fn reversed(&self) -> SampleSet {
        SampleSet {
            inputs: self.labels.clone(),
            labels: self.inputs.clone(),
            indices: self.indices.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            l2_lambda: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs >= 1
            && self.batch_size >= 1
            && self.learning_rate > 0.0
            && self.l2_lambda >= 0.0
            && (0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_eps > 0.0;
        if !ok {
            return Err(Error::invalid(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: MlpParams,
    pub v: MlpParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let zeros = MlpParams::zeros(&params.shape());
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) || !params.same_layout(&state.v)
    {
        return Err(Error::dims(
            "parameter, gradient and optimizer layouts differ",
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: MlpParams,
    /// Mean mini-batch loss per epoch, weighted by batch size.
    pub loss_history: Vec<f64>,
}

/// Mini-batch Adam training. Samples are reshuffled every epoch by a
/// generator seeded from `cfg.seed`; the final short batch is kept.
pub fn train(shape: &NetworkShape, samples: &SampleSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let mut params = init_params(shape, cfg.seed)?;
    params.check_batch(samples)?;
    let mut state = AdamState::new(&params);
    let mut grads = MlpParams::zeros(shape);
    let mut scratch = Scratch::new(&params);

    let mut shuffler = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffler.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffler);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let loss = params.accumulate(samples, chunk, cfg.l2_lambda, &mut grads, &mut scratch);
            total += loss * chunk.len() as f64;
            adam_step(&mut params, &grads, &mut state, cfg)?;
        }
        let epoch_loss = total / samples.len() as f64;
        if !epoch_loss.is_finite() || !params.is_finite() {
            return Err(Error::numerical(format!(
                "training diverged at epoch {epoch}"
            )));
        }
        loss_history.push(epoch_loss);
    }
    Ok(TrainOutcome {
        params,
        loss_history,
    })
}

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    format: String,
    dtype: String,
    output_activation: OutputActivation,
    layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    notes: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    fan_in: usize,
    fan_out: usize,
    /// Row-major weights followed by the bias, little-endian `f64`.
    raw: String,
}

/// Writes a JSON header at `path` and one `<stem>.layerN.raw` blob per layer.
pub fn save_params(params: &MlpParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "params".into());
    let mut layers = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let name = format!("{stem}.layer{i}.raw");
        let blob: Vec<u8> = layer
            .weights
            .as_slice()
            .iter()
            .chain(&layer.bias)
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let raw_path = path.with_file_name(&name);
        fs::write(&raw_path, blob).map_err(|e| Error::io(&raw_path, e))?;
        layers.push(LayerEntry {
            fan_in: layer.fan_in(),
            fan_out: layer.fan_out(),
            raw: name,
        });
    }
    let header = ParamsHeader {
        format: "mlp".into(),
        dtype: "f64".into(),
        output_activation: params.output_activation,
        layers,
        notes: BTreeMap::new(),
    };
    write_json(path, &header)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<MlpParams> {
    let path = path.as_ref();
    let header: ParamsHeader = read_json(path, "parameter header")?;
    if header.format != "mlp" || header.dtype != "f64" {
        return Err(Error::Format {
            what: "parameter header",
            reason: format!("unsupported format {}/{}", header.format, header.dtype),
        });
    }
    if header.layers.is_empty() {
        return Err(Error::Format {
            what: "parameter header",
            reason: "no layers".into(),
        });
    }
    let mut layers = Vec::with_capacity(header.layers.len());
    let mut prev_out = header.layers[0].fan_in;
    for entry in &header.layers {
        if entry.fan_in != prev_out || entry.fan_in == 0 || entry.fan_out == 0 {
            return Err(Error::dims(format!(
                "layer {}→{} does not chain from width {prev_out}",
                entry.fan_in, entry.fan_out
            )));
        }
        prev_out = entry.fan_out;
        let raw_path = path.with_file_name(&entry.raw);
        let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
        let n_w = entry.fan_in * entry.fan_out;
        if bytes.len() != (n_w + entry.fan_out) * 8 {
            return Err(Error::dims(format!(
                "{} holds {} bytes, expected {}",
                raw_path.display(),
                bytes.len(),
                (n_w + entry.fan_out) * 8
            )));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(index) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        layers.push(Layer {
            weights: Matrix::from_vec(entry.fan_out, entry.fan_in, vals[..n_w].to_vec())?,
            bias: vals[n_w..].to_vec(),
        });
    }
    Ok(MlpParams {
        layers,
        output_activation: header.output_activation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_params(shape: &NetworkShape, seed: u64) -> MlpParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = init_params(shape, seed).unwrap();
        for l in &mut p.layers {
            for b in &mut l.bias {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        p
    }

    fn random_batch(n: usize, q_in: usize, q_out: usize, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_fn(n, q_in, |_, _| rng.random_range(-1.0..1.0));
        let y = Matrix::from_fn(n, q_out, |_, _| rng.random_range(-1.0..1.0));
        SampleSet::new(x, y).unwrap()
    }

    #[test]
    fn he_normal_statistics() {
        let shape = NetworkShape::new(50, vec![200], 50).unwrap();
        let p = init_params(&shape, 11).unwrap();
        let w = p.layers[0].weights.as_slice();
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let expected = (2.0f64 / 50.0).sqrt();
        assert!((std - expected).abs() < 0.05 * expected, "std {std}");
        assert!(p.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));

        // fan_in 8 → std 0.5
        let shape = NetworkShape::new(8, vec![4000], 1).unwrap();
        let w = init_params(&shape, 3).unwrap().layers[0]
            .weights
            .clone()
            .into_vec();
        let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std - 0.5).abs() < 0.01);
    }

    #[test]
    fn init_is_deterministic() {
        let shape = NetworkShape::acda(16, 8, 5).unwrap();
        assert_eq!(
            init_params(&shape, 42).unwrap(),
            init_params(&shape, 42).unwrap()
        );
        assert_ne!(
            init_params(&shape, 42).unwrap(),
            init_params(&shape, 43).unwrap()
        );
    }

    #[test]
    fn forward_basics() {
        let shape = NetworkShape::new(3, vec![4, 2], 3).unwrap();
        let zero = MlpParams::zeros(&shape);
        assert_eq!(zero.forward(&[1.0, -2.0, 3.0]).unwrap().output(), &[0.0; 3]);
        assert!(zero.forward(&[1.0]).is_err());

        let single = MlpParams {
            layers: vec![Layer {
                weights: Matrix::identity(2),
                bias: vec![0.0; 2],
            }],
            output_activation: OutputActivation::Relu,
        };
        assert_eq!(single.forward(&[-1.0, 2.0]).unwrap().output(), &[0.0, 2.0]);
    }

    #[test]
    fn forward_matches_independent_composition() {
        let shape = NetworkShape::new(5, vec![7, 3, 7], 5).unwrap();
        let p = random_params(&shape, 8);
        let x = [0.3, -1.2, 0.8, 0.05, -0.4];
        let mut h: Vec<f64> = x.to_vec();
        for (l, layer) in p.layers.iter().enumerate() {
            let w = &layer.weights;
            let mut next = vec![0.0; w.rows()];
            for (o, n) in next.iter_mut().enumerate() {
                let mut z = layer.bias[o];
                for i in 0..w.cols() {
                    z += w[(o, i)] * h[i];
                }
                *n = if l + 1 < p.layers.len() {
                    z.max(0.0)
                } else {
                    z
                };
            }
            h = next;
        }
        let out = p.forward(&x).unwrap();
        for (a, b) in out.output().iter().zip(&h) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(out.activations.len(), 5);
    }

    #[test]
    fn loss_arithmetic() {
        // x̂ = (1, 2) via a bias-only network, y = (1, 4)
        let mut p = MlpParams::zeros(&NetworkShape::new(1, vec![], 2).unwrap());
        p.layers[0].bias = vec![1.0, 2.0];
        let batch = SampleSet::new(
            Matrix::from_rows(&[[0.0]]).unwrap(),
            Matrix::from_rows(&[[1.0, 4.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(p.loss(&batch, 0.0).unwrap(), 4.0);

        let perfect = SampleSet::new(
            Matrix::from_rows(&[[5.0]]).unwrap(),
            Matrix::from_rows(&[[1.0, 2.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(p.loss(&perfect, 0.0).unwrap(), 0.0);

        let empty = SampleSet::new(Matrix::zeros(0, 1), Matrix::zeros(0, 2)).unwrap();
        assert!(p.loss(&empty, 0.0).is_err());
        assert!(p.backward(&empty, 0.0).is_err());
    }

    #[test]
    fn regularizer_is_sum_of_squared_weights() {
        let shape = NetworkShape::new(4, vec![3], 4).unwrap();
        let p = random_params(&shape, 2);
        // labels = the network's own outputs, so the data term is zero
        let x = random_batch(6, 4, 4, 1).inputs;
        let y = p.predict(&x).unwrap();
        let batch = SampleSet::new(x, y).unwrap();
        let mut direct = 0.0;
        for l in &p.layers {
            for w in l.weights.as_slice() {
                direct += w * w;
            }
        }
        let lambda = 0.37;
        assert!((p.loss(&batch, lambda).unwrap() - lambda * direct).abs() < 1e-12);
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let shape = NetworkShape::new(4, vec![6, 3, 6], 4).unwrap();
        let p = random_params(&shape, 5);
        let x = random_batch(5, 4, 4, 6).inputs;
        let batch = SampleSet::new(x.clone(), p.predict(&x).unwrap()).unwrap();
        let g = p.backward(&batch, 0.0).unwrap();
        assert!(g.tensors().all(|t| t.iter().all(|v| v.abs() < 1e-12)));
    }

    #[test]
    fn weight_decay_gradient_is_linear_in_lambda() {
        let shape = NetworkShape::new(3, vec![4], 3).unwrap();
        let p = random_params(&shape, 7);
        let batch = random_batch(4, 3, 3, 8);
        let g0 = p.backward(&batch, 0.0).unwrap();
        let g1 = p.backward(&batch, 0.1).unwrap();
        let g2 = p.backward(&batch, 0.2).unwrap();
        for l in 0..p.layers.len() {
            let a = g0.layers[l].weights.as_slice();
            let b = g1.layers[l].weights.as_slice();
            let c = g2.layers[l].weights.as_slice();
            for i in 0..a.len() {
                assert!(((c[i] - a[i]) - 2.0 * (b[i] - a[i])).abs() < 1e-12);
            }
            assert_eq!(g0.layers[l].bias, g2.layers[l].bias);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let shape = NetworkShape::new(5, vec![8, 4, 8], 5).unwrap();
        for act in [OutputActivation::Linear, OutputActivation::Relu] {
            let p = random_params(&shape.clone().with_output_activation(act), 21);
            let batch = random_batch(6, 5, 5, 22);
            let g = p.backward(&batch, 0.01).unwrap();
            let err = max_fd_error(&p, &g, &batch, 0.01);
            assert!(err < 1e-4, "{act:?}: {err}");
        }
    }

    fn max_fd_error(p: &MlpParams, g: &Gradients, batch: &SampleSet, lambda: f64) -> f64 {
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let mut probe = p.clone();
        let analytic: Vec<f64> = g.tensors().flat_map(|t| t.iter().copied()).collect();
        let mut k = 0;
        for t in 0..p.layers.len() * 2 {
            let len = p.tensors().nth(t).unwrap().len();
            for i in 0..len {
                let orig = probe.tensors().nth(t).unwrap()[i];
                probe.tensors_mut().nth(t).unwrap()[i] = orig + h;
                let up = probe.loss(batch, lambda).unwrap();
                probe.tensors_mut().nth(t).unwrap()[i] = orig - h;
                let down = probe.loss(batch, lambda).unwrap();
                probe.tensors_mut().nth(t).unwrap()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                k += 1;
            }
        }
        worst
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let shape = NetworkShape::new(2, vec![3], 2).unwrap();
        let mut p = random_params(&shape, 1);
        let before = p.clone();
        let mut g = MlpParams::zeros(&shape);
        for (i, t) in g.tensors_mut().enumerate() {
            for (j, v) in t.iter_mut().enumerate() {
                *v = if (i + j) % 2 == 0 { 0.3 } else { -2.5 };
            }
        }
        let cfg = TrainConfig::default();
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &g, &mut state, &cfg).unwrap();
        for ((a, b), gr) in p
            .tensors()
            .flatten()
            .zip(before.tensors().flatten())
            .zip(g.tensors().flatten())
        {
            let expected = -cfg.learning_rate * gr.signum();
            assert!((a - b - expected).abs() < 1e-9);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let shape = NetworkShape::new(2, vec![3], 2).unwrap();
        let mut p = random_params(&shape, 1);
        let before = p.clone();
        let g = MlpParams::zeros(&shape);
        let mut state = AdamState::new(&p);
        for _ in 0..50 {
            adam_step(&mut p, &g, &mut state, &TrainConfig::default()).unwrap();
        }
        assert_eq!(p, before);

        let other = MlpParams::zeros(&NetworkShape::new(2, vec![4], 2).unwrap());
        assert!(adam_step(&mut p, &other, &mut state, &TrainConfig::default()).is_err());
    }

    fn affine_task(n: usize, q: usize, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0));
        let y = Matrix::from_fn(n, q, |i, j| 2.0 * x[(i, j)] + 1.0);
        SampleSet::new(x, y).unwrap()
    }

    #[test]
    fn learns_identity_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::from_fn(512, 6, |_, _| rng.random_range(-1.0..1.0));
        let samples = SampleSet::new(x.clone(), x).unwrap();
        let shape = NetworkShape::new(6, vec![16, 16, 16], 6).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            l2_lambda: 0.0,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(&shape, &samples, &cfg).unwrap();
        let b = train(&shape, &samples, &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        let first = a.loss_history[0];
        let last = *a.loss_history.last().unwrap();
        assert!(last < 0.01 * first, "{first} -> {last}");

        // 20-epoch moving average never rises
        let ma: Vec<f64> = a
            .loss_history
            .windows(20)
            .map(|w| w.iter().sum::<f64>() / 20.0)
            .collect();
        for w in ma.windows(2) {
            assert!(w[1] <= w[0], "moving average rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn learns_affine_map() {
        let samples = affine_task(1000, 4, 17);
        let shape = NetworkShape::new(4, vec![16, 16], 4).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            l2_lambda: 0.0,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train(&shape, &samples, &cfg).unwrap();
        let mse = out.params.loss(&samples, 0.0).unwrap() / 4.0;
        let stats = crate::linalg::mean_cov(&samples.labels).unwrap();
        let var = stats.cov.trace() / 4.0;
        assert!(mse < 1e-3 * var, "mse {mse}, label variance {var}");
    }

    #[test]
    fn train_rejects_empty_and_bad_config() {
        let shape = NetworkShape::new(2, vec![2], 2).unwrap();
        let empty = SampleSet::new(Matrix::zeros(0, 2), Matrix::zeros(0, 2)).unwrap();
        assert!(train(&shape, &empty, &TrainConfig::default()).is_err());
        let samples = affine_task(4, 2, 1);
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train(&shape, &samples, &bad).is_err());
    }

    #[test]
    fn bottleneck_shapes() {
        assert_eq!(scaled_hidden(127).unwrap(), (60, 40));
        assert_eq!(scaled_hidden(16).unwrap(), (8, 5));
        assert_eq!(scaled_hidden(3).unwrap(), (2, 1));
        assert!(scaled_hidden(2).is_err());
        assert!(NetworkShape::acda(16, 16, 4).is_err());
        assert!(NetworkShape::acda(16, 8, 8).is_err());
        assert!(NetworkShape::acda(16, 8, 4).is_ok());
        let free = NetworkShape::new(16, vec![20, 20, 20], 16).unwrap();
        assert!(free.validate_acda().is_err());
    }

    #[test]
    fn params_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let shape = NetworkShape::acda(10, 6, 3)
            .unwrap()
            .with_output_activation(OutputActivation::Relu);
        let p = random_params(&shape, 4);
        let path = dir.path().join("fwd.json");
        save_params(&p, &path).unwrap();
        assert!(dir.path().join("fwd.layer3.raw").exists());
        assert_eq!(load_params(&path).unwrap(), p);
    }
}
