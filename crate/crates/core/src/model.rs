//! Dense MLP with hand-written forward and backward passes.
//!
//! Parameters live in one flat [`ParameterVector`]. Layout, layer by layer:
//! the weight matrix of shape `inputs × outputs` in row-major order (entry
//! `(i, j)` at `i * outputs + j`), followed by the `outputs` biases. A layer
//! computes `y = x W + b`. The first bias of layer 1 therefore sits at index
//! `520 · w₁` for a 520-wide input.
//!
//! All arithmetic is `f64`. Products with exactly-zero inputs are skipped;
//! fingerprints are mostly "not detected" and relu zeroes many hidden units,
//! so this is the main speedup and does not change results.

use std::fmt;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Probability clamp for the cross-entropy losses.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// Raw affine outputs, squared-error loss.
    Linear,
    /// Independent sigmoids, binary cross-entropy.
    Sigmoid,
    /// Softmax row, categorical cross-entropy.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    layer_widths: Vec<usize>,
    hidden_activation: Activation,
    output_head: OutputHead,
}

impl MlpArchitecture {
    pub fn new(layer_widths: Vec<usize>, hidden_activation: Activation, output_head: OutputHead) -> Result<Self> {
        if layer_widths.len() < 3 {
            return Err(Error::invalid(
                "architecture needs input, at least one hidden layer and output",
            ));
        }
        if layer_widths.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if output_head == OutputHead::Softmax && *layer_widths.last().unwrap() < 2 {
            return Err(Error::invalid("softmax head needs at least two outputs"));
        }
        Ok(MlpArchitecture {
            layer_widths,
            hidden_activation,
            output_head,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn head(&self) -> OutputHead {
        self.output_head
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Number of dense (weight + bias) layers.
    pub fn layer_count(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Index ranges of layer `l`'s weights and biases in the flat vector.
    pub fn layer_ranges(&self, l: usize) -> (Range<usize>, Range<usize>) {
        let start: usize = self.layer_widths[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let (i, o) = (self.layer_widths[l], self.layer_widths[l + 1]);
        (start..start + i * o, start + i * o..start + i * o + o)
    }

    /// Stable textual identity used in checkpoint headers, e.g.
    /// `520-128-64-2/relu/linear`.
    pub fn fingerprint(&self) -> String {
        let widths: Vec<String> = self.layer_widths.iter().map(|w| w.to_string()).collect();
        let act = match self.hidden_activation {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        };
        let head = match self.output_head {
            OutputHead::Linear => "linear",
            OutputHead::Sigmoid => "sigmoid",
            OutputHead::Softmax => "softmax",
        };
        format!("{}/{act}/{head}", widths.join("-"))
    }

    pub fn from_fingerprint(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed architecture fingerprint {s:?}"));
        let mut parts = s.split('/');
        let widths = parts
            .next()
            .ok_or_else(bad)?
            .split('-')
            .map(|w| w.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let act = match parts.next() {
            Some("relu") => Activation::Relu,
            Some("tanh") => Activation::Tanh,
            _ => return Err(bad()),
        };
        let head = match parts.next() {
            Some("linear") => OutputHead::Linear,
            Some("sigmoid") => OutputHead::Sigmoid,
            Some("softmax") => OutputHead::Softmax,
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        MlpArchitecture::new(widths, act, head)
    }

    /// Same hidden stack with a different output width and head.
    pub fn with_head(&self, output_width: usize, head: OutputHead) -> Result<Self> {
        let mut widths = self.layer_widths.clone();
        *widths.last_mut().unwrap() = output_width;
        MlpArchitecture::new(widths, self.hidden_activation, head)
    }
}

impl fmt::Display for MlpArchitecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.fingerprint())
    }
}

/// Flat parameter vector; the unit exchanged between server and clients.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParameterVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParameterVector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_len(&self, arch: &MlpArchitecture) -> Result<()> {
        if self.len() != arch.param_count() {
            return Err(Error::LengthMismatch {
                expected: arch.param_count(),
                actual: self.len(),
            });
        }
        Ok(())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &ParameterVector) -> bool {
        self.len() == other.len() && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// One dense layer in structured form.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `inputs × outputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn flatten(layers: &[DenseLayer]) -> ParameterVector {
    let mut v = Vec::with_capacity(layers.iter().map(|l| l.weights.len() + l.bias.len()).sum());
    for l in layers {
        v.extend_from_slice(&l.weights);
        v.extend_from_slice(&l.bias);
    }
    ParameterVector(v)
}

pub fn unflatten(params: &ParameterVector, arch: &MlpArchitecture) -> Result<Vec<DenseLayer>> {
    params.check_len(arch)?;
    Ok((0..arch.layer_count())
        .map(|l| {
            let (w, b) = arch.layer_ranges(l);
            DenseLayer {
                inputs: arch.widths()[l],
                outputs: arch.widths()[l + 1],
                weights: params.0[w].to_vec(),
                bias: params.0[b].to_vec(),
            }
        })
        .collect())
}

/// Uniform `±1/√fan_in` weights, zero biases.
pub fn init_params(arch: &MlpArchitecture, seed: u64) -> ParameterVector {
    let mut rng = seed::rng(seed, &[stream::INIT]);
    let mut v = vec![0.0; arch.param_count()];
    for l in 0..arch.layer_count() {
        let (w, _) = arch.layer_ranges(l);
        let bound = 1.0 / (arch.widths()[l] as f64).sqrt();
        for x in &mut v[w] {
            *x = rng.random_range(-bound..bound);
        }
    }
    ParameterVector(v)
}

/// Features and targets, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
    pub feature_width: usize,
    pub target_width: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, targets: Vec<f64>, feature_width: usize, target_width: usize) -> Result<Self> {
        if feature_width == 0 || target_width == 0 {
            return Err(Error::invalid("batch widths must be positive"));
        }
        if !features.len().is_multiple_of(feature_width) || !targets.len().is_multiple_of(target_width) {
            return Err(Error::invalid("batch matrices are ragged"));
        }
        if features.len() / feature_width != targets.len() / target_width {
            return Err(Error::invalid(format!(
                "batch has {} feature rows but {} target rows",
                features.len() / feature_width,
                targets.len() / target_width
            )));
        }
        if !features.iter().chain(&targets).all(|v| v.is_finite()) {
            return Err(Error::invalid("batch contains non-finite values"));
        }
        Ok(Batch {
            features,
            targets,
            feature_width,
            target_width,
        })
    }

    pub fn rows(&self) -> usize {
        self.features.len() / self.feature_width
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_row(&self, r: usize) -> &[f64] {
        &self.features[r * self.feature_width..(r + 1) * self.feature_width]
    }

    pub fn target_row(&self, r: usize) -> &[f64] {
        &self.targets[r * self.target_width..(r + 1) * self.target_width]
    }

    /// Same features, different targets.
    pub fn with_targets(&self, targets: Vec<f64>, target_width: usize) -> Result<Batch> {
        Batch::new(self.features.clone(), targets, self.feature_width, target_width)
    }

    /// Rows concatenated in order.
    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for p in parts {
            if p.feature_width != first.feature_width || p.target_width != first.target_width {
                return Err(Error::invalid("cannot concatenate batches of different widths"));
            }
            features.extend_from_slice(&p.features);
            targets.extend_from_slice(&p.targets);
        }
        Batch::new(features, targets, first.feature_width, first.target_width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub seed: u64,
    /// Weight on the positive term of binary cross-entropy; 1 is unweighted.
    pub positive_class_weight: f64,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        TrainingHyperparams {
            learning_rate: 0.2,
            batch_size: 32,
            local_epochs: 1,
            seed: 0,
            positive_class_weight: 1.0,
        }
    }
}

impl TrainingHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid(format!(
                "learning rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(Error::invalid("batch size and local epochs must be positive"));
        }
        if !(self.positive_class_weight.is_finite() && self.positive_class_weight > 0.0) {
            return Err(Error::invalid("positive class weight must be positive"));
        }
        Ok(())
    }
}

/// Parameter indices excluded from updates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrozenMask {
    ranges: Vec<Range<usize>>,
}

impl FrozenMask {
    /// Freeze the first `layers` dense layers.
    pub fn leading_layers(arch: &MlpArchitecture, layers: usize) -> Result<Self> {
        if layers >= arch.layer_count() {
            return Err(Error::invalid(format!(
                "cannot freeze {layers} of {} layers",
                arch.layer_count()
            )));
        }
        let end = if layers == 0 {
            0
        } else {
            arch.layer_ranges(layers - 1).1.end
        };
        Ok(FrozenMask {
            ranges: if end == 0 {
                Vec::new()
            } else {
                std::iter::once(0..end).collect()
            },
        })
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.ranges.iter().any(|r| r.contains(&index))
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    fn zero(&self, grad: &mut [f64]) {
        for r in &self.ranges {
            grad[r.clone()].fill(0.0);
        }
    }
}

/// Per-layer activation buffers for a set of rows.
struct Workspace {
    /// `acts[0]` is the gathered input; `acts[l + 1]` is layer `l`'s output.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    fn new(arch: &MlpArchitecture, rows: usize) -> Self {
        let max = *arch.widths().iter().max().unwrap();
        Workspace {
            acts: arch.widths().iter().map(|w| vec![0.0; rows * w]).collect(),
            delta: vec![0.0; rows * max],
            delta_prev: vec![0.0; rows * max],
        }
    }

    fn ensure_rows(&mut self, arch: &MlpArchitecture, rows: usize) {
        if self.acts[0].len() < rows * arch.input_width() {
            *self = Workspace::new(arch, rows);
        }
    }
}

fn dense_forward(input: &[f64], w: &[f64], b: &[f64], out: &mut [f64], n_in: usize, n_out: usize, rows: usize) {
    for r in 0..rows {
        let x = &input[r * n_in..(r + 1) * n_in];
        let y = &mut out[r * n_out..(r + 1) * n_out];
        y.copy_from_slice(b);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wr = &w[i * n_out..(i + 1) * n_out];
            for (yj, &wij) in y.iter_mut().zip(wr) {
                *yj += xi * wij;
            }
        }
    }
}

fn apply_hidden(act: Activation, v: &mut [f64]) {
    match act {
        Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn apply_head(head: OutputHead, v: &mut [f64], width: usize) {
    match head {
        OutputHead::Linear => {}
        OutputHead::Sigmoid => v.iter_mut().for_each(|x| *x = sigmoid(*x)),
        OutputHead::Softmax => {
            for row in v.chunks_mut(width) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                row.iter_mut().for_each(|x| *x /= sum);
            }
        }
    }
}

fn forward_into(params: &[f64], arch: &MlpArchitecture, ws: &mut Workspace, rows: usize) {
    let widths = arch.widths();
    let last = arch.layer_count() - 1;
    for l in 0..arch.layer_count() {
        let (wr, br) = arch.layer_ranges(l);
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let (before, after) = ws.acts.split_at_mut(l + 1);
        let input = &before[l][..rows * n_in];
        let out = &mut after[0][..rows * n_out];
        dense_forward(input, &params[wr], &params[br], out, n_in, n_out, rows);
        if l < last {
            apply_hidden(arch.hidden_activation(), out);
        } else {
            apply_head(arch.head(), out, n_out);
        }
    }
}

fn gather_rows(batch: &Batch, rows: &[usize], dst: &mut [f64]) {
    let w = batch.feature_width;
    for (k, &r) in rows.iter().enumerate() {
        dst[k * w..(k + 1) * w].copy_from_slice(batch.feature_row(r));
    }
}

/// Model outputs (post-head) for a row-major feature matrix.
pub fn forward(params: &ParameterVector, arch: &MlpArchitecture, features: &[f64]) -> Result<Vec<f64>> {
    params.check_len(arch)?;
    let w = arch.input_width();
    if !features.len().is_multiple_of(w) {
        return Err(Error::invalid(format!(
            "feature matrix length {} is not a multiple of input width {w}",
            features.len()
        )));
    }
    let rows = features.len() / w;
    let mut ws = Workspace::new(arch, rows);
    ws.acts[0].copy_from_slice(features);
    forward_into(params.as_slice(), arch, &mut ws, rows);
    let out = ws.acts.pop().unwrap();
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence("non-finite model output".into()));
    }
    Ok(out)
}

/// Mean loss of post-head `outputs` against `targets`.
///
/// Linear: mean squared error over all entries. Sigmoid: mean binary
/// cross-entropy. Softmax: mean over rows of categorical cross-entropy.
/// Probabilities are clamped to at least [`PROB_EPS`] inside logarithms.
pub fn loss(outputs: &[f64], targets: &[f64], head: OutputHead, width: usize) -> f64 {
    weighted_loss(outputs, targets, head, width, 1.0)
}

pub fn weighted_loss(outputs: &[f64], targets: &[f64], head: OutputHead, width: usize, positive_weight: f64) -> f64 {
    assert_eq!(outputs.len(), targets.len(), "output/target shape mismatch");
    let rows = outputs.len() / width;
    let ln = |p: f64| p.max(PROB_EPS).ln();
    match head {
        OutputHead::Linear => {
            let sse: f64 = outputs.iter().zip(targets).map(|(y, t)| (y - t) * (y - t)).sum();
            sse / outputs.len() as f64
        }
        OutputHead::Sigmoid => {
            let total: f64 = outputs
                .iter()
                .zip(targets)
                .map(|(&p, &t)| -(positive_weight * t * ln(p) + (1.0 - t) * ln(1.0 - p)))
                .sum();
            total / outputs.len() as f64
        }
        OutputHead::Softmax => {
            let total: f64 = outputs
                .iter()
                .zip(targets)
                .map(|(&p, &t)| if t == 0.0 { 0.0 } else { -t * ln(p) })
                .sum();
            total / rows as f64
        }
    }
}

/// Gradient of the mean loss with respect to the head's pre-activations.
fn output_delta(
    outputs: &[f64],
    targets: &[f64],
    head: OutputHead,
    width: usize,
    positive_weight: f64,
    delta: &mut [f64],
) {
    let n = outputs.len();
    let rows = n / width;
    match head {
        OutputHead::Linear => {
            let scale = 2.0 / n as f64;
            for ((d, y), t) in delta.iter_mut().zip(outputs).zip(targets) {
                *d = scale * (y - t);
            }
        }
        OutputHead::Sigmoid => {
            // d/dz of -(w t ln p + (1-t) ln(1-p)), with the clamp's zero
            // derivative where a probability is clamped.
            let scale = 1.0 / n as f64;
            for ((d, &p), &t) in delta.iter_mut().zip(outputs).zip(targets) {
                let pos = if p > PROB_EPS {
                    -positive_weight * t * (1.0 - p)
                } else {
                    0.0
                };
                let neg = if 1.0 - p > PROB_EPS { (1.0 - t) * p } else { 0.0 };
                *d = scale * (pos + neg);
            }
        }
        OutputHead::Softmax => {
            let scale = 1.0 / rows as f64;
            for ((d, p), t) in delta
                .chunks_mut(width)
                .zip(outputs.chunks(width))
                .zip(targets.chunks(width))
            {
                let live: f64 = p
                    .iter()
                    .zip(t)
                    .filter(|(&pj, _)| pj > PROB_EPS)
                    .map(|(_, &tj)| tj)
                    .sum();
                for k in 0..width {
                    let own = if p[k] > PROB_EPS { t[k] } else { 0.0 };
                    d[k] = scale * (p[k] * live - own);
                }
            }
        }
    }
}

/// Forward + backward over `rows` of `batch`, accumulating into `grad`
/// (which is overwritten). Returns the mean loss over those rows.
fn backprop_rows(
    params: &[f64],
    arch: &MlpArchitecture,
    batch: &Batch,
    rows: &[usize],
    positive_weight: f64,
    ws: &mut Workspace,
    grad: &mut [f64],
) -> f64 {
    let n = rows.len();
    ws.ensure_rows(arch, n);
    gather_rows(batch, rows, &mut ws.acts[0]);
    forward_into(params, arch, ws, n);

    let widths = arch.widths();
    let l_count = arch.layer_count();
    let out_w = arch.output_width();
    let mut targets = Vec::with_capacity(n * out_w);
    for &r in rows {
        targets.extend_from_slice(batch.target_row(r));
    }
    let outputs = &ws.acts[l_count][..n * out_w];
    let loss_value = weighted_loss(outputs, &targets, arch.head(), out_w, positive_weight);
    output_delta(
        outputs,
        &targets,
        arch.head(),
        out_w,
        positive_weight,
        &mut ws.delta[..n * out_w],
    );

    grad.fill(0.0);
    for l in (0..l_count).rev() {
        let (wr, br) = arch.layer_ranges(l);
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let input = &ws.acts[l][..n * n_in];
        let delta = &ws.delta[..n * n_out];
        {
            let (gw, gb) = grad[wr.start..br.end].split_at_mut(n_in * n_out);
            for r in 0..n {
                let x = &input[r * n_in..(r + 1) * n_in];
                let d = &delta[r * n_out..(r + 1) * n_out];
                for (gbj, &dj) in gb.iter_mut().zip(d) {
                    *gbj += dj;
                }
                for (i, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (g, &dj) in gw[i * n_out..(i + 1) * n_out].iter_mut().zip(d) {
                        *g += xi * dj;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &params[wr];
        let prev = &mut ws.delta_prev[..n * n_in];
        for r in 0..n {
            let d = &delta[r * n_out..(r + 1) * n_out];
            let a = &input[r * n_in..(r + 1) * n_in];
            let p = &mut prev[r * n_in..(r + 1) * n_in];
            for i in 0..n_in {
                let deriv = match arch.hidden_activation() {
                    Activation::Relu => {
                        if a[i] > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Activation::Tanh => 1.0 - a[i] * a[i],
                };
                if deriv == 0.0 {
                    p[i] = 0.0;
                    continue;
                }
                let wr = &w[i * n_out..(i + 1) * n_out];
                let s: f64 = wr.iter().zip(d).map(|(wij, dj)| wij * dj).sum();
                p[i] = s * deriv;
            }
        }
        std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
    }
    loss_value
}

fn check_batch(arch: &MlpArchitecture, batch: &Batch) -> Result<()> {
    if batch.feature_width != arch.input_width() || batch.target_width != arch.output_width() {
        return Err(Error::invalid(format!(
            "batch shape {}→{} does not fit architecture {arch}",
            batch.feature_width, batch.target_width
        )));
    }
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    Ok(())
}

/// Exact gradient of the mean loss over the whole batch.
pub fn gradient(params: &ParameterVector, arch: &MlpArchitecture, batch: &Batch) -> Result<ParameterVector> {
    weighted_gradient(params, arch, batch, 1.0)
}

pub fn weighted_gradient(
    params: &ParameterVector,
    arch: &MlpArchitecture,
    batch: &Batch,
    positive_weight: f64,
) -> Result<ParameterVector> {
    params.check_len(arch)?;
    check_batch(arch, batch)?;
    let rows: Vec<usize> = (0..batch.rows()).collect();
    let mut ws = Workspace::new(arch, rows.len());
    let mut grad = vec![0.0; arch.param_count()];
    backprop_rows(
        params.as_slice(),
        arch,
        batch,
        &rows,
        positive_weight,
        &mut ws,
        &mut grad,
    );
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    Ok(ParameterVector(grad))
}

/// Mean loss of the model over the whole batch.
pub fn batch_loss(
    params: &ParameterVector,
    arch: &MlpArchitecture,
    batch: &Batch,
    positive_weight: f64,
) -> Result<f64> {
    check_batch(arch, batch)?;
    let out = forward(params, arch, &batch.features)?;
    Ok(weighted_loss(
        &out,
        &batch.targets,
        arch.head(),
        arch.output_width(),
        positive_weight,
    ))
}

/// `hp.local_epochs` epochs of mini-batch SGD, numbered from 0.
pub fn train_local(
    params: &ParameterVector,
    arch: &MlpArchitecture,
    data: &Batch,
    hp: &TrainingHyperparams,
) -> Result<ParameterVector> {
    train_epochs(params, arch, data, hp, 0..hp.local_epochs as u64, None)
}

/// Mini-batch SGD over the given absolute epoch indices.
///
/// Epoch `e` visits the rows in the order of a permutation drawn from
/// `(hp.seed, e)`, in consecutive chunks of `hp.batch_size` (the last chunk
/// may be short). Within a chunk rows are summed in ascending row order, so
/// a single full-size chunk reproduces [`gradient`] exactly. Running epochs
/// `0..a` and then `a..b` equals running `0..b` in one call. Frozen entries
/// are never updated.
pub fn train_epochs(
    params: &ParameterVector,
    arch: &MlpArchitecture,
    data: &Batch,
    hp: &TrainingHyperparams,
    epochs: Range<u64>,
    frozen: Option<&FrozenMask>,
) -> Result<ParameterVector> {
    hp.validate()?;
    params.check_len(arch)?;
    check_batch(arch, data)?;
    let mut theta = params.clone();
    if hp.learning_rate == 0.0 {
        return Ok(theta);
    }
    let n = data.rows();
    let mut ws = Workspace::new(arch, hp.batch_size.min(n));
    let mut grad = vec![0.0; arch.param_count()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut chunk: Vec<usize> = Vec::with_capacity(hp.batch_size);
    for epoch in epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(hp.seed, &[stream::SHUFFLE, epoch]));
        for rows in order.chunks(hp.batch_size) {
            chunk.clear();
            chunk.extend_from_slice(rows);
            chunk.sort_unstable();
            let l = backprop_rows(
                theta.as_slice(),
                arch,
                data,
                &chunk,
                hp.positive_class_weight,
                &mut ws,
                &mut grad,
            );
            if !l.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss in epoch {epoch}")));
            }
            if let Some(mask) = frozen {
                mask.zero(&mut grad);
            }
            for (t, g) in theta.0.iter_mut().zip(&grad) {
                *t -= hp.learning_rate * g;
            }
        }
        if !theta.is_finite() {
            return Err(Error::Divergence(format!("non-finite parameters after epoch {epoch}")));
        }
    }
    Ok(theta)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const CHECKPOINT_MAGIC: &str = "fedloc-params";
const CHECKPOINT_VERSION: u32 = 1;

/// Text checkpoint:
///
/// ```text
/// fedloc-params v1
/// arch 520-128-64-2/relu/linear
/// len 75074
/// <one value per line, shortest round-trip decimal>
/// ```
pub fn write_params(path: &std::path::Path, params: &ParameterVector, arch: &MlpArchitecture) -> Result<()> {
    params.check_len(arch)?;
    let mut s = String::with_capacity(params.len() * 22 + 64);
    s.push_str(&format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\n"));
    s.push_str(&format!("arch {}\n", arch.fingerprint()));
    s.push_str(&format!("len {}\n", params.len()));
    for v in params.as_slice() {
        s.push_str(&format!("{v:?}\n"));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_params(path: &std::path::Path) -> Result<(ParameterVector, MlpArchitecture)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}") {
        return Err(bad(format!("unsupported header {magic:?}")));
    }
    let arch = lines
        .next()
        .and_then(|l| l.strip_prefix("arch "))
        .ok_or_else(|| bad("missing arch line".into()))?;
    let arch = MlpArchitecture::from_fingerprint(arch)?;
    let len: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("len "))
        .and_then(|l| l.parse().ok())
        .ok_or_else(|| bad("missing len line".into()))?;
    let values = lines
        .map(|l| l.parse::<f64>().map_err(|_| bad(format!("bad value {l:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != len {
        return Err(bad(format!("declared {len} values, found {}", values.len())));
    }
    let params = ParameterVector(values);
    params.check_len(&arch)?;
    Ok((params, arch))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(widths: &[usize], head: OutputHead) -> MlpArchitecture {
        MlpArchitecture::new(widths.to_vec(), Activation::Relu, head).unwrap()
    }

    #[test]
    fn architecture_validation() {
        assert!(MlpArchitecture::new(vec![520, 2], Activation::Relu, OutputHead::Linear).is_err());
        assert!(MlpArchitecture::new(vec![520, 4, 1], Activation::Relu, OutputHead::Softmax).is_err());
        assert!(MlpArchitecture::new(vec![520, 0, 2], Activation::Relu, OutputHead::Linear).is_err());
        let a = arch(&[520, 128, 64, 2], OutputHead::Linear);
        assert_eq!(a.param_count(), 520 * 128 + 128 + 128 * 64 + 64 + 64 * 2 + 2);
        assert_eq!(MlpArchitecture::from_fingerprint(&a.fingerprint()).unwrap(), a);
    }

    #[test]
    fn layout_first_bias_index() {
        let a = arch(&[520, 7, 3], OutputHead::Linear);
        let (w, b) = a.layer_ranges(0);
        assert_eq!(w, 0..520 * 7);
        assert_eq!(b.start, 520 * 7);
        let (w1, b1) = a.layer_ranges(1);
        assert_eq!(w1.start, 520 * 7 + 7);
        assert_eq!(b1.end, a.param_count());
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = arch(&[520, 8, 2], OutputHead::Linear);
        let p = init_params(&a, 3);
        assert!(p.bit_eq(&init_params(&a, 3)));
        assert_ne!(p, init_params(&a, 4));
        for l in 0..a.layer_count() {
            assert!(p.as_slice()[a.layer_ranges(l).1].iter().all(|&b| b == 0.0));
        }
        let bound = 1.0 / (520f64).sqrt();
        assert!(p.as_slice()[a.layer_ranges(0).0].iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn flatten_round_trip_and_length_errors() {
        let a = arch(&[520, 5, 3], OutputHead::Linear);
        let p = init_params(&a, 1);
        let layers = unflatten(&p, &a).unwrap();
        assert_eq!(layers[0].weights.len(), 520 * 5);
        assert!(flatten(&layers).bit_eq(&p));
        assert!(matches!(
            unflatten(&ParameterVector::zeros(10), &a),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn forward_heads() {
        let lin = arch(&[520, 4, 2], OutputHead::Linear);
        let x = vec![0.5; 520];
        let out = forward(&ParameterVector::zeros(lin.param_count()), &lin, &x).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);

        let sig = arch(&[520, 4, 3], OutputHead::Sigmoid);
        let out = forward(&ParameterVector::zeros(sig.param_count()), &sig, &x).unwrap();
        assert_eq!(out, vec![0.5; 3]);

        let soft = arch(&[520, 4, 4], OutputHead::Softmax);
        let out = forward(&ParameterVector::zeros(soft.param_count()), &soft, &x).unwrap();
        assert_eq!(out, vec![0.25; 4]);

        let p = init_params(&soft, 9);
        let out = forward(&p, &soft, &vec![0.3; 520 * 5]).unwrap();
        for row in out.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_losses() {
        assert_eq!(loss(&[0.3, 0.7], &[0.3, 0.7], OutputHead::Linear, 2), 0.0);
        assert!((loss(&[0.5], &[1.0], OutputHead::Sigmoid, 1) - 2f64.ln()).abs() < 1e-15);
        let l = loss(&[0.25; 4], &[0.0, 0.0, 1.0, 0.0], OutputHead::Softmax, 4);
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!(loss(&[0.0], &[1.0], OutputHead::Sigmoid, 1).is_finite());
    }

    #[test]
    fn gradient_zero_at_exact_fit() {
        let a = arch(&[520, 4, 2], OutputHead::Linear);
        let p = init_params(&a, 5);
        let x = vec![0.2; 520 * 3];
        let out = forward(&p, &a, &x).unwrap();
        let batch = Batch::new(x, out, 520, 2).unwrap();
        let g = gradient(&p, &a, &batch).unwrap();
        let (w, b) = a.layer_ranges(1);
        assert!(g.as_slice()[w.start..b.end].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_mean_invariant_under_duplication() {
        let a = arch(&[520, 4, 2], OutputHead::Linear);
        let p = init_params(&a, 5);
        let x: Vec<f64> = (0..520 * 2).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let t = vec![0.1, 0.9, 0.4, 0.2];
        let once = Batch::new(x.clone(), t.clone(), 520, 2).unwrap();
        let twice = Batch::concat(&[&once, &once]).unwrap();
        let g1 = gradient(&p, &a, &once).unwrap();
        let g2 = gradient(&p, &a, &twice).unwrap();
        for (u, v) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((u - v).abs() <= 1e-15 * u.abs().max(1.0));
        }
    }

    fn toy_batch(rows: usize, out: usize) -> Batch {
        let x: Vec<f64> = (0..rows * 520)
            .map(|i| if i % 13 == 0 { (i % 7) as f64 / 7.0 } else { 0.0 })
            .collect();
        let t: Vec<f64> = (0..rows * out).map(|i| (i % 3) as f64 / 3.0).collect();
        Batch::new(x, t, 520, out).unwrap()
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let a = arch(&[520, 6, 2], OutputHead::Linear);
        let p = init_params(&a, 2);
        let hp = TrainingHyperparams {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(train_local(&p, &a, &toy_batch(10, 2), &hp).unwrap().bit_eq(&p));
    }

    #[test]
    fn full_batch_step_is_one_gradient_step() {
        let a = arch(&[520, 6, 2], OutputHead::Linear);
        let p = init_params(&a, 2);
        let data = toy_batch(10, 2);
        let hp = TrainingHyperparams {
            learning_rate: 0.1,
            batch_size: 10,
            local_epochs: 1,
            seed: 77,
            positive_class_weight: 1.0,
        };
        let stepped = train_local(&p, &a, &data, &hp).unwrap();
        let g = gradient(&p, &a, &data).unwrap();
        let expected: Vec<f64> = p
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .map(|(t, g)| t - 0.1 * g)
            .collect();
        assert!(stepped.bit_eq(&ParameterVector::new(expected)));
    }

    #[test]
    fn training_is_deterministic_and_splits_epochs() {
        let a = arch(&[520, 6, 2], OutputHead::Linear);
        let p = init_params(&a, 2);
        let data = toy_batch(25, 2);
        let hp = TrainingHyperparams {
            batch_size: 4,
            local_epochs: 3,
            seed: 5,
            ..Default::default()
        };
        let once = train_local(&p, &a, &data, &hp).unwrap();
        assert!(once.bit_eq(&train_local(&p, &a, &data, &hp).unwrap()));
        let first = train_epochs(&p, &a, &data, &hp, 0..1, None).unwrap();
        let rest = train_epochs(&first, &a, &data, &hp, 1..3, None).unwrap();
        assert!(once.bit_eq(&rest));
    }

    #[test]
    fn frozen_layers_do_not_move() {
        let a = arch(&[520, 6, 2], OutputHead::Linear);
        let p = init_params(&a, 2);
        let mask = FrozenMask::leading_layers(&a, 1).unwrap();
        let hp = TrainingHyperparams {
            local_epochs: 3,
            ..Default::default()
        };
        let q = train_epochs(&p, &a, &toy_batch(20, 2), &hp, 0..3, Some(&mask)).unwrap();
        let end = a.layer_ranges(0).1.end;
        assert_eq!(&q.as_slice()[..end], &p.as_slice()[..end]);
        assert_ne!(&q.as_slice()[end..], &p.as_slice()[end..]);
        assert!(FrozenMask::leading_layers(&a, 2).is_err());
        assert!(FrozenMask::leading_layers(&a, 0).unwrap().is_empty());
    }

    #[test]
    fn divergence_is_reported() {
        let a = arch(&[520, 6, 2], OutputHead::Linear);
        let p = init_params(&a, 2);
        let hp = TrainingHyperparams {
            learning_rate: 1e200,
            local_epochs: 5,
            ..Default::default()
        };
        let err = train_local(&p, &a, &toy_batch(20, 2), &hp).unwrap_err();
        assert!(err.is_divergence());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.9, 0.1, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5, 0.1, 0.1]), 0);
        assert_eq!(argmax(&[0.3; 4]), 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = arch(&[520, 3, 2], OutputHead::Linear);
        let p = init_params(&a, 8);
        let path = dir.path().join("p.params");
        write_params(&path, &p, &a).unwrap();
        let (q, b) = read_params(&path).unwrap();
        assert_eq!(a, b);
        assert!(p.bit_eq(&q));
        std::fs::write(&path, "fedloc-params v9\n").unwrap();
        assert!(read_params(&path).is_err());
    }
}
