//! Minimal dense feed-forward network: forward pass, backprop, SGD and
//! Top-K constrained SGD over a flat parameter vector.
//!
//! Parameters are laid out layer by layer; within a layer the weight matrix
//! comes first (row-major, `output_width x input_width`) followed by the bias
//! vector.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compression::IndexSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_width: usize,
    pub output_width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    fn param_count(&self) -> usize {
        self.input_width * self.output_width + self.output_width
    }
}

/// Network architecture. Construct through [`ArchSpec::new`] or
/// [`ArchSpec::mlp`] so the chaining and loss pairing rules are checked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawArch", into = "RawArch")]
pub struct ArchSpec {
    layers: Vec<LayerSpec>,
    loss: Loss,
}

#[derive(Serialize, Deserialize)]
struct RawArch {
    layers: Vec<LayerSpec>,
    loss: Loss,
}

impl TryFrom<RawArch> for ArchSpec {
    type Error = Error;
    fn try_from(raw: RawArch) -> Result<Self> {
        ArchSpec::new(raw.layers, raw.loss)
    }
}

impl From<ArchSpec> for RawArch {
    fn from(a: ArchSpec) -> Self {
        RawArch {
            layers: a.layers,
            loss: a.loss,
        }
    }
}

impl ArchSpec {
    pub fn new(layers: Vec<LayerSpec>, loss: Loss) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("architecture needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.input_width == 0 || l.output_width == 0 {
                return Err(Error::config(format!("layer {i} has zero width")));
            }
            if i + 1 < layers.len() {
                if layers[i + 1].input_width != l.output_width {
                    return Err(Error::config(format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        l.output_width,
                        i + 1,
                        layers[i + 1].input_width
                    )));
                }
                if l.activation == Activation::Softmax {
                    return Err(Error::config("softmax is only allowed on the final layer"));
                }
            }
        }
        let last = layers.last().unwrap().activation;
        match (last, loss) {
            (Activation::Softmax, Loss::CrossEntropy) => {}
            (Activation::Sigmoid, Loss::BinaryCrossEntropy) => {}
            _ => {
                return Err(Error::config(format!(
                    "final activation {last:?} cannot be paired with {loss:?}"
                )))
            }
        }
        Ok(Self { layers, loss })
    }

    /// Dense network over `widths` (input, hidden..., output). The final
    /// activation follows from the loss.
    pub fn mlp(widths: &[usize], hidden: Activation, loss: Loss) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("an MLP needs an input and an output width"));
        }
        let last = match loss {
            Loss::CrossEntropy => Activation::Softmax,
            Loss::BinaryCrossEntropy => Activation::Sigmoid,
        };
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                input_width: w[0],
                output_width: w[1],
                activation: if i + 2 == widths.len() { last } else { hidden },
            })
            .collect();
        Self::new(layers, loss)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().output_width
    }

    /// Total number of weights and biases (`n`).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            off.push(acc);
            acc += l.param_count();
        }
        off
    }
}

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
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

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &WeightVector) -> Result<WeightVector> {
        check_len(other.len(), self.len())?;
        Ok(WeightVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for WeightVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Mini-batch of inputs and targets. Targets are either one-hot (or
/// soft) rows summing to one, or single-column binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Matrix,
    targets: Matrix,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::data("batch must contain at least one sample"));
        }
        if inputs.rows() != targets.rows() {
            return Err(Error::Dimension {
                expected: inputs.rows(),
                got: targets.rows(),
            });
        }
        if inputs.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite input feature"));
        }
        for r in 0..targets.rows() {
            let row = targets.row(r);
            let binary = row.iter().all(|&v| v == 0.0 || v == 1.0);
            let sum: f64 = row.iter().sum();
            let stochastic = row.iter().all(|&v| v >= 0.0) && (sum - 1.0).abs() < 1e-9;
            let ok = if targets.cols() == 1 { binary } else { stochastic };
            if !ok {
                return Err(Error::data(format!("invalid label row {r}: {row:?}")));
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// Sub-batch made of the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let pick = |m: &Matrix| {
            let mut data = Vec::with_capacity(rows.len() * m.cols());
            for &r in rows {
                data.extend_from_slice(m.row(r));
            }
            Matrix {
                rows: rows.len(),
                cols: m.cols(),
                data,
            }
        };
        Batch {
            inputs: pick(&self.inputs),
            targets: pick(&self.targets),
        }
    }
}

/// Anything SGD can draw mini-batches from.
pub trait TrainingSet {
    fn num_samples(&self) -> usize;
    fn batch(&self, rows: &[usize]) -> Batch;
}

impl TrainingSet for Batch {
    fn num_samples(&self) -> usize {
        self.len()
    }

    fn batch(&self, rows: &[usize]) -> Batch {
        self.select(rows)
    }
}

fn check_len(got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases, drawn from a ChaCha8 stream seeded
/// with `seed`.
pub fn init_model(arch: &ArchSpec, seed: u64) -> WeightVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(arch.param_count());
    for l in arch.layers() {
        let limit = (6.0 / (l.input_width + l.output_width) as f64).sqrt();
        for _ in 0..l.input_width * l.output_width {
            values.push(rng.random_range(-limit..=limit));
        }
        values.extend(std::iter::repeat_n(0.0, l.output_width));
    }
    WeightVector(values)
}

struct Trace {
    /// Activations per layer; `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
}

fn apply_activation(act: Activation, z: &mut [f64], width: usize) {
    match act {
        Activation::Identity => {}
        Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Sigmoid => z.iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::Softmax => {
            for row in z.chunks_mut(width) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_batch(arch: &ArchSpec, w: &WeightVector, b: &Batch) -> Result<()> {
    check_len(w.len(), arch.param_count())?;
    check_len(b.inputs().cols(), arch.input_width())?;
    check_len(b.targets().cols(), arch.output_width())?;
    Ok(())
}

/// Forward pass returning the per-layer activations and the output logits.
fn forward(arch: &ArchSpec, w: &[f64], x: &Matrix) -> (Trace, Vec<f64>) {
    let rows = x.rows();
    let mut acts = vec![x.as_slice().to_vec()];
    let mut logits = Vec::new();
    let offsets = arch.offsets();
    for (li, l) in arch.layers().iter().enumerate() {
        let (wi, wo) = (l.input_width, l.output_width);
        let weights = &w[offsets[li]..offsets[li] + wi * wo];
        let bias = &w[offsets[li] + wi * wo..offsets[li] + wi * wo + wo];
        let input = acts.last().unwrap();
        let mut z = vec![0.0; rows * wo];
        for r in 0..rows {
            let a = &input[r * wi..(r + 1) * wi];
            let zr = &mut z[r * wo..(r + 1) * wo];
            for (o, zo) in zr.iter_mut().enumerate() {
                let wrow = &weights[o * wi..(o + 1) * wi];
                *zo = bias[o] + a.iter().zip(wrow).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        if li + 1 == arch.layers().len() {
            logits = z.clone();
        }
        apply_activation(l.activation, &mut z, wo);
        acts.push(z);
    }
    (Trace { acts }, logits)
}

fn mean_loss(arch: &ArchSpec, logits: &[f64], targets: &Matrix) -> f64 {
    let width = targets.cols();
    let rows = targets.rows();
    let mut total = 0.0;
    for r in 0..rows {
        let z = &logits[r * width..(r + 1) * width];
        let y = targets.row(r);
        total += match arch.loss() {
            Loss::CrossEntropy => {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                y.iter().zip(z).map(|(yi, zi)| -yi * (zi - lse)).sum::<f64>()
            }
            Loss::BinaryCrossEntropy => y
                .iter()
                .zip(z)
                .map(|(yi, zi)| zi.max(0.0) - yi * zi + (-zi.abs()).exp().ln_1p())
                .sum::<f64>(),
        };
    }
    total / rows as f64
}

/// Mean loss over the batch and the network's output probabilities.
pub fn forward_loss(arch: &ArchSpec, w: &WeightVector, b: &Batch) -> Result<(f64, Matrix)> {
    check_batch(arch, w, b)?;
    let (trace, logits) = forward(arch, w.as_slice(), b.inputs());
    let loss = mean_loss(arch, &logits, b.targets());
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    let preds = Matrix {
        rows: b.len(),
        cols: arch.output_width(),
        data: trace.acts.last().unwrap().clone(),
    };
    Ok((loss, preds))
}

/// Output probabilities only, for evaluation.
pub fn predict(arch: &ArchSpec, w: &WeightVector, inputs: &Matrix) -> Result<Matrix> {
    check_len(w.len(), arch.param_count())?;
    check_len(inputs.cols(), arch.input_width())?;
    let (trace, _) = forward(arch, w.as_slice(), inputs);
    Ok(Matrix {
        rows: inputs.rows(),
        cols: arch.output_width(),
        data: trace.acts.last().unwrap().clone(),
    })
}

/// Gradient of the mean batch loss with respect to every parameter.
pub fn gradient(arch: &ArchSpec, w: &WeightVector, b: &Batch) -> Result<WeightVector> {
    check_batch(arch, w, b)?;
    let rows = b.len();
    let (trace, _) = forward(arch, w.as_slice(), b.inputs());
    let offsets = arch.offsets();
    let mut grad = vec![0.0; w.len()];

    // softmax+CE and sigmoid+BCE share dL/dz = (p - y) / rows
    let inv = 1.0 / rows as f64;
    let mut delta: Vec<f64> = trace
        .acts
        .last()
        .unwrap()
        .iter()
        .zip(b.targets().as_slice())
        .map(|(p, y)| (p - y) * inv)
        .collect();

    for li in (0..arch.layers().len()).rev() {
        let l = arch.layers()[li];
        let (wi, wo) = (l.input_width, l.output_width);
        let input = &trace.acts[li];
        let (gw, rest) = grad[offsets[li]..].split_at_mut(wi * wo);
        let gb = &mut rest[..wo];
        for r in 0..rows {
            let d = &delta[r * wo..(r + 1) * wo];
            let a = &input[r * wi..(r + 1) * wi];
            for o in 0..wo {
                let g = &mut gw[o * wi..(o + 1) * wi];
                for (gi, ai) in g.iter_mut().zip(a) {
                    *gi += d[o] * ai;
                }
                gb[o] += d[o];
            }
        }
        if li == 0 {
            break;
        }
        let weights = &w.as_slice()[offsets[li]..offsets[li] + wi * wo];
        let prev = arch.layers()[li - 1].activation;
        let mut next = vec![0.0; rows * wi];
        for r in 0..rows {
            let d = &delta[r * wo..(r + 1) * wo];
            let a = &input[r * wi..(r + 1) * wi];
            let nr = &mut next[r * wi..(r + 1) * wi];
            for o in 0..wo {
                let wrow = &weights[o * wi..(o + 1) * wi];
                for (n, wv) in nr.iter_mut().zip(wrow) {
                    *n += d[o] * wv;
                }
            }
            for (n, &av) in nr.iter_mut().zip(a) {
                *n *= match prev {
                    Activation::Identity => 1.0,
                    Activation::Relu => {
                        if av > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Activation::Sigmoid => av * (1.0 - av),
                    Activation::Softmax => unreachable!("softmax only on the final layer"),
                };
            }
        }
        delta = next;
    }
    Ok(WeightVector(grad))
}

/// Mini-batch index stream: each epoch is a fresh seeded permutation,
/// consumed in consecutive chunks. A tail shorter than the batch size is
/// dropped and the next epoch starts.
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(num_samples: usize, batch_size: usize, seed: u64) -> Self {
        let batch_size = batch_size.min(num_samples).max(1);
        Self {
            order: (0..num_samples).collect(),
            pos: num_samples,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.batch_size;
        &self.order[start..self.pos]
    }
}

fn check_train_args(data: &dyn TrainingSet, t_gd: usize, batch_size: usize) -> Result<()> {
    if data.num_samples() == 0 {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    if t_gd == 0 {
        return Err(Error::config("number of SGD iterations must be at least 1"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    Ok(())
}

/// Plain SGD: `t_gd` steps of `w -= lr * grad` on seeded mini-batches.
pub fn sgd(
    arch: &ArchSpec,
    data: &dyn TrainingSet,
    w: &WeightVector,
    t_gd: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<WeightVector> {
    check_train_args(data, t_gd, batch_size)?;
    check_len(w.len(), arch.param_count())?;
    let mut sampler = EpochSampler::new(data.num_samples(), batch_size, seed);
    let mut w = w.clone();
    for _ in 0..t_gd {
        let batch = data.batch(sampler.next_batch());
        let g = gradient(arch, &w, &batch)?;
        for (wi, gi) in w.0.iter_mut().zip(&g.0) {
            *wi -= lr * gi;
        }
    }
    Ok(w)
}

/// SGD restricted to the coordinates in `keep`; every other coordinate is
/// pinned to `w0` before the first step and stays there.
#[allow(clippy::too_many_arguments)]
pub fn topk_sgd(
    arch: &ArchSpec,
    data: &dyn TrainingSet,
    w: &WeightVector,
    w0: &WeightVector,
    t_gd: usize,
    keep: &IndexSet,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<WeightVector> {
    check_train_args(data, t_gd, batch_size)?;
    let n = arch.param_count();
    check_len(w.len(), n)?;
    check_len(w0.len(), n)?;
    if let Some(&bad) = keep.indices().iter().find(|&&i| i >= n) {
        return Err(Error::Index { index: bad, n });
    }
    if keep.dim() != n {
        return Err(Error::Dimension {
            expected: n,
            got: keep.dim(),
        });
    }

    let mut out = w0.clone();
    for &i in keep.indices() {
        out.0[i] = w.0[i];
    }
    let mut sampler = EpochSampler::new(data.num_samples(), batch_size, seed);
    for _ in 0..t_gd {
        let batch = data.batch(sampler.next_batch());
        let g = gradient(arch, &out, &batch)?;
        for &i in keep.indices() {
            out.0[i] -= lr * g.0[i];
        }
    }
    Ok(out)
}
