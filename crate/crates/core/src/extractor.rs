//! The embedding network: a tanh MLP with hand-written backpropagation, the
//! linear output head used for base-session cross-entropy, magnitude-based
//! freeze masks and a masked SGD step.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::Rng;

/// One fully connected layer, `out = W·in + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs);
        for w in layer.weights.as_mut_slice() {
            *w = rng.uniform(-limit, limit);
        }
        layer
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    /// Weights (row-major) followed by the bias.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.as_slice().iter().chain(&self.bias).copied()
    }
}

/// Multilayer perceptron `f_θ`: tanh on every hidden layer, identity on the
/// last (embedding) layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    // Bumped on every parameter mutation; forward caches remember it.
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Intermediate activations of one forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    // activations[0] is the input, activations[l + 1] the output of layer l.
    activations: Vec<Vec<f64>>,
    version: u64,
}

impl ForwardCache {
    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache has at least the input")
    }
}

/// Gradient buffers shaped like the MLP's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.add_scaled(&b.weights, s);
            linalg::add_assign_scaled(&mut a.bias, &b.bias, s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

impl Mlp {
    /// Wraps explicit layers, checking that their shapes chain.
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(contract("an MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(contract(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(contract(format!("layer {i}: bias length mismatch")));
            }
        }
        Ok(Self { layers, version: 0 })
    }

    /// Glorot-initialised network with the given layer widths,
    /// `dims = [input, hidden.., embedding]`.
    pub fn init(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(config(format!("invalid layer widths {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version += 1;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(contract(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            a = apply_layer(layer, &a, l < last);
        }
        Ok(a)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let next = apply_layer(layer, &activations[l], l < last);
            activations.push(next);
        }
        let out = activations[self.layers.len()].clone();
        Ok((
            out,
            ForwardCache {
                activations,
                version: self.version,
            },
        ))
    }

    /// Reverse-mode gradient of a scalar loss given `∂loss/∂embedding`.
    pub fn backward(&self, cache: &ForwardCache, grad_embedding: &[f64]) -> Result<MlpGrads> {
        if cache.version != self.version || cache.activations.len() != self.layers.len() + 1 {
            return Err(contract("stale forward cache: parameters changed since forward"));
        }
        if grad_embedding.len() != self.embedding_dim() {
            return Err(contract("embedding gradient has the wrong length"));
        }
        let last = self.layers.len() - 1;
        let mut grads = MlpGrads::zeros_like(self);
        let mut upstream = grad_embedding.to_vec();
        for l in (0..self.layers.len()).rev() {
            let out = &cache.activations[l + 1];
            let input = &cache.activations[l];
            let delta: Vec<f64> = if l < last {
                upstream
                    .iter()
                    .zip(out)
                    .map(|(g, a)| g * (1.0 - a * a))
                    .collect()
            } else {
                upstream
            };
            let g = &mut grads.layers[l];
            g.weights = Matrix::outer(&delta, input);
            g.bias.copy_from_slice(&delta);
            upstream = if l > 0 {
                self.layers[l].weights.matvec_t_unchecked(&delta)
            } else {
                Vec::new()
            };
        }
        Ok(grads)
    }
}

fn apply_layer(layer: &Dense, input: &[f64], hidden: bool) -> Vec<f64> {
    let mut z = layer.weights.matvec_unchecked(input);
    for (zi, bi) in z.iter_mut().zip(&layer.bias) {
        *zi += bi;
        if hidden {
            *zi = zi.tanh();
        }
    }
    z
}

/// Linear output head `W` (d × M) used for base-session cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputHead {
    pub weights: Matrix,
}

impl OutputHead {
    pub fn init(embedding_dim: usize, classes: usize, rng: &mut Rng) -> Self {
        Self {
            weights: Dense::glorot(embedding_dim, classes, rng).weights,
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    /// `W·z`, one score per class.
    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.weights.matvec(z)
    }

    pub(crate) fn backward(&self, z: &[f64], grad_logits: &[f64]) -> (Matrix, Vec<f64>) {
        (
            Matrix::outer(grad_logits, z),
            self.weights.matvec_t_unchecked(grad_logits),
        )
    }
}

/// `W·z` for the given head; see [`OutputHead::logits`].
pub fn head_logits(head: &OutputHead, z: &[f64]) -> Result<Vec<f64>> {
    head.logits(z)
}

/// Softmax cross-entropy of `logits` against `label`, with its gradient with
/// respect to the logits (`softmax − one_hot`).
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(contract(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let log_p = linalg::log_softmax(logits)?;
    let mut grad: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    grad[label] -= 1.0;
    Ok((-log_p[label], grad))
}

/// Per-parameter trainable flags, one flat vector per layer (weights
/// row-major, then bias). `true` means the parameter may be updated.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeMask {
    pub layers: Vec<Vec<bool>>,
    pub trainable_fraction: f64,
}

impl FreezeMask {
    pub fn all_trainable(mlp: &Mlp) -> Self {
        Self {
            layers: mlp.layers.iter().map(|l| vec![true; l.param_count()]).collect(),
            trainable_fraction: 1.0,
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.layers.iter().flatten().filter(|&&t| t).count()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    fn matches(&self, mlp: &Mlp) -> bool {
        self.layers.len() == mlp.layers.len()
            && self
                .layers
                .iter()
                .zip(&mlp.layers)
                .all(|(m, l)| m.len() == l.param_count())
    }
}

/// Freezes the high-magnitude parameters of every layer. Per layer,
/// `round(fraction · n)` parameters with the smallest `|w|` stay trainable;
/// ties go to the lower flat index.
pub fn select_freeze_mask(mlp: &Mlp, trainable_fraction: f64) -> Result<FreezeMask> {
    if !(trainable_fraction > 0.0 && trainable_fraction <= 1.0) {
        return Err(config(format!(
            "trainable fraction {trainable_fraction} outside (0, 1]"
        )));
    }
    let mut layers = Vec::with_capacity(mlp.layers.len());
    for (i, layer) in mlp.layers.iter().enumerate() {
        let values: Vec<f64> = layer.params().collect();
        if values.is_empty() {
            return Err(contract(format!("layer {i} has no parameters")));
        }
        let keep = ((trainable_fraction * values.len() as f64).round() as usize).min(values.len());
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
        let mut mask = vec![false; values.len()];
        for &idx in &order[..keep] {
            mask[idx] = true;
        }
        layers.push(mask);
    }
    Ok(FreezeMask {
        layers,
        trainable_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Milestone {
    pub epoch: usize,
    pub multiplier: f64,
}

/// Plain SGD with a step schedule and L2 weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub initial_lr: f64,
    #[serde(default)]
    pub milestones: Vec<Milestone>,
    #[serde(default)]
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial_lr: lr,
            milestones: Vec::new(),
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(config("initial_lr must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config("weight_decay must be nonnegative"));
        }
        for w in self.milestones.windows(2) {
            if w[1].epoch <= w[0].epoch {
                return Err(config("milestone epochs must be strictly increasing"));
            }
        }
        if self
            .milestones
            .iter()
            .any(|m| !(m.multiplier > 0.0 && m.multiplier <= 1.0))
        {
            return Err(config("milestone multipliers must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Initial rate times the multiplier of every milestone already reached.
    pub fn lr(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|m| epoch >= m.epoch)
            .fold(self.initial_lr, |lr, m| lr * m.multiplier)
    }
}

fn update(params: &mut [f64], grads: &[f64], mask: Option<&[bool]>, lr: f64, decay: f64) {
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        *p -= lr * (g + decay * *p);
    }
}

/// One masked SGD step. Frozen parameters are not touched at all.
pub fn sgd_step(
    mlp: &mut Mlp,
    grads: &MlpGrads,
    mask: &FreezeMask,
    epoch: usize,
    cfg: &SgdConfig,
) -> Result<()> {
    if grads.layers.len() != mlp.layers.len() || !mask.matches(mlp) {
        return Err(contract("sgd_step: gradient or mask shape mismatch"));
    }
    let lr = cfg.lr(epoch);
    let decay = cfg.weight_decay;
    for ((layer, g), m) in mlp.layers_mut().iter_mut().zip(&grads.layers).zip(&mask.layers) {
        if g.weights.shape() != layer.weights.shape() {
            return Err(contract("sgd_step: layer gradient shape mismatch"));
        }
        let nw = layer.weights.as_slice().len();
        update(
            layer.weights.as_mut_slice(),
            g.weights.as_slice(),
            Some(&m[..nw]),
            lr,
            decay,
        );
        update(&mut layer.bias, &g.bias, Some(&m[nw..]), lr, decay);
    }
    Ok(())
}

pub(crate) fn sgd_step_head(head: &mut OutputHead, grad: &Matrix, lr: f64, decay: f64) {
    update(head.weights.as_mut_slice(), grad.as_slice(), None, lr, decay);
}

const NET_MAGIC: &[u8; 6] = b"PQNET1";

pub(crate) fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| contract("value does not fit in u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// Writes the binary network checkpoint: magic `PQNET1`, u32 layer count,
/// per layer u32 rows/cols then row-major weights and the bias, then the head
/// the same way (no bias), then the freeze mask as LSB-first packed bits.
pub fn write_checkpoint(
    w: &mut impl Write,
    mlp: &Mlp,
    head: &OutputHead,
    mask: &FreezeMask,
) -> Result<()> {
    if !mask.matches(mlp) {
        return Err(contract("checkpoint: mask does not match network"));
    }
    w.write_all(NET_MAGIC)?;
    write_u32(w, mlp.layers.len())?;
    for layer in &mlp.layers {
        write_u32(w, layer.outputs())?;
        write_u32(w, layer.inputs())?;
        write_f64s(w, layer.weights.as_slice())?;
        write_f64s(w, &layer.bias)?;
    }
    write_u32(w, head.weights.rows())?;
    write_u32(w, head.weights.cols())?;
    write_f64s(w, head.weights.as_slice())?;
    let bits: Vec<bool> = mask.layers.iter().flatten().copied().collect();
    let packed: Vec<u8> = bits
        .chunks(8)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << i))
        })
        .collect();
    w.write_all(&packed)?;
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(Mlp, OutputHead, FreezeMask)> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != NET_MAGIC {
        return Err(Error::Data("not a PQNET1 checkpoint".into()));
    }
    let n_layers = read_u32(r)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = read_u32(r)?;
        let cols = read_u32(r)?;
        let weights = Matrix::from_vec(rows, cols, read_f64s(r, rows * cols)?)?;
        let bias = read_f64s(r, rows)?;
        layers.push(Dense { weights, bias });
    }
    let mlp = Mlp::new(layers).map_err(|e| Error::Data(e.to_string()))?;
    let rows = read_u32(r)?;
    let cols = read_u32(r)?;
    if cols != mlp.embedding_dim() {
        return Err(Error::Data("head width does not match embedding".into()));
    }
    let head = OutputHead {
        weights: Matrix::from_vec(rows, cols, read_f64s(r, rows * cols)?)?,
    };
    let total = mlp.param_count();
    let mut packed = vec![0u8; total.div_ceil(8)];
    r.read_exact(&mut packed)?;
    let mut bits = (0..total).map(|i| packed[i / 8] >> (i % 8) & 1 == 1);
    let layers: Vec<Vec<bool>> = mlp
        .layers
        .iter()
        .map(|l| bits.by_ref().take(l.param_count()).collect())
        .collect();
    let trainable = layers.iter().flatten().filter(|&&b| b).count();
    let mask = FreezeMask {
        layers,
        trainable_fraction: trainable as f64 / total as f64,
    };
    Ok((mlp, head, mask))
}
