//! Layered feed-forward models.
//!
//! A model is an ordered list of [`LayerBlock`]s. Parameterized (dense)
//! blocks are the prunable layers and are addressed 1-based (`1..=L`); an
//! activation-only block is bundled with the dense block before it for
//! accounting purposes and is never prunable on its own.
//!
//! Models built for heterogeneous clients may carry a personalized output
//! head. The head is the last dense block, is excluded from the prunable
//! layer count, and is never addressed by a layer index.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn next_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Dense,
    ActivationOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    /// Marks the output block: the forward pass emits logits and the loss
    /// applies softmax + cross-entropy.
    SoftmaxOutput,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBlock {
    pub index: usize,
    pub kind: BlockKind,
    /// `fan_in x fan_out`; `0 x width` for activation-only blocks.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl LayerBlock {
    pub fn dense(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::Shape {
                block: 0,
                detail: format!(
                    "bias length {} does not match fan_out {}",
                    bias.len(),
                    weights.cols()
                ),
            });
        }
        Ok(LayerBlock {
            index: 0,
            kind: BlockKind::Dense,
            weights,
            bias,
            activation,
        })
    }

    /// Dense block with uniform fan-in scaled weights, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// and zero bias.
    pub fn dense_init<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        LayerBlock {
            index: 0,
            kind: BlockKind::Dense,
            weights: Matrix {
                rows: fan_in,
                cols: fan_out,
                data,
            },
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    pub fn activation_only(width: usize, activation: Activation) -> Self {
        LayerBlock {
            index: 0,
            kind: BlockKind::ActivationOnly,
            weights: Matrix::zeros(0, width),
            bias: Vec::new(),
            activation,
        }
    }

    pub fn is_dense(&self) -> bool {
        self.kind == BlockKind::Dense
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            BlockKind::Dense => self.weights.rows(),
            BlockKind::ActivationOnly => self.weights.cols(),
        }
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    pub fn param_count(&self) -> u64 {
        (self.weights.len() + self.bias.len()) as u64
    }

    /// Forward FLOPs per sample: two per multiply-accumulate, plus one per
    /// output for the bias and one per output for the activation.
    pub fn flops(&self) -> u64 {
        let out = self.fan_out() as u64;
        match self.kind {
            BlockKind::Dense => 2 * self.fan_in() as u64 * out + out + out,
            BlockKind::ActivationOnly => out,
        }
    }

    fn params_equal(&self, other: &LayerBlock) -> bool {
        self.kind == other.kind
            && self.activation == other.activation
            && self.weights == other.weights
            && self.bias == other.bias
    }
}

/// Per-block gradients, shape-identical to the model they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGradient {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub blocks: Vec<BlockGradient>,
}

impl GradientSet {
    pub fn zeros_like(model: &LayeredModel) -> Self {
        GradientSet {
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockGradient {
                    weights: Matrix::zeros(b.weights.rows(), b.weights.cols()),
                    bias: vec![0.0; b.bias.len()],
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|g| {
            g.weights.as_slice().iter().all(|v| v.is_finite()) && g.bias.iter().all(|v| v.is_finite())
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|g| g.weights.as_slice().iter().chain(&g.bias))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Activations recorded by [`LayeredModel::forward`] for use by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    revision: u64,
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    logits: Matrix,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }
}

#[derive(Debug, Clone)]
pub struct LayeredModel {
    blocks: Vec<LayerBlock>,
    num_prunable: usize,
    has_head: bool,
    revision: u64,
}

impl PartialEq for LayeredModel {
    fn eq(&self, other: &Self) -> bool {
        self.has_head == other.has_head
            && self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.params_equal(b))
    }
}

impl LayeredModel {
    /// Validates block compatibility and renumbers block indices.
    pub fn new(blocks: Vec<LayerBlock>) -> Result<Self> {
        Self::build(blocks, false)
    }

    /// Like [`new`](Self::new), but the last dense block is a personalized
    /// head that is not counted as a prunable layer.
    pub fn with_head(blocks: Vec<LayerBlock>) -> Result<Self> {
        Self::build(blocks, true)
    }

    fn build(mut blocks: Vec<LayerBlock>, has_head: bool) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Contract("model needs at least one block".into()));
        }
        let mut width: Option<usize> = None;
        let last = blocks.len() - 1;
        for (i, b) in blocks.iter_mut().enumerate() {
            b.index = i;
            if b.is_dense() && b.bias.len() != b.weights.cols() {
                return Err(Error::Shape {
                    block: i,
                    detail: format!("bias length {} != fan_out {}", b.bias.len(), b.fan_out()),
                });
            }
            if !b.is_dense() && !b.bias.is_empty() {
                return Err(Error::Shape {
                    block: i,
                    detail: "activation-only block carries parameters".into(),
                });
            }
            if let Some(w) = width {
                if b.fan_in() != w {
                    return Err(Error::Shape {
                        block: i,
                        detail: format!("fan_in {} != previous fan_out {w}", b.fan_in()),
                    });
                }
            }
            if b.activation == Activation::SoftmaxOutput && i != last {
                return Err(Error::Contract(format!(
                    "softmax output activation on non-final block {i}"
                )));
            }
            width = Some(b.fan_out());
        }
        let dense = blocks.iter().filter(|b| b.is_dense()).count();
        if dense == 0 || (has_head && dense < 2) {
            return Err(Error::Contract("model has too few dense blocks".into()));
        }
        Ok(LayeredModel {
            blocks,
            num_prunable: if has_head { dense - 1 } else { dense },
            has_head,
            revision: next_revision(),
        })
    }

    /// MLP with ReLU hidden layers and a softmax output layer. The number of
    /// prunable layers is `hidden.len() + 1`.
    pub fn mlp<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &h in hidden {
            blocks.push(LayerBlock::dense_init(fan_in, h, Activation::Relu, rng));
            fan_in = h;
        }
        blocks.push(LayerBlock::dense_init(
            fan_in,
            num_classes,
            Activation::SoftmaxOutput,
            rng,
        ));
        Self::new(blocks)
    }

    pub fn blocks(&self) -> &[LayerBlock] {
        &self.blocks
    }

    pub fn num_prunable(&self) -> usize {
        self.num_prunable
    }

    pub fn has_head(&self) -> bool {
        self.has_head
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.blocks[self.blocks.len() - 1].fan_out()
    }

    /// Block positions of the prunable layers, in layer order.
    pub fn prunable_positions(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_dense())
            .map(|(i, _)| i)
            .take(self.num_prunable)
            .collect()
    }

    fn position_of(&self, layer: usize) -> Result<usize> {
        if layer == 0 || layer > self.num_prunable {
            return Err(Error::LayerOutOfRange {
                index: layer,
                max: self.num_prunable,
            });
        }
        Ok(self.prunable_positions()[layer - 1])
    }

    /// Block range bundled with prunable `layer`: the dense block and any
    /// activation-only blocks that follow it.
    fn bundle(&self, layer: usize) -> Result<std::ops::Range<usize>> {
        let start = self.position_of(layer)?;
        let end = self.blocks[start + 1..]
            .iter()
            .position(LayerBlock::is_dense)
            .map_or(self.blocks.len(), |off| start + 1 + off);
        Ok(start..end)
    }

    /// Prunable layer `layer` (1-based).
    pub fn layer(&self, layer: usize) -> Result<&LayerBlock> {
        Ok(&self.blocks[self.position_of(layer)?])
    }

    pub fn layer_mut(&mut self, layer: usize) -> Result<&mut LayerBlock> {
        let pos = self.position_of(layer)?;
        self.revision = next_revision();
        Ok(&mut self.blocks[pos])
    }

    pub fn head(&self) -> Option<&LayerBlock> {
        if self.has_head {
            self.blocks.iter().rev().find(|b| b.is_dense())
        } else {
            None
        }
    }

    /// The first `count` prunable layers (with their bundled activations) as
    /// a standalone block list.
    pub fn leading_blocks(&self, count: usize) -> Result<Vec<LayerBlock>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let end = self.bundle(count)?.end;
        Ok(self.blocks[..end].to_vec())
    }

    fn resolve(&self, layers: Option<&[usize]>) -> Result<Vec<std::ops::Range<usize>>> {
        match layers {
            None => Ok(vec![0..self.blocks.len()]),
            Some(ls) => ls
                .iter()
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .map(|l| self.bundle(l))
                .collect(),
        }
    }

    /// Exact parameter count of the selected prunable layers; the whole model
    /// (head included) when `layers` is `None`.
    pub fn param_count(&self, layers: Option<&[usize]>) -> Result<u64> {
        Ok(self
            .resolve(layers)?
            .into_iter()
            .flat_map(|r| self.blocks[r].iter())
            .map(LayerBlock::param_count)
            .sum())
    }

    /// Forward FLOPs per sample of the selected layers (bundled activations
    /// included); the whole model when `layers` is `None`.
    pub fn flops_count(&self, layers: Option<&[usize]>) -> Result<u64> {
        Ok(self
            .resolve(layers)?
            .into_iter()
            .flat_map(|r| self.blocks[r].iter())
            .map(LayerBlock::flops)
            .sum())
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut pre = Vec::with_capacity(self.blocks.len());
        let mut x = batch.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            if x.cols() != b.fan_in() {
                return Err(Error::Shape {
                    block: i,
                    detail: format!("input has {} features, block expects {}", x.cols(), b.fan_in()),
                });
            }
            let z = match b.kind {
                BlockKind::Dense => affine(&x, &b.weights, &b.bias),
                BlockKind::ActivationOnly => x.clone(),
            };
            let a = activate(&z, b.activation);
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        let cache = ForwardCache {
            revision: self.revision,
            inputs,
            pre,
            logits: x.clone(),
        };
        Ok((x, cache))
    }

    /// Output logits only.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        let mut x = batch.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            if x.cols() != b.fan_in() {
                return Err(Error::Shape {
                    block: i,
                    detail: format!("input has {} features, block expects {}", x.cols(), b.fan_in()),
                });
            }
            let z = match b.kind {
                BlockKind::Dense => affine(&x, &b.weights, &b.bias),
                BlockKind::ActivationOnly => x,
            };
            x = activate(&z, b.activation);
        }
        Ok(x)
    }

    /// Gradient of the mean softmax cross-entropy over the batch.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<GradientSet> {
        if cache.revision != self.revision || cache.pre.len() != self.blocks.len() {
            return Err(Error::Contract(
                "forward cache does not belong to this model state".into(),
            ));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if cache.inputs[i].cols() != b.fan_in() || cache.pre[i].cols() != b.fan_out() {
                return Err(Error::Contract(format!("forward cache shape mismatch at block {i}")));
            }
        }
        let last = &self.blocks[self.blocks.len() - 1];
        if last.activation != Activation::SoftmaxOutput {
            return Err(Error::Contract(
                "backward needs a softmax output block".into(),
            ));
        }
        let n = cache.logits.rows();
        let classes = cache.logits.cols();
        if labels.len() != n {
            return Err(Error::Contract(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Contract(format!("label {bad} >= {classes} classes")));
        }

        let mut grad = softmax_rows(&cache.logits);
        let inv_n = 1.0 / n.max(1) as f64;
        for (r, &y) in labels.iter().enumerate() {
            let row = &mut grad.data[r * classes..(r + 1) * classes];
            row[y] -= 1.0;
            row.iter_mut().for_each(|v| *v *= inv_n);
        }

        let mut out = GradientSet::zeros_like(self);
        for i in (0..self.blocks.len()).rev() {
            let b = &self.blocks[i];
            if b.activation == Activation::Relu {
                for (g, &z) in grad.data.iter_mut().zip(&cache.pre[i].data) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            if b.is_dense() {
                let x = &cache.inputs[i];
                let gw = &mut out.blocks[i];
                accumulate_xt_g(x, &grad, &mut gw.weights);
                for r in 0..grad.rows() {
                    for (db, &g) in gw.bias.iter_mut().zip(grad.row(r)) {
                        *db += g;
                    }
                }
                if i > 0 {
                    grad = g_wt(&grad, &b.weights);
                }
            }
        }
        Ok(out)
    }

    /// `p <- p - lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        if grads.blocks.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "{} gradient blocks for {} model blocks",
                grads.blocks.len(),
                self.blocks.len()
            )));
        }
        for (i, (b, g)) in self.blocks.iter().zip(&grads.blocks).enumerate() {
            if b.weights.shape() != g.weights.shape() || b.bias.len() != g.bias.len() {
                return Err(Error::Shape {
                    block: i,
                    detail: "gradient shape differs from parameters".into(),
                });
            }
            if g.weights.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { block: i, which: "weights" });
            }
            if g.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { block: i, which: "bias" });
            }
        }
        for (b, g) in self.blocks.iter_mut().zip(&grads.blocks) {
            for (p, d) in b.weights.data.iter_mut().zip(&g.weights.data) {
                *p -= lr * d;
            }
            for (p, d) in b.bias.iter_mut().zip(&g.bias) {
                *p -= lr * d;
            }
        }
        self.revision = next_revision();
        Ok(())
    }

    /// Mean softmax cross-entropy of the model on a batch.
    pub fn loss(&self, batch: &Matrix, labels: &[usize]) -> Result<f64> {
        let logits = self.predict(batch)?;
        cross_entropy(&logits, labels)
    }

    /// Fraction of samples whose arg-max logit equals the label.
    pub fn accuracy(&self, batch: &Matrix, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let logits = self.predict(batch)?;
        let correct = (0..logits.rows())
            .filter(|&r| argmax(logits.row(r)) == labels[r])
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

fn affine(x: &Matrix, w: &Matrix, bias: &[f64]) -> Matrix {
    let (n, k, m) = (x.rows(), w.rows(), w.cols());
    let mut out = Matrix::zeros(n, m);
    for r in 0..n {
        let orow = &mut out.data[r * m..(r + 1) * m];
        orow.copy_from_slice(bias);
        for (kk, &xv) in x.row(r).iter().enumerate().take(k) {
            if xv == 0.0 {
                continue;
            }
            for (o, &wv) in orow.iter_mut().zip(w.row(kk)) {
                *o += xv * wv;
            }
        }
    }
    out
}

/// `acc += x^T * g`
fn accumulate_xt_g(x: &Matrix, g: &Matrix, acc: &mut Matrix) {
    let m = g.cols();
    for r in 0..x.rows() {
        let grow = g.row(r);
        for (kk, &xv) in x.row(r).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let arow = &mut acc.data[kk * m..(kk + 1) * m];
            for (a, &gv) in arow.iter_mut().zip(grow) {
                *a += xv * gv;
            }
        }
    }
}

/// `g * w^T`
fn g_wt(g: &Matrix, w: &Matrix) -> Matrix {
    let (n, k) = (g.rows(), w.rows());
    let mut out = Matrix::zeros(n, k);
    for r in 0..n {
        let grow = g.row(r);
        for kk in 0..k {
            out.data[r * k + kk] = grow.iter().zip(w.row(kk)).map(|(a, b)| a * b).sum();
        }
    }
    out
}

fn activate(z: &Matrix, act: Activation) -> Matrix {
    match act {
        Activation::Relu => Matrix {
            rows: z.rows,
            cols: z.cols,
            data: z.data.iter().map(|&v| v.max(0.0)).collect(),
        },
        Activation::Identity | Activation::SoftmaxOutput => z.clone(),
    }
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    let c = logits.cols();
    for r in 0..logits.rows() {
        let row = &mut out.data[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Mean cross-entropy of softmax(logits) against integer labels.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::Contract("label count differs from batch size".into()));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        if y >= row.len() {
            return Err(Error::Contract(format!("label {y} out of range")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
