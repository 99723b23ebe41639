//! Dense building blocks: row-major matrices, linear maps, layer norm,
//! multi-head attention and pre-norm transformer layers.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::NeuralError;

/// Row-major `rows × cols` matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NeuralError> {
        if data.len() != rows * cols {
            return Err(NeuralError::Shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NeuralError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NeuralError::Shape("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Plain `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NeuralError> {
        if self.cols != other.rows {
            return Err(NeuralError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), dst);
                }
            }
        }
        Ok(out)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Uniform Glorot initialization, rounded through f32 so the values survive
/// the weights file exactly.
pub(crate) fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Matrix {
    let limit = gain * (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..rows * cols).map(|_| dist.sample(rng) as f32 as f64).collect();
    Matrix { rows, cols, data }
}

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self, NeuralError> {
        if bias.len() != weight.cols() {
            return Err(NeuralError::ShapeMismatch(format!(
                "bias of length {} for a {}x{} weight",
                bias.len(),
                weight.rows(),
                weight.cols()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Matrix::zeros(input, output), bias: vec![0.0; output] }
    }

    pub fn identity(n: usize) -> Self {
        Self { weight: Matrix::identity(n), bias: vec![0.0; n] }
    }

    pub fn random<R: Rng>(rng: &mut R, input: usize, output: usize, gain: f64) -> Self {
        Self { weight: glorot(rng, input, output, gain), bias: vec![0.0; output] }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, NeuralError> {
        if x.cols() != self.input_dim() {
            return Err(NeuralError::Shape(format!(
                "linear layer expects width {}, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let out_dim = self.output_dim();
        let mut out = Matrix::zeros(x.rows(), out_dim);
        for i in 0..x.rows() {
            let dst = out.row_mut(i);
            dst.copy_from_slice(&self.bias);
            for (k, &a) in x.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, self.weight.row(k), dst);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(width: usize) -> Self {
        Self { gamma: vec![1.0; width], beta: vec![0.0; width], eps: Self::EPS }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, NeuralError> {
        if x.cols() != self.width() {
            return Err(NeuralError::Shape(format!("layer norm expects width {}, got {}", self.width(), x.cols())));
        }
        let n = x.cols() as f64;
        let mut out = x.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        Ok(out)
    }
}

fn relu_in_place(x: &mut Matrix) {
    for v in x.data_mut() {
        *v = v.max(0.0);
    }
}

/// Two linear maps with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix, NeuralError> {
        let mut h = self.hidden.forward(x)?;
        relu_in_place(&mut h);
        self.output.forward(&h)
    }
}

/// Attention probabilities collected per layer and head, in call order.
pub type AttentionProbe = Vec<Matrix>;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn random<R: Rng>(rng: &mut R, width: usize, heads: usize) -> Self {
        Self {
            heads,
            query: Linear::random(rng, width, width, 1.0),
            key: Linear::random(rng, width, width, 1.0),
            value: Linear::random(rng, width, width, 1.0),
            output: Linear::random(rng, width, width, 1.0),
        }
    }

    pub fn width(&self) -> usize {
        self.query.output_dim()
    }

    /// Attends from each row of `queries` over the rows of `context`.
    pub fn forward(
        &self,
        queries: &Matrix,
        context: &Matrix,
        mut probe: Option<&mut AttentionProbe>,
    ) -> Result<Matrix, NeuralError> {
        let width = self.width();
        if self.heads == 0 || width % self.heads != 0 {
            return Err(NeuralError::ShapeMismatch(format!("{} heads do not divide width {width}", self.heads)));
        }
        if context.rows() == 0 {
            return Err(NeuralError::Shape("empty attention context".into()));
        }
        let q = self.query.forward(queries)?;
        let k = self.key.forward(context)?;
        let v = self.value.forward(context)?;
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (n, m) = (q.rows(), k.rows());
        let mut mixed = Matrix::zeros(n, width);
        let mut probs = Matrix::zeros(n, m);
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                let p = probs.row_mut(i);
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qi, &k.row(j)[cols.clone()]) * scale;
                }
                softmax_in_place(p);
                let dst = &mut mixed.row_mut(i)[cols.clone()];
                for (j, &pj) in probs.row(i).iter().enumerate() {
                    axpy(pj, &v.row(j)[cols.clone()], dst);
                }
            }
            if let Some(probe) = probe.as_deref_mut() {
                probe.push(probs.clone());
            }
        }
        self.output.forward(&mixed)
    }
}

pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Residual feed-forward block `x + W2·relu(W1·LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn random<R: Rng>(rng: &mut R, width: usize) -> Self {
        Self {
            norm: LayerNorm::new(width),
            mlp: Mlp {
                hidden: Linear::random(rng, width, 4 * width, 1.0),
                output: Linear::random(rng, 4 * width, width, 1.0),
            },
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, NeuralError> {
        let mut out = self.mlp.forward(&self.norm.forward(x)?)?;
        out.add_assign(x);
        Ok(out)
    }
}

/// Pre-norm self-attention layer followed by a residual feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub norm: LayerNorm,
    pub attention: MultiHeadAttention,
    pub feed_forward: FeedForward,
}

impl TransformerLayer {
    pub fn random<R: Rng>(rng: &mut R, width: usize, heads: usize) -> Self {
        Self {
            norm: LayerNorm::new(width),
            attention: MultiHeadAttention::random(rng, width, heads),
            feed_forward: FeedForward::random(rng, width),
        }
    }

    pub fn forward(&self, x: &Matrix, probe: Option<&mut AttentionProbe>) -> Result<Matrix, NeuralError> {
        let normed = self.norm.forward(x)?;
        let mut h = self.attention.forward(&normed, &normed, probe)?;
        h.add_assign(x);
        self.feed_forward.forward(&h)
    }
}
