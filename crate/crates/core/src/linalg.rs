//! Dense f32 kernels. Dot products and matrix products accumulate in f64 and
//! round once on output.

use thiserror::Error;

use crate::exec::{self, Exec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("empty input")]
    Empty,
}

/// A value that may have been produced from degenerate (zero-norm) input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flagged<T> {
    pub value: T,
    pub degenerate: bool,
}

impl<T> Flagged<T> {
    pub fn ok(value: T) -> Self {
        Self {
            value,
            degenerate: false,
        }
    }

    pub fn degenerate(value: T) -> Self {
        Self {
            value,
            degenerate: true,
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, cols.len(), |i, j| self.get(i, cols[j]))
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        Matrix::from_fn(rows.len(), self.cols, |i, j| self.get(rows[i], j))
    }
}

/// Standard matrix product `a × b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Vec::with_capacity(a.rows * b.cols);
    for i in 0..a.rows {
        out.extend(vecmat_seq(a.row(i), b));
    }
    Ok(Matrix {
        rows: a.rows,
        cols: b.cols,
        data: out,
    })
}

// Below this many multiply-adds the thread hand-off costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 15;
// Column chunks stay a multiple of this so rows are read in whole cache lines.
const PAR_ALIGN: usize = 64;

/// Row vector times matrix: `x (1×rows) · w (rows×cols)`.
pub fn vecmat(x: &[f32], w: &Matrix) -> Result<Vec<f32>, LinalgError> {
    vecmat_exec(Exec::Sequential, x, w)
}

pub fn vecmat_exec(exec: Exec, x: &[f32], w: &Matrix) -> Result<Vec<f32>, LinalgError> {
    if x.len() != w.rows {
        return Err(LinalgError::Shape(format!(
            "vector of length {} against {}x{} matrix",
            x.len(),
            w.rows,
            w.cols
        )));
    }
    opcount::macs(w.rows * w.cols);
    let threads = exec::threads();
    if !exec.is_parallel() || threads < 2 || w.rows * w.cols < PAR_THRESHOLD {
        return Ok(vecmat_seq(x, w));
    }
    // A few chunks per thread for balance; each chunk streams every row once.
    let chunk = w.cols.div_ceil(4 * threads).next_multiple_of(PAR_ALIGN);
    let mut out = vec![0.0f32; w.cols];
    exec::for_each_chunk_mut(exec, &mut out, chunk, |start, chunk| {
        let mut acc = vec![0.0f64; chunk.len()];
        for (i, &xi) in x.iter().enumerate() {
            let row = &w.data[i * w.cols + start..i * w.cols + start + chunk.len()];
            let xi = xi as f64;
            for (a, &wij) in acc.iter_mut().zip(row) {
                *a += xi * wij as f64;
            }
        }
        for (o, a) in chunk.iter_mut().zip(acc) {
            *o = a as f32;
        }
    });
    Ok(out)
}

fn vecmat_seq(x: &[f32], w: &Matrix) -> Vec<f32> {
    let mut acc = vec![0.0f64; w.cols];
    for (i, &xi) in x.iter().enumerate() {
        let xi = xi as f64;
        for (a, &wij) in acc.iter_mut().zip(w.row(i)) {
            *a += xi * wij as f64;
        }
    }
    acc.into_iter().map(|a| a as f32).collect()
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(v: &[f32]) -> Result<Vec<f32>, LinalgError> {
    if v.is_empty() {
        return Err(LinalgError::Empty);
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = v.iter().map(|&x| ((x - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| (e / sum) as f32).collect())
}

pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}

/// Pointwise `x · sigmoid(x)`.
pub fn silu(v: &[f32]) -> Vec<f32> {
    opcount::elementwise(v.len());
    v.iter().map(|&x| x * sigmoid(x)).collect()
}

pub fn hadamard(a: &[f32], b: &[f32]) -> Result<Vec<f32>, LinalgError> {
    check_len(a, b)?;
    opcount::elementwise(a.len());
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

/// Counted dot product used on the model's hot path.
pub fn dot_f32(a: &[f32], b: &[f32]) -> Result<f32, LinalgError> {
    check_len(a, b)?;
    opcount::macs(a.len());
    Ok(dot(a, b) as f32)
}

/// `out += alpha · x`, counted.
pub fn axpy(alpha: f32, x: &[f32], out: &mut [f32]) -> Result<(), LinalgError> {
    check_len(x, out)?;
    opcount::macs(x.len());
    for (o, &xi) in out.iter_mut().zip(x) {
        *o += alpha * xi;
    }
    Ok(())
}

/// Uncounted f64 dot product.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity. A zero-norm argument yields 0 flagged as degenerate.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<Flagged<f64>, LinalgError> {
    check_len(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(Flagged::degenerate(0.0));
    }
    Ok(Flagged::ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0)))
}

pub const RMS_EPS: f64 = 1e-6;

/// RMS normalization without a learned gain.
pub fn rms_norm(x: &[f32]) -> Vec<f32> {
    if x.is_empty() {
        return Vec::new();
    }
    let ms = dot(x, x) / x.len() as f64;
    let scale = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().map(|&v| (v as f64 * scale) as f32).collect()
}

pub fn add(a: &[f32], b: &[f32]) -> Result<Vec<f32>, LinalgError> {
    check_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

fn check_len(a: &[f32], b: &[f32]) -> Result<(), LinalgError> {
    if a.len() != b.len() {
        return Err(LinalgError::Shape(format!(
            "lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Dynamic FLOP tally for the kernels above. Counting is off unless a
/// [`opcount::tally`] scope is active on the current thread; kernels record
/// before any parallel dispatch, so the tally stays on the calling thread.
pub mod opcount {
    use std::cell::Cell;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum OpKind {
        Attention,
        Mlp,
        Other,
    }

    /// FLOPs observed per component. A multiply-add is 2 FLOPs, an
    /// elementwise op is 1.
    #[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
    pub struct OpTally {
        pub attention: u64,
        pub mlp: u64,
        pub other: u64,
    }

    thread_local! {
        static ACTIVE: Cell<Option<OpTally>> = const { Cell::new(None) };
        static KIND: Cell<OpKind> = const { Cell::new(OpKind::Other) };
    }

    fn add(flops: u64) {
        ACTIVE.with(|a| {
            if let Some(mut t) = a.get() {
                match KIND.with(|k| k.get()) {
                    OpKind::Attention => t.attention += flops,
                    OpKind::Mlp => t.mlp += flops,
                    OpKind::Other => t.other += flops,
                }
                a.set(Some(t));
            }
        });
    }

    pub(crate) fn macs(n: usize) {
        add(2 * n as u64);
    }

    pub(crate) fn elementwise(n: usize) {
        add(n as u64);
    }

    /// Attributes kernel work done inside `f` to `kind`.
    pub fn scoped<R>(kind: OpKind, f: impl FnOnce() -> R) -> R {
        let prev = KIND.with(|k| k.replace(kind));
        let out = f();
        KIND.with(|k| k.set(prev));
        out
    }

    /// Runs `f` with counting enabled and returns what it executed.
    pub fn tally<R>(f: impl FnOnce() -> R) -> (R, OpTally) {
        let prev = ACTIVE.with(|a| a.replace(Some(OpTally::default())));
        let out = f();
        let t = ACTIVE.with(|a| a.replace(prev)).unwrap_or_default();
        (out, t)
    }
}
