//! Dense row-major matrices, the reference GEMM, norms and seeded samplers.
//!
//! Weights are stored as `D_out x D_in`, so [`gemm`] contracts over the
//! column dimension of both operands: `Y = X * W^T`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LynxError, Result};

/// Name of the generator behind every seeded sampler in the crate.
pub const RNG_ALGORITHM: &str = "ChaCha8";

/// Rows below which [`gemm`] stays on the calling thread.
const PAR_MIN_WORK: usize = 1 << 18;

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 64 {
            f.debug_struct("DenseMatrix")
                .field("rows", &self.rows)
                .field("cols", &self.cols)
                .field("data", &self.data)
                .finish()
        } else {
            write!(f, "DenseMatrix({}x{})", self.rows, self.cols)
        }
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LynxError::dim(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(LynxError::dim(format!(
                "data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix {rows}x{cols}");
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

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LynxError::dim(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> DenseMatrix {
        let data = (0..self.rows).map(|i| self.get(i, j)).collect();
        DenseMatrix {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<DenseMatrix> {
        if start >= end || end > self.rows {
            return Err(LynxError::dim(format!(
                "row range {start}..{end} invalid for {} rows",
                self.rows
            )));
        }
        Self::new(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<DenseMatrix> {
        if start >= end || end > self.cols {
            return Err(LynxError::dim(format!(
                "column range {start}..{end} invalid for {} columns",
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Self::new(self.rows, end - start, data)
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hconcat(parts: &[&DenseMatrix]) -> Result<DenseMatrix> {
        let first = parts
            .first()
            .ok_or_else(|| LynxError::dim("hconcat of zero matrices"))?;
        let rows = first.rows;
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(LynxError::dim(format!(
                "hconcat row mismatch: {} vs {}",
                rows, bad.rows
            )));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = vec![0.0f32; self.data.len()];
        for i in 0..self.rows {
            for (j, &v) in self.row(i).iter().enumerate() {
                t[j * self.rows + i] = v;
            }
        }
        DenseMatrix {
            rows: self.cols,
            cols: self.rows,
            data: t,
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f32) -> DenseMatrix {
        self.map(|v| v * c)
    }

    fn zip_with(
        &self,
        other: &DenseMatrix,
        op: &str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(LynxError::dim(format!(
                "{op}: shapes {}x{} and {}x{} differ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Little-endian payload bytes, as written by the binary format.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// `Y = X * W^T` where `x` is `N x D_in` and `w` is `D_out x D_in`.
///
/// Each output row accumulates over `k` in ascending order, so the result is
/// identical whether or not rows are computed in parallel.
pub fn gemm(x: &DenseMatrix, w: &DenseMatrix) -> Result<DenseMatrix> {
    if x.cols != w.cols {
        return Err(LynxError::dim(format!(
            "gemm: x is {}x{} but w is {}x{} (contraction needs x.cols == w.cols)",
            x.rows, x.cols, w.rows, w.cols
        )));
    }
    let wt = w.transpose();
    let n = w.rows;
    let mut out = DenseMatrix::zeros(x.rows, n);
    let row_kernel = |(i, y): (usize, &mut [f32])| {
        for (k, &a) in x.row(i).iter().enumerate() {
            let b = wt.row(k);
            for (acc, &bv) in y.iter_mut().zip(b) {
                *acc += a * bv;
            }
        }
    };
    if x.rows * x.cols * n >= PAR_MIN_WORK && x.rows > 1 {
        out.data.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(row_kernel);
    }
    Ok(out)
}

pub fn frobenius_norm(m: &DenseMatrix) -> f64 {
    squared_norm(m.data()).sqrt()
}

pub(crate) fn squared_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum()
}

pub fn column_l2_norms(m: &DenseMatrix) -> Vec<f32> {
    let mut acc = vec![0.0f64; m.cols];
    for i in 0..m.rows {
        for (a, &v) in acc.iter_mut().zip(m.row(i)) {
            *a += (v as f64) * (v as f64);
        }
    }
    acc.into_iter().map(|s| s.sqrt() as f32).collect()
}

pub fn row_l2_norms(m: &DenseMatrix) -> Vec<f32> {
    (0..m.rows)
        .map(|i| squared_norm(m.row(i)).sqrt() as f32)
        .collect()
}

/// Value distribution used by [`sample`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Distribution {
    Gaussian {
        mean: f64,
        stddev: f64,
    },
    /// Each entry comes from the slab with probability `active_fraction`,
    /// otherwise from the narrow spike around zero.
    SpikeSlab {
        active_fraction: f64,
        spike_stddev: f64,
        slab_stddev: f64,
    },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(LynxError::config(format!("{name} must be > 0, got {v}")))
            }
        };
        match *self {
            Distribution::Gaussian { mean, stddev } => {
                if !mean.is_finite() {
                    return Err(LynxError::config(format!(
                        "mean must be finite, got {mean}"
                    )));
                }
                positive("stddev", stddev)
            }
            Distribution::SpikeSlab {
                active_fraction,
                spike_stddev,
                slab_stddev,
            } => {
                if !(active_fraction > 0.0 && active_fraction <= 1.0) {
                    return Err(LynxError::config(format!(
                        "active fraction must lie in (0, 1], got {active_fraction}"
                    )));
                }
                positive("spike stddev", spike_stddev)?;
                positive("slab stddev", slab_stddev)
            }
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distribution::Gaussian { mean, stddev } => write!(f, "gaussian:{mean},{stddev}"),
            Distribution::SpikeSlab {
                active_fraction,
                spike_stddev,
                slab_stddev,
            } => write!(
                f,
                "spike-slab:{active_fraction},{spike_stddev},{slab_stddev}"
            ),
        }
    }
}

/// Parses `gaussian:MEAN,STD` or `spike-slab:FRACTION,SPIKE_STD,SLAB_STD`.
impl FromStr for Distribution {
    type Err = LynxError;

    fn from_str(s: &str) -> Result<Self> {
        let grammar = "expected gaussian:MEAN,STD or spike-slab:FRACTION,SPIKE_STD,SLAB_STD";
        let (kind, params) = s
            .split_once(':')
            .ok_or_else(|| LynxError::config(format!("bad distribution '{s}': {grammar}")))?;
        let nums: Vec<f64> = params
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| LynxError::config(format!("bad distribution '{s}': {grammar}")))?;
        let dist = match (kind, nums.as_slice()) {
            ("gaussian", [mean, stddev]) => Distribution::Gaussian {
                mean: *mean,
                stddev: *stddev,
            },
            ("spike-slab", [p, spike, slab]) => Distribution::SpikeSlab {
                active_fraction: *p,
                spike_stddev: *spike,
                slab_stddev: *slab,
            },
            _ => {
                return Err(LynxError::config(format!(
                    "bad distribution '{s}': {grammar}"
                )))
            }
        };
        dist.validate()?;
        Ok(dist)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomSpec {
    pub distribution: Distribution,
    pub seed: u64,
}

impl RandomSpec {
    pub fn gaussian(mean: f64, stddev: f64, seed: u64) -> Self {
        Self {
            distribution: Distribution::Gaussian { mean, stddev },
            seed,
        }
    }

    pub fn spike_slab(
        active_fraction: f64,
        spike_stddev: f64,
        slab_stddev: f64,
        seed: u64,
    ) -> Self {
        Self {
            distribution: Distribution::SpikeSlab {
                active_fraction,
                spike_stddev,
                slab_stddev,
            },
            seed,
        }
    }
}

pub fn sample(spec: &RandomSpec, rows: usize, cols: usize) -> Result<DenseMatrix> {
    spec.distribution.validate()?;
    if rows == 0 || cols == 0 {
        return Err(LynxError::dim(format!(
            "cannot sample a {rows}x{cols} matrix"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let data: Vec<f32> = match spec.distribution {
        Distribution::Gaussian { mean, stddev } => {
            let normal = Normal::new(mean, stddev).map_err(|e| LynxError::config(e.to_string()))?;
            (0..rows * cols)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect()
        }
        Distribution::SpikeSlab {
            active_fraction,
            spike_stddev,
            slab_stddev,
        } => {
            let spike =
                Normal::new(0.0, spike_stddev).map_err(|e| LynxError::config(e.to_string()))?;
            let slab =
                Normal::new(0.0, slab_stddev).map_err(|e| LynxError::config(e.to_string()))?;
            (0..rows * cols)
                .map(|_| {
                    let active = rng.random::<f64>() < active_fraction;
                    let v = if active {
                        slab.sample(&mut rng)
                    } else {
                        spike.sample(&mut rng)
                    };
                    v as f32
                })
                .collect()
        }
    };
    DenseMatrix::new(rows, cols, data)
}

/// Uniform samples in `[-half_width, half_width]`; zero width yields zeros.
pub fn sample_uniform(rows: usize, cols: usize, half_width: f64, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            if half_width == 0.0 {
                0.0
            } else {
                rng.random_range(-half_width..=half_width) as f32
            }
        })
        .collect();
    DenseMatrix { rows, cols, data }
}
