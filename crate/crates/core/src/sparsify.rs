//! Group-wise Top-K selection, norm compensation and weight-pruning scores.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LynxError, Result};
use crate::nm_format::{NMPattern, MAX_M};
use crate::tensor::{squared_norm, DenseMatrix};

/// Guard added to channel-norm denominators in RIA and BaWA scoring.
pub const SCORE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompensationGranularity {
    None,
    #[default]
    PerTensor,
    PerRow,
    PerGroup,
}

impl CompensationGranularity {
    pub const ALL: [CompensationGranularity; 4] = [
        CompensationGranularity::None,
        CompensationGranularity::PerTensor,
        CompensationGranularity::PerRow,
        CompensationGranularity::PerGroup,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CompensationGranularity::None => "none",
            CompensationGranularity::PerTensor => "per-tensor",
            CompensationGranularity::PerRow => "per-row",
            CompensationGranularity::PerGroup => "per-group",
        }
    }
}

impl fmt::Display for CompensationGranularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CompensationGranularity {
    type Err = LynxError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| {
                LynxError::config(format!(
                    "bad granularity '{s}': expected none, per-tensor, per-row or per-group"
                ))
            })
    }
}

/// Compensation scales produced by [`sparsify_activation`].
///
/// `values` holds one entry for `none` and `per-tensor`, one per row for
/// `per-row`, and `rows * groups` row-major entries for `per-group`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub granularity: CompensationGranularity,
    pub pattern: NMPattern,
    pub eps: f32,
    pub rows: usize,
    pub groups_per_row: usize,
    pub values: Vec<f32>,
}

impl ScaleRecord {
    /// Scale applied to group `g` of row `i`.
    pub fn scale_for(&self, i: usize, g: usize) -> f32 {
        match self.granularity {
            CompensationGranularity::None | CompensationGranularity::PerTensor => self.values[0],
            CompensationGranularity::PerRow => self.values[i],
            CompensationGranularity::PerGroup => self.values[i * self.groups_per_row + g],
        }
    }
}

/// `sqrt(total / (kept + eps))`, evaluated in f64.
#[inline]
pub fn compensation_scale(total_sq: f64, kept_sq: f64, eps: f32) -> f32 {
    (total_sq / (kept_sq + eps as f64)).sqrt() as f32
}

/// Writes the ascending in-group positions of the `n` largest magnitudes
/// into `keep`; equal magnitudes go to the lower index.
#[inline]
pub fn select_group(group: &[f32], n: usize, keep: &mut [u8]) {
    let mut fill = 0;
    for (j, &v) in group.iter().enumerate() {
        let a = v.abs();
        let mut rank = 0;
        for (k, &u) in group.iter().enumerate() {
            let b = u.abs();
            if b > a || (b == a && k < j) {
                rank += 1;
            }
        }
        if rank < n {
            keep[fill] = j as u8;
            fill += 1;
        }
    }
    debug_assert_eq!(fill, n);
}

/// Boolean keep-mask with the shape of the matrix it was computed from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// `mask ⊙ x`.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.shape() != (self.rows, self.cols) {
            return Err(LynxError::dim(format!(
                "mask is {}x{} but matrix is {}x{}",
                self.rows,
                self.cols,
                x.rows(),
                x.cols()
            )));
        }
        let data = x
            .data()
            .iter()
            .zip(&self.keep)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect();
        DenseMatrix::new(self.rows, self.cols, data)
    }
}

fn group_mask(x: &DenseMatrix, pattern: NMPattern) -> Result<Mask> {
    pattern.check_width(x.cols())?;
    let (n, m) = (pattern.n(), pattern.m());
    let mut keep = vec![false; x.rows() * x.cols()];
    let mut idx = [0u8; MAX_M as usize];
    for i in 0..x.rows() {
        for (g, group) in x.row(i).chunks_exact(m).enumerate() {
            select_group(group, n, &mut idx);
            for &j in &idx[..n] {
                keep[i * x.cols() + g * m + j as usize] = true;
            }
        }
    }
    Ok(Mask {
        rows: x.rows(),
        cols: x.cols(),
        keep,
    })
}

pub fn topk_mask(x: &DenseMatrix, pattern: NMPattern) -> Result<Mask> {
    group_mask(x, pattern)
}

/// Per-row `(‖x_i‖², ‖x̃_i‖²)` in f64.
pub(crate) fn row_energies(row: &[f32], pattern: NMPattern) -> (f64, f64) {
    let (n, m) = (pattern.n(), pattern.m());
    let mut idx = [0u8; MAX_M as usize];
    let mut total = 0.0f64;
    let mut kept = 0.0f64;
    for group in row.chunks_exact(m) {
        select_group(group, n, &mut idx);
        let (t, k) = group_energy(group, &idx[..n]);
        total += t;
        kept += k;
    }
    (total, kept)
}

#[inline]
pub(crate) fn group_energy(group: &[f32], keep: &[u8]) -> (f64, f64) {
    let total = squared_norm(group);
    let kept = keep
        .iter()
        .map(|&j| {
            let v = group[j as usize] as f64;
            v * v
        })
        .sum();
    (total, kept)
}

/// Sums per-row energies in row order, the reduction every path shares.
pub(crate) fn reduce_energies(per_row: &[(f64, f64)]) -> (f64, f64) {
    per_row
        .iter()
        .fold((0.0, 0.0), |(t, k), &(rt, rk)| (t + rt, k + rk))
}

pub(crate) fn check_activation(x: &DenseMatrix, pattern: NMPattern, eps: f32) -> Result<()> {
    pattern.check_width(x.cols())?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(LynxError::config(format!(
            "eps must be a positive finite number, got {eps}"
        )));
    }
    if !x.is_finite() {
        return Err(LynxError::Numeric(
            "activation contains non-finite values".into(),
        ));
    }
    Ok(())
}

/// Top-K masks `x` and rescales the survivors so their energy matches the
/// original at the requested granularity.
pub fn sparsify_activation(
    x: &DenseMatrix,
    pattern: NMPattern,
    granularity: CompensationGranularity,
    eps: f32,
) -> Result<(ScaleRecord, DenseMatrix)> {
    check_activation(x, pattern, eps)?;
    let (n, m) = (pattern.n(), pattern.m());
    let groups = x.cols() / m;
    let mask = group_mask(x, pattern)?;
    let mut sx = mask.apply(x)?;

    let values: Vec<f32> = match granularity {
        CompensationGranularity::None => vec![1.0],
        CompensationGranularity::PerTensor => {
            let per_row: Vec<_> = (0..x.rows())
                .map(|i| row_energies(x.row(i), pattern))
                .collect();
            let (t, k) = reduce_energies(&per_row);
            vec![compensation_scale(t, k, eps)]
        }
        CompensationGranularity::PerRow => (0..x.rows())
            .map(|i| {
                let (t, k) = row_energies(x.row(i), pattern);
                compensation_scale(t, k, eps)
            })
            .collect(),
        CompensationGranularity::PerGroup => {
            let mut idx = [0u8; MAX_M as usize];
            let mut out = Vec::with_capacity(x.rows() * groups);
            for i in 0..x.rows() {
                for group in x.row(i).chunks_exact(m) {
                    select_group(group, n, &mut idx);
                    let (t, k) = group_energy(group, &idx[..n]);
                    out.push(compensation_scale(t, k, eps));
                }
            }
            out
        }
    };
    let record = ScaleRecord {
        granularity,
        pattern,
        eps,
        rows: x.rows(),
        groups_per_row: groups,
        values,
    };
    if granularity != CompensationGranularity::None {
        let cols = x.cols();
        for i in 0..x.rows() {
            let row = &mut sx.data_mut()[i * cols..(i + 1) * cols];
            for (g, chunk) in row.chunks_exact_mut(m).enumerate() {
                let s = record.scale_for(i, g);
                chunk.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    Ok((record, sx))
}

/// Weight-pruning criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum ScoreSpec {
    Magnitude,
    Wanda,
    Ria {
        a: f64,
    },
    Bawa {
        theta1: f64,
        theta2: f64,
        theta3: f64,
    },
}

impl ScoreSpec {
    pub fn ria() -> Self {
        ScoreSpec::Ria { a: 0.5 }
    }

    pub fn bawa() -> Self {
        ScoreSpec::Bawa {
            theta1: 0.5,
            theta2: 0.5,
            theta3: 1.0,
        }
    }

    pub fn needs_norms(&self) -> bool {
        !matches!(self, ScoreSpec::Magnitude)
    }

    pub fn validate(&self) -> Result<()> {
        let exps: &[f64] = match self {
            ScoreSpec::Magnitude | ScoreSpec::Wanda => &[],
            ScoreSpec::Ria { a } => &[*a],
            ScoreSpec::Bawa {
                theta1,
                theta2,
                theta3,
            } => &[*theta1, *theta2, *theta3],
        };
        if exps.iter().all(|e| e.is_finite()) {
            Ok(())
        } else {
            Err(LynxError::config(format!(
                "score exponents must be finite: {self}"
            )))
        }
    }
}

impl fmt::Display for ScoreSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreSpec::Magnitude => write!(f, "magnitude"),
            ScoreSpec::Wanda => write!(f, "wanda"),
            ScoreSpec::Ria { a } => write!(f, "ria:{a}"),
            ScoreSpec::Bawa {
                theta1,
                theta2,
                theta3,
            } => write!(f, "bawa:{theta1},{theta2},{theta3}"),
        }
    }
}

/// Parses `magnitude`, `wanda`, `ria[:A]` or `bawa[:T1,T2,T3]`.
impl FromStr for ScoreSpec {
    type Err = LynxError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            LynxError::config(format!(
                "bad score spec '{s}': expected magnitude, wanda, ria[:A] or bawa[:T1,T2,T3]"
            ))
        };
        let (name, params) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let nums = |p: &str| -> Result<Vec<f64>> {
            p.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
                .collect()
        };
        let spec = match (name, params) {
            ("magnitude", None) => ScoreSpec::Magnitude,
            ("wanda", None) => ScoreSpec::Wanda,
            ("ria", None) => ScoreSpec::ria(),
            ("bawa", None) => ScoreSpec::bawa(),
            ("ria", Some(p)) => match nums(p)?.as_slice() {
                [a] => ScoreSpec::Ria { a: *a },
                _ => return Err(bad()),
            },
            ("bawa", Some(p)) => match nums(p)?.as_slice() {
                [t1, t2, t3] => ScoreSpec::Bawa {
                    theta1: *t1,
                    theta2: *t2,
                    theta3: *t3,
                },
                _ => return Err(bad()),
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Importance scores for every weight; `norms` are the input-channel
/// activation norms `‖X_j‖₂`, one per column of `w`.
pub fn score_weights(
    w: &DenseMatrix,
    norms: Option<&[f32]>,
    spec: ScoreSpec,
) -> Result<DenseMatrix> {
    spec.validate()?;
    let norms = match (spec.needs_norms(), norms) {
        (false, _) => None,
        (true, None) => {
            return Err(LynxError::config(format!(
                "{spec} scoring needs activation column norms"
            )))
        }
        (true, Some(v)) if v.len() != w.cols() => {
            return Err(LynxError::dim(format!(
                "norm vector has length {} but weight has {} input channels",
                v.len(),
                w.cols()
            )))
        }
        (true, Some(v)) => Some(v),
    };
    let (rows, cols) = w.shape();
    let abs = |i: usize, j: usize| w.get(i, j).abs() as f64;
    let scores: Vec<f32> = match spec {
        ScoreSpec::Magnitude => w.data().iter().map(|v| v.abs()).collect(),
        ScoreSpec::Wanda => {
            let nrm = norms.unwrap_or_default();
            (0..rows * cols)
                .map(|p| w.data()[p].abs() * nrm[p % cols])
                .collect()
        }
        ScoreSpec::Ria { a } => {
            let nrm = norms.unwrap_or_default();
            let mut col_sum = vec![0.0f64; cols];
            let mut row_sum = vec![0.0f64; rows];
            for (i, rs) in row_sum.iter_mut().enumerate() {
                for (j, cs) in col_sum.iter_mut().enumerate() {
                    *cs += abs(i, j);
                    *rs += abs(i, j);
                }
            }
            (0..rows * cols)
                .map(|p| {
                    let (i, j) = (p / cols, p % cols);
                    let v = abs(i, j);
                    let ri = v / (col_sum[j] + SCORE_EPS) + v / (row_sum[i] + SCORE_EPS);
                    (ri * (nrm[j] as f64).powf(a)) as f32
                })
                .collect()
        }
        ScoreSpec::Bawa {
            theta1,
            theta2,
            theta3,
        } => {
            let nrm = norms.unwrap_or_default();
            let mut col_sq = vec![0.0f64; cols];
            let mut row_sq = vec![0.0f64; rows];
            for (i, rs) in row_sq.iter_mut().enumerate() {
                for (j, cs) in col_sq.iter_mut().enumerate() {
                    let v = abs(i, j);
                    *cs += v * v;
                    *rs += v * v;
                }
            }
            let col_den: Vec<f64> = col_sq
                .iter()
                .map(|s| (s.sqrt() + SCORE_EPS).powf(theta1))
                .collect();
            let row_den: Vec<f64> = row_sq
                .iter()
                .map(|s| (s.sqrt() + SCORE_EPS).powf(theta2))
                .collect();
            (0..rows * cols)
                .map(|p| {
                    let (i, j) = (p / cols, p % cols);
                    let v = abs(i, j);
                    ((v / col_den[j] + v / row_den[i]) * (nrm[j] as f64).powf(theta3)) as f32
                })
                .collect()
        }
    };
    DenseMatrix::new(rows, cols, scores)
}

/// Keeps the `n` highest-scoring weights in every group of `m` input
/// channels and zeros the rest.
pub fn prune_weights(
    w: &DenseMatrix,
    scores: &DenseMatrix,
    pattern: NMPattern,
) -> Result<DenseMatrix> {
    if w.shape() != scores.shape() {
        return Err(LynxError::dim(format!(
            "weight is {}x{} but scores are {}x{}",
            w.rows(),
            w.cols(),
            scores.rows(),
            scores.cols()
        )));
    }
    group_mask(scores, pattern)?.apply(w)
}
