//! Packed N:M storage: kept values plus bit-packed in-group indices.
//!
//! Each index takes `ceil(log2 m)` bits. Indices of a group are written
//! least-significant first, groups follow each other from the low bits of a
//! byte upward, and every row starts on a fresh byte.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LynxError, Result};
use crate::tensor::DenseMatrix;

pub const MAX_M: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NMPattern {
    n: u8,
    m: u8,
}

impl NMPattern {
    pub const TWO_FOUR: NMPattern = NMPattern { n: 2, m: 4 };

    pub fn new(n: u8, m: u8) -> Result<Self> {
        if n == 0 || n >= m || m > MAX_M {
            return Err(LynxError::config(format!(
                "invalid pattern {n}:{m}: need 1 <= n < m <= {MAX_M}"
            )));
        }
        Ok(Self { n, m })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n as usize
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m as usize
    }

    /// Bits per stored index, `ceil(log2 m)`.
    #[inline]
    pub fn index_bits(&self) -> usize {
        (usize::BITS - (self.m as usize - 1).leading_zeros()) as usize
    }

    /// Kept fraction `n / m`.
    pub fn density(&self) -> f64 {
        self.n as f64 / self.m as f64
    }

    pub(crate) fn check_width(&self, cols: usize) -> Result<()> {
        if !cols.is_multiple_of(self.m()) {
            return Err(LynxError::dim(format!(
                "width {cols} is not a multiple of m={} for pattern {self}",
                self.m
            )));
        }
        Ok(())
    }
}

impl Default for NMPattern {
    fn default() -> Self {
        Self::TWO_FOUR
    }
}

impl fmt::Display for NMPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n, self.m)
    }
}

impl FromStr for NMPattern {
    type Err = LynxError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || LynxError::config(format!("bad pattern '{s}': expected N:M, e.g. 2:4"));
        let (n, m) = s.trim().split_once(':').ok_or_else(bad)?;
        let n = n.trim().parse::<u8>().map_err(|_| bad())?;
        let m = m.trim().parse::<u8>().map_err(|_| bad())?;
        NMPattern::new(n, m)
    }
}

impl TryFrom<String> for NMPattern {
    type Error = LynxError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NMPattern> for String {
    fn from(p: NMPattern) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedNM {
    rows: usize,
    cols: usize,
    pattern: NMPattern,
    values: Vec<f32>,
    meta: Vec<u8>,
}

/// Bytes of metadata per row for the given width and pattern.
pub fn meta_row_bytes(cols: usize, pattern: NMPattern) -> usize {
    (cols / pattern.m() * pattern.n() * pattern.index_bits()).div_ceil(8)
}

#[inline]
pub(crate) fn write_index(row_meta: &mut [u8], slot: usize, bits: usize, value: u8) {
    let mut bit = slot * bits;
    let mut v = value as usize;
    let mut left = bits;
    while left > 0 {
        let byte = bit / 8;
        let off = bit % 8;
        let take = left.min(8 - off);
        let mask = ((1usize << take) - 1) as u8;
        row_meta[byte] = (row_meta[byte] & !(mask << off)) | (((v as u8) & mask) << off);
        v >>= take;
        bit += take;
        left -= take;
    }
}

#[inline]
pub(crate) fn read_index(row_meta: &[u8], slot: usize, bits: usize) -> u8 {
    let mut bit = slot * bits;
    let mut out = 0usize;
    let mut got = 0;
    while got < bits {
        let byte = bit / 8;
        let off = bit % 8;
        let take = (bits - got).min(8 - off);
        let part = (row_meta[byte] as usize >> off) & ((1 << take) - 1);
        out |= part << got;
        got += take;
        bit += take;
    }
    out as u8
}

/// Fills `idx` with the in-group indices to store for one group: the
/// nonzero positions ascending, padded with the lowest-index zero positions.
/// Returns the nonzero count; callers reject counts above `n`.
#[inline]
pub(crate) fn group_indices(group: &[f32], n: usize, idx: &mut [u8]) -> usize {
    let nnz = group.iter().filter(|&&v| v != 0.0).count();
    if nnz > n {
        return nnz;
    }
    let mut fill = 0;
    let mut zeros_needed = n - nnz;
    for (j, &v) in group.iter().enumerate() {
        if v != 0.0 || zeros_needed > 0 {
            if v == 0.0 {
                zeros_needed -= 1;
            }
            idx[fill] = j as u8;
            fill += 1;
            if fill == n {
                break;
            }
        }
    }
    nnz
}

/// What went wrong in a [`PackedNM`], as reported by [`PackedNM::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum ViolationKind {
    NonAscendingIndices { previous: u8, next: u8 },
    IndexOutOfRange { index: u8, m: usize },
    WidthNotMultiple { cols: usize, m: usize },
    ValuesLength { expected: usize, actual: usize },
    MetaLength { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub row: Option<usize>,
    pub group: Option<usize>,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl Violation {
    pub fn rule(&self) -> &'static str {
        match self.kind {
            ViolationKind::NonAscendingIndices { .. } => "non-ascending indices",
            ViolationKind::IndexOutOfRange { .. } => "index out of range",
            ViolationKind::WidthNotMultiple { .. } => "width not a multiple of m",
            ViolationKind::ValuesLength { .. } => "values length",
            ViolationKind::MetaLength { .. } => "metadata length",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let loc = |v: Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
        write!(
            f,
            "row {}, group {}: {}",
            loc(self.row),
            loc(self.group),
            self.rule()
        )?;
        match &self.kind {
            ViolationKind::NonAscendingIndices { previous, next } => {
                write!(f, " ({previous} then {next})")
            }
            ViolationKind::IndexOutOfRange { index, m } => write!(f, " ({index} >= {m})"),
            ViolationKind::WidthNotMultiple { cols, m } => write!(f, " ({cols} % {m} != 0)"),
            ViolationKind::ValuesLength { expected, actual }
            | ViolationKind::MetaLength { expected, actual } => {
                write!(f, " (expected {expected}, got {actual})")
            }
        }
    }
}

impl PackedNM {
    /// Assembles a packed matrix without checking it; see [`PackedNM::validate`].
    pub fn from_raw_parts(
        rows: usize,
        cols: usize,
        pattern: NMPattern,
        values: Vec<f32>,
        meta: Vec<u8>,
    ) -> Self {
        Self {
            rows,
            cols,
            pattern,
            values,
            meta,
        }
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
    pub fn pattern(&self) -> NMPattern {
        self.pattern
    }

    #[inline]
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn meta(&self) -> &[u8] {
        &self.meta
    }

    #[inline]
    pub fn groups_per_row(&self) -> usize {
        self.cols / self.pattern.m()
    }

    #[inline]
    pub fn meta_row_bytes(&self) -> usize {
        meta_row_bytes(self.cols, self.pattern)
    }

    #[inline]
    pub fn row_values(&self, i: usize) -> &[f32] {
        let w = self.groups_per_row() * self.pattern.n();
        &self.values[i * w..(i + 1) * w]
    }

    #[inline]
    pub fn row_meta(&self, i: usize) -> &[u8] {
        let b = self.meta_row_bytes();
        &self.meta[i * b..(i + 1) * b]
    }

    /// Stored in-group index for `slot` (0..n) of `group` in row `i`.
    pub fn index(&self, i: usize, group: usize, slot: usize) -> u8 {
        read_index(
            self.row_meta(i),
            group * self.pattern.n() + slot,
            self.pattern.index_bits(),
        )
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let (n, m) = (self.pattern.n(), self.pattern.m());
        if !self.cols.is_multiple_of(m) {
            out.push(Violation {
                row: None,
                group: None,
                kind: ViolationKind::WidthNotMultiple { cols: self.cols, m },
            });
            return out;
        }
        let groups = self.cols / m;
        let expected_values = self.rows * groups * n;
        if self.values.len() != expected_values {
            out.push(Violation {
                row: None,
                group: None,
                kind: ViolationKind::ValuesLength {
                    expected: expected_values,
                    actual: self.values.len(),
                },
            });
        }
        let expected_meta = self.rows * self.meta_row_bytes();
        if self.meta.len() != expected_meta {
            out.push(Violation {
                row: None,
                group: None,
                kind: ViolationKind::MetaLength {
                    expected: expected_meta,
                    actual: self.meta.len(),
                },
            });
            return out;
        }
        for i in 0..self.rows {
            for g in 0..groups {
                let mut prev: Option<u8> = None;
                for s in 0..n {
                    let idx = self.index(i, g, s);
                    if idx as usize >= m {
                        out.push(Violation {
                            row: Some(i),
                            group: Some(g),
                            kind: ViolationKind::IndexOutOfRange { index: idx, m },
                        });
                    }
                    if let Some(p) = prev {
                        if idx <= p {
                            out.push(Violation {
                                row: Some(i),
                                group: Some(g),
                                kind: ViolationKind::NonAscendingIndices {
                                    previous: p,
                                    next: idx,
                                },
                            });
                        }
                    }
                    prev = Some(idx);
                }
            }
        }
        out
    }

    pub(crate) fn ensure_valid(&self) -> Result<()> {
        match self.validate().first() {
            None => Ok(()),
            Some(v) => Err(LynxError::format(format!("corrupted packed matrix: {v}"))),
        }
    }
}

pub fn pack(masked: &DenseMatrix, pattern: NMPattern) -> Result<PackedNM> {
    pattern.check_width(masked.cols())?;
    let (n, m, bits) = (pattern.n(), pattern.m(), pattern.index_bits());
    let groups = masked.cols() / m;
    let row_bytes = meta_row_bytes(masked.cols(), pattern);
    let mut values = Vec::with_capacity(masked.rows() * groups * n);
    let mut meta = vec![0u8; masked.rows() * row_bytes];
    let mut idx = [0u8; MAX_M as usize];
    for i in 0..masked.rows() {
        let row = masked.row(i);
        let row_meta = &mut meta[i * row_bytes..(i + 1) * row_bytes];
        for g in 0..groups {
            let group = &row[g * m..(g + 1) * m];
            let count = group_indices(group, n, &mut idx);
            if count > n {
                return Err(LynxError::PatternViolation {
                    row: i,
                    group: g,
                    count,
                    n,
                });
            }
            for (s, &j) in idx[..n].iter().enumerate() {
                values.push(group[j as usize]);
                write_index(row_meta, g * n + s, bits, j);
            }
        }
    }
    Ok(PackedNM {
        rows: masked.rows(),
        cols: masked.cols(),
        pattern,
        values,
        meta,
    })
}

pub fn unpack(p: &PackedNM) -> Result<DenseMatrix> {
    p.ensure_valid()?;
    let (n, m) = (p.pattern.n(), p.pattern.m());
    let mut out = DenseMatrix::zeros(p.rows, p.cols);
    for i in 0..p.rows {
        let vals = p.row_values(i);
        let row = out.row_mut(i);
        for g in 0..p.groups_per_row() {
            for s in 0..n {
                let j = p.index(i, g, s) as usize;
                row[g * m + j] = vals[g * n + s];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f32]) -> DenseMatrix {
        DenseMatrix::from_rows(&[v]).unwrap()
    }

    #[test]
    fn pattern_basics() {
        assert_eq!(NMPattern::default(), NMPattern::new(2, 4).unwrap());
        assert_eq!(NMPattern::TWO_FOUR.index_bits(), 2);
        assert_eq!(NMPattern::new(1, 2).unwrap().index_bits(), 1);
        assert_eq!(NMPattern::new(4, 8).unwrap().index_bits(), 3);
        assert_eq!(NMPattern::new(2, 6).unwrap().index_bits(), 3);
        assert!(NMPattern::new(4, 4).is_err());
        assert!(NMPattern::new(0, 4).is_err());
        assert!(NMPattern::new(2, 9).is_err());
        assert_eq!("2:4".parse::<NMPattern>().unwrap(), NMPattern::TWO_FOUR);
        let err = "2-4".parse::<NMPattern>().unwrap_err().to_string();
        assert!(err.contains("N:M"), "{err}");
        assert_eq!(
            serde_json::to_string(&NMPattern::TWO_FOUR).unwrap(),
            "\"2:4\""
        );
    }

    #[test]
    fn pack_examples() {
        let p = pack(&row(&[0., 5., 0., -7.]), NMPattern::TWO_FOUR).unwrap();
        assert_eq!(p.values(), &[5., -7.]);
        assert_eq!(p.meta(), &[13]);

        let p = pack(&row(&[1., 2., 0., 0.]), NMPattern::TWO_FOUR).unwrap();
        assert_eq!(p.values(), &[1., 2.]);
        assert_eq!(p.meta(), &[4]);

        let p = pack(&row(&[0.; 4]), NMPattern::TWO_FOUR).unwrap();
        assert_eq!(p.values(), &[0., 0.]);
        assert_eq!((p.index(0, 0, 0), p.index(0, 0, 1)), (0, 1));
        assert_eq!(unpack(&p).unwrap(), row(&[0.; 4]));
    }

    #[test]
    fn single_nonzero_pads_with_lowest_zero() {
        let p = pack(&row(&[0., 0., 9., 0.]), NMPattern::TWO_FOUR).unwrap();
        assert_eq!((p.index(0, 0, 0), p.index(0, 0, 1)), (0, 2));
        assert_eq!(p.values(), &[0., 9.]);
        let p = pack(&row(&[9., 0., 0., 0.]), NMPattern::TWO_FOUR).unwrap();
        assert_eq!((p.index(0, 0, 0), p.index(0, 0, 1)), (0, 1));
    }

    #[test]
    fn second_group_uses_high_nibble() {
        let p = pack(
            &row(&[0., 5., 0., -7., 1., 2., 0., 0.]),
            NMPattern::TWO_FOUR,
        )
        .unwrap();
        assert_eq!(p.meta(), &[13 | (4 << 4)]);
    }

    #[test]
    fn pattern_violation_reports_location() {
        let x = DenseMatrix::from_rows(&[[1., 0., 0., 0.], [1., 1., 1., 0.]]).unwrap();
        match pack(&x, NMPattern::TWO_FOUR) {
            Err(LynxError::PatternViolation {
                row,
                group,
                count,
                n,
            }) => {
                assert_eq!((row, group, count, n), (1, 0, 3, 2))
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            pack(&row(&[1., 0., 0.]), NMPattern::TWO_FOUR),
            Err(LynxError::Dimension(_))
        ));
    }

    #[test]
    fn unpack_example() {
        let p = PackedNM::from_raw_parts(1, 4, NMPattern::TWO_FOUR, vec![5., -7.], vec![13]);
        assert_eq!(unpack(&p).unwrap(), row(&[0., 5., 0., -7.]));
    }

    #[test]
    fn validate_detects_corruption() {
        let fresh = pack(&row(&[0., 5., 0., -7.]), NMPattern::TWO_FOUR).unwrap();
        assert!(fresh.validate().is_empty());

        // indices (3, 1): 3 | (1 << 2)
        let bad =
            PackedNM::from_raw_parts(1, 4, NMPattern::TWO_FOUR, vec![1., 2.], vec![3 | (1 << 2)]);
        let v = bad.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule(), "non-ascending indices");
        assert_eq!((v[0].row, v[0].group), (Some(0), Some(0)));
        assert!(matches!(unpack(&bad), Err(LynxError::Format(_))));

        // With m = 6 the 3-bit field can hold 6 and 7.
        let p36 = NMPattern::new(1, 6).unwrap();
        let bad = PackedNM::from_raw_parts(1, 6, p36, vec![1.], vec![7]);
        let v = bad.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule(), "index out of range");

        let short = PackedNM::from_raw_parts(1, 4, NMPattern::TWO_FOUR, vec![1.], vec![4]);
        assert_eq!(short.validate()[0].rule(), "values length");
    }

    #[test]
    fn storage_halving_at_two_four() {
        let x = DenseMatrix::from_fn(3, 16, |i, j| if (i + j) % 2 == 0 { 1.0 } else { 0.0 });
        let p = pack(&x, NMPattern::TWO_FOUR).unwrap();
        assert_eq!(p.values().len() * 2, 3 * 16);
        assert_eq!(p.meta().len() * 8, 3 * (16 / 4) * 4);
    }

    #[test]
    fn bit_helpers_roundtrip_across_byte_boundaries() {
        let mut buf = vec![0u8; 3];
        for slot in 0..8 {
            write_index(&mut buf, slot, 3, (slot as u8 * 3) % 8);
        }
        for slot in 0..8 {
            assert_eq!(read_index(&buf, slot, 3), (slot as u8 * 3) % 8);
        }
    }
}
