//! Blocked CPU kernels: dense GEMM, packed N:M SpMM, and the fused
//! sparsify -> pack -> multiply path with an optional low-rank residual.
//!
//! Every kernel walks row tiles, then column tiles, then k tiles, and inside
//! a k tile accumulates one output row segment in a fixed-width register
//! block. Per output element the products are summed in ascending `k`, so
//! the staged and fused paths produce the same bits.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LynxError, Result};
use crate::nm_format::{read_index, write_index, NMPattern, PackedNM, MAX_M};
use crate::sparsify::{
    check_activation, compensation_scale, group_energy, reduce_energies, row_energies,
    select_group, sparsify_activation, CompensationGranularity,
};
use crate::tensor::DenseMatrix;

const LANES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub tile_m: usize,
    pub tile_n: usize,
    pub tile_k: usize,
    pub parallel_rows: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            tile_m: 64,
            tile_n: 64,
            tile_k: 256,
            parallel_rows: false,
        }
    }
}

impl KernelConfig {
    pub fn parallel(mut self, on: bool) -> Self {
        self.parallel_rows = on;
        self
    }

    pub fn validate(&self, pattern: NMPattern) -> Result<()> {
        if self.tile_m == 0 || self.tile_n == 0 || self.tile_k == 0 {
            return Err(LynxError::config(format!(
                "tiles must be >= 1, got {self:?}"
            )));
        }
        if !self.tile_k.is_multiple_of(pattern.m()) {
            return Err(LynxError::config(format!(
                "tile_k {} is not a multiple of m={}",
                self.tile_k,
                pattern.m()
            )));
        }
        Ok(())
    }
}

/// Wall-clock split of one fused call, in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedTiming {
    pub sparsify_ns: u64,
    pub pack_ns: u64,
    pub multiply_ns: u64,
    pub total_ns: u64,
}

impl FusedTiming {
    /// Selection plus packing as a percentage of the total.
    pub fn sparse_cost_pct(&self) -> f64 {
        if self.total_ns == 0 {
            return 0.0;
        }
        100.0 * (self.sparsify_ns + self.pack_ns) as f64 / self.total_ns as f64
    }
}

fn ns(d: Duration) -> u64 {
    d.as_nanos().min(u64::MAX as u128) as u64
}

/// `y[j] += sum_e vs[e] * wt[ks[e]][j0 + j]` for one output row segment.
#[inline(always)]
fn accumulate_sparse(y: &mut [f32], wt: &[f32], ldw: usize, j0: usize, ks: &[u32], vs: &[f32]) {
    let width = y.len();
    let mut j = 0;
    while j + LANES <= width {
        let mut acc: [f32; LANES] = y[j..j + LANES].try_into().unwrap();
        for (&k, &v) in ks.iter().zip(vs) {
            let base = k as usize * ldw + j0 + j;
            let w: &[f32; LANES] = wt[base..base + LANES].try_into().unwrap();
            for t in 0..LANES {
                acc[t] += v * w[t];
            }
        }
        y[j..j + LANES].copy_from_slice(&acc);
        j += LANES;
    }
    if j < width {
        let rem = width - j;
        let mut acc = [0.0f32; LANES];
        acc[..rem].copy_from_slice(&y[j..]);
        for (&k, &v) in ks.iter().zip(vs) {
            let base = k as usize * ldw + j0 + j;
            let w = &wt[base..base + rem];
            for t in 0..rem {
                acc[t] += v * w[t];
            }
        }
        y[j..].copy_from_slice(&acc[..rem]);
    }
}

/// Dense counterpart of [`accumulate_sparse`] over `k0..k0 + xs.len()`.
#[inline(always)]
fn accumulate_dense(y: &mut [f32], wt: &[f32], ldw: usize, j0: usize, k0: usize, xs: &[f32]) {
    let width = y.len();
    let mut j = 0;
    while j + LANES <= width {
        let mut acc: [f32; LANES] = y[j..j + LANES].try_into().unwrap();
        for (dk, &v) in xs.iter().enumerate() {
            let base = (k0 + dk) * ldw + j0 + j;
            let w: &[f32; LANES] = wt[base..base + LANES].try_into().unwrap();
            for t in 0..LANES {
                acc[t] += v * w[t];
            }
        }
        y[j..j + LANES].copy_from_slice(&acc);
        j += LANES;
    }
    if j < width {
        let rem = width - j;
        let mut acc = [0.0f32; LANES];
        acc[..rem].copy_from_slice(&y[j..]);
        for (dk, &v) in xs.iter().enumerate() {
            let base = (k0 + dk) * ldw + j0 + j;
            let w = &wt[base..base + rem];
            for t in 0..rem {
                acc[t] += v * w[t];
            }
        }
        y[j..].copy_from_slice(&acc[..rem]);
    }
}

/// Packed operand for one row tile: `per_row` values and absolute column
/// indices per row.
struct TileOperand<'a> {
    rows: usize,
    per_row: usize,
    ks: &'a [u32],
    vals: &'a [f32],
}

/// Multiplies a decoded row tile into `out` (rows x D_out, row-major).
/// Returns the number of multiply-adds issued.
fn multiply_sparse_tile(
    t: &TileOperand<'_>,
    wt: &DenseMatrix,
    out: &mut [f32],
    cfg: &KernelConfig,
    pattern: NMPattern,
) -> u64 {
    let d_out = wt.cols();
    let step = cfg.tile_k / pattern.m() * pattern.n();
    let mut madds = 0u64;
    for j0 in (0..d_out).step_by(cfg.tile_n) {
        let j1 = (j0 + cfg.tile_n).min(d_out);
        for e0 in (0..t.per_row).step_by(step) {
            let e1 = (e0 + step).min(t.per_row);
            for r in 0..t.rows {
                let base = r * t.per_row;
                accumulate_sparse(
                    &mut out[r * d_out + j0..r * d_out + j1],
                    wt.data(),
                    d_out,
                    j0,
                    &t.ks[base + e0..base + e1],
                    &t.vals[base + e0..base + e1],
                );
                madds += ((e1 - e0) * (j1 - j0)) as u64;
            }
        }
    }
    madds
}

/// Expands bit-packed metadata rows into absolute column indices.
fn decode_indices(
    meta: &[u8],
    row_bytes: usize,
    rows: usize,
    groups: usize,
    pattern: NMPattern,
    ks: &mut Vec<u32>,
) {
    let (n, m, bits) = (pattern.n(), pattern.m(), pattern.index_bits());
    ks.clear();
    for r in 0..rows {
        let row_meta = &meta[r * row_bytes..(r + 1) * row_bytes];
        for g in 0..groups {
            for s in 0..n {
                let j = read_index(row_meta, g * n + s, bits);
                ks.push((g * m + j as usize) as u32);
            }
        }
    }
}

fn check_contraction(a_rows: usize, a_cols: usize, w: &DenseMatrix, what: &str) -> Result<()> {
    if a_cols != w.cols() {
        return Err(LynxError::dim(format!(
            "{what}: input is {a_rows}x{a_cols} but w is {}x{} (contraction needs equal D_in)",
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}

/// Runs `tile_fn` over row tiles of an `rows x d_out` output, optionally in
/// parallel. The closure receives the first row, the row count and the
/// output slice for that tile.
fn for_row_tiles<T: Send>(
    out: &mut [f32],
    rows: usize,
    d_out: usize,
    cfg: &KernelConfig,
    tile_fn: impl Fn(usize, usize, &mut [f32]) -> T + Sync + Send,
) -> Vec<T> {
    let chunk = cfg.tile_m * d_out;
    if cfg.parallel_rows {
        out.par_chunks_mut(chunk)
            .enumerate()
            .map(|(t, o)| {
                let i0 = t * cfg.tile_m;
                tile_fn(i0, (rows - i0).min(cfg.tile_m), o)
            })
            .collect()
    } else {
        out.chunks_mut(chunk)
            .enumerate()
            .map(|(t, o)| {
                let i0 = t * cfg.tile_m;
                tile_fn(i0, (rows - i0).min(cfg.tile_m), o)
            })
            .collect()
    }
}

/// Blocked dense `x * w^T`, the baseline the sparse kernels are measured
/// against. Returns the output and the multiply-add count.
pub fn dense_gemm_counted(
    x: &DenseMatrix,
    w: &DenseMatrix,
    cfg: &KernelConfig,
) -> Result<(DenseMatrix, u64)> {
    check_contraction(x.rows(), x.cols(), w, "dense gemm")?;
    if cfg.tile_m == 0 || cfg.tile_n == 0 || cfg.tile_k == 0 {
        return Err(LynxError::config(format!(
            "tiles must be >= 1, got {cfg:?}"
        )));
    }
    let wt = w.transpose();
    let (rows, k, d_out) = (x.rows(), x.cols(), w.rows());
    let mut out = DenseMatrix::zeros(rows, d_out);
    let counts = for_row_tiles(out.data_mut(), rows, d_out, cfg, |i0, nrows, o| {
        let mut madds = 0u64;
        for j0 in (0..d_out).step_by(cfg.tile_n) {
            let j1 = (j0 + cfg.tile_n).min(d_out);
            for k0 in (0..k).step_by(cfg.tile_k) {
                let k1 = (k0 + cfg.tile_k).min(k);
                for r in 0..nrows {
                    let xr = &x.row(i0 + r)[k0..k1];
                    accumulate_dense(
                        &mut o[r * d_out + j0..r * d_out + j1],
                        wt.data(),
                        d_out,
                        j0,
                        k0,
                        xr,
                    );
                    madds += ((k1 - k0) * (j1 - j0)) as u64;
                }
            }
        }
        madds
    });
    Ok((out, counts.into_iter().sum()))
}

pub fn dense_gemm(x: &DenseMatrix, w: &DenseMatrix, cfg: &KernelConfig) -> Result<DenseMatrix> {
    dense_gemm_counted(x, w, cfg).map(|(y, _)| y)
}

fn spmm_into(p: &PackedNM, wt: &DenseMatrix, out: &mut DenseMatrix, cfg: &KernelConfig) -> u64 {
    let pattern = p.pattern();
    let groups = p.groups_per_row();
    let per_row = groups * pattern.n();
    let row_bytes = p.meta_row_bytes();
    let d_out = wt.cols();
    let counts = for_row_tiles(out.data_mut(), p.rows(), d_out, cfg, |i0, nrows, o| {
        let mut ks = Vec::with_capacity(nrows * per_row);
        decode_indices(
            &p.meta()[i0 * row_bytes..],
            row_bytes,
            nrows,
            groups,
            pattern,
            &mut ks,
        );
        let tile = TileOperand {
            rows: nrows,
            per_row,
            ks: &ks,
            vals: &p.values()[i0 * per_row..(i0 + nrows) * per_row],
        };
        multiply_sparse_tile(&tile, wt, o, cfg, pattern)
    });
    counts.into_iter().sum()
}

/// Packed `p * w^T` with the multiply-add count.
pub fn spmm_counted(
    p: &PackedNM,
    w: &DenseMatrix,
    cfg: &KernelConfig,
) -> Result<(DenseMatrix, u64)> {
    check_contraction(p.rows(), p.cols(), w, "spmm")?;
    cfg.validate(p.pattern())?;
    p.ensure_valid()?;
    let wt = w.transpose();
    let mut out = DenseMatrix::zeros(p.rows(), w.rows());
    let madds = spmm_into(p, &wt, &mut out, cfg);
    Ok((out, madds))
}

pub fn spmm(p: &PackedNM, w: &DenseMatrix, cfg: &KernelConfig) -> Result<DenseMatrix> {
    spmm_counted(p, w, cfg).map(|(y, _)| y)
}

/// Result of a fused call.
#[derive(Debug, Clone)]
pub struct FusedOutput {
    pub y: DenseMatrix,
    pub timing: FusedTiming,
    pub madds: u64,
}

#[derive(Default)]
struct TileTimes {
    select: Duration,
    pack: Duration,
    multiply: Duration,
    madds: u64,
}

#[allow(clippy::too_many_arguments)]
fn fused_core(
    x: &DenseMatrix,
    w: &DenseMatrix,
    pattern: NMPattern,
    granularity: CompensationGranularity,
    eps: f32,
    cfg: &KernelConfig,
    init: Option<DenseMatrix>,
    start: Instant,
) -> Result<FusedOutput> {
    check_contraction(x.rows(), x.cols(), w, "fused sparse linear")?;
    check_activation(x, pattern, eps)?;
    cfg.validate(pattern)?;

    let t_stats = Instant::now();
    let tensor_scale = match granularity {
        CompensationGranularity::PerTensor => {
            let per_row: Vec<(f64, f64)> = if cfg.parallel_rows {
                (0..x.rows())
                    .into_par_iter()
                    .map(|i| row_energies(x.row(i), pattern))
                    .collect()
            } else {
                (0..x.rows())
                    .map(|i| row_energies(x.row(i), pattern))
                    .collect()
            };
            let (t, k) = reduce_energies(&per_row);
            compensation_scale(t, k, eps)
        }
        _ => 1.0,
    };
    let stats = t_stats.elapsed();

    let t_prep = Instant::now();
    let wt = w.transpose();
    let prep = t_prep.elapsed();

    let (n, m, bits) = (pattern.n(), pattern.m(), pattern.index_bits());
    let groups = x.cols() / m;
    let per_row = groups * n;
    let row_bytes = crate::nm_format::meta_row_bytes(x.cols(), pattern);
    let d_out = w.rows();
    let mut out = match init {
        Some(y) => y,
        None => DenseMatrix::zeros(x.rows(), d_out),
    };

    let t_loop = Instant::now();
    let tiles = for_row_tiles(out.data_mut(), x.rows(), d_out, cfg, |i0, nrows, o| {
        let mut tt = TileTimes::default();

        let t0 = Instant::now();
        let mut sel = vec![0u8; nrows * per_row];
        let mut scales = vec![tensor_scale; nrows * groups];
        let mut idx = [0u8; MAX_M as usize];
        for r in 0..nrows {
            let row = x.row(i0 + r);
            let (mut row_t, mut row_k) = (0.0f64, 0.0f64);
            for (g, group) in row.chunks_exact(m).enumerate() {
                select_group(group, n, &mut idx);
                sel[r * per_row + g * n..r * per_row + (g + 1) * n].copy_from_slice(&idx[..n]);
                match granularity {
                    CompensationGranularity::PerGroup => {
                        let (t, k) = group_energy(group, &idx[..n]);
                        scales[r * groups + g] = compensation_scale(t, k, eps);
                    }
                    CompensationGranularity::PerRow => {
                        let (t, k) = group_energy(group, &idx[..n]);
                        row_t += t;
                        row_k += k;
                    }
                    _ => {}
                }
            }
            if granularity == CompensationGranularity::PerRow {
                let s = compensation_scale(row_t, row_k, eps);
                scales[r * groups..(r + 1) * groups].fill(s);
            }
        }
        tt.select = t0.elapsed();

        let t1 = Instant::now();
        let mut vals = vec![0.0f32; nrows * per_row];
        let mut meta = vec![0u8; nrows * row_bytes];
        let scaled = granularity != CompensationGranularity::None;
        for r in 0..nrows {
            let row = x.row(i0 + r);
            let row_meta = &mut meta[r * row_bytes..(r + 1) * row_bytes];
            for g in 0..groups {
                let s = scales[r * groups + g];
                for slot in 0..n {
                    let e = g * n + slot;
                    let j = sel[r * per_row + e];
                    let v = row[g * m + j as usize];
                    vals[r * per_row + e] = if scaled { v * s } else { v };
                    write_index(row_meta, e, bits, j);
                }
            }
        }
        tt.pack = t1.elapsed();

        let t2 = Instant::now();
        let mut ks = Vec::with_capacity(nrows * per_row);
        decode_indices(&meta, row_bytes, nrows, groups, pattern, &mut ks);
        let tile = TileOperand {
            rows: nrows,
            per_row,
            ks: &ks,
            vals: &vals,
        };
        tt.madds = multiply_sparse_tile(&tile, &wt, o, cfg, pattern);
        tt.multiply = t2.elapsed();
        tt
    });
    let loop_wall = t_loop.elapsed();

    let mut select: Duration = tiles.iter().map(|t| t.select).sum();
    let mut pack: Duration = tiles.iter().map(|t| t.pack).sum();
    let mut multiply: Duration = tiles.iter().map(|t| t.multiply).sum();
    if cfg.parallel_rows {
        // Per-tile times are summed across threads; rescale them to the
        // wall-clock span of the tile loop.
        let busy = (select + pack + multiply).as_secs_f64();
        if busy > 0.0 {
            let f = loop_wall.as_secs_f64() / busy;
            select = select.mul_f64(f);
            pack = pack.mul_f64(f);
            multiply = multiply.mul_f64(f);
        }
    }
    let madds = tiles.iter().map(|t| t.madds).sum();
    let total = start.elapsed();
    let timing = FusedTiming {
        sparsify_ns: ns(stats + select),
        pack_ns: ns(pack),
        multiply_ns: ns(prep + multiply),
        total_ns: ns(total),
    };
    Ok(FusedOutput {
        y: out,
        timing,
        madds,
    })
}

/// Sparsifies, packs and multiplies one row tile at a time.
pub fn fused_sparse_linear_full(
    x: &DenseMatrix,
    w: &DenseMatrix,
    pattern: NMPattern,
    granularity: CompensationGranularity,
    eps: f32,
    cfg: &KernelConfig,
) -> Result<FusedOutput> {
    fused_core(x, w, pattern, granularity, eps, cfg, None, Instant::now())
}

pub fn fused_sparse_linear(
    x: &DenseMatrix,
    w: &DenseMatrix,
    pattern: NMPattern,
    granularity: CompensationGranularity,
    eps: f32,
    cfg: &KernelConfig,
) -> Result<(DenseMatrix, FusedTiming)> {
    fused_sparse_linear_full(x, w, pattern, granularity, eps, cfg).map(|o| (o.y, o.timing))
}

fn check_lora_shapes(
    x: &DenseMatrix,
    w: &DenseMatrix,
    la: &DenseMatrix,
    lb: &DenseMatrix,
) -> Result<()> {
    let r = lb.rows();
    if lb.cols() != x.cols() || la.rows() != w.rows() || la.cols() != r {
        return Err(LynxError::dim(format!(
            "LoRA shapes do not chain: x {}x{}, w {}x{}, lA {}x{}, lB {}x{}",
            x.rows(),
            x.cols(),
            w.rows(),
            w.cols(),
            la.rows(),
            la.cols(),
            lb.rows(),
            lb.cols()
        )));
    }
    Ok(())
}

/// `S(x) w^T + (x lB^T) lA^T`: the low-rank branch runs on the dense input
/// and the sparse product is accumulated into it.
#[allow(clippy::too_many_arguments)]
pub fn fused_sparse_lora_linear_full(
    x: &DenseMatrix,
    w: &DenseMatrix,
    la: &DenseMatrix,
    lb: &DenseMatrix,
    pattern: NMPattern,
    granularity: CompensationGranularity,
    eps: f32,
    cfg: &KernelConfig,
) -> Result<FusedOutput> {
    check_contraction(x.rows(), x.cols(), w, "fused sparse lora linear")?;
    check_lora_shapes(x, w, la, lb)?;
    let start = Instant::now();
    let xr = dense_gemm(x, lb, cfg)?;
    let yr = dense_gemm(&xr, la, cfg)?;
    fused_core(x, w, pattern, granularity, eps, cfg, Some(yr), start)
}

#[allow(clippy::too_many_arguments)]
pub fn fused_sparse_lora_linear(
    x: &DenseMatrix,
    w: &DenseMatrix,
    la: &DenseMatrix,
    lb: &DenseMatrix,
    pattern: NMPattern,
    granularity: CompensationGranularity,
    eps: f32,
    cfg: &KernelConfig,
) -> Result<DenseMatrix> {
    fused_sparse_lora_linear_full(x, w, la, lb, pattern, granularity, eps, cfg).map(|o| o.y)
}

/// The unfused pipeline: materialize `S(x)`, pack it, then run [`spmm`].
pub fn staged_sparse_linear(
    x: &DenseMatrix,
    w: &DenseMatrix,
    pattern: NMPattern,
    granularity: CompensationGranularity,
    eps: f32,
    cfg: &KernelConfig,
) -> Result<FusedOutput> {
    check_contraction(x.rows(), x.cols(), w, "staged sparse linear")?;
    cfg.validate(pattern)?;
    let start = Instant::now();
    let (_, sx) = sparsify_activation(x, pattern, granularity, eps)?;
    let t_pack = Instant::now();
    let p = crate::nm_format::pack(&sx, pattern)?;
    let t_mul = Instant::now();
    let (y, madds) = spmm_counted(&p, w, cfg)?;
    let end = Instant::now();
    let timing = FusedTiming {
        sparsify_ns: ns(t_pack - start),
        pack_ns: ns(t_mul - t_pack),
        multiply_ns: ns(end - t_mul),
        total_ns: ns(end - start),
    };
    Ok(FusedOutput { y, timing, madds })
}
