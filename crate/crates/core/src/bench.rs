//! Timing harness for the dense, staged and fused kernels.
//!
//! CPU wall-clock numbers are not comparable to GPU tables; the harness
//! reports the same derived quantities (speedup over dense, sparse-cost
//! share) so the tables line up structurally.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LynxError, Result};
use crate::nm_format::NMPattern;
use crate::sparsify::CompensationGranularity;
use crate::spmm::{
    dense_gemm_counted, fused_sparse_linear_full, fused_sparse_lora_linear_full,
    staged_sparse_linear, FusedOutput, FusedTiming, KernelConfig,
};
use crate::tensor::{sample, DenseMatrix, RandomSpec, RNG_ALGORITHM};

pub const MIN_REPEATS: usize = 3;

/// Medians shorter than this many timer ticks trigger extra repeats.
const RESOLUTION_FACTOR: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    /// Activation rows.
    pub m: usize,
    /// Output features.
    pub n: usize,
    /// Contraction width.
    pub k: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub pattern: NMPattern,
    pub granularity: CompensationGranularity,
    pub seed: u64,
}

impl BenchCase {
    pub fn new(m: usize, n: usize, k: usize, seed: u64) -> Self {
        Self {
            m,
            n,
            k,
            repeats: 5,
            warmup: 2,
            pattern: NMPattern::TWO_FOUR,
            granularity: CompensationGranularity::PerTensor,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.k == 0 {
            return Err(LynxError::config(format!(
                "empty bench shape {}x{}x{}",
                self.m, self.n, self.k
            )));
        }
        self.pattern.check_width(self.k)?;
        if self.repeats < MIN_REPEATS {
            return Err(LynxError::config(format!(
                "repeats must be >= {MIN_REPEATS}, got {}",
                self.repeats
            )));
        }
        Ok(())
    }
}

/// Named shape grids; every dimension is divided by `scale`.
pub fn preset_cases(name: &str, scale: usize, seed: u64) -> Result<Vec<BenchCase>> {
    let shapes: &[(usize, usize)] = match name {
        "qwen-shapes" => &[(4096, 3072), (4096, 12288)],
        "table5" => &[
            (2048, 3072),
            (4096, 3072),
            (8192, 3072),
            (2048, 12288),
            (4096, 12288),
            (8192, 12288),
        ],
        _ => {
            return Err(LynxError::config(format!(
                "unknown bench preset '{name}': expected qwen-shapes or table5"
            )))
        }
    };
    if scale == 0 {
        return Err(LynxError::config("scale must be >= 1"));
    }
    shapes
        .iter()
        .map(|&(mn, k)| {
            if mn % scale != 0 || k % scale != 0 {
                return Err(LynxError::config(format!(
                    "scale {scale} does not divide {mn}x{k}"
                )));
            }
            let c = BenchCase::new(mn / scale, mn / scale, k / scale, seed);
            c.validate()?;
            Ok(c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub case: BenchCase,
    pub dense_ns: u64,
    pub staged_sparse_ns: u64,
    pub fused_sparse_ns: u64,
    pub fused_lora_ns: u64,
    /// Selection plus packing share of the fused total, in percent.
    pub sparse_cost_pct: f64,
    /// The same share for the staged pipeline.
    pub staged_sparse_cost_pct: f64,
    pub speedup: f64,
    pub madd_ratio: f64,
    pub dense_madds: u64,
    pub sparse_madds: u64,
    pub repeats_used: usize,
    pub fused_timing: FusedTiming,
    pub staged_timing: FusedTiming,
    /// SHA-256 over the fused output bytes.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub cores: usize,
    pub threads: usize,
    pub cpu_model: Option<String>,
    pub governor: Option<String>,
    pub mode: String,
}

impl Environment {
    pub fn snapshot(parallel: bool) -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        });
        let governor =
            std::fs::read_to_string("/sys/devices/system/cpu/cpu0/cpufreq/scaling_governor")
                .ok()
                .map(|s| s.trim().to_string());
        Self {
            cores: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            threads: if parallel {
                rayon::current_num_threads()
            } else {
                1
            },
            cpu_model,
            governor,
            mode: if parallel {
                "multi-threaded"
            } else {
                "single-threaded"
            }
            .to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub note: String,
    pub rng: String,
    pub environment: Environment,
    pub kernel: KernelConfig,
    pub lora_rank: usize,
    pub rows: Vec<BenchRow>,
    pub warnings: Vec<String>,
}

/// Smallest observable nonzero step of [`Instant`].
fn timer_resolution_ns() -> u64 {
    let mut best = u64::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_nanos() as u64);
    }
    best.max(1)
}

struct Sampled<T> {
    median_ns: u64,
    median_value: T,
}

/// Runs `f` `warmup + repeats` times and keeps the median-duration result.
fn measure<T>(
    warmup: usize,
    repeats: usize,
    mut f: impl FnMut() -> Result<T>,
) -> Result<Sampled<T>> {
    for _ in 0..warmup {
        f()?;
    }
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        let v = f()?;
        runs.push((t.elapsed().as_nanos() as u64, v));
    }
    runs.sort_by_key(|r| r.0);
    let (median_ns, median_value) = runs.swap_remove(repeats / 2);
    Ok(Sampled {
        median_ns,
        median_value,
    })
}

pub fn checksum(m: &DenseMatrix) -> String {
    Sha256::digest(m.to_le_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Deterministic inputs for a case: `(x, w, lA, lB)`.
pub fn case_inputs(
    case: &BenchCase,
    lora_rank: usize,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix, DenseMatrix)> {
    let x = sample(
        &RandomSpec::spike_slab(0.1, 0.01, 1.0, case.seed),
        case.m,
        case.k,
    )?;
    let w = sample(
        &RandomSpec::gaussian(0.0, 1.0 / (case.k as f64).sqrt(), case.seed.wrapping_add(1)),
        case.n,
        case.k,
    )?;
    let r = lora_rank.max(1);
    let la = sample(
        &RandomSpec::gaussian(0.0, 1e-3, case.seed.wrapping_add(2)),
        case.n,
        r,
    )?;
    let lb = sample(
        &RandomSpec::gaussian(0.0, 1e-3, case.seed.wrapping_add(3)),
        r,
        case.k,
    )?;
    Ok((x, w, la, lb))
}

pub fn run_case(
    case: &BenchCase,
    cfg: &KernelConfig,
    lora_rank: usize,
    warnings: &mut Vec<String>,
) -> Result<BenchRow> {
    case.validate()?;
    cfg.validate(case.pattern)?;
    let (x, w, la, lb) = case_inputs(case, lora_rank)?;
    let (p, g, eps) = (case.pattern, case.granularity, crate::DEFAULT_EPS);
    let resolution = timer_resolution_ns();

    let mut repeats = case.repeats;
    loop {
        let dense = measure(case.warmup, repeats, || dense_gemm_counted(&x, &w, cfg))?;
        let staged = measure(case.warmup, repeats, || {
            staged_sparse_linear(&x, &w, p, g, eps, cfg)
        })?;
        let fused = measure(case.warmup, repeats, || {
            fused_sparse_linear_full(&x, &w, p, g, eps, cfg)
        })?;
        let lora = measure(case.warmup, repeats, || {
            fused_sparse_lora_linear_full(&x, &w, &la, &lb, p, g, eps, cfg)
        })?;
        let shortest = dense.median_ns.min(fused.median_ns).min(staged.median_ns);
        if shortest < RESOLUTION_FACTOR * resolution && repeats < case.repeats * 16 {
            warnings.push(format!(
                "{}x{}x{}: median {shortest} ns is within {RESOLUTION_FACTOR}x of the {resolution} ns timer resolution; raising repeats to {}",
                case.m,
                case.n,
                case.k,
                repeats * 2
            ));
            repeats *= 2;
            continue;
        }
        let (_, dense_madds) = dense.median_value;
        let FusedOutput {
            y: fused_y,
            timing: fused_timing,
            madds: sparse_madds,
        } = fused.median_value;
        let staged_timing = staged.median_value.timing;
        return Ok(BenchRow {
            case: *case,
            dense_ns: dense.median_ns,
            staged_sparse_ns: staged.median_ns,
            fused_sparse_ns: fused.median_ns,
            fused_lora_ns: lora.median_ns,
            sparse_cost_pct: fused_timing.sparse_cost_pct(),
            staged_sparse_cost_pct: staged_timing.sparse_cost_pct(),
            speedup: dense.median_ns as f64 / fused.median_ns.max(1) as f64,
            madd_ratio: sparse_madds as f64 / dense_madds as f64,
            dense_madds,
            sparse_madds,
            repeats_used: repeats,
            fused_timing,
            staged_timing,
            checksum: checksum(&fused_y),
        });
    }
}

pub fn run_bench(cases: &[BenchCase], cfg: &KernelConfig, lora_rank: usize) -> Result<BenchReport> {
    let mut warnings = Vec::new();
    let rows = cases
        .iter()
        .map(|c| run_case(c, cfg, lora_rank, &mut warnings))
        .collect::<Result<Vec<_>>>()?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok(BenchReport {
        note: "CPU wall-clock timings, not comparable to GPU kernel tables; compare the speedup and sparse-cost columns".into(),
        rng: RNG_ALGORITHM.into(),
        environment: Environment::snapshot(cfg.parallel_rows),
        kernel: *cfg,
        lora_rank,
        rows,
        warnings,
    })
}

#[derive(Serialize)]
struct CsvRow {
    m: usize,
    n: usize,
    k: usize,
    pattern: String,
    dense_ms: f64,
    staged_ms: f64,
    fused_ms: f64,
    fused_lora_ms: f64,
    speedup: f64,
    sparse_cost_pct: f64,
    staged_sparse_cost_pct: f64,
    madd_ratio: f64,
}

pub fn write_csv<W: Write>(w: W, rows: &[BenchRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let ms = |ns: u64| ns as f64 / 1e6;
    for r in rows {
        out.serialize(CsvRow {
            m: r.case.m,
            n: r.case.n,
            k: r.case.k,
            pattern: r.case.pattern.to_string(),
            dense_ms: ms(r.dense_ns),
            staged_ms: ms(r.staged_sparse_ns),
            fused_ms: ms(r.fused_sparse_ns),
            fused_lora_ms: ms(r.fused_lora_ns),
            speedup: r.speedup,
            sparse_cost_pct: r.sparse_cost_pct,
            staged_sparse_cost_pct: r.staged_sparse_cost_pct,
            madd_ratio: r.madd_ratio,
        })
        .map_err(|e| LynxError::format(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_scale_down() {
        let cases = preset_cases("qwen-shapes", 4, 1).unwrap();
        assert_eq!(cases.len(), 2);
        assert_eq!((cases[0].m, cases[0].n, cases[0].k), (1024, 1024, 768));
        assert_eq!(cases[1].k, 3072);
        assert!(preset_cases("nope", 4, 1).is_err());
        assert!(preset_cases("table5", 7, 1).is_err());
    }

    #[test]
    fn small_case_row_is_consistent() {
        let case = BenchCase {
            repeats: 3,
            warmup: 1,
            ..BenchCase::new(32, 24, 64, 5)
        };
        let mut warnings = Vec::new();
        let row = run_case(&case, &KernelConfig::default(), 4, &mut warnings).unwrap();
        assert_eq!(row.madd_ratio, 0.5);
        assert!((0.0..=100.0).contains(&row.sparse_cost_pct));
        let recomputed = row.dense_ns as f64 / row.fused_sparse_ns as f64;
        assert!((row.speedup - recomputed).abs() < 1e-12);

        let (x, w, _, _) = case_inputs(&case, 4).unwrap();
        let y = fused_sparse_linear_full(
            &x,
            &w,
            case.pattern,
            case.granularity,
            crate::DEFAULT_EPS,
            &KernelConfig::default(),
        )
        .unwrap()
        .y;
        assert_eq!(checksum(&y), row.checksum);
    }

    #[test]
    fn too_few_repeats_rejected() {
        let case = BenchCase {
            repeats: 2,
            ..BenchCase::new(4, 4, 8, 1)
        };
        assert!(case.validate().is_err());
    }
}
