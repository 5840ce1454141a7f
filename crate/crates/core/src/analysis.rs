//! Error metrics, value histograms, layer sweeps and method comparisons.

use std::io::Write;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LynxError, Result};
use crate::lowrank::{rrr_fit_problem, CompensationProblem, LoraPair};
use crate::model::{
    forward, forward_with_hook, run_layer_timed, ExecPolicy, LayerKind, LayerMode, Stack,
};
use crate::nm_format::NMPattern;
use crate::sparsify::{sparsify_activation, CompensationGranularity, ScoreSpec, SCORE_EPS};
use crate::spmm::FusedTiming;
use crate::tensor::{frobenius_norm, gemm, DenseMatrix, RNG_ALGORITHM};

pub const REPORT_SCHEMA: &str = "lynx-report/1";
pub const HISTOGRAM_BINS: usize = 50;

/// Normalized magnitude above which an entry counts as active.
pub const ACTIVE_THRESHOLD: f64 = 0.1;

/// `‖y_full - y_sparse‖_F / ‖y_full‖_F`.
pub fn rfe(y_full: &DenseMatrix, y_sparse: &DenseMatrix) -> Result<f64> {
    if y_full.shape() != y_sparse.shape() {
        return Err(LynxError::dim(format!(
            "rfe: reference is {}x{} but candidate is {}x{}",
            y_full.rows(),
            y_full.cols(),
            y_sparse.rows(),
            y_sparse.cols()
        )));
    }
    let denom = frobenius_norm(y_full);
    if denom == 0.0 {
        return Err(LynxError::UndefinedReference(
            "rfe reference output is all zero".into(),
        ));
    }
    let num: f64 = y_full
        .data()
        .iter()
        .zip(y_sparse.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(num.sqrt() / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub normalization: f64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Share of samples in the two bins adjacent to zero.
    pub fn center_mass(&self) -> f64 {
        let h = HISTOGRAM_BINS / 2;
        (self.counts[h - 1] + self.counts[h]) as f64 / self.total() as f64
    }

    /// Share of samples in the outermost bin on each side.
    pub fn edge_mass(&self) -> f64 {
        (self.counts[0] + self.counts[HISTOGRAM_BINS - 1]) as f64 / self.total() as f64
    }
}

/// Bin of a normalized value; positive and negative halves mirror each other.
#[inline]
fn bin_of(u: f64) -> usize {
    let half = HISTOGRAM_BINS / 2;
    let off = ((u.abs() * half as f64).floor() as usize).min(half - 1);
    if u < 0.0 {
        half - 1 - off
    } else {
        half + off
    }
}

/// Values divided by the largest magnitude, binned over `[-1, 1]`.
pub fn histogram(m: &DenseMatrix) -> Result<Histogram> {
    let max = m.max_abs() as f64;
    if max == 0.0 || !max.is_finite() {
        return Err(LynxError::UndefinedReference(
            "histogram normalization needs a nonzero finite maximum".into(),
        ));
    }
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &v in m.data() {
        counts[bin_of(v as f64 / max)] += 1;
    }
    let bin_edges = (0..=HISTOGRAM_BINS)
        .map(|k| -1.0 + 2.0 * k as f64 / HISTOGRAM_BINS as f64)
        .collect();
    Ok(Histogram {
        bin_edges,
        counts,
        normalization: max,
    })
}

/// Fraction of entries whose normalized magnitude exceeds [`ACTIVE_THRESHOLD`].
pub fn active_fraction(m: &DenseMatrix) -> f64 {
    let max = m.max_abs() as f64;
    if max == 0.0 {
        return 0.0;
    }
    let n = m
        .data()
        .iter()
        .filter(|&&v| (v.abs() as f64) / max > ACTIVE_THRESHOLD)
        .count();
    n as f64 / m.data().len() as f64
}

/// Base64 SHA-256 of the little-endian payload.
pub fn digest(m: &DenseMatrix) -> String {
    B64.encode(Sha256::digest(m.to_le_bytes()))
}

/// Layer-local errors of weight and activation sparsification on the same
/// dense input: `(rfe_weight, rfe_activation)`.
pub fn local_errors(
    x: &DenseMatrix,
    w: &DenseMatrix,
    pattern: NMPattern,
    score: ScoreSpec,
    granularity: CompensationGranularity,
    eps: f32,
) -> Result<(f64, f64)> {
    let y = gemm(x, w)?;
    let norms = crate::tensor::column_l2_norms(x);
    let scores = crate::sparsify::score_weights(w, Some(&norms), score)?;
    let wp = crate::sparsify::prune_weights(w, &scores, pattern)?;
    let yw = gemm(x, &wp)?;
    let (_, sx) = sparsify_activation(x, pattern, granularity, eps)?;
    let ya = gemm(&sx, w)?;
    Ok((rfe(&y, &yw)?, rfe(&y, &ya)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub kind: LayerKind,
    pub depth: usize,
    pub rfe_weight: f64,
    pub rfe_activation: f64,
    pub weight_histogram: Histogram,
    pub activation_histogram: Histogram,
    pub active_fraction: f64,
    pub timings: Option<FusedTiming>,
    pub weight_digest: String,
    pub activation_digest: String,
}

/// For every layer, feeds the dense-path input through the dense layer and
/// through the layer under each of the two policies.
pub fn layer_sweep(
    stack: &Stack,
    x0: &DenseMatrix,
    weight_policy: &ExecPolicy,
    activation_policy: &ExecPolicy,
) -> Result<Vec<LayerReport>> {
    weight_policy.check(stack)?;
    activation_policy.check(stack)?;
    let dense = forward(stack, x0, &ExecPolicy::dense())?;
    stack
        .layers
        .par_iter()
        .enumerate()
        .map(|(i, layer)| {
            let x = &dense.layer_inputs[i];
            let y = &dense.layer_outputs[i];
            let name = &layer.spec.name;
            let (yw, _) = run_layer_timed(layer, x, weight_policy.mode_for(name), weight_policy)?;
            let (ya, timings) = run_layer_timed(
                layer,
                x,
                activation_policy.mode_for(name),
                activation_policy,
            )?;
            Ok(LayerReport {
                layer: name.clone(),
                kind: layer.spec.kind,
                depth: layer.spec.block,
                rfe_weight: rfe(y, &yw)?,
                rfe_activation: rfe(y, &ya)?,
                weight_histogram: histogram(&layer.weight)?,
                activation_histogram: histogram(x)?,
                active_fraction: active_fraction(x),
                timings,
                weight_digest: digest(&layer.weight),
                activation_digest: digest(x),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub layer: String,
    pub mode: String,
    pub rfe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub end_to_end_rfe: f64,
    pub output_digest: String,
    pub per_layer: Vec<LayerError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference_digest: String,
    pub methods: Vec<MethodResult>,
}

impl Comparison {
    pub fn rfe_of(&self, method: &str) -> Option<f64> {
        self.methods
            .iter()
            .find(|m| m.method == method)
            .map(|m| m.end_to_end_rfe)
    }
}

/// End-to-end and per-layer (propagated) RFE of each method against the
/// all-dense stack.
pub fn compare_methods(
    stack: &Stack,
    x0: &DenseMatrix,
    methods: &[(String, ExecPolicy)],
) -> Result<Comparison> {
    for (_, p) in methods {
        p.check(stack)?;
    }
    let reference = forward(stack, x0, &ExecPolicy::dense())?;
    let results = methods
        .par_iter()
        .map(|(name, policy)| {
            let out = forward(stack, x0, policy)?;
            let per_layer = stack
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    Ok(LayerError {
                        layer: l.spec.name.clone(),
                        mode: policy.mode_for(&l.spec.name).label(),
                        rfe: rfe(&reference.layer_outputs[i], &out.layer_outputs[i])?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MethodResult {
                method: name.clone(),
                end_to_end_rfe: rfe(&reference.y, &out.y)?,
                output_digest: digest(&out.y),
                per_layer,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison {
        reference_digest: digest(&reference.y),
        methods: results,
    })
}

/// Fits a rank-`rank` pair for every layer, in execution order. Each layer
/// sees the input produced by the already-compensated sparse layers before
/// it, and its pair is fitted by reduced-rank regression to the gap between
/// the dense stack's output for that layer and the layer's sparse product.
pub fn fit_stack_lora(
    stack: &Stack,
    x_fit: &DenseMatrix,
    pattern: NMPattern,
    granularity: CompensationGranularity,
    eps: f32,
    rank: usize,
) -> Result<Vec<LoraPair>> {
    let teacher = forward(stack, x_fit, &ExecPolicy::dense())?;
    let mut policy = ExecPolicy::uniform(LayerMode::activation(granularity));
    policy.pattern = pattern;
    policy.eps = eps;
    let mut pairs: Vec<Option<LoraPair>> = vec![None; stack.layers.len()];
    let mut hook = |i: usize, x: &DenseMatrix| -> Result<Option<LayerMode>> {
        let layer = &stack.layers[i];
        let (_, sx) = sparsify_activation(x, pattern, granularity, eps)?;
        let target = teacher.layer_outputs[i].sub(&gemm(&sx, &layer.weight)?)?;
        let r = rank.min(layer.spec.d_in).min(layer.spec.d_out);
        let lora = rrr_fit_problem(&CompensationProblem::from_target(x, &target)?, r)?.lora;
        pairs[i] = Some(lora.clone());
        Ok(Some(LayerMode::ActivationSparse {
            granularity,
            lora: Some(lora),
        }))
    };
    forward_with_hook(stack, x_fit, &policy, &mut hook)?;
    Ok(pairs
        .into_iter()
        .map(|p| p.expect("every layer runs once"))
        .collect())
}

pub const SA_NATIVE: &str = "SA-Native";
pub const SA_NC: &str = "SA-NC";
pub const SA_NC_LORA: &str = "SA-NC-LoRA";
pub const SA_NC_LORA_SL: &str = "SA-NC-LoRA-SL";

/// The ablation ladder: plain Top-K, norm compensation, plus fitted LoRA
/// pairs, plus the preset's layer skips.
pub fn method_ladder(
    stack: &Stack,
    loras: &[LoraPair],
    granularity: CompensationGranularity,
) -> Result<Vec<(String, ExecPolicy)>> {
    if loras.len() != stack.layers.len() {
        return Err(LynxError::dim(format!(
            "{} LoRA pairs for {} layers",
            loras.len(),
            stack.layers.len()
        )));
    }
    let native = ExecPolicy::uniform(LayerMode::activation(CompensationGranularity::None));
    let nc = ExecPolicy::uniform(LayerMode::activation(granularity));
    let mut lora = nc.clone();
    for (l, pair) in stack.layers.iter().zip(loras) {
        lora = lora.set(
            l.spec.name.clone(),
            LayerMode::ActivationSparse {
                granularity,
                lora: Some(pair.clone()),
            },
        );
    }
    let mut ladder = vec![
        (SA_NATIVE.to_string(), native),
        (SA_NC.to_string(), nc),
        (SA_NC_LORA.to_string(), lora.clone()),
    ];
    if !stack.default_skips().is_empty() {
        ladder.push((SA_NC_LORA_SL.to_string(), lora.with_default_skips(stack)));
    }
    Ok(ladder)
}

/// Report header fields shared by every JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub schema: String,
    pub rng: String,
    pub active_threshold: f64,
    pub score_eps: f64,
    pub histogram_bins: usize,
}

impl Default for ReportHeader {
    fn default() -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            rng: RNG_ALGORITHM.to_string(),
            active_threshold: ACTIVE_THRESHOLD,
            score_eps: SCORE_EPS,
            histogram_bins: HISTOGRAM_BINS,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    #[serde(flatten)]
    pub header: ReportHeader,
    pub preset: String,
    pub seed: u64,
    pub weight_mode: String,
    pub activation_mode: String,
    pub layers: Vec<LayerReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    #[serde(flatten)]
    pub header: ReportHeader,
    pub preset: String,
    pub seed: u64,
    pub comparison: Comparison,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    layer: &'a str,
    kind: &'a str,
    depth: usize,
    method: &'a str,
    rfe: f64,
}

/// One CSV row per (layer, method) of a sweep.
pub fn write_sweep_csv<W: Write>(w: W, reports: &[LayerReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in reports {
        for (method, rfe) in [("weight", r.rfe_weight), ("activation", r.rfe_activation)] {
            out.serialize(CsvRow {
                layer: &r.layer,
                kind: r.kind.as_str(),
                depth: r.depth,
                method,
                rfe,
            })
            .map_err(|e| LynxError::format(e.to_string()))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CompareRow<'a> {
    layer: &'a str,
    method: &'a str,
    mode: &'a str,
    rfe: f64,
}

/// One CSV row per (layer, method), plus an `end-to-end` row per method.
pub fn write_comparison_csv<W: Write>(w: W, c: &Comparison) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let to_fmt = |e: csv::Error| LynxError::format(e.to_string());
    for m in &c.methods {
        for l in &m.per_layer {
            out.serialize(CompareRow {
                layer: &l.layer,
                method: &m.method,
                mode: &l.mode,
                rfe: l.rfe,
            })
            .map_err(to_fmt)?;
        }
        out.serialize(CompareRow {
            layer: "end-to-end",
            method: &m.method,
            mode: "",
            rfe: m.end_to_end_rfe,
        })
        .map_err(to_fmt)?;
    }
    out.flush()?;
    Ok(())
}
