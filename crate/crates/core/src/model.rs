//! Toy DiT-style layer stacks with per-layer execution policies.
//!
//! Attention is reduced to a token-local gate `v * sigmoid(q * k)`, so every
//! projection feeds the block output without any cross-token mixing. Each
//! block adds its attention and MLP branches back onto the residual stream.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LynxError, Result};
use crate::io;
use crate::lowrank::LoraPair;
use crate::nm_format::NMPattern;
use crate::sparsify::{prune_weights, score_weights, CompensationGranularity, ScoreSpec};
use crate::spmm::{
    fused_sparse_linear_full, fused_sparse_lora_linear_full, FusedTiming, KernelConfig,
};
use crate::tensor::{column_l2_norms, gemm, sample, DenseMatrix, RandomSpec, RNG_ALGORITHM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Q,
    K,
    V,
    Out,
    Qkv,
    Up,
    Gate,
    Down,
    QkvUp,
    OutDown,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Q => "Q",
            LayerKind::K => "K",
            LayerKind::V => "V",
            LayerKind::Out => "Out",
            LayerKind::Qkv => "QKV",
            LayerKind::Up => "Up",
            LayerKind::Gate => "Gate",
            LayerKind::Down => "Down",
            LayerKind::QkvUp => "QKV-Up",
            LayerKind::OutDown => "Out-Down",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stream {
    Image,
    Text,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub d_in: usize,
    pub d_out: usize,
    pub stream: Stream,
    pub block: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    QwenLike,
    FluxLike,
    ZimageLike,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::QwenLike, Preset::FluxLike, Preset::ZimageLike];

    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::QwenLike => "qwen-like",
            Preset::FluxLike => "flux-like",
            Preset::ZimageLike => "zimage-like",
        }
    }

    /// Full-size `(hidden, mlp)` widths of the reference models.
    fn full_dims(&self) -> (usize, usize) {
        match self {
            Preset::QwenLike | Preset::FluxLike => (3072, 12288),
            Preset::ZimageLike => (3840, 10240),
        }
    }

    /// Layers the preset executes densely under its default policy.
    pub fn default_skip_suffixes(&self) -> &'static [&'static str] {
        match self {
            Preset::QwenLike => &[],
            Preset::FluxLike => &["proj_out"],
            Preset::ZimageLike => &["attention.to_out.0", "feed_forward.w1"],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = LynxError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                LynxError::config(format!(
                    "unknown preset '{s}': expected qwen-like, flux-like or zimage-like"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub preset: Preset,
    /// Number of transformer blocks.
    pub depth: usize,
    pub scale: usize,
    pub seed: u64,
}

impl StackConfig {
    pub fn new(preset: Preset, depth: usize, scale: usize, seed: u64) -> Self {
        Self {
            preset,
            depth,
            scale,
            seed,
        }
    }

    /// `(hidden, mlp)` widths after scaling.
    pub fn dims(&self) -> Result<(usize, usize)> {
        if self.depth == 0 {
            return Err(LynxError::config("depth must be >= 1"));
        }
        if self.scale == 0 {
            return Err(LynxError::config("scale must be >= 1"));
        }
        let (d, f) = self.preset.full_dims();
        for full in [d, f] {
            if full % self.scale != 0 || !(full / self.scale).is_multiple_of(4) {
                return Err(LynxError::config(format!(
                    "scale {} maps width {full} to {:.2}, which is not a multiple of 4",
                    self.scale,
                    full as f64 / self.scale as f64
                )));
            }
        }
        Ok((d / self.scale, f / self.scale))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// Separate Q/K/V/Out projections and an Up/Down MLP.
    Split,
    /// Separate Q/K/V/Out projections and a gated Up/Gate/Down MLP.
    Gated,
    /// Fused QKV projection, Out, and an Up/Down MLP.
    FusedQkv,
    /// One wide QKV-Up projection and one Out-Down projection.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    /// Index of the first layer of the block in [`Stack::layers`].
    pub first_layer: usize,
    pub layer_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub config: StackConfig,
    pub d_model: usize,
    pub blocks: Vec<Block>,
    pub layers: Vec<Layer>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for layer `index` of a stack seeded with `seed`.
pub fn layer_seed(seed: u64, index: usize) -> u64 {
    splitmix(seed ^ splitmix(index as u64 + 1))
}

pub fn build_stack(cfg: &StackConfig) -> Result<Stack> {
    let (d, f) = cfg.dims()?;
    let mut specs: Vec<LayerSpec> = Vec::new();
    let mut blocks = Vec::new();
    let push =
        |specs: &mut Vec<LayerSpec>, block: usize, name: String, kind, d_in, d_out, stream| {
            specs.push(LayerSpec {
                name,
                kind,
                d_in,
                d_out,
                stream,
                block,
            })
        };
    use LayerKind::*;
    match cfg.preset {
        Preset::QwenLike => {
            for b in 0..cfg.depth {
                let first = specs.len();
                let p = format!("transformer_blocks.{b}.");
                for (suffix, kind) in [
                    ("attn.to_q", Q),
                    ("attn.to_k", K),
                    ("attn.to_v", V),
                    ("attn.to_out.0", Out),
                ] {
                    push(
                        &mut specs,
                        b,
                        format!("{p}{suffix}"),
                        kind,
                        d,
                        d,
                        Stream::Image,
                    );
                }
                push(
                    &mut specs,
                    b,
                    format!("{p}img_mlp.net.0.proj"),
                    Up,
                    d,
                    f,
                    Stream::Image,
                );
                push(
                    &mut specs,
                    b,
                    format!("{p}img_mlp.net.2"),
                    Down,
                    f,
                    d,
                    Stream::Image,
                );
                blocks.push(Block {
                    kind: BlockKind::Split,
                    first_layer: first,
                    layer_count: specs.len() - first,
                });
            }
        }
        Preset::FluxLike => {
            let double = cfg.depth.div_ceil(3);
            for b in 0..cfg.depth {
                let first = specs.len();
                if b < double {
                    let p = format!("transformer_blocks.{b}.");
                    push(
                        &mut specs,
                        b,
                        format!("{p}attn.a_to_qkv"),
                        Qkv,
                        d,
                        3 * d,
                        Stream::Image,
                    );
                    push(
                        &mut specs,
                        b,
                        format!("{p}attn.a_to_out"),
                        Out,
                        d,
                        d,
                        Stream::Image,
                    );
                    push(&mut specs, b, format!("{p}ff_a.0"), Up, d, f, Stream::Image);
                    push(
                        &mut specs,
                        b,
                        format!("{p}ff_a.2"),
                        Down,
                        f,
                        d,
                        Stream::Image,
                    );
                    blocks.push(Block {
                        kind: BlockKind::FusedQkv,
                        first_layer: first,
                        layer_count: 4,
                    });
                } else {
                    let p = format!("single_transformer_blocks.{}.", b - double);
                    push(
                        &mut specs,
                        b,
                        format!("{p}to_qkv_mlp"),
                        QkvUp,
                        d,
                        3 * d + f,
                        Stream::Mixed,
                    );
                    push(
                        &mut specs,
                        b,
                        format!("{p}proj_out"),
                        OutDown,
                        d + f,
                        d,
                        Stream::Mixed,
                    );
                    blocks.push(Block {
                        kind: BlockKind::Single,
                        first_layer: first,
                        layer_count: 2,
                    });
                }
            }
        }
        Preset::ZimageLike => {
            for b in 0..cfg.depth {
                let first = specs.len();
                let p = format!("layers.{b}.");
                for (suffix, kind) in [
                    ("attention.to_q", Q),
                    ("attention.to_k", K),
                    ("attention.to_v", V),
                    ("attention.to_out.0", Out),
                ] {
                    push(
                        &mut specs,
                        b,
                        format!("{p}{suffix}"),
                        kind,
                        d,
                        d,
                        Stream::Mixed,
                    );
                }
                push(
                    &mut specs,
                    b,
                    format!("{p}feed_forward.w1"),
                    Up,
                    d,
                    f,
                    Stream::Mixed,
                );
                push(
                    &mut specs,
                    b,
                    format!("{p}feed_forward.w3"),
                    Gate,
                    d,
                    f,
                    Stream::Mixed,
                );
                push(
                    &mut specs,
                    b,
                    format!("{p}feed_forward.w2"),
                    Down,
                    f,
                    d,
                    Stream::Mixed,
                );
                blocks.push(Block {
                    kind: BlockKind::Gated,
                    first_layer: first,
                    layer_count: 7,
                });
            }
        }
    }
    let layers = specs
        .into_iter()
        .enumerate()
        .map(|(i, spec)| {
            let std = 1.0 / (spec.d_in as f64).sqrt();
            let weight = sample(
                &RandomSpec::gaussian(0.0, std, layer_seed(cfg.seed, i)),
                spec.d_out,
                spec.d_in,
            )?;
            Ok(Layer { spec, weight })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Stack {
        config: *cfg,
        d_model: d,
        blocks,
        layers,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestLayer {
    #[serde(flatten)]
    spec: LayerSpec,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    preset: Preset,
    depth: usize,
    scale: usize,
    seed: u64,
    rng: String,
    d_model: usize,
    blocks: Vec<Block>,
    layers: Vec<ManifestLayer>,
}

impl Stack {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.spec.name == name)
    }

    /// Layers named exactly `query`, or failing that, every layer whose name
    /// ends with `.query`.
    pub fn find_layers(&self, query: &str) -> Vec<usize> {
        if let Some(i) = self.layer_index(query) {
            return vec![i];
        }
        let dotted = format!(".{query}");
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.name.ends_with(&dotted))
            .map(|(i, _)| i)
            .collect()
    }

    /// Names of the layers the preset skips by default.
    pub fn default_skips(&self) -> Vec<String> {
        self.config
            .preset
            .default_skip_suffixes()
            .iter()
            .flat_map(|s| self.find_layers(s))
            .map(|i| self.layers[i].spec.name.clone())
            .collect()
    }

    /// Writes one tensor file per layer plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let file = format!("{i:03}_{}.lynx", l.spec.name);
            io::save_dense(dir.join(&file), &l.weight)?;
            layers.push(ManifestLayer {
                spec: l.spec.clone(),
                file,
            });
        }
        let manifest = Manifest {
            format: 1,
            preset: self.config.preset,
            depth: self.config.depth,
            scale: self.config.scale,
            seed: self.config.seed,
            rng: RNG_ALGORITHM.to_string(),
            d_model: self.d_model,
            blocks: self.blocks.clone(),
            layers,
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Stack> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_str(&text)?;
        let mut layers = Vec::with_capacity(m.layers.len());
        for ml in m.layers {
            let weight = io::load_dense(dir.join(&ml.file))?;
            if weight.shape() != (ml.spec.d_out, ml.spec.d_in) {
                return Err(LynxError::format(format!(
                    "{}: weight is {}x{} but the manifest says {}x{}",
                    ml.file,
                    weight.rows(),
                    weight.cols(),
                    ml.spec.d_out,
                    ml.spec.d_in
                )));
            }
            layers.push(Layer {
                spec: ml.spec,
                weight,
            });
        }
        let covered: usize = m.blocks.iter().map(|b| b.layer_count).sum();
        if covered != layers.len() {
            return Err(LynxError::format(
                "manifest blocks do not cover the layer list",
            ));
        }
        Ok(Stack {
            config: StackConfig::new(m.preset, m.depth, m.scale, m.seed),
            d_model: m.d_model,
            blocks: m.blocks,
            layers,
        })
    }
}

/// How one layer is executed.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerMode {
    Dense,
    WeightSparse(ScoreSpec),
    ActivationSparse {
        granularity: CompensationGranularity,
        lora: Option<LoraPair>,
    },
    Skip,
}

impl LayerMode {
    pub fn activation(granularity: CompensationGranularity) -> Self {
        LayerMode::ActivationSparse {
            granularity,
            lora: None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            LayerMode::Dense => "dense".into(),
            LayerMode::WeightSparse(s) => format!("weight-sparse({s})"),
            LayerMode::ActivationSparse { granularity, lora } => match lora {
                Some(l) => format!("activation-sparse({granularity}, lora r={})", l.rank()),
                None => format!("activation-sparse({granularity})"),
            },
            LayerMode::Skip => "skip".into(),
        }
    }
}

/// Per-layer execution modes with a fallback for unlisted layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecPolicy {
    pub default: LayerMode,
    pub overrides: BTreeMap<String, LayerMode>,
    pub pattern: NMPattern,
    pub eps: f32,
    pub kernel: KernelConfig,
}

impl ExecPolicy {
    pub fn uniform(mode: LayerMode) -> Self {
        Self {
            default: mode,
            overrides: BTreeMap::new(),
            pattern: NMPattern::TWO_FOUR,
            eps: crate::DEFAULT_EPS,
            kernel: KernelConfig::default(),
        }
    }

    pub fn dense() -> Self {
        Self::uniform(LayerMode::Dense)
    }

    pub fn set(mut self, layer: impl Into<String>, mode: LayerMode) -> Self {
        self.overrides.insert(layer.into(), mode);
        self
    }

    pub fn skip<S: AsRef<str>>(mut self, layers: &[S]) -> Self {
        for l in layers {
            self.overrides
                .insert(l.as_ref().to_string(), LayerMode::Skip);
        }
        self
    }

    /// Adds the preset's default skip list.
    pub fn with_default_skips(self, stack: &Stack) -> Self {
        let names = stack.default_skips();
        self.skip(&names)
    }

    pub fn mode_for(&self, name: &str) -> &LayerMode {
        self.overrides.get(name).unwrap_or(&self.default)
    }

    pub fn check(&self, stack: &Stack) -> Result<()> {
        for (name, mode) in &self.overrides {
            let idx = stack
                .layer_index(name)
                .ok_or_else(|| LynxError::config(format!("policy names unknown layer '{name}'")))?;
            if let LayerMode::ActivationSparse { lora: Some(l), .. } = mode {
                let s = &stack.layers[idx].spec;
                l.check_layer(s.d_out, s.d_in)?;
            }
        }
        if let LayerMode::ActivationSparse { lora: Some(_), .. } = self.default {
            return Err(LynxError::config(
                "a LoRA pair must be attached to a named layer",
            ));
        }
        Ok(())
    }
}

/// Applies one layer to `x` under `mode`.
pub fn run_layer(
    layer: &Layer,
    x: &DenseMatrix,
    mode: &LayerMode,
    policy: &ExecPolicy,
) -> Result<DenseMatrix> {
    run_layer_timed(layer, x, mode, policy).map(|(y, _)| y)
}

/// [`run_layer`] plus the fused-kernel timing for activation-sparse modes.
pub fn run_layer_timed(
    layer: &Layer,
    x: &DenseMatrix,
    mode: &LayerMode,
    policy: &ExecPolicy,
) -> Result<(DenseMatrix, Option<FusedTiming>)> {
    let w = &layer.weight;
    match mode {
        LayerMode::Dense | LayerMode::Skip => Ok((gemm(x, w)?, None)),
        LayerMode::WeightSparse(spec) => {
            let norms = column_l2_norms(x);
            let scores = score_weights(w, Some(&norms), *spec)?;
            let pruned = prune_weights(w, &scores, policy.pattern)?;
            Ok((gemm(x, &pruned)?, None))
        }
        LayerMode::ActivationSparse { granularity, lora } => {
            let out = match lora {
                None => fused_sparse_linear_full(
                    x,
                    w,
                    policy.pattern,
                    *granularity,
                    policy.eps,
                    &policy.kernel,
                )?,
                Some(l) => fused_sparse_lora_linear_full(
                    x,
                    w,
                    l.la(),
                    l.lb(),
                    policy.pattern,
                    *granularity,
                    policy.eps,
                    &policy.kernel,
                )?,
            };
            Ok((out.y, Some(out.timing)))
        }
    }
}

/// Final output plus every layer's input and output, in layer order.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub y: DenseMatrix,
    pub layer_inputs: Vec<DenseMatrix>,
    pub layer_outputs: Vec<DenseMatrix>,
}

pub fn gelu(v: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * v * (1.0 + (C * (v + 0.044_715 * v * v * v)).tanh())
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Token-local stand-in for attention: `v * sigmoid(q * k)`.
fn attention_gate(q: &DenseMatrix, k: &DenseMatrix, v: &DenseMatrix) -> Result<DenseMatrix> {
    let qk = q.hadamard(k)?.map(sigmoid);
    v.hadamard(&qk)
}

/// Called with each layer's index and actual input just before it runs; a
/// returned mode replaces the policy's mode for that layer.
pub type LayerHook<'h> = dyn FnMut(usize, &DenseMatrix) -> Result<Option<LayerMode>> + 'h;

struct Runner<'a, 'h> {
    stack: &'a Stack,
    policy: &'a ExecPolicy,
    hook: Option<&'a mut LayerHook<'h>>,
    inputs: Vec<DenseMatrix>,
    outputs: Vec<DenseMatrix>,
}

impl Runner<'_, '_> {
    fn layer(&mut self, idx: usize, x: &DenseMatrix) -> Result<DenseMatrix> {
        let layer = &self.stack.layers[idx];
        let replaced = match self.hook.as_mut() {
            Some(h) => h(idx, x)?,
            None => None,
        };
        let mode = replaced
            .as_ref()
            .unwrap_or_else(|| self.policy.mode_for(&layer.spec.name));
        let y = run_layer(layer, x, mode, self.policy)?;
        self.inputs.push(x.clone());
        self.outputs.push(y.clone());
        Ok(y)
    }

    fn block(&mut self, b: &Block, h: DenseMatrix) -> Result<DenseMatrix> {
        let l = b.first_layer;
        let d = self.stack.d_model;
        match b.kind {
            BlockKind::Split | BlockKind::Gated => {
                let q = self.layer(l, &h)?;
                let k = self.layer(l + 1, &h)?;
                let v = self.layer(l + 2, &h)?;
                let attn = self.layer(l + 3, &attention_gate(&q, &k, &v)?)?;
                let h = h.add(&attn)?;
                let mlp_in = if b.kind == BlockKind::Gated {
                    let up = self.layer(l + 4, &h)?.map(gelu);
                    let gate = self.layer(l + 5, &h)?;
                    up.hadamard(&gate)?
                } else {
                    self.layer(l + 4, &h)?.map(gelu)
                };
                let down = self.layer(l + b.layer_count - 1, &mlp_in)?;
                h.add(&down)
            }
            BlockKind::FusedQkv => {
                let qkv = self.layer(l, &h)?;
                let gated = attention_gate(
                    &qkv.slice_cols(0, d)?,
                    &qkv.slice_cols(d, 2 * d)?,
                    &qkv.slice_cols(2 * d, 3 * d)?,
                )?;
                let attn = self.layer(l + 1, &gated)?;
                let h = h.add(&attn)?;
                let up = self.layer(l + 2, &h)?.map(gelu);
                let down = self.layer(l + 3, &up)?;
                h.add(&down)
            }
            BlockKind::Single => {
                let z = self.layer(l, &h)?;
                let gated = attention_gate(
                    &z.slice_cols(0, d)?,
                    &z.slice_cols(d, 2 * d)?,
                    &z.slice_cols(2 * d, 3 * d)?,
                )?;
                let mlp = z.slice_cols(3 * d, z.cols())?.map(gelu);
                let fused = DenseMatrix::hconcat(&[&gated, &mlp])?;
                let out = self.layer(l + 1, &fused)?;
                h.add(&out)
            }
        }
    }
}

pub fn forward(stack: &Stack, x: &DenseMatrix, policy: &ExecPolicy) -> Result<ForwardOutput> {
    run_forward(stack, x, policy, None)
}

/// [`forward`] with a per-layer hook that may override each layer's mode.
pub fn forward_with_hook(
    stack: &Stack,
    x: &DenseMatrix,
    policy: &ExecPolicy,
    hook: &mut LayerHook<'_>,
) -> Result<ForwardOutput> {
    run_forward(stack, x, policy, Some(hook))
}

fn run_forward<'a, 'h>(
    stack: &'a Stack,
    x: &DenseMatrix,
    policy: &'a ExecPolicy,
    hook: Option<&'a mut LayerHook<'h>>,
) -> Result<ForwardOutput> {
    policy.check(stack)?;
    if x.cols() != stack.d_model {
        return Err(LynxError::dim(format!(
            "input has {} columns but the stack width is {}",
            x.cols(),
            stack.d_model
        )));
    }
    let mut runner = Runner {
        stack,
        policy,
        hook,
        inputs: Vec::with_capacity(stack.layers.len()),
        outputs: Vec::with_capacity(stack.layers.len()),
    };
    let mut h = x.clone();
    for b in &stack.blocks {
        h = runner.block(b, h)?;
    }
    Ok(ForwardOutput {
        y: h,
        layer_inputs: runner.inputs,
        layer_outputs: runner.outputs,
    })
}
