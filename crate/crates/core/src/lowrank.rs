//! Low-rank compensation of the sparsification error.
//!
//! The objective for a layer with input batch `X` and frozen weight `W` is
//! `‖X W^T - (S(X) W^T + X (lA lB)^T)‖²`, i.e. fitting `X M^T ≈ E` with
//! `E = (X - S(X)) W^T` and `M = lA lB` of rank `R`.

use std::fs;
use std::path::Path;

use faer::{Mat, Scale};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LynxError, Result};
use crate::io;
use crate::nm_format::NMPattern;
use crate::sparsify::{sparsify_activation, CompensationGranularity};
use crate::tensor::{gemm, DenseMatrix};

pub const DEFAULT_RANK: usize = 64;

/// Relative singular-value cutoff below which directions are dropped.
pub const SV_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    la: DenseMatrix,
    lb: DenseMatrix,
}

impl LoraPair {
    pub fn new(la: DenseMatrix, lb: DenseMatrix) -> Result<Self> {
        if la.cols() != lb.rows() {
            return Err(LynxError::dim(format!(
                "lA is {}x{} but lB is {}x{}: inner ranks differ",
                la.rows(),
                la.cols(),
                lb.rows(),
                lb.cols()
            )));
        }
        Ok(Self { la, lb })
    }

    pub fn zeros(d_out: usize, d_in: usize, rank: usize) -> Self {
        Self {
            la: DenseMatrix::zeros(d_out, rank),
            lb: DenseMatrix::zeros(rank, d_in),
        }
    }

    pub fn la(&self) -> &DenseMatrix {
        &self.la
    }

    pub fn lb(&self) -> &DenseMatrix {
        &self.lb
    }

    pub fn rank(&self) -> usize {
        self.la.cols()
    }

    pub fn d_out(&self) -> usize {
        self.la.rows()
    }

    pub fn d_in(&self) -> usize {
        self.lb.cols()
    }

    /// `lA lB`, only for inspection; the kernels never form it.
    pub fn product(&self) -> DenseMatrix {
        gemm(&self.la, &self.lb.transpose()).expect("ranks checked at construction")
    }

    /// `(x lB^T) lA^T`.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        gemm(&gemm(x, &self.lb)?, &self.la)
    }

    pub fn check_layer(&self, d_out: usize, d_in: usize) -> Result<()> {
        if self.d_out() != d_out || self.d_in() != d_in {
            return Err(LynxError::dim(format!(
                "LoRA pair is {}x{} (rank {}) but the layer is {d_out}x{d_in}",
                self.d_out(),
                self.d_in(),
                self.rank()
            )));
        }
        Ok(())
    }

    /// Writes `lora_a.lynx`, `lora_b.lynx` and the `lora.json` sidecar.
    pub fn save(&self, dir: impl AsRef<Path>, sidecar: &LoraSidecar) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        io::save_dense(dir.join("lora_a.lynx"), &self.la)?;
        io::save_dense(dir.join("lora_b.lynx"), &self.lb)?;
        fs::write(
            dir.join("lora.json"),
            serde_json::to_string_pretty(sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, LoraSidecar)> {
        let dir = dir.as_ref();
        let la = io::load_dense(dir.join("lora_a.lynx"))?;
        let lb = io::load_dense(dir.join("lora_b.lynx"))?;
        let sidecar: LoraSidecar =
            serde_json::from_str(&fs::read_to_string(dir.join("lora.json"))?)?;
        let pair = Self::new(la, lb)?;
        if pair.rank() != sidecar.rank {
            return Err(LynxError::format(format!(
                "sidecar rank {} disagrees with tensors of rank {}",
                sidecar.rank,
                pair.rank()
            )));
        }
        Ok((pair, sidecar))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSidecar {
    pub rank: usize,
    pub d_out: usize,
    pub d_in: usize,
    pub solver: String,
    pub layer: Option<String>,
    pub pattern: NMPattern,
    pub granularity: CompensationGranularity,
    pub eps: f32,
    pub seed: Option<u64>,
    pub train: Option<TrainConfig>,
    pub final_loss: f64,
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Rows per minibatch when a single activation matrix is split up.
    pub batch: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-3,
            batch: 256,
            seed,
            init_scale: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(LynxError::config("steps must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LynxError::config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(LynxError::config(format!(
                "init scale must be >= 0, got {}",
                self.init_scale
            )));
        }
        if self.batch == 0 {
            return Err(LynxError::config("batch must be >= 1"));
        }
        Ok(())
    }
}

/// Splits `x` into consecutive row blocks of at most `batch` rows.
pub fn split_batches(x: &DenseMatrix, batch: usize) -> Result<Vec<DenseMatrix>> {
    if batch == 0 {
        return Err(LynxError::config("batch must be >= 1"));
    }
    (0..x.rows())
        .step_by(batch)
        .map(|s| x.slice_rows(s, (s + batch).min(x.rows())))
        .collect()
}

fn to_f64(m: &DenseMatrix) -> Mat<f64> {
    Mat::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) as f64)
}

fn to_f32(m: &Mat<f64>) -> DenseMatrix {
    DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] as f32)
}

/// A layer-local fitting problem: `X` and the target `E`, both in f64.
#[derive(Debug, Clone)]
pub struct CompensationProblem {
    x: Mat<f64>,
    e: Mat<f64>,
}

impl CompensationProblem {
    pub fn new(
        x: &DenseMatrix,
        w: &DenseMatrix,
        pattern: NMPattern,
        granularity: CompensationGranularity,
        eps: f32,
    ) -> Result<Self> {
        if x.cols() != w.cols() {
            return Err(LynxError::dim(format!(
                "x is {}x{} but w is {}x{}",
                x.rows(),
                x.cols(),
                w.rows(),
                w.cols()
            )));
        }
        let (_, sx) = sparsify_activation(x, pattern, granularity, eps)?;
        let xf = to_f64(x);
        let e = (&xf - &to_f64(&sx)) * to_f64(w).transpose();
        Ok(Self { x: xf, e })
    }

    pub fn d_in(&self) -> usize {
        self.x.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.e.ncols()
    }

    /// A problem with an explicit target `E` (`tokens x d_out`) for the
    /// low-rank branch `X lB^T lA^T`.
    pub fn from_target(x: &DenseMatrix, e: &DenseMatrix) -> Result<Self> {
        if x.rows() != e.rows() {
            return Err(LynxError::dim(format!(
                "x has {} rows but target has {}",
                x.rows(),
                e.rows()
            )));
        }
        Ok(Self {
            x: to_f64(x),
            e: to_f64(e),
        })
    }

    /// `‖E‖²`, the loss with no compensation.
    pub fn zero_loss(&self) -> f64 {
        self.e.squared_norm_l2()
    }

    fn residual(&self, la: &Mat<f64>, lb: &Mat<f64>) -> (Mat<f64>, Mat<f64>) {
        let xb = &self.x * lb.transpose();
        let r = &xb * la.transpose() - &self.e;
        (xb, r)
    }

    fn check(&self, lora: &LoraPair) -> Result<()> {
        lora.check_layer(self.d_out(), self.d_in())
    }

    pub fn loss(&self, lora: &LoraPair) -> Result<f64> {
        self.check(lora)?;
        Ok(self
            .residual(&to_f64(&lora.la), &to_f64(&lora.lb))
            .1
            .squared_norm_l2())
    }

    fn loss_grad_f64(&self, la: &Mat<f64>, lb: &Mat<f64>) -> (f64, Mat<f64>, Mat<f64>) {
        let (xb, r) = self.residual(la, lb);
        let ga = Scale(2.0) * (r.transpose() * &xb);
        let gb = Scale(2.0) * ((&r * la).transpose() * &self.x);
        (r.squared_norm_l2(), ga, gb)
    }

    /// Loss and its gradients with respect to `lA` and `lB`.
    pub fn loss_and_gradient(&self, lora: &LoraPair) -> Result<(f64, DenseMatrix, DenseMatrix)> {
        self.check(lora)?;
        let (l, ga, gb) = self.loss_grad_f64(&to_f64(&lora.la), &to_f64(&lora.lb));
        Ok((l, to_f32(&ga), to_f32(&gb)))
    }
}

pub fn compensation_loss(
    x: &DenseMatrix,
    w: &DenseMatrix,
    lora: &LoraPair,
    pattern: NMPattern,
    granularity: CompensationGranularity,
    eps: f32,
) -> Result<f64> {
    CompensationProblem::new(x, w, pattern, granularity, eps)?.loss(lora)
}

/// Closed-form fit and what the solver learned about `X`.
#[derive(Debug, Clone)]
pub struct RrrFit {
    pub lora: LoraPair,
    /// Singular values of `X` kept above the cutoff.
    pub numerical_rank: usize,
    pub rank_deficient: bool,
    pub loss: f64,
}

fn check_rank(rank: usize, d_out: usize, d_in: usize) -> Result<()> {
    if rank == 0 || rank > d_out.min(d_in) {
        return Err(LynxError::config(format!(
            "rank {rank} must lie in 1..={} for a {d_out}x{d_in} layer",
            d_out.min(d_in)
        )));
    }
    Ok(())
}

/// Rank-`rank` minimizer of the compensation loss by reduced-rank
/// regression on an orthogonal basis of `X`'s column space.
pub fn rrr_fit(
    x: &DenseMatrix,
    w: &DenseMatrix,
    pattern: NMPattern,
    granularity: CompensationGranularity,
    eps: f32,
    rank: usize,
) -> Result<RrrFit> {
    let problem = CompensationProblem::new(x, w, pattern, granularity, eps)?;
    rrr_fit_problem(&problem, rank)
}

pub fn rrr_fit_problem(problem: &CompensationProblem, rank: usize) -> Result<RrrFit> {
    let (d_in, d_out) = (problem.d_in(), problem.d_out());
    check_rank(rank, d_out, d_in)?;
    let svd = problem
        .x
        .thin_svd()
        .map_err(|_| LynxError::Numeric("SVD of the activation batch failed".into()))?;
    let (u, v) = (svd.U(), svd.V());
    let sv: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    let smax = sv.iter().cloned().fold(0.0f64, f64::max);
    let r = sv
        .iter()
        .filter(|&&s| smax > 0.0 && s > SV_CUTOFF * smax)
        .count();
    let rank_deficient = r < d_in;
    let mut la = Mat::<f64>::zeros(d_out, rank);
    let mut lb = Mat::<f64>::zeros(rank, d_in);
    if r > 0 {
        let q = u.subcols(0, r);
        let f = q.transpose() * &problem.e;
        let fsvd = f
            .thin_svd()
            .map_err(|_| LynxError::Numeric("SVD of the projected target failed".into()))?;
        let (fu, fv, fs) = (fsvd.U(), fsvd.V(), fsvd.S().column_vector());
        let keep = rank.min(fs.nrows());
        let root = |c: usize| fs[c].max(0.0).sqrt();
        // lA columns: sqrt(s) times the right singular vectors of F.
        for c in 0..keep {
            for i in 0..d_out {
                la[(i, c)] = root(c) * fv[(i, c)];
            }
        }
        // lB rows: sqrt(s) u_c^T Σ_r^{-1} V_r^T.
        let coef = Mat::<f64>::from_fn(keep, r, |c, k| root(c) * fu[(k, c)] / sv[k]);
        let top = &coef * v.subcols(0, r).transpose();
        for c in 0..keep {
            for j in 0..d_in {
                lb[(c, j)] = top[(c, j)];
            }
        }
    }
    let lora = LoraPair {
        la: to_f32(&la),
        lb: to_f32(&lb),
    };
    let loss = problem.loss(&lora)?;
    Ok(RrrFit {
        lora,
        numerical_rank: r,
        rank_deficient,
        loss,
    })
}

/// Gradient-descent training of a LoRA pair; returns the pair and the loss
/// before every step followed by the final loss.
#[allow(clippy::too_many_arguments)]
pub fn gd_fit(
    batches: &[DenseMatrix],
    w: &DenseMatrix,
    pattern: NMPattern,
    granularity: CompensationGranularity,
    eps: f32,
    rank: usize,
    cfg: &TrainConfig,
) -> Result<(LoraPair, Vec<f64>)> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(LynxError::config("gd_fit needs at least one batch"));
    }
    let problems = batches
        .iter()
        .map(|x| CompensationProblem::new(x, w, pattern, granularity, eps))
        .collect::<Result<Vec<_>>>()?;
    gd_fit_problems(&problems, rank, cfg)
}

pub fn gd_fit_problems(
    problems: &[CompensationProblem],
    rank: usize,
    cfg: &TrainConfig,
) -> Result<(LoraPair, Vec<f64>)> {
    cfg.validate()?;
    let first = problems
        .first()
        .ok_or_else(|| LynxError::config("gd_fit needs at least one batch"))?;
    let (d_in, d_out) = (first.d_in(), first.d_out());
    check_rank(rank, d_out, d_in)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.init_scale;
    let mut init = |r: usize, c: usize| {
        Mat::from_fn(r, c, |_, _| {
            if h == 0.0 {
                0.0
            } else {
                rng.random_range(-h..=h)
            }
        })
    };
    let mut la = init(d_out, rank);
    let mut lb = init(rank, d_in);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let p = &problems[step % problems.len()];
        let (loss, ga, gb) = p.loss_grad_f64(&la, &lb);
        if !loss.is_finite() {
            return Err(LynxError::Training { step, loss });
        }
        trace.push(loss);
        la -= Scale(cfg.learning_rate) * &ga;
        lb -= Scale(cfg.learning_rate) * &gb;
    }
    let last = &problems[cfg.steps % problems.len()];
    let final_loss = last.residual(&la, &lb).1.squared_norm_l2();
    if !final_loss.is_finite() || !(la.is_all_finite() && lb.is_all_finite()) {
        return Err(LynxError::Training {
            step: cfg.steps,
            loss: final_loss,
        });
    }
    trace.push(final_loss);
    Ok((
        LoraPair {
            la: to_f32(&la),
            lb: to_f32(&lb),
        },
        trace,
    ))
}

/// Rank-`rank` truncated SVD of `w - w_pruned`, split as `lA = U Σ`,
/// `lB = V^T`.
pub fn slim_init(w: &DenseMatrix, w_pruned: &DenseMatrix, rank: usize) -> Result<LoraPair> {
    if w.shape() != w_pruned.shape() {
        return Err(LynxError::dim(format!(
            "w is {}x{} but the pruned weight is {}x{}",
            w.rows(),
            w.cols(),
            w_pruned.rows(),
            w_pruned.cols()
        )));
    }
    let (d_out, d_in) = w.shape();
    check_rank(rank, d_out, d_in)?;
    let delta = to_f64(w) - to_f64(w_pruned);
    let svd = delta
        .thin_svd()
        .map_err(|_| LynxError::Numeric("SVD of the weight delta failed".into()))?;
    let (u, v, s) = (svd.U(), svd.V(), svd.S().column_vector());
    let la = DenseMatrix::from_fn(d_out, rank, |i, c| (u[(i, c)] * s[c]) as f32);
    let lb = DenseMatrix::from_fn(rank, d_in, |c, j| v[(j, c)] as f32);
    Ok(LoraPair { la, lb })
}

/// `‖delta - lA lB‖_F` evaluated in f64.
pub fn reconstruction_error(delta: &DenseMatrix, lora: &LoraPair) -> Result<f64> {
    lora.check_layer(delta.rows(), delta.cols())?;
    let approx = to_f64(&lora.la) * to_f64(&lora.lb);
    Ok((to_f64(delta) - approx).norm_l2())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sample, RandomSpec};

    const P: NMPattern = NMPattern::TWO_FOUR;
    const G: CompensationGranularity = CompensationGranularity::PerTensor;

    fn gauss(r: usize, c: usize, seed: u64) -> DenseMatrix {
        sample(&RandomSpec::gaussian(0.0, 1.0, seed), r, c).unwrap()
    }

    #[test]
    fn zero_lora_loss_is_target_energy() {
        let x = gauss(20, 8, 1);
        let w = gauss(6, 8, 2);
        let zero = LoraPair::zeros(6, 8, 2);
        let (_, sx) = sparsify_activation(&x, P, G, 1e-8).unwrap();
        let e = gemm(&x.sub(&sx).unwrap(), &w).unwrap();
        let direct: f64 = e.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let loss = compensation_loss(&x, &w, &zero, P, G, 1e-8).unwrap();
        assert!((loss - direct).abs() <= 1e-4 * direct);

        let sparse_x = DenseMatrix::from_rows(&[[1., 0., 0., 2.], [0., -3., 4., 0.]]).unwrap();
        let w4 = gauss(3, 4, 3);
        let l = compensation_loss(
            &sparse_x,
            &w4,
            &LoraPair::zeros(3, 4, 1),
            P,
            CompensationGranularity::None,
            1e-8,
        )
        .unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn rrr_exact_for_square_full_rank() {
        let x = gauss(16, 16, 4);
        let w = gauss(16, 16, 5);
        let fit = rrr_fit(&x, &w, P, G, 1e-8, 16).unwrap();
        let p = CompensationProblem::new(&x, &w, P, G, 1e-8).unwrap();
        assert!(!fit.rank_deficient);
        assert!(
            fit.loss <= 1e-8 * p.zero_loss(),
            "{} vs {}",
            fit.loss,
            p.zero_loss()
        );
    }

    #[test]
    fn rrr_no_pruning_gives_zero_pair() {
        let x = DenseMatrix::from_rows(&[[1., 0., 0., 2.], [0., -3., 4., 0.], [5., 0., 6., 0.]])
            .unwrap();
        let w = gauss(4, 4, 6);
        let fit = rrr_fit(&x, &w, P, CompensationGranularity::None, 1e-8, 2).unwrap();
        assert!(fit.lora.product().is_zero());
        assert!(fit.rank_deficient);
    }

    #[test]
    fn rank_bounds_enforced() {
        let x = gauss(8, 8, 7);
        let w = gauss(4, 8, 8);
        assert!(rrr_fit(&x, &w, P, G, 1e-8, 5).is_err());
        assert!(rrr_fit(&x, &w, P, G, 1e-8, 0).is_err());
        assert!(slim_init(&w, &w, 5).is_err());
    }

    #[test]
    fn slim_zero_and_rank_one() {
        let w = gauss(6, 8, 9);
        let z = slim_init(&w, &w, 3).unwrap();
        assert!(z.product().is_zero());

        let u = gauss(6, 1, 10);
        let v = gauss(1, 8, 11);
        let delta = gemm(&u, &v.transpose()).unwrap();
        let pruned = w.sub(&delta).unwrap();
        let pair = slim_init(&w, &pruned, 1).unwrap();
        let d = w.sub(&pruned).unwrap();
        let err = reconstruction_error(&d, &pair).unwrap();
        assert!(
            err <= 1e-6 * crate::tensor::frobenius_norm(&d) + 1e-6,
            "{err}"
        );
    }

    #[test]
    fn gd_zero_init_starts_at_zero_loss() {
        let x = gauss(12, 8, 12);
        let w = gauss(4, 8, 13);
        let cfg = TrainConfig {
            steps: 3,
            init_scale: 0.0,
            ..TrainConfig::new(1)
        };
        let (_, trace) = gd_fit(std::slice::from_ref(&x), &w, P, G, 1e-8, 2, &cfg).unwrap();
        let zero = compensation_loss(&x, &w, &LoraPair::zeros(4, 8, 2), P, G, 1e-8).unwrap();
        assert_eq!(trace[0], zero);
        assert_eq!(trace.len(), 4);
    }

    #[test]
    fn gd_divergence_is_reported() {
        let x = gauss(32, 8, 14).scale(10.0);
        let w = gauss(8, 8, 15);
        let cfg = TrainConfig {
            steps: 200,
            learning_rate: 10.0,
            init_scale: 0.5,
            ..TrainConfig::new(2)
        };
        assert!(matches!(
            gd_fit(&[x], &w, P, G, 1e-8, 4, &cfg),
            Err(LynxError::Training { .. })
        ));
    }

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let pair = LoraPair::new(gauss(4, 2, 16), gauss(2, 8, 17)).unwrap();
        let side = LoraSidecar {
            rank: 2,
            d_out: 4,
            d_in: 8,
            solver: "rrr".into(),
            layer: Some("0.attn.to_q".into()),
            pattern: P,
            granularity: G,
            eps: 1e-8,
            seed: None,
            train: None,
            final_loss: 1.5,
            rank_deficient: false,
        };
        pair.save(dir.path(), &side).unwrap();
        let (back, s2) = LoraPair::load(dir.path()).unwrap();
        assert_eq!(back, pair);
        assert_eq!(s2, side);
    }
}
