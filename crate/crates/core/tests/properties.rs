use lynx_core::analysis::{histogram, rfe};
use lynx_core::lowrank::{rrr_fit, slim_init, CompensationProblem, LoraPair};
use lynx_core::sparsify::{
    prune_weights, score_weights, topk_mask, CompensationGranularity, ScoreSpec,
};
use lynx_core::spmm::{
    dense_gemm_counted, fused_sparse_linear_full, spmm, spmm_counted, staged_sparse_linear,
    KernelConfig,
};
use lynx_core::tensor::{column_l2_norms, frobenius_norm, gemm, sample, DenseMatrix, RandomSpec};
use lynx_core::{pack, sparsify_activation, unpack, NMPattern};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-10.0f32..10.0, rows * cols)
        .prop_map(move |d| DenseMatrix::new(rows, cols, d).unwrap())
}

fn shaped(max_rows: usize, max_groups: usize, m: usize) -> impl Strategy<Value = DenseMatrix> {
    (1..=max_rows, 1..=max_groups).prop_flat_map(move |(r, g)| matrix(r, g * m))
}

fn pattern() -> impl Strategy<Value = NMPattern> {
    prop::sample::select(vec![(1u8, 2u8), (2, 4), (4, 8), (1, 4), (3, 8)])
        .prop_map(|(n, m)| NMPattern::new(n, m).unwrap())
}

fn with_pattern(
    max_rows: usize,
    max_groups: usize,
) -> impl Strategy<Value = (NMPattern, DenseMatrix)> {
    pattern().prop_flat_map(move |p| (Just(p), shaped(max_rows, max_groups, p.m())))
}

fn rel(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    frobenius_norm(&a.sub(b).unwrap()) / frobenius_norm(b).max(1e-30)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gemm_identity(x in (1usize..12, 1usize..12).prop_flat_map(|(r, c)| matrix(r, c))) {
        let y = gemm(&x, &DenseMatrix::identity(x.cols())).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn gemm_submultiplicative(
        (x, w) in (1usize..10, 1usize..10, 1usize..10).prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(n, k)))
    ) {
        let y = gemm(&x, &w).unwrap();
        prop_assert!(frobenius_norm(&y) <= frobenius_norm(&x) * frobenius_norm(&w) * (1.0 + 1e-5));
    }

    #[test]
    fn column_norms_match_columns(x in (1usize..10, 1usize..10).prop_flat_map(|(r, c)| matrix(r, c))) {
        let norms = column_l2_norms(&x);
        for (j, n) in norms.iter().enumerate() {
            let f = frobenius_norm(&x.column(j));
            prop_assert!((*n as f64 - f).abs() <= 1e-5 * f.max(1.0));
        }
    }

    #[test]
    fn sample_is_reproducible(seed in any::<u64>(), r in 1usize..20, c in 1usize..20) {
        let spec = RandomSpec::spike_slab(0.1, 0.01, 1.0, seed);
        prop_assert_eq!(sample(&spec, r, c).unwrap(), sample(&spec, r, c).unwrap());
    }

    #[test]
    fn pack_roundtrip((p, x) in with_pattern(8, 6)) {
        let masked = topk_mask(&x, p).unwrap().apply(&x).unwrap();
        let packed = pack(&masked, p).unwrap();
        prop_assert!(packed.validate().is_empty());
        prop_assert_eq!(packed.values().len() * p.m(), x.rows() * x.cols() * p.n());
        let back = unpack(&packed).unwrap();
        prop_assert_eq!(back.to_le_bytes(), masked.to_le_bytes());
    }

    #[test]
    fn topk_is_optimal_and_scale_invariant((p, x) in with_pattern(4, 4), c in 0.01f32..100.0) {
        let mask = topk_mask(&x, p).unwrap();
        let (n, m) = (p.n(), p.m());
        for i in 0..x.rows() {
            for g in 0..x.cols() / m {
                let grp = &x.row(i)[g * m..(g + 1) * m];
                let kept: f32 = (0..m).filter(|&j| mask.get(i, g * m + j)).map(|j| grp[j] * grp[j]).sum();
                prop_assert_eq!((0..m).filter(|&j| mask.get(i, g * m + j)).count(), n);
                let mut sorted: Vec<f32> = grp.iter().map(|v| v * v).collect();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let best: f32 = sorted[..n].iter().sum();
                prop_assert!(kept >= best * (1.0 - 1e-6));
            }
        }
        prop_assert_eq!(topk_mask(&x.scale(c), p).unwrap(), mask);
    }

    #[test]
    fn per_tensor_norm_preserved((p, x) in with_pattern(6, 6)) {
        prop_assume!(frobenius_norm(&x) > 1e-3);
        let (_, sx) = sparsify_activation(&x, p, CompensationGranularity::PerTensor, 1e-8).unwrap();
        let ratio = frobenius_norm(&sx) / frobenius_norm(&x);
        prop_assert!((ratio - 1.0).abs() <= 1e-5, "ratio {}", ratio);
    }

    #[test]
    fn sparsify_is_idempotent((p, x) in with_pattern(6, 6)) {
        let (_, sx) = sparsify_activation(&x, p, CompensationGranularity::PerTensor, 1e-8).unwrap();
        let (_, again) = sparsify_activation(&sx, p, CompensationGranularity::None, 1e-8).unwrap();
        prop_assert_eq!(again, sx);
    }

    #[test]
    fn pruned_weights_pack(
        (p, w) in with_pattern(6, 6),
        spec in prop::sample::select(vec![ScoreSpec::Magnitude, ScoreSpec::Wanda, ScoreSpec::ria(), ScoreSpec::bawa()]),
    ) {
        let norms: Vec<f32> = (0..w.cols()).map(|j| 0.5 + j as f32 * 0.1).collect();
        let scores = score_weights(&w, spec.needs_norms().then_some(&norms[..]), spec).unwrap();
        let pruned = prune_weights(&w, &scores, p).unwrap();
        prop_assert!(pack(&pruned, p).unwrap().validate().is_empty());
    }

    #[test]
    fn wanda_unit_norms_is_magnitude(w in (1usize..8, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c))) {
        let ones = vec![1.0f32; w.cols()];
        let a = score_weights(&w, Some(&ones), ScoreSpec::Wanda).unwrap();
        let b = score_weights(&w, None, ScoreSpec::Magnitude).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn spmm_is_linear(
        (x, w1, w2) in (1usize..12, 1usize..6, 1usize..12)
            .prop_flat_map(|(m, g, n)| (matrix(m, 4 * g), matrix(n, 4 * g), matrix(n, 4 * g)))
    ) {
        let p = NMPattern::TWO_FOUR;
        let packed = pack(&topk_mask(&x, p).unwrap().apply(&x).unwrap(), p).unwrap();
        let cfg = KernelConfig { tile_k: 8, tile_m: 3, tile_n: 5, ..KernelConfig::default() };
        let lhs = spmm(&packed, &w1.add(&w2).unwrap(), &cfg).unwrap();
        let rhs = spmm(&packed, &w1, &cfg).unwrap().add(&spmm(&packed, &w2, &cfg).unwrap()).unwrap();
        let scale = frobenius_norm(&lhs).max(1.0);
        prop_assert!(frobenius_norm(&lhs.sub(&rhs).unwrap()) <= 1e-5 * scale);
    }

    #[test]
    fn spmm_matches_gemm_and_halves_work(
        (p, x) in with_pattern(10, 8), n in 1usize..12, seed in any::<u64>()
    ) {
        let w = sample(&RandomSpec::gaussian(0.0, 1.0, seed), n, x.cols()).unwrap();
        let masked = topk_mask(&x, p).unwrap().apply(&x).unwrap();
        let cfg = KernelConfig { tile_k: p.m() * 2, ..KernelConfig::default() };
        let (y, sparse) = spmm_counted(&pack(&masked, p).unwrap(), &w, &cfg).unwrap();
        let (yd, dense) = dense_gemm_counted(&masked, &w, &cfg).unwrap();
        prop_assert!(rel(&y, &yd) <= 1e-5 || frobenius_norm(&yd) < 1e-6);
        prop_assert_eq!(sparse * p.m() as u64, dense * p.n() as u64);
    }

    #[test]
    fn fused_equals_staged(
        (p, x) in with_pattern(20, 6),
        g in prop::sample::select(CompensationGranularity::ALL.to_vec()),
        seed in any::<u64>(),
        parallel in any::<bool>(),
    ) {
        prop_assume!(frobenius_norm(&x) > 0.0);
        let w = sample(&RandomSpec::gaussian(0.0, 1.0, seed), 7, x.cols()).unwrap();
        let cfg = KernelConfig { tile_m: 4, tile_n: 3, tile_k: p.m() * 2, parallel_rows: parallel };
        let f = fused_sparse_linear_full(&x, &w, p, g, 1e-8, &cfg).unwrap();
        let s = staged_sparse_linear(&x, &w, p, g, 1e-8, &cfg).unwrap();
        prop_assert_eq!(f.y.to_le_bytes(), s.y.to_le_bytes());
        let t = f.timing;
        prop_assert!(t.sparsify_ns + t.pack_ns + t.multiply_ns <= t.total_ns + 1_000_000);
    }

    #[test]
    fn rfe_scale_invariant(
        (a, b) in (1usize..8, 1usize..8).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c))),
        c in prop::sample::select(vec![-3.0f32, -0.5, 0.25, 2.0, 8.0]),
    ) {
        prop_assume!(frobenius_norm(&a) > 1e-3);
        let r0 = rfe(&a, &b).unwrap();
        let r1 = rfe(&a.scale(c), &b.scale(c)).unwrap();
        prop_assert!((r0 - r1).abs() <= 1e-5 * r0.max(1.0));
    }

    #[test]
    fn histogram_conserves_counts(x in (1usize..20, 1usize..20).prop_flat_map(|(r, c)| matrix(r, c))) {
        prop_assume!(x.max_abs() > 0.0);
        let h = histogram(&x).unwrap();
        prop_assert_eq!(h.total(), (x.rows() * x.cols()) as u64);
        prop_assert!(h.counts[0] > 0 || h.counts[h.counts.len() - 1] > 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gradient_matches_finite_differences(seed in any::<u64>()) {
        let p = NMPattern::TWO_FOUR;
        let x = sample(&RandomSpec::spike_slab(0.2, 0.05, 1.0, seed), 6, 8).unwrap();
        let w = sample(&RandomSpec::gaussian(0.0, 0.5, seed ^ 1), 5, 8).unwrap();
        let la = sample(&RandomSpec::gaussian(0.0, 0.3, seed ^ 2), 5, 2).unwrap();
        let lb = sample(&RandomSpec::gaussian(0.0, 0.3, seed ^ 3), 2, 8).unwrap();
        let prob = CompensationProblem::new(&x, &w, p, CompensationGranularity::PerTensor, 1e-8).unwrap();
        let lora = LoraPair::new(la.clone(), lb.clone()).unwrap();
        let (_, ga, gb) = prob.loss_and_gradient(&lora).unwrap();
        let h = 1e-2f32;
        let fd = |la: &DenseMatrix, lb: &DenseMatrix, which: bool, idx: usize| {
            let bump = |m: &DenseMatrix, d: f32| {
                let mut v = m.data().to_vec();
                v[idx] += d;
                DenseMatrix::new(m.rows(), m.cols(), v).unwrap()
            };
            let eval = |d: f32| {
                let pair = if which { LoraPair::new(bump(la, d), lb.clone()) } else { LoraPair::new(la.clone(), bump(lb, d)) };
                prob.loss(&pair.unwrap()).unwrap()
            };
            (eval(h) - eval(-h)) / (2.0 * h as f64)
        };
        for (which, g) in [(true, &ga), (false, &gb)] {
            let num: Vec<f64> = (0..g.data().len()).map(|i| fd(&la, &lb, which, i)).collect();
            let diff: f64 = num.iter().zip(g.data()).map(|(a, b)| (a - *b as f64).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!(diff <= 1e-3 * norm.max(1e-6), "rel {}", diff / norm);
        }
    }

    #[test]
    fn residuals_monotone_in_rank(seed in any::<u64>()) {
        let p = NMPattern::TWO_FOUR;
        let x = sample(&RandomSpec::spike_slab(0.1, 0.01, 1.0, seed), 48, 16).unwrap();
        let w = sample(&RandomSpec::gaussian(0.0, 0.25, seed ^ 9), 12, 16).unwrap();
        let pruned = prune_weights(&w, &score_weights(&w, None, ScoreSpec::Magnitude).unwrap(), p).unwrap();
        let delta = w.sub(&pruned).unwrap();
        let mut last = (f64::INFINITY, f64::INFINITY);
        for r in [1, 2, 4, 8, 12] {
            let l = rrr_fit(&x, &w, p, CompensationGranularity::PerTensor, 1e-8, r).unwrap().loss;
            let s = lynx_core::lowrank::reconstruction_error(&delta, &slim_init(&w, &pruned, r).unwrap()).unwrap();
            prop_assert!(l <= last.0 * (1.0 + 1e-9) + 1e-9);
            prop_assert!(s <= last.1 * (1.0 + 1e-9) + 1e-9);
            last = (l, s);
        }
    }
}
