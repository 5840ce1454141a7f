use std::path::Path;
use std::process::{Command, Output};

use lynx_core::io::{load_dense, save_dense, save_packed};
use lynx_core::lowrank::{rrr_fit, LoraPair};
use lynx_core::model::{build_stack, forward, ExecPolicy, Preset, Stack, StackConfig};
use lynx_core::sparsify::CompensationGranularity;
use lynx_core::spmm::{fused_sparse_linear, spmm, KernelConfig};
use lynx_core::tensor::{sample, DenseMatrix, RandomSpec};
use lynx_core::{pack, sparsify_activation, NMPattern};
use tempfile::TempDir;

fn lynx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lynx"))
        .args(args)
        .env_remove("LYNX_THREADS")
        .output()
        .expect("binary runs")
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn bytes(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

fn activations(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    sample(&RandomSpec::spike_slab(0.1, 0.01, 1.0, seed), rows, cols).unwrap()
}

#[test]
fn sparsify_matches_library_bytes() {
    let d = TempDir::new().unwrap();
    let x = activations(8, 16, 1);
    save_dense(p(&d, "x.lynx"), &x).unwrap();
    let out = lynx(&[
        "sparsify",
        "--in",
        &p(&d, "x.lynx"),
        "--pattern",
        "2:4",
        "--granularity",
        "per-tensor",
        "--eps",
        "1e-8",
        "--out",
        &p(&d, "sx.lynx"),
        "--scale-out",
        &p(&d, "s.json"),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let (record, sx) = sparsify_activation(
        &x,
        NMPattern::TWO_FOUR,
        CompensationGranularity::PerTensor,
        1e-8,
    )
    .unwrap();
    save_dense(p(&d, "lib.lynx"), &sx).unwrap();
    assert_eq!(bytes(p(&d, "sx.lynx")), bytes(p(&d, "lib.lynx")));
    let expected = serde_json::to_string_pretty(&record).unwrap() + "\n";
    assert_eq!(bytes(p(&d, "s.json")), expected.into_bytes());
}

#[test]
fn pack_and_spmm_match_library() {
    let d = TempDir::new().unwrap();
    let x = activations(10, 32, 2);
    let w = sample(&RandomSpec::gaussian(0.0, 0.2, 3), 12, 32).unwrap();
    let (_, sx) = sparsify_activation(
        &x,
        NMPattern::TWO_FOUR,
        CompensationGranularity::PerTensor,
        1e-8,
    )
    .unwrap();
    save_dense(p(&d, "sx.lynx"), &sx).unwrap();
    save_dense(p(&d, "w.lynx"), &w).unwrap();
    save_dense(p(&d, "x.lynx"), &x).unwrap();

    assert!(lynx(&[
        "pack",
        "--in",
        &p(&d, "sx.lynx"),
        "--out",
        &p(&d, "sx.packed.lynx")
    ])
    .status
    .success());
    let packed = pack(&sx, NMPattern::TWO_FOUR).unwrap();
    save_packed(p(&d, "lib.packed.lynx"), &packed).unwrap();
    assert_eq!(
        bytes(p(&d, "sx.packed.lynx")),
        bytes(p(&d, "lib.packed.lynx"))
    );

    let out = lynx(&[
        "spmm",
        "--in",
        &p(&d, "sx.packed.lynx"),
        "--weight",
        &p(&d, "w.lynx"),
        "--out",
        &p(&d, "y.lynx"),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        load_dense(p(&d, "y.lynx")).unwrap(),
        spmm(&packed, &w, &KernelConfig::default()).unwrap()
    );

    let out = lynx(&[
        "spmm",
        "--in",
        &p(&d, "x.lynx"),
        "--weight",
        &p(&d, "w.lynx"),
        "--out",
        &p(&d, "yf.lynx"),
        "--timing-out",
        &p(&d, "t.json"),
    ]);
    assert!(out.status.success());
    let (yf, _) = fused_sparse_linear(
        &x,
        &w,
        NMPattern::TWO_FOUR,
        CompensationGranularity::PerTensor,
        1e-8,
        &KernelConfig::default(),
    )
    .unwrap();
    assert_eq!(
        load_dense(p(&d, "yf.lynx")).unwrap().to_le_bytes(),
        yf.to_le_bytes()
    );
}

#[test]
fn pack_rejects_dense_input_with_data_error() {
    let d = TempDir::new().unwrap();
    save_dense(p(&d, "x.lynx"), &activations(4, 8, 4).map(|v| v + 1.0)).unwrap();
    let out = lynx(&["pack", "--in", &p(&d, "x.lynx"), "--out", &p(&d, "o.lynx")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes_follow_contract() {
    assert_eq!(lynx(&["sparsify", "--bogus"]).status.code(), Some(1));
    let out = lynx(&["sparsify", "--in", "a", "--out", "b", "--pattern", "2-4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("N:M"));
    assert_eq!(
        lynx(&["validate", "/nonexistent/file.lynx"]).status.code(),
        Some(2)
    );
    assert_eq!(
        lynx(&["stack-build", "--out", "/tmp/x"]).status.code(),
        Some(1)
    );
    assert_eq!(lynx(&["--help"]).status.code(), Some(0));

    let d = TempDir::new().unwrap();
    std::fs::write(p(&d, "junk.lynx"), b"NOPE").unwrap();
    assert_eq!(
        lynx(&["validate", &p(&d, "junk.lynx")]).status.code(),
        Some(2)
    );

    let mut x = activations(2, 8, 5);
    x = x.map(|v| if v > 0.0 { f32::NAN } else { v });
    save_dense(p(&d, "nan.lynx"), &x).unwrap();
    let out = lynx(&[
        "sparsify",
        "--in",
        &p(&d, "nan.lynx"),
        "--out",
        &p(&d, "o.lynx"),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn stack_fit_and_validate_roundtrip() {
    let d = TempDir::new().unwrap();
    let stack_dir = p(&d, "stack");
    let out = lynx(&[
        "stack-build",
        "--preset",
        "qwen-like",
        "--depth",
        "2",
        "--scale",
        "16",
        "--seed",
        "7",
        "--out",
        &stack_dir,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stack = Stack::load(&stack_dir).unwrap();
    assert_eq!(
        stack,
        build_stack(&StackConfig::new(Preset::QwenLike, 2, 16, 7)).unwrap()
    );

    let x = activations(128, stack.d_model, 8);
    save_dense(p(&d, "x.lynx"), &x).unwrap();
    let out = lynx(&[
        "fit",
        "--stack",
        &stack_dir,
        "--layer",
        "transformer_blocks.1.img_mlp.net.2",
        "--rank",
        "8",
        "--solver",
        "rrr",
        "--batch",
        &p(&d, "x.lynx"),
        "--out",
        &p(&d, "lora"),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (pair, sidecar) = LoraPair::load(p(&d, "lora")).unwrap();
    let i = stack
        .layer_index("transformer_blocks.1.img_mlp.net.2")
        .unwrap();
    let inputs = forward(&stack, &x, &ExecPolicy::dense())
        .unwrap()
        .layer_inputs;
    let fit = rrr_fit(
        &inputs[i],
        &stack.layers[i].weight,
        NMPattern::TWO_FOUR,
        CompensationGranularity::PerTensor,
        1e-8,
        8,
    )
    .unwrap();
    assert_eq!(pair, fit.lora);
    assert_eq!(sidecar.rank, 8);

    let out = lynx(&[
        "fit",
        "--stack",
        &stack_dir,
        "--layer",
        "img_mlp.net.2",
        "--rank",
        "4",
        "--solver",
        "gd",
        "--steps",
        "5",
        "--seed",
        "3",
        "--batch",
        &p(&d, "x.lynx"),
        "--out",
        &p(&d, "multi"),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for b in 0..2 {
        assert!(d
            .path()
            .join(format!(
                "multi/transformer_blocks.{b}.img_mlp.net.2/lora.json"
            ))
            .exists());
    }
    let no_seed = lynx(&[
        "fit",
        "--stack",
        &stack_dir,
        "--layer",
        "img_mlp.net.2",
        "--solver",
        "gd",
        "--batch",
        &p(&d, "x.lynx"),
        "--out",
        &p(&d, "z"),
    ]);
    assert_eq!(no_seed.status.code(), Some(1));
    let missing = lynx(&[
        "fit",
        "--stack",
        &stack_dir,
        "--layer",
        "nope",
        "--batch",
        &p(&d, "x.lynx"),
        "--out",
        &p(&d, "z"),
    ]);
    assert_eq!(missing.status.code(), Some(2));

    let out = lynx(&[
        "sweep",
        "--stack",
        &stack_dir,
        "--tokens",
        "32",
        "--input-seed",
        "1",
        "--json",
        &p(&d, "sweep.json"),
        "--csv",
        &p(&d, "sweep.csv"),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = lynx(&[
        "compare",
        "--stack",
        &stack_dir,
        "--tokens",
        "64",
        "--input-seed",
        "2",
        "--rank",
        "8",
        "--json",
        &p(&d, "cmp.json"),
        "--csv",
        &p(&d, "cmp.csv"),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&bytes(p(&d, "cmp.json"))).unwrap();
    assert_eq!(report["schema"], "lynx-report/1");
    assert_eq!(report["comparison"]["methods"].as_array().unwrap().len(), 3);

    let written = [
        stack_dir.clone(),
        p(&d, "x.lynx"),
        p(&d, "lora"),
        p(&d, "multi/transformer_blocks.0.img_mlp.net.2"),
        p(&d, "sweep.json"),
        p(&d, "sweep.csv"),
        p(&d, "cmp.json"),
        p(&d, "cmp.csv"),
    ];
    let args: Vec<&str> = std::iter::once("validate")
        .chain(written.iter().map(String::as_str))
        .collect();
    let out = lynx(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn sweep_requires_seeds() {
    assert_eq!(
        lynx(&[
            "sweep",
            "--preset",
            "qwen-like",
            "--depth",
            "1",
            "--input-seed",
            "1"
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(
        lynx(&[
            "sweep",
            "--preset",
            "qwen-like",
            "--depth",
            "1",
            "--seed",
            "1"
        ])
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn bench_writes_csv_to_stdout() {
    let d = TempDir::new().unwrap();
    let out = lynx(&[
        "--threads",
        "1",
        "bench",
        "--m",
        "16",
        "--n",
        "16",
        "--k",
        "32",
        "--repeats",
        "3",
        "--warmup",
        "0",
        "--lora-rank",
        "4",
        "--json",
        &p(&d, "bench.json"),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("m,n,k,pattern,dense_ms,staged_ms,fused_ms"));
    assert_eq!(csv.lines().count(), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not comparable"));
    assert!(lynx(&["validate", &p(&d, "bench.json")]).status.success());
    assert_eq!(
        lynx(&[
            "bench",
            "--repeats",
            "2",
            "--m",
            "4",
            "--n",
            "4",
            "--k",
            "8"
        ])
        .status
        .code(),
        Some(1)
    );
}
