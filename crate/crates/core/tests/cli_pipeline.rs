use std::process::{Command, Output};

use fuseprune::cli::raw;
use fuseprune::graph::{execute, format};
use fuseprune::tensor::{DType, Shape, Tensor};

struct Dir(tempfile::TempDir);

impl Dir {
    fn new() -> Self {
        Dir(tempfile::tempdir().unwrap())
    }

    fn p(&self, name: &str) -> String {
        self.0.path().join(name).to_str().unwrap().to_string()
    }
}

fn fp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fuseprune"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = fp(args);
    assert!(
        o.status.success(),
        "{args:?} exited {:?}: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    fp(args).status.code().unwrap()
}

#[test]
fn fuse_prune_materialize_round_trip() {
    let d = Dir::new();
    ok(&[
        "build-model",
        "resnet8-tiny",
        "--seed",
        "5",
        "--init",
        "kaiming-random-bn",
        "-o",
        &d.p("m.fpm"),
    ]);
    let out = ok(&[
        "fuse",
        &d.p("m.fpm"),
        "--option",
        "3/3",
        "-o",
        &d.p("f.fpm"),
        "--report",
        &d.p("r.json"),
    ]);
    assert!(out.starts_with("fused 3 blocks"), "{out}");
    ok(&[
        "verify",
        "--lhs",
        &d.p("m.fpm"),
        "--rhs",
        &d.p("f.fpm"),
        "--trials",
        "10",
        "--seed",
        "1",
    ]);

    let out = ok(&[
        "prune",
        &d.p("f.fpm"),
        "--mode",
        "continued",
        "--rate",
        "0.2",
        "--epochs",
        "2",
        "--data",
        "synth:seed=7,n=64",
        "--report",
        &d.p("r.json"),
        "-o",
        &d.p("p.fpm"),
        "--masks",
        &d.p("masks.json"),
    ]);
    assert!(out.contains("epoch   2 loss"), "{out}");
    assert!(out.contains("filters zeroized"), "{out}");

    let out = ok(&[
        "materialize",
        &d.p("p.fpm"),
        "--masks",
        &d.p("masks.json"),
        "--report",
        &d.p("r.json"),
        "-o",
        &d.p("small.fpm"),
    ]);
    assert!(out.contains("removed"), "{out}");
    ok(&[
        "verify",
        "--lhs",
        &d.p("p.fpm"),
        "--rhs",
        &d.p("small.fpm"),
        "--trials",
        "10",
        "--seed",
        "2",
    ]);

    let masked = format::load(d.p("p.fpm")).unwrap();
    let small = format::load(d.p("small.fpm")).unwrap();
    let before = fuseprune::analysis::count_flops(&masked)
        .unwrap()
        .total_flops();
    let after = fuseprune::analysis::count_flops(&small)
        .unwrap()
        .total_flops();
    assert!(after < before, "{after} >= {before}");
    let cmp = ok(&["flops", &d.p("small.fpm"), "--compare", &d.p("p.fpm")]);
    assert!(!cmp.is_empty());
}

#[test]
fn every_fusion_option_verifies() {
    let d = Dir::new();
    ok(&[
        "build-model",
        "resnet20",
        "--seed",
        "11",
        "--init",
        "kaiming-calibrated-bn",
        "-o",
        &d.p("m.fpm"),
    ]);
    for opt in ["0/3", "1/3", "2/3", "3/3", "(0,1,0)", "(1,0,1)"] {
        ok(&[
            "fuse",
            &d.p("m.fpm"),
            "--option",
            opt,
            "-o",
            &d.p("f.fpm"),
            "--report",
            &d.p("r.json"),
        ]);
        let out = ok(&[
            "verify",
            "--lhs",
            &d.p("m.fpm"),
            "--rhs",
            &d.p("f.fpm"),
            "--trials",
            "3",
            "--seed",
            "9",
        ]);
        assert!(out.ends_with("ok\n"), "{opt}: {out}");
    }
}

#[test]
fn infer_matches_library_execution() {
    let d = Dir::new();
    ok(&[
        "build-model",
        "resnet8-tiny",
        "--seed",
        "2",
        "--dtype",
        "f64",
        "-o",
        &d.p("m.fpm"),
    ]);
    let g = format::load(d.p("m.fpm")).unwrap();
    let s = g.input_shape();
    let shape = Shape::new(3, s.c, s.h, s.w);
    let v: Vec<f64> = (0..shape.len())
        .map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0)
        .collect();
    let x = Tensor::from_f64(shape, DType::F64, &v).unwrap();
    raw::write(&mut std::fs::File::create(d.p("x.raw")).unwrap(), &x).unwrap();
    ok(&[
        "infer",
        &d.p("m.fpm"),
        "--input",
        &d.p("x.raw"),
        "--output",
        &d.p("y.raw"),
    ]);
    let y = raw::read(&mut std::fs::File::open(d.p("y.raw")).unwrap()).unwrap();
    assert!(y.bit_eq(&execute(&g, &x).unwrap()));
}

#[test]
fn fold_bn_keeps_outputs() {
    let d = Dir::new();
    ok(&[
        "build-model",
        "resnet8-tiny",
        "--seed",
        "4",
        "--init",
        "kaiming-random-bn",
        "-o",
        &d.p("m.fpm"),
    ]);
    ok(&["fold-bn", &d.p("m.fpm"), "-o", &d.p("folded.fpm")]);
    ok(&[
        "verify",
        "--lhs",
        &d.p("m.fpm"),
        "--rhs",
        &d.p("folded.fpm"),
        "--trials",
        "5",
        "--seed",
        "3",
    ]);
}

#[test]
fn profile_feeds_speedup() {
    let d = Dir::new();
    ok(&[
        "build-model",
        "resnet8-tiny",
        "--seed",
        "1",
        "-o",
        &d.p("m.fpm"),
    ]);
    ok(&[
        "profile",
        &d.p("m.fpm"),
        "--runs",
        "3",
        "--seed",
        "0",
        "--write-profile",
        &d.p("prof.txt"),
    ]);
    let text = std::fs::read_to_string(d.p("prof.txt")).unwrap();
    assert!(text.lines().any(|l| l.starts_with("cop ")), "{text}");
    let out = ok(&[
        "speedup",
        "--profile",
        &d.p("prof.txt"),
        "--accelerated",
        "cop",
        "--factor",
        "1",
    ]);
    assert!(out.starts_with("1.0000\n"), "{out}");
    assert_eq!(ok(&["speedup", "--p", "0.5", "--a", "2"]), "1.3333\n");
}

#[test]
fn exit_codes() {
    let d = Dir::new();
    // usage and validation errors
    assert_eq!(code(&["build-model", "resnet20", "-o", &d.p("m.fpm")]), 2);
    assert_eq!(
        code(&[
            "build-model",
            "resnet99",
            "--seed",
            "1",
            "-o",
            &d.p("m.fpm")
        ]),
        2
    );
    assert_eq!(code(&["speedup", "--p", "1.2", "--a", "2"]), 2);
    // i/o
    assert_eq!(code(&["flops", &d.p("missing.fpm")]), 4);
    std::fs::write(d.p("junk.fpm"), b"not a model").unwrap();
    assert_ne!(code(&["flops", &d.p("junk.fpm")]), 0);

    ok(&[
        "build-model",
        "resnet8-tiny",
        "--seed",
        "1",
        "-o",
        &d.p("a.fpm"),
    ]);
    ok(&[
        "build-model",
        "resnet8-tiny",
        "--seed",
        "2",
        "-o",
        &d.p("b.fpm"),
    ]);
    assert_eq!(
        code(&[
            "fuse",
            &d.p("a.fpm"),
            "--option",
            "4/3",
            "-o",
            &d.p("f.fpm"),
            "--report",
            &d.p("r.json")
        ]),
        2
    );
    // distinct weights are not equivalent
    assert_eq!(
        code(&[
            "verify",
            "--lhs",
            &d.p("a.fpm"),
            "--rhs",
            &d.p("b.fpm"),
            "--trials",
            "2",
            "--seed",
            "0"
        ]),
        3
    );
}
