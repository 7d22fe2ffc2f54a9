//! Fuses zoo models under every stage option and reports the worst output
//! difference against the unfused network.
//!
//! cargo run --release --example fuse_equivalence -- [seeds] [init] [side]

use std::time::Instant;

use fuseprune::fusion::{fuse, FuseOptions, FusionOption};
use fuseprune::graph::execute;
use fuseprune::tensor::{DType, Shape, Tensor};
use fuseprune::zoo::{build, Family, InitRule, ZooSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().map_or(Ok(3), |s| s.parse())?;
    let init: InitRule = args
        .get(1)
        .map_or(Ok(InitRule::KaimingCalibratedBn), |s| s.parse())?;
    let side: usize = args.get(2).map_or(Ok(32), |s| s.parse())?;
    for dtype in [DType::F32, DType::F64] {
        for family in [Family::Resnet20, Family::Resnet32, Family::Resnet18] {
            let t = Instant::now();
            let stages = family.stages().len();
            let mut worst = 0.0f64;
            let mut scale = 0.0f64;
            for seed in 0..seeds {
                let g = build(
                    &ZooSpec::new(family, seed)
                        .init(init)
                        .input(Shape::new(1, 3, side, side))
                        .dtype(dtype),
                )?;
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let v: Vec<f64> = (0..g.input_shape().len())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect();
                let x = Tensor::from_f64(g.input_shape(), dtype, &v)?;
                let y = execute(&g, &x)?;
                scale = y.to_f64_vec().iter().fold(scale, |m, v| m.max(v.abs()));
                for fused in 1..=stages {
                    let (f, _) = fuse(
                        &g,
                        &FusionOption::Stages {
                            fused,
                            total: stages,
                        },
                        FuseOptions::default(),
                    )?;
                    let d = y.max_abs_diff(&execute(&f, &x)?)?;
                    worst = worst.max(d);
                }
            }
            println!(
                "{:<10} {:<4} seeds={seeds} worst={worst:.3e} max|y|={scale:.3e} ({:.2?})",
                family.name(),
                dtype.name(),
                t.elapsed()
            );
        }
    }
    Ok(())
}
