//! Fuse a model, zeroize the lowest-norm filters once and physically remove
//! them. The shrunken model must match the masked one.
//!
//! cargo run --release --example prune_materialize -- [rate] [seed]

use fuseprune::analysis::{compare, count_flops};
use fuseprune::fusion::{fuse, FuseOptions, FusionOption};
use fuseprune::graph::execute;
use fuseprune::pruning::{materialize, soft_prune_epoch, PruneConfig};
use fuseprune::tensor::{DType, Tensor};
use fuseprune::zoo::{build, Family, ZooSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let rate: f64 = args.first().map_or(Ok(0.2), |s| s.parse())?;
    let seed: u64 = args.get(1).map_or(Ok(0), |s| s.parse())?;

    let g = build(&ZooSpec::new(Family::Resnet20, seed).dtype(DType::F64))?;
    let (mut fused, report) = fuse(&g, &FusionOption::all(3), FuseOptions::default())?;
    let mask = soft_prune_epoch(&mut fused, &report, &PruneConfig::continued(rate, 1))?;
    println!("{} filters zeroized", mask.zeroized_total());

    let (small, summary) = materialize(&fused, &mask, &report)?;
    for (id, removed) in &summary.removed {
        println!("{id:<28} -{:<3} -> {}", removed.len(), summary.filters[id]);
    }
    let v: Vec<f64> = (0..g.input_shape().len())
        .map(|i| (i as f64 * 0.11).cos())
        .collect();
    let x = Tensor::from_f64(g.input_shape(), DType::F64, &v)?;
    println!(
        "masked vs materialized {:.3e}",
        execute(&fused, &x)?.max_abs_diff(&execute(&small, &x)?)?
    );
    println!("{}", compare(&count_flops(&g)?, &count_flops(&small)?));
    Ok(())
}
