//! Fold every batch norm into the preceding convolution and compare the
//! node counts and outputs.
//!
//! cargo run --release --example fold_bn -- [seed]

use fuseprune::fusion::fold_bn;
use fuseprune::graph::{execute, OpKind};
use fuseprune::tensor::{DType, Tensor};
use fuseprune::zoo::{build, Family, InitRule, ZooSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let g = build(
        &ZooSpec::new(Family::Resnet20, seed)
            .init(InitRule::KaimingRandomBn)
            .dtype(DType::F64),
    )?;
    let folded = fold_bn(&g)?;
    println!(
        "bn nodes {} -> {}, total nodes {} -> {}",
        g.count_kind(OpKind::Bn),
        folded.count_kind(OpKind::Bn),
        g.len(),
        folded.len()
    );
    let v: Vec<f64> = (0..g.input_shape().len())
        .map(|i| (i as f64 * 0.37).sin())
        .collect();
    let x = Tensor::from_f64(g.input_shape(), DType::F64, &v)?;
    println!(
        "max abs difference {:.3e}",
        execute(&g, &x)?.max_abs_diff(&execute(&folded, &x)?)?
    );
    Ok(())
}
