//! Build a zoo model, write it to disk, read it back and check the digest
//! and outputs survive the round trip.
//!
//! cargo run --release --example build_and_save -- [family] [seed] [path]

use fuseprune::graph::{execute, format};
use fuseprune::tensor::{DType, Tensor};
use fuseprune::zoo::{build, Family, ZooSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let family: Family = args.first().map_or(Ok(Family::Resnet20), |s| s.parse())?;
    let seed: u64 = args.get(1).map_or(Ok(0), |s| s.parse())?;
    let path = args
        .get(2)
        .cloned()
        .unwrap_or_else(|| std::env::temp_dir().join("model.fpm").display().to_string());

    let g = build(&ZooSpec::new(family, seed))?;
    format::save(&g, &path)?;
    let bytes = std::fs::read(&path)?;
    let back = format::load(&path)?;
    println!("{} nodes, {} bytes written to {path}", g.len(), bytes.len());

    let x = Tensor::full(g.input_shape(), DType::F32, 0.5);
    let same = execute(&g, &x)?.bit_eq(&execute(&back, &x)?);
    println!("reloaded model reproduces outputs bit for bit: {same}");
    println!(
        "re-encoding is byte identical: {}",
        format::to_bytes(&back)? == bytes
    );
    Ok(())
}
