//! Time each operator category and predict the end-to-end speedup of
//! accelerating convolutions and fully connected layers.
//!
//! cargo run --release --example profile_speedup -- [runs] [factor]

use fuseprune::analysis::{parse_profile, profile, profile_speedup, speedup, Category};
use fuseprune::tensor::{DType, Tensor};
use fuseprune::zoo::{build, Family, ZooSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let runs: usize = args.first().map_or(Ok(10), |s| s.parse())?;
    let factor: f64 = args.get(1).map_or(Ok(4.0), |s| s.parse())?;

    let g = build(&ZooSpec::new(Family::Resnet20, 0))?;
    let x = Tensor::full(g.input_shape(), DType::F32, 0.25);
    let r = profile(&g, &x, runs)?;
    println!("{r}");

    let p = r.share(Category::Cop);
    println!(
        "cop share {p:.4}, speedup at {factor}x {:.4}",
        speedup(p, factor)?
    );

    let text = r.profile_text().expect("profiled report is timed");
    let (p, s) = profile_speedup(&parse_profile(&text)?, &["cop".to_string()], factor)?;
    println!("from profile text: fraction {p:.4}, speedup {s:.4}");
    Ok(())
}
