//! Count FLOPs of a model before and after fusing each stage prefix.
//!
//! cargo run --release --example flops -- [family]

use fuseprune::analysis::{compare, count_flops, Category};
use fuseprune::fusion::{fuse, FuseOptions, FusionOption};
use fuseprune::zoo::{build, Family, ZooSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let family: Family = std::env::args()
        .nth(1)
        .map_or(Ok(Family::Resnet20), |s| s.parse())?;
    let g = build(&ZooSpec::new(family, 0))?;
    let base = count_flops(&g)?;
    for (c, f) in base.by_category() {
        println!("{:<6} {f:>12}", c.as_str());
    }
    let total = family.stages().len();
    for fused in 1..=total {
        let (f, _) = fuse(
            &g,
            &FusionOption::Stages { fused, total },
            FuseOptions::default(),
        )?;
        let r = count_flops(&f)?;
        println!(
            "{fused}/{total}: cop {} sop {}",
            r.category_flops(Category::Cop),
            r.category_flops(Category::Sop)
        );
        if fused == total {
            println!("{}", compare(&base, &r));
        }
    }
    Ok(())
}
