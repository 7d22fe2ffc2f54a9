//! Train resnet8-tiny on the synthetic dataset, fuse every stage, retrain
//! under dynamic pruning and compare test accuracy.
//!
//! cargo run --release --example train_prune -- [data seed] [epochs] [mode] [rate]

use std::time::Instant;

use fuseprune::fusion::{fuse, FuseOptions, FusionOption};
use fuseprune::pruning::{dynamic_prune, materialize, PruneConfig, PruneMode};
use fuseprune::trainer::{evaluate, SynthSpec, TrainConfig, Trainer};
use fuseprune::zoo::{build, Family, ZooSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map_or(Ok(42), |s| s.parse())?;
    let epochs: usize = args.get(1).map_or(Ok(30), |s| s.parse())?;
    let mode: PruneMode = args
        .get(2)
        .map_or(Ok(PruneMode::Conservative), |s| s.parse())?;
    let rate: f64 = args.get(3).map_or(Ok(0.0), |s| s.parse())?;

    let data = SynthSpec::new(seed).generate()?;
    let mut g = build(&ZooSpec::new(Family::Resnet8Tiny, seed))?;
    let cfg = TrainConfig {
        seed,
        epochs,
        ..TrainConfig::default()
    };

    let t0 = Instant::now();
    let mut trainer = Trainer::new(cfg)?;
    for e in 0..epochs {
        let loss = trainer.train_epoch(&mut g, &data.train, e)?;
        if e % 5 == 4 || e + 1 == epochs {
            println!(
                "baseline epoch {:>2} loss {loss:.4} test {:.3}",
                e + 1,
                evaluate(&g, &data.test)?
            );
        }
    }
    let baseline = evaluate(&g, &data.test)?;
    println!(
        "baseline accuracy {baseline:.4} ({:.1}s)",
        t0.elapsed().as_secs_f64()
    );

    let t1 = Instant::now();
    let (fused, report) = fuse(&g, &FusionOption::all(3), FuseOptions::default())?;
    println!("fused accuracy {:.4}", evaluate(&fused, &data.test)?);
    let prune_cfg = match mode {
        PruneMode::Conservative => PruneConfig::conservative(epochs),
        PruneMode::Continued => PruneConfig::continued(rate, epochs),
    };
    let mut retrain = Trainer::new(cfg)?;
    let (masked, mask) = dynamic_prune(&fused, &report, &prune_cfg, |g, e| {
        retrain.train_epoch(g, &data.train, e).map(|_| ())
    })?;
    let pruned = evaluate(&masked, &data.test)?;
    let (small, summary) = materialize(&masked, &mask, &report)?;
    println!(
        "pruned accuracy {pruned:.4} materialized {:.4} ({:.1}s, {} convs shrunk)",
        evaluate(&small, &data.test)?,
        t1.elapsed().as_secs_f64(),
        summary.removed.len()
    );
    println!("accuracy drop {:.2} points", (baseline - pruned) * 100.0);
    Ok(())
}
