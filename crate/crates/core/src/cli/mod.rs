//! Command-line pipeline: one subcommand per step, each reading and writing
//! files so every intermediate artifact can be inspected.
//!
//! Exit codes: 0 success, 2 invalid input or arguments, 3 an equivalence
//! check failed, 4 file I/O.

pub mod raw;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::analysis::{self, compare, count_flops, parse_profile, profile_speedup, AnalysisError};
use crate::fusion::{fold_bn, fuse, FuseOptions, FusionError, FusionOption, FusionReport};
use crate::graph::{execute, format, format::FormatError, Graph, GraphError};
use crate::pruning::{
    dynamic_prune, materialize, PruneConfig, PruneError, PruneMask, PruneMode, MAX_RATE,
};
use crate::tensor::{DType, Shape, Tensor, TensorError};
use crate::trainer::{evaluate, DataSpec, TrainConfig, TrainError, Trainer};
use crate::zoo::{build, Family, InitRule, ZooError, ZooSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Equivalence(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Equivalence(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

macro_rules! validation_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Validation(e.to_string())
            }
        }
    )*};
}
validation_from!(
    FusionError,
    PruneError,
    TrainError,
    GraphError,
    TensorError,
    ZooError,
    AnalysisError,
    serde_json::Error
);

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io(io) => CliError::Io(io),
            other => CliError::Validation(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "fuseprune",
    version,
    about = "Fuse residual blocks, prune filters and check equivalence"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a zoo network with seeded weights.
    BuildModel(BuildModel),
    /// Fuse residual blocks into plain convolutions.
    Fuse(FuseCmd),
    /// Train with per-epoch soft filter pruning.
    Prune(PruneCmd),
    /// Physically remove zeroized filters.
    Materialize(MaterializeCmd),
    /// Run a model on a raw tensor.
    Infer(InferCmd),
    /// Compare two models on random inputs.
    Verify(VerifyCmd),
    /// Count FLOPs per node and category.
    Flops(FlopsCmd),
    /// Time every node over repeated runs.
    Profile(ProfileCmd),
    /// Fold batch norms into the preceding convolutions.
    FoldBn(FoldBnCmd),
    /// Evaluate the speedup model.
    Speedup(SpeedupCmd),
}

#[derive(Debug, Args)]
pub struct BuildModel {
    /// resnet20, resnet32, resnet18, resnet34 or resnet8-tiny.
    pub family: String,
    #[arg(long)]
    pub seed: u64,
    /// kaiming, kaiming-random-bn or kaiming-calibrated-bn.
    #[arg(long, default_value = "kaiming")]
    pub init: String,
    #[arg(long, default_value = "f32")]
    pub dtype: String,
    /// Input height and width; defaults to the family's.
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseCmd {
    pub model: PathBuf,
    /// `x/n` or `(s1,...,sn)`.
    #[arg(long)]
    pub option: String,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Treat the network input as non-negative.
    #[arg(long)]
    pub assume_nonneg: bool,
    /// Leave blocks with a near-zero BN scale unfused instead of failing.
    #[arg(long)]
    pub skip_ill_conditioned: bool,
}

#[derive(Debug, Args)]
pub struct PruneCmd {
    pub model: PathBuf,
    #[arg(long, default_value = "conservative")]
    pub mode: String,
    #[arg(long, default_value_t = 0.0)]
    pub rate: f64,
    #[arg(long)]
    pub epochs: usize,
    /// `synth:seed=<u64>[,n=<count>]`.
    #[arg(long)]
    pub data: String,
    /// Fusion report; without one every conv is treated as unfused.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    /// Shuffling seed; defaults to the data seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Permit rates above 0.3.
    #[arg(long)]
    pub allow_high_rate: bool,
}

#[derive(Debug, Args)]
pub struct MaterializeCmd {
    pub model: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferCmd {
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyCmd {
    #[arg(long)]
    pub lhs: PathBuf,
    #[arg(long)]
    pub rhs: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Draw inputs as |N(0,1)| instead of N(0,1).
    #[arg(long)]
    pub nonneg: bool,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FlopsCmd {
    pub model: PathBuf,
    /// Print deltas against a reference model.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ProfileCmd {
    pub model: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    /// Seed of the random input.
    #[arg(long)]
    pub seed: u64,
    /// Also write `category seconds` lines for `speedup --profile`.
    #[arg(long)]
    pub write_profile: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct FoldBnCmd {
    pub model: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SpeedupCmd {
    /// Accelerated fraction of the work.
    #[arg(long, conflicts_with = "profile", required_unless_present = "profile")]
    pub p: Option<f64>,
    /// Acceleration factor.
    #[arg(long, requires = "p")]
    pub a: Option<f64>,
    /// File of `category seconds` lines.
    #[arg(long, requires_all = ["accelerated", "factor"])]
    pub profile: Option<PathBuf>,
    /// Profile entries that are accelerated (repeatable).
    #[arg(long)]
    pub accelerated: Vec<String>,
    #[arg(long)]
    pub factor: Option<f64>,
    /// Print the upper bound 1/(1−p) instead.
    #[arg(long)]
    pub bound: bool,
}

fn read_text(p: &Path) -> Result<String> {
    Ok(fs::read_to_string(p)?)
}

fn load(p: &Path) -> Result<Graph> {
    Ok(format::load(p)?)
}

fn load_report(p: Option<&PathBuf>) -> Result<FusionReport> {
    match p {
        Some(p) => Ok(FusionReport::from_json(&read_text(p)?)?),
        None => Ok(FusionReport::default()),
    }
}

fn random_input(shape: Shape, dtype: DType, rng: &mut ChaCha8Rng, nonneg: bool) -> Result<Tensor> {
    let v: Vec<f64> = (0..shape.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            if nonneg {
                z.abs()
            } else {
                z
            }
        })
        .collect();
    Ok(Tensor::from_f64(shape, dtype, &v)?)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::BuildModel(c) => build_model(c, out),
        Command::Fuse(c) => fuse_cmd(c, out),
        Command::Prune(c) => prune_cmd(c, out),
        Command::Materialize(c) => materialize_cmd(c, out),
        Command::Infer(c) => infer_cmd(c, out),
        Command::Verify(c) => verify_cmd(c, out),
        Command::Flops(c) => flops_cmd(c, out),
        Command::Profile(c) => profile_cmd(c, out),
        Command::FoldBn(c) => {
            let g = fold_bn(&load(&c.model)?)?;
            format::save(&g, &c.output)?;
            writeln!(
                out,
                "folded into {} ({} nodes)",
                c.output.display(),
                g.len()
            )?;
            Ok(())
        }
        Command::Speedup(c) => speedup_cmd(c, out),
    }
}

fn build_model(c: BuildModel, out: &mut dyn Write) -> Result<()> {
    let family: Family = c.family.parse()?;
    let mut spec = ZooSpec::new(family, c.seed)
        .init(c.init.parse::<InitRule>()?)
        .dtype(c.dtype.parse()?);
    if let Some(s) = c.side {
        let shape = Shape {
            h: s,
            w: s,
            ..spec.input_shape
        };
        spec = spec.input(shape);
    }
    if let Some(k) = c.classes {
        spec = spec.classes(k);
    }
    let g = build(&spec)?;
    format::save(&g, &c.output)?;
    writeln!(
        out,
        "{family} input {} {} nodes -> {}",
        g.input_shape(),
        g.len(),
        c.output.display()
    )?;
    Ok(())
}

fn fuse_cmd(c: FuseCmd, out: &mut dyn Write) -> Result<()> {
    let g = load(&c.model)?;
    let opt: FusionOption = c.option.parse()?;
    let opts = FuseOptions {
        assume_nonneg: c.assume_nonneg,
        skip_ill_conditioned: c.skip_ill_conditioned,
    };
    let (f, report) = fuse(&g, &opt, opts)?;
    format::save(&f, &c.output)?;
    fs::write(&c.report, report.to_json())?;
    writeln!(
        out,
        "fused {} blocks, removed {} adds",
        report.blocks.len(),
        report.removed_adds()
    )?;
    for s in &report.skipped {
        writeln!(out, "skipped {}: {}", s.tag, s.reason)?;
    }
    Ok(())
}

fn prune_cmd(c: PruneCmd, out: &mut dyn Write) -> Result<()> {
    let g = load(&c.model)?;
    let report = load_report(c.report.as_ref())?;
    let mode: PruneMode = c.mode.parse()?;
    let cfg = match mode {
        PruneMode::Conservative => PruneConfig::conservative(c.epochs),
        PruneMode::Continued => PruneConfig::continued(c.rate, c.epochs),
    };
    cfg.validate(if c.allow_high_rate { 1.0 } else { MAX_RATE })?;
    let data_spec: DataSpec = c.data.parse()?;
    let mut synth = data_spec.synth();
    let s = g.input_shape();
    if s.h != s.w {
        return Err(CliError::Validation(format!(
            "synthetic data needs a square input, model takes {s}"
        )));
    }
    synth.channels = s.c;
    synth.side = s.h;
    synth.classes = crate::graph::validate(&g)?
        .shape(g.output_id().unwrap_or("output"))
        .map_or(synth.classes, |o| o.sample_len());
    let data = synth.generate()?;
    let tcfg = TrainConfig {
        lr: c.lr,
        momentum: c.momentum,
        weight_decay: c.weight_decay,
        batch_size: c.batch_size,
        epochs: c.epochs,
        seed: c.seed.unwrap_or(data_spec.seed),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(tcfg)?;
    let mut log = Vec::new();
    let (masked, mask) = dynamic_prune(&g, &report, &cfg, |g, e| {
        let loss = trainer.train_epoch(g, &data.train, e)?;
        log.push(loss);
        Ok::<_, TrainError>(())
    })?;
    for (e, loss) in log.iter().enumerate() {
        writeln!(out, "epoch {:>3} loss {loss:.5}", e + 1)?;
    }
    writeln!(
        out,
        "test accuracy {:.4}, {} filters zeroized",
        evaluate(&masked, &data.test)?,
        mask.zeroized_total()
    )?;
    format::save(&masked, &c.output)?;
    fs::write(&c.masks, mask.to_json())?;
    Ok(())
}

fn materialize_cmd(c: MaterializeCmd, out: &mut dyn Write) -> Result<()> {
    let g = load(&c.model)?;
    let mask = PruneMask::from_json(&read_text(&c.masks)?)?;
    let report = load_report(c.report.as_ref())?;
    let (m, summary) = materialize(&g, &mask, &report)?;
    format::save(&m, &c.output)?;
    for (id, removed) in &summary.removed {
        writeln!(
            out,
            "{id}: removed {} filters, {} left",
            removed.len(),
            summary.filters[id]
        )?;
    }
    for (id, kept) in &summary.retained_coupled {
        writeln!(
            out,
            "{id}: kept {} zero filters feeding a shared-width node",
            kept.len()
        )?;
    }
    Ok(())
}

fn infer_cmd(c: InferCmd, out: &mut dyn Write) -> Result<()> {
    let g = load(&c.model)?;
    let x = raw::read(&mut fs::File::open(&c.input)?)?;
    let y = execute(&g, &x)?;
    raw::write(&mut fs::File::create(&c.output)?, &y)?;
    writeln!(out, "{} -> {}", x.shape(), y.shape())?;
    Ok(())
}

fn verify_cmd(c: VerifyCmd, out: &mut dyn Write) -> Result<()> {
    let (a, b) = (load(&c.lhs)?, load(&c.rhs)?);
    if a.input_shape() != b.input_shape() || a.dtype() != b.dtype() {
        return Err(CliError::Validation(format!(
            "models take different inputs: {} {} vs {} {}",
            a.input_shape(),
            a.dtype(),
            b.input_shape(),
            b.dtype()
        )));
    }
    if c.trials == 0 {
        return Err(CliError::Validation(
            "at least one trial is required".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut worst = 0.0f64;
    for _ in 0..c.trials {
        let x = random_input(a.input_shape(), a.dtype(), &mut rng, c.nonneg)?;
        let d = execute(&a, &x)?.max_abs_diff(&execute(&b, &x)?)?;
        // NaN must fail, so compare with a negated test.
        if !(d <= worst) {
            worst = d;
        }
    }
    let pass = worst <= c.tol;
    writeln!(
        out,
        "max abs difference {worst:.3e} over {} trials, tol {:.1e}: {}",
        c.trials,
        c.tol,
        if pass { "ok" } else { "FAILED" }
    )?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Equivalence(format!(
            "max abs difference {worst:e} exceeds {:e}",
            c.tol
        )))
    }
}

fn flops_cmd(c: FlopsCmd, out: &mut dyn Write) -> Result<()> {
    let r = count_flops(&load(&c.model)?)?;
    match &c.compare {
        Some(other) => {
            let before = count_flops(&load(other)?)?;
            let d = compare(&before, &r);
            if c.json {
                writeln!(out, "{}", serde_json::to_string_pretty(&d)?)?;
            } else {
                writeln!(out, "{d}")?;
            }
        }
        None if c.json => writeln!(out, "{}", r.to_json())?,
        None => writeln!(out, "{r}")?,
    }
    Ok(())
}

fn profile_cmd(c: ProfileCmd, out: &mut dyn Write) -> Result<()> {
    let g = load(&c.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let x = random_input(g.input_shape(), g.dtype(), &mut rng, true)?;
    let r = analysis::profile(&g, &x, c.runs)?;
    if c.json {
        writeln!(out, "{}", r.to_json())?;
    } else {
        writeln!(out, "{r}")?;
    }
    if let Some(p) = &c.write_profile {
        fs::write(p, r.profile_text().expect("profiled report is timed"))?;
    }
    Ok(())
}

fn speedup_cmd(c: SpeedupCmd, out: &mut dyn Write) -> Result<()> {
    let (p, s) = match (&c.profile, c.p) {
        (Some(path), _) => {
            let prof = parse_profile(&read_text(path)?)?;
            let factor = c.factor.expect("clap requires --factor");
            profile_speedup(&prof, &c.accelerated, factor)?
        }
        (None, Some(p)) if c.bound => (p, analysis::amdahl_bound(p)?),
        (None, Some(p)) => {
            let a = c.a.ok_or_else(|| {
                CliError::Validation("--a is required unless --bound is given".into())
            })?;
            (p, analysis::speedup(p, a)?)
        }
        (None, None) => unreachable!("clap requires --p or --profile"),
    };
    writeln!(out, "{s:.4}")?;
    if c.profile.is_some() {
        writeln!(out, "accelerated fraction {p:.4}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (Result<()>, String) {
        let cli =
            Cli::try_parse_from(std::iter::once("fuseprune").chain(args.iter().copied())).unwrap();
        let mut out = Vec::new();
        let r = run(cli, &mut out);
        (r, String::from_utf8(out).unwrap())
    }

    #[test]
    fn speedup_prints_four_decimals() {
        let (r, out) = run_args(&["speedup", "--p", "0.5", "--a", "2"]);
        r.unwrap();
        assert_eq!(out, "1.3333\n");
        let (_, out) = run_args(&["speedup", "--p", "0.4", "--bound"]);
        assert_eq!(out, "1.6667\n");
        let (r, _) = run_args(&["speedup", "--p", "1.5", "--a", "2"]);
        assert_eq!(r.unwrap_err().exit_code(), 2);
    }

    #[test]
    fn seeds_are_mandatory() {
        assert!(
            Cli::try_parse_from(["fuseprune", "build-model", "resnet20", "-o", "m.fpm"]).is_err()
        );
        assert!(Cli::try_parse_from(["fuseprune", "verify", "--lhs", "a", "--rhs", "b"]).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let (r, _) = run_args(&["flops", "/nonexistent/model.fpm"]);
        assert_eq!(r.unwrap_err().exit_code(), 4);
    }

    #[test]
    fn zero_option_output_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
        run_args(&[
            "build-model",
            "resnet8-tiny",
            "--seed",
            "3",
            "-o",
            &p("m.fpm"),
        ])
        .0
        .unwrap();
        run_args(&[
            "fuse",
            &p("m.fpm"),
            "--option",
            "0/3",
            "-o",
            &p("f.fpm"),
            "--report",
            &p("r.json"),
        ])
        .0
        .unwrap();
        assert_eq!(fs::read(p("m.fpm")).unwrap(), fs::read(p("f.fpm")).unwrap());
    }
}
