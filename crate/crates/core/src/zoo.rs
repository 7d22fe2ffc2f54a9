//! Residual network builders.
//!
//! Every block is tagged `stage<i>.block<j>` and its nodes are named
//! `stage<i>.block<j>.{conv1,bn1,relu1,conv2,bn2,add,relu2}` plus
//! `.shortcut.{conv,bn}` for projection blocks. Fusion options address
//! blocks through these tags.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::graph::{calibrate_bn, Graph, GraphError, Node, Op, BETA, GAMMA, MEAN, VAR, WEIGHT};
use crate::tensor::{with_dtype, BnParams, ConvSpec, DType, Element, PoolSpec, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("unknown model family `{0}` (expected resnet20, resnet32, resnet18, resnet34 or resnet8-tiny)")]
    UnknownFamily(String),
    #[error("unknown init rule `{0}`")]
    UnknownInit(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Resnet20,
    Resnet32,
    Resnet18,
    Resnet34,
    /// Desk-scale CIFAR-style net: one block per stage, 8/16/32 filters.
    Resnet8Tiny,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Resnet20,
        Family::Resnet32,
        Family::Resnet18,
        Family::Resnet34,
        Family::Resnet8Tiny,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Resnet20 => "resnet20",
            Family::Resnet32 => "resnet32",
            Family::Resnet18 => "resnet18",
            Family::Resnet34 => "resnet34",
            Family::Resnet8Tiny => "resnet8-tiny",
        }
    }

    pub fn is_imagenet(self) -> bool {
        matches!(self, Family::Resnet18 | Family::Resnet34)
    }

    /// `(blocks, filters)` for each stage.
    pub fn stages(self) -> &'static [(usize, usize)] {
        match self {
            Family::Resnet20 => &[(3, 16), (3, 32), (3, 64)],
            Family::Resnet32 => &[(5, 16), (5, 32), (5, 64)],
            Family::Resnet18 => &[(2, 64), (2, 128), (2, 256), (2, 512)],
            Family::Resnet34 => &[(3, 64), (4, 128), (6, 256), (3, 512)],
            Family::Resnet8Tiny => &[(1, 8), (1, 16), (1, 32)],
        }
    }

    pub fn block_count(self) -> usize {
        self.stages().iter().map(|s| s.0).sum()
    }

    pub fn default_input(self) -> Shape {
        match self {
            Family::Resnet18 | Family::Resnet34 => Shape::new(1, 3, 224, 224),
            Family::Resnet8Tiny => Shape::new(1, 3, 16, 16),
            _ => Shape::new(1, 3, 32, 32),
        }
    }

    pub fn default_classes(self) -> usize {
        if self.is_imagenet() {
            1000
        } else {
            10
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self, ZooError> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| ZooError::UnknownFamily(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitRule {
    /// Fan-in scaled Gaussian weights, identity batch norm.
    Kaiming,
    /// Kaiming weights plus randomized batch-norm statistics, so that
    /// every BN is a non-trivial affine map.
    KaimingRandomBn,
    /// Kaiming weights, random γ and β, and running statistics calibrated
    /// on a seeded batch of uniform `[−1, 1]` inputs, as a trained network
    /// would have.
    KaimingCalibratedBn,
}

impl FromStr for InitRule {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self, ZooError> {
        match s {
            "kaiming" => Ok(InitRule::Kaiming),
            "kaiming-random-bn" => Ok(InitRule::KaimingRandomBn),
            "kaiming-calibrated-bn" => Ok(InitRule::KaimingCalibratedBn),
            other => Err(ZooError::UnknownInit(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZooSpec {
    pub family: Family,
    pub input_shape: Shape,
    pub classes: usize,
    pub init: InitRule,
    pub seed: u64,
    pub dtype: DType,
}

impl ZooSpec {
    pub fn new(family: Family, seed: u64) -> Self {
        ZooSpec {
            family,
            input_shape: family.default_input(),
            classes: family.default_classes(),
            init: InitRule::Kaiming,
            seed,
            dtype: DType::F32,
        }
    }

    pub fn input(mut self, shape: Shape) -> Self {
        self.input_shape = shape;
        self
    }

    pub fn classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }

    pub fn init(mut self, init: InitRule) -> Self {
        self.init = init;
        self
    }

    pub fn dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }
}

struct Builder {
    g: Graph,
    dtype: DType,
}

impl Builder {
    fn push(&mut self, node: Node) -> Result<String, GraphError> {
        let id = node.id.clone();
        let tag = id.clone();
        self.g.add(node.with_tag(tag))?;
        Ok(id)
    }

    fn conv(&mut self, id: &str, input: &str, spec: ConvSpec) -> Result<String, GraphError> {
        self.push(Node::conv(id, input, spec, self.dtype))
    }

    fn bn(&mut self, id: &str, input: &str, c: usize) -> Result<String, GraphError> {
        self.push(Node::bn(id, input, c, self.dtype, BN_EPS))
    }

    fn unary(&mut self, id: &str, op: Op, input: &str) -> Result<String, GraphError> {
        self.push(Node::new(id, op, &[input]))
    }

    fn basic_block(
        &mut self,
        tag: &str,
        input: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
    ) -> Result<String, GraphError> {
        let c1 = self.conv(
            &format!("{tag}.conv1"),
            input,
            ConvSpec::new(out_c, in_c, 3, stride, 1),
        )?;
        let b1 = self.bn(&format!("{tag}.bn1"), &c1, out_c)?;
        let r1 = self.unary(&format!("{tag}.relu1"), Op::Relu, &b1)?;
        let c2 = self.conv(
            &format!("{tag}.conv2"),
            &r1,
            ConvSpec::new(out_c, out_c, 3, 1, 1),
        )?;
        let b2 = self.bn(&format!("{tag}.bn2"), &c2, out_c)?;
        let shortcut = if stride != 1 || in_c != out_c {
            let sc = self.conv(
                &format!("{tag}.shortcut.conv"),
                input,
                ConvSpec::new(out_c, in_c, 1, stride, 0),
            )?;
            self.bn(&format!("{tag}.shortcut.bn"), &sc, out_c)?
        } else {
            input.to_string()
        };
        let add = self.push(Node::new(format!("{tag}.add"), Op::Add, &[&b2, &shortcut]))?;
        self.unary(&format!("{tag}.relu2"), Op::Relu, &add)
    }
}

/// Builds the network structure and initializes its weights.
pub fn build(spec: &ZooSpec) -> Result<Graph, ZooError> {
    let family = spec.family;
    let mut b = Builder {
        g: Graph::new("input", spec.input_shape, spec.dtype),
        dtype: spec.dtype,
    };
    let in_c = spec.input_shape.c;
    let mut cur = if family.is_imagenet() {
        let c = b.conv("stem.conv", "input", ConvSpec::new(64, in_c, 7, 2, 3))?;
        let n = b.bn("stem.bn", &c, 64)?;
        let r = b.unary("stem.relu", Op::Relu, &n)?;
        b.unary("stem.maxpool", Op::MaxPool(PoolSpec::new(3, 2, 1)), &r)?
    } else {
        let stem = family.stages()[0].1;
        let c = b.conv("stem.conv", "input", ConvSpec::new(stem, in_c, 3, 1, 1))?;
        let n = b.bn("stem.bn", &c, stem)?;
        b.unary("stem.relu", Op::Relu, &n)?
    };
    let mut channels = if family.is_imagenet() {
        64
    } else {
        family.stages()[0].1
    };
    for (si, &(blocks, filters)) in family.stages().iter().enumerate() {
        for bi in 0..blocks {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let tag = format!("stage{}.block{}", si + 1, bi + 1);
            cur = b.basic_block(&tag, &cur, channels, filters, stride)?;
            channels = filters;
        }
    }
    let pool = b.unary("head.gavgpool", Op::GAvgPool, &cur)?;
    let fc = b.push(Node::fc(
        "head.fc",
        &pool,
        channels,
        spec.classes,
        spec.dtype,
    ))?;
    b.push(Node::new("output", Op::Output, &[&fc]))?;
    b.g.validate()?;

    let g = init_weights(b.g, spec.seed);
    Ok(match spec.init {
        InitRule::Kaiming => g,
        InitRule::KaimingRandomBn => randomize_bn(g, spec.seed ^ 0xb7_5eed),
        InitRule::KaimingCalibratedBn => {
            let mut g = randomize_bn(g, spec.seed ^ 0xb7_5eed);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xca11b);
            let shape = Shape {
                n: CALIBRATION_BATCH,
                ..spec.input_shape
            };
            let v: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor::from_f64(shape, spec.dtype, &v).expect("sized to shape");
            calibrate_bn(&mut g, &x)?;
            g
        }
    })
}

/// Batch size used by [`InitRule::KaimingCalibratedBn`].
pub const CALIBRATION_BATCH: usize = 8;

fn gaussian<T: Element>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::of(dist.sample(rng))).collect()
}

/// Fan-in scaled Gaussian weights (std `√(2/fan_in)`) for every conv and
/// fc, zero biases, identity batch norm. Deterministic per seed.
pub fn init_weights(mut g: Graph, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dtype = g.dtype();
    for node in g.nodes_mut() {
        match node.op.clone() {
            Op::Conv(_) | Op::Fc { .. } => {
                let shape = node.params[WEIGHT].shape();
                let fan_in = shape.sample_len();
                let std = (2.0 / fan_in as f64).sqrt();
                let w = with_dtype!(dtype, T => Tensor::from_vec(shape, gaussian::<T>(&mut rng, shape.len(), std)));
                node.params
                    .insert(WEIGHT.into(), w.expect("shape preserved"));
                for (name, t) in node.params.iter_mut() {
                    if name != WEIGHT {
                        *t = Tensor::zeros(t.shape(), dtype);
                    }
                }
            }
            Op::Bn { eps, .. } => {
                let c = node.params[GAMMA].len();
                node.set_bn_params(BnParams::identity(c, dtype, eps));
            }
            _ => {}
        }
    }
    g
}

/// Draws batch-norm parameters uniformly: γ ∈ [0.5, 1.5], β ∈ [−0.25, 0.25],
/// μ ∈ [−0.25, 0.25], σ² ∈ [0.5, 2].
pub fn randomize_bn(mut g: Graph, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dtype = g.dtype();
    for node in g.nodes_mut() {
        if !matches!(node.op, Op::Bn { .. }) {
            continue;
        }
        let c = node.params[GAMMA].len();
        for (name, lo, hi) in [
            (GAMMA, 0.5, 1.5),
            (BETA, -0.25, 0.25),
            (MEAN, -0.25, 0.25),
            (VAR, 0.5, 2.0),
        ] {
            let v: Vec<f64> = (0..c).map(|_| rng.gen_range(lo..hi)).collect();
            node.params.insert(
                name.into(),
                Tensor::from_f64(Shape::vector(c), dtype, &v).expect("vector shape"),
            );
        }
    }
    g
}
