//! Computation-graph IR.
//!
//! A [`Graph`] is a DAG of typed operator [`Node`]s keyed by string id.
//! Nodes keep insertion order, which doubles as the deterministic
//! tie-break for topological sorting. Rewriting passes take a graph by
//! value and hand back a new one.

mod exec;
pub mod format;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{BnParams, ConvSpec, DType, PoolSpec, Shape, Tensor, TensorError};

pub use exec::{calibrate_bn, execute, execute_timed, execute_trace, execute_with_order};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph has no nodes")]
    Empty,
    #[error("graph must have exactly one input node, found {0}")]
    InputCount(usize),
    #[error("graph must have exactly one output node, found {0}")]
    OutputCount(usize),
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{node}` references missing input `{input}`")]
    DanglingInput { node: String, input: String },
    #[error("node `{node}` ({kind}) expects {expected} inputs, has {found}")]
    Arity {
        node: String,
        kind: OpKind,
        expected: &'static str,
        found: usize,
    },
    #[error("cycle detected through node `{0}`")]
    CycleDetected(String),
    #[error("node `{0}` is not connected between the input and the output")]
    Disconnected(String),
    #[error("shape mismatch at node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("node `{node}` is missing parameter `{name}`")]
    MissingParam { node: String, name: String },
    #[error("parameter `{name}` of node `{node}` has dtype {found}, graph is {expected}")]
    ParamDType {
        node: String,
        name: String,
        expected: DType,
        found: DType,
    },
    #[error("input tensor {found} does not match graph input {expected}")]
    InputShape { expected: Shape, found: Shape },
    #[error("kernel failed at node `{node}`: {source}")]
    Kernel {
        node: String,
        #[source]
        source: TensorError,
    },
    #[error("invalid ordering: {0}")]
    InvalidOrder(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Input,
    Output,
    Conv,
    Bn,
    Relu,
    Add,
    Concat,
    MaxPool,
    GAvgPool,
    Fc,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Output => "output",
            OpKind::Conv => "conv",
            OpKind::Bn => "bn",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::Concat => "concat",
            OpKind::MaxPool => "maxpool",
            OpKind::GAvgPool => "gavgpool",
            OpKind::Fc => "fc",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Operator kind plus its attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Op {
    Input,
    Output,
    Conv(ConvSpec),
    Bn {
        eps: f64,
        /// Channels whose statistics and affine parameters are frozen during
        /// training. Empty means none.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        frozen: Vec<bool>,
    },
    Relu,
    Add,
    Concat,
    #[serde(rename = "maxpool")]
    MaxPool(PoolSpec),
    #[serde(rename = "gavgpool")]
    GAvgPool,
    Fc {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Output => OpKind::Output,
            Op::Conv(_) => OpKind::Conv,
            Op::Bn { .. } => OpKind::Bn,
            Op::Relu => OpKind::Relu,
            Op::Add => OpKind::Add,
            Op::Concat => OpKind::Concat,
            Op::MaxPool(_) => OpKind::MaxPool,
            Op::GAvgPool => OpKind::GAvgPool,
            Op::Fc { .. } => OpKind::Fc,
        }
    }
}

pub const WEIGHT: &str = "weight";
pub const BIAS: &str = "bias";
pub const GAMMA: &str = "gamma";
pub const BETA: &str = "beta";
pub const MEAN: &str = "mean";
pub const VAR: &str = "var";

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub params: BTreeMap<String, Tensor>,
    pub tags: Vec<String>,
}

impl Node {
    pub fn new(id: impl Into<String>, op: Op, inputs: &[&str]) -> Self {
        Node {
            id: id.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            params: BTreeMap::new(),
            tags: Vec::new(),
        }
    }

    /// Convolution with zero weights (and zero bias if the spec asks for one).
    pub fn conv(id: impl Into<String>, input: &str, spec: ConvSpec, dtype: DType) -> Self {
        let mut n = Node::new(id, Op::Conv(spec), &[input]);
        n.params
            .insert(WEIGHT.into(), Tensor::zeros(spec.weight_shape(), dtype));
        if spec.bias {
            n.params.insert(
                BIAS.into(),
                Tensor::zeros(Shape::vector(spec.filters), dtype),
            );
        }
        n
    }

    /// Batch norm initialised to γ=1, β=0, μ=0, σ²=1.
    pub fn bn(id: impl Into<String>, input: &str, channels: usize, dtype: DType, eps: f64) -> Self {
        let mut n = Node::new(
            id,
            Op::Bn {
                eps,
                frozen: Vec::new(),
            },
            &[input],
        );
        n.set_bn_params(BnParams::identity(channels, dtype, eps));
        n
    }

    pub fn fc(
        id: impl Into<String>,
        input: &str,
        inputs: usize,
        outputs: usize,
        dtype: DType,
    ) -> Self {
        let mut n = Node::new(
            id,
            Op::Fc {
                inputs,
                outputs,
                bias: true,
            },
            &[input],
        );
        n.params.insert(
            WEIGHT.into(),
            Tensor::zeros(Shape::new(outputs, inputs, 1, 1), dtype),
        );
        n.params
            .insert(BIAS.into(), Tensor::zeros(Shape::vector(outputs), dtype));
        n
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tags.push(tag.into());
        self
    }

    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }

    pub fn conv_spec(&self) -> Option<&ConvSpec> {
        match &self.op {
            Op::Conv(s) => Some(s),
            _ => None,
        }
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| GraphError::MissingParam {
                node: self.id.clone(),
                name: name.to_string(),
            })
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = &self.id;
        self.params
            .get_mut(name)
            .ok_or_else(|| GraphError::MissingParam {
                node: id.clone(),
                name: name.to_string(),
            })
    }

    /// Raw batch-norm parameters of a `bn` node.
    pub fn bn_params(&self) -> Result<BnParams> {
        let eps = match &self.op {
            Op::Bn { eps, .. } => *eps,
            _ => {
                return Err(GraphError::MissingParam {
                    node: self.id.clone(),
                    name: "bn attributes".into(),
                })
            }
        };
        Ok(BnParams {
            gamma: self.param(GAMMA)?.clone(),
            beta: self.param(BETA)?.clone(),
            mean: self.param(MEAN)?.clone(),
            var: self.param(VAR)?.clone(),
            eps,
        })
    }

    pub fn set_bn_params(&mut self, p: BnParams) {
        if let Op::Bn { eps, .. } = &mut self.op {
            *eps = p.eps;
        }
        self.params.insert(GAMMA.into(), p.gamma);
        self.params.insert(BETA.into(), p.beta);
        self.params.insert(MEAN.into(), p.mean);
        self.params.insert(VAR.into(), p.var);
    }

    /// Frozen-channel flags of a `bn` node, expanded to `channels` entries.
    pub fn frozen_channels(&self, channels: usize) -> Vec<bool> {
        match &self.op {
            Op::Bn { frozen, .. } if !frozen.is_empty() => frozen.clone(),
            _ => vec![false; channels],
        }
    }

    /// First tag of the node, if any (`stage1.block2.conv1` style).
    pub fn tag(&self) -> Option<&str> {
        self.tags.first().map(String::as_str)
    }
}

/// Inferred output shape of every node plus the topological order used.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTable {
    pub shapes: HashMap<String, Shape>,
    pub order: Vec<String>,
}

impl ShapeTable {
    pub fn shape(&self, id: &str) -> Option<Shape> {
        self.shapes.get(id).copied()
    }
}

/// A computation graph with a single input and a single output.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: IndexMap<String, Node>,
    input_shape: Shape,
    dtype: DType,
}

impl Graph {
    /// Graph holding only an `input` node with the given id.
    pub fn new(input_id: &str, input_shape: Shape, dtype: DType) -> Self {
        let mut nodes = IndexMap::new();
        nodes.insert(input_id.to_string(), Node::new(input_id, Op::Input, &[]));
        Graph {
            nodes,
            input_shape,
            dtype,
        }
    }

    /// Graph with no nodes at all; used by the loader before nodes are added.
    pub fn empty(input_shape: Shape, dtype: DType) -> Self {
        Graph {
            nodes: IndexMap::new(),
            input_shape,
            dtype,
        }
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn add(&mut self, node: Node) -> Result<&str> {
        if self.nodes.contains_key(&node.id) {
            return Err(GraphError::DuplicateId(node.id));
        }
        let id = node.id.clone();
        let (idx, _) = self.nodes.insert_full(id, node);
        Ok(self.nodes.get_index(idx).unwrap().0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Node> {
        self.nodes.get_mut(id)
    }

    pub fn get(&self, id: &str) -> Result<&Node> {
        self.nodes
            .get(id)
            .ok_or_else(|| GraphError::UnknownNode(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Node> {
        self.nodes
            .get_mut(id)
            .ok_or_else(|| GraphError::UnknownNode(id.to_string()))
    }

    /// Nodes in insertion order.
    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn nodes_mut(&mut self) -> impl Iterator<Item = &mut Node> {
        self.nodes.values_mut()
    }

    /// Removes a node, keeping the relative order of the others.
    pub fn remove(&mut self, id: &str) -> Option<Node> {
        self.nodes.shift_remove(id)
    }

    pub fn count_kind(&self, kind: OpKind) -> usize {
        self.nodes().filter(|n| n.kind() == kind).count()
    }

    pub fn input_id(&self) -> Option<&str> {
        self.nodes()
            .find(|n| n.kind() == OpKind::Input)
            .map(|n| n.id.as_str())
    }

    pub fn output_id(&self) -> Option<&str> {
        self.nodes()
            .find(|n| n.kind() == OpKind::Output)
            .map(|n| n.id.as_str())
    }

    /// Ids of nodes that read `id`, in insertion order (repeated if a node
    /// reads it more than once).
    pub fn consumers(&self, id: &str) -> Vec<&str> {
        let mut out = Vec::new();
        for n in self.nodes() {
            for i in &n.inputs {
                if i == id {
                    out.push(n.id.as_str());
                }
            }
        }
        out
    }

    /// Rewires every reader of `old` to read `new` instead.
    pub fn replace_uses(&mut self, old: &str, new: &str) {
        for n in self.nodes.values_mut() {
            for i in n.inputs.iter_mut() {
                if i == old {
                    *i = new.to_string();
                }
            }
        }
    }

    /// Deterministic topological order: Kahn's algorithm, ties resolved by
    /// insertion order.
    pub fn topo_order(&self) -> Result<Vec<String>> {
        self.topo_order_by(|a, b| a < b)
    }

    /// Topological order with ties resolved by the *latest* inserted node
    /// first. Used to check that results do not depend on the schedule.
    pub fn topo_order_reversed_ties(&self) -> Result<Vec<String>> {
        self.topo_order_by(|a, b| a > b)
    }

    fn topo_order_by(&self, before: impl Fn(usize, usize) -> bool) -> Result<Vec<String>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut readers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (idx, node) in self.nodes.values().enumerate() {
            for inp in &node.inputs {
                let src =
                    self.nodes
                        .get_index_of(inp)
                        .ok_or_else(|| GraphError::DanglingInput {
                            node: node.id.clone(),
                            input: inp.clone(),
                        })?;
                indegree[idx] += 1;
                readers[src].push(idx);
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while !ready.is_empty() {
            let mut pick = 0;
            for (k, &cand) in ready.iter().enumerate() {
                if before(cand, ready[pick]) {
                    pick = k;
                }
            }
            let cur = ready.swap_remove(pick);
            order.push(cur);
            for &r in &readers[cur] {
                indegree[r] -= 1;
                if indegree[r] == 0 {
                    ready.push(r);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap();
            return Err(GraphError::CycleDetected(
                self.nodes.get_index(stuck).unwrap().0.clone(),
            ));
        }
        Ok(order
            .into_iter()
            .map(|i| self.nodes.get_index(i).unwrap().0.clone())
            .collect())
    }

    /// Structural and shape validation.
    pub fn validate(&self) -> Result<ShapeTable> {
        validate(self)
    }
}

fn arity_ok(kind: OpKind, found: usize) -> std::result::Result<(), &'static str> {
    let ok = match kind {
        OpKind::Input => found == 0,
        OpKind::Add => found == 2,
        OpKind::Concat => found >= 2,
        _ => found == 1,
    };
    if ok {
        return Ok(());
    }
    Err(match kind {
        OpKind::Input => "0",
        OpKind::Add => "2",
        OpKind::Concat => ">= 2",
        _ => "1",
    })
}

/// Checks structure (arity, dangling references, cycles, connectivity) and
/// infers the output shape of every node.
pub fn validate(g: &Graph) -> Result<ShapeTable> {
    if g.is_empty() {
        return Err(GraphError::Empty);
    }
    let inputs = g.count_kind(OpKind::Input);
    if inputs != 1 {
        return Err(GraphError::InputCount(inputs));
    }
    let outputs = g.count_kind(OpKind::Output);
    if outputs != 1 {
        return Err(GraphError::OutputCount(outputs));
    }
    for node in g.nodes() {
        if let Err(expected) = arity_ok(node.kind(), node.inputs.len()) {
            return Err(GraphError::Arity {
                node: node.id.clone(),
                kind: node.kind(),
                expected,
                found: node.inputs.len(),
            });
        }
        for inp in &node.inputs {
            if g.node(inp).is_none() {
                return Err(GraphError::DanglingInput {
                    node: node.id.clone(),
                    input: inp.clone(),
                });
            }
        }
    }
    let order = g.topo_order()?;
    check_connected(g)?;

    let mut shapes: HashMap<String, Shape> = HashMap::with_capacity(g.len());
    for id in &order {
        let node = g.get(id)?;
        let in_shapes: Vec<Shape> = node.inputs.iter().map(|i| shapes[i]).collect();
        let s = infer_shape(g, node, &in_shapes)?;
        shapes.insert(id.clone(), s);
    }
    Ok(ShapeTable { shapes, order })
}

fn check_connected(g: &Graph) -> Result<()> {
    let input = g.input_id().unwrap();
    let output = g.output_id().unwrap();
    let mut forward: HashMap<&str, Vec<&str>> = HashMap::new();
    for n in g.nodes() {
        for i in &n.inputs {
            forward.entry(i.as_str()).or_default().push(n.id.as_str());
        }
    }
    let mut from_input = std::collections::HashSet::new();
    let mut queue = VecDeque::from([input]);
    while let Some(cur) = queue.pop_front() {
        if from_input.insert(cur) {
            if let Some(next) = forward.get(cur) {
                queue.extend(next.iter().copied());
            }
        }
    }
    let mut to_output = std::collections::HashSet::new();
    let mut queue = VecDeque::from([output]);
    while let Some(cur) = queue.pop_front() {
        if to_output.insert(cur) {
            queue.extend(g.get(cur)?.inputs.iter().map(String::as_str));
        }
    }
    for n in g.nodes() {
        if !from_input.contains(n.id.as_str()) || !to_output.contains(n.id.as_str()) {
            return Err(GraphError::Disconnected(n.id.clone()));
        }
    }
    Ok(())
}

fn check_param(g: &Graph, node: &Node, name: &str, shape: Shape) -> Result<()> {
    let t = node.param(name)?;
    if t.dtype() != g.dtype() {
        return Err(GraphError::ParamDType {
            node: node.id.clone(),
            name: name.to_string(),
            expected: g.dtype(),
            found: t.dtype(),
        });
    }
    if t.shape() != shape {
        return Err(GraphError::ShapeMismatch {
            node: node.id.clone(),
            detail: format!("parameter `{name}` is {}, expected {shape}", t.shape()),
        });
    }
    Ok(())
}

fn infer_shape(g: &Graph, node: &Node, ins: &[Shape]) -> Result<Shape> {
    let mismatch = |detail: String| GraphError::ShapeMismatch {
        node: node.id.clone(),
        detail,
    };
    let kernel = |e: TensorError| mismatch(e.to_string());
    match &node.op {
        Op::Input => Ok(g.input_shape),
        Op::Output | Op::Relu => Ok(ins[0]),
        Op::Conv(spec) => {
            check_param(g, node, WEIGHT, spec.weight_shape())?;
            if spec.bias {
                check_param(g, node, BIAS, Shape::vector(spec.filters))?;
            } else if node.params.contains_key(BIAS) {
                return Err(mismatch(
                    "bias present but conv spec has bias = false".into(),
                ));
            }
            spec.output_shape(ins[0]).map_err(kernel)
        }
        Op::Bn { frozen, .. } => {
            let c = ins[0].c;
            for name in [GAMMA, BETA, MEAN, VAR] {
                check_param(g, node, name, Shape::vector(c))?;
            }
            if !frozen.is_empty() && frozen.len() != c {
                return Err(mismatch(format!(
                    "{} frozen flags for {c} channels",
                    frozen.len()
                )));
            }
            node.bn_params()?.validate().map_err(kernel)?;
            Ok(ins[0])
        }
        Op::Add => {
            if ins[0] != ins[1] {
                return Err(mismatch(format!("add of {} and {}", ins[0], ins[1])));
            }
            Ok(ins[0])
        }
        Op::Concat => {
            let s0 = ins[0];
            let mut c = 0;
            for s in ins {
                if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                    return Err(mismatch(format!("concat of {s0} and {s}")));
                }
                c += s.c;
            }
            Ok(Shape::new(s0.n, c, s0.h, s0.w))
        }
        Op::MaxPool(p) => p.output_shape(ins[0]).map_err(kernel),
        Op::GAvgPool => Ok(Shape::new(ins[0].n, ins[0].c, 1, 1)),
        Op::Fc {
            inputs,
            outputs,
            bias,
        } => {
            if ins[0].sample_len() != *inputs {
                return Err(mismatch(format!(
                    "fc expects {inputs} features, input {} has {}",
                    ins[0],
                    ins[0].sample_len()
                )));
            }
            check_param(g, node, WEIGHT, Shape::new(*outputs, *inputs, 1, 1))?;
            if *bias {
                check_param(g, node, BIAS, Shape::vector(*outputs))?;
            }
            Ok(Shape::new(ins[0].n, *outputs, 1, 1))
        }
    }
}
