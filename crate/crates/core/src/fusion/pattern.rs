//! Residual block discovery.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Op, OpKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Identity shortcut.
    Basic,
    /// 1×1 convolution (optionally followed by BN) on the shortcut.
    Projection,
}

/// Node ids of one matched residual block:
/// `input → conv1 → [bn1] → relu1 → conv2 → [bn2] → add(shortcut) → relu_out`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMatch {
    pub kind: BlockKind,
    /// `stage<i>.block<j>` derived from the add node's tag, if tagged.
    pub tag: Option<String>,
    pub input: String,
    pub conv1: String,
    pub bn1: Option<String>,
    pub relu1: String,
    pub conv2: String,
    pub bn2: Option<String>,
    pub add: String,
    pub relu_out: String,
    pub shortcut_conv: Option<String>,
    pub shortcut_bn: Option<String>,
}

impl BlockMatch {
    pub fn name(&self) -> &str {
        self.tag.as_deref().unwrap_or(&self.add)
    }

    /// Node reached from the main path right before the add.
    pub fn main_tail(&self) -> &str {
        self.bn2.as_deref().unwrap_or(&self.conv2)
    }
}

/// `stage<i>.block<j>` prefix of a tag such as `stage2.block1.add`.
pub fn block_tag(tag: &str) -> Option<String> {
    let mut parts = tag.split('.');
    let stage = parts.next()?;
    let block = parts.next()?;
    stage.strip_prefix("stage")?.parse::<usize>().ok()?;
    block.strip_prefix("block")?.parse::<usize>().ok()?;
    Some(format!("{stage}.{block}"))
}

/// Parses `stage<i>.block<j>` into 1-based `(i, j)`.
pub fn parse_block_tag(tag: &str) -> Option<(usize, usize)> {
    let (stage, block) = tag.split_once('.')?;
    let i = stage.strip_prefix("stage")?.parse().ok()?;
    let j = block
        .split('.')
        .next()?
        .strip_prefix("block")?
        .parse()
        .ok()?;
    Some((i, j))
}

struct Matcher<'a> {
    g: &'a Graph,
}

impl<'a> Matcher<'a> {
    fn kind(&self, id: &str) -> Option<OpKind> {
        self.g.node(id).map(|n| n.kind())
    }

    fn single_input(&self, id: &str) -> Option<&'a str> {
        let n = self.g.node(id)?;
        (n.inputs.len() == 1).then(|| n.inputs[0].as_str())
    }

    /// `id` is read by exactly one node, namely `reader`.
    fn only_feeds(&self, id: &str, reader: &str) -> bool {
        let c = self.g.consumers(id);
        c.len() == 1 && c[0] == reader
    }

    /// Walks `[bn] ← conv` backwards from `tail` and returns `(conv, bn)`.
    fn conv_bn(&self, tail: &'a str, reader: &str) -> Option<(&'a str, Option<&'a str>)> {
        if !self.only_feeds(tail, reader) {
            return None;
        }
        match self.kind(tail)? {
            OpKind::Conv => Some((tail, None)),
            OpKind::Bn => {
                let conv = self.single_input(tail)?;
                (self.kind(conv)? == OpKind::Conv && self.only_feeds(conv, tail))
                    .then_some((conv, Some(tail)))
            }
            _ => None,
        }
    }

    fn try_match(&self, add: &str, main: &'a str, short: &'a str) -> Option<BlockMatch> {
        let (conv2, bn2) = self.conv_bn(main, add)?;
        let relu1 = self.single_input(conv2)?;
        if self.kind(relu1)? != OpKind::Relu || !self.only_feeds(relu1, conv2) {
            return None;
        }
        let (conv1, bn1) = self.conv_bn(self.single_input(relu1)?, relu1)?;
        let input = self.single_input(conv1)?;

        let (kind, shortcut_conv, shortcut_bn) = if short == input {
            (BlockKind::Basic, None, None)
        } else {
            let (sc, sbn) = self.conv_bn(short, add)?;
            if self.single_input(sc)? != input {
                return None;
            }
            match &self.g.node(sc)?.op {
                Op::Conv(spec) if spec.kernel == (1, 1) => {}
                _ => return None,
            }
            (
                BlockKind::Projection,
                Some(sc.to_string()),
                sbn.map(str::to_string),
            )
        };

        let consumers = self.g.consumers(add);
        if consumers.len() != 1 || self.kind(consumers[0])? != OpKind::Relu {
            return None;
        }
        let add_node = self.g.node(add)?;
        Some(BlockMatch {
            kind,
            tag: add_node.tag().and_then(block_tag),
            input: input.to_string(),
            conv1: conv1.to_string(),
            bn1: bn1.map(str::to_string),
            relu1: relu1.to_string(),
            conv2: conv2.to_string(),
            bn2: bn2.map(str::to_string),
            add: add.to_string(),
            relu_out: consumers[0].to_string(),
            shortcut_conv,
            shortcut_bn,
        })
    }
}

/// Finds every basic and projection residual block, in graph order.
///
/// Each add node yields at most one match and every interior node must
/// have a single reader, so matches never overlap.
pub fn find_residual_blocks(g: &Graph) -> Vec<BlockMatch> {
    let m = Matcher { g };
    let mut out = Vec::new();
    for node in g.nodes() {
        if node.kind() != OpKind::Add || node.inputs.len() != 2 {
            continue;
        }
        let (a, b) = (node.inputs[0].as_str(), node.inputs[1].as_str());
        if let Some(found) = m
            .try_match(&node.id, a, b)
            .or_else(|| m.try_match(&node.id, b, a))
        {
            out.push(found);
        }
    }
    out
}

/// Whether the value produced by `id` is elementwise non-negative by
/// construction: a relu, or a pooling/concat of such values. The graph
/// input counts only when `assume_input_nonneg` is set.
pub fn is_provably_nonneg(g: &Graph, id: &str, assume_input_nonneg: bool) -> bool {
    let Some(node) = g.node(id) else { return false };
    match node.kind() {
        OpKind::Relu => true,
        OpKind::Input => assume_input_nonneg,
        OpKind::MaxPool | OpKind::GAvgPool => {
            is_provably_nonneg(g, &node.inputs[0], assume_input_nonneg)
        }
        OpKind::Concat => node
            .inputs
            .iter()
            .all(|i| is_provably_nonneg(g, i, assume_input_nonneg)),
        _ => false,
    }
}
