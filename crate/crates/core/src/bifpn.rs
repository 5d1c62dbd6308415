//! Weighted bidirectional feature fusion.
//!
//! A fusion node blends its resampled inputs with fast normalized weights
//!
//! ```text
//! O = sum_i w_i / (eps + sum_j w_j) * I_i,    w_i = max(0, raw_i)
//! ```
//!
//! Fusion topologies are plain data ([`FusionGraph`], loaded from JSON), so
//! pruning and skip-edge surgery are graph rewrites rather than code paths.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    pointwise_conv, read_array, resample, silu_map, Conv1x1, Dims, Element, Resample, Tensor,
};

pub const DEFAULT_EPSILON: f64 = 1e-4;

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

/// `w_i / (eps + sum_j w_j)` with raw weights clamped at zero.
pub fn normalized_coefficients(raw_weights: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if raw_weights.is_empty() {
        return Err(Error::Config("fusion needs at least one weight".into()));
    }
    if raw_weights.iter().any(|w| !w.is_finite()) || !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::Config(format!(
            "fusion weights {raw_weights:?} and epsilon {epsilon} must be finite, epsilon >= 0"
        )));
    }
    let clamped: Vec<f64> = raw_weights.iter().map(|&w| w.max(0.0)).collect();
    let denom = epsilon + clamped.iter().sum::<f64>();
    if denom <= 0.0 {
        return Err(Error::Degenerate(
            "all fusion weights are zero and epsilon is 0".into(),
        ));
    }
    Ok(clamped.iter().map(|w| w / denom).collect())
}

pub fn fuse_weighted<T: Element>(
    inputs: &[&Tensor<T>],
    raw_weights: &[f64],
    epsilon: f64,
) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Config("fuse_weighted needs at least one input".into()))?;
    if inputs.len() != raw_weights.len() {
        return Err(Error::Config(format!(
            "{} inputs but {} weights",
            inputs.len(),
            raw_weights.len()
        )));
    }
    for t in inputs {
        t.expect_dims(first.dims(), "fuse_weighted input")?;
    }
    let coef = normalized_coefficients(raw_weights, epsilon)?;
    let mut out = vec![T::default(); first.numel()];
    const CHUNK: usize = 4096;
    out.par_chunks_mut(CHUNK)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let base = ci * CHUNK;
            for (k, o) in chunk.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (t, &c) in inputs.iter().zip(&coef) {
                    acc += c * t.data()[base + k].to_f64();
                }
                *o = T::from_f64(acc);
            }
        });
    Ok(Tensor::from_parts(first.dims(), out))
}

/// Gradients of `L = <upstream, fuse_weighted(inputs, raw, eps)>` with respect
/// to every input and every raw weight. Clamped (negative) weights get zero.
pub fn fuse_weighted_backward<T: Element>(
    inputs: &[&Tensor<T>],
    raw_weights: &[f64],
    epsilon: f64,
    upstream: &Tensor<T>,
) -> Result<(Vec<Tensor<T>>, Vec<f64>)> {
    let coef = normalized_coefficients(raw_weights, epsilon)?;
    if inputs.len() != raw_weights.len() {
        return Err(Error::Config(format!(
            "{} inputs but {} weights",
            inputs.len(),
            raw_weights.len()
        )));
    }
    let clamped_sum: f64 = raw_weights.iter().map(|w| w.max(0.0)).sum();
    let denom = epsilon + clamped_sum;
    let mut dots = Vec::with_capacity(inputs.len());
    for t in inputs {
        dots.push(upstream.dot(t)?);
    }
    let weighted: f64 = coef.iter().zip(&dots).map(|(c, d)| c * d).sum();
    let dw = raw_weights
        .iter()
        .zip(&dots)
        .map(|(&w, &d)| if w > 0.0 { (d - weighted) / denom } else { 0.0 })
        .collect();
    let dinputs = coef.iter().map(|&c| upstream.scale(c)).collect();
    Ok((dinputs, dw))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Input,
    Fuse,
    Output,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    #[serde(default)]
    pub resample: Resample,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Silu,
}

/// Optional 1×1 conv after fusion. Without explicit parameters the conv is
/// [`Conv1x1::identity`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
}

impl ConvSpec {
    pub fn build(&self, in_channels: usize) -> Result<Conv1x1> {
        let id = Conv1x1::identity(self.out_channels, in_channels);
        Conv1x1::new(
            self.out_channels,
            in_channels,
            self.weight.clone().unwrap_or(id.weight),
            self.bias.clone().unwrap_or(id.bias),
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PostOp {
    #[serde(default)]
    pub conv: Option<ConvSpec>,
    #[serde(default)]
    pub act: Activation,
}

impl PostOp {
    pub fn is_identity(&self) -> bool {
        self.conv.is_none() && self.act == Activation::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionNode {
    pub id: String,
    pub kind: NodeKind,
    /// Pyramid level (e.g. `P4`). Input nodes default to their id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<String>,
    #[serde(default)]
    pub inputs: Vec<Edge>,
    #[serde(default)]
    pub weights: Vec<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post: Option<PostOp>,
}

impl FusionNode {
    pub fn input(id: &str) -> Self {
        FusionNode {
            id: id.to_string(),
            kind: NodeKind::Input,
            level: None,
            inputs: Vec::new(),
            weights: Vec::new(),
            epsilon: DEFAULT_EPSILON,
            post: None,
        }
    }

    /// Fuse node with unit raw weights.
    pub fn fuse(id: &str, kind: NodeKind, inputs: &[(&str, Resample)]) -> Self {
        FusionNode {
            id: id.to_string(),
            kind,
            level: None,
            inputs: inputs
                .iter()
                .map(|&(src, resample)| Edge {
                    src: src.to_string(),
                    resample,
                })
                .collect(),
            weights: vec![1.0; inputs.len()],
            epsilon: DEFAULT_EPSILON,
            post: None,
        }
    }

    pub fn at_level(mut self, level: &str) -> Self {
        self.level = Some(level.to_string());
        self
    }

    pub fn level(&self) -> Option<&str> {
        match (&self.level, self.kind) {
            (Some(l), _) => Some(l),
            (None, NodeKind::Input) => Some(&self.id),
            _ => None,
        }
    }

    fn has_post(&self) -> bool {
        self.post.as_ref().is_some_and(|p| !p.is_identity())
    }

    /// In-edges with their raw weights, sorted by `(src, resample)`.
    fn sorted_edges(&self) -> Vec<(&Edge, f64)> {
        let mut e: Vec<(&Edge, f64)> = self
            .inputs
            .iter()
            .zip(self.weights.iter().copied())
            .collect();
        e.sort_by(|a, b| a.0.cmp(b.0));
        e
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionGraph {
    pub nodes: Vec<FusionNode>,
    /// Expected dims of every input level.
    pub inputs: BTreeMap<String, Dims>,
    pub outputs: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum IssueKind {
    DuplicateId,
    DanglingId,
    Cycle,
    WeightCount,
    BadWeights,
    NoInEdges,
    InputWithEdges,
    MissingInputDims,
    DimMismatch,
    ConvShape,
    UnknownOutput,
    Unreachable,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Issue {
    pub kind: IssueKind,
    pub node: Option<String>,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            Some(n) => write!(f, "{n}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Outcome of [`graph_validate`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
    /// Topological order (lexicographic tie-break); empty when cyclic.
    pub order: Vec<String>,
    /// Output dims of every node whose dims could be resolved.
    pub dims: BTreeMap<String, Dims>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has(&self, kind: IssueKind) -> bool {
        self.issues.iter().any(|i| i.kind == kind)
    }

    pub fn into_result(self) -> Result<Self> {
        if self.is_valid() {
            Ok(self)
        } else {
            let msg: Vec<String> = self.issues.iter().map(|i| i.to_string()).collect();
            Err(Error::Graph(msg.join("; ")))
        }
    }
}

impl FusionGraph {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("fusion graph", e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    /// The shipped post-surgery neck: P3/P4/P5 in, one top-down P4 node,
    /// three outputs with a same-level P4 skip.
    pub fn bss_default() -> Self {
        Self::from_json(crate::fixtures::BSS_DEFAULT_NECK).expect("bundled graph parses")
    }

    /// The pre-surgery PAN-style neck that simplifies to [`bss_default`](Self::bss_default).
    pub fn pan_baseline() -> Self {
        Self::from_json(crate::fixtures::PAN_NECK).expect("bundled graph parses")
    }

    pub fn node(&self, id: &str) -> Option<&FusionNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut FusionNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Declared input levels, in name order.
    pub fn input_levels(&self) -> Vec<String> {
        self.inputs.keys().cloned().collect()
    }

    /// Rebinds every input level to a pyramid with `channels` channels whose
    /// finest level (`finest`) has side `side`; each following level halves it.
    pub fn with_pyramid(mut self, batch: usize, channels: usize, side: usize) -> Self {
        let levels = self.input_levels();
        for (i, l) in levels.iter().enumerate() {
            let s = side >> i;
            self.inputs
                .insert(l.clone(), Dims::new(batch, channels, s, s));
        }
        self
    }

    /// Applies a weights directory: `manifest.json` with optional `fusion`
    /// (node id → raw weights) and `conv` (node id → `{"weight": file, "bias": file}`
    /// BST1 arrays, weight shaped `[out, in]`).
    pub fn apply_weights_dir(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        #[derive(Deserialize)]
        struct ConvFiles {
            weight: String,
            bias: Option<String>,
        }
        #[derive(Deserialize)]
        struct Manifest {
            #[serde(default)]
            fusion: BTreeMap<String, Vec<f64>>,
            #[serde(default)]
            conv: BTreeMap<String, ConvFiles>,
        }
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        for (id, w) in m.fusion {
            let node = self
                .node_mut(&id)
                .ok_or_else(|| Error::Graph(format!("weights for unknown node {id}")))?;
            node.weights = w;
        }
        for (id, files) in m.conv {
            let w = read_array(dir.join(&files.weight))?;
            if w.dims.len() != 2 {
                return Err(Error::Format(format!(
                    "{}: conv weight must be rank 2",
                    files.weight
                )));
            }
            let bias = match files.bias {
                Some(b) => Some(
                    read_array(dir.join(b))?
                        .data
                        .iter()
                        .map(|&v| v as f64)
                        .collect(),
                ),
                None => None,
            };
            let node = self
                .node_mut(&id)
                .ok_or_else(|| Error::Graph(format!("conv weights for unknown node {id}")))?;
            let post = node.post.get_or_insert_with(PostOp::default);
            post.conv = Some(ConvSpec {
                out_channels: w.dims[0],
                weight: Some(w.data.iter().map(|&v| v as f64).collect()),
                bias,
            });
        }
        Ok(())
    }
}

/// Kahn's algorithm over known ids, smallest ready id first. `None` on a cycle.
fn topo_order(g: &FusionGraph) -> Option<Vec<String>> {
    let ids: BTreeSet<&str> = g.nodes.iter().map(|n| n.id.as_str()).collect();
    let mut indegree: BTreeMap<&str, usize> = ids.iter().map(|&id| (id, 0)).collect();
    let mut consumers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for n in &g.nodes {
        for e in &n.inputs {
            if ids.contains(e.src.as_str()) {
                *indegree.get_mut(n.id.as_str()).unwrap() += 1;
                consumers.entry(e.src.as_str()).or_default().push(&n.id);
            }
        }
    }
    let mut ready: BTreeSet<&str> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&id, _)| id)
        .collect();
    let mut order = Vec::with_capacity(ids.len());
    while let Some(id) = ready.pop_first() {
        order.push(id.to_string());
        for &c in consumers.get(id).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indegree.get_mut(c).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(c);
            }
        }
    }
    (order.len() == ids.len()).then_some(order)
}

/// Structural and dimensional checks. Never fails; inspect the report.
pub fn graph_validate(g: &FusionGraph) -> ValidationReport {
    let mut issues: Vec<Issue> = Vec::new();
    fn push(issues: &mut Vec<Issue>, kind: IssueKind, node: Option<&str>, message: String) {
        issues.push(Issue {
            kind,
            node: node.map(str::to_string),
            message,
        })
    }

    let mut seen = BTreeSet::new();
    for n in &g.nodes {
        if !seen.insert(n.id.as_str()) {
            push(
                &mut issues,
                IssueKind::DuplicateId,
                Some(&n.id),
                "duplicate node id".into(),
            );
        }
    }
    for n in &g.nodes {
        for e in &n.inputs {
            if !seen.contains(e.src.as_str()) {
                push(
                    &mut issues,
                    IssueKind::DanglingId,
                    Some(&n.id),
                    format!("edge from unknown node {}", e.src),
                );
            }
            if e.src == n.id {
                push(
                    &mut issues,
                    IssueKind::Cycle,
                    Some(&n.id),
                    "self-loop".into(),
                );
            }
        }
        match n.kind {
            NodeKind::Input => {
                if !n.inputs.is_empty() {
                    push(
                        &mut issues,
                        IssueKind::InputWithEdges,
                        Some(&n.id),
                        "input node has in-edges".into(),
                    );
                }
                if !g.inputs.contains_key(&n.id) {
                    push(
                        &mut issues,
                        IssueKind::MissingInputDims,
                        Some(&n.id),
                        "no declared dims for input".into(),
                    );
                }
            }
            NodeKind::Fuse | NodeKind::Output => {
                if n.inputs.is_empty() {
                    push(
                        &mut issues,
                        IssueKind::NoInEdges,
                        Some(&n.id),
                        "fusion node without in-edges".into(),
                    );
                }
                if n.weights.len() != n.inputs.len() {
                    push(
                        &mut issues,
                        IssueKind::WeightCount,
                        Some(&n.id),
                        format!(
                            "{} weights for {} in-edges",
                            n.weights.len(),
                            n.inputs.len()
                        ),
                    );
                } else if !n.inputs.is_empty() {
                    if let Err(e) = normalized_coefficients(&n.weights, n.epsilon) {
                        push(
                            &mut issues,
                            IssueKind::BadWeights,
                            Some(&n.id),
                            e.to_string(),
                        );
                    }
                }
            }
        }
    }
    for level in g.inputs.keys() {
        if !g
            .nodes
            .iter()
            .any(|n| n.kind == NodeKind::Input && &n.id == level)
        {
            push(
                &mut issues,
                IssueKind::MissingInputDims,
                Some(level),
                "declared input has no input node".into(),
            );
        }
    }
    for o in &g.outputs {
        if !seen.contains(o.as_str()) {
            push(
                &mut issues,
                IssueKind::UnknownOutput,
                Some(o),
                "declared output does not exist".into(),
            );
        }
    }

    let order = if issues.iter().any(|i| i.kind == IssueKind::Cycle) {
        None
    } else {
        topo_order(g)
    };
    let Some(order) = order else {
        if !issues.iter().any(|i| i.kind == IssueKind::Cycle) {
            push(
                &mut issues,
                IssueKind::Cycle,
                None,
                "graph contains a cycle".into(),
            );
        }
        return ValidationReport {
            issues,
            order: Vec::new(),
            dims: BTreeMap::new(),
        };
    };

    let mut dims: BTreeMap<String, Dims> = BTreeMap::new();
    let mut grounded: BTreeSet<String> = BTreeSet::new();
    for id in &order {
        let n = g.node(id).unwrap();
        if n.kind == NodeKind::Input {
            grounded.insert(id.clone());
            if let Some(&d) = g.inputs.get(id) {
                dims.insert(id.clone(), d);
            }
            continue;
        }
        if n.inputs.iter().any(|e| grounded.contains(&e.src)) {
            grounded.insert(id.clone());
        }
        let mut working: Option<Dims> = None;
        let mut ok = true;
        for (e, _) in n.sorted_edges() {
            let Some(&src) = dims.get(&e.src) else {
                ok = false;
                continue;
            };
            match e.resample.output_dims(src) {
                Ok(d) => match working {
                    None => working = Some(d),
                    Some(w) if w != d => {
                        push(
                            &mut issues,
                            IssueKind::DimMismatch,
                            Some(id),
                            format!("edge from {} resolves to {d}, expected {w}", e.src),
                        );
                        ok = false;
                    }
                    _ => {}
                },
                Err(err) => {
                    push(
                        &mut issues,
                        IssueKind::DimMismatch,
                        Some(id),
                        format!("edge from {}: {err}", e.src),
                    );
                    ok = false;
                }
            }
        }
        let (true, Some(mut d)) = (ok, working) else {
            continue;
        };
        if let Some(conv) = n.post.as_ref().and_then(|p| p.conv.as_ref()) {
            match conv.build(d.c) {
                Ok(c) => d = d.with_c(c.out_channels),
                Err(err) => {
                    push(&mut issues, IssueKind::ConvShape, Some(id), err.to_string());
                    continue;
                }
            }
        }
        dims.insert(id.clone(), d);
    }
    for o in &g.outputs {
        if seen.contains(o.as_str()) && !grounded.contains(o) {
            push(
                &mut issues,
                IssueKind::Unreachable,
                Some(o),
                "output not reachable from any input".into(),
            );
        }
    }
    ValidationReport {
        issues,
        order,
        dims,
    }
}

/// Result of [`graph_simplify_detailed`].
#[derive(Clone, Debug, PartialEq)]
pub struct Simplified {
    pub graph: FusionGraph,
    /// Pruned pass-through node ids, in removal order.
    pub removed: Vec<String>,
    /// Added `(input, output)` skip edges.
    pub skips_added: Vec<(String, String)>,
}

/// Removes single-input pass-through fuse nodes and adds missing same-level
/// input→output skip edges (raw weight 1).
pub fn graph_simplify(g: &FusionGraph) -> Result<FusionGraph> {
    Ok(graph_simplify_detailed(g)?.graph)
}

pub fn graph_simplify_detailed(g: &FusionGraph) -> Result<Simplified> {
    graph_validate(g).into_result()?;
    let mut g = g.clone();
    let mut removed = Vec::new();

    loop {
        let mut candidates: Vec<&FusionNode> = g
            .nodes
            .iter()
            .filter(|n| {
                n.kind == NodeKind::Fuse
                    && n.inputs.len() == 1
                    && !n.has_post()
                    && !g.outputs.contains(&n.id)
            })
            .collect();
        candidates.sort_by(|a, b| a.id.cmp(&b.id));
        // A node is prunable only if every consumer edge composes into one resample.
        let pick = candidates.into_iter().find(|n| {
            let inner = n.inputs[0].resample;
            g.nodes
                .iter()
                .flat_map(|c| &c.inputs)
                .filter(|e| e.src == n.id)
                .all(|e| inner.then(e.resample).is_some())
        });
        let Some(node) = pick.cloned() else { break };
        let src = &node.inputs[0];
        for c in &mut g.nodes {
            for e in &mut c.inputs {
                if e.src == node.id {
                    e.resample = src.resample.then(e.resample).unwrap();
                    e.src = src.src.clone();
                }
            }
        }
        g.nodes.retain(|n| n.id != node.id);
        removed.push(node.id);
    }

    let mut skips_added = Vec::new();
    let input_by_level: BTreeMap<String, String> = g
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::Input)
        .filter_map(|n| n.level().map(|l| (l.to_string(), n.id.clone())))
        .collect();
    for n in g.nodes.iter_mut().filter(|n| n.kind == NodeKind::Output) {
        let Some(input) = n.level().and_then(|l| input_by_level.get(l)).cloned() else {
            continue;
        };
        let present = n
            .inputs
            .iter()
            .any(|e| e.src == input && e.resample == Resample::None);
        if !present {
            n.inputs.push(Edge {
                src: input.clone(),
                resample: Resample::None,
            });
            n.weights.push(1.0);
            skips_added.push((input, n.id.clone()));
        }
    }

    let report = graph_validate(&g);
    if report.has(IssueKind::Cycle) {
        return Err(Error::Graph("rewiring created a cycle".into()));
    }
    report.into_result()?;
    Ok(Simplified {
        graph: g,
        removed,
        skips_added,
    })
}

/// Evaluates every node in topological order and returns the declared outputs.
pub fn graph_execute<T: Element>(
    g: &FusionGraph,
    inputs: &BTreeMap<String, Tensor<T>>,
) -> Result<BTreeMap<String, Tensor<T>>> {
    Ok(graph_execute_all(g, inputs)?
        .into_iter()
        .filter(|(k, _)| g.outputs.contains(k))
        .collect())
}

/// Like [`graph_execute`] but returns every node's value.
pub fn graph_execute_all<T: Element>(
    g: &FusionGraph,
    inputs: &BTreeMap<String, Tensor<T>>,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let report = graph_validate(g).into_result()?;
    for (level, &dims) in &g.inputs {
        let t = inputs
            .get(level)
            .ok_or_else(|| Error::Config(format!("missing input level {level}")))?;
        if t.dims() != dims {
            return Err(Error::Shape(format!(
                "input {level}: expected dims {dims}, got {}",
                t.dims()
            )));
        }
    }
    let mut values: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for id in &report.order {
        let n = g.node(id).unwrap();
        if n.kind == NodeKind::Input {
            values.insert(id.clone(), inputs[id].clone());
            continue;
        }
        let edges = n.sorted_edges();
        let mut sources = Vec::with_capacity(edges.len());
        let mut weights = Vec::with_capacity(edges.len());
        for (e, w) in edges {
            sources.push(resample(&values[&e.src], e.resample)?);
            weights.push(w);
        }
        let refs: Vec<&Tensor<T>> = sources.iter().collect();
        let mut out = fuse_weighted(&refs, &weights, n.epsilon)?;
        if let Some(post) = &n.post {
            if let Some(conv) = &post.conv {
                out = pointwise_conv(&out, &conv.build(out.dims().c)?)?;
            }
            if post.act == Activation::Silu {
                out = silu_map(&out);
            }
        }
        values.insert(id.clone(), out);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};
    use crate::tensor::Tensor64;

    fn scalar(v: f64) -> Tensor64 {
        Tensor64::new([1, 1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn fuse_examples() {
        let mut rng = seeded(0);
        let i: Tensor64 = normal_tensor(&mut rng, Dims::new(1, 2, 3, 3));
        let o = fuse_weighted(&[&i, &i], &[1.0, 1.0], 1e-4).unwrap();
        assert!(o.max_abs_diff(&i.scale(2.0 / 2.0001)).unwrap() < 1e-12);
        assert!((2.0 / 2.0001 - 0.99995_f64).abs() < 1e-8);

        let j: Tensor64 = normal_tensor(&mut rng, Dims::new(1, 2, 3, 3));
        let o = fuse_weighted(&[&i, &j], &[0.0, 1.0], 1e-4).unwrap();
        assert!(o.max_abs_diff(&j.scale(1.0 / 1.0001)).unwrap() < 1e-12);

        let (a, b, c) = (scalar(1.0), scalar(2.0), scalar(3.0));
        let o = fuse_weighted(&[&a, &b, &c], &[0.5, 1.5, 2.0], 1e-4).unwrap();
        assert!((o.data()[0] - 2.374941).abs() < 1e-6);
    }

    #[test]
    fn fuse_errors() {
        let a = scalar(1.0);
        let b = Tensor64::zeros([1, 1, 2, 1]).unwrap();
        assert!(matches!(
            fuse_weighted(&[&a, &b], &[1.0, 1.0], 1e-4),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            fuse_weighted(&[&a], &[0.0], 0.0),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            fuse_weighted(&[&a], &[-1.0], 0.0),
            Err(Error::Degenerate(_))
        ));
        assert!(fuse_weighted::<f64>(&[], &[], 1e-4).is_err());
        assert!(fuse_weighted(&[&a], &[1.0, 2.0], 1e-4).is_err());
    }

    #[test]
    fn coefficient_sum() {
        let c = normalized_coefficients(&[0.3, -2.0, 1.2], 1e-4).unwrap();
        assert_eq!(c[1], 0.0);
        let s: f64 = c.iter().sum();
        assert!((s - 1.5 / 1.5001).abs() < 1e-12);
        assert!(c.iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn default_graphs_validate() {
        let g = FusionGraph::bss_default();
        let r = graph_validate(&g);
        assert!(r.is_valid(), "{:?}", r.issues);
        assert_eq!(r.order[..3], ["P3", "P4", "P5"]);
        assert!(graph_validate(&FusionGraph::pan_baseline()).is_valid());
    }

    #[test]
    fn validate_flags_problems() {
        let mut g = FusionGraph::bss_default();
        g.node_mut("P4td").unwrap().inputs.push(Edge {
            src: "P4td".into(),
            resample: Resample::None,
        });
        g.node_mut("P4td").unwrap().weights.push(1.0);
        assert!(graph_validate(&g).has(IssueKind::Cycle));

        let mut g = FusionGraph::bss_default();
        g.node_mut("P3out").unwrap().weights.pop();
        assert!(graph_validate(&g).has(IssueKind::WeightCount));

        let mut g = FusionGraph::bss_default();
        g.node_mut("P3out").unwrap().inputs[0].src = "nowhere".into();
        assert!(graph_validate(&g).has(IssueKind::DanglingId));

        let mut g = FusionGraph::bss_default();
        g.node_mut("P3out").unwrap().inputs[0].resample = Resample::None;
        assert!(graph_validate(&g).has(IssueKind::DimMismatch));

        let mut g = FusionGraph::bss_default();
        g.outputs.push("P9out".into());
        assert!(graph_validate(&g).has(IssueKind::UnknownOutput));

        let mut g = FusionGraph::bss_default();
        let weights = &mut g.node_mut("P3out").unwrap().weights;
        weights.iter_mut().for_each(|w| *w = 0.0);
        g.node_mut("P3out").unwrap().epsilon = 0.0;
        assert!(graph_validate(&g).has(IssueKind::BadWeights));
    }

    #[test]
    fn pan_simplifies_to_default() {
        let s = graph_simplify_detailed(&FusionGraph::pan_baseline()).unwrap();
        assert_eq!(s.removed, vec!["P5td".to_string()]);
        assert_eq!(s.skips_added, vec![("P4".to_string(), "P4out".to_string())]);
        let mut got = s.graph;
        let mut want = FusionGraph::bss_default();
        for g in [&mut got, &mut want] {
            g.nodes.sort_by(|a, b| a.id.cmp(&b.id));
            for n in &mut g.nodes {
                let mut pairs: Vec<(Edge, f64)> =
                    n.inputs.drain(..).zip(n.weights.drain(..)).collect();
                pairs.sort_by(|a, b| a.0.cmp(&b.0));
                for (e, w) in pairs {
                    n.inputs.push(e);
                    n.weights.push(w);
                }
            }
        }
        assert_eq!(got.nodes, want.nodes);
        assert_eq!(graph_simplify(&want).unwrap(), want);
    }

    #[test]
    fn chain_prune_composes_resample() {
        let mut g = FusionGraph {
            nodes: vec![
                FusionNode::input("A"),
                FusionNode::fuse("B", NodeKind::Fuse, &[("A", Resample::Up2)]),
                FusionNode::fuse("C", NodeKind::Output, &[("B", Resample::Down2)]),
            ],
            inputs: BTreeMap::from([("A".to_string(), Dims::new(1, 1, 2, 2))]),
            outputs: vec!["C".into()],
        };
        let s = graph_simplify_detailed(&g).unwrap();
        assert_eq!(s.removed, vec!["B"]);
        let c = s.graph.node("C").unwrap();
        assert_eq!(
            c.inputs,
            vec![Edge {
                src: "A".into(),
                resample: Resample::None
            }]
        );

        // down2 then up2 is not a single resample, so B stays
        g.inputs.insert("A".into(), Dims::new(1, 1, 4, 4));
        g.node_mut("B").unwrap().inputs[0].resample = Resample::Down2;
        g.node_mut("C").unwrap().inputs[0].resample = Resample::Up2;
        assert!(graph_simplify_detailed(&g).unwrap().removed.is_empty());
    }

    #[test]
    fn execute_identity_graph() {
        let g = FusionGraph {
            nodes: vec![FusionNode::input("X")],
            inputs: BTreeMap::from([("X".to_string(), Dims::new(1, 2, 2, 2))]),
            outputs: vec!["X".into()],
        };
        let mut rng = seeded(1);
        let x: Tensor64 = normal_tensor(&mut rng, Dims::new(1, 2, 2, 2));
        let out = graph_execute(&g, &BTreeMap::from([("X".to_string(), x.clone())])).unwrap();
        assert_eq!(out["X"], x);
    }

    #[test]
    fn execute_errors() {
        let g = FusionGraph::bss_default();
        let mut rng = seeded(2);
        let mut inputs: BTreeMap<String, Tensor64> = g
            .inputs
            .iter()
            .map(|(k, &d)| (k.clone(), normal_tensor(&mut rng, d)))
            .collect();
        inputs.remove("P5");
        assert!(matches!(graph_execute(&g, &inputs), Err(Error::Config(_))));
        inputs.insert("P5".into(), normal_tensor(&mut rng, Dims::new(1, 16, 4, 4)));
        assert!(matches!(graph_execute(&g, &inputs), Err(Error::Shape(_))));
    }

    #[test]
    fn post_conv_and_silu() {
        let mut g = FusionGraph {
            nodes: vec![
                FusionNode::input("A"),
                FusionNode::fuse("B", NodeKind::Output, &[("A", Resample::None)]),
            ],
            inputs: BTreeMap::from([("A".to_string(), Dims::new(1, 2, 1, 1))]),
            outputs: vec!["B".into()],
        };
        g.node_mut("B").unwrap().epsilon = 0.0;
        g.node_mut("B").unwrap().post = Some(PostOp {
            conv: Some(ConvSpec {
                out_channels: 1,
                weight: Some(vec![1.0, 1.0]),
                bias: Some(vec![0.5]),
            }),
            act: Activation::Silu,
        });
        let r = graph_validate(&g);
        assert_eq!(r.dims["B"], Dims::new(1, 1, 1, 1));
        let a = Tensor64::new([1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let out = graph_execute(&g, &BTreeMap::from([("A".to_string(), a)])).unwrap();
        assert!((out["B"].data()[0] - crate::tensor::silu(3.5)).abs() < 1e-12);
    }
}
