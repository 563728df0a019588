//! Micro-DAGs: nodes are tensor shapes, edges are primitive instances.

use std::collections::VecDeque;
use std::fmt;

use crate::primitive::{anonymize, output_shape, normalize_kind, PrimitiveError, PrimitiveInstance, PrimitiveKind};
use crate::matching::match_broadcast;
use crate::shape::{Dimension, Shape, ShapeError, VarId};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DagError {
    #[error("node n{node}: expected shape {expected}, found {found}")]
    ShapeMismatch {
        node: NodeId,
        expected: String,
        found: String,
    },
    #[error("unknown node n{0}")]
    UnknownNode(NodeId),
    #[error("the dag has no input node")]
    Empty,
    #[error("cannot finalize: width {width}, output shape {shape}")]
    NotFinal { width: usize, shape: String },
    #[error(transparent)]
    Primitive(#[from] PrimitiveError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// One primitive application. Edge `k` always produces node `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub inst: PrimitiveInstance,
    pub inputs: Vec<NodeId>,
    pub output: NodeId,
    /// Broadcast ratio `M`, which must stay a whole number under later
    /// substitutions.
    pub ratio: Option<Dimension>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PruneRule {
    ConsecutiveElementwise,
    SelfSubtraction,
    GroupUndoneByFold,
    RepeatedSoftmax,
}

impl PruneRule {
    pub const ALL: [PruneRule; 4] = [
        PruneRule::ConsecutiveElementwise,
        PruneRule::SelfSubtraction,
        PruneRule::GroupUndoneByFold,
        PruneRule::RepeatedSoftmax,
    ];

    pub fn reason(self) -> &'static str {
        match self {
            PruneRule::ConsecutiveElementwise => "consecutive identical elementwise",
            PruneRule::SelfSubtraction => "self-subtraction",
            PruneRule::GroupUndoneByFold => "group undone by fold",
            PruneRule::RepeatedSoftmax => "repeated softmax",
        }
    }
}

impl fmt::Display for PruneRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.reason())
    }
}

/// Which redundancy rules are active.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneConfig {
    pub rules: Vec<PruneRule>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            rules: PruneRule::ALL.to_vec(),
        }
    }
}

impl PruneConfig {
    pub fn none() -> PruneConfig {
        PruneConfig { rules: Vec::new() }
    }

    fn has(&self, r: PruneRule) -> bool {
        self.rules.contains(&r)
    }
}

/// The growing kernel graph. `MicroDag::default()` is the empty graph;
/// [`MicroDag::new`] holds only the input node `<C | H, W>`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MicroDag {
    nodes: Vec<Shape>,
    edges: Vec<Edge>,
    out_degree: Vec<u32>,
    /// Value numbers: nodes computing the same function of the input share
    /// a number. Fully-connected outputs are always unique.
    values: Vec<u64>,
    next_var: u32,
}

const SEED: u64 = 0x6a09_e667_f3bc_c908;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn mix(h: u64, v: u64) -> u64 {
    splitmix64(h.rotate_left(23) ^ v)
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl MicroDag {
    /// A dag holding just the input node.
    pub fn new() -> MicroDag {
        MicroDag {
            nodes: vec![Shape::input()],
            edges: Vec::new(),
            out_degree: vec![0],
            values: vec![fnv1a("input")],
            next_var: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Shape] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, id: NodeId) -> Option<&Shape> {
        self.nodes.get(id)
    }

    /// The edge producing `id`, `None` for the input.
    pub fn producer(&self, id: NodeId) -> Option<&Edge> {
        id.checked_sub(1).and_then(|k| self.edges.get(k))
    }

    pub fn out_degree(&self, id: NodeId) -> u32 {
        self.out_degree[id]
    }

    pub fn value(&self, id: NodeId) -> u64 {
        self.values[id]
    }

    /// Number of leaves: nodes not yet consumed by any edge.
    pub fn width(&self) -> usize {
        self.out_degree.iter().filter(|&&d| d == 0).count()
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| self.out_degree[i] == 0).collect()
    }

    /// Width after consuming `inputs` and adding one new leaf.
    pub fn width_after(&self, inputs: &[NodeId]) -> usize {
        let mut w = self.width() + 1;
        for (k, &i) in inputs.iter().enumerate() {
            if self.out_degree[i] == 0 && !inputs[..k].contains(&i) {
                w -= 1;
            }
        }
        w
    }

    /// The variable the next fully-connected primitive will introduce.
    pub fn fresh_var(&self) -> VarId {
        VarId(self.next_var.max(1))
    }

    /// Distinct variables across all node shapes, sorted.
    pub fn vars(&self) -> Vec<VarId> {
        let mut out: Vec<VarId> = self.nodes.iter().flat_map(|s| s.vars()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Append a primitive applied to `inputs`.
    pub fn push(&mut self, kind: PrimitiveKind, inputs: &[NodeId]) -> Result<NodeId, DagError> {
        if self.nodes.is_empty() {
            return Err(DagError::Empty);
        }
        let shapes: Vec<Shape> = inputs
            .iter()
            .map(|&i| self.nodes.get(i).cloned().ok_or(DagError::UnknownNode(i)))
            .collect::<Result<_, _>>()?;
        let inst = PrimitiveInstance::new(kind, shapes)?;
        Ok(self.push_instance(inst, inputs))
    }

    /// Append `inst`, whose declared input shapes must equal those at
    /// `inputs`. Returns the grown dag; `self` is left untouched.
    pub fn grow(&self, inst: PrimitiveInstance, inputs: &[NodeId]) -> Result<MicroDag, DagError> {
        if self.nodes.is_empty() {
            return Err(DagError::Empty);
        }
        if inst.inputs.len() != inputs.len() {
            return Err(PrimitiveError::Arity {
                kind: inst.kind.to_string(),
                expected: inst.kind.arity(),
                got: inputs.len(),
            }
            .into());
        }
        for (declared, &i) in inst.inputs.iter().zip(inputs) {
            let actual = self.nodes.get(i).ok_or(DagError::UnknownNode(i))?;
            if actual != declared {
                return Err(DagError::ShapeMismatch {
                    node: i,
                    expected: actual.to_string(),
                    found: declared.to_string(),
                });
            }
        }
        let kind = normalize_kind(inst.kind, &inst.inputs[0]);
        let refs: Vec<&Shape> = inst.inputs.iter().collect();
        let output = output_shape(&kind, &refs)?;
        if output != inst.output {
            return Err(DagError::ShapeMismatch {
                node: self.nodes.len(),
                expected: output.to_string(),
                found: inst.output.to_string(),
            });
        }
        let mut next = self.clone();
        next.push_instance(PrimitiveInstance { kind, ..inst }, inputs);
        Ok(next)
    }

    fn push_instance(&mut self, inst: PrimitiveInstance, inputs: &[NodeId]) -> NodeId {
        let id = self.nodes.len();
        for &i in inputs {
            self.out_degree[i] += 1;
        }
        let value = if inst.kind.has_weights() {
            mix(fnv1a("weights"), id as u64)
        } else {
            inputs.iter().fold(fnv1a(&inst.kind.to_string()), |h, &i| mix(h, self.values[i]))
        };
        if let PrimitiveKind::FullyConnected { out } = inst.kind {
            for (v, _) in out.vars() {
                self.next_var = self.next_var.max(v.0 + 1);
            }
        }
        let ratio = match inst.kind {
            PrimitiveKind::Broadcast(_) => match_broadcast(&inst.inputs[0], &inst.inputs[1]).map(|m| m.ratio),
            _ => None,
        };
        self.nodes.push(inst.output.clone());
        self.out_degree.push(0);
        self.values.push(value);
        self.edges.push(Edge {
            inst,
            inputs: inputs.to_vec(),
            output: id,
            ratio,
        });
        id
    }

    /// Whether `id := expr` keeps every node shape legal and whole and every
    /// recorded broadcast ratio whole.
    pub fn substitution_is_valid(&self, id: VarId, expr: &Dimension) -> bool {
        let dims = self
            .nodes
            .iter()
            .flat_map(|s| s.dims().map(|(_, d)| d))
            .filter(|d| d.has_var(id));
        for d in dims {
            match d.substitute(id, expr) {
                Ok(s) if s.is_integral() => {}
                _ => return false,
            }
        }
        self.edges
            .iter()
            .filter_map(|e| e.ratio.as_ref())
            .filter(|r| r.has_var(id))
            .all(|r| r.substitute_raw(id, expr).is_ok_and(|s| s.is_integral()))
    }

    /// Apply `id := expr` to every node, edge and primitive parameter.
    pub fn substitute(&self, id: VarId, expr: &Dimension) -> Result<MicroDag, DagError> {
        let illegal = |reason: &str| ShapeError::IllegalSubstitution {
            var: id,
            reason: reason.to_string(),
        };
        let sub_shape = |s: &Shape| -> Result<Shape, DagError> {
            let out = s.substitute(id, expr)?;
            if !out.is_integral() {
                return Err(illegal(&format!("{out} is not a whole number")).into());
            }
            Ok(out)
        };
        let mut next = self.clone();
        for s in &mut next.nodes {
            *s = sub_shape(s)?;
        }
        for e in &mut next.edges {
            e.inst.kind = e.inst.kind.substitute(id, expr)?;
            for s in &mut e.inst.inputs {
                *s = sub_shape(s)?;
            }
            e.inst.output = sub_shape(&e.inst.output)?;
            if let Some(r) = &mut e.ratio {
                let out = r.substitute_raw(id, expr)?;
                if !out.is_integral() {
                    return Err(illegal(&format!("broadcast ratio {out} is not a whole number")).into());
                }
                *r = out;
            }
        }
        Ok(next)
    }

    /// The redundancy rule `kind` applied to `inputs` would break, if any.
    pub fn prune_edge(&self, kind: &PrimitiveKind, inputs: &[NodeId], cfg: &PruneConfig) -> Option<PruneRule> {
        let producer = self.producer(inputs[0]).map(|e| &e.inst.kind);
        match (kind, producer) {
            (PrimitiveKind::ElementWise(f), Some(PrimitiveKind::ElementWise(g)))
                if f == g && cfg.has(PruneRule::ConsecutiveElementwise) =>
            {
                Some(PruneRule::ConsecutiveElementwise)
            }
            (PrimitiveKind::Fold { dim, .. }, Some(PrimitiveKind::Group { dim: g, .. }))
                if (*dim == *g || *dim == g + 1) && cfg.has(PruneRule::GroupUndoneByFold) =>
            {
                Some(PruneRule::GroupUndoneByFold)
            }
            (PrimitiveKind::Softmax { first, last }, Some(PrimitiveKind::Softmax { first: f, last: l }))
                if first == f && last == l && cfg.has(PruneRule::RepeatedSoftmax) =>
            {
                Some(PruneRule::RepeatedSoftmax)
            }
            (PrimitiveKind::Broadcast(crate::primitive::BlendOp::Sub), _)
                if self.values[inputs[0]] == self.values[inputs[1]] && cfg.has(PruneRule::SelfSubtraction) =>
            {
                Some(PruneRule::SelfSubtraction)
            }
            _ => None,
        }
    }

    /// Check every edge against the redundancy rules.
    pub fn prune_check(&self, cfg: &PruneConfig) -> Result<(), PruneRule> {
        for e in &self.edges {
            if let Some(rule) = self.prune_edge(&e.inst.kind, &e.inputs, cfg) {
                return Err(rule);
            }
        }
        Ok(())
    }

    /// Longest shortest path in the undirected view of the graph.
    pub fn diameter(&self) -> usize {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            for &i in &e.inputs {
                adj[i].push(e.output);
                adj[e.output].push(i);
            }
        }
        let mut best = 0;
        let mut dist = vec![usize::MAX; n];
        for s in 0..n {
            dist.iter_mut().for_each(|d| *d = usize::MAX);
            dist[s] = 0;
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                best = best.max(dist[u]);
                for &v in &adj[u] {
                    if dist[v] == usize::MAX {
                        dist[v] = dist[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
        }
        best
    }

    /// Weisfeiler-Lehman style digest, invariant under node relabeling and
    /// variable renaming.
    ///
    /// Initial node labels combine the shape (variables anonymized), the
    /// producing primitive and the in-degree. Each round folds in the
    /// ordered input labels and the sorted `(consumer, operand position)`
    /// labels; the number of rounds is the graph diameter.
    pub fn iso_hash(&self) -> u64 {
        let n = self.nodes.len();
        let mut labels: Vec<u64> = (0..n)
            .map(|i| {
                let producer = match self.producer(i) {
                    Some(e) => e.inst.kind.anonymous_mnemonic(),
                    None => "input".to_string(),
                };
                let indeg = self.producer(i).map_or(0, |e| e.inputs.len());
                let h = mix(SEED, fnv1a(&anonymize(&self.nodes[i].to_string())));
                mix(mix(h, fnv1a(&producer)), indeg as u64)
            })
            .collect();
        let mut consumers: Vec<Vec<(NodeId, usize)>> = vec![Vec::new(); n];
        for e in &self.edges {
            for (pos, &i) in e.inputs.iter().enumerate() {
                consumers[i].push((e.output, pos));
            }
        }
        for _ in 0..self.diameter() {
            let next: Vec<u64> = (0..n)
                .map(|i| {
                    let mut h = labels[i];
                    if let Some(e) = self.producer(i) {
                        for &j in &e.inputs {
                            h = mix(h, labels[j]);
                        }
                    }
                    let mut outs: Vec<u64> = consumers[i]
                        .iter()
                        .map(|&(c, pos)| mix(labels[c], pos as u64))
                        .collect();
                    outs.sort_unstable();
                    h = mix(h, 0x5eed);
                    for o in outs {
                        h = mix(h, o);
                    }
                    h
                })
                .collect();
            labels = next;
        }
        labels.sort_unstable();
        let h = labels.into_iter().fold(mix(SEED, n as u64), mix);
        mix(h, self.edges.len() as u64)
    }
}

/// A finished kernel: one leaf shaped `<C | H, W>`, possibly with
/// unresolved dynamic variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelTemplate {
    dag: MicroDag,
    output: NodeId,
    free_vars: Vec<VarId>,
}

impl KernelTemplate {
    /// Succeeds iff the dag has width 1 and its last node is `<C | H, W>`.
    pub fn finalize(dag: MicroDag) -> Result<KernelTemplate, DagError> {
        if dag.is_empty() {
            return Err(DagError::Empty);
        }
        let output = dag.len() - 1;
        let width = dag.width();
        if width != 1 || dag.nodes[output] != Shape::input() {
            return Err(DagError::NotFinal {
                width,
                shape: dag.nodes[output].to_string(),
            });
        }
        let free_vars = dag.vars();
        Ok(KernelTemplate {
            dag,
            output,
            free_vars,
        })
    }

    pub fn dag(&self) -> &MicroDag {
        &self.dag
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn free_vars(&self) -> &[VarId] {
        &self.free_vars
    }

    pub fn iso_hash(&self) -> u64 {
        self.dag.iso_hash()
    }

    pub fn substitute(&self, id: VarId, expr: &Dimension) -> Result<KernelTemplate, DagError> {
        KernelTemplate::finalize(self.dag.substitute(id, expr)?)
    }

    /// Whether any primitive holds weights.
    pub fn has_weights(&self) -> bool {
        self.dag.edges.iter().any(|e| e.inst.kind.has_weights())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(s: &str) -> PrimitiveKind {
        s.parse().unwrap()
    }

    #[test]
    fn grow_appends_one_node() {
        let g = MicroDag::new();
        let inst = PrimitiveInstance::new(k("group(G)"), vec![Shape::input()]).unwrap();
        let g2 = g.grow(inst, &[0]).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g2.len(), 2);
        assert_eq!(g2.width(), 1);
    }

    #[test]
    fn grow_rejects_wrong_input_shape() {
        let g = MicroDag::new();
        let inst = PrimitiveInstance::new(k("ew(relu)"), vec!["[C, KH | H, W]".parse().unwrap()]).unwrap();
        assert!(matches!(g.grow(inst, &[0]), Err(DagError::ShapeMismatch { .. })));
    }

    #[test]
    fn width_counts_leaves() {
        let mut g = MicroDag::new();
        assert_eq!(g.width(), 1);
        g.push(k("ew(relu)"), &[0]).unwrap();
        g.push(k("ew(abs)"), &[0]).unwrap();
        assert_eq!(g.width(), 2);
        g.push(k("bcast(add)"), &[1, 2]).unwrap();
        assert_eq!(g.width(), 1);
    }

    #[test]
    fn pruning() {
        let cfg = PruneConfig::default();
        let mut g = MicroDag::new();
        g.push(k("ew(relu)"), &[0]).unwrap();
        assert_eq!(g.prune_edge(&k("ew(relu)"), &[1], &cfg), Some(PruneRule::ConsecutiveElementwise));
        assert_eq!(g.prune_edge(&k("ew(abs)"), &[1], &cfg), None);
        assert_eq!(g.prune_edge(&k("bcast(sub)"), &[1, 1], &cfg), Some(PruneRule::SelfSubtraction));
        g.push(k("ew(relu)"), &[0]).unwrap();
        // Two relus of the same node compute the same tensor.
        assert_eq!(g.prune_edge(&k("bcast(sub)"), &[1, 2], &cfg), Some(PruneRule::SelfSubtraction));
        assert_eq!(g.prune_edge(&k("bcast(add)"), &[1, 2], &cfg), None);
        assert_eq!(
            g.prune_edge(&k("ew(relu)"), &[1], &PruneConfig::none()),
            None
        );
    }

    #[test]
    fn fc_outputs_never_share_values() {
        let mut g = MicroDag::new();
        g.push(k("fc(C)"), &[0]).unwrap();
        g.push(k("fc(C)"), &[0]).unwrap();
        assert_ne!(g.value(1), g.value(2));
        assert_eq!(g.prune_edge(&k("bcast(sub)"), &[1, 2], &PruneConfig::default()), None);
    }

    #[test]
    fn finalize_requires_single_output() {
        let mut g = MicroDag::new();
        g.push(k("unfold(h)"), &[0]).unwrap();
        assert!(KernelTemplate::finalize(g.clone()).is_err());
        g.push(k("fc(C)"), &[1]).unwrap();
        let t = KernelTemplate::finalize(g).unwrap();
        assert_eq!(t.output(), 2);
        assert!(t.free_vars().is_empty());
    }

    #[test]
    fn hash_ignores_insertion_order() {
        let mut a = MicroDag::new();
        a.push(k("ew(relu)"), &[0]).unwrap();
        a.push(k("shift(h,+1)"), &[0]).unwrap();
        a.push(k("bcast(add)"), &[1, 2]).unwrap();
        let mut b = MicroDag::new();
        b.push(k("shift(h,+1)"), &[0]).unwrap();
        b.push(k("ew(relu)"), &[0]).unwrap();
        b.push(k("bcast(add)"), &[2, 1]).unwrap();
        assert_eq!(a.iso_hash(), b.iso_hash());
        let mut c = MicroDag::new();
        c.push(k("shift(h,+1)"), &[0]).unwrap();
        c.push(k("ew(relu)"), &[0]).unwrap();
        c.push(k("bcast(add)"), &[1, 2]).unwrap();
        assert_ne!(a.iso_hash(), c.iso_hash());
    }

    #[test]
    fn substitution_propagates() {
        let mut g = MicroDag::new();
        g.push(k("fc(x1)"), &[0]).unwrap();
        g.push(k("group(G)"), &[1]).unwrap();
        assert_eq!(g.fresh_var(), VarId(2));
        let s = g.substitute(VarId(1), &"G*KH".parse().unwrap()).unwrap();
        assert_eq!(s.node(2).unwrap(), &"[G, KH | H, W]".parse::<Shape>().unwrap());
        assert_eq!(s.edges()[0].inst.kind, k("fc(G*KH)"));
        assert!(!g.substitution_is_valid(VarId(1), &"KH".parse().unwrap()));
        assert!(g.substitute(VarId(1), &"KH".parse().unwrap()).is_err());
        // Absent variable: identity.
        assert_eq!(g.substitute(VarId(7), &"KW".parse().unwrap()).unwrap(), g);
    }
}
