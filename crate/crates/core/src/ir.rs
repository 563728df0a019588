//! Textual kernel IR.
//!
//! ```text
//! canvas-ir v1
//! n0: shape=[C | H, W]
//! n1: shape=[C, KH | H, W]
//! n2: shape=[C | H, W]
//! e: unfold(h,at=1) (n0) -> n1
//! e: fc(C) (n1) -> n2
//! vars:
//! ```
//!
//! Concrete kernels append `target:`, `assign:` and `replicate:` lines, and a
//! solved kernel may carry a `solution:` line holding a JSON record. Lines
//! starting with `#` and trailing `# ...` comments are ignored.

use std::fmt::Write as _;

use crate::dag::{DagError, KernelTemplate, MicroDag};
use crate::matching::match_broadcast;
use crate::primitive::PrimitiveKind;
use crate::shape::{Assignment, Shape, VarId};
use crate::solver::{ConcreteKernel, Replication, Solution};

pub const HEADER: &str = "canvas-ir v1";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IrError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("missing `{0}` header")]
    MissingHeader(&'static str),
    #[error(transparent)]
    Dag(#[from] DagError),
}

/// A parsed IR file.
#[derive(Debug, Clone, PartialEq)]
pub struct IrDocument {
    pub template: KernelTemplate,
    pub target: Option<String>,
    pub assignment: Option<Assignment>,
    pub replication: Option<Replication>,
    pub solution: Option<Solution>,
}

impl IrDocument {
    pub fn template(template: KernelTemplate) -> IrDocument {
        IrDocument {
            template,
            target: None,
            assignment: None,
            replication: None,
            solution: None,
        }
    }

    pub fn concrete(k: &ConcreteKernel) -> IrDocument {
        IrDocument {
            template: k.template.clone(),
            target: (!k.target.is_empty()).then(|| k.target.clone()),
            assignment: Some(k.assignment.clone()),
            replication: Some(k.replication),
            solution: None,
        }
    }

    /// The concrete kernel, if the document carries an assignment.
    pub fn to_concrete(&self) -> Option<ConcreteKernel> {
        Some(ConcreteKernel {
            template: self.template.clone(),
            target: self.target.clone().unwrap_or_default(),
            assignment: self.assignment.clone()?,
            replication: self.replication.unwrap_or_else(Replication::identity),
        })
    }

    pub fn emit(&self) -> String {
        let mut out = emit_template(&self.template);
        if let Some(t) = &self.target {
            let _ = writeln!(out, "target: {t}");
        }
        if let Some(a) = &self.assignment {
            let _ = writeln!(out, "assign: {a}");
        }
        if let Some(r) = &self.replication {
            let _ = writeln!(out, "replicate: {r}");
        }
        if let Some(s) = &self.solution {
            let json = serde_json::to_string(s).expect("solution serializes");
            let _ = writeln!(out, "solution: {json}");
        }
        out
    }
}

/// Canonical text of a template.
pub fn emit_template(t: &KernelTemplate) -> String {
    let dag = t.dag();
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER}");
    for (i, s) in dag.nodes().iter().enumerate() {
        let _ = writeln!(out, "n{i}: shape={s}");
    }
    for e in dag.edges() {
        let ins: Vec<String> = e.inputs.iter().map(|i| format!("n{i}")).collect();
        let _ = write!(out, "e: {} ({}) -> n{}", e.inst.kind, ins.join(", "), e.output);
        if let PrimitiveKind::Broadcast(_) = e.inst.kind {
            if let Some(m) = match_broadcast(&e.inst.inputs[0], &e.inst.inputs[1]) {
                let _ = write!(out, "  # {}", m.describe());
            }
        }
        out.push('\n');
    }
    let vars: Vec<String> = t.free_vars().iter().map(|v| v.to_string()).collect();
    if vars.is_empty() {
        out.push_str("vars:\n");
    } else {
        let _ = writeln!(out, "vars: {}", vars.join(","));
    }
    out
}

pub fn emit_concrete(k: &ConcreteKernel) -> String {
    IrDocument::concrete(k).emit()
}

fn node_id(s: &str, line: usize) -> Result<usize, IrError> {
    s.trim()
        .strip_prefix('n')
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| IrError::Syntax {
            line,
            msg: format!("bad node id `{s}`"),
        })
}

/// Parse an IR file, rebuilding and re-validating the dag.
pub fn parse(text: &str) -> Result<IrDocument, IrError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, l)) if l == HEADER => {}
        _ => return Err(IrError::MissingHeader(HEADER)),
    }
    let mut declared: Vec<(usize, Shape)> = Vec::new();
    let mut edges: Vec<(usize, PrimitiveKind, Vec<usize>, usize)> = Vec::new();
    let mut vars: Option<(usize, Vec<VarId>)> = None;
    let mut doc_target = None;
    let mut assignment = None;
    let mut replication = None;
    let mut solution = None;

    for (ln, raw) in lines {
        let syntax = |msg: String| IrError::Syntax { line: ln, msg };
        if let Some(rest) = raw.strip_prefix("solution:") {
            solution = Some(serde_json::from_str(rest.trim()).map_err(|e| syntax(e.to_string()))?);
            continue;
        }
        let l = match raw.find('#') {
            Some(p) => raw[..p].trim(),
            None => raw,
        };
        if let Some(rest) = l.strip_prefix("e:") {
            let rest = rest.trim();
            let (kind, rest) = rest
                .split_once(' ')
                .ok_or_else(|| syntax("edge needs a primitive and operands".into()))?;
            let kind: PrimitiveKind = kind.parse().map_err(|e: crate::primitive::PrimitiveError| syntax(e.to_string()))?;
            let (ins, out) = rest
                .split_once("->")
                .ok_or_else(|| syntax("edge needs `->`".into()))?;
            let ins = ins
                .trim()
                .strip_prefix('(')
                .and_then(|s| s.strip_suffix(')'))
                .ok_or_else(|| syntax("operands must be parenthesized".into()))?;
            let ins = ins
                .split(',')
                .map(|s| node_id(s, ln))
                .collect::<Result<Vec<_>, _>>()?;
            edges.push((ln, kind, ins, node_id(out, ln)?));
        } else if let Some(rest) = l.strip_prefix("vars:") {
            let vs = rest
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.strip_prefix('x')
                        .and_then(|n| n.parse().ok())
                        .map(VarId)
                        .ok_or_else(|| syntax(format!("bad variable `{s}`")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            vars = Some((ln, vs));
        } else if let Some(rest) = l.strip_prefix("target:") {
            doc_target = Some(rest.trim().to_string());
        } else if let Some(rest) = l.strip_prefix("assign:") {
            assignment = Some(rest.trim().parse::<Assignment>().map_err(|e| syntax(e.to_string()))?);
        } else if let Some(rest) = l.strip_prefix("replicate:") {
            replication = Some(rest.trim().parse::<Replication>().map_err(syntax)?);
        } else if let Some((id, rest)) = l.split_once(':') {
            let id = node_id(id, ln)?;
            let shape = rest
                .trim()
                .strip_prefix("shape=")
                .ok_or_else(|| syntax("node needs `shape=`".into()))?;
            let shape: Shape = shape.parse().map_err(|e: crate::shape::ShapeError| syntax(e.to_string()))?;
            declared.push((id, shape));
        } else {
            return Err(syntax(format!("unrecognized line `{l}`")));
        }
    }

    let mut dag = MicroDag::new();
    for (ln, kind, ins, out) in edges {
        if out != dag.len() {
            return Err(IrError::Syntax {
                line: ln,
                msg: format!("edge must produce n{}, not n{out}", dag.len()),
            });
        }
        dag.push(kind, &ins).map_err(|e| IrError::Syntax {
            line: ln,
            msg: e.to_string(),
        })?;
    }
    for (i, shape) in &declared {
        let actual = dag.node(*i).ok_or(DagError::UnknownNode(*i))?;
        if actual != shape {
            return Err(DagError::ShapeMismatch {
                node: *i,
                expected: actual.to_string(),
                found: shape.to_string(),
            }
            .into());
        }
    }
    let template = KernelTemplate::finalize(dag)?;
    if let Some((ln, vs)) = vars {
        if vs != template.free_vars() {
            return Err(IrError::Syntax {
                line: ln,
                msg: "`vars:` does not list the template's free variables".into(),
            });
        }
    }
    Ok(IrDocument {
        template,
        target: doc_target,
        assignment,
        replication,
        solution,
    })
}

/// Parse a template, ignoring any concrete annotations.
pub fn parse_template(text: &str) -> Result<KernelTemplate, IrError> {
    Ok(parse(text)?.template)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::Constant;

    const SHIFT_ADD: &str = "canvas-ir v1
n0: shape=[C | H, W]
n1: shape=[C, KH | H, W]
n2: shape=[C | H, W]
n3: shape=[C | H, W]
n4: shape=[C | H, W]
e: unfold(h) (n0) -> n1
e: fc(C) (n1) -> n2
e: shift(w,+1) (n0) -> n3
e: bcast(add) (n3, n2) -> n4
vars:
";

    #[test]
    fn round_trip() {
        let t = parse_template(SHIFT_ADD).unwrap();
        let text = emit_template(&t);
        assert!(text.contains("e: unfold(h,at=1) (n0) -> n1"));
        assert!(text.contains("# match prefix=[C, H, W]"));
        assert_eq!(parse_template(&text).unwrap(), t);
        assert_eq!(emit_template(&parse_template(&text).unwrap()), text);
    }

    #[test]
    fn concrete_round_trip() {
        let t = parse_template(SHIFT_ADD).unwrap();
        let a = Assignment::new()
            .with(Constant::C, 4)
            .with(Constant::H, 6)
            .with(Constant::W, 6)
            .with(Constant::KH, 3)
            .with(Constant::KW, 3)
            .with(Constant::G, 1);
        let mut k = ConcreteKernel::new(t, a);
        k.target = "layer1".into();
        let text = emit_concrete(&k);
        assert_eq!(parse(&text).unwrap().to_concrete().unwrap(), k);
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = SHIFT_ADD.replace("n1: shape=[C, KH | H, W]", "n1: shape=[C, KW | H, W]");
        assert!(matches!(parse(&bad), Err(IrError::Dag(DagError::ShapeMismatch { .. }))));
        assert!(matches!(parse("n0: shape=[C | H, W]"), Err(IrError::MissingHeader(_))));
        let unfinished = "canvas-ir v1\ne: unfold(h) (n0) -> n1\n";
        assert!(matches!(parse(unfinished), Err(IrError::Dag(DagError::NotFinal { .. }))));
        let wrong_vars = SHIFT_ADD.replace("vars:", "vars: x1");
        assert!(parse(&wrong_vars).is_err());
    }
}
