//! Kernel emission for workers: the textual IR, or a standalone PyTorch
//! module whose forward pass mirrors the interpreter.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::interp::{fc_sizes, InterpError};
use crate::ir::emit_concrete;
use crate::matching::match_broadcast;
use crate::primitive::{Axis, BlendOp, ElementFn, FoldMode, PrimitiveKind};
use crate::shape::Shape;
use crate::solver::{ConcreteKernel, ReplicationMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Ir,
    ModuleSource,
}

impl FromStr for EmitFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ir" => Ok(EmitFormat::Ir),
            "module-source" => Ok(EmitFormat::ModuleSource),
            _ => Err(format!("unknown emit format `{s}` (expected `ir` or `module-source`)")),
        }
    }
}

impl fmt::Display for EmitFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmitFormat::Ir => "ir",
            EmitFormat::ModuleSource => "module-source",
        })
    }
}

pub fn emit(k: &ConcreteKernel, format: EmitFormat) -> Result<String, InterpError> {
    match format {
        EmitFormat::Ir => Ok(emit_concrete(k)),
        EmitFormat::ModuleSource => module_source(k),
    }
}

const PRELUDE: &str = r#"import math

import torch
import torch.nn as nn


def _shift(x, dim, off):
    # out[i] = x[i + off], zero outside
    if off == 0:
        return x
    n = x.shape[dim]
    if abs(off) >= n:
        return torch.zeros_like(x)
    pad = list(x.shape)
    pad[dim] = abs(off)
    z = x.new_zeros(pad)
    if off > 0:
        return torch.cat([x.narrow(dim, off, n - off), z], dim)
    return torch.cat([z, x.narrow(dim, 0, n + off)], dim)


def _unfold(x, dim, at, k):
    return torch.stack([_shift(x, dim, i - k // 2) for i in range(k)], dim=at)


def _softmax(x, first, last):
    return x.flatten(first, last).softmax(first).reshape(x.shape)
"#;

fn dims_tuple(d: &[usize]) -> String {
    d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

fn blend_expr(op: BlendOp, l: &str, r: &str) -> String {
    match op {
        BlendOp::Add => format!("{l} + {r}"),
        BlendOp::Sub => format!("{l} - {r}"),
        BlendOp::Mul => format!("{l} * {r}"),
        BlendOp::Min => format!("torch.minimum({l}, {r})"),
        BlendOp::Max => format!("torch.maximum({l}, {r})"),
    }
}

fn ew_expr(f: ElementFn, x: &str) -> String {
    match f {
        ElementFn::Neg => format!("-{x}"),
        f => format!("torch.{}({x})", f.name()),
    }
}

fn axis_index(s: &Shape, axis: Axis) -> Result<usize, InterpError> {
    axis.position(s)
        .map(|p| s.channel.len() + p)
        .ok_or_else(|| InterpError::Unsupported(format!("axis {axis:?} absent from {s}")))
}

/// PyTorch source for `k`. Tensors carry a leading batch dimension; every
/// fully-connected layer is followed by a non-affine batch norm so the
/// parameter count equals the kernel's.
pub fn module_source(k: &ConcreteKernel) -> Result<String, InterpError> {
    let dag = k.template.dag();
    let a = &k.assignment;
    let mut src = String::from(PRELUDE);
    let _ = write!(src, "\n\nclass KernelCopy(nn.Module):\n    def __init__(self):\n        super().__init__()\n");
    let sizes = fc_sizes(k)?;
    if sizes.is_empty() {
        src.push_str("        # pure rearrangement: no parameters\n");
    }
    for (node, o, i) in &sizes {
        let _ = writeln!(src, "        self.w{node} = nn.Parameter(torch.empty({o}, {i}))");
        let _ = writeln!(src, "        nn.init.kaiming_uniform_(self.w{node}, a=math.sqrt(5))");
        let _ = writeln!(src, "        self.bn{node} = nn.BatchNorm1d({o}, affine=False)");
    }
    src.push_str("\n    def forward(self, v0):\n        b = v0.shape[0]\n");
    for e in dag.edges() {
        let x = format!("v{}", e.inputs[0]);
        let n = e.output;
        let out_dims = e.inst.output.eval(a)?;
        let line = match e.inst.kind {
            PrimitiveKind::Group { .. } => format!("{x}.reshape(b, {})", dims_tuple(&out_dims)),
            PrimitiveKind::Shift { axis, offset } => {
                format!("_shift({x}, {}, {offset})", axis_index(&e.inst.inputs[0], axis)? + 1)
            }
            PrimitiveKind::Unfold { axis, insert_pos } => format!(
                "_unfold({x}, {}, {}, {})",
                axis_index(&e.inst.inputs[0], axis)? + 1,
                insert_pos + 1,
                out_dims[insert_pos]
            ),
            PrimitiveKind::FullyConnected { .. } => {
                let in_dims = e.inst.inputs[0].eval(a)?;
                let channels = e.inst.inputs[0].channel.len();
                let cin: usize = in_dims[..channels].iter().product();
                let o = out_dims[0];
                let _ = writeln!(
                    src,
                    "        v{n} = torch.einsum('oc,bcs->bos', self.w{n}, {x}.reshape(b, {cin}, -1))"
                );
                format!("self.bn{n}(v{n}.reshape(b, {o}, -1)).reshape(b, {})", dims_tuple(&out_dims))
            }
            PrimitiveKind::ElementWise(f) => ew_expr(f, &x),
            PrimitiveKind::Fold { dim, mode } => match mode {
                FoldMode::Avg => format!("{x}.mean({})", dim + 1),
                FoldMode::Max => format!("{x}.amax({})", dim + 1),
            },
            PrimitiveKind::Softmax { first, last } => format!("_softmax({x}, {}, {})", first + 1, last + 1),
            PrimitiveKind::Broadcast(op) => {
                let lhs_dims = e.inst.inputs[0].eval(a)?;
                let rhs_dims = e.inst.inputs[1].eval(a)?;
                let m = match_broadcast(&e.inst.inputs[0], &e.inst.inputs[1])
                    .ok_or_else(|| InterpError::Unsupported(format!("no broadcast matching at n{n}")))?;
                let (p, s) = (m.prefix.len(), m.suffix.len());
                let pre: usize = lhs_dims[..p].iter().product();
                let suf: usize = lhs_dims[lhs_dims.len() - s..].iter().product();
                let lc: usize = lhs_dims[p..lhs_dims.len() - s].iter().product();
                let rc: usize = rhs_dims[p..rhs_dims.len() - s].iter().product();
                let l = format!("{x}.reshape(b, {pre}, 1, {lc}, {suf})");
                let r = format!("v{}.reshape(b, {pre}, {}, {lc}, {suf})", e.inputs[1], rc / lc.max(1));
                format!("({}).reshape(b, {})", blend_expr(op, &l, &r), dims_tuple(&out_dims))
            }
        };
        let _ = writeln!(src, "        v{n} = {line}");
    }
    let _ = writeln!(src, "        return v{}", k.template.output());

    let copies = k.replication.copies;
    let _ = write!(
        src,
        "\n\nclass Kernel(nn.Module):\n    def __init__(self):\n        super().__init__()\n        self.copies = nn.ModuleList([KernelCopy() for _ in range({copies})])\n\n    def forward(self, x):\n"
    );
    match k.replication.mode {
        ReplicationMode::Concat => src.push_str("        return torch.cat([m(x) for m in self.copies], dim=1)\n"),
        ReplicationMode::Sum => src.push_str(
            "        parts = torch.chunk(x, len(self.copies), dim=1)\n        return sum(m(p) for m, p in zip(self.copies, parts))\n",
        ),
    }
    Ok(src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse;

    const K: &str = "canvas-ir v1
e: unfold(h) (n0) -> n1
e: fc(C) (n1) -> n2
e: shift(w,+1) (n0) -> n3
e: bcast(add) (n3, n2) -> n4
assign: C=4,H=6,W=6,KH=3,KW=3,G=1
";

    #[test]
    fn formats() {
        let k = parse(K).unwrap().to_concrete().unwrap();
        let ir = emit(&k, EmitFormat::Ir).unwrap();
        assert_eq!(parse(&ir).unwrap().to_concrete().unwrap(), k);
        let py = emit(&k, EmitFormat::ModuleSource).unwrap();
        assert!(py.contains("nn.Parameter(torch.empty(4, 12))"));
        assert!(py.contains("BatchNorm1d(4, affine=False)"));
        assert!(py.contains("_unfold(v0, 2, 2, 3)"));
        assert!(py.contains("return v4"));
        assert_eq!("module-source".parse::<EmitFormat>().unwrap(), EmitFormat::ModuleSource);
    }

    #[test]
    fn rearrangement_has_no_parameters() {
        let k = parse("canvas-ir v1\ne: shift(h,-1) (n0) -> n1\nassign: C=2,H=3,W=3,KH=3,KW=3,G=1\n")
            .unwrap()
            .to_concrete()
            .unwrap();
        let py = module_source(&k).unwrap();
        assert!(!py.contains("nn.Parameter("));
        assert!(py.contains("no parameters"));
    }
}
