//! The fine-grained primitive library.
//!
//! Primitives fall into three classes: rearrangements (group, shift,
//! unfold) that only move data, arithmetic primitives (fully-connected,
//! element-wise, fold, softmax) that compute, and the single blending
//! primitive (broadcast) that merges two branches.

use std::fmt;
use std::str::FromStr;

use crate::matching::{match_broadcast, BroadcastMatch};
use crate::shape::{validate_theorem1, Assignment, Constant, Dimension, Shape, ShapeError, VarId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PrimitiveError {
    #[error("primitive `{kind}` is not applicable to {shape}: {reason}")]
    NotApplicable {
        kind: String,
        shape: String,
        reason: String,
    },
    #[error("primitive `{kind}` takes {expected} input(s), got {got}")]
    Arity {
        kind: String,
        expected: usize,
        got: usize,
    },
    #[error("cannot parse primitive `{0}`")]
    Parse(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// A spatial axis. Spatial dimensions are always exactly `H` or `W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    H,
    W,
}

impl Axis {
    pub const ALL: [Axis; 2] = [Axis::H, Axis::W];

    pub fn extent(self) -> Constant {
        match self {
            Axis::H => Constant::H,
            Axis::W => Constant::W,
        }
    }

    pub fn window(self) -> Constant {
        match self {
            Axis::H => Constant::KH,
            Axis::W => Constant::KW,
        }
    }

    /// Position of this axis within `s.spatial`.
    pub fn position(self, s: &Shape) -> Option<usize> {
        let target = Dimension::constant(self.extent());
        s.spatial.iter().position(|d| *d == target)
    }

    fn name(self) -> &'static str {
        match self {
            Axis::H => "h",
            Axis::W => "w",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupFactor {
    /// Split `X` into `(G, X/G)`.
    G,
    /// Split `X` into `(X, 1)`: every channel is its own group.
    Each,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElementFn {
    Relu,
    Abs,
    Sin,
    Exp,
    Neg,
}

impl ElementFn {
    pub const ALL: [ElementFn; 5] = [
        ElementFn::Relu,
        ElementFn::Abs,
        ElementFn::Sin,
        ElementFn::Exp,
        ElementFn::Neg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ElementFn::Relu => "relu",
            ElementFn::Abs => "abs",
            ElementFn::Sin => "sin",
            ElementFn::Exp => "exp",
            ElementFn::Neg => "neg",
        }
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            ElementFn::Relu => v.max(0.0),
            ElementFn::Abs => v.abs(),
            ElementFn::Sin => v.sin(),
            ElementFn::Exp => v.exp(),
            ElementFn::Neg => -v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FoldMode {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlendOp {
    Add,
    Sub,
    Mul,
    Min,
    Max,
}

impl BlendOp {
    pub const ALL: [BlendOp; 5] = [BlendOp::Add, BlendOp::Sub, BlendOp::Mul, BlendOp::Min, BlendOp::Max];

    pub fn name(self) -> &'static str {
        match self {
            BlendOp::Add => "add",
            BlendOp::Sub => "sub",
            BlendOp::Mul => "mul",
            BlendOp::Min => "min",
            BlendOp::Max => "max",
        }
    }

    /// `lhs (op) rhs`.
    pub fn apply(self, lhs: f64, rhs: f64) -> f64 {
        match self {
            BlendOp::Add => lhs + rhs,
            BlendOp::Sub => lhs - rhs,
            BlendOp::Mul => lhs * rhs,
            BlendOp::Min => lhs.min(rhs),
            BlendOp::Max => lhs.max(rhs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrimitiveKind {
    Group { dim: usize, factor: GroupFactor },
    Shift { axis: Axis, offset: i8 },
    Unfold { axis: Axis, insert_pos: usize },
    FullyConnected { out: Dimension },
    ElementWise(ElementFn),
    Fold { dim: usize, mode: FoldMode },
    /// Softmax over the inclusive channel range `first..=last`.
    Softmax { first: usize, last: usize },
    Broadcast(BlendOp),
}

/// Sampling classes; the sampler balances probability mass per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrimitiveClass {
    Group,
    Shift,
    Unfold,
    FullyConnected,
    ElementWise,
    Fold,
    Softmax,
    Broadcast,
}

impl PrimitiveClass {
    pub const ALL: [PrimitiveClass; 8] = [
        PrimitiveClass::Group,
        PrimitiveClass::Shift,
        PrimitiveClass::Unfold,
        PrimitiveClass::FullyConnected,
        PrimitiveClass::ElementWise,
        PrimitiveClass::Fold,
        PrimitiveClass::Softmax,
        PrimitiveClass::Broadcast,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveClass::Group => "group",
            PrimitiveClass::Shift => "shift",
            PrimitiveClass::Unfold => "unfold",
            PrimitiveClass::FullyConnected => "fc",
            PrimitiveClass::ElementWise => "ew",
            PrimitiveClass::Fold => "fold",
            PrimitiveClass::Softmax => "softmax",
            PrimitiveClass::Broadcast => "bcast",
        }
    }

    pub fn from_name(s: &str) -> Option<PrimitiveClass> {
        PrimitiveClass::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl PrimitiveKind {
    pub fn class(&self) -> PrimitiveClass {
        match self {
            PrimitiveKind::Group { .. } => PrimitiveClass::Group,
            PrimitiveKind::Shift { .. } => PrimitiveClass::Shift,
            PrimitiveKind::Unfold { .. } => PrimitiveClass::Unfold,
            PrimitiveKind::FullyConnected { .. } => PrimitiveClass::FullyConnected,
            PrimitiveKind::ElementWise(_) => PrimitiveClass::ElementWise,
            PrimitiveKind::Fold { .. } => PrimitiveClass::Fold,
            PrimitiveKind::Softmax { .. } => PrimitiveClass::Softmax,
            PrimitiveKind::Broadcast(_) => PrimitiveClass::Broadcast,
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            PrimitiveKind::Broadcast(_) => 2,
            _ => 1,
        }
    }

    pub fn is_rearrangement(&self) -> bool {
        matches!(
            self,
            PrimitiveKind::Group { .. } | PrimitiveKind::Shift { .. } | PrimitiveKind::Unfold { .. }
        )
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, PrimitiveKind::FullyConnected { .. })
    }

    pub fn substitute(&self, id: VarId, expr: &Dimension) -> Result<PrimitiveKind, ShapeError> {
        Ok(match self {
            PrimitiveKind::FullyConnected { out } => PrimitiveKind::FullyConnected {
                out: out.substitute(id, expr)?,
            },
            other => *other,
        })
    }

    /// Mnemonic with every variable name replaced by `x`.
    pub fn anonymous_mnemonic(&self) -> String {
        match self {
            PrimitiveKind::FullyConnected { out } => {
                format!("fc({})", anonymize(&out.to_string()))
            }
            other => other.to_string(),
        }
    }
}

/// Replace `x<digits>` tokens by a bare `x`.
pub(crate) fn anonymize(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        out.push(c);
        if c == 'x' {
            while chars.peek().is_some_and(|n| n.is_ascii_digit()) {
                chars.next();
            }
        }
    }
    out
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrimitiveKind::Group { dim, factor } => {
                let factor = match factor {
                    GroupFactor::G => "G",
                    GroupFactor::Each => "each",
                };
                if *dim == 0 {
                    write!(f, "group({factor})")
                } else {
                    write!(f, "group({factor},dim={dim})")
                }
            }
            PrimitiveKind::Shift { axis, offset } => {
                write!(f, "shift({},{:+})", axis.name(), offset)
            }
            PrimitiveKind::Unfold { axis, insert_pos } => {
                write!(f, "unfold({},at={insert_pos})", axis.name())
            }
            PrimitiveKind::FullyConnected { out } => write!(f, "fc({out})"),
            PrimitiveKind::ElementWise(func) => write!(f, "ew({})", func.name()),
            PrimitiveKind::Fold { dim, mode } => {
                let mode = match mode {
                    FoldMode::Avg => "avg",
                    FoldMode::Max => "max",
                };
                write!(f, "fold(dim={dim},{mode})")
            }
            PrimitiveKind::Softmax { first, last } => write!(f, "softmax({first}..{last})"),
            PrimitiveKind::Broadcast(op) => write!(f, "bcast({})", op.name()),
        }
    }
}

impl FromStr for PrimitiveKind {
    type Err = PrimitiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || PrimitiveError::Parse(s.to_string());
        let s = s.trim();
        let open = s.find('(').ok_or_else(err)?;
        let name = &s[..open];
        let args = s[open + 1..].strip_suffix(')').ok_or_else(err)?;
        let parts: Vec<&str> = args.split(',').map(str::trim).collect();
        let axis = |p: &str| match p {
            "h" => Ok(Axis::H),
            "w" => Ok(Axis::W),
            _ => Err(err()),
        };
        let keyed = |p: &str, key: &str| -> Result<usize, PrimitiveError> {
            p.strip_prefix(key)
                .and_then(|v| v.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(err)
        };
        Ok(match name {
            "group" => {
                let factor = match parts[0] {
                    "G" => GroupFactor::G,
                    "each" => GroupFactor::Each,
                    _ => return Err(err()),
                };
                let dim = match parts.get(1) {
                    Some(p) => keyed(p, "dim")?,
                    None => 0,
                };
                PrimitiveKind::Group { dim, factor }
            }
            "shift" => {
                if parts.len() != 2 {
                    return Err(err());
                }
                let offset: i8 = parts[1].parse().map_err(|_| err())?;
                if offset != 1 && offset != -1 {
                    return Err(err());
                }
                PrimitiveKind::Shift {
                    axis: axis(parts[0])?,
                    offset,
                }
            }
            "unfold" => {
                let insert_pos = match parts.get(1) {
                    Some(p) => keyed(p, "at")?,
                    None => usize::MAX,
                };
                PrimitiveKind::Unfold {
                    axis: axis(parts[0])?,
                    insert_pos,
                }
            }
            "fc" => PrimitiveKind::FullyConnected {
                out: args.parse().map_err(|_| err())?,
            },
            "ew" => PrimitiveKind::ElementWise(
                ElementFn::ALL
                    .into_iter()
                    .find(|f| f.name() == args)
                    .ok_or_else(err)?,
            ),
            "fold" => {
                if parts.len() != 2 {
                    return Err(err());
                }
                let mode = match parts[1] {
                    "avg" => FoldMode::Avg,
                    "max" => FoldMode::Max,
                    _ => return Err(err()),
                };
                PrimitiveKind::Fold {
                    dim: keyed(parts[0], "dim")?,
                    mode,
                }
            }
            "softmax" => {
                let (a, b) = args.split_once("..").ok_or_else(err)?;
                let first = a.trim().parse().map_err(|_| err())?;
                let last = b.trim().parse().map_err(|_| err())?;
                if last < first {
                    return Err(err());
                }
                PrimitiveKind::Softmax { first, last }
            }
            "bcast" => PrimitiveKind::Broadcast(
                BlendOp::ALL
                    .into_iter()
                    .find(|o| o.name() == args)
                    .ok_or_else(err)?,
            ),
            _ => return Err(err()),
        })
    }
}

fn not_applicable(kind: &PrimitiveKind, shape: &Shape, reason: &str) -> PrimitiveError {
    PrimitiveError::NotApplicable {
        kind: kind.to_string(),
        shape: shape.to_string(),
        reason: reason.to_string(),
    }
}

/// Resolve the `usize::MAX` "append" sentinel of a parsed `unfold(h)`.
pub fn normalize_kind(kind: PrimitiveKind, input: &Shape) -> PrimitiveKind {
    match kind {
        PrimitiveKind::Unfold { axis, insert_pos } if insert_pos == usize::MAX => PrimitiveKind::Unfold {
            axis,
            insert_pos: input.channel.len(),
        },
        other => other,
    }
}

/// Output shape of `kind` applied to `inputs`.
pub fn output_shape(kind: &PrimitiveKind, inputs: &[&Shape]) -> Result<Shape, PrimitiveError> {
    if inputs.len() != kind.arity() {
        return Err(PrimitiveError::Arity {
            kind: kind.to_string(),
            expected: kind.arity(),
            got: inputs.len(),
        });
    }
    let s = inputs[0];
    let out = match *kind {
        PrimitiveKind::Group { dim, factor } => {
            let x = *s
                .channel
                .get(dim)
                .ok_or_else(|| not_applicable(kind, s, "group targets a channel dimension"))?;
            if x.is_one() {
                return Err(not_applicable(kind, s, "dimension of size 1"));
            }
            let (outer, inner) = match factor {
                GroupFactor::G => {
                    let g = Dimension::constant(Constant::G);
                    let inner = Dimension::divide(&x, &g)?;
                    if !inner.is_integral() {
                        return Err(not_applicable(kind, s, "not divisible by G"));
                    }
                    (g, inner)
                }
                GroupFactor::Each => (x, Dimension::one()),
            };
            let mut out = s.clone();
            out.channel[dim] = outer;
            out.channel.insert(dim + 1, inner);
            out
        }
        PrimitiveKind::Shift { axis, offset } => {
            if axis.position(s).is_none() {
                return Err(not_applicable(kind, s, "spatial axis absent"));
            }
            if offset != 1 && offset != -1 {
                return Err(not_applicable(kind, s, "offset must be +1 or -1"));
            }
            s.clone()
        }
        PrimitiveKind::Unfold { axis, insert_pos } => {
            if axis.position(s).is_none() {
                return Err(not_applicable(kind, s, "spatial axis absent"));
            }
            let pos = if insert_pos == usize::MAX {
                s.channel.len()
            } else {
                insert_pos
            };
            if pos > s.channel.len() {
                return Err(not_applicable(kind, s, "insert position out of range"));
            }
            let mut out = s.clone();
            out.channel.insert(pos, Dimension::constant(axis.window()));
            out
        }
        PrimitiveKind::FullyConnected { out } => {
            out.check_legal()?;
            if !out.is_integral() {
                return Err(not_applicable(kind, s, "output size is not a whole number"));
            }
            Shape::new(vec![out], s.spatial.clone())
        }
        PrimitiveKind::ElementWise(_) => s.clone(),
        PrimitiveKind::Fold { dim, .. } => {
            if dim >= s.rank() {
                return Err(not_applicable(kind, s, "fold dimension out of range"));
            }
            let mut out = s.clone();
            if dim < s.channel.len() {
                out.channel.remove(dim);
            } else {
                out.spatial.remove(dim - s.channel.len());
            }
            out
        }
        PrimitiveKind::Softmax { first, last } => {
            if first > last || last >= s.channel.len() {
                return Err(not_applicable(kind, s, "softmax spans channel dimensions only"));
            }
            s.clone()
        }
        PrimitiveKind::Broadcast(_) => {
            let rhs = inputs[1];
            let m = match_broadcast(s, rhs)
                .ok_or_else(|| not_applicable(kind, s, "no legal broadcast matching"))?;
            if m.needs_substitution() {
                return Err(not_applicable(
                    kind,
                    s,
                    "left-hand variable must be substituted first",
                ));
            }
            rhs.clone()
        }
    };
    if let Err(v) = validate_theorem1(&out) {
        return Err(not_applicable(
            kind,
            s,
            &v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "),
        ));
    }
    Ok(out)
}

/// Every single-input primitive applicable to `s`. `fresh` names the
/// variable a fully-connected primitive would introduce.
pub fn applicable_unary(s: &Shape, fresh: VarId) -> Vec<PrimitiveKind> {
    let mut out = Vec::new();
    let _ = for_each_unary(s, fresh, |k| {
        out.push(k);
        std::ops::ControlFlow::Continue(())
    });
    out
}

/// Visit the applicable unary primitives of `s` in a fixed order, class by
/// class, stopping early when `f` breaks.
pub fn for_each_unary(
    s: &Shape,
    fresh: VarId,
    mut f: impl FnMut(PrimitiveKind) -> std::ops::ControlFlow<()>,
) -> std::ops::ControlFlow<()> {
    for class in PrimitiveClass::ALL {
        for_each_unary_of_class(s, class, Dimension::var(fresh), &mut f)?;
    }
    std::ops::ControlFlow::Continue(())
}

/// Visit the applicable unary primitives of one class. `fc_out` is the
/// output dimension a fully-connected candidate would produce.
pub fn for_each_unary_of_class(
    s: &Shape,
    class: PrimitiveClass,
    fc_out: Dimension,
    f: &mut impl FnMut(PrimitiveKind) -> std::ops::ControlFlow<()>,
) -> std::ops::ControlFlow<()> {
    use std::ops::ControlFlow::Continue;
    match class {
        PrimitiveClass::Group => {
            let g = Dimension::constant(Constant::G);
            for (dim, x) in s.channel.iter().enumerate() {
                if x.is_one() {
                    continue;
                }
                if x.raw_div(&g).is_ok_and(|q| q.is_integral() && q.is_legal()) {
                    f(PrimitiveKind::Group {
                        dim,
                        factor: GroupFactor::G,
                    })?;
                }
                f(PrimitiveKind::Group {
                    dim,
                    factor: GroupFactor::Each,
                })?;
            }
        }
        PrimitiveClass::Shift => {
            for axis in Axis::ALL {
                if axis.position(s).is_some() {
                    f(PrimitiveKind::Shift { axis, offset: 1 })?;
                    f(PrimitiveKind::Shift { axis, offset: -1 })?;
                }
            }
        }
        PrimitiveClass::Unfold => {
            for axis in Axis::ALL {
                if axis.position(s).is_some() {
                    for insert_pos in 0..=s.channel.len() {
                        f(PrimitiveKind::Unfold { axis, insert_pos })?;
                    }
                }
            }
        }
        PrimitiveClass::FullyConnected => {
            f(PrimitiveKind::FullyConnected { out: fc_out })?;
        }
        PrimitiveClass::ElementWise => {
            for func in ElementFn::ALL {
                f(PrimitiveKind::ElementWise(func))?;
            }
        }
        PrimitiveClass::Fold => {
            for dim in 0..s.rank() {
                f(PrimitiveKind::Fold {
                    dim,
                    mode: FoldMode::Avg,
                })?;
                f(PrimitiveKind::Fold {
                    dim,
                    mode: FoldMode::Max,
                })?;
            }
        }
        PrimitiveClass::Softmax => {
            for first in 0..s.channel.len() {
                for last in first..s.channel.len() {
                    f(PrimitiveKind::Softmax { first, last })?;
                }
            }
        }
        PrimitiveClass::Broadcast => {}
    }
    Continue(())
}

/// Broadcast primitives that can blend `lhs` into `rhs`, each with the
/// matching that legitimizes it.
pub fn applicable_blends(lhs: &Shape, rhs: &Shape) -> Vec<(BlendOp, BroadcastMatch)> {
    match match_broadcast(lhs, rhs) {
        Some(m) => BlendOp::ALL.into_iter().map(|op| (op, m.clone())).collect(),
        None => Vec::new(),
    }
}

/// One edge of a micro-DAG: a primitive together with its input and output
/// shapes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PrimitiveInstance {
    pub kind: PrimitiveKind,
    pub inputs: Vec<Shape>,
    pub output: Shape,
}

impl PrimitiveInstance {
    pub fn new(kind: PrimitiveKind, inputs: Vec<Shape>) -> Result<PrimitiveInstance, PrimitiveError> {
        let kind = normalize_kind(kind, &inputs[0]);
        let refs: Vec<&Shape> = inputs.iter().collect();
        let output = output_shape(&kind, &refs)?;
        Ok(PrimitiveInstance {
            kind,
            inputs,
            output,
        })
    }

    /// Recompute the output from the inputs and compare.
    pub fn is_consistent(&self) -> bool {
        let refs: Vec<&Shape> = self.inputs.iter().collect();
        output_shape(&self.kind, &refs).is_ok_and(|o| o == self.output)
    }
}

/// Analytical cost of a primitive. One multiply-accumulate counts as one
/// FLOP.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct Cost {
    pub flops: u64,
    pub params: u64,
}

impl Cost {
    pub fn scaled(self, factor: u64) -> Cost {
        Cost {
            flops: self.flops.saturating_mul(factor),
            params: self.params.saturating_mul(factor),
        }
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, rhs: Cost) -> Cost {
        Cost {
            flops: self.flops.saturating_add(rhs.flops),
            params: self.params.saturating_add(rhs.params),
        }
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

/// FLOPs and parameters of `inst` under `a`.
///
/// Fully-connected: `params = out * in_channels`, `flops = params * spatial`.
/// Element-wise, fold and broadcast: one FLOP per output element; softmax
/// three. Group, shift and unfold are pure indexing and cost nothing.
pub fn cost(inst: &PrimitiveInstance, a: &Assignment) -> Result<Cost, ShapeError> {
    let overflow = || ShapeError::Overflow(inst.kind.to_string());
    let elements = || inst.output.num_elements(a);
    Ok(match inst.kind {
        PrimitiveKind::FullyConnected { out } => {
            let input = &inst.inputs[0];
            let in_ch = input.channel_product()?.eval(a)?;
            let spatial = input.spatial_product()?.eval(a)?;
            let params = out.eval(a)?.checked_mul(in_ch).ok_or_else(overflow)?;
            Cost {
                flops: params.checked_mul(spatial).ok_or_else(overflow)?,
                params,
            }
        }
        PrimitiveKind::ElementWise(_) | PrimitiveKind::Fold { .. } | PrimitiveKind::Broadcast(_) => Cost {
            flops: elements()?,
            params: 0,
        },
        PrimitiveKind::Softmax { .. } => Cost {
            flops: elements()?.checked_mul(3).ok_or_else(overflow)?,
            params: 0,
        },
        PrimitiveKind::Group { .. } | PrimitiveKind::Shift { .. } | PrimitiveKind::Unfold { .. } => {
            Cost::default()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(s: &str) -> Shape {
        s.parse().unwrap()
    }

    fn out(kind: &str, s: &str) -> Shape {
        output_shape(&kind.parse().unwrap(), &[&shape(s)]).unwrap()
    }

    #[test]
    fn table_shape_changes() {
        assert_eq!(out("group(G)", "[C | H, W]"), shape("[G, C/G | H, W]"));
        assert_eq!(out("group(each)", "[C | H, W]"), shape("[C, 1 | H, W]"));
        assert_eq!(out("unfold(h)", "[C | H, W]"), shape("[C, KH | H, W]"));
        assert_eq!(out("unfold(w,at=0)", "[C | H, W]"), shape("[KW, C | H, W]"));
        assert_eq!(out("fc(x1)", "[G, C/G | H, W]"), shape("[x1 | H, W]"));
        assert_eq!(out("fold(dim=1,avg)", "[C, KH | H, W]"), shape("[C | H, W]"));
        assert_eq!(out("fold(dim=2,max)", "[C, KH | H, W]"), shape("[C, KH | W]"));
        assert_eq!(out("shift(h,+1)", "[C | H, W]"), shape("[C | H, W]"));
        assert_eq!(out("softmax(0..1)", "[C, KH | H, W]"), shape("[C, KH | H, W]"));
    }

    #[test]
    fn group_requires_divisibility() {
        let k: PrimitiveKind = "group(G)".parse().unwrap();
        assert!(output_shape(&k, &[&shape("[KH | H, W]")]).is_err());
        assert!(output_shape(&k, &[&shape("[x1 | H, W]")]).is_ok());
        assert!(output_shape(&k, &[&shape("[C/G | H, W]")]).is_err());
    }

    #[test]
    fn applicability_on_input_shape() {
        let kinds = applicable_unary(&Shape::input(), VarId(1));
        let classes: std::collections::BTreeSet<_> = kinds.iter().map(|k| k.class()).collect();
        for c in [
            PrimitiveClass::Group,
            PrimitiveClass::Shift,
            PrimitiveClass::Unfold,
            PrimitiveClass::FullyConnected,
            PrimitiveClass::ElementWise,
            PrimitiveClass::Fold,
            PrimitiveClass::Softmax,
        ] {
            assert!(classes.contains(&c), "{c:?} missing");
        }
        for name in ["shift(h,+1)", "shift(w,-1)", "unfold(h,at=1)", "unfold(w,at=0)", "fc(x1)"] {
            assert!(kinds.contains(&name.parse().unwrap()), "{name} missing");
        }
        for k in &kinds {
            assert!(output_shape(k, &[&Shape::input()]).is_ok(), "{k} illegal");
        }
    }

    #[test]
    fn no_spatial_means_no_shift_or_unfold() {
        let kinds = applicable_unary(&shape("[C | ]"), VarId(1));
        assert!(kinds
            .iter()
            .all(|k| !matches!(k.class(), PrimitiveClass::Shift | PrimitiveClass::Unfold)));
    }

    #[test]
    fn fc_replaces_existing_variable() {
        let kinds = applicable_unary(&shape("[x1 | H, W]"), VarId(2));
        let fc: PrimitiveKind = "fc(x2)".parse().unwrap();
        assert!(kinds.contains(&fc));
        assert_eq!(out("fc(x2)", "[x1 | H, W]"), shape("[x2 | H, W]"));
    }

    #[test]
    fn blends() {
        let b = applicable_blends(&shape("[x1 | H, W]"), &shape("[C, KH | H, W]"));
        assert_eq!(b.len(), 5);
        assert!(b[0].1.substitutions.contains(&"C*KH/G".parse().unwrap()));
        let same = applicable_blends(&Shape::input(), &Shape::input());
        assert!(same.iter().all(|(_, m)| m.ratio.is_one()));
        assert!(applicable_blends(&shape("[C | H, W]"), &shape("[C | H]")).is_empty());
    }

    #[test]
    fn mnemonic_round_trip() {
        for m in [
            "group(G)",
            "group(each,dim=2)",
            "shift(h,+1)",
            "shift(w,-1)",
            "unfold(h,at=1)",
            "fc(x1)",
            "fc(x2*KW)",
            "fc(C)",
            "ew(relu)",
            "fold(dim=2,avg)",
            "softmax(1..2)",
            "bcast(mul)",
        ] {
            let k: PrimitiveKind = m.parse().unwrap();
            assert_eq!(k.to_string(), m);
        }
        assert!("shift(h,+2)".parse::<PrimitiveKind>().is_err());
        assert!("blah(1)".parse::<PrimitiveKind>().is_err());
    }

    #[test]
    fn costs() {
        let a = Assignment::new()
            .with(Constant::C, 1)
            .with(Constant::H, 1)
            .with(Constant::W, 1)
            .with(Constant::KH, 3)
            .with(Constant::KW, 3);
        let fc = PrimitiveInstance::new("fc(C)".parse().unwrap(), vec![shape("[C, KH, KW | H, W]")]).unwrap();
        assert_eq!(cost(&fc, &a).unwrap(), Cost { flops: 9, params: 9 });
        let shift = PrimitiveInstance::new("shift(h,+1)".parse().unwrap(), vec![Shape::input()]).unwrap();
        assert_eq!(cost(&shift, &a).unwrap(), Cost::default());
        let unfold = PrimitiveInstance::new("unfold(h)".parse().unwrap(), vec![Shape::input()]).unwrap();
        assert_eq!(unfold.output, shape("[C, KH | H, W]"));
        assert_eq!(cost(&unfold, &a).unwrap(), Cost::default());
    }
}
