//! Symbolic tensor shapes.
//!
//! Every dimension is a reduced fraction of products of named per-target
//! constants (`C`, `H`, `W`, `KH`, `KW`, `G`), integer literals and dynamic
//! variables `x<n>` introduced by fully-connected primitives. Shapes split
//! their dimensions into a channel region and a spatial region.
//!
//! Shapes built by the primitive library obey four structural rules, checked
//! by [`validate_theorem1`]:
//!
//! * no dynamic variable in a spatial dimension,
//! * no dynamic variable in any denominator,
//! * at most one dynamic variable in a dimension's numerator,
//! * at most one dynamic variable across the whole shape.

mod dim;
mod factor;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dim::{Atom, Constant, Dimension, VarId};
pub use factor::enumerate_factors;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ShapeError {
    #[error("dynamic variable {0} would land in a denominator")]
    DynVarInDenominator(VarId),
    #[error("more than one dynamic variable in a dimension")]
    MultipleDynVars,
    #[error("illegal substitution of {var}: {reason}")]
    IllegalSubstitution { var: VarId, reason: String },
    #[error("`{0}` does not evaluate to a positive integer")]
    NonIntegral(String),
    #[error("`{0}` is not bound in the assignment")]
    Unbound(String),
    #[error("arithmetic overflow evaluating `{0}`")]
    Overflow(String),
    #[error("cannot parse `{0}`")]
    Parse(String),
}

/// One violated structural rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    DynVarInSpatial { dim: usize },
    DynVarInDenominator { dim: usize },
    MultipleDynVarsInNumerator { dim: usize },
    MultipleDynVars,
}

impl Violation {
    pub fn name(&self) -> &'static str {
        match self {
            Violation::DynVarInSpatial { .. } => "dynvar in spatial",
            Violation::DynVarInDenominator { .. } => "dynvar in denominator",
            Violation::MultipleDynVarsInNumerator { .. } => "multiple dynvars in numerator",
            Violation::MultipleDynVars => "multiple dynvars",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DynVarInSpatial { dim }
            | Violation::DynVarInDenominator { dim }
            | Violation::MultipleDynVarsInNumerator { dim } => {
                write!(f, "{} (dim {dim})", self.name())
            }
            Violation::MultipleDynVars => f.write_str(self.name()),
        }
    }
}

/// Which part of a shape a dimension belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Channel,
    Spatial,
}

#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub channel: Vec<Dimension>,
    pub spatial: Vec<Dimension>,
}

impl Shape {
    pub fn new(channel: Vec<Dimension>, spatial: Vec<Dimension>) -> Shape {
        Shape { channel, spatial }
    }

    /// The kernel template's input and output shape `<C | H, W>`.
    pub fn input() -> Shape {
        Shape {
            channel: vec![Dimension::constant(Constant::C)],
            spatial: vec![
                Dimension::constant(Constant::H),
                Dimension::constant(Constant::W),
            ],
        }
    }

    pub fn rank(&self) -> usize {
        self.channel.len() + self.spatial.len()
    }

    /// Dimensions in order, channel region first.
    pub fn dims(&self) -> impl Iterator<Item = (Region, &Dimension)> {
        self.channel
            .iter()
            .map(|d| (Region::Channel, d))
            .chain(self.spatial.iter().map(|d| (Region::Spatial, d)))
    }

    pub fn dim(&self, index: usize) -> Option<(Region, &Dimension)> {
        if index < self.channel.len() {
            Some((Region::Channel, &self.channel[index]))
        } else {
            self.spatial
                .get(index - self.channel.len())
                .map(|d| (Region::Spatial, d))
        }
    }

    /// Distinct dynamic variables referenced by the shape, sorted.
    pub fn vars(&self) -> Vec<VarId> {
        let mut out: Vec<VarId> = self
            .dims()
            .flat_map(|(_, d)| d.vars().map(|(v, _)| v))
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn has_var(&self, id: VarId) -> bool {
        self.dims().any(|(_, d)| d.has_var(id))
    }

    pub fn channel_product(&self) -> Result<Dimension, ShapeError> {
        product(&self.channel)
    }

    pub fn spatial_product(&self) -> Result<Dimension, ShapeError> {
        product(&self.spatial)
    }

    pub fn substitute(&self, id: VarId, expr: &Dimension) -> Result<Shape, ShapeError> {
        let sub = |dims: &[Dimension]| -> Result<Vec<Dimension>, ShapeError> {
            dims.iter().map(|d| d.substitute(id, expr)).collect()
        };
        let out = Shape {
            channel: sub(&self.channel)?,
            spatial: sub(&self.spatial)?,
        };
        if let Err(v) = validate_theorem1(&out) {
            return Err(ShapeError::IllegalSubstitution {
                var: id,
                reason: v
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(", "),
            });
        }
        Ok(out)
    }

    /// Every dimension is a whole number under the divisibility conventions.
    pub fn is_integral(&self) -> bool {
        self.dims().all(|(_, d)| d.is_integral())
    }

    pub fn eval(&self, a: &Assignment) -> Result<Vec<usize>, ShapeError> {
        self.dims()
            .map(|(_, d)| d.eval(a).map(|v| v as usize))
            .collect()
    }

    pub fn eval_channel(&self, a: &Assignment) -> Result<Vec<usize>, ShapeError> {
        self.channel.iter().map(|d| d.eval(a).map(|v| v as usize)).collect()
    }

    pub fn eval_spatial(&self, a: &Assignment) -> Result<Vec<usize>, ShapeError> {
        self.spatial.iter().map(|d| d.eval(a).map(|v| v as usize)).collect()
    }

    pub fn num_elements(&self, a: &Assignment) -> Result<u64, ShapeError> {
        let mut n: u64 = 1;
        for (_, d) in self.dims() {
            n = n
                .checked_mul(d.eval(a)?)
                .ok_or_else(|| ShapeError::Overflow(self.to_string()))?;
        }
        Ok(n)
    }
}

pub fn product(dims: &[Dimension]) -> Result<Dimension, ShapeError> {
    dims.iter()
        .try_fold(Dimension::one(), |acc, d| acc.raw_mul(d))
}

/// Report every violated structural rule of `s`.
pub fn validate_theorem1(s: &Shape) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let mut occurrences = 0i32;
    let mut seen: Option<VarId> = None;
    let mut distinct_extra = false;
    for (i, (region, d)) in s.dims().enumerate() {
        let mut numerator_vars = 0i32;
        for (v, e) in d.vars() {
            if region == Region::Spatial {
                violations.push(Violation::DynVarInSpatial { dim: i });
            }
            if e < 0 {
                violations.push(Violation::DynVarInDenominator { dim: i });
            } else {
                numerator_vars += e as i32;
                occurrences += e as i32;
            }
            match seen {
                None => seen = Some(v),
                Some(w) if w != v => distinct_extra = true,
                _ => {}
            }
        }
        if numerator_vars > 1 {
            violations.push(Violation::MultipleDynVarsInNumerator { dim: i });
        }
    }
    if distinct_extra || occurrences > 1 {
        violations.push(Violation::MultipleDynVars);
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

fn write_dims(f: &mut fmt::Formatter<'_>, dims: &[Dimension]) -> fmt::Result {
    for (i, d) in dims.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        write!(f, "{d}")?;
    }
    Ok(())
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        write_dims(f, &self.channel)?;
        f.write_str(" | ")?;
        write_dims(f, &self.spatial)?;
        f.write_str("]")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Shape{self}")
    }
}

impl FromStr for Shape {
    type Err = ShapeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ShapeError::Parse(s.to_string());
        let inner = s
            .trim()
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(err)?;
        let (ch, sp) = inner.split_once('|').ok_or_else(err)?;
        let parse = |part: &str| -> Result<Vec<Dimension>, ShapeError> {
            let part = part.trim();
            if part.is_empty() {
                return Ok(Vec::new());
            }
            part.split(',').map(|t| t.trim().parse()).collect()
        };
        Ok(Shape {
            channel: parse(ch)?,
            spatial: parse(sp)?,
        })
    }
}

/// Concrete integer values for constants and dynamic variables.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assignment {
    constants: [Option<u64>; 6],
    vars: BTreeMap<VarId, u64>,
}

impl Assignment {
    pub fn new() -> Assignment {
        Assignment::default()
    }

    pub fn with(mut self, c: Constant, value: u64) -> Assignment {
        self.set(c, value);
        self
    }

    pub fn with_var(mut self, v: VarId, value: u64) -> Assignment {
        self.set_var(v, value);
        self
    }

    pub fn set(&mut self, c: Constant, value: u64) {
        self.constants[c.index()] = Some(value);
    }

    pub fn set_var(&mut self, v: VarId, value: u64) {
        self.vars.insert(v, value);
    }

    pub fn constant(&self, c: Constant) -> Option<u64> {
        self.constants[c.index()]
    }

    pub fn var(&self, v: VarId) -> Option<u64> {
        self.vars.get(&v).copied()
    }

    pub fn var_entries(&self) -> impl Iterator<Item = (VarId, u64)> + '_ {
        self.vars.iter().map(|(k, v)| (*k, *v))
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        let mut sep = |f: &mut fmt::Formatter<'_>| {
            if !std::mem::take(&mut first) {
                f.write_str(",")
            } else {
                Ok(())
            }
        };
        for c in Constant::ALL {
            if let Some(v) = self.constant(c) {
                sep(f)?;
                write!(f, "{c}={v}")?;
            }
        }
        for (k, v) in &self.vars {
            sep(f)?;
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

impl FromStr for Assignment {
    type Err = ShapeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = Assignment::new();
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let err = || ShapeError::Parse(item.to_string());
            let (k, v) = item.split_once('=').ok_or_else(err)?;
            let value: u64 = v.trim().parse().map_err(|_| err())?;
            if value == 0 {
                return Err(err());
            }
            let k = k.trim();
            if let Some(c) = Constant::from_name(k) {
                out.set(c, value);
            } else if let Some(n) = k.strip_prefix('x') {
                out.set_var(VarId(n.parse().map_err(|_| err())?), value);
            } else {
                return Err(err());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(s: &str) -> Shape {
        s.parse().unwrap()
    }

    #[test]
    fn legality_examples() {
        assert!(validate_theorem1(&shape("[G, C/G | H, W]")).is_ok());
        let v = validate_theorem1(&shape("[x0, x1 | H, W]")).unwrap_err();
        assert!(v.iter().any(|v| v.name() == "multiple dynvars"));
        let v = validate_theorem1(&shape("[C | H, x0]")).unwrap_err();
        assert!(v.iter().any(|v| v.name() == "dynvar in spatial"));
        let v = validate_theorem1(&shape("[C/x0 | H, W]")).unwrap_err();
        assert!(v.iter().any(|v| v.name() == "dynvar in denominator"));
        let v = validate_theorem1(&shape("[x0*x1/KH | H, W]")).unwrap_err();
        assert!(v.iter().any(|v| v.name() == "multiple dynvars in numerator"));
    }

    #[test]
    fn shape_text_round_trip() {
        for s in ["[C | H, W]", "[G, C/G, KH | H, W]", "[x1 | ]", "[ | H]"] {
            let parsed = shape(s);
            assert_eq!(parsed, shape(&parsed.to_string()));
        }
        assert_eq!(Shape::input().to_string(), "[C | H, W]");
    }

    #[test]
    fn assignment_text() {
        let a: Assignment = "C=4,H=6,W=6,KH=3,KW=3,G=2,x1=8".parse().unwrap();
        assert_eq!(a.constant(Constant::KH), Some(3));
        assert_eq!(a.var(VarId(1)), Some(8));
        assert_eq!(a.to_string(), "C=4,H=6,W=6,KH=3,KW=3,G=2,x1=8");
        assert!("C=0".parse::<Assignment>().is_err());
        assert!("Q=1".parse::<Assignment>().is_err());
    }
}
