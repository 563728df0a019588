use std::cmp::Ordering;
use std::fmt;

use num_integer::Integer;
use serde::{Deserialize, Serialize};

use super::ShapeError;

/// Named per-target constants a dimension may refer to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Constant {
    C,
    H,
    W,
    KH,
    KW,
    G,
}

impl Constant {
    pub const ALL: [Constant; 6] = [
        Constant::C,
        Constant::H,
        Constant::W,
        Constant::KH,
        Constant::KW,
        Constant::G,
    ];

    /// Rendering order: alphabetical by name.
    const RENDER_ORDER: [Constant; 6] = [
        Constant::C,
        Constant::G,
        Constant::H,
        Constant::KH,
        Constant::KW,
        Constant::W,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Constant::C => "C",
            Constant::H => "H",
            Constant::W => "W",
            Constant::KH => "KH",
            Constant::KW => "KW",
            Constant::G => "G",
        }
    }

    pub fn from_name(s: &str) -> Option<Constant> {
        Some(match s {
            "C" => Constant::C,
            "H" => Constant::H,
            "W" => Constant::W,
            "KH" | "K_H" => Constant::KH,
            "KW" | "K_W" => Constant::KW,
            "G" => Constant::G,
            _ => return None,
        })
    }
}

impl fmt::Display for Constant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Identifier of a dynamic variable introduced by a fully-connected primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarId(pub u32);

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.0)
    }
}

/// One factor of a dimension's numerator or denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Atom {
    DynVar(VarId),
    Constant(Constant),
    IntLiteral(u64),
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::DynVar(v) => write!(f, "{v}"),
            Atom::Constant(c) => write!(f, "{c}"),
            Atom::IntLiteral(n) => write!(f, "{n}"),
        }
    }
}

const MAX_VARS: usize = 2;

/// A reduced monomial fraction over integer literals, named constants and
/// dynamic variables.
///
/// The representation is canonical: the literal part is a reduced fraction,
/// constants and variables carry signed exponents (negative means
/// denominator), and variable slots are sorted by id. Structural equality is
/// therefore symbolic equality.
///
/// The type itself can hold intermediate ratios (a variable in the
/// denominator, two variables) so broadcast ratios can be expressed; the
/// checked constructors [`Dimension::multiply`], [`Dimension::divide`] and
/// [`Dimension::substitute`] only ever return values that satisfy the
/// structural dimension rules (see [`Dimension::check_legal`]).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dimension {
    num: u64,
    den: u64,
    consts: [i16; 6],
    vars: [Option<(VarId, i16)>; MAX_VARS],
}

impl Default for Dimension {
    fn default() -> Self {
        Dimension::one()
    }
}

impl Dimension {
    pub const fn one() -> Dimension {
        Dimension {
            num: 1,
            den: 1,
            consts: [0; 6],
            vars: [None; MAX_VARS],
        }
    }

    pub fn constant(c: Constant) -> Dimension {
        let mut d = Dimension::one();
        d.consts[c.index()] = 1;
        d
    }

    /// Panics if `n == 0`.
    pub fn literal(n: u64) -> Dimension {
        assert!(n >= 1, "integer literal dimensions must be positive");
        Dimension {
            num: n,
            ..Dimension::one()
        }
    }

    pub fn var(id: VarId) -> Dimension {
        let mut d = Dimension::one();
        d.vars[0] = Some((id, 1));
        d
    }

    pub fn is_one(&self) -> bool {
        *self == Dimension::one()
    }

    pub fn literal_part(&self) -> (u64, u64) {
        (self.num, self.den)
    }

    pub fn exponent(&self, c: Constant) -> i16 {
        self.consts[c.index()]
    }

    pub fn var_exponent(&self, id: VarId) -> i16 {
        self.vars
            .iter()
            .flatten()
            .find(|(v, _)| *v == id)
            .map_or(0, |(_, e)| *e)
    }

    /// All variables with their (nonzero) exponents.
    pub fn vars(&self) -> impl Iterator<Item = (VarId, i16)> + '_ {
        self.vars.iter().flatten().copied()
    }

    pub fn has_var(&self, id: VarId) -> bool {
        self.var_exponent(id) != 0
    }

    pub fn has_any_var(&self) -> bool {
        self.vars[0].is_some()
    }

    /// The single numerator variable of a legal dimension.
    pub fn numerator_var(&self) -> Option<VarId> {
        self.vars().find(|(_, e)| *e > 0).map(|(v, _)| v)
    }

    pub fn numerator(&self) -> Vec<Atom> {
        let mut out = Vec::new();
        for (v, e) in self.vars() {
            for _ in 0..e.max(0) {
                out.push(Atom::DynVar(v));
            }
        }
        for c in Constant::RENDER_ORDER {
            for _ in 0..self.consts[c.index()].max(0) {
                out.push(Atom::Constant(c));
            }
        }
        if self.num > 1 {
            out.push(Atom::IntLiteral(self.num));
        }
        out
    }

    pub fn denominator(&self) -> Vec<Atom> {
        let mut out = Vec::new();
        for (v, e) in self.vars() {
            for _ in 0..(-e).max(0) {
                out.push(Atom::DynVar(v));
            }
        }
        for c in Constant::RENDER_ORDER {
            for _ in 0..(-self.consts[c.index()]).max(0) {
                out.push(Atom::Constant(c));
            }
        }
        if self.den > 1 {
            out.push(Atom::IntLiteral(self.den));
        }
        out
    }

    /// Unchecked product. Fails only when the representation would overflow
    /// (literal parts or more than two distinct variables).
    pub fn raw_mul(&self, other: &Dimension) -> Result<Dimension, ShapeError> {
        self.combine(other, 1)
    }

    /// Unchecked quotient, see [`Dimension::raw_mul`].
    pub fn raw_div(&self, other: &Dimension) -> Result<Dimension, ShapeError> {
        self.combine(other, -1)
    }

    pub fn raw_pow(&self, exp: i16) -> Result<Dimension, ShapeError> {
        let mut acc = Dimension::one();
        let step = if exp >= 0 { 1 } else { -1 };
        for _ in 0..exp.unsigned_abs() {
            acc = acc.combine(self, step)?;
        }
        Ok(acc)
    }

    fn combine(&self, other: &Dimension, sign: i16) -> Result<Dimension, ShapeError> {
        let (on, od) = if sign > 0 {
            (other.num, other.den)
        } else {
            (other.den, other.num)
        };
        let num = self
            .num
            .checked_mul(on)
            .ok_or_else(|| ShapeError::Overflow(format!("{self} * {other}")))?;
        let den = self
            .den
            .checked_mul(od)
            .ok_or_else(|| ShapeError::Overflow(format!("{self} * {other}")))?;
        let g = num.gcd(&den);
        let mut out = Dimension {
            num: num / g,
            den: den / g,
            consts: self.consts,
            vars: [None; MAX_VARS],
        };
        for i in 0..6 {
            out.consts[i] += sign * other.consts[i];
        }
        let mut merged: Vec<(VarId, i16)> = self.vars().collect();
        for (v, e) in other.vars() {
            match merged.iter_mut().find(|(w, _)| *w == v) {
                Some(slot) => slot.1 += sign * e,
                None => merged.push((v, sign * e)),
            }
        }
        merged.retain(|(_, e)| *e != 0);
        merged.sort_by_key(|(v, _)| *v);
        if merged.len() > MAX_VARS {
            return Err(ShapeError::MultipleDynVars);
        }
        for (slot, entry) in out.vars.iter_mut().zip(merged) {
            *slot = Some(entry);
        }
        Ok(out)
    }

    /// Structural dimension rules: no variable in the denominator, at most
    /// one variable occurrence in the numerator.
    pub fn check_legal(&self) -> Result<(), ShapeError> {
        if let Some((v, _)) = self.vars().find(|(_, e)| *e < 0) {
            return Err(ShapeError::DynVarInDenominator(v));
        }
        let occurrences: i16 = self.vars().map(|(_, e)| e).sum();
        if occurrences > 1 {
            return Err(ShapeError::MultipleDynVars);
        }
        Ok(())
    }

    pub fn is_legal(&self) -> bool {
        self.check_legal().is_ok()
    }

    /// Checked product: the result must satisfy the dimension rules.
    pub fn multiply(a: &Dimension, b: &Dimension) -> Result<Dimension, ShapeError> {
        let out = a.raw_mul(b)?;
        out.check_legal()?;
        Ok(out)
    }

    /// Checked quotient: the result must satisfy the dimension rules.
    pub fn divide(a: &Dimension, b: &Dimension) -> Result<Dimension, ShapeError> {
        let out = a.raw_div(b)?;
        out.check_legal()?;
        Ok(out)
    }

    /// Replace every occurrence of `id` by `expr`.
    pub fn substitute(&self, id: VarId, expr: &Dimension) -> Result<Dimension, ShapeError> {
        let out = self.substitute_raw(id, expr)?;
        out.check_legal()
            .map_err(|e| ShapeError::IllegalSubstitution {
                var: id,
                reason: e.to_string(),
            })?;
        Ok(out)
    }

    /// Substitution without the legality check, used on broadcast ratios.
    pub fn substitute_raw(&self, id: VarId, expr: &Dimension) -> Result<Dimension, ShapeError> {
        let e = self.var_exponent(id);
        if e == 0 {
            return Ok(*self);
        }
        let removed = self.raw_div(&Dimension::var(id).raw_pow(e)?)?;
        removed.raw_mul(&expr.raw_pow(e)?)
    }

    /// Whether the dimension is a whole number under the admitted
    /// divisibility facts: `G` divides `C`, and a dynamic variable in the
    /// numerator absorbs any constant denominator (it is later constrained to
    /// a multiple of it).
    pub fn is_integral(&self) -> bool {
        if self.vars().any(|(_, e)| e < 0) {
            return false;
        }
        if self.has_any_var() {
            return true;
        }
        if self.den != 1 {
            return false;
        }
        for c in Constant::ALL {
            let e = self.consts[c.index()];
            match c {
                Constant::G => {
                    if e < 0 && -e > self.consts[Constant::C.index()].max(0) {
                        return false;
                    }
                }
                Constant::C => {
                    if e < 0 {
                        return false;
                    }
                }
                _ => {
                    if e < 0 {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Exact positive integer value under `a`.
    pub fn eval(&self, a: &super::Assignment) -> Result<u64, ShapeError> {
        let overflow = || ShapeError::Overflow(self.to_string());
        let mut num: u128 = self.num as u128;
        let mut den: u128 = self.den as u128;
        let mut apply = |value: u64, e: i16| -> Result<(), ShapeError> {
            let target = if e > 0 { &mut num } else { &mut den };
            for _ in 0..e.unsigned_abs() {
                *target = target.checked_mul(value as u128).ok_or_else(overflow)?;
            }
            Ok(())
        };
        for c in Constant::ALL {
            let e = self.consts[c.index()];
            if e != 0 {
                let value = a
                    .constant(c)
                    .ok_or_else(|| ShapeError::Unbound(c.to_string()))?;
                apply(value, e)?;
            }
        }
        for (v, e) in self.vars() {
            let value = a.var(v).ok_or_else(|| ShapeError::Unbound(v.to_string()))?;
            apply(value, e)?;
        }
        if den == 0 || num % den != 0 {
            return Err(ShapeError::NonIntegral(self.to_string()));
        }
        let q = num / den;
        if q == 0 {
            return Err(ShapeError::NonIntegral(self.to_string()));
        }
        u64::try_from(q).map_err(|_| overflow())
    }

    /// Sort key for deterministic ordering of dimension sets.
    fn sort_key(&self) -> (u64, u64, [i16; 6], [(u32, i16); MAX_VARS]) {
        let mut vars = [(0u32, 0i16); MAX_VARS];
        for (slot, (v, e)) in vars.iter_mut().zip(self.vars()) {
            *slot = (v.0, e);
        }
        (self.num, self.den, self.consts, vars)
    }

    /// Number of atoms in the numerator (with multiplicity, literal counts once).
    pub fn numerator_len(&self) -> usize {
        self.numerator().len()
    }
}

impl PartialOrd for Dimension {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dimension {
    fn cmp(&self, other: &Self) -> Ordering {
        self.numerator_len()
            .cmp(&other.numerator_len())
            .then_with(|| self.sort_key().cmp(&other.sort_key()))
    }
}

fn write_product(f: &mut fmt::Formatter<'_>, atoms: &[Atom]) -> fmt::Result {
    for (i, a) in atoms.iter().enumerate() {
        if i > 0 {
            f.write_str("*")?;
        }
        write!(f, "{a}")?;
    }
    Ok(())
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let num = self.numerator();
        let den = self.denominator();
        if num.is_empty() {
            f.write_str("1")?;
        } else {
            write_product(f, &num)?;
        }
        match den.len() {
            0 => Ok(()),
            1 => write!(f, "/{}", den[0]),
            _ => {
                f.write_str("/(")?;
                write_product(f, &den)?;
                f.write_str(")")
            }
        }
    }
}

impl fmt::Debug for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dim({self})")
    }
}

impl std::str::FromStr for Dimension {
    type Err = ShapeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ShapeError::Parse(s.to_string());
        let s = s.trim();
        if s.is_empty() {
            return Err(err());
        }
        let mut parts = split_top_level(s, '/').into_iter();
        let head = parts.next().ok_or_else(err)?;
        let mut out = parse_product(head).ok_or_else(err)?;
        for part in parts {
            let part = part.trim();
            let inner = part
                .strip_prefix('(')
                .and_then(|p| p.strip_suffix(')'))
                .unwrap_or(part);
            let d = parse_product(inner).ok_or_else(err)?;
            out = out.raw_div(&d).map_err(|_| err())?;
        }
        Ok(out)
    }
}

fn split_top_level(s: &str, sep: char) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            c if c == sep && depth == 0 => {
                out.push(&s[start..i]);
                start = i + ch.len_utf8();
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

fn parse_product(s: &str) -> Option<Dimension> {
    let s = s.trim();
    let s = s
        .strip_prefix('(')
        .and_then(|p| p.strip_suffix(')'))
        .unwrap_or(s);
    let mut out = Dimension::one();
    for tok in s.split('*') {
        let tok = tok.trim();
        let atom = if let Some(c) = Constant::from_name(tok) {
            Dimension::constant(c)
        } else if let Some(rest) = tok.strip_prefix('x') {
            Dimension::var(VarId(rest.parse().ok()?))
        } else {
            let n: u64 = tok.parse().ok()?;
            if n == 0 {
                return None;
            }
            Dimension::literal(n)
        };
        out = out.raw_mul(&atom).ok()?;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::Assignment;

    fn d(s: &str) -> Dimension {
        s.parse().unwrap()
    }

    #[test]
    fn cancellation() {
        let c = Dimension::constant(Constant::C);
        let g = Dimension::constant(Constant::G);
        let cg = Dimension::multiply(&c, &g).unwrap();
        assert_eq!(Dimension::divide(&cg, &g).unwrap(), c);

        let x2_over_g = d("x2/G");
        assert_eq!(Dimension::multiply(&x2_over_g, &g).unwrap(), d("x2"));
    }

    #[test]
    fn var_in_denominator_rejected() {
        let err = Dimension::divide(&d("C"), &d("x0")).unwrap_err();
        assert_eq!(err, ShapeError::DynVarInDenominator(VarId(0)));
    }

    #[test]
    fn two_vars_rejected() {
        assert_eq!(
            Dimension::multiply(&d("x0"), &d("x1")).unwrap_err(),
            ShapeError::MultipleDynVars
        );
        assert_eq!(
            Dimension::multiply(&d("x0"), &d("x0")).unwrap_err(),
            ShapeError::MultipleDynVars
        );
    }

    #[test]
    fn substitution_examples() {
        let gkk = d("G*KH*KW");
        assert_eq!(d("x2/G").substitute(VarId(2), &gkk).unwrap(), d("KH*KW"));
        assert_eq!(d("C").substitute(VarId(1), &d("KW")).unwrap(), d("C"));
        assert_eq!(
            d("x1*KH").substitute(VarId(1), &d("x2*KW")).unwrap(),
            d("x2*KW*KH")
        );
        let err = d("x1*x2/x2").substitute(VarId(1), &d("x2"));
        // x1 alone after reduction; x1 := x2 is fine
        assert_eq!(err.unwrap(), d("x2"));
        assert!(matches!(
            d("x1").substitute(VarId(1), &d("C/x3")),
            Err(ShapeError::IllegalSubstitution { .. })
        ));
    }

    #[test]
    fn eval_examples() {
        let a = Assignment::new().with(Constant::C, 32).with(Constant::G, 4);
        assert_eq!(d("C/G").eval(&a).unwrap(), 8);
        let a5 = Assignment::new().with(Constant::C, 32).with(Constant::G, 5);
        assert!(matches!(d("C/G").eval(&a5), Err(ShapeError::NonIntegral(_))));
        let b = Assignment::new()
            .with(Constant::KW, 3)
            .with_var(VarId(2), 12);
        assert_eq!(d("x2*KW").eval(&b).unwrap(), 36);
        assert!(matches!(d("x2").eval(&Assignment::new()), Err(ShapeError::Unbound(_))));
    }

    #[test]
    fn rendering_is_canonical() {
        assert_eq!(d("KW*x2").to_string(), "x2*KW");
        assert_eq!(d("C/G").to_string(), "C/G");
        assert_eq!(d("C*KH/G").to_string(), "C*KH/G");
        assert_eq!(d("x3/(G*KH)").to_string(), "x3/(G*KH)");
        assert_eq!(d("1").to_string(), "1");
        assert_eq!(d("G/G").to_string(), "1");
        assert_eq!(d("2*C*C").to_string(), "C*C*2");
        for s in ["x2*KW", "C/G", "x3/(G*KH)", "C*C*2", "1/G", "x1*x2/KH"] {
            assert_eq!(d(s), d(&d(s).to_string()));
        }
    }

    #[test]
    fn integrality_conventions() {
        assert!(d("C/G").is_integral());
        assert!(d("C*KH/G").is_integral());
        assert!(!d("KH/G").is_integral());
        assert!(!d("C/(G*G)").is_integral());
        assert!(d("x1/(G*KH)").is_integral());
        assert!(!d("C/x1").is_integral());
        assert!(!d("1/G").is_integral());
    }
}
