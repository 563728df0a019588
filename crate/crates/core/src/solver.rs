//! Analytical variable assignment.
//!
//! A template's free variables get concrete values per replacement target:
//! a global group number `G` is drawn from the divisors of the channel gcd,
//! each variable starts at the smallest multiple of every denominator it
//! meets (scaled with the target's channel count), and variables are then
//! doubled in order of increasing cost sensitivity while every budget
//! bound still holds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use num_integer::Integer;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{conv_baseline, network_cost, template_cost};
use crate::dag::KernelTemplate;
use crate::primitive::Cost;
use crate::shape::{Assignment, Atom, Constant, Dimension, ShapeError, VarId};

/// Doubling passes before a solve is reported as budget-unsaturated.
pub const DEFAULT_ITERATION_CAP: usize = 32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("target `{0}` is not replaceable: neither channel count divides the other")]
    NotReplaceable(String),
    #[error("no replaceable target in the backbone")]
    NoReplaceableTarget,
    #[error("budget sets no bound")]
    EmptyBudget,
    #[error("target index {0} out of range")]
    UnknownTarget(usize),
    #[error("invalid backbone: {0}")]
    InvalidBackbone(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// One convolution to be replaced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    #[serde(default)]
    pub name: String,
    #[serde(rename = "C_in")]
    pub c_in: u64,
    #[serde(rename = "C_out")]
    pub c_out: u64,
    #[serde(rename = "H")]
    pub h: u64,
    #[serde(rename = "W")]
    pub w: u64,
    #[serde(rename = "K_H")]
    pub kh: u64,
    #[serde(rename = "K_W")]
    pub kw: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_flops: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_params: Option<u64>,
}

impl Target {
    pub fn new(name: &str, c_in: u64, c_out: u64, hw: (u64, u64), k: (u64, u64)) -> Target {
        Target {
            name: name.to_string(),
            c_in,
            c_out,
            h: hw.0,
            w: hw.1,
            kh: k.0,
            kw: k.1,
            original_flops: None,
            original_params: None,
        }
    }

    /// Template channel count `min(C_in, C_out)`.
    pub fn channels(&self) -> u64 {
        self.c_in.min(self.c_out)
    }

    pub fn is_replaceable(&self) -> bool {
        self.c_in > 0 && self.c_out > 0 && (self.c_in % self.c_out == 0 || self.c_out % self.c_in == 0)
    }

    pub fn replication(&self) -> Replication {
        if self.c_out >= self.c_in {
            Replication {
                copies: self.c_out / self.c_in,
                mode: ReplicationMode::Concat,
            }
        } else {
            Replication {
                copies: self.c_in / self.c_out,
                mode: ReplicationMode::Sum,
            }
        }
    }

    /// Constants of this target with group number `g`.
    pub fn assignment(&self, g: u64) -> Assignment {
        Assignment::new()
            .with(Constant::C, self.channels())
            .with(Constant::H, self.h)
            .with(Constant::W, self.w)
            .with(Constant::KH, self.kh)
            .with(Constant::KW, self.kw)
            .with(Constant::G, g)
    }

    /// Cost of the convolution being replaced.
    pub fn original_cost(&self) -> Cost {
        let base = conv_baseline(self);
        Cost {
            flops: self.original_flops.unwrap_or(base.flops),
            params: self.original_params.unwrap_or(base.params),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub targets: Vec<Target>,
    #[serde(default)]
    pub non_replaced_flops: u64,
    #[serde(default)]
    pub non_replaced_params: u64,
}

impl BackboneSpec {
    pub fn from_json(text: &str) -> Result<BackboneSpec, SolverError> {
        let spec: BackboneSpec =
            serde_json::from_str(text).map_err(|e| SolverError::InvalidBackbone(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        for t in &self.targets {
            if [t.c_in, t.c_out, t.h, t.w, t.kh, t.kw].contains(&0) {
                return Err(SolverError::InvalidBackbone(format!(
                    "target `{}` has a zero-sized field",
                    t.name
                )));
            }
        }
        Ok(())
    }

    pub fn replaceable(&self) -> impl Iterator<Item = (usize, &Target)> {
        self.targets.iter().enumerate().filter(|(_, t)| t.is_replaceable())
    }

    /// Analytical totals of the unmodified network.
    pub fn original_totals(&self) -> Cost {
        let convs: Cost = self.targets.iter().map(Target::original_cost).sum();
        convs
            + Cost {
                flops: self.non_replaced_flops,
                params: self.non_replaced_params,
            }
    }

    /// Index of the reference target: the smallest channel count, first on
    /// ties.
    pub fn reference_target(&self) -> Option<usize> {
        self.replaceable().min_by_key(|(i, t)| (t.channels(), *i)).map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplicationMode {
    /// `C_out = r * C_in`: copies run on the full input, outputs concatenated.
    Concat,
    /// `C_in = r * C_out`: the input is split into `r` chunks, outputs summed.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Replication {
    pub copies: u64,
    pub mode: ReplicationMode,
}

impl Replication {
    pub fn identity() -> Replication {
        Replication {
            copies: 1,
            mode: ReplicationMode::Concat,
        }
    }
}

impl fmt::Display for Replication {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            ReplicationMode::Concat => "concat",
            ReplicationMode::Sum => "sum",
        };
        write!(f, "{} {mode}", self.copies)
    }
}

impl FromStr for Replication {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (r, mode) = s.trim().split_once(' ').ok_or_else(|| format!("bad replication `{s}`"))?;
        let copies: u64 = r.parse().map_err(|_| format!("bad copy count `{r}`"))?;
        if copies == 0 {
            return Err("copy count must be positive".into());
        }
        let mode = match mode.trim() {
            "concat" => ReplicationMode::Concat,
            "sum" => ReplicationMode::Sum,
            other => return Err(format!("bad replication mode `{other}`")),
        };
        Ok(Replication { copies, mode })
    }
}

/// Analytical limits. Fractions are relative to the original network
/// totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_flops: Option<u64>,
    pub max_params: Option<u64>,
    pub flops_frac: Option<f64>,
    pub params_frac: Option<f64>,
}

/// Concrete bounds after resolving fractions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub flops: Option<u64>,
    pub params: Option<u64>,
}

impl Limits {
    pub fn admits(&self, c: Cost) -> bool {
        self.flops.is_none_or(|l| c.flops <= l) && self.params.is_none_or(|l| c.params <= l)
    }

    /// Cost increase summed over the active bounds, each normalized by its
    /// limit.
    pub fn sensitivity(&self, before: Cost, after: Cost) -> f64 {
        let term = |limit: Option<u64>, a: u64, b: u64| match limit {
            Some(l) => (b as f64 - a as f64) / (l.max(1) as f64),
            None => 0.0,
        };
        term(self.flops, before.flops, after.flops) + term(self.params, before.params, after.params)
    }
}

impl Budget {
    pub fn flops_frac(f: f64) -> Budget {
        Budget {
            flops_frac: Some(f),
            ..Budget::default()
        }
    }

    pub fn max_flops(f: u64) -> Budget {
        Budget {
            max_flops: Some(f),
            ..Budget::default()
        }
    }

    pub fn resolve(&self, spec: &BackboneSpec) -> Result<Limits, SolverError> {
        let totals = spec.original_totals();
        let frac = |f: Option<f64>, total: u64| f.map(|f| (f * total as f64).floor() as u64);
        let pick = |a: Option<u64>, b: Option<u64>| match (a, b) {
            (Some(x), Some(y)) => Some(x.min(y)),
            (x, y) => x.or(y),
        };
        let limits = Limits {
            flops: pick(self.max_flops, frac(self.flops_frac, totals.flops)),
            params: pick(self.max_params, frac(self.params_frac, totals.params)),
        };
        if limits.flops.is_none() && limits.params.is_none() {
            return Err(SolverError::EmptyBudget);
        }
        Ok(limits)
    }
}

/// Concrete variable values for every replaceable target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "SolutionRepr", try_from = "SolutionRepr")]
pub struct Solution {
    pub g: u64,
    pub x: BTreeMap<(usize, VarId), u64>,
    pub achieved_flops: u64,
    pub achieved_params: u64,
    /// The doubling cap was hit while some variable could still grow.
    pub budget_unsaturated: bool,
}

#[derive(Serialize, Deserialize)]
struct SolutionRepr {
    #[serde(rename = "G")]
    g: u64,
    x: Vec<XEntry>,
    achieved_flops: u64,
    achieved_params: u64,
    #[serde(default)]
    budget_unsaturated: bool,
}

#[derive(Serialize, Deserialize)]
struct XEntry {
    target: usize,
    var: String,
    value: u64,
}

impl From<Solution> for SolutionRepr {
    fn from(s: Solution) -> Self {
        SolutionRepr {
            g: s.g,
            x: s
                .x
                .iter()
                .map(|(&(target, v), &value)| XEntry {
                    target,
                    var: v.to_string(),
                    value,
                })
                .collect(),
            achieved_flops: s.achieved_flops,
            achieved_params: s.achieved_params,
            budget_unsaturated: s.budget_unsaturated,
        }
    }
}

impl TryFrom<SolutionRepr> for Solution {
    type Error = String;

    fn try_from(r: SolutionRepr) -> Result<Self, Self::Error> {
        let mut x = BTreeMap::new();
        for e in r.x {
            let id: u32 = e
                .var
                .strip_prefix('x')
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| format!("bad variable `{}`", e.var))?;
            x.insert((e.target, VarId(id)), e.value);
        }
        Ok(Solution {
            g: r.g,
            x,
            achieved_flops: r.achieved_flops,
            achieved_params: r.achieved_params,
            budget_unsaturated: r.budget_unsaturated,
        })
    }
}

impl Solution {
    pub fn value(&self, target: usize, v: VarId) -> Option<u64> {
        self.x.get(&(target, v)).copied()
    }

    /// Full assignment (constants and variables) of target `i`.
    pub fn assignment(&self, spec: &BackboneSpec, i: usize) -> Result<Assignment, SolverError> {
        let t = spec.targets.get(i).ok_or(SolverError::UnknownTarget(i))?;
        let mut a = t.assignment(self.g);
        for (&(ti, v), &value) in &self.x {
            if ti == i {
                a.set_var(v, value);
            }
        }
        Ok(a)
    }

    pub fn achieved(&self) -> Cost {
        Cost {
            flops: self.achieved_flops,
            params: self.achieved_params,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscardReason {
    /// The cost at the base values already exceeds the budget.
    OverBudget,
    /// The template groups channels but the channel gcd has no divisor
    /// above 1.
    NoGroupNumber,
}

impl fmt::Display for DiscardReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiscardReason::OverBudget => "base cost exceeds budget",
            DiscardReason::NoGroupNumber => "no group number candidate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Solved(Solution),
    Discard(DiscardReason),
}

/// Divisors above 1 of the gcd of the replaceable targets' channel counts.
pub fn candidate_g(spec: &BackboneSpec) -> BTreeSet<u64> {
    let gcd = spec.replaceable().map(|(_, t)| t.channels()).fold(0u64, |a, b| a.gcd(&b));
    (2..=gcd).filter(|d| gcd % d == 0).collect()
}

/// Whether any dimension of the template references `G`.
pub fn uses_g(t: &KernelTemplate) -> bool {
    t.dag()
        .nodes()
        .iter()
        .flat_map(|s| s.dims().map(|(_, d)| *d))
        .chain(t.dag().edges().iter().filter_map(|e| e.ratio))
        .any(|d| d.exponent(Constant::G) != 0)
}

/// Draw the global group number. `None` when the template needs one and
/// no candidate exists; 1 when the template never groups by `G`.
pub fn choose_g(t: &KernelTemplate, spec: &BackboneSpec, rng: &mut impl Rng) -> Option<u64> {
    if !uses_g(t) {
        return Some(1);
    }
    let cands: Vec<u64> = candidate_g(spec).into_iter().collect();
    if cands.is_empty() {
        return None;
    }
    Some(cands[rng.gen_range(0..cands.len())])
}

fn atoms_value(atoms: &[Atom], a: &Assignment) -> Result<u128, ShapeError> {
    let mut v: u128 = 1;
    for atom in atoms {
        let f = match atom {
            Atom::Constant(c) => a.constant(*c).ok_or_else(|| ShapeError::Unbound(c.to_string()))?,
            Atom::IntLiteral(n) => *n,
            Atom::DynVar(_) => 1,
        };
        v = v
            .checked_mul(f as u128)
            .ok_or_else(|| ShapeError::Overflow(atom.to_string()))?;
    }
    Ok(v)
}

/// Smallest positive multiple `x` of which makes every dimension containing
/// `v` whole under `a`: the lcm of the reduced denominators `q / gcd(p, q)`
/// over all dims `p * v / q`, including broadcast ratios.
pub fn var_lcm(t: &KernelTemplate, v: VarId, a: &Assignment) -> Result<u64, ShapeError> {
    let dims = t
        .dag()
        .nodes()
        .iter()
        .flat_map(|s| s.dims().map(|(_, d)| *d))
        .chain(t.dag().edges().iter().filter_map(|e| e.ratio))
        .filter(|d| d.has_var(v))
        .collect::<Vec<Dimension>>();
    let mut l: u128 = 1;
    for d in dims {
        let p = atoms_value(&d.numerator(), a)?;
        let q = atoms_value(&d.denominator(), a)?;
        l = l.lcm(&(q / p.gcd(&q)));
    }
    u64::try_from(l).map_err(|_| ShapeError::Overflow(v.to_string()))
}

/// Minimal legal values scaled with channel counts: with `1` the reference
/// target, `x_1j = lcm_1j` and `x_ij = ceil(C_i lcm_1j / (C_1 lcm_ij)) lcm_ij`.
pub fn base_values(
    t: &KernelTemplate,
    spec: &BackboneSpec,
    g: u64,
) -> Result<BTreeMap<(usize, VarId), u64>, SolverError> {
    let reference = spec.reference_target().ok_or(SolverError::NoReplaceableTarget)?;
    let c1 = spec.targets[reference].channels() as u128;
    let mut out = BTreeMap::new();
    for &v in t.free_vars() {
        let lcm1 = var_lcm(t, v, &spec.targets[reference].assignment(g))? as u128;
        for (i, target) in spec.replaceable() {
            let lcm_i = var_lcm(t, v, &target.assignment(g))? as u128;
            let k = (target.channels() as u128 * lcm1).div_ceil(c1 * lcm_i);
            let x = u64::try_from(k.max(1) * lcm_i).map_err(|_| ShapeError::Overflow(v.to_string()))?;
            out.insert((i, v), x);
        }
    }
    Ok(out)
}

fn solution_cost(t: &KernelTemplate, spec: &BackboneSpec, g: u64, x: &BTreeMap<(usize, VarId), u64>) -> Cost {
    let sol = Solution {
        g,
        x: x.clone(),
        achieved_flops: 0,
        achieved_params: 0,
        budget_unsaturated: false,
    };
    network_cost(spec, &sol, t).unwrap_or(Cost {
        flops: u64::MAX,
        params: u64::MAX,
    })
}

/// Grow the base values by sensitivity-ordered doubling.
///
/// Each pass computes, for every variable, the normalized cost increase of
/// doubling it, then walks the variables in ascending order (ties by target
/// then variable index) and doubles each one whose doubling keeps every
/// bound. Passes repeat until none succeeds or `cap` passes have run.
pub fn maximize(
    t: &KernelTemplate,
    spec: &BackboneSpec,
    g: u64,
    base: BTreeMap<(usize, VarId), u64>,
    limits: Limits,
    cap: usize,
) -> Outcome {
    let mut x = base;
    let mut current = solution_cost(t, spec, g, &x);
    if !limits.admits(current) {
        return Outcome::Discard(DiscardReason::OverBudget);
    }
    let mut unsaturated = false;
    for pass in 0.. {
        let keys: Vec<(usize, VarId)> = x.keys().copied().collect();
        let mut order: Vec<(f64, (usize, VarId))> = keys
            .iter()
            .filter_map(|&k| {
                let mut trial = x.clone();
                let doubled = trial[&k].checked_mul(2)?;
                trial.insert(k, doubled);
                let after = solution_cost(t, spec, g, &trial);
                Some((limits.sensitivity(current, after), k))
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut progressed = false;
        for (_, k) in order {
            let Some(doubled) = x[&k].checked_mul(2) else { continue };
            let mut trial = x.clone();
            trial.insert(k, doubled);
            let after = solution_cost(t, spec, g, &trial);
            if limits.admits(after) {
                x = trial;
                current = after;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
        if pass + 1 >= cap {
            unsaturated = true;
            break;
        }
    }
    Outcome::Solved(Solution {
        g,
        x,
        achieved_flops: current.flops,
        achieved_params: current.params,
        budget_unsaturated: unsaturated,
    })
}

/// The full pipeline: draw `G`, compute base values, maximize.
pub fn solve(
    t: &KernelTemplate,
    spec: &BackboneSpec,
    budget: &Budget,
    rng: &mut impl Rng,
) -> Result<Outcome, SolverError> {
    let limits = budget.resolve(spec)?;
    if spec.replaceable().next().is_none() {
        return Err(SolverError::NoReplaceableTarget);
    }
    let Some(g) = choose_g(t, spec, rng) else {
        return Ok(Outcome::Discard(DiscardReason::NoGroupNumber));
    };
    let base = base_values(t, spec, g)?;
    Ok(maximize(t, spec, g, base, limits, DEFAULT_ITERATION_CAP))
}

/// A template bound to one target's concrete values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConcreteKernel {
    pub template: KernelTemplate,
    pub target: String,
    pub assignment: Assignment,
    pub replication: Replication,
}

impl ConcreteKernel {
    /// A single copy on the given assignment.
    pub fn new(template: KernelTemplate, assignment: Assignment) -> ConcreteKernel {
        ConcreteKernel {
            template,
            target: String::new(),
            assignment,
            replication: Replication::identity(),
        }
    }

    /// Every node shape evaluates to positive integers.
    pub fn check(&self) -> Result<(), ShapeError> {
        for s in self.template.dag().nodes() {
            s.eval(&self.assignment)?;
        }
        for e in self.template.dag().edges() {
            if let Some(r) = e.ratio {
                r.eval(&self.assignment)?;
            }
        }
        Ok(())
    }

    pub fn cost(&self) -> Result<Cost, ShapeError> {
        Ok(template_cost(&self.template, &self.assignment)?.scaled(self.replication.copies))
    }
}

/// Bind target `i`.
pub fn instantiate_target(
    t: &KernelTemplate,
    spec: &BackboneSpec,
    sol: &Solution,
    i: usize,
) -> Result<ConcreteKernel, SolverError> {
    let target = spec.targets.get(i).ok_or(SolverError::UnknownTarget(i))?;
    if !target.is_replaceable() {
        return Err(SolverError::NotReplaceable(target.name.clone()));
    }
    let k = ConcreteKernel {
        template: t.clone(),
        target: target.name.clone(),
        assignment: sol.assignment(spec, i)?,
        replication: target.replication(),
    };
    k.check()?;
    Ok(k)
}

/// Bind every replaceable target; flagged targets are skipped.
pub fn instantiate(t: &KernelTemplate, spec: &BackboneSpec, sol: &Solution) -> Result<Vec<ConcreteKernel>, SolverError> {
    spec.replaceable()
        .map(|(i, _)| instantiate_target(t, spec, sol, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::MicroDag;

    fn spec(channels: &[u64]) -> BackboneSpec {
        BackboneSpec {
            targets: channels
                .iter()
                .enumerate()
                .map(|(i, &c)| Target::new(&format!("t{i}"), c, c, (8, 8), (3, 3)))
                .collect(),
            ..BackboneSpec::default()
        }
    }

    #[test]
    fn group_candidates() {
        assert_eq!(candidate_g(&spec(&[32, 48])), BTreeSet::from([2, 4, 8, 16]));
        assert!(candidate_g(&spec(&[7, 13])).is_empty());
        assert_eq!(candidate_g(&spec(&[64, 64])), BTreeSet::from([2, 4, 8, 16, 32, 64]));
    }

    #[test]
    fn replication() {
        let t = Target::new("a", 64, 128, (1, 1), (3, 3));
        assert_eq!(t.replication(), Replication { copies: 2, mode: ReplicationMode::Concat });
        let t = Target::new("b", 128, 64, (1, 1), (3, 3));
        assert_eq!(t.replication(), Replication { copies: 2, mode: ReplicationMode::Sum });
        assert!(!Target::new("c", 48, 64, (1, 1), (3, 3)).is_replaceable());
        assert_eq!("2 sum".parse::<Replication>().unwrap().to_string(), "2 sum");
    }

    fn fc_template() -> KernelTemplate {
        let mut g = MicroDag::new();
        g.push("fc(x1)".parse().unwrap(), &[0]).unwrap();
        g.push("group(G)".parse().unwrap(), &[1]).unwrap();
        g.push("fc(C)".parse().unwrap(), &[2]).unwrap();
        KernelTemplate::finalize(g).unwrap()
    }

    #[test]
    fn base_values_scale_with_channels() {
        let t = fc_template();
        let s = spec(&[16, 32]);
        let base = base_values(&t, &s, 4).unwrap();
        assert_eq!(base[&(0, VarId(1))], 4);
        assert_eq!(base[&(1, VarId(1))], 8);
    }

    #[test]
    fn discard_below_base() {
        let t = fc_template();
        let s = spec(&[16]);
        let base = base_values(&t, &s, 4).unwrap();
        let limits = Limits { flops: Some(1), params: None };
        assert_eq!(
            maximize(&t, &s, 4, base, limits, DEFAULT_ITERATION_CAP),
            Outcome::Discard(DiscardReason::OverBudget)
        );
    }

    #[test]
    fn doubling_is_locally_maximal() {
        let t = fc_template();
        let s = spec(&[16, 32]);
        let base = base_values(&t, &s, 4).unwrap();
        let limits = Limits { flops: Some(200_000), params: None };
        let Outcome::Solved(sol) = maximize(&t, &s, 4, base, limits, DEFAULT_ITERATION_CAP) else {
            panic!("discarded")
        };
        assert!(sol.achieved_flops <= 200_000);
        for k in sol.x.keys() {
            let mut x = sol.x.clone();
            *x.get_mut(k).unwrap() *= 2;
            assert!(!limits.admits(solution_cost(&t, &s, 4, &x)));
        }
    }

    #[test]
    fn cap_flags_unsaturated() {
        let t = fc_template();
        let s = spec(&[16]);
        let base = base_values(&t, &s, 4).unwrap();
        let limits = Limits { flops: Some(u64::MAX / 2), params: None };
        let Outcome::Solved(sol) = maximize(&t, &s, 4, base, limits, 3) else { panic!() };
        assert!(sol.budget_unsaturated);
        assert_eq!(sol.x[&(0, VarId(1))], 4 * 8);
    }

    #[test]
    fn solution_json_round_trip() {
        let sol = Solution {
            g: 4,
            x: BTreeMap::from([((0, VarId(1)), 12), ((1, VarId(1)), 60)]),
            achieved_flops: 10,
            achieved_params: 2,
            budget_unsaturated: false,
        };
        let text = serde_json::to_string(&sol).unwrap();
        assert!(text.contains("\"x1\""));
        assert_eq!(serde_json::from_str::<Solution>(&text).unwrap(), sol);
    }

    #[test]
    fn backbone_field_names() {
        let text = r#"{"targets":[{"name":"conv1","C_in":64,"C_out":128,"H":56,"W":56,"K_H":3,"K_W":3}],
                       "non_replaced_flops":100,"non_replaced_params":7}"#;
        let s = BackboneSpec::from_json(text).unwrap();
        assert_eq!(s.targets[0].c_out, 128);
        assert_eq!(s.non_replaced_params, 7);
    }
}
