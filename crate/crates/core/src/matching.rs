//! Broadcast shape matching.
//!
//! Two shapes are decomposed into a common prefix, a common suffix and the
//! unmatched cores in between. Broadcasting replicates the left core across
//! the right core, which requires the ratio `M = #rhs_core / #lhs_core` to be
//! a whole number. When the left core carries a dynamic variable, the legal
//! values for it are the divisors of the right-hand side of that ratio.

use std::collections::BTreeSet;

use crate::dag::{DagError, KernelTemplate};
use crate::shape::{enumerate_factors, product, Dimension, Region, Shape, VarId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastMatch {
    pub prefix: Vec<Dimension>,
    pub suffix: Vec<Dimension>,
    pub lhs_core: Vec<Dimension>,
    pub rhs_core: Vec<Dimension>,
    /// `#rhs_core / #lhs_core` before any substitution.
    pub ratio: Dimension,
    /// The left-hand variable that must be substituted, if any.
    pub solve_var: Option<VarId>,
    /// Legal values for `solve_var`.
    pub substitutions: BTreeSet<Dimension>,
}

impl BroadcastMatch {
    pub fn needs_substitution(&self) -> bool {
        self.solve_var.is_some()
    }

    pub fn substitution_pairs(&self) -> Vec<(VarId, Dimension)> {
        match self.solve_var {
            Some(v) => self.substitutions.iter().map(|e| (v, *e)).collect(),
            None => Vec::new(),
        }
    }

    /// Audit line recorded next to broadcast edges in the kernel IR.
    pub fn describe(&self) -> String {
        let list = |ds: &[Dimension]| {
            ds.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        format!(
            "match prefix=[{}] lhs=[{}] rhs=[{}] suffix=[{}] M={}",
            list(&self.prefix),
            list(&self.lhs_core),
            list(&self.rhs_core),
            list(&self.suffix),
            self.ratio
        )
    }
}

/// Split both shapes into maximal common prefix/suffix and the cores.
///
/// Returns `(prefix_len, suffix_len)`. Dimensions only match when they are
/// structurally equal and sit in the same region.
pub fn strip_common(lhs: &Shape, rhs: &Shape) -> (usize, usize) {
    let l: Vec<(Region, &Dimension)> = lhs.dims().collect();
    let r: Vec<(Region, &Dimension)> = rhs.dims().collect();
    let max = l.len().min(r.len());
    let mut prefix = 0;
    while prefix < max && l[prefix] == r[prefix] {
        prefix += 1;
    }
    let mut suffix = 0;
    while suffix < max - prefix && l[l.len() - 1 - suffix] == r[r.len() - 1 - suffix] {
        suffix += 1;
    }
    (prefix, suffix)
}

/// Match `lhs` for broadcasting onto `rhs`. `None` when no legal matching
/// exists.
pub fn match_broadcast(lhs: &Shape, rhs: &Shape) -> Option<BroadcastMatch> {
    let (p, s) = strip_common(lhs, rhs);
    let ldims: Vec<Dimension> = lhs.dims().map(|(_, d)| *d).collect();
    let rdims: Vec<Dimension> = rhs.dims().map(|(_, d)| *d).collect();
    let lhs_core = ldims[p..ldims.len() - s].to_vec();
    let rhs_core = rdims[p..rdims.len() - s].to_vec();
    let lsize = product(&lhs_core).ok()?;
    let rsize = product(&rhs_core).ok()?;
    let ratio = rsize.raw_div(&lsize).ok()?;

    let lvar = lsize.numerator_var();
    let rvar = rsize.numerator_var();
    let solve_var = match lvar {
        Some(v) if Some(v) != rvar => Some(v),
        _ => None,
    };

    let mut substitutions = BTreeSet::new();
    match solve_var {
        None => {
            if !ratio.is_integral() {
                return None;
            }
        }
        Some(v) => {
            // lhs size = x * rest; legal x are divisors of rhs / rest.
            let rest = lsize.raw_div(&Dimension::var(v)).ok()?;
            let target = rsize.raw_div(&rest).ok()?;
            if !target.is_integral() || !target.is_legal() {
                return None;
            }
            for e in enumerate_factors(&target) {
                if let Ok(sub) = lhs.substitute(v, &e) {
                    if sub.is_integral() {
                        substitutions.insert(e);
                    }
                }
            }
            if substitutions.is_empty() {
                return None;
            }
        }
    }

    Some(BroadcastMatch {
        prefix: ldims[..p].to_vec(),
        suffix: ldims[ldims.len() - s..].to_vec(),
        lhs_core,
        rhs_core,
        ratio,
        solve_var,
        substitutions,
    })
}

/// Propagate `id := expr` through every node and primitive of `t`.
pub fn apply_substitution(
    t: &KernelTemplate,
    id: VarId,
    expr: &Dimension,
) -> Result<KernelTemplate, DagError> {
    t.substitute(id, expr)
}
