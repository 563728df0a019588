//! FLOPs and parameter accounting.

use serde::Serialize;

use crate::dag::KernelTemplate;
use crate::primitive::{cost, Cost};
use crate::shape::{Assignment, ShapeError};
use crate::solver::{BackboneSpec, Solution, SolverError, Target};

/// Sum of primitive costs of one template copy.
pub fn template_cost(t: &KernelTemplate, a: &Assignment) -> Result<Cost, ShapeError> {
    let mut total = Cost::default();
    for e in t.dag().edges() {
        total += cost(&e.inst, a)?;
    }
    Ok(total)
}

/// A dense `K_H x K_W` convolution: `params = C_in C_out K_H K_W`,
/// `flops = params H W`.
pub fn conv_baseline(t: &Target) -> Cost {
    let params = t.c_in * t.c_out * t.kh * t.kw;
    Cost {
        params,
        flops: params * t.h * t.w,
    }
}

/// Network totals with every replaceable target replaced by `t` under
/// `sol`. Targets that cannot be replaced keep their original cost.
pub fn network_cost(spec: &BackboneSpec, sol: &Solution, t: &KernelTemplate) -> Result<Cost, SolverError> {
    let mut total = Cost {
        flops: spec.non_replaced_flops,
        params: spec.non_replaced_params,
    };
    for (i, target) in spec.targets.iter().enumerate() {
        if target.is_replaceable() {
            let a = sol.assignment(spec, i)?;
            total += template_cost(t, &a)?.scaled(target.replication().copies);
        } else {
            total += target.original_cost();
        }
    }
    Ok(total)
}

/// Upper bound on end-to-end speedup when a fraction `replaceable` of the
/// work is replaced by kernels costing `kernel_frac` of the original.
pub fn ideal_speedup(replaceable: f64, kernel_frac: f64) -> f64 {
    1.0 / (1.0 - replaceable * (1.0 - kernel_frac))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetRow {
    pub name: String,
    pub replaced: bool,
    pub flops: u64,
    pub params: u64,
    pub baseline_flops: u64,
    pub baseline_params: u64,
}

impl TargetRow {
    pub fn flops_ratio(&self) -> f64 {
        self.flops as f64 / self.baseline_flops.max(1) as f64
    }

    pub fn params_ratio(&self) -> f64 {
        self.params as f64 / self.baseline_params.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub rows: Vec<TargetRow>,
    pub total_flops: u64,
    pub total_params: u64,
    pub original_flops: u64,
    pub original_params: u64,
    /// `1 / (1 - f (1 - k))` with `f` the replaceable FLOPs fraction and `k`
    /// the replaced targets' cost relative to their originals.
    pub ideal_speedup: f64,
}

pub fn report(spec: &BackboneSpec, sol: &Solution, t: &KernelTemplate) -> Result<CostReport, SolverError> {
    let mut rows = Vec::new();
    for (i, target) in spec.targets.iter().enumerate() {
        let base = target.original_cost();
        let c = if target.is_replaceable() {
            template_cost(t, &sol.assignment(spec, i)?)?.scaled(target.replication().copies)
        } else {
            base
        };
        rows.push(TargetRow {
            name: target.name.clone(),
            replaced: target.is_replaceable(),
            flops: c.flops,
            params: c.params,
            baseline_flops: base.flops,
            baseline_params: base.params,
        });
    }
    let total = network_cost(spec, sol, t)?;
    let original = spec.original_totals();
    let replaced_orig: u64 = rows.iter().filter(|r| r.replaced).map(|r| r.baseline_flops).sum();
    let replaced_new: u64 = rows.iter().filter(|r| r.replaced).map(|r| r.flops).sum();
    let f = replaced_orig as f64 / original.flops.max(1) as f64;
    let k = replaced_new as f64 / replaced_orig.max(1) as f64;
    Ok(CostReport {
        rows,
        total_flops: total.flops,
        total_params: total.params,
        original_flops: original.flops,
        original_params: original.params,
        ideal_speedup: ideal_speedup(f, k),
    })
}
