//! Stochastic kernel construction.
//!
//! A kernel is grown node by node from the input. At each step a primitive
//! class is drawn with probability proportional to its configured weight
//! (among classes that have at least one legal candidate), then a concrete
//! candidate is drawn uniformly within the class. Balancing mass per class
//! keeps the O(n^2) blend candidates from swamping the O(n) unary ones.

use std::collections::{HashMap, HashSet};
use std::ops::ControlFlow;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dag::{KernelTemplate, MicroDag, NodeId, PruneConfig};
use crate::matching::{match_broadcast, BroadcastMatch};
use crate::primitive::{for_each_unary_of_class, output_shape, BlendOp, PrimitiveClass, PrimitiveKind};
use crate::shape::{Constant, Dimension, Shape, VarId};

const CLASSES: usize = PrimitiveClass::ALL.len();

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("no legal kernel found in {0} attempts")]
    Exhausted(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Total node count of every kernel, input included.
    pub nodes: usize,
    pub seed: u64,
    /// Per-class weights, indexed by [`PrimitiveClass::index`].
    pub type_weights: [f64; CLASSES],
    pub max_attempts: usize,
    pub prune: PruneConfig,
}

impl SamplerConfig {
    pub fn new(nodes: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            nodes,
            seed,
            type_weights: [1.0; CLASSES],
            max_attempts: 100_000,
            prune: PruneConfig::default(),
        }
    }

    pub fn weight(&self, c: PrimitiveClass) -> f64 {
        self.type_weights[c.index()]
    }

    /// Apply `fc=2,bcast=0.5`-style overrides.
    pub fn set_weights(&mut self, spec: &str) -> Result<(), SamplerError> {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| SamplerError::InvalidConfig(format!("bad weight `{part}`")))?;
            let class = PrimitiveClass::from_name(k.trim())
                .ok_or_else(|| SamplerError::InvalidConfig(format!("unknown primitive class `{k}`")))?;
            let w: f64 = v
                .trim()
                .parse()
                .map_err(|_| SamplerError::InvalidConfig(format!("bad weight value `{v}`")))?;
            self.type_weights[class.index()] = w;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.nodes < 2 {
            return Err(SamplerError::InvalidConfig("node count must be at least 2".into()));
        }
        if self.type_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SamplerError::InvalidConfig("weights must be finite and nonnegative".into()));
        }
        if self.type_weights.iter().all(|w| *w == 0.0) {
            return Err(SamplerError::InvalidConfig("weights are all zero".into()));
        }
        if self.max_attempts == 0 {
            return Err(SamplerError::InvalidConfig("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Shared set of accepted kernel hashes.
#[derive(Debug, Default)]
pub struct DedupStore {
    seen: Mutex<HashSet<u64>>,
}

impl DedupStore {
    pub fn new() -> DedupStore {
        DedupStore::default()
    }

    /// Insert `h`; `true` if it was not present before.
    pub fn insert(&self, h: u64) -> bool {
        self.seen.lock().expect("dedup store poisoned").insert(h)
    }

    pub fn contains(&self, h: u64) -> bool {
        self.seen.lock().expect("dedup store poisoned").contains(&h)
    }

    pub fn len(&self) -> usize {
        self.seen.lock().expect("dedup store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SamplerStats {
    pub steps: u64,
    /// Steps where every class was available and no topology guard bound.
    pub calibration_steps: u64,
    /// Class choices made at those steps.
    pub class_counts: [u64; CLASSES],
    pub attempts: u64,
    /// Attempts that ran out of legal candidates.
    pub dead_ends: u64,
    pub pruned: u64,
    pub deduped: u64,
    pub accepted: u64,
}

impl SamplerStats {
    pub fn merge(&mut self, o: &SamplerStats) {
        self.steps += o.steps;
        self.calibration_steps += o.calibration_steps;
        for (a, b) in self.class_counts.iter_mut().zip(o.class_counts) {
            *a += b;
        }
        self.attempts += o.attempts;
        self.dead_ends += o.dead_ends;
        self.pruned += o.pruned;
        self.deduped += o.deduped;
        self.accepted += o.accepted;
    }
}

/// A concrete growth move.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Candidate {
    Unary {
        node: NodeId,
        kind: PrimitiveKind,
    },
    Blend {
        lhs: NodeId,
        rhs: NodeId,
        op: BlendOp,
        /// Variable to solve and its legal values; one is drawn uniformly.
        solve: Option<(VarId, Vec<Dimension>)>,
    },
}

impl Candidate {
    pub fn class(&self) -> PrimitiveClass {
        match self {
            Candidate::Unary { kind, .. } => kind.class(),
            Candidate::Blend { .. } => PrimitiveClass::Broadcast,
        }
    }
}

type MatchCache = HashMap<(Shape, Shape), Option<BroadcastMatch>>;
const MATCH_CACHE_LIMIT: usize = 200_000;

/// Candidate enumeration for one dag state.
struct Step<'a> {
    g: &'a MicroDag,
    remaining: usize,
    prune: &'a PruneConfig,
}

impl Step<'_> {
    fn is_final(&self) -> bool {
        self.remaining == 1
    }

    fn width_ok(&self, inputs: &[NodeId]) -> bool {
        self.g.width_after(inputs) <= self.remaining
    }

    fn unary_ok(&self, node: NodeId, kind: &PrimitiveKind) -> bool {
        if !self.width_ok(&[node]) || self.g.prune_edge(kind, &[node], self.prune).is_some() {
            return false;
        }
        if self.is_final() {
            let input = &self.g.nodes()[node];
            return output_shape(kind, &[input]).is_ok_and(|s| s == Shape::input());
        }
        true
    }

    fn visit_unary(&self, class: PrimitiveClass, f: &mut impl FnMut(Candidate) -> ControlFlow<()>) -> ControlFlow<()> {
        let fc_out = if self.is_final() {
            Dimension::constant(Constant::C)
        } else {
            Dimension::var(self.g.fresh_var())
        };
        for (node, s) in self.g.nodes().iter().enumerate() {
            if !self.width_ok(&[node]) {
                continue;
            }
            for_each_unary_of_class(s, class, fc_out, &mut |kind| {
                if self.unary_ok(node, &kind) {
                    f(Candidate::Unary { node, kind })
                } else {
                    ControlFlow::Continue(())
                }
            })?;
        }
        ControlFlow::Continue(())
    }

    /// Legal blends of `lhs` onto `rhs` for every op.
    fn blends(&self, lhs: NodeId, rhs: NodeId, cache: &mut MatchCache) -> Vec<Candidate> {
        if !self.width_ok(&[lhs, rhs]) {
            return Vec::new();
        }
        let (ls, rs) = (&self.g.nodes()[lhs], &self.g.nodes()[rhs]);
        if self.is_final() && *rs != Shape::input() {
            return Vec::new();
        }
        if cache.len() > MATCH_CACHE_LIMIT {
            cache.clear();
        }
        let m = cache
            .entry((ls.clone(), rs.clone()))
            .or_insert_with(|| match_broadcast(ls, rs));
        let Some(m) = m else { return Vec::new() };
        let solve = match m.solve_var {
            Some(v) => {
                let subs: Vec<Dimension> = m
                    .substitutions
                    .iter()
                    .filter(|e| self.g.substitution_is_valid(v, e))
                    .copied()
                    .collect();
                if subs.is_empty() {
                    return Vec::new();
                }
                Some((v, subs))
            }
            None => None,
        };
        BlendOp::ALL
            .into_iter()
            .filter(|op| {
                self.g
                    .prune_edge(&PrimitiveKind::Broadcast(*op), &[lhs, rhs], self.prune)
                    .is_none()
            })
            .map(|op| Candidate::Blend {
                lhs,
                rhs,
                op,
                solve: solve.clone(),
            })
            .collect()
    }

    fn visit_blends(&self, cache: &mut MatchCache, f: &mut impl FnMut(Candidate) -> ControlFlow<()>) -> ControlFlow<()> {
        let n = self.g.len();
        for i in 0..n {
            for j in 0..n {
                for c in self.blends(i, j, cache) {
                    f(c)?;
                }
            }
        }
        ControlFlow::Continue(())
    }

    fn visit(
        &self,
        class: PrimitiveClass,
        cache: &mut MatchCache,
        f: &mut impl FnMut(Candidate) -> ControlFlow<()>,
    ) -> ControlFlow<()> {
        match class {
            PrimitiveClass::Broadcast => self.visit_blends(cache, f),
            c => self.visit_unary(c, f),
        }
    }

    fn available(&self, class: PrimitiveClass, cache: &mut MatchCache) -> bool {
        self.visit(class, cache, &mut |_| ControlFlow::Break(())).is_break()
    }

    fn all_of(&self, class: PrimitiveClass, cache: &mut MatchCache) -> Vec<Candidate> {
        let mut out = Vec::new();
        let _ = self.visit(class, cache, &mut |c| {
            out.push(c);
            ControlFlow::Continue(())
        });
        out
    }
}

/// Probability of every candidate move at `g` with `remaining` nodes left
/// to add. Empty when the attempt is a dead end.
pub fn candidate_probabilities(g: &MicroDag, cfg: &SamplerConfig, remaining: usize) -> Vec<(Candidate, f64)> {
    let step = Step {
        g,
        remaining,
        prune: &cfg.prune,
    };
    let mut cache = MatchCache::new();
    let per_class: Vec<(PrimitiveClass, Vec<Candidate>)> = PrimitiveClass::ALL
        .into_iter()
        .filter(|c| cfg.weight(*c) > 0.0)
        .map(|c| (c, step.all_of(c, &mut cache)))
        .filter(|(_, cands)| !cands.is_empty())
        .collect();
    let total: f64 = per_class.iter().map(|(c, _)| cfg.weight(*c)).sum();
    let mut out = Vec::new();
    for (c, cands) in per_class {
        let each = cfg.weight(c) / total / cands.len() as f64;
        out.extend(cands.into_iter().map(|cand| (cand, each)));
    }
    out
}

/// One sampler worker with its own random stream.
pub struct Sampler<'a> {
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
    store: Option<&'a DedupStore>,
    stats: SamplerStats,
    cache: MatchCache,
}

impl<'a> Sampler<'a> {
    /// Worker `worker` draws from the stream seeded with `seed + worker`.
    /// Without a store every legal kernel is accepted.
    pub fn new(cfg: SamplerConfig, worker: u64, store: Option<&'a DedupStore>) -> Result<Sampler<'a>, SamplerError> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(worker));
        Ok(Sampler {
            cfg,
            rng,
            store,
            stats: SamplerStats::default(),
            cache: MatchCache::new(),
        })
    }

    pub fn stats(&self) -> &SamplerStats {
        &self.stats
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    /// Sample until a legal, unseen kernel of exactly `nodes` nodes appears.
    pub fn sample_kernel(&mut self) -> Result<KernelTemplate, SamplerError> {
        for _ in 0..self.cfg.max_attempts {
            self.stats.attempts += 1;
            let Some(dag) = self.attempt() else {
                self.stats.dead_ends += 1;
                continue;
            };
            if dag.prune_check(&self.cfg.prune).is_err() {
                self.stats.pruned += 1;
                continue;
            }
            let Ok(t) = KernelTemplate::finalize(dag) else {
                self.stats.dead_ends += 1;
                continue;
            };
            if let Some(store) = self.store {
                if !store.insert(t.iso_hash()) {
                    self.stats.deduped += 1;
                    continue;
                }
            }
            self.stats.accepted += 1;
            return Ok(t);
        }
        Err(SamplerError::Exhausted(self.cfg.max_attempts))
    }

    fn attempt(&mut self) -> Option<MicroDag> {
        let mut g = MicroDag::new();
        while g.len() < self.cfg.nodes {
            let remaining = self.cfg.nodes - g.len();
            let cand = self.choose(&g, remaining)?;
            g = self.apply(g, cand)?;
        }
        Some(g)
    }

    fn choose(&mut self, g: &MicroDag, remaining: usize) -> Option<Candidate> {
        self.stats.steps += 1;
        let step = Step {
            g,
            remaining,
            prune: &self.cfg.prune,
        };
        let mut available = [false; CLASSES];
        for c in PrimitiveClass::ALL {
            available[c.index()] = self.cfg.weight(c) > 0.0 && step.available(c, &mut self.cache);
        }
        let total: f64 = PrimitiveClass::ALL
            .iter()
            .filter(|c| available[c.index()])
            .map(|c| self.cfg.weight(*c))
            .sum();
        if total <= 0.0 {
            return None;
        }
        let mut r = self.rng.gen::<f64>() * total;
        let mut class = None;
        for c in PrimitiveClass::ALL {
            if !available[c.index()] {
                continue;
            }
            class = Some(c);
            r -= self.cfg.weight(c);
            if r < 0.0 {
                break;
            }
        }
        let class = class?;
        // Unconstrained: any new branch still leaves room to merge back.
        let unconstrained = g.width() < remaining && available.iter().all(|a| *a);
        if unconstrained {
            self.stats.calibration_steps += 1;
            self.stats.class_counts[class.index()] += 1;
        }
        if class == PrimitiveClass::Broadcast {
            return pick_blend(&step, &mut self.rng, &mut self.cache);
        }
        let cands = step.all_of(class, &mut self.cache);
        debug_assert!(!cands.is_empty());
        let i = self.rng.gen_range(0..cands.len());
        cands.into_iter().nth(i)
    }

    fn apply(&mut self, g: MicroDag, cand: Candidate) -> Option<MicroDag> {
        match cand {
            Candidate::Unary { node, kind } => {
                let mut g = g;
                g.push(kind, &[node]).ok()?;
                Some(g)
            }
            Candidate::Blend { lhs, rhs, op, solve } => {
                let mut g = match solve {
                    Some((v, subs)) => {
                        let e = subs[self.rng.gen_range(0..subs.len())];
                        g.substitute(v, &e).ok()?
                    }
                    None => g,
                };
                g.push(PrimitiveKind::Broadcast(op), &[lhs, rhs]).ok()?;
                Some(g)
            }
        }
    }
}

/// Uniform draw over blend candidates. Rejection sampling over ordered
/// node pairs and ops is tried first; full enumeration is the fallback.
/// Both are uniform over the legal set, so their mixture is too.
fn pick_blend(step: &Step<'_>, rng: &mut ChaCha8Rng, cache: &mut MatchCache) -> Option<Candidate> {
    let n = step.g.len();
    for _ in 0..64 {
        let lhs = rng.gen_range(0..n);
        let rhs = rng.gen_range(0..n);
        let op = BlendOp::ALL[rng.gen_range(0..BlendOp::ALL.len())];
        let found = step
            .blends(lhs, rhs, cache)
            .into_iter()
            .find(|c| matches!(c, Candidate::Blend { op: o, .. } if *o == op));
        if found.is_some() {
            return found;
        }
    }
    let cands = step.all_of(PrimitiveClass::Broadcast, cache);
    if cands.is_empty() {
        return None;
    }
    let i = rng.gen_range(0..cands.len());
    cands.into_iter().nth(i)
}

/// Sample one kernel with worker 0 of `cfg`.
pub fn sample_kernel(cfg: &SamplerConfig, store: Option<&DedupStore>) -> Result<KernelTemplate, SamplerError> {
    Sampler::new(cfg.clone(), 0, store)?.sample_kernel()
}

/// Run `jobs` workers sharing `store` until `count` kernels are accepted
/// in total. Kernels are returned grouped by worker.
pub fn sample_parallel(
    cfg: &SamplerConfig,
    jobs: usize,
    count: usize,
    store: &DedupStore,
) -> Result<(Vec<KernelTemplate>, SamplerStats), SamplerError> {
    cfg.validate()?;
    let jobs = jobs.max(1);
    let results: Vec<Result<(Vec<KernelTemplate>, SamplerStats), SamplerError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let quota = count / jobs + usize::from(w < count % jobs);
                let cfg = cfg.clone();
                s.spawn(move || {
                    let mut sampler = Sampler::new(cfg, w as u64, Some(store))?;
                    let mut out = Vec::with_capacity(quota);
                    for _ in 0..quota {
                        out.push(sampler.sample_kernel()?);
                    }
                    Ok((out, sampler.stats().clone()))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampler worker panicked"))
            .collect()
    });
    let mut kernels = Vec::with_capacity(count);
    let mut stats = SamplerStats::default();
    for r in results {
        let (k, s) = r?;
        kernels.extend(k);
        stats.merge(&s);
    }
    Ok((kernels, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::validate_theorem1;

    #[test]
    fn two_node_kernels_map_input_to_input() {
        let cfg = SamplerConfig::new(2, 3);
        let mut s = Sampler::new(cfg, 0, None).unwrap();
        for _ in 0..50 {
            let t = s.sample_kernel().unwrap();
            assert_eq!(t.dag().len(), 2);
            let e = &t.dag().edges()[0];
            assert_eq!(e.inst.inputs[0], Shape::input());
            assert_eq!(e.inst.output, Shape::input());
        }
    }

    #[test]
    fn sampled_kernels_are_legal() {
        for n in 3..=12 {
            let mut s = Sampler::new(SamplerConfig::new(n, n as u64), 0, None).unwrap();
            for _ in 0..20 {
                let t = s.sample_kernel().unwrap();
                assert_eq!(t.dag().len(), n);
                assert_eq!(t.dag().width(), 1);
                for shape in t.dag().nodes() {
                    assert!(validate_theorem1(shape).is_ok(), "{shape}");
                    assert!(shape.is_integral(), "{shape}");
                }
                for e in t.dag().edges() {
                    assert!(e.inst.is_consistent(), "{}", e.inst.kind);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_kernels() {
        let cfg = SamplerConfig::new(8, 11);
        let a = DedupStore::new();
        let b = DedupStore::new();
        let mut sa = Sampler::new(cfg.clone(), 0, Some(&a)).unwrap();
        let mut sb = Sampler::new(cfg, 0, Some(&b)).unwrap();
        for _ in 0..10 {
            assert_eq!(sa.sample_kernel().unwrap(), sb.sample_kernel().unwrap());
        }
    }

    #[test]
    fn dedup_rejects_repeats() {
        let store = DedupStore::new();
        let cfg = SamplerConfig::new(2, 1);
        let mut s = Sampler::new(cfg, 0, Some(&store)).unwrap();
        let mut hashes = HashSet::new();
        while let Ok(t) = s.sample_kernel() {
            assert!(hashes.insert(t.iso_hash()));
            if hashes.len() > 40 {
                break;
            }
        }
        // shift(h/w, +-1), five element-wise ops, fc(C), one softmax and
        // the input blended with itself (sub is pruned).
        assert_eq!(hashes.len(), 15);
    }

    #[test]
    fn guard_forces_blends() {
        let mut g = MicroDag::new();
        for f in ["ew(relu)", "ew(abs)", "ew(sin)"] {
            g.push(f.parse().unwrap(), &[0]).unwrap();
        }
        assert_eq!(g.width(), 3);
        let cfg = SamplerConfig::new(6, 0);
        let p = candidate_probabilities(&g, &cfg, 2);
        assert!(!p.is_empty());
        assert!(p.iter().all(|(c, _)| c.class() == PrimitiveClass::Broadcast));
        assert!(candidate_probabilities(&g, &cfg, 1).is_empty());
    }

    #[test]
    fn input_only_has_no_blend_mass_on_other_nodes() {
        let cfg = SamplerConfig::new(10, 0);
        let p = candidate_probabilities(&MicroDag::new(), &cfg, 9);
        let total: f64 = p.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mut mass = [0.0; CLASSES];
        for (c, w) in &p {
            mass[c.class().index()] += w;
        }
        let present: Vec<f64> = mass.iter().copied().filter(|m| *m > 0.0).collect();
        for m in &present {
            assert!((m - 1.0 / present.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_parse() {
        let mut cfg = SamplerConfig::new(5, 0);
        cfg.set_weights("fc=2, bcast=0").unwrap();
        assert_eq!(cfg.weight(PrimitiveClass::FullyConnected), 2.0);
        assert_eq!(cfg.weight(PrimitiveClass::Broadcast), 0.0);
        assert!(cfg.set_weights("conv=1").is_err());
        assert!(SamplerConfig::new(1, 0).validate().is_err());
    }

    #[test]
    fn parallel_workers_share_store() {
        let store = DedupStore::new();
        let (ks, stats) = sample_parallel(&SamplerConfig::new(6, 5), 4, 40, &store).unwrap();
        assert_eq!(ks.len(), 40);
        assert_eq!(stats.accepted, 40);
        let hashes: HashSet<u64> = ks.iter().map(|k| k.iso_hash()).collect();
        assert_eq!(hashes.len(), 40);
    }
}
