use std::collections::{BTreeSet, HashMap};

use canvas_core::harness::{prune_decision, AccuracyCurve, Decision, PruneRule};
use canvas_core::interp::{execute, random_weights, DenseTensor};
use canvas_core::matching::match_broadcast;
use canvas_core::primitive::{BlendOp, FoldMode, PrimitiveClass, PrimitiveKind};
use canvas_core::sampler::{DedupStore, Sampler, SamplerConfig};
use canvas_core::shape::{enumerate_factors, validate_theorem1};
use canvas_core::solver::ConcreteKernel;
use canvas_core::{Assignment, Constant, Dimension, KernelTemplate, MicroDag, Shape, VarId};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Every `(C, G, KH, KW)` with small values and `G | C`.
fn small_assignments() -> Vec<Assignment> {
    let mut out = Vec::new();
    for c in 1..=12u64 {
        for g in (1..=c).filter(|g| c % g == 0) {
            for kh in 1..=5 {
                for kw in 1..=5 {
                    out.push(
                        Assignment::new()
                            .with(Constant::C, c)
                            .with(Constant::G, g)
                            .with(Constant::KH, kh)
                            .with(Constant::KW, kw)
                            .with(Constant::H, 7)
                            .with(Constant::W, 7),
                    );
                }
            }
        }
    }
    out
}

fn pow(c: Constant, e: i16) -> Dimension {
    Dimension::constant(c).raw_pow(e).unwrap()
}

fn monomial(lit: u64, c: i16, g: i16, kh: i16, kw: i16) -> Dimension {
    [pow(Constant::C, c), pow(Constant::G, g), pow(Constant::KH, kh), pow(Constant::KW, kw)]
        .iter()
        .fold(Dimension::literal(lit), |acc, d| acc.raw_mul(d).unwrap())
}

/// Candidate monomials within the exponent ranges that can divide `d`.
fn monomial_domain(d: &Dimension) -> Vec<Dimension> {
    let (lit, _) = d.literal_part();
    let ce = d.exponent(Constant::C).max(0);
    let ge = d.exponent(Constant::G).abs() + ce;
    let mut out = Vec::new();
    for l in (1..=lit).filter(|l| lit % l == 0) {
        for c in 0..=ce {
            for g in -ge..=ge {
                for kh in 0..=d.exponent(Constant::KH).max(0) {
                    for kw in 0..=d.exponent(Constant::KW).max(0) {
                        out.push(monomial(l, c, g, kh, kw));
                    }
                }
            }
        }
    }
    out
}

fn divides_everywhere(f: &Dimension, d: &Dimension, grid: &[Assignment]) -> bool {
    let Ok(q) = d.raw_div(f) else { return false };
    grid.iter().all(|a| f.eval(a).is_ok() && q.eval(a).is_ok())
}

fn constant_dim() -> impl Strategy<Value = Dimension> {
    (1u64..=4, 0i16..=2, 0i16..=1, 0i16..=1, 0i16..=1, any::<bool>()).prop_filter_map(
        "legal",
        |(lit, c, kh, kw, g, split)| {
            // `split` moves one G from the numerator into a C/G pair.
            let d = if split && c > 0 {
                monomial(lit, c, g - 1, kh, kw)
            } else {
                monomial(lit, c, g, kh, kw)
            };
            d.is_legal().then_some(d)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    /// Every reported divisor divides on the whole grid, and every monomial
    /// that divides on the whole grid is reported.
    #[test]
    fn factors_are_sound_and_complete(d in constant_dim()) {
        let grid = small_assignments();
        prop_assume!(grid.iter().all(|a| d.eval(a).is_ok()));
        let got = enumerate_factors(&d);
        for f in &got {
            prop_assert!(divides_everywhere(f, &d, &grid), "{f} does not divide {d}");
        }
        let want: BTreeSet<Dimension> = monomial_domain(&d)
            .into_iter()
            .filter(|f| f.is_legal() && divides_everywhere(f, &d, &grid))
            .collect();
        prop_assert_eq!(got, want);
    }

    /// Substitutions offered by the matcher are exactly the monomials that
    /// make the broadcast ratio whole on every small assignment.
    #[test]
    fn broadcast_substitutions_match_brute_force(
        rhs in prop::collection::vec(constant_dim(), 1..=3),
        lhs_extra in prop::option::of(prop_oneof![Just(Constant::KH), Just(Constant::KW)]),
    ) {
        let x = VarId(1);
        let mut lhs_channel = vec![Dimension::var(x)];
        if let Some(c) = lhs_extra {
            lhs_channel.push(Dimension::constant(c));
        }
        let spatial = vec![Dimension::constant(Constant::H), Dimension::constant(Constant::W)];
        let lhs = Shape::new(lhs_channel.clone(), spatial.clone());
        let rhs_shape = Shape::new(rhs.clone(), spatial);
        prop_assume!(validate_theorem1(&rhs_shape).is_ok());
        let grid = small_assignments();
        prop_assume!(rhs.iter().all(|d| grid.iter().all(|a| d.eval(a).is_ok())));

        let got = match_broadcast(&lhs, &rhs_shape)
            .filter(|m| m.solve_var == Some(x))
            .map(|m| m.substitutions)
            .unwrap_or_default();

        let rhs_size = rhs.iter().fold(Dimension::one(), |acc, d| acc.raw_mul(d).unwrap());
        let rest = lhs_channel[1..].iter().fold(Dimension::one(), |acc, d| acc.raw_mul(d).unwrap());
        let Ok(target) = rhs_size.raw_div(&rest) else { return Ok(()) };
        let want: BTreeSet<Dimension> = monomial_domain(&rhs_size)
            .into_iter()
            .filter(|f| f.is_legal())
            .filter(|f| {
                let Ok(l) = rest.raw_mul(f) else { return false };
                divides_everywhere(&l, &rhs_size, &grid) && divides_everywhere(f, &target, &grid)
            })
            .collect();
        // Identical cores leave nothing to solve.
        if lhs_extra.is_some() && rhs.last() == lhs_channel.last() {
            return Ok(());
        }
        prop_assert_eq!(got, want);
    }

    /// A pointwise-lower curve is pruned no later.
    #[test]
    fn prune_is_monotone(
        best in prop::collection::vec(0.05f64..1.0, 1..12),
        cand in prop::collection::vec(0.0f64..1.0, 1..12),
        drops in prop::collection::vec(0.0f64..0.3, 12),
        theta in 0.0f64..1.0,
    ) {
        let n = best.len().min(cand.len()) as u32;
        let mut rule = PruneRule::new(theta);
        rule.offer(&AccuracyCurve::from_points((1..=n).map(|e| (e, best[e as usize - 1]))));
        let hi = AccuracyCurve::from_points((1..=n).map(|e| (e, cand[e as usize - 1])));
        let lo = AccuracyCurve::from_points((1..=n).map(|e| (e, (cand[e as usize - 1] - drops[e as usize - 1]).max(0.0))));
        let first = |c: &AccuracyCurve| (1..=n).find(|&e| matches!(prune_decision(&rule, c, e, n), Decision::Prune { .. }));
        if let Some(e) = first(&hi) {
            let l = first(&lo);
            prop_assert!(l.is_some_and(|l| l <= e), "lower curve pruned at {l:?}, upper at {e}");
        }
    }
}

#[test]
fn sampled_shapes_are_legal() {
    for nodes in 3..=12 {
        let mut s = Sampler::new(SamplerConfig::new(nodes, 1000 + nodes as u64), 0, None).unwrap();
        for _ in 0..100 {
            let t = s.sample_kernel().unwrap();
            for shape in t.dag().nodes() {
                assert!(validate_theorem1(shape).is_ok(), "{shape}");
            }
            assert_eq!(t.dag().node(t.output()), Some(&Shape::input()));
        }
    }
}

/// Text of `t` under edge order `order`, with nodes and variables renamed by
/// first appearance.
fn canonical_text(t: &KernelTemplate, order: &[usize]) -> String {
    let dag = t.dag();
    let mut node_map: HashMap<usize, usize> = HashMap::from([(0, 0)]);
    for (i, &e) in order.iter().enumerate() {
        node_map.insert(dag.edges()[e].output, i + 1);
    }
    let mut text = String::new();
    for &e in order {
        let edge = &dag.edges()[e];
        let ins: Vec<String> = edge.inputs.iter().map(|i| format!("n{}", node_map[i])).collect();
        text.push_str(&format!("{} ({}) -> {} ; ", edge.inst.kind, ins.join(","), edge.inst.output));
    }
    rename_vars(&text)
}

fn rename_vars(s: &str) -> String {
    let mut names: HashMap<String, usize> = HashMap::new();
    let mut out = String::new();
    let chars: Vec<char> = s.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let prev_alpha = i > 0 && chars[i - 1].is_ascii_alphanumeric();
        if chars[i] == 'x' && !prev_alpha && i + 1 < chars.len() && chars[i + 1].is_ascii_digit() {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
            let name: String = chars[i..j].iter().collect();
            let next = names.len() + 1;
            let k = *names.entry(name).or_insert(next);
            out.push_str(&format!("v{k}"));
            i = j;
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }
    out
}

/// Edge orders in which every edge comes after the producers of its inputs.
fn topological_orders(t: &KernelTemplate) -> Vec<Vec<usize>> {
    let edges = t.dag().edges();
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut used = vec![false; edges.len()];
    fn rec(edges: &[canvas_core::dag::Edge], cur: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == edges.len() {
            out.push(cur.clone());
            return;
        }
        for e in 0..edges.len() {
            if used[e] {
                continue;
            }
            let ready = edges[e]
                .inputs
                .iter()
                .all(|&i| i == 0 || cur.iter().any(|&p| edges[p].output == i));
            if ready {
                used[e] = true;
                cur.push(e);
                rec(edges, cur, used, out);
                cur.pop();
                used[e] = false;
            }
        }
    }
    rec(edges, &mut cur, &mut used, &mut out);
    out
}

/// Brute-force canonical form: the least text over all topological orders.
fn canonical_form(t: &KernelTemplate) -> String {
    topological_orders(t)
        .iter()
        .map(|o| canonical_text(t, o))
        .min()
        .unwrap()
}

fn rebuild(t: &KernelTemplate, order: &[usize]) -> KernelTemplate {
    let dag = t.dag();
    let mut map: HashMap<usize, usize> = HashMap::from([(0, 0)]);
    let mut g = MicroDag::new();
    for &e in order {
        let edge = &dag.edges()[e];
        let ins: Vec<usize> = edge.inputs.iter().map(|i| map[i]).collect();
        let id = g.push(edge.inst.kind, &ins).unwrap();
        map.insert(edge.output, id);
    }
    KernelTemplate::finalize(g).unwrap()
}

#[test]
fn iso_hash_agrees_with_brute_force_isomorphism() {
    let mut templates = Vec::new();
    for nodes in 2..=6 {
        let mut s = Sampler::new(SamplerConfig::new(nodes, 77 + nodes as u64), 0, None).unwrap();
        for _ in 0..60 {
            templates.push(s.sample_kernel().unwrap());
        }
    }
    let forms: Vec<String> = templates.iter().map(canonical_form).collect();
    let hashes: Vec<u64> = templates.iter().map(|t| t.iso_hash()).collect();
    for (t, h) in templates.iter().zip(&hashes) {
        for order in topological_orders(t) {
            assert_eq!(rebuild(t, &order).iso_hash(), *h);
        }
    }
    let mut checked = 0;
    for i in 0..templates.len() {
        for j in i + 1..templates.len() {
            assert_eq!(
                hashes[i] == hashes[j],
                forms[i] == forms[j],
                "hash and isomorphism disagree:\n{}\n{}",
                forms[i],
                forms[j]
            );
            checked += 1;
        }
    }
    assert!(checked > 40_000);
}

#[test]
fn frozen_hashes() {
    assert_eq!(MicroDag::default().iso_hash(), FROZEN_EMPTY);
    assert_eq!(MicroDag::new().iso_hash(), FROZEN_INPUT_ONLY);
}

const FROZEN_EMPTY: u64 = 10417057808630509766;
const FROZEN_INPUT_ONLY: u64 = 14698588036726165965;

fn is_linear(t: &KernelTemplate) -> bool {
    t.dag().edges().iter().all(|e| match e.inst.kind {
        PrimitiveKind::ElementWise(_) | PrimitiveKind::Softmax { .. } => false,
        PrimitiveKind::Fold { mode, .. } => mode == FoldMode::Avg,
        PrimitiveKind::Broadcast(op) => matches!(op, BlendOp::Add | BlendOp::Sub),
        _ => true,
    })
}

fn small(t: KernelTemplate) -> ConcreteKernel {
    let mut a = Assignment::new()
        .with(Constant::C, 4)
        .with(Constant::H, 5)
        .with(Constant::W, 5)
        .with(Constant::KH, 3)
        .with(Constant::KW, 3)
        .with(Constant::G, 2);
    for v in t.free_vars() {
        a.set_var(*v, 4);
    }
    ConcreteKernel::new(t, a)
}

#[test]
fn linear_kernels_are_linear() {
    let mut cfg = SamplerConfig::new(6, 5);
    cfg.set_weights("ew=0,softmax=0").unwrap();
    let store = DedupStore::new();
    let mut s = Sampler::new(cfg, 0, Some(&store)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tested = 0;
    while tested < 40 {
        let t = s.sample_kernel().unwrap();
        if !is_linear(&t) {
            continue;
        }
        let k = small(t);
        if k.check().is_err() {
            continue;
        }
        let w = random_weights(&k, &mut rng).unwrap();
        let dims = vec![4, 5, 5];
        let x = DenseTensor::random(dims.clone(), &mut rng);
        let y = DenseTensor::random(dims.clone(), &mut rng);
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let mix = DenseTensor::new(dims, mix).unwrap();
        let fx = execute(&k, &w, &x).unwrap().output;
        let fy = execute(&k, &w, &y).unwrap().output;
        let fm = execute(&k, &w, &mix).unwrap().output;
        let want: Vec<f64> = fx.data().iter().zip(fy.data()).map(|(p, q)| a * p + b * q).collect();
        let want = DenseTensor::new(fm.dims().to_vec(), want).unwrap();
        let scale = want.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(fm.max_abs_diff(&want) <= 1e-9 * scale);
        tested += 1;
    }
}

#[test]
fn class_weights_zero_exclude_class() {
    let mut cfg = SamplerConfig::new(8, 2);
    cfg.set_weights("fc=0").unwrap();
    let mut s = Sampler::new(cfg, 0, None).unwrap();
    for _ in 0..50 {
        let t = s.sample_kernel().unwrap();
        assert!(t
            .dag()
            .edges()
            .iter()
            .all(|e| e.inst.kind.class() != PrimitiveClass::FullyConnected));
    }
}
