//! Reference executor for concrete kernels on small dense tensors.
//!
//! Tensors are row-major over the channel dimensions followed by the
//! spatial dimensions. Every arithmetic primitive bumps a FLOP counter with
//! the same convention as the analytical cost model.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::dag::NodeId;
use crate::matching::match_broadcast;
use crate::primitive::{Axis, FoldMode, PrimitiveKind};
use crate::shape::{Shape, ShapeError};
use crate::solver::{ConcreteKernel, ReplicationMode};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InterpError {
    #[error("shape mismatch at {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite value produced at node n{0}")]
    NonFinite(NodeId),
    #[error("missing weights for node n{node} in copy {copy}")]
    MissingWeights { node: NodeId, copy: usize },
    #[error("unsupported kernel: {0}")]
    Unsupported(String),
    #[error("bad tensor text: {0}")]
    Parse(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<DenseTensor, InterpError> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(InterpError::ShapeMismatch {
                context: "tensor data".into(),
                expected: vec![n],
                found: vec![data.len()],
            });
        }
        Ok(DenseTensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> DenseTensor {
        let n = dims.iter().product();
        DenseTensor {
            dims,
            data: vec![0.0; n],
        }
    }

    /// Entries uniform in `[-1, 1)`.
    pub fn random(dims: Vec<usize>, rng: &mut impl Rng) -> DenseTensor {
        let n = dims.iter().product();
        DenseTensor {
            dims,
            data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<DenseTensor, InterpError> {
        DenseTensor::new(dims, self.data)
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Parse whitespace-separated values into a tensor of `dims`.
    pub fn parse(text: &str, dims: Vec<usize>) -> Result<DenseTensor, InterpError> {
        let data = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| InterpError::Parse(format!("`{t}` is not a number"))))
            .collect::<Result<Vec<_>, _>>()?;
        DenseTensor::new(dims, data)
    }
}

impl fmt::Display for DenseTensor {
    /// One line per leading index, values separated by spaces.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = self.dims.last().copied().unwrap_or(1).max(1);
        for chunk in self.data.chunks(row) {
            let line: Vec<String> = chunk.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Fully-connected weights `[out, in]` per node, one map per copy.
pub type Weights = Vec<BTreeMap<NodeId, DenseTensor>>;

/// `(out, in)` sizes of every fully-connected node.
pub fn fc_sizes(k: &ConcreteKernel) -> Result<Vec<(NodeId, usize, usize)>, InterpError> {
    let mut out = Vec::new();
    for e in k.template.dag().edges() {
        if let PrimitiveKind::FullyConnected { out: d } = e.inst.kind {
            let o = d.eval(&k.assignment)? as usize;
            let i = e.inst.inputs[0].channel_product()?.eval(&k.assignment)? as usize;
            out.push((e.output, o, i));
        }
    }
    Ok(out)
}

pub fn random_weights(k: &ConcreteKernel, rng: &mut impl Rng) -> Result<Weights, InterpError> {
    let sizes = fc_sizes(k)?;
    Ok((0..k.replication.copies)
        .map(|_| {
            sizes
                .iter()
                .map(|&(node, o, i)| (node, DenseTensor::random(vec![o, i], rng)))
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub output: DenseTensor,
    /// FLOPs counted while executing, one per multiply-accumulate.
    pub flops: u64,
}

fn prod(d: &[usize]) -> usize {
    d.iter().product()
}

fn eval_dims(s: &Shape, k: &ConcreteKernel) -> Result<Vec<usize>, InterpError> {
    Ok(s.eval(&k.assignment)?)
}

/// Expected input dims of the whole (replicated) kernel.
pub fn input_dims(k: &ConcreteKernel) -> Result<Vec<usize>, InterpError> {
    let mut d = eval_dims(&Shape::input(), k)?;
    if k.replication.mode == ReplicationMode::Sum {
        d[0] *= k.replication.copies as usize;
    }
    Ok(d)
}

/// Run `k` on `input` (`[C_in, H, W]`).
pub fn execute(k: &ConcreteKernel, weights: &Weights, input: &DenseTensor) -> Result<Execution, InterpError> {
    let expected = input_dims(k)?;
    if input.dims != expected {
        return Err(InterpError::ShapeMismatch {
            context: "kernel input".into(),
            expected,
            found: input.dims.clone(),
        });
    }
    let copies = k.replication.copies as usize;
    let single = eval_dims(&Shape::input(), k)?;
    let chunk = prod(&single);
    let mut flops = 0;
    let mut outputs = Vec::with_capacity(copies);
    for copy in 0..copies {
        let x = match k.replication.mode {
            ReplicationMode::Concat => input.clone(),
            ReplicationMode::Sum => DenseTensor::new(single.clone(), input.data[copy * chunk..(copy + 1) * chunk].to_vec())?,
        };
        let w = weights.get(copy).ok_or(InterpError::MissingWeights { node: 0, copy })?;
        let (y, f) = execute_copy(k, w, copy, x)?;
        flops += f;
        outputs.push(y);
    }
    let output = match k.replication.mode {
        ReplicationMode::Concat => {
            let mut dims = single.clone();
            dims[0] *= copies;
            let data = outputs.into_iter().flat_map(|t| t.data).collect();
            DenseTensor::new(dims, data)?
        }
        ReplicationMode::Sum => {
            let mut acc = DenseTensor::zeros(single);
            for t in outputs {
                for (a, b) in acc.data.iter_mut().zip(t.data) {
                    *a += b;
                }
            }
            acc
        }
    };
    Ok(Execution { output, flops })
}

fn execute_copy(
    k: &ConcreteKernel,
    weights: &BTreeMap<NodeId, DenseTensor>,
    copy: usize,
    input: DenseTensor,
) -> Result<(DenseTensor, u64), InterpError> {
    let dag = k.template.dag();
    let mut values: Vec<Option<DenseTensor>> = vec![None; dag.len()];
    values[0] = Some(input);
    let mut flops = 0u64;
    for e in dag.edges() {
        let ins: Vec<&DenseTensor> = e
            .inputs
            .iter()
            .map(|&i| values[i].as_ref().expect("topological order"))
            .collect();
        for (t, s) in ins.iter().zip(&e.inst.inputs) {
            let want = eval_dims(s, k)?;
            if t.dims != want {
                return Err(InterpError::ShapeMismatch {
                    context: format!("input of n{}", e.output),
                    expected: want,
                    found: t.dims.clone(),
                });
            }
        }
        let out_dims = eval_dims(&e.inst.output, k)?;
        let x = ins[0];
        let out = match e.inst.kind {
            PrimitiveKind::Group { .. } => x.clone().reshape(out_dims)?,
            PrimitiveKind::Shift { axis, offset } => {
                let a = axis_index(&e.inst.inputs[0], axis)?;
                shift(x, a, offset as isize)
            }
            PrimitiveKind::Unfold { axis, insert_pos } => {
                let a = axis_index(&e.inst.inputs[0], axis)?;
                let kk = out_dims[insert_pos];
                unfold(x, a, insert_pos, kk, out_dims)
            }
            PrimitiveKind::FullyConnected { .. } => {
                let w = weights
                    .get(&e.output)
                    .ok_or(InterpError::MissingWeights { node: e.output, copy })?;
                let channels = e.inst.inputs[0].channel.len();
                let cin = prod(&x.dims[..channels]);
                let s = prod(&x.dims[channels..]);
                let o = out_dims[0];
                if w.dims != [o, cin] {
                    return Err(InterpError::ShapeMismatch {
                        context: format!("weights of n{}", e.output),
                        expected: vec![o, cin],
                        found: w.dims.clone(),
                    });
                }
                let mut y = vec![0.0; o * s];
                for oi in 0..o {
                    for ci in 0..cin {
                        let wv = w.data[oi * cin + ci];
                        for si in 0..s {
                            y[oi * s + si] += wv * x.data[ci * s + si];
                            flops += 1;
                        }
                    }
                }
                DenseTensor::new(out_dims, y)?
            }
            PrimitiveKind::ElementWise(f) => {
                flops += x.len() as u64;
                DenseTensor::new(out_dims, x.data.iter().map(|&v| f.apply(v)).collect())?
            }
            PrimitiveKind::Fold { dim, mode } => {
                let t = fold(x, dim, mode, out_dims)?;
                flops += t.len() as u64;
                t
            }
            PrimitiveKind::Softmax { first, last } => {
                flops += 3 * x.len() as u64;
                softmax(x, first, last)
            }
            PrimitiveKind::Broadcast(op) => {
                let rhs = ins[1];
                let m = match_broadcast(&e.inst.inputs[0], &e.inst.inputs[1])
                    .ok_or_else(|| InterpError::Unsupported(format!("no broadcast matching at n{}", e.output)))?;
                let (p, s) = (m.prefix.len(), m.suffix.len());
                let pre = prod(&x.dims[..p]);
                let suf = prod(&x.dims[x.dims.len() - s..]);
                let lc = prod(&x.dims[p..x.dims.len() - s]);
                let rc = prod(&rhs.dims[p..rhs.dims.len() - s]);
                if lc == 0 || rc % lc != 0 {
                    return Err(InterpError::ShapeMismatch {
                        context: format!("broadcast cores at n{}", e.output),
                        expected: vec![rc],
                        found: vec![lc],
                    });
                }
                let mut y = vec![0.0; rhs.len()];
                for pi in 0..pre {
                    for r in 0..rc {
                        for si in 0..suf {
                            let l = x.data[(pi * lc + r % lc) * suf + si];
                            let ri = (pi * rc + r) * suf + si;
                            y[ri] = op.apply(l, rhs.data[ri]);
                        }
                    }
                }
                flops += y.len() as u64;
                DenseTensor::new(out_dims, y)?
            }
        };
        if out.data.iter().any(|v| !v.is_finite()) {
            return Err(InterpError::NonFinite(e.output));
        }
        values[e.output] = Some(out);
    }
    let out = values[k.template.output()].take().expect("output computed");
    Ok((out, flops))
}

fn axis_index(s: &Shape, axis: Axis) -> Result<usize, InterpError> {
    axis.position(s)
        .map(|p| s.channel.len() + p)
        .ok_or_else(|| InterpError::Unsupported(format!("axis {axis:?} absent from {s}")))
}

/// `out[.., i, ..] = x[.., i + offset, ..]`, zero outside.
fn shift(x: &DenseTensor, a: usize, offset: isize) -> DenseTensor {
    let outer = prod(&x.dims[..a]);
    let n = x.dims[a];
    let inner = prod(&x.dims[a + 1..]);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..n {
            let src = i as isize + offset;
            if src < 0 || src >= n as isize {
                continue;
            }
            let src = src as usize;
            y[(o * n + i) * inner..(o * n + i + 1) * inner]
                .copy_from_slice(&x.data[(o * n + src) * inner..(o * n + src + 1) * inner]);
        }
    }
    DenseTensor {
        dims: x.dims.clone(),
        data: y,
    }
}

/// Insert a window dim of size `kk` at `ip`; entry `k` reads the input at
/// spatial offset `k - kk / 2` along axis `a`, zero padded.
fn unfold(x: &DenseTensor, a: usize, ip: usize, kk: usize, out_dims: Vec<usize>) -> DenseTensor {
    let pre = prod(&x.dims[..ip]);
    let mid = prod(&x.dims[ip..a]);
    let n = x.dims[a];
    let post = prod(&x.dims[a + 1..]);
    let half = (kk / 2) as isize;
    let mut y = vec![0.0; pre * kk * mid * n * post];
    for p in 0..pre {
        for k in 0..kk {
            for m in 0..mid {
                for i in 0..n {
                    let src = i as isize + k as isize - half;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    let dst = (((p * kk + k) * mid + m) * n + i) * post;
                    let from = ((p * mid + m) * n + src as usize) * post;
                    y[dst..dst + post].copy_from_slice(&x.data[from..from + post]);
                }
            }
        }
    }
    DenseTensor { dims: out_dims, data: y }
}

fn fold(x: &DenseTensor, a: usize, mode: FoldMode, out_dims: Vec<usize>) -> Result<DenseTensor, InterpError> {
    let outer = prod(&x.dims[..a]);
    let n = x.dims[a];
    let inner = prod(&x.dims[a + 1..]);
    let mut y = vec![0.0; outer * inner];
    for o in 0..outer {
        for z in 0..inner {
            let vals = (0..n).map(|i| x.data[(o * n + i) * inner + z]);
            y[o * inner + z] = match mode {
                FoldMode::Avg => vals.sum::<f64>() / n as f64,
                FoldMode::Max => vals.fold(f64::NEG_INFINITY, f64::max),
            };
        }
    }
    DenseTensor::new(out_dims, y)
}

fn softmax(x: &DenseTensor, first: usize, last: usize) -> DenseTensor {
    let outer = prod(&x.dims[..first]);
    let block = prod(&x.dims[first..=last]);
    let inner = prod(&x.dims[last + 1..]);
    let mut y = x.data.clone();
    for o in 0..outer {
        for z in 0..inner {
            let idx = |b: usize| (o * block + b) * inner + z;
            let m = (0..block).map(|b| x.data[idx(b)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..block).map(|b| (x.data[idx(b)] - m).exp()).sum();
            for b in 0..block {
                y[idx(b)] = (x.data[idx(b)] - m).exp() / sum;
            }
        }
    }
    DenseTensor {
        dims: x.dims.clone(),
        data: y,
    }
}

/// Reference convolutions used as ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Oracle {
    DirectConv,
    GroupedConv,
    DepthwiseConv,
}

impl Oracle {
    pub fn name(self) -> &'static str {
        match self {
            Oracle::DirectConv => "direct_conv",
            Oracle::GroupedConv => "grouped_conv",
            Oracle::DepthwiseConv => "depthwise_conv",
        }
    }

    pub fn from_name(s: &str) -> Option<Oracle> {
        [Oracle::DirectConv, Oracle::GroupedConv, Oracle::DepthwiseConv]
            .into_iter()
            .find(|o| o.name() == s)
    }
}

/// Zero-padded, centered cross-correlation with `groups` channel groups.
/// `weight` is `[C_out, C_in / groups, K_H, K_W]`.
pub fn grouped_conv(input: &DenseTensor, weight: &DenseTensor, groups: usize) -> DenseTensor {
    let (cin, h, w) = (input.dims[0], input.dims[1], input.dims[2]);
    let (cout, cpg, kh, kw) = (weight.dims[0], weight.dims[1], weight.dims[2], weight.dims[3]);
    assert_eq!(cpg * groups, cin, "weight does not match input channels");
    let opg = cout / groups;
    let mut out = DenseTensor::zeros(vec![cout, h, w]);
    for o in 0..cout {
        let g = o / opg;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for c in 0..cpg {
                    let ci = g * cpg + c;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let sy = y as isize + dy as isize - (kh / 2) as isize;
                            let sx = x as isize + dx as isize - (kw / 2) as isize;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let iv = input.data[(ci * h + sy as usize) * w + sx as usize];
                            acc += weight.data[((o * cpg + c) * kh + dy) * kw + dx] * iv;
                        }
                    }
                }
                out.data[(o * h + y) * w + x] = acc;
            }
        }
    }
    out
}

pub fn direct_conv(input: &DenseTensor, weight: &DenseTensor) -> DenseTensor {
    grouped_conv(input, weight, 1)
}

pub fn depthwise_conv(input: &DenseTensor, weight: &DenseTensor) -> DenseTensor {
    grouped_conv(input, weight, input.dims[0])
}

/// Compare a decoupled convolution kernel with a reference convolution.
///
/// The kernel must contain exactly one fully-connected primitive whose input
/// channels are laid out as channel dims (multiplying to `C`) followed by
/// `KH, KW`. Random convolution weights are drawn per trial, embedded into
/// that fully-connected layer (block diagonal for grouped variants) and
/// both paths run on the same random input. Returns the max abs error.
pub fn equivalence_check(
    k: &ConcreteKernel,
    oracle: Oracle,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<f64, InterpError> {
    let fcs: Vec<_> = k
        .template
        .dag()
        .edges()
        .iter()
        .filter(|e| e.inst.kind.has_weights())
        .collect();
    let [fc] = fcs.as_slice() else {
        return Err(InterpError::Unsupported("expected exactly one fully-connected primitive".into()));
    };
    let a = &k.assignment;
    let in_dims = fc.inst.inputs[0].eval_channel(a)?;
    let c = eval_dims(&Shape::input(), k)?[0];
    if in_dims.len() < 3 || prod(&in_dims[..in_dims.len() - 2]) != c {
        return Err(InterpError::Unsupported(format!(
            "fully-connected input {} is not laid out as channels, KH, KW",
            fc.inst.inputs[0]
        )));
    }
    let (kh, kw) = (in_dims[in_dims.len() - 2], in_dims[in_dims.len() - 1]);
    let groups = match oracle {
        Oracle::DirectConv => 1,
        Oracle::GroupedConv => a.constant(crate::shape::Constant::G).unwrap_or(1) as usize,
        Oracle::DepthwiseConv => c,
    };
    if c % groups != 0 {
        return Err(InterpError::Unsupported(format!("{groups} groups do not divide {c} channels")));
    }
    let cpg = c / groups;
    let input_dims = input_dims(k)?;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let conv_w = DenseTensor::random(vec![c, cpg, kh, kw], rng);
        let mut fc_w = DenseTensor::zeros(vec![c, c * kh * kw]);
        for o in 0..c {
            let g = o / (c / groups);
            for j in 0..cpg {
                let ci = g * cpg + j;
                for y in 0..kh {
                    for x in 0..kw {
                        fc_w.data[o * c * kh * kw + (ci * kh + y) * kw + x] =
                            conv_w.data[((o * cpg + j) * kh + y) * kw + x];
                    }
                }
            }
        }
        let weights: Weights = (0..k.replication.copies)
            .map(|_| BTreeMap::from([(fc.output, fc_w.clone())]))
            .collect();
        let input = DenseTensor::random(input_dims.clone(), rng);
        let got = execute(k, &weights, &input)?.output;
        let want = grouped_conv(&input, &conv_w, groups);
        if got.dims != want.dims {
            return Err(InterpError::ShapeMismatch {
                context: "oracle output".into(),
                expected: want.dims,
                found: got.dims,
            });
        }
        worst = worst.max(got.max_abs_diff(&want));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{KernelTemplate, MicroDag};
    use crate::shape::{Assignment, Constant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kernel(ops: &[(&str, &[usize])], a: Assignment) -> ConcreteKernel {
        let mut g = MicroDag::new();
        for (k, ins) in ops {
            g.push(k.parse().unwrap(), ins).unwrap();
        }
        ConcreteKernel::new(KernelTemplate::finalize(g).unwrap(), a)
    }

    fn small(c: u64, hw: u64, k: u64, g: u64) -> Assignment {
        Assignment::new()
            .with(Constant::C, c)
            .with(Constant::H, hw)
            .with(Constant::W, hw)
            .with(Constant::KH, k)
            .with(Constant::KW, k)
            .with(Constant::G, g)
    }

    #[test]
    fn shift_moves_rows() {
        let k = kernel(&[("shift(h,+1)", &[0])], small(1, 3, 3, 1));
        let input = DenseTensor::new(vec![1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let out = execute(&k, &vec![BTreeMap::new()], &input).unwrap();
        assert_eq!(out.output.data(), &[3., 4., 5., 6., 7., 8., 0., 0., 0.]);
        assert_eq!(out.flops, 0);
    }

    #[test]
    fn box_filter_matches_convolution() {
        let k = kernel(
            &[("unfold(h)", &[0]), ("unfold(w)", &[1]), ("fc(C)", &[2])],
            small(2, 5, 3, 1),
        );
        let mut input = DenseTensor::zeros(vec![2, 5, 5]);
        input.data[12] = 1.0;
        let mut fc = DenseTensor::zeros(vec![2, 18]);
        for o in 0..2 {
            for j in 0..9 {
                fc.data[o * 18 + o * 9 + j] = 1.0;
            }
        }
        let out = execute(&k, &vec![BTreeMap::from([(3, fc)])], &input).unwrap();
        let conv_w = DenseTensor::new(
            vec![2, 2, 3, 3],
            (0..36).map(|i| if (i / 9) % 3 == 0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let want = direct_conv(&input, &conv_w);
        assert!(out.output.max_abs_diff(&want) < 1e-12);
        // A one-hot centre pixel spreads to its 3x3 neighbourhood in channel 0.
        assert_eq!(out.output.data()[..25].iter().sum::<f64>(), 9.0);
    }

    #[test]
    fn grouped_and_depthwise_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grouped = kernel(
            &[("group(G)", &[0]), ("unfold(h)", &[1]), ("unfold(w)", &[2]), ("fc(C)", &[3])],
            small(4, 6, 3, 2),
        );
        assert!(equivalence_check(&grouped, Oracle::GroupedConv, 5, &mut rng).unwrap() <= 1e-9);
        let dw = kernel(
            &[("group(each)", &[0]), ("unfold(h)", &[1]), ("unfold(w)", &[2]), ("fc(C)", &[3])],
            small(4, 6, 3, 1),
        );
        assert!(equivalence_check(&dw, Oracle::DepthwiseConv, 5, &mut rng).unwrap() <= 1e-9);
    }

    #[test]
    fn group_then_identity_fc_is_identity() {
        let k = kernel(&[("group(G)", &[0]), ("fc(C)", &[1])], small(4, 2, 3, 2));
        let mut fc = DenseTensor::zeros(vec![4, 4]);
        for i in 0..4 {
            fc.data[i * 4 + i] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DenseTensor::random(vec![4, 2, 2], &mut rng);
        let out = execute(&k, &vec![BTreeMap::from([(2, fc)])], &x).unwrap();
        assert_eq!(out.output, x);
    }

    #[test]
    fn broadcast_replicates_lhs() {
        // lhs [G | H, W] broadcast over rhs [G, C/G | H, W]
        let k = kernel(
            &[
                ("group(G)", &[0]),
                ("fold(dim=1,avg)", &[1]),
                ("bcast(mul)", &[2, 1]),
                ("fc(C)", &[3]),
            ],
            small(4, 1, 3, 2),
        );
        let input = DenseTensor::new(vec![4, 1, 1], vec![1., 3., 5., 7.]).unwrap();
        let mut fc = DenseTensor::zeros(vec![4, 4]);
        for i in 0..4 {
            fc.data[i * 4 + i] = 1.0;
        }
        let out = execute(&k, &vec![BTreeMap::from([(4, fc)])], &input).unwrap();
        // group means: 2 and 6.
        assert_eq!(out.output.data(), &[2., 6., 30., 42.]);
    }

    #[test]
    fn replication_modes() {
        use crate::solver::{Replication, ReplicationMode};
        let mut k = kernel(&[("ew(neg)", &[0])], small(2, 1, 3, 1));
        k.replication = Replication {
            copies: 2,
            mode: ReplicationMode::Sum,
        };
        let input = DenseTensor::new(vec![4, 1, 1], vec![1., 2., 3., 4.]).unwrap();
        let out = execute(&k, &vec![BTreeMap::new(), BTreeMap::new()], &input).unwrap();
        assert_eq!(out.output.data(), &[-4., -6.]);
        k.replication.mode = ReplicationMode::Concat;
        let input = DenseTensor::new(vec![2, 1, 1], vec![1., 2.]).unwrap();
        let out = execute(&k, &vec![BTreeMap::new(), BTreeMap::new()], &input).unwrap();
        assert_eq!(out.output.data(), &[-1., -2., -1., -2.]);
        assert_eq!(out.flops, 4);
    }

    #[test]
    fn wrong_input_dims() {
        let k = kernel(&[("ew(neg)", &[0])], small(2, 1, 3, 1));
        let input = DenseTensor::zeros(vec![3, 1, 1]);
        assert!(matches!(
            execute(&k, &vec![BTreeMap::new()], &input),
            Err(InterpError::ShapeMismatch { .. })
        ));
    }
}
