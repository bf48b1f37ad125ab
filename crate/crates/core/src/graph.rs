//! Eager tape: every op evaluates on insertion, records its inputs, and can be
//! replayed after a leaf changes.

use crate::error::{Result, ScdError};
use crate::kernels as k;
use crate::losses::{self, ChangeLabel, Hinge};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Abs,
    Softplus,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Conv2d { stride: usize, padding: usize },
    Upsample { factor: usize },
    Gap,
    Gmp,
    ChannelMean,
    ChannelMax,
    Pointwise(Pointwise),
    Concat,
    Slice { start: usize, len: usize },
    Add,
    Sub,
    Mul,
    Affine { a: f64, b: f64 },
    Sum,
    Mean,
    Cosine,
    Consistency { labels: Vec<ChangeLabel>, margin: f64, hinge: Hinge, count: usize },
    SemanticCe { labels: Vec<u8>, ignore: u8, count: usize },
    ChangeBce { targets: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor4,
}

/// Recorded computation with cached forward values and named parameter leaves.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
}

/// Parameter gradients plus summary statistics.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub grads: Vec<(String, Tensor4)>,
    pub max_abs_grad: f64,
    pub nonfinite_count: usize,
}

impl GradReport {
    pub fn get(&self, name: &str) -> Option<&Tensor4> {
        self.grads.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(|(_, g)| g.norm_sq()).sum::<f64>().sqrt()
    }

    pub(crate) fn from_grads(grads: Vec<(String, Tensor4)>) -> Self {
        let max_abs_grad = grads.iter().fold(0.0f64, |m, (_, g)| m.max(g.max_abs()));
        let nonfinite_count = grads.iter().map(|(_, g)| g.count_nonfinite()).sum();
        Self { grads, max_abs_grad, nonfinite_count }
    }
}

fn eval(op: &Op, xs: &[&Tensor4]) -> Result<Tensor4> {
    Ok(match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Conv2d { stride, padding } => k::conv2d(xs[0], xs[1], xs.get(2).copied(), *stride, *padding)?,
        Op::Upsample { factor } => k::upsample(xs[0], *factor)?,
        Op::Gap => k::global_avg_pool(xs[0]),
        Op::Gmp => k::global_max_pool(xs[0]),
        Op::ChannelMean => k::channel_mean(xs[0]),
        Op::ChannelMax => k::channel_max(xs[0]),
        Op::Pointwise(p) => xs[0].map(|v| match p {
            Pointwise::Relu => v.max(0.0),
            Pointwise::Sigmoid => losses::sigmoid(v),
            Pointwise::Abs => v.abs(),
            Pointwise::Softplus => losses::softplus(v),
        }),
        Op::Concat => k::concat_channels(xs)?,
        Op::Slice { start, len } => k::slice_channels(xs[0], *start, *len)?,
        Op::Add => k::broadcast_binary(xs[0], xs[1], |a, b| a + b)?,
        Op::Sub => k::broadcast_binary(xs[0], xs[1], |a, b| a - b)?,
        Op::Mul => k::broadcast_binary(xs[0], xs[1], |a, b| a * b)?,
        Op::Affine { a, b } => xs[0].map(|v| a * v + b),
        Op::Sum => Tensor4::scalar(xs[0].sum()),
        Op::Mean => Tensor4::scalar(xs[0].sum() / xs[0].len() as f64),
        Op::Cosine => k::cosine_parts(xs[0], xs[1])?.cos,
        Op::Consistency { labels, margin, hinge, count } => {
            let total: f64 = xs[0]
                .data()
                .iter()
                .zip(labels)
                .map(|(&c, &y)| losses::consistency_term(c, y, *margin, *hinge))
                .sum();
            Tensor4::scalar(total / *count as f64)
        }
        Op::SemanticCe { labels, ignore, count } => {
            let x = xs[0];
            let (c, hw) = (x.c(), x.h() * x.w());
            let mut total = 0.0;
            for (k, &l) in labels.iter().enumerate() {
                if l == *ignore {
                    continue;
                }
                let (i, p) = (k / hw, k % hw);
                let logit = |ch: usize| x.data()[(i * c + ch) * hw + p];
                let mx = (0..c).map(logit).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..c).map(|ch| (logit(ch) - mx).exp()).sum::<f64>().ln();
                total += lse - logit(l as usize);
            }
            Tensor4::scalar(total / *count as f64)
        }
        Op::ChangeBce { targets } => {
            let total: f64 = xs[0].data().iter().zip(targets).map(|(&x, &t)| losses::bce_with_logit(x, t)).sum();
            Tensor4::scalar(total / targets.len() as f64)
        }
    })
}

/// Reduce a broadcast gradient back onto an input of shape `s`.
fn unbroadcast(g: &Tensor4, s: [usize; 4], other: [usize; 4], f: impl Fn(usize, usize, usize) -> f64) -> Tensor4 {
    let mut out = Tensor4::zeros(s);
    let od = out.data_mut();
    k::broadcast_walk(s, other, g.shape(), |ko, ia, ib| od[ia] += f(ko, ia, ib));
    out
}

fn grad(op: &Op, xs: &[&Tensor4], out: &Tensor4, g: &Tensor4, want: &[bool]) -> Vec<Option<Tensor4>> {
    let one = |t: Tensor4| vec![Some(t)];
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { stride, padding } => {
            let w = [want[0], want[1], want.get(2).copied().unwrap_or(false)];
            let (gx, gk, gb) = k::conv2d_backward(xs[0], xs[1], g, *stride, *padding, w);
            let mut v = vec![gx, gk];
            if xs.len() == 3 {
                v.push(gb);
            }
            v
        }
        Op::Upsample { factor } => one(k::upsample_backward(g, xs[0].shape(), *factor)),
        Op::Gap => {
            let (c, hw) = (xs[0].c(), (xs[0].h() * xs[0].w()) as f64);
            one(Tensor4::from_fn(xs[0].shape(), |[i, ch, _, _]| g.data()[i * c + ch] / hw))
        }
        Op::Gmp => {
            let per = xs[0].h() * xs[0].w();
            let mut gx = Tensor4::zeros(xs[0].shape());
            for (p, &i) in k::plane_argmax(xs[0]).iter().enumerate() {
                gx.data_mut()[p * per + i] = g.data()[p];
            }
            one(gx)
        }
        Op::ChannelMean => {
            let c = xs[0].c() as f64;
            one(Tensor4::from_fn(xs[0].shape(), |[i, _, y, x]| g.at(i, 0, y, x) / c))
        }
        Op::ChannelMax => {
            let [_, c, h, w] = xs[0].shape();
            let hw = h * w;
            let mut gx = Tensor4::zeros(xs[0].shape());
            for (kk, &ch) in k::channel_argmax(xs[0]).iter().enumerate() {
                let (i, p) = (kk / hw, kk % hw);
                gx.data_mut()[(i * c + ch) * hw + p] = g.data()[kk];
            }
            one(gx)
        }
        Op::Pointwise(p) => {
            let x = xs[0];
            let data = x
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xv, &yv), &gv)| {
                    gv * match p {
                        Pointwise::Relu => {
                            if xv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Pointwise::Sigmoid => yv * (1.0 - yv),
                        Pointwise::Abs => {
                            if xv > 0.0 {
                                1.0
                            } else if xv < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Pointwise::Softplus => losses::sigmoid(xv),
                    }
                })
                .collect();
            one(Tensor4::new(x.shape(), data).expect("shape"))
        }
        Op::Concat => {
            let mut start = 0;
            xs.iter()
                .map(|t| {
                    let s = k::slice_channels(g, start, t.c()).expect("shape");
                    start += t.c();
                    Some(s)
                })
                .collect()
        }
        Op::Slice { start, len } => {
            let [n, c, h, w] = xs[0].shape();
            let hw = h * w;
            let mut gx = Tensor4::zeros(xs[0].shape());
            for i in 0..n {
                gx.data_mut()[(i * c + start) * hw..(i * c + start + len) * hw]
                    .copy_from_slice(&g.data()[i * len * hw..(i + 1) * len * hw]);
            }
            one(gx)
        }
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (xs[0], xs[1]);
            let gd = g.data();
            let ga = want[0].then(|| match op {
                Op::Mul => unbroadcast(g, a.shape(), b.shape(), |ko, _, ib| gd[ko] * b.data()[ib]),
                _ => unbroadcast(g, a.shape(), b.shape(), |ko, _, _| gd[ko]),
            });
            let gb = want[1].then(|| match op {
                Op::Mul => unbroadcast(g, b.shape(), a.shape(), |ko, _, ia| gd[ko] * a.data()[ia]),
                Op::Sub => unbroadcast(g, b.shape(), a.shape(), |ko, _, _| -gd[ko]),
                _ => unbroadcast(g, b.shape(), a.shape(), |ko, _, _| gd[ko]),
            });
            vec![ga, gb]
        }
        Op::Affine { a, .. } => one(g.scale(*a)),
        Op::Sum => one(Tensor4::full(xs[0].shape(), g.item())),
        Op::Mean => one(Tensor4::full(xs[0].shape(), g.item() / xs[0].len() as f64)),
        Op::Cosine => {
            let (g1, g2) = k::cosine_backward(xs[0], xs[1], g);
            vec![Some(g1), Some(g2)]
        }
        Op::Consistency { labels, margin, hinge, count } => {
            let s = g.item() / *count as f64;
            let data = xs[0]
                .data()
                .iter()
                .zip(labels)
                .map(|(&c, &y)| s * losses::consistency_slope(c, y, *margin, *hinge))
                .collect();
            one(Tensor4::new(xs[0].shape(), data).expect("shape"))
        }
        Op::SemanticCe { labels, ignore, count } => {
            let x = xs[0];
            let (c, hw) = (x.c(), x.h() * x.w());
            let s = g.item() / *count as f64;
            let mut gx = Tensor4::zeros(x.shape());
            for (kk, &l) in labels.iter().enumerate() {
                if l == *ignore {
                    continue;
                }
                let (i, p) = (kk / hw, kk % hw);
                let at = |ch: usize| (i * c + ch) * hw + p;
                let mx = (0..c).map(|ch| x.data()[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|ch| (x.data()[at(ch)] - mx).exp()).sum();
                for ch in 0..c {
                    let prob = (x.data()[at(ch)] - mx).exp() / z;
                    let onehot = if ch == l as usize { 1.0 } else { 0.0 };
                    gx.data_mut()[at(ch)] = s * (prob - onehot);
                }
            }
            one(gx)
        }
        Op::ChangeBce { targets } => {
            let s = g.item() / targets.len() as f64;
            let data = xs[0].data().iter().zip(targets).map(|(&x, &t)| s * (losses::sigmoid(x) - t)).collect();
            one(Tensor4::new(xs[0].shape(), data).expect("shape"))
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Add a named learnable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor4) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value });
        self.params.push((name.into(), id));
        NodeId(id)
    }

    /// Add a non-learnable leaf.
    pub fn constant(&mut self, value: Tensor4) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor4 {
        &self.nodes[id.0].value
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.iter().find(|(n, _)| n == name).map(|&(_, id)| NodeId(id))
    }

    fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let xs: Vec<&Tensor4> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let value = eval(&op, &xs)?;
        self.nodes.push(Node { op, inputs: inputs.iter().map(|i| i.0).collect(), value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: Option<NodeId>, stride: usize, padding: usize) -> Result<NodeId> {
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(Op::Conv2d { stride, padding }, &inputs)
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor < 2 {
            return Err(ScdError::Param(format!("upsample factor {factor} < 2")));
        }
        self.push(Op::Upsample { factor }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Gap, &[x])
    }

    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Gmp, &[x])
    }

    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::ChannelMean, &[x])
    }

    pub fn channel_max(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::ChannelMax, &[x])
    }

    pub fn pointwise(&mut self, kind: Pointwise, x: NodeId) -> Result<NodeId> {
        self.push(Op::Pointwise(kind), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(Pointwise::Relu, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(Pointwise::Sigmoid, x)
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(Pointwise::Abs, x)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(Pointwise::Softplus, x)
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push(Op::Concat, xs)
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::Slice { start, len }, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, &[a, b])
    }

    /// a·x + b elementwise.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> Result<NodeId> {
        self.push(Op::Affine { a, b }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean, &[x])
    }

    pub fn cosine(&mut self, x1: NodeId, x2: NodeId) -> Result<NodeId> {
        if self.value(x1).c() < 1 {
            return Err(ScdError::Shape("cosine needs at least one channel".into()));
        }
        self.push(Op::Cosine, &[x1, x2])
    }

    /// Mean consistency loss over non-ignored pixels of a (n,1,h,w) cosine map.
    pub fn consistency(&mut self, cos: NodeId, labels: &[ChangeLabel], margin: f64, hinge: Hinge) -> Result<NodeId> {
        let cv = self.value(cos);
        if cv.c() != 1 || labels.len() != cv.len() {
            return Err(ScdError::Shape(format!("{} labels for cosine map {:?}", labels.len(), cv.shape())));
        }
        if let Hinge::Soft { tau } = hinge {
            if !(tau > 0.0) {
                return Err(ScdError::Param(format!("temperature {tau} must be positive")));
            }
        }
        let count = labels.iter().filter(|&&y| y != ChangeLabel::Ignore).count();
        if count == 0 {
            return Err(ScdError::EmptyReduction("no contributing pixels for consistency loss".into()));
        }
        self.push(Op::Consistency { labels: labels.to_vec(), margin, hinge, count }, &[cos])
    }

    /// Mean cross-entropy over pixels whose label differs from `ignore`.
    pub fn semantic_ce(&mut self, logits: NodeId, labels: &[u8], ignore: u8) -> Result<NodeId> {
        let lv = self.value(logits);
        let (k, hw) = (lv.c(), lv.h() * lv.w());
        if labels.len() != lv.n() * hw {
            return Err(ScdError::Shape(format!("{} labels for logits {:?}", labels.len(), lv.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= k) {
            return Err(ScdError::Data(format!("label {bad} out of range for {k} classes")));
        }
        let count = labels.iter().filter(|&&l| l != ignore).count();
        if count == 0 {
            return Err(ScdError::EmptyReduction("every pixel is ignored".into()));
        }
        self.push(Op::SemanticCe { labels: labels.to_vec(), ignore, count }, &[logits])
    }

    /// Mean binary cross-entropy with logits against 0/1 targets.
    pub fn change_bce(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        if targets.len() != self.value(logits).len() {
            return Err(ScdError::Shape(format!("{} targets for {:?}", targets.len(), self.value(logits).shape())));
        }
        self.push(Op::ChangeBce { targets: targets.to_vec() }, &[logits])
    }

    /// Overwrite a leaf value; downstream caches are stale until `recompute`.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor4) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) || node.value.shape() != value.shape() {
            return Err(ScdError::Contract("set_leaf needs a leaf of the same shape".into()));
        }
        node.value = value;
        Ok(())
    }

    /// Nodes whose value depends on `from`.
    fn downstream(&self, from: usize) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        mask[from] = true;
        for i in from + 1..self.nodes.len() {
            mask[i] = self.nodes[i].inputs.iter().any(|&j| mask[j]);
        }
        mask
    }

    fn recompute_masked(&mut self, mask: &[bool], hook: Option<&dyn Fn(&mut Tensor4)>) -> Result<()> {
        for i in 0..self.nodes.len() {
            if !mask[i] {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(h) = hook {
                    h(&mut self.nodes[i].value);
                }
                continue;
            }
            let value = {
                let xs: Vec<&Tensor4> = self.nodes[i].inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let mut v = eval(&self.nodes[i].op, &xs)?;
                if let Some(h) = hook {
                    h(&mut v);
                }
                v
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Re-evaluate everything downstream of a leaf.
    pub fn recompute(&mut self, from: NodeId) -> Result<()> {
        let mask = self.downstream(from.0);
        self.recompute_masked(&mask, None)
    }

    /// Re-evaluate the whole graph, passing every leaf and op output through `hook`.
    pub(crate) fn replay_with(&mut self, hook: &dyn Fn(&mut Tensor4)) -> Result<()> {
        let mask = vec![true; self.nodes.len()];
        self.recompute_masked(&mask, Some(hook))
    }

    pub fn backward(&self, loss: NodeId) -> Result<GradReport> {
        self.backward_with(loss, 1.0, None)
    }

    /// Backward from a seed of `seed` at the loss; every produced gradient
    /// tensor passes through `hook`.
    pub(crate) fn backward_with(&self, loss: NodeId, seed: f64, hook: Option<&dyn Fn(&mut Tensor4)>) -> Result<GradReport> {
        if self.value(loss).shape() != [1, 1, 1, 1] {
            return Err(ScdError::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut needs = vec![false; n];
        for &(_, id) in &self.params {
            needs[id] = true;
        }
        for i in 0..n {
            if !needs[i] {
                needs[i] = self.nodes[i].inputs.iter().any(|&j| needs[j]);
            }
        }
        let mut grads: Vec<Option<Tensor4>> = vec![None; n];
        let mut s = Tensor4::scalar(seed);
        if let Some(h) = hook {
            h(&mut s);
        }
        grads[loss.0] = Some(s);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let xs: Vec<&Tensor4> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let want: Vec<bool> = node.inputs.iter().map(|&j| needs[j]).collect();
            let parts = grad(&node.op, &xs, &node.value, &g, &want);
            for ((&j, part), &w) in node.inputs.iter().zip(parts).zip(&want) {
                let (Some(mut part), true) = (part, w) else { continue };
                if let Some(h) = hook {
                    h(&mut part);
                }
                match grads[j].as_mut() {
                    Some(acc) => {
                        acc.add_assign(&part);
                        if let Some(h) = hook {
                            h(acc);
                        }
                    }
                    None => grads[j] = Some(part),
                }
            }
        }
        let out = self
            .params
            .iter()
            .map(|(name, id)| {
                let g = grads[*id].take().unwrap_or_else(|| Tensor4::zeros(self.nodes[*id].value.shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(GradReport::from_grads(out))
    }
}

/// Central-difference check over every parameter entry; returns the worst
/// relative error against the analytic gradient.
pub fn finite_diff_check(graph: &mut Graph, loss: NodeId, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(ScdError::Param(format!("eps {eps} must be positive")));
    }
    let report = graph.backward(loss)?;
    let mut worst = 0.0f64;
    let params = graph.params.clone();
    for ((_, id), (_, analytic)) in params.iter().zip(&report.grads) {
        let mask = graph.downstream(*id);
        let original = graph.nodes[*id].value.clone();
        for j in 0..original.len() {
            let probe = |delta: f64, g: &mut Graph| -> Result<f64> {
                g.nodes[*id].value.data_mut()[j] = original.data()[j] + delta;
                g.recompute_masked(&mask, None)?;
                Ok(g.value(loss).item())
            };
            let fp = probe(eps, graph)?;
            let fm = probe(-eps, graph)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            graph.nodes[*id].value.data_mut()[j] = original.data()[j];
        }
        graph.recompute_masked(&mask, None)?;
    }
    Ok(worst)
}
