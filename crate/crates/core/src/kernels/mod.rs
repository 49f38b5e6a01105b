//! Differentiable kernels recorded on a reverse-mode tape.
//!
//! A [`Tape`] owns one forward/backward episode. Forward ops return [`Var`]s;
//! an op is recorded only when at least one input requires a gradient, so
//! inference-only episodes retain nothing beyond the live `Var`s.

mod conv;
mod gemm;
mod layout;
mod norm;
mod resize;

use std::sync::Arc;

pub use conv::{conv_out_len, ConvGeom};
pub use gemm::{gemm, Mat};
pub use layout::{broadcast_shape, permute as permute_data};
pub use norm::{gelu as gelu_scalar, softmax_forward};
pub use resize::ResizePlan;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{numel, Float, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// A value produced within a [`Tape`] episode.
#[derive(Clone)]
pub struct Var<T: Float = f32> {
    value: Arc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Float> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    fn saved(&self) -> Saved<T> {
        Saved {
            id: self.node,
            value: Arc::clone(&self.value),
        }
    }
}

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, node={:?})", self.value, self.node)
    }
}

struct Saved<T: Float> {
    id: Option<usize>,
    value: Arc<Tensor<T>>,
}

enum Op<T: Float> {
    Leaf,
    Conv2d {
        x: Saved<T>,
        w: Saved<T>,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Linear {
        x: Saved<T>,
        w: Saved<T>,
        b: Option<usize>,
    },
    LayerNorm {
        x: Option<usize>,
        gamma: Saved<T>,
        beta: Option<usize>,
        saved: norm::LayerNormSaved<T>,
    },
    Gelu {
        x: Saved<T>,
    },
    Softmax {
        x: usize,
        y: Vec<T>,
        n: usize,
    },
    Matmul {
        a: Saved<T>,
        b: Saved<T>,
        plan: MatmulPlan,
    },
    Resize {
        x: usize,
        plan: ResizePlan,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        in_shape: Vec<usize>,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<(Option<usize>, usize)>,
        outer: usize,
        inner: usize,
    },
    Add {
        a: Option<usize>,
        b: Option<usize>,
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
        a_len: usize,
        b_len: usize,
    },
    Mul {
        a: Saved<T>,
        b: Saved<T>,
    },
    Scale {
        x: usize,
        s: T,
    },
    Sum {
        x: usize,
        len: usize,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<u8>,
        classes: usize,
        plane: usize,
        count: usize,
    },
}

struct Node<T: Float> {
    len: usize,
    op: Op<T>,
}

#[derive(Debug, Clone)]
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// (offset into a, offset into b) per output batch entry
    pairs: Vec<(usize, usize)>,
}

/// Reverse-mode recording of one forward episode.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    macs: u64,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Float>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        None => *slot = Some(g),
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            macs: 0,
        }
    }

    /// Multiply-accumulates executed by conv, linear and matmul ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn recorded_ops(&self) -> usize {
        self.nodes.len()
    }

    /// Introduce a value. When `requires_grad`, backward fills its gradient.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<T> {
        let node = requires_grad.then(|| self.push(value.len(), Op::Leaf));
        Var { value, node }
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false)
    }

    fn push(&mut self, len: usize, op: Op<T>) -> usize {
        self.nodes.push(Node { len, op });
        self.leaf_grads.push(None);
        self.nodes.len() - 1
    }

    fn output(&mut self, shape: Vec<usize>, data: Vec<T>, needs: bool, op: impl FnOnce() -> Op<T>) -> Var<T> {
        let value = Arc::new(Tensor::new(shape, data).expect("kernel produced inconsistent shape"));
        let node = needs.then(|| self.push(value.len(), op()));
        Var { value, node }
    }

    /// Gradient accumulated for a leaf, if any backward pass reached it.
    pub fn grad(&self, v: &Var<T>) -> Option<Tensor<T>> {
        let id = v.node?;
        let g = self.leaf_grads.get(id)?.as_ref()?;
        matches!(self.nodes[id].op, Op::Leaf).then(|| Tensor::new(v.shape().to_vec(), g.clone()).unwrap())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---------------------------------------------------------------- ops

    /// 2-D cross-correlation. `x: [B, Cin, H, W]`, `w: [Cout, Cin/groups, Kh, Kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, stride: usize, pad: usize, groups: usize) -> Result<Var<T>> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err(format!("conv2d expects 4-D input and weight, got {xs:?} and {ws:?}"));
        }
        if groups == 0 || xs[1] % groups != 0 || ws[0] % groups != 0 {
            return shape_err(format!("conv2d: channels {} / out {} not divisible by groups {groups}", xs[1], ws[0]));
        }
        if ws[1] != xs[1] / groups {
            return shape_err(format!("conv2d: weight expects {} input channels per group, input has {}", ws[1], xs[1] / groups));
        }
        if let Some(b) = b {
            if b.shape() != [ws[0]] {
                return shape_err(format!("conv2d bias shape {:?}, expected [{}]", b.shape(), ws[0]));
            }
        }
        let (Some(out_h), Some(out_w)) = (conv_out_len(xs[2], ws[2], stride, pad), conv_out_len(xs[3], ws[3], stride, pad)) else {
            return shape_err(format!("conv2d: kernel {:?} with stride {stride} pad {pad} does not fit input {xs:?}", &ws[2..]));
        };
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_ch: ws[0],
            k_h: ws[2],
            k_w: ws[3],
            stride,
            pad,
            groups,
            out_h,
            out_w,
        };
        self.macs += geom.macs();
        let out = conv::forward(x.value.data(), w.value.data(), b.map(|b| b.value.data()), &geom);
        let needs = x.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.output(vec![geom.batch, geom.out_ch, out_h, out_w], out, needs, || Op::Conv2d {
            x: x.saved(),
            w: w.saved(),
            b: b.and_then(|b| b.node),
            geom,
        }))
    }

    /// `y = x·w + b` over the last axis; `w: [Cin, Cout]`.
    pub fn linear(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let (xs, ws) = (x.shape(), w.shape());
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return shape_err(format!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        let (cin, cout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if b.shape() != [cout] {
                return shape_err(format!("linear bias shape {:?}, expected [{cout}]", b.shape()));
            }
        }
        let rows = x.value.len() / cin.max(1);
        self.macs += (rows * cin * cout) as u64;
        let mut out = vec![T::zero(); rows * cout];
        gemm(Mat::new(x.value.data(), rows, cin), Mat::new(w.value.data(), cin, cout), &mut out, false);
        if let Some(b) = b {
            for row in out.chunks_exact_mut(cout) {
                row.iter_mut().zip(b.value.data()).for_each(|(o, &bv)| *o += bv);
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = cout;
        let needs = x.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.output(shape, out, needs, || Op::Linear {
            x: x.saved(),
            w: w.saved(),
            b: b.and_then(|b| b.node),
        }))
    }

    pub fn layer_norm(&mut self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let c = *x.shape().last().unwrap_or(&0);
        if c == 0 || gamma.shape() != [c] || beta.shape() != [c] {
            return shape_err(format!(
                "layer_norm: input {:?} with gamma {:?} beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ));
        }
        let (y, saved) = norm::layer_norm_forward(x.value.data(), gamma.value.data(), beta.value.data(), T::of(eps));
        let needs = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.output(x.shape().to_vec(), y, needs, || Op::LayerNorm {
            x: x.node,
            gamma: gamma.saved(),
            beta: beta.node,
            saved,
        }))
    }

    pub fn gelu(&mut self, x: &Var<T>) -> Var<T> {
        let y = x.value.data().iter().map(|&v| norm::gelu(v)).collect();
        self.output(x.shape().to_vec(), y, x.requires_grad(), || Op::Gelu { x: x.saved() })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let n = *x.shape().last().unwrap_or(&0);
        if n == 0 {
            return shape_err(format!("softmax over empty last axis of {:?}", x.shape()));
        }
        let y = norm::softmax_forward(x.value.data(), n);
        let needs = x.requires_grad();
        let saved = if needs { y.clone() } else { Vec::new() };
        Ok(self.output(x.shape().to_vec(), y, needs, || Op::Softmax {
            x: x.node.unwrap(),
            y: saved,
            n,
        }))
    }

    /// Batched `[..., M, K] x [..., K, N]` with broadcast batch dimensions.
    pub fn matmul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return shape_err(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let Some(batch) = broadcast_shape(ba, bb) else {
            return shape_err(format!("matmul: batch dims {ba:?} and {bb:?} do not broadcast"));
        };
        let amap = layout::broadcast_index_map(ba, &batch);
        let bmap = layout::broadcast_index_map(bb, &batch);
        let plan = MatmulPlan {
            m,
            k,
            n,
            pairs: amap.iter().zip(&bmap).map(|(&i, &j)| (i * m * k, j * k * n)).collect(),
        };
        self.macs += (plan.pairs.len() * m * k * n) as u64;
        let mut out = vec![T::zero(); plan.pairs.len() * m * n];
        for (o, &(ao, bo)) in out.chunks_exact_mut((m * n).max(1)).zip(&plan.pairs) {
            gemm(
                Mat::new(&a.value.data()[ao..ao + m * k], m, k),
                Mat::new(&b.value.data()[bo..bo + k * n], k, n),
                o,
                false,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let needs = a.requires_grad() || b.requires_grad();
        Ok(self.output(shape, out, needs, || Op::Matmul {
            a: a.saved(),
            b: b.saved(),
            plan,
        }))
    }

    /// Bilinear resize of an NCHW tensor.
    pub fn bilinear_resize(&mut self, x: &Var<T>, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 || out_h == 0 || out_w == 0 {
            return shape_err(format!("bilinear_resize: input {s:?} to {out_h}x{out_w}"));
        }
        if s[2] == out_h && s[3] == out_w {
            return Ok(x.clone());
        }
        let plan = ResizePlan::new(s[0] * s[1], s[2], s[3], out_h, out_w, align_corners);
        let y = plan.forward(x.value.data());
        let shape = vec![s[0], s[1], out_h, out_w];
        Ok(self.output(shape, y, x.requires_grad(), || Op::Resize { x: x.node.unwrap(), plan }))
    }

    pub fn reshape(&mut self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        if numel(shape) != x.value.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", x.shape()));
        }
        let data = x.value.data().to_vec();
        Ok(self.output(shape.to_vec(), data, x.requires_grad(), || Op::Reshape { x: x.node.unwrap() }))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: &Var<T>, perm: &[usize]) -> Result<Var<T>> {
        let rank = x.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("invalid permutation {perm:?} for rank {rank}"));
        }
        let data = layout::permute(x.value.data(), x.shape(), perm);
        let shape = layout::permuted_shape(x.shape(), perm);
        Ok(self.output(shape, data, x.requires_grad(), || Op::Permute {
            x: x.node.unwrap(),
            in_shape: x.shape().to_vec(),
            perm: perm.to_vec(),
        }))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let r = x.shape().len();
        if r < 2 {
            return shape_err("transpose needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let Some(first) = xs.first() else {
            return shape_err("concat of zero tensors");
        };
        let base = first.shape();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        for x in xs {
            let s = x.shape();
            if s.len() != base.len() || s.iter().zip(base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return shape_err(format!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let chunk = x.shape()[axis] * inner;
                out.extend_from_slice(&x.value.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        let needs = xs.iter().any(|x| x.requires_grad());
        Ok(self.output(shape, out, needs, || Op::Concat {
            parts: xs.iter().map(|x| (x.node, x.shape()[axis])).collect(),
            outer,
            inner,
        }))
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let Some(shape) = broadcast_shape(a.shape(), b.shape()) else {
            return shape_err(format!("add: shapes {:?} and {:?} do not broadcast", a.shape(), b.shape()));
        };
        let map_for = |s: &[usize]| (s != shape.as_slice()).then(|| layout::broadcast_index_map(s, &shape));
        let (a_map, b_map) = (map_for(a.shape()), map_for(b.shape()));
        let (ad, bd) = (a.value.data(), b.value.data());
        let out: Vec<T> = (0..numel(&shape))
            .map(|i| {
                let ai = a_map.as_ref().map_or(i, |m| m[i]);
                let bi = b_map.as_ref().map_or(i, |m| m[i]);
                ad[ai] + bd[bi]
            })
            .collect();
        let needs = a.requires_grad() || b.requires_grad();
        Ok(self.output(shape, out, needs, || Op::Add {
            a: a.node,
            b: b.node,
            a_map,
            b_map,
            a_len: a.value.len(),
            b_len: b.value.len(),
        }))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.shape() != b.shape() {
            return shape_err(format!("mul: shapes {:?} and {:?} differ", a.shape(), b.shape()));
        }
        let out = a.value.data().iter().zip(b.value.data()).map(|(&x, &y)| x * y).collect();
        let needs = a.requires_grad() || b.requires_grad();
        Ok(self.output(a.shape().to_vec(), out, needs, || Op::Mul { a: a.saved(), b: b.saved() }))
    }

    pub fn scale(&mut self, x: &Var<T>, s: f64) -> Var<T> {
        let s = T::of(s);
        let out = x.value.data().iter().map(|&v| v * s).collect();
        self.output(x.shape().to_vec(), out, x.requires_grad(), || Op::Scale { x: x.node.unwrap(), s })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: &Var<T>) -> Var<T> {
        let s = x.value.data().iter().copied().sum::<T>();
        self.output(vec![], vec![s], x.requires_grad(), || Op::Sum {
            x: x.node.unwrap(),
            len: x.value.len(),
        })
    }

    /// Mean softmax cross-entropy over the class axis of `logits: [B, C, H, W]`,
    /// skipping pixels labelled [`IGNORE_INDEX`]. `labels` is `B·H·W` long.
    pub fn cross_entropy(&mut self, logits: &Var<T>, labels: &[u8]) -> Result<Var<T>> {
        let s = logits.shape();
        if s.len() != 4 {
            return shape_err(format!("cross_entropy expects [B, C, H, W] logits, got {s:?}"));
        }
        let (batch, classes, plane) = (s[0], s[1], s[2] * s[3]);
        if labels.len() != batch * plane {
            return shape_err(format!("cross_entropy: {} labels for logits {s:?}", labels.len()));
        }
        let x = logits.value.data();
        let mut probs = vec![T::zero(); x.len()];
        let mut loss = 0.0f64;
        let mut count = 0usize;
        let mut row = vec![T::zero(); classes];
        for n in 0..batch {
            for p in 0..plane {
                let label = labels[n * plane + p];
                if label != IGNORE_INDEX && label as usize >= classes {
                    return Err(Error::Data(format!("label {label} out of range for {classes} classes")));
                }
                for (c, r) in row.iter_mut().enumerate() {
                    *r = x[(n * classes + c) * plane + p];
                }
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = row.iter().map(|&v| (v - m).exp()).sum();
                for (c, &r) in row.iter().enumerate() {
                    probs[(n * classes + c) * plane + p] = (r - m).exp() / z;
                }
                if label != IGNORE_INDEX {
                    count += 1;
                    loss += (z.ln() + m - row[label as usize]).as_f64();
                }
            }
        }
        if count == 0 {
            return Err(Error::Data("cross_entropy: every pixel carries the ignore label".into()));
        }
        let value = T::of(loss / count as f64);
        Ok(self.output(vec![], vec![value], logits.requires_grad(), || Op::CrossEntropy {
            logits: logits.node.unwrap(),
            probs,
            labels: labels.to_vec(),
            classes,
            plane,
            count,
        }))
    }

    // ----------------------------------------------------------- backward

    /// Backpropagate from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: &Var<T>) -> Result<()> {
        if loss.value.len() != 1 || !loss.shape().iter().all(|&d| d == 1) {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", loss.shape())));
        }
        self.backward_with_seed(loss, &Tensor::full(loss.shape(), T::one()))
    }

    /// Backpropagate an arbitrary upstream gradient `seed` (same shape as `out`).
    pub fn backward_with_seed(&mut self, out: &Var<T>, seed: &Tensor<T>) -> Result<()> {
        if seed.shape() != out.shape() {
            return Err(Error::Usage(format!("seed shape {:?} differs from output {:?}", seed.shape(), out.shape())));
        }
        let Some(root) = out.node else {
            return Err(Error::Usage("backward from a value that does not require grad".into()));
        };
        let mut grads: Vec<Option<Vec<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(seed.data().to_vec());
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            debug_assert_eq!(g.len(), self.nodes[id].len);
            self.propagate(id, g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let mut send = |to: Option<usize>, v: Vec<T>| {
            if let Some(t) = to {
                accumulate(&mut grads[t], v);
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => accumulate(&mut self.leaf_grads[id], g),
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv::backward(&g, x.value.data(), w.value.data(), geom, x.id.is_some(), w.id.is_some(), b.is_some());
                if let Some(dx) = dx {
                    send(x.id, dx);
                }
                if let Some(dw) = dw {
                    send(w.id, dw);
                }
                if let Some(db) = db {
                    send(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let ws = w.value.shape();
                let (cin, cout) = (ws[0], ws[1]);
                let rows = g.len() / cout;
                if x.id.is_some() {
                    let mut dx = vec![T::zero(); rows * cin];
                    gemm(Mat::new(&g, rows, cout), Mat::new(w.value.data(), cin, cout).t(), &mut dx, false);
                    send(x.id, dx);
                }
                if w.id.is_some() {
                    let mut dw = vec![T::zero(); cin * cout];
                    gemm(Mat::new(x.value.data(), rows, cin).t(), Mat::new(&g, rows, cout), &mut dw, false);
                    send(w.id, dw);
                }
                if b.is_some() {
                    let mut db = vec![T::zero(); cout];
                    for row in g.chunks_exact(cout) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    send(*b, db);
                }
            }
            Op::LayerNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = norm::layer_norm_backward(&g, gamma.value.data(), saved);
                send(*x, dx);
                send(gamma.id, dg);
                send(*beta, db);
            }
            Op::Gelu { x } => {
                let dx = g.iter().zip(x.value.data()).map(|(&gv, &xv)| gv * norm::gelu_grad(xv)).collect();
                send(x.id, dx);
            }
            Op::Softmax { x, y, n } => send(Some(*x), norm::softmax_backward(&g, y, *n)),
            Op::Matmul { a, b, plan } => {
                let MatmulPlan { m, k, n, pairs } = plan;
                let (m, k, n) = (*m, *k, *n);
                let mut da = a.id.map(|_| vec![T::zero(); a.value.len()]);
                let mut db = b.id.map(|_| vec![T::zero(); b.value.len()]);
                for (gi, &(ao, bo)) in g.chunks_exact((m * n).max(1)).zip(pairs) {
                    if let Some(da) = da.as_mut() {
                        gemm(Mat::new(gi, m, n), Mat::new(&b.value.data()[bo..bo + k * n], k, n).t(), &mut da[ao..ao + m * k], true);
                    }
                    if let Some(db) = db.as_mut() {
                        gemm(Mat::new(&a.value.data()[ao..ao + m * k], m, k).t(), Mat::new(gi, m, n), &mut db[bo..bo + k * n], true);
                    }
                }
                if let Some(da) = da {
                    send(a.id, da);
                }
                if let Some(db) = db {
                    send(b.id, db);
                }
            }
            Op::Resize { x, plan } => send(Some(*x), plan.backward(&g)),
            Op::Reshape { x } => send(Some(*x), g),
            Op::Permute { x, in_shape, perm } => {
                let out_shape = layout::permuted_shape(in_shape, perm);
                send(Some(*x), layout::permute(&g, &out_shape, &layout::inverse_perm(perm)));
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(pid, extent) in parts {
                    if pid.is_some() {
                        let chunk = extent * inner;
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..*outer {
                            let start = o * total * inner + offset * inner;
                            d.extend_from_slice(&g[start..start + chunk]);
                        }
                        send(pid, d);
                    }
                    offset += extent;
                }
            }
            Op::Add { a, b, a_map, b_map, a_len, b_len } => {
                let reduce = |map: &Option<Vec<usize>>, len: usize| match map {
                    None => g.clone(),
                    Some(m) => {
                        let mut d = vec![T::zero(); len];
                        m.iter().zip(&g).for_each(|(&i, &v)| d[i] += v);
                        d
                    }
                };
                if a.is_some() {
                    send(*a, reduce(a_map, *a_len));
                }
                if b.is_some() {
                    send(*b, reduce(b_map, *b_len));
                }
            }
            Op::Mul { a, b } => {
                if a.id.is_some() {
                    send(a.id, g.iter().zip(b.value.data()).map(|(&x, &y)| x * y).collect());
                }
                if b.id.is_some() {
                    send(b.id, g.iter().zip(a.value.data()).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale { x, s } => send(Some(*x), g.iter().map(|&v| v * *s).collect()),
            Op::Sum { x, len } => send(Some(*x), vec![g[0]; *len]),
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                classes,
                plane,
                count,
            } => {
                let scale = g[0] / T::of(*count as f64);
                let mut d = vec![T::zero(); probs.len()];
                for (i, &label) in labels.iter().enumerate() {
                    if label == IGNORE_INDEX {
                        continue;
                    }
                    let (n, p) = (i / plane, i % plane);
                    for c in 0..*classes {
                        let idx = (n * classes + c) * plane + p;
                        let target = if c == label as usize { T::one() } else { T::zero() };
                        d[idx] = (probs[idx] - target) * scale;
                    }
                }
                send(Some(*logits), d);
            }
        }
    }
}
