use super::Tensor;
use crate::{Error, Result};

/// Probabilities are clamped to this floor before any `log`, so cross-entropy
/// stays finite even when a softmax output underflows early in training.
pub const PROB_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Log(TensorId),
    Relu(TensorId),
    Sum(TensorId),
    SumList(Vec<TensorId>),
    Select(TensorId, usize),
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        padding: usize,
    },
    ConcatChannels(Vec<TensorId>),
    GlobalAvgPool(TensorId),
    AvgPoolHalf(TensorId),
    Softmax(TensorId),
    CrossEntropy {
        pred: TensorId,
        label: TensorId,
    },
    // The input id is part of the op record even though backward never
    // reads it (detach is exactly the op that drops the edge).
    Detach(#[allow(dead_code)] TensorId),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Wengert-style tape: operation records in topological (creation) order.
/// Forward ops append nodes; `backward` replays the records once, in reverse,
/// accumulating gradients into every tracked node.
///
/// One graph lives for one forward/backward pass and is dropped afterwards.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tracked leaf (a trainable parameter).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts an untracked constant (data, masks, labels).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a tracked node; meaningful after `backward`.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn is_tracked(&self, id: TensorId) -> bool {
        self.nodes[id.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.grads
            .push(tracked.then(|| vec![0.0; value.len()]));
        self.nodes.push(Node { value, op, tracked });
        id
    }

    fn any_tracked(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tracked)
    }

    // ---- forward ops ------------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Config(format!(
                "add shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Config(format!(
                "mul shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let tracked = self.nodes[a.0].tracked;
        self.push(value, Op::Scale(a, factor), tracked)
    }

    /// Elementwise natural log with the input clamped at [`PROB_EPS`].
    pub fn log(&mut self, a: TensorId) -> TensorId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.max(PROB_EPS).ln()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let tracked = self.nodes[a.0].tracked;
        self.push(value, Op::Log(a), tracked)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let tracked = self.nodes[a.0].tracked;
        self.push(value, Op::Relu(a), tracked)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.value(a).data().iter().sum();
        let tracked = self.nodes[a.0].tracked;
        self.push(Tensor::scalar(total), Op::Sum(a), tracked)
    }

    /// Elementwise sum of same-shaped tensors (typically scalars).
    pub fn sum_list(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        if ids.is_empty() {
            return Err(Error::Usage("sum_list of zero tensors".into()));
        }
        let shape = self.value(ids[0]).shape().to_vec();
        let mut data = vec![0.0; self.value(ids[0]).len()];
        for &id in ids {
            let t = self.value(id);
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "sum_list shape mismatch: {:?} vs {:?}",
                    t.shape(),
                    shape
                )));
            }
            for (acc, v) in data.iter_mut().zip(t.data()) {
                *acc += v;
            }
        }
        let value = Tensor::new(shape, data)?;
        let tracked = self.any_tracked(ids);
        Ok(self.push(value, Op::SumList(ids.to_vec()), tracked))
    }

    /// Elementwise mean of same-shaped tensors.
    pub fn mean_list(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        let total = self.sum_list(ids)?;
        Ok(self.scale(total, 1.0 / ids.len() as f64))
    }

    /// Picks one element (by flat index) as a scalar node.
    pub fn select(&mut self, a: TensorId, index: usize) -> Result<TensorId> {
        let ta = self.value(a);
        if index >= ta.len() {
            return Err(Error::Usage(format!(
                "select index {index} out of range for {} elements",
                ta.len()
            )));
        }
        let value = Tensor::scalar(ta.data()[index]);
        let tracked = self.nodes[a.0].tracked;
        Ok(self.push(value, Op::Select(a, index), tracked))
    }

    /// 2-d cross-correlation with zero padding and unit stride.
    ///
    /// `input: [C_in, H, W]`, `kernel: [C_out, C_in, k, k]`, `bias: [C_out]`;
    /// output is `[C_out, H + 2*padding - k + 1, W + 2*padding - k + 1]`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        padding: usize,
    ) -> Result<TensorId> {
        let (ti, tk, tb) = (self.value(input), self.value(kernel), self.value(bias));
        let (c_in, h, w) = match ti.shape() {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(Error::Config(format!(
                    "conv2d input must be [C,H,W], got {other:?}"
                )))
            }
        };
        let (c_out, kc_in, kh, kw) = match tk.shape() {
            [o, i, kh, kw] => (*o, *i, *kh, *kw),
            other => {
                return Err(Error::Config(format!(
                    "conv2d kernel must be [C_out,C_in,k,k], got {other:?}"
                )))
            }
        };
        if kh != kw {
            return Err(Error::Config(format!(
                "conv2d kernel must be square, got {kh}x{kw}"
            )));
        }
        if kc_in != c_in {
            return Err(Error::Config(format!(
                "conv2d kernel expects {kc_in} input channels, input has {c_in}"
            )));
        }
        if tb.shape() != [c_out] {
            return Err(Error::Config(format!(
                "conv2d bias must be [{c_out}], got {:?}",
                tb.shape()
            )));
        }
        let k = kh;
        let out_h = (h + 2 * padding).checked_sub(k - 1).filter(|v| *v > 0);
        let out_w = (w + 2 * padding).checked_sub(k - 1).filter(|v| *v > 0);
        let (out_h, out_w) = match (out_h, out_w) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::Config(format!(
                    "conv2d kernel {k} too large for {h}x{w} input with padding {padding}"
                )))
            }
        };

        let mut out = vec![0.0; c_out * out_h * out_w];
        let in_data = ti.data();
        let k_data = tk.data();
        let b_data = tb.data();
        for co in 0..c_out {
            let out_ch = &mut out[co * out_h * out_w..(co + 1) * out_h * out_w];
            out_ch.fill(b_data[co]);
            for ci in 0..c_in {
                let in_ch = &in_data[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let weight = k_data[((co * c_in + ci) * k + ky) * k + kx];
                        accumulate_shifted(
                            out_ch, in_ch, weight, out_h, out_w, h, w, ky, kx, padding,
                        );
                    }
                }
            }
        }
        let value = Tensor::new(vec![c_out, out_h, out_w], out)?;
        let tracked = self.any_tracked(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            },
            tracked,
        ))
    }

    /// Stacks `[C_i, H, W]` inputs along the channel axis.
    pub fn concat_channels(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        if ids.is_empty() {
            return Err(Error::Usage("concat_channels of zero tensors".into()));
        }
        let mut dims: Option<(usize, usize)> = None;
        let mut channels = 0;
        for &id in ids {
            match self.value(id).shape() {
                [c, h, w] => {
                    if let Some((h0, w0)) = dims {
                        if (h0, w0) != (*h, *w) {
                            return Err(Error::Config(format!(
                                "concat_channels spatial mismatch: {h}x{w} vs {h0}x{w0}"
                            )));
                        }
                    } else {
                        dims = Some((*h, *w));
                    }
                    channels += c;
                }
                other => {
                    return Err(Error::Config(format!(
                        "concat_channels expects [C,H,W] inputs, got {other:?}"
                    )))
                }
            }
        }
        let (h, w) = dims.expect("non-empty");
        let mut data = Vec::with_capacity(channels * h * w);
        for &id in ids {
            data.extend_from_slice(self.value(id).data());
        }
        let value = Tensor::new(vec![channels, h, w], data)?;
        let tracked = self.any_tracked(ids);
        Ok(self.push(value, Op::ConcatChannels(ids.to_vec()), tracked))
    }

    /// Per-channel spatial mean: `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.value(a);
        let (c, h, w) = match ta.shape() {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(Error::Config(format!(
                    "global_avg_pool expects [C,H,W], got {other:?}"
                )))
            }
        };
        let hw = (h * w) as f64;
        let data: Vec<f64> = (0..c)
            .map(|ci| ta.data()[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / hw)
            .collect();
        let value = Tensor::new(vec![c], data)?;
        let tracked = self.nodes[a.0].tracked;
        Ok(self.push(value, Op::GlobalAvgPool(a), tracked))
    }

    /// 2x2 average pooling with stride 2. Odd trailing rows/columns form
    /// partial windows averaged over the pixels they actually cover.
    pub fn avg_pool_half(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.value(a);
        let (c, h, w) = match ta.shape() {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(Error::Config(format!(
                    "avg_pool_half expects [C,H,W], got {other:?}"
                )))
            }
        };
        let out_h = h.div_ceil(2);
        let out_w = w.div_ceil(2);
        let mut data = vec![0.0; c * out_h * out_w];
        for ci in 0..c {
            let in_ch = &ta.data()[ci * h * w..(ci + 1) * h * w];
            let out_ch = &mut data[ci * out_h * out_w..(ci + 1) * out_h * out_w];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let ys = 2 * oy..(2 * oy + 2).min(h);
                    let xs = 2 * ox..(2 * ox + 2).min(w);
                    let count = (ys.len() * xs.len()) as f64;
                    let mut acc = 0.0;
                    for y in ys {
                        for x in xs.clone() {
                            acc += in_ch[y * w + x];
                        }
                    }
                    out_ch[oy * out_w + ox] = acc / count;
                }
            }
        }
        let value = Tensor::new(vec![c, out_h, out_w], data)?;
        let tracked = self.nodes[a.0].tracked;
        Ok(self.push(value, Op::AvgPoolHalf(a), tracked))
    }

    /// Softmax over all elements (shape preserved), computed with
    /// max-subtraction for stability. Works for vectors and 2-d maps alike.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let ta = self.value(a);
        let max = ta.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = ta.data().iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let tracked = self.nodes[a.0].tracked;
        self.push(value, Op::Softmax(a), tracked)
    }

    /// `-sum_j label[j] * ln(max(pred[j], PROB_EPS))` as a scalar node,
    /// differentiable with respect to `pred` only.
    pub fn cross_entropy(&mut self, pred: TensorId, label: TensorId) -> Result<TensorId> {
        let (tp, tl) = (self.value(pred), self.value(label));
        if tp.shape() != tl.shape() {
            return Err(Error::Config(format!(
                "cross_entropy shape mismatch: {:?} vs {:?}",
                tp.shape(),
                tl.shape()
            )));
        }
        let mut total = 0.0;
        for (p, l) in tp.data().iter().zip(tl.data()) {
            total -= l * p.max(PROB_EPS).ln();
        }
        let tracked = self.nodes[pred.0].tracked;
        Ok(self.push(Tensor::scalar(total), Op::CrossEntropy { pred, label }, tracked))
    }

    /// Same values, but no gradient flows through the result to the input.
    pub fn detach(&mut self, a: TensorId) -> TensorId {
        let value = self.value(a).clone();
        self.push(value, Op::Detach(a), false)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar root. Leaf gradients afterwards hold the
    /// derivative of the root with respect to each tracked leaf.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this graph; build a fresh graph per pass".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.nodes[root.0].tracked {
            // Root independent of every tracked leaf: all gradients stay zero.
            self.backward_done = true;
            return Ok(());
        }
        self.backward_done = true;
        self.grads[root.0].as_mut().expect("tracked root")[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let out_grad = std::mem::take(self.grads[i].as_mut().expect("tracked"));
            self.propagate(i, &out_grad);
            *self.grads[i].as_mut().expect("tracked") = out_grad;
        }
        Ok(())
    }

    fn add_grad(&mut self, id: TensorId, contribution: impl FnOnce(&mut [f64])) {
        if let Some(buf) = self.grads[id.0].as_mut() {
            contribution(buf);
        }
    }

    fn propagate(&mut self, index: usize, g: &[f64]) {
        // Clone of the op record keeps borrows simple; payloads are tiny.
        let op = self.nodes[index].op.clone();
        match op {
            Op::Leaf | Op::Constant | Op::Detach(_) => {}
            Op::Add(a, b) => {
                self.add_grad(a, |buf| {
                    for (acc, gi) in buf.iter_mut().zip(g) {
                        *acc += gi;
                    }
                });
                self.add_grad(b, |buf| {
                    for (acc, gi) in buf.iter_mut().zip(g) {
                        *acc += gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let bv = self.value(b).data().to_vec();
                self.add_grad(a, |buf| {
                    for ((acc, gi), bi) in buf.iter_mut().zip(g).zip(&bv) {
                        *acc += gi * bi;
                    }
                });
                let av = self.value(a).data().to_vec();
                self.add_grad(b, |buf| {
                    for ((acc, gi), ai) in buf.iter_mut().zip(g).zip(&av) {
                        *acc += gi * ai;
                    }
                });
            }
            Op::Scale(a, factor) => {
                self.add_grad(a, |buf| {
                    for (acc, gi) in buf.iter_mut().zip(g) {
                        *acc += gi * factor;
                    }
                });
            }
            Op::Log(a) => {
                let av = self.value(a).data().to_vec();
                self.add_grad(a, |buf| {
                    for ((acc, gi), ai) in buf.iter_mut().zip(g).zip(&av) {
                        if *ai > PROB_EPS {
                            *acc += gi / ai;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(a).data().to_vec();
                self.add_grad(a, |buf| {
                    for ((acc, gi), ai) in buf.iter_mut().zip(g).zip(&av) {
                        if *ai > 0.0 {
                            *acc += gi;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.add_grad(a, |buf| {
                    for acc in buf.iter_mut() {
                        *acc += g0;
                    }
                });
            }
            Op::SumList(ids) => {
                for id in ids {
                    self.add_grad(id, |buf| {
                        for (acc, gi) in buf.iter_mut().zip(g) {
                            *acc += gi;
                        }
                    });
                }
            }
            Op::Select(a, idx) => {
                let g0 = g[0];
                self.add_grad(a, |buf| buf[idx] += g0);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            } => self.conv2d_backward(index, input, kernel, bias, padding, g),
            Op::ConcatChannels(ids) => {
                let mut offset = 0;
                for id in ids {
                    let len = self.value(id).len();
                    let slice = &g[offset..offset + len];
                    self.add_grad(id, |buf| {
                        for (acc, gi) in buf.iter_mut().zip(slice) {
                            *acc += gi;
                        }
                    });
                    offset += len;
                }
            }
            Op::GlobalAvgPool(a) => {
                let (h, w) = match self.value(a).shape() {
                    [_, h, w] => (*h, *w),
                    _ => unreachable!("validated at forward"),
                };
                let inv = 1.0 / (h * w) as f64;
                self.add_grad(a, |buf| {
                    for (ci, gc) in g.iter().enumerate() {
                        let contribution = gc * inv;
                        for acc in &mut buf[ci * h * w..(ci + 1) * h * w] {
                            *acc += contribution;
                        }
                    }
                });
            }
            Op::AvgPoolHalf(a) => {
                let (h, w) = match self.value(a).shape() {
                    [_, h, w] => (*h, *w),
                    _ => unreachable!("validated at forward"),
                };
                let out_h = h.div_ceil(2);
                let out_w = w.div_ceil(2);
                self.add_grad(a, |buf| {
                    for (flat, gv) in g.iter().enumerate() {
                        let ci = flat / (out_h * out_w);
                        let rem = flat % (out_h * out_w);
                        let (oy, ox) = (rem / out_w, rem % out_w);
                        let ys = 2 * oy..(2 * oy + 2).min(h);
                        let xs = 2 * ox..(2 * ox + 2).min(w);
                        let share = gv / (ys.len() * xs.len()) as f64;
                        for y in ys {
                            for x in xs.clone() {
                                buf[ci * h * w + y * w + x] += share;
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let out = self.nodes[index].value.data().to_vec();
                let dot: f64 = g.iter().zip(&out).map(|(gi, oi)| gi * oi).sum();
                self.add_grad(a, |buf| {
                    for ((acc, gi), oi) in buf.iter_mut().zip(g).zip(&out) {
                        *acc += oi * (gi - dot);
                    }
                });
            }
            Op::CrossEntropy { pred, label } => {
                let g0 = g[0];
                let pv = self.value(pred).data().to_vec();
                let lv = self.value(label).data().to_vec();
                self.add_grad(pred, |buf| {
                    for ((acc, pi), li) in buf.iter_mut().zip(&pv).zip(&lv) {
                        if *pi > PROB_EPS {
                            *acc -= g0 * li / pi;
                        }
                    }
                });
            }
        }
    }

    fn conv2d_backward(
        &mut self,
        out_index: usize,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        padding: usize,
        g: &[f64],
    ) {
        let (c_in, h, w) = match self.value(input).shape() {
            [c, h, w] => (*c, *h, *w),
            _ => unreachable!("validated at forward"),
        };
        let (c_out, _, k, _) = match self.value(kernel).shape() {
            [o, i, kh, kw] => (*o, *i, *kh, *kw),
            _ => unreachable!("validated at forward"),
        };
        let (out_h, out_w) = match self.nodes[out_index].value.shape() {
            [_, oh, ow] => (*oh, *ow),
            _ => unreachable!(),
        };

        if self.nodes[bias.0].tracked {
            let mut d_bias = vec![0.0; c_out];
            for co in 0..c_out {
                d_bias[co] = g[co * out_h * out_w..(co + 1) * out_h * out_w]
                    .iter()
                    .sum();
            }
            self.add_grad(bias, |buf| {
                for (acc, d) in buf.iter_mut().zip(&d_bias) {
                    *acc += d;
                }
            });
        }

        if self.nodes[kernel.0].tracked {
            let in_data = self.value(input).data().to_vec();
            let mut d_kernel = vec![0.0; c_out * c_in * k * k];
            for co in 0..c_out {
                let g_ch = &g[co * out_h * out_w..(co + 1) * out_h * out_w];
                for ci in 0..c_in {
                    let in_ch = &in_data[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0;
                            let (oy_lo, oy_hi) = shift_range(out_h, h, ky, padding);
                            let (ox_lo, ox_hi) = shift_range(out_w, w, kx, padding);
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - padding;
                                let g_row = &g_ch[oy * out_w + ox_lo..oy * out_w + ox_hi];
                                let in_row = &in_ch
                                    [iy * w + ox_lo + kx - padding..iy * w + ox_hi + kx - padding];
                                for (gv, iv) in g_row.iter().zip(in_row) {
                                    acc += gv * iv;
                                }
                            }
                            d_kernel[((co * c_in + ci) * k + ky) * k + kx] = acc;
                        }
                    }
                }
            }
            self.add_grad(kernel, |buf| {
                for (acc, d) in buf.iter_mut().zip(&d_kernel) {
                    *acc += d;
                }
            });
        }

        if self.nodes[input.0].tracked {
            let k_data = self.value(kernel).data().to_vec();
            let mut d_input = vec![0.0; c_in * h * w];
            for co in 0..c_out {
                let g_ch = &g[co * out_h * out_w..(co + 1) * out_h * out_w];
                for ci in 0..c_in {
                    let d_ch = &mut d_input[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let weight = k_data[((co * c_in + ci) * k + ky) * k + kx];
                            let (oy_lo, oy_hi) = shift_range(out_h, h, ky, padding);
                            let (ox_lo, ox_hi) = shift_range(out_w, w, kx, padding);
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - padding;
                                let g_row = &g_ch[oy * out_w + ox_lo..oy * out_w + ox_hi];
                                let d_row = &mut d_ch
                                    [iy * w + ox_lo + kx - padding..iy * w + ox_hi + kx - padding];
                                for (dv, gv) in d_row.iter_mut().zip(g_row) {
                                    *dv += weight * gv;
                                }
                            }
                        }
                    }
                }
            }
            self.add_grad(input, |buf| {
                for (acc, d) in buf.iter_mut().zip(&d_input) {
                    *acc += d;
                }
            });
        }
    }
}

/// Output coordinates `o` for which `o + k_off - padding` lands inside the
/// input extent: the half-open range over one spatial axis.
fn shift_range(out_extent: usize, in_extent: usize, k_off: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k_off);
    let hi = (in_extent + padding - k_off).min(out_extent);
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn accumulate_shifted(
    out_ch: &mut [f64],
    in_ch: &[f64],
    weight: f64,
    out_h: usize,
    out_w: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    padding: usize,
) {
    let (oy_lo, oy_hi) = shift_range(out_h, h, ky, padding);
    let (ox_lo, ox_hi) = shift_range(out_w, w, kx, padding);
    for oy in oy_lo..oy_hi {
        let iy = oy + ky - padding;
        let out_row = &mut out_ch[oy * out_w + ox_lo..oy * out_w + ox_hi];
        let in_row = &in_ch[iy * w + ox_lo + kx - padding..iy * w + ox_hi + kx - padding];
        for (ov, iv) in out_row.iter_mut().zip(in_row) {
            *ov += weight * iv;
        }
    }
}
