use std::sync::Arc;

use super::conv::{col2im, conv_out, deconv_out, im2col, KERNEL};
use super::{matmul, Mat, NnError, ParamSet, Real, Result, Tensor};

const K2: usize = KERNEL * KERNEL;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    in_c: usize,
    out_c: usize,
    /// Side of the large image (conv input, transposed conv output).
    big: usize,
    /// Side of the small grid (conv output, transposed conv input).
    small: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(usize),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Conv { x: NodeId, w: NodeId, b: NodeId, d: ConvDims },
    Deconv { x: NodeId, w: NodeId, b: NodeId, d: ConvDims },
    Relu(NodeId),
    Concat(NodeId, NodeId),
    Slice { x: NodeId, start: usize, len: usize },
    Reshape(NodeId),
    Reparam { mu: NodeId, logvar: NodeId, eps: Vec<T> },
    Mse(NodeId, NodeId),
    Kl { mu: NodeId, logvar: NodeId },
    Add(NodeId, NodeId),
    Scale(NodeId, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded operations.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    stamp: Option<(u64, u64)>,
}

/// Parameter gradients, indexed like the [`ParamSet`] they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, i: usize) -> Option<&Tensor<T>> {
        self.grads.get(i).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(NnError::Shape(msg))
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            stamp: None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients are not propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Input that receives a gradient, for checking input sensitivities.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    fn check_stamp(&mut self, params: &ParamSet<T>) -> Result<()> {
        match self.stamp {
            None => {
                self.stamp = Some(params.stamp());
                Ok(())
            }
            Some(s) if s == params.stamp() => Ok(()),
            Some(_) => Err(NnError::StaleTape),
        }
    }

    pub fn param(&mut self, params: &ParamSet<T>, index: usize) -> Result<NodeId> {
        if index >= params.len() {
            return shape_err(format!("no parameter {index}"));
        }
        self.check_stamp(params)?;
        let value = params.shared(index);
        self.nodes.push(Node {
            value,
            op: Op::Param(index),
            needs_grad: true,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn param_named(&mut self, params: &ParamSet<T>, name: &str) -> Result<NodeId> {
        let i = params
            .index_of(name)
            .ok_or_else(|| NnError::Shape(format!("no parameter named `{name}`")))?;
        self.param(params, i)
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        match self.value(id).shape() {
            [r, c] => Ok((*r, *c)),
            s => shape_err(format!("{what} must be 2-D, got {s:?}")),
        }
    }

    /// `x * w + b` with `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (batch, inputs) = self.dims2(x, "linear input")?;
        let (w_in, outputs) = self.dims2(w, "linear weight")?;
        if w_in != inputs || self.value(b).shape() != [outputs] {
            return shape_err(format!(
                "linear {:?} x {:?} + {:?}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = vec![T::ZERO; batch * outputs];
        let bias = self.value(b).data();
        for row in out.chunks_mut(outputs) {
            row.copy_from_slice(bias);
        }
        matmul(
            Mat::new(self.value(x).data(), batch, inputs),
            Mat::new(self.value(w).data(), inputs, outputs),
            T::ONE,
            &mut out,
        );
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![batch, outputs], out)?,
            Op::Linear { x, w, b },
            needs,
        ))
    }

    fn conv_dims(&self, x: NodeId, what: &str) -> Result<(usize, usize, usize)> {
        match self.value(x).shape() {
            [b, c, h, w] if h == w => Ok((*b, *c, *h)),
            s => shape_err(format!("{what} input must be [B, C, S, S], got {s:?}")),
        }
    }

    /// Kernel-4 stride-2 convolution: `x: [B, C, S, S]`, `w: [OC, C*16]`,
    /// `b: [OC]` gives `[B, OC, (S-4)/2+1, ...]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (batch, in_c, big) = self.conv_dims(x, "conv2d")?;
        let (out_c, wk) = self.dims2(w, "conv2d weight")?;
        let Some(small) = conv_out(big) else {
            return shape_err(format!("conv2d input side {big} is smaller than the kernel"));
        };
        if wk != in_c * K2 || self.value(b).shape() != [out_c] {
            return shape_err(format!(
                "conv2d weight {:?} / bias {:?} for {in_c} input channels",
                self.value(w).shape(),
                self.value(b).shape()
            ));
        }
        let d = ConvDims {
            batch,
            in_c,
            out_c,
            big,
            small,
        };
        let p = small * small;
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let bias = self.value(b).data();
        let mut cols = vec![T::ZERO; in_c * K2 * p];
        let mut out = vec![T::ZERO; batch * out_c * p];
        for (s, y) in out.chunks_mut(out_c * p).enumerate() {
            im2col(&xin[s * in_c * big * big..(s + 1) * in_c * big * big], in_c, big, big, small, small, &mut cols);
            for (oc, row) in y.chunks_mut(p).enumerate() {
                row.fill(bias[oc]);
            }
            matmul(Mat::new(wt, out_c, in_c * K2), Mat::new(&cols, in_c * K2, p), T::ONE, y);
        }
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![batch, out_c, small, small], out)?,
            Op::Conv { x, w, b, d },
            needs,
        ))
    }

    /// Kernel-4 stride-2 transposed convolution: `x: [B, C, S, S]`,
    /// `w: [C, OC*16]`, `b: [OC]` gives `[B, OC, 2(S-1)+4, ...]`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (batch, in_c, small) = self.conv_dims(x, "conv_transpose2d")?;
        let (w_in, wk) = self.dims2(w, "conv_transpose2d weight")?;
        let out_c = wk / K2;
        if w_in != in_c || wk % K2 != 0 || self.value(b).shape() != [out_c] {
            return shape_err(format!(
                "conv_transpose2d weight {:?} / bias {:?} for {in_c} input channels",
                self.value(w).shape(),
                self.value(b).shape()
            ));
        }
        let big = deconv_out(small);
        let d = ConvDims {
            batch,
            in_c,
            out_c,
            big,
            small,
        };
        let p = small * small;
        let plane = big * big;
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let bias = self.value(b).data();
        let mut cols = vec![T::ZERO; out_c * K2 * p];
        let mut out = vec![T::ZERO; batch * out_c * plane];
        for (s, y) in out.chunks_mut(out_c * plane).enumerate() {
            matmul(
                Mat::new(wt, in_c, out_c * K2).t(),
                Mat::new(&xin[s * in_c * p..(s + 1) * in_c * p], in_c, p),
                T::ZERO,
                &mut cols,
            );
            for (oc, ch) in y.chunks_mut(plane).enumerate() {
                ch.fill(bias[oc]);
            }
            col2im(&cols, out_c, big, big, small, small, y);
        }
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![batch, out_c, big, big], out)?,
            Op::Deconv { x, w, b, d },
            needs,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&a| if a > T::ZERO { a } else { T::ZERO })
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(&[x]);
        self.push(t, Op::Relu(x), needs)
    }

    /// Joins `[B, Fa]` and `[B, Fb]` into `[B, Fa + Fb]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.dims2(a, "concat operand")?;
        let (rb, cb) = self.dims2(b, "concat operand")?;
        if ra != rb {
            return shape_err(format!("concat of {ra} and {rb} rows"));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(self.value(a).row(r));
            out.extend_from_slice(self.value(b).row(r));
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![ra, ca + cb], out)?, Op::Concat(a, b), needs))
    }

    /// Columns `start..start + len` of a `[B, F]` tensor.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.dims2(x, "slice input")?;
        if start + len > cols {
            return shape_err(format!("slice {start}..{} of {cols} columns", start + len));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.value(x).row(r)[start..start + len]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, len], out)?,
            Op::Slice { x, start, len },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// `mu + exp(logvar / 2) * eps` with caller-supplied noise.
    pub fn reparameterize(&mut self, mu: NodeId, logvar: NodeId, eps: &Tensor<T>) -> Result<NodeId> {
        let (m, lv) = (self.value(mu), self.value(logvar));
        if m.shape() != lv.shape() || m.shape() != eps.shape() {
            return shape_err(format!(
                "reparameterize {:?}, {:?}, {:?}",
                m.shape(),
                lv.shape(),
                eps.shape()
            ));
        }
        let half = T::from_f64(0.5);
        let data = m
            .data()
            .iter()
            .zip(lv.data())
            .zip(eps.data())
            .map(|((&a, &l), &e)| a + (half * l).exp() * e)
            .collect();
        let t = Tensor::new(m.shape().to_vec(), data)?;
        let needs = self.needs(&[mu, logvar]);
        Ok(self.push(
            t,
            Op::Reparam {
                mu,
                logvar,
                eps: eps.data().to_vec(),
            },
            needs,
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.is_empty() {
            return shape_err(format!("mse of {:?} and {:?}", va.shape(), vb.shape()));
        }
        let mut acc = T::ZERO;
        for (&x, &y) in va.data().iter().zip(vb.data()) {
            acc += (x - y) * (x - y);
        }
        let v = acc / T::from_f64(va.len() as f64);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![1], vec![v])?, Op::Mse(a, b), needs))
    }

    /// KL divergence of `N(mu, exp(logvar))` to `N(0, I)`, summed over the
    /// latent dimensions and averaged over the batch (leading axis of a 2-D
    /// input; a 1-D input is one distribution).
    pub fn kl(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
        let (m, lv) = (self.value(mu), self.value(logvar));
        if m.shape() != lv.shape() || m.is_empty() {
            return shape_err(format!("kl of {:?} and {:?}", m.shape(), lv.shape()));
        }
        let batch = batch_of(m);
        let mut acc = T::ZERO;
        for (&a, &l) in m.data().iter().zip(lv.data()) {
            acc += a * a + l.exp() - T::ONE - l;
        }
        let v = T::from_f64(0.5) * acc / T::from_f64(batch as f64);
        let needs = self.needs(&[mu, logvar]);
        Ok(self.push(Tensor::new(vec![1], vec![v])?, Op::Kl { mu, logvar }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(format!("add of {:?} and {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * c).collect())
            .expect("same shape");
        let needs = self.needs(&[x]);
        self.push(t, Op::Scale(x, c), needs)
    }

    /// Gradients of a scalar node with respect to every parameter.
    pub fn backward(&self, loss: NodeId, params: &ParamSet<T>) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            ));
        }
        let seed = Tensor::new(self.value(loss).shape().to_vec(), vec![T::ONE])?;
        self.backward_from(loss, &seed, params)
    }

    /// Reverse pass seeded with `out_grad` at `output`.
    pub fn backward_from(&self, output: NodeId, out_grad: &Tensor<T>, params: &ParamSet<T>) -> Result<Grads<T>> {
        if let Some(s) = self.stamp {
            if s != params.stamp() {
                return Err(NnError::StaleTape);
            }
        }
        if out_grad.shape() != self.value(output).shape() {
            return shape_err(format!(
                "output gradient {:?} for value {:?}",
                out_grad.shape(),
                self.value(output).shape()
            ));
        }
        let (param_grads, _) = self.reverse(output, out_grad, params.len());
        Ok(param_grads)
    }

    /// Gradient with respect to a [`Graph::variable`] input.
    pub fn input_grad(&self, output: NodeId, out_grad: &Tensor<T>, input: NodeId) -> Result<Tensor<T>> {
        let (_, mut node_grads) = self.reverse(output, out_grad, 0);
        let g = node_grads[input.0]
            .take()
            .unwrap_or_else(|| vec![T::ZERO; self.value(input).len()]);
        Tensor::new(self.value(input).shape().to_vec(), g)
    }

    fn reverse(&self, output: NodeId, out_grad: &Tensor<T>, n_params: usize) -> (Grads<T>, Vec<Option<Vec<T>>>) {
        let mut g: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor<T>>> = (0..n_params).map(|_| None).collect();
        g[output.0] = Some(out_grad.data().to_vec());
        for id in (0..=output.0).rev() {
            let Some(dy) = g[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => g[id] = Some(dy),
                Op::Param(i) => {
                    let slot = &mut param_grads[*i];
                    match slot {
                        Some(t) => add_into(t.data_mut(), &dy),
                        None => {
                            *slot = Some(Tensor::new(node.value.shape().to_vec(), dy).expect("param shape"))
                        }
                    }
                }
                op => self.propagate(op, &dy, &mut g),
            }
        }
        (Grads { grads: param_grads }, g)
    }

    fn grad_slot<'a>(&self, g: &'a mut [Option<Vec<T>>], id: NodeId) -> Option<&'a mut Vec<T>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let n = self.nodes[id.0].value.len();
        Some(g[id.0].get_or_insert_with(|| vec![T::ZERO; n]))
    }

    fn propagate(&self, op: &Op<T>, dy: &[T], g: &mut [Option<Vec<T>>]) {
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Linear { x, w, b } => {
                let (batch, inputs) = (self.value(x).shape()[0], self.value(x).shape()[1]);
                let outputs = self.value(w).shape()[1];
                let dy_m = Mat::new(dy, batch, outputs);
                if let Some(dx) = self.grad_slot(g, x) {
                    matmul(dy_m, Mat::new(self.value(w).data(), inputs, outputs).t(), T::ONE, dx);
                }
                if let Some(dw) = self.grad_slot(g, w) {
                    matmul(Mat::new(self.value(x).data(), batch, inputs).t(), dy_m, T::ONE, dw);
                }
                if let Some(db) = self.grad_slot(g, b) {
                    for row in dy.chunks(outputs) {
                        add_into(db, row);
                    }
                }
            }
            Op::Conv { x, w, b, d } => {
                let p = d.small * d.small;
                let img = d.in_c * d.big * d.big;
                let ck = d.in_c * K2;
                let xin = self.value(x).data();
                let wt = self.value(w).data();
                let mut cols = vec![T::ZERO; ck * p];
                let mut dcols = vec![T::ZERO; ck * p];
                let want_x = self.nodes[x.0].needs_grad;
                let want_w = self.nodes[w.0].needs_grad;
                for s in 0..d.batch {
                    let dys = &dy[s * d.out_c * p..(s + 1) * d.out_c * p];
                    if want_w {
                        im2col(&xin[s * img..(s + 1) * img], d.in_c, d.big, d.big, d.small, d.small, &mut cols);
                        let dw = self.grad_slot(g, w).expect("weight grad");
                        matmul(Mat::new(dys, d.out_c, p), Mat::new(&cols, ck, p).t(), T::ONE, dw);
                    }
                    if want_x {
                        matmul(Mat::new(wt, d.out_c, ck).t(), Mat::new(dys, d.out_c, p), T::ZERO, &mut dcols);
                        let dx = self.grad_slot(g, x).expect("input grad");
                        col2im(&dcols, d.in_c, d.big, d.big, d.small, d.small, &mut dx[s * img..(s + 1) * img]);
                    }
                    if let Some(db) = self.grad_slot(g, b) {
                        for (oc, row) in dys.chunks(p).enumerate() {
                            db[oc] += row.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::Deconv { x, w, b, d } => {
                let p = d.small * d.small;
                let plane = d.big * d.big;
                let ok = d.out_c * K2;
                let xin = self.value(x).data();
                let wt = self.value(w).data();
                let mut dcols = vec![T::ZERO; ok * p];
                let want_x = self.nodes[x.0].needs_grad;
                let want_w = self.nodes[w.0].needs_grad;
                for s in 0..d.batch {
                    let dys = &dy[s * d.out_c * plane..(s + 1) * d.out_c * plane];
                    if want_x || want_w {
                        im2col(dys, d.out_c, d.big, d.big, d.small, d.small, &mut dcols);
                    }
                    if want_x {
                        let dx = self.grad_slot(g, x).expect("input grad");
                        matmul(
                            Mat::new(wt, d.in_c, ok),
                            Mat::new(&dcols, ok, p),
                            T::ONE,
                            &mut dx[s * d.in_c * p..(s + 1) * d.in_c * p],
                        );
                    }
                    if want_w {
                        let dw = self.grad_slot(g, w).expect("weight grad");
                        matmul(
                            Mat::new(&xin[s * d.in_c * p..(s + 1) * d.in_c * p], d.in_c, p),
                            Mat::new(&dcols, ok, p).t(),
                            T::ONE,
                            dw,
                        );
                    }
                    if let Some(db) = self.grad_slot(g, b) {
                        for (oc, ch) in dys.chunks(plane).enumerate() {
                            db[oc] += ch.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(x).data();
                if let Some(dx) = self.grad_slot(g, x) {
                    for ((d, &v), &u) in dx.iter_mut().zip(xv).zip(dy) {
                        if v > T::ZERO {
                            *d += u;
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let ca = self.value(a).shape()[1];
                let cb = self.value(b).shape()[1];
                if let Some(da) = self.grad_slot(g, a) {
                    for (r, row) in dy.chunks(ca + cb).enumerate() {
                        add_into(&mut da[r * ca..(r + 1) * ca], &row[..ca]);
                    }
                }
                if let Some(db) = self.grad_slot(g, b) {
                    for (r, row) in dy.chunks(ca + cb).enumerate() {
                        add_into(&mut db[r * cb..(r + 1) * cb], &row[ca..]);
                    }
                }
            }
            Op::Slice { x, start, len } => {
                let cols = self.value(x).shape()[1];
                if let Some(dx) = self.grad_slot(g, x) {
                    for (r, row) in dy.chunks(len).enumerate() {
                        add_into(&mut dx[r * cols + start..r * cols + start + len], row);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.grad_slot(g, x) {
                    add_into(dx, dy);
                }
            }
            Op::Reparam { mu, logvar, ref eps } => {
                if let Some(dm) = self.grad_slot(g, mu) {
                    add_into(dm, dy);
                }
                let lv = self.value(logvar).data();
                let half = T::from_f64(0.5);
                if let Some(dl) = self.grad_slot(g, logvar) {
                    for (((d, &l), &e), &u) in dl.iter_mut().zip(lv).zip(eps).zip(dy) {
                        *d += u * half * (half * l).exp() * e;
                    }
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let k = T::from_f64(2.0 / va.len() as f64) * dy[0];
                if let Some(da) = self.grad_slot(g, a) {
                    for ((d, &x), &y) in da.iter_mut().zip(va).zip(vb) {
                        *d += k * (x - y);
                    }
                }
                if let Some(db) = self.grad_slot(g, b) {
                    for ((d, &x), &y) in db.iter_mut().zip(va).zip(vb) {
                        *d += k * (y - x);
                    }
                }
            }
            Op::Kl { mu, logvar } => {
                let m = self.value(mu);
                let k = dy[0] / T::from_f64(batch_of(m) as f64);
                let (mv, lv) = (m.data(), self.value(logvar).data());
                if let Some(dm) = self.grad_slot(g, mu) {
                    for (d, &a) in dm.iter_mut().zip(mv) {
                        *d += k * a;
                    }
                }
                let half = T::from_f64(0.5);
                if let Some(dl) = self.grad_slot(g, logvar) {
                    for (d, &l) in dl.iter_mut().zip(lv) {
                        *d += k * half * (l.exp() - T::ONE);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.grad_slot(g, a) {
                    add_into(da, dy);
                }
                if let Some(db) = self.grad_slot(g, b) {
                    add_into(db, dy);
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.grad_slot(g, x) {
                    for (d, &u) in dx.iter_mut().zip(dy) {
                        *d += c * u;
                    }
                }
            }
        }
    }
}

fn batch_of<T: Real>(t: &Tensor<T>) -> usize {
    if t.shape().len() >= 2 {
        t.shape()[0].max(1)
    } else {
        1
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
