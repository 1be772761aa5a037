//! Tape-based reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Graph`] records every forward op in creation order, so reverse index
//! order is a valid topological order for the backward sweep. Parameters enter
//! the tape once per graph: repeated [`Graph::param`] calls for the same name
//! return the same [`Var`], which is how branch weight sharing is realized.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    idx: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

impl From<Var> for Operand {
    fn from(v: Var) -> Self {
        Operand::Var(v)
    }
}

impl From<f64> for Operand {
    fn from(s: f64) -> Self {
        Operand::Scalar(s)
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<String> },
    Binary { kind: ElementwiseKind, a: usize, b: usize },
    Scalar { kind: ElementwiseKind, a: usize, s: f64 },
    Conv { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    AvgPool { x: usize, factor: usize },
    Upsample { x: usize, factor: usize },
    DepthToSpace { x: usize, factor: usize },
    Relu(usize),
    Sigmoid(usize),
    Concat { a: usize, b: usize },
    // out = mask ? take : keep
    Mix { keep: usize, take: usize, mask: Rc<Vec<bool>> },
    Sum(usize),
    Mean(usize),
    Bce { z: usize, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    macs: u64,
    non_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            macs: 0,
            non_finite: false,
        }
    }

    /// Multiply-accumulates executed by every op recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// True once any forward op produced a NaN or infinity.
    pub fn saw_non_finite(&self) -> bool {
        self.non_finite
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        if !self.non_finite && value.iter().any(|v| !v.is_finite()) {
            self.non_finite = true;
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {v:?} is not recorded on graph {}",
                self.id
            )));
        }
        Ok(&self.nodes[v.idx])
    }

    fn idx(&self, v: Var) -> Result<usize> {
        self.node(v).map(|_| v.idx)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            false,
        )
    }

    /// Input leaf whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            true,
        )
    }

    /// Leaf bound to a named parameter. The same name always maps to the same `Var`.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))?;
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf {
                param: Some(name.to_string()),
            },
            true,
        );
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).expect("var from this graph").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).expect("var from this graph").shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v).expect("var from this graph");
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: impl Into<Operand>) -> Result<Var> {
        let ai = self.idx(a)?;
        match b.into() {
            Operand::Var(b) => {
                let bi = self.idx(b)?;
                let (na, nb) = (&self.nodes[ai], &self.nodes[bi]);
                if na.shape != nb.shape {
                    return Err(Error::ShapeMismatch {
                        op: "elementwise",
                        lhs: na.shape.clone(),
                        rhs: nb.shape.clone(),
                    });
                }
                let f = match kind {
                    ElementwiseKind::Add => |x: f64, y: f64| x + y,
                    ElementwiseKind::Sub => |x: f64, y: f64| x - y,
                    ElementwiseKind::Mul => |x: f64, y: f64| x * y,
                };
                let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
                let shape = na.shape.clone();
                let ng = na.needs_grad || nb.needs_grad;
                Ok(self.push(shape, value, Op::Binary { kind, a: ai, b: bi }, ng))
            }
            Operand::Scalar(s) => {
                let na = &self.nodes[ai];
                let value = na
                    .value
                    .iter()
                    .map(|&x| match kind {
                        ElementwiseKind::Add => x + s,
                        ElementwiseKind::Sub => x - s,
                        ElementwiseKind::Mul => x * s,
                    })
                    .collect();
                let shape = na.shape.clone();
                let ng = na.needs_grad;
                Ok(self.push(shape, value, Op::Scalar { kind, a: ai, s }, ng))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Mul, a, b)
    }

    /// Cross-correlation of `x: [C,H,W]` with `w: [K,C,kh,kw]` plus `bias: [K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(bias)?);
        let (xs, ws, bs) = (
            &self.nodes[xi].shape,
            &self.nodes[wi].shape,
            &self.nodes[bi].shape,
        );
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs.clone(),
                rhs: ws.clone(),
            });
        }
        if bs.as_slice() != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: bs.clone(),
                rhs: vec![ws[0]],
            });
        }
        let geom = ConvGeom::new([xs[0], xs[1], xs[2]], [ws[0], ws[2], ws[3]], stride, pad)?;
        let mut out = vec![0.0; geom.k * geom.oh * geom.ow];
        conv_forward(
            &geom,
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
            &mut out,
        );
        self.macs += geom.macs();
        let ng = self.nodes[xi].needs_grad || self.nodes[wi].needs_grad || self.nodes[bi].needs_grad;
        Ok(self.push(
            vec![geom.k, geom.oh, geom.ow],
            out,
            Op::Conv {
                x: xi,
                w: wi,
                b: bi,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// Average pooling over non-overlapping `factor x factor` windows.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let [c, h, w] = chw(&self.nodes[xi].shape, "avg_pool")?;
        if factor < 2 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "avg_pool factor {factor} does not divide {h}x{w}"
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let src = &self.nodes[xi].value;
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * oh + y / factor) * ow + x / factor] += src[(ch * h + y) * w + x];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        let ng = self.nodes[xi].needs_grad;
        Ok(self.push(vec![c, oh, ow], out, Op::AvgPool { x: xi, factor }, ng))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let [c, h, w] = chw(&self.nodes[xi].shape, "upsample")?;
        if factor < 2 {
            return Err(Error::Config(format!("upsample factor must be >= 2, got {factor}")));
        }
        let (oh, ow) = (h * factor, w * factor);
        let src = &self.nodes[xi].value;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let srow = &src[(ch * h + y / factor) * w..][..w];
                let orow = &mut out[(ch * oh + y) * ow..][..ow];
                for (x, o) in orow.iter_mut().enumerate() {
                    *o = srow[x / factor];
                }
            }
        }
        let ng = self.nodes[xi].needs_grad;
        Ok(self.push(vec![c, oh, ow], out, Op::Upsample { x: xi, factor }, ng))
    }

    /// Rearranges `[C*f*f, H, W]` into `[C, H*f, W*f]` (sub-pixel upsampling).
    pub fn depth_to_space(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let [cin, h, w] = chw(&self.nodes[xi].shape, "depth_to_space")?;
        let ff = factor * factor;
        if factor < 2 || cin % ff != 0 {
            return Err(Error::Config(format!(
                "depth_to_space factor {factor} incompatible with {cin} channels"
            )));
        }
        let c = cin / ff;
        let (oh, ow) = (h * factor, w * factor);
        let src = &self.nodes[xi].value;
        let mut out = vec![0.0; c * oh * ow];
        for (i, o) in out.iter_mut().enumerate() {
            *o = src[d2s_source(i, c, h, w, factor)];
        }
        let ng = self.nodes[xi].needs_grad;
        Ok(self.push(vec![c, oh, ow], out, Op::DepthToSpace { x: xi, factor }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = &self.nodes[xi];
        let value = n.value.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        Ok(self.push(shape, value, Op::Relu(xi), ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = &self.nodes[xi];
        let value = n.value.iter().map(|&v| sigmoid(v)).collect();
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        Ok(self.push(shape, value, Op::Sigmoid(xi), ng))
    }

    /// Stacks two `[C,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let shape = vec![sa[0] + sb[0], sa[1], sa[2]];
        let mut value = self.nodes[ai].value.clone();
        value.extend_from_slice(&self.nodes[bi].value);
        let ng = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
        Ok(self.push(shape, value, Op::Concat { a: ai, b: bi }, ng))
    }

    /// Elementwise selection `mask ? take : keep`, the binary-mask exchange primitive.
    pub fn mix(&mut self, keep: Var, take: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let (ki, ti) = (self.idx(keep)?, self.idx(take)?);
        let (nk, nt) = (&self.nodes[ki], &self.nodes[ti]);
        if nk.shape != nt.shape {
            return Err(Error::ShapeMismatch {
                op: "mix",
                lhs: nk.shape.clone(),
                rhs: nt.shape.clone(),
            });
        }
        if mask.len() != nk.value.len() {
            return Err(Error::Contract(format!(
                "mix mask has {} entries for {} values",
                mask.len(),
                nk.value.len()
            )));
        }
        let value = nk
            .value
            .iter()
            .zip(&nt.value)
            .zip(mask.iter())
            .map(|((&k, &t), &m)| if m { t } else { k })
            .collect();
        let shape = nk.shape.clone();
        let ng = nk.needs_grad || nt.needs_grad;
        Ok(self.push(shape, value, Op::Mix { keep: ki, take: ti, mask }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.iter().sum();
        let ng = self.nodes[xi].needs_grad;
        Ok(self.push(vec![1], vec![s], Op::Sum(xi), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = &self.nodes[xi];
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let ng = n.needs_grad;
        Ok(self.push(vec![1], vec![s], Op::Mean(xi), ng))
    }

    /// Mean binary cross-entropy on logits, in the overflow-free log-sum form.
    pub fn bce_with_logits(&mut self, z: Var, target: &Tensor) -> Result<Var> {
        let zi = self.idx(z)?;
        let n = &self.nodes[zi];
        if n.shape != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: n.shape.clone(),
                rhs: target.shape().to_vec(),
            });
        }
        if let Some(bad) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Contract(format!(
                "bce_with_logits target must be binary, found {bad}"
            )));
        }
        let total: f64 = n
            .value
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| bce_term(z, t))
            .sum();
        let loss = total / n.value.len() as f64;
        let ng = n.needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Bce {
                z: zi,
                target: target.data().to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every grad-tracking leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);
        let mut leaves = Vec::new();

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf { param } => leaves.push(LeafGrad {
                    idx: i,
                    param: param.clone(),
                    grad: g,
                }),
                Op::Binary { kind, a, b } => {
                    let (a, b) = (*a, *b);
                    match kind {
                        ElementwiseKind::Add => {
                            self.send(&mut grads, a, || g.clone());
                            self.send(&mut grads, b, || g.clone());
                        }
                        ElementwiseKind::Sub => {
                            self.send(&mut grads, a, || g.clone());
                            self.send(&mut grads, b, || g.iter().map(|v| -v).collect());
                        }
                        ElementwiseKind::Mul => {
                            let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                            self.send(&mut grads, a, || g.iter().zip(vb).map(|(g, y)| g * y).collect());
                            self.send(&mut grads, b, || g.iter().zip(va).map(|(g, x)| g * x).collect());
                        }
                    }
                }
                Op::Scalar { kind, a, s } => {
                    let s = *s;
                    match kind {
                        ElementwiseKind::Add | ElementwiseKind::Sub => {
                            self.send(&mut grads, *a, || g.clone())
                        }
                        ElementwiseKind::Mul => {
                            self.send(&mut grads, *a, || g.iter().map(|v| v * s).collect())
                        }
                    }
                }
                Op::Conv { x, w, b, stride, pad } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (xs, ws) = (&self.nodes[x].shape, &self.nodes[w].shape);
                    let geom = ConvGeom::new([xs[0], xs[1], xs[2]], [ws[0], ws[2], ws[3]], *stride, *pad)
                        .expect("validated in forward");
                    let want_x = self.nodes[x].needs_grad;
                    let want_w = self.nodes[w].needs_grad;
                    let mut dx = if want_x { vec![0.0; self.nodes[x].value.len()] } else { Vec::new() };
                    let mut dw = if want_w { vec![0.0; self.nodes[w].value.len()] } else { Vec::new() };
                    conv_backward(
                        &geom,
                        &self.nodes[x].value,
                        &self.nodes[w].value,
                        &g,
                        want_x.then_some(dx.as_mut_slice()),
                        want_w.then_some(dw.as_mut_slice()),
                    );
                    if want_x {
                        self.send(&mut grads, x, || dx);
                    }
                    if want_w {
                        self.send(&mut grads, w, || dw);
                    }
                    self.send(&mut grads, b, || {
                        let plane = geom.oh * geom.ow;
                        g.chunks(plane).map(|c| c.iter().sum()).collect()
                    });
                }
                Op::AvgPool { x, factor } => {
                    let f = *factor;
                    let [c, h, w] = chw(&self.nodes[*x].shape, "avg_pool").expect("validated");
                    let (oh, ow) = (h / f, w / f);
                    let norm = 1.0 / (f * f) as f64;
                    self.send(&mut grads, *x, || {
                        let mut dx = vec![0.0; c * h * w];
                        for ch in 0..c {
                            for y in 0..h {
                                for xx in 0..w {
                                    dx[(ch * h + y) * w + xx] = g[(ch * oh + y / f) * ow + xx / f] * norm;
                                }
                            }
                        }
                        dx
                    });
                }
                Op::Upsample { x, factor } => {
                    let f = *factor;
                    let [c, h, w] = chw(&self.nodes[*x].shape, "upsample").expect("validated");
                    let (oh, ow) = (h * f, w * f);
                    self.send(&mut grads, *x, || {
                        let mut dx = vec![0.0; c * h * w];
                        for ch in 0..c {
                            for y in 0..oh {
                                let grow = &g[(ch * oh + y) * ow..][..ow];
                                let drow = &mut dx[(ch * h + y / f) * w..][..w];
                                for (xx, gv) in grow.iter().enumerate() {
                                    drow[xx / f] += gv;
                                }
                            }
                        }
                        dx
                    });
                }
                Op::DepthToSpace { x, factor } => {
                    let f = *factor;
                    let [cin, h, w] = chw(&self.nodes[*x].shape, "depth_to_space").expect("validated");
                    let c = cin / (f * f);
                    self.send(&mut grads, *x, || {
                        let mut dx = vec![0.0; cin * h * w];
                        for (i, gv) in g.iter().enumerate() {
                            dx[d2s_source(i, c, h, w, f)] = *gv;
                        }
                        dx
                    });
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].value;
                    self.send(&mut grads, *x, || {
                        g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect()
                    });
                }
                Op::Sigmoid(x) => {
                    let yv = &node.value;
                    self.send(&mut grads, *x, || g.iter().zip(yv).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
                Op::Concat { a, b } => {
                    let na = self.nodes[*a].value.len();
                    self.send(&mut grads, *a, || g[..na].to_vec());
                    self.send(&mut grads, *b, || g[na..].to_vec());
                }
                Op::Mix { keep, take, mask } => {
                    self.send(&mut grads, *keep, || {
                        g.iter().zip(mask.iter()).map(|(g, &m)| if m { 0.0 } else { *g }).collect()
                    });
                    self.send(&mut grads, *take, || {
                        g.iter().zip(mask.iter()).map(|(g, &m)| if m { *g } else { 0.0 }).collect()
                    });
                }
                Op::Sum(x) => {
                    let n = self.nodes[*x].value.len();
                    self.send(&mut grads, *x, || vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.nodes[*x].value.len();
                    self.send(&mut grads, *x, || vec![g[0] / n as f64; n]);
                }
                Op::Bce { z, target } => {
                    let zv = &self.nodes[*z].value;
                    let scale = g[0] / zv.len() as f64;
                    self.send(&mut grads, *z, || {
                        zv.iter().zip(target).map(|(&z, &t)| (sigmoid(z) - t) * scale).collect()
                    });
                }
            }
        }
        leaves.sort_by_key(|l| l.idx);
        Ok(Gradients {
            graph: self.id,
            leaves,
        })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(params)?;
        Ok(grads)
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], target: usize, make: impl FnOnce() -> Vec<f64>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let contribution = make();
        match &mut grads[target] {
            Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contribution),
        }
    }
}

#[derive(Debug)]
struct LeafGrad {
    idx: usize,
    param: Option<String>,
    grad: Vec<f64>,
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    leaves: Vec<LeafGrad>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.graph {
            return None;
        }
        self.leaves
            .binary_search_by_key(&v.idx, |l| l.idx)
            .ok()
            .map(|i| self.leaves[i].grad.as_slice())
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.leaves
            .iter()
            .find(|l| l.param.as_deref() == Some(name))
            .map(|l| l.grad.as_slice())
    }

    pub fn accumulate_into(&self, params: &mut ParamSet) -> Result<()> {
        for leaf in &self.leaves {
            if let Some(name) = &leaf.param {
                let t = params
                    .get_mut(name)
                    .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter {name}")))?;
                t.accumulate_grad(&leaf.grad);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn bce_term(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

fn chw(shape: &[usize], op: &'static str) -> Result<[usize; 3]> {
    match shape {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![0, 0, 0],
        }),
    }
}

fn d2s_source(out_idx: usize, c: usize, h: usize, w: usize, f: usize) -> usize {
    let (oh, ow) = (h * f, w * f);
    let ch = out_idx / (oh * ow);
    let rem = out_idx % (oh * ow);
    let (y, x) = (rem / ow, rem % ow);
    let sub = (y % f) * f + (x % f);
    debug_assert!(ch < c);
    ((ch * f * f + sub) * h + y / f) * w + x / f
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: [usize; 3], kernel: [usize; 3], stride: usize, pad: usize) -> Result<Self> {
        let [c, h, w] = input;
        let [k, kh, kw] = kernel;
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {ph}x{pw}"
            )));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output size not integral: ({ph}-{kh})/{stride}, ({pw}-{kw})/{stride}"
            )));
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    fn macs(&self) -> u64 {
        (self.k * self.c * self.kh * self.kw * self.oh * self.ow) as u64
    }

    /// Output indices `o` in `[lo, hi)` for which `o*stride + tap - pad` lands inside `0..size`.
    fn valid(&self, tap: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > tap {
            (self.pad - tap).div_ceil(s)
        } else {
            0
        };
        let hi = if size + self.pad > tap {
            ((size - 1 + self.pad - tap) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64], out: &mut [f64]) {
    let plane = g.oh * g.ow;
    for k in 0..g.k {
        let out_k = &mut out[k * plane..][..plane];
        out_k.iter_mut().for_each(|o| *o = bias[k]);
        for c in 0..g.c {
            let x_c = &x[c * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid(ki, g.h, g.oh);
                for kj in 0..g.kw {
                    let wv = w[((k * g.c + c) * g.kh + ki) * g.kw + kj];
                    let (ox_lo, ox_hi) = g.valid(kj, g.w, g.ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let xrow = &x_c[iy * g.w..][..g.w];
                        let orow = &mut out_k[oy * g.ow..][..g.ow];
                        if g.stride == 1 {
                            let shift = ox_lo + kj - g.pad;
                            let n = ox_hi - ox_lo;
                            for (o, xv) in orow[ox_lo..ox_hi].iter_mut().zip(&xrow[shift..shift + n]) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * xrow[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let plane = g.oh * g.ow;
    for k in 0..g.k {
        let d_k = &dout[k * plane..][..plane];
        for c in 0..g.c {
            let xoff = c * g.h * g.w;
            for ki in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid(ki, g.h, g.oh);
                for kj in 0..g.kw {
                    let widx = ((k * g.c + c) * g.kh + ki) * g.kw + kj;
                    let wv = w[widx];
                    let (ox_lo, ox_hi) = g.valid(kj, g.w, g.ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let drow = &d_k[oy * g.ow..][..g.ow];
                        let row0 = xoff + iy * g.w;
                        if g.stride == 1 {
                            let shift = ox_lo + kj - g.pad;
                            let n = ox_hi - ox_lo;
                            let dseg = &drow[ox_lo..ox_hi];
                            if dw.is_some() {
                                acc += dseg
                                    .iter()
                                    .zip(&x[row0 + shift..row0 + shift + n])
                                    .map(|(d, xv)| d * xv)
                                    .sum::<f64>();
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                for (dxv, d) in dx[row0 + shift..row0 + shift + n].iter_mut().zip(dseg) {
                                    *dxv += wv * d;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = row0 + ox * g.stride + kj - g.pad;
                                acc += drow[ox] * x[ix];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[ix] += wv * drow[ox];
                                }
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_self_subtract() {
        let mut g = Graph::new();
        let a = g.input(&t(&[2], &[1.0, 2.0]));
        let b = g.input(&t(&[2], &[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s), &[4.0, 6.0]);
        let z = g.sub(a, a).unwrap();
        assert_eq!(g.value(z), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(&Tensor::zeros(&[2, 3]));
        let b = g.input(&Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn identity_1x1_conv() {
        let mut g = Graph::new();
        let x = Tensor::from_fn(&[2, 3, 3], |i| i as f64 * 0.5 - 1.0);
        let xv = g.input(&x);
        let w = g.input(&t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.input(&Tensor::zeros(&[2]));
        let y = g.conv2d(xv, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y), x.data());
        assert_eq!(g.macs(), 2 * 2 * 9);
    }

    #[test]
    fn all_ones_2x2_kernel_sums() {
        let mut g = Graph::new();
        let x = g.input(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.input(&Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = g.input(&Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1]);
        assert_eq!(g.value(y), &[10.0]);
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(&[1, 4, 4]));
        let w = g.input(&Tensor::zeros(&[1, 1, 3, 3]));
        let b = g.input(&Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, w, b, 2, 0), Err(Error::Config(_))));
        assert!(g.conv2d(x, w, b, 0, 1).is_err());
    }

    #[test]
    fn strided_conv_matches_naive() {
        let x = Tensor::from_fn(&[2, 7, 7], |i| ((i * 7919) % 13) as f64 - 6.0);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 31) % 7) as f64 - 3.0);
        let bias = t(&[3], &[0.5, -1.0, 2.0]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(&x), g.input(&w), g.input(&bias));
        let y = g.conv2d(xv, wv, bv, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[3, 4, 4]);
        for k in 0..3 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut s = bias.data()[k];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki) as isize - 1;
                                let ix = (ox * 2 + kj) as isize - 1;
                                if (0..7).contains(&iy) && (0..7).contains(&ix) {
                                    s += w.data()[((k * 2 + c) * 3 + ki) * 3 + kj]
                                        * x.at3(c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    assert_eq!(g.value(y)[(k * 4 + oy) * 4 + ox], s);
                }
            }
        }
    }

    #[test]
    fn pool_and_upsample_examples() {
        let mut g = Graph::new();
        let x = g.input(&t(&[1, 2, 2], &[1.0, 1.0, 3.0, 3.0]));
        let p = g.avg_pool(x, 2).unwrap();
        assert_eq!(g.value(p), &[2.0]);
        let one = g.input(&t(&[1, 1, 1], &[2.0]));
        let u = g.upsample(one, 2).unwrap();
        assert_eq!(g.value(u), &[2.0; 4]);
        let c = g.input(&Tensor::full(&[1, 4, 4], 7.0));
        let d = g.avg_pool(c, 2).unwrap();
        let r = g.upsample(d, 2).unwrap();
        assert!(g.value(r).iter().all(|&v| v == 7.0));
        let odd = g.input(&Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(g.avg_pool(odd, 2), Err(Error::Config(_))));
    }

    #[test]
    fn activations_at_reference_points() {
        let mut g = Graph::new();
        let x = g.input(&t(&[2], &[0.0, -3.0]));
        let s = g.sigmoid(x).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(s)[0], 0.5);
        assert_eq!(g.value(r)[1], 0.0);
    }

    #[test]
    fn bce_reference_values() {
        let mut g = Graph::new();
        let z0 = g.input(&t(&[1], &[0.0]));
        let l0 = g.bce_with_logits(z0, &t(&[1], &[1.0])).unwrap();
        assert!((g.scalar(l0) - std::f64::consts::LN_2).abs() < 1e-15);
        let z50 = g.input(&t(&[1], &[50.0]));
        let l50 = g.bce_with_logits(z50, &t(&[1], &[1.0])).unwrap();
        assert!(g.scalar(l50) >= 0.0 && g.scalar(l50) < 1e-20);
        let zneg = g.input(&t(&[1], &[-800.0]));
        let lneg = g.bce_with_logits(zneg, &t(&[1], &[1.0])).unwrap();
        assert!((g.scalar(lneg) - 800.0).abs() < 1e-9);
        assert!(matches!(
            g.bce_with_logits(z0, &t(&[1], &[0.5])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn linear_and_quadratic_grads() {
        let mut p = ParamSet::new();
        p.insert("w", t(&[2], &[1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&p, "w").unwrap();
        let s = g.sum(w).unwrap();
        g.backward_into(s, &mut p).unwrap();
        assert_eq!(p.get("w").unwrap().grad().unwrap(), &[1.0, 1.0]);

        p.zero_grad();
        let mut g = Graph::new();
        let w = g.param(&p, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward_into(s, &mut p).unwrap();
        assert_eq!(p.get("w").unwrap().grad().unwrap(), &[2.0, 4.0]);
        // second call without zeroing accumulates
        g.backward_into(s, &mut p).unwrap();
        assert_eq!(p.get("w").unwrap().grad().unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_foreign_var() {
        let mut g1 = Graph::new();
        let g2 = Graph::new();
        let x = g1.input(&t(&[1], &[1.0]));
        assert!(matches!(g2.backward(x), Err(Error::Usage(_))));
        let v = g1.input(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(g1.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn param_leaf_is_shared() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(&[1])).unwrap();
        let mut g = Graph::new();
        assert_eq!(g.param(&p, "w").unwrap(), g.param(&p, "w").unwrap());
    }

    #[test]
    fn depth_to_space_layout() {
        let mut g = Graph::new();
        // four channels, one pixel -> 2x2 block in raster order
        let x = g.input(&t(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.depth_to_space(x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2]);
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn non_finite_values_are_flagged() {
        let mut g = Graph::new();
        let x = g.input(&t(&[1], &[f64::MAX]));
        assert!(!g.saw_non_finite());
        g.elementwise(ElementwiseKind::Mul, x, 10.0).unwrap();
        assert!(g.saw_non_finite());
    }
}
