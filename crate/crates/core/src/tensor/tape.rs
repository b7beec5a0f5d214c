//! Reverse-mode autodiff tape.
//!
//! A [`Tape`] records every forward operation as a node; [`Tape::backward`]
//! replays the adjoints in reverse creation order. Nodes are addressed by
//! lightweight [`Var`] handles. Shape violations are programming errors and
//! panic; domain-level validation happens in the modules that build graphs.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
pub enum Unary {
    Silu,
    Gelu,
}

enum Op {
    Leaf,
    /// Leaf that never accumulates a gradient (frozen weights); gradient
    /// still flows through ops that consume it.
    FrozenLeaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Value already contains x + constant; gradient passes through.
    AddConst(Var),
    Unary(Var, Unary),
    Linear { x: Var, w: Var, b: Option<Var>, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, trans_b: bool, bsz: usize, m: usize, k: usize, n: usize },
    SoftmaxRows { x: Var, rows: usize, cols: usize },
    LayerNormRows { x: Var, gamma: Var, beta: Var, rows: usize, cols: usize, stats: Vec<(f64, f64)> },
    /// out[i] = if idx[i] >= 0 { x[idx[i]] } else { 0 }
    IndexMap { x: Var, idx: Arc<Vec<i64>> },
    Concat { a: Var, b: Var, outer: usize, a_mid: usize, b_mid: usize },
    Upsample2 { x: Var, c: usize, h: usize, w: usize },
    AvgPool2 { x: Var, c: usize, h: usize, w: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AddChanBias { x: Var, bias: Var, c: usize, hw: usize },
    WarpBilinear { img: Var, field: Var, c: usize, h: usize, w: usize },
    SumAll(Var),
    MeanAll(Var),
    StopGrad(#[allow(dead_code)] Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn frozen_leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::FrozenLeaf)
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::FrozenLeaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.shape(a), data);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), data);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.nodes[a.0].value.map(|v| c * v);
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, constant: &Tensor) -> Var {
        assert_eq!(self.shape(a), constant.shape(), "add_const shape mismatch");
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(constant.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(constant.shape(), data);
        self.push(t, Op::AddConst(a))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let t = match kind {
            Unary::Silu => self.nodes[x.0].value.map(silu),
            Unary::Gelu => self.nodes[x.0].value.map(gelu),
        };
        self.push(t, Op::Unary(x, kind))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    /// x[m,k] * w[k,n] (+ b[n] broadcast over rows)
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (m, k) = rows_cols(self.shape(x));
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2, "linear weight must be 2-d");
        assert_eq!(ws[0], k, "linear inner dim mismatch");
        let n = ws[1];
        let mut out = match b {
            Some(bv) => {
                assert_eq!(self.shape(bv), &[n], "linear bias shape");
                let brow = self.nodes[bv.0].value.data().to_vec();
                let mut data = Vec::with_capacity(m * n);
                for _ in 0..m {
                    data.extend_from_slice(&brow);
                }
                data
            }
            None => vec![0.0; m * n],
        };
        kernels::matmul_acc(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        let t = Tensor::new(&[m, n], out);
        self.push(t, Op::Linear { x, w, b, m, k, n })
    }

    /// Batched matmul: a[bsz,m,k] x b[bsz,k,n] (or b[bsz,n,k] when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3, "bmm lhs must be 3-d");
        assert_eq!(sb.len(), 3, "bmm rhs must be 3-d");
        assert_eq!(sa[0], sb[0], "bmm batch mismatch");
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            assert_eq!(sb[2], k, "bmm inner dim mismatch");
            sb[1]
        } else {
            assert_eq!(sb[1], k, "bmm inner dim mismatch");
            sb[2]
        };
        let mut out = vec![0.0; bsz * m * n];
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            for i in 0..bsz {
                let ab = &av[i * m * k..(i + 1) * m * k];
                let bb = &bv[i * k * n..(i + 1) * k * n];
                let cb = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    kernels::matmul_nt_acc(ab, bb, cb, m, k, n);
                } else {
                    kernels::matmul_acc(ab, bb, cb, m, k, n);
                }
            }
        }
        let t = Tensor::new(&[bsz, m, n], out);
        self.push(t, Op::Bmm { a, b, trans_b, bsz, m, k, n })
    }

    /// Softmax along the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(x));
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let xr = &xd[r * cols..(r + 1) * cols];
            let o = &mut out[r * cols..(r + 1) * cols];
            let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (ov, &xv) in o.iter_mut().zip(xr) {
                *ov = (xv - mx).exp();
                sum += *ov;
            }
            for ov in o.iter_mut() {
                *ov /= sum;
            }
        }
        let t = Tensor::new(self.shape(x), out);
        self.push(t, Op::SoftmaxRows { x, rows, cols })
    }

    /// Layer normalization along the last dimension with learned scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (rows, cols) = rows_cols(self.shape(x));
        assert_eq!(self.shape(gamma), &[cols], "layer_norm gamma shape");
        assert_eq!(self.shape(beta), &[cols], "layer_norm beta shape");
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let mut out = vec![0.0; rows * cols];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &xd[r * cols..(r + 1) * cols];
            let mean = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.push((mean, rstd));
            let o = &mut out[r * cols..(r + 1) * cols];
            for j in 0..cols {
                o[j] = (xr[j] - mean) * rstd * gd[j] + bd[j];
            }
        }
        let t = Tensor::new(self.shape(x), out);
        self.push(t, Op::LayerNormRows { x, gamma, beta, rows, cols, stats })
    }

    /// out[i] = x[idx[i]] for idx[i] >= 0, else 0. Covers permutations,
    /// gathers, crops and zero-padding in one primitive.
    pub fn index_map(&mut self, x: Var, idx: Arc<Vec<i64>>, out_shape: &[usize]) -> Var {
        assert_eq!(idx.len(), out_shape.iter().product::<usize>());
        let xd = self.nodes[x.0].value.data();
        let xlen = xd.len() as i64;
        let data: Vec<f64> = idx
            .iter()
            .map(|&i| {
                if i >= 0 {
                    debug_assert!(i < xlen, "index_map index out of range");
                    xd[i as usize]
                } else {
                    0.0
                }
            })
            .collect();
        let t = Tensor::new(out_shape, data);
        self.push(t, Op::IndexMap { x, idx })
    }

    /// Concatenate along `axis`; shapes must agree elsewhere.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), sb.len(), "concat rank mismatch");
        for (d, (x, y)) in sa.iter().zip(&sb).enumerate() {
            if d != axis {
                assert_eq!(x, y, "concat shape mismatch on dim {d}");
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let a_mid = sa[axis] * inner;
        let b_mid = sb[axis] * inner;
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut data = Vec::with_capacity(outer * (a_mid + b_mid));
        for o in 0..outer {
            data.extend_from_slice(&ad[o * a_mid..(o + 1) * a_mid]);
            data.extend_from_slice(&bd[o * b_mid..(o + 1) * b_mid]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let t = Tensor::new(&shape, data);
        self.push(t, Op::Concat { a, b, outer, a_mid, b_mid })
    }

    /// Nearest-neighbor 2x upsampling of a [C,H,W] raster.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "upsample2 expects [C,H,W]");
        let (c, h, w) = (s[0], s[1], s[2]);
        let xd = self.nodes[x.0].value.data();
        let mut data = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = xd[(ch * h + y) * w + xx];
                    let base = ch * 4 * h * w;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            data[base + (2 * y + dy) * 2 * w + 2 * xx + dx] = v;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[c, 2 * h, 2 * w], data);
        self.push(t, Op::Upsample2 { x, c, h, w })
    }

    /// 2x average pooling of a [C,H,W] raster with even sides.
    pub fn avgpool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "avgpool2 expects [C,H,W]");
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even sides");
        let xd = self.nodes[x.0].value.data();
        let (ho, wo) = (h / 2, w / 2);
        let mut data = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += xd[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                        }
                    }
                    data[(ch * ho + y) * wo + xx] = acc * 0.25;
                }
            }
        }
        let t = Tensor::new(&[c, ho, wo], data);
        self.push(t, Op::AvgPool2 { x, c, h, w })
    }

    /// 2-d convolution over a [C,H,W] raster (no batch dimension).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Co,Ci,K,K]");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let geom = ConvGeom {
            c_in: xs[0],
            c_out: ws[0],
            h_in: xs[1],
            w_in: xs[2],
            kernel: ws[2],
            stride,
            pad,
        };
        let (ho, wo) = (geom.h_out(), geom.w_out());
        let mut out = vec![0.0; geom.c_out * ho * wo];
        kernels::conv2d_fwd(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            b.map(|bv| {
                assert_eq!(self.shape(bv), &[geom.c_out], "conv2d bias shape");
                self.nodes[bv.0].value.data()
            }),
            &mut out,
            &geom,
        );
        let t = Tensor::new(&[geom.c_out, ho, wo], out);
        self.push(t, Op::Conv2d { x, w, b, geom })
    }

    /// x[C,H,W] + bias[C] broadcast over the spatial grid.
    pub fn add_chan_bias(&mut self, x: Var, bias: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "add_chan_bias expects [C,H,W]");
        let (c, hw) = (s[0], s[1] * s[2]);
        assert_eq!(self.shape(bias), &[c], "add_chan_bias bias shape");
        let xd = self.nodes[x.0].value.data();
        let bd = self.nodes[bias.0].value.data();
        let mut data = Vec::with_capacity(c * hw);
        for ch in 0..c {
            let bv = bd[ch];
            data.extend(xd[ch * hw..(ch + 1) * hw].iter().map(|v| v + bv));
        }
        let t = Tensor::new(&s, data);
        self.push(t, Op::AddChanBias { x, bias, c, hw })
    }

    /// Bilinear warp: out[c](p) = img[c](p + u(p)) with border clamping.
    /// `field` is [2,H,W] with plane 0 = u_x (columns), plane 1 = u_y (rows).
    pub fn warp_bilinear(&mut self, img: Var, field: Var) -> Var {
        let is = self.shape(img).to_vec();
        let fs = self.shape(field).to_vec();
        assert_eq!(is.len(), 3, "warp image must be [C,H,W]");
        assert_eq!(fs.len(), 3, "warp field must be [2,H,W]");
        assert_eq!(fs[0], 2, "warp field needs two planes");
        assert_eq!(&is[1..], &fs[1..], "warp image/field spatial mismatch");
        let (c, h, w) = (is[0], is[1], is[2]);
        let idata = self.nodes[img.0].value.data();
        let fdata = self.nodes[field.0].value.data();
        let mut out = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                let ux = fdata[y * w + x];
                let uy = fdata[h * w + y * w + x];
                let (idx, wts, _, _) = bilinear_stencil(h, w, y as f64 + uy, x as f64 + ux);
                for ch in 0..c {
                    let base = ch * h * w;
                    let mut v = 0.0;
                    for q in 0..4 {
                        v += wts[q] * idata[base + idx[q]];
                    }
                    out[base + y * w + x] = v;
                }
            }
        }
        let t = Tensor::new(&is, out);
        self.push(t, Op::WarpBilinear { img, field, c, h, w })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s / n as f64), Op::MeanAll(x))
    }

    /// Identity in the forward pass; blocks gradient flow in backward.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.clone();
        self.push(t, Op::StopGrad(x))
    }

    /// Mean squared difference, composed from primitives.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let ensure = |grads: &mut [Option<Tensor>], v: Var, tape: &Tape| {
            if grads[v.0].is_none() {
                grads[v.0] = Some(Tensor::zeros(tape.shape(v)));
            }
        };
        macro_rules! grad_mut {
            ($v:expr) => {{
                ensure(grads, $v, self);
                grads[$v.0].as_mut().unwrap()
            }};
        }
        match &self.nodes[id].op {
            Op::Leaf | Op::FrozenLeaf => {}
            Op::Add(a, b) => {
                for (gv, gx) in grad_mut!(*a).data_mut().iter_mut().zip(g.data()) {
                    *gv += gx;
                }
                for (gv, gx) in grad_mut!(*b).data_mut().iter_mut().zip(g.data()) {
                    *gv += gx;
                }
            }
            Op::Sub(a, b) => {
                for (gv, gx) in grad_mut!(*a).data_mut().iter_mut().zip(g.data()) {
                    *gv += gx;
                }
                for (gv, gx) in grad_mut!(*b).data_mut().iter_mut().zip(g.data()) {
                    *gv -= gx;
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs_grad(a) {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let ga = grad_mut!(a);
                    for i in 0..bv.len() {
                        ga.data_mut()[i] += g.data()[i] * bv[i];
                    }
                }
                if self.needs_grad(b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let gb = grad_mut!(b);
                    for i in 0..av.len() {
                        gb.data_mut()[i] += g.data()[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                for (gv, gx) in grad_mut!(*a).data_mut().iter_mut().zip(g.data()) {
                    *gv += c * gx;
                }
            }
            Op::AddConst(a) => {
                for (gv, gx) in grad_mut!(*a).data_mut().iter_mut().zip(g.data()) {
                    *gv += gx;
                }
            }
            Op::Unary(x, kind) => {
                let xv = self.nodes[x.0].value.data().to_vec();
                let kind = *kind;
                let gx = grad_mut!(*x);
                match kind {
                    Unary::Silu => {
                        for i in 0..xv.len() {
                            gx.data_mut()[i] += g.data()[i] * silu_deriv(xv[i]);
                        }
                    }
                    Unary::Gelu => {
                        for i in 0..xv.len() {
                            gx.data_mut()[i] += g.data()[i] * gelu_deriv(xv[i]);
                        }
                    }
                }
            }
            Op::Linear { x, w, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let xd = self.nodes[x.0].value.data();
                let wd = self.nodes[w.0].value.data();
                if self.needs_grad(*x) {
                    ensure(grads, *x, self);
                    let gx = grads[x.0].as_mut().unwrap();
                    kernels::matmul_nt_acc(g.data(), wd, gx.data_mut(), m, n, k);
                }
                if self.needs_grad(*w) {
                    ensure(grads, *w, self);
                    let gw = grads[w.0].as_mut().unwrap();
                    kernels::matmul_tn_acc(xd, g.data(), gw.data_mut(), m, k, n);
                }
                if let Some(bv) = b {
                    if self.needs_grad(*bv) {
                        let gb = grad_mut!(*bv);
                        for r in 0..m {
                            for j in 0..n {
                                gb.data_mut()[j] += g.data()[r * n + j];
                            }
                        }
                    }
                }
            }
            Op::Bmm { a, b, trans_b, bsz, m, k, n } => {
                let (bsz, m, k, n) = (*bsz, *m, *k, *n);
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                {
                    ensure(grads, *a, self);
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..bsz {
                        let gb_ = &g.data()[i * m * n..(i + 1) * m * n];
                        let bb = &bd[i * bslice_len(k, n)..][..bslice_len(k, n)];
                        let gab = &mut ga.data_mut()[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // c = a b^T, b:[n,k] -> ga += gc * b
                            kernels::matmul_acc(gb_, bb, gab, m, n, k);
                        } else {
                            // ga += gc * b^T, b:[k,n]
                            kernels::matmul_nt_acc(gb_, bb, gab, m, n, k);
                        }
                    }
                }
                {
                    ensure(grads, *b, self);
                    let gbt = grads[b.0].as_mut().unwrap();
                    for i in 0..bsz {
                        let gc = &g.data()[i * m * n..(i + 1) * m * n];
                        let ab = &ad[i * m * k..(i + 1) * m * k];
                        let gbb = &mut gbt.data_mut()[i * bslice_len(k, n)..][..bslice_len(k, n)];
                        if *trans_b {
                            // gb[n,k] += gc^T * a
                            kernels::matmul_tn_acc(gc, ab, gbb, m, n, k);
                        } else {
                            // gb[k,n] += a^T * gc
                            kernels::matmul_tn_acc(ab, gc, gbb, m, k, n);
                        }
                    }
                }
            }
            Op::SoftmaxRows { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let y = self.nodes[id].value.data();
                let gx = grad_mut!(*x);
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let o = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        o[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNormRows { x, gamma, beta, rows, cols, stats } => {
                let (rows, cols) = (*rows, *cols);
                let xd = self.nodes[x.0].value.data().to_vec();
                let gd = self.nodes[gamma.0].value.data().to_vec();
                if self.needs_grad(*x) {
                    let gx = grad_mut!(*x);
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        let xr = &xd[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let mut sum_gh = 0.0;
                        let mut sum_gh_xhat = 0.0;
                        for j in 0..cols {
                            let gh = gr[j] * gd[j];
                            let xhat = (xr[j] - mean) * rstd;
                            sum_gh += gh;
                            sum_gh_xhat += gh * xhat;
                        }
                        let o = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        let nf = cols as f64;
                        for j in 0..cols {
                            let gh = gr[j] * gd[j];
                            let xhat = (xr[j] - mean) * rstd;
                            o[j] += rstd * (gh - sum_gh / nf - xhat * sum_gh_xhat / nf);
                        }
                    }
                }
                if self.needs_grad(*gamma) {
                    let gg = grad_mut!(*gamma);
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        for j in 0..cols {
                            let xhat = (xd[r * cols + j] - mean) * rstd;
                            gg.data_mut()[j] += g.data()[r * cols + j] * xhat;
                        }
                    }
                }
                if self.needs_grad(*beta) {
                    let gb = grad_mut!(*beta);
                    for r in 0..rows {
                        for j in 0..cols {
                            gb.data_mut()[j] += g.data()[r * cols + j];
                        }
                    }
                }
            }
            Op::IndexMap { x, idx } => {
                let gx = grad_mut!(*x);
                for (i, &src) in idx.iter().enumerate() {
                    if src >= 0 {
                        gx.data_mut()[src as usize] += g.data()[i];
                    }
                }
            }
            Op::Concat { a, b, outer, a_mid, b_mid, .. } => {
                let (outer, a_mid, b_mid) = (*outer, *a_mid, *b_mid);
                {
                    let ga = grad_mut!(*a);
                    for o in 0..outer {
                        let src = &g.data()[o * (a_mid + b_mid)..o * (a_mid + b_mid) + a_mid];
                        let dst = &mut ga.data_mut()[o * a_mid..(o + 1) * a_mid];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                {
                    let gb = grad_mut!(*b);
                    for o in 0..outer {
                        let src =
                            &g.data()[o * (a_mid + b_mid) + a_mid..(o + 1) * (a_mid + b_mid)];
                        let dst = &mut gb.data_mut()[o * b_mid..(o + 1) * b_mid];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Upsample2 { x, c, h, w } => {
                let (c, h, w) = (*c, *h, *w);
                let gx = grad_mut!(*x);
                for ch in 0..c {
                    let base = ch * 4 * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let mut acc = 0.0;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    acc += g.data()[base + (2 * y + dy) * 2 * w + 2 * xx + dx];
                                }
                            }
                            gx.data_mut()[(ch * h + y) * w + xx] += acc;
                        }
                    }
                }
            }
            Op::AvgPool2 { x, c, h, w } => {
                let (c, h, w) = (*c, *h, *w);
                let (ho, wo) = (h / 2, w / 2);
                let gx = grad_mut!(*x);
                for ch in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let gv = 0.25 * g.data()[(ch * ho + y) * wo + xx];
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    gx.data_mut()[(ch * h + 2 * y + dy) * w + 2 * xx + dx] += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let xd = self.nodes[x.0].value.data();
                let wd = self.nodes[w.0].value.data();
                if self.needs_grad(*x) {
                    ensure(grads, *x, self);
                    let gx = grads[x.0].as_mut().unwrap();
                    kernels::conv2d_bwd_input(g.data(), wd, gx.data_mut(), geom);
                }
                if self.needs_grad(*w) {
                    ensure(grads, *w, self);
                    let gw = grads[w.0].as_mut().unwrap();
                    kernels::conv2d_bwd_params(g.data(), xd, gw.data_mut(), None, geom);
                }
                if let Some(bv) = b {
                    if self.needs_grad(*bv) {
                        let (ho, wo) = (geom.h_out(), geom.w_out());
                        let gb = grad_mut!(*bv);
                        for oc in 0..geom.c_out {
                            gb.data_mut()[oc] +=
                                g.data()[oc * ho * wo..(oc + 1) * ho * wo].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::AddChanBias { x, bias, c, hw } => {
                let (c, hw) = (*c, *hw);
                {
                    let gx = grad_mut!(*x);
                    for (gv, gs) in gx.data_mut().iter_mut().zip(g.data()) {
                        *gv += gs;
                    }
                }
                {
                    let gb = grad_mut!(*bias);
                    for ch in 0..c {
                        gb.data_mut()[ch] += g.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            Op::WarpBilinear { img, field, c, h, w } => {
                let (c, h, w) = (*c, *h, *w);
                let idata = self.nodes[img.0].value.data().to_vec();
                let fdata = self.nodes[field.0].value.data().to_vec();
                for y in 0..h {
                    for x in 0..w {
                        let ux = fdata[y * w + x];
                        let uy = fdata[h * w + y * w + x];
                        let (idx, wts, cx, cy) =
                            bilinear_stencil(h, w, y as f64 + uy, x as f64 + ux);
                        // d(weights)/d(fx) and /d(fy)
                        let fx = wts[1] + wts[3];
                        let fy = wts[2] + wts[3];
                        let mut dv_dfx = 0.0;
                        let mut dv_dfy = 0.0;
                        {
                            ensure(grads, *img, self);
                            let gi = grads[img.0].as_mut().unwrap();
                            for ch in 0..c {
                                let base = ch * h * w;
                                let go = g.data()[base + y * w + x];
                                for q in 0..4 {
                                    gi.data_mut()[base + idx[q]] += wts[q] * go;
                                }
                                let v00 = idata[base + idx[0]];
                                let v01 = idata[base + idx[1]];
                                let v10 = idata[base + idx[2]];
                                let v11 = idata[base + idx[3]];
                                dv_dfx += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                                dv_dfy += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                            }
                        }
                        {
                            ensure(grads, *field, self);
                            let gf = grads[field.0].as_mut().unwrap();
                            if !cx {
                                gf.data_mut()[y * w + x] += dv_dfx;
                            }
                            if !cy {
                                gf.data_mut()[h * w + y * w + x] += dv_dfy;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let gv = g.item();
                for v in grad_mut!(*x).data_mut().iter_mut() {
                    *v += gv;
                }
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                let gv = g.item() / n;
                for v in grad_mut!(*x).data_mut().iter_mut() {
                    *v += gv;
                }
            }
            Op::StopGrad(_) => {}
        }
    }
}

fn bslice_len(k: usize, n: usize) -> usize {
    k * n
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    assert!(!shape.is_empty());
    let cols = *shape.last().unwrap();
    let rows = shape[..shape.len() - 1].iter().product::<usize>().max(1);
    (rows, cols)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Bilinear corner stencil at (y, x) with border clamping.
/// Returns (corner flat indices, weights, x-clamped, y-clamped).
pub fn bilinear_stencil(h: usize, w: usize, y: f64, x: f64) -> ([usize; 4], [f64; 4], bool, bool) {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let cx = xc != x;
    let cy = yc != y;
    let x0 = (xc.floor() as usize).min(w - 1);
    let y0 = (yc.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1];
    let wts = [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx];
    (idx, wts, cx, cy)
}
