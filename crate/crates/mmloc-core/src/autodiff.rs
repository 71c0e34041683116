//! Minimal reverse-mode automatic differentiation over dynamically shaped
//! `f64` tensors.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node holding
//! the forward value and a closure that routes the output gradient to the
//! node's parents. Graphs are built per sample, consumed by one call to
//! [`Graph::backward`], and dropped. Values are `ArcArray` so capturing them
//! in backward closures is cheap.

use ndarray::prelude::*;
use ndarray::{ArcArray, IxDyn};

use crate::error::{Error, Result};

pub type Tensor = ArcArray<f64, IxDyn>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &mut [Option<ArrayD<f64>>])>;

struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients of a scalar loss with respect to named parameter leaves.
pub type GradMap = indexmap::IndexMap<String, ArrayD<f64>>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        Some(a) => *a += &g,
        None => *slot = Some(g),
    }
}

/// Copies into standard (row-major) layout when needed; `dot` can return
/// F-layout arrays for degenerate shapes, which breaks zero-copy reshapes.
fn standardize2(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        let dim = a.raw_dim();
        Array2::from_shape_vec(dim, a.iter().copied().collect()).unwrap()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, backward: Option<BackwardFn>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            backward,
            requires_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable input (data).
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value.into_shared(), None, false)
    }

    /// Trainable leaf; gradients are reported under `name` by [`Graph::backward`].
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(value, None, true);
        self.nodes[id.0].param = Some(name.to_string());
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap()
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Runs reverse accumulation from a scalar `loss` node and returns the
    /// gradients of every parameter leaf plus, optionally, gradients of other
    /// nodes requested via `extra` (e.g. non-param inputs under test).
    pub fn backward(&self, loss: NodeId) -> GradMap {
        self.backward_with(loss, &[]).0
    }

    pub fn backward_with(
        &self,
        loss: NodeId,
        extra: &[NodeId],
    ) -> (GradMap, Vec<Option<ArrayD<f64>>>) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward expects a scalar loss node"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(back) = &node.backward {
                back(&g, &mut grads);
            }
            if node.param.is_some() || extra.iter().any(|e| e.0 == id) {
                grads[id] = Some(g);
            }
        }

        let mut map = GradMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                if let Some(g) = grads[i].take() {
                    map.insert(name.clone(), g);
                }
            }
        }
        let extra_grads = extra.iter().map(|e| grads[e.0].take()).collect();
        (map, extra_grads)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = (&va + &vb).into_shared();
        let (ra, rb) = (self.requires(a), self.requires(b));
        let back: BackwardFn = Box::new(move |g, grads| {
            if ra {
                accumulate(&mut grads[a.0], g.clone());
            }
            if rb {
                accumulate(&mut grads[b.0], g.clone());
            }
        });
        self.push(out, Some(back), ra || rb)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.nodes[a.0].value.clone();
        let out = va.map(|x| x * c).into_shared();
        let ra = self.requires(a);
        let back: BackwardFn = Box::new(move |g, grads| {
            if ra {
                accumulate(&mut grads[a.0], g.map(|x| x * c));
            }
        });
        self.push(out, Some(back), ra)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.nodes[a.0].value.clone();
        let out = va.map(|x| x + c).into_shared();
        let ra = self.requires(a);
        let back: BackwardFn = Box::new(move |g, grads| {
            if ra {
                accumulate(&mut grads[a.0], g.clone());
            }
        });
        self.push(out, Some(back), ra)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.nodes[a.0].value.clone();
        let out = va.map(|x| x.max(0.0)).into_shared();
        let ra = self.requires(a);
        let back: BackwardFn = Box::new(move |g, grads| {
            if ra {
                let mut gin = g.clone();
                gin.zip_mut_with(&va, |gi, &x| {
                    if x <= 0.0 {
                        *gi = 0.0
                    }
                });
                accumulate(&mut grads[a.0], gin);
            }
        });
        self.push(out, Some(back), ra)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = self.nodes[a.0].value.clone();
        let out: Tensor = va.map(|x| 1.0 / (1.0 + (-x).exp())).into_shared();
        let ra = self.requires(a);
        let out_c = out.clone();
        let back: BackwardFn = Box::new(move |g, grads| {
            if ra {
                let mut gin = g.clone();
                gin.zip_mut_with(&out_c, |gi, &y| *gi *= y * (1.0 - y));
                accumulate(&mut grads[a.0], gin);
            }
        });
        self.push(out, Some(back), ra)
    }

    // ---- linear algebra ----

    /// `w (m,n) · x (n) -> (m)`
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let vw = self.nodes[w.0].value.clone();
        let vx = self.nodes[x.0].value.clone();
        let w2 = vw.view().into_dimensionality::<Ix2>().expect("matvec: w rank");
        let x1 = vx.view().into_dimensionality::<Ix1>().expect("matvec: x rank");
        assert_eq!(w2.shape()[1], x1.len(), "matvec: inner dim");
        let out = w2.dot(&x1).into_dyn().into_shared();
        let (rw, rx) = (self.requires(w), self.requires(x));
        let back: BackwardFn = Box::new(move |g, grads| {
            let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
            let w2 = vw.view().into_dimensionality::<Ix2>().unwrap();
            let x1 = vx.view().into_dimensionality::<Ix1>().unwrap();
            if rw {
                let mut gw = Array2::<f64>::zeros((g1.len(), x1.len()));
                for i in 0..g1.len() {
                    for j in 0..x1.len() {
                        gw[(i, j)] = g1[i] * x1[j];
                    }
                }
                accumulate(&mut grads[w.0], gw.into_dyn());
            }
            if rx {
                accumulate(&mut grads[x.0], w2.t().dot(&g1).into_dyn());
            }
        });
        self.push(out, Some(back), rw || rx)
    }

    /// `a (m,k) · b (k,n) -> (m,n)`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.nodes[a.0].value.clone();
        let vb = self.nodes[b.0].value.clone();
        let a2 = va.view().into_dimensionality::<Ix2>().expect("matmul: a rank");
        let b2 = vb.view().into_dimensionality::<Ix2>().expect("matmul: b rank");
        assert_eq!(a2.shape()[1], b2.shape()[0], "matmul: inner dim");
        let out = a2.dot(&b2).into_dyn().into_shared();
        let (ra, rb) = (self.requires(a), self.requires(b));
        let back: BackwardFn = Box::new(move |g, grads| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
            if ra {
                accumulate(&mut grads[a.0], g2.dot(&b2.t()).into_dyn());
            }
            if rb {
                accumulate(&mut grads[b.0], a2.t().dot(&g2).into_dyn());
            }
        });
        self.push(out, Some(back), ra || rb)
    }

    /// Concatenates two tensors of equal rank along `axis`.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> NodeId {
        let va = self.nodes[a.0].value.clone();
        let vb = self.nodes[b.0].value.clone();
        let out = ndarray::concatenate(Axis(axis), &[va.view(), vb.view()])
            .expect("concat: incompatible shapes")
            .into_shared();
        let (ra, rb) = (self.requires(a), self.requires(b));
        let na = va.shape()[axis];
        let back: BackwardFn = Box::new(move |g, grads| {
            if ra {
                let ga = g.slice_axis(Axis(axis), ndarray::Slice::from(0..na)).to_owned();
                accumulate(&mut grads[a.0], ga);
            }
            if rb {
                let gb = g.slice_axis(Axis(axis), ndarray::Slice::from(na..)).to_owned();
                accumulate(&mut grads[b.0], gb);
            }
        });
        self.push(out, Some(back), ra || rb)
    }

    /// Stacks `n` rank-1 nodes of equal length into an `(n, d)` matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> NodeId {
        assert!(!rows.is_empty(), "stack_rows: empty input");
        let d = self.nodes[rows[0].0].value.len();
        let mut out = Array2::<f64>::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            let v = self.nodes[r.0].value.view().into_dimensionality::<Ix1>().unwrap();
            out.row_mut(i).assign(&v);
        }
        let ids: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let req: Vec<bool> = rows.iter().map(|r| self.requires(*r)).collect();
        let any = req.iter().any(|&r| r);
        let back: BackwardFn = Box::new(move |g, grads| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            for (i, (&id, &r)) in ids.iter().zip(&req).enumerate() {
                if r {
                    accumulate(&mut grads[id], g2.row(i).to_owned().into_dyn());
                }
            }
        });
        self.push(out.into_dyn().into_shared(), Some(back), any)
    }

    /// Stacks `k` rank-1 nodes of length `d` into a `(d, k)` matrix (columns).
    pub fn stack_cols(&mut self, cols: &[NodeId]) -> NodeId {
        assert!(!cols.is_empty(), "stack_cols: empty input");
        let d = self.nodes[cols[0].0].value.len();
        let mut out = Array2::<f64>::zeros((d, cols.len()));
        for (j, c) in cols.iter().enumerate() {
            let v = self.nodes[c.0].value.view().into_dimensionality::<Ix1>().unwrap();
            out.column_mut(j).assign(&v);
        }
        let ids: Vec<usize> = cols.iter().map(|c| c.0).collect();
        let req: Vec<bool> = cols.iter().map(|c| self.requires(*c)).collect();
        let any = req.iter().any(|&r| r);
        let back: BackwardFn = Box::new(move |g, grads| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            for (j, (&id, &r)) in ids.iter().zip(&req).enumerate() {
                if r {
                    accumulate(&mut grads[id], g2.column(j).to_owned().into_dyn());
                }
            }
        });
        self.push(out.into_dyn().into_shared(), Some(back), any)
    }

    // ---- convolution ----

    /// 2-D convolution on channel-first tensors.
    ///
    /// `x (C,H,W)`, `w (O,C,kh,kw)`, optional `b (O)`; zero padding `pad`,
    /// square stride. Output `(O, H', W')`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let vx = self.nodes[x.0].value.clone();
        let vw = self.nodes[w.0].value.clone();
        let xs = vx.shape().to_vec();
        let ws = vw.shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d: x must be (C,H,W)");
        assert_eq!(ws.len(), 4, "conv2d: w must be (O,C,kh,kw)");
        assert_eq!(xs[0], ws[1], "conv2d: channel mismatch");
        let (c, h, wid) = (xs[0], xs[1], xs[2]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        assert!(h + 2 * pad >= kh && wid + 2 * pad >= kw, "conv2d: kernel larger than input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;

        let col = im2col(&vx.view().into_dimensionality::<Ix3>().unwrap(), kh, kw, stride, pad);
        let wmat = vw
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .expect("conv2d: weight reshape");
        let mut out2 = standardize2(wmat.dot(&col)); // (O, ho*wo)
        if let Some(bn) = b {
            let vb = self.nodes[bn.0].value.clone();
            let b1 = vb.view().into_dimensionality::<Ix1>().unwrap();
            for (mut row, &bi) in out2.rows_mut().into_iter().zip(b1.iter()) {
                row += bi;
            }
        }
        let out = out2
            .into_shape_with_order((o, ho, wo))
            .unwrap()
            .into_dyn()
            .into_shared();

        let rx = self.requires(x);
        let rw = self.requires(w);
        let rb = b.map(|bn| self.requires(bn)).unwrap_or(false);
        let back: BackwardFn = Box::new(move |g, grads| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let gmat = g3.into_shape_with_order((o, ho * wo)).unwrap();
            if rw {
                let col = im2col(&vx.view().into_dimensionality::<Ix3>().unwrap(), kh, kw, stride, pad);
                let gw = standardize2(gmat.dot(&col.t())); // (O, C*kh*kw)
                accumulate(
                    &mut grads[w.0],
                    gw.into_shape_with_order((o, c, kh, kw)).unwrap().into_dyn(),
                );
            }
            if rb {
                let gb: Array1<f64> = gmat.sum_axis(Axis(1));
                accumulate(&mut grads[b.unwrap().0], gb.into_dyn());
            }
            if rx {
                let wmat = vw.view().into_shape_with_order((o, c * kh * kw)).unwrap();
                let gcol = wmat.t().dot(&gmat); // (C*kh*kw, ho*wo)
                let gx = col2im(&gcol, c, h, wid, kh, kw, stride, pad);
                accumulate(&mut grads[x.0], gx.into_dyn());
            }
        });
        self.push(out, Some(back), rx || rw || rb)
    }

    // ---- pooling / spatial ----

    /// Per-channel max over all spatial locations of a `(C,H,W)` map.
    pub fn global_max_pool(&mut self, x: NodeId) -> NodeId {
        let vx = self.nodes[x.0].value.clone();
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = x3.dim();
        let mut out = Array1::<f64>::from_elem(c, f64::NEG_INFINITY);
        let mut argmax = vec![(0usize, 0usize); c];
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    let v = x3[(ci, yi, xi)];
                    if v > out[ci] {
                        out[ci] = v;
                        argmax[ci] = (yi, xi);
                    }
                }
            }
        }
        let rx = self.requires(x);
        let dims = (c, h, w);
        let back: BackwardFn = Box::new(move |g, grads| {
            if rx {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut gx = Array3::<f64>::zeros(dims);
                for ci in 0..dims.0 {
                    let (yi, xi) = argmax[ci];
                    gx[(ci, yi, xi)] = g1[ci];
                }
                accumulate(&mut grads[x.0], gx.into_dyn());
            }
        });
        self.push(out.into_dyn().into_shared(), Some(back), rx)
    }

    /// Per-channel mean over all spatial locations of a `(C,H,W)` map.
    pub fn global_mean_pool(&mut self, x: NodeId) -> NodeId {
        let vx = self.nodes[x.0].value.clone();
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = x3.dim();
        let n = (h * w) as f64;
        let mut out = Array1::<f64>::zeros(c);
        for ci in 0..c {
            out[ci] = x3.index_axis(Axis(0), ci).sum() / n;
        }
        let rx = self.requires(x);
        let dims = (c, h, w);
        let back: BackwardFn = Box::new(move |g, grads| {
            if rx {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut gx = Array3::<f64>::zeros(dims);
                for ci in 0..dims.0 {
                    gx.index_axis_mut(Axis(0), ci).fill(g1[ci] / n);
                }
                accumulate(&mut grads[x.0], gx.into_dyn());
            }
        });
        self.push(out.into_dyn().into_shared(), Some(back), rx)
    }

    /// Per-cell dot product of a `(C,H,W)` map with a `(C)` vector -> `(H,W)`.
    pub fn dot_map(&mut self, x: NodeId, q: NodeId) -> NodeId {
        let vx = self.nodes[x.0].value.clone();
        let vq = self.nodes[q.0].value.clone();
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let q1 = vq.view().into_dimensionality::<Ix1>().unwrap();
        let (c, h, w) = x3.dim();
        assert_eq!(c, q1.len(), "dot_map: depth mismatch");
        let mut out = Array2::<f64>::zeros((h, w));
        for ci in 0..c {
            let plane = x3.index_axis(Axis(0), ci);
            out.zip_mut_with(&plane, |o, &v| *o += v * q1[ci]);
        }
        let (rx, rq) = (self.requires(x), self.requires(q));
        let back: BackwardFn = Box::new(move |g, grads| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
            let q1 = vq.view().into_dimensionality::<Ix1>().unwrap();
            if rx {
                let mut gx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    let mut plane = gx.index_axis_mut(Axis(0), ci);
                    plane.zip_mut_with(&g2, |p, &gv| *p = gv * q1[ci]);
                }
                accumulate(&mut grads[x.0], gx.into_dyn());
            }
            if rq {
                let mut gq = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let plane = x3.index_axis(Axis(0), ci);
                    gq[ci] = (&plane * &g2).sum();
                }
                accumulate(&mut grads[q.0], gq.into_dyn());
            }
        });
        self.push(out.into_dyn().into_shared(), Some(back), rx || rq)
    }

    /// Scales each depth column of a `(C,H,W)` map by the `(H,W)` scalar field.
    pub fn scale_map(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let vx = self.nodes[x.0].value.clone();
        let vs = self.nodes[s.0].value.clone();
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let s2 = vs.view().into_dimensionality::<Ix2>().unwrap();
        let (c, h, w) = x3.dim();
        assert_eq!((h, w), s2.dim(), "scale_map: spatial shape mismatch");
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            let mut plane = out.index_axis_mut(Axis(0), ci);
            plane.assign(&x3.index_axis(Axis(0), ci));
            plane.zip_mut_with(&s2, |p, &sv| *p *= sv);
        }
        let (rx, rs) = (self.requires(x), self.requires(s));
        let back: BackwardFn = Box::new(move |g, grads| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
            let s2 = vs.view().into_dimensionality::<Ix2>().unwrap();
            if rx {
                let mut gx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    let mut plane = gx.index_axis_mut(Axis(0), ci);
                    plane.assign(&g3.index_axis(Axis(0), ci));
                    plane.zip_mut_with(&s2, |p, &sv| *p *= sv);
                }
                accumulate(&mut grads[x.0], gx.into_dyn());
            }
            if rs {
                let mut gs = Array2::<f64>::zeros((h, w));
                for ci in 0..c {
                    let gp = g3.index_axis(Axis(0), ci);
                    let xp = x3.index_axis(Axis(0), ci);
                    gs.zip_mut_with(&(&gp * &xp), |o, &v| *o += v);
                }
                accumulate(&mut grads[s.0], gs.into_dyn());
            }
        });
        self.push(out.into_dyn().into_shared(), Some(back), rx || rs)
    }

    /// Gathers feature-map cells: output cell `i` copies source cell
    /// `(rows[i], cols[i])` across all channels. Output is `(C, oh, ow)`
    /// with `rows.len() == oh*ow`.
    pub fn gather_cells(
        &mut self,
        x: NodeId,
        rows: Vec<usize>,
        cols: Vec<usize>,
        oh: usize,
        ow: usize,
    ) -> NodeId {
        assert_eq!(rows.len(), oh * ow);
        assert_eq!(cols.len(), oh * ow);
        let vx = self.nodes[x.0].value.clone();
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = x3.dim();
        let mut out = Array3::<f64>::zeros((c, oh, ow));
        for i in 0..oh {
            for j in 0..ow {
                let (sy, sx) = (rows[i * ow + j], cols[i * ow + j]);
                for ci in 0..c {
                    out[(ci, i, j)] = x3[(ci, sy, sx)];
                }
            }
        }
        let rx = self.requires(x);
        let back: BackwardFn = Box::new(move |g, grads| {
            if rx {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut gx = Array3::<f64>::zeros((c, h, w));
                for i in 0..oh {
                    for j in 0..ow {
                        let (sy, sx) = (rows[i * ow + j], cols[i * ow + j]);
                        for ci in 0..c {
                            gx[(ci, sy, sx)] += g3[(ci, i, j)];
                        }
                    }
                }
                accumulate(&mut grads[x.0], gx.into_dyn());
            }
        });
        self.push(out.into_dyn().into_shared(), Some(back), rx)
    }

    /// Mean of token-embedding rows: `table (V,d)` gathered at `ids`, averaged.
    pub fn embed_mean(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        assert!(!ids.is_empty(), "embed_mean: empty ids");
        let vt = self.nodes[table.0].value.clone();
        let t2 = vt.view().into_dimensionality::<Ix2>().unwrap();
        let (v, d) = t2.dim();
        for &i in &ids {
            assert!(i < v, "embed_mean: id out of range");
        }
        let mut out = Array1::<f64>::zeros(d);
        for &i in &ids {
            out += &t2.row(i);
        }
        out /= ids.len() as f64;
        let rt = self.requires(table);
        let back: BackwardFn = Box::new(move |g, grads| {
            if rt {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut gt = Array2::<f64>::zeros((v, d));
                let scale = 1.0 / ids.len() as f64;
                for &i in &ids {
                    let mut row = gt.row_mut(i);
                    row.zip_mut_with(&g1, |r, &gv| *r += gv * scale);
                }
                accumulate(&mut grads[table.0], gt.into_dyn());
            }
        });
        self.push(out.into_dyn().into_shared(), Some(back), rt)
    }

    /// Reorders RPN head planes `(A,H,W)` into a flat anchor-major vector of
    /// length `H*W*A`, matching anchor enumeration order (cells row-major,
    /// anchors within a cell).
    pub fn flatten_anchor_major(&mut self, x: NodeId) -> NodeId {
        let vx = self.nodes[x.0].value.clone();
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let (a, h, w) = x3.dim();
        let mut out = Array1::<f64>::zeros(h * w * a);
        for yi in 0..h {
            for xi in 0..w {
                for ai in 0..a {
                    out[(yi * w + xi) * a + ai] = x3[(ai, yi, xi)];
                }
            }
        }
        let rx = self.requires(x);
        let back: BackwardFn = Box::new(move |g, grads| {
            if rx {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut gx = Array3::<f64>::zeros((a, h, w));
                for yi in 0..h {
                    for xi in 0..w {
                        for ai in 0..a {
                            gx[(ai, yi, xi)] = g1[(yi * w + xi) * a + ai];
                        }
                    }
                }
                accumulate(&mut grads[x.0], gx.into_dyn());
            }
        });
        self.push(out.into_dyn().into_shared(), Some(back), rx)
    }

    /// Reshape preserving logical element order.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let va = self.nodes[a.0].value.clone();
        let old_shape = va.shape().to_vec();
        assert_eq!(va.len(), shape.iter().product::<usize>(), "reshape: element count mismatch");
        let out = ArrayD::from_shape_vec(IxDyn(shape), va.iter().copied().collect())
            .unwrap()
            .into_shared();
        let ra = self.requires(a);
        let back: BackwardFn = Box::new(move |g, grads| {
            if ra {
                let gin =
                    ArrayD::from_shape_vec(IxDyn(&old_shape), g.iter().copied().collect()).unwrap();
                accumulate(&mut grads[a.0], gin);
            }
        });
        self.push(out, Some(back), ra)
    }

    /// Adds a single-element node `b` to every entry of `a`.
    pub fn add_broadcast_scalar(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.nodes[a.0].value.clone();
        let vb = self.nodes[b.0].value.clone();
        assert_eq!(vb.len(), 1, "add_broadcast_scalar: b must be single-element");
        let bval = vb.iter().next().copied().unwrap();
        let out = va.map(|x| x + bval).into_shared();
        let (ra, rb) = (self.requires(a), self.requires(b));
        let bshape = vb.raw_dim();
        let back: BackwardFn = Box::new(move |g, grads| {
            if ra {
                accumulate(&mut grads[a.0], g.clone());
            }
            if rb {
                accumulate(&mut grads[b.0], ArrayD::from_elem(bshape.clone(), g.sum()));
            }
        });
        self.push(out, Some(back), ra || rb)
    }

    /// Scalar node computed outside the graph from `parent`'s value;
    /// `grad_fn` maps the upstream scalar gradient to the parent gradient.
    pub fn scalar_from(
        &mut self,
        parent: NodeId,
        value: f64,
        grad_fn: Box<dyn Fn(f64) -> ArrayD<f64>>,
    ) -> NodeId {
        let rp = self.requires(parent);
        let back: BackwardFn = Box::new(move |g, grads| {
            if rp {
                let gs = g.iter().next().copied().unwrap();
                accumulate(&mut grads[parent.0], grad_fn(gs));
            }
        });
        self.push(
            ArrayD::from_elem(IxDyn(&[]), value).into_shared(),
            Some(back),
            rp,
        )
    }

    /// Sum of all elements -> scalar (rank 0).
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let va = self.nodes[a.0].value.clone();
        let s = va.sum();
        let ra = self.requires(a);
        let back: BackwardFn = Box::new(move |g, grads| {
            if ra {
                let gs = g.iter().next().copied().unwrap();
                accumulate(&mut grads[a.0], ArrayD::from_elem(va.raw_dim(), gs));
            }
        });
        self.push(ArrayD::from_elem(IxDyn(&[]), s).into_shared(), Some(back), ra)
    }

    /// Appends a custom node. `value` is the forward result; `backward`
    /// receives the output gradient and the gradient sink.
    pub fn custom(
        &mut self,
        value: ArrayD<f64>,
        requires_grad: bool,
        backward: BackwardFn,
    ) -> NodeId {
        self.push(value.into_shared(), Some(backward), requires_grad)
    }

    /// Projects each row of `r (n,d)` onto the column span of `b (d,k)`
    /// using the ridge-stabilized normal equations; the gradient flows to
    /// both `r` and `b`.
    pub fn project_rows(&mut self, b: NodeId, r: NodeId, ridge: f64) -> Result<NodeId> {
        let vb = self.nodes[b.0].value.clone();
        let vr = self.nodes[r.0].value.clone();
        let b2 = vb
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::shape("project_rows", "(d,k) basis", format!("{:?}", vb.shape())))?;
        let r2 = vr
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::shape("project_rows", "(n,d) rows", format!("{:?}", vr.shape())))?;
        let (d, k) = b2.dim();
        if r2.dim().1 != d {
            return Err(Error::shape(
                "project_rows",
                format!("rows of length {d}"),
                format!("{:?}", r2.dim()),
            ));
        }
        let gram_inv = crate::linalg::gram_inverse(&b2, ridge)?;
        // coefficients W = G^-1 B^T R^T, shape (k, n)
        let wcoef = gram_inv.dot(&b2.t().dot(&r2.t().to_owned()));
        let q = wcoef.t().dot(&b2.t()); // (n, d) = (B W)^T
        let (rb, rr) = (self.requires(b), self.requires(r));
        let back: BackwardFn = Box::new(move |g, grads| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap(); // (n,d)
            let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
            let r2 = vr.view().into_dimensionality::<Ix2>().unwrap();
            let z = gram_inv.dot(&b2.t().dot(&g2.t().to_owned())); // (k,n)
            if rr {
                // dL/dR = G_out · P  (P symmetric)
                let gr = z.t().dot(&b2.t()); // (n,k)·(k,d) = (n,d)
                accumulate(&mut grads[r.0], gr.into_dyn());
            }
            if rb {
                let qm = b2.dot(&wcoef); // (d,n) columns are q_i
                let gb = g2.t().dot(&wcoef.t()) + r2.t().dot(&z.t())
                    - qm.dot(&z.t())
                    - b2.dot(&z.dot(&wcoef.t()));
                accumulate(&mut grads[b.0], gb.into_dyn());
            }
        });
        let _ = k;
        Ok(self.push(q.into_dyn().into_shared(), Some(back), rb || rr))
    }

    /// Row-wise cosine similarity between `(n,d)` matrices -> `(n)`.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.nodes[a.0].value.clone();
        let vb = self.nodes[b.0].value.clone();
        let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(a2.dim(), b2.dim(), "cosine_rows: shape mismatch");
        let n = a2.dim().0;
        const EPS: f64 = 1e-12;
        let mut out = Array1::<f64>::zeros(n);
        for i in 0..n {
            let (ar, br) = (a2.row(i), b2.row(i));
            let na = ar.dot(&ar).sqrt().max(EPS);
            let nb = br.dot(&br).sqrt().max(EPS);
            out[i] = ar.dot(&br) / (na * nb);
        }
        let (ra, rb) = (self.requires(a), self.requires(b));
        let back: BackwardFn = Box::new(move |g, grads| {
            let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
            let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
            let mut ga = Array2::<f64>::zeros(a2.dim());
            let mut gb = Array2::<f64>::zeros(b2.dim());
            for i in 0..n {
                let (ar, br) = (a2.row(i), b2.row(i));
                let na = ar.dot(&ar).sqrt().max(EPS);
                let nb = br.dot(&br).sqrt().max(EPS);
                let dot = ar.dot(&br);
                let cos = dot / (na * nb);
                for j in 0..ar.len() {
                    ga[(i, j)] = g1[i] * (br[j] / (na * nb) - cos * ar[j] / (na * na));
                    gb[(i, j)] = g1[i] * (ar[j] / (na * nb) - cos * br[j] / (nb * nb));
                }
            }
            if ra {
                accumulate(&mut grads[a.0], ga.into_dyn());
            }
            if rb {
                accumulate(&mut grads[b.0], gb.into_dyn());
            }
        });
        self.push(out.into_dyn().into_shared(), Some(back), ra || rb)
    }
}

/// Unfolds `(C,H,W)` into the `(C*kh*kw, ho*wo)` patch matrix used by the
/// GEMM-based convolution.
fn im2col(x: &ArrayView3<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut col = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let iy = oy * stride + ki;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox * stride + kj;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        col[(row, oy * wo + ox)] = x[(ci, iy, ix - pad)];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds the patch matrix back into `(C,H,W)`.
fn col2im(
    gcol: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut gx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let iy = oy * stride + ki;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox * stride + kj;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        gx[(ci, iy, ix - pad)] += gcol[(row, oy * wo + ox)];
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of `f` at `x`, compared entrywise against
    /// `analytic` with relative tolerance `tol`.
    fn check_grad(
        f: &dyn Fn(&ArrayD<f64>) -> f64,
        x: &ArrayD<f64>,
        analytic: &ArrayD<f64>,
        tol: f64,
    ) {
        let h = 1e-4;
        // copy into standard layout; gradient arrays may be transposed
        let mut xp = ArrayD::from_shape_vec(x.raw_dim(), x.iter().copied().collect()).unwrap();
        let avals: Vec<f64> = analytic.iter().copied().collect();
        assert_eq!(analytic.shape(), x.shape(), "gradient shape mismatch");
        for idx in 0..x.len() {
            let orig = xp.as_slice_mut().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let fp = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let fm = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = avals[idx];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                (a - fd).abs() / denom < tol,
                "grad mismatch at {idx}: analytic {a}, fd {fd}"
            );
        }
    }

    /// Builds the scalar loss sum(op(x, w)) twice: once per evaluation for FD,
    /// once for the analytic gradient.
    fn loss_of<F>(build: F) -> impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> (f64, ArrayD<f64>, ArrayD<f64>)
    where
        F: Fn(&mut Graph, NodeId, NodeId) -> NodeId + Copy,
    {
        move |xv: &ArrayD<f64>, wv: &ArrayD<f64>| {
            let mut g = Graph::new();
            let x = g.param("x", xv.clone().into_shared());
            let w = g.param("w", wv.clone().into_shared());
            let y = build(&mut g, x, w);
            let loss = g.sum(y);
            let grads = g.backward(loss);
            (
                g.scalar_value(loss),
                grads.get("x").cloned().unwrap_or_else(|| ArrayD::zeros(xv.raw_dim())),
                grads.get("w").cloned().unwrap_or_else(|| ArrayD::zeros(wv.raw_dim())),
            )
        }
    }

    fn grad_test<F>(shape_x: &[usize], shape_w: &[usize], build: F)
    where
        F: Fn(&mut Graph, NodeId, NodeId) -> NodeId + Copy,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xv = rand_arr(&mut rng, shape_x);
        let wv = rand_arr(&mut rng, shape_w);
        let eval = loss_of(build);
        let (_, gx, gw) = eval(&xv, &wv);
        check_grad(&|x| eval(x, &wv).0, &xv, &gx, 1e-4);
        check_grad(&|w| eval(&xv, w).0, &wv, &gw, 1e-4);
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xv = rand_arr(&mut rng, &[2, 5, 6]);
        let wv = rand_arr(&mut rng, &[3, 2, 3, 3]);
        let bv = rand_arr(&mut rng, &[3]);
        let mut g = Graph::new();
        let x = g.constant(xv.clone());
        let w = g.constant(wv.clone());
        let b = g.constant(bv.clone());
        let y = g.conv2d(x, w, Some(b), 2, 1);
        let out = g.value(y).view().into_dimensionality::<Ix3>().unwrap().to_owned();

        // direct nested-loop reference
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let w4 = wv.view().into_dimensionality::<Ix4>().unwrap();
        let (ho, wo) = (3, 3);
        for o in 0..3 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bv[[o]];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki) as isize - 1;
                                let ix = (ox * 2 + kj) as isize - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                    acc += x3[(c, iy as usize, ix as usize)] * w4[(o, c, ki, kj)];
                                }
                            }
                        }
                    }
                    assert!((out[(o, oy, ox)] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        grad_test(&[2, 5, 5], &[3, 2, 3, 3], |g, x, w| g.conv2d(x, w, None, 1, 1));
        grad_test(&[2, 6, 6], &[2, 2, 3, 3], |g, x, w| g.conv2d(x, w, None, 2, 1));
    }

    #[test]
    fn conv2d_bias_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = rand_arr(&mut rng, &[2, 4, 4]);
        let wv = rand_arr(&mut rng, &[3, 2, 3, 3]);
        let bv = rand_arr(&mut rng, &[3]);
        let eval = |b: &ArrayD<f64>| -> (f64, ArrayD<f64>) {
            let mut g = Graph::new();
            let x = g.constant(xv.clone());
            let w = g.constant(wv.clone());
            let bn = g.param("b", b.clone().into_shared());
            let y = g.conv2d(x, w, Some(bn), 1, 1);
            let loss = g.sum(y);
            let grads = g.backward(loss);
            (g.scalar_value(loss), grads["b"].clone())
        };
        let (_, gb) = eval(&bv);
        check_grad(&|b| eval(b).0, &bv, &gb, 1e-4);
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        grad_test(&[4], &[3, 4], |g, x, w| g.matvec(w, x));
        grad_test(&[3, 4], &[4, 2], |g, x, w| g.matmul(x, w));
        grad_test(&[5], &[5], |g, x, w| {
            let s = g.add(x, w);
            let r = g.relu(s);
            g.sigmoid(r)
        });
        grad_test(&[2, 3], &[2, 3], |g, x, w| {
            let c = g.concat(x, w, 1);
            g.relu(c)
        });
    }

    #[test]
    fn pooling_gradients() {
        grad_test(&[3, 4, 4], &[3, 4, 4], |g, x, w| {
            let s = g.add(x, w);
            let m = g.global_max_pool(s);
            let a = g.global_mean_pool(s);
            g.add(m, a)
        });
    }

    #[test]
    fn dot_and_scale_map_gradients() {
        grad_test(&[3, 2, 2], &[3], |g, x, w| g.dot_map(x, w));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xv = rand_arr(&mut rng, &[3, 2, 2]);
        let sv = rand_arr(&mut rng, &[2, 2]);
        let eval = |x: &ArrayD<f64>, s: &ArrayD<f64>| {
            let mut g = Graph::new();
            let xn = g.param("x", x.clone().into_shared());
            let sn = g.param("s", s.clone().into_shared());
            let y = g.scale_map(xn, sn);
            let loss = g.sum(y);
            let grads = g.backward(loss);
            (g.scalar_value(loss), grads["x"].clone(), grads["s"].clone())
        };
        let (_, gx, gs) = eval(&xv, &sv);
        check_grad(&|x| eval(x, &sv).0, &xv, &gx, 1e-4);
        check_grad(&|s| eval(&xv, s).0, &sv, &gs, 1e-4);
    }

    #[test]
    fn gather_and_embed_gradients() {
        grad_test(&[2, 3, 3], &[2, 3, 3], |g, x, w| {
            let s = g.add(x, w);
            g.gather_cells(s, vec![0, 1, 2, 2], vec![2, 0, 1, 2], 2, 2)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tv = rand_arr(&mut rng, &[5, 3]);
        let eval = |t: &ArrayD<f64>| {
            let mut g = Graph::new();
            let tn = g.param("t", t.clone().into_shared());
            let y = g.embed_mean(tn, vec![1, 3, 3]);
            let loss = g.sum(y);
            let grads = g.backward(loss);
            (g.scalar_value(loss), grads["t"].clone())
        };
        let (_, gt) = eval(&tv);
        check_grad(&|t| eval(t).0, &tv, &gt, 1e-4);
    }

    #[test]
    fn projection_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bv = rand_arr(&mut rng, &[6, 2]);
        let rv = rand_arr(&mut rng, &[3, 6]);
        let weight = rand_arr(&mut rng, &[3, 6]);
        let eval = |b: &ArrayD<f64>, r: &ArrayD<f64>| {
            let mut g = Graph::new();
            let bn = g.param("b", b.clone().into_shared());
            let rn = g.param("r", r.clone().into_shared());
            let q = g.project_rows(bn, rn, 1e-6).unwrap();
            let wn = g.constant(weight.clone());
            // weighted sum so the gradient is not uniform
            let prod = {
                let qv = g.value(q).to_owned();
                let wv2 = weight.clone();
                let req = true;
                g.custom(
                    ArrayD::from_elem(IxDyn(&[]), (&qv * &wv2).sum()),
                    req,
                    Box::new(move |gq, grads| {
                        let gs = gq.iter().next().copied().unwrap();
                        super::accumulate(&mut grads[q.0], wv2.map(|x| x * gs));
                    }),
                )
            };
            let _ = wn;
            let grads = g.backward(prod);
            (g.scalar_value(prod), grads["b"].clone(), grads["r"].clone())
        };
        let (_, gb, gr) = eval(&bv, &rv);
        check_grad(&|b| eval(b, &rv).0, &bv, &gb, 1e-4);
        check_grad(&|r| eval(&bv, r).0, &rv, &gr, 1e-4);
    }

    #[test]
    fn cosine_rows_gradients() {
        grad_test(&[3, 4], &[3, 4], |g, x, w| g.cosine_rows(x, w));
    }

    #[test]
    fn flatten_anchor_major_order() {
        let mut g = Graph::new();
        let v = ArrayD::from_shape_fn(IxDyn(&[2, 2, 3]), |ix| {
            (ix[0] * 100 + ix[1] * 10 + ix[2]) as f64
        });
        let x = g.constant(v);
        let f = g.flatten_anchor_major(x);
        let out = g.value(f).to_owned();
        // cell (0,0): anchors 0,1 -> values 000, 100
        assert_eq!(out.as_slice().unwrap()[..4], [0.0, 100.0, 1.0, 101.0]);
    }

    #[test]
    fn reshape_broadcast_and_custom_scalar_gradients() {
        grad_test(&[6], &[1], |g, x, w| {
            let r = g.reshape(x, &[2, 3]);
            let s = g.sigmoid(r);
            g.add_broadcast_scalar(s, w)
        });
        // scalar_from: value x[0]^2 with hand gradient 2*x[0]
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let xv = rand_arr(&mut rng, &[3]);
        let eval = |x: &ArrayD<f64>| {
            let mut g = Graph::new();
            let xn = g.param("x", x.clone().into_shared());
            let x0 = g.value(xn)[[0]];
            let node = g.scalar_from(
                xn,
                x0 * x0,
                Box::new(move |gs| {
                    let mut out = ArrayD::zeros(IxDyn(&[3]));
                    out[[0]] = 2.0 * x0 * gs;
                    out
                }),
            );
            let grads = g.backward(node);
            (g.scalar_value(node), grads["x"].clone())
        };
        let (_, gx) = eval(&xv);
        check_grad(&|x| eval(x).0, &xv, &gx, 1e-4);
    }

    #[test]
    fn stack_rows_and_cols_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let av = rand_arr(&mut rng, &[4]);
        let bv = rand_arr(&mut rng, &[4]);
        let eval = |a: &ArrayD<f64>, b: &ArrayD<f64>| {
            let mut g = Graph::new();
            let an = g.param("a", a.clone().into_shared());
            let bn = g.param("b", b.clone().into_shared());
            let rows = g.stack_rows(&[an, bn]);
            let cols = g.stack_cols(&[an, bn]);
            let s1 = g.sum(rows);
            let sig = g.sigmoid(cols);
            let s2 = g.sum(sig);
            let loss = g.add(s1, s2);
            let grads = g.backward(loss);
            (g.scalar_value(loss), grads["a"].clone(), grads["b"].clone())
        };
        let (_, ga, gb) = eval(&av, &bv);
        check_grad(&|a| eval(a, &bv).0, &av, &ga, 1e-4);
        check_grad(&|b| eval(&av, b).0, &bv, &gb, 1e-4);
    }
}
