//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Graph`] is a single-use tape: forward calls append nodes, `backward`
//! walks the tape in reverse and accumulates gradients into leaves. The
//! engine is generic over the element type so training can run in `f32`
//! while gradient checks run at 64-bit precision.

mod conv;
mod layers;
mod linalg;
mod norm;
mod opt;

pub use conv::Conv2d;
pub use layers::{init_uniform as layers_init_uniform, Binder, ConvLayer, GroupNormLayer, Linear, ParamId, ParamStore};
pub use norm::{GroupNorm, LayerNorm};
pub use opt::Adam;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

/// Scalar element type of the engine (`f32` or `f64`).
pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Size of the on-disk little-endian encoding.
    const BYTE_WIDTH: usize;
    /// Tag used in checkpoint headers.
    const DTYPE_TAG: u8;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const BYTE_WIDTH: usize = 4;
    const DTYPE_TAG: u8 = 1;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f32>()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const BYTE_WIDTH: usize = 8;
    const DTYPE_TAG: u8 = 2;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f64>()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&Graph<T>, &ArrayD<T>, &mut dyn FnMut(usize, ArrayD<T>))>;

struct Node<T: Real> {
    value: ArrayD<T>,
    requires: bool,
    back: Option<BackFn<T>>,
}

/// Single-use computation tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], keyed by leaf node id.
pub struct Grads<T: Real> {
    by_node: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.by_node.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub(crate) fn push(&mut self, value: ArrayD<T>, requires: bool, back: Option<BackFn<T>>) -> Var {
        self.nodes.push(Node {
            value,
            requires,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Next node id; lets an op closure refer to its own output value.
    pub(crate) fn next_id(&self) -> usize {
        self.nodes.len()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        *a.iter().next().unwrap()
    }

    /// Leaf that participates in gradient computation.
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, true, None)
    }

    /// Leaf treated as a constant: no gradient flows into it.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, false, None)
    }

    pub fn scalar_constant(&mut self, x: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), x))
    }

    /// Re-enter a value as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Reverse pass from a scalar loss. Returns gradients for all leaves
    /// (and any interior node whose gradient was requested via `keep`).
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward() needs a scalar loss");
        let mut by_node: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        by_node[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires {
                by_node[id] = None;
                continue;
            }
            let Some(back) = &self.nodes[id].back else {
                continue; // leaf: keep accumulated gradient
            };
            let Some(gout) = by_node[id].take() else {
                continue; // not on any path to the loss
            };
            let mut sink = |pid: usize, g: ArrayD<T>| {
                debug_assert_eq!(g.shape(), self.nodes[pid].value.shape());
                match &mut by_node[pid] {
                    Some(acc) => {
                        ndarray::Zip::from(acc).and(&g).for_each(|a, &b| *a = *a + b);
                    }
                    slot @ None => *slot = Some(g),
                }
            };
            back(self, &gout, &mut sink);
        }
        Grads { by_node }
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.binary(v, a, b, |_g, gout, _va, _vb| (gout.clone(), gout.clone()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.binary(v, a, b, |_g, gout, _va, _vb| (gout.clone(), gout.mapv(|x| -x)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.binary(v, a, b, |g, gout, va, vb| {
            (gout * g.value(vb), gout * g.value(va))
        })
    }

    fn binary(
        &mut self,
        value: ArrayD<T>,
        a: Var,
        b: Var,
        grads: impl Fn(&Graph<T>, &ArrayD<T>, Var, Var) -> (ArrayD<T>, ArrayD<T>) + 'static,
    ) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "elementwise op shape mismatch"
        );
        let req = self.requires(a) || self.requires(b);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(
                move |g: &Graph<T>, gout: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                    let (ga, gb) = grads(g, gout, a, b);
                    if g.requires(a) {
                        sink(a.0, ga);
                    }
                    if g.requires(b) {
                        sink(b.0, gb);
                    }
                },
            ) as BackFn<T>
        });
        self.push(value, req, back)
    }

    // ---- elementwise unary ----

    fn unary(
        &mut self,
        value: ArrayD<T>,
        a: Var,
        dfdx: impl Fn(&Graph<T>, &ArrayD<T>, Var, usize) -> ArrayD<T> + 'static,
    ) -> Var {
        let req = self.requires(a);
        let out_id = self.next_id();
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(
                move |g: &Graph<T>, gout: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                    sink(a.0, dfdx(g, gout, a, out_id));
                },
            ) as BackFn<T>
        });
        self.push(value, req, back)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        self.unary(v, a, |_g, gout, _a, _o| gout.mapv(|x| -x))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.unary(v, a, move |_g, gout, _a, _o| gout.mapv(|x| x * c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.unary(v, a, |_g, gout, _a, _o| gout.clone())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.exp());
        self.unary(v, a, |g, gout, _a, o| gout * &g.nodes[o].value)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.sqrt());
        self.unary(v, a, |g, gout, _a, o| {
            let half = T::from_f64(0.5);
            let mut r = gout / &g.nodes[o].value;
            r.mapv_inplace(|x| x * half);
            r
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.tanh());
        self.unary(v, a, |g, gout, _a, o| {
            let y = &g.nodes[o].value;
            let mut r = gout.clone();
            ndarray::Zip::from(&mut r).and(y).for_each(|gi, &yi| {
                *gi = *gi * (T::one() - yi * yi);
            });
            r
        })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.unary(v, a, |g, gout, a, _o| {
            let x = g.value(a);
            let mut r = gout.clone();
            ndarray::Zip::from(&mut r).and(x).for_each(|gi, &xi| {
                let s = sigmoid(xi);
                *gi = *gi * (s * (T::one() + xi * (T::one() - s)));
            });
            r
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, a, |g, gout, a, _o| {
            let x = g.value(a);
            let mut r = gout.clone();
            ndarray::Zip::from(&mut r).and(x).for_each(|gi, &xi| {
                if xi <= T::zero() {
                    *gi = T::zero();
                }
            });
            r
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self
            .value(a)
            .mapv(|x| if x > T::zero() { x } else { x * slope });
        self.unary(v, a, move |g, gout, a, _o| {
            let x = g.value(a);
            let mut r = gout.clone();
            ndarray::Zip::from(&mut r).and(x).for_each(|gi, &xi| {
                if xi <= T::zero() {
                    *gi = *gi * slope;
                }
            });
            r
        })
    }

    /// Clamp with pass-through gradient strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).mapv(|x| x.max(lo).min(hi));
        self.unary(v, a, move |g, gout, a, _o| {
            let x = g.value(a);
            let mut r = gout.clone();
            ndarray::Zip::from(&mut r).and(x).for_each(|gi, &xi| {
                if xi < lo || xi > hi {
                    *gi = T::zero();
                }
            });
            r
        })
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let v = ArrayD::from_elem(IxDyn(&[1]), s);
        self.unary(v, a, |g, gout, a, _o| {
            let go = gout[[0]];
            ArrayD::from_elem(g.value(a).raw_dim(), go)
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).len() as f64);
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// Sum over the last axis, keeping it with length 1.
    pub fn sum_lastdim(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let d = val.ndim();
        let last = val.shape()[d - 1];
        let mut shape: Vec<usize> = val.shape().to_vec();
        shape[d - 1] = 1;
        let rows = val.len() / last;
        let flat = val.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = T::zero();
            for c in 0..last {
                acc = acc + flat[r * last + c];
            }
            out.push(acc);
        }
        let v = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.unary(v, a, move |g, gout, a, _o| {
            let xshape = g.value(a).raw_dim();
            let gflat = gout.as_slice().expect("standard layout");
            let mut r = Vec::with_capacity(rows * last);
            for row in 0..rows {
                for _ in 0..last {
                    r.push(gflat[row]);
                }
            }
            ArrayD::from_shape_vec(xshape, r).unwrap()
        })
    }

    /// Multiply `x[..., D]` by `s[..., 1]`, broadcasting over the last axis.
    pub fn mul_last(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        let d = xv.ndim();
        let last = xv.shape()[d - 1];
        assert_eq!(sv.shape()[d - 1], 1, "mul_last scale must have last dim 1");
        assert_eq!(&xv.shape()[..d - 1], &sv.shape()[..d - 1]);
        let rows = xv.len() / last;
        let xf = xv.as_slice().unwrap();
        let sf = sv.as_slice().unwrap();
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let sc = sf[r];
            for c in 0..last {
                out.push(xf[r * last + c] * sc);
            }
        }
        let v = ArrayD::from_shape_vec(xv.raw_dim(), out).unwrap();
        let req = self.requires(x) || self.requires(s);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(
                move |g: &Graph<T>, gout: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                    let gf = gout.as_slice().unwrap();
                    if g.requires(x) {
                        let sf = g.value(s).as_slice().unwrap();
                        let mut gx = Vec::with_capacity(gf.len());
                        for r in 0..rows {
                            for c in 0..last {
                                gx.push(gf[r * last + c] * sf[r]);
                            }
                        }
                        sink(x.0, ArrayD::from_shape_vec(g.value(x).raw_dim(), gx).unwrap());
                    }
                    if g.requires(s) {
                        let xf = g.value(x).as_slice().unwrap();
                        let mut gs = Vec::with_capacity(rows);
                        for r in 0..rows {
                            let mut acc = T::zero();
                            for c in 0..last {
                                acc = acc + gf[r * last + c] * xf[r * last + c];
                            }
                            gs.push(acc);
                        }
                        sink(s.0, ArrayD::from_shape_vec(g.value(s).raw_dim(), gs).unwrap());
                    }
                },
            ) as BackFn<T>
        });
        self.push(v, req, back)
    }

    /// Divide `x[..., D]` by `s[..., 1]` broadcast over the last axis.
    pub fn div_last(&mut self, x: Var, s: Var) -> Var {
        let inv = self.recip(s);
        self.mul_last(x, inv)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| T::one() / x);
        self.unary(v, a, |g, gout, _a, o| {
            let y = &g.nodes[o].value;
            let mut r = gout.clone();
            ndarray::Zip::from(&mut r).and(y).for_each(|gi, &yi| {
                *gi = -(*gi) * yi * yi;
            });
            r
        })
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(a).len(), "reshape length mismatch");
        let old_shape: Vec<usize> = self.value(a).shape().to_vec();
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        self.unary(v, a, move |_g, gout, _a, _o| {
            gout.clone()
                .into_shape_with_order(IxDyn(&old_shape))
                .unwrap()
        })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes_v: Vec<usize> = axes.to_vec();
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(&axes_v))
            .to_owned()
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes_v.len()];
        for (i, &ax) in axes_v.iter().enumerate() {
            inverse[ax] = i;
        }
        self.unary(v, a, move |_g, gout, _a, _o| {
            gout.view()
                .permuted_axes(IxDyn(&inverse))
                .to_owned()
                .as_standard_layout()
                .to_owned()
        })
    }

    /// Narrow along `axis` to `[start, start+len)`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value(a)
            .slice_axis(ndarray::Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned()
            .as_standard_layout()
            .to_owned();
        self.unary(v, a, move |g, gout, a, _o| {
            let mut gx = ArrayD::zeros(g.value(a).raw_dim());
            gx.slice_axis_mut(ndarray::Axis(axis), ndarray::Slice::from(start..start + len))
                .assign(gout);
            gx
        })
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(ndarray::Axis(axis), &views)
            .unwrap()
            .as_standard_layout()
            .to_owned();
        let req = parts.iter().any(|p| self.requires(*p));
        let parts_v: Vec<Var> = parts.to_vec();
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(
                move |g: &Graph<T>, gout: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                    let mut start = 0usize;
                    for p in &parts_v {
                        let len = g.value(*p).shape()[axis];
                        if g.requires(*p) {
                            let gp = gout
                                .slice_axis(
                                    ndarray::Axis(axis),
                                    ndarray::Slice::from(start..start + len),
                                )
                                .to_owned()
                                .as_standard_layout()
                                .to_owned();
                            sink(p.0, gp);
                        }
                        start += len;
                    }
                },
            ) as BackFn<T>
        });
        self.push(v, req, back)
    }

    // ---- broadcast helpers over the middle axis of [B, N, C] ----

    /// `x[B, N, C] * s[B, C]`, broadcasting `s` over tokens.
    pub fn mul_bcast_mid(&mut self, x: Var, s: Var) -> Var {
        self.bcast_mid(x, s, true)
    }

    /// `x[B, N, C] + s[B, C]`, broadcasting `s` over tokens.
    pub fn add_bcast_mid(&mut self, x: Var, s: Var) -> Var {
        self.bcast_mid(x, s, false)
    }

    fn bcast_mid(&mut self, x: Var, s: Var, multiply: bool) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        assert_eq!(xv.ndim(), 3);
        assert_eq!(sv.ndim(), 2);
        let (b, n, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(sv.shape(), &[b, c]);
        let xf = xv.as_slice().unwrap();
        let sf = sv.as_slice().unwrap();
        let mut out = Vec::with_capacity(xf.len());
        for bi in 0..b {
            for _t in 0..n {
                for ci in 0..c {
                    let xi = xf[out.len()];
                    let si = sf[bi * c + ci];
                    out.push(if multiply { xi * si } else { xi + si });
                }
            }
        }
        let v = ArrayD::from_shape_vec(xv.raw_dim(), out).unwrap();
        let req = self.requires(x) || self.requires(s);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(
                move |g: &Graph<T>, gout: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                    let gf = gout.as_slice().unwrap();
                    if g.requires(x) {
                        if multiply {
                            let sf = g.value(s).as_slice().unwrap();
                            let mut gx = Vec::with_capacity(gf.len());
                            let mut idx = 0;
                            for bi in 0..b {
                                for _t in 0..n {
                                    for ci in 0..c {
                                        gx.push(gf[idx] * sf[bi * c + ci]);
                                        idx += 1;
                                    }
                                }
                            }
                            sink(x.0, ArrayD::from_shape_vec(g.value(x).raw_dim(), gx).unwrap());
                        } else {
                            sink(x.0, gout.clone());
                        }
                    }
                    if g.requires(s) {
                        let mut gs = vec![T::zero(); b * c];
                        let xf = g.value(x).as_slice().unwrap();
                        let mut idx = 0;
                        for bi in 0..b {
                            for _t in 0..n {
                                for ci in 0..c {
                                    gs[bi * c + ci] = gs[bi * c + ci]
                                        + if multiply { gf[idx] * xf[idx] } else { gf[idx] };
                                    idx += 1;
                                }
                            }
                        }
                        sink(
                            s.0,
                            ArrayD::from_shape_vec(g.value(s).raw_dim(), gs).unwrap(),
                        );
                    }
                },
            ) as BackFn<T>
        });
        self.push(v, req, back)
    }

    /// Add a bias vector over the last axis: `x[..., C] + b[C]`.
    pub fn add_bias_last(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        let d = xv.ndim();
        let c = xv.shape()[d - 1];
        assert_eq!(bv.shape(), &[c]);
        let rows = xv.len() / c;
        let xf = xv.as_slice().unwrap();
        let bf = bv.as_slice().unwrap();
        let mut out = Vec::with_capacity(xf.len());
        for r in 0..rows {
            for ci in 0..c {
                out.push(xf[r * c + ci] + bf[ci]);
            }
        }
        let v = ArrayD::from_shape_vec(xv.raw_dim(), out).unwrap();
        let req = self.requires(x) || self.requires(bias);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(
                move |g: &Graph<T>, gout: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                    if g.requires(x) {
                        sink(x.0, gout.clone());
                    }
                    if g.requires(bias) {
                        let gf = gout.as_slice().unwrap();
                        let mut gb = vec![T::zero(); c];
                        for r in 0..rows {
                            for ci in 0..c {
                                gb[ci] = gb[ci] + gf[r * c + ci];
                            }
                        }
                        sink(bias.0, ArrayD::from_shape_vec(IxDyn(&[c]), gb).unwrap());
                    }
                },
            ) as BackFn<T>
        });
        self.push(v, req, back)
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn arr(shape: &[usize], data: Vec<f64>) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Central-difference gradient check for a scalar-valued builder.
    pub(crate) fn gradcheck(
        shape: &[usize],
        data: Vec<f64>,
        build: impl Fn(&mut Graph<f64>, Var) -> Var,
        tol: f64,
    ) {
        let x0 = arr(shape, data);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("input gradient").clone();

        let h = 1e-5;
        let flat = x0.as_slice().unwrap().to_vec();
        for i in 0..flat.len() {
            let eval = |v: f64| {
                let mut d = flat.clone();
                d[i] = v;
                let mut g = Graph::new();
                let x = g.leaf(arr(shape, d));
                let l = build(&mut g, x);
                g.scalar(l)
            };
            let fd = (eval(flat[i] + h) - eval(flat[i] - h)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[i];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                (an - fd).abs() / denom < tol,
                "grad mismatch at {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn elementwise_grads() {
        gradcheck(
            &[6],
            vec![0.3, -0.7, 1.2, -1.5, 0.01, 2.0],
            |g, x| {
                let a = g.silu(x);
                let b = g.tanh(a);
                let c = g.exp(b);
                let d = g.mul(c, x);
                g.mean_all(d)
            },
            1e-6,
        );
    }

    #[test]
    fn reduction_and_broadcast_grads() {
        gradcheck(
            &[2, 3],
            vec![0.5, -0.2, 0.9, 1.1, -0.4, 0.3],
            |g, x| {
                let sq = g.mul(x, x);
                let n2 = g.sum_lastdim(sq);
                let eps = g.scalar_constant(1e-8);
                let n2e = {
                    let e = ArrayD::from_elem(IxDyn(&[2, 1]), 1e-8);
                    let ec = g.constant(e);
                    let _ = eps;
                    g.add(n2, ec)
                };
                let norm = g.sqrt(n2e);
                let y = g.div_last(x, norm);
                let w = g.constant(arr(&[2, 3], vec![0.9, -1.3, 0.4, 0.2, 0.8, -0.5]));
                let s = g.mul(y, w);
                g.sum_all(s)
            },
            1e-5,
        );
    }

    #[test]
    fn shape_op_grads() {
        gradcheck(
            &[2, 2, 3],
            (0..12).map(|i| (i as f64) * 0.17 - 0.9).collect(),
            |g, x| {
                let p = g.permute(x, &[1, 0, 2]);
                let r = g.reshape(p, &[2, 6]);
                let n = g.narrow(r, 1, 1, 4);
                let c = g.concat(1, &[n, n]);
                let sq = g.mul(c, c);
                g.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr(&[2], vec![1.0, 2.0]));
        let d = g.detach(x);
        let y = g.mul(d, d);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn clamp_zeroes_outside() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr(&[3], vec![-2.0, 0.5, 3.0]));
        let c = g.clamp(x, -1.0, 1.0);
        let loss = g.sum_all(c);
        let grads = g.backward(loss);
        let gx = grads.get(x).unwrap().as_slice().unwrap().to_vec();
        assert_eq!(gx, vec![0.0, 1.0, 0.0]);
    }
}
