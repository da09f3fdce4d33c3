//! Matrix products and softmax on the tape.

use super::{BackFn, Graph, Real, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Ix2, Ix3, IxDyn};

fn mm<T: Real>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Array2<T> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(T::one(), a, b, T::zero(), &mut c);
    c
}

impl<T: Real> Graph<T> {
    /// `a[M, K] x b[K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
        let v = mm(&av, &bv).into_dyn();
        let req = self.requires(a) || self.requires(b);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(
                move |g: &Graph<T>, gout: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                    let go = gout.view().into_dimensionality::<Ix2>().unwrap();
                    if g.requires(a) {
                        let bv = g.value(b).view().into_dimensionality::<Ix2>().unwrap();
                        sink(a.0, mm(&go, &bv.t()).into_dyn());
                    }
                    if g.requires(b) {
                        let av = g.value(a).view().into_dimensionality::<Ix2>().unwrap();
                        sink(b.0, mm(&av.t(), &go).into_dyn());
                    }
                },
            ) as BackFn<T>
        });
        self.push(v, req, back)
    }

    /// Apply a linear map over the last axis: `x[..., K] x w[K, N]`.
    pub fn matmul_lastdim(&mut self, x: Var, w: Var) -> Var {
        let xshape: Vec<usize> = self.value(x).shape().to_vec();
        let k = *xshape.last().unwrap();
        let rows: usize = xshape[..xshape.len() - 1].iter().product();
        let n = self.value(w).shape()[1];
        let flat = self.reshape(x, &[rows, k]);
        let y = self.matmul(flat, w);
        let mut out_shape = xshape;
        *out_shape.last_mut().unwrap() = n;
        self.reshape(y, &out_shape)
    }

    /// Batched matmul `a[G, M, K] x b[G, K, N]`, with optional transposes of
    /// the trailing two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix3>().unwrap();
        let groups = av.shape()[0];
        assert_eq!(groups, bv.shape()[0], "bmm group mismatch");
        let (m, ka) = if ta {
            (av.shape()[2], av.shape()[1])
        } else {
            (av.shape()[1], av.shape()[2])
        };
        let (kb, n) = if tb {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        assert_eq!(ka, kb, "bmm inner dim mismatch");
        let mut out = ndarray::Array3::<T>::zeros((groups, m, n));
        for gi in 0..groups {
            let asl = av.index_axis(ndarray::Axis(0), gi);
            let bsl = bv.index_axis(ndarray::Axis(0), gi);
            let am = if ta { asl.reversed_axes() } else { asl };
            let bm = if tb { bsl.reversed_axes() } else { bsl };
            let mut c = out.index_axis_mut(ndarray::Axis(0), gi);
            general_mat_mul(T::one(), &am, &bm, T::zero(), &mut c);
        }
        let req = self.requires(a) || self.requires(b);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(
                move |g: &Graph<T>, gout: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                    let go = gout.view().into_dimensionality::<Ix3>().unwrap();
                    if g.requires(a) {
                        let bv = g.value(b).view().into_dimensionality::<Ix3>().unwrap();
                        let mut ga = ndarray::Array3::<T>::zeros(
                            g.value(a).view().into_dimensionality::<Ix3>().unwrap().raw_dim(),
                        );
                        for gi in 0..groups {
                            let gsl = go.index_axis(ndarray::Axis(0), gi);
                            let bsl = bv.index_axis(ndarray::Axis(0), gi);
                            let mut asl = ga.index_axis_mut(ndarray::Axis(0), gi);
                            // dA = dC * B^T (untransposed case); transposes shuffle operands
                            match (ta, tb) {
                                (false, false) => {
                                    general_mat_mul(T::one(), &gsl, &bsl.t(), T::zero(), &mut asl)
                                }
                                (false, true) => {
                                    general_mat_mul(T::one(), &gsl, &bsl, T::zero(), &mut asl)
                                }
                                (true, false) => {
                                    general_mat_mul(T::one(), &bsl, &gsl.t(), T::zero(), &mut asl)
                                }
                                (true, true) => {
                                    general_mat_mul(T::one(), &bsl.t(), &gsl.t(), T::zero(), &mut asl)
                                }
                            }
                        }
                        sink(a.0, ga.into_dyn());
                    }
                    if g.requires(b) {
                        let av = g.value(a).view().into_dimensionality::<Ix3>().unwrap();
                        let mut gb = ndarray::Array3::<T>::zeros(
                            g.value(b).view().into_dimensionality::<Ix3>().unwrap().raw_dim(),
                        );
                        for gi in 0..groups {
                            let gsl = go.index_axis(ndarray::Axis(0), gi);
                            let asl = av.index_axis(ndarray::Axis(0), gi);
                            let mut bsl = gb.index_axis_mut(ndarray::Axis(0), gi);
                            match (ta, tb) {
                                (false, false) => {
                                    general_mat_mul(T::one(), &asl.t(), &gsl, T::zero(), &mut bsl)
                                }
                                (true, false) => {
                                    general_mat_mul(T::one(), &asl, &gsl, T::zero(), &mut bsl)
                                }
                                (false, true) => {
                                    general_mat_mul(T::one(), &gsl.t(), &asl, T::zero(), &mut bsl)
                                }
                                (true, true) => {
                                    general_mat_mul(T::one(), &gsl.t(), &asl.t(), T::zero(), &mut bsl)
                                }
                            }
                        }
                        sink(b.0, gb.into_dyn());
                    }
                },
            ) as BackFn<T>
        });
        self.push(out.into_dyn(), req, back)
    }

    /// Softmax over the last axis.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = av.ndim();
        let last = av.shape()[d - 1];
        let rows = av.len() / last;
        let xf = av.as_slice().unwrap();
        let mut out = Vec::with_capacity(xf.len());
        for r in 0..rows {
            let row = &xf[r * last..(r + 1) * last];
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            let mut exps = Vec::with_capacity(last);
            for &v in row {
                let e = (v - mx).exp();
                denom = denom + e;
                exps.push(e);
            }
            for e in exps {
                out.push(e / denom);
            }
        }
        let v = ArrayD::from_shape_vec(av.raw_dim(), out).unwrap();
        let out_id = self.next_id();
        self.unary(v, a, move |g, gout, _a, _o| {
            let y = &g.nodes[out_id].value;
            let yf = y.as_slice().unwrap();
            let gf = gout.as_slice().unwrap();
            let mut r = vec![T::zero(); gf.len()];
            for row in 0..rows {
                let off = row * last;
                let mut dot = T::zero();
                for c in 0..last {
                    dot = dot + gf[off + c] * yf[off + c];
                }
                for c in 0..last {
                    r[off + c] = yf[off + c] * (gf[off + c] - dot);
                }
            }
            ArrayD::from_shape_vec(IxDyn(g.value(_a).shape()), r).unwrap()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::gradcheck;
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn matmul_grads() {
        gradcheck(
            &[2, 3],
            vec![0.4, -0.1, 0.9, 0.2, 1.3, -0.6],
            |g, x| {
                let w = g.leaf(
                    ArrayD::from_shape_vec(
                        IxDyn(&[3, 2]),
                        vec![0.3, -0.2, 0.8, 0.5, -0.4, 1.1],
                    )
                    .unwrap(),
                );
                let y = g.matmul(x, w);
                let s = g.mul(y, y);
                g.mean_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn bmm_transpose_variants_grads() {
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            gradcheck(
                &[2, 2, 3],
                (0..12).map(|i| 0.1 * i as f64 - 0.5).collect(),
                move |g, x| {
                    // pair x with a permuted copy of itself so both inputs get grads
                    let b = if ta == tb { g.permute(x, &[0, 2, 1]) } else { x };
                    let y = g.bmm(x, b, ta, tb);
                    let s = g.mul(y, y);
                    g.mean_all(s)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn softmax_grads_and_rows_sum_to_one() {
        gradcheck(
            &[2, 4],
            vec![0.5, -1.0, 2.0, 0.0, 1.5, 1.4, -0.2, 0.3],
            |g, x| {
                let s = g.softmax_lastdim(x);
                let w = g.leaf(ArrayD::from_shape_vec(
                    IxDyn(&[2, 4]),
                    vec![1.0, -2.0, 0.5, 0.7, -0.3, 0.4, 1.2, -0.8],
                ).unwrap());
                let p = g.mul(s, w);
                g.sum_all(p)
            },
            1e-5,
        );
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.softmax_lastdim(x);
        let total: f64 = g.value(s).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
