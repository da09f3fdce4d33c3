//! Group and layer normalization.

use super::{BackFn, Graph, Real, Var};
use ndarray::{ArrayD, Ix4, IxDyn};

/// Marker for a group-norm application; parameters live in a [`super::ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub groups: usize,
}

/// Marker for layer norm over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm;

impl<T: Real> Graph<T> {
    /// GroupNorm over `x[B, C, H, W]` with affine `gamma[C]`, `beta[C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert!(c % groups == 0, "channels must divide into groups");
        let cg = c / groups;
        let m = cg * h * w; // elements per (batch, group)
        let xf = self.value(x).as_slice().unwrap();
        let gf = self.value(gamma).as_slice().unwrap();
        let bf = self.value(beta).as_slice().unwrap();

        let mut out = vec![T::zero(); xf.len()];
        let mut means = vec![T::zero(); b * groups];
        let mut invstds = vec![T::zero(); b * groups];
        for bi in 0..b {
            for gi in 0..groups {
                let start = (bi * c + gi * cg) * h * w;
                let slice = &xf[start..start + m];
                let mut mean = T::zero();
                for &v in slice {
                    mean = mean + v;
                }
                mean = mean / T::from_f64(m as f64);
                let mut var = T::zero();
                for &v in slice {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var / T::from_f64(m as f64);
                let invstd = T::one() / (var + eps).sqrt();
                means[bi * groups + gi] = mean;
                invstds[bi * groups + gi] = invstd;
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let (ga, be) = (gf[ch], bf[ch]);
                    let off = (bi * c + ch) * h * w;
                    for p in 0..h * w {
                        let xhat = (xf[off + p] - mean) * invstd;
                        out[off + p] = ga * xhat + be;
                    }
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).unwrap();
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(
                move |g: &Graph<T>, gout: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                    let xf = g.value(x).as_slice().unwrap();
                    let gf = g.value(gamma).as_slice().unwrap();
                    let gof = gout.as_slice().unwrap();
                    let mfl = T::from_f64(m as f64);
                    if g.requires(gamma) || g.requires(beta) {
                        let mut dgamma = vec![T::zero(); c];
                        let mut dbeta = vec![T::zero(); c];
                        for bi in 0..b {
                            for gi in 0..groups {
                                let mean = means[bi * groups + gi];
                                let invstd = invstds[bi * groups + gi];
                                for ci in 0..cg {
                                    let ch = gi * cg + ci;
                                    let off = (bi * c + ch) * h * w;
                                    for p in 0..h * w {
                                        let xhat = (xf[off + p] - mean) * invstd;
                                        dgamma[ch] = dgamma[ch] + gof[off + p] * xhat;
                                        dbeta[ch] = dbeta[ch] + gof[off + p];
                                    }
                                }
                            }
                        }
                        if g.requires(gamma) {
                            sink(gamma.0, ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap());
                        }
                        if g.requires(beta) {
                            sink(beta.0, ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap());
                        }
                    }
                    if g.requires(x) {
                        let mut dx = vec![T::zero(); xf.len()];
                        for bi in 0..b {
                            for gi in 0..groups {
                                let mean = means[bi * groups + gi];
                                let invstd = invstds[bi * groups + gi];
                                // accumulate group sums of dxhat and dxhat*xhat
                                let mut s1 = T::zero();
                                let mut s2 = T::zero();
                                for ci in 0..cg {
                                    let ch = gi * cg + ci;
                                    let off = (bi * c + ch) * h * w;
                                    for p in 0..h * w {
                                        let xhat = (xf[off + p] - mean) * invstd;
                                        let dxh = gof[off + p] * gf[ch];
                                        s1 = s1 + dxh;
                                        s2 = s2 + dxh * xhat;
                                    }
                                }
                                s1 = s1 / mfl;
                                s2 = s2 / mfl;
                                for ci in 0..cg {
                                    let ch = gi * cg + ci;
                                    let off = (bi * c + ch) * h * w;
                                    for p in 0..h * w {
                                        let xhat = (xf[off + p] - mean) * invstd;
                                        let dxh = gof[off + p] * gf[ch];
                                        dx[off + p] = (dxh - s1 - xhat * s2) * invstd;
                                    }
                                }
                            }
                        }
                        sink(x.0, ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap());
                    }
                },
            ) as BackFn<T>
        });
        self.push(v, req, back)
    }

    /// LayerNorm over the last axis, no affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let d = xv.ndim();
        let last = xv.shape()[d - 1];
        let rows = xv.len() / last;
        let xf = xv.as_slice().unwrap();
        let mut out = vec![T::zero(); xf.len()];
        let mut means = vec![T::zero(); rows];
        let mut invstds = vec![T::zero(); rows];
        let lfl = T::from_f64(last as f64);
        for r in 0..rows {
            let row = &xf[r * last..(r + 1) * last];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / lfl;
            let mut var = T::zero();
            for &v in row {
                let dd = v - mean;
                var = var + dd * dd;
            }
            var = var / lfl;
            let invstd = T::one() / (var + eps).sqrt();
            means[r] = mean;
            invstds[r] = invstd;
            for c in 0..last {
                out[r * last + c] = (row[c] - mean) * invstd;
            }
        }
        let v = ArrayD::from_shape_vec(xv.raw_dim(), out).unwrap();
        self.unary(v, x, move |g, gout, x, _o| {
            let xf = g.value(x).as_slice().unwrap();
            let gof = gout.as_slice().unwrap();
            let mut dx = vec![T::zero(); xf.len()];
            let lfl = T::from_f64(last as f64);
            for r in 0..rows {
                let mean = means[r];
                let invstd = invstds[r];
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for c in 0..last {
                    let xhat = (xf[r * last + c] - mean) * invstd;
                    s1 = s1 + gof[r * last + c];
                    s2 = s2 + gof[r * last + c] * xhat;
                }
                s1 = s1 / lfl;
                s2 = s2 / lfl;
                for c in 0..last {
                    let xhat = (xf[r * last + c] - mean) * invstd;
                    dx[r * last + c] = (gof[r * last + c] - s1 - xhat * s2) * invstd;
                }
            }
            ArrayD::from_shape_vec(g.value(x).raw_dim(), dx).unwrap()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::gradcheck;
    use super::*;

    #[test]
    fn group_norm_grads() {
        gradcheck(
            &[2, 4, 2, 3],
            (0..48).map(|i| ((i * 13 % 23) as f64) * 0.17 - 1.7).collect(),
            |g, x| {
                let gamma = g.leaf(
                    ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.1, 0.9, -0.3, 0.5]).unwrap(),
                );
                let beta = g.leaf(
                    ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.0, 0.2, -0.1, 0.4]).unwrap(),
                );
                let y = g.group_norm(x, gamma, beta, 2, 1e-6);
                let s = g.mul(y, y);
                let t = g.silu(s);
                g.mean_all(t)
            },
            2e-5,
        );
    }

    #[test]
    fn layer_norm_grads_and_stats() {
        gradcheck(
            &[3, 5],
            (0..15).map(|i| ((i * 7 % 11) as f64) * 0.23 - 1.0).collect(),
            |g, x| {
                let y = g.layer_norm(x, 1e-6);
                let w = g.leaf(
                    ArrayD::from_shape_vec(
                        IxDyn(&[3, 5]),
                        (0..15).map(|i| ((i * 3 % 5) as f64) * 0.31 - 0.6).collect(),
                    )
                    .unwrap(),
                );
                let p = g.mul(y, w);
                g.sum_all(p)
            },
            2e-5,
        );
        let mut g = Graph::<f64>::new();
        let x = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let y = g.layer_norm(x, 1e-12);
        let yf = g.value(y).as_slice().unwrap();
        let mean: f64 = yf.iter().sum::<f64>() / 4.0;
        let var: f64 = yf.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6);
    }
}
