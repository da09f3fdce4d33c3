//! Convolution, upsampling and patch packing.
//!
//! Convolutions pad vertically with zeros and horizontally by wrapping, so
//! every layer is exactly equivariant to circular column shifts.

use super::{BackFn, Graph, Real, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, Ix4, IxDyn};

/// Geometry of a conv2d application.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub stride: (usize, usize),
}

fn conv_out_dims(h: usize, w: usize, kh: usize, kw: usize, s: (usize, usize)) -> (usize, usize) {
    let ph = kh / 2;
    let pw = kw / 2;
    ((h + 2 * ph - kh) / s.0 + 1, (w + 2 * pw - kw) / s.1 + 1)
}

/// Gather input patches into a `[C*kh*kw, Ho*Wo]` matrix. Rows clamp at the
/// vertical borders (replicate padding); columns wrap.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    s: (usize, usize),
    col: &mut Array2<T>,
) {
    let (ho, wo) = conv_out_dims(h, w, kh, kw, s);
    let ph = (kh / 2) as isize;
    let pw = (kw / 2) as isize;
    let colf = col.as_slice_mut().unwrap();
    let owo = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut colf[row * owo..(row + 1) * owo];
                let off = kx as isize - pw;
                // columns wrap only near the borders; split the row into
                // wrapped prefix / linear middle / wrapped suffix
                let (lo, hi) = inner_span(off, s.1, w, wo);
                let mut di = 0usize;
                for oy in 0..ho {
                    let iy = ((oy * s.0) as isize + ky as isize - ph).clamp(0, h as isize - 1);
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..lo {
                        let ix = (ox * s.1) as isize + off + w as isize;
                        dst[di + ox] = x[base + ix as usize];
                    }
                    let mut ix = (lo * s.1) as isize + off;
                    for ox in lo..hi {
                        dst[di + ox] = x[base + ix as usize];
                        ix += s.1 as isize;
                    }
                    for ox in hi..wo {
                        let ix = (ox * s.1) as isize + off - w as isize;
                        dst[di + ox] = x[base + ix as usize];
                    }
                    di += wo;
                }
            }
        }
    }
}

/// Output-column range `[lo, hi)` whose input column `ox*s + off` lies in
/// `[0, w)` without wrapping.
fn inner_span(off: isize, s: usize, w: usize, wo: usize) -> (usize, usize) {
    let mut lo = 0usize;
    while lo < wo && (lo * s) as isize + off < 0 {
        lo += 1;
    }
    let mut hi = wo;
    while hi > lo && ((hi - 1) * s) as isize + off >= w as isize {
        hi -= 1;
    }
    (lo, hi)
}

/// Scatter-add the columns back into an input-shaped buffer (adjoint of
/// [`im2col`]).
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    col: &Array2<T>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    s: (usize, usize),
    x: &mut [T],
) {
    let (ho, wo) = conv_out_dims(h, w, kh, kw, s);
    let ph = (kh / 2) as isize;
    let pw = (kw / 2) as isize;
    let colf = col.as_slice().unwrap();
    let owo = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &colf[row * owo..(row + 1) * owo];
                let off = kx as isize - pw;
                let (lo, hi) = inner_span(off, s.1, w, wo);
                let mut si = 0usize;
                for oy in 0..ho {
                    let iy = ((oy * s.0) as isize + ky as isize - ph).clamp(0, h as isize - 1);
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..lo {
                        let ix = (ox * s.1) as isize + off + w as isize;
                        x[base + ix as usize] = x[base + ix as usize] + src[si + ox];
                    }
                    let mut ix = (lo * s.1) as isize + off;
                    for ox in lo..hi {
                        x[base + ix as usize] = x[base + ix as usize] + src[si + ox];
                        ix += s.1 as isize;
                    }
                    for ox in hi..wo {
                        let ix = (ox * s.1) as isize + off - w as isize;
                        x[base + ix as usize] = x[base + ix as usize] + src[si + ox];
                    }
                    si += wo;
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// 2-D convolution: `x[B, C, H, W]` with `w[O, C, kh, kw]` and `b[O]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: (usize, usize)) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self
            .value(weight)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (o, wc, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(c, wc, "conv2d channel mismatch");
        let (ho, wo) = conv_out_dims(h, w, kh, kw, stride);
        let ckk = c * kh * kw;
        let wmat = wv.to_shape((o, ckk)).unwrap().to_owned();
        let bv = self.value(bias).as_slice().unwrap().to_vec();

        let mut out = ndarray::Array4::<T>::zeros((b, o, ho, wo));
        let mut cols: Vec<Array2<T>> = Vec::with_capacity(b);
        {
            let xf = self.value(x).as_slice().unwrap();
            for bi in 0..b {
                let mut col = Array2::<T>::zeros((ckk, ho * wo));
                im2col(&xf[bi * c * h * w..], c, h, w, kh, kw, stride, &mut col);
                let mut omat = Array2::<T>::zeros((o, ho * wo));
                general_mat_mul(T::one(), &wmat.view(), &col.view(), T::zero(), &mut omat);
                let of = omat.as_slice().unwrap();
                let dst = out.index_axis_mut(ndarray::Axis(0), bi);
                let dstf = dst.into_slice().unwrap();
                for oi in 0..o {
                    let bias_o = bv[oi];
                    for p in 0..ho * wo {
                        dstf[oi * ho * wo + p] = of[oi * ho * wo + p] + bias_o;
                    }
                }
                cols.push(col);
            }
        }
        let req = self.requires(x) || self.requires(weight) || self.requires(bias);
        let back: Option<BackFn<T>> = req.then(|| {
            Box::new(
                move |g: &Graph<T>, gout: &ArrayD<T>, sink: &mut dyn FnMut(usize, ArrayD<T>)| {
                    let gof = gout.as_slice().unwrap();
                    if g.requires(weight) {
                        let mut dw = Array2::<T>::zeros((o, ckk));
                        for bi in 0..b {
                            let gmat = ndarray::ArrayView2::from_shape(
                                (o, ho * wo),
                                &gof[bi * o * ho * wo..(bi + 1) * o * ho * wo],
                            )
                            .unwrap();
                            general_mat_mul(T::one(), &gmat, &cols[bi].t(), T::one(), &mut dw);
                        }
                        sink(
                            weight.0,
                            dw.into_shape_with_order(IxDyn(&[o, c, kh, kw])).unwrap(),
                        );
                    }
                    if g.requires(bias) {
                        let mut db = vec![T::zero(); o];
                        for bi in 0..b {
                            for oi in 0..o {
                                let off = (bi * o + oi) * ho * wo;
                                for p in 0..ho * wo {
                                    db[oi] = db[oi] + gof[off + p];
                                }
                            }
                        }
                        sink(bias.0, ArrayD::from_shape_vec(IxDyn(&[o]), db).unwrap());
                    }
                    if g.requires(x) {
                        let wv = g
                            .value(weight)
                            .view()
                            .into_dimensionality::<Ix4>()
                            .unwrap();
                        let wmat = wv.to_shape((o, ckk)).unwrap().to_owned();
                        let mut dx = vec![T::zero(); b * c * h * w];
                        for bi in 0..b {
                            let gmat = ndarray::ArrayView2::from_shape(
                                (o, ho * wo),
                                &gof[bi * o * ho * wo..(bi + 1) * o * ho * wo],
                            )
                            .unwrap();
                            let mut dcol = Array2::<T>::zeros((ckk, ho * wo));
                            general_mat_mul(T::one(), &wmat.t(), &gmat, T::zero(), &mut dcol);
                            col2im_add(
                                &dcol,
                                c,
                                h,
                                w,
                                kh,
                                kw,
                                stride,
                                &mut dx[bi * c * h * w..(bi + 1) * c * h * w],
                            );
                        }
                        sink(
                            x.0,
                            ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap(),
                        );
                    }
                },
            ) as BackFn<T>
        });
        self.push(out.into_dyn(), req, back)
    }

    /// Nearest-neighbour upsampling by integer factors per spatial axis.
    pub fn upsample_nearest(&mut self, x: Var, fy: usize, fx: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (oh, ow) = (h * fy, w * fx);
        let xf = self.value(x).as_slice().unwrap();
        let mut out = vec![T::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            for oy in 0..oh {
                let iy = oy / fy;
                let src = &xf[(bc * h + iy) * w..(bc * h + iy + 1) * w];
                let dst = &mut out[(bc * oh + oy) * ow..(bc * oh + oy + 1) * ow];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = src[ox / fx];
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).unwrap();
        self.unary(v, x, move |_g, gout, _x, _o| {
            let gf = gout.as_slice().unwrap();
            let mut dx = vec![T::zero(); b * c * h * w];
            for bc in 0..b * c {
                for oy in 0..oh {
                    let iy = oy / fy;
                    for ox in 0..ow {
                        let ix = ox / fx;
                        dx[(bc * h + iy) * w + ix] =
                            dx[(bc * h + iy) * w + ix] + gf[(bc * oh + oy) * ow + ox];
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap()
        })
    }

    /// Pack `x[B, C, h, w]` into tokens `[B, (h/p)(w/p), C*p*p]`.
    pub fn patchify(&mut self, x: Var, p: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert!(h % p == 0 && w % p == 0, "patch size must divide latent dims");
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;
        let d = c * p * p;
        let xf = self.value(x).as_slice().unwrap();
        let mut out = vec![T::zero(); b * n * d];
        for bi in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    let tok = gy * gw + gx;
                    for ci in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                let src = ((bi * c + ci) * h + gy * p + dy) * w + gx * p + dx;
                                let dst = (bi * n + tok) * d + (ci * p + dy) * p + dx;
                                out[dst] = xf[src];
                            }
                        }
                    }
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, n, d]), out).unwrap();
        self.unary(v, x, move |_g, gout, _x, _o| {
            let gf = gout.as_slice().unwrap();
            let mut dx = vec![T::zero(); b * c * h * w];
            for bi in 0..b {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let tok = gy * gw + gx;
                        for ci in 0..c {
                            for dy in 0..p {
                                for dx_ in 0..p {
                                    let src = (bi * n + tok) * d + (ci * p + dy) * p + dx_;
                                    let dst =
                                        ((bi * c + ci) * h + gy * p + dy) * w + gx * p + dx_;
                                    dx[dst] = gf[src];
                                }
                            }
                        }
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap()
        })
    }

    /// Inverse of [`Graph::patchify`]: tokens `[B, N, C*p*p]` to `[B, C, h, w]`.
    pub fn unpatchify(&mut self, t: Var, p: usize, c: usize, h: usize, w: usize) -> Var {
        let tv = self.value(t);
        let (b, n, d) = (tv.shape()[0], tv.shape()[1], tv.shape()[2]);
        let (gh, gw) = (h / p, w / p);
        assert_eq!(n, gh * gw);
        assert_eq!(d, c * p * p);
        let tf = tv.as_slice().unwrap();
        let mut out = vec![T::zero(); b * c * h * w];
        for bi in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    let tok = gy * gw + gx;
                    for ci in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                let src = (bi * n + tok) * d + (ci * p + dy) * p + dx;
                                let dst = ((bi * c + ci) * h + gy * p + dy) * w + gx * p + dx;
                                out[dst] = tf[src];
                            }
                        }
                    }
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).unwrap();
        self.unary(v, t, move |_g, gout, _t, _o| {
            let gf = gout.as_slice().unwrap();
            let mut dt = vec![T::zero(); b * n * d];
            for bi in 0..b {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let tok = gy * gw + gx;
                        for ci in 0..c {
                            for dy in 0..p {
                                for dx in 0..p {
                                    let dst = (bi * n + tok) * d + (ci * p + dy) * p + dx;
                                    let src =
                                        ((bi * c + ci) * h + gy * p + dy) * w + gx * p + dx;
                                    dt[dst] = gf[src];
                                }
                            }
                        }
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[b, n, d]), dt).unwrap()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::gradcheck;
    use super::*;

    #[test]
    fn conv_grads() {
        gradcheck(
            &[1, 2, 4, 6],
            (0..48).map(|i| (i as f64) * 0.07 - 1.5).collect(),
            |g, x| {
                let w = g.leaf(
                    ArrayD::from_shape_vec(
                        IxDyn(&[3, 2, 3, 3]),
                        (0..54).map(|i| ((i * 7 % 13) as f64) * 0.09 - 0.5).collect(),
                    )
                    .unwrap(),
                );
                let bias = g.leaf(
                    ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.1, -0.2, 0.05]).unwrap(),
                );
                let y = g.conv2d(x, w, bias, (1, 1));
                let s = g.mul(y, y);
                g.mean_all(s)
            },
            1e-5,
        );
    }

    #[test]
    fn strided_conv_grads() {
        gradcheck(
            &[2, 1, 4, 8],
            (0..64).map(|i| ((i * 5 % 17) as f64) * 0.11 - 0.8).collect(),
            |g, x| {
                let w = g.leaf(
                    ArrayD::from_shape_vec(
                        IxDyn(&[2, 1, 3, 3]),
                        (0..18).map(|i| ((i * 3 % 7) as f64) * 0.13 - 0.3).collect(),
                    )
                    .unwrap(),
                );
                let bias = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.0, 0.4]).unwrap());
                let y = g.conv2d(x, w, bias, (2, 2));
                let s = g.mul(y, y);
                g.sum_all(s)
            },
            1e-5,
        );
    }

    #[test]
    fn conv_is_circular_in_columns() {
        // shifting the input by one column shifts the output by one column
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 11 % 19) as f64) * 0.21 - 1.0).collect();
        let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, 4, 6]), data.clone()).unwrap());
        let mut shifted = vec![0.0; 24];
        for y in 0..4 {
            for xcol in 0..6 {
                shifted[y * 6 + (xcol + 1) % 6] = data[y * 6 + xcol];
            }
        }
        let xs = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, 4, 6]), shifted).unwrap());
        let w = g.constant(
            ArrayD::from_shape_vec(
                IxDyn(&[1, 1, 3, 3]),
                (0..9).map(|i| i as f64 * 0.3 - 1.1).collect(),
            )
            .unwrap(),
        );
        let b = g.constant(ArrayD::from_shape_vec(IxDyn(&[1]), vec![0.25]).unwrap());
        let y0 = g.conv2d(x, w, b, (1, 1));
        let y1 = g.conv2d(xs, w, b, (1, 1));
        let v0 = g.value(y0).as_slice().unwrap().to_vec();
        let v1 = g.value(y1).as_slice().unwrap().to_vec();
        for row in 0..4 {
            for col in 0..6 {
                let a = v0[row * 6 + col];
                let bb = v1[row * 6 + (col + 1) % 6];
                assert!((a - bb).abs() < 1e-12, "not equivariant at {row},{col}");
            }
        }
    }

    #[test]
    fn upsample_and_patchify_grads() {
        gradcheck(
            &[1, 2, 2, 4],
            (0..16).map(|i| (i as f64) * 0.19 - 1.2).collect(),
            |g, x| {
                let u = g.upsample_nearest(x, 2, 1);
                let t = g.patchify(u, 2);
                let back = g.unpatchify(t, 2, 2, 4, 4);
                let s = g.mul(back, back);
                g.mean_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn patchify_roundtrip_identity() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2, 4, 4]), data.clone()).unwrap());
        let t = g.patchify(x, 2);
        let y = g.unpatchify(t, 2, 2, 4, 4);
        assert_eq!(g.value(y).as_slice().unwrap(), &data[..]);
    }
}
