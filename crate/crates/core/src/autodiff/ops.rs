//! Tensor operations recorded on the tape.
//!
//! Shape violations are programmer errors and panic; contract-level failures
//! (degenerate projection) surface as `Result`.

use std::rc::Rc;

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Convolution geometry: square-kernel 2D convolution with symmetric zero
/// padding.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

/// A fixed sparse linear map between two spatial grids, applied per batch
/// element and channel. Each output pixel is a weighted sum of up to four
/// source pixels (enough for bilinear warps); missing taps carry weight 0.
#[derive(Debug, Clone)]
pub struct SparseTaps<F> {
    /// `(h * w)` entries of `[(source_index, weight); 4]`.
    pub taps: Vec<[(u32, F); 4]>,
}

impl<F: Scalar> SparseTaps<F> {
    /// Apply to one channel plane (`src` and `dst` are `h * w` slices).
    pub fn apply_plane(&self, src: &[F], dst: &mut [F]) {
        for (out, taps) in dst.iter_mut().zip(self.taps.iter()) {
            let mut acc = F::zero();
            for &(idx, wgt) in taps {
                acc += src[idx as usize] * wgt;
            }
            *out = acc;
        }
    }

    /// Transpose-apply (scatter-add) for the backward pass.
    fn scatter_plane(&self, grad_out: &[F], grad_src: &mut [F]) {
        for (g, taps) in grad_out.iter().zip(self.taps.iter()) {
            for &(idx, wgt) in taps {
                grad_src[idx as usize] += *g * wgt;
            }
        }
    }
}

pub(crate) fn conv_output_side(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel larger than padded input");
    (input + 2 * pad - kernel) / stride + 1
}

/// Gather conv patches: `(ci, h, w)` -> `(ci*kh*kw, oh*ow)` with zero padding.
fn im2col<F: Scalar>(
    x: &[F],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let mut cols = Array2::<F>::zeros((ci * kh * kw, oh * ow));
    let cols_slice = cols.as_slice_mut().expect("contiguous cols");
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let out_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = (c * h + iy as usize) * w;
                    let out_row = out_base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols_slice[out_row + ox] = x[in_row + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the transpose of [`im2col`]: accumulate `(ci*kh*kw, oh*ow)`
/// gradients back into an `(ci, h, w)` buffer.
fn col2im_acc<F: Scalar>(
    dcols: &Array2<F>,
    dx: &mut [F],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let dcols_slice = dcols.as_slice().expect("contiguous dcols");
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let in_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dx_row = (c * h + iy as usize) * w;
                    let in_row = in_base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[dx_row + ix as usize] += dcols_slice[in_row + ox];
                    }
                }
            }
        }
    }
}

fn as4<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView4<'_, F> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

impl<F: Scalar> Tape<F> {
    fn unary(
        &self,
        x: Var,
        value: ArrayD<F>,
        back: impl Fn(&ArrayD<F>) -> ArrayD<F> + 'static,
    ) -> Var {
        let needs = self.needs_grad(x);
        let xi = x.index();
        let back_fn: Option<super::BackFn<F>> = if needs {
            Some(Box::new(move |g, sink| sink(xi, back(g))))
        } else {
            None
        };
        self.push_node(value, needs, back_fn)
    }

    fn push_node(
        &self,
        value: ArrayD<F>,
        needs_grad: bool,
        back: Option<super::BackFn<F>>,
    ) -> Var {
        self.push(value, needs_grad, back)
    }

    /// Element-wise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let out = &*av + &*bv;
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let (ai, bi) = (a.index(), b.index());
        let back: Option<super::BackFn<F>> = if na || nb {
            Some(Box::new(move |g, sink| {
                if na {
                    sink(ai, g.clone());
                }
                if nb {
                    sink(bi, g.clone());
                }
            }))
        } else {
            None
        };
        self.push_node(out, na || nb, back)
    }

    /// Element-wise difference.
    pub fn sub(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        let out = &*av - &*bv;
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let (ai, bi) = (a.index(), b.index());
        let back: Option<super::BackFn<F>> = if na || nb {
            Some(Box::new(move |g, sink| {
                if na {
                    sink(ai, g.clone());
                }
                if nb {
                    sink(bi, g.mapv(|v| -v));
                }
            }))
        } else {
            None
        };
        self.push_node(out, na || nb, back)
    }

    /// Element-wise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let out = &*av * &*bv;
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let (ai, bi) = (a.index(), b.index());
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        let back: Option<super::BackFn<F>> = if na || nb {
            Some(Box::new(move |g, sink| {
                if na {
                    sink(ai, g * &*bc);
                }
                if nb {
                    sink(bi, g * &*ac);
                }
            }))
        } else {
            None
        };
        self.push_node(out, na || nb, back)
    }

    /// Multiply by a constant scalar.
    pub fn scale(&self, x: Var, c: F) -> Var {
        let xv = self.value(x);
        self.unary(x, xv.mapv(|v| v * c), move |g| g.mapv(|v| v * c))
    }

    /// `mul * x + add` on a rank-0 node.
    pub fn affine_scalar(&self, x: Var, mul: F, add: F) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 0, "affine_scalar: scalar input expected");
        self.unary(x, xv.mapv(|v| mul * v + add), move |g| g.mapv(|v| v * mul))
    }

    pub fn relu(&self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.mapv(|v| if v > F::zero() { v } else { F::zero() });
        let xc = Rc::clone(&xv);
        self.unary(x, out, move |g| {
            ndarray::Zip::from(g)
                .and(&*xc)
                .map_collect(|&gv, &v| if v > F::zero() { gv } else { F::zero() })
        })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let xv = self.value(x);
        let one = F::one();
        let out = xv.mapv(|v| one / (one + (-v).exp()));
        let out_c = out.clone();
        self.unary(x, out, move |g| {
            ndarray::Zip::from(g).and(&out_c).map_collect(|&gv, &s| gv * s * (F::one() - s))
        })
    }

    /// Clamp to `[0, 1]`. The gradient passes only where the input is
    /// strictly inside the interval.
    pub fn clamp01(&self, x: Var) -> Var {
        let xv = self.value(x);
        let zero = F::zero();
        let one = F::one();
        let out = xv.mapv(|v| v.max(zero).min(one));
        let xc = Rc::clone(&xv);
        self.unary(x, out, move |g| {
            ndarray::Zip::from(g).and(&*xc).map_collect(|&gv, &v| {
                if v > F::zero() && v < F::one() {
                    gv
                } else {
                    F::zero()
                }
            })
        })
    }

    /// 2D convolution: `x (b, ci, h, w)` with `w (co, ci, kh, kw)`, optional
    /// bias `(co)`, zero padding.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight);
        let x4 = as4(&xv);
        let w4 = as4(&wv);
        let (b, ci, h, w) = x4.dim();
        let (co, wci, kh, kw) = w4.dim();
        assert_eq!(ci, wci, "conv2d: channel mismatch");
        let oh = conv_output_side(h, kh, spec.stride, spec.pad);
        let ow = conv_output_side(w, kw, spec.stride, spec.pad);
        let k = ci * kh * kw;

        let w2 = w4
            .to_shape((co, k))
            .expect("weight reshape")
            .to_owned();

        let bias_v = bias.map(|bv| {
            let arr = self.value(bv);
            let b1 = arr.view().into_dimensionality::<Ix1>().expect("bias rank 1").to_owned();
            assert_eq!(b1.len(), co, "conv2d: bias length mismatch");
            b1
        });

        let mut out = Array4::<F>::zeros((b, co, oh, ow));
        for bi in 0..b {
            let item = x4.index_axis(Axis(0), bi);
            let item_std = item.as_standard_layout();
            let xs = item_std.as_slice().expect("standard layout");
            let cols = im2col(xs, ci, h, w, kh, kw, spec.stride, spec.pad, oh, ow);
            let mut prod = w2.dot(&cols); // (co, oh*ow)
            if let Some(bias_arr) = &bias_v {
                for (mut row, &bval) in prod.rows_mut().into_iter().zip(bias_arr.iter()) {
                    row.mapv_inplace(|v| v + bval);
                }
            }
            let mut dst = out.index_axis_mut(Axis(0), bi);
            dst.as_slice_mut()
                .expect("contiguous output")
                .copy_from_slice(prod.as_slice().expect("contiguous product"));
        }

        let need_x = self.needs_grad(x);
        let need_w = self.needs_grad(weight);
        let need_b = bias.map(|bv| self.needs_grad(bv)).unwrap_or(false);
        let needs = need_x || need_w || need_b;
        let (xi, wi) = (x.index(), weight.index());
        let b_idx = bias.map(|bv| bv.index());
        let x_saved = Rc::clone(&xv);

        let back: Option<super::BackFn<F>> = if needs {
            Some(Box::new(move |g, sink| {
                let g4 = as4(g);
                let mut dw2 = if need_w { Some(Array2::<F>::zeros((co, k))) } else { None };
                let mut dx = if need_x { Some(Array4::<F>::zeros((b, ci, h, w))) } else { None };
                let mut db = if need_b { Some(Array1::<F>::zeros(co)) } else { None };
                let x4s = as4(&x_saved);
                for bi in 0..b {
                    let g_item = g4.index_axis(Axis(0), bi);
                    let g2 = g_item
                        .to_shape((co, oh * ow))
                        .expect("grad reshape")
                        .to_owned();
                    if let Some(dw) = &mut dw2 {
                        let item = x4s.index_axis(Axis(0), bi);
                        let item_std = item.as_standard_layout();
                        let xs = item_std.as_slice().expect("standard layout");
                        let cols = im2col(xs, ci, h, w, kh, kw, spec.stride, spec.pad, oh, ow);
                        *dw += &g2.dot(&cols.t());
                    }
                    if let Some(dx4) = &mut dx {
                        let dcols = w2.t().dot(&g2); // (k, oh*ow)
                        let mut item = dx4.index_axis_mut(Axis(0), bi);
                        let dxs = item.as_slice_mut().expect("contiguous dx");
                        col2im_acc(&dcols, dxs, ci, h, w, kh, kw, spec.stride, spec.pad, oh, ow);
                    }
                    if let Some(dbias) = &mut db {
                        *dbias += &g2.sum_axis(Axis(1));
                    }
                }
                if let (true, Some(dx4)) = (need_x, dx) {
                    sink(xi, dx4.into_dyn());
                }
                if let (true, Some(dw)) = (need_w, dw2) {
                    sink(
                        wi,
                        dw.into_shape_with_order(IxDyn(&[co, ci, kh, kw])).expect("dw reshape"),
                    );
                }
                if let (Some(bidx), Some(dbias)) = (b_idx, db) {
                    sink(bidx, dbias.into_dyn());
                }
            }))
        } else {
            None
        };
        self.push_node(out.into_dyn(), needs, back)
    }

    /// Fully connected layer: `x (b, din)` times `w (dout, din)` transposed,
    /// plus optional bias `(dout)`.
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight);
        let x2 = as2(&xv);
        let w2 = as2(&wv);
        let (b, din) = x2.dim();
        let (dout, wdin) = w2.dim();
        assert_eq!(din, wdin, "linear: input dim mismatch");
        let mut out = x2.dot(&w2.t()); // (b, dout)
        if let Some(bv) = bias {
            let barr = self.value(bv);
            let b1 = barr.view().into_dimensionality::<Ix1>().expect("bias rank 1");
            assert_eq!(b1.len(), dout, "linear: bias length mismatch");
            out += &b1;
        }

        let need_x = self.needs_grad(x);
        let need_w = self.needs_grad(weight);
        let need_b = bias.map(|bv| self.needs_grad(bv)).unwrap_or(false);
        let needs = need_x || need_w || need_b;
        let (xi, wi) = (x.index(), weight.index());
        let b_idx = bias.map(|bv| bv.index());
        let (x_saved, w_saved) = (Rc::clone(&xv), Rc::clone(&wv));

        let back: Option<super::BackFn<F>> = if needs {
            Some(Box::new(move |g, sink| {
                let g2 = as2(g);
                if need_x {
                    let w2 = as2(&w_saved);
                    sink(xi, g2.dot(&w2).into_dyn());
                }
                if need_w {
                    let x2 = as2(&x_saved);
                    sink(wi, g2.t().dot(&x2).into_dyn());
                }
                if let Some(bidx) = b_idx {
                    sink(bidx, g2.sum_axis(Axis(0)).into_dyn());
                }
                let _ = b;
            }))
        } else {
            None
        };
        self.push_node(out.into_dyn(), needs, back)
    }

    /// Spatial mean: `(b, c, h, w)` -> `(b, c)`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let xv = self.value(x);
        let x4 = as4(&xv);
        let (b, c, h, w) = x4.dim();
        let denom = F::from_f64c((h * w) as f64);
        let mut out = Array2::<F>::zeros((b, c));
        for bi in 0..b {
            for cc in 0..c {
                let mut acc = F::zero();
                for v in x4.index_axis(Axis(0), bi).index_axis(Axis(0), cc).iter() {
                    acc += *v;
                }
                out[(bi, cc)] = acc / denom;
            }
        }
        self.unary(x, out.into_dyn(), move |g| {
            let g2 = as2(g);
            let mut dx = Array4::<F>::zeros((b, c, h, w));
            for bi in 0..b {
                for cc in 0..c {
                    let gv = g2[(bi, cc)] / denom;
                    dx.index_axis_mut(Axis(0), bi).index_axis_mut(Axis(0), cc).fill(gv);
                }
            }
            dx.into_dyn()
        })
    }

    /// Concatenate two batches along the channel axis.
    pub fn concat_channels(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let a4 = as4(&av);
        let b4 = as4(&bv);
        let (ba, c1, h, w) = a4.dim();
        let (bb, c2, h2, w2) = b4.dim();
        assert_eq!((ba, h, w), (bb, h2, w2), "concat_channels: batch/spatial mismatch");
        let out = ndarray::concatenate(Axis(1), &[a4.view(), b4.view()])
            .expect("concat")
            .as_standard_layout()
            .to_owned();
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let (ai, bi) = (a.index(), b.index());
        let back: Option<super::BackFn<F>> = if na || nb {
            Some(Box::new(move |g, sink| {
                let g4 = as4(g);
                if na {
                    sink(ai, g4.slice(ndarray::s![.., ..c1, .., ..]).to_owned().into_dyn());
                }
                if nb {
                    sink(bi, g4.slice(ndarray::s![.., c1.., .., ..]).to_owned().into_dyn());
                }
                let _ = c2;
            }))
        } else {
            None
        };
        self.push_node(out.into_dyn(), na || nb, back)
    }

    /// Tile per-item vectors over space: `(b, n)` -> `(b, n, h, w)`.
    pub fn broadcast_spatial(&self, m: Var, h: usize, w: usize) -> Var {
        let mv = self.value(m);
        let m2 = as2(&mv);
        let (b, n) = m2.dim();
        let mut out = Array4::<F>::zeros((b, n, h, w));
        for bi in 0..b {
            for ni in 0..n {
                out.index_axis_mut(Axis(0), bi).index_axis_mut(Axis(0), ni).fill(m2[(bi, ni)]);
            }
        }
        self.unary(m, out.into_dyn(), move |g| {
            let g4 = as4(g);
            let mut dm = Array2::<F>::zeros((b, n));
            for bi in 0..b {
                for ni in 0..n {
                    let mut acc = F::zero();
                    for v in g4.index_axis(Axis(0), bi).index_axis(Axis(0), ni).iter() {
                        acc += *v;
                    }
                    dm[(bi, ni)] = acc;
                }
            }
            dm.into_dyn()
        })
    }

    /// L2-normalize each row of `(b, d)`. Rows with norm below `min_norm`
    /// make the projection degenerate.
    pub fn row_normalize(&self, x: Var, min_norm: F) -> Result<Var> {
        let xv = self.value(x);
        let x2 = as2(&xv);
        let (b, d) = x2.dim();
        let mut norms = Array1::<F>::zeros(b);
        for (bi, row) in x2.rows().into_iter().enumerate() {
            let sq: F = row.iter().map(|&v| v * v).sum();
            let n = sq.sqrt();
            if n < min_norm {
                return Err(Error::DegenerateProjection {
                    norm: n.to_f64c(),
                    min: min_norm.to_f64c(),
                });
            }
            norms[bi] = n;
        }
        let mut out = Array2::<F>::zeros((b, d));
        for bi in 0..b {
            let n = norms[bi];
            for di in 0..d {
                out[(bi, di)] = x2[(bi, di)] / n;
            }
        }
        let out_c = out.clone();
        Ok(self.unary(x, out.into_dyn(), move |g| {
            let g2 = as2(g);
            let mut dx = Array2::<F>::zeros((b, d));
            for bi in 0..b {
                let n = norms[bi];
                let y = out_c.index_axis(Axis(0), bi);
                let gr = g2.index_axis(Axis(0), bi);
                let gy: F = gr.iter().zip(y.iter()).map(|(&a, &b)| a * b).sum();
                for di in 0..d {
                    dx[(bi, di)] = (gr[di] - y[di] * gy) / n;
                }
            }
            dx.into_dyn()
        }))
    }

    /// Mean over the batch of per-row inner products of `(b, d)` tensors.
    pub fn mean_row_dot(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let a2 = as2(&av);
        let b2 = as2(&bv);
        assert_eq!(a2.dim(), b2.dim(), "mean_row_dot: shape mismatch");
        let (rows, _) = a2.dim();
        let denom = F::from_f64c(rows as f64);
        let mut acc = F::zero();
        for (ra, rb) in a2.rows().into_iter().zip(b2.rows()) {
            let dot: F = ra.iter().zip(rb.iter()).map(|(&x, &y)| x * y).sum();
            acc += dot;
        }
        let out = ArrayD::from_elem(IxDyn(&[]), acc / denom);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let (ai, bi) = (a.index(), b.index());
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        let back: Option<super::BackFn<F>> = if na || nb {
            Some(Box::new(move |g, sink| {
                let gs = *g.first().expect("scalar grad") / denom;
                if na {
                    sink(ai, bc.mapv(|v| v * gs));
                }
                if nb {
                    sink(bi, ac.mapv(|v| v * gs));
                }
            }))
        } else {
            None
        };
        self.push_node(out, na || nb, back)
    }

    /// Mean squared error over all elements of two same-shape tensors.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mse: shape mismatch");
        let n = F::from_f64c(av.len() as f64);
        let mut acc = F::zero();
        for (&x, &y) in av.iter().zip(bv.iter()) {
            let d = x - y;
            acc += d * d;
        }
        let out = ArrayD::from_elem(IxDyn(&[]), acc / n);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let (ai, bi) = (a.index(), b.index());
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        let back: Option<super::BackFn<F>> = if na || nb {
            Some(Box::new(move |g, sink| {
                let two = F::from_f64c(2.0);
                let gs = *g.first().expect("scalar grad") * two / n;
                if na {
                    let diff = ndarray::Zip::from(&*ac).and(&*bc).map_collect(|&x, &y| (x - y) * gs);
                    sink(ai, diff);
                }
                if nb {
                    let diff = ndarray::Zip::from(&*ac).and(&*bc).map_collect(|&x, &y| (y - x) * gs);
                    sink(bi, diff);
                }
            }))
        } else {
            None
        };
        self.push_node(out, na || nb, back)
    }

    /// Weighted sum of rank-0 nodes: `sum_i coeff_i * term_i`.
    pub fn weighted_sum(&self, terms: &[(Var, F)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum: no terms");
        let mut acc = F::zero();
        for (v, c) in terms {
            acc += self.scalar_value(*v) * *c;
        }
        let out = ArrayD::from_elem(IxDyn(&[]), acc);
        let captured: Vec<(usize, F, bool)> =
            terms.iter().map(|(v, c)| (v.index(), *c, self.needs_grad(*v))).collect();
        let needs = captured.iter().any(|(_, _, n)| *n);
        let back: Option<super::BackFn<F>> = if needs {
            Some(Box::new(move |g, sink| {
                let gs = *g.first().expect("scalar grad");
                for (idx, c, n) in &captured {
                    if *n {
                        sink(*idx, ArrayD::from_elem(IxDyn(&[]), gs * *c));
                    }
                }
            }))
        } else {
            None
        };
        self.push_node(out, needs, back)
    }

    /// Forward-value override: the output VALUE is `value`, but the gradient
    /// flows to `grad_path` unchanged, as if the node were the identity.
    /// This is the additive-bypass trick: the forward pass sees the
    /// distorted image while the backward pass sees the clean one.
    pub fn bypass(&self, grad_path: Var, value: ArrayD<F>) -> Var {
        let gv = self.value(grad_path);
        assert_eq!(gv.shape(), value.shape(), "bypass: shape mismatch");
        let needs = self.needs_grad(grad_path);
        let gi = grad_path.index();
        let back: Option<super::BackFn<F>> = if needs {
            Some(Box::new(move |g, sink| sink(gi, g.clone())))
        } else {
            None
        };
        self.push_node(value, needs, back)
    }

    /// Apply per-image sparse spatial maps (one [`SparseTaps`] per batch
    /// element) across all channels. The taps are constants; the map is
    /// linear in `x`, so the backward pass is the transposed scatter.
    pub fn warp(&self, x: Var, plans: Rc<Vec<SparseTaps<F>>>) -> Var {
        let xv = self.value(x);
        let x4 = as4(&xv);
        let (b, c, h, w) = x4.dim();
        assert_eq!(plans.len(), b, "warp: one plan per batch element");
        let mut out = Array4::<F>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let src_view = x4.index_axis(Axis(0), bi);
                let src_plane = src_view.index_axis(Axis(0), ci);
                let src = src_plane.as_slice().expect("contiguous plane");
                let mut dst_item = out.index_axis_mut(Axis(0), bi);
                let mut dst_plane = dst_item.index_axis_mut(Axis(0), ci);
                plans[bi].apply_plane(src, dst_plane.as_slice_mut().expect("contiguous plane"));
            }
        }
        let plans_b = Rc::clone(&plans);
        self.unary(x, out.into_dyn(), move |g| {
            let g4 = as4(g);
            let mut dx = Array4::<F>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    let g_view = g4.index_axis(Axis(0), bi);
                    let g_plane = g_view.index_axis(Axis(0), ci);
                    let gs = g_plane.as_slice().expect("contiguous plane");
                    let mut dx_item = dx.index_axis_mut(Axis(0), bi);
                    let mut dx_plane = dx_item.index_axis_mut(Axis(0), ci);
                    plans_b[bi]
                        .scatter_plane(gs, dx_plane.as_slice_mut().expect("contiguous plane"));
                }
            }
            dx.into_dyn()
        })
    }

    /// Cross-entropy between fixed target row distributions and the row-wise
    /// softmax of `logits`, averaged over rows.
    pub fn softmax_cross_entropy_rows(&self, logits: Var, targets: &Array2<F>) -> Var {
        let lv = self.value(logits);
        let l2 = as2(&lv);
        let (b, k) = l2.dim();
        assert_eq!((b, k), targets.dim(), "softmax_ce: shape mismatch");
        let mut probs = Array2::<F>::zeros((b, k));
        let mut loss = F::zero();
        for bi in 0..b {
            let row = l2.index_axis(Axis(0), bi);
            let maxv = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for &v in row.iter() {
                denom += (v - maxv).exp();
            }
            let log_denom = denom.ln();
            for ki in 0..k {
                let logp = row[ki] - maxv - log_denom;
                probs[(bi, ki)] = logp.exp();
                loss -= targets[(bi, ki)] * logp;
            }
        }
        let denom_b = F::from_f64c(b as f64);
        let out = ArrayD::from_elem(IxDyn(&[]), loss / denom_b);
        let li = logits.index();
        let needs = self.needs_grad(logits);
        let targets_c = targets.clone();
        let back: Option<super::BackFn<F>> = if needs {
            Some(Box::new(move |g, sink| {
                let gs = *g.first().expect("scalar grad") / denom_b;
                let dl = ndarray::Zip::from(&probs)
                    .and(&targets_c)
                    .map_collect(|&p, &t| (p - t) * gs);
                sink(li, dl.into_dyn());
            }))
        } else {
            None
        };
        self.push_node(out, needs, back)
    }
}
