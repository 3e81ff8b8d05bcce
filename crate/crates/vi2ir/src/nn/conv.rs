use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};

use super::pad::{reflect_pad, reflect_pad_backward};
use super::param::{Grads, ParamId, ParamStore, Params};
use super::Tensor;

/// Spatial padding flavor for `Conv2d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadKind {
    Zero,
    Reflect,
}

/// Gather sliding windows into a (C*k*k, grid_h*grid_w) matrix.
///
/// Entry [(c*k+ki)*k+kj, gy*grid_w+gx] is src[c, gy*s+ki-p, gx*s+kj-p],
/// or zero when that position falls outside the source.
fn im2col(
    src: &ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
) -> Array2<f64> {
    let (c, h, w) = src.dim();
    let mut cols = Array2::<f64>::zeros((c * k * k, grid_h * grid_w));
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let mut row_view = cols.row_mut(row);
                for gy in 0..grid_h {
                    let sy = (gy * stride + ki) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for gx in 0..grid_w {
                        let sx = (gx * stride + kj) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        row_view[gy * grid_w + gx] = src[[ch, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the transpose of `im2col`: accumulate column entries back into
/// a (c, h, w) buffer. Out-of-bounds taps are dropped (they correspond to the
/// implicit zero padding).
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let row_view = cols.row(row);
                for gy in 0..grid_h {
                    let sy = (gy * stride + ki) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for gx in 0..grid_w {
                        let sx = (gx * stride + kj) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[[ch, sy as usize, sx as usize]] += row_view[gy * grid_w + gx];
                    }
                }
            }
        }
    }
    out
}

fn conv_grid(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    debug_assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel exceeds input");
    (
        (h + 2 * pad - k) / stride + 1,
        (w + 2 * pad - k) / stride + 1,
    )
}

/// 2-D convolution with bias. Weight layout: (out_c, in_c, k, k).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_kind: PadKind,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad_kind: PadKind,
        pad: usize,
        init: &mut dyn FnMut() -> f64,
    ) -> Self {
        let weight = store.alloc(format!("{name}.w"), &[out_c, in_c, kernel, kernel], init);
        let bias = store.alloc(format!("{name}.b"), &[out_c], || 0.0);
        Conv2d {
            weight,
            bias,
            in_c,
            out_c,
            kernel,
            stride,
            pad_kind,
            pad,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        conv_grid(h, w, self.kernel, self.stride, self.pad)
    }

    fn prepare(&self, x: &Tensor) -> (Tensor, usize) {
        match self.pad_kind {
            PadKind::Reflect => (reflect_pad(x, self.pad), 0),
            PadKind::Zero => (x.clone(), self.pad),
        }
    }

    pub fn forward(&self, ps: Params, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_dims(h, w);
        let (xp, pad) = self.prepare(x);
        let w_mat = ps
            .view4(self.weight)
            .into_shape_with_order((self.out_c, self.in_c * self.kernel * self.kernel))
            .unwrap();
        let bias = ps.view1(self.bias);
        let k = self.kernel;
        let stride = self.stride;
        let per_sample: Vec<Array3<f64>> = xp
            .axis_iter(Axis(0))
            .into_par_iter()
            .map(|xn| {
                let cols = im2col(&xn, k, stride, pad, oh, ow);
                let mut y_mat = w_mat.dot(&cols);
                for (mut row, b) in y_mat.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                    row += *b;
                }
                y_mat.into_shape_with_order((self.out_c, oh, ow)).unwrap()
            })
            .collect();
        assemble(n, per_sample)
    }

    /// Backward pass: accumulates weight/bias grads, returns grad wrt input.
    pub fn backward(&self, ps: Params, gs: &mut Grads, x: &Tensor, gy: &Tensor) -> Tensor {
        let (n, _, h, w) = x.dim();
        let (_, gc, oh, ow) = gy.dim();
        assert_eq!(gc, self.out_c, "conv grad channels");
        let (xp, pad) = self.prepare(x);
        let (_, _, hp, wp) = xp.dim();
        let w_mat = ps
            .view4(self.weight)
            .into_shape_with_order((self.out_c, self.in_c * self.kernel * self.kernel))
            .unwrap();
        let k = self.kernel;
        let stride = self.stride;
        let in_c = self.in_c;
        let results: Vec<(Array2<f64>, Array1<f64>, Array3<f64>)> = xp
            .axis_iter(Axis(0))
            .into_par_iter()
            .zip(gy.axis_iter(Axis(0)).into_par_iter())
            .map(|(xn, gyn)| {
                let cols = im2col(&xn, k, stride, pad, oh, ow);
                let gy_mat = gyn.into_shape_with_order((self.out_c, oh * ow)).unwrap();
                let gw = gy_mat.dot(&cols.t());
                let gb = gy_mat.sum_axis(Axis(1));
                let gcols = w_mat.t().dot(&gy_mat);
                let gxp = col2im(&gcols, in_c, hp, wp, k, stride, pad, oh, ow);
                (gw, gb, gxp)
            })
            .collect();

        let mut gw_total = Array2::<f64>::zeros((self.out_c, in_c * k * k));
        let mut gb_total = Array1::<f64>::zeros(self.out_c);
        let mut gxp = Tensor::zeros((n, in_c, hp, wp));
        for (i, (gw, gb, gx_n)) in results.into_iter().enumerate() {
            gw_total += &gw;
            gb_total += &gb;
            gxp.index_axis_mut(Axis(0), i).assign(&gx_n);
        }
        gs.add(self.weight, gw_total.as_slice().unwrap());
        gs.add(self.bias, gb_total.as_slice().unwrap());

        match self.pad_kind {
            PadKind::Reflect => reflect_pad_backward(&gxp, self.pad, h, w),
            PadKind::Zero => gxp,
        }
    }
}

/// Transposed 2-D convolution (fractionally strided). Weight layout:
/// (in_c, out_c, k, k). Output size: (in-1)*stride - 2*pad + k + out_pad.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        init: &mut dyn FnMut() -> f64,
    ) -> Self {
        assert!(out_pad < stride, "output padding must be < stride");
        let weight = store.alloc(format!("{name}.w"), &[in_c, out_c, kernel, kernel], init);
        let bias = store.alloc(format!("{name}.b"), &[out_c], || 0.0);
        ConvTranspose2d {
            weight,
            bias,
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            out_pad,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.kernel + self.out_pad - 2 * self.pad,
            (w - 1) * self.stride + self.kernel + self.out_pad - 2 * self.pad,
        )
    }

    pub fn forward(&self, ps: Params, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "conv_t input channels");
        let (oh, ow) = self.out_dims(h, w);
        let ock = self.out_c * self.kernel * self.kernel;
        let w_mat = ps
            .view4(self.weight)
            .into_shape_with_order((self.in_c, ock))
            .unwrap();
        let bias = ps.view1(self.bias);
        let per_sample: Vec<Array3<f64>> = x
            .axis_iter(Axis(0))
            .into_par_iter()
            .map(|xn| {
                let x_mat = xn.into_shape_with_order((self.in_c, h * w)).unwrap();
                let cols = w_mat.t().dot(&x_mat);
                let mut y = col2im(
                    &cols, self.out_c, oh, ow, self.kernel, self.stride, self.pad, h, w,
                );
                for (mut plane, b) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                    plane += *b;
                }
                y
            })
            .collect();
        assemble(n, per_sample)
    }

    pub fn backward(&self, ps: Params, gs: &mut Grads, x: &Tensor, gy: &Tensor) -> Tensor {
        let (n, _, h, w) = x.dim();
        let (_, gc, _, _) = gy.dim();
        assert_eq!(gc, self.out_c, "conv_t grad channels");
        let ock = self.out_c * self.kernel * self.kernel;
        let w_mat = ps
            .view4(self.weight)
            .into_shape_with_order((self.in_c, ock))
            .unwrap();
        let k = self.kernel;
        let stride = self.stride;
        let pad = self.pad;
        let results: Vec<(Array2<f64>, Array1<f64>, Array3<f64>)> = x
            .axis_iter(Axis(0))
            .into_par_iter()
            .zip(gy.axis_iter(Axis(0)).into_par_iter())
            .map(|(xn, gyn)| {
                // Gradient wrt input of a transposed conv is a plain conv of
                // gy with the same kernel taps.
                let cols_g = im2col(&gyn, k, stride, pad, h, w);
                let x_mat = xn.into_shape_with_order((self.in_c, h * w)).unwrap();
                let gx_mat = w_mat.dot(&cols_g);
                let gw = x_mat.dot(&cols_g.t());
                let gb = gyn
                    .into_shape_with_order((self.out_c, gyn.len() / self.out_c))
                    .unwrap()
                    .sum_axis(Axis(1));
                let gx = gx_mat.into_shape_with_order((self.in_c, h, w)).unwrap();
                (gw, gb, gx)
            })
            .collect();

        let mut gw_total = Array2::<f64>::zeros((self.in_c, ock));
        let mut gb_total = Array1::<f64>::zeros(self.out_c);
        let mut gx = Tensor::zeros((n, self.in_c, h, w));
        for (i, (gw, gb, gx_n)) in results.into_iter().enumerate() {
            gw_total += &gw;
            gb_total += &gb;
            gx.index_axis_mut(Axis(0), i).assign(&gx_n);
        }
        gs.add(self.weight, gw_total.as_slice().unwrap());
        gs.add(self.bias, gb_total.as_slice().unwrap());
        gx
    }
}

fn assemble(n: usize, per_sample: Vec<Array3<f64>>) -> Tensor {
    debug_assert_eq!(per_sample.len(), n);
    let (c, h, w) = per_sample[0].dim();
    let mut out = Tensor::zeros((n, c, h, w));
    for (i, s) in per_sample.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&s);
    }
    out
}
