//! Convolution kernels: im2col / col2im around a GEMM.
//!
//! Two-dimensional inputs are handled as three-dimensional ones with a unit
//! leading spatial axis. Batch items are processed in parallel; per-item
//! weight gradients are reduced afterwards in item order, so results do not
//! depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Geometry of a cross-correlation `[N, c_in, input] -> [N, c_out, output]`.
///
/// A transposed convolution is described by the geometry of the forward
/// convolution it is the adjoint of.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub rank: usize,
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

fn lift(rank: usize, v: &[usize], fill: usize) -> [usize; 3] {
    if rank == 2 {
        [fill, v[0], v[1]]
    } else {
        [v[0], v[1], v[2]]
    }
}

fn check_rank(op: &'static str, input: &[usize], kernel: &[usize]) -> Result<usize> {
    if !(input.len() == 4 || input.len() == 5) || kernel.len() != input.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        });
    }
    Ok(input.len() - 2)
}

impl ConvGeometry {
    /// Geometry for `conv_nd(input, kernel[c_out, c_in, k...], stride, padding)`.
    pub fn conv(
        input: &[usize],
        kernel: &[usize],
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Self> {
        let rank = check_rank("conv_nd", input, kernel)?;
        if stride.len() != rank || pad.len() != rank || stride.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "conv_nd: stride {stride:?} / padding {pad:?} invalid for spatial rank {rank}"
            )));
        }
        if kernel[1] != input[1] {
            return Err(Error::ShapeMismatch {
                op: "conv_nd",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        let in_sp = lift(rank, &input[2..], 1);
        let k = lift(rank, &kernel[2..], 1);
        let s = lift(rank, stride, 1);
        let p = lift(rank, pad, 0);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let padded = in_sp[a] + 2 * p[a];
            if k[a] > padded {
                return Err(Error::ShapeMismatch {
                    op: "conv_nd",
                    lhs: input.to_vec(),
                    rhs: kernel.to_vec(),
                });
            }
            out[a] = (padded - k[a]) / s[a] + 1;
        }
        Ok(ConvGeometry {
            rank,
            batch: input[0],
            c_in: input[1],
            c_out: kernel[0],
            input: in_sp,
            kernel: k,
            stride: s,
            pad: p,
            output: out,
        })
    }

    /// Geometry of the forward convolution whose adjoint is
    /// `conv_transpose_nd(input, kernel[c_in_t, c_out_t, k...], stride)`.
    pub fn transpose(input: &[usize], kernel: &[usize], stride: &[usize]) -> Result<Self> {
        let rank = check_rank("conv_transpose_nd", input, kernel)?;
        if stride.len() != rank || stride.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "conv_transpose_nd: stride {stride:?} invalid for spatial rank {rank}"
            )));
        }
        if kernel[0] != input[1] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose_nd",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        let in_sp = lift(rank, &input[2..], 1);
        let k = lift(rank, &kernel[2..], 1);
        let s = lift(rank, stride, 1);
        let mut full = [0usize; 3];
        for a in 0..3 {
            full[a] = (in_sp[a] - 1) * s[a] + k[a];
        }
        Ok(ConvGeometry {
            rank,
            batch: input[0],
            c_in: kernel[1],
            c_out: kernel[0],
            input: full,
            kernel: k,
            stride: s,
            pad: [0; 3],
            output: in_sp,
        })
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn k_vol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn cols(&self) -> usize {
        self.c_in * self.k_vol()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    fn spatial_shape(&self, v: [usize; 3]) -> Vec<usize> {
        if self.rank == 2 {
            vec![v[1], v[2]]
        } else {
            v.to_vec()
        }
    }

    /// Shape of the forward-convolution output `[N, c_out, output...]`.
    pub fn output_shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.c_out];
        s.extend(self.spatial_shape(self.output));
        s
    }

    /// Shape of the forward-convolution input `[N, c_in, input...]`.
    pub fn input_shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.c_in];
        s.extend(self.spatial_shape(self.input));
        s
    }
}

/// `C = op(A) * op(B) + beta * C`, all row-major; `A` is `[m, k]` (or `[k, m]`
/// when `a_t`), `B` is `[k, n]` (or `[n, k]` when `b_t`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths checked above cover every index the strides address.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one batch item `[c_in, input]` into `[c_in * k_vol, out_vol]`.
fn im2col(g: &ConvGeometry, x: &[f64], col: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let in_vol = g.in_vol();
    let out_vol = g.out_vol();
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &x[c * in_vol..(c + 1) * in_vol];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut col[row * out_vol..(row + 1) * out_vol];
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let drow = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                drow.fill(0.0);
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            let src = &xc[base..base + iw];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                *d = if ix >= 0 && ix < iw as isize {
                                    src[ix as usize]
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `[c_in * k_vol, out_vol]` into `[c_in, input]`.
fn col2im(g: &ConvGeometry, col: &[f64], x: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let in_vol = g.in_vol();
    let out_vol = g.out_vol();
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &mut x[c * in_vol..(c + 1) * in_vol];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &col[row * out_vol..(row + 1) * out_vol];
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            let srow = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let drow = &mut xc[base..base + iw];
                            for (ox, &v) in srow.iter().enumerate() {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < iw as isize {
                                    drow[ix as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], vol: usize) {
    for (c, chunk) in out.chunks_mut(vol).enumerate() {
        let b = bias[c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(dout: &[f64], vol: usize, acc: &mut [f64]) {
    for (c, chunk) in dout.chunks(vol).enumerate() {
        acc[c] += chunk.iter().sum::<f64>();
    }
}

fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in parts {
        acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    acc
}

pub(crate) fn conv_forward(g: &ConvGeometry, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let in_item = g.c_in * g.in_vol();
    let out_vol = g.out_vol();
    let out_item = g.c_out * out_vol;
    let cols = g.cols();
    let mut out = vec![0.0; g.batch * out_item];
    out.par_chunks_mut(out_item)
        .zip(x.par_chunks(in_item))
        .for_each(|(o, xi)| {
            if g.is_pointwise() {
                gemm(g.c_out, cols, out_vol, w, false, xi, false, o, 0.0);
            } else {
                let mut col = vec![0.0; cols * out_vol];
                im2col(g, xi, &mut col);
                gemm(g.c_out, cols, out_vol, w, false, &col, false, o, 0.0);
            }
            if let Some(b) = bias {
                add_bias(o, b, out_vol);
            }
        });
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let in_item = g.c_in * g.in_vol();
    let out_vol = g.out_vol();
    let out_item = g.c_out * out_vol;
    let cols = g.cols();
    let w_len = g.c_out * cols;
    let [need_x, need_w, need_b] = need;

    let parts: Vec<(Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>)> = (0..g.batch)
        .into_par_iter()
        .map(|n| {
            let xi = &x[n * in_item..(n + 1) * in_item];
            let di = &dout[n * out_item..(n + 1) * out_item];
            let dw = need_w.then(|| {
                let mut dw = vec![0.0; w_len];
                if g.is_pointwise() {
                    gemm(g.c_out, out_vol, cols, di, false, xi, true, &mut dw, 0.0);
                } else {
                    let mut col = vec![0.0; cols * out_vol];
                    im2col(g, xi, &mut col);
                    gemm(g.c_out, out_vol, cols, di, false, &col, true, &mut dw, 0.0);
                }
                dw
            });
            let dx = need_x.then(|| {
                let mut dx = vec![0.0; in_item];
                if g.is_pointwise() {
                    gemm(cols, g.c_out, out_vol, w, true, di, false, &mut dx, 0.0);
                } else {
                    let mut dcol = vec![0.0; cols * out_vol];
                    gemm(cols, g.c_out, out_vol, w, true, di, false, &mut dcol, 0.0);
                    col2im(g, &dcol, &mut dx);
                }
                dx
            });
            let db = need_b.then(|| {
                let mut db = vec![0.0; g.c_out];
                channel_sums(di, out_vol, &mut db);
                db
            });
            (dx, dw, db)
        })
        .collect();

    let mut dx_all = need_x.then(|| Vec::with_capacity(g.batch * in_item));
    let mut dws = Vec::new();
    let mut dbs = Vec::new();
    for (dx, dw, db) in parts {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend(dx);
        }
        dws.extend(dw);
        dbs.extend(db);
    }
    ConvGrads {
        input: dx_all,
        kernel: need_w.then(|| sum_in_order(dws, w_len)),
        bias: need_b.then(|| sum_in_order(dbs, g.c_out)),
    }
}

/// Transposed convolution: input is `[N, g.c_out, g.output]`, result is `[N, g.c_in, g.input]`.
pub(crate) fn conv_transpose_forward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let x_item = g.c_out * g.out_vol();
    let in_vol = g.in_vol();
    let out_item = g.c_in * in_vol;
    let cols = g.cols();
    let out_vol = g.out_vol();
    let mut out = vec![0.0; g.batch * out_item];
    out.par_chunks_mut(out_item)
        .zip(x.par_chunks(x_item))
        .for_each(|(o, xi)| {
            let mut col = vec![0.0; cols * out_vol];
            gemm(cols, g.c_out, out_vol, w, true, xi, false, &mut col, 0.0);
            col2im(g, &col, o);
            if let Some(b) = bias {
                add_bias(o, b, in_vol);
            }
        });
    out
}

pub(crate) fn conv_transpose_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let x_item = g.c_out * g.out_vol();
    let in_vol = g.in_vol();
    let d_item = g.c_in * in_vol;
    let cols = g.cols();
    let out_vol = g.out_vol();
    let w_len = g.c_out * cols;
    let [need_x, need_w, need_b] = need;

    let parts: Vec<(Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>)> = (0..g.batch)
        .into_par_iter()
        .map(|n| {
            let xi = &x[n * x_item..(n + 1) * x_item];
            let di = &dout[n * d_item..(n + 1) * d_item];
            let mut col = vec![0.0; cols * out_vol];
            if need_x || need_w {
                im2col(g, di, &mut col);
            }
            let dx = need_x.then(|| {
                let mut dx = vec![0.0; x_item];
                gemm(g.c_out, cols, out_vol, w, false, &col, false, &mut dx, 0.0);
                dx
            });
            let dw = need_w.then(|| {
                let mut dw = vec![0.0; w_len];
                gemm(g.c_out, out_vol, cols, xi, false, &col, true, &mut dw, 0.0);
                dw
            });
            let db = need_b.then(|| {
                let mut db = vec![0.0; g.c_in];
                channel_sums(di, in_vol, &mut db);
                db
            });
            (dx, dw, db)
        })
        .collect();

    let mut dx_all = need_x.then(|| Vec::with_capacity(g.batch * x_item));
    let mut dws = Vec::new();
    let mut dbs = Vec::new();
    for (dx, dw, db) in parts {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend(dx);
        }
        dws.extend(dw);
        dbs.extend(db);
    }
    ConvGrads {
        input: dx_all,
        kernel: need_w.then(|| sum_in_order(dws, w_len)),
        bias: need_b.then(|| sum_in_order(dbs, g.c_in)),
    }
}

/// Linear ×2 upsampling along one axis of a row-major array, align-corners-false.
///
/// `outer` blocks of `len * inner` elements become `outer` blocks of `2 * len * inner`.
pub(crate) fn upsample_axis(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let taps = upsample_taps(len);
    let mut out = vec![0.0; outer * 2 * len * inner];
    for o in 0..outer {
        let src = &x[o * len * inner..(o + 1) * len * inner];
        let dst = &mut out[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        for (j, &(i0, i1, frac)) in taps.iter().enumerate() {
            let d = &mut dst[j * inner..(j + 1) * inner];
            let a = &src[i0 * inner..(i0 + 1) * inner];
            let b = &src[i1 * inner..(i1 + 1) * inner];
            for ((d, &a), &b) in d.iter_mut().zip(a).zip(b) {
                *d = (1.0 - frac) * a + frac * b;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_axis`].
pub(crate) fn upsample_axis_adjoint(g: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let taps = upsample_taps(len);
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let src = &g[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        let dst = &mut out[o * len * inner..(o + 1) * len * inner];
        for (j, &(i0, i1, frac)) in taps.iter().enumerate() {
            let s = &src[j * inner..(j + 1) * inner];
            for (k, &v) in s.iter().enumerate() {
                dst[i0 * inner + k] += (1.0 - frac) * v;
                dst[i1 * inner + k] += frac * v;
            }
        }
    }
    out
}

/// Source taps for each output position: `src = (o + 0.5) / 2 - 0.5`, clamped to the grid.
pub(crate) fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}
