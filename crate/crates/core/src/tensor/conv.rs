//! Direct convolution kernels and their adjoints.
//!
//! Output sizes follow the floor convention `(H + 2p - k) / s + 1`; a kernel
//! larger than the padded input is an error.

use super::Tensor;
use crate::error::{shape_err, Result};
use crate::par::for_each_chunk;
use crate::real::Real;

/// Output length along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return shape_err("conv", "stride must be >= 1");
    }
    let padded = input + 2 * padding;
    if kernel > padded || kernel == 0 {
        return shape_err(
            "conv",
            format!("kernel {kernel} does not fit padded input {padded}"),
        );
    }
    Ok((padded - kernel) / stride + 1)
}

/// Range of output positions `o` with `o * stride + k - padding` inside `[0, input)`.
#[inline]
fn valid_range(
    k: usize,
    padding: usize,
    stride: usize,
    out_len: usize,
    input: usize,
) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    let top = input + padding;
    if top <= k {
        return (0, 0);
    }
    let hi = ((top - k - 1) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Output rows per parallel chunk of a weight gradient.
const CONV_ROW_BLOCK: usize = 8;

/// Geometry of a convolution lowered to a matrix product.
struct Im2col {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl Im2col {
    /// `[ci * kh * kw, ho * wo]` patch matrix of one sample, zeros where the
    /// window overlaps the padding.
    fn columns<R: Real>(&self, x: &[R]) -> Vec<R> {
        let p = self.ho * self.wo;
        let mut cols = vec![R::zero(); self.ci * self.kh * self.kw * p];
        for c in 0..self.ci {
            let x_c = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (oy0, oy1) = valid_range(ky, self.padding, self.stride, self.ho, self.h);
                for kx in 0..self.kw {
                    let (ox0, ox1) = valid_range(kx, self.padding, self.stride, self.wo, self.w);
                    let row = &mut cols[((c * self.kh + ky) * self.kw + kx) * p..][..p];
                    for oy in oy0..oy1 {
                        let src = &x_c[(oy * self.stride + ky - self.padding) * self.w..][..self.w];
                        for ox in ox0..ox1 {
                            row[oy * self.wo + ox] = src[ox * self.stride + kx - self.padding];
                        }
                    }
                }
            }
        }
        cols
    }
}

/// Standard cross-correlation, `weight` is `[Cout, Cin, kh, kw]`.
pub fn conv2d<R: Real>(
    input: &Tensor<R>,
    weight: &Tensor<R>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<R>> {
    let (n, ci, h, w) = input.dims4()?;
    let (co, wci, kh, kw) = weight.dims4()?;
    if wci != ci {
        return shape_err(
            "conv2d",
            format!("input has {ci} channels, weight expects {wci}"),
        );
    }
    let ho = conv_out_len(h, kh, stride, padding)?;
    let wo = conv_out_len(w, kw, stride, padding)?;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let x = input.data();
    let wt = weight.data();
    let geom = Im2col {
        ci,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        ho,
        wo,
    };
    let rows = ci * kh * kw;
    let p = ho * wo;
    for_each_chunk(out.data_mut(), co * p, |s, out_s| {
        let cols = geom.columns(&x[s * ci * h * w..(s + 1) * ci * h * w]);
        R::gemm(
            co,
            rows,
            p,
            wt,
            (rows, 1),
            &cols,
            (p, 1),
            R::zero(),
            out_s,
            (p, 1),
        );
    });
    Ok(out)
}

/// Gradient of [`conv2d`] with respect to its weight.
pub fn conv2d_backward_weight<R: Real>(
    input: &Tensor<R>,
    dout: &Tensor<R>,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<Tensor<R>> {
    let (n, ci, h, w) = input.dims4()?;
    let (dn, co, ho, wo) = dout.dims4()?;
    let (kh, kw) = kernel;
    if dn != n
        || conv_out_len(h, kh, stride, padding)? != ho
        || conv_out_len(w, kw, stride, padding)? != wo
    {
        return shape_err(
            "conv2d_backward_weight",
            format!("{:?} vs {:?}", input.shape(), dout.shape()),
        );
    }
    let mut dw = Tensor::zeros(&[co, ci, kh, kw]);
    let x = input.data();
    let g = dout.data();
    let geom = Im2col {
        ci,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        ho,
        wo,
    };
    let rows = ci * kh * kw;
    let p = ho * wo;
    let cols: Vec<Vec<R>> = (0..n)
        .map(|s| geom.columns(&x[s * ci * h * w..(s + 1) * ci * h * w]))
        .collect();
    for_each_chunk(dw.data_mut(), CONV_ROW_BLOCK * rows, |blk, block| {
        let o0 = blk * CONV_ROW_BLOCK;
        let m = block.len() / rows;
        for (s, c) in cols.iter().enumerate() {
            let g_s = &g[(s * co + o0) * p..(s * co + o0 + m) * p];
            R::gemm(
                m,
                p,
                rows,
                g_s,
                (p, 1),
                c,
                (1, p),
                R::one(),
                block,
                (rows, 1),
            );
        }
    });
    Ok(dw)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_backward_input<R: Real>(
    dout: &Tensor<R>,
    weight: &Tensor<R>,
    input_hw: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<Tensor<R>> {
    let (n, co, ho, wo) = dout.dims4()?;
    let (wco, ci, kh, kw) = weight.dims4()?;
    let (h, w) = input_hw;
    if wco != co
        || conv_out_len(h, kh, stride, padding)? != ho
        || conv_out_len(w, kw, stride, padding)? != wo
    {
        return shape_err(
            "conv2d_backward_input",
            format!("{:?} vs {:?}", dout.shape(), weight.shape()),
        );
    }
    let mut dx = Tensor::zeros(&[n, ci, h, w]);
    let g = dout.data();
    let wt = weight.data();
    for_each_chunk(dx.data_mut(), ci * h * w, |s, dx_s| {
        for o in 0..co {
            let g_o = &g[(s * co + o) * ho * wo..(s * co + o + 1) * ho * wo];
            for c in 0..ci {
                let dx_c = &mut dx_s[c * h * w..(c + 1) * h * w];
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(ky, padding, stride, ho, h);
                    for kx in 0..kw {
                        let wv = wt[((o * ci + c) * kh + ky) * kw + kx];
                        let (ox0, ox1) = valid_range(kx, padding, stride, wo, w);
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let grow = &g_o[oy * wo..(oy + 1) * wo];
                            let drow = &mut dx_c[iy * w..(iy + 1) * w];
                            for ox in ox0..ox1 {
                                drow[ox * stride + kx - padding] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(dx)
}

/// Copies an `h x w` plane into a zero border of `py` rows and `px` columns,
/// with `tail` extra zeros so flat windows may run past the last row.
fn pad_plane<R: Real>(x: &[R], h: usize, w: usize, py: usize, px: usize, tail: usize) -> Vec<R> {
    let pw = w + 2 * px;
    let mut out = vec![R::zero(); (h + 2 * py) * pw + tail];
    for (y, row) in x.chunks_exact(w).enumerate() {
        let at = (y + py) * pw + px;
        out[at..at + w].copy_from_slice(row);
    }
    out
}

/// Stride-1 cross-correlation of one plane with zero padding `(py, px)`.
///
/// Works on the flattened padded plane so every kernel tap is a single long
/// axpy; the `pw - ow` wrap-around columns are computed and dropped.
fn correlate_plane<R: Real>(
    x: &[R],
    (h, w): (usize, usize),
    k: &[R],
    (kh, kw): (usize, usize),
    (py, px): (usize, usize),
    out: &mut [R],
) {
    let pw = w + 2 * px;
    let oh = h + 2 * py + 1 - kh;
    let ow = w + 2 * px + 1 - kw;
    let pad = pad_plane(x, h, w, py, px, kw);
    let mut acc = vec![R::zero(); oh * pw];
    for ky in 0..kh {
        for kx in 0..kw {
            let wv = k[ky * kw + kx];
            if wv == R::zero() {
                continue;
            }
            let off = ky * pw + kx;
            for (a, &v) in acc.iter_mut().zip(&pad[off..off + oh * pw]) {
                *a += wv * v;
            }
        }
    }
    for (orow, arow) in out.chunks_exact_mut(ow).zip(acc.chunks_exact(pw)) {
        orow.copy_from_slice(&arow[..ow]);
    }
}

/// Depthwise convolution, `weight` is `[C, 1, kh, kw]` (group count = C).
pub fn dwconv2d<R: Real>(
    input: &Tensor<R>,
    weight: &Tensor<R>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<R>> {
    let (n, c, h, w) = input.dims4()?;
    let (wc, one, kh, kw) = weight.dims4()?;
    if wc != c || one != 1 {
        return shape_err(
            "dwconv2d",
            format!("input {:?} vs weight {:?}", input.shape(), weight.shape()),
        );
    }
    let ho = conv_out_len(h, kh, stride, padding)?;
    let wo = conv_out_len(w, kw, stride, padding)?;
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let x = input.data();
    let wt = weight.data();
    for_each_chunk(out.data_mut(), ho * wo, |sc, plane| {
        let ch = sc % c;
        let x_c = &x[sc * h * w..(sc + 1) * h * w];
        let k = &wt[ch * kh * kw..(ch + 1) * kh * kw];
        if stride == 1 {
            correlate_plane(x_c, (h, w), k, (kh, kw), (padding, padding), plane);
            return;
        }
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(ky, padding, stride, ho, h);
            for kx in 0..kw {
                let wv = k[ky * kw + kx];
                if wv == R::zero() {
                    continue;
                }
                let (ox0, ox1) = valid_range(kx, padding, stride, wo, w);
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - padding;
                    let row = &x_c[iy * w..(iy + 1) * w];
                    let orow = &mut plane[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let off = kx as isize - padding as isize;
                        let src =
                            &row[(ox0 as isize + off) as usize..(ox1 as isize + off) as usize];
                        for (o, &v) in orow[ox0..ox1].iter_mut().zip(src) {
                            *o += wv * v;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            orow[ox] += wv * row[ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

pub fn dwconv2d_backward_weight<R: Real>(
    input: &Tensor<R>,
    dout: &Tensor<R>,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<Tensor<R>> {
    let (n, c, h, w) = input.dims4()?;
    let (dn, dc, ho, wo) = dout.dims4()?;
    let (kh, kw) = kernel;
    if dn != n
        || dc != c
        || conv_out_len(h, kh, stride, padding)? != ho
        || conv_out_len(w, kw, stride, padding)? != wo
    {
        return shape_err(
            "dwconv2d_backward_weight",
            format!("{:?} vs {:?}", input.shape(), dout.shape()),
        );
    }
    let mut dw = Tensor::zeros(&[c, 1, kh, kw]);
    let x = input.data();
    let g = dout.data();
    let pw = w + 2 * padding;
    for_each_chunk(dw.data_mut(), kh * kw, |ch, k| {
        for s in 0..n {
            let x_c = &x[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
            let g_c = &g[(s * c + ch) * ho * wo..(s * c + ch + 1) * ho * wo];
            if stride == 1 {
                let pad = pad_plane(x_c, h, w, padding, padding, kw);
                let mut gw = vec![R::zero(); ho * pw];
                for (dst, src) in gw.chunks_exact_mut(pw).zip(g_c.chunks_exact(wo)) {
                    dst[..wo].copy_from_slice(src);
                }
                for ky in 0..kh {
                    for kx in 0..kw {
                        let off = ky * pw + kx;
                        k[ky * kw + kx] += gw
                            .iter()
                            .zip(&pad[off..off + ho * pw])
                            .map(|(&a, &b)| a * b)
                            .sum::<R>();
                    }
                }
                continue;
            }
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ky, padding, stride, ho, h);
                for kx in 0..kw {
                    let (ox0, ox1) = valid_range(kx, padding, stride, wo, w);
                    let mut acc = R::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - padding;
                        let row = &x_c[iy * w..(iy + 1) * w];
                        let grow = &g_c[oy * wo..(oy + 1) * wo];
                        for ox in ox0..ox1 {
                            acc += grow[ox] * row[ox * stride + kx - padding];
                        }
                    }
                    k[ky * kw + kx] += acc;
                }
            }
        }
    });
    Ok(dw)
}

pub fn dwconv2d_backward_input<R: Real>(
    dout: &Tensor<R>,
    weight: &Tensor<R>,
    input_hw: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<Tensor<R>> {
    let (n, c, ho, wo) = dout.dims4()?;
    let (wc, _, kh, kw) = weight.dims4()?;
    let (h, w) = input_hw;
    if wc != c
        || conv_out_len(h, kh, stride, padding)? != ho
        || conv_out_len(w, kw, stride, padding)? != wo
    {
        return shape_err(
            "dwconv2d_backward_input",
            format!("{:?} vs {:?}", dout.shape(), weight.shape()),
        );
    }
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let g = dout.data();
    let wt = weight.data();
    for_each_chunk(dx.data_mut(), h * w, |sc, dx_c| {
        let ch = sc % c;
        let g_c = &g[sc * ho * wo..(sc + 1) * ho * wo];
        let k = &wt[ch * kh * kw..(ch + 1) * kh * kw];
        if stride == 1 && padding < kh && padding < kw {
            let flipped: Vec<R> = k.iter().rev().copied().collect();
            correlate_plane(
                g_c,
                (ho, wo),
                &flipped,
                (kh, kw),
                (kh - 1 - padding, kw - 1 - padding),
                dx_c,
            );
            return;
        }
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(ky, padding, stride, ho, h);
            for kx in 0..kw {
                let wv = k[ky * kw + kx];
                let (ox0, ox1) = valid_range(kx, padding, stride, wo, w);
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - padding;
                    let grow = &g_c[oy * wo..(oy + 1) * wo];
                    let drow = &mut dx_c[iy * w..(iy + 1) * w];
                    for ox in ox0..ox1 {
                        drow[ox * stride + kx - padding] += wv * grow[ox];
                    }
                }
            }
        }
    });
    Ok(dx)
}

/// 1x1 convolution (per-pixel linear map over channels), stride 1.
pub fn pwconv2d<R: Real>(input: &Tensor<R>, weight: &Tensor<R>) -> Result<Tensor<R>> {
    pwconv2d_strided(input, weight, 1)
}

/// 1x1 convolution sampling every `stride`-th pixel.
pub fn pwconv2d_strided<R: Real>(
    input: &Tensor<R>,
    weight: &Tensor<R>,
    stride: usize,
) -> Result<Tensor<R>> {
    let (n, ci, h, w) = input.dims4()?;
    let (co, wci, kh, kw) = weight.dims4()?;
    if wci != ci || kh != 1 || kw != 1 {
        return shape_err(
            "pwconv2d",
            format!("input {:?} vs weight {:?}", input.shape(), weight.shape()),
        );
    }
    let ho = conv_out_len(h, 1, stride, 0)?;
    let wo = conv_out_len(w, 1, stride, 0)?;
    let p = ho * wo;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let x = input.data();
    let wt = weight.data();
    for_each_chunk(out.data_mut(), co * p, |s, out_s| {
        let x_s = &x[s * ci * h * w..(s + 1) * ci * h * w];
        let gathered;
        let src: &[R] = if stride == 1 {
            x_s
        } else {
            gathered = gather_strided(x_s, ci, h, w, stride, ho, wo);
            &gathered
        };
        R::gemm(
            co,
            ci,
            p,
            wt,
            (ci, 1),
            src,
            (p, 1),
            R::zero(),
            out_s,
            (p, 1),
        );
    });
    Ok(out)
}

fn gather_strided<R: Real>(
    x: &[R],
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<R> {
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            let row = &x[ch * h * w + oy * stride * w..];
            out.extend((0..wo).map(|ox| row[ox * stride]));
        }
    }
    out
}

pub fn pwconv2d_backward_weight<R: Real>(
    input: &Tensor<R>,
    dout: &Tensor<R>,
    stride: usize,
) -> Result<Tensor<R>> {
    let (n, ci, h, w) = input.dims4()?;
    let (dn, co, ho, wo) = dout.dims4()?;
    if dn != n || conv_out_len(h, 1, stride, 0)? != ho || conv_out_len(w, 1, stride, 0)? != wo {
        return shape_err(
            "pwconv2d_backward_weight",
            format!("{:?} vs {:?}", input.shape(), dout.shape()),
        );
    }
    let p = ho * wo;
    let x = input.data();
    let g = dout.data();
    let gathered: Vec<R>;
    let src: &[R] = if stride == 1 {
        x
    } else {
        gathered = (0..n)
            .flat_map(|s| {
                gather_strided(
                    &x[s * ci * h * w..(s + 1) * ci * h * w],
                    ci,
                    h,
                    w,
                    stride,
                    ho,
                    wo,
                )
            })
            .collect();
        &gathered
    };
    let mut dw = Tensor::zeros(&[co, ci, 1, 1]);
    for_each_chunk(dw.data_mut(), CONV_ROW_BLOCK * ci, |blk, rows| {
        let o0 = blk * CONV_ROW_BLOCK;
        let m = rows.len() / ci;
        for s in 0..n {
            let g_s = &g[(s * co + o0) * p..(s * co + o0 + m) * p];
            let x_s = &src[s * ci * p..(s + 1) * ci * p];
            R::gemm(m, p, ci, g_s, (p, 1), x_s, (1, p), R::one(), rows, (ci, 1));
        }
    });
    Ok(dw)
}

pub fn pwconv2d_backward_input<R: Real>(
    dout: &Tensor<R>,
    weight: &Tensor<R>,
    input_hw: (usize, usize),
    stride: usize,
) -> Result<Tensor<R>> {
    let (n, co, ho, wo) = dout.dims4()?;
    let (wco, ci, _, _) = weight.dims4()?;
    let (h, w) = input_hw;
    if wco != co || conv_out_len(h, 1, stride, 0)? != ho || conv_out_len(w, 1, stride, 0)? != wo {
        return shape_err(
            "pwconv2d_backward_input",
            format!("{:?} vs {:?}", dout.shape(), weight.shape()),
        );
    }
    let p = ho * wo;
    let g = dout.data();
    let wt = weight.data();
    let mut dx = Tensor::zeros(&[n, ci, h, w]);
    for_each_chunk(dx.data_mut(), ci * h * w, |s, dx_s| {
        let g_s = &g[s * co * p..(s + 1) * co * p];
        if stride == 1 {
            R::gemm(ci, co, p, wt, (1, ci), g_s, (p, 1), R::zero(), dx_s, (p, 1));
            return;
        }
        let mut acc = vec![R::zero(); ci * p];
        R::gemm(
            ci,
            co,
            p,
            wt,
            (1, ci),
            g_s,
            (p, 1),
            R::zero(),
            &mut acc,
            (p, 1),
        );
        for c in 0..ci {
            let dx_c = &mut dx_s[c * h * w..(c + 1) * h * w];
            let acc_c = &acc[c * p..(c + 1) * p];
            for oy in 0..ho {
                for ox in 0..wo {
                    dx_c[oy * stride * w + ox * stride] = acc_c[oy * wo + ox];
                }
            }
        }
    });
    Ok(dx)
}
