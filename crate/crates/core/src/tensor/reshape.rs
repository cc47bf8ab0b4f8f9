//! Linear layers, pooling and the parameter-free alignment maps used by
//! multi-level fusion, each paired with its adjoint.

use super::Tensor;
use crate::error::{shape_err, Result};
use crate::par::for_each_chunk;
use crate::real::Real;

/// `input [N, F]` times `weight [O, F]` transposed.
pub fn linear<R: Real>(input: &Tensor<R>, weight: &Tensor<R>) -> Result<Tensor<R>> {
    let (n, f) = input.dims2()?;
    let (o, wf) = weight.dims2()?;
    if wf != f {
        return shape_err(
            "linear",
            format!("input {:?} vs weight {:?}", input.shape(), weight.shape()),
        );
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Tensor::zeros(&[n, o]);
    for_each_chunk(out.data_mut(), o, |s, row| {
        let xs = &x[s * f..(s + 1) * f];
        for (j, r) in row.iter_mut().enumerate() {
            *r = xs
                .iter()
                .zip(&w[j * f..(j + 1) * f])
                .map(|(&a, &b)| a * b)
                .sum();
        }
    });
    Ok(out)
}

pub fn linear_backward_weight<R: Real>(input: &Tensor<R>, dout: &Tensor<R>) -> Result<Tensor<R>> {
    let (n, f) = input.dims2()?;
    let (dn, o) = dout.dims2()?;
    if dn != n {
        return shape_err(
            "linear_backward_weight",
            format!("{:?} vs {:?}", input.shape(), dout.shape()),
        );
    }
    let x = input.data();
    let g = dout.data();
    let mut dw = Tensor::zeros(&[o, f]);
    for_each_chunk(dw.data_mut(), f, |j, row| {
        for s in 0..n {
            let gv = g[s * o + j];
            for (r, &xv) in row.iter_mut().zip(&x[s * f..(s + 1) * f]) {
                *r += gv * xv;
            }
        }
    });
    Ok(dw)
}

pub fn linear_backward_input<R: Real>(dout: &Tensor<R>, weight: &Tensor<R>) -> Result<Tensor<R>> {
    let (n, o) = dout.dims2()?;
    let (wo, f) = weight.dims2()?;
    if wo != o {
        return shape_err(
            "linear_backward_input",
            format!("{:?} vs {:?}", dout.shape(), weight.shape()),
        );
    }
    let g = dout.data();
    let w = weight.data();
    let mut dx = Tensor::zeros(&[n, f]);
    for_each_chunk(dx.data_mut(), f, |s, row| {
        for j in 0..o {
            let gv = g[s * o + j];
            for (r, &wv) in row.iter_mut().zip(&w[j * f..(j + 1) * f]) {
                *r += gv * wv;
            }
        }
    });
    Ok(dx)
}

/// Nearest-neighbour resize: output pixel `i` reads input `floor(i * H / outH)`.
pub fn resize_nearest<R: Real>(input: &Tensor<R>, out_h: usize, out_w: usize) -> Result<Tensor<R>> {
    let (n, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return shape_err("resize_nearest", "empty output");
    }
    if out_h == h && out_w == w {
        return Ok(input.clone());
    }
    let ys: Vec<usize> = (0..out_h).map(|i| i * h / out_h).collect();
    let xs: Vec<usize> = (0..out_w).map(|i| i * w / out_w).collect();
    let x = input.data();
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    for_each_chunk(out.data_mut(), out_h * out_w, |sc, plane| {
        let src = &x[sc * h * w..(sc + 1) * h * w];
        for (oy, &iy) in ys.iter().enumerate() {
            for (ox, &ix) in xs.iter().enumerate() {
                plane[oy * out_w + ox] = src[iy * w + ix];
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`resize_nearest`]: every output gradient is added back to the
/// input pixel it was read from.
pub fn resize_nearest_backward<R: Real>(
    dout: &Tensor<R>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<R>> {
    let (n, c, oh, ow) = dout.dims4()?;
    if oh == in_h && ow == in_w {
        return Ok(dout.clone());
    }
    let g = dout.data();
    let mut dx = Tensor::zeros(&[n, c, in_h, in_w]);
    for_each_chunk(dx.data_mut(), in_h * in_w, |sc, plane| {
        let src = &g[sc * oh * ow..(sc + 1) * oh * ow];
        for oy in 0..oh {
            let iy = oy * in_h / oh;
            for ox in 0..ow {
                plane[iy * in_w + ox * in_w / ow] += src[oy * ow + ox];
            }
        }
    });
    Ok(dx)
}

/// Matches the channel count: repeats channels when `cout` is a multiple of
/// `cin`, averages contiguous channel groups when `cin` is a multiple of `cout`.
pub fn channel_align<R: Real>(input: &Tensor<R>, cout: usize) -> Result<Tensor<R>> {
    let (n, cin, h, w) = input.dims4()?;
    if cout == cin {
        return Ok(input.clone());
    }
    let plane = h * w;
    let x = input.data();
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    if cout > cin && cout.is_multiple_of(cin) {
        let k = cout / cin;
        for_each_chunk(out.data_mut(), plane, |sc, p| {
            let (s, c) = (sc / cout, sc % cout);
            let src = (s * cin + c / k) * plane;
            p.copy_from_slice(&x[src..src + plane]);
        });
    } else if cin > cout && cin.is_multiple_of(cout) {
        let k = cin / cout;
        let inv = R::one() / R::lit(k as f64);
        for_each_chunk(out.data_mut(), plane, |sc, p| {
            let (s, c) = (sc / cout, sc % cout);
            for j in 0..k {
                let src = (s * cin + c * k + j) * plane;
                for (o, &v) in p.iter_mut().zip(&x[src..src + plane]) {
                    *o += v;
                }
            }
            p.iter_mut().for_each(|o| *o *= inv);
        });
    } else {
        return shape_err(
            "channel_align",
            format!("cannot align {cin} channels to {cout}"),
        );
    }
    Ok(out)
}

/// Adjoint of [`channel_align`] back to `cin` channels.
pub fn channel_align_backward<R: Real>(dout: &Tensor<R>, cin: usize) -> Result<Tensor<R>> {
    let (n, cout, h, w) = dout.dims4()?;
    if cout == cin {
        return Ok(dout.clone());
    }
    let plane = h * w;
    let g = dout.data();
    let mut dx = Tensor::zeros(&[n, cin, h, w]);
    if cout > cin && cout.is_multiple_of(cin) {
        let k = cout / cin;
        for_each_chunk(dx.data_mut(), plane, |sc, p| {
            let (s, c) = (sc / cin, sc % cin);
            for j in 0..k {
                let src = (s * cout + c * k + j) * plane;
                for (o, &v) in p.iter_mut().zip(&g[src..src + plane]) {
                    *o += v;
                }
            }
        });
    } else if cin > cout && cin.is_multiple_of(cout) {
        let k = cin / cout;
        let inv = R::one() / R::lit(k as f64);
        for_each_chunk(dx.data_mut(), plane, |sc, p| {
            let (s, c) = (sc / cin, sc % cin);
            let src = (s * cout + c / k) * plane;
            for (o, &v) in p.iter_mut().zip(&g[src..src + plane]) {
                *o = v * inv;
            }
        });
    } else {
        return shape_err(
            "channel_align_backward",
            format!("cannot align {cout} channels to {cin}"),
        );
    }
    Ok(dx)
}

pub fn global_avg_pool<R: Real>(input: &Tensor<R>) -> Result<Tensor<R>> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let inv = R::one() / R::lit(plane as f64);
    let x = input.data();
    let data = (0..n * c)
        .map(|sc| x[sc * plane..(sc + 1) * plane].iter().copied().sum::<R>() * inv)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward<R: Real>(
    dout: &Tensor<R>,
    h: usize,
    w: usize,
) -> Result<Tensor<R>> {
    let (n, c) = dout.dims2()?;
    let inv = R::one() / R::lit((h * w) as f64);
    let g = dout.data();
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for_each_chunk(dx.data_mut(), h * w, |sc, p| {
        let v = g[sc] * inv;
        p.iter_mut().for_each(|o| *o = v);
    });
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        assert_eq!(linear(&x, &t(&[1, 2], &[1.0, 1.0])).unwrap().data(), &[3.0]);
        assert_eq!(linear(&x, &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap(), x);
        assert_eq!(
            linear(&x, &Tensor::zeros(&[3, 2])).unwrap().data(),
            &[0.0; 3]
        );
        assert!(linear(&x, &Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn resize_examples() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(resize_nearest(&x, 2, 2).unwrap(), x);
        let up = resize_nearest(&x, 4, 4).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up.data(), &expected);
        let s = resize_nearest(&t(&[1, 1, 1, 1], &[5.0]), 2, 2).unwrap();
        assert_eq!(s.data(), &[5.0; 4]);
        assert_eq!(resize_nearest(&up, 2, 2).unwrap(), x);
    }

    #[test]
    fn channel_align_examples() {
        let x = t(&[1, 2, 1, 1], &[2.0, 4.0]);
        assert_eq!(channel_align(&x, 2).unwrap(), x);
        assert_eq!(channel_align(&x, 1).unwrap().data(), &[3.0]);
        let one = t(&[1, 1, 1, 2], &[1.0, -1.0]);
        assert_eq!(
            channel_align(&one, 2).unwrap().data(),
            &[1.0, -1.0, 1.0, -1.0]
        );
        assert!(channel_align(&t(&[1, 3, 1, 1], &[1.0, 2.0, 3.0]), 2).is_err());
    }

    #[test]
    fn gap_examples() {
        assert_eq!(
            global_avg_pool(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]))
                .unwrap()
                .data(),
            &[2.5]
        );
        assert_eq!(
            global_avg_pool(&Tensor::<f32>::full(&[2, 3, 4, 4], 1.5))
                .unwrap()
                .data(),
            &[1.5; 6]
        );
        assert_eq!(
            global_avg_pool(&Tensor::<f32>::zeros(&[1, 2, 3, 3]))
                .unwrap()
                .data(),
            &[0.0; 2]
        );
    }
}
