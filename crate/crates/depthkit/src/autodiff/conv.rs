//! 2-D convolution via im2col + sgemm.

use super::{Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn out_extent(op: &'static str, len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k || !(padded - k).is_multiple_of(stride) {
        return shape_err(
            op,
            format!("extent {len} with kernel {k}, stride {stride}, padding {pad} is not integral"),
        );
    }
    Ok((padded - k) / stride + 1)
}

fn geometry(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Geom> {
    let [_, cin, h, wd] = x.0;
    let [_, wcin, kh, kw] = w.0;
    if stride == 0 {
        return shape_err("conv2d", "stride must be >= 1");
    }
    if cin != wcin {
        return shape_err(
            "conv2d",
            format!("input has {cin} channels, weight expects {wcin}"),
        );
    }
    Ok(Geom {
        cin,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
        oh: out_extent("conv2d", h, kh, stride, pad)?,
        ow: out_extent("conv2d", wd, kw, stride, pad)?,
    })
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `kx`:
/// outputs whose input index `o*stride + kx - pad` lies in `[0, len)`.
fn valid_range(len: usize, out: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride).min(out);
    let hi = if len + pad > kx {
        ((len + pad - kx - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfold one image into columns `[col_off, col_off + P)` of a row-major
/// `K×ld` matrix.
fn im2col(x: &[f32], g: &Geom, col: &mut [f32], ld: usize, col_off: usize) {
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                let row = ((ci * g.kh + ky) * g.kw + kx) * ld + col_off;
                let dst_all = &mut col[row..row + g.oh * g.ow];
                for oy in 0..g.oh {
                    let dst = &mut dst_all[oy * g.ow..(oy + 1) * g.ow];
                    if oy < ylo || oy >= yhi {
                        dst.fill(0.0);
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    dst[..xlo].fill(0.0);
                    dst[xhi..].fill(0.0);
                    if g.stride == 1 {
                        let ix0 = xlo + kx - g.pad;
                        dst[xlo..xhi].copy_from_slice(&src[ix0..ix0 + xhi - xlo]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate().take(xhi).skip(xlo) {
                            *d = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into one image.
fn col2im(col: &[f32], g: &Geom, ld: usize, col_off: usize, dx: &mut [f32]) {
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                let row = ((ci * g.kh + ky) * g.kw + kx) * ld + col_off;
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let ix0 = xlo + kx - g.pad;
                        for (d, &v) in dst[ix0..ix0 + xhi - xlo].iter_mut().zip(&src[xlo..xhi]) {
                            *d += v;
                        }
                    } else {
                        for (ox, &v) in src.iter().enumerate().take(xhi).skip(xlo) {
                            dst[ox * g.stride + kx - g.pad] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = op(a) * op(b) + beta * c`, with a m×k, b k×n (after optional transposes).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
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

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = geometry(x.shape(), w.shape(), stride, pad)?;
    let cout = w.shape().n();
    if let Some(b) = b {
        if b.numel() != cout {
            return shape_err(
                "conv2d",
                format!("bias has {} values, need {cout}", b.numel()),
            );
        }
    }
    let n = x.shape().n();
    let (k, p) = (g.k(), g.p());
    let ld = n * p;
    let in_per = g.cin * g.h * g.w;
    // One GEMM over the whole batch: columns of image i sit at [i*P, (i+1)*P).
    let mut col = vec![0f32; k * ld];
    for i in 0..n {
        im2col(
            &x.data()[i * in_per..(i + 1) * in_per],
            &g,
            &mut col,
            ld,
            i * p,
        );
    }
    let mut tmp = vec![0f32; cout * ld];
    gemm(cout, k, ld, w.data(), false, &col, false, 0.0, &mut tmp);
    let mut out = vec![0f32; n * cout * p];
    for co in 0..cout {
        let bv = b.map_or(0.0, |b| b.data()[co]);
        for i in 0..n {
            let src = &tmp[co * ld + i * p..co * ld + (i + 1) * p];
            let dst = &mut out[(i * cout + co) * p..(i * cout + co + 1) * p];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + bv;
            }
        }
    }
    Tensor::from_vec([n, cout, g.oh, g.ow], out)
}

type ConvGrads = (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>);

pub(super) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &[f32],
    stride: usize,
    pad: usize,
    needs: [bool; 3],
) -> ConvGrads {
    let g = geometry(x.shape(), w.shape(), stride, pad).expect("validated in forward");
    let cout = w.shape().n();
    let n = x.shape().n();
    let (k, p) = (g.k(), g.p());
    let ld = n * p;
    let in_per = g.cin * g.h * g.w;

    let gb = needs[2].then(|| {
        let mut gb = vec![0f64; cout];
        for i in 0..n {
            for (co, acc) in gb.iter_mut().enumerate() {
                let row = &gout[(i * cout + co) * p..(i * cout + co + 1) * p];
                *acc += row.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        gb.into_iter().map(|v| v as f32).collect()
    });
    if !needs[0] && !needs[1] {
        return (None, None, gb);
    }

    // Upstream gradient regrouped as Cout × (N·P).
    let mut go = vec![0f32; cout * ld];
    for co in 0..cout {
        for i in 0..n {
            go[co * ld + i * p..co * ld + (i + 1) * p]
                .copy_from_slice(&gout[(i * cout + co) * p..(i * cout + co + 1) * p]);
        }
    }
    let mut col = vec![0f32; k * ld];
    let gw = needs[1].then(|| {
        for i in 0..n {
            im2col(
                &x.data()[i * in_per..(i + 1) * in_per],
                &g,
                &mut col,
                ld,
                i * p,
            );
        }
        let mut gw = vec![0f32; w.numel()];
        gemm(cout, ld, k, &go, false, &col, true, 0.0, &mut gw);
        gw
    });
    let gx = needs[0].then(|| {
        gemm(k, cout, ld, w.data(), true, &go, false, 0.0, &mut col);
        let mut gx = vec![0f32; x.numel()];
        for i in 0..n {
            col2im(&col, &g, ld, i * p, &mut gx[i * in_per..(i + 1) * in_per]);
        }
        gx
    });
    (gx, gw, gb)
}

impl Tape {
    /// Zero-padded 2-D cross-correlation. `w` is `Cout×Cin×kh×kw`, `b` has
    /// `Cout` values in any shape.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        self.push_op(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_xoshiro::SplitMix64;

    fn random(shape: [usize; 4], rng: &mut SplitMix64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop reference, accumulated in f64.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let [n, cin, h, wd] = x.shape().0;
        let [cout, _, kh, kw] = w.shape().0;
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Vec::new();
        for i in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co] as f64;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.at(i, ci, iy as usize, ix as usize) as f64
                                        * w.at(co, ci, ky, kx) as f64;
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn sum_of_ones() {
        let x = Tensor::ones([1, 1, 3, 3]);
        let w = Tensor::ones([1, 1, 3, 3]);
        let out = conv2d_forward(&x, &w, Some(&Tensor::zeros([1, 1, 1, 1])), 1, 0).unwrap();
        assert_eq!(out.shape(), Shape([1, 1, 1, 1]));
        assert_eq!(out.item(), 9.0);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = SplitMix64::seed_from_u64(3);
        let x = random([2, 1, 4, 5], &mut rng);
        let out = conv2d_forward(&x, &Tensor::ones([1, 1, 1, 1]), None, 1, 0).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = SplitMix64::seed_from_u64(11);
        for (shape, wshape, stride, pad) in [
            ([1, 2, 5, 5], [3, 2, 3, 3], 1, 1),
            ([2, 3, 8, 6], [4, 3, 4, 4], 2, 1),
            ([1, 4, 6, 6], [2, 4, 1, 1], 1, 0),
        ] {
            let x = random(shape, &mut rng);
            let w = random(wshape, &mut rng);
            let b = random([wshape[0], 1, 1, 1], &mut rng);
            let got = conv2d_forward(&x, &w, Some(&b), stride, pad).unwrap();
            let want = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(got.numel(), want.len());
            for (g, w) in got.data().iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::ones([1, 2, 5, 5]);
        assert!(conv2d_forward(&x, &Tensor::ones([1, 3, 3, 3]), None, 1, 1).is_err());
        // (5 + 0 - 2) / 2 is not integral
        assert!(conv2d_forward(&x, &Tensor::ones([1, 2, 2, 2]), None, 2, 0).is_err());
        assert!(conv2d_forward(&x, &Tensor::ones([1, 2, 3, 3]), None, 0, 1).is_err());
    }
}
