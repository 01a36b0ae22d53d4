//! Spatial rearrangement, pooling and resampling ops.

use super::{Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Shape, Tensor};

fn pixel_shuffle_data(x: &[f32], in_shape: Shape, r: usize) -> Vec<f32> {
    let [n, cr2, h, w] = in_shape.0;
    let c = cr2 / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0f32; x.len()];
    for i in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let src_c = ch * r * r + dy * r + dx;
                    let src = &x[((i * cr2 + src_c) * h) * w..((i * cr2 + src_c + 1) * h) * w];
                    let dst_plane = (i * c + ch) * oh * ow;
                    for y in 0..h {
                        let row = dst_plane + (r * y + dy) * ow;
                        for xx in 0..w {
                            out[row + r * xx + dx] = src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse index map of [`Tape::pixel_shuffle`] (`in_shape` is the
/// shuffle's input shape).
pub(crate) fn pixel_unshuffle(g: &[f32], in_shape: Shape, r: usize) -> Vec<f32> {
    let [n, cr2, h, w] = in_shape.0;
    let c = cr2 / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0f32; g.len()];
    for i in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let src_c = ch * r * r + dy * r + dx;
                    let base = ((i * cr2 + src_c) * h) * w;
                    let plane = (i * c + ch) * oh * ow;
                    for y in 0..h {
                        for xx in 0..w {
                            out[base + y * w + xx] = g[plane + (r * y + dy) * ow + r * xx + dx];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(super) fn upsample_nearest_backward(g: &[f32], in_shape: Shape, f: usize) -> Vec<f32> {
    let [n, c, h, w] = in_shape.0;
    let ow = w * f;
    let mut out = vec![0f32; in_shape.numel()];
    for plane in 0..n * c {
        let src = &g[plane * h * f * ow..(plane + 1) * h * f * ow];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for (oy, row) in src.chunks(ow).enumerate() {
            let drow = &mut dst[(oy / f) * w..(oy / f + 1) * w];
            for (ox, &v) in row.iter().enumerate() {
                drow[ox / f] += v;
            }
        }
    }
    out
}

pub(super) fn avg_pool_backward(
    g: &[f32],
    in_shape: Shape,
    out_shape: Shape,
    k: usize,
    stride: usize,
) -> Vec<f32> {
    let [n, c, h, w] = in_shape.0;
    let [_, _, oh, ow] = out_shape.0;
    let inv = 1.0 / (k * k) as f32;
    let mut out = vec![0f32; in_shape.numel()];
    for plane in 0..n * c {
        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = src[oy * ow + ox] * inv;
                for ky in 0..k {
                    let row = (oy * stride + ky) * w + ox * stride;
                    dst[row..row + k].iter_mut().for_each(|d| *d += v);
                }
            }
        }
    }
    out
}

fn reflect(i: isize, len: usize) -> usize {
    let l = len as isize;
    let j = if i < 0 {
        -i
    } else if i >= l {
        2 * (l - 1) - i
    } else {
        i
    };
    j as usize
}

pub(super) fn reflect_pad_backward(g: &[f32], in_shape: Shape, p: usize) -> Vec<f32> {
    let [n, c, h, w] = in_shape.0;
    let (oh, ow) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0f32; in_shape.numel()];
    for plane in 0..n * c {
        for oy in 0..oh {
            let iy = reflect(oy as isize - p as isize, h);
            for ox in 0..ow {
                let ix = reflect(ox as isize - p as isize, w);
                out[plane * h * w + iy * w + ix] += g[plane * oh * ow + oy * ow + ox];
            }
        }
    }
    out
}

/// Copy the box `[start, start+len)` along `dim` between a full and a
/// narrowed layout. `scatter` writes narrowed → full.
fn narrow_copy(
    src: &[f32],
    dst: &mut [f32],
    full: Shape,
    part: Shape,
    dim: usize,
    start: usize,
    scatter: bool,
) {
    let fs = full.strides();
    let [pn, pc, ph, pw] = part.0;
    let mut offset = [0usize; 4];
    offset[dim] = start;
    let mut pi = 0;
    for i in 0..pn {
        for j in 0..pc {
            for k in 0..ph {
                let base = (i + offset[0]) * fs[0]
                    + (j + offset[1]) * fs[1]
                    + (k + offset[2]) * fs[2]
                    + offset[3];
                if scatter {
                    dst[base..base + pw].copy_from_slice(&src[pi..pi + pw]);
                } else {
                    dst[pi..pi + pw].copy_from_slice(&src[base..base + pw]);
                }
                pi += pw;
            }
        }
    }
}

pub(super) fn narrow_backward(
    g: &[f32],
    in_shape: Shape,
    out_shape: Shape,
    dim: usize,
    start: usize,
) -> Vec<f32> {
    let mut out = vec![0f32; in_shape.numel()];
    narrow_copy(g, &mut out, in_shape, out_shape, dim, start, true);
    out
}

pub(super) fn concat_backward(g: &[f32], out_shape: Shape, shapes: &[Shape]) -> Vec<Vec<f32>> {
    let mut start = 0;
    shapes
        .iter()
        .map(|s| {
            let mut part = vec![0f32; s.numel()];
            narrow_copy(g, &mut part, out_shape, *s, 1, start, false);
            start += s.c();
            part
        })
        .collect()
}

pub(crate) fn hflip_data(x: &[f32], shape: Shape) -> Vec<f32> {
    let w = shape.w();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(w) {
        out.extend(row.iter().rev());
    }
    out
}

/// Bilinear taps for one continuous coordinate, with border clamping.
/// Returns (i0, i1, frac, inside) where `inside` means the clamp was inactive.
#[inline]
fn taps(coord: f32, len: usize) -> (usize, usize, f32, bool) {
    let max = (len - 1) as f32;
    let inside = (0.0..=max).contains(&coord);
    let c = coord.clamp(0.0, max);
    let i0 = (c.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, c - i0 as f32, inside)
}

fn grid_sample_forward(src: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let [n, c, hs, ws] = src.shape().0;
    let [gn, gc, h, w] = grid.shape().0;
    if gn != n || gc != 2 {
        return shape_err(
            "grid_sample_bilinear",
            format!("grid {:?} for source {:?}", grid.shape(), src.shape()),
        );
    }
    let mut out = vec![0f32; n * c * h * w];
    let p = h * w;
    for i in 0..n {
        let gx = &grid.data()[(i * 2) * p..(i * 2 + 1) * p];
        let gy = &grid.data()[(i * 2 + 1) * p..(i * 2 + 2) * p];
        for q in 0..p {
            let (x0, x1, fx, _) = taps(gx[q], ws);
            let (y0, y1, fy, _) = taps(gy[q], hs);
            for ch in 0..c {
                let plane = &src.data()[(i * c + ch) * hs * ws..(i * c + ch + 1) * hs * ws];
                let v00 = plane[y0 * ws + x0];
                let v01 = plane[y0 * ws + x1];
                let v10 = plane[y1 * ws + x0];
                let v11 = plane[y1 * ws + x1];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[(i * c + ch) * p + q] = top + fy * (bot - top);
            }
        }
    }
    Tensor::from_vec([n, c, h, w], out)
}

pub(super) fn grid_sample_backward(
    src: &Tensor,
    grid: &Tensor,
    g: &[f32],
    need_src: bool,
    need_grid: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let [n, c, hs, ws] = src.shape().0;
    let [_, _, h, w] = grid.shape().0;
    let p = h * w;
    let mut gsrc = need_src.then(|| vec![0f32; src.numel()]);
    let mut ggrid = need_grid.then(|| vec![0f32; grid.numel()]);
    for i in 0..n {
        for q in 0..p {
            let (x0, x1, fx, in_x) = taps(grid.data()[(i * 2) * p + q], ws);
            let (y0, y1, fy, in_y) = taps(grid.data()[(i * 2 + 1) * p + q], hs);
            let mut dgx = 0f32;
            let mut dgy = 0f32;
            for ch in 0..c {
                let go = g[(i * c + ch) * p + q];
                let base = (i * c + ch) * hs * ws;
                if let Some(gs) = gsrc.as_mut() {
                    gs[base + y0 * ws + x0] += go * (1.0 - fx) * (1.0 - fy);
                    gs[base + y0 * ws + x1] += go * fx * (1.0 - fy);
                    gs[base + y1 * ws + x0] += go * (1.0 - fx) * fy;
                    gs[base + y1 * ws + x1] += go * fx * fy;
                }
                if ggrid.is_some() {
                    let plane = &src.data()[base..base + hs * ws];
                    let v00 = plane[y0 * ws + x0];
                    let v01 = plane[y0 * ws + x1];
                    let v10 = plane[y1 * ws + x0];
                    let v11 = plane[y1 * ws + x1];
                    dgx += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                    dgy += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
            }
            if let Some(gg) = ggrid.as_mut() {
                // Past the last sample the interpolant is flat in that axis.
                let x_live = in_x && x1 != x0;
                let y_live = in_y && y1 != y0;
                gg[(i * 2) * p + q] = if x_live { dgx } else { 0.0 };
                gg[(i * 2 + 1) * p + q] = if y_live { dgy } else { 0.0 };
            }
        }
    }
    (gsrc, ggrid)
}

impl Tape {
    /// Rearrange `N×(C·r²)×H×W` into `N×C×(rH)×(rW)`:
    /// `out[n, c, r·h+dy, r·w+dx] = in[n, c·r²+dy·r+dx, h, w]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x);
        if r == 0 || !s.c().is_multiple_of(r * r) {
            return shape_err(
                "pixel_shuffle",
                format!("{} channels not divisible by r² = {}", s.c(), r * r),
            );
        }
        let data = pixel_shuffle_data(self.value(x).data(), s, r);
        let out = Tensor::from_vec([s.n(), s.c() / (r * r), s.h() * r, s.w() * r], data)?;
        self.push_op(out, Op::PixelShuffle(x, r))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x);
        if factor == 0 {
            return shape_err("upsample_nearest", "factor must be >= 1");
        }
        let [n, c, h, w] = s.0;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in src.chunks(h * w) {
            for oy in 0..oh {
                let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    data.push(row[ox / factor]);
                }
            }
        }
        let out = Tensor::from_vec([n, c, oh, ow], data)?;
        self.push_op(out, Op::UpsampleNearest(x, factor))
    }

    /// Unpadded `k×k` mean pooling with the given stride.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x).0;
        if k == 0
            || stride == 0
            || h < k
            || w < k
            || !(h - k).is_multiple_of(stride)
            || !(w - k).is_multiple_of(stride)
        {
            return shape_err(
                "avg_pool2d",
                format!("{h}x{w} with window {k}, stride {stride} is not integral"),
            );
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let inv = 1.0 / (k * k) as f32;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in src.chunks(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0f32;
                    for ky in 0..k {
                        let row = (oy * stride + ky) * w + ox * stride;
                        acc += plane[row..row + k].iter().sum::<f32>();
                    }
                    data.push(acc * inv);
                }
            }
        }
        let out = Tensor::from_vec([n, c, oh, ow], data)?;
        self.push_op(out, Op::AvgPool { x, k, stride })
    }

    /// Mirror padding without repeating the edge sample.
    pub fn reflect_pad(&mut self, x: Var, p: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x).0;
        if p >= h || p >= w {
            return shape_err("reflect_pad", format!("padding {p} too large for {h}x{w}"));
        }
        let (oh, ow) = (h + 2 * p, w + 2 * p);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in src.chunks(h * w) {
            for oy in 0..oh {
                let iy = reflect(oy as isize - p as isize, h);
                for ox in 0..ow {
                    data.push(plane[iy * w + reflect(ox as isize - p as isize, w)]);
                }
            }
        }
        let out = Tensor::from_vec([n, c, oh, ow], data)?;
        self.push_op(out, Op::ReflectPad(x, p))
    }

    /// Slice `[start, start+len)` along dimension `dim`.
    pub fn narrow(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if dim > 3 || start + len > s.0[dim] || len == 0 {
            return shape_err(
                "narrow",
                format!("[{start}, {}) of dim {dim} in {s:?}", start + len),
            );
        }
        let mut part = s.0;
        part[dim] = len;
        let part = Shape(part);
        let mut data = vec![0f32; part.numel()];
        narrow_copy(self.value(x).data(), &mut data, s, part, dim, start, false);
        let out = Tensor::from_vec(part, data)?;
        self.push_op(out, Op::Narrow { x, dim, start })
    }

    /// Concatenate along the channel dimension.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat", "no inputs");
        };
        let [n, _, h, w] = self.shape(first).0;
        let mut c = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.n(), s.h(), s.w()) != (n, h, w) {
                return shape_err("concat", format!("{s:?} vs {:?}", self.shape(first)));
            }
            c += s.c();
        }
        let out_shape = Shape([n, c, h, w]);
        let mut data = vec![0f32; out_shape.numel()];
        let mut start = 0;
        for &v in xs {
            let s = self.shape(v);
            narrow_copy(
                self.value(v).data(),
                &mut data,
                out_shape,
                s,
                1,
                start,
                true,
            );
            start += s.c();
        }
        let out = Tensor::from_vec(out_shape, data)?;
        self.push_op(out, Op::Concat(xs.to_vec()))
    }

    /// Mirror along the width axis.
    pub fn hflip(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let out = Tensor::from_vec(s, hflip_data(self.value(x).data(), s))?;
        self.push_op(out, Op::HFlip(x))
    }

    /// Bilinear sampling of `src` at pixel coordinates `grid` (`N×2×H×W`,
    /// channel 0 = x, channel 1 = y). Coordinates are clamped to the source
    /// border.
    pub fn grid_sample(&mut self, src: Var, grid: Var) -> Result<Var> {
        let out = grid_sample_forward(self.value(src), self.value(grid))?;
        self.push_op(out, Op::GridSample { src, grid })
    }

    /// Bilinear resize by an integer factor (half-pixel centres, border
    /// clamped), expressed as a fixed sampling grid.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, _, h, w] = self.shape(x).0;
        if factor == 1 {
            return Ok(x);
        }
        let (oh, ow) = (h * factor, w * factor);
        let f = factor as f32;
        let mut data = Vec::with_capacity(n * 2 * oh * ow);
        for _ in 0..n {
            for _ in 0..oh {
                for ox in 0..ow {
                    data.push((ox as f32 + 0.5) / f - 0.5);
                }
            }
            for oy in 0..oh {
                let y = (oy as f32 + 0.5) / f - 0.5;
                data.extend(std::iter::repeat_n(y, ow));
            }
        }
        let grid = self.constant(Tensor::from_vec([n, 2, oh, ow], data)?)?;
        self.grid_sample(x, grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: [usize; 4], data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn identity_grid(n: usize, h: usize, w: usize) -> Tensor {
        let mut d = Vec::new();
        for _ in 0..n {
            for _ in 0..h {
                d.extend((0..w).map(|x| x as f32));
            }
            for y in 0..h {
                d.extend(std::iter::repeat_n(y as f32, w));
            }
        }
        t([n, 2, h, w], d)
    }

    #[test]
    fn pixel_shuffle_enumerated_case() {
        let mut tape = Tape::new();
        let x = tape
            .constant(t([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let y = tape.pixel_shuffle(x, 2).unwrap();
        assert_eq!(tape.shape(y), Shape([1, 1, 2, 2]));
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let y1 = tape.pixel_shuffle(x, 1).unwrap();
        assert_eq!(tape.value(y1), tape.value(x));

        let bad = tape.constant(Tensor::ones([1, 3, 2, 2])).unwrap();
        assert!(tape.pixel_shuffle(bad, 2).is_err());
    }

    #[test]
    fn pixel_shuffle_two_by_two_layout() {
        // 8 channels, r=2 -> 2 output channels on a 2x2 grid of 2x2 blocks
        let data: Vec<f32> = (0..32).map(|v| v as f32).collect();
        let shape = Shape([1, 8, 2, 2]);
        let out = pixel_shuffle_data(&data, shape, 2);
        // out[0, 1, 2*1+1, 2*0+0] = in[0, 1*4 + 1*2 + 0, 1, 0]
        let (oh, ow) = (4, 4);
        assert_eq!(out[oh * ow + 3 * ow], data[6 * 4 + 2]);
    }

    proptest! {
        #[test]
        fn pixel_shuffle_is_a_bijection(vals in proptest::collection::vec(-10f32..10.0, 36)) {
            let shape = Shape([1, 9, 2, 2]);
            let out = pixel_shuffle_data(&vals, shape, 3);
            let back = pixel_unshuffle(&out, shape, 3);
            prop_assert_eq!(&back, &vals);
            let mut a = vals.clone();
            let mut b = out.clone();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn hflip_is_an_involution(vals in proptest::collection::vec(-10f32..10.0, 30)) {
            let shape = Shape([1, 2, 3, 5]);
            let twice = hflip_data(&hflip_data(&vals, shape), shape);
            prop_assert_eq!(twice, vals);
        }

        #[test]
        fn grid_sample_identity_grid(vals in proptest::collection::vec(0f32..1.0, 2 * 3 * 5 * 4)) {
            let src = t([2, 3, 5, 4], vals);
            let out = grid_sample_forward(&src, &identity_grid(2, 5, 4)).unwrap();
            prop_assert!(out.max_abs_diff(&src) < 1e-6);
        }
    }

    #[test]
    fn hflip_reverses_rows_and_keeps_symmetric_input() {
        let mut tape = Tape::new();
        let x = tape.constant(t([1, 1, 1, 3], vec![1.0, 2.0, 3.0])).unwrap();
        let y = tape.hflip(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 2.0, 1.0]);
        let s = tape
            .constant(t([1, 1, 2, 3], vec![1.0, 5.0, 1.0, 2.0, 0.0, 2.0]))
            .unwrap();
        let fs = tape.hflip(s).unwrap();
        assert_eq!(tape.value(fs), tape.value(s));
    }

    #[test]
    fn grid_sample_midpoint_and_integer_shift() {
        let src = t([1, 1, 1, 2], vec![0.0, 2.0]);
        let grid = t([1, 2, 1, 1], vec![0.5, 0.0]);
        assert_eq!(grid_sample_forward(&src, &grid).unwrap().item(), 1.0);

        // Ramp image, grid shifted by +1 in x.
        let (h, w) = (3, 6);
        let ramp: Vec<f32> = (0..h * w)
            .map(|i| ((i % w) * (i % w)) as f32 * 0.1)
            .collect();
        let src = t([1, 1, h, w], ramp);
        let mut grid = identity_grid(1, h, w);
        for v in &mut grid.data_mut()[..h * w] {
            *v += 1.0;
        }
        let out = grid_sample_forward(&src, &grid).unwrap();
        for y in 0..h {
            for x in 0..w - 1 {
                assert_eq!(out.at(0, 0, y, x), src.at(0, 0, y, x + 1));
            }
            // beyond the border the sampler clamps to the last column
            assert_eq!(out.at(0, 0, y, w - 1), src.at(0, 0, y, w - 1));
        }
    }

    #[test]
    fn avg_pool_and_reflect_pad() {
        let mut tape = Tape::new();
        let checker: Vec<f32> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f32).collect();
        let x = tape.constant(t([1, 1, 4, 4], checker)).unwrap();
        let p = tape.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5; 4]);
        assert!(tape.avg_pool2d(x, 3, 2).is_err());

        let r = tape.constant(t([1, 1, 1, 3], vec![1.0, 2.0, 3.0])).unwrap();
        assert!(tape.reflect_pad(r, 1).is_err());
        let r = tape
            .constant(t([1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap();
        let padded = tape.reflect_pad(r, 1).unwrap();
        assert_eq!(tape.shape(padded), Shape([1, 1, 4, 5]));
        assert_eq!(
            &tape.value(padded).data()[5..10],
            &[2.0, 1.0, 2.0, 3.0, 2.0]
        );
    }

    #[test]
    fn narrow_and_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape
            .constant(t([2, 3, 2, 2], (0..24).map(|v| v as f32).collect()))
            .unwrap();
        let a = tape.narrow(x, 1, 0, 1).unwrap();
        let b = tape.narrow(x, 1, 1, 2).unwrap();
        let back = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        let cols = tape.narrow(x, 3, 1, 1).unwrap();
        assert_eq!(tape.value(cols).data()[..2], [1.0, 3.0]);
        assert!(tape.narrow(x, 2, 1, 2).is_err());
    }

    #[test]
    fn upsample_bilinear_preserves_constants() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 4], 0.7)).unwrap();
        let y = tape.upsample_bilinear(x, 4).unwrap();
        assert_eq!(tape.shape(y), Shape([1, 1, 12, 16]));
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }
}
