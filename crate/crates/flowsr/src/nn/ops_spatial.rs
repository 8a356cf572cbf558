use ndarray::{Array2, Array4, ArrayD, ArrayView4, Ix2, Ix4};

use super::tape::{Tape, Var};

/// Unfold `[N,Cin,H,W]` into `[Cin*kh*kw, N*OH*OW]` for stride/pad conv.
fn im2col(x: &ArrayView4<f32>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (n, cin, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<f32>::zeros((cin * kh * kw, n * oh * ow));
    for ni in 0..n {
        for c in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, (ni * oh + oy) * ow + ox]] =
                                x[[ni, c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the unfolded gradient back to input layout.
fn col2im(
    cols: &Array2<f32>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut x = Array4::<f32>::zeros((n, cin, h, w));
    for ni in 0..n {
        for c in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[[ni, c, iy as usize, ix as usize]] +=
                                cols[[row, (ni * oh + oy) * ow + ox]];
                        }
                    }
                }
            }
        }
    }
    x
}

fn out2_to_nchw(out2: &Array2<f32>, n: usize, oh: usize, ow: usize) -> Array4<f32> {
    let cout = out2.dim().0;
    let mut out = Array4::<f32>::zeros((n, cout, oh, ow));
    for co in 0..cout {
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[[ni, co, oy, ox]] = out2[[co, (ni * oh + oy) * ow + ox]];
                }
            }
        }
    }
    out
}

fn nchw_to_out2(g: &ArrayView4<f32>) -> Array2<f32> {
    let (n, cout, oh, ow) = g.dim();
    let mut out2 = Array2::<f32>::zeros((cout, n * oh * ow));
    for co in 0..cout {
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    out2[[co, (ni * oh + oy) * ow + ox]] = g[[ni, co, oy, ox]];
                }
            }
        }
    }
    out2
}

impl Tape {
    /// 2-D convolution with bias: x `[N,Cin,H,W]`, w `[Cout,Cin,kh,kw]`, b `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xi, wi, bi) = (x.0, w.0, b.0);
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let (n, cin, h, wd) = xv.dim();
        let (cout, cin2, kh, kw) = wv.dim();
        assert_eq!(cin, cin2, "conv2d: channel mismatch");
        assert_eq!(self.shape(b), &[cout], "conv2d: bias shape");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let cols = im2col(&xv, kh, kw, stride, pad);
        let w2 = wv
            .to_owned()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        let out2 = w2.dot(&cols);
        let mut out = out2_to_nchw(&out2, n, oh, ow);
        let bv = self.value(b).clone();
        for co in 0..cout {
            let bias = bv[[co]];
            out.index_axis_mut(ndarray::Axis(1), co)
                .mapv_inplace(|t| t + bias);
        }
        self.push(
            out.into_dyn(),
            vec![xi, wi, bi],
            Some(Box::new(move |g, vals, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let gout2 = nchw_to_out2(&g4);
                // bias gradient
                let mut db = ArrayD::<f32>::zeros(ndarray::IxDyn(&[cout]));
                for co in 0..cout {
                    db[[co]] = gout2.row(co).iter().map(|&t| t as f64).sum::<f64>() as f32;
                }
                sink(bi, db);
                // weight gradient (recompute the unfolding)
                let xv = vals[xi].view().into_dimensionality::<Ix4>().unwrap();
                let cols = im2col(&xv, kh, kw, stride, pad);
                let dw2 = gout2.dot(&cols.t());
                sink(
                    wi,
                    dw2.into_shape_with_order((cout, cin, kh, kw))
                        .unwrap()
                        .into_dyn(),
                );
                // input gradient
                let wv = vals[wi].view().into_dimensionality::<Ix4>().unwrap();
                let w2 = wv
                    .to_owned()
                    .into_shape_with_order((cout, cin * kh * kw))
                    .unwrap();
                let dcols = w2.t().dot(&gout2);
                sink(
                    xi,
                    col2im(&dcols, n, cin, h, wd, kh, kw, stride, pad).into_dyn(),
                );
            })),
        )
    }

    /// Space-to-depth by 2: `[N,C,H,W] -> [N,4C,H/2,W/2]`.
    pub fn squeeze2(&mut self, a: Var) -> Var {
        let v = squeeze2_arr(self.value(a));
        let ai = a.0;
        self.push(
            v,
            vec![ai],
            Some(Box::new(move |g, _vals, sink| sink(ai, unsqueeze2_arr(g)))),
        )
    }

    /// Depth-to-space by 2: `[N,4C,H,W] -> [N,C,2H,2W]`.
    pub fn unsqueeze2(&mut self, a: Var) -> Var {
        let v = unsqueeze2_arr(self.value(a));
        let ai = a.0;
        self.push(
            v,
            vec![ai],
            Some(Box::new(move |g, _vals, sink| sink(ai, squeeze2_arr(g)))),
        )
    }

    /// Channel gather: out[:, k] = x[:, perm[k]].
    pub fn permute_axis1(&mut self, a: Var, perm: &[usize]) -> Var {
        let arr = self.value(a);
        assert_eq!(arr.shape()[1], perm.len(), "permute_axis1: length");
        let mut v = arr.clone();
        for (k, &src) in perm.iter().enumerate() {
            v.index_axis_mut(ndarray::Axis(1), k)
                .assign(&arr.index_axis(ndarray::Axis(1), src));
        }
        let perm: Vec<usize> = perm.to_vec();
        let ai = a.0;
        self.push(
            v,
            vec![ai],
            Some(Box::new(move |g, vals, sink| {
                let mut dx = ArrayD::<f32>::zeros(vals[ai].raw_dim());
                for (k, &src) in perm.iter().enumerate() {
                    dx.index_axis_mut(ndarray::Axis(1), src)
                        .assign(&g.index_axis(ndarray::Axis(1), k));
                }
                sink(ai, dx);
            })),
        )
    }

    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x.dim();
        let mut out = Array4::<f32>::zeros((n, c, h * 2, w * 2));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h * 2 {
                    for xq in 0..w * 2 {
                        out[[ni, ci, y, xq]] = x[[ni, ci, y / 2, xq / 2]];
                    }
                }
            }
        }
        let ai = a.0;
        self.push(
            out.into_dyn(),
            vec![ai],
            Some(Box::new(move |g, _vals, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h * 2 {
                            for xq in 0..w * 2 {
                                dx[[ni, ci, y / 2, xq / 2]] += g4[[ni, ci, y, xq]];
                            }
                        }
                    }
                }
                sink(ai, dx.into_dyn());
            })),
        )
    }

    pub fn avgpool2(&mut self, a: Var) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool2: odd spatial size");
        let mut out = Array4::<f32>::zeros((n, c, h / 2, w / 2));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h / 2 {
                    for xq in 0..w / 2 {
                        out[[ni, ci, y, xq]] = 0.25
                            * (x[[ni, ci, 2 * y, 2 * xq]]
                                + x[[ni, ci, 2 * y, 2 * xq + 1]]
                                + x[[ni, ci, 2 * y + 1, 2 * xq]]
                                + x[[ni, ci, 2 * y + 1, 2 * xq + 1]]);
                    }
                }
            }
        }
        let ai = a.0;
        self.push(
            out.into_dyn(),
            vec![ai],
            Some(Box::new(move |g, _vals, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h {
                            for xq in 0..w {
                                dx[[ni, ci, y, xq]] = 0.25 * g4[[ni, ci, y / 2, xq / 2]];
                            }
                        }
                    }
                }
                sink(ai, dx.into_dyn());
            })),
        )
    }

    /// Bilinear resize to `(oh, ow)`, half-pixel-center convention.
    pub fn resize_bilinear(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x.dim();
        let ytaps = bilinear_taps(h, oh);
        let xtaps = bilinear_taps(w, ow);
        let mut out = Array4::<f32>::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                for (oy, &(y0, y1, wy)) in ytaps.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                        let v00 = x[[ni, ci, y0, x0]];
                        let v01 = x[[ni, ci, y0, x1]];
                        let v10 = x[[ni, ci, y1, x0]];
                        let v11 = x[[ni, ci, y1, x1]];
                        out[[ni, ci, oy, ox]] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                            + wy * ((1.0 - wx) * v10 + wx * v11);
                    }
                }
            }
        }
        let ai = a.0;
        self.push(
            out.into_dyn(),
            vec![ai],
            Some(Box::new(move |g, _vals, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for (oy, &(y0, y1, wy)) in ytaps.iter().enumerate() {
                            for (ox, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                                let gg = g4[[ni, ci, oy, ox]];
                                dx[[ni, ci, y0, x0]] += (1.0 - wy) * (1.0 - wx) * gg;
                                dx[[ni, ci, y0, x1]] += (1.0 - wy) * wx * gg;
                                dx[[ni, ci, y1, x0]] += wy * (1.0 - wx) * gg;
                                dx[[ni, ci, y1, x1]] += wy * wx * gg;
                            }
                        }
                    }
                }
                sink(ai, dx.into_dyn());
            })),
        )
    }

    /// Zero-pad bottom/right.
    pub fn pad_br(&mut self, a: Var, pb: usize, pr: usize) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x.dim();
        let mut out = Array4::<f32>::zeros((n, c, h + pb, w + pr));
        out.slice_mut(ndarray::s![.., .., ..h, ..w]).assign(&x);
        let ai = a.0;
        self.push(
            out.into_dyn(),
            vec![ai],
            Some(Box::new(move |g, _vals, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                sink(ai, g4.slice(ndarray::s![.., .., ..h, ..w]).to_owned().into_dyn());
            })),
        )
    }

    /// Crop to the top-left `(h, w)` window.
    pub fn crop_tl(&mut self, a: Var, h: usize, w: usize) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, fh, fw) = x.dim();
        assert!(h <= fh && w <= fw, "crop_tl: target larger than input");
        let out = x.slice(ndarray::s![.., .., ..h, ..w]).to_owned();
        let ai = a.0;
        self.push(
            out.into_dyn(),
            vec![ai],
            Some(Box::new(move |g, _vals, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f32>::zeros((n, c, fh, fw));
                dx.slice_mut(ndarray::s![.., .., ..h, ..w]).assign(&g4);
                sink(ai, dx.into_dyn());
            })),
        )
    }

    /// Gather per-cell feature vectors: `[N,F,H,W]` + cells -> `[P,F]`.
    pub fn gather_cells(&mut self, a: Var, cells: &[(usize, usize, usize)]) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix4>().unwrap();
        let (_, f, _, _) = x.dim();
        let mut out = Array2::<f32>::zeros((cells.len(), f));
        for (p, &(n, y, xq)) in cells.iter().enumerate() {
            for c in 0..f {
                out[[p, c]] = x[[n, c, y, xq]];
            }
        }
        let cells: Vec<(usize, usize, usize)> = cells.to_vec();
        let ai = a.0;
        self.push(
            out.into_dyn(),
            vec![ai],
            Some(Box::new(move |g, vals, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ArrayD::<f32>::zeros(vals[ai].raw_dim());
                for (p, &(n, y, xq)) in cells.iter().enumerate() {
                    for c in 0..g2.dim().1 {
                        dx[[n, c, y, xq]] += g2[[p, c]];
                    }
                }
                sink(ai, dx);
            })),
        )
    }

    /// Row-major pixel rows to an image: `[oh*ow, C] -> [1, C, oh, ow]`.
    pub fn rows_to_image(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let (p, c) = x.dim();
        assert_eq!(p, oh * ow, "rows_to_image: row count");
        let mut out = Array4::<f32>::zeros((1, c, oh, ow));
        for y in 0..oh {
            for xq in 0..ow {
                for ci in 0..c {
                    out[[0, ci, y, xq]] = x[[y * ow + xq, ci]];
                }
            }
        }
        let ai = a.0;
        self.push(
            out.into_dyn(),
            vec![ai],
            Some(Box::new(move |g, _vals, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array2::<f32>::zeros((p, c));
                for y in 0..oh {
                    for xq in 0..ow {
                        for ci in 0..c {
                            dx[[y * ow + xq, ci]] = g4[[0, ci, y, xq]];
                        }
                    }
                }
                sink(ai, dx.into_dyn());
            })),
        )
    }

    /// Cyclic 2-D roll by (dy, dx).
    pub fn roll2d(&mut self, a: Var, dy: isize, dx: isize) -> Var {
        let v = roll2d_arr(self.value(a), dy, dx);
        let ai = a.0;
        self.push(
            v,
            vec![ai],
            Some(Box::new(move |g, _vals, sink| {
                sink(ai, roll2d_arr(g, -dy, -dx));
            })),
        )
    }

    /// Window partition: `[N,C,H,W] -> [N*nwy*nwx, win*win, C]`.
    pub fn win_partition(&mut self, a: Var, win: usize) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x.dim();
        assert!(h % win == 0 && w % win == 0, "win_partition: size not divisible");
        let (nwy, nwx) = (h / win, w / win);
        let mut out = ndarray::Array3::<f32>::zeros((n * nwy * nwx, win * win, c));
        for ni in 0..n {
            for wy in 0..nwy {
                for wx in 0..nwx {
                    let grp = (ni * nwy + wy) * nwx + wx;
                    for ty in 0..win {
                        for tx in 0..win {
                            for ci in 0..c {
                                out[[grp, ty * win + tx, ci]] =
                                    x[[ni, ci, wy * win + ty, wx * win + tx]];
                            }
                        }
                    }
                }
            }
        }
        let ai = a.0;
        self.push(
            out.into_dyn(),
            vec![ai],
            Some(Box::new(move |g, _vals, sink| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                for ni in 0..n {
                    for wy in 0..nwy {
                        for wx in 0..nwx {
                            let grp = (ni * nwy + wy) * nwx + wx;
                            for ty in 0..win {
                                for tx in 0..win {
                                    for ci in 0..c {
                                        dx[[ni, ci, wy * win + ty, wx * win + tx]] =
                                            g3[[grp, ty * win + tx, ci]];
                                    }
                                }
                            }
                        }
                    }
                }
                sink(ai, dx.into_dyn());
            })),
        )
    }

    /// Inverse of [`Tape::win_partition`].
    pub fn win_reverse(&mut self, a: Var, n: usize, c: usize, h: usize, w: usize, win: usize) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let (nwy, nwx) = (h / win, w / win);
        assert_eq!(x.dim(), (n * nwy * nwx, win * win, c), "win_reverse: shape");
        let mut out = Array4::<f32>::zeros((n, c, h, w));
        for ni in 0..n {
            for wy in 0..nwy {
                for wx in 0..nwx {
                    let grp = (ni * nwy + wy) * nwx + wx;
                    for ty in 0..win {
                        for tx in 0..win {
                            for ci in 0..c {
                                out[[ni, ci, wy * win + ty, wx * win + tx]] =
                                    x[[grp, ty * win + tx, ci]];
                            }
                        }
                    }
                }
            }
        }
        let ai = a.0;
        self.push(
            out.into_dyn(),
            vec![ai],
            Some(Box::new(move |g, _vals, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = ndarray::Array3::<f32>::zeros((n * nwy * nwx, win * win, c));
                for ni in 0..n {
                    for wy in 0..nwy {
                        for wx in 0..nwx {
                            let grp = (ni * nwy + wy) * nwx + wx;
                            for ty in 0..win {
                                for tx in 0..win {
                                    for ci in 0..c {
                                        dx[[grp, ty * win + tx, ci]] =
                                            g4[[ni, ci, wy * win + ty, wx * win + tx]];
                                    }
                                }
                            }
                        }
                    }
                }
                sink(ai, dx.into_dyn());
            })),
        )
    }
}

use ndarray::Ix3;

pub(crate) fn squeeze2_arr(x: &ArrayD<f32>) -> ArrayD<f32> {
    let x = x.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "squeeze2: odd spatial size");
    let mut out = Array4::<f32>::zeros((n, c * 4, h / 2, w / 2));
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let oc = ci * 4 + dy * 2 + dx;
                    for y in 0..h / 2 {
                        for xq in 0..w / 2 {
                            out[[ni, oc, y, xq]] = x[[ni, ci, 2 * y + dy, 2 * xq + dx]];
                        }
                    }
                }
            }
        }
    }
    out.into_dyn()
}

pub(crate) fn unsqueeze2_arr(x: &ArrayD<f32>) -> ArrayD<f32> {
    let x = x.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c4, h, w) = x.dim();
    assert!(c4 % 4 == 0, "unsqueeze2: channels not divisible by 4");
    let c = c4 / 4;
    let mut out = Array4::<f32>::zeros((n, c, h * 2, w * 2));
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let ic = ci * 4 + dy * 2 + dx;
                    for y in 0..h {
                        for xq in 0..w {
                            out[[ni, ci, 2 * y + dy, 2 * xq + dx]] = x[[ni, ic, y, xq]];
                        }
                    }
                }
            }
        }
    }
    out.into_dyn()
}

fn roll2d_arr(x: &ArrayD<f32>, dy: isize, dx: isize) -> ArrayD<f32> {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = x4.dim();
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    let (h_i, w_i) = (h as isize, w as isize);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let sy = (((y as isize - dy) % h_i) + h_i) % h_i;
                for xq in 0..w {
                    let sx = (((xq as isize - dx) % w_i) + w_i) % w_i;
                    out[[ni, ci, y, xq]] = x4[[ni, ci, sy as usize, sx as usize]];
                }
            }
        }
    }
    out.into_dyn()
}

/// (low index, high index, weight of high tap) per output coordinate.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let src = src.clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}
