use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix3};

use super::tape::{Tape, Var};

fn unary(
    tape: &mut Tape,
    a: Var,
    value: ArrayD<f32>,
    back: impl Fn(&ArrayD<f32>, &[ArrayD<f32>]) -> ArrayD<f32> + 'static,
) -> Var {
    let a_id = a.0;
    tape.push(
        value,
        vec![a_id],
        Some(Box::new(move |g, vals, sink| sink(a_id, back(g, vals)))),
    )
}

impl Tape {
    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let (ai, bi) = (a.0, b.0);
        self.push(
            v,
            vec![ai, bi],
            Some(Box::new(move |g, _vals, sink| {
                sink(ai, g.clone());
                sink(bi, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        let (ai, bi) = (a.0, b.0);
        self.push(
            v,
            vec![ai, bi],
            Some(Box::new(move |g, _vals, sink| {
                sink(ai, g.clone());
                sink(bi, -g);
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        let (ai, bi) = (a.0, b.0);
        self.push(
            v,
            vec![ai, bi],
            Some(Box::new(move |g, vals, sink| {
                sink(ai, g * &vals[bi]);
                sink(bi, g * &vals[ai]);
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div: shape mismatch");
        let v = self.value(a) / self.value(b);
        let (ai, bi) = (a.0, b.0);
        self.push(
            v,
            vec![ai, bi],
            Some(Box::new(move |g, vals, sink| {
                sink(ai, g / &vals[bi]);
                let b2 = &vals[bi] * &vals[bi];
                sink(bi, -(g * &vals[ai]) / &b2);
            })),
        )
    }

    // ---- scalar ----

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let v = self.value(a) + c;
        unary(self, a, v, |g, _| g.clone())
    }

    pub fn mul_scalar(&mut self, a: Var, c: f32) -> Var {
        let v = self.value(a) * c;
        unary(self, a, v, move |g, _| g * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    // ---- unary nonlinearities ----

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f32::exp);
        let out_id = self.vals.len();
        unary(self, a, v, move |g, vals| g * &vals[out_id])
    }

    /// ln|x|; gradient 1/x. Used for scale log-determinants.
    pub fn ln_abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.abs().ln());
        let ai = a.0;
        unary(self, a, v, move |g, vals| g / &vals[ai])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f32::tanh);
        let out_id = self.vals.len();
        unary(self, a, v, move |g, vals| {
            let y = &vals[out_id];
            g * &y.mapv(|t| 1.0 - t * t)
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let out_id = self.vals.len();
        unary(self, a, v, move |g, vals| {
            let y = &vals[out_id];
            g * &y.mapv(|s| s * (1.0 - s))
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let ai = a.0;
        unary(self, a, v, move |g, vals| {
            let mask = vals[ai].mapv(|x| if x > 0.0 { 1.0 } else { slope });
            g * &mask
        })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f32::abs);
        let ai = a.0;
        unary(self, a, v, move |g, vals| {
            let sign = vals[ai].mapv(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            g * &sign
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let ai = a.0;
        unary(self, a, v, move |g, vals| g * &(&vals[ai] * 2.0))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / x);
        let out_id = self.vals.len();
        unary(self, a, v, move |g, vals| {
            let y = &vals[out_id];
            -(g * &(y * y))
        })
    }

    /// tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f32 = 0.797_884_6; // sqrt(2/pi)
        const K: f32 = 0.044_715;
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (C * (x + K * x * x * x)).tanh()));
        let ai = a.0;
        unary(self, a, v, move |g, vals| {
            let d = vals[ai].mapv(|x| {
                let u = C * (x + K * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x)
            });
            g * &d
        })
    }

    // ---- reductions (f64 accumulation) ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|&x| x as f64).sum();
        let shape = self.value(a).raw_dim();
        let v = ArrayD::from_elem(ndarray::IxDyn(&[1]), s as f32);
        unary(self, a, v, move |g, _| {
            ArrayD::from_elem(shape.clone(), g[[0]])
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).iter().map(|&x| x as f64).sum();
        let shape = self.value(a).raw_dim();
        let v = ArrayD::from_elem(ndarray::IxDyn(&[1]), (s / n) as f32);
        unary(self, a, v, move |g, _| {
            ArrayD::from_elem(shape.clone(), g[[0]] / n as f32)
        })
    }

    /// Sum over all axes but the first; `[N, ...] -> [N]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let arr = self.value(a);
        let n = arr.shape()[0];
        let mut out = Array1::<f32>::zeros(n);
        for (i, row) in arr.axis_iter(Axis(0)).enumerate() {
            out[i] = row.iter().map(|&x| x as f64).sum::<f64>() as f32;
        }
        let shape = arr.raw_dim();
        unary(self, a, out.into_dyn(), move |g, _| {
            let mut dx = ArrayD::zeros(shape.clone());
            for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                row.fill(g[[i]]);
            }
            dx
        })
    }

    /// Add a `[1]`-shaped scalar var to every entry of `x`.
    pub fn add_bscalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), &[1], "add_bscalar: scalar shape");
        let (xi, si) = (x.0, s.0);
        let sv = self.value(s)[[0]];
        let v = self.value(x) + sv;
        self.push(
            v,
            vec![xi, si],
            Some(Box::new(move |g, _vals, sink| {
                sink(xi, g.clone());
                let total: f64 = g.iter().map(|&t| t as f64).sum();
                sink(si, ArrayD::from_elem(ndarray::IxDyn(&[1]), total as f32));
            })),
        )
    }

    // ---- axis-1 broadcasts (per-channel / per-column affine) ----

    pub fn mul_axis1(&mut self, x: Var, s: Var) -> Var {
        let (xi, si) = (x.0, s.0);
        let c = self.shape(x)[1];
        assert_eq!(self.shape(s), &[c], "mul_axis1: scale shape");
        let mut v = self.value(x).clone();
        let sv = self.value(s).clone();
        for (k, mut lane) in v.axis_iter_mut(Axis(1)).enumerate() {
            lane.mapv_inplace(|t| t * sv[[k]]);
        }
        self.push(
            v,
            vec![xi, si],
            Some(Box::new(move |g, vals, sink| {
                let sv = &vals[si];
                let mut dx = g.clone();
                for (k, mut lane) in dx.axis_iter_mut(Axis(1)).enumerate() {
                    lane.mapv_inplace(|t| t * sv[[k]]);
                }
                sink(xi, dx);
                let xv = &vals[xi];
                let mut ds = ArrayD::zeros(sv.raw_dim());
                for k in 0..xv.shape()[1] {
                    let gx = g.index_axis(Axis(1), k);
                    let xx = xv.index_axis(Axis(1), k);
                    let mut acc = 0.0f64;
                    ndarray::Zip::from(&gx).and(&xx).for_each(|&gv, &xvv| {
                        acc += gv as f64 * xvv as f64;
                    });
                    ds[[k]] = acc as f32;
                }
                sink(si, ds);
            })),
        )
    }

    pub fn add_axis1(&mut self, x: Var, b: Var) -> Var {
        let (xi, bi) = (x.0, b.0);
        let c = self.shape(x)[1];
        assert_eq!(self.shape(b), &[c], "add_axis1: bias shape");
        let mut v = self.value(x).clone();
        let bv = self.value(b).clone();
        for (k, mut lane) in v.axis_iter_mut(Axis(1)).enumerate() {
            lane.mapv_inplace(|t| t + bv[[k]]);
        }
        self.push(
            v,
            vec![xi, bi],
            Some(Box::new(move |g, vals, sink| {
                sink(xi, g.clone());
                let mut db = ArrayD::zeros(vals[bi].raw_dim());
                for k in 0..g.shape()[1] {
                    let gx = g.index_axis(Axis(1), k);
                    db[[k]] = gx.iter().map(|&t| t as f64).sum::<f64>() as f32;
                }
                sink(bi, db);
            })),
        )
    }

    // ---- dense linear algebra ----

    /// `[N, D] x [D, M] -> [N, M]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (xi, wi) = (x.0, w.0);
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix2>().unwrap();
        let v = xv.dot(&wv).into_dyn();
        self.push(
            v,
            vec![xi, wi],
            Some(Box::new(move |g, vals, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xv = vals[xi].view().into_dimensionality::<Ix2>().unwrap();
                let wv = vals[wi].view().into_dimensionality::<Ix2>().unwrap();
                sink(xi, g2.dot(&wv.t()).into_dyn());
                sink(wi, xv.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// Batched `[B, N, K] x [B, K, M] -> [B, N, M]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (a.0, b.0);
        let av = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix3>().unwrap();
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm: batch mismatch");
        assert_eq!(av.shape()[2], bv.shape()[1], "bmm: inner dim mismatch");
        let (nb, n, m) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
        let mut v = ndarray::Array3::<f32>::zeros((nb, n, m));
        for i in 0..nb {
            let prod = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            v.index_axis_mut(Axis(0), i).assign(&prod);
        }
        self.push(
            v.into_dyn(),
            vec![ai, bi],
            Some(Box::new(move |g, vals, sink| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let av = vals[ai].view().into_dimensionality::<Ix3>().unwrap();
                let bv = vals[bi].view().into_dimensionality::<Ix3>().unwrap();
                let mut da = ndarray::Array3::<f32>::zeros(av.dim());
                let mut db = ndarray::Array3::<f32>::zeros(bv.dim());
                for i in 0..g3.shape()[0] {
                    let gi = g3.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
                }
                sink(ai, da.into_dyn());
                sink(bi, db.into_dyn());
            })),
        )
    }

    /// Batched `a x b^T`: `[B, N, K] x [B, M, K] -> [B, N, M]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (a.0, b.0);
        let av = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix3>().unwrap();
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm_nt: batch mismatch");
        assert_eq!(av.shape()[2], bv.shape()[2], "bmm_nt: inner dim mismatch");
        let (nb, n, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut v = ndarray::Array3::<f32>::zeros((nb, n, m));
        for i in 0..nb {
            let prod = av
                .index_axis(Axis(0), i)
                .dot(&bv.index_axis(Axis(0), i).t());
            v.index_axis_mut(Axis(0), i).assign(&prod);
        }
        self.push(
            v.into_dyn(),
            vec![ai, bi],
            Some(Box::new(move |g, vals, sink| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let av = vals[ai].view().into_dimensionality::<Ix3>().unwrap();
                let bv = vals[bi].view().into_dimensionality::<Ix3>().unwrap();
                let mut da = ndarray::Array3::<f32>::zeros(av.dim());
                let mut db = ndarray::Array3::<f32>::zeros(bv.dim());
                for i in 0..g3.shape()[0] {
                    let gi = g3.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&bv.index_axis(Axis(0), i)));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&gi.t().dot(&av.index_axis(Axis(0), i)));
                }
                sink(ai, da.into_dyn());
                sink(bi, db.into_dyn());
            })),
        )
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old: Vec<usize> = self.value(a).shape().to_vec();
        let v = reshape_rowmajor(self.value(a), shape);
        unary(self, a, v, move |g, _| reshape_rowmajor(g, &old))
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .t()
            .to_owned()
            .into_dyn();
        unary(self, a, v, |g, _| {
            g.view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .t()
                .to_owned()
                .into_dyn()
        })
    }

    /// Concatenate along axis 1 (channels / feature columns).
    pub fn concat_axis1(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_axis1");
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        self.push(
            v,
            ids.clone(),
            Some(Box::new(move |g, _vals, sink| {
                let mut start = 0;
                for (&id, &len) in ids.iter().zip(&sizes) {
                    let piece = g
                        .slice_axis(Axis(1), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    sink(id, piece);
                    start += len;
                }
            })),
        )
    }

    /// Slice `[.., start..start+len, ..]` along axis 1.
    pub fn narrow_axis1(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self
            .value(a)
            .slice_axis(Axis(1), ndarray::Slice::from(start..start + len))
            .to_owned();
        let full = self.value(a).raw_dim();
        unary(self, a, v, move |g, _| {
            let mut dx = ArrayD::<f32>::zeros(full.clone());
            dx.slice_axis_mut(Axis(1), ndarray::Slice::from(start..start + len))
                .assign(g);
            dx
        })
    }

    /// Tile-broadcast add: `x: [K*R, ...] + b: [R, ...]` with b repeated K times
    /// along axis 0.
    pub fn add_tile0(&mut self, x: Var, b: Var) -> Var {
        let (xi, bi) = (x.0, b.0);
        let r = self.shape(b)[0];
        let total = self.shape(x)[0];
        assert!(total % r == 0, "add_tile0: axis0 not a multiple");
        let mut v = self.value(x).clone();
        let bv = self.value(b).clone();
        for (i, mut row) in v.axis_iter_mut(Axis(0)).enumerate() {
            row += &bv.index_axis(Axis(0), i % r);
        }
        self.push(
            v,
            vec![xi, bi],
            Some(Box::new(move |g, vals, sink| {
                sink(xi, g.clone());
                let mut db = ArrayD::<f32>::zeros(vals[bi].raw_dim());
                for (i, row) in g.axis_iter(Axis(0)).enumerate() {
                    let mut slot = db.index_axis_mut(Axis(0), i % r);
                    slot += &row;
                }
                sink(bi, db);
            })),
        )
    }

    // ---- normalization / attention ----

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let arr = self.value(a);
        let last = arr.ndim() - 1;
        let mut v = arr.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            row.mapv_inplace(|t| (t - m).exp());
            let s: f32 = row.sum();
            row.mapv_inplace(|t| t / s);
        }
        let _ = last;
        let out_id = self.vals.len();
        unary(self, a, v, move |g, vals| {
            let y = &vals[out_id];
            let mut dx = g * y;
            // subtract y * <g, y> per row
            let mut dots = dx.clone();
            for (mut drow, yrow) in dots.rows_mut().into_iter().zip(y.rows()) {
                let s: f32 = drow.sum();
                drow.assign(&yrow.mapv(|t| t * s));
            }
            dx -= &dots;
            dx
        })
    }

    /// LayerNorm over the last axis with affine params gamma/beta of shape [D].
    pub fn layer_norm_lastdim(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(gamma), &[d]);
        assert_eq!(self.shape(beta), &[d]);
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let mut v = xv.clone();
        for mut row in v.rows_mut() {
            let mean = row.iter().map(|&t| t as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&t| {
                    let c = t as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            for (k, t) in row.iter_mut().enumerate() {
                let xh = ((*t as f64 - mean) * inv) as f32;
                *t = gv[[k]] * xh + bv[[k]];
            }
        }
        self.push(
            v,
            vec![xi, gi, bi],
            Some(Box::new(move |g, vals, sink| {
                let xv = &vals[xi];
                let gv = &vals[gi];
                let mut dx = xv.clone();
                let mut dgamma = ArrayD::<f32>::zeros(gv.raw_dim());
                let mut dbeta = ArrayD::<f32>::zeros(gv.raw_dim());
                for (grow, (xrow, mut dxrow)) in g
                    .rows()
                    .into_iter()
                    .zip(xv.rows().into_iter().zip(dx.rows_mut()))
                {
                    let d = xrow.len();
                    let mean = xrow.iter().map(|&t| t as f64).sum::<f64>() / d as f64;
                    let var = xrow
                        .iter()
                        .map(|&t| {
                            let c = t as f64 - mean;
                            c * c
                        })
                        .sum::<f64>()
                        / d as f64;
                    let inv = 1.0 / (var + eps as f64).sqrt();
                    let xhat: Vec<f64> =
                        xrow.iter().map(|&t| (t as f64 - mean) * inv).collect();
                    let gg: Vec<f64> = grow
                        .iter()
                        .enumerate()
                        .map(|(k, &t)| t as f64 * gv[[k]] as f64)
                        .collect();
                    let mg = gg.iter().sum::<f64>() / d as f64;
                    let mgx = gg
                        .iter()
                        .zip(&xhat)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    for k in 0..d {
                        dxrow[k] = ((gg[k] - mg - xhat[k] * mgx) * inv) as f32;
                        dgamma[[k]] += (grow[k] as f64 * xhat[k]) as f32;
                        dbeta[[k]] += grow[k];
                    }
                }
                sink(xi, dx);
                sink(gi, dgamma);
                sink(bi, dbeta);
            })),
        )
    }
}

/// Row-major reshape that tolerates any input memory layout.
fn reshape_rowmajor(a: &ArrayD<f32>, shape: &[usize]) -> ArrayD<f32> {
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), a.iter().cloned().collect())
        .expect("reshape: size mismatch")
}

/// Reference matmul used only in tests.
#[allow(dead_code)]
pub(crate) fn naive_matmul(a: &Array2<f32>, b: &Array2<f32>) -> Array2<f32> {
    let (n, k) = a.dim();
    let (_, m) = b.dim();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0f64;
            for t in 0..k {
                acc += a[[i, t]] as f64 * b[[t, j]] as f64;
            }
            out[[i, j]] = acc as f32;
        }
    }
    out
}
