//! Differentiable operations on [`Tensor`].
//!
//! Elementwise arithmetic, per-channel / per-item broadcasts for `[B,C,H,W]`
//! feature maps, reductions, row softmax ops for logits, row selection for
//! embedding tables and bilinear resize for activation maps.

use ndarray::{concatenate, ArrayD, Axis, Dimension, Ix2, IxDyn};

use super::{BackFn, Tensor};

fn bshape(shape: &[usize], keep: usize) -> IxDyn {
    // Shape with size 1 everywhere except `keep`, used to broadcast vectors.
    let mut s = vec![1usize; shape.len()];
    s[keep] = shape[keep];
    IxDyn(&s)
}

impl Tensor {
    // ---- elementwise binary -------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.assert_same_tape(other, "add");
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let out = self.data.as_ref() + other.data.as_ref();
        let (a, b) = (self.id, other.id);
        let back: BackFn = Box::new(move |g| vec![(a, g.clone()), (b, g.clone())]);
        Tensor::from_op(&self.tape, out, back)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.assert_same_tape(other, "sub");
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let out = self.data.as_ref() - other.data.as_ref();
        let (a, b) = (self.id, other.id);
        let back: BackFn = Box::new(move |g| vec![(a, g.clone()), (b, -g)]);
        Tensor::from_op(&self.tape, out, back)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.assert_same_tape(other, "mul");
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let out = self.data.as_ref() * other.data.as_ref();
        let (a, b) = (self.id, other.id);
        let (da, db) = (self.data.clone(), other.data.clone());
        let back: BackFn =
            Box::new(move |g| vec![(a, g * db.as_ref()), (b, g * da.as_ref())]);
        Tensor::from_op(&self.tape, out, back)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.assert_same_tape(other, "div");
        assert_eq!(self.shape(), other.shape(), "div: shape mismatch");
        let out = self.data.as_ref() / other.data.as_ref();
        let (a, b) = (self.id, other.id);
        let (da, db) = (self.data.clone(), other.data.clone());
        let back: BackFn = Box::new(move |g| {
            let ga = g / db.as_ref();
            let gb = -(g * da.as_ref()) / (db.as_ref() * db.as_ref());
            vec![(a, ga), (b, gb)]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    // ---- unary / scalar -----------------------------------------------------

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data.as_ref() + c;
        let a = self.id;
        let back: BackFn = Box::new(move |g| vec![(a, g.clone())]);
        Tensor::from_op(&self.tape, out, back)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let out = self.data.as_ref() * c;
        let a = self.id;
        let back: BackFn = Box::new(move |g| vec![(a, g * c)]);
        Tensor::from_op(&self.tape, out, back)
    }

    pub fn square(&self) -> Tensor {
        let out = self.data.as_ref() * self.data.as_ref();
        let a = self.id;
        let da = self.data.clone();
        let back: BackFn = Box::new(move |g| vec![(a, 2.0 * (g * da.as_ref()))]);
        Tensor::from_op(&self.tape, out, back)
    }

    pub fn sqrt(&self) -> Tensor {
        let out = self.data.mapv(f64::sqrt);
        let a = self.id;
        let o = out.clone();
        let back: BackFn = Box::new(move |g| vec![(a, 0.5 * (g / &o))]);
        Tensor::from_op(&self.tape, out, back)
    }

    pub fn recip(&self) -> Tensor {
        let out = self.data.mapv(f64::recip);
        let a = self.id;
        let o = out.clone();
        let back: BackFn = Box::new(move |g| vec![(a, -(g * &(&o * &o)))]);
        Tensor::from_op(&self.tape, out, back)
    }

    pub fn ln(&self) -> Tensor {
        let out = self.data.mapv(f64::ln);
        let a = self.id;
        let da = self.data.clone();
        let back: BackFn = Box::new(move |g| vec![(a, g / da.as_ref())]);
        Tensor::from_op(&self.tape, out, back)
    }

    pub fn exp(&self) -> Tensor {
        let out = self.data.mapv(f64::exp);
        let a = self.id;
        let o = out.clone();
        let back: BackFn = Box::new(move |g| vec![(a, g * &o)]);
        Tensor::from_op(&self.tape, out, back)
    }

    pub fn relu(&self) -> Tensor {
        let out = self.data.mapv(|v| v.max(0.0));
        let a = self.id;
        let da = self.data.clone();
        let back: BackFn = Box::new(move |g| {
            let mut gx = g.clone();
            gx.zip_mut_with(da.as_ref(), |gv, &xv| {
                if xv <= 0.0 {
                    *gv = 0.0;
                }
            });
            vec![(a, gx)]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    pub fn silu(&self) -> Tensor {
        let sig = self.data.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let out = self.data.as_ref() * &sig;
        let a = self.id;
        let da = self.data.clone();
        let back: BackFn = Box::new(move |g| {
            let mut gx = g.clone();
            gx.zip_mut_with(da.as_ref(), |gv, &xv| {
                let s = 1.0 / (1.0 + (-xv).exp());
                *gv *= s * (1.0 + xv * (1.0 - s));
            });
            vec![(a, gx)]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    /// `max(x, c)`; gradient passes only where `x > c`.
    pub fn clamp_min(&self, c: f64) -> Tensor {
        let out = self.data.mapv(|v| v.max(c));
        let a = self.id;
        let da = self.data.clone();
        let back: BackFn = Box::new(move |g| {
            let mut gx = g.clone();
            gx.zip_mut_with(da.as_ref(), |gv, &xv| {
                if xv <= c {
                    *gv = 0.0;
                }
            });
            vec![(a, gx)]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum_all(&self) -> Tensor {
        let out = ndarray::arr0(self.data.sum()).into_dyn();
        let a = self.id;
        let shape = IxDyn(self.shape());
        let back: BackFn = Box::new(move |g| {
            let gv = *g.iter().next().unwrap();
            vec![(a, ArrayD::from_elem(shape.clone(), gv))]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.data.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Per-channel mean over batch and spatial axes: `[B,C,H,W] -> [C]`.
    pub fn mean_bhw(&self) -> Tensor {
        assert_eq!(self.data.ndim(), 4, "mean_bhw: expects [B,C,H,W]");
        let (b, _, h, w) = dims4(self.shape());
        let n = (b * h * w) as f64;
        let sum = self
            .data
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .sum_axis(Axis(0));
        let out = (sum / n).into_dyn();
        let a = self.id;
        let shape = IxDyn(self.shape());
        let back: BackFn = Box::new(move |g| {
            let gb = g
                .to_shape(bshape(shape.slice(), 1))
                .unwrap()
                .broadcast(shape.clone())
                .unwrap()
                .to_owned()
                / n;
            vec![(a, gb)]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    /// Sum over channels: `[B,C,H,W] -> [B,H,W]`.
    pub fn sum_channels(&self) -> Tensor {
        assert_eq!(self.data.ndim(), 4, "sum_channels: expects [B,C,H,W]");
        let out = self.data.sum_axis(Axis(1)).into_dyn();
        let a = self.id;
        let shape = IxDyn(self.shape());
        let back: BackFn = Box::new(move |g| {
            let (b, c, h, w) = dims4(shape.slice());
            let gb = g
                .to_shape(IxDyn(&[b, 1, h, w]))
                .unwrap()
                .broadcast(IxDyn(&[b, c, h, w]))
                .unwrap()
                .to_owned();
            vec![(a, gb)]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    /// Sum over all trailing axes per item: `[B, ...] -> [B]`.
    pub fn sum_per_item(&self) -> Tensor {
        let b = self.shape()[0];
        let rest: usize = self.shape()[1..].iter().product();
        let flat = self.data.to_shape((b, rest)).unwrap().to_owned();
        let out = flat.sum_axis(Axis(1)).into_dyn();
        let a = self.id;
        let shape = IxDyn(self.shape());
        let back: BackFn = Box::new(move |g| {
            let mut gb = ArrayD::zeros(shape.clone());
            let gflat = g.as_slice().unwrap();
            let n: usize = shape.slice()[1..].iter().product();
            for (i, v) in gb.as_slice_mut().unwrap().iter_mut().enumerate() {
                *v = gflat[i / n];
            }
            vec![(a, gb)]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    /// Spatial mean per map: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&self) -> Tensor {
        assert_eq!(self.data.ndim(), 4, "global_avg_pool: expects [B,C,H,W]");
        let (_, _, h, w) = dims4(self.shape());
        let n = (h * w) as f64;
        let out = (self.data.sum_axis(Axis(3)).sum_axis(Axis(2)) / n).into_dyn();
        let a = self.id;
        let shape = IxDyn(self.shape());
        let back: BackFn = Box::new(move |g| {
            let (b, c, h, w) = dims4(shape.slice());
            let gb = g
                .to_shape(IxDyn(&[b, c, 1, 1]))
                .unwrap()
                .broadcast(IxDyn(&[b, c, h, w]))
                .unwrap()
                .to_owned()
                / n;
            vec![(a, gb)]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    // ---- broadcasts ---------------------------------------------------------

    /// `[B,C,H,W] + [C]` broadcast over batch and space.
    pub fn add_c(&self, v: &Tensor) -> Tensor {
        self.assert_same_tape(v, "add_c");
        assert_eq!(self.data.ndim(), 4, "add_c: expects [B,C,H,W]");
        assert_eq!(v.shape(), [self.shape()[1]], "add_c: channel mismatch");
        let vb = v.data.to_shape(bshape(self.shape(), 1)).unwrap();
        let out = self.data.as_ref() + &vb;
        let (a, b) = (self.id, v.id);
        let back: BackFn = Box::new(move |g| {
            let gv = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            vec![(a, g.clone()), (b, gv.into_dyn())]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    /// `[B,C,H,W] * [C]` broadcast over batch and space.
    pub fn mul_c(&self, v: &Tensor) -> Tensor {
        self.assert_same_tape(v, "mul_c");
        assert_eq!(self.data.ndim(), 4, "mul_c: expects [B,C,H,W]");
        assert_eq!(v.shape(), [self.shape()[1]], "mul_c: channel mismatch");
        let vb = v.data.to_shape(bshape(self.shape(), 1)).unwrap().to_owned();
        let out = self.data.as_ref() * &vb;
        let (a, b) = (self.id, v.id);
        let (da, dv) = (self.data.clone(), vb);
        let back: BackFn = Box::new(move |g| {
            let ga = g * &dv;
            let gv = (g * da.as_ref())
                .sum_axis(Axis(3))
                .sum_axis(Axis(2))
                .sum_axis(Axis(0));
            vec![(a, ga), (b, gv.into_dyn())]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    /// `[B,C,H,W] + [B,C]` broadcast over space (per-item channel bias).
    pub fn add_bc(&self, v: &Tensor) -> Tensor {
        self.assert_same_tape(v, "add_bc");
        assert_eq!(self.data.ndim(), 4, "add_bc: expects [B,C,H,W]");
        assert_eq!(
            v.shape(),
            &self.shape()[..2],
            "add_bc: leading dims mismatch"
        );
        let (b, c, _, _) = dims4(self.shape());
        let vb = v.data.to_shape(IxDyn(&[b, c, 1, 1])).unwrap();
        let out = self.data.as_ref() + &vb;
        let (a, bid) = (self.id, v.id);
        let back: BackFn = Box::new(move |g| {
            let gv = g.sum_axis(Axis(3)).sum_axis(Axis(2));
            vec![(a, g.clone()), (bid, gv.into_dyn())]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    /// `[B,C,H,W] * [B,C]` broadcast over space (per-item channel weights).
    pub fn mul_bc(&self, v: &Tensor) -> Tensor {
        self.assert_same_tape(v, "mul_bc");
        assert_eq!(self.data.ndim(), 4, "mul_bc: expects [B,C,H,W]");
        assert_eq!(
            v.shape(),
            &self.shape()[..2],
            "mul_bc: leading dims mismatch"
        );
        let (b, c, _, _) = dims4(self.shape());
        let vb = v.data.to_shape(IxDyn(&[b, c, 1, 1])).unwrap().to_owned();
        let out = self.data.as_ref() * &vb;
        let (a, bid) = (self.id, v.id);
        let (da, dv) = (self.data.clone(), vb);
        let back: BackFn = Box::new(move |g| {
            let ga = g * &dv;
            let gv = (g * da.as_ref()).sum_axis(Axis(3)).sum_axis(Axis(2));
            vec![(a, ga), (bid, gv.into_dyn())]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    /// `[B, ...] * [B]` broadcast over all trailing axes.
    pub fn mul_per_item(&self, v: &Tensor) -> Tensor {
        self.assert_same_tape(v, "mul_per_item");
        assert_eq!(v.shape(), [self.shape()[0]], "mul_per_item: batch mismatch");
        let vb = v.data.to_shape(bshape(self.shape(), 0)).unwrap().to_owned();
        let out = self.data.as_ref() * &vb;
        let (a, bid) = (self.id, v.id);
        let (da, dv) = (self.data.clone(), vb);
        let back: BackFn = Box::new(move |g| {
            let ga = g * &dv;
            let b = da.shape()[0];
            let rest: usize = da.shape()[1..].iter().product();
            let prod = g * da.as_ref();
            let gv = prod
                .to_shape((b, rest))
                .unwrap()
                .sum_axis(Axis(1))
                .into_dyn();
            vec![(a, ga), (bid, gv)]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    // ---- linear algebra -----------------------------------------------------

    /// 2-D matrix product `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.assert_same_tape(other, "matmul");
        let a2 = self
            .data
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul: lhs not 2-D");
        let b2 = other
            .data
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul: rhs not 2-D");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dim mismatch");
        let out = a2.dot(&b2).into_dyn();
        let (a, b) = (self.id, other.id);
        let (da, db) = (self.data.clone(), other.data.clone());
        let back: BackFn = Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let a2 = da.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = db.view().into_dimensionality::<Ix2>().unwrap();
            let ga = g2.dot(&b2.t()).into_dyn();
            let gb = a2.t().dot(&g2).into_dyn();
            vec![(a, ga), (b, gb)]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    /// `[B,N] + [N]` broadcast over rows.
    pub fn add_rowvec(&self, v: &Tensor) -> Tensor {
        self.assert_same_tape(v, "add_rowvec");
        assert_eq!(self.data.ndim(), 2, "add_rowvec: expects [B,N]");
        assert_eq!(v.shape(), [self.shape()[1]], "add_rowvec: width mismatch");
        let vb = v.data.to_shape(IxDyn(&[1, v.shape()[0]])).unwrap();
        let out = self.data.as_ref() + &vb;
        let (a, b) = (self.id, v.id);
        let back: BackFn = Box::new(move |g| {
            let gv = g.sum_axis(Axis(0));
            vec![(a, g.clone()), (b, gv.into_dyn())]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    /// Row lookup `table[ids[b]]`: `[V,D] x ids -> [B,D]`.
    pub fn select_rows(&self, ids: &[usize]) -> Tensor {
        assert_eq!(self.data.ndim(), 2, "select_rows: expects [V,D]");
        let (v, d) = (self.shape()[0], self.shape()[1]);
        for &i in ids {
            assert!(i < v, "select_rows: id {i} out of range {v}");
        }
        let mut out = ArrayD::zeros(IxDyn(&[ids.len(), d]));
        for (b, &i) in ids.iter().enumerate() {
            out.index_axis_mut(Axis(0), b)
                .assign(&self.data.index_axis(Axis(0), i));
        }
        let a = self.id;
        let ids = ids.to_vec();
        let back: BackFn = Box::new(move |g| {
            let mut gt = ArrayD::zeros(IxDyn(&[v, d]));
            for (b, &i) in ids.iter().enumerate() {
                let mut row = gt.index_axis_mut(Axis(0), i);
                row += &g.index_axis(Axis(0), b);
            }
            vec![(a, gt)]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    // ---- softmax family -----------------------------------------------------

    /// Numerically stable row-wise log-softmax on `[B,C]`.
    pub fn log_softmax2d(&self) -> Tensor {
        assert_eq!(self.data.ndim(), 2, "log_softmax2d: expects [B,C]");
        let x = self.data.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            row.mapv_inplace(|v| v - lse);
        }
        let out = out.into_dyn();
        let a = self.id;
        let logp = out.clone();
        let back: BackFn = Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let lp = logp.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = g2.to_owned();
            for (mut grow, lrow) in gx.rows_mut().into_iter().zip(lp.rows()) {
                let gsum: f64 = grow.sum();
                for (gv, &l) in grow.iter_mut().zip(lrow.iter()) {
                    *gv -= l.exp() * gsum;
                }
            }
            vec![(a, gx.into_dyn())]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    /// Row-wise softmax on `[B,C]`.
    pub fn softmax2d(&self) -> Tensor {
        assert_eq!(self.data.ndim(), 2, "softmax2d: expects [B,C]");
        let x = self.data.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let out = out.into_dyn();
        let a = self.id;
        let sm = out.clone();
        let back: BackFn = Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let s2 = sm.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = g2.to_owned();
            for (mut grow, srow) in gx.rows_mut().into_iter().zip(s2.rows()) {
                let dot: f64 = grow.iter().zip(srow.iter()).map(|(g, s)| g * s).sum();
                for (gv, &s) in grow.iter_mut().zip(srow.iter()) {
                    *gv = s * (*gv - dot);
                }
            }
            vec![(a, gx.into_dyn())]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    /// Negative log-likelihood of targets under row log-probabilities,
    /// averaged over the batch.
    pub fn nll(&self, targets: &[usize]) -> Tensor {
        assert_eq!(self.data.ndim(), 2, "nll: expects [B,C] log-probs");
        let (b, c) = (self.shape()[0], self.shape()[1]);
        assert_eq!(targets.len(), b, "nll: target count mismatch");
        for &y in targets {
            assert!(y < c, "nll: target {y} out of range {c}");
        }
        let mut acc = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            acc -= self.data[[i, y]];
        }
        let out = ndarray::arr0(acc / b as f64).into_dyn();
        let a = self.id;
        let targets = targets.to_vec();
        let back: BackFn = Box::new(move |g| {
            let gv = *g.iter().next().unwrap();
            let mut gx = ArrayD::zeros(IxDyn(&[b, c]));
            for (i, &y) in targets.iter().enumerate() {
                gx[[i, y]] = -gv / b as f64;
            }
            vec![(a, gx)]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    // ---- structure ----------------------------------------------------------

    /// Transpose a 2-D tensor.
    pub fn transpose2d(&self) -> Tensor {
        assert_eq!(self.data.ndim(), 2, "transpose2d: expects [M,N]");
        let out = self
            .data
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .t()
            .to_owned()
            .into_dyn();
        let a = self.id;
        let back: BackFn = Box::new(move |g| {
            let gt = g
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .t()
                .to_owned()
                .into_dyn();
            vec![(a, gt)]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    /// Concatenate along the channel axis: `[B,C1,H,W] ++ [B,C2,H,W]`.
    pub fn concat_channels(&self, other: &Tensor) -> Tensor {
        self.assert_same_tape(other, "concat_channels");
        assert_eq!(self.data.ndim(), 4, "concat_channels: expects [B,C,H,W]");
        let c1 = self.shape()[1];
        let out = concatenate(Axis(1), &[self.data.view(), other.data.view()])
            .expect("concat_channels: incompatible shapes");
        let (a, b) = (self.id, other.id);
        let back: BackFn = Box::new(move |g| {
            let ga = g.slice_axis(Axis(1), ndarray::Slice::from(..c1)).to_owned();
            let gb = g.slice_axis(Axis(1), ndarray::Slice::from(c1..)).to_owned();
            vec![(a, ga), (b, gb)]
        });
        Tensor::from_op(&self.tape, out, back)
    }

    /// Bilinear resize of per-item maps `[B,H,W] -> [B,H2,W2]`.
    pub fn resize_bilinear(&self, h2: usize, w2: usize) -> Tensor {
        assert_eq!(self.data.ndim(), 3, "resize_bilinear: expects [B,H,W]");
        let (b, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if h == h2 && w == w2 {
            // Identity resize still records a node so the graph stays uniform.
            let out = self.data.as_ref().clone();
            let a = self.id;
            let back: BackFn = Box::new(move |g| vec![(a, g.clone())]);
            return Tensor::from_op(&self.tape, out, back);
        }
        let ty = axis_taps(h, h2);
        let tx = axis_taps(w, w2);
        let mut out = ArrayD::zeros(IxDyn(&[b, h2, w2]));
        for bi in 0..b {
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let v00 = self.data[[bi, y0, x0]];
                    let v01 = self.data[[bi, y0, x1]];
                    let v10 = self.data[[bi, y1, x0]];
                    let v11 = self.data[[bi, y1, x1]];
                    out[[bi, oy, ox]] = v00 * (1.0 - wy) * (1.0 - wx)
                        + v01 * (1.0 - wy) * wx
                        + v10 * wy * (1.0 - wx)
                        + v11 * wy * wx;
                }
            }
        }
        let a = self.id;
        let back: BackFn = Box::new(move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&[b, h, w]));
            for bi in 0..b {
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let gv = g[[bi, oy, ox]];
                        gx[[bi, y0, x0]] += gv * (1.0 - wy) * (1.0 - wx);
                        gx[[bi, y0, x1]] += gv * (1.0 - wy) * wx;
                        gx[[bi, y1, x0]] += gv * wy * (1.0 - wx);
                        gx[[bi, y1, x1]] += gv * wy * wx;
                    }
                }
            }
            vec![(a, gx)]
        });
        Tensor::from_op(&self.tape, out, back)
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

/// Source taps for bilinear interpolation along one axis (half-pixel centers).
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::fd;
    use super::super::Tape;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, ArrayD, IxDyn};
    use rand::Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::rng::seeded(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Finite-difference check for a scalar-valued graph builder.
    fn gradcheck<F>(shape: &[usize], seed: u64, f: F)
    where
        F: Fn(&Tape, &super::Tensor) -> super::Tensor,
    {
        let x0 = rand_arr(shape, seed);
        let eval = |x: &ArrayD<f64>| {
            let tape = Tape::new();
            let xt = tape.leaf(x.clone());
            f(&tape, &xt).item()
        };
        let tape = Tape::new();
        let xt = tape.leaf(x0.clone());
        let loss = f(&tape, &xt);
        let ad = loss.backward().wrt(&xt);
        let num = fd::finite_diff(eval, &x0, 1e-5);
        let err = fd::max_rel_err(&ad, &num);
        assert!(err < 1e-6, "gradcheck failed: rel err {err:.3e}");
    }

    #[test]
    fn elementwise_grads() {
        gradcheck(&[3, 4], 1, |_, x| {
            x.mul(&x.add_scalar(0.5)).silu().square().mean_all()
        });
        gradcheck(&[5], 2, |_, x| {
            x.exp().add_scalar(1.0).ln().sqrt().sum_all()
        });
        gradcheck(&[4], 3, |_, x| x.square().add_scalar(0.1).recip().sum_all());
        // shift away from the ReLU kink so finite differences stay clean
        gradcheck(&[2, 3], 4, |_, x| x.add_scalar(3.0).relu().square().sum_all());
        gradcheck(&[3, 3], 17, |_, x| x.clamp_min(0.2).sum_all());
    }

    #[test]
    fn broadcast_grads() {
        gradcheck(&[2, 3, 2, 2], 5, |tape, x| {
            let v = tape.leaf(arr1(&[0.3, -0.7, 1.1]).into_dyn());
            x.mul_c(&v).add_c(&v).mean_bhw().square().sum_all()
        });
        gradcheck(&[2, 3], 6, |tape, x| {
            let m = tape.leaf(rand_arr(&[2, 3, 2, 2], 60));
            m.mul_bc(x).add_bc(x).sum_all()
        });
        gradcheck(&[2], 7, |tape, x| {
            let m = tape.leaf(rand_arr(&[2, 3, 3], 70));
            m.mul_per_item(x).square().sum_all()
        });
    }

    #[test]
    fn matmul_and_rows_grads() {
        gradcheck(&[3, 4], 8, |tape, x| {
            let w = tape.leaf(rand_arr(&[4, 2], 80));
            let b = tape.leaf(arr1(&[0.1, -0.2]).into_dyn());
            x.matmul(&w).add_rowvec(&b).square().sum_all()
        });
        gradcheck(&[5, 3], 9, |_, x| {
            x.select_rows(&[4, 0, 2, 2]).square().sum_all()
        });
        gradcheck(&[3, 4], 18, |tape, x| {
            let w = tape.leaf(rand_arr(&[2, 4], 81));
            x.matmul(&w.transpose2d()).square().sum_all()
        });
    }

    #[test]
    fn softmax_grads() {
        gradcheck(&[3, 5], 10, |_, x| x.log_softmax2d().nll(&[1, 4, 0]));
        gradcheck(&[2, 4], 11, |_, x| {
            let p = x.softmax2d();
            p.mul(&p).sum_all()
        });
    }

    #[test]
    fn structure_grads() {
        gradcheck(&[2, 2, 3, 3], 12, |tape, x| {
            let y = tape.leaf(rand_arr(&[2, 3, 3, 3], 120));
            x.concat_channels(&y).sum_channels().square().sum_all()
        });
        gradcheck(&[2, 2, 2], 13, |_, x| {
            x.resize_bilinear(4, 4).square().sum_all()
        });
        gradcheck(&[2, 4, 4], 14, |_, x| {
            x.resize_bilinear(2, 3).square().sum_all()
        });
        gradcheck(&[2, 3, 2, 2], 15, |_, x| {
            x.global_avg_pool().square().sum_all()
        });
        gradcheck(&[3, 2, 2], 16, |_, x| x.sum_per_item().square().sum_all());
    }

    #[test]
    fn log_softmax_matches_softmax_log() {
        let tape = Tape::new();
        let x = tape.leaf(arr2(&[[2.0, -1.0, 0.5], [0.0, 0.0, 0.0]]).into_dyn());
        let a = x.log_softmax2d();
        let b = x.softmax2d();
        for (la, pb) in a.data().iter().zip(b.data().iter()) {
            assert_abs_diff_eq!(la.exp(), *pb, epsilon = 1e-12);
        }
    }

}
