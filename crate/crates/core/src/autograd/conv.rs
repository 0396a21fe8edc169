//! 2-D convolution and nearest-neighbour upsampling with hand-written
//! backward kernels. Layouts are `[B,Cin,H,W]` for activations and
//! `[Cout,Cin,Kh,Kw]` for weights; zero padding, square stride.

use ndarray::{ArrayD, IxDyn};

use super::{BackFn, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        Conv2dSpec { stride, pad }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

/// Valid output range along one axis for a fixed kernel offset `k`:
/// input index `i = o*stride + k - pad` must land in `[0, size_in)`.
fn valid_range(size_in: usize, size_out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let s = stride as i64;
    let d = k as i64 - pad as i64;
    let lo = if d >= 0 { 0 } else { (-d + s - 1) / s };
    // floor division: the numerator may be negative for tiny inputs
    let hi = ((size_in as i64 - 1 - d).div_euclid(s) + 1).clamp(0, size_out as i64);
    (lo.clamp(0, hi.max(0)) as usize, hi.max(0) as usize)
}

/// Plain forward convolution on raw arrays (no tape).
pub fn conv2d_raw(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    bias: Option<&ArrayD<f64>>,
    spec: Conv2dSpec,
) -> ArrayD<f64> {
    let (bs, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, wcin, "conv2d: channel mismatch");
    let ho = spec.out_size(h, kh);
    let wo = spec.out_size(wd, kw);
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let ws = w.as_standard_layout();
    let wsl = ws.as_slice().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[bs, cout, ho, wo]));
    let osl = out.as_slice_mut().unwrap();
    for b in 0..bs {
        for co in 0..cout {
            let obase = ((b * cout + co) * ho) * wo;
            if let Some(bias) = bias {
                let bv = bias[[co]];
                if bv != 0.0 {
                    for v in &mut osl[obase..obase + ho * wo] {
                        *v = bv;
                    }
                }
            }
            for ci in 0..cin {
                let xbase = ((b * cin + ci) * h) * wd;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(h, ho, ky, spec.stride, spec.pad);
                    for kx in 0..kw {
                        let wv = wsl[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(wd, wo, kx, spec.stride, spec.pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * spec.stride + ky - spec.pad;
                            let orow = obase + oy * wo;
                            let xrow = xbase + iy * wd;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * spec.stride + kx - spec.pad;
                                osl[orow + ox] += wv * xsl[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input(
    g: &ArrayD<f64>,
    w: &ArrayD<f64>,
    in_shape: &[usize],
    spec: Conv2dSpec,
) -> ArrayD<f64> {
    let (bs, cin, h, wd) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let gs = g.as_standard_layout();
    let gsl = gs.as_slice().unwrap();
    let ws = w.as_standard_layout();
    let wsl = ws.as_slice().unwrap();
    let mut gx = ArrayD::zeros(IxDyn(in_shape));
    let gxsl = gx.as_slice_mut().unwrap();
    for b in 0..bs {
        for co in 0..cout {
            let gbase = ((b * cout + co) * ho) * wo;
            for ci in 0..cin {
                let xbase = ((b * cin + ci) * h) * wd;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(h, ho, ky, spec.stride, spec.pad);
                    for kx in 0..kw {
                        let wv = wsl[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(wd, wo, kx, spec.stride, spec.pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * spec.stride + ky - spec.pad;
                            let grow = gbase + oy * wo;
                            let xrow = xbase + iy * wd;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * spec.stride + kx - spec.pad;
                                gxsl[xrow + ix] += wv * gsl[grow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv2d_backward_weight(
    g: &ArrayD<f64>,
    x: &ArrayD<f64>,
    w_shape: &[usize],
    spec: Conv2dSpec,
) -> ArrayD<f64> {
    let (bs, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let gs = g.as_standard_layout();
    let gsl = gs.as_slice().unwrap();
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let mut gw = ArrayD::zeros(IxDyn(w_shape));
    let gwsl = gw.as_slice_mut().unwrap();
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(h, ho, ky, spec.stride, spec.pad);
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = valid_range(wd, wo, kx, spec.stride, spec.pad);
                    let mut acc = 0.0;
                    for b in 0..bs {
                        let gbase = ((b * cout + co) * ho) * wo;
                        let xbase = ((b * cin + ci) * h) * wd;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * spec.stride + ky - spec.pad;
                            let grow = gbase + oy * wo;
                            let xrow = xbase + iy * wd;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * spec.stride + kx - spec.pad;
                                acc += gsl[grow + ox] * xsl[xrow + ix];
                            }
                        }
                    }
                    gwsl[((co * cin + ci) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    gw
}

impl Tensor {
    /// 2-D convolution with optional bias.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Tensor {
        self.assert_same_tape(weight, "conv2d");
        assert_eq!(self.data.ndim(), 4, "conv2d: input must be [B,Cin,H,W]");
        assert_eq!(weight.data.ndim(), 4, "conv2d: weight must be [Cout,Cin,Kh,Kw]");
        let out = conv2d_raw(
            &self.data,
            &weight.data,
            bias.map(|b| b.data.as_ref()),
            spec,
        );
        let x_id = self.id;
        let w_id = weight.id;
        let b_id = bias.map(|b| b.id);
        let xd = self.data.clone();
        let wd = weight.data.clone();
        let back: BackFn = Box::new(move |g| {
            let mut grads = vec![
                (x_id, conv2d_backward_input(g, &wd, xd.shape(), spec)),
                (w_id, conv2d_backward_weight(g, &xd, wd.shape(), spec)),
            ];
            if let Some(bid) = b_id {
                let gb = g
                    .sum_axis(ndarray::Axis(3))
                    .sum_axis(ndarray::Axis(2))
                    .sum_axis(ndarray::Axis(0));
                grads.push((bid, gb.into_dyn()));
            }
            grads
        });
        Tensor::from_op(&self.tape, out, back)
    }

    /// Nearest-neighbour 2x upsampling of `[B,C,H,W]`.
    pub fn upsample_nearest_2x(&self) -> Tensor {
        assert_eq!(self.data.ndim(), 4, "upsample: expects [B,C,H,W]");
        let (b, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let mut out = ArrayD::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = self.data[[bi, ci, y, x]];
                        out[[bi, ci, 2 * y, 2 * x]] = v;
                        out[[bi, ci, 2 * y, 2 * x + 1]] = v;
                        out[[bi, ci, 2 * y + 1, 2 * x]] = v;
                        out[[bi, ci, 2 * y + 1, 2 * x + 1]] = v;
                    }
                }
            }
        }
        let a = self.id;
        let back: BackFn = Box::new(move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            gx[[bi, ci, y, x]] = g[[bi, ci, 2 * y, 2 * x]]
                                + g[[bi, ci, 2 * y, 2 * x + 1]]
                                + g[[bi, ci, 2 * y + 1, 2 * x]]
                                + g[[bi, ci, 2 * y + 1, 2 * x + 1]];
                        }
                    }
                }
            }
            vec![(a, gx)]
        });
        Tensor::from_op(&self.tape, out, back)
    }
}
