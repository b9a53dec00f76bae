//! 2D convolution and whole-map resampling ops.

use super::{BwdCtx, Graph, Var};
use ndarray::{Array2, Array4, ArrayD, Axis, Ix4, IxDyn};

/// Lower `[cin, h, w]` into `[cin*kh*kw, ho*wo]` patches.
fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, ho * wo));
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[(row, oi * wo + oj)] = x[(ci, ii as usize, jj as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter `[cin*kh*kw, ho*wo]` patch gradients back onto `[cin, h, w]`.
fn col2im(
    cols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array3<f64> {
    let mut x = ndarray::Array3::<f64>::zeros((cin, h, w));
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        x[(ci, ii as usize, jj as usize)] += cols[(row, oi * wo + oj)];
                    }
                }
            }
        }
    }
    x
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

impl Graph {
    /// Dense 2D convolution: `x [b,cin,h,w]`, `w [cout,cin,kh,kw]`,
    /// optional `bias [cout]`, square stride/padding.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input [b,cin,h,w]");
        assert_eq!(ws.len(), 4, "conv2d: weight [cout,cin,kh,kw]");
        assert_eq!(xs[1], ws[1], "conv2d: cin mismatch");
        let (b, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = conv_out(h, kh, stride, pad);
        let wo = conv_out(wdt, kw, stride, pad);
        assert!(ho > 0 && wo > 0, "conv2d: empty output for input {}x{}", h, wdt);
        self.count((b * cout * cin * kh * kw * ho * wo) as u64);

        let w2 = self
            .value(w)
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("conv2d weight reshape")
            .to_owned();
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d x rank");
        let mut y = Array4::<f64>::zeros((b, cout, ho, wo));
        for bi in 0..b {
            let cols = im2col(&xv.index_axis(Axis(0), bi), kh, kw, stride, pad, ho, wo);
            let out = w2.dot(&cols); // [cout, ho*wo]
            y.index_axis_mut(Axis(0), bi).assign(
                &out.into_shape_with_order((cout, ho, wo)).expect("conv2d out"),
            );
        }
        if let Some(bv) = bias {
            assert_eq!(self.shape(bv), [cout], "conv2d bias shape");
            let b1 = self.value(bv).view().into_shape_with_order(cout).unwrap().to_owned();
            for bi in 0..b {
                for co in 0..cout {
                    let mut plane = y.slice_mut(ndarray::s![bi, co, .., ..]);
                    plane += b1[co];
                }
            }
        }
        let mut tracked = vec![x, w];
        if let Some(bv) = bias {
            tracked.push(bv);
        }
        let needs = self.any_grad(&tracked);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx: &mut BwdCtx| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("conv2d bwd g");
                let xv = ctx
                    .value(x)
                    .view()
                    .into_dimensionality::<Ix4>()
                    .expect("conv2d bwd x")
                    .to_owned();
                let w2 = ctx
                    .value(w)
                    .view()
                    .into_shape_with_order((cout, cin * kh * kw))
                    .expect("conv2d bwd w")
                    .to_owned();
                let mut dx = Array4::<f64>::zeros((b, cin, h, wdt));
                let mut dw = Array2::<f64>::zeros((cout, cin * kh * kw));
                for bi in 0..b {
                    let gb = g4
                        .index_axis(Axis(0), bi)
                        .into_shape_with_order((cout, ho * wo))
                        .expect("conv2d bwd g2")
                        .to_owned();
                    // Recompute patches instead of retaining them: trades a
                    // second im2col for a much flatter memory profile.
                    let cols = im2col(&xv.index_axis(Axis(0), bi), kh, kw, stride, pad, ho, wo);
                    dw += &gb.dot(&cols.t());
                    let dcols = w2.t().dot(&gb);
                    let dxi = col2im(&dcols, cin, h, wdt, kh, kw, stride, pad, ho, wo);
                    dx.index_axis_mut(Axis(0), bi).assign(&dxi);
                }
                ctx.accum(x, dx.into_dyn());
                ctx.accum(
                    w,
                    dw.into_dyn()
                        .into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                        .unwrap(),
                );
                if let Some(bv) = bias {
                    let mut db = ndarray::Array1::<f64>::zeros(cout);
                    for bi in 0..b {
                        for co in 0..cout {
                            db[co] += g4.slice(ndarray::s![bi, co, .., ..]).sum();
                        }
                    }
                    ctx.accum(bv, db.into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(y.into_dyn(), bw, None, needs)
    }

    /// Depthwise 2D convolution: `x [b,c,h,w]`, `w [c,kh,kw]`, optional
    /// `bias [c]`; every channel is filtered independently.
    pub fn dw_conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "dw_conv2d: input [b,c,h,w]");
        assert_eq!(ws.len(), 3, "dw_conv2d: weight [c,kh,kw]");
        assert_eq!(xs[1], ws[0], "dw_conv2d: channel mismatch");
        let (b, c, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw) = (ws[1], ws[2]);
        let ho = conv_out(h, kh, stride, pad);
        let wo = conv_out(wdt, kw, stride, pad);
        assert!(ho > 0 && wo > 0, "dw_conv2d: empty output");
        self.count((b * c * kh * kw * ho * wo) as u64);

        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let wv = self
            .value(w)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        let bv_arr = bias.map(|bv| {
            assert_eq!(self.shape(bv), [c], "dw_conv2d bias shape");
            self.value(bv).view().into_shape_with_order(c).unwrap().to_owned()
        });
        let mut y = Array4::<f64>::zeros((b, c, ho, wo));
        for bi in 0..b {
            for ci in 0..c {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = 0.0;
                        for ki in 0..kh {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj < 0 || jj >= wdt as isize {
                                    continue;
                                }
                                acc += xv[(bi, ci, ii as usize, jj as usize)] * wv[(ci, ki, kj)];
                            }
                        }
                        if let Some(bb) = &bv_arr {
                            acc += bb[ci];
                        }
                        y[(bi, ci, oi, oj)] = acc;
                    }
                }
            }
        }
        let mut tracked = vec![x, w];
        if let Some(bv) = bias {
            tracked.push(bv);
        }
        let needs = self.any_grad(&tracked);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx: &mut BwdCtx| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let xv = ctx.value(x).view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let wv = ctx
                    .value(w)
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .to_owned();
                let mut dx = Array4::<f64>::zeros((b, c, h, wdt));
                let mut dw = ndarray::Array3::<f64>::zeros((c, kh, kw));
                for bi in 0..b {
                    for ci in 0..c {
                        for oi in 0..ho {
                            for oj in 0..wo {
                                let gv = g4[(bi, ci, oi, oj)];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ki in 0..kh {
                                    let ii = (oi * stride + ki) as isize - pad as isize;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..kw {
                                        let jj = (oj * stride + kj) as isize - pad as isize;
                                        if jj < 0 || jj >= wdt as isize {
                                            continue;
                                        }
                                        dx[(bi, ci, ii as usize, jj as usize)] += gv * wv[(ci, ki, kj)];
                                        dw[(ci, ki, kj)] += gv * xv[(bi, ci, ii as usize, jj as usize)];
                                    }
                                }
                            }
                        }
                    }
                }
                ctx.accum(x, dx.into_dyn());
                ctx.accum(w, dw.into_dyn());
                if let Some(bv) = bias {
                    let mut db = ndarray::Array1::<f64>::zeros(c);
                    for bi in 0..b {
                        for ci in 0..c {
                            db[ci] += g4.slice(ndarray::s![bi, ci, .., ..]).sum();
                        }
                    }
                    ctx.accum(bv, db.into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(y.into_dyn(), bw, None, needs)
    }

    /// Nearest-neighbour upsampling of `[b,c,h,w]` by an integer factor.
    pub fn nearest_upsample(&mut self, x: Var, factor: usize) -> Var {
        assert!(factor >= 1, "nearest_upsample: factor >= 1");
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "nearest_upsample: [b,c,h,w]");
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let mut y = Array4::<f64>::zeros((b, c, h * factor, w * factor));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h * factor {
                    for j in 0..w * factor {
                        y[(bi, ci, i, j)] = xv[(bi, ci, i / factor, j / factor)];
                    }
                }
            }
        }
        let needs = self.needs_grad(x);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut d = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h * factor {
                            for j in 0..w * factor {
                                d[(bi, ci, i / factor, j / factor)] += g4[(bi, ci, i, j)];
                            }
                        }
                    }
                }
                ctx.accum(x, d.into_dyn());
            }))
        } else {
            None
        };
        self.push(y.into_dyn(), bw, None, needs)
    }

    /// Nearest-neighbour resize of `[b,c,h,w]` to `(ho, wo)` with half-pixel
    /// centre alignment; pure gather, so no multiplies are counted.
    pub fn nearest_resize(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        assert!(ho >= 1 && wo >= 1, "nearest_resize: target >= 1");
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "nearest_resize: [b,c,h,w]");
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let pick = |dst: usize, src_n: usize, dst_n: usize| -> usize {
            let p = ((dst as f64 + 0.5) * src_n as f64 / dst_n as f64) as usize;
            p.min(src_n - 1)
        };
        let rows: Vec<usize> = (0..ho).map(|i| pick(i, h, ho)).collect();
        let cols: Vec<usize> = (0..wo).map(|j| pick(j, w, wo)).collect();
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let mut y = Array4::<f64>::zeros((b, c, ho, wo));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        y[(bi, ci, i, j)] = xv[(bi, ci, rows[i], cols[j])];
                    }
                }
            }
        }
        let needs = self.needs_grad(x);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut d = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                d[(bi, ci, rows[i], cols[j])] += g4[(bi, ci, i, j)];
                            }
                        }
                    }
                }
                ctx.accum(x, d.into_dyn());
            }))
        } else {
            None
        };
        self.push(y.into_dyn(), bw, None, needs)
    }

    /// Bilinear resize of `[b,c,h,w]` to `(ho, wo)` with half-pixel centre
    /// alignment; differentiable, used to bring mask logits to input
    /// resolution.
    pub fn bilinear_resize(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "bilinear_resize: [b,c,h,w]");
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        self.count((b * c * ho * wo * 4) as u64);
        // Precompute per-axis source taps and lerp weights.
        let taps = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
            (0..dst)
                .map(|i| {
                    let f = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
                    let f = f.clamp(0.0, (src - 1) as f64);
                    let lo = f.floor() as usize;
                    let hi = (lo + 1).min(src - 1);
                    (lo, hi, f - lo as f64)
                })
                .collect()
        };
        let ti = taps(h, ho);
        let tj = taps(w, wo);
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let mut y = Array4::<f64>::zeros((b, c, ho, wo));
        for bi in 0..b {
            for ci in 0..c {
                for (oi, &(i0, i1, tiw)) in ti.iter().enumerate() {
                    for (oj, &(j0, j1, tjw)) in tj.iter().enumerate() {
                        let v00 = xv[(bi, ci, i0, j0)];
                        let v01 = xv[(bi, ci, i0, j1)];
                        let v10 = xv[(bi, ci, i1, j0)];
                        let v11 = xv[(bi, ci, i1, j1)];
                        let top = v00 + (v01 - v00) * tjw;
                        let bot = v10 + (v11 - v10) * tjw;
                        y[(bi, ci, oi, oj)] = top + (bot - top) * tiw;
                    }
                }
            }
        }
        let needs = self.needs_grad(x);
        let bw: Option<super::BackwardFn> = if needs {
            let ti = ti.clone();
            let tj = tj.clone();
            Some(Box::new(move |g, ctx| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut d = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for (oi, &(i0, i1, tiw)) in ti.iter().enumerate() {
                            for (oj, &(j0, j1, tjw)) in tj.iter().enumerate() {
                                let gv = g4[(bi, ci, oi, oj)];
                                d[(bi, ci, i0, j0)] += gv * (1.0 - tiw) * (1.0 - tjw);
                                d[(bi, ci, i0, j1)] += gv * (1.0 - tiw) * tjw;
                                d[(bi, ci, i1, j0)] += gv * tiw * (1.0 - tjw);
                                d[(bi, ci, i1, j1)] += gv * tiw * tjw;
                            }
                        }
                    }
                }
                ctx.accum(x, d.into_dyn());
            }))
        } else {
            None
        };
        self.push(y.into_dyn(), bw, None, needs)
    }
}

/// Non-autodiff bilinear resize used by data tooling (same half-pixel
/// convention as [`Graph::bilinear_resize`]).
pub fn bilinear_resize_value(x: &ArrayD<f64>, ho: usize, wo: usize) -> ArrayD<f64> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.bilinear_resize(v, ho, wo);
    g.value(y).clone()
}
