//! Differentiable bilinear point sampling.
//!
//! Coordinates live in `[0,1]^2` as `(x, y)` pairs and are mapped onto the
//! pixel grid with half-pixel centre alignment (`xf = x*W - 0.5`). Samples
//! outside the map read as zero; gradients flow both into the sampled map
//! and into the coordinates, which is what lets deformable offsets train.

use super::{BwdCtx, Graph, Var};
use ndarray::{Array3, ArrayD, Ix3, Ix4};

#[derive(Clone, Copy)]
struct Tap {
    i0: isize,
    j0: isize,
    ty: f64,
    tx: f64,
}

fn tap(cx: f64, cy: f64, h: usize, w: usize) -> Tap {
    let xf = cx * w as f64 - 0.5;
    let yf = cy * h as f64 - 0.5;
    let j0 = xf.floor() as isize;
    let i0 = yf.floor() as isize;
    Tap {
        i0,
        j0,
        ty: yf - i0 as f64,
        tx: xf - j0 as f64,
    }
}

#[inline]
fn read(x: &ndarray::ArrayView2<'_, f64>, i: isize, j: isize) -> f64 {
    let (h, w) = (x.shape()[0] as isize, x.shape()[1] as isize);
    if i < 0 || j < 0 || i >= h || j >= w {
        0.0
    } else {
        x[(i as usize, j as usize)]
    }
}

impl Graph {
    /// Sample `x [b,c,h,w]` at `coords [b,p,2]` (`(x,y)` in `[0,1]^2`),
    /// producing `[b,c,p]`. Zero padding outside the map; differentiable in
    /// both the map and the coordinates.
    pub fn bilinear_points(&mut self, x: Var, coords: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let cs = self.shape(coords).to_vec();
        assert_eq!(xs.len(), 4, "bilinear_points: x [b,c,h,w]");
        assert_eq!(cs.len(), 3, "bilinear_points: coords [b,p,2]");
        assert_eq!(cs[2], 2, "bilinear_points: coords last dim 2");
        assert_eq!(xs[0], cs[0], "bilinear_points: batch mismatch");
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let p = cs[1];
        self.count((b * c * p * 4) as u64);
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let cv = self.value(coords).view().into_dimensionality::<Ix3>().unwrap();
        let mut y = Array3::<f64>::zeros((b, c, p));
        for bi in 0..b {
            for pi in 0..p {
                let t = tap(cv[(bi, pi, 0)], cv[(bi, pi, 1)], h, w);
                for ci in 0..c {
                    let plane = xv.slice(ndarray::s![bi, ci, .., ..]);
                    let v00 = read(&plane, t.i0, t.j0);
                    let v01 = read(&plane, t.i0, t.j0 + 1);
                    let v10 = read(&plane, t.i0 + 1, t.j0);
                    let v11 = read(&plane, t.i0 + 1, t.j0 + 1);
                    let top = v00 + (v01 - v00) * t.tx;
                    let bot = v10 + (v11 - v10) * t.tx;
                    y[(bi, ci, pi)] = top + (bot - top) * t.ty;
                }
            }
        }
        let needs = self.any_grad(&[x, coords]);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx: &mut BwdCtx| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let xv = ctx
                    .value(x)
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let cv = ctx
                    .value(coords)
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .to_owned();
                let mut dx = ndarray::Array4::<f64>::zeros((b, c, h, w));
                let mut dc = Array3::<f64>::zeros((b, p, 2));
                let mut scatter = |bi: usize, ci: usize, i: isize, j: isize, v: f64| {
                    if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
                        dx[(bi, ci, i as usize, j as usize)] += v;
                    }
                };
                for bi in 0..b {
                    for pi in 0..p {
                        let t = tap(cv[(bi, pi, 0)], cv[(bi, pi, 1)], h, w);
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for ci in 0..c {
                            let gv = g3[(bi, ci, pi)];
                            let plane = xv.slice(ndarray::s![bi, ci, .., ..]);
                            let v00 = read(&plane, t.i0, t.j0);
                            let v01 = read(&plane, t.i0, t.j0 + 1);
                            let v10 = read(&plane, t.i0 + 1, t.j0);
                            let v11 = read(&plane, t.i0 + 1, t.j0 + 1);
                            scatter(bi, ci, t.i0, t.j0, gv * (1.0 - t.ty) * (1.0 - t.tx));
                            scatter(bi, ci, t.i0, t.j0 + 1, gv * (1.0 - t.ty) * t.tx);
                            scatter(bi, ci, t.i0 + 1, t.j0, gv * t.ty * (1.0 - t.tx));
                            scatter(bi, ci, t.i0 + 1, t.j0 + 1, gv * t.ty * t.tx);
                            // d(sample)/d(xf) and /d(yf) from the lerp form.
                            let dvx = (v01 - v00) * (1.0 - t.ty) + (v11 - v10) * t.ty;
                            let dvy = (v10 - v00) * (1.0 - t.tx) + (v11 - v01) * t.tx;
                            gx += gv * dvx;
                            gy += gv * dvy;
                        }
                        // xf = cx*W - 0.5 => d/dcx = W (and likewise H).
                        dc[(bi, pi, 0)] += gx * w as f64;
                        dc[(bi, pi, 1)] += gy * h as f64;
                    }
                }
                ctx.accum(x, dx.into_dyn());
                ctx.accum(coords, dc.into_dyn());
            }))
        } else {
            None
        };
        self.push(y.into_dyn(), bw, None, needs)
    }
}

/// Non-autodiff point sampling with the same conventions (used by oracles
/// and by inference-only paths).
pub fn bilinear_points_value(x: &ArrayD<f64>, coords: &ArrayD<f64>) -> ArrayD<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let cv = g.constant(coords.clone());
    let y = g.bilinear_points(xv, cv);
    g.value(y).clone()
}
