//! Elementwise, reduction, linear-algebra and normalization ops.
//!
//! Multiply-count convention: only multiplications are counted. Matrix
//! products count `m*k*n`, linear layers `rows*din*dout`, elementwise
//! multiply/scale/divide count one per element; additions, comparisons and
//! transcendentals count zero. This matches the cost model used by the
//! attention profiler, where a multiply-accumulate is reported as two ops
//! (one multiply here, one add implied).

use super::{same_shape, BwdCtx, Graph, Var};
use ndarray::{ArrayD, Axis, Ix2, IxDyn, Zip};

impl Graph {
    // ---------------------------------------------------------------- misc

    fn unary<FV, FB>(&mut self, x: Var, fv: FV, fb: FB) -> Var
    where
        FV: Fn(&ArrayD<f64>) -> ArrayD<f64>,
        FB: Fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64> + 'static,
    {
        let y = fv(self.value(x));
        let needs = self.needs_grad(x);
        let yc = y.clone();
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx: &mut BwdCtx| {
                let xv = ctx.value(x).clone();
                let d = fb(g, &xv, &yc);
                ctx.accum(x, d);
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    // ---------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.shape(a), self.shape(b), "add");
        let y = self.value(a) + self.value(b);
        let needs = self.any_grad(&[a, b]);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                ctx.accum(a, g.clone());
                ctx.accum(b, g.clone());
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.shape(a), self.shape(b), "sub");
        let y = self.value(a) - self.value(b);
        let needs = self.any_grad(&[a, b]);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                ctx.accum(a, g.clone());
                ctx.accum(b, -g);
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.shape(a), self.shape(b), "mul");
        let y = self.value(a) * self.value(b);
        self.count(y.len() as u64);
        let needs = self.any_grad(&[a, b]);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let da = g * ctx.value(b);
                let db = g * ctx.value(a);
                ctx.accum(a, da);
                ctx.accum(b, db);
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.shape(a), self.shape(b), "div");
        let y = self.value(a) / self.value(b);
        self.count(y.len() as u64);
        let needs = self.any_grad(&[a, b]);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let bv = ctx.value(b);
                let da = g / bv;
                let db = -g * ctx.value(a) / (bv * bv);
                ctx.accum(a, da);
                ctx.accum(b, db);
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, |g, _, _| -g)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let n = self.value(x).len() as u64;
        self.count(n);
        self.unary(x, move |v| v * c, move |g, _, _| g * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v + c, |g, _, _| g.clone())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.mapv(f64::exp), |g, _, y| g * y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.mapv(f64::ln), |g, xv, _| g / xv)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.mapv(sigmoid_scalar),
            |g, _, y| g * &y.mapv(|s| s * (1.0 - s)),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.mapv(|t| t.max(0.0)),
            |g, xv, _| g * &xv.mapv(|t| if t > 0.0 { 1.0 } else { 0.0 }),
        )
    }

    /// SiLU activation `x * sigmoid(x)` — smooth, which keeps central
    /// finite-difference checks well conditioned.
    pub fn silu(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as u64;
        self.count(n);
        self.unary(
            x,
            |v| v.mapv(|t| t * sigmoid_scalar(t)),
            |g, xv, _| {
                g * &xv.mapv(|t| {
                    let s = sigmoid_scalar(t);
                    s * (1.0 + t * (1.0 - s))
                })
            },
        )
    }

    // -------------------------------------------------------------- biases

    /// `x + bias` broadcast over axis 1 (channels of a `[b, c, ...]` map).
    pub fn add_bias_channel(&mut self, x: Var, bias: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let c = xs[1];
        assert_eq!(self.shape(bias), [c], "add_bias_channel: bias shape");
        let mut y = self.value(x).clone();
        {
            let bv = self.value(bias).clone();
            for mut lane in y.axis_iter_mut(Axis(0)) {
                for (ci, mut plane) in lane.outer_iter_mut().enumerate() {
                    plane += bv[IxDyn(&[ci])];
                }
            }
        }
        let needs = self.any_grad(&[x, bias]);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                ctx.accum(x, g.clone());
                let mut db = ArrayD::zeros(IxDyn(&[c]));
                for lane in g.axis_iter(Axis(0)) {
                    for (ci, plane) in lane.outer_iter().enumerate() {
                        db[IxDyn(&[ci])] += plane.sum();
                    }
                }
                ctx.accum(bias, db);
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    /// `x + bias` broadcast over the last axis (`[..., d]`).
    pub fn add_bias_last(&mut self, x: Var, bias: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().expect("add_bias_last: rank >= 1");
        assert_eq!(self.shape(bias), [d], "add_bias_last: bias shape");
        let bv = self.value(bias).clone();
        let mut y = self.value(x).clone();
        let rows = y.len() / d;
        {
            let b1 = bv.view().into_shape_with_order(d).expect("bias 1d");
            let mut y2 = y.view_mut().into_shape_with_order((rows, d)).expect("rows");
            for mut row in y2.outer_iter_mut() {
                row += &b1;
            }
        }
        let needs = self.any_grad(&[x, bias]);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                ctx.accum(x, g.clone());
                let g2 = g.view().into_shape_with_order((g.len() / d, d)).expect("rows");
                let db = g2.sum_axis(Axis(0)).into_dyn();
                ctx.accum(bias, db);
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    /// Repeat `x` along a new leading batch axis; backward sums over it.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(&xs);
        let xv = self.value(x);
        let mut y = ArrayD::zeros(IxDyn(&out_shape));
        for mut lane in y.axis_iter_mut(Axis(0)) {
            lane.assign(xv);
        }
        let needs = self.needs_grad(x);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                ctx.accum(x, g.sum_axis(Axis(0)));
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    /// Broadcast a size-1 middle axis: `[b, 1, n] -> [b, c, n]`.
    pub fn broadcast_axis1(&mut self, x: Var, c: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "broadcast_axis1: [b,1,n]");
        assert_eq!(xs[1], 1, "broadcast_axis1: middle axis must be 1");
        let (b, n) = (xs[0], xs[2]);
        let xv = self.value(x);
        let mut y = ArrayD::zeros(IxDyn(&[b, c, n]));
        for bi in 0..b {
            for ci in 0..c {
                for j in 0..n {
                    y[IxDyn(&[bi, ci, j])] = xv[IxDyn(&[bi, 0, j])];
                }
            }
        }
        let needs = self.needs_grad(x);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let mut d = ArrayD::zeros(IxDyn(&[b, 1, n]));
                for bi in 0..b {
                    for ci in 0..c {
                        for j in 0..n {
                            d[IxDyn(&[bi, 0, j])] += g[IxDyn(&[bi, ci, j])];
                        }
                    }
                }
                ctx.accum(x, d);
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    // -------------------------------------------------------- shape juggling

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xs = self.shape(x).to_vec();
        let y = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape {:?} -> {:?}", xs, shape));
        let needs = self.needs_grad(x);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let d = g
                    .clone()
                    .into_shape_with_order(IxDyn(&xs))
                    .expect("reshape backward");
                ctx.accum(x, d);
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let y = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        // Inverse permutation for backward.
        let mut inv = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        let needs = self.needs_grad(x);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let d = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                ctx.accum(x, d);
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: empty input");
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        // `concatenate` along an inner axis yields permuted strides; stored
        // node values must stay in standard layout for downstream reshapes.
        let y = ndarray::concatenate(Axis(axis), &views)
            .expect("concat shapes")
            .as_standard_layout()
            .to_owned();
        let lens: Vec<usize> = parts.iter().map(|v| self.shape(*v)[axis]).collect();
        let parts_v = parts.to_vec();
        let needs = self.any_grad(parts);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let mut start = 0usize;
                for (v, len) in parts_v.iter().zip(&lens) {
                    let sl = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    ctx.accum(*v, sl);
                    start += len;
                }
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let y = self
            .value(x)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let needs = self.needs_grad(x);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let gx = ctx.grad_mut(x);
                let mut sl = gx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len));
                sl += g;
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    /// Gather rows along axis 0 by index (duplicates allowed).
    pub fn index_select0(&mut self, x: Var, indices: &[usize]) -> Var {
        let xv = self.value(x);
        let views: Vec<_> = indices
            .iter()
            .map(|&i| xv.index_axis(Axis(0), i))
            .collect();
        let y = ndarray::stack(Axis(0), &views).expect("index_select0");
        let idx = indices.to_vec();
        let needs = self.needs_grad(x);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let gx = ctx.grad_mut(x);
                for (row, &i) in idx.iter().enumerate() {
                    let gs = g.index_axis(Axis(0), row);
                    let mut dst = gx.index_axis_mut(Axis(0), i);
                    dst += &gs;
                }
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    // ---------------------------------------------------------- reductions

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs_grad(x);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let gv = g[IxDyn(&[])];
                let shape = ctx.value(x).raw_dim();
                ctx.accum(x, ArrayD::from_elem(shape, gv));
            }))
        } else {
            None
        };
        self.push(ndarray::arr0(s).into_dyn(), bw, None, needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the last two axes: `[..., h, w] -> [...]`.
    pub fn sum_last2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let r = xs.len();
        assert!(r >= 2, "sum_last2: rank >= 2");
        let lead: usize = xs[..r - 2].iter().product();
        let hw = xs[r - 2] * xs[r - 1];
        let x2 = self
            .value(x)
            .view()
            .into_shape_with_order((lead.max(1), hw))
            .expect("sum_last2 reshape");
        let y = x2.sum_axis(Axis(1)).into_dyn();
        let y = y
            .into_shape_with_order(IxDyn(&xs[..r - 2]))
            .expect("sum_last2 out shape");
        let needs = self.needs_grad(x);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let shape = ctx.value(x).raw_dim();
                let mut d = ArrayD::zeros(shape);
                {
                    let mut d2 = d
                        .view_mut()
                        .into_shape_with_order((lead.max(1), hw))
                        .expect("sum_last2 bwd");
                    let g1 = g.view().into_shape_with_order(lead.max(1)).expect("g flat");
                    for (mut row, gv) in d2.outer_iter_mut().zip(g1.iter()) {
                        row.fill(*gv);
                    }
                }
                ctx.accum(x, d);
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    /// Σ x ⊙ c for a constant tensor `c` (no gradient through `c`).
    pub fn dot_const(&mut self, x: Var, c: &ArrayD<f64>) -> Var {
        same_shape(self.shape(x), c.shape(), "dot_const");
        self.count(c.len() as u64);
        let s = (self.value(x) * c).sum();
        let cc = c.clone();
        let needs = self.needs_grad(x);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let gv = g[IxDyn(&[])];
                ctx.accum(x, &cc * gv);
            }))
        } else {
            None
        };
        self.push(ndarray::arr0(s).into_dyn(), bw, None, needs)
    }

    // ------------------------------------------------------------- softmax

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let y = softmax_last_value(self.value(x));
        self.count(y.len() as u64); // normalization divide
        let yc = y.clone();
        let needs = self.needs_grad(x);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let mut d = g * &yc;
                let last = d.ndim() - 1;
                // d = y * (g - sum(g*y))
                let sums = d.sum_axis(Axis(last));
                Zip::from(d.lanes_mut(Axis(last)))
                    .and(&sums)
                    .and(yc.lanes(Axis(last)))
                    .for_each(|mut lane, &s, ylane| {
                        Zip::from(&mut lane).and(ylane).for_each(|dv, &yv| {
                            *dv -= s * yv;
                        });
                    });
                ctx.accum(x, d);
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    /// Log-softmax over the last axis (numerically stable).
    pub fn log_softmax_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut y = xv.clone();
        let last = y.ndim() - 1;
        for mut lane in y.lanes_mut(Axis(last)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + lane.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lane.mapv_inplace(|v| v - lse);
        }
        let yc = y.clone();
        let needs = self.needs_grad(x);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                // dx = g - softmax(x) * sum(g)
                let last = yc.ndim() - 1;
                let mut d = g.clone();
                let gsums = g.sum_axis(Axis(last));
                Zip::from(d.lanes_mut(Axis(last)))
                    .and(&gsums)
                    .and(yc.lanes(Axis(last)))
                    .for_each(|mut lane, &gs, ylane| {
                        Zip::from(&mut lane).and(ylane).for_each(|dv, &lv| {
                            *dv -= lv.exp() * gs;
                        });
                    });
                ctx.accum(x, d);
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    // ------------------------------------------------------- linear algebra

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let a2 = as2(av);
        let b2 = as2(bv);
        assert_eq!(a2.shape()[1], b2.shape()[0], "matmul inner dims");
        let y = a2.dot(&b2).into_dyn();
        self.count((a2.shape()[0] * a2.shape()[1] * b2.shape()[1]) as u64);
        let needs = self.any_grad(&[a, b]);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let g2 = as2(g);
                let av = as2(ctx.value(a));
                let bv = as2(ctx.value(b));
                let da = g2.dot(&bv.t()).into_dyn();
                let db = av.t().dot(&g2).into_dyn();
                ctx.accum(a, da);
                ctx.accum(b, db);
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    /// Batched matmul `[b, m, k] x [b, k, n] -> [b, m, n]`; with
    /// `transpose_b`, the second operand is `[b, n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        assert_eq!(ash.len(), 3, "bmm: a rank 3");
        assert_eq!(bsh.len(), 3, "bmm: b rank 3");
        assert_eq!(ash[0], bsh[0], "bmm: batch");
        let (bt, m, k) = (ash[0], ash[1], ash[2]);
        let n = if transpose_b { bsh[1] } else { bsh[2] };
        if transpose_b {
            assert_eq!(bsh[2], k, "bmm: inner dims (transposed)");
        } else {
            assert_eq!(bsh[1], k, "bmm: inner dims");
        }
        let mut y = ArrayD::zeros(IxDyn(&[bt, m, n]));
        {
            let av = self.value(a).view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let bv = self.value(b).view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let mut yv = y.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
            for i in 0..bt {
                let ai = av.index_axis(Axis(0), i);
                let bi = bv.index_axis(Axis(0), i);
                let mut yi = yv.index_axis_mut(Axis(0), i);
                if transpose_b {
                    yi.assign(&ai.dot(&bi.t()));
                } else {
                    yi.assign(&ai.dot(&bi));
                }
            }
        }
        self.count((bt * m * k * n) as u64);
        let needs = self.any_grad(&[a, b]);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let av = ctx
                    .value(a)
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .to_owned();
                let bv = ctx
                    .value(b)
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .to_owned();
                let mut da = ndarray::Array3::<f64>::zeros((bt, m, k));
                let mut db = ndarray::Array3::<f64>::zeros(bv.raw_dim());
                for i in 0..bt {
                    let gi = gv.index_axis(Axis(0), i);
                    let ai = av.index_axis(Axis(0), i);
                    let bi = bv.index_axis(Axis(0), i);
                    if transpose_b {
                        // y = a . b^T => da = g . b ; db = g^T . a
                        da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi));
                        db.index_axis_mut(Axis(0), i).assign(&gi.t().dot(&ai));
                    } else {
                        da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                        db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                    }
                }
                ctx.accum(a, da.into_dyn());
                ctx.accum(b, db.into_dyn());
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    /// `x [..., din] x w [din, dout] (+ bias [dout]) -> [..., dout]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().expect("linear input rank");
        assert_eq!(ws[0], din, "linear: weight rows");
        let dout = ws[1];
        let rows: usize = xs[..xs.len() - 1].iter().product::<usize>().max(1);
        let x2 = self
            .value(x)
            .view()
            .into_shape_with_order((rows, din))
            .expect("linear reshape");
        let w2 = as2(self.value(w));
        let mut y2 = x2.dot(&w2);
        self.count((rows * din * dout) as u64);
        if let Some(bv) = bias {
            let b1 = self
                .value(bv)
                .view()
                .into_shape_with_order(dout)
                .expect("bias 1d");
            for mut row in y2.outer_iter_mut() {
                row += &b1;
            }
        }
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(dout);
        let y = y2
            .into_dyn()
            .into_shape_with_order(IxDyn(&out_shape))
            .expect("linear out shape");
        let mut tracked = vec![x, w];
        if let Some(bv) = bias {
            tracked.push(bv);
        }
        let needs = self.any_grad(&tracked);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let g2 = g
                    .view()
                    .into_shape_with_order((rows, dout))
                    .expect("linear bwd g");
                let x2 = ctx
                    .value(x)
                    .view()
                    .into_shape_with_order((rows, din))
                    .expect("linear bwd x")
                    .to_owned();
                let w2 = as2(ctx.value(w)).to_owned();
                let dx = g2.dot(&w2.t());
                let dw = x2.t().dot(&g2);
                let xshape = ctx.value(x).raw_dim();
                ctx.accum(x, dx.into_dyn().into_shape_with_order(xshape).unwrap());
                ctx.accum(w, dw.into_dyn());
                if let Some(bv) = bias {
                    ctx.accum(bv, g2.sum_axis(Axis(0)).into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    // ------------------------------------------------------- normalization

    /// Layer norm over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().expect("layer_norm rank");
        assert_eq!(self.shape(gamma), [d], "layer_norm gamma");
        assert_eq!(self.shape(beta), [d], "layer_norm beta");
        let rows = self.value(x).len() / d;
        self.count((rows * d * 2) as u64);
        let xv = self
            .value(x)
            .view()
            .into_shape_with_order((rows, d))
            .expect("ln reshape");
        let gv = self.value(gamma).view().into_shape_with_order(d).unwrap().to_owned();
        let bv = self.value(beta).view().into_shape_with_order(d).unwrap().to_owned();
        let mut y = ndarray::Array2::<f64>::zeros((rows, d));
        let mut xhat = ndarray::Array2::<f64>::zeros((rows, d));
        let mut inv_std = ndarray::Array1::<f64>::zeros(rows);
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[(i, j)] = xh;
                y[(i, j)] = xh * gv[j] + bv[j];
            }
        }
        let y = y.into_dyn().into_shape_with_order(IxDyn(&xs)).unwrap();
        let needs = self.any_grad(&[x, gamma, beta]);
        let bw: Option<super::BackwardFn> = if needs {
            let gvc = gv.clone();
            Some(Box::new(move |g, ctx| {
                let g2 = g
                    .view()
                    .into_shape_with_order((rows, d))
                    .expect("ln bwd g");
                let mut dgamma = ndarray::Array1::<f64>::zeros(d);
                let mut dbeta = ndarray::Array1::<f64>::zeros(d);
                let mut dx = ndarray::Array2::<f64>::zeros((rows, d));
                for i in 0..rows {
                    let mut sum_gy = 0.0;
                    let mut sum_gyx = 0.0;
                    for j in 0..d {
                        let gy = g2[(i, j)] * gvc[j];
                        sum_gy += gy;
                        sum_gyx += gy * xhat[(i, j)];
                        dgamma[j] += g2[(i, j)] * xhat[(i, j)];
                        dbeta[j] += g2[(i, j)];
                    }
                    let mg = sum_gy / d as f64;
                    let mgx = sum_gyx / d as f64;
                    for j in 0..d {
                        let gy = g2[(i, j)] * gvc[j];
                        dx[(i, j)] = inv_std[i] * (gy - mg - xhat[(i, j)] * mgx);
                    }
                }
                let xshape = ctx.value(x).raw_dim();
                ctx.accum(x, dx.into_dyn().into_shape_with_order(xshape).unwrap());
                ctx.accum(gamma, dgamma.into_dyn());
                ctx.accum(beta, dbeta.into_dyn());
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    /// Group norm over `[b, c, h, w]` with `groups` channel groups; batch
    /// independent, so batch size 1 is well defined.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "group_norm expects [b,c,h,w]");
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(c % groups, 0, "group_norm: channels divisible by groups");
        assert_eq!(self.shape(gamma), [c], "group_norm gamma");
        assert_eq!(self.shape(beta), [c], "group_norm beta");
        let cg = c / groups;
        let gsize = (cg * h * w) as f64;
        self.count((b * c * h * w * 2) as u64);
        let gv = self.value(gamma).view().into_shape_with_order(c).unwrap().to_owned();
        let bv = self.value(beta).view().into_shape_with_order(c).unwrap().to_owned();
        let xv = self.value(x).view().into_shape_with_order((b, c, h * w)).unwrap().to_owned();
        let mut y = ndarray::Array3::<f64>::zeros((b, c, h * w));
        let mut xhat = ndarray::Array3::<f64>::zeros((b, c, h * w));
        let mut inv_std = ndarray::Array2::<f64>::zeros((b, groups));
        for bi in 0..b {
            for gi in 0..groups {
                let c0 = gi * cg;
                let mut mean = 0.0;
                for ci in c0..c0 + cg {
                    for p in 0..h * w {
                        mean += xv[(bi, ci, p)];
                    }
                }
                mean /= gsize;
                let mut var = 0.0;
                for ci in c0..c0 + cg {
                    for p in 0..h * w {
                        let dv = xv[(bi, ci, p)] - mean;
                        var += dv * dv;
                    }
                }
                var /= gsize;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[(bi, gi)] = istd;
                for ci in c0..c0 + cg {
                    for p in 0..h * w {
                        let xh = (xv[(bi, ci, p)] - mean) * istd;
                        xhat[(bi, ci, p)] = xh;
                        y[(bi, ci, p)] = xh * gv[ci] + bv[ci];
                    }
                }
            }
        }
        let y = y.into_dyn().into_shape_with_order(IxDyn(&xs)).unwrap();
        let needs = self.any_grad(&[x, gamma, beta]);
        let bw: Option<super::BackwardFn> = if needs {
            let gvc = gv.clone();
            Some(Box::new(move |g, ctx| {
                let g3 = g
                    .view()
                    .into_shape_with_order((b, c, h * w))
                    .expect("gn bwd g");
                let mut dgamma = ndarray::Array1::<f64>::zeros(c);
                let mut dbeta = ndarray::Array1::<f64>::zeros(c);
                let mut dx = ndarray::Array3::<f64>::zeros((b, c, h * w));
                for bi in 0..b {
                    for gi in 0..groups {
                        let c0 = gi * cg;
                        let mut sum_gy = 0.0;
                        let mut sum_gyx = 0.0;
                        for ci in c0..c0 + cg {
                            for p in 0..h * w {
                                let gy = g3[(bi, ci, p)] * gvc[ci];
                                sum_gy += gy;
                                sum_gyx += gy * xhat[(bi, ci, p)];
                                dgamma[ci] += g3[(bi, ci, p)] * xhat[(bi, ci, p)];
                                dbeta[ci] += g3[(bi, ci, p)];
                            }
                        }
                        let mg = sum_gy / gsize;
                        let mgx = sum_gyx / gsize;
                        let istd = inv_std[(bi, gi)];
                        for ci in c0..c0 + cg {
                            for p in 0..h * w {
                                let gy = g3[(bi, ci, p)] * gvc[ci];
                                dx[(bi, ci, p)] = istd * (gy - mg - xhat[(bi, ci, p)] * mgx);
                            }
                        }
                    }
                }
                let xshape = ctx.value(x).raw_dim();
                ctx.accum(x, dx.into_dyn().into_shape_with_order(xshape).unwrap());
                ctx.accum(gamma, dgamma.into_dyn());
                ctx.accum(beta, dbeta.into_dyn());
            }))
        } else {
            None
        };
        self.push(y, bw, None, needs)
    }

    // ----------------------------------------------------------- loss prims

    /// Mean binary cross-entropy from logits against constant targets in
    /// `[0,1]`, computed in the standard numerically stable form.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &ArrayD<f64>) -> Var {
        same_shape(self.shape(logits), targets.shape(), "bce_with_logits");
        let xv = self.value(logits);
        let n = xv.len() as f64;
        let mut acc = 0.0;
        Zip::from(xv).and(targets).for_each(|&x, &y| {
            acc += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        });
        let loss = acc / n;
        let tc = targets.clone();
        let needs = self.needs_grad(logits);
        let bw: Option<super::BackwardFn> = if needs {
            Some(Box::new(move |g, ctx| {
                let gv = g[IxDyn(&[])];
                let xv = ctx.value(logits);
                let mut d = ArrayD::zeros(xv.raw_dim());
                Zip::from(&mut d).and(xv).and(&tc).for_each(|dv, &x, &y| {
                    *dv = gv * (sigmoid_scalar(x) - y) / n;
                });
                ctx.accum(logits, d);
            }))
        } else {
            None
        };
        self.push(ndarray::arr0(loss).into_dyn(), bw, None, needs)
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_last_value(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut y = x.clone();
    let last = y.ndim() - 1;
    for mut lane in y.lanes_mut(Axis(last)) {
        let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        lane.mapv_inplace(|v| {
            let e = (v - m).exp();
            s += e;
            e
        });
        lane.mapv_inplace(|v| v / s);
    }
    y
}

fn as2(x: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    x.view()
        .into_dimensionality::<Ix2>()
        .expect("expected rank-2 tensor")
}
