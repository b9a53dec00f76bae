//! Finite-difference and value-oracle tests for every autodiff op.

use irstd_core::graph::{check_grads, Graph, Param, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn randt(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

fn param(name: &str, shape: &[usize], seed: u64) -> Param {
    Param::new(name, randt(shape, seed))
}

#[test]
fn elementwise_grads() {
    let a = param("a", &[2, 3], 1);
    let b = param("b", &[2, 3], 2);
    let build = |g: &mut Graph| -> Var {
        let x = g.param(&a);
        let y = g.param(&b);
        let s = g.add(x, y);
        let d = g.sub(s, y);
        let m = g.mul(d, y);
        let y_off = g.add_scalar(y, 3.0); // keep the divisor away from zero
        let q = g.div(m, y_off);
        let n = g.neg(q);
        let sc = g.scale(n, 0.7);
        let sh = g.add_scalar(sc, 0.1);
        g.sum_all(sh)
    };
    check_grads(&build, &[&a, &b], EPS, TOL);
}

#[test]
fn activation_grads() {
    let a = param("a", &[3, 2], 3);
    let build = |g: &mut Graph| -> Var {
        let x = g.param(&a);
        let e = g.exp(x);
        let l = g.ln(e); // ln of a positive tensor
        let s = g.sigmoid(l);
        let si = g.silu(s);
        g.sum_all(si)
    };
    check_grads(&build, &[&a], EPS, TOL);
}

#[test]
fn relu_grad_away_from_kink() {
    let a = Param::new("a", randt(&[2, 2], 4) + 2.0); // strictly positive
    let build = |g: &mut Graph| -> Var {
        let x = g.param(&a);
        let r = g.relu(x);
        g.sum_all(r)
    };
    check_grads(&build, &[&a], EPS, TOL);
}

#[test]
fn bias_and_broadcast_grads() {
    let x = param("x", &[2, 3, 2, 2], 5);
    let bc = param("bc", &[3], 6);
    let xl = param("xl", &[2, 4], 7);
    let bl = param("bl", &[4], 8);
    let q = param("q", &[3, 2], 9);
    let build = |g: &mut Graph| -> Var {
        let xv = g.param(&x);
        let b1 = g.param(&bc);
        let y1 = g.add_bias_channel(xv, b1);
        let s1 = g.sum_all(y1);

        let x2 = g.param(&xl);
        let b2 = g.param(&bl);
        let y2 = g.add_bias_last(x2, b2);
        let s2 = g.sum_all(y2);

        let qv = g.param(&q);
        let y3 = g.broadcast_batch(qv, 4);
        let y3 = g.silu(y3);
        let s3 = g.sum_all(y3);

        let t = g.add(s1, s2);
        g.add(t, s3)
    };
    check_grads(&build, &[&x, &bc, &xl, &bl, &q], EPS, TOL);
}

#[test]
fn shape_op_grads() {
    let a = param("a", &[2, 3, 4], 10);
    let b = param("b", &[2, 5, 4], 11);
    let build = |g: &mut Graph| -> Var {
        let x = g.param(&a);
        let y = g.param(&b);
        let r = g.reshape(x, &[2, 12]);
        let r = g.reshape(r, &[2, 3, 4]);
        let p = g.permute(r, &[1, 0, 2]); // [3,2,4]
        let p = g.permute(p, &[1, 0, 2]); // back to [2,3,4]
        let c = g.concat(1, &[p, y]); // [2,8,4]
        let n = g.narrow(c, 1, 2, 5); // mixes both inputs
        let n = g.silu(n);
        let sel = g.index_select0(n, &[1, 0, 1]); // duplicate rows
        g.sum_all(sel)
    };
    check_grads(&build, &[&a, &b], EPS, TOL);
}

#[test]
fn reduction_grads_and_values() {
    let a = param("a", &[2, 2, 3], 12);
    let w = randt(&[2, 2, 3], 13);
    let build = |g: &mut Graph| -> Var {
        let x = g.param(&a);
        let m = g.mean_all(x);
        let s2 = g.sum_last2(x); // [2]
        let s2 = g.silu(s2);
        let s2s = g.sum_all(s2);
        let d = g.dot_const(x, &w);
        let t = g.add(m, s2s);
        g.add(t, d)
    };
    check_grads(&build, &[&a], EPS, TOL);

    // Value oracle for sum_last2.
    let mut g = Graph::new();
    let x = g.constant(a.value());
    let s = g.sum_last2(x);
    let v = a.value();
    for i in 0..2 {
        let mut acc = 0.0;
        for j in 0..2 {
            for k in 0..3 {
                acc += v[[i, j, k]];
            }
        }
        assert!((g.value(s)[[i]] - acc).abs() < 1e-12);
    }
}

#[test]
fn softmax_values_and_grads() {
    let a = param("a", &[2, 5], 14);
    let w = randt(&[2, 5], 15);
    let build = |g: &mut Graph| -> Var {
        let x = g.param(&a);
        let s = g.softmax_last(x);
        g.dot_const(s, &w)
    };
    check_grads(&build, &[&a], EPS, TOL);

    let build_ls = |g: &mut Graph| -> Var {
        let x = g.param(&a);
        let s = g.log_softmax_last(x);
        g.dot_const(s, &w)
    };
    check_grads(&build_ls, &[&a], EPS, TOL);

    // Rows of softmax sum to one; log_softmax agrees with ln(softmax).
    let mut g = Graph::new();
    let x = g.constant(a.value());
    let s = g.softmax_last(x);
    let ls = g.log_softmax_last(x);
    for i in 0..2 {
        let row_sum: f64 = (0..5).map(|j| g.value(s)[[i, j]]).sum();
        assert!((row_sum - 1.0).abs() < 1e-12);
        for j in 0..5 {
            assert!((g.value(ls)[[i, j]] - g.value(s)[[i, j]].ln()).abs() < 1e-10);
        }
    }
}

#[test]
fn matmul_linear_bmm_grads() {
    let a = param("a", &[3, 4], 16);
    let b = param("b", &[4, 2], 17);
    let build = |g: &mut Graph| -> Var {
        let x = g.param(&a);
        let y = g.param(&b);
        let m = g.matmul(x, y);
        let m = g.silu(m);
        g.sum_all(m)
    };
    check_grads(&build, &[&a, &b], EPS, TOL);

    let x = param("x", &[2, 3, 4], 18);
    let w = param("w", &[4, 5], 19);
    let bias = param("bias", &[5], 20);
    let build_lin = |g: &mut Graph| -> Var {
        let xv = g.param(&x);
        let wv = g.param(&w);
        let bv = g.param(&bias);
        let y = g.linear(xv, wv, Some(bv));
        let y = g.silu(y);
        g.sum_all(y)
    };
    check_grads(&build_lin, &[&x, &w, &bias], EPS, TOL);

    let p = param("p", &[2, 3, 4], 21);
    let q = param("q", &[2, 4, 5], 22);
    let build_bmm = |g: &mut Graph| -> Var {
        let pv = g.param(&p);
        let qv = g.param(&q);
        let y = g.bmm(pv, qv, false);
        let y = g.silu(y);
        g.sum_all(y)
    };
    check_grads(&build_bmm, &[&p, &q], EPS, TOL);

    let qt = param("qt", &[2, 5, 4], 23);
    let build_bmm_t = |g: &mut Graph| -> Var {
        let pv = g.param(&p);
        let qv = g.param(&qt);
        let y = g.bmm(pv, qv, true);
        let y = g.silu(y);
        g.sum_all(y)
    };
    check_grads(&build_bmm_t, &[&p, &qt], EPS, TOL);

    // Value oracle: bmm with transpose_b equals explicit permute + bmm.
    let mut g = Graph::new();
    let pv = g.constant(p.value());
    let qv = g.constant(qt.value());
    let y1 = g.bmm(pv, qv, true);
    let qp = g.permute(qv, &[0, 2, 1]);
    let y2 = g.bmm(pv, qp, false);
    let diff = (g.value(y1) - g.value(y2)).mapv(f64::abs).sum();
    assert!(diff < 1e-12);
}

#[test]
fn norm_grads() {
    let x = param("x", &[2, 3, 6], 24);
    let gamma = Param::new("gamma", randt(&[6], 25) + 1.5);
    let beta = param("beta", &[6], 26);
    let build = |g: &mut Graph| -> Var {
        let xv = g.param(&x);
        let gv = g.param(&gamma);
        let bv = g.param(&beta);
        let y = g.layer_norm(xv, gv, bv, 1e-5);
        let y = g.silu(y);
        g.sum_all(y)
    };
    check_grads(&build, &[&x, &gamma, &beta], EPS, 1e-5);

    let xg = param("xg", &[2, 4, 3, 3], 27);
    let gg = Param::new("gg", randt(&[4], 28) + 1.5);
    let bg = param("bg", &[4], 29);
    let build_gn = |g: &mut Graph| -> Var {
        let xv = g.param(&xg);
        let gv = g.param(&gg);
        let bv = g.param(&bg);
        let y = g.group_norm(xv, 2, gv, bv, 1e-5);
        let y = g.silu(y);
        g.sum_all(y)
    };
    check_grads(&build_gn, &[&xg, &gg, &bg], EPS, 1e-5);
}

#[test]
fn layer_norm_value_oracle() {
    // One row normalized by hand.
    let x = Param::new(
        "x",
        ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
    );
    let gamma = Param::new("g", ArrayD::from_elem(IxDyn(&[4]), 1.0));
    let beta = Param::new("b", ArrayD::zeros(IxDyn(&[4])));
    let mut g = Graph::new();
    let xv = g.param(&x);
    let gv = g.param(&gamma);
    let bv = g.param(&beta);
    let y = g.layer_norm(xv, gv, bv, 0.0);
    let mean = 2.5;
    let var = (1.5f64.powi(2) + 0.5f64.powi(2)) * 2.0 / 4.0;
    let istd = 1.0 / var.sqrt();
    for j in 0..4 {
        let expect = ((j + 1) as f64 - mean) * istd;
        assert!((g.value(y)[[0, j]] - expect).abs() < 1e-12);
    }
}

#[test]
fn bce_value_and_grad() {
    // BCE from a zero logit is ln 2 regardless of the target.
    let x = Param::new("x", ArrayD::zeros(IxDyn(&[3, 3])));
    let t = ArrayD::from_elem(IxDyn(&[3, 3]), 0.25);
    let mut g = Graph::new();
    let xv = g.param(&x);
    let l = g.bce_with_logits_mean(xv, &t);
    assert!((g.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-15);

    let x2 = param("x2", &[2, 4], 30);
    let t2 = ArrayD::from_shape_fn(IxDyn(&[2, 4]), |ix| if ix[1] % 2 == 0 { 1.0 } else { 0.0 });
    let build = |g: &mut Graph| -> Var {
        let xv = g.param(&x2);
        g.bce_with_logits_mean(xv, &t2)
    };
    check_grads(&build, &[&x2], EPS, TOL);

    // Stability: huge logits must not produce NaN/inf.
    let big = Param::new("big", ArrayD::from_elem(IxDyn(&[2]), 1e4));
    let mut g = Graph::new();
    let xv = g.param(&big);
    let t = ArrayD::from_elem(IxDyn(&[2]), 0.0);
    let l = g.bce_with_logits_mean(xv, &t);
    assert!((g.scalar_value(l) - 1e4).abs() < 1e-9);
    let neg = Param::new("neg", ArrayD::from_elem(IxDyn(&[2]), -1e4));
    let xv = g.param(&neg);
    let t1 = ArrayD::from_elem(IxDyn(&[2]), 1.0);
    let l = g.bce_with_logits_mean(xv, &t1);
    assert!((g.scalar_value(l) - 1e4).abs() < 1e-9);
}

#[test]
fn conv2d_matches_direct_convolution() {
    let x = randt(&[2, 3, 5, 6], 31);
    let w = randt(&[4, 3, 3, 3], 32);
    let bias = randt(&[4], 33);
    for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let bv = g.constant(bias.clone());
        let y = g.conv2d(xv, wv, Some(bv), stride, pad);
        let ys = g.shape(y).to_vec();
        let ho = (5 + 2 * pad - 3) / stride + 1;
        let wo = (6 + 2 * pad - 3) / stride + 1;
        assert_eq!(ys, vec![2, 4, ho, wo]);
        // Direct nested-loop reference.
        for b in 0..2 {
            for co in 0..4 {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = bias[[co]];
                        for ci in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ii = (oi * stride + ki) as isize - pad as isize;
                                    let jj = (oj * stride + kj) as isize - pad as isize;
                                    if ii >= 0 && jj >= 0 && ii < 5 && jj < 6 {
                                        acc += x[[b, ci, ii as usize, jj as usize]]
                                            * w[[co, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        let got = g.value(y)[[b, co, oi, oj]];
                        assert!(
                            (got - acc).abs() < 1e-12,
                            "conv mismatch at ({b},{co},{oi},{oj}): {got} vs {acc}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn conv2d_grads() {
    let x = param("x", &[1, 2, 4, 4], 34);
    let w = param("w", &[3, 2, 3, 3], 35);
    let bias = param("bias", &[3], 36);
    for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
        let (x, w, bias) = (&x, &w, &bias);
        let build = move |g: &mut Graph| -> Var {
            let xv = g.param(x);
            let wv = g.param(w);
            let bv = g.param(bias);
            let y = g.conv2d(xv, wv, Some(bv), stride, pad);
            let y = g.silu(y);
            g.sum_all(y)
        };
        check_grads(&build, &[x, w, bias], EPS, TOL);
    }
}

#[test]
fn nearest_upsample_values_and_grads() {
    let x = param("x", &[1, 2, 2, 3], 37);
    let build = |g: &mut Graph| -> Var {
        let xv = g.param(&x);
        let y = g.nearest_upsample(xv, 2);
        let y = g.silu(y);
        g.sum_all(y)
    };
    check_grads(&build, &[&x], EPS, TOL);

    let mut g = Graph::new();
    let xv = g.constant(x.value());
    let y = g.nearest_upsample(xv, 2);
    assert_eq!(g.shape(y), &[1, 2, 4, 6]);
    let v = x.value();
    for i in 0..4 {
        for j in 0..6 {
            assert_eq!(g.value(y)[[0, 1, i, j]], v[[0, 1, i / 2, j / 2]]);
        }
    }
}

#[test]
fn bilinear_resize_values_and_grads() {
    // Constant maps stay exactly constant at any output size.
    let c = ArrayD::from_elem(IxDyn(&[1, 1, 3, 5]), 0.37);
    let mut g = Graph::new();
    let xv = g.constant(c);
    let y = g.bilinear_resize(xv, 7, 2);
    for v in g.value(y).iter() {
        assert!((v - 0.37).abs() < 1e-12);
    }

    // Identity resize is exact.
    let x = param("x", &[1, 2, 3, 3], 38);
    let mut g = Graph::new();
    let xv = g.constant(x.value());
    let y = g.bilinear_resize(xv, 3, 3);
    let diff = (g.value(y) - &x.value()).mapv(f64::abs).sum();
    assert!(diff < 1e-12);

    // Hand-computed 1x2 -> 1x4 case under half-pixel alignment with border
    // clamping: [a, b] -> [a, 0.75a+0.25b, 0.25a+0.75b, b].
    let (a, b) = (0.2, -1.4);
    let src = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![a, b]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(src);
    let y = g.bilinear_resize(xv, 1, 4);
    let want = [a, 0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b, b];
    for (j, w) in want.iter().enumerate() {
        assert!((g.value(y)[[0, 0, 0, j]] - w).abs() < 1e-12);
    }

    let build = |g: &mut Graph| -> Var {
        let xv = g.param(&x);
        let y = g.bilinear_resize(xv, 5, 4);
        let y = g.silu(y);
        g.sum_all(y)
    };
    check_grads(&build, &[&x], EPS, TOL);
}

#[test]
fn bilinear_points_values() {
    let x = randt(&[1, 3, 4, 5], 39);
    // Pixel-centre coordinates reproduce exact pixel values.
    let mut coords = Vec::new();
    for (i, j) in [(0usize, 0usize), (1, 3), (3, 4), (2, 2)] {
        coords.push((j as f64 + 0.5) / 5.0);
        coords.push((i as f64 + 0.5) / 4.0);
    }
    let cv = ArrayD::from_shape_vec(IxDyn(&[1, 4, 2]), coords).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let cc = g.constant(cv);
    let y = g.bilinear_points(xv, cc);
    assert_eq!(g.shape(y), &[1, 3, 4]);
    for (pi, (i, j)) in [(0usize, 0usize), (1, 3), (3, 4), (2, 2)].iter().enumerate() {
        for c in 0..3 {
            assert!((g.value(y)[[0, c, pi]] - x[[0, c, *i, *j]]).abs() < 1e-12);
        }
    }

    // Far outside the map reads as zero.
    let cv = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2]), vec![-1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let cc = g.constant(cv);
    let y = g.bilinear_points(xv, cc);
    assert_eq!(g.value(y)[[0, 0, 0]], 0.0);
}

#[test]
fn bilinear_points_grads_in_map_and_coords() {
    let x = param("x", &[1, 2, 4, 4], 40);
    // Coordinates chosen away from tap-boundary kinks.
    let coords = Param::new(
        "coords",
        ArrayD::from_shape_vec(
            IxDyn(&[1, 3, 2]),
            vec![0.31, 0.42, 0.66, 0.23, 0.18, 0.77],
        )
        .unwrap(),
    );
    let w = randt(&[1, 2, 3], 41);
    let build = |g: &mut Graph| -> Var {
        let xv = g.param(&x);
        let cv = g.param(&coords);
        let y = g.bilinear_points(xv, cv);
        g.dot_const(y, &w)
    };
    check_grads(&build, &[&x, &coords], EPS, TOL);
}

#[test]
fn diamond_reuse_accumulates_gradients() {
    let a = param("a", &[3], 42);
    let build = |g: &mut Graph| -> Var {
        let x = g.param(&a);
        let y = g.mul(x, x); // x used twice
        let z = g.add(y, x); // and again
        g.sum_all(z)
    };
    check_grads(&build, &[&a], EPS, TOL);

    // Analytic check: d/dx (x^2 + x) = 2x + 1.
    a.zero_grad();
    let mut g = Graph::new();
    let x = g.param(&a);
    let y = g.mul(x, x);
    let z = g.add(y, x);
    let s = g.sum_all(z);
    g.backward(s);
    let v = a.value();
    let gr = a.grad();
    for i in 0..3 {
        assert!((gr[[i]] - (2.0 * v[[i]] + 1.0)).abs() < 1e-12);
    }
}

#[test]
fn input_leaf_gradients_via_gradstore() {
    let mut g = Graph::new();
    let x = g.input(ArrayD::from_elem(IxDyn(&[2]), 3.0));
    let y = g.mul(x, x);
    let s = g.sum_all(y);
    let store = g.backward(s);
    let gx = store.grad(x).expect("input grad");
    assert!((gx[[0]] - 6.0).abs() < 1e-12);
    assert!((gx[[1]] - 6.0).abs() < 1e-12);
}

#[test]
fn multiply_counts_by_scope() {
    let mut g = Graph::new();
    let a = g.constant(randt(&[3, 4], 50));
    let b = g.constant(randt(&[4, 5], 51));
    let c = g.constant(randt(&[3, 5], 52));
    g.scoped("proj", |g| {
        let y = g.matmul(a, b); // 3*4*5 = 60
        g.scoped("inner", |g| {
            g.mul(y, c); // 15 elementwise
        });
    });
    let w = g.constant(randt(&[5, 2], 53));
    g.linear(c, w, None); // unlabeled: 3*5*2 = 30
    assert_eq!(g.counts().get("proj"), 60);
    assert_eq!(g.counts().get("inner"), 15);
    assert_eq!(g.counts().get("_unlabeled"), 30);
    assert_eq!(g.counts().sum_prefix("proj"), 60);
    assert_eq!(g.counts().total(), 105);
}

#[test]
fn constants_do_not_grow_backward_work() {
    // Ops on constants carry no backward closures and no gradient flow.
    let mut g = Graph::new();
    let a = g.constant(randt(&[4, 4], 54));
    let b = g.constant(randt(&[4, 4], 55));
    let y = g.mul(a, b);
    let p = Param::new("p", randt(&[4, 4], 56));
    let pv = g.param(&p);
    let z = g.add(y, pv);
    let s = g.sum_all(z);
    g.backward(s);
    let gr = p.grad();
    for v in gr.iter() {
        assert!((v - 1.0).abs() < 1e-12);
    }
}
