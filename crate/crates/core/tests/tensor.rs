use proptest::prelude::*;
use simdiff::rng;
use simdiff::tensor::gradcheck::{check_gradients, GradCheck};
use simdiff::tensor::{ConvGeom, Graph, Tensor};
use simdiff::verify::{grad_check_op, GRAD_OPS};

fn normal(seed: u64, shape: &[usize]) -> Tensor<f64> {
    rng::normal(&mut rng::stream(seed, "test/tensor", 0), shape)
}

#[test]
fn every_primitive_passes_gradcheck() {
    for op in GRAD_OPS {
        for seed in [0, 1] {
            let r = grad_check_op(op, seed).unwrap();
            assert!(r.max_rel_err() <= 1e-4, "{op} seed {seed}: {:?}", r.worst());
        }
    }
}

#[test]
fn fan_out_accumulates() {
    let x = normal(1, &[3, 4]);
    let r = check_gradients(&[x], GradCheck::default(), |g, v| {
        let a = g.swish(v[0]);
        let b = g.mul(a, v[0])?;
        g.add(b, a)
    })
    .unwrap();
    assert!(r.max_rel_err() <= 1e-4);

    let g = Graph::<f64>::new();
    let x = g.param(Tensor::full(&[2], 3.0));
    let y = g.sum(g.add(g.square(x), x).unwrap());
    let grads = g.backward(y);
    assert_eq!(grads.get(x).unwrap().data(), &[7.0, 7.0]);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let g = Graph::<f32>::with_mode(true, 9);
        let x = g.param(normal(2, &[2, 8, 8, 3]).cast());
        let k = g.param(normal(3, &[3, 3, 3, 5]).cast());
        let h = g.conv2d(x, k, None, ConvGeom::same(1)).unwrap();
        let h = g.dropout(g.swish(h), 0.3).unwrap();
        let l = g.mean(g.square(h));
        let grads = g.backward(l);
        (grads.get(x).unwrap().clone(), grads.get(k).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn dwt_gradient_is_the_adjoint() {
    // ⟨W x, y⟩ = ⟨x, Wᵀ y⟩ with Wᵀ y read off the gradient of ⟨W x, y⟩
    let x = normal(4, &[2, 8, 8, 3]);
    let y = normal(5, &[2, 2, 2, 48]);
    let g = Graph::<f64>::new();
    let xv = g.param(x.clone());
    let wx = g.dwt53(xv, 2).unwrap();
    let lhs = g.sum(g.mul(wx, g.constant(y.clone())).unwrap());
    let lhs_val = g.value(lhs).data()[0];
    let wty = g.backward(lhs).take(xv).unwrap();
    assert!((lhs_val - x.dot(&wty)).abs() < 1e-10);
}

#[test]
fn softmax_rows_sum_to_one() {
    let g = Graph::<f64>::new();
    let s = g.softmax(g.constant(normal(6, &[3, 5, 7]).map(|v| 50.0 * v)));
    for row in g.value(s).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}

#[test]
fn dense_matches_naive_contraction() {
    let (x, w, b) = (normal(7, &[2, 3, 5]), normal(8, &[5, 4]), normal(9, &[4]));
    let g = Graph::<f64>::new();
    let y = g.dense(g.constant(x.clone()), g.constant(w.clone()), Some(g.constant(b.clone()))).unwrap();
    let y = g.value(y);
    for row in 0..6 {
        for o in 0..4 {
            let mut acc = b.data()[o];
            for i in 0..5 {
                acc += x.data()[row * 5 + i] * w.data()[i * 4 + o];
            }
            assert!((y.data()[row * 4 + o] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_matches_naive_same_padding() {
    let (x, k) = (normal(10, &[1, 5, 6, 2]), normal(11, &[3, 3, 2, 3]));
    let g = Graph::<f64>::new();
    let y = g.conv2d(g.constant(x.clone()), g.constant(k.clone()), None, ConvGeom::same(1)).unwrap();
    let y = g.value(y);
    assert_eq!(y.shape(), &[1, 5, 6, 3]);
    for oy in 0..5i64 {
        for ox in 0..6i64 {
            for o in 0..3 {
                let mut acc = 0.0;
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                        if !(0..5).contains(&iy) || !(0..6).contains(&ix) {
                            continue;
                        }
                        for i in 0..2 {
                            acc += x.data()[((iy * 6 + ix) * 2) as usize + i]
                                * k.data()[(((ky * 3 + kx) * 2) as usize + i) * 3 + o];
                        }
                    }
                }
                assert!((y.data()[((oy * 6 + ox) * 3) as usize + o] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_matches_naive() {
    let (b, n, h, d) = (2, 5, 3, 4);
    let q = normal(12, &[b, n, h, d]);
    let k = normal(13, &[b, n, h, d]);
    let v = normal(14, &[b, n, h, d]);
    let g = Graph::<f64>::new();
    let w = g.softmax(g.attn_scores(g.constant(q.clone()), g.constant(k.clone())).unwrap());
    let out = g.attn_apply(w, g.constant(v.clone())).unwrap();
    let out = g.value(out);
    let at = |t: &Tensor<f64>, bi: usize, i: usize, hi: usize, di: usize| t.data()[((bi * n + i) * h + hi) * d + di];
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..n {
                let s: Vec<f64> =
                    (0..n).map(|j| (0..d).map(|di| at(&q, bi, i, hi, di) * at(&k, bi, j, hi, di)).sum()).collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for di in 0..d {
                    let want: f64 = (0..n).map(|j| (s[j] - m).exp() / z * at(&v, bi, j, hi, di)).sum();
                    assert!((at(&out, bi, i, hi, di) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn dropout_keeps_expected_fraction_and_scales() {
    let g = Graph::<f32>::with_mode(true, 3);
    let y = g.dropout(g.constant(Tensor::full(&[100_000], 1.0)), 0.25).unwrap();
    let y = g.value(y);
    let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
    assert!((kept - 0.75).abs() < 0.01, "{kept}");
    assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-6));

    let eval = Graph::<f32>::new();
    let x = eval.constant(Tensor::full(&[10], 2.0));
    assert_eq!(eval.value(eval.dropout(x, 0.5).unwrap()).data(), &[2.0; 10]);
}

#[test]
fn broadcast_shape_errors() {
    let g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4]));
    assert!(g.add(a, b).is_err());
    assert!(g.dense(a, g.constant(Tensor::zeros(&[4, 2])), None).is_err());
    assert!(g.avg_pool2d(g.constant(Tensor::zeros(&[1, 6, 6, 1])), 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcasting_follows_numpy(r in 1usize..4, c in 1usize..5, row_b in any::<bool>()) {
        let a = normal(r as u64, &[r, c]);
        let b = if row_b { normal(7, &[1, c]) } else { normal(8, &[r, 1]) };
        let g = Graph::<f64>::new();
        let y = g.mul(g.constant(a.clone()), g.constant(b.clone())).unwrap();
        let y = g.value(y);
        for i in 0..r {
            for j in 0..c {
                let bv = if row_b { b.data()[j] } else { b.data()[i] };
                prop_assert_eq!(y.data()[i * c + j], a.data()[i * c + j] * bv);
            }
        }
    }

    #[test]
    fn space_to_depth_inverts(h in 1usize..4, w in 1usize..4, c in 1usize..4, p in 1usize..4) {
        let x = normal(1, &[2, h * p, w * p, c]);
        let g = Graph::<f64>::new();
        let y = g.depth_to_space(g.space_to_depth(g.constant(x.clone()), p).unwrap(), p).unwrap();
        prop_assert_eq!(&*g.value(y), &x);
    }
}
