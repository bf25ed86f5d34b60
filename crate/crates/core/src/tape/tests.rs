use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::gradcheck::gradcheck;
use crate::testutil::{rng, uniform};

fn t64(dims: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(dims, data).unwrap()
}

#[test]
fn conv_identity_kernel_is_exact_identity() {
    let mut r = rng(1);
    let x: Tensor<f32> = uniform(&mut r, &[2, 3, 5, 4], -3.0, 3.0);
    let mut w = vec![0.0f32; 3 * 3 * 9];
    for c in 0..3 {
        w[(c * 3 + c) * 9 + 4] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(Tensor::new(&[3, 3, 3, 3], w).unwrap());
    let bv = tape.leaf(Tensor::zeros(&[3]).unwrap());
    let y = tape.conv2d(xv, wv, bv).unwrap();
    assert_eq!(tape.value(y).data(), x.data());

    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::<f32>::full(&[1, 1, 3, 3], 1.0).unwrap());
    let mut k = vec![0.0f32; 9];
    k[4] = 1.0;
    let wv = tape.leaf(Tensor::new(&[1, 1, 3, 3], k).unwrap());
    let bv = tape.leaf(Tensor::zeros(&[1]).unwrap());
    let y = tape.conv2d(xv, wv, bv).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0; 9]);
}

#[test]
fn conv_single_pixel_only_center_tap() {
    let mut tape = Tape::new();
    let x = tape.leaf(t64(&[1, 1, 1, 1], &[2.0]));
    let w = tape.leaf(t64(&[1, 1, 3, 3], &[1.0; 9]));
    let b = tape.leaf(t64(&[1], &[1.0]));
    let y = tape.conv2d(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0]);
}

#[test]
fn conv_matches_direct_loops() {
    let mut r = rng(2);
    let x: Tensor<f64> = uniform(&mut r, &[2, 3, 4, 5], -1.0, 1.0);
    let w: Tensor<f64> = uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
    let b: Tensor<f64> = uniform(&mut r, &[2], -1.0, 1.0);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
    let y = tape.conv2d(xv, wv, bv).unwrap();
    for n in 0..2 {
        for o in 0..2 {
            for yy in 0..4i64 {
                for xx in 0..5i64 {
                    let mut s = b.at(&[o]);
                    for i in 0..3 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                    s += w.at(&[o, i, ky as usize, kx as usize])
                                        * x.at(&[n, i, sy as usize, sx as usize]);
                                }
                            }
                        }
                    }
                    let got = tape.value(y).at(&[n, o, yy as usize, xx as usize]);
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv_channel_mismatch_is_shape_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros(&[1, 2, 3, 3]).unwrap());
    let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
    let b = tape.leaf(Tensor::zeros(&[1]).unwrap());
    assert!(matches!(tape.conv2d(x, w, b), Err(Error::Shape(_))));
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i3 = tape.leaf(t64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let m = t64(&[3, 2], &[1.5, -2.0, 3.0, 4.25, 0.5, 7.0]);
    let mv = tape.leaf(m.clone());
    let out = tape.matmul(i3, mv).unwrap();
    assert_eq!(tape.value(out), &m);

    let a = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.leaf(t64(&[2, 1], &[1.0, 1.0]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
    assert!(matches!(tape.matmul(a, i3), Err(Error::Shape(_))));
}

#[test]
fn pooling_examples() {
    let mut tape = Tape::new();
    let c = tape.leaf(Tensor::<f64>::full(&[2, 3, 4, 4], 1.75).unwrap());
    let p = tape.global_avg_pool(c).unwrap();
    assert_eq!(tape.value(p).dims(), &[2, 3]);
    assert!(tape.value(p).data().iter().all(|&v| v == 1.75));
    let x = tape.leaf(t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(p).data(), &[2.5]);
}

#[test]
fn global_avg_pool_gradient_is_reciprocal_area() {
    let mut tape = Tape::new();
    let x = tape.leaf(uniform::<f64>(&mut rng(3), &[1, 2, 3, 5], -1.0, 1.0));
    let p = tape.global_avg_pool(x).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().iter().all(|&v| (v - 1.0 / 15.0).abs() < 1e-15));
}

#[test]
fn fully_connected_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t64(&[1, 2], &[1.0, 1.0]));
    let w = tape.leaf(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.leaf(t64(&[2], &[1.0, 1.0]));
    let y = tape.fully_connected(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 2.0]);
    let zb = tape.leaf(t64(&[2], &[0.0, 0.0]));
    let y = tape.fully_connected(x, w, zb).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 1.0]);
    let w3 = tape.leaf(Tensor::zeros(&[3, 2]).unwrap());
    assert!(tape.fully_connected(x, w3, b).is_err());
}

#[test]
fn sigmoid_and_softmax() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::<f64>::zeros(&[1]).unwrap());
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5]);

    let eq = tape.leaf(Tensor::<f64>::full(&[1, 4, 2, 2], 3.0).unwrap());
    let sm = tape.softmax_channels(eq).unwrap();
    assert!(tape.value(sm).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let x = tape.leaf(uniform::<f64>(&mut rng(4), &[2, 5, 3, 3], -20.0, 20.0));
    let sm = tape.softmax_channels(x).unwrap();
    let v = tape.value(sm);
    for n in 0..2 {
        for p in 0..9 {
            let s: f64 = (0..5).map(|c| v.data()[(n * 5 + c) * 9 + p]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
    let sg = tape.sigmoid(x).unwrap();
    assert!(tape.value(sg).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

/// Direct per-pixel summation of `-log softmax` at the true class.
fn ce_oracle(logits: &Tensor<f64>, labels: &[u8], ignore: u8) -> f64 {
    let [n, c, h, w] = logits.shape().nchw().unwrap();
    let (mut total, mut count) = (0.0, 0usize);
    for bn in 0..n {
        for y in 0..h {
            for x in 0..w {
                let l = labels[(bn * h + y) * w + x];
                if l == ignore {
                    continue;
                }
                let z: f64 = (0..c).map(|ch| logits.at(&[bn, ch, y, x]).exp()).sum();
                total += -(logits.at(&[bn, l as usize, y, x]).exp() / z).ln();
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn cross_entropy_matches_per_pixel_oracle() {
    let logits = uniform::<f64>(&mut rng(5), &[1, 3, 2, 2], -2.0, 2.0);
    let labels = [0u8, 2, 255, 1];
    let mut tape = Tape::new();
    let lv = tape.leaf(logits.clone());
    let ce = tape.cross_entropy(lv, &labels, 255).unwrap();
    let got = tape.value(ce).item().unwrap();
    assert!((got - ce_oracle(&logits, &labels, 255)).abs() < 1e-12);

    // large-margin one-hot logits drive the loss towards zero
    let mut perfect = vec![0.0; 12];
    for (p, &l) in [0usize, 2, 1, 1].iter().enumerate() {
        perfect[l * 4 + p] = 40.0;
    }
    let lv = tape.leaf(t64(&[1, 3, 2, 2], &perfect));
    let ce = tape.cross_entropy(lv, &[0, 2, 1, 1], 255).unwrap();
    assert!(tape.value(ce).item().unwrap() < 1e-15);

    assert!(matches!(tape.cross_entropy(lv, &[0, 3, 1, 1], 255), Err(Error::Input(_))));
    let all_ignored = tape.cross_entropy(lv, &[255; 4], 255).unwrap();
    assert_eq!(tape.value(all_ignored).item().unwrap(), 0.0);
}

#[test]
fn backward_twice_doubles_accumulated_gradient() {
    let x0 = uniform::<f64>(&mut rng(6), &[4], -1.0, 1.0);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let mut acc = x0.clone().with_grad();
    tape.backward(s).unwrap().accumulate_into(x, &mut acc).unwrap();
    let once: Vec<f64> = acc.grad().unwrap().to_vec();
    tape.backward(s).unwrap().accumulate_into(x, &mut acc).unwrap();
    for (a, b) in acc.grad().unwrap().iter().zip(&once) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t64(&[2], &[1.0, 2.0]));
    let c = tape.constant(t64(&[2], &[3.0, 4.0]));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
    assert!(g.get(c).is_none());
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[1.0, 2.0]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn gradcheck_sum_is_exact_and_square_norm_is_tight() {
    // dyadic values keep every perturbed sum exactly representable
    let x = t64(&[2, 3], &[0.5, -1.25, 2.0, 0.75, -3.5, 1.0]);
    let eps = 1.0 / 1024.0;
    let rep = gradcheck(&[x.clone()], eps, |t, v| t.sum(v[0])).unwrap();
    assert_eq!(rep.max_rel_err(), 0.0);

    let x = uniform::<f64>(&mut rng(7), &[3, 4], -2.0, 2.0);
    let rep = gradcheck(&[x], 1e-4, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.sum(sq)
    })
    .unwrap();
    assert!(rep.max_rel_err() < 1e-8, "{:?}", rep);
}

fn check(report: crate::gradcheck::GradcheckReport) {
    assert!(report.max_rel_err() < 1e-4, "{:?}", report);
}

#[test]
fn op_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut r = rng(100 + seed);
        let x = uniform::<f64>(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
        let w = uniform::<f64>(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
        let b = uniform::<f64>(&mut r, &[2], -1.0, 1.0);
        check(gradcheck(&[x.clone(), w, b], 1e-5, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            t.sum(y)
        })
        .unwrap());

        let dw = uniform::<f64>(&mut r, &[3, 1, 3, 3], -1.0, 1.0);
        let db = uniform::<f64>(&mut r, &[3], -1.0, 1.0);
        let weights = uniform::<f64>(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
        check(gradcheck(&[x.clone(), dw, db], 1e-5, |t, v| {
            let y = t.depthwise_conv2d(v[0], v[1], v[2])?;
            let k = t.constant(weights.clone());
            let y = t.mul(y, k)?;
            t.sum(y)
        })
        .unwrap());

        let a = uniform::<f64>(&mut r, &[4, 4], -1.0, 1.0);
        let bm = uniform::<f64>(&mut r, &[4, 4], -1.0, 1.0);
        let wm = uniform::<f64>(&mut r, &[4, 4], -1.0, 1.0);
        check(gradcheck(&[a, bm], 1e-5, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let yt = t.transpose(y)?;
            let k = t.constant(wm.clone());
            let y = t.mul(yt, k)?;
            t.sum(y)
        })
        .unwrap());

        let fx = uniform::<f64>(&mut r, &[2, 3], -1.0, 1.0);
        let fw = uniform::<f64>(&mut r, &[3, 2], -1.0, 1.0);
        let fb = uniform::<f64>(&mut r, &[2], -1.0, 1.0);
        check(gradcheck(&[fx, fw, fb], 1e-5, |t, v| {
            let y = t.fully_connected(v[0], v[1], v[2])?;
            let y = t.sigmoid(y)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        })
        .unwrap());

        check(gradcheck(&[x.clone()], 1e-5, |t, v| {
            let p = t.global_avg_pool(v[0])?;
            let p2 = t.mul(p, p)?;
            t.sum(p2)
        })
        .unwrap());

        check(gradcheck(&[x.clone()], 1e-5, |t, v| {
            let s = t.softmax_channels(v[0])?;
            let k = t.constant(weights.clone().reshape(&[2, 3, 5, 5]).unwrap());
            let s = t.mul(s, k)?;
            t.sum(s)
        })
        .unwrap());

        let labels: Vec<u8> = (0..50).map(|i| if i % 7 == 0 { 255 } else { (i % 3) as u8 }).collect();
        check(gradcheck(&[x.clone()], 1e-5, |t, v| t.cross_entropy(v[0], &labels, 255)).unwrap());

        let g1 = uniform::<f64>(&mut r, &[2, 2, 4, 3], -1.0, 1.0);
        let g2 = uniform::<f64>(&mut r, &[2, 3, 4, 3], -1.0, 1.0);
        check(gradcheck(&[g1, g2], 1e-5, |t, v| {
            let g = t.channel_gram(v[0], v[1])?;
            let g2 = t.mul(g, g)?;
            t.mean(g2)
        })
        .unwrap());

        let m = uniform::<f64>(&mut r, &[3, 3], -1.0, 1.0);
        check(gradcheck(&[m, x.clone()], 1e-5, |t, v| {
            let a = t.channel_mix(v[0], v[1], false)?;
            let b = t.channel_mix(v[0], v[1], true)?;
            let ab = t.mul(a, b)?;
            t.sum(ab)
        })
        .unwrap());

        let pos = uniform::<f64>(&mut r, &[1, 2, 4, 4], -1.0, 1.0);
        let target: Vec<f64> = (0..32).map(|i| 0.5 + (i as f64) * 0.1).collect();
        check(gradcheck(&[pos.clone()], 1e-6, |t, v| {
            let p = t.avg_pool2(v[0])?;
            let u = t.upsample(p, 2)?;
            let e = t.exp(u)?;
            t.log_l1(e, &target)
        })
        .unwrap());

        check(gradcheck(&[pos], 1e-6, |t, v| {
            let rl = t.relu(v[0])?;
            let s = t.scale(rl, 1.5)?;
            let d = t.sub(s, v[0])?;
            let d = t.add(d, rl)?;
            let d = t.reshape(d, &[2, 16])?;
            let m = t.batch_mean(d)?;
            let m2 = t.mul(m, m)?;
            t.sum(m2)
        })
        .unwrap());
    }
}
