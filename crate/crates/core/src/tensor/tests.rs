use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn conv_1x1_identity_kernel_passes_input_through() {
    let mut tape: Tape<f64> = Tape::new();
    let x = Tensor::rand_uniform(vec![1, 1, 4, 4], -1.0, 1.0, &mut rng(1));
    let xv = tape.leaf(&x);
    let w = tape.leaf_from(vec![1, 1, 1, 1], vec![1.0], false);
    let b = tape.leaf_from(vec![1], vec![0.0], false);
    let y = tape.conv2d(xv, w, Some(b), 1, 0).unwrap();
    assert_eq!(tape.value(y), x.data());
}

#[test]
fn conv_3x3_ones_interior_sums_to_nine() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf_from(vec![1, 1, 5, 5], vec![1.0; 25], false);
    let w = tape.leaf_from(vec![1, 1, 3, 3], vec![1.0; 9], false);
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 5, 5]);
    // interior output value: full 3x3 window of ones
    let v = tape.value(y);
    for yy in 1..4 {
        for xx in 1..4 {
            assert_eq!(v[yy * 5 + xx], 9.0);
        }
    }
    // corner sees a 2x2 window
    assert_eq!(v[0], 4.0);
}

/// Independent sliding-window reference for cross-correlation.
fn conv_reference(
    x: &[f64],
    w: &[f64],
    (b, ci, h, wid): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wid + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * co * oh * ow];
    for bi in 0..b {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wid as isize {
                                    continue;
                                }
                                acc += x[((bi * ci + c) * h + iy as usize) * wid + ix as usize]
                                    * w[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_sliding_window_reference_over_random_cases() {
    let mut r = rng(7);
    for case in 0..10 {
        let stride = 1 + case % 2;
        let pad = case % 3;
        let (b, ci, co) = (1 + case % 2, 1 + case % 3, 1 + (case + 1) % 3);
        let (h, w) = (6 + case % 3, 5 + case % 4);
        let (kh, kw) = (3, 3);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            continue;
        }
        let x = Tensor::<f64>::rand_uniform(vec![b, ci, h, w], -1.0, 1.0, &mut r);
        let wt = Tensor::<f64>::rand_uniform(vec![co, ci, kh, kw], -1.0, 1.0, &mut r);
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.constant(&x);
        let wv = tape.constant(&wt);
        let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
        let expect = conv_reference(
            x.data(),
            wt.data(),
            (b, ci, h, w),
            (co, kh, kw),
            stride,
            pad,
        );
        for (a, e) in tape.value(y).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "case {case}: {a} vs {e}");
        }
    }
}

#[test]
fn grid_sample_identity_grid_is_exact() {
    // power-of-two extent makes the normalize/unnormalize round trip exact
    let (h, w) = (8, 8);
    let x = Tensor::<f64>::rand_uniform(vec![2, 3, h, w], -1.0, 1.0, &mut rng(3));
    let mut tape: Tape<f64> = Tape::new();
    let xv = tape.constant(&x);
    let theta = tape.leaf_from(vec![2, 6], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0].repeat(2), false);
    let grid = tape.affine_grid(theta, h, w).unwrap();
    let y = tape.grid_sample(xv, grid).unwrap();
    assert_eq!(tape.value(y), x.data());
}

#[test]
fn grid_sample_integer_shift_matches_shift_with_zero_fill() {
    let (h, w) = (8, 8);
    let x = Tensor::<f64>::rand_uniform(vec![1, 1, h, w], 0.0, 1.0, &mut rng(4));
    let mut tape: Tape<f64> = Tape::new();
    let xv = tape.constant(&x);
    // one-pixel shift right in sampling coordinates: tx = 2/W means the
    // output at column j reads input column j+1
    let theta = tape.leaf_from(
        vec![1, 6],
        vec![1.0, 0.0, 2.0 / w as f64, 0.0, 1.0, 0.0],
        false,
    );
    let grid = tape.affine_grid(theta, h, w).unwrap();
    let y = tape.grid_sample(xv, grid).unwrap();
    let v = tape.value(y);
    for yy in 0..h {
        for xx in 0..w {
            let expect = if xx + 1 < w {
                x.data()[yy * w + xx + 1]
            } else {
                0.0
            };
            assert_eq!(v[yy * w + xx], expect, "at ({yy},{xx})");
        }
    }
}

#[test]
fn grid_sample_far_out_of_bounds_is_zero() {
    let (h, w) = (4, 4);
    let x = Tensor::<f64>::rand_uniform(vec![1, 2, h, w], 1.0, 2.0, &mut rng(5));
    let mut tape: Tape<f64> = Tape::new();
    let xv = tape.constant(&x);
    let grid = tape.leaf_from(vec![1, h, w, 2], vec![2.0; h * w * 2], false);
    let y = tape.grid_sample(xv, grid).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn grid_sample_rejects_bad_grid_shape() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf_from(vec![1, 1, 4, 4], vec![0.0; 16], false);
    let grid = tape.leaf_from(vec![1, 4, 4, 3], vec![0.0; 48], false);
    assert!(tape.grid_sample(x, grid).is_err());
}

#[test]
fn relu_softmax_mse_definitions() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf_from(vec![1, 1, 1, 2], vec![-1.0, 2.0], false);
    let y = tape.relu(x);
    assert_eq!(tape.value(y), &[0.0, 2.0]);

    // softmax of equal logits over C classes -> 1/C each
    let c = 5;
    let logits = tape.leaf_from(vec![1, c, 1, 1], vec![0.7; c], false);
    let sm = tape.softmax(logits).unwrap();
    for &v in tape.value(sm) {
        assert!((v - 1.0 / c as f64).abs() < 1e-12);
    }
    let total: f64 = tape.value(sm).iter().sum();
    assert!((total - 1.0).abs() < 1e-6);

    let a = tape.leaf_from(vec![3], vec![0.3, -2.0, 5.5], false);
    let m = tape.mse(a, a).unwrap();
    assert_eq!(tape.scalar_value(m), 0.0);
}

#[test]
fn mse_matches_scalar_loop_reference() {
    let mut r = rng(11);
    let a = Tensor::<f64>::rand_uniform(vec![2, 3, 4, 4], -1.0, 1.0, &mut r);
    let b = Tensor::<f64>::rand_uniform(vec![2, 3, 4, 4], -1.0, 1.0, &mut r);
    let mut tape: Tape<f64> = Tape::new();
    let av = tape.constant(&a);
    let bv = tape.constant(&b);
    let m = tape.mse(av, bv).unwrap();
    let mut acc = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        acc += (x - y) * (x - y);
    }
    acc /= a.numel() as f64;
    assert!((tape.scalar_value(m) - acc).abs() < 1e-9);
}

#[test]
fn backward_of_sum_gives_ones() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf_from(vec![3], vec![1.0, -2.0, 0.5], true);
    let m = tape.mean_all(x);
    let s = tape.scale(m, 3.0); // sum = mean * n
    let grads = tape.backward(s, false).unwrap();
    let g = grads.grad(x).unwrap();
    assert_eq!(tape.value(g), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_mse_against_zero_matches_hand_derivative() {
    // loss = mean((x - 0)^2) with x = [2] -> dloss/dx = 2x = 4
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf_from(vec![1], vec![2.0], true);
    let z = tape.leaf_from(vec![1], vec![0.0], false);
    let loss = tape.mse(x, z).unwrap();
    let grads = tape.backward(loss, false).unwrap();
    assert_eq!(tape.value(grads.grad(x).unwrap()), &[4.0]);
}

#[test]
fn leaf_without_requires_grad_gets_no_gradient() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf_from(vec![2], vec![1.0, 2.0], false);
    let y = tape.leaf_from(vec![2], vec![3.0, 4.0], true);
    let s = tape.mul(x, y).unwrap();
    let loss = tape.mean_all(s);
    let grads = tape.backward(loss, false).unwrap();
    assert!(grads.grad(x).is_none());
    assert!(grads.grad(y).is_some());
}

#[test]
fn backward_twice_without_reset_errors() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf_from(vec![1], vec![1.0], true);
    let loss = tape.mul(x, x).unwrap();
    tape.backward(loss, false).unwrap();
    assert!(matches!(
        tape.backward(loss, false),
        Err(crate::error::Error::BackwardTwice)
    ));
}

#[test]
fn backward_on_non_scalar_errors() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf_from(vec![2], vec![1.0, 2.0], true);
    assert!(matches!(
        tape.backward(x, false),
        Err(crate::error::Error::NotScalar { .. })
    ));
}

#[test]
fn gradient_of_sum_of_losses_is_sum_of_gradients() {
    let x0 = Tensor::<f64>::rand_uniform(vec![2, 2], -1.0, 1.0, &mut rng(9));

    let grad_of = |build: &dyn Fn(&mut Tape<f64>, Var) -> Var| -> Vec<f64> {
        let mut tape: Tape<f64> = Tape::new();
        let mut x = x0.clone();
        x.set_requires_grad(true);
        let xv = tape.leaf(&x);
        let loss = build(&mut tape, xv);
        let grads = tape.backward(loss, false).unwrap();
        tape.value(grads.grad(xv).unwrap()).to_vec()
    };

    let la = |t: &mut Tape<f64>, x: Var| {
        let m = t.mul(x, x).unwrap();
        t.mean_all(m)
    };
    let lb = |t: &mut Tape<f64>, x: Var| {
        let r = t.relu(x);
        t.mean_all(r)
    };
    let ga = grad_of(&la);
    let gb = grad_of(&lb);
    let gsum = grad_of(&|t: &mut Tape<f64>, x: Var| {
        let a = la(t, x);
        let b = lb(t, x);
        t.add(a, b).unwrap()
    });
    for i in 0..ga.len() {
        assert!((gsum[i] - (ga[i] + gb[i])).abs() < 1e-12);
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || -> Vec<f64> {
        let mut r = rng(42);
        let x = Tensor::<f64>::rand_uniform(vec![2, 3, 8, 8], -1.0, 1.0, &mut r);
        let w = Tensor::<f64>::rand_uniform(vec![4, 3, 3, 3], -0.5, 0.5, &mut r);
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.constant(&x);
        let wv = tape.constant(&w);
        let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        let p = tape.max_pool2d(y).unwrap();
        let u = tape.upsample2x(p).unwrap();
        let sm = tape.softmax(u).unwrap();
        tape.value(sm).to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

// ---- gradient checks --------------------------------------------------

fn check_ok<OpF>(op: OpF, inputs: &[Tensor<f64>], eps: f64, tol: f64)
where
    OpF: Fn(&mut Tape<f64>, &[Var]) -> crate::error::Result<Var>,
{
    let rep = grad_check(op, inputs, eps).unwrap();
    assert!(
        rep.max_rel_err < tol,
        "max rel err {} at input {} elem {}",
        rep.max_rel_err,
        rep.worst_input,
        rep.worst_elem
    );
}

#[test]
fn grad_check_linear_op_is_exact_to_rounding() {
    let x = Tensor::<f64>::rand_uniform(vec![3, 4], -1.0, 1.0, &mut rng(21));
    check_ok(
        |t, vs| {
            let s = t.scale(vs[0], 2.5);
            Ok(t.mean_all(s))
        },
        &[x],
        1e-5,
        1e-6,
    );
}

#[test]
fn grad_check_conv2d_random() {
    let mut r = rng(22);
    let x = Tensor::<f64>::rand_uniform(vec![1, 2, 4, 4], -1.0, 1.0, &mut r);
    let w = Tensor::<f64>::rand_uniform(vec![3, 2, 3, 3], -0.5, 0.5, &mut r);
    let b = Tensor::<f64>::rand_uniform(vec![3], -0.5, 0.5, &mut r);
    check_ok(
        |t, vs| {
            let y = t.conv2d(vs[0], vs[1], Some(vs[2]), 1, 1)?;
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        },
        &[x, w, b],
        1e-5,
        1e-5,
    );
}

#[test]
fn grad_check_grid_sample_random_grid() {
    let mut r = rng(23);
    let x = Tensor::<f64>::rand_uniform(vec![1, 2, 4, 4], -1.0, 1.0, &mut r);
    // keep grid coordinates away from exact pixel centers where bilinear
    // interpolation is not differentiable
    let mut grid = Tensor::<f64>::rand_uniform(vec![1, 4, 4, 2], -0.8, 0.8, &mut r);
    for v in grid.data_mut() {
        *v += 0.0123;
    }
    check_ok(
        |t, vs| {
            let y = t.grid_sample(vs[0], vs[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        },
        &[x, grid],
        1e-6,
        1e-4,
    );
}

#[test]
fn grad_check_instance_norm_and_softmax_composites() {
    let mut r = rng(24);
    let x = Tensor::<f64>::rand_uniform(vec![2, 3, 4, 4], -1.0, 1.0, &mut r);
    let gamma = Tensor::<f64>::rand_uniform(vec![3], 0.5, 1.5, &mut r);
    let beta = Tensor::<f64>::rand_uniform(vec![3], -0.5, 0.5, &mut r);
    check_ok(
        |t, vs| {
            let y = t.instance_norm(vs[0], vs[1], vs[2], 1e-5)?;
            let s = t.softmax(y)?;
            let sq = t.mul(s, s)?;
            Ok(t.mean_all(sq))
        },
        &[x, gamma, beta],
        1e-6,
        1e-5,
    );
}

#[test]
fn grad_check_matmul_and_affine_grid() {
    let mut r = rng(25);
    let a = Tensor::<f64>::rand_uniform(vec![3, 4], -1.0, 1.0, &mut r);
    let b = Tensor::<f64>::rand_uniform(vec![5, 4], -1.0, 1.0, &mut r);
    check_ok(
        |t, vs| {
            let y = t.matmul(vs[0], vs[1], false, true)?;
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        },
        &[a, b],
        1e-6,
        1e-6,
    );

    let theta = Tensor::<f64>::rand_uniform(vec![2, 6], -0.3, 0.3, &mut r);
    let img = Tensor::<f64>::rand_uniform(vec![2, 1, 4, 4], -1.0, 1.0, &mut r);
    check_ok(
        |t, vs| {
            let g = t.affine_grid(vs[0], 4, 4)?;
            let y = t.grid_sample(vs[1], g)?;
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        },
        &[theta, img],
        1e-6,
        1e-4,
    );
}

#[test]
fn second_order_gradient_matches_finite_difference_of_first_gradient() {
    // phi(x) = mean(relu(conv(x, w))^2); inner gradient g = dphi/dw;
    // outer loss = mean(g^2). Checked against finite differences of the
    // full pipeline, which requires differentiating through backward.
    let mut r = rng(26);
    let x = Tensor::<f64>::rand_uniform(vec![1, 1, 4, 4], -1.0, 1.0, &mut r);
    let w = Tensor::<f64>::rand_uniform(vec![2, 1, 3, 3], -0.5, 0.5, &mut r);

    let outer = |t: &mut Tape<f64>, vs: &[Var]| -> crate::error::Result<Var> {
        let y = t.conv2d(vs[0], vs[1], None, 1, 1)?;
        let ry = t.relu(y);
        let sq = t.mul(ry, ry)?;
        let phi = t.mean_all(sq);
        let grads = t.backward(phi, true)?;
        let gw = grads.grad(vs[1]).expect("weight grad");
        let gsq = t.mul(gw, gw)?;
        Ok(t.mean_all(gsq))
    };
    check_ok(outer, &[x.clone(), w.clone()], 1e-5, 1e-4);
}

#[test]
fn second_order_through_grid_sample_matches_finite_difference() {
    // phi(theta) = mean(grid_sample(x, affine_grid(theta))^2);
    // outer = mean((dphi/dtheta)^2): exercises the scatter / grid-vjp
    // adjoint kernels.
    let mut r = rng(27);
    let x = Tensor::<f64>::rand_uniform(vec![1, 1, 4, 4], -1.0, 1.0, &mut r);
    let mut theta = Tensor::<f64>::from_vec(
        vec![1, 6],
        vec![0.93, 0.08, 0.06, -0.05, 1.04, -0.035],
    )
    .unwrap();
    theta.set_requires_grad(true);

    let outer = |t: &mut Tape<f64>, vs: &[Var]| -> crate::error::Result<Var> {
        let g = t.affine_grid(vs[0], 4, 4)?;
        let y = t.grid_sample(vs[1], g)?;
        let sq = t.mul(y, y)?;
        let phi = t.mean_all(sq);
        let grads = t.backward(phi, true)?;
        let gt = grads.grad(vs[0]).expect("theta grad");
        let gsq = t.mul(gt, gt)?;
        Ok(t.mean_all(gsq))
    };
    check_ok(outer, &[theta, x], 1e-6, 1e-3);
}

#[test]
fn one_hot_rejects_out_of_range_labels() {
    assert!(one_hot::<f64>(&[0, 1, 5, 2], 1, 2, 2, 5).is_err());
    let oh = one_hot::<f64>(&[0, 1, 4, 2], 1, 2, 2, 5).unwrap();
    assert_eq!(oh.shape(), &[1, 5, 2, 2]);
    // each pixel column sums to one
    for p in 0..4 {
        let s: f64 = (0..5).map(|c| oh.data()[c * 4 + p]).sum();
        assert_eq!(s, 1.0);
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_c() {
    let c = 5;
    let mut tape: Tape<f64> = Tape::new();
    let logits = tape.leaf_from(vec![2, c, 3, 3], vec![0.0; 2 * c * 9], false);
    let labels: Vec<u8> = (0..18).map(|i| (i % c) as u8).collect();
    let oh = one_hot::<f64>(&labels, 2, 3, 3, c).unwrap();
    let ohv = tape.constant(&oh);
    let ce = tape.cross_entropy_one_hot(logits, ohv).unwrap();
    assert!((tape.scalar_value(ce) - (c as f64).ln()).abs() < 1e-9);
}

#[test]
fn soft_dice_of_perfect_hard_prediction_is_one() {
    let c = 3;
    let labels: Vec<u8> = vec![0, 1, 2, 1];
    let oh = one_hot::<f64>(&labels, 1, 2, 2, c).unwrap();
    let mut tape: Tape<f64> = Tape::new();
    let p = tape.constant(&oh);
    let t = tape.constant(&oh);
    let dice = tape.soft_dice(p, t, 1e-5).unwrap();
    assert!((tape.scalar_value(dice) - 1.0).abs() < 1e-4);
}

#[test]
fn max_pool_and_upsample_shapes_and_grads() {
    let mut r = rng(30);
    let x = Tensor::<f64>::rand_uniform(vec![1, 2, 4, 4], -1.0, 1.0, &mut r);
    check_ok(
        |t, vs| {
            let p = t.max_pool2d(vs[0])?;
            let u = t.upsample2x(p)?;
            let sq = t.mul(u, u)?;
            Ok(t.mean_all(sq))
        },
        &[x],
        1e-6,
        1e-4,
    );
}

#[test]
fn concat_slice_diff_leaky_grads() {
    let mut r = rng(31);
    let a = Tensor::<f64>::rand_uniform(vec![1, 2, 3, 4], -1.0, 1.0, &mut r);
    let b = Tensor::<f64>::rand_uniform(vec![1, 3, 3, 4], -1.0, 1.0, &mut r);
    check_ok(
        |t, vs| {
            let c = t.concat_c(vs[0], vs[1])?;
            let s = t.slice_c(c, 1, 4)?;
            let l = t.leaky_relu(s, 0.1);
            let dh = t.diff_h(l)?;
            let dw = t.diff_w(l)?;
            let m1 = t.mse(dh, dh)?; // zero, keeps dh in graph
            let sq = t.mul(dw, dw)?;
            let m2 = t.mean_all(sq);
            t.add(m1, m2)
        },
        &[a, b],
        1e-6,
        1e-5,
    );
}

#[test]
fn smoothness_penalty_zero_for_constant_field() {
    let mut tape: Tape<f64> = Tape::new();
    let f = tape.leaf_from(vec![1, 2, 4, 4], vec![0.3; 32], false);
    let s = tape.smoothness(f).unwrap();
    assert_eq!(tape.scalar_value(s), 0.0);
}

#[test]
fn masked_mse_ignores_masked_out_disagreement() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.leaf_from(vec![1, 1, 2, 2], vec![1.0, 1.0, 5.0, 9.0], false);
    let b = tape.leaf_from(vec![1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0], false);
    let mask = tape.leaf_from(vec![1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0], false);
    let m = tape.masked_mse(a, b, mask, 2.0).unwrap();
    assert_eq!(tape.scalar_value(m), 0.0);
}

#[test]
fn grad_check_suite_over_seeds_small_shapes() {
    // a reduced version of the acceptance gradient sweep: every primitive
    // family on a handful of seeds, shapes <= 8x8
    for seed in 0..5u64 {
        let mut r = rng(100 + seed);
        let x = Tensor::<f64>::rand_uniform(vec![1, 2, 6, 6], -1.0, 1.0, &mut r);
        let w = Tensor::<f64>::rand_uniform(vec![2, 2, 3, 3], -0.5, 0.5, &mut r);
        check_ok(
            |t, vs| {
                let y = t.conv2d(vs[0], vs[1], None, 1, 1)?;
                let a = t.leaky_relu(y, 0.07);
                let p = t.max_pool2d(a)?;
                let sm = t.log_softmax(p)?;
                let sq = t.mul(sm, sm)?;
                Ok(t.mean_all(sq))
            },
            &[x, w],
            1e-6,
            1e-5,
        );
    }
}
