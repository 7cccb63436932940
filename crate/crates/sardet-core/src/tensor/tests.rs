use super::*;
use crate::gradcheck::{random_input, rel_err};

fn tape64() -> Tape<f64> {
    Tape::new()
}

#[test]
fn matmul_identity_and_hand_cases() {
    let mut t = tape64();
    let eye = t.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let b = t.leaf(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
    let c = t.matmul(eye, b).unwrap();
    assert_eq!(t.data(c), &[3.0, 4.0, 5.0, 6.0]);

    let a = t.leaf(vec![1.0, 2.0], &[1, 2]).unwrap();
    let b = t.leaf(vec![3.0, 4.0], &[2, 1]).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.data(c), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = tape64();
    let a = t.leaf(vec![0.0; 6], &[2, 3]).unwrap();
    let b = t.leaf(vec![0.0; 8], &[4, 2]).unwrap();
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_counts_batch_m_n_k_macs() {
    let mut t = tape64();
    let a = t.leaf(vec![0.0; 2 * 3 * 4], &[2, 3, 4]).unwrap();
    let b = t.leaf(vec![0.0; 2 * 4 * 5], &[2, 4, 5]).unwrap();
    t.matmul(a, b).unwrap();
    assert_eq!(t.flop_counter().total(), 2 * 3 * 5 * 4);
}

#[test]
fn batched_matmul_matches_per_slice_products() {
    let a_data = random_input(40, 2 * 3 * 4);
    let b_data = random_input(41, 2 * 4 * 2);
    let mut t = tape64();
    let a = t.leaf(a_data.clone(), &[2, 3, 4]).unwrap();
    let b = t.leaf(b_data.clone(), &[2, 4, 2]).unwrap();
    let c = t.matmul(a, b).unwrap();
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0;
                for p in 0..4 {
                    want += a_data[bi * 12 + i * 4 + p] * b_data[bi * 8 + p * 2 + j];
                }
                let got = t.data(c)[bi * 6 + i * 2 + j];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_symmetry_and_stability() {
    let mut t = tape64();
    let x = t.leaf(vec![0.0, 0.0], &[2]).unwrap();
    let y = t.softmax_lastdim(x).unwrap();
    assert_eq!(t.data(y), &[0.5, 0.5]);

    let x = t.leaf(vec![1000.0, 0.0], &[2]).unwrap();
    let y = t.softmax_lastdim(x).unwrap();
    assert!(t.data(y)[0] > 1.0 - 1e-12 && t.data(y)[1] < 1e-12);
    assert!(t.data(y).iter().all(|v| v.is_finite()));
}

#[test]
fn softmax_rows_sum_to_one_at_extreme_magnitudes() {
    for seed in 0..10 {
        let xs: Vec<f64> = random_input(seed, 12).iter().map(|v| v * 1e3).collect();
        let mut t = tape64();
        let x = t.leaf(xs, &[3, 4]).unwrap();
        let y = t.softmax_lastdim(x).unwrap();
        for r in 0..3 {
            let s: f64 = t.data(y)[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            assert!(t.data(y)[r * 4..(r + 1) * 4].iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn layer_norm_constant_input_is_zeros() {
    let mut t = tape64();
    let x = t.leaf(vec![5.0; 8], &[2, 4]).unwrap();
    let gamma = t.leaf(vec![1.0; 4], &[4]).unwrap();
    let beta = t.leaf(vec![0.0; 4], &[4]).unwrap();
    let y = t.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert!(t.data(y).iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn layer_norm_two_point_standardization() {
    let mut t = tape64();
    let x = t.leaf(vec![1.0, 3.0], &[1, 2]).unwrap();
    let gamma = t.leaf(vec![1.0; 2], &[2]).unwrap();
    let beta = t.leaf(vec![0.0; 2], &[2]).unwrap();
    let y = t.layer_norm(x, gamma, beta, 1e-12).unwrap();
    assert!((t.data(y)[0] + 1.0).abs() < 1e-5);
    assert!((t.data(y)[1] - 1.0).abs() < 1e-5);
}

#[test]
fn conv2d_identity_channel_mixing() {
    // 1x1 kernel = identity over 2 channels
    let x_data = random_input(50, 2 * 3 * 3);
    let mut t = tape64();
    let x = t.leaf(x_data.clone(), &[1, 2, 3, 3]).unwrap();
    let k = t.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]).unwrap();
    let y = t.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(t.data(y), x_data.as_slice());
}

#[test]
fn conv2d_impulse_response_of_ones_kernel() {
    let mut img = vec![0.0; 5 * 5];
    img[2 * 5 + 2] = 1.0;
    let mut t = tape64();
    let x = t.leaf(img, &[1, 1, 5, 5]).unwrap();
    let k = t.leaf(vec![1.0; 9], &[1, 1, 3, 3]).unwrap();
    let y = t.conv2d(x, k, None, 1, 1).unwrap();
    let out = t.data(y);
    for oy in 0..5 {
        for ox in 0..5 {
            let inside = (1..=3).contains(&oy) && (1..=3).contains(&ox);
            let want = if inside { 1.0 } else { 0.0 };
            assert_eq!(out[oy * 5 + ox], want, "at ({oy},{ox})");
        }
    }
}

#[test]
fn conv2d_non_integral_output_is_shape_error() {
    let mut t = tape64();
    let x = t.leaf(vec![0.0; 16], &[1, 1, 4, 4]).unwrap();
    let k = t.leaf(vec![0.0; 9], &[1, 1, 3, 3]).unwrap();
    // (4 + 2 - 3) % 2 != 0
    let err = t.conv2d(x, k, None, 2, 1).unwrap_err();
    assert!(matches!(err, crate::Error::Shape(_)), "{err}");
}

#[test]
fn conv2d_counts_macs() {
    let mut t = tape64();
    let x = t.leaf(vec![0.0; 2 * 3 * 8 * 8], &[2, 3, 8, 8]).unwrap();
    let k = t.leaf(vec![0.0; 4 * 3 * 3 * 3], &[4, 3, 3, 3]).unwrap();
    t.conv2d(x, k, None, 1, 1).unwrap();
    assert_eq!(t.flop_counter().total(), 2 * 4 * 8 * 8 * 3 * 3 * 3);
    assert_eq!(t.flop_counter().for_key("conv"), t.flop_counter().total());
}

#[test]
fn upsample_definition_and_mean_downsample_inverse() {
    let mut t = tape64();
    let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
    let y = t.upsample_nearest_2x(x).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 4, 4]);
    #[rustfmt::skip]
    let want = [
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(t.data(y), &want);

    // mean over each 2x2 block recovers the source exactly
    let src = random_input(60, 2 * 3 * 3);
    let mut t = tape64();
    let x = t.leaf(src.clone(), &[1, 2, 3, 3]).unwrap();
    let y = t.upsample_nearest_2x(x).unwrap();
    let up = t.data(y);
    for p in 0..2 {
        for r in 0..3 {
            for c in 0..3 {
                let b = p * 36 + (2 * r) * 6 + 2 * c;
                let mean = (up[b] + up[b + 1] + up[b + 6] + up[b + 7]) / 4.0;
                assert_eq!(mean, src[p * 9 + r * 3 + c]);
            }
        }
    }
}

#[test]
fn add_scaled_cases() {
    let a_data = random_input(70, 6);
    let b_data = random_input(71, 6);
    let mut t = tape64();
    let a = t.leaf(a_data.clone(), &[6]).unwrap();
    let b = t.leaf(b_data.clone(), &[6]).unwrap();

    let zero = t.add_scaled(a, b, 0.0).unwrap();
    assert_eq!(t.data(zero), a_data.as_slice());

    let one = t.add_scaled(a, b, 1.0).unwrap();
    let plain = t.add(a, b).unwrap();
    assert_eq!(t.data(one), t.data(plain));

    let a2 = t.leaf(vec![1.0, 1.0], &[2]).unwrap();
    let b2 = t.leaf(vec![2.0, 4.0], &[2]).unwrap();
    let half = t.add_scaled(a2, b2, 0.5).unwrap();
    assert_eq!(t.data(half), &[2.0, 3.0]);
}

#[test]
fn backward_sum_gives_ones_and_quadratic_doubles() {
    let mut t = tape64();
    let x = t.leaf_grad(random_input(80, 6), &[2, 3]).unwrap();
    let loss = t.sum(x).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);

    let mut t = tape64();
    let x = t.leaf_grad(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum(sq).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = tape64();
    let x = t.leaf_grad(vec![1.0, 2.0], &[2]).unwrap();
    let y = t.scale(x, 2.0).unwrap();
    let err = t.backward(y).unwrap_err();
    assert!(matches!(err, crate::Error::Numeric(_)));
}

#[test]
fn backward_zeroes_unused_parameters() {
    let mut t = tape64();
    let used = t.leaf_grad(vec![2.0], &[1]).unwrap();
    let unused = t.leaf_grad(vec![3.0, 4.0], &[2]).unwrap();
    let loss = t.sum(used).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(used).unwrap(), &[1.0]);
    assert_eq!(t.grad(unused).unwrap(), &[0.0, 0.0]);
}

#[test]
fn permute_roundtrip_is_exact() {
    let data = random_input(90, 24);
    let mut t = tape64();
    let x = t.leaf(data.clone(), &[2, 3, 4]).unwrap();
    let p = t.permute(x, &[2, 0, 1]).unwrap();
    assert_eq!(t.shape(p), &[4, 2, 3]);
    let back = t.permute(p, &[1, 2, 0]).unwrap();
    assert_eq!(t.data(back), data.as_slice());
}

#[test]
fn pad_then_crop_region_matches() {
    let data = random_input(91, 2 * 3 * 3);
    let mut t = tape64();
    let x = t.leaf(data.clone(), &[1, 2, 3, 3]).unwrap();
    let padded = t.pad_zero_2d(x, 1, 1, 0, 0).unwrap();
    assert_eq!(t.shape(padded), &[1, 2, 4, 4]);
    let pd = t.data(padded);
    for c in 0..2 {
        for y in 0..3 {
            for xx in 0..3 {
                assert_eq!(pd[c * 16 + (y + 1) * 4 + (xx + 1)], data[c * 9 + y * 3 + xx]);
            }
        }
        assert_eq!(pd[c * 16], 0.0);
    }
}

#[test]
fn flop_counter_is_additive_across_ops() {
    let run_two = |both: bool| -> (u64, u64) {
        let mut t = tape64();
        let a = t.leaf(vec![0.0; 12], &[3, 4]).unwrap();
        let b = t.leaf(vec![0.0; 8], &[4, 2]).unwrap();
        t.matmul(a, b).unwrap();
        let f = t.flop_counter().total();
        if both {
            let x = t.leaf(vec![0.0; 2 * 4 * 4], &[1, 2, 4, 4]).unwrap();
            let k = t.leaf(vec![0.0; 2 * 2 * 3 * 3], &[2, 2, 3, 3]).unwrap();
            t.conv2d(x, k, None, 1, 1).unwrap();
        }
        (f, t.flop_counter().total())
    };
    let (f_only, _) = run_two(false);
    let (_, fg) = run_two(true);

    let mut t = tape64();
    let x = t.leaf(vec![0.0; 2 * 4 * 4], &[1, 2, 4, 4]).unwrap();
    let k = t.leaf(vec![0.0; 2 * 2 * 3 * 3], &[2, 2, 3, 3]).unwrap();
    t.conv2d(x, k, None, 1, 1).unwrap();
    let g_only = t.flop_counter().total();

    assert_eq!(fg, f_only + g_only);

    let mut c = t.flop_counter().clone();
    c.reset();
    assert_eq!(c.total(), 0);
}

#[test]
fn seeded_computation_is_bit_identical_across_runs() {
    let run = || -> (Vec<f64>, Vec<f64>) {
        let mut t = tape64();
        let x = t.leaf_grad(random_input(100, 24), &[2, 3, 4]).unwrap();
        let w = t.leaf_grad(random_input(101, 20), &[4, 5]).unwrap();
        let h = t.matmul(x, w).unwrap();
        let s = t.softmax_lastdim(h).unwrap();
        let gamma = t.leaf_grad(vec![1.0; 5], &[5]).unwrap();
        let beta = t.leaf_grad(vec![0.0; 5], &[5]).unwrap();
        let n = t.layer_norm(s, gamma, beta, 1e-5).unwrap();
        let g = t.gelu(n).unwrap();
        let loss = t.sum(g).unwrap();
        t.backward(loss).unwrap();
        (t.data(loss).to_vec(), t.grad(w).unwrap().to_vec())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}

#[test]
fn gelu_matches_tanh_approximation_constants() {
    let mut t = tape64();
    let x = t.leaf(vec![1.0], &[1]).unwrap();
    let y = t.gelu(x).unwrap();
    let u: f64 = 0.7978845608028654 * (1.0 + 0.044715);
    let want = 0.5 * (1.0 + u.tanh());
    assert!(rel_err(t.data(y)[0], want) < 1e-12);
}

#[test]
fn smooth_l1_branch_continuity_at_beta() {
    let beta = 1.0 / 9.0;
    let mut t = tape64();
    let p = t.leaf(vec![beta], &[1]).unwrap();
    let loss = t.smooth_l1(p, Arc::new(vec![0.0]), beta).unwrap();
    assert!((t.data(loss)[0] - beta / 2.0).abs() < 1e-12);
}

#[test]
fn bce_with_logits_indifference_is_ln2() {
    let mut t = tape64();
    let z = t.leaf(vec![0.0, 0.0], &[2]).unwrap();
    let l = t.bce_with_logits(z, Arc::new(vec![1.0, 0.0])).unwrap();
    for &v in t.data(l) {
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }
}

#[test]
fn clear_releases_all_nodes() {
    let mut t = tape64();
    let x = t.leaf(vec![1.0], &[1]).unwrap();
    t.scale(x, 2.0).unwrap();
    assert_eq!(t.len(), 2);
    t.clear();
    assert!(t.is_empty());
}
