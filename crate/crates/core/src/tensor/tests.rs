use super::gradcheck::{check_builder, finite_diff_check};
use super::{Graph, TensorError, TensorId};

fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "expected {} ~ {} (tol {})", a, b, tol);
}

fn g64() -> Graph<f64> {
    Graph::new()
}

#[test]
fn add_mul_values_and_gradients() {
    let mut g = g64();
    let a = g.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
    let b = g.leaf(vec![3.0, 5.0], vec![2], true).unwrap();
    let s = g.add(a, b).unwrap();
    let m = g.mul(s, b).unwrap();
    assert_eq!(g.data(m), &[12.0, 35.0]);
    let loss = g.sum(m).unwrap();
    g.backward(loss).unwrap();
    // d/da (a+b)*b = b; d/db = a + 2b
    assert_eq!(g.grad(a).unwrap(), &[3.0, 5.0]);
    assert_eq!(g.grad(b).unwrap(), &[11.0, 12.0]);
}

#[test]
fn fanout_accumulates_gradients_additively() {
    let mut g = g64();
    let x = g.leaf(vec![4.0], vec![1], true).unwrap();
    let y = g.add(x, x).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0]);
}

#[test]
fn backward_twice_without_reset_is_an_error() {
    let mut g = g64();
    let x = g.leaf(vec![1.0], vec![1], true).unwrap();
    let y = g.relu(x).unwrap();
    g.backward(y).unwrap();
    assert!(matches!(g.backward(y), Err(TensorError::BackwardWithoutReset)));
    g.reset_grads();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0]);
}

#[test]
fn backward_after_reset_is_bitwise_repeatable() {
    let build = || {
        let mut g = g64();
        let x = g.leaf(vec![0.3, -1.7, 2.2], vec![3], true).unwrap();
        let h = g.sigmoid(x).unwrap();
        let h2 = g.mul(h, h).unwrap();
        let loss = g.sum(h2).unwrap();
        (g, x, loss)
    };
    let (mut g, x, loss) = build();
    g.backward(loss).unwrap();
    let first: Vec<u64> = g.grad(x).unwrap().iter().map(|v| v.to_bits()).collect();
    g.reset_grads();
    g.backward(loss).unwrap();
    let second: Vec<u64> = g.grad(x).unwrap().iter().map(|v| v.to_bits()).collect();
    assert_eq!(first, second);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = g64();
    let x = g.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
    let y = g.relu(x).unwrap();
    assert!(matches!(g.backward(y), Err(TensorError::NotScalar { .. })));
}

#[test]
fn sum_and_mean_values_and_gradients() {
    let mut g = g64();
    let x = g.leaf(vec![1.0, 2.0, 3.0, 6.0], vec![4], true).unwrap();
    let m = g.mean(x).unwrap();
    assert_eq!(g.value(m), 3.0);
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25, 0.25, 0.25, 0.25]);

    let mut g = g64();
    let x = g.leaf(vec![1.0, 2.0, 3.0, 6.0], vec![4], true).unwrap();
    let s = g.sum(x).unwrap();
    assert_eq!(g.value(s), 12.0);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
}

#[test]
fn conv2d_all_ones_kernel_sums_the_window() {
    // 2x2 input, 3x3 ones kernel, pad 1: every window covers the whole input.
    let mut g = g64();
    let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 2, 2], true).unwrap();
    let w = g.leaf(vec![1.0; 9], vec![1, 1, 3, 3], true).unwrap();
    let b = g.leaf(vec![0.0], vec![1], true).unwrap();
    let y = g.conv2d(x, w, b, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 2]);
    assert_eq!(g.data(y), &[10.0, 10.0, 10.0, 10.0]);
}

#[test]
fn conv2d_stride_two_floors_the_output_size() {
    let mut g = g64();
    let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 2, 2], true).unwrap();
    let w = g.leaf(vec![1.0; 9], vec![1, 1, 3, 3], true).unwrap();
    let b = g.leaf(vec![0.0], vec![1], true).unwrap();
    let y = g.conv2d(x, w, b, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1]);
    assert_eq!(g.data(y), &[10.0]);
}

#[test]
fn conv2d_channel_mismatch_names_the_axis() {
    let mut g = g64();
    let x = g.leaf(vec![0.0; 8], vec![2, 2, 2], false).unwrap();
    let w = g.leaf(vec![0.0; 9], vec![1, 1, 3, 3], false).unwrap();
    let b = g.leaf(vec![0.0], vec![1], false).unwrap();
    match g.conv2d(x, w, b, 1, 1) {
        Err(TensorError::Shape { detail, .. }) => assert!(detail.contains("channel"), "got: {}", detail),
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn conv2d_bias_and_stride_against_hand_computation() {
    // 1x3x3 input, 2x2 kernel, no pad, stride 1 -> 2x2.
    let mut g = g64();
    let x = g.leaf((1..=9).map(f64::from).collect(), vec![1, 3, 3], true).unwrap();
    let w = g.leaf(vec![1.0, 0.0, 0.0, 2.0], vec![1, 1, 2, 2], true).unwrap();
    let b = g.leaf(vec![0.5], vec![1], true).unwrap();
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    // window at (0,0): 1*1 + 2*5 = 11 (+0.5)
    assert_eq!(g.data(y), &[11.5, 13.5, 17.5, 19.5]);
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let reports = check_builder(
        &[
            (pseudo(12, 1), vec![2, 3, 2]),       // x
            (pseudo(24, 2), vec![2, 2, 2, 3]),    // w
            (pseudo(2, 3), vec![2]),              // b
        ],
        1e-5,
        1e-6,
        &|g, ids| g.conv2d(ids[0], ids[1], ids[2], 1, 1),
    )
    .unwrap();
    for r in &reports {
        assert!(r.passed(), "failures: {:?}", r.failures);
        assert!(r.excluded.is_empty());
    }
}

#[test]
fn linear_matches_matrix_multiply_and_gradchecks() {
    let mut g = g64();
    let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true).unwrap();
    let w = g.leaf(vec![1.0, 0.0, 5.0, -1.0, 2.0, 0.5], vec![3, 2], true).unwrap();
    let b = g.leaf(vec![0.0, 1.0, -1.0], vec![3], true).unwrap();
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.shape(y), &[2, 3]);
    assert_eq!(g.data(y), &[1.0, 4.0, 3.0, 3.0, 2.0, 3.0]);

    let reports = check_builder(
        &[(pseudo(6, 4), vec![3, 2]), (pseudo(8, 5), vec![4, 2]), (pseudo(4, 6), vec![4])],
        1e-5,
        1e-6,
        &|g, ids| g.linear(ids[0], ids[1], ids[2]),
    )
    .unwrap();
    for r in &reports {
        assert!(r.passed(), "failures: {:?}", r.failures);
    }
}

#[test]
fn bilinear_sample_integer_coordinates_hit_cell_centers() {
    let mut g = g64();
    let f = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 2, 2], false).unwrap();
    let p = g.leaf(vec![0.0, 0.0, 1.0, 0.0, 0.5, 0.5], vec![3, 2], false).unwrap();
    let y = g.bilinear_sample(f, p).unwrap();
    assert_eq!(g.data(y), &[1.0, 2.0, 2.5]);
}

#[test]
fn bilinear_sample_gradient_wrt_point_is_the_local_feature_slope() {
    let mut g = g64();
    let f = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 2, 2], false).unwrap();
    let p = g.leaf(vec![0.5, 0.5], vec![1, 2], true).unwrap();
    let y = g.bilinear_sample(f, p).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    // d/dy at the cell midpoint: bottom row mean - top row mean = 3.5 - 1.5.
    assert_eq!(g.grad(p).unwrap(), &[1.0, 2.0]);
}

#[test]
fn bilinear_sample_clamps_and_zeroes_gradient_outside_range() {
    let mut g = g64();
    let f = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 2, 2], false).unwrap();
    let p = g.leaf(vec![-3.0, 0.0, 5.0, 9.0], vec![2, 2], true).unwrap();
    let y = g.bilinear_sample(f, p).unwrap();
    assert_eq!(g.data(y), &[1.0, 4.0]);
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(p).unwrap(), &[0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn bilinear_sample_gradients_match_finite_differences() {
    let reports = check_builder(
        &[(pseudo(18, 7), vec![2, 3, 3]), (vec![0.31, 1.27, 1.9, 0.05, 0.72, 1.44], vec![3, 2])],
        1e-5,
        1e-6,
        &|g, ids| g.bilinear_sample(ids[0], ids[1]),
    )
    .unwrap();
    for r in &reports {
        assert!(r.passed(), "failures: {:?}", r.failures);
        assert!(r.excluded.is_empty());
    }
}

#[test]
fn focal_loss_at_logit_zero_target_one() {
    let mut g = g64();
    let x = g.leaf(vec![0.0], vec![1], true).unwrap();
    let t = g.constant(vec![1.0], vec![1]).unwrap();
    let l = g.sigmoid_focal_loss(x, t, 0.25, 2.0).unwrap();
    // 0.25 * (1-0.5)^2 * ln 2
    assert_close(g.value(l), 0.25 * 0.25 * std::f64::consts::LN_2, 1e-15);
}

#[test]
fn focal_loss_with_gamma_zero_is_alpha_weighted_cross_entropy() {
    let mut g = g64();
    let x = g.leaf(vec![0.7, -1.3], vec![2], true).unwrap();
    let t = g.constant(vec![1.0, 0.0], vec![2]).unwrap();
    let l = g.sigmoid_focal_loss(x, t, 0.5, 0.0).unwrap();
    let ce1 = -(1.0 / (1.0 + (-0.7f64).exp())).ln();
    let ce0 = -(1.0 - 1.0 / (1.0 + 1.3f64.exp())).ln();
    assert_close(g.data(l)[0], 0.5 * ce1, 1e-12);
    assert_close(g.data(l)[1], 0.5 * ce0, 1e-12);
}

#[test]
fn focal_loss_downweights_easy_examples() {
    let mut g = g64();
    let x = g.leaf(vec![4.0, 0.0], vec![2], false).unwrap();
    let t = g.constant(vec![1.0, 1.0], vec![2]).unwrap();
    let l = g.sigmoid_focal_loss(x, t, 0.25, 2.0).unwrap();
    // Confident correct prediction incurs far less than an uncertain one.
    assert!(g.data(l)[0] < g.data(l)[1] * 1e-2);
}

#[test]
fn focal_loss_is_stable_for_extreme_logits() {
    let mut g = g64();
    let x = g.leaf(vec![60.0, -60.0], vec![2], true).unwrap();
    let t = g.constant(vec![0.0, 1.0], vec![2]).unwrap();
    let l = g.sigmoid_focal_loss(x, t, 0.25, 2.0).unwrap();
    assert!(g.data(l).iter().all(|v| v.is_finite()));
    // Hard-wrong examples approach the unweighted cross-entropy slope.
    let s = g.sum(l).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn focal_loss_gradients_match_finite_differences() {
    let reports = check_builder(&[(pseudo(6, 9), vec![6])], 1e-5, 1e-6, &|g, ids| {
        let t = g.constant(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![6])?;
        g.sigmoid_focal_loss(ids[0], t, 0.25, 2.0)
    })
    .unwrap();
    assert!(reports[0].passed(), "failures: {:?}", reports[0].failures);
}

#[test]
fn bce_with_logits_supports_soft_targets() {
    let mut g = g64();
    let x = g.leaf(vec![0.0], vec![1], true).unwrap();
    let t = g.constant(vec![0.5], vec![1]).unwrap();
    let l = g.bce_with_logits(x, t).unwrap();
    assert_close(g.value(l), std::f64::consts::LN_2, 1e-15);
    g.backward(l).unwrap();
    // sigmoid(0) - 0.5 = 0
    assert_eq!(g.grad(x).unwrap(), &[0.0]);

    let reports = check_builder(&[(pseudo(5, 11), vec![5])], 1e-5, 1e-6, &|g, ids| {
        let t = g.constant(vec![0.0, 0.25, 0.5, 0.75, 1.0], vec![5])?;
        g.bce_with_logits(ids[0], t)
    })
    .unwrap();
    assert!(reports[0].passed(), "failures: {:?}", reports[0].failures);
}

#[test]
fn elementwise_ops_match_finite_differences() {
    // Offset inputs away from relu/abs kinks.
    let vals: Vec<f64> = pseudo(8, 13).iter().map(|v| v + 0.11).collect();
    let reports = check_builder(&[(vals, vec![8])], 1e-5, 1e-6, &|g, ids| {
        let r = g.relu(ids[0])?;
        let s = g.sigmoid(r)?;
        let e = g.exp(s)?;
        let a = g.abs(e)?;
        let sc = g.affine(a, 1.7, -0.3)?;
        let m = g.mul(sc, s)?;
        g.mean(m)
    })
    .unwrap();
    assert!(reports[0].passed(), "failures: {:?}", reports[0].failures);
}

#[test]
fn layout_ops_roundtrip_values_and_gradients() {
    let mut g = g64();
    // [C=2, H=2, W=1]
    let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2, 1], true).unwrap();
    let rows = g.chw_to_rows(x).unwrap();
    assert_eq!(g.shape(rows), &[2, 2]);
    assert_eq!(g.data(rows), &[1.0, 3.0, 2.0, 4.0]);

    let perm = g.permute_cols(rows, &[1, 0]).unwrap();
    assert_eq!(g.data(perm), &[3.0, 1.0, 4.0, 2.0]);

    let rep = g.repeat_cols(perm, 2).unwrap();
    assert_eq!(g.data(rep), &[3.0, 1.0, 3.0, 1.0, 4.0, 2.0, 4.0, 2.0]);

    let gat = g.gather_rows(rep, &[1, 1]).unwrap();
    assert_eq!(g.data(gat), &[4.0, 2.0, 4.0, 2.0, 4.0, 2.0, 4.0, 2.0]);

    let cat = g.concat_cols(&[gat, gat]).unwrap();
    assert_eq!(g.shape(cat), &[2, 8]);

    let loss = g.sum(cat).unwrap();
    g.backward(loss).unwrap();
    // Row 1 of `rows` was gathered twice, repeated twice, concatenated twice.
    assert_eq!(g.grad(x).unwrap(), &[0.0, 8.0, 0.0, 8.0]);
}

#[test]
fn slice_channels_takes_a_contiguous_block() {
    let mut g = g64();
    let x = g.leaf((0..12).map(f64::from).collect(), vec![3, 2, 2], true).unwrap();
    let s = g.slice_channels(x, 1, 3).unwrap();
    assert_eq!(g.shape(s), &[2, 2, 2]);
    assert_eq!(g.data(s), &[4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    let loss = g.sum(s).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn upsample_nearest_doubles_each_axis() {
    let mut g = g64();
    let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 2, 2], true).unwrap();
    let y = g.upsample_nearest2(x).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 4]);
    assert_eq!(
        g.data(y),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0; 4]);
}

#[test]
fn quadratic_finite_difference_error_is_tiny() {
    // f(x) = sum(x^2): fd of a quadratic is exact up to rounding.
    let params = vec![0.8, -1.9, 2.4];
    let analytic: Vec<f64> = params.iter().map(|v| 2.0 * v).collect();
    let mut f = |p: &[f64]| -> Result<f64, TensorError> { Ok(p.iter().map(|v| v * v).sum()) };
    let report = finite_diff_check(&mut f, &params, &analytic, 1e-4, 1e-8).unwrap();
    assert!(report.passed());
    assert!(report.max_rel_err < 1e-8, "max rel err {}", report.max_rel_err);
}

#[test]
fn kink_at_sample_point_is_excluded_not_failed() {
    // f(x) = sum(relu(x)) evaluated exactly at x = 0.
    let params = vec![0.0, 1.0];
    let analytic = vec![0.0, 1.0]; // subgradient choice at 0
    let mut f = |p: &[f64]| -> Result<f64, TensorError> { Ok(p.iter().map(|v| v.max(0.0)).sum()) };
    let report = finite_diff_check(&mut f, &params, &analytic, 1e-4, 1e-6).unwrap();
    assert!(report.passed(), "failures: {:?}", report.failures);
    assert_eq!(report.excluded, vec![0]);
}

#[test]
fn non_finite_evaluation_names_the_perturbed_index() {
    let params = vec![1.0, 0.0];
    let analytic = vec![0.0, 0.0];
    let mut f = |p: &[f64]| -> Result<f64, TensorError> { Ok(1.0 / p[1]) };
    match finite_diff_check(&mut f, &params, &analytic, 1e-4, 1e-6) {
        Err(super::gradcheck::GradCheckError::NonFinite { index }) => assert_eq!(index, 1),
        other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn leaf_rejects_mismatched_data_length() {
    let mut g = g64();
    assert!(matches!(g.leaf(vec![1.0; 3], vec![2, 2], true), Err(TensorError::Shape { .. })));
}

/// Deterministic pseudorandom values in about [-1.2, 1.2], seeded per test.
fn pseudo(len: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    (0..len)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (((s >> 11) as f64) / ((1u64 << 52) as f64) - 1.0) * 1.2
        })
        .collect()
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        /// In-range bilinear samples are convex combinations of the four
        /// neighbouring cells, so they stay inside the local value range.
        #[test]
        fn bilinear_sample_stays_within_neighbour_hull(
            vals in proptest::collection::vec(-10.0f64..10.0, 9),
            px in 0.0f64..2.0,
            py in 0.0f64..2.0,
        ) {
            let mut g = g64();
            let f = g.leaf(vals.clone(), vec![1, 3, 3], false).unwrap();
            let p = g.leaf(vec![px, py], vec![1, 2], false).unwrap();
            let y = g.bilinear_sample(f, p).unwrap();
            let v = g.data(y)[0];
            let (x0, y0) = ((px.floor() as usize).min(1), (py.floor() as usize).min(1));
            let quad = [
                vals[y0 * 3 + x0],
                vals[y0 * 3 + x0 + 1],
                vals[(y0 + 1) * 3 + x0],
                vals[(y0 + 1) * 3 + x0 + 1],
            ];
            let lo = quad.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = quad.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{} not in [{}, {}]", v, lo, hi);
        }

        /// Sampling clamps: arbitrary finite points never read out of bounds
        /// and always produce finite output.
        #[test]
        fn bilinear_sample_is_total_on_finite_points(
            px in -100.0f64..100.0,
            py in -100.0f64..100.0,
        ) {
            let mut g = g64();
            let f = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 2, 2], false).unwrap();
            let p = g.leaf(vec![px, py], vec![1, 2], false).unwrap();
            let y = g.bilinear_sample(f, p).unwrap();
            prop_assert!(g.data(y)[0].is_finite());
        }
    }
}
