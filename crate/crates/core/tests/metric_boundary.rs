use approx::assert_relative_eq;
use gpam::boundary::{
    classify, compute_margin, compute_range, pns_scores, softmax, BandPolicy, Boundary, Prediction,
};
use gpam::{prototype_distance, view_distance, DistanceForm, GpamError, ViewGaussian, ViewWeights};
use proptest::collection::vec;
use proptest::prelude::*;

fn gaussian(dim: usize) -> impl Strategy<Value = ViewGaussian> {
    (vec(-20.0f64..20.0, dim), vec(1e-4f64..20.0, dim))
        .prop_map(|(m, v)| ViewGaussian::new(m, v).unwrap())
}

fn point_and_gaussian() -> impl Strategy<Value = (Vec<f64>, ViewGaussian)> {
    (1usize..10).prop_flat_map(|d| (vec(-20.0f64..20.0, d), gaussian(d)))
}

proptest! {
    #[test]
    fn distances_are_nonnegative_and_vanish_at_the_mean((z, g) in point_and_gaussian()) {
        for form in [DistanceForm::Variance, DistanceForm::InverseVariance, DistanceForm::Euclidean] {
            prop_assert!(view_distance(&z, &g, form).unwrap() >= 0.0);
            prop_assert_eq!(view_distance(&g.mean, &g, form).unwrap(), 0.0);
        }
    }

    #[test]
    fn inverse_form_equals_variance_form_with_reciprocals((z, g) in point_and_gaussian()) {
        let flipped = ViewGaussian::new(g.mean.clone(), g.var.iter().map(|v| 1.0 / v).collect()).unwrap();
        let a = view_distance(&z, &g, DistanceForm::InverseVariance).unwrap();
        let b = view_distance(&z, &flipped, DistanceForm::Variance).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    #[test]
    fn variance_scales_the_distance_linearly((z, g) in point_and_gaussian(), k in 0.01f64..100.0) {
        let scaled = ViewGaussian::new(g.mean.clone(), g.var.iter().map(|v| v * k).collect()).unwrap();
        let a = view_distance(&z, &g, DistanceForm::Variance).unwrap();
        let b = view_distance(&z, &scaled, DistanceForm::Variance).unwrap();
        assert_relative_eq!(b, k * a, max_relative = 1e-12, epsilon = 1e-12);
    }

    #[test]
    fn one_hot_weights_select_a_view(
        views in vec(vec(-5.0f64..5.0, 3), 4),
        gs in vec(gaussian(3), 4),
        j in 0usize..4,
    ) {
        let views: [Vec<f64>; 4] = views.try_into().unwrap();
        let gs: [ViewGaussian; 4] = gs.try_into().unwrap();
        let mut w = [0.0; 4];
        w[j] = 1.0;
        let d = prototype_distance(&views, &gs, &ViewWeights(w), DistanceForm::Variance).unwrap();
        prop_assert_eq!(d, view_distance(&views[j], &gs[j], DistanceForm::Variance).unwrap());
    }

    #[test]
    fn accepted_class_is_inside_its_range(
        d in vec(0.0f64..10.0, 1..8),
        r in vec(0.0f64..10.0, 8),
        m in vec(0.0f64..5.0, 8),
    ) {
        let b: Vec<Boundary> = d.iter().enumerate().map(|(i, _)| Boundary { range: r[i], margin: m[i] }).collect();
        match classify(&d, &b, BandPolicy::Reject) {
            Prediction::Known(c) => {
                prop_assert!(d[c] <= b[c].range);
                prop_assert!(d.iter().zip(&b).all(|(x, bb)| *x > bb.range || *x >= d[c]));
            }
            Prediction::Nota => prop_assert!(d.iter().zip(&b).all(|(x, bb)| *x > bb.range)),
        }
        if classify(&d, &b, BandPolicy::Reject) != Prediction::Nota {
            prop_assert_eq!(classify(&d, &b, BandPolicy::Accept), classify(&d, &b, BandPolicy::Reject));
        }
    }

    #[test]
    fn range_is_translation_equivariant(xs in vec(0.0f64..10.0, 1..10), shift in 0.0f64..10.0, tau in 0.01f64..0.99) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        assert_relative_eq!(
            compute_range(&shifted, tau).unwrap(),
            compute_range(&xs, tau).unwrap() + shift,
            epsilon = 1e-9
        );
    }

    #[test]
    fn margin_is_nonnegative(neg in vec(0.0f64..10.0, 1..10), r in 0.0f64..20.0, tau in 0.01f64..0.99) {
        prop_assert!(compute_margin(&neg, r, tau).unwrap() >= 0.0);
    }

    #[test]
    fn softmax_is_a_distribution(xs in vec(-700.0f64..700.0, 1..20)) {
        let p = softmax(&xs);
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
    }
}

#[test]
fn range_brackets_single_value() {
    for tau in [0.01, 0.5, 0.99] {
        assert_eq!(compute_range(&[4.2], tau).unwrap(), 4.2);
    }
}

#[test]
fn empty_and_non_finite_inputs_are_rejected() {
    assert!(matches!(compute_range(&[], 0.1), Err(GpamError::Input(_))));
    assert!(matches!(
        compute_range(&[1.0, f64::NAN], 0.1),
        Err(GpamError::Numeric(_))
    ));
    assert!(matches!(
        compute_margin(&[], 1.0, 0.2),
        Err(GpamError::Input(_))
    ));
}

#[test]
fn all_negatives_inside_clamps_margin_to_zero() {
    assert_eq!(compute_margin(&[0.5, 1.0, 1.5], 2.0, 0.2).unwrap(), 0.0);
}

#[test]
fn pns_score_needs_positive_range() {
    let err = pns_scores(
        &[vec![1.0]],
        &[Boundary {
            range: 0.0,
            margin: 1.0,
        }],
    )
    .unwrap_err();
    assert!(matches!(err, GpamError::Numeric(_)));
}

#[test]
fn ties_go_to_the_lowest_index() {
    let b = [Boundary {
        range: 2.0,
        margin: 0.0,
    }; 3];
    assert_eq!(
        classify(&[1.0, 1.0, 1.0], &b, BandPolicy::Reject),
        Prediction::Known(0)
    );
    assert_eq!(
        classify(&[3.0, 1.0, 1.0], &b, BandPolicy::Reject),
        Prediction::Known(1)
    );
}

#[test]
fn band_policy_decides_the_buffer() {
    let b = [Boundary {
        range: 1.0,
        margin: 1.0,
    }];
    assert_eq!(classify(&[1.5], &b, BandPolicy::Reject), Prediction::Nota);
    assert_eq!(
        classify(&[1.5], &b, BandPolicy::Accept),
        Prediction::Known(0)
    );
    assert_eq!(classify(&[2.5], &b, BandPolicy::Accept), Prediction::Nota);
}
