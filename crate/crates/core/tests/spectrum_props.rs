use procres::linalg::svd_small;
use procres::spectrum::{
    conv_singular_values, kernel_fft_slices, materialize_conv_operator, parse_kernel_json, project_kernel_detailed,
    read_kernel, target_sigma, write_kernel, Kernel4,
};
use procres::tensor::Rng;
use procres::Error;
use proptest::prelude::*;

fn kernel_strategy() -> impl Strategy<Value = (Kernel4, usize)> {
    (1usize..=3, 1usize..=3, 1usize..=3, 3usize..=5, any::<u64>()).prop_map(|(k, d, c, n, seed)| {
        let mut rng = Rng::new(seed);
        (Kernel4::random_uniform(k, d, c, &mut rng), n.max(k))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fft_spectrum_matches_dense_operator((kernel, n) in kernel_strategy()) {
        let fast = conv_singular_values(&kernel, n).unwrap();
        let dense = svd_small(&materialize_conv_operator(&kernel, n).unwrap()).unwrap();
        let mut slow = dense.singular_values.clone();
        slow.sort_by(|a, b| b.total_cmp(a));
        slow.truncate(fast.singular_values.len());
        prop_assert_eq!(fast.singular_values.len(), n * n * kernel.out_channels().min(kernel.in_channels()));
        for (a, b) in fast.singular_values.iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-8, "{} vs {}", a, b);
        }
    }

    #[test]
    fn slices_are_conjugate_symmetric_and_invertible((kernel, n) in kernel_strategy()) {
        let slices = kernel_fft_slices(&kernel, n).unwrap();
        prop_assert!(slices.conjugate_symmetry_error() < 1e-12);
        let back = slices.to_kernel().unwrap().truncate(kernel.k()).unwrap();
        prop_assert!(back.frobenius_distance(&kernel).unwrap() < 1e-12);
    }

    #[test]
    fn projection_flattens_nonzero_spectrum((kernel, n) in kernel_strategy(), relu in any::<bool>()) {
        let target = target_sigma(kernel.out_channels(), kernel.in_channels(), relu);
        let p = project_kernel_detailed(&kernel, n, target).unwrap();
        prop_assert!(p.max_iterations <= 30);
        let full = conv_singular_values(&p.full, n).unwrap();
        prop_assert!(full.max_deviation_from(target) <= 1e-4);
        // projecting an already-flat operator moves nothing
        let again = project_kernel_detailed(&p.full, n, target).unwrap();
        prop_assert!(again.full.frobenius_distance(&p.full).unwrap() <= 1e-6);
    }

    #[test]
    fn spectrum_scales_linearly((kernel, n) in kernel_strategy(), alpha in 0.1f64..10.0) {
        let mut scaled = kernel.clone();
        scaled.weights_mut().scale(alpha);
        let a = conv_singular_values(&kernel, n).unwrap();
        let b = conv_singular_values(&scaled, n).unwrap();
        for (x, y) in a.singular_values.iter().zip(&b.singular_values) {
            prop_assert!((alpha * x - y).abs() <= 1e-10 * (1.0 + y));
        }
    }
}

#[test]
fn delta_kernel_has_unit_spectrum() {
    let report = conv_singular_values(&Kernel4::delta(3, 4), 6).unwrap();
    assert_eq!(report.singular_values.len(), 6 * 6 * 4);
    assert!(report.singular_values.iter().all(|s| (s - 1.0).abs() < 1e-12));
}

#[test]
fn scalar_kernel_spectrum_is_its_weight() {
    let kernel = Kernel4::new(1, 1, 1, vec![3.0]).unwrap();
    let report = conv_singular_values(&kernel, 4).unwrap();
    assert_eq!(report.singular_values, vec![3.0; 16]);
}

#[test]
fn target_sigma_formula() {
    assert!((target_sigma(64, 3, false) - 4.6188).abs() < 1e-4);
    assert!((target_sigma(64, 3, true) - 4.6188 * 2f64.sqrt()).abs() < 1e-3);
    assert_eq!(target_sigma(8, 8, false), 1.0);
}

#[test]
fn kernel_file_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.json");
    let kernel = Kernel4::he_normal(3, 5, 2, &mut Rng::new(11));
    write_kernel(&path, &kernel).unwrap();
    assert_eq!(read_kernel(&path).unwrap(), kernel);
}

#[test]
fn malformed_kernel_file_reports_offset() {
    let err = parse_kernel_json("{\"k\": 1, \"d\": 1, \"c\": 1, \"weights\": [1.0,]}").unwrap_err();
    match err {
        Error::Input { offset, .. } => assert!(offset > 30, "offset {offset}"),
        other => panic!("expected input error, got {other}"),
    }
    let err = parse_kernel_json("{\"k\": 2, \"d\": 1, \"c\": 1, \"weights\": [1.0]}").unwrap_err();
    assert!(matches!(err, Error::Input { .. }), "{err}");
}
