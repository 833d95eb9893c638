use procres::net::{
    build_network, corollary_network, grad_check, load_checkpoint, probe_network, save_checkpoint, ArchSpec,
    Architecture, Mode, ProbeSpec,
};
use procres::probe::{corollary1_delta, read_ratio_csv, record_ratios, theorem2_delta, RatioCsv, RecordMeta};
use procres::spectrum::{conv_singular_values, target_sigma};
use procres::tensor::{ComplexMatrix, RealTensor, Rng};
use procres::Error;
use proptest::prelude::*;

fn tiny(architecture: Architecture) -> ArchSpec {
    ArchSpec {
        architecture,
        depth: 3,
        widths: vec![2, 2, 3],
        input_size: 6,
        classes: 3,
        input_channels: 2,
        expansion: 2,
        proc_kernel: 3,
    }
}

fn batch(n: usize, spec: &ArchSpec, seed: u64) -> (RealTensor, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let x = RealTensor::randn(&[n, spec.input_channels, spec.input_size, spec.input_size], 1.0, &mut rng);
    let labels = (0..n).map(|i| i % spec.classes).collect();
    (x, labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn backprop_matches_finite_differences(seed in 0u64..1000, arch in 0usize..3) {
        let spec = tiny([Architecture::Plain, Architecture::Resnet, Architecture::Procresnet][arch]);
        let net = build_network(&spec, &mut Rng::new(seed)).unwrap();
        let (x, y) = batch(3, &spec, seed + 1);
        let err = grad_check(&net, &x, &y, 1e-5).unwrap();
        prop_assert!(err <= 1e-4, "relative error {}", err);
    }

    #[test]
    fn ratios_are_boundary_norm_quotients(seed in 0u64..1000) {
        let spec = tiny(Architecture::Resnet);
        let mut net = build_network(&spec, &mut Rng::new(seed)).unwrap();
        let (x, y) = batch(4, &spec, seed);
        let (_, tape) = net.forward(&x, &y, Mode::Train).unwrap();
        let report = net.backward(&tape).unwrap();
        let meta = RecordMeta { run_id: "r", epoch: 1, step: 0 };
        let records = record_ratios(&report, &net, &meta).unwrap();
        prop_assert_eq!(records.len(), spec.depth);
        for (l, r) in records.iter().enumerate() {
            let gin = report.boundaries[l].l2_norm();
            let gout = report.boundaries[l + 1].l2_norm();
            prop_assert_eq!(r.block_index, l + 1);
            prop_assert!((r.ratio.unwrap() - gin / gout).abs() <= 1e-12 * (1.0 + gin / gout));
        }
    }
}

#[test]
fn conv_star_layers_start_projected() {
    let spec = ProbeSpec {
        c: 3,
        d: 5,
        input_channels: 2,
        input_size: 5,
        hidden: 4,
        classes: 3,
        projected: true,
    };
    let net = probe_network(&spec, &mut Rng::new(2)).unwrap();
    let conv = match &net.blocks[0].branch[0] {
        procres::net::Layer::Conv(c) => c,
        _ => panic!("probed block starts with a convolution"),
    };
    // the stored kernel is truncated to 3x3, so its spectrum is only near the target
    let s = conv_singular_values(&conv.kernel, 5).unwrap();
    let t = target_sigma(5, 3, true);
    assert!(s.sigma_max < 2.0 * t && s.sigma_max > 0.5 * t);
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let spec = tiny(Architecture::Procresnet);
    let mut net = build_network(&spec, &mut Rng::new(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_checkpoint(&net, dir.path(), "tiny").unwrap();
    let mut back = load_checkpoint(&manifest).unwrap();
    let (x, y) = batch(2, &spec, 9);
    let (a, _) = net.forward(&x, &y, Mode::Eval).unwrap();
    let (b, _) = back.forward(&x, &y, Mode::Eval).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn truncated_checkpoint_blob_is_rejected() {
    let spec = tiny(Architecture::Resnet);
    let net = build_network(&spec, &mut Rng::new(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_checkpoint(&net, dir.path(), "tiny").unwrap();
    let blob = dir.path().join("tiny.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(load_checkpoint(&manifest).is_err());
}

#[test]
fn ratio_csv_round_trip() {
    let spec = tiny(Architecture::Procresnet);
    let mut net = build_network(&spec, &mut Rng::new(1)).unwrap();
    let (x, y) = batch(3, &spec, 1);
    let (_, tape) = net.forward(&x, &y, Mode::Train).unwrap();
    let report = net.backward(&tape).unwrap();
    let meta = RecordMeta { run_id: "p", epoch: 2, step: 7 };
    let records = record_ratios(&report, &net, &meta).unwrap();
    let mut sink = RatioCsv::new(Vec::new()).unwrap();
    sink.append(&records).unwrap();
    let text = String::from_utf8(sink.finish().unwrap()).unwrap();
    let parsed = read_ratio_csv(&text).unwrap();
    assert_eq!(parsed.len(), records.len());
    for (a, b) in parsed.iter().zip(&records) {
        assert_eq!(a.block_kind, b.block_kind);
        assert!((a.ratio.unwrap() - b.ratio.unwrap()).abs() <= 1e-7 * b.ratio.unwrap());
    }
    assert_eq!(parsed[0].block_kind, "transition-proposed");
}

#[test]
fn corollary_delta_is_product_of_norms() {
    let net = corollary_network(2, 3, 4, 2, 3, 0.2, &mut Rng::new(4)).unwrap();
    let delta = corollary1_delta(&net.blocks[0], 4).unwrap();
    assert!(delta > 0.0 && delta < 1.0, "{delta}");
    let plain = build_network(&tiny(Architecture::Plain), &mut Rng::new(4)).unwrap();
    assert!(matches!(corollary1_delta(&plain.blocks[0], 4), Err(Error::Applicability(_))));
}

#[test]
fn theorem2_constant_by_hand() {
    let r = ComplexMatrix::identity(3).scaled(std::f64::consts::E);
    let b = theorem2_delta(&r, 8).unwrap();
    let c = 2.0 * (std::f64::consts::PI.sqrt() + 3f64.sqrt()).powi(2);
    assert!((b.gamma - 1.0).abs() < 1e-12);
    assert!((b.c - c).abs() < 1e-10);
    assert!((b.delta - c / 8.0).abs() < 1e-10);
    let singular = ComplexMatrix::from_diag(&[1.0, 0.0]);
    assert!(matches!(theorem2_delta(&singular, 4), Err(Error::Singular(_))));
}
