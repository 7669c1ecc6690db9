use featherpoint::bench::hpatches::{self, export, load};
use featherpoint::bench::pnm::{self, PnmFormat, PnmImage};
use featherpoint::bench::synth::{benchmark_pairs, generate_sequence};
use featherpoint::bench::*;
use featherpoint::geometry::Homography;
use featherpoint::keypoints::Keypoint;
use featherpoint::nn::{build_student, ArchSpec};
use proptest::prelude::*;

fn pnm_image() -> impl Strategy<Value = PnmImage> {
    (
        prop::sample::select(vec![PnmFormat::P2, PnmFormat::P3, PnmFormat::P5, PnmFormat::P6]),
        1usize..12,
        1usize..12,
        1u16..=255,
    )
        .prop_flat_map(|(format, width, height, maxval)| {
            prop::collection::vec(0..=maxval, width * height * format.channels()).prop_map(move |samples| PnmImage {
                format,
                width,
                height,
                maxval,
                samples,
            })
        })
}

fn keypoints(max: usize) -> impl Strategy<Value = Vec<Keypoint>> {
    prop::collection::vec((0usize..64, 0usize..48), 0..max)
        .prop_map(|v| v.into_iter().map(|(x, y)| Keypoint { x, y, score: 1.0 }).collect())
}

proptest! {
    #[test]
    fn pnm_write_then_read_is_identity(img in pnm_image()) {
        prop_assert_eq!(pnm::decode(&pnm::encode(&img)).unwrap(), img);
    }

    #[test]
    fn repeatability_is_symmetric_and_bounded(a in keypoints(30), b in keypoints(30), tx in -4.0f64..4.0, ty in -4.0f64..4.0, s in 0.8f64..1.2) {
        let h = Homography::from_rows([[s, 0.05, tx], [-0.03, s, ty], [1e-4, 0.0, 1.0]]).unwrap();
        let ab = repeatability(&a, &b, &h, EPS_PX).unwrap();
        let ba = repeatability(&b, &a, &h.inverse().unwrap(), EPS_PX).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&ab));
    }
}

#[test]
fn exported_directory_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let seqs: Vec<_> = (0..4u64)
        .map(|i| generate_sequence(i, if i % 2 == 0 { PairKind::Illumination } else { PairKind::Viewpoint }, 48, 64).unwrap())
        .collect();
    export(tmp.path(), &seqs).unwrap();
    let loaded = load(tmp.path()).unwrap();
    assert!(loaded.skipped.is_empty());
    assert_eq!(loaded.sequences, 4);

    let mut expected = Vec::new();
    for s in &seqs {
        let mut s = s.clone();
        s.images = s.images.iter().map(pnm::quantize_8bit).collect();
        expected.extend(s.pairs());
    }
    expected.sort_by(|a, b| a.name.cmp(&b.name));
    assert_eq!(loaded.pairs, expected);
    for p in &loaded.pairs {
        assert_eq!(p.kind == PairKind::Illumination, p.h_ab.is_identity());
    }
}

#[test]
fn malformed_homography_skips_only_that_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let seqs = vec![
        generate_sequence(1, PairKind::Viewpoint, 32, 32).unwrap(),
        generate_sequence(2, PairKind::Illumination, 32, 32).unwrap(),
    ];
    export(tmp.path(), &seqs).unwrap();
    let victim = tmp.path().join(&seqs[0].name).join("H_1_3");
    std::fs::write(&victim, "1 0 0 0 1 0 0 0\n").unwrap();
    let loaded = load(tmp.path()).unwrap();
    assert_eq!(loaded.skipped.len(), 1);
    assert_eq!(loaded.skipped[0].item, format!("{}/H_1_3", seqs[0].name));
    assert_eq!(loaded.pairs.len(), 9);
    assert_eq!(loaded.sequences, 2);
}

#[test]
fn unreadable_reference_drops_sequence_and_empty_dir_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let seqs = vec![generate_sequence(3, PairKind::Viewpoint, 32, 32).unwrap(), generate_sequence(4, PairKind::Viewpoint, 32, 32).unwrap()];
    export(tmp.path(), &seqs).unwrap();
    std::fs::write(tmp.path().join(&seqs[1].name).join("1.pgm"), b"P5\n4 4\n255\n").unwrap();
    let loaded = load(tmp.path()).unwrap();
    assert_eq!(loaded.sequences, 1);
    assert_eq!(loaded.skipped[0].item, seqs[1].name);

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load(empty.path()), Err(featherpoint::Error::NoSequences(_))));
    assert!(hpatches::parse_homography("1 0 0 0 0 0 0 0 0").is_err());
}

#[test]
fn benchmark_is_deterministic_and_bounded() {
    let model = build_student(&ArchSpec::default(), 5).unwrap();
    let pairs = benchmark_pairs(9, 4, 64, 64).unwrap();
    let cfg = InferenceConfig::default();
    let a = run_benchmark(&model, &pairs, &cfg).unwrap();
    let b = run_benchmark(&model, &pairs, &cfg).unwrap();
    assert_eq!(a, b);
    for v in [a.rep_i, a.rep_v, a.cor_i, a.cor_v] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!((a.pairs_i, a.pairs_v), (2, 2));
}
