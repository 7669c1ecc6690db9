use featherpoint::image::Plane;
use featherpoint::keypoints::*;
use featherpoint::Tensor;
use proptest::prelude::*;

/// Heatmaps on a coarse value grid so that ties are frequent.
fn heatmap() -> impl Strategy<Value = Plane> {
    (1usize..24, 1usize..24, 1u32..8).prop_flat_map(|(h, w, levels)| {
        prop::collection::vec(0..=levels, h * w).prop_map(move |v| Plane {
            h,
            w,
            data: v.into_iter().map(|l| l as f64 / levels as f64).collect(),
        })
    })
}

fn descriptors(dim: usize, max_len: usize) -> impl Strategy<Value = DescriptorSet> {
    prop::collection::vec(prop::collection::vec(-3i8..=3, dim), 0..max_len)
        .prop_map(move |rows| DescriptorSet::from_rows(dim, &rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect::<Vec<_>>()))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

proptest! {
    #[test]
    fn nms_matches_brute_force(heat in heatmap(), radius in 0usize..5) {
        prop_assert_eq!(nms(&heat, radius), nms_brute_force(&heat, radius));
    }

    #[test]
    fn nms_survivors_form_an_antichain(heat in heatmap(), radius in 1usize..5) {
        let kps = nms(&heat, radius);
        for (i, a) in kps.iter().enumerate() {
            for b in &kps[i + 1..] {
                prop_assert!(a.x.abs_diff(b.x).max(a.y.abs_diff(b.y)) > radius);
            }
        }
    }

    #[test]
    fn matching_matches_brute_force(dim in 1usize..6, a in descriptors(5, 40), b in descriptors(5, 40)) {
        let cut = |s: &DescriptorSet| DescriptorSet::from_rows(dim, &(0..s.len()).map(|i| s.row(i)[..dim].to_vec()).collect::<Vec<_>>());
        let (a, b) = (cut(&a), cut(&b));
        prop_assert_eq!(match_descriptors(&a, &b), match_brute_force(&a, &b));
    }

    #[test]
    fn matching_is_symmetric(a in descriptors(3, 30), b in descriptors(3, 30)) {
        let mut ab: Vec<(usize, usize)> = match_descriptors(&a, &b).iter().map(|m| (m.a, m.b)).collect();
        let mut ba: Vec<(usize, usize)> = match_descriptors(&b, &a).iter().map(|m| (m.b, m.a)).collect();
        ab.sort();
        ba.sort();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn mutual_matches_use_each_index_once(a in descriptors(4, 30), b in descriptors(4, 30)) {
        let m = match_descriptors(&a, &b);
        let mut sa: Vec<usize> = m.iter().map(|m| m.a).collect();
        let mut sb: Vec<usize> = m.iter().map(|m| m.b).collect();
        sa.sort();
        sa.dedup();
        sb.sort();
        sb.dedup();
        prop_assert_eq!(sa.len(), m.len());
        prop_assert_eq!(sb.len(), m.len());
        prop_assert!(m.iter().all(|m| m.distance >= 0.0));
    }

    #[test]
    fn raising_the_multiplier_never_adds_keypoints(cells in (1usize..4, 1usize..4), seed in any::<u64>(), k1 in 0.0f64..2.0, k2 in 0.0f64..2.0) {
        let (lo, hi) = (k1.min(k2), k1.max(k2));
        let heat = Plane::from_fn(8 * cells.0, 8 * cells.1, |y, x| ((seed >> ((y * 7 + x) % 60)) & 7) as f64 / 7.0);
        let desc = Tensor::ones(&[1, 2, cells.0, cells.1]);
        let count = |m: f64| {
            let state = AdaptiveState { multiplier: m, ..AdaptiveState::default() };
            extract(&heat, &desc, &state, ThresholdMode::Adaptive, NMS_RADIUS).unwrap().keypoints.len()
        };
        prop_assert!(count(hi) <= count(lo));
    }
}

#[test]
fn fixed_thresholds_are_monotone_and_extraction_deterministic() {
    let heat = Plane::from_fn(64, 64, |y, x| ((y * 31 + x * 17) % 97) as f64 / 96.0);
    let desc = Tensor::from_fn(&[1, 8, 8, 8], |i| ((i * 7919) % 13) as f64 - 6.0);
    let state = AdaptiveState::default();
    let counts: Vec<usize> = FIXED_THRESHOLDS
        .iter()
        .map(|&t| extract(&heat, &desc, &state, ThresholdMode::Fixed(t), NMS_RADIUS).unwrap().keypoints.len())
        .collect();
    assert!(counts.windows(2).all(|c| c[1] <= c[0]), "{counts:?}");

    let a = extract(&heat, &desc, &state, ThresholdMode::Adaptive, NMS_RADIUS).unwrap();
    let b = extract(&heat, &desc, &state, ThresholdMode::Adaptive, NMS_RADIUS).unwrap();
    assert_eq!((&a.keypoints, &a.descriptors, a.threshold, a.state), (&b.keypoints, &b.descriptors, b.threshold, b.state));
    assert!(!a.keypoints.is_empty());
    for i in 0..a.descriptors.len() {
        let n = a.descriptors.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
}

#[test]
fn euclidean_and_cosine_rankings_agree() {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut draw = || unit(&(0..16).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>());
    let q = draw();
    let mut pts: Vec<(f64, f64)> = (0..1000)
        .map(|_| {
            let p = draw();
            let d2: f64 = q.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
            let cos: f64 = q.iter().zip(&p).map(|(a, b)| a * b).sum();
            assert!((d2 - (2.0 - 2.0 * cos)).abs() < 1e-12);
            (d2, cos)
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!(pts.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12));
}
