use featherpoint::autograd::BatchNormStats;
use featherpoint::nn::{build_student, ActKind, ArchSpec, FeatureModel, Graph, ModelGraph, NormKind, Op, ParamStore, ValueRef};
use featherpoint::quant::*;
use featherpoint::train::{train, Dataset, LossConfig, TrainConfig};
use featherpoint::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, n: usize, size: usize) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 1, size, size], |_| r.random::<f64>())
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.zip_map(b, |p, q| p - q).max_abs()
}

#[test]
fn round_trip_error_is_at_most_half_a_step() {
    for qp in [QuantParams::symmetric(12.7), QuantParams::affine(-0.3, 1.0), QuantParams::affine(0.5, 4.0)] {
        let s = qp.scale[0];
        let lo = qp.dequantize_value(qp.qmin, s);
        let hi = qp.dequantize_value(qp.qmax, s);
        let n = 200_000;
        let x = Tensor::from_fn(&[n + 1], |i| lo + (hi - lo) * i as f64 / n as f64);
        let y = fake_quant(&x, &qp).unwrap();
        assert!(max_diff(&x, &y) <= s / 2.0 + 1e-12, "{qp:?}");
    }
}

#[test]
fn fake_quant_is_idempotent() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(&[5000], |_| r.random_range(-3.0..3.0));
    for qp in [QuantParams::symmetric(2.0), QuantParams::affine(-1.0, 2.5)] {
        let once = fake_quant(&x, &qp).unwrap();
        assert_eq!(fake_quant(&once, &qp).unwrap(), once);
    }
}

proptest! {
    #[test]
    fn quantize_is_monotone(a in -1e3f64..1e3, b in -1e3f64..1e3, lo in -5.0f64..0.0, hi in 0.01f64..5.0) {
        let qp = QuantParams::affine(lo, hi);
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let s = qp.scale[0];
        prop_assert!(qp.quantize_value(a, s) <= qp.quantize_value(b, s));
    }

    #[test]
    fn in_range_error_bound(x in -1.0f64..1.0, m in 0.5f64..10.0) {
        let qp = QuantParams::symmetric(m);
        let t = Tensor::new(vec![1], vec![x * m]).unwrap();
        prop_assert!(max_diff(&t, &fake_quant(&t, &qp).unwrap()) <= qp.scale[0] / 2.0 + 1e-12);
    }
}

fn perturbed(norm: NormKind, seed: u64) -> ModelGraph {
    let mut m = build_student(&ArchSpec::with_kinds(norm, ActKind::Relu), seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for (name, p) in m.params.iter_mut() {
        if name.ends_with(".scale") || name.ends_with(".gamma") || name.ends_with(".bias") || name.ends_with(".beta") {
            p.value.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
        }
    }
    let names: Vec<String> = m.params.stats_iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let st: &mut BatchNormStats = m.params.stats_mut(&n).unwrap();
        st.mean.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        st.var.iter_mut().for_each(|v| *v = r.random_range(0.2..2.0));
    }
    m
}

#[test]
fn folding_preserves_eval_outputs() {
    for norm in [NormKind::BatchNorm, NormKind::Affine] {
        let m = perturbed(norm, 5);
        let f = fold_norms(&m).unwrap();
        assert!(f.graph.nodes.iter().all(|n| !matches!(n.op, Op::BatchNorm | Op::Affine)));
        assert!(f.params.stats_iter().next().is_none());
        let x = image(1, 2, 32);
        let (h0, d0) = m.infer(&x).unwrap();
        let (h1, d1) = f.infer(&x).unwrap();
        assert!(max_diff(&h0, &h1) < 1e-10 && max_diff(&d0, &d1) < 1e-10, "{norm:?}");
    }
}

#[test]
fn calibration_basics() {
    let m = fold_norms(&build_student(&ArchSpec::default(), 1).unwrap()).unwrap();
    assert!(matches!(calibrate(&m, &[]), Err(featherpoint::Error::EmptyCalibrationStream)));
    let c = calibrate(&m, &[Tensor::full(&[1, 1, 16, 16], 0.25), Tensor::full(&[2, 1, 16, 16], 0.25)]).unwrap();
    let input = &c.activations["input"];
    assert_eq!((input.min, input.max, input.count), (0.25, 0.25, 768));
    assert_eq!(input.histogram.as_ref().unwrap().total(), 768);
    assert_eq!(c.activations.len(), m.graph.nodes.len() + 1);
    assert!(c.weights.keys().all(|k| k.ends_with(".weight")));
}

#[test]
fn calibration_is_deterministic_and_merges_shards() {
    let m = fold_norms(&build_student(&ArchSpec::default(), 2).unwrap()).unwrap();
    let batches = vec![image(1, 2, 32), image(2, 2, 32), image(3, 1, 32)];
    let a = calibrate(&m, &batches).unwrap();
    assert_eq!(a, calibrate(&m, &batches).unwrap());
    let cfg = QuantConfig::default();
    assert_eq!(derive_manifest(&m, &a, &cfg).unwrap(), derive_manifest(&m, &a, &cfg).unwrap());
    let whole = calibrate(&m, &[Tensor::stack_batch(&[image(1, 2, 32), image(2, 2, 32), image(3, 1, 32)]).unwrap()]).unwrap();
    for (k, v) in &a.activations {
        let w = &whole.activations[k];
        assert_eq!((v.min, v.max, v.count, &v.channels), (w.min, w.max, w.count, &w.channels));
    }
}

#[test]
fn percentile_range_is_narrower_on_long_tails() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut x = Tensor::from_fn(&[4, 1, 32, 32], |_| r.random::<f64>());
    for i in 0..3 {
        x.data_mut()[i * 997] = 40.0 + i as f64;
    }
    let m = fold_norms(&build_student(&ArchSpec::default(), 3).unwrap()).unwrap();
    let c = calibrate(&m, &[x]).unwrap();
    let st = &c.activations["input"];
    let (lo, hi) = st.percentile_range(99.9).unwrap();
    assert!(lo >= st.min && hi < st.max && hi - lo < st.max - st.min);
    assert!(hi < 1.5);
    assert_eq!(st.percentile_range(100.0).unwrap(), (st.min, st.max));
}

#[test]
fn min_max_qparams_do_not_saturate() {
    let m = fold_norms(&perturbed(NormKind::BatchNorm, 6)).unwrap();
    let c = calibrate(&m, &[image(5, 2, 32)]).unwrap();
    let manifest = derive_manifest(&m, &c, &QuantConfig::default()).unwrap();
    let rep = dynamic_range_report(&c, &manifest).unwrap();
    assert!(rep.layers.iter().all(|l| l.saturation_fraction == 0.0));
    let pct = derive_manifest(&m, &c, &QuantConfig { percentile: Some(90.0), ..QuantConfig::default() }).unwrap();
    let rep = dynamic_range_report(&c, &pct).unwrap();
    assert!(rep.layers.iter().all(|l| (0.0..=1.0).contains(&l.saturation_fraction)));
    assert!(rep.layers.iter().any(|l| l.saturation_fraction > 0.0));
}

#[test]
fn equal_channels_have_zero_cross_channel_variance() {
    let st = RangeStats::of(&Tensor::from_fn(&[1, 3, 2, 2], |i| (i % 4) as f64), 1);
    let cal = Calibration {
        activations: [("x".to_string(), st)].into_iter().collect(),
        weights: Default::default(),
    };
    let manifest: Manifest = [("x".to_string(), QuantParams::affine(0.0, 3.0))].into_iter().collect();
    let rep = dynamic_range_report(&cal, &manifest).unwrap();
    assert_eq!(rep.layers[0].cross_channel_variance, 0.0);
    assert_eq!(rep.layers[0].range_width, 3.0);
}

#[test]
fn missing_qparams_name_the_tensor() {
    let m = fold_norms(&build_student(&ArchSpec::default(), 4).unwrap()).unwrap();
    let c = calibrate(&m, &[image(6, 1, 16)]).unwrap();
    let mut manifest = derive_manifest(&m, &c, &QuantConfig::default()).unwrap();
    manifest.shift_remove("blocks.1.conv");
    match fake_quant_forward(&m, &manifest, &image(7, 1, 16)) {
        Err(featherpoint::Error::MissingQuantParams(n)) => assert_eq!(n, "blocks.1.conv"),
        other => panic!("{other:?}"),
    }
    manifest.shift_remove("stem.0.conv.weight");
    let err = fake_quant_forward(&m, &manifest, &image(7, 1, 16)).unwrap_err();
    assert!(err.to_string().contains("stem.0.conv.weight"));
}

#[test]
fn huge_scales_reduce_weights_to_zero() {
    let m = fold_norms(&perturbed(NormKind::Affine, 8)).unwrap();
    let c = calibrate(&m, &[image(8, 1, 16)]).unwrap();
    let mut manifest = derive_manifest(&m, &c, &QuantConfig::default()).unwrap();
    for (name, qp) in manifest.iter_mut() {
        if is_weight(name) {
            qp.scale.iter_mut().for_each(|s| *s = 1e9);
        }
    }
    let mut zeroed = m.clone();
    for (name, p) in zeroed.params.iter_mut() {
        if is_weight(name) {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    let x = image(9, 1, 16);
    assert_eq!(fake_quant_forward(&m, &manifest, &x).unwrap(), fake_quant_forward(&zeroed, &manifest, &x).unwrap());
    // every activation to its zero point as well
    for (name, qp) in manifest.iter_mut() {
        if !is_weight(name) {
            qp.scale[0] = 1e9;
        }
    }
    let (h, d) = fake_quant_forward(&m, &manifest, &x).unwrap();
    assert!(h.data().iter().chain(d.data()).all(|&v| v == 0.0));
}

#[test]
fn representable_values_pass_through_exactly() {
    let mut graph = Graph::new();
    let c = graph.push("c", Op::Conv { stride: 1, pad: 1 }, vec![ValueRef::Input]);
    let r = graph.push("r", Op::Act(ActKind::Relu), vec![c]);
    graph.heatmap = r;
    graph.descmap = c;
    let mut params = ParamStore::new();
    params.insert("c.weight", Tensor::new(vec![1, 1, 3, 3], vec![1.0, -2.0, 0.0, 2.0, 1.0, -1.0, 0.0, 1.0, -1.0]).unwrap(), true);
    params.insert("c.bias", Tensor::new(vec![1], vec![3.0]).unwrap(), true);
    let model = ModelGraph {
        spec: ArchSpec::default(),
        graph,
        params,
    };
    let unit = QuantParams::affine(-128.0, 127.0);
    assert_eq!((unit.scale[0], unit.zero_point), (1.0, 0));
    let manifest: Manifest = [
        ("c.weight".to_string(), QuantParams::symmetric_per_channel(&[127.0])),
        ("input".to_string(), unit.clone()),
        ("c".to_string(), unit.clone()),
        ("r".to_string(), unit),
    ]
    .into_iter()
    .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.random_range(0..4) as f64);
    assert_eq!(fake_quant_forward(&model, &manifest, &x).unwrap(), model.infer(&x).unwrap());
}

#[test]
fn manifest_json_round_trip() {
    let m = fold_norms(&build_student(&ArchSpec::default(), 5).unwrap()).unwrap();
    let c = calibrate(&m, &[image(11, 1, 16)]).unwrap();
    let manifest = derive_manifest(&m, &c, &QuantConfig::default()).unwrap();
    let text = serde_json::to_string(&manifest).unwrap();
    let back: Manifest = serde_json::from_str(&text).unwrap();
    assert_eq!(back, manifest);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let e = &v["stem.0.conv.weight"];
    for k in ["scale", "zero_point", "scheme", "qmin", "qmax"] {
        assert!(e.get(k).is_some(), "{k}");
    }
    assert_eq!(e["scheme"], "symmetric_per_channel");
}

#[test]
fn quantized_affine_student_keeps_descriptors() {
    let data = Dataset::synthetic(12, 32, 8, 64).unwrap();
    let mut m = build_student(&ArchSpec::with_kinds(NormKind::Affine, ActKind::Relu), 12).unwrap();
    let cfg = TrainConfig { epochs: 10, ..TrainConfig::default() };
    train(&mut m, &data, &cfg, &LossConfig::default(), 12, |_| Ok(())).unwrap();
    let calib: Vec<Tensor> = data.train.chunks(8).map(|c| Tensor::stack_batch(&c.iter().map(|p| p.to_tensor()).collect::<Vec<_>>()).unwrap()).collect();
    let (q, _) = QuantizedModel::calibrated(&m, &calib, &QuantConfig::default()).unwrap();
    let held_out = Dataset::synthetic(99, 0, 4, 64).unwrap();
    let mut cos = Vec::new();
    for img in &held_out.val {
        let x = img.to_tensor();
        let (_, df) = m.infer(&x).unwrap();
        let (_, dq) = q.infer(&x).unwrap();
        let dot: f64 = df.data().iter().zip(dq.data()).map(|(a, b)| a * b).sum();
        let n = (df.data().iter().map(|a| a * a).sum::<f64>() * dq.data().iter().map(|a| a * a).sum::<f64>()).sqrt();
        cos.push(dot / n);
    }
    assert!(cos.iter().all(|&c| c > 0.99), "{cos:?}");
}
