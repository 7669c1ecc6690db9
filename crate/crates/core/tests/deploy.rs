use featherpoint::deploy::*;
use featherpoint::nn::{build_student, ActKind, ArchSpec, Graph, ModelGraph, NormKind, Op, ParamStore, ValueRef};
use featherpoint::Tensor;
use proptest::prelude::*;

fn single_conv(k: usize, pad: usize) -> ModelGraph {
    let mut graph = Graph::new();
    let c = graph.push("c", Op::Conv { stride: 1, pad }, vec![ValueRef::Input]);
    let s = graph.push("s", Op::PixelShuffle(1), vec![c]);
    graph.heatmap = s;
    graph.descmap = c;
    let mut params = ParamStore::new();
    params.insert("c.weight", Tensor::zeros(&[1, 1, k, k]), true);
    params.insert("c.bias", Tensor::zeros(&[1]), true);
    ModelGraph {
        spec: ArchSpec::default(),
        graph,
        params,
    }
}

#[test]
fn conv_weight_bytes() {
    let m = single_conv(3, 1);
    assert_eq!(weights_size(&m, Precision::Float32), 40);
    assert_eq!(weights_size(&m, Precision::Int8), 14);
}

#[test]
fn conv_macs_and_free_data_movement() {
    let m = single_conv(3, 1);
    assert_eq!(mac_count(&m, &[1, 1, 8, 8]).unwrap(), 576);
    let mut g = Graph::new();
    let s = g.push("s", Op::PixelShuffle(2), vec![ValueRef::Input]);
    g.heatmap = s;
    g.descmap = s;
    let shuffle = ModelGraph {
        spec: ArchSpec::default(),
        graph: g,
        params: ParamStore::new(),
    };
    assert_eq!(mac_count(&shuffle, &[1, 4, 8, 8]).unwrap(), 0);
}

fn step(name: &str, inputs: Vec<ValueRef>, out_bytes: u64) -> Step {
    Step {
        name: name.into(),
        inputs,
        out_bytes,
    }
}

#[test]
fn chain_peak_is_during_first_op() {
    let s = Schedule {
        input_bytes: 100 * 4,
        steps: vec![step("b", vec![ValueRef::Input], 50 * 4), step("c", vec![ValueRef::Node(0)], 25 * 4)],
        outputs: vec![ValueRef::Node(1)],
    };
    let l = s.liveness().unwrap();
    assert_eq!(l.peak_bytes, 600);
    assert_eq!(l.peak_step, 0);
}

fn residual() -> Schedule {
    Schedule {
        input_bytes: 400,
        steps: vec![
            step("a", vec![ValueRef::Input], 200),
            step("b", vec![ValueRef::Node(0)], 400),
            step("add", vec![ValueRef::Node(1), ValueRef::Input], 400),
        ],
        outputs: vec![ValueRef::Node(2)],
    }
}

#[test]
fn skip_connection_holds_the_input() {
    // step 0: in + a; step 1: in + a + b; step 2: in + b + add
    let l = residual().liveness().unwrap();
    assert_eq!(l.table.iter().map(|r| r.bytes).collect::<Vec<_>>(), vec![600, 1000, 1200]);
    assert_eq!(l.peak_bytes, 1200);
    assert_eq!(l.table[2].live, vec!["input", "b", "add"]);
}

#[test]
fn renaming_does_not_change_peak() {
    let mut s = residual();
    let base = s.liveness().unwrap().peak_bytes;
    for (i, st) in s.steps.iter_mut().enumerate() {
        st.name = format!("renamed_{}", 7 - i);
    }
    assert_eq!(s.liveness().unwrap().peak_bytes, base);
}

#[test]
fn forward_reference_is_rejected() {
    let s = Schedule {
        input_bytes: 1,
        steps: vec![step("a", vec![ValueRef::Node(0)], 1)],
        outputs: vec![ValueRef::Node(0)],
    };
    assert!(s.liveness().is_err());
    assert!(peak_brute_force(&s).is_err());
}

fn arb_schedule() -> impl Strategy<Value = Schedule> {
    (1usize..16).prop_flat_map(|n| {
        let steps = (0..n)
            .map(|i| {
                (prop::collection::vec(0..=i, 1..=3), 1u64..1000).prop_map(move |(ins, b)| Step {
                    name: format!("n{i}"),
                    inputs: ins.into_iter().map(|k| if k == 0 { ValueRef::Input } else { ValueRef::Node(k - 1) }).collect(),
                    out_bytes: b,
                })
            })
            .collect::<Vec<_>>();
        (1u64..1000, steps, prop::collection::vec(0..n, 1..=2)).prop_map(|(input_bytes, steps, outs)| Schedule {
            input_bytes,
            steps,
            outputs: outs.into_iter().map(ValueRef::Node).collect(),
        })
    })
}

proptest! {
    #[test]
    fn sweep_matches_brute_force(s in arb_schedule()) {
        prop_assert_eq!(s.liveness().unwrap().peak_bytes, peak_brute_force(&s).unwrap());
    }

    #[test]
    fn margin_is_antitone_in_weights(w in 0u64..10_000_000, d in 0u64..1_000_000, p in 0u64..10_000_000) {
        let b = DEFAULT_BUDGET_BYTES;
        prop_assert!(check_budget(w + d, p, b).margin <= check_budget(w, p, b).margin);
        prop_assert_eq!(check_budget(w, p, b).fits, w + p <= b);
    }
}

// Hand computation for the default student (Affine + ReLU, stem 32
// channels over three stride-2 convolutions, three 3x3 blocks at 32,
// heads at 64) on a 64x64 input. See the layer table in the README.
#[test]
fn default_student_matches_layer_table() {
    let m = build_student(&ArchSpec::default(), 0).unwrap();
    // conv 1->16, 16->32, 32->32, 3 x 32->32, det 32->64, desc 32->64 (weights + bias)
    let conv = [16 * 9 + 16, 32 * 16 * 9 + 32, 32 * 32 * 9 + 32, 3 * (32 * 32 * 9 + 32), 64 * 32 * 9 + 64, 64 * 32 * 9 + 64];
    // affine scale + bias after every stem and block conv
    let affine = [2 * 16, 2 * 32, 2 * 32, 3 * 2 * 32];
    let params: u64 = conv.iter().chain(&affine).sum();
    assert_eq!(params, 79_136);
    assert_eq!(weights_size(&m, Precision::Float32), 316_544);
    // one scale per output channel of the 8 conv weights and 6 affine scales
    let scales = (16 + 32 + 32 + 3 * 32 + 64 + 64) + (16 + 32 + 32 + 3 * 32);
    assert_eq!(weights_size(&m, Precision::Int8), 79_136 + 4 * scales);
    assert_eq!(weights_size(&m, Precision::Int8), 81_056);

    let macs: u64 = 16 * 32 * 32 * 9 // stem.0 at 32x32
        + 16 * 32 * 32 // affine
        + 32 * 16 * 16 * 16 * 9 // stem.1 at 16x16
        + 32 * 16 * 16
        + 32 * 8 * 8 * 32 * 9 // stem.2 at 8x8
        + 32 * 8 * 8
        + 3 * (32 * 8 * 8 * 32 * 9 + 32 * 8 * 8)
        + 64 * 8 * 8 * 32 * 9 // det.conv
        + 64 * 8 * 8 * 32 * 9 // desc.conv
        + 64 * 8 * 8; // l2 sum of squares
    assert_eq!(macs, 6_082_560);
    assert_eq!(mac_count(&m, &[1, 1, 64, 64]).unwrap(), macs);

    // stem.0.norm reads stem.0.conv: 2 x 16x32x32 elements at 4 bytes
    let live = peak_activation(&m, &[1, 1, 64, 64], 4).unwrap();
    assert_eq!(live.peak_bytes, 2 * 16 * 32 * 32 * 4);
    assert_eq!(live.table[live.peak_step].node, "stem.0.norm");
}

#[test]
fn int8_is_smaller_than_float() {
    for norm in [NormKind::Affine, NormKind::BatchNorm] {
        let m = build_student(&ArchSpec::with_kinds(norm, ActKind::Relu), 1).unwrap();
        assert!(weights_size(&m, Precision::Int8) < weights_size(&m, Precision::Float32));
    }
}

#[test]
fn reported_figures_fit_the_budget() {
    let w = kb_to_bytes(600.77);
    let a = kb_to_bytes(827.25);
    assert_eq!((w, a), (615_188, 847_104));
    let b = check_budget(w, a, DEFAULT_BUDGET_BYTES);
    assert!(b.fits);
    assert_eq!(b.margin, 2_941_727);
    assert!(!check_budget(weights_size(&single_conv(3, 1), Precision::Float32), 1000, KB).fits);
}

#[test]
fn report_json_fields() {
    let m = build_student(&ArchSpec::default(), 0).unwrap();
    let r = memory_report(&m, &[1, 1, 64, 64], Precision::Int8, DEFAULT_BUDGET_BYTES).unwrap();
    let v = serde_json::to_value(&r).unwrap();
    for k in ["weights_bytes", "peak_activation_bytes", "mac_count", "budget_bytes", "fits", "margin", "live_table"] {
        assert!(v.get(k).is_some(), "{k}");
    }
    assert_eq!(r.peak_activation_bytes, 2 * 16 * 32 * 32);
}
