use geolle_core::fusion::oracle::{hdgffm_oracle_variant, oracle_gate, oracle_self_attention};
use geolle_core::fusion::{
    channel_attention_map, correlation_gate, cross_attention, hdgffm_forward_variant,
    self_attention, FusionVariant, HdgffmParams,
};
use geolle_core::verify::random_instance;
use geolle_core::Tensor;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, vals: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| vals[i % vals.len()])
}

fn feature() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<f64>)> {
    (1usize..=2, 1usize..=6, 1usize..=5, 1usize..=5).prop_flat_map(|(n, c, h, w)| {
        (
            Just(n),
            Just(c),
            Just(h),
            Just(w),
            prop::collection::vec(-3.0f64..3.0, n * c * h * w),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions((n, c, h, w, vals) in feature(), tau in 1e-3f64..10.0, wseed in any::<u64>()) {
        let x = Tensor::new(vec![n, c, h, w], vals).unwrap();
        let p = HdgffmParams::<f64>::random(c, c, FusionVariant::Gated, true, wseed, 1.0);
        let a = channel_attention_map(&x, &x, &p.w_q, &p.w_k, tau).unwrap();
        prop_assert!(a.max_row_sum_error() < 1e-12);
        prop_assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn graph_block_matches_loop_oracle(seed in any::<u64>()) {
        let inst = random_instance(seed, 8, 5);
        let got = hdgffm_forward_variant(&inst.img, &inst.depth, &inst.params, inst.variant).unwrap();
        let want = hdgffm_oracle_variant(&inst.img, &inst.depth, &inst.params, inst.variant).unwrap();
        prop_assert!(got.max_abs_diff(&want) < 1e-12);
        prop_assert!(got.data().iter().all(|v| v.is_finite()));
        prop_assert_eq!(got.shape(), inst.img.shape());
    }

    #[test]
    fn self_attention_matches_oracle(seed in any::<u64>()) {
        let inst = random_instance(seed, 8, 5);
        let got = self_attention(&inst.img, &inst.params).unwrap();
        let want = oracle_self_attention(&inst.img, &inst.params).unwrap();
        prop_assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn gate_is_strictly_inside_unit_interval((n, c, h, w, vals) in feature(), seed in any::<u64>()) {
        let a = Tensor::new(vec![n, c, h, w], vals.clone()).unwrap();
        let b = Tensor::new(vec![n, c, h, w], vals.iter().map(|v| -0.5 * v).collect()).unwrap();
        let p = HdgffmParams::<f64>::random(c, c, FusionVariant::Gated, true, seed, 1.0);
        let g = correlation_gate(&a, &b, &p).unwrap();
        prop_assert!(g.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        prop_assert!(g.max_abs_diff(&oracle_gate(&a, &b, &p).unwrap()) < 1e-12);
    }

    #[test]
    fn key_channel_permutation_permutes_columns((n, c, h, w, vals) in feature(), tau in 0.01f64..2.0, shift in 0usize..6) {
        let x = Tensor::new(vec![n, c, h, w], vals).unwrap();
        let hw = h * w;
        // Cyclic shift of the key channels, with an identity key projection.
        let perm = |j: usize| (j + shift) % c;
        let mut xp = x.clone();
        for b in 0..n {
            for j in 0..c {
                let src = &x.data()[(b * c + perm(j)) * hw..][..hw].to_vec();
                xp.data_mut()[(b * c + j) * hw..][..hw].copy_from_slice(src);
            }
        }
        let eye = Tensor::from_fn(vec![c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let a = channel_attention_map(&x, &x, &eye, &eye, tau).unwrap();
        let ap = channel_attention_map(&x, &xp, &eye, &eye, tau).unwrap();
        for b in 0..n {
            for i in 0..c {
                for j in 0..c {
                    prop_assert!((ap.get(b, i, j) - a.get(b, i, perm(j))).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn two_channel_worked_example() {
    // Channels (1, 0) at a single pixel: logits [[1, 0], [0, 0]].
    let x = tensor(vec![1, 2, 1, 1], &[1.0, 0.0]);
    let eye = tensor(vec![2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]);
    let a = channel_attention_map(&x, &x, &eye, &eye, 1.0).unwrap();
    let e = std::f64::consts::E;
    let want = [e / (e + 1.0), 1.0 / (e + 1.0), 0.5, 0.5];
    for (got, want) in a.data.iter().zip(want) {
        assert!((got - want).abs() < 1e-15);
    }
}

#[test]
fn scalar_gate_worked_example() {
    let mut p = HdgffmParams::<f64>::zeros(1, 1, FusionVariant::Gated);
    p.gate_w = Some(tensor(vec![1, 2, 1, 1], &[1.0, 1.0]));
    let g = correlation_gate(
        &tensor(vec![1, 1, 1, 1], &[1.0]),
        &tensor(vec![1, 1, 1, 1], &[2.0]),
        &p,
    )
    .unwrap();
    assert!((g.data()[0] - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-15);
    assert!((g.data()[0] - 0.95257).abs() < 1e-5);
}

#[test]
fn degenerate_cross_attention_equals_self_attention() {
    let inst = random_instance(17, 6, 4);
    let mut p = inst.params.clone();
    p.w_q_cross = None;
    p.w_k_depth = p.w_k.clone();
    p.w_v_depth = p.w_v.clone();
    let cross = cross_attention(&inst.img, &inst.img, &p).unwrap();
    let own = self_attention(&inst.img, &p).unwrap();
    assert_eq!(cross, own);
}
