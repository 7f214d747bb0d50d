use ctxpeft_core::adaptors::materialize_delta_oracle;
use ctxpeft_core::einsum::{einsum_context, einsum_context_one_hot};
use ctxpeft_core::rng;
use ctxpeft_core::{ContextId, Tensor};
use proptest::prelude::*;

fn instance(seed: u64, l: usize, c: usize, d: usize, r: usize, dd: usize) -> (Tensor, Tensor, Tensor, Vec<ContextId>) {
    let mut g = rng::seeded(seed);
    let x = rng::uniform_tensor(&mut g, &[l, d], -1.0, 1.0);
    let a = rng::uniform_tensor(&mut g, &[c, d, r], -1.0, 1.0);
    let b = rng::uniform_tensor(&mut g, &[c, r, dd], -1.0, 1.0);
    let ids = rng::permutation(&mut g, l.max(c));
    let ctx = (0..l).map(|i| ContextId::new(ids[i % ids.len()] % c)).collect();
    (x, a, b, ctx)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn matches_materialised_delta(
        seed in any::<u64>(),
        l in 1usize..=16,
        c in 1usize..=16,
        d in 1usize..=16,
        r in 1usize..=16,
        dd in 1usize..=16,
    ) {
        let (x, a, b, ctx) = instance(seed, l, c, d, r, dd);
        let fast = einsum_context(&x, &a, &b, &ctx).unwrap();
        let oracle = materialize_delta_oracle(&x, &a, &b, &ctx).unwrap();
        prop_assert_eq!(fast.shape(), &[l, dd]);
        prop_assert!(fast.max_abs_diff(&oracle) <= 1e-5, "diff {}", fast.max_abs_diff(&oracle));
    }
}

#[test]
fn paper_shaped_instance() {
    // Unit-RMS hidden states and LoRA factors at their N(0, 0.02) init scale.
    let mut g = rng::seeded(42);
    let x = rng::normal_tensor(&mut g, &[128, 768], 1.0);
    let a = rng::normal_tensor(&mut g, &[2, 768, 64], 0.02);
    let b = rng::normal_tensor(&mut g, &[2, 64, 768], 0.02);
    let ctx: Vec<ContextId> = (0..128).map(|i| ContextId::new(usize::from((1..65).contains(&i)))).collect();
    let fast = einsum_context(&x, &a, &b, &ctx).unwrap();
    let oracle = materialize_delta_oracle(&x, &a, &b, &ctx).unwrap();
    let diff = fast.max_abs_diff(&oracle);
    assert!(diff <= 1e-4, "max abs diff {diff}");
}

#[test]
fn hand_expanded_two_contexts() {
    // Row 0 uses context 0 (A = [1, 2], B = [3, 4]); row 1 uses context 1 (A = [0, 1], B = [2, 0]).
    let x = Tensor::new(&[2, 2], vec![1.0, 1.0, 2.0, 5.0]).unwrap();
    let a = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 0.0, 1.0]).unwrap();
    let b = Tensor::new(&[2, 1, 2], vec![3.0, 4.0, 2.0, 0.0]).unwrap();
    let out = einsum_context(&x, &a, &b, &[ContextId::new(0), ContextId::new(1)]).unwrap();
    assert_eq!(out.data(), &[9.0, 12.0, 10.0, 0.0]);
}

#[test]
fn one_hot_selector_agrees_with_ids() {
    let (x, a, b, ctx) = instance(5, 9, 3, 6, 2, 4);
    let mut s = vec![0.0; 9 * 3];
    for (i, c) in ctx.iter().enumerate() {
        s[i * 3 + c.index()] = 1.0;
    }
    let s = Tensor::new(&[9, 3], s).unwrap();
    let via_ids = einsum_context(&x, &a, &b, &ctx).unwrap();
    let via_one_hot = einsum_context_one_hot(&x, &a, &b, &s).unwrap();
    assert_eq!(via_ids, via_one_hot);
}

#[test]
fn single_context_equals_plain_low_rank_product() {
    let (x, a, b, _) = instance(8, 7, 1, 5, 3, 6);
    let ctx = vec![ContextId::new(0); 7];
    let a2 = a.clone().reshape(&[5, 3]).unwrap();
    let b2 = b.clone().reshape(&[3, 6]).unwrap();
    let want = ctxpeft_core::tensor::matmul(&ctxpeft_core::tensor::matmul(&x, &a2).unwrap(), &b2).unwrap();
    let got = einsum_context(&x, &a, &b, &ctx).unwrap();
    assert!(got.max_abs_diff(&want) <= 1e-6);
}
