use hpmatch_core::matcher::{exhaustive_match, offsets_scores, propagate, CorrField};
use hpmatch_core::ops::{cosine_similarity, softmax_weights};
use hpmatch_core::{Real, Tensor};
use proptest::prelude::*;

fn map(h: usize, w: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0..1.0 as Real, h * w * c).prop_map(move |v| Tensor::from_vec(h, w, c, v).unwrap())
}

/// Brute-force top-k with the same ordering: score descending, then row,
/// then column.
fn naive_topk(fx: &Tensor, fy: &Tensor, k: usize) -> Vec<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for y in 0..fx.height() {
        for x in 0..fx.width() {
            let mut all = Vec::new();
            for v in 0..fy.height() {
                for u in 0..fy.width() {
                    all.push((cosine_similarity(fx.pixel(y, x), fy.pixel(v, u)).unwrap(), v, u));
                }
            }
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            out.push(all[..k].iter().map(|&(_, v, u)| (u, v)).collect());
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_is_a_distribution(scores in prop::collection::vec(-1.0..1.0 as Real, 1..20), tau in 0.01..2.0 as Real) {
        let w = softmax_weights(&scores, tau).unwrap();
        prop_assert!((w.iter().sum::<Real>() - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(
        a in prop::collection::vec(0.1..1.0 as Real, 5),
        b in prop::collection::vec(-1.0..1.0 as Real, 5),
    ) {
        prop_assume!(b.iter().any(|v| v.abs() > 1e-3));
        let ab = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, cosine_similarity(&b, &a).unwrap());
    }

    #[test]
    fn exhaustive_agrees_with_brute_force(fx in map(4, 5, 3), fy in map(5, 4, 3), k in 1usize..5) {
        let field = exhaustive_match(&fx, &fy, k).unwrap();
        let naive = naive_topk(&fx, &fy, k);
        for (p, expect) in naive.iter().enumerate() {
            let got: Vec<(usize, usize)> =
                field.candidates(p).0.iter().map(|q| (q[0] as usize, q[1] as usize)).collect();
            prop_assert_eq!(&got, expect);
        }
    }

    #[test]
    fn propagation_keeps_the_best_score(fx in map(6, 6, 4), fy in map(6, 6, 4), seed in 0usize..1000) {
        let k = 3;
        let coords: Vec<[Real; 2]> = (0..36 * k)
            .map(|i| {
                let h = (i * 7919 + seed * 104729) % 36;
                [(h % 6) as Real, (h / 6) as Real]
            })
            .collect();
        let rough = CorrField::from_unsorted(6, 6, k, 6, 6, coords.clone(), vec![0.0; 36 * k]).unwrap();
        let (_, scores) = offsets_scores(&rough, &fx, &fy).unwrap();
        let field = CorrField::from_unsorted(6, 6, k, 6, 6, coords, scores.into_data()).unwrap();
        let next = propagate(&field, &fx, &fy).unwrap();
        for p in 0..36 {
            prop_assert!(next.candidates(p).1[0] >= field.candidates(p).1[0]);
            let s = next.candidates(p).1;
            prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
