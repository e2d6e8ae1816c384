use ndarray::{Array1, Array2};
use proptest::prelude::*;

use reid_core::eval::{is_valid_entry, RetrievalMeta};
use reid_core::train::cross_entropy;
use reid_core::{compute_cmc_map, Protocol};

const PROTOCOLS: [Protocol; 2] = [Protocol::Standard, Protocol::ClothChanging];

fn meta() -> impl Strategy<Value = RetrievalMeta> {
    (0u32..4, 0u32..3, 0u32..3).prop_map(|(person_id, c, camera_id)| RetrievalMeta {
        person_id,
        cloth_id: person_id * 10 + c,
        camera_id,
    })
}

/// Query and gallery metadata with a matching distance matrix. Distances are
/// drawn from a few integers so ties are common.
fn retrieval_case() -> impl Strategy<Value = (Vec<RetrievalMeta>, Vec<RetrievalMeta>, Array2<f64>)> {
    (1usize..6, 1usize..12).prop_flat_map(|(nq, ng)| {
        (
            prop::collection::vec(meta(), nq),
            prop::collection::vec(meta(), ng),
            prop::collection::vec(0u8..5, nq * ng),
        )
            .prop_map(move |(q, g, d)| {
                let dist = Array2::from_shape_vec((nq, ng), d.into_iter().map(f64::from).collect()).unwrap();
                (q, g, dist)
            })
    })
}

proptest! {
    #[test]
    fn ranking_is_invariant_to_monotone_distance_transforms((q, g, d) in retrieval_case()) {
        let warped = d.mapv(|x| (0.5 * x).exp() * 3.0 - 1.0);
        for protocol in PROTOCOLS {
            let a = compute_cmc_map(d.view(), &q, &g, protocol, 10);
            let b = compute_cmc_map(warped.view(), &q, &g, protocol, 10);
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
            }
        }
    }

    #[test]
    fn cmc_is_a_nondecreasing_probability((q, g, d) in retrieval_case()) {
        for protocol in PROTOCOLS {
            let Ok(r) = compute_cmc_map(d.view(), &q, &g, protocol, 10) else { continue };
            prop_assert_eq!(r.cmc.len(), 10);
            prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.cmc.iter().all(|c| (0.0..=1.0).contains(c)));
            prop_assert!((0.0..=1.0).contains(&r.map));
            prop_assert!(r.num_valid_queries >= 1 && r.num_valid_queries <= q.len());
        }
    }

    #[test]
    fn cloth_changing_entries_are_standard_entries(q in meta(), g in meta()) {
        if is_valid_entry(&q, &g, Protocol::ClothChanging) {
            prop_assert!(is_valid_entry(&q, &g, Protocol::Standard));
        }
    }

    #[test]
    fn exact_match_at_zero_distance_is_always_rank_one(g in prop::collection::vec(meta(), 1..12), pick in any::<prop::sample::Index>()) {
        // Give the query a fresh camera and outfit so the chosen entry is a
        // valid match under both protocols.
        let target = pick.index(g.len());
        let q = RetrievalMeta { person_id: g[target].person_id, cloth_id: 99, camera_id: 9 };
        let mut d = Array2::from_elem((1, g.len()), 1.0);
        d[[0, target]] = 0.0;
        for protocol in PROTOCOLS {
            let r = compute_cmc_map(d.view(), &[q], &g, protocol, 5).unwrap();
            prop_assert_eq!(r.rank(1), 1.0);
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative_with_zero_sum_gradient(
        logits in prop::collection::vec(-20.0f64..20.0, 2..12),
        label in any::<prop::sample::Index>(),
    ) {
        let label = label.index(logits.len());
        let (loss, grad) = cross_entropy(Array1::from(logits).view(), label).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!(grad.sum().abs() < 1e-12);
        prop_assert!(grad[label] <= 0.0);
        prop_assert!(grad.iter().enumerate().all(|(i, &v)| i == label || v >= 0.0));
    }

    #[test]
    fn cross_entropy_follows_class_permutations(
        (logits, perm, label) in (2usize..10).prop_flat_map(|n| (
            prop::collection::vec(-10.0f64..10.0, n),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
            0..n,
        )),
    ) {
        let n = logits.len();
        let mut permuted = vec![0.0; n];
        for i in 0..n {
            permuted[perm[i]] = logits[i];
        }
        let (a, ga) = cross_entropy(Array1::from(logits).view(), label).unwrap();
        let (b, gb) = cross_entropy(Array1::from(permuted).view(), perm[label]).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        for i in 0..n {
            prop_assert!((ga[i] - gb[perm[i]]).abs() < 1e-12);
        }
    }
}
