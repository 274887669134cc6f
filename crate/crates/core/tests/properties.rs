use fedprune::adapters::dense_rank;
use fedprune::data::{detokenize, tokenize, Category, Example};
use fedprune::numerics::{hamming_similarity, retained_indices, BitMask};
use proptest::prelude::*;

fn mask_pair() -> impl Strategy<Value = (BitMask, BitMask)> {
    (1usize..9, 1usize..9).prop_flat_map(|(r, c)| {
        (
            proptest::collection::vec(any::<bool>(), r * c),
            proptest::collection::vec(any::<bool>(), r * c),
        )
            .prop_map(move |(a, b)| {
                (
                    BitMask::from_bools(r, c, &a).unwrap(),
                    BitMask::from_bools(r, c, &b).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn hamming_is_symmetric_and_bounded((a, b) in mask_pair()) {
        let ab = hamming_similarity(&a, &b).unwrap();
        let ba = hamming_similarity(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(hamming_similarity(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(hamming_similarity(&a, &a.not()).unwrap(), 0.0);
    }

    #[test]
    fn retained_set_survives_permutation(
        values in proptest::collection::vec(-1e3f64..1e3, 1..200),
        frac in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let kept = retained_indices(&values, frac).unwrap();
        let mut perm: Vec<usize> = (0..values.len()).collect();
        fedprune::numerics::RngStream::new(seed, 0).shuffle(&mut perm);
        let permuted: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
        let mut back: Vec<usize> = retained_indices(&permuted, frac)
            .unwrap()
            .into_iter()
            .map(|j| perm[j])
            .collect();
        back.sort_unstable();
        let mut distinct = values.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        // Ties are broken by position, so only distinct inputs must agree exactly.
        if distinct.len() == values.len() {
            prop_assert_eq!(kept.clone(), back);
        }
        let below = (frac * values.len() as f64).floor() as usize;
        prop_assert_eq!(kept.len(), values.len() - below);
    }

    #[test]
    fn dense_rank_grows_with_sparsity(r in 1usize..64, s1 in 0.0f64..0.95, s2 in 0.0f64..0.95) {
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        prop_assert!(dense_rank(r, lo).unwrap() <= dense_rank(r, hi).unwrap());
        prop_assert!(dense_rank(r, lo).unwrap() >= r);
    }

    #[test]
    fn tokenize_round_trips(
        instruction in "[ -~]{1,30}",
        context in "[ -~]{0,30}",
        response in "[ -~]{1,30}",
    ) {
        let ex = Example {
            instruction: instruction.clone(),
            context: context.clone(),
            response: response.clone(),
            category: Category::OpenQa,
        };
        let seq = tokenize(&ex, 256);
        let (i, c, r) = detokenize(&seq.ids);
        prop_assert_eq!(i, instruction.into_bytes());
        prop_assert_eq!(c, context.into_bytes());
        prop_assert_eq!(r, response.into_bytes());
    }
}
