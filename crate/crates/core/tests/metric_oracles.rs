mod common;

use common::{oracle_bleu, oracle_cider, random_corpus, to_corpus, words};
use mlcap::metrics::{bleu_n, cider, evaluate_corpus};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn library_matches_brute_force(seed in any::<u64>()) {
        let items = random_corpus(&mut ChaCha8Rng::seed_from_u64(seed), 10, 8);
        let corpus = to_corpus(&items);
        for n in 1..=4 {
            let (got, want) = (bleu_n(&corpus, n).unwrap(), oracle_bleu(&items, n));
            prop_assert!((got - want).abs() <= 1e-9, "bleu{n}: {got} vs {want}");
        }
        let (got, want) = (cider(&corpus).unwrap(), oracle_cider(&items));
        prop_assert!((got - want).abs() <= 1e-9, "cider: {got} vs {want}");
    }

    #[test]
    fn appending_a_perfect_image_never_lowers_bleu1(seed in any::<u64>()) {
        let mut items = random_corpus(&mut ChaCha8Rng::seed_from_u64(seed), 10, 8);
        let before = to_corpus(&items);
        let bp_one = |c: &mlcap::metrics::CorpusEval| {
            let cand: usize = c.items.iter().map(|i| i.candidate.len()).sum();
            let refs: usize = c.items.iter().map(|i| {
                i.references.iter().map(Vec::len)
                    .min_by_key(|&r| (r.abs_diff(i.candidate.len()), r)).unwrap()
            }).sum();
            cand >= refs
        };
        items.push((words("q r s t"), vec![words("q r s t")]));
        let after = to_corpus(&items);
        prop_assume!(bp_one(&before) && bp_one(&after));
        prop_assert!(bleu_n(&after, 1).unwrap() >= bleu_n(&before, 1).unwrap());
    }

    #[test]
    fn scores_stay_in_range(seed in any::<u64>()) {
        let items = random_corpus(&mut ChaCha8Rng::seed_from_u64(seed), 10, 8);
        let r = evaluate_corpus(&to_corpus(&items)).unwrap();
        for v in [r.bleu1, r.bleu2, r.bleu3, r.bleu4] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(r.cider.is_finite() && r.cider >= 0.0 && r.cider <= 1.0 + 1e-12);
    }
}

#[test]
fn clipping_example_is_one_third() {
    let items = vec![(words("the the the"), vec![words("the cat")])];
    assert_eq!(bleu_n(&to_corpus(&items), 1).unwrap(), 1.0 / 3.0);
    assert!((oracle_bleu(&items, 1) - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn identical_captions_with_disjoint_references_score_one() {
    let items = vec![
        (words("a red circle is shown"), vec![words("a red circle is shown")]),
        (words("blue square over here"), vec![words("blue square over here")]),
        (words("kiiro no hoshi desu"), vec![words("kiiro no hoshi desu")]),
    ];
    let corpus = to_corpus(&items);
    assert_eq!(cider(&corpus).unwrap(), 1.0);
    for n in 1..=4 {
        assert_eq!(bleu_n(&corpus, n).unwrap(), 1.0);
    }
}

#[test]
fn single_image_cider_is_zero() {
    let items = vec![(words("a red circle"), vec![words("a red circle"), words("red circle")])];
    assert_eq!(cider(&to_corpus(&items)).unwrap(), 0.0);
    assert_eq!(oracle_cider(&items), 0.0);
}
