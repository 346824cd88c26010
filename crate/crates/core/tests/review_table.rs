use std::path::PathBuf;

use proptest::prelude::*;
use seqrec::review::{aggregate_outcomes, load_comparisons, Outcome, DEFAULT_MIN_PAPERS};

fn csv_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/review_comparisons.csv")
}

#[test]
fn reconstructed_table_counts() {
    let recs = load_comparisons(csv_path()).unwrap();
    assert_eq!(recs.len(), 134);
    let t = aggregate_outcomes(&recs, DEFAULT_MIN_PAPERS).unwrap();
    assert_eq!(t.total.total, 134);
    assert_eq!(t.total.counts, [86, 32, 16]);
    assert_eq!(t.num_datasets, 46);
    assert_eq!(t.rows.len(), 8);

    let row = |name: &str| t.rows.iter().find(|r| r.dataset == name).unwrap();
    let expect = [
        ("Beauty", [12, 5, 2]),
        ("ML-1M", [13, 3, 2]),
        ("Yelp", [6, 4, 0]),
        ("Steam", [7, 1, 0]),
        ("ML-20M", [7, 0, 1]),
        ("Sports", [1, 4, 1]),
        ("LastFM", [4, 2, 0]),
        ("Toys", [0, 5, 0]),
    ];
    for (name, counts) in expect {
        assert_eq!(row(name).counts, counts, "{name}");
    }
    assert_eq!(t.rows[0].dataset, "Beauty");
    assert_eq!(row("Beauty").percent(Outcome::Bert4RecWins), 63);
    assert_eq!(t.total.percent(Outcome::Bert4RecWins), 64);
    assert_eq!(t.total.percent(Outcome::Tie), 12);

    let all = aggregate_outcomes(&recs, 1).unwrap();
    assert_eq!(all.rows.iter().map(|r| r.total).sum::<usize>(), all.total.total);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn aggregation_ignores_row_order(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let recs = load_comparisons(csv_path()).unwrap();
        let mut shuffled = recs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(
            aggregate_outcomes(&recs, 5).unwrap(),
            aggregate_outcomes(&shuffled, 5).unwrap()
        );
    }
}
