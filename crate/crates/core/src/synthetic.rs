//! Generated interaction datasets with known structure.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::corpus::InteractionDataset;
use crate::error::{Error, Result};
use crate::seed::stream_rng;

/// Every user walks the cycle `0 → 1 → … → num_items-1 → 0`, user `u`
/// starting at item `u % num_items`.
pub fn cyclic_dataset(
    num_items: usize,
    num_users: usize,
    len: usize,
) -> Result<InteractionDataset> {
    if num_items == 0 || num_users == 0 || len == 0 {
        return Err(Error::EmptyDataset);
    }
    InteractionDataset::from_sequences((0..num_users).map(|u| {
        let items: Vec<String> = (0..len)
            .map(|j| format!("c{}", (u + j) % num_items))
            .collect();
        (format!("u{u}"), items)
    }))
}

/// Users draw `len` distinct items without replacement, item `k` having
/// weight `1 / (k + 1)^exponent`.
pub fn zipf_dataset(
    num_items: usize,
    num_users: usize,
    len: usize,
    exponent: f64,
    seed: u64,
) -> Result<InteractionDataset> {
    if num_items == 0 || num_users == 0 || len == 0 {
        return Err(Error::EmptyDataset);
    }
    if len > num_items {
        return Err(Error::Sampling {
            wanted: len,
            available: num_items,
        });
    }
    let weights: Vec<f64> = (0..num_items)
        .map(|k| ((k + 1) as f64).powf(-exponent))
        .collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
    let rows = (0..num_users).map(|u| {
        let mut rng = stream_rng(seed, u as u64);
        let mut picked: Vec<usize> = Vec::with_capacity(len);
        while picked.len() < len {
            let k = dist.sample(&mut rng);
            if !picked.contains(&k) {
                picked.push(k);
            }
        }
        (
            format!("u{u}"),
            picked
                .into_iter()
                .map(|k| format!("z{k}"))
                .collect::<Vec<_>>(),
        )
    });
    InteractionDataset::from_sequences(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cyclic_successors() {
        let ds = cyclic_dataset(5, 7, 6).unwrap();
        assert_eq!(ds.num_items(), 5);
        for u in 0..7 {
            let seq = ds.sequence(u);
            for w in seq.windows(2) {
                let (a, b) = (ds.item_name(w[0]).unwrap(), ds.item_name(w[1]).unwrap());
                let a: usize = a[1..].parse().unwrap();
                let b: usize = b[1..].parse().unwrap();
                assert_eq!(b, (a + 1) % 5);
            }
        }
    }

    #[test]
    fn zipf_sequences_are_distinct_and_skewed() {
        let ds = zipf_dataset(100, 300, 8, 2.0, 3).unwrap();
        assert!(ds.sequences().iter().all(|s| {
            let mut v = s.clone();
            v.sort();
            v.dedup();
            v.len() == 8
        }));
        let head = ds.item_id("z0").unwrap();
        let count = ds.sequences().iter().filter(|s| s.contains(&head)).count();
        assert!(count > 250);
        assert!(zipf_dataset(3, 1, 4, 1.0, 0).is_err());
    }
}
