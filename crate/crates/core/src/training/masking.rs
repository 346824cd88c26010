use rand::Rng;

use crate::corpus::{ItemId, PAD_ID};
use crate::error::{Error, Result};

/// One masked training row. `labels[j]` holds the original item where
/// `active[j]`, and padding otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedRow {
    pub input: Vec<ItemId>,
    pub labels: Vec<ItemId>,
    pub active: Vec<bool>,
}

impl MaskedRow {
    pub fn num_masked(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }
}

/// Masks each non-padding position with probability `p`. If nothing was
/// masked, one uniformly chosen non-padding position is masked instead.
pub fn mask_sequence<R: Rng + ?Sized>(
    seq: &[ItemId],
    mask_id: ItemId,
    p: f64,
    rng: &mut R,
) -> MaskedRow {
    let mut row = MaskedRow {
        input: seq.to_vec(),
        labels: vec![PAD_ID; seq.len()],
        active: vec![false; seq.len()],
    };
    for (j, &item) in seq.iter().enumerate() {
        if item != PAD_ID && rng.random::<f64>() < p {
            mask_at(&mut row, j, mask_id);
        }
    }
    if row.num_masked() == 0 {
        let candidates: Vec<usize> = (0..seq.len()).filter(|&j| seq[j] != PAD_ID).collect();
        if !candidates.is_empty() {
            let j = candidates[rng.random_range(0..candidates.len())];
            mask_at(&mut row, j, mask_id);
        }
    }
    row
}

/// Masks only the final item, matching the inference-time layout.
pub fn mask_last(seq: &[ItemId], mask_id: ItemId) -> MaskedRow {
    let mut row = MaskedRow {
        input: seq.to_vec(),
        labels: vec![PAD_ID; seq.len()],
        active: vec![false; seq.len()],
    };
    if let Some(j) = seq.iter().rposition(|&i| i != PAD_ID) {
        mask_at(&mut row, j, mask_id);
    }
    row
}

fn mask_at(row: &mut MaskedRow, j: usize, mask_id: ItemId) {
    row.labels[j] = row.input[j];
    row.input[j] = mask_id;
    row.active[j] = true;
}

/// Splits `[a, b, c]` into inputs `[a, b]` and targets `[b, c]`.
pub fn shift_targets(seq: &[ItemId]) -> Result<(Vec<ItemId>, Vec<ItemId>)> {
    if seq.len() < 2 {
        return Err(Error::DegenerateBatch);
    }
    Ok((seq[..seq.len() - 1].to_vec(), seq[1..].to_vec()))
}

/// `-ln σ(pos - neg)`, computed without overflow.
pub fn bpr_loss(pos_score: f64, neg_score: f64) -> f64 {
    let x = neg_score - pos_score;
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn tiny_probability_still_masks_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let row = mask_sequence(&[4, 5, 6, 7, 8], 99, 1e-12, &mut rng);
            assert_eq!(row.num_masked(), 1);
        }
    }

    #[test]
    fn observed_rate_matches_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq: Vec<ItemId> = (1..=1000).collect();
        let masked: usize = (0..100)
            .map(|_| mask_sequence(&seq, 1001, 0.2, &mut rng).num_masked())
            .sum();
        let rate = masked as f64 / 100_000.0;
        assert!((rate - 0.2).abs() <= 0.01, "rate {rate}");
    }

    #[test]
    fn masked_positions_carry_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = [0, 0, 3, 4, 5, 6];
        for _ in 0..100 {
            let row = mask_sequence(&seq, 9, 0.5, &mut rng);
            for j in 0..seq.len() {
                if row.active[j] {
                    assert_eq!(row.input[j], 9);
                    assert_eq!(row.labels[j], seq[j]);
                    assert_ne!(seq[j], PAD_ID);
                } else {
                    assert_eq!(row.input[j], seq[j]);
                }
            }
            assert!(row.num_masked() >= 1);
        }
    }

    #[test]
    fn two_of_four_masks_have_six_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seen = BTreeSet::new();
        for _ in 0..5000 {
            let row = mask_sequence(&[1, 2, 3, 4], 5, 0.5, &mut rng);
            if row.num_masked() == 2 {
                seen.insert(row.active.clone());
            }
        }
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn last_item_masking() {
        let row = mask_last(&[0, 3, 4], 9);
        assert_eq!(row.input, vec![0, 3, 9]);
        assert_eq!(row.labels, vec![0, 0, 4]);
    }

    #[test]
    fn shifting() {
        assert_eq!(shift_targets(&[1, 2, 3]).unwrap(), (vec![1, 2], vec![2, 3]));
        assert_eq!(shift_targets(&[1, 2]).unwrap(), (vec![1], vec![2]));
        assert!(shift_targets(&[1]).is_err());
    }

    #[test]
    fn bpr_values() {
        assert!((bpr_loss(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bpr_loss(1.0, 0.0) - 0.3132616875182228).abs() < 1e-12);
        assert!(bpr_loss(1e6, 0.0) < 1e-300);
        assert!((bpr_loss(0.0, 1e6) - 1e6).abs() < 1e-6);
    }
}
