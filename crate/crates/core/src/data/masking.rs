use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{BOS_ID, MASK_ID, N_RESERVED, PAD_ID};
use crate::error::{Error, Result};
use crate::model::TokenBatch;

/// How a selected position was corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

/// A corrupted batch and its reconstruction targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmBatch {
    pub input: TokenBatch,
    /// Original ids at every position.
    pub targets: Vec<usize>,
    /// True exactly at selected positions.
    pub loss_mask: Vec<bool>,
    /// Corruption applied at each position (`None` if unselected).
    pub corruption: Vec<Option<Corruption>>,
    /// Non-pad tokens per row.
    pub lengths: Vec<usize>,
}

impl MlmBatch {
    pub fn selected(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Flat positions that contribute to the loss.
    pub fn selected_positions(&self) -> Vec<usize> {
        self.loss_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

/// BERT-style corruption: each non-special position is selected with
/// probability `mask_prob`; selected positions become `MASK` 80% of the
/// time, a uniformly random word id 10%, and stay unchanged 10%.
pub fn mask_for_mlm(
    batch: &TokenBatch,
    mask_prob: f64,
    vocab_size: usize,
    seed: u64,
) -> Result<MlmBatch> {
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::Contract(format!(
            "mask_prob {mask_prob} outside [0, 1]"
        )));
    }
    if vocab_size <= N_RESERVED {
        return Err(Error::Contract(format!(
            "vocabulary of size {vocab_size} has no ordinary words"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = batch.ids.clone();
    let mut loss_mask = vec![false; ids.len()];
    let mut corruption = vec![None; ids.len()];
    for (i, id) in ids.iter_mut().enumerate() {
        if *id == PAD_ID || *id == BOS_ID {
            continue;
        }
        if rng.random::<f64>() >= mask_prob {
            continue;
        }
        loss_mask[i] = true;
        let roll: f64 = rng.random();
        let kind = if roll < 0.8 {
            *id = MASK_ID;
            Corruption::Mask
        } else if roll < 0.9 {
            *id = rng.random_range(N_RESERVED..vocab_size);
            Corruption::Random
        } else {
            Corruption::Keep
        };
        corruption[i] = Some(kind);
    }
    let lengths = batch
        .ids
        .chunks(batch.seq)
        .map(|row| row.iter().filter(|&&id| id != PAD_ID).count())
        .collect();
    Ok(MlmBatch {
        input: TokenBatch::new(ids, batch.batch, batch.seq)?,
        targets: batch.ids.clone(),
        loss_mask,
        corruption,
        lengths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize) -> TokenBatch {
        let ids = (0..n).map(|i| N_RESERVED + i % 50).collect();
        TokenBatch::new(ids, 1, n).unwrap()
    }

    #[test]
    fn zero_probability_selects_nothing() {
        let m = mask_for_mlm(&batch(500), 0.0, 100, 1).unwrap();
        assert_eq!(m.selected(), 0);
        assert_eq!(m.input, batch(500));
    }

    #[test]
    fn specials_are_never_selected() {
        let b = TokenBatch::new(vec![BOS_ID, 7, 8, PAD_ID], 1, 4).unwrap();
        let m = mask_for_mlm(&b, 1.0, 20, 2).unwrap();
        assert_eq!(m.loss_mask, vec![false, true, true, false]);
        assert_eq!(m.lengths, vec![3]);
    }

    #[test]
    fn targets_reconstruct_original() {
        let b = batch(1000);
        let m = mask_for_mlm(&b, 0.3, 100, 3).unwrap();
        assert_eq!(m.targets, b.ids);
        for i in 0..b.ids.len() {
            if !m.loss_mask[i] {
                assert_eq!(m.input.ids[i], b.ids[i]);
            }
        }
    }

    #[test]
    fn rejects_bad_probability() {
        assert!(mask_for_mlm(&batch(4), 1.5, 100, 0).is_err());
    }
}
