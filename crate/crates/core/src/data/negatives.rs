use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::InteractionSequence;
use crate::error::{Error, Result};
use crate::ItemId;

fn pool(num_items: usize, exclude: &BTreeSet<ItemId>) -> Vec<ItemId> {
    (1..=num_items as ItemId)
        .filter(|i| !exclude.contains(i))
        .collect()
}

fn draw<R: Rng + ?Sized>(pool: &[ItemId], k: usize, rng: &mut R) -> Result<Vec<ItemId>> {
    if k > pool.len() {
        return Err(Error::Input(format!(
            "{k} negatives requested but only {} items are eligible",
            pool.len()
        )));
    }
    Ok(index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

/// `k` distinct items from `1..=num_items` outside `exclude`, uniformly.
pub fn sample_excluding<R: Rng + ?Sized>(
    num_items: usize,
    exclude: &BTreeSet<ItemId>,
    k: usize,
    rng: &mut R,
) -> Result<Vec<ItemId>> {
    draw(&pool(num_items, exclude), k, rng)
}

/// Negatives for one step of `seq`: `k` distinct items the user never
/// interacted with (validation and test items included in the exclusion).
/// The draws join the user's trained-item set.
///
/// Sampling is uniform, so `_step` does not influence the draw.
pub fn sample_negatives<R: Rng + ?Sized>(
    seq: &mut InteractionSequence,
    num_items: usize,
    _step: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<ItemId>> {
    let out = sample_excluding(num_items, &seq.interacted(), k, rng)?;
    seq.trained_items.extend(&out);
    Ok(out)
}

/// Which items a training step may draw as negatives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePool {
    /// Anything outside the training items. Held-out items stay eligible,
    /// so they are pushed down as often as any other unseen item.
    #[default]
    TrainOnly,
    /// Anything the user ever interacted with is excluded, held-out items
    /// included.
    Interacted,
}

impl NegativePool {
    pub fn excluded(self, seq: &InteractionSequence) -> BTreeSet<ItemId> {
        match self {
            Self::TrainOnly => seq.items.iter().copied().collect(),
            Self::Interacted => seq.interacted(),
        }
    }
}

/// [`sample_negatives`] for every training step at once.
pub fn sample_step_negatives<R: Rng + ?Sized>(
    seq: &mut InteractionSequence,
    num_items: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<ItemId>>> {
    sample_step_negatives_from(seq, num_items, k, NegativePool::Interacted, rng)
}

/// Per-step negatives under an explicit pool policy; draws join `V'_u`.
pub fn sample_step_negatives_from<R: Rng + ?Sized>(
    seq: &mut InteractionSequence,
    num_items: usize,
    k: usize,
    policy: NegativePool,
    rng: &mut R,
) -> Result<Vec<Vec<ItemId>>> {
    let eligible = pool(num_items, &policy.excluded(seq));
    let mut out = Vec::with_capacity(seq.items.len());
    for _ in 0..seq.items.len() {
        let negs = draw(&eligible, k, rng)?;
        seq.trained_items.extend(&negs);
        out.push(negs);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forced_choice() {
        let mut seq = InteractionSequence::new(0, vec![1, 2, 1], 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_negatives(&mut seq, 3, 0, 1, &mut rng).unwrap(),
            vec![3]
        );
        assert!(seq.trained_items.contains(&3));
        assert!(matches!(
            sample_negatives(&mut seq, 3, 0, 2, &mut rng),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn never_hits_interacted_items() {
        let mut seq = InteractionSequence::new(0, vec![3, 7, 9, 2], 11, 4);
        let interacted = seq.interacted();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let negs = sample_negatives(&mut seq, 12, 0, 3, &mut rng).unwrap();
            assert_eq!(negs.iter().collect::<BTreeSet<_>>().len(), 3);
            assert!(negs
                .iter()
                .all(|n| !interacted.contains(n) && (1..=12).contains(n)));
        }
        // the trained set grew only by negatives
        assert!(seq
            .trained_items
            .is_superset(&seq.items.iter().copied().collect()));
        assert!(!seq.trained_items.contains(&11) && !seq.trained_items.contains(&4));
    }

    #[test]
    fn deterministic_under_seed() {
        let base = InteractionSequence::new(0, vec![1, 2, 3], 4, 5);
        let run = |seed| {
            let mut s = base.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_step_negatives(&mut s, 40, 2, &mut rng).unwrap()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn train_only_pool_admits_held_out_items() {
        let mut seq = InteractionSequence::new(0, vec![1, 2], 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = BTreeSet::new();
        for _ in 0..200 {
            let n = sample_step_negatives_from(&mut seq, 4, 1, NegativePool::TrainOnly, &mut rng)
                .unwrap();
            seen.extend(n.into_iter().flatten());
        }
        assert_eq!(seen, [3, 4].into_iter().collect());
        let n = sample_step_negatives_from(&mut seq, 4, 2, NegativePool::Interacted, &mut rng);
        assert!(n.is_err());
    }
}
