//! Interaction logs: CSV ingestion, leave-last-two preprocessing, negative
//! sampling, synthetic corpora and a binary corpus cache.

pub mod cache;
mod loader;
mod negatives;
mod preprocess;
pub mod synth;

use std::collections::{BTreeSet, HashMap};

use crate::{ItemId, UserId};

pub use loader::{load_csv, write_csv, CsvSchema};
pub use negatives::{
    sample_excluding, sample_negatives, sample_step_negatives, sample_step_negatives_from,
    NegativePool,
};
pub use preprocess::{preprocess, PreprocessConfig};
pub use synth::{synth_corpus, MarkovChain, SyntheticCorpus};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInteraction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// One user's chronological log after preprocessing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user: UserId,
    /// Training part, oldest first.
    pub items: Vec<ItemId>,
    pub val_item: ItemId,
    pub test_item: ItemId,
    /// Items the user's model has been trained on: the training items plus
    /// every negative sample drawn so far.
    pub trained_items: BTreeSet<ItemId>,
}

impl InteractionSequence {
    pub fn new(user: UserId, items: Vec<ItemId>, val_item: ItemId, test_item: ItemId) -> Self {
        let trained_items = items.iter().copied().collect();
        Self {
            user,
            items,
            val_item,
            test_item,
            trained_items,
        }
    }

    /// Every item the user really interacted with (train, val and test).
    pub fn interacted(&self) -> BTreeSet<ItemId> {
        let mut s: BTreeSet<ItemId> = self.items.iter().copied().collect();
        s.insert(self.val_item);
        s.insert(self.test_item);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<InteractionSequence>,
    pub num_items: usize,
    /// `user_names[u]` is the external id of dense user `u`.
    pub user_names: Vec<String>,
    /// `item_names[i - 1]` is the external id of dense item `i`.
    pub item_names: Vec<String>,
    user_index: HashMap<String, UserId>,
    item_index: HashMap<String, ItemId>,
}

impl Corpus {
    pub fn new(
        sequences: Vec<InteractionSequence>,
        user_names: Vec<String>,
        item_names: Vec<String>,
    ) -> Self {
        let user_index = user_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as UserId))
            .collect();
        let item_index = item_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as ItemId + 1))
            .collect();
        Self {
            num_items: item_names.len(),
            sequences,
            user_names,
            item_names,
            user_index,
            item_index,
        }
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn user_id(&self, name: &str) -> Option<UserId> {
        self.user_index.get(name).copied()
    }

    pub fn item_id(&self, name: &str) -> Option<ItemId> {
        self.item_index.get(name).copied()
    }

    pub fn user_name(&self, user: UserId) -> Option<&str> {
        self.user_names.get(user as usize).map(String::as_str)
    }

    pub fn item_name(&self, item: ItemId) -> Option<&str> {
        (item as usize)
            .checked_sub(1)
            .and_then(|i| self.item_names.get(i))
            .map(String::as_str)
    }

    pub fn sequence(&self, user: UserId) -> &InteractionSequence {
        &self.sequences[user as usize]
    }

    /// Back to raw interactions, one per position with ordinal timestamps.
    pub fn to_raw(&self) -> Vec<RawInteraction> {
        let mut out = Vec::new();
        for seq in &self.sequences {
            let name = &self.user_names[seq.user as usize];
            let all = seq.items.iter().chain([&seq.val_item, &seq.test_item]);
            for (t, &item) in all.enumerate() {
                out.push(RawInteraction {
                    user_id: name.clone(),
                    item_id: self.item_names[item as usize - 1].clone(),
                    timestamp: t as i64,
                });
            }
        }
        out
    }

    /// Mean training-sequence length.
    pub fn mean_train_len(&self) -> f64 {
        let total: usize = self.sequences.iter().map(|s| s.items.len()).sum();
        total as f64 / self.sequences.len().max(1) as f64
    }
}
