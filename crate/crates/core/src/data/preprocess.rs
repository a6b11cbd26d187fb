use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Corpus, InteractionSequence, RawInteraction};
use crate::error::{Error, Result};
use crate::{ItemId, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Users with fewer interactions are dropped.
    pub min_len: usize,
    /// Only the most recent interactions are kept.
    pub max_len: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_len: 5,
            max_len: 20,
        }
    }
}

/// Implicit-feedback preprocessing with a leave-last-two split.
///
/// Users are ordered by first appearance in `raw`; each user's log is
/// sorted by timestamp with ties kept in input order. Dense item ids are
/// assigned in order of first appearance over the kept sequences.
pub fn preprocess(raw: &[RawInteraction], cfg: PreprocessConfig) -> Result<Corpus> {
    if cfg.min_len < 3 {
        return Err(Error::Config(format!(
            "min_len {} leaves no training items after holding out two",
            cfg.min_len
        )));
    }
    if cfg.max_len < cfg.min_len {
        return Err(Error::Config(format!(
            "max_len {} below min_len {}",
            cfg.max_len, cfg.min_len
        )));
    }

    let mut order: Vec<&str> = Vec::new();
    let mut logs: HashMap<&str, Vec<(i64, &str)>> = HashMap::new();
    for r in raw {
        let entry = logs.entry(r.user_id.as_str()).or_insert_with(|| {
            order.push(r.user_id.as_str());
            Vec::new()
        });
        entry.push((r.timestamp, r.item_id.as_str()));
    }

    let mut user_names = Vec::new();
    let mut item_names: Vec<String> = Vec::new();
    let mut item_ids: HashMap<&str, ItemId> = HashMap::new();
    let mut sequences = Vec::new();
    for name in order {
        let mut log = logs.remove(name).unwrap_or_default();
        if log.len() < cfg.min_len {
            continue;
        }
        // stable: equal timestamps keep file order
        log.sort_by_key(|&(ts, _)| ts);
        let kept = &log[log.len().saturating_sub(cfg.max_len)..];
        let ids: Vec<ItemId> = kept
            .iter()
            .map(|&(_, item)| {
                *item_ids.entry(item).or_insert_with(|| {
                    item_names.push(item.to_string());
                    item_names.len() as ItemId
                })
            })
            .collect();
        let user = user_names.len() as UserId;
        user_names.push(name.to_string());
        let (train, held) = ids.split_at(ids.len() - 2);
        sequences.push(InteractionSequence::new(
            user,
            train.to_vec(),
            held[0],
            held[1],
        ));
    }

    if sequences.is_empty() {
        return Err(Error::Preprocess(format!(
            "no user has at least {} interactions",
            cfg.min_len
        )));
    }
    Ok(Corpus::new(sequences, user_names, item_names))
}
