//! Full-catalog ranking metrics and experiment grids.

pub mod ablation;

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, InteractionSequence};
use crate::error::{Error, Result};
use crate::seqmodels::SeqModel;
use crate::ItemId;

pub use ablation::{ablation_grid, AblationRow, AblationTable, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mode: String,
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    /// Users that contributed to the means.
    pub users: usize,
    /// Users skipped because their target lies outside the scored catalog.
    pub skipped: usize,
}

/// The held-out item for `split`.
pub fn target(seq: &InteractionSequence, split: Split) -> ItemId {
    match split {
        Split::Val => seq.val_item,
        Split::Test => seq.test_item,
    }
}

/// Conditioning sequence: training items, plus the validation item when
/// scoring the test item.
pub fn query_context(seq: &InteractionSequence, split: Split) -> Vec<ItemId> {
    let mut ctx = seq.items.clone();
    if split == Split::Test {
        ctx.push(seq.val_item);
    }
    ctx
}

/// Items removed from the ranking: the context items, except the target
/// itself when it was consumed before.
pub fn excluded_items(seq: &InteractionSequence, split: Split) -> BTreeSet<ItemId> {
    let mut ex: BTreeSet<ItemId> = query_context(seq, split).into_iter().collect();
    ex.remove(&target(seq, split));
    ex
}

/// 1-based rank of `target` among non-excluded items by counting the
/// items that beat it (higher score, or equal score and lower id).
pub fn rank_by_count(scores: &[f64], target: ItemId, excluded: &BTreeSet<ItemId>) -> usize {
    let st = scores[target as usize - 1];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| {
            let id = i as ItemId + 1;
            id != target && !excluded.contains(&id) && (s > st || (s == st && id < target))
        })
        .count()
}

/// The same rank from a full sort.
pub fn rank_by_sort(scores: &[f64], target: ItemId, excluded: &BTreeSet<ItemId>) -> usize {
    let order = crate::server::rank_items(scores, excluded);
    order
        .iter()
        .position(|&i| i == target)
        .map_or(usize::MAX, |p| p + 1)
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Evaluates with an arbitrary scorer `(user sequence, context) → scores
/// over items 1..=n`. Per-user work runs in parallel; sums are taken in
/// user order.
pub fn evaluate_with<F>(
    corpus: &Corpus,
    k: usize,
    split: Split,
    mode: &str,
    scorer: F,
) -> Result<EvalResult>
where
    F: Fn(&InteractionSequence, &[ItemId]) -> Result<Vec<f64>> + Sync,
{
    if k == 0 {
        return Err(Error::Config("cutoff k must be positive".into()));
    }
    let per_user: Vec<Option<(f64, f64)>> = corpus
        .sequences
        .par_iter()
        .map(|seq| {
            let t = target(seq, split);
            let ctx = query_context(seq, split);
            let scores = scorer(seq, &ctx)?;
            if t == 0 || t as usize > scores.len() {
                log::warn!(
                    "user {}: target {t} outside the scored catalog, skipped",
                    seq.user
                );
                return Ok(None);
            }
            let rank = rank_by_count(&scores, t, &excluded_items(seq, split));
            let hit = if rank <= k { 1.0 } else { 0.0 };
            Ok(Some((hit, ndcg_at(rank, k))))
        })
        .collect::<Result<_>>()?;
    let mut hr = 0.0;
    let mut ndcg = 0.0;
    let mut users = 0;
    for (h, n) in per_user.iter().flatten() {
        hr += h;
        ndcg += n;
        users += 1;
    }
    let denom = users.max(1) as f64;
    Ok(EvalResult {
        mode: mode.to_string(),
        k,
        hr: hr / denom,
        ndcg: ndcg / denom,
        users,
        skipped: per_user.len() - users,
    })
}

/// Scores every item after `context` with `model` (oldest items dropped
/// beyond the model's window).
pub fn model_scores(model: &SeqModel, context: &[ItemId]) -> Result<Vec<f64>> {
    let keep = model.config().max_seq_len;
    let e = model.context_vector(&context[context.len().saturating_sub(keep)..])?;
    model.score_all(&e)
}

/// One shared model queried with each user's true history.
pub fn evaluate(model: &SeqModel, corpus: &Corpus, k: usize, split: Split) -> Result<EvalResult> {
    evaluate_with(corpus, k, split, "model", |_, ctx| model_scores(model, ctx))
}

/// Appends `mode,round,k,hr,ndcg,users` rows (header when `header`).
pub fn write_metrics_csv<W: Write>(
    out: W,
    rows: &[(u32, &EvalResult)],
    header: bool,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    if header {
        w.write_record(["mode", "round", "k", "hr", "ndcg", "users"])?;
    }
    for (round, r) in rows {
        w.write_record([
            r.mode.clone(),
            round.to_string(),
            r.k.to_string(),
            format!("{:.6}", r.hr),
            format!("{:.6}", r.ndcg),
            r.users.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
