//! Server runtime: trains the confidential model on uploaded sequences,
//! groups similar uploaders and builds soft-labeled downloads.
//!
//! Model parameters stay inside this process; the only outbound message
//! type is [`DownloadMessage`].

pub mod contrastive;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::sample_excluding;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::seqmodels::{sequence_rec_loss, Bound, ModelConfig, SeqModel};
use crate::tensor::{cosine_sim, dot};
use crate::{ItemId, UserId};

pub use crate::wire::{DownloadMessage, SoftLabeledSequence, UploadMessage};
pub use contrastive::{intention_similarity, preference_consistency};

/// Uploads kept per user.
pub const HISTORY_LEN: usize = 2;

/// Where a download's source sequence comes from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    /// The uploader's similar-user group.
    #[default]
    Similar,
    /// Any other uploader of the subround.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Negatives per training step and per download step.
    pub num_negatives: usize,
    pub lambda_pc: f64,
    pub lambda_is: f64,
    pub group_size: usize,
    pub temperature: f64,
    /// Upper bound on uploads per SGD step.
    pub batch_size: usize,
    pub sharing: Sharing,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 0.005,
            num_negatives: 1,
            lambda_pc: 0.01,
            lambda_is: 0.01,
            group_size: 5,
            temperature: 1.0,
            batch_size: 1024,
            sharing: Sharing::Similar,
        }
    }
}

/// Loss terms of the last training epoch, summed over batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerLosses {
    pub rec: f64,
    pub pc: f64,
    pub is: f64,
}

impl ServerLosses {
    pub fn total(&self, cfg: &ServerConfig) -> f64 {
        self.rec + cfg.lambda_pc * self.pc + cfg.lambda_is * self.is
    }
}

/// One training batch with its negatives fixed, so the objective is a
/// deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct ServerBatch<'a> {
    pub uploads: Vec<&'a UploadMessage>,
    /// The same user's preceding upload, if any.
    pub previous: Vec<Option<&'a UploadMessage>>,
    pub groups: &'a BTreeMap<UserId, Vec<UserId>>,
    /// Per upload, per step.
    pub negatives: Vec<Vec<Vec<ItemId>>>,
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveParts {
    pub total: Var,
    pub rec: Var,
    pub pc: Option<Var>,
    pub is: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    model: SeqModel,
    history: BTreeMap<UserId, VecDeque<UploadMessage>>,
    similar_groups: BTreeMap<UserId, Vec<UserId>>,
    seed: u64,
}

fn truncated(items: &[ItemId], keep: usize) -> &[ItemId] {
    &items[items.len().saturating_sub(keep)..]
}

/// Preference vector after the whole sequence.
pub fn seq_repr(model: &SeqModel, items: &[ItemId]) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::Input("representation of an empty sequence".into()));
    }
    model.context_vector(truncated(items, model.config().max_seq_len))
}

/// Builds the training objective for one batch inside `g`.
pub fn server_objective(
    g: &mut Graph,
    model: &SeqModel,
    b: &Bound,
    batch: &ServerBatch<'_>,
    cfg: &ServerConfig,
) -> Result<ObjectiveParts> {
    let n = batch.uploads.len();
    if n == 0 || batch.previous.len() != n || batch.negatives.len() != n {
        return Err(Error::Input(format!(
            "server batch with {n} uploads, {} histories, {} negative sets",
            batch.previous.len(),
            batch.negatives.len()
        )));
    }
    let keep = model.config().max_seq_len;
    let mut rec: Option<Var> = None;
    let mut cur = Vec::with_capacity(n);
    for (up, negs) in batch.uploads.iter().zip(&batch.negatives) {
        let items = truncated(&up.items, keep);
        let negs = &negs[negs.len().saturating_sub(items.len())..];
        let (l, h) = sequence_rec_loss(g, model, b, items, negs)?;
        cur.push(g.row(h, items.len())?);
        rec = Some(match rec {
            Some(r) => g.add(r, l)?,
            None => l,
        });
    }
    let rec = rec.expect("non-empty batch");

    let use_pc = cfg.lambda_pc != 0.0;
    let use_is = cfg.lambda_is != 0.0;
    let index: BTreeMap<UserId, usize> = batch
        .uploads
        .iter()
        .enumerate()
        .map(|(i, u)| (u.user, i))
        .collect();
    let mut pc_terms = Vec::new();
    let mut is_terms = Vec::new();
    for (i, up) in batch.uploads.iter().enumerate() {
        let group: BTreeSet<usize> = batch
            .groups
            .get(&up.user)
            .map(|m| {
                m.iter()
                    .filter_map(|u| index.get(u).copied())
                    .filter(|&j| j != i)
                    .collect()
            })
            .unwrap_or_default();
        let negatives: Vec<Var> = (0..n)
            .filter(|j| *j != i && !group.contains(j))
            .map(|j| cur[j])
            .collect();
        if use_pc {
            if let Some(prev) = batch.previous[i] {
                let h = model.encode_graph(g, b, truncated(&prev.items, keep))?;
                let p = g.row(h, truncated(&prev.items, keep).len())?;
                pc_terms.push(contrastive::preference_consistency_graph(
                    g,
                    p,
                    cur[i],
                    &negatives,
                    cfg.temperature,
                )?);
            }
        }
        if use_is {
            let positives: Vec<Var> = group.iter().map(|&j| cur[j]).collect();
            if let Some(t) = contrastive::intention_similarity_graph(
                g,
                cur[i],
                &positives,
                &negatives,
                cfg.temperature,
            )? {
                is_terms.push(t);
            }
        }
    }
    let mut total = rec;
    let sum_terms =
        |g: &mut Graph, terms: &[Var], lambda: f64, total: &mut Var| -> Result<Option<Var>> {
            if terms.is_empty() {
                return Ok(None);
            }
            let s = g.concat(terms)?;
            let s = g.sum(s)?;
            let w = g.affine(s, lambda, 0.0)?;
            *total = g.add(*total, w)?;
            Ok(Some(s))
        };
    let pc = sum_terms(g, &pc_terms, cfg.lambda_pc, &mut total)?;
    let is = sum_terms(g, &is_terms, cfg.lambda_is, &mut total)?;
    Ok(ObjectiveParts { total, rec, pc, is })
}

impl ServerState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            model: SeqModel::new(config, derive_seed(seed, Stream::ServerInit, 0, 0))?,
            history: BTreeMap::new(),
            similar_groups: BTreeMap::new(),
            seed,
        })
    }

    /// Read access for evaluation and checkpointing inside the simulator.
    pub fn model(&self) -> &SeqModel {
        &self.model
    }

    pub fn history(&self, user: UserId) -> Option<&VecDeque<UploadMessage>> {
        self.history.get(&user)
    }

    pub fn similar_groups(&self) -> &BTreeMap<UserId, Vec<UserId>> {
        &self.similar_groups
    }

    /// Appends uploads to the per-user history, evicting the oldest.
    pub fn ingest(&mut self, uploads: &[UploadMessage]) {
        for up in uploads {
            let h = self.history.entry(up.user).or_default();
            if h.back().is_some_and(|last| last.round == up.round) {
                h.pop_back();
            }
            h.push_back(up.clone());
            while h.len() > HISTORY_LEN {
                h.pop_front();
            }
        }
    }

    fn previous_upload(&self, up: &UploadMessage) -> Option<&UploadMessage> {
        self.history
            .get(&up.user)?
            .iter()
            .rev()
            .find(|m| m.round < up.round)
    }

    /// Top-`k` other uploaders by cosine similarity of the final uploaded
    /// item's embedding; ties go to the lower user id.
    pub fn build_similar_groups(
        &mut self,
        uploads: &[UploadMessage],
        k: usize,
    ) -> &BTreeMap<UserId, Vec<UserId>> {
        self.similar_groups.clear();
        let finals: Vec<(UserId, &[f64])> = uploads
            .iter()
            .filter_map(|u| Some((u.user, self.model.item_embedding(*u.items.last()?))))
            .collect();
        for &(user, emb) in &finals {
            let mut ranked: Vec<(f64, UserId)> = finals
                .iter()
                .filter(|(other, _)| *other != user)
                .map(|&(other, e)| (cosine_sim(emb, e).unwrap_or(0.0), other))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let group = ranked.into_iter().take(k).map(|(_, u)| u).collect();
            self.similar_groups.insert(user, group);
        }
        &self.similar_groups
    }

    fn reprs(&self, users: &[UserId]) -> Result<BTreeMap<UserId, Vec<f64>>> {
        users
            .iter()
            .map(|&u| {
                let up = self
                    .history
                    .get(&u)
                    .and_then(|h| h.back())
                    .ok_or_else(|| Error::Protocol(format!("user {u} has no upload")))?;
                Ok((u, seq_repr(&self.model, &up.items)?))
            })
            .collect()
    }

    fn split_batch<'a>(
        &self,
        user: UserId,
        batch: &[UserId],
        reprs: &'a BTreeMap<UserId, Vec<f64>>,
    ) -> (Vec<&'a [f64]>, Vec<&'a [f64]>) {
        let group: BTreeSet<UserId> = self
            .similar_groups
            .get(&user)
            .into_iter()
            .flatten()
            .copied()
            .collect();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for &j in batch {
            if j == user {
                continue;
            }
            let v = reprs[&j].as_slice();
            if group.contains(&j) {
                pos.push(v);
            } else {
                neg.push(v);
            }
        }
        (pos, neg)
    }

    /// Preference-consistency loss of `user` against the rest of `batch`,
    /// from the two most recent uploads; zero without an earlier upload.
    pub fn pc_loss(&self, user: UserId, batch: &[UserId], tau: f64) -> Result<f64> {
        let reprs = self.reprs(batch)?;
        let h = self
            .history
            .get(&user)
            .ok_or_else(|| Error::Protocol(format!("user {user} has no upload")))?;
        if h.len() < 2 {
            return Ok(0.0);
        }
        let prev = seq_repr(&self.model, &h[h.len() - 2].items)?;
        let cur = reprs
            .get(&user)
            .ok_or_else(|| Error::Input(format!("user {user} not in batch")))?;
        let (_, neg) = self.split_batch(user, batch, &reprs);
        preference_consistency(&prev, cur, &neg, tau)
    }

    /// Intention-similarity loss of `user`; zero with an empty group.
    pub fn is_loss(&self, user: UserId, batch: &[UserId], tau: f64) -> Result<f64> {
        let reprs = self.reprs(batch)?;
        let cur = reprs
            .get(&user)
            .ok_or_else(|| Error::Input(format!("user {user} not in batch")))?;
        let (pos, neg) = self.split_batch(user, batch, &reprs);
        intention_similarity(cur, &pos, &neg, tau)
    }

    /// Fixed-negative batch for `uploads` (which must already be ingested).
    pub fn make_batch<'a, R: Rng + ?Sized>(
        &'a self,
        uploads: &'a [UploadMessage],
        num_negatives: usize,
        rng: &mut R,
    ) -> Result<ServerBatch<'a>> {
        let num_items = self.model.num_items();
        let mut negatives = Vec::with_capacity(uploads.len());
        for up in uploads {
            let appear: BTreeSet<ItemId> = up.items.iter().copied().collect();
            let steps = up
                .items
                .iter()
                .map(|_| sample_excluding(num_items, &appear, num_negatives, rng))
                .collect::<Result<Vec<_>>>()?;
            negatives.push(steps);
        }
        Ok(ServerBatch {
            uploads: uploads.iter().collect(),
            previous: uploads.iter().map(|u| self.previous_upload(u)).collect(),
            groups: &self.similar_groups,
            negatives,
        })
    }

    /// Objective value on a fixed batch.
    pub fn objective_value(&self, batch: &ServerBatch<'_>, cfg: &ServerConfig) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.model.bind(&mut g);
        let parts = server_objective(&mut g, &self.model, &b, batch, cfg)?;
        Ok(g.scalar(parts.total))
    }

    /// Ingested uploads → `epochs` passes, each one SGD step per batch of
    /// at most `batch_size` uploads. Groups must be built beforehand.
    pub fn server_train(
        &mut self,
        uploads: &[UploadMessage],
        round: u32,
        subround: u32,
        cfg: &ServerConfig,
    ) -> Result<ServerLosses> {
        if uploads.is_empty() {
            return Err(Error::Protocol("server training without uploads".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("server batch_size must be positive".into()));
        }
        let mut rng = stream_rng(
            self.seed,
            Stream::ServerTrain,
            round as u64,
            subround as u64,
        );
        let mut last = ServerLosses::default();
        for _ in 0..cfg.epochs {
            last = ServerLosses::default();
            for chunk in uploads.chunks(cfg.batch_size) {
                let mut g = Graph::new();
                let b = self.model.bind(&mut g);
                let parts = {
                    let batch = self.make_batch(chunk, cfg.num_negatives, &mut rng)?;
                    server_objective(&mut g, &self.model, &b, &batch, cfg)?
                };
                last.rec += g.scalar(parts.rec);
                last.pc += parts.pc.map_or(0.0, |v| g.scalar(v));
                last.is += parts.is.map_or(0.0, |v| g.scalar(v));
                g.backward(parts.total)?;
                self.model.sgd_step(&g, &b, cfg.lr);
            }
        }
        Ok(last)
    }

    /// Soft-labeled sequence for `user`, sourced from another uploader of
    /// this subround (its similar group under [`Sharing::Similar`]).
    pub fn build_download<R: Rng + ?Sized>(
        &self,
        user: UserId,
        uploads: &[UploadMessage],
        round: u32,
        cfg: &ServerConfig,
        rng: &mut R,
    ) -> Result<DownloadMessage> {
        if uploads.is_empty() {
            return Err(Error::Protocol(format!(
                "no uploads to share with user {user}"
            )));
        }
        let others: Vec<&UploadMessage> = uploads.iter().filter(|u| u.user != user).collect();
        let grouped: Vec<&UploadMessage> = match cfg.sharing {
            Sharing::Similar => {
                let group: BTreeSet<UserId> = self
                    .similar_groups
                    .get(&user)
                    .into_iter()
                    .flatten()
                    .copied()
                    .collect();
                others
                    .iter()
                    .copied()
                    .filter(|u| group.contains(&u.user))
                    .collect()
            }
            Sharing::Random => Vec::new(),
        };
        let pool: Vec<&UploadMessage> = if !grouped.is_empty() {
            grouped
        } else if !others.is_empty() {
            others
        } else {
            uploads.iter().collect()
        };
        let source = pool[rng.gen_range(0..pool.len())];
        let payload = self.soft_label(&source.items, cfg.num_negatives, rng)?;
        Ok(DownloadMessage {
            user,
            round,
            payload,
        })
    }

    /// Candidates and server scores for every step of `items`.
    pub fn soft_label<R: Rng + ?Sized>(
        &self,
        items: &[ItemId],
        num_negatives: usize,
        rng: &mut R,
    ) -> Result<SoftLabeledSequence> {
        let items = truncated(items, self.model.config().max_seq_len);
        let states = self.model.prefix_states(items)?;
        let appear: BTreeSet<ItemId> = items.iter().copied().collect();
        let mut steps = Vec::with_capacity(items.len());
        for (t, &item) in items.iter().enumerate() {
            let mut cands = vec![item];
            cands.extend(sample_excluding(
                self.model.num_items(),
                &appear,
                num_negatives,
                rng,
            )?);
            let e = states.row(t);
            steps.push(
                cands
                    .into_iter()
                    .map(|c| (c, dot(e, self.model.item_embedding(c))))
                    .collect(),
            );
        }
        Ok(SoftLabeledSequence { steps })
    }

    /// Top-`k` items after `query`, excluding the query's own items; ties
    /// go to the lower id.
    pub fn recommend(&self, query: &[ItemId], k: usize) -> Result<Vec<ItemId>> {
        let e = self
            .model
            .context_vector(truncated(query, self.model.config().max_seq_len))?;
        let scores = self.model.score_all(&e)?;
        let seen: BTreeSet<ItemId> = query.iter().copied().collect();
        Ok(rank_items(&scores, &seen).into_iter().take(k).collect())
    }
}

/// Items (`scores[i]` belongs to item `i + 1`) outside `exclude`, best
/// first, ties by ascending id.
pub fn rank_items(scores: &[f64], exclude: &BTreeSet<ItemId>) -> Vec<ItemId> {
    let mut ids: Vec<ItemId> = (1..=scores.len() as ItemId)
        .filter(|i| !exclude.contains(i))
        .collect();
    ids.sort_by(|&a, &b| {
        scores[b as usize - 1]
            .total_cmp(&scores[a as usize - 1])
            .then(a.cmp(&b))
    });
    ids
}
