//! Client runtime: local training on private and server-shared data, and
//! upload construction with the exponential mechanism.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{sample_step_negatives_from, InteractionSequence, NegativePool};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::seqmodels::loss::{soft_label_loss_graph, SoftLabelLoss};
use crate::seqmodels::{sequence_rec_loss, Bound, ModelConfig, SeqModel};
use crate::tensor::{sigmoid_scalar, softmax_in_place};
use crate::{ItemId, UserId};

pub use crate::wire::{SoftLabeledSequence, UploadMessage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Negatives per training step.
    pub num_negatives: usize,
    pub negative_pool: NegativePool,
    /// Fraction of positions replaced in an upload.
    pub beta: f64,
    pub epsilon: f64,
    pub sensitivity: f64,
    pub soft_loss: SoftLabelLoss,
    /// Downloads kept in the shared set.
    pub max_shared: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.05,
            num_negatives: 1,
            negative_pool: NegativePool::TrainOnly,
            beta: 0.5,
            epsilon: 1.0,
            sensitivity: 1.0,
            soft_loss: SoftLabelLoss::Bce,
            max_shared: 1,
        }
    }
}

/// Per-call training summary: loss before each epoch's update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub epoch_losses: Vec<f64>,
}

impl TrainStats {
    pub fn last(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub user: UserId,
    model: SeqModel,
    private_data: InteractionSequence,
    shared_data: Vec<SoftLabeledSequence>,
    global_seed: u64,
    trained_round: Option<u32>,
}

/// Selection probabilities `∝ exp(ε·r/(2Δ))`.
pub fn exp_mech_probabilities(scores: &[f64], epsilon: f64, sensitivity: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Input(
            "exponential mechanism over zero candidates".into(),
        ));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) || !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::Input(format!(
            "exponential mechanism needs ε > 0 and Δ > 0, got ε={epsilon}, Δ={sensitivity}"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("exp_mech scores"));
    }
    let scale = epsilon / (2.0 * sensitivity);
    let mut p: Vec<f64> = scores.iter().map(|s| scale * s).collect();
    softmax_in_place(&mut p);
    Ok(p)
}

/// Draws one index from [`exp_mech_probabilities`] by inverse CDF.
pub fn exp_mech_sample<R: Rng + ?Sized>(
    scores: &[f64],
    epsilon: f64,
    sensitivity: f64,
    rng: &mut R,
) -> Result<usize> {
    let p = exp_mech_probabilities(scores, epsilon, sensitivity)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return Ok(i);
        }
    }
    // rounding left a sliver above the running total
    Ok(p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1))
}

/// Privacy budget spent by one upload of length `t`.
pub fn upload_budget(t: usize, beta: f64, epsilon: f64) -> f64 {
    epsilon * replaced_count(t, beta) as f64
}

pub fn replaced_count(t: usize, beta: f64) -> usize {
    ((beta * t as f64).ceil() as usize).min(t)
}

impl ClientState {
    /// A fresh client; the model seed depends only on the global seed and
    /// the user id.
    pub fn new(
        private_data: InteractionSequence,
        config: ModelConfig,
        global_seed: u64,
    ) -> Result<Self> {
        let seed =
            crate::rng::derive_seed(global_seed, Stream::ClientInit, private_data.user as u64, 0);
        Ok(Self {
            user: private_data.user,
            model: SeqModel::new(config, seed)?,
            private_data,
            shared_data: Vec::new(),
            global_seed,
            trained_round: None,
        })
    }

    pub fn model(&self) -> &SeqModel {
        &self.model
    }

    /// Round of the most recent `client_train`.
    pub fn trained_round(&self) -> Option<u32> {
        self.trained_round
    }

    pub fn model_mut(&mut self) -> &mut SeqModel {
        &mut self.model
    }

    pub fn private_data(&self) -> &InteractionSequence {
        &self.private_data
    }

    pub fn shared_data(&self) -> &[SoftLabeledSequence] {
        &self.shared_data
    }

    /// `V'_u` in ascending id order.
    pub fn candidates(&self) -> Vec<ItemId> {
        self.private_data.trained_items.iter().copied().collect()
    }

    /// Stores a download, keeping at most `max_shared` (newest last).
    pub fn receive(&mut self, payload: SoftLabeledSequence, max_shared: usize) {
        self.shared_data.push(payload);
        let excess = self.shared_data.len().saturating_sub(max_shared);
        self.shared_data.drain(..excess);
    }

    fn train_items(&self) -> &[ItemId] {
        let items = &self.private_data.items;
        &items[items.len().saturating_sub(self.model.config().max_seq_len)..]
    }

    /// Local objective (private next-item loss plus one soft-label term per
    /// shared sequence) built inside `g`.
    pub fn objective_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        negatives: &[Vec<ItemId>],
        soft_loss: SoftLabelLoss,
    ) -> Result<Var> {
        let (mut total, _) = sequence_rec_loss(g, &self.model, b, self.train_items(), negatives)?;
        for shared in &self.shared_data {
            if let Some(l) = soft_label_term(g, &self.model, b, shared, soft_loss)? {
                total = g.add(total, l)?;
            }
        }
        Ok(total)
    }

    /// Local objective with the given per-step negatives (one list per
    /// training step).
    pub fn loss_with(&self, negatives: &[Vec<ItemId>], soft_loss: SoftLabelLoss) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.model.bind(&mut g);
        let l = self.objective_graph(&mut g, &b, negatives, soft_loss)?;
        Ok(g.scalar(l))
    }

    /// `epochs` SGD steps on the private sequence (fresh negatives per
    /// epoch) plus the soft-label loss on every shared sequence.
    pub fn client_train(&mut self, round: u32, cfg: &ClientConfig) -> Result<TrainStats> {
        let mut rng = stream_rng(
            self.global_seed,
            Stream::ClientTrain,
            self.user as u64,
            round as u64,
        );
        let num_items = self.model.num_items();
        let t = self.train_items().len();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let mut negatives = sample_step_negatives_from(
                &mut self.private_data,
                num_items,
                cfg.num_negatives,
                cfg.negative_pool,
                &mut rng,
            )?;
            negatives.drain(..negatives.len() - t);
            let mut g = Graph::new();
            let b = self.model.bind(&mut g);
            let l = self.objective_graph(&mut g, &b, &negatives, cfg.soft_loss)?;
            epoch_losses.push(g.scalar(l));
            g.backward(l)?;
            self.model.sgd_step(&g, &b, cfg.lr);
        }
        self.trained_round = Some(round);
        Ok(TrainStats { epoch_losses })
    }

    /// Sigmoid-clamped scores of `V'_u` (ascending id) for the item that
    /// follows `prefix`.
    pub fn prefix_scores(&self, prefix: &[ItemId]) -> Result<Vec<f64>> {
        let keep = self.model.config().max_seq_len;
        let prefix = &prefix[prefix.len().saturating_sub(keep)..];
        let e = self.model.context_vector(prefix)?;
        let raw = self.model.score_items(&e, &self.candidates())?;
        Ok(raw.into_iter().map(sigmoid_scalar).collect())
    }

    /// Builds the perturbed upload and reports which positions were
    /// replaced (ascending).
    pub fn build_upload_traced(
        &self,
        round: u32,
        cfg: &ClientConfig,
    ) -> Result<(UploadMessage, Vec<usize>)> {
        if self.trained_round != Some(round) {
            return Err(Error::Usage(format!(
                "client {} builds an upload for round {round} without training in it",
                self.user
            )));
        }
        let mut rng = stream_rng(
            self.global_seed,
            Stream::Upload,
            self.user as u64,
            round as u64,
        );
        let mut items = self.private_data.items.clone();
        let t = items.len();
        let mut positions = index::sample(&mut rng, t, replaced_count(t, cfg.beta)).into_vec();
        positions.sort_unstable();
        if !positions.is_empty() {
            let pool = self.candidates();
            for &p in &positions {
                let scores = self.prefix_scores(&items[..p])?;
                let pick = exp_mech_sample(&scores, cfg.epsilon, cfg.sensitivity, &mut rng)?;
                items[p] = pool[pick];
            }
        }
        Ok((
            UploadMessage {
                user: self.user,
                round,
                items,
            },
            positions,
        ))
    }

    pub fn build_upload(&self, round: u32, cfg: &ClientConfig) -> Result<UploadMessage> {
        self.build_upload_traced(round, cfg).map(|(m, _)| m)
    }
}

/// Soft-label loss of one downloaded sequence: each step's candidates are
/// scored from the state after the preceding sequence items.
/// `None` when nothing is left after truncation.
pub fn soft_label_term(
    g: &mut Graph,
    model: &SeqModel,
    b: &Bound,
    shared: &SoftLabeledSequence,
    kind: SoftLabelLoss,
) -> Result<Option<Var>> {
    let keep = model.config().max_seq_len;
    let steps = &shared.steps[shared.steps.len().saturating_sub(keep)..];
    if steps.is_empty() {
        return Ok(None);
    }
    let items: Vec<ItemId> = steps.iter().map(|s| s[0].0).collect();
    let h = model.encode_graph(g, b, &items)?;
    let mut rows = Vec::new();
    let mut cands = Vec::new();
    let mut labels = Vec::new();
    for (t, step) in steps.iter().enumerate() {
        for &(item, label) in step {
            rows.push(t);
            cands.push(item);
            labels.push(label);
        }
    }
    let reps = g.gather(h, &rows)?;
    let pred = model.score_rows_graph(g, b, reps, &cands)?;
    soft_label_loss_graph(g, pred, &labels, kind).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodels::Arch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn client(items: Vec<ItemId>, num_items: usize) -> ClientState {
        let cfg = ModelConfig::client_preset(Arch::Sasrec, num_items);
        let n = items.len() as ItemId;
        ClientState::new(InteractionSequence::new(3, items, n + 1, n + 2), cfg, 11).unwrap()
    }

    fn tv(p: &[f64], q: &[f64]) -> f64 {
        0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    fn empirical(scores: &[f64], eps: f64, draws: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0usize; scores.len()];
        for _ in 0..draws {
            counts[exp_mech_sample(scores, eps, 1.0, &mut rng).unwrap()] += 1;
        }
        counts.iter().map(|&c| c as f64 / draws as f64).collect()
    }

    #[test]
    fn two_candidate_closed_form() {
        let p = exp_mech_probabilities(&[1.0, 0.0], 2.0, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn tiny_epsilon_is_uniform() {
        let scores: Vec<f64> = (0..10).map(|i| i as f64 / 9.0).collect();
        let emp = empirical(&scores, 1e-6, 100_000, 1);
        assert!(tv(&emp, &[0.1; 10]) < 0.01);
    }

    #[test]
    fn sampler_matches_probabilities() {
        let scores = [0.05, 0.9, 0.3, 0.5, 0.99, 0.0, 0.7, 0.2, 0.6, 0.45];
        let p = exp_mech_probabilities(&scores, 5.0, 1.0).unwrap();
        let emp = empirical(&scores, 5.0, 100_000, 2);
        assert!(tv(&emp, &p) < 0.01);
    }

    #[test]
    fn bad_inputs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(exp_mech_sample(&[], 1.0, 1.0, &mut rng).is_err());
        assert!(exp_mech_probabilities(&[0.5], 0.0, 1.0).is_err());
        assert!(exp_mech_probabilities(&[0.5], 1.0, 0.0).is_err());
        assert_eq!(exp_mech_sample(&[0.3], 1.0, 1.0, &mut rng).unwrap(), 0);
    }

    #[test]
    fn budget_counts_replaced_positions() {
        assert_eq!(replaced_count(8, 0.5), 4);
        assert_eq!(replaced_count(7, 0.5), 4);
        assert_eq!(replaced_count(5, 0.0), 0);
        assert_eq!(replaced_count(5, 1.0), 5);
        assert!((upload_budget(8, 0.5, 1.5) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn prefix_scores_are_gathered_sigmoids() {
        let mut c = client(vec![1, 2, 3, 4, 5, 6], 30);
        c.client_train(0, &ClientConfig::default()).unwrap();
        let prefix = [2, 3];
        let s = c.prefix_scores(&prefix).unwrap();
        let e = c.model().context_vector(&prefix).unwrap();
        let all = c.model().score_all(&e).unwrap();
        let pool = c.candidates();
        assert_eq!(s.len(), pool.len());
        for (v, &i) in s.iter().zip(&pool) {
            assert!(*v > 0.0 && *v < 1.0);
            assert!((v - sigmoid_scalar(all[i as usize - 1])).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_pool_is_deterministic() {
        let mut c = client(vec![4, 4, 4, 4, 4], 10);
        c.trained_round = Some(0);
        assert_eq!(c.prefix_scores(&[4]).unwrap().len(), 1);
        let cfg = ClientConfig {
            beta: 1.0,
            ..Default::default()
        };
        let up = c.build_upload(0, &cfg).unwrap();
        assert_eq!(up.items, vec![4; 5]);
    }

    #[test]
    fn upload_needs_training_this_round() {
        let mut c = client(vec![1, 2, 3], 10);
        assert!(c.build_upload(0, &ClientConfig::default()).is_err());
        c.client_train(0, &ClientConfig::default()).unwrap();
        assert!(c.build_upload(0, &ClientConfig::default()).is_ok());
        assert!(c.build_upload(1, &ClientConfig::default()).is_err());
    }

    #[test]
    fn beta_zero_uploads_truth() {
        let mut c = client(vec![1, 2, 3, 4, 5], 20);
        let cfg = ClientConfig {
            beta: 0.0,
            ..Default::default()
        };
        c.client_train(0, &cfg).unwrap();
        let (up, pos) = c.build_upload_traced(0, &cfg).unwrap();
        assert!(pos.is_empty());
        assert_eq!(up.items, c.private_data().items);
        assert_eq!(up.encoded_len(), 12 + 4 * 5);
    }

    #[test]
    fn half_replacement_touches_exactly_half() {
        let truth: Vec<ItemId> = (1..=8).collect();
        let mut c = client(truth.clone(), 40);
        let cfg = ClientConfig::default();
        for round in 0..20 {
            c.client_train(round, &cfg).unwrap();
            let (up, pos) = c.build_upload_traced(round, &cfg).unwrap();
            assert_eq!(pos.len(), 4);
            assert_eq!(up.items.len(), 8);
            let pool = c.private_data().trained_items.clone();
            for (t, (&a, &b)) in up.items.iter().zip(&truth).enumerate() {
                assert!(pool.contains(&a));
                if !pos.contains(&t) {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn full_replacement_overlap_matches_uniform_limit() {
        let truth: Vec<ItemId> = (1..=6).collect();
        let mut c = client(truth.clone(), 30);
        let train = ClientConfig::default();
        c.client_train(0, &train).unwrap();
        let pool_size = c.candidates().len() as f64;
        let cfg = ClientConfig {
            beta: 1.0,
            epsilon: 1e-6,
            ..Default::default()
        };
        let trials = 1000;
        let mut overlaps = Vec::with_capacity(trials);
        for trial in 0..trials {
            // vary the stream via the seed while keeping the trained model
            let mut probe = c.clone();
            probe.global_seed = 1000 + trial as u64;
            let (up, pos) = probe.build_upload_traced(0, &cfg).unwrap();
            assert_eq!(pos.len(), 6);
            overlaps.push(up.items.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64);
        }
        let mean = overlaps.iter().sum::<f64>() / trials as f64;
        let expected = truth.len() as f64 / pool_size;
        let p = 1.0 / pool_size;
        let sd = (truth.len() as f64 * p * (1.0 - p) / trials as f64).sqrt();
        assert!(
            (mean - expected).abs() < 3.0 * sd,
            "{mean} vs {expected} ± {sd}"
        );
    }

    #[test]
    fn identical_clients_stay_identical() {
        let mut a = client(vec![1, 5, 2, 7, 3], 20);
        let mut b = a.clone();
        let cfg = ClientConfig::default();
        a.client_train(2, &cfg).unwrap();
        b.client_train(2, &cfg).unwrap();
        assert_eq!(a.model().params(), b.model().params());
        assert_eq!(
            a.build_upload(2, &cfg).unwrap(),
            b.build_upload(2, &cfg).unwrap()
        );
    }

    #[test]
    fn training_lowers_fixed_negative_loss() {
        let mut c = client(vec![1, 2, 3, 4, 5, 6, 7, 8], 30);
        c.receive(
            SoftLabeledSequence {
                steps: vec![vec![(9, 2.0), (10, -2.0)], vec![(11, 1.0), (12, -1.0)]],
            },
            1,
        );
        let negs: Vec<Vec<ItemId>> = (0..8).map(|t| vec![20 + t as ItemId]).collect();
        let cfg = ClientConfig {
            lr: 0.01,
            ..Default::default()
        };
        let before = c.loss_with(&negs, cfg.soft_loss).unwrap();
        let stats = c.client_train(0, &cfg).unwrap();
        assert_eq!(stats.epoch_losses.len(), 5);
        let after = c.loss_with(&negs, cfg.soft_loss).unwrap();
        assert!(after <= before * 1.05, "{after} > {before}");
    }

    #[test]
    fn shared_set_is_bounded() {
        let mut c = client(vec![1, 2, 3], 10);
        for k in 0..3 {
            c.receive(
                SoftLabeledSequence {
                    steps: vec![vec![(k + 1, 0.0)]],
                },
                1,
            );
        }
        assert_eq!(c.shared_data().len(), 1);
        assert_eq!(c.shared_data()[0].items(), vec![3]);
    }
}
