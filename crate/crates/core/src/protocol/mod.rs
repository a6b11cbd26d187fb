//! Round orchestration: the sequence-exchange protocol, the FedAvg
//! parameter-transmission baseline and a local-only control.

mod config;
mod ledger;

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{Mode, ModelPreset, ProtocolConfig};
pub use ledger::{
    comm_summary, compare, CommComparison, CommLedger, CommSummary, Direction, LedgerEntry,
};

use crate::autodiff::Graph;
use crate::client::ClientState;
use crate::data::{sample_step_negatives_from, Corpus, InteractionSequence, NegativePool};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_with, model_scores, EvalResult, Split};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::seqmodels::{checkpoint, sequence_rec_loss, SeqModel};
use crate::server::{ServerLosses, ServerState, UploadMessage};
use crate::tensor::Tensor;
use crate::UserId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub mode: Mode,
    pub round: u32,
    /// Users of each subround, in traversal order (each sorted by id).
    pub subrounds: Vec<Vec<UserId>>,
    pub mean_client_loss: f64,
    /// Mean over subrounds; absent outside the sequence-exchange mode.
    pub server_loss: Option<ServerLosses>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub eval: Option<EvalResult>,
}

impl RoundReport {
    pub fn participants(&self) -> impl Iterator<Item = UserId> + '_ {
        self.subrounds.iter().flatten().copied()
    }
}

/// One JSON object per line.
pub fn write_reports<W: Write>(mut out: W, reports: &[RoundReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Shuffles all users with the round's stream and cuts the order into
/// subrounds; every user lands in exactly one.
pub fn schedule(num_users: usize, subround_size: usize, seed: u64, round: u32) -> Vec<Vec<UserId>> {
    let mut order: Vec<UserId> = (0..num_users as UserId).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Schedule, round as u64, 0));
    order
        .chunks(subround_size.max(1))
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect()
}

fn check_corpus(corpus: &Corpus) -> Result<()> {
    if corpus
        .sequences
        .iter()
        .enumerate()
        .any(|(i, s)| s.user as usize != i)
    {
        return Err(Error::Input(
            "corpus users must be numbered densely in order".into(),
        ));
    }
    Ok(())
}

fn wants_eval(cfg: &ProtocolConfig, round: u32) -> bool {
    round + 1 == cfg.global_rounds
        || (cfg.eval_every > 0 && (round + 1).is_multiple_of(cfg.eval_every))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub struct PtfOutcome {
    pub reports: Vec<RoundReport>,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub ledger: CommLedger,
}

/// The sequence-exchange protocol. Per subround: selected clients train
/// and upload in parallel, the server ingests the uploads (sorted by
/// user), groups and trains, then every uploader gets one download.
pub fn run_ptf(corpus: &Corpus, cfg: &ProtocolConfig) -> Result<PtfOutcome> {
    cfg.validate()?;
    check_corpus(corpus)?;
    let ccfg = cfg.client_config();
    let scfg = cfg.server_config();
    let mut clients = corpus
        .sequences
        .iter()
        .map(|s| {
            ClientState::new(
                s.clone(),
                cfg.client_model_config(corpus.num_items),
                cfg.seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut server = ServerState::new(cfg.server_model_config(corpus.num_items), cfg.seed)?;
    let mut ledger = CommLedger::new(Mode::Ptf);
    let mut reports = Vec::with_capacity(cfg.global_rounds as usize);

    for round in 0..cfg.global_rounds {
        let subrounds = schedule(corpus.num_users(), cfg.subround_size, cfg.seed, round);
        let mut client_losses = Vec::with_capacity(corpus.num_users());
        let mut server_losses = Vec::with_capacity(subrounds.len());
        for (s, selected) in subrounds.iter().enumerate() {
            let chosen: BTreeSet<UserId> = selected.iter().copied().collect();
            let results = clients
                .par_iter_mut()
                .filter(|c| chosen.contains(&c.user))
                .map(|c| {
                    let stats = c.client_train(round, &ccfg)?;
                    Ok((stats.last(), c.build_upload(round, &ccfg)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let uploads: Vec<UploadMessage> = results
                .into_iter()
                .map(|(l, u)| {
                    client_losses.push(l);
                    u
                })
                .collect();
            for up in &uploads {
                ledger.record_frame(round, up.user, Direction::Up, up.encode()?);
            }

            server.ingest(&uploads);
            server.build_similar_groups(&uploads, scfg.group_size);
            server_losses.push(server.server_train(&uploads, round, s as u32, &scfg)?);

            let downloads = uploads
                .par_iter()
                .map(|up| {
                    let mut rng =
                        stream_rng(cfg.seed, Stream::Download, round as u64, up.user as u64);
                    server.build_download(up.user, &uploads, round, &scfg, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            for d in downloads {
                ledger.record_frame(round, d.user, Direction::Down, d.encode()?);
                clients[d.user as usize].receive(d.payload, ccfg.max_shared);
            }
        }
        let n = server_losses.len().max(1) as f64;
        let server_loss = server_losses
            .iter()
            .fold(ServerLosses::default(), |acc, l| ServerLosses {
                rec: acc.rec + l.rec / n,
                pc: acc.pc + l.pc / n,
                is: acc.is + l.is / n,
            });
        let eval = if wants_eval(cfg, round) {
            let mut r = evaluate(server.model(), corpus, cfg.eval_k, Split::Test)?;
            r.mode = "ptf".into();
            Some(r)
        } else {
            None
        };
        log::info!(
            "ptf round {round}: client loss {:.4}, server rec {:.4}",
            mean(&client_losses),
            server_loss.rec
        );
        reports.push(RoundReport {
            mode: Mode::Ptf,
            round,
            subrounds,
            mean_client_loss: mean(&client_losses),
            server_loss: Some(server_loss),
            bytes_up: ledger.round_bytes(round, Direction::Up),
            bytes_down: ledger.round_bytes(round, Direction::Down),
            eval,
        });
    }
    Ok(PtfOutcome {
        reports,
        server,
        clients,
        ledger,
    })
}

/// Server model queried with each user's latest perturbed upload instead
/// of the true history. Users without an upload are queried from the
/// start state.
pub fn evaluate_private(
    server: &ServerState,
    corpus: &Corpus,
    k: usize,
    split: Split,
) -> Result<EvalResult> {
    evaluate_with(corpus, k, split, "ptf-private", |seq, _| {
        let query = server
            .history(seq.user)
            .and_then(|h| h.back())
            .map(|u| u.items.clone())
            .unwrap_or_default();
        model_scores(server.model(), &query)
    })
}

/// Uniform parameter average of equally shaped models.
pub fn fedavg_aggregate(models: &[SeqModel]) -> Result<SeqModel> {
    let first = models
        .first()
        .ok_or_else(|| Error::Protocol("aggregation over zero models".into()))?;
    if models.iter().any(|m| m.config() != first.config()) {
        return Err(Error::Protocol(
            "aggregating models of different shapes".into(),
        ));
    }
    let n = models.len() as f64;
    let params = (0..first.params().len())
        .map(|p| {
            let mut data = vec![0.0; first.params()[p].len()];
            for m in models {
                for (acc, v) in data.iter_mut().zip(m.params()[p].data()) {
                    *acc += v;
                }
            }
            data.iter_mut().for_each(|v| *v /= n);
            Tensor::new(first.params()[p].shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    SeqModel::from_params(*first.config(), params, first.seed())
}

/// Plain next-item training of `model` on one private sequence; returns
/// the loss before each epoch's step.
pub fn local_fit(
    model: &mut SeqModel,
    seq: &mut InteractionSequence,
    epochs: usize,
    lr: f64,
    num_negatives: usize,
    pool: NegativePool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<f64>> {
    let keep = model.config().max_seq_len;
    let start = seq.items.len().saturating_sub(keep);
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut negs =
            sample_step_negatives_from(seq, model.num_items(), num_negatives, pool, rng)?;
        negs.drain(..start);
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let (l, _) = sequence_rec_loss(&mut g, model, &b, &seq.items[start..], &negs)?;
        losses.push(g.scalar(l));
        g.backward(l)?;
        model.sgd_step(&g, &b, lr);
    }
    Ok(losses)
}

pub struct FedAvgOutcome {
    pub reports: Vec<RoundReport>,
    pub model: SeqModel,
    pub ledger: CommLedger,
}

/// Parameter-transmission baseline: every selected client downloads the
/// global model, trains it locally and uploads it whole; the subround's
/// models are averaged uniformly.
pub fn run_fedavg_baseline(corpus: &Corpus, cfg: &ProtocolConfig) -> Result<FedAvgOutcome> {
    cfg.validate()?;
    check_corpus(corpus)?;
    let model_cfg = cfg.server_model_config(corpus.num_items);
    let mut global = SeqModel::new(model_cfg, derive_seed(cfg.seed, Stream::ServerInit, 0, 0))?;
    let frame_len = checkpoint::encoded_len(&model_cfg);
    let mut ledger = CommLedger::new(Mode::Fedavg);
    let mut reports = Vec::new();
    for round in 0..cfg.global_rounds {
        let subrounds = schedule(corpus.num_users(), cfg.subround_size, cfg.seed, round);
        let mut losses = Vec::new();
        for selected in &subrounds {
            let trained = selected
                .par_iter()
                .map(|&u| {
                    let mut local = global.clone();
                    let mut seq = corpus.sequences[u as usize].clone();
                    let mut rng = stream_rng(cfg.seed, Stream::FedAvg, u as u64, round as u64);
                    let l = local_fit(
                        &mut local,
                        &mut seq,
                        cfg.client_epochs,
                        cfg.lr_client,
                        cfg.num_negatives,
                        cfg.negative_pool,
                        &mut rng,
                    )?;
                    Ok((local, l.last().copied().unwrap_or(0.0)))
                })
                .collect::<Result<Vec<_>>>()?;
            for &u in selected {
                ledger.record_size(round, u, Direction::Down, frame_len);
                ledger.record_size(round, u, Direction::Up, frame_len);
            }
            let (models, l): (Vec<SeqModel>, Vec<f64>) = trained.into_iter().unzip();
            losses.extend(l);
            global = fedavg_aggregate(&models)?;
        }
        let eval = if wants_eval(cfg, round) {
            let mut r = evaluate(&global, corpus, cfg.eval_k, Split::Test)?;
            r.mode = "fedavg".into();
            Some(r)
        } else {
            None
        };
        reports.push(RoundReport {
            mode: Mode::Fedavg,
            round,
            subrounds,
            mean_client_loss: mean(&losses),
            server_loss: None,
            bytes_up: ledger.round_bytes(round, Direction::Up),
            bytes_down: ledger.round_bytes(round, Direction::Down),
            eval,
        });
    }
    Ok(FedAvgOutcome {
        reports,
        model: global,
        ledger,
    })
}

pub struct LocalOutcome {
    pub reports: Vec<RoundReport>,
    pub clients: Vec<ClientState>,
    pub result: EvalResult,
}

/// Each client trains its own model for the same rounds and epochs with no
/// exchange; each user is scored by their own model.
pub fn local_only_baseline(corpus: &Corpus, cfg: &ProtocolConfig) -> Result<LocalOutcome> {
    cfg.validate()?;
    check_corpus(corpus)?;
    let ccfg = cfg.client_config();
    let mut clients = corpus
        .sequences
        .iter()
        .map(|s| {
            ClientState::new(
                s.clone(),
                cfg.client_model_config(corpus.num_items),
                cfg.seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::new();
    for round in 0..cfg.global_rounds {
        let losses = clients
            .par_iter_mut()
            .map(|c| c.client_train(round, &ccfg).map(|s| s.last()))
            .collect::<Result<Vec<_>>>()?;
        reports.push(RoundReport {
            mode: Mode::Local,
            round,
            subrounds: vec![(0..corpus.num_users() as UserId).collect()],
            mean_client_loss: mean(&losses),
            server_loss: None,
            bytes_up: 0,
            bytes_down: 0,
            eval: None,
        });
    }
    let result = evaluate_with(corpus, cfg.eval_k, Split::Test, "local", |seq, ctx| {
        model_scores(clients[seq.user as usize].model(), ctx)
    })?;
    if let Some(last) = reports.last_mut() {
        last.eval = Some(result.clone());
    }
    Ok(LocalOutcome {
        reports,
        clients,
        result,
    })
}
