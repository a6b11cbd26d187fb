//! Seeded synthetic interaction logs from a first-order Markov chain with
//! planted item clusters.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{preprocess, Corpus, PreprocessConfig, RawInteraction};
use crate::error::{Error, Result};

/// Probability mass a transition keeps inside the current item's cluster.
pub const WITHIN_CLUSTER_MASS: f64 = 0.8;
/// Sharpness of within-cluster preferences (weights are `u^SHARPNESS`).
const SHARPNESS: i32 = 4;

/// Transition structure over items `0..num_items` (generator indices,
/// not dense corpus ids).
#[derive(Debug, Clone)]
pub struct MarkovChain {
    clusters: Vec<usize>,
    rows: Vec<WeightedIndex<f64>>,
}

impl MarkovChain {
    pub fn new<R: Rng + ?Sized>(num_items: usize, rng: &mut R) -> Result<Self> {
        if num_items < 10 {
            return Err(Error::Input(format!(
                "synthetic corpus needs ≥ 10 items, got {num_items}"
            )));
        }
        let num_clusters = (num_items / 10).max(2);
        let clusters: Vec<usize> = (0..num_items)
            .map(|i| i * num_clusters / num_items)
            .collect();
        let mut rows = Vec::with_capacity(num_items);
        for i in 0..num_items {
            let c = clusters[i];
            let inside: Vec<usize> = (0..num_items)
                .filter(|&j| j != i && clusters[j] == c)
                .collect();
            let outside = num_items - inside.len() - 1;
            let raw: Vec<f64> = inside
                .iter()
                .map(|_| rng.gen::<f64>().powi(SHARPNESS) + 1e-6)
                .collect();
            let raw_total: f64 = raw.iter().sum();
            let mut weights = vec![0.0; num_items];
            for (&j, w) in inside.iter().zip(&raw) {
                weights[j] = WITHIN_CLUSTER_MASS * w / raw_total;
            }
            for (j, w) in weights.iter_mut().enumerate() {
                if j != i && clusters[j] != c {
                    *w = (1.0 - WITHIN_CLUSTER_MASS) / outside as f64;
                }
            }
            rows.push(WeightedIndex::new(&weights).map_err(|e| Error::Input(e.to_string()))?);
        }
        Ok(Self { clusters, rows })
    }

    pub fn num_items(&self) -> usize {
        self.clusters.len()
    }

    pub fn cluster_of(&self, item: usize) -> usize {
        self.clusters[item]
    }

    pub fn step<R: Rng + ?Sized>(&self, current: usize, rng: &mut R) -> usize {
        self.rows[current].sample(rng)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Planted cluster of each dense item id (index 0 unused).
    pub item_cluster: Vec<usize>,
}

/// Raw sequence lengths are uniform in `[5, max_len + 2]` so that every
/// user survives preprocessing.
pub fn synth_corpus(num_users: usize, num_items: usize, seed: u64) -> Result<SyntheticCorpus> {
    let cfg = PreprocessConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = MarkovChain::new(num_items, &mut rng)?;
    let mut raw = Vec::new();
    for u in 0..num_users {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len + 2);
        let mut cur = rng.gen_range(0..num_items);
        for t in 0..len {
            if t > 0 {
                cur = chain.step(cur, &mut rng);
            }
            raw.push(RawInteraction {
                user_id: format!("u{u:05}"),
                item_id: format!("i{cur:05}"),
                timestamp: t as i64,
            });
        }
    }
    let corpus = preprocess(&raw, cfg)?;
    let mut item_cluster = vec![0; corpus.num_items + 1];
    for (i, name) in corpus.item_names.iter().enumerate() {
        let generator_index: usize = name[1..].parse().expect("synthetic item name");
        item_cluster[i + 1] = chain.cluster_of(generator_index);
    }
    Ok(SyntheticCorpus {
        corpus,
        item_cluster,
    })
}
