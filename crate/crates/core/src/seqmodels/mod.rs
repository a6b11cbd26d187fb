//! Mini GRU4Rec and SASRec encoders behind one [`SeqModel`] interface.
//!
//! Both architectures read the input `[START, v1, .., vt]`, where `START`
//! is a learned vector, and emit one causal latent row per input. Row `k`
//! scores candidates for the item at position `k + 1`, so the start row
//! conditions generation of the first item.

pub mod checkpoint;
mod gru;
pub mod loss;
mod sasrec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};
use crate::ItemId;

pub use loss::{rec_loss, soft_label_loss, SoftLabelLoss};

const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gru4rec,
    Sasrec,
}

impl Arch {
    pub fn tag(self) -> u32 {
        match self {
            Arch::Gru4rec => 0,
            Arch::Sasrec => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Arch::Gru4rec),
            1 => Ok(Arch::Sasrec),
            other => Err(Error::Codec(format!("unknown architecture tag {other}"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Gru4rec => "gru4rec",
            Arch::Sasrec => "sasrec",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gru4rec" | "gru" => Ok(Arch::Gru4rec),
            "sasrec" => Ok(Arch::Sasrec),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub num_items: usize,
}

impl ModelConfig {
    /// Client-side model: 8-dimensional, one block.
    pub fn client_preset(arch: Arch, num_items: usize) -> Self {
        Self {
            arch,
            embed_dim: 8,
            hidden_dim: 8,
            num_layers: 1,
            max_seq_len: 20,
            num_items,
        }
    }

    /// Server-side model: 32-dimensional, two stacked blocks.
    pub fn server_preset(arch: Arch, num_items: usize) -> Self {
        Self {
            arch,
            embed_dim: 32,
            hidden_dim: 32,
            num_layers: 2,
            max_seq_len: 20,
            num_items,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("max_seq_len", self.max_seq_len),
            ("num_items", self.num_items),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        // scores are e·V, so the latent width must equal the embedding width
        if self.hidden_dim != self.embed_dim {
            return Err(Error::Config(format!(
                "hidden_dim {} must equal embed_dim {}",
                self.hidden_dim, self.embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Uniform,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub(crate) init: Init,
}

impl ParamSpec {
    pub(crate) fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameter declaration order; also the checkpoint order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let mut specs = vec![
        ParamSpec::new("item_embeddings", vec![cfg.num_items + 1, d], Init::Uniform),
        ParamSpec::new("start", vec![d], Init::Uniform),
    ];
    match cfg.arch {
        Arch::Gru4rec => specs.extend(gru::layout(cfg)),
        Arch::Sasrec => specs.extend(sasrec::layout(cfg)),
    }
    specs
}

/// Closed-form parameter count for a configuration.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let (v, d, h, l) = (cfg.num_items, cfg.embed_dim, cfg.hidden_dim, cfg.num_layers);
    let shared = (v + 1) * d + d;
    match cfg.arch {
        Arch::Gru4rec => shared + 3 * (d * h + h * h + h) + (l - 1) * 3 * (h * h + h * h + h),
        Arch::Sasrec => {
            let block = 4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d);
            shared + (cfg.max_seq_len + 1) * d + l * block + 2 * d
        }
    }
}

/// Leaf handles for one model's parameters inside a [`Graph`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn embeddings(&self) -> Var {
        self.vars[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel {
    config: ModelConfig,
    params: Vec<Tensor>,
    seed: u64,
}

impl SeqModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(&config)
            .into_iter()
            .map(|spec| {
                let n = spec.numel();
                let data = match spec.init {
                    Init::Uniform => (0..n)
                        .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE))
                        .collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Tensor::new(spec.shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = Self {
            config,
            params,
            seed,
        };
        model.params[0].row_mut(0).fill(0.0);
        Ok(model)
    }

    /// Rebuilds a model from parameter tensors in [`layout`] order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        if specs.len() != params.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    p.shape(),
                    s.shape
                )));
            }
        }
        Ok(Self {
            config,
            params,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn num_items(&self) -> usize {
        self.config.num_items
    }

    pub fn item_embedding(&self, item: ItemId) -> &[f64] {
        self.params[0].row(item as usize)
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.leaf(p.clone())).collect(),
        }
    }

    pub(crate) fn check_items(&self, items: &[ItemId]) -> Result<()> {
        if items.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence of length {} exceeds max_seq_len {}",
                items.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(bad) = items
            .iter()
            .find(|&&i| i == 0 || i as usize > self.config.num_items)
        {
            return Err(Error::Input(format!(
                "item id {bad} outside 1..={}",
                self.config.num_items
            )));
        }
        Ok(())
    }

    /// Latent rows for `[START, items...]`: shape `(len + 1) × d`.
    pub fn encode_graph(&self, g: &mut Graph, b: &Bound, items: &[ItemId]) -> Result<Var> {
        self.check_items(items)?;
        let d = self.config.embed_dim;
        let start_row = g.rows(b.vars[1], 0, 1)?;
        debug_assert_eq!(g.value(start_row).cols(), d);
        let inputs = if items.is_empty() {
            start_row
        } else {
            let idx: Vec<usize> = items.iter().map(|&i| i as usize).collect();
            let emb = g.gather(b.vars[0], &idx)?;
            g.stack_rows(&[start_row, emb])?
        };
        match self.config.arch {
            Arch::Gru4rec => gru::forward(g, &self.config, &b.vars[2..], inputs),
            Arch::Sasrec => sasrec::forward(g, &self.config, &b.vars[2..], inputs),
        }
    }

    /// Per-step representations after each item: `t × d`, row `k` depends
    /// only on `seq[..=k]`.
    pub fn encode(&self, seq: &[ItemId]) -> Result<Tensor> {
        if seq.is_empty() {
            return Err(Error::Input("cannot encode an empty sequence".into()));
        }
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let h = self.encode_graph(&mut g, &b, seq)?;
        let rows = g.rows(h, 1, seq.len() + 1)?;
        Ok(g.value(rows).clone())
    }

    /// State used to score the item that follows `prefix`; an empty prefix
    /// yields the start state.
    pub fn context_vector(&self, prefix: &[ItemId]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let h = self.encode_graph(&mut g, &b, prefix)?;
        Ok(g.value(h).row(prefix.len()).to_vec())
    }

    /// Every conditioning state at once: row `t` is
    /// `context_vector(items[..t])`, so the result has `len + 1` rows.
    pub fn prefix_states(&self, items: &[ItemId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let h = self.encode_graph(&mut g, &b, items)?;
        Ok(g.value(h).clone())
    }

    /// Like [`bind`](Self::bind) but with constant leaves, for inference.
    fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.constant(p.clone())).collect(),
        }
    }

    /// Scores of every real item (index `i` holds item `i + 1`).
    pub fn score_all(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.config.embed_dim {
            return Err(Error::Config(format!(
                "latent vector of width {} against embeddings of width {}",
                e.len(),
                self.config.embed_dim
            )));
        }
        let table = &self.params[0];
        Ok((1..=self.config.num_items)
            .map(|i| dot(e, table.row(i)))
            .collect())
    }

    /// Scores of the given items only.
    pub fn score_items(&self, e: &[f64], items: &[ItemId]) -> Result<Vec<f64>> {
        if e.len() != self.config.embed_dim {
            return Err(Error::Config("latent width mismatch".into()));
        }
        items
            .iter()
            .map(|&i| {
                if i == 0 || i as usize > self.config.num_items {
                    Err(Error::Input(format!("item id {i} out of range")))
                } else {
                    Ok(dot(e, self.item_embedding(i)))
                }
            })
            .collect()
    }

    /// Row-wise scores `reps[r] · V[items[r]]` inside a graph.
    pub fn score_rows_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        reps: Var,
        items: &[ItemId],
    ) -> Result<Var> {
        let idx: Vec<usize> = items.iter().map(|&i| i as usize).collect();
        let emb = g.gather(b.embeddings(), &idx)?;
        g.row_dot(reps, emb)
    }

    /// Plain SGD from the leaf gradients in `g`. The padding row never moves.
    pub fn sgd_step(&mut self, g: &Graph, b: &Bound, lr: f64) {
        for (k, (p, &v)) in self.params.iter_mut().zip(&b.vars).enumerate() {
            let Some(grad) = g.grad(v) else { continue };
            let skip = if k == 0 { self.config.embed_dim } else { 0 };
            for (w, d) in p.data_mut().iter_mut().zip(grad).skip(skip) {
                *w -= lr * d;
            }
        }
    }

    /// Collects the gradient of every parameter (zeros where unreached).
    pub fn gradients(&self, g: &Graph, b: &Bound) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .zip(&b.vars)
            .map(|(p, &v)| {
                g.grad(v)
                    .map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)
            })
            .collect()
    }
}

/// Next-item loss of one sequence: inputs `[START, items[..T-1]]` predict
/// `items`, each step contrasted with `negatives[t]`. Also returns the
/// latent rows of the full `[START, items...]` input.
pub fn sequence_rec_loss(
    g: &mut Graph,
    model: &SeqModel,
    b: &Bound,
    items: &[ItemId],
    negatives: &[Vec<ItemId>],
) -> Result<(Var, Var)> {
    let t = items.len();
    if t == 0 {
        return Err(Error::Input("empty training sequence".into()));
    }
    if negatives.len() != t {
        return Err(Error::Input(format!(
            "{} negative lists for a sequence of length {t}",
            negatives.len()
        )));
    }
    let h = model.encode_graph(g, b, items)?;
    let preds = g.rows(h, 0, t)?;
    let pos = model.score_rows_graph(g, b, preds, items)?;
    let k = negatives[0].len();
    if negatives.iter().any(|n| n.len() != k) {
        return Err(Error::Input("ragged negative lists".into()));
    }
    let mut negs = Vec::with_capacity(k);
    for j in 0..k {
        let column: Vec<ItemId> = negatives.iter().map(|n| n[j]).collect();
        negs.push(model.score_rows_graph(g, b, preds, &column)?);
    }
    let loss = loss::rec_loss_graph(g, pos, &negs)?;
    Ok((loss, h))
}
