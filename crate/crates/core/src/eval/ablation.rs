//! One-knob sweeps over the sequence-exchange protocol.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::protocol::{run_ptf, ProtocolConfig};
use crate::server::Sharing;

use super::{evaluate, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Beta,
    Epsilon,
    LambdaPc,
    LambdaIs,
    K,
    Sharing,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Beta => "beta",
            Self::Epsilon => "epsilon",
            Self::LambdaPc => "lambda_pc",
            Self::LambdaIs => "lambda_is",
            Self::K => "K",
            Self::Sharing => "sharing",
        }
    }

    /// Copy of `cfg` with this knob set to `value`.
    pub fn apply(self, cfg: &ProtocolConfig, value: &str) -> Result<ProtocolConfig> {
        let num = || {
            value
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{}: {value:?} is not a number", self.name())))
        };
        let mut out = cfg.clone();
        match self {
            Self::Beta => out.beta = num()?,
            Self::Epsilon => out.epsilon = num()?,
            Self::LambdaPc => out.lambda_pc = num()?,
            Self::LambdaIs => out.lambda_is = num()?,
            Self::K => {
                out.group_size = value
                    .parse()
                    .map_err(|_| Error::Config(format!("K: {value:?} is not a count")))?
            }
            Self::Sharing => {
                out.sharing = match value {
                    "similar" | "+sk" | "+SK" => Sharing::Similar,
                    "random" | "-sk" | "-SK" => Sharing::Random,
                    other => return Err(Error::Config(format!("unknown sharing mode {other:?}"))),
                }
            }
        }
        out.validate()?;
        Ok(out)
    }

    fn current(self, cfg: &ProtocolConfig) -> String {
        match self {
            Self::Beta => cfg.beta.to_string(),
            Self::Epsilon => cfg.epsilon.to_string(),
            Self::LambdaPc => cfg.lambda_pc.to_string(),
            Self::LambdaIs => cfg.lambda_is.to_string(),
            Self::K => cfg.group_size.to_string(),
            Self::Sharing => match cfg.sharing {
                Sharing::Similar => "similar".into(),
                Sharing::Random => "random".into(),
            },
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(Self::Beta),
            "epsilon" | "eps" => Ok(Self::Epsilon),
            "lambda_pc" => Ok(Self::LambdaPc),
            "lambda_is" => Ok(Self::LambdaIs),
            "K" | "k" | "group_size" => Ok(Self::K),
            "sharing" => Ok(Self::Sharing),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub is_default: bool,
    pub hr: f64,
    pub ndcg: f64,
    pub users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub k: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Swept axis first, then `default,k,hr,ndcg,users`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([self.axis.name(), "default", "k", "hr", "ndcg", "users"])?;
        for r in &self.rows {
            w.write_record([
                r.value.clone(),
                r.is_default.to_string(),
                self.k.to_string(),
                format!("{:.6}", r.hr),
                format!("{:.6}", r.ndcg),
                r.users.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the protocol once with `cfg` (the default row) and once per value
/// of `axis`, scoring the final server model on the test split.
pub fn ablation_grid(
    corpus: &Corpus,
    cfg: &ProtocolConfig,
    axis: Axis,
    values: &[String],
) -> Result<AblationTable> {
    let mut cells = vec![(axis.current(cfg), true, cfg.clone())];
    for v in values {
        cells.push((v.clone(), false, axis.apply(cfg, v)?));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (value, is_default, c) in cells {
        let out = run_ptf(corpus, &ProtocolConfig { eval_every: 0, ..c })?;
        let r = evaluate(out.server.model(), corpus, cfg.eval_k, Split::Test)?;
        log::info!("ablation {}={value}: hr@{} {:.4}", axis.name(), r.k, r.hr);
        rows.push(AblationRow {
            value,
            is_default,
            hr: r.hr,
            ndcg: r.ndcg,
            users: r.users,
        });
    }
    Ok(AblationTable {
        axis,
        k: cfg.eval_k,
        rows,
    })
}
