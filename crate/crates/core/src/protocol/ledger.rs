//! Byte accounting for every message that crosses the simulated network.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::Result;
use crate::UserId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Up => "up",
            Self::Down => "down",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub round: u32,
    pub user: UserId,
    pub direction: Direction,
    pub bytes: usize,
    /// The encoded frame, kept when the ledger retains frames.
    pub frame: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommLedger {
    pub mode: Mode,
    entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            entries: Vec::new(),
        }
    }

    /// Records an encoded frame; its length is the byte count.
    pub fn record_frame(&mut self, round: u32, user: UserId, direction: Direction, frame: Vec<u8>) {
        self.entries.push(LedgerEntry {
            round,
            user,
            direction,
            bytes: frame.len(),
            frame: Some(frame),
        });
    }

    /// Records a transfer by size only (large parameter payloads).
    pub fn record_size(&mut self, round: u32, user: UserId, direction: Direction, bytes: usize) {
        self.entries.push(LedgerEntry {
            round,
            user,
            direction,
            bytes,
            frame: None,
        });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    fn sum(&self, keep: impl Fn(&LedgerEntry) -> bool) -> u64 {
        self.entries
            .iter()
            .filter(|e| keep(e))
            .map(|e| e.bytes as u64)
            .sum()
    }

    pub fn round_bytes(&self, round: u32, direction: Direction) -> u64 {
        self.sum(|e| e.round == round && e.direction == direction)
    }

    pub fn client_bytes(&self, user: UserId, direction: Direction) -> u64 {
        self.sum(|e| e.user == user && e.direction == direction)
    }

    pub fn total(&self, direction: Direction) -> u64 {
        self.sum(|e| e.direction == direction)
    }

    /// Distinct `(round, user)` pairs that exchanged anything.
    pub fn participations(&self) -> usize {
        self.entries
            .iter()
            .map(|e| (e.round, e.user))
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// `mode,round,user,direction,bytes` rows in recording order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mode", "round", "user", "direction", "bytes"])?;
        for e in &self.entries {
            w.write_record([
                self.mode.to_string(),
                e.round.to_string(),
                e.user.to_string(),
                e.direction.to_string(),
                e.bytes.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean bytes per participating client per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommSummary {
    pub mode: Mode,
    pub up_per_client_round: f64,
    pub down_per_client_round: f64,
    pub participations: usize,
}

pub fn comm_summary(ledger: &CommLedger) -> CommSummary {
    let n = ledger.participations().max(1) as f64;
    CommSummary {
        mode: ledger.mode,
        up_per_client_round: ledger.total(Direction::Up) as f64 / n,
        down_per_client_round: ledger.total(Direction::Down) as f64 / n,
        participations: ledger.participations(),
    }
}

/// How many times more a parameter-transmission run moves per client and
/// round than a sequence-exchange run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommComparison {
    pub ptf: CommSummary,
    pub fedavg: CommSummary,
    pub up_ratio: f64,
    pub down_ratio: f64,
}

pub fn compare(ptf: &CommLedger, fedavg: &CommLedger) -> CommComparison {
    let ptf = comm_summary(ptf);
    let fedavg = comm_summary(fedavg);
    CommComparison {
        up_ratio: fedavg.up_per_client_round / ptf.up_per_client_round,
        down_ratio: fedavg.down_per_client_round / ptf.down_per_client_round,
        ptf,
        fedavg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_by_round_client_and_direction() {
        let mut l = CommLedger::new(Mode::Ptf);
        l.record_frame(0, 1, Direction::Up, vec![0; 92]);
        l.record_frame(0, 1, Direction::Down, vec![0; 40]);
        l.record_frame(0, 2, Direction::Up, vec![0; 20]);
        l.record_size(1, 1, Direction::Up, 92);
        assert_eq!(l.round_bytes(0, Direction::Up), 112);
        assert_eq!(l.client_bytes(1, Direction::Up), 184);
        assert_eq!(l.total(Direction::Down), 40);
        assert_eq!(l.participations(), 3);
        let s = comm_summary(&l);
        assert!((s.up_per_client_round - 204.0 / 3.0).abs() < 1e-12);
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("mode,round,user,direction,bytes\nptf,0,1,up,92\n"));
    }
}
