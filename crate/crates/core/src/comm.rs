//! Per-round communication accounting.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::aggregation::Strategy;
use crate::error::{Error, Result};

/// Declared wire precision of one transmitted entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    F16,
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn bytes_per_entry(self) -> u64 {
        match self {
            Precision::F16 => 2,
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn bits(self) -> u32 {
        self.bytes_per_entry() as u32 * 8
    }
}

impl TryFrom<u32> for Precision {
    type Error = Error;

    fn try_from(bits: u32) -> Result<Self> {
        match bits {
            16 => Ok(Precision::F16),
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(Error::ConfigValidation {
                field: "precision".into(),
                message: format!("{other} is not one of 16, 32, 64"),
            }),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        p.bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    /// output dimension
    pub k: usize,
    /// input dimension
    pub d: usize,
}

/// Entry counts one client sends and receives in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Traffic {
    pub up: u64,
    pub down: u64,
}

/// Per-client traffic for one round, summed over layers. `ranks[u]` is client
/// `u`'s adapter rank.
pub fn comm_account(strategy: Strategy, shapes: &[LayerShape], ranks: &[usize]) -> Vec<Traffic> {
    let total_rank: u64 = ranks.iter().map(|&r| r as u64).sum();
    ranks
        .iter()
        .map(|&r| {
            let r = r as u64;
            let mut t = Traffic::default();
            for s in shapes {
                let (k, d) = (s.k as u64, s.d as u64);
                let pair = k * r + r * d;
                let (up, down) = match strategy {
                    Strategy::Fedit | Strategy::FloraNa => (pair, pair),
                    Strategy::Ffa => (k * r, k * r),
                    Strategy::Fedsa => (r * d, r * d),
                    Strategy::Stack => (pair, (k + d) * total_rank),
                    Strategy::Fedex => (pair, pair + k * d),
                    Strategy::Ideal => (pair, k * d),
                };
                t.up += up;
                t.down += down;
            }
            t
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Up => "up",
            Direction::Down => "down",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRow {
    pub round: usize,
    pub client: usize,
    pub dir: Direction,
    pub entries: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    rows: Vec<CommRow>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        round: usize,
        client: usize,
        dir: Direction,
        entries: u64,
        bytes: u64,
    ) {
        self.rows.push(CommRow {
            round,
            client,
            dir,
            entries,
            bytes,
        });
    }

    /// Records a round at the declared precision for every entry.
    pub fn record_round(&mut self, round: usize, traffic: &[Traffic], precision: Precision) {
        let b = precision.bytes_per_entry();
        for (client, t) in traffic.iter().enumerate() {
            self.record(round, client, Direction::Up, t.up, t.up * b);
            self.record(round, client, Direction::Down, t.down, t.down * b);
        }
    }

    pub fn rows(&self) -> &[CommRow] {
        &self.rows
    }

    pub fn round_bytes(&self, round: usize, dir: Direction) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.round == round && r.dir == dir)
            .map(|r| r.bytes)
            .sum()
    }

    pub fn total_bytes(&self, dir: Direction) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.dir == dir)
            .map(|r| r.bytes)
            .sum()
    }

    pub fn total_entries(&self, dir: Direction) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.dir == dir)
            .map(|r| r.entries)
            .sum()
    }

    /// `round,client,dir,entries,bytes`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "client", "dir", "entries", "bytes"])?;
        for r in &self.rows {
            w.write_record([
                r.round.to_string(),
                r.client.to_string(),
                r.dir.to_string(),
                r.entries.to_string(),
                r.bytes.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: [LayerShape; 1] = [LayerShape { k: 128, d: 128 }];

    #[test]
    fn fedit_counts() {
        let t = comm_account(Strategy::Fedit, &ONE, &[8; 10]);
        assert_eq!(t.len(), 10);
        assert!(t.iter().all(|t| t.up == 2048 && t.down == 2048));
    }

    #[test]
    fn ratios_at_ten_clients() {
        let ranks = [8; 10];
        let fedit = comm_account(Strategy::Fedit, &ONE, &ranks)[0];
        let stack = comm_account(Strategy::Stack, &ONE, &ranks)[0];
        let ffa = comm_account(Strategy::Ffa, &ONE, &ranks)[0];
        let fedsa = comm_account(Strategy::Fedsa, &ONE, &ranks)[0];
        let fedex = comm_account(Strategy::Fedex, &ONE, &ranks)[0];
        assert_eq!(stack.down, 10 * fedit.down);
        assert_eq!(2 * ffa.up, fedit.up);
        assert_eq!(2 * fedsa.down, fedit.down);
        assert_eq!(fedex.down - fedit.down, 128 * 128);
        assert_eq!(comm_account(Strategy::FloraNa, &ONE, &ranks)[0], fedit);
    }

    #[test]
    fn stack_download_linear_in_clients() {
        let d5 = comm_account(Strategy::Stack, &ONE, &[4; 5])[0].down;
        let d10 = comm_account(Strategy::Stack, &ONE, &[4; 10])[0].down;
        assert_eq!(d10, 2 * d5);
        let mixed = comm_account(Strategy::Stack, &ONE, &[1, 2, 3]);
        assert!(mixed.iter().all(|t| t.down == 256 * 6));
        assert_eq!(mixed[2].up, 256 * 3);
    }

    #[test]
    fn ledger_bytes_and_totals() {
        let t = comm_account(Strategy::Fedit, &ONE, &[8; 2]);
        let mut l32 = CommLedger::new();
        let mut l16 = CommLedger::new();
        for round in 0..3 {
            l32.record_round(round, &t, Precision::F32);
            l16.record_round(round, &t, Precision::F16);
        }
        assert_eq!(l32.round_bytes(1, Direction::Down), 2 * 2048 * 4);
        assert_eq!(
            2 * l16.total_bytes(Direction::Down),
            l32.total_bytes(Direction::Down)
        );
        let per_round: u64 = (0..3).map(|r| l32.round_bytes(r, Direction::Up)).sum();
        assert_eq!(per_round, l32.total_bytes(Direction::Up));
        assert_eq!(l32.total_entries(Direction::Up), 3 * 2 * 2048);

        let mut buf = Vec::new();
        l32.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("round,client,dir,entries,bytes"));
        assert_eq!(lines.next(), Some("0,0,up,2048,8192"));
        assert_eq!(text.lines().count(), 1 + 12);
    }

    #[test]
    fn precision_parsing() {
        assert_eq!(Precision::try_from(16).unwrap(), Precision::F16);
        assert!(Precision::try_from(8).is_err());
        let p: Precision = serde_json::from_str("64").unwrap();
        assert_eq!(p, Precision::F64);
        assert_eq!(serde_json::to_string(&Precision::F32).unwrap(), "32");
    }
}
