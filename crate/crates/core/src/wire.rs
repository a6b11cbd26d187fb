//! Bit-exact encodings of the two protocol messages. Byte counts reported
//! by the simulator are the lengths of these frames.
//!
//! Upload (client → server), little-endian:
//!
//! ```text
//! 0x50 | version u8 | user u32 | round u32 | len u16 | len × item u32
//! ```
//!
//! Download (server → client):
//!
//! ```text
//! 0x51 | version u8 | user u32 | round u32 | steps u16 |
//!     steps × (count u8 | count × (item u32, score f64))
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ItemId, UserId};

pub const UPLOAD_MAGIC: u8 = 0x50;
pub const DOWNLOAD_MAGIC: u8 = 0x51;
pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;

/// A perturbed sequence sent from a client to the server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadMessage {
    pub user: UserId,
    pub round: u32,
    pub items: Vec<ItemId>,
}

/// Per-step candidate sets with server scores. The first candidate of each
/// step is the sequence item at that step. Steps carry at least two
/// candidates when the server samples negatives; with `num_negatives = 0`
/// they hold the item alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabeledSequence {
    pub steps: Vec<Vec<(ItemId, f64)>>,
}

impl SoftLabeledSequence {
    /// The underlying item sequence (first candidate of every step).
    pub fn items(&self) -> Vec<ItemId> {
        self.steps.iter().map(|s| s[0].0).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownloadMessage {
    pub user: UserId,
    pub round: u32,
    pub payload: SoftLabeledSequence,
}

fn header(out: &mut Vec<u8>, magic: u8, user: UserId, round: u32, len: usize) -> Result<()> {
    let len = u16::try_from(len)
        .map_err(|_| Error::Codec(format!("sequence of {len} steps exceeds u16")))?;
    out.push(magic);
    out.push(WIRE_VERSION);
    out.extend_from_slice(&user.to_le_bytes());
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Codec(format!(
                "frame truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: u8) -> Result<(UserId, u32, usize)> {
        let m = self.u8()?;
        if m != magic {
            return Err(Error::Codec(format!(
                "magic 0x{m:02x}, expected 0x{magic:02x}"
            )));
        }
        let v = self.u8()?;
        if v != WIRE_VERSION {
            return Err(Error::Codec(format!("unsupported wire version {v}")));
        }
        Ok((self.u32()?, self.u32()?, self.u16()? as usize))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Codec(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

impl UploadMessage {
    pub fn encoded_len_for(steps: usize) -> usize {
        HEADER_LEN + 4 * steps
    }

    pub fn encoded_len(&self) -> usize {
        Self::encoded_len_for(self.items.len())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.encoded_len());
        header(
            &mut out,
            UPLOAD_MAGIC,
            self.user,
            self.round,
            self.items.len(),
        )?;
        for i in &self.items {
            out.extend_from_slice(&i.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        let (user, round, len) = c.header(UPLOAD_MAGIC)?;
        let items = (0..len).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        c.finish()?;
        Ok(Self { user, round, items })
    }
}

impl DownloadMessage {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self
                .payload
                .steps
                .iter()
                .map(|s| 1 + 12 * s.len())
                .sum::<usize>()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.encoded_len());
        header(
            &mut out,
            DOWNLOAD_MAGIC,
            self.user,
            self.round,
            self.payload.steps.len(),
        )?;
        for step in &self.payload.steps {
            let count = u8::try_from(step.len())
                .map_err(|_| Error::Codec(format!("{} candidates exceed u8", step.len())))?;
            if count == 0 {
                return Err(Error::Codec("empty candidate set".into()));
            }
            out.push(count);
            for (item, score) in step {
                if !score.is_finite() {
                    return Err(Error::Codec(format!(
                        "non-finite soft label for item {item}"
                    )));
                }
                out.extend_from_slice(&item.to_le_bytes());
                out.extend_from_slice(&score.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        let (user, round, len) = c.header(DOWNLOAD_MAGIC)?;
        let mut steps = Vec::with_capacity(len);
        for _ in 0..len {
            let count = c.u8()? as usize;
            if count == 0 {
                return Err(Error::Codec("empty candidate set".into()));
            }
            let step = (0..count)
                .map(|_| Ok((c.u32()?, c.f64()?)))
                .collect::<Result<Vec<_>>>()?;
            steps.push(step);
        }
        c.finish()?;
        Ok(Self {
            user,
            round,
            payload: SoftLabeledSequence { steps },
        })
    }
}

/// Any frame that crosses the simulated network.
#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Upload(UploadMessage),
    Download(DownloadMessage),
}

impl WireMessage {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        match bytes.first() {
            Some(&UPLOAD_MAGIC) => UploadMessage::decode(bytes).map(Self::Upload),
            Some(&DOWNLOAD_MAGIC) => DownloadMessage::decode(bytes).map(Self::Download),
            Some(m) => Err(Error::Codec(format!("unknown message magic 0x{m:02x}"))),
            None => Err(Error::Codec("empty frame".into())),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        match self {
            Self::Upload(m) => m.encode(),
            Self::Download(m) => m.encode(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn upload_layout_is_exact() {
        let m = UploadMessage {
            user: 0x01020304,
            round: 7,
            items: vec![5, 0x0a0b0c0d],
        };
        let b = m.encode().unwrap();
        assert_eq!(b.len(), 12 + 4 * 2);
        assert_eq!(
            b,
            vec![0x50, 1, 4, 3, 2, 1, 7, 0, 0, 0, 2, 0, 5, 0, 0, 0, 0x0d, 0x0c, 0x0b, 0x0a]
        );
        assert_eq!(UploadMessage::encoded_len_for(20), 92);
    }

    #[test]
    fn download_layout_is_exact() {
        let m = DownloadMessage {
            user: 2,
            round: 1,
            payload: SoftLabeledSequence {
                steps: vec![vec![(3, 0.5), (9, -1.0)]],
            },
        };
        let b = m.encode().unwrap();
        assert_eq!(b.len(), 12 + 1 + 2 * 12);
        assert_eq!(b[0], 0x51);
        assert_eq!(b[12], 2);
        assert_eq!(&b[13..17], &3u32.to_le_bytes());
        assert_eq!(&b[17..25], &0.5f64.to_le_bytes());
        assert_eq!(DownloadMessage::decode(&b).unwrap(), m);
    }

    #[test]
    fn malformed_frames_rejected() {
        assert!(WireMessage::decode(&[]).is_err());
        assert!(WireMessage::decode(&[0x52, 1]).is_err());
        let m = UploadMessage {
            user: 1,
            round: 1,
            items: vec![1, 2, 3],
        };
        let b = m.encode().unwrap();
        assert!(UploadMessage::decode(&b[..b.len() - 1]).is_err());
        let mut v = b.clone();
        v[1] = 9;
        assert!(UploadMessage::decode(&v).is_err());
        assert!(DownloadMessage::decode(&b).is_err());
        let bad = DownloadMessage {
            user: 0,
            round: 0,
            payload: SoftLabeledSequence {
                steps: vec![vec![(1, f64::NAN)]],
            },
        };
        assert!(bad.encode().is_err());
    }

    proptest! {
        #[test]
        fn frames_round_trip_with_exact_length(
            user in any::<u32>(),
            round in any::<u32>(),
            items in proptest::collection::vec(1u32..100_000, 0..40),
            scores in proptest::collection::vec(-50.0f64..50.0, 1..5),
        ) {
            let up = UploadMessage { user, round, items: items.clone() };
            let bytes = up.encode().unwrap();
            prop_assert_eq!(bytes.len(), up.encoded_len());
            prop_assert_eq!(WireMessage::decode(&bytes).unwrap(), WireMessage::Upload(up));

            let steps = items
                .iter()
                .map(|&i| scores.iter().enumerate().map(|(k, &s)| (i + k as u32, s)).collect())
                .collect();
            let down = DownloadMessage { user, round, payload: SoftLabeledSequence { steps } };
            let bytes = down.encode().unwrap();
            prop_assert_eq!(bytes.len(), down.encoded_len());
            prop_assert_eq!(WireMessage::decode(&bytes).unwrap(), WireMessage::Download(down));
        }
    }
}
