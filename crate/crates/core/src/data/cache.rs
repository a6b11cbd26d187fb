//! Binary corpus cache.
//!
//! ```text
//! magic "PTFC" | version u32 | num_users u32 | num_items u32
//! num_items × (name_len u32, utf-8 name)
//! num_users × (name_len u32, utf-8 name, train_len u32, train ids u32…, val u32, test u32)
//! ```
//! All integers little-endian.

use std::path::Path;

use super::{Corpus, InteractionSequence};
use crate::error::{Error, Result};
use crate::{ItemId, UserId};

pub const MAGIC: &[u8; 4] = b"PTFC";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Codec(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode(corpus: &Corpus) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, corpus.num_users())?;
    put_u32(&mut out, corpus.num_items)?;
    for name in &corpus.item_names {
        put_str(&mut out, name)?;
    }
    for seq in &corpus.sequences {
        put_str(&mut out, &corpus.user_names[seq.user as usize])?;
        put_u32(&mut out, seq.items.len())?;
        for &i in &seq.items {
            put_u32(&mut out, i as usize)?;
        }
        put_u32(&mut out, seq.val_item as usize)?;
        put_u32(&mut out, seq.test_item as usize)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end
            .ok_or_else(|| Error::Codec(format!("corpus cache truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Codec(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Corpus> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Codec("bad corpus cache magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Codec(format!(
            "unsupported corpus cache version {version}"
        )));
    }
    let num_users = r.u32()? as usize;
    let num_items = r.u32()? as usize;
    let item_names = (0..num_items)
        .map(|_| r.string())
        .collect::<Result<Vec<_>>>()?;
    let check = |i: u32| -> Result<ItemId> {
        if i == 0 || i as usize > num_items {
            Err(Error::Codec(format!("item id {i} outside 1..={num_items}")))
        } else {
            Ok(i)
        }
    };
    let mut user_names = Vec::with_capacity(num_users);
    let mut sequences = Vec::with_capacity(num_users);
    for u in 0..num_users {
        user_names.push(r.string()?);
        let len = r.u32()? as usize;
        let items = (0..len)
            .map(|_| r.u32().and_then(check))
            .collect::<Result<Vec<_>>>()?;
        let val = check(r.u32()?)?;
        let test = check(r.u32()?)?;
        sequences.push(InteractionSequence::new(u as UserId, items, val, test));
    }
    if r.pos != bytes.len() {
        return Err(Error::Codec(format!(
            "{} trailing bytes in corpus cache",
            bytes.len() - r.pos
        )));
    }
    Ok(Corpus::new(sequences, user_names, item_names))
}

pub fn save(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(corpus)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Corpus> {
    decode(&std::fs::read(path)?)
}
