//! Little-endian binary dataset file.
//!
//! ```text
//! magic "UWDTDS1\0" | u16 version | u32 episode count
//! per episode: u16 T | u8 cause | T x u8 action | T x f32 reward | T x 8200 x i8 grid
//! u32 CRC32 of every preceding byte
//! ```

use std::path::Path;

use serde::Serialize;

use super::{Episode, TerminalCause};
use crate::error::{Error, FormatError, Result};
use crate::obs::GRID_LEN;
use crate::sim::control::N_ACTIONS;
use crate::sim::world::MAX_DECISIONS;

pub const MAGIC: &[u8; 8] = b"UWDTDS1\0";
pub const VERSION: u16 = 1;

pub fn encode(episodes: &[Episode]) -> Result<Vec<u8>> {
    let count = u32::try_from(episodes.len()).map_err(|_| Error::invalid("too many episodes"))?;
    let size: usize = episodes.iter().map(|e| 3 + e.len() * (5 + GRID_LEN)).sum();
    let mut buf = Vec::with_capacity(18 + size);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    for (i, ep) in episodes.iter().enumerate() {
        ep.validate().map_err(|e| Error::Episode {
            index: i,
            source: Box::new(e),
        })?;
        buf.extend_from_slice(&(ep.len() as u16).to_le_bytes());
        buf.push(ep.cause as u8);
        buf.extend_from_slice(&ep.actions);
        for r in &ep.rewards {
            buf.extend_from_slice(&r.to_le_bytes());
        }
        buf.extend(ep.grids.iter().map(|&q| q as u8));
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos + n;
        if end > self.data.len() {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: end - self.data.len(),
            });
        }
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(data: &[u8]) -> Result<Vec<Episode>, FormatError> {
    let mut cur = Cursor { data, pos: 0 };
    let magic = cur.take(MAGIC.len().min(data.len()))?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC.to_vec(),
            found: magic.to_vec(),
        });
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let count = cur.u32()? as usize;
    let mut episodes = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let t = cur.u16()? as usize;
        if t == 0 || t > MAX_DECISIONS as usize {
            return Err(FormatError::InvariantViolation(format!(
                "episode {i} declares T = {t}, allowed 1..={MAX_DECISIONS}"
            )));
        }
        let cause = cur.u8()?;
        let cause = TerminalCause::from_u8(cause).ok_or_else(|| {
            FormatError::InvariantViolation(format!("episode {i} has terminal cause {cause}"))
        })?;
        let actions = cur.take(t)?.to_vec();
        if let Some(a) = actions.iter().find(|&&a| a as usize >= N_ACTIONS) {
            return Err(FormatError::InvariantViolation(format!("episode {i} has action id {a}")));
        }
        let rewards: Vec<f32> = cur
            .take(4 * t)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(r) = rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(FormatError::InvariantViolation(format!("episode {i} has reward {r}")));
        }
        let grids = cur.take(t * GRID_LEN)?.iter().map(|&b| b as i8).collect();
        episodes.push(Episode {
            grids,
            actions,
            rewards,
            cause,
        });
    }
    let body = cur.pos;
    let stored = cur.u32()?;
    let computed = crc32fast::hash(&data[..body]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    if cur.pos != data.len() {
        return Err(FormatError::InvariantViolation(format!(
            "{} trailing bytes after checksum",
            data.len() - cur.pos
        )));
    }
    Ok(episodes)
}

pub fn write_dataset(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<()> {
    let path = path.as_ref();
    let buf = encode(episodes)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Episode>> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeSummary {
    pub steps: usize,
    pub cause: TerminalCause,
    pub total_reward: f64,
    pub action_counts: [usize; N_ACTIONS],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub version: u16,
    pub episodes: Vec<EpisodeSummary>,
    pub total_steps: usize,
    pub checksum: u32,
}

pub fn inspect(path: impl AsRef<Path>) -> Result<DatasetSummary> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let episodes = decode(&data)?;
    let checksum = u32::from_le_bytes(data[data.len() - 4..].try_into().unwrap());
    let episodes: Vec<EpisodeSummary> = episodes
        .iter()
        .map(|ep| {
            let mut action_counts = [0; N_ACTIONS];
            for &a in &ep.actions {
                action_counts[a as usize] += 1;
            }
            EpisodeSummary {
                steps: ep.len(),
                cause: ep.cause,
                total_reward: ep.total_reward(),
                action_counts,
            }
        })
        .collect();
    Ok(DatasetSummary {
        version: VERSION,
        total_steps: episodes.iter().map(|e| e.steps).sum(),
        episodes,
        checksum,
    })
}
