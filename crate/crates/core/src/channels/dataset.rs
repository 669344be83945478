//! Binary task datasets with a JSON manifest.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! header   : b"MGDS" | u32 version | u64 task_count
//! task     : u32 support_len | u32 query_len | realization * (support_len + query_len)
//! realization:
//!   u32 k | u32 nt | u32 id_len | id bytes (utf-8)
//!   f64 noise_power | f64 * k weights
//!   (f64 re, f64 im) * (k * k * nt)      channel, [j][k][n] order
//!   u8 has_positions | if 1: (f64 x, f64 y) * k tx, then * k rx
//! ```

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChannelRealization, Positions, Task};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MGDS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub data_file: String,
    pub data_sha256: String,
    pub tasks: usize,
    pub samples: usize,
    pub support_samples: usize,
    pub query_samples: usize,
    /// Sample count per channel id.
    pub channels: std::collections::BTreeMap<String, usize>,
    pub seed: u64,
    pub config_hash: String,
}

pub fn encode(tasks: &[Task]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tasks.len() as u64).to_le_bytes());
    for t in tasks {
        out.extend_from_slice(&(t.support.len() as u32).to_le_bytes());
        out.extend_from_slice(&(t.query.len() as u32).to_le_bytes());
        for ch in t.support.iter().chain(&t.query) {
            encode_realization(ch, &mut out);
        }
    }
    out
}

fn put_f64(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn encode_realization(ch: &ChannelRealization, out: &mut Vec<u8>) {
    out.extend_from_slice(&(ch.k as u32).to_le_bytes());
    out.extend_from_slice(&(ch.nt as u32).to_le_bytes());
    out.extend_from_slice(&(ch.channel_id.len() as u32).to_le_bytes());
    out.extend_from_slice(ch.channel_id.as_bytes());
    put_f64(out, ch.noise_power);
    ch.weights.iter().for_each(|&w| put_f64(out, w));
    for z in &ch.h {
        put_f64(out, z.re);
        put_f64(out, z.im);
    }
    match &ch.positions {
        None => out.push(0),
        Some(p) => {
            out.push(1);
            for xy in p.tx.iter().chain(&p.rx) {
                put_f64(out, xy[0]);
                put_f64(out, xy[1]);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::data(format!("dataset truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn xy(&mut self) -> Result<[f64; 2]> {
        Ok([self.f64()?, self.f64()?])
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Task>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::data("not an MGDS dataset (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!("unsupported dataset version {version}")));
    }
    let n_tasks = r.u64()? as usize;
    let mut tasks = Vec::with_capacity(n_tasks.min(1 << 20));
    for _ in 0..n_tasks {
        let ns = r.u32()? as usize;
        let nq = r.u32()? as usize;
        let mut all = (0..ns + nq)
            .map(|_| decode_realization(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let query = all.split_off(ns);
        tasks.push(Task::new(all, query).map_err(|e| Error::data(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::data(format!(
            "{} trailing bytes after last task",
            bytes.len() - r.pos
        )));
    }
    Ok(tasks)
}

fn decode_realization(r: &mut Reader<'_>) -> Result<ChannelRealization> {
    let k = r.u32()? as usize;
    let nt = r.u32()? as usize;
    let id_len = r.u32()? as usize;
    let channel_id = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| Error::data("channel id is not utf-8"))?;
    let noise_power = r.f64()?;
    let weights = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let h = (0..k * k * nt)
        .map(|_| Ok(Complex64::new(r.f64()?, r.f64()?)))
        .collect::<Result<Vec<_>>>()?;
    let positions = match r.u8()? {
        0 => None,
        1 => {
            let tx = (0..k).map(|_| r.xy()).collect::<Result<Vec<_>>>()?;
            let rx = (0..k).map(|_| r.xy()).collect::<Result<Vec<_>>>()?;
            Some(Positions { tx, rx })
        }
        b => return Err(Error::data(format!("bad position flag {b}"))),
    };
    let ch = ChannelRealization {
        k,
        nt,
        h,
        weights,
        noise_power,
        channel_id,
        positions,
    };
    ch.validate()?;
    Ok(ch)
}

/// Writes `<stem>.mgds` and `<stem>.manifest.json` into `dir`.
pub fn write(
    dir: &Path,
    stem: &str,
    tasks: &[Task],
    seed: u64,
    config_hash: &str,
) -> Result<Manifest> {
    let bytes = encode(tasks);
    let data_file = format!("{stem}.mgds");
    crate::io::atomic_write(&dir.join(&data_file), &bytes)?;
    let mut channels = std::collections::BTreeMap::new();
    for ch in tasks.iter().flat_map(|t| t.support.iter().chain(&t.query)) {
        *channels.entry(ch.channel_id.clone()).or_insert(0) += 1;
    }
    let support_samples = tasks.iter().map(|t| t.support.len()).sum();
    let query_samples = tasks.iter().map(|t| t.query.len()).sum();
    let manifest = Manifest {
        format: "MGDS".into(),
        version: VERSION,
        data_file,
        data_sha256: hex::encode(Sha256::digest(&bytes)),
        tasks: tasks.len(),
        samples: support_samples + query_samples,
        support_samples,
        query_samples,
        channels,
        seed,
        config_hash: config_hash.into(),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    crate::io::atomic_write(&manifest_path(dir, stem), &json)?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.manifest.json"))
}

/// Loads a dataset via its manifest and checks the data checksum.
pub fn read(dir: &Path, stem: &str) -> Result<(Manifest, Vec<Task>)> {
    let mpath = manifest_path(dir, stem);
    if !mpath.exists() {
        return Err(Error::data(format!("missing dataset manifest {}", mpath.display())));
    }
    let manifest: Manifest = serde_json::from_str(&crate::io::read_to_string(&mpath)?)?;
    let bytes = crate::io::read(&dir.join(&manifest.data_file))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.data_sha256 {
        return Err(Error::data(format!(
            "{} does not match its manifest checksum",
            manifest.data_file
        )));
    }
    let tasks = decode(&bytes)?;
    if tasks.len() != manifest.tasks {
        return Err(Error::data("manifest task count disagrees with data file"));
    }
    Ok((manifest, tasks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{build_tasks, ChannelModelConfig, Family};

    fn sample_tasks(seed: u64) -> Vec<Task> {
        let cfgs = vec![
            ChannelModelConfig::new(Family::Channel1, 3, 2),
            ChannelModelConfig::new(Family::Rayleigh, 3, 2),
        ];
        build_tasks(&cfgs, 4, 2, 3, seed).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let tasks = sample_tasks(1);
        assert_eq!(decode(&encode(&tasks)).unwrap(), tasks);
    }

    #[test]
    fn same_seed_same_bytes() {
        assert_eq!(encode(&sample_tasks(2)), encode(&sample_tasks(2)));
        assert_ne!(encode(&sample_tasks(2)), encode(&sample_tasks(3)));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&sample_tasks(1));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn manifest_counts_and_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let tasks = sample_tasks(4);
        let m = write(dir.path(), "train", &tasks, 4, "abc").unwrap();
        assert_eq!((m.tasks, m.samples, m.support_samples), (4, 20, 8));
        let (m2, t2) = read(dir.path(), "train").unwrap();
        assert_eq!((m2, t2), (m, tasks));
        std::fs::write(dir.path().join("train.mgds"), b"MGDS").unwrap();
        assert!(matches!(read(dir.path(), "train"), Err(Error::Data(_))));
        assert!(matches!(read(dir.path(), "nope"), Err(Error::Data(_))));
    }
}
