//! Artifact formats. Every file carries the config hash, seed and schema
//! version: CSV files in a leading `#` comment line, JSON files as fields.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_to_string};
use crate::math::ParamVector;
use crate::model::{Architecture, Gate};
use crate::training::EvalRecord;

pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub schema: u32,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            schema: SCHEMA,
        }
    }

    fn header(&self) -> String {
        format!("# config_hash={},seed={},schema={}\n", self.config_hash, self.seed, self.schema)
    }

    fn parse_header(line: &str) -> Result<Self> {
        let body = line
            .strip_prefix("# ")
            .ok_or_else(|| Error::data("CSV artifact lacks its provenance line"))?;
        let mut hash = None;
        let mut seed = None;
        let mut schema = None;
        for kv in body.trim_end().split(',') {
            match kv.split_once('=') {
                Some(("config_hash", v)) => hash = Some(v.to_string()),
                Some(("seed", v)) => seed = v.parse().ok(),
                Some(("schema", v)) => schema = v.parse().ok(),
                _ => return Err(Error::data(format!("bad provenance field `{kv}`"))),
            }
        }
        match (hash, seed, schema) {
            (Some(config_hash), Some(seed), Some(schema)) => Ok(Self { config_hash, seed, schema }),
            _ => Err(Error::data("incomplete provenance line")),
        }
    }
}

/// Writes `rows` as CSV with a provenance line and a header row.
pub fn write_csv<T: Serialize>(path: &Path, prov: &Provenance, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    let mut bytes = prov.header().into_bytes();
    bytes.extend_from_slice(&body);
    atomic_write(path, &bytes)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<(Provenance, Vec<T>)> {
    let text = read_to_string(path)?;
    let (first, rest) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    let prov = Provenance::parse_header(first).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let rows = csv::Reader::from_reader(rest.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()?;
    Ok((prov, rows))
}

pub fn write_records(path: &Path, prov: &Provenance, records: &[EvalRecord]) -> Result<()> {
    write_csv(path, prov, records)
}

pub fn read_records(path: &Path) -> Result<(Provenance, Vec<EvalRecord>)> {
    read_csv(path)
}

/// JSON document with provenance fields flattened beside the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    #[serde(flatten)]
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_json<T: Serialize>(path: &Path, prov: &Provenance, body: &T) -> Result<()> {
    let doc = Stamped {
        provenance: prov.clone(),
        body,
    };
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Stamped<T>> {
    Ok(serde_json::from_str(&read_to_string(path)?)?)
}

/// Trained parameters with the architecture needed to rebuild the model.
/// Training randomness is a pure function of `seed`, so the seed is the
/// complete RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub p_max: f64,
    pub gate: Gate,
    pub epochs: usize,
    pub theta: ParamVector,
    pub phi: ParamVector,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize) -> EvalRecord {
        EvalRecord {
            method: "proposed".into(),
            episode: i,
            channel_id: format!("channel{}", i + 1),
            step: 10,
            raw_rate: 1.25 + i as f64,
            wmmse_rate: 2.0,
            normalized_rate: 0.1 * i as f64 + 0.3,
            seed: 7,
        }
    }

    #[test]
    fn records_round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let prov = Provenance::new("abc", 7);
        let recs: Vec<EvalRecord> = (0..3).map(rec).collect();
        write_records(&p, &prov, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# config_hash=abc,seed=7,schema=1"));
        assert_eq!(
            lines.next(),
            Some("method,episode,channel_id,step,raw_rate,wmmse_rate,normalized_rate,seed")
        );
        let (p2, back) = read_records(&p).unwrap();
        assert_eq!(p2, prov);
        assert_eq!(back, recs);
    }

    #[test]
    fn missing_header_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, "method,episode\n").unwrap();
        assert!(matches!(read_records(&p), Err(Error::Data(_))));
    }

    #[test]
    fn json_is_stamped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        write_json(&p, &Provenance::new("h", 2), &serde_json::json!({"value": 1.5})).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(v["config_hash"], "h");
        assert_eq!(v["seed"], 2);
        assert_eq!(v["value"], 1.5);
    }
}
