//! Adaptation-direction similarity, cross-channel variance, and continuity
//! matrices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::ParamVector;
use crate::training::EvalRecord;

/// Parameters before and after `steps` adaptation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub start: ParamVector,
    pub end: ParamVector,
    pub steps: usize,
}

impl Trajectory {
    pub fn new(start: ParamVector, end: ParamVector, steps: usize) -> Result<Self> {
        if !start.same_layout(&end) {
            return Err(Error::contract("trajectory endpoints have different layouts"));
        }
        if steps == 0 {
            return Err(Error::contract("trajectory needs at least one step"));
        }
        Ok(Self { start, end, steps })
    }

    pub fn displacement(&self) -> ParamVector {
        self.end.sub(&self.start)
    }
}

/// Cosine of the angle between the two displacement vectors, in `[−1, 1]`.
pub fn cds(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.start.len() != b.start.len() {
        return Err(Error::contract("trajectories have different dimensions"));
    }
    let (da, db) = (a.displacement(), b.displacement());
    let (na, nb) = (da.norm(), db.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateTrajectory);
    }
    let c = da.values().iter().zip(db.values()).map(|(x, y)| (x / na) * (y / nb)).sum::<f64>();
    Ok(c.clamp(-1.0, 1.0))
}

/// Mean normalized rate per channel id.
pub fn channel_means(records: &[EvalRecord]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.channel_id.clone()).or_insert((0.0, 0));
        e.0 += r.normalized_rate;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Population variance of the per-channel mean normalized rates over `channels`.
pub fn variance_report(records: &[EvalRecord], channels: &[&str]) -> Result<f64> {
    if channels.len() < 2 {
        return Err(Error::contract("variance needs at least two channels"));
    }
    let means = channel_means(records);
    let xs = channels
        .iter()
        .map(|c| {
            means
                .get(*c)
                .copied()
                .ok_or_else(|| Error::data(format!("no records for channel `{c}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = xs.len() as f64;
    // Sorted summation makes the result independent of channel order.
    let mut sorted = xs.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mean = sorted.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = sorted.iter().map(|x| (x - mean).powi(2)).collect();
    dev.sort_by(|a, b| a.total_cmp(b));
    Ok(dev.iter().sum::<f64>() / n)
}

/// Records taken on the channel that each episode introduced: the diagonal
/// of the continuity matrix.
pub fn current_channel_records(records: &[EvalRecord]) -> Result<Vec<EvalRecord>> {
    let m = continuity_matrix(records)?;
    Ok(records
        .iter()
        .filter(|r| m.channels[r.episode] == r.channel_id)
        .cloned()
        .collect())
}

/// Fill value for cells above the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sentinel {
    Gnn,
    Cnn,
}

impl Sentinel {
    pub fn value(self) -> f64 {
        match self {
            Sentinel::Gnn => 1.0,
            Sentinel::Cnn => 0.5,
        }
    }
}

/// `cells[i][j]` is the normalized rate on channel `j` after adapting through
/// episode `i`, for `j ≤ i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityMatrix {
    pub channels: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl ContinuityMatrix {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn populated(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    pub fn get(&self, episode: usize, channel: usize) -> Option<f64> {
        self.cells.get(episode)?.get(channel).copied()
    }

    /// Square grid with `sentinel` above the diagonal.
    pub fn export(&self, sentinel: Sentinel) -> Vec<Vec<f64>> {
        let n = self.len();
        self.cells
            .iter()
            .map(|row| {
                let mut r = row.clone();
                r.resize(n, sentinel.value());
                r
            })
            .collect()
    }
}

/// Builds the matrix from one method's stream records.
pub fn continuity_matrix(records: &[EvalRecord]) -> Result<ContinuityMatrix> {
    let episodes = records.iter().map(|r| r.episode + 1).max().unwrap_or(0);
    if episodes == 0 {
        return Err(Error::data("no records to build a continuity matrix from"));
    }
    // Channel j is the one first evaluated in episode j.
    let mut channels: Vec<String> = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let row: Vec<&EvalRecord> = records.iter().filter(|r| r.episode == i).collect();
        if row.len() != i + 1 {
            return Err(Error::data(format!("episode {i} has {} records, expected {}", row.len(), i + 1)));
        }
        let fresh: Vec<&&EvalRecord> = row.iter().filter(|r| !channels.contains(&r.channel_id)).collect();
        if fresh.len() != 1 {
            return Err(Error::data(format!("episode {i} does not introduce exactly one new channel")));
        }
        channels.push(fresh[0].channel_id.clone());
    }
    let mut cells = vec![Vec::new(); episodes];
    for (i, row) in cells.iter_mut().enumerate() {
        for ch in &channels[..=i] {
            let r = records
                .iter()
                .find(|r| r.episode == i && &r.channel_id == ch)
                .ok_or_else(|| Error::data(format!("missing cell for episode {i}, channel {ch}")))?;
            row.push(r.normalized_rate);
        }
    }
    Ok(ContinuityMatrix { channels, cells })
}
