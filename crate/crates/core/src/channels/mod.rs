//! Channel realizations, fading generators, and meta-learning task assembly.

mod config;
pub mod dataset;
mod generate;
mod tasks;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::{db_to_linear, ChannelModelConfig, Family, PathLoss};
pub use generate::{
    derive_seed, gen_channel, geometric_gain, nakagami_envelope, steering_vector,
};
pub use tasks::{build_tasks, build_test_stream, Task};

/// Transmitter and receiver coordinates in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Positions {
    pub tx: Vec<[f64; 2]>,
    pub rx: Vec<[f64; 2]>,
}

impl Positions {
    /// Distance from transmitter `j` to receiver `k`.
    pub fn distance(&self, j: usize, k: usize) -> f64 {
        let (a, b) = (self.tx[j], self.rx[k]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }
}

/// One draw of channel state for a `K`-pair interference network.
///
/// `h` is stored as `[j][k][n]`: entry `(j, k)` is the `N_t`-vector from
/// transmitter `j` to receiver `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub k: usize,
    pub nt: usize,
    pub h: Vec<Complex64>,
    pub weights: Vec<f64>,
    pub noise_power: f64,
    pub channel_id: String,
    pub positions: Option<Positions>,
}

impl ChannelRealization {
    /// Channel vector from transmitter `j` to receiver `k`.
    pub fn link(&self, j: usize, k: usize) -> &[Complex64] {
        let base = (j * self.k + k) * self.nt;
        &self.h[base..base + self.nt]
    }

    pub fn link_mut(&mut self, j: usize, k: usize) -> &mut [Complex64] {
        let base = (j * self.k + k) * self.nt;
        &mut self.h[base..base + self.nt]
    }

    pub fn direct(&self, k: usize) -> &[Complex64] {
        self.link(k, k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.nt == 0 {
            return Err(Error::data("realization needs K >= 1 and N_t >= 1"));
        }
        if self.h.len() != self.k * self.k * self.nt {
            return Err(Error::data(format!(
                "channel tensor has {} entries, expected K*K*N_t = {}",
                self.h.len(),
                self.k * self.k * self.nt
            )));
        }
        if self.weights.len() != self.k || self.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::data("weights must be K positive reals"));
        }
        if !(self.noise_power > 0.0) || !self.noise_power.is_finite() {
            return Err(Error::data("noise power must be positive"));
        }
        if self.h.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::data("channel has non-finite entries"));
        }
        Ok(())
    }

    /// Relabels pairs so that new pair `i` is old pair `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> ChannelRealization {
        let mut out = self.clone();
        for j in 0..self.k {
            for k in 0..self.k {
                out.link_mut(j, k).copy_from_slice(self.link(perm[j], perm[k]));
            }
        }
        out.weights = perm.iter().map(|&p| self.weights[p]).collect();
        out.positions = self.positions.as_ref().map(|pos| Positions {
            tx: perm.iter().map(|&p| pos.tx[p]).collect(),
            rx: perm.iter().map(|&p| pos.rx[p]).collect(),
        });
        out
    }
}
