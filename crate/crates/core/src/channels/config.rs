use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Path loss + CN(0,1) small-scale fading.
    Channel1,
    /// Path loss + Rician with a ULA line-of-sight term and biased scatter.
    Channel2,
    /// Channel 1 with log-normal shadowing.
    Channel3,
    Rayleigh,
    Rician,
    /// `|h|^2 = |r|^2 / (1 + d^2)` with random placement.
    Geometric,
    Nakagami,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Channel1,
        Family::Channel2,
        Family::Channel3,
        Family::Rayleigh,
        Family::Rician,
        Family::Geometric,
        Family::Nakagami,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Channel1 => "channel1",
            Family::Channel2 => "channel2",
            Family::Channel3 => "channel3",
            Family::Rayleigh => "rayleigh",
            Family::Rician => "rician",
            Family::Geometric => "geometric",
            Family::Nakagami => "nakagami",
        }
    }

    /// Families whose draws depend on transceiver placement.
    pub fn uses_positions(self) -> bool {
        matches!(
            self,
            Family::Channel1 | Family::Channel2 | Family::Channel3 | Family::Geometric
        )
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config(format!("unknown channel family `{s}`")))
    }
}

/// Log-distance large-scale fading, `PL(dB) = slope * log10(d) + intercept`.
///
/// With `reference_distance_m` set, the gain is expressed relative to the
/// loss at that distance, so a link at the reference distance has unit gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathLoss {
    pub slope_db: f64,
    pub intercept_db: f64,
    pub reference_distance_m: Option<f64>,
}

impl Default for PathLoss {
    fn default() -> Self {
        Self {
            slope_db: 36.7,
            intercept_db: 22.7,
            reference_distance_m: Some(65.0),
        }
    }
}

impl PathLoss {
    pub fn loss_db(&self, d: f64) -> f64 {
        self.slope_db * d.log10() + self.intercept_db
    }

    /// Linear amplitude gain at distance `d` meters.
    pub fn amplitude(&self, d: f64) -> f64 {
        let reference = self.reference_distance_m.map_or(0.0, |r| self.loss_db(r));
        10f64.powf(-(self.loss_db(d) - reference) / 20.0)
    }
}

/// Everything needed to draw realizations from one fading family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModelConfig {
    pub family: Family,
    /// Tag copied into every realization; defaults to the family name.
    #[serde(default)]
    pub id: Option<String>,
    pub k: usize,
    pub nt: usize,
    pub area_m: f64,
    pub d_min_m: f64,
    pub d_max_m: f64,
    /// Rician K-factor, linear scale.
    pub k_factor: f64,
    pub shadow_std_db: f64,
    /// Nakagami shape is drawn uniformly from this closed range per realization.
    pub nakagami_m: [f64; 2],
    pub nakagami_omega: f64,
    pub pathloss: Option<PathLoss>,
    pub noise_power: f64,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl ChannelModelConfig {
    /// Family defaults for `k` pairs with `nt` antennas.
    ///
    /// Channels 1-3 use the large-area beamforming geometry (1 km square,
    /// 2-65 m pairs, path loss); the remaining families use the small-area
    /// setting without path loss.
    pub fn new(family: Family, k: usize, nt: usize) -> Self {
        let large = matches!(family, Family::Channel1 | Family::Channel2 | Family::Channel3);
        Self {
            family,
            id: None,
            k,
            nt,
            area_m: if large { 1000.0 } else { 10.0 },
            d_min_m: if large { 2.0 } else { 1.0 },
            d_max_m: if large { 65.0 } else { 5.0 },
            k_factor: match family {
                Family::Channel2 | Family::Rician => db_to_linear(3.0),
                _ => 0.0,
            },
            shadow_std_db: if family == Family::Channel3 { 8.0 } else { 0.0 },
            nakagami_m: [1.0, 1.0],
            nakagami_omega: 1.0,
            pathloss: large.then(PathLoss::default),
            noise_power: db_to_linear(-10.0),
            weights: None,
            seed: 0,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn channel_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.family.name().to_string())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.weights.clone().unwrap_or_else(|| vec![1.0; self.k])
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(format!("{}: {m}", self.channel_id())));
        if self.k == 0 || self.nt == 0 {
            return fail("K and N_t must be positive".into());
        }
        if self.family.uses_positions() {
            if !(self.d_min_m > 0.0 && self.d_min_m < self.d_max_m && self.d_max_m <= self.area_m) {
                return fail(format!(
                    "need 0 < d_min < d_max <= R, got d_min={} d_max={} R={}",
                    self.d_min_m, self.d_max_m, self.area_m
                ));
            }
        }
        if !(self.k_factor >= 0.0) {
            return fail("K-factor must be >= 0".into());
        }
        if !(self.shadow_std_db >= 0.0) {
            return fail("shadowing std must be >= 0".into());
        }
        if self.family == Family::Nakagami {
            let [lo, hi] = self.nakagami_m;
            if !(lo >= 0.5 && lo <= hi) {
                return fail(format!("nakagami m range [{lo}, {hi}] invalid (m >= 0.5)"));
            }
            if !(self.nakagami_omega > 0.0) {
                return fail("nakagami omega must be positive".into());
            }
        }
        if !(self.noise_power > 0.0) {
            return fail("noise power must be positive".into());
        }
        if let Some(w) = &self.weights {
            if w.len() != self.k || w.iter().any(|x| !(*x > 0.0)) {
                return fail("weights must be K positive values".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_family_is_config_error() {
        assert!(matches!("rice".parse::<Family>(), Err(Error::Config(_))));
        assert_eq!("channel2".parse::<Family>().unwrap(), Family::Channel2);
    }

    #[test]
    fn three_db_k_factor_is_linear() {
        let c = ChannelModelConfig::new(Family::Channel2, 4, 2);
        assert!((c.k_factor - 1.9952623149688795).abs() < 1e-12);
    }

    #[test]
    fn geometry_must_fit_area() {
        let mut c = ChannelModelConfig::new(Family::Channel1, 4, 2);
        c.d_max_m = 2000.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn pathloss_reference_gives_unit_gain() {
        let p = PathLoss::default();
        assert!((p.amplitude(65.0) - 1.0).abs() < 1e-12);
        let absolute = PathLoss {
            reference_distance_m: None,
            ..p
        };
        // 36.7 * log10(10) + 22.7 = 59.4 dB
        assert!((absolute.amplitude(10.0) - 10f64.powf(-59.4 / 20.0)).abs() < 1e-15);
    }
}
