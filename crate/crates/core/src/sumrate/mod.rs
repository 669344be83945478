//! SINR, weighted sum rate, and the WMMSE reference solver.

mod wmmse;

use std::f64::consts::LN_2;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channels::ChannelRealization;
use crate::error::{Error, Result};
use crate::math::{Graph, Tensor, Var};

pub use wmmse::{wmmse_run, wmmse_solve, WmmseInit, WmmseRun};

/// Slack allowed on `‖v_k‖² ≤ P_max`.
pub const POWER_TOL: f64 = 1e-9;

/// Transmit beamformers, row `k` is `v_k` (length `N_t`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beamformer {
    pub k: usize,
    pub nt: usize,
    pub v: Vec<Complex64>,
}

impl Beamformer {
    pub fn zeros(k: usize, nt: usize) -> Self {
        Self {
            k,
            nt,
            v: vec![Complex64::new(0.0, 0.0); k * nt],
        }
    }

    pub fn row(&self, k: usize) -> &[Complex64] {
        &self.v[k * self.nt..(k + 1) * self.nt]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [Complex64] {
        &mut self.v[k * self.nt..(k + 1) * self.nt]
    }

    /// From a `[K, 2N_t]` real matrix laid out as `[Re | Im]` per row.
    pub fn from_real_rows(k: usize, nt: usize, data: &[f64]) -> Result<Self> {
        if data.len() != k * 2 * nt {
            return Err(Error::contract(format!(
                "beamformer matrix has {} entries, expected {}",
                data.len(),
                k * 2 * nt
            )));
        }
        let v = data
            .chunks(2 * nt)
            .flat_map(|r| (0..nt).map(move |n| Complex64::new(r[n], r[nt + n])))
            .collect();
        Ok(Self { k, nt, v })
    }

    pub fn powers(&self) -> Vec<f64> {
        (0..self.k)
            .map(|k| self.row(k).iter().map(|z| z.norm_sqr()).sum())
            .collect()
    }

    pub fn max_power(&self) -> f64 {
        self.powers().into_iter().fold(0.0, f64::max)
    }

    pub fn is_feasible(&self, p_max: f64) -> bool {
        self.powers().iter().all(|&p| p <= p_max + POWER_TOL)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub per_user_sinr: Vec<f64>,
    /// `log2(1 + sinr_k)`.
    pub per_user_rate: Vec<f64>,
    pub weighted_sum_rate: f64,
}

fn inner(h: &[Complex64], v: &[Complex64]) -> Complex64 {
    h.iter().zip(v).map(|(a, b)| a.conj() * b).sum()
}

/// Weighted sum rate of `v` on `ch`.
pub fn evaluate_rate(ch: &ChannelRealization, v: &Beamformer) -> Result<RateReport> {
    if v.k != ch.k || v.nt != ch.nt {
        return Err(Error::contract(format!(
            "beamformer is {}x{}, channel needs {}x{}",
            v.k, v.nt, ch.k, ch.nt
        )));
    }
    let k = ch.k;
    let mut sinr = Vec::with_capacity(k);
    for rx in 0..k {
        let mut signal = 0.0;
        let mut interference = ch.noise_power;
        for tx in 0..k {
            let p = inner(ch.link(tx, rx), v.row(tx)).norm_sqr();
            if tx == rx {
                signal = p;
            } else {
                interference += p;
            }
        }
        sinr.push(signal / interference);
    }
    let rate: Vec<f64> = sinr.iter().map(|g| (1.0 + g).log2()).collect();
    let wsr = rate.iter().zip(&ch.weights).map(|(r, w)| r * w).sum();
    Ok(RateReport {
        per_user_sinr: sinr,
        per_user_rate: rate,
        weighted_sum_rate: wsr,
    })
}

/// Adds `−Σ_k w_k log2(1 + γ_k)` for the `[K, 2N_t]` beamformer node `v`.
///
/// `|h_jk^H v_j|²` is formed for all `K²` ordered pairs; pair `j*K + k`
/// gathers row `j` of `v`.
pub fn neg_wsr_node(g: &mut Graph, ch: &ChannelRealization, v: Var) -> Var {
    let (k, nt) = (ch.k, ch.nt);
    assert_eq!(g.shape(v), &[k, 2 * nt], "beamformer node shape");
    let pairs = k * k;
    let source: Arc<[usize]> = (0..pairs).map(|p| p / k).collect();
    let vg = g.gather_rows(v, source);

    // Re(h^H v) = hr·vr + hi·vi, Im(h^H v) = hr·vi − hi·vr.
    let mut re_coef = Vec::with_capacity(pairs * 2 * nt);
    let mut im_coef = Vec::with_capacity(pairs * 2 * nt);
    for p in 0..pairs {
        let h = ch.link(p / k, p % k);
        re_coef.extend(h.iter().map(|z| z.re));
        re_coef.extend(h.iter().map(|z| z.im));
        im_coef.extend(h.iter().map(|z| -z.im));
        im_coef.extend(h.iter().map(|z| z.re));
    }
    let re_c = g.constant(Tensor::from_parts(vec![pairs, 2 * nt], re_coef));
    let im_c = g.constant(Tensor::from_parts(vec![pairs, 2 * nt], im_coef));
    let re = g.mul(vg, re_c);
    let re = g.row_sum(re);
    let im = g.mul(vg, im_c);
    let im = g.row_sum(im);
    let re2 = g.square(re);
    let im2 = g.square(im);
    let power = g.add(re2, im2);
    let power = g.reshape(power, &[pairs, 1]);

    let mut diag = vec![0.0; k * pairs];
    let mut all = vec![0.0; k * pairs];
    for rx in 0..k {
        diag[rx * pairs + rx * k + rx] = 1.0;
        for tx in 0..k {
            all[rx * pairs + tx * k + rx] = 1.0;
        }
    }
    let diag = g.constant(Tensor::from_parts(vec![k, pairs], diag));
    let all = g.constant(Tensor::from_parts(vec![k, pairs], all));
    let signal = g.matmul(diag, power);
    let total = g.matmul(all, power);
    let interference = g.sub(total, signal);
    let interference = g.add_scalar(interference, ch.noise_power);
    let sinr = g.div(signal, interference);
    let one_plus = g.add_scalar(sinr, 1.0);
    let ln_rate = g.log(one_plus);
    let w = g.constant(Tensor::from_parts(vec![k, 1], ch.weights.clone()));
    let weighted = g.mul(ln_rate, w);
    let total = g.sum(weighted);
    g.scale(total, -1.0 / LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{gen_channel, ChannelModelConfig, Family};
    use proptest::prelude::*;

    fn rayleigh(k: usize, nt: usize, seed: u64) -> ChannelRealization {
        let mut c = ChannelModelConfig::new(Family::Rayleigh, k, nt);
        c.weights = Some((0..k).map(|i| 0.5 + i as f64 * 0.25).collect());
        gen_channel(&c, seed).unwrap()
    }

    fn random_bf(k: usize, nt: usize, seed: u64) -> Beamformer {
        let ch = rayleigh(k, nt, seed ^ 0xABCD);
        Beamformer {
            k,
            nt,
            v: ch.h[..k * nt].to_vec(),
        }
    }

    /// Independent evaluation: explicit real arithmetic, no helpers shared
    /// with the implementation.
    fn scalar_loop_wsr(ch: &ChannelRealization, v: &Beamformer) -> f64 {
        let mut total = 0.0;
        for rx in 0..ch.k {
            let mut powers = vec![0.0; ch.k];
            for tx in 0..ch.k {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..ch.nt {
                    let h = ch.h[(tx * ch.k + rx) * ch.nt + n];
                    let x = v.v[tx * ch.nt + n];
                    re += h.re * x.re + h.im * x.im;
                    im += h.re * x.im - h.im * x.re;
                }
                powers[tx] = re * re + im * im;
            }
            let interf: f64 = powers.iter().sum::<f64>() - powers[rx] + ch.noise_power;
            total += ch.weights[rx] * (1.0 + powers[rx] / interf).ln() / 2f64.ln();
        }
        total
    }

    #[test]
    fn single_user_one_bit() {
        let ch = ChannelRealization {
            k: 1,
            nt: 3,
            h: vec![
                Complex64::new(1.0, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, 0.0),
            ],
            weights: vec![1.0],
            noise_power: 1.0,
            channel_id: "t".into(),
            positions: None,
        };
        let mut v = Beamformer::zeros(1, 3);
        v.v[0] = Complex64::new(1.0, 0.0);
        let r = evaluate_rate(&ch, &v).unwrap();
        assert_eq!(r.per_user_sinr, vec![1.0]);
        assert_eq!(r.weighted_sum_rate, 1.0);
    }

    #[test]
    fn silent_interferers_leave_snr() {
        let ch = rayleigh(3, 2, 4);
        let mut v = random_bf(3, 2, 4);
        v.row_mut(1).iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        v.row_mut(2).iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        let r = evaluate_rate(&ch, &v).unwrap();
        let expected = inner(ch.direct(0), v.row(0)).norm_sqr() / ch.noise_power;
        assert!((r.per_user_sinr[0] - expected).abs() < 1e-12 * expected.max(1.0));
    }

    #[test]
    fn matches_scalar_loop() {
        for s in 0..20 {
            let ch = rayleigh(3, 2, s);
            let v = random_bf(3, 2, s);
            let r = evaluate_rate(&ch, &v).unwrap();
            assert!((r.weighted_sum_rate - scalar_loop_wsr(&ch, &v)).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_loss_matches_evaluator() {
        for s in 0..10 {
            let ch = rayleigh(4, 2, s);
            let v = random_bf(4, 2, s);
            let mut rows = Vec::new();
            for k in 0..4 {
                rows.extend(v.row(k).iter().map(|z| z.re));
                rows.extend(v.row(k).iter().map(|z| z.im));
            }
            let mut g = Graph::new();
            let vv = g.param(Tensor::from_parts(vec![4, 4], rows.clone()));
            let loss = neg_wsr_node(&mut g, &ch, vv);
            let r = evaluate_rate(&ch, &v).unwrap();
            assert!((g.value(loss).item() + r.weighted_sum_rate).abs() < 1e-12);
            assert_eq!(Beamformer::from_real_rows(4, 2, &rows).unwrap(), v);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let ch = rayleigh(3, 2, 0);
        assert!(evaluate_rate(&ch, &Beamformer::zeros(2, 2)).is_err());
    }

    proptest! {
        #[test]
        fn rates_are_scale_consistent(seed in 0u64..1000, c in 0.01f64..100.0) {
            let ch = rayleigh(3, 2, seed);
            let v = random_bf(3, 2, seed);
            let mut scaled = ch.clone();
            scaled.h.iter_mut().for_each(|z| *z *= c);
            scaled.noise_power *= c * c;
            let a = evaluate_rate(&ch, &v).unwrap();
            let b = evaluate_rate(&scaled, &v).unwrap();
            for (x, y) in a.per_user_sinr.iter().zip(&b.per_user_sinr) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }

        #[test]
        fn stronger_signal_never_lowers_rate(seed in 0u64..1000, c in 1.0f64..10.0) {
            let ch = rayleigh(3, 2, seed);
            let v = random_bf(3, 2, seed);
            let mut boosted = ch.clone();
            boosted.link_mut(0, 0).iter_mut().for_each(|z| *z *= c);
            let a = evaluate_rate(&ch, &v).unwrap();
            let b = evaluate_rate(&boosted, &v).unwrap();
            prop_assert!(b.per_user_rate[0] >= a.per_user_rate[0]);
        }
    }
}
