use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{evaluate_rate, inner, Beamformer, RateReport};
use crate::channels::ChannelRealization;
use crate::error::{Error, Result};

/// Regularizer added when the transmit covariance is singular at `μ = 0`.
const SINGULAR_REG: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WmmseInit {
    /// `v_k = √P · g / ‖g‖`, `g ~ CN(0, I)` from the given seed.
    Random(u64),
    /// Full-power maximum-ratio transmission, `v_k = √P · h_kk / ‖h_kk‖`.
    Mrt,
}

#[derive(Debug, Clone)]
pub struct WmmseRun {
    pub beamformer: Beamformer,
    pub report: RateReport,
    /// Weighted sum rate at the initial point and after every iteration.
    pub history: Vec<f64>,
    /// Number of transmit updates that needed the singular regularizer.
    pub regularized: usize,
}

/// Weighted sum-rate maximization by alternating MMSE receive, weight, and
/// transmit updates from a random full-power start.
pub fn wmmse_solve(
    ch: &ChannelRealization,
    p_max: f64,
    iters: usize,
    seed: u64,
) -> Result<(Beamformer, RateReport)> {
    let run = wmmse_run(ch, p_max, iters, WmmseInit::Random(seed))?;
    Ok((run.beamformer, run.report))
}

pub fn wmmse_run(
    ch: &ChannelRealization,
    p_max: f64,
    iters: usize,
    init: WmmseInit,
) -> Result<WmmseRun> {
    if iters == 0 {
        return Err(Error::contract("WMMSE needs at least one iteration"));
    }
    if !(p_max > 0.0) {
        return Err(Error::contract("P_max must be positive"));
    }
    ch.validate()?;
    let (k, nt) = (ch.k, ch.nt);
    let mut v = initial(ch, p_max, init);
    let mut history = Vec::with_capacity(iters + 1);
    history.push(evaluate_rate(ch, &v)?.weighted_sum_rate);
    let mut regularized = 0;

    for _ in 0..iters {
        // a[j][r] = h_jr^H v_j
        let a: Vec<Complex64> = (0..k * k)
            .map(|p| inner(ch.link(p / k, p % k), v.row(p / k)))
            .collect();
        let mut u = vec![Complex64::new(0.0, 0.0); k];
        let mut lam = vec![0.0; k];
        for r in 0..k {
            let total: f64 = (0..k).map(|j| a[j * k + r].norm_sqr()).sum::<f64>() + ch.noise_power;
            u[r] = a[r * k + r] / total;
            let mse = 1.0 - (u[r].conj() * a[r * k + r]).re;
            lam[r] = 1.0 / mse.max(f64::MIN_POSITIVE);
        }
        for tx in 0..k {
            let mut cov = DMatrix::<Complex64>::zeros(nt, nt);
            for r in 0..k {
                let c = ch.weights[r] * lam[r] * u[r].norm_sqr();
                let h = DVector::from_column_slice(ch.link(tx, r));
                cov += (&h * h.adjoint()) * Complex64::new(c, 0.0);
            }
            let b = DVector::from_column_slice(ch.direct(tx))
                * (u[tx] * ch.weights[tx] * lam[tx]);
            let (vk, reg) = constrained_solve(&cov, &b, p_max);
            if reg {
                regularized += 1;
            }
            v.row_mut(tx).copy_from_slice(vk.as_slice());
        }
        history.push(evaluate_rate(ch, &v)?.weighted_sum_rate);
    }
    if regularized > 0 {
        log::warn!("WMMSE: {regularized} singular transmit solves regularized with {SINGULAR_REG}·I");
    }
    let report = evaluate_rate(ch, &v)?;
    Ok(WmmseRun {
        beamformer: v,
        report,
        history,
        regularized,
    })
}

fn initial(ch: &ChannelRealization, p_max: f64, init: WmmseInit) -> Beamformer {
    let (k, nt) = (ch.k, ch.nt);
    let mut v = Beamformer::zeros(k, nt);
    match init {
        WmmseInit::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for z in v.v.iter_mut() {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                *z = Complex64::new(re, im);
            }
        }
        WmmseInit::Mrt => {
            for tx in 0..k {
                v.row_mut(tx).copy_from_slice(ch.direct(tx));
            }
        }
    }
    for tx in 0..k {
        let n: f64 = v.row(tx).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let s = if n > 0.0 { p_max.sqrt() / n } else { 0.0 };
        v.row_mut(tx).iter_mut().for_each(|z| *z *= s);
    }
    v
}

/// `(A + μI)⁻¹ b` with the smallest `μ ≥ 0` such that the result has squared
/// norm at most `p_max`. Returns whether the singular regularizer was used.
fn constrained_solve(a: &DMatrix<Complex64>, b: &DVector<Complex64>, p_max: f64) -> (DVector<Complex64>, bool) {
    let eig = a.clone().symmetric_eigen();
    let q = eig.eigenvectors;
    let ell: Vec<f64> = eig.eigenvalues.iter().map(|x| x.max(0.0)).collect();
    let c = q.adjoint() * b;
    let c2: Vec<f64> = c.iter().map(|z| z.norm_sqr()).collect();
    let power = |mu: f64| -> f64 { c2.iter().zip(&ell).map(|(ci, li)| ci / (li + mu).powi(2)).sum() };
    let assemble = |mu: f64| -> DVector<Complex64> {
        let scaled = DVector::from_iterator(
            c.len(),
            c.iter().zip(&ell).map(|(ci, li)| ci / (li + mu)),
        );
        &q * scaled
    };

    let scale = ell.iter().cloned().fold(0.0, f64::max).max(1.0);
    let singular = ell.iter().any(|&l| l <= SINGULAR_REG * scale);
    let mu0 = if singular { SINGULAR_REG } else { 0.0 };
    if power(mu0) <= p_max {
        return (assemble(mu0), singular);
    }
    // power(μ) ≤ ‖b‖²/μ², so hi is always feasible.
    let bnorm = c2.iter().sum::<f64>().sqrt();
    let (mut lo, mut hi) = (mu0, (bnorm / p_max.sqrt()).max(mu0));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if power(mid) > p_max {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut v = assemble(hi);
    // Guard the last ulp of rounding in the reassembled vector.
    let n2: f64 = v.iter().map(|z| z.norm_sqr()).sum();
    if n2 > p_max {
        v *= Complex64::new((p_max / n2).sqrt(), 0.0);
    }
    (v, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{gen_channel, ChannelModelConfig, Family};

    fn instance(k: usize, nt: usize, seed: u64) -> ChannelRealization {
        let mut c = ChannelModelConfig::new(Family::Rayleigh, k, nt);
        c.noise_power = 0.1;
        gen_channel(&c, seed).unwrap()
    }

    #[test]
    fn single_user_reaches_mrt_capacity() {
        for s in 0..30 {
            let ch = instance(1, 3, s);
            let (v, r) = wmmse_solve(&ch, 1.0, 100, s).unwrap();
            let h2: f64 = ch.h.iter().map(|z| z.norm_sqr()).sum();
            let cap = (1.0 + h2 / ch.noise_power).log2();
            assert!((r.weighted_sum_rate - cap).abs() < 1e-6, "{} vs {cap}", r.weighted_sum_rate);
            assert!(v.is_feasible(1.0));
        }
    }

    #[test]
    fn objective_is_monotone() {
        for s in 0..20 {
            let ch = instance(4, 2, s);
            let run = wmmse_run(&ch, 1.0, 100, WmmseInit::Random(s)).unwrap();
            for w in run.history.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
            }
            assert!(run.beamformer.is_feasible(1.0));
        }
    }

    #[test]
    fn improves_on_mrt_start() {
        for s in 0..20 {
            let ch = instance(3, 2, s);
            let mrt = wmmse_run(&ch, 1.0, 1, WmmseInit::Mrt).unwrap().history[0];
            let run = wmmse_run(&ch, 1.0, 100, WmmseInit::Mrt).unwrap();
            assert!(run.report.weighted_sum_rate >= mrt - 1e-9);
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        assert!(matches!(wmmse_solve(&instance(2, 2, 0), 1.0, 0, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn seeded_runs_repeat() {
        let ch = instance(3, 2, 5);
        assert_eq!(
            wmmse_solve(&ch, 1.0, 50, 9).unwrap().0,
            wmmse_solve(&ch, 1.0, 50, 9).unwrap().0
        );
    }
}
