use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::config::{ChannelModelConfig, Family};
use super::{ChannelRealization, Positions};
use crate::error::{Error, Result};

/// Counter-based seed splitting (splitmix64 finalizer over `base` and `index`).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Half-wavelength ULA response, unit total power.
pub fn steering_vector(n: usize, angle: f64) -> Vec<Complex64> {
    let amp = 1.0 / (n as f64).sqrt();
    (0..n)
        .map(|i| Complex64::from_polar(amp, PI * i as f64 * angle.sin()))
        .collect()
}

/// Geometric-fading coefficient: `|h|^2 = |r|^2 / (1 + d^2)`.
pub fn geometric_gain(r: Complex64, d: f64) -> Complex64 {
    r / (1.0 + d * d).sqrt()
}

/// Nakagami-`m` envelope with spread `omega`: `|h|^2 ~ Gamma(m, omega / m)`.
pub fn nakagami_envelope<R: Rng + ?Sized>(rng: &mut R, m: f64, omega: f64) -> f64 {
    let g = Gamma::new(m, omega / m).expect("nakagami shape and spread are validated");
    g.sample(rng).sqrt()
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn cn01<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    Complex64::new(normal(rng) * FRAC_1_SQRT_2, normal(rng) * FRAC_1_SQRT_2)
}

fn draw_positions<R: Rng + ?Sized>(rng: &mut R, cfg: &ChannelModelConfig) -> Positions {
    let mut tx = Vec::with_capacity(cfg.k);
    let mut rx = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let t = [rng.random::<f64>() * cfg.area_m, rng.random::<f64>() * cfg.area_m];
        let dist = cfg.d_min_m + rng.random::<f64>() * (cfg.d_max_m - cfg.d_min_m);
        let phi = rng.random::<f64>() * 2.0 * PI;
        tx.push(t);
        rx.push([t[0] + dist * phi.cos(), t[1] + dist * phi.sin()]);
    }
    Positions { tx, rx }
}

/// Draws one realization. The output is a pure function of `(cfg, rng_seed)`.
///
/// Draw order is fixed: small-scale scatter for every link, then family
/// extras (line-of-sight angles, placement, shadowing). Rician and Rayleigh
/// therefore share their scatter draws under the same seed.
pub fn gen_channel(cfg: &ChannelModelConfig, rng_seed: u64) -> Result<ChannelRealization> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, rng_seed));
    let (k, nt) = (cfg.k, cfg.nt);
    let links = k * k;
    let mut h = vec![Complex64::new(0.0, 0.0); links * nt];
    let mut positions = None;

    match cfg.family {
        Family::Channel1 | Family::Channel3 | Family::Rayleigh => {
            h.iter_mut().for_each(|z| *z = cn01(&mut rng));
        }
        Family::Channel2 => {
            // Biased scatter: Re, Im ~ (1 + N(0,1)) / 2.
            h.iter_mut().for_each(|z| {
                *z = Complex64::new((1.0 + normal(&mut rng)) / 2.0, (1.0 + normal(&mut rng)) / 2.0)
            });
        }
        Family::Rician => {
            h.iter_mut().for_each(|z| *z = cn01(&mut rng));
        }
        Family::Geometric => {
            h.iter_mut().for_each(|z| *z = cn01(&mut rng));
        }
        Family::Nakagami => {
            let [lo, hi] = cfg.nakagami_m;
            let m = if hi > lo { lo + rng.random::<f64>() * (hi - lo) } else { lo };
            for z in h.iter_mut() {
                let env = nakagami_envelope(&mut rng, m, cfg.nakagami_omega);
                let phase = rng.random::<f64>() * 2.0 * PI;
                *z = Complex64::from_polar(env, phase);
            }
        }
    }

    if matches!(cfg.family, Family::Channel2 | Family::Rician) {
        let eps = cfg.k_factor;
        let los_amp = (eps / (eps + 1.0)).sqrt();
        let nlos_amp = (1.0 / (eps + 1.0)).sqrt();
        for link in 0..links {
            let beta_t = rng.random::<f64>() * 2.0 * PI;
            let beta_r = rng.random::<f64>() * 2.0 * PI;
            // Single-antenna receivers: the receive response is a scalar.
            let a_r = steering_vector(1, beta_r)[0];
            let a_t = steering_vector(nt, beta_t);
            for (n, z) in h[link * nt..(link + 1) * nt].iter_mut().enumerate() {
                *z = los_amp * a_t[n] * a_r.conj() + nlos_amp * *z;
            }
        }
    }

    if cfg.family.uses_positions() {
        let pos = draw_positions(&mut rng, cfg);
        for j in 0..k {
            for kk in 0..k {
                // Distances below d_min are clamped so the loss model stays finite.
                let d = pos.distance(j, kk).max(cfg.d_min_m);
                let base = (j * k + kk) * nt;
                let gain = match cfg.family {
                    Family::Geometric => 1.0 / (1.0 + d * d).sqrt(),
                    _ => cfg.pathloss.map_or(1.0, |p| p.amplitude(d)),
                };
                h[base..base + nt].iter_mut().for_each(|z| *z *= gain);
            }
        }
        positions = Some(pos);
    }

    if cfg.shadow_std_db > 0.0 {
        for link in 0..links {
            let x_db = cfg.shadow_std_db * normal(&mut rng);
            let amp = 10f64.powf(x_db / 20.0);
            h[link * nt..(link + 1) * nt].iter_mut().for_each(|z| *z *= amp);
        }
    }

    let out = ChannelRealization {
        k,
        nt,
        h,
        weights: cfg.weights(),
        noise_power: cfg.noise_power,
        channel_id: cfg.channel_id(),
        positions,
    };
    out.validate().map_err(|e| Error::Numeric {
        op: "gen_channel",
        detail: e.to_string(),
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bare(family: Family, k: usize, nt: usize) -> ChannelModelConfig {
        let mut c = ChannelModelConfig::new(family, k, nt);
        c.pathloss = None;
        c
    }

    /// Mean of |h|^2 over all entries of `draws` realizations, with its standard error.
    fn power_moment(cfg: &ChannelModelConfig, draws: usize) -> (f64, f64) {
        let mut xs = Vec::new();
        for s in 0..draws {
            let ch = gen_channel(cfg, s as u64).unwrap();
            xs.extend(ch.h.iter().map(|z| z.norm_sqr()));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn same_seed_same_draw() {
        for fam in Family::ALL {
            let c = ChannelModelConfig::new(fam, 3, 2);
            assert_eq!(gen_channel(&c, 7).unwrap(), gen_channel(&c, 7).unwrap());
            assert_ne!(gen_channel(&c, 7).unwrap().h, gen_channel(&c, 8).unwrap().h);
        }
    }

    #[test]
    fn geometric_unit_example() {
        let h = geometric_gain(Complex64::new(1.0, 0.0), 1.0);
        assert!((h.norm_sqr() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rician_without_los_equals_rayleigh() {
        let mut rician = bare(Family::Rician, 3, 2);
        rician.k_factor = 0.0;
        let rayleigh = bare(Family::Rayleigh, 3, 2);
        for s in 0..20 {
            let a = gen_channel(&rician, s).unwrap();
            let b = gen_channel(&rayleigh, s).unwrap();
            assert_eq!(a.h, b.h);
        }
    }

    #[test]
    fn channel1_small_scale_power_is_unit() {
        // 10^5 entries of |h_hat|^2.
        let c = bare(Family::Channel1, 1, 1);
        let (mean, _) = power_moment(&c, 100_000);
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn family_moments_within_three_standard_errors() {
        // E|h|^2 for each family, derived from its definition.
        let eps = db_to_lin(3.0);
        let shadow = {
            let s = 8.0 * std::f64::consts::LN_10 / 10.0;
            (s * s / 2.0).exp()
        };
        let cases: Vec<(ChannelModelConfig, f64)> = vec![
            (bare(Family::Rayleigh, 2, 2), 1.0),
            (bare(Family::Rician, 2, 1), 1.0),
            // Single-element LoS is deterministic 1, scatter has mean (1+j)/2.
            (bare(Family::Channel2, 2, 1), 1.0 + eps.sqrt() / (eps + 1.0)),
            (bare(Family::Channel3, 2, 2), shadow),
            (
                {
                    let mut c = bare(Family::Nakagami, 2, 2);
                    c.nakagami_m = [0.5, 2.0];
                    c.nakagami_omega = 1.5;
                    c
                },
                1.5,
            ),
        ];
        for (cfg, expected) in cases {
            let (mean, se) = power_moment(&cfg, 25_000);
            assert!(
                (mean - expected).abs() < 3.0 * se,
                "{}: mean {mean} expected {expected} (se {se})",
                cfg.family
            );
        }
    }

    fn db_to_lin(db: f64) -> f64 {
        10f64.powf(db / 10.0)
    }

    #[test]
    fn nakagami_one_is_rayleigh() {
        // Compare against an independent inverse-CDF Rayleigh sampler and
        // against the closed-form CDF 1 - exp(-r^2).
        let mut c = bare(Family::Nakagami, 1, 1);
        c.nakagami_m = [1.0, 1.0];
        let n = 100_000;
        let mut naka: Vec<f64> = (0..n)
            .map(|s| gen_channel(&c, s as u64).unwrap().h[0].norm())
            .collect();
        naka.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ks_analytic = naka
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let f = 1.0 - (-r * r).exp();
                ((i + 1) as f64 / n as f64 - f).abs().max((f - i as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks_analytic < 0.01, "KS vs analytic {ks_analytic}");

        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let mut ray: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                FRAC_1_SQRT_2 * (-2.0 * (1.0 - u).ln()).sqrt()
            })
            .collect();
        ray.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Two-sample KS distance.
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < n && j < n {
            if naka[i] <= ray[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / n as f64 - j as f64 / n as f64).abs());
        }
        assert!(d < 0.01, "two-sample KS {d}");
    }

    #[test]
    fn positions_respect_geometry() {
        for fam in [Family::Channel1, Family::Channel3, Family::Geometric] {
            let c = ChannelModelConfig::new(fam, 6, 2);
            for s in 0..200 {
                let ch = gen_channel(&c, s).unwrap();
                let pos = ch.positions.as_ref().unwrap();
                for k in 0..c.k {
                    let t = pos.tx[k];
                    assert!(t[0] >= 0.0 && t[0] <= c.area_m && t[1] >= 0.0 && t[1] <= c.area_m);
                    let d = pos.distance(k, k);
                    assert!(d >= c.d_min_m - 1e-9 && d <= c.d_max_m + 1e-9);
                }
            }
        }
    }

    #[test]
    fn steering_vector_has_unit_power() {
        for n in 1..6 {
            let a = steering_vector(n, 0.7);
            let p: f64 = a.iter().map(|z| z.norm_sqr()).sum();
            assert!((p - 1.0).abs() < 1e-12);
        }
    }
}
