//! Synthetic light curves with injected flares.
//!
//! Each star gets a red-noise baseline with rotational modulation. Flares
//! follow a self-exciting point process: a per-star background rate (high for
//! active stars, low for quiet ones) plus a decaying boost after every flare,
//! so past flare density predicts future flares. Each flare adds a fast rise
//! and exponential decay to the flux and a row to the catalog. The light curve
//! starts some days into the quarter, so part of the recorded history
//! predates the first cadence.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lightcurve::{FlareCatalog, FlareCatalogEntry, LightCurve, KEPLER_LONG_CADENCE_MINUTES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub stars: usize,
    pub quarters: usize,
    /// Cadences per curve.
    pub curve_len: usize,
    pub seed: u64,
    pub active_fraction: f64,
    /// Background flare rates per day.
    pub quiet_rate: f64,
    pub active_rate: f64,
    /// Rate boost per day right after a flare, and its decay time in days.
    pub excitation: f64,
    pub excitation_days: f64,
    /// Days of the quarter elapsed before the first cadence, drawn uniformly.
    pub lead_days: [f64; 2],
    pub noise: f64,
    pub red_noise_phi: f64,
    pub modulation: f64,
    /// Median flare amplitude in relative flux.
    pub flare_amplitude: f64,
    pub flare_decay_days: [f64; 2],
    pub missing_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            stars: 200,
            quarters: 1,
            curve_len: 1088,
            seed: 0,
            active_fraction: 0.4,
            quiet_rate: 0.005,
            active_rate: 0.25,
            excitation: 0.3,
            excitation_days: 2.0,
            lead_days: [2.0, 12.0],
            noise: 1e-3,
            red_noise_phi: 0.9,
            modulation: 3e-3,
            flare_amplitude: 3e-3,
            flare_decay_days: [0.05, 0.3],
            missing_rate: 0.003,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.quiet_rate, self.active_rate, self.excitation_days, self.noise];
        if self.stars == 0 || self.quarters == 0 || self.curve_len < 2 {
            return Err(Error::Config("stars, quarters and curve_len must be positive".into()));
        }
        if positive.iter().any(|&v| !(v > 0.0)) || !(self.excitation >= 0.0) {
            return Err(Error::Config("rates, noise and decay times must be positive".into()));
        }
        if self.excitation * self.excitation_days >= 1.0 {
            return Err(Error::Config(format!(
                "excitation {} × {} days ≥ 1 makes the flare process explode",
                self.excitation, self.excitation_days
            )));
        }
        if !(0.0..=1.0).contains(&self.active_fraction)
            || !(0.0..1.0).contains(&self.missing_rate)
            || !(0.0..1.0).contains(&self.red_noise_phi)
        {
            return Err(Error::Config(
                "active_fraction, missing_rate and red_noise_phi must be fractions".into(),
            ));
        }
        let ranges = [self.lead_days, self.flare_decay_days];
        if ranges.iter().any(|r| !(r[0] >= 0.0 && r[1] >= r[0])) || !(self.flare_decay_days[0] > 0.0) {
            return Err(Error::Config("day ranges must be ordered and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub star_id: String,
    pub quarter: String,
    pub time: f64,
    pub amplitude: f64,
    pub decay_days: f64,
    pub active_star: bool,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub curves: Vec<LightCurve>,
    pub catalog: FlareCatalog,
    pub injections: Vec<Injection>,
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

/// Thinning simulation of the self-exciting process on `[0, end]`.
fn flare_times<R: Rng>(rng: &mut R, base: f64, boost: f64, tau: f64, end: f64) -> Vec<f64> {
    let intensity = |t: f64, past: &[f64]| base + past.iter().map(|&s| boost * (-(t - s) / tau).exp()).sum::<f64>();
    let mut times = Vec::new();
    let mut t = 0.0;
    loop {
        // intensity only decays until the next event, so the current value bounds it
        let bound = intensity(t, &times);
        t += Exp::new(bound).expect("positive rate").sample(rng);
        if t > end {
            return times;
        }
        if rng.random::<f64>() * bound <= intensity(t, &times) {
            times.push(t);
        }
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cadence = KEPLER_LONG_CADENCE_MINUTES / (24.0 * 60.0);
    let white = Normal::new(0.0, cfg.noise * (1.0 - cfg.red_noise_phi.powi(2)).sqrt()).unwrap();
    let amplitude = LogNormal::new(cfg.flare_amplitude.ln(), 0.5).unwrap();

    let mut curves = Vec::new();
    let mut entries = Vec::new();
    let mut injections = Vec::new();
    for s in 0..cfg.stars {
        let star_id = format!("S{s:04}");
        let active = rng.random::<f64>() < cfg.active_fraction;
        let base = if active { cfg.active_rate } else { cfg.quiet_rate };
        for q in 0..cfg.quarters {
            let quarter = format!("Q{}", q + 1);
            let lead = rng.random_range(cfg.lead_days[0]..=cfg.lead_days[1]);
            let times: Vec<f64> = (0..cfg.curve_len)
                .map(|i| round_to(lead + i as f64 * cadence, 6))
                .collect();
            let end = *times.last().unwrap();

            let period = rng.random_range(1.0..15.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let mod_amp = cfg.modulation * rng.random::<f64>();
            let mut red = 0.0;
            let mut flux: Vec<f64> = times
                .iter()
                .map(|&t| {
                    red = cfg.red_noise_phi * red + white.sample(&mut rng);
                    1.0 + mod_amp * (std::f64::consts::TAU * t / period + phase).sin() + red
                })
                .collect();

            for tf in flare_times(&mut rng, base, cfg.excitation, cfg.excitation_days, end) {
                let tf = round_to(tf, 6);
                let amp = amplitude.sample(&mut rng);
                let decay = rng.random_range(cfg.flare_decay_days[0]..=cfg.flare_decay_days[1]);
                for (f, &t) in flux.iter_mut().zip(&times) {
                    if t >= tf {
                        *f += amp * (-(t - tf) / decay).exp();
                    }
                }
                entries.push(FlareCatalogEntry {
                    star_id: star_id.clone(),
                    quarter: quarter.clone(),
                    flare_time: tf,
                    flare_flux: round_to(1.0 + amp, 7),
                });
                injections.push(Injection {
                    star_id: star_id.clone(),
                    quarter: quarter.clone(),
                    time: tf,
                    amplitude: amp,
                    decay_days: decay,
                    active_star: active,
                });
            }

            let flux = flux
                .into_iter()
                .map(|f| (rng.random::<f64>() >= cfg.missing_rate).then(|| round_to(f, 7)))
                .collect();
            curves.push(LightCurve::new(star_id.clone(), quarter, times, flux)?);
        }
    }
    Ok(SynthCorpus {
        curves,
        catalog: FlareCatalog::from_entries(entries)?,
        injections,
    })
}

impl SynthCorpus {
    /// Writes `curves/<star>_<quarter>.csv` and `catalog.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let curves = dir.join("curves");
        std::fs::create_dir_all(&curves)?;
        for c in &self.curves {
            c.write(&curves.join(c.file_name()))?;
        }
        std::fs::write(dir.join("catalog.csv"), self.catalog.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            stars: 12,
            curve_len: 600,
            seed: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.curves, b.curves);
        assert_eq!(a.catalog, b.catalog);
        let c = generate(&SynthConfig { seed: 5, ..small() }).unwrap();
        assert_ne!(a.curves, c.curves);
    }

    #[test]
    fn catalog_matches_injections() {
        let c = generate(&small()).unwrap();
        assert_eq!(c.catalog.len(), c.injections.len());
        assert!(c.curves.iter().any(|c| c.missing_count() > 0));
    }

    #[test]
    fn active_stars_flare_more() {
        let c = generate(&SynthConfig {
            stars: 60,
            ..small()
        })
        .unwrap();
        let rate = |active: bool| {
            let stars = c.curves.iter().filter(|cv| {
                c.injections
                    .iter()
                    .find(|i| i.star_id == cv.star_id)
                    .map_or(!active, |i| i.active_star == active)
            });
            let n = stars.clone().count().max(1) as f64;
            let flares = c.injections.iter().filter(|i| i.active_star == active).count() as f64;
            flares / n
        };
        assert!(rate(true) > 3.0 * rate(false));
    }

    #[test]
    fn explosive_excitation_is_rejected() {
        assert!(generate(&SynthConfig {
            excitation: 0.6,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn flux_jumps_at_injections() {
        let c = generate(&small()).unwrap();
        let mut checked = 0;
        for inj in c.injections.iter().filter(|i| i.amplitude > 5e-3) {
            let curve = c.curves.iter().find(|cv| cv.star_id == inj.star_id).unwrap();
            let Some(i) = curve.timestamps.iter().position(|&t| t >= inj.time) else {
                continue;
            };
            if i == 0 {
                continue;
            }
            if let (Some(before), Some(at)) = (curve.flux[i - 1], curve.flux[i]) {
                assert!(at - before > 0.3 * inj.amplitude, "{inj:?}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }
}
