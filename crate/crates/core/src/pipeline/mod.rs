//! Synthetic data generation, input normalization, training, and forecast
//! production.

mod forecast;
mod norm;
pub mod synth;
mod train;

pub use forecast::{clearsky_baseline, forecast, persistence_baseline, ForecastSet};
pub use norm::NormStats;
pub use synth::{load_dataset, save_dataset, synth_dataset, SynthDataset};
pub use train::{train, TrainResult};

use crate::error::{Error, Result};
use crate::geogrid::{make_grid, GridSpec, TimeStamp};
use crate::kvtext::{self, KvReader};

/// Synthetic-scene parameters.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub grid: GridSpec,
    pub n_days: usize,
    pub seed: u64,
    pub start: TimeStamp,
    /// Inclusive range of advected Gaussian blob count.
    pub blob_count: (usize, usize),
    /// Advection speed range, cells/hour.
    pub velocity: (f64, f64),
    /// Blob radius range, cells.
    pub radius: (f64, f64),
    /// Cloud absorption α: irradiance = clearsky * (1 - α·cloud/100).
    pub absorption: f64,
    /// Gaussian noise on satellite bands.
    pub noise_sigma: f64,
    pub band_gains: [f64; 4],
    pub elevation_m: f64,
    pub turbidity: f64,
}

impl SynthConfig {
    /// The standard toy recipe: 64x64 mid-latitude grid, 30 summer days.
    pub fn toy() -> SynthConfig {
        SynthConfig {
            grid: make_grid(30.0, 33.15, -100.0, -96.85, 0.05).expect("lattice-exact bounds"),
            n_days: 30,
            seed: 42,
            start: TimeStamp::parse("2023-06-01T00:00:00Z").expect("valid timestamp"),
            blob_count: (6, 12),
            velocity: (0.5, 2.5),
            radius: (4.0, 10.0),
            absorption: 0.8,
            noise_sigma: 2.0,
            band_gains: [0.9, 1.1, 0.8, 1.05],
            elevation_m: 0.0,
            turbidity: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.absorption) {
            return Err(Error::Config(format!("absorption {} outside [0, 1]", self.absorption)));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be nonnegative".into()));
        }
        if self.n_days == 0 {
            return Err(Error::Config("need at least one synthetic day".into()));
        }
        if self.blob_count.0 > self.blob_count.1
            || self.velocity.0 > self.velocity.1
            || self.radius.0 > self.radius.1
        {
            return Err(Error::Config("malformed range (min > max)".into()));
        }
        if self.radius.0 <= 0.0 {
            return Err(Error::Config("blob radius must be positive".into()));
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> String {
        let g = &self.grid;
        kvtext::render(&[
            ("grid.lat_min".into(), g.lat_min.to_string()),
            ("grid.lat_max".into(), g.lat_max.to_string()),
            ("grid.lon_min".into(), g.lon_min.to_string()),
            ("grid.lon_max".into(), g.lon_max.to_string()),
            ("grid.res".into(), g.res.to_string()),
            ("n_days".into(), self.n_days.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("start".into(), self.start.to_rfc3339()),
            ("blob_count_min".into(), self.blob_count.0.to_string()),
            ("blob_count_max".into(), self.blob_count.1.to_string()),
            ("velocity_min".into(), self.velocity.0.to_string()),
            ("velocity_max".into(), self.velocity.1.to_string()),
            ("radius_min".into(), self.radius.0.to_string()),
            ("radius_max".into(), self.radius.1.to_string()),
            ("absorption".into(), self.absorption.to_string()),
            ("noise_sigma".into(), self.noise_sigma.to_string()),
            ("band_gain1".into(), self.band_gains[0].to_string()),
            ("band_gain2".into(), self.band_gains[1].to_string()),
            ("band_gain3".into(), self.band_gains[2].to_string()),
            ("band_gain4".into(), self.band_gains[3].to_string()),
            ("elevation_m".into(), self.elevation_m.to_string()),
            ("turbidity".into(), self.turbidity.to_string()),
        ])
    }

    pub fn from_manifest(text: &str) -> Result<SynthConfig> {
        let map = kvtext::parse(text)?;
        let r = KvReader::new(&map, "synth config");
        let defaults = SynthConfig::toy();
        let grid = match (map.contains_key("grid.lat_min"), map.contains_key("grid.res")) {
            (true, true) => make_grid(
                r.require_f64("grid.lat_min")?,
                r.require_f64("grid.lat_max")?,
                r.require_f64("grid.lon_min")?,
                r.require_f64("grid.lon_max")?,
                r.require_f64("grid.res")?,
            )?,
            _ => defaults.grid,
        };
        let start = match r.raw("start") {
            Some(s) => TimeStamp::parse(s)?,
            None => defaults.start,
        };
        let cfg = SynthConfig {
            grid,
            n_days: r.usize("n_days", defaults.n_days)?,
            seed: r.u64("seed", defaults.seed)?,
            start,
            blob_count: (
                r.usize("blob_count_min", defaults.blob_count.0)?,
                r.usize("blob_count_max", defaults.blob_count.1)?,
            ),
            velocity: (
                r.f64("velocity_min", defaults.velocity.0)?,
                r.f64("velocity_max", defaults.velocity.1)?,
            ),
            radius: (
                r.f64("radius_min", defaults.radius.0)?,
                r.f64("radius_max", defaults.radius.1)?,
            ),
            absorption: r.f64("absorption", defaults.absorption)?,
            noise_sigma: r.f64("noise_sigma", defaults.noise_sigma)?,
            band_gains: [
                r.f64("band_gain1", defaults.band_gains[0])?,
                r.f64("band_gain2", defaults.band_gains[1])?,
                r.f64("band_gain3", defaults.band_gains[2])?,
                r.f64("band_gain4", defaults.band_gains[3])?,
            ],
            elevation_m: r.f64("elevation_m", defaults.elevation_m)?,
            turbidity: r.f64("turbidity", defaults.turbidity)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda_cloud: f64,
    pub lambda_irr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            batch_size: 2,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_cloud: 1.0,
            lambda_irr: 1.0,
            clip_norm: 1.0,
            seed: 7,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_manifest(text: &str) -> Result<TrainConfig> {
        let map = kvtext::parse(text)?;
        let r = KvReader::new(&map, "train config");
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            steps: r.usize("steps", d.steps)?,
            batch_size: r.usize("batch_size", d.batch_size)?,
            learning_rate: r.f64("learning_rate", d.learning_rate)?,
            beta1: r.f64("beta1", d.beta1)?,
            beta2: r.f64("beta2", d.beta2)?,
            adam_eps: r.f64("adam_eps", d.adam_eps)?,
            lambda_cloud: r.f64("lambda_cloud", d.lambda_cloud)?,
            lambda_irr: r.f64("lambda_irr", d.lambda_irr)?,
            clip_norm: r.f64("clip_norm", d.clip_norm)?,
            seed: r.u64("seed", d.seed)?,
            val_fraction: r.f64("val_fraction", d.val_fraction)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_manifest(&self) -> String {
        kvtext::render(&[
            ("steps".into(), self.steps.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("beta1".into(), self.beta1.to_string()),
            ("beta2".into(), self.beta2.to_string()),
            ("adam_eps".into(), self.adam_eps.to_string()),
            ("lambda_cloud".into(), self.lambda_cloud.to_string()),
            ("lambda_irr".into(), self.lambda_irr.to_string()),
            ("clip_norm".into(), self.clip_norm.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("val_fraction".into(), self.val_fraction.to_string()),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_config_manifest_roundtrip() {
        let cfg = SynthConfig::toy();
        let back = SynthConfig::from_manifest(&cfg.to_manifest()).unwrap();
        assert_eq!(back.grid, cfg.grid);
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.band_gains, cfg.band_gains);
        assert_eq!(back.start, cfg.start);
    }

    #[test]
    fn train_config_manifest_roundtrip() {
        let cfg = TrainConfig { steps: 11, lambda_cloud: 0.5, ..TrainConfig::default() };
        let back = TrainConfig::from_manifest(&cfg.to_manifest()).unwrap();
        assert_eq!(back.steps, 11);
        assert_eq!(back.lambda_cloud, 0.5);
        assert_eq!(back.learning_rate, cfg.learning_rate);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut s = SynthConfig::toy();
        s.absorption = 1.5;
        assert!(s.validate().is_err());
        let mut t = TrainConfig::default();
        t.steps = 0;
        assert!(t.validate().is_err());
    }
}
