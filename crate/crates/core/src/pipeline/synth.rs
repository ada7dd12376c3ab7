//! Synthetic dataset generation: Gaussian cloud blobs advected over a torus,
//! irradiance coupled to cloud through the clear-sky stack, and satellite
//! bands as noisy affine views of cloud cover.

use super::SynthConfig;
use crate::clearsky::{clearsky_stack, CellInput};
use crate::error::{Error, Result};
use crate::geogrid::{ssgf, Field, FieldStack, GridSpec, TimeStamp, Units};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::path::Path;

/// Blob cloud amplitude range, percent.
const AMP_RANGE: (f64, f64) = (45.0, 100.0);
/// Amplitude of the diurnal offset added to each satellite band.
const DIURNAL_AMP: f64 = 10.0;

#[derive(Debug, Clone, Copy)]
struct Blob {
    cy: f64,
    cx: f64,
    vy: f64,
    vx: f64,
    radius: f64,
    amp: f64,
}

/// Hourly synthetic scene: satellite bands, cloud truth, irradiance truth,
/// and the clear-sky stack they were derived from.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub cfg: SynthConfig,
    /// Per hour: (bands, H, W).
    pub sat: Vec<Array3<f32>>,
    /// Per hour: cloud cover percent.
    pub cloud: Vec<Array2<f32>>,
    /// Per hour: irradiance W/m².
    pub irr: Vec<Array2<f32>>,
    /// Per hour: clear-sky irradiance W/m².
    pub clearsky: Vec<Array2<f32>>,
}

impl SynthDataset {
    pub fn n_hours(&self) -> usize {
        self.sat.len()
    }

    pub fn grid(&self) -> &GridSpec {
        &self.cfg.grid
    }

    pub fn time_at(&self, hour: usize) -> TimeStamp {
        self.cfg.start.add_hours(hour as i64)
    }
}

fn torus_delta(a: f64, b: f64, n: f64) -> f64 {
    let d = (a - b).abs() % n;
    d.min(n - d)
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over (seed, salt).
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates the full hourly dataset. Fully determined by `cfg` (including
/// its seed); hours are computed independently, so the result does not
/// depend on the parallel partitioning.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let (h, w) = cfg.grid.shape();
    let n_hours = cfg.n_days * 24;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_blobs = rng.random_range(cfg.blob_count.0..=cfg.blob_count.1);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| {
            let speed = rng.random_range(cfg.velocity.0..=cfg.velocity.1);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            Blob {
                cy: rng.random_range(0.0..h as f64),
                cx: rng.random_range(0.0..w as f64),
                vy: speed * angle.sin(),
                vx: speed * angle.cos(),
                radius: rng.random_range(cfg.radius.0..=cfg.radius.1),
                amp: rng.random_range(AMP_RANGE.0..=AMP_RANGE.1),
            }
        })
        .collect();

    let cs_stack = clearsky_stack(
        &cfg.grid,
        cfg.start,
        n_hours,
        &CellInput::Constant(cfg.elevation_m),
        &CellInput::Constant(cfg.turbidity),
    )?;

    let hours: Vec<(Array3<f32>, Array2<f32>, Array2<f32>, Array2<f32>)> = (0..n_hours)
        .into_par_iter()
        .map(|t| {
            let tf = t as f64;
            let mut cloud = Array2::<f32>::zeros((h, w));
            for ((i, j), c) in cloud.indexed_iter_mut() {
                let mut acc = 0.0f64;
                for b in &blobs {
                    let cy = (b.cy + b.vy * tf).rem_euclid(h as f64);
                    let cx = (b.cx + b.vx * tf).rem_euclid(w as f64);
                    let dy = torus_delta(i as f64, cy, h as f64);
                    let dx = torus_delta(j as f64, cx, w as f64);
                    let d2 = dy * dy + dx * dx;
                    acc += b.amp * (-d2 / (2.0 * b.radius * b.radius)).exp();
                }
                *c = acc.clamp(0.0, 100.0) as f32;
            }

            let cs = &cs_stack.field(t).values;
            let mut irr = Array2::<f32>::zeros((h, w));
            for ((i, j), v) in irr.indexed_iter_mut() {
                *v = cs[[i, j]] * (1.0 - cfg.absorption as f32 * cloud[[i, j]] / 100.0);
            }

            let hour_of_day = cfg.start.add_hours(t as i64).fractional_hour();
            let mut sat = Array3::<f32>::zeros((cfg.band_gains.len(), h, w));
            for (band, &gain) in cfg.band_gains.iter().enumerate() {
                let offset = DIURNAL_AMP
                    * (std::f64::consts::TAU * hour_of_day / 24.0
                        + band as f64 * std::f64::consts::FRAC_PI_2)
                        .sin();
                let mut noise_rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, (t * 4 + band + 1) as u64));
                let normal = Normal::new(0.0f64, cfg.noise_sigma).expect("nonnegative sigma");
                for i in 0..h {
                    for j in 0..w {
                        let n = if cfg.noise_sigma > 0.0 { normal.sample(&mut noise_rng) } else { 0.0 };
                        sat[[band, i, j]] =
                            (gain * cloud[[i, j]] as f64 + offset + n) as f32;
                    }
                }
            }
            (sat, cloud, irr, cs.clone())
        })
        .collect();

    let mut dataset = SynthDataset {
        cfg: cfg.clone(),
        sat: Vec::with_capacity(n_hours),
        cloud: Vec::with_capacity(n_hours),
        irr: Vec::with_capacity(n_hours),
        clearsky: Vec::with_capacity(n_hours),
    };
    for (sat, cloud, irr, cs) in hours {
        dataset.sat.push(sat);
        dataset.cloud.push(cloud);
        dataset.irr.push(irr);
        dataset.clearsky.push(cs);
    }
    Ok(dataset)
}

fn stack_from(
    grid: GridSpec,
    start: TimeStamp,
    values: impl Iterator<Item = Array2<f32>>,
    units: Units,
) -> Result<FieldStack> {
    let fields = values
        .enumerate()
        .map(|(t, v)| Field::new(grid, start.add_hours(t as i64), v, units, None))
        .collect::<Result<Vec<_>>>()?;
    FieldStack::new(fields)
}

/// Persists the dataset as one SSGF stack per variable plus a key=value
/// manifest (`dataset.txt`).
pub fn save_dataset(dir: &Path, ds: &SynthDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let grid = ds.cfg.grid;
    let start = ds.cfg.start;
    for band in 0..ds.cfg.band_gains.len() {
        let stack = stack_from(
            grid,
            start,
            ds.sat.iter().map(|s| s.index_axis(ndarray::Axis(0), band).to_owned()),
            Units::Raw,
        )?;
        ssgf::write_stack(&dir.join(format!("sat_band{}.ssgf", band + 1)), &stack)?;
    }
    ssgf::write_stack(
        &dir.join("cloud.ssgf"),
        &stack_from(grid, start, ds.cloud.iter().cloned(), Units::Percent)?,
    )?;
    ssgf::write_stack(
        &dir.join("irradiance.ssgf"),
        &stack_from(grid, start, ds.irr.iter().cloned(), Units::WattsPerM2)?,
    )?;
    ssgf::write_stack(
        &dir.join("clearsky.ssgf"),
        &stack_from(grid, start, ds.clearsky.iter().cloned(), Units::WattsPerM2)?,
    )?;
    std::fs::write(dir.join("dataset.txt"), ds.cfg.to_manifest())?;
    Ok(())
}

/// Loads a dataset previously written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<SynthDataset> {
    let manifest = std::fs::read_to_string(dir.join("dataset.txt")).map_err(|e| {
        Error::Config(format!("{}: missing dataset manifest: {e}", dir.display()))
    })?;
    let cfg = SynthConfig::from_manifest(&manifest)?;
    let (h, w) = cfg.grid.shape();
    let n_hours = cfg.n_days * 24;
    let n_bands = cfg.band_gains.len();

    let read = |name: &str| -> Result<Vec<Array2<f32>>> {
        let stack = ssgf::read_stack(&dir.join(name))?;
        if stack.len() != n_hours {
            return Err(Error::Format(format!(
                "{name}: expected {n_hours} hours, found {}",
                stack.len()
            )));
        }
        Ok(stack.fields().iter().map(|f| f.values.clone()).collect())
    };

    let mut bands = Vec::with_capacity(n_bands);
    for b in 0..n_bands {
        bands.push(read(&format!("sat_band{}.ssgf", b + 1))?);
    }
    let sat = (0..n_hours)
        .map(|t| {
            let mut a = Array3::<f32>::zeros((n_bands, h, w));
            for (b, band) in bands.iter().enumerate() {
                a.index_axis_mut(ndarray::Axis(0), b).assign(&band[t]);
            }
            a
        })
        .collect();

    Ok(SynthDataset {
        cfg,
        sat,
        cloud: read("cloud.ssgf")?,
        irr: read("irradiance.ssgf")?,
        clearsky: read("clearsky.ssgf")?,
    })
}
