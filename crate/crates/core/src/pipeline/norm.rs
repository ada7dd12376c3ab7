//! Channel-wise input normalization.

use super::SynthDataset;
use crate::error::{Error, Result};
use ndarray::{Array2, Array3};

/// Standardization constants for the satellite bands plus the clear-sky
/// scale that puts irradiance into unit range.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub sat_mean: Vec<f64>,
    pub sat_std: Vec<f64>,
    /// Divisor for clear-sky and irradiance values (the dataset's clear-sky
    /// maximum).
    pub irr_scale: f64,
}

impl NormStats {
    /// Channel statistics over the hour range `[from, to)` of a dataset.
    pub fn fit_range(ds: &SynthDataset, from: usize, to: usize) -> Result<NormStats> {
        if from >= to || to > ds.n_hours() {
            return Err(Error::Config(format!(
                "normalization range {from}..{to} invalid for {} hours",
                ds.n_hours()
            )));
        }
        let bands = ds.cfg.band_gains.len();
        let mut mean = vec![0.0f64; bands];
        let mut std = vec![0.0f64; bands];
        let n = ((to - from) * ds.grid().n_cells()) as f64;
        for t in from..to {
            for b in 0..bands {
                for &v in ds.sat[t].index_axis(ndarray::Axis(0), b).iter() {
                    mean[b] += v as f64;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for t in from..to {
            for b in 0..bands {
                for &v in ds.sat[t].index_axis(ndarray::Axis(0), b).iter() {
                    let d = v as f64 - mean[b];
                    std[b] += d * d;
                }
            }
        }
        for (b, s) in std.iter_mut().enumerate() {
            *s = (*s / n).sqrt();
            if *s < 1e-9 {
                return Err(Error::Config(format!(
                    "satellite band {} has zero variance; cannot standardize",
                    b + 1
                )));
            }
        }
        let mut irr_scale = 0.0f64;
        for t in from..to {
            for &v in ds.clearsky[t].iter() {
                irr_scale = irr_scale.max(v as f64);
            }
        }
        if irr_scale <= 0.0 {
            return Err(Error::Config(
                "clear-sky irradiance is zero over the whole fit range; cannot scale".into(),
            ));
        }
        Ok(NormStats { sat_mean: mean, sat_std: std, irr_scale })
    }

    pub fn fit(ds: &SynthDataset) -> Result<NormStats> {
        Self::fit_range(ds, 0, ds.n_hours())
    }

    /// `(x - mean) / std` for one satellite band.
    pub fn apply_sat(&self, band: usize, values: &Array2<f32>) -> Array2<f32> {
        let (m, s) = (self.sat_mean[band] as f32, self.sat_std[band] as f32);
        values.mapv(|v| (v - m) / s)
    }

    pub fn invert_sat(&self, band: usize, values: &Array2<f32>) -> Array2<f32> {
        let (m, s) = (self.sat_mean[band] as f32, self.sat_std[band] as f32);
        values.mapv(|v| v * s + m)
    }

    pub fn apply_irr(&self, values: &Array2<f32>) -> Array2<f32> {
        let s = self.irr_scale as f32;
        values.mapv(|v| v / s)
    }

    pub fn invert_irr(&self, values: &Array2<f32>) -> Array2<f32> {
        let s = self.irr_scale as f32;
        values.mapv(|v| v * s)
    }

    /// Normalized model input `(hours*bands, H, W)` from hourly satellite
    /// frames, hour-major channel order.
    pub fn build_input(&self, frames: &[&Array3<f32>]) -> Array3<f32> {
        let bands = self.sat_mean.len();
        let (_, h, w) = frames[0].dim();
        let mut out = Array3::<f32>::zeros((frames.len() * bands, h, w));
        for (hr, frame) in frames.iter().enumerate() {
            for b in 0..bands {
                let norm = self.apply_sat(b, &frame.index_axis(ndarray::Axis(0), b).to_owned());
                out.index_axis_mut(ndarray::Axis(0), hr * bands + b).assign(&norm);
            }
        }
        out
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("norm.sat_mean".into(), join(&self.sat_mean)),
            ("norm.sat_std".into(), join(&self.sat_std)),
            ("norm.irr_scale".into(), self.irr_scale.to_string()),
        ]
    }

    pub fn from_meta(meta: &std::collections::BTreeMap<String, String>) -> Result<NormStats> {
        let parse_list = |key: &str| -> Result<Vec<f64>> {
            meta.get(key)
                .ok_or_else(|| Error::Config(format!("checkpoint missing '{key}'")))?
                .split(',')
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::Config(format!("{key} entry '{s}': {e}")))
                })
                .collect()
        };
        let irr_scale = meta
            .get("norm.irr_scale")
            .ok_or_else(|| Error::Config("checkpoint missing 'norm.irr_scale'".into()))?
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("norm.irr_scale: {e}")))?;
        Ok(NormStats { sat_mean: parse_list("norm.sat_mean")?, sat_std: parse_list("norm.sat_std")?, irr_scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{synth_dataset, SynthConfig};
    

    fn dataset() -> SynthDataset {
        let mut cfg = SynthConfig::toy();
        cfg.grid = crate::geogrid::make_grid(30.0, 30.75, -100.0, -99.25, 0.25).unwrap();
        cfg.n_days = 2;
        synth_dataset(&cfg).unwrap()
    }

    #[test]
    fn standardized_bands_have_unit_moments() {
        let ds = dataset();
        let stats = NormStats::fit(&ds).unwrap();
        for b in 0..4 {
            let mut acc = Vec::new();
            for t in 0..ds.n_hours() {
                let n = stats.apply_sat(b, &ds.sat[t].index_axis(ndarray::Axis(0), b).to_owned());
                acc.extend(n.iter().map(|&v| v as f64));
            }
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let var = acc.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-3, "band {b} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-3, "band {b} std {}", var.sqrt());
        }
    }

    #[test]
    fn roundtrip_is_identity() {
        let ds = dataset();
        let stats = NormStats::fit(&ds).unwrap();
        let x = ds.sat[10].index_axis(ndarray::Axis(0), 2).to_owned();
        let back = stats.invert_sat(2, &stats.apply_sat(2, &x));
        for (a, b) in x.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        let i = &ds.irr[12];
        let back = stats.invert_irr(&stats.apply_irr(i));
        for (a, b) in i.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_channel_is_an_error() {
        let mut ds = dataset();
        for t in 0..ds.n_hours() {
            ds.sat[t].index_axis_mut(ndarray::Axis(0), 1).fill(5.0);
        }
        let err = NormStats::fit(&ds).unwrap_err();
        assert!(err.to_string().contains("band 2"), "got: {err}");
    }

    #[test]
    fn meta_roundtrip() {
        let ds = dataset();
        let stats = NormStats::fit(&ds).unwrap();
        let meta: std::collections::BTreeMap<String, String> =
            stats.to_meta().into_iter().collect();
        let back = NormStats::from_meta(&meta).unwrap();
        assert_eq!(stats, back);
    }

    #[test]
    fn build_input_layout() {
        let ds = dataset();
        let stats = NormStats::fit(&ds).unwrap();
        let frames: Vec<&ndarray::Array3<f32>> = ds.sat[0..6].iter().collect();
        let input = stats.build_input(&frames);
        assert_eq!(input.dim().0, 24);
        // Channel h*4+b is hour h, band b.
        let direct = stats.apply_sat(3, &ds.sat[2].index_axis(ndarray::Axis(0), 3).to_owned());
        let channel = input.index_axis(ndarray::Axis(0), 2 * 4 + 3);
        assert_eq!(channel, direct.view());
    }
}
