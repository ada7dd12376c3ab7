//! Solar geometry and the Ineichen-Perez clear-sky GHI model.
//!
//! Solar position uses the standard low-precision fractional-year
//! approximation (declination and equation of time as short Fourier series of
//! the fractional year), good to a few tenths of a degree of zenith — enough
//! for W/m²-level agreement. Air mass is the plain secant `1/cos(z)`, exactly
//! as the model is written; a Kasten-Young correction is deliberately not
//! applied (see [`AirMassModel`]).

use crate::error::{Error, Result};
use crate::geogrid::{Field, FieldStack, GridSpec, TimeStamp, Units};
use ndarray::Array2;
use rayon::prelude::*;
use std::f64::consts::PI;

/// Default Linke turbidity when no climatology is supplied; a standard
/// mid-latitude value.
pub const DEFAULT_LINKE_TURBIDITY: f64 = 3.0;

/// Secant air mass is what the model specifies; Kasten-Young 1989 is kept
/// behind an option for sensitivity checks only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AirMassModel {
    #[default]
    Secant,
    KastenYoung,
}

/// Sun geometry at one place and instant.
#[derive(Debug, Clone, Copy)]
pub struct SolarPosition {
    pub zenith_deg: f64,
    pub declination_deg: f64,
    pub hour_angle_deg: f64,
    pub equation_of_time_min: f64,
}

/// Quantities of the solar-position approximation that depend on time only,
/// hoisted out of per-cell loops.
#[derive(Debug, Clone, Copy)]
pub struct SolarDayTerms {
    declination_rad: f64,
    equation_of_time_min: f64,
    utc_hour: f64,
}

impl SolarDayTerms {
    pub fn new(t: TimeStamp) -> SolarDayTerms {
        let doy = t.day_of_year() as f64;
        let hour = t.fractional_hour();
        let g = 2.0 * PI / 365.0 * (doy - 1.0 + (hour - 12.0) / 24.0);
        let eqtime = 229.18
            * (0.000075 + 0.001868 * g.cos()
                - 0.032077 * g.sin()
                - 0.014615 * (2.0 * g).cos()
                - 0.040849 * (2.0 * g).sin());
        let decl = 0.006918 - 0.399912 * g.cos() + 0.070257 * g.sin()
            - 0.006758 * (2.0 * g).cos()
            + 0.000907 * (2.0 * g).sin()
            - 0.002697 * (3.0 * g).cos()
            + 0.00148 * (3.0 * g).sin();
        SolarDayTerms { declination_rad: decl, equation_of_time_min: eqtime, utc_hour: hour }
    }

    /// Completes the position for a location. Longitude is signed east.
    pub fn position(&self, lat_deg: f64, lon_deg: f64) -> SolarPosition {
        let true_solar_min = self.utc_hour * 60.0 + self.equation_of_time_min + 4.0 * lon_deg;
        let mut ha = true_solar_min / 4.0 - 180.0;
        ha = (ha + 180.0).rem_euclid(360.0) - 180.0;
        let lat = lat_deg.to_radians();
        let cos_z = lat.sin() * self.declination_rad.sin()
            + lat.cos() * self.declination_rad.cos() * ha.to_radians().cos();
        SolarPosition {
            zenith_deg: cos_z.clamp(-1.0, 1.0).acos().to_degrees(),
            declination_deg: self.declination_rad.to_degrees(),
            hour_angle_deg: ha,
            equation_of_time_min: self.equation_of_time_min,
        }
    }
}

/// Solar position at (lat, lon, t). Latitude must be within ±90°.
pub fn solar_zenith(lat_deg: f64, lon_deg: f64, t: TimeStamp) -> Result<SolarPosition> {
    if lat_deg.abs() > 90.0 {
        return Err(Error::Grid(format!("latitude {lat_deg} outside ±90°")));
    }
    Ok(SolarDayTerms::new(t).position(lat_deg, lon_deg))
}

/// Relative optical air mass for zenith angle `z_deg` < 90°.
pub fn airmass(z_deg: f64) -> Result<f64> {
    airmass_with(z_deg, AirMassModel::Secant)
}

pub fn airmass_with(z_deg: f64, model: AirMassModel) -> Result<f64> {
    if z_deg >= 90.0 {
        return Err(Error::SunBelowHorizon(z_deg));
    }
    let sec = 1.0 / z_deg.to_radians().cos();
    Ok(match model {
        AirMassModel::Secant => sec,
        AirMassModel::KastenYoung => {
            1.0 / (z_deg.to_radians().cos() + 0.50572 * (96.07995 - z_deg).powf(-1.6364))
        }
    })
}

/// Extraterrestrial radiation for a day of the year, W/m².
pub fn extraterrestrial(doy: u32) -> f64 {
    1367.7 * (1.0 + 0.033 * (2.0 * PI * doy as f64 / 365.0).cos())
}

/// Elevation- and turbidity-derived coefficients of the clear-sky model.
#[derive(Debug, Clone, Copy)]
pub struct ClearSkyParams {
    pub elevation_m: f64,
    pub linke_turbidity: f64,
    pub cg1: f64,
    pub cg2: f64,
    pub fh1: f64,
    pub fh2: f64,
}

impl ClearSkyParams {
    pub fn new(elevation_m: f64, linke_turbidity: f64) -> Result<ClearSkyParams> {
        if linke_turbidity < 1.0 {
            return Err(Error::Config(format!(
                "Linke turbidity must be >= 1, got {linke_turbidity}"
            )));
        }
        if elevation_m < -430.0 {
            return Err(Error::Config(format!(
                "elevation {elevation_m} m below the lowest land surface"
            )));
        }
        Ok(ClearSkyParams {
            elevation_m,
            linke_turbidity,
            cg1: 5.09e-5 * elevation_m + 0.868,
            cg2: 3.92e-5 * elevation_m + 0.0387,
            fh1: (-elevation_m / 8000.0).exp(),
            fh2: (-elevation_m / 1250.0).exp(),
        })
    }
}

/// Clear-sky GHI given a zenith angle directly; returns 0 at or past the
/// horizon.
pub fn ghi_from_zenith(z_deg: f64, doy: u32, params: &ClearSkyParams) -> f64 {
    ghi_from_zenith_with(z_deg, doy, params, AirMassModel::Secant)
}

pub fn ghi_from_zenith_with(
    z_deg: f64,
    doy: u32,
    params: &ClearSkyParams,
    model: AirMassModel,
) -> f64 {
    let Ok(am) = airmass_with(z_deg, model) else {
        return 0.0;
    };
    let i0 = extraterrestrial(doy);
    let tl = params.linke_turbidity;
    let ghi = params.cg1
        * i0
        * z_deg.to_radians().cos()
        * (-params.cg2 * am * (params.fh1 + params.fh2 * (tl - 1.0))).exp()
        * (0.01 * am.powf(1.8)).exp();
    ghi.max(0.0)
}

/// Clear-sky global horizontal irradiance at (lat, lon, t), W/m².
pub fn ineichen_perez(
    lat_deg: f64,
    lon_deg: f64,
    t: TimeStamp,
    elevation_m: f64,
    linke_turbidity: f64,
) -> Result<f64> {
    let pos = solar_zenith(lat_deg, lon_deg, t)?;
    let params = ClearSkyParams::new(elevation_m, linke_turbidity)?;
    Ok(ghi_from_zenith(pos.zenith_deg, t.day_of_year(), &params))
}

/// Per-cell inputs for gridded clear-sky evaluation.
#[derive(Debug, Clone)]
pub enum CellInput {
    Constant(f64),
    PerCell(Array2<f32>),
}

impl CellInput {
    fn at(&self, i: usize, j: usize) -> f64 {
        match self {
            CellInput::Constant(c) => *c,
            CellInput::PerCell(a) => a[[i, j]] as f64,
        }
    }

    fn check_grid(&self, grid: &GridSpec, what: &str) -> Result<()> {
        if let CellInput::PerCell(a) = self {
            if a.dim() != grid.shape() {
                return Err(Error::Shape(format!(
                    "{what} field {:?} does not match grid {:?}",
                    a.dim(),
                    grid.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Hourly clear-sky GHI stack starting at `t0` (inclusive): field `t` holds
/// the model evaluated at `t0 + t` hours at every cell.
///
/// Each cell is the same scalar evaluation as [`ineichen_perez`]; rows are
/// computed in parallel and the result is independent of the partitioning.
pub fn clearsky_stack(
    grid: &GridSpec,
    t0: TimeStamp,
    horizon_hours: usize,
    elevation: &CellInput,
    turbidity: &CellInput,
) -> Result<FieldStack> {
    if horizon_hours == 0 {
        return Err(Error::Config("horizon must be at least 1 hour".into()));
    }
    elevation.check_grid(grid, "elevation")?;
    turbidity.check_grid(grid, "turbidity")?;

    let fields = (0..horizon_hours)
        .map(|h| {
            let t = t0.add_hours(h as i64);
            let day = SolarDayTerms::new(t);
            let doy = t.day_of_year();
            let mut values = Array2::<f32>::zeros(grid.shape());
            let n_lon = grid.n_lon;
            values
                .as_slice_mut()
                .expect("freshly allocated array is contiguous")
                .par_chunks_mut(n_lon)
                .enumerate()
                .for_each(|(i, row)| {
                    let lat = grid.lat_min + i as f64 * grid.res;
                    for (j, v) in row.iter_mut().enumerate() {
                        let lon = grid.lon_min + j as f64 * grid.res;
                        let params = ClearSkyParams::new(elevation.at(i, j), turbidity.at(i, j))
                            .expect("validated inputs");
                        let z = day.position(lat, lon).zenith_deg;
                        *v = ghi_from_zenith(z, doy, &params) as f32;
                    }
                });
            Field::new(*grid, t, values, Units::WattsPerM2, None)
        })
        .collect::<Result<Vec<_>>>()?;
    FieldStack::new(fields)
}
