//! Regular latitude/longitude grid geometry, time handling, gridded fields,
//! and bilinear regridding between resolutions.
//!
//! Grids are point lattices: cell (i, j) sits at
//! `(lat_min + i*res, lon_min + j*res)`, with the last point landing exactly
//! on `(lat_max, lon_max)`. Longitudes are signed east-longitude, so CONUS
//! longitudes are negative.

mod regrid;
pub mod ssgf;
mod time;

pub use regrid::bilinear_regrid;
pub use time::TimeStamp;

use crate::error::{Error, Result};
use ndarray::Array2;

/// Geometry of a regular lat/lon grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub n_lat: usize,
    pub n_lon: usize,
    /// Degrees per cell along both axes.
    pub res: f64,
}

/// Builds a grid from its bounds and resolution.
///
/// Both spans must be integral multiples of `res` (within 1e-6 of a whole
/// number of cells); otherwise the bounds cannot all lie on the lattice.
pub fn make_grid(
    lat_min: f64,
    lat_max: f64,
    lon_min: f64,
    lon_max: f64,
    res: f64,
) -> Result<GridSpec> {
    if !(res > 0.0) {
        return Err(Error::Grid(format!("resolution must be positive, got {res}")));
    }
    if lat_max < lat_min || lon_max < lon_min {
        return Err(Error::Grid(format!(
            "bounds out of order: lat {lat_min}..{lat_max}, lon {lon_min}..{lon_max}"
        )));
    }
    let cells = |span: f64, axis: &str| -> Result<usize> {
        let n = span / res;
        if (n - n.round()).abs() > 1e-6 {
            return Err(Error::Grid(format!(
                "{axis} span {span} is not an integral multiple of res {res} \
                 ({n} cells); adjust bounds or resolution"
            )));
        }
        Ok(n.round() as usize + 1)
    };
    let n_lat = cells(lat_max - lat_min, "latitude")?;
    let n_lon = cells(lon_max - lon_min, "longitude")?;
    Ok(GridSpec { lat_min, lat_max, lon_min, lon_max, n_lat, n_lon, res })
}

impl GridSpec {
    /// The CONUS working grid: 26.00°N-49.95°N, 126.00°W-68.55°W at 0.05°.
    pub fn conus() -> GridSpec {
        make_grid(26.00, 49.95, -126.00, -68.55, 0.05).expect("CONUS bounds are lattice-exact")
    }

    /// Coordinates of cell (i, j) in degrees.
    pub fn cell_coords(&self, i: usize, j: usize) -> Result<(f64, f64)> {
        if i >= self.n_lat || j >= self.n_lon {
            return Err(Error::Grid(format!(
                "index ({i}, {j}) out of range for {}x{} grid",
                self.n_lat, self.n_lon
            )));
        }
        Ok((self.lat_min + i as f64 * self.res, self.lon_min + j as f64 * self.res))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_lat, self.n_lon)
    }

    pub fn n_cells(&self) -> usize {
        self.n_lat * self.n_lon
    }

    /// True when the two specs describe the same lattice to within 1e-9°.
    pub fn approx_eq(&self, other: &GridSpec) -> bool {
        self.n_lat == other.n_lat
            && self.n_lon == other.n_lon
            && (self.lat_min - other.lat_min).abs() < 1e-9
            && (self.lon_min - other.lon_min).abs() < 1e-9
            && (self.res - other.res).abs() < 1e-9
    }
}

/// Physical units of a gridded field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Units {
    Raw,
    Percent,
    WattsPerM2,
}

impl Units {
    pub fn code(self) -> u8 {
        match self {
            Units::Raw => 0,
            Units::Percent => 1,
            Units::WattsPerM2 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Units> {
        match code {
            0 => Ok(Units::Raw),
            1 => Ok(Units::Percent),
            2 => Ok(Units::WattsPerM2),
            other => Err(Error::Format(format!("unknown units code {other}"))),
        }
    }
}

/// A time-stamped 2-D scalar field on a grid.
#[derive(Debug, Clone)]
pub struct Field {
    pub grid: GridSpec,
    pub time: TimeStamp,
    pub values: Array2<f32>,
    pub units: Units,
    /// `true` marks a missing value. `None` means everything is valid.
    pub mask: Option<Array2<bool>>,
}

impl Field {
    pub fn new(
        grid: GridSpec,
        time: TimeStamp,
        values: Array2<f32>,
        units: Units,
        mask: Option<Array2<bool>>,
    ) -> Result<Field> {
        if values.dim() != grid.shape() {
            return Err(Error::Shape(format!(
                "field values {:?} do not match grid {:?}",
                values.dim(),
                grid.shape()
            )));
        }
        if let Some(m) = &mask {
            if m.dim() != grid.shape() {
                return Err(Error::Shape(format!(
                    "mask {:?} does not match grid {:?}",
                    m.dim(),
                    grid.shape()
                )));
            }
        }
        if units == Units::Percent {
            let valid = |i: usize, j: usize| mask.as_ref().is_none_or(|m| !m[[i, j]]);
            for ((i, j), &v) in values.indexed_iter() {
                if valid(i, j) && !(0.0..=100.0).contains(&v) {
                    return Err(Error::Shape(format!(
                        "percent field value {v} at ({i}, {j}) outside [0, 100]"
                    )));
                }
            }
        }
        Ok(Field { grid, time, values, units, mask })
    }

    /// Constant-valued field with no mask.
    pub fn constant(grid: GridSpec, time: TimeStamp, value: f32, units: Units) -> Field {
        Field {
            grid,
            time,
            values: Array2::from_elem(grid.shape(), value),
            units,
            mask: None,
        }
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m[[i, j]])
    }
}

/// An hourly sequence of fields on one grid.
#[derive(Debug, Clone)]
pub struct FieldStack {
    fields: Vec<Field>,
}

impl FieldStack {
    /// Validates the shared grid and strict 1-hour spacing.
    pub fn new(fields: Vec<Field>) -> Result<FieldStack> {
        if fields.is_empty() {
            return Err(Error::Shape("field stack may not be empty".into()));
        }
        let grid = fields[0].grid;
        for (k, f) in fields.iter().enumerate() {
            if !f.grid.approx_eq(&grid) {
                return Err(Error::Grid(format!("field {k} is on a different grid")));
            }
            if k > 0 {
                let dt = f.time.epoch_seconds() - fields[k - 1].time.epoch_seconds();
                if dt != 3600 {
                    return Err(Error::Time(format!(
                        "fields {} and {k} are {dt} s apart; stacks are strictly hourly",
                        k - 1
                    )));
                }
            }
        }
        Ok(FieldStack { fields })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.fields[0].grid
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn field(&self, t: usize) -> &Field {
        &self.fields[t]
    }

    pub fn start_time(&self) -> TimeStamp {
        self.fields[0].time
    }

    pub fn times(&self) -> Vec<TimeStamp> {
        self.fields.iter().map(|f| f.time).collect()
    }
}

/// Day of year, 1-366.
pub fn day_of_year(t: TimeStamp) -> u32 {
    t.day_of_year()
}
