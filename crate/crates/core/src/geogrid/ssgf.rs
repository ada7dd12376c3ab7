//! SSGF: a small little-endian binary container for gridded fields.
//!
//! Layout:
//!
//! ```text
//! magic           b"SSGF"
//! version         u16          (currently 1)
//! dtype           u8           (1 = 32-bit real)
//! rank            u8           (2 = single field, 3 = hourly stack)
//! dims            rank x u32   (stack: [t, n_lat, n_lon]; field: [n_lat, n_lon])
//! lat_min..lon_max  4 x f64
//! res             f64
//! n_times         u32
//! times           n_times x i64  (Unix epoch seconds)
//! units tag       u8
//! mask present    u8
//! payload         f32, row-major, time-major
//! mask            u8 per element if present (1 = missing)
//! ```

use super::{Field, FieldStack, GridSpec, TimeStamp, Units};
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SSGF";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;

pub fn write_stack(path: &Path, stack: &FieldStack) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fields(&mut w, stack.fields(), 3)
}

pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fields(&mut w, std::slice::from_ref(field), 2)
}

fn write_fields<W: Write>(w: &mut W, fields: &[Field], rank: u8) -> Result<()> {
    let grid = fields[0].grid;
    let units = fields[0].units;
    let any_mask = fields.iter().any(|f| f.mask.is_some());

    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u8(DTYPE_F32)?;
    w.write_u8(rank)?;
    if rank == 3 {
        w.write_u32::<LittleEndian>(fields.len() as u32)?;
    }
    w.write_u32::<LittleEndian>(grid.n_lat as u32)?;
    w.write_u32::<LittleEndian>(grid.n_lon as u32)?;
    for b in [grid.lat_min, grid.lat_max, grid.lon_min, grid.lon_max, grid.res] {
        w.write_f64::<LittleEndian>(b)?;
    }
    w.write_u32::<LittleEndian>(fields.len() as u32)?;
    for f in fields {
        w.write_i64::<LittleEndian>(f.time.epoch_seconds())?;
    }
    w.write_u8(units.code())?;
    w.write_u8(any_mask as u8)?;
    for f in fields {
        for &v in f.values.iter() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    if any_mask {
        for f in fields {
            match &f.mask {
                Some(m) => {
                    for &b in m.iter() {
                        w.write_u8(b as u8)?;
                    }
                }
                None => {
                    for _ in 0..f.values.len() {
                        w.write_u8(0)?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Reads any SSGF file as a list of fields (rank 2 yields one).
pub fn read_fields(path: &Path) -> Result<Vec<Field>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:?}, not an SSGF file",
            path.display()
        )));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported SSGF version {version}")));
    }
    let dtype = r.read_u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let rank = r.read_u8()?;
    let n_fields = match rank {
        2 => 1,
        3 => r.read_u32::<LittleEndian>()? as usize,
        other => return Err(Error::Format(format!("unsupported rank {other}"))),
    };
    let n_lat = r.read_u32::<LittleEndian>()? as usize;
    let n_lon = r.read_u32::<LittleEndian>()? as usize;
    let lat_min = r.read_f64::<LittleEndian>()?;
    let lat_max = r.read_f64::<LittleEndian>()?;
    let lon_min = r.read_f64::<LittleEndian>()?;
    let lon_max = r.read_f64::<LittleEndian>()?;
    let res = r.read_f64::<LittleEndian>()?;
    let grid = GridSpec { lat_min, lat_max, lon_min, lon_max, n_lat, n_lon, res };

    let n_times = r.read_u32::<LittleEndian>()? as usize;
    if n_times != n_fields {
        return Err(Error::Format(format!(
            "timestamp count {n_times} does not match field count {n_fields}"
        )));
    }
    let mut times = Vec::with_capacity(n_times);
    for _ in 0..n_times {
        times.push(TimeStamp::from_epoch_seconds(r.read_i64::<LittleEndian>()?));
    }
    let units = Units::from_code(r.read_u8()?)?;
    let has_mask = r.read_u8()? != 0;

    let cells = n_lat * n_lon;
    let mut fields = Vec::with_capacity(n_fields);
    let mut raw = vec![0f32; cells];
    for &time in &times {
        r.read_f32_into::<LittleEndian>(&mut raw)?;
        let values = Array2::from_shape_vec((n_lat, n_lon), raw.clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        fields.push(Field { grid, time, values, units, mask: None });
    }
    if has_mask {
        let mut mbuf = vec![0u8; cells];
        for f in &mut fields {
            r.read_exact(&mut mbuf)?;
            let m = Array2::from_shape_vec((n_lat, n_lon), mbuf.iter().map(|&b| b != 0).collect())
                .map_err(|e| Error::Format(e.to_string()))?;
            if m.iter().any(|&b| b) {
                f.mask = Some(m);
            }
        }
    }
    Ok(fields)
}

pub fn read_stack(path: &Path) -> Result<FieldStack> {
    FieldStack::new(read_fields(path)?)
}

pub fn read_field(path: &Path) -> Result<Field> {
    let mut fields = read_fields(path)?;
    if fields.len() != 1 {
        return Err(Error::Format(format!(
            "{}: expected a single field, found {}",
            path.display(),
            fields.len()
        )));
    }
    Ok(fields.remove(0))
}
