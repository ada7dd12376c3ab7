use super::{Field, GridSpec};
use crate::error::{Error, Result};
use ndarray::{Array2, Zip};

/// Index snap tolerance: destination centers this close (in index space) to a
/// source lattice line collapse onto it, so regridding a field onto its own
/// grid reproduces it bit-for-bit.
const SNAP: f64 = 1e-6;

/// Per-axis interpolation stencil: one or two source indices with convex
/// weights.
fn axis_stencil(coord: f64, origin: f64, res: f64, n: usize) -> [(usize, f64); 2] {
    let f = ((coord - origin) / res).clamp(0.0, (n - 1) as f64);
    let nearest = f.round();
    if (f - nearest).abs() < SNAP {
        return [(nearest as usize, 1.0), (nearest as usize, 0.0)];
    }
    let i0 = f.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    let d = f - i0 as f64;
    [(i0, 1.0 - d), (i1, d)]
}

/// Bilinear interpolation of `src` onto `dst_grid`.
///
/// Destination centers outside the source bounding box clamp to the nearest
/// valid source cells; if the boxes do not overlap at all, the grids are
/// disjoint and an error is returned. A destination cell is masked when any
/// contributing source corner is masked.
pub fn bilinear_regrid(src: &Field, dst_grid: &GridSpec) -> Result<Field> {
    let sg = &src.grid;
    if dst_grid.lat_min > sg.lat_max
        || dst_grid.lat_max < sg.lat_min
        || dst_grid.lon_min > sg.lon_max
        || dst_grid.lon_max < sg.lon_min
    {
        return Err(Error::Grid(format!(
            "disjoint grids: source lat {}..{} lon {}..{}, destination lat {}..{} lon {}..{}",
            sg.lat_min, sg.lat_max, sg.lon_min, sg.lon_max,
            dst_grid.lat_min, dst_grid.lat_max, dst_grid.lon_min, dst_grid.lon_max
        )));
    }

    let (n_lat, n_lon) = dst_grid.shape();
    let mut values = Array2::<f32>::zeros((n_lat, n_lon));
    let mut masked_any = false;
    let mut mask = Array2::<bool>::from_elem((n_lat, n_lon), false);

    Zip::indexed(&mut values).and(&mut mask).for_each(|(i, j), v, m| {
        let lat = dst_grid.lat_min + i as f64 * dst_grid.res;
        let lon = dst_grid.lon_min + j as f64 * dst_grid.res;
        let si = axis_stencil(lat, sg.lat_min, sg.res, sg.n_lat);
        let sj = axis_stencil(lon, sg.lon_min, sg.res, sg.n_lon);
        let mut acc = 0.0f64;
        let mut dead = false;
        for &(ii, wi) in &si {
            if wi == 0.0 {
                continue;
            }
            for &(jj, wj) in &sj {
                if wj == 0.0 {
                    continue;
                }
                if src.is_masked(ii, jj) {
                    dead = true;
                }
                acc += wi * wj * src.values[[ii, jj]] as f64;
            }
        }
        *v = acc as f32;
        *m = dead;
    });
    masked_any |= mask.iter().any(|&m| m);

    Field::new(
        *dst_grid,
        src.time,
        values,
        src.units,
        if masked_any { Some(mask) } else { None },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::{make_grid, TimeStamp, Units};
    use ndarray::Array2;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn t0() -> TimeStamp {
        TimeStamp::parse("2023-06-01T00:00:00Z").unwrap()
    }

    fn field_from_fn(g: GridSpec, f: impl Fn(f64, f64) -> f64) -> Field {
        let mut v = Array2::<f32>::zeros(g.shape());
        for ((i, j), x) in v.indexed_iter_mut() {
            let (lat, lon) = g.cell_coords(i, j).unwrap();
            *x = f(lat, lon) as f32;
        }
        Field::new(g, t0(), v, Units::Raw, None).unwrap()
    }

    #[test]
    fn constants_are_reproduced() {
        let src_g = make_grid(0.0, 7.0, 0.0, 7.0, 1.0).unwrap();
        let dst_g = make_grid(0.5, 6.0, 0.25, 6.0, 0.25).unwrap();
        let src = field_from_fn(src_g, |_, _| 4.25);
        let out = bilinear_regrid(&src, &dst_g).unwrap();
        for &v in out.values.iter() {
            assert!((v - 4.25).abs() < 1e-6);
        }
    }

    #[test]
    fn affine_fields_are_exact() {
        let src_g = make_grid(10.0, 17.0, -5.0, 2.0, 1.0).unwrap();
        let dst_g = make_grid(10.3, 16.3, -4.7, 1.3, 0.5).unwrap();
        let src = field_from_fn(src_g, |lat, lon| 3.0 * lat - 2.0 * lon + 1.0);
        let out = bilinear_regrid(&src, &dst_g).unwrap();
        for ((i, j), &v) in out.values.indexed_iter() {
            let (lat, lon) = dst_g.cell_coords(i, j).unwrap();
            let want = (3.0 * lat - 2.0 * lon + 1.0) as f32;
            assert!((v - want).abs() < 1e-5, "({i},{j}): {v} vs {want}");
        }
    }

    #[test]
    fn matches_bruteforce_four_corner_sum() {
        let src_g = make_grid(0.0, 7.0, 0.0, 7.0, 1.0).unwrap();
        let dst_g = make_grid(0.4, 6.0, 0.6, 6.2, 1.4).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        let mut v = Array2::<f32>::zeros(src_g.shape());
        v.iter_mut().for_each(|x| *x = rng.random_range(-10.0..10.0));
        let src = Field::new(src_g, t0(), v, Units::Raw, None).unwrap();
        let out = bilinear_regrid(&src, &dst_g).unwrap();

        for ((i, j), &got) in out.values.indexed_iter() {
            let (lat, lon) = dst_g.cell_coords(i, j).unwrap();
            let fi = (lat - src_g.lat_min) / src_g.res;
            let fj = (lon - src_g.lon_min) / src_g.res;
            let (i0, j0) = (fi.floor() as usize, fj.floor() as usize);
            let (di, dj) = (fi - i0 as f64, fj - j0 as f64);
            let v00 = src.values[[i0, j0]] as f64;
            let v01 = src.values[[i0, j0 + 1]] as f64;
            let v10 = src.values[[i0 + 1, j0]] as f64;
            let v11 = src.values[[i0 + 1, j0 + 1]] as f64;
            let want = v00 * (1.0 - di) * (1.0 - dj)
                + v01 * (1.0 - di) * dj
                + v10 * di * (1.0 - dj)
                + v11 * di * dj;
            assert!((got as f64 - want).abs() < 1e-5, "({i},{j}): {got} vs {want}");
        }
    }

    #[test]
    fn identity_regrid_is_bit_exact() {
        let g = make_grid(26.0, 29.15, -100.0, -96.85, 0.05).unwrap();
        let mut rng = StdRng::seed_from_u64(11);
        let mut v = Array2::<f32>::zeros(g.shape());
        v.iter_mut().for_each(|x| *x = rng.random::<f32>() * 513.7);
        let src = Field::new(g, t0(), v.clone(), Units::Raw, None).unwrap();
        let out = bilinear_regrid(&src, &g).unwrap();
        assert_eq!(out.values, v);
        assert!(out.mask.is_none());
    }

    #[test]
    fn masks_propagate_conservatively() {
        let g = make_grid(0.0, 3.0, 0.0, 3.0, 1.0).unwrap();
        let dst = make_grid(0.5, 2.5, 0.5, 2.5, 1.0).unwrap();
        let v = Array2::<f32>::ones(g.shape());
        let mut m = Array2::from_elem(g.shape(), false);
        m[[1, 1]] = true;
        let src = Field::new(g, t0(), v, Units::Raw, Some(m)).unwrap();
        let out = bilinear_regrid(&src, &dst).unwrap();
        let om = out.mask.as_ref().unwrap();
        // Destination (0,0) at (0.5,0.5) touches source (1,1): masked.
        assert!(om[[0, 0]]);
        // Destination (2,2) at (2.5,2.5) touches sources (2..3,2..3): clean.
        assert!(!om[[2, 2]]);
    }

    #[test]
    fn disjoint_grids_error() {
        let g = make_grid(0.0, 3.0, 0.0, 3.0, 1.0).unwrap();
        let far = make_grid(40.0, 43.0, 40.0, 43.0, 1.0).unwrap();
        let src = field_from_fn(g, |_, _| 1.0);
        assert!(bilinear_regrid(&src, &far).is_err());
    }

    #[test]
    fn regridded_values_bounded_by_sources() {
        let src_g = make_grid(0.0, 9.0, 0.0, 9.0, 1.0).unwrap();
        let dst_g = make_grid(0.0, 8.9, 0.0, 8.9, 0.89).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let mut v = Array2::<f32>::zeros(src_g.shape());
        v.iter_mut().for_each(|x| *x = rng.random_range(-100.0..100.0));
        let src = Field::new(src_g, t0(), v, Units::Raw, None).unwrap();
        let (lo, hi) = src
            .values
            .iter()
            .fold((f32::MAX, f32::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let out = bilinear_regrid(&src, &dst_g).unwrap();
        for &x in out.values.iter() {
            assert!(x >= lo - 1e-4 && x <= hi + 1e-4);
        }
    }
}
