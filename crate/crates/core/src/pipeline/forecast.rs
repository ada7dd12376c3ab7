//! Forecast production from a checkpoint, plus the two reference baselines.

use super::NormStats;
use crate::clearsky::{clearsky_stack, CellInput};
use crate::error::{Error, Result};
use crate::geogrid::{Field, FieldStack, TimeStamp, Units};
use crate::model::{forward, Checkpoint, ModelVars};
use crate::tensor::Tape;
use ndarray::{Array2, Array3};
use std::time::Instant;

/// A 24-hour forecast pair with provenance.
#[derive(Debug, Clone)]
pub struct ForecastSet {
    /// Cloud cover, percent, hourly from t0+1.
    pub cloud: FieldStack,
    /// Irradiance, W/m², hourly from t0+1.
    pub irr: FieldStack,
    pub init_time: TimeStamp,
    pub inference_seconds: f64,
}

/// Runs the model: gathers the satellite history ending at `t0`, computes
/// the clear-sky stack for t0+1..t0+horizon internally, normalizes, runs the
/// forward pass, and de-normalizes the outputs.
///
/// `sat_history` holds one hourly stack per satellite band; each must cover
/// `t0 - input_hours + 1 ..= t0`.
pub fn forecast(
    ckpt: &Checkpoint,
    sat_history: &[FieldStack],
    t0: TimeStamp,
    elevation: &CellInput,
    turbidity: &CellInput,
) -> Result<ForecastSet> {
    let cfg = &ckpt.config;
    if sat_history.len() != cfg.input_channels {
        return Err(Error::Config(format!(
            "expected {} satellite band stacks, got {}",
            cfg.input_channels,
            sat_history.len()
        )));
    }
    let grid = *sat_history[0].grid();
    for (b, stack) in sat_history.iter().enumerate() {
        if !stack.grid().approx_eq(&grid) {
            return Err(Error::Grid(format!("band {} is on a different grid", b + 1)));
        }
    }
    let norm = NormStats::from_meta(&ckpt.meta)?;

    // Collect the input window, newest frame at t0.
    let window_start = t0.add_hours(-(cfg.input_hours as i64 - 1));
    let (h, w) = grid.shape();
    let mut frames: Vec<Array3<f32>> = Vec::with_capacity(cfg.input_hours);
    for hr in 0..cfg.input_hours {
        let want = window_start.add_hours(hr as i64);
        let mut frame = Array3::<f32>::zeros((cfg.input_channels, h, w));
        for (b, stack) in sat_history.iter().enumerate() {
            let field = stack
                .fields()
                .iter()
                .find(|f| f.time == want)
                .ok_or_else(|| {
                    Error::Time(format!(
                        "satellite band {} has no frame at {want} (history gap)",
                        b + 1
                    ))
                })?;
            frame.index_axis_mut(ndarray::Axis(0), b).assign(&field.values);
        }
        frames.push(frame);
    }
    let frame_refs: Vec<&Array3<f32>> = frames.iter().collect();
    let input = norm.build_input(&frame_refs).into_dyn();

    let cs_stack = clearsky_stack(&grid, t0.add_hours(1), cfg.horizon_hours, elevation, turbidity)?;
    let mut cs_norm = Array3::<f32>::zeros((cfg.horizon_hours, h, w));
    for (lead, field) in cs_stack.fields().iter().enumerate() {
        cs_norm
            .index_axis_mut(ndarray::Axis(0), lead)
            .assign(&norm.apply_irr(&field.values));
    }

    let params = &ckpt.params;
    let started = Instant::now();
    let mut tape = Tape::<f32>::new();
    let vars = ModelVars::register(&mut tape, params);
    let sat = tape.leaf(input);
    let cs = tape.leaf(cs_norm.into_dyn());
    let (cloud_var, irr_var) = forward(&mut tape, &vars, cfg, sat, cs)?;
    let cloud_out = tape.value(cloud_var).clone();
    let irr_out = tape.value(irr_var).clone();
    let inference_seconds = started.elapsed().as_secs_f64();
    drop(tape);

    let mut cloud_fields = Vec::with_capacity(cfg.horizon_hours);
    let mut irr_fields = Vec::with_capacity(cfg.horizon_hours);
    for lead in 0..cfg.horizon_hours {
        let t = t0.add_hours(lead as i64 + 1);
        let cloud_plane: Array2<f32> = cloud_out
            .index_axis(ndarray::Axis(0), lead)
            .to_owned()
            .into_dimensionality()
            .expect("rank 2 plane");
        let irr_plane: Array2<f32> = irr_out
            .index_axis(ndarray::Axis(0), lead)
            .to_owned()
            .into_dimensionality()
            .expect("rank 2 plane");
        cloud_fields.push(Field::new(grid, t, cloud_plane, Units::Percent, None)?);
        irr_fields.push(Field::new(grid, t, norm.invert_irr(&irr_plane), Units::WattsPerM2, None)?);
    }
    Ok(ForecastSet {
        cloud: FieldStack::new(cloud_fields)?,
        irr: FieldStack::new(irr_fields)?,
        init_time: t0,
        inference_seconds,
    })
}

/// The clear-sky baseline is the clear-sky stack itself.
pub fn clearsky_baseline(cs_forecast: &FieldStack) -> FieldStack {
    cs_forecast.clone()
}

/// Smart persistence: the clear-sky index observed at t0 (irradiance over
/// clear-sky, 1.0 at night when undefined) scales the future clear-sky
/// stack; the cloud state is frozen at its t0 value.
pub fn persistence_baseline(
    irr_t0: &Field,
    clearsky_t0: &Field,
    cs_forecast: &FieldStack,
) -> Result<FieldStack> {
    let (h, w) = irr_t0.grid.shape();
    let mut index = Array2::<f32>::ones((h, w));
    for i in 0..h {
        for j in 0..w {
            let cs = clearsky_t0.values[[i, j]];
            if cs > 1.0 {
                index[[i, j]] = (irr_t0.values[[i, j]] / cs).clamp(0.0, 1.5);
            }
        }
    }
    let fields = cs_forecast
        .fields()
        .iter()
        .map(|f| {
            let scaled = &f.values * &index;
            Field::new(f.grid, f.time, scaled, Units::WattsPerM2, None)
        })
        .collect::<Result<Vec<_>>>()?;
    FieldStack::new(fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::make_grid;
    use crate::model::{init_params, Checkpoint, ModelConfig};
    use crate::pipeline::{synth_dataset, NormStats, SynthConfig};

    fn toy_setup() -> (Checkpoint, crate::pipeline::SynthDataset) {
        let mut scfg = SynthConfig::toy();
        scfg.grid = make_grid(30.0, 30.75, -100.0, -99.25, 0.25).unwrap();
        scfg.n_days = 3;
        let ds = synth_dataset(&scfg).unwrap();
        let mut mcfg = ModelConfig::tiny();
        mcfg.input_hours = 6;
        mcfg.input_channels = 4;
        mcfg.horizon_hours = 24;
        let params = init_params::<f32>(&mcfg, 3);
        let mut ckpt = Checkpoint::new(mcfg, params).unwrap();
        let norm = NormStats::fit(&ds).unwrap();
        for (k, v) in norm.to_meta() {
            ckpt.meta.insert(k, v);
        }
        (ckpt, ds)
    }

    fn band_stacks(ds: &crate::pipeline::SynthDataset) -> Vec<FieldStack> {
        (0..4)
            .map(|b| {
                let fields = (0..ds.n_hours())
                    .map(|t| {
                        Field::new(
                            *ds.grid(),
                            ds.time_at(t),
                            ds.sat[t].index_axis(ndarray::Axis(0), b).to_owned(),
                            Units::Raw,
                            None,
                        )
                        .unwrap()
                    })
                    .collect();
                FieldStack::new(fields).unwrap()
            })
            .collect()
    }

    #[test]
    fn forecast_timestamps_and_units() {
        let (ckpt, ds) = toy_setup();
        let stacks = band_stacks(&ds);
        let t0 = ds.time_at(8);
        let fc = forecast(&ckpt, &stacks, t0, &CellInput::Constant(0.0), &CellInput::Constant(3.0))
            .unwrap();
        assert_eq!(fc.cloud.len(), 24);
        assert_eq!(fc.irr.len(), 24);
        for (lead, f) in fc.irr.fields().iter().enumerate() {
            assert_eq!(f.time, t0.add_hours(lead as i64 + 1));
            assert_eq!(f.units, Units::WattsPerM2);
            assert!(f.values.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(fc.cloud.field(0).units, Units::Percent);
        assert!(fc.inference_seconds > 0.0);
    }

    #[test]
    fn history_gap_is_an_error() {
        let (ckpt, ds) = toy_setup();
        let stacks = band_stacks(&ds);
        // t0 = 3 needs hours -2..3, which do not exist.
        let err = forecast(
            &ckpt,
            &stacks,
            ds.time_at(3),
            &CellInput::Constant(0.0),
            &CellInput::Constant(3.0),
        )
        .unwrap_err();
        assert!(err.to_string().contains("gap"), "got: {err}");
    }

    #[test]
    fn forecast_deterministic() {
        let (ckpt, ds) = toy_setup();
        let stacks = band_stacks(&ds);
        let t0 = ds.time_at(10);
        let a = forecast(&ckpt, &stacks, t0, &CellInput::Constant(0.0), &CellInput::Constant(3.0))
            .unwrap();
        let b = forecast(&ckpt, &stacks, t0, &CellInput::Constant(0.0), &CellInput::Constant(3.0))
            .unwrap();
        for (fa, fb) in a.irr.fields().iter().zip(b.irr.fields()) {
            assert_eq!(fa.values, fb.values);
        }
    }

    #[test]
    fn persistence_reproduces_ratio() {
        let (_, ds) = toy_setup();
        let t0 = 12; // midday
        let irr_t0 = Field::new(
            *ds.grid(),
            ds.time_at(t0),
            ds.irr[t0].clone(),
            Units::WattsPerM2,
            None,
        )
        .unwrap();
        let cs_t0 = Field::new(
            *ds.grid(),
            ds.time_at(t0),
            ds.clearsky[t0].clone(),
            Units::WattsPerM2,
            None,
        )
        .unwrap();
        let cs_fc = FieldStack::new(
            (1..=4)
                .map(|k| {
                    Field::new(
                        *ds.grid(),
                        ds.time_at(t0 + k),
                        ds.clearsky[t0 + k].clone(),
                        Units::WattsPerM2,
                        None,
                    )
                    .unwrap()
                })
                .collect(),
        )
        .unwrap();
        let p = persistence_baseline(&irr_t0, &cs_t0, &cs_fc).unwrap();
        // Where clear-sky at t0 is strong, the scaled forecast preserves the
        // observed clear-sky index.
        let (i, j) = (1, 1);
        if cs_t0.values[[i, j]] > 50.0 {
            let idx = ds.irr[t0][[i, j]] / cs_t0.values[[i, j]];
            let got = p.field(0).values[[i, j]] / cs_fc.field(0).values[[i, j]].max(1e-6);
            assert!((idx - got).abs() < 1e-4);
        }
    }
}
