//! Joint two-stage training with Adam.
//!
//! Supervision lands on both the cloud block's intermediate output (percent
//! MSE, scaled by 100²) and the final irradiance output (MSE scaled by the
//! clear-sky scale squared), so gradients reach both blocks even when one
//! loss weight is zero.

use super::{NormStats, SynthDataset, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{forward, init_params, Checkpoint, ModelConfig, ModelVars, ParamStore};
use crate::tensor::{Tape, Var};
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub loss_history: Vec<f64>,
    /// Initialization hours (index of the last input hour) reserved for
    /// validation.
    pub val_inits: Vec<usize>,
    pub train_inits: Vec<usize>,
    pub norm: NormStats,
}

/// FNV-1a over the f64 bit patterns of the loss history.
fn loss_digest(history: &[f64]) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &x in history {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Valid forecast-initialization hours and their day-wise train/val split.
fn split_inits(ds: &SynthDataset, model_cfg: &ModelConfig, val_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_hours = ds.n_hours();
    let need = model_cfg.input_hours + model_cfg.horizon_hours;
    if n_hours < need {
        return Err(Error::Train(format!(
            "dataset has {n_hours} hours; one sample needs {need}"
        )));
    }
    let first = model_cfg.input_hours - 1;
    let last = n_hours - model_cfg.horizon_hours - 1;
    let n_days = ds.cfg.n_days;
    let val_days = ((n_days as f64) * val_fraction).round() as usize;
    let train_day_end = n_days - val_days; // validation takes the last days
    let mut train = Vec::new();
    let mut val = Vec::new();
    for t0 in first..=last {
        let day = t0 / 24;
        // A sample leaks into validation if any target hour crosses the
        // boundary; assign by the day of the last target hour as well.
        let end_day = (t0 + model_cfg.horizon_hours) / 24;
        if end_day < train_day_end {
            train.push(t0);
        } else if day >= train_day_end {
            val.push(t0);
        }
        // Samples straddling the boundary are dropped.
    }
    if train.is_empty() {
        return Err(Error::Train("no training samples after the day-wise split".into()));
    }
    Ok((train, val))
}

struct SampleTensors {
    input: ArrayD<f32>,
    clearsky_norm: ArrayD<f32>,
    cloud_truth: ArrayD<f32>,
    irr_truth_norm: ArrayD<f32>,
}

fn sample_tensors(
    ds: &SynthDataset,
    norm: &NormStats,
    model_cfg: &ModelConfig,
    t0: usize,
) -> SampleTensors {
    let frames: Vec<&ndarray::Array3<f32>> =
        (t0 + 1 - model_cfg.input_hours..=t0).map(|t| &ds.sat[t]).collect();
    let input = norm.build_input(&frames).into_dyn();

    let (h, w) = ds.grid().shape();
    let k = model_cfg.horizon_hours;
    let mut cs = ndarray::Array3::<f32>::zeros((k, h, w));
    let mut cloud = ndarray::Array3::<f32>::zeros((k, h, w));
    let mut irr = ndarray::Array3::<f32>::zeros((k, h, w));
    for lead in 0..k {
        let t = t0 + 1 + lead;
        cs.index_axis_mut(ndarray::Axis(0), lead).assign(&norm.apply_irr(&ds.clearsky[t]));
        cloud.index_axis_mut(ndarray::Axis(0), lead).assign(&ds.cloud[t]);
        irr.index_axis_mut(ndarray::Axis(0), lead).assign(&norm.apply_irr(&ds.irr[t]));
    }
    SampleTensors {
        input: input.into_dyn(),
        clearsky_norm: cs.into_dyn(),
        cloud_truth: cloud.into_dyn(),
        irr_truth_norm: irr.into_dyn(),
    }
}

/// Builds the per-sample loss graph and returns (loss var, scalar value).
fn sample_loss(
    tape: &mut Tape<f32>,
    vars: &ModelVars,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    sample: &SampleTensors,
) -> Result<Var> {
    let sat = tape.leaf(sample.input.clone());
    let cs = tape.leaf(sample.clearsky_norm.clone());
    let (cloud_pct, irr_norm) = forward(tape, vars, model_cfg, sat, cs)?;

    let cloud_truth = tape.leaf(sample.cloud_truth.clone());
    let cloud_diff = tape.sub(cloud_pct, cloud_truth)?;
    let cloud_diff = tape.scale(cloud_diff, 0.01); // percent scale
    let cloud_sq = tape.mul(cloud_diff, cloud_diff)?;
    let cloud_mse = tape.mean_all(cloud_sq);

    let irr_truth = tape.leaf(sample.irr_truth_norm.clone());
    let irr_diff = tape.sub(irr_norm, irr_truth)?;
    let irr_sq = tape.mul(irr_diff, irr_diff)?;
    let irr_mse = tape.mean_all(irr_sq);

    let wc = tape.scale(cloud_mse, train_cfg.lambda_cloud as f32);
    let wi = tape.scale(irr_mse, train_cfg.lambda_irr as f32);
    tape.add(wc, wi)
}

/// Trains a fresh model on the dataset. Deterministic for fixed seeds.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    ds: &SynthDataset,
) -> Result<TrainResult> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if ds.cfg.band_gains.len() != model_cfg.input_channels {
        return Err(Error::Train(format!(
            "dataset has {} satellite bands, model expects {}",
            ds.cfg.band_gains.len(),
            model_cfg.input_channels
        )));
    }
    let (train_inits, val_inits) = split_inits(ds, model_cfg, train_cfg.val_fraction)?;
    // Fit normalization on training days only.
    let train_hour_end = (train_inits.last().unwrap() + model_cfg.horizon_hours + 1)
        .min(ds.n_hours());
    let norm = NormStats::fit_range(ds, 0, train_hour_end)?;

    let mut params: ParamStore<f32> = init_params(model_cfg, train_cfg.seed);
    let mut adam_m: Vec<ArrayD<f32>> =
        params.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect();
    let mut adam_v: Vec<ArrayD<f32>> =
        params.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x5eed_ba7c_4e55_u64);
    let mut history = Vec::with_capacity(train_cfg.steps);

    for step in 0..train_cfg.steps {
        let mut grad_acc: Vec<ArrayD<f32>> =
            params.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect();
        let mut loss_acc = 0.0f64;

        for _ in 0..train_cfg.batch_size {
            let t0 = train_inits[rng.random_range(0..train_inits.len())];
            let sample = sample_tensors(ds, &norm, model_cfg, t0);
            let mut tape = Tape::<f32>::new();
            let vars = ModelVars::register(&mut tape, &params);
            let loss = sample_loss(&mut tape, &vars, model_cfg, train_cfg, &sample)?;
            let loss_val = tape.value(loss)[[]] as f64;
            if !loss_val.is_finite() {
                return Err(Error::Train(format!("non-finite loss at step {step}")));
            }
            loss_acc += loss_val;
            let grads = tape.backward(loss)?;
            for (slot, (name, _)) in grad_acc.iter_mut().zip(params.iter()) {
                if let Some(g) = grads.get(vars.get(name)?) {
                    *slot += g;
                }
            }
        }

        let b = train_cfg.batch_size as f32;
        grad_acc.iter_mut().for_each(|g| g.mapv_inplace(|x| x / b));
        let loss_mean = loss_acc / train_cfg.batch_size as f64;
        history.push(loss_mean);

        // Global-norm clipping.
        let norm2: f64 = grad_acc
            .iter()
            .map(|g| g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>())
            .sum();
        let gnorm = norm2.sqrt();
        if gnorm > train_cfg.clip_norm {
            let s = (train_cfg.clip_norm / gnorm) as f32;
            grad_acc.iter_mut().for_each(|g| g.mapv_inplace(|x| x * s));
        }

        // Adam.
        let t = (step + 1) as f64;
        let (b1, b2) = (train_cfg.beta1 as f32, train_cfg.beta2 as f32);
        let bias1 = (1.0 - train_cfg.beta1.powf(t)) as f32;
        let bias2 = (1.0 - train_cfg.beta2.powf(t)) as f32;
        let lr = train_cfg.learning_rate as f32;
        let eps = train_cfg.adam_eps as f32;
        for (((m, v), g), (_, p)) in adam_m
            .iter_mut()
            .zip(adam_v.iter_mut())
            .zip(grad_acc.iter())
            .zip(params.iter_mut())
        {
            ndarray::Zip::from(m).and(v).and(g).and(p).for_each(|m, v, &g, p| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bias1;
                let vhat = *v / bias2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }

    let mut ckpt = Checkpoint::new(model_cfg.clone(), params)?;
    ckpt.meta.insert("meta.steps".into(), train_cfg.steps.to_string());
    ckpt.meta.insert("meta.seed".into(), train_cfg.seed.to_string());
    ckpt.meta.insert("meta.loss_digest".into(), loss_digest(&history));
    for (k, v) in norm.to_meta() {
        ckpt.meta.insert(k, v);
    }
    Ok(TrainResult { checkpoint: ckpt, loss_history: history, val_inits, train_inits, norm })
}
