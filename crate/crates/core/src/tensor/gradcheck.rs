//! Finite-difference verification of reverse-mode gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use ndarray::ArrayD;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Cap on probed coordinates per input; `None` sweeps every coordinate.
    /// Large graphs (full model layers) subsample deterministically.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-4, max_coords_per_input: None, seed: 0 }
    }
}

/// Compares reverse-mode gradients of a scalar-valued graph against central
/// finite differences `(f(x+εe) - f(x-εe)) / 2ε` and returns the worst
/// relative error, with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// `build` must construct the same graph for any values of its inputs; it is
/// re-invoked for every probe. Meant to run in `f64`.
pub fn grad_check<F>(build: F, inputs: &[ArrayD<f64>], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |points: &[ArrayD<f64>]| -> Result<(f64, Option<Vec<ArrayD<f64>>>)> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = points.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Shape(format!(
                "grad_check output must be scalar, got {:?}",
                tape.shape(out)
            )));
        }
        let y = tape.value(out).iter().next().copied().expect("scalar");
        if !y.is_finite() {
            return Err(Error::Train("non-finite value in grad_check forward".into()));
        }
        Ok((y, None))
    };

    // Analytic gradients once.
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Shape(format!(
            "grad_check output must be scalar, got {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()))
        })
        .collect();
    drop(tape);

    let mut rng = StdRng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, x) in inputs.iter().enumerate() {
        let n = x.len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(cap) if cap < n => {
                let mut picked: Vec<usize> = (0..cap).map(|_| rng.random_range(0..n)).collect();
                picked.sort_unstable();
                picked.dedup();
                picked
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let base = *x
                .as_slice()
                .map(|s| &s[c])
                .expect("standard layout input");
            probe[which].as_slice_mut().expect("standard layout")[c] = base + opts.eps;
            let (plus, _) = eval(&probe)?;
            probe[which].as_slice_mut().expect("standard layout")[c] = base - opts.eps;
            let (minus, _) = eval(&probe)?;
            probe[which].as_slice_mut().expect("standard layout")[c] = base;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let exact = analytic[which].as_slice().expect("standard layout")[c];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
