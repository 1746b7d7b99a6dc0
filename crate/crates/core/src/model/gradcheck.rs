//! Finite-difference verification of the analytic gradients, run in f64 on a
//! freshly built graph per evaluation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::graph::{inject_params, ParamVars};
use super::params::ModelParams;
use super::ModelError;
use framequal_tape::fd::rel_err;
use framequal_tape::{Tape, Var};

const FD_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("model error: {0}")]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_checked: usize,
    pub worst_tensor: String,
    pub worst_coord: (usize, usize),
}

/// Compares the tape gradient of `build_loss` against central differences on
/// `n_coords` randomly chosen parameter coordinates (resampled per tensor
/// proportionally to its size). The closure must rebuild the loss from
/// scratch; it is invoked 2 * n_coords + 1 times.
pub fn gradient_check<F>(
    params: &ModelParams<f64>,
    build_loss: F,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &ParamVars) -> Result<Var, ModelError>,
{
    let mut tape: Tape<f64> = Tape::new();
    let pv = inject_params(&mut tape, params);
    let loss = build_loss(&mut tape, &pv)?;
    let loss_val = tape.scalar_value(loss);
    if !loss_val.is_finite() {
        return Err(GradCheckError::NonFiniteLoss);
    }
    let grads = tape.backward_scalar(loss);
    let leaf_vars = pv.ordered();
    let tensors = params.tensors();
    debug_assert_eq!(leaf_vars.len(), tensors.len());

    let sizes: Vec<usize> = tensors.iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();

    let eval = |p: &ModelParams<f64>| -> Result<f64, GradCheckError> {
        let mut tape: Tape<f64> = Tape::new();
        let pv = inject_params(&mut tape, p);
        let loss = build_loss(&mut tape, &pv)?;
        let v = tape.scalar_value(loss);
        if !v.is_finite() {
            return Err(GradCheckError::NonFiniteLoss);
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        n_checked: 0,
        worst_tensor: String::new(),
        worst_coord: (0, 0),
    };
    for _ in 0..n_coords {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let cols = tensors[which].1.ncols();
        let (i, j) = (flat / cols, flat % cols);

        let analytic = grads
            .get(leaf_vars[which])
            .map_or(0.0, |g| g[(i, j)]);

        let base = tensors[which].1[(i, j)];
        let mut plus = params.clone();
        plus.tensors_mut()[which].1[(i, j)] = base + FD_STEP;
        let mut minus = params.clone();
        minus.tensors_mut()[which].1[(i, j)] = base - FD_STEP;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);

        let err = rel_err(analytic, numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_tensor = tensors[which].0.clone();
            report.worst_coord = (i, j);
        }
        report.n_checked += 1;
    }
    Ok(report)
}
