//! Central finite-difference checks of each loss term through the full model.

use ndarray::ArrayView2;
use rand::Rng;
use serde::Serialize;

use crate::config::UaulConfig;
use crate::model::{ModelError, Seq2Seq};
use crate::objectives::{term_loss_grad, LossTerm};
use crate::sampler::substream;
use crate::tape::{Gradients, ParamId, TapeError};
use crate::trainer::{forward, sample_sets, Encoded};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Value of `term` for one sequence. Dropout masks come from `mask_seed`, so
/// repeated calls see the same masks.
pub fn term_value(model: &Seq2Seq, ex: &Encoded, cfg: &UaulConfig, term: LossTerm, mask_seed: u64) -> Result<f64, ModelError> {
    let mut rng = substream(mask_seed, &[]);
    let (tape, probs) = forward(model, ex, cfg, &mut rng)?;
    let dists: Vec<ArrayView2<f64>> = probs.iter().map(|&p| tape.value(p)).collect();
    let samples = sample_sets(&dists, &ex.gold, cfg.negatives);
    Ok(term_loss_grad(term, &dists, &ex.gold, &samples, &cfg.mul, cfg.me_normalize).0)
}

/// Value of `term` and its gradient with respect to every parameter.
pub fn term_grads(model: &Seq2Seq, ex: &Encoded, cfg: &UaulConfig, term: LossTerm, mask_seed: u64) -> Result<(f64, Gradients), GradCheckError> {
    let mut rng = substream(mask_seed, &[]);
    let (tape, probs) = forward(model, ex, cfg, &mut rng)?;
    let dists: Vec<ArrayView2<f64>> = probs.iter().map(|&p| tape.value(p)).collect();
    let samples = sample_sets(&dists, &ex.gold, cfg.negatives);
    let (value, grads) = term_loss_grad(term, &dists, &ex.gold, &samples, &cfg.mul, cfg.me_normalize);
    let seeds = probs.into_iter().zip(grads).collect();
    Ok((value, tape.backward_with(seeds)?))
}

/// Compares analytic gradients with `(L(θ+h) - L(θ-h)) / 2h` at `probes`
/// parameter entries chosen uniformly at random (tensor first, then entry).
pub fn check_term(
    model: &Seq2Seq,
    ex: &Encoded,
    cfg: &UaulConfig,
    term: LossTerm,
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<Vec<Probe>, GradCheckError> {
    let mask_seed = seed ^ 0x6d61_736b;
    let (_, grads) = term_grads(model, ex, cfg, term, mask_seed)?;
    let mut rng = substream(seed, &[0x9c]);
    let n_params = model.params().len();
    let mut out = Vec::with_capacity(probes);
    let mut work = model.clone();
    for _ in 0..probes {
        let id = ParamId(rng.random_range(0..n_params));
        let (rows, cols) = model.params().get(id).dim();
        let (row, col) = (rng.random_range(0..rows), rng.random_range(0..cols));
        let orig = model.params().get(id)[[row, col]];
        work.params_mut().get_mut(id)[[row, col]] = orig + step;
        let plus = term_value(&work, ex, cfg, term, mask_seed)?;
        work.params_mut().get_mut(id)[[row, col]] = orig - step;
        let minus = term_value(&work, ex, cfg, term, mask_seed)?;
        work.params_mut().get_mut(id)[[row, col]] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads.get(id)[[row, col]];
        out.push(Probe {
            param: model.params().name(id).to_string(),
            row,
            col,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|)`, with both-zero (below 1e-10) counted as exact.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
