use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::{em_fit, ConditionalModel, EmConfig, MixtureModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionCriterion {
    Mse,
    Mae,
}

impl fmt::Display for SelectionCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionCriterion::Mse => "mse",
            SelectionCriterion::Mae => "mae",
        })
    }
}

impl FromStr for SelectionCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(SelectionCriterion::Mse),
            "mae" => Ok(SelectionCriterion::Mae),
            other => Err(Error::InvalidArgument(format!("unknown selection criterion `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub em: EmConfig,
    /// Criterion used to compare component counts on the validation split.
    pub criterion: SelectionCriterion,
    /// A smaller component count is kept when its mean validation loss
    /// exceeds the best candidate's by at most this many standard errors of
    /// the paired per-row loss difference. 0 keeps the plain minimizer.
    pub tolerance_se: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            em: EmConfig::default(),
            criterion: SelectionCriterion::Mse,
            tolerance_se: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CandidateScore {
    pub n_components: usize,
    /// Components left after fitting (fewer when the fit degenerated).
    pub fitted_components: Option<usize>,
    pub validation_mse: Option<f64>,
    pub validation_mae: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub model: MixtureModel,
    pub n_components: usize,
    pub candidates: Vec<CandidateScore>,
}

/// Fits every candidate component count on `train` and keeps the one whose
/// conditional prediction of the target scores best on `val`.
///
/// Restarts within a candidate are ranked by training MSE (inside
/// [`em_fit`]); candidates are ranked by the configured criterion. The
/// smallest count within `tolerance_se` paired standard errors of the best
/// score is returned, so exact ties go to the smaller count.
pub fn select_model(
    train: &[f64],
    val: &[f64],
    dim: usize,
    candidates: &[usize],
    cfg: &SelectionConfig,
    seed: u64,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("no component-count candidates"));
    }
    if val.is_empty() {
        return Err(Error::EmptyInput("validation split is empty"));
    }
    if !(cfg.tolerance_se >= 0.0 && cfg.tolerance_se.is_finite()) {
        return Err(Error::InvalidArgument(format!("tolerance_se must be >= 0, got {}", cfg.tolerance_se)));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();

    type Fitted = (MixtureModel, f64, f64, Vec<f64>);
    let fits: Vec<(usize, Result<Fitted>)> = sorted
        .par_iter()
        .map(|&j| {
            let res = em_fit(train, dim, j, &cfg.em, candidate_seed(seed, j)).and_then(|fit| {
                let residuals = prediction_residuals(&fit.model, val, dim)?;
                let n = residuals.len() as f64;
                let mse = residuals.iter().map(|e| e * e).sum::<f64>() / n;
                let mae = residuals.iter().map(|e| e.abs()).sum::<f64>() / n;
                let losses = match cfg.criterion {
                    SelectionCriterion::Mse => residuals.iter().map(|e| e * e).collect(),
                    SelectionCriterion::Mae => residuals.iter().map(|e| e.abs()).collect(),
                };
                Ok((fit.model, mse, mae, losses))
            });
            (j, res)
        })
        .collect();

    let mut scores = Vec::with_capacity(fits.len());
    let mut usable: Vec<(f64, usize, MixtureModel, Vec<f64>)> = Vec::new();
    let mut errors = Vec::new();
    for (j, res) in fits {
        match res {
            Ok((model, mse, mae, losses)) => {
                scores.push(CandidateScore {
                    n_components: j,
                    fitted_components: Some(model.n_components()),
                    validation_mse: Some(mse),
                    validation_mae: Some(mae),
                    error: None,
                });
                let score = match cfg.criterion {
                    SelectionCriterion::Mse => mse,
                    SelectionCriterion::Mae => mae,
                };
                if score.is_finite() {
                    usable.push((score, j, model, losses));
                }
            }
            Err(e) => {
                errors.push(format!("J={j}: {e}"));
                scores.push(CandidateScore {
                    n_components: j,
                    fitted_components: None,
                    validation_mse: None,
                    validation_mae: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let best = usable
        .iter()
        .enumerate()
        .fold(None, |acc: Option<usize>, (i, c)| match acc {
            Some(b) if usable[b].0 <= c.0 => Some(b),
            _ => Some(i),
        })
        .ok_or_else(|| Error::SelectionFailed(errors.join("; ")))?;
    // `usable` is in ascending component count.
    let chosen = (0..=best)
        .find(|&i| excess_within(&usable[i].3, &usable[best].3, cfg.tolerance_se))
        .unwrap_or(best);
    let (_, n_components, model, _) = usable.swap_remove(chosen);
    Ok(Selection {
        model,
        n_components,
        candidates: scores,
    })
}

/// Per-candidate seed, independent of candidate order.
fn candidate_seed(seed: u64, j: usize) -> u64 {
    seed ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mean of `a - b` is at most `k` standard errors of that paired difference.
fn excess_within(a: &[f64], b: &[f64], k: f64) -> bool {
    let n = a.len() as f64;
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diff.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return true;
    }
    let var = if a.len() > 1 {
        diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    mean <= k * (var / n).sqrt()
}

/// `E[y | x] - y` for every row of row-major `(y, x)` data.
fn prediction_residuals(model: &MixtureModel, data: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim != model.dim() {
        return Err(Error::dims("scoring rows", model.dim(), dim));
    }
    if data.len() < dim {
        return Err(Error::EmptyInput("no rows to score"));
    }
    let cond = ConditionalModel::new(model)?;
    Ok(data.par_chunks(dim).map(|r| cond.predict(&r[1..]) - r[0]).collect())
}

/// `(MSE, MAE)` of `E[y | x]` against `y` over row-major `(y, x)` data.
pub(crate) fn prediction_errors(model: &MixtureModel, data: &[f64], dim: usize) -> Result<(f64, f64)> {
    if dim != model.dim() {
        return Err(Error::dims("scoring rows", model.dim(), dim));
    }
    let cond = ConditionalModel::new(model)?;
    let n = data.len() / dim;
    if n == 0 {
        return Err(Error::EmptyInput("no rows to score"));
    }
    let partial: Vec<(f64, f64)> = data
        .par_chunks(2048 * dim)
        .map(|rows| {
            rows.chunks_exact(dim).fold((0.0, 0.0), |(se, ae), r| {
                let e = cond.predict(&r[1..]) - r[0];
                (se + e * e, ae + e.abs())
            })
        })
        .collect();
    let (se, ae) = partial.iter().fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    Ok((se / n as f64, ae / n as f64))
}
