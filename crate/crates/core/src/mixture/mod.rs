//! Gaussian mixtures over joint `(y, x)` vectors, one per tissue class.
//!
//! Every vector is laid out target first: index 0 is the CT intensity `y`,
//! indices `1..` are the regressors `x`.

mod conditional;
mod em;
mod format;
mod sample;
mod select;

pub use conditional::{conditional_expectation, ConditionalModel};
pub use em::{em_fit, em_run, EmConfig, EmFit, EmRun, RestartSummary};
pub use format::{read_tissue_gmm, write_tissue_gmm};
pub use sample::MixtureSampler;
pub use select::{select_model, CandidateScore, Selection, SelectionConfig, SelectionCriterion};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Tolerance on `sum(weights) == 1` accepted by [`MixtureModel::new`].
const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("component has zero dimension".into()));
        }
        if covariance.shape() != (dim, dim) {
            return Err(Error::dims("component covariance", format!("{dim}x{dim}"), format!("{:?}", covariance.shape())));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("component parameters"));
        }
        let scale = covariance.amax().max(1.0);
        if (&covariance - covariance.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidArgument("component covariance is not symmetric".into()));
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `sum_j weight_j N(mean_j, covariance_j)` with weights on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    weights: Vec<f64>,
    components: Vec<GaussianComponent>,
}

impl MixtureModel {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        if weights.len() != components.len() {
            return Err(Error::dims("mixture weights", components.len(), weights.len()));
        }
        let dim = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != dim) {
            return Err(Error::dims("mixture component", dim, c.dim()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("mixture weights must be finite and >= 0: {weights:?}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::NotNormalized { sum });
        }
        Ok(Self { weights, components })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Joint dimension `1 + d`.
    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Same model with components reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::new(
            perm.iter().map(|&j| self.weights[j]).collect(),
            perm.iter().map(|&j| self.components[j].clone()).collect(),
        )
    }

    pub fn evaluator(&self) -> Result<DensityEvaluator> {
        DensityEvaluator::new(self)
    }

    /// Stable `log sum_j pi_j N(v; mu_j, Sigma_j)`.
    pub fn log_density(&self, v: &[f64]) -> Result<f64> {
        let eval = self.evaluator()?;
        if v.len() != self.dim() {
            return Err(Error::dims("density argument", self.dim(), v.len()));
        }
        Ok(eval.log_density(v))
    }
}

/// Free-function form of [`MixtureModel::log_density`].
pub fn log_density(model: &MixtureModel, v: &[f64]) -> Result<f64> {
    model.log_density(v)
}

/// Per-class mixtures; index `k` holds the model of tissue class `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueGmm {
    models: Vec<MixtureModel>,
}

impl TissueGmm {
    pub fn new(models: Vec<MixtureModel>) -> Result<Self> {
        let first = models.first().ok_or(Error::EmptyInput("tissue GMM needs at least one class"))?;
        let dim = first.dim();
        if let Some(m) = models.iter().find(|m| m.dim() != dim) {
            return Err(Error::dims("tissue GMM class model", dim, m.dim()));
        }
        Ok(Self { models })
    }

    pub fn n_classes(&self) -> usize {
        self.models.len()
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim()
    }

    pub fn class(&self, k: usize) -> &MixtureModel {
        &self.models[k]
    }

    pub fn models(&self) -> &[MixtureModel] {
        &self.models
    }
}

/// A Gaussian with a precomputed inverse Cholesky factor.
#[derive(Debug, Clone)]
pub(crate) struct FactoredGaussian {
    mean: Vec<f64>,
    /// Row-major lower-triangular `L^{-1}` where `Sigma = L L^T`.
    inv_factor: Vec<f64>,
    /// `-0.5 (D ln 2pi + ln det Sigma)`.
    log_norm: f64,
}

impl FactoredGaussian {
    pub(crate) fn new(mean: &[f64], covariance: &DMatrix<f64>) -> Option<Self> {
        let dim = mean.len();
        let chol = covariance.clone().cholesky()?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return None;
        }
        let inv = l.solve_lower_triangular(&DMatrix::identity(dim, dim))?;
        let mut inv_factor = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in 0..=r {
                inv_factor[r * dim + c] = inv[(r, c)];
            }
        }
        if inv_factor.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(Self {
            mean: mean.to_vec(),
            inv_factor,
            log_norm: -0.5 * (dim as f64 * LN_2PI + log_det),
        })
    }

    #[inline]
    pub(crate) fn log_pdf(&self, v: &[f64]) -> f64 {
        let dim = self.mean.len();
        let mut maha = 0.0;
        for r in 0..dim {
            let row = &self.inv_factor[r * dim..r * dim + r + 1];
            let z: f64 = row.iter().enumerate().map(|(c, l)| l * (v[c] - self.mean[c])).sum();
            maha += z * z;
        }
        self.log_norm - 0.5 * maha
    }
}

/// Mixture density with every component factored once.
#[derive(Debug, Clone)]
pub struct DensityEvaluator {
    log_weights: Vec<f64>,
    components: Vec<FactoredGaussian>,
}

impl DensityEvaluator {
    fn new(model: &MixtureModel) -> Result<Self> {
        let components = model
            .components
            .iter()
            .enumerate()
            .map(|(j, c)| {
                FactoredGaussian::new(c.mean.as_slice(), &c.covariance).ok_or(Error::NotPositiveDefinite { component: j })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            log_weights: model.weights.iter().map(|w| w.ln()).collect(),
            components,
        })
    }

    /// Writes `ln pi_j + ln N_j(v)` into `out` and returns their log-sum-exp.
    #[inline]
    pub(crate) fn log_terms(&self, v: &[f64], out: &mut [f64]) -> f64 {
        for ((o, lw), g) in out.iter_mut().zip(&self.log_weights).zip(&self.components) {
            *o = lw + g.log_pdf(v);
        }
        log_sum_exp(out)
    }

    pub fn log_density(&self, v: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.components.len()];
        self.log_terms(v, &mut buf)
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
