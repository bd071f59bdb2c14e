use nalgebra::{DMatrix, DVector};

use super::{FactoredGaussian, MixtureModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct ConditionalComponent {
    log_weight: f64,
    /// Marginal of the regressors, `N(mu^x, Sigma^xx)`.
    marginal: FactoredGaussian,
    mean_x: Vec<f64>,
    mean_y: f64,
    /// `(Sigma^xx)^{-1} Sigma^xy`.
    coef: Vec<f64>,
}

/// `E[y | x]` under a joint mixture, with every component's regression
/// precomputed.
///
/// The component weights given `x` are
/// `beta_j = pi_j N(x; mu_j^x, Sigma_j^xx) / sum_l pi_l N(x; mu_l^x, Sigma_l^xx)`
/// and the estimate is `sum_j beta_j (mu_j^y + Sigma_j^yx (Sigma_j^xx)^{-1} (x - mu_j^x))`.
#[derive(Debug, Clone)]
pub struct ConditionalModel {
    components: Vec<ConditionalComponent>,
    dim_x: usize,
}

impl ConditionalModel {
    pub fn new(model: &MixtureModel) -> Result<Self> {
        let dim = model.dim();
        if dim < 2 {
            return Err(Error::InvalidArgument("conditional expectation needs at least one regressor".into()));
        }
        let dim_x = dim - 1;
        let components = model
            .weights()
            .iter()
            .zip(model.components())
            .enumerate()
            .map(|(j, (&w, c))| {
                let sigma_xx: DMatrix<f64> = c.covariance.view((1, 1), (dim_x, dim_x)).into_owned();
                let sigma_xy: DVector<f64> = c.covariance.view((1, 0), (dim_x, 1)).column(0).into_owned();
                let chol = sigma_xx.clone().cholesky().ok_or(Error::NotPositiveDefinite { component: j })?;
                let coef = chol.solve(&sigma_xy);
                let mean_x = c.mean.as_slice()[1..].to_vec();
                let marginal = FactoredGaussian::new(&mean_x, &sigma_xx).ok_or(Error::NotPositiveDefinite { component: j })?;
                Ok(ConditionalComponent {
                    log_weight: w.ln(),
                    marginal,
                    mean_x,
                    mean_y: c.mean[0],
                    coef: coef.iter().copied().collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { components, dim_x })
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Point estimate only. `x` must have length [`dim_x`](Self::dim_x).
    #[inline]
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut log_b = [0.0f64; 16];
        if self.components.len() <= log_b.len() {
            self.predict_into(x, &mut log_b[..self.components.len()])
        } else {
            self.predict_into(x, &mut vec![0.0; self.components.len()])
        }
    }

    /// Point estimate and the weights `beta_j`.
    pub fn predict_with_betas(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut betas = vec![0.0; self.components.len()];
        let y = self.predict_into(x, &mut betas);
        (y, betas)
    }

    pub fn checked_predict(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if x.len() != self.dim_x {
            return Err(Error::dims("regressor vector", self.dim_x, x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regressor vector"));
        }
        Ok(self.predict_with_betas(x))
    }

    /// Fills `betas` with normalized weights and returns the estimate.
    fn predict_into(&self, x: &[f64], betas: &mut [f64]) -> f64 {
        for (b, c) in betas.iter_mut().zip(&self.components) {
            *b = c.log_weight + c.marginal.log_pdf(x);
        }
        let max = betas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for b in betas.iter_mut() {
            *b = (*b - max).exp();
            total += *b;
        }
        let mut y = 0.0;
        for (b, c) in betas.iter_mut().zip(&self.components) {
            *b /= total;
            let shift: f64 = c.coef.iter().zip(x.iter().zip(&c.mean_x)).map(|(k, (xi, mi))| k * (xi - mi)).sum();
            y += *b * (c.mean_y + shift);
        }
        y
    }
}

/// One-shot `E[y | x]` and `beta` for a joint model.
pub fn conditional_expectation(model: &MixtureModel, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    ConditionalModel::new(model)?.checked_predict(x)
}
