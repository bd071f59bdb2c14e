use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use super::MixtureModel;
use crate::error::{Error, Result};

/// Draws joint vectors from a mixture via per-component Cholesky factors.
#[derive(Debug, Clone)]
pub struct MixtureSampler {
    picker: WeightedIndex<f64>,
    means: Vec<Vec<f64>>,
    factors: Vec<DMatrix<f64>>,
}

impl MixtureSampler {
    pub fn new(model: &MixtureModel) -> Result<Self> {
        let picker = WeightedIndex::new(model.weights())
            .map_err(|e| Error::InvalidArgument(format!("mixture weights: {e}")))?;
        let mut means = Vec::new();
        let mut factors = Vec::new();
        for (j, c) in model.components().iter().enumerate() {
            let chol = c.covariance.clone().cholesky().ok_or(Error::NotPositiveDefinite { component: j })?;
            means.push(c.mean.iter().copied().collect());
            factors.push(chol.l());
        }
        Ok(Self { picker, means, factors })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Writes one draw into `out` and returns the component it came from.
    pub fn sample_into(&self, rng: &mut impl Rng, out: &mut [f64]) -> usize {
        let j = self.picker.sample(rng);
        self.sample_component_into(j, rng, out);
        j
    }

    pub fn sample_component_into(&self, j: usize, rng: &mut impl Rng, out: &mut [f64]) {
        let dim = self.dim();
        let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let l = &self.factors[j];
        for r in 0..dim {
            out[r] = self.means[j][r] + (0..=r).map(|c| l[(r, c)] * z[c]).sum::<f64>();
        }
    }

    /// `n` draws, row-major.
    pub fn sample_rows(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let dim = self.dim();
        let mut out = vec![0.0; n * dim];
        for row in out.chunks_exact_mut(dim) {
            self.sample_into(rng, row);
        }
        out
    }
}
