use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::select::prediction_errors;
use super::{FactoredGaussian, GaussianComponent, MixtureModel};
use crate::error::{Error, Result};

/// Rows per parallel work unit. Fixed so partial sums combine in the same
/// order whatever the thread count.
const CHUNK_ROWS: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    /// Hard cap on M-steps per run.
    pub max_iter: usize,
    /// Stop once `(L_i - L_{i-1}) / |L_{i-1}|` falls below this.
    pub rel_tol: f64,
    /// Seeded runs per fit; the best by training conditional MSE is kept.
    pub restarts: usize,
    /// Ridge is `ridge_factor * trace(Sigma_pooled) / dim` in standardized units.
    pub ridge_factor: f64,
    /// Components whose weight falls below this are dropped.
    pub min_weight: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-6,
            restarts: 5,
            ridge_factor: 1e-6,
            min_weight: 1e-8,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::InvalidArgument("EM restarts must be >= 1".into()));
        }
        if !(self.rel_tol >= 0.0) || !(self.ridge_factor >= 0.0) || !(self.min_weight >= 0.0) {
            return Err(Error::InvalidArgument("EM tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

/// One EM run from one seeding.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub model: MixtureModel,
    /// Log-likelihood at the start of every iteration, ending with the
    /// returned model's value.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub dropped_components: usize,
    pub ridge_applications: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartSummary {
    pub seed: u64,
    pub final_log_likelihood: f64,
    pub train_mse: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_components: usize,
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: MixtureModel,
    pub requested_components: usize,
    /// Components were dropped during fitting; `model` has fewer than requested.
    pub degenerate: bool,
    /// Log-likelihood trace of the kept restart.
    pub log_likelihood: Vec<f64>,
    pub restarts: Vec<RestartSummary>,
    pub best_restart: usize,
}

/// Fits `n_components` Gaussians to row-major `data` (rows of length `dim`,
/// target first), keeping the restart with the lowest conditional MSE of
/// the target on the training rows.
pub fn em_fit(data: &[f64], dim: usize, n_components: usize, cfg: &EmConfig, seed: u64) -> Result<EmFit> {
    cfg.validate()?;
    check_data(data, dim, n_components)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut restarts = Vec::with_capacity(cfg.restarts);
    let mut best: Option<(f64, EmRun)> = None;
    let mut first_err = None;
    for _ in 0..cfg.restarts {
        let run_seed = master.next_u64();
        let run = match em_run(data, dim, n_components, cfg, run_seed) {
            Ok(run) => run,
            Err(e) => {
                first_err.get_or_insert(e);
                continue;
            }
        };
        let train_mse = prediction_errors(&run.model, data, dim).map(|(mse, _)| mse).unwrap_or(f64::INFINITY);
        restarts.push(RestartSummary {
            seed: run_seed,
            final_log_likelihood: *run.log_likelihood.last().unwrap_or(&f64::NEG_INFINITY),
            train_mse,
            iterations: run.iterations,
            converged: run.converged,
            n_components: run.model.n_components(),
        });
        if best.as_ref().is_none_or(|(s, _)| train_mse < *s) {
            best = Some((train_mse, run));
        }
    }
    let Some((best_mse, run)) = best else {
        return Err(first_err.unwrap_or(Error::EmptyInput("no EM restarts ran")));
    };
    let best_restart = restarts.iter().position(|r| r.train_mse == best_mse).unwrap_or(0);
    Ok(EmFit {
        degenerate: run.model.n_components() < n_components,
        requested_components: n_components,
        model: run.model,
        log_likelihood: run.log_likelihood,
        restarts,
        best_restart,
    })
}

fn check_data(data: &[f64], dim: usize, n_components: usize) -> Result<usize> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::dims("EM data rows", format!("multiple of {dim}"), data.len()));
    }
    if n_components == 0 {
        return Err(Error::InvalidArgument("component count must be >= 1".into()));
    }
    let n = data.len() / dim;
    let needed = n_components * dim;
    if n < needed {
        return Err(Error::TooFewSamples { needed, found: n });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("EM data"));
    }
    Ok(n)
}

/// A single EM run: k-means++ seeded means, pooled covariance, uniform weights.
///
/// The run works on per-dimension standardized coordinates and maps the
/// result back, so the ridge `ridge_factor * trace(Sigma_pooled) / dim` is
/// taken in units where the pooled covariance has unit diagonal. The
/// reported log-likelihood is in the original units.
pub fn em_run(data: &[f64], dim: usize, n_components: usize, cfg: &EmConfig, seed: u64) -> Result<EmRun> {
    let n = check_data(data, dim, n_components)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let scaler = Standardizer::fit(data, dim);
    let z = scaler.apply(data);
    let data = z.as_slice();

    let pooled = pooled_covariance(data, dim);
    let ridge = cfg.ridge_factor * pooled.trace() / dim as f64;
    let mut ridge_applications = 0;
    let mut comps: Vec<(Vec<f64>, DMatrix<f64>)> = kmeans_pp_means(data, dim, n_components, &mut rng)
        .into_iter()
        .map(|m| {
            let mut cov = pooled.clone();
            ridge_applications += regularize(&mut cov, ridge) as usize;
            (m, cov)
        })
        .collect();
    let mut weights = vec![1.0 / n_components as f64; n_components];

    let log_jacobian = n as f64 * scaler.log_scale();
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut dropped = 0;
    let mut resp = Vec::new();
    loop {
        let factored = factor_all(&comps)?;
        let log_weights: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        let j = comps.len();
        resp.resize(n * j, 0.0);
        let ll = e_step(data, dim, &log_weights, &factored, &mut resp[..n * j]) - log_jacobian;
        let prev = trace.last().copied();
        trace.push(ll);
        if let Some(prev) = prev {
            let prev: f64 = prev;
            if (ll - prev) / prev.abs().max(f64::MIN_POSITIVE) < cfg.rel_tol {
                converged = true;
                break;
            }
        }
        if iterations == cfg.max_iter {
            break;
        }

        let (nk, updated) = m_step(data, dim, &resp[..n * j], j);
        let mut next_w = Vec::with_capacity(j);
        let mut next_c = Vec::with_capacity(j);
        for (w, (mean, mut cov)) in nk.iter().map(|s| s / n as f64).zip(updated) {
            if !(w >= cfg.min_weight) {
                dropped += 1;
                continue;
            }
            ridge_applications += regularize(&mut cov, ridge) as usize;
            if FactoredGaussian::new(&mean, &cov).is_none() {
                dropped += 1;
                continue;
            }
            next_w.push(w);
            next_c.push((mean, cov));
        }
        if next_c.is_empty() {
            return Err(Error::NotPositiveDefinite { component: 0 });
        }
        let total: f64 = next_w.iter().sum();
        weights = next_w.into_iter().map(|w| w / total).collect();
        comps = next_c;
        iterations += 1;
    }

    let components = comps
        .into_iter()
        .map(|(m, c)| {
            let (m, c) = scaler.restore(&m, &c);
            GaussianComponent::new(DVector::from_vec(m), c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmRun {
        model: MixtureModel::new(weights, components)?,
        log_likelihood: trace,
        iterations,
        converged,
        dropped_components: dropped,
        ridge_applications,
    })
}

/// Per-dimension centring and scaling to unit pooled variance.
struct Standardizer {
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(data: &[f64], dim: usize) -> Self {
        let pooled = pooled_covariance(data, dim);
        let n = (data.len() / dim) as f64;
        let mut center = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            center.iter_mut().zip(row).for_each(|(c, x)| *c += x);
        }
        center.iter_mut().for_each(|c| *c /= n);
        let scale = (0..dim)
            .map(|i| {
                let sd = pooled[(i, i)].sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { center, scale }
    }

    fn apply(&self, data: &[f64]) -> Vec<f64> {
        let dim = self.scale.len();
        data.iter()
            .enumerate()
            .map(|(i, x)| (x - self.center[i % dim]) / self.scale[i % dim])
            .collect()
    }

    /// `sum ln scale_i`, the log-Jacobian of the map back to original units.
    fn log_scale(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }

    fn restore(&self, mean: &[f64], cov: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let mean = mean.iter().zip(&self.scale).zip(&self.center).map(|((m, s), c)| m * s + c).collect();
        let cov = DMatrix::from_fn(cov.nrows(), cov.ncols(), |a, b| {
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            cov[(hi, lo)] * self.scale[hi] * self.scale[lo]
        });
        (mean, cov)
    }
}

fn factor_all(comps: &[(Vec<f64>, DMatrix<f64>)]) -> Result<Vec<FactoredGaussian>> {
    comps
        .iter()
        .enumerate()
        .map(|(j, (m, c))| FactoredGaussian::new(m, c).ok_or(Error::NotPositiveDefinite { component: j }))
        .collect()
}

/// Fills `resp` (row-major `n x J`) with responsibilities; returns the
/// total log-likelihood.
fn e_step(data: &[f64], dim: usize, log_weights: &[f64], comps: &[FactoredGaussian], resp: &mut [f64]) -> f64 {
    let j = comps.len();
    let partial: Vec<f64> = data
        .par_chunks(CHUNK_ROWS * dim)
        .zip(resp.par_chunks_mut(CHUNK_ROWS * j))
        .map(|(rows, r)| {
            let mut ll = 0.0;
            for (v, rr) in rows.chunks_exact(dim).zip(r.chunks_exact_mut(j)) {
                for ((o, lw), g) in rr.iter_mut().zip(log_weights).zip(comps) {
                    *o = lw + g.log_pdf(v);
                }
                let lse = super::log_sum_exp(rr);
                for o in rr.iter_mut() {
                    *o = (*o - lse).exp();
                }
                ll += lse;
            }
            ll
        })
        .collect();
    partial.iter().sum()
}

/// Returns per-component responsibility mass and the (unregularized) MLE
/// means and covariances.
type MeanCov = (Vec<f64>, DMatrix<f64>);

fn m_step(data: &[f64], dim: usize, resp: &[f64], j: usize) -> (Vec<f64>, Vec<MeanCov>) {
    let first: Vec<(Vec<f64>, Vec<f64>)> = data
        .par_chunks(CHUNK_ROWS * dim)
        .zip(resp.par_chunks(CHUNK_ROWS * j))
        .map(|(rows, r)| {
            let mut nk = vec![0.0; j];
            let mut sums = vec![0.0; j * dim];
            for (v, rr) in rows.chunks_exact(dim).zip(r.chunks_exact(j)) {
                for k in 0..j {
                    nk[k] += rr[k];
                    for (s, x) in sums[k * dim..(k + 1) * dim].iter_mut().zip(v) {
                        *s += rr[k] * x;
                    }
                }
            }
            (nk, sums)
        })
        .collect();
    let mut nk = vec![0.0; j];
    let mut sums = vec![0.0; j * dim];
    for (pn, ps) in &first {
        nk.iter_mut().zip(pn).for_each(|(a, b)| *a += b);
        sums.iter_mut().zip(ps).for_each(|(a, b)| *a += b);
    }
    let means: Vec<Vec<f64>> = (0..j)
        .map(|k| sums[k * dim..(k + 1) * dim].iter().map(|s| s / nk[k]).collect())
        .collect();

    let second: Vec<Vec<f64>> = data
        .par_chunks(CHUNK_ROWS * dim)
        .zip(resp.par_chunks(CHUNK_ROWS * j))
        .map(|(rows, r)| {
            let mut scatter = vec![0.0; j * dim * dim];
            let mut diff = vec![0.0; dim];
            for (v, rr) in rows.chunks_exact(dim).zip(r.chunks_exact(j)) {
                for k in 0..j {
                    for (d, (x, m)) in diff.iter_mut().zip(v.iter().zip(&means[k])) {
                        *d = x - m;
                    }
                    let block = &mut scatter[k * dim * dim..(k + 1) * dim * dim];
                    for a in 0..dim {
                        let ra = rr[k] * diff[a];
                        for b in 0..=a {
                            block[a * dim + b] += ra * diff[b];
                        }
                    }
                }
            }
            scatter
        })
        .collect();
    let mut scatter = vec![0.0; j * dim * dim];
    for p in &second {
        scatter.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }

    let comps = (0..j)
        .map(|k| {
            let block = &scatter[k * dim * dim..(k + 1) * dim * dim];
            let cov = DMatrix::from_fn(dim, dim, |a, b| {
                let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
                block[hi * dim + lo] / nk[k]
            });
            (means[k].clone(), cov)
        })
        .collect();
    (nk, comps)
}

/// Adds `eps` to the diagonal when the smallest eigenvalue is below it.
/// Returns whether the ridge was applied.
pub(crate) fn regularize(cov: &mut DMatrix<f64>, eps: f64) -> bool {
    let dim = cov.nrows();
    if !cov.iter().all(|v| v.is_finite()) {
        return false;
    }
    let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
    if min_eig < eps {
        for i in 0..dim {
            cov[(i, i)] += eps;
        }
        true
    } else {
        false
    }
}

fn pooled_covariance(data: &[f64], dim: usize) -> DMatrix<f64> {
    let n = (data.len() / dim) as f64;
    let mut mean = vec![0.0; dim];
    for row in data.chunks_exact(dim) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = DMatrix::zeros(dim, dim);
    for row in data.chunks_exact(dim) {
        for a in 0..dim {
            let da = row[a] - mean[a];
            for b in 0..=a {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..dim {
        for b in 0..=a {
            let v = cov[(a, b)] / n;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    cov
}

/// k-means++ seeding on per-dimension standardized coordinates.
fn kmeans_pp_means(data: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = data.len() / dim;
    let pooled = pooled_covariance(data, dim);
    let inv_sd: Vec<f64> = (0..dim)
        .map(|i| {
            let sd = pooled[(i, i)].sqrt();
            if sd > 0.0 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let dist2 = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(&inv_sd).map(|((x, y), s)| ((x - y) * s).powi(2)).sum() };

    let mut centers = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(row(i), row(centers[0]))).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&nearest) {
            Ok(w) => w.sample(rng),
            Err(_) => rng.random_range(0..n),
        };
        centers.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(row(i), row(next)));
        }
    }
    centers.into_iter().map(|c| row(c).to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::super::MixtureSampler;
    use super::*;
    use approx::assert_relative_eq;

    fn two_component_truth() -> MixtureModel {
        let c0 = GaussianComponent::new(
            DVector::from_column_slice(&[0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let c1 = GaussianComponent::new(
            DVector::from_column_slice(&[8.0, 6.0]),
            DMatrix::from_row_slice(2, 2, &[1.5, -0.4, -0.4, 0.8]),
        )
        .unwrap();
        MixtureModel::new(vec![0.35, 0.65], vec![c0, c1]).unwrap()
    }

    #[test]
    fn single_component_is_sample_moments() {
        let truth = two_component_truth();
        let data = MixtureSampler::new(&truth).unwrap().sample_rows(500, &mut ChaCha8Rng::seed_from_u64(3));
        let fit = em_fit(&data, 2, 1, &EmConfig::default(), 11).unwrap();
        let n = 500.0;
        let my = data.chunks(2).map(|r| r[0]).sum::<f64>() / n;
        let mx = data.chunks(2).map(|r| r[1]).sum::<f64>() / n;
        let vyx = data.chunks(2).map(|r| (r[0] - my) * (r[1] - mx)).sum::<f64>() / n;
        let c = &fit.model.components()[0];
        assert_relative_eq!(c.mean[0], my, max_relative = 1e-12);
        assert_relative_eq!(c.mean[1], mx, max_relative = 1e-12);
        assert_relative_eq!(c.covariance[(0, 1)], vyx, max_relative = 1e-10);
        assert_eq!(fit.model.weights(), &[1.0]);
    }

    #[test]
    fn recovers_separated_components() {
        let truth = two_component_truth();
        let data = MixtureSampler::new(&truth).unwrap().sample_rows(5000, &mut ChaCha8Rng::seed_from_u64(5));
        let fit = em_fit(&data, 2, 2, &EmConfig::default(), 1).unwrap();
        let m = &fit.model;
        let order: Vec<usize> = if m.components()[0].mean[0] < m.components()[1].mean[0] { vec![0, 1] } else { vec![1, 0] };
        for (t, &f) in order.iter().enumerate() {
            assert_relative_eq!(m.weights()[f], truth.weights()[t], max_relative = 0.1);
            for i in 0..2 {
                let want = truth.components()[t].mean[i];
                let got = m.components()[f].mean[i];
                assert!((got - want).abs() <= 0.1 * want.abs().max(1.0), "mean {got} vs {want}");
            }
        }
    }

    #[test]
    fn log_likelihood_never_decreases() {
        let truth = two_component_truth();
        let data = MixtureSampler::new(&truth).unwrap().sample_rows(2000, &mut ChaCha8Rng::seed_from_u64(9));
        for j in 1..=4 {
            let run = em_run(&data, 2, j, &EmConfig::default(), 100 + j as u64).unwrap();
            for w in run.log_likelihood.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "J={j}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let truth = two_component_truth();
        let data = MixtureSampler::new(&truth).unwrap().sample_rows(3000, &mut ChaCha8Rng::seed_from_u64(2));
        let a = em_fit(&data, 2, 3, &EmConfig::default(), 77).unwrap();
        let b = em_fit(&data, 2, 3, &EmConfig::default(), 77).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log_likelihood, b.log_likelihood);
    }

    #[test]
    fn weights_on_simplex() {
        let truth = two_component_truth();
        let data = MixtureSampler::new(&truth).unwrap().sample_rows(1000, &mut ChaCha8Rng::seed_from_u64(4));
        let fit = em_fit(&data, 2, 3, &EmConfig::default(), 5).unwrap();
        assert!(fit.model.weights().iter().all(|&w| w >= 0.0));
        assert!((fit.model.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples() {
        let data = vec![0.0; 2 * 5];
        assert!(matches!(
            em_fit(&data, 2, 3, &EmConfig::default(), 0),
            Err(Error::TooFewSamples { needed: 6, found: 5 })
        ));
    }

    #[test]
    fn collapsed_fit_is_flagged_not_fatal() {
        // Two distinct points repeated: a third component has nothing to explain.
        let mut data = Vec::new();
        for i in 0..60 {
            let v = if i % 2 == 0 { 0.0 } else { 10.0 };
            data.extend_from_slice(&[v, v * 0.5]);
        }
        let fit = em_fit(&data, 2, 3, &EmConfig::default(), 3).unwrap();
        assert!(fit.model.n_components() <= 3);
        assert_eq!(fit.degenerate, fit.model.n_components() < 3);
    }

    #[test]
    fn ridge_restores_definiteness() {
        let mut cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(regularize(&mut cov, 1e-6));
        assert!(cov.clone().cholesky().is_some());
        let mut fine = DMatrix::identity(2, 2);
        assert!(!regularize(&mut fine, 1e-6));
    }
}
