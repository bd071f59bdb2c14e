//! Synthetic cohorts drawn from known per-class mixtures.
//!
//! Tissue labels come from white noise blurred with a Gaussian kernel and
//! thresholded so that exactly `round(f N)` voxels are bone. Each voxel then
//! draws `(y, x)` from its class model, redrawing until `y` falls on the
//! class's side of the CT threshold, so labels derived from the CT volume
//! always agree with the layout.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::labeling::{label_tissue, DEFAULT_BONE_THRESHOLD_HU, N_CLASSES};
use crate::mixture::{ConditionalModel, GaussianComponent, MixtureModel, MixtureSampler};
use crate::volume::{PatientDataset, Volume};

/// Bone fraction used when none is given.
pub const DEFAULT_MINORITY_FRACTION: f64 = 0.1849;
const MAX_REDRAWS: usize = 10_000;
const MIN_ACCEPTANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub n_channels: usize,
    /// True joint `(y, x)` model per class.
    pub class_models: Vec<MixtureModel>,
    pub minority_fraction: f64,
    /// Standard deviation of the label-field blur, in voxels.
    pub smoothing_sigma: f64,
    /// Standard deviation of Gaussian noise added to MR channels after
    /// sampling. Non-zero values make the true models no longer exact.
    pub noise_scale: f64,
    pub threshold_hu: f64,
}

/// Joint `(y, x)` Gaussian with `y = mu_y + coef . (x - mu_x) + e`,
/// `e ~ N(0, resid_sd^2)` and equicorrelated `x` (sd `sd_x`, correlation `rho`).
pub fn linear_gaussian(mu_y: f64, mu_x: &[f64], sd_x: f64, rho: f64, coef: &[f64], resid_sd: f64) -> Result<GaussianComponent> {
    let d = mu_x.len();
    if coef.len() != d {
        return Err(Error::dims("regression coefficients", d, coef.len()));
    }
    let sxx = DMatrix::from_fn(d, d, |a, b| sd_x * sd_x * if a == b { 1.0 } else { rho });
    let b = DVector::from_column_slice(coef);
    let sxy = &sxx * &b;
    let syy = b.dot(&sxy) + resid_sd * resid_sd;
    let mut cov = DMatrix::zeros(d + 1, d + 1);
    cov[(0, 0)] = syy;
    for i in 0..d {
        cov[(0, i + 1)] = sxy[i];
        cov[(i + 1, 0)] = sxy[i];
        for j in 0..d {
            cov[(i + 1, j + 1)] = sxx[(i, j)];
        }
    }
    let mut mean = DVector::zeros(d + 1);
    mean[0] = mu_y;
    mean.rows_mut(1, d).copy_from_slice(mu_x);
    GaussianComponent::new(mean, cov)
}

impl PhantomSpec {
    /// Two components per class with well separated MR signatures.
    pub fn standard(dims: [usize; 3], n_channels: usize) -> Result<Self> {
        let d = n_channels;
        if d == 0 {
            return Err(Error::InvalidArgument("phantom needs at least one channel".into()));
        }
        let ramp = |base: f64, step: f64| -> Vec<f64> { (0..d).map(|c| base + step * c as f64).collect() };
        let soft = linear_gaussian(30.0, &ramp(600.0, -25.0), 40.0, 0.3, &vec![0.08; d], 15.0)?;
        let fat = linear_gaussian(-90.0, &ramp(800.0, 20.0), 40.0, 0.3, &vec![-0.05; d], 12.0)?;
        let bone = linear_gaussian(500.0, &ramp(420.0, 15.0), 40.0, 0.3, &vec![-0.8; d], 60.0)?;
        let dense = linear_gaussian(1000.0, &ramp(250.0, -10.0), 40.0, 0.3, &vec![-1.0; d], 80.0)?;
        Ok(Self {
            dims,
            spacing: [1.0; 3],
            n_channels: d,
            class_models: vec![
                MixtureModel::new(vec![0.6, 0.4], vec![soft, fat])?,
                MixtureModel::new(vec![0.6, 0.4], vec![bone, dense])?,
            ],
            minority_fraction: DEFAULT_MINORITY_FRACTION,
            smoothing_sigma: 2.0,
            noise_scale: 0.0,
            threshold_hu: DEFAULT_BONE_THRESHOLD_HU,
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Voxels labelled bone in every generated patient.
    pub fn bone_count(&self) -> usize {
        (self.minority_fraction * self.n_voxels() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("phantom dims must be positive, got {:?}", self.dims)));
        }
        if self.class_models.len() != N_CLASSES {
            return Err(Error::dims("phantom class models", N_CLASSES, self.class_models.len()));
        }
        if let Some(m) = self.class_models.iter().find(|m| m.dim() != 1 + self.n_channels) {
            return Err(Error::dims("phantom model dimension", 1 + self.n_channels, m.dim()));
        }
        if !(self.minority_fraction > 0.0 && self.minority_fraction < 1.0) {
            return Err(Error::InfeasiblePhantom(format!(
                "minority fraction {} is outside (0, 1)",
                self.minority_fraction
            )));
        }
        let bone = self.bone_count();
        if bone == 0 || bone == self.n_voxels() {
            return Err(Error::InfeasiblePhantom(format!(
                "minority fraction {} gives {bone} bone voxels out of {}",
                self.minority_fraction,
                self.n_voxels()
            )));
        }
        if !(self.smoothing_sigma >= 0.0) || !self.smoothing_sigma.is_finite() {
            return Err(Error::InvalidArgument("smoothing_sigma must be >= 0".into()));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::InvalidArgument("noise_scale must be >= 0".into()));
        }
        if !self.threshold_hu.is_finite() {
            return Err(Error::NonFinite("phantom threshold"));
        }
        Volume::filled(self.dims, self.spacing, 0.0)?;
        Ok(())
    }

    /// Fails when a class model puts too little mass on its side of the
    /// threshold for redraws to be practical.
    fn check_acceptance(&self, samplers: &[MixtureSampler]) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buf = vec![0.0; 1 + self.n_channels];
        for (k, s) in samplers.iter().enumerate() {
            let trials = 4000;
            let ok = (0..trials)
                .filter(|_| {
                    s.sample_into(&mut rng, &mut buf);
                    self.label_of(buf[0]) == k
                })
                .count();
            let rate = ok as f64 / trials as f64;
            if rate < MIN_ACCEPTANCE {
                return Err(Error::InfeasiblePhantom(format!(
                    "class {k} model puts only {:.1}% of its CT mass on the class side of {} HU",
                    100.0 * rate,
                    self.threshold_hu
                )));
            }
        }
        Ok(())
    }

    fn label_of(&self, y: f64) -> usize {
        // Labels are judged on the stored single-precision value.
        label_tissue(y as f32 as f64, self.threshold_hu).map_or(0, |t| t.index())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub patients: Vec<PatientDataset>,
}

impl Phantom {
    /// Bone fraction of each patient's CT volume.
    pub fn realized_fractions(&self) -> Vec<f64> {
        self.patients
            .iter()
            .map(|p| {
                let bone = p.ct().data().iter().filter(|&&y| y as f64 > self.spec.threshold_hu).count();
                bone as f64 / p.ct().len() as f64
            })
            .collect()
    }
}

/// Generates `n_patients` phantoms with ids `p01`, `p02`, ...
pub fn generate_phantom(spec: &PhantomSpec, n_patients: usize, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    if n_patients == 0 {
        return Err(Error::InvalidArgument("n_patients must be >= 1".into()));
    }
    let samplers = spec
        .class_models
        .iter()
        .map(MixtureSampler::new)
        .collect::<Result<Vec<_>>>()?;
    spec.check_acceptance(&samplers)?;

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n_patients).map(|_| master.random()).collect();
    let width = n_patients.to_string().len().max(2);
    let patients = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| generate_patient(spec, &samplers, format!("p{:0width$}", i + 1), s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Phantom {
        spec: spec.clone(),
        patients,
    })
}

fn generate_patient(spec: &PhantomSpec, samplers: &[MixtureSampler], id: String, seed: u64) -> Result<PatientDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = label_field(spec, &mut rng);
    let n = labels.len();
    let d = spec.n_channels;
    let mut ct = vec![0f32; n];
    let mut mr = vec![vec![0f32; n]; d];
    let mut buf = vec![0.0; 1 + d];
    for (i, &t) in labels.iter().enumerate() {
        let t = t as usize;
        let mut tries = 0;
        loop {
            samplers[t].sample_into(&mut rng, &mut buf);
            if spec.label_of(buf[0]) == t {
                break;
            }
            tries += 1;
            if tries >= MAX_REDRAWS {
                return Err(Error::InfeasiblePhantom(format!("class {t} sample rejected {MAX_REDRAWS} times")));
            }
        }
        ct[i] = buf[0] as f32;
        for c in 0..d {
            let noise = if spec.noise_scale > 0.0 {
                spec.noise_scale * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            mr[c][i] = (buf[1 + c] + noise) as f32;
        }
    }
    let vol = |data: Vec<f32>| Volume::new(spec.dims, spec.spacing, data);
    PatientDataset::new(
        id,
        mr.into_iter().map(vol).collect::<Result<Vec<_>>>()?,
        vol(ct)?,
        Volume::filled(spec.dims, spec.spacing, 1.0)?,
    )
}

/// Labels with exactly `spec.bone_count()` ones at the largest values of a
/// blurred noise field (ties to the lower voxel index).
fn label_field(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = spec.n_voxels();
    let mut field: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    if spec.smoothing_sigma > 0.0 {
        field = gaussian_blur(&field, spec.dims, spec.smoothing_sigma);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut labels = vec![0u8; n];
    for &i in &order[..spec.bone_count()] {
        labels[i] = 1;
    }
    labels
}

/// Separable Gaussian blur with replicate padding, x-fastest layout.
fn gaussian_blur(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= total);

    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let len = dims[axis] as isize;
        let stride = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let coord = ((i / stride) % dims[axis]) as isize;
            let base = i - coord as usize * stride;
            *out = kernel
                .iter()
                .zip(-radius..=radius)
                .map(|(w, k)| w * cur[base + (coord + k).clamp(0, len - 1) as usize * stride])
                .sum();
        }
        cur = next;
    }
    cur
}

/// Predictor built from the true models: the true class (from CT) selects
/// the class model, whose conditional expectation gives the estimate.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    conditionals: Vec<ConditionalModel>,
    threshold_hu: f64,
}

impl OraclePredictor {
    pub fn new(spec: &PhantomSpec) -> Result<Self> {
        Self::from_models(&spec.class_models, spec.threshold_hu)
    }

    /// Oracle over per-class joint models, e.g. a phantom truth file.
    pub fn from_models(class_models: &[MixtureModel], threshold_hu: f64) -> Result<Self> {
        if class_models.len() != N_CLASSES {
            return Err(Error::dims("oracle class models", N_CLASSES, class_models.len()));
        }
        Ok(Self {
            conditionals: class_models.iter().map(ConditionalModel::new).collect::<Result<Vec<_>>>()?,
            threshold_hu,
        })
    }

    /// Estimates for the masked voxels of `patient`, in ascending voxel order.
    pub fn predict_patient(&self, patient: &PatientDataset) -> Result<Vec<f64>> {
        let d = patient.n_channels();
        if d != self.conditionals[0].dim_x() {
            return Err(Error::dims("oracle channels", self.conditionals[0].dim_x(), d));
        }
        let ct = patient.ct().data();
        let mask = patient.mask().data();
        let voxels: Vec<usize> = (0..ct.len()).filter(|&i| mask[i] == 1.0).collect();
        voxels
            .par_iter()
            .map(|&v| {
                let t = label_tissue(ct[v] as f64, self.threshold_hu)?.index();
                let x: Vec<f64> = patient.mr_channels().iter().map(|c| c.data()[v] as f64).collect();
                Ok(self.conditionals[t].predict(&x))
            })
            .collect()
    }
}
