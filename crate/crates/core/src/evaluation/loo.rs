use std::io::Write;

use serde::Serialize;

use super::residuals::{smoothed_residuals, CurvePoint, ResidualMode};
use crate::error::{Error, Result};
use crate::labeling::DEFAULT_BONE_THRESHOLD_HU;
use crate::predictor::{predict_ct, train_pipeline, RgmmConfig};
use crate::volume::PatientDataset;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatientScore {
    pub patient_id: String,
    pub n_voxels: usize,
    pub mae: Option<f64>,
    pub bone_voxels: usize,
    /// `None` when the patient has no bone voxels or the fold failed.
    pub bone_mae: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionReport {
    pub patients: Vec<PatientScore>,
    /// Mean of per-patient MAEs over successful folds.
    pub mean_mae: Option<f64>,
    pub mean_bone_mae: Option<f64>,
    pub window_hu: f64,
    pub bone_threshold_hu: f64,
    /// Windowed `sCT - mCT` over pooled voxels of successful folds.
    pub residual_curve: Vec<CurvePoint>,
    /// Windowed `mCT - sCT`.
    pub prediction_error_curve: Vec<CurvePoint>,
    /// Windowed `|sCT - mCT|`.
    pub absolute_curve: Vec<CurvePoint>,
}

/// Mean absolute difference.
pub fn mae(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::dims("MAE pairs", truth.len(), estimate.len()));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("no MAE pairs"));
    }
    Ok(truth.iter().zip(estimate).map(|(a, b)| (a - b).abs()).sum::<f64>() / truth.len() as f64)
}

/// Masked true CT values in ascending voxel order.
pub fn masked_ct(patient: &PatientDataset) -> Vec<f64> {
    let mask = patient.mask().data();
    patient
        .ct()
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == 1.0)
        .map(|(&y, _)| y as f64)
        .collect()
}

impl RegressionReport {
    /// Builds the report from per-patient masked `(mCT, sCT)` vectors.
    /// `Err` entries are recorded as failed folds.
    pub fn from_folds(
        ids: &[String],
        folds: Vec<Result<(Vec<f64>, Vec<f64>)>>,
        window_hu: f64,
        bone_threshold_hu: f64,
    ) -> Result<Self> {
        if ids.len() != folds.len() {
            return Err(Error::dims("fold results", ids.len(), folds.len()));
        }
        let mut patients = Vec::with_capacity(ids.len());
        let (mut pooled_m, mut pooled_s) = (Vec::new(), Vec::new());
        for (id, fold) in ids.iter().zip(folds) {
            match fold {
                Ok((m, s)) => {
                    let whole = mae(&m, &s)?;
                    let (mut bone_abs, mut bone_n) = (0.0, 0usize);
                    for (a, b) in m.iter().zip(&s) {
                        if *a > bone_threshold_hu {
                            bone_abs += (a - b).abs();
                            bone_n += 1;
                        }
                    }
                    patients.push(PatientScore {
                        patient_id: id.clone(),
                        n_voxels: m.len(),
                        mae: Some(whole),
                        bone_voxels: bone_n,
                        bone_mae: (bone_n > 0).then(|| bone_abs / bone_n as f64),
                        error: None,
                    });
                    pooled_m.extend(m);
                    pooled_s.extend(s);
                }
                Err(e) => patients.push(PatientScore {
                    patient_id: id.clone(),
                    n_voxels: 0,
                    mae: None,
                    bone_voxels: 0,
                    bone_mae: None,
                    error: Some(e.to_string()),
                }),
            }
        }
        let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        let mean_mae = mean(patients.iter().filter_map(|p| p.mae).collect());
        let mean_bone_mae = mean(patients.iter().filter_map(|p| p.bone_mae).collect());
        let curve = |mode| -> Result<Vec<CurvePoint>> {
            if pooled_m.is_empty() {
                Ok(Vec::new())
            } else {
                smoothed_residuals(&pooled_m, &pooled_s, window_hu, mode)
            }
        };
        Ok(Self {
            residual_curve: curve(ResidualMode::Signed)?,
            prediction_error_curve: curve(ResidualMode::PredictionError)?,
            absolute_curve: curve(ResidualMode::Absolute)?,
            patients,
            mean_mae,
            mean_bone_mae,
            window_hu,
            bone_threshold_hu,
        })
    }

    pub fn n_failed(&self) -> usize {
        self.patients.iter().filter(|p| p.error.is_some()).count()
    }

    /// Per-patient table with a final `mean` row.
    pub fn write_patient_csv<W: Write>(&self, writer: W) -> Result<()> {
        let to_err = |e: csv::Error| Error::format("report csv", e.to_string());
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["patient_id", "n_voxels", "mae_hu", "bone_voxels", "bone_mae_hu", "error"])
            .map_err(to_err)?;
        for p in &self.patients {
            w.write_record([
                p.patient_id.clone(),
                p.n_voxels.to_string(),
                opt(p.mae),
                p.bone_voxels.to_string(),
                opt(p.bone_mae),
                p.error.clone().unwrap_or_default(),
            ])
            .map_err(to_err)?;
        }
        w.write_record(["mean".into(), String::new(), opt(self.mean_mae), String::new(), opt(self.mean_bone_mae), String::new()])
            .map_err(to_err)?;
        w.flush().map_err(|e| Error::format("report csv", e.to_string()))
    }

    /// All three curves, one row per window.
    pub fn write_curves_csv<W: Write>(&self, writer: W) -> Result<()> {
        let to_err = |e: csv::Error| Error::format("curve csv", e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["window_center_hu", "count", "sct_minus_mct_hu", "mct_minus_sct_hu", "abs_residual_hu"])
            .map_err(to_err)?;
        for ((s, e), a) in self.residual_curve.iter().zip(&self.prediction_error_curve).zip(&self.absolute_curve) {
            w.write_record([
                s.center.to_string(),
                s.count.to_string(),
                s.value.to_string(),
                e.value.to_string(),
                a.value.to_string(),
            ])
            .map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::format("curve csv", e.to_string()))
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "patients": self.patients,
            "mean_mae_hu": self.mean_mae,
            "mean_bone_mae_hu": self.mean_bone_mae,
            "window_hu": self.window_hu,
            "bone_threshold_hu": self.bone_threshold_hu,
            "failed_folds": self.n_failed(),
        })
    }
}

/// Leave-one-patient-out evaluation of an arbitrary predictor.
///
/// `predict(train, held_out)` returns estimates for the held-out patient's
/// masked voxels in ascending voxel order. Folds run in id order.
pub fn loo_eval<F>(patients: &[PatientDataset], window_hu: f64, bone_threshold_hu: f64, mut predict: F) -> Result<RegressionReport>
where
    F: FnMut(&[&PatientDataset], &PatientDataset) -> Result<Vec<f64>>,
{
    if patients.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            found: patients.len(),
        });
    }
    let mut sorted: Vec<&PatientDataset> = patients.iter().collect();
    sorted.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let ids: Vec<String> = sorted.iter().map(|p| p.patient_id.clone()).collect();
    let folds = (0..sorted.len())
        .map(|i| {
            let train: Vec<&PatientDataset> = sorted.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| *p).collect();
            let truth = masked_ct(sorted[i]);
            let est = predict(&train, sorted[i])?;
            if est.len() != truth.len() {
                return Err(Error::dims("held-out estimates", truth.len(), est.len()));
            }
            Ok((truth, est))
        })
        .collect();
    RegressionReport::from_folds(&ids, folds, window_hu, bone_threshold_hu)
}

/// Leave-one-patient-out evaluation of the full training pipeline.
pub fn loo_patient_eval(patients: &[PatientDataset], config: &RgmmConfig, seed: u64, window_hu: f64) -> Result<RegressionReport> {
    loo_eval(patients, window_hu, DEFAULT_BONE_THRESHOLD_HU, |train, test| {
        let owned: Vec<PatientDataset> = train.iter().map(|p| (*p).clone()).collect();
        let (model, _) = train_pipeline(&owned, config, seed)?;
        let pred = predict_ct(&model, test.mr_channels(), test.mask())?;
        let mask = test.mask().data();
        Ok(pred
            .ct
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m == 1.0)
            .map(|(&y, _)| y as f64)
            .collect())
    })
}
