//! Validation protocol: classification metrics, k-fold cross-validation,
//! leave-one-patient-out regression reports, smoothed residual curves and a
//! synthetic phantom generator with an oracle predictor.

mod cv;
mod loo;
mod metrics;
mod phantom;
mod residuals;

pub use cv::{kfold_cv, kfold_partition};
pub use loo::{loo_eval, loo_patient_eval, mae, masked_ct, PatientScore, RegressionReport};
pub use metrics::{f_score, prf, ClassificationMetrics};
pub use phantom::{
    generate_phantom, linear_gaussian, OraclePredictor, Phantom, PhantomSpec, DEFAULT_MINORITY_FRACTION,
};
pub use residuals::{smoothed_residuals, CurvePoint, ResidualMode, DEFAULT_WINDOW_HU};
