//! The end-to-end estimator: train the tissue classifier and the per-class
//! mixtures, then predict a CT volume from MR channels.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::{kfold_cv, ClassificationMetrics};
use crate::labeling::{DEFAULT_BONE_THRESHOLD_HU, N_CLASSES};
use crate::mixture::{
    read_tissue_gmm, select_model, write_tissue_gmm, CandidateScore, ConditionalModel, EmConfig, SelectionConfig,
    SelectionCriterion, TissueGmm,
};
use crate::rusboost::{read_ensemble, train_rusboost, write_ensemble, BoostConfig, BoostReport, BoostedEnsemble};
use crate::tree::{TrainingSet, TreeConfig};
use crate::volume::{assemble, extract_unlabeled, NeighborhoodOrder, PatientDataset, SampleTable, Volume};

const CHUNK_ROWS: usize = 2048;

/// Which feature block the regressors condition on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressorFeatures {
    /// The `d` raw MR intensities.
    Raw,
    /// Raw plus neighbourhood features (experimental).
    Combined,
}

/// How the classifier output selects a regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gating {
    /// Use only the regressor of the predicted class.
    Hard,
    /// Blend class regressors by normalized vote share (experimental).
    Soft,
}

macro_rules! keyword_enum {
    ($ty:ty, $($variant:path => $name:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    other => Err(Error::InvalidArgument(format!("unknown value `{other}` for {}", stringify!($ty)))),
                }
            }
        }
    };
}

keyword_enum!(RegressorFeatures, RegressorFeatures::Raw => "raw", RegressorFeatures::Combined => "combined");
keyword_enum!(Gating, Gating::Hard => "hard", Gating::Soft => "soft");

#[derive(Debug, Clone, PartialEq)]
pub struct RgmmConfig {
    pub threshold_hu: f64,
    pub order: NeighborhoodOrder,
    /// Component-count candidates, one grid per tissue class.
    pub j_candidates: Vec<Vec<usize>>,
    pub selection: SelectionConfig,
    pub tree: TreeConfig,
    pub boost: BoostConfig,
    pub regressor_features: RegressorFeatures,
    pub gating: Gating,
    /// CT value written to voxels outside the mask.
    pub fill_value: f64,
    /// Folds for an optional voxel-level classifier cross-validation.
    pub classifier_cv_folds: Option<usize>,
}

impl Default for RgmmConfig {
    fn default() -> Self {
        Self {
            threshold_hu: DEFAULT_BONE_THRESHOLD_HU,
            order: NeighborhoodOrder::Second,
            j_candidates: vec![vec![5, 6]; N_CLASSES],
            selection: SelectionConfig::default(),
            tree: TreeConfig::default(),
            boost: BoostConfig::default(),
            regressor_features: RegressorFeatures::Raw,
            gating: Gating::Hard,
            fill_value: -1000.0,
            classifier_cv_folds: None,
        }
    }
}

/// Keys accepted by [`RgmmConfig::set`], in serialization order.
pub const CONFIG_KEYS: &[&str] = &[
    "threshold_hu",
    "neighborhood",
    "j_candidates_0",
    "j_candidates_1",
    "selection_criterion",
    "selection_tolerance_se",
    "em_max_iter",
    "em_rel_tol",
    "em_restarts",
    "em_ridge_factor",
    "em_min_weight",
    "n_learners",
    "max_splits",
    "min_leaf",
    "quantile_candidates",
    "rus_ratio",
    "retry_budget",
    "epsilon_min",
    "regressor_features",
    "gating",
    "fill_value",
    "classifier_cv_folds",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

fn parse_optional(key: &str, value: &str) -> Result<Option<usize>> {
    match value.trim() {
        "none" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn show_optional(v: Option<usize>) -> String {
    v.map_or_else(|| "none".to_string(), |n| n.to_string())
}

fn show_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RgmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.threshold_hu.is_finite() || !self.fill_value.is_finite() {
            return Err(Error::InvalidArgument("threshold_hu and fill_value must be finite".into()));
        }
        if self.j_candidates.len() != N_CLASSES {
            return Err(Error::dims("j_candidates classes", N_CLASSES, self.j_candidates.len()));
        }
        if self.j_candidates.iter().any(|c| c.is_empty() || c.contains(&0)) {
            return Err(Error::InvalidArgument("every class needs J candidates >= 1".into()));
        }
        if self.classifier_cv_folds.is_some_and(|k| k < 2) {
            return Err(Error::InvalidArgument("classifier_cv_folds must be >= 2".into()));
        }
        if !(self.selection.tolerance_se >= 0.0 && self.selection.tolerance_se.is_finite()) {
            return Err(Error::InvalidArgument("selection_tolerance_se must be >= 0".into()));
        }
        self.selection.em.validate()?;
        self.tree.validate()?;
        self.boost.validate()
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let list = |v: &str| -> Result<Vec<usize>> { v.split(',').map(|s| parse(key, s)).collect() };
        match key {
            "threshold_hu" => self.threshold_hu = parse(key, value)?,
            "neighborhood" => self.order = value.trim().parse()?,
            "j_candidates_0" => self.j_candidates[0] = list(value)?,
            "j_candidates_1" => self.j_candidates[1] = list(value)?,
            "selection_criterion" => self.selection.criterion = value.trim().parse::<SelectionCriterion>()?,
            "selection_tolerance_se" => self.selection.tolerance_se = parse(key, value)?,
            "em_max_iter" => self.selection.em.max_iter = parse(key, value)?,
            "em_rel_tol" => self.selection.em.rel_tol = parse(key, value)?,
            "em_restarts" => self.selection.em.restarts = parse(key, value)?,
            "em_ridge_factor" => self.selection.em.ridge_factor = parse(key, value)?,
            "em_min_weight" => self.selection.em.min_weight = parse(key, value)?,
            "n_learners" => self.boost.n_learners = parse(key, value)?,
            "max_splits" => self.tree.max_splits = parse(key, value)?,
            "min_leaf" => self.tree.min_leaf = parse(key, value)?,
            "quantile_candidates" => self.tree.quantile_candidates = parse_optional(key, value)?,
            "rus_ratio" => self.boost.target_ratio = parse(key, value)?,
            "retry_budget" => self.boost.retry_budget = parse(key, value)?,
            "epsilon_min" => self.boost.epsilon_min = parse(key, value)?,
            "regressor_features" => self.regressor_features = value.parse()?,
            "gating" => self.gating = value.parse()?,
            "fill_value" => self.fill_value = parse(key, value)?,
            "classifier_cv_folds" => self.classifier_cv_folds = parse_optional(key, value)?,
            other => return Err(Error::InvalidArgument(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` text, in [`CONFIG_KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let em: &EmConfig = &self.selection.em;
        vec![
            ("threshold_hu", self.threshold_hu.to_string()),
            ("neighborhood", self.order.to_string()),
            ("j_candidates_0", show_list(&self.j_candidates[0])),
            ("j_candidates_1", show_list(&self.j_candidates[1])),
            ("selection_criterion", self.selection.criterion.to_string()),
            ("selection_tolerance_se", self.selection.tolerance_se.to_string()),
            ("em_max_iter", em.max_iter.to_string()),
            ("em_rel_tol", em.rel_tol.to_string()),
            ("em_restarts", em.restarts.to_string()),
            ("em_ridge_factor", em.ridge_factor.to_string()),
            ("em_min_weight", em.min_weight.to_string()),
            ("n_learners", self.boost.n_learners.to_string()),
            ("max_splits", self.tree.max_splits.to_string()),
            ("min_leaf", self.tree.min_leaf.to_string()),
            ("quantile_candidates", show_optional(self.tree.quantile_candidates)),
            ("rus_ratio", self.boost.target_ratio.to_string()),
            ("retry_budget", self.boost.retry_budget.to_string()),
            ("epsilon_min", self.boost.epsilon_min.to_string()),
            ("regressor_features", self.regressor_features.to_string()),
            ("gating", self.gating.to_string()),
            ("fill_value", self.fill_value.to_string()),
            ("classifier_cv_folds", show_optional(self.classifier_cv_folds)),
        ]
    }
}

/// Per-class outcome of component-count selection.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ClassSelection {
    pub class: usize,
    pub n_components: usize,
    pub train_rows: usize,
    pub validation_rows: usize,
    /// Selection fell back to scoring on the training rows because the
    /// validation patient had no voxels of this class.
    pub validated_on_train: bool,
    pub candidates: Vec<CandidateScore>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainingReport {
    /// Training patients in assembly order (sorted by id).
    pub patient_ids: Vec<String>,
    pub validation_patient: String,
    pub n_rows: usize,
    pub class_counts: Vec<usize>,
    pub selections: Vec<ClassSelection>,
    pub boost: BoostReport,
    pub classifier_cv: Option<ClassificationMetrics>,
}

#[derive(Debug, Clone)]
pub struct RgmmModel {
    config: RgmmConfig,
    seed: u64,
    n_channels: usize,
    classifier: BoostedEnsemble,
    regressors: TissueGmm,
    conditionals: Vec<ConditionalModel>,
}

/// Output of [`predict_ct`].
#[derive(Debug, Clone)]
pub struct CtPrediction {
    pub ct: Volume,
    /// Predicted class per masked voxel; `-1` outside the mask.
    pub labels: Volume,
    pub n_predicted: usize,
}

/// `x^c` width for `d` channels.
fn combined_width(d: usize, order: NeighborhoodOrder) -> usize {
    d * (1 + order.n_neighbors())
}

fn layout_descriptor(d: usize, order: NeighborhoodOrder) -> String {
    format!("channels={d} order={order}")
}

impl RgmmModel {
    pub fn new(config: RgmmConfig, seed: u64, n_channels: usize, classifier: BoostedEnsemble, regressors: TissueGmm) -> Result<Self> {
        config.validate()?;
        let width = combined_width(n_channels, config.order);
        if classifier.n_features() != width {
            return Err(Error::dims("classifier features", width, classifier.n_features()));
        }
        if classifier.n_classes() != regressors.n_classes() || regressors.n_classes() != N_CLASSES {
            return Err(Error::dims("class count", N_CLASSES, regressors.n_classes()));
        }
        let reg_dim = 1 + match config.regressor_features {
            RegressorFeatures::Raw => n_channels,
            RegressorFeatures::Combined => width,
        };
        if regressors.dim() != reg_dim {
            return Err(Error::dims("regressor dimension", reg_dim, regressors.dim()));
        }
        let conditionals = regressors
            .models()
            .iter()
            .map(ConditionalModel::new)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            seed,
            n_channels,
            classifier,
            regressors,
            conditionals,
        })
    }

    pub fn config(&self) -> &RgmmConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn classifier(&self) -> &BoostedEnsemble {
        &self.classifier
    }

    pub fn regressors(&self) -> &TissueGmm {
        &self.regressors
    }

    /// Length of the classifier's `x^c` rows.
    pub fn feature_width(&self) -> usize {
        combined_width(self.n_channels, self.config.order)
    }

    /// The slice of an `x^c` row that the regressors condition on.
    fn regressor_input<'a>(&self, row: &'a [f64]) -> &'a [f64] {
        match self.config.regressor_features {
            RegressorFeatures::Raw => &row[..self.n_channels],
            RegressorFeatures::Combined => row,
        }
    }

    /// `E[y | x, t = class]` for one `x^c` row.
    pub fn regress(&self, class: usize, row: &[f64]) -> f64 {
        self.conditionals[class].predict(self.regressor_input(row))
    }

    fn predict_row(&self, row: &[f64], scores: &mut [f64]) -> (u8, f64) {
        self.classifier.scores_into(row, scores);
        let label = crate::tree::argmax(scores);
        let y = match self.config.gating {
            Gating::Hard => self.regress(label, row),
            Gating::Soft => {
                let total: f64 = scores.iter().sum();
                if total > 0.0 {
                    (0..scores.len()).map(|k| scores[k] / total * self.regress(k, row)).sum()
                } else {
                    self.regress(label, row)
                }
            }
        };
        (label as u8, y)
    }

    /// Predicted labels and CT values for row-major `x^c` rows.
    pub fn predict_rows(&self, rows: &[f64]) -> Result<(Vec<u8>, Vec<f64>)> {
        let w = self.feature_width();
        if !rows.len().is_multiple_of(w) {
            return Err(Error::dims("feature rows", w, rows.len() % w));
        }
        let n = rows.len() / w;
        let mut labels = vec![0u8; n];
        let mut values = vec![0.0; n];
        labels
            .par_chunks_mut(CHUNK_ROWS)
            .zip(values.par_chunks_mut(CHUNK_ROWS))
            .enumerate()
            .for_each(|(c, (ls, vs))| {
                let mut scores = vec![0.0; N_CLASSES];
                for (k, (l, v)) in ls.iter_mut().zip(vs.iter_mut()).enumerate() {
                    let r = c * CHUNK_ROWS + k;
                    (*l, *v) = self.predict_row(&rows[r * w..(r + 1) * w], &mut scores);
                }
            });
        Ok((labels, values))
    }

    /// CT values when the class of every row is given.
    pub fn regress_rows(&self, rows: &[f64], labels: &[u8]) -> Result<Vec<f64>> {
        let w = self.feature_width();
        if rows.len() != labels.len() * w {
            return Err(Error::dims("feature rows", labels.len() * w, rows.len()));
        }
        if labels.iter().any(|&t| t as usize >= N_CLASSES) {
            return Err(Error::InvalidArgument("label outside the model's classes".into()));
        }
        Ok(rows
            .par_chunks(w)
            .zip(labels.par_iter())
            .map(|(row, &t)| self.regress(t as usize, row))
            .collect())
    }
}

/// Trains the classifier and per-class regressors on `patients`.
///
/// Patients are processed in id order so the result does not depend on the
/// order they are passed in. The patient with the largest id is the
/// validation split for component-count selection; the chosen mixtures are
/// those fitted on the remaining patients.
pub fn train_pipeline(patients: &[PatientDataset], config: &RgmmConfig, seed: u64) -> Result<(RgmmModel, TrainingReport)> {
    config.validate()?;
    if patients.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            found: patients.len(),
        });
    }
    let mut sorted: Vec<&PatientDataset> = patients.iter().collect();
    sorted.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].patient_id == w[1].patient_id) {
        return Err(Error::InvalidArgument(format!("duplicate patient id `{}`", w[0].patient_id)));
    }
    let d = sorted[0].n_channels();
    let table = assemble(&sorted, config.order, config.threshold_hu)?;

    let mut class_counts = vec![0usize; N_CLASSES];
    table.labels().iter().for_each(|&t| class_counts[t as usize] += 1);
    if let Some(k) = class_counts.iter().position(|&c| c == 0) {
        return Err(Error::ClassAbsent(k));
    }

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let gmm_seeds: Vec<u64> = (0..N_CLASSES).map(|_| master.random()).collect();
    let boost_seed: u64 = master.random();
    let cv_seed: u64 = master.random();

    let val_patient = (sorted.len() - 1) as u32;
    let (train_rows, val_rows): (Vec<usize>, Vec<usize>) =
        (0..table.n_rows()).partition(|&r| table.patient_of_rows()[r] != val_patient);

    let combined = config.regressor_features == RegressorFeatures::Combined;
    let dim = 1 + if combined { table.width() } else { d };
    let mut models = Vec::with_capacity(N_CLASSES);
    let mut selections = Vec::with_capacity(N_CLASSES);
    for (k, &gmm_seed) in gmm_seeds.iter().enumerate() {
        let train = table.joint_rows(k as u8, combined, Some(&train_rows));
        let mut val = table.joint_rows(k as u8, combined, Some(&val_rows));
        let n_train = train.len() / dim;
        let smallest = *config.j_candidates[k].iter().min().unwrap_or(&1);
        if n_train < smallest.max(2) {
            return Err(Error::TooFewSamples {
                needed: smallest.max(2),
                found: n_train,
            });
        }
        let validated_on_train = val.is_empty();
        if validated_on_train {
            val = train.clone();
        }
        let sel = select_model(&train, &val, dim, &config.j_candidates[k], &config.selection, gmm_seed)?;
        selections.push(ClassSelection {
            class: k,
            n_components: sel.n_components,
            train_rows: n_train,
            validation_rows: if validated_on_train { 0 } else { val.len() / dim },
            validated_on_train,
            candidates: sel.candidates,
        });
        models.push(sel.model);
    }
    let regressors = TissueGmm::new(models)?;

    let set = TrainingSet::new(table.features(), table.width(), table.labels(), N_CLASSES)?;
    let layout = layout_descriptor(d, config.order);
    let (classifier, boost_report) = train_rusboost(&set, &config.tree, &config.boost, &layout, boost_seed)?;

    let classifier_cv = match config.classifier_cv_folds {
        Some(folds) => Some(classifier_cv(&table, config, folds, cv_seed)?),
        None => None,
    };

    let model = RgmmModel::new(config.clone(), seed, d, classifier, regressors)?;
    let report = TrainingReport {
        patient_ids: table.patient_ids().to_vec(),
        validation_patient: table.patient_ids()[val_patient as usize].clone(),
        n_rows: table.n_rows(),
        class_counts,
        selections,
        boost: boost_report,
        classifier_cv,
    };
    Ok((model, report))
}

/// Voxel-level k-fold cross-validation of the boosted classifier.
pub fn classifier_cv(table: &SampleTable, config: &RgmmConfig, folds: usize, seed: u64) -> Result<ClassificationMetrics> {
    let w = table.width();
    let labels = table.labels();
    let feats = table.features();
    kfold_cv(labels, folds, seed, |train, test| {
        let mut x = Vec::with_capacity(train.len() * w);
        let mut t = Vec::with_capacity(train.len());
        for &r in train {
            x.extend_from_slice(table.combined(r));
            t.push(labels[r]);
        }
        let set = TrainingSet::new(&x, w, &t, N_CLASSES)?;
        let (ens, _) = train_rusboost(&set, &config.tree, &config.boost, "", seed)?;
        let mut rows = Vec::with_capacity(test.len() * w);
        for &r in test {
            rows.extend_from_slice(&feats[r * w..(r + 1) * w]);
        }
        ens.predict_rows(&rows)
    })
}

/// Estimates CT over `mask` from MR channels.
pub fn predict_ct(model: &RgmmModel, mr_channels: &[Volume], mask: &Volume) -> Result<CtPrediction> {
    if mr_channels.len() != model.n_channels {
        return Err(Error::dims("MR channel count", model.n_channels, mr_channels.len()));
    }
    crate::volume::check_geometry(mr_channels, mask)?;
    crate::volume::check_binary_mask(mask)?;
    let fill = model.config.fill_value as f32;
    let mut ct = Volume::filled(mask.dims(), mask.spacing(), fill)?;
    let mut labels = Volume::filled(mask.dims(), mask.spacing(), -1.0)?;
    if mask.data().iter().all(|&m| m == 0.0) {
        return Ok(CtPrediction {
            ct,
            labels,
            n_predicted: 0,
        });
    }
    let (voxels, rows) = extract_unlabeled(mr_channels, mask, model.config.order)?;
    let (t, y) = model.predict_rows(&rows)?;
    for ((&v, &t), &y) in voxels.iter().zip(&t).zip(&y) {
        ct.data_mut()[v] = y as f32;
        labels.data_mut()[v] = t as f32;
    }
    Ok(CtPrediction {
        ct,
        labels,
        n_predicted: voxels.len(),
    })
}

const BUNDLE_MAGIC: &str = "rgmm-model 1";

/// Single-file model bundle: header, config, mixtures and ensemble.
pub fn write_bundle(model: &RgmmModel) -> String {
    let mut out = format!("{BUNDLE_MAGIC}\nchannels {}\nseed {}\n[config]\n", model.n_channels, model.seed);
    for (k, v) in model.config.to_pairs() {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out.push_str("[gmm]\n");
    out.push_str(&write_tissue_gmm(&model.regressors));
    out.push_str("[ensemble]\n");
    out.push_str(&write_ensemble(&model.classifier));
    out
}

pub fn read_bundle(text: &str) -> Result<RgmmModel> {
    let bad = |d: &str| Error::format("model bundle", d.to_string());
    let gmm_at = text.find("\n[gmm]\n").ok_or_else(|| bad("missing [gmm] section"))?;
    let ens_at = text.find("\n[ensemble]\n").ok_or_else(|| bad("missing [ensemble] section"))?;
    if ens_at < gmm_at {
        return Err(bad("sections out of order"));
    }
    let head = &text[..gmm_at];
    let gmm_text = &text[gmm_at + "\n[gmm]\n".len()..=ens_at];
    let ens_text = &text[ens_at + "\n[ensemble]\n".len()..];

    let mut lines = head.lines();
    if lines.next() != Some(BUNDLE_MAGIC) {
        return Err(bad("bad magic line"));
    }
    let field = |line: Option<&str>, key: &str| -> Result<u64> {
        line.and_then(|l| l.strip_prefix(key))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::format("model bundle", format!("missing `{key}` line")))
    };
    let n_channels = field(lines.next(), "channels")? as usize;
    let seed = field(lines.next(), "seed")?;
    if lines.next() != Some("[config]") {
        return Err(bad("missing [config] section"));
    }
    let mut config = RgmmConfig::default();
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("model bundle", format!("bad config line `{line}`")))?;
        config.set(k.trim(), v.trim())?;
    }
    let regressors = read_tissue_gmm(gmm_text)?;
    let classifier = read_ensemble(ens_text)?;
    if classifier.layout() != layout_descriptor(n_channels, config.order) {
        return Err(Error::dims(
            "classifier layout",
            layout_descriptor(n_channels, config.order),
            classifier.layout(),
        ));
    }
    RgmmModel::new(config, seed, n_channels, classifier, regressors)
}
