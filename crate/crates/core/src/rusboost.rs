//! Boosting with random undersampling of the majority class.
//!
//! Each round draws a weighted bootstrap from the per-sample mislabel mass,
//! undersamples the majority class, fits a confidence-rated tree, scores it
//! with the pseudo-loss over the full training set and reweights the
//! mislabel distribution. The pseudo-loss carries the `1/2` factor, so a
//! learner whose confidences ignore the input scores exactly 0.5.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tree::{argmax, train_tree_presorted, PresortedIndex, TrainingSet, Tree, TreeConfig};

const CHUNK_ROWS: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct BoostConfig {
    /// Number of boosting rounds (`M`).
    pub n_learners: usize,
    /// Minority:majority count ratio after undersampling.
    pub target_ratio: f64,
    /// Extra attempts for a round whose learner scores `eps >= 0.5`.
    pub retry_budget: usize,
    /// Floor applied to a zero pseudo-loss.
    pub epsilon_min: f64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            n_learners: 150,
            target_ratio: 1.0,
            retry_budget: 3,
            epsilon_min: 1e-10,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_learners == 0 {
            return Err(Error::InvalidArgument("n_learners must be >= 1".into()));
        }
        if !(self.target_ratio > 0.0) || !self.target_ratio.is_finite() {
            return Err(Error::InvalidArgument(format!("target_ratio must be > 0, got {}", self.target_ratio)));
        }
        if !(self.epsilon_min > 0.0 && self.epsilon_min < 0.5) {
            return Err(Error::InvalidArgument(format!("epsilon_min must be in (0, 0.5), got {}", self.epsilon_min)));
        }
        Ok(())
    }
}

/// Weights `W(i, t)` over the mislabel pairs `t != t_i`.
///
/// Stored densely as `n x K`; the entries at `(i, t_i)` are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MislabelDistribution {
    labels: Vec<u8>,
    n_classes: usize,
    weights: Vec<f64>,
}

impl MislabelDistribution {
    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// `|S| = n (K - 1)`.
    pub fn support_size(&self) -> usize {
        self.labels.len() * (self.n_classes - 1)
    }

    pub fn weight(&self, i: usize, t: usize) -> f64 {
        self.weights[i * self.n_classes + t]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Per-sample selection mass: `sum_{t != t_i} W(i, t)`.
    pub fn sample_weights(&self) -> Vec<f64> {
        self.weights.chunks_exact(self.n_classes).map(|r| r.iter().sum()).collect()
    }

    fn reset_uniform(&mut self) {
        let w = 1.0 / self.support_size() as f64;
        for (i, row) in self.weights.chunks_exact_mut(self.n_classes).enumerate() {
            for (t, v) in row.iter_mut().enumerate() {
                *v = if t == self.labels[i] as usize { 0.0 } else { w };
            }
        }
    }

    /// `W(i,t) <- W(i,t) * alpha^{(1 + h(x_i,t_i) - h(x_i,t)) / 2}`, then
    /// renormalized. `confidences` is `n x K`, row-major.
    ///
    /// Returns `true` when every updated weight underflowed and the
    /// distribution was reset to uniform.
    pub fn update(&mut self, confidences: &[f64], alpha: f64) -> Result<bool> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must be in (0, 1), got {alpha}")));
        }
        check_confidences(confidences, self.labels.len(), self.n_classes)?;
        let k = self.n_classes;
        for (i, (row, h)) in self.weights.chunks_exact_mut(k).zip(confidences.chunks_exact(k)).enumerate() {
            let ti = self.labels[i] as usize;
            for t in 0..k {
                if t != ti {
                    row[t] *= alpha.powf(0.5 * (1.0 + h[ti] - h[t]));
                }
            }
        }
        let sum = self.sum();
        if !(sum > 0.0) || !sum.is_finite() {
            self.reset_uniform();
            return Ok(true);
        }
        for v in &mut self.weights {
            *v /= sum;
        }
        Ok(false)
    }
}

/// Uniform `1/|S|` over every mislabel pair.
pub fn init_mislabel(labels: &[u8], n_classes: usize) -> Result<MislabelDistribution> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("no samples for the mislabel distribution"));
    }
    if n_classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    if let Some(&t) = labels.iter().find(|&&t| t as usize >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {t} outside 0..{n_classes}")));
    }
    let mut d = MislabelDistribution {
        labels: labels.to_vec(),
        n_classes,
        weights: vec![0.0; labels.len() * n_classes],
    };
    d.reset_uniform();
    Ok(d)
}

fn check_confidences(confidences: &[f64], n: usize, k: usize) -> Result<()> {
    if confidences.len() != n * k {
        return Err(Error::dims("confidences", n * k, confidences.len()));
    }
    if let Some(&value) = confidences.iter().find(|h| !(0.0..=1.0).contains(*h)) {
        return Err(Error::ConfidenceOutOfRange { value });
    }
    Ok(())
}

/// A resampled training set: source rows (repeats allowed) and their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Resample {
    pub rows: Vec<usize>,
    /// `W'`: uniform over the retained draws, summing to 1.
    pub weights: Vec<f64>,
    pub class_counts: Vec<usize>,
}

/// Weighted draw with replacement of `n` rows followed by undersampling of
/// every non-minority class to `minority_draws / target_ratio` rows.
///
/// The minority class is the least frequent label in `labels` (lowest label
/// on ties).
pub fn rus_resample(
    labels: &[u8],
    n_classes: usize,
    sample_weights: &[f64],
    target_ratio: f64,
    seed: u64,
) -> Result<Resample> {
    if labels.len() != sample_weights.len() {
        return Err(Error::dims("resample weights", labels.len(), sample_weights.len()));
    }
    if !(target_ratio > 0.0) || !target_ratio.is_finite() {
        return Err(Error::InvalidArgument(format!("target_ratio must be > 0, got {target_ratio}")));
    }
    let mut counts = vec![0usize; n_classes];
    for &t in labels {
        *counts
            .get_mut(t as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("label {t} outside 0..{n_classes}")))? += 1;
    }
    if let Some(absent) = counts.iter().position(|&c| c == 0) {
        return Err(Error::ClassAbsent(absent));
    }
    let minority = (0..n_classes).min_by_key(|&k| (counts[k], k)).unwrap_or(0);
    let picker = WeightedIndex::new(sample_weights)
        .map_err(|e| Error::InvalidArgument(format!("resample weights: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for _ in 0..labels.len() {
        let r = picker.sample(&mut rng);
        by_class[labels[r] as usize].push(r);
    }
    let m = by_class[minority].len();
    if m == 0 {
        return Err(Error::ClassAbsent(minority));
    }
    let keep = ((m as f64 / target_ratio).round() as usize).max(1);
    for (k, draws) in by_class.iter_mut().enumerate() {
        if k != minority && draws.len() > keep {
            draws.shuffle(&mut rng);
            draws.truncate(keep);
            draws.sort_unstable();
        }
    }
    let class_counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let rows: Vec<usize> = by_class.into_iter().flatten().collect();
    let weights = vec![1.0 / rows.len() as f64; rows.len()];
    Ok(Resample {
        rows,
        weights,
        class_counts,
    })
}

/// `eps = 1/2 sum_{(i,t) in S} W(i,t) (1 - h(x_i,t_i) + h(x_i,t))`.
///
/// `confidences` is `n x K`, row-major. The raw sum without the `1/2` is
/// `2 eps`.
pub fn pseudo_loss(confidences: &[f64], dist: &MislabelDistribution) -> Result<f64> {
    let k = dist.n_classes;
    check_confidences(confidences, dist.n_samples(), k)?;
    let sum = dist.sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized { sum });
    }
    let mut raw = 0.0;
    for (i, h) in confidences.chunks_exact(k).enumerate() {
        let ti = dist.labels[i] as usize;
        for t in 0..k {
            if t != ti {
                raw += dist.weight(i, t) * (1.0 - h[ti] + h[t]);
            }
        }
    }
    // Dividing by the stored total keeps uniform and inverted confidences at
    // exactly 0.5 and 1 when the weights do not sum to 1 in floating point.
    Ok((0.5 * raw / sum).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub tree: Tree,
    /// Pseudo-loss after the `epsilon_min` floor.
    pub epsilon: f64,
    /// `epsilon / (1 - epsilon)`.
    pub alpha: f64,
}

impl Learner {
    pub fn new(tree: Tree, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::InvalidArgument(format!("learner epsilon must be in (0, 0.5), got {epsilon}")));
        }
        Ok(Self {
            tree,
            epsilon,
            alpha: epsilon / (1.0 - epsilon),
        })
    }

    /// `ln(1 / alpha)`.
    pub fn vote_weight(&self) -> f64 {
        -self.alpha.ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostedEnsemble {
    learners: Vec<Learner>,
    n_classes: usize,
    n_features: usize,
    config: BoostConfig,
    /// Opaque description of the feature vector the learners expect.
    layout: String,
}

impl BoostedEnsemble {
    pub fn new(learners: Vec<Learner>, config: BoostConfig, layout: impl Into<String>) -> Result<Self> {
        let first = learners.first().ok_or(Error::NoLearners { rounds: config.n_learners })?;
        let (n_classes, n_features) = (first.tree.n_classes(), first.tree.n_features());
        for l in &learners {
            if l.tree.n_classes() != n_classes {
                return Err(Error::dims("learner classes", n_classes, l.tree.n_classes()));
            }
            if l.tree.n_features() != n_features {
                return Err(Error::dims("learner features", n_features, l.tree.n_features()));
            }
        }
        let layout = layout.into();
        if layout.contains('\n') {
            return Err(Error::InvalidArgument("layout descriptor must be a single line".into()));
        }
        Ok(Self {
            learners,
            n_classes,
            n_features,
            config,
            layout,
        })
    }

    pub fn learners(&self) -> &[Learner] {
        &self.learners
    }

    pub fn n_learners(&self) -> usize {
        self.learners.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn config(&self) -> &BoostConfig {
        &self.config
    }

    pub fn layout(&self) -> &str {
        &self.layout
    }

    /// `sum_j h_j(x, v) ln(1/alpha_j)` for every label `v`.
    pub fn scores_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for l in &self.learners {
            let w = l.vote_weight();
            for (o, h) in out.iter_mut().zip(l.tree.confidence_unchecked(x)) {
                *o += h * w;
            }
        }
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut out = vec![0.0; self.n_classes];
        self.scores_into(x, &mut out);
        Ok(out)
    }

    /// Scores divided by the total vote weight; a distribution over labels.
    pub fn vote_shares(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut s = self.scores(x)?;
        let total: f64 = s.iter().sum();
        if total > 0.0 {
            s.iter_mut().for_each(|v| *v /= total);
        }
        Ok(s)
    }

    /// Weighted-vote argmax; exact ties go to the lowest label.
    pub fn predict_label(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.scores(x)?))
    }

    /// Labels for row-major `rows` of width `n_features`.
    pub fn predict_rows(&self, rows: &[f64]) -> Result<Vec<u8>> {
        if !rows.len().is_multiple_of(self.n_features) {
            return Err(Error::dims("ensemble input rows", self.n_features, rows.len() % self.n_features));
        }
        let n = rows.len() / self.n_features;
        let mut out = vec![0u8; n];
        out.par_chunks_mut(CHUNK_ROWS).enumerate().for_each(|(c, labels)| {
            let mut scores = vec![0.0; self.n_classes];
            for (k, l) in labels.iter_mut().enumerate() {
                let r = c * CHUNK_ROWS + k;
                self.scores_into(&rows[r * self.n_features..(r + 1) * self.n_features], &mut scores);
                *l = argmax(&scores) as u8;
            }
        });
        Ok(out)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::dims("ensemble input", self.n_features, x.len()));
        }
        Ok(())
    }
}

/// Per-round training record.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub attempts: usize,
    /// Pseudo-loss of the accepted learner (with the `1/2` factor).
    pub epsilon: Option<f64>,
    /// The same loss without the `1/2` factor.
    pub epsilon_raw: Option<f64>,
    pub alpha: Option<f64>,
    pub weights_reset: bool,
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize)]
pub struct BoostReport {
    pub rounds: Vec<RoundRecord>,
    /// Learners rejected for `eps >= 0.5`.
    pub discarded: usize,
    /// Rounds that produced no learner after all retries.
    pub skipped: usize,
    /// Resamples that drew no minority sample.
    pub empty_draws: usize,
}

/// Trains a boosted ensemble. Bit-reproducible for a fixed `seed`.
pub fn train_rusboost(
    set: &TrainingSet<'_>,
    tree_cfg: &TreeConfig,
    cfg: &BoostConfig,
    layout: &str,
    seed: u64,
) -> Result<(BoostedEnsemble, BoostReport)> {
    cfg.validate()?;
    tree_cfg.validate()?;
    let labels = set.labels();
    let k = set.n_classes();
    let mut dist = init_mislabel(labels, k)?;
    let index = PresortedIndex::new(set);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = BoostReport::default();
    let mut learners = Vec::with_capacity(cfg.n_learners);
    let mut confidences = vec![0.0; set.n_rows() * k];

    for round in 0..cfg.n_learners {
        let mut record = RoundRecord {
            round,
            attempts: 0,
            epsilon: None,
            epsilon_raw: None,
            alpha: None,
            weights_reset: false,
        };
        while record.attempts <= cfg.retry_budget {
            record.attempts += 1;
            let draw_seed: u64 = rng.random();
            let resample = match rus_resample(labels, k, &dist.sample_weights(), cfg.target_ratio, draw_seed) {
                Ok(r) => r,
                Err(Error::ClassAbsent(_)) if counts_all_present(labels, k) => {
                    report.empty_draws += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let tree = train_tree_presorted(set, &index, &resample.rows, &resample.weights, tree_cfg)?;
            fill_confidences(&tree, set, &mut confidences);
            let eps = pseudo_loss(&confidences, &dist)?;
            if eps >= 0.5 {
                report.discarded += 1;
                continue;
            }
            let learner = Learner::new(tree, eps.max(cfg.epsilon_min))?;
            record.weights_reset = dist.update(&confidences, learner.alpha)?;
            record.epsilon = Some(eps);
            record.epsilon_raw = Some(2.0 * eps);
            record.alpha = Some(learner.alpha);
            learners.push(learner);
            break;
        }
        if record.epsilon.is_none() {
            report.skipped += 1;
        }
        report.rounds.push(record);
    }
    if learners.is_empty() {
        return Err(Error::NoLearners { rounds: cfg.n_learners });
    }
    let ensemble = BoostedEnsemble::new(learners, cfg.clone(), layout)?;
    Ok((ensemble, report))
}

fn counts_all_present(labels: &[u8], k: usize) -> bool {
    let mut seen = vec![false; k];
    labels.iter().for_each(|&t| seen[t as usize] = true);
    seen.iter().all(|&s| s)
}

fn fill_confidences(tree: &Tree, set: &TrainingSet<'_>, out: &mut [f64]) {
    let k = set.n_classes();
    out.par_chunks_mut(CHUNK_ROWS * k).enumerate().for_each(|(c, block)| {
        for (j, row) in block.chunks_exact_mut(k).enumerate() {
            row.copy_from_slice(tree.confidence_unchecked(set.row(c * CHUNK_ROWS + j)));
        }
    });
}

const MAGIC: &str = "rgmm-ensemble 1";

pub fn write_ensemble(ens: &BoostedEnsemble) -> String {
    let c = &ens.config;
    let mut out = format!(
        "{MAGIC}\nclasses {}\nfeatures {}\nlayout {}\nconfig n_learners {} target_ratio {:e} retry_budget {} epsilon_min {:e}\nlearners {}\n",
        ens.n_classes,
        ens.n_features,
        ens.layout,
        c.n_learners,
        c.target_ratio,
        c.retry_budget,
        c.epsilon_min,
        ens.learners.len()
    );
    for l in &ens.learners {
        out.push_str(&format!("learner epsilon {:e}\n", l.epsilon));
        l.tree.write_text(&mut out);
    }
    out.push_str("end\n");
    out
}

pub fn read_ensemble(text: &str) -> Result<BoostedEnsemble> {
    let bad = |d: String| Error::format("ensemble", d);
    let mut lines = text.lines();
    if next(&mut lines, "magic")? != MAGIC {
        return Err(bad("bad magic line".into()));
    }
    let classes: usize = keyed(next(&mut lines, "classes")?, "classes")?;
    let features: usize = keyed(next(&mut lines, "features")?, "features")?;
    let layout = next(&mut lines, "layout")?
        .strip_prefix("layout")
        .ok_or_else(|| bad("missing layout line".into()))?
        .trim()
        .to_string();
    let cfg_line = next(&mut lines, "config")?;
    let p: Vec<&str> = cfg_line.split_whitespace().collect();
    if p.len() != 9 || p[0] != "config" || p[1] != "n_learners" || p[3] != "target_ratio" || p[5] != "retry_budget" || p[7] != "epsilon_min" {
        return Err(bad(format!("bad config line `{cfg_line}`")));
    }
    let parse_err = |s: &str| bad(format!("bad number `{s}`"));
    let config = BoostConfig {
        n_learners: p[2].parse().map_err(|_| parse_err(p[2]))?,
        target_ratio: p[4].parse().map_err(|_| parse_err(p[4]))?,
        retry_budget: p[6].parse().map_err(|_| parse_err(p[6]))?,
        epsilon_min: p[8].parse().map_err(|_| parse_err(p[8]))?,
    };
    let n: usize = keyed(next(&mut lines, "learners")?, "learners")?;
    let mut learners = Vec::with_capacity(n);
    for _ in 0..n {
        let eps: f64 = keyed(next(&mut lines, "learner")?, "learner epsilon")?;
        let tree = Tree::read_text(&mut lines)?;
        if tree.n_classes() != classes || tree.n_features() != features {
            return Err(bad("tree shape disagrees with ensemble header".into()));
        }
        learners.push(Learner::new(tree, eps)?);
    }
    if lines.next() != Some("end") {
        return Err(bad("missing end marker".into()));
    }
    BoostedEnsemble::new(learners, config, layout)
}

fn next<'a>(lines: &mut std::str::Lines<'a>, what: &str) -> Result<&'a str> {
    lines
        .next()
        .ok_or_else(|| Error::format("ensemble", format!("unexpected end, wanted {what}")))
}

fn keyed<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
    line.strip_prefix(key)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| Error::format("ensemble", format!("expected `{key} <value>`, got `{line}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::train_tree;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn init_is_uniform_over_mislabels() {
        let d = init_mislabel(&[0, 1, 0, 1], 2).unwrap();
        assert_eq!(d.support_size(), 4);
        assert!(d.weights().iter().enumerate().all(|(j, &w)| w == if j % 2 == (j / 2) % 2 { 0.0 } else { 0.25 }));
        let d = init_mislabel(&[0, 1, 2], 3).unwrap();
        assert_eq!(d.support_size(), 6);
        for i in 0..3 {
            for t in 0..3 {
                assert_eq!(d.weight(i, t), if t == i { 0.0 } else { 1.0 / 6.0 });
            }
        }
        assert!(init_mislabel(&[], 2).is_err());
    }

    fn conf_from(labels: &[u8], f: impl Fn(u8) -> [f64; 2]) -> Vec<f64> {
        labels.iter().flat_map(|&t| f(t)).collect()
    }

    #[test]
    fn pseudo_loss_calibration() {
        let labels = [0u8, 1, 1, 0, 1];
        let d = init_mislabel(&labels, 2).unwrap();
        let perfect = conf_from(&labels, |t| if t == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
        let inverted = conf_from(&labels, |t| if t == 0 { [0.0, 1.0] } else { [1.0, 0.0] });
        let flat = conf_from(&labels, |_| [0.5, 0.5]);
        assert_eq!(pseudo_loss(&perfect, &d).unwrap(), 0.0);
        assert_eq!(pseudo_loss(&flat, &d).unwrap(), 0.5);
        assert_eq!(pseudo_loss(&inverted, &d).unwrap(), 1.0);
        let bad = conf_from(&labels, |_| [1.5, -0.5]);
        assert!(matches!(pseudo_loss(&bad, &d), Err(Error::ConfidenceOutOfRange { .. })));
    }

    #[test]
    fn update_exponents() {
        let labels = [0u8, 1];
        let mut d = init_mislabel(&labels, 2).unwrap();
        // Sample 0 fully correct, sample 1 fully wrong.
        let conf = [1.0, 0.0, 1.0, 0.0];
        let alpha = 0.25;
        d.update(&conf, alpha).unwrap();
        // Pre-normalization factors alpha and 1.
        let expect0 = alpha / (alpha + 1.0);
        assert!((d.weight(0, 1) - expect0).abs() < 1e-15);
        assert!((d.weight(1, 0) - 1.0 / (alpha + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn update_underflow_resets() {
        let labels = [0u8, 1];
        let mut d = init_mislabel(&labels, 2).unwrap();
        let conf = [1.0, 0.0, 0.0, 1.0];
        for _ in 0..2000 {
            if d.update(&conf, 1e-300).unwrap() {
                assert_eq!(d.weights(), init_mislabel(&labels, 2).unwrap().weights());
                return;
            }
        }
        // Uniform correctness renormalizes cleanly; never underflows.
        assert!((d.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resample_ratio_one_to_one() {
        let labels: Vec<u8> = (0..100).map(|i| (i < 10) as u8).collect();
        let w = vec![0.01; 100];
        for seed in 0..20 {
            let r = rus_resample(&labels, 2, &w, 1.0, seed).unwrap();
            assert_eq!(r.class_counts[0], r.class_counts[1]);
            let minority_draws = r.rows.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(minority_draws, r.class_counts[1]);
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_balanced_input_keeps_counts() {
        // Binomial(100, 0.5) minority draws; 99% two-sided bound is +-13.
        let labels: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let w = vec![1.0; 100];
        let mut total = 0usize;
        for seed in 0..200 {
            let r = rus_resample(&labels, 2, &w, 1.0, seed).unwrap();
            let m = *r.class_counts.iter().min().unwrap();
            assert!(m >= 50 - 13, "seed {seed}: {:?}", r.class_counts);
            total += r.rows.len();
        }
        // Expected retained size is 2 E[min(B, 100 - B)] ~ 92.
        let mean = total as f64 / 200.0;
        assert!((85.0..=100.0).contains(&mean), "mean retained {mean}");
    }

    #[test]
    fn heavy_sample_is_drawn_more() {
        let labels: Vec<u8> = (0..50).map(|i| (i < 25) as u8).collect();
        let mut w = vec![1.0; 50];
        w[30] = 10.0;
        let mut freq = vec![0usize; 50];
        for seed in 0..1000 {
            for r in rus_resample(&labels, 2, &w, 1.0, seed).unwrap().rows {
                freq[r] += 1;
            }
        }
        assert!((0..50).filter(|&i| i != 30).all(|i| freq[30] > freq[i]));
    }

    #[test]
    fn resample_errors() {
        assert!(matches!(rus_resample(&[0, 0], 2, &[1.0, 1.0], 1.0, 0), Err(Error::ClassAbsent(1))));
        assert!(rus_resample(&[0, 1], 2, &[1.0, 1.0], 0.0, 0).is_err());
    }

    fn leaf(label: u8) -> Tree {
        leaf_with(label, 1)
    }

    fn leaf_with(label: u8, n_features: usize) -> Tree {
        let x: Vec<f64> = (0..2 * n_features).map(|v| v as f64).collect();
        let t = [label, label];
        let set = TrainingSet::new(&x, n_features, &t, 2).unwrap();
        train_tree(&set, &[0, 1], &[1.0, 1.0], &TreeConfig::default()).unwrap()
    }

    #[test]
    fn unanimous_and_tied_votes() {
        let ens = BoostedEnsemble::new(
            vec![Learner::new(leaf(1), 0.1).unwrap(), Learner::new(leaf(1), 0.3).unwrap()],
            BoostConfig::default(),
            "",
        )
        .unwrap();
        assert_eq!(ens.predict_label(&[0.3]).unwrap(), 1);

        let tie = BoostedEnsemble::new(
            vec![Learner::new(leaf(1), 0.2).unwrap(), Learner::new(leaf(0), 0.2).unwrap()],
            BoostConfig::default(),
            "",
        )
        .unwrap();
        assert_eq!(tie.scores(&[0.0]).unwrap()[0], tie.scores(&[0.0]).unwrap()[1]);
        assert_eq!(tie.predict_label(&[0.0]).unwrap(), 0);
        assert!(matches!(tie.predict_label(&[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    /// Two Gaussian blobs with a minority fraction near 0.18.
    fn imbalanced(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(2 * n);
        let mut t = Vec::with_capacity(n);
        for _ in 0..n {
            let minority = rng.random_bool(0.18);
            let c = if minority { 1.2 } else { 0.0 };
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            x.extend_from_slice(&[c + a, c + b]);
            t.push(minority as u8);
        }
        (x, t)
    }

    fn small_trees() -> TreeConfig {
        TreeConfig {
            max_splits: 8,
            min_leaf: 5,
            quantile_candidates: None,
        }
    }

    #[test]
    fn separable_data_fits_exactly() {
        let mut x = Vec::new();
        let mut t = Vec::new();
        for i in 0..60 {
            let a = (i % 10) as f64 / 10.0;
            let b = (i / 10) as f64 / 6.0;
            x.extend_from_slice(&[a, b]);
            t.push((a + b > 0.9) as u8);
        }
        let set = TrainingSet::new(&x, 2, &t, 2).unwrap();
        let cfg = BoostConfig {
            n_learners: 10,
            ..Default::default()
        };
        let tree_cfg = TreeConfig {
            min_leaf: 1,
            ..Default::default()
        };
        let (ens, _) = train_rusboost(&set, &tree_cfg, &cfg, "", 3).unwrap();
        assert_eq!(ens.predict_rows(&x).unwrap(), t);
    }

    #[test]
    fn single_round_matches_its_tree() {
        let (x, t) = imbalanced(500, 1);
        let set = TrainingSet::new(&x, 2, &t, 2).unwrap();
        let cfg = BoostConfig {
            n_learners: 1,
            ..Default::default()
        };
        let (ens, _) = train_rusboost(&set, &small_trees(), &cfg, "", 9).unwrap();
        let tree = &ens.learners()[0].tree;
        for r in 0..set.n_rows() {
            assert_eq!(ens.predict_label(set.row(r)).unwrap(), tree.predict(set.row(r)).unwrap());
        }
    }

    #[test]
    fn training_is_reproducible_and_distribution_stays_normalized() {
        let (x, t) = imbalanced(800, 2);
        let set = TrainingSet::new(&x, 2, &t, 2).unwrap();
        let cfg = BoostConfig {
            n_learners: 12,
            ..Default::default()
        };
        let (a, ra) = train_rusboost(&set, &small_trees(), &cfg, "", 4).unwrap();
        let (b, _) = train_rusboost(&set, &small_trees(), &cfg, "", 4).unwrap();
        assert_eq!(write_ensemble(&a), write_ensemble(&b));
        assert!(a.learners().iter().all(|l| l.epsilon > 0.0 && l.epsilon < 0.5 && l.vote_weight() > 0.0));
        assert!(ra.rounds.iter().all(|r| r.epsilon.is_none_or(|e| (0.0..0.5).contains(&e))));

        // Replay the distribution updates and check normalization each round.
        let mut d = init_mislabel(&t, 2).unwrap();
        let mut conf = vec![0.0; t.len() * 2];
        for l in a.learners() {
            fill_confidences(&l.tree, &set, &mut conf);
            d.update(&conf, l.alpha).unwrap();
            assert!((d.sum() - 1.0).abs() <= 1e-12);
            assert!(d.weights().iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn more_rounds_do_not_fit_worse() {
        let (x, t) = imbalanced(1000, 5);
        let set = TrainingSet::new(&x, 2, &t, 2).unwrap();
        let err = |m| {
            let cfg = BoostConfig {
                n_learners: m,
                ..Default::default()
            };
            let (ens, _) = train_rusboost(&set, &small_trees(), &cfg, "", 6).unwrap();
            let p = ens.predict_rows(&x).unwrap();
            p.iter().zip(&t).filter(|(a, b)| a != b).count()
        };
        assert!(err(30) <= err(1));
    }

    #[test]
    fn ensemble_round_trip() {
        let (x, t) = imbalanced(300, 7);
        let set = TrainingSet::new(&x, 2, &t, 2).unwrap();
        let cfg = BoostConfig {
            n_learners: 5,
            ..Default::default()
        };
        let (ens, _) = train_rusboost(&set, &small_trees(), &cfg, "d=2 order=none", 1).unwrap();
        let text = write_ensemble(&ens);
        let back = read_ensemble(&text).unwrap();
        assert_eq!(back, ens);
        assert_eq!(write_ensemble(&back), text);
        assert!(read_ensemble(&text.replace("end\n", "")).is_err());
        assert!(read_ensemble("rgmm-ensemble 9\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn update_keeps_a_distribution(seed in 0u64..10_000, alpha in 0.001f64..0.999) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..60);
            let k = rng.random_range(2..5usize);
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..k) as u8).collect();
            let mut d = init_mislabel(&labels, k).unwrap();
            prop_assert!((d.sum() - 1.0).abs() <= 1e-12);
            let conf: Vec<f64> = (0..n).flat_map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(move |v| v / s)
            }).map(|v: f64| v.clamp(0.0, 1.0)).collect();
            let eps = pseudo_loss(&conf, &d).unwrap();
            prop_assert!((0.0..=1.0).contains(&eps));
            d.update(&conf, alpha).unwrap();
            prop_assert!((d.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(d.weights().iter().all(|&w| w >= 0.0));
            for (i, &ti) in labels.iter().enumerate() {
                prop_assert_eq!(d.weight(i, ti as usize), 0.0);
            }
        }

        #[test]
        fn vote_rescaling_and_zero_weight_learners(seed in 0u64..500, power in 0.1f64..5.0) {
            let (x, t) = imbalanced(200, seed);
            let set = TrainingSet::new(&x, 2, &t, 2).unwrap();
            let cfg = BoostConfig { n_learners: 4, ..Default::default() };
            let (ens, _) = train_rusboost(&set, &small_trees(), &cfg, "", seed).unwrap();
            // alpha^p scales every ln(1/alpha) by p.
            let scaled = BoostedEnsemble::new(
                ens.learners().iter().map(|l| {
                    let a = l.alpha.powf(power);
                    Learner { tree: l.tree.clone(), epsilon: a / (1.0 + a), alpha: a }
                }).collect(),
                cfg.clone(),
                "",
            ).unwrap();
            let mut with_zero = ens.learners().to_vec();
            with_zero.push(Learner { tree: leaf_with(1, 2), epsilon: 0.5, alpha: 1.0 });
            let padded = BoostedEnsemble::new(with_zero, cfg, "").unwrap();
            for r in 0..set.n_rows() {
                let base = ens.predict_label(set.row(r)).unwrap();
                let s = ens.scores(set.row(r)).unwrap();
                // Only compare where the vote is not a near tie.
                if (s[0] - s[1]).abs() > 1e-9 * (s[0] + s[1]) {
                    prop_assert_eq!(scaled.predict_label(set.row(r)).unwrap(), base);
                }
                prop_assert_eq!(padded.predict_label(set.row(r)).unwrap(), base);
            }
        }
    }
}
