use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ClassificationMetrics;
use crate::error::{Error, Result};
use crate::labeling::TissueLabel;

/// Seeded shuffle split into `k` contiguous blocks; the first `n % k`
/// folds hold one extra sample. Each fold's indices are ascending.
pub fn kfold_partition(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = idx[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    folds
}

fn missing_class(folds: &[Vec<usize>], labels: &[u8], classes: &[u8]) -> Option<(usize, usize)> {
    folds.iter().enumerate().find_map(|(f, fold)| {
        classes
            .iter()
            .find(|&&c| !fold.iter().any(|&i| labels[i] == c))
            .map(|&c| (f, c as usize))
    })
}

/// k-fold cross-validation of a classifier.
///
/// `train_and_predict(train, test)` trains on the out-of-fold indices and
/// returns predictions for the in-fold indices. Confusion counts are summed
/// over folds with the bone label as the positive class. A partition in
/// which some fold lacks a class present in `labels` is re-drawn once.
pub fn kfold_cv<F>(labels: &[u8], k: usize, seed: u64, mut train_and_predict: F) -> Result<ClassificationMetrics>
where
    F: FnMut(&[usize], &[usize]) -> Result<Vec<u8>>,
{
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be >= 2, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::TooFewSamples {
            needed: k,
            found: labels.len(),
        });
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = kfold_partition(labels.len(), k, &mut rng);
    if missing_class(&folds, labels, &classes).is_some() {
        folds = kfold_partition(labels.len(), k, &mut rng);
        if let Some((fold, class)) = missing_class(&folds, labels, &classes) {
            return Err(Error::FoldMissingClass { fold, class });
        }
    }

    let positive = TissueLabel::BONE.value();
    let mut total = ClassificationMetrics::from_counts(0, 0, 0, 0, 1.0)?;
    let mut in_fold = vec![false; labels.len()];
    for test in &folds {
        test.iter().for_each(|&i| in_fold[i] = true);
        let train: Vec<usize> = (0..labels.len()).filter(|&i| !in_fold[i]).collect();
        test.iter().for_each(|&i| in_fold[i] = false);
        let predicted = train_and_predict(&train, test)?;
        let truth: Vec<u8> = test.iter().map(|&i| labels[i]).collect();
        total = total.merge(&ClassificationMetrics::from_labels(&truth, &predicted, positive, 1.0)?)?;
    }
    Ok(total)
}
