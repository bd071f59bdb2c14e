//! Weighted binary classification trees with confidence-rated leaves.
//!
//! Splits minimize the weighted GINI impurity of the two children over
//! every feature and every midpoint between consecutive distinct values.
//! Growth is best-first: the open node with the largest impurity decrease
//! is split next until `max_splits` is spent. Equal-impurity candidates go
//! to the lowest feature index, then the lowest threshold.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Nodes above this many `rows x features` evaluate features in parallel.
const PARALLEL_WORK: usize = 1 << 15;
/// Distinct-value count above which quantile candidates apply, when enabled.
const QUANTILE_MIN_DISTINCT: usize = 1 << 14;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeConfig {
    pub max_splits: usize,
    /// Minimum number of training rows in each child.
    pub min_leaf: usize,
    /// When set, nodes with more than 2^14 rows only test about this many
    /// evenly spaced thresholds per feature.
    pub quantile_candidates: Option<usize>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_splits: 400,
            min_leaf: 5,
            quantile_candidates: None,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_splits == 0 || self.min_leaf == 0 {
            return Err(Error::InvalidArgument("max_splits and min_leaf must be >= 1".into()));
        }
        if self.quantile_candidates == Some(0) {
            return Err(Error::InvalidArgument("quantile_candidates must be >= 1".into()));
        }
        Ok(())
    }
}

/// `1 - sum_t p_t^2`.
pub fn gini(proportions: &[f64]) -> Result<f64> {
    if proportions.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative proportion in {proportions:?}")));
    }
    let sum: f64 = proportions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized { sum });
    }
    Ok(1.0 - proportions.iter().map(|p| p * p).sum::<f64>())
}

/// `W * gini(counts / W)` for class weight totals `counts` summing to `total`.
#[inline]
fn weighted_impurity(counts: &[f64], total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    total - counts.iter().map(|c| c * c).sum::<f64>() / total
}

/// Borrowed row-major feature matrix with class labels.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    features: &'a [f64],
    n_features: usize,
    labels: &'a [u8],
    n_classes: usize,
}

impl<'a> TrainingSet<'a> {
    pub fn new(features: &'a [f64], n_features: usize, labels: &'a [u8], n_classes: usize) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::InvalidArgument("training set needs at least one feature".into()));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::dims("training features", labels.len() * n_features, features.len()));
        }
        if n_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if let Some(&t) = labels.iter().find(|&&t| t as usize >= n_classes) {
            return Err(Error::InvalidArgument(format!("label {t} outside 0..{n_classes}")));
        }
        Ok(Self {
            features,
            n_features,
            labels,
            n_classes,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &'a [u8] {
        self.labels
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    #[inline]
    fn value(&self, row: usize, feature: usize) -> f64 {
        self.features[row * self.n_features + feature]
    }
}

/// Every feature's row order and the matching sorted values, computed once
/// per training set so that each tree derives its own sorted columns in
/// linear time.
#[derive(Debug, Clone)]
pub struct PresortedIndex {
    order: Vec<Vec<u32>>,
    values: Vec<Vec<f64>>,
}

impl PresortedIndex {
    pub fn new(set: &TrainingSet<'_>) -> Self {
        let (order, values) = (0..set.n_features)
            .into_par_iter()
            .map(|f| {
                let mut col: Vec<(f64, u32)> = (0..set.n_rows()).map(|r| (set.value(r, f), r as u32)).collect();
                col.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                col.into_iter().map(|(v, r)| (r, v)).unzip::<u32, f64, Vec<u32>, Vec<f64>>()
            })
            .unzip();
        Self { order, values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf {
        /// Class-weight proportions; sums to 1.
        confidence: Vec<f64>,
        n_samples: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// A trained tree. Node 0 is the root; `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    n_features: usize,
    n_classes: usize,
}

impl Tree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_splits(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Split { .. })).count()
    }

    /// Index of the leaf reached by `x`. `x` must have `n_features` entries.
    #[inline]
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    /// `h(x, .)`: the reached leaf's confidence vector.
    #[inline]
    pub fn confidence_unchecked(&self, x: &[f64]) -> &[f64] {
        match &self.nodes[self.leaf_index(x)] {
            Node::Leaf { confidence, .. } => confidence,
            Node::Split { .. } => unreachable!("leaf_index returns leaves"),
        }
    }

    pub fn confidence(&self, x: &[f64]) -> Result<&[f64]> {
        if x.len() != self.n_features {
            return Err(Error::dims("tree input", self.n_features, x.len()));
        }
        Ok(self.confidence_unchecked(x))
    }

    /// Argmax of the confidence vector; ties go to the lowest label.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(self.confidence(x)?))
    }

    pub(crate) fn write_text(&self, out: &mut String) {
        out.push_str(&format!(
            "tree nodes {} features {} classes {}\n",
            self.nodes.len(),
            self.n_features,
            self.n_classes
        ));
        for n in &self.nodes {
            match n {
                Node::Leaf { confidence, n_samples } => {
                    out.push_str(&format!("L {n_samples}"));
                    for c in confidence {
                        out.push_str(&format!(" {c:e}"));
                    }
                    out.push('\n');
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => out.push_str(&format!("S {feature} {threshold:e} {left} {right}\n")),
            }
        }
    }

    pub(crate) fn read_text<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<Self> {
        let bad = |d: String| Error::format("tree", d);
        let header = lines.next().ok_or_else(|| bad("missing tree header".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 7 || h[0] != "tree" || h[1] != "nodes" || h[3] != "features" || h[5] != "classes" {
            return Err(bad(format!("bad tree header `{header}`")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad integer `{s}`")));
        let (n_nodes, n_features, n_classes) = (num(h[2])?, num(h[4])?, num(h[6])?);
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let line = lines.next().ok_or_else(|| bad("truncated tree".into()))?;
            let p: Vec<&str> = line.split_whitespace().collect();
            match p.first().copied() {
                Some("L") if p.len() == 2 + n_classes => {
                    let confidence = p[2..]
                        .iter()
                        .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad float `{s}`"))))
                        .collect::<Result<Vec<_>>>()?;
                    nodes.push(Node::Leaf {
                        confidence,
                        n_samples: num(p[1])?,
                    });
                }
                Some("S") if p.len() == 5 => {
                    let threshold = p[2].parse::<f64>().map_err(|_| bad(format!("bad float `{}`", p[2])))?;
                    let (feature, left, right) = (num(p[1])?, num(p[3])?, num(p[4])?);
                    if feature >= n_features || left >= n_nodes || right >= n_nodes {
                        return Err(bad(format!("split references out of range: `{line}`")));
                    }
                    nodes.push(Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    });
                }
                _ => return Err(bad(format!("bad node line `{line}`"))),
            }
        }
        if nodes.is_empty() {
            return Err(bad("tree has no nodes".into()));
        }
        Ok(Self {
            nodes,
            n_features,
            n_classes,
        })
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Trains a tree on `rows` of `set` (repeats allowed) with per-row `weights`.
pub fn train_tree(set: &TrainingSet<'_>, rows: &[usize], weights: &[f64], cfg: &TreeConfig) -> Result<Tree> {
    check_inputs(set, rows, weights, cfg)?;
    let columns = (0..set.n_features)
        .into_par_iter()
        .map(|f| {
            let mut col: Vec<(f64, usize, u32)> =
                rows.iter().enumerate().map(|(p, &r)| (set.value(r, f), r, p as u32)).collect();
            col.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            col.into_iter().map(|(v, _, p)| (p, v)).unzip()
        })
        .collect();
    Builder::new(set, rows, weights, cfg, columns).grow()
}

/// Same as [`train_tree`] but derives sorted columns from a shared index.
pub fn train_tree_presorted(
    set: &TrainingSet<'_>,
    index: &PresortedIndex,
    rows: &[usize],
    weights: &[f64],
    cfg: &TreeConfig,
) -> Result<Tree> {
    check_inputs(set, rows, weights, cfg)?;
    if index.order.len() != set.n_features || index.order.first().is_some_and(|o| o.len() != set.n_rows()) {
        return Err(Error::dims("presorted index", set.n_features, index.order.len()));
    }
    // Positions of each source row, in ascending position order (CSR layout).
    let mut start = vec![0u32; set.n_rows() + 1];
    for &r in rows {
        start[r + 1] += 1;
    }
    for i in 0..set.n_rows() {
        start[i + 1] += start[i];
    }
    let mut fill = start.clone();
    let mut positions = vec![0u32; rows.len()];
    for (p, &r) in rows.iter().enumerate() {
        positions[fill[r] as usize] = p as u32;
        fill[r] += 1;
    }
    let columns = index
        .order
        .par_iter()
        .zip(index.values.par_iter())
        .map(|(global, vals)| {
            let mut order = Vec::with_capacity(rows.len());
            let mut values = Vec::with_capacity(rows.len());
            for (&r, &v) in global.iter().zip(vals) {
                let (a, b) = (start[r as usize] as usize, start[r as usize + 1] as usize);
                if a < b {
                    order.extend_from_slice(&positions[a..b]);
                    values.extend(std::iter::repeat_n(v, b - a));
                }
            }
            (order, values)
        })
        .collect();
    Builder::new(set, rows, weights, cfg, columns).grow()
}

fn check_inputs(set: &TrainingSet<'_>, rows: &[usize], weights: &[f64], cfg: &TreeConfig) -> Result<()> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(Error::EmptyInput("no rows to train a tree on"));
    }
    if rows.len() != weights.len() {
        return Err(Error::dims("tree weights", rows.len(), weights.len()));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= set.n_rows()) {
        return Err(Error::InvalidArgument(format!("row {r} out of range")));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("tree weights must be finite and >= 0".into()));
    }
    if !(weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::InvalidArgument("total tree weight must be positive".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice {
    impurity: f64,
    feature: usize,
    threshold: f64,
}

struct Candidate {
    gain: f64,
    node: usize,
    split: SplitChoice,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // Max-heap: larger gain first, then older node.
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain.total_cmp(&other.gain).then(other.node.cmp(&self.node))
    }
}

struct OpenNode {
    start: usize,
    end: usize,
    class_weight: Vec<f64>,
}

/// One feature's positions (into `rows`) and values, sorted by value within
/// each node's range.
type Column = (Vec<u32>, Vec<f64>);

struct Builder<'s> {
    n_features: usize,
    n_classes: usize,
    n_rows: usize,
    weights: &'s [f64],
    cfg: &'s TreeConfig,
    label: Vec<u8>,
    columns: Vec<Column>,
    nodes: Vec<Node>,
    open: Vec<OpenNode>,
}

impl<'s> Builder<'s> {
    fn new(set: &TrainingSet<'_>, rows: &[usize], weights: &'s [f64], cfg: &'s TreeConfig, columns: Vec<Column>) -> Self {
        Self {
            n_features: set.n_features,
            n_classes: set.n_classes,
            n_rows: rows.len(),
            weights,
            cfg,
            label: rows.iter().map(|&r| set.labels[r]).collect(),
            columns,
            nodes: Vec::new(),
            open: Vec::new(),
        }
    }

    fn grow(mut self) -> Result<Tree> {
        let root = self.make_node(0, self.n_rows);
        let mut heap = BinaryHeap::new();
        self.push_candidate(root, &mut heap);

        let mut splits = 0;
        let mut go_left = vec![false; self.n_rows];
        while splits < self.cfg.max_splits {
            let Some(c) = heap.pop() else { break };
            let (start, end) = (self.open[c.node].start, self.open[c.node].end);
            let SplitChoice { feature, threshold, .. } = c.split;
            let (order, values) = &self.columns[feature];
            let mut n_left = 0;
            for i in start..end {
                let left = values[i] <= threshold;
                go_left[order[i] as usize] = left;
                n_left += usize::from(left);
            }
            let go_left = &go_left;
            self.columns.par_iter_mut().for_each(|(order, values)| {
                let (order, values) = (&mut order[start..end], &mut values[start..end]);
                let mut right_p = Vec::with_capacity(order.len() - n_left);
                let mut right_v = Vec::with_capacity(order.len() - n_left);
                let mut w = 0;
                for i in 0..order.len() {
                    let (p, v) = (order[i], values[i]);
                    if go_left[p as usize] {
                        order[w] = p;
                        values[w] = v;
                        w += 1;
                    } else {
                        right_p.push(p);
                        right_v.push(v);
                    }
                }
                order[w..].copy_from_slice(&right_p);
                values[w..].copy_from_slice(&right_v);
            });
            let left = self.make_node(start, start + n_left);
            let right = self.make_node(start + n_left, end);
            self.nodes[c.node] = Node::Split {
                feature,
                threshold,
                left,
                right,
            };
            splits += 1;
            self.push_candidate(left, &mut heap);
            self.push_candidate(right, &mut heap);
        }
        Ok(Tree {
            nodes: self.nodes,
            n_features: self.n_features,
            n_classes: self.n_classes,
        })
    }

    /// Registers a leaf over positions `start..end` of every column.
    fn make_node(&mut self, start: usize, end: usize) -> usize {
        let mut class_weight = vec![0.0; self.n_classes];
        for &p in &self.columns[0].0[start..end] {
            let p = p as usize;
            class_weight[self.label[p] as usize] += self.weights[p];
        }
        let total: f64 = class_weight.iter().sum();
        let confidence = if total > 0.0 {
            class_weight.iter().map(|w| w / total).collect()
        } else {
            vec![1.0 / self.n_classes as f64; self.n_classes]
        };
        self.nodes.push(Node::Leaf {
            confidence,
            n_samples: end - start,
        });
        self.open.push(OpenNode { start, end, class_weight });
        self.nodes.len() - 1
    }

    fn push_candidate(&self, node: usize, heap: &mut BinaryHeap<Candidate>) {
        let open = &self.open[node];
        let len = open.end - open.start;
        let classes_present = open.class_weight.iter().filter(|w| **w > 0.0).count();
        if classes_present < 2 || len < 2 * self.cfg.min_leaf {
            return;
        }
        let total: f64 = open.class_weight.iter().sum();
        let node_impurity = weighted_impurity(&open.class_weight, total);
        if let Some(split) = self.best_split(open) {
            let gain = node_impurity - split.impurity;
            if gain > 1e-12 * total {
                heap.push(Candidate { gain, node, split });
            }
        }
    }

    fn best_split(&self, open: &OpenNode) -> Option<SplitChoice> {
        let len = open.end - open.start;
        let eval = |f: usize| self.best_split_on(f, open);
        let per_feature: Vec<Option<SplitChoice>> = if len * self.n_features >= PARALLEL_WORK {
            (0..self.n_features).into_par_iter().map(eval).collect()
        } else {
            (0..self.n_features).map(eval).collect()
        };
        let mut best: Option<SplitChoice> = None;
        for s in per_feature.into_iter().flatten() {
            if best.is_none_or(|b| s.impurity < b.impurity) {
                best = Some(s);
            }
        }
        best
    }

    fn best_split_on(&self, feature: usize, open: &OpenNode) -> Option<SplitChoice> {
        let (order, values) = &self.columns[feature];
        let order = &order[open.start..open.end];
        let values = &values[open.start..open.end];
        let len = order.len();
        let k = self.n_classes;
        let total: f64 = open.class_weight.iter().sum();
        let min_leaf = self.cfg.min_leaf;
        if values[min_leaf - 1] == values[len - min_leaf] {
            // No admissible boundary between distinct values.
            return None;
        }
        let stride = match self.cfg.quantile_candidates {
            Some(bins) if len > QUANTILE_MIN_DISTINCT => (len / bins).max(1),
            _ => 1,
        };

        if k == 2 {
            return self.scan_binary(feature, order, values, open, stride);
        }
        let mut left = vec![0.0; k];
        let mut right = vec![0.0; k];
        let mut left_total = 0.0;
        let mut next_allowed = 0;
        let mut best: Option<SplitChoice> = None;
        for i in 0..len - 1 {
            let p = order[i] as usize;
            let w = self.weights[p];
            left[self.label[p] as usize] += w;
            left_total += w;
            let (current, next) = (values[i], values[i + 1]);
            let n_left = i + 1;
            if next > current && n_left >= min_leaf && len - n_left >= min_leaf && i >= next_allowed {
                for c in 0..k {
                    right[c] = open.class_weight[c] - left[c];
                }
                let right_total = total - left_total;
                let impurity = weighted_impurity(&left, left_total) + weighted_impurity(&right, right_total);
                if best.is_none_or(|b| impurity < b.impurity) {
                    best = Some(SplitChoice {
                        impurity,
                        feature,
                        threshold: midpoint(current, next),
                    });
                }
                next_allowed = i + stride;
            }
        }
        best
    }

    /// Two-class version of the scan in [`Self::best_split_on`]; same
    /// arithmetic, without the per-class loops.
    fn scan_binary(&self, feature: usize, order: &[u32], values: &[f64], open: &OpenNode, stride: usize) -> Option<SplitChoice> {
        let len = order.len();
        let min_leaf = self.cfg.min_leaf;
        let (c0, c1) = (open.class_weight[0], open.class_weight[1]);
        let total = c0 + c1;
        let (mut l0, mut l1) = (0.0, 0.0);
        let mut left_total = 0.0;
        let mut next_allowed = 0;
        let mut best_impurity = f64::INFINITY;
        let mut best_at = usize::MAX;
        for i in 0..len - min_leaf {
            let p = order[i] as usize;
            let w = self.weights[p];
            if self.label[p] == 0 {
                l0 += w;
            } else {
                l1 += w;
            }
            left_total += w;
            if i + 1 >= min_leaf && i >= next_allowed && values[i + 1] > values[i] {
                let (r0, r1) = (c0 - l0, c1 - l1);
                let right_total = total - left_total;
                let impurity = weighted_impurity(&[l0, l1], left_total) + weighted_impurity(&[r0, r1], right_total);
                if impurity < best_impurity {
                    best_impurity = impurity;
                    best_at = i;
                }
                next_allowed = i + stride;
            }
        }
        (best_at != usize::MAX).then(|| SplitChoice {
            impurity: best_impurity,
            feature,
            threshold: midpoint(values[best_at], values[best_at + 1]),
        })
    }
}

/// A threshold strictly below `hi` and at least `lo`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m < hi {
        m
    } else {
        lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(gini(&[0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(gini(&[0.25, 0.75]).unwrap(), 0.375);
        assert!(matches!(gini(&[0.5, 0.6]), Err(Error::NotNormalized { .. })));
        let k = 4;
        let uniform = vec![1.0 / k as f64; k];
        assert!((gini(&uniform).unwrap() - (1.0 - 1.0 / k as f64)).abs() < 1e-15);
    }

    #[test]
    fn separable_pair() {
        let x = [0.0, 1.0];
        let t = [0u8, 1];
        let set = TrainingSet::new(&x, 1, &t, 2).unwrap();
        let cfg = TreeConfig {
            min_leaf: 1,
            ..Default::default()
        };
        let tree = train_tree(&set, &[0, 1], &[1.0, 1.0], &cfg).unwrap();
        assert_eq!(tree.n_splits(), 1);
        match &tree.nodes()[0] {
            Node::Split { threshold, .. } => assert_eq!(*threshold, 0.5),
            other => panic!("root should split, got {other:?}"),
        }
        assert_eq!(tree.confidence(&[0.9]).unwrap(), &[0.0, 1.0]);
        assert_eq!(tree.confidence(&[0.1]).unwrap(), &[1.0, 0.0]);
        assert!(matches!(tree.confidence(&[0.1, 0.2]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn pure_and_constant_inputs_give_single_leaf() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let pure = TrainingSet::new(&x, 1, &[1, 1, 1, 1], 2).unwrap();
        let tree = train_tree(&pure, &[0, 1, 2, 3], &[1.0; 4], &TreeConfig { min_leaf: 1, ..Default::default() }).unwrap();
        assert_eq!(tree.nodes(), &[Node::Leaf { confidence: vec![0.0, 1.0], n_samples: 4 }]);

        let same = [2.0; 4];
        let mixed = TrainingSet::new(&same, 1, &[0, 0, 0, 1], 2).unwrap();
        let tree = train_tree(&mixed, &[0, 1, 2, 3], &[1.0; 4], &TreeConfig { min_leaf: 1, ..Default::default() }).unwrap();
        assert_eq!(tree.n_splits(), 0);
        assert_eq!(tree.confidence(&[7.0]).unwrap(), &[0.75, 0.25]);
    }

    #[test]
    fn rejects_empty_or_zero_weight() {
        let x = [0.0, 1.0];
        let set = TrainingSet::new(&x, 1, &[0, 1], 2).unwrap();
        assert!(train_tree(&set, &[], &[], &TreeConfig::default()).is_err());
        assert!(train_tree(&set, &[0, 1], &[0.0, 0.0], &TreeConfig::default()).is_err());
        assert!(TrainingSet::new(&x, 1, &[0, 2], 2).is_err());
    }

    fn random_set(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(2 * n);
        let mut t = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            x.extend_from_slice(&[a, b]);
            let noisy = rng.random_bool(0.1);
            t.push(((a * b > 0.0) ^ noisy) as u8);
        }
        (x, t)
    }

    fn leaf_counts(tree: &Tree) -> Vec<usize> {
        tree.nodes()
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { n_samples, .. } => Some(*n_samples),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn min_leaf_respected_on_random_data() {
        let (x, t) = random_set(200, 1);
        let set = TrainingSet::new(&x, 2, &t, 2).unwrap();
        let rows: Vec<usize> = (0..200).collect();
        let tree = train_tree(&set, &rows, &[1.0; 200], &TreeConfig::default()).unwrap();
        assert!(tree.n_splits() > 3);
        assert!(leaf_counts(&tree).iter().all(|&c| c >= 5));
        // Leaf weighted counts also recovered by routing every sample.
        let mut routed = vec![0usize; tree.nodes().len()];
        for r in 0..200 {
            routed[tree.leaf_index(set.row(r))] += 1;
        }
        for (i, n) in tree.nodes().iter().enumerate() {
            if let Node::Leaf { n_samples, .. } = n {
                assert_eq!(routed[i], *n_samples);
            }
        }
    }

    /// Replays split predicates without the tree's own routing loop.
    fn brute_force_leaf(tree: &Tree, x: &[f64]) -> usize {
        let leaves: Vec<usize> = (0..tree.nodes().len()).filter(|&i| matches!(tree.nodes()[i], Node::Leaf { .. })).collect();
        let mut parent = vec![None; tree.nodes().len()];
        for (i, n) in tree.nodes().iter().enumerate() {
            if let Node::Split { feature, threshold, left, right } = n {
                parent[*left] = Some((i, *feature, *threshold, true));
                parent[*right] = Some((i, *feature, *threshold, false));
            }
        }
        let satisfied: Vec<usize> = leaves
            .into_iter()
            .filter(|&leaf| {
                let mut cur = leaf;
                while let Some((p, f, thr, is_left)) = parent[cur] {
                    if (x[f] <= thr) != is_left {
                        return false;
                    }
                    cur = p;
                }
                true
            })
            .collect();
        assert_eq!(satisfied.len(), 1);
        satisfied[0]
    }

    #[test]
    fn routing_matches_predicate_replay() {
        let (x, t) = random_set(300, 2);
        let set = TrainingSet::new(&x, 2, &t, 2).unwrap();
        let rows: Vec<usize> = (0..300).collect();
        let tree = train_tree(&set, &rows, &[1.0; 300], &TreeConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let q = [rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2)];
            assert_eq!(tree.leaf_index(&q), brute_force_leaf(&tree, &q));
        }
    }

    fn weighted_error(tree: &Tree, set: &TrainingSet<'_>, weights: &[f64]) -> f64 {
        (0..set.n_rows())
            .filter(|&r| tree.predict(set.row(r)).unwrap() != set.labels()[r] as usize)
            .map(|r| weights[r])
            .sum()
    }

    #[test]
    fn deeper_trees_never_fit_worse() {
        let (x, t) = random_set(400, 4);
        let set = TrainingSet::new(&x, 2, &t, 2).unwrap();
        let rows: Vec<usize> = (0..400).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..400).map(|_| rng.random_range(0.1..2.0)).collect();
        let err = |splits| {
            let cfg = TreeConfig { max_splits: splits, min_leaf: 1, quantile_candidates: None };
            weighted_error(&train_tree(&set, &rows, &w, &cfg).unwrap(), &set, &w)
        };
        let trivial = {
            let mut cw = [0.0; 2];
            for r in 0..400 {
                cw[t[r] as usize] += w[r];
            }
            cw[0].min(cw[1])
        };
        let (one, many) = (err(1), err(400));
        assert!(one <= trivial + 1e-9);
        assert!(many <= one + 1e-9);
    }

    #[test]
    fn presorted_path_matches_direct() {
        let (x, t) = random_set(250, 6);
        let set = TrainingSet::new(&x, 2, &t, 2).unwrap();
        let index = PresortedIndex::new(&set);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<usize> = (0..300).map(|_| rng.random_range(0..250)).collect();
        let w = vec![1.0 / 300.0; 300];
        let a = train_tree(&set, &rows, &w, &TreeConfig::default()).unwrap();
        let b = train_tree_presorted(&set, &index, &rows, &w, &TreeConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn max_splits_is_a_global_budget() {
        let (x, t) = random_set(500, 9);
        let set = TrainingSet::new(&x, 2, &t, 2).unwrap();
        let rows: Vec<usize> = (0..500).collect();
        for budget in [1, 3, 10] {
            let cfg = TreeConfig { max_splits: budget, min_leaf: 1, quantile_candidates: None };
            assert_eq!(train_tree(&set, &rows, &[1.0; 500], &cfg).unwrap().n_splits(), budget);
        }
    }

    #[test]
    fn text_round_trip() {
        let (x, t) = random_set(200, 10);
        let set = TrainingSet::new(&x, 2, &t, 2).unwrap();
        let rows: Vec<usize> = (0..200).collect();
        let tree = train_tree(&set, &rows, &[1.0; 200], &TreeConfig::default()).unwrap();
        let mut s = String::new();
        tree.write_text(&mut s);
        let back = Tree::read_text(&mut s.lines()).unwrap();
        assert_eq!(back, tree);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn weight_scaling_and_duplication_preserve_structure(seed in 0u64..1000, log_scale in -20i32..20) {
            // Power-of-two scales keep every weighted sum exact, so ties break identically.
            let scale = 2f64.powi(log_scale);
            let (x, t) = random_set(120, seed);
            let set = TrainingSet::new(&x, 2, &t, 2).unwrap();
            let rows: Vec<usize> = (0..120).collect();
            let cfg = TreeConfig { max_splits: 400, min_leaf: 1, quantile_candidates: None };
            let base = train_tree(&set, &rows, &[1.0; 120], &cfg).unwrap();
            let scaled = train_tree(&set, &rows, &vec![scale; 120], &cfg).unwrap();
            let doubled_rows: Vec<usize> = rows.iter().flat_map(|&r| [r, r]).collect();
            let doubled = train_tree(&set, &doubled_rows, &[1.0; 240], &cfg).unwrap();
            let structure = |tr: &Tree| -> Vec<(usize, u64)> {
                tr.nodes().iter().map(|n| match n {
                    Node::Split { feature, threshold, .. } => (*feature, threshold.to_bits()),
                    Node::Leaf { .. } => (usize::MAX, 0),
                }).collect()
            };
            prop_assert_eq!(structure(&base), structure(&scaled));
            prop_assert_eq!(structure(&base), structure(&doubled));
        }

        #[test]
        fn confidences_sum_to_one(seed in 0u64..1000) {
            let (x, t) = random_set(150, seed);
            let set = TrainingSet::new(&x, 2, &t, 2).unwrap();
            let rows: Vec<usize> = (0..150).collect();
            let tree = train_tree(&set, &rows, &[1.0; 150], &TreeConfig::default()).unwrap();
            for n in tree.nodes() {
                if let Node::Leaf { confidence, .. } = n {
                    prop_assert!((confidence.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    prop_assert!(confidence.iter().all(|c| (0.0..=1.0).contains(c)));
                }
            }
        }
    }
}
