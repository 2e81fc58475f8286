//! Area under the micro-pooled precision-recall curve.
//!
//! Every (document, label) pair contributes one score and one truth value to a
//! single pool. Thresholds sweep the distinct scores in descending order, so
//! tied pairs always flip together.

use serde::{Deserialize, Serialize};

use crate::classifier::PredictionScores;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no positive pairs; the precision-recall curve is undefined")]
    NoPositives,
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
    #[error("score {score} is not finite")]
    NonFiniteScore { score: f64 },
    #[error("{scores} score columns but {targets} target columns")]
    CountMismatch { scores: usize, targets: usize },
    #[error("document {index}: expected {expected} scores, found {found}")]
    WidthMismatch { index: usize, expected: usize, found: usize },
}

/// One scored (document, label) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub score: f64,
    pub truth: bool,
    /// 1-based level of the label.
    pub level: usize,
    /// Global index of the label.
    pub label: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    pairs: Vec<ScoredPair>,
}

impl ScoredSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Untagged pairs, all placed on level 1 with label index 0.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, bool)>) -> Self {
        let pairs = pairs.into_iter().map(|(score, truth)| ScoredPair { score, truth, level: 1, label: 0 }).collect();
        Self { pairs }
    }

    pub fn push(&mut self, pair: ScoredPair) {
        self.pairs.push(pair);
    }

    pub fn pairs(&self) -> &[ScoredPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.truth).count()
    }

    /// The pairs whose label sits at `level`.
    pub fn level(&self, level: usize) -> ScoredSet {
        Self { pairs: self.pairs.iter().filter(|p| p.level == level).copied().collect() }
    }
}

/// `(recall, precision)` points, anchor first, in non-decreasing recall.
pub fn pr_curve(set: &ScoredSet) -> Result<Vec<(f64, f64)>, MetricsError> {
    if let Some(p) = set.pairs.iter().find(|p| !p.score.is_finite()) {
        return Err(MetricsError::NonFiniteScore { score: p.score });
    }
    let total_pos = set.positives();
    if total_pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut sorted: Vec<(f64, bool)> = set.pairs.iter().map(|p| (p.score, p.truth)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / total_pos as f64, tp as f64 / (tp + fp) as f64));
    }
    points.insert(0, (0.0, points[0].1));
    Ok(points)
}

/// Trapezoidal area over recall after keeping the best precision per recall.
pub fn au_prc(points: &[(f64, f64)]) -> f64 {
    let mut flat: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for &(r, p) in points {
        match flat.last_mut() {
            Some(last) if last.0 == r => last.1 = last.1.max(p),
            _ => flat.push((r, p)),
        }
    }
    flat.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// `au_prc(pr_curve(set))`.
pub fn au_prc_of(set: &ScoredSet) -> Result<f64, MetricsError> {
    Ok(au_prc(&pr_curve(set)?))
}

/// Overall and per-level area for one score flavor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlavorMetrics {
    pub overall: f64,
    /// One entry per level; `None` when the level has no positive pair.
    pub per_level: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub documents: usize,
    pub labels: usize,
    pub pairs: usize,
    pub positives: usize,
    pub alpha: f64,
    pub blended: FlavorMetrics,
    pub local: FlavorMetrics,
    pub global: FlavorMetrics,
}

fn flavor(set: &ScoredSet, depth: usize) -> Result<FlavorMetrics, MetricsError> {
    let overall = au_prc_of(set)?;
    let per_level = (1..=depth)
        .map(|h| match au_prc_of(&set.level(h)) {
            Ok(v) => Ok(Some(v)),
            Err(MetricsError::NoPositives) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_, _>>()?;
    Ok(FlavorMetrics { overall, per_level })
}

/// Pools `M × 1` score columns against `M × 1` 0/1 targets.
pub fn scored_set(scores: &[&Matrix], targets: &[Matrix], level_sizes: &[usize]) -> Result<ScoredSet, MetricsError> {
    let width: usize = level_sizes.iter().sum();
    let levels: Vec<usize> = level_sizes.iter().enumerate().flat_map(|(h, &q)| std::iter::repeat_n(h + 1, q)).collect();
    if scores.len() != targets.len() {
        return Err(MetricsError::CountMismatch { scores: scores.len(), targets: targets.len() });
    }
    let mut set = ScoredSet::new();
    for (index, (s, z)) in scores.iter().zip(targets).enumerate() {
        for found in [s.len(), z.len()] {
            if found != width {
                return Err(MetricsError::WidthMismatch { index, expected: width, found });
            }
        }
        for (label, (&score, &truth)) in s.as_slice().iter().zip(z.as_slice()).enumerate() {
            set.push(ScoredPair { score, truth: truth > 0.5, level: levels[label], label });
        }
    }
    Ok(set)
}

/// Builds the report from per-document scores and `M × 1` targets.
pub fn report_from_scores(
    scores: &[PredictionScores],
    targets: &[Matrix],
    level_sizes: &[usize],
    alpha: f64,
) -> Result<EvaluationReport, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let depth = level_sizes.len();
    let blended_cols: Vec<&Matrix> = scores.iter().map(|s| &s.blended).collect();
    let global_cols: Vec<&Matrix> = scores.iter().map(|s| &s.global).collect();
    let local_owned: Vec<Matrix> = scores.iter().map(PredictionScores::local_concat).collect();
    let local_cols: Vec<&Matrix> = local_owned.iter().collect();

    let blended = scored_set(&blended_cols, targets, level_sizes)?;
    Ok(EvaluationReport {
        documents: scores.len(),
        labels: level_sizes.iter().sum(),
        pairs: blended.len(),
        positives: blended.positives(),
        alpha,
        blended: flavor(&blended, depth)?,
        local: flavor(&scored_set(&local_cols, targets, level_sizes)?, depth)?,
        global: flavor(&scored_set(&global_cols, targets, level_sizes)?, depth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn set(pairs: &[(f64, u8)]) -> ScoredSet {
        ScoredSet::from_pairs(pairs.iter().map(|&(s, t)| (s, t == 1)))
    }

    /// Independent oracle: for each distinct score, count by direct scan.
    fn oracle(pairs: &[(f64, bool)]) -> f64 {
        let pos = pairs.iter().filter(|p| p.1).count() as f64;
        let mut thresholds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut best: BTreeMap<u64, f64> = BTreeMap::new();
        let mut first_precision = None;
        for t in thresholds {
            let selected: Vec<_> = pairs.iter().filter(|p| p.0 >= t).collect();
            let tp = selected.iter().filter(|p| p.1).count() as f64;
            let precision = tp / selected.len() as f64;
            first_precision.get_or_insert(precision);
            let e = best.entry((tp / pos).to_bits()).or_insert(0.0);
            *e = e.max(precision);
        }
        let anchor = best.entry(0f64.to_bits()).or_insert(0.0);
        *anchor = anchor.max(first_precision.unwrap());
        let pts: Vec<(f64, f64)> = best.into_iter().map(|(r, p)| (f64::from_bits(r), p)).collect();
        let mut area = 0.0;
        for w in pts.windows(2) {
            area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
        }
        area
    }

    #[test]
    fn curve_examples() {
        assert_eq!(pr_curve(&set(&[(0.9, 1), (0.1, 0)])).unwrap(), vec![(0.0, 1.0), (1.0, 1.0), (1.0, 0.5)]);
        assert_eq!(pr_curve(&set(&[(0.9, 0), (0.1, 1)])).unwrap(), vec![(0.0, 0.0), (0.0, 0.0), (1.0, 0.5)]);
        assert_eq!(pr_curve(&set(&[(0.9, 0), (0.1, 0)])), Err(MetricsError::NoPositives));
        assert!(matches!(pr_curve(&set(&[(f64::NAN, 1)])), Err(MetricsError::NonFiniteScore { .. })));
    }

    #[test]
    fn area_examples() {
        assert_eq!(au_prc_of(&set(&[(0.9, 1), (0.1, 0)])).unwrap(), 1.0);
        assert_eq!(au_prc_of(&set(&[(0.9, 0), (0.1, 1)])).unwrap(), 0.25);
        assert_eq!(au_prc_of(&set(&[(0.5, 1), (0.5, 0), (0.5, 1), (0.5, 0)])).unwrap(), 0.5);
    }

    fn scores(local: &[&[f64]], global: &[f64], alpha: f64) -> PredictionScores {
        let local: Vec<Matrix> = local.iter().map(|l| Matrix::column(l).unwrap()).collect();
        let global = Matrix::column(global).unwrap();
        let blended = crate::classifier::combine_predictions(&local, &global, alpha).unwrap();
        PredictionScores { local, global, blended, v_global_concat: Matrix::zeros(2, 1) }
    }

    #[test]
    fn perfect_and_constant_reports() {
        let targets = vec![Matrix::column(&[1.0, 0.0, 1.0]).unwrap(), Matrix::column(&[0.0, 1.0, 0.0]).unwrap()];
        let perfect: Vec<PredictionScores> =
            targets.iter().map(|z| scores(&[&z.as_slice()[..2], &z.as_slice()[2..]], z.as_slice(), 0.5)).collect();
        let report = report_from_scores(&perfect, &targets, &[2, 1], 0.5).unwrap();
        assert_eq!(report.blended.overall, 1.0);
        assert_eq!(report.local.per_level, vec![Some(1.0), Some(1.0)]);
        assert_eq!((report.documents, report.labels, report.pairs, report.positives), (2, 3, 6, 3));

        let flat = vec![scores(&[&[0.5, 0.5], &[0.5]], &[0.5; 3], 0.5); 2];
        let report = report_from_scores(&flat, &targets, &[2, 1], 0.5).unwrap();
        assert_eq!(report.blended.overall, 0.5);
        assert_eq!(report.global.per_level, vec![Some(0.5), Some(0.5)]);

        // level 2 has no positives
        let targets = vec![Matrix::column(&[1.0, 0.0, 0.0]).unwrap()];
        let report = report_from_scores(&flat[..1], &targets, &[2, 1], 0.5).unwrap();
        assert_eq!(report.blended.per_level[1], None);
        assert_eq!(report_from_scores(&[], &[], &[2, 1], 0.5), Err(MetricsError::EmptyDataset));
    }

    #[test]
    fn tied_positives_can_lose_area_when_split() {
        // interpolating straight across a tied group is optimistic
        let tied = set(&[(0.9, 1), (0.5, 0), (0.1, 1), (0.1, 1)]);
        let split = set(&[(0.9, 1), (0.5, 0), (0.45, 1), (0.1, 1)]);
        let (a, b) = (au_prc_of(&tied).unwrap(), au_prc_of(&split).unwrap());
        assert!((a - 11.0 / 12.0).abs() < 1e-15);
        assert!((b - 61.0 / 72.0).abs() < 1e-15);
    }

    fn random_pairs() -> impl Strategy<Value = Vec<(f64, bool)>> {
        // coarse scores force ties
        proptest::collection::vec(((0u8..=10).prop_map(|s| s as f64 / 10.0), any::<bool>()), 1..=20)
            .prop_filter("needs a positive", |v| v.iter().any(|p| p.1))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn matches_oracle(pairs in random_pairs()) {
            let area = au_prc_of(&ScoredSet::from_pairs(pairs.clone())).unwrap();
            prop_assert!((area - oracle(&pairs)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&area));
        }

        #[test]
        fn raising_a_positive_never_hurts(
            pairs in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..=20)
                .prop_filter("needs a positive", |v| v.iter().any(|p| p.1)),
            pick in any::<prop::sample::Index>(),
            bump in 0.0f64..1.0,
        ) {
            let positives: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].1).collect();
            let i = positives[pick.index(positives.len())];
            let mut raised = pairs.clone();
            raised[i].0 += bump;
            let distinct = |v: &[(f64, bool)]| {
                let mut s: Vec<f64> = v.iter().map(|p| p.0).collect();
                s.sort_by(f64::total_cmp);
                s.windows(2).all(|w| w[0] != w[1])
            };
            prop_assume!(distinct(&pairs) && distinct(&raised));
            let before = au_prc_of(&ScoredSet::from_pairs(pairs)).unwrap();
            let after = au_prc_of(&ScoredSet::from_pairs(raised)).unwrap();
            prop_assert!(after >= before - 1e-12, "{before} -> {after}");
        }

        #[test]
        fn monotone_transform_keeps_curve(pairs in random_pairs()) {
            let squashed: Vec<(f64, bool)> = pairs.iter().map(|&(s, t)| ((3.0 * s - 1.0).tanh(), t)).collect();
            prop_assert_eq!(
                pr_curve(&ScoredSet::from_pairs(pairs)).unwrap(),
                pr_curve(&ScoredSet::from_pairs(squashed)).unwrap()
            );
        }
    }
}
