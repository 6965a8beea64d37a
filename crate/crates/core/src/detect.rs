//! Anomaly detection over feature matrices.
//!
//! The matrix is pivoted to one row per time window with one column per
//! (group key, metric) pair. Each pivoted feature gets an independent
//! Gaussian baseline — moment estimates or robust median/1.4826·MAD — and
//! a window's aggregated score is the negative mean Gaussian log-density
//! over the features present in it, so the score rises with abnormality
//! and stays comparable across windows with different feature sets.
//! Thresholds come from robust location/scale or an empirical quantile of
//! the score series; anomaly periods are maximal above-threshold runs
//! with small gaps bridged.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureMatrix, GroupKey, MissingPolicy};
use crate::logmodel::UtcInstant;

pub const DEFAULT_MIN_TRAIN_SUPPORT: u64 = 30;
pub const DEFAULT_ROBUST_K: f64 = 6.0;
pub const DEFAULT_QUANTILE: f64 = 0.999;
pub const DEFAULT_GAP_TOLERANCE: u32 = 1;
pub const DEFAULT_WINDOW_MS: i64 = 60_000;
pub const MIN_THRESHOLD_HISTORY: usize = 100;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("window {window} has no scorable features")]
    NoFeatures { window: UtcInstant },
    #[error("threshold needs at least {need} historical points, have {have}")]
    InsufficientHistory { have: usize, need: usize },
    #[error("window column '{0}' missing or not a time key")]
    BadWindowColumn(String),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("model has no usable features (all below min support)")]
    EmptyModel,
}

/// One pivoted feature: a metric column restricted to a fixed group-key
/// tuple, realigned on the window axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PivotFeature {
    /// Display name, `metric[key=value,...]`.
    pub name: String,
    pub metric: String,
    pub group: Vec<(String, String)>,
    pub missing: MissingPolicy,
    pub values: Vec<Option<f64>>,
}

impl PivotFeature {
    pub fn group_value(&self, key: &str) -> Option<&str> {
        self.group.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// One row per window, one column per (group, metric) feature.
#[derive(Debug, Clone, PartialEq)]
pub struct PivotedMatrix {
    pub windows: Vec<UtcInstant>,
    pub features: Vec<PivotFeature>,
}

impl PivotedMatrix {
    pub fn window_index(&self, w: UtcInstant) -> Option<usize> {
        self.windows.binary_search(&w).ok()
    }

    pub fn window_range(&self, from: UtcInstant, to: UtcInstant) -> impl Iterator<Item = usize> + '_ {
        self.windows
            .iter()
            .enumerate()
            .filter(move |(_, w)| from <= **w && **w < to)
            .map(|(i, _)| i)
    }
}

/// Pivots a long-form matrix on its time-window key column.
pub fn pivot_matrix(matrix: &FeatureMatrix, window_column: &str) -> Result<PivotedMatrix, DetectError> {
    let window_col = matrix
        .key_column(window_column)
        .ok_or_else(|| DetectError::BadWindowColumn(window_column.to_string()))?;
    let mut windows: Vec<UtcInstant> = Vec::new();
    let mut row_windows: Vec<UtcInstant> = Vec::with_capacity(matrix.rows());
    for v in &window_col.values {
        let GroupKey::I64(ms) = v else {
            return Err(DetectError::BadWindowColumn(window_column.to_string()));
        };
        let w = UtcInstant::from_epoch_millis(*ms)
            .map_err(|_| DetectError::BadWindowColumn(window_column.to_string()))?;
        row_windows.push(w);
        windows.push(w);
    }
    windows.sort_unstable();
    windows.dedup();
    let index: BTreeMap<UtcInstant, usize> =
        windows.iter().enumerate().map(|(i, w)| (*w, i)).collect();

    let other_keys: Vec<&crate::features::KeyColumn> = matrix
        .key_columns
        .iter()
        .filter(|k| k.name != window_column)
        .collect();

    let mut features: BTreeMap<String, PivotFeature> = BTreeMap::new();
    for row in 0..matrix.rows() {
        let group: Vec<(String, String)> = other_keys
            .iter()
            .map(|k| (k.name.clone(), k.values[row].to_string()))
            .collect();
        let suffix: String = group
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",");
        let widx = index[&row_windows[row]];
        for feat in &matrix.features {
            let name = format!("{}[{}]", feat.name, suffix);
            let entry = features.entry(name.clone()).or_insert_with(|| PivotFeature {
                name,
                metric: feat.name.clone(),
                group: group.clone(),
                missing: feat.missing,
                values: vec![None; windows.len()],
            });
            entry.values[widx] = feat.values[row];
        }
    }
    Ok(PivotedMatrix {
        windows,
        features: features.into_values().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Moment,
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
    pub support: u64,
}

/// Signed fractional number of standard deviations from the baseline
/// mean.
pub fn zscore(x: f64, stats: &FeatureStats) -> f64 {
    (x - stats.mean) / stats.std
}

/// Per-feature Gaussian baselines learned on a training window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub estimator: Estimator,
    pub train_from: UtcInstant,
    pub train_to: UtcInstant,
    pub min_train_support: u64,
    pub features: BTreeMap<String, FeatureStats>,
    /// Features left out for insufficient training support, with the
    /// support they had.
    pub excluded: Vec<(String, u64)>,
    /// Features imputed as 0 when absent from a window.
    pub zero_missing: BTreeSet<String>,
}

fn sigma_floor(mean: f64) -> f64 {
    (1e-6 * mean.abs()).max(1e-9)
}

/// Nearest-rank median of an unsorted, non-empty slice.
fn nr_median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    values[(values.len() + 1) / 2 - 1]
}

pub fn fit_baseline(
    pivot: &PivotedMatrix,
    train_from: UtcInstant,
    train_to: UtcInstant,
    estimator: Estimator,
    min_train_support: u64,
) -> Result<BaselineModel, DetectError> {
    if train_from >= train_to {
        return Err(DetectError::InvalidRange(format!(
            "training window [{train_from}, {train_to}) is empty"
        )));
    }
    let idx: Vec<usize> = pivot.window_range(train_from, train_to).collect();
    let mut features = BTreeMap::new();
    let mut excluded = Vec::new();
    let mut zero_missing = BTreeSet::new();
    for feat in &pivot.features {
        let mut values: Vec<f64> = Vec::with_capacity(idx.len());
        for &i in &idx {
            match (feat.values[i], feat.missing) {
                (Some(v), _) => values.push(v),
                (None, MissingPolicy::Zero) => values.push(0.0),
                (None, MissingPolicy::Exclude) => {}
            }
        }
        let support = values.len() as u64;
        if support < min_train_support {
            excluded.push((feat.name.clone(), support));
            continue;
        }
        let (mean, std) = match estimator {
            Estimator::Moment => {
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                (mean, var.sqrt())
            }
            Estimator::Robust => {
                let median = nr_median(&mut values);
                let mut dev: Vec<f64> = values.iter().map(|v| (v - median).abs()).collect();
                let mad = nr_median(&mut dev);
                (median, 1.4826 * mad)
            }
        };
        let std = std.max(sigma_floor(mean));
        if feat.missing == MissingPolicy::Zero {
            zero_missing.insert(feat.name.clone());
        }
        features.insert(feat.name.clone(), FeatureStats { mean, std, support });
    }
    if features.is_empty() {
        return Err(DetectError::EmptyModel);
    }
    Ok(BaselineModel {
        estimator,
        train_from,
        train_to,
        min_train_support,
        features,
        excluded,
        zero_missing,
    })
}

/// One scored window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePoint {
    pub window_start: UtcInstant,
    pub score: f64,
    pub per_feature_z: BTreeMap<String, f64>,
    pub missing_features: BTreeSet<String>,
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// Negative mean Gaussian log-density over the features present in the
/// window: `S = (1/|J|) * sum(ln(sigma_j * sqrt(2*pi)) + z_j^2 / 2)`.
pub fn anomaly_score(
    window: UtcInstant,
    values: &BTreeMap<String, Option<f64>>,
    model: &BaselineModel,
) -> Result<ScorePoint, DetectError> {
    let mut per_feature_z = BTreeMap::new();
    let mut missing = BTreeSet::new();
    let mut sum = 0.0;
    for (name, stats) in &model.features {
        let value = match values.get(name) {
            Some(Some(v)) => Some(*v),
            _ if model.zero_missing.contains(name) => Some(0.0),
            _ => None,
        };
        match value {
            Some(v) => {
                let z = zscore(v, stats);
                sum += stats.std.ln() + LN_SQRT_2PI + z * z / 2.0;
                per_feature_z.insert(name.clone(), z);
            }
            None => {
                missing.insert(name.clone());
            }
        }
    }
    if per_feature_z.is_empty() {
        return Err(DetectError::NoFeatures { window });
    }
    Ok(ScorePoint {
        window_start: window,
        score: sum / per_feature_z.len() as f64,
        per_feature_z,
        missing_features: missing,
    })
}

/// Scores every pivot window inside `[from, to)`.
pub fn score_series(
    pivot: &PivotedMatrix,
    model: &BaselineModel,
    from: UtcInstant,
    to: UtcInstant,
) -> Result<Vec<ScorePoint>, DetectError> {
    let mut out = Vec::new();
    for i in pivot.window_range(from, to) {
        let values: BTreeMap<String, Option<f64>> = pivot
            .features
            .iter()
            .map(|f| (f.name.clone(), f.values[i]))
            .collect();
        out.push(anomaly_score(pivot.windows[i], &values, model)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    RobustK { k: f64 },
    Quantile { q: f64 },
}

impl ThresholdMethod {
    pub fn robust_default() -> Self {
        ThresholdMethod::RobustK { k: DEFAULT_ROBUST_K }
    }

    pub fn quantile_default() -> Self {
        ThresholdMethod::Quantile { q: DEFAULT_QUANTILE }
    }
}

/// Threshold over a historical score series: robust location/scale
/// (`median + k * 1.4826 * MAD`, MAD floored like sigma) or a
/// nearest-rank empirical quantile.
pub fn compute_threshold(scores: &[ScorePoint], method: ThresholdMethod) -> Result<f64, DetectError> {
    if scores.len() < MIN_THRESHOLD_HISTORY {
        return Err(DetectError::InsufficientHistory {
            have: scores.len(),
            need: MIN_THRESHOLD_HISTORY,
        });
    }
    let mut values: Vec<f64> = scores.iter().map(|s| s.score).collect();
    match method {
        ThresholdMethod::RobustK { k } => {
            let median = nr_median(&mut values);
            let mut dev: Vec<f64> = values.iter().map(|v| (v - median).abs()).collect();
            let mad = nr_median(&mut dev);
            Ok(median + k * (1.4826 * mad).max(sigma_floor(median)))
        }
        ThresholdMethod::Quantile { q } => {
            if !(0.0 < q && q < 1.0) {
                return Err(DetectError::InvalidRange(format!("quantile q={q} outside (0,1)")));
            }
            values.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
            let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
            Ok(values[rank - 1])
        }
    }
}

/// A maximal interval of windows at or above the threshold (small gaps
/// bridged).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyPeriod {
    pub t_start: UtcInstant,
    pub t_end: UtcInstant,
    pub peak_score: f64,
    pub points: Vec<ScorePoint>,
}

impl AnomalyPeriod {
    pub fn duration_ms(&self) -> i64 {
        self.t_end.epoch_millis() - self.t_start.epoch_millis()
    }

    pub fn overlap_ms(&self, from: UtcInstant, to: UtcInstant) -> i64 {
        (self.t_end.min(to).epoch_millis() - self.t_start.max(from).epoch_millis()).max(0)
    }
}

/// Extracts maximal runs of `score >= threshold` from a time-ordered
/// series, merging runs separated by at most `gap_tolerance` windows.
/// Bridged below-threshold points stay inside the period.
pub fn find_anomaly_periods(
    scores: &[ScorePoint],
    threshold: f64,
    window_ms: i64,
    gap_tolerance: u32,
) -> Vec<AnomalyPeriod> {
    let hot: Vec<usize> = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.score >= threshold)
        .map(|(i, _)| i)
        .collect();
    if hot.is_empty() {
        return Vec::new();
    }
    let mut spans: Vec<(usize, usize)> = Vec::new(); // inclusive index ranges
    let (mut start, mut end) = (hot[0], hot[0]);
    for &i in &hot[1..] {
        let gap_windows = (scores[i].window_start.epoch_millis()
            - scores[end].window_start.epoch_millis())
            / window_ms
            - 1;
        if gap_windows <= i64::from(gap_tolerance) {
            end = i;
        } else {
            spans.push((start, end));
            start = i;
            end = i;
        }
    }
    spans.push((start, end));
    spans
        .into_iter()
        .map(|(a, b)| {
            let points: Vec<ScorePoint> = scores[a..=b].to_vec();
            let peak = points.iter().map(|p| p.score).fold(f64::NEG_INFINITY, f64::max);
            AnomalyPeriod {
                t_start: scores[a].window_start,
                t_end: scores[b].window_start.plus_millis(window_ms),
                peak_score: peak,
                points,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{AggFn, AggOptions, AggregateSpec, AggregationSpec, PartialAgg};
    use crate::slc::{ColumnBuilder, ColumnType, Field, Table};

    fn minute(m: i64) -> UtcInstant {
        UtcInstant::from_epoch_millis(m * 60_000).unwrap()
    }

    fn stats(mean: f64, std: f64) -> FeatureStats {
        FeatureStats { mean, std, support: 100 }
    }

    fn model_of(features: &[(&str, f64, f64)]) -> BaselineModel {
        BaselineModel {
            estimator: Estimator::Moment,
            train_from: minute(0),
            train_to: minute(100),
            min_train_support: 1,
            features: features
                .iter()
                .map(|(n, m, s)| (n.to_string(), stats(*m, *s)))
                .collect(),
            excluded: Vec::new(),
            zero_missing: BTreeSet::new(),
        }
    }

    fn point(model: &BaselineModel, values: &[(&str, f64)]) -> ScorePoint {
        let map: BTreeMap<String, Option<f64>> =
            values.iter().map(|(k, v)| (k.to_string(), Some(*v))).collect();
        anomaly_score(minute(5), &map, model).unwrap()
    }

    #[test]
    fn zscore_identities_are_exact() {
        let s = stats(3.0, 2.0);
        assert_eq!(zscore(3.0, &s), 0.0);
        assert_eq!(zscore(3.0 + 2.0 * 2.0, &s), 2.0);
        assert_eq!(zscore(3.0 - 3.0 * 2.0, &s), -3.0);
    }

    #[test]
    fn score_at_mean_is_half_ln_two_pi() {
        let model = model_of(&[("f", 10.0, 1.0)]);
        let p = point(&model, &[("f", 10.0)]);
        let expected = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((p.score - expected).abs() < 1e-12);
    }

    #[test]
    fn score_adds_half_z_squared() {
        let model = model_of(&[("f", 10.0, 1.0)]);
        let p = point(&model, &[("f", 12.0)]);
        let expected = 0.5 * (2.0 * std::f64::consts::PI).ln() + 2.0;
        assert!((p.score - expected).abs() < 1e-12);
    }

    #[test]
    fn mean_normalization_over_feature_count() {
        let one = model_of(&[("f", 10.0, 1.0)]);
        let two = model_of(&[("f", 10.0, 1.0), ("g", 4.0, 1.0)]);
        let s1 = point(&one, &[("f", 10.0)]).score;
        let s2 = point(&two, &[("f", 10.0), ("g", 4.0)]).score;
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn score_monotone_in_abs_z() {
        let model = model_of(&[("f", 0.0, 1.0), ("g", 0.0, 1.0)]);
        let mut last = f64::NEG_INFINITY;
        for step in 0..20 {
            let z = step as f64 * 0.5;
            let s = point(&model, &[("f", z), ("g", 1.0)]).score;
            assert!(s > last);
            last = s;
        }
    }

    #[test]
    fn unit_sigma_ranking_equals_mean_squared_z() {
        let model = model_of(&[("f", 0.0, 1.0), ("g", 0.0, 1.0)]);
        let mut seed = 12345u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) * 4.0 - 2.0
        };
        let windows: Vec<(f64, f64)> = (0..50).map(|_| (next(), next())).collect();
        let mut by_score: Vec<usize> = (0..windows.len()).collect();
        let mut by_msz: Vec<usize> = by_score.clone();
        let scores: Vec<f64> = windows
            .iter()
            .map(|(a, b)| point(&model, &[("f", *a), ("g", *b)]).score)
            .collect();
        let msz: Vec<f64> = windows.iter().map(|(a, b)| (a * a + b * b) / 2.0).collect();
        by_score.sort_by(|x, y| scores[*x].partial_cmp(&scores[*y]).unwrap());
        by_msz.sort_by(|x, y| msz[*x].partial_cmp(&msz[*y]).unwrap());
        assert_eq!(by_score, by_msz);
    }

    #[test]
    fn empty_feature_set_is_error() {
        let model = model_of(&[("f", 0.0, 1.0)]);
        let empty: BTreeMap<String, Option<f64>> = BTreeMap::new();
        assert!(matches!(
            anomaly_score(minute(1), &empty, &model),
            Err(DetectError::NoFeatures { .. })
        ));
    }

    fn pivot_single(values: &[Option<f64>], missing: MissingPolicy) -> PivotedMatrix {
        PivotedMatrix {
            windows: (0..values.len() as i64).map(minute).collect(),
            features: vec![PivotFeature {
                name: "f[]".into(),
                metric: "f".into(),
                group: Vec::new(),
                missing,
                values: values.to_vec(),
            }],
        }
    }

    #[test]
    fn constant_feature_gets_floored_sigma() {
        let values: Vec<Option<f64>> = vec![Some(5.0); 40];
        let pivot = pivot_single(&values, MissingPolicy::Exclude);
        let model =
            fit_baseline(&pivot, minute(0), minute(40), Estimator::Moment, 30).unwrap();
        let s = &model.features["f[]"];
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.std, (1e-6f64 * 5.0).max(1e-9));
    }

    #[test]
    fn moment_fit_textbook_values() {
        let data = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
        let values: Vec<Option<f64>> = data.iter().map(|v| Some(*v)).collect();
        let pivot = pivot_single(&values, MissingPolicy::Exclude);
        let model = fit_baseline(&pivot, minute(0), minute(8), Estimator::Moment, 1).unwrap();
        let s = &model.features["f[]"];
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.std, 2.0);
    }

    #[test]
    fn robust_fit_ignores_single_outlier() {
        // Hand oracle: sorted 30 values = 29x1 then 1000; nearest-rank
        // median is the 15th value = 1; deviations are 29 zeros and one
        // 999, so MAD = 0 and sigma falls to the floor.
        let mut data = vec![1.0; 29];
        data.push(1000.0);
        let values: Vec<Option<f64>> = data.iter().map(|v| Some(*v)).collect();
        let pivot = pivot_single(&values, MissingPolicy::Exclude);
        let model = fit_baseline(&pivot, minute(0), minute(30), Estimator::Robust, 30).unwrap();
        let s = &model.features["f[]"];
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.std, 1e-6);
    }

    #[test]
    fn insufficient_support_excludes_feature() {
        let values: Vec<Option<f64>> = (0..40).map(|i| (i < 10).then_some(1.0)).collect();
        let pivot = pivot_single(&values, MissingPolicy::Exclude);
        let err = fit_baseline(&pivot, minute(0), minute(40), Estimator::Moment, 30).unwrap_err();
        assert!(matches!(err, DetectError::EmptyModel));
        let model = fit_baseline(&pivot, minute(0), minute(40), Estimator::Moment, 5).unwrap();
        assert_eq!(model.features["f[]"].support, 10);
    }

    #[test]
    fn zero_missing_policy_imputes_in_training() {
        let values: Vec<Option<f64>> = (0..40).map(|i| (i % 2 == 0).then_some(10.0)).collect();
        let pivot = pivot_single(&values, MissingPolicy::Zero);
        let model = fit_baseline(&pivot, minute(0), minute(40), Estimator::Moment, 30).unwrap();
        let s = &model.features["f[]"];
        assert_eq!(s.support, 40);
        assert_eq!(s.mean, 5.0);
        assert!(model.zero_missing.contains("f[]"));
    }

    fn score_points(values: &[f64]) -> Vec<ScorePoint> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| ScorePoint {
                window_start: minute(i as i64),
                score: *v,
                per_feature_z: BTreeMap::new(),
                missing_features: BTreeSet::new(),
            })
            .collect()
    }

    #[test]
    fn constant_series_threshold_is_the_constant() {
        let scores = score_points(&vec![3.0; 200]);
        let t = compute_threshold(&scores, ThresholdMethod::robust_default()).unwrap();
        assert!((t - 3.0).abs() < 1e-4);
        // The floored scale keeps the threshold strictly above the series.
        assert!(find_anomaly_periods(&scores, t, 60_000, 1).is_empty());
    }

    #[test]
    fn quantile_threshold_passes_single_spike() {
        let mut values = vec![0.0; 999];
        values.push(100.0);
        let scores = score_points(&values);
        // Hand-computed nearest rank: ceil(0.999*1000) = 999 -> sorted
        // index 998 -> 0.
        let t = compute_threshold(&scores, ThresholdMethod::quantile_default()).unwrap();
        assert_eq!(t, 0.0);
        assert!(values.iter().any(|v| *v > t));
    }

    #[test]
    fn robust_threshold_is_affine_equivariant() {
        let base: Vec<f64> = (0..150).map(|i| 1.0 + ((i * 37) % 11) as f64 / 7.0).collect();
        let scaled: Vec<f64> = base.iter().map(|v| v * 3.0).collect();
        let t1 = compute_threshold(&score_points(&base), ThresholdMethod::RobustK { k: 6.0 }).unwrap();
        let t2 =
            compute_threshold(&score_points(&scaled), ThresholdMethod::RobustK { k: 6.0 }).unwrap();
        assert!((t2 - 3.0 * t1).abs() < 1e-9);
    }

    #[test]
    fn short_history_is_rejected() {
        let scores = score_points(&vec![1.0; 99]);
        assert!(matches!(
            compute_threshold(&scores, ThresholdMethod::robust_default()),
            Err(DetectError::InsufficientHistory { have: 99, need: 100 })
        ));
    }

    #[test]
    fn single_run_period() {
        let scores = score_points(&[1.0, 9.0, 9.0, 1.0]);
        let periods = find_anomaly_periods(&scores, 5.0, 60_000, 1);
        assert_eq!(periods.len(), 1);
        assert_eq!(periods[0].t_start, minute(1));
        assert_eq!(periods[0].t_end, minute(3));
        assert_eq!(periods[0].duration_ms(), 120_000);
        assert_eq!(periods[0].peak_score, 9.0);
    }

    #[test]
    fn gap_tolerance_bridges_single_dip() {
        let scores = score_points(&[9.0, 1.0, 9.0]);
        let periods = find_anomaly_periods(&scores, 5.0, 60_000, 1);
        assert_eq!(periods.len(), 1);
        assert_eq!(periods[0].t_start, minute(0));
        assert_eq!(periods[0].t_end, minute(3));
        assert_eq!(periods[0].points.len(), 3);

        let periods = find_anomaly_periods(&scores, 5.0, 60_000, 0);
        assert_eq!(periods.len(), 2);
    }

    #[test]
    fn all_below_threshold_is_empty() {
        let scores = score_points(&[1.0, 2.0, 3.0]);
        assert!(find_anomaly_periods(&scores, 5.0, 60_000, 1).is_empty());
    }

    #[test]
    fn period_extraction_is_idempotent_and_covers_hot_points() {
        let values = [9.0, 1.0, 9.0, 0.0, 0.0, 8.0, 7.0, 0.0, 9.0];
        let scores = score_points(&values);
        let a = find_anomaly_periods(&scores, 5.0, 60_000, 1);
        let b = find_anomaly_periods(&scores, 5.0, 60_000, 1);
        assert_eq!(a, b);
        for (i, v) in values.iter().enumerate() {
            let inside = a
                .iter()
                .any(|p| p.t_start <= minute(i as i64) && minute(i as i64) < p.t_end);
            if *v >= 5.0 {
                assert!(inside, "hot point {i} must be covered");
            }
        }
    }

    #[test]
    fn pivot_splits_groups_into_features() {
        let mut k = ColumnBuilder::new(Field::new("window_start", ColumnType::I64));
        let mut c = ColumnBuilder::new(Field::new("component", ColumnType::Str));
        let mut v = ColumnBuilder::new(Field::new("v", ColumnType::F64));
        for (w, comp, val) in [(0i64, "a1", 1.0), (0, "a2", 2.0), (1, "a1", 3.0)] {
            k.push_i64(Some(w * 60_000));
            c.push_str(Some(comp));
            v.push_f64(Some(val));
        }
        let table = Table::new(vec![k.finish(), c.finish(), v.finish()]).unwrap();
        let spec = AggregationSpec {
            group_by: vec!["window_start".into(), "component".into()],
            aggregates: vec![AggregateSpec {
                input: "v".into(),
                function: AggFn::Mean,
                output: "v_mean".into(),
            }],
        };
        let mut agg = PartialAgg::new(spec, AggOptions::default());
        agg.accumulate(&table).unwrap();
        let matrix = agg.finalize().unwrap();
        let pivot = pivot_matrix(&matrix, "window_start").unwrap();
        assert_eq!(pivot.windows, vec![minute(0), minute(1)]);
        assert_eq!(pivot.features.len(), 2);
        let a1 = pivot.features.iter().find(|f| f.name == "v_mean[component=a1]").unwrap();
        assert_eq!(a1.values, vec![Some(1.0), Some(3.0)]);
        assert_eq!(a1.group_value("component"), Some("a1"));
        let a2 = pivot.features.iter().find(|f| f.name == "v_mean[component=a2]").unwrap();
        assert_eq!(a2.values, vec![Some(2.0), None]);
    }

    #[test]
    fn model_serializes_round_trip() {
        let model = model_of(&[("f", 1.0, 2.0)]);
        let json = serde_json::to_string(&model).unwrap();
        let back: BaselineModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);
    }
}
