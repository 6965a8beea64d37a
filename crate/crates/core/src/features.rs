//! Feature extraction: one map pass that enriches rows with derived
//! columns, then a single multi-column group-by that produces every
//! feature at once.
//!
//! Four transform kinds enrich a table — time/numeric bucketing,
//! cardinality reduction, row-wise column functions, and ordered
//! shift-differences. Aggregation runs over mergeable per-group partial
//! states, so any partitioning of the input merges to the single-pass
//! result. Percentiles are nearest-rank over retained per-group values
//! (bounded by a cap, above which the group's percentile features go null
//! and are flagged); spec learning uses linearly interpolated sample
//! quantiles for bucket edges.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logmodel::UtcInstant;
use crate::slc::{self, Column, ColumnBuilder, ColumnType, Field, SlcError, Table, Values};

pub const DEFAULT_GROUP_CAP: usize = 100_000;
pub const DEFAULT_RETAIN_CAP: usize = 100_000;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("unknown column function '{0}'")]
    UnknownFunction(String),
    #[error("column '{0}' not found")]
    MissingColumn(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("sample is empty")]
    EmptySample,
    #[error("group count exceeded cap {cap}; offending keys start with {samples:?}")]
    GroupCardinality { cap: usize, samples: Vec<String> },
    #[error(transparent)]
    Slc(#[from] SlcError),
}

// --- enrichment spec ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketKind {
    Time { granularity_ms: i64 },
    Numeric { edges: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepRule {
    Values(BTreeSet<String>),
    /// Resolved into a concrete keep-set by [`learn_spec_from_sample`];
    /// executing an unresolved top-k is a configuration error.
    TopK(usize),
}

fn default_other_label() -> String {
    "OTHER".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Bucketize {
        column: String,
        kind: BucketKind,
        output: String,
    },
    CardinalityReduce {
        column: String,
        keep: KeepRule,
        #[serde(default = "default_other_label")]
        other_label: String,
        output: String,
    },
    ColumnFunction {
        function: String,
        inputs: Vec<String>,
        output: String,
    },
    ShiftDiff {
        column: String,
        order_by: String,
        #[serde(default)]
        partition_by: Vec<String>,
        output: String,
    },
}

impl Transform {
    pub fn output(&self) -> &str {
        match self {
            Transform::Bucketize { output, .. }
            | Transform::CardinalityReduce { output, .. }
            | Transform::ColumnFunction { output, .. }
            | Transform::ShiftDiff { output, .. } => output,
        }
    }

    fn output_type(&self) -> Result<ColumnType, FeatureError> {
        Ok(match self {
            Transform::Bucketize { kind: BucketKind::Time { .. }, .. } => ColumnType::I64,
            Transform::Bucketize { kind: BucketKind::Numeric { .. }, .. } => ColumnType::Str,
            Transform::CardinalityReduce { .. } => ColumnType::Str,
            Transform::ColumnFunction { function, .. } => registry_output_type(function)?,
            Transform::ShiftDiff { .. } => ColumnType::F64,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentSpec {
    pub transforms: Vec<Transform>,
}

impl EnrichmentSpec {
    /// Checks output-name uniqueness and that every referenced input
    /// exists at its point in the pipeline; returns the enriched schema.
    pub fn enriched_schema(&self, input: &[Field]) -> Result<Vec<Field>, FeatureError> {
        let mut schema: Vec<Field> = input.to_vec();
        let mut names: BTreeSet<String> = schema.iter().map(|f| f.name.clone()).collect();
        for t in &self.transforms {
            let require = |name: &str, names: &BTreeSet<String>| {
                if names.contains(name) {
                    Ok(())
                } else {
                    Err(FeatureError::MissingColumn(name.to_string()))
                }
            };
            match t {
                Transform::Bucketize { column, kind, .. } => {
                    require(column, &names)?;
                    match kind {
                        BucketKind::Time { granularity_ms } if *granularity_ms <= 0 => {
                            return Err(FeatureError::InvalidSpec(
                                "time granularity must be positive".into(),
                            ));
                        }
                        BucketKind::Numeric { edges } => {
                            if edges.is_empty() {
                                return Err(FeatureError::InvalidSpec(
                                    "numeric bucketize needs at least one edge".into(),
                                ));
                            }
                            if edges.windows(2).any(|w| w[0] >= w[1]) {
                                return Err(FeatureError::InvalidSpec(
                                    "bucket edges must be strictly increasing".into(),
                                ));
                            }
                        }
                        _ => {}
                    }
                }
                Transform::CardinalityReduce { column, .. } => require(column, &names)?,
                Transform::ColumnFunction { function, inputs, .. } => {
                    let arity = registry_arity(function)?;
                    if inputs.len() != arity {
                        return Err(FeatureError::InvalidSpec(format!(
                            "function '{function}' takes {arity} input(s), got {}",
                            inputs.len()
                        )));
                    }
                    for c in inputs {
                        require(c, &names)?;
                    }
                }
                Transform::ShiftDiff { column, order_by, partition_by, .. } => {
                    require(column, &names)?;
                    require(order_by, &names)?;
                    for c in partition_by {
                        require(c, &names)?;
                    }
                }
            }
            if !names.insert(t.output().to_string()) {
                return Err(FeatureError::InvalidSpec(format!(
                    "duplicate output column '{}'",
                    t.output()
                )));
            }
            schema.push(Field::new(t.output(), t.output_type()?));
        }
        Ok(schema)
    }
}

// --- column function registry -------------------------------------------------

fn registry_arity(name: &str) -> Result<usize, FeatureError> {
    match name {
        "ratio" | "difference" | "net_latency" => Ok(2),
        "is_error" => Ok(1),
        _ => Err(FeatureError::UnknownFunction(name.to_string())),
    }
}

fn registry_output_type(name: &str) -> Result<ColumnType, FeatureError> {
    match name {
        "is_error" => Ok(ColumnType::Bool),
        "ratio" | "difference" | "net_latency" => Ok(ColumnType::F64),
        _ => Err(FeatureError::UnknownFunction(name.to_string())),
    }
}

/// Row-wise pure application; null inputs propagate null, singular
/// ratios come back null rather than infinite.
fn apply_function(name: &str, args: &[Option<f64>]) -> Option<f64> {
    match name {
        "ratio" => match (args[0], args[1]) {
            (Some(a), Some(b)) if b != 0.0 => Some(a / b),
            _ => None,
        },
        "difference" => Some(args[0]? - args[1]?),
        "net_latency" => Some(args[0]? - args[1]?),
        "is_error" => args[0].map(|s| if s >= 500.0 { 1.0 } else { 0.0 }),
        _ => None,
    }
}

// --- transform kernels ---------------------------------------------------------

fn format_edge(e: f64) -> String {
    if e.fract() == 0.0 && e.abs() < 1e15 {
        format!("{}", e as i64)
    } else {
        format!("{e}")
    }
}

fn numeric_bucket_label(v: f64, edges: &[f64]) -> String {
    if v < edges[0] {
        return "LOW".to_string();
    }
    if v >= edges[edges.len() - 1] {
        return "HIGH".to_string();
    }
    let idx = edges.partition_point(|e| *e <= v) - 1;
    format!("[{},{})", format_edge(edges[idx]), format_edge(edges[idx + 1]))
}

/// Adds the bucketized column: TIME floors to the granularity, NUMERIC
/// maps to half-open interval labels with LOW/HIGH sentinels.
pub fn bucketize(table: &Table, column: &str, kind: &BucketKind, output: &str) -> Result<Column, FeatureError> {
    let col = table
        .column(column)
        .ok_or_else(|| FeatureError::MissingColumn(column.to_string()))?;
    match kind {
        BucketKind::Time { granularity_ms } => {
            let mut b = ColumnBuilder::new(Field::new(output, ColumnType::I64));
            for row in 0..table.rows() {
                b.push_i64(col.i64_at(row).map(|ms| {
                    UtcInstant::from_epoch_millis(ms.max(0))
                        .expect("non-negative millis")
                        .floor_to(*granularity_ms)
                        .epoch_millis()
                }));
            }
            Ok(b.finish())
        }
        BucketKind::Numeric { edges } => {
            let mut b = ColumnBuilder::new(Field::new(output, ColumnType::Str));
            for row in 0..table.rows() {
                match col.numeric_at(row) {
                    Some(v) => b.push_str(Some(&numeric_bucket_label(v, edges))),
                    None => b.push_str(None),
                }
            }
            Ok(b.finish())
        }
    }
}

/// Values in the keep-set pass through; everything else becomes the
/// other-label.
pub fn reduce_cardinality(
    table: &Table,
    column: &str,
    keep: &KeepRule,
    other_label: &str,
    output: &str,
) -> Result<Column, FeatureError> {
    let KeepRule::Values(keep_set) = keep else {
        return Err(FeatureError::InvalidSpec(
            "top_k keep rule must be resolved by learn_spec_from_sample before execution".into(),
        ));
    };
    let col = table
        .column(column)
        .ok_or_else(|| FeatureError::MissingColumn(column.to_string()))?;
    let mut b = ColumnBuilder::new(Field::new(output, ColumnType::Str));
    for row in 0..table.rows() {
        match col.str_at(row) {
            Some(v) if keep_set.contains(v) => b.push_str(Some(v)),
            Some(_) => b.push_str(Some(other_label)),
            None => b.push_str(None),
        }
    }
    Ok(b.finish())
}

pub fn derive_column(
    table: &Table,
    function: &str,
    inputs: &[String],
    output: &str,
) -> Result<Column, FeatureError> {
    let ty = registry_output_type(function)?;
    let cols: Vec<&Column> = inputs
        .iter()
        .map(|c| table.column(c).ok_or_else(|| FeatureError::MissingColumn(c.clone())))
        .collect::<Result<_, _>>()?;
    let mut b = ColumnBuilder::new(Field::new(output, ty));
    let mut args = vec![None; cols.len()];
    for row in 0..table.rows() {
        for (slot, col) in args.iter_mut().zip(&cols) {
            *slot = col.numeric_at(row);
        }
        let v = apply_function(function, &args);
        match ty {
            ColumnType::Bool => b.push_bool(v.map(|x| x != 0.0)),
            _ => b.push_f64(v),
        }
    }
    Ok(b.finish())
}

fn order_key(col: &Column, row: usize) -> (u8, i64, f64, String) {
    // Null sorts first; numeric and string orderings never mix in practice.
    match (&col.values, col.is_null(row)) {
        (_, true) => (0, 0, 0.0, String::new()),
        (Values::I64(v), _) => (1, v[row], 0.0, String::new()),
        (Values::F64(v), _) => (2, 0, v[row], String::new()),
        (Values::Bool(v), _) => (1, i64::from(v[row]), 0.0, String::new()),
        (Values::Str(v), _) => (3, 0, 0.0, v[row].clone()),
    }
}

/// Within each partition group, orders rows by (`order_by`, request_id)
/// and emits `C[i] - C[i-1]`; the first row of each group gets null.
pub fn shift_diff(
    table: &Table,
    column: &str,
    order_by: &str,
    partition_by: &[String],
    output: &str,
) -> Result<Column, FeatureError> {
    let value_col = table
        .column(column)
        .ok_or_else(|| FeatureError::MissingColumn(column.to_string()))?;
    let order_col = table
        .column(order_by)
        .ok_or_else(|| FeatureError::MissingColumn(order_by.to_string()))?;
    let tie_col = table.column("request_id");
    let part_cols: Vec<&Column> = partition_by
        .iter()
        .map(|c| table.column(c).ok_or_else(|| FeatureError::MissingColumn(c.clone())))
        .collect::<Result<_, _>>()?;

    let mut groups: BTreeMap<Vec<GroupKey>, Vec<usize>> = BTreeMap::new();
    for row in 0..table.rows() {
        let key = part_cols.iter().map(|c| group_key_at(c, row)).collect();
        groups.entry(key).or_default().push(row);
    }
    let mut out = vec![None; table.rows()];
    for rows in groups.values() {
        let mut ordered = rows.clone();
        ordered.sort_by(|&a, &b| {
            let ka = order_key(order_col, a);
            let kb = order_key(order_col, b);
            ka.partial_cmp(&kb)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| match tie_col {
                    Some(t) => t.str_at(a).cmp(&t.str_at(b)),
                    None => std::cmp::Ordering::Equal,
                })
        });
        let mut prev: Option<f64> = None;
        for (pos, &row) in ordered.iter().enumerate() {
            let cur = value_col.numeric_at(row);
            out[row] = match (pos, prev, cur) {
                (0, _, _) | (_, None, _) | (_, _, None) => None,
                (_, Some(p), Some(c)) => Some(c - p),
            };
            prev = cur;
        }
    }
    let mut b = ColumnBuilder::new(Field::new(output, ColumnType::F64));
    for v in out {
        b.push_f64(v);
    }
    Ok(b.finish())
}

fn apply_transform(table: &Table, t: &Transform) -> Result<Column, FeatureError> {
    match t {
        Transform::Bucketize { column, kind, output } => bucketize(table, column, kind, output),
        Transform::CardinalityReduce { column, keep, other_label, output } => {
            reduce_cardinality(table, column, keep, other_label, output)
        }
        Transform::ColumnFunction { function, inputs, output } => {
            derive_column(table, function, inputs, output)
        }
        Transform::ShiftDiff { column, order_by, partition_by, output } => {
            shift_diff(table, column, order_by, partition_by, output)
        }
    }
}

/// Applies all transforms in order, appending one column each.
pub fn enrich(table: &mut Table, spec: &EnrichmentSpec) -> Result<(), FeatureError> {
    spec.enriched_schema(&table.schema())?;
    for t in &spec.transforms {
        let col = apply_transform(table, t)?;
        table.push_column(col)?;
    }
    Ok(())
}

/// Row-at-a-time variant of [`enrich`]: all row-local transforms are
/// evaluated in a single pass over the rows (shift-diffs pre-resolve
/// their orderings first). Produces the same table; kept as an
/// independent path for equivalence checks.
pub fn enrich_fused(table: &mut Table, spec: &EnrichmentSpec) -> Result<(), FeatureError> {
    spec.enriched_schema(&table.schema())?;
    // Shift-diff needs neighbors, so its values are resolved up front
    // against the progressively enriched table.
    let mut shift_outputs: BTreeMap<String, Column> = BTreeMap::new();
    let mut staging = table.clone();
    for t in &spec.transforms {
        let col = apply_transform(&staging, t)?;
        if matches!(t, Transform::ShiftDiff { .. }) {
            shift_outputs.insert(t.output().to_string(), col.clone());
        }
        staging.push_column(col)?;
    }
    drop(staging);

    let rows = table.rows();
    let mut builders: Vec<ColumnBuilder> = spec
        .transforms
        .iter()
        .map(|t| Ok(ColumnBuilder::new(Field::new(t.output(), t.output_type()?))))
        .collect::<Result<_, FeatureError>>()?;
    // One pass over rows, evaluating every transform per row against the
    // base columns plus this row's freshly computed outputs.
    for row in 0..rows {
        let mut row_values: BTreeMap<&str, Option<f64>> = BTreeMap::new();
        let mut row_strings: BTreeMap<&str, Option<String>> = BTreeMap::new();
        for (t, b) in spec.transforms.iter().zip(builders.iter_mut()) {
            let lookup_num = |name: &str,
                              row_values: &BTreeMap<&str, Option<f64>>|
             -> Option<Option<f64>> {
                row_values
                    .get(name)
                    .copied()
                    .or_else(|| table.column(name).map(|c| c.numeric_at(row)))
            };
            match t {
                Transform::Bucketize { column, kind: BucketKind::Time { granularity_ms }, output } => {
                    let v = table
                        .column(column)
                        .and_then(|c| c.i64_at(row))
                        .map(|ms| {
                            UtcInstant::from_epoch_millis(ms.max(0))
                                .expect("non-negative millis")
                                .floor_to(*granularity_ms)
                                .epoch_millis()
                        });
                    row_values.insert(output, v.map(|x| x as f64));
                    b.push_i64(v);
                }
                Transform::Bucketize { column, kind: BucketKind::Numeric { edges }, output } => {
                    let v = lookup_num(column, &row_values).flatten();
                    let label = v.map(|x| numeric_bucket_label(x, edges));
                    row_strings.insert(output, label.clone());
                    b.push_str(label.as_deref());
                }
                Transform::CardinalityReduce { column, keep, other_label, output } => {
                    let KeepRule::Values(keep_set) = keep else {
                        return Err(FeatureError::InvalidSpec(
                            "top_k keep rule must be resolved by learn_spec_from_sample before execution"
                                .into(),
                        ));
                    };
                    let incoming = row_strings
                        .get(column.as_str())
                        .cloned()
                        .or_else(|| table.column(column).map(|c| c.str_at(row).map(str::to_string)))
                        .flatten();
                    let label = incoming.map(|v| {
                        if keep_set.contains(&v) {
                            v
                        } else {
                            other_label.clone()
                        }
                    });
                    row_strings.insert(output, label.clone());
                    b.push_str(label.as_deref());
                }
                Transform::ColumnFunction { function, inputs, output } => {
                    let args: Vec<Option<f64>> = inputs
                        .iter()
                        .map(|c| lookup_num(c, &row_values).flatten())
                        .collect();
                    let v = apply_function(function, &args);
                    row_values.insert(output, v);
                    match registry_output_type(function)? {
                        ColumnType::Bool => b.push_bool(v.map(|x| x != 0.0)),
                        _ => b.push_f64(v),
                    }
                }
                Transform::ShiftDiff { output, .. } => {
                    let col = shift_outputs.get(output.as_str()).expect("precomputed shift");
                    let v = col.f64_at(row);
                    row_values.insert(output, v);
                    b.push_f64(v);
                }
            }
        }
    }
    for b in builders {
        table.push_column(b.finish())?;
    }
    Ok(())
}

// --- spec learning -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericBucketHint {
    pub column: String,
    pub buckets: usize,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReduceHint {
    pub column: String,
    pub top_k: usize,
    #[serde(default = "default_other_label")]
    pub other_label: String,
    pub output: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnHints {
    #[serde(default)]
    pub numeric_buckets: Vec<NumericBucketHint>,
    #[serde(default)]
    pub reduce: Vec<ReduceHint>,
    /// Transforms appended verbatim after the learned ones.
    #[serde(default)]
    pub passthrough: Vec<Transform>,
}

/// Linearly interpolated sample quantile (sorted input).
fn interpolated_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Learns bucket edges (sample quantiles) and keep-sets (top-k by sample
/// frequency) from a sample table; deterministic for a fixed sample.
pub fn learn_spec_from_sample(
    sample: &Table,
    hints: &LearnHints,
) -> Result<EnrichmentSpec, FeatureError> {
    if sample.rows() == 0 {
        return Err(FeatureError::EmptySample);
    }
    let mut transforms = Vec::new();
    for hint in &hints.numeric_buckets {
        if hint.buckets < 2 {
            return Err(FeatureError::InvalidSpec("bucket count must be at least 2".into()));
        }
        let col = sample
            .column(&hint.column)
            .ok_or_else(|| FeatureError::MissingColumn(hint.column.clone()))?;
        let mut values: Vec<f64> = (0..sample.rows()).filter_map(|r| col.numeric_at(r)).collect();
        if values.is_empty() {
            return Err(FeatureError::EmptySample);
        }
        values.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in sample"));
        let mut edges: Vec<f64> = (1..hint.buckets)
            .map(|i| interpolated_quantile(&values, i as f64 / hint.buckets as f64))
            .collect();
        edges.dedup();
        transforms.push(Transform::Bucketize {
            column: hint.column.clone(),
            kind: BucketKind::Numeric { edges },
            output: hint.output.clone(),
        });
    }
    for hint in &hints.reduce {
        let col = sample
            .column(&hint.column)
            .ok_or_else(|| FeatureError::MissingColumn(hint.column.clone()))?;
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for row in 0..sample.rows() {
            if let Some(v) = col.str_at(row) {
                *counts.entry(v).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep: BTreeSet<String> =
            ranked.iter().take(hint.top_k).map(|(v, _)| v.to_string()).collect();
        transforms.push(Transform::CardinalityReduce {
            column: hint.column.clone(),
            keep: KeepRule::Values(keep),
            other_label: hint.other_label.clone(),
            output: hint.output.clone(),
        });
    }
    transforms.extend(hints.passthrough.clone());
    Ok(EnrichmentSpec { transforms })
}

// --- aggregation -----------------------------------------------------------------

/// A group-key cell; key columns are homogeneous apart from explicit
/// nulls.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupKey {
    Null,
    Bool(bool),
    I64(i64),
    Str(String),
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupKey::Null => f.write_str("null"),
            GroupKey::Bool(b) => write!(f, "{b}"),
            GroupKey::I64(v) => write!(f, "{v}"),
            GroupKey::Str(s) => f.write_str(s),
        }
    }
}

fn group_key_at(col: &Column, row: usize) -> GroupKey {
    if col.is_null(row) {
        return GroupKey::Null;
    }
    match &col.values {
        Values::I64(v) => GroupKey::I64(v[row]),
        Values::Bool(v) => GroupKey::Bool(v[row]),
        Values::Str(v) => GroupKey::Str(v[row].clone()),
        Values::F64(_) => GroupKey::Null,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggFn {
    Count,
    Sum,
    Mean,
    Std,
    Min,
    Max,
    Median,
    Percentile { p: f64 },
    /// 1-based ascending rank of the group's mean among all groups;
    /// computed after merging, ties broken by group key.
    Rank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSpec {
    pub input: String,
    pub function: AggFn,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub group_by: Vec<String>,
    pub aggregates: Vec<AggregateSpec>,
}

impl AggregationSpec {
    pub fn validate(&self, schema: &[Field]) -> Result<(), FeatureError> {
        if self.group_by.is_empty() {
            return Err(FeatureError::InvalidSpec("at least one group key required".into()));
        }
        let names: BTreeSet<&str> = schema.iter().map(|f| f.name.as_str()).collect();
        for key in &self.group_by {
            if !names.contains(key.as_str()) {
                return Err(FeatureError::MissingColumn(key.clone()));
            }
            let ty = schema.iter().find(|f| f.name == *key).expect("checked").ty;
            if ty == ColumnType::F64 {
                return Err(FeatureError::InvalidSpec(format!(
                    "cannot group by float column '{key}'"
                )));
            }
        }
        let mut outputs: BTreeSet<&str> = BTreeSet::new();
        for agg in &self.aggregates {
            if !names.contains(agg.input.as_str()) {
                return Err(FeatureError::MissingColumn(agg.input.clone()));
            }
            if let AggFn::Percentile { p } = agg.function {
                if !(0.0 < p && p < 100.0) {
                    return Err(FeatureError::InvalidSpec(format!(
                        "percentile p={p} outside (0,100)"
                    )));
                }
            }
            if agg.output == "support" || self.group_by.contains(&agg.output) {
                return Err(FeatureError::InvalidSpec(format!(
                    "aggregate output '{}' clashes with a key or the support column",
                    agg.output
                )));
            }
            if !outputs.insert(agg.output.as_str()) {
                return Err(FeatureError::InvalidSpec(format!(
                    "duplicate aggregate output '{}'",
                    agg.output
                )));
            }
        }
        Ok(())
    }
}

/// How the detector treats a feature that is absent for a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Impute 0 (count-like features: absence of traffic means zero).
    Zero,
    /// Leave the feature out of the scored set for that window.
    Exclude,
}

/// Count-like aggregates (counts and sums of boolean flags) impute zero;
/// everything else is excluded when missing.
pub fn missing_policy(function: AggFn, input_type: ColumnType) -> MissingPolicy {
    match function {
        AggFn::Count => MissingPolicy::Zero,
        AggFn::Sum if input_type == ColumnType::Bool => MissingPolicy::Zero,
        _ => MissingPolicy::Exclude,
    }
}

#[derive(Debug, Clone)]
enum AggState {
    Count(u64),
    Sum { sum: f64, any: bool },
    Moments { n: u64, sum: f64, sumsq: f64 },
    Min(Option<f64>),
    Max(Option<f64>),
    Retain { values: Vec<f64>, truncated: bool },
}

impl AggState {
    fn new(f: AggFn) -> Self {
        match f {
            AggFn::Count => AggState::Count(0),
            AggFn::Sum => AggState::Sum { sum: 0.0, any: false },
            AggFn::Mean | AggFn::Std | AggFn::Rank => {
                AggState::Moments { n: 0, sum: 0.0, sumsq: 0.0 }
            }
            AggFn::Min => AggState::Min(None),
            AggFn::Max => AggState::Max(None),
            AggFn::Median | AggFn::Percentile { .. } => {
                AggState::Retain { values: Vec::new(), truncated: false }
            }
        }
    }

    fn push(&mut self, value: Option<f64>, valid: bool, retain_cap: usize) {
        match self {
            AggState::Count(n) => {
                if valid {
                    *n += 1;
                }
            }
            AggState::Sum { sum, any } => {
                if let Some(v) = value {
                    *sum += v;
                    *any = true;
                }
            }
            AggState::Moments { n, sum, sumsq } => {
                if let Some(v) = value {
                    *n += 1;
                    *sum += v;
                    *sumsq += v * v;
                }
            }
            AggState::Min(m) => {
                if let Some(v) = value {
                    *m = Some(m.map_or(v, |cur| cur.min(v)));
                }
            }
            AggState::Max(m) => {
                if let Some(v) = value {
                    *m = Some(m.map_or(v, |cur| cur.max(v)));
                }
            }
            AggState::Retain { values, truncated } => {
                if let Some(v) = value {
                    if values.len() >= retain_cap {
                        *truncated = true;
                    } else {
                        values.push(v);
                    }
                }
            }
        }
    }

    fn merge(&mut self, other: AggState, retain_cap: usize) {
        match (self, other) {
            (AggState::Count(a), AggState::Count(b)) => *a += b,
            (AggState::Sum { sum, any }, AggState::Sum { sum: s2, any: a2 }) => {
                *sum += s2;
                *any |= a2;
            }
            (
                AggState::Moments { n, sum, sumsq },
                AggState::Moments { n: n2, sum: s2, sumsq: q2 },
            ) => {
                *n += n2;
                *sum += s2;
                *sumsq += q2;
            }
            (AggState::Min(a), AggState::Min(b)) => {
                *a = match (*a, b) {
                    (Some(x), Some(y)) => Some(x.min(y)),
                    (x, y) => x.or(y),
                };
            }
            (AggState::Max(a), AggState::Max(b)) => {
                *a = match (*a, b) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    (x, y) => x.or(y),
                };
            }
            (
                AggState::Retain { values, truncated },
                AggState::Retain { values: v2, truncated: t2 },
            ) => {
                *truncated |= t2;
                for v in v2 {
                    if values.len() >= retain_cap {
                        *truncated = true;
                        break;
                    }
                    values.push(v);
                }
            }
            _ => unreachable!("mismatched aggregate states"),
        }
    }
}

/// Nearest-rank percentile of a sorted multiset.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

struct GroupState {
    support: u64,
    aggs: Vec<AggState>,
}

#[derive(Debug, Clone, Copy)]
pub struct AggOptions {
    /// Hard cap on distinct groups; exceeding it is an error naming
    /// sample keys (guards against grouping by an un-reduced column).
    pub group_cap: usize,
    /// Per-group retained values for exact percentiles; beyond it the
    /// group's percentile features go null and the matrix is flagged.
    pub retain_cap: usize,
}

impl Default for AggOptions {
    fn default() -> Self {
        AggOptions {
            group_cap: DEFAULT_GROUP_CAP,
            retain_cap: DEFAULT_RETAIN_CAP,
        }
    }
}

/// Mergeable per-worker aggregation state: accumulate tables, merge
/// partials associatively, finalize once.
pub struct PartialAgg {
    spec: AggregationSpec,
    opts: AggOptions,
    groups: HashMap<Vec<GroupKey>, GroupState>,
    key_types: Vec<Option<ColumnType>>,
    feature_types: Vec<ColumnType>,
}

impl PartialAgg {
    pub fn new(spec: AggregationSpec, opts: AggOptions) -> Self {
        let keys = spec.group_by.len();
        let feats = spec.aggregates.len();
        PartialAgg {
            spec,
            opts,
            groups: HashMap::new(),
            key_types: vec![None; keys],
            feature_types: vec![ColumnType::F64; feats],
        }
    }

    pub fn accumulate(&mut self, table: &Table) -> Result<(), FeatureError> {
        self.spec.validate(&table.schema())?;
        let key_cols: Vec<&Column> = self
            .spec
            .group_by
            .iter()
            .map(|k| table.require(k).map_err(FeatureError::from))
            .collect::<Result<_, _>>()?;
        for (slot, col) in self.key_types.iter_mut().zip(&key_cols) {
            match slot {
                None => *slot = Some(col.field.ty),
                Some(ty) if *ty != col.field.ty => {
                    return Err(FeatureError::InvalidSpec(format!(
                        "group key '{}' changes type across batches",
                        col.field.name
                    )));
                }
                _ => {}
            }
        }
        let agg_cols: Vec<&Column> = self
            .spec
            .aggregates
            .iter()
            .map(|a| table.require(&a.input).map_err(FeatureError::from))
            .collect::<Result<_, _>>()?;
        for row in 0..table.rows() {
            let key: Vec<GroupKey> = key_cols.iter().map(|c| group_key_at(c, row)).collect();
            if !self.groups.contains_key(&key) && self.groups.len() >= self.opts.group_cap {
                let mut samples: Vec<String> = self
                    .groups
                    .keys()
                    .take(5)
                    .map(|k| k.iter().map(ToString::to_string).collect::<Vec<_>>().join("|"))
                    .collect();
                samples.sort();
                return Err(FeatureError::GroupCardinality {
                    cap: self.opts.group_cap,
                    samples,
                });
            }
            let state = self.groups.entry(key).or_insert_with(|| GroupState {
                support: 0,
                aggs: self.spec.aggregates.iter().map(|a| AggState::new(a.function)).collect(),
            });
            state.support += 1;
            for ((agg, col), st) in
                self.spec.aggregates.iter().zip(&agg_cols).zip(state.aggs.iter_mut())
            {
                let valid = !col.is_null(row);
                let value = match agg.function {
                    AggFn::Count => None,
                    _ => col.numeric_at(row),
                };
                st.push(value, valid, self.opts.retain_cap);
            }
        }
        Ok(())
    }

    /// Associative, commutative merge of two partials over the same spec.
    pub fn merge(mut self, other: PartialAgg) -> Result<PartialAgg, FeatureError> {
        if self.spec != other.spec {
            return Err(FeatureError::InvalidSpec(
                "cannot merge partial aggregations with different specs".into(),
            ));
        }
        for (slot, theirs) in self.key_types.iter_mut().zip(other.key_types) {
            match (&slot, theirs) {
                (None, t) => *slot = t,
                (Some(a), Some(b)) if *a != b => {
                    return Err(FeatureError::InvalidSpec(
                        "group key types disagree between partials".into(),
                    ));
                }
                _ => {}
            }
        }
        for (key, state) in other.groups {
            match self.groups.entry(key) {
                std::collections::hash_map::Entry::Vacant(v) => {
                    v.insert(state);
                }
                std::collections::hash_map::Entry::Occupied(mut o) => {
                    let mine = o.get_mut();
                    mine.support += state.support;
                    for (a, b) in mine.aggs.iter_mut().zip(state.aggs) {
                        a.merge(b, self.opts.retain_cap);
                    }
                }
            }
        }
        Ok(self)
    }

    pub fn finalize(self) -> Result<FeatureMatrix, FeatureError> {
        let _ = &self.feature_types;
        let mut keys: Vec<Vec<GroupKey>> = self.groups.keys().cloned().collect();
        keys.sort();
        let mut truncated_groups = 0u64;

        let mut key_columns: Vec<KeyColumn> = self
            .spec
            .group_by
            .iter()
            .map(|name| KeyColumn {
                name: name.clone(),
                values: Vec::with_capacity(keys.len()),
            })
            .collect();
        let mut support = Vec::with_capacity(keys.len());
        let mut features: Vec<FeatureColumn> = self
            .spec
            .aggregates
            .iter()
            .map(|a| FeatureColumn {
                name: a.output.clone(),
                values: Vec::with_capacity(keys.len()),
                missing: MissingPolicy::Exclude,
            })
            .collect();

        // Rank aggregates need every group's mean before emitting.
        let mut rank_values: Vec<Option<BTreeMap<Vec<GroupKey>, f64>>> =
            vec![None; self.spec.aggregates.len()];
        for (i, agg) in self.spec.aggregates.iter().enumerate() {
            if agg.function != AggFn::Rank {
                continue;
            }
            let mut pairs: Vec<(&Vec<GroupKey>, f64)> = self
                .groups
                .iter()
                .filter_map(|(k, st)| match &st.aggs[i] {
                    AggState::Moments { n, sum, .. } if *n > 0 => Some((k, sum / *n as f64)),
                    _ => None,
                })
                .collect();
            pairs.sort_by(|a, b| {
                a.1.partial_cmp(&b.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.0.cmp(b.0))
            });
            rank_values[i] = Some(
                pairs
                    .into_iter()
                    .enumerate()
                    .map(|(rank, (k, _))| (k.clone(), (rank + 1) as f64))
                    .collect(),
            );
        }

        for key in &keys {
            let state = &self.groups[key];
            for (col, cell) in key_columns.iter_mut().zip(key.iter()) {
                col.values.push(cell.clone());
            }
            support.push(state.support);
            for (i, (agg, st)) in self.spec.aggregates.iter().zip(&state.aggs).enumerate() {
                let value = match (&agg.function, st) {
                    (AggFn::Count, AggState::Count(n)) => Some(*n as f64),
                    (AggFn::Sum, AggState::Sum { sum, any }) => any.then_some(*sum),
                    (AggFn::Mean, AggState::Moments { n, sum, .. }) => {
                        (*n > 0).then(|| sum / *n as f64)
                    }
                    (AggFn::Std, AggState::Moments { n, sum, sumsq }) => (*n > 0).then(|| {
                        let n = *n as f64;
                        let mean = sum / n;
                        (sumsq / n - mean * mean).max(0.0).sqrt()
                    }),
                    (AggFn::Min, AggState::Min(m)) => *m,
                    (AggFn::Max, AggState::Max(m)) => *m,
                    (AggFn::Median, AggState::Retain { values, truncated })
                    | (AggFn::Percentile { .. }, AggState::Retain { values, truncated }) => {
                        if *truncated {
                            truncated_groups += 1;
                            None
                        } else if values.is_empty() {
                            None
                        } else {
                            let mut sorted = values.clone();
                            sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN aggregates"));
                            let p = match agg.function {
                                AggFn::Median => 50.0,
                                AggFn::Percentile { p } => p,
                                _ => unreachable!(),
                            };
                            Some(nearest_rank(&sorted, p))
                        }
                    }
                    (AggFn::Rank, AggState::Moments { .. }) => rank_values[i]
                        .as_ref()
                        .and_then(|m| m.get(key))
                        .copied(),
                    _ => unreachable!("state matches function"),
                };
                features[i].values.push(value);
            }
        }

        Ok(FeatureMatrix {
            key_columns,
            features,
            support,
            truncated_groups,
        })
    }
}

/// Single multi-column group-by over a table stream.
pub fn group_aggregate<'a, I>(
    tables: I,
    spec: &AggregationSpec,
    opts: AggOptions,
) -> Result<FeatureMatrix, FeatureError>
where
    I: IntoIterator<Item = &'a Table>,
{
    let mut partial = PartialAgg::new(spec.clone(), opts);
    for table in tables {
        partial.accumulate(table)?;
    }
    partial.finalize()
}

// --- the feature matrix ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct KeyColumn {
    pub name: String,
    pub values: Vec<GroupKey>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureColumn {
    pub name: String,
    pub values: Vec<Option<f64>>,
    pub missing: MissingPolicy,
}

/// Rows keyed by (time window, group keys), one numeric column per
/// feature, plus per-row record support.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub key_columns: Vec<KeyColumn>,
    pub features: Vec<FeatureColumn>,
    pub support: Vec<u64>,
    /// Groups whose percentile retention hit the cap.
    pub truncated_groups: u64,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.support.len()
    }

    pub fn key_column(&self, name: &str) -> Option<&KeyColumn> {
        self.key_columns.iter().find(|k| k.name == name)
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureColumn> {
        self.features.iter().find(|f| f.name == name)
    }

    /// Applies the aggregation spec's derived missing policies.
    pub fn set_missing_policies(&mut self, policies: &BTreeMap<String, MissingPolicy>) {
        for f in &mut self.features {
            if let Some(p) = policies.get(&f.name) {
                f.missing = *p;
            }
        }
    }

    pub fn to_table(&self) -> Result<Table, FeatureError> {
        let rows = self.rows();
        let mut columns = Vec::new();
        for key in &self.key_columns {
            let ty = key
                .values
                .iter()
                .find_map(|v| match v {
                    GroupKey::Null => None,
                    GroupKey::Bool(_) => Some(ColumnType::Bool),
                    GroupKey::I64(_) => Some(ColumnType::I64),
                    GroupKey::Str(_) => Some(ColumnType::Str),
                })
                .unwrap_or(ColumnType::Str);
            let mut b = ColumnBuilder::new(Field::new(&key.name, ty));
            for v in &key.values {
                match (ty, v) {
                    (ColumnType::I64, GroupKey::I64(x)) => b.push_i64(Some(*x)),
                    (ColumnType::Bool, GroupKey::Bool(x)) => b.push_bool(Some(*x)),
                    (ColumnType::Str, GroupKey::Str(s)) => b.push_str(Some(s)),
                    (ColumnType::I64, GroupKey::Null) => b.push_i64(None),
                    (ColumnType::Bool, GroupKey::Null) => b.push_bool(None),
                    (ColumnType::Str, GroupKey::Null) => b.push_str(None),
                    _ => {
                        return Err(FeatureError::InvalidSpec(format!(
                            "key column '{}' mixes value types",
                            key.name
                        )));
                    }
                }
            }
            columns.push(b.finish());
        }
        for feat in &self.features {
            let mut b = ColumnBuilder::new(Field::new(&feat.name, ColumnType::F64));
            for v in &feat.values {
                b.push_f64(*v);
            }
            columns.push(b.finish());
        }
        let mut b = ColumnBuilder::new(Field::new("support", ColumnType::I64));
        for s in &self.support {
            b.push_i64(Some(*s as i64));
        }
        columns.push(b.finish());
        let _ = rows;
        Ok(Table::new(columns)?)
    }

    /// Inverse of [`to_table`]: f64 columns are features, `support` is
    /// support, everything else is a key. Missing policies default to
    /// exclude and can be re-derived from the spec.
    pub fn from_table(table: &Table) -> Result<Self, FeatureError> {
        let mut key_columns = Vec::new();
        let mut features = Vec::new();
        let mut support = Vec::new();
        for col in table.columns() {
            if col.field.name == "support" {
                support = (0..col.len())
                    .map(|r| col.i64_at(r).unwrap_or(0).max(0) as u64)
                    .collect();
                continue;
            }
            match col.field.ty {
                ColumnType::F64 => features.push(FeatureColumn {
                    name: col.field.name.clone(),
                    values: (0..col.len()).map(|r| col.f64_at(r)).collect(),
                    missing: MissingPolicy::Exclude,
                }),
                _ => key_columns.push(KeyColumn {
                    name: col.field.name.clone(),
                    values: (0..col.len()).map(|r| group_key_at(col, r)).collect(),
                }),
            }
        }
        if support.is_empty() && table.rows() > 0 {
            return Err(FeatureError::MissingColumn("support".into()));
        }
        Ok(FeatureMatrix {
            key_columns,
            features,
            support,
            truncated_groups: 0,
        })
    }

    pub fn write_slc(&self, path: &Path, level: u32) -> Result<(), FeatureError> {
        slc::write_table(path, &self.to_table()?, level)?;
        Ok(())
    }

    pub fn read_slc(path: &Path) -> Result<Self, FeatureError> {
        Self::from_table(&slc::read_table(path, None, None)?)
    }
}

/// Drops rows whose support is below the threshold; returns the removal
/// count alongside the filtered matrix.
pub fn filter_unreliable(matrix: FeatureMatrix, min_support: u64) -> (FeatureMatrix, usize) {
    let keep: Vec<bool> = matrix.support.iter().map(|s| *s >= min_support).collect();
    let removed = keep.iter().filter(|k| !**k).count();
    if removed == 0 {
        return (matrix, 0);
    }
    let filter_keys = |col: &KeyColumn| KeyColumn {
        name: col.name.clone(),
        values: col
            .values
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(v, _)| v.clone())
            .collect(),
    };
    let filtered = FeatureMatrix {
        key_columns: matrix.key_columns.iter().map(filter_keys).collect(),
        features: matrix
            .features
            .iter()
            .map(|f| FeatureColumn {
                name: f.name.clone(),
                values: f.values.iter().zip(&keep).filter(|(_, k)| **k).map(|(v, _)| *v).collect(),
                missing: f.missing,
            })
            .collect(),
        support: matrix.support.iter().zip(&keep).filter(|(_, k)| **k).map(|(s, _)| *s).collect(),
        truncated_groups: matrix.truncated_groups,
    };
    (filtered, removed)
}

// --- canned spec for access logs --------------------------------------------------

/// The complete feature job description: enrichment, aggregation and the
/// support floor. Serialized as the `--spec` JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpecDoc {
    pub enrichment: EnrichmentSpec,
    pub aggregation: AggregationSpec,
    #[serde(default = "default_min_support")]
    pub min_support: u64,
}

fn default_min_support() -> u64 {
    5
}

impl FeatureSpecDoc {
    /// Per-minute latency/error/volume features keyed by
    /// (window, location, accesser, op group).
    pub fn default_access() -> Self {
        let enrichment = EnrichmentSpec {
            transforms: vec![
                Transform::Bucketize {
                    column: "start".into(),
                    kind: BucketKind::Time { granularity_ms: 60_000 },
                    output: "window_start".into(),
                },
                Transform::CardinalityReduce {
                    column: "op_type".into(),
                    keep: KeepRule::Values(BTreeSet::from(
                        ["GET", "PUT", "HEAD", "LIST", "DELETE"].map(String::from),
                    )),
                    other_label: "OTHER".into(),
                    output: "op_group".into(),
                },
                Transform::ColumnFunction {
                    function: "is_error".into(),
                    inputs: vec!["http_status".into()],
                    output: "is_error".into(),
                },
            ],
        };
        let aggregation = AggregationSpec {
            group_by: vec![
                "window_start".into(),
                "location".into(),
                "accesser_id".into(),
                "op_group".into(),
            ],
            aggregates: vec![
                AggregateSpec {
                    input: "request_id".into(),
                    function: AggFn::Count,
                    output: "ops".into(),
                },
                AggregateSpec {
                    input: "is_error".into(),
                    function: AggFn::Sum,
                    output: "errors".into(),
                },
                AggregateSpec {
                    input: "latency_total_ms".into(),
                    function: AggFn::Mean,
                    output: "latency_total_mean".into(),
                },
                AggregateSpec {
                    input: "latency_total_ms".into(),
                    function: AggFn::Percentile { p: 95.0 },
                    output: "latency_total_p95".into(),
                },
                AggregateSpec {
                    input: "latency_backend_wait_ms".into(),
                    function: AggFn::Mean,
                    output: "latency_backend_mean".into(),
                },
                AggregateSpec {
                    input: "latency_auth_ms".into(),
                    function: AggFn::Mean,
                    output: "latency_auth_mean".into(),
                },
            ],
        };
        FeatureSpecDoc {
            enrichment,
            aggregation,
            min_support: default_min_support(),
        }
    }

    /// Missing policies per feature output, derived from the aggregate
    /// functions and the enriched input column types.
    pub fn missing_policies(&self, base_schema: &[Field]) -> Result<BTreeMap<String, MissingPolicy>, FeatureError> {
        let schema = self.enrichment.enriched_schema(base_schema)?;
        let mut out = BTreeMap::new();
        for agg in &self.aggregation.aggregates {
            let ty = schema
                .iter()
                .find(|f| f.name == agg.input)
                .map(|f| f.ty)
                .ok_or_else(|| FeatureError::MissingColumn(agg.input.clone()))?;
            out.insert(agg.output.clone(), missing_policy(agg.function, ty));
        }
        Ok(out)
    }

    /// Enrich + aggregate + support-filter over a table stream.
    pub fn run<'a, I>(&self, tables: I, opts: AggOptions) -> Result<FeatureMatrix, FeatureError>
    where
        I: IntoIterator<Item = Table>,
    {
        let mut partial = PartialAgg::new(self.aggregation.clone(), opts);
        let mut policies: Option<BTreeMap<String, MissingPolicy>> = None;
        for mut table in tables {
            if policies.is_none() {
                policies = Some(self.missing_policies(&table.schema())?);
            }
            enrich(&mut table, &self.enrichment)?;
            partial.accumulate(&table)?;
        }
        let (mut matrix, _) = filter_unreliable(partial.finalize()?, self.min_support);
        if let Some(p) = policies {
            matrix.set_missing_policies(&p);
        }
        Ok(matrix)
    }
}
