//! Root-cause isolation.
//!
//! Two views of the same incident: the performance view ranks features by
//! peak |z| inside an anomaly period and attributes the period to the
//! component most of the top features belong to; the connectivity view
//! aggregates per-pair reachability bottom-up over the component
//! hierarchy and reports the maximal failed nodes, so a fully failed site
//! surfaces as one site-level locus instead of a pile of node alerts.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{AnomalyPeriod, BaselineModel, PivotedMatrix, zscore};
use crate::logmodel::{ConnectivityRecord, UtcInstant};

pub const DEFAULT_FAIL_THRESHOLD: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Error)]
pub enum IsolateError {
    #[error("anomaly period does not overlap the matrix time range")]
    EmptyOverlap,
    #[error("ranking is empty")]
    EmptyRanking,
    #[error("invalid hierarchy: {0}")]
    InvalidHierarchy(String),
    #[error("server ids missing from hierarchy leaves: {0:?}")]
    LeafCoverage(Vec<String>),
}

/// Aggregation levels, ordered leaf to root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Level {
    Node,
    Role,
    Site,
    Region,
    Service,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Level::Node => "NODE",
            Level::Role => "ROLE",
            Level::Site => "SITE",
            Level::Region => "REGION",
            Level::Service => "SERVICE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierNode {
    pub id: String,
    pub level: Level,
    #[serde(default)]
    pub children: Vec<HierNode>,
}

/// Component tree; leaves are server ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Hierarchy {
    pub root: HierNode,
}

impl Hierarchy {
    pub fn from_json(text: &str) -> Result<Self, IsolateError> {
        let h: Hierarchy = serde_json::from_str(text)
            .map_err(|e| IsolateError::InvalidHierarchy(e.to_string()))?;
        h.validate()?;
        Ok(h)
    }

    /// Levels strictly decrease from root to leaf and every node id is
    /// unique.
    pub fn validate(&self) -> Result<(), IsolateError> {
        let mut ids = BTreeSet::new();
        fn walk(
            node: &HierNode,
            ids: &mut BTreeSet<String>,
        ) -> Result<(), IsolateError> {
            if !ids.insert(node.id.clone()) {
                return Err(IsolateError::InvalidHierarchy(format!(
                    "duplicate node id '{}'",
                    node.id
                )));
            }
            for child in &node.children {
                if child.level >= node.level {
                    return Err(IsolateError::InvalidHierarchy(format!(
                        "child '{}' ({}) not below parent '{}' ({})",
                        child.id, child.level, node.id, node.level
                    )));
                }
                walk(child, ids)?;
            }
            Ok(())
        }
        walk(&self.root, &mut ids)
    }

    pub fn leaf_ids(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        fn walk(node: &HierNode, out: &mut BTreeSet<String>) {
            if node.children.is_empty() {
                out.insert(node.id.clone());
            }
            for c in &node.children {
                walk(c, out);
            }
        }
        walk(&self.root, &mut out);
        out
    }
}

fn leaves_under(node: &HierNode, out: &mut Vec<String>) {
    if node.children.is_empty() {
        out.push(node.id.clone());
    }
    for c in &node.children {
        leaves_under(c, out);
    }
}

// --- connectivity matrix ------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStats {
    pub connected_minutes: u64,
    pub observed_minutes: u64,
}

impl PairStats {
    pub fn fraction(&self) -> f64 {
        if self.observed_minutes == 0 {
            return 0.0;
        }
        self.connected_minutes as f64 / self.observed_minutes as f64
    }
}

/// Per ordered pair, the fraction of observed minutes the pair was
/// connected inside a window. Pairs never observed are absent, not zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityMatrix {
    pub from: UtcInstant,
    pub to: UtcInstant,
    pub expected_minutes: u64,
    pub entries: BTreeMap<(String, String), PairStats>,
}

impl ConnectivityMatrix {
    pub fn fraction(&self, source: &str, target: &str) -> Option<f64> {
        self.entries
            .get(&(source.to_string(), target.to_string()))
            .map(PairStats::fraction)
    }

    pub fn server_ids(&self) -> BTreeSet<String> {
        self.entries
            .keys()
            .flat_map(|(s, t)| [s.clone(), t.clone()])
            .collect()
    }
}

pub fn build_connectivity_matrix<'a, I>(
    records: I,
    from: UtcInstant,
    to: UtcInstant,
) -> ConnectivityMatrix
where
    I: IntoIterator<Item = &'a ConnectivityRecord>,
{
    let mut entries: BTreeMap<(String, String), PairStats> = BTreeMap::new();
    for rec in records {
        if rec.ts < from || rec.ts >= to {
            continue;
        }
        let stats = entries
            .entry((rec.source_id.clone(), rec.target_id.clone()))
            .or_default();
        stats.observed_minutes += 1;
        stats.connected_minutes += u64::from(rec.connected);
    }
    ConnectivityMatrix {
        from,
        to,
        expected_minutes: ((to.epoch_millis() - from.epoch_millis()) / 60_000).max(0) as u64,
        entries,
    }
}

// --- severity ------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Low,
    Medium,
    High,
}

/// Configurable severity rubric shared by both views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityRubric {
    pub high_level: Level,
    pub high_affected: usize,
    pub medium_peak_z: f64,
    pub medium_affected: usize,
}

impl Default for SeverityRubric {
    fn default() -> Self {
        SeverityRubric {
            high_level: Level::Site,
            high_affected: 10,
            medium_peak_z: 10.0,
            medium_affected: 3,
        }
    }
}

impl SeverityRubric {
    pub fn classify(
        &self,
        level: Option<Level>,
        affected: usize,
        peak_abs_z: Option<f64>,
    ) -> Severity {
        if level.is_some_and(|l| l >= self.high_level) || affected > self.high_affected {
            Severity::High
        } else if peak_abs_z.is_some_and(|z| z >= self.medium_peak_z)
            || affected > self.medium_affected
        {
            Severity::Medium
        } else {
            Severity::Low
        }
    }
}

// --- connectivity localization ---------------------------------------------------

/// A maximal failed node: failed while its parent is not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureLocus {
    pub node_id: String,
    pub level: Level,
    pub window: (UtcInstant, UtcInstant),
    /// Share of unreachable observations across the locus's pairs.
    pub failed_fraction: f64,
    pub affected_components: Vec<String>,
    pub severity: Severity,
}

#[derive(Debug, Clone, Copy)]
pub struct LocalizeOptions {
    /// A leaf is failed when its mean pair reachability is below this.
    pub fail_threshold: f64,
    /// Share of observed children that must be failed to fail a parent
    /// (1.0 = all).
    pub children_threshold: f64,
    pub rubric: SeverityRubric,
}

impl Default for LocalizeOptions {
    fn default() -> Self {
        LocalizeOptions {
            fail_threshold: DEFAULT_FAIL_THRESHOLD,
            children_threshold: 1.0,
            rubric: SeverityRubric::default(),
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum NodeState {
    Unobserved,
    Healthy,
    Failed,
}

fn leaf_reachability(matrix: &ConnectivityMatrix, leaf: &str) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0u64;
    for ((s, t), stats) in &matrix.entries {
        if s == leaf || t == leaf {
            sum += stats.fraction();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Bottom-up localization over the hierarchy: a leaf is failed when its
/// mean observed reachability is below the threshold; an internal node
/// fails when all (or the configured share of) its observed children
/// fail. Returns the maximal failed nodes, largest subtree first.
pub fn localize_failure(
    matrix: &ConnectivityMatrix,
    hierarchy: &Hierarchy,
    opts: &LocalizeOptions,
) -> Result<Vec<FailureLocus>, IsolateError> {
    hierarchy.validate()?;
    if matrix.entries.is_empty() {
        return Ok(Vec::new());
    }
    let leaves = hierarchy.leaf_ids();
    let missing: Vec<String> = matrix
        .server_ids()
        .into_iter()
        .filter(|id| !leaves.contains(id))
        .collect();
    if !missing.is_empty() {
        return Err(IsolateError::LeafCoverage(missing));
    }

    fn state_of(
        node: &HierNode,
        matrix: &ConnectivityMatrix,
        opts: &LocalizeOptions,
        states: &mut BTreeMap<String, NodeState>,
    ) -> NodeState {
        let state = if node.children.is_empty() {
            match leaf_reachability(matrix, &node.id) {
                None => NodeState::Unobserved,
                Some(r) if r < opts.fail_threshold => NodeState::Failed,
                Some(_) => NodeState::Healthy,
            }
        } else {
            let child_states: Vec<NodeState> = node
                .children
                .iter()
                .map(|c| state_of(c, matrix, opts, states))
                .collect();
            let observed = child_states.iter().filter(|s| **s != NodeState::Unobserved).count();
            let failed = child_states.iter().filter(|s| **s == NodeState::Failed).count();
            if observed == 0 {
                NodeState::Unobserved
            } else if failed as f64 >= opts.children_threshold * observed as f64 && failed > 0 {
                NodeState::Failed
            } else {
                NodeState::Healthy
            }
        };
        states.insert(node.id.clone(), state);
        state
    }

    let mut states = BTreeMap::new();
    state_of(&hierarchy.root, matrix, opts, &mut states);

    // Maximal failed nodes: failed with a non-failed parent.
    let mut loci = Vec::new();
    fn collect_loci<'h>(
        node: &'h HierNode,
        parent_failed: bool,
        states: &BTreeMap<String, NodeState>,
        out: &mut Vec<&'h HierNode>,
    ) {
        let failed = states[&node.id] == NodeState::Failed;
        if failed && !parent_failed {
            out.push(node);
        }
        for c in &node.children {
            collect_loci(c, failed, states, out);
        }
    }
    let mut nodes: Vec<&HierNode> = Vec::new();
    collect_loci(&hierarchy.root, false, &states, &mut nodes);
    nodes.sort_by(|a, b| {
        let mut la = Vec::new();
        let mut lb = Vec::new();
        leaves_under(a, &mut la);
        leaves_under(b, &mut lb);
        lb.len().cmp(&la.len()).then_with(|| a.id.cmp(&b.id))
    });

    for node in nodes {
        let mut subtree = Vec::new();
        leaves_under(node, &mut subtree);
        let subtree_set: BTreeSet<&String> = subtree.iter().collect();
        let mut unreachable = 0.0;
        let mut observed = 0u64;
        let mut affected: BTreeSet<String> = BTreeSet::new();
        for ((s, t), stats) in &matrix.entries {
            let s_in = subtree_set.contains(s);
            let t_in = subtree_set.contains(t);
            if !s_in && !t_in {
                continue;
            }
            unreachable += 1.0 - stats.fraction();
            observed += 1;
            if stats.fraction() < opts.fail_threshold {
                let other = if s_in { t } else { s };
                if !subtree_set.contains(other) {
                    affected.insert(other.clone());
                }
            }
        }
        let affected: Vec<String> = affected.into_iter().collect();
        loci.push(FailureLocus {
            node_id: node.id.clone(),
            level: node.level,
            window: (matrix.from, matrix.to),
            failed_fraction: if observed == 0 { 0.0 } else { unreachable / observed as f64 },
            severity: opts.rubric.classify(Some(node.level), affected.len(), None),
            affected_components: affected,
        });
    }
    Ok(loci)
}

// --- feature ranking / attribution -------------------------------------------------

const COMPONENT_KEYS: [&str; 4] = ["accesser_id", "server_id", "source_id", "node_id"];
const LOCATION_KEYS: [&str; 3] = ["location", "source_site", "site"];

/// One feature's contribution to an anomaly period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub feature: String,
    pub metric: String,
    pub component: String,
    pub location: Option<String>,
    /// Peak |z| over the period; `z_at_peak` keeps the sign.
    pub peak_abs_z: f64,
    pub z_at_peak: f64,
}

fn component_of(feature: &crate::detect::PivotFeature) -> (String, Option<String>) {
    let location = LOCATION_KEYS
        .iter()
        .find_map(|k| feature.group_value(k))
        .map(str::to_string);
    let component = COMPONENT_KEYS
        .iter()
        .find_map(|k| feature.group_value(k))
        .map(str::to_string)
        // A feature keyed only by location attributes to the site level.
        .or_else(|| location.clone())
        .unwrap_or_else(|| "unknown".to_string());
    (component, location)
}

/// Ranks model features by their peak |z| inside the period, highest
/// first; ties break on the feature name. `k` larger than the feature
/// count returns the full ranking.
pub fn rank_features(
    period: &AnomalyPeriod,
    pivot: &PivotedMatrix,
    model: &BaselineModel,
    k: usize,
) -> Result<Vec<RankedFeature>, IsolateError> {
    let windows: Vec<usize> = pivot.window_range(period.t_start, period.t_end).collect();
    if windows.is_empty() {
        return Err(IsolateError::EmptyOverlap);
    }
    let mut ranked = Vec::new();
    for feat in &pivot.features {
        let Some(stats) = model.features.get(&feat.name) else {
            continue;
        };
        let mut peak: Option<f64> = None;
        for &w in &windows {
            let value = match feat.values[w] {
                Some(v) => Some(v),
                None if model.zero_missing.contains(&feat.name) => Some(0.0),
                None => None,
            };
            if let Some(v) = value {
                let z = zscore(v, stats);
                if peak.is_none_or(|p: f64| z.abs() > p.abs()) {
                    peak = Some(z);
                }
            }
        }
        if let Some(z) = peak {
            let (component, location) = component_of(feat);
            ranked.push(RankedFeature {
                feature: feat.name.clone(),
                metric: feat.metric.clone(),
                component,
                location,
                peak_abs_z: z.abs(),
                z_at_peak: z,
            });
        }
    }
    ranked.sort_by(|a, b| {
        b.peak_abs_z
            .partial_cmp(&a.peak_abs_z)
            .expect("finite z")
            .then_with(|| a.feature.cmp(&b.feature))
    });
    ranked.truncate(k.max(1));
    if ranked.is_empty() {
        return Err(IsolateError::EmptyRanking);
    }
    Ok(ranked)
}

/// The attributed component for one anomaly period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentAttribution {
    pub t_start: UtcInstant,
    pub t_end: UtcInstant,
    pub peak_score: f64,
    pub ranked: Vec<RankedFeature>,
    pub leading_component: String,
    /// Share of the top-k features on the leading component.
    pub concentration: f64,
    pub location: Option<String>,
    pub severity: Severity,
}

/// Attributes a period to the component most of the top-k features come
/// from; ties break on higher summed |z|, then on the component id.
pub fn attribute_component(
    period: &AnomalyPeriod,
    ranked: &[RankedFeature],
    k: usize,
    rubric: &SeverityRubric,
) -> Result<ComponentAttribution, IsolateError> {
    if ranked.is_empty() {
        return Err(IsolateError::EmptyRanking);
    }
    let top = &ranked[..ranked.len().min(k.max(1))];
    let mut tallies: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for f in top {
        let t = tallies.entry(f.component.as_str()).or_insert((0, 0.0));
        t.0 += 1;
        t.1 += f.peak_abs_z;
    }
    let (leading, (count, _)) = tallies
        .iter()
        .max_by(|(ida, (ca, za)), (idb, (cb, zb))| {
            ca.cmp(cb)
                .then_with(|| za.partial_cmp(zb).expect("finite z"))
                .then_with(|| idb.cmp(ida)) // reversed: prefer lexically smaller id
        })
        .map(|(id, t)| (id.to_string(), *t))
        .expect("non-empty tallies");
    let location = top
        .iter()
        .find(|f| f.component == leading)
        .and_then(|f| f.location.clone());
    let affected: BTreeSet<&str> = ranked
        .iter()
        .map(|f| f.component.as_str())
        .filter(|c| *c != leading)
        .collect();
    let peak_z = top.first().map(|f| f.peak_abs_z);
    Ok(ComponentAttribution {
        t_start: period.t_start,
        t_end: period.t_end,
        peak_score: period.peak_score,
        leading_component: leading,
        concentration: count as f64 / top.len() as f64,
        location,
        severity: rubric.classify(None, affected.len(), peak_z),
        ranked: ranked.to_vec(),
    })
}
