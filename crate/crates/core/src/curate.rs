//! Validation, cleaning, deduplication and partitioned columnar staging.
//!
//! Records are staged under `date=YYYY-MM-DD/location=<loc>/part-N.slc`
//! with a per-partition `manifest.json` (row counts, byte lengths, column
//! checksums) and a zero-byte `_SUCCESS` commit marker. Three write modes
//! are supported:
//!
//! - `OVERWRITE_PARTITION` (default): each virtual directory is built in a
//!   temp dir, atomically renamed into place, then marked. A crashed write
//!   leaves no marker and a retry fully replaces the partial output.
//! - `APPEND`: part files land directly in live directories and a single
//!   store-level `_SUCCESS` flag commits the whole dataset; a crashed
//!   write followed by a retry duplicates data (the known hazard of this
//!   mode).
//! - `PER_DATASET`: every (day, location) pair is written as its own
//!   independent job, re-scanning the source once per dataset — the
//!   slowest option.
//!
//! One writer per partition is enforced with a lock file; readers see only
//! committed partitions.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{IngestError, RecordBatch};
use crate::logmodel::{LogRecord, UtcInstant};
use crate::slc::{self, ColumnSummary, SlcError, Table};

pub const DEFAULT_PART_MAX_ROWS: usize = 65_536;
pub const DEFAULT_PART_RAW_BYTES: u64 = 64 << 20;
pub const DEFAULT_COMPRESSION_LEVEL: u32 = 1;
/// Relative tolerance for mean drift; medians must match exactly.
pub const STAT_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CurateError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("columnar file error: {0}")]
    Slc(#[from] SlcError),
    #[error("checksum mismatch in '{file}', column '{column}'")]
    ColumnChecksum { file: String, column: String },
    #[error("partition date={date}/location={location} is locked by another writer")]
    PartitionLocked { date: String, location: String },
    #[error("simulated crash after writing {parts_written} part file(s)")]
    SimulatedCrash { parts_written: usize },
    #[error("invalid store: {0}")]
    InvalidStore(String),
}

/// Normalizes a record's representation; values are preserved.
pub fn clean_record<T: LogRecord>(record: T) -> T {
    record.cleaned()
}

// --- validation ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldStat {
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldStatsPair {
    pub before: FieldStat,
    pub after: FieldStat,
    /// Set when the post-cleaning stats drift beyond tolerance from the
    /// reference stats (or from `before` when no reference was given).
    pub drift_exceeded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CoverageKind {
    Gap,
    Duplicate,
}

/// A maximal run of minutes with missing or duplicated records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageFlag {
    pub kind: CoverageKind,
    pub from: UtcInstant,
    /// Exclusive end minute.
    pub to: UtcInstant,
    pub record_count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub rows_in: u64,
    pub rows_out: u64,
    pub rows_rejected_by_reason: BTreeMap<String, u64>,
    pub field_stats: BTreeMap<String, FieldStatsPair>,
    pub time_coverage: Vec<CoverageFlag>,
}

impl ValidationReport {
    pub fn duplicates(&self) -> u64 {
        self.rows_rejected_by_reason.get("DUPLICATE").copied().unwrap_or(0)
    }

    pub fn has_flags(&self) -> bool {
        !self.time_coverage.is_empty()
            || self.field_stats.values().any(|p| p.drift_exceeded)
    }
}

fn mean_of(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Nearest-rank median of an unsorted slice.
fn median_of(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in stats"));
    sorted[(sorted.len() + 1) / 2 - 1]
}

fn stats_of(values: &[f64]) -> FieldStat {
    FieldStat {
        mean: mean_of(values),
        median: median_of(values),
    }
}

fn drifted(after: FieldStat, wanted: FieldStat) -> bool {
    let denom = wanted.mean.abs().max(1e-9);
    (after.mean - wanted.mean).abs() / denom > STAT_REL_TOL || after.median != wanted.median
}

/// Sanity-checks one kind's batches: row-count conservation, duplicate
/// detection, per-minute coverage, and mean/median preservation of the
/// numeric fields across cleaning (optionally against reference stats).
pub fn validate_batch<T: LogRecord>(
    batches: &[RecordBatch<T>],
    reference_stats: Option<&BTreeMap<String, FieldStat>>,
) -> ValidationReport {
    let mut rejected: BTreeMap<String, u64> = BTreeMap::new();
    let mut rows_in = 0u64;
    let mut before_fields: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut after_fields: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut minute_counts: BTreeMap<i64, u64> = BTreeMap::new();
    let mut dup_minutes: BTreeMap<i64, u64> = BTreeMap::new();
    let mut seen: HashMap<String, ()> = HashMap::new();
    let mut duplicates = 0u64;

    for batch in batches {
        rows_in += (batch.records.len() + batch.rejected.len()) as u64;
        for (_, reason) in &batch.rejected {
            *rejected.entry(reason.to_string()).or_insert(0) += 1;
        }
        for rec in &batch.records {
            for (name, v) in rec.numeric_fields() {
                if let Some(v) = v {
                    before_fields.entry(name).or_default().push(v);
                }
            }
            let cleaned = rec.clone().cleaned();
            let minute = cleaned.event_time().floor_to_minute().epoch_millis();
            if seen.insert(cleaned.dedup_key(), ()).is_some() {
                duplicates += 1;
                *dup_minutes.entry(minute).or_insert(0) += 1;
                continue;
            }
            *minute_counts.entry(minute).or_insert(0) += 1;
            for (name, v) in cleaned.numeric_fields() {
                if let Some(v) = v {
                    after_fields.entry(name).or_default().push(v);
                }
            }
        }
    }
    if duplicates > 0 {
        rejected.insert("DUPLICATE".to_string(), duplicates);
    }

    let mut field_stats = BTreeMap::new();
    for (name, before) in &before_fields {
        let after = after_fields.get(name).map(Vec::as_slice).unwrap_or(&[]);
        let before = stats_of(before);
        let after = stats_of(after);
        let wanted = reference_stats
            .and_then(|m| m.get(*name))
            .copied()
            .unwrap_or(before);
        field_stats.insert(
            name.to_string(),
            FieldStatsPair {
                before,
                after,
                drift_exceeded: drifted(after, wanted),
            },
        );
    }

    let mut time_coverage = Vec::new();
    if let (Some(&first), Some(&last)) =
        (minute_counts.keys().next(), minute_counts.keys().next_back())
    {
        let mut gap_start: Option<i64> = None;
        let mut minute = first;
        while minute <= last + 60_000 {
            let missing = minute <= last && !minute_counts.contains_key(&minute);
            match (missing, gap_start) {
                (true, None) => gap_start = Some(minute),
                (false, Some(start)) => {
                    time_coverage.push(CoverageFlag {
                        kind: CoverageKind::Gap,
                        from: UtcInstant::from_epoch_millis(start).expect("minute in range"),
                        to: UtcInstant::from_epoch_millis(minute).expect("minute in range"),
                        record_count: 0,
                    });
                    gap_start = None;
                }
                _ => {}
            }
            minute += 60_000;
        }
    }
    // Duplicate spans: maximal runs of adjacent minutes containing dups.
    let mut run: Option<(i64, i64, u64)> = None;
    for (&minute, &count) in &dup_minutes {
        run = match run {
            Some((start, end, total)) if minute == end => Some((start, end + 60_000, total + count)),
            Some((start, end, total)) => {
                time_coverage.push(CoverageFlag {
                    kind: CoverageKind::Duplicate,
                    from: UtcInstant::from_epoch_millis(start).expect("minute in range"),
                    to: UtcInstant::from_epoch_millis(end).expect("minute in range"),
                    record_count: total,
                });
                Some((minute, minute + 60_000, count))
            }
            None => Some((minute, minute + 60_000, count)),
        };
    }
    if let Some((start, end, total)) = run {
        time_coverage.push(CoverageFlag {
            kind: CoverageKind::Duplicate,
            from: UtcInstant::from_epoch_millis(start).expect("minute in range"),
            to: UtcInstant::from_epoch_millis(end).expect("minute in range"),
            record_count: total,
        });
    }
    time_coverage.sort_by_key(|f| (f.from, f.to));

    let rows_out = rows_in - rejected.values().sum::<u64>();
    ValidationReport {
        rows_in,
        rows_out,
        rows_rejected_by_reason: rejected,
        field_stats,
        time_coverage,
    }
}

// --- staging ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    /// Each day-location written as its own dataset (one source pass per
    /// dataset).
    PerDataset,
    /// Hive-style partitioning, appending into live directories with a
    /// single dataset-level success flag.
    Append,
    /// Hive-style partitioning, atomically overwriting each virtual
    /// directory. Fastest and safest; the default.
    OverwritePartition,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PartitionKey {
    /// UTC calendar date, `YYYY-MM-DD`, derived from the record's event
    /// time.
    pub date: String,
    pub location: String,
}

impl PartitionKey {
    pub fn of<T: LogRecord>(record: &T) -> Self {
        PartitionKey {
            date: record.event_time().date_string(),
            location: record.location().to_string(),
        }
    }

    pub fn dir_under(&self, root: &Path) -> PathBuf {
        root.join(format!("date={}", self.date)).join(format!("location={}", self.location))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartFileEntry {
    pub name: String,
    pub rows: u64,
    pub byte_len: u64,
    pub columns: Vec<ColumnSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionManifest {
    pub key: PartitionKey,
    pub files: Vec<PartFileEntry>,
    pub commit_marker: bool,
}

impl PartitionManifest {
    pub fn rows(&self) -> u64 {
        self.files.iter().map(|f| f.rows).sum()
    }

    pub fn byte_len(&self) -> u64 {
        self.files.iter().map(|f| f.byte_len).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    date: String,
    location: String,
    files: Vec<PartFileEntry>,
}

#[derive(Debug, Clone)]
pub struct StageOptions {
    pub part_max_rows: usize,
    /// Raw (uncompressed) size target per part file; the configured
    /// default is a 64 MB guess, not a measured optimum.
    pub target_part_raw_bytes: u64,
    pub compression_level: u32,
    /// Test hook: abort as if crashed after this many part files.
    pub fail_after_part_files: Option<usize>,
}

impl Default for StageOptions {
    fn default() -> Self {
        StageOptions {
            part_max_rows: DEFAULT_PART_MAX_ROWS,
            target_part_raw_bytes: DEFAULT_PART_RAW_BYTES,
            compression_level: DEFAULT_COMPRESSION_LEVEL,
            fail_after_part_files: None,
        }
    }
}

/// A batch stream that can be scanned from the start more than once;
/// `PER_DATASET` staging re-scans it once per dataset.
pub trait RecordSource<T> {
    fn scan(&self) -> Box<dyn Iterator<Item = Result<RecordBatch<T>, IngestError>> + '_>;
}

impl<T: LogRecord> RecordSource<T> for Vec<RecordBatch<T>> {
    fn scan(&self) -> Box<dyn Iterator<Item = Result<RecordBatch<T>, IngestError>> + '_> {
        Box::new(self.iter().cloned().map(Ok))
    }
}

/// Re-parses JSON Lines files on every scan.
pub struct JsonlSource {
    pub paths: Vec<PathBuf>,
    pub batch_max_rows: usize,
}

impl JsonlSource {
    pub fn new(paths: Vec<PathBuf>) -> Self {
        JsonlSource {
            paths,
            batch_max_rows: crate::ingest::DEFAULT_BATCH_ROWS,
        }
    }
}

impl<T: LogRecord> RecordSource<T> for JsonlSource {
    fn scan(&self) -> Box<dyn Iterator<Item = Result<RecordBatch<T>, IngestError>> + '_> {
        Box::new(crate::ingest::ingest_batch(self.paths.clone(), self.batch_max_rows))
    }
}

struct PartitionRows<T> {
    rows: Vec<T>,
    index: HashMap<String, usize>,
}

impl<T> Default for PartitionRows<T> {
    fn default() -> Self {
        PartitionRows {
            rows: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: LogRecord> PartitionRows<T> {
    fn insert(&mut self, rec: T) {
        match self.index.entry(rec.dedup_key()) {
            std::collections::hash_map::Entry::Occupied(e) => {
                // Last write wins within a staging run.
                self.rows[*e.get()] = rec;
            }
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(self.rows.len());
                self.rows.push(rec);
            }
        }
    }

    fn into_sorted(self) -> Vec<T> {
        let mut rows = self.rows;
        rows.sort_by_key(|r| (r.event_time(), r.dedup_key()));
        rows
    }
}

fn collect_partitions<T: LogRecord>(
    source: &dyn RecordSource<T>,
    filter: Option<&PartitionKey>,
) -> Result<BTreeMap<PartitionKey, Vec<T>>, CurateError> {
    let mut map: BTreeMap<PartitionKey, PartitionRows<T>> = BTreeMap::new();
    for batch in source.scan() {
        for rec in batch?.records {
            let key = PartitionKey::of(&rec);
            if filter.is_some_and(|f| *f != key) {
                continue;
            }
            map.entry(key).or_default().insert(rec.cleaned());
        }
    }
    Ok(map.into_iter().map(|(k, v)| (k, v.into_sorted())).collect())
}

struct CrashCounter {
    written: usize,
    fail_after: Option<usize>,
}

impl CrashCounter {
    fn record_part(&mut self) -> Result<(), CurateError> {
        self.written += 1;
        if self.fail_after.is_some_and(|n| self.written >= n) {
            return Err(CurateError::SimulatedCrash {
                parts_written: self.written,
            });
        }
        Ok(())
    }
}

/// Removed on drop; held for the duration of one partition write.
struct PartitionLock {
    path: PathBuf,
}

impl PartitionLock {
    fn acquire(root: &Path, key: &PartitionKey) -> Result<Self, CurateError> {
        let locks = root.join(".locks");
        std::fs::create_dir_all(&locks)?;
        let path = locks.join(format!("{}-{}.lock", key.date, key.location));
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(PartitionLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CurateError::PartitionLocked {
                    date: key.date.clone(),
                    location: key.location.clone(),
                })
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for PartitionLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn part_name(index: usize) -> String {
    format!("part-{index:05}.slc")
}

fn write_part_files<T: LogRecord>(
    dir: &Path,
    rows: &[T],
    opts: &StageOptions,
    crash: &mut CrashCounter,
    start_index: usize,
) -> Result<Vec<PartFileEntry>, CurateError> {
    let schema = T::table_schema();
    let mut entries = Vec::new();
    let mut builders = slc::builders_for(&schema);
    let mut index = start_index;
    let flush = |builders: &mut Vec<slc::ColumnBuilder>,
                     index: &mut usize,
                     entries: &mut Vec<PartFileEntry>,
                     crash: &mut CrashCounter|
     -> Result<(), CurateError> {
        let table = slc::finish_builders(std::mem::replace(builders, slc::builders_for(&schema)))?;
        if table.rows() == 0 {
            return Ok(());
        }
        let name = part_name(*index);
        *index += 1;
        let written = slc::write_table(&dir.join(&name), &table, opts.compression_level)?;
        entries.push(PartFileEntry {
            name,
            rows: written.rows,
            byte_len: written.byte_len,
            columns: written.columns,
        });
        crash.record_part()
    };
    for rec in rows {
        rec.append_row(&mut builders);
        let raw: usize = builders.iter().map(|b| b.raw_len()).sum();
        if builders[0].rows() >= opts.part_max_rows || raw as u64 >= opts.target_part_raw_bytes {
            flush(&mut builders, &mut index, &mut entries, crash)?;
        }
    }
    flush(&mut builders, &mut index, &mut entries, crash)?;
    Ok(entries)
}

fn touch(path: &Path) -> std::io::Result<()> {
    std::fs::OpenOptions::new().create(true).truncate(true).write(true).open(path)?;
    Ok(())
}

fn write_manifest(dir: &Path, key: &PartitionKey, files: &[PartFileEntry]) -> Result<(), CurateError> {
    let doc = ManifestFile {
        date: key.date.clone(),
        location: key.location.clone(),
        files: files.to_vec(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&doc).expect("manifest"))?;
    Ok(())
}

fn load_manifest(dir: &Path) -> Option<ManifestFile> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_partition_overwrite<T: LogRecord>(
    root: &Path,
    key: &PartitionKey,
    rows: &[T],
    opts: &StageOptions,
    crash: &mut CrashCounter,
) -> Result<PartitionManifest, CurateError> {
    let _lock = PartitionLock::acquire(root, key)?;
    let live = key.dir_under(root);
    let tmp = root.join(format!(".tmp-{}-{}", key.date, key.location));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    let files = write_part_files(&tmp, rows, opts, crash, 0)?;
    write_manifest(&tmp, key, &files)?;

    std::fs::create_dir_all(live.parent().expect("partition has parent"))?;
    if live.exists() {
        let trash = root.join(format!(".trash-{}-{}", key.date, key.location));
        if trash.exists() {
            std::fs::remove_dir_all(&trash)?;
        }
        std::fs::rename(&live, &trash)?;
        std::fs::rename(&tmp, &live)?;
        std::fs::remove_dir_all(&trash)?;
    } else {
        std::fs::rename(&tmp, &live)?;
    }
    touch(&live.join("_SUCCESS"))?;
    Ok(PartitionManifest {
        key: key.clone(),
        files,
        commit_marker: true,
    })
}

fn append_partition<T: LogRecord>(
    root: &Path,
    key: &PartitionKey,
    rows: &[T],
    opts: &StageOptions,
    crash: &mut CrashCounter,
) -> Result<PartitionManifest, CurateError> {
    let _lock = PartitionLock::acquire(root, key)?;
    let live = key.dir_under(root);
    std::fs::create_dir_all(&live)?;
    let next_index = std::fs::read_dir(&live)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_prefix("part-")?.strip_suffix(".slc")?.parse::<usize>().ok()
        })
        .max()
        .map_or(0, |m| m + 1);
    let files = write_part_files(&live, rows, opts, crash, next_index)?;
    let mut all = load_manifest(&live).map(|m| m.files).unwrap_or_default();
    all.extend(files.clone());
    write_manifest(&live, key, &all)?;
    Ok(PartitionManifest {
        key: key.clone(),
        files,
        commit_marker: false,
    })
}

/// Stages a source into the partitioned store, returning one manifest per
/// partition written. See the module docs for the mode semantics.
pub fn stage_partitions<T: LogRecord>(
    source: &dyn RecordSource<T>,
    store_root: &Path,
    mode: StageMode,
    opts: &StageOptions,
) -> Result<Vec<PartitionManifest>, CurateError> {
    std::fs::create_dir_all(store_root)?;
    let mut crash = CrashCounter {
        written: 0,
        fail_after: opts.fail_after_part_files,
    };
    match mode {
        StageMode::OverwritePartition => {
            let partitions = collect_partitions(source, None)?;
            let mut out = Vec::new();
            for (key, rows) in &partitions {
                out.push(write_partition_overwrite(store_root, key, rows, opts, &mut crash)?);
            }
            Ok(out)
        }
        StageMode::Append => {
            let partitions = collect_partitions(source, None)?;
            let mut out = Vec::new();
            for (key, rows) in &partitions {
                out.push(append_partition(store_root, key, rows, opts, &mut crash)?);
            }
            touch(&store_root.join("_SUCCESS"))?;
            for m in &mut out {
                m.commit_marker = true;
            }
            Ok(out)
        }
        StageMode::PerDataset => {
            // One discovery pass, then one full scan per dataset.
            let mut keys: BTreeSet<PartitionKey> = BTreeSet::new();
            for batch in source.scan() {
                for rec in &batch?.records {
                    keys.insert(PartitionKey::of(rec));
                }
            }
            let mut out = Vec::new();
            for key in keys {
                let partitions = collect_partitions(source, Some(&key))?;
                let rows = partitions.get(&key).map(Vec::as_slice).unwrap_or(&[]);
                out.push(write_partition_overwrite(store_root, &key, rows, opts, &mut crash)?);
            }
            Ok(out)
        }
    }
}

// --- reading ----------------------------------------------------------------

/// Which partitions and columns a scan should touch.
#[derive(Debug, Clone, Default)]
pub struct ReadPredicate {
    /// Inclusive `YYYY-MM-DD` bounds.
    pub date_from: Option<String>,
    pub date_to: Option<String>,
    pub locations: Option<BTreeSet<String>>,
    /// Column projection; `None` reads every column.
    pub columns: Option<Vec<String>>,
}

impl ReadPredicate {
    fn admits_date(&self, date: &str) -> bool {
        self.date_from.as_deref().is_none_or(|d| date >= d)
            && self.date_to.as_deref().is_none_or(|d| date <= d)
    }

    fn admits_location(&self, location: &str) -> bool {
        self.locations.as_ref().is_none_or(|set| set.contains(location))
    }
}

/// What a scan actually touched; partition pruning is verified against it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanAudit {
    pub partition_dirs_opened: Vec<String>,
    pub files_opened: u64,
    pub column_blocks_read: u64,
}

struct PendingPartition {
    key: PartitionKey,
    dir: PathBuf,
}

/// Lazy scan over committed partitions matching a predicate; yields one
/// table per part file, decompressing only projected columns.
pub struct TableScan {
    queue: VecDeque<PendingPartition>,
    current: Option<(PartitionKey, VecDeque<PathBuf>, BTreeMap<String, BTreeMap<String, String>>)>,
    projection: Option<Vec<String>>,
    columns_per_file: u64,
    audit: ScanAudit,
}

pub fn scan_tables(store_root: &Path, predicate: &ReadPredicate) -> Result<TableScan, CurateError> {
    if !store_root.is_dir() {
        return Err(CurateError::InvalidStore(format!(
            "'{}' is not a directory",
            store_root.display()
        )));
    }
    let dataset_committed = store_root.join("_SUCCESS").exists();
    let mut queue = Vec::new();
    for entry in std::fs::read_dir(store_root)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
        let Some(date) = name.strip_prefix("date=") else { continue };
        if !predicate.admits_date(date) {
            continue;
        }
        for loc_entry in std::fs::read_dir(&path)? {
            let dir = loc_entry?.path();
            let loc_name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
            let Some(location) = loc_name.strip_prefix("location=") else { continue };
            if !predicate.admits_location(location) {
                continue;
            }
            // Commit check is a metadata probe, not a directory open.
            if !dataset_committed && !dir.join("_SUCCESS").exists() {
                continue;
            }
            queue.push(PendingPartition {
                key: PartitionKey {
                    date: date.to_string(),
                    location: location.to_string(),
                },
                dir,
            });
        }
    }
    queue.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(TableScan {
        queue: queue.into(),
        current: None,
        projection: predicate.columns.clone(),
        columns_per_file: 0,
        audit: ScanAudit::default(),
    })
}

impl TableScan {
    pub fn audit(&self) -> &ScanAudit {
        &self.audit
    }

    fn open_next_partition(&mut self) -> Result<bool, CurateError> {
        let Some(pending) = self.queue.pop_front() else {
            return Ok(false);
        };
        let mut files: Vec<PathBuf> = std::fs::read_dir(&pending.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("part-") && n.ends_with(".slc"))
            })
            .collect();
        files.sort();
        let checksums = load_manifest(&pending.dir)
            .map(|m| {
                m.files
                    .into_iter()
                    .map(|f| {
                        let cols = f
                            .columns
                            .into_iter()
                            .map(|c| (c.name.clone(), c.md5_hex))
                            .collect::<BTreeMap<_, _>>();
                        (f.name, cols)
                    })
                    .collect::<BTreeMap<_, _>>()
            })
            .unwrap_or_default();
        self.audit.partition_dirs_opened.push(format!(
            "date={}/location={}",
            pending.key.date, pending.key.location
        ));
        self.current = Some((pending.key, files.into(), checksums));
        Ok(true)
    }
}

impl Iterator for TableScan {
    type Item = Result<(PartitionKey, PathBuf, Table), CurateError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some((key, files, checksums)) = self.current.as_mut() {
                if let Some(path) = files.pop_front() {
                    let key = key.clone();
                    let file_name = path
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    let sums = checksums.get(&file_name);
                    let table = slc::read_table(&path, self.projection.as_deref(), sums)
                        .map_err(|e| match e {
                            SlcError::ChecksumMismatch { column } => CurateError::ColumnChecksum {
                                file: file_name.clone(),
                                column,
                            },
                            other => CurateError::Slc(other),
                        });
                    return Some(table.map(|t| {
                        self.audit.files_opened += 1;
                        self.audit.column_blocks_read += self.columns_per_file.max(
                            self.projection
                                .as_ref()
                                .map_or(t.columns().len() as u64, |p| p.len() as u64),
                        );
                        (key, path, t)
                    }));
                }
                self.current = None;
            }
            match self.open_next_partition() {
                Ok(true) => continue,
                Ok(false) => return None,
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

/// Reads committed partitions back as typed record batches (full schema;
/// the predicate's projection is ignored).
pub fn read_partitions<T: LogRecord>(
    store_root: &Path,
    predicate: &ReadPredicate,
) -> Result<impl Iterator<Item = Result<RecordBatch<T>, CurateError>>, CurateError> {
    let mut predicate = predicate.clone();
    predicate.columns = None;
    let scan = scan_tables(store_root, &predicate)?;
    Ok(scan.map(|item| {
        let (_, path, table) = item?;
        Ok(RecordBatch {
            source: path.display().to_string(),
            records: T::from_table(&table)?,
            rejected: Vec::new(),
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genload::{self, TimestampStyle, WorkloadConfig};
    use crate::logmodel::AccessLogRecord;

    fn trace_config(minutes: u32, rate: f64, seed: u64) -> WorkloadConfig {
        WorkloadConfig {
            duration_minutes: minutes,
            rate_per_accesser: rate,
            seed,
            ..WorkloadConfig::default()
        }
    }

    fn batches_of(cfg: &WorkloadConfig) -> Vec<RecordBatch<AccessLogRecord>> {
        let records: Vec<_> = genload::generate_access_trace(cfg).unwrap().collect();
        vec![RecordBatch {
            source: "test".into(),
            records,
            rejected: Vec::new(),
        }]
    }

    #[test]
    fn clean_trace_validates_with_no_flags() {
        let batches = batches_of(&trace_config(10, 20.0, 7));
        let report = validate_batch(&batches, None);
        assert_eq!(report.rows_in, report.rows_out);
        assert!(report.rows_rejected_by_reason.is_empty());
        assert!(report.time_coverage.is_empty());
        for pair in report.field_stats.values() {
            assert!(!pair.drift_exceeded);
            assert_eq!(pair.before, pair.after);
        }
    }

    #[test]
    fn deleted_minute_is_flagged_as_exact_gap() {
        let cfg = trace_config(10, 20.0, 7);
        let gap_from = cfg.start.plus_millis(4 * 60_000);
        let gap_to = cfg.start.plus_millis(5 * 60_000);
        let mut batches = batches_of(&cfg);
        batches[0]
            .records
            .retain(|r| !(r.start >= gap_from && r.start < gap_to));
        let report = validate_batch(&batches, None);
        let gaps: Vec<_> = report
            .time_coverage
            .iter()
            .filter(|f| f.kind == CoverageKind::Gap)
            .collect();
        assert_eq!(gaps.len(), 1);
        assert_eq!(gaps[0].from, gap_from);
        assert_eq!(gaps[0].to, gap_to);
    }

    #[test]
    fn doubled_input_counts_duplicates_and_flags_span() {
        let cfg = trace_config(5, 20.0, 9);
        let mut batches = batches_of(&cfg);
        let copy = batches[0].clone();
        let n = copy.records.len() as u64;
        batches.push(copy);
        let report = validate_batch(&batches, None);
        assert_eq!(report.duplicates(), n);
        assert_eq!(report.rows_out, n);
        assert!(report
            .time_coverage
            .iter()
            .any(|f| f.kind == CoverageKind::Duplicate && f.record_count == n));
    }

    #[test]
    fn reference_drift_is_flagged() {
        let batches = batches_of(&trace_config(5, 20.0, 11));
        let clean = validate_batch(&batches, None);
        let mut reference: BTreeMap<String, FieldStat> = clean
            .field_stats
            .iter()
            .map(|(k, v)| (k.clone(), v.after))
            .collect();
        reference.get_mut("latency_total_ms").unwrap().mean *= 1.5;
        let report = validate_batch(&batches, Some(&reference));
        assert!(report.field_stats["latency_total_ms"].drift_exceeded);
        assert!(!report.field_stats["latency_auth_ms"].drift_exceeded);
    }

    fn stage_to(
        dir: &Path,
        cfg: &WorkloadConfig,
        mode: StageMode,
        opts: &StageOptions,
    ) -> Result<Vec<PartitionManifest>, CurateError> {
        stage_partitions(&batches_of(cfg), dir, mode, opts)
    }

    #[test]
    fn one_directory_per_day_location() {
        // Two locations over a day boundary: 2 days x 2 locations.
        let mut cfg = trace_config(10, 30.0, 3);
        cfg.start = cfg.start.plus_millis(86_400_000 - 5 * 60_000);
        let dir = tempfile::tempdir().unwrap();
        let manifests =
            stage_to(dir.path(), &cfg, StageMode::OverwritePartition, &StageOptions::default())
                .unwrap();
        assert_eq!(manifests.len(), 4);
        assert!(manifests.iter().all(|m| m.commit_marker));
        let mut dirs = 0;
        for date in std::fs::read_dir(dir.path()).unwrap() {
            let date = date.unwrap().path();
            if !date.file_name().unwrap().to_str().unwrap().starts_with("date=") {
                continue;
            }
            dirs += std::fs::read_dir(date).unwrap().count();
        }
        assert_eq!(dirs, 4);
    }

    #[test]
    fn round_trip_preserves_record_multiset() {
        let cfg = trace_config(8, 25.0, 5);
        let dir = tempfile::tempdir().unwrap();
        stage_to(dir.path(), &cfg, StageMode::OverwritePartition, &StageOptions::default())
            .unwrap();
        let mut read: Vec<AccessLogRecord> =
            read_partitions(dir.path(), &ReadPredicate::default())
                .unwrap()
                .flat_map(|b| b.unwrap().records)
                .collect();
        let mut original: Vec<AccessLogRecord> =
            genload::generate_access_trace(&cfg).unwrap().collect();
        read.sort_by_key(|r| r.request_id.clone());
        original.sort_by_key(|r| r.request_id.clone());
        assert_eq!(read, original);
    }

    fn dir_snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).unwrap().display().to_string();
                    out.insert(rel, std::fs::read(&path).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn overwrite_staging_is_byte_identical_on_rerun() {
        let cfg = trace_config(6, 25.0, 13);
        let dir = tempfile::tempdir().unwrap();
        stage_to(dir.path(), &cfg, StageMode::OverwritePartition, &StageOptions::default())
            .unwrap();
        let first = dir_snapshot(dir.path());
        stage_to(dir.path(), &cfg, StageMode::OverwritePartition, &StageOptions::default())
            .unwrap();
        assert_eq!(dir_snapshot(dir.path()), first);
    }

    fn read_ids(root: &Path) -> Vec<String> {
        let mut ids: Vec<String> = read_partitions::<AccessLogRecord>(root, &ReadPredicate::default())
            .unwrap()
            .flat_map(|b| b.unwrap().records.into_iter().map(|r| r.request_id))
            .collect();
        ids.sort();
        ids
    }

    #[test]
    fn crash_then_retry_overwrite_equals_clean_run() {
        let cfg = trace_config(6, 40.0, 17);
        let opts = StageOptions {
            part_max_rows: 64,
            ..StageOptions::default()
        };
        let clean_dir = tempfile::tempdir().unwrap();
        stage_to(clean_dir.path(), &cfg, StageMode::OverwritePartition, &opts).unwrap();

        let crash_dir = tempfile::tempdir().unwrap();
        let crashing = StageOptions {
            fail_after_part_files: Some(1),
            ..opts.clone()
        };
        let err =
            stage_to(crash_dir.path(), &cfg, StageMode::OverwritePartition, &crashing).unwrap_err();
        assert!(matches!(err, CurateError::SimulatedCrash { .. }));
        // Nothing committed yet.
        assert!(read_ids(crash_dir.path()).is_empty());
        stage_to(crash_dir.path(), &cfg, StageMode::OverwritePartition, &opts).unwrap();
        assert_eq!(read_ids(crash_dir.path()), read_ids(clean_dir.path()));
    }

    #[test]
    fn crash_then_retry_append_duplicates_rows() {
        let cfg = trace_config(6, 40.0, 17);
        let opts = StageOptions {
            part_max_rows: 64,
            ..StageOptions::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let crashing = StageOptions {
            fail_after_part_files: Some(1),
            ..opts.clone()
        };
        let err = stage_to(dir.path(), &cfg, StageMode::Append, &crashing).unwrap_err();
        assert!(matches!(err, CurateError::SimulatedCrash { .. }));
        stage_to(dir.path(), &cfg, StageMode::Append, &opts).unwrap();
        let ids = read_ids(dir.path());
        let distinct: BTreeSet<_> = ids.iter().cloned().collect();
        assert!(ids.len() > distinct.len(), "append retry must duplicate rows");
    }

    #[test]
    fn per_dataset_writes_equal_overwrite_writes() {
        let cfg = trace_config(6, 25.0, 19);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        stage_to(a.path(), &cfg, StageMode::OverwritePartition, &StageOptions::default()).unwrap();
        stage_to(b.path(), &cfg, StageMode::PerDataset, &StageOptions::default()).unwrap();
        assert_eq!(read_ids(a.path()), read_ids(b.path()));
    }

    #[test]
    fn pruning_opens_only_matching_partition() {
        let cfg = trace_config(6, 25.0, 23); // two locations, one date
        let dir = tempfile::tempdir().unwrap();
        stage_to(dir.path(), &cfg, StageMode::OverwritePartition, &StageOptions::default())
            .unwrap();
        let predicate = ReadPredicate {
            date_from: Some("2026-03-01".into()),
            date_to: Some("2026-03-01".into()),
            locations: Some(BTreeSet::from(["dal".to_string()])),
            columns: None,
        };
        let mut scan = scan_tables(dir.path(), &predicate).unwrap();
        for item in &mut scan {
            item.unwrap();
        }
        assert_eq!(scan.audit().partition_dirs_opened, vec!["date=2026-03-01/location=dal"]);
    }

    #[test]
    fn projection_reads_only_projected_blocks() {
        let cfg = trace_config(4, 25.0, 29);
        let dir = tempfile::tempdir().unwrap();
        stage_to(dir.path(), &cfg, StageMode::OverwritePartition, &StageOptions::default())
            .unwrap();
        let predicate = ReadPredicate {
            columns: Some(vec!["start".into(), "latency_total_ms".into()]),
            ..ReadPredicate::default()
        };
        let mut scan = scan_tables(dir.path(), &predicate).unwrap();
        let mut files = 0;
        for item in &mut scan {
            let (_, _, table) = item.unwrap();
            assert_eq!(table.columns().len(), 2);
            files += 1;
        }
        assert_eq!(scan.audit().column_blocks_read, 2 * files);
        // Full scan with a predicate nothing prunes touches every partition.
        let mut full = scan_tables(dir.path(), &ReadPredicate::default()).unwrap();
        for item in &mut full {
            item.unwrap();
        }
        assert_eq!(full.audit().partition_dirs_opened.len(), 2);
    }

    #[test]
    fn uncommitted_partitions_are_skipped() {
        let cfg = trace_config(4, 25.0, 31);
        let dir = tempfile::tempdir().unwrap();
        let manifests =
            stage_to(dir.path(), &cfg, StageMode::OverwritePartition, &StageOptions::default())
                .unwrap();
        let victim = manifests[0].key.dir_under(dir.path()).join("_SUCCESS");
        std::fs::remove_file(victim).unwrap();
        let mut scan = scan_tables(dir.path(), &ReadPredicate::default()).unwrap();
        for item in &mut scan {
            item.unwrap();
        }
        assert_eq!(scan.audit().partition_dirs_opened.len(), 1);
    }

    #[test]
    fn corrupted_column_names_file_and_column() {
        let cfg = trace_config(4, 25.0, 37);
        let dir = tempfile::tempdir().unwrap();
        let manifests =
            stage_to(dir.path(), &cfg, StageMode::OverwritePartition, &StageOptions::default())
                .unwrap();
        let part = manifests[0].key.dir_under(dir.path()).join(&manifests[0].files[0].name);
        let mut bytes = std::fs::read(&part).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&part, bytes).unwrap();
        let mut scan = scan_tables(dir.path(), &ReadPredicate::default()).unwrap();
        let err = scan
            .by_ref()
            .find_map(|r| r.err())
            .expect("corruption must surface");
        match err {
            CurateError::ColumnChecksum { file, column } => {
                assert_eq!(file, manifests[0].files[0].name);
                assert!(!column.is_empty());
            }
            other => panic!("expected checksum error, got {other}"),
        }
    }

    #[test]
    fn locked_partition_rejects_second_writer() {
        let cfg = trace_config(2, 10.0, 41);
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join(".locks")).unwrap();
        std::fs::write(dir.path().join(".locks/2026-03-01-dal.lock"), b"").unwrap();
        let err = stage_to(dir.path(), &cfg, StageMode::OverwritePartition, &StageOptions::default())
            .unwrap_err();
        assert!(matches!(err, CurateError::PartitionLocked { .. }));
    }

    #[test]
    fn generated_traces_validate_with_zero_rejections() {
        let cfg = trace_config(10, 30.0, 43);
        let dir = tempfile::tempdir().unwrap();
        let paths = genload::write_access_jsonl(
            genload::generate_access_trace(&cfg).unwrap(),
            dir.path(),
            TimestampStyle::Utc,
        )
        .unwrap();
        let mut iter = crate::ingest::ingest_batch::<AccessLogRecord>(paths, 10_000);
        let batches: Vec<_> = iter.by_ref().map(Result::unwrap).collect();
        let report = validate_batch(&batches, None);
        assert_eq!(report.rows_in, report.rows_out);
        assert!(report.rows_rejected_by_reason.is_empty());
    }
}
