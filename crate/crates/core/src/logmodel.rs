//! Canonical domain types for access and connectivity logs, JSON-lines
//! parsing and UTC timestamp normalization.
//!
//! Parsing is schema-on-read tolerant: unknown fields are ignored, absent
//! optionals become explicit nulls, and heterogeneous producers are
//! accommodated by a small coercion table — numeric strings parse as
//! numbers, `"true"`/`"false"` and `0`/`1` coerce to booleans, and unknown
//! operation/role names map to `Other` instead of rejecting the line.

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::slc::{self, ColumnBuilder, ColumnType, Field, Table};

/// Milliseconds since the Unix epoch, always UTC, never negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UtcInstant(i64);

impl UtcInstant {
    pub fn from_epoch_millis(ms: i64) -> Result<Self, RejectReason> {
        if ms < 0 {
            return Err(RejectReason::BadTimestamp);
        }
        Ok(UtcInstant(ms))
    }

    pub fn epoch_millis(self) -> i64 {
        self.0
    }

    /// Largest instant at `granularity_ms` boundaries not after `self`.
    pub fn floor_to(self, granularity_ms: i64) -> Self {
        UtcInstant(self.0 - self.0.rem_euclid(granularity_ms))
    }

    pub fn floor_to_minute(self) -> Self {
        self.floor_to(60_000)
    }

    pub fn is_minute_aligned(self) -> bool {
        self.0 % 60_000 == 0
    }

    pub fn plus_millis(self, ms: i64) -> Self {
        UtcInstant(self.0 + ms)
    }

    /// UTC calendar date as `YYYY-MM-DD`.
    pub fn date_string(self) -> String {
        self.to_datetime().format("%Y-%m-%d").to_string()
    }

    fn to_datetime(self) -> DateTime<Utc> {
        Utc.timestamp_millis_opt(self.0).single().expect("valid utc millis")
    }
}

impl std::fmt::Display for UtcInstant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_datetime().to_rfc3339_opts(SecondsFormat::Millis, true))
    }
}

impl Serialize for UtcInstant {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for UtcInstant {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(deserializer)?;
        instant_from_value(&v).map_err(|r| D::Error::custom(format!("bad timestamp: {r}")))
    }
}

/// Why a line was rejected instead of parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    MalformedJson,
    MissingRequiredField,
    BadTimestamp,
    OutOfRange,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RejectReason::MalformedJson => "MALFORMED_JSON",
            RejectReason::MissingRequiredField => "MISSING_REQUIRED_FIELD",
            RejectReason::BadTimestamp => "BAD_TIMESTAMP",
            RejectReason::OutOfRange => "OUT_OF_RANGE",
        };
        f.write_str(s)
    }
}

/// Result of parsing one line: exactly one of a record or a reject reason.
#[derive(Debug, Clone, PartialEq)]
pub enum ParseOutcome<T> {
    Record(T),
    Rejected(RejectReason),
}

impl<T> ParseOutcome<T> {
    pub fn record(self) -> Option<T> {
        match self {
            ParseOutcome::Record(r) => Some(r),
            ParseOutcome::Rejected(_) => None,
        }
    }

    pub fn rejected_reason(&self) -> Option<RejectReason> {
        match self {
            ParseOutcome::Record(_) => None,
            ParseOutcome::Rejected(r) => Some(*r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpType {
    Get,
    Put,
    Delete,
    Head,
    List,
    Other,
}

impl OpType {
    pub const ALL: [OpType; 6] = [
        OpType::Get,
        OpType::Put,
        OpType::Delete,
        OpType::Head,
        OpType::List,
        OpType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpType::Get => "GET",
            OpType::Put => "PUT",
            OpType::Delete => "DELETE",
            OpType::Head => "HEAD",
            OpType::List => "LIST",
            OpType::Other => "OTHER",
        }
    }

    /// Unknown names map to `Other`; the log schema is dynamic.
    pub fn from_wire(s: &str) -> Self {
        match s.to_ascii_uppercase().as_str() {
            "GET" => OpType::Get,
            "PUT" => OpType::Put,
            "DELETE" => OpType::Delete,
            "HEAD" => OpType::Head,
            "LIST" => OpType::List,
            _ => OpType::Other,
        }
    }
}

impl std::fmt::Display for OpType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for OpType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for OpType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(OpType::from_wire(&s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Accesser,
    Slicestor,
    Other,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Accesser => "ACCESSER",
            Role::Slicestor => "SLICESTOR",
            Role::Other => "OTHER",
        }
    }

    pub fn from_wire(s: &str) -> Self {
        match s.to_ascii_uppercase().as_str() {
            "ACCESSER" => Role::Accesser,
            "SLICESTOR" => Role::Slicestor,
            _ => Role::Other,
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Role {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Role {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(Role::from_wire(&s))
    }
}

/// One storage operation as observed on a front-end node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccessLogRecord {
    pub request_id: String,
    pub op_type: OpType,
    pub bucket: String,
    pub object: Option<String>,
    pub http_status: u16,
    pub start: UtcInstant,
    pub end: UtcInstant,
    pub latency_total_ms: f64,
    pub latency_client_wait_ms: Option<f64>,
    pub latency_backend_wait_ms: Option<f64>,
    pub latency_auth_ms: Option<f64>,
    pub bytes: Option<u64>,
    pub accesser_id: String,
    pub location: String,
    pub account_id: Option<String>,
}

/// One per-minute reachability observation between two servers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConnectivityRecord {
    pub ts: UtcInstant,
    pub source_id: String,
    pub target_id: String,
    pub source_site: String,
    pub target_site: String,
    pub source_role: Role,
    pub target_role: Role,
    pub connected: bool,
    pub rtt_ms: Option<f64>,
}

/// Parses an ISO-8601 timestamp with an explicit offset (`Z` or numeric)
/// or an epoch-milliseconds integer. Zone-less text is rejected — the
/// producer's local zone is never guessed.
pub fn normalize_timestamp(raw: &str) -> Result<UtcInstant, RejectReason> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Err(RejectReason::BadTimestamp);
    }
    if raw.bytes().all(|b| b.is_ascii_digit())
        || (raw.starts_with('-') && raw.len() > 1 && raw[1..].bytes().all(|b| b.is_ascii_digit()))
    {
        let ms: i64 = raw.parse().map_err(|_| RejectReason::BadTimestamp)?;
        return UtcInstant::from_epoch_millis(ms);
    }
    let dt = DateTime::parse_from_rfc3339(raw).map_err(|_| RejectReason::BadTimestamp)?;
    UtcInstant::from_epoch_millis(dt.with_timezone(&Utc).timestamp_millis())
}

fn instant_from_value(v: &Value) -> Result<UtcInstant, RejectReason> {
    match v {
        Value::String(s) => normalize_timestamp(s),
        Value::Number(n) => {
            let ms = n.as_i64().ok_or(RejectReason::BadTimestamp)?;
            UtcInstant::from_epoch_millis(ms)
        }
        _ => Err(RejectReason::BadTimestamp),
    }
}

// --- coercion table -------------------------------------------------------

fn coerce_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn coerce_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn coerce_u64(v: &Value) -> Option<u64> {
    match v {
        Value::Number(n) => n
            .as_u64()
            .or_else(|| n.as_f64().filter(|f| *f >= 0.0 && f.fract() == 0.0).map(|f| f as u64)),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn coerce_bool(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => {
            if s.eq_ignore_ascii_case("true") {
                Some(true)
            } else if s.eq_ignore_ascii_case("false") {
                Some(false)
            } else {
                None
            }
        }
        Value::Number(n) => match n.as_i64() {
            Some(0) => Some(false),
            Some(1) => Some(true),
            _ => None,
        },
        _ => None,
    }
}

fn present<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key).filter(|v| !v.is_null())
}

macro_rules! try_outcome {
    ($expr:expr) => {
        match $expr {
            Ok(v) => v,
            Err(reason) => return ParseOutcome::Rejected(reason),
        }
    };
}

fn required_string(
    obj: &serde_json::Map<String, Value>,
    key: &str,
) -> Result<String, RejectReason> {
    present(obj, key)
        .ok_or(RejectReason::MissingRequiredField)
        .and_then(|v| coerce_string(v).ok_or(RejectReason::MissingRequiredField))
}

fn required_instant(
    obj: &serde_json::Map<String, Value>,
    key: &str,
) -> Result<UtcInstant, RejectReason> {
    let v = present(obj, key).ok_or(RejectReason::MissingRequiredField)?;
    instant_from_value(v)
}

fn optional_f64(
    obj: &serde_json::Map<String, Value>,
    key: &str,
) -> Result<Option<f64>, RejectReason> {
    match present(obj, key) {
        None => Ok(None),
        Some(v) => coerce_f64(v).map(Some).ok_or(RejectReason::OutOfRange),
    }
}

fn non_negative(v: Option<f64>) -> Result<Option<f64>, RejectReason> {
    match v {
        Some(x) if !(x >= 0.0) || !x.is_finite() => Err(RejectReason::OutOfRange),
        other => Ok(other),
    }
}

/// Parses one access-log line. Never aborts: malformed input comes back
/// as a rejection outcome with a reason.
pub fn parse_access_record(json_line: &str) -> ParseOutcome<AccessLogRecord> {
    let value: Value = match serde_json::from_str(json_line) {
        Ok(v) => v,
        Err(_) => return ParseOutcome::Rejected(RejectReason::MalformedJson),
    };
    let Some(obj) = value.as_object() else {
        return ParseOutcome::Rejected(RejectReason::MalformedJson);
    };

    let request_id = try_outcome!(required_string(obj, "request_id"));
    let op_type = OpType::from_wire(&try_outcome!(required_string(obj, "op_type")));
    let accesser_id = try_outcome!(required_string(obj, "accesser_id"));
    let location = try_outcome!(required_string(obj, "location"));

    let status_value = match present(obj, "http_status") {
        Some(v) => v,
        None => return ParseOutcome::Rejected(RejectReason::MissingRequiredField),
    };
    let http_status = match coerce_u64(status_value) {
        Some(s) if (100..=599).contains(&s) => s as u16,
        _ => return ParseOutcome::Rejected(RejectReason::OutOfRange),
    };

    let start = try_outcome!(required_instant(obj, "start"));
    let end = try_outcome!(required_instant(obj, "end"));
    if end < start {
        return ParseOutcome::Rejected(RejectReason::OutOfRange);
    }

    let latency_total_ms = match present(obj, "latency_total_ms") {
        Some(v) => match coerce_f64(v) {
            Some(x) if x >= 0.0 && x.is_finite() => x,
            _ => return ParseOutcome::Rejected(RejectReason::OutOfRange),
        },
        // Absent total latency is filled from the operation envelope.
        None => (end.epoch_millis() - start.epoch_millis()) as f64,
    };
    let latency_client_wait_ms =
        try_outcome!(non_negative(try_outcome!(optional_f64(obj, "latency_client_wait_ms"))));
    let latency_backend_wait_ms =
        try_outcome!(non_negative(try_outcome!(optional_f64(obj, "latency_backend_wait_ms"))));
    let latency_auth_ms =
        try_outcome!(non_negative(try_outcome!(optional_f64(obj, "latency_auth_ms"))));
    for sub in [latency_client_wait_ms, latency_backend_wait_ms, latency_auth_ms]
        .into_iter()
        .flatten()
    {
        if sub > latency_total_ms {
            return ParseOutcome::Rejected(RejectReason::OutOfRange);
        }
    }

    let bytes = match present(obj, "bytes") {
        None => None,
        Some(v) => match coerce_u64(v) {
            Some(b) => Some(b),
            None => return ParseOutcome::Rejected(RejectReason::OutOfRange),
        },
    };

    ParseOutcome::Record(AccessLogRecord {
        request_id,
        op_type,
        bucket: present(obj, "bucket").and_then(coerce_string).unwrap_or_default(),
        object: present(obj, "object").and_then(coerce_string),
        http_status,
        start,
        end,
        latency_total_ms,
        latency_client_wait_ms,
        latency_backend_wait_ms,
        latency_auth_ms,
        bytes,
        accesser_id,
        location,
        account_id: present(obj, "account_id").and_then(coerce_string),
    })
}

/// Parses one connectivity-log line; contract mirrors
/// [`parse_access_record`].
pub fn parse_connectivity_record(json_line: &str) -> ParseOutcome<ConnectivityRecord> {
    let value: Value = match serde_json::from_str(json_line) {
        Ok(v) => v,
        Err(_) => return ParseOutcome::Rejected(RejectReason::MalformedJson),
    };
    let Some(obj) = value.as_object() else {
        return ParseOutcome::Rejected(RejectReason::MalformedJson);
    };

    let ts = try_outcome!(required_instant(obj, "ts"));
    let source_id = try_outcome!(required_string(obj, "source_id"));
    let target_id = try_outcome!(required_string(obj, "target_id"));
    if source_id == target_id {
        return ParseOutcome::Rejected(RejectReason::OutOfRange);
    }
    let source_site = try_outcome!(required_string(obj, "source_site"));
    let target_site = try_outcome!(required_string(obj, "target_site"));
    let connected = match present(obj, "connected") {
        Some(v) => match coerce_bool(v) {
            Some(b) => b,
            None => return ParseOutcome::Rejected(RejectReason::OutOfRange),
        },
        None => return ParseOutcome::Rejected(RejectReason::MissingRequiredField),
    };
    let rtt_ms = try_outcome!(non_negative(try_outcome!(optional_f64(obj, "rtt_ms"))));

    ParseOutcome::Record(ConnectivityRecord {
        ts,
        source_id,
        target_id,
        source_site,
        target_site,
        source_role: present(obj, "source_role")
            .and_then(coerce_string)
            .map_or(Role::Other, |s| Role::from_wire(&s)),
        target_role: present(obj, "target_role")
            .and_then(coerce_string)
            .map_or(Role::Other, |s| Role::from_wire(&s)),
        connected,
        rtt_ms,
    })
}

/// Which log a record (or batch) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogKind {
    Access,
    Connectivity,
}

impl std::fmt::Display for LogKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LogKind::Access => "access",
            LogKind::Connectivity => "connectivity",
        })
    }
}

/// Uniform handle over the two record kinds used by ingestion and staging.
pub trait LogRecord: Clone + PartialEq + Serialize + Sized + Send + 'static {
    const KIND: LogKind;

    fn parse_line(line: &str) -> ParseOutcome<Self>;

    /// Identity for idempotent staging (last write wins within a run).
    fn dedup_key(&self) -> String;

    /// Timestamp the record is partitioned and windowed by.
    fn event_time(&self) -> UtcInstant;

    /// Site/datacenter code the record is partitioned by.
    fn location(&self) -> &str;

    /// Canonical form: representation-only changes, values preserved.
    fn cleaned(self) -> Self;

    /// Numeric fields whose mean/median are tracked by validation.
    fn numeric_fields(&self) -> Vec<(&'static str, Option<f64>)>;

    fn table_schema() -> Vec<Field>;

    fn append_row(&self, builders: &mut [ColumnBuilder]);

    fn from_table_row(table: &Table, row: usize) -> Result<Self, slc::SlcError>;

    fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    fn to_table(records: &[Self]) -> Table {
        let mut builders = slc::builders_for(&Self::table_schema());
        for r in records {
            r.append_row(&mut builders);
        }
        slc::finish_builders(builders).expect("uniform builders")
    }

    fn from_table(table: &Table) -> Result<Vec<Self>, slc::SlcError> {
        (0..table.rows()).map(|i| Self::from_table_row(table, i)).collect()
    }
}

fn missing(col: &str) -> slc::SlcError {
    slc::SlcError::Corrupt(format!("null value in required column '{col}'"))
}

impl LogRecord for AccessLogRecord {
    const KIND: LogKind = LogKind::Access;

    fn parse_line(line: &str) -> ParseOutcome<Self> {
        parse_access_record(line)
    }

    fn dedup_key(&self) -> String {
        self.request_id.clone()
    }

    fn event_time(&self) -> UtcInstant {
        self.start
    }

    fn location(&self) -> &str {
        &self.location
    }

    fn cleaned(self) -> Self {
        // Parsing already normalized timestamps and numerics; nothing to do.
        self
    }

    fn numeric_fields(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("latency_total_ms", Some(self.latency_total_ms)),
            ("latency_client_wait_ms", self.latency_client_wait_ms),
            ("latency_backend_wait_ms", self.latency_backend_wait_ms),
            ("latency_auth_ms", self.latency_auth_ms),
            ("bytes", self.bytes.map(|b| b as f64)),
        ]
    }

    fn table_schema() -> Vec<Field> {
        vec![
            Field::new("request_id", ColumnType::Str),
            Field::new("op_type", ColumnType::Str),
            Field::new("bucket", ColumnType::Str),
            Field::new("object", ColumnType::Str),
            Field::new("http_status", ColumnType::I64),
            Field::new("start", ColumnType::I64),
            Field::new("end", ColumnType::I64),
            Field::new("latency_total_ms", ColumnType::F64),
            Field::new("latency_client_wait_ms", ColumnType::F64),
            Field::new("latency_backend_wait_ms", ColumnType::F64),
            Field::new("latency_auth_ms", ColumnType::F64),
            Field::new("bytes", ColumnType::I64),
            Field::new("accesser_id", ColumnType::Str),
            Field::new("location", ColumnType::Str),
            Field::new("account_id", ColumnType::Str),
        ]
    }

    fn append_row(&self, b: &mut [ColumnBuilder]) {
        b[0].push_str(Some(&self.request_id));
        b[1].push_str(Some(self.op_type.as_str()));
        b[2].push_str(Some(&self.bucket));
        b[3].push_str(self.object.as_deref());
        b[4].push_i64(Some(i64::from(self.http_status)));
        b[5].push_i64(Some(self.start.epoch_millis()));
        b[6].push_i64(Some(self.end.epoch_millis()));
        b[7].push_f64(Some(self.latency_total_ms));
        b[8].push_f64(self.latency_client_wait_ms);
        b[9].push_f64(self.latency_backend_wait_ms);
        b[10].push_f64(self.latency_auth_ms);
        b[11].push_i64(self.bytes.map(|v| v as i64));
        b[12].push_str(Some(&self.accesser_id));
        b[13].push_str(Some(&self.location));
        b[14].push_str(self.account_id.as_deref());
    }

    fn from_table_row(t: &Table, row: usize) -> Result<Self, slc::SlcError> {
        let col = |name: &str| t.require(name);
        Ok(AccessLogRecord {
            request_id: col("request_id")?
                .str_at(row)
                .ok_or_else(|| missing("request_id"))?
                .to_string(),
            op_type: OpType::from_wire(
                col("op_type")?.str_at(row).ok_or_else(|| missing("op_type"))?,
            ),
            bucket: col("bucket")?.str_at(row).unwrap_or_default().to_string(),
            object: col("object")?.str_at(row).map(str::to_string),
            http_status: col("http_status")?
                .i64_at(row)
                .ok_or_else(|| missing("http_status"))? as u16,
            start: UtcInstant::from_epoch_millis(
                col("start")?.i64_at(row).ok_or_else(|| missing("start"))?,
            )
            .map_err(|_| missing("start"))?,
            end: UtcInstant::from_epoch_millis(
                col("end")?.i64_at(row).ok_or_else(|| missing("end"))?,
            )
            .map_err(|_| missing("end"))?,
            latency_total_ms: col("latency_total_ms")?
                .f64_at(row)
                .ok_or_else(|| missing("latency_total_ms"))?,
            latency_client_wait_ms: col("latency_client_wait_ms")?.f64_at(row),
            latency_backend_wait_ms: col("latency_backend_wait_ms")?.f64_at(row),
            latency_auth_ms: col("latency_auth_ms")?.f64_at(row),
            bytes: col("bytes")?.i64_at(row).map(|v| v as u64),
            accesser_id: col("accesser_id")?
                .str_at(row)
                .ok_or_else(|| missing("accesser_id"))?
                .to_string(),
            location: col("location")?
                .str_at(row)
                .ok_or_else(|| missing("location"))?
                .to_string(),
            account_id: col("account_id")?.str_at(row).map(str::to_string),
        })
    }
}

impl LogRecord for ConnectivityRecord {
    const KIND: LogKind = LogKind::Connectivity;

    fn parse_line(line: &str) -> ParseOutcome<Self> {
        parse_connectivity_record(line)
    }

    fn dedup_key(&self) -> String {
        format!("{}|{}|{}", self.ts.epoch_millis(), self.source_id, self.target_id)
    }

    fn event_time(&self) -> UtcInstant {
        self.ts
    }

    fn location(&self) -> &str {
        &self.source_site
    }

    fn cleaned(mut self) -> Self {
        self.ts = self.ts.floor_to_minute();
        self
    }

    fn numeric_fields(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![("rtt_ms", self.rtt_ms)]
    }

    fn table_schema() -> Vec<Field> {
        vec![
            Field::new("ts", ColumnType::I64),
            Field::new("source_id", ColumnType::Str),
            Field::new("target_id", ColumnType::Str),
            Field::new("source_site", ColumnType::Str),
            Field::new("target_site", ColumnType::Str),
            Field::new("source_role", ColumnType::Str),
            Field::new("target_role", ColumnType::Str),
            Field::new("connected", ColumnType::Bool),
            Field::new("rtt_ms", ColumnType::F64),
        ]
    }

    fn append_row(&self, b: &mut [ColumnBuilder]) {
        b[0].push_i64(Some(self.ts.epoch_millis()));
        b[1].push_str(Some(&self.source_id));
        b[2].push_str(Some(&self.target_id));
        b[3].push_str(Some(&self.source_site));
        b[4].push_str(Some(&self.target_site));
        b[5].push_str(Some(self.source_role.as_str()));
        b[6].push_str(Some(self.target_role.as_str()));
        b[7].push_bool(Some(self.connected));
        b[8].push_f64(self.rtt_ms);
    }

    fn from_table_row(t: &Table, row: usize) -> Result<Self, slc::SlcError> {
        let col = |name: &str| t.require(name);
        Ok(ConnectivityRecord {
            ts: UtcInstant::from_epoch_millis(col("ts")?.i64_at(row).ok_or_else(|| missing("ts"))?)
                .map_err(|_| missing("ts"))?,
            source_id: col("source_id")?
                .str_at(row)
                .ok_or_else(|| missing("source_id"))?
                .to_string(),
            target_id: col("target_id")?
                .str_at(row)
                .ok_or_else(|| missing("target_id"))?
                .to_string(),
            source_site: col("source_site")?
                .str_at(row)
                .ok_or_else(|| missing("source_site"))?
                .to_string(),
            target_site: col("target_site")?
                .str_at(row)
                .ok_or_else(|| missing("target_site"))?
                .to_string(),
            source_role: Role::from_wire(
                col("source_role")?.str_at(row).ok_or_else(|| missing("source_role"))?,
            ),
            target_role: Role::from_wire(
                col("target_role")?.str_at(row).ok_or_else(|| missing("target_role"))?,
            ),
            connected: col("connected")?
                .bool_at(row)
                .ok_or_else(|| missing("connected"))?,
            rtt_ms: col("rtt_ms")?.f64_at(row),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn offset_arithmetic() {
        let a = normalize_timestamp("2019-03-01T12:00:00+02:00").unwrap();
        let b = normalize_timestamp("2019-03-01T10:00:00Z").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_string(), "2019-03-01T10:00:00.000Z");
    }

    #[test]
    fn zone_less_text_is_rejected() {
        assert_eq!(
            normalize_timestamp("2019-03-01 10:00:00"),
            Err(RejectReason::BadTimestamp)
        );
        assert_eq!(
            normalize_timestamp("2019-03-01T10:00:00"),
            Err(RejectReason::BadTimestamp)
        );
    }

    #[test]
    fn epoch_millis_text_parses() {
        let t = normalize_timestamp("1551434400000").unwrap();
        assert_eq!(t.to_string(), "2019-03-01T10:00:00.000Z");
        assert_eq!(normalize_timestamp("-5"), Err(RejectReason::BadTimestamp));
    }

    #[test]
    fn format_reparse_identity() {
        let t = UtcInstant::from_epoch_millis(1_551_434_400_123).unwrap();
        assert_eq!(normalize_timestamp(&t.to_string()).unwrap(), t);
    }

    fn full_line() -> String {
        concat!(
            r#"{"request_id":"r1","op_type":"PUT","bucket":"b","http_status":200,"#,
            r#""start":"2019-03-01T10:00:00Z","end":"2019-03-01T10:00:01Z","#,
            r#""latency_total_ms":1000,"accesser_id":"a1","location":"dal"}"#
        )
        .to_string()
    }

    #[test]
    fn access_record_parses_with_nulls_for_absent_optionals() {
        let rec = parse_access_record(&full_line()).record().unwrap();
        assert_eq!(rec.op_type, OpType::Put);
        assert_eq!(rec.http_status, 200);
        assert_eq!(rec.object, None);
        assert_eq!(rec.bytes, None);
        assert_eq!(rec.latency_backend_wait_ms, None);
        assert_eq!(rec.account_id, None);
    }

    #[test]
    fn missing_required_field_rejects() {
        assert_eq!(
            parse_access_record(r#"{"request_id":"r1"}"#).rejected_reason(),
            Some(RejectReason::MissingRequiredField)
        );
    }

    #[test]
    fn malformed_json_rejects() {
        assert_eq!(
            parse_access_record("{bad json").rejected_reason(),
            Some(RejectReason::MalformedJson)
        );
        assert_eq!(
            parse_access_record("[1,2]").rejected_reason(),
            Some(RejectReason::MalformedJson)
        );
    }

    #[test]
    fn numeric_string_latency_coerces() {
        let line = full_line().replace(r#""latency_total_ms":1000"#, r#""latency_total_ms":"12.5""#);
        // 12.5 < the 1000ms envelope is fine; only sub-latencies are bounded.
        let rec = parse_access_record(&line).record().unwrap();
        assert_eq!(rec.latency_total_ms, 12.5);
    }

    #[test]
    fn unknown_op_type_maps_to_other() {
        let line = full_line().replace("\"PUT\"", "\"PURGE\"");
        assert_eq!(parse_access_record(&line).record().unwrap().op_type, OpType::Other);
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let line = full_line().replace(
            r#""location":"dal"}"#,
            r#""location":"dal","zzz_new_field":{"a":1}}"#,
        );
        assert!(parse_access_record(&line).record().is_some());
    }

    #[test]
    fn out_of_range_status_rejects() {
        let line = full_line().replace(":200", ":99");
        assert_eq!(
            parse_access_record(&line).rejected_reason(),
            Some(RejectReason::OutOfRange)
        );
    }

    #[test]
    fn end_before_start_rejects() {
        let line = full_line().replace(r#""end":"2019-03-01T10:00:01Z""#, r#""end":"2019-03-01T09:00:00Z""#);
        assert_eq!(
            parse_access_record(&line).rejected_reason(),
            Some(RejectReason::OutOfRange)
        );
    }

    #[test]
    fn sub_latency_above_total_rejects() {
        let line = full_line().replace(
            r#""accesser_id""#,
            r#""latency_auth_ms":2000,"accesser_id""#,
        );
        assert_eq!(
            parse_access_record(&line).rejected_reason(),
            Some(RejectReason::OutOfRange)
        );
    }

    #[test]
    fn absent_total_latency_fills_from_envelope() {
        let line = full_line().replace(r#""latency_total_ms":1000,"#, "");
        let rec = parse_access_record(&line).record().unwrap();
        assert_eq!(rec.latency_total_ms, 1000.0);
    }

    fn conn_line() -> String {
        concat!(
            r#"{"ts":"2019-03-01T10:01:00Z","source_id":"a1","target_id":"s1","#,
            r#""source_site":"dal","target_site":"wdc","source_role":"ACCESSER","#,
            r#""target_role":"SLICESTOR","connected":false}"#
        )
        .to_string()
    }

    #[test]
    fn connectivity_record_parses() {
        let rec = parse_connectivity_record(&conn_line()).record().unwrap();
        assert!(!rec.connected);
        assert_eq!(rec.source_role, Role::Accesser);
        assert_eq!(rec.rtt_ms, None);
    }

    #[test]
    fn self_edge_rejects() {
        let line = conn_line().replace(r#""target_id":"s1""#, r#""target_id":"a1""#);
        assert_eq!(
            parse_connectivity_record(&line).rejected_reason(),
            Some(RejectReason::OutOfRange)
        );
    }

    #[test]
    fn boolean_coercions() {
        let rec = parse_connectivity_record(&conn_line().replace("false", "\"true\""))
            .record()
            .unwrap();
        assert!(rec.connected);
        let rec = parse_connectivity_record(&conn_line().replace("false", "1"))
            .record()
            .unwrap();
        assert!(rec.connected);
        let rec = parse_connectivity_record(&conn_line().replace("false", "0"))
            .record()
            .unwrap();
        assert!(!rec.connected);
    }

    #[test]
    fn connectivity_clean_aligns_minute() {
        let line = conn_line().replace("10:01:00Z", "10:01:37.250Z");
        let rec = parse_connectivity_record(&line).record().unwrap().cleaned();
        assert!(rec.ts.is_minute_aligned());
        assert_eq!(rec.ts.to_string(), "2019-03-01T10:01:00.000Z");
    }

    fn arb_access_record() -> impl Strategy<Value = AccessLogRecord> {
        (
            "[a-z0-9]{4,12}",
            0usize..6,
            proptest::option::of("[a-z0-9/]{1,16}"),
            100u16..=599,
            0i64..4_000_000_000_000,
            0i64..5_000,
            proptest::option::of(0.0f64..10.0),
            proptest::option::of(0u64..1_000_000),
            "[a-z]{2,6}",
            "[a-z]{3}",
            proptest::option::of("[a-z0-9]{4}"),
        )
            .prop_map(
                |(rid, op, object, status, start, dur, auth, bytes, acc, loc, account)| {
                    let start = UtcInstant::from_epoch_millis(start).unwrap();
                    AccessLogRecord {
                        request_id: rid,
                        op_type: OpType::ALL[op],
                        bucket: "bkt".to_string(),
                        object,
                        http_status: status,
                        start,
                        end: start.plus_millis(dur),
                        latency_total_ms: dur as f64 + 10.0,
                        latency_client_wait_ms: None,
                        latency_backend_wait_ms: Some(dur as f64 / 2.0),
                        latency_auth_ms: auth,
                        bytes,
                        accesser_id: acc,
                        location: loc,
                        account_id: account,
                    }
                },
            )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn serialize_parse_is_identity(rec in arb_access_record()) {
            let line = rec.to_jsonl();
            let back = parse_access_record(&line).record().unwrap();
            prop_assert_eq!(back, rec);
        }

        #[test]
        fn equal_instants_normalize_equally(
            base in 0i64..4_000_000_000,
            offset_min in -720i32..=840,
        ) {
            // Same instant written with an arbitrary legal offset.
            let utc = UtcInstant::from_epoch_millis(base * 1000).unwrap();
            let local_secs = base + i64::from(offset_min) * 60;
            let (sign, abs) = if offset_min < 0 { ('-', -offset_min) } else { ('+', offset_min) };
            let dt = chrono::DateTime::from_timestamp(local_secs, 0).unwrap();
            let text = format!(
                "{}{}{:02}:{:02}",
                dt.format("%Y-%m-%dT%H:%M:%S"),
                sign,
                abs / 60,
                abs % 60
            );
            prop_assert_eq!(normalize_timestamp(&text).unwrap(), utc);
        }

        #[test]
        fn table_roundtrip_preserves_records(recs in proptest::collection::vec(arb_access_record(), 0..40)) {
            let table = AccessLogRecord::to_table(&recs);
            let back = AccessLogRecord::from_table(&table).unwrap();
            prop_assert_eq!(back, recs);
        }
    }
}
