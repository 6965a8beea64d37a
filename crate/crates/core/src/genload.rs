//! Deterministic synthetic generator for access and connectivity traces
//! with injectable faults.
//!
//! Every draw comes from a per-server ChaCha substream derived from the
//! configured seed, so traces are byte-identical across runs and machines
//! for a fixed `(config, faults)` pair. Arrivals are Poisson per accesser
//! per minute, latencies lognormal per operation type. Faults rewrite only
//! records of the targeted component(s) inside the fault window; everything
//! else stays bit-identical to the un-injected trace.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{FixedOffset, SecondsFormat, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logmodel::{
    AccessLogRecord, ConnectivityRecord, LogRecord, OpType, Role, UtcInstant,
};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid workload config: {0}")]
    InvalidConfig(String),
    #[error("invalid fault spec: {0}")]
    InvalidFault(String),
    #[error("fault target '{0}' is not in the configured topology")]
    UnknownTarget(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A server participating in the trace: front-end accesser or back-end
/// slicestor, placed at a site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerSpec {
    pub id: String,
    pub location: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyParams {
    pub median_ms: f64,
    pub sigma: f64,
}

/// How generated JSONL timestamps are rendered: plain UTC, or rotating
/// through equivalent numeric offsets (exercises normalization).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimestampStyle {
    #[default]
    Utc,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    /// First instant of the trace; must be minute-aligned.
    pub start: UtcInstant,
    pub duration_minutes: u32,
    /// Mean events per accesser per minute (Poisson arrivals).
    pub rate_per_accesser: f64,
    pub accessers: Vec<ServerSpec>,
    pub slicestors: Vec<ServerSpec>,
    #[serde(default = "default_op_mix")]
    pub op_mix: BTreeMap<OpType, f64>,
    #[serde(default = "default_latency_model")]
    pub latency_model: BTreeMap<OpType, LatencyParams>,
    /// Probability that any one operation returns a 5xx.
    #[serde(default)]
    pub error_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub timestamp_style: TimestampStyle,
}

fn default_op_mix() -> BTreeMap<OpType, f64> {
    BTreeMap::from([
        (OpType::Get, 0.55),
        (OpType::Put, 0.25),
        (OpType::Head, 0.12),
        (OpType::List, 0.05),
        (OpType::Delete, 0.03),
    ])
}

fn default_latency_model() -> BTreeMap<OpType, LatencyParams> {
    BTreeMap::from([
        (OpType::Get, LatencyParams { median_ms: 45.0, sigma: 0.35 }),
        (OpType::Put, LatencyParams { median_ms: 120.0, sigma: 0.40 }),
        (OpType::Head, LatencyParams { median_ms: 8.0, sigma: 0.30 }),
        (OpType::List, LatencyParams { median_ms: 60.0, sigma: 0.45 }),
        (OpType::Delete, LatencyParams { median_ms: 25.0, sigma: 0.35 }),
        (OpType::Other, LatencyParams { median_ms: 50.0, sigma: 0.40 }),
    ])
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            start: UtcInstant::from_epoch_millis(1_772_323_200_000).unwrap(), // 2026-03-01T00:00:00Z
            duration_minutes: 60,
            rate_per_accesser: 60.0,
            accessers: vec![
                ServerSpec { id: "a1".into(), location: "dal".into() },
                ServerSpec { id: "a2".into(), location: "wdc".into() },
            ],
            slicestors: vec![
                ServerSpec { id: "s1".into(), location: "dal".into() },
                ServerSpec { id: "s2".into(), location: "wdc".into() },
            ],
            op_mix: default_op_mix(),
            latency_model: default_latency_model(),
            error_rate: 0.002,
            seed: 1,
            timestamp_style: TimestampStyle::Utc,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let err = |m: String| Err(GenError::InvalidConfig(m));
        if !self.start.is_minute_aligned() {
            return err("start must be minute-aligned".into());
        }
        if !(self.rate_per_accesser >= 0.0) || !self.rate_per_accesser.is_finite() {
            return err("rate_per_accesser must be a non-negative number".into());
        }
        if !(0.0..=1.0).contains(&self.error_rate) {
            return err("error_rate must be in [0,1]".into());
        }
        if self.op_mix.is_empty() {
            return err("op_mix must not be empty".into());
        }
        let mut sum = 0.0;
        for (op, p) in &self.op_mix {
            if !(0.0..=1.0).contains(p) {
                return err(format!("op_mix[{op}] out of [0,1]"));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return err(format!("op_mix sums to {sum}, expected 1"));
        }
        for (op, lp) in &self.latency_model {
            if !(lp.median_ms > 0.0) || !(lp.sigma >= 0.0) {
                return err(format!("latency_model[{op}] needs median_ms > 0 and sigma >= 0"));
            }
        }
        let mut ids = BTreeSet::new();
        for s in self.accessers.iter().chain(&self.slicestors) {
            if s.id.is_empty() || s.location.is_empty() {
                return err("server ids and locations must be non-empty".into());
            }
            if !ids.insert(&s.id) {
                return err(format!("duplicate server id '{}'", s.id));
            }
        }
        Ok(())
    }

    pub fn servers(&self) -> impl Iterator<Item = (&ServerSpec, Role)> {
        self.accessers
            .iter()
            .map(|s| (s, Role::Accesser))
            .chain(self.slicestors.iter().map(|s| (s, Role::Slicestor)))
    }

    pub fn server_ids(&self) -> BTreeSet<String> {
        self.servers().map(|(s, _)| s.id.clone()).collect()
    }

    pub fn trace_end(&self) -> UtcInstant {
        self.start.plus_millis(i64::from(self.duration_minutes) * 60_000)
    }

    fn latency_for(&self, op: OpType) -> LatencyParams {
        self.latency_model
            .get(&op)
            .copied()
            .unwrap_or(LatencyParams { median_ms: 50.0, sigma: 0.4 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    LatencyShift,
    ErrorSpike,
    Disconnect,
}

/// Either a single component or a directed pair of servers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FaultTarget {
    Component(String),
    Pair(String, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub target: FaultTarget,
    /// `[T_start, T_end)`; records with event time inside are affected.
    pub window: (UtcInstant, UtcInstant),
    /// Latency multiplier or added error probability; unused for
    /// DISCONNECT (defaults to 1).
    #[serde(default = "one")]
    pub magnitude: f64,
}

fn one() -> f64 {
    1.0
}

impl FaultSpec {
    fn contains(&self, t: UtcInstant) -> bool {
        self.window.0 <= t && t < self.window.1
    }

    fn touches(&self, id: &str) -> bool {
        match &self.target {
            FaultTarget::Component(c) => c == id,
            FaultTarget::Pair(a, b) => a == id || b == id,
        }
    }

    /// DISCONNECT applies symmetrically to both directions of a pair.
    fn matches_edge(&self, source: &str, target: &str) -> bool {
        match &self.target {
            FaultTarget::Component(c) => c == source || c == target,
            FaultTarget::Pair(a, b) => {
                (a == source && b == target) || (a == target && b == source)
            }
        }
    }
}

// Stable 64-bit mixing; std hashers are not stable across releases.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn stream_seed(seed: u64, label: &str, id: &str) -> u64 {
    let mut h = splitmix64(seed);
    for b in label.bytes().chain(id.bytes()) {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

/// Unit-interval hash of a record id; drives deterministic error spikes.
fn unit_hash(seed: u64, salt: u64, id: &str) -> f64 {
    let mut h = splitmix64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    for b in id.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

struct AccesserStream {
    spec: ServerSpec,
    rng: ChaCha8Rng,
    seq: u64,
}

/// Lazy access-trace cursor: accesser-major, non-decreasing timestamps
/// within each accesser.
pub struct AccessTraceIter {
    config: WorkloadConfig,
    streams: Vec<AccesserStream>,
    current: usize,
    minute: u32,
    pending: VecDeque<AccessLogRecord>,
}

impl AccessTraceIter {
    fn fill_minute(&mut self) -> bool {
        loop {
            if self.current >= self.streams.len() {
                return false;
            }
            if self.minute >= self.config.duration_minutes {
                self.current += 1;
                self.minute = 0;
                continue;
            }
            let rate = self.config.rate_per_accesser;
            let minute = self.minute;
            self.minute += 1;
            let stream = &mut self.streams[self.current];
            let n = if rate > 0.0 {
                Poisson::new(rate).expect("validated rate").sample(&mut stream.rng) as u64
            } else {
                0
            };
            if n == 0 {
                continue;
            }
            let minute_start = self
                .config
                .start
                .plus_millis(i64::from(minute) * 60_000);
            let mut offsets: Vec<u32> = (0..n).map(|_| stream.rng.gen_range(0..60_000)).collect();
            offsets.sort_unstable();
            for off in offsets {
                let event = next_event(&self.config, stream, minute_start, off);
                self.pending.push_back(event);
            }
            return true;
        }
    }
}

fn next_event(
    config: &WorkloadConfig,
    stream: &mut AccesserStream,
    minute_start: UtcInstant,
    offset_ms: u32,
) -> AccessLogRecord {
    let rng = &mut stream.rng;
    let op = {
        let roll: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = *config.op_mix.keys().next_back().expect("non-empty mix");
        for (op, p) in &config.op_mix {
            acc += p;
            if roll < acc {
                chosen = *op;
                break;
            }
        }
        chosen
    };
    let lp = config.latency_for(op);
    let total = LogNormal::new(lp.median_ms.ln(), lp.sigma)
        .expect("validated sigma")
        .sample(rng);
    let auth = total * rng.gen_range(0.02..0.08);
    let client_wait = total * rng.gen_range(0.05..0.15);
    let backend = total * rng.gen_range(0.30..0.60);
    let is_error: f64 = rng.gen();
    let status = if is_error < config.error_rate {
        503
    } else if op == OpType::Delete {
        204
    } else {
        200
    };
    let bucket_no: u32 = rng.gen_range(0..8);
    let object_no: u32 = rng.gen_range(0..100_000);
    let account_no: u32 = rng.gen_range(0..16);
    let bytes = match op {
        OpType::Get | OpType::Put => {
            let exp: f64 = rng.gen_range(10.0..20.0);
            Some(exp.exp2() as u64)
        }
        _ => None,
    };
    let start = minute_start.plus_millis(i64::from(offset_ms));
    stream.seq += 1;
    AccessLogRecord {
        request_id: format!("r-{}-{:08}", stream.spec.id, stream.seq),
        op_type: op,
        bucket: format!("bkt-{bucket_no:02}"),
        object: (op != OpType::List).then(|| format!("obj-{object_no:06}")),
        http_status: status,
        start,
        end: start.plus_millis(total.round() as i64),
        latency_total_ms: total,
        latency_client_wait_ms: Some(client_wait),
        latency_backend_wait_ms: Some(backend),
        latency_auth_ms: Some(auth),
        bytes,
        accesser_id: stream.spec.id.clone(),
        location: stream.spec.location.clone(),
        account_id: Some(format!("acct-{account_no:02}")),
    }
}

impl Iterator for AccessTraceIter {
    type Item = AccessLogRecord;

    fn next(&mut self) -> Option<AccessLogRecord> {
        loop {
            if let Some(rec) = self.pending.pop_front() {
                return Some(rec);
            }
            if !self.fill_minute() {
                return None;
            }
        }
    }
}

/// Deterministic access trace for `config`; identical seeds produce
/// identical traces.
pub fn generate_access_trace(config: &WorkloadConfig) -> Result<AccessTraceIter, GenError> {
    config.validate()?;
    let streams = config
        .accessers
        .iter()
        .map(|spec| AccesserStream {
            rng: ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "access", &spec.id)),
            spec: spec.clone(),
            seq: 0,
        })
        .collect();
    Ok(AccessTraceIter {
        config: config.clone(),
        streams,
        current: 0,
        minute: 0,
        pending: VecDeque::new(),
    })
}

/// Per-minute reachability reports: one record per ordered (server, peer)
/// pair per minute, all connected unless a fault says otherwise.
pub struct ConnectivityTraceIter {
    servers: Vec<(ServerSpec, Role)>,
    rngs: Vec<ChaCha8Rng>,
    start: UtcInstant,
    duration_minutes: u32,
    minute: u32,
    source: usize,
    target: usize,
}

impl Iterator for ConnectivityTraceIter {
    type Item = ConnectivityRecord;

    fn next(&mut self) -> Option<ConnectivityRecord> {
        let n = self.servers.len();
        loop {
            if self.minute >= self.duration_minutes {
                return None;
            }
            if self.source >= n {
                self.source = 0;
                self.minute += 1;
                continue;
            }
            if self.target >= n {
                self.target = 0;
                self.source += 1;
                continue;
            }
            if self.target == self.source {
                self.target += 1;
                continue;
            }
            let (src, src_role) = self.servers[self.source].clone();
            let (tgt, tgt_role) = self.servers[self.target].clone();
            let rng = &mut self.rngs[self.source];
            let base: f64 = if src.location == tgt.location { 0.4 } else { 8.0 };
            let rtt = LogNormal::new(base.ln(), 0.15).unwrap().sample(rng);
            let ts = self.start.plus_millis(i64::from(self.minute) * 60_000);
            self.target += 1;
            return Some(ConnectivityRecord {
                ts,
                source_id: src.id,
                target_id: tgt.id,
                source_site: src.location,
                target_site: tgt.location,
                source_role: src_role,
                target_role: tgt_role,
                connected: true,
                rtt_ms: Some(rtt),
            });
        }
    }
}

pub fn generate_connectivity_trace(
    config: &WorkloadConfig,
) -> Result<ConnectivityTraceIter, GenError> {
    config.validate()?;
    let servers: Vec<(ServerSpec, Role)> =
        config.servers().map(|(s, r)| (s.clone(), r)).collect();
    let rngs = servers
        .iter()
        .map(|(s, _)| ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "connectivity", &s.id)))
        .collect();
    Ok(ConnectivityTraceIter {
        servers,
        rngs,
        start: config.start,
        duration_minutes: config.duration_minutes,
        minute: 0,
        source: 0,
        target: 0,
    })
}

/// Validates fault specs against a workload's topology and rewrites
/// matching records.
#[derive(Debug, Clone)]
pub struct FaultInjector {
    faults: Vec<FaultSpec>,
    seed: u64,
}

impl FaultInjector {
    pub fn new(config: &WorkloadConfig, faults: Vec<FaultSpec>) -> Result<Self, GenError> {
        config.validate()?;
        let ids = config.server_ids();
        for f in &faults {
            if f.window.0 >= f.window.1 {
                return Err(GenError::InvalidFault("window must have T_start < T_end".into()));
            }
            if !(f.magnitude > 0.0) {
                return Err(GenError::InvalidFault("magnitude must be > 0".into()));
            }
            match (&f.kind, &f.target) {
                (FaultKind::Disconnect, FaultTarget::Pair(a, b)) => {
                    for id in [a, b] {
                        if !ids.contains(id) {
                            return Err(GenError::UnknownTarget(id.clone()));
                        }
                    }
                }
                (_, FaultTarget::Component(c)) => {
                    if !ids.contains(c) {
                        return Err(GenError::UnknownTarget(c.clone()));
                    }
                }
                (kind, FaultTarget::Pair(..)) => {
                    return Err(GenError::InvalidFault(format!(
                        "{kind:?} faults target a single component, not a pair"
                    )));
                }
            }
        }
        Ok(FaultInjector { faults, seed: config.seed })
    }

    pub fn is_empty(&self) -> bool {
        self.faults.is_empty()
    }

    /// Fault windows, useful as detection ground truth.
    pub fn faults(&self) -> &[FaultSpec] {
        &self.faults
    }

    pub fn apply_access_record(&self, mut rec: AccessLogRecord) -> AccessLogRecord {
        for (idx, fault) in self.faults.iter().enumerate() {
            if !fault.contains(rec.start) || !fault.touches(&rec.accesser_id) {
                continue;
            }
            match fault.kind {
                FaultKind::LatencyShift => {
                    rec.latency_total_ms *= fault.magnitude;
                    if let Some(b) = rec.latency_backend_wait_ms.as_mut() {
                        *b *= fault.magnitude;
                    }
                    rec.end = rec.start.plus_millis(rec.latency_total_ms.round() as i64);
                }
                FaultKind::ErrorSpike => {
                    if unit_hash(self.seed, idx as u64, &rec.request_id) < fault.magnitude {
                        rec.http_status = 503;
                    }
                }
                FaultKind::Disconnect => {}
            }
        }
        rec
    }

    pub fn apply_connectivity_record(&self, mut rec: ConnectivityRecord) -> ConnectivityRecord {
        for fault in &self.faults {
            if fault.kind == FaultKind::Disconnect
                && fault.contains(rec.ts)
                && fault.matches_edge(&rec.source_id, &rec.target_id)
            {
                rec.connected = false;
                rec.rtt_ms = None;
            }
        }
        rec
    }

    pub fn apply_access<'a, I>(&'a self, iter: I) -> impl Iterator<Item = AccessLogRecord> + 'a
    where
        I: Iterator<Item = AccessLogRecord> + 'a,
    {
        iter.map(move |r| self.apply_access_record(r))
    }

    pub fn apply_connectivity<'a, I>(
        &'a self,
        iter: I,
    ) -> impl Iterator<Item = ConnectivityRecord> + 'a
    where
        I: Iterator<Item = ConnectivityRecord> + 'a,
    {
        iter.map(move |r| self.apply_connectivity_record(r))
    }
}

// --- JSONL output, one file per (day, location) ---------------------------

const MIXED_OFFSETS_MINUTES: [i32; 4] = [0, 120, -300, 330];

fn format_with_offset(t: UtcInstant, offset_minutes: i32) -> String {
    if offset_minutes == 0 {
        return t.to_string();
    }
    let off = FixedOffset::east_opt(offset_minutes * 60).expect("legal offset");
    Utc.timestamp_millis_opt(t.epoch_millis())
        .single()
        .expect("valid millis")
        .with_timezone(&off)
        .to_rfc3339_opts(SecondsFormat::Millis, false)
}

fn render_line<T: LogRecord>(
    record: &T,
    style: TimestampStyle,
    index: u64,
    time_keys: &[&str],
) -> String {
    match style {
        TimestampStyle::Utc => record.to_jsonl(),
        TimestampStyle::Mixed => {
            let offset = MIXED_OFFSETS_MINUTES[(index % 4) as usize];
            let mut value = serde_json::to_value(record).expect("record serializes");
            for key in time_keys {
                let text = value[*key].as_str().expect("timestamp field").to_string();
                let instant = crate::logmodel::normalize_timestamp(&text).expect("own timestamp");
                value[*key] = serde_json::Value::String(format_with_offset(instant, offset));
            }
            value.to_string()
        }
    }
}

fn write_jsonl<T: LogRecord>(
    records: impl Iterator<Item = T>,
    out_dir: &Path,
    prefix: &str,
    style: TimestampStyle,
    time_keys: &[&str],
) -> Result<Vec<PathBuf>, GenError> {
    std::fs::create_dir_all(out_dir)?;
    let mut writers: BTreeMap<(String, String), BufWriter<File>> = BTreeMap::new();
    let mut index = 0u64;
    for rec in records {
        let key = (rec.event_time().date_string(), rec.location().to_string());
        if !writers.contains_key(&key) {
            let path = out_dir.join(format!("{prefix}-{}-{}.jsonl", key.0, key.1));
            writers.insert(key.clone(), BufWriter::new(File::create(path)?));
        }
        let w = writers.get_mut(&key).expect("just inserted");
        w.write_all(render_line(&rec, style, index, time_keys).as_bytes())?;
        w.write_all(b"\n")?;
        index += 1;
    }
    let mut paths = Vec::new();
    for ((date, loc), mut w) in writers {
        w.flush()?;
        paths.push(out_dir.join(format!("{prefix}-{date}-{loc}.jsonl")));
    }
    Ok(paths)
}

/// Writes an access trace as JSON Lines, one file per (day, location).
pub fn write_access_jsonl(
    records: impl Iterator<Item = AccessLogRecord>,
    out_dir: &Path,
    style: TimestampStyle,
) -> Result<Vec<PathBuf>, GenError> {
    write_jsonl(records, out_dir, "access", style, &["start", "end"])
}

/// Writes a connectivity trace as JSON Lines, one file per (day, site).
pub fn write_connectivity_jsonl(
    records: impl Iterator<Item = ConnectivityRecord>,
    out_dir: &Path,
    style: TimestampStyle,
) -> Result<Vec<PathBuf>, GenError> {
    write_jsonl(records, out_dir, "connectivity", style, &["ts"])
}
