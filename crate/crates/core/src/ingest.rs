//! Batch and streaming ingestion with MD5 integrity verification.
//!
//! Files are JSON Lines, optionally gzip-compressed (`.gz`). Every input
//! line is accounted for as accepted or rejected; a bad line never aborts
//! a file and an unreadable file never aborts the remaining paths.
//! Streaming delivery is at-least-once: replays are possible and the
//! staging layer dedups by record key.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use flate2::read::MultiGzDecoder;
use md5::{Digest, Md5};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logmodel::{LogRecord, ParseOutcome, RejectReason};

pub const DEFAULT_BATCH_ROWS: usize = 65_536;
pub const DEFAULT_MAX_DELAY: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read '{path}': {message}")]
    Unreadable { path: String, message: String },
    #[error("stream source failed after {resume_from} delivered lines: {message}")]
    Stream { resume_from: u64, message: String },
    #[error("bad chunk manifest: {0}")]
    BadManifest(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Declared size and digest of one copied chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkManifest {
    pub path: String,
    pub byte_len: u64,
    pub md5_hex: String,
}

impl ChunkManifest {
    pub fn for_bytes(path: impl Into<String>, bytes: &[u8]) -> Self {
        ChunkManifest {
            path: path.into(),
            byte_len: bytes.len() as u64,
            md5_hex: md5_hex(bytes),
        }
    }

    pub fn well_formed(&self) -> bool {
        self.md5_hex.len() == 32
            && self.md5_hex.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
    }
}

fn md5_hex(bytes: &[u8]) -> String {
    let mut h = Md5::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// True iff both the length and the MD5 digest match the manifest.
pub fn verify_chunk(bytes: &[u8], manifest: &ChunkManifest) -> bool {
    bytes.len() as u64 == manifest.byte_len && md5_hex(bytes) == manifest.md5_hex
}

/// Verifies consecutive chunks of `bytes` against their manifests; the
/// split points carry no information beyond the declared lengths.
pub fn verify_chunks(bytes: &[u8], manifests: &[ChunkManifest]) -> bool {
    let mut offset = 0usize;
    for m in manifests {
        let end = offset + m.byte_len as usize;
        if end > bytes.len() || !verify_chunk(&bytes[offset..end], m) {
            return false;
        }
        offset = end;
    }
    offset == bytes.len()
}

pub fn load_manifests(path: &Path) -> Result<Vec<ChunkManifest>, IngestError> {
    let text = std::fs::read_to_string(path)?;
    let manifests: Vec<ChunkManifest> =
        serde_json::from_str(&text).map_err(|e| IngestError::BadManifest(e.to_string()))?;
    for m in &manifests {
        if !m.well_formed() {
            return Err(IngestError::BadManifest(format!(
                "'{}' digest is not 32 lowercase hex chars",
                m.path
            )));
        }
    }
    Ok(manifests)
}

/// A bounded run of parsed records of one kind plus the lines that were
/// rejected while filling it. Line numbers are global (1-based, cumulative
/// across input files in path order) and strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordBatch<T> {
    /// Path of the first file contributing to this batch.
    pub source: String,
    pub records: Vec<T>,
    pub rejected: Vec<(u64, RejectReason)>,
}

impl<T: LogRecord> RecordBatch<T> {
    pub fn kind(&self) -> crate::logmodel::LogKind {
        T::KIND
    }
}

/// Per-file line accounting: accepted + rejected == lines, per file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FileStats {
    pub path: String,
    pub lines: u64,
    pub accepted: u64,
    pub rejected: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub files: Vec<FileStats>,
}

enum LineReader {
    Plain(BufReader<File>),
    Gz(BufReader<MultiGzDecoder<File>>),
}

impl LineReader {
    fn open(path: &Path) -> std::io::Result<Self> {
        let file = File::open(path)?;
        if path.extension().is_some_and(|e| e == "gz") {
            Ok(LineReader::Gz(BufReader::new(MultiGzDecoder::new(file))))
        } else {
            Ok(LineReader::Plain(BufReader::new(file)))
        }
    }

    fn read_line(&mut self, buf: &mut String) -> std::io::Result<usize> {
        match self {
            LineReader::Plain(r) => r.read_line(buf),
            LineReader::Gz(r) => r.read_line(buf),
        }
    }
}

/// Reads JSON Lines files into bounded [`RecordBatch`]es; batches may span
/// files. Iterate fully, then collect the per-file report.
pub struct BatchIter<T> {
    paths: VecDeque<PathBuf>,
    reader: Option<(String, LineReader)>,
    batch_max_rows: usize,
    line_no: u64,
    report: IngestReport,
    pending: Option<RecordBatch<T>>,
    done: bool,
}

pub fn ingest_batch<T: LogRecord>(
    paths: impl IntoIterator<Item = PathBuf>,
    batch_max_rows: usize,
) -> BatchIter<T> {
    BatchIter {
        paths: paths.into_iter().collect(),
        reader: None,
        batch_max_rows: batch_max_rows.max(1),
        line_no: 0,
        report: IngestReport::default(),
        pending: None,
        done: false,
    }
}

impl<T: LogRecord> BatchIter<T> {
    pub fn report(&self) -> &IngestReport {
        &self.report
    }

    pub fn into_report(self) -> IngestReport {
        self.report
    }

    fn push_line(&mut self, line: &str) {
        self.line_no += 1;
        let batch = self.pending.as_mut().expect("batch open");
        let stats = self.report.files.last_mut().expect("file open");
        stats.lines += 1;
        match T::parse_line(line) {
            ParseOutcome::Record(r) => {
                stats.accepted += 1;
                batch.records.push(r);
            }
            ParseOutcome::Rejected(reason) => {
                stats.rejected += 1;
                batch.rejected.push((self.line_no, reason));
            }
        }
    }

    fn batch_len(&self) -> usize {
        self.pending
            .as_ref()
            .map_or(0, |b| b.records.len() + b.rejected.len())
    }
}

impl<T: LogRecord> Iterator for BatchIter<T> {
    type Item = Result<RecordBatch<T>, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut buf = String::new();
        loop {
            if self.reader.is_none() {
                match self.paths.pop_front() {
                    Some(path) => {
                        let display = path.display().to_string();
                        match LineReader::open(&path) {
                            Ok(r) => {
                                self.report.files.push(FileStats {
                                    path: display.clone(),
                                    ..FileStats::default()
                                });
                                self.reader = Some((display, r));
                            }
                            Err(e) => {
                                return Some(Err(IngestError::Unreadable {
                                    path: display,
                                    message: e.to_string(),
                                }));
                            }
                        }
                    }
                    None => {
                        self.done = true;
                        return self.pending.take().map(Ok);
                    }
                }
            }

            let (source, reader) = self.reader.as_mut().expect("reader open");
            if self.pending.is_none() {
                self.pending = Some(RecordBatch {
                    source: source.clone(),
                    records: Vec::new(),
                    rejected: Vec::new(),
                });
            }
            buf.clear();
            match reader.read_line(&mut buf) {
                Ok(0) => {
                    self.reader = None;
                    continue;
                }
                Ok(_) => {
                    let line = buf.trim_end_matches(['\n', '\r']);
                    if line.is_empty() {
                        // Blank lines carry no record; still counted.
                        self.line_no += 1;
                        let stats = self.report.files.last_mut().expect("file open");
                        stats.lines += 1;
                        stats.rejected += 1;
                        self.pending
                            .as_mut()
                            .expect("batch open")
                            .rejected
                            .push((self.line_no, RejectReason::MalformedJson));
                    } else {
                        self.push_line(line);
                    }
                    if self.batch_len() >= self.batch_max_rows {
                        return self.pending.take().map(Ok);
                    }
                }
                Err(e) => {
                    let path = source.clone();
                    self.reader = None;
                    return Some(Err(IngestError::Unreadable {
                        path,
                        message: e.to_string(),
                    }));
                }
            }
        }
    }
}

/// Lists `*.jsonl` / `*.jsonl.gz` files under a directory, sorted by name.
pub fn list_jsonl_files(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if path.is_file() && (name.ends_with(".jsonl") || name.ends_with(".jsonl.gz")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

// --- streaming ingestion ---------------------------------------------------

/// One poll of a pull-based line source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pulled {
    Line(String),
    /// Nothing available within the wait budget.
    Idle,
    /// Source exhausted or cancelled; no more lines will come.
    End,
}

/// A resumable line feed (file tail, message queue, socket).
pub trait LineSource {
    fn pull(&mut self, max_wait: Duration) -> Result<Pulled, String>;
}

#[derive(Debug, Clone, Copy)]
pub struct StreamOptions {
    pub batch_max_rows: usize,
    pub max_delay: Duration,
}

impl Default for StreamOptions {
    fn default() -> Self {
        StreamOptions {
            batch_max_rows: DEFAULT_BATCH_ROWS,
            max_delay: DEFAULT_MAX_DELAY,
        }
    }
}

/// Batches a line source: a batch flushes when it reaches
/// `batch_max_rows` or when `max_delay` has passed since its first line,
/// whichever comes first. A source failure first flushes the in-flight
/// batch, then surfaces as [`IngestError::Stream`] carrying the count of
/// lines already delivered downstream.
pub struct StreamIter<T, S> {
    source: S,
    opts: StreamOptions,
    line_no: u64,
    delivered: u64,
    batch: Option<(Instant, RecordBatch<T>)>,
    pending_error: Option<IngestError>,
    done: bool,
}

pub fn ingest_stream<T: LogRecord, S: LineSource>(
    source: S,
    opts: StreamOptions,
) -> StreamIter<T, S> {
    StreamIter {
        source,
        opts,
        line_no: 0,
        delivered: 0,
        batch: None,
        pending_error: None,
        done: false,
    }
}

impl<T: LogRecord, S: LineSource> StreamIter<T, S> {
    /// Lines delivered in emitted batches so far; a failed source can be
    /// resumed from this position.
    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    fn flush(&mut self) -> Option<RecordBatch<T>> {
        let (_, batch) = self.batch.take()?;
        self.delivered += (batch.records.len() + batch.rejected.len()) as u64;
        Some(batch)
    }
}

impl<T: LogRecord, S: LineSource> Iterator for StreamIter<T, S> {
    type Item = Result<RecordBatch<T>, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if let Some(err) = self.pending_error.take() {
            self.done = true;
            return Some(Err(err));
        }
        loop {
            let wait = match &self.batch {
                Some((opened, _)) => {
                    let age = opened.elapsed();
                    if age >= self.opts.max_delay {
                        return self.flush().map(Ok);
                    }
                    self.opts.max_delay - age
                }
                None => self.opts.max_delay,
            };
            match self.source.pull(wait) {
                Ok(Pulled::Line(line)) => {
                    self.line_no += 1;
                    let line_no = self.line_no;
                    let (_, batch) = self.batch.get_or_insert_with(|| {
                        (
                            Instant::now(),
                            RecordBatch {
                                source: "stream".to_string(),
                                records: Vec::new(),
                                rejected: Vec::new(),
                            },
                        )
                    });
                    match T::parse_line(line.trim_end_matches(['\n', '\r'])) {
                        ParseOutcome::Record(r) => batch.records.push(r),
                        ParseOutcome::Rejected(reason) => batch.rejected.push((line_no, reason)),
                    }
                    if batch.records.len() + batch.rejected.len() >= self.opts.batch_max_rows {
                        return self.flush().map(Ok);
                    }
                }
                Ok(Pulled::Idle) => {
                    if let Some((opened, _)) = &self.batch {
                        if opened.elapsed() >= self.opts.max_delay {
                            return self.flush().map(Ok);
                        }
                    }
                }
                Ok(Pulled::End) => {
                    self.done = true;
                    return self.flush().map(Ok);
                }
                Err(message) => {
                    let err = IngestError::Stream {
                        resume_from: self.delivered
                            + self
                                .batch
                                .as_ref()
                                .map_or(0, |(_, b)| (b.records.len() + b.rejected.len()) as u64),
                        message,
                    };
                    if let Some(batch) = self.flush() {
                        self.pending_error = Some(err);
                        return Some(Ok(batch));
                    }
                    self.done = true;
                    return Some(Err(err));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logmodel::AccessLogRecord;
    use proptest::prelude::*;
    use std::io::Write;

    // Digests cross-checked against the system md5sum utility.
    const MD5_EMPTY: &str = "d41d8cd98f00b204e9800998ecf8427e";
    const MD5_ABC: &str = "900150983cd24fb0d6963f7d28e17f72";

    #[test]
    fn verify_empty_chunk() {
        let m = ChunkManifest {
            path: "empty".into(),
            byte_len: 0,
            md5_hex: MD5_EMPTY.into(),
        };
        assert!(verify_chunk(b"", &m));
        assert!(!verify_chunk(b"x", &m));
    }

    #[test]
    fn verify_rejects_wrong_length() {
        let m = ChunkManifest {
            path: "abc".into(),
            byte_len: 2,
            md5_hex: MD5_ABC.into(),
        };
        assert!(!verify_chunk(b"abc", &m));
    }

    #[test]
    fn verify_against_external_digest() {
        let m = ChunkManifest {
            path: "abc".into(),
            byte_len: 3,
            md5_hex: MD5_ABC.into(),
        };
        assert!(verify_chunk(b"abc", &m));
        assert_eq!(ChunkManifest::for_bytes("abc", b"abc").md5_hex, MD5_ABC);
    }

    fn access_line(i: usize) -> String {
        format!(
            concat!(
                r#"{{"request_id":"r{i}","op_type":"GET","bucket":"b","http_status":200,"#,
                r#""start":"2026-03-01T00:00:00Z","end":"2026-03-01T00:00:01Z","#,
                r#""latency_total_ms":5,"accesser_id":"a1","location":"dal"}}"#
            ),
            i = i
        )
    }

    fn write_lines(dir: &Path, name: &str, lines: &[String]) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        path
    }

    #[test]
    fn batches_span_files_and_honor_max_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for f in 0..3 {
            let lines: Vec<String> = (0..100).map(|i| access_line(f * 100 + i)).collect();
            paths.push(write_lines(dir.path(), &format!("f{f}.jsonl"), &lines));
        }
        let mut iter = ingest_batch::<AccessLogRecord>(paths, 250);
        let sizes: Vec<usize> = iter.by_ref().map(|b| b.unwrap().records.len()).collect();
        assert_eq!(sizes, vec![250, 50]);
        for f in iter.report().files.iter() {
            assert_eq!(f.lines, 100);
            assert_eq!(f.accepted + f.rejected, f.lines);
        }
    }

    #[test]
    fn bad_line_is_rejected_at_its_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let mut lines: Vec<String> = (0..10).map(access_line).collect();
        lines[3] = "{not json".to_string();
        let path = write_lines(dir.path(), "f.jsonl", &lines);
        let batches: Vec<_> = ingest_batch::<AccessLogRecord>([path], 1000)
            .map(Result::unwrap)
            .collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].records.len(), 9);
        assert_eq!(batches[0].rejected, vec![(4, RejectReason::MalformedJson)]);
    }

    #[test]
    fn empty_path_list_is_empty_stream() {
        let mut iter = ingest_batch::<AccessLogRecord>(Vec::<PathBuf>::new(), 10);
        assert!(iter.next().is_none());
    }

    #[test]
    fn unreadable_file_reports_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        let good = write_lines(dir.path(), "good.jsonl", &[access_line(1)]);
        let missing = dir.path().join("missing.jsonl");
        let results: Vec<_> = ingest_batch::<AccessLogRecord>([missing, good], 10).collect();
        assert_eq!(results.len(), 2);
        match &results[0] {
            Err(IngestError::Unreadable { path, .. }) => assert!(path.contains("missing")),
            other => panic!("expected unreadable error, got {other:?}"),
        }
        assert_eq!(results[1].as_ref().unwrap().records.len(), 1);
    }

    #[test]
    fn gzip_files_are_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl.gz");
        let mut enc = flate2::write::GzEncoder::new(
            File::create(&path).unwrap(),
            flate2::Compression::fast(),
        );
        for i in 0..5 {
            writeln!(enc, "{}", access_line(i)).unwrap();
        }
        enc.finish().unwrap();
        let batches: Vec<_> = ingest_batch::<AccessLogRecord>([path], 100)
            .map(Result::unwrap)
            .collect();
        assert_eq!(batches[0].records.len(), 5);
    }

    struct ScriptSource {
        script: VecDeque<Result<Pulled, String>>,
    }

    impl LineSource for ScriptSource {
        fn pull(&mut self, _max_wait: Duration) -> Result<Pulled, String> {
            self.script.pop_front().unwrap_or(Ok(Pulled::End))
        }
    }

    fn scripted(items: Vec<Result<Pulled, String>>) -> ScriptSource {
        ScriptSource {
            script: items.into(),
        }
    }

    #[test]
    fn idle_past_max_delay_flushes_by_timer() {
        let mut script: Vec<Result<Pulled, String>> =
            (0..10).map(|i| Ok(Pulled::Line(access_line(i)))).collect();
        for _ in 0..100 {
            script.push(Ok(Pulled::Idle));
        }
        script.push(Ok(Pulled::End));
        let opts = StreamOptions {
            batch_max_rows: 1000,
            max_delay: Duration::from_millis(20),
        };
        let mut iter = ingest_stream::<AccessLogRecord, _>(scripted(script), opts);
        let first = iter.next().unwrap().unwrap();
        assert_eq!(first.records.len(), 10);
    }

    #[test]
    fn cancel_mid_stream_delivers_each_line_exactly_once() {
        let mut script: Vec<Result<Pulled, String>> =
            (0..7).map(|i| Ok(Pulled::Line(access_line(i)))).collect();
        script.push(Ok(Pulled::End));
        let opts = StreamOptions {
            batch_max_rows: 3,
            max_delay: Duration::from_millis(50),
        };
        let ids: Vec<String> = ingest_stream::<AccessLogRecord, _>(scripted(script), opts)
            .map(Result::unwrap)
            .flat_map(|b| b.records.into_iter().map(|r| r.request_id))
            .collect();
        let expected: Vec<String> = (0..7).map(|i| format!("r{i}")).collect();
        assert_eq!(ids, expected);
    }

    #[test]
    fn source_failure_flushes_then_resumes_from_delivered_position() {
        let mut script: Vec<Result<Pulled, String>> =
            (0..3).map(|i| Ok(Pulled::Line(access_line(i)))).collect();
        script.push(Err("broken pipe".to_string()));
        let opts = StreamOptions {
            batch_max_rows: 100,
            max_delay: Duration::from_millis(50),
        };
        let mut iter = ingest_stream::<AccessLogRecord, _>(scripted(script), opts);
        assert_eq!(iter.next().unwrap().unwrap().records.len(), 3);
        match iter.next().unwrap() {
            Err(IngestError::Stream { resume_from, .. }) => assert_eq!(resume_from, 3),
            other => panic!("expected stream error, got {other:?}"),
        }
        assert!(iter.next().is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn chunked_verification_equals_whole_file(
            bytes in proptest::collection::vec(any::<u8>(), 0..512),
            cuts in proptest::collection::btree_set(0usize..512, 0..6),
        ) {
            let mut points: Vec<usize> = cuts.into_iter().filter(|c| *c < bytes.len()).collect();
            points.push(bytes.len());
            points.sort_unstable();
            points.dedup();
            let mut manifests = Vec::new();
            let mut start = 0usize;
            for end in points {
                manifests.push(ChunkManifest::for_bytes(format!("c{start}"), &bytes[start..end]));
                start = end;
            }
            let whole = [ChunkManifest::for_bytes("whole", &bytes)];
            prop_assert!(verify_chunks(&bytes, &manifests));
            prop_assert!(verify_chunks(&bytes, &whole));
            if !bytes.is_empty() {
                let mut corrupted = bytes.clone();
                corrupted[0] ^= 0xff;
                prop_assert_eq!(
                    verify_chunks(&corrupted, &manifests),
                    verify_chunks(&corrupted, &whole)
                );
            }
        }
    }
}
