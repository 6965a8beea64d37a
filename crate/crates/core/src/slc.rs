//! SLC1 — the staged columnar file format.
//!
//! Layout (bit-exact):
//!
//! ```text
//! magic "SLC1"
//! u32 little-endian header length
//! UTF-8 JSON header: {"schema":[{"name":..,"type":"i64"|"f64"|"str"|"bool"},..],
//!                     "rows":N,
//!                     "columns":[{"name":..,"offset":..,"comp_len":..,"raw_len":..},..]}
//! per-column blocks, each DEFLATE-compressed
//! ```
//!
//! `offset` is relative to the end of the header (the first block sits at
//! offset 0). The raw (uncompressed) encoding of a column is a validity
//! bitmap — one bit per row in little-endian bit order, padded to a whole
//! byte — followed by the values: i64/f64 as fixed-width little-endian,
//! bool as packed bits, str as a u32 little-endian end-offsets array
//! followed by the concatenated UTF-8 bytes. Null slots are zero-filled.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use md5::{Digest, Md5};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SLC1";

#[derive(Debug, Error)]
pub enum SlcError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an SLC1 file (bad magic)")]
    BadMagic,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("corrupt column data: {0}")]
    Corrupt(String),
    #[error("checksum mismatch for column '{column}'")]
    ChecksumMismatch { column: String },
    #[error("unknown column '{0}'")]
    UnknownColumn(String),
    #[error("column '{column}' has type {actual}, expected {expected}")]
    TypeMismatch {
        column: String,
        expected: ColumnType,
        actual: ColumnType,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColumnType {
    #[serde(rename = "i64")]
    I64,
    #[serde(rename = "f64")]
    F64,
    #[serde(rename = "str")]
    Str,
    #[serde(rename = "bool")]
    Bool,
}

impl std::fmt::Display for ColumnType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ColumnType::I64 => "i64",
            ColumnType::F64 => "f64",
            ColumnType::Str => "str",
            ColumnType::Bool => "bool",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub ty: ColumnType,
}

impl Field {
    pub fn new(name: impl Into<String>, ty: ColumnType) -> Self {
        Field {
            name: name.into(),
            ty,
        }
    }
}

/// Typed value vectors backing a column. Slots for null rows hold the
/// type's zero value; the validity bitmap is authoritative.
#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    I64(Vec<i64>),
    F64(Vec<f64>),
    Str(Vec<String>),
    Bool(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub field: Field,
    pub validity: Vec<bool>,
    pub values: Values,
}

impl Column {
    pub fn len(&self) -> usize {
        self.validity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.validity.is_empty()
    }

    pub fn is_null(&self, row: usize) -> bool {
        !self.validity[row]
    }

    pub fn i64_at(&self, row: usize) -> Option<i64> {
        match &self.values {
            Values::I64(v) if self.validity[row] => Some(v[row]),
            _ => None,
        }
    }

    pub fn f64_at(&self, row: usize) -> Option<f64> {
        match &self.values {
            Values::F64(v) if self.validity[row] => Some(v[row]),
            _ => None,
        }
    }

    pub fn str_at(&self, row: usize) -> Option<&str> {
        match &self.values {
            Values::Str(v) if self.validity[row] => Some(v[row].as_str()),
            _ => None,
        }
    }

    pub fn bool_at(&self, row: usize) -> Option<bool> {
        match &self.values {
            Values::Bool(v) if self.validity[row] => Some(v[row]),
            _ => None,
        }
    }

    /// Numeric view: i64 columns widen to f64, bool maps to 0/1.
    pub fn numeric_at(&self, row: usize) -> Option<f64> {
        if !self.validity[row] {
            return None;
        }
        match &self.values {
            Values::I64(v) => Some(v[row] as f64),
            Values::F64(v) => Some(v[row]),
            Values::Bool(v) => Some(if v[row] { 1.0 } else { 0.0 }),
            Values::Str(_) => None,
        }
    }
}

/// An in-memory columnar table; all columns share the same row count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    columns: Vec<Column>,
}

impl Table {
    pub fn new(columns: Vec<Column>) -> Result<Self, SlcError> {
        if let Some(first) = columns.first() {
            let rows = first.len();
            if let Some(bad) = columns.iter().find(|c| c.len() != rows) {
                return Err(SlcError::Corrupt(format!(
                    "column '{}' has {} rows, expected {}",
                    bad.field.name,
                    bad.len(),
                    rows
                )));
            }
        }
        Ok(Table { columns })
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Column::len)
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn schema(&self) -> Vec<Field> {
        self.columns.iter().map(|c| c.field.clone()).collect()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.field.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Column, SlcError> {
        self.column(name)
            .ok_or_else(|| SlcError::UnknownColumn(name.to_string()))
    }

    pub fn require_typed(&self, name: &str, ty: ColumnType) -> Result<&Column, SlcError> {
        let col = self.require(name)?;
        if col.field.ty != ty {
            return Err(SlcError::TypeMismatch {
                column: name.to_string(),
                expected: ty,
                actual: col.field.ty,
            });
        }
        Ok(col)
    }

    /// Appends a column; it must match the current row count.
    pub fn push_column(&mut self, column: Column) -> Result<(), SlcError> {
        if !self.columns.is_empty() && column.len() != self.rows() {
            return Err(SlcError::Corrupt(format!(
                "column '{}' has {} rows, expected {}",
                column.field.name,
                column.len(),
                self.rows()
            )));
        }
        self.columns.push(column);
        Ok(())
    }
}

/// Incremental, null-aware column construction.
#[derive(Debug, Clone)]
pub struct ColumnBuilder {
    field: Field,
    validity: Vec<bool>,
    values: Values,
    str_bytes: usize,
}

impl ColumnBuilder {
    pub fn new(field: Field) -> Self {
        let values = match field.ty {
            ColumnType::I64 => Values::I64(Vec::new()),
            ColumnType::F64 => Values::F64(Vec::new()),
            ColumnType::Str => Values::Str(Vec::new()),
            ColumnType::Bool => Values::Bool(Vec::new()),
        };
        ColumnBuilder {
            field,
            validity: Vec::new(),
            values,
            str_bytes: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.validity.len()
    }

    /// Size of this column's raw encoding if finished now.
    pub fn raw_len(&self) -> usize {
        let rows = self.validity.len();
        let bitmap = rows.div_ceil(8);
        bitmap
            + match self.field.ty {
                ColumnType::I64 | ColumnType::F64 => rows * 8,
                ColumnType::Bool => bitmap,
                ColumnType::Str => rows * 4 + self.str_bytes,
            }
    }

    pub fn push_i64(&mut self, v: Option<i64>) {
        match &mut self.values {
            Values::I64(vec) => {
                vec.push(v.unwrap_or(0));
                self.validity.push(v.is_some());
            }
            _ => panic!("push_i64 on non-i64 column '{}'", self.field.name),
        }
    }

    pub fn push_f64(&mut self, v: Option<f64>) {
        match &mut self.values {
            Values::F64(vec) => {
                vec.push(v.unwrap_or(0.0));
                self.validity.push(v.is_some());
            }
            _ => panic!("push_f64 on non-f64 column '{}'", self.field.name),
        }
    }

    pub fn push_str(&mut self, v: Option<&str>) {
        match &mut self.values {
            Values::Str(vec) => {
                let s = v.unwrap_or("");
                self.str_bytes += s.len();
                vec.push(s.to_string());
                self.validity.push(v.is_some());
            }
            _ => panic!("push_str on non-str column '{}'", self.field.name),
        }
    }

    pub fn push_bool(&mut self, v: Option<bool>) {
        match &mut self.values {
            Values::Bool(vec) => {
                vec.push(v.unwrap_or(false));
                self.validity.push(v.is_some());
            }
            _ => panic!("push_bool on non-bool column '{}'", self.field.name),
        }
    }

    pub fn finish(self) -> Column {
        Column {
            field: self.field,
            validity: self.validity,
            values: self.values,
        }
    }
}

pub fn builders_for(schema: &[Field]) -> Vec<ColumnBuilder> {
    schema.iter().map(|f| ColumnBuilder::new(f.clone())).collect()
}

pub fn finish_builders(builders: Vec<ColumnBuilder>) -> Result<Table, SlcError> {
    Table::new(builders.into_iter().map(ColumnBuilder::finish).collect())
}

#[derive(Serialize, Deserialize)]
struct HeaderField {
    name: String,
    #[serde(rename = "type")]
    ty: ColumnType,
}

#[derive(Serialize, Deserialize)]
struct HeaderColumn {
    name: String,
    offset: u64,
    comp_len: u64,
    raw_len: u64,
}

#[derive(Serialize, Deserialize)]
struct HeaderDoc {
    schema: Vec<HeaderField>,
    rows: u64,
    columns: Vec<HeaderColumn>,
}

/// Per-column accounting returned by [`write_table`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub name: String,
    pub comp_len: u64,
    pub raw_len: u64,
    pub md5_hex: String,
}

/// Result of writing one SLC1 file.
#[derive(Debug, Clone)]
pub struct WrittenFile {
    pub rows: u64,
    pub byte_len: u64,
    pub columns: Vec<ColumnSummary>,
}

fn set_bit(bits: &mut [u8], idx: usize) {
    bits[idx / 8] |= 1 << (idx % 8);
}

fn get_bit(bits: &[u8], idx: usize) -> bool {
    (bits[idx / 8] >> (idx % 8)) & 1 == 1
}

fn pack_bits(flags: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; flags.len().div_ceil(8)];
    for (i, &b) in flags.iter().enumerate() {
        if b {
            set_bit(&mut out, i);
        }
    }
    out
}

/// Raw (uncompressed) encoding of one column.
pub fn encode_column(column: &Column) -> Result<Vec<u8>, SlcError> {
    let mut out = pack_bits(&column.validity);
    match &column.values {
        Values::I64(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Values::F64(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Values::Bool(v) => {
            out.extend_from_slice(&pack_bits(v));
        }
        Values::Str(v) => {
            let total: usize = v.iter().map(String::len).sum();
            if total > u32::MAX as usize {
                return Err(SlcError::Corrupt(format!(
                    "string column '{}' exceeds u32 byte range",
                    column.field.name
                )));
            }
            let mut end = 0u32;
            for s in v {
                end += s.len() as u32;
                out.extend_from_slice(&end.to_le_bytes());
            }
            for s in v {
                out.extend_from_slice(s.as_bytes());
            }
        }
    }
    Ok(out)
}

fn decode_column(field: &Field, rows: usize, raw: &[u8]) -> Result<Column, SlcError> {
    let bitmap_len = rows.div_ceil(8);
    let need = |n: usize| -> Result<(), SlcError> {
        if raw.len() < n {
            Err(SlcError::Corrupt(format!(
                "column '{}' truncated: need {} bytes, have {}",
                field.name,
                n,
                raw.len()
            )))
        } else {
            Ok(())
        }
    };
    need(bitmap_len)?;
    let validity: Vec<bool> = (0..rows).map(|i| get_bit(&raw[..bitmap_len], i)).collect();
    let body = &raw[bitmap_len..];
    let values = match field.ty {
        ColumnType::I64 => {
            need(bitmap_len + rows * 8)?;
            Values::I64(
                body.chunks_exact(8)
                    .take(rows)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        ColumnType::F64 => {
            need(bitmap_len + rows * 8)?;
            Values::F64(
                body.chunks_exact(8)
                    .take(rows)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        ColumnType::Bool => {
            need(bitmap_len + bitmap_len)?;
            Values::Bool((0..rows).map(|i| get_bit(body, i)).collect())
        }
        ColumnType::Str => {
            need(bitmap_len + rows * 4)?;
            let mut ends = Vec::with_capacity(rows);
            for c in body.chunks_exact(4).take(rows) {
                ends.push(u32::from_le_bytes(c.try_into().unwrap()) as usize);
            }
            let text = &body[rows * 4..];
            let total = ends.last().copied().unwrap_or(0);
            if text.len() < total {
                return Err(SlcError::Corrupt(format!(
                    "string column '{}' body truncated",
                    field.name
                )));
            }
            let mut start = 0usize;
            let mut vals = Vec::with_capacity(rows);
            for &end in &ends {
                if end < start || end > total {
                    return Err(SlcError::Corrupt(format!(
                        "string column '{}' has non-monotonic offsets",
                        field.name
                    )));
                }
                let s = std::str::from_utf8(&text[start..end]).map_err(|_| {
                    SlcError::Corrupt(format!("string column '{}' is not UTF-8", field.name))
                })?;
                vals.push(s.to_string());
                start = end;
            }
            Values::Str(vals)
        }
    };
    Ok(Column {
        field: field.clone(),
        validity,
        values,
    })
}

fn md5_hex(bytes: &[u8]) -> String {
    let mut h = Md5::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Writes a table to `path`, returning per-column sizes and checksums.
pub fn write_table(path: &Path, table: &Table, level: u32) -> Result<WrittenFile, SlcError> {
    let rows = table.rows() as u64;
    let mut blocks = Vec::with_capacity(table.columns().len());
    let mut header_cols = Vec::with_capacity(table.columns().len());
    let mut summaries = Vec::with_capacity(table.columns().len());
    let mut offset = 0u64;
    for col in table.columns() {
        let raw = encode_column(col)?;
        let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(level));
        enc.write_all(&raw)?;
        let comp = enc.finish()?;
        header_cols.push(HeaderColumn {
            name: col.field.name.clone(),
            offset,
            comp_len: comp.len() as u64,
            raw_len: raw.len() as u64,
        });
        summaries.push(ColumnSummary {
            name: col.field.name.clone(),
            comp_len: comp.len() as u64,
            raw_len: raw.len() as u64,
            md5_hex: md5_hex(&comp),
        });
        offset += comp.len() as u64;
        blocks.push(comp);
    }
    let header = HeaderDoc {
        schema: table
            .columns()
            .iter()
            .map(|c| HeaderField {
                name: c.field.name.clone(),
                ty: c.field.ty,
            })
            .collect(),
        rows,
        columns: header_cols,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| SlcError::BadHeader(e.to_string()))?;

    let mut file = File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for block in &blocks {
        file.write_all(block)?;
    }
    file.flush()?;
    let byte_len = 8 + header_bytes.len() as u64 + offset;
    Ok(WrittenFile {
        rows,
        byte_len,
        columns: summaries,
    })
}

/// Reads a table back, decompressing only the projected columns.
///
/// `projection = None` reads every column. When `checksums` is given,
/// each read block's MD5 must match the recorded digest. Projected
/// columns come back in schema order.
pub fn read_table(
    path: &Path,
    projection: Option<&[String]>,
    checksums: Option<&BTreeMap<String, String>>,
) -> Result<Table, SlcError> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SlcError::BadMagic);
    }
    let mut len_buf = [0u8; 4];
    file.read_exact(&mut len_buf)?;
    let header_len = u32::from_le_bytes(len_buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: HeaderDoc = serde_json::from_slice(&header_bytes)
        .map_err(|e| SlcError::BadHeader(e.to_string()))?;
    let rows = header.rows as usize;
    let block_base = 8 + header_len as u64;

    if let Some(proj) = projection {
        for name in proj {
            if !header.schema.iter().any(|f| &f.name == name) {
                return Err(SlcError::UnknownColumn(name.clone()));
            }
        }
    }

    let mut columns = Vec::new();
    for (field, loc) in header.schema.iter().zip(header.columns.iter()) {
        if field.name != loc.name {
            return Err(SlcError::BadHeader(
                "schema and column lists disagree".to_string(),
            ));
        }
        if let Some(proj) = projection {
            if !proj.iter().any(|n| n == &field.name) {
                continue;
            }
        }
        file.seek(SeekFrom::Start(block_base + loc.offset))?;
        let mut comp = vec![0u8; loc.comp_len as usize];
        file.read_exact(&mut comp)?;
        if let Some(sums) = checksums {
            if let Some(expected) = sums.get(&field.name) {
                if md5_hex(&comp) != *expected {
                    return Err(SlcError::ChecksumMismatch {
                        column: field.name.clone(),
                    });
                }
            }
        }
        let mut raw = Vec::with_capacity(loc.raw_len as usize);
        DeflateDecoder::new(comp.as_slice()).read_to_end(&mut raw)?;
        if raw.len() as u64 != loc.raw_len {
            return Err(SlcError::Corrupt(format!(
                "column '{}' inflated to {} bytes, header says {}",
                field.name,
                raw.len(),
                loc.raw_len
            )));
        }
        let f = Field::new(field.name.clone(), field.ty);
        columns.push(decode_column(&f, rows, &raw)?);
    }
    Table::new(columns)
}

/// Row count and schema without touching any column block.
pub fn read_header(path: &Path) -> Result<(u64, Vec<Field>), SlcError> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SlcError::BadMagic);
    }
    let mut len_buf = [0u8; 4];
    file.read_exact(&mut len_buf)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len_buf) as usize];
    file.read_exact(&mut header_bytes)?;
    let header: HeaderDoc = serde_json::from_slice(&header_bytes)
        .map_err(|e| SlcError::BadHeader(e.to_string()))?;
    Ok((
        header.rows,
        header
            .schema
            .into_iter()
            .map(|f| Field::new(f.name, f.ty))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_table() -> Table {
        let mut ids = ColumnBuilder::new(Field::new("id", ColumnType::I64));
        ids.push_i64(Some(1));
        ids.push_i64(None);
        ids.push_i64(Some(-7));
        let mut names = ColumnBuilder::new(Field::new("name", ColumnType::Str));
        names.push_str(Some("ab"));
        names.push_str(Some(""));
        names.push_str(None);
        let mut score = ColumnBuilder::new(Field::new("score", ColumnType::F64));
        score.push_f64(Some(1.5));
        score.push_f64(Some(-0.25));
        score.push_f64(None);
        let mut ok = ColumnBuilder::new(Field::new("ok", ColumnType::Bool));
        ok.push_bool(Some(true));
        ok.push_bool(None);
        ok.push_bool(Some(false));
        Table::new(vec![ids.finish(), names.finish(), score.finish(), ok.finish()]).unwrap()
    }

    #[test]
    fn raw_encoding_is_bit_exact() {
        let table = sample_table();
        // id column: validity 0b101 = 0x05, then 3 little-endian i64 slots
        // (null slot zero-filled).
        let raw = encode_column(&table.columns()[0]).unwrap();
        let mut expected = vec![0x05u8];
        expected.extend_from_slice(&1i64.to_le_bytes());
        expected.extend_from_slice(&0i64.to_le_bytes());
        expected.extend_from_slice(&(-7i64).to_le_bytes());
        assert_eq!(raw, expected);

        // name column: validity 0b011 = 0x03, end offsets [2,2,2], bytes "ab".
        let raw = encode_column(&table.columns()[1]).unwrap();
        let mut expected = vec![0x03u8];
        for end in [2u32, 2, 2] {
            expected.extend_from_slice(&end.to_le_bytes());
        }
        expected.extend_from_slice(b"ab");
        assert_eq!(raw, expected);

        // bool column: validity 0b101 = 0x05, packed values 0b001 = 0x01.
        let raw = encode_column(&table.columns()[3]).unwrap();
        assert_eq!(raw, vec![0x05u8, 0x01]);
    }

    #[test]
    fn file_prefix_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.slc");
        let table = sample_table();
        let written = write_table(&path, &table, 6).unwrap();
        assert_eq!(written.rows, 3);

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        assert_eq!(header["rows"], 3);
        assert_eq!(header["schema"][0]["type"], "i64");
        assert_eq!(written.byte_len, bytes.len() as u64);

        let back = read_table(&path, None, None).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn projection_reads_requested_columns_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.slc");
        write_table(&path, &sample_table(), 6).unwrap();
        let proj = vec!["score".to_string(), "id".to_string()];
        let back = read_table(&path, Some(&proj), None).unwrap();
        // Schema order, not projection order.
        let names: Vec<_> = back.schema().iter().map(|f| f.name.clone()).collect();
        assert_eq!(names, vec!["id", "score"]);
        assert_eq!(back.rows(), 3);
    }

    #[test]
    fn checksum_mismatch_names_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.slc");
        let written = write_table(&path, &sample_table(), 6).unwrap();
        let mut sums: BTreeMap<String, String> = written
            .columns
            .iter()
            .map(|c| (c.name.clone(), c.md5_hex.clone()))
            .collect();
        read_table(&path, None, Some(&sums)).unwrap();
        sums.insert("score".to_string(), "0".repeat(32));
        match read_table(&path, None, Some(&sums)) {
            Err(SlcError::ChecksumMismatch { column }) => assert_eq!(column, "score"),
            other => panic!("expected checksum mismatch, got {other:?}"),
        }
    }

    #[test]
    fn unknown_projected_column_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.slc");
        write_table(&path, &sample_table(), 6).unwrap();
        let proj = vec!["nope".to_string()];
        assert!(matches!(
            read_table(&path, Some(&proj), None),
            Err(SlcError::UnknownColumn(_))
        ));
    }

    #[test]
    fn empty_table_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.slc");
        let table = Table::new(vec![
            ColumnBuilder::new(Field::new("a", ColumnType::I64)).finish(),
            ColumnBuilder::new(Field::new("b", ColumnType::Str)).finish(),
        ])
        .unwrap();
        write_table(&path, &table, 6).unwrap();
        let back = read_table(&path, None, None).unwrap();
        assert_eq!(back.rows(), 0);
        assert_eq!(back.schema().len(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn arbitrary_tables_roundtrip(
            rows in proptest::collection::vec(
                (any::<Option<i64>>(),
                 proptest::option::of(-1e12f64..1e12),
                 proptest::option::of("[a-z0-9]{0,12}"),
                 any::<Option<bool>>()),
                0..200,
            )
        ) {
            let mut a = ColumnBuilder::new(Field::new("a", ColumnType::I64));
            let mut b = ColumnBuilder::new(Field::new("b", ColumnType::F64));
            let mut c = ColumnBuilder::new(Field::new("c", ColumnType::Str));
            let mut d = ColumnBuilder::new(Field::new("d", ColumnType::Bool));
            for (x, y, s, t) in &rows {
                a.push_i64(*x);
                b.push_f64(*y);
                c.push_str(s.as_deref());
                d.push_bool(*t);
            }
            let table = Table::new(vec![a.finish(), b.finish(), c.finish(), d.finish()]).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.slc");
            write_table(&path, &table, 1).unwrap();
            let back = read_table(&path, None, None).unwrap();
            prop_assert_eq!(back, table);
        }
    }
}
