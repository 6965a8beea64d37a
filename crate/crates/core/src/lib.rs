//! Core engine for the opsforge log-analytics pipeline.
//!
//! The crate is organized along the pipeline stages:
//!
//! - [`logmodel`] — canonical record types for access and connectivity logs,
//!   tolerant JSON-lines parsing and UTC timestamp normalization.
//! - [`genload`] — deterministic synthetic workload generator with fault
//!   injection, used as ground truth by every downstream test.
//! - [`ingest`] — batch and streaming ingestion with MD5 chunk verification.
//! - [`slc`] — the SLC1 columnar file format (validity bitmaps, per-column
//!   DEFLATE blocks, embedded schema).
//! - [`curate`] — validation, cleaning, deduplication and partitioned
//!   staging with crash-safe overwrite-per-partition writes.
//! - [`features`] — the one-pass enrichment + multi-column group-by engine
//!   producing feature matrices.
//! - [`detect`] — per-feature Gaussian baselines, aggregated anomaly scores,
//!   threshold computation and anomaly-period extraction.
//! - [`isolate`] — feature ranking / component attribution and hierarchical
//!   connectivity failure localization.

pub mod curate;
pub mod detect;
pub mod features;
pub mod genload;
pub mod ingest;
pub mod isolate;
pub mod logmodel;
pub mod slc;
