//! CSV reports: per-prompt metrics, divergence norms and sample points.
//!
//! Comma separated with a header row and LF line endings.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::eval::{MetricsReport, NormRow};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub concept: usize,
    pub name: String,
    pub class: String,
    pub n: usize,
    pub hits: usize,
    pub accuracy: f64,
    pub route: String,
    pub w: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub label: String,
    pub x: f32,
    pub y: f32,
}

fn parse_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse { line, msg: e.to_string() }
}

fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(parse_error)?;
    for r in rows {
        w.serialize(r).map_err(parse_error)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn from_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(parse_error)).collect()
}

pub fn metrics_rows(report: &MetricsReport) -> Vec<MetricsRow> {
    report
        .prompts
        .iter()
        .map(|p| MetricsRow {
            concept: p.concept.0,
            name: p.name.clone(),
            class: p.class.to_string(),
            n: p.n,
            hits: p.hits,
            accuracy: p.accuracy(),
            route: p.route.to_string(),
            w: p.weight,
        })
        .collect()
}

pub fn metrics_csv(report: &MetricsReport) -> Result<Vec<u8>> {
    to_csv(&metrics_rows(report), &["concept", "name", "class", "n", "hits", "accuracy", "route", "w"])
}

pub fn write_metrics_csv(path: impl AsRef<Path>, report: &MetricsReport) -> Result<()> {
    write_atomic(path.as_ref(), &metrics_csv(report)?)
}

pub fn norms_csv(rows: &[NormRow]) -> Result<Vec<u8>> {
    to_csv(rows, &["steps", "repeats", "seed", "mean_erased", "mean_neutral", "mean_retained", "seconds"])
}

pub fn write_norms_csv(path: impl AsRef<Path>, rows: &[NormRow]) -> Result<()> {
    write_atomic(path.as_ref(), &norms_csv(rows)?)
}

pub fn parse_norms_csv(text: &str) -> Result<Vec<NormRow>> {
    from_csv(text)
}

/// One row per point of a `[n x 2]` tensor, all with the same label.
pub fn sample_rows(label: &str, points: &Tensor) -> Result<Vec<SampleRow>> {
    if points.shape().len() != 2 || points.cols() != 2 {
        return Err(crate::error::shape(format!("expected [n x 2] points, got {:?}", points.shape())));
    }
    Ok((0..points.rows()).map(|i| SampleRow { label: label.to_string(), x: points.get(i, 0), y: points.get(i, 1) }).collect())
}

pub fn samples_csv(rows: &[SampleRow]) -> Result<Vec<u8>> {
    to_csv(rows, &["label", "x", "y"])
}

pub fn write_samples_csv(path: impl AsRef<Path>, rows: &[SampleRow]) -> Result<()> {
    write_atomic(path.as_ref(), &samples_csv(rows)?)
}

pub fn parse_samples_csv(text: &str) -> Result<Vec<SampleRow>> {
    from_csv(text)
}
