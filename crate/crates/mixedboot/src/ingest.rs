//! Clustered-data CSV ingestion and emission.
//!
//! Input schema: header `cluster_id,y,x1,...,xK`; one row per observation;
//! decimal-point reals; no missing cells. Cluster indices follow first
//! appearance of each id, and the intercept column is prepended, so the
//! design width is K + 1.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mixedboot_core::ClusteredDataset;

/// Read a dataset, grouping rows by cluster id in order of first appearance.
pub fn read_dataset_csv(path: &Path) -> Result<ClusteredDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;

    let headers = reader.headers().context("cannot read header")?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.len() < 2 || names[0] != "cluster_id" || names[1] != "y" {
        bail!("header must start with cluster_id,y (got {})", names.join(","));
    }
    for (k, name) in names.iter().enumerate().skip(2) {
        let expected = format!("x{}", k - 1);
        if *name != expected {
            bail!("covariate column {k} must be named {expected}, got '{name}'");
        }
    }
    let n_cov = names.len() - 2;
    let p = n_cov + 1;

    // Rows bucketed per cluster id, ids in first-appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut buckets: Vec<Vec<(f64, Vec<f64>)>> = Vec::new();

    for record in reader.records() {
        let record = record.context("malformed CSV record")?;
        let line = record.position().map_or(0, |pos| pos.line());
        if record.len() != names.len() {
            bail!("line {line}: expected {} fields, got {}", names.len(), record.len());
        }
        let id = record[0].to_string();
        if id.is_empty() {
            bail!("line {line}: empty cluster_id");
        }
        let parse_cell = |col: usize| -> Result<f64> {
            let raw = &record[col];
            if raw.is_empty() {
                bail!("line {line}: missing value in column {}", names[col]);
            }
            let value: f64 = raw
                .parse()
                .with_context(|| format!("line {line}: non-numeric {} value '{raw}'", names[col]))?;
            if !value.is_finite() {
                bail!("line {line}: non-finite {} value '{raw}'", names[col]);
            }
            Ok(value)
        };
        let y = parse_cell(1)?;
        let mut x_row = Vec::with_capacity(p);
        x_row.push(1.0);
        for col in 2..names.len() {
            x_row.push(parse_cell(col)?);
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            buckets.push(Vec::new());
            buckets.len() - 1
        });
        buckets[slot].push((y, x_row));
    }

    if buckets.len() < 2 {
        bail!("need at least 2 clusters, found {}", buckets.len());
    }
    let sizes: Vec<usize> = buckets.iter().map(|b| b.len()).collect();
    let mut y = Vec::new();
    let mut x = Vec::new();
    for bucket in buckets {
        for (yi, xi) in bucket {
            y.push(yi);
            x.extend(xi);
        }
    }
    ClusteredDataset::new(y, x, p, &sizes).map_err(Into::into)
}

/// Emit a dataset in the ingestion schema. Requires the leading intercept
/// column (it is dropped on write, mirroring ingestion). Values use shortest
/// round-trip formatting, so write-then-read reproduces the dataset exactly.
pub fn write_dataset_csv(data: &ClusteredDataset, path: &Path) -> Result<()> {
    let p = data.p();
    let mut text = String::from("cluster_id,y");
    for k in 1..p {
        write!(text, ",x{k}").unwrap();
    }
    text.push('\n');
    for i in 0..data.n_clusters() {
        for j in data.cluster_rows(i) {
            let row = data.x_row(j);
            if row[0] != 1.0 {
                bail!("row {j} lacks the leading intercept column");
            }
            write!(text, "c{i},{}", data.y()[j]).unwrap();
            for value in &row[1..] {
                write!(text, ",{value}").unwrap();
            }
            text.push('\n');
        }
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}
