//! Deterministic report emission.
//!
//! Every file starts with provenance (seed, config hash, library version):
//! CSV as leading `# key: value` comment lines, JSON as a `meta` object.
//! Interval and estimate columns carry 10 significant digits; replicate
//! dumps use shortest round-trip formatting so they re-parse exactly.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use mixedboot_core::engines::{BootstrapRun, ReplicateStatus};
use serde::Serialize;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

impl Provenance {
    pub fn new(seed: u64, config_hash: String) -> Self {
        Self { seed, config_hash, version: VERSION.into() }
    }

    fn csv_header(&self) -> String {
        format!(
            "# seed: {}\n# config_hash: {}\n# version: {}\n",
            self.seed, self.config_hash, self.version
        )
    }
}

/// Ten significant digits, scientific notation: enough to reconstruct any
/// reported interval to far below statistical resolution.
pub fn sig10(value: f64) -> String {
    format!("{value:.9e}")
}

/// Write `text` to the path, or to stdout when no path is given.
pub fn deliver(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes()).context("cannot write to stdout")
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub criterion: String,
    pub converged: bool,
    pub boundary: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub estimates: Vec<(String, f64)>,
}

pub fn fit_report_csv(prov: &Provenance, report: &FitReport) -> String {
    let mut out = prov.csv_header();
    out.push_str("field,value\n");
    let _ = writeln!(out, "criterion,{}", report.criterion);
    let _ = writeln!(out, "converged,{}", report.converged);
    let _ = writeln!(out, "boundary,{}", report.boundary);
    let _ = writeln!(out, "iterations,{}", report.iterations);
    let _ = writeln!(out, "loglik,{}", sig10(report.loglik));
    for (name, value) in &report.estimates {
        let _ = writeln!(out, "{name},{}", sig10(*value));
    }
    out
}

pub fn fit_report_json(prov: &Provenance, report: &FitReport) -> String {
    #[derive(Serialize)]
    struct Doc<'a> {
        meta: &'a Provenance,
        #[serde(flatten)]
        report: &'a FitReport,
    }
    let mut text =
        serde_json::to_string_pretty(&Doc { meta: prov, report }).expect("report serializes");
    text.push('\n');
    text
}

/// One interval row of a bootstrap report.
#[derive(Debug, Clone, Serialize)]
pub struct BootstrapRow {
    pub method: String,
    pub target: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub b_total: usize,
    pub b_failed: usize,
    /// Bootstrap p-value against 0; only user-configured statistics get one.
    pub p_value: Option<f64>,
}

pub fn bootstrap_report_csv(prov: &Provenance, rows: &[BootstrapRow]) -> String {
    let mut out = prov.csv_header();
    out.push_str("method,target,estimate,lower,upper,level,b_total,b_failed,p_value\n");
    for r in rows {
        let p = r.p_value.map_or(String::new(), sig10);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{p}",
            r.method,
            r.target,
            sig10(r.estimate),
            sig10(r.lower),
            sig10(r.upper),
            r.level,
            r.b_total,
            r.b_failed
        );
    }
    out
}

pub fn bootstrap_report_json(prov: &Provenance, rows: &[BootstrapRow]) -> String {
    #[derive(Serialize)]
    struct Doc<'a> {
        meta: &'a Provenance,
        results: &'a [BootstrapRow],
    }
    let mut text =
        serde_json::to_string_pretty(&Doc { meta: prov, results: rows }).expect("rows serialize");
    text.push('\n');
    text
}

/// One cell of the coverage grid.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageRow {
    pub method: String,
    pub scenario: String,
    pub target: String,
    /// None when no simulation produced an interval for this cell.
    pub coverage: Option<f64>,
    pub r: usize,
    pub b: usize,
    pub failures: usize,
}

pub fn coverage_report_csv(
    prov: &Provenance,
    truth: &[(String, f64)],
    rows: &[CoverageRow],
) -> String {
    let mut out = prov.csv_header();
    let truth_text: Vec<String> =
        truth.iter().map(|(name, value)| format!("{name}={value}")).collect();
    let _ = writeln!(out, "# truth: {}", truth_text.join(" "));
    out.push_str("method,scenario,target,coverage,R,B,failures\n");
    for r in rows {
        let cov = r.coverage.map_or(String::new(), |c| format!("{c}"));
        let _ = writeln!(
            out,
            "{},{},{},{cov},{},{},{}",
            r.method, r.scenario, r.target, r.r, r.b, r.failures
        );
    }
    out
}

pub fn coverage_report_json(
    prov: &Provenance,
    truth: &[(String, f64)],
    rows: &[CoverageRow],
) -> String {
    #[derive(Serialize)]
    struct Doc<'a> {
        meta: &'a Provenance,
        truth: Vec<TruthEntry<'a>>,
        results: &'a [CoverageRow],
    }
    #[derive(Serialize)]
    struct TruthEntry<'a> {
        target: &'a str,
        value: f64,
    }
    let doc = Doc {
        meta: prov,
        truth: truth.iter().map(|(t, v)| TruthEntry { target: t, value: *v }).collect(),
        results: rows,
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("grid serializes");
    text.push('\n');
    text
}

/// Full replicate matrix of one bootstrap run, shortest round-trip floats.
/// Failed replicates keep their row with empty value cells.
pub fn replicate_dump_csv(prov: &Provenance, run: &BootstrapRun) -> String {
    let mut out = prov.csv_header();
    out.push_str("b,status");
    let names = mixedboot_core::engines::theta_column_names(run.p);
    for name in &names {
        let _ = write!(out, ",{name}");
    }
    for name in &run.stat_names {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for b in 0..run.b {
        let status = match run.status[b] {
            ReplicateStatus::Ok => "ok",
            ReplicateStatus::Boundary => "boundary",
            ReplicateStatus::Failed => "failed",
        };
        let _ = write!(out, "{b},{status}");
        let failed = run.status[b] == ReplicateStatus::Failed;
        for &value in run.theta_row(b) {
            if failed {
                out.push(',');
            } else {
                let _ = write!(out, ",{value}");
            }
        }
        for s in 0..run.stat_names.len() {
            let value = run.stats_star[b * run.stat_names.len() + s];
            if failed {
                out.push(',');
            } else {
                let _ = write!(out, ",{value}");
            }
        }
        out.push('\n');
    }
    out
}
