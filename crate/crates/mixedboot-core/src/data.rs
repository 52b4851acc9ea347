//! Clustered data model and parameter vector.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Which Gaussian working-likelihood criterion a fit maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    Ml,
    Reml,
}

impl Criterion {
    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Ml => "ml",
            Criterion::Reml => "reml",
        }
    }
}

impl core::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ml" => Ok(Criterion::Ml),
            "reml" => Ok(Criterion::Reml),
            other => Err(Error::Invalid(format!(
                "unknown criterion {other:?} (expected ml or reml)"
            ))),
        }
    }
}

/// Model parameters: fixed effects plus the two variance components.
///
/// `sigma2_u >= 0` (the boundary is a legal estimate) and `sigma2_e > 0`.
/// The signal-to-noise ratio `lambda = sigma2_u / sigma2_e` is derived, not
/// stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub beta: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_e: f64,
}

impl ThetaVector {
    pub fn new(beta: Vec<f64>, sigma2_u: f64, sigma2_e: f64) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Invalid("beta must be non-empty".into()));
        }
        if !(sigma2_u >= 0.0) || !sigma2_u.is_finite() {
            return Err(Error::Invalid(format!("sigma2_u = {sigma2_u} must be >= 0")));
        }
        if !(sigma2_e > 0.0) || !sigma2_e.is_finite() {
            return Err(Error::Invalid(format!("sigma2_e = {sigma2_e} must be > 0")));
        }
        Ok(Self { beta, sigma2_u, sigma2_e })
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn lambda(&self) -> f64 {
        self.sigma2_u / self.sigma2_e
    }

    /// Flat layout `[beta_0, .., beta_{p-1}, sigma2_u, sigma2_e]`, the column
    /// order used by bootstrap replicate matrices.
    pub fn to_row(&self) -> Vec<f64> {
        let mut row = self.beta.clone();
        row.push(self.sigma2_u);
        row.push(self.sigma2_e);
        row
    }
}

/// A dataset of `D >= 2` clusters stored contiguously, cluster by cluster.
///
/// `x` is row-major `N x p` with the intercept as column 0; the block-of-ones
/// random-intercept design is implicit in the cluster layout and never
/// materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    y: Vec<f64>,
    x: Vec<f64>,
    p: usize,
    /// `D + 1` row offsets; cluster `i` occupies rows `starts[i]..starts[i+1]`.
    starts: Vec<usize>,
}

impl ClusteredDataset {
    /// Build from stacked responses/design plus per-cluster sizes.
    pub fn new(y: Vec<f64>, x: Vec<f64>, p: usize, cluster_sizes: &[usize]) -> Result<Self> {
        if cluster_sizes.len() < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 clusters, got {}",
                cluster_sizes.len()
            )));
        }
        if cluster_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Invalid("cluster sizes must be >= 1".into()));
        }
        let n_total: usize = cluster_sizes.iter().sum();
        if y.len() != n_total {
            return Err(Error::Invalid(format!(
                "responses have {} rows but cluster sizes sum to {n_total}",
                y.len()
            )));
        }
        if p == 0 || x.len() != n_total * p {
            return Err(Error::Invalid(format!(
                "design has {} entries, expected {n_total} x {p}",
                x.len()
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite value in data".into()));
        }
        let mut starts = Vec::with_capacity(cluster_sizes.len() + 1);
        let mut acc = 0;
        starts.push(0);
        for &n in cluster_sizes {
            acc += n;
            starts.push(acc);
        }
        Ok(Self { y, x, p, starts })
    }

    pub fn n_clusters(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn n_obs(&self) -> usize {
        *self.starts.last().unwrap()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn cluster_size(&self, i: usize) -> usize {
        self.starts[i + 1] - self.starts[i]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        (0..self.n_clusters()).map(|i| self.cluster_size(i)).collect()
    }

    /// Row range of cluster `i`.
    pub fn cluster_rows(&self, i: usize) -> core::ops::Range<usize> {
        self.starts[i]..self.starts[i + 1]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y_cluster(&self, i: usize) -> &[f64] {
        &self.y[self.cluster_rows(i)]
    }

    /// Design row `j` (global row index).
    pub fn x_row(&self, j: usize) -> &[f64] {
        &self.x[j * self.p..(j + 1) * self.p]
    }

    /// Same clusters and design, different responses.
    pub fn with_responses(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.n_obs() {
            return Err(Error::Invalid(format!(
                "replacement responses have {} rows, expected {}",
                y.len(),
                self.n_obs()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite value in responses".into()));
        }
        Ok(Self { y, x: self.x.clone(), p: self.p, starts: self.starts.clone() })
    }

    /// Human-readable shape summary for diagnostics.
    pub fn shape(&self) -> String {
        format!(
            "D={}, N={}, p={}",
            self.n_clusters(),
            self.n_obs(),
            self.p
        )
    }
}
