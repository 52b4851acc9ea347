//! ML/REML fitting of the random-intercept model under a Gaussian working
//! likelihood, with beta profiled out by GLS.
//!
//! Per-cluster covariance blocks are never materialized: with
//! `Sigma_i = sigma2_e I + sigma2_u 11'`,
//!
//! ```text
//! Sigma_i^-1 = sigma_e^-2 (I - a_i 11'),   a_i = sigma2_u / (sigma2_e + n_i sigma2_u)
//! log|Sigma_i| = (n_i - 1) log sigma2_e + log(sigma2_e + n_i sigma2_u)
//! ```
//!
//! so one likelihood-and-gradient evaluation costs O(N p) plus an O(D p^2) GLS
//! solve. All additive constants (including the 2*pi terms) are dropped, in
//! both ML and REML, so only differences of values are meaningful.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{ClusteredDataset, Criterion, ThetaVector};
use crate::error::{Error, Result};
use crate::math;

/// Optimizer controls. Defaults follow the documented convergence contract:
/// stop when the relative log-likelihood change is <= `rel_tol` *and* the
/// projected-gradient norm is <= `grad_tol`, give up after `max_iter`.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub grad_tol: f64,
    /// Lower bound enforced on sigma2_e; sigma2_u is bounded at exactly 0.
    pub var_floor: f64,
    /// Try the extra fallback starts in addition to the method-of-moments one.
    pub multi_start: bool,
    /// Extra warm start, e.g. the original fit when refitting a bootstrap
    /// replicate.
    pub start_hint: Option<(f64, f64)>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-10,
            grad_tol: 1e-8,
            var_floor: 1e-12,
            multi_start: true,
            start_hint: None,
        }
    }
}

/// A fitted model: parameter estimates plus every residual quantity the
/// resampling schemes consume.
///
/// Flat vectors follow the dataset's row order; `u_hat`/`u_eblup` follow the
/// cluster order. Within every cluster the centered residuals `e_hat` sum to
/// zero by construction, and for a singleton cluster the single `e_hat` entry
/// is exactly zero.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: ThetaVector,
    pub criterion: Criterion,
    pub loglik: f64,
    /// Marginal residuals `r_ij = y_ij - x_ij' beta_hat` (length N).
    pub marginal_residuals: Vec<f64>,
    /// Cluster-mean predictors `u_hat_i = mean_j r_ij` (length D).
    pub u_hat: Vec<f64>,
    /// Within-cluster residuals `e_hat_ij = r_ij - u_hat_i` (length N).
    pub e_hat: Vec<f64>,
    /// Shrunken predictors `u_tilde_i = k_i u_hat_i` with
    /// `k_i = n_i sigma2_u / (sigma2_e + n_i sigma2_u)` (length D).
    pub u_eblup: Vec<f64>,
    /// Residuals about the shrunken predictor, `y - X beta_hat - Z u_tilde`
    /// (length N).
    pub eps_hat: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Estimate sits on the `sigma2_u = 0` boundary.
    pub boundary: bool,
    /// Projected-gradient norm of the profile likelihood at the solution.
    pub grad_norm: f64,
}

impl FitResult {
    pub fn lambda(&self) -> f64 {
        self.theta_hat.lambda()
    }
}

/// Lean fit output for replicate refits (no residual decomposition).
#[derive(Debug, Clone)]
pub(crate) struct CoreFit {
    pub theta: ThetaVector,
    pub loglik: f64,
    pub iterations: usize,
    pub boundary: bool,
    pub grad_norm: f64,
}

// ---------------------------------------------------------------------------
// Per-cluster design statistics, reusable across refits with new responses.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct DesignStats {
    p: usize,
    /// n_i as f64.
    sizes: Vec<f64>,
    /// D blocks of p*p: X_i' X_i.
    xtx: Vec<f64>,
    /// D blocks of p: X_i' 1.
    sx: Vec<f64>,
}

impl DesignStats {
    pub fn new(data: &ClusteredDataset) -> Self {
        let (d, p) = (data.n_clusters(), data.p());
        let mut xtx = vec![0.0; d * p * p];
        let mut sx = vec![0.0; d * p];
        for i in 0..d {
            let xtx_i = &mut xtx[i * p * p..(i + 1) * p * p];
            let sx_i = &mut sx[i * p..(i + 1) * p];
            for j in data.cluster_rows(i) {
                let row = data.x_row(j);
                for (k, &xk) in row.iter().enumerate() {
                    sx_i[k] += xk;
                    for (l, &xl) in row.iter().enumerate() {
                        xtx_i[k * p + l] += xk * xl;
                    }
                }
            }
        }
        Self { p, sizes: data.cluster_sizes().iter().map(|&n| n as f64).collect(), xtx, sx }
    }

    fn xtx_i(&self, i: usize) -> &[f64] {
        &self.xtx[i * self.p * self.p..(i + 1) * self.p * self.p]
    }

    fn sx_i(&self, i: usize) -> &[f64] {
        &self.sx[i * self.p..(i + 1) * self.p]
    }
}

// ---------------------------------------------------------------------------
// Dense p x p Cholesky helpers (p is small; no matrix library needed).
// ---------------------------------------------------------------------------

/// In-place lower Cholesky; errors on non-positive pivots.
fn chol_factor(a: &mut [f64], p: usize) -> Result<()> {
    for k in 0..p {
        for j in 0..k {
            let s = a[k * p + j];
            let s = s - (0..j).map(|m| a[k * p + m] * a[j * p + m]).sum::<f64>();
            a[k * p + j] = s / a[j * p + j];
        }
        let diag =
            a[k * p + k] - (0..k).map(|m| a[k * p + m] * a[k * p + m]).sum::<f64>();
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::SingularDesign(format!(
                "normal equations not positive definite at pivot {k}"
            )));
        }
        a[k * p + k] = math::sqrt(diag);
    }
    Ok(())
}

fn chol_solve(l: &[f64], p: usize, b: &mut [f64]) {
    for k in 0..p {
        let s = b[k] - (0..k).map(|m| l[k * p + m] * b[m]).sum::<f64>();
        b[k] = s / l[k * p + k];
    }
    for k in (0..p).rev() {
        let s = b[k] - (k + 1..p).map(|m| l[m * p + k] * b[m]).sum::<f64>();
        b[k] = s / l[k * p + k];
    }
}

fn chol_logdet(l: &[f64], p: usize) -> f64 {
    2.0 * (0..p).map(|k| math::ln(l[k * p + k])).sum::<f64>()
}

fn chol_inverse(l: &[f64], p: usize) -> Vec<f64> {
    let mut inv = vec![0.0; p * p];
    for col in 0..p {
        let mut e = vec![0.0; p];
        e[col] = 1.0;
        chol_solve(l, p, &mut e);
        for row in 0..p {
            inv[row * p + col] = e[row];
        }
    }
    inv
}

// ---------------------------------------------------------------------------
// One likelihood evaluation: GLS beta, value, gradient in (sigma2_u, sigma2_e).
// ---------------------------------------------------------------------------

struct Evaluation {
    value: f64,
    beta: Vec<f64>,
    /// d value / d (sigma2_u, sigma2_e) at the GLS beta (envelope theorem:
    /// this is the exact gradient of the profiled objective).
    grad: [f64; 2],
}

fn check_weights(weights: Option<&[f64]>, d: usize) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != d {
            return Err(Error::Invalid(format!(
                "weights length {} does not match D = {d}",
                w.len()
            )));
        }
        if w.iter().any(|&wi| !(wi > 0.0) || !wi.is_finite()) {
            return Err(Error::Invalid("weights must be strictly positive".into()));
        }
    }
    Ok(())
}

fn evaluate(
    data: &ClusteredDataset,
    ds: &DesignStats,
    y: &[f64],
    sigma2_u: f64,
    sigma2_e: f64,
    criterion: Criterion,
    weights: Option<&[f64]>,
    want_grad: bool,
) -> Result<Evaluation> {
    let (d, p) = (data.n_clusters(), ds.p);

    // Weighted GLS normal equations from the per-cluster statistics.
    let mut a_mat = vec![0.0; p * p];
    let mut b_vec = vec![0.0; p];
    let inv_se = 1.0 / sigma2_e;
    for i in 0..d {
        let w = weights.map_or(1.0, |w| w[i]);
        let n_i = ds.sizes[i];
        let c_i = sigma2_e + n_i * sigma2_u;
        let shrink = sigma2_u / c_i;
        let xtx_i = ds.xtx_i(i);
        let sx_i = ds.sx_i(i);
        let rows = data.cluster_rows(i);
        let mut xty_i = vec![0.0; p];
        let mut sy_i = 0.0;
        for j in rows {
            let yj = y[j];
            sy_i += yj;
            for (k, &xk) in data.x_row(j).iter().enumerate() {
                xty_i[k] += xk * yj;
            }
        }
        let w_se = w * inv_se;
        for k in 0..p {
            b_vec[k] += w_se * (xty_i[k] - shrink * sy_i * sx_i[k]);
            for l in 0..p {
                a_mat[k * p + l] += w_se * (xtx_i[k * p + l] - shrink * sx_i[k] * sx_i[l]);
            }
        }
    }
    let mut chol = a_mat.clone();
    chol_factor(&mut chol, p)?;
    let mut beta = b_vec.clone();
    chol_solve(&chol, p, &mut beta);

    // Residual pass: per-cluster residual sum and sum of squares at that beta.
    // Residuals are formed by direct subtraction, which stays accurate even
    // when they are many orders of magnitude below the response scale.
    let mut value = 0.0;
    let mut g_u = 0.0;
    let mut g_e = 0.0;
    let inv_se2 = inv_se * inv_se;
    for i in 0..d {
        let w = weights.map_or(1.0, |w| w[i]);
        let n_i = ds.sizes[i];
        let c_i = sigma2_e + n_i * sigma2_u;
        let shrink = sigma2_u / c_i;
        let mut sr = 0.0;
        let mut srr = 0.0;
        for j in data.cluster_rows(i) {
            let row = data.x_row(j);
            let mut fitv = 0.0;
            for (k, &xk) in row.iter().enumerate() {
                fitv += xk * beta[k];
            }
            let r = y[j] - fitv;
            sr += r;
            srr += r * r;
        }
        let logdet_i = (n_i - 1.0) * math::ln(sigma2_e) + math::ln(c_i);
        let quad_i = inv_se * (srr - shrink * sr * sr);
        value += w * (-0.5) * (logdet_i + quad_i);
        if want_grad {
            g_u += w * 0.5 * (sr * sr / (c_i * c_i) - n_i / c_i);
            let tr_inv = (n_i - 1.0) * inv_se + 1.0 / c_i;
            let quad2 = inv_se2 * (srr - shrink * (2.0 - shrink * n_i) * sr * sr);
            g_e += w * 0.5 * (quad2 - tr_inv);
        }
    }

    if criterion == Criterion::Reml {
        value -= 0.5 * chol_logdet(&chol, p);
        if want_grad {
            let m_inv = chol_inverse(&chol, p);
            // -1/2 tr(M^-1 dM/dsigma2) for both components.
            let mut tr_u = 0.0;
            let mut tr_e = 0.0;
            for i in 0..d {
                let w = weights.map_or(1.0, |w| w[i]);
                let n_i = ds.sizes[i];
                let c_i = sigma2_e + n_i * sigma2_u;
                let shrink = sigma2_u / c_i;
                let sx_i = ds.sx_i(i);
                let xtx_i = ds.xtx_i(i);
                let mut sxm_sx = 0.0;
                let mut tr_xtx = 0.0;
                for k in 0..p {
                    for l in 0..p {
                        sxm_sx += sx_i[k] * m_inv[k * p + l] * sx_i[l];
                        tr_xtx += m_inv[k * p + l] * xtx_i[l * p + k];
                    }
                }
                tr_u += -w * sxm_sx / (c_i * c_i);
                tr_e += -w * inv_se2 * (tr_xtx - shrink * (2.0 - shrink * n_i) * sxm_sx);
            }
            g_u -= 0.5 * tr_u;
            g_e -= 0.5 * tr_e;
        }
    }

    Ok(Evaluation { value, beta, grad: [g_u, g_e] })
}

/// Profile Gaussian log-likelihood (constants dropped) at the given variance
/// components, with beta profiled out by (cluster-weighted) GLS. Returns the
/// value and that GLS beta. REML subtracts `1/2 log|sum_i w_i X_i' Sigma_i^-1
/// X_i|`.
pub fn profile_loglik(
    data: &ClusteredDataset,
    sigma2_u: f64,
    sigma2_e: f64,
    criterion: Criterion,
    weights: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    if !(sigma2_u >= 0.0 && sigma2_u.is_finite()) {
        return Err(Error::Invalid(format!("sigma2_u = {sigma2_u} out of domain")));
    }
    if !(sigma2_e > 0.0 && sigma2_e.is_finite()) {
        return Err(Error::Invalid(format!("sigma2_e = {sigma2_e} out of domain")));
    }
    check_weights(weights, data.n_clusters())?;
    let ds = DesignStats::new(data);
    let ev = evaluate(data, &ds, data.y(), sigma2_u, sigma2_e, criterion, weights, false)?;
    Ok((ev.value, ev.beta))
}

/// Log-likelihood at a full parameter vector (beta not profiled), same
/// constant conventions as [`profile_loglik`].
pub fn loglik_at(data: &ClusteredDataset, theta: &ThetaVector, criterion: Criterion) -> Result<f64> {
    if theta.p() != data.p() {
        return Err(Error::Invalid("beta length does not match design".into()));
    }
    let d = data.n_clusters();
    let mut value = 0.0;
    for i in 0..d {
        let n_i = data.cluster_size(i) as f64;
        let c_i = theta.sigma2_e + n_i * theta.sigma2_u;
        let shrink = theta.sigma2_u / c_i;
        let mut sr = 0.0;
        let mut srr = 0.0;
        for j in data.cluster_rows(i) {
            let row = data.x_row(j);
            let mut fitv = 0.0;
            for (k, &xk) in row.iter().enumerate() {
                fitv += xk * theta.beta[k];
            }
            let r = data.y()[j] - fitv;
            sr += r;
            srr += r * r;
        }
        let logdet_i = (n_i - 1.0) * math::ln(theta.sigma2_e) + math::ln(c_i);
        value -= 0.5 * (logdet_i + (srr - shrink * sr * sr) / theta.sigma2_e);
    }
    if criterion == Criterion::Reml {
        let ds = DesignStats::new(data);
        let p = data.p();
        let mut a_mat = vec![0.0; p * p];
        for i in 0..d {
            let n_i = ds.sizes[i];
            let c_i = theta.sigma2_e + n_i * theta.sigma2_u;
            let shrink = theta.sigma2_u / c_i;
            let sx_i = ds.sx_i(i);
            let xtx_i = ds.xtx_i(i);
            for k in 0..p {
                for l in 0..p {
                    a_mat[k * p + l] +=
                        (xtx_i[k * p + l] - shrink * sx_i[k] * sx_i[l]) / theta.sigma2_e;
                }
            }
        }
        chol_factor(&mut a_mat, p)?;
        value -= 0.5 * chol_logdet(&a_mat, p);
    }
    Ok(value)
}

/// Gradient of the (ML) log-likelihood at `theta`: `p` beta components
/// `X' Sigma^-1 (y - X beta)` followed by the two variance-component
/// derivatives computed from per-cluster trace identities. This is the
/// analytic gradient of the objective [`loglik_at`] evaluates, so central
/// finite differences of that function reproduce it.
pub fn score_at(data: &ClusteredDataset, theta: &ThetaVector) -> Result<Vec<f64>> {
    if theta.p() != data.p() {
        return Err(Error::Invalid("beta length does not match design".into()));
    }
    let (d, p) = (data.n_clusters(), data.p());
    let inv_se = 1.0 / theta.sigma2_e;
    let mut score = vec![0.0; p + 2];
    for i in 0..d {
        let n_i = data.cluster_size(i) as f64;
        let c_i = theta.sigma2_e + n_i * theta.sigma2_u;
        let shrink = theta.sigma2_u / c_i;
        let mut sr = 0.0;
        let mut srr = 0.0;
        let mut xtr = vec![0.0; p];
        let mut sx = vec![0.0; p];
        for j in data.cluster_rows(i) {
            let row = data.x_row(j);
            let mut fitv = 0.0;
            for (k, &xk) in row.iter().enumerate() {
                fitv += xk * theta.beta[k];
            }
            let r = data.y()[j] - fitv;
            sr += r;
            srr += r * r;
            for (k, &xk) in row.iter().enumerate() {
                xtr[k] += xk * r;
                sx[k] += xk;
            }
        }
        for k in 0..p {
            score[k] += inv_se * (xtr[k] - shrink * sr * sx[k]);
        }
        score[p] += 0.5 * (sr * sr / (c_i * c_i) - n_i / c_i);
        let tr_inv = (n_i - 1.0) * inv_se + 1.0 / c_i;
        let quad2 = inv_se * inv_se * (srr - shrink * (2.0 - shrink * n_i) * sr * sr);
        score[p + 1] += 0.5 * (quad2 - tr_inv);
    }
    Ok(score)
}

// ---------------------------------------------------------------------------
// Optimizer: projected BFGS over (sigma2_u, sigma2_e).
// ---------------------------------------------------------------------------

struct OptRun {
    v: [f64; 2],
    value: f64,
    beta: Vec<f64>,
    iterations: usize,
    converged: bool,
    pg_norm: f64,
}

fn project(v: [f64; 2], floor: f64) -> [f64; 2] {
    [if v[0] > 0.0 { v[0] } else { 0.0 }, if v[1] > floor { v[1] } else { floor }]
}

/// Gradient with outward components zeroed on active bounds.
fn projected_grad(v: [f64; 2], g: [f64; 2], floor: f64) -> [f64; 2] {
    let mut pg = g;
    if v[0] <= 0.0 && g[0] < 0.0 {
        pg[0] = 0.0;
    }
    if v[1] <= floor && g[1] < 0.0 {
        pg[1] = 0.0;
    }
    pg
}

fn norm2(v: [f64; 2]) -> f64 {
    math::sqrt(v[0] * v[0] + v[1] * v[1])
}

/// Final refinement once objective differences are below float resolution:
/// secant (Newton-on-gradient) steps per free coordinate, accepted only when
/// they shrink the projected-gradient norm without degrading the value beyond
/// rounding noise.
#[allow(clippy::too_many_arguments)]
fn polish_on_gradient(
    data: &ClusteredDataset,
    ds: &DesignStats,
    y: &[f64],
    criterion: Criterion,
    weights: Option<&[f64]>,
    floor: f64,
    mut v: [f64; 2],
    mut ev: Evaluation,
    mut pg: [f64; 2],
) -> ([f64; 2], Evaluation, [f64; 2]) {
    for _ in 0..25 {
        let mut improved = false;
        for coord in 0..2 {
            if pg[coord] == 0.0 {
                continue;
            }
            let h = 1e-7 * (v[coord].abs() + 1e-3);
            let mut probe = v;
            probe[coord] += h;
            let Ok(ev_probe) =
                evaluate(data, ds, y, probe[0], probe[1], criterion, weights, true)
            else {
                return (v, ev, pg);
            };
            let curv = (ev_probe.grad[coord] - ev.grad[coord]) / h;
            if !(curv < 0.0) {
                continue;
            }
            let mut cand = v;
            cand[coord] = v[coord] - ev.grad[coord] / curv;
            let cand = project(cand, floor);
            if cand == v {
                continue;
            }
            let Ok(cand_ev) =
                evaluate(data, ds, y, cand[0], cand[1], criterion, weights, true)
            else {
                return (v, ev, pg);
            };
            let cand_pg = projected_grad(cand, cand_ev.grad, floor);
            if norm2(cand_pg) < norm2(pg)
                && cand_ev.value >= ev.value - 1e-12 * (1.0 + ev.value.abs())
            {
                v = cand;
                ev = cand_ev;
                pg = cand_pg;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    (v, ev, pg)
}

fn maximize_profile(
    data: &ClusteredDataset,
    ds: &DesignStats,
    y: &[f64],
    criterion: Criterion,
    weights: Option<&[f64]>,
    opts: &FitOptions,
    start: [f64; 2],
) -> Result<OptRun> {
    let floor = opts.var_floor;
    let mut v = project(start, floor);
    let mut ev = evaluate(data, ds, y, v[0], v[1], criterion, weights, true)?;
    // Inverse-Hessian approximation for minimizing -value.
    let mut h = [[1.0, 0.0], [0.0, 1.0]];
    let mut converged = false;
    let mut pg = projected_grad(v, ev.grad, floor);
    let mut iterations = 0;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        if norm2(pg) <= opts.grad_tol {
            converged = true;
            break;
        }
        // Direction: H applied to the projected gradient, active coordinates
        // frozen; fall back to steepest ascent if H has gone bad.
        let mut dir = [
            h[0][0] * pg[0] + h[0][1] * pg[1],
            h[1][0] * pg[0] + h[1][1] * pg[1],
        ];
        if pg[0] == 0.0 {
            dir[0] = 0.0;
        }
        if pg[1] == 0.0 {
            dir[1] = 0.0;
        }
        if dir[0] * pg[0] + dir[1] * pg[1] <= 0.0 {
            h = [[1.0, 0.0], [0.0, 1.0]];
            dir = pg;
        }

        // Backtracking line search on the projected path.
        let mut t = 1.0;
        let mut accepted: Option<([f64; 2], Evaluation)> = None;
        for _ in 0..60 {
            let cand = project([v[0] + t * dir[0], v[1] + t * dir[1]], floor);
            if cand == v {
                t *= 0.5;
                continue;
            }
            // An overshoot so extreme the normal equations lose rank is a
            // rejected step, not a failed fit: genuine rank deficiency is
            // caught at the initial evaluation.
            let Ok(cand_ev) = evaluate(data, ds, y, cand[0], cand[1], criterion, weights, true)
            else {
                t *= 0.5;
                continue;
            };
            let step = [cand[0] - v[0], cand[1] - v[1]];
            let slope = ev.grad[0] * step[0] + ev.grad[1] * step[1];
            if cand_ev.value.is_finite()
                && cand_ev.value >= ev.value + 1e-4 * slope.max(0.0)
                && cand_ev.value > ev.value - 1e-16 * (1.0 + ev.value.abs())
            {
                accepted = Some((cand, cand_ev));
                break;
            }
            t *= 0.5;
        }
        let Some((v_new, ev_new)) = accepted else {
            // The line search is rounding-limited: objective differences near
            // the optimum fall below one ulp while the analytic gradient still
            // has full relative precision. Polish by driving the projected
            // gradient itself down with secant steps on each free coordinate.
            (v, ev, pg) = polish_on_gradient(data, ds, y, criterion, weights, floor, v, ev, pg);
            converged = norm2(pg) <= opts.grad_tol;
            break;
        };

        // BFGS update in the minimization convention (phi = -value).
        let s = [v_new[0] - v[0], v_new[1] - v[1]];
        let yv = [ev.grad[0] - ev_new.grad[0], ev.grad[1] - ev_new.grad[1]];
        let sy = s[0] * yv[0] + s[1] * yv[1];
        if sy > 1e-14 * (norm2(s) * norm2(yv)).max(1e-300) {
            let rho = 1.0 / sy;
            // H = (I - rho s y') H (I - rho y s') + rho s s'
            let hy = [
                h[0][0] * yv[0] + h[0][1] * yv[1],
                h[1][0] * yv[0] + h[1][1] * yv[1],
            ];
            let yhy = yv[0] * hy[0] + yv[1] * hy[1];
            let mut hn = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    hn[r][c] = h[r][c] - (hy[r] * s[c] + s[r] * hy[c]) * rho
                        + s[r] * s[c] * rho * (1.0 + rho * yhy);
                }
            }
            h = hn;
        } else {
            h = [[1.0, 0.0], [0.0, 1.0]];
        }

        let rel_change = (ev_new.value - ev.value).abs() / (1.0 + ev_new.value.abs());
        v = v_new;
        ev = ev_new;
        pg = projected_grad(v, ev.grad, floor);
        if rel_change <= opts.rel_tol && norm2(pg) <= opts.grad_tol {
            converged = true;
            break;
        }
    }

    Ok(OptRun {
        v,
        value: ev.value,
        beta: ev.beta,
        iterations,
        converged,
        pg_norm: norm2(pg),
    })
}

/// Method-of-moments start from an OLS prefit: pooled within-cluster variance
/// for sigma2_e, the excess variance of cluster means for sigma2_u.
fn mom_start(
    data: &ClusteredDataset,
    ds: &DesignStats,
    y: &[f64],
    floor: f64,
) -> Result<([f64; 2], f64)> {
    let (d, p, n) = (data.n_clusters(), data.p(), data.n_obs());
    let mut a_mat = vec![0.0; p * p];
    let mut b_vec = vec![0.0; p];
    for i in 0..d {
        let xtx_i = ds.xtx_i(i);
        for k in 0..p * p {
            a_mat[k] += xtx_i[k];
        }
        for j in data.cluster_rows(i) {
            for (k, &xk) in data.x_row(j).iter().enumerate() {
                b_vec[k] += xk * y[j];
            }
        }
    }
    chol_factor(&mut a_mat, p)?;
    chol_solve(&a_mat, p, &mut b_vec);
    let beta = b_vec;

    let mut ssw = 0.0;
    let mut means = Vec::with_capacity(d);
    let mut total_sum = 0.0;
    let mut total_sq = 0.0;
    for i in 0..d {
        let n_i = data.cluster_size(i);
        let mut sr = 0.0;
        let mut srr = 0.0;
        for j in data.cluster_rows(i) {
            let mut fitv = 0.0;
            for (k, &xk) in data.x_row(j).iter().enumerate() {
                fitv += xk * beta[k];
            }
            let r = y[j] - fitv;
            sr += r;
            srr += r * r;
        }
        let mean = sr / n_i as f64;
        ssw += srr - sr * mean;
        means.push(mean);
        total_sum += sr;
        total_sq += srr;
    }
    let total_var = if n > 1 {
        ((total_sq - total_sum * total_sum / n as f64) / (n as f64 - 1.0)).max(floor)
    } else {
        floor
    };
    let sigma2_e0 = if n > d { (ssw / (n - d) as f64).max(floor) } else { total_var };
    let mean_of_means = means.iter().sum::<f64>() / d as f64;
    let var_means = means
        .iter()
        .map(|m| (m - mean_of_means) * (m - mean_of_means))
        .sum::<f64>()
        / (d as f64 - 1.0);
    let mean_inv_n = (0..d).map(|i| 1.0 / ds.sizes[i]).sum::<f64>() / d as f64;
    let sigma2_u0 = (var_means - sigma2_e0 * mean_inv_n).max(0.0);
    Ok(([sigma2_u0, sigma2_e0], total_var))
}

pub(crate) fn fit_theta(
    data: &ClusteredDataset,
    ds: &DesignStats,
    y: &[f64],
    criterion: Criterion,
    weights: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<CoreFit> {
    check_weights(weights, data.n_clusters())?;
    let floor = opts.var_floor;
    let (mom, total_var) = mom_start(data, ds, y, floor)?;

    let mut starts: Vec<[f64; 2]> = Vec::with_capacity(4);
    if let Some((su, se)) = opts.start_hint {
        starts.push(project([su, se], floor));
    }
    starts.push(mom);
    if opts.multi_start {
        starts.push([0.5 * total_var, 0.5 * total_var.max(floor)]);
        starts.push([0.0, total_var.max(floor)]);
    }
    // Drop near-duplicate starts.
    let mut unique: Vec<[f64; 2]> = Vec::new();
    for s in starts {
        let dup = unique.iter().any(|u| {
            (u[0] - s[0]).abs() <= 1e-6 * (1.0 + s[0]) && (u[1] - s[1]).abs() <= 1e-6 * (1.0 + s[1])
        });
        if !dup {
            unique.push(s);
        }
    }

    let mut best: Option<OptRun> = None;
    let mut total_iters = 0;
    for s in unique {
        let run = maximize_profile(data, ds, y, criterion, weights, opts, s)?;
        total_iters += run.iterations;
        let better = match &best {
            None => true,
            Some(b) => {
                run.value > b.value + 1e-8 * (1.0 + b.value.abs())
                    || (run.converged && !b.converged
                        && run.value >= b.value - 1e-8 * (1.0 + b.value.abs()))
            }
        };
        if better {
            best = Some(run);
        }
    }
    let best = best.expect("at least one start");
    let theta = ThetaVector::new(best.beta.clone(), best.v[0], best.v[1])?;
    if !best.converged {
        return Err(Error::NonConvergence {
            best: theta,
            loglik: best.value,
            grad_norm: best.pg_norm,
            iterations: total_iters,
        });
    }
    Ok(CoreFit {
        boundary: theta.sigma2_u == 0.0,
        theta,
        loglik: best.value,
        iterations: total_iters,
        grad_norm: best.pg_norm,
    })
}

/// Residual decomposition at a fitted theta: marginal residuals, cluster-mean
/// predictors, centered within-cluster residuals, shrunken predictors, and
/// residuals about the shrunken fit.
fn decompose(data: &ClusteredDataset, y: &[f64], theta: &ThetaVector) -> FitPieces {
    let (d, n) = (data.n_clusters(), data.n_obs());
    let mut r = vec![0.0; n];
    let mut u_hat = vec![0.0; d];
    let mut e_hat = vec![0.0; n];
    let mut u_eblup = vec![0.0; d];
    let mut eps_hat = vec![0.0; n];
    for i in 0..d {
        let rows = data.cluster_rows(i);
        let n_i = data.cluster_size(i) as f64;
        let mut sr = 0.0;
        for j in rows.clone() {
            let mut fitv = 0.0;
            for (k, &xk) in data.x_row(j).iter().enumerate() {
                fitv += xk * theta.beta[k];
            }
            r[j] = y[j] - fitv;
            sr += r[j];
        }
        let mean = sr / n_i;
        u_hat[i] = mean;
        let k_i = n_i * theta.sigma2_u / (theta.sigma2_e + n_i * theta.sigma2_u);
        u_eblup[i] = k_i * mean;
        for j in rows {
            e_hat[j] = r[j] - mean;
            eps_hat[j] = r[j] - u_eblup[i];
        }
    }
    FitPieces { r, u_hat, e_hat, u_eblup, eps_hat }
}

struct FitPieces {
    r: Vec<f64>,
    u_hat: Vec<f64>,
    e_hat: Vec<f64>,
    u_eblup: Vec<f64>,
    eps_hat: Vec<f64>,
}

/// Fit by the given criterion. Boundary solutions (`sigma2_u = 0`) are
/// returned as converged fits with the boundary flag set; exhausting the
/// iteration budget is an error carrying the best point found.
pub fn fit(data: &ClusteredDataset, criterion: Criterion, opts: &FitOptions) -> Result<FitResult> {
    let ds = DesignStats::new(data);
    let core = fit_theta(data, &ds, data.y(), criterion, None, opts)?;
    let pieces = decompose(data, data.y(), &core.theta);
    Ok(FitResult {
        theta_hat: core.theta,
        criterion,
        loglik: core.loglik,
        marginal_residuals: pieces.r,
        u_hat: pieces.u_hat,
        e_hat: pieces.e_hat,
        u_eblup: pieces.u_eblup,
        eps_hat: pieces.eps_hat,
        converged: true,
        iterations: core.iterations,
        boundary: core.boundary,
        grad_norm: core.grad_norm,
    })
}

/// Fit with strictly positive per-cluster weights on the likelihood terms
/// (the generalized-bootstrap path). Residual quantities are computed at the
/// weighted solution.
pub fn fit_weighted(
    data: &ClusteredDataset,
    criterion: Criterion,
    weights: &[f64],
    opts: &FitOptions,
) -> Result<FitResult> {
    let ds = DesignStats::new(data);
    let core = fit_theta(data, &ds, data.y(), criterion, Some(weights), opts)?;
    let pieces = decompose(data, data.y(), &core.theta);
    Ok(FitResult {
        theta_hat: core.theta,
        criterion,
        loglik: core.loglik,
        marginal_residuals: pieces.r,
        u_hat: pieces.u_hat,
        e_hat: pieces.e_hat,
        u_eblup: pieces.u_eblup,
        eps_hat: pieces.eps_hat,
        converged: true,
        iterations: core.iterations,
        boundary: core.boundary,
        grad_norm: core.grad_norm,
    })
}

/// Refit the same design against replacement responses (bootstrap hot path).
pub(crate) fn refit(
    data: &ClusteredDataset,
    ds: &DesignStats,
    y: &[f64],
    criterion: Criterion,
    opts: &FitOptions,
) -> Result<CoreFit> {
    fit_theta(data, ds, y, criterion, None, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resample::{draw_normal, RandomSource};
    use alloc::vec;

    fn simulated(seed: u64, d: usize, sizes: &[usize]) -> ClusteredDataset {
        let mut rng = RandomSource::new(seed, 0).rng();
        let n: usize = sizes.iter().sum();
        let xs = draw_normal(0.5, 0.29, n, &mut rng).unwrap();
        let us = draw_normal(0.0, 0.2, d, &mut rng).unwrap();
        let es = draw_normal(0.0, 0.4, n, &mut rng).unwrap();
        let mut y = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(2 * n);
        let mut row = 0;
        for (i, &ni) in sizes.iter().enumerate() {
            for _ in 0..ni {
                x.push(1.0);
                x.push(xs[row]);
                y.push(1.0 + 2.0 * xs[row] + us[i] + es[row]);
                row += 1;
            }
        }
        ClusteredDataset::new(y, x, 2, sizes).unwrap()
    }

    #[test]
    fn independence_case_matches_ols() {
        // All clusters singletons and sigma2_u = 0: profile value is the OLS
        // Gaussian log-likelihood with variance sigma2_e, beta the OLS solution.
        let y = vec![1.0, 2.0, 3.0, 5.0];
        let x = vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0];
        let data = ClusteredDataset::new(y.clone(), x, 2, &[1, 1, 1, 1]).unwrap();
        let s2 = 0.7;
        let (value, beta) = profile_loglik(&data, 0.0, s2, Criterion::Ml, None).unwrap();
        // OLS by hand: x mean 1.5, y mean 2.75, slope = cov/var.
        let slope = (0.0 - 1.5) * (1.0 - 2.75)
            + (1.0 - 1.5) * (2.0 - 2.75)
            + (2.0 - 1.5) * (3.0 - 2.75)
            + (3.0 - 1.5) * (5.0 - 2.75);
        let denom = 2.25 + 0.25 + 0.25 + 2.25;
        let b1 = slope / denom;
        let b0 = 2.75 - b1 * 1.5;
        assert!((beta[0] - b0).abs() < 1e-12 && (beta[1] - b1).abs() < 1e-12);
        let rss: f64 = (0..4)
            .map(|j| {
                let xj = [0.0, 1.0, 2.0, 3.0][j];
                let r = y[j] - b0 - b1 * xj;
                r * r
            })
            .sum();
        let expect = -0.5 * (4.0 * s2.ln() + rss / s2);
        assert!((value - expect).abs() < 1e-12, "{value} vs {expect}");
    }

    #[test]
    fn weight_doubling_scales_ml_value_and_keeps_beta() {
        let data = simulated(5, 10, &[3; 10]);
        let w1 = vec![1.0; 10];
        let w2 = vec![2.0; 10];
        let (v1, b1) = profile_loglik(&data, 0.03, 0.2, Criterion::Ml, Some(&w1)).unwrap();
        let (v2, b2) = profile_loglik(&data, 0.03, 0.2, Criterion::Ml, Some(&w2)).unwrap();
        assert!((v2 - 2.0 * v1).abs() < 1e-9 * v1.abs());
        for (a, b) in b1.iter().zip(&b2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reml_and_ml_share_gls_beta_at_fixed_components() {
        let data = simulated(7, 12, &[1, 2, 3, 4, 5, 1, 2, 3, 4, 5, 6, 7]);
        let (_, b_ml) = profile_loglik(&data, 0.05, 0.15, Criterion::Ml, None).unwrap();
        let (_, b_reml) = profile_loglik(&data, 0.05, 0.15, Criterion::Reml, None).unwrap();
        for (a, b) in b_ml.iter().zip(&b_reml) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn fit_recovers_truth_on_balanced_set() {
        let sizes = vec![7usize; 100];
        let data = simulated(11, 100, &sizes);
        for criterion in [Criterion::Ml, Criterion::Reml] {
            let res = fit(&data, criterion, &FitOptions::default()).unwrap();
            let t = &res.theta_hat;
            assert!((t.beta[0] - 1.0).abs() < 0.2, "beta0 {}", t.beta[0]);
            assert!((t.beta[1] - 2.0).abs() < 0.2, "beta1 {}", t.beta[1]);
            assert!((t.sigma2_u - 0.04).abs() < 0.03, "s2u {}", t.sigma2_u);
            assert!((t.sigma2_e - 0.16).abs() < 0.03, "s2e {}", t.sigma2_e);
            assert!(res.converged);
            // Interior optimum: the ML score should vanish for the ML fit.
            if criterion == Criterion::Ml && !res.boundary {
                let s = score_at(&data, t).unwrap();
                let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(norm <= 1e-6, "score norm {norm}");
            }
        }
    }

    #[test]
    fn residual_decomposition_identities() {
        let data = simulated(13, 20, &[1, 4, 2, 7, 3, 1, 5, 2, 6, 4, 1, 3, 2, 5, 7, 1, 2, 3, 4, 6]);
        let res = fit(&data, Criterion::Reml, &FitOptions::default()).unwrap();
        for i in 0..data.n_clusters() {
            let rows = data.cluster_rows(i);
            let sum_e: f64 = res.e_hat[rows.clone()].iter().sum();
            assert!(sum_e.abs() < 1e-10, "cluster {i} e_hat sum {sum_e}");
            let mean_r: f64 = res.marginal_residuals[rows.clone()].iter().sum::<f64>()
                / data.cluster_size(i) as f64;
            assert!((res.u_hat[i] - mean_r).abs() < 1e-12);
            let n_i = data.cluster_size(i) as f64;
            let t = &res.theta_hat;
            let k = n_i * t.sigma2_u / (t.sigma2_e + n_i * t.sigma2_u);
            assert!((res.u_eblup[i] - k * res.u_hat[i]).abs() < 1e-12);
            if data.cluster_size(i) == 1 {
                assert_eq!(res.e_hat[rows.start], 0.0);
            }
        }
    }

    #[test]
    fn noise_free_data_hits_boundary() {
        // y = X beta exactly, then jittered at 1e-8: sigma2_u collapses to the
        // boundary and sigma2_e to the jitter scale (at or near the floor).
        let mut rng = RandomSource::new(99, 0).rng();
        let sizes = [3usize; 8];
        let n: usize = sizes.iter().sum();
        let xs = draw_normal(0.0, 1.0, n, &mut rng).unwrap();
        let jit = draw_normal(0.0, 1e-8, n, &mut rng).unwrap();
        let mut y = Vec::new();
        let mut x = Vec::new();
        for j in 0..n {
            x.push(1.0);
            x.push(xs[j]);
            y.push(1.0 + 2.0 * xs[j] + jit[j]);
        }
        let data = ClusteredDataset::new(y, x, 2, &sizes).unwrap();
        let res = fit(&data, Criterion::Ml, &FitOptions::default()).unwrap();
        assert!(res.boundary, "sigma2_u should hit the boundary");
        assert!(res.theta_hat.sigma2_u == 0.0);
        assert!(res.theta_hat.sigma2_e <= 1e-10, "s2e {}", res.theta_hat.sigma2_e);
    }

    #[test]
    fn fit_invariant_under_cluster_permutation() {
        let sizes = [2usize, 5, 1, 7, 3, 4, 6, 2, 5, 3];
        let data = simulated(21, 10, &sizes);
        let res = fit(&data, Criterion::Ml, &FitOptions::default()).unwrap();

        // Move the last cluster first.
        let perm: Vec<usize> = core::iter::once(9).chain(0..9).collect();
        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut new_sizes = Vec::new();
        for &i in &perm {
            new_sizes.push(data.cluster_size(i));
            for j in data.cluster_rows(i) {
                y.push(data.y()[j]);
                x.extend_from_slice(data.x_row(j));
            }
        }
        let permuted = ClusteredDataset::new(y, x, 2, &new_sizes).unwrap();
        let res_p = fit(&permuted, Criterion::Ml, &FitOptions::default()).unwrap();
        for (a, b) in res.theta_hat.to_row().iter().zip(res_p.theta_hat.to_row()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn score_beta_block_zero_at_gls() {
        let data = simulated(31, 15, &[2, 3, 4, 1, 5, 2, 3, 4, 1, 5, 2, 3, 4, 1, 5]);
        let (s2u, s2e) = (0.05, 0.2);
        let (_, beta) = profile_loglik(&data, s2u, s2e, Criterion::Ml, None).unwrap();
        let theta = ThetaVector::new(beta, s2u, s2e).unwrap();
        let score = score_at(&data, &theta).unwrap();
        for k in 0..data.p() {
            assert!(score[k].abs() < 1e-9, "beta score {}", score[k]);
        }
    }
}
