//! Multivariate linear mixed-effects model for the five risk-factor
//! trajectories, and best linear unbiased predictions (BLUPs) at arbitrary
//! ages from a person's past measurements.
//!
//! The five outcomes are stacked into one model with an outcome-indicator
//! design: each outcome has a fixed intercept and slope on centered age, SBP
//! carries an adjustment for blood-pressure medication and TCHOL for statins.
//! Random intercepts and slopes for all outcomes share one full 10x10
//! covariance; residuals are independent with an outcome-specific variance.
//!
//! Estimation alternates exact generalised-least-squares updates of the fixed
//! effects with EM updates of the covariance parameters, which keeps the
//! observed-data log-likelihood non-decreasing. Measurements of different
//! factors at different ages need no alignment or imputation.

use crate::cohort::{Factor, LongitudinalRecord, Measurement, FACTORS, N_FACTORS, N_RANDOM};
use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Treatment indicator carried by each measurement row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentFlag {
    Bpm,
    Statin,
}

/// Extra fixed term: the flag enters the linear predictor of one outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtraFixedTerm {
    pub outcome: Factor,
    pub flag: TreatmentFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmemSpec {
    /// Ages enter the design as (age - center_age).
    pub center_age: f64,
    pub extra_fixed_terms: Vec<ExtraFixedTerm>,
    /// Relative log-likelihood change below which the fit has converged.
    pub convergence_tol: f64,
    pub max_iter: usize,
    /// Restricted maximum likelihood instead of plain ML.
    pub reml: bool,
}

impl LmemSpec {
    pub fn new(center_age: f64) -> Self {
        LmemSpec {
            center_age,
            extra_fixed_terms: vec![
                ExtraFixedTerm {
                    outcome: Factor::Sbp,
                    flag: TreatmentFlag::Bpm,
                },
                ExtraFixedTerm {
                    outcome: Factor::Tchol,
                    flag: TreatmentFlag::Statin,
                },
            ],
            convergence_tol: 1e-6,
            max_iter: 200,
            reml: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.convergence_tol > 0.0) {
            return Err(Error::config("convergence_tol must be > 0".to_string()));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter must be >= 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmemFit {
    pub center_age: f64,
    pub beta_names: Vec<String>,
    /// Ten intercept/slope effects followed by the extra terms.
    pub beta: Vec<f64>,
    pub beta_se: Vec<f64>,
    pub extra_fixed_terms: Vec<ExtraFixedTerm>,
    /// Names of extra terms that showed no variation and were pinned to zero.
    pub dropped: Vec<String>,
    /// Row-major 10x10 random-effect covariance.
    pub sigma: Vec<f64>,
    pub sigma_e: [f64; N_FACTORS],
    pub log_likelihood: f64,
    pub loglik_trace: Vec<f64>,
    pub n_iterations: usize,
    pub converged: bool,
    pub reml: bool,
    pub n_persons: usize,
    pub n_rows: usize,
}

impl LmemFit {
    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(N_RANDOM, N_RANDOM, &self.sigma)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<LmemFit> {
        Ok(serde_json::from_str(s)?)
    }

    /// Population mean of factor `k` at `age` under treatment state
    /// (bpm, statin).
    fn fixed_mean(&self, k: usize, age: f64, bpm: bool, statin: bool) -> f64 {
        let t = age - self.center_age;
        let mut v = self.beta[2 * k] + self.beta[2 * k + 1] * t;
        for (e, term) in self.extra_fixed_terms.iter().enumerate() {
            if term.outcome.index() == k {
                let on = match term.flag {
                    TreatmentFlag::Bpm => bpm,
                    TreatmentFlag::Statin => statin,
                };
                if on {
                    v += self.beta[N_RANDOM + e];
                }
            }
        }
        v
    }
}

/// Predicted factor values at one query age.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlupVector {
    pub values: [f64; N_FACTORS],
    pub query_age: f64,
    /// Only measurements at ages <= this cutoff informed the prediction.
    pub history_cutoff: f64,
    pub n_past_obs: [usize; N_FACTORS],
}

/// Random-effect prediction for one person, reusable across query ages.
#[derive(Debug, Clone, PartialEq)]
pub struct BlupState {
    pub u_hat: [f64; N_RANDOM],
    /// Treatment state at the last observed measurement (false if none).
    pub bpm: bool,
    pub statin: bool,
    pub cutoff: f64,
    pub n_obs: [usize; N_FACTORS],
}

struct Row {
    k: usize,
    t: f64,
    y: f64,
    bpm: bool,
    statin: bool,
}

struct PersonData {
    rows: Vec<Row>,
}

fn collect_rows(measurements: &[Measurement], center: f64, cutoff: Option<f64>) -> Vec<Row> {
    measurements
        .iter()
        .filter(|m| cutoff.map_or(true, |c| m.age <= c))
        .map(|m| Row {
            k: m.factor.index(),
            t: m.age - center,
            y: m.value,
            bpm: m.bpm,
            statin: m.statin,
        })
        .collect()
}

/// Marginal covariance V = Z sigma Z' + R for one person. Each row of Z has
/// exactly two non-zeros (intercept and slope of its outcome), so V is built
/// directly without forming Z.
fn build_v(rows: &[Row], sigma: &DMatrix<f64>, sigma_e2: &[f64; N_FACTORS]) -> DMatrix<f64> {
    let n = rows.len();
    let mut v = DMatrix::zeros(n, n);
    for a in 0..n {
        let (ka, ta) = (rows[a].k, rows[a].t);
        for b in a..n {
            let (kb, tb) = (rows[b].k, rows[b].t);
            let mut val = sigma[(2 * ka, 2 * kb)]
                + sigma[(2 * ka, 2 * kb + 1)] * tb
                + sigma[(2 * ka + 1, 2 * kb)] * ta
                + sigma[(2 * ka + 1, 2 * kb + 1)] * ta * tb;
            if a == b {
                val += sigma_e2[ka];
            }
            v[(a, b)] = val;
            v[(b, a)] = val;
        }
    }
    v
}

fn cholesky_with_jitter(mut v: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = v.nrows();
    let mean_diag = (0..n).map(|i| v[(i, i)]).sum::<f64>() / n.max(1) as f64;
    for jitter in [0.0, 1e-12, 1e-9, 1e-6] {
        let trial = if jitter == 0.0 {
            v.clone()
        } else {
            for i in 0..n {
                v[(i, i)] += jitter * (mean_diag + 1.0);
            }
            v.clone()
        };
        if let Some(ch) = Cholesky::new(trial) {
            return Ok(ch);
        }
    }
    Err(Error::numeric(
        "marginal covariance is not positive definite".to_string(),
    ))
}

/// Dense fixed-effect design for one person: intercept/slope pairs followed
/// by active extra columns.
fn build_x(rows: &[Row], extras: &[ExtraFixedTerm], active: &[bool]) -> DMatrix<f64> {
    let p = N_RANDOM + extras.len();
    let mut x = DMatrix::zeros(rows.len(), p);
    for (r, row) in rows.iter().enumerate() {
        x[(r, 2 * row.k)] = 1.0;
        x[(r, 2 * row.k + 1)] = row.t;
        for (e, term) in extras.iter().enumerate() {
            if active[e] && term.outcome.index() == row.k {
                let on = match term.flag {
                    TreatmentFlag::Bpm => row.bpm,
                    TreatmentFlag::Statin => row.statin,
                };
                if on {
                    x[(r, N_RANDOM + e)] = 1.0;
                }
            }
        }
    }
    x
}

/// Z sigma, built row-wise from the two non-zeros of each Z row.
fn build_z_sigma(rows: &[Row], sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let mut zs = DMatrix::zeros(rows.len(), N_RANDOM);
    for (r, row) in rows.iter().enumerate() {
        for j in 0..N_RANDOM {
            zs[(r, j)] = sigma[(2 * row.k, j)] + row.t * sigma[(2 * row.k + 1, j)];
        }
    }
    zs
}

fn zt_times(rows: &[Row], v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(N_RANDOM);
    for (r, row) in rows.iter().enumerate() {
        out[2 * row.k] += v[r];
        out[2 * row.k + 1] += row.t * v[r];
    }
    out
}

struct GlsAccum {
    a: DMatrix<f64>,
    b: DVector<f64>,
    yvy: f64,
    logdet: f64,
}

impl GlsAccum {
    fn zero(p: usize) -> Self {
        GlsAccum {
            a: DMatrix::zeros(p, p),
            b: DVector::zeros(p),
            yvy: 0.0,
            logdet: 0.0,
        }
    }
    fn merge(mut self, o: GlsAccum) -> Self {
        self.a += o.a;
        self.b += o.b;
        self.yvy += o.yvy;
        self.logdet += o.logdet;
        self
    }
}

struct EmAccum {
    suu: DMatrix<f64>,
    resid: [f64; N_FACTORS],
}

impl EmAccum {
    fn zero() -> Self {
        EmAccum {
            suu: DMatrix::zeros(N_RANDOM, N_RANDOM),
            resid: [0.0; N_FACTORS],
        }
    }
    fn merge(mut self, o: EmAccum) -> Self {
        self.suu += o.suu;
        for k in 0..N_FACTORS {
            self.resid[k] += o.resid[k];
        }
        self
    }
}

const CHUNK: usize = 256;

fn gls_pass(
    persons: &[PersonData],
    extras: &[ExtraFixedTerm],
    active: &[bool],
    sigma: &DMatrix<f64>,
    sigma_e2: &[f64; N_FACTORS],
    p: usize,
) -> Result<GlsAccum> {
    let partials: Vec<Result<GlsAccum>> = persons
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = GlsAccum::zero(p);
            for pd in chunk {
                let n = pd.rows.len();
                let v = build_v(&pd.rows, sigma, sigma_e2);
                let chol = cholesky_with_jitter(v)?;
                let x = build_x(&pd.rows, extras, active);
                let y = DVector::from_iterator(n, pd.rows.iter().map(|r| r.y));
                let vinv_x = chol.solve(&x);
                let vinv_y = chol.solve(&y);
                acc.a += x.transpose() * &vinv_x;
                acc.b += x.transpose() * &vinv_y;
                acc.yvy += y.dot(&vinv_y);
                acc.logdet += chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
            }
            Ok(acc)
        })
        .collect();
    let mut total = GlsAccum::zero(p);
    for part in partials {
        total = total.merge(part?);
    }
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn em_pass(
    persons: &[PersonData],
    extras: &[ExtraFixedTerm],
    active: &[bool],
    sigma: &DMatrix<f64>,
    sigma_e2: &[f64; N_FACTORS],
    beta: &DVector<f64>,
    reml_m: Option<&DMatrix<f64>>,
) -> Result<EmAccum> {
    let partials: Vec<Result<EmAccum>> = persons
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = EmAccum::zero();
            for pd in chunk {
                let n = pd.rows.len();
                let v = build_v(&pd.rows, sigma, sigma_e2);
                let chol = cholesky_with_jitter(v)?;
                let x = build_x(&pd.rows, extras, active);
                let y = DVector::from_iterator(n, pd.rows.iter().map(|r| r.y));
                let r = &y - &x * beta;
                let a = chol.solve(&r);
                let u_hat = sigma * zt_times(&pd.rows, &a);
                let zs = build_z_sigma(&pd.rows, sigma);
                let vinv_zs = chol.solve(&zs);
                let mut cov = sigma - zs.transpose() * &vinv_zs;
                if let Some(m) = reml_m {
                    // Extra spread from estimating the fixed effects.
                    let vinv_x = chol.solve(&x);
                    let g = zs.transpose() * &vinv_x; // (Z sigma)' V^-1 X
                    cov += &g * m * g.transpose();
                }
                acc.suu += &cov + &u_hat * u_hat.transpose();

                // Residual conditional second moments, per outcome.
                let vinv = chol.inverse();
                let vinv_x_diag: Option<Vec<f64>> = reml_m.map(|m| {
                    let vinv_x = chol.solve(&x);
                    let t = &vinv_x * m;
                    (0..n).map(|i| t.row(i).dot(&vinv_x.row(i))).collect()
                });
                for (i, row) in pd.rows.iter().enumerate() {
                    let e_hat = r[i] - (u_hat[2 * row.k] + row.t * u_hat[2 * row.k + 1]);
                    let s2 = sigma_e2[row.k];
                    let mut var = s2 - s2 * s2 * vinv[(i, i)];
                    if let Some(d) = &vinv_x_diag {
                        var += s2 * s2 * d[i];
                    }
                    acc.resid[row.k] += e_hat * e_hat + var.max(0.0);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = EmAccum::zero();
    for part in partials {
        total = total.merge(part?);
    }
    Ok(total)
}

/// Fits the stacked five-outcome mixed model.
///
/// Persons without measurements are skipped; every factor must appear at
/// least once in the data. Returns `converged = false` (rather than an error)
/// when the iteration limit is hit, leaving the decision to the caller.
pub fn fit_lmem<'a, I>(records: I, spec: &LmemSpec) -> Result<LmemFit>
where
    I: IntoIterator<Item = &'a LongitudinalRecord>,
{
    spec.validate()?;
    let persons: Vec<PersonData> = records
        .into_iter()
        .map(|r| PersonData {
            rows: collect_rows(&r.measurements, spec.center_age, None),
        })
        .filter(|p| !p.rows.is_empty())
        .collect();
    if persons.len() < 2 {
        return Err(Error::data(format!(
            "need at least 2 persons with measurements, got {}",
            persons.len()
        )));
    }
    for pd in &persons {
        if pd.rows.iter().any(|r| !(r.t.is_finite() && r.y.is_finite())) {
            return Err(Error::data("non-finite measurement age or value".to_string()));
        }
    }

    let mut n_rows_k = [0usize; N_FACTORS];
    for pd in &persons {
        for r in &pd.rows {
            n_rows_k[r.k] += 1;
        }
    }
    for k in 0..N_FACTORS {
        if n_rows_k[k] == 0 {
            return Err(Error::data(format!(
                "outcome {} has no measurements",
                FACTORS[k].name()
            )));
        }
    }
    let n_rows: usize = n_rows_k.iter().sum();

    let extras = spec.extra_fixed_terms.clone();
    // An extra term with no variation within its outcome carries no
    // information; pin it to zero instead of letting the solve go singular.
    let active: Vec<bool> = extras
        .iter()
        .map(|term| {
            let mut seen_on = false;
            let mut seen_off = false;
            for pd in &persons {
                for r in &pd.rows {
                    if r.k == term.outcome.index() {
                        let on = match term.flag {
                            TreatmentFlag::Bpm => r.bpm,
                            TreatmentFlag::Statin => r.statin,
                        };
                        if on {
                            seen_on = true;
                        } else {
                            seen_off = true;
                        }
                    }
                }
            }
            seen_on && seen_off
        })
        .collect();
    let p = N_RANDOM + extras.len();

    // Starting values from per-outcome pooled least squares.
    let (mut sigma, mut sigma_e2, beta0) = initial_values(&persons, &extras, &active);
    let mut beta = beta0;
    let mut loglik_trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut gls_m: DMatrix<f64> = DMatrix::zeros(p, p);
    let mut iterations = 0;

    for iter in 0..spec.max_iter {
        iterations = iter + 1;
        let gls = gls_pass(&persons, &extras, &active, &sigma, &sigma_e2, p)?;
        let (a_red, b_red, keep) = reduce_system(&gls.a, &gls.b, &active, extras.len());
        let chol_a = Cholesky::new(a_red.clone())
            .ok_or_else(|| Error::numeric("singular fixed-effect system".to_string()))?;
        let beta_red = chol_a.solve(&b_red);
        beta = expand_beta(&beta_red, &keep, p);
        let quad = gls.yvy - 2.0 * beta.dot(&gls.b) + beta.dot(&(&gls.a * &beta));
        let mut ll = -0.5 * (gls.logdet + quad + n_rows as f64 * (2.0 * std::f64::consts::PI).ln());
        if spec.reml {
            ll -= 0.5
                * chol_a
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|d| 2.0 * d.ln())
                    .sum::<f64>();
        }
        gls_m = expand_cov(&chol_a.inverse(), &keep, p);

        let done = match loglik_trace.last() {
            Some(&prev) => {
                let rel = (ll - prev).abs() / (prev.abs() + 1.0);
                rel < spec.convergence_tol
            }
            None => false,
        };
        loglik_trace.push(ll);
        if done {
            converged = true;
            break;
        }

        let reml_m = spec.reml.then_some(&gls_m);
        let em = em_pass(&persons, &extras, &active, &sigma, &sigma_e2, &beta, reml_m)?;
        sigma = em.suu / persons.len() as f64;
        // Symmetrise against round-off drift.
        for i in 0..N_RANDOM {
            for j in 0..i {
                let m = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
                sigma[(i, j)] = m;
                sigma[(j, i)] = m;
            }
        }
        for k in 0..N_FACTORS {
            sigma_e2[k] = (em.resid[k] / n_rows_k[k] as f64).max(1e-12);
        }
    }

    let beta_se: Vec<f64> = (0..p)
        .map(|j| {
            if j >= N_RANDOM && !active[j - N_RANDOM] {
                f64::INFINITY
            } else {
                gls_m[(j, j)].max(0.0).sqrt()
            }
        })
        .collect();

    let mut beta_names: Vec<String> = Vec::with_capacity(p);
    for k in 0..N_FACTORS {
        beta_names.push(format!("{}_intercept", FACTORS[k].name()));
        beta_names.push(format!("{}_slope", FACTORS[k].name()));
    }
    for term in &extras {
        let flag = match term.flag {
            TreatmentFlag::Bpm => "bpm",
            TreatmentFlag::Statin => "statin",
        };
        beta_names.push(format!("{}_{}", term.outcome.name(), flag));
    }
    let dropped = extras
        .iter()
        .zip(&active)
        .filter(|(_, &a)| !a)
        .map(|(term, _)| {
            let flag = match term.flag {
                TreatmentFlag::Bpm => "bpm",
                TreatmentFlag::Statin => "statin",
            };
            format!("{}_{}", term.outcome.name(), flag)
        })
        .collect();

    Ok(LmemFit {
        center_age: spec.center_age,
        beta_names,
        beta: beta.iter().copied().collect(),
        beta_se,
        extra_fixed_terms: extras,
        dropped,
        sigma: sigma.transpose().as_slice().to_vec(),
        sigma_e: std::array::from_fn(|k| sigma_e2[k].sqrt()),
        log_likelihood: *loglik_trace.last().unwrap(),
        loglik_trace,
        n_iterations: iterations,
        converged,
        reml: spec.reml,
        n_persons: persons.len(),
        n_rows,
    })
}

/// Removes pinned (inactive) columns before solving the GLS system.
fn reduce_system(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    active: &[bool],
    n_extras: usize,
) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
    let p = a.nrows();
    let keep: Vec<usize> = (0..p)
        .filter(|&j| j < p - n_extras || active[j - (p - n_extras)])
        .collect();
    let q = keep.len();
    let mut ar = DMatrix::zeros(q, q);
    let mut br = DVector::zeros(q);
    for (ri, &i) in keep.iter().enumerate() {
        br[ri] = b[i];
        for (rj, &j) in keep.iter().enumerate() {
            ar[(ri, rj)] = a[(i, j)];
        }
    }
    (ar, br, keep)
}

fn expand_beta(beta_red: &DVector<f64>, keep: &[usize], p: usize) -> DVector<f64> {
    let mut beta = DVector::zeros(p);
    for (ri, &i) in keep.iter().enumerate() {
        beta[i] = beta_red[ri];
    }
    beta
}

fn expand_cov(m_red: &DMatrix<f64>, keep: &[usize], p: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(p, p);
    for (ri, &i) in keep.iter().enumerate() {
        for (rj, &j) in keep.iter().enumerate() {
            m[(i, j)] = m_red[(ri, rj)];
        }
    }
    m
}

fn initial_values(
    persons: &[PersonData],
    extras: &[ExtraFixedTerm],
    active: &[bool],
) -> (DMatrix<f64>, [f64; N_FACTORS], DVector<f64>) {
    let p = N_RANDOM + extras.len();
    let mut beta = DVector::zeros(p);
    let mut sigma = DMatrix::zeros(N_RANDOM, N_RANDOM);
    let mut sigma_e2 = [1.0; N_FACTORS];
    for k in 0..N_FACTORS {
        // Pooled least squares of outcome k on [1, t] (extras folded into the
        // residual for the purpose of starting values).
        let (mut n, mut sx, mut sy, mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for pd in persons {
            for r in &pd.rows {
                if r.k == k {
                    n += 1.0;
                    sx += r.t;
                    sy += r.y;
                    sxx += r.t * r.t;
                    sxy += r.t * r.y;
                    syy += r.y * r.y;
                }
            }
        }
        let det = n * sxx - sx * sx;
        let (b0, b1) = if det.abs() > 1e-12 && n >= 2.0 {
            let b1 = (n * sxy - sx * sy) / det;
            ((sy - b1 * sx) / n, b1)
        } else {
            (sy / n.max(1.0), 0.0)
        };
        beta[2 * k] = b0;
        beta[2 * k + 1] = b1;
        let rss = (syy - 2.0 * b0 * sy - 2.0 * b1 * sxy + n * b0 * b0
            + 2.0 * b0 * b1 * sx
            + b1 * b1 * sxx)
            .max(0.0);
        let var = (rss / n.max(1.0)).max(1e-8);
        sigma_e2[k] = 0.6 * var;
        let spread2 = (sxx / n.max(1.0) - (sx / n.max(1.0)).powi(2)).max(0.0);
        sigma[(2 * k, 2 * k)] = 0.3 * var + 1e-6;
        sigma[(2 * k + 1, 2 * k + 1)] = 0.1 * var / (spread2 + 1.0) + 1e-8;
    }
    let _ = active;
    (sigma, sigma_e2, beta)
}

/// Predicts random effects from the measurements at ages <= `cutoff`.
///
/// With an empty history the prediction shrinks fully to the population line
/// (u = 0); this is not an error.
pub fn blup_state(fit: &LmemFit, measurements: &[Measurement], cutoff: f64) -> Result<BlupState> {
    let rows = collect_rows(measurements, fit.center_age, Some(cutoff));
    let mut n_obs = [0usize; N_FACTORS];
    for r in &rows {
        n_obs[r.k] += 1;
    }
    // Treatment state carried forward from the last observed measurement.
    let (bpm, statin) = rows
        .last()
        .map(|r| (r.bpm, r.statin))
        .unwrap_or((false, false));
    if rows.is_empty() {
        return Ok(BlupState {
            u_hat: [0.0; N_RANDOM],
            bpm,
            statin,
            cutoff,
            n_obs,
        });
    }
    let sigma = fit.sigma_matrix();
    let sigma_e2: [f64; N_FACTORS] = std::array::from_fn(|k| fit.sigma_e[k] * fit.sigma_e[k]);
    let v = build_v(&rows, &sigma, &sigma_e2);
    let chol = cholesky_with_jitter(v)?;
    let active: Vec<bool> = vec![true; fit.extra_fixed_terms.len()];
    let x = build_x(&rows, &fit.extra_fixed_terms, &active);
    let beta = DVector::from_column_slice(&fit.beta);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.y));
    let r = y - x * beta;
    let a = chol.solve(&r);
    let u = &sigma * zt_times(&rows, &a);
    Ok(BlupState {
        u_hat: std::array::from_fn(|i| u[i]),
        bpm,
        statin,
        cutoff,
        n_obs,
    })
}

/// Evaluates the person's predicted factor values at `query_age`.
pub fn blup_predict(fit: &LmemFit, state: &BlupState, query_age: f64) -> BlupVector {
    let t = query_age - fit.center_age;
    let values = std::array::from_fn(|k| {
        fit.fixed_mean(k, query_age, state.bpm, state.statin)
            + state.u_hat[2 * k]
            + state.u_hat[2 * k + 1] * t
    });
    BlupVector {
        values,
        query_age,
        history_cutoff: state.cutoff,
        n_past_obs: state.n_obs,
    }
}

/// Conditional expectation of each factor at `query_age` given the
/// measurements at ages <= `cutoff`.
pub fn blup(
    fit: &LmemFit,
    measurements: &[Measurement],
    cutoff: f64,
    query_age: f64,
) -> Result<BlupVector> {
    let state = blup_state(fit, measurements, cutoff)?;
    Ok(blup_predict(fit, &state, query_age))
}
