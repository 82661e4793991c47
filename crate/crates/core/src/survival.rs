//! Cox proportional-hazards fitting and survival evaluation.
//!
//! The partial likelihood uses the Breslow approximation for ties and is
//! maximised by Newton-Raphson on mean-centered covariates. The cumulative
//! baseline hazard is the Breslow estimator, a right-continuous step function
//! anchored at the fit origin; with all coefficients zero it reduces to the
//! Nelson-Aalen estimator. Survival after statin initiation applies a
//! multiplicative hazard ratio theta from the initiation time onwards.

use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// One subject in a survival fit: covariates, follow-up time since the fit
/// origin, and event status.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRow {
    pub person_id: u64,
    /// Years since the fit origin; must be > 0.
    pub time: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

/// Multiplicative hazard ratio applied after statin initiation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatinEffect {
    pub theta: f64,
}

impl StatinEffect {
    pub fn new(theta: f64) -> Result<StatinEffect> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::config(format!(
                "hazard ratio theta must be in (0,1], got {theta}"
            )));
        }
        Ok(StatinEffect { theta })
    }
}

/// Fitted proportional-hazards model with its step-function baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub covariates: Vec<String>,
    pub beta: Vec<f64>,
    pub beta_se: Vec<f64>,
    /// Covariate means subtracted before fitting; the baseline refers to a
    /// subject at these means.
    pub covariate_means: Vec<f64>,
    /// Sorted (time, cumulative hazard) knots on the absolute time scale,
    /// right-continuous, implicitly (origin, 0) before the first knot.
    pub baseline: Vec<(f64, f64)>,
    pub origin: f64,
    pub horizon: f64,
    pub n_events: usize,
    pub n_rows: usize,
    /// Largest absolute score component at the solution.
    pub score_norm: f64,
    /// Covariates with no variation, pinned to zero with infinite SE.
    pub dropped: Vec<String>,
}

impl CoxFit {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<CoxFit> {
        Ok(serde_json::from_str(s)?)
    }

    /// Centered linear predictor x' beta.
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.beta.len());
        x.iter()
            .zip(&self.covariate_means)
            .zip(&self.beta)
            .map(|((xi, mi), bi)| (xi - mi) * bi)
            .sum()
    }

    /// Baseline cumulative hazard at absolute time `t` (right-continuous
    /// step lookup; zero at or before the origin).
    pub fn cumhaz(&self, t: f64) -> f64 {
        // Last knot with knot.0 <= t.
        let mut lo = 0usize;
        let mut hi = self.baseline.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.baseline[mid].0 <= t {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        if lo == 0 {
            0.0
        } else {
            self.baseline[lo - 1].1
        }
    }
}

const MAX_NEWTON_ITER: usize = 50;
const NEWTON_TOL: f64 = 1e-8;
const DIVERGENCE_BOUND: f64 = 50.0;

struct PartialLik {
    loglik: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
    /// (time since origin, hazard increment denominator) per distinct event
    /// time, ascending.
    baseline_s0: Vec<(f64, f64, usize)>,
}

/// One sweep of the risk set in descending time, computing the Breslow
/// log partial likelihood, score, information and the baseline denominators.
fn partial_lik(rows: &[SurvivalRow], order: &[usize], beta: &DVector<f64>) -> PartialLik {
    let p = beta.len();
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut loglik = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut baseline_s0: Vec<(f64, f64, usize)> = Vec::new();

    let mut i = 0;
    while i < order.len() {
        let t = rows[order[i]].time;
        // Add everyone at this time to the risk set.
        let mut j = i;
        while j < order.len() && rows[order[j]].time == t {
            let row = &rows[order[j]];
            let x = DVector::from_column_slice(&row.covariates);
            let w = x.dot(beta).exp();
            s0 += w;
            s1.axpy(w, &x, 1.0);
            s2.ger(w, &x, &x, 1.0);
            j += 1;
        }
        // Process events at this time against the full risk set.
        let mut d = 0usize;
        let mut sum_lp = 0.0;
        let mut sum_x = DVector::zeros(p);
        for &idx in &order[i..j] {
            let row = &rows[idx];
            if row.event {
                d += 1;
                sum_lp += row.covariates.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>();
                for (c, v) in sum_x.iter_mut().zip(&row.covariates) {
                    *c += v;
                }
            }
        }
        if d > 0 {
            let df = d as f64;
            loglik += sum_lp - df * s0.ln();
            let mean = &s1 / s0;
            score += &sum_x - df * &mean;
            info += df * (&s2 / s0 - &mean * mean.transpose());
            baseline_s0.push((t, s0, d));
        }
        i = j;
    }
    baseline_s0.reverse();
    PartialLik {
        loglik,
        score,
        info,
        baseline_s0,
    }
}

/// Fits a Cox model on rows whose times are measured from `origin` and were
/// already censored at `origin + window` by the caller.
pub fn fit_cox(
    rows: &[SurvivalRow],
    names: &[String],
    origin: f64,
    window: f64,
) -> Result<CoxFit> {
    if window <= 0.0 {
        return Err(Error::config("window must be > 0".to_string()));
    }
    let n_events = rows.iter().filter(|r| r.event).count();
    if n_events == 0 {
        return Err(Error::numeric("no events".to_string()));
    }
    let p_full = names.len();
    for r in rows {
        if r.covariates.len() != p_full {
            return Err(Error::data(format!(
                "person {}: {} covariates, expected {}",
                r.person_id,
                r.covariates.len(),
                p_full
            )));
        }
        if r.covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "person {}: non-finite covariate",
                r.person_id
            )));
        }
        if !(r.time > 0.0) {
            return Err(Error::data(format!(
                "person {}: non-positive follow-up time {}",
                r.person_id, r.time
            )));
        }
    }

    // Column means and variation; constant columns are pinned to zero.
    let n = rows.len() as f64;
    let mut means = vec![0.0; p_full];
    for r in rows {
        for (m, v) in means.iter_mut().zip(&r.covariates) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut variances = vec![0.0; p_full];
    for r in rows {
        for (k, v) in r.covariates.iter().enumerate() {
            variances[k] += (v - means[k]).powi(2);
        }
    }
    let keep: Vec<usize> = (0..p_full).filter(|&k| variances[k] / n > 1e-12).collect();
    let dropped: Vec<String> = (0..p_full)
        .filter(|k| !keep.contains(k))
        .map(|k| names[k].clone())
        .collect();
    let p = keep.len();

    let centered: Vec<SurvivalRow> = rows
        .iter()
        .map(|r| SurvivalRow {
            person_id: r.person_id,
            time: r.time,
            event: r.event,
            covariates: keep.iter().map(|&k| r.covariates[k] - means[k]).collect(),
        })
        .collect();

    let mut order: Vec<usize> = (0..centered.len()).collect();
    order.sort_by(|&a, &b| centered[b].time.partial_cmp(&centered[a].time).unwrap());

    let mut beta = DVector::zeros(p);
    let mut lik = partial_lik(&centered, &order, &beta);
    let mut converged = p == 0;
    for _ in 0..MAX_NEWTON_ITER {
        if p == 0 {
            break;
        }
        let chol = Cholesky::new(lik.info.clone())
            .ok_or_else(|| Error::numeric("singular information matrix".to_string()))?;
        let step = chol.solve(&lik.score);
        // Step halving keeps the likelihood from decreasing.
        let mut scale = 1.0;
        let mut candidate;
        let mut cand_lik;
        loop {
            candidate = &beta + scale * &step;
            cand_lik = partial_lik(&centered, &order, &candidate);
            if cand_lik.loglik >= lik.loglik - 1e-12 || scale < 1e-4 {
                break;
            }
            scale *= 0.5;
        }
        let max_step = step.iter().fold(0.0f64, |m, v| m.max((scale * v).abs()));
        beta = candidate;
        lik = cand_lik;
        if beta.iter().any(|b| b.abs() > DIVERGENCE_BOUND) {
            return Err(Error::numeric(
                "likelihood appears monotone (perfect separation): coefficient diverged"
                    .to_string(),
            ));
        }
        let score_norm = lik.score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_step < NEWTON_TOL && score_norm < 1e-6 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numeric(format!(
            "Cox fit did not converge in {MAX_NEWTON_ITER} iterations"
        )));
    }

    let se_red: Vec<f64> = if p > 0 {
        let inv = Cholesky::new(lik.info.clone())
            .ok_or_else(|| Error::numeric("singular information at solution".to_string()))?
            .inverse();
        (0..p).map(|k| inv[(k, k)].max(0.0).sqrt()).collect()
    } else {
        vec![]
    };

    // Breslow cumulative baseline on the absolute time scale.
    let mut baseline = Vec::with_capacity(lik.baseline_s0.len());
    let mut cum = 0.0;
    for &(t, s0, d) in &lik.baseline_s0 {
        cum += d as f64 / s0;
        baseline.push((origin + t, cum));
    }

    let mut beta_full = vec![0.0; p_full];
    let mut se_full = vec![f64::INFINITY; p_full];
    for (r, &k) in keep.iter().enumerate() {
        beta_full[k] = beta[r];
        se_full[k] = se_red[r];
    }
    let score_norm = lik.score.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    Ok(CoxFit {
        covariates: names.to_vec(),
        beta: beta_full,
        beta_se: se_full,
        covariate_means: means,
        baseline,
        origin,
        horizon: origin + window,
        n_events,
        n_rows: rows.len(),
        score_norm,
        dropped,
    })
}

fn check_time(fit: &CoxFit, t: f64) -> Result<()> {
    let eps = 1e-9 * (1.0 + fit.horizon.abs());
    if t < fit.origin - eps || t > fit.horizon + eps {
        return Err(Error::data(format!(
            "time {} outside [{}, {}]",
            t, fit.origin, fit.horizon
        )));
    }
    Ok(())
}

/// Probability of remaining event-free to `t` without statins:
/// exp(-Lambda0(t) exp(x' beta)).
pub fn survival_ns(fit: &CoxFit, x: &[f64], t: f64) -> Result<f64> {
    check_time(fit, t)?;
    let lp = fit.linear_predictor(x);
    Ok((-fit.cumhaz(t) * lp.exp()).exp())
}

/// Probability of remaining event-free to `t` when statins start at
/// `tau_star`: the hazard is scaled by theta from tau_star onwards, giving
/// S_ns(tau) (S_ns(t) / S_ns(tau))^theta.
pub fn survival_s(
    fit: &CoxFit,
    x: &[f64],
    t: f64,
    tau_star: f64,
    effect: StatinEffect,
) -> Result<f64> {
    if t < tau_star {
        return Err(Error::data(format!(
            "time {t} before statin initiation {tau_star}; use survival_ns"
        )));
    }
    check_time(fit, tau_star)?;
    let s_tau = survival_ns(fit, x, tau_star)?;
    let s_t = survival_ns(fit, x, t)?;
    if s_tau <= 0.0 {
        return Ok(0.0);
    }
    Ok(s_tau * (s_t / s_tau).powf(effect.theta))
}

/// Risk of an event within `w` years of `s` for a fit anchored at `s`.
pub fn risk_window(fit: &CoxFit, x: &[f64], s: f64, w: f64) -> Result<f64> {
    let eps = 1e-9 * (1.0 + s.abs());
    if (fit.origin - s).abs() > eps {
        return Err(Error::data(format!(
            "fit origin {} does not match prediction time {}",
            fit.origin, s
        )));
    }
    Ok(1.0 - survival_ns(fit, x, s + w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(t: f64, event: bool, x: Vec<f64>) -> SurvivalRow {
        SurvivalRow {
            person_id: 0,
            time: t,
            event,
            covariates: x,
        }
    }

    #[test]
    fn nelson_aalen_on_three_subjects() {
        // Events at 1, 2, 3 with no covariates: steps 1/3, 1/3+1/2, 1/3+1/2+1.
        let rows = vec![
            row(1.0, true, vec![]),
            row(2.0, true, vec![]),
            row(3.0, true, vec![]),
        ];
        let fit = fit_cox(&rows, &[], 0.0, 10.0).unwrap();
        let expected = [1.0 / 3.0, 1.0 / 3.0 + 1.0 / 2.0, 1.0 / 3.0 + 1.0 / 2.0 + 1.0];
        assert_eq!(fit.baseline.len(), 3);
        for ((t, cum), (et, ecum)) in fit
            .baseline
            .iter()
            .zip([(1.0, expected[0]), (2.0, expected[1]), (3.0, expected[2])])
        {
            assert_abs_diff_eq!(*t, et);
            assert_abs_diff_eq!(*cum, ecum, epsilon = 1e-12);
        }
    }

    #[test]
    fn breslow_with_zero_beta_equals_nelson_aalen() {
        // A constant covariate is pinned to zero, so the baseline must be the
        // plain Nelson-Aalen estimator of the raw data.
        let rows = vec![
            row(1.0, true, vec![1.0]),
            row(2.0, false, vec![1.0]),
            row(2.5, true, vec![1.0]),
            row(4.0, true, vec![1.0]),
        ];
        let fit = fit_cox(&rows, &["c".to_string()], 0.0, 10.0).unwrap();
        assert_eq!(fit.beta, vec![0.0]);
        assert!(fit.beta_se[0].is_infinite());
        assert_eq!(fit.dropped, vec!["c".to_string()]);
        let expected = [1.0 / 4.0, 1.0 / 4.0 + 1.0 / 2.0, 1.0 / 4.0 + 1.0 / 2.0 + 1.0];
        for (knot, e) in fit.baseline.iter().zip(expected) {
            assert_abs_diff_eq!(knot.1, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_group_log_hazard_ratio_recovered() {
        // Exponential survival, true log HR = ln 2, administrative censoring.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut rows = Vec::new();
        for i in 0..4000 {
            let g = (i % 2) as f64;
            let rate = 0.05 * (2.0f64.ln() * g).exp();
            let t: f64 = -rng.gen_range(f64::MIN_POSITIVE..1.0f64).ln() / rate;
            let (time, event) = if t > 10.0 { (10.0, false) } else { (t, true) };
            rows.push(row(time, event, vec![g]));
        }
        let fit = fit_cox(&rows, &["group".to_string()], 0.0, 10.0).unwrap();
        let err = (fit.beta[0] - 2.0f64.ln()).abs();
        assert!(
            err < 3.0 * fit.beta_se[0],
            "beta {} se {}",
            fit.beta[0],
            fit.beta_se[0]
        );
        assert!(fit.score_norm < 1e-6);
    }

    #[test]
    fn no_events_is_an_error() {
        let rows = vec![row(1.0, false, vec![]), row(2.0, false, vec![])];
        let err = fit_cox(&rows, &[], 0.0, 5.0).unwrap_err();
        assert!(err.to_string().contains("no events"));
    }

    #[test]
    fn non_finite_covariate_is_an_error() {
        let rows = vec![row(1.0, true, vec![f64::NAN])];
        assert!(fit_cox(&rows, &["x".to_string()], 0.0, 5.0).is_err());
    }

    #[test]
    fn survival_examples() {
        // Single knot with a hand-set cumulative hazard.
        let fit = CoxFit {
            covariates: vec!["x".to_string()],
            beta: vec![2.0f64.ln()],
            beta_se: vec![0.1],
            covariate_means: vec![0.0],
            baseline: vec![(5.0, 0.1)],
            origin: 0.0,
            horizon: 10.0,
            n_events: 1,
            n_rows: 1,
            score_norm: 0.0,
            dropped: vec![],
        };
        // At the origin, survival is exactly 1.
        assert_abs_diff_eq!(survival_ns(&fit, &[0.0], 0.0).unwrap(), 1.0);
        // Lambda = 0.1, lp = 0.
        let s = survival_ns(&fit, &[0.0], 6.0).unwrap();
        assert_abs_diff_eq!(s, 0.904837, epsilon = 1e-6);
        // Doubling exp(x beta) squares the survival.
        let s2 = survival_ns(&fit, &[1.0], 6.0).unwrap();
        assert_abs_diff_eq!(s2, s * s, epsilon = 1e-12);
        assert_abs_diff_eq!(s2, 0.818731, epsilon = 1e-6);
        // Out-of-range time is an error.
        assert!(survival_ns(&fit, &[0.0], 11.0).is_err());
    }

    #[test]
    fn statin_adjusted_survival() {
        let fit = CoxFit {
            covariates: vec![],
            beta: vec![],
            beta_se: vec![],
            covariate_means: vec![],
            baseline: vec![(2.0, -(0.9f64.ln())), (6.0, -(0.8f64.ln()))],
            origin: 0.0,
            horizon: 10.0,
            n_events: 2,
            n_rows: 2,
            score_norm: 0.0,
            dropped: vec![],
        };
        // S_ns(2)=0.9, S_ns(6)=0.8 by construction.
        assert_abs_diff_eq!(survival_ns(&fit, &[], 2.0).unwrap(), 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(survival_ns(&fit, &[], 6.0).unwrap(), 0.8, epsilon = 1e-12);
        // theta = 1 collapses to the unadjusted survival.
        let theta1 = StatinEffect::new(1.0).unwrap();
        assert_abs_diff_eq!(
            survival_s(&fit, &[], 6.0, 2.0, theta1).unwrap(),
            0.8,
            epsilon = 1e-12
        );
        // Continuity at initiation.
        let theta = StatinEffect::new(0.8).unwrap();
        assert_abs_diff_eq!(
            survival_s(&fit, &[], 2.0, 2.0, theta).unwrap(),
            0.9,
            epsilon = 1e-12
        );
        // 0.9 (0.8/0.9)^0.8.
        let s = survival_s(&fit, &[], 6.0, 2.0, theta).unwrap();
        assert_abs_diff_eq!(s, 0.9 * (0.8f64 / 0.9).powf(0.8), epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.81907, epsilon = 1e-5);
        // Statins never hurt.
        assert!(s >= survival_ns(&fit, &[], 6.0).unwrap());
        // t before initiation is an error.
        assert!(survival_s(&fit, &[], 1.0, 2.0, theta).is_err());
    }

    #[test]
    fn risk_window_examples() {
        let fit = CoxFit {
            covariates: vec![],
            beta: vec![],
            beta_se: vec![],
            covariate_means: vec![],
            baseline: vec![(44.0, 0.051293)],
            origin: 40.0,
            horizon: 45.0,
            n_events: 1,
            n_rows: 1,
            score_norm: 0.0,
            dropped: vec![],
        };
        let r = risk_window(&fit, &[], 40.0, 5.0).unwrap();
        assert_abs_diff_eq!(r, 0.05, epsilon = 1e-4);
        // Zero hazard gives zero risk.
        let zero = CoxFit {
            baseline: vec![],
            ..fit.clone()
        };
        assert_abs_diff_eq!(risk_window(&zero, &[], 40.0, 5.0).unwrap(), 0.0);
        // Mismatched origin is an error.
        assert!(risk_window(&fit, &[], 41.0, 4.0).is_err());
    }

    #[test]
    fn survival_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<SurvivalRow> = (0..200)
            .map(|i| {
                let x = rng.gen_range(-1.0..1.0);
                let t: f64 = rng.gen_range(0.1..9.9);
                row(t, i % 3 != 0, vec![x])
            })
            .collect();
        let fit = fit_cox(&rows, &["x".to_string()], 0.0, 10.0).unwrap();
        let xs = [-0.5, 0.0, 0.8];
        for x in xs {
            let mut prev = 1.0;
            for step in 0..=100 {
                let t = step as f64 * 0.1;
                let s = survival_ns(&fit, &[x], t).unwrap();
                assert!(s <= prev + 1e-12);
                prev = s;
            }
        }
    }
}
