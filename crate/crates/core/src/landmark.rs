//! Landmark cohorts and the two-stage risk pipeline.
//!
//! At a landmark age the cohort is everyone event-free, alive, in follow-up
//! and statin-free. Stage 1 fits the mixed model on all their measurements
//! (before and after the landmark age, for efficiency of the trajectory
//! estimates). Stage 2 fits one 10-year Cox model at the landmark age and one
//! 5-year Cox model at each prediction time s in {la, la+1, ..., la+10},
//! each on the sub-cohort still event-free and under follow-up at s, with
//! BLUP covariates evaluated at s.
//!
//! Risk profiles for scheduling are prediction-mode: BLUPs at every s use
//! only measurements taken up to the landmark age, exactly as they would for
//! a new person observed up to that age.

use crate::cohort::{LongitudinalRecord, FACTORS, N_FACTORS};
use crate::error::{Error, Result};
use crate::lmem::{blup_predict, blup_state, fit_lmem, LmemFit, LmemSpec};
use crate::survival::{fit_cox, risk_window, CoxFit, SurvivalRow};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const LANDMARK_GRID: [u32; 9] = [40, 45, 50, 55, 60, 65, 70, 75, 80];
/// Number of prediction times per landmark age: s = la + 0..=10.
pub const N_PREDICTION_TIMES: usize = 11;
pub const RISK_THRESHOLD: f64 = 0.05;

/// One of the fixed landmark ages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct LandmarkAge(u32);

impl LandmarkAge {
    pub fn new(value: u32) -> Result<LandmarkAge> {
        if LANDMARK_GRID.contains(&value) {
            Ok(LandmarkAge(value))
        } else {
            Err(Error::config(format!(
                "landmark age {value} not in {LANDMARK_GRID:?}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0 as f64
    }

    pub fn as_u32(self) -> u32 {
        self.0
    }
}

impl TryFrom<u32> for LandmarkAge {
    type Error = Error;
    fn try_from(v: u32) -> Result<LandmarkAge> {
        LandmarkAge::new(v)
    }
}

impl From<LandmarkAge> for u32 {
    fn from(la: LandmarkAge) -> u32 {
        la.0
    }
}

/// Risk classification from the 5-year risk at the landmark age.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskClass {
    Low,
    MedLow,
    MedHigh,
    High,
    VeryHigh,
}

impl RiskClass {
    /// Boundaries: <=1.25% low, (1.25,2.5] med-low, (2.5,3.75] med-high,
    /// (3.75,5] high, >5% very high.
    pub fn classify(risk: f64) -> RiskClass {
        if risk > 0.05 {
            RiskClass::VeryHigh
        } else if risk > 0.0375 {
            RiskClass::High
        } else if risk > 0.025 {
            RiskClass::MedHigh
        } else if risk > 0.0125 {
            RiskClass::MedLow
        } else {
            RiskClass::Low
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RiskClass::Low => "low",
            RiskClass::MedLow => "med_low",
            RiskClass::MedHigh => "med_high",
            RiskClass::High => "high",
            RiskClass::VeryHigh => "very_high",
        }
    }

    pub const ALL: [RiskClass; 5] = [
        RiskClass::Low,
        RiskClass::MedLow,
        RiskClass::MedHigh,
        RiskClass::High,
        RiskClass::VeryHigh,
    ];
}

/// How the deprivation category enters the Cox models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TownsendCoding {
    /// Single numeric score; stable on small cohorts.
    #[default]
    Numeric,
    /// 19 indicator levels (reference level 1).
    Dummies,
}

/// Which fixed covariates enter the Cox models at a landmark age. The rare
/// comorbidities (renal disease, rheumatoid arthritis, atrial fibrillation)
/// are included only from landmark age 60, where they carry enough events to
/// be estimable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariatePolicy {
    pub include_rare_comorbidities: bool,
    pub townsend: TownsendCoding,
}

impl CovariatePolicy {
    pub fn for_landmark(la: LandmarkAge, townsend: TownsendCoding) -> CovariatePolicy {
        CovariatePolicy {
            include_rare_comorbidities: la.as_u32() >= 60,
            townsend,
        }
    }

    /// Ordered covariate names: comorbidities, deprivation, BP-medication
    /// state, then the five factor BLUPs.
    pub fn covariate_names(&self) -> Vec<String> {
        let mut names = vec![
            "diabetes".to_string(),
            "depression".to_string(),
            "migraine".to_string(),
            "severe_mental_illness".to_string(),
        ];
        if self.include_rare_comorbidities {
            names.push("renal_disease".to_string());
            names.push("rheumatoid_arthritis".to_string());
            names.push("atrial_fibrillation".to_string());
        }
        match self.townsend {
            TownsendCoding::Numeric => names.push("townsend".to_string()),
            TownsendCoding::Dummies => {
                for level in 2..=20 {
                    names.push(format!("townsend_{level}"));
                }
            }
        }
        names.push("bp_medication".to_string());
        for f in FACTORS {
            names.push(format!("blup_{}", f.name()));
        }
        names
    }

    /// Assembles the covariate vector for one person: fixed covariates and
    /// BP-medication state as known at `knowledge_age`, BLUP factor values.
    pub fn assemble(
        &self,
        record: &LongitudinalRecord,
        blups: &[f64; N_FACTORS],
        knowledge_age: f64,
    ) -> Vec<f64> {
        let fx = &record.fixed;
        let mut x = vec![
            fx.diabetes as u8 as f64,
            fx.depression as u8 as f64,
            fx.migraine as u8 as f64,
            fx.severe_mental_illness as u8 as f64,
        ];
        if self.include_rare_comorbidities {
            x.push(fx.renal_disease as u8 as f64);
            x.push(fx.rheumatoid_arthritis as u8 as f64);
            x.push(fx.atrial_fibrillation as u8 as f64);
        }
        match self.townsend {
            TownsendCoding::Numeric => x.push(fx.townsend as f64),
            TownsendCoding::Dummies => {
                for level in 2..=20u8 {
                    x.push((fx.townsend == level) as u8 as f64);
                }
            }
        }
        x.push(record.bpm_active(knowledge_age) as u8 as f64);
        x.extend_from_slice(blups);
        x
    }
}

/// Everyone enrolled, event-free, alive and statin-free at the landmark age.
pub fn build_landmark_cohort<'a>(
    cohort: &'a [LongitudinalRecord],
    la: LandmarkAge,
) -> Vec<&'a LongitudinalRecord> {
    let age = la.value();
    cohort
        .iter()
        .filter(|r| {
            r.entry_age <= age
                && age < r.exit_age
                && r.event_age.map_or(true, |a| a > age)
                && r.death_age.map_or(true, |a| a > age)
                && r.statin_start_age.map_or(true, |a| a > age)
        })
        .collect()
}

/// Members of the landmark cohort still event-free and under follow-up at
/// prediction time `s`.
pub fn build_subcohort<'a>(
    landmark_cohort: &[&'a LongitudinalRecord],
    s: f64,
) -> Vec<&'a LongitudinalRecord> {
    landmark_cohort
        .iter()
        .filter(|r| {
            s < r.exit_age
                && r.event_age.map_or(true, |a| a > s)
                && r.death_age.map_or(true, |a| a > s)
        })
        .copied()
        .collect()
}

/// All fitted models for one landmark age.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkModels {
    pub la: LandmarkAge,
    pub lmem: LmemFit,
    pub cox_10y: CoxFit,
    /// Index i holds the fit at s = la + i; None where the sub-cohort had no
    /// events (marked unfittable).
    pub cox_5y: Vec<Option<CoxFit>>,
    pub policy: CovariatePolicy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkFitOptions {
    pub townsend: TownsendCoding,
    pub lmem_tol: f64,
    pub lmem_max_iter: usize,
    pub reml: bool,
}

impl Default for LandmarkFitOptions {
    fn default() -> Self {
        LandmarkFitOptions {
            townsend: TownsendCoding::Numeric,
            lmem_tol: 1e-6,
            lmem_max_iter: 200,
            reml: false,
        }
    }
}

/// Censors a record at `origin + window` and returns (time since origin,
/// event flag), or None if the person contributes no follow-up after origin.
fn survival_outcome(r: &LongitudinalRecord, origin: f64, window: f64) -> Option<(f64, bool)> {
    let horizon = origin + window;
    let event_age = r.event_age.unwrap_or(f64::INFINITY);
    // Death is censoring; exit already reflects death when it ended follow-up.
    let end = r.exit_age.min(horizon).min(event_age);
    if end <= origin {
        return None;
    }
    Some((end - origin, event_age <= r.exit_age.min(horizon)))
}

fn cox_rows(
    members: &[&LongitudinalRecord],
    states: &[(u64, [f64; N_FACTORS])],
    policy: &CovariatePolicy,
    origin: f64,
    window: f64,
    knowledge_age: f64,
) -> Vec<SurvivalRow> {
    debug_assert_eq!(members.len(), states.len());
    members
        .iter()
        .zip(states)
        .filter_map(|(r, (pid, blups))| {
            debug_assert_eq!(r.person_id, *pid);
            survival_outcome(r, origin, window).map(|(time, event)| SurvivalRow {
                person_id: r.person_id,
                time,
                event,
                covariates: policy.assemble(r, blups, knowledge_age),
            })
        })
        .collect()
}

/// Fits the full two-stage model set at one landmark age on the derivation
/// cohort (stage 1 mixed model, stage 2 Cox fits at the landmark and at every
/// prediction time).
pub fn fit_landmark_models(
    derivation_cohort: &[LongitudinalRecord],
    la: LandmarkAge,
    opts: &LandmarkFitOptions,
) -> Result<LandmarkModels> {
    let members = build_landmark_cohort(derivation_cohort, la);
    if members.is_empty() {
        return Err(Error::data(format!(
            "landmark cohort at age {} is empty",
            la.as_u32()
        )));
    }
    let mut lmem_spec = LmemSpec::new(la.value());
    lmem_spec.convergence_tol = opts.lmem_tol;
    lmem_spec.max_iter = opts.lmem_max_iter;
    lmem_spec.reml = opts.reml;
    let lmem = fit_lmem(members.iter().copied(), &lmem_spec)?;

    let policy = CovariatePolicy::for_landmark(la, opts.townsend);
    let names = policy.covariate_names();
    let age = la.value();

    // Stage 2a: 10-year model at the landmark age, past-only BLUPs.
    let blups_at_la: Vec<(u64, [f64; N_FACTORS])> = members
        .par_iter()
        .map(|r| {
            let state = blup_state(&lmem, &r.measurements, age)?;
            Ok((r.person_id, blup_predict(&lmem, &state, age).values))
        })
        .collect::<Result<_>>()?;
    let rows_10y = cox_rows(&members, &blups_at_la, &policy, age, 10.0, age);
    let cox_10y = fit_cox(&rows_10y, &names, age, 10.0)?;

    // Stage 2b: 5-year model at each prediction time on its sub-cohort,
    // BLUPs from measurements up to s.
    let cox_5y: Vec<Option<CoxFit>> = (0..N_PREDICTION_TIMES)
        .map(|i| {
            let s = age + i as f64;
            let sub = build_subcohort(&members, s);
            if sub.is_empty() {
                return Ok(None);
            }
            let states: Vec<(u64, [f64; N_FACTORS])> = sub
                .par_iter()
                .map(|r| {
                    let state = blup_state(&lmem, &r.measurements, s)?;
                    Ok((r.person_id, blup_predict(&lmem, &state, s).values))
                })
                .collect::<Result<_>>()?;
            let rows = cox_rows(&sub, &states, &policy, s, 5.0, s);
            match fit_cox(&rows, &names, s, 5.0) {
                Ok(fit) => Ok(Some(fit)),
                // No events in the sub-cohort: marked unfittable.
                Err(Error::Numeric(msg)) if msg.contains("no events") => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    Ok(LandmarkModels {
        la,
        lmem,
        cox_10y,
        cox_5y,
        policy,
    })
}

/// Per-person 5-year risks over the prediction grid, the earliest
/// threshold-crossing time, and the risk class at the landmark age.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskProfile {
    pub person_id: u64,
    pub la: u32,
    /// risks[i] is the 5-year risk at s = la + i; None where no model was
    /// fittable.
    pub risks: Vec<Option<f64>>,
    pub t_star: Option<f64>,
    pub risk_class: RiskClass,
    /// Covariates at the landmark age for the 10-year model (used by the
    /// net-benefit stage).
    pub x_la: Vec<f64>,
    /// Measurement cutoff used for every BLUP in this profile.
    pub blup_cutoff: f64,
}

/// Builds the risk profile for one member of the landmark cohort.
///
/// Prediction-mode: every BLUP, at every prediction time, uses only
/// measurements up to the landmark age, and the treatment state known there.
pub fn risk_profile(models: &LandmarkModels, person: &LongitudinalRecord) -> Result<RiskProfile> {
    let age = models.la.value();
    let state = blup_state(&models.lmem, &person.measurements, age)?;
    let mut risks: Vec<Option<f64>> = vec![None; N_PREDICTION_TIMES];
    let mut x_la = None;
    for (i, slot) in risks.iter_mut().enumerate() {
        let s = age + i as f64;
        let blups = blup_predict(&models.lmem, &state, s).values;
        let x = models.policy.assemble(person, &blups, age);
        if i == 0 {
            x_la = Some(x.clone());
        }
        if let Some(fit) = &models.cox_5y[i] {
            *slot = Some(risk_window(fit, &x, s, 5.0)?);
        }
    }
    let t_star = crossing_time(&risks, age, RISK_THRESHOLD);
    let risk_class = match risks[0] {
        Some(r) => RiskClass::classify(r),
        // Without a landmark-age fit the class falls back to the first
        // available risk.
        None => risks
            .iter()
            .flatten()
            .next()
            .map(|&r| RiskClass::classify(r))
            .ok_or_else(|| {
                Error::numeric(format!(
                    "no fitted prediction times at landmark age {}",
                    models.la.as_u32()
                ))
            })?,
    };
    Ok(RiskProfile {
        person_id: person.person_id,
        la: models.la.as_u32(),
        risks,
        t_star,
        risk_class,
        x_la: x_la.unwrap(),
        blup_cutoff: state.cutoff,
    })
}

/// Earliest time the risk vector exceeds `threshold` (strictly), linearly
/// interpolated between the first exceeding grid point and the previous
/// available one. None when the threshold is never exceeded.
pub fn crossing_time(risks: &[Option<f64>], la: f64, threshold: f64) -> Option<f64> {
    let mut prev: Option<(f64, f64)> = None; // (s, risk) of last available point
    for (i, r) in risks.iter().enumerate() {
        let Some(r) = *r else { continue };
        let s = la + i as f64;
        if r > threshold {
            return Some(match prev {
                // Crossing at the landmark age itself (or at the first
                // available point) cannot be interpolated.
                None => s,
                Some((sp, rp)) => sp + (threshold - rp) * (s - sp) / (r - rp),
            });
        }
        prev = Some((s, r));
    }
    None
}

/// Filenames inside a saved landmark-model directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkManifest {
    pub la: u32,
    pub policy: CovariatePolicy,
    pub lmem: String,
    pub cox_10y: String,
    /// One entry per prediction time: a filename or None when unfittable.
    pub cox_5y: Vec<Option<String>>,
    pub n_landmark_cohort: usize,
    pub n_events_10y: usize,
}

impl LandmarkModels {
    /// Writes the bundle as JSON fits plus a manifest into `dir`.
    pub fn save_dir(&self, dir: &Path, n_landmark_cohort: usize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("lmem.json"), self.lmem.to_json()?)?;
        std::fs::write(dir.join("cox_10y.json"), self.cox_10y.to_json()?)?;
        let mut cox_5y_files = Vec::with_capacity(self.cox_5y.len());
        for (i, fit) in self.cox_5y.iter().enumerate() {
            match fit {
                Some(fit) => {
                    let name = format!("cox_5y_s{}.json", self.la.as_u32() as usize + i);
                    std::fs::write(dir.join(&name), fit.to_json()?)?;
                    cox_5y_files.push(Some(name));
                }
                None => cox_5y_files.push(None),
            }
        }
        let manifest = LandmarkManifest {
            la: self.la.as_u32(),
            policy: self.policy,
            lmem: "lmem.json".to_string(),
            cox_10y: "cox_10y.json".to_string(),
            cox_5y: cox_5y_files,
            n_landmark_cohort,
            n_events_10y: self.cox_10y.n_events,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<LandmarkModels> {
        let manifest: LandmarkManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let la = LandmarkAge::new(manifest.la)?;
        let lmem = LmemFit::from_json(&std::fs::read_to_string(dir.join(&manifest.lmem))?)?;
        let cox_10y = CoxFit::from_json(&std::fs::read_to_string(dir.join(&manifest.cox_10y))?)?;
        let mut cox_5y = Vec::with_capacity(manifest.cox_5y.len());
        for entry in &manifest.cox_5y {
            match entry {
                Some(name) => cox_5y.push(Some(CoxFit::from_json(&std::fs::read_to_string(
                    dir.join(name),
                )?)?)),
                None => cox_5y.push(None),
            }
        }
        Ok(LandmarkModels {
            la,
            lmem,
            cox_10y,
            cox_5y,
            policy: manifest.policy,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{simulate_cohort, FixedCovariates, Sex};
    use crate::lmem::tests::recovery_config;
    use approx::assert_abs_diff_eq;

    fn person(
        id: u64,
        entry: f64,
        exit: f64,
        event: Option<f64>,
        death: Option<f64>,
        statin: Option<f64>,
    ) -> LongitudinalRecord {
        LongitudinalRecord {
            person_id: id,
            practice_id: 0,
            sex: Sex::Male,
            entry_age: entry,
            exit_age: exit,
            fixed: FixedCovariates {
                diabetes: false,
                renal_disease: false,
                depression: false,
                migraine: false,
                severe_mental_illness: false,
                rheumatoid_arthritis: false,
                atrial_fibrillation: false,
                townsend: 10,
            },
            measurements: vec![],
            event_age: event,
            death_age: death,
            statin_start_age: statin,
            bpm_start_age: None,
        }
    }

    #[test]
    fn landmark_cohort_membership() {
        let la = LandmarkAge::new(50).unwrap();
        let cohort = vec![
            person(0, 40.0, 60.0, None, None, None), // in
            person(1, 40.0, 60.0, Some(49.0), None, None), // event before la
            person(2, 40.0, 60.0, None, None, Some(52.0)), // statin after la: in
            person(3, 40.0, 60.0, None, None, Some(48.0)), // statin before la
            person(4, 51.0, 60.0, None, None, None), // enters after la
            person(5, 40.0, 49.0, None, None, None), // exited before la
            person(6, 40.0, 44.9, None, Some(44.9), None), // died before la
        ];
        let members = build_landmark_cohort(&cohort, la);
        let ids: Vec<u64> = members.iter().map(|r| r.person_id).collect();
        assert_eq!(ids, vec![0, 2]);
    }

    #[test]
    fn subcohort_shrinks_with_s() {
        let la = LandmarkAge::new(40).unwrap();
        let cohort = vec![
            person(0, 35.0, 55.0, None, None, None),
            person(1, 35.0, 43.0, None, None, None), // censored at la+3
            person(2, 35.0, 55.0, Some(45.5), None, None),
        ];
        let members = build_landmark_cohort(&cohort, la);
        assert_eq!(members.len(), 3);
        // s = la reproduces the landmark cohort.
        assert_eq!(build_subcohort(&members, 40.0).len(), 3);
        let mut prev = usize::MAX;
        for i in 0..N_PREDICTION_TIMES {
            let n = build_subcohort(&members, 40.0 + i as f64).len();
            assert!(n <= prev);
            prev = n;
        }
        // Person 1 leaves at s >= 43, person 2 at s >= 45.5 (so s = 46).
        assert_eq!(build_subcohort(&members, 43.0).len(), 2);
        assert_eq!(build_subcohort(&members, 46.0).len(), 1);
    }

    #[test]
    fn risk_classes_partition_the_unit_interval() {
        for r in [0.0, 0.01, 0.0125, 0.02, 0.025, 0.03, 0.0375, 0.04, 0.05, 0.051, 1.0] {
            let c = RiskClass::classify(r);
            let expected = if r > 0.05 {
                RiskClass::VeryHigh
            } else if r > 0.0375 {
                RiskClass::High
            } else if r > 0.025 {
                RiskClass::MedHigh
            } else if r > 0.0125 {
                RiskClass::MedLow
            } else {
                RiskClass::Low
            };
            assert_eq!(c, expected);
        }
        // Boundary values land in the lower class (right-open at the top).
        assert_eq!(RiskClass::classify(0.05), RiskClass::High);
        assert_eq!(RiskClass::classify(0.0125), RiskClass::Low);
    }

    #[test]
    fn crossing_interpolation_examples() {
        let la = 40.0;
        // (0.03, 0.04, 0.06): crossing interpolated halfway into year 2.
        let risks = vec![Some(0.03), Some(0.04), Some(0.06)];
        assert_abs_diff_eq!(crossing_time(&risks, la, 0.05).unwrap(), 41.5, epsilon = 1e-12);
        // All below the threshold: no crossing.
        assert_eq!(crossing_time(&[Some(0.04), Some(0.05)], la, 0.05), None);
        // Strict inequality boundary: 0.05 itself does not cross, the
        // interpolation lands exactly on the previous grid point.
        let risks = vec![Some(0.04), Some(0.05), Some(0.0501)];
        assert_abs_diff_eq!(crossing_time(&risks, la, 0.05).unwrap(), 41.0, epsilon = 1e-12);
        // Above the threshold at the landmark age itself.
        assert_abs_diff_eq!(
            crossing_time(&[Some(0.051), Some(0.06)], la, 0.05).unwrap(),
            40.0
        );
        // Gaps: interpolate between adjacent available points.
        let risks = vec![Some(0.03), None, Some(0.07)];
        assert_abs_diff_eq!(
            crossing_time(&risks, la, 0.05).unwrap(),
            41.0,
            epsilon = 1e-12
        );
    }

    pub(crate) fn pipeline_config(n: usize, seed: u64) -> crate::cohort::SimConfig {
        let mut cfg = recovery_config(n, seed);
        cfg.entry_age_range = (32.0, 40.0);
        cfg.admin_horizon_years = 25.0;
        cfg.age_center = 40.0;
        cfg.baseline_hazard = vec![(0.0, 0.02)];
        cfg
    }

    #[test]
    fn pipeline_on_simulated_cohort() {
        let cohort = simulate_cohort(&pipeline_config(1500, 99)).unwrap();
        let la = LandmarkAge::new(40).unwrap();
        let models = fit_landmark_models(&cohort, la, &LandmarkFitOptions::default()).unwrap();
        assert_eq!(models.cox_5y.len(), N_PREDICTION_TIMES);
        assert_abs_diff_eq!(models.cox_10y.origin, 40.0);
        assert_abs_diff_eq!(models.cox_10y.horizon, 50.0);
        if let Some(f0) = &models.cox_5y[0] {
            assert_abs_diff_eq!(f0.origin, 40.0);
            assert_abs_diff_eq!(f0.horizon, 45.0);
        }
        let members = build_landmark_cohort(&cohort, la);
        let profile = risk_profile(&models, members[0]).unwrap();
        assert_eq!(profile.risks.len(), N_PREDICTION_TIMES);
        for r in profile.risks.iter().flatten() {
            assert!((0.0..=1.0).contains(r));
        }
        assert!(profile.blup_cutoff <= la.value());
    }

    #[test]
    fn prediction_ignores_future_measurements() {
        // Poisoning a measurement after the landmark age must not change the
        // profile: prediction uses only information available at la.
        let cohort = simulate_cohort(&pipeline_config(800, 5)).unwrap();
        let la = LandmarkAge::new(40).unwrap();
        let models = fit_landmark_models(&cohort, la, &LandmarkFitOptions::default()).unwrap();
        let members = build_landmark_cohort(&cohort, la);
        let subject = members
            .iter()
            .find(|r| r.measurements.iter().any(|m| m.age > 41.0))
            .expect("need a person with post-landmark measurements");
        let base = risk_profile(&models, subject).unwrap();
        let mut poisoned = (*subject).clone();
        for m in &mut poisoned.measurements {
            if m.age > 41.0 {
                m.value = 1e9;
            }
        }
        let after = risk_profile(&models, &poisoned).unwrap();
        assert_eq!(base.risks, after.risks);
        assert_eq!(base.t_star, after.t_star);
    }

    #[test]
    fn models_round_trip_through_directory() {
        let cohort = simulate_cohort(&pipeline_config(700, 31)).unwrap();
        let la = LandmarkAge::new(40).unwrap();
        let models = fit_landmark_models(&cohort, la, &LandmarkFitOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        models.save_dir(dir.path(), 123).unwrap();
        let loaded = LandmarkModels::load_dir(dir.path()).unwrap();
        assert_eq!(models, loaded);
    }
}
