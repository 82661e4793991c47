//! Synthetic primary-care cohort generation.
//!
//! Generates longitudinal records with known ground truth so every downstream
//! stage (mixed model, Cox fits, net-benefit optimiser) can be checked against
//! the generating process. Trajectories of the five time-varying risk factors
//! follow a linear random-intercept/random-slope model; CVD events follow a
//! proportional-hazards model with a piecewise-constant baseline evaluated at
//! the person's latent factor values at study entry.

pub mod io;

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const N_FACTORS: usize = 5;
/// Random-effect dimension: an intercept and a slope per factor.
pub const N_RANDOM: usize = 2 * N_FACTORS;

/// The five time-varying risk factors, in model order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Factor {
    #[serde(rename = "smoke")]
    Smoke,
    Hdl,
    Sbp,
    Tchol,
    Bmi,
}

pub const FACTORS: [Factor; N_FACTORS] = [
    Factor::Smoke,
    Factor::Hdl,
    Factor::Sbp,
    Factor::Tchol,
    Factor::Bmi,
];

impl Factor {
    pub fn index(self) -> usize {
        match self {
            Factor::Smoke => 0,
            Factor::Hdl => 1,
            Factor::Sbp => 2,
            Factor::Tchol => 3,
            Factor::Bmi => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Factor::Smoke => "smoke",
            Factor::Hdl => "HDL",
            Factor::Sbp => "SBP",
            Factor::Tchol => "TCHOL",
            Factor::Bmi => "BMI",
        }
    }

    pub fn from_name(s: &str) -> Option<Factor> {
        match s {
            "smoke" => Some(Factor::Smoke),
            "HDL" => Some(Factor::Hdl),
            "SBP" => Some(Factor::Sbp),
            "TCHOL" => Some(Factor::Tchol),
            "BMI" => Some(Factor::Bmi),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "F")]
    Female,
}

impl Sex {
    pub fn code(self) -> &'static str {
        match self {
            Sex::Male => "M",
            Sex::Female => "F",
        }
    }

    pub fn from_code(s: &str) -> Option<Sex> {
        match s {
            "M" => Some(Sex::Male),
            "F" => Some(Sex::Female),
            _ => None,
        }
    }
}

/// Comorbidities known at study entry, plus the deprivation category.
///
/// Blood-pressure medication and statins are not listed here: both are
/// anchored to a first-prescription age on the record, from which point-in-time
/// indicators are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedCovariates {
    pub diabetes: bool,
    pub renal_disease: bool,
    pub depression: bool,
    pub migraine: bool,
    pub severe_mental_illness: bool,
    pub rheumatoid_arthritis: bool,
    pub atrial_fibrillation: bool,
    /// Deprivation category, 1..=20.
    pub townsend: u8,
}

pub const COMORBIDITY_NAMES: [&str; 7] = [
    "diabetes",
    "renal_disease",
    "depression",
    "migraine",
    "severe_mental_illness",
    "rheumatoid_arthritis",
    "atrial_fibrillation",
];

impl FixedCovariates {
    pub fn comorbidity(&self, name: &str) -> Option<bool> {
        match name {
            "diabetes" => Some(self.diabetes),
            "renal_disease" => Some(self.renal_disease),
            "depression" => Some(self.depression),
            "migraine" => Some(self.migraine),
            "severe_mental_illness" => Some(self.severe_mental_illness),
            "rheumatoid_arthritis" => Some(self.rheumatoid_arthritis),
            "atrial_fibrillation" => Some(self.atrial_fibrillation),
            _ => None,
        }
    }
}

/// One repeated measurement of one factor, with the treatment state in force
/// when it was taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub age: f64,
    pub factor: Factor,
    pub value: f64,
    pub bpm: bool,
    pub statin: bool,
}

/// One person's follow-up: fixed covariates, irregular repeated measurements
/// and the ages of entry, exit and any events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalRecord {
    pub person_id: u64,
    pub practice_id: u32,
    pub sex: Sex,
    pub entry_age: f64,
    pub exit_age: f64,
    pub fixed: FixedCovariates,
    /// Sorted by age.
    pub measurements: Vec<Measurement>,
    pub event_age: Option<f64>,
    pub death_age: Option<f64>,
    pub statin_start_age: Option<f64>,
    pub bpm_start_age: Option<f64>,
}

impl LongitudinalRecord {
    /// Checks the ordering invariants: entry <= measurement ages <= exit,
    /// event/death/statin ages inside follow-up, measurements sorted.
    pub fn validate(&self) -> Result<()> {
        if !(self.entry_age.is_finite() && self.exit_age.is_finite()) {
            return Err(Error::data(format!(
                "person {}: non-finite entry/exit age",
                self.person_id
            )));
        }
        if self.entry_age > self.exit_age {
            return Err(Error::data(format!(
                "person {}: entry age {} after exit age {}",
                self.person_id, self.entry_age, self.exit_age
            )));
        }
        let mut prev = self.entry_age;
        for m in &self.measurements {
            if m.age < prev {
                return Err(Error::data(format!(
                    "person {}: measurements not sorted or before entry",
                    self.person_id
                )));
            }
            if m.age > self.exit_age {
                return Err(Error::data(format!(
                    "person {}: measurement after exit",
                    self.person_id
                )));
            }
            prev = m.age;
        }
        for (label, age) in [
            ("event", self.event_age),
            ("death", self.death_age),
            ("statin start", self.statin_start_age),
        ] {
            if let Some(a) = age {
                if a < self.entry_age || a > self.exit_age {
                    return Err(Error::data(format!(
                        "person {}: {} age {} outside [{}, {}]",
                        self.person_id, label, a, self.entry_age, self.exit_age
                    )));
                }
            }
        }
        if !(1..=20).contains(&self.fixed.townsend) {
            return Err(Error::data(format!(
                "person {}: townsend category {} outside 1..=20",
                self.person_id, self.fixed.townsend
            )));
        }
        Ok(())
    }

    /// Whether the person is on BP medication at `age` (first prescription at
    /// or before `age`).
    pub fn bpm_active(&self, age: f64) -> bool {
        self.bpm_start_age.map_or(false, |a| a <= age)
    }

    pub fn statin_active(&self, age: f64) -> bool {
        self.statin_start_age.map_or(false, |a| a <= age)
    }
}

/// Fixed effects of the trajectory model: per-factor intercept and slope on
/// (age - age_center), plus the treatment adjustments on SBP and TCHOL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEffects {
    pub intercepts: [f64; N_FACTORS],
    pub slopes: [f64; N_FACTORS],
    pub sbp_bpm: f64,
    pub tchol_statin: f64,
}

impl TrajectoryEffects {
    /// Population mean of factor `k` at centered age `t`, given treatment state.
    pub fn mean(&self, k: usize, t: f64, bpm: bool, statin: bool) -> f64 {
        let mut v = self.intercepts[k] + self.slopes[k] * t;
        if k == Factor::Sbp.index() && bpm {
            v += self.sbp_bpm;
        }
        if k == Factor::Tchol.index() && statin {
            v += self.tchol_statin;
        }
        v
    }
}

/// Prevalence of each entry comorbidity, drawn independently per person.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComorbidityPrevalence {
    pub diabetes: f64,
    pub renal_disease: f64,
    pub depression: f64,
    pub migraine: f64,
    pub severe_mental_illness: f64,
    pub rheumatoid_arthritis: f64,
    pub atrial_fibrillation: f64,
}

impl Default for ComorbidityPrevalence {
    fn default() -> Self {
        ComorbidityPrevalence {
            diabetes: 0.03,
            renal_disease: 0.01,
            depression: 0.15,
            migraine: 0.08,
            severe_mental_illness: 0.01,
            rheumatoid_arthritis: 0.01,
            atrial_fibrillation: 0.005,
        }
    }
}

/// Log-hazard contributions of the entry comorbidities and deprivation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ComorbidityHazard {
    pub diabetes: f64,
    pub renal_disease: f64,
    pub depression: f64,
    pub migraine: f64,
    pub severe_mental_illness: f64,
    pub rheumatoid_arthritis: f64,
    pub atrial_fibrillation: f64,
    /// Per level of the deprivation category, centered at 10.5.
    pub townsend_per_level: f64,
}

/// Treatment-initiation rule: persons whose latent event linear predictor
/// exceeds `lp_threshold` start the treatment `delay_years` after entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreatmentRule {
    pub lp_threshold: f64,
    pub delay_years: f64,
}

impl TreatmentRule {
    pub fn never() -> Self {
        TreatmentRule {
            lp_threshold: f64::INFINITY,
            delay_years: 0.0,
        }
    }
}

fn default_female_fraction() -> f64 {
    0.5
}
fn default_max_age() -> f64 {
    95.0
}
fn default_death_rate() -> f64 {
    0.0
}
fn default_treatment_rule() -> TreatmentRule {
    TreatmentRule::never()
}

/// Full generating model for a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_persons: usize,
    pub n_practices: usize,
    #[serde(default = "default_female_fraction")]
    pub female_fraction: f64,
    /// (min, max) entry age in years, uniform.
    pub entry_age_range: (f64, f64),
    /// Follow-up ends at min(dropout, death, max_age, entry + admin_horizon).
    #[serde(default = "default_max_age")]
    pub max_age: f64,
    pub admin_horizon_years: f64,
    /// Trajectories and hazards are defined on (age - age_center).
    pub age_center: f64,
    pub beta: TrajectoryEffects,
    /// Row-major 10x10 covariance of (intercepts, slopes); must be symmetric PSD.
    pub sigma: Vec<f64>,
    pub sigma_e: [f64; N_FACTORS],
    /// Log-hazard per unit of each latent factor value at entry.
    pub cox_beta_factors: [f64; N_FACTORS],
    #[serde(default)]
    pub cox_beta_comorbidity: ComorbidityHazard,
    /// Piecewise-constant baseline hazard: (age_from, events/year), sorted by
    /// age. A single pair gives a constant hazard.
    pub baseline_hazard: Vec<(f64, f64)>,
    /// Expected measurement visits per year (homogeneous Poisson process).
    pub visit_rate: f64,
    /// Per-factor probability that a scheduled measurement is absent.
    pub missing_prob: [f64; N_FACTORS],
    /// Non-CVD dropout hazard per year.
    pub censor_rate: f64,
    #[serde(default = "default_death_rate")]
    pub death_rate: f64,
    #[serde(default)]
    pub comorbidity_prevalence: ComorbidityPrevalence,
    #[serde(default = "default_treatment_rule")]
    pub bpm_rule: TreatmentRule,
    #[serde(default = "default_treatment_rule")]
    pub statin_rule: TreatmentRule,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.len() != N_RANDOM * N_RANDOM {
            return Err(Error::config(format!(
                "sigma must be {0}x{0} row-major, got {1} entries",
                N_RANDOM,
                self.sigma.len()
            )));
        }
        let s = DMatrix::from_row_slice(N_RANDOM, N_RANDOM, &self.sigma);
        let max = self.sigma.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..N_RANDOM {
            for j in 0..i {
                if (s[(i, j)] - s[(j, i)]).abs() > 1e-9 * (1.0 + max) {
                    return Err(Error::config("sigma is not symmetric".to_string()));
                }
            }
        }
        // PSD check through the eigendecomposition (semi-definite allowed).
        let eig = s.symmetric_eigenvalues();
        if eig.iter().any(|&e| e < -1e-8 * (1.0 + max)) {
            return Err(Error::config(
                "sigma is not positive semi-definite".to_string(),
            ));
        }
        if self.sigma_e.iter().any(|&v| v < 0.0) {
            return Err(Error::config("sigma_e must be non-negative".to_string()));
        }
        for (name, rate) in [
            ("visit_rate", self.visit_rate),
            ("censor_rate", self.censor_rate),
            ("death_rate", self.death_rate),
        ] {
            if !(rate >= 0.0) {
                return Err(Error::config(format!("{name} must be >= 0")));
            }
        }
        if self.baseline_hazard.is_empty()
            || self.baseline_hazard.iter().any(|&(_, r)| !(r >= 0.0))
            || self.baseline_hazard.windows(2).any(|w| w[0].0 >= w[1].0)
        {
            return Err(Error::config(
                "baseline_hazard must be non-empty, sorted by age, with rates >= 0".to_string(),
            ));
        }
        if self.missing_prob.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::config("missing_prob must be in [0,1]".to_string()));
        }
        if !(0.0..=1.0).contains(&self.female_fraction) {
            return Err(Error::config("female_fraction must be in [0,1]".to_string()));
        }
        if self.entry_age_range.0 > self.entry_age_range.1 {
            return Err(Error::config("entry_age_range min > max".to_string()));
        }
        if self.n_practices == 0 {
            return Err(Error::config("n_practices must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Factor-decomposition of sigma for sampling (works for semi-definite
    /// matrices, unlike a plain Cholesky).
    fn sigma_factor(&self) -> Result<DMatrix<f64>> {
        let s = DMatrix::from_row_slice(N_RANDOM, N_RANDOM, &self.sigma);
        let eig = s.symmetric_eigen();
        let mut f = eig.eigenvectors.clone();
        for j in 0..N_RANDOM {
            let l = eig.eigenvalues[j].max(0.0).sqrt();
            for i in 0..N_RANDOM {
                f[(i, j)] *= l;
            }
        }
        Ok(f)
    }
}

/// Per-person latent state kept aside for oracle tests; not part of the
/// observable cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonTruth {
    pub person_id: u64,
    pub random_effects: [f64; N_RANDOM],
    /// Event-model linear predictor (latent factor values at entry plus
    /// comorbidity terms).
    pub linear_predictor: f64,
    /// Event age with no censoring applied (None if beyond age 200).
    pub uncensored_event_age: Option<f64>,
}

/// Cumulative baseline hazard of the piecewise-constant `segments` between
/// ages `from` and `to`.
pub fn piecewise_cumhaz(segments: &[(f64, f64)], from: f64, to: f64) -> f64 {
    if to <= from {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, &(start, rate)) in segments.iter().enumerate() {
        let end = segments.get(i + 1).map_or(f64::INFINITY, |s| s.0);
        let a = start.max(from);
        let b = end.min(to);
        if b > a {
            total += rate * (b - a);
        }
    }
    // Hazard is zero before the first segment.
    total
}

/// Inverts `cumhaz(segments, from, t) * scale = target`, returning the event
/// age, or None if the target is never reached by `age_cap`.
fn invert_cumhaz(segments: &[(f64, f64)], from: f64, scale: f64, target: f64, age_cap: f64) -> Option<f64> {
    let mut remaining = target / scale;
    for (i, &(start, rate)) in segments.iter().enumerate() {
        let end = segments.get(i + 1).map_or(age_cap, |s| s.0.min(age_cap));
        let a = start.max(from);
        let b = end;
        if b <= a {
            continue;
        }
        let seg = rate * (b - a);
        if seg >= remaining {
            if rate <= 0.0 {
                continue;
            }
            return Some(a + remaining / rate);
        }
        remaining -= seg;
        if b >= age_cap {
            break;
        }
    }
    None
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn person_rng(seed: u64, person_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(person_id.wrapping_add(1))))
}

fn sample_exp(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -u.ln() / rate
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

fn simulate_person(cfg: &SimConfig, sigma_factor: &DMatrix<f64>, person_id: u64) -> (LongitudinalRecord, PersonTruth) {
    let mut rng = person_rng(cfg.seed, person_id);
    let practice_id = rng.gen_range(0..cfg.n_practices as u32);
    let sex = if rng.gen_bool(cfg.female_fraction) {
        Sex::Female
    } else {
        Sex::Male
    };
    let entry_age = if cfg.entry_age_range.1 > cfg.entry_age_range.0 {
        rng.gen_range(cfg.entry_age_range.0..cfg.entry_age_range.1)
    } else {
        cfg.entry_age_range.0
    };

    // Latent random effects u = F z with z iid standard normal.
    let z: Vec<f64> = (0..N_RANDOM).map(|_| standard_normal(&mut rng)).collect();
    let mut u = [0.0; N_RANDOM];
    for i in 0..N_RANDOM {
        let mut acc = 0.0;
        for j in 0..N_RANDOM {
            acc += sigma_factor[(i, j)] * z[j];
        }
        u[i] = acc;
    }

    let p = &cfg.comorbidity_prevalence;
    let fixed = FixedCovariates {
        diabetes: rng.gen_bool(p.diabetes),
        renal_disease: rng.gen_bool(p.renal_disease),
        depression: rng.gen_bool(p.depression),
        migraine: rng.gen_bool(p.migraine),
        severe_mental_illness: rng.gen_bool(p.severe_mental_illness),
        rheumatoid_arthritis: rng.gen_bool(p.rheumatoid_arthritis),
        atrial_fibrillation: rng.gen_bool(p.atrial_fibrillation),
        townsend: rng.gen_range(1..=20),
    };

    // Event linear predictor from latent factor values at entry.
    let t_entry = entry_age - cfg.age_center;
    let mut lp = 0.0;
    for k in 0..N_FACTORS {
        let latent = cfg.beta.mean(k, t_entry, false, false) + u[2 * k] + u[2 * k + 1] * t_entry;
        lp += cfg.cox_beta_factors[k] * latent;
    }
    let ch = &cfg.cox_beta_comorbidity;
    for (name, b) in [
        ("diabetes", ch.diabetes),
        ("renal_disease", ch.renal_disease),
        ("depression", ch.depression),
        ("migraine", ch.migraine),
        ("severe_mental_illness", ch.severe_mental_illness),
        ("rheumatoid_arthritis", ch.rheumatoid_arthritis),
        ("atrial_fibrillation", ch.atrial_fibrillation),
    ] {
        if fixed.comorbidity(name).unwrap() {
            lp += b;
        }
    }
    lp += ch.townsend_per_level * (fixed.townsend as f64 - 10.5);

    // Treatment initiation by latent-risk threshold.
    let bpm_start = (lp > cfg.bpm_rule.lp_threshold).then(|| entry_age + cfg.bpm_rule.delay_years);
    let statin_start =
        (lp > cfg.statin_rule.lp_threshold).then(|| entry_age + cfg.statin_rule.delay_years);

    // Uncensored event age by inverting the cumulative hazard.
    let target: f64 = sample_exp(&mut rng, 1.0);
    let uncensored_event = invert_cumhaz(&cfg.baseline_hazard, entry_age, lp.exp(), target, 200.0);

    // Exit: first of dropout, death, max age, administrative end.
    let dropout_age = entry_age + sample_exp(&mut rng, cfg.censor_rate);
    let death_candidate = entry_age + sample_exp(&mut rng, cfg.death_rate);
    let exit_age = dropout_age
        .min(death_candidate)
        .min(cfg.max_age)
        .min(entry_age + cfg.admin_horizon_years);
    let death_age = (death_candidate == exit_age && death_candidate.is_finite()).then_some(death_candidate);
    let event_age = uncensored_event.filter(|&t| t <= exit_age);

    // Measurement visits: homogeneous Poisson process over follow-up.
    let span = (exit_age - entry_age).max(0.0);
    let n_visits = if cfg.visit_rate * span > 0.0 {
        Poisson::new(cfg.visit_rate * span).map(|d| d.sample(&mut rng) as usize).unwrap_or(0)
    } else {
        0
    };
    let mut visit_ages: Vec<f64> = (0..n_visits)
        .map(|_| entry_age + rng.gen_range(0.0..1.0) * span)
        .collect();
    visit_ages.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut measurements = Vec::new();
    for &age in &visit_ages {
        let bpm = bpm_start.map_or(false, |a| a <= age);
        let statin = statin_start.map_or(false, |a| a <= age);
        let t = age - cfg.age_center;
        for k in 0..N_FACTORS {
            if rng.gen_bool(1.0 - cfg.missing_prob[k]) {
                let mean = cfg.beta.mean(k, t, bpm, statin) + u[2 * k] + u[2 * k + 1] * t;
                let value = mean + cfg.sigma_e[k] * standard_normal(&mut rng);
                measurements.push(Measurement {
                    age,
                    factor: FACTORS[k],
                    value,
                    bpm,
                    statin,
                });
            }
        }
    }

    let record = LongitudinalRecord {
        person_id,
        practice_id,
        sex,
        entry_age,
        exit_age,
        fixed,
        measurements,
        event_age,
        death_age,
        statin_start_age: statin_start.filter(|&a| a <= exit_age),
        bpm_start_age: bpm_start.filter(|&a| a <= exit_age),
    };
    let truth = PersonTruth {
        person_id,
        random_effects: u,
        linear_predictor: lp,
        uncensored_event_age: uncensored_event,
    };
    (record, truth)
}

/// Generates the cohort together with the per-person latent truth.
///
/// Deterministic given the seed: each person draws from an independent stream
/// keyed by (seed, person_id), so generation parallelises without changing the
/// output.
pub fn simulate_cohort_with_truth(cfg: &SimConfig) -> Result<(Vec<LongitudinalRecord>, Vec<PersonTruth>)> {
    cfg.validate()?;
    let factor = cfg.sigma_factor()?;
    let pairs: Vec<(LongitudinalRecord, PersonTruth)> = (0..cfg.n_persons as u64)
        .into_par_iter()
        .map(|pid| simulate_person(cfg, &factor, pid))
        .collect();
    Ok(pairs.into_iter().unzip())
}

pub fn simulate_cohort(cfg: &SimConfig) -> Result<Vec<LongitudinalRecord>> {
    simulate_cohort_with_truth(cfg).map(|(records, _)| records)
}

/// Splits a cohort into derivation and validation sets by practice: every
/// person of a practice lands on the same side.
///
/// The derivation side receives floor(fraction * n_practices) practices
/// (snapped to the nearest integer when the product is within 1e-9 of one).
pub fn split_practices(
    cohort: Vec<LongitudinalRecord>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<LongitudinalRecord>, Vec<LongitudinalRecord>)> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::config(format!(
            "split fraction must be in (0,1), got {fraction}"
        )));
    }
    let mut practices: Vec<u32> = cohort.iter().map(|r| r.practice_id).collect();
    practices.sort_unstable();
    practices.dedup();
    if practices.len() < 2 {
        return Err(Error::data(format!(
            "need at least 2 practices to split, got {}",
            practices.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5917_ac71_u64));
    // Fisher-Yates on the sorted practice list.
    for i in (1..practices.len()).rev() {
        let j = rng.gen_range(0..=i);
        practices.swap(i, j);
    }
    let x = fraction * practices.len() as f64;
    let n_der = if (x - x.round()).abs() < 1e-9 {
        x.round() as usize
    } else {
        x.floor() as usize
    };
    let n_der = n_der.clamp(1, practices.len() - 1);
    let derivation_set: std::collections::HashSet<u32> =
        practices[..n_der].iter().copied().collect();
    let (derivation, validation) = cohort
        .into_iter()
        .partition(|r| derivation_set.contains(&r.practice_id));
    Ok((derivation, validation))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> SimConfig {
        SimConfig {
            n_persons: 200,
            n_practices: 6,
            female_fraction: 0.5,
            entry_age_range: (35.0, 45.0),
            max_age: 95.0,
            admin_horizon_years: 12.0,
            age_center: 40.0,
            beta: TrajectoryEffects {
                intercepts: [0.3, -0.2, 0.0, 0.1, 0.2],
                slopes: [0.0, 0.01, 0.02, 0.015, 0.01],
                sbp_bpm: -0.3,
                tchol_statin: -0.5,
            },
            sigma: {
                let mut s = vec![0.0; 100];
                for k in 0..10 {
                    s[k * 10 + k] = if k % 2 == 0 { 0.25 } else { 0.002 };
                }
                s
            },
            sigma_e: [0.3, 0.3, 0.4, 0.35, 0.3],
            cox_beta_factors: [0.5, -0.4, 0.6, 0.4, 0.2],
            cox_beta_comorbidity: ComorbidityHazard {
                diabetes: 0.5,
                ..Default::default()
            },
            baseline_hazard: vec![(0.0, 0.01)],
            visit_rate: 0.8,
            missing_prob: [0.2; 5],
            censor_rate: 0.02,
            death_rate: 0.005,
            comorbidity_prevalence: ComorbidityPrevalence::default(),
            bpm_rule: TreatmentRule {
                lp_threshold: 0.5,
                delay_years: 2.0,
            },
            statin_rule: TreatmentRule {
                lp_threshold: 1.0,
                delay_years: 4.0,
            },
            seed: 7,
        }
    }

    #[test]
    fn determinism_same_seed() {
        let cfg = small_config();
        let a = simulate_cohort(&cfg).unwrap();
        let b = simulate_cohort(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_hazard_no_events() {
        let mut cfg = small_config();
        cfg.baseline_hazard = vec![(0.0, 0.0)];
        let cohort = simulate_cohort(&cfg).unwrap();
        assert!(cohort.iter().all(|r| r.event_age.is_none()));
    }

    #[test]
    fn records_satisfy_invariants() {
        let cohort = simulate_cohort(&small_config()).unwrap();
        for r in &cohort {
            r.validate().unwrap();
        }
    }

    #[test]
    fn empty_cohort_is_not_an_error() {
        let mut cfg = small_config();
        cfg.n_persons = 0;
        assert!(simulate_cohort(&cfg).unwrap().is_empty());
    }

    #[test]
    fn non_psd_sigma_rejected() {
        let mut cfg = small_config();
        cfg.sigma[0] = -1.0;
        assert!(matches!(simulate_cohort(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn split_by_practice_is_a_partition() {
        let cfg = small_config();
        let cohort = simulate_cohort(&cfg).unwrap();
        let n = cohort.len();
        let (der, val) = split_practices(cohort, 2.0 / 3.0, 11).unwrap();
        assert_eq!(der.len() + val.len(), n);
        let der_p: std::collections::HashSet<u32> = der.iter().map(|r| r.practice_id).collect();
        let val_p: std::collections::HashSet<u32> = val.iter().map(|r| r.practice_id).collect();
        assert!(der_p.is_disjoint(&val_p));
    }

    #[test]
    fn split_sizes_match_fraction() {
        // 3 practices at 2/3 -> 2 vs 1; 406 at 2/3 -> 270 vs 136.
        for (n_practices, expect_der) in [(3u32, 2usize), (406, 270)] {
            let cohort: Vec<LongitudinalRecord> = (0..n_practices)
                .map(|p| LongitudinalRecord {
                    person_id: p as u64,
                    practice_id: p,
                    sex: Sex::Female,
                    entry_age: 40.0,
                    exit_age: 50.0,
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
                    event_age: None,
                    death_age: None,
                    statin_start_age: None,
                    bpm_start_age: None,
                })
                .collect();
            let (der, val) = split_practices(cohort, 2.0 / 3.0, 5).unwrap();
            let der_p: std::collections::HashSet<u32> =
                der.iter().map(|r| r.practice_id).collect();
            assert_eq!(der_p.len(), expect_der);
            assert_eq!(der.len() + val.len(), n_practices as usize);
        }
    }

    #[test]
    fn split_deterministic() {
        let cfg = small_config();
        let cohort = simulate_cohort(&cfg).unwrap();
        let (d1, v1) = split_practices(cohort.clone(), 0.5, 3).unwrap();
        let (d2, v2) = split_practices(cohort, 0.5, 3).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn single_practice_split_errors() {
        let mut cfg = small_config();
        cfg.n_practices = 1;
        let cohort = simulate_cohort(&cfg).unwrap();
        assert!(split_practices(cohort, 0.5, 1).is_err());
    }

    #[test]
    fn exponential_event_fraction_matches_closed_form() {
        // Constant hazard 0.02/yr, no covariate effects, no censoring, 10y:
        // P(event) = 1 - exp(-0.2).
        let mut cfg = small_config();
        cfg.n_persons = 50_000;
        cfg.baseline_hazard = vec![(0.0, 0.02)];
        cfg.cox_beta_factors = [0.0; 5];
        cfg.cox_beta_comorbidity = ComorbidityHazard::default();
        cfg.censor_rate = 0.0;
        cfg.death_rate = 0.0;
        cfg.admin_horizon_years = 10.0;
        cfg.visit_rate = 0.0;
        cfg.bpm_rule = TreatmentRule::never();
        cfg.statin_rule = TreatmentRule::never();
        let cohort = simulate_cohort(&cfg).unwrap();
        let frac = cohort.iter().filter(|r| r.event_age.is_some()).count() as f64
            / cohort.len() as f64;
        let expected = 1.0 - (-0.2f64).exp();
        assert!(
            (frac - expected).abs() < 0.005,
            "event fraction {frac} vs {expected}"
        );
    }

    #[test]
    fn mean_trajectory_tracks_fixed_effects() {
        let mut cfg = small_config();
        cfg.n_persons = 4000;
        cfg.visit_rate = 1.5;
        cfg.bpm_rule = TreatmentRule::never();
        cfg.statin_rule = TreatmentRule::never();
        let cohort = simulate_cohort(&cfg).unwrap();
        // Regress SBP on centered age across everyone; slope should approach
        // the generating slope.
        let (mut sx, mut sy, mut sxx, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for r in &cohort {
            for m in &r.measurements {
                if m.factor == Factor::Sbp {
                    let t = m.age - cfg.age_center;
                    sx += t;
                    sy += m.value;
                    sxx += t * t;
                    sxy += t * m.value;
                    n += 1.0;
                }
            }
        }
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let intercept = (sy - slope * sx) / n;
        assert!((slope - cfg.beta.slopes[2]).abs() < 0.01, "slope {slope}");
        assert!(
            (intercept - cfg.beta.intercepts[2]).abs() < 0.05,
            "intercept {intercept}"
        );
    }
}
