//! Long-format CSV serialisation of cohorts.
//!
//! `persons.csv` has one row per person (fixed covariates and key ages);
//! `measurements.csv` has one row per measurement with the treatment flags in
//! force when it was taken. Comma separated, header row, UTF-8, `.` decimal.

use super::{Factor, FixedCovariates, LongitudinalRecord, Measurement, Sex};
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

const PERSON_HEADER: [&str; 17] = [
    "person_id",
    "practice_id",
    "sex",
    "entry_age",
    "exit_age",
    "event_age",
    "death_age",
    "statin_start_age",
    "bpm_start_age",
    "diabetes",
    "renal_disease",
    "depression",
    "migraine",
    "severe_mental_illness",
    "rheumatoid_arthritis",
    "atrial_fibrillation",
    "townsend",
];

const MEASUREMENT_HEADER: [&str; 7] = [
    "person_id",
    "practice_id",
    "age",
    "factor",
    "value",
    "bpm",
    "statin",
];

fn opt_age(v: Option<f64>) -> String {
    v.map(|a| a.to_string()).unwrap_or_default()
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn write_cohort_csv(
    records: &[LongitudinalRecord],
    persons_path: &Path,
    measurements_path: &Path,
) -> Result<()> {
    let mut pw = csv::Writer::from_path(persons_path)?;
    pw.write_record(PERSON_HEADER)?;
    for r in records {
        pw.write_record([
            r.person_id.to_string(),
            r.practice_id.to_string(),
            r.sex.code().to_string(),
            r.entry_age.to_string(),
            r.exit_age.to_string(),
            opt_age(r.event_age),
            opt_age(r.death_age),
            opt_age(r.statin_start_age),
            opt_age(r.bpm_start_age),
            flag(r.fixed.diabetes).to_string(),
            flag(r.fixed.renal_disease).to_string(),
            flag(r.fixed.depression).to_string(),
            flag(r.fixed.migraine).to_string(),
            flag(r.fixed.severe_mental_illness).to_string(),
            flag(r.fixed.rheumatoid_arthritis).to_string(),
            flag(r.fixed.atrial_fibrillation).to_string(),
            r.fixed.townsend.to_string(),
        ])?;
    }
    pw.flush()?;

    let mut mw = csv::Writer::from_path(measurements_path)?;
    mw.write_record(MEASUREMENT_HEADER)?;
    for r in records {
        for m in &r.measurements {
            mw.write_record([
                r.person_id.to_string(),
                r.practice_id.to_string(),
                m.age.to_string(),
                m.factor.name().to_string(),
                m.value.to_string(),
                flag(m.bpm).to_string(),
                flag(m.statin).to_string(),
            ])?;
        }
    }
    mw.flush()?;
    Ok(())
}

fn parse_f64(s: &str, ctx: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::data(format!("cannot parse `{s}` as number in {ctx}")))
}

fn parse_opt_f64(s: &str, ctx: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(s, ctx).map(Some)
    }
}

fn parse_flag(s: &str, ctx: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::data(format!("expected 0/1, got `{s}` in {ctx}"))),
    }
}

pub fn read_cohort_csv(persons_path: &Path, measurements_path: &Path) -> Result<Vec<LongitudinalRecord>> {
    let mut reader = csv::Reader::from_path(persons_path)?;
    let mut records: Vec<LongitudinalRecord> = Vec::new();
    let mut index: BTreeMap<u64, usize> = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        if row.len() != PERSON_HEADER.len() {
            return Err(Error::data(format!(
                "persons row has {} fields, expected {}",
                row.len(),
                PERSON_HEADER.len()
            )));
        }
        let person_id: u64 = row[0]
            .parse()
            .map_err(|_| Error::data(format!("bad person_id `{}`", &row[0])))?;
        let record = LongitudinalRecord {
            person_id,
            practice_id: row[1]
                .parse()
                .map_err(|_| Error::data(format!("bad practice_id `{}`", &row[1])))?,
            sex: Sex::from_code(&row[2])
                .ok_or_else(|| Error::data(format!("bad sex code `{}`", &row[2])))?,
            entry_age: parse_f64(&row[3], "entry_age")?,
            exit_age: parse_f64(&row[4], "exit_age")?,
            event_age: parse_opt_f64(&row[5], "event_age")?,
            death_age: parse_opt_f64(&row[6], "death_age")?,
            statin_start_age: parse_opt_f64(&row[7], "statin_start_age")?,
            bpm_start_age: parse_opt_f64(&row[8], "bpm_start_age")?,
            fixed: FixedCovariates {
                diabetes: parse_flag(&row[9], "diabetes")?,
                renal_disease: parse_flag(&row[10], "renal_disease")?,
                depression: parse_flag(&row[11], "depression")?,
                migraine: parse_flag(&row[12], "migraine")?,
                severe_mental_illness: parse_flag(&row[13], "severe_mental_illness")?,
                rheumatoid_arthritis: parse_flag(&row[14], "rheumatoid_arthritis")?,
                atrial_fibrillation: parse_flag(&row[15], "atrial_fibrillation")?,
                townsend: row[16]
                    .parse()
                    .map_err(|_| Error::data(format!("bad townsend `{}`", &row[16])))?,
            },
            measurements: Vec::new(),
        };
        if index.insert(person_id, records.len()).is_some() {
            return Err(Error::data(format!("duplicate person_id {person_id}")));
        }
        records.push(record);
    }

    let mut reader = csv::Reader::from_path(measurements_path)?;
    for row in reader.records() {
        let row = row?;
        if row.len() != MEASUREMENT_HEADER.len() {
            return Err(Error::data(format!(
                "measurements row has {} fields, expected {}",
                row.len(),
                MEASUREMENT_HEADER.len()
            )));
        }
        let person_id: u64 = row[0]
            .parse()
            .map_err(|_| Error::data(format!("bad person_id `{}`", &row[0])))?;
        let idx = *index
            .get(&person_id)
            .ok_or_else(|| Error::data(format!("measurement for unknown person {person_id}")))?;
        records[idx].measurements.push(Measurement {
            age: parse_f64(&row[2], "age")?,
            factor: Factor::from_name(&row[3])
                .ok_or_else(|| Error::data(format!("unknown factor `{}`", &row[3])))?,
            value: parse_f64(&row[4], "value")?,
            bpm: parse_flag(&row[5], "bpm")?,
            statin: parse_flag(&row[6], "statin")?,
        });
    }
    for r in &mut records {
        r.measurements
            .sort_by(|a, b| a.age.partial_cmp(&b.age).unwrap());
        r.validate()?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{simulate_cohort, tests::small_config};

    #[test]
    fn csv_round_trip() {
        let cohort = simulate_cohort(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let persons = dir.path().join("persons.csv");
        let meas = dir.path().join("measurements.csv");
        write_cohort_csv(&cohort, &persons, &meas).unwrap();
        let back = read_cohort_csv(&persons, &meas).unwrap();
        assert_eq!(cohort, back);
    }
}
