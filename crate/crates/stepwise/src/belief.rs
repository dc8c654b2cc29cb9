//! The belief CSV wire format:
//! `task_code,task_step_num,step_state,step_state_confidence,timestamp`
//! with lowercase state literals and fixed 6-decimal numeric rendering.

use std::io::Write;

use crate::state_machine::StepState;
use crate::{Result, StepwiseError};

/// One wire-format row.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefRecord {
    pub task_code: String,
    /// 1-based canonical step number.
    pub task_step_num: u32,
    pub step_state: StepState,
    pub step_state_confidence: f64,
    /// Fractional seconds.
    pub timestamp: f64,
}

impl BeliefRecord {
    pub fn new(
        task_code: impl Into<String>,
        task_step_num: u32,
        step_state: StepState,
        confidence: f64,
        timestamp: f64,
    ) -> Result<Self> {
        let record = Self {
            task_code: task_code.into(),
            task_step_num,
            step_state,
            step_state_confidence: confidence,
            timestamp,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_code.is_empty()
            || self.task_code.contains(',')
            || self.task_code.contains('\n')
        {
            return Err(StepwiseError::InvalidArgument(format!(
                "invalid task code {:?}",
                self.task_code
            )));
        }
        if self.task_step_num == 0 {
            return Err(StepwiseError::InvalidArgument(
                "task step number must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.step_state_confidence) {
            return Err(StepwiseError::InvalidArgument(format!(
                "confidence {} outside [0, 1]",
                self.step_state_confidence
            )));
        }
        if !self.timestamp.is_finite() || self.timestamp < 0.0 {
            return Err(StepwiseError::InvalidArgument(format!(
                "timestamp {} must be finite and >= 0",
                self.timestamp
            )));
        }
        Ok(())
    }
}

const HEADER: &str = "task_code,task_step_num,step_state,step_state_confidence,timestamp";

/// Serializes records; every record is validated before any output is written.
pub fn write_belief<W: Write>(records: &[BeliefRecord], mut w: W) -> Result<()> {
    for rec in records {
        rec.validate()?;
    }
    for rec in records {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6}",
            rec.task_code, rec.task_step_num, rec.step_state, rec.step_state_confidence, rec.timestamp
        )?;
    }
    Ok(())
}

pub fn belief_to_string(records: &[BeliefRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_belief(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("belief output is ASCII"))
}

/// Parses a belief byte stream. An optional leading header row is tolerated;
/// state literals are matched case-insensitively. Every failure names the
/// offending line.
pub fn parse_belief(bytes: &[u8]) -> Result<Vec<BeliefRecord>> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        StepwiseError::Parse {
            line,
            message: "invalid UTF-8".into(),
        }
    })?;
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 && line.to_ascii_lowercase().replace(' ', "") == HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(StepwiseError::Parse {
                line: line_no,
                message: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let err = |message: String| StepwiseError::Parse {
            line: line_no,
            message,
        };
        let task_code = fields[0].trim().to_string();
        let task_step_num: u32 = fields[1]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad step number {:?}", fields[1])))?;
        let step_state = StepState::parse(fields[2].trim())
            .ok_or_else(|| err(format!("unknown state literal {:?}", fields[2])))?;
        let confidence: f64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad confidence {:?}", fields[3])))?;
        let timestamp: f64 = fields[4]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad timestamp {:?}", fields[4])))?;
        let record = BeliefRecord {
            task_code,
            task_step_num,
            step_state,
            step_state_confidence: confidence,
            timestamp,
        };
        record
            .validate()
            .map_err(|e| err(format!("invalid record: {e}")))?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::distributions::{Distribution, Uniform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_list_writes_empty_file() {
        assert_eq!(belief_to_string(&[]).unwrap(), "");
    }

    #[test]
    fn single_record_rendering() {
        let rec = BeliefRecord::new("M2", 1, StepState::Current, 0.9, 12.3).unwrap();
        assert_eq!(belief_to_string(&[rec]).unwrap(), "M2,1,current,0.900000,12.300000\n");
    }

    #[test]
    fn parse_single_row() {
        let records = parse_belief(b"A8,3,done,1.000000,5.000000").unwrap();
        assert_eq!(
            records,
            vec![BeliefRecord {
                task_code: "A8".into(),
                task_step_num: 3,
                step_state: StepState::Done,
                step_state_confidence: 1.0,
                timestamp: 5.0,
            }]
        );
    }

    #[test]
    fn state_literals_are_case_insensitive() {
        let records = parse_belief(b"A8,3,DONE,1.000000,5.000000").unwrap();
        assert_eq!(records[0].step_state, StepState::Done);
    }

    #[test]
    fn wrong_field_count_names_the_line() {
        let err = parse_belief(b"M2,1,current,0.5,0.0\nM2,1,current,0.5\n").unwrap_err();
        match err {
            StepwiseError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn header_row_is_tolerated() {
        let text = b"task_code,task_step_num,step_state,step_state_confidence,timestamp\nM2,1,current,0.5,0.0\n";
        assert_eq!(parse_belief(text).unwrap().len(), 1);
    }

    #[test]
    fn invalid_records_rejected_before_output() {
        let good = BeliefRecord::new("M2", 1, StepState::Current, 0.5, 0.0).unwrap();
        let bad = BeliefRecord {
            step_state_confidence: 1.5,
            ..good.clone()
        };
        let mut buf = Vec::new();
        assert!(write_belief(&[good, bad], &mut buf).is_err());
        assert!(buf.is_empty());
    }

    fn random_record<R: Rng>(rng: &mut R) -> BeliefRecord {
        let codes = ["A8", "M2", "M3", "M4", "M5", "R16", "R18", "R19"];
        let states = [StepState::Unobserved, StepState::Current, StepState::Done];
        // Values on the emitted 6-decimal grid so rendering is lossless.
        BeliefRecord {
            task_code: codes[rng.gen_range(0..codes.len())].to_string(),
            task_step_num: rng.gen_range(1..=8),
            step_state: states[rng.gen_range(0..3)],
            step_state_confidence: rng.gen_range(0..=1_000_000) as f64 / 1e6,
            timestamp: rng.gen_range(0..=600_000_000) as f64 / 1e6,
        }
    }

    #[test]
    fn round_trip_random_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let records: Vec<BeliefRecord> = (0..1000).map(|_| random_record(&mut rng)).collect();
        let text = belief_to_string(&records).unwrap();
        assert_eq!(parse_belief(text.as_bytes()).unwrap(), records);
    }

    #[test]
    fn fuzzed_bytes_never_panic() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let dist = Uniform::new_inclusive(0u8, 255);
        for _ in 0..2000 {
            let len = rng.gen_range(0..200);
            let bytes: Vec<u8> = (0..len).map(|_| dist.sample(&mut rng)).collect();
            let _ = parse_belief(&bytes);
        }
    }
}
