//! Raw trial CSV and aggregate JSON outputs.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{LossAggregate, TrialRecord};
use crate::loss::LossKind;
use crate::solver::Termination;

pub const CSV_HEADER: &str = "trial_id,loss,dim,error_trans,error_rot,iterations,time_us,termination,nees";

/// Provenance written into every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputMeta {
    pub seed: u64,
    pub version: String,
    pub config_hash: String,
    /// Omitted for byte-reproducible output.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
}

/// One CSV line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub trial_id: u64,
    pub loss: LossKind,
    pub dim: usize,
    pub error_trans: f64,
    pub error_rot: Option<f64>,
    pub iterations: usize,
    pub time_us: u64,
    pub termination: Termination,
    pub nees: Option<f64>,
}

impl CsvRow {
    pub fn from_record(r: &TrialRecord, include_timing: bool) -> Self {
        Self {
            trial_id: r.trial_id,
            loss: r.loss,
            dim: r.dim,
            error_trans: r.error_trans,
            error_rot: r.error_rot,
            iterations: r.iterations,
            time_us: if include_timing { r.time_us } else { 0 },
            termination: r.termination,
            nees: r.nees(),
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Writes `# key=value` provenance lines followed by the header and one row per record.
///
/// Without `include_timing` every `time_us` is written as 0, so repeated runs
/// produce identical bytes.
pub fn write_trials_csv<W: Write>(
    mut out: W,
    meta: &OutputMeta,
    records: &[TrialRecord],
    include_timing: bool,
) -> Result<()> {
    writeln!(out, "# seed={} version={} config_hash={}", meta.seed, meta.version, meta.config_hash)?;
    if let Some(ts) = &meta.generated_at {
        writeln!(out, "# generated={ts}")?;
    }
    let mut writer = csv::Writer::from_writer(out);
    for r in records {
        writer.serialize(CsvRow::from_record(r, include_timing)).map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads rows written by [`write_trials_csv`], skipping comment lines.
pub fn read_trials_csv<R: Read>(input: R) -> Result<Vec<CsvRow>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let header = reader.headers().map_err(csv_error)?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(Error::Parse(format!("unexpected header `{header}`")));
    }
    reader.deserialize().map(|row| row.map_err(csv_error)).collect()
}

/// Results of several experiments keyed by experiment name, then loss name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub meta: OutputMeta,
    pub experiments: BTreeMap<String, BTreeMap<String, LossAggregate>>,
}

impl AggregateTable {
    pub fn new(meta: OutputMeta) -> Self {
        Self { meta, experiments: BTreeMap::new() }
    }

    pub fn insert(&mut self, experiment: &str, aggregates: &[LossAggregate]) {
        let entry = self.experiments.entry(experiment.to_string()).or_default();
        for a in aggregates {
            entry.insert(a.loss.to_string(), a.clone());
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn meta() -> OutputMeta {
        OutputMeta { seed: 7, version: "0.1.0".into(), config_hash: "abc".into(), generated_at: None }
    }

    #[test]
    fn csv_round_trip() {
        let records = vec![
            TrialRecord { trial_id: 3, error_trans: 0.25, time_us: 17, ..TrialRecord::empty(LossKind::MaxMixture, 1) },
            TrialRecord {
                trial_id: 4,
                error_rot: Some(1.5),
                error_vector: vec![1.0, 0.0, 0.0],
                covariance: Some(DMatrix::identity(3, 3)),
                termination: Termination::CostChange,
                ..TrialRecord::empty(LossKind::SumMixture, 2)
            },
        ];
        let mut buf = Vec::new();
        write_trials_csv(&mut buf, &meta(), &records, true).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# seed=7 version=0.1.0 config_hash=abc"));
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.next(), Some("3,mm,1,0.25,,0,17,gradient,"));
        let rows = read_trials_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].nees, Some(1.0 / 3.0));
        assert_eq!(rows[1].termination, Termination::CostChange);

        let mut masked = Vec::new();
        write_trials_csv(&mut masked, &meta(), &records, false).unwrap();
        assert_eq!(read_trials_csv(masked.as_slice()).unwrap()[0].time_us, 0);
    }

    #[test]
    fn rejects_foreign_header() {
        assert!(read_trials_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
