//! Result files.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{FecComparison, RunError, SweepSpec, Trial, TrialRecord};

/// Everything a sweep produced, with the resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResults {
    pub spec: SweepSpec,
    pub trials: Vec<Trial>,
    pub fec: Option<Vec<FecComparison>>,
}

impl SweepResults {
    pub fn records(&self) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().map(|t| &t.record)
    }

    pub fn failures(&self) -> impl Iterator<Item = (&TrialRecord, &str)> {
        self.trials
            .iter()
            .filter_map(|t| t.diagnostics.failure.as_deref().map(|f| (&t.record, f)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize to JSON")
    }

    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Output(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown format `{other}` (csv or json)")),
        }
    }
}

/// Records as CSV with a header row.
pub fn write_csv<'a>(
    records: impl IntoIterator<Item = &'a TrialRecord>,
) -> Result<String, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut any = false;
    for r in records {
        w.serialize(r)
            .map_err(|e| RunError::Output(e.to_string()))?;
        any = true;
    }
    if !any {
        return Err(RunError::Output("no records to write".into()));
    }
    let bytes = w
        .into_inner()
        .map_err(|e| RunError::Output(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| RunError::Output(e.to_string()))
}

pub fn read_csv(text: &str) -> Result<Vec<TrialRecord>, RunError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| RunError::Output(e.to_string()))
}

/// Writes `results.csv` or `results.json` into `dir`, plus the resolved
/// configuration as `spec.resolved.toml`. A codebook comparison, when
/// present, goes to `fec.json`. Returns the written paths.
pub fn write_outputs(
    results: &SweepResults,
    dir: &Path,
    format: OutputFormat,
) -> Result<Vec<PathBuf>, RunError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let main = match format {
        OutputFormat::Csv => {
            let p = dir.join("results.csv");
            fs::write(&p, write_csv(results.records())?)?;
            p
        }
        OutputFormat::Json => {
            if results.trials.is_empty() {
                return Err(RunError::Output("no records to write".into()));
            }
            let p = dir.join("results.json");
            fs::write(&p, results.to_json())?;
            p
        }
    };
    written.push(main);
    let p = dir.join("spec.resolved.toml");
    fs::write(&p, results.spec.to_toml())?;
    written.push(p);
    if let Some(fec) = &results.fec {
        let p = dir.join("fec.json");
        fs::write(&p, serde_json::to_string_pretty(fec).expect("serializable"))?;
        written.push(p);
    }
    Ok(written)
}
