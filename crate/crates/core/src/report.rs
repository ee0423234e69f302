//! Report envelope, content hashing, and JSON/CSV emission.

use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::pipeline::Outcome;
use crate::scenario::Scenario;

pub const SCHEMA: &str = "riemoc-report/1";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Keys left out of the content hash.
const VOLATILE: [&str; 2] = ["timing", "content_hash"];

/// Named columns of per-node values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Series {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Series {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A finished report as a JSON object with sorted keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub value: Value,
}

fn hash_of(value: &Value) -> String {
    let mut stripped = value.clone();
    if let Value::Object(map) = &mut stripped {
        for k in VOLATILE {
            map.remove(k);
        }
    }
    let bytes = serde_json::to_vec(&stripped).expect("report serializes");
    hex::encode(Sha256::digest(bytes))
}

impl Report {
    pub fn new(scenario: &Scenario, outcome: &Outcome, elapsed_ms: f64) -> Self {
        let mut map = Map::new();
        map.insert("schema".into(), SCHEMA.into());
        map.insert("tool_version".into(), TOOL_VERSION.into());
        map.insert("command".into(), outcome.command.as_str().into());
        let echo = serde_json::to_value(scenario).expect("scenario serializes");
        map.insert("scenario_hash".into(), hash_of(&echo).into());
        map.insert("scenario".into(), echo);
        map.insert(
            "verdict".into(),
            outcome.verdict.map_or(Value::Null, |v| Value::String(v.as_str().into())),
        );
        map.insert("results".into(), Value::Object(outcome.sections.clone()));
        let mut timing = Map::new();
        timing.insert("elapsed_ms".into(), elapsed_ms.into());
        map.insert("timing".into(), Value::Object(timing));
        let mut value = Value::Object(map);
        let hash = hash_of(&value);
        value.as_object_mut().unwrap().insert("content_hash".into(), hash.into());
        Report { value }
    }

    pub fn content_hash(&self) -> &str {
        self.value["content_hash"].as_str().unwrap_or_default()
    }

    /// Recomputes the hash of the current content.
    pub fn verify_hash(&self) -> bool {
        hash_of(&self.value) == self.content_hash()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.value).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        Ok(Report { value: serde_json::from_str(text)? })
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(path, text)
    }
}

pub fn write_csv(series: &Series, path: &Path) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    series.write_csv(std::io::BufWriter::new(file)).map_err(std::io::Error::other)
}
