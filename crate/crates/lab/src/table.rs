//! The metrics CSV: one row per `(experiment_id, metric, value, n, seed)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IoContext, LabError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment_id: String,
    pub metric: String,
    pub value: f64,
    /// Sample count behind the value.
    pub n: u64,
    pub seed: u64,
}

/// Rows in insertion order; the CSV is a pure function of the rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    rows: Vec<MetricRow>,
}

impl MetricsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, experiment_id: &str, metric: &str, value: f64, n: usize, seed: u64) {
        self.rows.push(MetricRow {
            experiment_id: experiment_id.into(),
            metric: metric.into(),
            value,
            n: n as u64,
            seed,
        });
    }

    pub fn extend(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    /// Value of the last row with this experiment and metric.
    pub fn get(&self, experiment_id: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.experiment_id == experiment_id && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)
                .map_err(|e| LabError::format("metrics csv", e.to_string()))?;
        }
        if self.rows.is_empty() {
            w.write_record(["experiment_id", "metric", "value", "n", "seed"])
                .map_err(|e| LabError::format("metrics csv", e.to_string()))?;
        }
        w.into_inner()
            .map_err(|e| LabError::format("metrics csv", e.to_string()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<MetricRow>, _>>()
            .map_err(|e| LabError::format("metrics csv", e.to_string()))?;
        Ok(MetricsTable { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read(path).at(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_and_lookup() {
        let mut t = MetricsTable::new();
        t.push("a", "ed", 0.5, 10, 3);
        t.push("a", "ed", 0.25, 10, 3);
        let text = String::from_utf8(t.to_csv().unwrap()).unwrap();
        assert!(text.starts_with("experiment_id,metric,value,n,seed\n"));
        assert_eq!(t.get("a", "ed"), Some(0.25));
        assert_eq!(t.get("a", "x"), None);
        let empty = String::from_utf8(MetricsTable::new().to_csv().unwrap()).unwrap();
        assert_eq!(empty, "experiment_id,metric,value,n,seed\n");
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_lossless(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..20), seed in any::<u64>()) {
            let mut t = MetricsTable::new();
            for (i, v) in values.iter().enumerate() {
                t.push("run,with \"quotes\"", &format!("m{i}"), *v, i, seed);
            }
            let back = MetricsTable::from_csv(&t.to_csv().unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
