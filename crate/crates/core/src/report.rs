//! Training reports: a JSON document with every metric and a flat CSV table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ApSummary;

/// Mean training losses over the steps since the previous curve point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWindow {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    /// Auxiliary terms as they enter the total (wrapped when uncertainty weighting is on).
    pub aux: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Parameter updates completed.
    pub step: usize,
    pub lr: f64,
    pub loss: Option<LossWindow>,
    pub ap: ApSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_digest: String,
    pub seed: u64,
    pub steps: usize,
    pub curves: Vec<CurvePoint>,
    /// Final evaluation.
    pub ap: ApSummary,
    pub wall_time_s: Option<f64>,
}

#[derive(Serialize)]
struct CsvRow {
    step: usize,
    lr: f64,
    loss_total: Option<f64>,
    loss_cls: Option<f64>,
    loss_reg: Option<f64>,
    loss_aux: Option<f64>,
    ap: f64,
    ap_small: Option<f64>,
    ap_medium: Option<f64>,
    ap_large: Option<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Header plus one row per curve point; missing values are empty cells.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.curves {
            let l = p.loss.as_ref();
            w.serialize(CsvRow {
                step: p.step,
                lr: p.lr,
                loss_total: l.map(|l| l.total),
                loss_cls: l.map(|l| l.cls),
                loss_reg: l.map(|l| l.reg),
                loss_aux: l.map(|l| l.aux),
                ap: p.ap.overall,
                ap_small: p.ap.small,
                ap_medium: p.ap.medium,
                ap_large: p.ap.large,
            })
            .map_err(|e| Error::Serde(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Writes `report.json` and `curves.csv` into `dir`.
    pub fn emit(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let table = dir.join("curves.csv");
        std::fs::write(&table, self.to_csv()?).map_err(|e| Error::io(&table, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn report() -> MetricsReport {
        let ap = |o: f64| ApSummary {
            overall: o,
            small: Some(o / 3.0),
            medium: None,
            large: Some(0.1 + o),
            per_class: BTreeMap::from([(0, o), (2, 1.0 / 7.0)]),
        };
        MetricsReport {
            config_digest: "d".repeat(64),
            seed: 3,
            steps: 20,
            curves: vec![
                CurvePoint {
                    step: 0,
                    lr: 0.01,
                    loss: None,
                    ap: ap(0.0),
                },
                CurvePoint {
                    step: 20,
                    lr: 0.001,
                    loss: Some(LossWindow {
                        total: 1.0 / 3.0,
                        cls: 0.1,
                        reg: 0.2 + 1e-17,
                        aux: 0.0,
                    }),
                    ap: ap(0.123456789012345678),
                },
            ],
            ap: ap(0.123456789012345678),
            wall_time_s: None,
        }
    }

    #[test]
    fn json_round_trip_exact() {
        let r = report();
        assert_eq!(MetricsReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn csv_one_row_per_point() {
        let text = report().to_csv().unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("step,lr,loss_total"));
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows[1][0].parse::<usize>().unwrap(), 20);
        assert_eq!(rows[1][2].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(&rows[0][2], "");
    }

    #[test]
    fn emit_to_unwritable_dir_fails() {
        assert!(report()
            .emit(Path::new("/proc/definitely/not/here"))
            .is_err());
    }
}
