//! Tabular metric series keyed by run id and iteration, stored as CSV or JSON lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ail::IterMetrics;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("row has {got} values for {expected} columns")]
    Width { expected: usize, got: usize },
    #[error("iteration {next} after {prev} in run `{run}`")]
    Order {
        run: String,
        prev: usize,
        next: usize,
    },
    #[error("malformed metrics file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Picks the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run: String,
    pub iteration: usize,
    pub values: Vec<f64>,
}

/// Named numeric columns over (run, iteration) rows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsFrame {
    pub columns: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsFrame {
    pub fn new(columns: Vec<String>) -> Self {
        MetricsFrame {
            columns,
            rows: Vec::new(),
        }
    }

    /// Appends a row; iterations must increase within a run.
    pub fn push(
        &mut self,
        run: &str,
        iteration: usize,
        values: Vec<f64>,
    ) -> Result<(), MetricsError> {
        if values.len() != self.columns.len() {
            return Err(MetricsError::Width {
                expected: self.columns.len(),
                got: values.len(),
            });
        }
        if let Some(prev) = self.rows.iter().rev().find(|r| r.run == run) {
            if iteration <= prev.iteration {
                return Err(MetricsError::Order {
                    run: run.to_string(),
                    prev: prev.iteration,
                    next: iteration,
                });
            }
        }
        self.rows.push(MetricsRow {
            run: run.to_string(),
            iteration,
            values,
        });
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r.values[j]).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.values.iter().all(|v| v.is_finite()))
    }

    /// Per-iteration training metrics of one run.
    pub fn from_iter_metrics(run: &str, metrics: &[IterMetrics]) -> Self {
        let columns = [
            "env_return",
            "entropy",
            "disc_loss",
            "disc_penalty",
            "reward_mean",
            "reward_min",
            "reward_max",
            "logit_min",
            "logit_q25",
            "logit_median",
            "logit_q75",
            "logit_max",
            "logit_mean",
            "guard_count",
            "clip_fraction",
            "value_loss",
        ];
        let mut f = MetricsFrame::new(columns.iter().map(|s| s.to_string()).collect());
        for m in metrics {
            let l = &m.logits;
            f.push(
                run,
                m.iteration,
                vec![
                    m.env_return,
                    m.entropy,
                    m.disc_loss,
                    m.disc_penalty,
                    m.reward_mean,
                    m.reward_min,
                    m.reward_max,
                    l.min,
                    l.q25,
                    l.median,
                    l.q75,
                    l.max,
                    l.mean,
                    m.guard_count as f64,
                    m.clip_fraction,
                    m.value_loss,
                ],
            )
            .expect("fixed width, increasing iterations");
        }
        f
    }
}

/// Writes `frame` to `path`. Floats use the shortest text that parses back
/// to the same bits, so a round trip is lossless.
pub fn emit(frame: &MetricsFrame, path: &Path, format: Format) -> Result<(), MetricsError> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        Format::Csv => {
            let mut c = csv::Writer::from_writer(&mut w);
            let mut header = vec!["run".to_string(), "iteration".to_string()];
            header.extend(frame.columns.iter().cloned());
            c.write_record(&header)?;
            for r in &frame.rows {
                let mut rec = vec![r.run.clone(), r.iteration.to_string()];
                rec.extend(r.values.iter().map(|v| v.to_string()));
                c.write_record(&rec)?;
            }
            c.flush()?;
        }
        Format::Jsonl => {
            for r in &frame.rows {
                let mut obj = serde_json::Map::new();
                obj.insert("run".into(), r.run.clone().into());
                obj.insert("iteration".into(), r.iteration.into());
                for (c, &v) in frame.columns.iter().zip(&r.values) {
                    let json = serde_json::Number::from_f64(v)
                        .map(serde_json::Value::Number)
                        .unwrap_or(serde_json::Value::Null);
                    obj.insert(c.clone(), json);
                }
                serde_json::to_writer(&mut w, &serde_json::Value::Object(obj))
                    .map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a frame written by [`emit`]. JSON-lines files carry no header, so
/// their columns come from the first row in file order.
pub fn read_frame(path: &Path, format: Format) -> Result<MetricsFrame, MetricsError> {
    match format {
        Format::Csv => {
            let mut r = csv::Reader::from_path(path)?;
            let header = r.headers()?.clone();
            if header.len() < 2 || &header[0] != "run" || &header[1] != "iteration" {
                return Err(MetricsError::Parse(
                    "header must start with run,iteration".into(),
                ));
            }
            let mut frame = MetricsFrame::new(header.iter().skip(2).map(String::from).collect());
            for rec in r.records() {
                let rec = rec?;
                let it = rec[1]
                    .parse()
                    .map_err(|e| MetricsError::Parse(format!("iteration: {e}")))?;
                let values = rec
                    .iter()
                    .skip(2)
                    .map(|v| {
                        v.parse::<f64>()
                            .map_err(|e| MetricsError::Parse(format!("{v}: {e}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                frame.push(&rec[0], it, values)?;
            }
            Ok(frame)
        }
        Format::Jsonl => {
            let mut frame: Option<MetricsFrame> = None;
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let obj: serde_json::Map<String, serde_json::Value> =
                    serde_json::from_str(&line).map_err(|e| MetricsError::Parse(e.to_string()))?;
                let f = frame.get_or_insert_with(|| {
                    MetricsFrame::new(
                        obj.keys()
                            .filter(|k| *k != "run" && *k != "iteration")
                            .cloned()
                            .collect(),
                    )
                });
                let run = obj
                    .get("run")
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| MetricsError::Parse("missing run".into()))?;
                let it = obj
                    .get("iteration")
                    .and_then(|v| v.as_u64())
                    .ok_or_else(|| MetricsError::Parse("missing iteration".into()))?
                    as usize;
                let values = f
                    .columns
                    .iter()
                    .map(|c| match obj.get(c) {
                        Some(serde_json::Value::Null) => Ok(f64::NAN),
                        Some(v) => v
                            .as_f64()
                            .ok_or_else(|| MetricsError::Parse(format!("{c} is not a number"))),
                        None => Err(MetricsError::Parse(format!("missing column {c}"))),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                f.push(run, it, values)?;
            }
            Ok(frame.unwrap_or_default())
        }
    }
}
