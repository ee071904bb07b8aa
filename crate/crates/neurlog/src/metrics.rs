//! Metrics stream (one JSON object per line) and the CSV summary.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// One evaluation point of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub experiment: String,
    pub iteration: u64,
    pub epoch: usize,
    /// Mean training loss since the previous record; absent before training.
    pub loss: Option<f64>,
    pub accuracy: f64,
    /// Learnable probabilities by name.
    pub params: BTreeMap<String, f64>,
    /// Task-specific measurements.
    pub extra: BTreeMap<String, f64>,
    pub compilations: u64,
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    records: Vec<Record>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(MetricsWriter { path: path.to_path_buf(), out: BufWriter::new(f), records: Vec::new() })
    }

    pub fn write(&mut self, r: Record) -> Result<()> {
        serde_json::to_writer(&mut self.out, &r)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Writes the summary next to the metrics file with extension `csv`.
    pub fn finish(mut self) -> Result<(PathBuf, Vec<Record>)> {
        self.out.flush()?;
        let csv_path = self.path.with_extension("csv");
        write_summary(&csv_path, &self.records)?;
        Ok((csv_path, self.records))
    }
}

/// Header `iteration,loss,accuracy` followed by one column per parameter.
pub fn write_summary(path: &Path, records: &[Record]) -> Result<()> {
    let params: Vec<&String> = records.first().map(|r| r.params.keys().collect()).unwrap_or_default();
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["iteration".to_string(), "loss".into(), "accuracy".into()];
    header.extend(params.iter().map(|p| p.to_string()));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.iteration.to_string(),
            r.loss.map(|l| l.to_string()).unwrap_or_default(),
            r.accuracy.to_string(),
        ];
        row.extend(params.iter().map(|p| r.params.get(*p).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing {}", path.display())))
        .collect()
}
