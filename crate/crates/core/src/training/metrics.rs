//! Line-delimited JSON metrics.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Only filled when wall-clock recording is enabled.
    pub wall_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(File::create(path)?),
        })
    }

    /// Keeps only records with `step < resume_step`, then appends.
    pub fn resume(path: &Path, resume_step: u64) -> Result<Self> {
        let kept: Vec<String> = if path.exists() {
            BufReader::new(File::open(path)?)
                .lines()
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .filter(|l| {
                    serde_json::from_str::<MetricRecord>(l).is_ok_and(|r| r.step < resume_step)
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut f = File::create(path)?;
        for l in &kept {
            writeln!(f, "{l}")?;
        }
        drop(f);
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(OpenOptions::new().append(true).open(path)?),
        })
    }

    pub fn write(&mut self, rec: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| crate::error::StarError::InvalidArgument(format!("metrics: {e}")))
        })
        .collect()
}
